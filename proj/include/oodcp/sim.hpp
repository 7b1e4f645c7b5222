#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "oodcp/common.hpp"

namespace oodcp {

using Rgb = std::array<uint8_t, 3>;

struct TexturePattern {
  enum class Kind { solid, stripes, checker };
  Kind kind = Kind::solid;
  Rgb a{0, 0, 0};
  Rgb b{0, 0, 0};
  float period = 1.0f;  // meters, stripes/checker only
};

struct Segment {
  float x1, y1, x2, y2;
  int texture;
};

struct PlacedObject {
  enum class Shape { box, cone };
  Shape shape = Shape::box;
  float cx = 0, cy = 0;
  float size = 1.0f;   // box edge length / cone base width
  float angle = 0.0f;  // radians
  int texture = 0;
};

struct WorldSpec {
  std::string id;
  std::vector<Segment> walls;
  std::vector<PlacedObject> objects;
  int floor_texture = 0;
  int ceiling_texture = 1;
  std::map<int, TexturePattern> palette;

  // Walls plus the edges of every placed object.
  std::vector<Segment> all_segments() const;
  // Axis-aligned bounds over wall endpoints: {min_x, min_y, max_x, max_y}.
  std::array<float, 4> bounds() const;
};

std::vector<Segment> object_segments(const PlacedObject& obj);
// Checks palette coverage and boundary closure prerequisites.
void validate_world(const WorldSpec& world);

struct CarState {
  float x = 0, y = 0;
  float heading = 0;   // radians
  float speed = 1.0f;  // m/s, constant within an episode
};

constexpr float kCarRadius = 0.15f;
constexpr float kTurnGain = 2.0f;
constexpr float kWallHeight = 1.0f;
constexpr float kCameraHeight = 0.5f;
constexpr int kHorizon = 16;
constexpr float kDt = 0.125f;
constexpr float kMaxSteeringDeg = 30.0f;

struct RenderConfig {
  int width = 32;
  int height = 18;
  float fov_rad = 1.221730f;  // 70 degrees horizontal
};

// Planar CHW RGB bytes, column-raycast walls plus per-pixel floor/ceiling.
std::vector<uint8_t> render_observation(const WorldSpec& world, const CarState& car,
                                        const RenderConfig& cfg);

CarState step_dynamics(const CarState& car, float steering_deg, float dt);

bool inside_boundary(const WorldSpec& world, float x, float y);
bool in_collision(const WorldSpec& world, float x, float y, float radius);

struct Motion {
  std::vector<uint8_t> observation;    // C*H*W
  std::array<float, 16> actions{};     // degrees
  std::array<uint8_t, 16> labels{};    // absorbing collision flags
  uint32_t episode = 0;
  uint32_t step = 0;
};

struct Dataset {
  int c = 3, h = 18, w = 32;
  int horizon = kHorizon;
  std::vector<Motion> motions;
  double collision_rate = 0.0;  // fraction of motions whose window collides
};

// Labels are absorbing; simulation continues after a hit but labels stay 1.
std::pair<std::array<uint8_t, 16>, CarState> roll_motion(const WorldSpec& world,
                                                         const CarState& car,
                                                         const std::array<float, 16>& actions_deg,
                                                         float dt, float radius = kCarRadius);

struct CollectConfig {
  int n_motions = 0;
  uint64_t seed = 0;
  RenderConfig render;
  float dt = kDt;
  int episode_max_steps = 128;
  int steering_hold = 4;  // steps each random steering value is held
  int shards = 8;         // fixed shard count keeps results thread-independent
  int n_threads = 0;      // 0 = hardware
};

Dataset collect_dataset(const WorldSpec& world, const CollectConfig& cfg);

enum class ShiftKind { texture_swap, rearrange, add_cones };
ShiftKind parse_shift_kind(const std::string& name);
std::string shift_kind_name(ShiftKind kind);

WorldSpec make_shifted_world(const WorldSpec& base, ShiftKind kind, uint64_t seed = 0);

// Shared corridor geometry with one of the training palettes (0, 1, 2).
WorldSpec make_corridor_world(int palette_variant);

void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

std::string world_to_text(const WorldSpec& world);
WorldSpec parse_world_text(const std::string& text);
void save_world(const std::string& path, const WorldSpec& world);
WorldSpec load_world(const std::string& path);

}  // namespace oodcp
