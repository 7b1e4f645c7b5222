#include "oodcp/sim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

namespace oodcp {

namespace {

constexpr float kPi = 3.14159265358979323846f;

float deg2rad(float d) { return d * (kPi / 180.0f); }

float point_segment_distance(float px, float py, const Segment& s) {
  const float ex = s.x2 - s.x1, ey = s.y2 - s.y1;
  const float qx = px - s.x1, qy = py - s.y1;
  const float len2 = ex * ex + ey * ey;
  float t = len2 > 0.0f ? (qx * ex + qy * ey) / len2 : 0.0f;
  t = std::min(1.0f, std::max(0.0f, t));
  const float dx = qx - t * ex, dy = qy - t * ey;
  return std::sqrt(dx * dx + dy * dy);
}

int64_t floor_units(float x, float period) {
  return static_cast<int64_t>(std::floor(x / period));
}

Rgb sample_pattern(const TexturePattern& t, float u, float v) {
  switch (t.kind) {
    case TexturePattern::Kind::solid: return t.a;
    case TexturePattern::Kind::stripes: return (floor_units(u, t.period) & 1) == 0 ? t.a : t.b;
    case TexturePattern::Kind::checker:
      return ((floor_units(u, t.period) + floor_units(v, t.period)) & 1) == 0 ? t.a : t.b;
  }
  throw ContractError("unknown texture kind");
}

const TexturePattern& pattern_for(const WorldSpec& world, int texture_id) {
  auto it = world.palette.find(texture_id);
  if (it == world.palette.end())
    throw ConfigError("texture id " + std::to_string(texture_id) + " missing from palette");
  return it->second;
}

struct RayHit {
  float t = -1.0f;  // euclidean distance along the unit ray
  float u = 0.0f;   // meters along the segment
  int segment = -1;
};

RayHit cast_ray(const std::vector<Segment>& segments, float px, float py, float dx, float dy) {
  RayHit best;
  for (size_t i = 0; i < segments.size(); ++i) {
    const Segment& s = segments[i];
    const float ex = s.x2 - s.x1, ey = s.y2 - s.y1;
    const float denom = dx * ey - dy * ex;
    if (std::fabs(denom) < 1e-12f) continue;
    const float qx = s.x1 - px, qy = s.y1 - py;
    const float t = (qx * ey - qy * ex) / denom;
    const float u = (qx * dy - qy * dx) / denom;
    if (t > 1e-6f && u >= 0.0f && u <= 1.0f && (best.segment < 0 || t < best.t)) {
      best.t = t;
      best.u = u * std::sqrt(ex * ex + ey * ey);
      best.segment = static_cast<int>(i);
    }
  }
  return best;
}

std::atomic<bool> g_steering_warned{false};

}  // namespace

std::vector<Segment> object_segments(const PlacedObject& obj) {
  const float c = std::cos(obj.angle), s = std::sin(obj.angle);
  auto place = [&](float lx, float ly) {
    return std::pair<float, float>{obj.cx + lx * c - ly * s, obj.cy + lx * s + ly * c};
  };
  std::vector<std::pair<float, float>> pts;
  if (obj.shape == PlacedObject::Shape::box) {
    const float h = obj.size * 0.5f;
    pts = {place(-h, -h), place(h, -h), place(h, h), place(-h, h)};
  } else {
    const float h = obj.size * 0.5f;
    pts = {place(h, 0.0f), place(-h, -h), place(-h, h)};
  }
  std::vector<Segment> out;
  for (size_t i = 0; i < pts.size(); ++i) {
    const auto& a = pts[i];
    const auto& b = pts[(i + 1) % pts.size()];
    out.push_back({a.first, a.second, b.first, b.second, obj.texture});
  }
  return out;
}

std::vector<Segment> WorldSpec::all_segments() const {
  std::vector<Segment> out = walls;
  for (const auto& obj : objects) {
    auto segs = object_segments(obj);
    out.insert(out.end(), segs.begin(), segs.end());
  }
  return out;
}

std::array<float, 4> WorldSpec::bounds() const {
  if (walls.empty()) throw ConfigError("world '" + id + "' has no walls");
  std::array<float, 4> b{walls[0].x1, walls[0].y1, walls[0].x1, walls[0].y1};
  for (const auto& s : walls) {
    b[0] = std::min({b[0], s.x1, s.x2});
    b[1] = std::min({b[1], s.y1, s.y2});
    b[2] = std::max({b[2], s.x1, s.x2});
    b[3] = std::max({b[3], s.y1, s.y2});
  }
  return b;
}

void validate_world(const WorldSpec& world) {
  if (world.walls.size() < 3)
    throw ConfigError("world '" + world.id + "' cannot be closed with fewer than 3 walls");
  pattern_for(world, world.floor_texture);
  pattern_for(world, world.ceiling_texture);
  for (const auto& s : world.walls) pattern_for(world, s.texture);
  for (const auto& o : world.objects) pattern_for(world, o.texture);
  for (const auto& [id, t] : world.palette) {
    if (t.kind != TexturePattern::Kind::solid && t.period <= 0.0f)
      throw ConfigError("texture " + std::to_string(id) + " needs a positive period");
  }
}

bool inside_boundary(const WorldSpec& world, float x, float y) {
  const auto b = world.bounds();
  const float m = 1e-3f;
  return x > b[0] + m && x < b[2] - m && y > b[1] + m && y < b[3] - m;
}

bool in_collision(const WorldSpec& world, float x, float y, float radius) {
  for (const auto& s : world.all_segments())
    if (point_segment_distance(x, y, s) <= radius) return true;
  return false;
}

std::vector<uint8_t> render_observation(const WorldSpec& world, const CarState& car,
                                        const RenderConfig& cfg) {
  if (cfg.width < 2 || cfg.height < 2 || cfg.fov_rad <= 0.0f || cfg.fov_rad >= kPi)
    throw ConfigError("bad render config");
  if (!inside_boundary(world, car.x, car.y))
    throw PlacementError("car at (" + std::to_string(car.x) + "," + std::to_string(car.y) +
                         ") is outside world '" + world.id + "'");
  if (in_collision(world, car.x, car.y, 1e-4f))
    throw PlacementError("car is embedded in a wall of world '" + world.id + "'");

  const int W = cfg.width, H = cfg.height;
  const float fx = (W * 0.5f) / std::tan(cfg.fov_rad * 0.5f);
  const float fy = fx;  // square pixels
  const float half_h = H * 0.5f;
  const auto segments = world.all_segments();
  const TexturePattern& floor_tex = pattern_for(world, world.floor_texture);
  const TexturePattern& ceil_tex = pattern_for(world, world.ceiling_texture);

  std::vector<uint8_t> img(static_cast<size_t>(3) * H * W);
  auto put = [&](int x, int y, const Rgb& c) {
    for (int ch = 0; ch < 3; ++ch)
      img[(static_cast<size_t>(ch) * H + y) * W + x] = c[static_cast<size_t>(ch)];
  };

  for (int col = 0; col < W; ++col) {
    const float k = 2.0f * (col + 0.5f) / W - 1.0f;
    const float alpha = std::atan(k * std::tan(cfg.fov_rad * 0.5f));
    const float phi = car.heading - alpha;  // screen-right maps to clockwise
    const float dx = std::cos(phi), dy = std::sin(phi);
    const RayHit hit = cast_ray(segments, car.x, car.y, dx, dy);
    if (hit.segment < 0)
      throw ContractError("ray escaped world '" + world.id + "': boundary is not closed");
    const float cos_a = std::cos(alpha);
    const float d_perp = std::max(hit.t * cos_a, 0.05f);
    const TexturePattern& wall_tex = pattern_for(world, segments[hit.segment].texture);

    const float top = half_h - (kWallHeight - kCameraHeight) * fy / d_perp;
    const float bottom = half_h + kCameraHeight * fy / d_perp;
    for (int row = 0; row < H; ++row) {
      const float yc = row + 0.5f;
      if (yc >= top && yc <= bottom) {
        const float z = kCameraHeight + (half_h - yc) * d_perp / fy;
        put(col, row, sample_pattern(wall_tex, hit.u, z));
      } else if (yc < half_h) {
        const float dist = std::min((kWallHeight - kCameraHeight) * fy / (half_h - yc), 100.0f);
        const float px = car.x + dx * dist / cos_a, py = car.y + dy * dist / cos_a;
        put(col, row, sample_pattern(ceil_tex, px, py));
      } else {
        const float dist = std::min(kCameraHeight * fy / (yc - half_h), 100.0f);
        const float px = car.x + dx * dist / cos_a, py = car.y + dy * dist / cos_a;
        put(col, row, sample_pattern(floor_tex, px, py));
      }
    }
  }
  return img;
}

CarState step_dynamics(const CarState& car, float steering_deg, float dt) {
  if (!std::isfinite(car.x) || !std::isfinite(car.y) || !std::isfinite(car.heading) ||
      !std::isfinite(car.speed) || !std::isfinite(steering_deg) || !std::isfinite(dt))
    throw NumericError("non-finite dynamics input");
  if (car.speed <= 0.0f) throw ContractError("car speed must be positive");
  float s = steering_deg;
  if (s < -kMaxSteeringDeg || s > kMaxSteeringDeg) {
    s = std::min(kMaxSteeringDeg, std::max(-kMaxSteeringDeg, s));
    if (!g_steering_warned.exchange(true))
      std::fprintf(stderr, "warning: steering %.2f deg clamped to [%.0f,%.0f]\n",
                   static_cast<double>(steering_deg), static_cast<double>(-kMaxSteeringDeg),
                   static_cast<double>(kMaxSteeringDeg));
  }
  CarState next = car;
  next.heading = car.heading + deg2rad(s) * dt * kTurnGain;
  next.x = car.x + car.speed * dt * std::cos(next.heading);
  next.y = car.y + car.speed * dt * std::sin(next.heading);
  return next;
}

std::pair<std::array<uint8_t, 16>, CarState> roll_motion(const WorldSpec& world,
                                                         const CarState& car,
                                                         const std::array<float, 16>& actions_deg,
                                                         float dt, float radius) {
  if (in_collision(world, car.x, car.y, radius))
    throw PlacementError("roll_motion start state is already in collision");
  std::array<uint8_t, 16> labels{};
  CarState state = car;
  bool hit = false;
  for (int t = 0; t < kHorizon; ++t) {
    state = step_dynamics(state, actions_deg[static_cast<size_t>(t)], dt);
    if (!hit &&
        (in_collision(world, state.x, state.y, radius) || !inside_boundary(world, state.x, state.y)))
      hit = true;
    labels[static_cast<size_t>(t)] = hit ? 1 : 0;
  }
  return {labels, state};
}

namespace {

CarState sample_spawn(const WorldSpec& world, Rng& rng) {
  const auto b = world.bounds();
  for (int tries = 0; tries < 1000; ++tries) {
    CarState car;
    car.x = static_cast<float>(rng.uniform(b[0] + 0.3, b[2] - 0.3));
    car.y = static_cast<float>(rng.uniform(b[1] + 0.3, b[3] - 0.3));
    car.heading = static_cast<float>(rng.uniform(0.0, 2.0 * kPi));
    car.speed = 1.0f;
    if (inside_boundary(world, car.x, car.y) &&
        !in_collision(world, car.x, car.y, kCarRadius + 0.15f))
      return car;
  }
  throw ContractError("world '" + world.id + "' has no free space to spawn in");
}

std::vector<Motion> collect_shard(const WorldSpec& world, const CollectConfig& cfg, int shard,
                                  int quota) {
  std::vector<Motion> out;
  Rng rng(derive_seed(cfg.seed, 1000 + static_cast<uint64_t>(shard)));
  uint32_t episode_local = 0;
  while (static_cast<int>(out.size()) < quota) {
    const uint32_t episode_id = static_cast<uint32_t>(shard) * 4000000u + episode_local++;
    CarState car = sample_spawn(world, rng);
    int step_in_episode = 0;
    float steering = 0.0f;
    bool episode_done = false;
    while (!episode_done && static_cast<int>(out.size()) < quota) {
      Motion m;
      m.episode = episode_id;
      m.step = static_cast<uint32_t>(step_in_episode);
      m.observation = render_observation(world, car, cfg.render);
      bool hit = false;
      for (int t = 0; t < kHorizon; ++t) {
        if ((step_in_episode + t) % cfg.steering_hold == 0)
          steering = static_cast<float>(
              rng.uniform(-static_cast<double>(kMaxSteeringDeg), kMaxSteeringDeg));
        m.actions[static_cast<size_t>(t)] = steering;
        car = step_dynamics(car, steering, cfg.dt);
        if (!hit && (in_collision(world, car.x, car.y, kCarRadius) ||
                     !inside_boundary(world, car.x, car.y)))
          hit = true;
        m.labels[static_cast<size_t>(t)] = hit ? 1 : 0;
      }
      step_in_episode += kHorizon;
      out.push_back(std::move(m));
      if (hit || step_in_episode >= cfg.episode_max_steps) episode_done = true;
    }
  }
  return out;
}

}  // namespace

Dataset collect_dataset(const WorldSpec& world, const CollectConfig& cfg) {
  if (cfg.n_motions < 0) throw ContractError("n_motions must be non-negative");
  validate_world(world);
  Dataset ds;
  ds.c = 3;
  ds.h = cfg.render.height;
  ds.w = cfg.render.width;
  ds.horizon = kHorizon;
  if (cfg.n_motions == 0) return ds;

  const int shards = std::max(1, cfg.shards);
  const int quota = (cfg.n_motions + shards - 1) / shards;
  std::vector<std::vector<Motion>> results(static_cast<size_t>(shards));
  parallel_for(
      static_cast<size_t>(shards),
      [&](size_t i) { results[i] = collect_shard(world, cfg, static_cast<int>(i), quota); },
      cfg.n_threads);
  for (auto& shard_motions : results)
    for (auto& m : shard_motions) {
      if (static_cast<int>(ds.motions.size()) < cfg.n_motions) ds.motions.push_back(std::move(m));
    }
  int collided = 0;
  for (const auto& m : ds.motions) collided += m.labels[15] != 0;
  ds.collision_rate = static_cast<double>(collided) / static_cast<double>(ds.motions.size());
  return ds;
}

ShiftKind parse_shift_kind(const std::string& name) {
  if (name == "texture-swap") return ShiftKind::texture_swap;
  if (name == "rearrange") return ShiftKind::rearrange;
  if (name == "add-cones") return ShiftKind::add_cones;
  throw ConfigError("unknown shift kind '" + name + "'");
}

std::string shift_kind_name(ShiftKind kind) {
  switch (kind) {
    case ShiftKind::texture_swap: return "texture-swap";
    case ShiftKind::rearrange: return "rearrange";
    case ShiftKind::add_cones: return "add-cones";
  }
  throw ConfigError("unknown shift kind");
}

namespace {

TexturePattern solid(uint8_t r, uint8_t g, uint8_t b) {
  return {TexturePattern::Kind::solid, {r, g, b}, {0, 0, 0}, 1.0f};
}
TexturePattern stripes(Rgb a, Rgb b, float period) {
  return {TexturePattern::Kind::stripes, a, b, period};
}
TexturePattern checker(Rgb a, Rgb b, float period) {
  return {TexturePattern::Kind::checker, a, b, period};
}

// Held-out palette used by the texture-swap shift. Appearance statistics sit
// deliberately outside the training family: floor/ceiling luminance is
// inverted and the mid-toned solids become fine high-contrast patterns, while
// the geometry (and therefore every label) is untouched.
std::map<int, TexturePattern> test_palette() {
  return {
      {0, solid(235, 232, 225)},
      {1, solid(25, 28, 35)},
      {2, checker({15, 15, 18}, {245, 245, 250}, 0.12f)},
      {3, checker({240, 240, 245}, {20, 22, 28}, 0.15f)},
      {4, stripes({10, 10, 12}, {250, 248, 240}, 0.1f)},
      {5, solid(255, 120, 0)},
  };
}

}  // namespace

WorldSpec make_shifted_world(const WorldSpec& base, ShiftKind kind, uint64_t seed) {
  WorldSpec out = base;
  switch (kind) {
    case ShiftKind::texture_swap: {
      out.id = base.id + "+texture-swap";
      auto held = test_palette();
      for (auto& [id, pat] : out.palette) {
        auto it = held.find(id);
        if (it != held.end()) {
          pat = it->second;
        } else {
          const uint8_t v = static_cast<uint8_t>(96 + (id * 37) % 96);
          pat = solid(v, v, static_cast<uint8_t>(255 - v));
        }
      }
      return out;
    }
    case ShiftKind::rearrange: {
      out.id = base.id + "+rearrange";
      Rng rng(derive_seed(seed, 71));
      std::vector<std::array<float, 3>> poses;
      for (const auto& o : base.objects) poses.push_back({o.cx, o.cy, o.angle});
      for (size_t i = poses.size(); i > 1; --i)
        std::swap(poses[i - 1], poses[rng.uniform_index(i)]);
      for (size_t i = 0; i < out.objects.size(); ++i) {
        out.objects[i].cx = poses[i][0];
        out.objects[i].cy = poses[i][1];
        out.objects[i].angle = poses[i][2];
      }
      return out;
    }
    case ShiftKind::add_cones: {
      out.id = base.id + "+cones";
      if (!out.palette.count(5)) out.palette[5] = solid(255, 120, 0);
      Rng rng(derive_seed(seed, 72));
      const auto b = base.bounds();
      int placed = 0;
      for (int tries = 0; tries < 4000 && placed < 6; ++tries) {
        PlacedObject cone{PlacedObject::Shape::cone,
                          static_cast<float>(rng.uniform(b[0] + 0.6, b[2] - 0.6)),
                          static_cast<float>(rng.uniform(b[1] + 0.6, b[3] - 0.6)),
                          0.5f,
                          static_cast<float>(rng.uniform(0.0, 2.0 * kPi)),
                          5};
        bool clear = true;
        for (const auto& s : out.all_segments())
          if (point_segment_distance(cone.cx, cone.cy, s) < 1.0f) clear = false;
        if (!clear) continue;
        out.objects.push_back(cone);
        ++placed;
      }
      if (placed == 0) throw ContractError("no space for cones in world '" + base.id + "'");
      return out;
    }
  }
  throw ConfigError("unknown shift kind");
}

WorldSpec make_corridor_world(int palette_variant) {
  WorldSpec w;
  w.id = "corridor-v" + std::to_string(palette_variant);
  w.walls = {
      {0, 0, 10, 0, 2}, {10, 0, 10, 10, 2}, {10, 10, 0, 10, 2}, {0, 10, 0, 0, 2},
      {3.3f, 0, 3.3f, 6, 3}, {6.7f, 4, 6.7f, 10, 3},
  };
  w.objects = {
      {PlacedObject::Shape::box, 1.5f, 8.0f, 0.9f, 0.2f, 4},
      {PlacedObject::Shape::box, 5.0f, 2.0f, 1.0f, 0.0f, 4},
      {PlacedObject::Shape::box, 8.5f, 7.5f, 0.8f, 0.5f, 4},
      {PlacedObject::Shape::box, 5.0f, 8.3f, 0.7f, 1.0f, 4},
  };
  w.floor_texture = 0;
  w.ceiling_texture = 1;
  switch (palette_variant) {
    case 0:
      w.palette = {
          {0, solid(45, 42, 38)},
          {1, solid(225, 222, 215)},
          {2, stripes({205, 65, 60}, {115, 35, 30}, 0.5f)},
          {3, solid(75, 95, 205)},
          {4, checker({230, 145, 45}, {125, 75, 25}, 0.25f)},
          {5, solid(255, 120, 0)},
      };
      break;
    case 1:
      w.palette = {
          {0, checker({215, 210, 200}, {182, 176, 166}, 1.0f)},
          {1, solid(40, 44, 52)},
          {2, solid(70, 170, 95)},
          {3, stripes({60, 160, 170}, {30, 85, 95}, 0.4f)},
          {4, solid(150, 70, 180)},
          {5, solid(255, 120, 0)},
      };
      break;
    case 2:
      w.palette = {
          {0, solid(120, 114, 104)},
          {1, stripes({240, 238, 232}, {210, 206, 196}, 0.8f)},
          {2, checker({210, 180, 60}, {110, 90, 30}, 0.5f)},
          {3, solid(200, 70, 160)},
          {4, stripes({70, 200, 210}, {35, 100, 110}, 0.3f)},
          {5, solid(255, 120, 0)},
      };
      break;
    default:
      throw ConfigError("corridor palette variant must be 0, 1, or 2; got " +
                        std::to_string(palette_variant));
  }
  return w;
}

// --- dataset serialization ---------------------------------------------------

namespace {

constexpr uint32_t kDatasetVersion = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

void put_f32(std::vector<uint8_t>& out, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

struct ByteReader {
  const std::vector<uint8_t>& buf;
  size_t pos = 0;
  const std::string& path;

  uint32_t u32() {
    if (pos + 4 > buf.size()) throw IoError("truncated dataset file " + path);
    uint32_t v = static_cast<uint32_t>(buf[pos]) | (static_cast<uint32_t>(buf[pos + 1]) << 8) |
                 (static_cast<uint32_t>(buf[pos + 2]) << 16) |
                 (static_cast<uint32_t>(buf[pos + 3]) << 24);
    pos += 4;
    return v;
  }
  float f32() {
    uint32_t v = u32();
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
};

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  const size_t pixel_count = static_cast<size_t>(ds.c) * ds.h * ds.w;
  std::vector<uint8_t> buf;
  buf.reserve(16 + ds.motions.size() * (pixel_count + 16 * 5 + 8));
  buf.push_back('O');
  buf.push_back('O');
  buf.push_back('D');
  buf.push_back('S');
  put_u32(buf, kDatasetVersion);
  put_u32(buf, static_cast<uint32_t>(ds.motions.size()));
  put_u32(buf, static_cast<uint32_t>(ds.c));
  put_u32(buf, static_cast<uint32_t>(ds.h));
  put_u32(buf, static_cast<uint32_t>(ds.w));
  put_u32(buf, static_cast<uint32_t>(ds.horizon));
  for (const auto& m : ds.motions) {
    if (m.observation.size() != pixel_count)
      throw ContractError("motion image size does not match dataset dims");
    buf.insert(buf.end(), m.observation.begin(), m.observation.end());
    for (float a : m.actions) put_f32(buf, a);
    for (uint8_t l : m.labels) buf.push_back(l);
    put_u32(buf, m.episode);
    put_u32(buf, m.step);
  }
  write_file_bytes(path, buf);
}

Dataset load_dataset(const std::string& path) {
  const std::vector<uint8_t> buf = read_file_bytes(path);
  if (buf.size() < 8 || buf[0] != 'O' || buf[1] != 'O' || buf[2] != 'D' || buf[3] != 'S')
    throw IoError("bad magic in dataset file " + path);
  ByteReader r{buf, 4, path};
  const uint32_t version = r.u32();
  if (version != kDatasetVersion)
    throw IoError("unsupported dataset version " + std::to_string(version) + " in " + path);
  Dataset ds;
  const uint32_t count = r.u32();
  ds.c = static_cast<int>(r.u32());
  ds.h = static_cast<int>(r.u32());
  ds.w = static_cast<int>(r.u32());
  ds.horizon = static_cast<int>(r.u32());
  if (ds.c != 3 || ds.h < 1 || ds.w < 1 || ds.horizon != kHorizon)
    throw IoError("implausible dataset dims in " + path);
  const size_t pixel_count = static_cast<size_t>(ds.c) * ds.h * ds.w;
  ds.motions.resize(count);
  for (auto& m : ds.motions) {
    if (r.pos + pixel_count > buf.size()) throw IoError("truncated dataset file " + path);
    m.observation.assign(buf.begin() + static_cast<long>(r.pos),
                         buf.begin() + static_cast<long>(r.pos + pixel_count));
    r.pos += pixel_count;
    for (float& a : m.actions) a = r.f32();
    for (uint8_t& l : m.labels) {
      if (r.pos + 1 > buf.size()) throw IoError("truncated dataset file " + path);
      l = buf[r.pos++];
      if (l > 1) throw IoError("non-binary label in " + path);
    }
    m.episode = r.u32();
    m.step = r.u32();
  }
  if (r.pos != buf.size()) throw IoError("trailing bytes in dataset file " + path);
  int collided = 0;
  for (const auto& m : ds.motions) collided += m.labels[15] != 0;
  ds.collision_rate =
      ds.motions.empty() ? 0.0 : static_cast<double>(collided) / static_cast<double>(count);
  return ds;
}

// --- world text format ----------------------------------------------------------

namespace {

const char* kind_name(TexturePattern::Kind k) {
  switch (k) {
    case TexturePattern::Kind::solid: return "solid";
    case TexturePattern::Kind::stripes: return "stripes";
    case TexturePattern::Kind::checker: return "checker";
  }
  throw ContractError("unknown texture kind");
}

std::string fmt_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", static_cast<double>(v));
  return buf;
}

}  // namespace

std::string world_to_text(const WorldSpec& world) {
  std::ostringstream out;
  out << "id " << world.id << "\n";
  out << "floor_texture " << world.floor_texture << "\n";
  out << "ceiling_texture " << world.ceiling_texture << "\n";
  for (const auto& s : world.walls)
    out << "wall " << fmt_float(s.x1) << " " << fmt_float(s.y1) << " " << fmt_float(s.x2) << " "
        << fmt_float(s.y2) << " " << s.texture << "\n";
  for (const auto& o : world.objects)
    out << "object " << (o.shape == PlacedObject::Shape::box ? "box" : "cone") << " "
        << fmt_float(o.cx) << " " << fmt_float(o.cy) << " " << fmt_float(o.size) << " "
        << fmt_float(o.angle) << " " << o.texture << "\n";
  for (const auto& [id, t] : world.palette) {
    out << "texture " << id << " " << kind_name(t.kind) << " " << int(t.a[0]) << " " << int(t.a[1])
        << " " << int(t.a[2]);
    if (t.kind != TexturePattern::Kind::solid)
      out << " " << int(t.b[0]) << " " << int(t.b[1]) << " " << int(t.b[2]) << " "
          << fmt_float(t.period);
    out << "\n";
  }
  return out.str();
}

WorldSpec parse_world_text(const std::string& text) {
  WorldSpec w;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    auto fail = [&](const std::string& why) {
      throw ConfigError("world config line " + std::to_string(line_no) + ": " + why);
    };
    if (key == "id") {
      if (!(ls >> w.id)) fail("id needs a value");
    } else if (key == "floor_texture") {
      if (!(ls >> w.floor_texture)) fail("floor_texture needs an id");
    } else if (key == "ceiling_texture") {
      if (!(ls >> w.ceiling_texture)) fail("ceiling_texture needs an id");
    } else if (key == "wall") {
      Segment s{};
      if (!(ls >> s.x1 >> s.y1 >> s.x2 >> s.y2 >> s.texture)) fail("wall needs x1 y1 x2 y2 tex");
      w.walls.push_back(s);
    } else if (key == "object") {
      std::string shape;
      PlacedObject o{};
      if (!(ls >> shape >> o.cx >> o.cy >> o.size >> o.angle >> o.texture))
        fail("object needs shape cx cy size angle tex");
      if (shape == "box")
        o.shape = PlacedObject::Shape::box;
      else if (shape == "cone")
        o.shape = PlacedObject::Shape::cone;
      else
        fail("unknown object shape '" + shape + "'");
      w.objects.push_back(o);
    } else if (key == "texture") {
      int id;
      std::string kind;
      if (!(ls >> id >> kind)) fail("texture needs id and kind");
      TexturePattern t;
      int r, g, b;
      if (!(ls >> r >> g >> b)) fail("texture needs a primary color");
      t.a = {static_cast<uint8_t>(r), static_cast<uint8_t>(g), static_cast<uint8_t>(b)};
      if (kind == "solid") {
        t.kind = TexturePattern::Kind::solid;
      } else if (kind == "stripes" || kind == "checker") {
        t.kind = kind == "stripes" ? TexturePattern::Kind::stripes : TexturePattern::Kind::checker;
        int r2, g2, b2;
        if (!(ls >> r2 >> g2 >> b2 >> t.period)) fail("patterned texture needs b color + period");
        t.b = {static_cast<uint8_t>(r2), static_cast<uint8_t>(g2), static_cast<uint8_t>(b2)};
      } else {
        fail("unknown texture kind '" + kind + "'");
      }
      w.palette[id] = t;
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  validate_world(w);
  return w;
}

void save_world(const std::string& path, const WorldSpec& world) {
  const std::string text = world_to_text(world);
  write_file_bytes(path, std::vector<uint8_t>(text.begin(), text.end()));
}

WorldSpec load_world(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file_bytes(path);
  return parse_world_text(std::string(bytes.begin(), bytes.end()));
}

}  // namespace oodcp
