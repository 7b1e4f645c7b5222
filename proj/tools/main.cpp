#include <cstdio>

int main(int argc, char** argv) {
  (void)argc;
  (void)argv;
  std::puts("oodcp: no commands wired yet");
  return 0;
}
