#include <cstdio>

int main() {
  std::puts("apnlab: CLI under construction");
  return 0;
}
