#include <cstdio>

int main() {
  std::puts("gb0 placeholder");
  return 0;
}
