// Writes the synthetic five-study fixture: make_fixture <dir> [seed]
#include <cstdlib>
#include <iostream>

#include "fixture.h"

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: make_fixture <dir> [seed]\n";
    return 2;
  }
  const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 2024;
  causalmeta::testing::write_fixture(argv[1], seed);
  return 0;
}
