#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "driftguard/cli.hpp"

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Layer buffers are large and short-lived; keep them off mmap and untrimmed.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  std::vector<std::string> args(argv + 1, argv + argc);
  return driftguard::cli::run(args, std::cout, std::cerr);
}
