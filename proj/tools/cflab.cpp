#include <malloc.h>

#include "cflab/cli/app.hpp"

int main(int argc, char** argv) {
  // keep freed tensor buffers in the heap instead of returning them to the OS
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return cflab::cli::run(std::vector<std::string>(argv, argv + argc));
}
