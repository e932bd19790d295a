#include "domex/cli/app.hpp"
#include "domex/util/allocator.hpp"

int main(int argc, char** argv) {
  domex::tune_allocator();
  return domex::cli::run(argc, argv);
}
