#include "cgdmer/app/cli.hpp"

int main(int argc, char** argv) {
  cgdmer::app::tune_allocator();
  return cgdmer::app::run_cli(argc, argv);
}
