#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <torch/torch.h>

#include "conceptvae/log.hpp"

int main(int argc, char** argv) {
  cvae::log::set_level(cvae::log::Level::error);
  torch::set_num_threads(1);
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
