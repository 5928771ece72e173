#include <CLI11.hpp>

#include <iostream>

#include "treenet/synth.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write a procedural PNG corpus"};
  std::string out;
  int count = 200;
  int64_t size = 64;
  uint64_t seed = 1;
  app.add_option("--out", out, "Output directory")->required();
  app.add_option("--count", count, "Number of images")->capture_default_str();
  app.add_option("--size", size, "Side length in pixels")->capture_default_str();
  app.add_option("--seed", seed, "Random seed")->capture_default_str();
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  try {
    const auto paths = treenet::make_corpus(out, count, size, size, seed);
    std::cout << paths.size() << " images in " << out << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
