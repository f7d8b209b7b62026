// One line per acceptance criterion; exit status 0 iff every criterion passes.
#include <filesystem>
#include <iostream>
#include <string>

#include "attn/cli.hpp"
#include "attn/verify.hpp"

int main(int argc, char** argv) {
  const std::string suite = argc > 1 ? argv[1] : "all";
  const std::string scratch =
      (std::filesystem::temp_directory_path() / "attnstages_acceptance").string();
  const int threads = attn::resolve_threads(0);
  bool ok = true;
  for (int id : attn::parse_suite(suite)) {
    const auto r = attn::run_criterion(id, threads, scratch);
    std::cout << attn::format_result(r) << std::endl;
    ok = ok && r.pass;
  }
  std::filesystem::remove_all(scratch);
  return ok ? 0 : 1;
}
