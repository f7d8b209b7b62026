#pragma once

#include <string>
#include <vector>

namespace attn {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0;
};

constexpr int kCriteriaCount = 13;

// "all" or a comma list such as "1,4,9".
std::vector<int> parse_suite(const std::string& suite);

// scratch_dir holds the preset reruns of criterion 13.
std::vector<CriterionResult> run_acceptance(const std::vector<int>& ids, int threads, const std::string& scratch_dir);
CriterionResult run_criterion(int id, int threads, const std::string& scratch_dir);

std::string format_result(const CriterionResult& r);

}  // namespace attn
