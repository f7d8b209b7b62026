#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "attn/flow.hpp"
#include "attn/markov.hpp"

namespace attn {

inline const std::vector<std::string> kExperiments = {"gen-data", "train",   "flow",    "critical",
                                                       "reduced",  "perturb", "analyze", "verify"};

// Every accepted key with its default; anything else is rejected.
nlohmann::json default_config();

struct PresetInfo {
  std::string name, description;
};
std::vector<PresetInfo> list_presets();
nlohmann::json preset_config(const std::string& name);

// defaults <- preset <- file <- "key=value" overrides
nlohmann::json resolve_config(const std::string& experiment, const std::string& preset, const nlohmann::json& file,
                              const std::vector<std::string>& sets);
void validate_config(const nlohmann::json& cfg);

MarkovSpec spec_from_config(const nlohmann::json& cfg);
FlowConfig flow_config_from(const nlohmann::json& cfg);
StageThresholds thresholds_from(const nlohmann::json& cfg);

struct RunResult {
  std::string out_dir;
  std::vector<std::string> files;  // relative to out_dir
  nlohmann::json summary;
  bool ok = true;  // false when a verification suite reports failures
};
RunResult run_experiment(const nlohmann::json& cfg, const std::string& out_dir, bool force, int threads);

// threads flag > ATTNSTAGES_THREADS > 1
int resolve_threads(int flag);

int cli_main(int argc, char** argv);

}  // namespace attn
