#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>

#include <json.hpp>

#include "leirstd/data.hpp"
#include "leirstd/model.hpp"
#include "leirstd/train.hpp"

namespace leirstd::cli {

using Json = nlohmann::ordered_json;

/// Every recognised section with its defaults. The model section holds only
/// a preset name; explicit fields override the preset.
Json default_config();

/// Recursive overlay; objects merge key by key, anything else replaces.
void merge(Json& base, const Json& patch);
Json load_config(const std::filesystem::path& path);

SceneSpec scene_from(const Json& cfg);
ModelConfig model_from(const Json& cfg);
TrainConfig train_from(const Json& cfg);
Json model_to_json(const ModelConfig& m, const std::string& preset);

/// Expands the model section to explicit fields so the file alone
/// reproduces the run, then writes `<dir>/config.json`.
Json freeze(Json cfg);
void write_config(const Json& cfg, const std::filesystem::path& dir);

void run_generate(const Json& cfg, const std::filesystem::path& out, std::size_t jobs, std::ostream& log);

struct TrainSummary {
    std::size_t steps = 0;
    double first_loss = 0, last_loss = 0;
    double seconds = 0;
};
TrainSummary run_train(const Json& cfg, const std::filesystem::path& out, std::size_t jobs, std::ostream& log);

EvalReport run_eval(const Json& cfg, const std::filesystem::path& out, std::size_t jobs, std::ostream& log);
void run_analyze(const Json& cfg, const std::filesystem::path& out, std::ostream& log);
void run_sensitivity(const Json& cfg, const std::filesystem::path& out, std::ostream& log);

/// Exit status by failure class: 2 configuration, 3 data, 4 numeric, 5 IO,
/// 1 anything else.
int exit_code(const std::exception& e);

}  // namespace leirstd::cli
