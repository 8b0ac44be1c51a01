#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <thread>

#include "commands.hpp"
#include "leirstd/error.hpp"

using namespace leirstd;
using namespace leirstd::cli;
namespace fs = std::filesystem;

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    std::size_t jobs = 1;

    std::optional<std::size_t> count, epochs, batch, input_size;
    std::optional<double> lr0;
    std::string data, split, preset, checkpoint;
    std::vector<double> sizes, shifts;
};

// A checkpoint directory carries the config that built the model; evaluation
// starts from it so the architecture does not need repeating.
void adopt_checkpoint_model(Json& cfg, const std::string& checkpoint) {
    if (checkpoint.empty()) return;
    const fs::path saved = fs::path(checkpoint).parent_path() / "config.json";
    if (!fs::exists(saved)) return;
    const Json prior = load_config(saved);
    if (prior.contains("model")) cfg["model"] = prior["model"];
}

Json build_config(const std::string& command, const Flags& f) {
    Json cfg = default_config();
    Json file = f.config.empty() ? Json::object() : load_config(f.config);

    if (command == "eval") {
        std::string checkpoint = f.checkpoint;
        if (checkpoint.empty() && file.contains("eval") && file["eval"].contains("checkpoint"))
            checkpoint = file["eval"]["checkpoint"].get<std::string>();
        adopt_checkpoint_model(cfg, checkpoint);
    }
    if (file.contains("model") && file["model"].contains("preset")) cfg["model"] = Json::object();
    merge(cfg, file);

    if (f.seed) cfg["seed"] = *f.seed;
    if (!f.preset.empty()) cfg["model"] = Json{{"preset", f.preset}};
    if (f.count) cfg["generate"]["count"] = *f.count;
    if (f.input_size) cfg["analyze"]["input_size"] = *f.input_size;
    if (!f.sizes.empty()) cfg["sensitivity"]["sizes"] = f.sizes;
    if (!f.shifts.empty()) cfg["sensitivity"]["shifts"] = f.shifts;
    const char* section = command == "eval" ? "eval" : "train";
    if (!f.data.empty()) cfg[section]["data"] = f.data;
    if (!f.split.empty()) cfg[section]["split"] = f.split;
    if (f.batch) cfg[section]["batch"] = *f.batch;
    if (!f.checkpoint.empty()) cfg["eval"]["checkpoint"] = f.checkpoint;
    if (f.epochs) cfg["train"]["epochs"] = *f.epochs;
    if (f.lr0) cfg["train"]["lr0"] = *f.lr0;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Small infrared target detection toolkit"};
    app.require_subcommand(1);
    Flags f;
    app.add_option("--config", f.config, "JSON config file; flags override its values")->check(CLI::ExistingFile);
    app.add_option("--seed", f.seed, "Master seed");
    app.add_option("--out", f.out, "Output directory")->capture_default_str();
    app.add_option("--jobs", f.jobs, "Worker threads (0 = all cores)")->capture_default_str();

    auto* gen = app.add_subcommand("generate", "Write a synthetic dataset with a manifest");
    gen->add_option("--count", f.count, "Number of scenes");

    auto* train = app.add_subcommand("train", "Train a detector on a dataset split");
    train->add_option("--data", f.data, "Dataset manifest");
    train->add_option("--split", f.split, "Split to train on");
    train->add_option("--epochs", f.epochs, "Training epochs");
    train->add_option("--batch", f.batch, "Batch size");
    train->add_option("--lr0", f.lr0, "Peak learning rate");
    train->add_option("--preset", f.preset, "Model preset: tiny, default or full");

    auto* eval = app.add_subcommand("eval", "Detect on a split and report metrics");
    eval->add_option("--checkpoint", f.checkpoint, "Checkpoint stem written by train");
    eval->add_option("--data", f.data, "Dataset manifest");
    eval->add_option("--split", f.split, "Split to evaluate");
    eval->add_option("--batch", f.batch, "Inference batch size");

    auto* analyze = app.add_subcommand("analyze", "Per-layer parameter and Flop accounting");
    analyze->add_option("--preset", f.preset, "Model preset: tiny, default or full");
    analyze->add_option("--input-size", f.input_size, "Override the input side length");

    auto* sens = app.add_subcommand("sensitivity", "IoU under diagonal shifts for small boxes");
    sens->add_option("--sizes", f.sizes, "Box side lengths");
    sens->add_option("--shifts", f.shifts, "Diagonal shifts in pixels");

    CLI11_PARSE(app, argc, argv);

    const std::string command = app.get_subcommands().front()->get_name();
    const std::size_t jobs = f.jobs == 0 ? std::max(1u, std::thread::hardware_concurrency()) : f.jobs;
    try {
        const Json cfg = build_config(command, f);
        const fs::path out = f.out;
        if (command == "generate") run_generate(cfg, out, jobs, std::cout);
        else if (command == "train") run_train(cfg, out, jobs, std::cout);
        else if (command == "eval") run_eval(cfg, out, jobs, std::cout);
        else if (command == "analyze") run_analyze(cfg, out, std::cout);
        else run_sensitivity(cfg, out, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e);
    }
    return 0;
}
