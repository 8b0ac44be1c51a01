#include <doctest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include "commands.hpp"
#include "leirstd/complexity.hpp"
#include "leirstd/error.hpp"

using namespace leirstd;
using namespace leirstd::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("leirstd_cli_" + name);
    fs::remove_all(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

Json small_config() {
    Json cfg = default_config();
    cfg["scene"]["width"] = 32;
    cfg["scene"]["height"] = 32;
    cfg["scene"]["max_targets"] = 2;
    cfg["generate"]["count"] = 10;
    cfg["model"] = Json{{"preset", "tiny"}, {"input_size", 32}, {"widths", {4, 4, 8, 8}}, {"depths", {1, 1}},
                        {"expansion", 2}, {"reg_bins", 4}};
    return cfg;
}

}  // namespace

TEST_CASE("config handling") {
    SUBCASE("defaults build every section") {
        const Json cfg = default_config();
        CHECK_NOTHROW(scene_from(cfg));
        CHECK_NOTHROW(train_from(cfg));
        CHECK(model_from(cfg).input_size == tiny_config().input_size);
    }
    SUBCASE("overlay keeps untouched keys") {
        Json cfg = default_config();
        merge(cfg, Json{{"train", {{"lr0", 0.01}}}, {"seed", 7}});
        CHECK(cfg["train"]["lr0"] == 0.01);
        CHECK(cfg["train"]["batch"] == 16);
        CHECK(train_from(cfg).seed == 7);
        CHECK(scene_from(cfg).seed == 7);
    }
    SUBCASE("presets and overrides") {
        Json cfg = default_config();
        cfg["model"] = Json{{"preset", "full"}};
        CHECK(model_from(cfg).input_size == full_scale_config().input_size);
        cfg["model"]["reg_bins"] = 8;
        CHECK(model_from(cfg).reg_bins == 8);
        cfg["model"] = Json{{"preset", "huge"}};
        CHECK_THROWS_AS(model_from(cfg), ConfigError);
        cfg["model"] = Json{{"preset", "tiny"}, {"widht", 3}};
        CHECK_THROWS_AS(model_from(cfg), ConfigError);
        cfg["model"] = Json{{"preset", "tiny"}, {"kernel", "three"}};
        CHECK_THROWS_AS(model_from(cfg), ConfigError);
    }
    SUBCASE("frozen config reproduces the model") {
        const Json cfg = small_config();
        const Json frozen = freeze(cfg);
        const ModelConfig a = model_from(cfg), b = model_from(frozen);
        CHECK(b.widths == a.widths);
        CHECK(b.input_size == a.input_size);
        CHECK(b.strides == a.strides);
        CHECK(b.vk_points == a.vk_points);
        CHECK(frozen["model"].size() > 10);
    }
    SUBCASE("unknown keys in a file") {
        const auto dir = scratch("keys");
        fs::create_directories(dir);
        std::ofstream(dir / "a.json") << R"({"train": {"lr": 0.1}})";
        CHECK_THROWS_AS(load_config(dir / "a.json"), ConfigError);
        std::ofstream(dir / "b.json") << R"({"train": {"lr0": 0.1}, "seed": 3})";
        CHECK(load_config(dir / "b.json")["seed"] == 3);
        std::ofstream(dir / "c.json") << "{ not json";
        CHECK_THROWS_AS(load_config(dir / "c.json"), ConfigError);
        CHECK_THROWS_AS(load_config(dir / "missing.json"), IoError);
        fs::remove_all(dir);
    }
}

TEST_CASE("generate") {
    const auto a = scratch("gen_a"), b = scratch("gen_b");
    std::ostringstream log;
    run_generate(small_config(), a, 1, log);
    run_generate(small_config(), b, 3, log);
    const auto entries = read_dataset_manifest(a / "manifest.txt");
    REQUIRE(entries.size() == 10);
    std::size_t train = 0, val = 0, test = 0;
    for (const auto& e : entries) (e.split == "train" ? train : e.split == "val" ? val : test)++;
    CHECK(train == 6);
    CHECK(val == 2);
    CHECK(test == 2);
    for (const auto& entry : fs::directory_iterator(a)) {
        const auto name = entry.path().filename();
        INFO(name.string());
        CHECK(slurp(entry.path()) == slurp(b / name));
    }
    Json zero = small_config();
    zero["generate"]["count"] = 0;
    CHECK_THROWS_AS(run_generate(zero, scratch("gen_c"), 1, log), ConfigError);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("train and eval") {
    const auto data = scratch("te_data"), run = scratch("te_run"), eval = scratch("te_eval");
    std::ostringstream log;
    Json cfg = small_config();
    run_generate(cfg, data, 1, log);
    cfg["train"]["data"] = (data / "manifest.txt").string();

    SUBCASE("zero epochs leaves a header-only log and a checkpoint") {
        cfg["train"]["epochs"] = 0;
        const auto summary = run_train(cfg, run, 1, log);
        CHECK(summary.steps == 0);
        CHECK(slurp(run / "loss.csv") == "step,lr,L_BCE,L_CIoU,L_DFL,total\n");
        CHECK(fs::exists(run / "model.state"));
        const Json saved = load_config(run / "config.json");
        CHECK(saved["model"]["input_size"] == 32);

        Json ec = saved;
        ec["eval"]["checkpoint"] = (run / "model").string();
        ec["eval"]["data"] = (data / "manifest.txt").string();
        ec["eval"]["split"] = "all";
        const auto report = run_eval(ec, eval, 2, log);
        CHECK(report.ap.map < 0.1);
        CHECK(report.noco.per_threshold.size() == 9);
        for (const char* f : {"report.txt", "pr_curve.csv", "detections.csv", "config.json"})
            CHECK(fs::exists(eval / f));
    }
    SUBCASE("a few steps log one line each") {
        cfg["train"]["epochs"] = 2;
        cfg["train"]["batch"] = 3;
        cfg["train"]["warmup_epochs"] = 1;
        const auto summary = run_train(cfg, run, 1, log);
        CHECK(summary.steps == 4);
        std::istringstream lines(slurp(run / "loss.csv"));
        std::string line;
        std::size_t n = 0;
        while (std::getline(lines, line)) ++n;
        CHECK(n == 5);
    }
    SUBCASE("missing inputs") {
        cfg["train"]["data"] = "";
        CHECK_THROWS_AS(run_train(cfg, run, 1, log), ConfigError);
        cfg["train"]["data"] = (data / "absent.txt").string();
        CHECK_THROWS_AS(run_train(cfg, run, 1, log), IoError);
        Json ec = small_config();
        CHECK_THROWS_AS(run_eval(ec, eval, 1, log), ConfigError);
    }
    fs::remove_all(data);
    fs::remove_all(run);
    fs::remove_all(eval);
}

TEST_CASE("analyze and sensitivity") {
    const auto dir = scratch("an");
    std::ostringstream log;
    Json cfg = default_config();
    run_analyze(cfg, dir, log);
    const auto report = count_model(tiny_config());
    CHECK(slurp(dir / "layers.csv") == report.csv());
    CHECK(slurp(dir / "report.txt") == report.table());

    cfg["analyze"]["input_size"] = 128;
    run_analyze(cfg, dir, log);
    ModelConfig bigger = tiny_config();
    bigger.input_size = 128;
    CHECK(slurp(dir / "layers.csv") == count_model(bigger).csv());

    cfg["sensitivity"]["sizes"] = {5};
    cfg["sensitivity"]["shifts"] = {0, 1, 3};
    run_sensitivity(cfg, dir, log);
    const std::string csv = slurp(dir / "sensitivity.csv");
    CHECK(csv.find("5.000,1.000,0.470588") != std::string::npos);
    CHECK(csv.find("5.000,3.000,0.086957") != std::string::npos);
    cfg["sensitivity"]["shifts"] = Json::array();
    CHECK_THROWS_AS(run_sensitivity(cfg, dir, log), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("exit codes") {
    CHECK(exit_code(ConfigError("x")) == 2);
    CHECK(exit_code(DataError("x")) == 3);
    CHECK(exit_code(ParseError("x")) == 3);
    CHECK(exit_code(NumericError("x")) == 4);
    CHECK(exit_code(IoError("x")) == 5);
    CHECK(exit_code(ContractError("x")) == 1);
    CHECK(exit_code(std::runtime_error("x")) == 1);
}
