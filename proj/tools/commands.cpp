#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "leirstd/error.hpp"
#include "leirstd/metrics.hpp"
#include "leirstd/params.hpp"

namespace leirstd::cli {
namespace fs = std::filesystem;

namespace {

template <class T>
T get(const Json& section, const char* key, const std::string& where) {
    try {
        return section.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

// Unknown keys are almost always typos; reject them against the reference tree.
void check_keys(const Json& cfg, const Json& ref, const std::string& where) {
    if (!cfg.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [key, value] : cfg.items()) {
        const std::string path = where.empty() ? key : where + "." + key;
        if (!ref.contains(key)) throw ConfigError("unknown config key '" + path + "'");
        if (path == "model") continue;
        if (ref[key].is_object()) check_keys(value, ref[key], path);
    }
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

std::string fixed(double v, int digits = 6) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

}  // namespace

Json default_config() {
    const SceneSpec s;
    const TrainConfig t;
    const DecodeOptions d;
    return Json{
        {"seed", 0},
        {"scene",
         {{"width", s.width},
          {"height", s.height},
          {"min_targets", s.min_targets},
          {"max_targets", s.max_targets},
          {"min_intensity", s.min_intensity},
          {"max_intensity", s.max_intensity},
          {"min_sigma", s.min_sigma},
          {"max_sigma", s.max_sigma},
          {"background_level", s.background_level},
          {"gradient_amplitude", s.gradient_amplitude},
          {"clutter_per_kpx", s.clutter_per_kpx},
          {"clutter_amplitude", s.clutter_amplitude},
          {"clutter_min_sigma", s.clutter_min_sigma},
          {"clutter_max_sigma", s.clutter_max_sigma},
          {"noise_std", s.noise_std},
          {"box_sigmas", s.box_sigmas},
          {"min_gap", s.min_gap}}},
        {"generate", {{"count", 100}}},
        {"model", {{"preset", "tiny"}}},
        {"train",
         {{"data", ""},
          {"split", "train"},
          {"batch", t.batch},
          {"epochs", t.epochs},
          {"lr0", t.lr0},
          {"lr_final_fraction", t.lr_final_fraction},
          {"momentum", t.momentum},
          {"beta2", t.beta2},
          {"eps", t.eps},
          {"weight_decay", t.weight_decay},
          {"warmup_epochs", t.warmup_epochs},
          {"warmup_momentum", t.warmup_momentum},
          {"loss_weights", {{"cls", t.weights.cls}, {"box", t.weights.box}, {"dfl", t.weights.dfl}}},
          {"focal", {{"alpha", t.focal.alpha}, {"gamma", t.focal.gamma}}}}},
        {"eval",
         {{"checkpoint", ""},
          {"data", ""},
          {"split", "test"},
          {"score_thresh", d.score_thresh},
          {"nms_iou", d.nms_iou},
          {"batch", 16}}},
        {"analyze", {{"input_size", 0}}},
        {"sensitivity", {{"sizes", {3, 5, 7, 9, 15}}, {"shifts", {0, 0.5, 1, 1.5, 2, 3, 4}}}},
    };
}

void merge(Json& base, const Json& patch) {
    if (!patch.is_object() || !base.is_object()) {
        base = patch;
        return;
    }
    for (const auto& [key, value] : patch.items()) {
        if (base.contains(key) && base[key].is_object() && value.is_object())
            merge(base[key], value);
        else
            base[key] = value;
    }
}

Json load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    Json cfg;
    try {
        cfg = Json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    check_keys(cfg, default_config(), "");
    return cfg;
}

SceneSpec scene_from(const Json& cfg) {
    const Json& s = cfg.at("scene");
    check_keys(s, default_config()["scene"], "scene");
    SceneSpec spec;
    spec.width = get<std::size_t>(s, "width", "scene");
    spec.height = get<std::size_t>(s, "height", "scene");
    spec.min_targets = get<std::size_t>(s, "min_targets", "scene");
    spec.max_targets = get<std::size_t>(s, "max_targets", "scene");
    spec.min_intensity = get<double>(s, "min_intensity", "scene");
    spec.max_intensity = get<double>(s, "max_intensity", "scene");
    spec.min_sigma = get<double>(s, "min_sigma", "scene");
    spec.max_sigma = get<double>(s, "max_sigma", "scene");
    spec.background_level = get<double>(s, "background_level", "scene");
    spec.gradient_amplitude = get<double>(s, "gradient_amplitude", "scene");
    spec.clutter_per_kpx = get<double>(s, "clutter_per_kpx", "scene");
    spec.clutter_amplitude = get<double>(s, "clutter_amplitude", "scene");
    spec.clutter_min_sigma = get<double>(s, "clutter_min_sigma", "scene");
    spec.clutter_max_sigma = get<double>(s, "clutter_max_sigma", "scene");
    spec.noise_std = get<double>(s, "noise_std", "scene");
    spec.box_sigmas = get<double>(s, "box_sigmas", "scene");
    spec.min_gap = get<double>(s, "min_gap", "scene");
    spec.seed = get<std::uint64_t>(cfg, "seed", "config");
    spec.validate();
    return spec;
}

ModelConfig model_from(const Json& cfg) {
    const Json& m = cfg.at("model");
    const std::string preset = m.contains("preset") ? get<std::string>(m, "preset", "model") : "tiny";
    ModelConfig c;
    if (preset == "tiny")
        c = tiny_config();
    else if (preset == "full")
        c = full_scale_config();
    else if (preset != "default")
        throw ConfigError("model.preset must be tiny, default or full, got '" + preset + "'");
    check_keys(m, model_to_json(c, preset), "model");
    auto take = [&](const char* key, auto& field) {
        if (m.contains(key)) field = get<std::decay_t<decltype(field)>>(m, key, "model");
    };
    take("input_size", c.input_size);
    take("in_channels", c.in_channels);
    take("widths", c.widths);
    take("depths", c.depths);
    take("expansion", c.expansion);
    take("kernel", c.kernel);
    take("strides", c.strides);
    take("reg_bins", c.reg_bins);
    take("num_classes", c.num_classes);
    take("mbconv_dropout", c.mbconv_dropout);
    take("bs_dropout", c.bs_dropout);
    take("partial_ratio", c.partial_ratio);
    take("cbam_reduction", c.cbam_reduction);
    take("vk_points", c.vk_points);
    take("class_prior", c.class_prior);
    c.validate();
    return c;
}

Json model_to_json(const ModelConfig& m, const std::string& preset) {
    return Json{{"preset", preset},
                {"input_size", m.input_size},
                {"in_channels", m.in_channels},
                {"widths", m.widths},
                {"depths", m.depths},
                {"expansion", m.expansion},
                {"kernel", m.kernel},
                {"strides", m.strides},
                {"reg_bins", m.reg_bins},
                {"num_classes", m.num_classes},
                {"mbconv_dropout", m.mbconv_dropout},
                {"bs_dropout", m.bs_dropout},
                {"partial_ratio", m.partial_ratio},
                {"cbam_reduction", m.cbam_reduction},
                {"vk_points", m.vk_points},
                {"class_prior", m.class_prior}};
}

TrainConfig train_from(const Json& cfg) {
    const Json& t = cfg.at("train");
    const std::string w = "train";
    TrainConfig tc;
    tc.batch = get<std::size_t>(t, "batch", w);
    tc.epochs = get<std::size_t>(t, "epochs", w);
    tc.lr0 = get<double>(t, "lr0", w);
    tc.lr_final_fraction = get<double>(t, "lr_final_fraction", w);
    tc.momentum = get<double>(t, "momentum", w);
    tc.beta2 = get<double>(t, "beta2", w);
    tc.eps = get<double>(t, "eps", w);
    tc.weight_decay = get<double>(t, "weight_decay", w);
    tc.warmup_epochs = get<double>(t, "warmup_epochs", w);
    tc.warmup_momentum = get<double>(t, "warmup_momentum", w);
    const Json& lw = t.at("loss_weights");
    tc.weights = {get<double>(lw, "cls", "train.loss_weights"), get<double>(lw, "box", "train.loss_weights"),
                  get<double>(lw, "dfl", "train.loss_weights")};
    const Json& f = t.at("focal");
    tc.focal = {get<double>(f, "alpha", "train.focal"), get<double>(f, "gamma", "train.focal")};
    tc.seed = get<std::uint64_t>(cfg, "seed", "config");
    tc.validate();
    return tc;
}

Json freeze(Json cfg) {
    const Json& m = cfg.at("model");
    const std::string preset = m.contains("preset") ? m["preset"].get<std::string>() : "tiny";
    cfg["model"] = model_to_json(model_from(cfg), preset);
    return cfg;
}

void write_config(const Json& cfg, const fs::path& dir) {
    fs::create_directories(dir);
    auto out = open_out(dir / "config.json");
    out << cfg.dump(2) << "\n";
}

void run_generate(const Json& cfg, const fs::path& out, std::size_t jobs, std::ostream& log) {
    const SceneSpec spec = scene_from(cfg);
    const auto count = get<std::size_t>(cfg.at("generate"), "count", "generate");
    if (count == 0) throw ConfigError("generate.count must be positive");
    const auto entries = generate_dataset(spec, count, out, jobs);
    write_config(cfg, out);
    std::size_t split_counts[3] = {0, 0, 0};
    for (const auto& e : entries) ++split_counts[e.split == "train" ? 0 : e.split == "val" ? 1 : 2];
    log << "wrote " << entries.size() << " scenes to " << out.string() << " (train " << split_counts[0] << ", val "
        << split_counts[1] << ", test " << split_counts[2] << ")\n";
}

TrainSummary run_train(const Json& cfg, const fs::path& out, std::size_t, std::ostream& log) {
    const Json frozen = freeze(cfg);
    const ModelConfig mc = model_from(frozen);
    const TrainConfig tc = train_from(frozen);
    const auto manifest = get<std::string>(frozen.at("train"), "data", "train");
    if (manifest.empty()) throw ConfigError("train.data (dataset manifest) is required");
    auto samples = load_split(manifest, get<std::string>(frozen.at("train"), "split", "train"));

    write_config(frozen, out);
    ParamStore store(derive_seed(tc.seed, 0));
    Detector model(store, mc);
    Trainer trainer(model, store, tc, std::move(samples));

    auto loss_log = open_out(out / "loss.csv");
    loss_log << loss_log_header() << "\n";
    TrainSummary summary;
    const auto start = std::chrono::steady_clock::now();
    const std::size_t report_every = std::max<std::size_t>(1, trainer.schedule().total_steps() / 20);
    trainer.run([&](const StepRecord& r) {
        loss_log << loss_log_line(r) << "\n" << std::flush;
        if (r.step == 0) summary.first_loss = r.total;
        summary.last_loss = r.total;
        ++summary.steps;
        if (r.step % report_every == 0 || r.step + 1 == trainer.schedule().total_steps()) {
            log << "step " << r.step << "/" << trainer.schedule().total_steps() << "  lr " << r.lr << "  loss "
                << r.total << " (cls " << r.cls << ", box " << r.box << ", dfl " << r.dfl << ")\n";
        }
    });
    summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    trainer.save(out / "model");
    log << "trained " << summary.steps << " steps in " << fixed(summary.seconds, 1) << " s; checkpoint "
        << (out / "model").string() << "\n";
    return summary;
}

EvalReport run_eval(const Json& cfg, const fs::path& out, std::size_t jobs, std::ostream& log) {
    const Json frozen = freeze(cfg);
    const Json& e = frozen.at("eval");
    const auto checkpoint = get<std::string>(e, "checkpoint", "eval");
    const auto manifest = get<std::string>(e, "data", "eval");
    if (checkpoint.empty()) throw ConfigError("eval.checkpoint is required");
    if (manifest.empty()) throw ConfigError("eval.data (dataset manifest) is required");
    const auto split = get<std::string>(e, "split", "eval");

    ParamStore store;
    const Detector model(store, model_from(frozen));
    load_checkpoint(store, checkpoint);
    const auto samples = load_split(manifest, split);
    EvalOptions options;
    options.decode = {get<double>(e, "score_thresh", "eval"), get<double>(e, "nms_iou", "eval")};
    options.batch = get<std::size_t>(e, "batch", "eval");
    options.jobs = jobs;
    const auto dets = detect(model, samples, options);
    EvalReport report = evaluate(dets, samples, jobs);

    write_config(frozen, out);
    std::ostringstream text;
    text << "split " << split << " (" << samples.size() << " images, " << report.counts.tp + report.counts.fn
         << " targets, " << dets.size() << " detections)\n"
         << "precision " << fixed(report.prf.precision) << "\n"
         << "recall " << fixed(report.prf.recall) << "\n"
         << "f1 " << fixed(report.prf.f1) << "\n"
         << "mAP@50 " << fixed(report.ap.map) << "\n";
    for (const auto& [cls, ap] : report.ap.per_class) text << "AP50 class " << cls << " " << fixed(ap) << "\n";
    text << "mNoCoAP " << fixed(report.noco.value) << "\n";
    for (std::size_t i = 0; i < kNocoThresholds.size(); ++i)
        text << "AP_noco " << fixed(kNocoThresholds[i], 1) << " " << fixed(report.noco.per_threshold[i]) << "\n";
    open_out(out / "report.txt") << text.str();
    log << text.str();

    auto curve = open_out(out / "pr_curve.csv");
    curve << "class,recall,precision\n";
    for (const auto& [cls, points] : report.ap.curves)
        for (const auto& p : points) curve << cls << ',' << fixed(p.recall) << ',' << fixed(p.precision) << "\n";

    auto det_file = open_out(out / "detections.csv");
    det_file << "image,class,score,x1,y1,x2,y2\n";
    for (const auto& d : dets) {
        det_file << samples[d.image].name << ',' << d.class_id << ',' << fixed(d.score) << ',' << fixed(d.box.x1, 3)
                 << ',' << fixed(d.box.y1, 3) << ',' << fixed(d.box.x2, 3) << ',' << fixed(d.box.y2, 3) << "\n";
    }
    return report;
}

void run_analyze(const Json& cfg, const fs::path& out, std::ostream& log) {
    Json frozen = freeze(cfg);
    const auto size = get<std::size_t>(frozen.at("analyze"), "input_size", "analyze");
    if (size > 0) {
        frozen["model"]["input_size"] = size;
        frozen["analyze"]["input_size"] = 0;
    }
    const CostReport report = count_model(model_from(frozen));
    write_config(frozen, out);
    open_out(out / "layers.csv") << report.csv();
    open_out(out / "report.txt") << report.table();
    log << report.table();
}

void run_sensitivity(const Json& cfg, const fs::path& out, std::ostream& log) {
    const Json& s = cfg.at("sensitivity");
    const auto sizes = get<std::vector<double>>(s, "sizes", "sensitivity");
    const auto shifts = get<std::vector<double>>(s, "shifts", "sensitivity");
    if (sizes.empty() || shifts.empty()) throw ConfigError("sensitivity needs at least one size and one shift");
    write_config(cfg, out);
    auto csv = open_out(out / "sensitivity.csv");
    csv << "box_size,shift,iou\n";
    std::ostringstream table;
    table << std::setw(8) << "size";
    for (double sh : shifts) table << std::setw(10) << ("s=" + fixed(sh, 1));
    table << "\n";
    for (double size : sizes) {
        table << std::setw(8) << fixed(size, 1);
        for (const auto& [shift, v] : iou_sensitivity(size, shifts)) {
            csv << fixed(size, 3) << ',' << fixed(shift, 3) << ',' << fixed(v, 6) << "\n";
            table << std::setw(10) << fixed(v, 4);
        }
        table << "\n";
    }
    open_out(out / "sensitivity.txt") << table.str();
    log << table.str();
}

int exit_code(const std::exception& e) {
    if (const auto* err = dynamic_cast<const Error*>(&e)) {
        switch (err->category()) {
            case Error::Category::config: return 2;
            case Error::Category::data: return 3;
            case Error::Category::numeric: return 4;
            case Error::Category::io: return 5;
            case Error::Category::contract: return 1;
        }
    }
    return 1;
}

}  // namespace leirstd::cli
