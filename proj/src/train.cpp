#include "leirstd/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "leirstd/error.hpp"
#include "leirstd/parallel.hpp"
#include "leirstd/rng.hpp"

namespace leirstd {
namespace {

constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kDropoutStream = 3;

std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

}  // namespace

void TrainConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError("train config: " + what);
    };
    need(batch >= 1, "batch must be positive");
    need(lr0 > 0 && std::isfinite(lr0), "lr0 must be positive");
    need(lr_final_fraction >= 0 && lr_final_fraction <= 1, "lr_final_fraction must lie in [0, 1]");
    need(momentum > 0 && momentum < 1 && warmup_momentum > 0 && warmup_momentum < 1, "momentum must lie in (0, 1)");
    need(beta2 > 0 && beta2 < 1, "beta2 must lie in (0, 1)");
    need(eps > 0, "eps must be positive");
    need(weight_decay >= 0, "weight_decay must be non-negative");
    need(warmup_epochs >= 0, "warmup_epochs must be non-negative");
    need(epochs == 0 || warmup_epochs <= static_cast<double>(epochs), "warmup_epochs exceeds epochs");
    need(focal.alpha > 0 && focal.gamma >= 0, "focal alpha must be positive and gamma non-negative");
    weights.validate();
}

Schedule::Schedule(const TrainConfig& cfg, std::size_t steps_per_epoch)
    : lr0_(cfg.lr0),
      lr_final_(cfg.lr0 * cfg.lr_final_fraction),
      beta1_(cfg.momentum),
      beta1_warm_(cfg.warmup_momentum),
      warmup_(static_cast<std::size_t>(std::llround(cfg.warmup_epochs * static_cast<double>(steps_per_epoch)))),
      total_(cfg.epochs * steps_per_epoch) {}

double Schedule::lr(std::size_t step) const {
    if (step < warmup_) return lr0_ * static_cast<double>(step) / static_cast<double>(warmup_);
    const double span = total_ > warmup_ + 1 ? static_cast<double>(total_ - 1 - warmup_) : 1.0;
    const double progress = std::min(1.0, static_cast<double>(step - warmup_) / span);
    return lr_final_ + (lr0_ - lr_final_) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double Schedule::beta1(std::size_t step) const {
    if (step >= warmup_) return beta1_;
    return beta1_warm_ + (beta1_ - beta1_warm_) * static_cast<double>(step) / static_cast<double>(warmup_);
}

void AdamW::step(ParamStore& store, double lr, double beta1) {
    ++steps;
    beta1_product *= beta1;
    beta2_product *= beta2_;
    const double c1 = 1.0 - beta1_product;
    const double c2 = 1.0 - beta2_product;
    for (auto& p : store.params()) {
        if (!p.value.has_grad()) continue;
        const auto g = p.value.grad();
        auto w = p.value.mutable_data();
        ++p.step_count;
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (p.decay) w[i] -= lr * decay_ * w[i];
            p.moment1[i] = beta1 * p.moment1[i] + (1.0 - beta1) * g[i];
            p.moment2[i] = beta2_ * p.moment2[i] + (1.0 - beta2_) * g[i] * g[i];
            w[i] -= lr * (p.moment1[i] / c1) / (std::sqrt(p.moment2[i] / c2) + eps_);
        }
    }
}

Tensor stack_images(const std::vector<const Image*>& images, const ModelConfig& cfg) {
    const std::size_t side = cfg.input_size;
    std::vector<double> pixels;
    pixels.reserve(images.size() * side * side);
    for (const Image* img : images) {
        if (img->width != side || img->height != side) {
            throw DataError("image is " + std::to_string(img->width) + "x" + std::to_string(img->height) +
                            ", model expects " + std::to_string(side) + "x" + std::to_string(side));
        }
        pixels.insert(pixels.end(), img->pixels.begin(), img->pixels.end());
    }
    return Tensor::from({images.size(), 1, side, side}, std::move(pixels));
}

Trainer::Trainer(Detector& model, ParamStore& store, const TrainConfig& cfg, std::vector<Sample> data)
    : model_(model),
      store_(store),
      cfg_(cfg),
      data_(std::move(data)),
      steps_per_epoch_((data_.size() + cfg.batch - 1) / std::max<std::size_t>(cfg.batch, 1)),
      schedule_(cfg, steps_per_epoch_),
      opt_(cfg) {
    cfg_.validate();
    if (data_.empty()) throw DataError("training set is empty");
    if (model_.config().in_channels != 1) throw ConfigError("training expects single-channel images");
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
    const std::size_t epoch = step / steps_per_epoch_;
    std::vector<std::size_t> order(data_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(derive_seed(cfg_.seed, kShuffleStream), epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const std::size_t begin = (step % steps_per_epoch_) * cfg_.batch;
    const std::size_t end = std::min(begin + cfg_.batch, order.size());
    return {order.begin() + static_cast<long>(begin), order.begin() + static_cast<long>(end)};
}

StepRecord Trainer::step() {
    if (done()) throw ContractError("training already finished");
    const auto members = batch_indices(step_);
    std::vector<const Image*> images;
    std::vector<std::vector<GroundTruth>> labels;
    for (std::size_t i : members) {
        images.push_back(&data_[i].image);
        labels.push_back(data_[i].labels);
    }
    const ModelConfig& mc = model_.config();
    const Tensor x = stack_images(images, mc);
    const Assignment assignment = assign_targets(labels, mc);

    blocks::ForwardContext ctx{true, derive_seed(derive_seed(cfg_.seed, kDropoutStream), step_), 0};
    const HeadOutputs out = model_.forward(x, ctx);
    const LossBreakdown loss = total_loss(out, assignment, mc, cfg_.weights, cfg_.focal);

    StepRecord rec{step_, schedule_.lr(step_), loss.cls, loss.box, loss.dfl, loss.total.item()};
    if (!std::isfinite(rec.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << step_ << " (cls " << rec.cls << ", box " << rec.box << ", dfl "
            << rec.dfl << ", positives " << loss.positives << "); batch:";
        for (std::size_t i : members) msg << ' ' << data_[i].name;
        throw NumericError(msg.str());
    }
    store_.zero_grad();
    backward(loss.total);
    opt_.step(store_, rec.lr, schedule_.beta1(step_));
    ++step_;
    return rec;
}

void Trainer::run(const std::function<void(const StepRecord&)>& on_step) {
    while (!done()) {
        const StepRecord r = step();
        if (on_step) on_step(r);
    }
}

void Trainer::save(const std::filesystem::path& stem) const {
    save_checkpoint(store_, stem);
    std::vector<std::pair<std::string, Tensor>> moments;
    for (const auto& p : store_.params()) {
        moments.emplace_back(p.name + ".m1", Tensor::from(p.value.shape(), p.moment1));
        moments.emplace_back(p.name + ".m2", Tensor::from(p.value.shape(), p.moment2));
    }
    auto optim = stem;
    optim += ".optim";
    write_tensor_bundle(optim, moments);

    auto state_path = stem;
    state_path += ".state";
    std::ofstream out(state_path);
    if (!out) throw IoError("cannot write " + state_path.string());
    out << "epoch " << step_ / steps_per_epoch_ << "\n"
        << "step " << step_ << "\n"
        << "total_steps " << schedule_.total_steps() << "\n"
        << "lr " << fmt("%.17g", step_ < schedule_.total_steps() ? schedule_.lr(step_) : 0.0) << "\n"
        << "seed " << cfg_.seed << "\n"
        << "beta1_product " << fmt("%.17g", opt_.beta1_product) << "\n"
        << "beta2_product " << fmt("%.17g", opt_.beta2_product) << "\n"
        << "optimizer_steps " << opt_.steps << "\n";
    if (!out) throw IoError("failed writing " + state_path.string());
}

void Trainer::restore(const std::filesystem::path& stem) {
    load_checkpoint(store_, stem);
    auto optim = stem;
    optim += ".optim";
    std::map<std::string, Tensor> moments;
    for (auto& [name, t] : read_tensor_bundle(optim)) moments.emplace(name, std::move(t));
    for (auto& p : store_.params()) {
        for (auto [suffix, target] : {std::pair{".m1", &p.moment1}, std::pair{".m2", &p.moment2}}) {
            auto it = moments.find(p.name + suffix);
            if (it == moments.end() || it->second.size() != target->size()) {
                throw DataError("optimizer state is missing or mis-sized for " + p.name + suffix);
            }
            target->assign(it->second.data().begin(), it->second.data().end());
        }
    }

    auto state_path = stem;
    state_path += ".state";
    std::ifstream in(state_path);
    if (!in) throw IoError("cannot read " + state_path.string());
    std::map<std::string, std::string> fields;
    std::string key, value;
    while (in >> key >> value) fields[key] = value;
    auto field = [&](const std::string& k) {
        auto it = fields.find(k);
        if (it == fields.end()) throw ParseError(state_path.string() + ": missing field " + k);
        return it->second;
    };
    if (std::stoull(field("seed")) != cfg_.seed) throw ConfigError("training state was written with another seed");
    step_ = std::stoull(field("step"));
    opt_.beta1_product = std::stod(field("beta1_product"));
    opt_.beta2_product = std::stod(field("beta2_product"));
    opt_.steps = std::stoull(field("optimizer_steps"));
}

std::string loss_log_header() { return "step,lr,L_BCE,L_CIoU,L_DFL,total"; }

std::string loss_log_line(const StepRecord& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.12g,%.12g,%.12g,%.12g", r.step, r.lr, r.cls, r.box, r.dfl, r.total);
    return buf;
}

std::vector<Detection> detect(const Detector& model, const std::vector<Sample>& samples, const EvalOptions& options) {
    const std::size_t batch = std::max<std::size_t>(options.batch, 1);
    const std::size_t chunks = (samples.size() + batch - 1) / batch;
    std::vector<std::vector<Detection>> found(chunks);
    parallel_for(chunks, options.jobs, [&](std::size_t c) {
        const std::size_t begin = c * batch, end = std::min(begin + batch, samples.size());
        std::vector<const Image*> images;
        for (std::size_t i = begin; i < end; ++i) images.push_back(&samples[i].image);
        blocks::ForwardContext ctx{false, 0, 0};
        const HeadOutputs out = model.forward(stack_images(images, model.config()), ctx);
        for (std::size_t i = begin; i < end; ++i) {
            auto dets = decode(out, model.config(), i - begin, i, options.decode);
            found[c].insert(found[c].end(), dets.begin(), dets.end());
        }
    });
    std::vector<Detection> all;
    for (auto& f : found) all.insert(all.end(), f.begin(), f.end());
    return all;
}

EvalReport evaluate(const std::vector<Detection>& dets, const std::vector<Sample>& samples, std::size_t jobs) {
    std::vector<LabeledBox> gts;
    std::vector<Image> images;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Image& img = samples[i].image;
        for (const auto& g : samples[i].labels) gts.push_back({i, g.class_id, g.to_box(img.width, img.height)});
        images.push_back(img);
    }
    EvalReport report;
    report.detections = dets;
    report.ap = map50(dets, gts);
    const auto hits = match_by_iou(dets, gts);
    const auto tp = static_cast<std::size_t>(std::count(hits.begin(), hits.end(), true));
    report.counts = {tp, dets.size() - tp, gts.size() - tp, 0};
    report.prf = prf1(report.counts);
    report.noco = mnocoap(dets, gts, images, jobs);
    return report;
}

}  // namespace leirstd
