#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "leirstd/data.hpp"
#include "leirstd/detect.hpp"
#include "leirstd/metrics.hpp"
#include "leirstd/model.hpp"
#include "leirstd/params.hpp"

namespace leirstd {

struct TrainConfig {
    std::size_t batch = 16;
    std::size_t epochs = 300;
    double lr0 = 0.001;
    /// Final learning rate as a fraction of lr0.
    double lr_final_fraction = 0.5;
    double momentum = 0.937;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0005;
    double warmup_epochs = 3;
    double warmup_momentum = 0.8;
    std::uint64_t seed = 0;
    LossWeights weights;
    FocalParams focal;

    void validate() const;
};

/// Linear warm-up from zero, then cosine from lr0 down to lr0 * fraction at
/// the last step.
class Schedule {
public:
    Schedule(const TrainConfig& cfg, std::size_t steps_per_epoch);

    double lr(std::size_t step) const;
    /// First-moment coefficient, ramped from the warm-up value during warm-up.
    double beta1(std::size_t step) const;
    std::size_t total_steps() const { return total_; }
    std::size_t warmup_steps() const { return warmup_; }

private:
    double lr0_, lr_final_, beta1_, beta1_warm_;
    std::size_t warmup_, total_;
};

/// Adaptive moments with decoupled weight decay. Moments live in the
/// parameter store; the bias-correction products live here because the
/// first-moment coefficient changes during warm-up.
class AdamW {
public:
    explicit AdamW(const TrainConfig& cfg) : beta2_(cfg.beta2), eps_(cfg.eps), decay_(cfg.weight_decay) {}

    void step(ParamStore& store, double lr, double beta1);

    double beta1_product = 1.0;
    double beta2_product = 1.0;
    std::uint64_t steps = 0;

private:
    double beta2_, eps_, decay_;
};

struct StepRecord {
    std::size_t step = 0;
    double lr = 0;
    double cls = 0, box = 0, dfl = 0, total = 0;
};

/// Packs same-sized single-channel images into an (n, 1, h, w) tensor.
Tensor stack_images(const std::vector<const Image*>& images, const ModelConfig& cfg);

class Trainer {
public:
    Trainer(Detector& model, ParamStore& store, const TrainConfig& cfg, std::vector<Sample> data);

    bool done() const { return step_ >= schedule_.total_steps(); }
    /// One optimizer step on the next batch. Throws NumericError with the
    /// step, batch members and loss parts when the loss is not finite.
    StepRecord step();
    void run(const std::function<void(const StepRecord&)>& on_step = {});

    std::size_t position() const { return step_; }
    const Schedule& schedule() const { return schedule_; }
    std::size_t steps_per_epoch() const { return steps_per_epoch_; }

    /// Checkpoint plus optimizer moments (`<name>.m1`, `<name>.m2`) and a
    /// text record `<stem>.state`.
    void save(const std::filesystem::path& stem) const;
    void restore(const std::filesystem::path& stem);

private:
    std::vector<std::size_t> batch_indices(std::size_t step) const;

    Detector& model_;
    ParamStore& store_;
    TrainConfig cfg_;
    std::vector<Sample> data_;
    std::size_t steps_per_epoch_;
    Schedule schedule_;
    AdamW opt_;
    std::size_t step_ = 0;
};

std::string loss_log_header();
std::string loss_log_line(const StepRecord& r);

struct EvalOptions {
    DecodeOptions decode;
    std::size_t batch = 16;
    std::size_t jobs = 1;
};

struct EvalReport {
    PRF1 prf;
    ConfusionCounts counts;
    ApReport ap;
    NocoApReport noco;
    std::vector<Detection> detections;
};

/// Inference-mode detections for every sample; `Detection::image` indexes
/// `samples`.
std::vector<Detection> detect(const Detector& model, const std::vector<Sample>& samples, const EvalOptions& options = {});

/// Scores detections against the samples' labels. Precision, recall and F1
/// count IoU > 0.5 matches among the kept detections.
EvalReport evaluate(const std::vector<Detection>& dets, const std::vector<Sample>& samples, std::size_t jobs = 1);

}  // namespace leirstd
