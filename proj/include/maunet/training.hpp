#pragma once

#include "maunet/data.hpp"
#include "maunet/metrics.hpp"
#include "maunet/model.hpp"

#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>

namespace maunet {

struct TrainConfig {
    int epochs = 300;
    int batch = 8;
    double lr = 1e-3;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 42;

    /// Throws ConfigError.
    void validate() const;
};

enum class OmegaSchedule { linear_ramp, constant };

struct DistillConfig {
    std::vector<double> lambda{0.2, 0.2, 0.2, 0.2, 0.2};  // per-tap mimicry weights
    OmegaSchedule omega_schedule = OmegaSchedule::linear_ramp;
    double omega_start = 0.0;
    double omega_end = 1.0;
    double tau_h = 0.8;
    double tau_l = 0.2;
    double rho = 0.3;
    double ema_decay = 0.99;
    double temperature = 1.0;           // KL softening
    double contrast_temperature = 0.1;  // InfoNCE
    int contrast_pixels = 256;          // per class and step
    double stage1_fraction = 0.6;

    /// Throws ConfigError.
    void validate() const;
};

/// Number of leading epochs trained with the stage-1 objective.
int stage1_epochs(const DistillConfig& cfg, int total_epochs);
/// omega_KL for `epoch`; stage-2 epochs report the schedule's final value.
double omega_at(const DistillConfig& cfg, int epoch, int total_epochs);

/// base * 0.5 * (1 + cos(pi * epoch / epochs)).
double cosine_lr(double base, int epoch, int epochs);

/// theta_ema <- decay * theta_ema + (1 - decay) * theta, tensor by tensor.
/// Throws NameMismatchError if the name/shape sets differ, DomainError
/// unless decay is in [0, 1].
void ema_update(ModelParams& theta_ema, const ModelParams& theta, double decay);

/// Adam with decoupled weight decay.
class AdamW {
public:
    explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}
    void step(ModelParams& params, const std::map<std::string, Eigen::ArrayXd>& grads, double lr);
    long steps() const { return t_; }

private:
    struct Moments {
        Eigen::ArrayXd m;
        Eigen::ArrayXd v;
    };
    TrainConfig cfg_;
    std::map<std::string, Moments> moments_;
    long t_ = 0;
};

struct LossReport {
    double l_seg = 0.0;
    double l_mimic = 0.0;
    double l_kl = 0.0;
    double l_1 = 0.0;
    double l_cont = 0.0;
    double l_reg = 0.0;
    double l_2 = 0.0;
};

struct EpochLog {
    int epoch = 0;
    int stage = 0;  // 0 = plain supervised, 1 / 2 = distillation stages
    double omega_kl = 0.0;
    double lr = 0.0;
    LossReport loss;  // mean over the epoch's steps
    double mdice_val = 0.0;
    double miou_val = 0.0;
};

struct StepRecord {
    int epoch = 0;
    int step = 0;
    int stage = 0;
    double omega_kl = 0.0;
    LossReport loss;
    bool contrast_degenerate = false;
};

struct TrainHooks {
    std::function<void(const StepRecord&)> on_step;
    std::function<void(const EpochLog&)> on_epoch;
    /// Where to dump parameters and context if a step goes non-finite.
    std::optional<std::filesystem::path> snapshot_dir;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochLog> log;
};

/// Minimises the segmentation loss alone (teacher pretraining, baselines).
TrainResult train_supervised(const NetworkPlan& plan, ModelParams params, std::span<const Sample> train,
                             std::span<const Sample> val, const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Two-stage distillation from a frozen teacher. Stage 1 minimises
/// l_seg + (1-omega) l_mimic + omega l_kl; stage 2 minimises
/// l_seg + l_cont + rho l_reg and keeps an EMA of the weights, which is
/// returned. All seven loss terms are evaluated and reported every step.
/// Non-finite values raise NumericError after writing a snapshot.
TrainResult train_distill(const NetworkPlan& student_plan, ModelParams student, const NetworkPlan& teacher_plan,
                          const ModelParams& teacher, std::span<const Sample> train, std::span<const Sample> val,
                          const TrainConfig& cfg, const DistillConfig& dcfg, const TrainHooks& hooks = {});

/// Sigmoid probabilities for every sample, evaluated in chunks.
Tensor predict_probs(const NetworkPlan& plan, const ModelParams& params, std::span<const Sample> samples,
                     int chunk = 8);

/// Per-image metrics of the thresholded predictions.
std::vector<SegMetrics> evaluate(const NetworkPlan& plan, const ModelParams& params, std::span<const Sample> samples,
                                 double threshold = 0.5);

void write_loss_csv_header(std::ostream& out);
void write_loss_csv_row(std::ostream& out, const EpochLog& row);

}  // namespace maunet
