#include "maunet/training.hpp"

#include "maunet/errors.hpp"
#include "maunet/losses.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>

namespace maunet {

namespace {

// Seed offset for the contrastive pixel sampler, kept apart from the
// batch-order stream so the sampler never perturbs batch composition.
constexpr std::uint64_t kContrastStream = 0x5eed5eed5eedULL;

bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch, std::mt19937_64& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch)) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch))));
    }
    return out;
}

std::map<std::string, Eigen::ArrayXd> collect_grads(const ParamVars& vars) {
    std::map<std::string, Eigen::ArrayXd> grads;
    for (const auto& [name, v] : vars) grads.emplace(name, v.grad());
    return grads;
}

void accumulate(LossReport& sum, const LossReport& r) {
    sum.l_seg += r.l_seg;
    sum.l_mimic += r.l_mimic;
    sum.l_kl += r.l_kl;
    sum.l_1 += r.l_1;
    sum.l_cont += r.l_cont;
    sum.l_reg += r.l_reg;
    sum.l_2 += r.l_2;
}

LossReport averaged(LossReport sum, double steps) {
    for (double* f : {&sum.l_seg, &sum.l_mimic, &sum.l_kl, &sum.l_1, &sum.l_cont, &sum.l_reg, &sum.l_2}) *f /= steps;
    return sum;
}

void validation_metrics(EpochLog& row, const NetworkPlan& plan, const ModelParams& params,
                        std::span<const Sample> val) {
    if (val.empty()) {
        row.mdice_val = row.miou_val = std::numeric_limits<double>::quiet_NaN();
        return;
    }
    const SegMetrics m = mean_metrics(evaluate(plan, params, val));
    row.mdice_val = m.dice;
    row.miou_val = m.iou;
}

[[noreturn]] void abort_non_finite(const NumericError& e, const TrainHooks& hooks, const ModelParams& params,
                                   int epoch, int step, int stage, const LossReport& last) {
    std::string where = "non-finite value at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                        " (stage " + std::to_string(stage) + "): " + e.what();
    if (hooks.snapshot_dir) {
        std::filesystem::create_directories(*hooks.snapshot_dir);
        const auto ckpt = *hooks.snapshot_dir / "nonfinite_snapshot.ckpt";
        save_checkpoint(params, ckpt);
        std::ofstream info(*hooks.snapshot_dir / "nonfinite_snapshot.txt");
        info << std::setprecision(17) << where << "\n"
             << "last_report l_seg=" << last.l_seg << " l_mimic=" << last.l_mimic << " l_kl=" << last.l_kl
             << " l_1=" << last.l_1 << " l_cont=" << last.l_cont << " l_reg=" << last.l_reg << " l_2=" << last.l_2
             << "\n";
        where += "; snapshot written to " + ckpt.string();
    }
    throw NumericError(where);
}

// Frozen teacher outputs for one training sample.
struct TeacherCache {
    Tensor logits;
    std::vector<Tensor> taps;  // projected to student widths
    PreferenceMasks masks;
};

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive and finite");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
}

void DistillConfig::validate() const {
    for (double l : lambda)
        if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("lambda entries must be finite and >= 0");
    if (!in_unit(omega_start) || !in_unit(omega_end)) throw ConfigError("omega schedule endpoints must lie in [0, 1]");
    if (!in_unit(tau_h) || !in_unit(tau_l) || !(tau_l < tau_h)) throw ConfigError("need 0 <= tau_l < tau_h <= 1");
    if (!(rho >= 0.0) || !std::isfinite(rho)) throw ConfigError("rho must be finite and >= 0");
    if (!in_unit(ema_decay)) throw ConfigError("ema_decay must lie in [0, 1]");
    if (!(temperature > 0.0) || !(contrast_temperature > 0.0)) throw ConfigError("temperatures must be positive");
    if (contrast_pixels < 2) throw ConfigError("contrast_pixels must be >= 2");
    if (!in_unit(stage1_fraction)) throw ConfigError("stage1_fraction must lie in [0, 1]");
}

int stage1_epochs(const DistillConfig& cfg, int total_epochs) {
    const auto e1 = static_cast<int>(std::lround(cfg.stage1_fraction * total_epochs));
    return std::clamp(e1, 0, total_epochs);
}

double omega_at(const DistillConfig& cfg, int epoch, int total_epochs) {
    if (cfg.omega_schedule == OmegaSchedule::constant) return cfg.omega_start;
    const int e1 = stage1_epochs(cfg, total_epochs);
    if (epoch >= e1) return cfg.omega_end;
    if (e1 == 1) return cfg.omega_start;
    const double t = static_cast<double>(epoch) / static_cast<double>(e1 - 1);
    return cfg.omega_start + (cfg.omega_end - cfg.omega_start) * t;
}

double cosine_lr(double base, int epoch, int epochs) {
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(epochs)));
}

void ema_update(ModelParams& theta_ema, const ModelParams& theta, double decay) {
    if (!in_unit(decay)) throw DomainError("EMA decay must lie in [0, 1]");
    if (theta_ema.size() != theta.size()) throw NameMismatchError("EMA and model have different parameter sets");
    for (auto& [name, t] : theta_ema) {
        if (!theta.contains(name)) throw NameMismatchError("EMA parameter '" + name + "' missing from model");
        const Tensor& src = theta.at(name);
        if (!(src.shape() == t.shape())) throw NameMismatchError("shape mismatch for parameter '" + name + "'");
    }
    for (auto& [name, t] : theta_ema) t.data() = decay * t.data() + (1.0 - decay) * theta.at(name).data();
}

void AdamW::step(ModelParams& params, const std::map<std::string, Eigen::ArrayXd>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) throw NameMismatchError("no gradient for parameter '" + name + "'");
        const Eigen::ArrayXd& g = git->second;
        auto [it, fresh] = moments_.try_emplace(name);
        if (fresh) {
            it->second.m = Eigen::ArrayXd::Zero(g.size());
            it->second.v = Eigen::ArrayXd::Zero(g.size());
        }
        Moments& mo = it->second;
        mo.m = cfg_.beta1 * mo.m + (1.0 - cfg_.beta1) * g;
        mo.v = cfg_.beta2 * mo.v + (1.0 - cfg_.beta2) * g.square();
        p.data() -= lr * cfg_.weight_decay * p.data();
        p.data() -= lr * (mo.m / bc1) / ((mo.v / bc2).sqrt() + cfg_.adam_eps);
    }
}

Tensor predict_probs(const NetworkPlan& plan, const ModelParams& params, std::span<const Sample> samples, int chunk) {
    if (samples.empty()) throw EmptyError("no samples to predict");
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < samples.size(); i += static_cast<std::size_t>(chunk)) {
        std::vector<std::size_t> idx;
        for (std::size_t j = i; j < std::min(samples.size(), i + static_cast<std::size_t>(chunk)); ++j) idx.push_back(j);
        const auto [images, masks] = make_batch(samples, idx);
        Tensor logits = forward(plan, params, images, false).logits;
        logits.data() = logits.data().unaryExpr([](double v) { return sigmoid_value(v); });
        for (int n = 0; n < logits.shape().n; ++n) parts.push_back(logits.slice_batch(n));
    }
    return stack_batch(parts);
}

std::vector<SegMetrics> evaluate(const NetworkPlan& plan, const ModelParams& params, std::span<const Sample> samples,
                                 double threshold) {
    const Tensor probs = predict_probs(plan, params, samples);
    std::vector<Tensor> masks;
    for (const Sample& s : samples) masks.push_back(s.mask);
    return per_image_metrics(probs, stack_batch(masks), threshold);
}

TrainResult train_supervised(const NetworkPlan& plan, ModelParams params, std::span<const Sample> train,
                             std::span<const Sample> val, const TrainConfig& cfg, const TrainHooks& hooks) {
    cfg.validate();
    if (train.empty()) throw EmptyError("training set is empty");
    AdamW opt(cfg);
    std::mt19937_64 rng(cfg.seed);
    TrainResult result;
    LossReport last;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        LossReport sum;
        int step = 0;
        for (const auto& idx : epoch_batches(train.size(), cfg.batch, rng)) {
            try {
                const auto [images, masks] = make_batch(train, idx);
                Graph g;
                const ParamVars vars = bind(g, params, true);
                const ForwardResult r = forward(plan, vars, g.constant(images));
                const Var loss = seg_loss(r.logits, masks);
                g.backward(loss);
                opt.step(params, collect_grads(vars), lr);
                for (const auto& [name, t] : params) t.check_finite(name);
                last = LossReport{loss.item(), 0.0, 0.0, loss.item(), 0.0, 0.0, loss.item()};
            } catch (const NumericError& e) {
                abort_non_finite(e, hooks, params, epoch, step, 0, last);
            }
            accumulate(sum, last);
            if (hooks.on_step) hooks.on_step({epoch, step, 0, 0.0, last, false});
            ++step;
        }
        EpochLog row{epoch, 0, 0.0, lr, averaged(sum, step), 0.0, 0.0};
        validation_metrics(row, plan, params, val);
        result.log.push_back(row);
        if (hooks.on_epoch) hooks.on_epoch(row);
    }
    result.params = std::move(params);
    return result;
}

TrainResult train_distill(const NetworkPlan& student_plan, ModelParams student, const NetworkPlan& teacher_plan,
                          const ModelParams& teacher, std::span<const Sample> train, std::span<const Sample> val,
                          const TrainConfig& cfg, const DistillConfig& dcfg, const TrainHooks& hooks) {
    cfg.validate();
    dcfg.validate();
    if (train.empty()) throw EmptyError("training set is empty");
    if (student_plan.taps.size() != teacher_plan.taps.size() || dcfg.lambda.size() != student_plan.taps.size()) {
        throw ConfigError("student taps, teacher taps and lambda must have the same length");
    }

    // The teacher is frozen, so its outputs are computed once per sample.
    std::vector<int> tap_widths;
    for (const Tensor& t : forward(student_plan, student, train.front().image, true).taps) tap_widths.push_back(t.shape().c);
    std::vector<TeacherCache> cache;
    cache.reserve(train.size());
    for (const Sample& s : train) {
        Inference t = forward(teacher_plan, teacher, s.image, true);
        TeacherCache c;
        for (std::size_t l = 0; l < t.taps.size(); ++l) c.taps.push_back(project_channels(t.taps[l], tap_widths[l]));
        Tensor probs = t.logits;
        probs.data() = probs.data().unaryExpr([](double v) { return sigmoid_value(v); });
        c.masks = preference_partition(probs, dcfg.tau_h, dcfg.tau_l);
        c.logits = std::move(t.logits);
        cache.push_back(std::move(c));
    }

    AdamW opt(cfg);
    std::mt19937_64 rng(cfg.seed);
    std::mt19937_64 contrast_rng(cfg.seed ^ kContrastStream);
    const int e1 = stage1_epochs(dcfg, cfg.epochs);
    std::optional<ModelParams> ema;
    TrainResult result;
    LossReport last;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const int stage = epoch < e1 ? 1 : 2;
        if (stage == 2 && !ema) ema = student;
        const double omega = omega_at(dcfg, epoch, cfg.epochs);
        const double lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        LossReport sum;
        int step = 0;
        for (const auto& idx : epoch_batches(train.size(), cfg.batch, rng)) {
            bool degenerate = false;
            try {
                const auto [images, masks] = make_batch(train, idx);
                std::vector<Tensor> t_logits;
                std::vector<std::vector<Tensor>> t_taps(student_plan.taps.size());
                std::vector<Tensor> pos, neg, ign;
                for (std::size_t i : idx) {
                    t_logits.push_back(cache[i].logits);
                    for (std::size_t l = 0; l < t_taps.size(); ++l) t_taps[l].push_back(cache[i].taps[l]);
                    pos.push_back(cache[i].masks.positive);
                    neg.push_back(cache[i].masks.negative);
                    ign.push_back(cache[i].masks.ignored);
                }
                std::vector<Tensor> teacher_taps;
                for (const auto& per_tap : t_taps) teacher_taps.push_back(stack_batch(per_tap));
                PreferenceMasks pref{stack_batch(pos), stack_batch(neg), stack_batch(ign)};
                subsample_masks(pref, static_cast<std::size_t>(dcfg.contrast_pixels), contrast_rng);

                Graph g;
                const ParamVars vars = bind(g, student, true);
                const ForwardResult r = forward(student_plan, vars, g.constant(images), {true, false});
                std::vector<Var> weights;
                for (const auto& [name, v] : vars) weights.push_back(v);

                const Var l_seg = seg_loss(r.logits, masks);
                const Var l_mimic = mimic_loss(r.taps, teacher_taps, dcfg.lambda);
                const Var l_kl = bernoulli_kl(stack_batch(t_logits), r.logits, dcfg.temperature);
                const ContrastiveResult cont =
                    contrastive_loss(r.embedding, pref.positive, pref.negative, dcfg.contrast_temperature);
                degenerate = cont.degenerate;
                const Var l_reg = mean_square(weights);
                const Var l_1 = stage1_loss(l_seg, l_mimic, l_kl, omega);
                const Var l_2 = stage2_loss(l_seg, cont.loss, l_reg, dcfg.rho);

                g.backward(stage == 1 ? l_1 : l_2);
                opt.step(student, collect_grads(vars), lr);
                for (const auto& [name, t] : student) t.check_finite(name);
                if (stage == 2) ema_update(*ema, student, dcfg.ema_decay);
                last = LossReport{l_seg.item(), l_mimic.item(), l_kl.item(), l_1.item(),
                                  cont.loss.item(), l_reg.item(), l_2.item()};
            } catch (const NumericError& e) {
                abort_non_finite(e, hooks, student, epoch, step, stage, last);
            }
            accumulate(sum, last);
            if (hooks.on_step) hooks.on_step({epoch, step, stage, omega, last, degenerate});
            ++step;
        }
        EpochLog row{epoch, stage, omega, lr, averaged(sum, step), 0.0, 0.0};
        validation_metrics(row, student_plan, ema ? *ema : student, val);
        result.log.push_back(row);
        if (hooks.on_epoch) hooks.on_epoch(row);
    }
    result.params = ema ? std::move(*ema) : std::move(student);
    return result;
}

void write_loss_csv_header(std::ostream& out) {
    out << "epoch,stage,omega_kl,l_seg,l_mimic,l_kl,l_1,l_cont,l_reg,l_2,mdice_val,miou_val\n";
}

void write_loss_csv_row(std::ostream& out, const EpochLog& r) {
    const auto flags = out.flags();
    const auto prec = out.precision();
    out << std::setprecision(17) << r.epoch << "," << r.stage << "," << r.omega_kl << "," << r.loss.l_seg << ","
        << r.loss.l_mimic << "," << r.loss.l_kl << "," << r.loss.l_1 << "," << r.loss.l_cont << "," << r.loss.l_reg
        << "," << r.loss.l_2 << "," << r.mdice_val << "," << r.miou_val << "\n";
    out.flags(flags);
    out.precision(prec);
}

}  // namespace maunet
