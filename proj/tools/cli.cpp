#include "cli.hpp"

#include "run_config.hpp"

#include "maunet/errors.hpp"
#include "maunet/gradcheck_suite.hpp"
#include "maunet/image_io.hpp"
#include "maunet/metrics.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>

namespace maunet::cli {

namespace {

namespace fs = std::filesystem;

constexpr double kGradTolerance = 1e-4;

struct Flags {
    std::optional<std::string> config, data, out, teacher, checkpoint, model, plan, split;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs, resolution, batch, count;
    std::optional<double> threshold, lr;
    bool dump_attn = false;
    bool no_overlays = false;
    double corrupt_gradient = 1.0;
};

RunConfig resolve(const std::string& command, const Flags& f) {
    RunConfig c;
    if (f.config) merge_json(c, read_config_file(*f.config));
    c.command = command;
    if (f.data) c.data = *f.data;
    if (f.out) c.out = *f.out;
    if (f.teacher) c.teacher = *f.teacher;
    if (f.checkpoint) c.checkpoint = *f.checkpoint;
    if (f.model) c.model = *f.model;
    if (f.plan) c.plan = *f.plan;
    if (f.split) c.split = *f.split;
    if (f.seed) c.train.seed = *f.seed;
    if (f.epochs) c.train.epochs = *f.epochs;
    if (f.resolution) c.resolution = *f.resolution;
    if (f.batch) c.train.batch = *f.batch;
    if (f.count) c.synthetic_count = *f.count;
    if (f.threshold) c.threshold = *f.threshold;
    if (f.lr) c.train.lr = *f.lr;
    if (f.dump_attn) c.dump_attn = true;
    if (f.no_overlays) c.overlays = false;
    c.validate();
    return c;
}

// <out>/<YYYYmmdd-HHMMSS>_seed<seed>, suffixed _2, _3, ... on collision.
fs::path make_run_dir(const RunConfig& c) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm local{};
    localtime_r(&now, &local);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &local);
    const std::string base = std::string(stamp) + "_seed" + std::to_string(c.train.seed);
    fs::path dir = c.out / base;
    for (int k = 2; fs::exists(dir); ++k) dir = c.out / (base + "_" + std::to_string(k));
    fs::create_directories(dir);
    std::ofstream(dir / "config.json") << to_json(c).dump(2) << "\n";
    return dir;
}

std::vector<Sample> load_samples(const RunConfig& c) {
    if (c.data.empty()) return generate_synthetic(c.synthetic_count, c.resolution, c.data_seed);
    if (!fs::is_directory(c.data)) throw ConfigError("--data: dataset directory not found: " + c.data.string());
    std::vector<Sample> s = load_directory(c.data / "images", c.data / "masks", c.resolution);
    if (s.empty()) throw EmptyError("--data: no images in " + c.data.string());
    return s;
}

std::pair<std::vector<Sample>, std::vector<Sample>> train_val(const RunConfig& c) {
    return split(load_samples(c), c.train_fraction, c.data_seed);
}

ModelConfig model_config(const RunConfig& c) { return {c.resolution, c.base_width, 5, 3}; }

NetworkPlan plan_for(const RunConfig& c, const std::string& which) {
    return which == "teacher" ? teacher_plan(model_config(c)) : student_plan(model_config(c));
}

struct MetricBlock {
    std::string split;
    std::span<const Sample> samples;
    std::vector<SegMetrics> metrics;
};

void write_metric_row(std::ostream& out, const std::string& split, const std::string& id, const SegMetrics& m) {
    out << split << "," << id << "," << m.dice << "," << m.iou << "," << m.acc << "," << m.spe << "," << m.sen << "\n";
}

void write_metrics_csv(const fs::path& path, double threshold, const std::vector<MetricBlock>& blocks) {
    std::ofstream out(path);
    out << "# threshold=" << threshold << "\n" << "split,id,dice,iou,acc,spe,sen\n" << std::setprecision(17);
    for (const MetricBlock& b : blocks) {
        for (std::size_t i = 0; i < b.samples.size(); ++i) write_metric_row(out, b.split, b.samples[i].id, b.metrics[i]);
        if (!b.metrics.empty()) write_metric_row(out, b.split, "mean", mean_metrics(b.metrics));
    }
}

std::vector<MetricBlock> evaluate_splits(const NetworkPlan& plan, const ModelParams& params,
                                         std::span<const Sample> train, std::span<const Sample> val,
                                         double threshold) {
    std::vector<MetricBlock> blocks;
    for (auto [name, samples] : {std::pair{"train", train}, std::pair{"val", val}}) {
        if (samples.empty()) continue;
        blocks.push_back({name, samples, evaluate(plan, params, samples, threshold)});
    }
    return blocks;
}

// Streams the loss CSV as epochs finish, so aborted runs keep their log.
TrainHooks logging_hooks(const fs::path& dir, std::ofstream& loss_csv, std::ostream& out) {
    loss_csv.open(dir / "loss.csv");
    write_loss_csv_header(loss_csv);
    TrainHooks hooks;
    hooks.snapshot_dir = dir;
    hooks.on_epoch = [&loss_csv, &out](const EpochLog& row) {
        write_loss_csv_row(loss_csv, row);
        loss_csv.flush();
        out << "epoch " << row.epoch << " stage " << row.stage << " loss " << row.loss.l_seg << " val_mdice "
            << row.mdice_val << "\n";
    };
    return hooks;
}

void print_means(std::ostream& out, const std::vector<MetricBlock>& blocks) {
    const auto flags = out.flags();
    const auto prec = out.precision();
    out << std::setprecision(17);
    for (const MetricBlock& b : blocks) out << b.split << " mdice=" << mean_metrics(b.metrics).dice << "\n";
    out.flags(flags);
    out.precision(prec);
}

int cmd_train_teacher(const RunConfig& c, std::ostream& out) {
    const auto [train, val] = train_val(c);
    auto [plan, params] = build_teacher(model_config(c), c.train.seed);
    const fs::path dir = make_run_dir(c);
    out << "run directory: " << dir.string() << "\n";
    std::ofstream loss_csv;
    const TrainResult res = train_supervised(plan, params, train, val, c.train, logging_hooks(dir, loss_csv, out));
    save_checkpoint(res.params, dir / "model.ckpt");
    const auto blocks = evaluate_splits(plan, res.params, train, val, c.threshold);
    write_metrics_csv(dir / "metrics.csv", c.threshold, blocks);
    print_means(out, blocks);
    return ok;
}

void dump_attention(const NetworkPlan& plan, const ModelParams& params, const Sample& s, const fs::path& dir) {
    fs::create_directories(dir);
    Graph g;
    const ForwardResult r = forward(plan, bind(g, params, false), g.constant(s.image), {false, true});
    for (const auto& [name, attn] : r.attention) {
        std::string file = name;
        std::replace(file.begin(), file.end(), '.', '_');
        save_attention_pgm(attn.value(), 0, dir / (s.id + "_" + file + ".pgm"));
    }
}

int cmd_distill(const RunConfig& c, std::ostream& out) {
    if (c.teacher.empty()) throw ConfigError("--teacher: a teacher checkpoint is required");
    if (!fs::is_regular_file(c.teacher)) throw ConfigError("--teacher: checkpoint not found: " + c.teacher.string());
    const NetworkPlan t_plan = teacher_plan(model_config(c));
    const ModelParams teacher = load_checkpoint(c.teacher, t_plan);
    const auto [train, val] = train_val(c);
    auto [plan, params] = build_student(model_config(c), c.train.seed);
    const fs::path dir = make_run_dir(c);
    out << "run directory: " << dir.string() << "\n";
    std::ofstream loss_csv;
    const TrainResult res =
        train_distill(plan, params, t_plan, teacher, train, val, c.train, c.distill, logging_hooks(dir, loss_csv, out));
    save_checkpoint(res.params, dir / "model.ckpt");
    const auto blocks = evaluate_splits(plan, res.params, train, val, c.threshold);
    write_metrics_csv(dir / "metrics.csv", c.threshold, blocks);
    if (c.dump_attn) dump_attention(plan, res.params, val.empty() ? train.front() : val.front(), dir / "attention");
    print_means(out, blocks);
    return ok;
}

bool on_boundary(const Tensor& mask, int y, int x) {
    const Shape s = mask.shape();
    if (mask.at(0, 0, y, x) < 0.5) return false;
    constexpr int dy[] = {-1, 1, 0, 0};
    constexpr int dx[] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k) {
        const int yy = y + dy[k];
        const int xx = x + dx[k];
        if (yy < 0 || xx < 0 || yy >= s.h || xx >= s.w || mask.at(0, 0, yy, xx) < 0.5) return true;
    }
    return false;
}

// Ground-truth boundary in red, predicted boundary in green, both in yellow.
void write_overlay(const Sample& s, const Tensor& pred, const fs::path& path) {
    const Shape sh = s.image.shape();
    RgbImage img{sh.w, sh.h, std::vector<std::uint8_t>(static_cast<std::size_t>(sh.w) * sh.h * 3)};
    for (int y = 0; y < sh.h; ++y)
        for (int x = 0; x < sh.w; ++x) {
            const std::size_t p = 3 * (static_cast<std::size_t>(y) * sh.w + x);
            for (int c = 0; c < 3; ++c)
                img.pixels[p + c] = static_cast<std::uint8_t>(std::lround(std::clamp(s.image.at(0, c, y, x), 0.0, 1.0) * 255));
            const bool truth = on_boundary(s.mask, y, x);
            const bool guess = on_boundary(pred, y, x);
            if (truth || guess) {
                img.pixels[p] = truth ? 255 : 0;
                img.pixels[p + 1] = guess ? 255 : 0;
                img.pixels[p + 2] = 0;
            }
        }
    write_ppm(path, img);
}

int cmd_eval(const RunConfig& c, std::ostream& out) {
    if (c.checkpoint.empty()) throw ConfigError("--checkpoint: a checkpoint is required");
    if (!fs::is_regular_file(c.checkpoint)) throw ConfigError("--checkpoint: not found: " + c.checkpoint.string());
    const NetworkPlan plan = plan_for(c, c.model);
    const ModelParams params = load_checkpoint(c.checkpoint, plan);
    std::vector<Sample> train, val;
    if (c.split == "all") {
        train = load_samples(c);
    } else {
        std::tie(train, val) = train_val(c);
        if (c.split == "val") train.clear();
        else val.clear();
    }
    const fs::path dir = make_run_dir(c);
    out << "run directory: " << dir.string() << "\n";
    auto blocks = evaluate_splits(plan, params, train, val, c.threshold);
    if (c.split == "all") blocks.front().split = "all";
    write_metrics_csv(dir / "metrics.csv", c.threshold, blocks);
    if (c.overlays) {
        fs::create_directories(dir / "overlays");
        for (const MetricBlock& b : blocks) {
            Tensor probs = predict_probs(plan, params, b.samples);
            for (std::size_t i = 0; i < b.samples.size(); ++i) {
                Tensor pred = probs.slice_batch(static_cast<int>(i));
                pred.data() = (pred.data() >= c.threshold).cast<double>();
                write_overlay(b.samples[i], pred, dir / "overlays" / (b.samples[i].id + ".ppm"));
            }
        }
    }
    print_means(out, blocks);
    return ok;
}

int cmd_count(const RunConfig& c, std::ostream& out) {
    std::vector<NetworkPlan> plans;
    if (!c.plan.empty()) {
        std::ifstream in(c.plan);
        if (!in) throw ConfigError("--plan: cannot open " + c.plan.string());
        const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        plans.push_back(plan_from_json(text));
    } else {
        plans = {student_plan(model_config(c)), teacher_plan(model_config(c))};
    }
    const fs::path dir = make_run_dir(c);
    out << "run directory: " << dir.string() << "\n";
    std::ofstream text(dir / "complexity.txt");
    for (const NetworkPlan& plan : plans) {
        const ComplexityReport report = analyze(plan, plan.resolution);
        write_report_text(out, report);
        write_report_text(text, report);
        std::ofstream csv(dir / ("complexity_" + plan.name + ".csv"));
        write_report_csv(csv, report);
        out << "constructed model params: " << param_count(plan) << "\n\n";
    }
    return ok;
}

int cmd_gradcheck(const RunConfig& c, double corrupt, std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<GradCheckRow> rows = run_gradcheck_suite(c.train.seed, corrupt);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    bool pass = true;
    out << std::left << std::setw(28) << "check" << std::setw(8) << "group" << std::setw(14) << "max_rel_err"
        << "result\n";
    for (const GradCheckRow& r : rows) {
        const bool row_ok = r.max_rel_error < kGradTolerance;
        pass = pass && row_ok;
        out << std::left << std::setw(28) << r.name << std::setw(8) << r.group << std::setw(14) << std::scientific
            << std::setprecision(3) << r.max_rel_error << std::defaultfloat << (row_ok ? "PASS" : "FAIL") << "\n";
    }
    out << rows.size() << " checks, tolerance " << kGradTolerance << ", " << std::fixed << std::setprecision(1)
        << seconds << " s: " << (pass ? "PASS" : "FAIL") << std::defaultfloat << "\n";
    return pass ? ok : gradcheck_failed;
}

int cmd_gen_data(const RunConfig& c, std::ostream& out) {
    const std::vector<Sample> samples = generate_synthetic(c.synthetic_count, c.resolution, c.data_seed);
    const fs::path dir = make_run_dir(c);
    export_dataset(samples, dir);
    out << "run directory: " << dir.string() << "\n" << samples.size() << " samples written\n";
    return ok;
}

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "JSON config file; flags override its values");
    cmd->add_option("--out", f.out, "Root directory for run directories");
    cmd->add_option("--seed", f.seed, "Training seed");
    cmd->add_option("--resolution", f.resolution, "Square input resolution");
}

void add_data(CLI::App* cmd, Flags& f) {
    cmd->add_option("--data", f.data, "Dataset root with images/ and masks/ (default: synthetic)");
    cmd->add_option("--count", f.count, "Number of synthetic samples");
}

void add_training(CLI::App* cmd, Flags& f) {
    cmd->add_option("--epochs", f.epochs, "Training epochs");
    cmd->add_option("--lr", f.lr, "Base learning rate");
    cmd->add_option("--batch", f.batch, "Batch size");
    cmd->add_option("--threshold", f.threshold, "Probability threshold for metrics");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Lightweight attention U-Net segmentation with teacher-student distillation", "maunet"};
    app.require_subcommand(1);
    Flags f;

    CLI::App* train_teacher = app.add_subcommand("train-teacher", "Train the teacher network supervised");
    add_common(train_teacher, f);
    add_data(train_teacher, f);
    add_training(train_teacher, f);

    CLI::App* distill = app.add_subcommand("distill", "Distill a student from a trained teacher");
    add_common(distill, f);
    add_data(distill, f);
    add_training(distill, f);
    distill->add_option("--teacher", f.teacher, "Teacher checkpoint");
    distill->add_flag("--dump-attn", f.dump_attn, "Write the student's attention maps as PGM");

    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    add_common(eval, f);
    add_data(eval, f);
    eval->add_option("--checkpoint", f.checkpoint, "Checkpoint to evaluate");
    eval->add_option("--model", f.model, "Plan of the checkpoint: student or teacher");
    eval->add_option("--split", f.split, "all, train or val");
    eval->add_option("--threshold", f.threshold, "Probability threshold (default 0.5)");
    eval->add_flag("--no-overlays", f.no_overlays, "Skip the overlay images");

    CLI::App* count = app.add_subcommand("count", "Parameter and FLOP report");
    add_common(count, f);
    count->add_option("--plan", f.plan, "Custom plan JSON instead of the default student and teacher");

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
    add_common(gradcheck, f);
    gradcheck->add_option("--corrupt-gradient", f.corrupt_gradient)->group("");

    CLI::App* gen_data = app.add_subcommand("gen-data", "Write a synthetic dataset");
    add_common(gen_data, f);
    gen_data->add_option("--count", f.count, "Number of samples");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : config_error;
    }

    try {
        CLI::App* cmd = app.get_subcommands().front();
        const RunConfig c = resolve(cmd->get_name(), f);
        if (cmd == train_teacher) return cmd_train_teacher(c, out);
        if (cmd == distill) return cmd_distill(c, out);
        if (cmd == eval) return cmd_eval(c, out);
        if (cmd == count) return cmd_count(c, out);
        if (cmd == gradcheck) return cmd_gradcheck(c, f.corrupt_gradient, out);
        return cmd_gen_data(c, out);
    } catch (const NumericError& e) {
        err << "numeric abort: " << e.what() << "\n";
        return numeric_abort;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return config_error;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return config_error;
    }
}

}  // namespace maunet::cli
