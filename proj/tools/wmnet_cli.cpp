// wmnet: train, evaluate and probe weight-map CNNs on MNIST.
//
//   wmnet train       --arch small_cnn --variant smoothing --seeds 1 2 3
//   wmnet eval        --checkpoint runs/run-.../model.wmn
//   wmnet noise-sweep --checkpoint a.wmn b.wmn c.wmn --seeds 1 2 3
//   wmnet fgsm-sweep  --checkpoint a.wmn --levels 0 0.1 0.2
//   wmnet gradcam     --checkpoint a.wmn --images 0 1 2
//   wmnet inspect     --arch resnet --variant unsharp --replacement alternating
//
// Every option can also be given in a config file (--config run.toml, one
// `key = value` per line, keys named like the long flags without dashes);
// flags on the command line win over the file. Unknown keys are an error.

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wmnet/gradcam.hpp"
#include "wmnet/robustness.hpp"

namespace fs = std::filesystem;
using namespace wmnet;

namespace {

struct RunConfig {
    std::string command;
    std::string data_dir = "data/mnist";
    std::string out_dir = "runs";
    std::vector<std::uint64_t> seeds = {1};
    std::uint64_t split_seed = 0;
    // architecture
    Family family = Family::small_cnn;
    LayerKind variant = LayerKind::wm_smoothing;
    Replacement replacement = Replacement::all;
    bool replace_first = false;
    std::size_t kernel_size = 3;
    bool batchnorm = false;
    bool input_scale = false;
    // training
    std::size_t epochs = 15;
    std::size_t batch_size = 128;
    double learning_rate = 1e-3;
    std::size_t train_subset = 0;
    // evaluation
    std::vector<double> levels;
    std::size_t subset = 0;
    Renormalization renorm = Renormalization::min_max;
    std::vector<std::string> checkpoints;
    std::vector<std::size_t> images = {0};
    int target_class = -1;

    ArchitectureSpec spec() const {
        ArchitectureSpec s;
        s.family = family;
        s.layer_kind = variant;
        s.replacement = variant == LayerKind::conv ? Replacement::none : replacement;
        s.replace_first = replace_first;
        s.kernel_size = kernel_size;
        s.batchnorm = batchnorm;
        s.input_scale = input_scale;
        return s;
    }
};

template <typename V>
std::string toml_list(const std::vector<V>& v) {
    std::ostringstream os;
    os << std::setprecision(17) << '[';
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
    os << ']';
    return os.str();
}

/// The effective configuration in the --config file syntax; feeding it back
/// with --config reproduces the run.
std::string config_text(const RunConfig& c) {
    std::ostringstream os;
    os << std::boolalpha << std::setprecision(17);
    os << "data-dir = \"" << c.data_dir << "\"\n"
       << "out-dir = \"" << c.out_dir << "\"\n"
       << "seeds = " << toml_list(c.seeds) << '\n'
       << "split-seed = " << c.split_seed << '\n'
       << "arch = \"" << to_string(c.family) << "\"\n"
       << "variant = \"" << to_string(c.variant) << "\"\n"
       << "replacement = \"" << to_string(c.replacement) << "\"\n"
       << "replace-first = " << c.replace_first << '\n'
       << "kernel-size = " << c.kernel_size << '\n'
       << "batchnorm = " << c.batchnorm << '\n'
       << "input-scale = " << c.input_scale << '\n'
       << "epochs = " << c.epochs << '\n'
       << "batch-size = " << c.batch_size << '\n'
       << "lr = " << c.learning_rate << '\n'
       << "train-subset = " << c.train_subset << '\n'
       << "subset = " << c.subset << '\n'
       << "renorm = \"" << (c.renorm == Renormalization::min_max ? "min_max" : "divide") << "\"\n";
    if (!c.levels.empty()) os << "levels = " << toml_list(c.levels) << '\n';
    if (!c.checkpoints.empty()) {
        os << "checkpoint = [";
        for (std::size_t i = 0; i < c.checkpoints.size(); ++i) os << (i ? ", " : "") << '"' << c.checkpoints[i] << '"';
        os << "]\n";
    }
    os << "images = " << toml_list(c.images) << '\n';
    if (c.target_class >= 0) os << "class = " << c.target_class << '\n';
    return os.str();
}

/// A failure with a cause the user can act on; printed without a stack of context.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y%m%d-%H%M%S");
    return os.str();
}

/// Fresh `run-<timestamp>-<seed>` directory holding a copy of the effective config.
fs::path make_run_dir(const RunConfig& cfg, const std::string& stamp, std::uint64_t seed, const std::string& config) {
    const std::string base = "run-" + stamp + "-" + std::to_string(seed);
    fs::path dir = fs::path(cfg.out_dir) / base;
    for (int k = 1; fs::exists(dir); ++k) dir = fs::path(cfg.out_dir) / (base + "." + std::to_string(k));
    fs::create_directories(dir);
    std::ofstream f(dir / "config.toml");
    f << "# wmnet " << cfg.command << "\n" << config;
    if (!f) throw std::runtime_error("cannot write " + (dir / "config.toml").string());
    return dir;
}

struct MeanStd {
    double mean = 0, stddev = 0;
};

MeanStd mean_std(const std::vector<double>& v) {
    MeanStd r;
    for (double x : v) r.mean += x;
    r.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0;
        for (double x : v) ss += (x - r.mean) * (x - r.mean);
        r.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return r;
}

std::string format_mean_std(const std::vector<double>& v) {
    const MeanStd m = mean_std(v);
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << m.mean << " ± " << m.stddev << " %";
    return os.str();
}

Dataset load_split(const RunConfig& cfg, Split which) {
    try {
        return load_mnist(cfg.data_dir, which);
    } catch (const std::exception& e) {
        throw UsageError(std::string("cannot load MNIST: ") + e.what() + " (set --data-dir)");
    }
}

Dataset test_set(const RunConfig& cfg) {
    Dataset test = load_split(cfg, Split::test);
    return cfg.subset ? test.head(cfg.subset) : test;
}

std::vector<Model<float>> load_checkpoints(const RunConfig& cfg) {
    if (cfg.checkpoints.empty()) throw UsageError(cfg.command + " needs --checkpoint");
    std::vector<Model<float>> models;
    for (const auto& path : cfg.checkpoints) {
        try {
            models.push_back(load_checkpoint<float>(path));
        } catch (const std::exception& e) {
            throw UsageError("unreadable checkpoint " + path + ": " + e.what());
        }
    }
    return models;
}

// ---------------------------------------------------------------------------

int cmd_train(const RunConfig& cfg, const std::string& config) {
    const ArchitectureSpec spec = cfg.spec();
    validate(spec);
    const Dataset source = load_split(cfg, Split::train);
    const Dataset test = test_set(cfg);
    TrainValSplit split = split_train_val(source, cfg.split_seed);
    if (cfg.train_subset) split.train = split.train.head(cfg.train_subset);

    const std::string stamp = timestamp();
    std::vector<double> errors;
    for (std::uint64_t seed : cfg.seeds) {
        const fs::path dir = make_run_dir(cfg, stamp, seed, config);
        Model<float> model = build_model<float>(spec, seed);
        TrainConfig tc;
        tc.learning_rate = cfg.learning_rate;
        tc.batch_size = cfg.batch_size;
        tc.epochs = cfg.epochs;
        tc.seed = seed;
        tc.checkpoint_path = dir / "model.wmn";
        tc.on_epoch = [&](std::size_t epoch, double loss, double val) {
            std::cout << "seed " << seed << " epoch " << epoch << "/" << cfg.epochs << "  train loss " << std::fixed
                      << std::setprecision(4) << loss << "  val error " << std::setprecision(2) << val << " %"
                      << std::endl;
        };
        RunHistory h = train(model, split.train, split.val, tc);
        h.test_error = evaluate(model, test);
        errors.push_back(h.test_error);

        std::ofstream hist(dir / "history.csv");
        hist << "epoch,train_loss,val_error\n" << std::setprecision(10);
        for (std::size_t e = 0; e < h.train_loss.size(); ++e) hist << e + 1 << ',' << h.train_loss[e] << ',' << h.val_error[e] << '\n';
        std::ofstream result(dir / "result.txt");
        result << "best_epoch " << h.best_epoch + 1 << "\ntest_error " << std::setprecision(10) << h.test_error
               << "\nwall_seconds " << h.wall_seconds << '\n';
        if (!hist || !result) throw std::runtime_error("cannot write run artifacts in " + dir.string());
        std::cout << "seed " << seed << " test error " << std::fixed << std::setprecision(2) << h.test_error << " %  -> "
                  << (dir / "model.wmn").string() << std::endl;
    }
    std::cout << "test error " << format_mean_std(errors) << " over " << errors.size() << " seed(s)" << std::endl;
    return 0;
}

int cmd_eval(const RunConfig& cfg) {
    auto models = load_checkpoints(cfg);
    const Dataset test = test_set(cfg);
    std::vector<double> errors;
    for (std::size_t i = 0; i < models.size(); ++i) {
        errors.push_back(evaluate(models[i], test));
        std::cout << cfg.checkpoints[i] << "  test error " << std::fixed << std::setprecision(2) << errors.back() << " %"
                  << std::endl;
    }
    std::cout << "test error " << format_mean_std(errors) << " over " << errors.size() << " model(s)" << std::endl;
    return 0;
}

int cmd_sweep(const RunConfig& cfg, const std::string& config, PerturbationKind kind) {
    auto models = load_checkpoints(cfg);
    if (models.size() != 1 && models.size() != cfg.seeds.size()) {
        throw UsageError("give one checkpoint, or one per seed (" + std::to_string(cfg.seeds.size()) + " seeds, " +
                         std::to_string(models.size()) + " checkpoints)");
    }
    const Dataset test = test_set(cfg);
    const std::vector<double> levels = cfg.levels.empty() ? default_levels(kind) : cfg.levels;
    std::vector<Model<float>*> ptrs;
    for (auto& m : models) ptrs.push_back(&m);
    SweepOptions opt;
    opt.renorm = cfg.renorm;
    const auto report = robustness_sweep<float>(ptrs, kind, levels, cfg.seeds, test, opt);

    const fs::path dir = make_run_dir(cfg, timestamp(), cfg.seeds.front(), config);
    const std::string stem = kind == PerturbationKind::uniform ? "noise" : "fgsm";
    write_trials_csv(report, dir / (stem + "_trials.csv"));
    write_aggregate_csv(report, dir / (stem + "_aggregate.csv"));

    std::cout << std::left << std::setw(8) << (kind == PerturbationKind::uniform ? "u" : "eps") << std::setw(22)
              << "test error" << "feature MSE\n";
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        std::vector<double> errs;
        for (const auto& t : report.trials)
            if (t.level == report.rows[i].level) errs.push_back(t.test_error);
        std::cout << std::left << std::setw(8) << report.rows[i].level << std::setw(22) << format_mean_std(errs)
                  << std::setprecision(6) << report.rows[i].feature_mse_mean << '\n';
    }
    std::cout << "wrote " << (dir / (stem + "_aggregate.csv")).string() << std::endl;
    return 0;
}

int cmd_gradcam(const RunConfig& cfg, const std::string& config) {
    auto models = load_checkpoints(cfg);
    const Dataset test = load_split(cfg, Split::test);
    const fs::path dir = make_run_dir(cfg, timestamp(), cfg.seeds.front(), config);
    for (std::size_t m = 0; m < models.size(); ++m) {
        for (std::size_t index : cfg.images) {
            if (index >= test.size()) throw UsageError("image index " + std::to_string(index) + " outside the test set");
            const Tensor<float> image = batch_images<float>(test, index, 1).reshaped({1, 28, 28});
            const int cls = cfg.target_class >= 0 ? cfg.target_class : test.labels[index];
            const Heatmap h = grad_cam(models[m], image, cls);
            const fs::path out = dir / ("cam_m" + std::to_string(m) + "_i" + std::to_string(index) + "_c" +
                                        std::to_string(cls) + ".pgm");
            render_heatmap(h, image, out);
            std::cout << "wrote " << out.string() << " (layer " << h.layer << ")" << std::endl;
        }
    }
    return 0;
}

int cmd_inspect(const RunConfig& cfg) {
    Model<float> model = cfg.checkpoints.empty() ? build_model<float>(cfg.spec(), cfg.seeds.front())
                                                  : load_checkpoint<float>(cfg.checkpoints.front());
    const auto report = count_params_flops(model);
    std::cout << to_config_string(model.spec()) << '\n';
    std::cout << std::left << std::setw(30) << "layer" << std::setw(17) << "kind" << std::setw(14) << "output"
              << std::right << std::setw(12) << "params" << std::setw(14) << "flops" << '\n';
    for (const auto& row : report.layers) {
        std::cout << std::left << std::setw(30) << row.name << std::setw(17) << row.kind << std::setw(14)
                  << shape_string(row.output) << std::right << std::setw(12) << row.params << std::setw(14) << row.flops
                  << '\n';
    }
    std::cout << std::left << std::setw(61) << "total" << std::right << std::setw(12) << report.total_params
              << std::setw(14) << report.total_flops << '\n';
    std::cout << "params " << std::fixed << std::setprecision(3) << report.total_params / 1e6 << "M  GFLOPS "
              << report.total_flops / 1e9 << std::endl;
    return 0;
}

template <typename E>
std::map<std::string, E> names_of(std::initializer_list<E> values) {
    std::map<std::string, E> out;
    for (E v : values) out.emplace(to_string(v), v);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    wmnet::tune_allocator();
    CLI::App app{"Weight-map CNN experiments on MNIST"};
    app.set_config("--config", "", "Read options from a TOML/INI key = value file");
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.require_subcommand(1, 1);
    app.fallthrough();

    RunConfig cfg;
    app.add_option("--data-dir", cfg.data_dir, "Directory holding the four MNIST IDX files (optionally .gz)")
        ->capture_default_str();
    app.add_option("--out-dir", cfg.out_dir, "Parent directory for run-<timestamp>-<seed>/ outputs")->capture_default_str();
    app.add_option("--seeds,--seed", cfg.seeds, "Trial seeds (initialization, shuffling, noise)")->capture_default_str();
    app.add_option("--split-seed", cfg.split_seed, "Seed of the 54K/6K train/validation split")->capture_default_str();

    auto variants = names_of({LayerKind::conv, LayerKind::wm_smoothing, LayerKind::wm_unsharp});
    variants.emplace("smoothing", LayerKind::wm_smoothing);
    variants.emplace("unsharp", LayerKind::wm_unsharp);
    app.add_option("--arch", cfg.family, "Network family")
        ->transform(CLI::CheckedTransformer(
            names_of({Family::small_cnn, Family::small_cnn_wide, Family::resnet, Family::densenet})))
        ->capture_default_str();
    app.add_option("--variant", cfg.variant, "Body layer type: conv, smoothing or unsharp")
        ->transform(CLI::CheckedTransformer(variants))
        ->capture_default_str();
    app.add_option("--replacement", cfg.replacement, "Which body layers take the variant: all, alternating, none")
        ->transform(CLI::CheckedTransformer(names_of({Replacement::all, Replacement::alternating, Replacement::none})))
        ->capture_default_str();
    app.add_flag("--replace-first", cfg.replace_first, "Alternating phase: replace the 1st, 3rd, ... layers instead");
    app.add_option("--kernel-size", cfg.kernel_size, "Box / convolution kernel size")
        ->check(CLI::IsMember({3, 9}))
        ->capture_default_str();
    app.add_flag("--batchnorm", cfg.batchnorm, "Batch normalization before every body nonlinearity");
    app.add_flag("--input-scale", cfg.input_scale, "Learned per-pixel input scaling layer");

    app.add_option("--epochs", cfg.epochs, "Training epochs")->check(CLI::PositiveNumber)->capture_default_str();
    app.add_option("--batch-size", cfg.batch_size, "Mini-batch size")->check(CLI::PositiveNumber)->capture_default_str();
    app.add_option("--lr", cfg.learning_rate, "Adam learning rate")->check(CLI::PositiveNumber)->capture_default_str();
    app.add_option("--train-subset", cfg.train_subset, "Train on the first N training-split images (0 = all)")
        ->capture_default_str();

    app.add_option("--levels", cfg.levels, "Perturbation levels (default: u 0..2 step 0.25, eps 0..0.5 step 0.05)");
    app.add_option("--subset", cfg.subset, "Use the first N test images (0 = all 10,000)")->capture_default_str();
    app.add_option("--renorm", cfg.renorm, "Noise renormalization: min_max or divide")
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, Renormalization>{{"min_max", Renormalization::min_max}, {"divide", Renormalization::divide}}))
        ->capture_default_str();
    app.add_option("--checkpoint", cfg.checkpoints, "Checkpoint file(s); one, or one per seed for sweeps");
    app.add_option("--images", cfg.images, "Test-set indices for Grad-CAM")->capture_default_str();
    app.add_option("--class", cfg.target_class, "Grad-CAM target class (default: the true label)");

    app.add_subcommand("train", "Train one model per seed and report test error mean ± std");
    app.add_subcommand("eval", "Test error of checkpoint(s)");
    app.add_subcommand("noise-sweep", "Uniform-noise robustness sweep");
    app.add_subcommand("fgsm-sweep", "FGSM robustness sweep");
    app.add_subcommand("gradcam", "Grad-CAM heatmaps over the last body layer");
    app.add_subcommand("inspect", "Per-layer parameter and FLOP table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    cfg.command = app.get_subcommands().front()->get_name();
    const std::string text = config_text(cfg);

    try {
        if (cfg.seeds.empty()) throw UsageError("at least one seed is required");
        if (cfg.command == "train") return cmd_train(cfg, text);
        if (cfg.command == "eval") return cmd_eval(cfg);
        if (cfg.command == "noise-sweep") return cmd_sweep(cfg, text, PerturbationKind::uniform);
        if (cfg.command == "fgsm-sweep") return cmd_sweep(cfg, text, PerturbationKind::fgsm);
        if (cfg.command == "gradcam") return cmd_gradcam(cfg, text);
        if (cfg.command == "inspect") return cmd_inspect(cfg);
    } catch (const UsageError& e) {
        std::cerr << "wmnet " << cfg.command << ": " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "wmnet " << cfg.command << ": error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
