// End-to-end acceptance run: prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. Trains the desk-scale models from scratch on
// MNIST, so a full run takes well over an hour on one core.

#include <chrono>
#include <cstring>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../gradcheck.hpp"
#include "../oracles.hpp"
#include "wmnet/robustness.hpp"
#include "wmnet/training.hpp"

using namespace wmnet;
namespace fs = std::filesystem;

namespace {

// Matched training budget for every model of the robustness comparison.
constexpr std::size_t kEpochs = 4;
constexpr std::uint64_t kSplitSeed = 0;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};
// FGSM needs a backward pass per batch; sweeps use the first images of the test set.
constexpr std::size_t kFgsmSubset = 2000;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 2) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

// Criteria recorded as known failures; the run still prints FAIL for them, but the
// exit status only flags a difference from this list (a new failure, or a fix).
std::set<int> expected_failures;
std::set<int> failed, passed;

void report(int id, const std::string& title, bool pass, const std::string& detail) {
    (pass ? passed : failed).insert(id);
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << title << " -- " << detail
              << (!pass && expected_failures.contains(id) ? " [known failure]" : "") << std::endl;
}

bool have_mnist(const fs::path& dir) {
    for (const char* name : {MnistFiles::kTrainImages, MnistFiles::kTrainLabels, MnistFiles::kTestImages,
                             MnistFiles::kTestLabels}) {
        if (!fs::exists(dir / name) && !fs::exists(dir / (std::string(name) + ".gz"))) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------

void gradient_integrity() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(101);
    double worst = 0;
    std::string worst_case;
    std::size_t checked = 0;
    for (const auto& c : gradcheck::all_layer_cases()) {
        for (int i = 0; i < 10; ++i) {
            auto inst = c.make(rng);
            const double e = gradcheck::check_layer(*inst.layer, inst.input, inst.mode, rng).worst();
            ++checked;
            if (e >= worst) {
                worst = e;
                worst_case = c.name;
            }
        }
    }
    const double t = seconds_since(t0);
    std::ostringstream d;
    d << checked << " instances over " << gradcheck::all_layer_cases().size() << " layer cases, worst relative error "
      << std::scientific << std::setprecision(1) << worst << " (" << worst_case << "), " << fmt(t) << " s";
    report(1, "gradient integrity", worst < 1e-4 && t < 60, d.str());
}

void oracle_equivalence() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(202);
    auto dim = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    constexpr int kCases = 60;
    double worst_conv = 0, worst_smooth = 0, worst_unsharp = 0;
    for (int i = 0; i < kCases; ++i) {
        const std::size_t ci = dim(1, 5), co = dim(1, 5), h = dim(1, 5), w = dim(1, 5);
        const std::size_t kh = dim(1, h), kw = dim(1, w), stride = dim(1, 2), pad = dim(0, std::min(kh, kw) / 2);
        const auto x = oracle::random_tensor({ci, h, w}, rng);
        const auto k = oracle::random_tensor({co, ci, kh, kw}, rng);
        worst_conv = std::max(worst_conv, relative_error(cross_correlate(x, k, stride, pad),
                                                         oracle::cross_correlate(x, k, stride, pad)));
    }
    for (WmVariant variant : {WmVariant::smoothing, WmVariant::unsharp}) {
        for (int i = 0; i < kCases; ++i) {
            const std::size_t ci = dim(1, 5), co = dim(1, 5), d = dim(1, 5);
            const std::size_t kernel = 2 * dim(0, 2) + 1, stride = dim(1, 2);
            auto p = make_weight_map_params<double>(ci, co, d, variant, kernel, stride, rng);
            p.W = oracle::random_tensor(p.W.shape(), rng);
            p.b = oracle::random_tensor(p.b.shape(), rng);
            const auto x = oracle::random_tensor({ci, d, d}, rng);
            const bool unsharp = variant == WmVariant::unsharp;
            const auto got = unsharp ? wm_unsharp_forward(x, p) : wm_smoothing_forward(x, p);
            const double e = relative_error(got, oracle::weight_map(x, p.W, p.b, kernel, stride, unsharp));
            (unsharp ? worst_unsharp : worst_smooth) = std::max(unsharp ? worst_unsharp : worst_smooth, e);
        }
    }
    const double t = seconds_since(t0);
    const double worst = std::max({worst_conv, worst_smooth, worst_unsharp});
    std::ostringstream d;
    d << kCases << " cases each; worst relative error conv " << std::scientific << std::setprecision(1) << worst_conv
      << ", smoothing " << worst_smooth << ", unsharp " << worst_unsharp << std::fixed << ", " << fmt(t) << " s";
    report(2, "oracle equivalence", worst <= 1e-12 && t < 10, d.str());
}

void degeneracy_identity() {
    std::mt19937_64 rng(303);
    auto dim = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    std::size_t compared = 0, mismatched = 0;
    for (int i = 0; i < 100; ++i) {
        const std::size_t ci = dim(1, 6), co = dim(1, 6), d = dim(1, 12), stride = dim(1, 3);
        auto smooth = make_weight_map_params<double>(ci, co, d, WmVariant::smoothing, 1, stride, rng);
        smooth.b = oracle::random_tensor(smooth.b.shape(), rng);
        auto sharp = smooth;
        sharp.variant = WmVariant::unsharp;
        const auto x = oracle::random_tensor({ci, d, d}, rng, -10.0, 10.0);
        const auto a = wm_smoothing_forward(x, smooth), b = wm_unsharp_forward(x, sharp);
        for (std::size_t q = 0; q < a.size(); ++q) mismatched += a[q] != b[q];
        compared += a.size();
    }
    report(3, "degeneracy identity (1x1 reduction)", compared > 0 && mismatched == 0,
           std::to_string(mismatched) + " of " + std::to_string(compared) + " outputs differ over 100 random layers");
}

// ---------------------------------------------------------------------------

struct TrainedModel {
    Model<float> model;
    RunHistory history;
};

TrainedModel train_one(LayerKind kind, std::uint64_t seed, const TrainValSplit& split, const Dataset& test) {
    ArchitectureSpec spec;
    spec.layer_kind = kind;
    TrainedModel t{build_model<float>(spec, seed), {}};
    TrainConfig cfg;
    cfg.epochs = kEpochs;
    cfg.seed = seed;
    t.history = train(t.model, split.train, split.val, cfg);
    t.history.test_error = evaluate(t.model, test);
    std::cout << "  trained " << to_string(kind) << " seed " << seed << ": best epoch " << t.history.best_epoch + 1
              << ", val " << fmt(t.history.val_error[t.history.best_epoch]) << " %, test "
              << fmt(t.history.test_error) << " %, " << fmt(t.history.wall_seconds / 60, 1) << " min" << std::endl;
    return t;
}

struct Sweep {
    RobustnessReport report;
    double seconds = 0;
};

Sweep sweep(std::vector<TrainedModel>& models, PerturbationKind kind, const Dataset& data, std::size_t subset) {
    std::vector<Model<float>*> ptrs;
    for (auto& m : models) ptrs.push_back(&m.model);
    const auto levels = default_levels(kind);
    SweepOptions opt;
    opt.subset = subset;
    const auto t0 = Clock::now();
    Sweep s{robustness_sweep<float>(ptrs, kind, levels, kSeeds, data, opt), 0};
    s.seconds = seconds_since(t0);
    return s;
}

/// test_error of model k (by seed position) at every level, in level order.
std::vector<double> error_curve(const RobustnessReport& r, std::size_t k) {
    std::vector<double> out;
    for (std::size_t i = k; i < r.trials.size(); i += r.seeds.size()) out.push_back(r.trials[i].test_error);
    return out;
}

void print_sweep(const std::string& label, const Sweep& s) {
    std::cout << "  " << label << " (" << fmt(s.seconds / 60, 1) << " min):";
    for (const auto& row : s.report.rows) std::cout << "  " << row.level << ":" << fmt(row.test_error_mean, 1) << "%";
    std::cout << std::endl;
}

void trained_model_criteria(const fs::path& mnist) {
    const auto source = load_mnist(mnist, Split::train);
    const auto test = load_mnist(mnist, Split::test);
    const auto split = split_train_val(source, kSplitSeed);

    std::vector<TrainedModel> wm, vanilla;
    for (std::uint64_t seed : kSeeds) wm.push_back(train_one(LayerKind::wm_smoothing, seed, split, test));
    for (std::uint64_t seed : kSeeds) vanilla.push_back(train_one(LayerKind::conv, seed, split, test));

    // 4: the first smoothing-WM run stands alone as the desk-scale training check
    const auto& h = wm.front().history;
    report(4, "desk-scale training", h.test_error <= 2.5 && kEpochs <= 15 && h.wall_seconds <= 3600,
           "smoothing WM seed 1: test error " + fmt(h.test_error) + " % after " + std::to_string(kEpochs) +
               " epochs in " + fmt(h.wall_seconds / 60, 1) + " min");

    // 5: uniform noise on the full test set, one trained model per trial seed
    const Sweep wm_noise = sweep(wm, PerturbationKind::uniform, test, 0);
    print_sweep("uniform sweep, smoothing WM", wm_noise);
    const Sweep van_noise = sweep(vanilla, PerturbationKind::uniform, test, 0);
    print_sweep("uniform sweep, vanilla", van_noise);
    {
        int wins = 0;
        std::ostringstream d;
        d << "error at u=2 (vanilla vs WM):";
        for (std::size_t k = 0; k < kSeeds.size(); ++k) {
            const double v = error_curve(van_noise.report, k).back(), w = error_curve(wm_noise.report, k).back();
            wins += v > w;
            d << " seed " << kSeeds[k] << " " << fmt(v) << " vs " << fmt(w) << ";";
        }
        const double vanilla_high = van_noise.report.rows.back().test_error_mean;
        const double longest = std::max(wm_noise.seconds, van_noise.seconds);
        d << " vanilla mean " << fmt(vanilla_high) << " % (random limit 90 %); slowest sweep " << fmt(longest / 60, 1)
          << " min";
        report(5, "robustness ordering under uniform noise",
               wins >= 2 && std::abs(vanilla_high - 90.0) <= 10.0 && longest <= 1800, d.str());
    }

    // 6: FGSM on a fixed test subset
    const Dataset fgsm_set = test.head(kFgsmSubset);
    const Sweep wm_fgsm = sweep(wm, PerturbationKind::fgsm, fgsm_set, 0);
    print_sweep("FGSM sweep, smoothing WM", wm_fgsm);
    const Sweep van_fgsm = sweep(vanilla, PerturbationKind::fgsm, fgsm_set, 0);
    print_sweep("FGSM sweep, vanilla", van_fgsm);
    {
        bool zero_exact = true, monotone = true, strong = true;
        double worst_drop = 0, weakest_gain = 1e9;
        SweepOptions opt;
        for (auto* group : {&wm, &vanilla}) {
            const Sweep& s = group == &wm ? wm_fgsm : van_fgsm;
            for (std::size_t k = 0; k < group->size(); ++k) {
                const auto count = count_errors((*group)[k].model, fgsm_set, opt.batch_size);
                const double clean = 100.0 * static_cast<double>(count.errors) / static_cast<double>(fgsm_set.size());
                const auto curve = error_curve(s.report, k);
                zero_exact = zero_exact && curve.front() == clean;
                for (std::size_t i = 1; i < curve.size(); ++i) worst_drop = std::max(worst_drop, curve[i - 1] - curve[i]);
                weakest_gain = std::min(weakest_gain, curve.back() - clean);
            }
        }
        monotone = worst_drop <= 1.0;
        strong = weakest_gain >= 20.0;
        report(6, "FGSM sanity", zero_exact && monotone && strong,
               std::string("eps=0 equals clean error: ") + (zero_exact ? "yes" : "no") + "; largest drop between steps " +
                   fmt(worst_drop) + " pp; smallest rise at eps=0.5 " + fmt(weakest_gain) + " pp over " +
                   std::to_string(wm.size() + vanilla.size()) + " models, " + std::to_string(kFgsmSubset) +
                   " test images");
    }

    // 7: feature-map MSE of the WM models grows with the perturbation level
    {
        auto rho = [](const RobustnessReport& r) {
            std::vector<double> levels, mse;
            for (const auto& row : r.rows) {
                levels.push_back(row.level);
                mse.push_back(row.feature_mse_mean);
            }
            return spearman(levels, mse);
        };
        const double noise_rho = rho(wm_noise.report), fgsm_rho = rho(wm_fgsm.report);
        report(7, "feature-map MSE trend", noise_rho > 0.9 && fgsm_rho > 0.9,
               "Spearman rho, smoothing WM: uniform " + fmt(noise_rho, 3) + ", FGSM " + fmt(fgsm_rho, 3));
    }
}

// ---------------------------------------------------------------------------

void accounting() {
    std::size_t layers_checked = 0, mismatches = 0;
    std::string first_mismatch;
    const std::set<std::string> parameter_free{"relu", "maxpool", "global_avg_pool", "flatten", "add", "concat"};
    // every family with every body layer kind, alternating replacement on the deep skeletons, and the
    // small plan's optional batch-norm and input-scale layers (the wide plan with weight maps needs
    // several hundred MB, so only its conv form is built)
    std::vector<ArchitectureSpec> specs;
    for (Family family : {Family::small_cnn, Family::small_cnn_wide, Family::resnet, Family::densenet}) {
        for (LayerKind kind : {LayerKind::conv, LayerKind::wm_smoothing, LayerKind::wm_unsharp}) {
            if (family == Family::small_cnn_wide && kind != LayerKind::conv) continue;
            ArchitectureSpec spec;
            spec.family = family;
            spec.layer_kind = kind;
            const bool conv = kind == LayerKind::conv;
            specs.push_back(apply_replacement(spec, conv ? Replacement::none : Replacement::all));
            if (!conv && (family == Family::resnet || family == Family::densenet)) {
                specs.push_back(apply_replacement(spec, Replacement::alternating));
            }
            if (family == Family::small_cnn) {
                spec.batchnorm = spec.input_scale = true;
                specs.push_back(apply_replacement(spec, conv ? Replacement::none : Replacement::all));
            }
        }
    }
    for (const auto& spec : specs) {
        auto model = build_model<float>(spec, 1);
        const auto acc = count_params_flops(model);
        std::uint64_t summed = 0;
        for (std::size_t i = 0; i < acc.layers.size(); ++i) {
            const auto& row = acc.layers[i];
            summed += row.params;
            std::uint64_t expected = 0;
            bool known = true;
            if (row.kind.starts_with("wm_")) {
                expected = wm_param_formula(row.input[0], row.output[0], row.input[1], row.output[1]);
            } else if (row.kind == "conv") {
                const Shape k = model.nodes()[i].layer->params()[0]->value.shape();
                expected = row.output[0] * row.input[0] * k[2] * k[3] + row.output[0];
            } else if (row.kind == "fully_connected") {
                expected = row.output[0] * shape_numel(row.input) + row.output[0];
            } else if (row.kind == "batchnorm") {
                expected = 2 * row.output[0];
            } else if (row.kind == "input_scale") {
                expected = shape_numel(row.input);
            } else {
                known = parameter_free.contains(row.kind);
            }
            ++layers_checked;
            if (!known || expected != row.params) {
                if (!mismatches++) first_mismatch = row.name;
            }
        }
        mismatches += summed != acc.total_params || summed != model.param_count();
    }

    ArchitectureSpec wm_spec, conv_spec;
    wm_spec.layer_kind = LayerKind::wm_smoothing;
    conv_spec.layer_kind = LayerKind::conv;
    auto wm = build_model<float>(wm_spec, 1);
    auto conv = build_model<float>(conv_spec, 1);
    const auto a_wm = count_params_flops(wm), a_conv = count_params_flops(conv);
    const double flop_gap = std::abs(static_cast<double>(a_wm.total_flops) - static_cast<double>(a_conv.total_flops)) /
                            static_cast<double>(a_conv.total_flops);
    std::ostringstream d;
    d << layers_checked << " layers checked, " << mismatches << " mismatches"
      << (mismatches ? " (first: " + first_mismatch + ")" : std::string()) << "; FLOPs WM-32 " << a_wm.total_flops
      << " vs conv-33 " << a_conv.total_flops << " (" << fmt(100 * flop_gap) << " % apart)";
    report(8, "parameter and FLOP accounting", mismatches == 0 && flop_gap <= 0.15, d.str());
    std::cout << "  note: WM-32 has " << a_wm.total_params << " parameters against 1.16M published ("
              << fmt(100.0 * (static_cast<double>(a_wm.total_params) / 1.16e6 - 1.0), 1) << " %); conv-33 has "
              << a_conv.total_params << " against 261K published ("
              << fmt(100.0 * (static_cast<double>(a_conv.total_params) / 2.61e5 - 1.0), 1) << " %); WM-32 FLOPs "
              << fmt(static_cast<double>(a_wm.total_flops) / 1e9, 4) << " G against 0.013 G published" << std::endl;
}

void data_integrity(const fs::path& mnist) {
    bool identical = true;
    std::size_t bytes = 0;
    for (const char* name : {MnistFiles::kTrainImages, MnistFiles::kTrainLabels, MnistFiles::kTestImages,
                             MnistFiles::kTestLabels}) {
        const auto raw = read_file_bytes(locate_idx(mnist, name));
        identical = identical && serialize_idx(parse_idx(raw)) == raw;
        bytes += raw.size();
    }
    const auto split = split_train_val(load_mnist(mnist, Split::train), kSplitSeed);
    std::vector<bool> seen(kMnistTrainSize, false);
    bool partition = true;
    for (const auto* part : {&split.train_indices, &split.val_indices}) {
        for (std::size_t i : *part) {
            partition = partition && i < seen.size() && !seen[i];
            if (i < seen.size()) seen[i] = true;
        }
    }
    const bool sizes = split.train.size() == 54000 && split.val.size() == 6000;
    report(9, "data integrity", identical && sizes && partition,
           std::string("IDX round trip over ") + std::to_string(bytes) + " bytes " +
               (identical ? "byte-identical" : "differs") + "; split " + std::to_string(split.train.size()) + "/" +
               std::to_string(split.val.size()) + (partition ? ", disjoint" : ", overlapping"));
}

void determinism(const fs::path& mnist) {
    const auto split = split_train_val(load_mnist(mnist, Split::train), kSplitSeed);
    const Dataset train_set = split.train.head(3000), val_set = split.val.head(1000);
    bool identical = true;
    std::size_t steps = 0;
    for (LayerKind kind : {LayerKind::wm_smoothing, LayerKind::conv}) {
        std::vector<RunHistory> runs;
        std::vector<std::vector<std::uint8_t>> weights;
        for (int repeat = 0; repeat < 2; ++repeat) {
            ArchitectureSpec spec;
            spec.layer_kind = kind;
            auto model = build_model<float>(spec, 7);
            TrainConfig cfg;
            cfg.epochs = 2;
            cfg.seed = 7;
            runs.push_back(train(model, train_set, val_set, cfg));
            weights.push_back(serialize_checkpoint(model));
        }
        const auto& a = runs[0].batch_loss;
        const auto& b = runs[1].batch_loss;
        identical = identical && !a.empty() && a.size() == b.size() &&
                    std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0 && weights[0] == weights[1];
        steps += a.size();
    }
    report(10, "determinism", identical,
           std::to_string(steps) + " optimizer steps over two architectures, loss traces and weights " +
               (identical ? "bitwise identical" : "differ") + " across repeated runs");
}

// Runs one block of criteria; an exception fails the listed criteria instead of aborting the run.
template <typename F>
void guarded(std::initializer_list<int> ids, const std::string& what, F&& body) {
    try {
        body();
    } catch (const std::exception& e) {
        for (int id : ids) report(id, what, false, std::string("aborted: ") + e.what());
    }
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    // usage: acceptance [mnist-dir] [--only 1,2,...] [--expect-fail 5,...]
    fs::path mnist = WMNET_MNIST_DIR;
    std::set<int> only;
    auto id_list = [](const char* text) {
        std::set<int> ids;
        std::stringstream list(text);
        for (std::string id; std::getline(list, id, ',');) ids.insert(std::stoi(id));
        return ids;
    };
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--only" && i + 1 < argc) {
            only = id_list(argv[++i]);
        } else if (arg == "--expect-fail" && i + 1 < argc) {
            expected_failures = id_list(argv[++i]);
        } else {
            mnist = arg;
        }
    }
    auto wanted = [&](std::initializer_list<int> ids) {
        if (only.empty()) return true;
        for (int id : ids) {
            if (only.contains(id)) return true;
        }
        return false;
    };
    const bool data = have_mnist(mnist);
    auto needs_data = [&](std::initializer_list<int> ids) {
        for (int id : ids) report(id, "requires MNIST", false, "no MNIST files in " + mnist.string());
    };
    const auto t0 = Clock::now();
    if (wanted({1})) guarded({1}, "gradient integrity", gradient_integrity);
    if (wanted({2})) guarded({2}, "oracle equivalence", oracle_equivalence);
    if (wanted({3})) guarded({3}, "degeneracy identity", degeneracy_identity);
    if (wanted({4, 5, 6, 7})) {
        if (data) {
            guarded({4, 5, 6, 7}, "trained-model criteria", [&] { trained_model_criteria(mnist); });
        } else {
            needs_data({4, 5, 6, 7});
        }
    }
    if (wanted({8})) guarded({8}, "parameter and FLOP accounting", accounting);
    if (wanted({9})) data ? guarded({9}, "data integrity", [&] { data_integrity(mnist); }) : needs_data({9});
    if (wanted({10})) data ? guarded({10}, "determinism", [&] { determinism(mnist); }) : needs_data({10});
    std::set<int> unexpected_failures, unexpected_passes;
    for (int id : failed) {
        if (!expected_failures.contains(id)) unexpected_failures.insert(id);
    }
    for (int id : passed) {
        if (expected_failures.contains(id) && !failed.contains(id)) unexpected_passes.insert(id);
    }
    auto ids = [](const std::set<int>& set) {
        std::string out;
        for (int id : set) out += (out.empty() ? "" : ",") + std::to_string(id);
        return out.empty() ? std::string("none") : out;
    };
    // a criterion that passed before its block aborted counts as failed
    std::size_t pass_count = 0;
    for (int id : passed) pass_count += !failed.contains(id);
    std::cout << pass_count << " passed, " << failed.size() << " failed (" << ids(failed) << "); known failures " << ids(expected_failures)
              << "; unexpected failures " << ids(unexpected_failures) << "; unexpected passes " << ids(unexpected_passes)
              << "; " << fmt(seconds_since(t0) / 60, 1) << " min" << std::endl;
    return unexpected_failures.empty() && unexpected_passes.empty() ? 0 : 1;
}
