#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "wmnet/training.hpp"

namespace wmnet {

enum class PerturbationKind { uniform, fgsm };

inline const char* to_string(PerturbationKind k) { return k == PerturbationKind::uniform ? "uniform" : "fgsm"; }

/// How a noisy image is brought back into [0,1].
enum class Renormalization {
    min_max,  // (x - min) / (max - min) per image, zeros when flat
    divide,   // x / (1 + u)
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Adds i.i.d. Uniform(0, u) noise and renormalizes into [0,1]. u = 0 leaves the
/// image untouched.
template <typename T>
Tensor<T> perturb_uniform(const Tensor<T>& image, double u, std::uint64_t seed,
                          Renormalization renorm = Renormalization::min_max) {
    if (!(u >= 0)) throw std::invalid_argument("perturb_uniform: noise bound must be non-negative");
    if (u == 0) return image;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> noise(0.0, u);
    std::vector<double> noisy(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) noisy[i] = static_cast<double>(image[i]) + noise(rng);
    Tensor<T> out(image.shape());
    if (renorm == Renormalization::divide) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(std::clamp(noisy[i] / (1.0 + u), 0.0, 1.0));
        return out;
    }
    const auto [lo, hi] = std::minmax_element(noisy.begin(), noisy.end());
    const double low = *lo, span = *hi - *lo;
    if (span > 0) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(std::clamp((noisy[i] - low) / span, 0.0, 1.0));
    }
    return out;
}

namespace detail {
/// d(loss)/d(logits) per sample without the 1/N batch factor.
template <typename T>
Tensor<T> per_sample_loss_grad(const Tensor<T>& logits, std::span<const int> labels) {
    const std::size_t n = logits.extent(0), c = logits.extent(1);
    Tensor<T> grad(logits.shape());
    for (std::size_t s = 0; s < n; ++s) {
        Tensor<T> row({c}, std::vector<T>(logits.ptr() + s * c, logits.ptr() + (s + 1) * c));
        auto r = softmax_cross_entropy(row, labels[s]);
        std::copy(r.grad_logits.data().begin(), r.grad_logits.data().end(), grad.ptr() + s * c);
    }
    return grad;
}
}  // namespace detail

/// x_adv = clip_[0,1](x + eps * sign(grad_x loss)) for a batch [N,C,H,W], model in eval mode.
template <typename T>
Tensor<T> fgsm_batch(Model<T>& model, const Tensor<T>& images, std::span<const int> labels, double eps) {
    if (!(eps >= 0)) throw std::invalid_argument("fgsm: epsilon must be non-negative");
    if (eps == 0) return images;
    const Tensor<T> logits = model.forward(images, Mode::eval);
    const Tensor<T> grad_x = model.backward(detail::per_sample_loss_grad(logits, labels));
    Tensor<T> adv(images.shape());
    const T e = static_cast<T>(eps);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const T g = grad_x[i];
        const T sign = g > T{0} ? T{1} : (g < T{0} ? T{-1} : T{0});
        adv[i] = std::clamp(images[i] + e * sign, T{0}, T{1});
    }
    return adv;
}

template <typename T>
Tensor<T> fgsm_attack(Model<T>& model, const Tensor<T>& image, int label, double eps) {
    Shape batched{1};
    batched.insert(batched.end(), image.shape().begin(), image.shape().end());
    const int labels[1] = {label};
    return fgsm_batch(model, image.reshaped(batched), labels, eps).reshaped(image.shape());
}

template <typename T>
double mse(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw std::invalid_argument("mse: length mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return a.empty() ? 0.0 : acc / static_cast<double>(a.size());
}

/// Per-image MSE between the model's feature-layer activations for clean and
/// perturbed batches.
template <typename T>
std::vector<double> feature_mse_batch(Model<T>& model, const Tensor<T>& clean, const Tensor<T>& perturbed) {
    require_same_shape(clean, perturbed, "feature_map_mse");
    model.forward(clean, Mode::eval);
    const Tensor<T> a = model.node_output(model.feature_node());
    model.forward(perturbed, Mode::eval);
    const Tensor<T>& b = model.node_output(model.feature_node());
    const std::size_t n = clean.extent(0), per = a.size() / n;
    std::vector<double> out(n);
    for (std::size_t s = 0; s < n; ++s) out[s] = mse<T>(a.data().subspan(s * per, per), b.data().subspan(s * per, per));
    return out;
}

template <typename T>
double feature_map_mse(Model<T>& model, const Tensor<T>& clean, const Tensor<T>& perturbed) {
    Shape batched{1};
    batched.insert(batched.end(), clean.shape().begin(), clean.shape().end());
    return feature_mse_batch(model, clean.reshaped(batched), perturbed.reshaped(batched)).front();
}

// ---------------------------------------------------------------------------

struct TrialRow {
    PerturbationKind kind;
    double level;
    std::uint64_t seed;
    double test_error;   // %
    double feature_mse;  // mean over images
};

struct AggregateRow {
    PerturbationKind kind;
    double level;
    double test_error_mean;
    double test_error_std;
    double feature_mse_mean;
};

struct RobustnessReport {
    std::vector<TrialRow> trials;
    std::vector<AggregateRow> rows;
    std::vector<std::uint64_t> seeds;
};

struct SweepOptions {
    std::size_t subset = 0;  // 0 = full set
    std::size_t batch_size = 250;
    Renormalization renorm = Renormalization::min_max;
};

template <typename T>
TrialRow run_trial(Model<T>& model, PerturbationKind kind, double level, std::uint64_t seed, const Dataset& data,
                   const SweepOptions& opt) {
    const std::size_t n = opt.subset ? std::min(opt.subset, data.size()) : data.size();
    std::size_t errors = 0;
    double mse_sum = 0;
    for (std::size_t begin = 0; begin < n; begin += opt.batch_size) {
        const std::size_t count = std::min(opt.batch_size, n - begin);
        const Tensor<T> clean = batch_images<T>(data, begin, count);
        const std::span<const int> labels(data.labels.data() + begin, count);
        Tensor<T> perturbed;
        if (kind == PerturbationKind::fgsm) {
            perturbed = fgsm_batch(model, clean, labels, level);
        } else {
            perturbed = Tensor<T>(clean.shape());
            const std::size_t per = clean.size() / count;
            for (std::size_t s = 0; s < count; ++s) {
                const Tensor<T> noisy = perturb_uniform(clean.sample(s), level, mix_seed(seed, begin + s), opt.renorm);
                std::copy(noisy.data().begin(), noisy.data().end(), perturbed.ptr() + s * per);
            }
        }
        for (double m : feature_mse_batch(model, clean, perturbed)) mse_sum += m;
        // the last forward in feature_mse_batch was on the perturbed batch
        const auto pred = argmax_rows(model.node_output(static_cast<int>(model.nodes().size()) - 1));
        for (std::size_t s = 0; s < count; ++s) errors += pred[s] != labels[s];
    }
    return {kind, level, seed, 100.0 * static_cast<double>(errors) / static_cast<double>(n),
            mse_sum / static_cast<double>(n)};
}

/// Corrupts the test set at every level for every trial seed and records error
/// and feature-map MSE. `models` holds either one model (reused for every
/// seed) or one model per seed.
template <typename T>
RobustnessReport robustness_sweep(std::span<Model<T>* const> models, PerturbationKind kind,
                                  std::span<const double> levels, std::span<const std::uint64_t> seeds,
                                  const Dataset& data, const SweepOptions& opt = {}) {
    if (levels.empty()) throw std::invalid_argument("robustness_sweep: empty level list");
    if (seeds.empty()) throw std::invalid_argument("robustness_sweep: empty seed list");
    for (std::size_t i = 0; i < levels.size(); ++i) {
        if (!(levels[i] >= 0)) throw std::invalid_argument("robustness_sweep: levels must be non-negative");
        if (i && !(levels[i] > levels[i - 1])) throw std::invalid_argument("robustness_sweep: levels must be strictly increasing");
    }
    if (models.size() != 1 && models.size() != seeds.size()) {
        throw std::invalid_argument("robustness_sweep: need one model or one model per seed");
    }
    RobustnessReport report;
    report.seeds.assign(seeds.begin(), seeds.end());
    for (double level : levels) {
        std::vector<double> errs, mses;
        for (std::size_t k = 0; k < seeds.size(); ++k) {
            Model<T>& model = *models[models.size() == 1 ? 0 : k];
            report.trials.push_back(run_trial(model, kind, level, seeds[k], data, opt));
            errs.push_back(report.trials.back().test_error);
            mses.push_back(report.trials.back().feature_mse);
        }
        const double n = static_cast<double>(errs.size());
        const double mean = std::accumulate(errs.begin(), errs.end(), 0.0) / n;
        double var = 0;
        for (double e : errs) var += (e - mean) * (e - mean);
        const double stddev = errs.size() > 1 ? std::sqrt(var / (n - 1)) : 0.0;
        report.rows.push_back({kind, level, mean, stddev, std::accumulate(mses.begin(), mses.end(), 0.0) / n});
    }
    return report;
}

/// kind,level,seed,test_error,feature_mse
inline void write_trials_csv(const RobustnessReport& r, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "kind,level,seed,test_error,feature_mse\n" << std::setprecision(10);
    for (const auto& t : r.trials) {
        f << to_string(t.kind) << ',' << t.level << ',' << t.seed << ',' << t.test_error << ',' << t.feature_mse << '\n';
    }
    if (!f) throw std::runtime_error("write failed for " + path.string());
}

/// kind,level,test_error_mean,test_error_std,feature_mse_mean
inline void write_aggregate_csv(const RobustnessReport& r, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "kind,level,test_error_mean,test_error_std,feature_mse_mean\n" << std::setprecision(10);
    for (const auto& a : r.rows) {
        f << to_string(a.kind) << ',' << a.level << ',' << a.test_error_mean << ',' << a.test_error_std << ','
          << a.feature_mse_mean << '\n';
    }
    if (!f) throw std::runtime_error("write failed for " + path.string());
}

/// Default grids: u in {0, 0.25, ..., 2.0}, eps in {0, 0.05, ..., 0.5}.
inline std::vector<double> default_levels(PerturbationKind kind) {
    std::vector<double> out;
    if (kind == PerturbationKind::uniform) {
        for (int i = 0; i <= 8; ++i) out.push_back(0.25 * i);
    } else {
        for (int i = 0; i <= 10; ++i) out.push_back(0.05 * i);
    }
    return out;
}

/// Spearman rank correlation (average ranks for ties).
inline double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length series");
    auto ranks = [](std::span<const double> v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    return (va == 0 || vb == 0) ? 0.0 : cov / std::sqrt(va * vb);
}

}  // namespace wmnet
