#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "wmnet/data.hpp"
#include "wmnet/models.hpp"

namespace wmnet {

/// Keeps large activation buffers on the heap between batches instead of
/// returning them to the kernel, which otherwise re-faults every page on each
/// allocation. Call once at program start; a no-op off glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
#endif
}

inline constexpr std::size_t kClasses = 10;

template <typename T>
struct LossResult {
    T loss;
    Tensor<T> grad_logits;
};

/// Stable softmax cross-entropy on one logit vector; grad = softmax - onehot.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, int label) {
    if (label < 0 || label >= static_cast<int>(logits.size())) {
        throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(label) + " outside 0.." +
                                    std::to_string(logits.size() - 1));
    }
    T peak = logits[0];
    for (std::size_t i = 1; i < logits.size(); ++i) peak = std::max(peak, logits[i]);
    T denom{0};
    Tensor<T> grad(logits.shape());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        grad[i] = std::exp(logits[i] - peak);
        denom += grad[i];
    }
    for (auto& g : grad.data()) g /= denom;
    const T loss = std::log(denom) - (logits[static_cast<std::size_t>(label)] - peak);
    grad[static_cast<std::size_t>(label)] -= T{1};
    return {loss, std::move(grad)};
}

/// Mean loss over a [N,C] batch; the gradient carries the 1/N factor.
template <typename T>
LossResult<T> batch_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    const std::size_t n = logits.extent(0), c = logits.extent(1);
    if (labels.size() != n) throw std::invalid_argument("batch_cross_entropy: label count mismatch");
    LossResult<T> out{T{0}, Tensor<T>(logits.shape())};
    double total = 0;
    for (std::size_t s = 0; s < n; ++s) {
        Tensor<T> row({c}, std::vector<T>(logits.ptr() + s * c, logits.ptr() + (s + 1) * c));
        auto r = softmax_cross_entropy(row, labels[s]);
        total += r.loss;
        for (std::size_t k = 0; k < c; ++k) out.grad_logits[s * c + k] = r.grad_logits[k] / static_cast<T>(n);
    }
    out.loss = static_cast<T>(total / static_cast<double>(n));
    return out;
}

// ---------------------------------------------------------------------------

struct TrainConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t batch_size = 128;
    std::size_t epochs = 15;
    std::uint64_t seed = 1;
    std::size_t pad = 2;
    std::optional<std::filesystem::path> checkpoint_path;
    /// Called after every epoch with (epoch, mean train loss, validation error %).
    std::function<void(std::size_t, double, double)> on_epoch;

    void validate() const {
        if (!(learning_rate > 0) || !(epsilon > 0) || batch_size == 0 || epochs == 0) {
            throw std::invalid_argument("train config: learning rate, epsilon, batch size and epochs must be positive");
        }
        if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) {
            throw std::invalid_argument("train config: betas must lie in (0,1)");
        }
    }
};

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m, v;
    std::uint64_t t = 0;
};

template <typename T>
struct NamedParam {
    std::string name;
    Param<T>* param;
};

/// One bias-corrected Adam update of every parameter from its accumulated gradient.
template <typename T>
void adam_step(std::span<const NamedParam<T>> params, AdamState<T>& state, const TrainConfig& cfg) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.param->value.shape());
            state.v.emplace_back(p.param->value.shape());
        }
    }
    if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameters");
    for (const auto& p : params) {
        for (T g : p.param->grad.data()) {
            if (!std::isfinite(g)) throw std::domain_error("adam_step: non-finite gradient in " + p.name);
        }
    }
    state.t += 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T step = static_cast<T>(cfg.learning_rate / c1), inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(cfg.epsilon);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& value = params[k].param->value;
        const auto& grad = params[k].param->grad;
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (std::size_t i = 0; i < value.size(); ++i) {
            const T g = grad[i];
            m[i] = b1 * m[i] + (T{1} - b1) * g;
            v[i] = b2 * v[i] + (T{1} - b2) * g * g;
            value[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
        }
    }
}

// ---------------------------------------------------------------------------

struct RunHistory {
    std::vector<double> train_loss;      // per epoch, mean over batches
    std::vector<double> val_error;       // per epoch, %
    std::vector<float> batch_loss;       // every optimizer step, in order
    std::size_t best_epoch = 0;
    double test_error = std::numeric_limits<double>::quiet_NaN();
    double wall_seconds = 0;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ErrorCount {
    std::size_t errors = 0;
    std::size_t total = 0;
    double percent() const { return total ? 100.0 * static_cast<double>(errors) / static_cast<double>(total) : 0.0; }
};

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
    const std::size_t n = logits.extent(0), c = logits.extent(1);
    std::vector<int> out(n);
    for (std::size_t s = 0; s < n; ++s) {
        const T* row = logits.ptr() + s * c;
        out[s] = static_cast<int>(std::max_element(row, row + c) - row);
    }
    return out;
}

/// Contiguous batch [begin, begin+count) of a dataset, cast to T.
template <typename T>
Tensor<T> batch_images(const Dataset& d, std::size_t begin, std::size_t count) {
    const std::size_t plane = d.images.size() / d.images.extent(0);
    std::vector<T> buf(d.images.ptr() + begin * plane, d.images.ptr() + (begin + count) * plane);
    return Tensor<T>({count, d.images.extent(1), d.images.extent(2), d.images.extent(3)}, std::move(buf));
}

/// Misclassification count in eval mode, no augmentation.
template <typename T>
ErrorCount count_errors(Model<T>& model, const Dataset& d, std::size_t batch_size = 500) {
    ErrorCount e{0, d.size()};
    for (std::size_t begin = 0; begin < d.size(); begin += batch_size) {
        const std::size_t count = std::min(batch_size, d.size() - begin);
        const auto pred = argmax_rows(model.forward(batch_images<T>(d, begin, count), Mode::eval));
        for (std::size_t s = 0; s < count; ++s) e.errors += pred[s] != d.labels[begin + s];
    }
    return e;
}

/// Test error in percent: 100 * (1 - accuracy).
template <typename T>
double evaluate(Model<T>& model, const Dataset& d, std::size_t batch_size = 500) {
    return count_errors(model, d, batch_size).percent();
}

template <typename T>
std::vector<NamedParam<T>> named_param_list(Model<T>& model) {
    std::vector<NamedParam<T>> out;
    for (auto& [name, p] : model.named_params()) out.push_back({name, p});
    return out;
}

template <typename T>
std::vector<Tensor<T>> snapshot_state(Model<T>& model) {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : model.named_tensors()) out.push_back(*t);
    return out;
}

template <typename T>
void restore_state(Model<T>& model, const std::vector<Tensor<T>>& snap) {
    auto tensors = model.named_tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) *tensors[i].second = snap[i];
}

template <typename T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path);

/// Mini-batch Adam on shuffled, pad-and-crop augmented batches with batchnorm in
/// train mode. The parameters with the lowest validation error are restored at
/// the end (and written to cfg.checkpoint_path whenever they improve).
/// Single-threaded and deterministic given cfg.seed.
template <typename T>
RunHistory train(Model<T>& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg) {
    cfg.validate();
    const auto started = std::chrono::steady_clock::now();
    RunHistory history;
    std::mt19937_64 rng(cfg.seed);
    AdamState<T> adam;
    auto params = named_param_list(model);
    std::vector<Tensor<T>> best = snapshot_state(model);
    double best_val = std::numeric_limits<double>::infinity();

    const std::size_t n = train_set.size();
    const std::size_t h = train_set.images.extent(2), w = train_set.images.extent(3);
    const std::size_t plane = train_set.images.size() / n;
    std::vector<std::size_t> order(n);
    std::uniform_int_distribution<std::size_t> offset(0, 2 * cfg.pad);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, n - begin);
            if (count < 2 && model.spec().batchnorm) continue;
            Tensor<T> batch({count, train_set.images.extent(1), h, w});
            std::vector<int> labels(count);
            for (std::size_t s = 0; s < count; ++s) {
                const std::size_t src = order[begin + s];
                const std::size_t dy = offset(rng), dx = offset(rng);
                std::vector<T> img(train_set.images.ptr() + src * plane, train_set.images.ptr() + (src + 1) * plane);
                for (std::size_t c = 0; c < train_set.images.extent(1); ++c) {
                    pad_crop<T>(std::span<const T>(img).subspan(c * h * w, h * w), h, w, cfg.pad, dy, dx,
                                batch.data().subspan(s * plane + c * h * w, h * w));
                }
                labels[s] = train_set.labels[src];
            }
            auto loss = batch_cross_entropy(model.forward(batch, Mode::train), labels);
            if (!std::isfinite(loss.loss)) {
                restore_state(model, best);
                throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch + 1) +
                                       "; best checkpoint retained");
            }
            model.zero_grad();
            model.backward(loss.grad_logits);
            adam_step<T>(params, adam, cfg);
            history.batch_loss.push_back(static_cast<float>(loss.loss));
            loss_sum += loss.loss;
            ++batches;
        }
        const double val_error = evaluate(model, val_set);
        history.train_loss.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
        history.val_error.push_back(val_error);
        if (val_error < best_val) {
            best_val = val_error;
            best = snapshot_state(model);
            history.best_epoch = epoch;
            if (cfg.checkpoint_path) save_checkpoint(model, *cfg.checkpoint_path);
        }
        if (cfg.on_epoch) cfg.on_epoch(epoch + 1, history.train_loss.back(), val_error);
    }
    restore_state(model, best);
    history.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return history;
}

// ---------------------------------------------------------------------------
// Checkpoint file:
//   "WMN1"
//   u32 spec length, architecture spec text (key=value lines)
//   u32 entry count; per entry: u32 name length, name, u32 rank, rank x u32 extents
//   float32 payload of every entry in manifest order
// All integers and floats little-endian.

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'W', 'M', 'N', '1'};

namespace detail {
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}
inline void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

struct ByteReader {
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > bytes.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos));
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= std::uint32_t(bytes[pos + b]) << (8 * b);
        pos += 4;
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(bytes.begin() + pos, bytes.begin() + pos + n);
        pos += n;
        return s;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
};

struct ManifestEntry {
    std::string name;
    Shape shape;
};

struct CheckpointContents {
    ArchitectureSpec spec;
    std::vector<ManifestEntry> manifest;
    std::vector<std::vector<float>> values;
};

inline CheckpointContents parse_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw CheckpointError("not a WMN1 checkpoint (bad magic)");
    }
    ByteReader r{bytes, 4};
    CheckpointContents c;
    c.spec = parse_config_string(r.str());
    const std::uint32_t entries = r.u32();
    for (std::uint32_t e = 0; e < entries; ++e) {
        ManifestEntry m;
        m.name = r.str();
        const std::uint32_t rank = r.u32();
        for (std::uint32_t d = 0; d < rank; ++d) m.shape.push_back(r.u32());
        c.manifest.push_back(std::move(m));
    }
    for (const auto& m : c.manifest) {
        std::vector<float> v(shape_numel(m.shape));
        for (auto& x : v) x = r.f32();
        c.values.push_back(std::move(v));
    }
    if (r.pos != bytes.size()) throw CheckpointError("checkpoint has trailing bytes at " + std::to_string(r.pos));
    return c;
}
}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(Model<T>& model) {
    std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
    detail::put_string(out, to_config_string(model.spec()));
    auto tensors = model.named_tensors();
    detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (auto& [name, t] : tensors) {
        detail::put_string(out, name);
        detail::put_u32(out, static_cast<std::uint32_t>(t->rank()));
        for (std::size_t e : t->shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
    }
    for (auto& [name, t] : tensors) {
        for (T v : t->data()) {
            const float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            detail::put_u32(out, bits);
        }
    }
    return out;
}

template <typename T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(model);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw CheckpointError("cannot write " + tmp);
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw CheckpointError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

/// Copies checkpoint values into an existing model; names and shapes must match.
template <typename T>
void load_checkpoint_into(Model<T>& model, std::span<const std::uint8_t> bytes) {
    auto c = detail::parse_checkpoint(bytes);
    auto tensors = model.named_tensors();
    if (tensors.size() != c.manifest.size()) {
        throw CheckpointError("checkpoint has " + std::to_string(c.manifest.size()) + " tensors, model has " +
                              std::to_string(tensors.size()));
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i].first != c.manifest[i].name || tensors[i].second->shape() != c.manifest[i].shape) {
            throw CheckpointError("checkpoint entry " + c.manifest[i].name + " " + shape_string(c.manifest[i].shape) +
                                  " does not match model " + tensors[i].first + " " +
                                  shape_string(tensors[i].second->shape()));
        }
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        auto data = tensors[i].second->data();
        for (std::size_t k = 0; k < data.size(); ++k) data[k] = static_cast<T>(c.values[i][k]);
    }
}

template <typename T = float>
Model<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot read checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const auto spec = detail::parse_checkpoint(bytes).spec;
    Model<T> model = build_model<T>(spec, 0);
    load_checkpoint_into(model, bytes);
    return model;
}

}  // namespace wmnet
