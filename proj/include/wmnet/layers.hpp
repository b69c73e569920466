#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "wmnet/tensor.hpp"

namespace wmnet {

enum class Mode { train, eval };

enum class WmVariant { smoothing, unsharp };

inline const char* to_string(WmVariant v) { return v == WmVariant::smoothing ? "smoothing" : "unsharp"; }

/// A learnable tensor with its accumulated gradient.
template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
};

template <typename T>
Tensor<T> gaussian_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
}

// ---------------------------------------------------------------------------
// Weight map
// ---------------------------------------------------------------------------

/// Maps W [C_i,C_o,D_i,D_i] and spatial bias b [C_o,D_o,D_o]. The all-ones
/// reduction kernel is implied by `kernel` and is not a parameter.
template <typename T>
struct WeightMapParams {
    Tensor<T> W;
    Tensor<T> b;
    WmVariant variant = WmVariant::smoothing;
    std::size_t kernel = 3;
    std::size_t stride = 1;

    std::size_t in_channels() const { return W.extent(0); }
    std::size_t out_channels() const { return W.extent(1); }
    std::size_t in_extent() const { return W.extent(2); }
    std::size_t out_extent() const { return b.extent(1); }

    static std::size_t out_extent_for(std::size_t in_extent, std::size_t stride) {
        return (in_extent + stride - 1) / stride;
    }

    void validate() const {
        if (W.rank() != 4 || b.rank() != 3) throw std::invalid_argument("weight map: W must be rank 4 and b rank 3");
        if (W.extent(2) != W.extent(3)) throw std::invalid_argument("weight map: maps must be square");
        if (kernel % 2 == 0) throw std::invalid_argument("weight map: reduction kernel size must be odd");
        if (stride == 0) throw std::invalid_argument("weight map: stride must be positive");
        const std::size_t d_o = out_extent_for(in_extent(), stride);
        if (b.extent(0) != out_channels() || b.extent(1) != d_o || b.extent(2) != d_o) {
            throw std::invalid_argument("weight map: bias " + shape_string(b.shape()) + " does not match output [" +
                                        std::to_string(out_channels()) + "x" + std::to_string(d_o) + "x" +
                                        std::to_string(d_o) + "]");
        }
    }
};

template <typename T>
WeightMapParams<T> make_weight_map_params(std::size_t in_channels, std::size_t out_channels, std::size_t in_extent,
                                          WmVariant variant, std::size_t kernel, std::size_t stride,
                                          std::mt19937_64& rng) {
    WeightMapParams<T> p;
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_channels * kernel * kernel));
    p.W = gaussian_tensor<T>({in_channels, out_channels, in_extent, in_extent}, stddev, rng);
    const std::size_t d_o = WeightMapParams<T>::out_extent_for(in_extent, stride);
    p.b = Tensor<T>({out_channels, d_o, d_o});
    p.variant = variant;
    p.kernel = kernel;
    p.stride = stride;
    p.validate();
    return p;
}

namespace detail {

template <typename T>
struct WmScratch {
    std::vector<T> map, filtered, tmp;  // map holds one plane per sample of a block
    explicit WmScratch(std::size_t plane) : map(plane), filtered(plane), tmp(plane) {}
    void reserve(std::size_t plane, std::size_t count) {
        if (map.size() < plane * count) map.resize(plane * count);
        if (filtered.size() < plane) filtered.resize(plane);
        if (tmp.size() < plane) tmp.resize(plane);
    }
};

// The reduction is linear and identical for every input channel, so the maps
// m^(ci,co) are summed over ci first and the reduction runs once per co.
// `count` samples (x and out strided by whole samples) are processed together
// so each weight map is read once per block rather than once per sample.
template <typename T>
void wm_forward_sample(const WeightMapParams<T>& p, const T* x, T* out, WmScratch<T>& s, std::size_t count = 1) {
    const std::size_t ci_n = p.in_channels(), co_n = p.out_channels();
    const std::size_t d_i = p.in_extent(), d_o = p.out_extent(), plane = d_i * d_i, stride = p.stride;
    const std::size_t in_sz = ci_n * plane, out_sz = co_n * d_o * d_o;
    s.reserve(plane, count);
    const T* W = p.W.ptr();
    for (std::size_t co = 0; co < co_n; ++co) {
        std::fill(s.map.begin(), s.map.begin() + count * plane, T{0});
        for (std::size_t ci = 0; ci < ci_n; ++ci) {
            const T* w = W + (ci * co_n + co) * plane;
            for (std::size_t k = 0; k < count; ++k) {
                T* m = s.map.data() + k * plane;
                const T* xc = x + k * in_sz + ci * plane;
                for (std::size_t q = 0; q < plane; ++q) m[q] += w[q] * xc[q];
            }
        }
        for (std::size_t k = 0; k < count; ++k) {
            const T* m = s.map.data() + k * plane;
            box_filter_same(m, d_i, d_i, p.kernel, s.filtered.data(), s.tmp.data());
            const T* f = s.filtered.data();
            const T* bias = p.b.ptr() + co * d_o * d_o;
            T* o = out + k * out_sz + co * d_o * d_o;
            for (std::size_t i = 0; i < d_o; ++i) {
                for (std::size_t j = 0; j < d_o; ++j) {
                    const std::size_t src = (i * stride) * d_i + j * stride;
                    const T reduced = p.variant == WmVariant::smoothing ? f[src] : T{2} * m[src] - f[src];
                    o[i * d_o + j] = reduced + bias[i * d_o + j];
                }
            }
        }
    }
}

// Accumulates into grad_x (may be null), grad_W and grad_b, `count` samples at a time.
template <typename T>
void wm_backward_sample(const WeightMapParams<T>& p, const T* x, const T* upstream, T* grad_x, T* grad_W, T* grad_b,
                        WmScratch<T>& s, std::size_t count = 1) {
    const std::size_t ci_n = p.in_channels(), co_n = p.out_channels();
    const std::size_t d_i = p.in_extent(), d_o = p.out_extent(), plane = d_i * d_i, stride = p.stride;
    const std::size_t in_sz = ci_n * plane, out_sz = co_n * d_o * d_o;
    s.reserve(plane, count);
    const T* W = p.W.ptr();
    for (std::size_t co = 0; co < co_n; ++co) {
        T* gb = grad_b + co * d_o * d_o;
        for (std::size_t k = 0; k < count; ++k) {
            const T* g = upstream + k * out_sz + co * d_o * d_o;
            T* up = s.tmp.data();
            std::fill(up, up + plane, T{0});
            for (std::size_t i = 0; i < d_o; ++i) {
                for (std::size_t j = 0; j < d_o; ++j) up[(i * stride) * d_i + j * stride] = g[i * d_o + j];
            }
            T* adj = s.map.data() + k * plane;
            box_filter_same(up, d_i, d_i, p.kernel, adj, s.filtered.data());
            if (p.variant == WmVariant::unsharp) {
                for (std::size_t q = 0; q < plane; ++q) adj[q] = T{2} * up[q] - adj[q];
            }
            for (std::size_t q = 0; q < d_o * d_o; ++q) gb[q] += g[q];
        }
        for (std::size_t ci = 0; ci < ci_n; ++ci) {
            const std::size_t off = (ci * co_n + co) * plane;
            const T* w = W + off;
            T* gw = grad_W + off;
            for (std::size_t k = 0; k < count; ++k) {
                const T* adj = s.map.data() + k * plane;
                const T* xc = x + k * in_sz + ci * plane;
                for (std::size_t q = 0; q < plane; ++q) gw[q] += xc[q] * adj[q];
                if (grad_x) {
                    T* gx = grad_x + k * in_sz + ci * plane;
                    for (std::size_t q = 0; q < plane; ++q) gx[q] += w[q] * adj[q];
                }
            }
        }
    }
}

template <typename T>
void check_wm_input(const Tensor<T>& x, const WeightMapParams<T>& p) {
    if (x.rank() != 3 || x.extent(0) != p.in_channels() || x.extent(1) != p.in_extent() ||
        x.extent(2) != p.in_extent()) {
        throw std::invalid_argument("weight map: input " + shape_string(x.shape()) + " does not match maps " +
                                    shape_string(p.W.shape()));
    }
}

}  // namespace detail

/// Weight-map forward for either variant on one [C_i,D_i,D_i] input.
template <typename T>
Tensor<T> wm_forward(const Tensor<T>& x, const WeightMapParams<T>& p) {
    p.validate();
    detail::check_wm_input(x, p);
    Tensor<T> out({p.out_channels(), p.out_extent(), p.out_extent()});
    detail::WmScratch<T> scratch(p.in_extent() * p.in_extent());
    detail::wm_forward_sample(p, x.ptr(), out.ptr(), scratch);
    return out;
}

/// o^(co) = boxfilter(sum_ci W^(ci,co) . x^(ci)) + b^(co), same padding, strided.
template <typename T>
Tensor<T> wm_smoothing_forward(const Tensor<T>& x, const WeightMapParams<T>& p) {
    if (p.variant != WmVariant::smoothing) throw std::invalid_argument("wm_smoothing_forward: params are unsharp");
    return wm_forward(x, p);
}

/// o^(co) = sum_ci (2 m^(ci,co) - boxfilter(m^(ci,co))) + b^(co), subsampled on the stride grid.
template <typename T>
Tensor<T> wm_unsharp_forward(const Tensor<T>& x, const WeightMapParams<T>& p) {
    if (p.variant != WmVariant::unsharp) throw std::invalid_argument("wm_unsharp_forward: params are smoothing");
    return wm_forward(x, p);
}

template <typename T>
struct WmGradients {
    Tensor<T> grad_x, grad_W, grad_b;
};

template <typename T>
WmGradients<T> wm_backward(const Tensor<T>& x, const WeightMapParams<T>& p, const Tensor<T>& upstream) {
    p.validate();
    detail::check_wm_input(x, p);
    const Shape expected{p.out_channels(), p.out_extent(), p.out_extent()};
    if (upstream.shape() != expected) {
        throw std::invalid_argument("wm_backward: upstream gradient " + shape_string(upstream.shape()) +
                                    " expected " + shape_string(expected));
    }
    WmGradients<T> g{Tensor<T>(x.shape()), Tensor<T>(p.W.shape()), Tensor<T>(p.b.shape())};
    detail::WmScratch<T> scratch(p.in_extent() * p.in_extent());
    detail::wm_backward_sample(p, x.ptr(), upstream.ptr(), g.grad_x.ptr(), g.grad_W.ptr(), g.grad_b.ptr(), scratch);
    return g;
}

// ---------------------------------------------------------------------------
// Layer interface
// ---------------------------------------------------------------------------

/// A node of the network operating on batched tensors (leading axis N).
///
/// forward caches what backward needs; backward accumulates parameter
/// gradients into Param::grad and returns the gradient w.r.t. the input.
/// Shapes passed to output_shape/flops are per-sample (no batch axis).
template <typename T>
class Layer {
public:
    virtual ~Layer() = default;

    virtual std::string kind() const = 0;
    virtual Shape output_shape(const Shape& input) const = 0;
    virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
    virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
    virtual std::unique_ptr<Layer> clone() const = 0;

    virtual std::vector<Param<T>*> params() { return {}; }
    /// Non-learnable state that must persist with the parameters.
    virtual std::vector<std::pair<std::string, Tensor<T>*>> buffers() { return {}; }
    virtual std::uint64_t flops(const Shape& input) const = 0;

    std::uint64_t param_count() {
        std::uint64_t n = 0;
        for (auto* p : params()) n += p->value.size();
        return n;
    }

    void zero_grad() {
        for (auto* p : params()) p->grad.fill(T{0});
    }

protected:
    void remember_input(const Tensor<T>& x) {
        input_ = x;
        has_input_ = true;
    }
    const Tensor<T>& cached_input() const {
        if (!has_input_) throw std::logic_error(kind() + ": backward called before forward");
        return input_;
    }
    void check_grad_shape(const Tensor<T>& grad_out, const Shape& expected) const {
        if (grad_out.shape() != expected) {
            throw std::invalid_argument(kind() + ": upstream gradient " + shape_string(grad_out.shape()) +
                                        " expected " + shape_string(expected));
        }
    }
    static Shape batched(std::size_t n, const Shape& inner) {
        Shape s{n};
        s.insert(s.end(), inner.begin(), inner.end());
        return s;
    }
    static Shape inner_shape(const Tensor<T>& x) { return Shape(x.shape().begin() + 1, x.shape().end()); }

    Tensor<T> input_;
    bool has_input_ = false;
};

// ---------------------------------------------------------------------------

template <typename T>
class WeightMapLayer final : public Layer<T> {
public:
    explicit WeightMapLayer(WeightMapParams<T> p) : w_("W", std::move(p.W)), b_("b", std::move(p.b)) {
        meta_.variant = p.variant;
        meta_.kernel = p.kernel;
        meta_.stride = p.stride;
        view().validate();
    }

    std::string kind() const override { return std::string("wm_") + to_string(meta_.variant); }

    Shape output_shape(const Shape& in) const override {
        check_input(in);
        return b_.value.shape();
    }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        check_input(this->inner_shape(x));
        this->remember_input(x);
        const auto p = view();
        const std::size_t n = x.extent(0), in_sz = shape_numel(this->inner_shape(x)), out_sz = b_.value.size();
        Tensor<T> out(this->batched(n, b_.value.shape()));
        detail::WmScratch<T> scratch(p.in_extent() * p.in_extent());
        for (std::size_t s = 0; s < n; s += kBlock) {
            detail::wm_forward_sample(p, x.ptr() + s * in_sz, out.ptr() + s * out_sz, scratch, std::min(kBlock, n - s));
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) override {
        const Tensor<T>& x = this->cached_input();
        const std::size_t n = x.extent(0), in_sz = shape_numel(this->inner_shape(x)), out_sz = b_.value.size();
        this->check_grad_shape(grad_out, this->batched(n, b_.value.shape()));
        const auto p = view();
        Tensor<T> grad_x(x.shape());
        detail::WmScratch<T> scratch(p.in_extent() * p.in_extent());
        for (std::size_t s = 0; s < n; s += kBlock) {
            detail::wm_backward_sample(p, x.ptr() + s * in_sz, grad_out.ptr() + s * out_sz, grad_x.ptr() + s * in_sz,
                                       w_.grad.ptr(), b_.grad.ptr(), scratch, std::min(kBlock, n - s));
        }
        return grad_x;
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<WeightMapLayer>(*this); }
    std::vector<Param<T>*> params() override { return {&w_, &b_}; }

    /// Elementwise map (C_i*C_o*D_i^2 multiplies), the all-ones correlation of
    /// every map (D_k^2 multiply-adds per output element and channel pair),
    /// the unsharp combination (2 ops per element and pair) and the bias add.
    std::uint64_t flops(const Shape& in) const override {
        check_input(in);
        const std::uint64_t ci = w_.value.extent(0), co = w_.value.extent(1);
        const std::uint64_t di = w_.value.extent(2), d_o = b_.value.extent(1), k = meta_.kernel;
        std::uint64_t f = ci * co * di * di + 2 * ci * co * d_o * d_o * k * k + co * d_o * d_o;
        if (meta_.variant == WmVariant::unsharp) f += 2 * ci * co * d_o * d_o;
        return f;
    }

    /// Parameter view in the free-function format (copies the tensors).
    WeightMapParams<T> weight_map() const { return view(); }

private:
    WeightMapParams<T> view() const {
        WeightMapParams<T> p = meta_;
        p.W = w_.value;
        p.b = b_.value;
        return p;
    }

    void check_input(const Shape& in) const {
        const auto& W = w_.value;
        if (in.size() != 3 || in[0] != W.extent(0) || in[1] != W.extent(2) || in[2] != W.extent(3)) {
            throw std::invalid_argument(kind() + ": input " + shape_string(in) + " does not match maps " +
                                        shape_string(W.shape()));
        }
    }

    Param<T> w_, b_;
    // samples per pass over the weight maps
    static constexpr std::size_t kBlock = 4;

    WeightMapParams<T> meta_;
};

// ---------------------------------------------------------------------------

template <typename T>
struct ConvParams {
    Tensor<T> weights;  // [C_o, C_i, K, K]
    Tensor<T> bias;     // [C_o]
    std::size_t stride = 1;
    std::size_t padding = 0;
};

template <typename T>
ConvParams<T> make_conv_params(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                               std::size_t stride, std::size_t padding, std::mt19937_64& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_channels * kernel * kernel));
    return {gaussian_tensor<T>({out_channels, in_channels, kernel, kernel}, stddev, rng), Tensor<T>({out_channels}),
            stride, padding};
}

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const ConvParams<T>& p) {
    if (p.bias.rank() != 1 || p.weights.rank() != 4 || p.bias.extent(0) != p.weights.extent(0)) {
        throw std::invalid_argument("conv_forward: bias " + shape_string(p.bias.shape()) + " does not match weights " +
                                    shape_string(p.weights.shape()));
    }
    Tensor<T> out = cross_correlate(x, p.weights, p.stride, p.padding);
    const std::size_t plane = out.extent(1) * out.extent(2);
    for (std::size_t c = 0; c < out.extent(0); ++c) {
        for (std::size_t q = 0; q < plane; ++q) out[c * plane + q] += p.bias[c];
    }
    return out;
}

template <typename T>
class ConvLayer final : public Layer<T> {
public:
    explicit ConvLayer(ConvParams<T> p)
        : w_("weight", std::move(p.weights)), b_("bias", std::move(p.bias)), stride_(p.stride), padding_(p.padding) {
        if (b_.value.rank() != 1 || b_.value.extent(0) != w_.value.extent(0)) {
            throw std::invalid_argument("conv: bias length must equal output channels");
        }
    }

    std::string kind() const override { return "conv"; }

    Shape output_shape(const Shape& in) const override {
        const auto g = geometry(in);
        return {w_.value.extent(0), g.out_h, g.out_w};
    }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        const auto g = geometry(this->inner_shape(x));
        this->remember_input(x);
        const std::size_t n = x.extent(0), co = w_.value.extent(0), in_sz = g.channels * g.height * g.width;
        const std::size_t pos = g.positions(), out_sz = co * pos;
        Tensor<T> out({n, co, g.out_h, g.out_w});
        const detail::ConstMatrixMap<T> W(w_.value.ptr(), co, g.patch_size());
        for (std::size_t s0 = 0; s0 < n; s0 += kChunk) {
            const std::size_t m = std::min(kChunk, n - s0), ld = m * pos;
            cols_.resize(g.patch_size() * ld);
            prod_.resize(co * ld);
            for (std::size_t s = 0; s < m; ++s) detail::im2col(x.ptr() + (s0 + s) * in_sz, g, cols_.data() + s * pos, ld);
            detail::MatrixMap<T>(prod_.data(), co, ld).noalias() =
                W * detail::ConstMatrixMap<T>(cols_.data(), g.patch_size(), ld);
            for (std::size_t s = 0; s < m; ++s) {
                T* o = out.ptr() + (s0 + s) * out_sz;
                for (std::size_t c = 0; c < co; ++c) {
                    const T* src = prod_.data() + c * ld + s * pos;
                    const T bias = b_.value[c];
                    for (std::size_t p = 0; p < pos; ++p) o[c * pos + p] = src[p] + bias;
                }
            }
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) override {
        const Tensor<T>& x = this->cached_input();
        const auto g = geometry(this->inner_shape(x));
        const std::size_t n = x.extent(0), co = w_.value.extent(0), in_sz = g.channels * g.height * g.width;
        const std::size_t pos = g.positions(), out_sz = co * pos;
        this->check_grad_shape(grad_out, {n, co, g.out_h, g.out_w});
        Tensor<T> grad_x(x.shape());
        const detail::ConstMatrixMap<T> W(w_.value.ptr(), co, g.patch_size());
        detail::MatrixMap<T> gW(w_.grad.ptr(), co, g.patch_size());
        for (std::size_t s0 = 0; s0 < n; s0 += kChunk) {
            const std::size_t m = std::min(kChunk, n - s0), ld = m * pos;
            cols_.resize(g.patch_size() * ld);
            prod_.resize(co * ld);
            for (std::size_t s = 0; s < m; ++s) {
                detail::im2col(x.ptr() + (s0 + s) * in_sz, g, cols_.data() + s * pos, ld);
                const T* go = grad_out.ptr() + (s0 + s) * out_sz;
                for (std::size_t c = 0; c < co; ++c) std::copy(go + c * pos, go + (c + 1) * pos, prod_.data() + c * ld + s * pos);
            }
            const detail::ConstMatrixMap<T> go(prod_.data(), co, ld);
            gW.noalias() += go * detail::ConstMatrixMap<T>(cols_.data(), g.patch_size(), ld).transpose();
            for (std::size_t c = 0; c < co; ++c) b_.grad[c] += go.row(c).sum();
            // the patch matrix is no longer needed; reuse it for the input gradient
            detail::MatrixMap<T>(cols_.data(), g.patch_size(), ld).noalias() = W.transpose() * go;
            for (std::size_t s = 0; s < m; ++s)
                detail::col2im_add(cols_.data() + s * pos, g, grad_x.ptr() + (s0 + s) * in_sz, ld);
        }
        return grad_x;
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ConvLayer>(*this); }
    std::vector<Param<T>*> params() override { return {&w_, &b_}; }

    std::uint64_t flops(const Shape& in) const override {
        const auto g = geometry(in);
        const std::uint64_t co = w_.value.extent(0);
        return 2 * co * g.positions() * g.patch_size() + co * g.positions();
    }

    std::size_t stride() const { return stride_; }

private:
    detail::ConvGeometry geometry(const Shape& in) const {
        if (in.size() != 3 || in[0] != w_.value.extent(1)) {
            throw std::invalid_argument("conv: input " + shape_string(in) + " does not match weights " +
                                        shape_string(w_.value.shape()));
        }
        return detail::ConvGeometry(in[0], in[1], in[2], w_.value.extent(2), w_.value.extent(3), stride_, padding_);
    }

    // samples per patch matrix; one sample keeps the patch matrix in cache, which beats a wider GEMM
    static constexpr std::size_t kChunk = 1;

    Param<T> w_, b_;
    std::size_t stride_, padding_;
    std::vector<T> cols_, prod_;
};

// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormParams {
    Tensor<T> gamma, beta;
    Tensor<T> running_mean, running_var;
    T momentum = T(0.9);
    T epsilon = T(1e-5);

    explicit BatchNormParams(std::size_t channels = 1)
        : gamma({channels}, T{1}), beta({channels}), running_mean({channels}), running_var({channels}, T{1}) {}
};

/// Per-channel normalization over the batch (and spatial axes for rank-4 input).
///
/// Train mode: y = gamma * (x - mu_B) / sqrt(var_B + eps) + beta with biased
/// batch variance; running stats move as r <- momentum*r + (1-momentum)*batch
/// (unbiased variance). Eval mode uses the running stats.
template <typename T>
class BatchNormLayer final : public Layer<T> {
public:
    explicit BatchNormLayer(BatchNormParams<T> p)
        : gamma_("gamma", std::move(p.gamma)), beta_("beta", std::move(p.beta)),
          running_mean_(std::move(p.running_mean)), running_var_(std::move(p.running_var)), momentum_(p.momentum),
          epsilon_(p.epsilon) {}

    std::string kind() const override { return "batchnorm"; }

    Shape output_shape(const Shape& in) const override {
        if (in.empty() || in[0] != channels()) {
            throw std::invalid_argument("batchnorm: input " + shape_string(in) + " has wrong channel count");
        }
        return in;
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        output_shape(this->inner_shape(x));
        const std::size_t n = x.extent(0), c_n = channels(), plane = x.size() / (n * c_n);
        if (mode == Mode::train && n < 2) throw std::invalid_argument("batchnorm: train mode needs a batch of at least 2");
        this->remember_input(x);
        mode_ = mode;
        Tensor<T> out(x.shape());
        x_hat_ = Tensor<T>(x.shape());
        inv_std_.assign(c_n, T{0});
        const double count = static_cast<double>(n * plane);
        for (std::size_t c = 0; c < c_n; ++c) {
            double mean, var;
            if (mode == Mode::train) {
                double sum = 0;
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t q = 0; q < plane; ++q) sum += x[(s * c_n + c) * plane + q];
                mean = sum / count;
                double sq = 0;
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t q = 0; q < plane; ++q) {
                        const double d = x[(s * c_n + c) * plane + q] - mean;
                        sq += d * d;
                    }
                var = sq / count;
                running_mean_[c] = static_cast<T>(momentum_ * running_mean_[c] + (1 - momentum_) * mean);
                running_var_[c] =
                    static_cast<T>(momentum_ * running_var_[c] + (1 - momentum_) * var * count / (count - 1));
            } else {
                mean = running_mean_[c];
                var = running_var_[c];
            }
            const T inv = static_cast<T>(1.0 / std::sqrt(var + epsilon_));
            inv_std_[c] = inv;
            for (std::size_t s = 0; s < n; ++s) {
                for (std::size_t q = 0; q < plane; ++q) {
                    const std::size_t i = (s * c_n + c) * plane + q;
                    x_hat_[i] = (x[i] - static_cast<T>(mean)) * inv;
                    out[i] = gamma_.value[c] * x_hat_[i] + beta_.value[c];
                }
            }
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) override {
        const Tensor<T>& x = this->cached_input();
        this->check_grad_shape(grad_out, x.shape());
        const std::size_t n = x.extent(0), c_n = channels(), plane = x.size() / (n * c_n);
        const double count = static_cast<double>(n * plane);
        Tensor<T> grad_x(x.shape());
        for (std::size_t c = 0; c < c_n; ++c) {
            double sum_g = 0, sum_gx = 0;
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t q = 0; q < plane; ++q) {
                    const std::size_t i = (s * c_n + c) * plane + q;
                    sum_g += grad_out[i];
                    sum_gx += grad_out[i] * x_hat_[i];
                }
            gamma_.grad[c] += static_cast<T>(sum_gx);
            beta_.grad[c] += static_cast<T>(sum_g);
            const T scale = gamma_.value[c] * inv_std_[c];
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t q = 0; q < plane; ++q) {
                    const std::size_t i = (s * c_n + c) * plane + q;
                    if (mode_ == Mode::train) {
                        grad_x[i] = scale * static_cast<T>(grad_out[i] - sum_g / count - x_hat_[i] * sum_gx / count);
                    } else {
                        grad_x[i] = scale * grad_out[i];
                    }
                }
        }
        return grad_x;
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNormLayer>(*this); }
    std::vector<Param<T>*> params() override { return {&gamma_, &beta_}; }
    std::vector<std::pair<std::string, Tensor<T>*>> buffers() override {
        return {{"running_mean", &running_mean_}, {"running_var", &running_var_}};
    }
    std::uint64_t flops(const Shape& in) const override { return 2 * shape_numel(in); }

    std::size_t channels() const { return gamma_.value.extent(0); }
    const Tensor<T>& running_mean() const { return running_mean_; }
    const Tensor<T>& running_var() const { return running_var_; }

private:
    Param<T> gamma_, beta_;
    Tensor<T> running_mean_, running_var_;
    T momentum_, epsilon_;
    Mode mode_ = Mode::train;
    Tensor<T> x_hat_;
    std::vector<T> inv_std_;
};

/// Applies batchnorm to a batch and writes the updated running stats back to `p`.
template <typename T>
Tensor<T> batchnorm_apply(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode) {
    BatchNormLayer<T> layer(p);
    Tensor<T> out = layer.forward(x, mode);
    p.running_mean = layer.running_mean();
    p.running_var = layer.running_var();
    return out;
}

// ---------------------------------------------------------------------------

template <typename T>
class ReluLayer final : public Layer<T> {
public:
    std::string kind() const override { return "relu"; }
    Shape output_shape(const Shape& in) const override { return in; }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        this->remember_input(x);
        Tensor<T> out(x.shape());
        const T* in = x.ptr();
        T* o = out.ptr();
        const std::size_t n = x.size();
        for (std::size_t i = 0; i < n; ++i) o[i] = in[i] > T{0} ? in[i] : T{0};
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) override {
        const Tensor<T>& x = this->cached_input();
        this->check_grad_shape(grad_out, x.shape());
        Tensor<T> grad_x(x.shape());
        const T* in = x.ptr();
        const T* g = grad_out.ptr();
        T* gx = grad_x.ptr();
        const std::size_t n = x.size();
        for (std::size_t i = 0; i < n; ++i) gx[i] = in[i] > T{0} ? g[i] : T{0};
        return grad_x;
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ReluLayer>(*this); }
    std::uint64_t flops(const Shape&) const override { return 0; }
};

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
    return out;
}

// ---------------------------------------------------------------------------

/// Max pooling on [N,C,H,W]; output extent floor((H - size)/stride) + 1.
/// Ties route the gradient to the first maximum in row-major order.
template <typename T>
class MaxPoolLayer final : public Layer<T> {
public:
    explicit MaxPoolLayer(std::size_t size = 2, std::size_t stride = 2) : size_(size), stride_(stride) {}

    std::string kind() const override { return "maxpool"; }

    Shape output_shape(const Shape& in) const override {
        if (in.size() != 3) throw std::invalid_argument("maxpool: expected [C,H,W], got " + shape_string(in));
        return {in[0], correlation_extent(in[1], size_, stride_, 0), correlation_extent(in[2], size_, stride_, 0)};
    }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        const Shape o = output_shape(this->inner_shape(x));
        this->remember_input(x);
        const std::size_t n = x.extent(0), h = x.extent(2), w = x.extent(3);
        Tensor<T> out(this->batched(n, o));
        argmax_.assign(out.size(), 0);
        for (std::size_t plane = 0; plane < n * o[0]; ++plane) {
            const T* src = x.ptr() + plane * h * w;
            for (std::size_t i = 0; i < o[1]; ++i) {
                for (std::size_t j = 0; j < o[2]; ++j) {
                    std::size_t best = (i * stride_) * w + j * stride_;
                    for (std::size_t u = 0; u < size_; ++u)
                        for (std::size_t v = 0; v < size_; ++v) {
                            const std::size_t q = (i * stride_ + u) * w + j * stride_ + v;
                            if (src[q] > src[best]) best = q;
                        }
                    const std::size_t dst = (plane * o[1] + i) * o[2] + j;
                    out[dst] = src[best];
                    argmax_[dst] = plane * h * w + best;
                }
            }
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) override {
        const Tensor<T>& x = this->cached_input();
        this->check_grad_shape(grad_out, this->batched(x.extent(0), output_shape(this->inner_shape(x))));
        Tensor<T> grad_x(x.shape());
        for (std::size_t i = 0; i < grad_out.size(); ++i) grad_x[argmax_[i]] += grad_out[i];
        return grad_x;
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPoolLayer>(*this); }
    std::uint64_t flops(const Shape& in) const override {
        return shape_numel(output_shape(in)) * (size_ * size_ - 1);
    }

private:
    std::size_t size_, stride_;
    std::vector<std::size_t> argmax_;
};

template <typename T>
Tensor<T> maxpool(const Tensor<T>& x, std::size_t size = 2, std::size_t stride = 2) {
    MaxPoolLayer<T> layer(size, stride);
    Shape b{1};
    b.insert(b.end(), x.shape().begin(), x.shape().end());
    Tensor<T> out = layer.forward(x.reshaped(b), Mode::eval);
    return out.sample(0);
}

// ---------------------------------------------------------------------------

/// [N,C,H,W] -> [N,C], mean over each plane.
template <typename T>
class GlobalAvgPoolLayer final : public Layer<T> {
public:
    std::string kind() const override { return "global_avg_pool"; }

    Shape output_shape(const Shape& in) const override {
        if (in.size() != 3) throw std::invalid_argument("global_avg_pool: expected [C,H,W], got " + shape_string(in));
        return {in[0]};
    }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        output_shape(this->inner_shape(x));
        this->remember_input(x);
        const std::size_t planes = x.extent(0) * x.extent(1), area = x.extent(2) * x.extent(3);
        Tensor<T> out({x.extent(0), x.extent(1)});
        for (std::size_t p = 0; p < planes; ++p) {
            T acc{0};
            for (std::size_t q = 0; q < area; ++q) acc += x[p * area + q];
            out[p] = acc / static_cast<T>(area);
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) override {
        const Tensor<T>& x = this->cached_input();
        this->check_grad_shape(grad_out, {x.extent(0), x.extent(1)});
        const std::size_t area = x.extent(2) * x.extent(3);
        Tensor<T> grad_x(x.shape());
        for (std::size_t p = 0; p < grad_out.size(); ++p) {
            const T g = grad_out[p] / static_cast<T>(area);
            for (std::size_t q = 0; q < area; ++q) grad_x[p * area + q] = g;
        }
        return grad_x;
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<GlobalAvgPoolLayer>(*this); }
    std::uint64_t flops(const Shape& in) const override { return shape_numel(in); }
};

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    GlobalAvgPoolLayer<T> layer;
    Shape b{1};
    b.insert(b.end(), x.shape().begin(), x.shape().end());
    return layer.forward(x.reshaped(b), Mode::eval).sample(0);
}

// ---------------------------------------------------------------------------

template <typename T>
class FlattenLayer final : public Layer<T> {
public:
    std::string kind() const override { return "flatten"; }
    Shape output_shape(const Shape& in) const override { return {shape_numel(in)}; }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        shape_ = x.shape();
        has_shape_ = true;
        return x.reshaped({x.extent(0), x.size() / x.extent(0)});
    }

    Tensor<T> backward(const Tensor<T>& grad_out) override {
        if (!has_shape_) throw std::logic_error("flatten: backward called before forward");
        return grad_out.reshaped(shape_);
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<FlattenLayer>(*this); }
    std::uint64_t flops(const Shape&) const override { return 0; }

private:
    Shape shape_;
    bool has_shape_ = false;
};

// ---------------------------------------------------------------------------

/// y = W x + b with W [out, in].
template <typename T>
class FullyConnectedLayer final : public Layer<T> {
public:
    FullyConnectedLayer(Tensor<T> weights, Tensor<T> bias) : w_("weight", std::move(weights)), b_("bias", std::move(bias)) {
        if (w_.value.rank() != 2 || b_.value.rank() != 1 || b_.value.extent(0) != w_.value.extent(0)) {
            throw std::invalid_argument("fully_connected: weights " + shape_string(w_.value.shape()) +
                                        " and bias " + shape_string(b_.value.shape()) + " disagree");
        }
    }

    static FullyConnectedLayer make(std::size_t in, std::size_t out, std::mt19937_64& rng) {
        return FullyConnectedLayer(gaussian_tensor<T>({out, in}, std::sqrt(2.0 / static_cast<double>(in)), rng),
                                   Tensor<T>({out}));
    }

    std::string kind() const override { return "fully_connected"; }

    Shape output_shape(const Shape& in) const override {
        if (in.size() != 1 || in[0] != w_.value.extent(1)) {
            throw std::invalid_argument("fully_connected: input " + shape_string(in) + " does not match weights " +
                                        shape_string(w_.value.shape()));
        }
        return {w_.value.extent(0)};
    }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        if (x.rank() != 2) throw std::invalid_argument("fully_connected: expected [N,F], got " + shape_string(x.shape()));
        output_shape({x.extent(1)});
        this->remember_input(x);
        const std::size_t n = x.extent(0), in = w_.value.extent(1), out_f = w_.value.extent(0);
        Tensor<T> out({n, out_f});
        detail::MatrixMap<T> y(out.ptr(), n, out_f);
        y.noalias() = detail::ConstMatrixMap<T>(x.ptr(), n, in) *
                      detail::ConstMatrixMap<T>(w_.value.ptr(), out_f, in).transpose();
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t o = 0; o < out_f; ++o) y(s, o) += b_.value[o];
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) override {
        const Tensor<T>& x = this->cached_input();
        const std::size_t n = x.extent(0), in = w_.value.extent(1), out_f = w_.value.extent(0);
        this->check_grad_shape(grad_out, {n, out_f});
        const detail::ConstMatrixMap<T> g(grad_out.ptr(), n, out_f);
        const detail::ConstMatrixMap<T> X(x.ptr(), n, in);
        detail::MatrixMap<T>(w_.grad.ptr(), out_f, in).noalias() += g.transpose() * X;
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t o = 0; o < out_f; ++o) b_.grad[o] += g(s, o);
        Tensor<T> grad_x(x.shape());
        detail::MatrixMap<T>(grad_x.ptr(), n, in).noalias() =
            g * detail::ConstMatrixMap<T>(w_.value.ptr(), out_f, in);
        return grad_x;
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<FullyConnectedLayer>(*this); }
    std::vector<Param<T>*> params() override { return {&w_, &b_}; }
    std::uint64_t flops(const Shape&) const override {
        return 2 * w_.value.size() + b_.value.size();
    }

private:
    Param<T> w_, b_;
};

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias) {
    FullyConnectedLayer<T> layer(weights, bias);
    return layer.forward(x.reshaped({1, x.size()}), Mode::eval).reshaped({weights.extent(0)});
}

// ---------------------------------------------------------------------------

template <typename T>
struct InputScaleParams {
    Tensor<T> S;  // same shape as one input image
};

/// Learnable elementwise map on the raw input, y = S . x (one map per image channel).
template <typename T>
class InputScaleLayer final : public Layer<T> {
public:
    explicit InputScaleLayer(InputScaleParams<T> p) : s_("S", std::move(p.S)) {}

    std::string kind() const override { return "input_scale"; }

    Shape output_shape(const Shape& in) const override {
        if (in != s_.value.shape()) {
            throw std::invalid_argument("input_scale: input " + shape_string(in) + " does not match map " +
                                        shape_string(s_.value.shape()));
        }
        return in;
    }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        output_shape(this->inner_shape(x));
        this->remember_input(x);
        const std::size_t sz = s_.value.size();
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = s_.value[i % sz] * x[i];
        return out;
    }

    Tensor<T> backward(const Tensor<T>& grad_out) override {
        const Tensor<T>& x = this->cached_input();
        this->check_grad_shape(grad_out, x.shape());
        const std::size_t sz = s_.value.size();
        Tensor<T> grad_x(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            s_.grad[i % sz] += grad_out[i] * x[i];
            grad_x[i] = grad_out[i] * s_.value[i % sz];
        }
        return grad_x;
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<InputScaleLayer>(*this); }
    std::vector<Param<T>*> params() override { return {&s_}; }
    std::uint64_t flops(const Shape& in) const override { return shape_numel(in); }

private:
    Param<T> s_;
};

template <typename T>
Tensor<T> input_scale(const Tensor<T>& x, const InputScaleParams<T>& p) {
    return elementwise_mul(p.S, x);
}

// ---------------------------------------------------------------------------

template <typename T>
struct LayerGradients {
    Tensor<T> grad_x;
    std::vector<Tensor<T>> grad_params;  // in params() order
};

/// Runs backward on a layer whose forward has been evaluated and collects the
/// input gradient plus fresh (zeroed, then accumulated) parameter gradients.
template <typename T>
LayerGradients<T> layer_gradients(Layer<T>& layer, const Tensor<T>& upstream) {
    layer.zero_grad();
    LayerGradients<T> out{layer.backward(upstream), {}};
    for (auto* p : layer.params()) out.grad_params.push_back(p->grad);
    return out;
}

}  // namespace wmnet
