#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace wmnet {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array. Channel-first layout ([C,H,W], batched as [N,C,H,W]).
///
/// The shape of a value never changes; `reshaped` returns a new tensor that
/// shares the element sequence. Elements are mutable so that parameter stores
/// and gradient buffers can be updated in place.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
        check_extents();
        data_.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (data_.size() != shape_numel(shape_)) {
            throw std::invalid_argument("tensor: " + std::to_string(data_.size()) +
                                        " elements do not fill shape " + shape_string(shape_));
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T* ptr() noexcept { return data_.data(); }
    const T* ptr() const noexcept { return data_.data(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    T& at(std::size_t c, std::size_t i, std::size_t j) { return data_[(c * shape_[1] + i) * shape_[2] + j]; }
    const T& at(std::size_t c, std::size_t i, std::size_t j) const {
        return data_[(c * shape_[1] + i) * shape_[2] + j];
    }
    T& at(std::size_t n, std::size_t c, std::size_t i, std::size_t j) {
        return data_[((n * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t i, std::size_t j) const {
        return data_[((n * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != size()) {
            throw std::invalid_argument("reshape: cannot view " + shape_string(shape_) + " as " +
                                        shape_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    /// Sample `n` of a batched tensor, with the leading axis dropped.
    Tensor sample(std::size_t n) const {
        Shape inner(shape_.begin() + 1, shape_.end());
        const std::size_t stride = shape_numel(inner);
        return Tensor(std::move(inner),
                      std::vector<T>(data_.begin() + n * stride, data_.begin() + (n + 1) * stride));
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    bool operator==(const Tensor& other) const = default;

private:
    void check_extents() const {
        for (std::size_t e : shape_) {
            if (e == 0) throw std::invalid_argument("tensor: zero extent in shape " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                    shape_string(b.shape()));
    }
}

template <typename T>
Tensor<T> elementwise_mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "elementwise_mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

/// Output extent of a correlation along one axis.
inline std::size_t correlation_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
    if (stride == 0) throw std::invalid_argument("correlation: stride must be positive");
    if (kernel > in + 2 * padding) {
        throw std::invalid_argument("correlation: kernel extent " + std::to_string(kernel) +
                                    " exceeds padded input extent " + std::to_string(in + 2 * padding));
    }
    return (in + 2 * padding - kernel) / stride + 1;
}

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
    std::size_t channels, height, width;
    std::size_t kh, kw;
    std::size_t stride, padding;
    std::size_t out_h, out_w;

    ConvGeometry(std::size_t c, std::size_t h, std::size_t w, std::size_t kh_, std::size_t kw_, std::size_t s,
                 std::size_t p)
        : channels(c), height(h), width(w), kh(kh_), kw(kw_), stride(s), padding(p),
          out_h(correlation_extent(h, kh_, s, p)), out_w(correlation_extent(w, kw_, s, p)) {}

    std::size_t patch_size() const { return channels * kh * kw; }
    std::size_t positions() const { return out_h * out_w; }
};

/// Output columns [lo, hi) whose kernel tap v lands inside the image.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t v) {
    // column j reads j*stride + v - padding, which must lie in [0, width)
    const std::size_t lo = v >= g.padding ? 0 : (g.padding - v + g.stride - 1) / g.stride;
    const std::size_t limit = g.width + g.padding;  // j*stride + v < limit
    const std::size_t hi = v >= limit ? 0 : std::min(g.out_w, (limit - v - 1) / g.stride + 1);
    return {std::min(lo, hi), hi};
}

/// Patch matrix [C*kh*kw, out_h*out_w] of one [C,H,W] image, zero padded.
/// Rows are ld apart (default out_h*out_w) so several images can share one matrix.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols, std::size_t ld = 0) {
    const std::size_t positions = ld ? ld : g.positions();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t u = 0; u < g.kh; ++u) {
            for (std::size_t v = 0; v < g.kw; ++v) {
                T* row = cols + ((c * g.kh + u) * g.kw + v) * positions;
                for (std::size_t i = 0; i < g.out_h; ++i) {
                    const long r = static_cast<long>(i * g.stride + u) - static_cast<long>(g.padding);
                    T* dst = row + i * g.out_w;
                    if (r < 0 || r >= static_cast<long>(g.height)) {
                        std::fill(dst, dst + g.out_w, T{0});
                        continue;
                    }
                    const T* src = image + (c * g.height + static_cast<std::size_t>(r)) * g.width;
                    const auto [lo, hi] = valid_columns(g, v);
                    std::fill(dst, dst + lo, T{0});
                    if (g.stride == 1) {
                        std::copy(src + lo + v - g.padding, src + hi + v - g.padding, dst + lo);
                    } else {
                        for (std::size_t j = lo; j < hi; ++j) dst[j] = src[j * g.stride + v - g.padding];
                    }
                    std::fill(dst + hi, dst + g.out_w, T{0});
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add a patch matrix back onto a [C,H,W] image.
template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* image, std::size_t ld = 0) {
    const std::size_t positions = ld ? ld : g.positions();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t u = 0; u < g.kh; ++u) {
            for (std::size_t v = 0; v < g.kw; ++v) {
                const T* row = cols + ((c * g.kh + u) * g.kw + v) * positions;
                for (std::size_t i = 0; i < g.out_h; ++i) {
                    const long r = static_cast<long>(i * g.stride + u) - static_cast<long>(g.padding);
                    if (r < 0 || r >= static_cast<long>(g.height)) continue;
                    T* dst = image + (c * g.height + static_cast<std::size_t>(r)) * g.width;
                    const T* src = row + i * g.out_w;
                    const auto [lo, hi] = valid_columns(g, v);
                    for (std::size_t j = lo; j < hi; ++j) dst[j * g.stride + v - g.padding] += src[j];
                }
            }
        }
    }
}

/// Same-size all-ones KxK correlation of one HxW plane with zero padding (K odd).
/// Separable: a row pass followed by a column pass, each a direct window sum.
/// The operator is symmetric, so it is also its own adjoint.
template <typename T>
void box_filter_same(const T* in, std::size_t h, std::size_t w, std::size_t k, T* out, T* scratch) {
    const std::size_t half = k / 2;
    // row pass: each shifted copy of the row is added where it overlaps
    for (std::size_t i = 0; i < h; ++i) {
        const T* src = in + i * w;
        T* dst = scratch + i * w;
        std::copy(src, src + w, dst);
        for (std::size_t d = 1; d <= half && d < w; ++d) {
            for (std::size_t j = d; j < w; ++j) dst[j] += src[j - d];
            for (std::size_t j = 0; j + d < w; ++j) dst[j] += src[j + d];
        }
    }
    // column pass over whole rows
    for (std::size_t i = 0; i < h; ++i) {
        const std::size_t lo = i >= half ? i - half : 0, hi = std::min(h - 1, i + half);
        T* dst = out + i * w;
        std::fill(dst, dst + w, T{0});
        for (std::size_t r = lo; r <= hi; ++r) {
            const T* src = scratch + r * w;
            for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
        }
    }
}

}  // namespace detail

/// Multi-channel cross-correlation (no kernel flip) with zero padding.
///
/// x: [C_i,H,W], k: [C_o,C_i,kh,kw] -> [C_o,H_o,W_o]. Lowered to a patch matrix
/// times the flattened kernel matrix.
template <typename T>
Tensor<T> cross_correlate(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride, std::size_t padding) {
    if (x.rank() != 3 || k.rank() != 4) {
        throw std::invalid_argument("cross_correlate: expected x [C,H,W] and k [Co,Ci,kh,kw], got " +
                                    shape_string(x.shape()) + " and " + shape_string(k.shape()));
    }
    if (x.extent(0) != k.extent(1)) {
        throw std::invalid_argument("cross_correlate: input channels " + shape_string(x.shape()) +
                                    " do not match kernel " + shape_string(k.shape()));
    }
    const detail::ConvGeometry g(x.extent(0), x.extent(1), x.extent(2), k.extent(2), k.extent(3), stride, padding);
    const std::size_t out_c = k.extent(0);
    std::vector<T> cols(g.patch_size() * g.positions());
    detail::im2col(x.ptr(), g, cols.data());
    Tensor<T> out({out_c, g.out_h, g.out_w});
    detail::MatrixMap<T> o(out.ptr(), out_c, g.positions());
    o.noalias() = detail::ConstMatrixMap<T>(k.ptr(), out_c, g.patch_size()) *
                  detail::ConstMatrixMap<T>(cols.data(), g.patch_size(), g.positions());
    return out;
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
template <typename T, typename F>
Tensor<T> finite_difference_gradient(F&& f, const Tensor<T>& x, T h = T(1e-5)) {
    Tensor<T> probe = x;
    Tensor<T> grad(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T saved = probe[i];
        probe[i] = saved + h;
        const T plus = static_cast<T>(f(static_cast<const Tensor<T>&>(probe)));
        probe[i] = saved - h;
        const T minus = static_cast<T>(f(static_cast<const Tensor<T>&>(probe)));
        probe[i] = saved;
        if (!std::isfinite(plus) || !std::isfinite(minus)) {
            throw std::domain_error("finite_difference_gradient: non-finite evaluation at coordinate " +
                                    std::to_string(i));
        }
        grad[i] = (plus - minus) / (2 * h);
    }
    return grad;
}

/// max|a-b| / max(max|b|, tiny). Used by gradient and oracle checks.
template <typename T>
double relative_error(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "relative_error");
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
        scale = std::max(scale, std::abs(static_cast<double>(b[i])));
    }
    return diff / std::max(scale, 1e-300);
}

}  // namespace wmnet
