#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "wmnet/tensor.hpp"

namespace wmnet {

/// Malformed IDX stream; `offset` is the byte position where parsing failed.
class IdxError : public std::runtime_error {
public:
    IdxError(const std::string& what, std::size_t offset)
        : std::runtime_error("idx: " + what + " at byte " + std::to_string(offset)), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Raw unsigned-byte IDX array: big-endian magic, dimension sizes, payload.
struct IdxArray {
    std::uint32_t magic = 0;
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> payload;
};

namespace detail {
inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
    if (offset + 4 > bytes.size()) throw IdxError("truncated header", offset);
    return (std::uint32_t(bytes[offset]) << 24) | (std::uint32_t(bytes[offset + 1]) << 16) |
           (std::uint32_t(bytes[offset + 2]) << 8) | std::uint32_t(bytes[offset + 3]);
}
inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t(v >> 24));
    out.push_back(std::uint8_t(v >> 16));
    out.push_back(std::uint8_t(v >> 8));
    out.push_back(std::uint8_t(v));
}
}  // namespace detail

inline IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
    IdxArray a;
    a.magic = detail::read_be32(bytes, 0);
    if (a.magic != kIdxImagesMagic && a.magic != kIdxLabelsMagic) {
        throw IdxError("bad magic 0x" + [&] {
            char buf[16];
            std::snprintf(buf, sizeof buf, "%08x", a.magic);
            return std::string(buf);
        }(), 0);
    }
    const std::size_t rank = a.magic & 0xff;
    std::size_t offset = 4;
    std::uint64_t count = 1;
    for (std::size_t d = 0; d < rank; ++d, offset += 4) {
        const std::uint32_t extent = detail::read_be32(bytes, offset);
        if (extent == 0) throw IdxError("zero dimension", offset);
        count *= extent;
        if (count > (std::uint64_t{1} << 40)) throw IdxError("dimension overflow", offset);
        a.dims.push_back(extent);
    }
    if (bytes.size() - offset < count) {
        throw IdxError("truncated payload: need " + std::to_string(count) + " bytes, have " +
                           std::to_string(bytes.size() - offset),
                       offset);
    }
    if (bytes.size() - offset > count) throw IdxError("trailing bytes after payload", offset + count);
    a.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
    return a;
}

inline std::vector<std::uint8_t> serialize_idx(const IdxArray& a) {
    std::vector<std::uint8_t> out;
    out.reserve(4 + 4 * a.dims.size() + a.payload.size());
    detail::write_be32(out, a.magic);
    for (std::uint32_t d : a.dims) detail::write_be32(out, d);
    out.insert(out.end(), a.payload.begin(), a.payload.end());
    return out;
}

/// Images [N,1,H,W] scaled by 1/255.
inline Tensor<float> idx_to_images(const IdxArray& a) {
    if (a.magic != kIdxImagesMagic || a.dims.size() != 3) throw IdxError("not an image array", 0);
    Tensor<float> images({a.dims[0], 1, a.dims[1], a.dims[2]});
    for (std::size_t i = 0; i < a.payload.size(); ++i) images[i] = static_cast<float>(a.payload[i]) / 255.0f;
    return images;
}

inline std::vector<int> idx_to_labels(const IdxArray& a) {
    if (a.magic != kIdxLabelsMagic || a.dims.size() != 1) throw IdxError("not a label array", 0);
    std::vector<int> labels(a.payload.begin(), a.payload.end());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] > 9) throw IdxError("label out of range", 8 + i);
    }
    return labels;
}

/// Inverse of idx_to_images for pixel values on the 1/255 grid.
inline IdxArray images_to_idx(const Tensor<float>& images) {
    IdxArray a;
    a.magic = kIdxImagesMagic;
    a.dims = {static_cast<std::uint32_t>(images.extent(0)), static_cast<std::uint32_t>(images.extent(2)),
              static_cast<std::uint32_t>(images.extent(3))};
    a.payload.resize(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        a.payload[i] = static_cast<std::uint8_t>(std::lround(std::clamp(images[i], 0.0f, 1.0f) * 255.0f));
    }
    return a;
}

inline IdxArray labels_to_idx(const std::vector<int>& labels) {
    IdxArray a;
    a.magic = kIdxLabelsMagic;
    a.dims = {static_cast<std::uint32_t>(labels.size())};
    a.payload.assign(labels.begin(), labels.end());
    return a;
}

/// Reads a file, transparently inflating gzip content.
inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::uint8_t> out;
    std::array<std::uint8_t, 1 << 16> buf;
    int n;
    while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.insert(out.end(), buf.begin(), buf.begin() + n);
    const bool failed = n < 0;
    gzclose(f);
    if (failed) throw std::runtime_error("read error in " + path.string());
    return out;
}

enum class Split { train, val, test };

struct Dataset {
    Tensor<float> images;  // [N,1,28,28], values in [0,1]
    std::vector<int> labels;
    Split split = Split::train;

    std::size_t size() const { return labels.size(); }

    /// Subset by source index, in the given order.
    Dataset select(std::span<const std::size_t> indices, Split tag) const {
        const std::size_t plane = images.size() / images.extent(0);
        Dataset out;
        out.images = Tensor<float>({indices.size(), images.extent(1), images.extent(2), images.extent(3)});
        out.labels.resize(indices.size());
        out.split = tag;
        for (std::size_t i = 0; i < indices.size(); ++i) {
            std::copy_n(images.ptr() + indices[i] * plane, plane, out.images.ptr() + i * plane);
            out.labels[i] = labels[indices[i]];
        }
        return out;
    }

    Dataset head(std::size_t n) const {
        std::vector<std::size_t> idx(std::min(n, size()));
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        return select(idx, split);
    }
};

struct MnistFiles {
    static constexpr const char* kTrainImages = "train-images-idx3-ubyte";
    static constexpr const char* kTrainLabels = "train-labels-idx1-ubyte";
    static constexpr const char* kTestImages = "t10k-images-idx3-ubyte";
    static constexpr const char* kTestLabels = "t10k-labels-idx1-ubyte";
};

/// Resolves `name` or `name.gz` inside `dir`.
inline std::filesystem::path locate_idx(const std::filesystem::path& dir, const std::string& name) {
    for (const auto& candidate : {dir / name, dir / (name + ".gz")}) {
        if (std::filesystem::exists(candidate)) return candidate;
    }
    throw std::runtime_error("missing MNIST file " + (dir / name).string() + "[.gz]");
}

inline Dataset load_mnist(const std::filesystem::path& dir, Split which) {
    const bool test = which == Split::test;
    Dataset d;
    d.images = idx_to_images(parse_idx(read_file_bytes(locate_idx(dir, test ? MnistFiles::kTestImages : MnistFiles::kTrainImages))));
    d.labels = idx_to_labels(parse_idx(read_file_bytes(locate_idx(dir, test ? MnistFiles::kTestLabels : MnistFiles::kTrainLabels))));
    if (d.images.extent(0) != d.labels.size()) {
        throw std::runtime_error("MNIST image/label count mismatch in " + dir.string());
    }
    d.split = which;
    return d;
}

inline constexpr std::size_t kMnistTrainSize = 60000;
inline constexpr std::size_t kTrainPortion = 54000;

struct TrainValSplit {
    Dataset train, val;
    std::vector<std::size_t> train_indices, val_indices;
};

/// Seeded shuffle of the 60K source into 54K train / 6K validation.
inline TrainValSplit split_train_val(const Dataset& source, std::uint64_t seed) {
    if (source.size() != kMnistTrainSize) {
        throw std::invalid_argument("split_train_val: expected " + std::to_string(kMnistTrainSize) +
                                    " examples, got " + std::to_string(source.size()));
    }
    std::vector<std::size_t> order(source.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    TrainValSplit s;
    s.train_indices.assign(order.begin(), order.begin() + kTrainPortion);
    s.val_indices.assign(order.begin() + kTrainPortion, order.end());
    s.train = source.select(s.train_indices, Split::train);
    s.val = source.select(s.val_indices, Split::val);
    return s;
}

/// Zero-pads an HxW plane by `pad` on every side and crops the HxW window whose
/// top-left corner in padded coordinates is (dy, dx). (pad, pad) is the identity.
template <typename T>
void pad_crop(std::span<const T> image, std::size_t h, std::size_t w, std::size_t pad, std::size_t dy, std::size_t dx,
              std::span<T> out) {
    if (dy > 2 * pad || dx > 2 * pad) throw std::invalid_argument("pad_crop: offset outside the padded image");
    for (std::size_t i = 0; i < h; ++i) {
        const long r = static_cast<long>(i + dy) - static_cast<long>(pad);
        for (std::size_t j = 0; j < w; ++j) {
            const long c = static_cast<long>(j + dx) - static_cast<long>(pad);
            const bool inside = r >= 0 && r < static_cast<long>(h) && c >= 0 && c < static_cast<long>(w);
            out[i * w + j] = inside ? image[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)] : T{0};
        }
    }
}

/// Random pad-and-crop: offset drawn uniformly from [0, 2*pad]^2.
template <typename T>
Tensor<T> augment_pad_crop(const Tensor<T>& image, std::size_t pad, std::mt19937_64& rng) {
    if (image.rank() != 3) throw std::invalid_argument("augment_pad_crop: expected [C,H,W]");
    std::uniform_int_distribution<std::size_t> offset(0, 2 * pad);
    const std::size_t dy = offset(rng), dx = offset(rng);
    const std::size_t h = image.extent(1), w = image.extent(2);
    Tensor<T> out(image.shape());
    for (std::size_t c = 0; c < image.extent(0); ++c) {
        pad_crop<T>(image.data().subspan(c * h * w, h * w), h, w, pad, dy, dx, out.data().subspan(c * h * w, h * w));
    }
    return out;
}

}  // namespace wmnet
