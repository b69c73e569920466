#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "wmnet/models.hpp"

namespace wmnet {

struct Heatmap {
    Tensor<double> values;  // [H,W], in [0,1]
    std::string layer;
    int target_class = 0;
};

/// Gradient-weighted class activation map over the model's feature layer.
///
/// Channel weights are the spatial means of d(logit[cls])/d(feature map); the
/// map is the rectified weighted channel sum, divided by its maximum when that
/// is positive.
template <typename T>
Heatmap grad_cam(Model<T>& model, const Tensor<T>& image, int cls) {
    const std::size_t classes = model.output_shape().at(0);
    if (cls < 0 || cls >= static_cast<int>(classes)) {
        throw std::invalid_argument("grad_cam: class " + std::to_string(cls) + " out of range");
    }
    Shape batched{1};
    batched.insert(batched.end(), image.shape().begin(), image.shape().end());
    model.forward(image.reshaped(batched), Mode::eval);
    Tensor<T> seed({1, classes});
    seed[static_cast<std::size_t>(cls)] = T{1};
    model.backward(seed);

    const int node = model.feature_node();
    const Tensor<T>& act = model.node_output(node);
    const Tensor<T>& grad = model.node_grad(node);
    const std::size_t c_n = act.extent(1), h = act.extent(2), w = act.extent(3), area = h * w;

    Heatmap out{Tensor<double>({h, w}), model.nodes()[node].name, cls};
    if (grad.empty()) return out;
    for (std::size_t c = 0; c < c_n; ++c) {
        double alpha = 0;
        for (std::size_t q = 0; q < area; ++q) alpha += grad[c * area + q];
        alpha /= static_cast<double>(area);
        for (std::size_t q = 0; q < area; ++q) out.values[q] += alpha * act[c * area + q];
    }
    double peak = 0;
    for (auto& v : out.values.data()) {
        v = std::max(v, 0.0);
        peak = std::max(peak, v);
    }
    if (peak > 0)
        for (auto& v : out.values.data()) v /= peak;
    return out;
}

/// Nearest-neighbour resize of an [H,W] map.
inline Tensor<double> upsample_nearest(const Tensor<double>& map, std::size_t out_h, std::size_t out_w) {
    const std::size_t h = map.extent(0), w = map.extent(1);
    Tensor<double> out({out_h, out_w});
    for (std::size_t i = 0; i < out_h; ++i)
        for (std::size_t j = 0; j < out_w; ++j) out.at(i, j) = map.at(i * h / out_h, j * w / out_w);
    return out;
}

struct GrayImage {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

inline std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Binary 8-bit PGM (P5).
inline void write_pgm(const GrayImage& img, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "P5\n" << img.width << ' ' << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!f) throw std::runtime_error("write failed for " + path.string());
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::string magic;
    int maxval = 0;
    GrayImage img;
    f >> magic >> img.width >> img.height >> maxval;
    if (magic != "P5" || maxval != 255) throw std::runtime_error(path.string() + ": not an 8-bit P5 PGM");
    f.get();
    img.pixels.resize(img.width * img.height);
    f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!f) throw std::runtime_error(path.string() + ": truncated PGM");
    return img;
}

inline constexpr std::size_t kRenderExtent = 28;

/// Writes the heatmap (nearest-neighbour upsampled to 28x28) to `path` and a
/// side-by-side [underlay | heatmap] composite to `<stem>_composite.pgm`.
/// Returns the composite path.
template <typename T>
std::filesystem::path render_heatmap(const Heatmap& h, const Tensor<T>& underlay, const std::filesystem::path& path) {
    const Tensor<double> up = upsample_nearest(h.values, kRenderExtent, kRenderExtent);
    GrayImage heat{kRenderExtent, kRenderExtent, std::vector<std::uint8_t>(up.size())};
    for (std::size_t i = 0; i < up.size(); ++i) heat.pixels[i] = quantize(up[i]);
    write_pgm(heat, path);

    if (underlay.size() != kRenderExtent * kRenderExtent) {
        throw std::invalid_argument("render_heatmap: underlay must be a single 28x28 image");
    }
    GrayImage composite{2 * kRenderExtent, kRenderExtent, std::vector<std::uint8_t>(2 * up.size())};
    for (std::size_t i = 0; i < kRenderExtent; ++i) {
        for (std::size_t j = 0; j < kRenderExtent; ++j) {
            composite.pixels[i * 2 * kRenderExtent + j] = quantize(static_cast<double>(underlay[i * kRenderExtent + j]));
            composite.pixels[i * 2 * kRenderExtent + kRenderExtent + j] = heat.pixels[i * kRenderExtent + j];
        }
    }
    auto composite_path = path;
    composite_path.replace_filename(path.stem().string() + "_composite.pgm");
    write_pgm(composite, composite_path);
    return composite_path;
}

}  // namespace wmnet
