#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "wmnet/layers.hpp"

namespace wmnet {

enum class Family { small_cnn, small_cnn_wide, resnet, densenet };
enum class LayerKind { conv, wm_smoothing, wm_unsharp };
enum class Replacement { none, all, alternating };

inline const char* to_string(Family f) {
    switch (f) {
        case Family::small_cnn: return "small_cnn";
        case Family::small_cnn_wide: return "small_cnn_wide";
        case Family::resnet: return "resnet";
        case Family::densenet: return "densenet";
    }
    return "?";
}
inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::conv: return "conv";
        case LayerKind::wm_smoothing: return "wm_smoothing";
        case LayerKind::wm_unsharp: return "wm_unsharp";
    }
    return "?";
}
inline const char* to_string(Replacement r) {
    switch (r) {
        case Replacement::none: return "none";
        case Replacement::all: return "all";
        case Replacement::alternating: return "alternating";
    }
    return "?";
}

inline Family parse_family(const std::string& s) {
    for (Family f : {Family::small_cnn, Family::small_cnn_wide, Family::resnet, Family::densenet})
        if (s == to_string(f)) return f;
    throw std::invalid_argument("unknown architecture family '" + s + "'");
}
inline LayerKind parse_layer_kind(const std::string& s) {
    for (LayerKind k : {LayerKind::conv, LayerKind::wm_smoothing, LayerKind::wm_unsharp})
        if (s == to_string(k)) return k;
    throw std::invalid_argument("unknown layer kind '" + s + "'");
}
inline Replacement parse_replacement(const std::string& s) {
    for (Replacement r : {Replacement::none, Replacement::all, Replacement::alternating})
        if (s == to_string(r)) return r;
    throw std::invalid_argument("unknown replacement rule '" + s + "'");
}

inline bool is_weight_map(LayerKind k) { return k != LayerKind::conv; }

/// Declarative network description.
///
/// `layer_kind` is the layer type placed at the body positions selected by
/// `replacement` (every position for `all`, every second one for
/// `alternating`, none for `none`); unselected positions are convolutions.
/// `body`, when non-empty, is the resolved per-position kind list and takes
/// precedence.
struct ArchitectureSpec {
    Family family = Family::small_cnn;
    LayerKind layer_kind = LayerKind::conv;
    Replacement replacement = Replacement::all;
    bool replace_first = false;  // alternating phase: replace positions 1,3,5,... instead of 2,4,6,...
    std::size_t kernel_size = 3;
    bool batchnorm = false;
    bool input_scale = false;
    std::vector<LayerKind> body;

    bool operator==(const ArchitectureSpec&) const = default;
};

namespace plans {
inline constexpr std::size_t kInputChannels = 1;
inline constexpr std::size_t kInputExtent = 28;
inline constexpr std::size_t kClasses = 10;
inline constexpr std::size_t kHiddenUnits = 64;
inline constexpr std::size_t kSmallConv[3] = {33, 33, 8};
inline constexpr std::size_t kSmallWm[3] = {32, 32, 8};
inline constexpr std::size_t kSmallWide[3] = {200, 500, 8};
inline constexpr std::size_t kResStageChannels[4] = {8, 16, 32, 64};
inline constexpr std::size_t kResStageBlocks[4] = {3, 4, 6, 4};
inline constexpr std::size_t kDenseStem = 16;
inline constexpr std::size_t kDenseGrowth = 8;
inline constexpr std::size_t kDenseStageLayers[4] = {2, 4, 8, 16};
}  // namespace plans

/// Number of replaceable (body) layers of a family; stems and projections excluded.
inline std::size_t body_layer_count(Family f) {
    switch (f) {
        case Family::small_cnn:
        case Family::small_cnn_wide: return 3;
        case Family::resnet: {
            std::size_t n = 0;
            for (std::size_t b : plans::kResStageBlocks) n += 2 * b;
            return n;
        }
        case Family::densenet: {
            std::size_t n = 0;
            for (std::size_t l : plans::kDenseStageLayers) n += l;
            return n;
        }
    }
    return 0;
}

/// Resolves the per-position body kinds for `rule`. A function of positions
/// only, so applying the same rule twice gives the same spec.
inline ArchitectureSpec apply_replacement(ArchitectureSpec spec, Replacement rule) {
    spec.replacement = rule;
    const std::size_t n = body_layer_count(spec.family);
    spec.body.assign(n, LayerKind::conv);
    for (std::size_t i = 0; i < n; ++i) {
        bool replaced = false;
        switch (rule) {
            case Replacement::none: replaced = false; break;
            case Replacement::all: replaced = true; break;
            case Replacement::alternating: replaced = (i % 2 == 1) != spec.replace_first; break;
        }
        if (replaced) spec.body[i] = spec.layer_kind;
    }
    return spec;
}

inline void validate(const ArchitectureSpec& spec) {
    auto fail = [](const std::string& what) { throw std::invalid_argument("architecture spec: " + what); };
    if (spec.kernel_size != 3 && spec.kernel_size != 9) fail("kernel_size must be 3 or 9");
    const bool small = spec.family == Family::small_cnn || spec.family == Family::small_cnn_wide;
    if (small && spec.replacement == Replacement::alternating) fail("alternating replacement needs resnet or densenet");
    if (spec.family == Family::small_cnn_wide && spec.replacement != Replacement::none &&
        is_weight_map(spec.layer_kind)) {
        fail("the wide plan is only defined for convolutional layers");
    }
    if (!spec.body.empty()) {
        if (spec.body.size() != body_layer_count(spec.family)) {
            fail("body has " + std::to_string(spec.body.size()) + " entries, family needs " +
                 std::to_string(body_layer_count(spec.family)));
        }
        if (small) {
            for (LayerKind k : spec.body)
                if (k != spec.body.front()) fail("small CNN body layers must share one kind");
        }
        if (spec.family == Family::small_cnn_wide) {
            for (LayerKind k : spec.body)
                if (is_weight_map(k)) fail("the wide plan is only defined for convolutional layers");
        }
    }
}

inline std::vector<LayerKind> resolved_body(const ArchitectureSpec& spec) {
    return spec.body.empty() ? apply_replacement(spec, spec.replacement).body : spec.body;
}

/// key=value lines, one per field; used in checkpoint manifests.
inline std::string to_config_string(const ArchitectureSpec& spec) {
    std::ostringstream os;
    os << "family=" << to_string(spec.family) << '\n'
       << "layer_kind=" << to_string(spec.layer_kind) << '\n'
       << "replacement=" << to_string(spec.replacement) << '\n'
       << "replace_first=" << (spec.replace_first ? 1 : 0) << '\n'
       << "kernel_size=" << spec.kernel_size << '\n'
       << "batchnorm=" << (spec.batchnorm ? 1 : 0) << '\n'
       << "input_scale=" << (spec.input_scale ? 1 : 0) << '\n'
       << "body=";
    const auto body = resolved_body(spec);
    for (std::size_t i = 0; i < body.size(); ++i) os << (i ? "," : "") << to_string(body[i]);
    os << '\n';
    return os.str();
}

inline ArchitectureSpec parse_config_string(const std::string& text) {
    ArchitectureSpec spec;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("architecture spec: malformed line '" + line + "'");
        const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (key == "family") spec.family = parse_family(value);
        else if (key == "layer_kind") spec.layer_kind = parse_layer_kind(value);
        else if (key == "replacement") spec.replacement = parse_replacement(value);
        else if (key == "replace_first") spec.replace_first = value == "1";
        else if (key == "kernel_size") spec.kernel_size = std::stoul(value);
        else if (key == "batchnorm") spec.batchnorm = value == "1";
        else if (key == "input_scale") spec.input_scale = value == "1";
        else if (key == "body") {
            spec.body.clear();
            std::istringstream items(value);
            std::string item;
            while (std::getline(items, item, ',')) spec.body.push_back(parse_layer_kind(item));
        } else {
            throw std::invalid_argument("architecture spec: unknown key '" + key + "'");
        }
    }
    validate(spec);
    return spec;
}

// ---------------------------------------------------------------------------

enum class NodeOp { layer, add, concat };

/// Layer graph with residual sums and channel concatenations.
///
/// Nodes are stored in topological order; input index -1 denotes the model
/// input. The last node produces the [N,10] logits.
template <typename T>
class Model {
public:
    struct Node {
        std::string name;
        NodeOp op = NodeOp::layer;
        std::unique_ptr<Layer<T>> layer;
        std::vector<int> inputs;
        Shape shape;  // per-sample output shape
    };

    explicit Model(Shape input_shape) : input_shape_(std::move(input_shape)) {}

    Model(const Model& other)
        : input_shape_(other.input_shape_), spec_(other.spec_), feature_node_(other.feature_node_) {
        for (const Node& n : other.nodes_) {
            Node copy{n.name, n.op, n.layer ? n.layer->clone() : nullptr, n.inputs, n.shape};
            nodes_.push_back(std::move(copy));
        }
    }
    Model& operator=(const Model& other) {
        if (this != &other) {
            Model tmp(other);
            *this = std::move(tmp);
        }
        return *this;
    }
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;

    // -- construction ------------------------------------------------------

    int add_layer(std::string name, std::unique_ptr<Layer<T>> layer, int input) {
        Shape out = layer->output_shape(shape_of(input));
        nodes_.push_back({std::move(name), NodeOp::layer, std::move(layer), {input}, std::move(out)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int add_sum(std::string name, int a, int b) {
        if (shape_of(a) != shape_of(b)) {
            throw std::invalid_argument("residual sum '" + name + "': " + shape_string(shape_of(a)) + " vs " +
                                        shape_string(shape_of(b)));
        }
        nodes_.push_back({std::move(name), NodeOp::add, nullptr, {a, b}, shape_of(a)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int add_concat(std::string name, std::vector<int> inputs) {
        Shape out = shape_of(inputs.front());
        out[0] = 0;
        for (int i : inputs) {
            const Shape& s = shape_of(i);
            if (s.size() != out.size() || !std::equal(s.begin() + 1, s.end(), out.begin() + 1)) {
                throw std::invalid_argument("concat '" + name + "': spatial extents differ");
            }
            out[0] += s[0];
        }
        nodes_.push_back({std::move(name), NodeOp::concat, nullptr, std::move(inputs), std::move(out)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    void set_feature_node(int node) { feature_node_ = node; }
    void set_spec(ArchitectureSpec spec) { spec_ = std::move(spec); }

    // -- queries -----------------------------------------------------------

    const Shape& input_shape() const { return input_shape_; }
    const Shape& shape_of(int node) const { return node < 0 ? input_shape_ : nodes_.at(node).shape; }
    const std::vector<Node>& nodes() const { return nodes_; }
    std::vector<Node>& nodes() { return nodes_; }
    int feature_node() const { return feature_node_; }
    const ArchitectureSpec& spec() const { return spec_; }
    const Shape& output_shape() const { return nodes_.back().shape; }

    std::vector<Param<T>*> params() {
        std::vector<Param<T>*> out;
        for (Node& n : nodes_) {
            if (!n.layer) continue;
            for (auto* p : n.layer->params()) out.push_back(p);
        }
        return out;
    }

    /// Parameters and buffers with qualified names (node.param), in manifest order.
    std::vector<std::pair<std::string, Tensor<T>*>> named_tensors(bool include_buffers = true) {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (Node& n : nodes_) {
            if (!n.layer) continue;
            for (auto* p : n.layer->params()) out.emplace_back(n.name + "." + p->name, &p->value);
            if (include_buffers)
                for (auto& [name, t] : n.layer->buffers()) out.emplace_back(n.name + "." + name, t);
        }
        return out;
    }

    std::vector<std::pair<std::string, Param<T>*>> named_params() {
        std::vector<std::pair<std::string, Param<T>*>> out;
        for (Node& n : nodes_) {
            if (!n.layer) continue;
            for (auto* p : n.layer->params()) out.emplace_back(n.name + "." + p->name, p);
        }
        return out;
    }

    std::uint64_t param_count() {
        std::uint64_t total = 0;
        for (auto* p : params()) total += p->value.size();
        return total;
    }

    void zero_grad() {
        for (auto* p : params()) p->grad.fill(T{0});
    }

    // -- execution ---------------------------------------------------------

    /// x: [N, input_shape...] -> logits [N,10]. All node outputs are retained.
    Tensor<T> forward(const Tensor<T>& x, Mode mode) { return run(x, mode, -1, nullptr); }

    /// Forward pass with the output of `node` replaced by `value` (batched).
    Tensor<T> forward_with_override(const Tensor<T>& x, Mode mode, int node, const Tensor<T>& value) {
        return run(x, mode, node, &value);
    }

    /// Backpropagates d(loss)/d(logits); accumulates parameter gradients and
    /// returns the gradient w.r.t. the model input.
    Tensor<T> backward(const Tensor<T>& grad_logits) {
        if (outputs_.size() != nodes_.size()) throw std::logic_error("model: backward called before forward");
        grads_.assign(nodes_.size(), Tensor<T>());
        grads_.back() = grad_logits;
        Tensor<T> grad_input;
        auto accumulate = [&](int target, Tensor<T> g) {
            Tensor<T>& slot = target < 0 ? grad_input : grads_[target];
            if (slot.empty()) {
                slot = std::move(g);
            } else {
                for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
            }
        };
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            if (grads_[i].empty()) continue;
            Node& node = nodes_[i];
            switch (node.op) {
                case NodeOp::layer: accumulate(node.inputs[0], node.layer->backward(grads_[i])); break;
                case NodeOp::add:
                    accumulate(node.inputs[0], grads_[i]);
                    accumulate(node.inputs[1], grads_[i]);
                    break;
                case NodeOp::concat: {
                    const Tensor<T>& g = grads_[i];
                    const std::size_t n = g.extent(0), total = g.size() / n;
                    std::size_t offset = 0;
                    for (int src : node.inputs) {
                        const std::size_t part = shape_numel(shape_of(src));
                        Tensor<T> piece(batched(n, shape_of(src)));
                        for (std::size_t s = 0; s < n; ++s)
                            std::copy_n(g.ptr() + s * total + offset, part, piece.ptr() + s * part);
                        accumulate(src, std::move(piece));
                        offset += part;
                    }
                    break;
                }
            }
        }
        if (grad_input.empty()) grad_input = Tensor<T>(batched(grad_logits.extent(0), input_shape_));
        return grad_input;
    }

    const Tensor<T>& node_output(int node) const { return outputs_.at(node); }
    /// Gradient reaching `node` in the last backward pass (empty if none).
    const Tensor<T>& node_grad(int node) const { return grads_.at(node); }

private:
    static Shape batched(std::size_t n, const Shape& inner) {
        Shape s{n};
        s.insert(s.end(), inner.begin(), inner.end());
        return s;
    }

    Tensor<T> run(const Tensor<T>& x, Mode mode, int override_node, const Tensor<T>* override_value) {
        if (x.rank() != input_shape_.size() + 1 || !std::equal(input_shape_.begin(), input_shape_.end(), x.shape().begin() + 1)) {
            throw std::invalid_argument("model: input " + shape_string(x.shape()) + " does not match " +
                                        shape_string(input_shape_));
        }
        const std::size_t n = x.extent(0);
        outputs_.assign(nodes_.size(), Tensor<T>());
        auto input_of = [&](int idx) -> const Tensor<T>& { return idx < 0 ? x : outputs_[idx]; };
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            Node& node = nodes_[i];
            switch (node.op) {
                case NodeOp::layer: outputs_[i] = node.layer->forward(input_of(node.inputs[0]), mode); break;
                case NodeOp::add: {
                    Tensor<T> sum = input_of(node.inputs[0]);
                    const Tensor<T>& other = input_of(node.inputs[1]);
                    for (std::size_t q = 0; q < sum.size(); ++q) sum[q] += other[q];
                    outputs_[i] = std::move(sum);
                    break;
                }
                case NodeOp::concat: {
                    Tensor<T> out(batched(n, node.shape));
                    const std::size_t total = shape_numel(node.shape);
                    std::size_t offset = 0;
                    for (int src : node.inputs) {
                        const std::size_t part = shape_numel(shape_of(src));
                        const Tensor<T>& in = input_of(src);
                        for (std::size_t s = 0; s < n; ++s)
                            std::copy_n(in.ptr() + s * part, part, out.ptr() + s * total + offset);
                        offset += part;
                    }
                    outputs_[i] = std::move(out);
                    break;
                }
            }
            if (static_cast<int>(i) == override_node) {
                if (override_value->shape() != outputs_[i].shape()) {
                    throw std::invalid_argument("model: override " + shape_string(override_value->shape()) +
                                                " does not match node output " + shape_string(outputs_[i].shape()));
                }
                outputs_[i] = *override_value;
            }
        }
        return outputs_.back();
    }

    Shape input_shape_;
    std::vector<Node> nodes_;
    ArchitectureSpec spec_;
    int feature_node_ = -1;
    std::vector<Tensor<T>> outputs_;
    std::vector<Tensor<T>> grads_;
};

// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
class ModelBuilder {
public:
    ModelBuilder(const ArchitectureSpec& spec, std::uint64_t seed)
        : spec_(spec), body_(resolved_body(spec)), rng_(seed), model_({plans::kInputChannels, plans::kInputExtent, plans::kInputExtent}) {}

    Model<T> build() {
        int x = -1;
        if (spec_.input_scale) {
            InputScaleParams<T> p{Tensor<T>(model_.input_shape(), T{1})};
            x = model_.add_layer("input_scale", std::make_unique<InputScaleLayer<T>>(std::move(p)), x);
        }
        switch (spec_.family) {
            case Family::small_cnn:
            case Family::small_cnn_wide: x = small_cnn(x); break;
            case Family::resnet: x = resnet(x); break;
            case Family::densenet: x = densenet(x); break;
        }
        (void)x;
        model_.set_spec(spec_);
        return std::move(model_);
    }

private:
    /// One parametric layer (conv or WM) plus optional batchnorm; no activation.
    int parametric(const std::string& name, LayerKind kind, int input, std::size_t out_channels, std::size_t kernel,
                   std::size_t stride) {
        const Shape& in = model_.shape_of(input);
        int node;
        if (kind == LayerKind::conv) {
            node = model_.add_layer(name + ".conv",
                                    std::make_unique<ConvLayer<T>>(make_conv_params<T>(
                                        in[0], out_channels, kernel, stride, kernel / 2, rng_)),
                                    input);
        } else {
            if (in[1] != in[2]) throw std::invalid_argument("weight map layer needs square input");
            const WmVariant v = kind == LayerKind::wm_smoothing ? WmVariant::smoothing : WmVariant::unsharp;
            node = model_.add_layer(
                name + ".wm",
                std::make_unique<WeightMapLayer<T>>(make_weight_map_params<T>(in[0], out_channels, in[1], v, kernel, stride, rng_)),
                input);
        }
        if (spec_.batchnorm) {
            node = model_.add_layer(name + ".bn",
                                    std::make_unique<BatchNormLayer<T>>(BatchNormParams<T>(out_channels)), node);
        }
        return node;
    }

    int relu(const std::string& name, int input) {
        return model_.add_layer(name + ".relu", std::make_unique<ReluLayer<T>>(), input);
    }

    int fc(const std::string& name, int input, std::size_t out) {
        const std::size_t in = shape_numel(model_.shape_of(input));
        return model_.add_layer(name, std::make_unique<FullyConnectedLayer<T>>(FullyConnectedLayer<T>::make(in, out, rng_)), input);
    }

    int small_cnn(int x) {
        const bool wide = spec_.family == Family::small_cnn_wide;
        const bool wm = is_weight_map(body_.front());
        const std::size_t* plan = wide ? plans::kSmallWide : (wm ? plans::kSmallWm : plans::kSmallConv);
        for (std::size_t i = 0; i < 3; ++i) {
            const std::string name = "body." + std::to_string(i);
            x = relu(name, parametric(name, body_[i], x, plan[i], spec_.kernel_size, 1));
        }
        model_.set_feature_node(x);
        x = model_.add_layer("head.flatten", std::make_unique<FlattenLayer<T>>(), x);
        x = relu("head.fc1", fc("head.fc1", x, plans::kHiddenUnits));
        return fc("head.fc2", x, plans::kClasses);
    }

    int resnet(int x) {
        std::size_t pos = 0;
        for (std::size_t stage = 0; stage < 4; ++stage) {
            const std::size_t channels = plans::kResStageChannels[stage];
            for (std::size_t block = 0; block < plans::kResStageBlocks[stage]; ++block) {
                const std::string name = "stage" + std::to_string(stage) + ".block" + std::to_string(block);
                const std::size_t stride = (stage > 0 && block == 0) ? 2 : 1;
                const std::size_t in_channels = model_.shape_of(x)[0];
                int h = relu(name + ".l0", parametric(name + ".l0", body_[pos], x, channels, spec_.kernel_size, stride));
                h = parametric(name + ".l1", body_[pos + 1], h, channels, spec_.kernel_size, 1);
                pos += 2;
                int shortcut = x;
                if (in_channels != channels || stride != 1) {
                    shortcut = model_.add_layer(name + ".proj",
                                                std::make_unique<ConvLayer<T>>(make_conv_params<T>(
                                                    in_channels, channels, 1, stride, 0, rng_)),
                                                x);
                }
                x = relu(name, model_.add_sum(name + ".sum", h, shortcut));
            }
        }
        model_.set_feature_node(x);
        x = model_.add_layer("head.gap", std::make_unique<GlobalAvgPoolLayer<T>>(), x);
        return fc("head.fc", x, plans::kClasses);
    }

    int densenet(int x) {
        const std::size_t k = spec_.kernel_size;
        x = relu("stem", model_.add_layer("stem.conv",
                                          std::make_unique<ConvLayer<T>>(make_conv_params<T>(
                                              model_.shape_of(x)[0], plans::kDenseStem, k, 1, k / 2, rng_)),
                                          x));
        std::size_t pos = 0;
        for (std::size_t stage = 0; stage < 4; ++stage) {
            if (stage > 0) {
                x = model_.add_layer("pool" + std::to_string(stage), std::make_unique<MaxPoolLayer<T>>(2, 2), x);
            }
            for (std::size_t l = 0; l < plans::kDenseStageLayers[stage]; ++l) {
                const std::string name = "stage" + std::to_string(stage) + ".dense" + std::to_string(l);
                const int fresh = relu(name, parametric(name, body_[pos++], x, plans::kDenseGrowth, k, 1));
                x = model_.add_concat(name + ".concat", {x, fresh});
            }
        }
        model_.set_feature_node(x);
        x = model_.add_layer("head.gap", std::make_unique<GlobalAvgPoolLayer<T>>(), x);
        return fc("head.fc", x, plans::kClasses);
    }

    ArchitectureSpec spec_;
    std::vector<LayerKind> body_;
    std::mt19937_64 rng_;
    Model<T> model_;
};

}  // namespace detail

/// Deterministic construction: the same (spec, seed) yields bitwise-identical
/// initial parameters.
template <typename T>
Model<T> build_model(const ArchitectureSpec& spec, std::uint64_t seed) {
    validate(spec);
    ArchitectureSpec resolved = spec;
    resolved.body = resolved_body(spec);
    return detail::ModelBuilder<T>(resolved, seed).build();
}

// ---------------------------------------------------------------------------

struct LayerAccount {
    std::string name;
    std::string kind;
    Shape input;
    Shape output;
    std::uint64_t params = 0;
    std::uint64_t flops = 0;
};

struct AccountingReport {
    std::vector<LayerAccount> layers;
    std::uint64_t total_params = 0;
    std::uint64_t total_flops = 0;
};

/// Closed-form learnable scalar count of a weight-map layer.
inline std::uint64_t wm_param_formula(std::uint64_t in_channels, std::uint64_t out_channels, std::uint64_t in_extent,
                                      std::uint64_t out_extent) {
    return in_channels * out_channels * in_extent * in_extent + out_channels * out_extent * out_extent;
}

/// Learnable parameters and per-layer FLOPs for one input forward pass
/// (a multiply-add counts as 2). Weight-map layers are costed as written:
/// the elementwise map plus an all-ones correlation of every channel pair.
template <typename T>
AccountingReport count_params_flops(Model<T>& model) {
    AccountingReport report;
    for (auto& node : model.nodes()) {
        LayerAccount row;
        row.name = node.name;
        row.input = model.shape_of(node.inputs.front());
        row.output = node.shape;
        switch (node.op) {
            case NodeOp::layer:
                row.kind = node.layer->kind();
                row.params = node.layer->param_count();
                row.flops = node.layer->flops(row.input);
                break;
            case NodeOp::add:
                row.kind = "add";
                row.flops = shape_numel(node.shape);
                break;
            case NodeOp::concat: row.kind = "concat"; break;
        }
        report.total_params += row.params;
        report.total_flops += row.flops;
        report.layers.push_back(std::move(row));
    }
    return report;
}

}  // namespace wmnet
