#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "l2sm/bounds.hpp"
#include "l2sm/config.hpp"
#include "l2sm/layers.hpp"

namespace l2sm {

/// One trunk layer: "conv:F:K[:stride[:pad]]", "prelu", "maxpool:W[:stride]", "flatten", "dense:N".
struct LayerSpec {
  std::string kind;
  std::vector<std::size_t> args;

  static LayerSpec parse(const std::string& text) {
    const auto parts = Config::split_list(text, ':');
    if (parts.empty()) throw ConfigError("empty layer spec");
    LayerSpec s{parts[0], {}};
    for (std::size_t i = 1; i < parts.size(); ++i) {
      char* end = nullptr;
      const long long v = std::strtoll(parts[i].c_str(), &end, 10);
      const bool zero_ok = parts[0] == "conv" && i == 4;
      if (*end != '\0' || v < 0 || (v == 0 && !zero_ok)) {
        throw ConfigError("layer spec '" + text + "': bad argument '" + parts[i] + "'");
      }
      s.args.push_back(static_cast<std::size_t>(v));
    }
    auto arity = [&](std::size_t lo, std::size_t hi) {
      if (s.args.size() < lo || s.args.size() > hi) {
        throw ConfigError("layer spec '" + text + "': wrong number of arguments");
      }
    };
    if (s.kind == "conv") {
      arity(2, 4);
    } else if (s.kind == "maxpool") {
      arity(1, 2);
    } else if (s.kind == "dense") {
      arity(1, 1);
    } else if (s.kind == "prelu" || s.kind == "flatten") {
      arity(0, 0);
    } else {
      throw ConfigError("unknown layer kind '" + s.kind + "'");
    }
    return s;
  }

  std::string str() const {
    std::string out = kind;
    for (auto a : args) out += ":" + std::to_string(a);
    return out;
  }

  bool operator==(const LayerSpec&) const = default;
};

enum class Head { PlainSoftmax, L2Softmax };
enum class AlphaMode : std::uint8_t { None = 0, Fixed = 1, Trainable = 2 };

/**
 * Layer stack ending in the feature layer (output size feature_dim), then the
 * head: optionally L2-normalize + scale, then a dense classifier over C classes.
 */
struct NetworkConfig {
  Shape input_shape{1, 28, 28};
  std::vector<LayerSpec> layers;
  std::size_t feature_dim = 2;
  Head head = Head::PlainSoftmax;
  AlphaMode alpha_mode = AlphaMode::None;
  double alpha = 0.0;  // fixed value or trainable initial value; 0 selects the p = 0.9 lower bound
  std::size_t num_classes = 10;
  bool classifier_bias = true;

  /// Alpha actually used at construction time.
  double initial_alpha() const {
    if (alpha > 0.0) return alpha;
    if (num_classes < 3) throw ConfigError("alpha = auto needs at least 3 classes");
    return alpha_lower_bound(num_classes, 0.9);
  }

  static NetworkConfig from_config(const Config& cfg, const std::string& section = "network") {
    cfg.require_known(section, {"input", "layers", "feature_dim", "head", "alpha_mode", "alpha", "num_classes",
                                "classifier_bias"});
    NetworkConfig n;
    if (cfg.has(section, "input")) {
      n.input_shape.clear();
      for (const auto& e : Config::split_list(cfg.get(section, "input"), 'x')) {
        n.input_shape.push_back(static_cast<std::size_t>(cfg.to_int(e, section, "input")));
      }
      if (n.input_shape.size() != 3 && n.input_shape.size() != 1) {
        throw ConfigError("[network] input must be CxHxW or D");
      }
    }
    for (const auto& l : Config::split_list(cfg.get(section, "layers"))) n.layers.push_back(LayerSpec::parse(l));
    n.feature_dim = static_cast<std::size_t>(cfg.get_int(section, "feature_dim"));
    n.num_classes = static_cast<std::size_t>(cfg.get_int(section, "num_classes"));
    n.classifier_bias = cfg.get_bool(section, "classifier_bias", true);
    const auto head = cfg.get(section, "head");
    if (head == "softmax") {
      n.head = Head::PlainSoftmax;
    } else if (head == "l2-softmax") {
      n.head = Head::L2Softmax;
      const auto mode = cfg.get_or(section, "alpha_mode", "fixed");
      if (mode == "fixed") {
        n.alpha_mode = AlphaMode::Fixed;
      } else if (mode == "trainable") {
        n.alpha_mode = AlphaMode::Trainable;
      } else {
        throw ConfigError("[network] alpha_mode must be fixed or trainable");
      }
      const auto a = cfg.get_or(section, "alpha", "auto");
      n.alpha = a == "auto" ? 0.0 : cfg.to_double(a, section, "alpha");
      if (n.alpha < 0.0) throw ConfigError("[network] alpha must be positive");
    } else {
      throw ConfigError("[network] head must be softmax or l2-softmax, got '" + head + "'");
    }
    if (n.num_classes < 2) throw ConfigError("[network] num_classes must be >= 2");
    if (n.feature_dim == 0) throw ConfigError("[network] feature_dim must be >= 1");
    n.initial_alpha();
    return n;
  }

  /// Round-trips through from_config().
  std::string serialize() const {
    std::ostringstream os;
    os << "[network]\ninput = ";
    for (std::size_t i = 0; i < input_shape.size(); ++i) os << (i ? "x" : "") << input_shape[i];
    os << "\nlayers = ";
    for (std::size_t i = 0; i < layers.size(); ++i) os << (i ? ", " : "") << layers[i].str();
    os << "\nfeature_dim = " << feature_dim << "\nnum_classes = " << num_classes
       << "\nclassifier_bias = " << (classifier_bias ? "true" : "false") << "\nhead = "
       << (head == Head::L2Softmax ? "l2-softmax" : "softmax") << '\n';
    if (head == Head::L2Softmax) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", alpha);
      os << "alpha_mode = " << (alpha_mode == AlphaMode::Trainable ? "trainable" : "fixed") << "\nalpha = "
         << (alpha > 0.0 ? std::string(buf) : std::string("auto")) << '\n';
    }
    return os.str();
  }
};

class Network {
 public:
  Network(NetworkConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    Shape shape = cfg_.input_shape;
    for (std::size_t i = 0; i < cfg_.layers.size(); ++i) {
      const auto& s = cfg_.layers[i];
      const std::string name = "L" + std::to_string(i) + "." + s.kind;
      std::unique_ptr<Layer> layer;
      if (s.kind == "conv") {
        if (shape.size() != 3) throw ConfigError(name + ": conv needs a CxHxW input, got " + shape_str(shape));
        const std::size_t stride = s.args.size() > 2 ? s.args[2] : 1;
        const std::size_t pad = s.args.size() > 3 ? s.args[3] : 0;
        layer = std::make_unique<ConvLayer>(shape[0], s.args[0], s.args[1], stride, pad, rng, name);
      } else if (s.kind == "maxpool") {
        layer = std::make_unique<MaxPoolLayer>(s.args[0], s.args.size() > 1 ? s.args[1] : s.args[0]);
      } else if (s.kind == "dense") {
        if (shape.size() != 1) throw ConfigError(name + ": dense needs a flat input; add flatten");
        layer = std::make_unique<DenseLayer>(shape[0], s.args[0], true, rng, name);
      } else if (s.kind == "prelu") {
        layer = std::make_unique<PReLULayer>(shape.at(0), name);
      } else {
        layer = std::make_unique<FlattenLayer>();
      }
      try {
        shape = layer->output_shape(shape);
      } catch (const ShapeError& e) {
        throw ConfigError(name + ": " + e.what());
      }
      trunk_.push_back(std::move(layer));
    }
    if (shape != Shape{cfg_.feature_dim}) {
      throw ConfigError("feature layer output " + shape_str(shape) + " does not match feature_dim " +
                        std::to_string(cfg_.feature_dim));
    }
    if (cfg_.head == Head::L2Softmax) {
      normalize_ = std::make_unique<L2NormalizeLayer>();
      scale_ = std::make_unique<ScaleLayer>(cfg_.initial_alpha(), cfg_.alpha_mode == AlphaMode::Trainable);
    }
    classifier_ = std::make_unique<DenseLayer>(cfg_.feature_dim, cfg_.num_classes, cfg_.classifier_bias, rng,
                                               "classifier");
  }

  /// Penultimate-layer descriptors f(x), before any normalisation.
  Tensor features(const Tensor& x) {
    Tensor h = x;
    for (auto& l : trunk_) h = l->forward(h);
    return h;
  }

  /// Full forward pass; caches everything backward() needs.
  Tensor logits(const Tensor& x) {
    Tensor h = features(x);
    if (normalize_) {
      h = scale_->forward(normalize_->forward(h));
      double worst = 0.0;
      for (std::size_t m = 0; m < h.extent(0); ++m) worst = std::max(worst, std::abs(l2_norm(h.row(m)) - scale_->alpha()));
      last_constraint_error_ = worst;
    }
    return classifier_->forward(h);
  }

  /// Gradient with respect to the input batch; parameter gradients accumulate.
  Tensor backward(const Tensor& grad_logits) {
    Tensor g = classifier_->backward(grad_logits);
    if (normalize_) g = normalize_->backward(scale_->backward(g));
    for (auto it = trunk_.rbegin(); it != trunk_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : trunk_) {
      for (auto* p : l->parameters()) out.push_back(p);
    }
    if (scale_) out.push_back(&scale_->alpha_param());
    for (auto* p : classifier_->parameters()) out.push_back(p);
    return out;
  }

  Parameter* find_parameter(const std::string& name) {
    for (auto* p : parameters()) {
      if (p->name == name) return p;
    }
    return nullptr;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  void after_update() {
    for (auto& l : trunk_) l->after_update();
    if (scale_) scale_->after_update();
    classifier_->after_update();
  }

  const NetworkConfig& config() const { return cfg_; }
  ScaleLayer* scale() { return scale_.get(); }
  DenseLayer& classifier() { return *classifier_; }
  std::vector<std::unique_ptr<Layer>>& trunk() { return trunk_; }

  /// Current alpha, or 0 for the plain softmax head.
  double alpha() const { return scale_ ? scale_->alpha() : 0.0; }

  /// max_i | ||z_i|| - alpha | over the last forward batch (L2-softmax head only).
  double last_constraint_error() const { return last_constraint_error_; }

 private:
  NetworkConfig cfg_;
  std::vector<std::unique_ptr<Layer>> trunk_;
  std::unique_ptr<L2NormalizeLayer> normalize_;
  std::unique_ptr<ScaleLayer> scale_;
  std::unique_ptr<DenseLayer> classifier_;
  double last_constraint_error_ = 0.0;
};

}  // namespace l2sm
