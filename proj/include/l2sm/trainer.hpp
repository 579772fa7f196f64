#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "l2sm/config.hpp"
#include "l2sm/data_io.hpp"
#include "l2sm/loss.hpp"
#include "l2sm/network.hpp"

namespace l2sm {

struct LrStep {
  std::size_t iteration;
  double multiplier;  // applied cumulatively from this iteration on
};

struct TrainConfig {
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<LrStep> lr_schedule{{4000, 0.1}, {5000, 0.1}};
  std::size_t batch_size = 128;
  std::size_t max_iters = 6000;
  std::uint64_t seed = 1;
  std::size_t log_every = 100;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("[train] base_lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("[train] momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("[train] weight_decay must be >= 0");
    if (batch_size == 0) throw ConfigError("[train] batch_size must be >= 1");
    if (log_every == 0) throw ConfigError("[train] log_every must be >= 1");
    for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
      if (!(lr_schedule[i].multiplier > 0.0 && lr_schedule[i].multiplier <= 1.0)) {
        throw ConfigError("[train] lr_schedule multipliers must lie in (0, 1]");
      }
      if (i > 0 && lr_schedule[i].iteration <= lr_schedule[i - 1].iteration) {
        throw ConfigError("[train] lr_schedule iterations must be strictly increasing");
      }
    }
  }

  double lr_at(std::size_t iteration) const {
    double lr = base_lr;
    for (const auto& s : lr_schedule) {
      if (iteration >= s.iteration) lr *= s.multiplier;
    }
    return lr;
  }

  static TrainConfig from_config(const Config& cfg, const std::string& section = "train") {
    cfg.require_known(section, {"base_lr", "momentum", "weight_decay", "lr_schedule", "batch_size", "max_iters",
                                "seed", "log_every", "checkpoint_every"});
    TrainConfig t;
    t.base_lr = cfg.get_double(section, "base_lr", t.base_lr);
    t.momentum = cfg.get_double(section, "momentum", t.momentum);
    t.weight_decay = cfg.get_double(section, "weight_decay", t.weight_decay);
    auto count = [&](const char* key, std::size_t fallback) {
      const long long v = cfg.get_int(section, key, static_cast<long long>(fallback));
      if (v < 0) throw ConfigError(std::string("[train] ") + key + " must be non-negative");
      return static_cast<std::size_t>(v);
    };
    t.batch_size = count("batch_size", t.batch_size);
    t.max_iters = count("max_iters", t.max_iters);
    t.seed = static_cast<std::uint64_t>(count("seed", t.seed));
    t.log_every = count("log_every", t.log_every);
    t.checkpoint_every = count("checkpoint_every", t.checkpoint_every);
    if (cfg.has(section, "lr_schedule")) {
      t.lr_schedule.clear();
      for (const auto& item : Config::split_list(cfg.get(section, "lr_schedule"))) {
        const auto parts = Config::split_list(item, ':');
        if (parts.size() != 2) throw ConfigError("[train] lr_schedule entries are iteration:multiplier");
        t.lr_schedule.push_back({static_cast<std::size_t>(cfg.to_int(parts[0], section, "lr_schedule")),
                                 cfg.to_double(parts[1], section, "lr_schedule")});
      }
    }
    t.validate();
    return t;
  }
};

/**
 * Momentum SGD with per-parameter multipliers:
 *   v <- momentum * v - lr * lr_mult * (g + weight_decay * decay_mult * w)
 *   w <- w + v
 * Parameters with lr_mult == 0 are left untouched.
 */
inline void sgd_step(Parameter& p, Tensor& velocity, double lr, double momentum, double weight_decay) {
  require_same_shape(p.value, p.grad, "sgd_step");
  require_same_shape(p.value, velocity, "sgd_step velocity");
  if (p.lr_mult == 0.0) return;
  const double step = lr * p.lr_mult;
  const double decay = weight_decay * p.decay_mult;
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    velocity[i] = momentum * velocity[i] - step * (p.grad[i] + decay * p.value[i]);
    p.value[i] += velocity[i];
  }
}

/// Sample index at position `slot` of iteration `iteration`: a pure function of
/// (seed, iteration, slot) walking a fresh permutation of the data each epoch.
class EpochSampler {
 public:
  EpochSampler(std::uint64_t seed, std::size_t dataset_size) : seed_(seed), n_(dataset_size) {
    if (n_ == 0) throw InvalidArgument("cannot sample from an empty dataset");
  }

  std::vector<std::size_t> batch(std::size_t iteration, std::size_t batch_size) {
    std::vector<std::size_t> idx(batch_size);
    const std::size_t start = iteration * batch_size;
    for (std::size_t k = 0; k < batch_size; ++k) {
      const std::size_t pos = start + k;
      const std::size_t epoch = pos / n_;
      if (!cached_epoch_ || *cached_epoch_ != epoch) {
        Rng r(mix_seed(seed_ ^ mix_seed(epoch + 1)));
        perm_ = r.permutation(n_);
        cached_epoch_ = epoch;
      }
      idx[k] = perm_[pos % n_];
    }
    return idx;
  }

 private:
  std::uint64_t seed_;
  std::size_t n_;
  std::optional<std::size_t> cached_epoch_;
  std::vector<std::size_t> perm_;
};

/// Copies the given rows (first axis) of `src` into a new batch tensor.
inline Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& rows) {
  Shape shape = src.shape();
  shape[0] = rows.size();
  Tensor out(shape);
  const std::size_t stride = src.size() / src.extent(0);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::memcpy(out.raw() + k * stride, src.raw() + rows[k] * stride, stride * sizeof(double));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   "L2SM" | u32 version (1) | u64 record count
//   per record: u16 name length, UTF-8 name, u8 rank, u64 extents..., f64 values
//   trailer: u64 iteration | u32 length + RNG state text | u8 alpha mode |
//            u32 length + network description text
// All integers and floats are little-endian.

inline constexpr char kCheckpointMagic[4] = {'L', '2', 'S', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kVelocitySuffix = "@velocity";

struct CheckpointRecord {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::vector<CheckpointRecord> records;
  std::uint64_t iteration = 0;
  std::string rng_state;
  AlphaMode alpha_mode = AlphaMode::None;
  std::string network_config;

  const Tensor* find(const std::string& name) const {
    for (const auto& r : records) {
      if (r.name == name) return &r.value;
    }
    return nullptr;
  }
};

namespace detail {
template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_integral_v<T>);
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(static_cast<std::uint64_t>(v) >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw DataError("checkpoint: unexpected end of file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t{b[i]} << (8 * i);
  return static_cast<T>(v);
}

inline std::string get_bytes(std::istream& is, std::size_t n) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw DataError("checkpoint: unexpected end of file");
  return s;
}
}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint64_t>(os, ck.records.size());
  for (const auto& r : ck.records) {
    if (r.name.size() > 0xffff) throw InvalidArgument("checkpoint: parameter name too long");
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(r.value.rank()));
    for (auto e : r.value.shape()) detail::put_le<std::uint64_t>(os, e);
    for (double v : r.value.data()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  detail::put_le<std::uint64_t>(os, ck.iteration);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.rng_state.size()));
  os.write(ck.rng_state.data(), static_cast<std::streamsize>(ck.rng_state.size()));
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(ck.alpha_mode));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.network_config.size()));
  os.write(ck.network_config.data(), static_cast<std::streamsize>(ck.network_config.size()));
  if (!os) throw DataError("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw DataError("checkpoint: bad magic (expected L2SM)");
  }
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  const auto count = detail::get_le<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    r.name = detail::get_bytes(is, detail::get_le<std::uint16_t>(is));
    const auto rank = detail::get_le<std::uint8_t>(is);
    Shape shape(rank);
    std::size_t total = 1;
    for (auto& e : shape) {
      e = static_cast<std::size_t>(detail::get_le<std::uint64_t>(is));
      if (e == 0 || e > (std::size_t{1} << 40)) throw DataError("checkpoint: bad extent in " + r.name);
      total *= e;
    }
    if (rank == 0 || total > (std::size_t{1} << 32)) throw DataError("checkpoint: bad shape in " + r.name);
    std::vector<double> values(total);
    for (auto& v : values) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
    r.value = Tensor(std::move(shape), std::move(values));
    ck.records.push_back(std::move(r));
  }
  ck.iteration = detail::get_le<std::uint64_t>(is);
  ck.rng_state = detail::get_bytes(is, detail::get_le<std::uint32_t>(is));
  const auto mode = detail::get_le<std::uint8_t>(is);
  if (mode > 2) throw DataError("checkpoint: bad alpha mode byte");
  ck.alpha_mode = static_cast<AlphaMode>(mode);
  ck.network_config = detail::get_bytes(is, detail::get_le<std::uint32_t>(is));
  return ck;
}

inline void save_checkpoint_file(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

/// Copies stored parameter values into a network built from the same config.
inline void load_parameters(Network& net, const Checkpoint& ck) {
  for (auto* p : net.parameters()) {
    const Tensor* v = ck.find(p->name);
    if (!v) throw DataError("checkpoint: missing parameter " + p->name);
    if (v->shape() != p->value.shape()) {
      throw DataError("checkpoint: parameter " + p->name + " has shape " + shape_str(v->shape()) + ", expected " +
                      shape_str(p->value.shape()));
    }
    p->value = *v;
  }
}

inline Network network_from_checkpoint(const Checkpoint& ck) {
  NetworkConfig cfg = NetworkConfig::from_config(Config::parse_string(ck.network_config, "checkpoint"));
  Rng scratch(0);
  Network net(cfg, scratch);
  load_parameters(net, ck);
  return net;
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricsRow {
  std::size_t iter;
  double loss;
  double train_acc;
  double alpha;
  double lr;
};

inline void write_metrics_header(std::ostream& os) { os << "iter,loss,train_acc,alpha,lr\n"; }

inline void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g\n", r.iter, r.loss, r.train_acc, r.alpha, r.lr);
  os << buf;
}

class Trainer {
 public:
  Trainer(NetworkConfig net_cfg, TrainConfig cfg)
      : cfg_((cfg.validate(), std::move(cfg))), rng_(cfg_.seed), net_(std::move(net_cfg), rng_) {
    for (auto* p : net_.parameters()) velocity_.emplace_back(p->value.shape());
  }

  /// Restores network weights, momentum buffers, iteration and RNG state.
  Trainer(const Checkpoint& ck, TrainConfig cfg)
      : Trainer(NetworkConfig::from_config(Config::parse_string(ck.network_config, "checkpoint")), std::move(cfg)) {
    load_parameters(net_, ck);
    auto params = net_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor* v = ck.find(params[i]->name + kVelocitySuffix);
      if (!v) throw DataError("checkpoint: missing momentum buffer for " + params[i]->name);
      if (v->shape() != velocity_[i].shape()) throw DataError("checkpoint: momentum shape mismatch for " + params[i]->name);
      velocity_[i] = *v;
    }
    iteration_ = ck.iteration;
    rng_.set_state(ck.rng_state);
  }

  Checkpoint checkpoint() {
    Checkpoint ck;
    auto params = net_.parameters();
    for (auto* p : params) ck.records.push_back({p->name, p->value});
    for (std::size_t i = 0; i < params.size(); ++i) ck.records.push_back({params[i]->name + kVelocitySuffix, velocity_[i]});
    ck.iteration = iteration_;
    ck.rng_state = rng_.state();
    ck.alpha_mode = net_.config().alpha_mode;
    ck.network_config = net_.config().serialize();
    return ck;
  }

  /// One SGD iteration on the batch scheduled for the current iteration.
  MetricsRow step(const LabeledDataset& data) {
    if (data.size() == 0) throw InvalidArgument("training dataset is empty");
    if (!sampler_) {
      for (std::size_t i = 0; i < data.size(); ++i) {
        if (data.labels[i] >= net_.config().num_classes) {
          throw DataError("label " + std::to_string(data.labels[i]) + " of sample " + std::to_string(i) +
                          " exceeds num_classes " + std::to_string(net_.config().num_classes));
        }
      }
      sampler_.emplace(cfg_.seed, data.size());
    }
    const auto rows = sampler_->batch(iteration_, cfg_.batch_size);
    const Tensor x = gather_rows(data.images, rows);
    std::vector<std::size_t> labels(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) labels[k] = data.labels[rows[k]];

    net_.zero_grad();
    const Tensor logits = net_.logits(x);
    const double loss = loss_.forward(logits, labels);
    if (!std::isfinite(loss)) throw NumericError(nan_diagnostic(loss));
    if (net_.scale()) max_constraint_error_ = std::max(max_constraint_error_, net_.last_constraint_error());
    net_.backward(loss_.backward());

    const double lr = cfg_.lr_at(iteration_);
    MetricsRow row{iteration_, loss, loss_.accuracy(), net_.alpha(), lr};
    auto params = net_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      sgd_step(*params[i], velocity_[i], lr, cfg_.momentum, cfg_.weight_decay);
    }
    net_.after_update();
    ++iteration_;
    return row;
  }

  using Hook = std::function<void(const MetricsRow&, Trainer&)>;

  /**
   * Runs until max_iters. `on_log` sees every logged row (iteration 0, every
   * log_every-th iteration and the last one); `on_checkpoint` fires every
   * checkpoint_every iterations.
   */
  void run(const LabeledDataset& data, const Hook& on_log = {}, const Hook& on_checkpoint = {}) {
    while (iteration_ < cfg_.max_iters) {
      const MetricsRow row = step(data);
      if (row.iter % cfg_.log_every == 0 || iteration_ == cfg_.max_iters) {
        metrics_.push_back(row);
        if (on_log) on_log(row, *this);
      }
      if (on_checkpoint && cfg_.checkpoint_every && iteration_ % cfg_.checkpoint_every == 0) on_checkpoint(row, *this);
    }
  }

  Network& network() { return net_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t iteration() const { return iteration_; }
  bool finished() const { return iteration_ >= cfg_.max_iters; }
  const std::vector<MetricsRow>& metrics() const { return metrics_; }
  /// Worst | ||z|| - alpha | over every training batch so far (L2-softmax head).
  double max_constraint_error() const { return max_constraint_error_; }

 private:
  std::string nan_diagnostic(double loss) {
    std::ostringstream os;
    os << "non-finite loss " << loss << " at iteration " << iteration_ << "; parameter norms:";
    for (auto* p : net_.parameters()) os << ' ' << p->name << '=' << l2_norm(p->value.data());
    return os.str();
  }

  TrainConfig cfg_;
  Rng rng_;
  Network net_;
  std::vector<Tensor> velocity_;
  SoftmaxCrossEntropy loss_;
  std::optional<EpochSampler> sampler_;
  std::size_t iteration_ = 0;
  std::vector<MetricsRow> metrics_;
  double max_constraint_error_ = 0.0;
};

// ---------------------------------------------------------------------------
// Inference helpers

/// Penultimate-layer descriptors (before normalize/scale), computed in batches.
inline Tensor extract_features(Network& net, const Tensor& images, std::size_t batch = 250) {
  const std::size_t N = images.extent(0);
  Shape expect = net.config().input_shape;
  Shape got(images.shape().begin() + 1, images.shape().end());
  if (got != expect) {
    throw ShapeError("extract_features: images " + shape_str(images.shape()) + " do not match network input " +
                     shape_str(expect));
  }
  Tensor out({N, net.config().feature_dim});
  for (std::size_t b = 0; b < N; b += batch) {
    std::vector<std::size_t> rows;
    for (std::size_t i = b; i < std::min(N, b + batch); ++i) rows.push_back(i);
    const Tensor f = net.features(gather_rows(images, rows));
    std::memcpy(out.raw() + b * f.extent(1), f.raw(), f.size() * sizeof(double));
  }
  return out;
}

inline std::vector<std::size_t> predict(Network& net, const Tensor& images, std::size_t batch = 250) {
  const std::size_t N = images.extent(0);
  std::vector<std::size_t> pred(N);
  for (std::size_t b = 0; b < N; b += batch) {
    std::vector<std::size_t> rows;
    for (std::size_t i = b; i < std::min(N, b + batch); ++i) rows.push_back(i);
    const Tensor z = net.logits(gather_rows(images, rows));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      auto r = z.row(k);
      pred[b + k] = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
    }
  }
  return pred;
}

inline double evaluate_accuracy(Network& net, const LabeledDataset& data, std::size_t batch = 250) {
  const auto pred = predict(net, data.images, batch);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace l2sm
