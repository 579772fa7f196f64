#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include "l2sm/l2sm.hpp"

namespace fs = std::filesystem;
using namespace l2sm;

namespace {

enum ExitCode : int { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4 };

std::string sha256_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot hash " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (is.read(buf, sizeof buf) || is.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(is.gcount()));
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char byte[3];
  for (unsigned i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", md[i]);
    hex += byte;
  }
  return hex;
}

/// Records what a subcommand produced; written next to the outputs.
struct RunManifest {
  std::string subcommand;
  std::string config;
  std::optional<std::uint64_t> seed;
  fs::path out_dir;
  std::vector<fs::path> files;

  void write(const fs::path& target) const {
    nlohmann::ordered_json j;
    j["subcommand"] = subcommand;
    j["config"] = config;
    j["seed"] = seed ? nlohmann::ordered_json(*seed) : nlohmann::ordered_json(nullptr);
    j["out_dir"] = out_dir.string();
    j["files"] = nlohmann::ordered_json::array();
    for (const auto& f : files) {
      j["files"].push_back({{"path", fs::relative(f, out_dir).generic_string()},
                            {"bytes", fs::file_size(f)},
                            {"sha256", sha256_file(f)}});
    }
    std::ofstream os(target);
    if (!os) throw DataError("cannot write " + target.string());
    os << j.dump(2) << '\n';
  }
};

fs::path manifest_beside(const fs::path& file) { return fs::path(file.string() + ".manifest.json"); }

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  return os;
}

FeatureSet load_features(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open features " + path.string());
  return read_features_csv(is, path.string());
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out;
  std::string resume;
  std::optional<std::uint64_t> seed;
};

std::vector<std::string> read_lines(const fs::path& path) {
  std::vector<std::string> lines;
  std::ifstream is(path);
  for (std::string line; std::getline(is, line);) lines.push_back(line);
  return lines;
}

int cmd_train(const TrainArgs& a) {
  const Config cfg = Config::load(a.config);
  cfg.require_known("data", {"train_images", "train_labels", "test_images", "test_labels"});
  TrainConfig tc = TrainConfig::from_config(cfg);
  if (a.seed) tc.seed = *a.seed;
  tc.validate();

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    resume = load_checkpoint_file(a.resume);
    if (resume->iteration >= tc.max_iters) {
      std::cerr << "checkpoint " << a.resume << " is already at iteration " << resume->iteration
                << "; nothing to do\n";
      return kOk;
    }
  }
  const NetworkConfig nc = NetworkConfig::from_config(cfg);
  const LabeledDataset train =
      load_dataset(cfg.get_path("data", "train_images"), cfg.get_path("data", "train_labels"), "train");
  std::optional<LabeledDataset> test;
  if (cfg.has("data", "test_images")) {
    test = load_dataset(cfg.get_path("data", "test_images"), cfg.get_path("data", "test_labels"), "test");
  }

  const fs::path out = a.out;
  fs::create_directories(out);
  const fs::path metrics_path = out / "metrics.csv";

  Trainer trainer = resume ? Trainer(*resume, tc) : Trainer(nc, tc);
  std::vector<std::string> kept;
  if (resume) {
    const auto old = read_lines(metrics_path);
    for (std::size_t i = 1; i < old.size(); ++i) {
      if (std::stoull(old[i].substr(0, old[i].find(','))) < resume->iteration) kept.push_back(old[i]);
    }
  }
  std::ofstream metrics = open_out(metrics_path);
  write_metrics_header(metrics);
  for (const auto& line : kept) metrics << line << '\n';

  RunManifest m{"train", a.config, tc.seed, out, {}};
  std::vector<fs::path> checkpoints;
  auto save = [&](Trainer& t, const fs::path& path) {
    save_checkpoint_file(path, t.checkpoint());
    checkpoints.push_back(path);
  };
  double worst_constraint = 0.0;
  trainer.run(
      train,
      [&](const MetricsRow& row, Trainer& t) {
        write_metrics_row(metrics, row);
        metrics.flush();
        worst_constraint = t.max_constraint_error();
        std::fprintf(stderr, "iter %zu loss %.5f acc %.4f alpha %.4f lr %.3g\n", row.iter, row.loss, row.train_acc,
                     row.alpha, row.lr);
      },
      [&](const MetricsRow&, Trainer& t) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint_%06zu.l2sm", t.iteration());
        save(t, out / name);
      });
  metrics.close();
  save(trainer, out / "final.l2sm");

  {
    std::ofstream summary = open_out(out / "summary.csv");
    summary << "key,value\n";
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.9g", trainer.network().alpha());
    summary << "iterations," << trainer.iteration() << "\nfinal_alpha," << buf << '\n';
    if (nc.head == Head::L2Softmax) {
      std::snprintf(buf, sizeof buf, "%.9g", worst_constraint);
      summary << "max_norm_deviation," << buf << '\n';
    }
    if (test) {
      std::snprintf(buf, sizeof buf, "%.9g", evaluate_accuracy(trainer.network(), *test));
      summary << "test_accuracy," << buf << '\n';
      std::fprintf(stderr, "test accuracy %s\n", buf);
    }
  }

  m.files = {metrics_path, out / "summary.csv"};
  for (const auto& c : checkpoints) m.files.push_back(c);
  m.write(out / "manifest.json");
  return kOk;
}

struct DumpArgs {
  std::string ckpt, data, labels, out;
};

/// "xxx-images-idx3-ubyte[.gz]" pairs with "xxx-labels-idx1-ubyte[.gz]".
std::optional<fs::path> sibling_labels(const fs::path& images) {
  std::string name = images.filename().string();
  const auto at = name.find("images-idx3");
  if (at == std::string::npos) return std::nullopt;
  name.replace(at, 11, "labels-idx1");
  fs::path p = images.parent_path() / name;
  return fs::exists(p) ? std::optional<fs::path>(p) : std::nullopt;
}

int cmd_dump_features(const DumpArgs& a) {
  const Checkpoint ck = load_checkpoint_file(a.ckpt);
  Network net = network_from_checkpoint(ck);
  const Tensor images = load_idx_images(a.data);
  std::vector<std::size_t> labels(images.extent(0), 0);
  std::optional<fs::path> label_path = a.labels.empty() ? sibling_labels(a.data) : fs::path(a.labels);
  if (label_path) {
    labels = load_idx_labels(*label_path);
    if (labels.size() != images.extent(0)) {
      throw DataError("label count " + std::to_string(labels.size()) + " != image count " +
                      std::to_string(images.extent(0)));
    }
  } else {
    std::cerr << "no label file found for " << a.data << "; writing label 0\n";
  }
  const FeatureSet fs_ = make_feature_set(extract_features(net, images), labels);
  {
    std::ofstream os = open_out(a.out);
    write_features_csv(os, fs_);
  }
  const fs::path out = fs::absolute(a.out);
  RunManifest{"dump-features", a.ckpt, std::nullopt, out.parent_path(), {out}}.write(manifest_beside(out));
  return kOk;
}

struct PairsArgs {
  std::string features, out;
  std::size_t genuine = 3000, impostor = 3000;
  std::uint64_t seed = 1;
};

int cmd_make_pairs(const PairsArgs& a) {
  const FeatureSet fs_ = load_features(a.features);
  const PairList pairs = generate_pairs(fs_.labels, a.genuine, a.impostor, a.seed);
  {
    std::ofstream os = open_out(a.out);
    write_pairs(os, fs_, pairs);
  }
  const fs::path out = fs::absolute(a.out);
  RunManifest{"make-pairs", a.features, a.seed, out.parent_path(), {out}}.write(manifest_beside(out));
  return kOk;
}

struct EvalArgs {
  std::string features, pairs, out;
  std::vector<double> buckets;
};

int cmd_eval_pairs(const EvalArgs& a) {
  if (!a.buckets.empty() && a.buckets.size() != 2) throw ConfigError("--buckets takes exactly two thresholds t1,t2");
  const FeatureSet fs_ = load_features(a.features);
  std::ifstream is(a.pairs);
  if (!is) throw DataError("cannot open pairs " + a.pairs);
  const PairList pairs = read_pairs(is, fs_, a.pairs);
  EvalReport report = evaluate_pairs(fs_, pairs);
  if (!a.buckets.empty()) attach_bucket_results(report, fs_, pairs, norm_buckets(fs_.norms, a.buckets[0], a.buckets[1]));
  {
    std::ofstream os = open_out(a.out);
    write_report_csv(os, report);
  }
  const fs::path out = fs::absolute(a.out);
  RunManifest{"eval-pairs", a.features, std::nullopt, out.parent_path(), {out}}.write(manifest_beside(out));
  return kOk;
}

struct BoundArgs {
  std::optional<std::size_t> classes;
  std::optional<double> prob;
  std::optional<std::size_t> dim;
  std::optional<std::size_t> curve;
  double alpha_max = 0.0;
  std::size_t steps = 0;
  std::string out;
};

int cmd_alpha_bound(const BoundArgs& a) {
  if (a.curve) {
    if (a.classes || a.prob) throw ConfigError("use either --classes/--prob or --curve, not both");
    const auto pts = prob_curve(*a.curve, a.alpha_max, a.steps);
    if (a.out.empty()) {
      write_curve_csv(std::cout, pts);
      return kOk;
    }
    {
      std::ofstream os = open_out(a.out);
      write_curve_csv(os, pts);
    }
    const fs::path out = fs::absolute(a.out);
    RunManifest{"alpha-bound", "", std::nullopt, out.parent_path(), {out}}.write(manifest_beside(out));
    return kOk;
  }
  if (!a.classes || !a.prob) throw ConfigError("alpha-bound needs --classes and --prob, or --curve");
  const BoundResult r = alpha_lower_bound(BoundQuery{*a.classes, *a.prob, a.dim});
  if (r.warning) std::cerr << "warning: " << *r.warning << '\n';
  std::printf("%.3f\n", r.alpha_low);
  return kOk;
}

struct SpreadArgs {
  std::string features, out;
};

int cmd_angular_spread(const SpreadArgs& a) {
  const AngularSpreadReport r = angular_spread(load_features(a.features));
  for (const auto& n : r.notices) std::cerr << "notice: " << n << '\n';
  {
    std::ofstream os = open_out(a.out);
    write_spread_csv(os, r);
  }
  const fs::path out = fs::absolute(a.out);
  RunManifest{"angular-spread", a.features, std::nullopt, out.parent_path(), {out}}.write(manifest_beside(out));
  return kOk;
}

int run_guarded(const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* env = std::getenv("L2SM_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n < 1) {
      std::cerr << "L2SM_THREADS must be a positive integer\n";
      return kConfig;
    }
    set_kernel_threads(static_cast<unsigned>(n));
  }

  CLI::App app{"L2-constrained softmax training and verification tools"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a network from a config file");
  t->add_option("--config", train.config, "config file")->required();
  t->add_option("--out", train.out, "output directory")->required();
  t->add_option("--resume", train.resume, "checkpoint to continue from");
  t->add_option("--seed", train.seed, "override [train] seed");

  DumpArgs dump;
  auto* d = app.add_subcommand("dump-features", "write penultimate features of a dataset as CSV");
  d->add_option("--ckpt", dump.ckpt, "checkpoint")->required();
  d->add_option("--data", dump.data, "IDX image file")->required();
  d->add_option("--labels", dump.labels, "IDX label file (default: sibling of --data)");
  d->add_option("--out", dump.out, "feature CSV")->required();

  PairsArgs pairs;
  auto* p = app.add_subcommand("make-pairs", "sample genuine/impostor pairs from a feature CSV");
  p->add_option("--features", pairs.features, "feature CSV")->required();
  p->add_option("--genuine", pairs.genuine, "number of same-label pairs");
  p->add_option("--impostor", pairs.impostor, "number of different-label pairs");
  p->add_option("--seed", pairs.seed, "sampling seed");
  p->add_option("--out", pairs.out, "pair list")->required();

  EvalArgs eval;
  auto* e = app.add_subcommand("eval-pairs", "ROC, TAR@FAR and accuracy for a pair list");
  e->add_option("--features", eval.features, "feature CSV")->required();
  e->add_option("--pairs", eval.pairs, "pair list")->required();
  e->add_option("--out", eval.out, "report CSV")->required();
  e->add_option("--buckets", eval.buckets, "norm thresholds t1,t2")->delimiter(',')->expected(2);

  BoundArgs bound;
  auto* b = app.add_subcommand("alpha-bound", "lower bound on the scale for a target probability");
  b->add_option("--classes", bound.classes, "number of classes");
  b->add_option("--prob", bound.prob, "target average probability");
  b->add_option("--dim", bound.dim, "feature dimension (warns when classes >= 2*dim)");
  b->add_option("--curve", bound.curve, "emit the probability curve for this many classes");
  b->add_option("--alpha-max", bound.alpha_max, "largest alpha on the curve");
  b->add_option("--steps", bound.steps, "curve points");
  b->add_option("--out", bound.out, "curve CSV (default stdout)");

  SpreadArgs spread;
  auto* s = app.add_subcommand("angular-spread", "per-class angular spread of features");
  s->add_option("--features", spread.features, "feature CSV")->required();
  s->add_option("--out", spread.out, "spread CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& ok) {
    return app.exit(ok);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kConfig;
  }

  if (t->parsed()) return run_guarded([&] { return cmd_train(train); });
  if (d->parsed()) return run_guarded([&] { return cmd_dump_features(dump); });
  if (p->parsed()) return run_guarded([&] { return cmd_make_pairs(pairs); });
  if (e->parsed()) return run_guarded([&] { return cmd_eval_pairs(eval); });
  if (b->parsed()) return run_guarded([&] { return cmd_alpha_bound(bound); });
  return run_guarded([&] { return cmd_angular_spread(spread); });
}
