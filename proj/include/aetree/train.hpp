#pragma once

// Mini-batch ADAM training of the tree autoencoder, plus the checkpoint and
// loss-history file formats.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aetree/autoencoder.hpp"
#include "aetree/errors.hpp"
#include "aetree/text_io.hpp"

namespace aetree {

struct TrainConfig {
  double learning_rate = 1e-3;
  int lr_halving_period_steps = 400;
  int batch_size_sets = 50;
  double level_weight_gamma = 0.8;
  double bce_weight = 1.0;
  int max_epochs = 100;
  /// Optional cap on optimizer steps; 0 means no cap.
  int max_steps = 0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(learning_rate > 0) || lr_halving_period_steps <= 0 || batch_size_sets <= 0 || max_epochs <= 0 ||
        max_steps < 0 || !(bce_weight > 0))
      throw InvalidArgument("train config values must be positive");
    if (!(level_weight_gamma > 0 && level_weight_gamma <= 1)) throw InvalidArgument("gamma must lie in (0, 1]");
  }

  LossConfig loss() const { return {level_weight_gamma, bce_weight}; }

  /// Step-decay schedule: halves every `lr_halving_period_steps` steps (0-based).
  double lr_at(long long step) const {
    return learning_rate * std::pow(0.5, static_cast<double>(step / lr_halving_period_steps));
  }
};

struct LossRecord {
  long long step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

namespace detail {

inline std::vector<std::span<double>> flat_views(AETreeModel& m) {
  std::vector<std::span<double>> out;
  m.for_each_parameter([&](const char*, auto& t) { out.emplace_back(t.data(), static_cast<std::size_t>(t.size())); });
  return out;
}

}  // namespace detail

/// ADAM with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
class Adam {
 public:
  explicit Adam(const AETreeModel& like) : m_(like.zeros_like()), v_(like.zeros_like()) {}

  void step(AETreeModel& model, AETreeModel& grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    auto p = detail::flat_views(model);
    auto g = detail::flat_views(grad);
    auto m = detail::flat_views(m_);
    auto v = detail::flat_views(v_);
    for (std::size_t k = 0; k < p.size(); ++k)
      for (std::size_t i = 0; i < p[k].size(); ++i) {
        const double gi = g[k][i];
        m[k][i] = kBeta1 * m[k][i] + (1 - kBeta1) * gi;
        v[k][i] = kBeta2 * v[k][i] + (1 - kBeta2) * gi * gi;
        p[k][i] -= lr * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + kEps);
      }
  }

  long long steps() const { return t_; }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  AETreeModel m_, v_;
  long long t_ = 0;
};

struct TrainResult {
  AETreeModel model;
  std::vector<LossRecord> history;
};

struct TrainHooks {
  /// Called after every completed epoch with the current model.
  std::function<void(const AETreeModel&, int epoch, long long step)> on_epoch;
  /// Called after every optimizer step.
  std::function<void(const LossRecord&)> on_step;
};

/// Trains from a seeded initialization. Each epoch shuffles the forest with
/// the seed and takes one ADAM step per mini-batch; the batch gradient is the
/// mean over its trees, accumulated in batch order. A non-finite loss or
/// parameter aborts with TrainingDivergedError before any hook sees the
/// broken model.
inline TrainResult train(std::span<const SpatialTree> forest, const TrainConfig& cfg, const ModelConfig& model_cfg,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  if (forest.empty()) throw InvalidArgument("train: empty forest");
  TrainResult out{AETreeModel::initialized(model_cfg, cfg.rng_seed), {}};
  Adam adam(out.model);
  std::mt19937_64 shuffle_rng(cfg.rng_seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(forest.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto loss_cfg = cfg.loss();
  const auto batch = static_cast<std::size_t>(cfg.batch_size_sets);

  long long step = 0;
  std::vector<const SpatialTree*> members;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
      members.clear();
      for (std::size_t k = start; k < std::min(order.size(), start + batch); ++k) members.push_back(&forest[order[k]]);
      auto grad = out.model.zeros_like();
      double loss = 0.0;
      try {
        loss = forest_loss_and_gradient(members, out.model, loss_cfg, grad);
      } catch (const TrainingDivergedError&) {
        throw TrainingDivergedError("training diverged at step " + std::to_string(step));
      }
      const double lr = cfg.lr_at(step);
      adam.step(out.model, grad, lr);
      if (!std::isfinite(loss) || !out.model.all_finite())
        throw TrainingDivergedError("training diverged at step " + std::to_string(step));
      out.history.push_back({step, lr, loss});
      if (hooks.on_step) hooks.on_step(out.history.back());
      ++step;
    }
    if (hooks.on_epoch) hooks.on_epoch(out.model, epoch, step);
    if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

inline constexpr const char* kCheckpointMagic = "aetree-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline const char* representation_name(Representation r) {
  return r == Representation::kRelative ? "relative" : "absolute";
}

inline Representation parse_representation(std::string_view s) {
  if (s == "relative") return Representation::kRelative;
  if (s == "absolute") return Representation::kAbsolute;
  throw InvalidArgument("unknown representation '" + std::string(s) + "'");
}

/// Header, `config key value` lines (model shape and the training config),
/// then one `param name rows cols` block per tensor with row-major values.
inline void write_checkpoint(std::ostream& out, const AETreeModel& model, const TrainConfig& cfg) {
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  out << "config hidden " << model.config.hidden << '\n';
  out << "config representation " << representation_name(model.config.representation) << '\n';
  out << "config learning_rate " << text::fmt(cfg.learning_rate) << '\n';
  out << "config lr_halving_period_steps " << cfg.lr_halving_period_steps << '\n';
  out << "config batch_size_sets " << cfg.batch_size_sets << '\n';
  out << "config level_weight_gamma " << text::fmt(cfg.level_weight_gamma) << '\n';
  out << "config bce_weight " << text::fmt(cfg.bce_weight) << '\n';
  out << "config max_epochs " << cfg.max_epochs << '\n';
  out << "config max_steps " << cfg.max_steps << '\n';
  out << "config rng_seed " << cfg.rng_seed << '\n';
  model.for_each_parameter([&](const char* name, const auto& t) {
    out << "param " << name << ' ' << t.rows() << ' ' << t.cols() << '\n';
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) out << (c ? " " : "") << text::fmt(t(r, c));
      out << '\n';
    }
  });
  out << "end\n";
}

struct Checkpoint {
  AETreeModel model;
  TrainConfig config;
};

inline Checkpoint read_checkpoint(std::istream& in) {
  text::LineReader reader(in);
  std::string line;
  auto head = reader.fields(line, "checkpoint header");
  if (head.size() != 2 || head[0] != kCheckpointMagic) throw SchemaError("not a checkpoint file", reader.line());
  if (text::parse_int(head[1], reader.line()) != kCheckpointVersion)
    throw SchemaError("unsupported checkpoint version", reader.line());

  Checkpoint ck;
  ModelConfig mc;
  std::map<std::string, std::string> kv;
  std::vector<std::string> pending;
  for (;;) {
    auto f = reader.fields(line, "config or param line");
    if (f.size() == 3 && f[0] == "config") {
      kv[std::string(f[1])] = std::string(f[2]);
      continue;
    }
    pending.assign(f.begin(), f.end());
    break;
  }
  auto get = [&](const char* key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw SchemaError(std::string("checkpoint is missing config '") + key + "'");
    return it->second;
  };
  mc.hidden = static_cast<int>(text::parse_int(get("hidden")));
  mc.representation = parse_representation(get("representation"));
  ck.config.learning_rate = text::parse_double(get("learning_rate"));
  ck.config.lr_halving_period_steps = static_cast<int>(text::parse_int(get("lr_halving_period_steps")));
  ck.config.batch_size_sets = static_cast<int>(text::parse_int(get("batch_size_sets")));
  ck.config.level_weight_gamma = text::parse_double(get("level_weight_gamma"));
  ck.config.bce_weight = text::parse_double(get("bce_weight"));
  ck.config.max_epochs = static_cast<int>(text::parse_int(get("max_epochs")));
  ck.config.max_steps = static_cast<int>(text::parse_int(get("max_steps")));
  ck.config.rng_seed = static_cast<std::uint64_t>(text::parse_int(get("rng_seed")));
  if (mc.hidden <= 0) throw SchemaError("checkpoint hidden size must be positive");
  ck.model = AETreeModel::zeros(mc);

  std::string name_storage;
  ck.model.for_each_parameter([&](const char* name, auto& t) {
    if (pending.size() != 4 || pending[0] != "param" || pending[1] != name)
      throw SchemaError(std::string("expected param block '") + name + "'", reader.line());
    if (text::parse_int(pending[2], reader.line()) != t.rows() || text::parse_int(pending[3], reader.line()) != t.cols())
      throw SchemaError(std::string("shape mismatch for '") + name + "'", reader.line());
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      const auto vals = reader.fields(line, "parameter row");
      if (static_cast<Eigen::Index>(vals.size()) != t.cols()) throw SchemaError("wrong row length", reader.line());
      for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = text::parse_double(vals[static_cast<std::size_t>(c)], reader.line());
    }
    const auto f = reader.fields(name_storage, "next block");
    pending.assign(f.begin(), f.end());
  });
  if (pending.size() != 1 || pending[0] != "end") throw SchemaError("expected 'end'", reader.line());
  return ck;
}

inline void save_checkpoint(const std::string& path, const AETreeModel& model, const TrainConfig& cfg) {
  auto out = text::open_out(path);
  write_checkpoint(out, model, cfg);
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  auto in = text::open_in(path);
  return read_checkpoint(in);
}

inline void write_loss_csv(std::ostream& out, std::span<const LossRecord> history) {
  out << "step,lr,loss\n";
  for (const auto& r : history) out << r.step << ',' << text::fmt(r.lr) << ',' << text::fmt(r.loss) << '\n';
}

}  // namespace aetree
