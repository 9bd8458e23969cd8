#pragma once

// Tree-structured LSTM autoencoder. The encoder folds a SpatialTree bottom-up
// with one shared LSTM cell, summing sibling states into the parent; the
// decoder unfolds a parent feature into two children with a second cell whose
// state is twice as wide, then splits it. Gradients are propagated by hand
// through the cached forward pass (reverse mode over a fixed op set).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aetree/errors.hpp"
#include "aetree/geometry.hpp"
#include "aetree/spatial_tree.hpp"

namespace aetree {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr int kParamDim = 6;
inline constexpr int kHeadDim = kParamDim + 1;

/// What the network reads and predicts at each node.
enum class Representation : std::uint8_t {
  kRelative,  ///< parameters relative to the parent
  kAbsolute,  ///< parameters in the normalized layout frame
};

/// The (hidden, cell) pair attached to a node.
struct NodeFeature {
  Vec hidden;
  Vec cell;

  static NodeFeature zeros(int size) { return {Vec::Zero(size), Vec::Zero(size)}; }

  /// Latent code: hidden followed by cell.
  Vec concat() const {
    Vec out(hidden.size() + cell.size());
    out << hidden, cell;
    return out;
  }

  static NodeFeature split(const Vec& code) {
    const auto half = code.size() / 2;
    if (code.size() % 2 != 0) throw InvalidArgument("latent code has odd length");
    return {code.head(half), code.tail(half)};
  }
};

// ---------------------------------------------------------------------------
// Building blocks

struct Affine {
  Mat weight;  // out x in
  Vec bias;    // out

  int in_size() const { return static_cast<int>(weight.cols()); }
  int out_size() const { return static_cast<int>(weight.rows()); }

  Vec forward(const Vec& x) const {
    if (x.size() != weight.cols()) throw InvalidArgument("affine: input size mismatch");
    Vec y = bias;
    y.noalias() += weight * x;
    return y;
  }

  /// Accumulates into `grad` and returns dL/dx.
  Vec backward(const Vec& x, const Vec& dy, Affine& grad) const {
    grad.weight.noalias() += dy * x.transpose();
    grad.bias += dy;
    return weight.transpose() * dy;
  }
};

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Standard LSTM cell; gate rows are stacked as [input, forget, candidate, output].
struct LstmCell {
  Mat wx;  // 4S x I
  Mat wh;  // 4S x S
  Vec b;   // 4S

  int input_size() const { return static_cast<int>(wx.cols()); }
  int state_size() const { return static_cast<int>(wh.cols()); }
};

struct LstmCache {
  Vec x, h, c;
  Vec i, f, g, o;
  Vec c_out, tanh_c;
};

inline void lstm_forward(const LstmCell& cell, const Vec& x, const Vec& h, const Vec& c, Vec& h_out, Vec& c_out,
                         LstmCache* cache = nullptr) {
  const int s = cell.state_size();
  if (x.size() != cell.input_size() || h.size() != s || c.size() != s)
    throw InvalidArgument("lstm_cell_forward: shape mismatch");
  Vec z = cell.b;
  z.noalias() += cell.wx * x;
  z.noalias() += cell.wh * h;
  Vec i = z.segment(0, s).unaryExpr([](double v) { return sigmoid(v); });
  Vec f = z.segment(s, s).unaryExpr([](double v) { return sigmoid(v); });
  Vec g = z.segment(2 * s, s).array().tanh().matrix();
  Vec o = z.segment(3 * s, s).unaryExpr([](double v) { return sigmoid(v); });
  c_out = f.cwiseProduct(c) + i.cwiseProduct(g);
  Vec tc = c_out.array().tanh().matrix();
  h_out = o.cwiseProduct(tc);
  if (cache) *cache = {x, h, c, std::move(i), std::move(f), std::move(g), std::move(o), c_out, std::move(tc)};
}

/// Given dL/dh_out and dL/dc_out, accumulates parameter gradients and writes
/// dL/dx, dL/dh, dL/dc.
inline void lstm_backward(const LstmCell& cell, const LstmCache& k, const Vec& dh_out, const Vec& dc_out,
                          LstmCell& grad, Vec& dx, Vec& dh, Vec& dc) {
  const int s = cell.state_size();
  const Vec dc_total = dc_out + dh_out.cwiseProduct(k.o).cwiseProduct((1.0 - k.tanh_c.array().square()).matrix());
  Vec dz(4 * s);
  dz.segment(0, s) = dc_total.cwiseProduct(k.g).cwiseProduct(k.i.cwiseProduct((1.0 - k.i.array()).matrix()));
  dz.segment(s, s) = dc_total.cwiseProduct(k.c).cwiseProduct(k.f.cwiseProduct((1.0 - k.f.array()).matrix()));
  dz.segment(2 * s, s) = dc_total.cwiseProduct(k.i).cwiseProduct((1.0 - k.g.array().square()).matrix());
  dz.segment(3 * s, s) = dh_out.cwiseProduct(k.tanh_c).cwiseProduct(k.o.cwiseProduct((1.0 - k.o.array()).matrix()));
  grad.wx.noalias() += dz * k.x.transpose();
  grad.wh.noalias() += dz * k.h.transpose();
  grad.b += dz;
  dx = cell.wx.transpose() * dz;
  dh = cell.wh.transpose() * dz;
  dc = dc_total.cwiseProduct(k.f);
}

// ---------------------------------------------------------------------------
// Model

struct ModelConfig {
  int hidden = 256;
  Representation representation = Representation::kRelative;
};

/// Learnable parameters. The same struct doubles as a gradient accumulator.
struct AETreeModel {
  ModelConfig config;
  LstmCell encoder;  // input 6, state H
  LstmCell decoder;  // input 6 + 2H, state 2H
  Affine lift_h;     // H -> 2H
  Affine lift_c;     // H -> 2H
  Affine head;       // H -> 6 params + 1 leaf logit

  int hidden() const { return config.hidden; }

  static AETreeModel zeros(const ModelConfig& cfg) {
    const int h = cfg.hidden;
    if (h <= 0) throw InvalidArgument("hidden size must be positive");
    AETreeModel m;
    m.config = cfg;
    m.encoder = {Mat::Zero(4 * h, kParamDim), Mat::Zero(4 * h, h), Vec::Zero(4 * h)};
    m.decoder = {Mat::Zero(8 * h, kParamDim + 2 * h), Mat::Zero(8 * h, 2 * h), Vec::Zero(8 * h)};
    m.lift_h = {Mat::Zero(2 * h, h), Vec::Zero(2 * h)};
    m.lift_c = {Mat::Zero(2 * h, h), Vec::Zero(2 * h)};
    m.head = {Mat::Zero(kHeadDim, h), Vec::Zero(kHeadDim)};
    return m;
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per affine map, forget-gate bias +1.
  static AETreeModel initialized(const ModelConfig& cfg, std::uint64_t seed) {
    AETreeModel m = zeros(cfg);
    std::mt19937_64 rng(seed);
    auto fill = [&](auto& t, double fan_in) {
      std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
      for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = u(rng);
    };
    auto init_cell = [&](LstmCell& c) {
      const double fan_in = c.input_size() + c.state_size();
      fill(c.wx, fan_in);
      fill(c.wh, fan_in);
      fill(c.b, fan_in);
      const int s = c.state_size();
      c.b.segment(s, s).array() += 1.0;
    };
    auto init_affine = [&](Affine& a) {
      fill(a.weight, a.in_size());
      fill(a.bias, a.in_size());
    };
    init_cell(m.encoder);
    init_cell(m.decoder);
    init_affine(m.lift_h);
    init_affine(m.lift_c);
    init_affine(m.head);
    return m;
  }

  AETreeModel zeros_like() const { return zeros(config); }

  /// Visits every parameter tensor as (name, Eigen object) in a fixed order.
  template <class F>
  void for_each_parameter(F&& f) {
    f("encoder.wx", encoder.wx);
    f("encoder.wh", encoder.wh);
    f("encoder.b", encoder.b);
    f("decoder.wx", decoder.wx);
    f("decoder.wh", decoder.wh);
    f("decoder.b", decoder.b);
    f("lift_h.weight", lift_h.weight);
    f("lift_h.bias", lift_h.bias);
    f("lift_c.weight", lift_c.weight);
    f("lift_c.bias", lift_c.bias);
    f("head.weight", head.weight);
    f("head.bias", head.bias);
  }

  template <class F>
  void for_each_parameter(F&& f) const {
    const_cast<AETreeModel*>(this)->for_each_parameter([&](const char* name, const auto& t) { f(name, t); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_parameter([&](const char*, const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each_parameter([&](const char*, const auto& t) { ok = ok && t.allFinite(); });
    return ok;
  }
};

inline Vec to_vec(const Params& p) { return Eigen::Map<const Vec>(p.data(), kParamDim); }

inline Params to_params(const Vec& v) {
  Params p;
  for (int k = 0; k < kParamDim; ++k) p[static_cast<std::size_t>(k)] = v[k];
  return p;
}

/// The parameters a node contributes as network input and target.
inline Params node_params(const SpatialTree& tree, int node, Representation rep) {
  const auto& n = tree.nodes[static_cast<std::size_t>(node)];
  if (rep == Representation::kAbsolute || n.parent < 0) return to_params(n.box);
  return n.rel;
}

// ---------------------------------------------------------------------------
// Encoding

/// One child's contribution to its parent: the shared encoder cell applied to
/// (P, (h, c)).
inline void encode_child(const AETreeModel& model, const Params& p, const NodeFeature& f, NodeFeature& out,
                         LstmCache* cache = nullptr) {
  lstm_forward(model.encoder, to_vec(p), f.hidden, f.cell, out.hidden, out.cell, cache);
}

struct EncodeInput {
  Params params;
  NodeFeature feature;
};

/// Parent features for a batch of (left, right) child pairs: h = h'_l + h'_r,
/// c = c'_l + c'_r.
inline std::vector<NodeFeature> encode_level(std::span<const std::pair<EncodeInput, EncodeInput>> pairs,
                                             const AETreeModel& model) {
  std::vector<NodeFeature> out;
  out.reserve(pairs.size());
  NodeFeature l, r;
  for (const auto& [left, right] : pairs) {
    encode_child(model, left.params, left.feature, l);
    encode_child(model, right.params, right.feature, r);
    out.push_back({l.hidden + r.hidden, l.cell + r.cell});
  }
  return out;
}

/// Encoder features of every node (leaves are zero).
inline std::vector<NodeFeature> encode_all(const SpatialTree& tree, const AETreeModel& model) {
  const int h = model.hidden();
  std::vector<NodeFeature> feats(tree.nodes.size(), NodeFeature::zeros(h));
  const auto rep = model.config.representation;
  std::vector<std::pair<EncodeInput, EncodeInput>> batch;
  for (const auto& level : tree.levels) {
    batch.clear();
    for (const auto& row : level.rows) {
      if (row.left < 0 || row.right < 0 || row.parent < 0 || static_cast<std::size_t>(row.parent) >= tree.nodes.size())
        throw InvalidArgument("encode: index matrix row out of range");
      batch.push_back({{node_params(tree, row.left, rep), feats[static_cast<std::size_t>(row.left)]},
                       {node_params(tree, row.right, rep), feats[static_cast<std::size_t>(row.right)]}});
    }
    auto parents = encode_level(batch, model);
    for (std::size_t k = 0; k < level.rows.size(); ++k)
      feats[static_cast<std::size_t>(level.rows[k].parent)] = std::move(parents[k]);
  }
  return feats;
}

inline NodeFeature encode_tree(const SpatialTree& tree, const AETreeModel& model) {
  return encode_all(tree, model)[static_cast<std::size_t>(tree.root)];
}

/// Encodes a forest level by level: level k of every tree is gathered into one
/// batch before level k + 1 is touched. Per-pair arithmetic is identical to
/// encode_tree, so root features agree bit for bit.
inline std::vector<NodeFeature> encode_forest(std::span<const SpatialTree> forest, const AETreeModel& model) {
  const int h = model.hidden();
  const auto rep = model.config.representation;
  std::vector<std::vector<NodeFeature>> feats;
  std::size_t max_levels = 0;
  for (const auto& t : forest) {
    feats.emplace_back(t.nodes.size(), NodeFeature::zeros(h));
    max_levels = std::max(max_levels, t.levels.size());
  }
  struct Target {
    std::size_t tree;
    int parent;
  };
  std::vector<std::pair<EncodeInput, EncodeInput>> batch;
  std::vector<Target> targets;
  for (std::size_t lv = 0; lv < max_levels; ++lv) {
    batch.clear();
    targets.clear();
    for (std::size_t t = 0; t < forest.size(); ++t) {
      if (lv >= forest[t].levels.size()) continue;
      for (const auto& row : forest[t].levels[lv].rows) {
        batch.push_back({{node_params(forest[t], row.left, rep), feats[t][static_cast<std::size_t>(row.left)]},
                         {node_params(forest[t], row.right, rep), feats[t][static_cast<std::size_t>(row.right)]}});
        targets.push_back({t, row.parent});
      }
    }
    auto parents = encode_level(batch, model);
    for (std::size_t k = 0; k < targets.size(); ++k)
      feats[targets[k].tree][static_cast<std::size_t>(targets[k].parent)] = std::move(parents[k]);
  }
  std::vector<NodeFeature> roots;
  for (std::size_t t = 0; t < forest.size(); ++t) roots.push_back(feats[t][static_cast<std::size_t>(forest[t].root)]);
  return roots;
}

// ---------------------------------------------------------------------------
// Decoding

struct ChildPrediction {
  Params params{};
  double logit = 0.0;
  NodeFeature feature;
};

struct DecodeCache {
  Vec parent_h, parent_c;  // decoder input feature
  Vec lifted_h, lifted_c;
  LstmCache cell;
  Vec left_h, right_h;  // head inputs
};

/// Lifts the parent (h, c) to 2H, runs the decoder cell on [P, h, c] and
/// splits the output into left (first half) and right children.
inline std::pair<ChildPrediction, ChildPrediction> decode_step(const Params& parent_params,
                                                               const NodeFeature& parent, const AETreeModel& model,
                                                               DecodeCache* cache = nullptr) {
  const int h = model.hidden();
  if (parent.hidden.size() != h || parent.cell.size() != h) throw InvalidArgument("decode_step: feature size mismatch");
  const Vec lh = model.lift_h.forward(parent.hidden);
  const Vec lc = model.lift_c.forward(parent.cell);
  Vec x(kParamDim + 2 * h);
  x << to_vec(parent_params), parent.hidden, parent.cell;
  Vec h_out, c_out;
  lstm_forward(model.decoder, x, lh, lc, h_out, c_out, cache ? &cache->cell : nullptr);

  std::pair<ChildPrediction, ChildPrediction> out;
  auto fill = [&](ChildPrediction& child, Eigen::Index offset) {
    child.feature.hidden = h_out.segment(offset, h);
    child.feature.cell = c_out.segment(offset, h);
    const Vec y = model.head.forward(child.feature.hidden);
    child.params = to_params(Vec(y.head(kParamDim)));
    child.logit = y[kParamDim];
  };
  fill(out.first, 0);
  fill(out.second, h);
  if (cache) {
    cache->parent_h = parent.hidden;
    cache->parent_c = parent.cell;
    cache->lifted_h = lh;
    cache->lifted_c = lc;
    cache->left_h = out.first.feature.hidden;
    cache->right_h = out.second.feature.hidden;
  }
  return out;
}

struct NodePrediction {
  Params params{};
  double logit = 0.0;
};

/// Top-down teacher-forced decoding: every internal node is decoded from its
/// ground-truth parameters and its predicted feature (the root uses
/// `root_feature`). Returns one prediction per node; the root entry is unused.
inline std::vector<NodePrediction> decode_teacher_forced(const SpatialTree& tree, const NodeFeature& root_feature,
                                                         const AETreeModel& model) {
  const auto rep = model.config.representation;
  std::vector<NodePrediction> preds(tree.nodes.size());
  std::vector<NodeFeature> feats(tree.nodes.size());
  feats[static_cast<std::size_t>(tree.root)] = root_feature;
  for (std::size_t n = tree.nodes.size(); n-- > 0;) {
    const auto& node = tree.nodes[n];
    if (node.is_leaf) continue;
    auto [l, r] = decode_step(node_params(tree, static_cast<int>(n), rep), feats[n], model);
    preds[static_cast<std::size_t>(node.left)] = {l.params, l.logit};
    preds[static_cast<std::size_t>(node.right)] = {r.params, r.logit};
    feats[static_cast<std::size_t>(node.left)] = std::move(l.feature);
    feats[static_cast<std::size_t>(node.right)] = std::move(r.feature);
  }
  return preds;
}

struct FreeDecodeOptions {
  int max_depth = 16;
  double leaf_threshold = 0.5;
};

/// Free-running decoding from a root code: predicted parameters are fed back
/// in place of ground truth. A child becomes a leaf when sigmoid(logit)
/// exceeds the threshold or the depth budget is spent. Leaves are returned in
/// left-first depth-first order as absolute cuboids.
inline std::vector<Cuboid> decode_free(const Params& root_params, const NodeFeature& root_feature,
                                       const AETreeModel& model, const FreeDecodeOptions& opt = {}) {
  if (opt.max_depth < 1) throw InvalidArgument("decode_free: max_depth must be >= 1");
  const auto rep = model.config.representation;
  struct Pending {
    Params input;
    NodeFeature feature;
    Cuboid box;
    int depth;
    bool leaf;
  };
  std::vector<Cuboid> leaves;
  std::vector<Pending> stack;
  stack.push_back({root_params, root_feature, sanitize(root_params), 0, false});
  while (!stack.empty()) {
    Pending cur = std::move(stack.back());
    stack.pop_back();
    if (cur.leaf) {
      leaves.push_back(cur.box);
      continue;
    }
    auto [l, r] = decode_step(cur.input, cur.feature, model);
    // right first so the left subtree comes off the stack first
    for (ChildPrediction* c : {&r, &l}) {
      const Cuboid box =
          rep == Representation::kRelative ? to_absolute_clamped(c->params, cur.box) : sanitize(c->params);
      const bool stop = cur.depth + 1 >= opt.max_depth || sigmoid(c->logit) > opt.leaf_threshold;
      stack.push_back({c->params, std::move(c->feature), box, cur.depth + 1, stop});
    }
  }
  return leaves;
}

// ---------------------------------------------------------------------------
// Loss

struct LossConfig {
  double level_weight_gamma = 0.8;
  double bce_weight = 1.0;
};

/// Weight of each depth d = 1..D: gamma^(d-1), normalized to sum to one.
inline std::vector<double> depth_weights(int max_depth, double gamma) {
  std::vector<double> w(static_cast<std::size_t>(max_depth) + 1, 0.0);
  double total = 0.0;
  for (int d = 1; d <= max_depth; ++d) total += (w[static_cast<std::size_t>(d)] = std::pow(gamma, d - 1));
  for (auto& v : w) v /= total;
  return w;
}

/// log(1 + e^z) without overflow.
inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

/// Binary cross-entropy of target `leaf` against sigmoid(logit).
inline double bce_with_logit(double logit, bool leaf) { return softplus(logit) - (leaf ? logit : 0.0); }

/// Depth-weighted L1 + lambda * BCE over every non-root node.
inline double tree_loss(const SpatialTree& tree, std::span<const NodePrediction> preds, const LossConfig& cfg,
                        Representation rep = Representation::kRelative) {
  if (preds.size() != tree.nodes.size()) throw InvalidArgument("tree_loss: predictions must cover every node");
  std::vector<int> depth(tree.nodes.size(), 0);
  int max_depth = 0;
  for (std::size_t n = tree.nodes.size(); n-- > 0;) {
    const int p = tree.nodes[n].parent;
    if (p >= 0) depth[n] = depth[static_cast<std::size_t>(p)] + 1;
    max_depth = std::max(max_depth, depth[n]);
  }
  const auto w = depth_weights(max_depth, cfg.level_weight_gamma);
  double loss = 0.0;
  for (std::size_t n = 0; n < tree.nodes.size(); ++n) {
    if (tree.nodes[n].parent < 0) continue;
    const Params target = node_params(tree, static_cast<int>(n), rep);
    double l1 = 0.0;
    for (std::size_t k = 0; k < target.size(); ++k) l1 += std::abs(target[k] - preds[n].params[k]);
    loss += w[static_cast<std::size_t>(depth[n])] *
            (l1 + cfg.bce_weight * bce_with_logit(preds[n].logit, tree.nodes[n].is_leaf));
  }
  if (!std::isfinite(loss)) throw TrainingDivergedError("loss is not finite");
  return loss;
}

/// Full forward pass (encode, teacher-forced decode, loss) and reverse pass
/// for one tree. Adds dLoss/dparams into `grad` (scaled by `scale`) and
/// returns the unscaled loss.
inline double tree_loss_and_gradient(const SpatialTree& tree, const AETreeModel& model, const LossConfig& cfg,
                                     AETreeModel& grad, double scale = 1.0) {
  const int h = model.hidden();
  const auto rep = model.config.representation;
  const std::size_t n_nodes = tree.nodes.size();
  const std::size_t root = static_cast<std::size_t>(tree.root);

  // Encoder forward with caches: one cell application per non-root node.
  std::vector<NodeFeature> enc(n_nodes, NodeFeature::zeros(h));
  std::vector<LstmCache> enc_cache(n_nodes);
  for (const auto& level : tree.levels)
    for (const auto& row : level.rows) {
      NodeFeature l, r;
      const auto li = static_cast<std::size_t>(row.left);
      const auto ri = static_cast<std::size_t>(row.right);
      encode_child(model, node_params(tree, row.left, rep), enc[li], l, &enc_cache[li]);
      encode_child(model, node_params(tree, row.right, rep), enc[ri], r, &enc_cache[ri]);
      enc[static_cast<std::size_t>(row.parent)] = {l.hidden + r.hidden, l.cell + r.cell};
    }

  // Decoder forward (top-down: internal nodes in descending index order).
  std::vector<NodeFeature> dec_in(n_nodes);
  std::vector<DecodeCache> dec_cache(n_nodes);
  std::vector<NodePrediction> preds(n_nodes);
  dec_in[root] = enc[root];
  for (std::size_t n = n_nodes; n-- > 0;) {
    const auto& node = tree.nodes[n];
    if (node.is_leaf) continue;
    auto [l, r] = decode_step(node_params(tree, static_cast<int>(n), rep), dec_in[n], model, &dec_cache[n]);
    preds[static_cast<std::size_t>(node.left)] = {l.params, l.logit};
    preds[static_cast<std::size_t>(node.right)] = {r.params, r.logit};
    dec_in[static_cast<std::size_t>(node.left)] = std::move(l.feature);
    dec_in[static_cast<std::size_t>(node.right)] = std::move(r.feature);
  }

  const double loss = tree_loss(tree, preds, cfg, rep);

  // dLoss/d(head output) per non-root node.
  std::vector<int> depth(n_nodes, 0);
  int max_depth = 0;
  for (std::size_t n = n_nodes; n-- > 0;) {
    const int p = tree.nodes[n].parent;
    if (p >= 0) depth[n] = depth[static_cast<std::size_t>(p)] + 1;
    max_depth = std::max(max_depth, depth[n]);
  }
  const auto w = depth_weights(max_depth, cfg.level_weight_gamma);
  std::vector<Vec> d_head(n_nodes);
  for (std::size_t n = 0; n < n_nodes; ++n) {
    if (tree.nodes[n].parent < 0) continue;
    const double wn = scale * w[static_cast<std::size_t>(depth[n])];
    const Params target = node_params(tree, static_cast<int>(n), rep);
    Vec d(kHeadDim);
    for (int k = 0; k < kParamDim; ++k) {
      const double diff = preds[n].params[static_cast<std::size_t>(k)] - target[static_cast<std::size_t>(k)];
      d[k] = wn * static_cast<double>((diff > 0) - (diff < 0));
    }
    d[kParamDim] = wn * cfg.bce_weight * (sigmoid(preds[n].logit) - (tree.nodes[n].is_leaf ? 1.0 : 0.0));
    d_head[n] = std::move(d);
  }

  // Decoder reverse pass: children (lower indices) finish before parents.
  std::vector<NodeFeature> d_dec_in(n_nodes, NodeFeature::zeros(h));
  Vec dx, dh0, dc0;
  for (std::size_t n = 0; n < n_nodes; ++n) {
    const auto& node = tree.nodes[n];
    if (node.is_leaf) continue;
    const auto& k = dec_cache[n];
    const auto li = static_cast<std::size_t>(node.left);
    const auto ri = static_cast<std::size_t>(node.right);
    Vec dh_out(2 * h), dc_out(2 * h);
    dh_out.head(h) = d_dec_in[li].hidden + model.head.backward(k.left_h, d_head[li], grad.head);
    dh_out.tail(h) = d_dec_in[ri].hidden + model.head.backward(k.right_h, d_head[ri], grad.head);
    dc_out.head(h) = d_dec_in[li].cell;
    dc_out.tail(h) = d_dec_in[ri].cell;
    lstm_backward(model.decoder, k.cell, dh_out, dc_out, grad.decoder, dx, dh0, dc0);
    d_dec_in[n].hidden += dx.segment(kParamDim, h) + model.lift_h.backward(k.parent_h, dh0, grad.lift_h);
    d_dec_in[n].cell += dx.segment(kParamDim + h, h) + model.lift_c.backward(k.parent_c, dc0, grad.lift_c);
  }

  // Encoder reverse pass: parents (higher indices) first.
  std::vector<NodeFeature> d_enc(n_nodes, NodeFeature::zeros(h));
  d_enc[root] = d_dec_in[root];
  Vec dh, dc;
  for (std::size_t n = n_nodes; n-- > 0;) {
    const auto& node = tree.nodes[n];
    if (node.is_leaf) continue;
    for (int child : {node.left, node.right}) {
      const auto ci = static_cast<std::size_t>(child);
      lstm_backward(model.encoder, enc_cache[ci], d_enc[n].hidden, d_enc[n].cell, grad.encoder, dx, dh, dc);
      d_enc[ci].hidden += dh;
      d_enc[ci].cell += dc;
    }
  }
  return loss;
}

/// Mean loss over a batch of trees, gradient accumulated in batch order.
inline double forest_loss_and_gradient(std::span<const SpatialTree* const> batch, const AETreeModel& model,
                                       const LossConfig& cfg, AETreeModel& grad) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const SpatialTree* t : batch) total += tree_loss_and_gradient(*t, model, cfg, grad, scale);
  return total * scale;
}

inline double forest_loss(std::span<const SpatialTree* const> batch, const AETreeModel& model, const LossConfig& cfg) {
  double total = 0.0;
  for (const SpatialTree* t : batch) {
    const auto preds = decode_teacher_forced(*t, encode_tree(*t, model), model);
    total += tree_loss(*t, preds, cfg, model.config.representation);
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace aetree
