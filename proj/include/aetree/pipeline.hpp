#pragma once

// Batch commands behind the command-line tool. Every command reads a fully
// resolved RunConfig, writes into its output directory and echoes the config
// there. Outputs depend only on the resolved config and the input files.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "aetree/autoencoder.hpp"
#include "aetree/dataset_io.hpp"
#include "aetree/errors.hpp"
#include "aetree/export.hpp"
#include "aetree/latent_gmm.hpp"
#include "aetree/metrics.hpp"
#include "aetree/spatial_tree.hpp"
#include "aetree/text_io.hpp"
#include "aetree/train.hpp"
#include "aetree/tree_io.hpp"

namespace aetree {

inline constexpr const char* kToolName = "aetree";
inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitSchema = 3,
  kExitDiverged = 4,
  kExitIo = 5,
};

// ---------------------------------------------------------------------------
// Run configuration

struct ParamSpec {
  std::string key;
  std::string default_value;
  std::string help;
};

namespace detail {

inline const std::vector<ParamSpec>& common_params() {
  static const std::vector<ParamSpec> p{
      {"out", "", "output directory (required)"},
      {"seed", "0", "random seed"},
      {"threads", "1", "worker threads; every command currently runs on one"},
      {"verbose", "false", "progress messages on stderr"},
  };
  return p;
}

inline const std::vector<ParamSpec>& selection_params() {
  static const std::vector<ParamSpec> p{
      {"manifest", "", "dataset manifest restricting the sets used"},
      {"split", "train", "manifest split to use (train, val, test)"},
      {"limit", "0", "use only the first N selected sets (0 = all)"},
  };
  return p;
}

inline const std::vector<ParamSpec>& decode_params() {
  static const std::vector<ParamSpec> p{
      {"max-depth", "16", "depth budget of free decoding"},
      {"leaf-threshold", "0.5", "leaf probability above which decoding stops"},
  };
  return p;
}

inline std::map<std::string, std::vector<ParamSpec>> build_command_table() {
  std::map<std::string, std::vector<ParamSpec>> t;
  t["synth"] = {{"rows", "8", "grid rows"},
                {"cols", "8", "grid columns"},
                {"jitter", "0.3", "perturbation strength in [0, 1]"},
                {"spacing", "10", "distance between cell centers"}};
  t["ingest"] = {{"buildings", "", "buildings JSONL file (required)"},
                 {"k", "32", "buildings per layout set"},
                 {"ratios", "0.7,0.1,0.2", "train,val,test split ratios"}};
  t["build-trees"] = {{"layouts", "", "layout sets file (required)"},
                      {"weights", "5,2,0.1,1,1", "SGD weights: center,area,shape,angle,merge"}};
  t["train"] = {{"forest", "", "forest file (required)"},
                {"hidden", "256", "LSTM hidden size"},
                {"representation", "relative", "node parameters: relative or absolute"},
                {"learning-rate", "0.001", "initial ADAM learning rate"},
                {"lr-halving-period", "400", "steps between learning-rate halvings"},
                {"batch-size", "50", "layout sets per mini-batch"},
                {"level-weight-gamma", "0.8", "depth weight decay of the loss"},
                {"bce-weight", "1", "weight of the leaf classification term"},
                {"epochs", "100", "maximum epochs"},
                {"max-steps", "0", "maximum optimizer steps (0 = no cap)"},
                {"checkpoint-every", "1", "epochs between checkpoint writes"}};
  t["reconstruct"] = {{"checkpoint", "", "trained checkpoint (required)"},
                      {"forest", "", "forest file (required)"},
                      {"svg", "true", "write one SVG per layout"}};
  t["fit-gmm"] = {{"checkpoint", "", "trained checkpoint (required)"},
                  {"forest", "", "forest file (required)"},
                  {"components", "5", "comma-separated component counts"},
                  {"cov-types", "full", "comma-separated covariance types"},
                  {"samples", "0", "layouts decoded per grid cell (0 = reference size)"},
                  {"covariance-floor", "1e-6", "diagonal added to every covariance"},
                  {"max-iter", "500", "EM iteration cap"}};
  t["generate"] = {{"checkpoint", "", "trained checkpoint (required)"},
                   {"gmm", "", "fitted mixture file (required)"},
                   {"n", "20", "layouts to generate"},
                   {"reference", "", "forest to score JSD, COV and MMD against"},
                   {"columns", "5", "layouts per row in the SVG sheet"}};
  t["interpolate"] = {{"checkpoint", "", "trained checkpoint (required)"},
                      {"forest", "", "forest file (required)"},
                      {"set-a", "", "id of the start set (required)"},
                      {"set-b", "", "id of the end set (required)"},
                      {"steps", "8", "frames including both endpoints"}};
  t["cluster"] = {{"checkpoint", "", "trained checkpoint (required)"},
                  {"forest", "", "forest file (required)"},
                  {"dim", "2", "PCA dimensions"},
                  {"clusters", "4", "mixture components"},
                  {"regions", "", "optional file of 'set_id region' lines"}};
  t["export"] = {{"layouts", "", "layout sets file (required)"},
                 {"format", "svg", "svg or obj"},
                 {"world", "false", "undo frame normalization before drawing"},
                 {"columns", "8", "layouts per row in the SVG sheet"}};
  auto append = [&](const char* cmd, const std::vector<ParamSpec>& extra) {
    auto& v = t[cmd];
    v.insert(v.end(), extra.begin(), extra.end());
  };
  for (const char* c : {"train", "reconstruct", "fit-gmm", "cluster"}) append(c, selection_params());
  for (const char* c : {"reconstruct", "fit-gmm", "generate", "interpolate"}) append(c, decode_params());
  for (auto& [name, v] : t) v.insert(v.begin(), common_params().begin(), common_params().end());
  return t;
}

inline const std::map<std::string, std::vector<ParamSpec>>& command_table() {
  static const auto t = build_command_table();
  return t;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

}  // namespace detail

inline std::vector<std::string> command_names() {
  std::vector<std::string> out;
  for (const auto& [name, v] : detail::command_table()) out.push_back(name);
  return out;
}

inline const std::vector<ParamSpec>& command_params(const std::string& command) {
  const auto& t = detail::command_table();
  const auto it = t.find(command);
  if (it == t.end()) throw UsageError("unknown command '" + command + "'");
  return it->second;
}

/// Environment variable consulted for a key: AETREE_ + upper-case key with
/// dashes turned into underscores.
inline std::string env_name(const std::string& key) {
  std::string s = "AETREE_";
  for (char c : key) s += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

inline std::optional<std::string> process_env(const std::string& name) {
  const char* v = std::getenv(name.c_str());
  if (!v) return std::nullopt;
  return std::string(v);
}

/// `key = value` lines; blank lines and `#` comments are ignored. Keys not
/// declared by the running command are ignored so one file can serve many.
inline std::map<std::string, std::string> read_config_file(const std::string& path) {
  auto in = text::open_in(path);
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw SchemaError("config: expected 'key = value'", number);
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw SchemaError("config: empty key", number);
    out[key] = detail::trim(std::string_view(t).substr(eq + 1));
  }
  return out;
}

struct RunConfig {
  struct Entry {
    std::string key;
    std::string value;
    /// flag, env, file or default
    std::string source;
  };

  std::string command;
  std::string config_path;
  std::vector<Entry> entries;

  const std::string& str(const std::string& key) const {
    for (const auto& e : entries)
      if (e.key == key) return e.value;
    throw UsageError("command '" + command + "' has no option '" + key + "'");
  }

  const std::string& required(const std::string& key) const {
    const auto& v = str(key);
    if (v.empty()) throw UsageError("--" + key + " is required for '" + command + "'");
    return v;
  }

  double real(const std::string& key) const {
    try {
      return text::parse_double(str(key));
    } catch (const SchemaError&) {
      throw UsageError("--" + key + ": expected a number, got '" + str(key) + "'");
    }
  }

  long long integer(const std::string& key) const {
    try {
      return text::parse_int(str(key));
    } catch (const SchemaError&) {
      throw UsageError("--" + key + ": expected an integer, got '" + str(key) + "'");
    }
  }

  std::uint64_t seed() const {
    const auto& s = str("seed");
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw UsageError("--seed: expected a nonnegative integer");
    return v;
  }

  bool flag(const std::string& key) const {
    const auto& v = str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw UsageError("--" + key + ": expected true or false, got '" + v + "'");
  }

  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : detail::split_list(str(key))) try {
        out.push_back(text::parse_double(s));
      } catch (const SchemaError&) {
        throw UsageError("--" + key + ": expected numbers, got '" + str(key) + "'");
      }
    return out;
  }

  std::vector<std::string> list(const std::string& key) const { return detail::split_list(str(key)); }
};

/// Resolves every option of `command` with precedence flags > environment >
/// config file > defaults. The config file comes from the `config` flag or
/// AETREE_CONFIG.
inline RunConfig resolve_config(const std::string& command, const std::map<std::string, std::string>& flags,
                                const EnvLookup& env = process_env) {
  const auto& specs = command_params(command);
  for (const auto& [key, value] : flags) {
    if (key == "config") continue;
    const bool known = std::any_of(specs.begin(), specs.end(), [&](const ParamSpec& p) { return p.key == key; });
    if (!known) throw UsageError("command '" + command + "' has no option '--" + key + "'");
  }
  RunConfig cfg;
  cfg.command = command;
  if (const auto it = flags.find("config"); it != flags.end())
    cfg.config_path = it->second;
  else if (const auto e = env("AETREE_CONFIG"))
    cfg.config_path = *e;
  std::map<std::string, std::string> file;
  if (!cfg.config_path.empty()) file = read_config_file(cfg.config_path);
  for (const auto& spec : specs) {
    RunConfig::Entry e{spec.key, spec.default_value, "default"};
    if (const auto f = flags.find(spec.key); f != flags.end()) {
      e.value = f->second;
      e.source = "flag";
    } else if (const auto v = env(env_name(spec.key))) {
      e.value = *v;
      e.source = "env";
    } else if (const auto c = file.find(spec.key); c != file.end()) {
      e.value = c->second;
      e.source = "file";
    }
    cfg.entries.push_back(std::move(e));
  }
  if (cfg.integer("threads") < 1) throw UsageError("--threads must be at least 1");
  cfg.flag("verbose");
  return cfg;
}

inline void write_config_echo(std::ostream& out, const RunConfig& cfg) {
  out << "# " << kToolName << ' ' << kToolVersion << '\n';
  out << "command = " << cfg.command << '\n';
  if (!cfg.config_path.empty()) out << "# config file: " << cfg.config_path << '\n';
  for (const auto& e : cfg.entries) out << e.key << " = " << e.value << "  # " << e.source << '\n';
}

// ---------------------------------------------------------------------------
// Command plumbing

struct CommandResult {
  /// One-line human summary.
  std::string summary;
  MetricReport report;
  std::size_t count = 0;
};

namespace detail {

class Context {
 public:
  explicit Context(const RunConfig& cfg, std::ostream& log)
      : cfg_(cfg), log_(log), verbose_(cfg.flag("verbose")), out_(cfg.required("out")) {
    std::error_code ec;
    std::filesystem::create_directories(out_, ec);
    if (ec || !std::filesystem::is_directory(out_)) throw IoError("cannot create output directory '" + out_.string() + "'");
    write("run_config.txt", [&](std::ostream& o) { write_config_echo(o, cfg_); });
  }

  const RunConfig& cfg() const { return cfg_; }

  std::string path(const std::string& name) const { return (out_ / name).string(); }

  void info(const std::string& msg) const {
    if (verbose_) log_ << "[" << cfg_.command << "] " << msg << '\n';
  }

  void warn(const std::string& msg) const { log_ << "warning: " << msg << '\n'; }

  /// Writes via a temporary file and a rename so a reader never sees a torn file.
  template <class F>
  void write(const std::string& name, F&& body) const {
    const auto final_path = out_ / name;
    std::filesystem::create_directories(final_path.parent_path());
    const auto tmp = final_path.string() + ".tmp";
    {
      std::ofstream o(tmp, std::ios::binary);
      if (!o) throw IoError("cannot open '" + tmp + "' for writing");
      body(o);
      o.flush();
      if (!o) throw IoError("write failed for '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, final_path, ec);
    if (ec) throw IoError("cannot rename '" + tmp + "': " + ec.message());
  }

 private:
  const RunConfig& cfg_;
  std::ostream& log_;
  bool verbose_;
  std::filesystem::path out_;
};

inline std::vector<SpatialTree> select_trees(std::vector<SpatialTree> forest, const RunConfig& cfg) {
  if (const auto& manifest_path = cfg.str("manifest"); !manifest_path.empty()) {
    Split s{};
    try {
      s = parse_split(cfg.str("split"));
    } catch (const SchemaError&) {
      throw UsageError("--split must be train, val or test");
    }
    auto in = text::open_in(manifest_path);
    const auto ids = read_manifest(in).ids(s);
    const std::set<std::string> keep(ids.begin(), ids.end());
    std::erase_if(forest, [&](const SpatialTree& t) { return !keep.count(t.id); });
  }
  const long long limit = cfg.integer("limit");
  if (limit < 0) throw UsageError("--limit must be nonnegative");
  if (limit > 0 && static_cast<std::size_t>(limit) < forest.size()) forest.resize(static_cast<std::size_t>(limit));
  if (forest.empty()) throw InvalidArgument("no layout sets selected");
  return forest;
}

inline FreeDecodeOptions decode_options(const RunConfig& cfg) {
  FreeDecodeOptions o;
  o.max_depth = static_cast<int>(cfg.integer("max-depth"));
  o.leaf_threshold = cfg.real("leaf-threshold");
  if (o.max_depth < 1) throw UsageError("--max-depth must be at least 1");
  if (!(o.leaf_threshold > 0 && o.leaf_threshold < 1)) throw UsageError("--leaf-threshold must lie in (0, 1)");
  return o;
}

inline LatentMatrix latent_rows(std::span<const SpatialTree> forest, const AETreeModel& model) {
  const auto feats = encode_forest(forest, model);
  LatentMatrix x(static_cast<Eigen::Index>(feats.size()), 2 * model.hidden());
  for (std::size_t i = 0; i < feats.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = feats[i].concat().transpose();
  return x;
}

inline std::vector<Cuboid> decode_code(const Params& root, const LatentVector& code, const AETreeModel& model,
                                       const FreeDecodeOptions& opt) {
  return decode_free(root, NodeFeature::split(code), model, opt);
}

inline std::vector<PointCloud> clouds(std::span<const std::vector<Cuboid>> layouts) {
  std::vector<PointCloud> out;
  out.reserve(layouts.size());
  for (const auto& l : layouts) out.push_back(layout_to_points(l, CloudMode::k3D));
  return out;
}

inline std::vector<std::vector<Cuboid>> leaf_sets(std::span<const SpatialTree> forest) {
  std::vector<std::vector<Cuboid>> out;
  for (const auto& t : forest) out.push_back(t.leaves());
  return out;
}

// (l, w, a) and (w, l, a -+ pi/2) are the same rectangle. Roots are folded to
// |a| <= pi/4 before averaging so near-square roots on either side of the fold
// cannot average into a rotated frame.
inline Params folded_root(const SpatialTree& t) {
  auto p = to_params(t.nodes[static_cast<std::size_t>(t.root)].box);
  if (std::abs(p[5]) > kPi / 4) {
    std::swap(p[2], p[3]);
    p[5] -= std::copysign(kPi / 2, p[5]);
  }
  return p;
}

/// Region box of each mixture component: the responsibility-weighted mean of
/// the folded roots of the sets whose codes are rows of `x`. A sampled code is
/// decoded inside the box of the component it was drawn from.
inline std::vector<RootBox> component_roots(const GmmModel& m, const LatentMatrix& x, std::span<const SpatialTree> forest) {
  const LatentMatrix resp = gmm_responsibilities(m, x);
  std::vector<RootBox> roots(static_cast<std::size_t>(m.components()), RootBox{});
  Params mean{};
  for (std::size_t i = 0; i < forest.size(); ++i) {
    const auto p = folded_root(forest[i]);
    for (std::size_t j = 0; j < p.size(); ++j) mean[j] += p[j] / static_cast<double>(forest.size());
    for (int k = 0; k < m.components(); ++k)
      for (std::size_t j = 0; j < p.size(); ++j)
        roots[static_cast<std::size_t>(k)][j] += resp(static_cast<Eigen::Index>(i), k) * p[j];
  }
  const Eigen::VectorXd mass = resp.colwise().sum().transpose();
  for (int k = 0; k < m.components(); ++k) {
    auto& r = roots[static_cast<std::size_t>(k)];
    // a component no set belongs to falls back to the overall mean box
    if (mass[k] < 1e-12) r = mean;
    else
      for (double& v : r) v /= mass[k];
  }
  return roots;
}

inline std::vector<std::vector<Cuboid>> decode_samples(const GmmModel& m, std::span<const RootBox> roots, int n,
                                                       std::uint64_t seed, const AETreeModel& model,
                                                       const FreeDecodeOptions& opt) {
  std::vector<int> component;
  const LatentMatrix z = gmm_sample(m, n, seed, &component);
  std::vector<std::vector<Cuboid>> out;
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    out.push_back(decode_code(roots[static_cast<std::size_t>(component[static_cast<std::size_t>(i)])],
                              z.row(i).transpose(), model, opt));
  return out;
}

inline std::string pad(std::size_t i, int width) {
  std::string s = std::to_string(i);
  return std::string(s.size() < static_cast<std::size_t>(width) ? width - s.size() : 0, '0') + s;
}

inline std::string safe_file_name(const std::string& id) {
  std::string s;
  for (char c : id) s += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.' ? c : '_';
  return s;
}

inline std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", v * 100);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands

/// Synthetic buildings file for experiments without real data.
inline CommandResult cmd_synth(const RunConfig& cfg, std::ostream& log = std::cerr) {
  detail::Context ctx(cfg, log);
  SynthStyle style;
  style.spacing = cfg.real("spacing");
  if (!(style.spacing > 0)) throw UsageError("--spacing must be positive");
  style.base_length = 0.6 * style.spacing;
  style.base_width = 0.4 * style.spacing;
  const auto recs = synth_city(static_cast<int>(cfg.integer("rows")), static_cast<int>(cfg.integer("cols")),
                               cfg.real("jitter"), cfg.seed(), style);
  ctx.write("buildings.jsonl", [&](std::ostream& o) { write_buildings(o, recs); });
  return {"wrote " + std::to_string(recs.size()) + " buildings", {}, recs.size()};
}

inline CommandResult cmd_ingest(const RunConfig& cfg, std::ostream& log = std::cerr) {
  detail::Context ctx(cfg, log);
  auto in = text::open_in(cfg.required("buildings"));
  const auto records = read_buildings(in);
  auto ingest = to_buildings(records);
  for (const auto& w : ingest.warnings) ctx.warn(w);
  const long long k = cfg.integer("k");
  if (k < 2) throw UsageError("--k must be at least 2");
  const auto r = cfg.reals("ratios");
  if (r.size() != 3) throw UsageError("--ratios needs three values");
  const auto sets = build_layout_sets(ingest.buildings, static_cast<std::size_t>(k));
  std::vector<std::string> ids;
  for (const auto& s : sets) ids.push_back(s.id);
  auto manifest = split(ids, {r[0], r[1], r[2]}, cfg.seed());
  manifest.notes = ingest.warnings;
  ctx.write("layouts.txt", [&](std::ostream& o) { write_layouts(o, sets); });
  ctx.write("manifest.txt", [&](std::ostream& o) { write_manifest(o, manifest); });
  const auto train_n = manifest.ids(Split::kTrain).size(), val_n = manifest.ids(Split::kVal).size(),
             test_n = manifest.ids(Split::kTest).size();
  ctx.info(std::to_string(records.size()) + " records, " + std::to_string(ingest.warnings.size()) + " skipped");
  return {std::to_string(sets.size()) + " layout sets (" + std::to_string(train_n) + "/" + std::to_string(val_n) + "/" +
              std::to_string(test_n) + ")",
          {},
          sets.size()};
}

inline CommandResult cmd_build_trees(const RunConfig& cfg, std::ostream& log = std::cerr) {
  detail::Context ctx(cfg, log);
  const auto w = cfg.reals("weights");
  if (w.size() != 5) throw UsageError("--weights needs five values");
  const SgdWeights weights{w[0], w[1], w[2], w[3], w[4]};
  try {
    weights.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(std::string("--weights: ") + e.what());
  }
  const auto sets = load_layouts(cfg.required("layouts"));
  std::vector<SpatialTree> forest;
  std::vector<std::pair<std::string, std::string>> skipped;
  for (const auto& s : sets) {
    try {
      forest.push_back(build_tree(s, weights));
    } catch (const std::domain_error& e) {
      skipped.emplace_back(s.id, e.what());
    } catch (const InvalidArgument& e) {
      skipped.emplace_back(s.id, e.what());
    }
  }
  for (const auto& [id, why] : skipped) ctx.warn("skipped set '" + id + "': " + why);
  ctx.write("forest.txt", [&](std::ostream& o) { write_forest(o, forest); });
  ctx.write("skipped.txt", [&](std::ostream& o) {
    for (const auto& [id, why] : skipped) o << id << ' ' << why << '\n';
  });
  return {std::to_string(forest.size()) + " trees, " + std::to_string(skipped.size()) + " skipped", {}, forest.size()};
}

inline TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.learning_rate = cfg.real("learning-rate");
  t.lr_halving_period_steps = static_cast<int>(cfg.integer("lr-halving-period"));
  t.batch_size_sets = static_cast<int>(cfg.integer("batch-size"));
  t.level_weight_gamma = cfg.real("level-weight-gamma");
  t.bce_weight = cfg.real("bce-weight");
  t.max_epochs = static_cast<int>(cfg.integer("epochs"));
  t.max_steps = static_cast<int>(cfg.integer("max-steps"));
  t.rng_seed = cfg.seed();
  try {
    t.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  return t;
}

/// Writes checkpoint.txt every `checkpoint-every` epochs and at the end, and
/// loss.csv with every completed step. On divergence the last good checkpoint
/// stays in place and loss.csv holds the steps before the failure.
inline CommandResult cmd_train(const RunConfig& cfg, std::ostream& log = std::cerr) {
  detail::Context ctx(cfg, log);
  const TrainConfig tc = train_config(cfg);
  ModelConfig mc;
  mc.hidden = static_cast<int>(cfg.integer("hidden"));
  if (mc.hidden < 1) throw UsageError("--hidden must be positive");
  try {
    mc.representation = parse_representation(cfg.str("representation"));
  } catch (const std::exception&) {
    throw UsageError("--representation must be relative or absolute");
  }
  const long long every = cfg.integer("checkpoint-every");
  if (every < 1) throw UsageError("--checkpoint-every must be at least 1");
  const auto forest = detail::select_trees(load_forest(cfg.required("forest")), cfg);
  ctx.info("training on " + std::to_string(forest.size()) + " sets");

  std::vector<LossRecord> history;
  TrainHooks hooks;
  hooks.on_step = [&](const LossRecord& r) {
    history.push_back(r);
    if (r.step % 100 == 0) ctx.info("step " + std::to_string(r.step) + " loss " + text::fmt(r.loss));
  };
  hooks.on_epoch = [&](const AETreeModel& m, int epoch, long long) {
    if ((epoch + 1) % every == 0)
      ctx.write("checkpoint.txt", [&](std::ostream& o) { write_checkpoint(o, m, tc); });
  };
  auto write_loss = [&] { ctx.write("loss.csv", [&](std::ostream& o) { write_loss_csv(o, history); }); };
  TrainResult result;
  try {
    result = train(forest, tc, mc, hooks);
  } catch (const TrainingDivergedError&) {
    write_loss();
    throw;
  }
  write_loss();
  ctx.write("checkpoint.txt", [&](std::ostream& o) { write_checkpoint(o, result.model, tc); });
  const double last = history.empty() ? 0.0 : history.back().loss;
  return {std::to_string(history.size()) + " steps, final loss " + text::fmt(last), {}, history.size()};
}

/// Free decoding of every selected tree from its own root box and code.
/// Chamfer and OAR cover all layouts; EMD averages over layouts whose
/// reconstruction has the input's cuboid count.
inline CommandResult cmd_reconstruct(const RunConfig& cfg, std::ostream& log = std::cerr) {
  detail::Context ctx(cfg, log);
  const auto opt = detail::decode_options(cfg);
  const auto ck = load_checkpoint(cfg.required("checkpoint"));
  const auto forest = detail::select_trees(load_forest(cfg.required("forest")), cfg);
  const bool svg = cfg.flag("svg");
  const auto feats = encode_forest(forest, ck.model);

  std::vector<LayoutSet> recon;
  std::vector<std::vector<Cuboid>> gt, rec;
  std::ostringstream per;
  per << "id,input_cuboids,output_cuboids,cd,emd,oar_input,oar_output\n";
  double cd_sum = 0.0, emd_sum = 0.0;
  std::size_t emd_n = 0;
  for (std::size_t i = 0; i < forest.size(); ++i) {
    const auto& t = forest[i];
    auto leaves = decode_free(to_params(t.nodes[static_cast<std::size_t>(t.root)].box), feats[i], ck.model, opt);
    auto truth = t.leaves();
    const auto a = layout_to_points(truth, CloudMode::k3D), b = layout_to_points(leaves, CloudMode::k3D);
    const double cd = chamfer(a, b);
    cd_sum += cd;
    std::optional<double> e;
    if (a.size() == b.size()) {
      e = emd(a, b);
      emd_sum += *e;
      ++emd_n;
    }
    per << t.id << ',' << truth.size() << ',' << leaves.size() << ',' << text::fmt(cd) << ','
        << (e ? text::fmt(*e) : std::string()) << ',' << text::fmt(oar(truth)) << ',' << text::fmt(oar(leaves)) << '\n';
    if (svg) {
      const std::vector<NamedLayout> pair{{t.id + " input", truth}, {t.id + " reconstruction", leaves}};
      ctx.write("svg/" + detail::safe_file_name(t.id) + ".svg", [&](std::ostream& o) { write_svg(o, pair); });
    }
    recon.push_back({t.id, leaves, t.frame});
    gt.push_back(std::move(truth));
    rec.push_back(std::move(leaves));
  }
  MetricReport r;
  r.cd = cd_sum / static_cast<double>(forest.size());
  if (emd_n) r.emd = emd_sum / static_cast<double>(emd_n);
  r.oar = oar_pooled(rec);
  const double oar_in = oar_pooled(gt);
  ctx.write("reconstructions.txt", [&](std::ostream& o) { write_layouts(o, recon); });
  ctx.write("per_layout.csv", [&](std::ostream& o) { o << per.str(); });
  ctx.write("report.csv", [&](std::ostream& o) { write_report_csv(o, r); });
  ctx.write("report.txt", [&](std::ostream& o) {
    write_report_table(o, r);
    o << "OAR of the input sets: " << detail::pct(oar_in) << '\n';
    o << "EMD over " << emd_n << " of " << forest.size() << " layouts with matching cuboid counts\n";
  });
  return {"CD " + text::fmt(*r.cd) + ", OAR " + detail::pct(*r.oar) + " (input " + detail::pct(oar_in) + ")", r,
          forest.size()};
}

/// Grid search over (K, covariance type). Each cell decodes `samples` codes
/// drawn from its mixture and is scored by JSD against the selected sets.
inline CommandResult cmd_fit_gmm(const RunConfig& cfg, std::ostream& log = std::cerr) {
  detail::Context ctx(cfg, log);
  const auto opt = detail::decode_options(cfg);
  const auto ck = load_checkpoint(cfg.required("checkpoint"));
  const auto forest = detail::select_trees(load_forest(cfg.required("forest")), cfg);
  std::vector<int> ks;
  for (double v : cfg.reals("components")) {
    if (!(v >= 1) || v != std::floor(v)) throw UsageError("--components must be positive integers");
    ks.push_back(static_cast<int>(v));
  }
  std::vector<CovarianceType> types;
  for (const auto& s : cfg.list("cov-types")) try {
      types.push_back(parse_covariance(s));
    } catch (const std::exception&) {
      throw UsageError("--cov-types: unknown covariance type '" + s + "'");
    }
  if (ks.empty() || types.empty()) throw UsageError("--components and --cov-types must not be empty");
  GmmFitOptions fit;
  fit.covariance_floor = cfg.real("covariance-floor");
  fit.max_iterations = static_cast<int>(cfg.integer("max-iter"));
  if (!(fit.covariance_floor > 0) || fit.max_iterations < 1) throw UsageError("covariance floor and max-iter must be positive");
  const long long samples_flag = cfg.integer("samples");
  if (samples_flag < 0) throw UsageError("--samples must be nonnegative");
  const int samples = samples_flag > 0 ? static_cast<int>(samples_flag) : static_cast<int>(forest.size());

  const LatentMatrix x = detail::latent_rows(forest, ck.model);
  const auto ref = detail::clouds(detail::leaf_sets(forest));
  const std::uint64_t seed = cfg.seed();
  auto eval = [&](const GmmModel& m) {
    const auto roots = detail::component_roots(m, x, forest);
    const auto gen = detail::decode_samples(m, roots, samples, seed, ck.model, opt);
    const double score = jsd(ref, detail::clouds(gen));
    ctx.info("K=" + std::to_string(m.components()) + " " + covariance_name(m.type) + " jsd " + text::fmt(score));
    return score;
  };
  const auto grid = gmm_grid_search(x, ks, types, seed, eval, fit);
  ctx.write("grid.csv", [&](std::ostream& o) { write_grid_csv(o, grid); });
  ctx.write("gmm.txt", [&](std::ostream& o) { write_gmm(o, grid.best_model, detail::component_roots(grid.best_model, x, forest)); });
  const auto& best = grid.table[grid.best];
  return {"best K=" + std::to_string(best.components) + " " + covariance_name(best.type) + " jsd " + text::fmt(best.jsd),
          {},
          grid.table.size()};
}

inline CommandResult cmd_generate(const RunConfig& cfg, std::ostream& log = std::cerr) {
  detail::Context ctx(cfg, log);
  const auto opt = detail::decode_options(cfg);
  const auto ck = load_checkpoint(cfg.required("checkpoint"));
  auto gin = text::open_in(cfg.required("gmm"));
  const auto g = read_gmm(gin);
  if (g.roots.empty()) throw SchemaError("mixture file has no root lines; refit it with fit-gmm");
  if (g.model.dim() != 2 * ck.model.hidden())
    throw InvalidArgument("mixture dimension " + std::to_string(g.model.dim()) + " does not match the checkpoint code size " +
                          std::to_string(2 * ck.model.hidden()));
  const long long n = cfg.integer("n");
  if (n < 1) throw UsageError("--n must be positive");
  const long long columns = cfg.integer("columns");
  if (columns < 1) throw UsageError("--columns must be positive");

  const auto gen = detail::decode_samples(g.model, g.roots, static_cast<int>(n), cfg.seed(), ck.model, opt);
  std::vector<LayoutSet> sets;
  std::vector<NamedLayout> named;
  for (std::size_t i = 0; i < gen.size(); ++i) {
    const std::string id = "gen_" + detail::pad(i, 4);
    sets.push_back({id, gen[i], {}});
    named.push_back({id, gen[i]});
  }
  MetricReport r;
  r.oar = oar_pooled(gen);
  if (const auto& ref_path = cfg.str("reference"); !ref_path.empty()) {
    const auto ref = detail::clouds(detail::leaf_sets(load_forest(ref_path)));
    const auto gc = detail::clouds(gen);
    r.jsd = jsd(ref, gc);
    r.cov = coverage(ref, gc);
    r.mmd = mmd(ref, gc);
  }
  ctx.write("generated.txt", [&](std::ostream& o) { write_layouts(o, sets); });
  ctx.write("generated.svg", [&](std::ostream& o) { write_svg(o, named, {.columns = static_cast<int>(columns)}); });
  ctx.write("report.csv", [&](std::ostream& o) { write_report_csv(o, r); });
  ctx.write("report.txt", [&](std::ostream& o) { write_report_table(o, r); });
  std::string summary = std::to_string(gen.size()) + " layouts, OAR " + detail::pct(*r.oar);
  if (r.jsd) summary += ", JSD " + text::fmt(*r.jsd);
  return {summary, r, gen.size()};
}

/// Linear interpolation of both root codes and root boxes; frame 0 and the
/// last frame are the direct reconstructions of the two sets.
inline CommandResult cmd_interpolate(const RunConfig& cfg, std::ostream& log = std::cerr) {
  detail::Context ctx(cfg, log);
  const auto opt = detail::decode_options(cfg);
  const auto ck = load_checkpoint(cfg.required("checkpoint"));
  const auto forest = load_forest(cfg.required("forest"));
  const long long steps = cfg.integer("steps");
  if (steps < 2) throw UsageError("--steps must be at least 2");
  auto find = [&](const std::string& id) -> const SpatialTree& {
    for (const auto& t : forest)
      if (t.id == id) return t;
    throw InvalidArgument("no set with id '" + id + "' in the forest");
  };
  const auto& a = find(cfg.required("set-a"));
  const auto& b = find(cfg.required("set-b"));
  const auto ca = encode_tree(a, ck.model).concat(), cb = encode_tree(b, ck.model).concat();
  const auto ra = to_params(a.nodes[static_cast<std::size_t>(a.root)].box);
  const auto rb = to_params(b.nodes[static_cast<std::size_t>(b.root)].box);
  const auto codes = interpolate(ca, cb, static_cast<int>(steps));
  std::vector<LayoutSet> sets;
  std::vector<NamedLayout> named;
  for (std::size_t k = 0; k < codes.size(); ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(codes.size() - 1);
    Params root{};
    for (std::size_t j = 0; j < root.size(); ++j) root[j] = (1.0 - t) * ra[j] + t * rb[j];
    const std::string id = "step_" + detail::pad(k, 2);
    auto leaves = detail::decode_code(root, codes[k], ck.model, opt);
    const std::vector<NamedLayout> one{{id, leaves}};
    ctx.write(id + ".svg", [&](std::ostream& o) { write_svg(o, one); });
    sets.push_back({id, leaves, {}});
    named.push_back({id, std::move(leaves)});
  }
  ctx.write("interpolation.txt", [&](std::ostream& o) { write_layouts(o, sets); });
  ctx.write("strip.svg", [&](std::ostream& o) { write_svg(o, named); });
  return {std::to_string(codes.size()) + " frames from '" + a.id + "' to '" + b.id + "'", {}, codes.size()};
}

/// Clusters root codes after PCA. Layout features are measured in world
/// units (frame normalization undone) so absolute building size counts.
inline CommandResult cmd_cluster(const RunConfig& cfg, std::ostream& log = std::cerr) {
  detail::Context ctx(cfg, log);
  const auto ck = load_checkpoint(cfg.required("checkpoint"));
  const auto forest = detail::select_trees(load_forest(cfg.required("forest")), cfg);
  const long long d = cfg.integer("dim"), k = cfg.integer("clusters");
  if (d < 1 || k < 1) throw UsageError("--dim and --clusters must be positive");
  const LatentMatrix x = detail::latent_rows(forest, ck.model);
  std::vector<std::vector<Cuboid>> world;
  for (const auto& t : forest) world.push_back(denormalize({t.id, t.leaves(), t.frame}).cuboids);
  const auto r = cluster_latents(x, world, static_cast<int>(d), static_cast<int>(k), cfg.seed());

  ctx.write("labels.csv", [&](std::ostream& o) {
    o << "id,cluster\n";
    for (std::size_t i = 0; i < forest.size(); ++i) o << forest[i].id << ',' << r.labels[i] << '\n';
  });
  ctx.write("features.csv", [&](std::ostream& o) {
    o << "cluster,count";
    for (const char* n : kLayoutFeatureNames) o << ',' << n;
    for (const char* n : kLayoutFeatureNames) o << ",raw_" << n;
    o << '\n';
    for (int c = 0; c < static_cast<int>(k); ++c) {
      o << c << ',' << r.counts[static_cast<std::size_t>(c)];
      for (int j = 0; j < kLayoutFeatureCount; ++j) o << ',' << text::fmt(r.table(c, j));
      for (int j = 0; j < kLayoutFeatureCount; ++j) o << ',' << text::fmt(r.raw_table(c, j));
      o << '\n';
    }
  });
  ctx.write("pca.txt", [&](std::ostream& o) { write_pca(o, r.pca); });
  ctx.write("gmm.txt", [&](std::ostream& o) { write_gmm(o, r.gmm); });

  if (const auto& regions_path = cfg.str("regions"); !regions_path.empty()) {
    auto in = text::open_in(regions_path);
    text::LineReader reader(in);
    std::map<std::string, std::string> region_of;
    std::string line;
    while (reader.next(line)) {
      const auto f = text::split_ws(line);
      if (f.size() != 2) throw SchemaError("regions: expected 'set_id region'", reader.line());
      region_of[std::string(f[0])] = std::string(f[1]);
    }
    std::vector<std::string> regions;
    for (const auto& t : forest) {
      const auto it = region_of.find(t.id);
      if (it == region_of.end()) throw SchemaError("regions: no region for set '" + t.id + "'");
      regions.push_back(it->second);
    }
    const auto comp = composition_deviation(r.labels, static_cast<int>(k), regions);
    ctx.write("composition.csv", [&](std::ostream& o) {
      o << "region";
      for (int c = 0; c < static_cast<int>(k); ++c) o << ",cluster_" << c << "_pp";
      o << '\n' << "global_fraction";
      for (double g : comp.global) o << ',' << text::fmt(g);
      o << '\n';
      for (std::size_t reg = 0; reg < comp.regions.size(); ++reg) {
        o << comp.regions[reg];
        for (int c = 0; c < static_cast<int>(k); ++c)
          o << ',' << text::fmt(comp.deviation_pp(static_cast<Eigen::Index>(reg), c));
        o << '\n';
      }
    });
  }
  std::string counts;
  for (int c : r.counts) counts += (counts.empty() ? "" : "/") + std::to_string(c);
  return {std::to_string(forest.size()) + " sets in clusters " + counts, {}, forest.size()};
}

inline CommandResult cmd_export(const RunConfig& cfg, std::ostream& log = std::cerr) {
  detail::Context ctx(cfg, log);
  const auto sets = load_layouts(cfg.required("layouts"));
  const bool world = cfg.flag("world");
  const long long columns = cfg.integer("columns");
  if (columns < 1) throw UsageError("--columns must be positive");
  std::vector<NamedLayout> named;
  std::size_t cuboids = 0;
  for (const auto& s : sets) {
    named.push_back({s.id, world ? denormalize(s).cuboids : s.cuboids});
    cuboids += s.cuboids.size();
  }
  const auto& format = cfg.str("format");
  if (format == "svg")
    ctx.write("layouts.svg", [&](std::ostream& o) { write_svg(o, named, {.columns = static_cast<int>(columns)}); });
  else if (format == "obj")
    ctx.write("layouts.obj", [&](std::ostream& o) { write_obj(o, named); });
  else
    throw UsageError("--format must be svg or obj");
  return {std::to_string(sets.size()) + " layouts, " + std::to_string(cuboids) + " cuboids as " + format, {}, sets.size()};
}

// ---------------------------------------------------------------------------
// Dispatch

inline CommandResult run_command(const RunConfig& cfg, std::ostream& log = std::cerr) {
  using Fn = CommandResult (*)(const RunConfig&, std::ostream&);
  static const std::map<std::string, Fn> table{
      {"synth", cmd_synth},       {"ingest", cmd_ingest},   {"build-trees", cmd_build_trees},
      {"train", cmd_train},       {"reconstruct", cmd_reconstruct}, {"fit-gmm", cmd_fit_gmm},
      {"generate", cmd_generate}, {"interpolate", cmd_interpolate}, {"cluster", cmd_cluster},
      {"export", cmd_export},
  };
  const auto it = table.find(cfg.command);
  if (it == table.end()) throw UsageError("unknown command '" + cfg.command + "'");
  return it->second(cfg, log);
}

/// Maps the exception in flight to an exit code and prints it.
inline int exit_code_for_current_exception(std::ostream& err) {
  try {
    throw;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    err << "invalid argument: " << e.what() << '\n';
    return kExitUsage;
  } catch (const SchemaError& e) {
    err << "schema error: " << e.what() << '\n';
    return kExitSchema;
  } catch (const TrainingDivergedError& e) {
    err << "numeric divergence: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const ComponentCollapseError& e) {
    err << "numeric divergence: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

/// Resolves and runs one command; prints the summary on success.
inline int run_cli_command(const std::string& command, const std::map<std::string, std::string>& flags,
                           std::ostream& out = std::cout, std::ostream& err = std::cerr,
                           const EnvLookup& env = process_env) {
  try {
    const auto cfg = resolve_config(command, flags, env);
    const auto r = run_command(cfg, err);
    out << r.summary << '\n';
    return kExitOk;
  } catch (...) {
    return exit_code_for_current_exception(err);
  }
}

}  // namespace aetree
