#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "aetree/pipeline.hpp"

using namespace aetree;
namespace fs = std::filesystem;

namespace {

using Flags = std::map<std::string, std::string>;

std::optional<std::string> no_env(const std::string&) { return std::nullopt; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::path(testing::TempDir()) / ("aetree_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

int run(const std::string& cmd, Flags flags, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int rc = run_cli_command(cmd, flags, out, err, no_env);
  if (err_text) *err_text = err.str();
  if (rc != 0 && !err_text) ADD_FAILURE() << cmd << " failed (" << rc << "): " << err.str();
  return rc;
}

/// A small end-to-end workspace shared by the command tests: a synthetic
/// 8x8 city, sets of 8 buildings, trees and a briefly trained model.
class Workspace : public testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = scratch("ws");
    ASSERT_EQ(run("synth", {{"out", (root_ / "synth").string()}, {"seed", "7"}}), 0);
    ASSERT_EQ(run("ingest", {{"out", (root_ / "ingest").string()},
                             {"buildings", (root_ / "synth/buildings.jsonl").string()},
                             {"k", "8"},
                             {"seed", "3"}}),
              0);
    ASSERT_EQ(run("build-trees",
                  {{"out", (root_ / "trees").string()}, {"layouts", (root_ / "ingest/layouts.txt").string()}}),
              0);
    ASSERT_EQ(run("train", {{"out", (root_ / "train").string()},
                            {"forest", forest()},
                            {"manifest", (root_ / "ingest/manifest.txt").string()},
                            {"hidden", "8"},
                            {"learning-rate", "0.01"},
                            {"batch-size", "4"},
                            {"epochs", "3"},
                            {"seed", "1"}}),
              0);
  }

  static std::string forest() { return (root_ / "trees/forest.txt").string(); }
  static std::string checkpoint() { return (root_ / "train/checkpoint.txt").string(); }

  static fs::path root_;
};

fs::path Workspace::root_;

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(RunConfig, PrecedenceFlagsEnvFileDefaults) {
  const auto dir = scratch("config");
  fs::create_directories(dir);
  const auto file = dir / "run.cfg";
  std::ofstream(file) << "# shared\nhidden = 12\nlearning-rate = 0.5\nepochs = 9\nunrelated-key = 1\n";
  auto env = [](const std::string& name) -> std::optional<std::string> {
    if (name == "AETREE_LEARNING_RATE") return "0.25";
    if (name == "AETREE_EPOCHS") return "7";
    return std::nullopt;
  };
  const auto cfg = resolve_config("train", {{"config", file.string()}, {"epochs", "5"}}, env);
  EXPECT_EQ(cfg.integer("epochs"), 5);         // flag beats env and file
  EXPECT_EQ(cfg.real("learning-rate"), 0.25);  // env beats file
  EXPECT_EQ(cfg.integer("hidden"), 12);        // file beats default
  EXPECT_EQ(cfg.integer("batch-size"), 50);    // default
  std::map<std::string, std::string> source;
  for (const auto& e : cfg.entries) source[e.key] = e.source;
  EXPECT_EQ(source["epochs"], "flag");
  EXPECT_EQ(source["learning-rate"], "env");
  EXPECT_EQ(source["hidden"], "file");
  EXPECT_EQ(source["batch-size"], "default");
}

TEST(RunConfig, ConfigPathFromEnvironment) {
  const auto dir = scratch("config_env");
  fs::create_directories(dir);
  const auto file = dir / "run.cfg";
  std::ofstream(file) << "k = 5\n";
  auto env = [&](const std::string& name) -> std::optional<std::string> {
    if (name == "AETREE_CONFIG") return file.string();
    return std::nullopt;
  };
  EXPECT_EQ(resolve_config("ingest", {}, env).integer("k"), 5);
}

TEST(RunConfig, RejectsUnknownOptionsAndBadValues) {
  EXPECT_THROW(resolve_config("train", {{"no-such-option", "1"}}, no_env), UsageError);
  EXPECT_THROW(resolve_config("no-such-command", {}, no_env), UsageError);
  EXPECT_THROW(resolve_config("train", {{"threads", "0"}}, no_env), UsageError);
  const auto cfg = resolve_config("train", {{"epochs", "many"}}, no_env);
  EXPECT_THROW(cfg.integer("epochs"), UsageError);
}

TEST(RunConfig, MalformedConfigFileIsSchemaError) {
  const auto dir = scratch("config_bad");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.cfg") << "hidden 12\n";
  EXPECT_THROW(resolve_config("train", {{"config", (dir / "bad.cfg").string()}}, no_env), SchemaError);
}

TEST(RunConfig, EnvNames) {
  EXPECT_EQ(env_name("learning-rate"), "AETREE_LEARNING_RATE");
  EXPECT_EQ(env_name("seed"), "AETREE_SEED");
}

TEST(RunConfig, EveryCommandHasTheGlobalOptions) {
  for (const auto& name : command_names()) {
    const auto& params = command_params(name);
    for (const char* key : {"out", "seed", "threads", "verbose"})
      EXPECT_TRUE(std::any_of(params.begin(), params.end(), [&](const ParamSpec& p) { return p.key == key; }))
          << name << " lacks " << key;
  }
}

// ---------------------------------------------------------------------------
// Exit codes

TEST(ExitCodes, DistinctPerFailureKind) {
  const auto dir = scratch("exit");
  fs::create_directories(dir);
  std::string err;
  EXPECT_EQ(run("train", {{"bogus", "1"}}, &err), kExitUsage);
  EXPECT_EQ(run("ingest", {{"out", (dir / "o").string()}}, &err), kExitUsage);  // missing --buildings

  std::ofstream(dir / "empty.jsonl").close();
  EXPECT_EQ(run("ingest", {{"out", (dir / "o").string()}, {"buildings", (dir / "empty.jsonl").string()}}, &err),
            kExitSchema);
  EXPECT_NE(err.find("schema"), std::string::npos);

  EXPECT_EQ(run("ingest", {{"out", (dir / "o").string()}, {"buildings", (dir / "missing.jsonl").string()}}, &err),
            kExitIo);

  // a NaN in the training data makes the very first step non-finite
  LayoutSet s{"nan", {{0, 0, 1, 1, 1, 0}, {2, 0, 1, 1, 1, 0}, {0, 3, 1, 1, 1, 0}}, {}};
  auto tree = build_tree(normalize_frame(s));
  tree.nodes[0].rel[0] = std::numeric_limits<double>::quiet_NaN();
  save_forest((dir / "nan_forest.txt").string(), {tree});
  EXPECT_EQ(run("train", {{"out", (dir / "t").string()},
                          {"forest", (dir / "nan_forest.txt").string()},
                          {"hidden", "4"},
                          {"epochs", "2"}},
                &err),
            kExitDiverged);
  EXPECT_TRUE(fs::exists(dir / "t/loss.csv"));
  EXPECT_FALSE(fs::exists(dir / "t/checkpoint.txt"));
}

// ---------------------------------------------------------------------------
// Commands

TEST_F(Workspace, IngestSplitsSixtyFourSets) {
  const auto manifest = lines(root_ / "ingest/manifest.txt");
  std::map<std::string, int> counts;
  for (const auto& l : manifest)
    if (l.rfind("set ", 0) == 0) ++counts[l.substr(l.rfind(' ') + 1)];
  EXPECT_EQ(counts["train"], 45);
  EXPECT_EQ(counts["val"], 6);
  EXPECT_EQ(counts["test"], 13);
  EXPECT_EQ(load_layouts((root_ / "ingest/layouts.txt").string()).size(), 64u);
}

TEST_F(Workspace, IngestRerunIsByteIdentical) {
  const auto again = scratch("ingest_again");
  ASSERT_EQ(run("ingest", {{"out", again.string()},
                           {"buildings", (root_ / "synth/buildings.jsonl").string()},
                           {"k", "8"},
                           {"seed", "3"}}),
            0);
  for (const char* f : {"layouts.txt", "manifest.txt"}) EXPECT_EQ(slurp(again / f), slurp(root_ / "ingest" / f)) << f;
  auto without_out = [](const fs::path& p) {
    std::string s;
    for (const auto& l : lines(p))
      if (l.rfind("out = ", 0) != 0) s += l + '\n';
    return s;
  };
  EXPECT_EQ(without_out(again / "run_config.txt"), without_out(root_ / "ingest/run_config.txt"));
}

TEST_F(Workspace, EveryOutputDirectoryEchoesConfigAndVersion) {
  for (const char* d : {"synth", "ingest", "trees", "train"}) {
    const auto echo = slurp(root_ / d / "run_config.txt");
    EXPECT_NE(echo.find(std::string(kToolName) + " " + kToolVersion), std::string::npos) << d;
    EXPECT_NE(echo.find("seed = "), std::string::npos) << d;
  }
}

TEST_F(Workspace, ForestHasTwoNMinusOneNodesPerTree) {
  const auto forest = load_forest(Workspace::forest());
  ASSERT_EQ(forest.size(), 64u);
  for (const auto& t : forest) {
    EXPECT_EQ(t.leaf_count(), 8u);
    EXPECT_EQ(t.nodes.size(), 15u);
  }
  EXPECT_TRUE(lines(root_ / "trees/skipped.txt").empty());
}

TEST_F(Workspace, TrainWritesCheckpointAndLossCsv) {
  const auto ck = load_checkpoint(checkpoint());
  EXPECT_EQ(ck.model.hidden(), 8);
  EXPECT_TRUE(ck.model.all_finite());
  const auto csv = lines(root_ / "train/loss.csv");
  ASSERT_FALSE(csv.empty());
  EXPECT_EQ(csv[0], "step,lr,loss");
  EXPECT_EQ(csv.size(), 1u + 3u * 12u);  // 45 train sets in batches of 4, 3 epochs
}

TEST(Commands, BuildTreesWeightFlagChangesMergeOrder) {
  // A small square next to a large one and another small square further out:
  // center distance alone pairs the close small and large squares first.
  const auto dir = scratch("weights");
  fs::create_directories(dir);
  LayoutSet s{"w", {{0, 0, 1, 1, 1, 0}, {4, 0, 1, 1, 1, 0}, {-2.5, 0, 3, 3, 1, 0}}, {}};
  save_layouts((dir / "layouts.txt").string(), {s});
  ASSERT_EQ(run("build-trees", {{"out", (dir / "d").string()}, {"layouts", (dir / "layouts.txt").string()}}), 0);
  ASSERT_EQ(run("build-trees", {{"out", (dir / "c").string()},
                                {"layouts", (dir / "layouts.txt").string()},
                                {"weights", "1,0,0,0,0"}}),
            0);
  const auto d = load_forest((dir / "d/forest.txt").string()).at(0).merge_sequence();
  const auto c = load_forest((dir / "c/forest.txt").string()).at(0).merge_sequence();
  EXPECT_EQ(d.front(), std::make_pair(0, 1));
  EXPECT_EQ(c.front(), std::make_pair(0, 2));

  // idempotent rerun
  ASSERT_EQ(run("build-trees", {{"out", (dir / "d2").string()}, {"layouts", (dir / "layouts.txt").string()}}), 0);
  EXPECT_EQ(slurp(dir / "d/forest.txt"), slurp(dir / "d2/forest.txt"));
}

TEST(Commands, BuildTreesSkipsDegenerateSets) {
  const auto dir = scratch("degenerate");
  fs::create_directories(dir);
  LayoutSet good{"good", {{0, 0, 1, 1, 1, 0}, {3, 0, 1, 1, 1, 0}}, {}};
  LayoutSet tiny{"tiny", {{0, 0, 1, 1, 1, 0}}, {}};
  save_layouts((dir / "layouts.txt").string(), {good, tiny});
  std::string err;
  ASSERT_EQ(run("build-trees", {{"out", (dir / "o").string()}, {"layouts", (dir / "layouts.txt").string()}}, &err), 0);
  EXPECT_NE(err.find("tiny"), std::string::npos);
  EXPECT_EQ(load_forest((dir / "o/forest.txt").string()).size(), 1u);
  const auto skipped = lines(dir / "o/skipped.txt");
  ASSERT_EQ(skipped.size(), 1u);
  EXPECT_EQ(skipped[0].rfind("tiny ", 0), 0u);
}

TEST(Commands, GenerationRootsFoldOrientationAndFollowComponents) {
  // The same 2 x 1 rectangle written both ways must not average into a rotated box.
  LayoutSet s{"r", {{0, 0, 1, 1, 1, 0}, {2, 0, 1, 1, 1, 0}}, {}};
  std::vector<SpatialTree> forest{build_tree(s), build_tree(s), build_tree(s)};
  auto set_root = [&](std::size_t i, Cuboid c) { forest[i].nodes[static_cast<std::size_t>(forest[i].root)].box = c; };
  set_root(0, {0, 0, 2, 1, 1, -0.02});
  set_root(1, {0, 0, 1, 2, 1, kPi / 2 - 0.02});
  set_root(2, {0.3, -0.1, 1, 1, 0.5, 0.1});
  const auto folded = detail::folded_root(forest[1]);
  EXPECT_NEAR(folded[2], 2.0, 1e-12);
  EXPECT_NEAR(folded[3], 1.0, 1e-12);
  EXPECT_NEAR(folded[5], -0.02, 1e-12);

  // two well separated components: the first owns sets 0 and 1, the second set 2
  GmmModel m;
  m.type = CovarianceType::kSpherical;
  m.weights = LatentVector::Constant(2, 0.5);
  m.means = LatentMatrix(2, 1);
  m.means << 0, 10;
  m.variances = LatentMatrix::Constant(2, 1, 1.0);
  LatentMatrix x(3, 1);
  x << -0.1, 0.1, 10;
  const auto roots = detail::component_roots(m, x, forest);
  ASSERT_EQ(roots.size(), 2u);
  EXPECT_NEAR(roots[0][2], 2.0, 1e-9);
  EXPECT_NEAR(roots[0][5], -0.02, 1e-9);
  EXPECT_NEAR(roots[1][0], 0.3, 1e-9);
  EXPECT_NEAR(roots[1][4], 0.5, 1e-9);
}

TEST_F(Workspace, TrainIsSeedDeterministicAndHalvesLrAtStep400) {
  Flags f{{"forest", forest()}, {"limit", "1"},      {"hidden", "4"},      {"batch-size", "1"},
          {"epochs", "1000"},   {"max-steps", "402"}, {"checkpoint-every", "1000"}, {"seed", "5"}};
  const auto a = scratch("train_a"), b = scratch("train_b");
  f["out"] = a.string();
  ASSERT_EQ(run("train", f), 0);
  f["out"] = b.string();
  ASSERT_EQ(run("train", f), 0);
  EXPECT_EQ(slurp(a / "checkpoint.txt"), slurp(b / "checkpoint.txt"));
  EXPECT_EQ(slurp(a / "loss.csv"), slurp(b / "loss.csv"));
  const auto csv = lines(a / "loss.csv");
  ASSERT_EQ(csv.size(), 403u);
  auto lr_of = [](const std::string& row) {
    const auto a = row.find(','), b = row.find(',', a + 1);
    return std::stod(row.substr(a + 1, b - a - 1));
  };
  EXPECT_EQ(csv[400].rfind("399,", 0), 0u);
  EXPECT_EQ(lr_of(csv[400]), 1e-3);
  EXPECT_EQ(lr_of(csv[401]), 5e-4);
}

TEST_F(Workspace, ReconstructReportsAndDrawsEveryLayout) {
  const auto out = scratch("recon");
  ASSERT_EQ(run("reconstruct", {{"out", out.string()},
                                {"checkpoint", checkpoint()},
                                {"forest", forest()},
                                {"manifest", (root_ / "ingest/manifest.txt").string()},
                                {"split", "test"}}),
            0);
  const auto report = lines(out / "report.csv");
  ASSERT_EQ(report.size(), 2u);
  EXPECT_EQ(report[0], "jsd,cov,mmd,oar,cd,emd");
  EXPECT_EQ(report[1].substr(0, 3), ",,,");  // generation columns stay empty
  const auto recon = load_layouts((out / "reconstructions.txt").string());
  EXPECT_EQ(recon.size(), 13u);
  std::size_t svgs = 0;
  for (const auto& e : fs::directory_iterator(out / "svg")) svgs += e.path().extension() == ".svg";
  EXPECT_EQ(svgs, 13u);
  EXPECT_EQ(lines(out / "per_layout.csv").size(), 14u);
}

TEST_F(Workspace, FitGmmWritesOneRowPerGridCell) {
  const auto out = scratch("gmm");
  ASSERT_EQ(run("fit-gmm", {{"out", out.string()},
                            {"checkpoint", checkpoint()},
                            {"forest", forest()},
                            {"components", "1,2"},
                            {"cov-types", "diag,spherical"},
                            {"samples", "6"},
                            {"max-depth", "4"}}),
            0);
  const auto grid = lines(out / "grid.csv");
  ASSERT_EQ(grid.size(), 5u);
  EXPECT_EQ(grid[0], "K,cov_type,jsd");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double j = std::stod(grid[i].substr(grid[i].rfind(',') + 1));
    EXPECT_GE(j, 0.0);
    EXPECT_LE(j, std::log(2.0));
  }
  auto in = text::open_in((out / "gmm.txt").string());
  const auto g = read_gmm(in);
  EXPECT_EQ(static_cast<int>(g.roots.size()), g.model.components());
  EXPECT_EQ(g.model.dim(), 16);
}

TEST_F(Workspace, SingleCellGridReturnsThatModel) {
  const auto out = scratch("gmm_single");
  ASSERT_EQ(run("fit-gmm", {{"out", out.string()},
                            {"checkpoint", checkpoint()},
                            {"forest", forest()},
                            {"components", "3"},
                            {"cov-types", "tied"},
                            {"samples", "4"},
                            {"max-depth", "4"}}),
            0);
  auto in = text::open_in((out / "gmm.txt").string());
  const auto g = read_gmm(in);
  EXPECT_EQ(g.model.components(), 3);
  EXPECT_EQ(g.model.type, CovarianceType::kTied);
}

TEST_F(Workspace, GenerateBoundsLeavesAndIsDeterministic) {
  const auto gdir = scratch("gen_gmm");
  ASSERT_EQ(run("fit-gmm", {{"out", gdir.string()},
                            {"checkpoint", checkpoint()},
                            {"forest", forest()},
                            {"components", "2"},
                            {"samples", "4"},
                            {"max-depth", "3"}}),
            0);
  Flags f{{"checkpoint", checkpoint()}, {"gmm", (gdir / "gmm.txt").string()}, {"n", "12"},
          {"max-depth", "3"},           {"reference", forest()},               {"seed", "9"}};
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  f["out"] = a.string();
  ASSERT_EQ(run("generate", f), 0);
  f["out"] = b.string();
  ASSERT_EQ(run("generate", f), 0);
  for (const char* file : {"generated.txt", "generated.svg", "report.csv"})
    EXPECT_EQ(slurp(a / file), slurp(b / file)) << file;
  const auto gen = load_layouts((a / "generated.txt").string());
  ASSERT_EQ(gen.size(), 12u);
  for (const auto& s : gen) {
    EXPECT_GE(s.cuboids.size(), 1u);
    EXPECT_LE(s.cuboids.size(), 8u);
    for (const auto& c : s.cuboids)
      for (double v : to_params(c)) EXPECT_TRUE(std::isfinite(v));
  }
  const auto report = lines(a / "report.csv");
  ASSERT_EQ(report.size(), 2u);
  EXPECT_NE(report[1].substr(0, 1), ",");  // JSD present with a reference
}

TEST_F(Workspace, InterpolateEndpointsMatchReconstructions) {
  const auto forest_v = load_forest(forest());
  const std::string id_a = forest_v[0].id, id_b = forest_v[5].id;
  const auto out = scratch("interp");
  ASSERT_EQ(run("interpolate", {{"out", out.string()},
                                {"checkpoint", checkpoint()},
                                {"forest", forest()},
                                {"set-a", id_a},
                                {"set-b", id_b},
                                {"steps", "2"}}),
            0);
  const auto ck = load_checkpoint(checkpoint());
  const auto frames = load_layouts((out / "interpolation.txt").string());
  ASSERT_EQ(frames.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& t = forest_v[k == 0 ? 0 : 5];
    const auto direct = decode_free(to_params(t.nodes[static_cast<std::size_t>(t.root)].box), encode_tree(t, ck.model),
                                    ck.model, {});
    ASSERT_EQ(frames[k].cuboids.size(), direct.size());
    for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_EQ(to_params(frames[k].cuboids[i]), to_params(direct[i]));
  }
  EXPECT_TRUE(fs::exists(out / "step_00.svg"));
  EXPECT_TRUE(fs::exists(out / "step_01.svg"));
  EXPECT_TRUE(fs::exists(out / "strip.svg"));

  const auto five = scratch("interp5");
  ASSERT_EQ(run("interpolate", {{"out", five.string()},
                                {"checkpoint", checkpoint()},
                                {"forest", forest()},
                                {"set-a", id_a},
                                {"set-b", id_b},
                                {"steps", "5"}}),
            0);
  std::size_t svgs = 0;
  for (const auto& e : fs::directory_iterator(five)) svgs += e.path().filename().string().rfind("step_", 0) == 0;
  EXPECT_EQ(svgs, 5u);
  std::string err;
  EXPECT_EQ(run("interpolate", {{"out", five.string()},
                                {"checkpoint", checkpoint()},
                                {"forest", forest()},
                                {"set-a", "missing"},
                                {"set-b", id_b}},
                &err),
            kExitUsage);
}

TEST_F(Workspace, ClusterWritesLabelsFeaturesAndComposition) {
  const auto out = scratch("cluster");
  const auto forest_v = load_forest(forest());
  {
    std::ofstream r(root_ / "regions.txt");
    for (std::size_t i = 0; i < forest_v.size(); ++i) r << forest_v[i].id << (i < 32 ? " north" : " south") << '\n';
  }
  ASSERT_EQ(run("cluster", {{"out", out.string()},
                            {"checkpoint", checkpoint()},
                            {"forest", forest()},
                            {"dim", "2"},
                            {"clusters", "3"},
                            {"regions", (root_ / "regions.txt").string()}}),
            0);
  EXPECT_EQ(lines(out / "labels.csv").size(), 65u);
  const auto feats = lines(out / "features.csv");
  ASSERT_EQ(feats.size(), 4u);
  for (std::size_t r = 1; r < feats.size(); ++r) {
    std::istringstream row(feats[r]);
    std::string cell;
    std::vector<double> v;
    while (std::getline(row, cell, ',')) v.push_back(std::stod(cell));
    ASSERT_EQ(v.size(), 2u + 2u * kLayoutFeatureCount);
    for (int j = 0; j < kLayoutFeatureCount; ++j) {
      EXPECT_GE(v[2 + static_cast<std::size_t>(j)], 0.0);
      EXPECT_LE(v[2 + static_cast<std::size_t>(j)], 1.0);
    }
  }
  const auto comp = lines(out / "composition.csv");
  ASSERT_EQ(comp.size(), 4u);  // header, global, two regions
  // each region's deviations sum to zero because both compositions sum to 1
  for (std::size_t r = 2; r < 4; ++r) {
    std::istringstream row(comp[r]);
    std::string cell;
    std::getline(row, cell, ',');
    double sum = 0;
    while (std::getline(row, cell, ',')) sum += std::stod(cell);
    EXPECT_NEAR(sum, 0.0, 1e-9);
  }
}

TEST(Commands, ClusterSeparatesTwoBuildingFamilies) {
  // Ribbon development along a single street against compact blocks: the
  // neighbourhood outlines differ, so the codes should split cleanly.
  const auto dir = scratch("families");
  fs::create_directories(dir);
  std::vector<LayoutSet> sets;
  std::ofstream regions(dir / "regions.txt");
  for (int f = 0; f < 2; ++f) {
    const auto recs = f == 0 ? synth_city(6, 6, 0.2, 11, {}, "bl") : synth_city(1, 36, 0.2, 12, {}, "st");
    const auto fam = build_layout_sets(to_buildings(recs).buildings, 8);
    for (const auto& s : fam) regions << s.id << (f == 0 ? " blocks" : " strips") << '\n';
    sets.insert(sets.end(), fam.begin(), fam.end());
  }
  regions.close();
  save_layouts((dir / "layouts.txt").string(), sets);
  ASSERT_EQ(run("build-trees", {{"out", (dir / "trees").string()}, {"layouts", (dir / "layouts.txt").string()}}), 0);
  const auto forest = (dir / "trees/forest.txt").string();
  ASSERT_EQ(run("train", {{"out", (dir / "train").string()},
                          {"forest", forest},
                          {"hidden", "8"},
                          {"learning-rate", "0.01"},
                          {"batch-size", "8"},
                          {"epochs", "4"},
                          {"checkpoint-every", "100"}}),
            0);
  ASSERT_EQ(run("cluster", {{"out", (dir / "cluster").string()},
                            {"checkpoint", (dir / "train/checkpoint.txt").string()},
                            {"forest", forest},
                            {"dim", "2"},
                            {"clusters", "2"},
                            {"regions", (dir / "regions.txt").string()},
                            {"seed", "2"}}),
            0);
  std::map<std::string, std::map<std::string, int>> table;  // family -> cluster -> count
  for (const auto& l : lines(dir / "cluster/labels.csv")) {
    if (l == "id,cluster") continue;
    const auto comma = l.find(',');
    table[l.substr(0, 2)][l.substr(comma + 1)]++;
  }
  int majority = 0, total = 0;
  std::set<std::string> winners;
  for (const auto& [fam, counts] : table) {
    std::pair<std::string, int> best{"", -1};
    for (const auto& [c, n] : counts) {
      total += n;
      if (n > best.second) best = {c, n};
    }
    majority += best.second;
    winners.insert(best.first);
  }
  EXPECT_EQ(total, 72);
  EXPECT_EQ(winners.size(), 2u);
  EXPECT_GE(static_cast<double>(majority) / total, 0.95);
}

TEST_F(Workspace, ExportSvgAndObjMatchCuboidCounts) {
  const auto layouts = (root_ / "ingest/layouts.txt").string();
  const auto svg = scratch("export_svg"), obj = scratch("export_obj"), svg2 = scratch("export_svg2");
  ASSERT_EQ(run("export", {{"out", svg.string()}, {"layouts", layouts}}), 0);
  ASSERT_EQ(run("export", {{"out", svg2.string()}, {"layouts", layouts}}), 0);
  ASSERT_EQ(run("export", {{"out", obj.string()}, {"layouts", layouts}, {"format", "obj"}, {"world", "true"}}), 0);
  const auto s = slurp(svg / "layouts.svg");
  EXPECT_EQ(s, slurp(svg2 / "layouts.svg"));
  std::size_t polys = 0, groups = 0, verts = 0, faces = 0;
  for (auto p = s.find("<polygon "); p != std::string::npos; p = s.find("<polygon ", p + 1)) ++polys;
  for (auto p = s.find("<g "); p != std::string::npos; p = s.find("<g ", p + 1)) ++groups;
  EXPECT_EQ(groups, 64u);
  EXPECT_EQ(polys, 64u * 8u);
  for (const auto& l : lines(obj / "layouts.obj")) {
    verts += l.rfind("v ", 0) == 0;
    faces += l.rfind("f ", 0) == 0;
  }
  EXPECT_EQ(verts, 64u * 8u * 8u);
  EXPECT_EQ(faces, 64u * 8u * 6u);
  std::string err;
  EXPECT_EQ(run("export", {{"out", obj.string()}, {"layouts", layouts}, {"format", "png"}}, &err), kExitUsage);
}
