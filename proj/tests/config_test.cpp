#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "config.hpp"

using namespace levydual;
using namespace levydual::config;

namespace {

const char* kBase = R"(schema_version = 1
[market]
drift = 0.05
sigma = 0.2
jump_coefficients = -0.2, 0.3
jump_intensities = 1, 0.5
[utility]
loss = power
loss_power = 1.5
claim = call
claim_parameter = 0.9
[solve]
z = 0.1, 0.2
paths = 100
steps = 10
seed = 4
)";

KeyValues parse(const std::string& text) {
  std::istringstream in(text);
  return parse_ini(in);
}

ExperimentConfig build_text(const std::string& text, const std::vector<std::string>& overrides = {}) {
  auto kv = parse(text);
  apply_overrides(kv, overrides);
  return build(kv);
}

std::string error_of(const std::string& text, const std::vector<std::string>& overrides = {}) {
  try {
    build_text(text, overrides);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, ParsesSectionsIntoLibraryTypes) {
  const auto c = build_text(kBase);
  EXPECT_EQ(c.market.b(0.0), 0.05);
  EXPECT_EQ(c.market.sigma(0.0), 0.2);
  ASSERT_EQ(c.market.n_atoms(), 2u);
  EXPECT_EQ(c.market.atoms[1].coefficient, 0.3);
  EXPECT_EQ(c.market.atoms[1].intensity, 0.5);
  EXPECT_EQ(c.utility.make().loss().exponent(), 1.5);
  EXPECT_EQ(c.utility.make().claim().name(), "call(0.90000000000000002)");
  EXPECT_EQ(c.solve.z, (std::vector<double>{0.1, 0.2}));
  EXPECT_EQ(c.solve.paths, 100u);
  EXPECT_EQ(c.solve.seed, 4u);
  EXPECT_EQ(c.solve.solver.seed, 4u);
  EXPECT_FALSE(c.oracle.has_value());
  EXPECT_EQ(c.output.directory, "out");
  EXPECT_TRUE(c.output.csv && c.output.json);
}

TEST(Config, PiecewiseCoefficients) {
  const auto c = build_text(kBase, {"market.sigma=0.1, 0.3"});
  EXPECT_EQ(c.market.sigma(0.2), 0.1);
  EXPECT_EQ(c.market.sigma(0.7), 0.3);
}

TEST(Config, UnknownKeysAreListed) {
  const std::string text = std::string(kBase) + "volatility = 1\n[output]\nfolder = x\n";
  try {
    parse(text);
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("solve.volatility"), std::string::npos) << msg;
    EXPECT_NE(msg.find("output.folder"), std::string::npos) << msg;
  }
  auto kv = parse(kBase);
  try {
    apply_overrides(kv, {"market.sigmaa=1", "nosection.x=2", "solve.z=0.3"});
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("market.sigmaa"), std::string::npos);
    EXPECT_NE(msg.find("nosection.x"), std::string::npos);
  }
  EXPECT_THROW(apply_overrides(kv, {"novalue"}), ValidationError);
}

TEST(Config, OverridesReplaceValues) {
  const auto c = build_text(kBase, {"solve.seed=99", "solve.z=0.5", "output.formats=json"});
  EXPECT_EQ(c.solve.seed, 99u);
  EXPECT_EQ(c.solve.z, std::vector<double>{0.5});
  EXPECT_FALSE(c.output.csv);
  EXPECT_TRUE(c.output.json);
}

TEST(Config, HashIsCanonicalAndSensitive) {
  const auto a = build_text(kBase).hash;
  EXPECT_EQ(a.size(), 16u);
  EXPECT_EQ(a, build_text(kBase).hash);
  // Key order in the file does not matter; values do.
  const std::string reordered = R"(schema_version = 1
[solve]
seed = 4
steps = 10
paths = 100
z = 0.1, 0.2
[utility]
claim_parameter = 0.9
claim = call
loss_power = 1.5
loss = power
[market]
jump_intensities = 1, 0.5
jump_coefficients = -0.2, 0.3
sigma = 0.2
drift = 0.05
)";
  EXPECT_EQ(a, build_text(reordered).hash);
  EXPECT_NE(a, build_text(kBase, {"solve.seed=5"}).hash);
  EXPECT_EQ(a, build_text(kBase, {"output.directory=elsewhere"}).hash);
}

TEST(Config, HashMatchesFnv1aReference) {
  // FNV-1a 64 of "a=b\n" computed by hand from the published offset basis and prime.
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : std::string("a=b\n")) h = (h ^ c) * 1099511628211ull;
  char want[17];
  std::snprintf(want, sizeof want, "%016llx", static_cast<unsigned long long>(h));
  EXPECT_EQ(config_hash({{"a", "b"}}), want);
  EXPECT_EQ(config_hash({}), "cbf29ce484222325");
}

TEST(Config, ValidationBeforeComputation) {
  EXPECT_NE(error_of(kBase, {"market.sigma=-0.2"}).find("sigma"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"schema_version=2"}).find("schema_version"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"solve.z=0"}).find("solve.z"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"solve.paths=0"}).find("paths"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"solve.paths=abc"}).find("not a non-negative integer"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"market.drift=1e999"}).find("finite"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"market.jump_intensities=1"}).find("length"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"market.jump_coefficients=-1.5, 0.3"}).find("-1"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"utility.loss=cubic"}).find("utility.loss"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"utility.loss_power=0.5"}).find("p >= 1"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"utility.claim=digital"}).find("utility.claim"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"solve.buckets=0"}).find("buckets"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"oracle.depth=21"}).find("oracle.depth"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"oracle.depth=2", "oracle.grid_points=2"}).find("grid_points"), std::string::npos);
  EXPECT_NE(error_of(kBase, {"output.formats=xml"}).find("formats"), std::string::npos);
  EXPECT_NE(error_of("schema_version = 1\n[market]\nsigma = 0.2\n[solve]\nz = 0.5\n").find("[utility]"),
            std::string::npos);
  EXPECT_NE(error_of("[market]\nsigma = 0.2\n").find("schema_version"), std::string::npos);
}

TEST(Config, OracleSection) {
  const auto c = build_text(kBase, {"oracle.depth=3, 5", "oracle.grid_points=500"});
  ASSERT_TRUE(c.oracle.has_value());
  EXPECT_EQ(c.oracle->depths, (std::vector<std::size_t>{3, 5}));
  EXPECT_EQ(c.oracle->options.grid_points, 500u);
  const auto trees = oracle_trees(c);
  ASSERT_EQ(trees.size(), 2u);
  EXPECT_EQ(trees[1].tree.depth(), 5u);
  EXPECT_EQ(trees[0].source, "depth 3");
}

TEST(Config, TreeFileResolvesAgainstConfigDirectory) {
  const auto dir = std::filesystem::temp_directory_path() / "levydual_config_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "tree.json") << R"({"s0": 1, "layers": [{"branches": [{"p": 0.5, "r": 1.2}, {"p": 0.5, "r": 0.9}]}]})";
    std::ofstream(dir / "exp.ini") << kBase << "[oracle]\ntree_file = tree.json\n";
  }
  const auto c = load(dir / "exp.ini");
  const auto trees = oracle_trees(c);
  ASSERT_EQ(trees.size(), 1u);
  EXPECT_EQ(trees[0].source, "file");
  EXPECT_EQ(trees[0].tree.layer(0).branches[0].r, 1.2);
  { std::ofstream(dir / "tree.json") << "{ not json"; }
  EXPECT_THROW(oracle_trees(load(dir / "exp.ini")), ValidationError);
  EXPECT_THROW(load(dir / "missing.ini"), ValidationError);
  std::filesystem::remove_all(dir);
}

TEST(Config, ShippedConfigsLoad) {
  const std::filesystem::path root = LEVYDUAL_CONFIGS;
  for (const char* name : {"driftless_quadratic.ini", "binomial_oracle.ini", "finite_atoms.ini"}) {
    const auto c = load(root / name);
    EXPECT_NO_THROW(oracle_trees(c)) << name;
  }
  EXPECT_THROW(load(root / "malformed.ini"), ValidationError);
}
