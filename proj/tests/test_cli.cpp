#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "megt/cli.hpp"
#include "megt/data.hpp"
#include "megt/gradcheck.hpp"
#include <json.hpp>
#include "support.hpp"

using namespace megt;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("megt_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

// Small and fast: tiny bags, tiny model.
const std::vector<std::string> kTinySynth{"--bags", "20", "--n-low-min", "3", "--n-low-max", "5", "--children", "2", "--dim", "6"};
const std::vector<std::string> kTinyModel{"--d-model", "8", "--n-heads", "2", "--k-keep", "4", "--m-landmarks", "3",
                                          "--mlp-ratio", "2", "--quiet"};

std::vector<std::string> join(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("synth writes a deterministic bag set and manifest") {
  TempDir a, b;
  REQUIRE(cli(join({"synth", "--out", a / "d", "--seed", "3"}, kTinySynth)).code == 0);
  REQUIRE(cli(join({"synth", "--out", b / "d", "--seed", "3"}, kTinySynth)).code == 0);
  const std::string manifest = slurp(a / "d/manifest.tsv");
  CHECK(manifest == slurp(b / "d/manifest.tsv"));
  std::size_t lines = 0, train = 0, val = 0, test = 0;
  for (const ManifestEntry& e : parse_manifest(manifest)) {
    ++lines;
    train += e.split == Split::train;
    val += e.split == Split::val;
    test += e.split == Split::test;
    CHECK(slurp(a.path / "d" / e.path) == slurp(b.path / "d" / e.path));
  }
  CHECK(lines == 20);
  CHECK(train == 14);
  CHECK(val == 2);
  CHECK(test == 4);

  TempDir c;
  REQUIRE(cli(join({"synth", "--out", c / "d", "--seed", "4"}, kTinySynth)).code == 0);
  CHECK(slurp(a / "d/bag_00000.megb") != slurp(c / "d/bag_00000.megb"));

  const Run zero = cli({"synth", "--out", c / "e", "--bags", "0"});
  CHECK(zero.code == exit_usage);
  CHECK(zero.err.find("no bags") != std::string::npos);
  CHECK(cli({"synth", "--out", c / "e", "--task", "nonsense"}).code == exit_usage);
  CHECK(cli({"synth"}).code == exit_usage);
  CHECK(cli({"frobnicate"}).code == exit_usage);
  CHECK(cli({"--help"}).code == exit_ok);
}

TEST_CASE("train, eval and attend round trip") {
  TempDir dir;
  REQUIRE(cli(join({"synth", "--out", dir / "d", "--seed", "5"}, kTinySynth)).code == 0);
  const Run tr = cli(join({"train", "--manifest", dir / "d/manifest.tsv", "--out", dir / "m", "--max-epochs", "1",
                           "--seed", "2"}, kTinyModel));
  INFO(tr.err);
  REQUIRE(tr.code == 0);
  const json val = json::parse(tr.out);
  CHECK(val["n"] == 2);
  CHECK(fs::exists(dir / "m/model.megm"));
  const json hist = json::parse(slurp(dir / "m/history.json"));
  CHECK(hist["epochs"].size() == 1);
  CHECK(hist["best_epoch"] == 1);
  const std::string config = slurp(dir / "m/config.txt");
  CHECK(config.find("d_in=6\n") != std::string::npos);
  CHECK(config.find("d_model=8\n") != std::string::npos);
  CHECK(config.find("max_epochs=1\n") != std::string::npos);

  const std::vector<std::string> eval{"eval", "--checkpoint", dir / "m/model.megm", "--manifest", dir / "d/manifest.tsv"};
  const Run e1 = cli(join(eval, {"--out", dir / "metrics.json"}));
  const Run e2 = cli(eval);
  REQUIRE(e1.code == 0);
  CHECK(e1.out == e2.out);
  CHECK(slurp(dir / "metrics.json") == e1.out);
  const json metrics = json::parse(e1.out);
  std::vector<std::string> keys;
  for (auto it = metrics.begin(); it != metrics.end(); ++it) keys.push_back(it.key());
  CHECK(keys == std::vector<std::string>{"accuracy", "recall_macro", "f1_macro", "auc", "n"});
  CHECK(metrics["n"] == 4);
  CHECK(cli(join(eval, {"--split", "train"})).code == 0);
  CHECK(cli(join(eval, {"--split", "holdout"})).code == exit_usage);

  const Run at = cli({"attend", "--checkpoint", dir / "m/model.megm", "--bag", dir / "d/bag_00003.megb", "--out",
                      dir / "att"});
  INFO(at.err);
  REQUIRE(at.code == 0);
  const Bag bag = read_bag(dir / "d/bag_00003.megb");
  const auto low_tokens = read_csv(dir / "att/tokens_low.csv");
  const auto high_tokens = read_csv(dir / "att/tokens_high.csv");
  CHECK(low_tokens[1] == std::vector<std::string>{"0", "class"});
  for (int block = 1; block <= 2; ++block) {
    for (const std::string dirn : {"low_queries_high", "high_queries_low"}) {
      const auto rows = read_csv(dir.path / "att" / ("mffm" + std::to_string(block) + "_" + dirn + ".csv"));
      REQUIRE(rows.size() > 2);
      CHECK(rows[0] == std::vector<std::string>{"token_index", "resolution", "raw_weight", "minmax_normalized_weight"});
      // One row per token of the other branch (class token included).
      const auto& other_map = dirn == "low_queries_high" ? high_tokens : low_tokens;
      CHECK(rows.size() - 1 == other_map.size() - 1);
      double sum = 0.0, lo = 2.0, hi = -1.0;
      for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i][0] == std::to_string(i - 1));
        CHECK(rows[i][1] == (i == 1 ? dirn.substr(0, dirn.find('_')) : dirn.substr(dirn.rfind('_') + 1)));
        sum += std::stod(rows[i][2]);
        const double norm = std::stod(rows[i][3]);
        lo = std::min(lo, norm);
        hi = std::max(hi, norm);
      }
      CHECK(std::abs(sum - 1.0) <= 1e-9);
      CHECK(lo == 0.0);
      CHECK(hi == 1.0);
    }
  }
  CHECK(high_tokens.size() - 1 == 1 + std::min<std::size_t>(4, bag.high.rows()) + (bag.high.rows() > 4 ? 1 : 0));

  // Mismatched width: bag of width 7 against a d_in = 6 checkpoint.
  write_bag(Bag{testutil::random_tensor(2, 7, 1), testutil::random_tensor(4, 7, 2), 0, ""}, dir / "wide.megb");
  const Run wide = cli({"attend", "--checkpoint", dir / "m/model.megm", "--bag", dir / "wide.megb", "--out", dir / "w"});
  CHECK(wide.code == exit_usage);
  CHECK(wide.err.find("6") != std::string::npos);
  CHECK(wide.err.find("7") != std::string::npos);
}

TEST_CASE("train flags: ablation, config file, precedence") {
  TempDir dir;
  REQUIRE(cli(join({"synth", "--out", dir / "d", "--seed", "6"}, kTinySynth)).code == 0);
  const std::string manifest = dir / "d/manifest.tsv";
  SUBCASE("EGT-m ablation") {
    const Run r = cli(join({"train", "--manifest", manifest, "--out", dir / "m", "--max-epochs", "2", "--enable-gtl",
                            "false", "--enable-tpm", "false"}, kTinyModel));
    INFO(r.err);
    CHECK(r.code == 0);
    const std::string cfg = slurp(dir / "m/config.txt");
    CHECK(cfg.find("enable_gtl=false") != std::string::npos);
    CHECK(cfg.find("enable_tpm=false") != std::string::npos);
  }
  SUBCASE("flags override the config file") {
    std::ofstream(dir / "c.txt") << "# base\nd_model=16\nn_heads=4\nlr=0.001\n";
    const Run r = cli(join({"train", "--manifest", manifest, "--out", dir / "m", "--config", dir / "c.txt",
                            "--max-epochs", "1"}, kTinyModel));
    REQUIRE(r.code == 0);
    const std::string cfg = slurp(dir / "m/config.txt");
    CHECK(cfg.find("d_model=8\n") != std::string::npos);
    CHECK(cfg.find("n_heads=2\n") != std::string::npos);
    CHECK(cfg.find("lr=0.001\n") != std::string::npos);
  }
  SUBCASE("bad configurations exit 2") {
    CHECK(cli(join({"train", "--manifest", manifest, "--out", dir / "m", "--n-heads", "3"}, kTinyModel)).code ==
          exit_usage);
    CHECK(cli(join({"train", "--manifest", manifest, "--out", dir / "m", "--d-in", "5"}, kTinyModel)).code ==
          exit_usage);
    CHECK(cli(join({"train", "--manifest", dir / "none.tsv", "--out", dir / "m"}, kTinyModel)).code == exit_usage);
    std::ofstream(dir / "bad.txt") << "no_such_key=1\n";
    CHECK(cli(join({"train", "--manifest", manifest, "--out", dir / "m", "--config", dir / "bad.txt"}, kTinyModel))
              .code == exit_usage);
  }
  SUBCASE("empty validation split exits 2") {
    std::ofstream(dir / "d/train_only.tsv") << "bag_00000.megb\t" << read_bag(dir / "d/bag_00000.megb").label
                                            << "\ttrain\n";
    const Run r = cli(join({"train", "--manifest", dir / "d/train_only.tsv", "--out", dir / "m"}, kTinyModel));
    CHECK(r.code == exit_usage);
    CHECK(r.err.find("val") != std::string::npos);
  }
  SUBCASE("non-finite loss exits 3 with the epoch") {
    const Run r = cli(join({"train", "--manifest", manifest, "--out", dir / "m", "--lr", "1e300", "--max-epochs",
                            "3"}, kTinyModel));
    CHECK(r.code == exit_numeric);
    CHECK(r.err.find("epoch 1") != std::string::npos);
  }
  SUBCASE("training is deterministic given the seed") {
    const auto args = join({"train", "--manifest", manifest, "--max-epochs", "2", "--seed", "4"}, kTinyModel);
    REQUIRE(cli(join(args, {"--out", dir / "m1"})).code == 0);
    REQUIRE(cli(join(args, {"--out", dir / "m2"})).code == 0);
    CHECK(slurp(dir / "m1/model.megm") == slurp(dir / "m2/model.megm"));
    CHECK(slurp(dir / "m1/history.json") == slurp(dir / "m2/history.json"));
  }
}

TEST_CASE("three-class evaluation reports a null AUC") {
  TempDir dir;
  std::ofstream manifest(dir / "m.tsv");
  for (int i = 0; i < 9; ++i) {
    const std::string name = "b" + std::to_string(i) + ".megb";
    write_bag(Bag{testutil::random_tensor(3, 4, i), testutil::random_tensor(6, 4, 100 + i), std::size_t(i % 3), ""},
              dir.path / name);
    manifest << name << '\t' << i % 3 << '\t' << (i < 3 ? "train" : i < 6 ? "val" : "test") << '\n';
  }
  manifest.close();
  REQUIRE(cli(join({"train", "--manifest", dir / "m.tsv", "--out", dir / "m", "--max-epochs", "1", "--n-classes", "3"},
                   kTinyModel)).code == 0);
  const Run e = cli({"eval", "--checkpoint", dir / "m/model.megm", "--manifest", dir / "m.tsv"});
  REQUIRE(e.code == 0);
  CHECK(e.out.find("\"auc\":null") != std::string::npos);
  CHECK(json::parse(e.out)["n"] == 3);
  const Run at = cli({"attend", "--checkpoint", dir / "m/model.megm", "--bag", dir / "b0.megb", "--out", dir / "a"});
  CHECK(at.code == exit_ok);
}

TEST_CASE("gradcheck command") {
  const Run gtl = cli({"gradcheck", "--scope", "gtl", "--seed", "1"});
  CHECK(gtl.code == exit_ok);
  CHECK(gtl.out.find("gtl") != std::string::npos);
  CHECK(gtl.out.find("attention") == std::string::npos);
  CHECK(gradcheck_scopes("gtl") == std::vector<std::string>{"gtl"});

  const Run broken = cli({"gradcheck", "--scope", "gtl", "--fault-op", "gcn_normalize"});
  CHECK(broken.code == exit_check_failed);
  CHECK(broken.out.find("FAIL") != std::string::npos);
  CHECK(cli({"gradcheck", "--scope", "everything"}).code == exit_usage);
}
