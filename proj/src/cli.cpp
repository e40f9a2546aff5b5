#include "megt/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "megt/autodiff.hpp"
#include "megt/checkpoint.hpp"
#include "megt/config.hpp"
#include "megt/data.hpp"
#include "megt/errors.hpp"
#include "megt/gradcheck.hpp"
#include "megt/metrics.hpp"
#include "megt/model.hpp"
#include "megt/numerics.hpp"
#include "megt/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace megt {

namespace {

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text) || !out.flush()) throw DataError("cannot write " + path.string());
}

/// Keys that appear on non-comment lines of a key=value file.
std::set<std::string> keys_in(std::string_view text) {
  std::set<std::string> keys;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    const auto b = line.find_first_not_of(" \t");
    if (eq == std::string::npos || b == std::string::npos || line[b] == '#') continue;
    std::string key = line.substr(b, eq - b);
    key.erase(key.find_last_not_of(" \t") + 1);
    keys.insert(key);
  }
  return keys;
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("MEGT_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw ConfigError(std::string("MEGT_SEED is not an unsigned integer: ") + s);
  return v;
}

json metrics_json(const EvalResult& r) {
  json j;
  j["accuracy"] = r.accuracy;
  j["recall_macro"] = r.recall_macro;
  j["f1_macro"] = r.f1_macro;
  j["auc"] = r.auc ? json(*r.auc) : json(nullptr);
  j["n"] = r.n;
  return j;
}

// -- synth ---------------------------------------------------------------------------

struct SynthArgs {
  std::string task = "cross-scale";
  std::size_t bags = 600;
  std::string out;
  std::optional<std::uint64_t> seed;
  SynthSpec spec;
};

int cmd_synth(SynthArgs& a, std::ostream& out) {
  if (a.bags == 0) throw ConfigError("no bags");
  SynthSpec spec = a.spec;
  spec.task = parse_task(a.task);
  spec.bags = a.bags;
  if (a.seed) spec.seed = *a.seed;
  else if (auto s = env_seed()) spec.seed = *s;
  const SyntheticSet set = generate_synthetic(spec);

  const fs::path dir(a.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());

  const std::size_t n = set.bags.size();
  const std::size_t n_train = (n * 7 + 5) / 10;
  const std::size_t n_val = std::min(n - n_train, (n + 5) / 10);
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "bag_%05zu.megb", i);
    write_bag(set.bags[i], dir / name);
    const Split split = i < n_train ? Split::train : i < n_train + n_val ? Split::val : Split::test;
    entries.push_back({name, set.bags[i].label, split, 0});
  }
  write_manifest(dir / "manifest.tsv", entries);
  out << "wrote " << n << " bags (" << n_train << " train, " << n_val << " val, " << n - n_train - n_val
      << " test) to " << dir.string() << "\n";
  return exit_ok;
}

// -- train ---------------------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  std::string out;
  std::string config;
  std::map<std::string, std::string> overrides;
  bool quiet = false;
};

int cmd_train(TrainArgs& a, std::ostream& out, std::ostream& err) {
  ModelConfig cfg;
  std::set<std::string> given;
  if (!a.config.empty()) {
    const std::string text = read_text(a.config);
    cfg.apply_text(text);
    given = keys_in(text);
  }
  for (const auto& [key, value] : a.overrides) {
    cfg.set(key, value);
    given.insert(key);
  }
  if (!given.count("seed"))
    if (auto s = env_seed()) cfg.seed = *s;

  const Dataset data = load_manifest(a.manifest);
  if (data.train.empty()) throw DataError("manifest has an empty train split");
  if (data.val.empty()) throw DataError("manifest has an empty val split");
  if (!given.count("d_in")) cfg.d_in = data.train.front().width();
  cfg.validate();

  Model model(cfg);
  const fs::path dir(a.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());

  const History h = fit(model, data.train, data.val, [&](const EpochRecord& r) {
    if (!a.quiet)
      err << "epoch " << r.epoch << " train_loss " << format_double(r.train_loss) << " val_loss "
          << format_double(r.val_loss) << " val_acc " << format_double(r.val_accuracy) << "\n";
  });

  json hist;
  hist["best_epoch"] = h.best_epoch;
  hist["best_val_loss"] = h.best_val_loss;
  hist["stopped_early"] = h.stopped_early;
  json epochs = json::array();
  for (const EpochRecord& r : h.epochs)
    epochs.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
                      {"val_accuracy", r.val_accuracy}});
  hist["epochs"] = std::move(epochs);
  write_text(dir / "history.json", hist.dump(2) + "\n");
  save_checkpoint(model, dir / "model.megm");
  write_text(dir / "config.txt", cfg.to_text());

  out << metrics_json(evaluate(model, data.val)).dump() << "\n";
  return exit_ok;
}

// -- eval ----------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string split = "test";
  std::string out;
};

int cmd_eval(EvalArgs& a, std::ostream& out) {
  Model model = load_checkpoint(a.checkpoint);
  const Dataset data = load_manifest(a.manifest);
  const std::vector<Bag>& bags = data.split(parse_split(a.split));
  if (bags.empty()) throw DataError("manifest has an empty " + a.split + " split");
  for (const Bag& b : bags) model.check_input(b);
  const std::string text = metrics_json(evaluate(model, bags)).dump() + "\n";
  out << text;
  if (!a.out.empty()) write_text(a.out, text);
  return exit_ok;
}

// -- gradcheck -----------------------------------------------------------------------

struct GradcheckArgs {
  std::string scope = "all";
  std::optional<std::uint64_t> seed;
  std::string fault_op;
};

int cmd_gradcheck(GradcheckArgs& a, std::ostream& out) {
  std::uint64_t seed = 1;
  if (a.seed) seed = *a.seed;
  else if (auto s = env_seed()) seed = *s;
  gradcheck_scopes(a.scope);  // validate before touching global state

  struct FaultGuard {
    explicit FaultGuard(const std::string& op) { ad::set_gradient_fault(op); }
    ~FaultGuard() { ad::set_gradient_fault(""); }
  } guard(a.fault_op);

  GradCheckOptions opt;
  const std::vector<ScopeReport> reports = gradcheck(a.scope, seed, opt);
  std::size_t total = 0;
  bool ok = true;
  char line[512];
  for (const ScopeReport& r : reports) {
    total += r.checked;
    std::snprintf(line, sizeof line, "%-9s %4zu coords  worst rel err %.3e  (%s[%zu])  %s\n", r.scope.c_str(),
                  r.checked, r.worst.rel_err, r.worst.param.c_str(), r.worst.coordinate,
                  r.passed() ? "ok" : "FAIL");
    out << line;
    for (const CoordinateCheck& f : r.failures) {
      std::snprintf(line, sizeof line, "  %s[%zu]: analytic %.10g numeric %.10g rel err %.3e\n", f.param.c_str(),
                    f.coordinate, f.analytic, f.numeric, f.rel_err);
      out << line;
    }
    ok = ok && r.passed();
  }
  out << total << " coordinates checked, tolerance " << format_double(opt.tolerance) << ": "
      << (ok ? "pass" : "FAIL") << "\n";
  return ok ? exit_ok : exit_check_failed;
}

// -- attend --------------------------------------------------------------------------

struct AttendArgs {
  std::string checkpoint;
  std::string bag;
  std::string out;
};

void write_attention_csv(const fs::path& path, const Tensor& row, const std::string& querier,
                         const std::string& other) {
  const auto v = row.values();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double span = *hi - *lo;
  std::string text = "token_index,resolution,raw_weight,minmax_normalized_weight\n";
  for (std::size_t j = 0; j < v.size(); ++j) {
    const double norm = span > 0.0 ? (v[j] - *lo) / span : 0.0;
    text += std::to_string(j) + "," + (j == 0 ? querier : other) + "," + format_double(v[j]) + "," +
            format_double(norm) + "\n";
  }
  write_text(path, text);
}

void write_token_map(const fs::path& path, const EgtOutput& o) {
  std::string text = "token_index,instance\n";
  text += "0,class\n";
  for (std::size_t p = 0; p < o.kept_indices.size(); ++p)
    text += std::to_string(p + 1) + "," + std::to_string(o.kept_indices[p]) + "\n";
  if (o.has_fusion) text += std::to_string(o.kept_indices.size() + 1) + ",fusion\n";
  write_text(path, text);
}

int cmd_attend(AttendArgs& a, std::ostream& out) {
  Model model = load_checkpoint(a.checkpoint);
  if (model.config().arch != Arch::megt)
    throw ConfigError("attend needs an arch=megt checkpoint, got " + to_string(model.config().arch));
  const Bag bag = read_bag(a.bag);
  model.check_input(bag);

  const fs::path dir(a.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());

  ad::Tape tape(false);
  const ForwardResult res = model.forward(tape, bag);
  for (std::size_t b = 0; b < res.exchanges.size(); ++b) {
    const std::string stem = "mffm" + std::to_string(b + 1);
    write_attention_csv(dir / (stem + "_low_queries_high.csv"), res.exchanges[b].low_queries_high.value(), "low",
                        "high");
    write_attention_csv(dir / (stem + "_high_queries_low.csv"), res.exchanges[b].high_queries_low.value(), "high",
                        "low");
  }
  write_token_map(dir / "tokens_low.csv", *res.low);
  write_token_map(dir / "tokens_high.csv", *res.high);
  out << "wrote " << 2 * res.exchanges.size() << " attention tables to " << dir.string() << "\n";
  return exit_ok;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-scale graph-transformer MIL classifier", "megt"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dual-resolution dataset");
  s->add_option("--task", synth.task, "witness | cross-scale")->check(CLI::IsMember({"witness", "cross-scale"}));
  s->add_option("--bags", synth.bags, "Number of bags");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--seed", synth.seed, "Generator seed (default: MEGT_SEED, then 7)");
  s->add_option("--n-low-min", synth.spec.n_low_min);
  s->add_option("--n-low-max", synth.spec.n_low_max);
  s->add_option("--children", synth.spec.children_per_low, "High-resolution tokens per low-resolution token");
  s->add_option("--dim", synth.spec.d, "Feature width");
  s->add_option("--signal", synth.spec.signal_strength, "Signal strength along the planted direction");
  s->add_option("--noise", synth.spec.noise, "Per-feature noise standard deviation");
  s->add_option("--fraction", synth.spec.signal_fraction, "Fraction of tokens carrying signal");

  TrainArgs train;
  std::map<std::string, std::string> train_flags;
  std::map<std::string, CLI::Option*> train_opts;
  auto* t = app.add_subcommand("train", "Train a model on a manifest's train split");
  t->add_option("--manifest", train.manifest, "Manifest file")->required();
  t->add_option("--out", train.out, "Output directory (checkpoint, history, config)")->required();
  t->add_option("--config", train.config, "key=value config file; flags override it");
  t->add_flag("--quiet", train.quiet, "No per-epoch progress");
  for (const std::string& key : ModelConfig::keys())
    train_opts[key] = t->add_option("--" + dashed(key), train_flags[key], "config key " + key);

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", eval.checkpoint)->required();
  e->add_option("--manifest", eval.manifest)->required();
  e->add_option("--split", eval.split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
  e->add_option("--out", eval.out, "Also write the JSON here");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  g->add_option("--scope", gc.scope, "all | attention | egt | gtl | mffm | model");
  g->add_option("--seed", gc.seed);
  g->add_option("--fault-op", gc.fault_op)->group("");

  AttendArgs at;
  auto* a = app.add_subcommand("attend", "Export MFFM cross-attention weights for one bag");
  a->add_option("--checkpoint", at.checkpoint)->required();
  a->add_option("--bag", at.bag, "Bag file (.megb)")->required();
  a->add_option("--out", at.out, "Output directory")->required();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? exit_ok : exit_usage;
  }

  try {
    if (*s) return cmd_synth(synth, out);
    if (*t) {
      for (const auto& [key, opt] : train_opts)
        if (opt->count()) train.overrides[key] = train_flags[key];
      return cmd_train(train, out, err);
    }
    if (*e) return cmd_eval(eval, out);
    if (*g) return cmd_gradcheck(gc, out);
    if (*a) return cmd_attend(at, out);
  } catch (const NumericError& ne) {
    err << "error: epoch " << ne.epoch() << ": " << ne.what() << "\n";
    return exit_numeric;
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    return exit_usage;
  } catch (const fs::filesystem_error& fe) {
    err << "error: " << fe.what() << "\n";
    return exit_usage;
  }
  return exit_usage;
}

}  // namespace megt
