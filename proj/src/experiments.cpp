#include "lmgrad/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "lmgrad/checkpoint.hpp"
#include "lmgrad/diagnostics.hpp"
#include "lmgrad/format.hpp"
#include "lmgrad/svg.hpp"

namespace lmgrad {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

Json default_config() {
  Json c;
  c["out_dir"] = nullptr;
  c["corpus"] = {{"kind", "zipf"},  {"path", ""},           {"vocab_size", 256},
                 {"num_seqs", 400}, {"seq_len", 32},        {"exponent", kDefaultZipfExponent},
                 {"seed", 1},       {"max_context_len", 2}, {"val_seqs", 0},
                 {"val_path", ""}};
  c["train"] = {{"steps", 1000},          {"lr", 1e-2},
                {"optimizer", "adam"},    {"beta1", 0.9},
                {"beta2", 0.95},          {"eps", 1e-8},
                {"schedule", "constant"}, {"warmup_steps", 0},
                {"batch_sequences", 0},   {"seed", 1},
                {"init_scale", 1.0},      {"eval_every", 100},
                {"dim", 8},               {"head_rank", 0},
                {"train_hidden", true},   {"train_head", true},
                {"checkpoint_every", 0}};
  c["diagnose"] = {{"checkpoint", ""},
                   {"corpus", ""},
                   {"max_context_len", 2},
                   {"trajectory", ""},
                   {"rank_token_counts", Json::array()},
                   {"fractions", {1e-3, 3e-3, 1e-2, 3e-2, 1e-1}},
                   {"prefix_sizes", Json::array()},
                   {"tol", kRankTol},
                   {"seed", 1}};
  const SgdRankConfig sgd;
  const SgdCorpusSpec sgd_corpus;
  c["verify"] = {{"seed", 0},
                 {"tol", kRankTol},
                 {"gibbs_trials", 1000},
                 {"rank_bound_trials", 500},
                 {"top1_trials", 20},
                 {"top1_epsilon", 1e-3},
                 {"lower_bound_instances", 200},
                 {"sgd_corpora", 50},
                 {"residual_instances", 100},
                 {"sgd_vocab_size", sgd_corpus.vocab_size},
                 {"sgd_num_seqs", sgd_corpus.num_seqs},
                 {"sgd_seq_len", sgd_corpus.seq_len},
                 {"sgd_exponent", sgd_corpus.exponent},
                 {"sgd_max_context_len", sgd.max_context_len},
                 {"sgd_batch_fraction", sgd.batch_fraction},
                 {"sgd_delta_grid", sgd.delta_grid},
                 {"sgd_check_delta", sgd.check_delta}};
  const SpamSweepConfig spam;
  c["spamlang_sweep"] = {{"vocab_sizes", spam.vocab_sizes},
                         {"lrs", spam.lrs},
                         {"seeds", spam.seeds},
                         {"dim", spam.dim},
                         {"steps", spam.steps},
                         {"num_seqs", spam.num_seqs},
                         {"seq_len", spam.seq_len},
                         {"max_context_len", spam.max_context_len},
                         {"eval_every", spam.eval_every},
                         {"optimizer", "adam"},
                         {"schedule", "constant"},
                         {"warmup_steps", 0},
                         {"init_scale", 1.0}};
  const BottleneckSweepConfig bn;
  c["bottleneck_sweep"] = {{"vocab_size", bn.vocab_size},
                           {"dim", bn.dim},
                           {"ranks", bn.ranks},
                           {"seeds", bn.seeds},
                           {"full_head_baseline", bn.full_head_baseline},
                           {"steps", bn.steps},
                           {"eval_every", bn.eval_every},
                           {"lr", 1e-2},
                           {"optimizer", "adam"},
                           {"schedule", "constant"},
                           {"warmup_steps", 0},
                           {"init_scale", 1.0},
                           {"exponent", bn.exponent},
                           {"num_seqs", bn.num_seqs},
                           {"val_seqs", bn.val_seqs},
                           {"seq_len", bn.seq_len},
                           {"max_context_len", bn.max_context_len},
                           {"corpus_seed", bn.corpus_seed}};
  c["report"] = {{"inputs", Json::array()}};
  return c;
}

void merge_config(Json& base, const Json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("config" + (path.empty() ? "" : " at '" + path + "'") + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + here + "'");
    Json& slot = base[key];
    if (slot.is_object()) {
      merge_config(slot, value, here);
    } else {
      slot = value;
    }
  }
}

void apply_override(Json& config, const std::string& dotted_key, const std::string& text) {
  if (dotted_key.empty()) throw ConfigError("empty override key");
  Json patch_value;
  try {
    patch_value = Json::parse(text);
  } catch (const Json::parse_error&) {
    patch_value = text;
  }
  Json* node = &config;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part))
      throw ConfigError("unknown config key '" + dotted_key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) {
    merge_config(*node, patch_value, dotted_key);
  } else {
    *node = patch_value;
  }
}

Json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

std::string resolve_out_dir(const Json& config, const std::string& experiment) {
  if (config.contains("out_dir") && config["out_dir"].is_string() && !config["out_dir"].get<std::string>().empty())
    return config["out_dir"].get<std::string>();
  if (const char* env = std::getenv(kOutEnvVar); env != nullptr && *env != '\0')
    return (fs::path(env) / experiment).string();
  return (fs::path("lmgrad-out") / experiment).string();
}

namespace {

bool is_nonnegative_integer(const Json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

const Json& block(const Json& config, const char* name) {
  if (!config.contains(name) || !config[name].is_object()) throw ConfigError(std::string("missing config block '") + name + "'");
  return config[name];
}

template <typename T>
T get(const Json& j, const char* key) {
  if (!j.contains(key)) throw ConfigError(std::string("missing config key '") + key + "'");
  const Json& v = j[key];
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(std::string("config key '") + key + "' must be a boolean");
  } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
    if (!is_nonnegative_integer(v)) throw ConfigError(std::string("config key '") + key + "' must be a nonnegative integer");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError(std::string("config key '") + key + "' must be an integer");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(std::string("config key '") + key + "' must be a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(std::string("config key '") + key + "' must be a string");
  }
  return v.get<T>();
}

template <typename T>
std::vector<T> get_list(const Json& j, const char* key, bool nonempty = true) {
  if (!j.contains(key) || !j[key].is_array()) throw ConfigError(std::string("config key '") + key + "' must be a list");
  std::vector<T> out;
  for (const auto& v : j[key]) {
    if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      if (!is_nonnegative_integer(v)) throw ConfigError(std::string("config list '") + key + "' must hold nonnegative integers");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(std::string("config list '") + key + "' must hold integers");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(std::string("config list '") + key + "' must hold numbers");
    } else {
      if (!v.is_string()) throw ConfigError(std::string("config list '") + key + "' must hold strings");
    }
    out.push_back(v.get<T>());
  }
  if (nonempty && out.empty()) throw ConfigError(std::string("config list '") + key + "' must not be empty");
  return out;
}

/// Optimizer, schedule and init keys shared by `train` and the sweeps.
void read_optimizer_keys(const Json& j, TrainConfig& t) {
  try {
    t.optimizer = parse_optimizer(get<std::string>(j, "optimizer"));
    t.schedule = parse_schedule(get<std::string>(j, "schedule"));
  } catch (const ModelError& e) {
    throw ConfigError(e.what());
  }
  t.warmup_steps = get<std::size_t>(j, "warmup_steps");
  t.init_scale = get<double>(j, "init_scale");
  if (j.contains("beta1")) t.adam.beta1 = get<double>(j, "beta1");
  if (j.contains("beta2")) t.adam.beta2 = get<double>(j, "beta2");
  if (j.contains("eps")) t.adam.eps = get<double>(j, "eps");
}

void check_train(const TrainConfig& t) {
  try {
    t.validate();
  } catch (const ModelError& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

CorpusSpec corpus_spec_from_json(const Json& j) {
  CorpusSpec s;
  s.kind = get<std::string>(j, "kind");
  if (s.kind != "zipf" && s.kind != "spamlang" && s.kind != "file")
    throw ConfigError("corpus.kind must be zipf, spamlang or file (got '" + s.kind + "')");
  s.path = get<std::string>(j, "path");
  s.vocab_size = get<std::size_t>(j, "vocab_size");
  s.num_seqs = get<std::size_t>(j, "num_seqs");
  s.seq_len = get<std::size_t>(j, "seq_len");
  s.exponent = get<double>(j, "exponent");
  s.seed = get<std::uint64_t>(j, "seed");
  if (s.kind == "file" && s.path.empty()) throw ConfigError("corpus.path is required when corpus.kind is file");
  return s;
}

Corpus make_corpus(const CorpusSpec& spec) {
  try {
    if (spec.kind == "spamlang") return gen_spamlang(spec.vocab_size, spec.num_seqs, spec.seq_len, spec.seed);
    if (spec.kind == "zipf") return gen_zipf_bigram(spec.vocab_size, spec.exponent, spec.num_seqs, spec.seq_len, spec.seed);
  } catch (const CorpusError& e) {
    throw ConfigError(e.what());
  }
  return load_corpus(spec.path);
}

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig t;
  t.steps = get<std::size_t>(j, "steps");
  t.lr = get<double>(j, "lr");
  read_optimizer_keys(j, t);
  t.batch_sequences = get<std::size_t>(j, "batch_sequences");
  t.seed = get<std::uint64_t>(j, "seed");
  t.eval_every = get<std::size_t>(j, "eval_every");
  t.dim = get<Index>(j, "dim");
  t.head_rank = get<Index>(j, "head_rank");
  t.update.hidden = get<bool>(j, "train_hidden");
  t.update.head = get<bool>(j, "train_head");
  check_train(t);
  return t;
}

void SpamSweepConfig::validate() const {
  if (vocab_sizes.empty() || lrs.empty() || seeds.empty()) throw ConfigError("spamlang_sweep: grids must be nonempty");
  for (std::size_t v : vocab_sizes)
    if (v < 2) throw ConfigError("spamlang_sweep: vocab sizes must be >= 2");
  for (double lr : lrs)
    if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("spamlang_sweep: learning rates must be finite and >= 0");
  if (steps == 0 || eval_every == 0) throw ConfigError("spamlang_sweep: steps and eval_every must be positive");
  if (max_context_len == 0) throw ConfigError("spamlang_sweep: max_context_len must be positive");
  check_train(base);
}

SpamSweepConfig spam_sweep_from_json(const Json& j) {
  SpamSweepConfig s;
  s.vocab_sizes = get_list<std::size_t>(j, "vocab_sizes");
  s.lrs = get_list<double>(j, "lrs");
  s.seeds = get_list<std::uint64_t>(j, "seeds");
  s.dim = get<Index>(j, "dim");
  s.steps = get<std::size_t>(j, "steps");
  s.num_seqs = get<std::size_t>(j, "num_seqs");
  s.seq_len = get<std::size_t>(j, "seq_len");
  s.max_context_len = get<std::size_t>(j, "max_context_len");
  s.eval_every = get<std::size_t>(j, "eval_every");
  read_optimizer_keys(j, s.base);
  s.base.dim = s.dim;
  s.base.steps = s.steps;
  s.base.eval_every = s.eval_every;
  s.validate();
  return s;
}

void BottleneckSweepConfig::validate() const {
  if (ranks.empty() || seeds.empty()) throw ConfigError("bottleneck_sweep: grids must be nonempty");
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    if (ranks[i] < 1 || ranks[i] > dim) throw ConfigError("bottleneck_sweep: ranks must lie in [1, dim]");
    if (i > 0 && ranks[i] <= ranks[i - 1]) throw ConfigError("bottleneck_sweep: ranks must be ascending");
  }
  if (vocab_size < 2) throw ConfigError("bottleneck_sweep: vocab_size must be >= 2");
  if (steps == 0 || eval_every == 0) throw ConfigError("bottleneck_sweep: steps and eval_every must be positive");
  if (val_seqs == 0) throw ConfigError("bottleneck_sweep: val_seqs must be positive");
  if (max_context_len == 0) throw ConfigError("bottleneck_sweep: max_context_len must be positive");
  check_train(base);
}

BottleneckSweepConfig bottleneck_sweep_from_json(const Json& j) {
  BottleneckSweepConfig s;
  s.vocab_size = get<std::size_t>(j, "vocab_size");
  s.dim = get<Index>(j, "dim");
  s.ranks = get_list<Index>(j, "ranks");
  s.seeds = get_list<std::uint64_t>(j, "seeds");
  s.full_head_baseline = get<bool>(j, "full_head_baseline");
  s.steps = get<std::size_t>(j, "steps");
  s.eval_every = get<std::size_t>(j, "eval_every");
  s.exponent = get<double>(j, "exponent");
  s.num_seqs = get<std::size_t>(j, "num_seqs");
  s.val_seqs = get<std::size_t>(j, "val_seqs");
  s.seq_len = get<std::size_t>(j, "seq_len");
  s.max_context_len = get<std::size_t>(j, "max_context_len");
  s.corpus_seed = get<std::uint64_t>(j, "corpus_seed");
  s.base.lr = get<double>(j, "lr");
  read_optimizer_keys(j, s.base);
  s.base.dim = s.dim;
  s.base.steps = s.steps;
  s.base.eval_every = s.eval_every;
  s.validate();
  return s;
}

VerifyConfig verify_config_from_json(const Json& j) {
  VerifyConfig v;
  v.seed = get<std::uint64_t>(j, "seed");
  v.tol = get<double>(j, "tol");
  if (!(v.tol > 0)) throw ConfigError("verify.tol must be positive");
  v.gibbs_trials = get<std::size_t>(j, "gibbs_trials");
  v.rank_bound_trials = get<std::size_t>(j, "rank_bound_trials");
  v.top1_trials = get<std::size_t>(j, "top1_trials");
  v.top1_epsilon = get<double>(j, "top1_epsilon");
  if (!(v.top1_epsilon > 0)) throw ConfigError("verify.top1_epsilon must be positive");
  v.lower_bound_instances = get<std::size_t>(j, "lower_bound_instances");
  v.sgd_corpora = get<std::size_t>(j, "sgd_corpora");
  v.residual_instances = get<std::size_t>(j, "residual_instances");
  v.sgd_corpus.vocab_size = get<std::size_t>(j, "sgd_vocab_size");
  v.sgd_corpus.num_seqs = get<std::size_t>(j, "sgd_num_seqs");
  v.sgd_corpus.seq_len = get<std::size_t>(j, "sgd_seq_len");
  v.sgd_corpus.exponent = get<double>(j, "sgd_exponent");
  v.sgd.max_context_len = get<std::size_t>(j, "sgd_max_context_len");
  v.sgd.batch_fraction = get<double>(j, "sgd_batch_fraction");
  if (!(v.sgd.batch_fraction > 0 && v.sgd.batch_fraction <= 1))
    throw ConfigError("verify.sgd_batch_fraction must lie in (0, 1]");
  v.sgd.delta_grid = get_list<double>(j, "sgd_delta_grid");
  v.sgd.check_delta = get<double>(j, "sgd_check_delta");
  v.sgd.tol = v.tol;
  return v;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

namespace {

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
  const auto n = x.size();
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / double(n);
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / double(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Output handling
// ---------------------------------------------------------------------------

namespace {

class OutputDir {
 public:
  OutputDir(std::string experiment, const Json& config)
      : experiment_(std::move(experiment)), config_(config), root_(resolve_out_dir(config, experiment_)) {
    std::error_code ec;
    fs::create_directories(root_, ec);
    if (ec) throw ConfigError("cannot create output directory " + root_.string() + ": " + ec.message());
  }

  const fs::path& root() const { return root_; }

  std::string path(const std::string& rel) const { return (root_ / rel).string(); }

  void text(const std::string& rel, const std::string& content, std::uint64_t seed) {
    const fs::path p = prepare(rel);
    std::ofstream out(p, std::ios::binary);
    out << content;
    if (!out) throw std::runtime_error("failed to write " + p.string());
    sidecar(rel, seed);
  }

  void checkpoint(const std::string& rel, const ModelParams& params, std::uint64_t seed) {
    save_checkpoint(prepare(rel).string(), params);
    sidecar(rel, seed);
  }

  void svg(const std::string& rel, const std::vector<Series>& series, const PlotOptions& options, std::uint64_t seed) {
    std::ostringstream out;
    write_svg_plot(out, series, options);
    text(rel, out.str(), seed);
  }

  RunOutcome outcome(int code, std::string message) const {
    RunOutcome o;
    o.exit_code = code;
    o.out_dir = root_.string();
    o.files = files_;
    o.message = std::move(message);
    return o;
  }

 private:
  fs::path prepare(const std::string& rel) {
    const fs::path p = root_ / rel;
    fs::create_directories(p.parent_path());
    files_.push_back(rel);
    return p;
  }

  void sidecar(const std::string& rel, std::uint64_t seed) {
    Json meta;
    meta["experiment"] = experiment_;
    meta["file"] = rel;
    meta["seed"] = seed;
    meta["config"] = config_;
    std::ofstream out(root_ / (rel + ".meta.json"), std::ios::binary);
    out << meta.dump(2) << '\n';
  }

  std::string experiment_;
  Json config_;
  fs::path root_;
  std::vector<std::string> files_;
};

template <typename Fn>
std::string render(Fn&& fn) {
  std::ostringstream out;
  fn(out);
  return out.str();
}

Series trajectory_series(const std::string& label, const Trajectory& t, bool validation, double x_scale = 1.0) {
  Series s;
  s.label = label;
  for (const auto& p : t) {
    if (validation && !p.val_loss) continue;
    s.x.push_back(static_cast<double>(p.step) * x_scale);
    s.y.push_back(validation ? *p.val_loss : p.train_loss);
  }
  return s;
}

std::string lr_tag(double lr) { return fmt_double(lr); }

}  // namespace

// ---------------------------------------------------------------------------
// gen-corpus
// ---------------------------------------------------------------------------

RunOutcome run_gen_corpus(const Json& config) {
  const Json& cj = block(config, "corpus");
  const CorpusSpec spec = corpus_spec_from_json(cj);
  if (spec.kind == "file") throw ConfigError("gen-corpus needs corpus.kind zipf or spamlang");
  const std::size_t max_len = get<std::size_t>(cj, "max_context_len");
  if (max_len == 0) throw ConfigError("corpus.max_context_len must be positive");
  const Corpus corpus = make_corpus(spec);

  OutputDir out("gen-corpus", config);
  out.text("corpus.txt", render([&](std::ostream& o) { write_corpus(o, corpus); }), spec.seed);

  const CountTables tables = build_counts(corpus, max_len);
  std::vector<std::size_t> prefixes;
  for (std::size_t n = 1; n <= corpus.sequences.size(); n *= 2) prefixes.push_back(n);
  if (prefixes.empty() || prefixes.back() != corpus.sequences.size()) prefixes.push_back(corpus.sequences.size());
  // Prefix sizes are counted in tokens.
  for (auto& p : prefixes) p *= spec.seq_len;
  const AssumptionStats stats = assumption_stats(corpus, tables.table, tables.counts, prefixes, 20, max_len);
  out.text("stats.csv", render([&](std::ostream& o) { write_stats_csv(o, stats); }), spec.seed);
  return out.outcome(kExitOk, "wrote " + std::to_string(corpus.sequences.size()) + " sequences, " +
                                  std::to_string(tables.counts.num_contexts()) + " contexts");
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

RunOutcome run_train(const Json& config) {
  const Json& cj = block(config, "corpus");
  const Json& tj = block(config, "train");
  const CorpusSpec spec = corpus_spec_from_json(cj);
  const std::size_t max_len = get<std::size_t>(cj, "max_context_len");
  if (max_len == 0) throw ConfigError("corpus.max_context_len must be positive");
  const std::size_t val_seqs = get<std::size_t>(cj, "val_seqs");
  const std::string val_path = get<std::string>(cj, "val_path");
  const TrainConfig tc = train_config_from_json(tj);
  const std::size_t ckpt_every = get<std::size_t>(tj, "checkpoint_every");
  if (ckpt_every > 0 && ckpt_every % tc.eval_every != 0)
    throw ConfigError("train.checkpoint_every must be a multiple of train.eval_every");

  const Corpus corpus = make_corpus(spec);
  std::optional<Corpus> held_out;
  if (!val_path.empty()) {
    held_out = load_corpus(val_path);
  } else if (val_seqs > 0) {
    CorpusSpec vs = spec;
    if (vs.kind == "file") throw ConfigError("corpus.val_seqs needs a generated corpus; use corpus.val_path for files");
    vs.num_seqs = val_seqs;
    if (vs.kind == "zipf") {
      held_out = ZipfBigramSource(vs.vocab_size, vs.exponent, vs.seed).sample(val_seqs, vs.seq_len, vs.seed ^ 0xa0761d6478bd642fULL);
    } else {
      vs.seed ^= 0xa0761d6478bd642fULL;
      held_out = make_corpus(vs);
    }
  }
  if (held_out && held_out->vocab_size != corpus.vocab_size)
    throw ConfigError("validation corpus vocabulary differs from the training corpus");

  const CountTables tables = build_counts(corpus, max_len);
  std::optional<CountMatrix> val_counts;
  if (held_out) val_counts = counts_on_table(*held_out, tables.table, max_len);

  OutputDir out("train", config);
  out.text("corpus.txt", render([&](std::ostream& o) { write_corpus(o, corpus); }), spec.seed);

  TrainingData data;
  data.counts = &tables.counts;
  data.corpus = &corpus;
  data.table = &tables.table;
  data.max_context_len = max_len;
  if (val_counts && val_counts->num_contexts() > 0) data.validation = &*val_counts;

  EvalHook hook;
  if (ckpt_every > 0)
    hook = [&](std::size_t step, const ModelParams& params) -> std::optional<std::string> {
      if (step == 0 || step % ckpt_every != 0) return std::nullopt;
      const std::string rel = "checkpoints/step_" + std::to_string(step) + ".ckpt";
      out.checkpoint(rel, params, tc.seed);
      return rel;
    };

  TrainResult result;
  try {
    result = train(data, tc, std::nullopt, hook);
  } catch (const NumericError& e) {
    return out.outcome(kExitNumeric, e.what());
  }
  out.checkpoint("model.ckpt", result.params, tc.seed);
  out.text("trajectory.csv", render([&](std::ostream& o) { write_trajectory_csv(o, result.trajectory); }), tc.seed);

  std::vector<Series> series = {trajectory_series("train", result.trajectory, false)};
  if (data.validation) series.push_back(trajectory_series("validation", result.trajectory, true));
  out.svg("loss.svg", series, {"Training loss", "step", "loss"}, tc.seed);

  const double floor = entropy_floor(tables.counts);
  const auto& last = result.trajectory.back();
  const std::string summary = render([&](std::ostream& o) {
    o << "metric,value\n";
    o << "contexts," << tables.counts.num_contexts() << '\n';
    o << "tokens," << tables.counts.total << '\n';
    o << "final_train_loss," << fmt_double(last.train_loss) << '\n';
    o << "entropy_floor," << fmt_double(floor) << '\n';
    o << "excess_loss," << fmt_double(last.train_loss - floor) << '\n';
    o << "final_val_loss," << (last.val_loss ? fmt_double(*last.val_loss) : "") << '\n';
    o << "top1_acc," << fmt_double(last.top1_acc) << '\n';
  });
  out.text("summary.csv", summary, tc.seed);
  return out.outcome(kExitOk, "final train loss " + fmt_double(last.train_loss) + " (floor " + fmt_double(floor) + ")");
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

namespace {

Trajectory read_trajectory_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trajectory " + path);
  std::string line;
  std::getline(in, line);
  if (line != "step,train_loss,val_loss,top1_acc") throw ConfigError(path + " is not a trajectory CSV");
  Trajectory t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string step, tl, vl, acc;
    std::getline(ss, step, ',');
    std::getline(ss, tl, ',');
    std::getline(ss, vl, ',');
    std::getline(ss, acc, ',');
    TrajectoryPoint p;
    try {
      p.step = std::stoull(step);
      p.train_loss = std::stod(tl);
      if (!vl.empty()) p.val_loss = std::stod(vl);
      p.top1_acc = acc.empty() ? 0.0 : std::stod(acc);
    } catch (const std::exception&) {
      throw ConfigError(path + ": malformed row '" + line + "'");
    }
    t.push_back(p);
  }
  return t;
}

}  // namespace

RunOutcome run_diagnose(const Json& config) {
  const Json& dj = block(config, "diagnose");
  const std::string ckpt_path = get<std::string>(dj, "checkpoint");
  const std::string corpus_path = get<std::string>(dj, "corpus");
  if (ckpt_path.empty() || corpus_path.empty()) throw ConfigError("diagnose needs diagnose.checkpoint and diagnose.corpus");
  const std::size_t max_len = get<std::size_t>(dj, "max_context_len");
  if (max_len == 0) throw ConfigError("diagnose.max_context_len must be positive");
  const double tol = get<double>(dj, "tol");
  if (!(tol > 0)) throw ConfigError("diagnose.tol must be positive");
  const auto seed = get<std::uint64_t>(dj, "seed");
  const auto fractions = get_list<double>(dj, "fractions");
  auto token_counts = get_list<std::size_t>(dj, "rank_token_counts", false);
  auto prefix_sizes = get_list<std::size_t>(dj, "prefix_sizes", false);
  const std::string trajectory_path = get<std::string>(dj, "trajectory");

  const ModelParams params = load_checkpoint(ckpt_path);
  const Corpus corpus = load_corpus(corpus_path);
  const CountTables tables = build_counts(corpus, max_len);
  const CountMatrix& counts = tables.counts;
  if (params.hidden.rows() != counts.num_contexts() || params.head.vocab_size() != counts.vocab_size())
    throw ConfigError("checkpoint shape (C=" + std::to_string(params.hidden.rows()) +
                      ", V=" + std::to_string(params.head.vocab_size()) + ") does not match the corpus (C=" +
                      std::to_string(counts.num_contexts()) + ", V=" + std::to_string(counts.vocab_size()) + ")");

  const std::size_t events = tables.events.size();
  const auto v = static_cast<std::size_t>(counts.vocab_size());
  if (token_counts.empty()) {
    const std::size_t cap = std::min(events, 2 * v);
    for (std::size_t n = 1; n < cap; n *= 2) token_counts.push_back(n);
    if (cap > 0) token_counts.push_back(cap);
  }
  if (prefix_sizes.empty()) {
    for (std::size_t n = 1; n < events; n *= 4) prefix_sizes.push_back(n);
    prefix_sizes.push_back(events);
  }

  OutputDir out("diagnose", config);
  const Matrix logit_mat = logits(params);
  const Matrix probs = softmax_rows(logit_mat);
  const Matrix grad = logit_gradient(counts, probs);

  const RankCurve curve = gradient_rank_curve(tables.events, probs, token_counts, seed, tol);
  out.text("rank_curve.csv", render([&](std::ostream& o) { write_rank_curve_csv(o, curve); }), seed);
  {
    Series rank{"rank", {}, {}}, cap{"min(tokens, V)", {}, {}};
    for (const auto& p : curve) {
      rank.x.push_back(double(p.token_count));
      rank.y.push_back(double(p.rank));
      cap.x.push_back(double(p.token_count));
      cap.y.push_back(double(p.max_rank));
    }
    out.svg("rank_curve.svg", {rank, cap}, {"Per-token gradient rank", "tokens", "rank", true, true}, seed);
  }

  const CompressionReport report = compression_report(grad, params.head);
  out.text("compression.csv", render([&](std::ostream& o) { write_compression_csv(o, report); }), seed);
  out.text("context_lost_fraction.csv", render([&](std::ostream& o) {
             o << "context,weight,lost_fraction\n";
             for (std::size_t i = 0; i < report.per_row_lost.size(); ++i)
               o << i << ',' << fmt_double(counts.weights(Index(i))) << ',' << fmt_double(report.per_row_lost[i])
                 << '\n';
           }),
           seed);

  if (!report.zero_gradient) {
    const auto split = range_kernel_split(params.head.effective());
    const CoefficientProfile profile = coefficient_profile(grad, project_rows_onto_span(grad, split.range));
    out.text("profile.csv", render([&](std::ostream& o) { write_profile_csv(o, profile); }), seed);
    Series full{"full gradient", {}, profile.full_mean}, proj{"visible part", {}, profile.proj_mean};
    for (std::size_t k = 0; k < profile.full_mean.size(); ++k) {
      full.x.push_back(double(k + 1));
      proj.x.push_back(double(k + 1));
    }
    out.svg("profile.svg", {full, proj}, {"Sorted gradient coefficients", "position", "mean coefficient", true}, seed);

    const EfficiencyCurve eff = update_efficiency(counts, params, fractions);
    out.text("efficiency.csv", render([&](std::ostream& o) { write_efficiency_csv(o, eff); }), seed);
    Series d1{"logit gradient", eff.fractions, {}}, d2{"hidden-state update", eff.fractions, {}};
    for (std::size_t i = 0; i < eff.fractions.size(); ++i) {
      d1.y.push_back(-eff.loss_delta_logit_dir[i]);
      d2.y.push_back(-eff.loss_delta_hidden_dir[i]);
    }
    out.svg("efficiency.svg", {d1, d2}, {"Loss decrease per step size", "alpha", "loss decrease", true, true}, seed);
  }

  const AssumptionStats stats = assumption_stats(corpus, tables.table, counts, prefix_sizes, 20, max_len);
  out.text("stats.csv", render([&](std::ostream& o) { write_stats_csv(o, stats); }), seed);

  const Top1Accuracy acc = top1_accuracy(counts, probs);
  const double l = loss_from_logits(counts, logit_mat);
  const double floor = entropy_floor(counts);
  out.text("summary.csv", render([&](std::ostream& o) {
             o << "metric,value\n";
             o << "contexts," << counts.num_contexts() << '\n';
             o << "vocab_size," << counts.vocab_size() << '\n';
             o << "dim," << params.head.dim() << '\n';
             o << "head_rank," << params.head.inner_rank() << '\n';
             o << "loss," << fmt_double(l) << '\n';
             o << "entropy_floor," << fmt_double(floor) << '\n';
             o << "top1_acc_weighted," << fmt_double(acc.weighted) << '\n';
             o << "top1_acc_unweighted," << fmt_double(acc.unweighted) << '\n';
             o << "lost_fraction," << fmt_double(report.lost_fraction) << '\n';
             o << "isotropic_lost_fraction,"
               << fmt_double(std::sqrt(std::max(0.0, 1.0 - double(qr_rank(params.head.effective())) / double(v))))
               << '\n';
           }),
           seed);

  if (!trajectory_path.empty()) {
    const Trajectory t = read_trajectory_csv(trajectory_path);
    std::vector<Series> series = {trajectory_series("train", t, false)};
    if (std::any_of(t.begin(), t.end(), [](const auto& p) { return p.val_loss.has_value(); }))
      series.push_back(trajectory_series("validation", t, true));
    out.svg("loss.svg", series, {"Training loss", "step", "loss"}, seed);
  }
  return out.outcome(kExitOk, "lost fraction " + fmt_double(report.lost_fraction));
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

std::vector<VerificationResult> verify_all(const VerifyConfig& c) {
  std::vector<VerificationResult> out;
  out.push_back(verify_gibbs(c.gibbs_trials, {}, c.seed));
  out.push_back(verify_rank_bounds(c.rank_bound_trials, {}, c.seed + 1, c.tol));
  out.push_back(verify_top1(c.top1_trials, {}, c.top1_epsilon, c.seed + 2));
  out.push_back(verify_rank_lower_bound(c.lower_bound_instances, {}, c.seed + 3, c.tol));
  out.push_back(verify_sgd_rank(c.sgd_corpora, c.sgd_corpus, c.sgd, c.seed + 4));
  out.push_back(verify_update_residual(c.residual_instances, {}, c.seed + 5, c.tol));
  return out;
}

RunOutcome run_verify(const Json& config) {
  const VerifyConfig vc = verify_config_from_json(block(config, "verify"));
  const auto results = verify_all(vc);
  OutputDir out("verify", config);
  std::size_t violations = 0;
  for (const auto& r : results) {
    violations += r.violations;
    out.text(r.proposition + ".csv", render([&](std::ostream& o) { write_instances_csv(o, r); }), r.seed);
  }
  out.text("summary.csv", render([&](std::ostream& o) {
             o << "check,seed,instances,violations,skipped,worst_margin,passed\n";
             for (const auto& r : results)
               o << r.proposition << ',' << r.seed << ',' << r.instances << ',' << r.violations << ',' << r.skipped << ','
                 << fmt_double(r.worst_margin) << ',' << (r.passed() ? 1 : 0) << '\n';
           }),
           vc.seed);
  std::string message = std::to_string(violations) + " violation(s) across " + std::to_string(results.size()) + " checks";
  if (vc.tol > 1e-3) message += "; warning: rank tolerance " + fmt_double(vc.tol) + " is far above working precision";
  return out.outcome(violations > 0 ? kExitViolation : kExitOk, message);
}

// ---------------------------------------------------------------------------
// SpamLang sweep
// ---------------------------------------------------------------------------

SpamCell run_spam_cell(const SpamSweepConfig& config, std::size_t vocab_size, double lr, std::uint64_t seed) {
  SpamCell cell;
  cell.vocab_size = vocab_size;
  cell.lr = lr;
  cell.seed = seed;
  const Corpus corpus = gen_spamlang(vocab_size, config.num_seqs, config.seq_len, seed);
  const CountTables tables = build_counts(corpus, config.max_context_len);
  TrainingData data;
  data.counts = &tables.counts;
  data.corpus = &corpus;
  data.table = &tables.table;
  data.max_context_len = config.max_context_len;
  TrainConfig tc = config.base;
  tc.lr = lr;
  tc.seed = seed;
  tc.dim = config.dim;
  tc.steps = config.steps;
  tc.eval_every = config.eval_every;
  cell.entropy_floor = entropy_floor(tables.counts);
  try {
    TrainResult r = train(data, tc);
    cell.trajectory = std::move(r.trajectory);
    cell.initial_loss = cell.trajectory.front().train_loss;
    cell.final_loss = cell.trajectory.back().train_loss;
    cell.excess_loss = cell.final_loss - cell.entropy_floor;
    cell.top1_acc = cell.trajectory.back().top1_acc;
  } catch (const NumericError& e) {
    cell.failed = true;
    cell.error = e.what();
    cell.final_loss = cell.excess_loss = std::numeric_limits<double>::quiet_NaN();
  }
  return cell;
}

SpamSweepResult spamlang_sweep(const SpamSweepConfig& config) {
  config.validate();
  SpamSweepResult res;
  for (std::size_t v : config.vocab_sizes)
    for (double lr : config.lrs)
      for (std::uint64_t seed : config.seeds) res.cells.push_back(run_spam_cell(config, v, lr, seed));

  std::vector<double> xs, ys;
  for (std::size_t v : config.vocab_sizes) {
    SpamBest best{v, 0, std::numeric_limits<double>::infinity()};
    for (double lr : config.lrs) {
      double sum = 0;
      bool failed = false;
      for (const auto& c : res.cells)
        if (c.vocab_size == v && c.lr == lr) {
          failed = failed || c.failed;
          sum += c.excess_loss;
        }
      const double mean = failed ? std::numeric_limits<double>::infinity() : sum / double(config.seeds.size());
      if (mean < best.mean_excess) best = {v, lr, mean};
    }
    res.best.push_back(best);
    for (const auto& c : res.cells)
      if (c.vocab_size == v && c.lr == best.lr && !c.failed) {
        xs.push_back(double(v));
        ys.push_back(c.excess_loss);
      }
  }
  res.spearman_vocab_excess = spearman(xs, ys);
  return res;
}

RunOutcome run_spamlang_sweep(const Json& config) {
  const SpamSweepConfig sc = spam_sweep_from_json(block(config, "spamlang_sweep"));
  const SpamSweepResult res = spamlang_sweep(sc);
  OutputDir out("spamlang-sweep", config);
  for (const auto& c : res.cells) {
    if (c.failed) continue;
    const std::string dir = "cells/V" + std::to_string(c.vocab_size) + "_lr" + lr_tag(c.lr) + "_seed" + std::to_string(c.seed);
    out.text(dir + "/trajectory.csv", render([&](std::ostream& o) { write_trajectory_csv(o, c.trajectory); }), c.seed);
  }
  out.text("cells.csv", render([&](std::ostream& o) {
             o << "vocab_size,lr,seed,status,initial_loss,final_loss,entropy_floor,excess_loss,top1_acc\n";
             for (const auto& c : res.cells)
               o << c.vocab_size << ',' << fmt_double(c.lr) << ',' << c.seed << ',' << (c.failed ? "diverged" : "ok")
                 << ',' << fmt_double(c.initial_loss) << ',' << fmt_double(c.final_loss) << ','
                 << fmt_double(c.entropy_floor) << ',' << fmt_double(c.excess_loss) << ',' << fmt_double(c.top1_acc)
                 << '\n';
           }),
           0);
  // V x lr table of seed-averaged excess loss.
  out.text("grid.csv", render([&](std::ostream& o) {
             o << "vocab_size,lr,mean_excess_loss,mean_final_loss,failed_seeds\n";
             for (std::size_t v : sc.vocab_sizes)
               for (double lr : sc.lrs) {
                 double ex = 0, fl = 0;
                 std::size_t failed = 0, ok = 0;
                 for (const auto& c : res.cells)
                   if (c.vocab_size == v && c.lr == lr) {
                     if (c.failed) {
                       ++failed;
                       continue;
                     }
                     ++ok;
                     ex += c.excess_loss;
                     fl += c.final_loss;
                   }
                 const double nan = std::numeric_limits<double>::quiet_NaN();
                 o << v << ',' << fmt_double(lr) << ',' << fmt_double(ok ? ex / double(ok) : nan) << ','
                   << fmt_double(ok ? fl / double(ok) : nan) << ',' << failed << '\n';
               }
           }),
           0);
  out.text("best.csv", render([&](std::ostream& o) {
             o << "vocab_size,best_lr,mean_excess_loss\n";
             for (const auto& b : res.best)
               o << b.vocab_size << ',' << fmt_double(b.lr) << ',' << fmt_double(b.mean_excess) << '\n';
           }),
           0);
  out.text("summary.csv", render([&](std::ostream& o) {
             o << "metric,value\n";
             o << "dim," << sc.dim << '\n';
             o << "steps," << sc.steps << '\n';
             o << "spearman_vocab_excess," << fmt_double(res.spearman_vocab_excess) << '\n';
             o << "failed_cells," << std::count_if(res.cells.begin(), res.cells.end(), [](auto& c) { return c.failed; })
               << '\n';
           }),
           0);

  std::vector<Series> grid_series;
  for (double lr : sc.lrs) {
    Series s{"lr " + fmt_double(lr), {}, {}};
    for (std::size_t v : sc.vocab_sizes) {
      double ex = 0;
      std::size_t ok = 0;
      for (const auto& c : res.cells)
        if (c.vocab_size == v && c.lr == lr && !c.failed) {
          ex += c.excess_loss;
          ++ok;
        }
      if (ok == 0) continue;
      s.x.push_back(double(v));
      s.y.push_back(ex / double(ok));
    }
    grid_series.push_back(std::move(s));
  }
  out.svg("excess_vs_vocab.svg", grid_series, {"Final excess loss", "V", "loss - entropy floor", true, true}, 0);

  std::vector<Series> traj_series;
  for (const auto& b : res.best)
    for (const auto& c : res.cells)
      if (c.vocab_size == b.vocab_size && c.lr == b.lr && !c.failed) {
        traj_series.push_back(trajectory_series("V " + std::to_string(c.vocab_size), c.trajectory, false));
        break;
      }
  out.svg("trajectories.svg", traj_series, {"Training loss at the best lr", "step", "loss", false, true}, 0);
  return out.outcome(kExitOk, "Spearman(V, excess loss) = " + fmt_double(res.spearman_vocab_excess));
}

// ---------------------------------------------------------------------------
// Bottleneck sweep
// ---------------------------------------------------------------------------

BottleneckSweepResult bottleneck_sweep(const BottleneckSweepConfig& config) {
  config.validate();
  const ZipfBigramSource source(config.vocab_size, config.exponent, config.corpus_seed);
  const Corpus train_corpus = source.sample(config.num_seqs, config.seq_len, config.corpus_seed ^ 0x9e3779b97f4a7c15ULL);
  const Corpus val_corpus = source.sample(config.val_seqs, config.seq_len, config.corpus_seed ^ 0xa0761d6478bd642fULL);
  const CountTables tables = build_counts(train_corpus, config.max_context_len);
  const CountMatrix val = counts_on_table(val_corpus, tables.table, config.max_context_len);
  if (val.num_contexts() == 0) throw ConfigError("bottleneck_sweep: validation corpus shares no contexts with training");

  TrainingData data;
  data.counts = &tables.counts;
  data.corpus = &train_corpus;
  data.table = &tables.table;
  data.max_context_len = config.max_context_len;
  data.validation = &val;

  BottleneckSweepResult res;
  res.train_tokens = tables.counts.total;
  res.train_entropy_floor = entropy_floor(tables.counts);
  std::vector<Index> heads = config.ranks;
  if (config.full_head_baseline) heads.push_back(0);
  for (Index r : heads)
    for (std::uint64_t seed : config.seeds) {
      BottleneckCell cell;
      cell.head_rank = r;
      cell.seed = seed;
      TrainConfig tc = config.base;
      tc.dim = config.dim;
      tc.steps = config.steps;
      tc.eval_every = config.eval_every;
      tc.head_rank = r;
      tc.seed = seed;
      try {
        TrainResult tr = train(data, tc);
        cell.trajectory = std::move(tr.trajectory);
        cell.final_train_loss = cell.trajectory.back().train_loss;
        cell.final_val_loss = *cell.trajectory.back().val_loss;
      } catch (const NumericError& e) {
        cell.failed = true;
        cell.error = e.what();
        cell.final_train_loss = cell.final_val_loss = std::numeric_limits<double>::quiet_NaN();
      }
      res.cells.push_back(std::move(cell));
    }

  std::vector<double> xs, ys;
  for (const auto& c : res.cells)
    if (c.head_rank > 0 && !c.failed) {
      xs.push_back(double(c.head_rank));
      ys.push_back(c.final_val_loss);
    }
  res.spearman_rank_loss = spearman(xs, ys);

  // Seed-averaged validation curves of the extreme ranks.
  auto mean_curve = [&](Index r) {
    std::vector<double> curve;
    std::size_t n = 0;
    for (const auto& c : res.cells) {
      if (c.head_rank != r || c.failed) continue;
      if (curve.empty()) curve.assign(c.trajectory.size(), 0.0);
      for (std::size_t i = 0; i < c.trajectory.size(); ++i) curve[i] += *c.trajectory[i].val_loss;
      ++n;
    }
    for (auto& x : curve) x /= double(std::max<std::size_t>(n, 1));
    return curve;
  };
  const auto small = mean_curve(config.ranks.front());
  const auto large = mean_curve(config.ranks.back());
  if (!small.empty() && !large.empty() && config.ranks.size() > 1) {
    const double target = small.back();
    const Trajectory& steps = res.cells.front().trajectory;
    for (std::size_t i = 0; i < large.size(); ++i)
      if (large[i] <= target) {
        if (steps[i].step > 0) res.token_budget_ratio = double(steps.back().step) / double(steps[i].step);
        break;
      }
  }
  return res;
}

RunOutcome run_bottleneck_sweep(const Json& config) {
  const BottleneckSweepConfig bc = bottleneck_sweep_from_json(block(config, "bottleneck_sweep"));
  const BottleneckSweepResult res = bottleneck_sweep(bc);
  OutputDir out("bottleneck-sweep", config);
  auto head_name = [](Index r) { return r == 0 ? std::string("full") : "r" + std::to_string(r); };
  for (const auto& c : res.cells) {
    if (c.failed) continue;
    out.text("cells/" + head_name(c.head_rank) + "_seed" + std::to_string(c.seed) + "/trajectory.csv",
             render([&](std::ostream& o) { write_trajectory_csv(o, c.trajectory); }), c.seed);
  }
  out.text("final_loss.csv", render([&](std::ostream& o) {
             o << "head,rank,seed,baseline,status,final_train_loss,final_val_loss\n";
             for (const auto& c : res.cells)
               o << head_name(c.head_rank) << ',' << (c.head_rank == 0 ? bc.dim : c.head_rank) << ',' << c.seed << ','
                 << (c.head_rank == 0 ? 1 : 0) << ',' << (c.failed ? "diverged" : "ok") << ','
                 << fmt_double(c.final_train_loss) << ',' << fmt_double(c.final_val_loss) << '\n';
           }),
           bc.corpus_seed);
  out.text("summary.csv", render([&](std::ostream& o) {
             o << "metric,value\n";
             o << "vocab_size," << bc.vocab_size << '\n';
             o << "dim," << bc.dim << '\n';
             o << "train_tokens," << res.train_tokens << '\n';
             o << "train_entropy_floor," << fmt_double(res.train_entropy_floor) << '\n';
             o << "spearman_rank_val_loss," << fmt_double(res.spearman_rank_loss) << '\n';
             o << "token_budget_ratio,"
               << (res.token_budget_ratio ? fmt_double(*res.token_budget_ratio) : std::string()) << '\n';
           }),
           bc.corpus_seed);

  std::vector<Index> heads = bc.ranks;
  if (bc.full_head_baseline) heads.push_back(0);
  std::vector<Series> curves;
  Series final_series{"final validation loss", {}, {}};
  for (Index r : heads) {
    Series s{head_name(r), {}, {}};
    std::size_t n = 0;
    double final_sum = 0;
    for (const auto& c : res.cells) {
      if (c.head_rank != r || c.failed) continue;
      if (s.x.empty())
        for (const auto& p : c.trajectory) {
          s.x.push_back(double(p.step) * double(res.train_tokens));
          s.y.push_back(0.0);
        }
      for (std::size_t i = 0; i < c.trajectory.size(); ++i) s.y[i] += *c.trajectory[i].val_loss;
      final_sum += c.final_val_loss;
      ++n;
    }
    if (n == 0) continue;
    for (auto& y : s.y) y /= double(n);
    curves.push_back(std::move(s));
    if (r > 0) {
      final_series.x.push_back(double(r));
      final_series.y.push_back(final_sum / double(n));
    }
  }
  out.svg("val_loss.svg", curves, {"Validation loss", "training tokens", "loss", true, false}, bc.corpus_seed);
  out.svg("final_vs_rank.svg", {final_series}, {"Final validation loss", "head rank", "loss", true, false},
          bc.corpus_seed);
  std::string message = "Spearman(rank, val loss) = " + fmt_double(res.spearman_rank_loss);
  if (res.token_budget_ratio) message += ", token budget ratio " + fmt_double(*res.token_budget_ratio);
  return out.outcome(kExitOk, message);
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

void markdown_table(std::ostream& o, const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty()) return;
  auto emit = [&](const std::vector<std::string>& r) {
    o << '|';
    for (const auto& c : r) o << ' ' << c << " |";
    o << '\n';
  };
  emit(rows.front());
  o << '|';
  for (std::size_t i = 0; i < rows.front().size(); ++i) o << " --- |";
  o << '\n';
  for (std::size_t i = 1; i < rows.size(); ++i) emit(rows[i]);
  o << '\n';
}

}  // namespace

RunOutcome run_report(const Json& config) {
  const auto inputs = get_list<std::string>(block(config, "report"), "inputs");
  OutputDir out("report", config);
  std::ostringstream md;
  md << "# Experiment report\n\n";
  std::size_t plots = 0;
  for (const auto& input : inputs) {
    const fs::path dir(input);
    if (!fs::is_directory(dir)) throw ConfigError("report input " + input + " is not a directory");
    md << "## " << dir.filename().string() << "\n\n";
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".csv") names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
      const auto rows = read_csv(dir / name);
      md << "### " << name << "\n\n";
      if (rows.size() > 41) {
        md << "(" << rows.size() - 1 << " rows, first 40 shown)\n\n";
        markdown_table(md, std::vector<std::vector<std::string>>(rows.begin(), rows.begin() + 41));
      } else {
        markdown_table(md, rows);
      }
      if (name == "trajectory.csv" && rows.size() > 1) {
        const Trajectory t = read_trajectory_csv((dir / name).string());
        const std::string rel = "plots/" + dir.filename().string() + "_loss.svg";
        out.svg(rel, {trajectory_series("train", t, false)}, {"Training loss", "step", "loss"}, 0);
        md << "![loss](" << rel << ")\n\n";
        ++plots;
      }
    }
  }
  out.text("report.md", md.str(), 0);
  return out.outcome(kExitOk, "summarized " + std::to_string(inputs.size()) + " run(s), " + std::to_string(plots) +
                                  " plot(s)");
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = {"gen-corpus",     "train",           "diagnose", "verify",
                                                 "spamlang-sweep", "bottleneck-sweep", "report"};
  return names;
}

RunOutcome run_experiment(const std::string& experiment, const Json& config) {
  if (experiment == "gen-corpus") return run_gen_corpus(config);
  if (experiment == "train") return run_train(config);
  if (experiment == "diagnose") return run_diagnose(config);
  if (experiment == "verify") return run_verify(config);
  if (experiment == "spamlang-sweep") return run_spamlang_sweep(config);
  if (experiment == "bottleneck-sweep") return run_bottleneck_sweep(config);
  if (experiment == "report") return run_report(config);
  throw ConfigError("unknown experiment '" + experiment + "'");
}

}  // namespace lmgrad
