// ipat: train the toy model, trace influence patterns, report metrics.
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <tbb/global_control.h>

#include "ipat/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ipat;

namespace {

// Usage problems (bad flags, missing input files) exit with 2.
struct UsageError : Error {
  using Error::Error;
};

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path.string());
}

json read_json(const fs::path& path, const std::string& what) {
  require_file(path, what);
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(what + " " + path.string() + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// Field access that names the JSON path of whatever is missing or mistyped.
const json& field(const json& j, const std::string& path, const std::string& key) {
  if (!j.is_object()) throw Error("schema error at " + path + ": expected an object");
  const auto it = j.find(key);
  if (it == j.end()) throw Error("schema error at " + path + ": missing field '" + key + "'");
  return *it;
}

template <typename T>
T get(const json& j, const std::string& path, const std::string& key) {
  const json& v = field(j, path, key);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw Error("schema error at " + path + "/" + key + ": wrong type");
  }
}

void check_schema_version(const json& j, const std::string& what) {
  const int v = get<int>(j, "/", "schema_version");
  if (v != kSchemaVersion) {
    throw Error(what + " has schema_version " + std::to_string(v) + ", expected " + std::to_string(kSchemaVersion));
  }
}

// ---------------------------------------------------------------- train

struct RunConfig {
  std::uint64_t seed = 0;
  int n_train = 2000;
  int n_heldout = 500;
  TrainConfig train;
  int layers = 3, heads = 4, hidden = 32, ffn_width = 64;
};

RunConfig parse_run_config(const json& j) {
  if (!j.is_object()) throw Error("bad config: expected a JSON object");
  RunConfig c;
  static const std::set<std::string> known = {"schema_version", "seed",       "n_train",   "n_heldout",
                                              "epochs",         "learning_rate", "momentum", "batch_size",
                                              "clip_norm",      "full_vocab", "model"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw Error("bad config: unknown key '" + key + "'");
  }
  try {
    if (j.contains("schema_version") && j["schema_version"].get<int>() != kSchemaVersion) {
      throw Error("bad config: unsupported schema_version");
    }
    c.seed = j.value("seed", c.seed);
    c.n_train = j.value("n_train", c.n_train);
    c.n_heldout = j.value("n_heldout", c.n_heldout);
    c.train.epochs = j.value("epochs", c.train.epochs);
    c.train.learning_rate = j.value("learning_rate", c.train.learning_rate);
    c.train.momentum = j.value("momentum", c.train.momentum);
    c.train.batch_size = j.value("batch_size", c.train.batch_size);
    c.train.clip_norm = j.value("clip_norm", c.train.clip_norm);
    c.train.full_vocab = j.value("full_vocab", c.train.full_vocab);
    if (j.contains("model")) {
      const json& m = j["model"];
      static const std::set<std::string> model_keys = {"layers", "heads", "hidden", "ffn_width"};
      if (!m.is_object()) throw Error("bad config: 'model' must be an object");
      for (const auto& [key, value] : m.items()) {
        if (!model_keys.count(key)) throw Error("bad config: unknown key 'model." + key + "'");
      }
      c.layers = m.value("layers", c.layers);
      c.heads = m.value("heads", c.heads);
      c.hidden = m.value("hidden", c.hidden);
      c.ffn_width = m.value("ffn_width", c.ffn_width);
    }
  } catch (const json::exception& e) {
    throw Error(std::string("bad config: ") + e.what());
  }
  c.train.seed = c.seed;
  if (c.n_train < 4 || c.n_heldout < 4) throw Error("bad config: n_train and n_heldout must be at least 4");
  if (c.train.epochs < 1 || c.train.batch_size < 1 || !(c.train.learning_rate > 0.0)) {
    throw Error("bad config: epochs, batch_size and learning_rate must be positive");
  }
  return c;
}

json config_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"n_train", c.n_train},
          {"n_heldout", c.n_heldout},
          {"epochs", c.train.epochs},
          {"learning_rate", c.train.learning_rate},
          {"momentum", c.train.momentum},
          {"batch_size", c.train.batch_size},
          {"clip_norm", c.train.clip_norm},
          {"full_vocab", c.train.full_vocab},
          {"model", {{"layers", c.layers}, {"heads", c.heads}, {"hidden", c.hidden}, {"ffn_width", c.ffn_width}}}};
}

int cmd_train(const fs::path& config_path, const fs::path& out_dir) {
  const RunConfig rc = parse_run_config(read_json(config_path, "config file"));
  const Template tmpl = sva_object_template();
  const Vocab vocab = tmpl.vocab();
  // Corpus seeds are derived from the run seed so train and held-out differ.
  const auto train_set = sample_instances(tmpl, vocab, rc.n_train, 2 * rc.seed + 1);
  const auto heldout = sample_instances(tmpl, vocab, rc.n_heldout, 2 * rc.seed + 2);

  ModelConfig mc = default_model_config(tmpl, rc.seed);
  mc.layers = rc.layers;
  mc.heads = rc.heads;
  mc.hidden = rc.hidden;
  mc.ffn_width = rc.ffn_width;
  validate(mc);
  ToyTransformer model(mc);
  const TrainResult result = train(model, train_set, heldout, rc.train);
  const Evaluation ev = evaluate(model, heldout);

  fs::create_directories(out_dir);
  const fs::path ckpt = out_dir / "model.ckpt";
  model.save(ckpt);
  write_corpus(out_dir / "train.tsv", train_set);
  write_corpus(out_dir / "heldout.tsv", heldout);

  json metrics;
  metrics["schema_version"] = kSchemaVersion;
  metrics["config"] = config_json(rc);
  metrics["curve"] = json::array();
  for (const EpochStats& e : result.curve) {
    metrics["curve"].push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"heldout_accuracy", e.heldout_accuracy}});
  }
  metrics["final_accuracy"] = ev.accuracy;
  for (const auto& [tag, acc] : ev.per_case) metrics["per_case"][to_string(tag)] = acc;
  write_text(out_dir / "train_metrics.json", dump(metrics));
  std::cout << ckpt.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- trace

// Token strings for instances when the checkpoint uses the template vocabulary.
std::optional<Vocab> template_vocab(const ToyTransformer& model) {
  Vocab v = sva_object_template().vocab();
  if (v.size() == model.config().vocab) return v;
  return std::nullopt;
}

json nodes_json(const std::vector<NodeId>& nodes) {
  json out = json::array();
  for (const NodeId& n : nodes) out.push_back(n.key());
  return out;
}

json collection_json(const Instance& inst, std::size_t index, const PatternCollection& c,
                     const std::optional<Vocab>& vocab) {
  json j;
  j["index"] = index;
  j["tokens"] = inst.tokens;
  if (vocab) j["text"] = detokenize(*vocab, inst.tokens);
  j["records"] = json::array();
  for (const Pattern& p : c.patterns) {
    j["records"].push_back({{"word", p.word},
                            {"token", inst.tokens[static_cast<std::size_t>(p.word)]},
                            {"nodes", nodes_json(p.nodes)},
                            {"influence", p.influence},
                            {"attribution", p.attribution},
                            {"sign", p.sign == Sign::positive ? "positive" : "negative"}});
  }
  return j;
}

struct TraceArgs {
  fs::path checkpoint, corpus, out = "patterns.json", dot;
  std::string granularity = "embedding", method = "gpr", precision;
  int samples = 50;
  std::uint64_t seed = 0;
  int limit = 0;
  int dot_instance = 0;
  bool rollout = true;
};

int cmd_trace(const TraceArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.corpus, "corpus");
  TraceOptions o;
  o.granularity = parse_granularity(a.granularity);
  o.method = parse_method(a.method);
  if (!supports(o.method, o.granularity)) {
    throw UsageError("method '" + a.method + "' only supports --granularity embedding");
  }
  if (a.samples < 1) throw UsageError("--samples must be at least 1");
  o.doi.n_samples = a.samples;
  o.seed = a.seed;
  o.precision = a.precision.empty() ? default_precision() : parse_precision(a.precision);
  o.use_rollout = a.rollout;

  const ToyTransformer model = ToyTransformer::load(a.checkpoint);
  auto instances = read_corpus(a.corpus);
  if (a.limit > 0 && static_cast<std::size_t>(a.limit) < instances.size()) instances.resize(static_cast<std::size_t>(a.limit));
  if (instances.empty()) throw Error("corpus " + a.corpus.string() + " has no instances");
  const auto collections = trace_corpus(model, instances, o);
  const auto vocab = template_vocab(model);

  json j;
  j["schema_version"] = kSchemaVersion;
  j["method"] = to_string(o.method);
  j["granularity"] = std::string(to_string(o.granularity));
  j["samples"] = o.doi.n_samples;
  j["seed"] = o.seed;
  j["precision"] = o.precision == Precision::float32 ? "float32" : "float64";
  j["rollout"] = o.use_rollout;
  j["instances"] = json::array();
  for (std::size_t i = 0; i < instances.size(); ++i) j["instances"].push_back(collection_json(instances[i], i, collections[i], vocab));
  write_text(a.out, dump(j));

  if (!a.dot.empty()) {
    if (a.dot_instance < 0 || static_cast<std::size_t>(a.dot_instance) >= instances.size()) {
      throw UsageError("--dot-instance outside the traced corpus");
    }
    const Instance& inst = instances[static_cast<std::size_t>(a.dot_instance)];
    const GraphView view = build_view(model.config(), static_cast<int>(inst.tokens.size()), inst.mask_position, o.granularity);
    DotOptions d;
    if (vocab) {
      for (int t : inst.tokens) d.words.push_back(vocab->word(t));
    }
    d.title = to_string(o.method) + " " + std::string(to_string(o.granularity)) + " patterns, instance " +
              std::to_string(a.dot_instance);
    write_text(a.dot, to_dot(view, collections[static_cast<std::size_t>(a.dot_instance)].patterns, d));
  }
  std::cout << a.out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- report

struct TracedMethod {
  std::string method;
  Granularity granularity;
  std::vector<PatternCollection> collections;
};

TracedMethod read_patterns(const fs::path& path, std::span<const Instance> instances) {
  const json j = read_json(path, "patterns file");
  check_schema_version(j, "patterns file " + path.string());
  TracedMethod t;
  t.method = get<std::string>(j, "", "method");
  parse_method(t.method);
  t.granularity = parse_granularity(get<std::string>(j, "", "granularity"));
  const json& list = field(j, "", "instances");
  if (!list.is_array()) throw Error("schema error at /instances: expected an array");
  if (list.size() > instances.size()) {
    throw Error("patterns file " + path.string() + " has more instances than the corpus");
  }
  for (std::size_t i = 0; i < list.size(); ++i) {
    const std::string ipath = "/instances/" + std::to_string(i);
    const json& item = list[i];
    if (get<std::size_t>(item, ipath, "index") != i) throw Error("schema error at " + ipath + "/index: out of order");
    if (get<std::vector<int>>(item, ipath, "tokens") != instances[i].tokens) {
      throw Error("patterns file " + path.string() + " does not match the corpus at instance " + std::to_string(i));
    }
    PatternCollection c;
    c.granularity = t.granularity;
    const json& records = field(item, ipath, "records");
    if (!records.is_array()) throw Error("schema error at " + ipath + "/records: expected an array");
    for (std::size_t r = 0; r < records.size(); ++r) {
      const std::string rpath = ipath + "/records/" + std::to_string(r);
      const json& rec = records[r];
      Pattern p;
      p.word = get<int>(rec, rpath, "word");
      p.influence = get<double>(rec, rpath, "influence");
      p.attribution = get<double>(rec, rpath, "attribution");
      const auto sign = get<std::string>(rec, rpath, "sign");
      if (sign != "positive" && sign != "negative") throw Error("schema error at " + rpath + "/sign: bad value");
      p.sign = sign == "positive" ? Sign::positive : Sign::negative;
      for (const auto& key : get<std::vector<std::string>>(rec, rpath, "nodes")) {
        try {
          p.nodes.push_back(NodeId::parse(key));
        } catch (const Error& e) {
          throw Error("schema error at " + rpath + "/nodes: " + e.what());
        }
      }
      c.patterns.push_back(std::move(p));
    }
    t.collections.push_back(std::move(c));
  }
  return t;
}

std::string fmt(const std::optional<double>& v, int digits = 3) {
  if (!v) return "-";
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << *v;
  return s.str();
}

struct ReportArgs {
  fs::path checkpoint, corpus, out = "report.json", markdown, scatter;
  std::vector<fs::path> patterns;
  int random_seeds = 50;
  int bootstrap = 1000;
  std::uint64_t seed = 0;
};

int cmd_report(const ReportArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.corpus, "corpus");
  for (const auto& p : a.patterns) require_file(p, "patterns file");
  if (a.random_seeds < 0 || a.bootstrap < 1) throw UsageError("--random-seeds must be >= 0 and --bootstrap >= 1");

  const ToyTransformer model = ToyTransformer::load(a.checkpoint);
  const auto corpus = read_corpus(a.corpus);

  json report;
  report["schema_version"] = kSchemaVersion;
  report["rows"] = json::array();
  std::ostringstream md, csv;
  md << "| method | granularity | ablated acc. | conc.+ | conc.- | path share | alignment | entropy |\n"
     << "|---|---|---|---|---|---|---|---|\n";
  csv << "method,granularity,position,entropy,mean_abs_attribution,count\n";

  std::optional<std::size_t> n_instances;
  for (const fs::path& path : a.patterns) {
    const TracedMethod t = read_patterns(path, corpus);
    if (n_instances && *n_instances != t.collections.size()) {
      throw Error("patterns files cover different numbers of instances");
    }
    n_instances = t.collections.size();
    if (t.collections.empty()) throw Error("patterns file " + path.string() + " has no instances");
    const std::span<const Instance> instances(corpus.data(), t.collections.size());
    const ReportRow row = evaluate_method(model, instances, t.collections, t.method);

    json j = to_json(row.metrics);
    if (row.skip_share) j["skip_share"] = *row.skip_share;
    if (row.alignment.total > 0) {
      const Interval ci = bootstrap_mean_interval(row.alignment.indicators, a.bootstrap, 0.95, a.seed);
      j["alignment"] = {{"aligned", row.alignment.aligned}, {"total", row.alignment.total}, {"ci95", {ci.low, ci.high}}};
    }
    std::vector<double> entropy, attribution;
    for (const PositionProfile& p : row.profiles) {
      entropy.push_back(p.entropy);
      attribution.push_back(p.mean_abs_attribution);
      csv << t.method << ',' << to_string(t.granularity) << ',' << p.position << ',' << std::setprecision(17)
          << p.entropy << ',' << p.mean_abs_attribution << ',' << p.count << '\n';
    }
    try {
      j["spearman_entropy_attribution"] = spearman(entropy, attribution);
    } catch (const Error&) {
      j["spearman_entropy_attribution"] = nullptr;
    }
    if (t.method == "gpr" && a.random_seeds > 0) {
      const RandomAblation r = random_ablation(model, instances, t.collections, a.random_seeds, a.seed);
      j["random_reference"] = {{"seeds", a.random_seeds}, {"mean", r.mean}, {"stddev", r.stddev}};
    }
    report["rows"].push_back(j);
    const MetricsReport& m = row.metrics;
    md << "| " << m.method << " | " << to_string(m.granularity) << " | " << fmt(m.ablated_accuracy) << " | "
       << fmt(m.concentration_pos) << " | " << fmt(m.concentration_neg) << " | "
       << fmt(static_cast<double>(m.path_share), 6) << " | " << fmt(m.alignment_rate) << " | "
       << fmt(m.pattern_entropy) << " |\n";

    if (t.method == "gpr" && t.granularity == Granularity::attention) {
      const double repl = replace_skip_accuracy(model, instances, t.collections);
      report["rows"].push_back({{"schema_version", kSchemaVersion},
                                {"method", "repl_skip"},
                                {"granularity", "attention"},
                                {"n_instances", m.n_instances},
                                {"original_accuracy", m.original_accuracy},
                                {"ablated_accuracy", repl}});
      md << "| repl_skip | attention | " << fmt(repl) << " | - | - | - | - | - |\n";
    }
  }

  const std::size_t n = n_instances.value_or(corpus.size());
  if (n == 0) throw Error("corpus " + a.corpus.string() + " has no instances");
  const std::span<const Instance> instances(corpus.data(), n);
  const double original = evaluate(model, instances).accuracy;
  const double full = ablated_accuracy(model, instances, [&](std::size_t i) {
    const auto& inst = instances[i];
    const GraphView view = build_view(model.config(), static_cast<int>(inst.tokens.size()), inst.mask_position,
                                      Granularity::attention);
    RetainedSet set(Granularity::attention, model.config().layers, model.config().heads,
                    static_cast<int>(inst.tokens.size()));
    set.add(view.nodes());
    return set;
  });
  report["n_instances"] = n;
  report["original_accuracy"] = original;
  report["control"] = {{"method", "full"}, {"ablated_accuracy", full}, {"original_accuracy", original}};
  md << "| full | - | " << fmt(full) << " | - | - | - | - | - |\n";
  md << "\noriginal accuracy: " << fmt(original) << " over " << n << " instances\n";

  write_text(a.out, dump(report));
  if (!a.scatter.empty()) write_text(a.scatter, csv.str());
  if (!a.markdown.empty()) {
    write_text(a.markdown, md.str());
  } else {
    std::cout << md.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Influence patterns for a toy transformer"};
  app.require_subcommand(1);
  app.fallthrough();
  int jobs = 0;
  app.add_option("--jobs", jobs, "Worker threads (0: all cores)")->check(CLI::NonNegativeNumber);

  fs::path config_path, train_out = ".";
  auto* train_cmd = app.add_subcommand("train", "Train the toy model on the synthetic agreement task");
  train_cmd->add_option("--config", config_path, "Run configuration (JSON)")->required();
  train_cmd->add_option("--out", train_out, "Output directory")->capture_default_str();

  TraceArgs ta;
  auto* trace_cmd = app.add_subcommand("trace", "Extract one pattern per word of every instance");
  trace_cmd->add_option("--checkpoint", ta.checkpoint, "Model checkpoint")->required();
  trace_cmd->add_option("--corpus", ta.corpus, "Corpus TSV")->required();
  trace_cmd->add_option("--granularity", ta.granularity, "embedding or attention")
      ->check(CLI::IsMember({"embedding", "attention"}))
      ->capture_default_str();
  trace_cmd->add_option("--method", ta.method, "gpr, rand, attn, cond or inf")
      ->check(CLI::IsMember({"gpr", "rand", "attn", "cond", "inf"}))
      ->capture_default_str();
  trace_cmd->add_option("--samples", ta.samples, "Points on the interpolation path")->capture_default_str();
  trace_cmd->add_option("--seed", ta.seed, "Seed for the random baseline")->capture_default_str();
  trace_cmd->add_option("--precision", ta.precision, "float64 or float32 (default: $IPAT_PRECISION or float64)")
      ->check(CLI::IsMember({"float64", "float32"}));
  trace_cmd->add_option("--limit", ta.limit, "Trace only the first N instances (0: all)")->capture_default_str();
  trace_cmd->add_flag("!--no-rollout", ta.rollout, "Plain averaged attention for the attn baseline");
  trace_cmd->add_option("--out", ta.out, "Patterns JSON")->capture_default_str();
  trace_cmd->add_option("--dot", ta.dot, "Also write a Graphviz rendering of one instance");
  trace_cmd->add_option("--dot-instance", ta.dot_instance, "Instance rendered by --dot")->capture_default_str();

  ReportArgs ra;
  auto* report_cmd = app.add_subcommand("report", "Ablation, concentration, path share, alignment and entropy");
  report_cmd->add_option("--checkpoint", ra.checkpoint, "Model checkpoint")->required();
  report_cmd->add_option("--corpus", ra.corpus, "Corpus TSV the patterns were traced on")->required();
  report_cmd->add_option("--patterns", ra.patterns, "Patterns JSON (repeatable)")->required();
  report_cmd->add_option("--out", ra.out, "Report JSON")->capture_default_str();
  report_cmd->add_option("--markdown", ra.markdown, "Markdown table (default: stdout)");
  report_cmd->add_option("--scatter", ra.scatter, "Per-position entropy and attribution CSV");
  report_cmd->add_option("--random-seeds", ra.random_seeds, "Random-pattern repeats for the gpr rows (0: off)")
      ->capture_default_str();
  report_cmd->add_option("--bootstrap", ra.bootstrap, "Bootstrap resamples for the alignment interval")
      ->capture_default_str();
  report_cmd->add_option("--seed", ra.seed, "Seed for bootstrap and random repeats")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    std::optional<tbb::global_control> limit;
    if (jobs > 0) limit.emplace(tbb::global_control::max_allowed_parallelism, static_cast<std::size_t>(jobs));
    if (*train_cmd) return cmd_train(config_path, train_out);
    if (*trace_cmd) return cmd_trace(ta);
    return cmd_report(ra);
  } catch (const UsageError& e) {
    std::cerr << "ipat: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "ipat: " << e.what() << "\n";
    return 1;
  }
}
