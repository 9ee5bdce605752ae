#include "ipat/corpus.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <utility>

#include <tbb/parallel_for.h>

namespace ipat {

namespace {

constexpr std::array<CaseTag, 4> kCases = {CaseTag::SS, CaseTag::SP, CaseTag::PS, CaseTag::PP};

std::size_t index_of(Number n) { return n == Number::singular ? 0 : 1; }

// log(1 + e^x) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::string to_string(CaseTag tag) {
  switch (tag) {
    case CaseTag::SS: return "SS";
    case CaseTag::SP: return "SP";
    case CaseTag::PS: return "PS";
    case CaseTag::PP: return "PP";
  }
  return "?";
}

CaseTag parse_case_tag(std::string_view s) {
  for (CaseTag t : kCases) {
    if (to_string(t) == s) return t;
  }
  throw Error("unknown case tag '" + std::string(s) + "'");
}

Vocab::Vocab() {
  for (const char* w : {"[PAD]", "[CLS]", "[SEP]", "[MASK]"}) add(w);
}

int Vocab::add(const std::string& word) {
  if (const auto it = ids_.find(word); it != ids_.end()) return it->second;
  const int id = size();
  words_.push_back(word);
  ids_.emplace(word, id);
  return id;
}

int Vocab::id(std::string_view word) const {
  const auto it = ids_.find(word);
  if (it == ids_.end()) throw Error("unknown word '" + std::string(word) + "'");
  return it->second;
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size()) throw Error("token id " + std::to_string(id) + " outside the vocabulary");
  return words_[static_cast<std::size_t>(id)];
}

bool Vocab::contains(std::string_view word) const { return ids_.find(word) != ids_.end(); }

int Template::mask_position() const {
  int found = -1;
  for (int j = 0; j < length(); ++j) {
    if (slots[static_cast<std::size_t>(j)] != "[MASK]") continue;
    if (found >= 0) throw Error("template has more than one [MASK]");
    found = j;
  }
  if (found < 0) throw Error("template has no [MASK]");
  return found;
}

Vocab Template::vocab() const {
  Vocab v;
  for (const std::string& s : slots) {
    if (s != "SUBJ" && s != "ATTR" && s != "VERB" && s != "ADJ") v.add(s);
  }
  for (const auto& pair : nouns) {
    v.add(pair[0]);
    v.add(pair[1]);
  }
  for (const std::string& w : verbs) v.add(w);
  for (const std::string& w : adjectives) v.add(w);
  v.add(targets[0]);
  v.add(targets[1]);
  return v;
}

Template sva_object_template() {
  Template t;
  t.slots = {"[CLS]", "the", "SUBJ", "that", "the", "ATTR", "VERB", "[MASK]", "ADJ", ".", "[SEP]"};
  t.nouns = {{{"farmer", "farmers"}},   {{"author", "authors"}}, {{"pilot", "pilots"}},
             {{"surgeon", "surgeons"}}, {{"dancer", "dancers"}}, {{"senator", "senators"}}};
  t.verbs = {"liked", "saw", "met", "thanked"};
  t.adjectives = {"tall", "old", "young", "happy"};
  t.targets = {"is", "are"};
  return t;
}

std::vector<int> tokenize(const Vocab& vocab, std::string_view sentence) {
  std::vector<int> out;
  std::istringstream in{std::string(sentence)};
  std::string w;
  while (in >> w) out.push_back(vocab.id(w));
  return out;
}

std::string detokenize(const Vocab& vocab, std::span<const int> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += ' ';
    out += vocab.word(tokens[i]);
  }
  return out;
}

std::vector<Instance> sample_instances(const Template& tmpl, const Vocab& vocab, int n, std::uint64_t seed) {
  if (n < 4) throw Error("sample_instances needs n >= 4");
  if (tmpl.nouns.size() < 2 || tmpl.verbs.empty() || tmpl.adjectives.empty()) {
    throw Error("template vocabulary too small for distinct subject and attractor");
  }
  const int mask = tmpl.mask_position();
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t size) { return std::uniform_int_distribution<std::size_t>(0, size - 1)(rng); };

  std::vector<Instance> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const CaseTag tag = kCases[static_cast<std::size_t>(i % 4)];
    const std::size_t subj = pick(tmpl.nouns.size());
    std::size_t attr = pick(tmpl.nouns.size() - 1);
    if (attr >= subj) ++attr;
    const std::string& verb = tmpl.verbs[pick(tmpl.verbs.size())];
    const std::string& adj = tmpl.adjectives[pick(tmpl.adjectives.size())];

    Instance inst;
    inst.tag = tag;
    inst.mask_position = mask;
    for (const std::string& s : tmpl.slots) {
      if (s == "SUBJ") {
        inst.tokens.push_back(vocab.id(tmpl.nouns[subj][index_of(subject_number(tag))]));
      } else if (s == "ATTR") {
        inst.tokens.push_back(vocab.id(tmpl.nouns[attr][index_of(attractor_number(tag))]));
      } else if (s == "VERB") {
        inst.tokens.push_back(vocab.id(verb));
      } else if (s == "ADJ") {
        inst.tokens.push_back(vocab.id(adj));
      } else {
        inst.tokens.push_back(vocab.id(s));
      }
    }
    const std::size_t number = index_of(subject_number(tag));
    inst.correct = vocab.id(tmpl.targets[number]);
    inst.wrong = vocab.id(tmpl.targets[1 - number]);
    out.push_back(std::move(inst));
  }
  return out;
}

void write_corpus(const std::filesystem::path& path, std::span<const Instance> instances) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write corpus file " + path.string());
  out << "tokens\tmask\tcorrect\twrong\tcase\n";
  for (const Instance& inst : instances) {
    for (std::size_t i = 0; i < inst.tokens.size(); ++i) out << (i ? " " : "") << inst.tokens[i];
    out << '\t' << inst.mask_position << '\t' << inst.correct << '\t' << inst.wrong << '\t' << to_string(inst.tag)
        << '\n';
  }
  if (!out) throw Error("failed writing corpus file " + path.string());
}

std::vector<Instance> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "tokens\tmask\tcorrect\twrong\tcase") {
    throw Error("corpus file " + path.string() + " lacks the expected header");
  }
  std::vector<Instance> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    for (std::string f; std::getline(ls, f, '\t');) fields.push_back(f);
    auto fail = [&](const std::string& why) {
      return Error(path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    if (fields.size() != 5) throw fail("expected 5 tab-separated fields");
    Instance inst;
    try {
      std::istringstream ts(fields[0]);
      for (int t; ts >> t;) inst.tokens.push_back(t);
      inst.mask_position = std::stoi(fields[1]);
      inst.correct = std::stoi(fields[2]);
      inst.wrong = std::stoi(fields[3]);
      inst.tag = parse_case_tag(fields[4]);
    } catch (const std::invalid_argument&) {
      throw fail("malformed number");
    } catch (const Error& e) {
      throw fail(e.what());
    }
    if (inst.mask_position < 0 || inst.mask_position >= static_cast<int>(inst.tokens.size())) {
      throw fail("mask position outside the sentence");
    }
    if (inst.correct == inst.wrong) throw fail("correct and wrong tokens coincide");
    out.push_back(std::move(inst));
  }
  return out;
}

ModelConfig default_model_config(const Template& tmpl, std::uint64_t seed) {
  ModelConfig c;
  c.layers = 3;
  c.heads = 4;
  c.hidden = 32;
  c.ffn_width = 64;
  c.max_len = tmpl.length();
  c.vocab = tmpl.vocab().size();
  c.seed = seed;
  return c;
}

double instance_score(double qoi) { return qoi > 0.0 ? 1.0 : (qoi == 0.0 ? 0.5 : 0.0); }

Evaluation evaluate(const ToyTransformer& model, std::span<const Instance> instances) {
  std::vector<double> scores(instances.size());
  tbb::parallel_for(std::size_t{0}, instances.size(), [&](std::size_t i) {
    ForwardOptions opt;
    opt.qoi = instances[i].qoi();
    scores[i] = instance_score(*model.forward(instances[i].tokens, opt).qoi);
  });
  Evaluation ev;
  std::map<CaseTag, double> sums;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    ev.accuracy += scores[i];
    sums[instances[i].tag] += scores[i];
    ++ev.counts[instances[i].tag];
  }
  if (!instances.empty()) ev.accuracy /= static_cast<double>(instances.size());
  for (const auto& [tag, count] : ev.counts) ev.per_case[tag] = sums[tag] / count;
  return ev;
}

TrainResult train(ToyTransformer& model, std::span<const Instance> train_set, std::span<const Instance> heldout,
                  const TrainConfig& config) {
  if (config.epochs < 0 || config.batch_size < 1 || !(config.learning_rate > 0.0)) {
    throw Error("invalid training configuration");
  }
  const auto params = model.parameters();
  std::vector<Tensor> velocity, grads;
  for (const Tensor* p : params) {
    velocity.push_back(Tensor::zeros_like(*p));
    grads.push_back(Tensor::zeros_like(*p));
  }
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(config.seed);

  TrainResult result;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      for (Tensor& g : grads) std::fill(g.data().begin(), g.data().end(), 0.0);
      double batch_loss = 0.0;
      auto diverged = [&](const std::string& why) {
        return Error("training diverged at epoch " + std::to_string(epoch) + ", batch starting at " +
                     std::to_string(start) + ": " + why);
      };
      for (std::size_t b = start; b < end; ++b) try {
        const Instance& inst = train_set[order[b]];
        ForwardOptions opt;
        opt.qoi = inst.qoi();
        const ForwardResult fwd = model.forward(inst.tokens, opt);
        if (config.full_vocab) {
          const Tensor logits = fwd.tape.value(NodeId::logits(inst.mask_position).key());
          double top = logits[0];
          for (double v : logits.data()) top = std::max(top, v);
          double z = 0.0;
          for (double v : logits.data()) z += std::exp(v - top);
          batch_loss += std::log(z) + top - logits[static_cast<std::size_t>(inst.correct)];
          Tensor seed = Tensor::zeros_like(logits);
          for (std::size_t t = 0; t < logits.size(); ++t) seed[t] = std::exp(logits[t] - top) / z;
          seed[static_cast<std::size_t>(inst.correct)] -= 1.0;
          fwd.tape.backward(fwd.tape.marker(NodeId::logits(inst.mask_position).key()), seed, grads);
        } else {
          const double q = *fwd.qoi;
          batch_loss += softplus(-q);
          fwd.tape.backward(fwd.tape.marker(NodeId::qoi().key()), Tensor::vector({-sigmoid(-q)}), grads);
        }
      } catch (const Error& e) {
        throw diverged(e.what());
      }
      if (!std::isfinite(batch_loss)) throw diverged("loss is not finite");
      epoch_loss += batch_loss;

      const double scale = 1.0 / static_cast<double>(end - start);
      double norm2 = 0.0;
      for (const Tensor& g : grads) {
        for (double v : g.data()) norm2 += v * v * scale * scale;
      }
      const double norm = std::sqrt(norm2);
      const double clip = config.clip_norm > 0.0 && norm > config.clip_norm ? config.clip_norm / norm : 1.0;
      for (std::size_t p = 0; p < params.size(); ++p) {
        const auto v = velocity[p].data();
        const auto w = params[p]->data();
        const auto g = std::as_const(grads[p]).data();
        for (std::size_t c = 0; c < w.size(); ++c) {
          v[c] = config.momentum * v[c] + g[c] * scale * clip;
          w[c] -= config.learning_rate * v[c];
        }
      }
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = train_set.empty() ? 0.0 : epoch_loss / static_cast<double>(train_set.size());
    stats.heldout_accuracy = heldout.empty() ? 0.0 : evaluate(model, heldout).accuracy;
    result.curve.push_back(stats);
  }
  result.final_accuracy = heldout.empty() ? 0.0 : evaluate(model, heldout).accuracy;
  return result;
}

}  // namespace ipat
