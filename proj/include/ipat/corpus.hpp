#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ipat/transformer.hpp"

namespace ipat {

enum class Number { singular, plural };

/// Subject/attractor number combination: SS, SP, PS, PP.
enum class CaseTag { SS, SP, PS, PP };
std::string to_string(CaseTag tag);
CaseTag parse_case_tag(std::string_view s);
inline Number subject_number(CaseTag t) { return t == CaseTag::SS || t == CaseTag::SP ? Number::singular : Number::plural; }
inline Number attractor_number(CaseTag t) { return t == CaseTag::SS || t == CaseTag::PS ? Number::singular : Number::plural; }

/// Word <-> id table. Id 0 is [PAD]; 1..3 are [CLS], [SEP], [MASK].
class Vocab {
 public:
  Vocab();
  int add(const std::string& word);
  int id(std::string_view word) const;
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }
  bool contains(std::string_view word) const;

  static constexpr int kPad = kPadToken, kCls = 1, kSep = 2, kMask = 3;
  std::vector<int> specials() const { return {kPad, kCls, kSep, kMask}; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int, std::less<>> ids_;
};

/// A sentence template with slots. Slot names are SUBJ, ATTR, VERB, ADJ and
/// [MASK]; every other element is a literal word.
struct Template {
  std::vector<std::string> slots;
  /// nouns[n] lists (singular, plural) pairs; subject and attractor are drawn
  /// from different pairs.
  std::vector<std::array<std::string, 2>> nouns;
  std::vector<std::string> verbs;
  std::vector<std::string> adjectives;
  /// Mask fillers for a singular and a plural subject.
  std::array<std::string, 2> targets;

  int length() const { return static_cast<int>(slots.size()); }
  int mask_position() const;
  /// Vocabulary holding the specials followed by every template word.
  Vocab vocab() const;
};

/// [CLS] the SUBJ that the ATTR VERB [MASK] ADJ . [SEP]
Template sva_object_template();

struct Instance {
  std::vector<int> tokens;
  int mask_position = 0;
  int correct = 0;
  int wrong = 0;
  CaseTag tag = CaseTag::SS;

  Qoi qoi() const { return Qoi::contrast(mask_position, correct, wrong); }
  bool operator==(const Instance&) const = default;
};

std::vector<int> tokenize(const Vocab& vocab, std::string_view sentence);
std::string detokenize(const Vocab& vocab, std::span<const int> tokens);

/// n instances with case tags cycling SS, SP, PS, PP (balanced within 1);
/// slot fillers drawn from a generator seeded with `seed`.
std::vector<Instance> sample_instances(const Template& tmpl, const Vocab& vocab, int n, std::uint64_t seed);

/// Tab-separated corpus file; layout documented in docs/formats.md.
void write_corpus(const std::filesystem::path& path, std::span<const Instance> instances);
std::vector<Instance> read_corpus(const std::filesystem::path& path);

/// Model configuration sized for a template.
ModelConfig default_model_config(const Template& tmpl, std::uint64_t seed);

struct TrainConfig {
  int epochs = 6;
  double learning_rate = 0.05;
  double momentum = 0.9;
  int batch_size = 16;
  std::uint64_t seed = 0;
  /// Cross-entropy over the whole vocabulary instead of the binary
  /// correct/wrong contrast.
  bool full_vocab = false;
  /// Global gradient-norm clip per step; 0 disables clipping.
  double clip_norm = 5.0;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double heldout_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> curve;
  double final_accuracy = 0.0;
};

/// Minibatch gradient descent with momentum, single-threaded and fully
/// determined by `config.seed`. Throws Error when the loss becomes
/// non-finite.
TrainResult train(ToyTransformer& model, std::span<const Instance> train_set, std::span<const Instance> heldout,
                  const TrainConfig& config);

/// 1 when q > 0, 0.5 when q == 0, 0 otherwise.
double instance_score(double qoi);

struct Evaluation {
  double accuracy = 0.0;
  std::map<CaseTag, double> per_case;
  std::map<CaseTag, int> counts;
};
Evaluation evaluate(const ToyTransformer& model, std::span<const Instance> instances);

}  // namespace ipat
