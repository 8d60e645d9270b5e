#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mgpt {

// Reserved indices in both the item and behavior vocabularies.
constexpr int kPadIndex = 0;
constexpr int kMaskIndex = 1;
constexpr int kFirstRealIndex = 2;

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::string behavior;
  int64_t timestamp = 0;
};

// Dense token<->index bijections with PAD=0 and MASK=1 reserved in both
// spaces; real tokens start at index 2 in first-occurrence order.
struct Vocab {
  std::vector<std::string> items;      // index -> token, indices 0/1 are pad/mask
  std::vector<std::string> behaviors;  // likewise
  std::map<std::string, int> item_index;
  std::map<std::string, int> behavior_index;
  std::vector<int64_t> item_counts;  // interaction counts, aligned with items

  int add_item(const std::string& token);
  int add_behavior(const std::string& token);
  int item(const std::string& token) const;          // -1 if unknown
  int behavior(const std::string& token) const;      // -1 if unknown
  size_t n_items() const { return items.size() - kFirstRealIndex; }
  size_t n_behaviors() const { return behaviors.size() - kFirstRealIndex; }

  static Vocab empty();
  void save(const std::string& item_path, const std::string& behavior_path) const;
};

struct UserSequence {
  std::string user_id;
  std::vector<std::pair<int, int>> events;  // (item index, behavior index), time order
};

struct Dataset {
  Vocab vocab;
  std::vector<UserSequence> sequences;
  size_t interactions = 0;
  size_t dropped_users_without_target = 0;
};

struct IngestOptions {
  // When set, behavior tokens outside this list are an error (with the line
  // number); indices follow the declared order. Otherwise first occurrence.
  std::optional<std::vector<std::string>> declared_behaviors;
  bool skip_header = false;
  size_t max_len = 200;  // sequences keep their most recent max_len events
};

// Reads a UTF-8 TSV of user_id, item_id, behavior, timestamp. Events are
// sorted per user by timestamp, ties broken by file order. Users with no
// target-behavior event are dropped (counted in the result).
Dataset ingest(const std::string& path, const IngestOptions& opts,
               const std::string& target_behavior);

// Same pipeline on in-memory rows; ingest() delegates here.
Dataset build_dataset(std::vector<Interaction> rows, const IngestOptions& opts,
                      const std::string& target_behavior);

struct MaskedBatch {
  size_t seq_len = 0;
  std::vector<std::vector<int>> items;       // batch x N
  std::vector<std::vector<int>> behaviors;   // batch x N
  std::vector<std::vector<char>> is_pad;     // batch x N, PADs form a prefix
  std::vector<std::vector<size_t>> mask_positions;
  std::vector<std::vector<int>> labels;      // original item index per mask
  std::vector<size_t> sequence_index;        // row -> index into the input span
  size_t skipped_without_target = 0;
};

// Cloze masking: every target-behavior event is masked independently with
// probability rho; a sequence that would receive no mask gets its most recent
// target event masked. Non-target events are never masked.
MaskedBatch build_masked_batch(const std::vector<UserSequence>& seqs,
                               const Vocab& vocab, size_t seq_len, double rho,
                               int target_behavior, uint64_t seed);

enum class NegativeSampling { Uniform, Popularity };

struct EvalInstance {
  std::vector<int> items;
  std::vector<int> behaviors;
  std::vector<char> is_pad;
  size_t mask_position = 0;
  int label = 0;
  std::vector<int> candidates;  // ground truth first
};

// Leave-one-out: the last target-behavior event becomes MASK and is held out;
// candidates are the ground truth plus num_negatives sampled items. Uniform
// sampling is without replacement, popularity sampling is proportional to
// interaction counts (with replacement).
EvalInstance build_eval_instance(const UserSequence& seq, const Vocab& vocab,
                                 size_t seq_len, int target_behavior,
                                 size_t num_negatives, NegativeSampling sampling,
                                 uint64_t seed);

// Contiguous [start, end) session ranges of length t covering N.
std::vector<std::pair<size_t, size_t>> split_sessions(size_t n, size_t t);

struct SyntheticSpec {
  size_t n_users = 200;
  size_t n_items = 50;
  std::vector<std::string> behaviors = {"view", "cart", "buy"};
  std::string target_behavior = "buy";
  // Planted rule: each trigger-behavior event is immediately followed by a
  // target-behavior event on the same item with probability follow_prob.
  std::string trigger_behavior = "cart";
  double follow_prob = 1.0;
  double trigger_prob = 0.35;  // chance a step emits a trigger instead of noise
  size_t min_events = 10;
  size_t max_events = 16;
  // Items are split into this many disjoint blocks; every user draws items
  // from a single block. 1 disables the structure.
  size_t n_blocks = 1;
};

Dataset generate_synthetic(const SyntheticSpec& spec, uint64_t seed);

// Raw interaction rows for the spec (what `synth` writes as TSV).
std::vector<Interaction> synthetic_rows(const SyntheticSpec& spec, uint64_t seed);

void write_tsv(const std::string& path, const std::vector<Interaction>& rows);
void write_sequences(const std::string& path, const Dataset& data);

}  // namespace mgpt
