#include "mgpt/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mgpt/rng.hpp"

namespace mgpt {

int Vocab::add_item(const std::string& token) {
  auto it = item_index.find(token);
  if (it != item_index.end()) {
    return it->second;
  }
  const int idx = static_cast<int>(items.size());
  items.push_back(token);
  item_counts.push_back(0);
  item_index.emplace(token, idx);
  return idx;
}

int Vocab::add_behavior(const std::string& token) {
  auto it = behavior_index.find(token);
  if (it != behavior_index.end()) {
    return it->second;
  }
  const int idx = static_cast<int>(behaviors.size());
  behaviors.push_back(token);
  behavior_index.emplace(token, idx);
  return idx;
}

int Vocab::item(const std::string& token) const {
  auto it = item_index.find(token);
  return it == item_index.end() ? -1 : it->second;
}

int Vocab::behavior(const std::string& token) const {
  auto it = behavior_index.find(token);
  return it == behavior_index.end() ? -1 : it->second;
}

Vocab Vocab::empty() {
  Vocab v;
  v.items = {"[PAD]", "[MASK]"};
  v.behaviors = {"[PAD]", "[MASK]"};
  v.item_counts = {0, 0};
  return v;
}

void Vocab::save(const std::string& item_path, const std::string& behavior_path) const {
  std::ofstream fi(item_path);
  if (!fi) throw std::runtime_error("cannot write " + item_path);
  for (size_t i = 0; i < items.size(); ++i) fi << items[i] << '\t' << i << '\n';
  std::ofstream fb(behavior_path);
  if (!fb) throw std::runtime_error("cannot write " + behavior_path);
  for (size_t i = 0; i < behaviors.size(); ++i) fb << behaviors[i] << '\t' << i << '\n';
}

namespace {

int64_t parse_timestamp(const std::string& field, size_t line_no) {
  int64_t ts = 0;
  const char* begin = field.data();
  const char* end = begin + field.size();
  auto [p, ec] = std::from_chars(begin, end, ts);
  if (ec != std::errc() || p != end) {
    throw std::runtime_error("line " + std::to_string(line_no) +
                             ": unparseable timestamp '" + field + "'");
  }
  if (ts < 0) {
    throw std::runtime_error("line " + std::to_string(line_no) +
                             ": negative timestamp");
  }
  return ts;
}

}  // namespace

Dataset build_dataset(std::vector<Interaction> rows, const IngestOptions& opts,
                      const std::string& target_behavior) {
  Dataset out;
  out.vocab = Vocab::empty();
  if (opts.declared_behaviors) {
    for (const auto& b : *opts.declared_behaviors) out.vocab.add_behavior(b);
  }

  struct Event {
    int item, behavior;
    int64_t ts;
    size_t file_order;
  };
  // User order follows first occurrence in the file for determinism.
  std::map<std::string, std::vector<Event>> per_user;
  std::vector<std::string> user_order;
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const int item = out.vocab.add_item(r.item_id);
    int behavior = out.vocab.behavior(r.behavior);
    if (behavior < 0) {
      if (opts.declared_behaviors) {
        throw std::runtime_error("line " + std::to_string(i + 1) +
                                 ": behavior '" + r.behavior +
                                 "' not in the declared behavior set");
      }
      behavior = out.vocab.add_behavior(r.behavior);
    }
    out.vocab.item_counts[static_cast<size_t>(item)]++;
    auto [it, inserted] = per_user.try_emplace(r.user_id);
    if (inserted) user_order.push_back(r.user_id);
    it->second.push_back({item, behavior, r.timestamp, i});
  }
  out.interactions = rows.size();

  const int target = out.vocab.behavior(target_behavior);
  if (target < 0) {
    throw std::runtime_error("target behavior '" + target_behavior +
                             "' never occurs in the input");
  }

  for (const auto& uid : user_order) {
    auto& evs = per_user[uid];
    std::sort(evs.begin(), evs.end(), [](const Event& a, const Event& b) {
      if (a.ts != b.ts) return a.ts < b.ts;
      return a.file_order < b.file_order;  // ties keep file order
    });
    if (evs.size() > opts.max_len) {
      evs.erase(evs.begin(), evs.end() - static_cast<ptrdiff_t>(opts.max_len));
    }
    const bool has_target = std::any_of(
        evs.begin(), evs.end(), [&](const Event& e) { return e.behavior == target; });
    if (!has_target) {
      out.dropped_users_without_target++;
      continue;
    }
    UserSequence seq;
    seq.user_id = uid;
    for (const auto& e : evs) seq.events.emplace_back(e.item, e.behavior);
    out.sequences.push_back(std::move(seq));
  }
  return out;
}

Dataset ingest(const std::string& path, const IngestOptions& opts,
               const std::string& target_behavior) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<Interaction> rows;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && opts.skip_header) continue;
    if (line.empty()) continue;
    std::array<std::string, 4> fields;
    size_t start = 0, field = 0;
    for (size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == '\t') {
        if (field >= 4) {
          throw std::runtime_error("line " + std::to_string(line_no) +
                                   ": expected 4 tab-separated columns");
        }
        fields[field++] = line.substr(start, i - start);
        start = i + 1;
      }
    }
    if (field != 4) {
      throw std::runtime_error("line " + std::to_string(line_no) +
                               ": expected 4 tab-separated columns, got " +
                               std::to_string(field));
    }
    rows.push_back({fields[0], fields[1], fields[2], parse_timestamp(fields[3], line_no)});
  }
  if (rows.empty()) throw std::runtime_error(path + ": no data rows");
  return build_dataset(std::move(rows), opts, target_behavior);
}

MaskedBatch build_masked_batch(const std::vector<UserSequence>& seqs,
                               const Vocab& vocab, size_t seq_len, double rho,
                               int target_behavior, uint64_t seed) {
  if (rho <= 0.0 || rho > 1.0) {
    throw std::invalid_argument("mask ratio must be in (0, 1]");
  }
  (void)vocab;
  MaskedBatch batch;
  batch.seq_len = seq_len;
  for (size_t s = 0; s < seqs.size(); ++s) {
    const auto& seq = seqs[s];
    const size_t keep = std::min(seq.events.size(), seq_len);
    const size_t pad = seq_len - keep;
    std::vector<int> items(seq_len, kPadIndex), behaviors(seq_len, kPadIndex);
    std::vector<char> is_pad(seq_len, 1);
    const size_t offset = seq.events.size() - keep;
    std::vector<size_t> target_positions;
    for (size_t i = 0; i < keep; ++i) {
      const auto& [item, behavior] = seq.events[offset + i];
      items[pad + i] = item;
      behaviors[pad + i] = behavior;
      is_pad[pad + i] = 0;
      if (behavior == target_behavior) target_positions.push_back(pad + i);
    }
    if (target_positions.empty()) {
      batch.skipped_without_target++;
      continue;
    }
    Rng rng = Rng::derive(seed, s);
    std::vector<size_t> masked;
    for (size_t pos : target_positions) {
      if (rng.bernoulli(rho)) masked.push_back(pos);
    }
    if (masked.empty()) masked.push_back(target_positions.back());
    std::vector<int> labels;
    for (size_t pos : masked) {
      labels.push_back(items[pos]);
      items[pos] = kMaskIndex;
      behaviors[pos] = kMaskIndex;
    }
    batch.items.push_back(std::move(items));
    batch.behaviors.push_back(std::move(behaviors));
    batch.is_pad.push_back(std::move(is_pad));
    batch.mask_positions.push_back(std::move(masked));
    batch.labels.push_back(std::move(labels));
    batch.sequence_index.push_back(s);
  }
  return batch;
}

EvalInstance build_eval_instance(const UserSequence& seq, const Vocab& vocab,
                                 size_t seq_len, int target_behavior,
                                 size_t num_negatives, NegativeSampling sampling,
                                 uint64_t seed) {
  if (num_negatives >= vocab.n_items()) {
    throw std::invalid_argument("num_negatives (" + std::to_string(num_negatives) +
                                ") must be below the item count (" +
                                std::to_string(vocab.n_items()) + ")");
  }
  EvalInstance inst;
  const size_t keep = std::min(seq.events.size(), seq_len);
  const size_t pad = seq_len - keep;
  const size_t offset = seq.events.size() - keep;
  inst.items.assign(seq_len, kPadIndex);
  inst.behaviors.assign(seq_len, kPadIndex);
  inst.is_pad.assign(seq_len, 1);
  ptrdiff_t last_target = -1;
  for (size_t i = 0; i < keep; ++i) {
    const auto& [item, behavior] = seq.events[offset + i];
    inst.items[pad + i] = item;
    inst.behaviors[pad + i] = behavior;
    inst.is_pad[pad + i] = 0;
    if (behavior == target_behavior) last_target = static_cast<ptrdiff_t>(pad + i);
  }
  if (last_target < 0) {
    throw std::invalid_argument("sequence for user '" + seq.user_id +
                                "' has no target-behavior event within the window");
  }
  inst.mask_position = static_cast<size_t>(last_target);
  inst.label = inst.items[inst.mask_position];
  inst.items[inst.mask_position] = kMaskIndex;
  inst.behaviors[inst.mask_position] = kMaskIndex;

  inst.candidates.push_back(inst.label);
  Rng rng(seed);
  const int n_items = static_cast<int>(vocab.n_items());
  if (sampling == NegativeSampling::Uniform) {
    std::set<int> chosen;
    while (chosen.size() < num_negatives) {
      const int cand = kFirstRealIndex + static_cast<int>(rng.uniform_int(n_items));
      if (cand == inst.label) continue;
      chosen.insert(cand);
    }
    inst.candidates.insert(inst.candidates.end(), chosen.begin(), chosen.end());
  } else {
    int64_t total = 0;
    for (size_t i = kFirstRealIndex; i < vocab.item_counts.size(); ++i)
      total += vocab.item_counts[i];
    if (total <= 0) throw std::invalid_argument("popularity sampling needs item counts");
    while (inst.candidates.size() < num_negatives + 1) {
      int64_t ticket = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(total)));
      int cand = kFirstRealIndex;
      for (size_t i = kFirstRealIndex; i < vocab.item_counts.size(); ++i) {
        ticket -= vocab.item_counts[i];
        if (ticket < 0) {
          cand = static_cast<int>(i);
          break;
        }
      }
      if (cand == inst.label) continue;
      inst.candidates.push_back(cand);
    }
  }
  return inst;
}

std::vector<std::pair<size_t, size_t>> split_sessions(size_t n, size_t t) {
  if (t == 0 || n % t != 0) {
    throw std::invalid_argument("session length " + std::to_string(t) +
                                " does not divide sequence length " + std::to_string(n));
  }
  std::vector<std::pair<size_t, size_t>> ranges;
  for (size_t i = 0; i < n / t; ++i) ranges.emplace_back(i * t, (i + 1) * t);
  return ranges;
}

namespace {

void validate_spec(const SyntheticSpec& spec) {
  if (spec.n_users == 0 || spec.n_items == 0) {
    throw std::invalid_argument("synthetic spec: users and items must be positive");
  }
  auto declared = [&](const std::string& b) {
    return std::find(spec.behaviors.begin(), spec.behaviors.end(), b) !=
           spec.behaviors.end();
  };
  if (!declared(spec.target_behavior)) {
    throw std::invalid_argument("synthetic spec: target behavior '" +
                                spec.target_behavior + "' not declared");
  }
  if (!declared(spec.trigger_behavior)) {
    throw std::invalid_argument("synthetic spec: trigger behavior '" +
                                spec.trigger_behavior + "' not declared");
  }
  if (spec.min_events < 2 || spec.max_events < spec.min_events) {
    throw std::invalid_argument("synthetic spec: bad event count range");
  }
  if (spec.n_blocks == 0 || spec.n_blocks > spec.n_items) {
    throw std::invalid_argument("synthetic spec: block count out of range");
  }
}

}  // namespace

std::vector<Interaction> synthetic_rows(const SyntheticSpec& spec, uint64_t seed) {
  validate_spec(spec);
  std::vector<Interaction> rows;
  std::vector<std::string> noise_behaviors;
  for (const auto& b : spec.behaviors) {
    if (b != spec.target_behavior && b != spec.trigger_behavior)
      noise_behaviors.push_back(b);
  }
  const size_t block_size = spec.n_items / spec.n_blocks;
  for (size_t u = 0; u < spec.n_users; ++u) {
    Rng rng = Rng::derive(seed, u);
    const std::string user = "u" + std::to_string(u);
    const size_t len =
        spec.min_events + rng.uniform_int(spec.max_events - spec.min_events + 1);
    const size_t block = rng.uniform_int(spec.n_blocks);
    const size_t item_lo = block * block_size;
    const size_t item_hi =
        (block == spec.n_blocks - 1) ? spec.n_items : item_lo + block_size;
    auto pick_item = [&] {
      return "i" + std::to_string(item_lo + rng.uniform_int(item_hi - item_lo));
    };
    int64_t ts = 0;
    bool emitted_trigger = false;
    std::vector<Interaction> user_rows;
    while (user_rows.size() < len) {
      // Force at least one trigger near the end so every user can have a
      // target event.
      const bool must_trigger = !emitted_trigger && user_rows.size() + 2 >= len;
      if (must_trigger || rng.bernoulli(spec.trigger_prob) || noise_behaviors.empty()) {
        const std::string item = pick_item();
        user_rows.push_back({user, item, spec.trigger_behavior, ts++});
        emitted_trigger = true;
        if (rng.bernoulli(spec.follow_prob)) {
          user_rows.push_back({user, item, spec.target_behavior, ts++});
        }
      } else {
        const auto& b = noise_behaviors[rng.uniform_int(noise_behaviors.size())];
        user_rows.push_back({user, pick_item(), b, ts++});
      }
    }
    rows.insert(rows.end(), user_rows.begin(), user_rows.end());
  }
  return rows;
}

Dataset generate_synthetic(const SyntheticSpec& spec, uint64_t seed) {
  IngestOptions opts;
  opts.declared_behaviors = spec.behaviors;
  opts.max_len = spec.max_events + 2;
  return build_dataset(synthetic_rows(spec, seed), opts, spec.target_behavior);
}

void write_tsv(const std::string& path, const std::vector<Interaction>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& r : rows) {
    out << r.user_id << '\t' << r.item_id << '\t' << r.behavior << '\t' << r.timestamp
        << '\n';
  }
}

void write_sequences(const std::string& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& seq : data.sequences) {
    out << seq.user_id << '\t';
    for (size_t i = 0; i < seq.events.size(); ++i) {
      if (i) out << ',';
      out << data.vocab.items[seq.events[i].first] << ':'
          << data.vocab.behaviors[seq.events[i].second];
    }
    out << '\n';
  }
}

}  // namespace mgpt
