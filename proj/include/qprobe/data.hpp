#pragma once

// Datasets of scored or compared prompt-completion embeddings, plus their
// on-disk formats.
//
// Embedding file (.qpemb), all integers little-endian:
//   bytes 0..5    magic "QPEMB1"
//   bytes 6..9    uint32 dim
//   bytes 10..17  uint64 rows
//   then rows * dim IEEE-754 binary32 values, row-major
//
// Manifest (.jsonl): a header line
//   {"qprobe_manifest": 1, "dim": D, "embeddings": "<file>", "binary_rewards": bool}
// followed by one record per line, either
//   {"prompt_id": "...", "completion_id": "...", "row": R, "reward": r}
//   {"prompt_id": "...", "winner_row": W, "loser_row": L}
// The embeddings path is relative to the manifest's directory.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qprobe/error.hpp"
#include "qprobe/rng.hpp"

namespace qprobe {

using Embedding = std::span<const float>;

using WarningSink = std::function<void(const std::string&)>;

inline void warn_to_stderr(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

/// Dense row-major float32 matrix of embeddings.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}
  EmbeddingTable(std::size_t dim, std::vector<float> values) : dim_(dim), values_(std::move(values)) {
    if (dim_ == 0 || values_.size() % dim_ != 0) {
      throw SchemaError("embedding buffer size is not a multiple of dim");
    }
  }

  std::size_t dim() const { return dim_; }
  std::size_t rows() const { return dim_ == 0 ? 0 : values_.size() / dim_; }
  const std::vector<float>& values() const { return values_; }

  Embedding row(std::size_t r) const { return {values_.data() + r * dim_, dim_}; }

  std::size_t append(Embedding e) {
    if (e.size() != dim_) {
      throw ArgumentError("embedding has dim " + std::to_string(e.size()) + ", expected " +
                          std::to_string(dim_));
    }
    values_.insert(values_.end(), e.begin(), e.end());
    return rows() - 1;
  }

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;

 private:
  std::size_t dim_ = 0;
  std::vector<float> values_;
};

struct RewardRecord {
  std::string prompt_id;
  std::string completion_id;
  std::size_t row = 0;
  double reward = 0.0;

  friend bool operator==(const RewardRecord&, const RewardRecord&) = default;
};

struct PreferencePair {
  std::string prompt_id;
  std::size_t winner_row = 0;
  std::size_t loser_row = 0;

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

/// Records (or pairs) belonging to one prompt, in dataset order.
struct PromptEntry {
  std::string prompt_id;
  std::vector<std::size_t> records;

  friend bool operator==(const PromptEntry&, const PromptEntry&) = default;
};

/// In-memory dataset. Holds either reward records or preference pairs; the
/// prompt index covers whichever list is populated, in first-seen order.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::size_t dim, bool binary_rewards = false)
      : embeddings_(dim), binary_rewards_(binary_rewards) {
    if (dim == 0) {
      throw SchemaError("dataset dim must be positive");
    }
  }

  std::size_t dim() const { return embeddings_.dim(); }
  bool binary_rewards() const { return binary_rewards_; }
  const EmbeddingTable& embeddings() const { return embeddings_; }
  Embedding embedding(std::size_t row) const { return embeddings_.row(row); }

  const std::vector<RewardRecord>& reward_records() const { return rewards_; }
  const std::vector<PreferencePair>& preference_pairs() const { return pairs_; }
  const std::vector<PromptEntry>& prompts() const { return prompts_; }

  bool is_reward_dataset() const { return !rewards_.empty(); }
  bool is_preference_dataset() const { return !pairs_.empty(); }
  std::size_t size() const { return rewards_.size() + pairs_.size(); }

  /// Position of `prompt_id` in prompts(), or -1.
  std::ptrdiff_t find_prompt(const std::string& prompt_id) const {
    const auto it = prompt_lookup_.find(prompt_id);
    return it == prompt_lookup_.end() ? -1 : static_cast<std::ptrdiff_t>(it->second);
  }

  std::size_t add_reward_record(std::string prompt_id, std::string completion_id, Embedding e,
                                double reward) {
    check_finite(e, embeddings_.rows());
    const std::size_t row = embeddings_.append(e);
    return add_reward_record_for_row(std::move(prompt_id), std::move(completion_id), row, reward);
  }

  std::size_t add_preference_pair(std::string prompt_id, Embedding winner, Embedding loser) {
    check_finite(winner, embeddings_.rows());
    const std::size_t w = embeddings_.append(winner);
    check_finite(loser, embeddings_.rows());
    const std::size_t l = embeddings_.append(loser);
    return add_preference_pair_for_rows(std::move(prompt_id), w, l);
  }

  /// Assemble from parsed parts; validates every invariant.
  static Dataset from_parts(EmbeddingTable table, bool binary_rewards,
                            std::vector<RewardRecord> rewards, std::vector<PreferencePair> pairs) {
    Dataset d(table.dim(), binary_rewards);
    for (std::size_t r = 0; r < table.rows(); ++r) {
      check_finite(table.row(r), r);
    }
    d.embeddings_ = std::move(table);
    for (auto& rec : rewards) {
      d.add_reward_record_for_row(std::move(rec.prompt_id), std::move(rec.completion_id), rec.row,
                                  rec.reward);
    }
    for (auto& p : pairs) {
      d.add_preference_pair_for_rows(std::move(p.prompt_id), p.winner_row, p.loser_row);
    }
    return d;
  }

  /// Warnings for soft violations (non-binary rewards on a binary dataset).
  std::vector<std::string> soft_warnings() const {
    std::vector<std::string> out;
    if (binary_rewards_) {
      for (std::size_t i = 0; i < rewards_.size(); ++i) {
        const double r = rewards_[i].reward;
        if (r != 0.0 && r != 1.0) {
          out.push_back("record " + std::to_string(i) + " has reward " + std::to_string(r) +
                        " on a binary-reward dataset");
        }
      }
    }
    return out;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.embeddings_ == b.embeddings_ && a.binary_rewards_ == b.binary_rewards_ &&
           a.rewards_ == b.rewards_ && a.pairs_ == b.pairs_ && a.prompts_ == b.prompts_;
  }

 private:
  static void check_finite(Embedding e, std::size_t row) {
    for (std::size_t j = 0; j < e.size(); ++j) {
      if (!std::isfinite(e[j])) {
        throw DataError("non-finite embedding value in row " + std::to_string(row) + " column " +
                        std::to_string(j));
      }
    }
  }

  std::size_t index_prompt(const std::string& prompt_id, std::size_t record) {
    auto [it, inserted] = prompt_lookup_.try_emplace(prompt_id, prompts_.size());
    if (inserted) {
      prompts_.push_back({prompt_id, {}});
    }
    prompts_[it->second].records.push_back(record);
    return it->second;
  }

  void check_row(std::size_t row) const {
    if (row >= embeddings_.rows()) {
      throw SchemaError("row " + std::to_string(row) + " out of range (embedding file has " +
                        std::to_string(embeddings_.rows()) + " rows)");
    }
  }

  std::size_t add_reward_record_for_row(std::string prompt_id, std::string completion_id,
                                        std::size_t row, double reward) {
    if (!pairs_.empty()) {
      throw SchemaError("dataset mixes reward records and preference pairs");
    }
    check_row(row);
    if (!std::isfinite(reward)) {
      throw DataError("non-finite reward for prompt '" + prompt_id + "' completion '" +
                      completion_id + "'");
    }
    if (!completion_keys_.insert(prompt_id + '\x1f' + completion_id).second) {
      throw DataError("duplicate (prompt_id, completion_id) = ('" + prompt_id + "', '" +
                      completion_id + "')");
    }
    const std::size_t idx = rewards_.size();
    index_prompt(prompt_id, idx);
    rewards_.push_back({std::move(prompt_id), std::move(completion_id), row, reward});
    return idx;
  }

  std::size_t add_preference_pair_for_rows(std::string prompt_id, std::size_t w, std::size_t l) {
    if (!rewards_.empty()) {
      throw SchemaError("dataset mixes reward records and preference pairs");
    }
    check_row(w);
    check_row(l);
    const std::size_t idx = pairs_.size();
    index_prompt(prompt_id, idx);
    pairs_.push_back({std::move(prompt_id), w, l});
    return idx;
  }

  EmbeddingTable embeddings_;
  bool binary_rewards_ = false;
  std::vector<RewardRecord> rewards_;
  std::vector<PreferencePair> pairs_;
  std::vector<PromptEntry> prompts_;
  std::unordered_map<std::string, std::size_t> prompt_lookup_;
  std::set<std::string> completion_keys_;
};

// ---------------------------------------------------------------------------
// Embedding file
// ---------------------------------------------------------------------------

inline constexpr char kEmbeddingMagic[6] = {'Q', 'P', 'E', 'M', 'B', '1'};
inline constexpr std::size_t kEmbeddingHeaderBytes = 18;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
}

template <typename U>
U get_le(const std::string& in, std::size_t offset) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open " + path.string());
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw IoError("write failed for " + path.string());
  }
}

}  // namespace detail

inline std::string encode_embeddings(const EmbeddingTable& table) {
  std::string out(kEmbeddingMagic, sizeof(kEmbeddingMagic));
  out.reserve(kEmbeddingHeaderBytes + table.values().size() * 4);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(table.dim()));
  detail::put_le<std::uint64_t>(out, table.rows());
  for (float v : table.values()) {
    detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

/// Parses an embedding file image. Non-finite values raise DataError naming the row.
inline EmbeddingTable decode_embeddings(const std::string& bytes) {
  if (bytes.size() < kEmbeddingHeaderBytes ||
      std::memcmp(bytes.data(), kEmbeddingMagic, sizeof(kEmbeddingMagic)) != 0) {
    throw FormatError("embedding file: missing QPEMB1 header");
  }
  const auto dim = detail::get_le<std::uint32_t>(bytes, 6);
  const auto rows = detail::get_le<std::uint64_t>(bytes, 10);
  if (dim == 0) {
    throw FormatError("embedding file: dim is zero");
  }
  const std::size_t payload = bytes.size() - kEmbeddingHeaderBytes;
  if (rows > payload / 4 / dim || payload != rows * dim * 4) {
    throw FormatError("embedding file: header declares " + std::to_string(rows) + " x " +
                      std::to_string(dim) + " floats but payload holds " +
                      std::to_string(payload) + " bytes");
  }
  std::vector<float> values(rows * dim);
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, kEmbeddingHeaderBytes + 4 * i));
    if (!std::isfinite(values[i])) {
      throw DataError("embedding file: non-finite value in row " + std::to_string(i / dim) +
                      " column " + std::to_string(i % dim));
    }
  }
  return EmbeddingTable(dim, std::move(values));
}

inline void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
  detail::write_file(path, encode_embeddings(table));
}

inline EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Embedding file written next to a manifest: same stem, ".qpemb" extension.
inline std::filesystem::path embeddings_path_for(const std::filesystem::path& manifest_path) {
  auto p = manifest_path;
  p.replace_extension(".qpemb");
  return p;
}

inline void save_dataset(const Dataset& dataset, const std::filesystem::path& manifest_path,
                         const WarningSink& warn = warn_to_stderr) {
  for (const auto& w : dataset.soft_warnings()) {
    warn(w);
  }
  const auto emb_path = embeddings_path_for(manifest_path);
  std::string text;
  nlohmann::json header = {{"qprobe_manifest", 1},
                           {"dim", dataset.dim()},
                           {"embeddings", emb_path.filename().string()},
                           {"binary_rewards", dataset.binary_rewards()}};
  text += header.dump() + '\n';
  for (const auto& r : dataset.reward_records()) {
    nlohmann::json line = {{"prompt_id", r.prompt_id},
                           {"completion_id", r.completion_id},
                           {"row", r.row},
                           {"reward", r.reward}};
    text += line.dump() + '\n';
  }
  for (const auto& p : dataset.preference_pairs()) {
    nlohmann::json line = {
        {"prompt_id", p.prompt_id}, {"winner_row", p.winner_row}, {"loser_row", p.loser_row}};
    text += line.dump() + '\n';
  }
  save_embeddings(dataset.embeddings(), emb_path);
  detail::write_file(manifest_path, text);
}

namespace detail {

inline const nlohmann::json& require_key(const nlohmann::json& obj, const char* key,
                                         std::size_t line_no) {
  const auto it = obj.find(key);
  if (it == obj.end()) {
    throw FormatError("manifest line " + std::to_string(line_no) + ": missing key '" + key + "'");
  }
  return *it;
}

inline std::string require_string(const nlohmann::json& obj, const char* key, std::size_t line_no) {
  const auto& v = require_key(obj, key, line_no);
  if (!v.is_string()) {
    throw FormatError("manifest line " + std::to_string(line_no) + ": '" + key +
                      "' must be a string");
  }
  return v.get<std::string>();
}

inline std::size_t require_index(const nlohmann::json& obj, const char* key, std::size_t line_no) {
  const auto& v = require_key(obj, key, line_no);
  if (!v.is_number_unsigned()) {
    throw FormatError("manifest line " + std::to_string(line_no) + ": '" + key +
                      "' must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

inline void warn_unknown_keys(const nlohmann::json& obj, std::initializer_list<const char*> known,
                              std::size_t line_no, const WarningSink& warn) {
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* k : known) {
      ok = ok || key == k;
    }
    if (!ok) {
      warn("manifest line " + std::to_string(line_no) + ": ignoring unknown key '" + key + "'");
    }
  }
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& manifest_path,
                            const WarningSink& warn = warn_to_stderr) {
  std::ifstream in(manifest_path);
  if (!in) {
    throw IoError("cannot open manifest " + manifest_path.string());
  }
  std::string line;
  std::size_t line_no = 0;
  nlohmann::json header;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    header = nlohmann::json::parse(line, nullptr, false);
    break;
  }
  if (!header.is_object() || !header.contains("qprobe_manifest")) {
    throw FormatError("manifest " + manifest_path.string() + ": missing header line");
  }
  if (header["qprobe_manifest"] != 1) {
    throw FormatError("manifest: unsupported version " + header["qprobe_manifest"].dump());
  }
  detail::warn_unknown_keys(header, {"qprobe_manifest", "dim", "embeddings", "binary_rewards"},
                            line_no, warn);
  const std::size_t dim = detail::require_index(header, "dim", line_no);
  if (dim == 0) {
    throw SchemaError("manifest declares dim 0");
  }
  const std::string emb_name = detail::require_string(header, "embeddings", line_no);
  const bool binary = header.value("binary_rewards", false);

  EmbeddingTable table = load_embeddings(manifest_path.parent_path() / emb_name);
  if (table.dim() != dim) {
    throw SchemaError("manifest declares dim " + std::to_string(dim) +
                      " but embedding file has dim " + std::to_string(table.dim()));
  }

  std::vector<RewardRecord> rewards;
  std::vector<PreferencePair> pairs;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    const auto obj = nlohmann::json::parse(line, nullptr, false);
    if (!obj.is_object()) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": not a JSON object");
    }
    if (obj.contains("reward")) {
      detail::warn_unknown_keys(obj, {"prompt_id", "completion_id", "row", "reward"}, line_no, warn);
      const auto& rv = obj["reward"];
      if (!rv.is_number()) {
        throw FormatError("manifest line " + std::to_string(line_no) + ": 'reward' must be a number");
      }
      rewards.push_back({detail::require_string(obj, "prompt_id", line_no),
                         detail::require_string(obj, "completion_id", line_no),
                         detail::require_index(obj, "row", line_no), rv.get<double>()});
    } else if (obj.contains("winner_row")) {
      detail::warn_unknown_keys(obj, {"prompt_id", "winner_row", "loser_row"}, line_no, warn);
      pairs.push_back({detail::require_string(obj, "prompt_id", line_no),
                       detail::require_index(obj, "winner_row", line_no),
                       detail::require_index(obj, "loser_row", line_no)});
    } else {
      throw FormatError("manifest line " + std::to_string(line_no) +
                        ": neither a reward record nor a preference pair");
    }
  }

  std::vector<int> uses(table.rows(), 0);
  auto use = [&](std::size_t row) {
    if (row < uses.size()) {
      ++uses[row];
    }
  };
  for (const auto& r : rewards) use(r.row);
  for (const auto& p : pairs) {
    use(p.winner_row);
    use(p.loser_row);
  }
  for (std::size_t r = 0; r < uses.size(); ++r) {
    if (uses[r] != 1) {
      warn("embedding row " + std::to_string(r) + " referenced " + std::to_string(uses[r]) +
           " times");
    }
  }

  Dataset d = Dataset::from_parts(std::move(table), binary, std::move(rewards), std::move(pairs));
  for (const auto& w : d.soft_warnings()) {
    warn(w);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Subsetting
// ---------------------------------------------------------------------------

/// Dataset restricted to the given prompt positions (indices into prompts()).
/// Records keep their original relative order; embedding rows are compacted.
inline Dataset subset_by_prompts(const Dataset& d, std::span<const std::size_t> prompt_positions) {
  std::vector<char> keep(d.prompts().size(), 0);
  for (std::size_t p : prompt_positions) {
    if (p >= keep.size()) {
      throw ArgumentError("prompt position out of range");
    }
    keep[p] = 1;
  }
  Dataset out(d.dim(), d.binary_rewards());
  for (const auto& r : d.reward_records()) {
    if (keep[static_cast<std::size_t>(d.find_prompt(r.prompt_id))]) {
      out.add_reward_record(r.prompt_id, r.completion_id, d.embedding(r.row), r.reward);
    }
  }
  for (const auto& p : d.preference_pairs()) {
    if (keep[static_cast<std::size_t>(d.find_prompt(p.prompt_id))]) {
      out.add_preference_pair(p.prompt_id, d.embedding(p.winner_row), d.embedding(p.loser_row));
    }
  }
  return out;
}

/// Seeded split at prompt granularity. The first part receives
/// floor(fraction * n_prompts) prompts after a Fisher-Yates shuffle of the
/// prompt order drawn from Rng(seed).derive("split_by_prompt").
inline std::pair<Dataset, Dataset> split_by_prompt(const Dataset& d, double fraction,
                                                   std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ArgumentError("split fraction must lie in (0, 1)");
  }
  const std::size_t n = d.prompts().size();
  if (n < 2) {
    throw ArgumentError("split_by_prompt needs at least 2 distinct prompts");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng(seed).derive("split_by_prompt");
  rng.shuffle(order);
  const auto n_first = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  const std::span<const std::size_t> all(order);
  return {subset_by_prompts(d, all.first(n_first)), subset_by_prompts(d, all.subspan(n_first))};
}

}  // namespace qprobe
