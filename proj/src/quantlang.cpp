// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "mqlrec/quantlang.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "mqlrec/error.hpp"
#include "mqlrec/text_io.hpp"

namespace mqlrec {

Vocabulary::Vocabulary(int levels, int codebook_size, int task_count)
    : levels_(levels), codebook_size_(codebook_size), task_count_(task_count) {
  if (levels < 1 || levels > 26) throw InvalidArgument("levels must be in [1, 26]");
  if (codebook_size < 2) throw InvalidArgument("codebook_size must be >= 2");
  if (task_count < 0) throw InvalidArgument("task_count must be >= 0");
  tokens_ = {"<pad>", "<bos>", "<eos>"};
  for (Modality m : kModalities)
    for (int l = 0; l < levels; ++l)
      for (int k = 0; k < codebook_size; ++k) tokens_.push_back(code_token_string(m, l, k));
  for (int t = 0; t < task_count; ++t)
    for (int j = 0; j < kPromptTokensPerTask; ++j)
      tokens_.push_back("<task" + std::to_string(t) + "_" + std::to_string(j) + ">");
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
}

Vocabulary build_vocabulary(int levels, int codebook_size, int task_count) {
  return Vocabulary(levels, codebook_size, task_count);
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const {
  if (auto id = find(token)) return *id;
  throw TokenError("UnknownToken", "unknown token '" + std::string(token) + "'");
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw TokenError("UnknownToken", "token id " + std::to_string(id) + " out of range");
  }
  return tokens_[id];
}

TokenId Vocabulary::code_token(Modality modality, int level, int code) const {
  if (level < 0 || level >= levels_ || code < 0 || code >= codebook_size_) {
    throw TokenError("OutOfRange", "code " + std::to_string(code) + " at level " +
                                       std::to_string(level) + " out of range");
  }
  const int base = modality == Modality::Text ? 0 : levels_ * codebook_size_;
  return kSpecialCount + base + level * codebook_size_ + code;
}

std::optional<Vocabulary::CodeToken> Vocabulary::code_info(TokenId id) const {
  const long rel = static_cast<long>(id) - kSpecialCount;
  const long per_modality = static_cast<long>(levels_) * codebook_size_;
  if (rel < 0 || rel >= 2 * per_modality) return std::nullopt;
  const Modality m = rel < per_modality ? Modality::Text : Modality::Image;
  const long within = rel % per_modality;
  return CodeToken{m, static_cast<int>(within / codebook_size_), static_cast<int>(within % codebook_size_)};
}

std::array<TokenId, kPromptTokensPerTask> Vocabulary::prompt_tokens(int task) const {
  if (task < 0 || task >= task_count_) throw InvalidArgument("task index out of range");
  std::array<TokenId, kPromptTokensPerTask> ids{};
  const TokenId base = kSpecialCount + static_cast<TokenId>(code_token_count()) + task * kPromptTokensPerTask;
  for (int j = 0; j < kPromptTokensPerTask; ++j) ids[j] = base + j;
  return ids;
}

std::optional<int> Vocabulary::prompt_task(TokenId id) const {
  const long rel = static_cast<long>(id) - kSpecialCount - static_cast<long>(code_token_count());
  if (rel < 0 || rel >= static_cast<long>(task_count_) * kPromptTokensPerTask) return std::nullopt;
  return static_cast<int>(rel / kPromptTokensPerTask);
}

std::vector<TokenId> Vocabulary::encode_tuple(Modality modality, const CodeTuple& code) const {
  if (static_cast<int>(code.size()) != levels_) {
    throw TokenError("OutOfRange", "tuple has " + std::to_string(code.size()) + " levels, expected " +
                                       std::to_string(levels_));
  }
  std::vector<TokenId> ids(code.size());
  for (int l = 0; l < levels_; ++l) ids[l] = code_token(modality, l, code[l]);
  return ids;
}

std::pair<Modality, CodeTuple> Vocabulary::decode_tuple(std::span<const TokenId> ids) const {
  if (static_cast<int>(ids.size()) != levels_) {
    throw TokenError("LevelOrder", "expected " + std::to_string(levels_) + " code tokens");
  }
  std::pair<Modality, CodeTuple> out{Modality::Text, CodeTuple(levels_)};
  for (int l = 0; l < levels_; ++l) {
    const auto info = code_info(ids[l]);
    if (!info) throw TokenError("UnknownToken", "token id " + std::to_string(ids[l]) + " is not a code token");
    if (l == 0) out.first = info->modality;
    if (info->modality != out.first) throw TokenError("MixedModality", "tokens of both modalities in one tuple");
    if (info->level != l) throw TokenError("LevelOrder", "code tokens out of level order");
    out.second[l] = info->code;
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  int levels = 0;
  int k = 0;
  int prompts = 0;
  for (const auto& t : tokens) {
    if (auto info = parse_code_token(t)) {
      levels = std::max(levels, info->level + 1);
      k = std::max(k, info->code + 1);
    } else if (t.starts_with("<task")) {
      ++prompts;
    }
  }
  if (levels == 0 || prompts % kPromptTokensPerTask != 0) {
    throw ParseError(path.string(), 0, "not a vocabulary file");
  }
  Vocabulary v(levels, k, prompts / kPromptTokensPerTask);
  if (v.tokens_ != tokens) throw ParseError(path.string(), 0, "token order does not match the canonical layout");
  return v;
}

std::string code_token_string(Modality modality, int level, int code) {
  const char base = modality == Modality::Text ? 'a' : 'A';
  return std::string("<") + static_cast<char>(base + level) + "_" + std::to_string(code) + ">";
}

std::optional<Vocabulary::CodeToken> parse_code_token(std::string_view token) {
  if (token.size() < 5 || token.front() != '<' || token.back() != '>' || token[2] != '_') {
    return std::nullopt;
  }
  const char c = token[1];
  Modality m;
  int level;
  if (c >= 'a' && c <= 'z') {
    m = Modality::Text;
    level = c - 'a';
  } else if (c >= 'A' && c <= 'Z') {
    m = Modality::Image;
    level = c - 'A';
  } else {
    return std::nullopt;
  }
  int code = 0;
  const auto digits = token.substr(3, token.size() - 4);
  if (digits.empty() || digits[0] == '-' || !parse_int(digits, code)) return std::nullopt;
  return Vocabulary::CodeToken{m, level, code};
}

std::vector<std::string> split_tokens(std::string_view joined) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < joined.size()) {
    if (joined[i] != '<') throw TokenError("UnknownToken", "stray text in token string '" + std::string(joined) + "'");
    const auto close = joined.find('>', i);
    if (close == std::string_view::npos) throw TokenError("UnknownToken", "unterminated token");
    out.emplace_back(joined.substr(i, close - i + 1));
    i = close + 1;
  }
  return out;
}

std::vector<std::string> tuple_to_tokens(Modality modality, const CodeTuple& code, int codebook_size) {
  if (code.size() > 26) throw TokenError("OutOfRange", "more than 26 levels");
  std::vector<std::string> out;
  for (std::size_t l = 0; l < code.size(); ++l) {
    if (code[l] < 0 || code[l] >= codebook_size) {
      throw TokenError("OutOfRange", "code " + std::to_string(code[l]) + " outside [0, " +
                                         std::to_string(codebook_size) + ")");
    }
    out.push_back(code_token_string(modality, static_cast<int>(l), code[l]));
  }
  return out;
}

std::pair<Modality, CodeTuple> tokens_to_tuple(std::span<const std::string> tokens) {
  if (tokens.empty()) throw TokenError("LevelOrder", "empty token sequence");
  std::pair<Modality, CodeTuple> out{Modality::Text, {}};
  for (std::size_t l = 0; l < tokens.size(); ++l) {
    const auto info = parse_code_token(tokens[l]);
    if (!info) throw TokenError("UnknownToken", "'" + tokens[l] + "' is not a code token");
    if (l == 0) out.first = info->modality;
    if (info->modality != out.first) throw TokenError("MixedModality", "tokens of both modalities in one tuple");
    if (info->level != static_cast<int>(l)) throw TokenError("LevelOrder", "code tokens out of level order");
    out.second.push_back(info->code);
  }
  return out;
}

// ---------------------------------------------------------------------------

OccupancyTrie::OccupancyTrie(int levels, int codebook_size)
    : levels_(levels), codebook_size_(codebook_size), nodes_(1) {}

bool OccupancyTrie::insert(const CodeTuple& code) {
  if (contains(code)) return false;
  int node = 0;
  ++nodes_[0].count;
  for (int c : code) {
    auto it = nodes_[node].children.find(c);
    int next;
    if (it == nodes_[node].children.end()) {
      next = static_cast<int>(nodes_.size());
      nodes_[node].children.emplace(c, next);
      nodes_.emplace_back();
    } else {
      next = it->second;
    }
    node = next;
    ++nodes_[node].count;
  }
  return true;
}

bool OccupancyTrie::contains(const CodeTuple& code) const {
  return static_cast<int>(code.size()) == levels_ && count_under(code) > 0;
}

long OccupancyTrie::count_under(std::span<const int> prefix) const {
  if (nodes_.empty()) return 0;
  int node = 0;
  for (int c : prefix) {
    auto it = nodes_[node].children.find(c);
    if (it == nodes_[node].children.end()) return 0;
    node = it->second;
  }
  return nodes_[node].count;
}

bool OccupancyTrie::full(std::span<const int> prefix) const {
  double capacity = 1.0;
  for (int l = static_cast<int>(prefix.size()); l < levels_; ++l) capacity *= codebook_size_;
  return static_cast<double>(count_under(prefix)) >= capacity;
}

ModalityCodeTable::ModalityCodeTable(Modality modality, int levels, int codebook_size)
    : modality_(modality), levels_(levels), codebook_size_(codebook_size), trie_(levels, codebook_size) {}

void ModalityCodeTable::assign(const ItemId& item, const CodeTuple& code, Provenance provenance) {
  if (static_cast<int>(code.size()) != levels_) throw InvalidArgument("tuple length mismatch for '" + item + "'");
  for (int c : code) {
    if (c < 0 || c >= codebook_size_) throw InvalidArgument("code out of range for '" + item + "'");
  }
  if (codes_.contains(item)) throw InvalidArgument("item '" + item + "' assigned twice");
  if (!trie_.insert(code)) throw InvalidArgument("tuple of '" + item + "' is already occupied");
  codes_.emplace(item, code);
  owners_.emplace(code, item);
  provenance_.emplace(item, std::move(provenance));
}

const CodeTuple& ModalityCodeTable::code(const ItemId& item) const {
  auto it = codes_.find(item);
  if (it == codes_.end()) throw InvalidArgument("no " + std::string(modality_name(modality_)) + " code for item '" + item + "'");
  return it->second;
}

const Provenance& ModalityCodeTable::provenance(const ItemId& item) const {
  auto it = provenance_.find(item);
  if (it == provenance_.end()) throw InvalidArgument("no provenance for item '" + item + "'");
  return it->second;
}

std::optional<ItemId> ModalityCodeTable::item_at(const CodeTuple& code) const {
  auto it = owners_.find(code);
  if (it == owners_.end()) return std::nullopt;
  return it->second;
}

namespace {

// Depth-first scan of levels [level, L) in per-level rank order; first free tuple wins.
bool find_free(const OccupancyTrie& trie, const std::vector<std::vector<int>>& ranked, CodeTuple& tuple,
               int level) {
  const int levels = static_cast<int>(tuple.size());
  if (level == levels) return !trie.contains(tuple);
  for (int code : ranked[level]) {
    tuple[level] = code;
    if (trie.full(std::span<const int>(tuple.data(), level + 1))) continue;
    if (find_free(trie, ranked, tuple, level + 1)) return true;
  }
  return false;
}

}  // namespace

ModalityCodeTable resolve_collisions(std::span<const std::pair<ItemId, QuantizationResult>> results,
                                     int codebook_size, int levels, Modality modality) {
  ModalityCodeTable table(modality, levels, codebook_size);
  std::map<CodeTuple, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& q = results[i].second;
    if (static_cast<int>(q.code.size()) != levels || q.level_distances.rows() != levels ||
        q.level_distances.cols() != codebook_size) {
      throw InvalidArgument("quantization result of '" + results[i].first + "' lacks full level distances");
    }
    groups[q.code].push_back(i);
  }

  // Every group's original tuple is taken by the group's closest member.
  struct Pending {
    std::size_t index;
  };
  std::vector<Pending> pending;
  for (auto& [tuple, members] : groups) {
    std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      const double da = results[a].second.level_distances.row(levels - 1).minCoeff();
      const double db = results[b].second.level_distances.row(levels - 1).minCoeff();
      if (da != db) return da < db;
      return results[a].first < results[b].first;
    });
    table.assign(results[members.front()].first, tuple);
    for (std::size_t m = 1; m < members.size(); ++m) pending.push_back({members[m]});
  }

  for (const auto& p : pending) {
    const auto& [item, q] = results[p.index];
    std::vector<std::vector<int>> ranked(levels, std::vector<int>(codebook_size));
    for (int l = 0; l < levels; ++l) {
      std::iota(ranked[l].begin(), ranked[l].end(), 0);
      std::stable_sort(ranked[l].begin(), ranked[l].end(), [&](int a, int b) {
        return q.level_distances(l, a) < q.level_distances(l, b);
      });
    }
    bool placed = false;
    for (int start = levels - 1; start >= 0 && !placed; --start) {
      CodeTuple tuple = q.code;
      if (table.occupancy().full(std::span<const int>(tuple.data(), start))) continue;
      if (find_free(table.occupancy(), ranked, tuple, start)) {
        Provenance prov{true, {}};
        for (int l = 0; l < levels; ++l) {
          if (tuple[l] != q.code[l]) prov.changed_levels.push_back(l);
        }
        table.assign(item, tuple, std::move(prov));
        placed = true;
      }
    }
    if (!placed) {
      throw CapacityExhausted("no free code tuple left for item '" + item + "' (" +
                              std::to_string(results.size()) + " items, K^L exceeded)");
    }
  }
  return table;
}

ItemCodeTable merge_modalities(ModalityCodeTable text_table, ModalityCodeTable image_table) {
  if (text_table.modality() != Modality::Text || image_table.modality() != Modality::Image) {
    throw InvalidArgument("merge_modalities expects a text table and an image table");
  }
  if (text_table.levels() != image_table.levels() ||
      text_table.codebook_size() != image_table.codebook_size()) {
    throw InvalidArgument("modality tables disagree on levels or codebook size");
  }
  if (text_table.size() != image_table.size() ||
      !std::equal(text_table.codes().begin(), text_table.codes().end(), image_table.codes().begin(),
                  [](const auto& a, const auto& b) { return a.first == b.first; })) {
    throw InvalidArgument("modality tables cover different item sets");
  }
  return ItemCodeTable{std::move(text_table), std::move(image_table)};
}

void write_code_table(const ItemCodeTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  for (const auto& [item, text_code] : table.text.codes()) {
    for (Modality m : kModalities) {
      const auto& t = table.get(m);
      out << item << '\t' << modality_name(m) << '\t';
      for (const auto& tok : tuple_to_tokens(m, t.code(item), t.codebook_size())) out << tok;
      out << '\n';
    }
  }
}

ItemCodeTable read_code_table(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  ModalityCodeTable text(Modality::Text, vocab.levels(), vocab.codebook_size());
  ModalityCodeTable image(Modality::Image, vocab.levels(), vocab.codebook_size());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto parts = split(line, '\t');
    if (parts.size() != 3) throw ParseError(path.string(), line_no, "expected 3 tab-separated fields");
    try {
      const Modality m = parse_modality(parts[1]);
      const auto tokens = split_tokens(parts[2]);
      const auto [tm, code] = tokens_to_tuple(tokens);
      if (tm != m) throw TokenError("MixedModality", "tokens do not match the modality column");
      (m == Modality::Text ? text : image).assign(std::string(parts[0]), code);
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(path.string(), line_no, e.what());
    }
  }
  try {
    return merge_modalities(std::move(text), std::move(image));
  } catch (const Error& e) {
    throw ParseError(path.string(), line_no, e.what());
  }
}

}  // namespace mqlrec
