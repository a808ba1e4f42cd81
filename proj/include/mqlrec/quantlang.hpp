// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Quantitative language: prefixed code tokens shared by both modalities,
// per-modality item code tables, and distance-ordered collision resolution.
//
// Code tokens are "<x_n>" with x = 'a' + level for text and 'A' + level for
// image, n in [0, K). Token ids are laid out as
//   <pad> <bos> <eos> | text level-major | image level-major | prompts task-major
// Files:
//   vocabulary  one token per line, in id order
//   code table  <item_id>\t<text|image>\t<token><token>...

#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mqlrec/common.hpp"
#include "mqlrec/rqvae.hpp"

namespace mqlrec {

inline constexpr int kPromptTokensPerTask = 4;

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kSpecialCount = 3;

  struct CodeToken {
    Modality modality;
    int level;
    int code;
  };

  Vocabulary() = default;
  /// Throws InvalidArgument when levels > 26, levels < 1 or K < 2.
  Vocabulary(int levels, int codebook_size, int task_count);

  int levels() const { return levels_; }
  int codebook_size() const { return codebook_size_; }
  int task_count() const { return task_count_; }
  std::size_t size() const { return tokens_.size(); }
  std::size_t code_token_count() const { return 2u * levels_ * codebook_size_; }

  /// Throws TokenError("UnknownToken") for tokens not in the vocabulary.
  TokenId id(std::string_view token) const;
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const;

  TokenId code_token(Modality modality, int level, int code) const;
  std::optional<CodeToken> code_info(TokenId id) const;
  std::array<TokenId, kPromptTokensPerTask> prompt_tokens(int task) const;
  /// The task owning a prompt token, if `id` is one.
  std::optional<int> prompt_task(TokenId id) const;

  std::vector<TokenId> encode_tuple(Modality modality, const CodeTuple& code) const;
  /// Inverse of encode_tuple; throws TokenError on anything but L code tokens
  /// of one modality in level order.
  std::pair<Modality, CodeTuple> decode_tuple(std::span<const TokenId> ids) const;

  void save(const std::filesystem::path& path) const;
  /// Rebuilds the vocabulary and checks the file matches it token by token.
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  int levels_ = 0;
  int codebook_size_ = 0;
  int task_count_ = 0;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

Vocabulary build_vocabulary(int levels, int codebook_size, int task_count);

std::string code_token_string(Modality modality, int level, int code);
/// Parses "<x_n>"; nullopt when the string is not a code token.
std::optional<Vocabulary::CodeToken> parse_code_token(std::string_view token);
/// Splits "<a_1><b_2>" into {"<a_1>", "<b_2>"}; throws TokenError on stray text.
std::vector<std::string> split_tokens(std::string_view joined);

std::vector<std::string> tuple_to_tokens(Modality modality, const CodeTuple& code, int codebook_size);
/// Errors (TokenError kinds): UnknownToken, MixedModality, LevelOrder.
std::pair<Modality, CodeTuple> tokens_to_tuple(std::span<const std::string> tokens);

/// Set of occupied code tuples with subtree counts for prefix queries.
class OccupancyTrie {
 public:
  OccupancyTrie() = default;
  OccupancyTrie(int levels, int codebook_size);

  /// False if the tuple was already present.
  bool insert(const CodeTuple& code);
  bool contains(const CodeTuple& code) const;
  /// Number of occupied tuples starting with `prefix`.
  long count_under(std::span<const int> prefix) const;
  /// Whether every completion of `prefix` is occupied.
  bool full(std::span<const int> prefix) const;
  long size() const { return nodes_.empty() ? 0 : nodes_[0].count; }

 private:
  struct Node {
    std::map<int, int> children;
    long count = 0;
  };
  int levels_ = 0;
  int codebook_size_ = 0;
  std::vector<Node> nodes_;
};

struct Provenance {
  bool reassigned = false;
  /// 0-based levels whose code differs from the quantizer's original choice.
  std::vector<int> changed_levels;
  bool operator==(const Provenance&) const = default;
};

class ModalityCodeTable {
 public:
  ModalityCodeTable() = default;
  ModalityCodeTable(Modality modality, int levels, int codebook_size);

  /// Throws InvalidArgument on duplicate items, occupied tuples or out-of-range codes.
  void assign(const ItemId& item, const CodeTuple& code, Provenance provenance = {});

  Modality modality() const { return modality_; }
  int levels() const { return levels_; }
  int codebook_size() const { return codebook_size_; }
  std::size_t size() const { return codes_.size(); }
  bool contains(const ItemId& item) const { return codes_.contains(item); }
  const CodeTuple& code(const ItemId& item) const;
  const Provenance& provenance(const ItemId& item) const;
  std::optional<ItemId> item_at(const CodeTuple& code) const;
  const std::map<ItemId, CodeTuple>& codes() const { return codes_; }
  const OccupancyTrie& occupancy() const { return trie_; }

  bool operator==(const ModalityCodeTable& other) const {
    return modality_ == other.modality_ && levels_ == other.levels_ &&
           codebook_size_ == other.codebook_size_ && codes_ == other.codes_;
  }

 private:
  Modality modality_ = Modality::Text;
  int levels_ = 0;
  int codebook_size_ = 0;
  std::map<ItemId, CodeTuple> codes_;
  std::map<ItemId, Provenance> provenance_;
  std::map<CodeTuple, ItemId> owners_;
  OccupancyTrie trie_;
};

/// Makes the item -> tuple map injective. Items sharing a tuple are processed
/// group by group (groups in lexicographic tuple order, members by ascending
/// minimum last-level distance, then item id). The first member keeps the
/// tuple; each later member takes the first globally free tuple found by
/// scanning last-level codes in ascending distance order, falling back one
/// level shallower each time the fixed prefix is exhausted.
ModalityCodeTable resolve_collisions(std::span<const std::pair<ItemId, QuantizationResult>> results,
                                     int codebook_size, int levels, Modality modality);

struct ItemCodeTable {
  ModalityCodeTable text;
  ModalityCodeTable image;

  const ModalityCodeTable& get(Modality m) const { return m == Modality::Text ? text : image; }
  bool operator==(const ItemCodeTable&) const = default;
};

/// Throws InvalidArgument when the item id sets, shapes or modality tags disagree.
ItemCodeTable merge_modalities(ModalityCodeTable text_table, ModalityCodeTable image_table);

void write_code_table(const ItemCodeTable& table, const std::filesystem::path& path);
ItemCodeTable read_code_table(const std::filesystem::path& path, const Vocabulary& vocab);

}  // namespace mqlrec
