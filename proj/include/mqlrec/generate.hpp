// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Ranked item generation: a trie over each modality's code tuples, beam
// search over exactly L decoding steps, score normalization and the fusion
// of text and image ranked lists.

#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mqlrec/common.hpp"
#include "mqlrec/quantlang.hpp"
#include "mqlrec/seq2seq.hpp"

namespace mqlrec {

/// Depth-L trie over code-token ids of one modality; leaves carry items.
class CodeTrie {
 public:
  struct Edge {
    TokenId token;
    int node;
  };

  CodeTrie() = default;
  CodeTrie(Modality modality, int levels);

  /// Throws InvalidArgument when the path is not L tokens long or already present.
  void insert(std::span<const TokenId> path, const ItemId& item);

  Modality modality() const { return modality_; }
  int levels() const { return levels_; }
  std::size_t size() const { return leaf_count_; }
  static constexpr int root() { return 0; }
  /// Child of `node` through `token`, or -1.
  int child(int node, TokenId token) const;
  /// Children sorted by token id.
  std::span<const Edge> children(int node) const { return nodes_[node].children; }
  /// Item at a leaf node, nullptr for inner nodes.
  const ItemId* item(int node) const { return nodes_[node].item ? &*nodes_[node].item : nullptr; }
  std::optional<ItemId> lookup(std::span<const TokenId> path) const;
  bool contains(std::span<const TokenId> path) const { return lookup(path).has_value(); }

 private:
  struct Node {
    std::vector<Edge> children;
    std::optional<ItemId> item;
  };
  Modality modality_ = Modality::Text;
  int levels_ = 0;
  std::size_t leaf_count_ = 0;
  std::vector<Node> nodes_;
};

/// Trie over the items of `table`, or over `items` only when non-empty.
/// Throws InvalidArgument when a listed item has no code.
CodeTrie build_trie(const ModalityCodeTable& table, const Vocabulary& vocab, std::span<const ItemId> items = {});

struct ScoredItem {
  ItemId item;
  double score = 0.0;
  bool operator==(const ScoredItem&) const = default;
};

/// Items by descending score, ties by ascending ItemId, no duplicates.
struct RankedList {
  std::string tag;
  std::vector<ScoredItem> items;
  /// Unconstrained decoding only: finished sequences that map to no item.
  std::size_t invalid_sequences = 0;

  /// 1-based rank of `item`, if present.
  std::optional<std::size_t> rank_of(const ItemId& item) const;
};

void sort_ranked(std::vector<ScoredItem>& items);

/// Next-token log-probabilities for a batch of decoder prefixes of one input.
class DecodingSession {
 public:
  virtual ~DecodingSession() = default;
  /// prefixes.size() x vocab log-softmax rows; every prefix starts with BOS.
  virtual Matrix next_log_probs(std::span<const std::vector<TokenId>> prefixes) = 0;
};

class SequenceScorer {
 public:
  virtual ~SequenceScorer() = default;
  virtual std::unique_ptr<DecodingSession> start(std::span<const TokenId> input_ids) const = 0;
  virtual int vocab_size() const = 0;
};

/// Eval-mode scoring by a trained encoder-decoder.
class ModelScorer : public SequenceScorer {
 public:
  explicit ModelScorer(const Seq2SeqModel& model) : model_(&model) {}
  std::unique_ptr<DecodingSession> start(std::span<const TokenId> input_ids) const override;
  int vocab_size() const override { return model_->config().vocab_size; }

 private:
  const Seq2SeqModel* model_;
};

struct BeamOptions {
  int beam_size = 20;
  /// Restrict every step to children of the hypothesis's trie node.
  bool constrained = true;
};

/// Beam search over exactly trie.levels() steps; a hypothesis's score is the
/// sum of its per-token log-probabilities. Hypotheses tie-break by token
/// sequence. Throws InvalidArgument on beam_size < 1 or an empty trie.
RankedList beam_search(const SequenceScorer& scorer, std::span<const TokenId> input_ids, const CodeTrie& trie,
                       const BeamOptions& options = {});

/// exp(s - max s): a per-list softmax rescaled so the top item scores 1.
/// Throws InvalidArgument on an empty list or non-finite scores.
RankedList normalize_scores(const RankedList& list);

/// Fuses a text and an image list whose scores lie in [0, 1]: items in both
/// score (s_t + s_v) / 2 + 1, items in one keep their score. Throws
/// InvalidArgument on scores outside [0, 1].
RankedList rerank(const RankedList& text, const RankedList& image);

struct UserRanking {
  UserId user;
  std::string task;
  RankedList list;
};

/// One line per ranking: <user>\t<task>\t<item>:<score>,...
void write_rankings(std::span<const UserRanking> rankings, const std::filesystem::path& path);
std::vector<UserRanking> read_rankings(const std::filesystem::path& path);

}  // namespace mqlrec
