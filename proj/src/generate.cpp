// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "mqlrec/generate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "mqlrec/error.hpp"
#include "mqlrec/text_io.hpp"

namespace mqlrec {

// ---------------------------------------------------------------------------
// CodeTrie

CodeTrie::CodeTrie(Modality modality, int levels) : modality_(modality), levels_(levels), nodes_(1) {
  if (levels < 1) throw InvalidArgument("trie depth must be >= 1");
}

int CodeTrie::child(int node, TokenId token) const {
  const auto& edges = nodes_[node].children;
  const auto it = std::lower_bound(edges.begin(), edges.end(), token,
                                   [](const Edge& e, TokenId t) { return e.token < t; });
  return it != edges.end() && it->token == token ? it->node : -1;
}

void CodeTrie::insert(std::span<const TokenId> path, const ItemId& item) {
  if (static_cast<int>(path.size()) != levels_) {
    throw InvalidArgument("trie path for '" + item + "' has " + std::to_string(path.size()) + " tokens, expected " +
                          std::to_string(levels_));
  }
  int node = root();
  for (TokenId t : path) {
    int next = child(node, t);
    if (next < 0) {
      next = static_cast<int>(nodes_.size());
      nodes_.emplace_back();
      auto& edges = nodes_[node].children;
      const auto it = std::lower_bound(edges.begin(), edges.end(), t,
                                       [](const Edge& e, TokenId tok) { return e.token < tok; });
      edges.insert(it, Edge{t, next});
    }
    node = next;
  }
  if (nodes_[node].item) {
    throw InvalidArgument("items '" + *nodes_[node].item + "' and '" + item + "' share a code tuple");
  }
  nodes_[node].item = item;
  ++leaf_count_;
}

std::optional<ItemId> CodeTrie::lookup(std::span<const TokenId> path) const {
  if (static_cast<int>(path.size()) != levels_ || nodes_.empty()) return std::nullopt;
  int node = root();
  for (TokenId t : path) {
    node = child(node, t);
    if (node < 0) return std::nullopt;
  }
  return nodes_[node].item;
}

CodeTrie build_trie(const ModalityCodeTable& table, const Vocabulary& vocab, std::span<const ItemId> items) {
  CodeTrie trie(table.modality(), table.levels());
  if (items.empty()) {
    for (const auto& [item, code] : table.codes()) trie.insert(vocab.encode_tuple(table.modality(), code), item);
    return trie;
  }
  for (const auto& item : items) {
    if (!table.contains(item)) throw InvalidArgument("item '" + item + "' has no code in the table");
    trie.insert(vocab.encode_tuple(table.modality(), table.code(item)), item);
  }
  return trie;
}

// ---------------------------------------------------------------------------
// Ranked lists

std::optional<std::size_t> RankedList::rank_of(const ItemId& item) const {
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].item == item) return i + 1;
  }
  return std::nullopt;
}

void sort_ranked(std::vector<ScoredItem>& items) {
  std::sort(items.begin(), items.end(), [](const ScoredItem& a, const ScoredItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item < b.item;
  });
}

// ---------------------------------------------------------------------------
// Beam search

namespace {

class ModelSession : public DecodingSession {
 public:
  ModelSession(const Seq2SeqModel& model, std::span<const TokenId> input)
      : model_(model), encoded_(encode_input(model, input)) {}
  Matrix next_log_probs(std::span<const std::vector<TokenId>> prefixes) override {
    return next_token_log_probs(model_, encoded_, prefixes);
  }

 private:
  const Seq2SeqModel& model_;
  EncodedInput encoded_;
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // BOS first
  double score = 0.0;
  int node = CodeTrie::root();  // -1 once off the trie
};

struct Candidate {
  std::size_t parent;
  TokenId token;
  double score;
  int node;
};

}  // namespace

std::unique_ptr<DecodingSession> ModelScorer::start(std::span<const TokenId> input_ids) const {
  return std::make_unique<ModelSession>(*model_, input_ids);
}

RankedList beam_search(const SequenceScorer& scorer, std::span<const TokenId> input_ids, const CodeTrie& trie,
                       const BeamOptions& options) {
  if (options.beam_size < 1) throw InvalidArgument("beam_size must be >= 1");
  if (trie.size() == 0) throw InvalidArgument("beam search over an empty trie");
  auto session = scorer.start(input_ids);
  const int vocab = scorer.vocab_size();
  std::vector<Hypothesis> beam{{{Vocabulary::kBos}, 0.0, CodeTrie::root()}};
  std::vector<std::vector<TokenId>> prefixes;
  std::vector<Candidate> candidates;

  for (int step = 0; step < trie.levels(); ++step) {
    prefixes.clear();
    for (const auto& h : beam) prefixes.push_back(h.tokens);
    const Matrix log_probs = session->next_log_probs(prefixes);
    candidates.clear();
    for (std::size_t i = 0; i < beam.size(); ++i) {
      const auto& h = beam[i];
      if (options.constrained) {
        for (const auto& e : trie.children(h.node)) {
          candidates.push_back({i, e.token, h.score + log_probs(i, e.token), e.node});
        }
      } else {
        for (TokenId t = 0; t < vocab; ++t) {
          const int node = h.node >= 0 ? trie.child(h.node, t) : -1;
          candidates.push_back({i, t, h.score + log_probs(i, t), node});
        }
      }
    }
    // Ties resolve by token sequence so the result never depends on candidate order.
    const auto better = [&](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      const auto& pa = beam[a.parent].tokens;
      const auto& pb = beam[b.parent].tokens;
      if (pa != pb) return pa < pb;
      return a.token < b.token;
    };
    const std::size_t keep = std::min<std::size_t>(options.beam_size, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + keep, candidates.end(), better);
    std::vector<Hypothesis> next;
    next.reserve(keep);
    for (std::size_t c = 0; c < keep; ++c) {
      const auto& cand = candidates[c];
      Hypothesis h{beam[cand.parent].tokens, cand.score, cand.node};
      h.tokens.push_back(cand.token);
      next.push_back(std::move(h));
    }
    beam = std::move(next);
  }

  RankedList out;
  out.tag = modality_name(trie.modality());
  for (const auto& h : beam) {
    const ItemId* item = h.node >= 0 ? trie.item(h.node) : nullptr;
    if (item) {
      out.items.push_back({*item, h.score});
    } else {
      ++out.invalid_sequences;
    }
  }
  sort_ranked(out.items);
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and fusion

RankedList normalize_scores(const RankedList& list) {
  if (list.items.empty()) throw InvalidArgument("normalize_scores: empty list");
  double top = -std::numeric_limits<double>::infinity();
  for (const auto& s : list.items) {
    if (!std::isfinite(s.score)) throw InvalidArgument("normalize_scores: non-finite score for '" + s.item + "'");
    top = std::max(top, s.score);
  }
  RankedList out = list;
  for (auto& s : out.items) s.score = std::exp(s.score - top);
  sort_ranked(out.items);
  return out;
}

RankedList rerank(const RankedList& text, const RankedList& image) {
  std::map<ItemId, std::pair<std::optional<double>, std::optional<double>>> scores;
  auto collect = [&](const RankedList& list, bool is_text) {
    for (const auto& s : list.items) {
      if (!(s.score >= 0.0 && s.score <= 1.0)) {
        throw InvalidArgument("rerank: score " + std::to_string(s.score) + " of '" + s.item +
                              "' lies outside [0, 1]; normalize first");
      }
      auto& slot = scores[s.item];
      (is_text ? slot.first : slot.second) = s.score;
    }
  };
  collect(text, true);
  collect(image, false);
  RankedList out;
  out.tag = "fused";
  for (const auto& [item, pair] : scores) {
    const auto& [t, v] = pair;
    const double fused = t && v ? (*t + *v) / 2.0 + 1.0 : (t ? *t : *v);
    out.items.push_back({item, fused});
  }
  sort_ranked(out.items);
  return out;
}

// ---------------------------------------------------------------------------
// Ranking files

void write_rankings(std::span<const UserRanking> rankings, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  std::string line;
  for (const auto& r : rankings) {
    line = r.user + '\t' + r.task + '\t';
    for (std::size_t i = 0; i < r.list.items.size(); ++i) {
      if (i) line += ',';
      line += r.list.items[i].item;
      line += ':';
      append_double(line, r.list.items[i].score);
    }
    line += '\n';
    out << line;
  }
}

std::vector<UserRanking> read_rankings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  std::vector<UserRanking> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto parts = split(line, '\t');
    if (parts.size() != 3) throw ParseError(path.string(), line_no, "expected 3 tab-separated fields");
    UserRanking r{std::string(parts[0]), std::string(parts[1]), {}};
    r.list.tag = r.task;
    if (!parts[2].empty()) {
      for (auto entry : split(parts[2], ',')) {
        const auto colon = entry.rfind(':');
        double score = 0.0;
        if (colon == std::string_view::npos || !parse_double(entry.substr(colon + 1), score)) {
          throw ParseError(path.string(), line_no, "bad entry '" + std::string(entry) + "'");
        }
        r.list.items.push_back({std::string(entry.substr(0, colon)), score});
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace mqlrec
