// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations shared by the unit tests and the
// acceptance harness. Each oracle is written for clarity, not speed, and
// shares no code path with the library routine it checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mqlrec/common.hpp"
#include "mqlrec/generate.hpp"
#include "mqlrec/quantlang.hpp"
#include "mqlrec/rqvae.hpp"
#include "mqlrec/seq2seq.hpp"

namespace mqlrec::testing {

// ---------------------------------------------------------------------------
// Quantization

/// Per-level exhaustive argmin over squared distances; the first minimum wins.
inline CodeTuple brute_force_quantize(std::span<const Matrix> codebooks, const Vector& z) {
  CodeTuple code;
  Vector r = z;
  for (const auto& book : codebooks) {
    std::vector<double> d(book.rows());
    for (Eigen::Index k = 0; k < book.rows(); ++k) d[k] = (r - book.row(k).transpose()).squaredNorm();
    const int best = static_cast<int>(std::min_element(d.begin(), d.end()) - d.begin());
    code.push_back(best);
    r -= book.row(best).transpose();
  }
  return code;
}

/// Values on a 1/64 grid in [-4, 4]: sums of a few dozen squares are exact in
/// binary64, so every summation order yields identical distances and ties.
inline double dyadic(std::mt19937_64& rng, int half_range_steps = 256) {
  std::uniform_int_distribution<int> d(-half_range_steps, half_range_steps);
  return d(rng) / 64.0;
}

// ---------------------------------------------------------------------------
// Collision resolution

/// Rank of each code at each level: rank[l][code] in the item's ascending
/// distance order, ties by smaller code.
inline std::vector<std::vector<int>> distance_ranks(const Matrix& level_distances) {
  const int levels = static_cast<int>(level_distances.rows());
  const int k = static_cast<int>(level_distances.cols());
  std::vector<std::vector<int>> rank(levels, std::vector<int>(k));
  for (int l = 0; l < levels; ++l) {
    std::vector<int> order(k);
    for (int c = 0; c < k; ++c) order[c] = c;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return level_distances(l, a) < level_distances(l, b); });
    for (int r = 0; r < k; ++r) rank[l][order[r]] = r;
  }
  return rank;
}

inline std::vector<CodeTuple> all_tuples(int levels, int k) {
  std::vector<CodeTuple> out;
  CodeTuple t(levels, 0);
  while (true) {
    out.push_back(t);
    int l = levels - 1;
    while (l >= 0 && ++t[l] == k) t[l--] = 0;
    if (l < 0) break;
  }
  return out;
}

/// Enumerates every free tuple for each displaced item and keeps the one that
/// shares the longest prefix with the item's original tuple, then has the
/// lexicographically smallest per-level distance-rank vector. Items are
/// visited in the documented order: the closest member of every collision
/// group keeps its tuple, the others follow group by group.
/// Returns an empty map when some item finds no free tuple.
inline std::map<ItemId, CodeTuple> collision_oracle(std::span<const std::pair<ItemId, QuantizationResult>> results,
                                                    int k, int levels) {
  std::map<CodeTuple, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < results.size(); ++i) groups[results[i].second.code].push_back(i);
  std::map<ItemId, CodeTuple> assigned;
  std::set<CodeTuple> occupied;
  std::vector<std::size_t> displaced;
  for (auto& [tuple, members] : groups) {
    auto key = [&](std::size_t i) {
      return std::pair(results[i].second.level_distances.row(levels - 1).minCoeff(), results[i].first);
    };
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
    assigned[results[members[0]].first] = tuple;
    occupied.insert(tuple);
    displaced.insert(displaced.end(), members.begin() + 1, members.end());
  }
  const auto universe = all_tuples(levels, k);
  for (std::size_t i : displaced) {
    const auto& q = results[i].second;
    const auto rank = distance_ranks(q.level_distances);
    const CodeTuple* best = nullptr;
    std::pair<int, std::vector<int>> best_key;
    for (const auto& t : universe) {
      if (occupied.contains(t)) continue;
      int common = 0;
      while (common < levels && t[common] == q.code[common]) ++common;
      std::vector<int> ranks(levels);
      for (int l = 0; l < levels; ++l) ranks[l] = rank[l][t[l]];
      std::pair<int, std::vector<int>> key{-common, ranks};
      if (!best || key < best_key) {
        best = &t;
        best_key = std::move(key);
      }
    }
    if (!best) return {};
    assigned[results[i].first] = *best;
    occupied.insert(*best);
  }
  return assigned;
}

/// A quantization result carrying only what collision resolution reads.
inline QuantizationResult fake_result(CodeTuple code, Matrix level_distances) {
  QuantizationResult q;
  q.code = std::move(code);
  q.level_distances = std::move(level_distances);
  return q;
}

/// Random stress table: `n` items whose tuples are drawn from a small pool so
/// that collisions are frequent; distances are random with occasional ties.
inline std::vector<std::pair<ItemId, QuantizationResult>> random_collision_table(std::mt19937_64& rng, int k,
                                                                                 int levels, std::size_t n,
                                                                                 int pool) {
  std::uniform_int_distribution<int> code_dist(0, k - 1);
  std::vector<CodeTuple> tuples(pool);
  for (auto& t : tuples) {
    t.resize(levels);
    for (auto& c : t) c = code_dist(rng);
  }
  std::uniform_int_distribution<int> pick(0, pool - 1);
  std::uniform_int_distribution<int> coarse(0, 7);
  std::vector<std::pair<ItemId, QuantizationResult>> out;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix d(levels, k);
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
      for (Eigen::Index c = 0; c < d.cols(); ++c) d(r, c) = coarse(rng) * 0.25;
    }
    char id[32];
    std::snprintf(id, sizeof id, "it%04zu", i);
    out.emplace_back(id, fake_result(tuples[pick(rng)], std::move(d)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ranking and metrics

inline double reference_recall(const std::vector<ItemId>& ranked, const ItemId& target, int k) {
  for (int i = 0; i < k && i < static_cast<int>(ranked.size()); ++i) {
    if (ranked[i] == target) return 1.0;
  }
  return 0.0;
}

inline double reference_ndcg(const std::vector<ItemId>& ranked, const ItemId& target, int k) {
  // Textbook DCG / IDCG with binary relevance; the ideal list has the single
  // relevant item first.
  double dcg = 0.0;
  for (int i = 0; i < k && i < static_cast<int>(ranked.size()); ++i) {
    const double rel = ranked[i] == target ? 1.0 : 0.0;
    dcg += rel / std::log2(static_cast<double>(i) + 2.0);
  }
  const double idcg = 1.0 / std::log2(2.0);
  return dcg / idcg;
}

/// Teacher-forced score of every item in the trie: the sum of the model's
/// log-probabilities along the item's token path, in decoding order. Sorted
/// by score descending, then item id.
inline std::vector<ScoredItem> exhaustive_scores(const SequenceScorer& scorer, std::span<const TokenId> input,
                                                 const std::map<ItemId, std::vector<TokenId>>& paths) {
  auto session = scorer.start(input);
  std::vector<ScoredItem> out;
  for (const auto& [item, path] : paths) {
    std::vector<std::vector<TokenId>> prefixes;
    std::vector<TokenId> prefix{Vocabulary::kBos};
    for (TokenId t : path) {
      prefixes.push_back(prefix);
      prefix.push_back(t);
    }
    const Matrix lp = session->next_log_probs(prefixes);
    double score = 0.0;
    for (std::size_t s = 0; s < path.size(); ++s) score = score + lp(static_cast<Eigen::Index>(s), path[s]);
    out.push_back({item, score});
  }
  std::sort(out.begin(), out.end(), [](const ScoredItem& a, const ScoredItem& b) {
    return a.score != b.score ? a.score > b.score : a.item < b.item;
  });
  return out;
}

/// Deterministic pseudo-model: log-softmax of logits hashed from (input, prefix).
class HashScorer : public SequenceScorer {
 public:
  HashScorer(int vocab, std::uint64_t salt, double spread = 3.0) : vocab_(vocab), salt_(salt), spread_(spread) {}
  int vocab_size() const override { return vocab_; }
  std::unique_ptr<DecodingSession> start(std::span<const TokenId> input) const override {
    std::uint64_t h = salt_;
    for (TokenId t : input) h = mix(h ^ static_cast<std::uint64_t>(t));
    return std::make_unique<Session>(vocab_, h, spread_);
  }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }
  class Session : public DecodingSession {
   public:
    Session(int vocab, std::uint64_t h, double spread) : vocab_(vocab), h_(h), spread_(spread) {}
    Matrix next_log_probs(std::span<const std::vector<TokenId>> prefixes) override {
      Matrix out(static_cast<Eigen::Index>(prefixes.size()), vocab_);
      for (std::size_t p = 0; p < prefixes.size(); ++p) {
        std::uint64_t h = h_;
        for (TokenId t : prefixes[p]) h = mix(h ^ static_cast<std::uint64_t>(t));
        for (int v = 0; v < vocab_; ++v) {
          out(p, v) = spread_ * static_cast<double>(mix(h + static_cast<std::uint64_t>(v)) >> 11) * 0x1.0p-53;
        }
        const double mx = out.row(p).maxCoeff();
        const double lse = mx + std::log((out.row(p).array() - mx).exp().sum());
        out.row(p).array() -= lse;
      }
      return out;
    }

   private:
    int vocab_;
    std::uint64_t h_;
    double spread_;
  };
  int vocab_;
  std::uint64_t salt_;
  double spread_;
};

// ---------------------------------------------------------------------------
// Finite differences

struct GradientCheck {
  /// ||g_fd - g|| / max(||g_fd||, ||g||): whole-vector relative error.
  double relative_error = 0.0;
  /// max_i |g_fd_i - g_i| / max(1, |g_fd_i|).
  double worst_coordinate = 0.0;
  std::size_t checked = 0;
};

/// Central differences of `loss` over parameter coordinates `indices`.
inline GradientCheck check_gradient(Vector& params, const Vector& analytic, const std::vector<Eigen::Index>& indices,
                                    const std::function<double()>& loss, double step = 1e-5) {
  double diff2 = 0.0, fd2 = 0.0, an2 = 0.0;
  GradientCheck out;
  for (Eigen::Index i : indices) {
    const double saved = params[i];
    params[i] = saved + step;
    const double up = loss();
    params[i] = saved - step;
    const double down = loss();
    params[i] = saved;
    const double fd = (up - down) / (2.0 * step);
    diff2 += (fd - analytic[i]) * (fd - analytic[i]);
    fd2 += fd * fd;
    an2 += analytic[i] * analytic[i];
    out.worst_coordinate = std::max(out.worst_coordinate, std::abs(fd - analytic[i]) / std::max(1.0, std::abs(fd)));
    ++out.checked;
  }
  const double denom = std::max(std::sqrt(std::max(fd2, an2)), std::numeric_limits<double>::min());
  out.relative_error = std::sqrt(diff2) / denom;
  return out;
}

/// Every parameter index when the model is small, otherwise an even stride.
inline std::vector<Eigen::Index> sample_indices(Eigen::Index size, Eigen::Index max_count) {
  std::vector<Eigen::Index> out;
  const Eigen::Index stride = std::max<Eigen::Index>(1, size / max_count);
  for (Eigen::Index i = 0; i < size; i += stride) out.push_back(i);
  return out;
}

/// Smallest seq2seq configuration that still exercises every component.
inline ModelConfig micro_model_config(int vocab, std::uint64_t seed = 3) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.model_dim = 8;
  c.enc_layers = 1;
  c.dec_layers = 2;
  c.heads = 2;
  c.head_dim = 4;
  c.ffn_dim = 12;
  c.dropout = 0.0;
  c.max_positions = 16;
  c.seed = seed;
  return c;
}

}  // namespace mqlrec::testing
