// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Leave-one-out, full-ranking metrics (Recall@K, NDCG@K for K in {1, 5, 10})
// and run reports.
//
// Report TSV columns:
//   label seed task users recall@1 recall@5 recall@10 ndcg@1 ndcg@5 ndcg@10
// Aggregate TSV columns:
//   label task runs, then mean and std of each metric (sample std, n - 1)

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mqlrec/corpus.hpp"
#include "mqlrec/generate.hpp"

namespace mqlrec {

inline constexpr std::array<int, 3> kCutoffs = {1, 5, 10};
inline constexpr std::string_view kFusedTask = "Fused";

/// 1 when the target ranks within the top `k`, else 0. Throws InvalidArgument on k < 1.
double recall_at_k(const RankedList& ranked, const ItemId& target, int k);
/// 1 / log2(rank + 1) when rank <= k, else 0.
double ndcg_at_k(const RankedList& ranked, const ItemId& target, int k);

struct MetricRow {
  std::string task;
  std::size_t users = 0;
  std::array<double, kCutoffs.size()> recall{};
  std::array<double, kCutoffs.size()> ndcg{};
  bool operator==(const MetricRow&) const = default;
};

struct MetricsReport {
  std::string label;
  std::uint64_t seed = 0;
  std::size_t user_count = 0;
  nlohmann::json config = nlohmann::json::object();
  std::vector<MetricRow> rows;

  /// nullptr when no row carries `task`.
  const MetricRow* find(std::string_view task) const;
};

struct EvalOptions {
  int beam_size = 20;
  bool constrained = true;
  /// Adds a fused row built from the NIG_Text and NIG_Image lists.
  bool rerank = false;
  std::vector<TaskKind> tasks = {TaskKind::NigText, TaskKind::NigImage};
};

/// Beam-searches every test example of the requested tasks against the trie
/// of the task's output modality and averages metrics over users. A target
/// missing from the beam counts 0. Throws InvalidArgument on an empty test
/// split, a requested task without examples, or rerank without both NIG tasks.
MetricsReport evaluate_run(const SequenceScorer& scorer, const CodeTrie& text_trie, const CodeTrie& image_trie,
                           std::span<const TaskExample> test, const EvalOptions& options,
                           std::vector<UserRanking>* rankings = nullptr);

nlohmann::json report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);
void write_report_json(const MetricsReport& report, const std::filesystem::path& path);
MetricsReport read_report_json(const std::filesystem::path& path);
void write_report_tsv(std::span<const MetricsReport> reports, const std::filesystem::path& path);

struct AggregateRow {
  std::string label;
  std::string task;
  std::size_t runs = 0;
  std::array<double, kCutoffs.size()> recall_mean{}, recall_std{};
  std::array<double, kCutoffs.size()> ndcg_mean{}, ndcg_std{};
};

/// Groups rows by (label, task) across reports, typically one report per seed.
std::vector<AggregateRow> aggregate_reports(std::span<const MetricsReport> reports);
void write_aggregate_tsv(std::span<const AggregateRow> rows, const std::filesystem::path& path);

/// Mean and sample standard deviation (0 for fewer than two values).
std::pair<double, double> mean_and_std(std::span<const double> values);

}  // namespace mqlrec
