// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "mqlrec/evaluate.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "mqlrec/error.hpp"
#include "mqlrec/text_io.hpp"

namespace mqlrec {

double recall_at_k(const RankedList& ranked, const ItemId& target, int k) {
  if (k < 1) throw InvalidArgument("K must be >= 1");
  const auto rank = ranked.rank_of(target);
  return rank && *rank <= static_cast<std::size_t>(k) ? 1.0 : 0.0;
}

double ndcg_at_k(const RankedList& ranked, const ItemId& target, int k) {
  if (k < 1) throw InvalidArgument("K must be >= 1");
  const auto rank = ranked.rank_of(target);
  if (!rank || *rank > static_cast<std::size_t>(k)) return 0.0;
  return 1.0 / std::log2(static_cast<double>(*rank) + 1.0);
}

const MetricRow* MetricsReport::find(std::string_view task) const {
  for (const auto& r : rows) {
    if (r.task == task) return &r;
  }
  return nullptr;
}

namespace {

struct Accumulator {
  std::size_t users = 0;
  std::array<double, kCutoffs.size()> recall{};
  std::array<double, kCutoffs.size()> ndcg{};

  void add(const RankedList& list, const ItemId& target) {
    ++users;
    for (std::size_t i = 0; i < kCutoffs.size(); ++i) {
      recall[i] += recall_at_k(list, target, kCutoffs[i]);
      ndcg[i] += ndcg_at_k(list, target, kCutoffs[i]);
    }
  }

  MetricRow row(std::string task) const {
    MetricRow r{std::move(task), users, recall, ndcg};
    for (std::size_t i = 0; i < kCutoffs.size(); ++i) {
      r.recall[i] /= static_cast<double>(users);
      r.ndcg[i] /= static_cast<double>(users);
    }
    return r;
  }
};

}  // namespace

MetricsReport evaluate_run(const SequenceScorer& scorer, const CodeTrie& text_trie, const CodeTrie& image_trie,
                           std::span<const TaskExample> test, const EvalOptions& options,
                           std::vector<UserRanking>* rankings) {
  if (test.empty()) throw InvalidArgument("evaluation needs a non-empty test split");
  const std::set<TaskKind> wanted(options.tasks.begin(), options.tasks.end());
  if (options.rerank && (!wanted.contains(TaskKind::NigText) || !wanted.contains(TaskKind::NigImage))) {
    throw InvalidArgument("re-ranking needs both NIG_Text and NIG_Image");
  }
  const BeamOptions beam{options.beam_size, options.constrained};

  std::map<TaskKind, Accumulator> per_task;
  std::map<UserId, std::pair<std::optional<RankedList>, std::optional<RankedList>>> nig_lists;
  std::map<UserId, ItemId> nig_targets;
  std::set<UserId> users;

  for (const auto& ex : test) {
    if (!wanted.contains(ex.task)) continue;
    const CodeTrie& trie = output_modality(ex.task) == Modality::Text ? text_trie : image_trie;
    RankedList list = beam_search(scorer, ex.input_ids, trie, beam);
    list.tag = std::string(task_name(ex.task));
    per_task[ex.task].add(list, ex.target_item);
    users.insert(ex.user);
    if (options.rerank && (ex.task == TaskKind::NigText || ex.task == TaskKind::NigImage)) {
      auto& slot = nig_lists[ex.user];
      (ex.task == TaskKind::NigText ? slot.first : slot.second) = list;
      nig_targets[ex.user] = ex.target_item;
    }
    if (rankings) rankings->push_back({ex.user, list.tag, std::move(list)});
  }

  MetricsReport report;
  report.user_count = users.size();
  for (TaskKind t : options.tasks) {
    const auto it = per_task.find(t);
    if (it == per_task.end()) {
      throw InvalidArgument("test split has no examples of task " + std::string(task_name(t)));
    }
    report.rows.push_back(it->second.row(std::string(task_name(t))));
  }
  if (options.rerank) {
    Accumulator fused;
    for (const auto& [user, lists] : nig_lists) {
      if (!lists.first || !lists.second) continue;
      const RankedList empty;
      const RankedList text = lists.first->items.empty() ? empty : normalize_scores(*lists.first);
      const RankedList image = lists.second->items.empty() ? empty : normalize_scores(*lists.second);
      RankedList f = rerank(text, image);
      f.tag = std::string(kFusedTask);
      fused.add(f, nig_targets.at(user));
      if (rankings) rankings->push_back({user, f.tag, std::move(f)});
    }
    if (fused.users == 0) throw InvalidArgument("no user has both NIG_Text and NIG_Image test examples");
    report.rows.push_back(fused.row(std::string(kFusedTask)));
  }
  report.config = {{"beam_size", options.beam_size},
                   {"constrained", options.constrained},
                   {"rerank", options.rerank}};
  return report;
}

// ---------------------------------------------------------------------------
// Report I/O

nlohmann::json report_to_json(const MetricsReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    nlohmann::json recall, ndcg;
    for (std::size_t i = 0; i < kCutoffs.size(); ++i) {
      recall[std::to_string(kCutoffs[i])] = r.recall[i];
      ndcg[std::to_string(kCutoffs[i])] = r.ndcg[i];
    }
    rows.push_back({{"task", r.task}, {"users", r.users}, {"recall", recall}, {"ndcg", ndcg}});
  }
  return {{"label", report.label},
          {"seed", report.seed},
          {"user_count", report.user_count},
          {"config", report.config},
          {"rows", rows}};
}

MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.label = j.at("label").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.user_count = j.at("user_count").get<std::size_t>();
  r.config = j.at("config");
  for (const auto& row : j.at("rows")) {
    MetricRow m;
    m.task = row.at("task").get<std::string>();
    m.users = row.at("users").get<std::size_t>();
    for (std::size_t i = 0; i < kCutoffs.size(); ++i) {
      m.recall[i] = row.at("recall").at(std::to_string(kCutoffs[i])).get<double>();
      m.ndcg[i] = row.at("ndcg").at(std::to_string(kCutoffs[i])).get<double>();
    }
    r.rows.push_back(std::move(m));
  }
  return r;
}

void write_report_json(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  out << report_to_json(report).dump(2) << '\n';
}

MetricsReport read_report_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  try {
    return report_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), 0, std::string("malformed report: ") + e.what());
  }
}

namespace {

void write_metric_header(std::ofstream& out, std::string_view suffix) {
  for (const char* name : {"recall", "ndcg"}) {
    for (int k : kCutoffs) out << '\t' << name << '@' << k << suffix;
  }
}

std::string fmt(double v) {
  std::string s;
  append_double(s, v);
  return s;
}

}  // namespace

void write_report_tsv(std::span<const MetricsReport> reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  out << "label\tseed\ttask\tusers";
  write_metric_header(out, "");
  out << '\n';
  for (const auto& rep : reports) {
    for (const auto& r : rep.rows) {
      out << rep.label << '\t' << rep.seed << '\t' << r.task << '\t' << r.users;
      for (double v : r.recall) out << '\t' << fmt(v);
      for (double v : r.ndcg) out << '\t' << fmt(v);
      out << '\n';
    }
  }
}

std::pair<double, double> mean_and_std(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

std::vector<AggregateRow> aggregate_reports(std::span<const MetricsReport> reports) {
  // Preserve first-seen order of (label, task) pairs.
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::vector<const MetricRow*>> groups;
  for (const auto& rep : reports) {
    for (const auto& r : rep.rows) {
      auto key = std::make_pair(rep.label, r.task);
      auto& g = groups[key];
      if (g.empty()) order.push_back(key);
      g.push_back(&r);
    }
  }
  std::vector<AggregateRow> out;
  for (const auto& key : order) {
    const auto& g = groups.at(key);
    AggregateRow row{key.first, key.second, g.size(), {}, {}, {}, {}};
    for (std::size_t i = 0; i < kCutoffs.size(); ++i) {
      std::vector<double> rec, nd;
      for (const auto* r : g) {
        rec.push_back(r->recall[i]);
        nd.push_back(r->ndcg[i]);
      }
      std::tie(row.recall_mean[i], row.recall_std[i]) = mean_and_std(rec);
      std::tie(row.ndcg_mean[i], row.ndcg_std[i]) = mean_and_std(nd);
    }
    out.push_back(std::move(row));
  }
  return out;
}

void write_aggregate_tsv(std::span<const AggregateRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  out << "label\ttask\truns";
  write_metric_header(out, "_mean");
  write_metric_header(out, "_std");
  out << '\n';
  for (const auto& r : rows) {
    out << r.label << '\t' << r.task << '\t' << r.runs;
    for (double v : r.recall_mean) out << '\t' << fmt(v);
    for (double v : r.ndcg_mean) out << '\t' << fmt(v);
    for (double v : r.recall_std) out << '\t' << fmt(v);
    for (double v : r.ndcg_std) out << '\t' << fmt(v);
    out << '\n';
  }
}

}  // namespace mqlrec
