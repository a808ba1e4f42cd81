// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "mqlrec/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include <spdlog/spdlog.h>

#include "mqlrec/error.hpp"
#include "mqlrec/text_io.hpp"

namespace mqlrec {

namespace {
constexpr std::array<std::string_view, kTaskCount> kTaskNames = {
    "NIG_Text", "NIG_Image", "AIG_Text", "AIG_Image", "QLA_TextToImage", "QLA_ImageToText"};
}

std::string_view task_name(TaskKind task) { return kTaskNames[task_index(task)]; }

TaskKind parse_task(std::string_view name) {
  for (int i = 0; i < kTaskCount; ++i) {
    if (kTaskNames[i] == name) return static_cast<TaskKind>(i);
  }
  throw InvalidArgument("unknown task '" + std::string(name) + "'");
}

Modality input_modality(TaskKind task) {
  switch (task) {
    case TaskKind::NigText:
    case TaskKind::AigImage:
    case TaskKind::QlaTextToImage:
      return Modality::Text;
    default:
      return Modality::Image;
  }
}

Modality output_modality(TaskKind task) {
  switch (task) {
    case TaskKind::NigText:
    case TaskKind::AigText:
    case TaskKind::QlaImageToText:
      return Modality::Text;
    default:
      return Modality::Image;
  }
}

bool is_next_item_task(TaskKind task) {
  return task != TaskKind::QlaTextToImage && task != TaskKind::QlaImageToText;
}

std::string_view stage_name(Stage stage) { return stage == Stage::Pretrain ? "pretrain" : "finetune"; }

Stage parse_stage(std::string_view name) {
  if (name == "pretrain") return Stage::Pretrain;
  if (name == "finetune") return Stage::Finetune;
  throw InvalidArgument("unknown stage '" + std::string(name) + "'");
}

bool stage_allows(Stage stage, TaskKind task) {
  return stage == Stage::Finetune || task == TaskKind::NigText || task == TaskKind::NigImage;
}

LeaveOneOutSplit split_leave_one_out(const InteractionDataset& dataset) {
  LeaveOneOutSplit split;
  for (const auto& u : dataset.users) {
    const auto n = u.items.size();
    if (n < 3) {
      split.warnings.push_back("user '" + u.user + "' excluded from split: " + std::to_string(n) +
                               " items < 3");
      spdlog::warn("{}", split.warnings.back());
      continue;
    }
    split.users.push_back({u.user, {u.items.begin(), u.items.end() - 2}, u.items[n - 2], u.items[n - 1]});
  }
  return split;
}

namespace {

std::vector<TokenId> history_tokens(std::span<const ItemId> history, const ModalityCodeTable& codes,
                                    const Vocabulary& vocab, TaskKind task, std::size_t max_history) {
  const auto prompt = vocab.prompt_tokens(task_index(task));
  std::vector<TokenId> ids(prompt.begin(), prompt.end());
  const std::size_t start = history.size() > max_history ? history.size() - max_history : 0;
  for (std::size_t i = start; i < history.size(); ++i) {
    const auto t = vocab.encode_tuple(codes.modality(), codes.code(history[i]));
    ids.insert(ids.end(), t.begin(), t.end());
  }
  return ids;
}

std::vector<TokenId> target_tokens(const ItemId& item, const ModalityCodeTable& codes, const Vocabulary& vocab) {
  auto ids = vocab.encode_tuple(codes.modality(), codes.code(item));
  ids.push_back(Vocabulary::kEos);
  return ids;
}

TaskExamples build_sequential(const LeaveOneOutSplit& split, const ItemCodeTable& table,
                              const Vocabulary& vocab, TaskKind task, std::size_t max_history) {
  if (vocab.task_count() <= task_index(task)) throw InvalidArgument("vocabulary lacks prompt tokens for task");
  const auto& in_codes = table.get(input_modality(task));
  const auto& out_codes = table.get(output_modality(task));
  TaskExamples out;
  out.task = task;
  auto make = [&](const UserSplit& u, std::span<const ItemId> history, const ItemId& target) {
    return TaskExample{task, history_tokens(history, in_codes, vocab, task, max_history),
                       target_tokens(target, out_codes, vocab), u.user, target};
  };
  for (const auto& u : split.users) {
    const auto& prefix = u.train_prefix;
    for (std::size_t t = 1; t < prefix.size(); ++t) {
      if (prefix[t] == u.valid_target || prefix[t] == u.test_target) continue;
      out.train.push_back(make(u, std::span(prefix).first(t), prefix[t]));
    }
    out.valid.push_back(make(u, prefix, u.valid_target));
    std::vector<ItemId> test_history = prefix;
    test_history.push_back(u.valid_target);
    out.test.push_back(make(u, test_history, u.test_target));
  }
  return out;
}

}  // namespace

TaskExamples build_nig(const LeaveOneOutSplit& split, const ItemCodeTable& table, const Vocabulary& vocab,
                       Modality modality, const CorpusOptions& options) {
  return build_sequential(split, table, vocab,
                          modality == Modality::Text ? TaskKind::NigText : TaskKind::NigImage,
                          options.max_history);
}

TaskExamples build_aig(const LeaveOneOutSplit& split, const ItemCodeTable& table, const Vocabulary& vocab,
                       TaskKind direction, const CorpusOptions& options) {
  if (direction != TaskKind::AigText && direction != TaskKind::AigImage) {
    throw InvalidArgument("build_aig direction must be AIG_Text or AIG_Image");
  }
  return build_sequential(split, table, vocab, direction, options.max_history);
}

TaskExamples build_qla(const LeaveOneOutSplit& split, const ItemCodeTable& table, const Vocabulary& vocab,
                       TaskKind direction) {
  if (direction != TaskKind::QlaTextToImage && direction != TaskKind::QlaImageToText) {
    throw InvalidArgument("build_qla direction must be QLA_TextToImage or QLA_ImageToText");
  }
  std::set<ItemId> items;
  for (const auto& u : split.users) items.insert(u.train_prefix.begin(), u.train_prefix.end());
  const auto& in_codes = table.get(input_modality(direction));
  const auto& out_codes = table.get(output_modality(direction));
  TaskExamples out;
  out.task = direction;
  for (const auto& item : items) {
    const ItemId one[] = {item};
    out.train.push_back({direction, history_tokens(one, in_codes, vocab, direction, 1),
                         target_tokens(item, out_codes, vocab), kNoUser, item});
  }
  return out;
}

TaskExamples build_task(TaskKind task, const LeaveOneOutSplit& split, const ItemCodeTable& table,
                        const Vocabulary& vocab, const CorpusOptions& options) {
  switch (task) {
    case TaskKind::NigText:
      return build_nig(split, table, vocab, Modality::Text, options);
    case TaskKind::NigImage:
      return build_nig(split, table, vocab, Modality::Image, options);
    case TaskKind::AigText:
    case TaskKind::AigImage:
      return build_aig(split, table, vocab, task, options);
    default:
      return build_qla(split, table, vocab, task);
  }
}

SplitDataset assemble_stage(Stage stage, std::span<const TaskExamples> tasks, std::uint64_t seed) {
  SplitDataset ds;
  ds.stage = stage;
  for (const auto& t : tasks) {
    if (!stage_allows(stage, t.task)) {
      throw InvalidArgument("task " + std::string(task_name(t.task)) + " is not allowed in stage " +
                            std::string(stage_name(stage)));
    }
    ds.train.insert(ds.train.end(), t.train.begin(), t.train.end());
    ds.valid.insert(ds.valid.end(), t.valid.begin(), t.valid.end());
    ds.test.insert(ds.test.end(), t.test.begin(), t.test.end());
    ds.task_mix[t.task] += t.train.size();
  }
  std::mt19937_64 rng(seed);
  std::shuffle(ds.train.begin(), ds.train.end(), rng);
  for (const auto& [task, count] : ds.task_mix) {
    spdlog::info("{} stage: {} train examples of {}", stage_name(stage), count, task_name(task));
  }
  return ds;
}

void write_examples(std::span<const TaskExample> examples, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  std::string line;
  for (const auto& e : examples) {
    line.assign(task_name(e.task));
    line += '\t';
    line += e.user;
    line += '\t';
    for (std::size_t i = 0; i < e.input_ids.size(); ++i) {
      if (i) line += ' ';
      line += std::to_string(e.input_ids[i]);
    }
    line += '\t';
    for (std::size_t i = 0; i < e.target_ids.size(); ++i) {
      if (i) line += ' ';
      line += std::to_string(e.target_ids[i]);
    }
    line += '\n';
    out << line;
  }
}

std::vector<TaskExample> read_examples(const std::filesystem::path& path, const Vocabulary& vocab,
                                       const ItemCodeTable& table) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  std::vector<TaskExample> out;
  std::string line;
  std::size_t line_no = 0;
  auto parse_ids = [&](std::string_view field) {
    std::vector<TokenId> ids;
    for (auto tok : split_whitespace(field)) {
      TokenId id = 0;
      if (!parse_int(tok, id) || id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
        throw ParseError(path.string(), line_no, "bad token id '" + std::string(tok) + "'");
      }
      ids.push_back(id);
    }
    return ids;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto parts = split(line, '\t');
    if (parts.size() != 4) throw ParseError(path.string(), line_no, "expected 4 tab-separated fields");
    TaskExample e;
    try {
      e.task = parse_task(parts[0]);
    } catch (const Error& err) {
      throw ParseError(path.string(), line_no, err.what());
    }
    e.user = std::string(parts[1]);
    e.input_ids = parse_ids(parts[2]);
    e.target_ids = parse_ids(parts[3]);
    if (e.target_ids.empty() || e.target_ids.back() != Vocabulary::kEos) {
      throw ParseError(path.string(), line_no, "target must end with EOS");
    }
    try {
      const auto [m, code] = vocab.decode_tuple(std::span(e.target_ids).first(e.target_ids.size() - 1));
      const auto item = table.get(m).item_at(code);
      if (!item) throw ParseError(path.string(), line_no, "target tuple maps to no item");
      e.target_item = *item;
    } catch (const TokenError& err) {
      throw ParseError(path.string(), line_no, err.what());
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace mqlrec
