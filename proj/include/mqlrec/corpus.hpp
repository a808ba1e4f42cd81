// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Leave-one-out splitting and the six generation tasks:
//   NIG  next item, same modality in and out       (NIG_Text, NIG_Image)
//   AIG  next item, history in the other modality  (AIG_Text, AIG_Image)
//   QLA  one item's tokens translated across modalities
// Example file, one per line:
//   <task>\t<user>\t<input ids space-separated>\t<target ids space-separated>

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mqlrec/data_ingest.hpp"
#include "mqlrec/quantlang.hpp"

namespace mqlrec {

enum class TaskKind { NigText, NigImage, AigText, AigImage, QlaTextToImage, QlaImageToText };

inline constexpr int kTaskCount = 6;
inline constexpr std::array<TaskKind, kTaskCount> kAllTasks = {
    TaskKind::NigText, TaskKind::NigImage,        TaskKind::AigText,
    TaskKind::AigImage, TaskKind::QlaTextToImage, TaskKind::QlaImageToText};

std::string_view task_name(TaskKind task);
TaskKind parse_task(std::string_view name);
inline int task_index(TaskKind task) { return static_cast<int>(task); }
Modality input_modality(TaskKind task);
Modality output_modality(TaskKind task);
bool is_next_item_task(TaskKind task);

enum class Stage { Pretrain, Finetune };
std::string_view stage_name(Stage stage);
Stage parse_stage(std::string_view name);
bool stage_allows(Stage stage, TaskKind task);

/// Placeholder user for QLA examples, which belong to no user.
inline const UserId kNoUser = "*";

struct TaskExample {
  TaskKind task = TaskKind::NigText;
  std::vector<TokenId> input_ids;
  std::vector<TokenId> target_ids;
  UserId user;
  ItemId target_item;
  bool operator==(const TaskExample&) const = default;
};

struct UserSplit {
  UserId user;
  std::vector<ItemId> train_prefix;
  ItemId valid_target;
  ItemId test_target;
};

struct LeaveOneOutSplit {
  std::vector<UserSplit> users;
  std::vector<std::string> warnings;
};

/// Last item is the test target, the one before it the validation target;
/// users with fewer than three items are dropped with a warning.
LeaveOneOutSplit split_leave_one_out(const InteractionDataset& dataset);

struct TaskExamples {
  TaskKind task = TaskKind::NigText;
  std::vector<TaskExample> train;
  std::vector<TaskExample> valid;
  std::vector<TaskExample> test;
};

struct CorpusOptions {
  std::size_t max_history = 20;
};

/// Next-item examples in one modality. Train examples target every train
/// prefix position t >= 1 whose item is neither validation nor test target.
TaskExamples build_nig(const LeaveOneOutSplit& split, const ItemCodeTable& table, const Vocabulary& vocab,
                       Modality modality, const CorpusOptions& options = {});
/// `direction` is TaskKind::AigText (image history -> text target) or
/// TaskKind::AigImage (text history -> image target).
TaskExamples build_aig(const LeaveOneOutSplit& split, const ItemCodeTable& table, const Vocabulary& vocab,
                       TaskKind direction, const CorpusOptions& options = {});
/// One train example per item seen in any train prefix, ordered by item id.
TaskExamples build_qla(const LeaveOneOutSplit& split, const ItemCodeTable& table, const Vocabulary& vocab,
                       TaskKind direction);

/// Builds whichever task `task` is.
TaskExamples build_task(TaskKind task, const LeaveOneOutSplit& split, const ItemCodeTable& table,
                        const Vocabulary& vocab, const CorpusOptions& options = {});

struct SplitDataset {
  Stage stage = Stage::Finetune;
  std::vector<TaskExample> train;
  std::vector<TaskExample> valid;
  std::vector<TaskExample> test;
  std::map<TaskKind, std::size_t> task_mix;
};

/// Concatenates task example sets; train is shuffled with `seed`. Throws
/// InvalidArgument when a task is not allowed in `stage`.
SplitDataset assemble_stage(Stage stage, std::span<const TaskExamples> tasks, std::uint64_t seed);

void write_examples(std::span<const TaskExample> examples, const std::filesystem::path& path);
/// Target items are recovered from the target tokens through `table`.
std::vector<TaskExample> read_examples(const std::filesystem::path& path, const Vocabulary& vocab,
                                       const ItemCodeTable& table);

}  // namespace mqlrec
