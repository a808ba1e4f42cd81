// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end configuration and the in-memory pipeline stages shared by the
// command-line tool and the experiment harness.
//
// Config files are INI documents whose sections mirror the fields below:
//   [run] [paths] [synth] [data] [rqvae] [rqvae_text] [rqvae_image] [model]
//   [pretrain] [finetune] [tasks] [eval]
// Keys not present keep the value of the selected profile.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mqlrec/corpus.hpp"
#include "mqlrec/data_ingest.hpp"
#include "mqlrec/evaluate.hpp"
#include "mqlrec/generate.hpp"
#include "mqlrec/quantlang.hpp"
#include "mqlrec/rqvae.hpp"
#include "mqlrec/seq2seq.hpp"

namespace mqlrec {

enum class Profile { Paper, Desk };
Profile parse_profile(std::string_view name);
std::string_view profile_name(Profile profile);

struct PipelineConfig {
  Profile profile = Profile::Desk;
  std::filesystem::path work_dir = "work";
  /// Inputs; empty paths default to the files `synth` writes into work_dir.
  std::filesystem::path text_embeddings;
  std::filesystem::path image_embeddings;
  std::filesystem::path interactions;
  std::filesystem::path pretrain_interactions;

  SynthConfig synth;
  /// Source domains written by `synth` next to the target domain; they share
  /// the target's cluster geometry.
  int source_domains = 2;
  std::size_t source_users = 1000;
  std::size_t source_items = 1000;

  RqVaeConfig text_rqvae;
  RqVaeConfig image_rqvae;
  ModelConfig model;
  TrainSchedule pretrain;
  TrainSchedule finetune;
  std::vector<TaskKind> pretrain_tasks = {TaskKind::NigText, TaskKind::NigImage};
  std::vector<TaskKind> finetune_tasks = {kAllTasks.begin(), kAllTasks.end()};
  /// Fine-tuning starts from the pre-trained checkpoint instead of a fresh model.
  bool finetune_from_pretrain = false;
  EvalOptions eval;
  InteractionLoadOptions load;
  std::size_t max_history = 20;
  std::uint64_t seed = 0;

  static PipelineConfig defaults(Profile profile);
  /// Overrides `seed` here and in every nested config that carries one.
  void apply_seed(std::uint64_t seed);
  nlohmann::json to_json() const;
  /// Throws InvalidArgument on inconsistent settings (stage-task sets, sizes).
  void validate() const;
};

/// Profile defaults overlaid with the INI file at `path` (if non-empty).
/// Throws ParseError on unknown sections, keys or malformed values.
PipelineConfig load_pipeline_config(const std::filesystem::path& path, Profile profile);

/// Synthetic target domain plus source domains sharing its centre seed.
struct SyntheticDomains {
  SyntheticData target;
  std::vector<SyntheticData> sources;
};
SyntheticDomains make_synthetic_domains(const PipelineConfig& config);

/// Row-wise concatenation; throws InvalidArgument on duplicate ids or
/// mismatched modality or dimension.
EmbeddingMatrix concat_embeddings(std::span<const EmbeddingMatrix> parts);
InteractionDataset concat_interactions(std::span<const InteractionDataset> parts);

/// Quantizes every item with both translators and resolves collisions.
struct Tokenization {
  Vocabulary vocab;
  ItemCodeTable codes;
  UsageStats text_usage;
  UsageStats image_usage;
};
Tokenization tokenize_items(const QuantTranslator& text, const QuantTranslator& image,
                            const EmbeddingMatrix& text_embeddings, const EmbeddingMatrix& image_embeddings);

/// Example sets for `tasks` over one interaction dataset.
std::vector<TaskExamples> build_tasks(const InteractionDataset& dataset, const Tokenization& tokens,
                                      std::span<const TaskKind> tasks, std::size_t max_history);

/// Distinct items of a dataset in id order (the ranking universe of a domain).
std::vector<ItemId> dataset_items(const InteractionDataset& dataset);

/// Model config for a vocabulary: the profile's architecture sized to `vocab`.
ModelConfig model_config_for(const PipelineConfig& config, const Vocabulary& vocab);

}  // namespace mqlrec
