// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Encoder-decoder transformer over quantitative-language tokens.
//
// Pre-norm residual blocks, learned absolute positions, ReLU feed-forward,
// multi-head attention projecting model_dim -> heads * head_dim. The decoder
// reads BOS ++ target[:-1] and predicts target. PAD keys are masked out of
// every attention and PAD targets out of the loss. Forward and backward
// passes are hand-written; sequences of a batch are packed row-wise without
// padding and attention runs per sequence segment.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mqlrec/common.hpp"
#include "mqlrec/corpus.hpp"
#include "mqlrec/error.hpp"
#include "mqlrec/nn.hpp"

namespace mqlrec {

enum class PositionScheme { LearnedAbsolute };

struct ModelConfig {
  int vocab_size = 0;
  int model_dim = 128;
  int enc_layers = 4;
  int dec_layers = 4;
  int heads = 6;
  int head_dim = 64;
  int ffn_dim = 1024;
  double dropout = 0.1;
  int max_positions = 128;
  bool tie_embeddings = false;
  PositionScheme positions = PositionScheme::LearnedAbsolute;
  std::uint64_t seed = 0;

  /// 4+4 layers, 6 heads of 64, ffn 1024, model dim 128.
  static ModelConfig paper(int vocab_size);
  /// 2+2 layers, 4 heads of 16, ffn 128, model dim 64.
  static ModelConfig desk(int vocab_size);

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

class Seq2SeqModel {
 public:
  using Slot = ParameterSet::Slot;
  struct Linear {
    Slot weight;
    Slot bias;
  };
  struct Norm {
    Slot gain;
    Slot bias;
  };
  struct Attention {
    Linear q, k, v, o;
  };
  struct FeedForward {
    Linear in, out;
  };
  struct EncoderLayer {
    Norm norm1;
    Attention self_attn;
    Norm norm2;
    FeedForward ffn;
  };
  struct DecoderLayer {
    Norm norm1;
    Attention self_attn;
    Norm norm2;
    Attention cross_attn;
    Norm norm3;
    FeedForward ffn;
  };

  Seq2SeqModel() = default;
  /// Allocates and randomly initialises all parameters from `config.seed`.
  explicit Seq2SeqModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// Training stage the weights last went through ("init", "pretrain", "finetune").
  const std::string& stage_tag() const { return stage_tag_; }
  void set_stage_tag(std::string tag) { stage_tag_ = std::move(tag); }
  long steps_trained() const { return steps_trained_; }
  void add_steps(long n) { steps_trained_ += n; }

  Slot token_embedding() const { return token_embedding_; }
  Slot encoder_positions() const { return encoder_positions_; }
  Slot decoder_positions() const { return decoder_positions_; }
  const std::vector<EncoderLayer>& encoder_layers() const { return encoder_; }
  const std::vector<DecoderLayer>& decoder_layers() const { return decoder_; }
  Norm encoder_final_norm() const { return encoder_norm_; }
  Norm decoder_final_norm() const { return decoder_norm_; }
  Linear output_projection() const { return output_; }

  void save(const std::filesystem::path& path) const;
  /// Throws CorruptCheckpoint or VersionMismatch.
  static Seq2SeqModel load(const std::filesystem::path& path);

 private:
  ModelConfig config_;
  ParameterSet params_;
  std::string stage_tag_ = "init";
  long steps_trained_ = 0;
  Slot token_embedding_ = 0;
  Slot encoder_positions_ = 0;
  Slot decoder_positions_ = 0;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Norm encoder_norm_{};
  Norm decoder_norm_{};
  Linear output_{};
};

/// Decoder input for a target: BOS followed by all but the last target token.
std::vector<TokenId> shift_right(std::span<const TokenId> target);

/// Eval-mode logits, one row per decoder position (decoder_input.size() x vocab).
/// Throws InvalidArgument on out-of-range ids or lengths beyond max_positions.
Matrix forward(const Seq2SeqModel& model, std::span<const TokenId> input_ids,
               std::span<const TokenId> decoder_input_ids);

/// Mean of -log softmax(logits)[target] over non-PAD targets.
/// Throws InvalidArgument when every target is PAD.
double nll_loss(const Matrix& logits, std::span<const TokenId> target_ids);

struct SequencePair {
  std::span<const TokenId> input;
  std::span<const TokenId> target;
};

/// Dropout is active when `rng` is non-null and the model's rate is positive.
struct ForwardMode {
  std::mt19937_64* rng = nullptr;
};

/// Token-mean NLL over the batch and its gradient, accumulated into `grad`.
double loss_and_gradient(const Seq2SeqModel& model, std::span<const SequencePair> batch, Vector& grad,
                         ForwardMode mode = {});
/// Same loss value without the backward pass.
double batch_loss(const Seq2SeqModel& model, std::span<const SequencePair> batch, ForwardMode mode = {});

/// Encoder output plus per-decoder-layer cross-attention keys/values, reused
/// across every decoding step of one input.
struct EncodedInput {
  std::vector<TokenId> input_ids;
  Matrix memory;
  std::vector<char> key_valid;
  std::vector<Matrix> cross_keys;
  std::vector<Matrix> cross_values;
};

EncodedInput encode_input(const Seq2SeqModel& model, std::span<const TokenId> input_ids);

/// Log-softmax over the vocabulary of the token following each prefix; every
/// prefix starts with BOS. Returns prefixes.size() x vocab.
Matrix next_token_log_probs(const Seq2SeqModel& model, const EncodedInput& encoded,
                            std::span<const std::vector<TokenId>> prefixes);

enum class LrSchedule { Constant, WarmupCosine };

struct TrainSchedule {
  Stage stage = Stage::Finetune;
  double learning_rate = 5e-4;
  double weight_decay = 0.01;
  int batch_size = 512;
  int epochs = 10;
  long warmup_steps = 0;
  LrSchedule schedule = LrSchedule::WarmupCosine;
  /// Save a checkpoint every N optimizer steps (0 disables).
  long checkpoint_every = 0;
  std::filesystem::path checkpoint_path;
  std::uint64_t seed = 0;

  /// Pre-training: batch 4096, constant lr 1e-3.
  static TrainSchedule paper_pretrain();
  /// Fine-tuning: batch 512, max lr 5e-4 with warm-up and cosine decay.
  static TrainSchedule paper_finetune();

  long total_steps(std::size_t example_count) const;
  double lr_at(long step, long total_steps) const;
};

struct TrainLogEntry {
  long step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::vector<double> epoch_loss;
};

class Seq2SeqDiverged : public Error {
 public:
  Seq2SeqDiverged(const std::string& message, Seq2SeqModel last_good)
      : Error("TrainingDiverged", message), last_good_(std::move(last_good)) {}
  const Seq2SeqModel& last_good() const { return last_good_; }

 private:
  Seq2SeqModel last_good_;
};

/// AdamW over shuffled mini-batches. Throws InvalidArgument when an example's
/// task is not allowed in the schedule's stage, Seq2SeqDiverged on a
/// non-finite loss. Sets the model's stage tag on completion.
TrainResult train(Seq2SeqModel& model, std::span<const TaskExample> examples, const TrainSchedule& schedule);

void write_train_log(const TrainResult& result, const std::filesystem::path& path);

}  // namespace mqlrec
