// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Quantitative translator: MLP encoder, L-level residual vector quantizer and
// MLP decoder trained with reconstruction + residual-quantization losses.
//
// Gradient semantics of the training loss (sg = stop-gradient):
//   recon = ||h - dec(q)||^2 with q = z + sg(z_hat - z)   (straight-through)
//   rq    = sum_i ||sg(r_i) - v_i||^2 + beta * ||r_i - sg(v_i)||^2
// where r_1 = z, r_{i+1} = r_i - v_i and v_i is the selected codeword of
// level i. The residual chain carries gradient into the encoder and into the
// codewords of shallower levels; the decoder does not update codebooks.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mqlrec/common.hpp"
#include "mqlrec/data_ingest.hpp"
#include "mqlrec/error.hpp"
#include "mqlrec/nn.hpp"

namespace mqlrec {

struct RqVaeConfig {
  int levels = 4;
  int codebook_size = 256;
  int code_dim = 32;
  std::vector<Eigen::Index> encoder_hidden = {512, 256, 128};
  std::vector<Eigen::Index> decoder_hidden = {128, 256, 512};
  double beta = 0.25;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  int batch_size = 1024;
  int epochs = 100;
  int kmeans_init_iters = 25;
  std::uint64_t seed = 0;

  /// Throws InvalidArgument on L < 1, K < 2, beta < 0 or K^L < item_count.
  void validate(std::size_t item_count) const;
};

/// JSON conversion; missing keys keep their defaults.
void to_json(nlohmann::json& j, const RqVaeConfig& c);
void from_json(const nlohmann::json& j, RqVaeConfig& c);

struct QuantizationResult {
  CodeTuple code;
  /// Row i is the residual entering level i+1 (row 0 is z).
  Matrix residuals;
  Vector z_hat;
  /// levels x K squared distances from each level's residual to every codeword.
  Matrix level_distances;
};

struct EpochLoss {
  int epoch = 0;
  double recon = 0.0;
  double rq = 0.0;
  double total = 0.0;
};

class QuantTranslator {
 public:
  QuantTranslator() = default;
  QuantTranslator(Modality modality, Eigen::Index input_dim, RqVaeConfig config);

  Modality modality() const { return modality_; }
  const RqVaeConfig& config() const { return config_; }
  Eigen::Index input_dim() const { return encoder_.in_dim(); }
  int levels() const { return config_.levels; }
  int codebook_size() const { return config_.codebook_size; }

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const Mlp& encoder() const { return encoder_; }
  const Mlp& decoder() const { return decoder_; }

  MatrixMap codebook(int level) { return params_.view(codebooks_[level]); }
  ConstMatrixMap codebook(int level) const { return params_.view(codebooks_[level]); }
  ParameterSet::Slot codebook_slot(int level) const { return codebooks_[level]; }
  std::vector<Matrix> codebooks() const;
  void set_codebooks(const std::vector<Matrix>& books);

  std::vector<EpochLoss>& log() { return log_; }
  const std::vector<EpochLoss>& log() const { return log_; }

  void save(const std::filesystem::path& path) const;
  static QuantTranslator load(const std::filesystem::path& path);

 private:
  Modality modality_ = Modality::Text;
  RqVaeConfig config_;
  ParameterSet params_;
  Mlp encoder_;
  Mlp decoder_;
  std::vector<ParameterSet::Slot> codebooks_;
  std::vector<EpochLoss> log_;
};

Vector encode(const QuantTranslator& translator, const Vector& h);
Vector decode(const QuantTranslator& translator, const Vector& z_hat);

/// Greedy level-by-level nearest codeword search on residuals. Ties go to the
/// smallest codeword index.
QuantizationResult quantize(std::span<const Matrix> codebooks, const Vector& z);
QuantizationResult quantize(const QuantTranslator& translator, const Vector& z);

struct LossTerms {
  double recon = 0.0;
  double rq = 0.0;
  double total = 0.0;
};

/// Loss of a single embedding. Throws NonFiniteError naming the offending term.
LossTerms compute_loss(const QuantTranslator& translator, const Vector& h, double beta);

/// Scales for the three gradient paths; used to isolate terms in tests.
struct LossWeights {
  double recon = 1.0;
  double codebook = 1.0;
  double commitment = 1.0;
};

/// Mean loss over the rows of `batch` and its gradient (accumulated into
/// `grad`, which must have the translator's parameter count).
LossTerms loss_and_gradient(const QuantTranslator& translator, const Matrix& batch, double beta,
                            Vector& grad, const LossWeights& weights = {});

/// Values the stop-gradient operands take at one parameter point. Evaluating
/// `surrogate_loss` with this snapshot frozen gives a smooth function whose
/// true gradient is the training gradient, which is what finite differences
/// can check.
struct StopGradientSnapshot {
  std::vector<CodeTuple> codes;
  std::vector<Matrix> residuals;   // per row: levels x code_dim
  std::vector<Matrix> codewords;   // per row: levels x code_dim
  Matrix z;                        // rows x code_dim
  Matrix z_hat;                    // rows x code_dim
};

StopGradientSnapshot snapshot_stop_gradients(const QuantTranslator& translator, const Matrix& batch);
double surrogate_loss(const QuantTranslator& translator, const Matrix& batch, double beta,
                      const StopGradientSnapshot& snapshot, const LossWeights& weights = {});

struct KMeansResult {
  Matrix centroids;
  std::vector<int> assignment;
  bool padded = false;
};

/// k-means++ seeding followed by `iterations` Lloyd steps. Rows are put in
/// lexicographic order first, so the result does not depend on input row
/// order. With fewer than k distinct points the missing centroids are
/// perturbed duplicates and `padded` is set.
KMeansResult kmeans(const Matrix& points, int k, int iterations, std::uint64_t seed);

/// Level-1 codebook from k-means on z, deeper levels from k-means on the
/// residuals left by the previous levels.
std::vector<Matrix> init_codebooks(const Matrix& z_batch, const RqVaeConfig& config,
                                   std::vector<std::string>* warnings = nullptr);

class TranslatorDiverged : public Error {
 public:
  TranslatorDiverged(const std::string& message, QuantTranslator last_good)
      : Error("TrainingDiverged", message), last_good_(std::move(last_good)) {}
  const QuantTranslator& last_good() const { return last_good_; }

 private:
  QuantTranslator last_good_;
};

/// Fresh translator: He-initialised MLPs and k-means codebooks on the encoded
/// embeddings. This is exactly what `train_translator` returns for epochs = 0.
QuantTranslator initialize_translator(const EmbeddingMatrix& embeddings, const RqVaeConfig& config);

/// Mini-batch AdamW on the total loss; appends one EpochLoss per epoch to the
/// translator log. Throws TranslatorDiverged on a non-finite loss.
QuantTranslator train_translator(const EmbeddingMatrix& embeddings, const RqVaeConfig& config);

struct UsageStats {
  /// levels x K code frequencies.
  std::vector<std::vector<long>> level_counts;
  /// Tuples shared by more than one item, and the items involved.
  long colliding_groups = 0;
  long colliding_items = 0;
};

struct QuantizedItems {
  std::vector<std::pair<ItemId, QuantizationResult>> results;
  UsageStats usage;
};

QuantizedItems quantize_all(const QuantTranslator& translator, const EmbeddingMatrix& embeddings);

}  // namespace mqlrec
