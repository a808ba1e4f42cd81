// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Item embeddings, user interaction sequences, and the synthetic generator
// used for desk-scale experiments.
//
// Embedding file:
//   #emb <text|image> <count> <dim>
//   <item_id>\t<f1> <f2> ... <fdim>
// Interactions file:
//   <user_id>\t<item_1>,<item_2>,...      (chronological)

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mqlrec/common.hpp"

namespace mqlrec {

class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  /// Validates uniqueness of ids, row count and finiteness.
  EmbeddingMatrix(Modality modality, std::vector<ItemId> item_ids, Matrix vectors);

  Modality modality() const { return modality_; }
  const std::vector<ItemId>& item_ids() const { return item_ids_; }
  const Matrix& vectors() const { return vectors_; }
  Eigen::Index size() const { return vectors_.rows(); }
  Eigen::Index dim() const { return vectors_.cols(); }

  bool contains(const ItemId& id) const { return index_.contains(id); }
  /// Row index of `id`; throws InvalidArgument when absent.
  Eigen::Index row_of(const ItemId& id) const;

  bool operator==(const EmbeddingMatrix& other) const {
    return modality_ == other.modality_ && item_ids_ == other.item_ids_ &&
           vectors_ == other.vectors_;
  }

 private:
  Modality modality_ = Modality::Text;
  std::vector<ItemId> item_ids_;
  Matrix vectors_;
  std::unordered_map<ItemId, Eigen::Index> index_;
};

struct UserSequence {
  UserId user;
  std::vector<ItemId> items;
  bool operator==(const UserSequence&) const = default;
};

struct InteractionDataset {
  std::vector<UserSequence> users;
  bool operator==(const InteractionDataset&) const = default;
};

struct InteractionLoadOptions {
  std::size_t max_sequence_length = 20;
  std::size_t min_interactions = 5;
};

struct InteractionLoadResult {
  InteractionDataset dataset;
  std::vector<std::string> warnings;
};

EmbeddingMatrix load_embeddings(const std::filesystem::path& path, Modality modality);
void write_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& path);

/// Users with fewer than `min_interactions` items are dropped with a warning;
/// longer sequences keep their most recent `max_sequence_length` items.
InteractionLoadResult load_interactions(const std::filesystem::path& path,
                                        const InteractionLoadOptions& options = {});
void write_interactions(const InteractionDataset& dataset, const std::filesystem::path& path);

/// Throws MissingEmbeddingError for the first sequence item absent from either matrix.
void check_references(const InteractionDataset& dataset, const EmbeddingMatrix& text,
                      const EmbeddingMatrix& image);

struct SynthConfig {
  std::size_t n_items = 1000;
  std::size_t n_users = 2000;
  std::size_t dim = 32;
  std::size_t n_clusters = 8;
  /// Probability that an item's image cluster equals its text cluster.
  double cross_modal_correlation = 0.9;
  std::uint64_t seed = 0;
  /// Seed for the cluster centres; domains generated with the same centre
  /// seed share one embedding geometry. Defaults to `seed`.
  std::optional<std::uint64_t> center_seed;
  /// Prepended to generated item and user ids (e.g. "src1_").
  std::string id_prefix;
  std::size_t min_sequence_length = 5;
  std::size_t max_sequence_length = 8;
  /// Probability that the next item comes from the current item's cluster.
  double stay_probability = 0.9;
  double center_scale = 1.0;
  double noise_scale = 0.15;
};

struct SyntheticData {
  EmbeddingMatrix text;
  EmbeddingMatrix image;
  InteractionDataset interactions;
  std::vector<int> text_labels;
  std::vector<int> image_labels;
};

/// Pure function of `config`. Items are drawn from Gaussian clusters; user
/// sequences are cluster-biased Markov walks without repeated items.
SyntheticData generate_synthetic(const SynthConfig& config);

}  // namespace mqlrec
