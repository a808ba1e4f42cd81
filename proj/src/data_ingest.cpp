// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "mqlrec/data_ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include <spdlog/spdlog.h>

#include "mqlrec/error.hpp"
#include "mqlrec/text_io.hpp"

namespace mqlrec {

std::string_view modality_name(Modality m) {
  return m == Modality::Text ? "text" : "image";
}

Modality parse_modality(std::string_view name) {
  if (name == "text") return Modality::Text;
  if (name == "image") return Modality::Image;
  throw InvalidArgument("unknown modality '" + std::string(name) + "'");
}

EmbeddingMatrix::EmbeddingMatrix(Modality modality, std::vector<ItemId> item_ids, Matrix vectors)
    : modality_(modality), item_ids_(std::move(item_ids)), vectors_(std::move(vectors)) {
  if (static_cast<Eigen::Index>(item_ids_.size()) != vectors_.rows()) {
    throw DimensionMismatch("embedding matrix has " + std::to_string(vectors_.rows()) +
                            " rows for " + std::to_string(item_ids_.size()) + " ids");
  }
  if (!vectors_.allFinite()) throw NonFiniteError("embedding vectors");
  index_.reserve(item_ids_.size());
  for (std::size_t i = 0; i < item_ids_.size(); ++i) {
    if (!index_.emplace(item_ids_[i], static_cast<Eigen::Index>(i)).second) {
      throw DuplicateItemError("<memory>", i + 1, item_ids_[i]);
    }
  }
}

Eigen::Index EmbeddingMatrix::row_of(const ItemId& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw InvalidArgument("no embedding for item '" + id + "'");
  return it->second;
}

EmbeddingMatrix load_embeddings(const std::filesystem::path& path, Modality modality) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  const std::string file = path.string();

  std::string line;
  if (!std::getline(in, line)) throw ParseError(file, 1, "missing header");
  std::istringstream header(line);
  std::string tag, mod;
  long long count = -1, dim = -1;
  if (!(header >> tag >> mod >> count >> dim) || tag != "#emb" || count < 0 || dim <= 0) {
    throw ParseError(file, 1, "malformed header, expected '#emb <modality> <count> <dim>'");
  }
  if (mod != modality_name(modality)) {
    throw ParseError(file, 1, "header modality '" + mod + "' does not match requested '" +
                                  std::string(modality_name(modality)) + "'");
  }

  std::vector<ItemId> ids;
  Matrix vectors(count, dim);
  std::unordered_set<ItemId> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) throw ParseError(file, line_no, "expected '<item_id>\\t<values>'");
    ItemId id = line.substr(0, tab);
    if (!seen.insert(id).second) throw DuplicateItemError(file, line_no, id);
    if (static_cast<long long>(ids.size()) >= count) {
      throw ParseError(file, line_no, "more rows than the header count " + std::to_string(count));
    }
    const auto values = split_whitespace(std::string_view(line).substr(tab + 1));
    if (static_cast<long long>(values.size()) != dim) {
      throw ParseError("DimensionMismatch", file, line_no,
                       "row has " + std::to_string(values.size()) + " values, header says " +
                           std::to_string(dim));
    }
    const auto row = static_cast<Eigen::Index>(ids.size());
    for (long long j = 0; j < dim; ++j) {
      double v = 0.0;
      if (!parse_double(values[j], v)) {
        throw ParseError(file, line_no, "bad number '" + std::string(values[j]) + "'");
      }
      if (!std::isfinite(v)) throw ParseError("NonFinite", file, line_no, "non-finite value");
      vectors(row, j) = v;
    }
    ids.push_back(std::move(id));
  }
  if (static_cast<long long>(ids.size()) != count) {
    throw ParseError(file, line_no, "header promises " + std::to_string(count) + " rows, found " +
                                        std::to_string(ids.size()));
  }
  return EmbeddingMatrix(modality, std::move(ids), std::move(vectors));
}

void write_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  out << "#emb " << modality_name(matrix.modality()) << ' ' << matrix.size() << ' ' << matrix.dim()
      << '\n';
  std::string buf;
  for (Eigen::Index i = 0; i < matrix.size(); ++i) {
    buf = matrix.item_ids()[i];
    buf += '\t';
    for (Eigen::Index j = 0; j < matrix.dim(); ++j) {
      if (j) buf += ' ';
      append_double(buf, matrix.vectors()(i, j));
    }
    buf += '\n';
    out << buf;
  }
}

InteractionLoadResult load_interactions(const std::filesystem::path& path,
                                        const InteractionLoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  const std::string file = path.string();
  InteractionLoadResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || line.find('\t', tab + 1) != std::string::npos) {
      throw ParseError(file, line_no, "expected '<user_id>\\t<item>,<item>,...'");
    }
    UserSequence seq;
    seq.user = line.substr(0, tab);
    for (auto part : split(std::string_view(line).substr(tab + 1), ',')) {
      if (part.empty()) throw ParseError(file, line_no, "empty item id");
      seq.items.emplace_back(part);
    }
    if (seq.items.empty()) throw ParseError(file, line_no, "empty item list");
    if (seq.items.size() < options.min_interactions) {
      result.warnings.push_back("user '" + seq.user + "' dropped: " +
                                std::to_string(seq.items.size()) + " interactions < " +
                                std::to_string(options.min_interactions));
      spdlog::warn("{}", result.warnings.back());
      continue;
    }
    if (seq.items.size() > options.max_sequence_length) {
      seq.items.erase(seq.items.begin(),
                      seq.items.end() - static_cast<std::ptrdiff_t>(options.max_sequence_length));
    }
    result.dataset.users.push_back(std::move(seq));
  }
  return result;
}

void write_interactions(const InteractionDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  for (const auto& u : dataset.users) {
    out << u.user << '\t';
    for (std::size_t i = 0; i < u.items.size(); ++i) out << (i ? "," : "") << u.items[i];
    out << '\n';
  }
}

void check_references(const InteractionDataset& dataset, const EmbeddingMatrix& text,
                      const EmbeddingMatrix& image) {
  for (const auto& u : dataset.users) {
    for (const auto& item : u.items) {
      if (!text.contains(item) || !image.contains(item)) throw MissingEmbeddingError(item);
    }
  }
}

namespace {

std::string padded_id(const std::string& prefix, char kind, std::size_t index, std::size_t count) {
  std::string digits = std::to_string(index);
  const std::size_t width = std::to_string(count > 0 ? count - 1 : 0).size();
  if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
  return prefix + kind + digits;
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = scale * normal(rng);
  return m;
}

}  // namespace

SyntheticData generate_synthetic(const SynthConfig& config) {
  if (config.n_items == 0 || config.n_users == 0 || config.dim == 0) {
    throw InvalidArgument("synthetic config needs positive n_items, n_users and dim");
  }
  if (config.n_clusters == 0 || config.n_clusters > config.n_items) {
    throw InvalidArgument("n_clusters must be in [1, n_items]");
  }
  if (!(config.cross_modal_correlation >= 0.0 && config.cross_modal_correlation <= 1.0)) {
    throw InvalidArgument("cross_modal_correlation must lie in [0, 1]");
  }
  if (!(config.stay_probability >= 0.0 && config.stay_probability <= 1.0)) {
    throw InvalidArgument("stay_probability must lie in [0, 1]");
  }
  if (config.min_sequence_length == 0 || config.min_sequence_length > config.max_sequence_length ||
      config.max_sequence_length > config.n_items) {
    throw InvalidArgument("sequence lengths must satisfy 1 <= min <= max <= n_items");
  }

  const std::size_t n = config.n_items;
  const std::size_t c = config.n_clusters;
  std::mt19937_64 center_rng(config.center_seed.value_or(config.seed));
  const Matrix text_centers = gaussian_matrix(c, config.dim, config.center_scale, center_rng);
  const Matrix image_centers = gaussian_matrix(c, config.dim, config.center_scale, center_rng);

  std::mt19937_64 rng(config.seed);
  SyntheticData data;
  data.text_labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) data.text_labels[i] = static_cast<int>(i % c);
  std::shuffle(data.text_labels.begin(), data.text_labels.end(), rng);

  std::bernoulli_distribution same_label(config.cross_modal_correlation);
  std::uniform_int_distribution<int> any_label(0, static_cast<int>(c) - 1);
  data.image_labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Draw both variates unconditionally so the stream does not depend on rho.
    const bool keep = same_label(rng);
    const int other = any_label(rng);
    data.image_labels[i] = keep ? data.text_labels[i] : other;
  }

  Matrix text = gaussian_matrix(n, config.dim, config.noise_scale, rng);
  Matrix image = gaussian_matrix(n, config.dim, config.noise_scale, rng);
  for (std::size_t i = 0; i < n; ++i) {
    text.row(i) += text_centers.row(data.text_labels[i]);
    image.row(i) += image_centers.row(data.image_labels[i]);
  }

  std::vector<ItemId> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = padded_id(config.id_prefix, 'i', i, n);
  data.text = EmbeddingMatrix(Modality::Text, ids, std::move(text));
  data.image = EmbeddingMatrix(Modality::Image, ids, std::move(image));

  std::vector<std::vector<std::size_t>> members(c);
  for (std::size_t i = 0; i < n; ++i) members[data.text_labels[i]].push_back(i);

  std::uniform_int_distribution<std::size_t> length_dist(config.min_sequence_length,
                                                         config.max_sequence_length);
  std::uniform_int_distribution<std::size_t> any_item(0, n - 1);
  std::bernoulli_distribution stay(config.stay_probability);
  data.interactions.users.reserve(config.n_users);
  std::vector<char> used(n, 0);
  for (std::size_t u = 0; u < config.n_users; ++u) {
    UserSequence seq;
    seq.user = padded_id(config.id_prefix, 'u', u, config.n_users);
    const std::size_t len = length_dist(rng);
    std::vector<std::size_t> walk;
    walk.push_back(any_item(rng));
    used[walk.back()] = 1;
    while (walk.size() < len) {
      const auto& pool = members[data.text_labels[walk.back()]];
      std::size_t next = n;
      if (stay(rng)) {
        // Rejection sampling within the cluster, bounded so tiny clusters fall through.
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (int attempt = 0; attempt < 32 && next == n; ++attempt) {
          const std::size_t cand = pool[pick(rng)];
          if (!used[cand]) next = cand;
        }
      }
      while (next == n) {
        const std::size_t cand = any_item(rng);
        if (!used[cand]) next = cand;
      }
      used[next] = 1;
      walk.push_back(next);
    }
    for (auto i : walk) {
      used[i] = 0;
      seq.items.push_back(ids[i]);
    }
    data.interactions.users.push_back(std::move(seq));
  }
  return data;
}

}  // namespace mqlrec
