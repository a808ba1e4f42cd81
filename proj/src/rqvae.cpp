// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "mqlrec/rqvae.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "mqlrec/checkpoint.hpp"

namespace mqlrec {

void to_json(nlohmann::json& j, const RqVaeConfig& c) {
  j = {{"levels", c.levels},
       {"codebook_size", c.codebook_size},
       {"code_dim", c.code_dim},
       {"encoder_hidden", c.encoder_hidden},
       {"decoder_hidden", c.decoder_hidden},
       {"beta", c.beta},
       {"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"kmeans_init_iters", c.kmeans_init_iters},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RqVaeConfig& c) {
  const RqVaeConfig d;
  c.levels = j.value("levels", d.levels);
  c.codebook_size = j.value("codebook_size", d.codebook_size);
  c.code_dim = j.value("code_dim", d.code_dim);
  c.encoder_hidden = j.value("encoder_hidden", d.encoder_hidden);
  c.decoder_hidden = j.value("decoder_hidden", d.decoder_hidden);
  c.beta = j.value("beta", d.beta);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.kmeans_init_iters = j.value("kmeans_init_iters", d.kmeans_init_iters);
  c.seed = j.value("seed", d.seed);
}

void RqVaeConfig::validate(std::size_t item_count) const {
  if (levels < 1) throw InvalidArgument("levels must be >= 1");
  if (codebook_size < 2) throw InvalidArgument("codebook_size must be >= 2");
  if (code_dim < 1) throw InvalidArgument("code_dim must be >= 1");
  if (!(beta >= 0.0)) throw InvalidArgument("beta must be >= 0");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (epochs < 0 || kmeans_init_iters < 0) throw InvalidArgument("epochs and kmeans_init_iters must be >= 0");
  // K^L >= item_count, computed without overflow.
  double capacity = 1.0;
  for (int l = 0; l < levels && capacity < static_cast<double>(item_count); ++l) {
    capacity *= codebook_size;
  }
  if (capacity < static_cast<double>(item_count)) {
    throw InvalidArgument("codebook capacity K^L = " + std::to_string(codebook_size) + "^" +
                          std::to_string(levels) + " cannot address " + std::to_string(item_count) +
                          " items");
  }
}

QuantTranslator::QuantTranslator(Modality modality, Eigen::Index input_dim, RqVaeConfig config)
    : modality_(modality), config_(std::move(config)) {
  if (config_.levels < 1 || config_.codebook_size < 2 || config_.code_dim < 1 || input_dim < 1) {
    throw InvalidArgument("invalid translator shape");
  }
  encoder_ = Mlp(params_, "encoder", input_dim, config_.encoder_hidden, config_.code_dim);
  decoder_ = Mlp(params_, "decoder", config_.code_dim, config_.decoder_hidden, input_dim);
  for (int l = 0; l < config_.levels; ++l) {
    codebooks_.push_back(params_.add("codebook.level" + std::to_string(l), config_.codebook_size,
                                     config_.code_dim, false));
  }
}

std::vector<Matrix> QuantTranslator::codebooks() const {
  std::vector<Matrix> books;
  for (int l = 0; l < levels(); ++l) books.emplace_back(codebook(l));
  return books;
}

void QuantTranslator::set_codebooks(const std::vector<Matrix>& books) {
  if (static_cast<int>(books.size()) != levels()) throw DimensionMismatch("codebook level count");
  for (int l = 0; l < levels(); ++l) {
    if (books[l].rows() != codebook_size() || books[l].cols() != config_.code_dim) {
      throw DimensionMismatch("codebook shape at level " + std::to_string(l));
    }
    codebook(l) = books[l];
  }
}

void QuantTranslator::save(const std::filesystem::path& path) const {
  Container c;
  nlohmann::json log = nlohmann::json::array();
  for (const auto& e : log_) {
    log.push_back({{"epoch", e.epoch}, {"recon", e.recon}, {"rq", e.rq}, {"total", e.total}});
  }
  c.header = {{"kind", "rqvae"},
              {"modality", modality_name(modality_)},
              {"input_dim", input_dim()},
              {"config", config_},
              {"tensors", describe_slots(params_)},
              {"log", log}};
  c.payload.assign(params_.values().data(), params_.values().data() + params_.size());
  write_container(path, c);
}

QuantTranslator QuantTranslator::load(const std::filesystem::path& path) {
  const Container c = read_container(path, "rqvae");
  try {
    QuantTranslator t(parse_modality(c.header.at("modality").get<std::string>()),
                      c.header.at("input_dim").get<Eigen::Index>(),
                      c.header.at("config").get<RqVaeConfig>());
    restore_parameters(t.params_, c.header.at("tensors"), c.payload);
    if (c.payload.size() != static_cast<std::size_t>(t.params_.size())) {
      throw CorruptCheckpoint(path.string() + ": payload size does not match the translator");
    }
    for (const auto& e : c.header.at("log")) {
      t.log_.push_back({e.at("epoch").get<int>(), e.at("recon").get<double>(),
                        e.at("rq").get<double>(), e.at("total").get<double>()});
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(path.string() + ": malformed header: " + e.what());
  }
}

Vector encode(const QuantTranslator& translator, const Vector& h) {
  if (h.size() != translator.input_dim()) {
    throw DimensionMismatch("encode: expected dimension " + std::to_string(translator.input_dim()) +
                            ", got " + std::to_string(h.size()));
  }
  return translator.encoder().forward(translator.params(), h.transpose()).row(0).transpose();
}

Vector decode(const QuantTranslator& translator, const Vector& z_hat) {
  if (z_hat.size() != translator.config().code_dim) {
    throw DimensionMismatch("decode: expected dimension " +
                            std::to_string(translator.config().code_dim) + ", got " +
                            std::to_string(z_hat.size()));
  }
  return translator.decoder().forward(translator.params(), z_hat.transpose()).row(0).transpose();
}

namespace {

template <typename Book>
QuantizationResult quantize_impl(int levels, const Book& book_at, const Vector& z) {
  const Eigen::Index dim = z.size();
  QuantizationResult res;
  res.code.resize(levels);
  res.residuals.resize(levels, dim);
  res.z_hat = Vector::Zero(dim);
  Vector r = z;
  for (int l = 0; l < levels; ++l) {
    const auto& book = book_at(l);
    if (book.cols() != dim) throw DimensionMismatch("codebook width does not match z");
    if (l == 0) res.level_distances.resize(levels, book.rows());
    res.residuals.row(l) = r.transpose();
    int best = 0;
    double best_d = 0.0;
    for (Eigen::Index k = 0; k < book.rows(); ++k) {
      double d = 0.0;
      for (Eigen::Index j = 0; j < dim; ++j) {
        const double diff = r[j] - book(k, j);
        d += diff * diff;
      }
      res.level_distances(l, k) = d;
      if (k == 0 || d < best_d) {
        best = static_cast<int>(k);
        best_d = d;
      }
    }
    res.code[l] = best;
    r -= book.row(best).transpose();
    res.z_hat += book.row(best).transpose();
  }
  return res;
}

void check_finite(const auto& m, const char* term) {
  if (!m.allFinite()) throw NonFiniteError(term);
}

}  // namespace

QuantizationResult quantize(std::span<const Matrix> codebooks, const Vector& z) {
  if (codebooks.empty()) throw InvalidArgument("quantize: no codebooks");
  return quantize_impl(static_cast<int>(codebooks.size()),
                       [&](int l) -> const Matrix& { return codebooks[l]; }, z);
}

QuantizationResult quantize(const QuantTranslator& translator, const Vector& z) {
  if (z.size() != translator.config().code_dim) throw DimensionMismatch("quantize: z has wrong width");
  return quantize_impl(translator.levels(), [&](int l) { return translator.codebook(l); }, z);
}

LossTerms compute_loss(const QuantTranslator& translator, const Vector& h, double beta) {
  if (!h.allFinite()) throw NonFiniteError("h");
  const Vector z = encode(translator, h);
  check_finite(z, "z");
  const QuantizationResult q = quantize(translator, z);
  const Vector h_hat = decode(translator, q.z_hat);
  check_finite(h_hat, "h_hat");
  LossTerms t;
  t.recon = (h - h_hat).squaredNorm();
  for (int l = 0; l < translator.levels(); ++l) {
    const double d = q.level_distances(l, q.code[l]);
    t.rq += d + beta * d;
  }
  if (!std::isfinite(t.recon)) throw NonFiniteError("recon");
  if (!std::isfinite(t.rq)) throw NonFiniteError("rq");
  t.total = t.recon + t.rq;
  return t;
}

LossTerms loss_and_gradient(const QuantTranslator& translator, const Matrix& batch, double beta,
                            Vector& grad, const LossWeights& weights) {
  const auto& params = translator.params();
  if (grad.size() != params.size()) throw DimensionMismatch("gradient buffer size");
  if (batch.cols() != translator.input_dim()) throw DimensionMismatch("batch width");
  const Eigen::Index n = batch.rows();
  if (n == 0) throw InvalidArgument("empty batch");
  const double inv_n = 1.0 / static_cast<double>(n);
  const int levels = translator.levels();

  Mlp::Cache enc_cache;
  const Matrix z = translator.encoder().forward(params, batch, &enc_cache);
  check_finite(z, "z");

  std::vector<QuantizationResult> quant;
  quant.reserve(n);
  Matrix z_hat(n, z.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    quant.push_back(quantize(translator, z.row(i).transpose()));
    z_hat.row(i) = quant.back().z_hat.transpose();
  }

  Mlp::Cache dec_cache;
  const Matrix h_hat = translator.decoder().forward(params, z_hat, &dec_cache);
  check_finite(h_hat, "h_hat");
  const Matrix diff = h_hat - batch;

  LossTerms terms;
  terms.recon = diff.squaredNorm() * inv_n;
  Matrix dz = translator.decoder().backward(params, dec_cache, (2.0 * weights.recon * inv_n) * diff,
                                            grad);

  std::vector<MatrixMap> dbooks;
  for (int l = 0; l < levels; ++l) dbooks.push_back(params.view_in(translator.codebook_slot(l), grad));

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& q = quant[i];
    for (int l = 0; l < levels; ++l) {
      const int c = q.code[l];
      const RowVector delta = q.residuals.row(l) - translator.codebook(l).row(c);  // r_l - v_l
      terms.rq += (1.0 + beta) * delta.squaredNorm() * inv_n;
      // codebook term: d/dv ||sg(r) - v||^2
      dbooks[l].row(c) -= (2.0 * weights.codebook * inv_n) * delta;
      // commitment term: d/dr beta ||r - sg(v)||^2, r_l = z - sum_{j<l} v_j
      const RowVector g = (2.0 * beta * weights.commitment * inv_n) * delta;
      dz.row(i) += g;
      for (int j = 0; j < l; ++j) dbooks[j].row(q.code[j]) -= g;
    }
  }
  if (!std::isfinite(terms.recon)) throw NonFiniteError("recon");
  if (!std::isfinite(terms.rq)) throw NonFiniteError("rq");
  terms.total = terms.recon + terms.rq;
  translator.encoder().backward(params, enc_cache, dz, grad);
  return terms;
}

StopGradientSnapshot snapshot_stop_gradients(const QuantTranslator& translator, const Matrix& batch) {
  StopGradientSnapshot s;
  s.z = translator.encoder().forward(translator.params(), batch);
  s.z_hat.resize(s.z.rows(), s.z.cols());
  for (Eigen::Index i = 0; i < s.z.rows(); ++i) {
    auto q = quantize(translator, s.z.row(i).transpose());
    Matrix words(translator.levels(), s.z.cols());
    for (int l = 0; l < translator.levels(); ++l) words.row(l) = translator.codebook(l).row(q.code[l]);
    s.codewords.push_back(std::move(words));
    s.residuals.push_back(q.residuals);
    s.z_hat.row(i) = q.z_hat.transpose();
    s.codes.push_back(std::move(q.code));
  }
  return s;
}

double surrogate_loss(const QuantTranslator& translator, const Matrix& batch, double beta,
                      const StopGradientSnapshot& snapshot, const LossWeights& weights) {
  const auto& params = translator.params();
  const Matrix z = translator.encoder().forward(params, batch);
  const Eigen::Index n = batch.rows();
  double codebook_term = 0.0;
  double commitment_term = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    RowVector r = z.row(i);
    for (int l = 0; l < translator.levels(); ++l) {
      const RowVector v = translator.codebook(l).row(snapshot.codes[i][l]);
      codebook_term += (snapshot.residuals[i].row(l) - v).squaredNorm();
      commitment_term += (r - snapshot.codewords[i].row(l)).squaredNorm();
      r -= v;
    }
  }
  const Matrix q = z + (snapshot.z_hat - snapshot.z);
  const Matrix h_hat = translator.decoder().forward(params, q);
  const double recon = (h_hat - batch).squaredNorm();
  return (weights.recon * recon + weights.codebook * codebook_term +
          beta * weights.commitment * commitment_term) /
         static_cast<double>(n);
}

std::vector<Matrix> init_codebooks(const Matrix& z_batch, const RqVaeConfig& config,
                                   std::vector<std::string>* warnings) {
  std::vector<Matrix> books;
  Matrix residual = z_batch;
  for (int l = 0; l < config.levels; ++l) {
    KMeansResult km = kmeans(residual, config.codebook_size, config.kmeans_init_iters,
                             config.seed + 7919ULL * static_cast<std::uint64_t>(l + 1));
    if (km.padded) {
      const std::string msg = "level " + std::to_string(l) + ": fewer than " +
                              std::to_string(config.codebook_size) +
                              " distinct points, padded codebook with perturbed duplicates";
      spdlog::warn("{}", msg);
      if (warnings) warnings->push_back(msg);
    }
    // Residuals for the next level use the same nearest-codeword rule as quantize().
    for (Eigen::Index i = 0; i < residual.rows(); ++i) {
      int best = 0;
      double best_d = 0.0;
      for (Eigen::Index k = 0; k < km.centroids.rows(); ++k) {
        const double d = (residual.row(i) - km.centroids.row(k)).squaredNorm();
        if (k == 0 || d < best_d) {
          best = static_cast<int>(k);
          best_d = d;
        }
      }
      residual.row(i) -= km.centroids.row(best);
    }
    books.push_back(std::move(km.centroids));
  }
  return books;
}

QuantTranslator initialize_translator(const EmbeddingMatrix& embeddings, const RqVaeConfig& config) {
  config.validate(static_cast<std::size_t>(embeddings.size()));
  QuantTranslator t(embeddings.modality(), embeddings.dim(), config);
  std::mt19937_64 rng(config.seed);
  t.encoder().initialize(t.params(), rng);
  t.decoder().initialize(t.params(), rng);
  const Matrix z = t.encoder().forward(t.params(), embeddings.vectors());
  t.set_codebooks(init_codebooks(z, config));
  return t;
}

QuantTranslator train_translator(const EmbeddingMatrix& embeddings, const RqVaeConfig& config) {
  QuantTranslator t = initialize_translator(embeddings, config);
  AdamWOptions opts;
  opts.weight_decay = config.weight_decay;
  AdamW optimizer(t.params(), opts);
  std::mt19937_64 rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
  const Eigen::Index n = embeddings.size();
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  Vector grad = t.params().zeros();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const QuantTranslator last_good = t;
    std::shuffle(order.begin(), order.end(), rng);
    EpochLoss sums{epoch, 0.0, 0.0, 0.0};
    for (Eigen::Index start = 0; start < n; start += config.batch_size) {
      const Eigen::Index rows = std::min<Eigen::Index>(config.batch_size, n - start);
      Matrix batch(rows, embeddings.dim());
      for (Eigen::Index i = 0; i < rows; ++i) batch.row(i) = embeddings.vectors().row(order[start + i]);
      grad.setZero();
      LossTerms terms;
      try {
        terms = loss_and_gradient(t, batch, config.beta, grad);
      } catch (const NonFiniteError& e) {
        throw TranslatorDiverged("translator training diverged at epoch " + std::to_string(epoch) +
                                     ": " + e.what(),
                                 last_good);
      }
      optimizer.step(t.params(), grad, config.learning_rate);
      if (!t.params().values().allFinite()) {
        throw TranslatorDiverged("non-finite parameters at epoch " + std::to_string(epoch), last_good);
      }
      const double w = static_cast<double>(rows) / static_cast<double>(n);
      sums.recon += w * terms.recon;
      sums.rq += w * terms.rq;
      sums.total += w * terms.total;
    }
    t.log().push_back(sums);
  }
  return t;
}

QuantizedItems quantize_all(const QuantTranslator& translator, const EmbeddingMatrix& embeddings) {
  if (embeddings.dim() != translator.input_dim()) throw DimensionMismatch("embedding width");
  QuantizedItems out;
  const Matrix z = translator.encoder().forward(translator.params(), embeddings.vectors());
  out.usage.level_counts.assign(translator.levels(), std::vector<long>(translator.codebook_size(), 0));
  std::map<CodeTuple, long> tuples;
  for (Eigen::Index i = 0; i < embeddings.size(); ++i) {
    QuantizationResult q = quantize(translator, z.row(i).transpose());
    for (int l = 0; l < translator.levels(); ++l) ++out.usage.level_counts[l][q.code[l]];
    ++tuples[q.code];
    out.results.emplace_back(embeddings.item_ids()[i], std::move(q));
  }
  for (const auto& [tuple, count] : tuples) {
    if (count > 1) {
      ++out.usage.colliding_groups;
      out.usage.colliding_items += count;
    }
  }
  return out;
}

}  // namespace mqlrec
