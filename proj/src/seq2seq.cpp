// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "mqlrec/seq2seq.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "mqlrec/checkpoint.hpp"

namespace mqlrec {

// ---------------------------------------------------------------------------
// Configuration

ModelConfig ModelConfig::paper(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  return c;
}

ModelConfig ModelConfig::desk(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.model_dim = 64;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.heads = 4;
  c.head_dim = 16;
  c.ffn_dim = 128;
  c.max_positions = 96;
  return c;
}

void ModelConfig::validate() const {
  if (vocab_size < 4) throw InvalidArgument("vocab_size must cover the special tokens");
  if (model_dim < 1 || heads < 1 || head_dim < 1 || ffn_dim < 1 || max_positions < 2) {
    throw InvalidArgument("model dimensions must be positive");
  }
  if (enc_layers < 0 || dec_layers < 0) throw InvalidArgument("layer counts must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("dropout must lie in [0, 1)");
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},   {"model_dim", c.model_dim}, {"enc_layers", c.enc_layers},
          {"dec_layers", c.dec_layers},   {"heads", c.heads},         {"head_dim", c.head_dim},
          {"ffn_dim", c.ffn_dim},         {"dropout", c.dropout},     {"max_positions", c.max_positions},
          {"tie_embeddings", c.tie_embeddings}, {"positions", "learned_absolute"}, {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size");
  c.model_dim = j.at("model_dim");
  c.enc_layers = j.at("enc_layers");
  c.dec_layers = j.at("dec_layers");
  c.heads = j.at("heads");
  c.head_dim = j.at("head_dim");
  c.ffn_dim = j.at("ffn_dim");
  c.dropout = j.at("dropout");
  c.max_positions = j.at("max_positions");
  c.tie_embeddings = j.at("tie_embeddings");
  if (j.at("positions") != "learned_absolute") throw CorruptCheckpoint("unknown position scheme");
  c.seed = j.at("seed");
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

Seq2SeqModel::Seq2SeqModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const Eigen::Index d = config_.model_dim;
  const Eigen::Index inner = static_cast<Eigen::Index>(config_.heads) * config_.head_dim;
  const Eigen::Index v = config_.vocab_size;
  auto linear = [&](const std::string& name, Eigen::Index in, Eigen::Index out) {
    return Linear{params_.add(name + ".weight", in, out, true), params_.add(name + ".bias", 1, out, false)};
  };
  auto norm = [&](const std::string& name) {
    return Norm{params_.add(name + ".gain", 1, d, false), params_.add(name + ".bias", 1, d, false)};
  };
  auto attention = [&](const std::string& name) {
    return Attention{linear(name + ".q", d, inner), linear(name + ".k", d, inner),
                     linear(name + ".v", d, inner), linear(name + ".o", inner, d)};
  };
  auto ffn = [&](const std::string& name) {
    return FeedForward{linear(name + ".in", d, config_.ffn_dim), linear(name + ".out", config_.ffn_dim, d)};
  };

  token_embedding_ = params_.add("embed.tokens", v, d, true);
  encoder_positions_ = params_.add("embed.encoder_positions", config_.max_positions, d, true);
  decoder_positions_ = params_.add("embed.decoder_positions", config_.max_positions, d, true);
  for (int l = 0; l < config_.enc_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    encoder_.push_back({norm(p + ".norm1"), attention(p + ".self_attn"), norm(p + ".norm2"), ffn(p + ".ffn")});
  }
  encoder_norm_ = norm("encoder.final_norm");
  for (int l = 0; l < config_.dec_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    decoder_.push_back({norm(p + ".norm1"), attention(p + ".self_attn"), norm(p + ".norm2"),
                        attention(p + ".cross_attn"), norm(p + ".norm3"), ffn(p + ".ffn")});
  }
  decoder_norm_ = norm("decoder.final_norm");
  if (!config_.tie_embeddings) output_ = linear("output", d, v);

  std::mt19937_64 rng(config_.seed);
  for (ParameterSet::Slot s = 0; s < params_.slots().size(); ++s) {
    const auto& slot = params_.slot(s);
    auto w = params_.view(s);
    const bool is_gain = slot.name.ends_with(".gain");
    const bool is_bias = slot.name.ends_with(".bias");
    if (is_gain) {
      w.setOnes();
      continue;
    }
    if (is_bias) continue;
    const double stddev = slot.name.starts_with("embed.")
                              ? 1.0 / std::sqrt(static_cast<double>(d))
                              : 1.0 / std::sqrt(static_cast<double>(slot.rows));
    std::normal_distribution<double> normal(0.0, stddev);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = normal(rng);
  }
}

void Seq2SeqModel::save(const std::filesystem::path& path) const {
  Container c;
  c.header = {{"kind", "seq2seq"},
              {"config", config_to_json(config_)},
              {"stage", stage_tag_},
              {"steps_trained", steps_trained_},
              {"tensors", describe_slots(params_)}};
  c.payload.assign(params_.values().data(), params_.values().data() + params_.size());
  write_container(path, c);
}

Seq2SeqModel Seq2SeqModel::load(const std::filesystem::path& path) {
  const Container c = read_container(path, "seq2seq");
  try {
    Seq2SeqModel m(config_from_json(c.header.at("config")));
    if (c.payload.size() != static_cast<std::size_t>(m.params_.size())) {
      throw CorruptCheckpoint(path.string() + ": payload size does not match the model");
    }
    restore_parameters(m.params_, c.header.at("tensors"), c.payload);
    m.stage_tag_ = c.header.at("stage").get<std::string>();
    m.steps_trained_ = c.header.at("steps_trained").get<long>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(path.string() + ": malformed header: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Building blocks

namespace {

using Linear = Seq2SeqModel::Linear;
using Norm = Seq2SeqModel::Norm;
using AttentionSlots = Seq2SeqModel::Attention;
using FeedForwardSlots = Seq2SeqModel::FeedForward;

constexpr double kNormEpsilon = 1e-6;

struct Segment {
  Eigen::Index offset = 0;
  Eigen::Index length = 0;
};

Matrix linear(const ParameterSet& p, Linear l, const Matrix& x) {
  Matrix y = x * p.view(l.weight);
  y.rowwise() += p.view(l.bias).row(0);
  return y;
}

Matrix linear_backward(const ParameterSet& p, Linear l, const Matrix& x, const Matrix& dy, Vector& grad) {
  p.view_in(l.weight, grad).noalias() += x.transpose() * dy;
  p.view_in(l.bias, grad).row(0) += dy.colwise().sum();
  return dy * p.view(l.weight).transpose();
}

struct NormCache {
  Matrix xhat;
  Vector inv_std;
};

Matrix layer_norm(const ParameterSet& p, Norm n, const Matrix& x, NormCache* cache) {
  const Eigen::Index d = x.cols();
  Matrix xhat(x.rows(), d);
  Vector inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    inv_std[i] = 1.0 / std::sqrt(var + kNormEpsilon);
    xhat.row(i) = (x.row(i).array() - mean) * inv_std[i];
  }
  Matrix y = xhat.array().rowwise() * p.view(n.gain).row(0).array();
  y.rowwise() += p.view(n.bias).row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Matrix layer_norm_backward(const ParameterSet& p, Norm n, const NormCache& c, const Matrix& dy, Vector& grad) {
  p.view_in(n.gain, grad).row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  p.view_in(n.bias, grad).row(0) += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * p.view(n.gain).row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_d = dxhat.row(i).mean();
    const double mean_dx = dxhat.row(i).dot(c.xhat.row(i)) / static_cast<double>(dy.cols());
    dx.row(i) = c.inv_std[i] * (dxhat.row(i).array() - mean_d - c.xhat.row(i).array() * mean_dx).matrix();
  }
  return dx;
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, std::mt19937_64* rng) {
  if (!rng || rate <= 0.0) return {};
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(*rng) ? scale : 0.0;
  return m;
}

void apply_mask(Matrix& x, const Matrix& mask) {
  if (mask.size()) x.array() *= mask.array();
}

struct AttentionCache {
  Matrix q_in;
  Matrix kv_in;
  Matrix q, k, v;
  Matrix context;
  std::vector<Matrix> probs;  // segment-major, head-minor
};

struct AttentionShape {
  int heads;
  int head_dim;
};

/// Multi-head attention over packed rows. Query segment b attends key segment
/// b. When `pre_k`/`pre_v` are given they replace the key/value projections.
Matrix attention(const ParameterSet& p, const AttentionSlots& a, AttentionShape shape, const Matrix& q_in,
                 const Matrix& kv_in, std::span<const Segment> q_segs, std::span<const Segment> k_segs,
                 const std::vector<char>& key_valid, bool causal, AttentionCache* cache,
                 const Matrix* pre_k = nullptr, const Matrix* pre_v = nullptr) {
  const int hd = shape.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix q = linear(p, a.q, q_in);
  Matrix k_local, v_local;
  if (!pre_k) {
    k_local = linear(p, a.k, kv_in);
    v_local = linear(p, a.v, kv_in);
  }
  const Matrix& k = pre_k ? *pre_k : k_local;
  const Matrix& v = pre_v ? *pre_v : v_local;
  Matrix context = Matrix::Zero(q.rows(), q.cols());
  if (cache) cache->probs.clear();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();

  for (std::size_t b = 0; b < q_segs.size(); ++b) {
    const Segment qs = q_segs[b];
    const Segment ks = k_segs[b];
    for (int h = 0; h < shape.heads; ++h) {
      const auto qb = q.block(qs.offset, h * hd, qs.length, hd);
      const auto kb = k.block(ks.offset, h * hd, ks.length, hd);
      Matrix s = (qb * kb.transpose()) * scale;
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        double row_max = kNegInf;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
          if (!key_valid[ks.offset + j] || (causal && j > i)) s(i, j) = kNegInf;
          row_max = std::max(row_max, s(i, j));
        }
        if (row_max == kNegInf) {
          s.row(i).setZero();
          continue;
        }
        double sum = 0.0;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
          const double e = s(i, j) == kNegInf ? 0.0 : std::exp(s(i, j) - row_max);
          s(i, j) = e;
          sum += e;
        }
        s.row(i) /= sum;
      }
      context.block(qs.offset, h * hd, qs.length, hd).noalias() = s * v.block(ks.offset, h * hd, ks.length, hd);
      if (cache) cache->probs.push_back(std::move(s));
    }
  }
  Matrix out = linear(p, a.o, context);
  if (cache) {
    cache->q_in = q_in;
    cache->kv_in = kv_in;
    cache->q = std::move(q);
    cache->k = std::move(k_local);
    cache->v = std::move(v_local);
    cache->context = std::move(context);
  }
  return out;
}

/// Returns d(q_in); adds d(kv_in) into `d_kv_in`.
Matrix attention_backward(const ParameterSet& p, const AttentionSlots& a, AttentionShape shape,
                          const AttentionCache& c, std::span<const Segment> q_segs,
                          std::span<const Segment> k_segs, const Matrix& d_out, Vector& grad, Matrix& d_kv_in) {
  const int hd = shape.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const Matrix d_context = linear_backward(p, a.o, c.context, d_out, grad);
  Matrix dq = Matrix::Zero(c.q.rows(), c.q.cols());
  Matrix dk = Matrix::Zero(c.k.rows(), c.k.cols());
  Matrix dv = Matrix::Zero(c.v.rows(), c.v.cols());
  std::size_t idx = 0;
  for (std::size_t b = 0; b < q_segs.size(); ++b) {
    const Segment qs = q_segs[b];
    const Segment ks = k_segs[b];
    for (int h = 0; h < shape.heads; ++h, ++idx) {
      const Matrix& prob = c.probs[idx];
      const auto dctx = d_context.block(qs.offset, h * hd, qs.length, hd);
      const auto vb = c.v.block(ks.offset, h * hd, ks.length, hd);
      const Matrix dp = dctx * vb.transpose();
      dv.block(ks.offset, h * hd, ks.length, hd).noalias() += prob.transpose() * dctx;
      Matrix ds = prob.array() * (dp.array().colwise() - (dp.array() * prob.array()).rowwise().sum());
      ds *= scale;
      dq.block(qs.offset, h * hd, qs.length, hd).noalias() += ds * c.k.block(ks.offset, h * hd, ks.length, hd);
      dk.block(ks.offset, h * hd, ks.length, hd).noalias() += ds.transpose() * c.q.block(qs.offset, h * hd, qs.length, hd);
    }
  }
  d_kv_in += linear_backward(p, a.k, c.kv_in, dk, grad);
  d_kv_in += linear_backward(p, a.v, c.kv_in, dv, grad);
  return linear_backward(p, a.q, c.q_in, dq, grad);
}

struct FeedForwardCache {
  Matrix input;
  Matrix hidden;  // post-ReLU
};

Matrix feed_forward(const ParameterSet& p, const FeedForwardSlots& f, const Matrix& x, FeedForwardCache* cache) {
  Matrix hidden = linear(p, f.in, x).cwiseMax(0.0);
  Matrix y = linear(p, f.out, hidden);
  if (cache) {
    cache->input = x;
    cache->hidden = std::move(hidden);
  }
  return y;
}

Matrix feed_forward_backward(const ParameterSet& p, const FeedForwardSlots& f, const FeedForwardCache& c,
                             const Matrix& dy, Vector& grad) {
  Matrix dh = linear_backward(p, f.out, c.hidden, dy, grad);
  dh.array() *= (c.hidden.array() > 0.0).cast<double>();
  return linear_backward(p, f.in, c.input, dh, grad);
}

// ---------------------------------------------------------------------------
// Whole-model graph

struct PackedBatch {
  std::vector<TokenId> src;
  std::vector<TokenId> dec_in;
  std::vector<TokenId> target;  // empty in decoding mode
  std::vector<int> src_pos;
  std::vector<int> dec_pos;
  std::vector<Segment> src_segs;
  std::vector<Segment> dec_segs;
  std::vector<char> src_valid;
  std::vector<char> dec_valid;
};

void check_ids(const Seq2SeqModel& model, std::span<const TokenId> ids, const char* what) {
  for (TokenId t : ids) {
    if (t < 0 || t >= model.config().vocab_size) {
      throw InvalidArgument(std::string(what) + " token id " + std::to_string(t) + " outside the vocabulary");
    }
  }
  if (static_cast<int>(ids.size()) > model.config().max_positions) {
    throw InvalidArgument(std::string(what) + " length " + std::to_string(ids.size()) + " exceeds max_positions");
  }
  if (ids.empty()) throw InvalidArgument(std::string(what) + " sequence is empty");
}

void append_sequence(std::span<const TokenId> ids, std::vector<TokenId>& tokens, std::vector<int>& pos,
                     std::vector<Segment>& segs, std::vector<char>& valid) {
  segs.push_back({static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(ids.size())});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    tokens.push_back(ids[i]);
    pos.push_back(static_cast<int>(i));
    valid.push_back(ids[i] != Vocabulary::kPad);
  }
}

PackedBatch pack(const Seq2SeqModel& model, std::span<const SequencePair> batch) {
  PackedBatch pb;
  for (const auto& ex : batch) {
    check_ids(model, ex.input, "input");
    check_ids(model, ex.target, "target");
    append_sequence(ex.input, pb.src, pb.src_pos, pb.src_segs, pb.src_valid);
    const auto shifted = shift_right(ex.target);
    append_sequence(shifted, pb.dec_in, pb.dec_pos, pb.dec_segs, pb.dec_valid);
    pb.target.insert(pb.target.end(), ex.target.begin(), ex.target.end());
  }
  return pb;
}

Matrix embed(const ParameterSet& p, ParameterSet::Slot tokens, ParameterSet::Slot positions,
             std::span<const TokenId> ids, std::span<const int> pos) {
  const auto e = p.view(tokens);
  const auto pe = p.view(positions);
  Matrix x(static_cast<Eigen::Index>(ids.size()), e.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) x.row(i) = e.row(ids[i]) + pe.row(pos[i]);
  return x;
}

void embed_backward(const ParameterSet& p, ParameterSet::Slot tokens, ParameterSet::Slot positions,
                    std::span<const TokenId> ids, std::span<const int> pos, const Matrix& dx, Vector& grad) {
  auto de = p.view_in(tokens, grad);
  auto dpe = p.view_in(positions, grad);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    de.row(ids[i]) += dx.row(i);
    dpe.row(pos[i]) += dx.row(i);
  }
}

struct EncoderLayerCache {
  NormCache norm1;
  AttentionCache attn;
  Matrix drop1;
  NormCache norm2;
  FeedForwardCache ffn;
  Matrix drop2;
};

struct DecoderLayerCache {
  NormCache norm1;
  AttentionCache self_attn;
  Matrix drop1;
  NormCache norm2;
  AttentionCache cross_attn;
  Matrix drop2;
  NormCache norm3;
  FeedForwardCache ffn;
  Matrix drop3;
};

struct GraphCache {
  Matrix src_drop;
  std::vector<EncoderLayerCache> enc;
  NormCache enc_norm;
  Matrix memory;
  Matrix dec_drop;
  std::vector<DecoderLayerCache> dec;
  NormCache dec_norm;
  Matrix hidden;
};

AttentionShape shape_of(const ModelConfig& c) { return {c.heads, c.head_dim}; }

Matrix run_encoder(const Seq2SeqModel& model, const PackedBatch& pb, std::mt19937_64* rng, GraphCache* cache) {
  const auto& p = model.params();
  const auto& cfg = model.config();
  Matrix x = embed(p, model.token_embedding(), model.encoder_positions(), pb.src, pb.src_pos);
  Matrix mask = dropout_mask(x.rows(), x.cols(), cfg.dropout, rng);
  apply_mask(x, mask);
  if (cache) {
    cache->src_drop = std::move(mask);
    cache->enc.resize(model.encoder_layers().size());
  }
  for (std::size_t l = 0; l < model.encoder_layers().size(); ++l) {
    const auto& layer = model.encoder_layers()[l];
    EncoderLayerCache* lc = cache ? &cache->enc[l] : nullptr;
    const Matrix a = layer_norm(p, layer.norm1, x, lc ? &lc->norm1 : nullptr);
    Matrix att = attention(p, layer.self_attn, shape_of(cfg), a, a, pb.src_segs, pb.src_segs, pb.src_valid,
                           false, lc ? &lc->attn : nullptr);
    Matrix m1 = dropout_mask(att.rows(), att.cols(), cfg.dropout, rng);
    apply_mask(att, m1);
    x += att;
    const Matrix b = layer_norm(p, layer.norm2, x, lc ? &lc->norm2 : nullptr);
    Matrix f = feed_forward(p, layer.ffn, b, lc ? &lc->ffn : nullptr);
    Matrix m2 = dropout_mask(f.rows(), f.cols(), cfg.dropout, rng);
    apply_mask(f, m2);
    x += f;
    if (lc) {
      lc->drop1 = std::move(m1);
      lc->drop2 = std::move(m2);
    }
  }
  Matrix memory = layer_norm(p, model.encoder_final_norm(), x, cache ? &cache->enc_norm : nullptr);
  return memory;
}

/// Decoder over packed prefixes. With `cross_k`/`cross_v` the memory
/// projections are taken as given (decoding mode, every segment attends the
/// whole memory); otherwise they are computed from `memory` per segment.
Matrix run_decoder(const Seq2SeqModel& model, const PackedBatch& pb, const Matrix& memory,
                   std::span<const Segment> mem_segs, const std::vector<char>& mem_valid, std::mt19937_64* rng,
                   GraphCache* cache, const std::vector<Matrix>* cross_k = nullptr,
                   const std::vector<Matrix>* cross_v = nullptr) {
  const auto& p = model.params();
  const auto& cfg = model.config();
  Matrix y = embed(p, model.token_embedding(), model.decoder_positions(), pb.dec_in, pb.dec_pos);
  Matrix mask = dropout_mask(y.rows(), y.cols(), cfg.dropout, rng);
  apply_mask(y, mask);
  if (cache) {
    cache->dec_drop = std::move(mask);
    cache->dec.resize(model.decoder_layers().size());
  }
  for (std::size_t l = 0; l < model.decoder_layers().size(); ++l) {
    const auto& layer = model.decoder_layers()[l];
    DecoderLayerCache* lc = cache ? &cache->dec[l] : nullptr;
    const Matrix a = layer_norm(p, layer.norm1, y, lc ? &lc->norm1 : nullptr);
    Matrix s = attention(p, layer.self_attn, shape_of(cfg), a, a, pb.dec_segs, pb.dec_segs, pb.dec_valid, true,
                         lc ? &lc->self_attn : nullptr);
    Matrix m1 = dropout_mask(s.rows(), s.cols(), cfg.dropout, rng);
    apply_mask(s, m1);
    y += s;
    const Matrix b = layer_norm(p, layer.norm2, y, lc ? &lc->norm2 : nullptr);
    Matrix c = attention(p, layer.cross_attn, shape_of(cfg), b, memory, pb.dec_segs, mem_segs, mem_valid, false,
                         lc ? &lc->cross_attn : nullptr, cross_k ? &(*cross_k)[l] : nullptr,
                         cross_v ? &(*cross_v)[l] : nullptr);
    Matrix m2 = dropout_mask(c.rows(), c.cols(), cfg.dropout, rng);
    apply_mask(c, m2);
    y += c;
    const Matrix e = layer_norm(p, layer.norm3, y, lc ? &lc->norm3 : nullptr);
    Matrix f = feed_forward(p, layer.ffn, e, lc ? &lc->ffn : nullptr);
    Matrix m3 = dropout_mask(f.rows(), f.cols(), cfg.dropout, rng);
    apply_mask(f, m3);
    y += f;
    if (lc) {
      lc->drop1 = std::move(m1);
      lc->drop2 = std::move(m2);
      lc->drop3 = std::move(m3);
    }
  }
  return layer_norm(p, model.decoder_final_norm(), y, cache ? &cache->dec_norm : nullptr);
}

Matrix project_output(const Seq2SeqModel& model, const Matrix& hidden) {
  const auto& p = model.params();
  if (model.config().tie_embeddings) return hidden * p.view(model.token_embedding()).transpose();
  return linear(p, model.output_projection(), hidden);
}

Matrix run_forward(const Seq2SeqModel& model, const PackedBatch& pb, std::mt19937_64* rng, GraphCache* cache) {
  const Matrix memory = run_encoder(model, pb, rng, cache);
  Matrix hidden = run_decoder(model, pb, memory, pb.src_segs, pb.src_valid, rng, cache);
  Matrix logits = project_output(model, hidden);
  if (cache) {
    cache->memory = memory;
    cache->hidden = std::move(hidden);
  }
  return logits;
}

void run_backward(const Seq2SeqModel& model, const PackedBatch& pb, const GraphCache& cache,
                  const Matrix& d_logits, Vector& grad) {
  const auto& p = model.params();
  const auto& cfg = model.config();
  const AttentionShape shape = shape_of(cfg);

  Matrix dy;
  if (cfg.tie_embeddings) {
    p.view_in(model.token_embedding(), grad).noalias() += d_logits.transpose() * cache.hidden;
    dy = d_logits * p.view(model.token_embedding());
  } else {
    dy = linear_backward(p, model.output_projection(), cache.hidden, d_logits, grad);
  }
  dy = layer_norm_backward(p, model.decoder_final_norm(), cache.dec_norm, dy, grad);

  Matrix d_memory = Matrix::Zero(cache.memory.rows(), cache.memory.cols());
  for (std::size_t l = model.decoder_layers().size(); l-- > 0;) {
    const auto& layer = model.decoder_layers()[l];
    const auto& lc = cache.dec[l];
    Matrix df = dy;
    apply_mask(df, lc.drop3);
    dy += layer_norm_backward(p, layer.norm3, lc.norm3, feed_forward_backward(p, layer.ffn, lc.ffn, df, grad), grad);

    Matrix dc = dy;
    apply_mask(dc, lc.drop2);
    const Matrix db = attention_backward(p, layer.cross_attn, shape, lc.cross_attn, pb.dec_segs, pb.src_segs, dc,
                                         grad, d_memory);
    dy += layer_norm_backward(p, layer.norm2, lc.norm2, db, grad);

    Matrix ds = dy;
    apply_mask(ds, lc.drop1);
    Matrix da = Matrix::Zero(ds.rows(), ds.cols());
    da += attention_backward(p, layer.self_attn, shape, lc.self_attn, pb.dec_segs, pb.dec_segs, ds, grad, da);
    dy += layer_norm_backward(p, layer.norm1, lc.norm1, da, grad);
  }
  apply_mask(dy, cache.dec_drop);
  embed_backward(p, model.token_embedding(), model.decoder_positions(), pb.dec_in, pb.dec_pos, dy, grad);

  Matrix dx = layer_norm_backward(p, model.encoder_final_norm(), cache.enc_norm, d_memory, grad);
  for (std::size_t l = model.encoder_layers().size(); l-- > 0;) {
    const auto& layer = model.encoder_layers()[l];
    const auto& lc = cache.enc[l];
    Matrix df = dx;
    apply_mask(df, lc.drop2);
    dx += layer_norm_backward(p, layer.norm2, lc.norm2, feed_forward_backward(p, layer.ffn, lc.ffn, df, grad), grad);

    Matrix ds = dx;
    apply_mask(ds, lc.drop1);
    Matrix da = Matrix::Zero(ds.rows(), ds.cols());
    da += attention_backward(p, layer.self_attn, shape, lc.attn, pb.src_segs, pb.src_segs, ds, grad, da);
    dx += layer_norm_backward(p, layer.norm1, lc.norm1, da, grad);
  }
  apply_mask(dx, cache.src_drop);
  embed_backward(p, model.token_embedding(), model.encoder_positions(), pb.src, pb.src_pos, dx, grad);
}

/// Token-mean NLL; when `d_logits` is non-null it receives dLoss/dlogits.
double softmax_cross_entropy(const Matrix& logits, std::span<const TokenId> targets, Matrix* d_logits) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) {
    throw DimensionMismatch("logits rows do not match target length");
  }
  long count = 0;
  for (TokenId t : targets) count += t != Vocabulary::kPad;
  if (count == 0) throw InvalidArgument("nll_loss: every target position is PAD");
  if (d_logits) *d_logits = Matrix::Zero(logits.rows(), logits.cols());
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(count);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const TokenId t = targets[i];
    if (t == Vocabulary::kPad) continue;
    if (t < 0 || t >= logits.cols()) throw InvalidArgument("target id outside the vocabulary");
    const double row_max = logits.row(i).maxCoeff();
    const double lse = row_max + std::log((logits.row(i).array() - row_max).exp().sum());
    total += lse - logits(i, t);
    if (d_logits) {
      d_logits->row(i) = ((logits.row(i).array() - lse).exp() * inv).matrix();
      (*d_logits)(i, t) -= inv;
    }
  }
  return total * inv;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public entry points

std::vector<TokenId> shift_right(std::span<const TokenId> target) {
  std::vector<TokenId> out;
  out.reserve(target.size());
  out.push_back(Vocabulary::kBos);
  if (!target.empty()) out.insert(out.end(), target.begin(), target.end() - 1);
  return out;
}

Matrix forward(const Seq2SeqModel& model, std::span<const TokenId> input_ids,
               std::span<const TokenId> decoder_input_ids) {
  check_ids(model, input_ids, "input");
  check_ids(model, decoder_input_ids, "decoder input");
  PackedBatch pb;
  append_sequence(input_ids, pb.src, pb.src_pos, pb.src_segs, pb.src_valid);
  append_sequence(decoder_input_ids, pb.dec_in, pb.dec_pos, pb.dec_segs, pb.dec_valid);
  return run_forward(model, pb, nullptr, nullptr);
}

double nll_loss(const Matrix& logits, std::span<const TokenId> target_ids) {
  return softmax_cross_entropy(logits, target_ids, nullptr);
}

double loss_and_gradient(const Seq2SeqModel& model, std::span<const SequencePair> batch, Vector& grad,
                         ForwardMode mode) {
  if (grad.size() != model.params().size()) throw DimensionMismatch("gradient buffer size");
  if (batch.empty()) throw InvalidArgument("empty batch");
  const PackedBatch pb = pack(model, batch);
  GraphCache cache;
  const Matrix logits = run_forward(model, pb, mode.rng, &cache);
  Matrix d_logits;
  const double loss = softmax_cross_entropy(logits, pb.target, &d_logits);
  if (!std::isfinite(loss)) return loss;
  run_backward(model, pb, cache, d_logits, grad);
  return loss;
}

double batch_loss(const Seq2SeqModel& model, std::span<const SequencePair> batch, ForwardMode mode) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  const PackedBatch pb = pack(model, batch);
  return softmax_cross_entropy(run_forward(model, pb, mode.rng, nullptr), pb.target, nullptr);
}

EncodedInput encode_input(const Seq2SeqModel& model, std::span<const TokenId> input_ids) {
  check_ids(model, input_ids, "input");
  PackedBatch pb;
  append_sequence(input_ids, pb.src, pb.src_pos, pb.src_segs, pb.src_valid);
  EncodedInput enc;
  enc.input_ids.assign(input_ids.begin(), input_ids.end());
  enc.memory = run_encoder(model, pb, nullptr, nullptr);
  enc.key_valid = pb.src_valid;
  const auto& p = model.params();
  for (const auto& layer : model.decoder_layers()) {
    enc.cross_keys.push_back(linear(p, layer.cross_attn.k, enc.memory));
    enc.cross_values.push_back(linear(p, layer.cross_attn.v, enc.memory));
  }
  return enc;
}

Matrix next_token_log_probs(const Seq2SeqModel& model, const EncodedInput& encoded,
                            std::span<const std::vector<TokenId>> prefixes) {
  if (prefixes.empty()) return Matrix(0, model.config().vocab_size);
  PackedBatch pb;
  std::vector<Segment> mem_segs;
  for (const auto& prefix : prefixes) {
    check_ids(model, prefix, "decoder prefix");
    append_sequence(prefix, pb.dec_in, pb.dec_pos, pb.dec_segs, pb.dec_valid);
    mem_segs.push_back({0, encoded.memory.rows()});
  }
  const Matrix hidden = run_decoder(model, pb, encoded.memory, mem_segs, encoded.key_valid, nullptr, nullptr,
                                    &encoded.cross_keys, &encoded.cross_values);
  Matrix last(static_cast<Eigen::Index>(prefixes.size()), hidden.cols());
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    last.row(i) = hidden.row(pb.dec_segs[i].offset + pb.dec_segs[i].length - 1);
  }
  Matrix logits = project_output(model, last);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double row_max = logits.row(i).maxCoeff();
    const double lse = row_max + std::log((logits.row(i).array() - row_max).exp().sum());
    logits.row(i).array() -= lse;
  }
  return logits;
}

// ---------------------------------------------------------------------------
// Training

TrainSchedule TrainSchedule::paper_pretrain() {
  TrainSchedule s;
  s.stage = Stage::Pretrain;
  s.learning_rate = 1e-3;
  s.batch_size = 4096;
  s.schedule = LrSchedule::Constant;
  return s;
}

TrainSchedule TrainSchedule::paper_finetune() {
  TrainSchedule s;
  s.stage = Stage::Finetune;
  s.learning_rate = 5e-4;
  s.batch_size = 512;
  s.schedule = LrSchedule::WarmupCosine;
  s.warmup_steps = 100;
  return s;
}

long TrainSchedule::total_steps(std::size_t example_count) const {
  const long per_epoch = static_cast<long>((example_count + batch_size - 1) / batch_size);
  return per_epoch * epochs;
}

double TrainSchedule::lr_at(long step, long total) const {
  if (schedule == LrSchedule::Constant) return learning_rate;
  return warmup_cosine_lr(step, learning_rate, warmup_steps, total);
}

TrainResult train(Seq2SeqModel& model, std::span<const TaskExample> examples, const TrainSchedule& schedule) {
  if (!(schedule.learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
  if (schedule.batch_size < 1 || schedule.epochs < 0) throw InvalidArgument("invalid batch size or epochs");
  for (const auto& e : examples) {
    if (!stage_allows(schedule.stage, e.task)) {
      throw InvalidArgument("task " + std::string(task_name(e.task)) + " is not allowed in stage " +
                            std::string(stage_name(schedule.stage)));
    }
  }
  const long total = schedule.total_steps(examples.size());
  if (schedule.schedule == LrSchedule::WarmupCosine && schedule.warmup_steps > total && total > 0) {
    throw InvalidArgument("warmup_steps exceeds the total number of steps");
  }

  TrainResult result;
  AdamWOptions opts;
  opts.weight_decay = schedule.weight_decay;
  AdamW optimizer(model.params(), opts);
  std::mt19937_64 rng(schedule.seed);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  Vector grad = model.params().zeros();
  Vector last_good = model.params().values();
  std::vector<SequencePair> batch;
  long step = 0;

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    long batches = 0;
    for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(schedule.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) {
        const auto& e = examples[order[i]];
        batch.push_back({e.input_ids, e.target_ids});
      }
      grad.setZero();
      const double loss = loss_and_gradient(model, batch, grad, {&rng});
      if (!std::isfinite(loss) || !grad.allFinite()) {
        Seq2SeqModel good = model;
        good.params().values() = last_good;
        throw Seq2SeqDiverged("non-finite loss at step " + std::to_string(step), std::move(good));
      }
      last_good = model.params().values();
      const double lr = schedule.lr_at(step, total);
      optimizer.step(model.params(), grad, lr);
      result.log.push_back({step, lr, loss});
      epoch_sum += loss;
      ++batches;
      ++step;
      if (schedule.checkpoint_every > 0 && step % schedule.checkpoint_every == 0 &&
          !schedule.checkpoint_path.empty()) {
        model.save(schedule.checkpoint_path);
      }
    }
    result.epoch_loss.push_back(batches ? epoch_sum / batches : 0.0);
    spdlog::debug("epoch {} mean loss {:.5f}", epoch + 1, result.epoch_loss.back());
  }
  model.add_steps(step);
  if (step > 0) model.set_stage_tag(std::string(stage_name(schedule.stage)));
  return result;
}

void write_train_log(const TrainResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  out << "step,lr,loss\n";
  out.precision(17);
  for (const auto& e : result.log) out << e.step << ',' << e.lr << ',' << e.loss << '\n';
}

}  // namespace mqlrec
