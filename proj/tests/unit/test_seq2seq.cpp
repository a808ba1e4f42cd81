// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "mqlrec/error.hpp"
#include "mqlrec/seq2seq.hpp"
#include "support/oracles.hpp"

namespace mqlrec {
namespace {

namespace fs = std::filesystem;

constexpr int kVocab = 40;

std::vector<TokenId> random_ids(std::mt19937_64& rng, std::size_t n, TokenId lo = 3, TokenId hi = kVocab - 1) {
  std::uniform_int_distribution<TokenId> d(lo, hi);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

double brute_force_nll(const Matrix& logits, std::span<const TokenId> target) {
  long double total = 0.0L;
  int count = 0;
  for (std::size_t r = 0; r < target.size(); ++r) {
    if (target[r] == Vocabulary::kPad) continue;
    long double sum = 0.0L;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) sum += std::exp(static_cast<long double>(logits(r, c)));
    total += std::log(sum) - logits(r, target[r]);
    ++count;
  }
  return static_cast<double>(total / count);
}

TEST(ModelConfig, ProfilesAndJson) {
  const auto paper = ModelConfig::paper(100);
  EXPECT_EQ(paper.enc_layers, 4);
  EXPECT_EQ(paper.dec_layers, 4);
  EXPECT_EQ(paper.heads, 6);
  EXPECT_EQ(paper.head_dim, 64);
  EXPECT_EQ(paper.ffn_dim, 1024);
  EXPECT_EQ(paper.model_dim, 128);
  const auto desk = ModelConfig::desk(100);
  EXPECT_EQ(desk.enc_layers, 2);
  EXPECT_EQ(desk.heads, 4);
  EXPECT_EQ(desk.head_dim, 16);
  EXPECT_EQ(desk.model_dim, 64);
  EXPECT_EQ(config_from_json(config_to_json(desk)), desk);
  ModelConfig bad = desk;
  bad.vocab_size = 0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(Forward, ShapeEvenForTinyVocab) {
  auto c = testing::micro_model_config(4);
  const Seq2SeqModel m(c);
  const std::vector<TokenId> in{3, 3}, dec{1, 3, 3};
  const Matrix logits = forward(m, in, dec);
  EXPECT_EQ(logits.rows(), 3);
  EXPECT_EQ(logits.cols(), 4);
  EXPECT_THROW(forward(m, std::vector<TokenId>{5}, dec), InvalidArgument);
  EXPECT_THROW(forward(m, std::vector<TokenId>(17, 3), dec), InvalidArgument);
}

TEST(Forward, TrailingPaddingDoesNotChangeLogits) {
  std::mt19937_64 rng(1);
  const Seq2SeqModel m(testing::micro_model_config(kVocab));
  for (int trial = 0; trial < 5; ++trial) {
    auto in = random_ids(rng, 5);
    auto dec = random_ids(rng, 4);
    dec[0] = Vocabulary::kBos;
    const Matrix base = forward(m, in, dec);
    auto in_padded = in;
    in_padded.insert(in_padded.end(), {0, 0, 0});
    auto dec_padded = dec;
    dec_padded.push_back(Vocabulary::kPad);
    const Matrix padded = forward(m, in_padded, dec_padded);
    EXPECT_LT((padded.topRows(4) - base).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Forward, DecoderIsCausal) {
  std::mt19937_64 rng(2);
  const Seq2SeqModel m(testing::micro_model_config(kVocab));
  auto in = random_ids(rng, 6);
  auto dec = random_ids(rng, 5);
  dec[0] = Vocabulary::kBos;
  const Matrix base = forward(m, in, dec);
  for (std::size_t t = 1; t < dec.size(); ++t) {
    auto changed = dec;
    changed[t] = changed[t] == 5 ? 6 : 5;
    const Matrix after = forward(m, in, changed);
    EXPECT_EQ(after.topRows(t), base.topRows(t)) << "position " << t;
    EXPECT_GT((after.row(t) - base.row(t)).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(NllLoss, UniformLogitsGiveLogVocab) {
  const Matrix logits = Matrix::Constant(3, 17, 0.3);
  const std::vector<TokenId> target{4, 5, 2};
  EXPECT_NEAR(nll_loss(logits, target), std::log(17.0), 1e-14);
}

TEST(NllLoss, LargeMarginApproachesZero) {
  Matrix logits = Matrix::Zero(2, 5);
  logits(0, 3) = 1e3;
  logits(1, 2) = 1e3;
  EXPECT_LT(nll_loss(logits, std::vector<TokenId>{3, 2}), 1e-300);
}

TEST(NllLoss, MatchesBruteForceOracleAndIgnoresPad) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 4.0);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix logits(6, 11);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = g(rng);
    auto target = random_ids(rng, 6, 0, 10);
    target[0] = 4;
    const double expect = brute_force_nll(logits, target);
    EXPECT_LT(std::abs(nll_loss(logits, target) - expect) / std::abs(expect), 1e-10);
  }
  EXPECT_THROW(nll_loss(Matrix::Zero(2, 3), std::vector<TokenId>{0, 0}), InvalidArgument);
}

TEST(LogProbs, DecodingSessionMatchesFullForwardAndSumsToOne) {
  std::mt19937_64 rng(4);
  const Seq2SeqModel m(testing::micro_model_config(kVocab));
  const auto in = random_ids(rng, 7);
  const auto encoded = encode_input(m, in);
  const std::vector<TokenId> dec{1, 9, 12, 20};
  std::vector<std::vector<TokenId>> prefixes;
  for (std::size_t n = 1; n <= dec.size(); ++n) prefixes.emplace_back(dec.begin(), dec.begin() + n);
  const Matrix lp = next_token_log_probs(m, encoded, prefixes);
  const Matrix logits = forward(m, in, dec);
  for (Eigen::Index r = 0; r < lp.rows(); ++r) {
    EXPECT_NEAR(lp.row(r).array().exp().sum(), 1.0, 1e-12);
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    EXPECT_LT((lp.row(r).array() - (logits.row(r).array() - lse)).abs().maxCoeff(), 1e-12);
  }
}

class Seq2SeqGradient : public ::testing::TestWithParam<bool> {};

TEST_P(Seq2SeqGradient, MatchesCentralDifferences) {
  auto c = testing::micro_model_config(kVocab);
  c.tie_embeddings = GetParam();
  Seq2SeqModel m(c);
  const std::vector<TokenId> a{5, 6, 7, 0, 9}, b{10, 11, 2}, a2{12, 13}, b2{14, 0, 2};
  const SequencePair batch[] = {{a, b}, {a2, b2}};
  Vector grad = m.params().zeros();
  loss_and_gradient(m, batch, grad);
  const auto check = testing::check_gradient(m.params().values(), grad,
                                             testing::sample_indices(m.params().size(), m.params().size()),
                                             [&] { return batch_loss(m, batch); });
  EXPECT_LT(check.relative_error, 1e-3);
  EXPECT_LT(check.worst_coordinate, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(TiedAndUntied, Seq2SeqGradient, ::testing::Bool());

TEST(LossAndGradient, DropoutOnlyWithRng) {
  auto c = testing::micro_model_config(kVocab);
  c.dropout = 0.3;
  const Seq2SeqModel m(c);
  const std::vector<TokenId> a{5, 6, 7}, b{10, 11, 2};
  const SequencePair batch[] = {{a, b}};
  const double eval = batch_loss(m, batch);
  EXPECT_EQ(eval, batch_loss(m, batch));
  std::mt19937_64 rng(1);
  EXPECT_NE(batch_loss(m, batch, {&rng}), eval);
}

TEST(Schedule, WarmupThenCosineDecay) {
  TrainSchedule s = TrainSchedule::paper_finetune();
  s.warmup_steps = 10;
  const long total = 100;
  double prev = -1.0;
  for (long t = 0; t < 10; ++t) {
    const double lr = s.lr_at(t, total);
    EXPECT_GE(lr, prev);
    prev = lr;
  }
  EXPECT_NEAR(s.lr_at(10, total), s.learning_rate, 1e-15);
  for (long t = 11; t < total; ++t) {
    const double lr = s.lr_at(t, total);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_GE(prev, 0.0);
  TrainSchedule p = TrainSchedule::paper_pretrain();
  EXPECT_EQ(p.batch_size, 4096);
  EXPECT_EQ(p.learning_rate, 1e-3);
  EXPECT_EQ(p.lr_at(0, 50), p.lr_at(49, 50));
  EXPECT_EQ(s.total_steps(1025), 10 * 3);
}

std::vector<TaskExample> memorization_set(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TaskExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    TaskExample e;
    e.task = TaskKind::NigText;
    e.input_ids = random_ids(rng, 6);
    e.target_ids = random_ids(rng, 3);
    e.target_ids.push_back(Vocabulary::kEos);
    e.user = "u" + std::to_string(i);
    out.push_back(std::move(e));
  }
  return out;
}

TEST(Train, ZeroEpochsLeaveParametersUnchanged) {
  Seq2SeqModel m(testing::micro_model_config(kVocab));
  const ParameterSet before = m.params();
  TrainSchedule s;
  s.epochs = 0;
  train(m, memorization_set(5, 1), s);
  EXPECT_EQ(m.params(), before);
}

TEST(Train, MemorizesFiftyExamplesInTwoHundredSteps) {
  ModelConfig c = ModelConfig::desk(kVocab);
  c.dropout = 0.0;
  c.max_positions = 16;
  c.seed = 2;
  Seq2SeqModel m(c);
  const auto data = memorization_set(50, 3);
  TrainSchedule s;
  s.learning_rate = 3e-3;
  s.weight_decay = 0.0;
  s.batch_size = 10;
  s.epochs = 40;
  s.schedule = LrSchedule::Constant;
  s.seed = 1;
  ASSERT_EQ(s.total_steps(data.size()), 200);
  std::vector<SequencePair> pairs;
  for (const auto& e : data) pairs.push_back({e.input_ids, e.target_ids});
  const double initial = batch_loss(m, pairs);
  const auto result = train(m, data, s);
  EXPECT_EQ(result.log.size(), 200u);
  const double final_loss = batch_loss(m, pairs);
  EXPECT_LT(final_loss, 0.1 * initial) << "initial " << initial;
  EXPECT_EQ(m.stage_tag(), "finetune");
  EXPECT_EQ(m.steps_trained(), 200);
}

TEST(Train, RejectsTasksOutsideStage) {
  Seq2SeqModel m(testing::micro_model_config(kVocab));
  auto data = memorization_set(3, 1);
  data[1].task = TaskKind::AigText;
  TrainSchedule s;
  s.stage = Stage::Pretrain;
  EXPECT_THROW(train(m, data, s), InvalidArgument);
}

TEST(Train, DeterministicUnderSeed) {
  const auto data = memorization_set(12, 5);
  TrainSchedule s;
  s.batch_size = 4;
  s.epochs = 2;
  s.seed = 9;
  Seq2SeqModel a(testing::micro_model_config(kVocab)), b(testing::micro_model_config(kVocab));
  auto c = testing::micro_model_config(kVocab);
  c.dropout = 0.1;
  Seq2SeqModel d1(c), d2(c);
  train(a, data, s);
  train(b, data, s);
  train(d1, data, s);
  train(d2, data, s);
  EXPECT_EQ(a.params(), b.params());
  EXPECT_EQ(d1.params(), d2.params());
}

TEST(Checkpoint, RoundTripIsBitExactAndResumable) {
  const fs::path dir = fs::temp_directory_path() / "mqlrec_s2s_ckpt";
  fs::create_directories(dir);
  Seq2SeqModel m(testing::micro_model_config(kVocab));
  TrainSchedule pre;
  pre.stage = Stage::Pretrain;
  pre.batch_size = 4;
  pre.epochs = 1;
  train(m, memorization_set(8, 1), pre);
  EXPECT_EQ(m.stage_tag(), "pretrain");
  m.save(dir / "m.ckpt");
  auto back = Seq2SeqModel::load(dir / "m.ckpt");
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(back.stage_tag(), "pretrain");
  EXPECT_EQ(back.steps_trained(), m.steps_trained());
  const std::vector<TokenId> in{4, 5, 6}, dec{1, 7};
  EXPECT_EQ(forward(back, in, dec), forward(m, in, dec));

  TrainSchedule ft;
  ft.batch_size = 4;
  ft.epochs = 1;
  train(back, memorization_set(8, 2), ft);
  EXPECT_EQ(back.stage_tag(), "finetune");
  EXPECT_EQ(back.steps_trained(), m.steps_trained() + 2);

  fs::resize_file(dir / "m.ckpt", fs::file_size(dir / "m.ckpt") / 2);
  EXPECT_THROW(Seq2SeqModel::load(dir / "m.ckpt"), CorruptCheckpoint);
  fs::remove_all(dir);
}

TEST(ShiftRight, PrependsBosAndDropsLast) {
  EXPECT_EQ(shift_right(std::vector<TokenId>{7, 8, 2}), (std::vector<TokenId>{1, 7, 8}));
}

}  // namespace
}  // namespace mqlrec
