// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "mqlrec/error.hpp"
#include "mqlrec/quantlang.hpp"
#include "support/oracles.hpp"

namespace mqlrec {
namespace {

namespace fs = std::filesystem;
using testing::fake_result;

using Results = std::vector<std::pair<ItemId, QuantizationResult>>;

Matrix distances_with_last_ranking(int levels, int k, const std::vector<int>& last_order, double base = 1.0) {
  Matrix d = Matrix::Constant(levels, k, 10.0);
  for (int r = 0; r < k; ++r) d(levels - 1, last_order[r]) = base + r;
  for (int l = 0; l + 1 < levels; ++l) {
    for (int c = 0; c < k; ++c) d(l, c) = 1.0 + c;
  }
  return d;
}

TEST(Vocabulary, FourLevelsOf256Codes) {
  const auto v = build_vocabulary(4, 256, 6);
  EXPECT_EQ(v.size(), 2075u);
  EXPECT_EQ(v.code_token_count(), 2048u);
  int code = 0, prompt = 0, special = 0;
  for (TokenId id = 0; id < static_cast<TokenId>(v.size()); ++id) {
    if (v.code_info(id)) {
      ++code;
    } else if (v.prompt_task(id)) {
      ++prompt;
    } else {
      ++special;
    }
  }
  EXPECT_EQ(code, 2048);
  EXPECT_EQ(prompt, 24);
  EXPECT_EQ(special, 3);
  EXPECT_EQ(v.token(Vocabulary::kPad), "<pad>");
}

TEST(Vocabulary, SmallestCase) {
  const auto v = build_vocabulary(1, 2, 0);
  std::set<std::string> codes;
  for (TokenId id = 0; id < static_cast<TokenId>(v.size()); ++id) {
    if (v.code_info(id)) codes.insert(v.token(id));
  }
  EXPECT_EQ(codes, (std::set<std::string>{"<a_0>", "<a_1>", "<A_0>", "<A_1>"}));
  EXPECT_EQ(v.size(), 7u);
}

TEST(Vocabulary, IdsRoundTripAndLayout) {
  const auto v = build_vocabulary(3, 5, 2);
  for (TokenId id = 0; id < static_cast<TokenId>(v.size()); ++id) EXPECT_EQ(v.id(v.token(id)), id);
  // Specials, then text level-major, then image level-major, then prompts task-major.
  EXPECT_EQ(v.token(3), "<a_0>");
  EXPECT_EQ(v.token(3 + 5), "<b_0>");
  EXPECT_EQ(v.token(3 + 15), "<A_0>");
  EXPECT_EQ(v.code_token(Modality::Image, 2, 4), 3 + 29);
  EXPECT_EQ(v.prompt_tokens(1)[0], 3 + 30 + 4);
  EXPECT_EQ(v.prompt_task(3 + 30 + 4), 1);
  EXPECT_THROW(v.id("<zz>"), TokenError);
}

TEST(Vocabulary, RejectsTooManyLevels) {
  EXPECT_NO_THROW(build_vocabulary(26, 2, 0));
  EXPECT_THROW(build_vocabulary(27, 2, 0), InvalidArgument);
  EXPECT_THROW(build_vocabulary(2, 1, 0), InvalidArgument);
}

TEST(Vocabulary, SaveLoadRoundTrip) {
  const auto v = build_vocabulary(2, 4, 6);
  const fs::path p = fs::temp_directory_path() / "mqlrec_vocab_rt.txt";
  v.save(p);
  const auto back = Vocabulary::load(p);
  EXPECT_EQ(back, v);
  EXPECT_EQ(back.levels(), 2);
  EXPECT_EQ(back.codebook_size(), 4);
  EXPECT_EQ(back.task_count(), 6);
  fs::remove(p);
}

TEST(Tokens, TextExample) {
  const auto t = tuple_to_tokens(Modality::Text, {2, 3, 1, 6}, 256);
  EXPECT_EQ(t, (std::vector<std::string>{"<a_2>", "<b_3>", "<c_1>", "<d_6>"}));
}

TEST(Tokens, ImageExample) {
  const auto t = tuple_to_tokens(Modality::Image, {1, 4, 2, 6}, 256);
  EXPECT_EQ(t, (std::vector<std::string>{"<A_1>", "<B_4>", "<C_2>", "<D_6>"}));
}

TEST(Tokens, ZeroTuple) {
  EXPECT_EQ(tuple_to_tokens(Modality::Text, {0, 0, 0, 0}, 256),
            (std::vector<std::string>{"<a_0>", "<b_0>", "<c_0>", "<d_0>"}));
}

TEST(Tokens, OutOfRangeCode) {
  EXPECT_THROW(tuple_to_tokens(Modality::Text, {0, 256}, 256), TokenError);
  EXPECT_THROW(tuple_to_tokens(Modality::Text, {-1}, 256), TokenError);
}

TEST(Tokens, InverseOfExample) {
  const auto tokens = split_tokens("<a_2><b_3><c_1><d_6>");
  const auto [m, code] = tokens_to_tuple(tokens);
  EXPECT_EQ(m, Modality::Text);
  EXPECT_EQ(code, (CodeTuple{2, 3, 1, 6}));
}

TEST(Tokens, RandomRoundTrip) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> code(0, 255), len(1, 6), mod(0, 1);
  for (int i = 0; i < 1000; ++i) {
    CodeTuple t(len(rng));
    for (auto& c : t) c = code(rng);
    const Modality m = mod(rng) ? Modality::Image : Modality::Text;
    const auto tokens = tuple_to_tokens(m, t, 256);
    const auto [m2, t2] = tokens_to_tuple(tokens);
    ASSERT_EQ(m2, m);
    ASSERT_EQ(t2, t);
  }
}

TEST(Tokens, ErrorsCarryKinds) {
  auto kind_of = [](std::vector<std::string> tokens) {
    try {
      tokens_to_tuple(tokens);
    } catch (const TokenError& e) {
      return e.kind();
    }
    return std::string("none");
  };
  EXPECT_EQ(kind_of({"<a_2>", "<A_3>"}), "MixedModality");
  EXPECT_EQ(kind_of({"<b_2>", "<a_3>"}), "LevelOrder");
  EXPECT_EQ(kind_of({"<a_2>", "hello"}), "UnknownToken");
  EXPECT_THROW(split_tokens("<a_1>x<b_2>"), TokenError);
}

TEST(Tokens, PrefixIdentifiesModalityAndLevel) {
  for (int l = 0; l < 26; ++l) {
    const auto t = parse_code_token(code_token_string(Modality::Image, l, 7));
    ASSERT_TRUE(t);
    EXPECT_EQ(t->modality, Modality::Image);
    EXPECT_EQ(t->level, l);
    EXPECT_EQ(t->code, 7);
  }
  EXPECT_FALSE(parse_code_token("<pad>"));
}

TEST(OccupancyTrie, CountsAndFullness) {
  OccupancyTrie t(2, 2);
  EXPECT_TRUE(t.insert({0, 0}));
  EXPECT_FALSE(t.insert({0, 0}));
  const std::vector<int> p0{0};
  EXPECT_FALSE(t.full(p0));
  t.insert({0, 1});
  EXPECT_TRUE(t.full(p0));
  EXPECT_EQ(t.count_under(p0), 2);
  EXPECT_EQ(t.count_under(std::span<const int>{}), 2);
  EXPECT_TRUE(t.contains({0, 1}));
  EXPECT_FALSE(t.contains({1, 1}));
}

TEST(ResolveCollisions, NoCollisionsKeepsAssignments) {
  Results r;
  r.emplace_back("x", fake_result({0, 1}, Matrix::Ones(2, 3)));
  r.emplace_back("y", fake_result({2, 1}, Matrix::Ones(2, 3)));
  const auto table = resolve_collisions(r, 3, 2, Modality::Text);
  EXPECT_EQ(table.code("x"), (CodeTuple{0, 1}));
  EXPECT_EQ(table.code("y"), (CodeTuple{2, 1}));
  EXPECT_FALSE(table.provenance("x").reassigned);
}

TEST(ResolveCollisions, SecondItemTakesClosestFreeLastLevelCode) {
  Results r;
  r.emplace_back("first", fake_result({1, 1}, distances_with_last_ranking(2, 4, {1, 0, 2, 3}, 0.5)));
  r.emplace_back("second", fake_result({1, 1}, distances_with_last_ranking(2, 4, {1, 3, 0, 2}, 1.0)));
  const auto table = resolve_collisions(r, 4, 2, Modality::Text);
  EXPECT_EQ(table.code("first"), (CodeTuple{1, 1}));
  EXPECT_EQ(table.code("second"), (CodeTuple{1, 3}));
  EXPECT_EQ(table.provenance("second"), (Provenance{true, {1}}));
  const auto oracle = testing::collision_oracle(r, 4, 2);
  EXPECT_EQ(oracle.at("second"), (CodeTuple{1, 3}));
}

TEST(ResolveCollisions, ClosestMemberKeepsTupleRegardlessOfInputOrder) {
  Results r;
  r.emplace_back("a", fake_result({0, 0}, distances_with_last_ranking(2, 4, {0, 1, 2, 3}, 2.0)));
  r.emplace_back("b", fake_result({0, 0}, distances_with_last_ranking(2, 4, {0, 1, 2, 3}, 0.5)));
  const auto table = resolve_collisions(r, 4, 2, Modality::Text);
  EXPECT_EQ(table.code("b"), (CodeTuple{0, 0}));
  EXPECT_EQ(table.code("a"), (CodeTuple{0, 1}));
}

TEST(ResolveCollisions, ExhaustedPrefixBacktracksOneLevel) {
  // K=2, L=2: (0,1) is taken by "d"; three items collide on (0,0).
  Results r;
  const std::vector<int> order{0, 1};
  r.emplace_back("c1", fake_result({0, 0}, distances_with_last_ranking(2, 2, order, 0.1)));
  r.emplace_back("c2", fake_result({0, 0}, distances_with_last_ranking(2, 2, order, 0.2)));
  r.emplace_back("c3", fake_result({0, 0}, distances_with_last_ranking(2, 2, order, 0.3)));
  r.emplace_back("d", fake_result({0, 1}, distances_with_last_ranking(2, 2, {1, 0}, 0.1)));
  const auto table = resolve_collisions(r, 2, 2, Modality::Text);
  EXPECT_EQ(table.code("c1"), (CodeTuple{0, 0}));
  EXPECT_EQ(table.code("d"), (CodeTuple{0, 1}));
  EXPECT_EQ(table.code("c2")[0], 1);
  EXPECT_EQ(table.code("c3")[0], 1);
  // Brute-force occupancy: every tuple used once, all four slots filled.
  std::set<CodeTuple> used;
  for (const auto& [item, code] : table.codes()) EXPECT_TRUE(used.insert(code).second);
  EXPECT_EQ(used.size(), 4u);
  EXPECT_EQ(table.code("c2"), (CodeTuple{1, 0}));
  EXPECT_EQ(table.code("c3"), (CodeTuple{1, 1}));
  EXPECT_EQ(table.provenance("c2").changed_levels, (std::vector<int>{0}));
  EXPECT_EQ(table.provenance("c3").changed_levels, (std::vector<int>{0, 1}));
  const auto oracle = testing::collision_oracle(r, 2, 2);
  for (const auto& [item, code] : oracle) EXPECT_EQ(table.code(item), code) << item;
}

TEST(ResolveCollisions, CapacityExhaustedIsReported) {
  Results r;
  for (int i = 0; i < 5; ++i) {
    r.emplace_back("i" + std::to_string(i), fake_result({0, 0}, Matrix::Ones(2, 2)));
  }
  EXPECT_THROW(resolve_collisions(r, 2, 2, Modality::Text), CapacityExhausted);
}

TEST(ResolveCollisions, MissingDistancesRejected) {
  Results r;
  r.emplace_back("x", fake_result({0, 0}, Matrix::Ones(1, 2)));
  EXPECT_THROW(resolve_collisions(r, 2, 2, Modality::Text), InvalidArgument);
}

TEST(ResolveCollisions, RandomTablesMatchOracle) {
  std::mt19937_64 rng(77);
  const std::vector<std::pair<int, int>> shapes{{2, 2}, {2, 3}, {3, 2}, {4, 2}, {4, 3}, {5, 2}, {16, 2}, {3, 4}};
  for (int trial = 0; trial < 120; ++trial) {
    const auto [k, levels] = shapes[trial % shapes.size()];
    long capacity = 1;
    for (int l = 0; l < levels; ++l) capacity *= k;
    const std::size_t n = 1 + rng() % capacity;
    const int pool = 1 + static_cast<int>(rng() % 4);
    const auto r = testing::random_collision_table(rng, k, levels, n, pool);
    const auto table = resolve_collisions(r, k, levels, Modality::Text);
    const auto oracle = testing::collision_oracle(r, k, levels);
    ASSERT_EQ(oracle.size(), n);
    for (const auto& [item, code] : oracle) ASSERT_EQ(table.code(item), code) << "trial " << trial << " " << item;
    // Minimal disturbance: a change confined to the last level keeps the prefix.
    for (const auto& [item, q] : r) {
      const auto& prov = table.provenance(item);
      const auto& code = table.code(item);
      for (int l = 0; l < levels; ++l) {
        const bool changed = std::find(prov.changed_levels.begin(), prov.changed_levels.end(), l) !=
                             prov.changed_levels.end();
        EXPECT_EQ(changed, code[l] != q.code[l]);
      }
    }
    // Determinism.
    EXPECT_EQ(resolve_collisions(r, k, levels, Modality::Text), table);
  }
}

TEST(CodeTable, MergeLookupAndRoundTrip) {
  const auto vocab = build_vocabulary(2, 4, 6);
  ModalityCodeTable text(Modality::Text, 2, 4), image(Modality::Image, 2, 4);
  text.assign("x", {0, 1});
  text.assign("y", {3, 2});
  image.assign("x", {1, 1});
  image.assign("y", {0, 0});
  EXPECT_THROW(text.assign("z", {0, 1}), InvalidArgument);
  EXPECT_THROW(text.assign("z", {0, 4}), InvalidArgument);
  const auto merged = merge_modalities(text, image);
  EXPECT_EQ(merged.get(Modality::Text).code("y"), (CodeTuple{3, 2}));
  EXPECT_EQ(merged.get(Modality::Image).code("x"), (CodeTuple{1, 1}));
  const fs::path p = fs::temp_directory_path() / "mqlrec_codes_rt.tsv";
  write_code_table(merged, p);
  EXPECT_EQ(read_code_table(p, vocab), merged);
  fs::remove(p);

  ModalityCodeTable other(Modality::Image, 2, 4);
  other.assign("x", {1, 1});
  EXPECT_THROW(merge_modalities(text, other), InvalidArgument);
  EXPECT_THROW(merge_modalities(image, text), InvalidArgument);
}

}  // namespace
}  // namespace mqlrec
