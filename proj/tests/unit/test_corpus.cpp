// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "mqlrec/corpus.hpp"
#include "mqlrec/error.hpp"

namespace mqlrec {
namespace {

namespace fs = std::filesystem;

// Items "a".."z" with distinct text and image tuples on an L=4, K=8 grid.
struct Fixture {
  Vocabulary vocab = build_vocabulary(4, 8, kTaskCount);
  ItemCodeTable table;

  Fixture() {
    ModalityCodeTable text(Modality::Text, 4, 8), image(Modality::Image, 4, 8);
    for (int i = 0; i < 26; ++i) {
      const ItemId id(1, static_cast<char>('a' + i));
      text.assign(id, {i % 8, i / 8, 1, 2});
      image.assign(id, {(i + 3) % 8, 7 - i / 8, 0, 5});
    }
    table = merge_modalities(std::move(text), std::move(image));
  }
};

InteractionDataset dataset(std::vector<std::pair<std::string, std::string>> rows) {
  InteractionDataset d;
  for (const auto& [user, items] : rows) {
    UserSequence s{user, {}};
    for (char c : items) s.items.emplace_back(1, c);
    d.users.push_back(std::move(s));
  }
  return d;
}

TEST(SplitLeaveOneOut, FiveItems) {
  const auto split = split_leave_one_out(dataset({{"u", "abcde"}}));
  ASSERT_EQ(split.users.size(), 1u);
  const auto& u = split.users[0];
  EXPECT_EQ(u.train_prefix, (std::vector<ItemId>{"a", "b", "c"}));
  EXPECT_EQ(u.valid_target, "d");
  EXPECT_EQ(u.test_target, "e");
}

TEST(SplitLeaveOneOut, MinimalAndTooShortUsers) {
  const auto split = split_leave_one_out(dataset({{"u1", "abc"}, {"u2", "ab"}}));
  ASSERT_EQ(split.users.size(), 1u);
  EXPECT_EQ(split.warnings.size(), 1u);
  Fixture f;
  const auto nig = build_nig(split, f.table, f.vocab, Modality::Text);
  EXPECT_TRUE(nig.train.empty());
  ASSERT_EQ(nig.valid.size(), 1u);
  EXPECT_EQ(nig.valid[0].target_item, "b");
  EXPECT_EQ(nig.valid[0].input_ids.size(), 4u + 4u);
  EXPECT_EQ(nig.test[0].target_item, "c");
  EXPECT_EQ(nig.test[0].input_ids.size(), 4u + 8u);
}

TEST(BuildNig, LengthsAndTokens) {
  Fixture f;
  const auto split = split_leave_one_out(dataset({{"u", "abcdef"}}));
  const auto nig = build_nig(split, f.table, f.vocab, Modality::Text);
  // Train prefix a,b,c,d: targets b,c,d with histories of length 1..3.
  ASSERT_EQ(nig.train.size(), 3u);
  const auto& e = nig.train[2];
  EXPECT_EQ(e.target_item, "d");
  EXPECT_EQ(e.input_ids.size(), 16u);
  EXPECT_EQ(e.target_ids.size(), 5u);
  EXPECT_EQ(e.target_ids.back(), Vocabulary::kEos);
  const auto prompt = f.vocab.prompt_tokens(task_index(TaskKind::NigText));
  EXPECT_TRUE(std::equal(prompt.begin(), prompt.end(), e.input_ids.begin()));
  for (std::size_t i = 4; i < e.input_ids.size(); ++i) {
    const auto info = f.vocab.code_info(e.input_ids[i]);
    ASSERT_TRUE(info);
    EXPECT_EQ(info->modality, Modality::Text);
    EXPECT_EQ(f.vocab.token(e.input_ids[i])[1], static_cast<char>('a' + info->level));
  }
}

TEST(BuildNig, PrefixOfTwoGivesOneExample) {
  Fixture f;
  const auto nig = build_nig(split_leave_one_out(dataset({{"u", "abcd"}})), f.table, f.vocab, Modality::Image);
  ASSERT_EQ(nig.train.size(), 1u);
  EXPECT_EQ(nig.train[0].target_item, "b");
}

TEST(BuildNig, HistoryTruncatedToMostRecent) {
  Fixture f;
  const auto split = split_leave_one_out(dataset({{"u", "abcdefghij"}}));
  const auto nig = build_nig(split, f.table, f.vocab, Modality::Text, {3});
  EXPECT_EQ(nig.test[0].input_ids.size(), 4u + 3u * 4u);
  const auto tail = f.vocab.encode_tuple(Modality::Text, f.table.text.code("i"));
  EXPECT_TRUE(std::equal(tail.begin(), tail.end(), nig.test[0].input_ids.end() - 4));
}

TEST(BuildAig, CrossesModalitiesAndMatchesNigTargets) {
  Fixture f;
  const auto split = split_leave_one_out(dataset({{"u1", "abcdef"}, {"u2", "ghijklm"}}));
  const auto aig = build_aig(split, f.table, f.vocab, TaskKind::AigImage);
  const auto nig = build_nig(split, f.table, f.vocab, Modality::Image);
  ASSERT_EQ(aig.train.size(), nig.train.size());
  for (std::size_t i = 0; i < aig.train.size(); ++i) {
    const auto& e = aig.train[i];
    EXPECT_EQ(e.target_ids, nig.train[i].target_ids);
    EXPECT_EQ(e.target_item, nig.train[i].target_item);
    for (std::size_t j = 4; j < e.input_ids.size(); ++j) {
      EXPECT_EQ(f.vocab.code_info(e.input_ids[j])->modality, Modality::Text);
    }
    for (std::size_t j = 0; j + 1 < e.target_ids.size(); ++j) {
      EXPECT_EQ(f.vocab.code_info(e.target_ids[j])->modality, Modality::Image);
    }
  }
  EXPECT_THROW(build_aig(split, f.table, f.vocab, TaskKind::NigText), InvalidArgument);
}

TEST(BuildQla, RunningExample) {
  const auto vocab = build_vocabulary(4, 256, kTaskCount);
  ModalityCodeTable text(Modality::Text, 4, 256), image(Modality::Image, 4, 256);
  for (const ItemId id : {"x", "y", "z"}) {
    const int o = id[0] - 'x';
    text.assign(id, {2 + o, 3, 1, 6});
    image.assign(id, {1 + o, 4, 2, 6});
  }
  const auto table = merge_modalities(text, image);
  const auto split = split_leave_one_out(dataset({{"u", "xyz"}}));
  const auto t2i = build_qla(split, table, vocab, TaskKind::QlaTextToImage);
  ASSERT_EQ(t2i.train.size(), 1u);
  const auto& e = t2i.train[0];
  std::string in, out;
  for (std::size_t i = 4; i < e.input_ids.size(); ++i) in += vocab.token(e.input_ids[i]);
  for (std::size_t i = 0; i + 1 < e.target_ids.size(); ++i) out += vocab.token(e.target_ids[i]);
  EXPECT_EQ(in, "<a_2><b_3><c_1><d_6>");
  EXPECT_EQ(out, "<A_1><B_4><C_2><D_6>");
  EXPECT_EQ(e.user, kNoUser);
  const auto i2t = build_qla(split, table, vocab, TaskKind::QlaImageToText);
  ASSERT_EQ(i2t.train.size(), 1u);
  EXPECT_EQ(std::vector<TokenId>(i2t.train[0].input_ids.begin() + 4, i2t.train[0].input_ids.end()),
            std::vector<TokenId>(e.target_ids.begin(), e.target_ids.end() - 1));
}

TEST(BuildQla, TwoExamplesPerItemAcrossDirections) {
  Fixture f;
  const auto split = split_leave_one_out(dataset({{"u1", "abcdef"}, {"u2", "cdxyz"}}));
  std::set<ItemId> items{"a", "b", "c", "d", "x"};
  const auto a = build_qla(split, f.table, f.vocab, TaskKind::QlaTextToImage);
  const auto b = build_qla(split, f.table, f.vocab, TaskKind::QlaImageToText);
  EXPECT_EQ(a.train.size() + b.train.size(), 2 * items.size());
}

TEST(Corpus, NoTestTargetLeaksIntoUserTrainTargets) {
  Fixture f;
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    InteractionDataset d;
    for (int u = 0; u < 20; ++u) {
      std::string letters = "abcdefghijklmnopqrstuvwxyz";
      std::shuffle(letters.begin(), letters.end(), rng);
      d.users.push_back({"u" + std::to_string(u), {}});
      const std::size_t len = 3 + rng() % 12;
      for (std::size_t i = 0; i < len; ++i) d.users.back().items.emplace_back(1, letters[i]);
    }
    const auto split = split_leave_one_out(d);
    for (TaskKind task : kAllTasks) {
      const auto ex = build_task(task, split, f.table, f.vocab);
      if (!is_next_item_task(task)) continue;
      std::map<UserId, ItemId> test_of, valid_of;
      for (const auto& u : split.users) {
        test_of[u.user] = u.test_target;
        valid_of[u.user] = u.valid_target;
      }
      for (const auto& e : ex.train) {
        ASSERT_NE(e.target_item, test_of[e.user]);
        ASSERT_NE(e.target_item, valid_of[e.user]);
      }
      for (const auto& e : ex.test) EXPECT_EQ(e.target_item, test_of[e.user]);
    }
  }
}

TEST(AssembleStage, StageRulesAndTaskMix) {
  Fixture f;
  const auto split = split_leave_one_out(dataset({{"u1", "abcdefg"}, {"u2", "hijklm"}}));
  std::vector<TaskExamples> all;
  for (TaskKind t : kAllTasks) all.push_back(build_task(t, split, f.table, f.vocab));
  const auto ft = assemble_stage(Stage::Finetune, all, 1);
  EXPECT_EQ(ft.task_mix.size(), 6u);
  std::set<TaskKind> seen;
  for (const auto& e : ft.train) seen.insert(e.task);
  EXPECT_EQ(seen.size(), 6u);
  EXPECT_THROW(assemble_stage(Stage::Pretrain, all, 1), InvalidArgument);
  EXPECT_NO_THROW(assemble_stage(Stage::Pretrain, std::span(all).first(2), 1));
  EXPECT_EQ(assemble_stage(Stage::Finetune, all, 1).train, ft.train);
  EXPECT_NE(assemble_stage(Stage::Finetune, all, 2).train, ft.train);
}

TEST(Examples, FileRoundTrip) {
  Fixture f;
  const auto split = split_leave_one_out(dataset({{"u1", "abcdefg"}, {"u2", "hijklm"}}));
  std::vector<TaskExamples> all;
  for (TaskKind t : kAllTasks) all.push_back(build_task(t, split, f.table, f.vocab));
  const auto ds = assemble_stage(Stage::Finetune, all, 3);
  const fs::path p = fs::temp_directory_path() / "mqlrec_examples_rt.tsv";
  write_examples(ds.train, p);
  EXPECT_EQ(read_examples(p, f.vocab, f.table), ds.train);
  std::ofstream(p) << "NIG_Text\tu\t1 2\t5 6\n";
  EXPECT_THROW(read_examples(p, f.vocab, f.table), ParseError);
  fs::remove(p);
}

TEST(Tasks, NamesRoundTrip) {
  for (TaskKind t : kAllTasks) EXPECT_EQ(parse_task(task_name(t)), t);
  EXPECT_EQ(task_name(TaskKind::NigText), "NIG_Text");
  EXPECT_EQ(input_modality(TaskKind::AigText), Modality::Image);
  EXPECT_EQ(output_modality(TaskKind::AigText), Modality::Text);
  EXPECT_THROW(parse_task("bogus"), InvalidArgument);
}

}  // namespace
}  // namespace mqlrec
