// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "mqlrec/data_ingest.hpp"
#include "mqlrec/error.hpp"

namespace mqlrec {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("mqlrec_ingest_" + std::to_string(std::random_device{}()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path file(const std::string& name, const std::string& content = "") const {
    const auto p = path_ / name;
    if (!content.empty()) std::ofstream(p) << content;
    return p;
  }

 private:
  fs::path path_;
};

TEST(LoadEmbeddings, ParsesTwoItems) {
  TempDir dir;
  const auto p = dir.file("t.emb", "#emb text 2 3\ni1\t1 2 3\ni2\t4 5 6.5\n");
  const auto m = load_embeddings(p, Modality::Text);
  ASSERT_EQ(m.size(), 2);
  ASSERT_EQ(m.dim(), 3);
  EXPECT_EQ(m.item_ids(), (std::vector<ItemId>{"i1", "i2"}));
  EXPECT_EQ(m.vectors()(1, 2), 6.5);
  EXPECT_EQ(m.row_of("i2"), 1);
}

TEST(LoadEmbeddings, DuplicateIdReportsItemAndLine) {
  TempDir dir;
  const auto p = dir.file("t.emb", "#emb text 2 2\ni1\t1 2\ni1\t3 4\n");
  try {
    load_embeddings(p, Modality::Text);
    FAIL() << "expected DuplicateItemError";
  } catch (const DuplicateItemError& e) {
    EXPECT_EQ(e.item(), "i1");
    EXPECT_EQ(e.line(), 3u);
    EXPECT_EQ(e.kind(), "DuplicateItem");
  }
}

TEST(LoadEmbeddings, RejectsMalformedInput) {
  TempDir dir;
  EXPECT_THROW(load_embeddings(dir.file("a.emb", "#emb text 1 3\ni1\t1 2\n"), Modality::Text), ParseError);
  EXPECT_THROW(load_embeddings(dir.file("b.emb", "#emb text 1 2\ni1\t1 nan\n"), Modality::Text), ParseError);
  EXPECT_THROW(load_embeddings(dir.file("c.emb", "#emb image 1 2\ni1\t1 2\n"), Modality::Text), ParseError);
  EXPECT_THROW(load_embeddings(dir.file("d.emb", "#emb text 2 2\ni1\t1 2\n"), Modality::Text), ParseError);
  EXPECT_THROW(load_embeddings(dir.file("e.emb", "i1\t1 2\n"), Modality::Text), ParseError);
  EXPECT_THROW(load_embeddings(dir.file("missing.emb"), Modality::Text), ParseError);
}

TEST(EmbeddingMatrix, ValidatesConstruction) {
  Matrix v(2, 2);
  v << 1, 2, 3, 4;
  EXPECT_THROW(EmbeddingMatrix(Modality::Text, {"a"}, v), DimensionMismatch);
  EXPECT_THROW(EmbeddingMatrix(Modality::Text, {"a", "a"}, v), DuplicateItemError);
  v(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(EmbeddingMatrix(Modality::Text, {"a", "b"}, v), NonFiniteError);
}

TEST(WriteEmbeddings, RoundTripsRandomMatrices) {
  TempDir dir;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 3.0);
  for (int trial = 0; trial < 5; ++trial) {
    const int rows = 1 + trial * 7, cols = 1 + trial * 3;
    Matrix v(rows, cols);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = g(rng) * std::pow(10.0, trial - 2);
    std::vector<ItemId> ids;
    for (int r = 0; r < rows; ++r) ids.push_back("item_" + std::to_string(r));
    const EmbeddingMatrix m(Modality::Image, ids, v);
    const auto p = dir.file("rt" + std::to_string(trial) + ".emb");
    write_embeddings(m, p);
    EXPECT_EQ(load_embeddings(p, Modality::Image), m);
  }
}

TEST(LoadInteractions, ParsesLine) {
  TempDir dir;
  const auto r = load_interactions(dir.file("i.tsv", "u1\ta,b,c,d,e\n"));
  ASSERT_EQ(r.dataset.users.size(), 1u);
  EXPECT_EQ(r.dataset.users[0].user, "u1");
  EXPECT_EQ(r.dataset.users[0].items, (std::vector<ItemId>{"a", "b", "c", "d", "e"}));
  EXPECT_TRUE(r.warnings.empty());
}

TEST(LoadInteractions, KeepsMostRecentTwenty) {
  TempDir dir;
  std::string line = "u1\t";
  for (int i = 0; i < 25; ++i) line += (i ? "," : "") + std::string("x") + std::to_string(i);
  const auto r = load_interactions(dir.file("i.tsv", line + "\n"));
  ASSERT_EQ(r.dataset.users[0].items.size(), 20u);
  EXPECT_EQ(r.dataset.users[0].items.front(), "x5");
  EXPECT_EQ(r.dataset.users[0].items.back(), "x24");
}

TEST(LoadInteractions, DropsShortUsersWithWarning) {
  TempDir dir;
  const auto r = load_interactions(dir.file("i.tsv", "u1\ta,b,c,d\nu2\ta,b,c,d,e\n"));
  ASSERT_EQ(r.dataset.users.size(), 1u);
  EXPECT_EQ(r.dataset.users[0].user, "u2");
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("u1"), std::string::npos);
}

TEST(LoadInteractions, RoundTrips) {
  TempDir dir;
  InteractionDataset d{{{"u1", {"a", "b", "c", "d", "e"}}, {"u2", {"f", "g", "h", "i", "j", "k"}}}};
  const auto p = dir.file("i.tsv");
  write_interactions(d, p);
  EXPECT_EQ(load_interactions(p).dataset, d);
}

TEST(CheckReferences, NamesMissingItem) {
  Matrix v = Matrix::Zero(1, 2);
  const EmbeddingMatrix text(Modality::Text, {"a"}, v), image(Modality::Image, {"a"}, v);
  InteractionDataset ok{{{"u", {"a"}}}}, bad{{{"u", {"a", "zz"}}}};
  EXPECT_NO_THROW(check_references(ok, text, image));
  try {
    check_references(bad, text, image);
    FAIL();
  } catch (const MissingEmbeddingError& e) {
    EXPECT_NE(std::string(e.what()).find("zz"), std::string::npos);
  }
}

TEST(GenerateSynthetic, DeterministicUnderSeed) {
  SynthConfig c;
  c.n_items = 200;
  c.n_users = 100;
  c.seed = 7;
  const auto a = generate_synthetic(c), b = generate_synthetic(c);
  EXPECT_EQ(a.text, b.text);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.interactions, b.interactions);
  EXPECT_EQ(a.text_labels, b.text_labels);
  c.seed = 8;
  EXPECT_FALSE(generate_synthetic(c).text == a.text);
}

TEST(GenerateSynthetic, FullCorrelationCopiesLabels) {
  SynthConfig c;
  c.n_items = 300;
  c.n_users = 10;
  c.cross_modal_correlation = 1.0;
  c.seed = 3;
  const auto d = generate_synthetic(c);
  EXPECT_EQ(d.text_labels, d.image_labels);
}

TEST(GenerateSynthetic, ZeroCorrelationMatchesChanceWithinThreeSigma) {
  SynthConfig c;
  c.n_items = 4000;
  c.n_users = 10;
  c.n_clusters = 8;
  c.cross_modal_correlation = 0.0;
  c.seed = 5;
  const auto d = generate_synthetic(c);
  int same = 0;
  for (std::size_t i = 0; i < c.n_items; ++i) same += d.text_labels[i] == d.image_labels[i];
  const double p = 1.0 / c.n_clusters;
  const double n = static_cast<double>(c.n_items);
  const double sigma = std::sqrt(p * (1 - p) / n);
  EXPECT_NEAR(same / n, p, 3 * sigma);
}

TEST(GenerateSynthetic, SequencesAreValid) {
  SynthConfig c;
  c.n_items = 100;
  c.n_users = 50;
  c.seed = 1;
  const auto d = generate_synthetic(c);
  ASSERT_EQ(d.interactions.users.size(), c.n_users);
  for (const auto& u : d.interactions.users) {
    EXPECT_GE(u.items.size(), c.min_sequence_length);
    EXPECT_LE(u.items.size(), c.max_sequence_length);
    std::set<ItemId> seen(u.items.begin(), u.items.end());
    EXPECT_EQ(seen.size(), u.items.size());
  }
  EXPECT_NO_THROW(check_references(d.interactions, d.text, d.image));
}

TEST(GenerateSynthetic, SharedCenterSeedSharesGeometry) {
  SynthConfig a, b;
  a.n_items = b.n_items = 400;
  a.n_users = b.n_users = 10;
  a.noise_scale = b.noise_scale = 0.0;
  a.seed = 1;
  b.seed = 2;
  a.center_seed = b.center_seed = 99;
  b.id_prefix = "src_";
  const auto da = generate_synthetic(a), db = generate_synthetic(b);
  EXPECT_EQ(db.text.item_ids().front().rfind("src_", 0), 0u);
  // Noise-free items sit exactly on their centre, so equal labels mean equal vectors.
  for (std::size_t i = 0; i < 50; ++i) {
    for (std::size_t j = 0; j < 50; ++j) {
      if (da.text_labels[i] == db.text_labels[j]) {
        EXPECT_TRUE(da.text.vectors().row(i).isApprox(db.text.vectors().row(j)));
      }
    }
  }
}

TEST(GenerateSynthetic, RejectsBadConfig) {
  SynthConfig c;
  c.cross_modal_correlation = 1.5;
  EXPECT_THROW(generate_synthetic(c), InvalidArgument);
  c = {};
  c.n_clusters = 0;
  EXPECT_THROW(generate_synthetic(c), InvalidArgument);
}

}  // namespace
}  // namespace mqlrec
