#include "oracles.hpp"
#include "protostyle/metrics.hpp"

#include <gtest/gtest.h>

using namespace protostyle;

TEST(Nmi, Examples) {
  const std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  EXPECT_DOUBLE_EQ(prototype_nmi(labels, labels), 1.0);
  EXPECT_DOUBLE_EQ(prototype_nmi({4, 4, 7, 7, 1, 1}, labels), 1.0);
  EXPECT_DOUBLE_EQ(prototype_nmi({0, 0, 0, 0, 0, 0}, labels), 0.0);
  const std::vector<int> a = {0, 0, 1, 1, 1, 2, 2, 0};
  const std::vector<int> b = {1, 0, 1, 1, 0, 2, 2, 2};
  EXPECT_NEAR(prototype_nmi(a, b), oracle::brute_force_nmi(a, b), 1e-10);
  EXPECT_THROW(prototype_nmi({0}, {0, 1}), PreconditionError);
  EXPECT_THROW(prototype_nmi({}, {}), PreconditionError);
}

// Every labeling pair over up to 3 clusters for n <= 7, then random instances up to n = 20.
TEST(Nmi, MatchesBruteForceOracle) {
  for (int n = 1; n <= 7; ++n) {
    int total = 1;
    for (int i = 0; i < n; ++i) total *= 3;
    for (int x = 0; x < total; x += (n > 5 ? 7 : 1))
      for (int y = 0; y < total; y += (n > 5 ? 11 : 1)) {
        std::vector<int> a, b;
        for (int i = 0, u = x, v = y; i < n; ++i, u /= 3, v /= 3) {
          a.push_back(u % 3);
          b.push_back(v % 3);
        }
        ASSERT_NEAR(prototype_nmi(a, b), oracle::brute_force_nmi(a, b), 1e-10);
      }
  }
  Rng rng(1);
  for (int i = 0; i < 3000; ++i) {
    const int n = 1 + static_cast<int>(rng() % 20);
    const int ka = 1 + static_cast<int>(rng() % 6), kb = 1 + static_cast<int>(rng() % 6);
    std::vector<int> a, b;
    for (int j = 0; j < n; ++j) {
      a.push_back(static_cast<int>(rng() % static_cast<unsigned>(ka)));
      b.push_back(static_cast<int>(rng() % static_cast<unsigned>(kb)));
    }
    ASSERT_NEAR(prototype_nmi(a, b), oracle::brute_force_nmi(a, b), 1e-10);
  }
}

TEST(Diversity, Examples) {
  const Matrix a = Matrix::Zero(2, 2);
  Matrix b = a;
  b(0, 0) = 3.0;
  EXPECT_EQ(diversity_score({a, a, a}), 0.0);
  EXPECT_EQ(diversity_score({a, b}), 3.0);
  Rng rng(2);
  std::vector<Matrix> set = {randn(3, 2, rng), randn(3, 2, rng), randn(3, 2, rng)};
  double max_pair = 0.0;
  for (size_t i = 0; i < set.size(); ++i)
    for (size_t j = i + 1; j < set.size(); ++j) max_pair = std::max(max_pair, (set[i] - set[j]).norm());
  set.push_back(set[1]);
  EXPECT_LE(diversity_score(set), max_pair);
  EXPECT_THROW(diversity_score({a}), PreconditionError);
}

TEST(Usage, Histogram) {
  EXPECT_EQ(usage_histogram({0, 2, 2, 1, 2}, 3), (std::vector<int>{1, 1, 3}));
  EXPECT_THROW(usage_histogram({3}, 3), PreconditionError);
}

namespace {

struct OracleData {
  std::vector<MotionSequence> train, held_out;
  OracleData() {
    CorpusConfig c;
    c.n_per_cell = 6;
    auto split = split_corpus(generate_corpus(c), 0.5, 3);
    train = std::move(split.first);
    held_out = std::move(split.second);
  }
};

}  // namespace

TEST(StyleOracle, GatedAndSelfConsistent) {
  OracleData d;
  StyleOracle o;
  EXPECT_THROW(oracle_sra({d.held_out[0].frames}, {0}, o), PreconditionError);
  o.fit(d.train);
  const double acc = o.gate(d.held_out);
  ASSERT_TRUE(o.gated()) << acc;
  std::vector<Matrix> samples;
  std::vector<int> intended;
  for (const auto& s : d.held_out) {
    samples.push_back(s.frames);
    intended.push_back(s.style_id);
  }
  EXPECT_GE(oracle_sra(samples, intended, o), acc - 0.02);

  ParamSet ps;
  o.to_params(ps);
  const StyleOracle back = StyleOracle::from_params(ps);
  EXPECT_EQ(oracle_sra(samples, intended, back), oracle_sra(samples, intended, o));
}

TEST(StyleOracle, PermutedLabelsScoreChance) {
  OracleData d;
  StyleOracle o;
  o.fit(d.train);
  o.gate(d.held_out);
  ASSERT_TRUE(o.gated());
  // 200 samples, each labelled with a uniformly random wrong-or-right style.
  Rng rng(4);
  std::vector<Matrix> samples;
  std::vector<int> intended;
  for (int i = 0; i < 200; ++i) {
    samples.push_back(d.held_out[static_cast<size_t>(i) % d.held_out.size()].frames);
    intended.push_back(static_cast<int>(rng() % 4));
  }
  EXPECT_NEAR(oracle_sra(samples, intended, o), 0.25, 0.05);
}

TEST(ContentScore, PerfectForCleanProgram) {
  CorpusConfig c;
  c.noise_level = 0.0;
  c.n_per_cell = 1;
  for (const auto& s : generate_corpus(c)) {
    const double own = content_score(s.frames, s.content_id);
    EXPECT_GT(own, 0.9);
  }
}

TEST(MetricsReport, JsonAndCsvCarryEveryField) {
  MetricsReport r;
  r.sra = 0.9;
  r.sra_prototype = 0.85;
  r.sra_transfer = 0.8;
  r.nmi_global = 0.7;
  r.usage = {{1, 2, 3}};
  const json j = r.to_json();
  for (const char* k : {"sra", "sra_prototype", "sra_transfer", "content_score", "diversity", "nmi_global", "nmi_local",
                        "oracle_accuracy", "usage"})
    EXPECT_TRUE(j.contains(k)) << k;
  const std::string csv = r.to_csv();
  EXPECT_NE(csv.find("sra_prototype"), std::string::npos);
  r.sra = 1.5;
  EXPECT_THROW(r.check(), StateError);
}
