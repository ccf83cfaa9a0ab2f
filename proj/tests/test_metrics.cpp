#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "vcgpt/metrics.hpp"

using namespace vcgpt;

TEST(CiderD, HandComputedTwoImageCorpus) {
  // unigram tf-idf: a, b, c, d each get ln 2; the candidate shares "a" only,
  // so the unigram cosine is 1/2 and no higher order overlaps.
  const std::vector<std::vector<std::string>> refs{{"a b"}, {"c d"}};
  const auto rep = cider_d({"a c", "c d"}, refs);
  EXPECT_NEAR(rep.per_sample_cider[0], 10.0 * 0.5 / 4.0, 1e-12);
  EXPECT_NEAR(rep.per_sample_cider[1], 10.0 * (1.0 + 1.0) / 4.0, 1e-12);
}

TEST(CiderD, LengthPenaltyHandComputed) {
  // 1 word vs 3 words: only the unigram order is nonzero for the candidate.
  const std::vector<std::vector<std::string>> refs{{"x y z"}, {"p q r"}};
  const double ln2 = std::log(2.0);
  const double cos1 = (ln2 * ln2) / (ln2 * std::sqrt(3.0) * ln2);
  const double want = 10.0 * cos1 * std::exp(-4.0 / 72.0) / 4.0;
  EXPECT_NEAR(cider_d({"x", "p q r"}, refs).per_sample_cider[0], want, 1e-12);
}

TEST(CiderD, SelfMatchIsExactlyTen) {
  const std::vector<std::vector<std::string>> refs{{"a small red circle on the left"},
                                                   {"a large blue square at the top"},
                                                   {"two green triangles near the bottom"}};
  const std::vector<std::string> cands{refs[0][0], refs[1][0], refs[2][0]};
  const auto rep = cider_d(cands, refs);
  for (double s : rep.per_sample_cider) EXPECT_EQ(s, 10.0);
  EXPECT_EQ(rep.cider_d, 10.0);
}

TEST(CiderD, DisjointCandidateScoresZero) {
  const auto rep = cider_d({"zz yy", "a b"}, {{"a b c"}, {"d e f"}});
  EXPECT_EQ(rep.per_sample_cider[0], 0.0);
}

TEST(CiderD, EmptyCandidateAllowed) {
  EXPECT_EQ(cider_d({"", "a"}, {{"a b"}, {"c"}}).per_sample_cider[0], 0.0);
}

TEST(CiderD, MissingReferencesNameTheImage) {
  try {
    (void)cider_d({"a", "b"}, {{"a"}, {}});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("image 1"), std::string::npos);
  }
  EXPECT_THROW((void)cider_d({"a"}, {{"a"}, {"b"}}), DataError);
}

TEST(CiderD, MatchesBruteForceOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto mc = oracle::random_corpus(seed);
    const auto rep = cider_d(mc.candidates, mc.references);
    const auto want = oracle::cider_d(mc.candidates, mc.references, mc.references);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(rep.per_sample_cider[i], want[i], 1e-6) << seed;
    EXPECT_NEAR(rep.cider_d, oracle::mean(want), 1e-6);
  }
}

TEST(CiderD, BoundsAndPerSampleMean) {
  for (std::uint64_t seed = 20; seed < 40; ++seed) {
    const auto mc = oracle::random_corpus(seed, 5, 3);
    const auto rep = cider_d(mc.candidates, mc.references);
    for (double s : rep.per_sample_cider) {
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, 10.0 + 1e-12);
    }
    EXPECT_NEAR(rep.cider_d, oracle::mean(rep.per_sample_cider), 1e-9);
  }
}

TEST(CiderD, DuplicateReferenceNeverLowersExactMatch) {
  for (std::uint64_t seed = 40; seed < 60; ++seed) {
    auto mc = oracle::random_corpus(seed, 4, 2);
    mc.candidates[0] = mc.references[0][0];
    const double before = cider_d(mc.candidates, mc.references).per_sample_cider[0];
    mc.references[0].push_back(mc.references[0][0]);
    const double after = cider_d(mc.candidates, mc.references).per_sample_cider[0];
    EXPECT_GE(after, before - 1e-12) << seed;
  }
}

TEST(CiderD, FixedIdfScorer) {
  const std::vector<std::vector<std::string>> train{{"a b c"}, {"a d e"}, {"f g h"}};
  const CiderD scorer(train);
  EXPECT_EQ(scorer.document_frequency({"a"}), 2.0);
  EXPECT_EQ(scorer.document_frequency({"a", "b"}), 1.0);
  EXPECT_EQ(scorer.document_frequency({"q"}), 0.0);
  const std::vector<std::vector<std::string>> refs{{"a d e"}};
  const auto want = oracle::cider_d({"a b e"}, refs, train);
  EXPECT_NEAR(scorer.score("a b e", refs[0]), want[0], 1e-12);
}

TEST(Bleu4, IdenticalIsOne) {
  const std::vector<std::vector<std::string>> refs{{"a small red circle on the left"},
                                                   {"a large blue square at the top"}};
  EXPECT_EQ(bleu4({refs[0][0], refs[1][0]}, refs), 1.0);
}

TEST(Bleu4, BrevityPenaltyWithPerfectPrecision) {
  const std::vector<std::vector<std::string>> refs{{"a b c d e f"}, {"p q r s t u v w"}};
  const double bp = std::exp(1.0 - 14.0 / 10.0);
  EXPECT_NEAR(bleu4({"a b c d e", "p q r s t"}, refs), bp, 1e-12);
}

TEST(Bleu4, HandEnumeratedClippedCounts) {
  // image 0: "the the the cat" vs refs {"the cat sat", "the the cat"}
  //   1-grams: the x3 clipped to 2, cat 1 -> 3/4
  //   2-grams: "the the" x2 clipped to 1, "the cat" 1 -> 2/3
  //   3-grams: "the the the" 0, "the the cat" 1 -> 1/2
  //   4-grams: "the the the cat" 0 -> 0/1
  // image 1: "a b c d" vs {"a b c d"} -> 4/4, 3/3, 2/2, 1/1
  // pooled: 7/8, 5/6, 3/4, 1/2; lengths c = 8, r = 3 + 4 = 7 (closest wins)
  const std::vector<std::vector<std::string>> refs{{"the cat sat", "the the cat"}, {"a b c d"}};
  const double want = std::exp(0.25 * (std::log(7.0 / 8) + std::log(5.0 / 6) + std::log(3.0 / 4) + std::log(0.5)));
  EXPECT_NEAR(bleu4({"the the the cat", "a b c d"}, refs), want, 1e-9);
}

TEST(Bleu4, ZeroWhenAnyOrderHasNoMatch) {
  EXPECT_EQ(bleu4({"a b c"}, {{"a b c"}}), 0.0);  // no 4-grams at all
  EXPECT_EQ(bleu4({"d c b a"}, {{"a b c d"}}), 0.0);
}

TEST(Bleu4, MatchesBruteForceOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto mc = oracle::random_corpus(seed + 100, 4, 3);
    EXPECT_NEAR(bleu4(mc.candidates, mc.references), oracle::bleu4(mc.candidates, mc.references), 1e-9) << seed;
    const auto mc2 = oracle::random_corpus(seed);
    EXPECT_NEAR(bleu4(mc2.candidates, mc2.references), oracle::bleu4(mc2.candidates, mc2.references), 1e-9);
  }
}

TEST(Metrics, PermutationInvariance) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto mc = oracle::random_corpus(seed + 200, 6, 2);
    const auto before = evaluate_captions(mc.candidates, mc.references);
    std::vector<std::size_t> order{0, 1, 2, 3, 4, 5};
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<std::string> c;
    std::vector<std::vector<std::string>> r;
    for (std::size_t i : order) {
      c.push_back(mc.candidates[i]);
      r.push_back(mc.references[i]);
    }
    const auto after = evaluate_captions(c, r);
    EXPECT_NEAR(after.cider_d, before.cider_d, 1e-12);
    EXPECT_EQ(after.bleu4, before.bleu4);
  }
}

TEST(Metrics, TokenizerMatchesVocabularySplitter) {
  EXPECT_EQ(split_words("  a\tb  c\n"), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(cider_d({"a  b"}, {{"a b"}}).per_sample_cider[0], cider_d({"a b"}, {{"a b"}}).per_sample_cider[0]);
}
