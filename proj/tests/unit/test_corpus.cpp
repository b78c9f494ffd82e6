/*
 * Copyright 2026 The FASL Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "fasl/corpus.hpp"
#include "fasl/random.hpp"

using namespace fasl;

namespace {

LabelSet abc() { return LabelSet({{"a", "alpha"}, {"b", "beta"}, {"c", "gamma"}}); }

Pool labeled_pool(const std::vector<std::size_t>& counts, const LabelSet& labels) {
  std::vector<TextInstance> rows;
  std::size_t n = 0;
  // Interleave labels so order preservation is observable.
  for (std::size_t round = 0;; ++round) {
    bool any = false;
    for (std::size_t l = 0; l < counts.size(); ++l) {
      if (round < counts[l]) {
        const auto id = "i" + std::to_string(n++);
        rows.push_back({id, "text " + id, labels.name(l)});
        any = true;
      }
    }
    if (!any) break;
  }
  return Pool(std::move(rows));
}

std::vector<std::size_t> count_by_label(const Pool& pool, const LabelSet& labels) {
  std::vector<std::size_t> c(labels.size(), 0);
  for (const auto& t : pool.instances()) ++c[labels.index_of(*t.gold_label)];
  return c;
}

}  // namespace

TEST(LabelSet, RejectsInvalidSets) {
  EXPECT_THROW(LabelSet(std::vector<LabelEntry>{{"only", "one"}}), ValidationError);
  EXPECT_THROW(LabelSet({{"a", "x"}, {"a", "y"}}), ValidationError);
  EXPECT_THROW(LabelSet({{"a", "x"}, {"b", ""}}), ValidationError);
  const auto l = abc();
  EXPECT_EQ(l.index_of("c"), 2u);
  EXPECT_FALSE(l.find("zzz").has_value());
}

TEST(Ingest, CsvWithQuotedMultilineField) {
  std::istringstream in(
      "id,text,label\n"
      "1,\"hello, world\",a\n"
      "2,\"line one\nline two with \"\"quotes\"\"\",b\n"
      "3,plain,\n");
  const auto r = ingest(in, InputFormat::delimited_table);
  ASSERT_EQ(r.pool.size(), 3u);
  EXPECT_EQ(r.pool[0].text, "hello, world");
  EXPECT_EQ(r.pool[1].text, "line one\nline two with \"quotes\"");
  EXPECT_EQ(*r.pool[1].gold_label, "b");
  EXPECT_FALSE(r.pool[2].gold_label.has_value());
  EXPECT_EQ(r.observed_labels, (std::vector<std::string>{"a", "b"}));
}

TEST(Ingest, CsvRaggedRowReportsPhysicalLine) {
  std::istringstream in("id,text\n1,\"two\nlines\"\n2,x,extra\n");
  try {
    ingest(in, InputFormat::delimited_table);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 4u);
  }
}

TEST(Ingest, JsonLinesAcceptsIntegerIds) {
  std::istringstream in("{\"id\": 7, \"text\": \"seven\", \"label\": \"a\"}\n\n{\"id\": \"x\", \"text\": \"ex\"}\n");
  const auto r = ingest(in, InputFormat::record_lines);
  ASSERT_EQ(r.pool.size(), 2u);
  EXPECT_EQ(r.pool[0].id, "7");
  EXPECT_TRUE(r.pool.contains("x"));
}

TEST(Ingest, MalformedJsonReportsLine) {
  std::istringstream in("{\"id\": 1, \"text\": \"a\"}\n{\"id\": 2, \"text\": \n");
  try {
    ingest(in, InputFormat::record_lines);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(Ingest, DuplicateIdIsConflictNamingTheId) {
  std::istringstream in("id,text\nq,one\nq,two\n");
  try {
    ingest(in, InputFormat::delimited_table);
    FAIL() << "expected ConflictError";
  } catch (const ConflictError& e) {
    ASSERT_EQ(e.details().size(), 1u);
    EXPECT_EQ(e.details()[0], "q");
  }
}

TEST(Ingest, LabelSetFile) {
  std::istringstream in("{\"name\": \"pos\", \"description\": \"positive\"}\n{\"name\": \"neg\", \"description\": \"negative\"}\n");
  const auto l = load_label_set(in);
  EXPECT_EQ(l.size(), 2u);
  EXPECT_EQ(l.entries()[1].description, "negative");
}

TEST(Uniformness, ClosedForms) {
  EXPECT_DOUBLE_EQ(uniformness({0.25, 0.25, 0.25, 0.25}), 0.0);
  // |0.889 - 0.5| + |0.111 - 0.5|
  EXPECT_NEAR(uniformness({0.889, 0.111}), 0.778, 1e-12);
  EXPECT_NEAR(uniformness({1.0, 0.0, 0.0}), 4.0 / 3.0, 1e-12);
}

TEST(Stats, CountsFrequenciesAndErrors) {
  const auto l = abc();
  const auto pool = labeled_pool({6, 3, 1}, l);
  const auto s = compute_stats(pool, l);
  EXPECT_EQ(s.counts, (std::vector<std::size_t>{6, 3, 1}));
  EXPECT_NEAR(s.uniformness, std::abs(0.6 - 1.0 / 3) + std::abs(0.3 - 1.0 / 3) + std::abs(0.1 - 1.0 / 3), 1e-12);
  EXPECT_THROW(compute_stats(Pool{}, l), ValidationError);
  Pool unlabeled({{"x", "t", std::nullopt}});
  EXPECT_THROW(compute_stats(unlabeled, l), ValidationError);
}

TEST(Unbalance, DecidedCountsOnReferenceFixture) {
  const auto l = abc();
  EXPECT_EQ(unbalanced_targets({1000, 900, 800}, 2.0), (std::vector<std::size_t>{1000, 500, 250}));
  const auto out = make_unbalanced(labeled_pool({1000, 900, 800}, l), l, {2.0, 5});
  EXPECT_EQ(count_by_label(out, l), (std::vector<std::size_t>{1000, 500, 250}));
}

TEST(Unbalance, RankFollowsCountsNotLabelOrder) {
  EXPECT_EQ(unbalanced_targets({100, 400, 300}, 2.0), (std::vector<std::size_t>{100, 400, 200}));
  // Ties keep label-set order; small labels keep at least one instance.
  EXPECT_EQ(unbalanced_targets({10, 10, 10}, 4.0), (std::vector<std::size_t>{10, 3, 1}));
  EXPECT_EQ(unbalanced_targets({5, 0, 5}, 2.0), (std::vector<std::size_t>{5, 0, 3}));
}

TEST(Unbalance, PreservesInputOrderAndIsSeeded) {
  const auto l = abc();
  const auto pool = labeled_pool({40, 30, 20}, l);
  const auto a = make_unbalanced(pool, l, {2.0, 1});
  const auto b = make_unbalanced(pool, l, {2.0, 1});
  ASSERT_EQ(a.size(), b.size());
  std::size_t last = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    const auto pos = *pool.find(a[i].id);
    if (i > 0) EXPECT_GT(pos, last);
    last = pos;
  }
}

TEST(Unbalance, PropertyCountsMatchIndependentFormula) {
  Rng rng = make_rng(3);
  const auto l = LabelSet({{"a", "x"}, {"b", "x"}, {"c", "x"}, {"d", "x"}});
  for (int rep = 0; rep < 25; ++rep) {
    std::vector<std::size_t> counts(4);
    for (auto& c : counts) c = 1 + uniform_index(rng, 60);
    const double base = 1.5 + uniform01(rng) * 2.0;
    const auto out = make_unbalanced(labeled_pool(counts, l), l, {base, static_cast<std::uint64_t>(rep)});
    // Reference: rank by count desc (stable), n(top) * base^-rank rounded, clamped to [1, n].
    std::vector<std::pair<std::size_t, std::size_t>> ranked;
    for (std::size_t i = 0; i < 4; ++i) ranked.push_back({counts[i], i});
    std::stable_sort(ranked.begin(), ranked.end(), [](auto x, auto y) { return x.first > y.first; });
    std::vector<std::size_t> expected(4);
    for (std::size_t r = 0; r < 4; ++r) {
      const double v = std::round(static_cast<double>(ranked[0].first) * std::pow(base, -static_cast<double>(r)));
      expected[ranked[r].second] = std::min<std::size_t>(std::max<double>(v, 1.0), ranked[r].first);
    }
    EXPECT_EQ(count_by_label(out, l), expected) << "rep " << rep;
  }
}

TEST(CapPool, CapsAndKeepsOrder) {
  const auto l = abc();
  const auto pool = labeled_pool({100, 100, 100}, l);
  EXPECT_EQ(cap_pool(pool, 1000).size(), 300u);
  const auto capped = cap_pool(pool, 50, 9);
  ASSERT_EQ(capped.size(), 50u);
  for (std::size_t i = 1; i < capped.size(); ++i) {
    EXPECT_LT(*pool.find(capped[i - 1].id), *pool.find(capped[i].id));
  }
  EXPECT_THROW(cap_pool(pool, 0), Error);
}
