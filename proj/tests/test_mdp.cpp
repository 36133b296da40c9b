#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "helpers.hpp"
#include "tokenrl/mdp.hpp"

using namespace tokenrl;
using testutil::small_task;

TEST_CASE("step appends tokens and flags terminal states") {
  mdp::TokenMdp m;
  m.vocab_size = 6;
  m.eos_id = 4;
  m.max_response_len = 5;
  m.prompts = {{5}};

  auto s0 = mdp::initial_state(m, 0);
  CHECK(s0.prompt == std::vector<Token>{5});
  CHECK(s0.generated.empty());
  CHECK_FALSE(s0.terminal);

  const auto s1 = mdp::step(m, s0, 3);
  CHECK(s1.generated == std::vector<Token>{3});
  CHECK_FALSE(s1.terminal);

  const auto s2 = mdp::step(m, s1, m.eos_id);
  CHECK(s2.generated == std::vector<Token>{3, 4});
  CHECK(s2.terminal);

  CHECK_THROWS_WITH_AS(mdp::step(m, s2, 1), "step: terminal state",
                       std::invalid_argument);
  CHECK_THROWS_AS(mdp::step(m, s0, 6), std::invalid_argument);
  CHECK_THROWS_AS(mdp::step(m, s0, -1), std::invalid_argument);
}

TEST_CASE("step is pure") {
  const auto m = small_task();
  const auto s = mdp::initial_state(m, 0);
  const auto a = mdp::step(m, s, 1);
  const auto b = mdp::step(m, s, 1);
  CHECK(a.generated == b.generated);
  CHECK(a.terminal == b.terminal);
  CHECK(s.generated.empty());  // input untouched
}

TEST_CASE("forced termination at the horizon") {
  auto m = small_task();
  auto s = mdp::initial_state(m, 0);
  s = mdp::step(m, s, 1);
  s = mdp::step(m, s, 2);
  CHECK_FALSE(s.terminal);
  s = mdp::step(m, s, 1);
  CHECK_FALSE(s.generated.back() == m.eos_id);
  CHECK(s.terminal);  // length cap reached without EOS
}

TEST_CASE("enumerate_responses matches explicit listings") {
  SUBCASE("horizon 1 leaves only EOS") {
    mdp::TokenMdp m;
    m.vocab_size = 3;
    m.eos_id = 0;
    m.max_response_len = 1;
    m.prompts = {{0}};
    const auto rs = mdp::enumerate_responses(m, m.prompts[0]);
    REQUIRE(rs.size() == 1);
    CHECK(rs[0].response == std::vector<Token>{0});
  }
  SUBCASE("two tokens, horizon 3") {
    mdp::TokenMdp m;
    m.vocab_size = 2;
    m.eos_id = 0;
    m.max_response_len = 3;
    m.prompts = {{1}};
    const auto rs = mdp::enumerate_responses(m, m.prompts[0]);
    REQUIRE(rs.size() == 3);
    CHECK(rs[0].response == std::vector<Token>{0});
    CHECK(rs[1].response == std::vector<Token>{1, 0});
    CHECK(rs[2].response == std::vector<Token>{1, 1, 0});
  }
  SUBCASE("three tokens, horizon 3") {
    const auto m = small_task();
    CHECK(mdp::enumerate_responses(m, m.prompts[0]).size() == 7);
  }
}

TEST_CASE("enumeration matches the closed-form count, unique and sorted") {
  for (int vocab = 1; vocab <= 5; ++vocab) {
    for (int len = 1; len <= 5; ++len) {
      mdp::TokenMdp m;
      m.vocab_size = vocab;
      m.eos_id = vocab - 1;
      m.max_response_len = len;
      m.prompts = {{0}};
      const auto rs = mdp::enumerate_responses(m, m.prompts[0]);
      CHECK(rs.size() == testutil::count_oracle(vocab, len));
      CHECK(rs.size() == mdp::count_responses(m));

      std::set<std::vector<Token>> seen;
      for (const auto& r : rs) {
        mdp::validate_response(m, r.response);
        CHECK(seen.insert(r.response).second);  // exactly once
      }
      for (std::size_t i = 0; i + 1 < rs.size(); ++i) {
        CHECK(std::lexicographical_compare(rs[i].response.begin(),
                                           rs[i].response.end(),
                                           rs[i + 1].response.begin(),
                                           rs[i + 1].response.end()));
      }
      // independent recursive listing agrees element-wise
      const auto oracle = testutil::list_responses_oracle(vocab, m.eos_id, len);
      REQUIRE(oracle.size() == rs.size());
      for (std::size_t i = 0; i < rs.size(); ++i) {
        CHECK(rs[i].response == oracle[i]);
      }
    }
  }
}

TEST_CASE("enumeration cap") {
  mdp::TokenMdp m;
  m.vocab_size = 6;
  m.eos_id = 0;
  m.max_response_len = 10;  // 5^9 ~ 1.95e6 beyond the default cap
  m.prompts = {{0}};
  CHECK_THROWS_WITH_AS(mdp::enumerate_responses(m, m.prompts[0]),
                       "enumeration cap exceeded", std::invalid_argument);
  CHECK_NOTHROW(mdp::enumerate_responses(m, m.prompts[0], 10'000'000));
}

TEST_CASE("tree property: distinct prefixes reach distinct states") {
  const auto m = small_task();
  const auto index = mdp::TreeIndex::build(m);
  const auto& tree = index->tree(0);
  std::set<std::vector<Token>> prefixes;
  for (int n = 0; n < tree.num_nodes(); ++n) {
    const auto pf = tree.prefix(n);
    CHECK(prefixes.insert(std::vector<Token>(pf.begin(), pf.end())).second);
    CHECK(tree.node_of_prefix(pf) == n);
  }
  CHECK(prefixes.size() == static_cast<std::size_t>(tree.num_nodes()));
}

TEST_CASE("prefix tree layout") {
  const auto m = small_task();  // vocab 3, horizon 3
  const auto index = mdp::TreeIndex::build(m);
  const auto& tree = index->tree(0);
  CHECK(tree.num_nodes() == 7);  // 1 + 2 + 4
  CHECK(tree.row_width(0) == 3);
  int eos_only = 0;
  for (int n = 0; n < tree.num_nodes(); ++n) {
    if (tree.row_width(n) == 1) {
      ++eos_only;
      CHECK(tree.depth(n) == m.max_response_len - 1);
      CHECK(tree.action_valid(n, m.eos_id));
      CHECK_FALSE(tree.action_valid(n, 1));
    }
  }
  CHECK(eos_only == 4);
  CHECK(tree.node_of_prefix(std::vector<Token>{0}) == -1);  // EOS is no prefix
  CHECK(tree.node_of_prefix(std::vector<Token>{1, 1, 1}) == -1);

  const auto path = mdp::path_of(*index, 0, std::vector<Token>{1, 2, 0});
  REQUIRE(path.size() == 3);
  CHECK(path[0].first == 0);
  CHECK(path[0].second == 1);
  CHECK(path[2].second == 0);
}

TEST_CASE("validate_pair") {
  const auto m = small_task();
  mdp::PreferencePair ok{{1, 2}, {1, 0}, {2, 0}, mdp::LabelSource::fixed};
  CHECK_NOTHROW(mdp::validate_pair(m, ok));

  mdp::PreferencePair degen = ok;
  degen.rejected = degen.chosen;
  CHECK_THROWS_WITH_AS(mdp::validate_pair(m, degen),
                       "pair: degenerate (chosen equals rejected)",
                       std::invalid_argument);

  mdp::PreferencePair no_eos = ok;
  no_eos.chosen = {1, 2};  // does not end in EOS
  CHECK_THROWS_AS(mdp::validate_pair(m, no_eos), std::invalid_argument);

  mdp::PreferencePair mid_eos = ok;
  mid_eos.chosen = {0, 1, 0};
  CHECK_THROWS_AS(mdp::validate_pair(m, mid_eos), std::invalid_argument);

  const mdp::Trajectory a{{1, 2}, {1, 0}};
  const mdp::Trajectory b{{2, 1}, {2, 0}};
  CHECK_THROWS_WITH_AS(
      mdp::make_preference_pair(a, b, mdp::LabelSource::fixed),
      "prompt mismatch", std::invalid_argument);
}

TEST_CASE("task json round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "tokenrl_test_mdp";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "task.json").string();
  const auto m = small_task();
  mdp::save_task(m, path);
  const auto loaded = mdp::load_task(path);
  CHECK(loaded.vocab_size == m.vocab_size);
  CHECK(loaded.eos_id == m.eos_id);
  CHECK(loaded.max_response_len == m.max_response_len);
  CHECK(loaded.prompts == m.prompts);
}

TEST_CASE("pairs jsonl round trip and ingestion validation") {
  const auto dir = std::filesystem::temp_directory_path() / "tokenrl_test_mdp";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "pairs.jsonl").string();
  const auto m = small_task();
  std::vector<mdp::PreferencePair> pairs{
      {{1, 2}, {1, 0}, {2, 0}, mdp::LabelSource::fixed},
      {{1, 2}, {0}, {1, 1, 0}, mdp::LabelSource::fixed},
  };
  mdp::save_pairs(pairs, path);
  const auto loaded = mdp::load_pairs(m, path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].chosen == pairs[0].chosen);
  CHECK(loaded[1].rejected == pairs[1].rejected);

  // non-EOS-terminated responses are rejected at ingestion
  {
    std::ofstream out(path);
    out << R"({"prompt": [1, 2], "chosen": [1, 2], "rejected": [2, 0]})" << "\n";
  }
  CHECK_THROWS_AS(mdp::load_pairs(m, path), std::runtime_error);
}

TEST_CASE("mdp invariants validated") {
  auto m = small_task();
  m.eos_id = 3;
  CHECK_THROWS_AS(mdp::validate_mdp(m), std::invalid_argument);
  m = small_task();
  m.prompts = {{1}, {1}};
  CHECK_THROWS_AS(mdp::validate_mdp(m), std::invalid_argument);
  m = small_task();
  m.max_response_len = 0;
  CHECK_THROWS_AS(mdp::validate_mdp(m), std::invalid_argument);
  m = small_task();
  m.prompts.clear();
  CHECK_THROWS_AS(mdp::validate_mdp(m), std::invalid_argument);
}
