#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "helpers.hpp"
#include "tokenrl/harness/task_gen.hpp"
#include "tokenrl/preference.hpp"

using namespace tokenrl;
using testutil::bandit_task;
using testutil::logistic;

TEST_CASE("traj_return") {
  const auto inst = harness::random_instance(101);
  const auto& m = inst.index->mdp();

  SUBCASE("zero reward sums to zero") {
    const softrl::RewardTable zero(inst.index);
    for (const auto& t : mdp::enumerate_responses(m, m.prompts[0])) {
      CHECK(pref::traj_return(zero, t) == 0.0);
    }
  }
  SUBCASE("single-step response reads the root EOS entry") {
    const mdp::Trajectory t{m.prompts[0], {m.eos_id}};
    CHECK(pref::traj_return(inst.reward, t) ==
          inst.reward.at(0, 0, m.eos_id));
  }
  SUBCASE("matches step-and-accumulate") {
    for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
      for (const auto& t : mdp::enumerate_responses(m, m.prompts[p])) {
        const double expected =
            testutil::return_by_stepping(m, inst.reward, p, t.response);
        CHECK(std::fabs(pref::traj_return(inst.reward, t) - expected) < 1e-12);
      }
    }
  }
}

TEST_CASE("bt_preference") {
  const auto inst = harness::random_instance(103);
  const auto& m = inst.index->mdp();
  const auto rs = mdp::enumerate_responses(m, m.prompts[0]);

  SUBCASE("equal returns give one half") {
    const softrl::RewardTable zero(inst.index);
    CHECK(pref::bt_preference(zero, rs[0], rs[1]) == doctest::Approx(0.5));
  }
  SUBCASE("unit margin gives the logistic value") {
    // craft returns 1 vs 0 on the depth-1 bandit
    const auto bm = bandit_task();
    const auto bindex = mdp::TreeIndex::build(bm);
    softrl::RewardTable r(bindex);
    r.at(0, 0, 0) = 1.0;
    const mdp::Trajectory w{{0}, {0}};
    const mdp::Trajectory l{{0}, {1, 0}};
    CHECK(pref::bt_preference(r, w, l) ==
          doctest::Approx(0.7310585786300049).epsilon(1e-12));
  }
  SUBCASE("antisymmetry") {
    for (std::size_t i = 0; i < rs.size(); ++i) {
      for (std::size_t j = i + 1; j < rs.size(); ++j) {
        const double ab = pref::bt_preference(inst.reward, rs[i], rs[j]);
        const double ba = pref::bt_preference(inst.reward, rs[j], rs[i]);
        CHECK(std::fabs(ab + ba - 1.0) < 1e-12);
        CHECK(ab > 0.0);
        CHECK(ab < 1.0);
      }
    }
  }
  SUBCASE("prompt mismatch") {
    const mdp::Trajectory a{{0}, {0}};
    const mdp::Trajectory b{{1}, {0}};
    CHECK_THROWS_WITH_AS(pref::bt_preference(inst.reward, a, b),
                         "prompt mismatch", std::invalid_argument);
  }
}

TEST_CASE("policy_preference") {
  const auto inst = harness::random_instance(107);
  const auto& m = inst.index->mdp();
  const auto rs = mdp::enumerate_responses(m, m.prompts[0]);

  SUBCASE("pi = ref gives one half everywhere") {
    for (std::size_t i = 0; i + 1 < rs.size(); ++i) {
      CHECK(pref::policy_preference(*inst.index, *inst.ref, *inst.ref, inst.beta,
                                    rs[i], rs[i + 1]) == 0.5);
    }
  }
  SUBCASE("the exact optimum reproduces the Bradley-Terry model") {
    const auto sol =
        softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
    const auto pi_star = policy::TabularPolicy::from_solution(sol);
    for (std::size_t i = 0; i < rs.size(); ++i) {
      for (std::size_t j = i + 1; j < rs.size(); ++j) {
        const double bt = pref::bt_preference(inst.reward, rs[i], rs[j]);
        const double pp = pref::policy_preference(*inst.index, pi_star, *inst.ref,
                                                  inst.beta, rs[i], rs[j]);
        CHECK(std::fabs(bt - pp) < 1e-10);
      }
    }
  }
  SUBCASE("shaping leaves the policy-induced preferences unchanged") {
    Rng rng(5);
    const auto phi = harness::random_potential(inst.index, rng, 1.0);
    const auto shaped = softrl::shape_reward(inst.reward, phi);
    const auto sol_a =
        softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
    const auto sol_b = softrl::solve_soft(inst.index, shaped, inst.ref, inst.beta);
    const auto pi_a = policy::TabularPolicy::from_solution(sol_a);
    const auto pi_b = policy::TabularPolicy::from_solution(sol_b);
    for (std::size_t i = 0; i < rs.size(); ++i) {
      for (std::size_t j = i + 1; j < rs.size(); ++j) {
        const double pa = pref::policy_preference(*inst.index, pi_a, *inst.ref,
                                                  inst.beta, rs[i], rs[j]);
        const double pb = pref::policy_preference(*inst.index, pi_b, *inst.ref,
                                                  inst.beta, rs[i], rs[j]);
        CHECK(std::fabs(pa - pb) < 1e-10);
      }
    }
  }
}

TEST_CASE("preference distributions expose both routes") {
  const auto inst = harness::random_instance(109);
  const auto from_reward = pref::preference_distribution_from_reward(inst.reward);
  const auto sol = softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
  const auto pi_star = policy::TabularPolicy::from_solution(sol);
  const auto from_policy = pref::preference_distribution_from_policy(
      inst.index, pi_star, *inst.ref, inst.beta);
  CHECK(pref::tv_distance(from_reward, from_policy) < 1e-10);
  CHECK(pref::tv_distance(from_reward, from_reward) == 0.0);

  // p(i over j) + p(j over i) = 1 by construction
  for (std::size_t p = 0; p < from_reward.num_prompts(); ++p) {
    const std::size_t n = from_reward.responses(p).size();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        CHECK(std::fabs(from_reward.prob(p, i, j) + from_reward.prob(p, j, i) -
                        1.0) < 1e-15);
      }
    }
  }
}

TEST_CASE("sample_preferences") {
  const auto inst = harness::random_instance(113);

  SUBCASE("zero count gives an empty dataset") {
    CHECK(pref::sample_preferences(inst.reward, *inst.ref, 0, 7).empty());
  }
  SUBCASE("seed determinism and validity") {
    const auto a = pref::sample_preferences(inst.reward, *inst.ref, 40, 7);
    const auto b = pref::sample_preferences(inst.reward, *inst.ref, 40, 7);
    const auto c = pref::sample_preferences(inst.reward, *inst.ref, 40, 8);
    REQUIRE(a.size() == 40);
    bool same = true;
    for (std::size_t i = 0; i < a.size(); ++i) {
      same = same && a[i].chosen == b[i].chosen && a[i].rejected == b[i].rejected &&
             a[i].prompt == b[i].prompt;
    }
    CHECK(same);
    bool all_equal_c = true;
    for (std::size_t i = 0; i < a.size(); ++i) {
      all_equal_c = all_equal_c && a[i].chosen == c[i].chosen &&
                    a[i].rejected == c[i].rejected;
    }
    CHECK_FALSE(all_equal_c);
    for (const auto& pair : a) {
      CHECK_NOTHROW(mdp::validate_pair(inst.index->mdp(), pair));
      CHECK(pair.label_source == mdp::LabelSource::sampled);
    }
  }
  SUBCASE("winner frequencies track the Bradley-Terry probabilities") {
    // three-response bandit with known rewards
    mdp::TokenMdp m;
    m.vocab_size = 3;
    m.eos_id = 0;
    m.max_response_len = 2;
    m.prompts = {{0}};
    const auto index = mdp::TreeIndex::build(m);
    softrl::RewardTable reward(index);
    reward.at(0, 0, 0) = 0.8;   // response [0]
    reward.at(0, index->tree(0).child(0, 1), 0) = 0.0;  // response [1,0]
    reward.at(0, index->tree(0).child(0, 2), 0) = -.5;  // response [2,0]
    const policy::TabularPolicy ref(index);
    const auto pairs = pref::sample_preferences(reward, ref, 10000, 2024);

    const auto rs = mdp::enumerate_responses(m, m.prompts[0]);
    std::map<std::vector<Token>, std::size_t> rank;
    for (std::size_t i = 0; i < rs.size(); ++i) rank[rs[i].response] = i;
    double wins[3][3] = {};
    double totals[3][3] = {};
    for (const auto& pair : pairs) {
      const auto i = rank.at(pair.chosen);
      const auto j = rank.at(pair.rejected);
      wins[i][j] += 1.0;
      totals[i][j] += 1.0;
      totals[j][i] += 1.0;
    }
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        if (i == j) continue;
        const double n = totals[i][j];
        REQUIRE(n > 100);
        const double p = pref::bt_preference(reward, rs[i], rs[j]);
        const double freq = wins[i][j] / n;
        const double se = std::sqrt(p * (1.0 - p) / n);
        CHECK(std::fabs(freq - p) <= 3.0 * se);
      }
    }
  }
}

TEST_CASE("bandit reward fitting") {
  const auto m = bandit_task();
  const auto index = mdp::TreeIndex::build(m);
  const mdp::Trajectory a{{0}, {0}};
  const mdp::Trajectory b{{0}, {1, 0}};

  SUBCASE("balanced labels fit to indifference") {
    std::vector<mdp::PreferencePair> pairs;
    for (int i = 0; i < 50; ++i) {
      pairs.push_back(mdp::make_preference_pair(a, b, mdp::LabelSource::fixed));
      pairs.push_back(mdp::make_preference_pair(b, a, mdp::LabelSource::fixed));
    }
    const auto model = pref::fit_bandit_reward(index, pairs, 0.0);
    CHECK(std::fabs(model.values[0][0] - model.values[0][1]) < 1e-6);
  }

  SUBCASE("logistic consistency at sigma(1), cross-checked by grid search") {
    Rng rng(71);
    std::vector<mdp::PreferencePair> pairs;
    const double p_true = logistic(1.0);
    for (int i = 0; i < 100000; ++i) {
      const bool a_wins = rng.bernoulli(p_true);
      pairs.push_back(mdp::make_preference_pair(a_wins ? a : b, a_wins ? b : a,
                                                mdp::LabelSource::fixed));
    }
    const auto model = pref::fit_bandit_reward(index, pairs, 0.0);
    const double fitted = model.value_of(0, a.response) - model.value_of(0, b.response);
    CHECK(std::fabs(fitted - 1.0) < 0.05);

    // 1-D grid oracle: the empirical win rate pins the maximum-likelihood
    // difference; scan the log-likelihood directly
    double wins = 0.0;
    for (const auto& pair : pairs) {
      if (pair.chosen == a.response) wins += 1.0;
    }
    const double n = static_cast<double>(pairs.size());
    double best_diff = 0.0, best_ll = -1e300;
    for (double d = -3.0; d <= 3.0; d += 1e-4) {
      const double ll = wins * std::log(logistic(d)) +
                        (n - wins) * std::log(logistic(-d));
      if (ll > best_ll) {
        best_ll = ll;
        best_diff = d;
      }
    }
    CHECK(std::fabs(fitted - best_diff) < 1e-3);
  }

  SUBCASE("one-sided labels stay finite under L2") {
    std::vector<mdp::PreferencePair> pairs;
    for (int i = 0; i < 30; ++i) {
      pairs.push_back(mdp::make_preference_pair(a, b, mdp::LabelSource::fixed));
    }
    const auto model = pref::fit_bandit_reward(index, pairs, 0.1);
    CHECK(std::isfinite(model.values[0][0]));
    CHECK(std::isfinite(model.values[0][1]));
    CHECK(model.values[0][0] > model.values[0][1]);
  }

  SUBCASE("per-prompt constants do not move preferences") {
    std::vector<mdp::PreferencePair> pairs;
    Rng rng(73);
    for (int i = 0; i < 200; ++i) {
      const bool a_wins = rng.bernoulli(0.7);
      pairs.push_back(mdp::make_preference_pair(a_wins ? a : b, a_wins ? b : a,
                                                mdp::LabelSource::fixed));
    }
    const auto model = pref::fit_bandit_reward(index, pairs, 0.0);
    const double va = model.value_of(0, a.response);
    const double vb = model.value_of(0, b.response);
    const double c = 1.75;
    CHECK(std::fabs(logistic(va - vb) - logistic((va + c) - (vb + c))) < 1e-15);
  }
}

TEST_CASE("terminal placement of a bandit reward reproduces its values") {
  const auto inst = harness::random_instance(127);
  const auto truth = pref::preference_distribution_from_reward(inst.reward);
  const auto model = pref::fit_bandit_reward_exact(truth, 0.0);
  const auto table = pref::bandit_to_terminal_reward(model);
  for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
    const auto rs = model.responses[p];
    for (std::size_t i = 0; i < rs.size(); ++i) {
      CHECK(std::fabs(pref::traj_return(table, rs[i]) - model.values[p][i]) <
            1e-12);
    }
  }
  // the exact fit reproduces the ground-truth preferences
  const auto fitted_dist = pref::preference_distribution_from_reward(table);
  CHECK(pref::tv_distance(truth, fitted_dist) < 1e-4);
}
