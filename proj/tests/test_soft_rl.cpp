#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "helpers.hpp"
#include "tokenrl/harness/task_gen.hpp"
#include "tokenrl/soft_rl.hpp"

using namespace tokenrl;
using testutil::bandit_task;
using testutil::small_task;

namespace {

double max_abs_diff(const softrl::StateActionTable& a,
                    const softrl::StateActionTable& b) {
  double worst = 0.0;
  for (std::size_t p = 0; p < a.index().num_prompts(); ++p) {
    const auto fa = a.flat(p);
    const auto fb = b.flat(p);
    for (std::size_t i = 0; i < fa.size(); ++i) {
      worst = std::max(worst, std::fabs(fa[i] - fb[i]));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("zero reward: pi* equals the reference and V vanishes") {
  const auto inst = harness::random_instance(11);
  const softrl::RewardTable zero(inst.index);
  const auto sol = softrl::solve_soft(inst.index, zero, inst.ref, inst.beta);

  const auto ref_probs =
      policy::materialize_log_probs(*inst.ref, inst.index, inst.beta);
  for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
    const auto& tree = inst.index->tree(p);
    for (int n = 0; n < tree.num_nodes(); ++n) {
      CHECK(std::fabs(sol.v.at(p, n)) < 1e-12);
      const auto pi_row = sol.pi_star.row(p, n);
      const auto ref_row = ref_probs.row(p, n);
      for (std::size_t k = 0; k < pi_row.size(); ++k) {
        CHECK(std::fabs(pi_row[k] - std::exp(ref_row[k])) < 1e-12);
      }
    }
  }
}

TEST_CASE("depth-1 bandit closed form") {
  const auto m = bandit_task();
  const auto index = mdp::TreeIndex::build(m);
  softrl::RewardTable reward(index);
  // responses [0] and [1,0]; rewards 1 and 0 placed on their EOS transitions
  reward.at(0, 0, 0) = 1.0;
  const auto ref = std::make_shared<policy::TabularPolicy>(index);  // uniform

  SUBCASE("beta = 1") {
    const auto sol = softrl::solve_soft(index, reward, ref, 1.0);
    // pi* over responses = pi_ref * exp(r/beta), normalized: logistic(1)
    CHECK(sol.pi_star.at(0, 0, 0) == doctest::Approx(0.7310585786300049).epsilon(1e-12));
    CHECK(sol.pi_star.at(0, 0, 1) == doctest::Approx(0.2689414213699951).epsilon(1e-12));
  }
  SUBCASE("beta = 2") {
    const auto sol = softrl::solve_soft(index, reward, ref, 2.0);
    CHECK(sol.pi_star.at(0, 0, 0) == doctest::Approx(0.6224593312018546).epsilon(1e-12));
    CHECK(sol.pi_star.at(0, 0, 1) == doctest::Approx(0.3775406687981454).epsilon(1e-12));
  }
}

TEST_CASE("pi* rows are proper distributions") {
  const auto inst = harness::random_instance(17);
  const auto sol = softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
  for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
    const auto& tree = inst.index->tree(p);
    for (int n = 0; n < tree.num_nodes(); ++n) {
      double total = 0.0;
      for (double v : sol.pi_star.row(p, n)) {
        CHECK(v > 0.0);
        total += v;
      }
      CHECK(std::fabs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("reward -> Q* -> reward round trip") {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    const auto inst = harness::random_instance(seed);
    const auto sol = softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
    const auto back = softrl::q_to_reward(sol.q, *inst.ref, inst.beta);
    CHECK(max_abs_diff(inst.reward, back) < 1e-9);
  }
}

TEST_CASE("Q -> reward -> Q* round trip") {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    const auto inst = harness::random_instance(seed);
    Rng rng(seed * 977);
    const auto q = harness::random_reward_table(inst.index, rng, -2.0, 2.0);
    const auto r = softrl::q_to_reward(q, *inst.ref, inst.beta);
    const auto sol = softrl::solve_soft(inst.index, r, inst.ref, inst.beta);
    CHECK(max_abs_diff(q, sol.q) < 1e-9);
  }
}

TEST_CASE("terminal-consistent Q built from the reference inverts to zero reward") {
  const auto inst = harness::random_instance(31);
  // q(s,a) = beta * log pi_ref(a|s)
  softrl::QTable q(inst.index);
  const auto logref =
      policy::materialize_log_probs(*inst.ref, inst.index, inst.beta);
  for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
    const auto src = logref.flat(p);
    auto dst = q.flat(p);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = inst.beta * src[i];
  }
  const auto r = softrl::q_to_reward(q, *inst.ref, inst.beta);
  for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
    for (double v : r.flat(p)) CHECK(std::fabs(v) < 1e-10);
  }
}

TEST_CASE("global Q shift changes the reward but not the preferences") {
  const auto inst = harness::random_instance(41);
  const auto sol = softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
  softrl::QTable shifted = sol.q;
  const double c = 0.7718;
  for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
    for (auto& v : shifted.flat(p)) v += c;
  }
  const auto r2 = softrl::q_to_reward(shifted, *inst.ref, inst.beta);
  CHECK(max_abs_diff(inst.reward, r2) > 1e-3);  // rewards differ...

  // ...but every pairwise preference probability is unchanged: brute force
  // over all enumerated trajectory pairs via explicit return sums
  const auto& m = inst.index->mdp();
  for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
    const auto rs = mdp::enumerate_responses(m, m.prompts[p]);
    for (std::size_t i = 0; i < rs.size(); ++i) {
      for (std::size_t j = i + 1; j < rs.size(); ++j) {
        const double ri1 = testutil::return_by_stepping(m, inst.reward, p, rs[i].response);
        const double rj1 = testutil::return_by_stepping(m, inst.reward, p, rs[j].response);
        const double ri2 = testutil::return_by_stepping(m, r2, p, rs[i].response);
        const double rj2 = testutil::return_by_stepping(m, r2, p, rs[j].response);
        const double p1 = testutil::logistic(ri1 - rj1);
        const double p2 = testutil::logistic(ri2 - rj2);
        CHECK(std::fabs(p1 - p2) < 1e-10);
      }
    }
  }
}

TEST_CASE("gauge: per-state constant shift leaves that state's pi* unchanged") {
  const auto inst = harness::random_instance(43);
  auto sol = softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
  const auto pi_before = sol.pi_star;
  auto q = sol.q;
  for (auto& v : q.row(0, 0)) v += 3.25;  // shift all Q entries at the root
  // recompute the root distribution from the shifted row
  std::vector<double> row(q.row(0, 0).begin(), q.row(0, 0).end());
  for (auto& v : row) v /= inst.beta;
  const double lse = log_sum_exp(row);
  const auto before = pi_before.row(0, 0);
  for (std::size_t k = 0; k < row.size(); ++k) {
    CHECK(std::fabs(std::exp(row[k] - lse) - before[k]) < 1e-12);
  }
}

TEST_CASE("shaping: zero potential is the identity") {
  const auto inst = harness::random_instance(51);
  const softrl::Potential phi(inst.index);
  const auto shaped = softrl::shape_reward(inst.reward, phi);
  CHECK(max_abs_diff(inst.reward, shaped) == 0.0);
}

TEST_CASE("shaping: trajectory sums shift by -phi(root)") {
  const auto inst = harness::random_instance(53);
  Rng rng(99);
  const auto phi = harness::random_potential(inst.index, rng, 1.0);
  const auto shaped = softrl::shape_reward(inst.reward, phi);
  const auto& m = inst.index->mdp();
  for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
    const double shift = -phi.interior.at(p, 0);
    for (const auto& rtraj : mdp::enumerate_responses(m, m.prompts[p])) {
      const double before = testutil::return_by_stepping(m, inst.reward, p, rtraj.response);
      const double after = testutil::return_by_stepping(m, shaped, p, rtraj.response);
      CHECK(std::fabs((after - before) - shift) < 1e-12);
    }
  }
}

TEST_CASE("shaping: pi* is invariant under terminal-vanishing potentials") {
  const auto inst = harness::random_instance(57);
  Rng rng(101);
  const auto phi = harness::random_potential(inst.index, rng, 1.0);
  const auto shaped = softrl::shape_reward(inst.reward, phi);
  const auto a = softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
  const auto b = softrl::solve_soft(inst.index, shaped, inst.ref, inst.beta);
  CHECK(max_abs_diff(a.pi_star, b.pi_star) < 1e-10);
}

TEST_CASE("shaping rejects potentials that are nonzero at terminals") {
  const auto inst = harness::random_instance(59);
  softrl::Potential phi(inst.index);
  phi.terminal.at(0, 0) = 0.5;
  CHECK_THROWS_WITH_AS(softrl::shape_reward(inst.reward, phi),
                       "potential: nonzero at a terminal state",
                       std::invalid_argument);
}

TEST_CASE("advantage: three routes agree") {
  const auto inst = harness::random_instance(61);
  const auto sol = softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
  const auto adv = softrl::advantage_of(sol);
  const auto logref =
      policy::materialize_log_probs(*inst.ref, inst.index, inst.beta);
  const int vocab = inst.index->mdp().vocab_size;
  for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
    const auto& tree = inst.index->tree(p);
    for (int n = 0; n < tree.num_nodes(); ++n) {
      for (Token a = 0; a < vocab; ++a) {
        if (!tree.action_valid(n, a)) continue;
        const double route1 = adv.at(p, n, a);
        // route 2: beta * log(pi*/pi_ref)
        const double route2 = inst.beta * (std::log(sol.pi_star.at(p, n, a)) -
                                           logref.at(p, n, a));
        // route 3: r + V(s') - V(s)
        const int c = tree.child(n, a);
        const double route3 = inst.reward.at(p, n, a) +
                              (c >= 0 ? sol.v.at(p, c) : 0.0) - sol.v.at(p, n);
        CHECK(std::fabs(route1 - route2) < 1e-10);
        CHECK(std::fabs(route1 - route3) < 1e-10);
      }
    }
  }
}

TEST_CASE("advantage: zero reward gives zero advantage") {
  const auto inst = harness::random_instance(67);
  const softrl::RewardTable zero(inst.index);
  const auto sol = softrl::solve_soft(inst.index, zero, inst.ref, inst.beta);
  const auto adv = softrl::advantage_of(sol);
  for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
    for (double v : adv.flat(p)) CHECK(std::fabs(v) < 1e-10);
  }
}

TEST_CASE("advantage: reference-weighted exponential normalizes to one") {
  const auto inst = harness::random_instance(71);
  const auto sol = softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
  const auto adv = softrl::advantage_of(sol);
  const auto logref =
      policy::materialize_log_probs(*inst.ref, inst.index, inst.beta);
  for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
    const auto& tree = inst.index->tree(p);
    for (int n = 0; n < tree.num_nodes(); ++n) {
      const auto a_row = adv.row(p, n);
      const auto r_row = logref.row(p, n);
      double total = 0.0;
      for (std::size_t k = 0; k < a_row.size(); ++k) {
        total += std::exp(r_row[k]) * std::exp(a_row[k] / inst.beta);
      }
      CHECK(std::fabs(total - 1.0) < 1e-10);
    }
  }
}

TEST_CASE("soft-optimality: V(root) matches the enumeration partition sum") {
  for (std::uint64_t seed : {73u, 74u, 75u}) {
    const auto inst = harness::random_instance(seed);
    const auto sol = softrl::solve_soft(inst.index, inst.reward, inst.ref, inst.beta);
    const auto logref =
        policy::materialize_log_probs(*inst.ref, inst.index, inst.beta);
    const auto& m = inst.index->mdp();
    for (std::size_t p = 0; p < inst.index->num_prompts(); ++p) {
      std::vector<double> terms;
      for (const auto& traj : mdp::enumerate_responses(m, m.prompts[p])) {
        const auto path = mdp::path_of(*inst.index, p, traj.response);
        double num = 0.0;
        for (const auto& [node, action] : path) {
          num += inst.reward.at(p, node, action) +
                 inst.beta * logref.at(p, node, action);
        }
        terms.push_back(num / inst.beta);
      }
      const double v_enum = inst.beta * log_sum_exp(terms);
      CHECK(std::fabs(v_enum - sol.v.at(p, 0)) < 1e-9);
    }
  }
}

TEST_CASE("reference with a zero-probability action is rejected") {
  const auto m = small_task();
  const auto index = mdp::TreeIndex::build(m);
  const softrl::RewardTable reward(index);
  auto ref = std::make_shared<policy::TabularPolicy>(index);
  ref->logit(0, 0, 1) = -5000.0;  // exp underflows to zero probability
  CHECK_THROWS_WITH_AS(softrl::solve_soft(index, reward, ref, 1.0),
                       "zero-probability reference action",
                       std::invalid_argument);
  // flooring turns the hard failure into a clamped reference
  softrl::SolveOptions opts;
  opts.ref_floor = 1e-9;
  CHECK_NOTHROW(softrl::solve_soft(index, reward, ref, 1.0, opts));
}

TEST_CASE("reward table io round trip, sparse zeros and bad keys") {
  const auto dir = std::filesystem::temp_directory_path() / "tokenrl_test_softrl";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "rewards.jsonl").string();

  const auto inst = harness::random_instance(81);
  softrl::save_reward_table(inst.reward, path);
  const auto loaded = softrl::load_reward_table(inst.index, path);
  CHECK(max_abs_diff(inst.reward, loaded) == 0.0);

  // sparse: zero entries are implicit
  softrl::RewardTable sparse(inst.index);
  sparse.at(0, 0, inst.index->mdp().eos_id) = 1.5;
  softrl::save_reward_table(sparse, path, /*sparse=*/true);
  const auto loaded2 = softrl::load_reward_table(inst.index, path);
  CHECK(max_abs_diff(sparse, loaded2) == 0.0);

  {
    std::ofstream out(path);
    out << R"({"prompt_index": 0, "prefix": [0], "action": 0, "value": 1.0})" << "\n";
  }
  // EOS cannot start a prefix, so with eos_id = 0 the key is unreachable
  const auto fixed_index = mdp::TreeIndex::build(small_task());
  CHECK_THROWS_AS(softrl::load_reward_table(fixed_index, path), std::runtime_error);
}
