#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "qrefine/corpus/synth.hpp"
#include "qrefine/rl.hpp"
#include "toy_mdp.hpp"

using namespace qrefine;

namespace {

PolicyConfig tiny_policy() {
  PolicyConfig c;
  c.embed.word_dim = 6;
  c.embed.char_dim = 4;
  c.embed.char_hidden = 3;
  c.embed.ctx_dim = 4;
  c.embed.ctx_layers = 1;
  c.embed.ctx_input_dim = 4;
  c.enc_hidden = 5;
  c.dec_hidden = 6;
  c.out_hidden = 6;
  c.max_len = 8;
  return c;
}

struct Fixture {
  std::vector<Triple> triples;
  Vocabulary vocab;
  CharVocabulary chars;
  Rng rng{31};
  Policy policy;
  std::unique_ptr<RewardStack> stack;

  Fixture() : triples(synth_corpus(default_grammar(), 40, 30)) {
    auto [v, cv] = build_vocab(triples, 1);
    vocab = std::move(v);
    chars = std::move(cv);
    for (auto& t : triples) vocab.encode(t);
    policy = Policy(tiny_policy(), vocab, chars, rng);
    RewardModelConfig rm;
    rm.word_dim = 6;
    rm.hidden = 5;
    stack = std::make_unique<RewardStack>(policy, RewardModel(rm, vocab.size(), rng), RewardConfig{});
  }

  RlConfig small_rl() const {
    RlConfig c;
    c.episodes = 1;
    c.batch = 4;
    c.baseline_samples = 2;
    c.inner_epochs = 2;
    // A full gold prefix would leave nothing to sample in a single episode.
    c.mixer = false;
    return c;
  }
};

/// Tabular one-step bandit: reward 1 for action `target`, else 0.
struct Bandit {
  nn::Parameter logits{"logits", {4, 1}};
  std::size_t target = 2;

  std::vector<real> probs() const {
    std::vector<real> p(4);
    real z = 0;
    for (std::size_t k = 0; k < 4; ++k) z += p[k] = std::exp(logits.values()[k]);
    for (auto& x : p) x /= z;
    return p;
  }
};

}  // namespace

TEST(Gae, HandComputed) {
  // delta = [1 + 0.5 - 0, 0 + 0 - 0.5] = [1.5, -0.5]; A_0 = 1.5 + 0.5 * (-0.5).
  auto a = gae_advantages({1, 0}, {0, 0.5, 0}, 1.0, 0.5);
  EXPECT_DOUBLE_EQ(a[0], 1.25);
  EXPECT_DOUBLE_EQ(a[1], -0.5);
}

TEST(Gae, LambdaZeroIsOneStepTd) {
  Rng rng(1);
  std::vector<real> r(6), v(7);
  for (auto& x : r) x = rng.uniform(-1, 1);
  for (auto& x : v) x = rng.uniform(-1, 1);
  auto a = gae_advantages(r, v, 0.9, 0.0);
  for (std::size_t t = 0; t < r.size(); ++t) EXPECT_NEAR(a[t], r[t] + 0.9 * v[t + 1] - v[t], 1e-15);
}

TEST(Gae, ZeroValuesAndUnitLambdaGiveReturns) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<real> r(1 + rng.below(15));
    for (auto& x : r) x = rng.uniform(-3, 3);
    const real g = rng.uniform(0, 1);
    EXPECT_EQ(gae_advantages(r, std::vector<real>(r.size() + 1, 0.0), g, 1.0), discounted_returns(r, g));
  }
}

TEST(Gae, RejectsLengthMismatch) {
  EXPECT_THROW(gae_advantages({1, 2}, {0, 0}, 0.9, 0.9), std::invalid_argument);
}

TEST(PpoClip, Examples) {
  // ratio 1.5, A = 1, eps 0.2: the clipped branch 1.2 wins.
  EXPECT_DOUBLE_EQ(ppo_clip_objective(1.5, 1.0, 0.2), 1.2);
  // ratio 0.5, A = -1: clipped (0.8 * -1) is the minimum.
  EXPECT_DOUBLE_EQ(ppo_clip_objective(0.5, -1.0, 0.2), -0.8);
  EXPECT_DOUBLE_EQ(ppo_clip_objective(1.0, 3.7, 0.2), 3.7);
  EXPECT_THROW(ppo_clip_objective(0.0, 1.0, 0.2), std::invalid_argument);
}

TEST(PpoClip, TapeGradientFollowsActiveBranch) {
  for (real ratio : {0.5, 0.9, 1.1, 1.5})
    for (real adv : {-2.0, 2.0}) {
      Tape t;
      nn::Parameter lp("lp", {1, 1});
      lp.values()[0] = std::log(ratio);
      Var out = t.ppo_clip(t.param(lp), 0.0, adv, 0.2);
      t.backward(out);
      const bool clipped = (adv > 0 && ratio > 1.2) || (adv < 0 && ratio < 0.8);
      EXPECT_NEAR(out.scalar(), ppo_clip_objective(ratio, adv, 0.2), 1e-12);
      EXPECT_NEAR(lp.grad()[0], clipped ? 0.0 : ratio * adv, 1e-12) << ratio << " " << adv;
    }
}

TEST(Entropy, OneHotUniformAndBruteForce) {
  EXPECT_EQ(entropy_term({{0, 1, 0}, {1, 0, 0}}), 0.0);
  EXPECT_NEAR(entropy_term({{.25, .25, .25, .25}, {.25, .25, .25, .25}, {.25, .25, .25, .25}}), 3 * std::log(4.0),
              1e-12);
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<real>> d(3, std::vector<real>(5));
    real want = 0;
    for (auto& row : d) {
      real z = 0;
      for (auto& x : row) z += x = rng.uniform(0.01, 1);
      for (auto& x : row) {
        x /= z;
        want += -x * std::log(x);
      }
    }
    EXPECT_NEAR(entropy_term(d), want, 1e-8);
    Tape t;
    EXPECT_NEAR(t.entropy(t.input(d[0])).scalar() + t.entropy(t.input(d[1])).scalar() +
                    t.entropy(t.input(d[2])).scalar(),
                want, 1e-8);
  }
}

TEST(ReinforceObjective, ZeroAdvantageGivesZeroGradient) {
  toy::Mdp m(4);
  m.theta.zero_grad();
  Tape t;
  std::vector<Var> dists{t.softmax(t.lookup(m.theta, 0)), t.softmax(t.lookup(m.theta, 1))};
  std::vector<TokenId> actions{0, 1};
  std::vector<real> returns{0.7, 0.7};
  t.backward(reinforce_objective(t, dists, actions, returns, 0.7, 0.0));
  for (real g : m.theta.grad()) EXPECT_EQ(g, 0.0);
}

TEST(ReinforceObjective, ExpectedEstimatorIsExactGradient) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    toy::Mdp m(seed);
    const auto exact = m.exact_gradient();
    const auto est = m.expected_estimator(0.0);
    for (std::size_t i = 0; i < exact.size(); ++i) EXPECT_NEAR(est[i], exact[i], 1e-8);
  }
}

TEST(ReinforceObjective, ConstantBaselineKeepsExpectation) {
  toy::Mdp m(5);
  const auto g0 = m.expected_estimator(0.0);
  for (real b : {-3.0, 0.4, 10.0}) {
    const auto gb = m.expected_estimator(b);
    for (std::size_t i = 0; i < g0.size(); ++i) EXPECT_NEAR(gb[i], g0[i], 1e-12);
  }
}

TEST(ReinforceObjective, SampledEstimateAlignsWithExact) {
  toy::Mdp m(6);
  Rng rng(7);
  EXPECT_GT(toy::cosine(m.sampled_estimator(2000, 0.0, rng), m.exact_gradient()), 0.9);
}

TEST(EstimateBaseline, MatchesReplayedSamples) {
  Fixture f;
  const auto& tr = f.triples[0];
  Rng a(8), b(8);
  const real got = estimate_baseline(f.policy, *f.stack, tr, 3, a);
  real want = 0;
  for (int i = 0; i < 3; ++i) {
    auto traj = f.policy.sample_decode(tr.ill, b);
    f.stack->score(traj, tr.ill, tr.answer);
    want += traj.returns.front();
  }
  EXPECT_NEAR(got, want / 3, 1e-12);
  EXPECT_THROW(estimate_baseline(f.policy, *f.stack, tr, 0, a), std::invalid_argument);
}

TEST(EstimateBaseline, ConcentratesAroundMeanReturn) {
  Fixture f;
  const auto& tr = f.triples[1];
  Rng rng(9);
  std::vector<real> single;
  for (int i = 0; i < 1000; ++i) single.push_back(estimate_baseline(f.policy, *f.stack, tr, 1, rng));
  real mean = 0, var = 0;
  for (real x : single) mean += x / 1000;
  for (real x : single) var += (x - mean) * (x - mean) / 999;
  const real b = estimate_baseline(f.policy, *f.stack, tr, 1000, rng);
  EXPECT_NEAR(b, mean, 3 * std::sqrt(2 * var / 1000));
}

TEST(Normalize, StandardizesAcrossBatch) {
  std::vector<Trajectory> trajs(2);
  trajs[0].advantages = {1, 2, 3};
  trajs[1].advantages = {4, 5};
  detail::normalize(trajs);
  real s = 0, sq = 0;
  for (const auto& t : trajs)
    for (real a : t.advantages) {
      s += a;
      sq += a * a;
    }
  EXPECT_NEAR(s / 5, 0.0, 1e-12);
  EXPECT_NEAR(sq / 5, 1.0, 1e-6);
  std::vector<Trajectory> one(1);
  one[0].advantages = {7};
  detail::normalize(one);
  EXPECT_EQ(one[0].advantages[0], 7.0);
}

TEST(MixerPrefix, CountsPassesOverTrainingSet) {
  RlConfig c;
  c.batch = 50;
  // 100 examples: two episodes per pass.
  EXPECT_EQ(detail::mixer_prefix_len(c, 0, 100), 12u);
  EXPECT_EQ(detail::mixer_prefix_len(c, 3, 100), 12u);
  EXPECT_EQ(detail::mixer_prefix_len(c, 4, 100), 9u);
  c.mixer = false;
  EXPECT_EQ(detail::mixer_prefix_len(c, 0, 100), 0u);
}

TEST(Bandit, ReinforceRaisesTargetProbability) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Bandit bandit;
    Rng rng(seed);
    nn::AdamConfig adam{0.05};
    const real before = bandit.probs()[bandit.target];
    for (int update = 0; update < 50; ++update) {
      bandit.logits.zero_grad();
      const auto p = bandit.probs();
      std::vector<std::size_t> acts(8);
      real mean_r = 0;
      for (auto& a : acts) mean_r += ((a = rng.categorical(p)) == bandit.target) / 8.0;
      for (auto a : acts) {
        Tape t;
        std::vector<Var> d{t.softmax(t.param(bandit.logits))};
        std::vector<TokenId> act{static_cast<TokenId>(a)};
        std::vector<real> ret{a == bandit.target ? 1.0 : 0.0};
        t.backward(t.scale(reinforce_objective(t, d, act, ret, mean_r, 0.0), 1.0 / 8));
      }
      nn::adam_step({&bandit.logits}, adam);
    }
    EXPECT_GT(bandit.probs()[bandit.target], before) << seed;
  }
}

TEST(Bandit, PpoRaisesTargetProbability) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Bandit bandit;
    Rng rng(seed);
    nn::AdamConfig adam{0.05};
    const real before = bandit.probs()[bandit.target];
    for (int update = 0; update < 50; ++update) {
      const auto old = bandit.probs();
      std::vector<std::size_t> acts(8);
      real mean_r = 0;
      for (auto& a : acts) mean_r += ((a = rng.categorical(old)) == bandit.target) / 8.0;
      for (int inner = 0; inner < 4; ++inner) {
        bandit.logits.zero_grad();
        for (auto a : acts) {
          Tape t;
          std::vector<Var> d{t.softmax(t.param(bandit.logits))};
          std::vector<TokenId> act{static_cast<TokenId>(a)};
          std::vector<real> lp_old{std::log(old[a])}, adv{(a == bandit.target ? 1.0 : 0.0) - mean_r};
          t.backward(t.scale(ppo_objective(t, d, act, lp_old, adv, 0.2, 0.0), 1.0 / 8));
        }
        nn::adam_step({&bandit.logits}, adam);
      }
    }
    EXPECT_GT(bandit.probs()[bandit.target], before) << seed;
  }
}

TEST(RatioAfterSync, IsExactlyOne) {
  Fixture f;
  Rng rng(10);
  std::vector<const Triple*> batch;
  std::vector<Trajectory> trajs;
  std::vector<std::vector<TokenId>> prefixes;
  for (std::size_t i = 0; i < 6; ++i) {
    batch.push_back(&f.triples[i]);
    prefixes.push_back(detail::mixer_prefix(f.triples[i], i % 3));
    trajs.push_back(f.policy.sample_decode(f.triples[i].ill, rng, 0, prefixes.back()));
  }
  EXPECT_LT(mean_ratio_deviation(f.policy, batch, trajs, prefixes), 1e-12);
}

TEST(TrainReinforce, OneEpisodeSmoke) {
  Fixture f;
  std::vector<Triple> train(f.triples.begin(), f.triples.begin() + 30), dev(f.triples.begin() + 30, f.triples.end());
  const auto rm = nn::checksum(f.stack->model().parameters());
  const auto before = nn::checksum(f.policy.parameters());
  Rng rng(11);
  std::size_t calls = 0;
  auto log = train_reinforce(f.policy, *f.stack, train, dev, f.small_rl(), rng, [&](const EpisodeMetrics&) { ++calls; });
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(calls, 1u);
  EXPECT_TRUE(std::isfinite(log[0].mean_reward));
  EXPECT_TRUE(std::isfinite(log[0].policy_loss));
  EXPECT_NE(before, nn::checksum(f.policy.parameters()));
  EXPECT_EQ(rm, nn::checksum(f.stack->model().parameters()));
}

TEST(TrainPpo, OneEpisodeSmoke) {
  Fixture f;
  std::vector<Triple> train(f.triples.begin(), f.triples.begin() + 30), dev(f.triples.begin() + 30, f.triples.end());
  const auto rm = nn::checksum(f.stack->model().parameters());
  Rng rng(12);
  ValueHead value(tiny_policy().dec_hidden, rng);
  const auto v0 = nn::checksum(value.parameters());
  auto log = train_ppo(f.policy, value, *f.stack, train, dev, f.small_rl(), rng);
  ASSERT_EQ(log.size(), 1u);
  EXPECT_TRUE(std::isfinite(log[0].value_loss));
  EXPECT_GE(log[0].entropy, 0.0);
  EXPECT_NE(v0, nn::checksum(value.parameters()));
  EXPECT_EQ(rm, nn::checksum(f.stack->model().parameters()));
}

TEST(TrainRl, DeterministicGivenSeed) {
  auto run = [] {
    Fixture f;
    std::vector<Triple> train(f.triples.begin(), f.triples.begin() + 30), dev(f.triples.begin() + 30, f.triples.end());
    Rng rng(13);
    auto cfg = f.small_rl();
    cfg.episodes = 2;
    std::ostringstream csv;
    write_metrics_header(csv);
    for (const auto& m : train_reinforce(f.policy, *f.stack, train, dev, cfg, rng)) write_metrics_row(csv, m);
    return csv.str();
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 3);
}

TEST(RlConfig, Validation) {
  RlConfig c;
  c.episodes = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = RlConfig{};
  c.gae_lambda = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = RlConfig{};
  c.clip_eps = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(parse_algo("ppo"), Algo::Ppo);
  EXPECT_STREQ(to_string(Algo::Reinforce), "reinforce");
  EXPECT_THROW(parse_algo("a2c"), std::invalid_argument);
}
