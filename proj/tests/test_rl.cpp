#include <gridmind/checkpoint.hpp>
#include <gridmind/data.hpp>
#include <gridmind/metrics.hpp>
#include <gridmind/rl.hpp>

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

using namespace gridmind;

namespace {

ModelConfig rl_model_config() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.model_dim = 32;
  cfg.mlp_mult = 2;
  cfg.h = 2;
  cfg.d = 3;
  cfg.action_bins = 16;
  cfg.max_cot_len = 16;
  cfg.max_seq_len = 48;
  return cfg;
}

GrpoConfig rl_grpo_config() {
  GrpoConfig cfg;
  cfg.group_size = 4;
  cfg.eps_low = 0.2;
  cfg.eps_high = 0.28;
  cfg.beta = 0.01;
  return cfg;
}

double total(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("reward combines success and format indicators") {
  RewardConfig cfg;
  CHECK(compute_reward(true, true, cfg) == 1.1);
  CHECK(compute_reward(true, false, cfg) == 1.0);
  CHECK(compute_reward(false, true, cfg) == 0.1);
  CHECK(compute_reward(false, false, cfg) == 0.0);
}

TEST_CASE("group advantages are population-standardized with a zero fallback") {
  std::vector<double> adv = compute_group_advantage({1.0, 0.0, 0.0, 1.0});
  REQUIRE(adv.size() == 4);
  CHECK(adv[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(adv[1] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(adv[2] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(adv[3] == doctest::Approx(1.0).epsilon(1e-12));

  double mean = total(adv) / 4.0;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  CHECK(std::abs(mean) < 1e-9);
  CHECK(std::abs(std::sqrt(var / 4.0) - 1.0) < 1e-9);

  adv = compute_group_advantage({1.0, 0.0});
  CHECK(adv[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(adv[1] == doctest::Approx(-1.0).epsilon(1e-12));

  adv = compute_group_advantage({0.7, 0.7, 0.7});
  for (double a : adv) CHECK(a == 0.0);

  // spread below the degeneracy threshold also collapses to zero
  adv = compute_group_advantage({0.5, 0.5 + 1e-9, 0.5});
  for (double a : adv) CHECK(a == 0.0);

  CHECK_THROWS_AS(compute_group_advantage({1.0}), std::invalid_argument);
}

TEST_CASE("clipped surrogate arithmetic") {
  CHECK(clipped_surrogate({1.0}, 0.7, 0.2, 0.28)[0] == 0.7);
  CHECK(clipped_surrogate({1.0}, -0.4, 0.2, 0.28)[0] == -0.4);
  CHECK(clipped_surrogate({1.5}, 1.0, 0.2, 0.28)[0] == doctest::Approx(1.28).epsilon(1e-12));
  CHECK(clipped_surrogate({0.5}, -1.0, 0.2, 0.28)[0] == doctest::Approx(-0.8).epsilon(1e-12));
  // a large ratio with negative advantage stays on the unclipped branch
  CHECK(clipped_surrogate({1.5}, -1.0, 0.2, 0.28)[0] == doctest::Approx(-1.5).epsilon(1e-12));

  std::vector<double> many = clipped_surrogate({0.5, 1.0, 1.5}, 1.0, 0.2, 0.28);
  CHECK(many[0] == doctest::Approx(0.5));   // below the band but advantage positive: unclipped min
  CHECK(many[1] == doctest::Approx(1.0));
  CHECK(many[2] == doctest::Approx(1.28));
}

TEST_CASE("binding clip zeroes the gradient through the logits") {
  const int V = 6;
  const int target = 2;
  std::vector<double> base = {0.3, -0.7, 1.1, 0.2, -0.4, 0.9};
  double eps_low = 0.2, eps_high = 0.28;

  // plain recompute of one token's surrogate from raw logits
  auto surr_of = [&](const std::vector<double>& xv, double blp, double adv) {
    double lp = xv[size_t(target)] - log_sum_exp({xv.data(), xv.size()});
    return clipped_surrogate({std::exp(lp - blp)}, adv, eps_low, eps_high)[0];
  };
  double lp0 = base[size_t(target)] - log_sum_exp({base.data(), base.size()});

  struct Case {
    double ratio, adv;
    bool binding;
  };
  // ratio 1.5 with positive advantage binds high; ratio 0.5 with negative
  // advantage binds low; the other two flow gradient
  std::vector<Case> cases = {{1.5, 1.0, true}, {0.5, -1.0, true}, {0.9, 1.0, false},
                             {1.5, -1.0, false}};
  for (const Case& c : cases) {
    CAPTURE(c.ratio);
    CAPTURE(c.adv);
    double blp = lp0 - std::log(c.ratio);

    Tensor x({1, V}, base, true);
    Tape tape;
    Tensor lp = gather_cols(log_softmax(x), {target});
    Tensor surr = clipped_surrogate_tensor(lp, {blp}, c.adv, eps_low, eps_high);
    CHECK(surr.values()[0] ==
          doctest::Approx(surr_of(base, blp, c.adv)).epsilon(1e-12));
    tape.backward(sum(surr));

    for (int j = 0; j < V; ++j) {
      std::vector<double> hi = base, lo = base;
      hi[size_t(j)] += 1e-6;
      lo[size_t(j)] -= 1e-6;
      double fd = (surr_of(hi, blp, c.adv) - surr_of(lo, blp, c.adv)) / 2e-6;
      double g = x.grad()[size_t(j)];
      if (c.binding) {
        CHECK(std::abs(fd) < 1e-8);
        CHECK(g == 0.0);
      } else {
        CHECK(std::abs(g - fd) < 1e-6 * std::max(1.0, std::abs(fd)));
      }
    }
  }

  Tensor bad({1}, {1.0}, true);
  Tensor blown = add_const(bad, 2000.0);  // exp overflows to inf
  CHECK_THROWS_AS(clipped_surrogate_tensor(blown, {0.0}, 1.0, 0.2, 0.28), std::runtime_error);
}

TEST_CASE("kl penalty is zero for identical snapshots and positive otherwise") {
  TaskSuite suite = TaskSuite::default_suite();
  ModelConfig mcfg = rl_model_config();
  VocabSpec vocab = suite_vocab(suite, mcfg.action_bins);
  Policy p = Policy::init(mcfg, vocab, 13);
  Policy same = p.clone_as(Role::reference);

  TaskSpec task = suite.task(0);
  WorldState state = reset(suite, task, 5);
  std::vector<int> prefix = prefix_tokens(state, task, vocab);
  std::vector<int> seq = prefix;
  seq.push_back(VocabSpec::THINK_OPEN);
  seq.push_back(vocab.word_id("subtask"));
  seq.push_back(VocabSpec::THINK_CLOSE);
  for (int i = 0; i < mcfg.action_len(); ++i) seq.push_back(vocab.action_token(i % 16));
  SequenceLayout layout{int(prefix.size()), 3, mcfg.action_len()};

  CHECK(kl_penalty(p, same, {seq}, {layout}) == 0.0);

  // perturbed reference: positive KL matching a direct full-vocabulary oracle
  Policy other = p.clone_as(Role::reference);
  Rng rng(99);
  for (auto& [name, t] : other.params)
    for (double& v : t.values()) v += 0.02 * rng.normal();

  double kl = kl_penalty(p, other, {seq}, {layout});
  CHECK(kl > 0.0);

  ScoredPositions sp = scored_positions(seq, layout);
  Tensor cur = policy_forward(p, sp.input_tokens, layout);
  Tensor ref = policy_forward(other, sp.input_tokens, layout);
  double oracle = 0.0;
  for (int row : sp.rows) {
    std::vector<double> pr = softmax_row({cur.values().data() + size_t(row) * size_t(cur.cols()),
                                          size_t(cur.cols())});
    std::vector<double> qr = softmax_row({ref.values().data() + size_t(row) * size_t(ref.cols()),
                                          size_t(ref.cols())});
    for (size_t v = 0; v < pr.size(); ++v) oracle += pr[v] * (std::log(pr[v]) - std::log(qr[v]));
  }
  oracle /= double(sp.rows.size());
  CHECK(std::abs(kl - oracle) < 1e-10);

  // a few random perturbation draws all stay nonnegative
  for (int trial = 0; trial < 3; ++trial) {
    Policy q = p.clone_as(Role::reference);
    Rng trng(1000 + uint64_t(trial));
    for (auto& [name, t] : q.params)
      for (double& v : t.values()) v += 0.05 * trng.normal();
    CHECK(kl_penalty(p, q, {seq}, {layout}) >= 0.0);
  }
}

TEST_CASE("rollouts are deterministic and carry consistent logprobs") {
  TaskSuite suite = TaskSuite::default_suite();
  ModelConfig mcfg = rl_model_config();
  VocabSpec vocab = suite_vocab(suite, mcfg.action_bins);
  Policy behavior = Policy::init(mcfg, vocab, 17).clone_as(Role::behavior);
  TaskSpec task = suite.task(2);
  task.max_steps = 16;  // keep untrained episodes short
  RewardConfig rcfg;

  RolloutGroup g1 = collect_rollouts(behavior, suite, task, 4, 77, 1.0, rcfg);
  RolloutGroup g2 = collect_rollouts(behavior, suite, task, 4, 77, 1.0, rcfg);
  REQUIRE(g1.trajectories.size() == 4);
  CHECK(g1.advantages == g2.advantages);

  bool all_prefixes_equal = true;
  for (size_t i = 0; i < 4; ++i) {
    const Trajectory& a = g1.trajectories[i];
    const Trajectory& b = g2.trajectories[i];
    CHECK(a.reward == b.reward);
    CHECK(a.reward == compute_reward(a.success, a.format_ok, rcfg));
    REQUIRE(a.steps.size() == b.steps.size());
    for (size_t s = 0; s < a.steps.size(); ++s) {
      CHECK(a.steps[s].cot == b.steps[s].cot);
      CHECK(a.steps[s].actions == b.steps[s].actions);
      CHECK(a.steps[s].logprobs == b.steps[s].logprobs);

      const RolloutStep& st = a.steps[s];
      CHECK(int(st.logprobs.size()) == st.scored_tokens());
      CHECK(st.sampled_logprobs.size() == st.logprobs.size());
      // stored logprobs are reproduced bit-for-bit by a fresh rescoring pass,
      // and the incremental session agrees to numerical accuracy
      std::vector<double> rescored = sequence_logprobs(behavior, st.sequence(), st.layout());
      CHECK(st.logprobs == rescored);
      for (size_t k = 0; k < rescored.size(); ++k)
        CHECK(std::abs(st.sampled_logprobs[k] - rescored[k]) < 1e-10);
    }
    if (i > 0 && a.steps[0].prefix != g1.trajectories[0].steps[0].prefix)
      all_prefixes_equal = false;
  }
  CHECK(!all_prefixes_equal);  // distinct env seeds give distinct conditions
}

TEST_CASE("zero-temperature rollouts reproduce greedy decoding") {
  TaskSuite suite = TaskSuite::default_suite();
  ModelConfig mcfg = rl_model_config();
  VocabSpec vocab = suite_vocab(suite, mcfg.action_bins);
  Policy behavior = Policy::init(mcfg, vocab, 23).clone_as(Role::behavior);
  TaskSpec task = suite.task(4);
  task.max_steps = 10;
  RewardConfig rcfg;

  Trajectory t1 = rollout_episode(behavior, suite, task, 31, 1, 0.0, rcfg);
  Trajectory t2 = rollout_episode(behavior, suite, task, 31, 2, 0.0, rcfg);  // rng unused at 0
  REQUIRE(t1.steps.size() == t2.steps.size());
  for (size_t s = 0; s < t1.steps.size(); ++s) {
    CHECK(t1.steps[s].cot == t2.steps[s].cot);
    CHECK(t1.steps[s].actions == t2.steps[s].actions);
  }

  // replay the environment and decode greedily by hand at every step
  WorldState state = reset(suite, task, 31);
  for (const RolloutStep& st : t1.steps) {
    CHECK(st.prefix == prefix_tokens(state, task, vocab));
    CotResult cot = generate_cot(behavior, st.prefix, behavior.cfg.max_cot_len);
    CHECK(cot.tokens == st.cot);
    ActionDecodeResult act = decode_actions_parallel(behavior, st.prefix, cot.tokens);
    CHECK(act.tokens == st.actions);
    step_chunk(state, act.chunk, task.max_steps);
  }
}

TEST_CASE("format check rejects truncated or malformed steps") {
  Trajectory t;
  RolloutStep ok;
  ok.cot = {VocabSpec::THINK_OPEN, 10, VocabSpec::THINK_CLOSE};
  t.steps.push_back(ok);
  CHECK(trajectory_format_ok(t, 16));

  RolloutStep truncated = ok;
  truncated.truncated = true;
  t.steps.push_back(truncated);
  CHECK(!trajectory_format_ok(t, 16));

  t.steps.pop_back();
  RolloutStep malformed = ok;
  malformed.cot = {VocabSpec::THINK_OPEN, 10};  // no closer
  t.steps.push_back(malformed);
  CHECK(!trajectory_format_ok(t, 16));
}

TEST_CASE("importance ratios are exactly one right after a behavior refresh") {
  TaskSuite suite = TaskSuite::default_suite();
  ModelConfig mcfg = rl_model_config();
  VocabSpec vocab = suite_vocab(suite, mcfg.action_bins);
  Policy current = Policy::init(mcfg, vocab, 29);
  Policy behavior = current.clone_as(Role::behavior);
  Policy reference = current.clone_as(Role::reference);
  TaskSpec task = suite.task(1);
  task.max_steps = 8;

  GrpoConfig cfg = rl_grpo_config();
  std::vector<RolloutGroup> groups = {
      collect_rollouts(behavior, suite, task, 4, 55, cfg.temperature, cfg.reward)};

  Adam opt(current.trainable(), {cfg.lr, 0.9, 0.999, 1e-8});
  GrpoStats st = grpo_step(groups, current, behavior, reference, opt, cfg);

  REQUIRE(!st.ratios.empty());
  for (double w : st.ratios) CHECK(w == 1.0);
  CHECK(st.clip_fraction == 0.0);
  CHECK(st.kl == 0.0);  // current equals reference before the step
  CHECK(st.scored_tokens == int(st.ratios.size()));
}

TEST_CASE("null gradient leaves parameters bitwise unchanged") {
  TaskSuite suite = TaskSuite::default_suite();
  ModelConfig mcfg = rl_model_config();
  VocabSpec vocab = suite_vocab(suite, mcfg.action_bins);
  Policy current = Policy::init(mcfg, vocab, 37);
  Policy behavior = current.clone_as(Role::behavior);
  Policy reference = current.clone_as(Role::reference);
  TaskSpec task = suite.task(3);
  task.max_steps = 8;

  GrpoConfig cfg = rl_grpo_config();
  cfg.beta = 0.0;
  std::vector<RolloutGroup> groups = {
      collect_rollouts(behavior, suite, task, 3, 91, cfg.temperature, cfg.reward)};
  groups[0].advantages.assign(groups[0].trajectories.size(), 0.0);

  std::vector<std::vector<double>> before;
  for (const auto& [name, t] : current.params) before.push_back(t.values());

  Adam opt(current.trainable(), {cfg.lr, 0.9, 0.999, 1e-8});
  grpo_step(groups, current, behavior, reference, opt, cfg);

  for (size_t i = 0; i < current.params.size(); ++i)
    CHECK(current.params[i].second.values() == before[i]);
}

TEST_CASE("grpo objective matches a recomputation from its own diagnostics") {
  TaskSuite suite = TaskSuite::default_suite();
  ModelConfig mcfg = rl_model_config();
  VocabSpec vocab = suite_vocab(suite, mcfg.action_bins);
  Policy current = Policy::init(mcfg, vocab, 43);
  // a slightly different behavior snapshot makes the ratios non-trivial
  Policy behavior = Policy::init(mcfg, vocab, 44).clone_as(Role::behavior);
  Policy reference = current.clone_as(Role::reference);
  TaskSpec task = suite.task(6);
  task.max_steps = 8;

  GrpoConfig cfg = rl_grpo_config();
  std::vector<RolloutGroup> groups = {
      collect_rollouts(behavior, suite, task, 4, 123, cfg.temperature, cfg.reward)};
  // force a usable advantage pattern even if rewards tie
  groups[0].advantages = {1.0, -1.0, 0.5, -0.5};

  Adam opt(current.trainable(), {cfg.lr, 0.9, 0.999, 1e-8});
  GrpoStats st = grpo_step(groups, current, behavior, reference, opt, cfg);

  REQUIRE(st.tokens_per_trajectory.size() == 4);
  REQUIRE(int(st.ratios.size()) == st.scored_tokens);
  REQUIRE(st.position_kls.size() == st.ratios.size());

  size_t at = 0;
  double surr = 0.0;
  for (int n : st.tokens_per_trajectory) {
    double traj_sum = 0.0;
    for (int k = 0; k < n; ++k, ++at) {
      traj_sum += clipped_surrogate({st.ratios[at]}, st.advantages[at], cfg.eps_low,
                                    cfg.eps_high)[0];
    }
    surr += traj_sum / double(n);
  }
  surr /= double(st.tokens_per_trajectory.size());
  double kl = total(st.position_kls) / double(st.position_kls.size());

  CHECK(std::abs(st.surrogate - surr) < 1e-10);
  CHECK(std::abs(st.kl - kl) < 1e-10);
  CHECK(std::abs(st.objective - (surr - cfg.beta * kl)) < 1e-10);
  CHECK(st.kl >= 0.0);
}

TEST_CASE("one ascent step favors the winning trajectory") {
  TaskSuite suite = TaskSuite::default_suite();
  ModelConfig mcfg = rl_model_config();
  VocabSpec vocab = suite_vocab(suite, mcfg.action_bins);
  Policy current = Policy::init(mcfg, vocab, 51);
  Policy behavior = current.clone_as(Role::behavior);
  Policy reference = current.clone_as(Role::reference);

  TaskSpec task = suite.task(0);
  WorldState state = reset(suite, task, 3);
  std::vector<int> prefix = prefix_tokens(state, task, vocab);

  auto make_traj = [&](int bin, double reward) {
    RolloutStep st;
    st.prefix = prefix;
    st.cot = {VocabSpec::THINK_OPEN, VocabSpec::THINK_CLOSE};
    for (int i = 0; i < mcfg.action_len(); ++i) st.actions.push_back(vocab.action_token(bin));
    Trajectory t;
    t.steps.push_back(st);  // logprobs left empty: grpo_step rescores them
    t.reward = reward;
    t.success = reward > 0.5;
    t.format_ok = true;
    return t;
  };
  RolloutGroup group;
  group.task_id = task.id;
  group.trajectories = {make_traj(2, 1.0), make_traj(9, 0.0)};
  group.advantages = compute_group_advantage({1.0, 0.0});

  auto action_lp = [&](const Policy& p, const Trajectory& t) {
    std::vector<double> lps =
        sequence_logprobs(p, t.steps[0].sequence(), t.steps[0].layout());
    double s = 0.0;
    for (size_t i = 1; i < lps.size(); ++i) s += lps[i];  // skip the CoT position
    return s;
  };
  double win_before = action_lp(current, group.trajectories[0]);
  double lose_before = action_lp(current, group.trajectories[1]);

  GrpoConfig cfg = rl_grpo_config();
  cfg.beta = 0.0;
  cfg.lr = 0.01;
  Adam opt(current.trainable(), {cfg.lr, 0.9, 0.999, 1e-8});
  grpo_step({group}, current, behavior, reference, opt, cfg);

  CHECK(action_lp(current, group.trajectories[0]) > win_before);
  CHECK(action_lp(current, group.trajectories[1]) < lose_before);
}

TEST_CASE("train_rl runs, logs, and is deterministic") {
  TaskSuite suite = TaskSuite::default_suite();
  suite.max_steps = 10;
  RunConfig cfg = default_run_config();
  cfg.model = rl_model_config();
  cfg.data.h = cfg.model.h;
  cfg.data.d = cfg.model.d;
  cfg.data.action_bins = cfg.model.action_bins;
  cfg.data.max_cot_len = cfg.model.max_cot_len;
  cfg.rl.iterations = 2;
  cfg.rl.group_size = 2;
  cfg.rl.tasks_per_iteration = 2;
  cfg.rl.minibatch_tokens = 96;
  cfg.rl.seed = 7;

  VocabSpec vocab = suite_vocab(suite, cfg.model.action_bins);
  Policy init = Policy::init(cfg.model, vocab, 61);
  save_checkpoint(init, "rl_init.bin");

  RlResult r1 = train_rl(cfg, suite, "rl_init.bin", "rl_run_a");
  RlResult r2 = train_rl(cfg, suite, "rl_init.bin", "rl_run_b");

  CHECK(r1.mean_rewards.size() == 2);
  CHECK(r1.mean_rewards == r2.mean_rewards);
  CHECK(std::filesystem::exists(r1.checkpoint_path));
  CHECK(slurp("rl_run_a/rl_metrics.jsonl") == slurp("rl_run_b/rl_metrics.jsonl"));

  std::istringstream in(slurp("rl_run_a/rl_metrics.jsonl"));
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    auto row = read_metrics_line(line);
    CHECK(row.count("iteration"));
    CHECK(row.count("mean_reward"));
    CHECK(row.count("sr"));
    CHECK(row.count("kl"));
    CHECK(row.count("clip_frac"));
    CHECK(row.count("format_rate"));
    ++rows;
  }
  CHECK(rows == 2);

  Policy trained = load_checkpoint(r1.checkpoint_path);
  CHECK(trained.cfg.model_dim == cfg.model.model_dim);
}
