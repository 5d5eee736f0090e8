#include <gridmind/checkpoint.hpp>
#include <gridmind/data.hpp>
#include <gridmind/env.hpp>
#include <gridmind/sft.hpp>

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace gridmind;

namespace {

ModelConfig sft_model_config() {
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

// few demos, geometry matching sft_model_config
std::vector<CotRecord> sft_records(const TaskSuite& suite, int n_demos, uint64_t seed) {
  DataGenConfig dcfg;
  dcfg.n_demos = n_demos;
  dcfg.seed = seed;
  dcfg.h = 2;
  dcfg.d = 3;
  dcfg.action_bins = 16;
  dcfg.max_cot_len = 16;
  std::string tag = "sftds_" + std::to_string(n_demos) + "_" + std::to_string(seed);
  build_dataset(suite, dcfg, tag + ".jsonl", tag + ".manifest.json");
  return load_dataset(tag + ".jsonl");
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("training example layout and loss mask") {
  TaskSuite suite = TaskSuite::default_suite();
  ModelConfig cfg = sft_model_config();
  VocabSpec vocab = suite_vocab(suite, cfg.action_bins);
  std::vector<CotRecord> recs = sft_records(suite, 2, 11);
  REQUIRE(!recs.empty());

  const CotRecord& rec = recs[0];
  TrainingExample ex = build_training_example(rec, vocab, cfg);

  int P = 1 + int(rec.obs_tokens.size() + rec.instr_tokens.size());
  int C = int(rec.cot_tokens.size());
  CHECK(ex.layout == SequenceLayout{P, C, 6});
  CHECK(int(ex.tokens.size()) == ex.layout.total());
  CHECK(ex.tokens[0] == VocabSpec::BOS);
  CHECK(ex.tokens[size_t(P)] == VocabSpec::THINK_OPEN);
  CHECK(ex.tokens[size_t(P + C - 1)] == VocabSpec::THINK_CLOSE);
  for (int j = 0; j < 6; ++j) CHECK(ex.tokens[size_t(P + C + j)] == VocabSpec::ACT_QUERY);

  // one supervised position per CoT token after the opener, plus every slot
  REQUIRE(ex.rows.size() == ex.targets.size());
  CHECK(ex.cot_rows == C - 1);
  CHECK(int(ex.rows.size()) == (C - 1) + 6);
  for (int i = 0; i + 1 < C; ++i) {
    CHECK(ex.rows[size_t(i)] == P + i);
    CHECK(ex.targets[size_t(i)] == rec.cot_tokens[size_t(i) + 1]);
  }
  for (int j = 0; j < 6; ++j) {
    CHECK(ex.rows[size_t(C - 1 + j)] == P + C + j);
    CHECK(ex.targets[size_t(C - 1 + j)] == rec.action_tokens[size_t(j)]);
  }
  int masked = 0;
  for (size_t i = 0; i < ex.loss_mask.size(); ++i)
    if (ex.loss_mask[i]) {
      ++masked;
      CHECK(i >= size_t(P));
    }
  CHECK(masked == int(ex.rows.size()));
  CHECK(ex.loss_mask[size_t(P + C - 1)] == 0);  // CLOSE row predicts nothing

  // an empty reasoning span still supervises the CLOSE prediction and the slots
  CotRecord dropped = rec;
  dropped.cot_tokens = {VocabSpec::THINK_OPEN, VocabSpec::THINK_CLOSE};
  TrainingExample de = build_training_example(dropped, vocab, cfg);
  CHECK(de.cot_rows == 1);
  CHECK(int(de.rows.size()) == 1 + 6);
  CHECK(de.targets[0] == VocabSpec::THINK_CLOSE);
}

TEST_CASE("training example rejects malformed records") {
  TaskSuite suite = TaskSuite::default_suite();
  ModelConfig cfg = sft_model_config();
  VocabSpec vocab = suite_vocab(suite, cfg.action_bins);
  std::vector<CotRecord> recs = sft_records(suite, 1, 3);
  REQUIRE(!recs.empty());
  CotRecord rec = recs[0];

  CotRecord bad = rec;
  bad.action_tokens.pop_back();
  CHECK_THROWS_AS(build_training_example(bad, vocab, cfg), std::invalid_argument);

  bad = rec;
  bad.cot_tokens.erase(bad.cot_tokens.begin());  // drops THINK_OPEN
  CHECK_THROWS_AS(build_training_example(bad, vocab, cfg), std::invalid_argument);

  bad = rec;
  bad.cot_tokens.insert(bad.cot_tokens.end() - 1, 10, vocab.word_id("at"));
  CHECK_THROWS_AS(build_training_example(bad, vocab, cfg), std::length_error);

  ModelConfig tight = cfg;
  tight.max_seq_len = 20;  // prefix alone is 18, the rest cannot fit
  CHECK_THROWS_AS(build_training_example(rec, vocab, tight), std::length_error);
}

TEST_CASE("zero-parameter policy starts at uniform cross-entropy") {
  TaskSuite suite = TaskSuite::default_suite();
  ModelConfig cfg = sft_model_config();
  VocabSpec vocab = suite_vocab(suite, cfg.action_bins);
  Policy p = Policy::init(cfg, vocab, 0);
  for (auto& [name, t] : p.params)
    for (double& v : t.values()) v = 0.0;
  std::vector<CotRecord> recs = sft_records(suite, 2, 19);

  std::vector<TrainingExample> batch;
  for (size_t i = 0; i < 4 && i < recs.size(); ++i)
    batch.push_back(build_training_example(recs[i], vocab, cfg));
  Adam opt(p.trainable(), {});
  SftStepStats st = sft_step(p, batch, opt, 1.0);

  double lnv = std::log(double(vocab.size()));
  CHECK(st.loss == doctest::Approx(lnv).epsilon(1e-12));
  CHECK(st.cot_loss == doctest::Approx(lnv).epsilon(1e-12));
  CHECK(st.action_loss == doctest::Approx(lnv).epsilon(1e-12));
}

TEST_CASE("sft loss matches an independent masked cross-entropy") {
  TaskSuite suite = TaskSuite::default_suite();
  ModelConfig cfg = sft_model_config();
  VocabSpec vocab = suite_vocab(suite, cfg.action_bins);
  Policy p = Policy::init(cfg, vocab, 21);
  std::vector<CotRecord> recs = sft_records(suite, 2, 29);
  REQUIRE(recs.size() >= 3);

  std::vector<TrainingExample> batch;
  for (size_t i = 0; i < 3; ++i) batch.push_back(build_training_example(recs[i], vocab, cfg));

  // recompute before stepping: per-row log-softmax NLL, averaged over all rows,
  // plus the cot/action split means
  double sum_cot = 0.0, sum_act = 0.0;
  int n_cot = 0, n_act = 0;
  for (const auto& ex : batch) {
    Tensor logits = policy_forward(p, ex.tokens, ex.layout);
    for (size_t k = 0; k < ex.rows.size(); ++k) {
      const double* row = logits.values().data() + size_t(ex.rows[k]) * size_t(logits.cols());
      double lp = row[ex.targets[k]] - log_sum_exp({row, size_t(logits.cols())});
      if (int(k) < ex.cot_rows) {
        sum_cot -= lp;
        ++n_cot;
      } else {
        sum_act -= lp;
        ++n_act;
      }
    }
  }

  Adam opt(p.trainable(), {});
  long long before = p.forward_passes;
  SftStepStats st = sft_step(p, batch, opt, 1.0);
  CHECK(p.forward_passes - before == 3);  // one packed pass, one count per example

  CHECK(st.cot_tokens == n_cot);
  CHECK(st.action_tokens == n_act);
  CHECK(st.cot_loss == doctest::Approx(sum_cot / n_cot).epsilon(1e-10));
  CHECK(st.action_loss == doctest::Approx(sum_act / n_act).epsilon(1e-10));
  CHECK(st.loss == doctest::Approx((sum_cot + sum_act) / (n_cot + n_act)).epsilon(1e-10));

  // reweighted reasoning term
  Policy p2 = Policy::init(cfg, vocab, 21);
  Adam opt2(p2.trainable(), {});
  SftStepStats w = sft_step(p2, batch, opt2, 0.5);
  CHECK(w.loss == doctest::Approx((0.5 * sum_cot + sum_act) / (n_cot + n_act)).epsilon(1e-10));
}

TEST_CASE("gradient reaches only supervised logit rows") {
  TaskSuite suite = TaskSuite::default_suite();
  ModelConfig cfg = sft_model_config();
  VocabSpec vocab = suite_vocab(suite, cfg.action_bins);
  Policy p = Policy::init(cfg, vocab, 5);
  std::vector<CotRecord> recs = sft_records(suite, 1, 31);
  TrainingExample ex = build_training_example(recs[0], vocab, cfg);

  std::vector<int> targets(size_t(ex.layout.total()), -1);
  for (size_t k = 0; k < ex.rows.size(); ++k) targets[size_t(ex.rows[k])] = ex.targets[k];

  Tape tape;
  Tensor logits = policy_forward(p, ex.tokens, ex.layout);
  Tensor loss = cross_entropy(logits, targets, ex.loss_mask);
  tape.backward(loss);

  auto g = tape.grad_of(logits);
  REQUIRE(!g.empty());
  int V = logits.cols();
  for (int r = 0; r < ex.layout.total(); ++r) {
    double norm = 0.0;
    for (int c = 0; c < V; ++c) norm += std::abs(g[size_t(r) * size_t(V) + size_t(c)]);
    if (ex.loss_mask[size_t(r)])
      CHECK(norm > 0.0);
    else
      CHECK(norm == 0.0);
  }
}

TEST_CASE("sft overfits a single frame") {
  TaskSuite suite = TaskSuite::default_suite();
  ModelConfig cfg = sft_model_config();
  VocabSpec vocab = suite_vocab(suite, cfg.action_bins);
  Policy p = Policy::init(cfg, vocab, 9);
  std::vector<CotRecord> recs = sft_records(suite, 1, 37);
  std::vector<TrainingExample> batch = {build_training_example(recs[0], vocab, cfg)};

  Adam opt(p.trainable(), {3e-3, 0.9, 0.999, 1e-8});
  SftStepStats st;
  for (int i = 0; i < 400; ++i) st = sft_step(p, batch, opt, 1.0);
  CHECK(st.loss < 0.01);
}

TEST_CASE("train_sft is run-to-run deterministic") {
  TaskSuite suite = TaskSuite::default_suite();
  RunConfig cfg = default_run_config();
  cfg.model = sft_model_config();
  cfg.data.n_demos = 3;
  cfg.data.seed = 41;
  cfg.data.h = cfg.model.h;
  cfg.data.d = cfg.model.d;
  cfg.data.action_bins = cfg.model.action_bins;
  cfg.data.max_cot_len = cfg.model.max_cot_len;
  cfg.sft.batch_size = 4;
  cfg.sft.steps = 6;
  cfg.sft.log_every = 2;
  cfg.sft.seed = 2;

  DataGenConfig dcfg = cfg.data;
  build_dataset(suite, dcfg, "sft_det.jsonl", "sft_det.manifest.json");

  SftResult r1 = train_sft(cfg, suite, "sft_det.jsonl", "sft_run_a");
  SftResult r2 = train_sft(cfg, suite, "sft_det.jsonl", "sft_run_b");

  CHECK(r1.last.loss == r2.last.loss);
  CHECK(slurp("sft_run_a/sft_metrics.jsonl") == slurp("sft_run_b/sft_metrics.jsonl"));
  CHECK(slurp(r1.checkpoint_path) == slurp(r2.checkpoint_path));
  CHECK(std::filesystem::exists("sft_run_a/ckpt_step1.bin"));

  // the checkpoint reloads into a policy with identical behavior
  Policy trained = load_checkpoint(r1.checkpoint_path);
  CHECK(trained.cfg.model_dim == cfg.model.model_dim);
}
