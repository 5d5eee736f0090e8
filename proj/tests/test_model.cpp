#include <doctest.h>
#include <gridmind/model.hpp>
#include <gridmind/rng.hpp>

#include <cmath>

using namespace gridmind;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.model_dim = 16;
  c.mlp_mult = 2;
  c.h = 2;
  c.d = 3;
  c.action_bins = 8;
  c.max_cot_len = 8;
  c.max_seq_len = 40;
  return c;
}

VocabSpec tiny_vocab() {
  return VocabSpec::build({"red", "blue", "box", "go", "left", "right"}, 8);
}

Policy tiny_policy(uint64_t seed = 42) { return Policy::init(tiny_config(), tiny_vocab(), seed); }

std::vector<int> random_sequence(const Policy& p, const SequenceLayout& layout, Rng& rng) {
  std::vector<int> toks;
  toks.push_back(VocabSpec::BOS);
  for (int i = 1; i < layout.prefix_len; ++i)
    toks.push_back(p.vocab.text_base() + rng.uniform_int(int(p.vocab.words.size())));
  if (layout.cot_len > 0) {
    toks.push_back(VocabSpec::THINK_OPEN);
    for (int i = 1; i < layout.cot_len - 1; ++i)
      toks.push_back(p.vocab.text_base() + rng.uniform_int(int(p.vocab.words.size())));
    if (layout.cot_len > 1) toks.push_back(VocabSpec::THINK_CLOSE);
  }
  for (int i = 0; i < layout.action_len; ++i) toks.push_back(VocabSpec::ACT_QUERY);
  return toks;
}

// independent per-cell statement of the three mask rules
bool mask_rule(const SequenceLayout& l, bool prefix_causal, int r, int c) {
  const int P = l.prefix_len, C = l.cot_len;
  if (r < P) return prefix_causal ? (c <= r) : (c < P);
  if (r < P + C) return c < P || (c >= P && c <= r);
  return true;
}

}  // namespace

TEST_CASE("vocab id ranges are disjoint and total correctly") {
  VocabSpec v = tiny_vocab();
  CHECK(v.size() == 6 + 6 + 8);
  for (int id = 0; id < v.size(); ++id) {
    int kinds = int(v.is_special(id)) + int(v.is_text(id)) + int(v.is_action(id));
    CHECK(kinds == 1);
  }
  CHECK(v.word_id("red") == v.text_base());
  CHECK(v.bin_of(v.action_token(3)) == 3);
  CHECK_THROWS_AS(v.word_id("nope"), std::invalid_argument);
  CHECK_THROWS_AS(VocabSpec::build({"a", "a"}, 8), std::invalid_argument);
}

TEST_CASE("action tokenizer bins, edges, and round trip") {
  CHECK(value_to_bin(-1.0, 2) == 0);
  CHECK(value_to_bin(1.0, 2) == 1);
  CHECK(bin_center(0, 2) == -0.5);
  CHECK(bin_center(1, 2) == 0.5);

  // edge exactly between bins goes to the lower bin
  CHECK(value_to_bin(0.0, 2) == 0);
  CHECK(value_to_bin(0.0, 256) == 127);
  CHECK(value_to_bin(-1.0 + 2.0 / 256.0, 256) == 0);

  CHECK_THROWS_AS(value_to_bin(1.5, 256), std::range_error);
  CHECK_THROWS_AS(value_to_bin(-1.0001, 256), std::range_error);

  Rng rng(77);
  const int B = 256;
  const double half_bin = 1.0 / B;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> vals(15);
    for (double& x : vals) x = rng.uniform(-1.0, 1.0);
    std::vector<double> back = detokenize_actions(tokenize_actions(vals, B), B);
    for (size_t i = 0; i < vals.size(); ++i) CHECK(std::abs(back[i] - vals[i]) <= half_bin + 1e-15);
  }
}

TEST_CASE("hybrid mask matches the spec examples and the per-cell rule") {
  {
    HybridMask m = build_hybrid_mask({1, 0, 0});
    REQUIRE(m.allow.rows == 1);
    CHECK(m.allow.at(0, 0));
  }
  {
    HybridMask m = build_hybrid_mask({2, 2, 2});
    REQUIRE(m.allow.rows == 6);
    auto allowed_up_to = [&](int r, int limit) {
      for (int c = 0; c < 6; ++c) CHECK(m.allow.at(r, c) == (c < limit));
    };
    allowed_up_to(0, 2);
    allowed_up_to(1, 2);
    allowed_up_to(2, 3);
    allowed_up_to(3, 4);
    allowed_up_to(4, 6);
    allowed_up_to(5, 6);
  }
  Rng rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    SequenceLayout l{rng.uniform_int(6), rng.uniform_int(6), rng.uniform_int(7)};
    for (bool causal : {false, true}) {
      HybridMask m = build_hybrid_mask(l, causal);
      for (int r = 0; r < l.total(); ++r)
        for (int c = 0; c < l.total(); ++c) CHECK(m.allow.at(r, c) == mask_rule(l, causal, r, c));
    }
  }
}

TEST_CASE("zero-parameter snapshot produces uniform logits") {
  Policy p = tiny_policy();
  for (auto& [name, t] : p.params)
    for (double& v : t.values()) v = 0.0;
  SequenceLayout layout{3, 2, 6};
  Rng rng(1);
  std::vector<int> toks = random_sequence(p, layout, rng);
  Tensor logits = policy_forward(p, toks, layout);
  for (int r = 0; r < layout.total(); ++r)
    for (int c = 0; c < p.vocab.size(); ++c) CHECK(logits.at(r, c) == logits.at(r, 0));

  std::vector<double> lps = sequence_logprobs(p, toks, layout);
  CHECK(int(lps.size()) == layout.cot_len - 1 + layout.action_len);
  for (double lp : lps) CHECK(std::abs(lp + std::log(double(p.vocab.size()))) < 1e-12);
}

TEST_CASE("forward validates lengths and token ids") {
  Policy p = tiny_policy();
  SequenceLayout layout{3, 2, 6};
  std::vector<int> toks(10, VocabSpec::BOS);
  CHECK_THROWS_AS(policy_forward(p, toks, layout), std::invalid_argument);
  toks.resize(11, VocabSpec::BOS);
  toks[10] = p.vocab.size();
  CHECK_THROWS_AS(policy_forward(p, toks, layout), std::invalid_argument);
  SequenceLayout bad{3, 2, 5};
  CHECK_THROWS_AS(policy_forward(p, std::vector<int>(10, VocabSpec::BOS), bad),
                  std::invalid_argument);
}

TEST_CASE("action-slot inputs never leak into prefix or CoT logits") {
  Policy p = tiny_policy(7);
  Rng rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    SequenceLayout layout{1 + rng.uniform_int(5), 2 + rng.uniform_int(4), p.cfg.action_len()};
    std::vector<int> toks = random_sequence(p, layout, rng);
    Tensor base = policy_forward(p, toks, layout);

    std::vector<int> perturbed = toks;
    int slot = rng.uniform_int(layout.action_len);
    perturbed[size_t(layout.prefix_len + layout.cot_len + slot)] =
        p.vocab.text_base() + rng.uniform_int(int(p.vocab.words.size()));
    Tensor changed = policy_forward(p, perturbed, layout);

    const int V = p.vocab.size();
    int boundary = layout.prefix_len + layout.cot_len;
    for (int r = 0; r < boundary; ++r)
      for (int c = 0; c < V; ++c) CHECK(base.at(r, c) == changed.at(r, c));

    bool other_slot_changed = false;
    for (int j = 0; j < layout.action_len; ++j) {
      if (j == slot) continue;
      for (int c = 0; c < V; ++c)
        if (base.at(boundary + j, c) != changed.at(boundary + j, c)) other_slot_changed = true;
    }
    CHECK(other_slot_changed);
  }
}

TEST_CASE("CoT positions are causal: perturbing token t leaves earlier logits bit-identical") {
  Policy p = tiny_policy(8);
  Rng rng(29);
  for (int trial = 0; trial < 10; ++trial) {
    SequenceLayout layout{2 + rng.uniform_int(4), 3 + rng.uniform_int(3), p.cfg.action_len()};
    std::vector<int> toks = random_sequence(p, layout, rng);
    Tensor base = policy_forward(p, toks, layout);

    int t = 1 + rng.uniform_int(layout.cot_len - 1);
    std::vector<int> perturbed = toks;
    int pos = layout.prefix_len + t;
    int old = perturbed[size_t(pos)];
    do {
      perturbed[size_t(pos)] = p.vocab.text_base() + rng.uniform_int(int(p.vocab.words.size()));
    } while (perturbed[size_t(pos)] == old);
    Tensor changed = policy_forward(p, perturbed, layout);

    const int V = p.vocab.size();
    for (int r = 0; r < pos; ++r)
      for (int c = 0; c < V; ++c) CHECK(base.at(r, c) == changed.at(r, c));
  }
}

TEST_CASE("decode session reproduces the full forward pass") {
  Policy p = tiny_policy(3);
  SequenceLayout layout{4, 3, 6};
  Rng rng(31);
  std::vector<int> toks = random_sequence(p, layout, rng);
  Tensor full = policy_forward(p, toks, layout);

  DecodeSession s(p);
  std::vector<int> prefix(toks.begin(), toks.begin() + layout.prefix_len);
  std::vector<int> cot(toks.begin() + layout.prefix_len,
                       toks.begin() + layout.prefix_len + layout.cot_len);
  std::vector<int> act(toks.begin() + layout.prefix_len + layout.cot_len, toks.end());
  Tensor lp = s.append(prefix, DecodeSession::Mode::block);
  Tensor lc = s.append(cot, DecodeSession::Mode::causal);
  Tensor la = s.append(act, DecodeSession::Mode::block);
  CHECK(s.passes() == 3);
  CHECK(s.length() == layout.total());

  const int V = p.vocab.size();
  auto rows_close = [&](const Tensor& got, int row_offset, int rows) {
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < V; ++c)
        CHECK(std::abs(got.at(r, c) - full.at(row_offset + r, c)) < 1e-10);
  };
  rows_close(lp, 0, layout.prefix_len);
  rows_close(lc, layout.prefix_len, layout.cot_len);
  rows_close(la, layout.prefix_len + layout.cot_len, layout.action_len);
}

TEST_CASE("generate_cot: greedy property, budget, determinism") {
  Policy p = tiny_policy(11);
  Rng rng(41);
  SequenceLayout pre{5, 0, 0};
  std::vector<int> prefix = random_sequence(p, pre, rng);

  CotResult two = generate_cot(p, prefix, 2);
  CHECK(two.tokens == std::vector<int>{VocabSpec::THINK_OPEN, VocabSpec::THINK_CLOSE});

  CotResult r = generate_cot(p, prefix, p.cfg.max_cot_len);
  CHECK(r.tokens.front() == VocabSpec::THINK_OPEN);
  CHECK(r.tokens.back() == VocabSpec::THINK_CLOSE);
  CHECK(int(r.tokens.size()) <= p.cfg.max_cot_len);

  CotResult again = generate_cot(p, prefix, p.cfg.max_cot_len);
  CHECK(r.tokens == again.tokens);
  CHECK(r.truncated == again.truncated);

  // re-score each emitted token against a truncated full forward
  int emitted = int(r.tokens.size()) - 1 - (r.truncated ? 1 : 0);
  for (int k = 1; k <= emitted; ++k) {
    std::vector<int> ctx = prefix;
    ctx.insert(ctx.end(), r.tokens.begin(), r.tokens.begin() + k);
    SequenceLayout l{int(prefix.size()), k, 0};
    Tensor logits = policy_forward(p, ctx, l);
    int argmax = 0;
    for (int c = 1; c < p.vocab.size(); ++c)
      if (logits.at(l.total() - 1, c) > logits.at(l.total() - 1, argmax)) argmax = c;
    CHECK(argmax == r.tokens[size_t(k)]);
  }
}

TEST_CASE("parallel action decode: one pass, argmax per slot, matches raw logits") {
  Policy p = tiny_policy(13);
  Rng rng(43);
  SequenceLayout pre{5, 0, 0};
  std::vector<int> prefix = random_sequence(p, pre, rng);
  CotResult cot = generate_cot(p, prefix, p.cfg.max_cot_len);

  DecodeSession s(p);
  s.append(prefix, DecodeSession::Mode::block);
  s.append(cot.tokens, DecodeSession::Mode::causal);
  long long before = s.passes();
  long long model_before = p.forward_passes;
  ActionDecodeResult ar = decode_actions_parallel(p, s, 0.0, nullptr);
  CHECK(s.passes() - before == 1);
  CHECK(p.forward_passes - model_before == 1);
  CHECK(int(ar.tokens.size()) == p.cfg.action_len());
  CHECK(ar.chunk.h == p.cfg.h);
  CHECK(ar.chunk.d == p.cfg.d);

  // same tokens from the raw full forward, argmax over the action range
  SequenceLayout layout{int(prefix.size()), int(cot.tokens.size()), p.cfg.action_len()};
  std::vector<int> toks = prefix;
  toks.insert(toks.end(), cot.tokens.begin(), cot.tokens.end());
  for (int i = 0; i < layout.action_len; ++i) toks.push_back(VocabSpec::ACT_QUERY);
  Tensor logits = policy_forward(p, toks, layout);
  int base = p.vocab.action_base();
  for (int i = 0; i < layout.action_len; ++i) {
    int row = layout.prefix_len + layout.cot_len + i;
    int best = base;
    for (int c = base + 1; c < base + p.vocab.action_bins; ++c)
      if (logits.at(row, c) > logits.at(row, best)) best = c;
    CHECK(ar.tokens[size_t(i)] == best);
  }
}

TEST_CASE("AR emulation takes exactly h*d passes and the same shape") {
  Policy p = tiny_policy(17);
  Rng rng(47);
  SequenceLayout pre{4, 0, 0};
  std::vector<int> prefix = random_sequence(p, pre, rng);
  CotResult cot = generate_cot(p, prefix, p.cfg.max_cot_len);

  DecodeSession s(p);
  s.append(prefix, DecodeSession::Mode::block);
  s.append(cot.tokens, DecodeSession::Mode::causal);
  long long before = s.passes();
  ActionDecodeResult ar = decode_actions_autoregressive(p, s, 0.0, nullptr);
  CHECK(s.passes() - before == p.cfg.action_len());
  CHECK(int(ar.tokens.size()) == p.cfg.action_len());
}

TEST_CASE("sequence_logprobs agrees with per-position re-scoring and the tensor path") {
  Policy p = tiny_policy(19);
  Rng rng(53);
  SequenceLayout layout{5, 4, 6};
  std::vector<int> toks = random_sequence(p, layout, rng);
  // realized action tokens instead of queries
  for (int i = 0; i < layout.action_len; ++i)
    toks[size_t(layout.prefix_len + layout.cot_len + i)] =
        p.vocab.action_token(rng.uniform_int(p.cfg.action_bins));

  std::vector<double> lps = sequence_logprobs(p, toks, layout);
  REQUIRE(int(lps.size()) == layout.cot_len - 1 + layout.action_len);

  // CoT tokens: truncated-context forwards
  for (int k = 1; k < layout.cot_len; ++k) {
    std::vector<int> ctx(toks.begin(), toks.begin() + layout.prefix_len + k);
    SequenceLayout l{layout.prefix_len, k, 0};
    Tensor logits = policy_forward(p, ctx, l);
    const int V = p.vocab.size();
    std::vector<double> row(logits.values().end() - V, logits.values().end());
    double want = row[size_t(toks[size_t(layout.prefix_len + k)])] -
                  log_sum_exp({row.data(), row.size()});
    CHECK(std::abs(lps[size_t(k - 1)] - want) < 1e-10);
  }

  // action tokens: independent decode-session path
  {
    DecodeSession s(p);
    std::vector<int> prefix(toks.begin(), toks.begin() + layout.prefix_len);
    std::vector<int> cot(toks.begin() + layout.prefix_len,
                         toks.begin() + layout.prefix_len + layout.cot_len);
    s.append(prefix, DecodeSession::Mode::block);
    s.append(cot, DecodeSession::Mode::causal);
    Tensor logits = s.append(std::vector<int>(size_t(layout.action_len), VocabSpec::ACT_QUERY),
                             DecodeSession::Mode::block);
    const int V = p.vocab.size();
    for (int i = 0; i < layout.action_len; ++i) {
      const double* row = logits.values().data() + size_t(i) * V;
      int realized = toks[size_t(layout.prefix_len + layout.cot_len + i)];
      double want = row[realized] - log_sum_exp({row, size_t(V)});
      CHECK(std::abs(lps[size_t(layout.cot_len - 1 + i)] - want) < 1e-10);
    }
  }

  Tensor tensor_lps = sequence_logprobs_tensor(p, toks, layout);
  REQUIRE(tensor_lps.size() == lps.size());
  for (size_t i = 0; i < lps.size(); ++i) CHECK(tensor_lps.values()[i] == lps[i]);

  auto batched = sequence_logprobs_batch(p, {toks, toks}, {layout, layout});
  REQUIRE(batched.size() == 2);
  for (const Tensor& bt : batched) {
    REQUIRE(bt.size() == lps.size());
    for (size_t i = 0; i < lps.size(); ++i) CHECK(std::abs(bt.values()[i] - lps[i]) < 1e-11);
  }
}

TEST_CASE("clone_as produces frozen snapshots that stop tracking gradients") {
  Policy p = tiny_policy(23);
  Policy ref = p.clone_as(Role::reference);
  CHECK(ref.role == Role::reference);
  CHECK(!ref.param("tok_emb").requires_grad());
  CHECK(p.param("tok_emb").requires_grad());
  // deep copy: mutating the clone leaves the original alone
  ref.param("tok_emb").values()[0] += 1.0;
  CHECK(p.param("tok_emb").values()[0] != ref.param("tok_emb").values()[0]);

  SequenceLayout layout{3, 2, 6};
  Rng rng(3);
  std::vector<int> toks = random_sequence(p, layout, rng);
  Tape tape;
  Tensor logits = policy_forward(ref, toks, layout);
  CHECK(tape.node_count() == 0);
}
