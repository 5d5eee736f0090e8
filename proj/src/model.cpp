#include "gridmind/model.hpp"

#include <cmath>
#include <stdexcept>

namespace gridmind {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

// single token choice from a logits row, restricted to ids [lo, hi)
int pick_token(const std::vector<double>& row, int lo, int hi, double temperature, Rng* rng,
               double* logprob_out) {
  int picked = lo;
  if (temperature <= 0.0 || rng == nullptr) {
    for (int j = lo + 1; j < hi; ++j)
      if (row[j] > row[picked]) picked = j;
  } else {
    double mx = row[lo];
    for (int j = lo + 1; j < hi; ++j) mx = std::max(mx, row[j]);
    std::vector<double> w(size_t(hi - lo));
    double denom = 0.0;
    for (int j = lo; j < hi; ++j) {
      w[j - lo] = std::exp((row[j] - mx) / temperature);
      denom += w[j - lo];
    }
    double u = rng->uniform() * denom;
    double acc = 0.0;
    picked = hi - 1;
    for (int j = lo; j < hi; ++j) {
      acc += w[j - lo];
      if (u < acc) {
        picked = j;
        break;
      }
    }
  }
  if (logprob_out) *logprob_out = row[picked] - log_sum_exp({row.data(), row.size()});
  return picked;
}

}  // namespace

// ---- VocabSpec --------------------------------------------------------------

VocabSpec VocabSpec::build(std::vector<std::string> words, int action_bins) {
  if (action_bins < 2) fail("vocab: action_bins must be >= 2");
  VocabSpec v;
  v.words = std::move(words);
  v.action_bins = action_bins;
  for (size_t i = 0; i < v.words.size(); ++i) {
    if (v.words[i].empty()) fail("vocab: empty word at index " + std::to_string(i));
    auto [it, fresh] = v.index_.emplace(v.words[i], v.text_base() + int(i));
    if (!fresh) fail("vocab: duplicate word '" + v.words[i] + "'");
  }
  return v;
}

int VocabSpec::word_id(const std::string& w) const {
  auto it = index_.find(w);
  if (it == index_.end()) fail("vocab: unknown word '" + w + "'");
  return it->second;
}

int VocabSpec::action_token(int bin) const {
  if (bin < 0 || bin >= action_bins) fail("vocab: bin " + std::to_string(bin) + " out of range");
  return action_base() + bin;
}

int VocabSpec::bin_of(int token) const {
  if (!is_action(token)) fail("vocab: token " + std::to_string(token) + " is not an action token");
  return token - action_base();
}

std::string VocabSpec::token_text(int id) const {
  switch (id) {
    case PAD: return "<pad>";
    case BOS: return "<bos>";
    case THINK_OPEN: return "<think>";
    case THINK_CLOSE: return "</think>";
    case ACT_QUERY: return "<act>";
    case EOS: return "<eos>";
    default: break;
  }
  if (is_text(id)) return words[size_t(id - text_base())];
  if (is_action(id)) return "bin" + std::to_string(id - action_base());
  return "<invalid:" + std::to_string(id) + ">";
}

// ---- mask -------------------------------------------------------------------

HybridMask build_hybrid_mask(const SequenceLayout& layout, bool prefix_causal) {
  if (layout.prefix_len < 0 || layout.cot_len < 0 || layout.action_len < 0)
    fail("hybrid mask: negative layout counts");
  const int P = layout.prefix_len, C = layout.cot_len, T = layout.total();
  HybridMask m;
  m.layout = layout;
  m.allow = BoolMask(T, T, false);
  for (int r = 0; r < T; ++r) {
    if (r < P) {
      int limit = prefix_causal ? r + 1 : P;
      for (int c = 0; c < limit; ++c) m.allow.set(r, c, true);
    } else if (r < P + C) {
      for (int c = 0; c <= r; ++c) m.allow.set(r, c, true);
    } else {
      for (int c = 0; c < T; ++c) m.allow.set(r, c, true);
    }
  }
  return m;
}

// ---- config / policy ---------------------------------------------------------

void ModelConfig::validate() const {
  if (layers < 1) fail("config: layers must be >= 1");
  if (heads < 1) fail("config: heads must be >= 1");
  if (model_dim < 1 || model_dim % heads != 0) fail("config: model_dim must be divisible by heads");
  if (mlp_mult < 1) fail("config: mlp_mult must be >= 1");
  if (h < 1 || d < 1) fail("config: h and d must be >= 1");
  if (action_bins < 2) fail("config: B must be >= 2");
  if (max_cot_len < 2) fail("config: max_cot_len must be >= 2");
  if (max_seq_len < 4) fail("config: max_seq_len must be >= 4");
  if (prefix_attention != "bidirectional" && prefix_attention != "causal")
    fail("config: prefix_attention must be 'bidirectional' or 'causal', got '" + prefix_attention +
         "'");
  if (!(init_scale > 0.0)) fail("config: init_scale must be > 0");
}

Policy Policy::init(const ModelConfig& cfg, const VocabSpec& vocab, uint64_t seed) {
  cfg.validate();
  if (vocab.action_bins != cfg.action_bins)
    fail("config: B=" + std::to_string(cfg.action_bins) + " but vocab holds " +
         std::to_string(vocab.action_bins) + " action bins");
  Policy p;
  p.cfg = cfg;
  p.vocab = vocab;
  p.role = Role::current;
  Rng rng(mix_seed(seed, 0x706f6c696379ULL));

  auto add_normal = [&](const std::string& name, std::vector<int> shape) {
    size_t n = 1;
    for (int dd : shape) n *= size_t(dd);
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal() * cfg.init_scale;
    p.params.emplace_back(name, Tensor(std::move(shape), std::move(v), true));
  };
  auto add_const = [&](const std::string& name, std::vector<int> shape, double value) {
    size_t n = 1;
    for (int dd : shape) n *= size_t(dd);
    p.params.emplace_back(name, Tensor(std::move(shape), std::vector<double>(n, value), true));
  };

  const int C = cfg.model_dim, V = vocab.size(), M = cfg.model_dim * cfg.mlp_mult;
  add_normal("tok_emb", {V, C});
  add_normal("pos_emb", {cfg.max_seq_len, C});
  for (int l = 0; l < cfg.layers; ++l) {
    std::string b = "l" + std::to_string(l) + ".";
    add_const(b + "ln1.g", {C}, 1.0);
    add_const(b + "ln1.b", {C}, 0.0);
    add_normal(b + "attn.wq", {C, C});
    add_normal(b + "attn.wk", {C, C});
    add_normal(b + "attn.wv", {C, C});
    add_normal(b + "attn.wo", {C, C});
    add_const(b + "ln2.g", {C}, 1.0);
    add_const(b + "ln2.b", {C}, 0.0);
    add_normal(b + "mlp.w1", {C, M});
    add_const(b + "mlp.b1", {M}, 0.0);
    add_normal(b + "mlp.w2", {M, C});
    add_const(b + "mlp.b2", {C}, 0.0);
  }
  add_const("lnf.g", {C}, 1.0);
  add_const("lnf.b", {C}, 0.0);
  add_normal("head.w", {C, V});
  add_const("head.b", {V}, 0.0);
  return p;
}

Policy Policy::clone_as(Role role) const {
  Policy p;
  p.cfg = cfg;
  p.vocab = vocab;
  p.role = role;
  p.params.reserve(params.size());
  for (const auto& [name, t] : params)
    p.params.emplace_back(name, t.clone(role == Role::current));
  return p;
}

Tensor& Policy::param(const std::string& name) {
  for (auto& [n, t] : params)
    if (n == name) return t;
  fail("policy: no parameter named '" + name + "'");
}

const Tensor& Policy::param(const std::string& name) const {
  for (const auto& [n, t] : params)
    if (n == name) return t;
  fail("policy: no parameter named '" + name + "'");
}

std::vector<Tensor> Policy::trainable() const {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& [n, t] : params) out.push_back(t);
  return out;
}

// ---- forward ------------------------------------------------------------------

namespace {

void check_sequence(const Policy& p, const std::vector<int>& tokens,
                    const SequenceLayout& layout) {
  if (int(tokens.size()) != layout.total())
    fail("forward: " + std::to_string(tokens.size()) + " tokens for layout total " +
         std::to_string(layout.total()));
  if (layout.prefix_len < 0 || layout.cot_len < 0 || layout.action_len < 0)
    fail("forward: negative layout counts");
  if (layout.action_len != 0 && layout.action_len != p.cfg.action_len())
    fail("forward: action_len " + std::to_string(layout.action_len) + " does not match h*d = " +
         std::to_string(p.cfg.action_len()));
  if (layout.total() > p.cfg.max_seq_len)
    fail("forward: sequence length " + std::to_string(layout.total()) + " exceeds max_seq_len " +
         std::to_string(p.cfg.max_seq_len));
  const int V = p.vocab.size();
  for (int t : tokens)
    if (t < 0 || t >= V) fail("forward: token id " + std::to_string(t) + " outside vocabulary");
}

}  // namespace

Tensor policy_forward_batch(const Policy& p, const std::vector<std::vector<int>>& tokens,
                            const std::vector<SequenceLayout>& layouts) {
  if (tokens.empty()) fail("forward: empty batch");
  if (tokens.size() != layouts.size()) fail("forward: tokens/layouts size mismatch");
  const ModelConfig& cfg = p.cfg;
  const int H = cfg.heads, dh = cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt(double(dh));

  std::vector<int> all_ids, all_pos;
  std::vector<std::vector<int>> example_rows(tokens.size());
  std::vector<HybridMask> masks(tokens.size());
  for (size_t e = 0; e < tokens.size(); ++e) {
    check_sequence(p, tokens[e], layouts[e]);
    masks[e] = build_hybrid_mask(layouts[e], cfg.prefix_causal());
    int start = int(all_ids.size());
    for (int t = 0; t < layouts[e].total(); ++t) {
      all_ids.push_back(tokens[e][size_t(t)]);
      all_pos.push_back(t);
      example_rows[e].push_back(start + t);
    }
  }

  Tensor x = add(embedding(p.param("tok_emb"), all_ids), select_rows(p.param("pos_emb"), all_pos));

  for (int l = 0; l < cfg.layers; ++l) {
    std::string b = "l" + std::to_string(l) + ".";
    Tensor xn = layer_norm(x, p.param(b + "ln1.g"), p.param(b + "ln1.b"));
    Tensor q = matmul(xn, p.param(b + "attn.wq"));
    Tensor k = matmul(xn, p.param(b + "attn.wk"));
    Tensor v = matmul(xn, p.param(b + "attn.wv"));
    std::vector<Tensor> outs;
    outs.reserve(tokens.size());
    for (size_t e = 0; e < tokens.size(); ++e) {
      Tensor qe = select_rows(q, example_rows[e]);
      Tensor ke = select_rows(k, example_rows[e]);
      Tensor ve = select_rows(v, example_rows[e]);
      std::vector<Tensor> head_outs;
      head_outs.reserve(H);
      for (int hh = 0; hh < H; ++hh) {
        Tensor qh = slice_cols(qe, hh * dh, dh);
        Tensor kh = slice_cols(ke, hh * dh, dh);
        Tensor vh = slice_cols(ve, hh * dh, dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), att_scale);
        Tensor att = masked_softmax(scores, masks[e].allow);
        head_outs.push_back(matmul(att, vh));
      }
      outs.push_back(concat_cols(head_outs));
    }
    Tensor att_out = concat_rows(outs);
    x = add(x, matmul(att_out, p.param(b + "attn.wo")));
    Tensor xn2 = layer_norm(x, p.param(b + "ln2.g"), p.param(b + "ln2.b"));
    Tensor hgelu = gelu(add_row(matmul(xn2, p.param(b + "mlp.w1")), p.param(b + "mlp.b1")));
    x = add(x, add_row(matmul(hgelu, p.param(b + "mlp.w2")), p.param(b + "mlp.b2")));
  }

  Tensor xf = layer_norm(x, p.param("lnf.g"), p.param("lnf.b"));
  Tensor logits = add_row(matmul(xf, p.param("head.w")), p.param("head.b"));
  p.forward_passes += int(tokens.size());
  return logits;
}

Tensor policy_forward(const Policy& p, const std::vector<int>& tokens,
                      const SequenceLayout& layout) {
  return policy_forward_batch(p, {tokens}, {layout});
}

// ---- incremental decoding -----------------------------------------------------

DecodeSession::DecodeSession(const Policy& p) : p_(p) {
  kcache_.resize(size_t(p.cfg.layers));
  vcache_.resize(size_t(p.cfg.layers));
}

Tensor DecodeSession::append(const std::vector<int>& tokens, Mode mode) {
  if (Tape::active() != nullptr)
    throw std::logic_error("DecodeSession::append inside an active tape");
  const ModelConfig& cfg = p_.cfg;
  const int n = int(tokens.size());
  if (n < 1) fail("decode: empty append");
  if (length_ + n > cfg.max_seq_len)
    fail("decode: sequence length " + std::to_string(length_ + n) + " exceeds max_seq_len " +
         std::to_string(cfg.max_seq_len));
  const int V = p_.vocab.size();
  for (int t : tokens)
    if (t < 0 || t >= V) fail("decode: token id " + std::to_string(t) + " outside vocabulary");

  const int C = cfg.model_dim, H = cfg.heads, dh = cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt(double(dh));
  std::vector<int> pos(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i) pos[size_t(i)] = length_ + i;

  Tensor x = add(embedding(p_.param("tok_emb"), tokens), select_rows(p_.param("pos_emb"), pos));
  const int L = length_ + n;

  for (int l = 0; l < cfg.layers; ++l) {
    std::string b = "l" + std::to_string(l) + ".";
    Tensor xn = layer_norm(x, p_.param(b + "ln1.g"), p_.param(b + "ln1.b"));
    Tensor q = matmul(xn, p_.param(b + "attn.wq"));
    Tensor k = matmul(xn, p_.param(b + "attn.wk"));
    Tensor v = matmul(xn, p_.param(b + "attn.wv"));
    auto& kc = kcache_[size_t(l)];
    auto& vc = vcache_[size_t(l)];
    kc.insert(kc.end(), k.values().begin(), k.values().end());
    vc.insert(vc.end(), v.values().begin(), v.values().end());
    Tensor kfull({L, C}, kc);
    Tensor vfull({L, C}, vc);

    BoolMask mask(n, L, false);
    for (int i = 0; i < n; ++i) {
      int limit = mode == Mode::block ? L : length_ + i + 1;
      for (int c = 0; c < limit; ++c) mask.set(i, c, true);
    }

    std::vector<Tensor> head_outs;
    head_outs.reserve(H);
    for (int hh = 0; hh < H; ++hh) {
      Tensor qh = slice_cols(q, hh * dh, dh);
      Tensor kh = slice_cols(kfull, hh * dh, dh);
      Tensor vh = slice_cols(vfull, hh * dh, dh);
      Tensor scores = scale(matmul(qh, transpose(kh)), att_scale);
      Tensor att = masked_softmax(scores, mask);
      head_outs.push_back(matmul(att, vh));
    }
    x = add(x, matmul(concat_cols(head_outs), p_.param(b + "attn.wo")));
    Tensor xn2 = layer_norm(x, p_.param(b + "ln2.g"), p_.param(b + "ln2.b"));
    Tensor hgelu = gelu(add_row(matmul(xn2, p_.param(b + "mlp.w1")), p_.param(b + "mlp.b1")));
    x = add(x, add_row(matmul(hgelu, p_.param(b + "mlp.w2")), p_.param(b + "mlp.b2")));
  }

  Tensor xf = layer_norm(x, p_.param("lnf.g"), p_.param("lnf.b"));
  Tensor logits = add_row(matmul(xf, p_.param("head.w")), p_.param("head.b"));
  length_ = L;
  passes_ += 1;
  p_.forward_passes += 1;
  return logits;
}

// ---- decoding ------------------------------------------------------------------

CotResult generate_cot(const Policy& p, DecodeSession& s, int max_cot_len, double temperature,
                       Rng* rng) {
  if (max_cot_len < 2) fail("generate_cot: max_cot_len must be >= 2");
  CotResult r;
  r.tokens.push_back(VocabSpec::THINK_OPEN);
  Tensor logits = s.append({VocabSpec::THINK_OPEN}, DecodeSession::Mode::causal);
  while (int(r.tokens.size()) < max_cot_len - 1) {
    double lp = 0.0;
    int tok = pick_token(logits.values(), 0, p.vocab.size(), temperature, rng, &lp);
    r.tokens.push_back(tok);
    r.logprobs.push_back(lp);
    logits = s.append({tok}, DecodeSession::Mode::causal);
    if (tok == VocabSpec::THINK_CLOSE) return r;
  }
  // budget exhausted: close the span ourselves, still recording its likelihood
  const std::vector<double>& row = logits.values();
  r.logprobs.push_back(row[VocabSpec::THINK_CLOSE] - log_sum_exp({row.data(), row.size()}));
  r.tokens.push_back(VocabSpec::THINK_CLOSE);
  r.truncated = true;
  // the session must end holding the full span so action rows attend the closer
  s.append({VocabSpec::THINK_CLOSE}, DecodeSession::Mode::causal);
  return r;
}

CotResult generate_cot(const Policy& p, const std::vector<int>& prefix, int max_cot_len,
                       double temperature, Rng* rng) {
  DecodeSession s(p);
  if (!prefix.empty())
    s.append(prefix, p.cfg.prefix_causal() ? DecodeSession::Mode::causal
                                           : DecodeSession::Mode::block);
  return generate_cot(p, s, max_cot_len, temperature, rng);
}

ActionDecodeResult decode_actions_parallel(const Policy& p, DecodeSession& session,
                                           double temperature, Rng* rng) {
  const int n = p.cfg.action_len();
  Tensor logits = session.append(std::vector<int>(size_t(n), VocabSpec::ACT_QUERY),
                                 DecodeSession::Mode::block);
  const int V = p.vocab.size(), base = p.vocab.action_base();
  ActionDecodeResult r;
  std::vector<int> bins;
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(logits.values().begin() + size_t(i) * V,
                            logits.values().begin() + size_t(i + 1) * V);
    double lp = 0.0;
    int tok = pick_token(row, base, base + p.vocab.action_bins, temperature, rng, &lp);
    r.tokens.push_back(tok);
    r.logprobs.push_back(lp);
    bins.push_back(tok - base);
  }
  r.chunk = chunk_from_bins(p.cfg.h, p.cfg.d, std::move(bins), p.vocab.action_bins);
  return r;
}

ActionDecodeResult decode_actions_parallel(const Policy& p, const std::vector<int>& prefix,
                                           const std::vector<int>& cot, double temperature,
                                           Rng* rng) {
  if (cot.empty() || cot.back() != VocabSpec::THINK_CLOSE)
    fail("decode_actions_parallel: CoT must end with THINK_CLOSE");
  DecodeSession s(p);
  if (!prefix.empty())
    s.append(prefix, p.cfg.prefix_causal() ? DecodeSession::Mode::causal
                                           : DecodeSession::Mode::block);
  s.append(cot, DecodeSession::Mode::causal);
  return decode_actions_parallel(p, s, temperature, rng);
}

ActionDecodeResult decode_actions_autoregressive(const Policy& p, DecodeSession& session,
                                                 double temperature, Rng* rng) {
  const int n = p.cfg.action_len();
  const int V = p.vocab.size(), base = p.vocab.action_base();
  ActionDecodeResult r;
  std::vector<int> bins;
  for (int i = 0; i < n; ++i) {
    Tensor logits = session.append({VocabSpec::ACT_QUERY}, DecodeSession::Mode::causal);
    std::vector<double> row(logits.values().begin(), logits.values().begin() + V);
    double lp = 0.0;
    int tok = pick_token(row, base, base + p.vocab.action_bins, temperature, rng, &lp);
    r.tokens.push_back(tok);
    r.logprobs.push_back(lp);
    bins.push_back(tok - base);
  }
  r.chunk = chunk_from_bins(p.cfg.h, p.cfg.d, std::move(bins), p.vocab.action_bins);
  return r;
}

// ---- scoring --------------------------------------------------------------------

ScoredPositions scored_positions(const std::vector<int>& tokens, const SequenceLayout& layout) {
  if (int(tokens.size()) != layout.total())
    fail("scored_positions: token count does not match layout");
  if (layout.cot_len < 1) fail("scored_positions: layout needs at least THINK_OPEN in the CoT");
  const int P = layout.prefix_len, C = layout.cot_len, A = layout.action_len;
  ScoredPositions sp;
  sp.input_tokens = tokens;
  for (int j = 0; j < A; ++j) sp.input_tokens[size_t(P + C + j)] = VocabSpec::ACT_QUERY;
  for (int k = 1; k < C; ++k) {
    sp.rows.push_back(P + k - 1);
    sp.targets.push_back(tokens[size_t(P + k)]);
  }
  for (int j = 0; j < A; ++j) {
    sp.rows.push_back(P + C + j);
    sp.targets.push_back(tokens[size_t(P + C + j)]);
  }
  return sp;
}

std::vector<double> sequence_logprobs(const Policy& p, const std::vector<int>& tokens,
                                      const SequenceLayout& layout) {
  ScoredPositions sp = scored_positions(tokens, layout);
  Tensor logits = policy_forward(p, sp.input_tokens, layout);
  const int V = p.vocab.size();
  std::vector<double> out;
  out.reserve(sp.rows.size());
  for (size_t i = 0; i < sp.rows.size(); ++i) {
    const double* row = logits.values().data() + size_t(sp.rows[i]) * V;
    out.push_back(row[sp.targets[i]] - log_sum_exp({row, size_t(V)}));
  }
  return out;
}

Tensor sequence_logprobs_tensor(const Policy& p, const std::vector<int>& tokens,
                                const SequenceLayout& layout) {
  ScoredPositions sp = scored_positions(tokens, layout);
  Tensor logits = policy_forward(p, sp.input_tokens, layout);
  return gather_cols(log_softmax(select_rows(logits, sp.rows)), sp.targets);
}

std::vector<Tensor> sequence_logprobs_batch(const Policy& p,
                                            const std::vector<std::vector<int>>& tokens,
                                            const std::vector<SequenceLayout>& layouts) {
  if (tokens.size() != layouts.size()) fail("sequence_logprobs_batch: size mismatch");
  std::vector<std::vector<int>> inputs;
  std::vector<ScoredPositions> sps;
  inputs.reserve(tokens.size());
  for (size_t e = 0; e < tokens.size(); ++e) {
    sps.push_back(scored_positions(tokens[e], layouts[e]));
    inputs.push_back(sps.back().input_tokens);
  }
  Tensor logits = policy_forward_batch(p, inputs, layouts);
  std::vector<Tensor> out;
  out.reserve(tokens.size());
  int offset = 0;
  for (size_t e = 0; e < tokens.size(); ++e) {
    std::vector<int> rows;
    rows.reserve(sps[e].rows.size());
    for (int r : sps[e].rows) rows.push_back(offset + r);
    out.push_back(gather_cols(log_softmax(select_rows(logits, rows)), sps[e].targets));
    offset += layouts[e].total();
  }
  return out;
}

}  // namespace gridmind
