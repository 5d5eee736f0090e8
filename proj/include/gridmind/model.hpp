#pragma once

#include "gridmind/actions.hpp"
#include "gridmind/rng.hpp"
#include "gridmind/tensor.hpp"

#include <string>
#include <unordered_map>
#include <vector>

// Decoder-only transformer with a hybrid attention mask: the prefix
// (observation + instruction) is a bidirectional block, CoT tokens are causal
// over prefix + earlier CoT, and the h*d action-query slots attend everything
// including each other, so one forward pass decodes the whole action chunk.

namespace gridmind {

struct VocabSpec {
  static constexpr int PAD = 0;
  static constexpr int BOS = 1;
  static constexpr int THINK_OPEN = 2;
  static constexpr int THINK_CLOSE = 3;
  static constexpr int ACT_QUERY = 4;
  static constexpr int EOS = 5;
  static constexpr int SPECIAL_COUNT = 6;

  std::vector<std::string> words;
  int action_bins = 256;

  int text_base() const { return SPECIAL_COUNT; }
  int action_base() const { return SPECIAL_COUNT + int(words.size()); }
  int size() const { return action_base() + action_bins; }

  bool is_special(int id) const { return id >= 0 && id < SPECIAL_COUNT; }
  bool is_text(int id) const { return id >= text_base() && id < action_base(); }
  bool is_action(int id) const { return id >= action_base() && id < size(); }

  int word_id(const std::string& w) const;
  int action_token(int bin) const;
  int bin_of(int token) const;
  std::string token_text(int id) const;

  static VocabSpec build(std::vector<std::string> words, int action_bins);

 private:
  std::unordered_map<std::string, int> index_;
};

struct SequenceLayout {
  int prefix_len = 0;
  int cot_len = 0;
  int action_len = 0;
  int total() const { return prefix_len + cot_len + action_len; }
  bool operator==(const SequenceLayout&) const = default;
};

struct HybridMask {
  SequenceLayout layout;
  BoolMask allow;
};

// Rows: prefix attends the whole prefix (or causally, per flag), CoT position
// t attends prefix + CoT <= t, action rows attend everything.
HybridMask build_hybrid_mask(const SequenceLayout& layout, bool prefix_causal = false);

struct ModelConfig {
  int layers = 4;
  int heads = 4;
  int model_dim = 128;
  int mlp_mult = 4;
  int h = 5;
  int d = 3;
  int action_bins = 256;
  int max_cot_len = 16;
  int max_seq_len = 64;
  std::string prefix_attention = "bidirectional";
  double init_scale = 0.02;

  bool prefix_causal() const { return prefix_attention == "causal"; }
  int action_len() const { return h * d; }
  int head_dim() const { return model_dim / heads; }
  void validate() const;
};

enum class Role { current, behavior, reference };

struct Policy {
  ModelConfig cfg;
  VocabSpec vocab;
  Role role = Role::current;
  std::vector<std::pair<std::string, Tensor>> params;
  // per-sequence forward counter: +1 per sequence in a batched forward, +1 per
  // DecodeSession append. Single-threaded by design.
  mutable long long forward_passes = 0;

  // Tensors are shared handles; copying a Policy would alias parameters
  // between snapshots. Use clone_as for real copies.
  Policy() = default;
  Policy(const Policy&) = delete;
  Policy& operator=(const Policy&) = delete;
  Policy(Policy&&) = default;
  Policy& operator=(Policy&&) = default;

  static Policy init(const ModelConfig& cfg, const VocabSpec& vocab, uint64_t seed);
  // deep copy; only Role::current keeps requires_grad on its parameters
  Policy clone_as(Role role) const;

  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  std::vector<Tensor> trainable() const;
};

// Full-sequence forward under the hybrid mask; logits [total x V]. Token
// content is taken as given (tests perturb action-slot inputs on purpose).
Tensor policy_forward(const Policy& p, const std::vector<int>& tokens,
                      const SequenceLayout& layout);
// Ragged batch packed into one graph; returns [sum(total_i) x V].
Tensor policy_forward_batch(const Policy& p, const std::vector<std::vector<int>>& tokens,
                            const std::vector<SequenceLayout>& layouts);

// Incremental decoding with per-layer KV caches. No gradient flows through a
// session; it must not be used inside an active tape.
class DecodeSession {
 public:
  enum class Mode { block, causal };

  explicit DecodeSession(const Policy& p);
  // Appends n positions and returns their logits [n x V]. block: the new rows
  // attend the whole cache and the whole new block. causal: new row i attends
  // the cache plus new rows <= i. One forward pass per call.
  Tensor append(const std::vector<int>& tokens, Mode mode);
  int length() const { return length_; }
  long long passes() const { return passes_; }

 private:
  const Policy& p_;
  int length_ = 0;
  long long passes_ = 0;
  std::vector<std::vector<double>> kcache_, vcache_;  // per layer, rows of model_dim
};

struct CotResult {
  std::vector<int> tokens;        // THINK_OPEN ... THINK_CLOSE, both included
  bool truncated = false;         // THINK_CLOSE appended because the budget ran out
  std::vector<double> logprobs;   // one per token after THINK_OPEN, appended CLOSE included
};

// Autoregressive CoT decode starting at THINK_OPEN. temperature 0 = greedy;
// otherwise temperature sampling over the full vocabulary using rng.
// The session form continues a session already holding the prefix.
CotResult generate_cot(const Policy& p, DecodeSession& session, int max_cot_len,
                       double temperature = 0.0, Rng* rng = nullptr);
CotResult generate_cot(const Policy& p, const std::vector<int>& prefix, int max_cot_len,
                       double temperature = 0.0, Rng* rng = nullptr);

struct ActionDecodeResult {
  ActionChunk chunk;
  std::vector<int> tokens;        // vocabulary ids, action range
  std::vector<double> logprobs;   // full-vocab log-softmax of each chosen token
};

// Single-pass parallel decode of the h*d action block on a session already
// holding prefix + CoT. Decoding is restricted to the action-token range
// (greedy at temperature 0, renormalized sampling otherwise); the stored
// logprob is the full-vocabulary log-softmax so it matches sequence_logprobs.
ActionDecodeResult decode_actions_parallel(const Policy& p, DecodeSession& session,
                                           double temperature = 0.0, Rng* rng = nullptr);
// Convenience wrapper that primes a fresh session with prefix + cot first.
ActionDecodeResult decode_actions_parallel(const Policy& p, const std::vector<int>& prefix,
                                           const std::vector<int>& cot, double temperature = 0.0,
                                           Rng* rng = nullptr);

// AR-emulation baseline: the same block decoded one slot at a time with
// causal appends; exactly h*d forward passes.
ActionDecodeResult decode_actions_autoregressive(const Policy& p, DecodeSession& session,
                                                 double temperature = 0.0, Rng* rng = nullptr);

// tokens = realized sequence (real CoT tokens, realized action ids at action
// slots). Internally the action slots are fed as ACT_QUERY; returns the
// log-softmax of each realized token: CoT offsets 1..cot_len-1 first (scored
// at the previous position), then the action slots (scored at their own
// position).
std::vector<double> sequence_logprobs(const Policy& p, const std::vector<int>& tokens,
                                      const SequenceLayout& layout);
// Differentiable version of the same, [n_scored] tensor.
Tensor sequence_logprobs_tensor(const Policy& p, const std::vector<int>& tokens,
                                const SequenceLayout& layout);
// Batched differentiable version: one packed forward for many sequences.
std::vector<Tensor> sequence_logprobs_batch(const Policy& p,
                                            const std::vector<std::vector<int>>& tokens,
                                            const std::vector<SequenceLayout>& layouts);

// Realized-token helper shared by scoring paths: replaces action-slot inputs
// with ACT_QUERY, returns scored (row, target) pairs in logprob order.
struct ScoredPositions {
  std::vector<int> input_tokens;
  std::vector<int> rows;
  std::vector<int> targets;
};
ScoredPositions scored_positions(const std::vector<int>& tokens, const SequenceLayout& layout);

}  // namespace gridmind
