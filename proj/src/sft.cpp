#include <gridmind/checkpoint.hpp>
#include <gridmind/metrics.hpp>
#include <gridmind/sft.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

namespace gridmind {

TrainingExample build_training_example(const CotRecord& rec, const VocabSpec& vocab,
                                       const ModelConfig& cfg) {
  int action_len = cfg.action_len();
  if (int(rec.action_tokens.size()) != action_len)
    throw std::invalid_argument("record has " + std::to_string(rec.action_tokens.size()) +
                                " action tokens, model expects " + std::to_string(action_len));
  int C = int(rec.cot_tokens.size());
  if (C < 2 || rec.cot_tokens.front() != VocabSpec::THINK_OPEN ||
      rec.cot_tokens.back() != VocabSpec::THINK_CLOSE)
    throw std::invalid_argument("record CoT is not delimited");
  if (C > cfg.max_cot_len)
    throw std::length_error("CoT length " + std::to_string(C) + " exceeds budget " +
                            std::to_string(cfg.max_cot_len));

  TrainingExample ex;
  ex.tokens.push_back(VocabSpec::BOS);
  ex.tokens.insert(ex.tokens.end(), rec.obs_tokens.begin(), rec.obs_tokens.end());
  ex.tokens.insert(ex.tokens.end(), rec.instr_tokens.begin(), rec.instr_tokens.end());
  int P = int(ex.tokens.size());
  ex.tokens.insert(ex.tokens.end(), rec.cot_tokens.begin(), rec.cot_tokens.end());
  ex.tokens.insert(ex.tokens.end(), size_t(action_len), VocabSpec::ACT_QUERY);
  ex.layout = {P, C, action_len};
  if (ex.layout.total() > cfg.max_seq_len)
    throw std::length_error("sequence length " + std::to_string(ex.layout.total()) +
                            " exceeds budget " + std::to_string(cfg.max_seq_len));
  for (int id : ex.tokens)
    if (id < 0 || id >= vocab.size())
      throw std::invalid_argument("token id " + std::to_string(id) + " outside vocabulary");

  ex.loss_mask.assign(size_t(ex.layout.total()), 0);
  // row P+i predicts the next CoT token; the CLOSE row predicts nothing
  for (int i = 0; i + 1 < C; ++i) {
    ex.rows.push_back(P + i);
    ex.targets.push_back(rec.cot_tokens[size_t(i) + 1]);
    ex.loss_mask[size_t(P + i)] = 1;
  }
  ex.cot_rows = C - 1;
  // action slots are supervised in place
  for (int j = 0; j < action_len; ++j) {
    ex.rows.push_back(P + C + j);
    ex.targets.push_back(rec.action_tokens[size_t(j)]);
    ex.loss_mask[size_t(P + C + j)] = 1;
  }
  return ex;
}

SftStepStats sft_step(Policy& p, const std::vector<TrainingExample>& batch, Adam& opt,
                      double cot_weight) {
  if (batch.empty()) throw std::invalid_argument("sft_step: empty batch");

  std::vector<std::vector<int>> tokens;
  std::vector<SequenceLayout> layouts;
  tokens.reserve(batch.size());
  layouts.reserve(batch.size());
  for (const auto& ex : batch) {
    tokens.push_back(ex.tokens);
    layouts.push_back(ex.layout);
  }

  opt.zero_grad();
  Tape tape;
  Tensor logits = policy_forward_batch(p, tokens, layouts);

  int total_rows = logits.rows();
  std::vector<int> targets(size_t(total_rows), -1);
  std::vector<uint8_t> cot_mask(size_t(total_rows), 0);
  std::vector<uint8_t> action_mask(size_t(total_rows), 0);
  int offset = 0;
  SftStepStats stats;
  for (const auto& ex : batch) {
    for (size_t k = 0; k < ex.rows.size(); ++k) {
      int row = offset + ex.rows[k];
      targets[size_t(row)] = ex.targets[k];
      (int(k) < ex.cot_rows ? cot_mask : action_mask)[size_t(row)] = 1;
    }
    stats.cot_tokens += ex.cot_rows;
    stats.action_tokens += int(ex.rows.size()) - ex.cot_rows;
    offset += ex.layout.total();
  }

  // loss = (cot_weight * sum_cot + sum_action) / (n_cot + n_action), assembled
  // from the two per-group means so both components are observable
  double n = double(stats.cot_tokens + stats.action_tokens);
  Tensor cot_ce = cross_entropy(logits, targets, cot_mask);
  Tensor action_ce = cross_entropy(logits, targets, action_mask);
  Tensor loss = add(scale(cot_ce, cot_weight * stats.cot_tokens / n),
                    scale(action_ce, double(stats.action_tokens) / n));

  stats.loss = loss.item();
  stats.cot_loss = cot_ce.item();
  stats.action_loss = action_ce.item();
  if (!std::isfinite(stats.loss))
    throw std::runtime_error("sft_step: non-finite loss (cot " + std::to_string(stats.cot_loss) +
                             ", action " + std::to_string(stats.action_loss) + ") after " +
                             std::to_string(opt.steps_taken()) + " steps");

  tape.backward(loss);
  opt.step();
  return stats;
}

SftResult train_sft(const RunConfig& cfg, const TaskSuite& suite, const std::string& dataset_path,
                    const std::string& out_dir) {
  std::vector<CotRecord> records = load_dataset(dataset_path);
  if (records.empty()) throw std::runtime_error("train_sft: dataset is empty");
  VocabSpec vocab = suite_vocab(suite, cfg.model.action_bins);

  SftResult result;
  std::vector<CotRecord> usable;
  usable.reserve(records.size());
  for (const auto& rec : records) {
    try {
      build_training_example(rec, vocab, cfg.model);
      usable.push_back(rec);
    } catch (const std::length_error&) {
      ++result.skipped_records;
    }
  }
  if (usable.empty()) throw std::runtime_error("train_sft: no record fits the model budgets");
  if (result.skipped_records > 0)
    std::fprintf(stderr, "train_sft: skipped %d over-budget records\n", result.skipped_records);

  std::filesystem::create_directories(out_dir);
  Policy p = Policy::init(cfg.model, vocab, cfg.sft.seed);
  Adam opt(p.trainable(), {cfg.sft.lr, 0.9, 0.999, 1e-8});
  MetricsWriter metrics(out_dir + "/sft_metrics.jsonl");

  // an empty CoT keeps its delimiters; dropout teaches the action head to
  // survive without the reasoning segment
  std::vector<int> empty_cot = {VocabSpec::THINK_OPEN, VocabSpec::THINK_CLOSE};
  int checkpoint_every = std::max(1, cfg.sft.steps / 4);

  for (int step = 1; step <= cfg.sft.steps; ++step) {
    Rng rng(mix_seed(cfg.sft.seed, 0x511f7ULL, uint64_t(step)));
    std::vector<TrainingExample> batch;
    batch.reserve(size_t(cfg.sft.batch_size));
    for (int b = 0; b < cfg.sft.batch_size; ++b) {
      CotRecord rec = usable[size_t(rng.uniform_int(int(usable.size())))];
      if (rng.uniform() < cfg.sft.cot_dropout) rec.cot_tokens = empty_cot;
      batch.push_back(build_training_example(rec, vocab, cfg.model));
    }
    result.last = sft_step(p, batch, opt, cfg.sft.cot_weight);

    if (step % cfg.sft.log_every == 0 || step == cfg.sft.steps)
      metrics.write({{"step", double(step)},
                     {"loss", result.last.loss},
                     {"cot_loss", result.last.cot_loss},
                     {"action_loss", result.last.action_loss}});
    if (step % checkpoint_every == 0 && step != cfg.sft.steps)
      save_checkpoint(p, out_dir + "/ckpt_step" + std::to_string(step) + ".bin");
  }

  result.checkpoint_path = out_dir + "/ckpt_sft.bin";
  save_checkpoint(p, result.checkpoint_path);
  return result;
}

}  // namespace gridmind
