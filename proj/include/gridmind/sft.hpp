#pragma once

#include <gridmind/config.hpp>
#include <gridmind/data.hpp>
#include <gridmind/model.hpp>
#include <gridmind/optim.hpp>

#include <string>
#include <vector>

namespace gridmind {

struct TrainingExample {
  std::vector<int> tokens;  // BOS + obs + instr + cot + ACT_QUERY slots
  SequenceLayout layout;
  std::vector<uint8_t> loss_mask;  // per position: does this row carry loss
  std::vector<int> rows;           // loss rows in order: CoT predictors, then action slots
  std::vector<int> targets;        // realized ids, aligned with rows
  int cot_rows = 0;                // first cot_rows of rows/targets supervise reasoning
};

// CoT supervision is next-token (row t predicts CoT token t+1); action slots
// are supervised in place. Throws std::length_error when the record does not
// fit the model's budgets.
TrainingExample build_training_example(const CotRecord& rec, const VocabSpec& vocab,
                                       const ModelConfig& cfg);

struct SftStepStats {
  double loss = 0.0;
  double cot_loss = 0.0;
  double action_loss = 0.0;
  int cot_tokens = 0;
  int action_tokens = 0;
};

// one optimizer step on the mean masked cross-entropy of the batch
SftStepStats sft_step(Policy& p, const std::vector<TrainingExample>& batch, Adam& opt,
                      double cot_weight);

struct SftResult {
  std::string checkpoint_path;
  SftStepStats last;
  int skipped_records = 0;
};

SftResult train_sft(const RunConfig& cfg, const TaskSuite& suite, const std::string& dataset_path,
                    const std::string& out_dir);

}  // namespace gridmind
