#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "setvec/corpus.hpp"
#include "setvec/encoder.hpp"
#include "setvec/tensor.hpp"

namespace setvec {

struct TrainConfig {
  int epochs = 5;
  int batch_size = 16;  // style sets per mini-batch; sets are never split
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int negatives = 5;  // k per (input, context) pair
  uint64_t seed = 7;
  int checkpoint_interval = 0;  // steps between periodic checkpoints; 0 = final only
  bool deterministic = true;

  void validate() const;
};

// First and second Adam moments, keyed like the parameter maps they track.
struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

struct Checkpoint {
  uint32_t version = 1;
  TrainConfig train_config;
  EncoderConfig encoder_config;
  uint64_t step = 0;
  EncoderParams input_params;
  EncoderParams context_params;
  AdamState adam_input;
  AdamState adam_context;
  std::array<uint64_t, 4> rng_state = {0, 0, 0, 0};
};

struct LossRecord {
  uint64_t step;
  int epoch;
  double loss;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> loss_log;
};

// Bias-corrected Adam over a named tensor collection. Entries of `grads`
// must exist in `params`; missing moments start at zero.
void adam_step(std::map<std::string, Tensor>& params,
               const std::map<std::string, Tensor>& grads, AdamState& moments, uint64_t t,
               const TrainConfig& cfg);

// Mini-batch training of both encoders under the negative-sampling set
// objective. When checkpoint_dir is non-empty, periodic and final
// checkpoints are written there.
TrainResult train(const Corpus& corpus, const TrainConfig& train_config,
                  const EncoderConfig& encoder_config, const std::string& checkpoint_dir = "",
                  const std::function<void(const LossRecord&)>& on_step = nullptr);

// Resumes from an existing checkpoint until train_config.epochs is reached.
TrainResult resume_train(const Corpus& corpus, const Checkpoint& from,
                         const std::string& checkpoint_dir = "",
                         const std::function<void(const LossRecord&)>& on_step = nullptr);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

void save_loss_log(const std::vector<LossRecord>& log, const std::string& path);

uint32_t crc32(const unsigned char* data, size_t len);

}  // namespace setvec
