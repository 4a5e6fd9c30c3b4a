#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "setvec/tensor.hpp"

namespace setvec {

struct EncoderStage {
  int out_channels = 16;
  int conv_count = 2;
};

// VGG-style stack: per stage `conv_count` 3x3 convs (+ batch norm, relu)
// followed by a 2x2 max pool; then global average pool and an affine
// projection to the embedding dimension.
struct EncoderConfig {
  std::array<int, 3> input_shape = {3, 32, 32};  // (channels, height, width)
  std::vector<EncoderStage> stages = {{16, 2}, {32, 2}, {64, 2}};
  int embedding_dim = 64;
  bool batch_norm = true;

  void validate() const;
};

// Named parameter tensors of one network. The input and context networks
// are two independently initialized instances distinguished by `role`.
struct EncoderParams {
  std::string role;  // "input" or "context"
  EncoderConfig config;
  std::map<std::string, Tensor> tensors;

  // names in deterministic order, batch-norm running statistics excluded
  std::vector<std::string> trainable_names() const;
};

EncoderParams init_params(const EncoderConfig& config, uint64_t seed, const std::string& role);

// (batch, channels, height, width) -> (batch, embedding_dim). In train mode
// batch statistics are used and running statistics in `params` advance.
Tensor encode(EncoderParams& params, const Tensor& images, bool train, Tape* tape = nullptr);

}  // namespace setvec
