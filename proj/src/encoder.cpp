#include "setvec/encoder.hpp"

#include <cmath>
#include <stdexcept>

#include "setvec/rng.hpp"

namespace setvec {

void EncoderConfig::validate() const {
  if (embedding_dim < 2) throw std::invalid_argument("encoder: embedding_dim must be >= 2");
  if (stages.empty()) throw std::invalid_argument("encoder: at least one conv stage required");
  int h = input_shape[1], w = input_shape[2];
  if (input_shape[0] < 1 || h < 1 || w < 1)
    throw std::invalid_argument("encoder: bad input shape");
  for (const auto& s : stages) {
    if (s.out_channels < 1 || s.conv_count < 1)
      throw std::invalid_argument("encoder: bad stage");
    h /= 2;
    w /= 2;
    if (h < 1 || w < 1)
      throw std::invalid_argument("encoder: spatial size collapses below 1 after pooling");
  }
}

namespace {

Tensor uniform_fan_in(const std::vector<int>& shape, int fan_in, Rng& rng) {
  double limit = std::sqrt(1.0 / fan_in);
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return Tensor(shape, std::move(v));
}

}  // namespace

EncoderParams init_params(const EncoderConfig& config, uint64_t seed, const std::string& role) {
  config.validate();
  EncoderParams p;
  p.role = role;
  p.config = config;
  Rng base = Rng(seed).fork(hash_str(role));

  int in_ch = config.input_shape[0];
  for (size_t s = 0; s < config.stages.size(); ++s) {
    int out_ch = config.stages[s].out_channels;
    for (int c = 0; c < config.stages[s].conv_count; ++c) {
      std::string prefix = "conv" + std::to_string(s) + "." + std::to_string(c);
      Rng r = base.fork(hash_str(prefix));
      p.tensors[prefix + ".w"] = uniform_fan_in({out_ch, in_ch, 3, 3}, in_ch * 9, r);
      p.tensors[prefix + ".b"] = Tensor::zeros({out_ch});
      if (config.batch_norm) {
        std::string bn = "bn" + std::to_string(s) + "." + std::to_string(c);
        p.tensors[bn + ".gamma"] = Tensor::full({out_ch}, 1.0);
        p.tensors[bn + ".beta"] = Tensor::zeros({out_ch});
        p.tensors[bn + ".mean"] = Tensor::zeros({out_ch});
        p.tensors[bn + ".var"] = Tensor::full({out_ch}, 1.0);
      }
      in_ch = out_ch;
    }
  }
  Rng r = base.fork(hash_str("proj"));
  p.tensors["proj.w"] = uniform_fan_in({in_ch, config.embedding_dim}, in_ch, r);
  p.tensors["proj.b"] = Tensor::zeros({config.embedding_dim});
  return p;
}

std::vector<std::string> EncoderParams::trainable_names() const {
  std::vector<std::string> names;
  for (const auto& [name, t] : tensors) {
    auto suffix = name.substr(name.rfind('.'));
    if (suffix == ".mean" || suffix == ".var") continue;
    names.push_back(name);
  }
  return names;
}

Tensor encode(EncoderParams& params, const Tensor& images, bool train, Tape* tape) {
  const EncoderConfig& cfg = params.config;
  if (images.shape.size() != 4 || images.shape[1] != cfg.input_shape[0] ||
      images.shape[2] != cfg.input_shape[1] || images.shape[3] != cfg.input_shape[2])
    throw std::invalid_argument("encode: image batch shape " + images.shape_str() +
                                " does not match configured input " +
                                shape_to_str({-1, cfg.input_shape[0], cfg.input_shape[1],
                                              cfg.input_shape[2]}));
  Tensor x = images;
  for (size_t s = 0; s < cfg.stages.size(); ++s) {
    for (int c = 0; c < cfg.stages[s].conv_count; ++c) {
      std::string prefix = "conv" + std::to_string(s) + "." + std::to_string(c);
      x = conv2d(x, params.tensors.at(prefix + ".w"), &params.tensors.at(prefix + ".b"), 1, 1,
                 tape);
      if (cfg.batch_norm) {
        std::string bn = "bn" + std::to_string(s) + "." + std::to_string(c);
        BatchNormState state;
        state.mean = params.tensors.at(bn + ".mean");
        state.var = params.tensors.at(bn + ".var");
        x = batch_norm(x, params.tensors.at(bn + ".gamma"), params.tensors.at(bn + ".beta"),
                       state, train, tape);
        if (train) {
          // write advanced running statistics back, preserving tape ids
          params.tensors[bn + ".mean"] = state.mean;
          params.tensors[bn + ".var"] = state.var;
        }
      }
      x = relu(x, tape);
    }
    x = max_pool2d(x, 2, tape);
  }
  x = global_avg_pool(x, tape);
  return affine(x, params.tensors.at("proj.w"), params.tensors.at("proj.b"), tape);
}

}  // namespace setvec
