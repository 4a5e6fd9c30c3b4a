#include <doctest.h>

#include <cmath>

#include "setvec/encoder.hpp"
#include "setvec/rng.hpp"

using namespace setvec;

namespace {

Tensor random_images(int n, const EncoderConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  std::vector<int> shape = {n, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]};
  size_t total = static_cast<size_t>(n) * cfg.input_shape[0] * cfg.input_shape[1] *
                 cfg.input_shape[2];
  std::vector<double> v(total);
  for (auto& x : v) x = rng.next_double();
  return Tensor(shape, std::move(v));
}

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.input_shape = {2, 8, 8};
  cfg.stages = {{3, 1}};
  cfg.embedding_dim = 4;
  return cfg;
}

EncoderParams deep_copy(const EncoderParams& p) {
  EncoderParams q = p;
  for (auto& [name, t] : q.tensors) {
    t = Tensor(t.shape, *t.data);
    t.node = -1;
  }
  return q;
}

double forward_loss(const EncoderParams& params, const Tensor& images) {
  EncoderParams p = deep_copy(params);
  Tensor out = encode(p, images, /*train=*/true);
  double s = 0.0;
  for (double v : *out.data) s += v;
  return s;
}

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("init is deterministic in config and seed") {
  EncoderConfig cfg = tiny_config();
  EncoderParams a = init_params(cfg, 42, "input");
  EncoderParams b = init_params(cfg, 42, "input");
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (const auto& [name, t] : a.tensors) CHECK(*t.data == *b.tensors.at(name).data);
}

TEST_CASE("input and context roles draw independent parameters") {
  EncoderConfig cfg = tiny_config();
  EncoderParams fin = init_params(cfg, 42, "input");
  EncoderParams fctx = init_params(cfg, 42, "context");
  REQUIRE(fin.tensors.size() == fctx.tensors.size());
  bool any_diff = false;
  for (const auto& [name, t] : fin.tensors) {
    CHECK(t.shape == fctx.tensors.at(name).shape);
    if (*t.data != *fctx.tensors.at(name).data) any_diff = true;
  }
  CHECK(any_diff);

  Tensor img = random_images(1, cfg, 5);
  EncoderParams fin2 = deep_copy(fin), fctx2 = deep_copy(fctx);
  Tensor u = encode(fin2, img, false);
  Tensor v = encode(fctx2, img, false);
  CHECK(*u.data != *v.data);
}

TEST_CASE("projection width follows embedding_dim") {
  EncoderConfig cfg;
  cfg.input_shape = {3, 32, 32};
  cfg.embedding_dim = 16;
  EncoderParams p = init_params(cfg, 1, "input");
  CHECK(p.tensors.at("proj.w").shape == std::vector<int>{64, 16});
  Tensor out = encode(p, random_images(2, cfg, 9), false);
  CHECK(out.shape == std::vector<int>{2, 16});
}

TEST_CASE("config validation") {
  EncoderConfig cfg = tiny_config();
  cfg.embedding_dim = 1;
  CHECK_THROWS_AS(init_params(cfg, 1, "input"), std::invalid_argument);
  cfg = tiny_config();
  cfg.stages = {{4, 1}, {4, 1}, {4, 1}, {4, 1}};  // 8x8 collapses after 4 pools
  CHECK_THROWS_AS(init_params(cfg, 1, "input"), std::invalid_argument);
}

TEST_CASE("identical images give identical embedding rows in inference mode") {
  EncoderConfig cfg = tiny_config();
  EncoderParams p = init_params(cfg, 3, "input");
  Tensor one = random_images(1, cfg, 11);
  std::vector<double> dup = *one.data;
  dup.insert(dup.end(), one.data->begin(), one.data->end());
  Tensor two({2, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]}, std::move(dup));
  Tensor out = encode(p, two, false);
  for (int j = 0; j < cfg.embedding_dim; ++j)
    CHECK((*out.data)[j] == doctest::Approx((*out.data)[cfg.embedding_dim + j]).epsilon(1e-12));
}

TEST_CASE("inference embeddings are independent of batch composition") {
  EncoderConfig cfg = tiny_config();
  EncoderParams p = init_params(cfg, 4, "input");
  Tensor solo = random_images(1, cfg, 13);
  Tensor rest = random_images(2, cfg, 14);
  std::vector<double> mixed = *solo.data;
  mixed.insert(mixed.end(), rest.data->begin(), rest.data->end());
  Tensor batch({3, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]},
               std::move(mixed));
  Tensor a = encode(p, solo, false);
  Tensor b = encode(p, batch, false);
  for (int j = 0; j < cfg.embedding_dim; ++j)
    CHECK(std::abs((*a.data)[j] - (*b.data)[j]) < 1e-6);
}

TEST_CASE("fresh encoder output is finite and nonzero") {
  EncoderConfig cfg = tiny_config();
  EncoderParams p = init_params(cfg, 5, "input");
  Tensor out = encode(p, random_images(1, cfg, 17), false);
  CHECK(out.all_finite());
  double norm = 0;
  for (double v : *out.data) norm += v * v;
  CHECK(norm > 0);
}

TEST_CASE("shape mismatch is rejected") {
  EncoderConfig cfg = tiny_config();
  EncoderParams p = init_params(cfg, 6, "input");
  Tensor wrong = Tensor::zeros({1, 2, 4, 4});
  CHECK_THROWS_AS(encode(p, wrong, false), std::invalid_argument);
}

TEST_CASE("end-to-end gradients pass finite differences on a tiny encoder") {
  EncoderConfig cfg = tiny_config();
  EncoderParams params = init_params(cfg, 7, "input");
  Tensor images = random_images(2, cfg, 19);

  Tape tape;
  EncoderParams traced = deep_copy(params);
  for (const auto& name : traced.trainable_names()) tape.watch(traced.tensors.at(name));
  Tensor out = encode(traced, images, /*train=*/true, &tape);
  Tensor loss = sum(out, &tape);
  tape.backward(loss);

  const double eps = 1e-5;
  double max_err = 0.0;
  for (const auto& name : params.trainable_names()) {
    Tensor analytic = tape.grad(traced.tensors.at(name));
    const Tensor& t = params.tensors.at(name);
    for (size_t m = 0; m < t.numel(); ++m) {
      EncoderParams plus = deep_copy(params), minus = deep_copy(params);
      (*plus.tensors.at(name).data)[m] += eps;
      (*minus.tensors.at(name).data)[m] -= eps;
      double numeric = (forward_loss(plus, images) - forward_loss(minus, images)) / (2 * eps);
      double a = (*analytic.data)[m];
      max_err = std::max(max_err, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  CHECK(max_err < 1e-4);
}

}  // TEST_SUITE
