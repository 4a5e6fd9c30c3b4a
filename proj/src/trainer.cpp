#include "setvec/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "setvec/objective.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace setvec {

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("train config: epochs must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be positive");
  if (!(learning_rate > 0)) throw std::invalid_argument("train config: learning_rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw std::invalid_argument("train config: betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw std::invalid_argument("train config: adam_eps must be positive");
  if (negatives < 0) throw std::invalid_argument("train config: negatives must be non-negative");
  if (checkpoint_interval < 0)
    throw std::invalid_argument("train config: checkpoint_interval must be non-negative");
}

void adam_step(std::map<std::string, Tensor>& params,
               const std::map<std::string, Tensor>& grads, AdamState& moments, uint64_t t,
               const TrainConfig& cfg) {
  if (t < 1) throw std::invalid_argument("adam_step: t is 1-based");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (const auto& [name, g] : grads) {
    auto pit = params.find(name);
    if (pit == params.end())
      throw std::runtime_error("adam_step: gradient for unknown parameter '" + name + "'");
    Tensor& theta = pit->second;
    if (g.shape != theta.shape)
      throw std::runtime_error("adam_step: gradient shape " + g.shape_str() +
                               " does not match parameter '" + name + "' " + theta.shape_str());
    auto mit = moments.m.find(name);
    if (mit == moments.m.end()) {
      moments.m[name] = Tensor::zeros(theta.shape);
      moments.v[name] = Tensor::zeros(theta.shape);
      mit = moments.m.find(name);
    }
    Tensor& m = mit->second;
    Tensor& v = moments.v[name];
    Tensor out = Tensor::zeros(theta.shape);
    for (size_t i = 0; i < theta.numel(); ++i) {
      const double gi = (*g.data)[i];
      double mi = cfg.beta1 * (*m.data)[i] + (1.0 - cfg.beta1) * gi;
      double vi = cfg.beta2 * (*v.data)[i] + (1.0 - cfg.beta2) * gi * gi;
      (*m.data)[i] = mi;
      (*v.data)[i] = vi;
      (*out.data)[i] =
          (*theta.data)[i] - cfg.learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps);
    }
    pit->second = out;
  }
}

namespace {

void round_map_f32(std::map<std::string, Tensor>& m) {
  for (auto& [name, t] : m) {
    (void)name;
    for (double& x : *t.data) x = static_cast<double>(static_cast<float>(x));
  }
}

void quantize_state(Checkpoint& ckpt) {
  round_map_f32(ckpt.input_params.tensors);
  round_map_f32(ckpt.context_params.tensors);
  round_map_f32(ckpt.adam_input.m);
  round_map_f32(ckpt.adam_input.v);
  round_map_f32(ckpt.adam_context.m);
  round_map_f32(ckpt.adam_context.v);
}

json config_to_json(const Checkpoint& ckpt) {
  const TrainConfig& tc = ckpt.train_config;
  const EncoderConfig& ec = ckpt.encoder_config;
  json stages = json::array();
  for (const auto& s : ec.stages) stages.push_back({s.out_channels, s.conv_count});
  return json{
      {"version", ckpt.version},
      {"step", ckpt.step},
      {"rng_state", ckpt.rng_state},
      {"train",
       {{"epochs", tc.epochs},
        {"batch_size", tc.batch_size},
        {"learning_rate", tc.learning_rate},
        {"beta1", tc.beta1},
        {"beta2", tc.beta2},
        {"adam_eps", tc.adam_eps},
        {"negatives", tc.negatives},
        {"seed", tc.seed},
        {"checkpoint_interval", tc.checkpoint_interval},
        {"deterministic", tc.deterministic}}},
      {"encoder",
       {{"input_shape", ec.input_shape},
        {"stages", stages},
        {"embedding_dim", ec.embedding_dim},
        {"batch_norm", ec.batch_norm}}},
  };
}

void config_from_json(const json& j, Checkpoint& ckpt) {
  ckpt.version = j.at("version").get<uint32_t>();
  ckpt.step = j.at("step").get<uint64_t>();
  auto rs = j.at("rng_state").get<std::vector<uint64_t>>();
  if (rs.size() != 4) throw std::runtime_error("checkpoint: rng_state must hold 4 words");
  std::copy(rs.begin(), rs.end(), ckpt.rng_state.begin());
  const json& t = j.at("train");
  TrainConfig tc;
  tc.epochs = t.at("epochs").get<int>();
  tc.batch_size = t.at("batch_size").get<int>();
  tc.learning_rate = t.at("learning_rate").get<double>();
  tc.beta1 = t.at("beta1").get<double>();
  tc.beta2 = t.at("beta2").get<double>();
  tc.adam_eps = t.at("adam_eps").get<double>();
  tc.negatives = t.at("negatives").get<int>();
  tc.seed = t.at("seed").get<uint64_t>();
  tc.checkpoint_interval = t.at("checkpoint_interval").get<int>();
  tc.deterministic = t.at("deterministic").get<bool>();
  ckpt.train_config = tc;
  const json& e = j.at("encoder");
  EncoderConfig ec;
  auto ish = e.at("input_shape").get<std::vector<int>>();
  if (ish.size() != 3) throw std::runtime_error("checkpoint: input_shape must hold 3 dims");
  std::copy(ish.begin(), ish.end(), ec.input_shape.begin());
  ec.stages.clear();
  for (const auto& s : e.at("stages"))
    ec.stages.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
  ec.embedding_dim = e.at("embedding_dim").get<int>();
  ec.batch_norm = e.at("batch_norm").get<bool>();
  ckpt.encoder_config = ec;
}

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error("checkpoint: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_named(std::ostream& os, const std::string& name, const Tensor& t) {
  write_u32(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_itf(os, t);
}

// flattened view of every tensor a checkpoint carries, in serialization order
std::vector<std::pair<std::string, std::map<std::string, Tensor>*>> tensor_groups(
    Checkpoint& ckpt) {
  return {{"in.", &ckpt.input_params.tensors},     {"ctx.", &ckpt.context_params.tensors},
          {"adam_in.m.", &ckpt.adam_input.m},      {"adam_in.v.", &ckpt.adam_input.v},
          {"adam_ctx.m.", &ckpt.adam_context.m},   {"adam_ctx.v.", &ckpt.adam_context.v}};
}

}  // namespace

uint32_t crc32(const unsigned char* data, size_t len) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = 0xffffffffu;
  for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ostringstream body;
  body.write("SV2C", 4);
  write_u32(body, ckpt.version);
  const std::string blob = config_to_json(ckpt).dump();
  write_u32(body, static_cast<uint32_t>(blob.size()));
  body.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  Checkpoint& mut = const_cast<Checkpoint&>(ckpt);
  uint32_t count = 0;
  for (const auto& [prefix, group] : tensor_groups(mut))
    count += static_cast<uint32_t>(group->size());
  write_u32(body, count);
  for (const auto& [prefix, group] : tensor_groups(mut))
    for (const auto& [name, t] : *group) write_named(body, prefix + name, t);
  std::string bytes = body.str();
  const uint32_t crc = crc32(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint '" + path + "'");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    write_u32(os, crc);
    if (!os) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw std::runtime_error("checkpoint: truncated file");
  const size_t body_len = bytes.size() - 4;
  uint32_t stored = 0;
  for (int i = 3; i >= 0; --i)
    stored = (stored << 8) | static_cast<unsigned char>(bytes[body_len + static_cast<size_t>(i)]);
  if (crc32(reinterpret_cast<const unsigned char*>(bytes.data()), body_len) != stored)
    throw std::runtime_error("checkpoint: CRC mismatch (truncated or corrupted file)");

  std::istringstream body(bytes.substr(0, body_len));
  char magic[4];
  if (!body.read(magic, 4) || std::string(magic, 4) != "SV2C")
    throw std::runtime_error("checkpoint: bad magic");
  Checkpoint ckpt;
  const uint32_t version = read_u32(body);
  const uint32_t blob_len = read_u32(body);
  std::string blob(blob_len, '\0');
  if (!body.read(blob.data(), blob_len)) throw std::runtime_error("checkpoint: truncated file");
  config_from_json(json::parse(blob), ckpt);
  if (ckpt.version != version)
    throw std::runtime_error("checkpoint: header/config version mismatch");

  ckpt.input_params.role = "input";
  ckpt.input_params.config = ckpt.encoder_config;
  ckpt.context_params.role = "context";
  ckpt.context_params.config = ckpt.encoder_config;
  const uint32_t count = read_u32(body);
  auto groups = tensor_groups(ckpt);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = read_u32(body);
    std::string name(name_len, '\0');
    if (!body.read(name.data(), name_len)) throw std::runtime_error("checkpoint: truncated file");
    Tensor t = read_itf(body);
    bool placed = false;
    for (const auto& [prefix, group] : groups) {
      if (name.rfind(prefix, 0) == 0) {
        (*group)[name.substr(prefix.size())] = t;
        placed = true;
        break;
      }
    }
    if (!placed) throw std::runtime_error("checkpoint: unrecognized tensor '" + name + "'");
  }
  return ckpt;
}

void save_loss_log(const std::vector<LossRecord>& log, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write loss log '" + path + "'");
  os << "step,epoch,loss\n";
  char buf[64];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.loss);
    os << r.step << ',' << r.epoch << ',' << buf << '\n';
  }
}

namespace {

// All corpus images decoded once; training touches the pool many times over.
std::map<std::string, Tensor> load_image_cache(const Corpus& corpus) {
  std::map<std::string, Tensor> cache;
  for (const auto& it : corpus.items()) cache[it.id] = load_image(it.image_path);
  return cache;
}

Tensor batch_from_cache(const std::map<std::string, Tensor>& cache,
                        const std::vector<std::string>& ids) {
  const Tensor& first = cache.at(ids.front());
  std::vector<int> shape = {static_cast<int>(ids.size())};
  shape.insert(shape.end(), first.shape.begin(), first.shape.end());
  Tensor out = Tensor::zeros(shape);
  const size_t per = first.numel();
  for (size_t n = 0; n < ids.size(); ++n) {
    const Tensor& img = cache.at(ids[n]);
    if (img.shape != first.shape)
      throw std::runtime_error("image shape mismatch for item '" + ids[n] + "'");
    std::copy(img.ptr(), img.ptr() + per, out.mut() + n * per);
  }
  return out;
}

// rng stream for drawing the negatives of one mini-batch; a function of
// (seed, epoch, batch) so resumed runs rebuild the exact same draws
Rng batch_neg_rng(const Rng& root, int epoch, size_t batch) {
  return root.fork(0x6e656773ULL ^ (static_cast<uint64_t>(epoch) * 1000003ULL + batch));
}

TrainResult run_training(const Corpus& corpus, Checkpoint ckpt, const std::string& checkpoint_dir,
                         const std::function<void(const LossRecord&)>& on_step) {
  const TrainConfig& cfg = ckpt.train_config;
  cfg.validate();
  ckpt.encoder_config.validate();
  if (!checkpoint_dir.empty()) fs::create_directories(checkpoint_dir);

  const Rng root(cfg.seed);
  const size_t n_sets = corpus.sets().size();
  const size_t bs = static_cast<size_t>(cfg.batch_size);
  const size_t steps_per_epoch = n_sets == 0 ? 0 : (n_sets + bs - 1) / bs;

  auto cache = load_image_cache(corpus);
  TrainResult result;

  auto emit_checkpoint = [&](const char* stem) {
    quantize_state(ckpt);
    if (!checkpoint_dir.empty())
      save_checkpoint(ckpt, (fs::path(checkpoint_dir) / stem).string());
  };

  int start_epoch = 0;
  size_t start_batch = 0;
  if (steps_per_epoch > 0) {
    start_epoch = static_cast<int>(ckpt.step / steps_per_epoch);
    start_batch = ckpt.step % steps_per_epoch;
  }

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order(n_sets);
    for (size_t i = 0; i < n_sets; ++i) order[i] = i;
    Rng shuffle_rng = root.fork(0x45504f43ULL + static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    for (size_t b = epoch == start_epoch ? start_batch : 0; b < steps_per_epoch; ++b) {
      const size_t lo = b * bs;
      const size_t hi = std::min(lo + bs, n_sets);
      Rng neg_rng = batch_neg_rng(root, epoch, b);

      std::vector<const StyleSet*> batch_sets;
      std::vector<PairBatch> pair_batches;
      std::set<std::string> in_set, ctx_set;
      for (size_t s = lo; s < hi; ++s) {
        const StyleSet& set = corpus.sets()[order[s]];
        batch_sets.push_back(&set);
        pair_batches.push_back(build_pair_batch(corpus, set, cfg.negatives, neg_rng));
        for (const auto& id : set.item_ids) {
          in_set.insert(id);
          ctx_set.insert(id);
        }
        for (const auto& e : pair_batches.back().entries)
          ctx_set.insert(e.negatives.begin(), e.negatives.end());
      }
      std::vector<std::string> in_ids(in_set.begin(), in_set.end());
      std::vector<std::string> ctx_ids(ctx_set.begin(), ctx_set.end());

      Tape tape;
      for (auto* params : {&ckpt.input_params, &ckpt.context_params}) {
        for (auto& [name, t] : params->tensors) t = t.detach();
        for (const auto& name : params->trainable_names()) tape.watch(params->tensors[name]);
      }

      Tensor U = encode(ckpt.input_params, batch_from_cache(cache, in_ids), true, &tape);
      Tensor V = encode(ckpt.context_params, batch_from_cache(cache, ctx_ids), true, &tape);
      VecMap u, v;
      for (size_t i = 0; i < in_ids.size(); ++i) u[in_ids[i]] = row(U, static_cast<int>(i), &tape);
      for (size_t i = 0; i < ctx_ids.size(); ++i)
        v[ctx_ids[i]] = row(V, static_cast<int>(i), &tape);

      Tensor loss = Tensor::scalar(0.0);
      for (size_t s = 0; s < batch_sets.size(); ++s)
        loss = add(loss, set_loss_negsampled(u, v, *batch_sets[s], pair_batches[s], &tape), &tape);
      loss = scale(loss, 1.0 / static_cast<double>(batch_sets.size()), &tape);
      tape.backward(loss);

      ++ckpt.step;
      for (auto [params, adam] : {std::pair{&ckpt.input_params, &ckpt.adam_input},
                                  std::pair{&ckpt.context_params, &ckpt.adam_context}}) {
        std::map<std::string, Tensor> grads;
        for (const auto& name : params->trainable_names())
          grads[name] = tape.grad(params->tensors[name]);
        adam_step(params->tensors, grads, *adam, ckpt.step, cfg);
      }

      LossRecord rec{ckpt.step, epoch, loss.item()};
      result.loss_log.push_back(rec);
      if (on_step) on_step(rec);

      if (cfg.checkpoint_interval > 0 && ckpt.step % static_cast<uint64_t>(cfg.checkpoint_interval) == 0) {
        char stem[64];
        std::snprintf(stem, sizeof(stem), "ckpt-%06llu.svc",
                      static_cast<unsigned long long>(ckpt.step));
        emit_checkpoint(stem);
      }
    }
  }

  emit_checkpoint("final.svc");
  result.checkpoint = std::move(ckpt);
  return result;
}

}  // namespace

TrainResult train(const Corpus& corpus, const TrainConfig& train_config,
                  const EncoderConfig& encoder_config, const std::string& checkpoint_dir,
                  const std::function<void(const LossRecord&)>& on_step) {
  train_config.validate();
  encoder_config.validate();
  Checkpoint ckpt;
  ckpt.train_config = train_config;
  ckpt.encoder_config = encoder_config;
  ckpt.step = 0;
  ckpt.input_params = init_params(encoder_config, train_config.seed, "input");
  ckpt.context_params = init_params(encoder_config, train_config.seed, "context");
  ckpt.rng_state = Rng(train_config.seed).state();
  return run_training(corpus, std::move(ckpt), checkpoint_dir, on_step);
}

TrainResult resume_train(const Corpus& corpus, const Checkpoint& from,
                         const std::string& checkpoint_dir,
                         const std::function<void(const LossRecord&)>& on_step) {
  return run_training(corpus, from, checkpoint_dir, on_step);
}

}  // namespace setvec
