// End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
// the process exits 0 only if every criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "setvec/corpus.hpp"
#include "setvec/evaluation.hpp"
#include "setvec/objective.hpp"
#include "setvec/query.hpp"
#include "setvec/trainer.hpp"

using namespace setvec;
namespace fs = std::filesystem;

extern "C" void openblas_set_num_threads(int);

namespace {

double now_s() {
  using clock = std::chrono::steady_clock;
  static const auto t0 = clock::now();
  return std::chrono::duration<double>(clock::now() - t0).count();
}

struct Criterion {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

Tensor random_tensor(const std::vector<int>& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (auto& x : *t.data) x = rng.uniform(lo, hi);
  return t;
}

std::map<std::string, Tensor> deep_copy(const std::map<std::string, Tensor>& m) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : m) out[name] = Tensor(t.shape, *t.data);
  return out;
}

// ---- criterion 1: gradient correctness ----

double negsample_grad_error(uint64_t seed) {
  Rng rng(seed * 733 + 11);
  const int d = 6;
  std::vector<Tensor> inputs;  // u, v_c, 3 negatives
  for (int i = 0; i < 5; ++i) inputs.push_back(random_tensor({d}, rng));

  auto loss_of = [&](const std::vector<Tensor>& in, Tape* tape) {
    std::vector<Tensor> negs(in.begin() + 2, in.end());
    return negsample_loss(in[0], in[1], negs, tape);
  };

  Tape tape;
  std::vector<Tensor> tracked;
  for (const auto& t : inputs) {
    Tensor c = t.detach();
    tape.watch(c);
    tracked.push_back(c);
  }
  tape.backward(loss_of(tracked, &tape));

  double worst = 0;
  const double eps = 1e-5;
  for (size_t which = 0; which < inputs.size(); ++which) {
    Tensor analytic = tape.grad(tracked[which]);
    for (int j = 0; j < d; ++j) {
      auto shifted = [&](double delta) {
        std::vector<Tensor> in;
        for (size_t i = 0; i < inputs.size(); ++i) in.push_back(Tensor(inputs[i].shape, *inputs[i].data));
        (*in[which].data)[static_cast<size_t>(j)] += delta;
        return loss_of(in, nullptr).item();
      };
      double numeric = (shifted(eps) - shifted(-eps)) / (2 * eps);
      double a = (*analytic.data)[static_cast<size_t>(j)];
      worst = std::max(worst, std::fabs(a - numeric) / std::max(1.0, std::fabs(a)));
    }
  }
  return worst;
}

double encoder_grad_error(uint64_t seed) {
  EncoderConfig cfg;
  cfg.input_shape = {2, 8, 8};
  cfg.stages = {{3, 1}};
  cfg.embedding_dim = 4;
  EncoderParams params = init_params(cfg, seed, "input");
  Rng rng(seed + 17);
  Tensor images = random_tensor({3, 2, 8, 8}, rng, 0.0, 1.0);

  auto loss_with = [&](const std::map<std::string, Tensor>& tensors) {
    EncoderParams p = params;
    p.tensors = deep_copy(tensors);  // keep bn running-stat updates private
    return sum(encode(p, images, true)).item();
  };

  EncoderParams traced = params;
  traced.tensors = deep_copy(params.tensors);
  Tape tape;
  for (const auto& name : traced.trainable_names()) tape.watch(traced.tensors[name]);
  tape.backward(sum(encode(traced, images, true, &tape), &tape));

  double worst = 0;
  const double eps = 1e-5;
  for (const auto& name : params.trainable_names()) {
    Tensor analytic = tape.grad(traced.tensors[name]);
    for (size_t j = 0; j < analytic.numel(); ++j) {
      auto shifted = [&](double delta) {
        auto tensors = deep_copy(params.tensors);
        (*tensors[name].data)[j] += delta;
        return loss_with(tensors);
      };
      double numeric = (shifted(eps) - shifted(-eps)) / (2 * eps);
      double a = (*analytic.data)[j];
      worst = std::max(worst, std::fabs(a - numeric) / std::max(1.0, std::fabs(a)));
    }
  }
  return worst;
}

Criterion criterion_gradients() {
  const double started = now_s();
  struct Case {
    OpKind kind;
    std::vector<std::vector<int>> shapes;
    OpParams params;
    double lo = -1.0, hi = 1.0;
  };
  const std::vector<Case> cases = {
      {OpKind::Matmul, {{4, 3}, {3, 2}}, {}},
      {OpKind::Conv2d, {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}, {.stride = 1, .pad = 1}},
      {OpKind::Conv2d, {{1, 2, 6, 6}, {2, 2, 3, 3}}, {.stride = 2, .pad = 0}},
      {OpKind::MaxPool2d, {{1, 2, 4, 4}}, {.window = 2}},
      {OpKind::AvgPool2d, {{1, 2, 4, 4}}, {.window = 2}},
      {OpKind::Relu, {{8}}, {}},
      {OpKind::Sigmoid, {{8}}, {}},
      {OpKind::Tanh, {{8}}, {}},
      {OpKind::Add, {{3, 4}, {3, 4}}, {}},
      {OpKind::Add, {{3, 4}, {4}}, {}},
      {OpKind::Subtract, {{6}, {6}}, {}},
      {OpKind::Multiply, {{6}, {6}}, {}},
      {OpKind::Scale, {{5}}, {.factor = -2.5}},
      {OpKind::Sum, {{3, 3}}, {}},
      {OpKind::Mean, {{3, 3}}, {}},
      {OpKind::Log, {{6}}, {}, 0.2, 2.0},
      {OpKind::Exp, {{6}}, {}},
      {OpKind::Dot, {{5}, {5}}, {}},
      {OpKind::BatchNorm, {{4, 3}, {3}, {3}}, {.train = true}},
      {OpKind::BatchNorm, {{4, 3}, {3}, {3}}, {.train = false}},
      {OpKind::BatchNorm, {{2, 3, 4, 4}, {3}, {3}}, {.train = true}},
      {OpKind::Affine, {{3, 4}, {4, 2}, {2}}, {}},
  };

  double worst = 0;
  for (const auto& c : cases) {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed * 131 + 7);
      std::vector<Tensor> inputs;
      for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, c.lo, c.hi));
      worst = std::max(worst, grad_check(c.kind, inputs, c.params, 1e-5));
    }
  }
  for (uint64_t seed = 0; seed < 10; ++seed) worst = std::max(worst, negsample_grad_error(seed));
  for (uint64_t seed = 0; seed < 10; ++seed) worst = std::max(worst, encoder_grad_error(seed));

  const double elapsed = now_s() - started;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "max rel err %.3g, %.1f s", worst, elapsed);
  return {1, "gradient correctness", worst < 1e-4 && elapsed < 60.0, buf};
}

// ---- criterion 2: objective oracle equivalence ----

double brute_force_softmax_loss(const VecMap& u, const VecMap& v_all, const StyleSet& s) {
  auto dotp = [](const Tensor& a, const Tensor& b) {
    double z = 0;
    for (size_t m = 0; m < a.numel(); ++m) z += (*a.data)[m] * (*b.data)[m];
    return z;
  };
  double total = 0;
  for (const auto& i : s.item_ids) {
    for (const auto& c : s.item_ids) {
      if (i == c) continue;
      double denom = 0;
      for (const auto& [j, v_j] : v_all) denom += std::exp(dotp(u.at(i), v_j));
      total += std::log(std::exp(dotp(u.at(i), v_all.at(c))) / denom);
    }
  }
  return -total / static_cast<double>(s.item_ids.size());
}

Criterion criterion_objective_oracle() {
  double worst_softmax = 0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed * 977 + 5);
    int pool = 4 + static_cast<int>(rng.next_below(5));
    int d = 2 + static_cast<int>(rng.next_below(7));
    int set_size = 2 + static_cast<int>(rng.next_below(3));
    VecMap u, v;
    StyleSet s;
    s.set_id = "s";
    for (int j = 0; j < pool; ++j) {
      std::string id = "f" + std::to_string(j);
      v[id] = random_tensor({d}, rng);
      if (j < set_size) {
        s.item_ids.push_back(id);
        u[id] = random_tensor({d}, rng);
      }
    }
    worst_softmax = std::max(
        std::fabs(softmax_set_loss(u, v, s).item() - brute_force_softmax_loss(u, v, s)),
        worst_softmax);
  }

  // sigma(0) closed forms: every dot product zero
  Tensor zero = Tensor::zeros({3});
  double err_k1 = std::fabs(negsample_loss(zero, zero, {zero}).item() - 2 * std::log(2.0));
  double err_k0 = std::fabs(negsample_loss(zero, zero, {}).item() - std::log(2.0));
  double worst_closed = std::max(err_k1, err_k0);

  char buf[128];
  std::snprintf(buf, sizeof(buf), "softmax dev %.3g, closed-form dev %.3g", worst_softmax,
                worst_closed);
  return {2, "objective oracle equivalence", worst_softmax < 1e-9 && worst_closed < 1e-12, buf};
}

// ---- criteria 3 & 4 share the default-corpus model ----

double style_margin(const EmbeddingMatrix& emb, const FactorMap& factors) {
  const int d = emb.dim();
  const size_t n = emb.size();
  std::vector<double> unit(n * static_cast<size_t>(d));
  for (size_t i = 0; i < n; ++i) {
    double norm = 0;
    for (int j = 0; j < d; ++j) {
      double v = emb.vectors.ptr()[i * static_cast<size_t>(d) + j];
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (int j = 0; j < d; ++j)
      unit[i * static_cast<size_t>(d) + j] =
          norm == 0 ? 0 : emb.vectors.ptr()[i * static_cast<size_t>(d) + j] / norm;
  }
  double intra = 0, inter = 0;
  size_t n_intra = 0, n_inter = 0;
  for (size_t a = 0; a < n; ++a) {
    for (size_t b = a + 1; b < n; ++b) {
      double cosab = 0;
      for (int j = 0; j < d; ++j)
        cosab += unit[a * static_cast<size_t>(d) + j] * unit[b * static_cast<size_t>(d) + j];
      if (factors.at(emb.ids[a]).style == factors.at(emb.ids[b]).style) {
        intra += cosab;
        ++n_intra;
      } else {
        inter += cosab;
        ++n_inter;
      }
    }
  }
  return intra / static_cast<double>(n_intra) - inter / static_cast<double>(n_inter);
}

struct DefaultRun {
  fs::path dir;
  Corpus corpus;
  FactorMap factors;
  EmbeddingMatrix trained;
  EmbeddingMatrix untrained;
  double train_seconds = 0;
};

DefaultRun run_default_training() {
  fs::path dir = fs::temp_directory_path() / "setvec_acceptance_default";
  fs::remove_all(dir);
  SyntheticSpec spec;  // 4 styles x 3 categories x 20 items, 500 sets, seed 7
  Corpus corpus = gen_synthetic(spec, dir.string());
  FactorMap factors = load_sidecar((dir / "factors.tsv").string());

  TrainConfig tc;
  tc.epochs = 2;
  tc.seed = 7;
  EncoderConfig ec;  // 3 stages to 64 channels, d = 64, 32x32 input

  const double started = now_s();
  TrainResult result = train(corpus, tc, ec);
  const double elapsed = now_s() - started;

  EncoderParams fresh = init_params(ec, tc.seed, "input");
  EmbeddingMatrix trained = extract_all(result.checkpoint.input_params, corpus);
  EmbeddingMatrix untrained = extract_all(fresh, corpus);
  return {dir,
          std::move(corpus),
          std::move(factors),
          std::move(trained),
          std::move(untrained),
          elapsed};
}

Criterion criterion_clustering(const DefaultRun& run) {
  const double trained = style_margin(run.trained, run.factors);
  const double untrained = style_margin(run.untrained, run.factors);
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "trained margin %.3f, untrained %.3f, training took %.0f s", trained, untrained,
                run.train_seconds);
  const bool pass = trained >= 0.10 && trained > untrained && run.train_seconds <= 600.0;
  return {3, "style clustering margin", pass, buf};
}

EmbeddingMatrix onehot_embeddings(const Corpus& corpus, const FactorMap& factors) {
  std::set<std::string> cats(corpus.categories().begin(), corpus.categories().end());
  std::set<std::string> colors;
  for (const auto& [id, f] : factors) colors.insert(f.color);
  std::vector<std::string> cat_list(cats.begin(), cats.end());
  std::vector<std::string> color_list(colors.begin(), colors.end());
  const int d = static_cast<int>(cat_list.size() + color_list.size());
  EmbeddingMatrix m;
  std::vector<double> values;
  for (const auto& it : corpus.items()) {
    m.ids.push_back(it.id);
    m.categories[it.id] = it.category;
    std::vector<double> row(static_cast<size_t>(d), 0.0);
    for (size_t j = 0; j < cat_list.size(); ++j)
      if (cat_list[j] == it.category) row[j] = 1.0;
    for (size_t j = 0; j < color_list.size(); ++j)
      if (color_list[j] == factors.at(it.id).color) row[cat_list.size() + j] = 1.0;
    values.insert(values.end(), row.begin(), row.end());
  }
  m.vectors = Tensor({static_cast<int>(m.ids.size()), d}, std::move(values));
  return m;
}

Criterion criterion_analogy(const DefaultRun& run) {
  Rng rng(7);
  AnalogySuite suite = gen_analogy_suite(run.corpus, run.factors, 50, rng);
  AnalogyReport learned = run_analogy_suite(suite, run.trained, run.factors);
  AnalogyReport oracle =
      run_analogy_suite(suite, onehot_embeddings(run.corpus, run.factors), run.factors);
  char buf[128];
  std::snprintf(buf, sizeof(buf), "model %.0f%% (%d/%d), one-hot oracle %.0f%%",
                100 * learned.accuracy, learned.n_correct, learned.n_questions,
                100 * oracle.accuracy);
  return {4, "analogy accuracy", learned.accuracy >= 0.60 && oracle.accuracy == 1.0, buf};
}

// ---- criterion 5: set-level vs pairwise classification ----

Criterion criterion_classification() {
  fs::path dir = fs::temp_directory_path() / "setvec_acceptance_cls";
  fs::remove_all(dir);
  SyntheticSpec spec;
  spec.n_styles = 4;
  spec.n_items_per_category_per_style = 10;
  spec.height = 16;
  spec.width = 16;
  spec.n_sets = 500;
  spec.seed = 7;
  Corpus train_corpus = gen_synthetic(spec, (dir / "train").string());
  // bigger labeled pool over the identical items for classifier stability
  spec.n_sets = 2000;
  Corpus labeled = gen_synthetic(spec, (dir / "labeled").string());
  FactorMap factors = load_sidecar((dir / "labeled" / "factors.tsv").string());
  const std::vector<std::string> labels = set_style_labels(labeled.sets(), factors);

  EncoderConfig ec;
  ec.input_shape = {3, 16, 16};
  ec.embedding_dim = 32;

  int wins = 0;
  std::ostringstream detail;
  EmbeddingMatrix null_emb;
  for (uint64_t seed : {11ULL, 12ULL, 13ULL}) {
    TrainConfig tc;
    tc.epochs = 1;
    tc.seed = seed;
    ClassifierConfig cc;
    cc.seed = seed;

    auto arm = [&](const Corpus& on) {
      TrainResult r = train(on, tc, ec);
      EmbeddingMatrix emb = extract_all(r.checkpoint.input_params, train_corpus);
      MlpClassifier model;
      ClassifierReport rep = train_classifier(model, set_features(emb, labeled.sets()), labels, cc);
      return std::pair{rep.test_accuracy, emb};
    };
    auto [set_acc, set_emb] = arm(train_corpus);
    auto [pair_acc, pair_emb] = arm(pairwise_transform(train_corpus));
    if (seed == 11) null_emb = set_emb;
    if (set_acc >= 0.70 && set_acc >= pair_acc) ++wins;
    detail << "seed " << seed << ": set " << set_acc << " vs pair " << pair_acc << "; ";
  }

  // permutation null: shuffled labels must score near 25% chance
  Tensor null_features = set_features(null_emb, labeled.sets());
  bool null_ok = true;
  double null_lo = 1, null_hi = 0;
  for (int i = 0; i < 10; ++i) {
    std::vector<std::string> shuffled = labels;
    Rng rng(5000 + static_cast<uint64_t>(i));
    rng.shuffle(shuffled);
    ClassifierConfig cc;
    cc.seed = 5000 + static_cast<uint64_t>(i);
    MlpClassifier model;
    ClassifierReport rep = train_classifier(model, null_features, shuffled, cc);
    null_lo = std::min(null_lo, rep.test_accuracy);
    null_hi = std::max(null_hi, rep.test_accuracy);
    null_ok = null_ok && rep.test_accuracy >= 0.15 && rep.test_accuracy <= 0.35;
  }
  detail << "null range [" << null_lo << ", " << null_hi << "]";
  fs::remove_all(dir);
  return {5, "set vs pairwise classification", wins >= 2 && null_ok, detail.str()};
}

// ---- criterion 6: negative sampler ----

Criterion criterion_sampler() {
  const int pool_size = 1000, k = 5, draws = 10000;
  std::vector<std::string> pool;
  for (int i = 0; i < pool_size; ++i) pool.push_back("i" + std::to_string(i));
  StyleSet s;
  s.set_id = "s";
  s.item_ids = {"i0", "i1", "i2"};
  std::set<std::string> members(s.item_ids.begin(), s.item_ids.end());

  std::map<std::string, int> counts;
  Rng rng(20240611);
  bool member_hit = false;
  for (int t = 0; t < draws; ++t) {
    for (const auto& n : sample_negatives(pool, s, k, rng)) {
      member_hit = member_hit || members.count(n) > 0;
      counts[n]++;
    }
  }
  const int candidates = pool_size - 3;
  const double expected = static_cast<double>(draws) * k / candidates;
  double chi2 = 0;
  for (const auto& id : pool) {
    if (members.count(id)) continue;
    const double diff = counts[id] - expected;
    chi2 += diff * diff / expected;
  }
  const double df = candidates - 1;
  const double z = 3.090232;  // standard normal 0.999 quantile (Wilson-Hilferty)
  const double crit = df * std::pow(1.0 - 2.0 / (9.0 * df) + z * std::sqrt(2.0 / (9.0 * df)), 3.0);
  char buf[128];
  std::snprintf(buf, sizeof(buf), "chi2 %.1f < crit %.1f, members drawn: %s", chi2, crit,
                member_hit ? "yes" : "no");
  return {6, "negative sampler correctness", !member_hit && chi2 < crit, buf};
}

// ---- criterion 7: determinism and persistence ----

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

Criterion criterion_determinism() {
  fs::path dir = fs::temp_directory_path() / "setvec_acceptance_det";
  fs::remove_all(dir);
  SyntheticSpec spec;
  spec.n_styles = 2;
  spec.n_items_per_category_per_style = 4;
  spec.height = 16;
  spec.width = 16;
  spec.n_sets = 30;
  spec.seed = 11;
  Corpus corpus = gen_synthetic(spec, (dir / "corp").string());

  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.negatives = 2;
  tc.seed = 3;
  tc.checkpoint_interval = 2;
  EncoderConfig ec;
  ec.input_shape = {3, 16, 16};
  ec.stages = {{6, 1}, {8, 1}};
  ec.embedding_dim = 8;

  train(corpus, tc, ec, (dir / "a").string());
  train(corpus, tc, ec, (dir / "a2").string());
  const bool rerun_identical = slurp(dir / "a" / "final.svc") == slurp(dir / "a2" / "final.svc");

  Checkpoint mid = load_checkpoint((dir / "a" / "ckpt-000002.svc").string());
  resume_train(corpus, mid, (dir / "b").string());
  const bool resume_identical = slurp(dir / "a" / "final.svc") == slurp(dir / "b" / "final.svc");

  bool truncation_rejected = false;
  {
    std::string bytes = slurp(dir / "a" / "final.svc");
    std::ofstream os(dir / "trunc.svc", std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    os.close();
    try {
      load_checkpoint((dir / "trunc.svc").string());
    } catch (const std::exception&) {
      truncation_rejected = true;
    }
  }
  fs::remove_all(dir);
  std::ostringstream detail;
  detail << "rerun identical: " << (rerun_identical ? "yes" : "no")
         << ", resume identical: " << (resume_identical ? "yes" : "no")
         << ", truncation rejected: " << (truncation_rejected ? "yes" : "no");
  return {7, "determinism and persistence",
          rerun_identical && resume_identical && truncation_rejected, detail.str()};
}

}  // namespace

int main() {
  openblas_set_num_threads(1);
  std::vector<Criterion> results;
  results.push_back(criterion_gradients());
  results.push_back(criterion_objective_oracle());
  DefaultRun run = run_default_training();
  results.push_back(criterion_clustering(run));
  results.push_back(criterion_analogy(run));
  fs::remove_all(run.dir);
  results.push_back(criterion_classification());
  results.push_back(criterion_sampler());
  results.push_back(criterion_determinism());

  bool all = true;
  for (const auto& r : results) {
    std::printf("[%s] criterion %d (%s): %s\n", r.pass ? "PASS" : "FAIL", r.id, r.name.c_str(),
                r.detail.c_str());
    all = all && r.pass;
  }
  return all ? 0 : 1;
}
