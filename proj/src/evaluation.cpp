#include "setvec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "setvec/trainer.hpp"

using nlohmann::json;

namespace setvec {

namespace {

const ItemFactors& factors_of(const FactorMap& factors, const std::string& id) {
  auto it = factors.find(id);
  if (it == factors.end())
    throw std::runtime_error("no ground-truth factors for item '" + id + "'");
  return it->second;
}

}  // namespace

AnalogySuite gen_analogy_suite(const Corpus& corpus, const FactorMap& factors, int n_questions,
                               Rng& rng) {
  if (n_questions < 0) throw std::invalid_argument("gen_analogy_suite: n_questions < 0");

  // (x, y) candidates: same set, different category and color
  struct Pair {
    std::string x, y;
  };
  std::vector<Pair> pairs;
  for (const auto& s : corpus.sets()) {
    for (const auto& x : s.item_ids) {
      for (const auto& y : s.item_ids) {
        if (x == y) continue;
        const Item &ix = corpus.item(x), &iy = corpus.item(y);
        if (ix.category == iy.category) continue;
        if (factors_of(factors, x).color == factors_of(factors, y).color) continue;
        pairs.push_back({x, y});
      }
    }
  }
  if (n_questions > 0 && pairs.empty())
    throw std::runtime_error("gen_analogy_suite: no set offers a usable (x, y) pair");

  AnalogySuite suite;
  int attempts = 0;
  const int max_attempts = n_questions * 200 + 200;
  while (static_cast<int>(suite.questions.size()) < n_questions) {
    if (++attempts > max_attempts)
      throw std::runtime_error("gen_analogy_suite: could not place " +
                               std::to_string(n_questions) + " questions in this pool");
    const Pair& p = pairs[rng.next_below(pairs.size())];
    const ItemFactors& fx = factors_of(factors, p.x);
    const ItemFactors& fy = factors_of(factors, p.y);
    const std::string cat_x = corpus.item(p.x).category;
    const std::string cat_y = corpus.item(p.y).category;

    std::vector<std::string> z_pool;
    bool answer_exists = false;
    for (const auto& it : corpus.items()) {
      if (it.id == p.x || it.id == p.y) continue;
      const ItemFactors& f = factors_of(factors, it.id);
      if (it.category == cat_x && f.color == fx.color) z_pool.push_back(it.id);
      if (it.category == cat_y && f.color == fy.color) answer_exists = true;
    }
    if (z_pool.empty() || !answer_exists) continue;
    const std::string z = z_pool[rng.next_below(z_pool.size())];
    // the chosen z must leave at least one answer besides itself
    bool answer_left = false;
    for (const auto& it : corpus.items()) {
      if (it.id == p.x || it.id == p.y || it.id == z) continue;
      const ItemFactors& f = factors_of(factors, it.id);
      if (it.category == cat_y && f.color == fy.color) {
        answer_left = true;
        break;
      }
    }
    if (!answer_left) continue;
    suite.questions.push_back({p.x, p.y, z, cat_y, fy.color});
  }
  return suite;
}

AnalogyReport run_analogy_suite(const AnalogySuite& suite, const EmbeddingMatrix& emb,
                                const FactorMap& factors, Metric metric) {
  AnalogyReport report;
  report.n_questions = static_cast<int>(suite.questions.size());
  for (const auto& q : suite.questions) {
    AnalogyResult r = analogy(emb, q.x, q.y, q.z, 1, metric);
    AnalogyOutcome outcome;
    outcome.question = q;
    if (!r.neighbors.empty()) {
      outcome.answer_id = r.neighbors[0].id;
      const std::string& cat = emb.categories.at(outcome.answer_id);
      outcome.category_failed = cat != q.expected_category;
      outcome.correct = !outcome.category_failed &&
                        (q.expected_color.empty() ||
                         factors_of(factors, outcome.answer_id).color == q.expected_color);
    } else {
      outcome.category_failed = true;
    }
    report.n_correct += outcome.correct ? 1 : 0;
    report.n_failed_category += outcome.category_failed ? 1 : 0;
    report.per_question.push_back(std::move(outcome));
  }
  report.accuracy = report.n_questions == 0
                        ? 0.0
                        : static_cast<double>(report.n_correct) / report.n_questions;
  return report;
}

Tensor set_features(const EmbeddingMatrix& emb, const std::vector<StyleSet>& sets) {
  const int d = emb.dim();
  Tensor out = Tensor::zeros({static_cast<int>(sets.size()), d});
  for (size_t s = 0; s < sets.size(); ++s) {
    if (sets[s].item_ids.empty())
      throw std::runtime_error("set '" + sets[s].set_id + "' is empty");
    for (const auto& id : sets[s].item_ids) {
      int i = emb.index_of(id);
      if (i < 0) throw std::runtime_error("no embedding for item '" + id + "'");
      for (int j = 0; j < d; ++j)
        out.mut()[s * static_cast<size_t>(d) + j] +=
            emb.vectors.ptr()[static_cast<size_t>(i) * d + j];
    }
    for (int j = 0; j < d; ++j)
      out.mut()[s * static_cast<size_t>(d) + j] /= static_cast<double>(sets[s].item_ids.size());
  }
  return out;
}

std::vector<std::string> set_style_labels(const std::vector<StyleSet>& sets,
                                          const FactorMap& factors) {
  std::vector<std::string> labels;
  labels.reserve(sets.size());
  for (const auto& s : sets) {
    if (s.item_ids.empty()) throw std::runtime_error("set '" + s.set_id + "' is empty");
    const int style = factors_of(factors, s.item_ids.front()).style;
    for (const auto& id : s.item_ids)
      if (factors_of(factors, id).style != style)
        throw std::runtime_error("set '" + s.set_id + "' mixes styles; no single label applies");
    labels.push_back("style" + std::to_string(style));
  }
  return labels;
}

namespace {

Tensor init_uniform(const std::vector<int>& shape, int fan_in, Rng rng) {
  Tensor t = Tensor::zeros(shape);
  const double bound = std::sqrt(1.0 / fan_in);
  for (double& x : *t.data) x = rng.uniform(-bound, bound);
  return t;
}

Tensor forward_logits(const std::map<std::string, Tensor>& tensors, const Tensor& x,
                      Tape* tape = nullptr) {
  Tensor h = relu(affine(x, tensors.at("w1"), tensors.at("b1"), tape), tape);
  return affine(h, tensors.at("w2"), tensors.at("b2"), tape);
}

// mean cross-entropy between softmax(logits) and one-hot labels
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels, Tape* tape) {
  const int n = logits.shape[0], c = logits.shape[1];
  Tensor maxmat = Tensor::zeros({n, c});
  Tensor mask = Tensor::zeros({n, c});
  double max_total = 0;
  for (int i = 0; i < n; ++i) {
    double zmax = logits.ptr()[static_cast<size_t>(i) * c];
    for (int j = 1; j < c; ++j)
      zmax = std::max(zmax, logits.ptr()[static_cast<size_t>(i) * c + j]);
    for (int j = 0; j < c; ++j) maxmat.mut()[static_cast<size_t>(i) * c + j] = zmax;
    mask.mut()[static_cast<size_t>(i) * c + labels[static_cast<size_t>(i)]] = 1.0;
    max_total += zmax;
  }
  Tensor shifted = exp_op(subtract(logits, maxmat, tape), tape);
  Tensor row_sums = matmul(shifted, Tensor::full({c, 1}, 1.0), tape);
  Tensor lse = add(sum(log_op(row_sums, tape), tape), Tensor::scalar(max_total), tape);
  Tensor picked = sum(multiply(logits, mask, tape), tape);
  return scale(subtract(lse, picked, tape), 1.0 / n, tape);
}

double accuracy_of(const MlpClassifier& model, const Tensor& x,
                   const std::vector<std::string>& labels) {
  if (labels.empty()) return 0.0;
  std::vector<std::string> pred = predict(model, x);
  int hits = 0;
  for (size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

Tensor gather_rows(const Tensor& x, const std::vector<size_t>& idx) {
  const int d = x.shape[1];
  Tensor out = Tensor::zeros({static_cast<int>(idx.size()), d});
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy(x.ptr() + idx[i] * static_cast<size_t>(d),
              x.ptr() + (idx[i] + 1) * static_cast<size_t>(d),
              out.mut() + i * static_cast<size_t>(d));
  return out;
}

}  // namespace

Tensor predict_proba(const MlpClassifier& model, const Tensor& features) {
  Tensor logits = forward_logits(model.tensors, features);
  const int n = logits.shape[0], c = logits.shape[1];
  Tensor out = Tensor::zeros({n, c});
  for (int i = 0; i < n; ++i) {
    double zmax = logits.ptr()[static_cast<size_t>(i) * c];
    for (int j = 1; j < c; ++j)
      zmax = std::max(zmax, logits.ptr()[static_cast<size_t>(i) * c + j]);
    double denom = 0;
    for (int j = 0; j < c; ++j) {
      const double e = std::exp(logits.ptr()[static_cast<size_t>(i) * c + j] - zmax);
      out.mut()[static_cast<size_t>(i) * c + j] = e;
      denom += e;
    }
    for (int j = 0; j < c; ++j) out.mut()[static_cast<size_t>(i) * c + j] /= denom;
  }
  return out;
}

std::vector<std::string> predict(const MlpClassifier& model, const Tensor& features) {
  Tensor p = predict_proba(model, features);
  const int n = p.shape[0], c = p.shape[1];
  std::vector<std::string> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < c; ++j)
      if (p.ptr()[static_cast<size_t>(i) * c + j] > p.ptr()[static_cast<size_t>(i) * c + best])
        best = j;
    out.push_back(model.class_names[static_cast<size_t>(best)]);
  }
  return out;
}

ClassifierReport train_classifier(MlpClassifier& model, const Tensor& features,
                                  const std::vector<std::string>& labels,
                                  const ClassifierConfig& cfg) {
  if (features.shape.size() != 2)
    throw std::invalid_argument("train_classifier: features must be (n, d)");
  const size_t n = static_cast<size_t>(features.shape[0]);
  if (labels.size() != n)
    throw std::invalid_argument("train_classifier: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " feature rows");
  if (cfg.hidden < 1 || cfg.epochs < 0 || !(cfg.learning_rate > 0) || cfg.holdout < 0 ||
      cfg.holdout >= 1)
    throw std::invalid_argument("train_classifier: bad configuration");

  std::set<std::string> class_set(labels.begin(), labels.end());
  model.class_names.assign(class_set.begin(), class_set.end());
  std::map<std::string, int> class_idx;
  for (size_t i = 0; i < model.class_names.size(); ++i)
    class_idx[model.class_names[i]] = static_cast<int>(i);
  const int c = static_cast<int>(model.class_names.size());
  const int d = features.shape[1];

  // stratified split: every class contributes ~holdout of its rows to test
  std::vector<size_t> train_idx, test_idx;
  Rng rng(cfg.seed);
  for (const auto& name : model.class_names) {
    std::vector<size_t> rows;
    for (size_t i = 0; i < n; ++i)
      if (labels[i] == name) rows.push_back(i);
    if (cfg.holdout > 0) {
      if (rows.size() < 2)
        throw std::runtime_error("class '" + name + "' has " + std::to_string(rows.size()) +
                                 " example(s); cannot hold any out");
      Rng class_rng = rng.fork(hash_str(name));
      class_rng.shuffle(rows);
      size_t n_test = static_cast<size_t>(std::llround(cfg.holdout * static_cast<double>(rows.size())));
      n_test = std::min(std::max<size_t>(n_test, 1), rows.size() - 1);
      test_idx.insert(test_idx.end(), rows.begin(), rows.begin() + static_cast<long>(n_test));
      train_idx.insert(train_idx.end(), rows.begin() + static_cast<long>(n_test), rows.end());
    } else {
      train_idx.insert(train_idx.end(), rows.begin(), rows.end());
    }
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());

  Tensor x_train = gather_rows(features, train_idx);
  Tensor x_test = gather_rows(features, test_idx);
  std::vector<int> y_train;
  std::vector<std::string> l_train, l_test;
  for (size_t i : train_idx) {
    y_train.push_back(class_idx.at(labels[i]));
    l_train.push_back(labels[i]);
  }
  for (size_t i : test_idx) l_test.push_back(labels[i]);

  model.tensors = {{"w1", init_uniform({d, cfg.hidden}, d, rng.fork(hash_str("w1")))},
                   {"b1", Tensor::zeros({cfg.hidden})},
                   {"w2", init_uniform({cfg.hidden, c}, cfg.hidden, rng.fork(hash_str("w2")))},
                   {"b2", Tensor::zeros({c})}};

  TrainConfig opt;
  opt.learning_rate = cfg.learning_rate;
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.adam_eps = cfg.adam_eps;
  AdamState moments;
  for (int epoch = 0; epoch < cfg.epochs && !train_idx.empty(); ++epoch) {
    Tape tape;
    for (auto& [name, t] : model.tensors) {
      t = t.detach();
      tape.watch(t);
    }
    Tensor loss = cross_entropy(forward_logits(model.tensors, x_train, &tape), y_train, &tape);
    tape.backward(loss);
    std::map<std::string, Tensor> grads;
    for (const auto& [name, t] : model.tensors) grads[name] = tape.grad(t);
    adam_step(model.tensors, grads, moments, static_cast<uint64_t>(epoch) + 1, opt);
  }

  ClassifierReport report;
  report.n_train = static_cast<int>(train_idx.size());
  report.n_test = static_cast<int>(test_idx.size());
  report.train_accuracy = accuracy_of(model, x_train, l_train);
  report.test_accuracy = accuracy_of(model, x_test, l_test);
  return report;
}

CompareReport compare_set_vs_pairwise(const Corpus& corpus, const FactorMap& factors,
                                      const TrainConfig& train_config,
                                      const EncoderConfig& encoder_config,
                                      const ClassifierConfig& classifier_config) {
  const std::vector<std::string> labels = set_style_labels(corpus.sets(), factors);
  auto arm = [&](const Corpus& train_on) {
    TrainResult trained = train(train_on, train_config, encoder_config);
    EmbeddingMatrix emb = extract_all(trained.checkpoint.input_params, corpus);
    MlpClassifier model;
    return train_classifier(model, set_features(emb, corpus.sets()), labels, classifier_config);
  };
  CompareReport report;
  report.set_report = arm(corpus);
  report.pairwise_report = arm(pairwise_transform(corpus));
  report.set_accuracy = report.set_report.test_accuracy;
  report.pairwise_accuracy = report.pairwise_report.test_accuracy;
  report.delta = report.set_accuracy - report.pairwise_accuracy;
  return report;
}

std::string to_json(const AnalogyReport& report) {
  json per = json::array();
  for (const auto& o : report.per_question) {
    per.push_back({{"x", o.question.x},
                   {"y", o.question.y},
                   {"z", o.question.z},
                   {"expected_category", o.question.expected_category},
                   {"expected_color", o.question.expected_color},
                   {"answer", o.answer_id},
                   {"correct", o.correct},
                   {"category_failed", o.category_failed}});
  }
  return json{{"n_questions", report.n_questions},
              {"n_correct", report.n_correct},
              {"n_failed_category", report.n_failed_category},
              {"accuracy", report.accuracy},
              {"per_question", per}}
      .dump(2);
}

std::string to_json(const CompareReport& report) {
  auto sub = [](const ClassifierReport& r) {
    return json{{"train_accuracy", r.train_accuracy},
                {"test_accuracy", r.test_accuracy},
                {"n_train", r.n_train},
                {"n_test", r.n_test}};
  };
  return json{{"set_acc", report.set_accuracy},
              {"pair_acc", report.pairwise_accuracy},
              {"delta", report.delta},
              {"set", sub(report.set_report)},
              {"pairwise", sub(report.pairwise_report)}}
      .dump(2);
}

}  // namespace setvec
