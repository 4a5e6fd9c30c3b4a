#pragma once

#include <map>
#include <string>
#include <vector>

#include "setvec/corpus.hpp"
#include "setvec/query.hpp"
#include "setvec/rng.hpp"
#include "setvec/tensor.hpp"
#include "setvec/trainer.hpp"

namespace setvec {

// "x is to y as z is to ?" over ground-truth factors. x and y come from one
// style set but different categories (and colors, when available); z matches
// x's category and color, so the vector y - x + z should land on an item
// with y's category and color.
struct AnalogyQuestion {
  std::string x, y, z;
  std::string expected_category;
  std::string expected_color;  // empty when factors carry no usable color
};

struct AnalogySuite {
  std::vector<AnalogyQuestion> questions;
};

AnalogySuite gen_analogy_suite(const Corpus& corpus, const FactorMap& factors, int n_questions,
                               Rng& rng);

struct AnalogyOutcome {
  AnalogyQuestion question;
  std::string answer_id;
  bool correct = false;
  bool category_failed = false;  // top answer landed in the wrong category
};

struct AnalogyReport {
  int n_questions = 0;
  int n_correct = 0;
  int n_failed_category = 0;
  double accuracy = 0.0;  // 0 questions reports accuracy 0 with n_questions 0
  std::vector<AnalogyOutcome> per_question;
};

AnalogyReport run_analogy_suite(const AnalogySuite& suite, const EmbeddingMatrix& emb,
                                const FactorMap& factors, Metric metric = Metric::Cosine);

// mean of the member vectors of each set, one row per set
Tensor set_features(const EmbeddingMatrix& emb, const std::vector<StyleSet>& sets);

// per-set style label from the sidecar; members must agree
std::vector<std::string> set_style_labels(const std::vector<StyleSet>& sets,
                                          const FactorMap& factors);

struct ClassifierConfig {
  int hidden = 64;
  int epochs = 300;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double holdout = 0.1;  // stratified test fraction
  uint64_t seed = 1;
};

// one hidden relu layer + softmax read-out, trained full-batch with Adam
struct MlpClassifier {
  std::vector<std::string> class_names;
  std::map<std::string, Tensor> tensors;  // w1 (d,h), b1 (h), w2 (h,c), b2 (c)
};

Tensor predict_proba(const MlpClassifier& model, const Tensor& features);  // (n, classes)
std::vector<std::string> predict(const MlpClassifier& model, const Tensor& features);

struct ClassifierReport {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  int n_train = 0;
  int n_test = 0;
};

ClassifierReport train_classifier(MlpClassifier& model, const Tensor& features,
                                  const std::vector<std::string>& labels,
                                  const ClassifierConfig& cfg);

struct CompareReport {
  double set_accuracy = 0.0;
  double pairwise_accuracy = 0.0;
  double delta = 0.0;  // set minus pairwise
  ClassifierReport set_report;
  ClassifierReport pairwise_report;
};

// Trains one encoder pair on the corpus as-is and one on its pairwise
// transform (identical config and seed), then scores both on style-set
// classification over the original sets. Measures what set-level context
// buys over pairs.
CompareReport compare_set_vs_pairwise(const Corpus& corpus, const FactorMap& factors,
                                      const TrainConfig& train_config,
                                      const EncoderConfig& encoder_config,
                                      const ClassifierConfig& classifier_config);

std::string to_json(const AnalogyReport& report);
std::string to_json(const CompareReport& report);

}  // namespace setvec
