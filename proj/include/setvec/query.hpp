#pragma once

#include <map>
#include <string>
#include <vector>

#include "setvec/corpus.hpp"
#include "setvec/encoder.hpp"
#include "setvec/tensor.hpp"

namespace setvec {

enum class Metric { Cosine, Dot, Euclidean };

Metric metric_from_string(const std::string& name);
const char* metric_name(Metric m);

// Item embeddings of one encoder over a pool, one row per item.
struct EmbeddingMatrix {
  std::vector<std::string> ids;
  Tensor vectors;  // (n, d)
  std::map<std::string, std::string> categories;

  int dim() const { return vectors.shape.size() == 2 ? vectors.shape[1] : 0; }
  size_t size() const { return ids.size(); }
  int index_of(const std::string& id) const;  // -1 when absent
  Tensor vec(const std::string& id) const;    // throws when absent
};

// Inference-mode embeddings for every corpus item. Results do not depend on
// the batch partition; `threads` > 1 fans batches out across workers.
EmbeddingMatrix extract_all(const EncoderParams& params, const Corpus& corpus,
                            int batch_size = 64, int threads = 1);

struct Neighbor {
  std::string id;
  double score;  // higher = closer under every metric
};

// Top-n neighbors of `query` sorted by descending score, ties broken by
// ascending id. `category_filter` empty = all categories.
std::vector<Neighbor> nearest(const EmbeddingMatrix& m, const Tensor& query, int top_n,
                              Metric metric = Metric::Cosine,
                              const std::vector<std::string>& exclude = {},
                              const std::string& category_filter = "");

struct AnalogyResult {
  Tensor target;  // vec(y) - vec(x) + vec(z)
  std::vector<Neighbor> neighbors;
};

// "x is to y as z is to ?" -- neighbors of the target, x/y/z excluded.
AnalogyResult analogy(const EmbeddingMatrix& m, const std::string& x, const std::string& y,
                      const std::string& z, int top_n, Metric metric = Metric::Cosine,
                      const std::string& category_filter = "");

// PCA onto the top-2 principal components, columns by descending variance;
// each component's largest-magnitude loading is made positive.
Tensor project_2d(const EmbeddingMatrix& m);

void save_embeddings_tsv(const EmbeddingMatrix& m, const std::string& path);
EmbeddingMatrix load_embeddings_tsv(const std::string& path);

// rows `item_id <tab> x <tab> y` matching an (n, 2) projection
void save_projection_tsv(const EmbeddingMatrix& m, const Tensor& xy, const std::string& path);

}  // namespace setvec
