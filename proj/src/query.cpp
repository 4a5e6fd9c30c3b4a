#include "setvec/query.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace setvec {

Metric metric_from_string(const std::string& name) {
  if (name == "cosine") return Metric::Cosine;
  if (name == "dot") return Metric::Dot;
  if (name == "euclidean") return Metric::Euclidean;
  throw std::invalid_argument("unknown metric '" + name + "' (cosine, dot, euclidean)");
}

const char* metric_name(Metric m) {
  switch (m) {
    case Metric::Cosine: return "cosine";
    case Metric::Dot: return "dot";
    case Metric::Euclidean: return "euclidean";
  }
  return "?";
}

int EmbeddingMatrix::index_of(const std::string& id) const {
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == id) return static_cast<int>(i);
  return -1;
}

Tensor EmbeddingMatrix::vec(const std::string& id) const {
  int i = index_of(id);
  if (i < 0) throw std::runtime_error("no embedding for item '" + id + "'");
  return row(vectors, i);
}

EmbeddingMatrix extract_all(const EncoderParams& params, const Corpus& corpus, int batch_size,
                            int threads) {
  if (batch_size < 1) throw std::invalid_argument("extract_all: batch_size must be positive");
  if (threads < 1) throw std::invalid_argument("extract_all: threads must be positive");
  EmbeddingMatrix m;
  for (const auto& it : corpus.items()) {
    m.ids.push_back(it.id);
    m.categories[it.id] = it.category;
  }
  const size_t n = m.ids.size();
  const int d = params.config.embedding_dim;
  m.vectors = Tensor::zeros({static_cast<int>(n), d});
  if (n == 0) return m;

  const size_t n_batches = (n + static_cast<size_t>(batch_size) - 1) / batch_size;
  auto worker = [&](size_t first_batch, size_t stride) {
    EncoderParams local = params;  // inference never writes, but keep workers apart
    for (size_t b = first_batch; b < n_batches; b += stride) {
      const size_t lo = b * static_cast<size_t>(batch_size);
      const size_t hi = std::min(lo + static_cast<size_t>(batch_size), n);
      std::vector<std::string> ids(m.ids.begin() + lo, m.ids.begin() + hi);
      Tensor emb = encode(local, load_image_batch(corpus, ids), false);
      std::copy(emb.ptr(), emb.ptr() + emb.numel(),
                m.vectors.mut() + lo * static_cast<size_t>(d));
    }
  };
  const size_t n_workers = std::min<size_t>(static_cast<size_t>(threads), n_batches);
  if (n_workers <= 1) {
    worker(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker, w, n_workers);
    for (auto& t : pool) t.join();
  }
  return m;
}

namespace {

double score_rows(const double* a, const double* b, int d, Metric metric) {
  switch (metric) {
    case Metric::Dot: {
      double s = 0;
      for (int i = 0; i < d; ++i) s += a[i] * b[i];
      return s;
    }
    case Metric::Cosine: {
      double s = 0, na = 0, nb = 0;
      for (int i = 0; i < d; ++i) {
        s += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
      }
      if (na == 0 || nb == 0) return 0.0;
      return s / (std::sqrt(na) * std::sqrt(nb));
    }
    case Metric::Euclidean: {
      double s = 0;
      for (int i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
      return -std::sqrt(s);
    }
  }
  return 0.0;
}

}  // namespace

std::vector<Neighbor> nearest(const EmbeddingMatrix& m, const Tensor& query, int top_n,
                              Metric metric, const std::vector<std::string>& exclude,
                              const std::string& category_filter) {
  if (top_n < 0) throw std::invalid_argument("nearest: top_n must be non-negative");
  const int d = m.dim();
  if (static_cast<int>(query.numel()) != d)
    throw std::invalid_argument("nearest: query has " + std::to_string(query.numel()) +
                                " values, embeddings have dim " + std::to_string(d));
  std::set<std::string> skip(exclude.begin(), exclude.end());
  std::vector<Neighbor> all;
  for (size_t i = 0; i < m.ids.size(); ++i) {
    const std::string& id = m.ids[i];
    if (skip.count(id)) continue;
    if (!category_filter.empty() && m.categories.at(id) != category_filter) continue;
    all.push_back({id, score_rows(query.ptr(), m.vectors.ptr() + i * d, d, metric)});
  }
  std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  if (static_cast<int>(all.size()) > top_n) all.resize(static_cast<size_t>(top_n));
  return all;
}

AnalogyResult analogy(const EmbeddingMatrix& m, const std::string& x, const std::string& y,
                      const std::string& z, int top_n, Metric metric,
                      const std::string& category_filter) {
  Tensor vx = m.vec(x), vy = m.vec(y), vz = m.vec(z);
  Tensor target = add(subtract(vy, vx), vz);
  AnalogyResult r;
  r.target = target;
  r.neighbors = nearest(m, target, top_n, metric, {x, y, z}, category_filter);
  return r;
}

namespace {

// cyclic Jacobi sweeps; A is symmetric n*n, V accumulates the rotations
void jacobi_eig(std::vector<double>& A, int n, std::vector<double>& V) {
  V.assign(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) V[static_cast<size_t>(i) * n + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += A[static_cast<size_t>(p) * n + q] * A[static_cast<size_t>(p) * n + q];
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = A[static_cast<size_t>(p) * n + q];
        if (std::fabs(apq) < 1e-300) continue;
        const double app = A[static_cast<size_t>(p) * n + p];
        const double aqq = A[static_cast<size_t>(q) * n + q];
        const double theta = (aqq - app) / (2 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int i = 0; i < n; ++i) {
          const double aip = A[static_cast<size_t>(i) * n + p];
          const double aiq = A[static_cast<size_t>(i) * n + q];
          A[static_cast<size_t>(i) * n + p] = c * aip - s * aiq;
          A[static_cast<size_t>(i) * n + q] = s * aip + c * aiq;
        }
        for (int i = 0; i < n; ++i) {
          const double api = A[static_cast<size_t>(p) * n + i];
          const double aqi = A[static_cast<size_t>(q) * n + i];
          A[static_cast<size_t>(p) * n + i] = c * api - s * aqi;
          A[static_cast<size_t>(q) * n + i] = s * api + c * aqi;
        }
        for (int i = 0; i < n; ++i) {
          const double vip = V[static_cast<size_t>(i) * n + p];
          const double viq = V[static_cast<size_t>(i) * n + q];
          V[static_cast<size_t>(i) * n + p] = c * vip - s * viq;
          V[static_cast<size_t>(i) * n + q] = s * vip + c * viq;
        }
      }
    }
  }
}

}  // namespace

Tensor project_2d(const EmbeddingMatrix& m) {
  const int n = static_cast<int>(m.size());
  const int d = m.dim();
  Tensor out = Tensor::zeros({n, 2});
  if (n == 0 || d == 0) return out;

  std::vector<double> centered(static_cast<size_t>(n) * d);
  for (int j = 0; j < d; ++j) {
    double mu = 0;
    for (int i = 0; i < n; ++i) mu += m.vectors.ptr()[static_cast<size_t>(i) * d + j];
    mu /= n;
    for (int i = 0; i < n; ++i)
      centered[static_cast<size_t>(i) * d + j] = m.vectors.ptr()[static_cast<size_t>(i) * d + j] - mu;
  }
  std::vector<double> cov(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < d; ++a)
      for (int b = a; b < d; ++b)
        cov[static_cast<size_t>(a) * d + b] +=
            centered[static_cast<size_t>(i) * d + a] * centered[static_cast<size_t>(i) * d + b];
  for (int a = 0; a < d; ++a)
    for (int b = 0; b < a; ++b) cov[static_cast<size_t>(a) * d + b] = cov[static_cast<size_t>(b) * d + a];

  std::vector<double> V;
  jacobi_eig(cov, d, V);
  std::vector<int> order(static_cast<size_t>(d));
  for (int i = 0; i < d; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return cov[static_cast<size_t>(a) * d + a] > cov[static_cast<size_t>(b) * d + b];
  });

  for (int comp = 0; comp < 2 && comp < d; ++comp) {
    const int col = order[static_cast<size_t>(comp)];
    // fix the sign: the largest-magnitude loading points in +
    double best = 0;
    for (int j = 0; j < d; ++j) {
      const double v = V[static_cast<size_t>(j) * d + col];
      if (std::fabs(v) > std::fabs(best)) best = v;
    }
    const double flip = best < 0 ? -1.0 : 1.0;
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int j = 0; j < d; ++j)
        s += centered[static_cast<size_t>(i) * d + j] * V[static_cast<size_t>(j) * d + col];
      out.mut()[static_cast<size_t>(i) * 2 + comp] = flip * s;
    }
  }
  return out;
}

void save_embeddings_tsv(const EmbeddingMatrix& m, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write embeddings to '" + path + "'");
  const int d = m.dim();
  os << "item_id\tcategory";
  for (int j = 0; j < d; ++j) os << "\tv" << j;
  os << '\n';
  char buf[64];
  for (size_t i = 0; i < m.ids.size(); ++i) {
    os << m.ids[i] << '\t' << m.categories.at(m.ids[i]);
    for (int j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m.vectors.ptr()[i * static_cast<size_t>(d) + j]);
      os << '\t' << buf;
    }
    os << '\n';
  }
}

EmbeddingMatrix load_embeddings_tsv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read embeddings from '" + path + "'");
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("embeddings file '" + path + "' is empty");
  std::vector<std::string> header;
  {
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, '\t')) header.push_back(cell);
  }
  if (header.size() < 2 || header[0] != "item_id" || header[1] != "category")
    throw std::runtime_error("embeddings file '" + path + "' has an unexpected header");
  const int d = static_cast<int>(header.size()) - 2;

  EmbeddingMatrix m;
  std::vector<double> values;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id, category, cell;
    if (!std::getline(ls, id, '\t') || !std::getline(ls, category, '\t'))
      throw std::runtime_error(path + " line " + std::to_string(lineno) + ": malformed row");
    int got = 0;
    while (std::getline(ls, cell, '\t')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw std::runtime_error(path + " line " + std::to_string(lineno) + ": bad number '" +
                                 cell + "'");
      }
      ++got;
    }
    if (got != d)
      throw std::runtime_error(path + " line " + std::to_string(lineno) + ": expected " +
                               std::to_string(d) + " values, got " + std::to_string(got));
    m.ids.push_back(id);
    m.categories[id] = category;
  }
  m.vectors = Tensor({static_cast<int>(m.ids.size()), d}, std::move(values));
  return m;
}

void save_projection_tsv(const EmbeddingMatrix& m, const Tensor& xy, const std::string& path) {
  if (xy.shape != std::vector<int>{static_cast<int>(m.size()), 2})
    throw std::invalid_argument("save_projection_tsv: projection shape " + xy.shape_str() +
                                " does not match " + std::to_string(m.size()) + " items");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write projection to '" + path + "'");
  os << "item_id\tx\ty\n";
  char buf[64];
  for (size_t i = 0; i < m.ids.size(); ++i) {
    os << m.ids[i];
    for (int j = 0; j < 2; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", xy.ptr()[i * 2 + static_cast<size_t>(j)]);
      os << '\t' << buf;
    }
    os << '\n';
  }
}

}  // namespace setvec
