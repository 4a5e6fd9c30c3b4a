#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "setvec/corpus.hpp"
#include "setvec/query.hpp"

using namespace setvec;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

EmbeddingMatrix make_matrix(const std::vector<std::string>& ids,
                            const std::vector<std::string>& cats, std::vector<double> values) {
  EmbeddingMatrix m;
  m.ids = ids;
  const int d = static_cast<int>(values.size() / ids.size());
  m.vectors = Tensor({static_cast<int>(ids.size()), d}, std::move(values));
  for (size_t i = 0; i < ids.size(); ++i) m.categories[ids[i]] = cats[i];
  return m;
}

Corpus tiny_corpus(const TempDir& tmp) {
  SyntheticSpec spec;
  spec.n_styles = 2;
  spec.n_items_per_category_per_style = 3;
  spec.height = 16;
  spec.width = 16;
  spec.n_sets = 10;
  spec.seed = 23;
  return gen_synthetic(spec, tmp.path.string());
}

EncoderConfig tiny_encoder() {
  EncoderConfig cfg;
  cfg.input_shape = {3, 16, 16};
  cfg.stages = {{6, 1}};
  cfg.embedding_dim = 5;
  return cfg;
}

}  // namespace

TEST_SUITE("query") {

TEST_CASE("extract_all covers the pool and ignores the batch partition") {
  TempDir dir("setvec_query_extract");
  Corpus corpus = tiny_corpus(dir);
  EncoderParams params = init_params(tiny_encoder(), 5, "input");

  EmbeddingMatrix big = extract_all(params, corpus, 64);
  CHECK(big.size() == corpus.items().size());
  CHECK(big.dim() == 5);
  CHECK(big.categories.at(big.ids[0]) == corpus.items()[0].category);
  CHECK(big.vectors.all_finite());

  EmbeddingMatrix small = extract_all(params, corpus, 3);
  REQUIRE(small.ids == big.ids);
  for (size_t i = 0; i < big.vectors.numel(); ++i)
    CHECK(std::fabs((*big.vectors.data)[i] - (*small.vectors.data)[i]) < 1e-10);

  EmbeddingMatrix threaded = extract_all(params, corpus, 3, 4);
  CHECK(*threaded.vectors.data == *small.vectors.data);
}

TEST_CASE("nearest agrees with a brute-force scan under every metric") {
  Rng rng(99);
  std::vector<std::string> ids;
  std::vector<std::string> cats;
  std::vector<double> values;
  const int n = 40, d = 7;
  for (int i = 0; i < n; ++i) {
    ids.push_back("it" + std::to_string(100 + i));
    cats.push_back(i % 2 ? "a" : "b");
    for (int j = 0; j < d; ++j) values.push_back(rng.uniform(-1, 1));
  }
  EmbeddingMatrix m = make_matrix(ids, cats, values);
  std::vector<double> qv;
  for (int j = 0; j < d; ++j) qv.push_back(rng.uniform(-1, 1));
  Tensor q({d}, qv);

  for (Metric metric : {Metric::Cosine, Metric::Dot, Metric::Euclidean}) {
    auto top = nearest(m, q, 5, metric);
    REQUIRE(top.size() == 5);
    // every returned score beats every score not returned
    double worst = top.back().score;
    std::set<std::string> returned;
    for (const auto& nb : top) {
      returned.insert(nb.id);
      double manual;
      Tensor v = m.vec(nb.id);
      double dotv = 0, nq = 0, nv = 0, dist = 0;
      for (int j = 0; j < d; ++j) {
        dotv += qv[static_cast<size_t>(j)] * (*v.data)[static_cast<size_t>(j)];
        nq += qv[static_cast<size_t>(j)] * qv[static_cast<size_t>(j)];
        nv += (*v.data)[static_cast<size_t>(j)] * (*v.data)[static_cast<size_t>(j)];
        double diff = qv[static_cast<size_t>(j)] - (*v.data)[static_cast<size_t>(j)];
        dist += diff * diff;
      }
      if (metric == Metric::Dot) manual = dotv;
      else if (metric == Metric::Cosine) manual = dotv / std::sqrt(nq * nv);
      else manual = -std::sqrt(dist);
      CHECK(nb.score == doctest::Approx(manual).epsilon(1e-12));
    }
    for (const auto& id : ids) {
      if (returned.count(id)) continue;
      Tensor v = m.vec(id);
      double s = 0, nq = 0, nv = 0, dist = 0;
      for (int j = 0; j < d; ++j) {
        s += qv[static_cast<size_t>(j)] * (*v.data)[static_cast<size_t>(j)];
        nq += qv[static_cast<size_t>(j)] * qv[static_cast<size_t>(j)];
        nv += (*v.data)[static_cast<size_t>(j)] * (*v.data)[static_cast<size_t>(j)];
        double diff = qv[static_cast<size_t>(j)] - (*v.data)[static_cast<size_t>(j)];
        dist += diff * diff;
      }
      double manual = metric == Metric::Dot ? s
                      : metric == Metric::Cosine ? s / std::sqrt(nq * nv)
                                                 : -std::sqrt(dist);
      CHECK(manual <= worst + 1e-12);
    }
  }
}

TEST_CASE("ties break toward the lexically smaller id") {
  EmbeddingMatrix m = make_matrix({"zeta", "alpha", "mid"}, {"c", "c", "c"},
                                  {1, 0, 1, 0, 0, 1});
  auto top = nearest(m, Tensor({2}, {1, 0}), 3, Metric::Dot);
  REQUIRE(top.size() == 3);
  CHECK(top[0].id == "alpha");
  CHECK(top[1].id == "zeta");
  CHECK(top[2].id == "mid");
}

TEST_CASE("exclusions and category filters narrow the candidates") {
  EmbeddingMatrix m = make_matrix({"a", "b", "c", "d"}, {"top", "top", "shoes", "shoes"},
                                  {1, 0, 0.9, 0, 0.8, 0, 0.7, 0});
  Tensor q({2}, {1, 0});
  auto top = nearest(m, q, 10, Metric::Dot, {"a"});
  REQUIRE(top.size() == 3);
  CHECK(top[0].id == "b");
  auto shoes = nearest(m, q, 10, Metric::Dot, {}, "shoes");
  REQUIRE(shoes.size() == 2);
  CHECK(shoes[0].id == "c");
  CHECK(shoes[1].id == "d");
}

TEST_CASE("cosine ranking is invariant to query scale") {
  Rng rng(5);
  std::vector<double> values;
  std::vector<std::string> ids, cats;
  for (int i = 0; i < 20; ++i) {
    ids.push_back("x" + std::to_string(i));
    cats.push_back("c");
    for (int j = 0; j < 4; ++j) values.push_back(rng.uniform(-1, 1));
  }
  EmbeddingMatrix m = make_matrix(ids, cats, values);
  std::vector<double> qv = {0.3, -0.2, 0.9, 0.1};
  std::vector<double> qv10;
  for (double v : qv) qv10.push_back(10 * v);
  auto a = nearest(m, Tensor({4}, qv), 20, Metric::Cosine);
  auto b = nearest(m, Tensor({4}, qv10), 20, Metric::Cosine);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].score == doctest::Approx(b[i].score).epsilon(1e-12));
  }
}

TEST_CASE("an item retrieves itself at rank 1") {
  Rng rng(17);
  std::vector<double> values;
  std::vector<std::string> ids, cats;
  for (int i = 0; i < 15; ++i) {
    ids.push_back("x" + std::to_string(i));
    cats.push_back("c");
    for (int j = 0; j < 6; ++j) values.push_back(rng.uniform(-1, 1));
  }
  EmbeddingMatrix m = make_matrix(ids, cats, values);
  for (const auto& id : ids) {
    auto top = nearest(m, m.vec(id), 1, Metric::Euclidean);
    REQUIRE(top.size() == 1);
    CHECK(top[0].id == id);
    CHECK(top[0].score == 0.0);
  }
}

TEST_CASE("analogy on a one-hot basis lands on the composed item") {
  EmbeddingMatrix m = make_matrix(
      {"a", "b", "c", "d", "e"}, {"k", "k", "k", "k", "k"},
      {1, 0, 0,   // a = e1
       0, 1, 0,   // b = e2
       0, 0, 1,   // c = e3
       0, 1, 1,   // d = e2 + e3
       1, 1, 0}); // e = e1 + e2
  AnalogyResult r = analogy(m, "a", "b", "c", 2);
  CHECK((*r.target.data) == std::vector<double>{-1, 1, 1});
  REQUIRE(!r.neighbors.empty());
  CHECK(r.neighbors[0].id == "d");
  for (const auto& nb : r.neighbors) {
    CHECK(nb.id != "a");
    CHECK(nb.id != "b");
    CHECK(nb.id != "c");
  }
  CHECK_THROWS_AS(analogy(m, "a", "b", "nope", 1), std::runtime_error);
}

TEST_CASE("pca projection recovers axis-aligned structure") {
  // variance 8 along x, 0.5 along y, nothing along z
  EmbeddingMatrix m = make_matrix({"p", "q", "r", "s"}, {"c", "c", "c", "c"},
                                  {2, 0, 0, -2, 0, 0, 0, 0.5, 0, 0, -0.5, 0});
  Tensor xy = project_2d(m);
  REQUIRE(xy.shape == std::vector<int>{4, 2});
  CHECK(xy.ptr()[0] == doctest::Approx(2.0));   // p on +x
  CHECK(xy.ptr()[2] == doctest::Approx(-2.0));  // q on -x
  CHECK(xy.ptr()[1] == doctest::Approx(0.0));
  CHECK(xy.ptr()[5] == doctest::Approx(0.5));   // r on +second-component
  CHECK(xy.ptr()[7] == doctest::Approx(-0.5));
}

TEST_CASE("pca of collinear points puts all variance in one column") {
  std::vector<double> values;
  std::vector<std::string> ids, cats;
  for (int i = 0; i < 9; ++i) {
    ids.push_back("p" + std::to_string(i));
    cats.push_back("c");
    double t = i - 4;
    values.insert(values.end(), {t, 2 * t, -t});
  }
  EmbeddingMatrix m = make_matrix(ids, cats, values);
  Tensor xy = project_2d(m);
  double var2 = 0;
  for (int i = 0; i < 9; ++i) var2 += xy.ptr()[static_cast<size_t>(i) * 2 + 1] * xy.ptr()[static_cast<size_t>(i) * 2 + 1];
  CHECK(var2 < 1e-18);
  // distances along the line survive in the first column
  CHECK(std::fabs(xy.ptr()[0 * 2]) == doctest::Approx(4 * std::sqrt(6.0)));
}

TEST_CASE("pca of identical points is all zeros") {
  EmbeddingMatrix m = make_matrix({"a", "b", "c"}, {"k", "k", "k"},
                                  {1, 2, 1, 2, 1, 2});
  Tensor xy = project_2d(m);
  for (size_t i = 0; i < xy.numel(); ++i) CHECK(xy.ptr()[i] == doctest::Approx(0.0));
}

TEST_CASE("embeddings survive a tsv round trip bit-exactly") {
  TempDir dir("setvec_query_tsv");
  Rng rng(3);
  std::vector<double> values;
  std::vector<std::string> ids, cats;
  for (int i = 0; i < 8; ++i) {
    ids.push_back("item" + std::to_string(i));
    cats.push_back(i % 2 ? "top" : "shoes");
    for (int j = 0; j < 5; ++j) values.push_back(rng.uniform(-3, 3));
  }
  EmbeddingMatrix m = make_matrix(ids, cats, values);
  const std::string path = (dir.path / "emb.tsv").string();
  save_embeddings_tsv(m, path);
  EmbeddingMatrix back = load_embeddings_tsv(path);
  CHECK(back.ids == m.ids);
  CHECK(back.categories == m.categories);
  CHECK(*back.vectors.data == *m.vectors.data);

  Tensor xy = project_2d(m);
  save_projection_tsv(m, xy, (dir.path / "proj.tsv").string());
  std::ifstream is(dir.path / "proj.tsv");
  std::string header;
  std::getline(is, header);
  CHECK(header == "item_id\tx\ty");
  CHECK_THROWS_AS(save_projection_tsv(m, Tensor::zeros({3, 2}), (dir.path / "p2.tsv").string()),
                  std::invalid_argument);
}

TEST_CASE("malformed embedding files are rejected with the line number") {
  TempDir dir("setvec_query_badtsv");
  auto write = [&](const std::string& body) {
    std::ofstream os(dir.path / "bad.tsv", std::ios::trunc);
    os << body;
  };
  write("item_id\tcategory\tv0\tv1\nok\ttop\t1\n");
  try {
    load_embeddings_tsv((dir.path / "bad.tsv").string());
    FAIL("expected rejection");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  write("wrong\theader\n");
  CHECK_THROWS_AS(load_embeddings_tsv((dir.path / "bad.tsv").string()), std::runtime_error);
  write("item_id\tcategory\tv0\na\ttop\tnotanumber\n");
  CHECK_THROWS_AS(load_embeddings_tsv((dir.path / "bad.tsv").string()), std::runtime_error);
}

TEST_CASE("metric names round trip and unknown names are rejected") {
  CHECK(metric_from_string("cosine") == Metric::Cosine);
  CHECK(metric_from_string(metric_name(Metric::Euclidean)) == Metric::Euclidean);
  CHECK_THROWS_AS(metric_from_string("manhattan"), std::invalid_argument);
}

}  // TEST_SUITE
