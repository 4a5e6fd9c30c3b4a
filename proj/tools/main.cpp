#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "setvec/corpus.hpp"
#include "setvec/evaluation.hpp"
#include "setvec/query.hpp"
#include "setvec/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace setvec;

namespace {

constexpr const char* kVersion = "0.1.0";

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

int default_threads() {
  if (const char* env = std::getenv("SETVEC_THREADS")) {
    try {
      int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
    throw CLI::ValidationError("SETVEC_THREADS", "must be a positive integer");
  }
  return 1;
}

// every subcommand records its resolved configuration next to its outputs so
// a run can be reproduced from the manifest alone
void write_manifest(const std::string& subcommand, const json& config,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs, const fs::path& where) {
  json m = {{"subcommand", subcommand}, {"version", kVersion},      {"config", config},
            {"inputs", inputs},         {"outputs", outputs}};
  std::ofstream os(where, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write manifest '" + where.string() + "'");
  os << m.dump(2) << '\n';
}

fs::path manifest_path_for_dir(const fs::path& out_dir) { return out_dir / "run_manifest.json"; }

fs::path manifest_path_for_file(const fs::path& out_file) {
  return out_file.parent_path() / (out_file.filename().string() + ".manifest.json");
}

Corpus load_corpus_dir(const std::string& dir) {
  return load_corpus((fs::path(dir) / "items.tsv").string(),
                     (fs::path(dir) / "sets.tsv").string());
}

FactorMap load_factors_arg(const std::string& path) {
  // accept either the sidecar file itself or a corpus directory holding one
  if (fs::is_directory(path)) return load_sidecar((fs::path(path) / "factors.tsv").string());
  return load_sidecar(path);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << text;
}

std::string neighbors_tsv(const std::vector<Neighbor>& neighbors) {
  std::ostringstream os;
  os << "rank\titem_id\tscore\n";
  char buf[64];
  for (size_t i = 0; i < neighbors.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", neighbors[i].score);
    os << (i + 1) << '\t' << neighbors[i].id << '\t' << buf << '\n';
  }
  return os.str();
}

void save_suite(const AnalogySuite& suite, const fs::path& path) {
  std::ostringstream os;
  os << "x\ty\tz\texpected_category\texpected_color\n";
  for (const auto& q : suite.questions)
    os << q.x << '\t' << q.y << '\t' << q.z << '\t' << q.expected_category << '\t'
       << q.expected_color << '\n';
  write_text(path, os.str());
}

AnalogySuite load_suite(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read suite '" + path + "'");
  std::string line;
  if (!std::getline(is, line) || line != "x\ty\tz\texpected_category\texpected_color")
    throw std::runtime_error("suite '" + path + "' has an unexpected header");
  AnalogySuite suite;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    AnalogyQuestion q;
    if (!std::getline(ls, q.x, '\t') || !std::getline(ls, q.y, '\t') ||
        !std::getline(ls, q.z, '\t') || !std::getline(ls, q.expected_category, '\t'))
      throw std::runtime_error(path + " line " + std::to_string(lineno) + ": malformed row");
    std::getline(ls, q.expected_color, '\t');
    suite.questions.push_back(std::move(q));
  }
  return suite;
}

// ---- subcommand wiring ----

struct GenCorpusArgs {
  std::string out;
  SyntheticSpec spec;
  std::string categories = "top,bottom,shoes";
  int image_size = 32;
};

void run_gen_corpus(const GenCorpusArgs& a) {
  SyntheticSpec spec = a.spec;
  spec.height = spec.width = a.image_size;
  spec.categories.clear();
  std::istringstream cs(a.categories);
  std::string cat;
  while (std::getline(cs, cat, ','))
    if (!cat.empty()) spec.categories.push_back(cat);
  gen_synthetic(spec, a.out);
  json cfg = {{"styles", spec.n_styles},
              {"items_per_category_per_style", spec.n_items_per_category_per_style},
              {"categories", spec.categories},
              {"sets", spec.n_sets},
              {"image_size", a.image_size},
              {"seed", spec.seed}};
  write_manifest("gen-corpus", cfg, {},
                 {(fs::path(a.out) / "items.tsv").string(),
                  (fs::path(a.out) / "sets.tsv").string(),
                  (fs::path(a.out) / "factors.tsv").string()},
                 manifest_path_for_dir(a.out));
}

struct TrainArgs {
  std::string corpus, out;
  TrainConfig train;
  int embedding_dim = 64;
};

void run_train(const TrainArgs& a) {
  Corpus corpus = load_corpus_dir(a.corpus);
  size_t max_set = 0;
  for (const auto& s : corpus.sets()) max_set = std::max(max_set, s.item_ids.size());
  if (corpus.pool_size() < max_set + static_cast<size_t>(a.train.negatives))
    throw CLI::ValidationError(
        "--negatives", "pool of " + std::to_string(corpus.pool_size()) +
                           " items cannot supply " + std::to_string(a.train.negatives) +
                           " negatives outside a set of " + std::to_string(max_set));
  EncoderConfig enc;
  enc.embedding_dim = a.embedding_dim;
  if (!corpus.items().empty()) {
    Tensor probe = load_image(corpus.items().front().image_path);
    if (probe.shape.size() == 3)
      enc.input_shape = {probe.shape[0], probe.shape[1], probe.shape[2]};
  }
  TrainResult result = train(corpus, a.train, enc, a.out);
  save_loss_log(result.loss_log, (fs::path(a.out) / "loss.csv").string());
  json cfg = {{"epochs", a.train.epochs},
              {"batch_size", a.train.batch_size},
              {"learning_rate", a.train.learning_rate},
              {"negatives", a.train.negatives},
              {"checkpoint_interval", a.train.checkpoint_interval},
              {"embedding_dim", a.embedding_dim},
              {"seed", a.train.seed}};
  write_manifest("train", cfg, {a.corpus},
                 {(fs::path(a.out) / "final.svc").string(),
                  (fs::path(a.out) / "loss.csv").string()},
                 manifest_path_for_dir(a.out));
}

struct EmbedArgs {
  std::string checkpoint, corpus, out, role = "input";
  int batch_size = 64;
  int threads = 1;
};

void run_embed(const EmbedArgs& a) {
  if (a.role != "input" && a.role != "context")
    throw CLI::ValidationError("--role", "must be 'input' or 'context'");
  Checkpoint ckpt = load_checkpoint(a.checkpoint);
  Corpus corpus = load_corpus_dir(a.corpus);
  const EncoderParams& params =
      a.role == "input" ? ckpt.input_params : ckpt.context_params;
  EmbeddingMatrix emb = extract_all(params, corpus, a.batch_size, a.threads);
  save_embeddings_tsv(emb, a.out);
  json cfg = {{"role", a.role}, {"batch_size", a.batch_size}, {"threads", a.threads}};
  write_manifest("embed", cfg, {a.checkpoint, a.corpus}, {a.out},
                 manifest_path_for_file(a.out));
}

struct QueryArgs {
  std::string matrix, item, metric = "cosine", category, out;
  int top = 5;
};

void run_query(const QueryArgs& a) {
  EmbeddingMatrix emb = load_embeddings_tsv(a.matrix);
  if (emb.index_of(a.item) < 0)
    throw CLI::ValidationError("--item", "'" + a.item + "' is not in the matrix");
  auto neighbors =
      nearest(emb, emb.vec(a.item), a.top, metric_from_string(a.metric), {}, a.category);
  const std::string text = neighbors_tsv(neighbors);
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_text(a.out, text);
    json cfg = {{"item", a.item}, {"top", a.top}, {"metric", a.metric}, {"category", a.category}};
    write_manifest("query", cfg, {a.matrix}, {a.out}, manifest_path_for_file(a.out));
  }
}

struct AnalogyArgs {
  std::string matrix, x, y, z, metric = "cosine";
  std::string suite, factors, report;
  std::string corpus, out;  // suite generation
  int questions = 50;
  uint64_t seed = 7;
  int top = 5;
  bool gen = false;
};

void run_analogy(const AnalogyArgs& a) {
  if (a.gen) {
    if (a.corpus.empty() || a.out.empty())
      throw CLI::ValidationError("--gen", "needs --corpus and --out");
    Corpus corpus = load_corpus_dir(a.corpus);
    FactorMap factors = load_factors_arg(a.factors.empty() ? a.corpus : a.factors);
    Rng rng(a.seed);
    AnalogySuite suite = gen_analogy_suite(corpus, factors, a.questions, rng);
    save_suite(suite, a.out);
    json cfg = {{"questions", a.questions}, {"seed", a.seed}};
    write_manifest("analogy", cfg, {a.corpus}, {a.out}, manifest_path_for_file(a.out));
    return;
  }
  if (a.matrix.empty()) throw CLI::ValidationError("--matrix", "required");
  EmbeddingMatrix emb = load_embeddings_tsv(a.matrix);
  if (!a.suite.empty()) {
    if (a.factors.empty() || a.report.empty())
      throw CLI::ValidationError("--suite", "needs --factors and --report");
    AnalogyReport report = run_analogy_suite(load_suite(a.suite), emb,
                                             load_factors_arg(a.factors),
                                             metric_from_string(a.metric));
    write_text(a.report, to_json(report) + "\n");
    json cfg = {{"metric", a.metric}};
    write_manifest("analogy", cfg, {a.matrix, a.suite, a.factors}, {a.report},
                   manifest_path_for_file(a.report));
    return;
  }
  if (a.x.empty() || a.y.empty() || a.z.empty())
    throw CLI::ValidationError("analogy", "give either --suite or all of --x --y --z");
  AnalogyResult r = analogy(emb, a.x, a.y, a.z, a.top, metric_from_string(a.metric));
  const std::string text = neighbors_tsv(r.neighbors);
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_text(a.out, text);
    json cfg = {{"x", a.x}, {"y", a.y}, {"z", a.z}, {"top", a.top}, {"metric", a.metric}};
    write_manifest("analogy", cfg, {a.matrix}, {a.out}, manifest_path_for_file(a.out));
  }
}

struct ClassifyArgs {
  std::string matrix, corpus, factors, report;
  ClassifierConfig cfg;
};

void run_classify(const ClassifyArgs& a) {
  EmbeddingMatrix emb = load_embeddings_tsv(a.matrix);
  Corpus corpus = load_corpus_dir(a.corpus);
  FactorMap factors = load_factors_arg(a.factors.empty() ? a.corpus : a.factors);
  MlpClassifier model;
  ClassifierReport report = train_classifier(model, set_features(emb, corpus.sets()),
                                             set_style_labels(corpus.sets(), factors), a.cfg);
  json out = {{"train_accuracy", report.train_accuracy},
              {"test_accuracy", report.test_accuracy},
              {"n_train", report.n_train},
              {"n_test", report.n_test}};
  write_text(a.report, out.dump(2) + "\n");
  json cfg = {{"hidden", a.cfg.hidden},
              {"epochs", a.cfg.epochs},
              {"holdout", a.cfg.holdout},
              {"seed", a.cfg.seed}};
  write_manifest("classify", cfg, {a.matrix, a.corpus}, {a.report},
                 manifest_path_for_file(a.report));
}

struct AblateArgs {
  std::string corpus, report;
  TrainConfig train;
  ClassifierConfig classifier;
  int embedding_dim = 64;
};

void run_ablate(const AblateArgs& a) {
  Corpus corpus = load_corpus_dir(a.corpus);
  FactorMap factors = load_factors_arg(a.corpus);
  EncoderConfig enc;
  enc.embedding_dim = a.embedding_dim;
  if (!corpus.items().empty()) {
    Tensor probe = load_image(corpus.items().front().image_path);
    if (probe.shape.size() == 3)
      enc.input_shape = {probe.shape[0], probe.shape[1], probe.shape[2]};
  }
  // one seed drives both arms so the comparison isolates the set structure
  ClassifierConfig cc = a.classifier;
  cc.seed = a.train.seed;
  CompareReport report = compare_set_vs_pairwise(corpus, factors, a.train, enc, cc);
  write_text(a.report, to_json(report) + "\n");
  json cfg = {{"epochs", a.train.epochs},
              {"batch_size", a.train.batch_size},
              {"negatives", a.train.negatives},
              {"embedding_dim", a.embedding_dim},
              {"classifier_epochs", a.classifier.epochs},
              {"seed", a.train.seed}};
  write_manifest("ablate", cfg, {a.corpus}, {a.report}, manifest_path_for_file(a.report));
}

struct ProjectArgs {
  std::string matrix, out;
};

void run_project(const ProjectArgs& a) {
  EmbeddingMatrix emb = load_embeddings_tsv(a.matrix);
  save_projection_tsv(emb, project_2d(emb), a.out);
  write_manifest("project", json::object(), {a.matrix}, {a.out}, manifest_path_for_file(a.out));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"style-set embedding toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  GenCorpusArgs gen_args;
  auto* gen = app.add_subcommand("gen-corpus", "render a synthetic style-set corpus");
  gen->add_option("--out", gen_args.out, "output directory")->required();
  gen->add_option("--styles", gen_args.spec.n_styles, "number of style clusters");
  gen->add_option("--items-per-style", gen_args.spec.n_items_per_category_per_style,
                  "items per category per style");
  gen->add_option("--categories", gen_args.categories, "comma-separated category names");
  gen->add_option("--sets", gen_args.spec.n_sets, "number of style sets");
  gen->add_option("--image-size", gen_args.image_size, "square image side in pixels");
  gen->add_option("--seed", gen_args.spec.seed, "generator seed");

  TrainArgs train_args;
  auto* tr = app.add_subcommand("train", "train the dual encoders on a corpus");
  tr->add_option("--corpus", train_args.corpus, "corpus directory")->required();
  tr->add_option("--out", train_args.out, "checkpoint/output directory")->required();
  tr->add_option("--epochs", train_args.train.epochs, "training epochs");
  tr->add_option("--batch-size", train_args.train.batch_size, "style sets per batch");
  tr->add_option("--lr", train_args.train.learning_rate, "Adam learning rate");
  tr->add_option("--negatives", train_args.train.negatives, "negatives per pair");
  tr->add_option("--checkpoint-interval", train_args.train.checkpoint_interval,
                 "steps between checkpoints (0 = final only)");
  tr->add_option("--embedding-dim", train_args.embedding_dim, "embedding dimension");
  tr->add_option("--seed", train_args.train.seed, "training seed");

  EmbedArgs embed_args;
  auto* em = app.add_subcommand("embed", "extract item embeddings from a checkpoint");
  em->add_option("--checkpoint", embed_args.checkpoint, "checkpoint file")->required();
  em->add_option("--corpus", embed_args.corpus, "corpus directory")->required();
  em->add_option("--out", embed_args.out, "embedding TSV path")->required();
  em->add_option("--role", embed_args.role, "input or context encoder");
  em->add_option("--batch-size", embed_args.batch_size, "images per batch");
  em->add_option("--threads", embed_args.threads, "worker threads")
      ->default_val(default_threads());

  QueryArgs query_args;
  auto* qu = app.add_subcommand("query", "nearest neighbors of an item");
  qu->add_option("--matrix", query_args.matrix, "embedding TSV")->required();
  qu->add_option("--item", query_args.item, "query item id")->required();
  qu->add_option("--top", query_args.top, "neighbors to return");
  qu->add_option("--metric", query_args.metric, "cosine, dot or euclidean");
  qu->add_option("--category", query_args.category, "restrict answers to one category");
  qu->add_option("--out", query_args.out, "write TSV here instead of stdout");

  AnalogyArgs analogy_args;
  auto* an = app.add_subcommand("analogy", "vector-arithmetic analogies and suites");
  an->add_option("--matrix", analogy_args.matrix, "embedding TSV");
  an->add_option("--x", analogy_args.x, "item x");
  an->add_option("--y", analogy_args.y, "item y");
  an->add_option("--z", analogy_args.z, "item z");
  an->add_option("--top", analogy_args.top, "neighbors to return");
  an->add_option("--metric", analogy_args.metric, "cosine, dot or euclidean");
  an->add_option("--suite", analogy_args.suite, "question file to score");
  an->add_option("--factors", analogy_args.factors, "ground-truth sidecar (file or corpus dir)");
  an->add_option("--report", analogy_args.report, "JSON report path");
  an->add_flag("--gen", analogy_args.gen, "generate a suite instead of scoring");
  an->add_option("--corpus", analogy_args.corpus, "corpus directory (with --gen)");
  an->add_option("--questions", analogy_args.questions, "questions to generate");
  an->add_option("--seed", analogy_args.seed, "suite generation seed");
  an->add_option("--out", analogy_args.out, "output path (suite or neighbor TSV)");

  ClassifyArgs classify_args;
  auto* cl = app.add_subcommand("classify", "style classification from set features");
  cl->add_option("--matrix", classify_args.matrix, "embedding TSV")->required();
  cl->add_option("--corpus", classify_args.corpus, "corpus directory")->required();
  cl->add_option("--factors", classify_args.factors, "sidecar path (defaults into corpus)");
  cl->add_option("--report", classify_args.report, "JSON report path")->required();
  cl->add_option("--hidden", classify_args.cfg.hidden, "hidden width");
  cl->add_option("--epochs", classify_args.cfg.epochs, "classifier epochs");
  cl->add_option("--holdout", classify_args.cfg.holdout, "test fraction");
  cl->add_option("--seed", classify_args.cfg.seed, "classifier seed");

  AblateArgs ablate_args;
  auto* ab = app.add_subcommand("ablate", "set-trained versus pairwise-trained comparison");
  ab->add_option("--corpus", ablate_args.corpus, "corpus directory")->required();
  ab->add_option("--report", ablate_args.report, "JSON report path")->required();
  ab->add_option("--epochs", ablate_args.train.epochs, "training epochs per arm");
  ab->add_option("--batch-size", ablate_args.train.batch_size, "style sets per batch");
  ab->add_option("--lr", ablate_args.train.learning_rate, "Adam learning rate");
  ab->add_option("--negatives", ablate_args.train.negatives, "negatives per pair");
  ab->add_option("--embedding-dim", ablate_args.embedding_dim, "embedding dimension");
  ab->add_option("--classifier-epochs", ablate_args.classifier.epochs, "classifier epochs");
  ab->add_option("--holdout", ablate_args.classifier.holdout, "test fraction");
  ab->add_option("--seed", ablate_args.train.seed, "seed for both arms");

  ProjectArgs project_args;
  auto* pr = app.add_subcommand("project", "2-d projection of an embedding matrix");
  pr->add_option("--matrix", project_args.matrix, "embedding TSV")->required();
  pr->add_option("--out", project_args.out, "projection TSV path")->required();

  try {
    app.parse(argc, argv);
    if (gen->parsed()) run_gen_corpus(gen_args);
    if (tr->parsed()) run_train(train_args);
    if (em->parsed()) run_embed(embed_args);
    if (qu->parsed()) run_query(query_args);
    if (an->parsed()) run_analogy(analogy_args);
    if (cl->parsed()) run_classify(classify_args);
    if (ab->parsed()) run_ablate(ablate_args);
    if (pr->parsed()) run_project(project_args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}
