#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "setvec/rng.hpp"
#include "setvec/tensor.hpp"

namespace setvec {

struct Item {
  std::string id;
  std::string category;
  std::string image_path;
};

struct StyleSet {
  std::string set_id;
  std::vector<std::string> item_ids;
};

// Item pool plus the style sets drawn from it. Immutable after load.
class Corpus {
 public:
  Corpus(std::vector<Item> items, std::vector<StyleSet> sets,
         std::vector<std::string> category_set);

  const std::vector<Item>& items() const { return items_; }
  const std::vector<StyleSet>& sets() const { return sets_; }
  const std::vector<std::string>& categories() const { return categories_; }
  const Item& item(const std::string& id) const;
  bool has_item(const std::string& id) const { return by_id_.count(id) > 0; }
  size_t pool_size() const { return items_.size(); }

 private:
  std::vector<Item> items_;
  std::vector<StyleSet> sets_;
  std::vector<std::string> categories_;
  std::unordered_map<std::string, size_t> by_id_;
};

// Latent factors recorded by the synthetic generator.
struct ItemFactors {
  int style = 0;
  std::string color;
  std::string pattern;
};
using FactorMap = std::map<std::string, ItemFactors>;

struct SyntheticSpec {
  int n_styles = 4;
  int n_items_per_category_per_style = 20;
  std::vector<std::string> categories = {"top", "bottom", "shoes"};
  int channels = 3;
  int height = 32;
  int width = 32;
  int n_sets = 500;
  // weights over set sizes 2, 3, 4; sizes above the category count are dropped
  std::vector<double> set_size_weights = {0.35, 0.45, 0.20};
  uint64_t seed = 7;
};

Corpus load_corpus(const std::string& items_manifest_path, const std::string& sets_manifest_path);

// Renders images + manifests + ground-truth sidecar under out_dir.
Corpus gen_synthetic(const SyntheticSpec& spec, const std::string& out_dir);

Corpus pairwise_transform(const Corpus& corpus);

void save_manifests(const Corpus& corpus, const std::string& items_manifest_path,
                    const std::string& sets_manifest_path);

FactorMap load_sidecar(const std::string& path);
void save_sidecar(const FactorMap& factors, const std::string& path);

// (C,H,W) tensor with values in [0,1]; ITF taken as-is, PNG converted.
Tensor load_image(const std::string& path);

// Stacks per-item images into an (n, C, H, W) batch.
Tensor load_image_batch(const Corpus& corpus, const std::vector<std::string>& ids);

const std::vector<std::string>& synthetic_palette();
std::array<double, 3> palette_rgb(const std::string& color_name);

}  // namespace setvec
