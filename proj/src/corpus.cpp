#include "setvec/corpus.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace setvec {

namespace {

std::vector<std::string> split_tab(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  for (;;) {
    size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, sep)) out.push_back(tok);
  return out;
}

[[noreturn]] void parse_error(const std::string& path, int line_no, const std::string& why) {
  throw std::runtime_error("parse error in " + path + " line " + std::to_string(line_no) + ": " +
                           why);
}

constexpr double kBackground = 0.93;

const std::array<std::array<double, 3>, 12> kPaletteRgb = {{
    // style 0: warm
    {0.85, 0.15, 0.15},
    {0.95, 0.45, 0.15},
    {0.90, 0.75, 0.20},
    // style 1: blue
    {0.15, 0.25, 0.85},
    {0.20, 0.55, 0.90},
    {0.15, 0.80, 0.85},
    // style 2: green
    {0.15, 0.70, 0.25},
    {0.45, 0.80, 0.30},
    {0.10, 0.45, 0.25},
    // style 3: violet/gray
    {0.60, 0.20, 0.75},
    {0.85, 0.35, 0.65},
    {0.35, 0.35, 0.40},
}};

const std::vector<std::string> kPatterns = {"solid", "stripe", "check", "dot"};
constexpr int kColorsPerStyle = 3;
constexpr int kVariants = 4;

}  // namespace

const std::vector<std::string>& synthetic_palette() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (size_t i = 0; i < kPaletteRgb.size(); ++i) v.push_back("c" + std::to_string(i));
    return v;
  }();
  return names;
}

std::array<double, 3> palette_rgb(const std::string& color_name) {
  for (size_t i = 0; i < kPaletteRgb.size(); ++i)
    if (synthetic_palette()[i] == color_name) return kPaletteRgb[i];
  throw std::invalid_argument("unknown palette color: " + color_name);
}

// ---------------------------------------------------------------------------
// Corpus validation

Corpus::Corpus(std::vector<Item> items, std::vector<StyleSet> sets,
               std::vector<std::string> category_set)
    : items_(std::move(items)), sets_(std::move(sets)), categories_(std::move(category_set)) {
  for (size_t i = 0; i < items_.size(); ++i) {
    if (!by_id_.emplace(items_[i].id, i).second)
      throw std::runtime_error("duplicate item id '" + items_[i].id + "'");
    if (std::find(categories_.begin(), categories_.end(), items_[i].category) ==
        categories_.end())
      throw std::runtime_error("item '" + items_[i].id + "' has category '" +
                               items_[i].category + "' outside the declared category set");
  }
  for (const auto& s : sets_) {
    if (s.item_ids.size() < 2 || s.item_ids.size() > 4)
      throw std::runtime_error("set '" + s.set_id + "' has " +
                               std::to_string(s.item_ids.size()) +
                               " items; style sets must have 2 to 4");
    std::set<std::string> seen_ids, seen_cats;
    for (const auto& id : s.item_ids) {
      auto it = by_id_.find(id);
      if (it == by_id_.end())
        throw std::runtime_error("set '" + s.set_id + "' references unknown item '" + id + "'");
      if (!seen_ids.insert(id).second)
        throw std::runtime_error("set '" + s.set_id + "' contains duplicate item '" + id + "'");
      if (!seen_cats.insert(items_[it->second].category).second)
        throw std::runtime_error("set '" + s.set_id + "' has two items of category '" +
                                 items_[it->second].category + "'");
    }
  }
}

const Item& Corpus::item(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw std::runtime_error("unknown item id '" + id + "'");
  return items_[it->second];
}

// ---------------------------------------------------------------------------
// manifests

Corpus load_corpus(const std::string& items_manifest_path,
                   const std::string& sets_manifest_path) {
  std::ifstream items_in(items_manifest_path);
  if (!items_in) throw std::runtime_error("cannot open " + items_manifest_path);
  fs::path base = fs::path(items_manifest_path).parent_path();

  std::vector<Item> items;
  std::vector<std::string> categories;
  std::string line;
  int line_no = 0;
  while (std::getline(items_in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = split_tab(line);
    if (f.size() != 3) parse_error(items_manifest_path, line_no, "expected 3 tab-separated fields");
    fs::path img = f[2];
    if (img.is_relative()) img = base / img;
    items.push_back(Item{f[0], f[1], img.string()});
    if (std::find(categories.begin(), categories.end(), f[1]) == categories.end())
      categories.push_back(f[1]);
  }

  std::ifstream sets_in(sets_manifest_path);
  if (!sets_in) throw std::runtime_error("cannot open " + sets_manifest_path);
  std::vector<StyleSet> sets;
  line_no = 0;
  while (std::getline(sets_in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = split_tab(line);
    if (f.size() != 2) parse_error(sets_manifest_path, line_no, "expected 2 tab-separated fields");
    StyleSet s;
    s.set_id = f[0];
    s.item_ids = split_on(f[1], ',');
    sets.push_back(std::move(s));
  }
  return Corpus(std::move(items), std::move(sets), std::move(categories));
}

void save_manifests(const Corpus& corpus, const std::string& items_manifest_path,
                    const std::string& sets_manifest_path) {
  fs::path base = fs::path(items_manifest_path).parent_path();
  std::ofstream items_out(items_manifest_path);
  if (!items_out) throw std::runtime_error("cannot write " + items_manifest_path);
  for (const auto& it : corpus.items()) {
    fs::path img = it.image_path;
    std::error_code ec;
    fs::path rel = fs::relative(img, base, ec);
    items_out << it.id << '\t' << it.category << '\t'
              << (ec || rel.empty() ? img.string() : rel.string()) << '\n';
  }
  std::ofstream sets_out(sets_manifest_path);
  if (!sets_out) throw std::runtime_error("cannot write " + sets_manifest_path);
  for (const auto& s : corpus.sets()) {
    sets_out << s.set_id << '\t';
    for (size_t i = 0; i < s.item_ids.size(); ++i) {
      if (i) sets_out << ',';
      sets_out << s.item_ids[i];
    }
    sets_out << '\n';
  }
}

FactorMap load_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  FactorMap out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = split_tab(line);
    if (f.size() != 4) parse_error(path, line_no, "expected 4 tab-separated fields");
    out[f[0]] = ItemFactors{std::stoi(f[1]), f[2], f[3]};
  }
  return out;
}

void save_sidecar(const FactorMap& factors, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& [id, f] : factors)
    out << id << '\t' << f.style << '\t' << f.color << '\t' << f.pattern << '\n';
}

// ---------------------------------------------------------------------------
// synthetic generation

namespace {

// fills `mask` (h*w bools) with the silhouette for a category
void category_mask(const std::string& category, int h, int w, int variant,
                   std::vector<char>& mask) {
  mask.assign(static_cast<size_t>(h) * w, 0);
  int dx = variant % 2, dy = variant / 2 % 2;
  auto fill = [&](int r0, int r1, int c0, int c1) {
    for (int i = std::max(0, r0 + dy); i < std::min(h, r1 + dy); ++i)
      for (int j = std::max(0, c0 + dx); j < std::min(w, c1 + dx); ++j)
        mask[static_cast<size_t>(i) * w + j] = 1;
  };
  double sh = h / 32.0, sw = w / 32.0;
  auto R = [&](double r) { return static_cast<int>(r * sh); };
  auto C = [&](double c) { return static_cast<int>(c * sw); };
  if (category == "top") {
    fill(R(4), R(18), C(7), C(25));
    fill(R(6), R(12), C(3), C(7));    // sleeves
    fill(R(6), R(12), C(25), C(29));
  } else if (category == "bottom") {
    fill(R(4), R(12), C(9), C(23));   // waist
    fill(R(12), R(28), C(9), C(15));  // legs
    fill(R(12), R(28), C(17), C(23));
  } else if (category == "shoes") {
    fill(R(18), R(26), C(3), C(14));
    fill(R(18), R(26), C(18), C(29));
  } else if (category == "outer") {
    fill(R(3), R(26), C(5), C(14));
    fill(R(3), R(26), C(18), C(27));
  } else if (category == "dress") {
    fill(R(3), R(12), C(10), C(22));
    fill(R(12), R(28), C(6), C(26));
  } else {
    fill(R(6), R(26), C(6), C(26));
  }
}

Tensor render_item(const std::string& category, const std::array<double, 3>& rgb,
                   const std::string& pattern, int variant, int channels, int h, int w) {
  std::vector<char> mask;
  category_mask(category, h, w, variant, mask);
  std::vector<double> px(static_cast<size_t>(channels) * h * w, kBackground);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      if (!mask[static_cast<size_t>(i) * w + j]) continue;
      double scale = 1.0, lift = 0.0;
      if (pattern == "stripe" && i % 4 == 0) scale = 0.55;
      if (pattern == "check" && (i / 4) % 2 == 1 && (j / 4) % 2 == 1) scale = 0.55;
      if (pattern == "dot" && i % 6 >= 2 && i % 6 <= 3 && j % 6 >= 2 && j % 6 <= 3) {
        scale = 0.5;
        lift = 0.5;
      }
      for (int c = 0; c < channels; ++c) {
        double base = rgb[static_cast<size_t>(c) % 3];
        px[(static_cast<size_t>(c) * h + i) * w + j] = std::min(1.0, base * scale + lift);
      }
    }
  // keep stored bytes identical to what f32 ITF files will hold
  for (auto& v : px) v = static_cast<double>(static_cast<float>(v));
  return Tensor({channels, h, w}, std::move(px));
}

}  // namespace

Corpus gen_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
  if (spec.n_styles < 1 || spec.n_items_per_category_per_style < 1 || spec.categories.empty())
    throw std::invalid_argument("gen_synthetic: bad spec");
  if (spec.n_styles * kColorsPerStyle > static_cast<int>(kPaletteRgb.size()))
    throw std::invalid_argument("gen_synthetic: at most " +
                                std::to_string(kPaletteRgb.size() / kColorsPerStyle) +
                                " styles supported");
  int grid = kColorsPerStyle * static_cast<int>(kPatterns.size()) * kVariants;
  if (spec.n_items_per_category_per_style > grid)
    throw std::invalid_argument(
        "gen_synthetic: factor grid supports only " + std::to_string(grid) +
        " distinct items per category per style, requested " +
        std::to_string(spec.n_items_per_category_per_style));

  fs::create_directories(fs::path(out_dir) / "images");
  Rng rng(spec.seed);

  std::vector<Item> items;
  FactorMap factors;
  std::map<std::pair<int, std::string>, std::vector<std::string>> buckets;

  for (int s = 0; s < spec.n_styles; ++s) {
    for (const auto& cat : spec.categories) {
      // sample (color, pattern, variant) combinations without replacement
      std::vector<std::array<int, 3>> combos;
      for (int c = 0; c < kColorsPerStyle; ++c)
        for (int p = 0; p < static_cast<int>(kPatterns.size()); ++p)
          for (int v = 0; v < kVariants; ++v) combos.push_back({c, p, v});
      Rng bucket_rng = rng.fork(hash_str(cat) * 1000003ULL + static_cast<uint64_t>(s));
      bucket_rng.shuffle(combos);
      for (int n = 0; n < spec.n_items_per_category_per_style; ++n) {
        auto [ci, pi, vi] = combos[static_cast<size_t>(n)];
        int color_idx = s * kColorsPerStyle + ci;
        char idbuf[64];
        std::snprintf(idbuf, sizeof(idbuf), "s%d-%s-%02d", s, cat.c_str(), n);
        std::string id = idbuf;
        std::string img_rel = "images/" + id + ".itf";
        std::string img_abs = (fs::path(out_dir) / img_rel).string();
        Tensor img = render_item(cat, kPaletteRgb[static_cast<size_t>(color_idx)],
                                 kPatterns[static_cast<size_t>(pi)], vi, spec.channels,
                                 spec.height, spec.width);
        write_itf_file(img_abs, img);
        items.push_back(Item{id, cat, img_abs});
        factors[id] = ItemFactors{s, synthetic_palette()[static_cast<size_t>(color_idx)],
                                  kPatterns[static_cast<size_t>(pi)]};
        buckets[{s, cat}].push_back(id);
      }
    }
  }

  // set sizes above the category count are unreachable; renormalize
  int max_size = std::min<int>(4, static_cast<int>(spec.categories.size()));
  std::vector<double> weights;
  double wsum = 0;
  for (int sz = 2; sz <= max_size; ++sz) {
    double w = spec.set_size_weights[static_cast<size_t>(sz - 2)];
    weights.push_back(w);
    wsum += w;
  }
  if (wsum <= 0) throw std::invalid_argument("gen_synthetic: set size weights sum to zero");

  std::vector<StyleSet> sets;
  Rng set_rng = rng.fork(0x5e75ULL);
  for (int n = 0; n < spec.n_sets; ++n) {
    int style = static_cast<int>(set_rng.next_below(static_cast<uint64_t>(spec.n_styles)));
    double r = set_rng.next_double() * wsum;
    int size = 2;
    for (size_t i = 0; i < weights.size(); ++i) {
      if (r < weights[i]) {
        size = 2 + static_cast<int>(i);
        break;
      }
      r -= weights[i];
      size = 2 + static_cast<int>(i);
    }
    std::vector<std::string> cats = spec.categories;
    set_rng.shuffle(cats);
    StyleSet s;
    s.set_id = "set" + std::to_string(n);
    for (int i = 0; i < size; ++i) {
      const auto& bucket = buckets.at({style, cats[static_cast<size_t>(i)]});
      s.item_ids.push_back(bucket[set_rng.next_below(bucket.size())]);
    }
    std::sort(s.item_ids.begin(), s.item_ids.end());
    sets.push_back(std::move(s));
  }

  Corpus corpus(std::move(items), std::move(sets), spec.categories);
  save_manifests(corpus, (fs::path(out_dir) / "items.tsv").string(),
                 (fs::path(out_dir) / "sets.tsv").string());
  save_sidecar(factors, (fs::path(out_dir) / "factors.tsv").string());
  return corpus;
}

Corpus pairwise_transform(const Corpus& corpus) {
  std::vector<StyleSet> pairs;
  for (const auto& s : corpus.sets()) {
    int k = 0;
    for (size_t i = 0; i < s.item_ids.size(); ++i)
      for (size_t j = i + 1; j < s.item_ids.size(); ++j) {
        StyleSet p;
        p.set_id = s.set_id + "#p" + std::to_string(k++);
        p.item_ids = {s.item_ids[i], s.item_ids[j]};
        pairs.push_back(std::move(p));
      }
  }
  return Corpus(corpus.items(), std::move(pairs), corpus.categories());
}

// ---------------------------------------------------------------------------
// image loading

namespace {

Tensor load_png(const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw std::runtime_error("PNG read failed: " + path + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw std::runtime_error("PNG decode failed: " + path + ": " + msg);
  }
  int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  std::vector<double> px(static_cast<size_t>(3) * h * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c)
        px[(static_cast<size_t>(c) * h + i) * w + j] =
            buffer[(static_cast<size_t>(i) * w + j) * 3 + c] / 255.0;
  return Tensor({3, h, w}, std::move(px));
}

}  // namespace

Tensor load_image(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".png") return load_png(path);
  Tensor t = read_itf_file(path);
  if (t.shape.size() != 3)
    throw std::runtime_error("image tensor must be rank-3 (C,H,W): " + path);
  return t;
}

Tensor load_image_batch(const Corpus& corpus, const std::vector<std::string>& ids) {
  if (ids.empty()) throw std::invalid_argument("load_image_batch: empty id list");
  std::vector<double> all;
  std::vector<int> shape;
  for (const auto& id : ids) {
    const Item& it = corpus.item(id);
    Tensor img;
    try {
      img = load_image(it.image_path);
    } catch (const std::exception& e) {
      throw std::runtime_error("failed to load image for item '" + id + "': " + e.what());
    }
    if (shape.empty())
      shape = img.shape;
    else if (shape != img.shape)
      throw std::runtime_error("item '" + id + "' image shape " + img.shape_str() +
                               " differs from batch shape " + shape_to_str(shape));
    all.insert(all.end(), img.data->begin(), img.data->end());
  }
  std::vector<int> bshape = {static_cast<int>(ids.size())};
  bshape.insert(bshape.end(), shape.begin(), shape.end());
  return Tensor(bshape, std::move(all));
}

}  // namespace setvec
