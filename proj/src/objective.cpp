#include "setvec/objective.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace setvec {

namespace {

const Tensor& lookup(const VecMap& m, const std::string& id, const char* role) {
  auto it = m.find(id);
  if (it == m.end())
    throw std::runtime_error(std::string("missing ") + role + " vector for item '" + id + "'");
  return it->second;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> set_pairs(const StyleSet& s) {
  if (s.item_ids.size() < 2)
    throw std::invalid_argument("set_pairs: set '" + s.set_id + "' has fewer than 2 items");
  std::vector<std::string> ids = s.item_ids;
  std::sort(ids.begin(), ids.end());
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& i : ids)
    for (const auto& c : ids)
      if (i != c) pairs.emplace_back(i, c);
  return pairs;
}

std::vector<std::string> sample_negatives(const std::vector<std::string>& pool,
                                          const StyleSet& s, int k, Rng& rng) {
  if (k < 0) throw std::invalid_argument("sample_negatives: k must be non-negative");
  std::set<std::string> members(s.item_ids.begin(), s.item_ids.end());
  std::vector<std::string> candidates;
  candidates.reserve(pool.size());
  for (const auto& id : pool)
    if (!members.count(id)) candidates.push_back(id);
  if (static_cast<int>(candidates.size()) < k)
    throw std::runtime_error("sample_negatives: pool holds only " +
                             std::to_string(candidates.size()) + " non-members of set '" +
                             s.set_id + "', need " + std::to_string(k));
  // partial Fisher-Yates: first k entries are a uniform sample w/o replacement
  for (int i = 0; i < k; ++i) {
    size_t j = static_cast<size_t>(i) + rng.next_below(candidates.size() - i);
    std::swap(candidates[static_cast<size_t>(i)], candidates[j]);
  }
  candidates.resize(static_cast<size_t>(k));
  return candidates;
}

PairBatch build_pair_batch(const Corpus& corpus, const StyleSet& s, int k, Rng& rng) {
  std::vector<std::string> pool;
  pool.reserve(corpus.items().size());
  for (const auto& it : corpus.items()) pool.push_back(it.id);
  PairBatch batch;
  for (const auto& [i, c] : set_pairs(s))
    batch.entries.push_back(PairEntry{i, c, s.set_id, sample_negatives(pool, s, k, rng)});
  return batch;
}

Tensor softmax_set_loss(const VecMap& u, const VecMap& v_all, const StyleSet& s, Tape* tape) {
  Tensor total = Tensor::scalar(0.0);
  for (const auto& [i, c] : set_pairs(s)) {
    const Tensor& u_i = lookup(u, i, "input");
    // log-sum-exp over the full pool, stabilized by max subtraction
    double zmax = -1e300;
    for (const auto& [j, v_j] : v_all) {
      double z = 0;
      for (size_t m = 0; m < u_i.numel(); ++m) z += (*u_i.data)[m] * (*v_j.data)[m];
      zmax = std::max(zmax, z);
    }
    Tensor sum_exp = Tensor::scalar(0.0);
    for (const auto& [j, v_j] : v_all) {
      Tensor z = dot(u_i, v_j, tape);
      sum_exp = add(sum_exp, exp_op(subtract(z, Tensor::scalar(zmax), tape), tape), tape);
    }
    Tensor lse = add(log_op(sum_exp, tape), Tensor::scalar(zmax), tape);
    Tensor pos = dot(u_i, lookup(v_all, c, "context"), tape);
    total = add(total, subtract(pos, lse, tape), tape);
  }
  return scale(total, -1.0 / static_cast<double>(s.item_ids.size()), tape);
}

Tensor negsample_loss(const Tensor& u_i, const Tensor& v_c, const std::vector<Tensor>& v_negs,
                      Tape* tape) {
  Tensor acc = log_sigmoid(dot(u_i, v_c, tape), tape);
  for (const auto& v_j : v_negs)
    acc = add(acc, log_sigmoid(scale(dot(u_i, v_j, tape), -1.0, tape), tape), tape);
  return scale(acc, -1.0, tape);
}

Tensor set_loss_negsampled(const VecMap& u, const VecMap& v, const StyleSet& s,
                           const PairBatch& batch, Tape* tape) {
  std::set<std::string> members(s.item_ids.begin(), s.item_ids.end());
  Tensor acc = Tensor::scalar(0.0);
  for (const auto& e : batch.entries) {
    if (e.set_id != s.set_id)
      throw std::runtime_error("pair batch entry belongs to set '" + e.set_id + "', not '" +
                               s.set_id + "'");
    if (!members.count(e.input_id) || !members.count(e.context_id) ||
        e.input_id == e.context_id)
      throw std::runtime_error("pair (" + e.input_id + ", " + e.context_id +
                               ") is inconsistent with set '" + s.set_id + "'");
    std::vector<Tensor> v_negs;
    for (const auto& n : e.negatives) {
      if (members.count(n))
        throw std::runtime_error("negative '" + n + "' is a member of set '" + s.set_id + "'");
      v_negs.push_back(lookup(v, n, "context"));
    }
    acc = add(acc, negsample_loss(lookup(u, e.input_id, "input"),
                                  lookup(v, e.context_id, "context"), v_negs, tape),
              tape);
  }
  return scale(acc, 1.0 / static_cast<double>(s.item_ids.size()), tape);
}

}  // namespace setvec
