#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "setvec/corpus.hpp"
#include "setvec/rng.hpp"
#include "setvec/tensor.hpp"

namespace setvec {

// One (input, context) pair of a style set with its per-pair negatives.
struct PairEntry {
  std::string input_id;
  std::string context_id;
  std::string set_id;
  std::vector<std::string> negatives;
};

struct PairBatch {
  std::vector<PairEntry> entries;
};

using VecMap = std::map<std::string, Tensor>;

// All |S|*(|S|-1) ordered pairs, input id ascending then context id ascending.
std::vector<std::pair<std::string, std::string>> set_pairs(const StyleSet& s);

// k distinct ids drawn uniformly without replacement from pool \ S.
std::vector<std::string> sample_negatives(const std::vector<std::string>& pool,
                                          const StyleSet& s, int k, Rng& rng);

// set_pairs + per-pair sample_negatives over the corpus item pool.
PairBatch build_pair_batch(const Corpus& corpus, const StyleSet& s, int k, Rng& rng);

// Exact-softmax set objective (negated for minimization); `v_all` must cover
// the whole pool. Verification-scale only: the denominator walks all of F.
Tensor softmax_set_loss(const VecMap& u, const VecMap& v_all, const StyleSet& s,
                        Tape* tape = nullptr);

// -[ log sigma(u_i.v_c) + sum_j log sigma(-u_i.v_j) ]
Tensor negsample_loss(const Tensor& u_i, const Tensor& v_c, const std::vector<Tensor>& v_negs,
                      Tape* tape = nullptr);

// (1/|S|) * sum of negsample_loss over the batch entries of one set.
Tensor set_loss_negsampled(const VecMap& u, const VecMap& v, const StyleSet& s,
                           const PairBatch& batch, Tape* tape = nullptr);

}  // namespace setvec
