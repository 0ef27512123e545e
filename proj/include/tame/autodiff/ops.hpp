#pragma once

#include "tame/autodiff/tensor.hpp"

#include <cstddef>
#include <vector>

// Differentiable kernels. Each one registers a node whose VJP is exact
// (subgradient 0 at the kinks of |x| and max(x, 0)).
namespace tame::ad {

Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// Adds a 1xC row to every row of a.
Var add_row(const Var& a, const Var& row);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// axis 1 normalizes each row, axis 0 each column.
Var softmax(const Var& a, int axis = 1);
Var log(const Var& a);
Var exp(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);

Var sum(const Var& a);
// axis 0 reduces over rows (result 1xC), axis 1 over columns (result Rx1).
Var sum(const Var& a, int axis);
Var mean(const Var& a);
Var mean(const Var& a, int axis);
// Unbiased variance (denominator n-1) along an axis; needs n >= 2.
Var variance(const Var& a, int axis);

Var l1_distance(const Var& a, const Var& b);
// Cosine of the two tensors flattened to vectors.
Var cosine_similarity(const Var& a, const Var& b);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

// Row-wise layer normalization with 1xC gain and bias.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(const Var& x, std::vector<Index> rows);
// Output (rows x cols) where element k reads x's flat element index[k];
// a negative index yields 0.
Var gather(const Var& x, Index rows, Index cols, std::vector<std::ptrdiff_t> index);
Var reshape(const Var& x, Index rows, Index cols);
// Mean over consecutive blocks of `segment` rows: (N x C) -> (N/segment x C).
Var segment_mean_rows(const Var& x, Index segment);

// Multi-head self-attention over a stack of sequences of equal length.
// qkv is (B*S) x 3D holding [Q | K | V]; output is (B*S) x D.
Var attention(const Var& qkv, Index seq_len, Index heads);

// Mean softmax cross-entropy of (N x K) logits against N labels.
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

}  // namespace tame::ad
