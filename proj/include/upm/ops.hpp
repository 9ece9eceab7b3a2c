#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "upm/tensor.hpp"

/// Differentiable operations. Matrix ops take rank-2 tensors; row-wise ops
/// treat a tensor of shape [..., n] as a stack of rows of length n.
namespace upm {

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ for a [m×k], b [n×k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// Divides every element by the single element of `s`.
Tensor div_scalar(const Tensor& x, const Tensor& s);
Tensor exp(const Tensor& x);
Tensor gelu(const Tensor& x);

/// x [m×n] plus a length-n row added to every row.
Tensor add_row(const Tensor& x, const Tensor& row);
/// x [(g·r)×n] plus `tile` [r×n] added to each consecutive block of r rows.
Tensor add_tiled(const Tensor& x, const Tensor& tile);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);

// Normalization.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
/// Normalizes each row of length d, then applies gamma/beta (each of size d).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
/// Scales every row to unit L2 norm. Rows with norm < 1e-12 raise DegenerateInputError.
Tensor l2_normalize_rows(const Tensor& x);

// Row manipulation (all copies).
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);
Tensor concat_rows(const std::vector<Tensor>& parts);
/// Means of consecutive row groups: x [R×n] with group sizes summing to R → [G×n].
Tensor segment_mean_rows(const Tensor& x, std::span<const std::size_t> group_sizes);
/// Inserts `token` (n values) before every block of `group` rows of x [(g·group)×n].
Tensor prepend_token(const Tensor& x, const Tensor& token, std::size_t group);

// Model building blocks.
/// Multi-head self-attention over independent sequences of `seq_len` tokens.
/// qkv is [(S·seq_len)×3d] laid out as [q | k | v]; returns [(S·seq_len)×d].
Tensor multi_head_attention(const Tensor& qkv, std::size_t seq_len, std::size_t heads);
/// Mean of table rows per bag; table [V×d], each bag a non-empty list of row ids.
Tensor embedding_bag_mean(const Tensor& table, const std::vector<std::vector<std::size_t>>& bags);

// Losses.
/// Σ_rows Σ_c target[r,c]·(logsumexp_r − logits[r,c]) where the log-sum-exp
/// runs over unmasked entries only. Masked entries must carry zero target.
/// `mask` holds 1 for entries that take part, 0 otherwise (empty: all take part).
Tensor soft_cross_entropy(const Tensor& logits, std::span<const double> targets,
                          std::span<const unsigned char> mask = {});
/// Σ over (i,j) pairs of [−log softmax_row_i(logits)_j − log softmax_col_j(logits)_i].
Tensor pair_cross_entropy(const Tensor& logits,
                          std::span<const std::pair<std::size_t, std::size_t>> pairs);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace upm
