#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "maco/tensor.hpp"

// Differentiable operations over Var. Every op records its backward rule on the
// tape of its first operand. Matrices are rank-2 row-major; "rows" ops treat a
// tensor as [rows x cols].
namespace maco::ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);                       // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var mul_scalar(Var a, Var s);                // s has one element
Var add_row_vector(Var a, Var bias);         // a[m x n] + bias[n] broadcast over rows
Var mul_rows(Var a, Var w);                  // row i of a[m x n] scaled by w[i]

/// [m x k] x [k x n] -> [m x n].
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var reciprocal(Var a);
/// log(1 + e^x), evaluated as x + log1p(e^-x) for x > 0.
Var softplus(Var a);
Var gelu(Var a);                             // erf form

Var sum(Var a);                              // -> [1]
Var mean(Var a);                             // -> [1]
Var row_sum(Var a);                          // [m x n] -> [m]

/// Row-wise softmax of a / temperature with max subtraction.
Var softmax_rows(Var a, double temperature = 1.0);
Var log_softmax_rows(Var a);
Var diag(Var a);                             // square [n x n] -> [n]

Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);
Var l2_normalize_rows(Var x, double eps = 1e-12);

Var gather_rows(Var a, std::span<const std::size_t> rows);
/// Output has n_rows rows; row rows[i] is a's row i, every other row is fill (one row).
Var scatter_rows(Var a, std::span<const std::size_t> rows, std::size_t n_rows, Var fill);
Var concat_rows(std::span<const Var> parts);
/// [groups*len x c] -> [groups x c], mean over each consecutive block of len rows.
Var segment_mean(Var a, std::size_t len);

/// Align-corners bilinear resampling of an [h x w] map.
Var bilinear_upsample(Var a, std::size_t out_h, std::size_t out_w);

/// Same value, zero gradient to the source.
Var detach(Var a);

/// Multi-head scaled dot-product attention over `batch` independent sequences
/// of `seq` rows each. q, k, v are [batch*seq x c]; key_mask (optional, batch*seq
/// entries, 1 = attend) excludes padded keys.
Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads,
              std::span<const std::uint8_t> key_mask = {});

}  // namespace maco::ops

namespace maco {

// Plain-tensor kernels shared with non-differentiable paths.
void matmul_into(std::span<const double> a, std::span<const double> b, std::span<double> out,
                 std::size_t m, std::size_t k, std::size_t n);
double softplus_scalar(double x);
Tensor bilinear_upsample(const Tensor& map, std::size_t out_h, std::size_t out_w);
Tensor softmax(const Tensor& x, double temperature);

}  // namespace maco
