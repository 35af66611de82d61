#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace subclone {

// Dense row-major float32 tensor. The last axis is the embedding axis by
// convention. Values are immutable by convention once a tensor has been
// handed off; kernels return fresh tensors.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<int64_t> shape_, std::vector<float> data_);

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, float value);
  static Tensor of(std::vector<int64_t> shape, std::initializer_list<float> values);

  int rank() const { return static_cast<int>(shape.size()); }
  int64_t numel() const;
  int64_t extent(int axis) const { return shape[static_cast<size_t>(axis)]; }

  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }

  // Element access for 1-3d tensors; test/assembly convenience, not a kernel.
  float& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  float at(int64_t i) const { return data[static_cast<size_t>(i)]; }
  float& at(int64_t i, int64_t j);
  float at(int64_t i, int64_t j) const;
  float& at(int64_t i, int64_t j, int64_t k);
  float at(int64_t i, int64_t j, int64_t k) const;

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  std::string shape_str() const;  // e.g. "2x3x4"
};

// ---- kernels ----
// All kernels use a fixed reduction order: results are bit-identical for
// identical inputs regardless of thread count.

// Standard matrix product of rank-2 tensors, [m x k] * [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);

// Rank-2 transpose.
Tensor transpose(const Tensor& a);

// Softmax over the last axis with max-subtraction. Rejects non-finite input.
Tensor softmax_rows(const Tensor& t);

// Per-slice normalization over the last axis followed by gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = 1e-5f);

// Rank-3 [B x T x d] -> [d]: mean of |value| over the two leading axes.
Tensor mean_abs_over_leading(const Tensor& t);

namespace detail {

// c[m x n] = a[m x k] * b[k x n], raw row-major buffers. c is overwritten.
// Parallelized over rows of c; the k-loop order is fixed per output row.
void matmul_f32(const float* a, const float* b, float* c, int64_t m, int64_t k,
                int64_t n);

// c[m x n] += a[m x k] * b[k x n].
void matmul_acc_f32(const float* a, const float* b, float* c, int64_t m,
                    int64_t k, int64_t n);

void transpose_f32(const float* a, float* at, int64_t rows, int64_t cols);

}  // namespace detail

}  // namespace subclone
