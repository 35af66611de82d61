#include "subclone/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "subclone/error.hpp"

namespace subclone {

namespace {

int64_t checked_numel(const std::vector<int64_t>& shape) {
  if (shape.empty()) {
    throw ShapeError("tensor rank must be >= 1");
  }
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e < 1) {
      throw ShapeError("tensor extents must be >= 1");
    }
    n *= e;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> shape_, std::vector<float> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
  if (checked_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("tensor data size does not match shape " + shape_str());
  }
}

Tensor Tensor::zeros(std::vector<int64_t> shape) {
  int64_t n = checked_numel(shape);
  Tensor t;
  t.shape = std::move(shape);
  t.data.assign(static_cast<size_t>(n), 0.0f);
  return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, float value) {
  Tensor t = zeros(std::move(shape));
  for (float& v : t.data) v = value;
  return t;
}

Tensor Tensor::of(std::vector<int64_t> shape, std::initializer_list<float> values) {
  return Tensor(std::move(shape), std::vector<float>(values));
}

int64_t Tensor::numel() const {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

float& Tensor::at(int64_t i, int64_t j) {
  return data[static_cast<size_t>(i * shape[1] + j)];
}
float Tensor::at(int64_t i, int64_t j) const {
  return data[static_cast<size_t>(i * shape[1] + j)];
}
float& Tensor::at(int64_t i, int64_t j, int64_t k) {
  return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
}
float Tensor::at(int64_t i, int64_t j, int64_t k) const {
  return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  return os.str();
}

// ---- kernels ----

namespace detail {

void matmul_f32(const float* a, const float* b, float* c, int64_t m, int64_t k,
                int64_t n) {
  std::memset(c, 0, static_cast<size_t>(m * n) * sizeof(float));
  matmul_acc_f32(a, b, c, m, k, n);
}

void matmul_acc_f32(const float* a, const float* b, float* c, int64_t m,
                    int64_t k, int64_t n) {
  // ikj order: the inner j-loop has no cross-lane reduction, so it
  // vectorizes under strict FP semantics, and each c row sees a fixed
  // k-order regardless of thread schedule.
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    const float* arow = a + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const float av = arow[kk];
      const float* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

void transpose_f32(const float* a, float* at, int64_t rows, int64_t cols) {
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) {
      at[j * rows + i] = a[i * cols + j];
    }
  }
}

}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 tensors, got " + a.shape_str() +
                     " and " + b.shape_str());
  }
  if (a.shape[1] != b.shape[0]) {
    throw ShapeError("matmul inner extents disagree: " + a.shape_str() +
                     " vs " + b.shape_str());
  }
  Tensor c = Tensor::zeros({a.shape[0], b.shape[1]});
  detail::matmul_acc_f32(a.ptr(), b.ptr(), c.ptr(), a.shape[0], a.shape[1],
                         b.shape[1]);
  return c;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) {
    throw ShapeError("transpose expects a rank-2 tensor, got " + a.shape_str());
  }
  Tensor t = Tensor::zeros({a.shape[1], a.shape[0]});
  detail::transpose_f32(a.ptr(), t.ptr(), a.shape[0], a.shape[1]);
  return t;
}

Tensor softmax_rows(const Tensor& t) {
  for (float v : t.data) {
    if (!std::isfinite(v)) {
      throw NumericError("softmax_rows: non-finite input value");
    }
  }
  const int64_t n = t.shape.back();
  const int64_t rows = t.numel() / n;
  Tensor out = Tensor::zeros(t.shape);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = t.ptr() + r * n;
    float* y = out.ptr() + r * n;
    float mx = x[0];
    for (int64_t j = 1; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
    float sum = 0.0f;
    for (int64_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const float inv = 1.0f / sum;
    for (int64_t j = 0; j < n; ++j) y[j] *= inv;
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps) {
  const int64_t d = x.shape.back();
  if (gain.rank() != 1 || bias.rank() != 1 || gain.shape[0] != d ||
      bias.shape[0] != d) {
    throw ShapeError("layer_norm: gain/bias must be rank-1 of extent " +
                     std::to_string(d) + ", got " + gain.shape_str() + " and " +
                     bias.shape_str());
  }
  const int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x.ptr() + r * d;
    float* yr = out.ptr() + r * d;
    float mean = 0.0f;
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (int64_t j = 0; j < d; ++j) {
      const float c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<float>(d);
    const float rstd = 1.0f / std::sqrt(var + eps);
    for (int64_t j = 0; j < d; ++j) {
      yr[j] = (xr[j] - mean) * rstd * gain.data[static_cast<size_t>(j)] +
              bias.data[static_cast<size_t>(j)];
    }
  }
  return out;
}

Tensor mean_abs_over_leading(const Tensor& t) {
  if (t.rank() != 3) {
    throw ShapeError("mean_abs_over_leading expects rank-3 input, got " +
                     t.shape_str());
  }
  const int64_t rows = t.shape[0] * t.shape[1];
  const int64_t d = t.shape[2];
  std::vector<double> acc(static_cast<size_t>(d), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = t.ptr() + r * d;
    for (int64_t j = 0; j < d; ++j) {
      acc[static_cast<size_t>(j)] += std::fabs(static_cast<double>(x[j]));
    }
  }
  Tensor out = Tensor::zeros({d});
  for (int64_t j = 0; j < d; ++j) {
    out.data[static_cast<size_t>(j)] =
        static_cast<float>(acc[static_cast<size_t>(j)] / static_cast<double>(rows));
  }
  return out;
}

}  // namespace subclone
