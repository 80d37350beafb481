#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <ranges>
#include <span>
#include <vector>

#include "lazykv/errors.hpp"

namespace lazykv {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, "Matrix: data length must equal rows*cols");
  }
  Matrix(std::initializer_list<std::initializer_list<double>> init) {
    rows_ = init.size();
    cols_ = rows_ == 0 ? 0 : init.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : init) {
      require(r.size() == cols_, "Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  void append_row(std::span<const double> r) {
    if (rows_ == 0 && data_.empty()) cols_ = r.size();
    require(r.size() == cols_, "Matrix::append_row: width mismatch");
    data_.insert(data_.end(), r.begin(), r.end());
    ++rows_;
  }

  // Keeps only the listed rows, in the given order.
  void keep_rows(std::span<const std::size_t> which) {
    std::vector<double> next;
    next.reserve(which.size() * cols_);
    for (std::size_t r : which) {
      require(r < rows_, "Matrix::keep_rows: row out of range");
      auto src = row(r);
      next.insert(next.end(), src.begin(), src.end());
    }
    data_ = std::move(next);
    rows_ = which.size();
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "matmul: a.cols must equal b.rows");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto src = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * src[j];
    }
  }
  return out;
}

// Row vector times matrix, written into `out` (width m.cols()).
inline void vecmat(std::span<const double> x, const Matrix& m, std::span<double> out) {
  require(x.size() == m.rows() && out.size() == m.cols(), "vecmat: shape mismatch");
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double xk = x[k];
    if (xk == 0.0) continue;
    auto src = m.row(k);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += xk * src[j];
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Matrix out = a;
  auto o = out.data();
  auto s = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += s[i];
  return out;
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "subtract: shape mismatch");
  Matrix out = a;
  auto o = out.data();
  auto s = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= s[i];
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix scaled(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline double frobenius_norm(const Matrix& m) { return l2_norm(m.data()); }

// ||m||_{2,inf}: largest row l2 norm.
inline double row_2inf_norm(const Matrix& m) {
  double best = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) best = std::max(best, l2_norm(m.row(i)));
  return best;
}

// Which key positions each query row may see.
struct MaskSpec {
  enum class Kind { Causal, LazySet };

  Kind kind = Kind::Causal;
  // LazySet only: ascending allowed key positions for each row.
  std::vector<std::vector<std::size_t>> allowed;

  static MaskSpec causal() { return {}; }
  static MaskSpec lazy_set(std::vector<std::vector<std::size_t>> rows) {
    return {Kind::LazySet, std::move(rows)};
  }

  // Allowed key positions of `row`, materialized.
  std::vector<std::size_t> allowed_for(std::size_t row) const {
    if (kind == Kind::Causal) {
      std::vector<std::size_t> all(row + 1);
      for (std::size_t j = 0; j <= row; ++j) all[j] = j;
      return all;
    }
    require(row < allowed.size(), "MaskSpec: row outside lazy-set mask");
    return allowed[row];
  }

  // Throws unless the mask is usable for an n_rows x n_cols score matrix.
  void validate(std::size_t n_rows, std::size_t n_cols) const {
    if (kind == Kind::Causal) {
      require(n_rows == 0 || n_cols >= n_rows, "MaskSpec: causal mask needs cols >= rows");
      return;
    }
    require(allowed.size() == n_rows, "MaskSpec: lazy-set mask row count mismatch");
    for (std::size_t i = 0; i < n_rows; ++i) {
      const auto& a = allowed[i];
      require(!a.empty(), "MaskSpec: empty allowed set");
      for (std::size_t k = 0; k < a.size(); ++k) {
        require(a[k] <= i && a[k] < n_cols, "MaskSpec: allowed index outside {0..row}");
        require(k == 0 || a[k - 1] < a[k], "MaskSpec: allowed set must be ascending and unique");
      }
    }
  }
};

inline Matrix masked_row_softmax(const Matrix& scores, const MaskSpec& mask) {
  mask.validate(scores.rows(), scores.cols());
  Matrix out(scores.rows(), scores.cols());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const auto idx = mask.allowed_for(i);
    double mx = scores(i, idx.front());
    for (std::size_t j : idx) mx = std::max(mx, scores(i, j));
    double sum = 0.0;
    for (std::size_t j : idx) {
      const double e = std::exp(scores(i, j) - mx);
      out(i, j) = e;
      sum += e;
    }
    for (std::size_t j : idx) out(i, j) /= sum;
  }
  return out;
}

inline std::vector<double> masked_row_logsumexp(const Matrix& scores, const MaskSpec& mask) {
  mask.validate(scores.rows(), scores.cols());
  std::vector<double> out(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const auto idx = mask.allowed_for(i);
    double mx = scores(i, idx.front());
    for (std::size_t j : idx) mx = std::max(mx, scores(i, j));
    double sum = 0.0;
    for (std::size_t j : idx) sum += std::exp(scores(i, j) - mx);
    out[i] = mx + std::log(sum);
  }
  return out;
}

// log-sum-exp of a plain vector of scores; used for kept-subset recomputation.
inline double logsumexp(std::span<const double> v) {
  require(!v.empty(), "logsumexp: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - mx);
  return mx + std::log(sum);
}

// Fused single-query attention over the key/value rows named by `indices`:
// out = softmax(scale * q.K[idx]^T) V[idx]. Returns the log-sum-exp of the
// scaled scores. `scratch` is reused between calls to avoid reallocations.
template <std::ranges::input_range Indices>
double attend_row(std::span<const double> q, const Matrix& keys, const Matrix& values,
                  const Indices& indices, double scale, std::span<double> out,
                  std::vector<double>& scratch) {
  require(q.size() == keys.cols() && out.size() == values.cols(), "attend_row: width mismatch");
  scratch.clear();
  double mx = 0.0;
  bool first = true;
  for (std::size_t j : indices) {
    const double s = scale * dot(q, keys.row(j));
    scratch.push_back(s);
    if (first || s > mx) mx = s;
    first = false;
  }
  require(!first, "attend_row: empty allowed set");
  std::fill(out.begin(), out.end(), 0.0);
  double sum = 0.0;
  std::size_t k = 0;
  for (std::size_t j : indices) {
    const double w = std::exp(scratch[k++] - mx);
    sum += w;
    auto v = values.row(j);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += w * v[c];
  }
  const double inv = 1.0 / sum;
  for (double& o : out) o *= inv;
  return mx + std::log(sum);
}

}  // namespace lazykv
