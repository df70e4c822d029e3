#pragma once
// Dense kernels, softmax, seeded categorical sampling, finite-difference oracle.
// Everything is plain 64-bit math, single-threaded, and deterministic given an
// explicit Rng value — the whole suite pins byte-level reproducibility on that.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dab {

using RealVec = std::vector<double>;
using TokenSeq = std::vector<std::int32_t>;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// Call-count instrumentation threaded through the model and the constraints.
// The cost asymmetry between the discrete sampler (zero LM backwards) and the
// continuous baseline (>= 1 per step) is asserted on these, not on wall clock.
struct OpCounters {
  std::int64_t lm_forward = 0;
  std::int64_t lm_backward = 0;
  std::int64_t constraint_forward = 0;
  std::int64_t constraint_backward = 0;
};

// --- random numbers ---------------------------------------------------------

// Counter-based splitmix-style generator. State is (seed, counter), so equal
// seeds plus equal call sequences give equal outputs on any platform. fork()
// depends on the seed only — children are decorrelated and independent of how
// many draws the parent has made, which keeps chain k's stream stable no
// matter how many chains run beside it.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), counter_(0) {}

  std::uint64_t next_u64() {
    std::uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1), 53-bit resolution
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Box-Muller, cosine branch only: always two uniforms per draw, no cached
  // half-pair, so the draw count is a pure function of the call count.
  double next_gaussian() {
    const double u1 = 1.0 - next_unit();  // (0, 1]: keeps log() finite
    const double u2 = next_unit();
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  Rng fork(std::uint64_t stream) const {
    std::uint64_t z = (seed_ ^ 0xD2B74407B1CE6E93ull) + (stream + 1) * 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return Rng(z ^ (z >> 31));
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

// --- dense matrix -----------------------------------------------------------

// Row-major dense matrix of doubles. No views, no broadcasting: at this scale
// copying rows is cheaper than getting aliasing subtly wrong.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  RealVec row_vec(std::size_t r) const {
    return RealVec(data_.begin() + r * cols_, data_.begin() + (r + 1) * cols_);
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}
inline double l2_norm(const RealVec& v) { return l2_norm(std::span<const double>(v)); }

// --- probability vectors ----------------------------------------------------

// Validated categorical distribution: nonnegative entries summing to 1
// within 1e-9.
class ProbVec {
 public:
  explicit ProbVec(RealVec values) : values_(std::move(values)) {
    require(!values_.empty(), "ProbVec: empty");
    double sum = 0.0;
    for (double p : values_) {
      require(std::isfinite(p) && p >= 0.0, "ProbVec: entries must be finite and >= 0");
      sum += p;
    }
    require(std::abs(sum - 1.0) <= 1e-9, "ProbVec: entries must sum to 1 within 1e-9");
  }

  const RealVec& values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  std::size_t size() const { return values_.size(); }

 private:
  RealVec values_;
};

inline ProbVec softmax(const RealVec& v, double temperature) {
  require(temperature > 0.0, "softmax: temperature must be > 0");
  require(!v.empty(), "softmax: empty input");
  require(all_finite(v), "softmax: non-finite input");
  RealVec scaled(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) scaled[i] = v[i] / temperature;
  double m = scaled[0];
  for (double x : scaled) m = std::max(m, x);
  double z = 0.0;
  RealVec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(scaled[i] - m);
    z += out[i];
  }
  for (double& x : out) x /= z;
  return ProbVec(std::move(out));
}

// log-probability vector from unnormalized scores; idempotent (already-
// normalized input comes back unchanged, since its log-sum-exp is 0)
inline RealVec log_softmax(const RealVec& v) {
  require(!v.empty(), "log_softmax: empty input");
  require(all_finite(v), "log_softmax: non-finite input");
  double m = v[0];
  for (double x : v) m = std::max(m, x);
  double z = 0.0;
  for (double x : v) z += std::exp(x - m);
  const double lse = m + std::log(z);
  RealVec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
  return out;
}

// Inverse-CDF draw using exactly one uniform.
inline std::int32_t sample_categorical(const ProbVec& p, Rng& rng) {
  const double u = rng.next_unit();
  double acc = 0.0;
  const std::size_t n = p.size();
  for (std::size_t i = 0; i < n; ++i) {
    acc += p[i];
    if (u < acc) return static_cast<std::int32_t>(i);
  }
  // u landed in the tail rounding slack; return the last index with mass.
  for (std::size_t i = n; i-- > 0;)
    if (p[i] > 0.0) return static_cast<std::int32_t>(i);
  return static_cast<std::int32_t>(n - 1);
}

// --- finite differences -----------------------------------------------------

// Central-difference gradient oracle for scalar functions of a matrix. Slow on
// purpose; this is the independent check the analytic gradients are held to.
template <typename F>
Matrix finite_difference_grad(F&& f, const Matrix& x, double h) {
  require(h >= 1e-6 && h <= 1e-3, "finite_difference_grad: h must be in [1e-6, 1e-3]");
  Matrix g(x.rows(), x.cols());
  Matrix probe = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double keep = probe(r, c);
      probe(r, c) = keep + h;
      const double up = f(probe);
      probe(r, c) = keep - h;
      const double down = f(probe);
      probe(r, c) = keep;
      g(r, c) = (up - down) / (2.0 * h);
    }
  }
  return g;
}

}  // namespace dab
