#pragma once

// Dense row-major tensors with tape-based reverse-mode autodiff.
//
// Every op is pure: it never mutates its inputs and returns a fresh tensor.
// When any input is grad-tracked the result carries an edge back to its
// parents; backward(loss) walks the graph once in reverse topological order
// and then consumes it. Leaf tensors (parameters) keep their gradients until
// the optimizer clears them. A graph is confined to one thread; independent
// forwards over shared frozen leaves are safe.
//
// Values larger than rank 2 are treated as stacks of matrices: matmul and the
// elementwise ops broadcast only over leading dimensions, anything else needs
// an explicit reshape.

#include <Eigen/Core>

#include <cmath>
#include <complex>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <vector>

#include "vitlite/common.hpp"

namespace vitlite {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

enum class Dtype { F32, F64 };

template <class T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::F32; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::F64; }

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until backward touches this node
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this->grad and accumulates into the parents' grads. Owned by the
  // node itself, so it must not capture an owning reference back to it.
  std::function<void(TensorNode&)> backprop;

  bool is_leaf() const { return parents.empty() && !backprop; }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }

  static Tensor filled(Shape shape, T v) {
    check_shape(shape);
    auto n = std::make_shared<TensorNode<T>>();
    n->value.assign(static_cast<size_t>(shape_numel(shape)), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<T> data) {
    check_shape(shape);
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
    std::normal_distribution<double> dist(0.0, 1.0);
    auto t = zeros(std::move(shape));
    for (auto& v : t.node_->value) v = mean + stddev * static_cast<T>(dist(rng));
    return t;
  }

  // Normal(0, std) resampled until within two standard deviations.
  static Tensor trunc_normal(Shape shape, Rng& rng, T stddev) {
    std::normal_distribution<double> dist(0.0, 1.0);
    auto t = zeros(std::move(shape));
    for (auto& v : t.node_->value) {
      double z = dist(rng);
      while (std::abs(z) > 2.0) z = dist(rng);
      v = stddev * static_cast<T>(z);
    }
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    auto t = zeros(std::move(shape));
    for (auto& v : t.node_->value) v = static_cast<T>(dist(rng));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  Dtype dtype() const { return dtype_of<T>(); }

  const std::vector<T>& data() const { return node_->value; }
  // Mutable access for optimizers, initializers, and checkpoint loading only;
  // ops never mutate existing values.
  std::vector<T>& data_mut() { return node_->value; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  T at(std::initializer_list<int> idx) const {
    return node_->value[static_cast<size_t>(flat_index(idx))];
  }

  bool requires_grad() const { return node_->requires_grad; }

  Tensor& set_requires_grad(bool v) {
    if (!node_->is_leaf()) throw ContractError("requires_grad may only be toggled on leaf tensors");
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }

  Tensor grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return Tensor::from(node_->shape, node_->grad);
  }

  const std::vector<T>& grad_data() const {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return node_->grad;
  }

  void zero_grad() { node_->grad.clear(); }

  // Same values, detached from any graph.
  Tensor detach() const { return Tensor::from(node_->shape, node_->value); }

  std::shared_ptr<TensorNode<T>>& node() { return node_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

 private:
  static void check_shape(const Shape& s) {
    for (int d : s)
      if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(s));
  }

  int64_t flat_index(std::initializer_list<int> idx) const {
    const Shape& s = node_->shape;
    if (idx.size() != s.size()) throw DimensionError("index rank mismatch");
    int64_t flat = 0;
    size_t k = 0;
    for (int i : idx) {
      if (i < 0 || i >= s[k]) throw DimensionError("index out of range");
      flat = flat * s[k] + i;
      ++k;
    }
    return flat;
  }

  std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <class T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                      std::vector<NodePtr<T>> parents,
                      std::function<void(TensorNode<T>&)> backprop) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool track = false;
  for (const auto& p : parents)
    if (p->requires_grad) track = true;
  if (track) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor<T>(std::move(n));
}

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;

// Splits a shape into batch/rows/cols for stacked-matrix ops.
inline void matrix_view(const Shape& s, int64_t& batch, int& rows, int& cols) {
  if (s.size() < 2) throw DimensionError("expected rank >= 2, got " + shape_str(s));
  rows = s[s.size() - 2];
  cols = s[s.size() - 1];
  batch = 1;
  for (size_t i = 0; i + 2 < s.size(); ++i) batch *= s[i];
}

}  // namespace detail

// ----------------------------- matmul -----------------------------

// a: [*, m, k] with b either [k, n] (shared) or [*, k, n] (same leading dims).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  int64_t batch_a, batch_b;
  int m, k, kb, n;
  matrix_view(sa, batch_a, m, k);
  matrix_view(sb, batch_b, kb, n);
  const bool shared_b = sb.size() == 2 && sa.size() >= 2;
  if (!shared_b) {
    if (Shape(sa.begin(), sa.end() - 2) != Shape(sb.begin(), sb.end() - 2))
      throw DimensionError("matmul batch dims differ: " + shape_str(sa) + " vs " + shape_str(sb));
  }
  if (k != kb)
    throw DimensionError("matmul inner extents differ: " + shape_str(sa) + " vs " + shape_str(sb));

  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<size_t>(batch_a) * m * n);

  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (int64_t i = 0; i < batch_a; ++i) {
    ECMap<T> ma(pa + i * m * k, m, k);
    ECMap<T> mb(pb + (shared_b ? 0 : i * static_cast<int64_t>(k) * n), k, n);
    EMap<T> mo(out.data() + i * m * n, m, n);
    mo.noalias() = ma * mb;
  }

  auto an = a.node();
  auto bn = b.node();
  return make_result<T>(
      std::move(out_shape), std::move(out), "matmul", {an, bn},
      [an, bn, batch_a, m, k, n, shared_b](TensorNode<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          for (int64_t i = 0; i < batch_a; ++i) {
            ECMap<T> mg(g + i * m * n, m, n);
            ECMap<T> mb(bn->value.data() + (shared_b ? 0 : i * static_cast<int64_t>(k) * n), k, n);
            EMap<T> ga(an->grad.data() + i * m * k, m, k);
            ga.noalias() += mg * mb.transpose();
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int64_t i = 0; i < batch_a; ++i) {
            ECMap<T> mg(g + i * m * n, m, n);
            ECMap<T> ma(an->value.data() + i * m * k, m, k);
            EMap<T> gb(bn->grad.data() + (shared_b ? 0 : i * static_cast<int64_t>(k) * n), k, n);
            gb.noalias() += ma.transpose() * mg;
          }
        }
      });
}

// ----------------------------- elementwise -----------------------------

namespace detail {

// b broadcasts over a's leading dims when its shape is a suffix of a's.
template <class T>
int64_t suffix_repeat(const Shape& sa, const Shape& sb) {
  if (sb.size() > sa.size() ||
      !std::equal(sb.begin(), sb.end(), sa.end() - static_cast<int64_t>(sb.size())))
    throw DimensionError("shape " + shape_str(sb) + " is not a suffix of " + shape_str(sa));
  return shape_numel(sa) / shape_numel(sb);
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  const int64_t reps = suffix_repeat<T>(a.shape(), b.shape());
  const int64_t nb = shape_numel(b.shape());
  std::vector<T> out(a.data());
  for (int64_t r = 0; r < reps; ++r)
    for (int64_t i = 0; i < nb; ++i) out[static_cast<size_t>(r * nb + i)] += b.data()[static_cast<size_t>(i)];
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>(a.shape(), std::move(out), "add", {an, bn},
                        [an, bn, reps, nb](TensorNode<T>& self) {
                          if (an->requires_grad) {
                            an->ensure_grad();
                            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
                          }
                          if (bn->requires_grad) {
                            bn->ensure_grad();
                            for (int64_t r = 0; r < reps; ++r)
                              for (int64_t i = 0; i < nb; ++i)
                                bn->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(r * nb + i)];
                          }
                        });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail;
  const int64_t reps = suffix_repeat<T>(a.shape(), b.shape());
  const int64_t nb = shape_numel(b.shape());
  std::vector<T> out(a.data());
  for (int64_t r = 0; r < reps; ++r)
    for (int64_t i = 0; i < nb; ++i) out[static_cast<size_t>(r * nb + i)] *= b.data()[static_cast<size_t>(i)];
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>(a.shape(), std::move(out), "mul", {an, bn},
                        [an, bn, reps, nb](TensorNode<T>& self) {
                          if (an->requires_grad) {
                            an->ensure_grad();
                            for (int64_t r = 0; r < reps; ++r)
                              for (int64_t i = 0; i < nb; ++i) {
                                const size_t j = static_cast<size_t>(r * nb + i);
                                an->grad[j] += self.grad[j] * bn->value[static_cast<size_t>(i)];
                              }
                          }
                          if (bn->requires_grad) {
                            bn->ensure_grad();
                            for (int64_t r = 0; r < reps; ++r)
                              for (int64_t i = 0; i < nb; ++i) {
                                const size_t j = static_cast<size_t>(r * nb + i);
                                bn->grad[static_cast<size_t>(i)] += self.grad[j] * an->value[j];
                              }
                          }
                        });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  std::vector<T> out(x.data());
  for (auto& v : out) v *= c;
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), "scale", {xn},
                                [xn, c](TensorNode<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += c * self.grad[i];
                                });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  std::vector<T> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    const double v = static_cast<double>(x.data()[i]);
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), "gelu", {xn},
                                [xn](TensorNode<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (size_t i = 0; i < self.grad.size(); ++i) {
                                    const double v = static_cast<double>(xn->value[i]);
                                    const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                                    const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                                    xn->grad[i] += self.grad[i] * static_cast<T>(cdf + v * pdf);
                                  }
                                });
}

// Mean squared error over all elements.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mse shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t n = a.numel();
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.data()[static_cast<size_t>(i)]) - static_cast<double>(b.data()[static_cast<size_t>(i)]);
    acc += d * d;
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(
      {1}, {static_cast<T>(acc / static_cast<double>(n))}, "mse", {an, bn},
      [an, bn, n](TensorNode<T>& self) {
        const T g = self.grad[0] * T(2) / static_cast<T>(n);
        if (an->requires_grad) {
          an->ensure_grad();
          for (int64_t i = 0; i < n; ++i)
            an->grad[static_cast<size_t>(i)] += g * (an->value[static_cast<size_t>(i)] - bn->value[static_cast<size_t>(i)]);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int64_t i = 0; i < n; ++i)
            bn->grad[static_cast<size_t>(i)] += g * (bn->value[static_cast<size_t>(i)] - an->value[static_cast<size_t>(i)]);
        }
      });
}

// ----------------------------- softmax / layernorm -----------------------------

namespace detail {

inline void axis_strides(const Shape& s, int axis, int64_t& outer, int64_t& len, int64_t& inner) {
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("axis out of range for shape " + shape_str(s));
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  len = s[static_cast<size_t>(axis)];
  for (int i = axis + 1; i < r; ++i) inner *= s[static_cast<size_t>(i)];
}

}  // namespace detail

// Row-max subtraction keeps the exponentials in range.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  int64_t outer, len, inner;
  detail::axis_strides(x.shape(), axis, outer, len, inner);
  std::vector<T> out(x.data().size());
  const T* in = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t c = 0; c < inner; ++c) {
      const int64_t base = o * len * inner + c;
      T mx = in[base];
      for (int64_t i = 1; i < len; ++i) mx = std::max(mx, in[base + i * inner]);
      double denom = 0;
      for (int64_t i = 0; i < len; ++i) {
        const T e = std::exp(in[base + i * inner] - mx);
        out[static_cast<size_t>(base + i * inner)] = e;
        denom += static_cast<double>(e);
      }
      for (int64_t i = 0; i < len; ++i) out[static_cast<size_t>(base + i * inner)] /= static_cast<T>(denom);
    }
  auto xn = x.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), "softmax", {xn},
      [xn, outer, len, inner](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t c = 0; c < inner; ++c) {
            const int64_t base = o * len * inner + c;
            double dot = 0;
            for (int64_t i = 0; i < len; ++i) {
              const size_t j = static_cast<size_t>(base + i * inner);
              dot += static_cast<double>(self.grad[j]) * static_cast<double>(self.value[j]);
            }
            for (int64_t i = 0; i < len; ++i) {
              const size_t j = static_cast<size_t>(base + i * inner);
              xn->grad[j] += self.value[j] * (self.grad[j] - static_cast<T>(dot));
            }
          }
      });
}

// Normalizes the last axis to zero mean / unit variance, then applies gamma, beta.
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps = T(1e-6)) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("layernorm needs rank >= 1");
  const int64_t d = s.back();
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layernorm gamma/beta must have length " + std::to_string(d));
  const int64_t rows = shape_numel(s) / d;
  std::vector<T> out(x.data().size());
  std::vector<T> xhat(x.data().size());
  std::vector<T> inv_std(static_cast<size_t>(rows));
  const T* in = x.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = in + r * d;
    double mean = 0;
    for (int64_t i = 0; i < d; ++i) mean += static_cast<double>(row[i]);
    mean /= static_cast<double>(d);
    double var = 0;
    for (int64_t i = 0; i < d; ++i) {
      const double dv = static_cast<double>(row[i]) - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[static_cast<size_t>(r)] = istd;
    for (int64_t i = 0; i < d; ++i) {
      const size_t j = static_cast<size_t>(r * d + i);
      xhat[j] = (row[i] - static_cast<T>(mean)) * istd;
      out[j] = xhat[j] * gamma.data()[static_cast<size_t>(i)] + beta.data()[static_cast<size_t>(i)];
    }
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return detail::make_result<T>(
      s, std::move(out), "layernorm", {xn, gn, bn},
      [xn, gn, bn, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<T>& self) {
        for (int64_t r = 0; r < rows; ++r) {
          const int64_t base = r * d;
          if (gn->requires_grad || bn->requires_grad) {
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int64_t i = 0; i < d; ++i) {
              const size_t j = static_cast<size_t>(base + i);
              if (gn->requires_grad) gn->grad[static_cast<size_t>(i)] += self.grad[j] * xhat[j];
              if (bn->requires_grad) bn->grad[static_cast<size_t>(i)] += self.grad[j];
            }
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            double sum_dy = 0, sum_dy_xhat = 0;
            for (int64_t i = 0; i < d; ++i) {
              const size_t j = static_cast<size_t>(base + i);
              const double dy = static_cast<double>(self.grad[j]) * static_cast<double>(gn->value[static_cast<size_t>(i)]);
              sum_dy += dy;
              sum_dy_xhat += dy * static_cast<double>(xhat[j]);
            }
            sum_dy /= static_cast<double>(d);
            sum_dy_xhat /= static_cast<double>(d);
            for (int64_t i = 0; i < d; ++i) {
              const size_t j = static_cast<size_t>(base + i);
              const double dy = static_cast<double>(self.grad[j]) * static_cast<double>(gn->value[static_cast<size_t>(i)]);
              xn->grad[j] += static_cast<T>((dy - sum_dy - static_cast<double>(xhat[j]) * sum_dy_xhat) *
                                            static_cast<double>(inv_std[static_cast<size_t>(r)]));
            }
          }
        }
      });
}

// ----------------------------- shape ops -----------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  int64_t known = 1;
  int wildcard = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (wildcard >= 0) throw DimensionError("reshape allows one -1");
      wildcard = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (wildcard >= 0) {
    if (known == 0 || x.numel() % known != 0)
      throw DimensionError("reshape cannot infer extent for " + shape_str(shape));
    shape[static_cast<size_t>(wildcard)] = static_cast<int>(x.numel() / known);
  }
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
  auto xn = x.node();
  return detail::make_result<T>(std::move(shape), std::vector<T>(x.data()), "reshape", {xn},
                                [xn](TensorNode<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
                                });
}

namespace detail {

// Walks the permuted layout with an odometer: for each output flat index of a
// tensor shaped out_shape (= in_shape with axis_a/axis_b swapped) it yields
// the matching input flat index. scatter_add accumulates src[of] into
// dst[inf]; otherwise dst[of] = src[inf].
template <class T>
void axis_swap_copy(const Shape& in_shape, int axis_a, int axis_b, const std::vector<T>& src,
                    std::vector<T>& dst, bool scatter_add) {
  const int r = static_cast<int>(in_shape.size());
  Shape out_shape = in_shape;
  std::swap(out_shape[static_cast<size_t>(axis_a)], out_shape[static_cast<size_t>(axis_b)]);
  std::vector<int64_t> in_strides(static_cast<size_t>(r));
  int64_t acc = 1;
  for (int i = r - 1; i >= 0; --i) {
    in_strides[static_cast<size_t>(i)] = acc;
    acc *= in_shape[static_cast<size_t>(i)];
  }
  // Input stride seen from each output axis.
  std::vector<int64_t> step(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    int src_axis = i;
    if (i == axis_a) src_axis = axis_b;
    else if (i == axis_b) src_axis = axis_a;
    step[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(src_axis)];
  }
  const int64_t n = acc;
  std::vector<int> idx(static_cast<size_t>(r), 0);
  int64_t inf = 0;
  for (int64_t of = 0; of < n; ++of) {
    if (scatter_add)
      dst[static_cast<size_t>(inf)] += src[static_cast<size_t>(of)];
    else
      dst[static_cast<size_t>(of)] = src[static_cast<size_t>(inf)];
    for (int ax = r - 1; ax >= 0; --ax) {
      ++idx[static_cast<size_t>(ax)];
      inf += step[static_cast<size_t>(ax)];
      if (idx[static_cast<size_t>(ax)] < out_shape[static_cast<size_t>(ax)]) break;
      inf -= static_cast<int64_t>(out_shape[static_cast<size_t>(ax)]) * step[static_cast<size_t>(ax)];
      idx[static_cast<size_t>(ax)] = 0;
    }
  }
}

}  // namespace detail

// Swaps two axes, materializing a contiguous result.
template <class T>
Tensor<T> transpose(const Tensor<T>& x, int axis_a, int axis_b) {
  const int r = x.rank();
  if (axis_a < 0) axis_a += r;
  if (axis_b < 0) axis_b += r;
  if (axis_a < 0 || axis_a >= r || axis_b < 0 || axis_b >= r)
    throw DimensionError("transpose axes out of range for " + shape_str(x.shape()));
  Shape in_shape = x.shape();
  Shape out_shape = in_shape;
  std::swap(out_shape[static_cast<size_t>(axis_a)], out_shape[static_cast<size_t>(axis_b)]);
  std::vector<T> out(x.data().size());
  detail::axis_swap_copy(in_shape, axis_a, axis_b, x.data(), out, false);
  auto xn = x.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), "transpose", {xn},
                                [xn, in_shape = std::move(in_shape), axis_a, axis_b](TensorNode<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  detail::axis_swap_copy(in_shape, axis_a, axis_b, self.grad, xn->grad, true);
                                });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int len) {
  int64_t outer, alen, inner;
  detail::axis_strides(x.shape(), axis, outer, alen, inner);
  if (axis < 0) axis += x.rank();
  if (start < 0 || len <= 0 || start + len > alen)
    throw DimensionError("slice range out of bounds");
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  std::vector<T> out(static_cast<size_t>(outer * len * inner));
  const T* in = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner, in + (o * alen + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(T));
  auto xn = x.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), "slice", {xn},
                                [xn, outer, alen, inner, start, len](TensorNode<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (int64_t o = 0; o < outer; ++o)
                                    for (int64_t i = 0; i < len * inner; ++i)
                                      xn->grad[static_cast<size_t>((o * alen + start) * inner + i)] +=
                                          self.grad[static_cast<size_t>(o * len * inner + i)];
                                });
}

template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
  Shape sa = a.shape(), sb = b.shape();
  const int r = static_cast<int>(sa.size());
  if (axis < 0) axis += r;
  if (sb.size() != sa.size() || axis < 0 || axis >= r)
    throw DimensionError("concat rank mismatch");
  for (int i = 0; i < r; ++i)
    if (i != axis && sa[static_cast<size_t>(i)] != sb[static_cast<size_t>(i)])
      throw DimensionError("concat non-axis extents differ: " + shape_str(sa) + " vs " + shape_str(sb));
  int64_t outer, la, inner, lb, dummy_outer, dummy_inner;
  detail::axis_strides(sa, axis, outer, la, inner);
  detail::axis_strides(sb, axis, dummy_outer, lb, dummy_inner);
  Shape out_shape = sa;
  out_shape[static_cast<size_t>(axis)] = static_cast<int>(la + lb);
  std::vector<T> out(static_cast<size_t>(outer * (la + lb) * inner));
  for (int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * (la + lb) * inner, a.data().data() + o * la * inner,
                static_cast<size_t>(la * inner) * sizeof(T));
    std::memcpy(out.data() + (o * (la + lb) + la) * inner, b.data().data() + o * lb * inner,
                static_cast<size_t>(lb * inner) * sizeof(T));
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), "concat", {an, bn},
                                [an, bn, outer, la, lb, inner](TensorNode<T>& self) {
                                  if (an->requires_grad) {
                                    an->ensure_grad();
                                    for (int64_t o = 0; o < outer; ++o)
                                      for (int64_t i = 0; i < la * inner; ++i)
                                        an->grad[static_cast<size_t>(o * la * inner + i)] +=
                                            self.grad[static_cast<size_t>(o * (la + lb) * inner + i)];
                                  }
                                  if (bn->requires_grad) {
                                    bn->ensure_grad();
                                    for (int64_t o = 0; o < outer; ++o)
                                      for (int64_t i = 0; i < lb * inner; ++i)
                                        bn->grad[static_cast<size_t>(o * lb * inner + i)] +=
                                            self.grad[static_cast<size_t>((o * (la + lb) + la) * inner + i)];
                                  }
                                });
}

// ----------------------------- gather -----------------------------

// Picks idx entries along axis, shared across all other dims.
template <class T>
Tensor<T> index_select(const Tensor<T>& x, int axis, const std::vector<int>& idx) {
  int64_t outer, len, inner;
  detail::axis_strides(x.shape(), axis, outer, len, inner);
  if (axis < 0) axis += x.rank();
  for (int i : idx)
    if (i < 0 || i >= len) throw DimensionError("index_select index out of range");
  const int64_t k = static_cast<int64_t>(idx.size());
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = static_cast<int>(k);
  std::vector<T> out(static_cast<size_t>(outer * k * inner));
  const T* in = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < k; ++j)
      std::memcpy(out.data() + (o * k + j) * inner, in + (o * len + idx[static_cast<size_t>(j)]) * inner,
                  static_cast<size_t>(inner) * sizeof(T));
  auto xn = x.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), "index_select", {xn},
                                [xn, outer, len, inner, idx](TensorNode<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  const int64_t k = static_cast<int64_t>(idx.size());
                                  for (int64_t o = 0; o < outer; ++o)
                                    for (int64_t j = 0; j < k; ++j)
                                      for (int64_t i = 0; i < inner; ++i)
                                        xn->grad[static_cast<size_t>((o * len + idx[static_cast<size_t>(j)]) * inner + i)] +=
                                            self.grad[static_cast<size_t>((o * k + j) * inner + i)];
                                });
}

// Per-sample token gather: x [b, l, d], idx [b][k] -> [b, k, d]. Gradients
// scatter-add back to the gathered positions.
template <class T>
Tensor<T> gather_tokens(const Tensor<T>& x, const std::vector<std::vector<int>>& idx) {
  if (x.rank() != 3) throw DimensionError("gather_tokens expects [b, l, d], got " + shape_str(x.shape()));
  const int b = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (static_cast<int>(idx.size()) != b) throw DimensionError("gather_tokens index batch mismatch");
  const int k = idx.empty() ? 0 : static_cast<int>(idx[0].size());
  for (const auto& row : idx) {
    if (static_cast<int>(row.size()) != k) throw DimensionError("gather_tokens ragged index");
    for (int i : row)
      if (i < 0 || i >= l) throw DimensionError("gather_tokens index out of range");
  }
  if (k == 0) throw DimensionError("gather_tokens needs at least one index");
  std::vector<T> out(static_cast<size_t>(b) * k * d);
  const T* in = x.data().data();
  for (int s = 0; s < b; ++s)
    for (int j = 0; j < k; ++j)
      std::memcpy(out.data() + (static_cast<int64_t>(s) * k + j) * d,
                  in + (static_cast<int64_t>(s) * l + idx[static_cast<size_t>(s)][static_cast<size_t>(j)]) * d,
                  static_cast<size_t>(d) * sizeof(T));
  auto xn = x.node();
  return detail::make_result<T>({b, k, d}, std::move(out), "gather_tokens", {xn},
                                [xn, b, l, d, k, idx](TensorNode<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (int s = 0; s < b; ++s)
                                    for (int j = 0; j < k; ++j) {
                                      T* dst = xn->grad.data() +
                                               (static_cast<int64_t>(s) * l + idx[static_cast<size_t>(s)][static_cast<size_t>(j)]) * d;
                                      const T* src = self.grad.data() + (static_cast<int64_t>(s) * k + j) * d;
                                      for (int i = 0; i < d; ++i) dst[i] += src[i];
                                    }
                                });
}

// ----------------------------- reductions -----------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += static_cast<double>(v);
  auto xn = x.node();
  return detail::make_result<T>({1}, {static_cast<T>(acc)}, "sum", {xn},
                                [xn](TensorNode<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (auto& g : xn->grad) g += self.grad[0];
                                });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  const T n = static_cast<T>(x.numel());
  return scale(sum(x), T(1) / n);
}

// Reduces one axis; the axis disappears from the result shape.
template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis) {
  int64_t outer, len, inner;
  detail::axis_strides(x.shape(), axis, outer, len, inner);
  if (axis < 0) axis += x.rank();
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(static_cast<size_t>(outer * inner), T(0));
  const T* in = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < len; ++i)
      for (int64_t c = 0; c < inner; ++c)
        out[static_cast<size_t>(o * inner + c)] += in[(o * len + i) * inner + c];
  auto xn = x.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), "sum_axis", {xn},
                                [xn, outer, len, inner](TensorNode<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (int64_t o = 0; o < outer; ++o)
                                    for (int64_t i = 0; i < len; ++i)
                                      for (int64_t c = 0; c < inner; ++c)
                                        xn->grad[static_cast<size_t>((o * len + i) * inner + c)] +=
                                            self.grad[static_cast<size_t>(o * inner + c)];
                                });
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis) {
  int64_t outer, len, inner;
  detail::axis_strides(x.shape(), axis, outer, len, inner);
  return scale(sum_axis(x, axis), T(1) / static_cast<T>(len));
}

// ----------------------------- classification loss -----------------------------

// Fused softmax + negative log likelihood, mean over rows.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw DimensionError("softmax_cross_entropy expects [n, classes]");
  const int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) throw DimensionError("label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= c) throw DimensionError("label out of range");
  std::vector<T> probs(logits.data().size());
  const T* in = logits.data().data();
  double loss = 0;
  for (int r = 0; r < n; ++r) {
    const T* row = in + static_cast<int64_t>(r) * c;
    T mx = row[0];
    for (int i = 1; i < c; ++i) mx = std::max(mx, row[i]);
    double denom = 0;
    for (int i = 0; i < c; ++i) {
      const double e = std::exp(static_cast<double>(row[i] - mx));
      probs[static_cast<size_t>(r) * c + i] = static_cast<T>(e);
      denom += e;
    }
    for (int i = 0; i < c; ++i) probs[static_cast<size_t>(r) * c + i] /= static_cast<T>(denom);
    loss -= std::log(std::max(static_cast<double>(probs[static_cast<size_t>(r) * c + labels[static_cast<size_t>(r)]]), 1e-30));
  }
  auto xn = logits.node();
  return detail::make_result<T>(
      {1}, {static_cast<T>(loss / n)}, "softmax_cross_entropy", {xn},
      [xn, n, c, labels, probs = std::move(probs)](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const T g = self.grad[0] / static_cast<T>(n);
        for (int r = 0; r < n; ++r)
          for (int i = 0; i < c; ++i) {
            const size_t j = static_cast<size_t>(r) * c + i;
            xn->grad[j] += g * (probs[j] - (labels[static_cast<size_t>(r)] == i ? T(1) : T(0)));
          }
      });
}

// ----------------------------- backward -----------------------------

// Reverse-mode sweep from a scalar loss. Populates gradients on every tracked
// leaf reachable from it and consumes the interior of the graph: a second
// backward over the same nodes raises a contract error. Returns the tracked
// leaves (their .grad() holds the result).
template <class T>
std::vector<Tensor<T>> backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  auto root = loss.node();
  if (!root->requires_grad)
    throw ContractError("backward: loss is not connected to any grad-tracked tensor");

  // Iterative post-order DFS for the topological order.
  std::vector<TensorNode<T>*> order;
  std::vector<std::pair<TensorNode<T>*, size_t>> stack;
  std::vector<TensorNode<T>*> visited;
  stack.push_back({root.get(), 0});
  auto mark = [&](TensorNode<T>* n) {
    // op field doubles as a visited tag via pointer set; use a flag vector instead.
    (void)n;
  };
  (void)mark;
  std::vector<TensorNode<T>*> seen;
  auto was_seen = [&](TensorNode<T>* n) {
    return std::find(seen.begin(), seen.end(), n) != seen.end();
  };
  seen.reserve(1024);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->consumed) throw ContractError("backward: graph already consumed");
    if (next == 0) {
      if (was_seen(node)) {
        stack.pop_back();
        continue;
      }
      seen.push_back(node);
    }
    if (next < node->parents.size()) {
      TensorNode<T>* child = node->parents[next].get();
      ++next;
      if (child->requires_grad && !was_seen(child)) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = T(1);
  std::vector<Tensor<T>> leaves;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->is_leaf()) continue;
    n->ensure_grad();
    n->backprop(*n);
  }
  for (TensorNode<T>* n : order) {
    if (n->is_leaf()) {
      n->ensure_grad();
      // Re-wrap the shared node; find it among parents is costly, so rebuild
      // from the raw pointer via aliasing constructor.
      leaves.push_back(Tensor<T>(std::shared_ptr<TensorNode<T>>(std::shared_ptr<void>(), n)));
    } else {
      n->consumed = true;
      n->backprop = nullptr;
      n->parents.clear();
      n->grad.clear();
    }
  }
  return leaves;
}

// ----------------------------- dft2 -----------------------------

// Centered 2-D DFT amplitude of a real [h, w] map. Analysis only: the result
// never joins the autodiff graph. Internally evaluated in double via the
// row-column decomposition.
template <class T>
Tensor<T> dft2(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("dft2 expects [h, w], got " + shape_str(x.shape()));
  const int h = x.dim(0), w = x.dim(1);
  using C = std::complex<double>;
  const double two_pi = 6.283185307179586476925286766559;

  // DFT along rows, then along columns.
  std::vector<C> rows(static_cast<size_t>(h) * w);
  for (int r = 0; r < h; ++r)
    for (int v = 0; v < w; ++v) {
      C acc(0, 0);
      for (int cx = 0; cx < w; ++cx) {
        const double ang = -two_pi * v * cx / w;
        acc += static_cast<double>(x.data()[static_cast<size_t>(r) * w + cx]) * C(std::cos(ang), std::sin(ang));
      }
      rows[static_cast<size_t>(r) * w + v] = acc;
    }
  std::vector<T> amp(static_cast<size_t>(h) * w);
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) {
      C acc(0, 0);
      for (int r = 0; r < h; ++r) {
        const double ang = -two_pi * u * r / h;
        acc += rows[static_cast<size_t>(r) * w + v] * C(std::cos(ang), std::sin(ang));
      }
      // Center the origin: DC lands at (h/2, w/2).
      const int cu = (u + h / 2) % h;
      const int cv = (v + w / 2) % w;
      amp[static_cast<size_t>(cu) * w + cv] = static_cast<T>(std::abs(acc));
    }
  return Tensor<T>::from({h, w}, std::move(amp));
}

// ----------------------------- helpers -----------------------------

// x [.., k] * W [k, n] + b [n].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace vitlite
