#include "uformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "uformer/error.hpp"
#include "uformer/parallel.hpp"

namespace uformer {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;
template <typename T>
using Node = detail::Node<T>;

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Floor/ceil division for possibly negative numerators.
std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}
std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c,
             std::int64_t m, std::int64_t k, std::int64_t n) {
  parallel_for(m, k * n, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      T* crow = c + i * n;
      const T* arow = a + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* brow = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// dA[m,k] += dC[m,n] * B[k,n]^T, via a transposed copy of B so the inner
// loop runs along contiguous rows.
template <typename T>
void gemm_nt(const T* __restrict dc, const T* __restrict b, T* __restrict da,
             std::int64_t m, std::int64_t k, std::int64_t n) {
  std::vector<T> bt(static_cast<std::size_t>(k * n));
  for (std::int64_t p = 0; p < k; ++p)
    for (std::int64_t j = 0; j < n; ++j) bt[static_cast<std::size_t>(j * k + p)] = b[p * n + j];
  parallel_for(m, k * n, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      const T* drow = dc + i * n;
      T* arow = da + i * k;
      for (std::int64_t j = 0; j < n; ++j) {
        const T dv = drow[j];
        const T* btrow = bt.data() + j * k;
        for (std::int64_t p = 0; p < k; ++p) arow[p] += dv * btrow[p];
      }
    }
  });
}

// dB[k,n] += A[m,k]^T * dC[m,n]
template <typename T>
void gemm_tn(const T* __restrict a, const T* __restrict dc, T* __restrict db,
             std::int64_t m, std::int64_t k, std::int64_t n) {
  parallel_for(k, m * n, [&](std::int64_t p0, std::int64_t p1) {
    for (std::int64_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      const T* drow = dc + i * n;
      for (std::int64_t p = p0; p < p1; ++p) {
        const T av = arow[p];
        T* brow = db + p * n;
        for (std::int64_t j = 0; j < n; ++j) brow[j] += av * drow[j];
      }
    }
  });
}

template <typename T>
Tensor<T> gather_impl(const char* op, const Tensor<T>& x, const IndexMap& index, Shape out_shape) {
  const auto& idx = *index;
  if (numel(out_shape) != static_cast<std::int64_t>(idx.size())) {
    throw DimensionError(std::string(op) + ": index map of " + std::to_string(idx.size()) +
                         " entries does not fill " + shape_str(out_shape));
  }
  const auto src = x.data();
  const auto n_src = static_cast<std::int64_t>(src.size());
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto j = idx[i];
    if (j < 0 || j >= n_src) {
      throw DimensionError(std::string(op) + ": index " + std::to_string(j) + " outside " + shape_str(x.shape()));
    }
    out[i] = src[static_cast<std::size_t>(j)];
  }
  return detail::make_result<T>(op, std::move(out_shape), std::move(out), {x.node()}, [index](Node<T>& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    auto& g = in.grad_buffer();
    const auto& ix = *index;
    for (std::size_t i = 0; i < ix.size(); ++i) g[static_cast<std::size_t>(ix[i])] += self.grad[i];
  });
}

template <typename T>
Tensor<T> unary(const char* op, const Tensor<T>& x, T (*f)(T), T (*df)(T, T)) {
  const auto src = x.data();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = f(src[i]);
  return detail::make_result<T>(op, x.shape(), std::move(out), {x.node()}, [df](Node<T>& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(in.value[i], self.value[i]);
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result<T>("add", a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->needs_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result<T>("sub", a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    if (self.inputs[0]->needs_grad) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->needs_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    auto& a_in = *self.inputs[0];
    auto& b_in = *self.inputs[1];
    if (a_in.needs_grad) {
      auto& g = a_in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b_in.value[i];
    }
    if (b_in.needs_grad) {
      auto& g = b_in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a_in.value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  const auto src = x.data();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] * factor;
  return detail::make_result<T>("scale", x.shape(), std::move(out), {x.node()}, [factor](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  const auto src = x.data();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] + value;
  return detail::make_result<T>("add_scalar", x.shape(), std::move(out), {x.node()}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return unary<T>(
      "sqrt", x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& b) {
  const auto& xs = x.shape();
  const auto& bs = b.shape();
  if (bs.size() > xs.size() || !std::equal(bs.rbegin(), bs.rend(), xs.rbegin())) {
    throw DimensionError("add_broadcast: " + shape_str(bs) + " is not a trailing suffix of " + shape_str(xs));
  }
  const auto src = x.data();
  const auto bias = b.data();
  const std::size_t nb = bias.size();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < out.size(); i += nb) {
    for (std::size_t j = 0; j < nb; ++j) out[i + j] = src[i + j] + bias[j];
  }
  return detail::make_result<T>("add_broadcast", xs, std::move(out), {x.node(), b.node()}, [](Node<T>& self) {
    auto& x_in = *self.inputs[0];
    auto& b_in = *self.inputs[1];
    if (x_in.needs_grad) {
      auto& g = x_in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b_in.needs_grad) {
      auto& g = b_in.grad_buffer();
      const std::size_t n = g.size();
      for (std::size_t i = 0; i < self.grad.size(); i += n) {
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i + j];
      }
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (const T v : x.data()) acc += v;
  return detail::make_result<T>("sum", Shape{}, std::vector<T>{acc}, {x.node()}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T acc = 0;
  for (const T v : x.data()) acc += v;
  const T n = static_cast<T>(x.numel());
  return detail::make_result<T>("mean", Shape{}, std::vector<T>{acc / n}, {x.node()}, [n](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T d = self.grad[0] / n;
    for (auto& v : g) v += d;
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw mismatch();
  const std::int64_t m = as[as.size() - 2];
  const std::int64_t k = as.back();
  const std::int64_t n = bs.back();
  if (bs[bs.size() - 2] != k) throw mismatch();
  const bool shared_rhs = bs.size() == 2;
  if (!shared_rhs && (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()))) {
    throw mismatch();
  }
  const std::int64_t batch = numel(as) / (m * k);
  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<std::size_t>(batch * m * n), T(0));
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  if (shared_rhs) {
    gemm_nn(ap, bp, out.data(), batch * m, k, n);
  } else {
    for (std::int64_t s = 0; s < batch; ++s) gemm_nn(ap + s * m * k, bp + s * k * n, out.data() + s * m * n, m, k, n);
  }
  return detail::make_result<T>(
      "matmul", std::move(out_shape), std::move(out), {a.node(), b.node()},
      [batch, m, k, n, shared_rhs](Node<T>& self) {
        auto& a_in = *self.inputs[0];
        auto& b_in = *self.inputs[1];
        const T* dc = self.grad.data();
        if (a_in.needs_grad) {
          T* da = a_in.grad_buffer().data();
          if (shared_rhs) {
            gemm_nt(dc, b_in.value.data(), da, batch * m, k, n);
          } else {
            for (std::int64_t s = 0; s < batch; ++s)
              gemm_nt(dc + s * m * n, b_in.value.data() + s * k * n, da + s * m * k, m, k, n);
          }
        }
        if (b_in.needs_grad) {
          T* db = b_in.grad_buffer().data();
          if (shared_rhs) {
            gemm_tn(a_in.value.data(), dc, db, batch * m, k, n);
          } else {
            for (std::int64_t s = 0; s < batch; ++s)
              gemm_tn(a_in.value.data() + s * m * k, dc + s * m * n, db + s * k * n, m, k, n);
          }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw DimensionError("softmax: axis out of range for " + shape_str(s));
  const std::int64_t len = s[axis];
  const std::int64_t inner = std::accumulate(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end(),
                                             std::int64_t{1}, std::multiplies<>());
  const std::int64_t outer = x.numel() / (len * inner);
  const auto src = x.data();
  std::vector<T> out(src.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      T mx = src[static_cast<std::size_t>(base)];
      for (std::int64_t j = 1; j < len; ++j) mx = std::max(mx, src[static_cast<std::size_t>(base + j * inner)]);
      T total = 0;
      for (std::int64_t j = 0; j < len; ++j) {
        const auto idx = static_cast<std::size_t>(base + j * inner);
        out[idx] = std::exp(src[idx] - mx);
        total += out[idx];
      }
      for (std::int64_t j = 0; j < len; ++j) out[static_cast<std::size_t>(base + j * inner)] /= total;
    }
  }
  return detail::make_result<T>("softmax", s, std::move(out), {x.node()}, [outer, len, inner](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const auto& y = self.value;
    const auto& dy = self.grad;
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        T dot = 0;
        for (std::int64_t j = 0; j < len; ++j) {
          const auto idx = static_cast<std::size_t>(base + j * inner);
          dot += dy[idx] * y[idx];
        }
        for (std::int64_t j = 0; j < len; ++j) {
          const auto idx = static_cast<std::size_t>(base + j * inner);
          g[idx] += y[idx] * (dy[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  const auto& s = x.shape();
  if (s.empty()) throw DimensionError("layer_norm: scalar input");
  const std::int64_t c = s.back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match channel extent of " + shape_str(s));
  }
  const std::int64_t rows = x.numel() / c;
  const auto src = x.data();
  const auto gm = gamma.data();
  const auto bt = beta.data();
  auto xhat = std::make_shared<std::vector<T>>(src.size());
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  std::vector<T> out(src.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = src.data() + r * c;
    bool constant = true;
    T mu = 0;
    for (std::int64_t j = 0; j < c; ++j) {
      mu += row[j];
      constant = constant && row[j] == row[0];
    }
    mu = constant ? row[0] : mu / static_cast<T>(c);
    T var = 0;
    for (std::int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    for (std::int64_t j = 0; j < c; ++j) {
      const auto idx = static_cast<std::size_t>(r * c + j);
      const T h = (row[j] - mu) * rs;
      (*xhat)[idx] = h;
      out[idx] = h * gm[static_cast<std::size_t>(j)] + bt[static_cast<std::size_t>(j)];
    }
  }
  return detail::make_result<T>(
      "layer_norm", s, std::move(out), {x.node(), gamma.node(), beta.node()},
      [xhat, rstd, rows, c](Node<T>& self) {
        auto& x_in = *self.inputs[0];
        auto& g_in = *self.inputs[1];
        auto& b_in = *self.inputs[2];
        const auto& dy = self.grad;
        if (g_in.needs_grad) {
          auto& g = g_in.grad_buffer();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < c; ++j) {
              const auto idx = static_cast<std::size_t>(r * c + j);
              g[static_cast<std::size_t>(j)] += dy[idx] * (*xhat)[idx];
            }
        }
        if (b_in.needs_grad) {
          auto& g = b_in.grad_buffer();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < c; ++j) g[static_cast<std::size_t>(j)] += dy[static_cast<std::size_t>(r * c + j)];
        }
        if (x_in.needs_grad) {
          auto& g = x_in.grad_buffer();
          const auto& gm = g_in.value;
          for (std::int64_t r = 0; r < rows; ++r) {
            T mean_d = 0;
            T mean_dh = 0;
            for (std::int64_t j = 0; j < c; ++j) {
              const auto idx = static_cast<std::size_t>(r * c + j);
              const T d = dy[idx] * gm[static_cast<std::size_t>(j)];
              mean_d += d;
              mean_dh += d * (*xhat)[idx];
            }
            mean_d /= static_cast<T>(c);
            mean_dh /= static_cast<T>(c);
            const T rs = (*rstd)[static_cast<std::size_t>(r)];
            for (std::int64_t j = 0; j < c; ++j) {
              const auto idx = static_cast<std::size_t>(r * c + j);
              const T d = dy[idx] * gm[static_cast<std::size_t>(j)];
              g[idx] += rs * (d - mean_d - (*xhat)[idx] * mean_dh);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return unary<T>(
      "gelu", x,
      [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(M_SQRT1_2))); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
        const T pdf = std::exp(T(-0.5) * v * v) * T(0.5 * M_2_SQRTPI * M_SQRT1_2);
        return cdf + v * pdf;
      });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope) {
  const T a = static_cast<T>(slope);
  const auto src = x.data();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] >= T(0) ? src[i] : a * src[i];
  return detail::make_result<T>("leaky_relu", x.shape(), std::move(out), {x.node()}, [a](Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += in.value[i] >= T(0) ? self.grad[i] : a * self.grad[i];
  });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  return kind.kind == Activation::Kind::gelu ? gelu(x) : leaky_relu(x, kind.slope);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("reshape: non-positive extent in " + shape_str(shape));
  }
  const auto src = x.data();
  return detail::make_result<T>("reshape", std::move(shape), std::vector<T>(src.begin(), src.end()), {x.node()},
                                [](Node<T>& self) {
                                  auto& g = self.inputs[0]->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const auto& s = x.shape();
  const std::size_t r = s.size();
  std::vector<bool> seen(r, false);
  if (axes.size() != r) throw DimensionError("permute: axis order has wrong length for " + shape_str(s));
  for (auto a : axes) {
    if (a >= r || seen[a]) throw DimensionError("permute: axis order is not a permutation");
    seen[a] = true;
  }
  std::vector<std::int64_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  Shape out_shape(r);
  std::vector<std::int64_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = s[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  auto index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.numel()));
  std::vector<std::int64_t> counter(r, 0);
  std::int64_t offset = 0;
  for (auto& dst : *index) {
    dst = offset;
    for (std::size_t d = r; d-- > 0;) {
      offset += strides[d];
      if (++counter[d] < out_shape[d]) break;
      offset -= strides[d] * out_shape[d];
      counter[d] = 0;
    }
  }
  return gather_impl<T>("permute", x, index, std::move(out_shape));
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opts) {
  if (x.rank() != 3 || weight.rank() != 4) {
    throw DimensionError("conv2d: expected input [C,H,W] and weight [Cout,Cin/g,kh,kw], got " +
                         shape_str(x.shape()) + " and " + shape_str(weight.shape()));
  }
  const std::int64_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::int64_t cout = weight.dim(0), cpg_in = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  const std::int64_t g = opts.groups, s = opts.stride, p = opts.padding;
  if (g < 1 || s < 1 || p < 0) throw ConfigError("conv2d: invalid stride/padding/groups");
  if (cin % g != 0 || cout % g != 0) {
    throw ConfigError("conv2d: channels " + std::to_string(cin) + "->" + std::to_string(cout) +
                      " not divisible by groups " + std::to_string(g));
  }
  if (cin / g != cpg_in) {
    throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " does not match input " +
                         shape_str(x.shape()) + " with groups " + std::to_string(g));
  }
  if (bias.defined() && bias.shape() != Shape{cout}) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout) +
                         " output channels");
  }
  const std::int64_t span_h = h + 2 * p - kh;
  const std::int64_t span_w = w + 2 * p - kw;
  if (span_h < 0 || span_w < 0 || span_h % s != 0 || span_w % s != 0) {
    throw ConfigError("conv2d: non-integral output extent for input " + shape_str(x.shape()) + ", kernel " +
                      std::to_string(kh) + "x" + std::to_string(kw) + ", stride " + std::to_string(s) +
                      ", padding " + std::to_string(p));
  }
  const std::int64_t ho = span_h / s + 1;
  const std::int64_t wo = span_w / s + 1;
  const std::int64_t cpg_out = cout / g;

  // Valid output column range for kernel column c: 0 <= ow*s + c - p < w.
  auto ow_range = [=](std::int64_t c) {
    return std::pair{std::max<std::int64_t>(0, ceil_div(p - c, s)),
                     std::min<std::int64_t>(wo, floor_div(w - 1 + p - c, s) + 1)};
  };

  const T* xp = x.data().data();
  const T* wp = weight.data().data();
  std::vector<T> out(static_cast<std::size_t>(cout * ho * wo), T(0));
  if (bias.defined()) {
    const auto b = bias.data();
    for (std::int64_t oc = 0; oc < cout; ++oc)
      std::fill_n(out.begin() + oc * ho * wo, ho * wo, b[static_cast<std::size_t>(oc)]);
  }
  parallel_for(cout, cpg_in * kh * kw * ho * wo, [&](std::int64_t oc0, std::int64_t oc1) {
    for (std::int64_t oc = oc0; oc < oc1; ++oc) {
      const std::int64_t grp = oc / cpg_out;
      T* op = out.data() + oc * ho * wo;
      for (std::int64_t icg = 0; icg < cpg_in; ++icg) {
        const T* xc = xp + (grp * cpg_in + icg) * h * w;
        for (std::int64_t r = 0; r < kh; ++r) {
          for (std::int64_t c = 0; c < kw; ++c) {
            const T wv = wp[((oc * cpg_in + icg) * kh + r) * kw + c];
            const auto [lo, hi] = ow_range(c);
            for (std::int64_t oh = 0; oh < ho; ++oh) {
              const std::int64_t ih = oh * s + r - p;
              if (ih < 0 || ih >= h) continue;
              const std::int64_t base = ih * w + c - p;
              T* orow = op + oh * wo;
              for (std::int64_t ow = lo; ow < hi; ++ow) orow[ow] += wv * xc[base + ow * s];
            }
          }
        }
      }
    }
  });

  std::vector<NodePtr<T>> inputs{x.node(), weight.node()};
  if (bias.defined()) inputs.push_back(bias.node());
  return detail::make_result<T>(
      "conv2d", Shape{cout, ho, wo}, std::move(out), std::move(inputs),
      [=](Node<T>& self) {
        auto& x_in = *self.inputs[0];
        auto& w_in = *self.inputs[1];
        const T* dy = self.grad.data();
        if (self.inputs.size() > 2 && self.inputs[2]->needs_grad) {
          auto& gb = self.inputs[2]->grad_buffer();
          for (std::int64_t oc = 0; oc < cout; ++oc) {
            T acc = 0;
            for (std::int64_t i = 0; i < ho * wo; ++i) acc += dy[oc * ho * wo + i];
            gb[static_cast<std::size_t>(oc)] += acc;
          }
        }
        const T* xv = x_in.value.data();
        const T* wv = w_in.value.data();
        T* gx = x_in.needs_grad ? x_in.grad_buffer().data() : nullptr;
        T* gw = w_in.needs_grad ? w_in.grad_buffer().data() : nullptr;
        std::vector<T> acc_row(static_cast<std::size_t>(wo));
        for (std::int64_t oc = 0; oc < cout; ++oc) {
          const std::int64_t grp = oc / cpg_out;
          const T* dyc = dy + oc * ho * wo;
          for (std::int64_t icg = 0; icg < cpg_in; ++icg) {
            const std::int64_t ic = grp * cpg_in + icg;
            for (std::int64_t r = 0; r < kh; ++r) {
              for (std::int64_t c = 0; c < kw; ++c) {
                const std::int64_t widx = ((oc * cpg_in + icg) * kh + r) * kw + c;
                const T wval = wv[widx];
                const auto [lo, hi] = ow_range(c);
                if (gw) std::fill(acc_row.begin(), acc_row.end(), T(0));
                for (std::int64_t oh = 0; oh < ho; ++oh) {
                  const std::int64_t ih = oh * s + r - p;
                  if (ih < 0 || ih >= h) continue;
                  const std::int64_t base = ic * h * w + ih * w + c - p;
                  const T* drow = dyc + oh * wo;
                  if (gx) {
                    for (std::int64_t ow = lo; ow < hi; ++ow) gx[base + ow * s] += wval * drow[ow];
                  }
                  if (gw) {
                    for (std::int64_t ow = lo; ow < hi; ++ow) acc_row[ow] += drow[ow] * xv[base + ow * s];
                  }
                }
                if (gw) {
                  T acc = 0;
                  for (std::int64_t ow = lo; ow < hi; ++ow) acc += acc_row[ow];
                  gw[widx] += acc;
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::int64_t stride) {
  if (x.rank() != 3 || weight.rank() != 4 || weight.dim(0) != x.dim(0)) {
    throw DimensionError("conv_transpose2d: expected input [Cin,H,W] and weight [Cin,Cout,kh,kw], got " +
                         shape_str(x.shape()) + " and " + shape_str(weight.shape()));
  }
  if (stride < 1) throw ConfigError("conv_transpose2d: stride must be positive");
  const std::int64_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::int64_t cout = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (bias.defined() && bias.shape() != Shape{cout}) {
    throw DimensionError("conv_transpose2d: bias " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(cout) + " output channels");
  }
  const std::int64_t s = stride;
  const std::int64_t ho = (h - 1) * s + kh;
  const std::int64_t wo = (w - 1) * s + kw;
  const T* xp = x.data().data();
  const T* wp = weight.data().data();
  std::vector<T> out(static_cast<std::size_t>(cout * ho * wo), T(0));
  if (bias.defined()) {
    const auto b = bias.data();
    for (std::int64_t oc = 0; oc < cout; ++oc)
      std::fill_n(out.begin() + oc * ho * wo, ho * wo, b[static_cast<std::size_t>(oc)]);
  }
  parallel_for(cout, cin * kh * kw * h * w, [&](std::int64_t oc0, std::int64_t oc1) {
    for (std::int64_t oc = oc0; oc < oc1; ++oc) {
      T* op = out.data() + oc * ho * wo;
      for (std::int64_t ic = 0; ic < cin; ++ic) {
        const T* xc = xp + ic * h * w;
        for (std::int64_t r = 0; r < kh; ++r)
          for (std::int64_t c = 0; c < kw; ++c) {
            const T wv = wp[((ic * cout + oc) * kh + r) * kw + c];
            for (std::int64_t ih = 0; ih < h; ++ih) {
              T* orow = op + (ih * s + r) * wo + c;
              const T* xrow = xc + ih * w;
              for (std::int64_t iw = 0; iw < w; ++iw) orow[iw * s] += wv * xrow[iw];
            }
          }
      }
    }
  });
  std::vector<NodePtr<T>> inputs{x.node(), weight.node()};
  if (bias.defined()) inputs.push_back(bias.node());
  return detail::make_result<T>(
      "conv_transpose2d", Shape{cout, ho, wo}, std::move(out), std::move(inputs), [=](Node<T>& self) {
        auto& x_in = *self.inputs[0];
        auto& w_in = *self.inputs[1];
        const T* dy = self.grad.data();
        if (self.inputs.size() > 2 && self.inputs[2]->needs_grad) {
          auto& gb = self.inputs[2]->grad_buffer();
          for (std::int64_t oc = 0; oc < cout; ++oc) {
            T acc = 0;
            for (std::int64_t i = 0; i < ho * wo; ++i) acc += dy[oc * ho * wo + i];
            gb[static_cast<std::size_t>(oc)] += acc;
          }
        }
        const T* xv = x_in.value.data();
        const T* wv = w_in.value.data();
        T* gx = x_in.needs_grad ? x_in.grad_buffer().data() : nullptr;
        T* gw = w_in.needs_grad ? w_in.grad_buffer().data() : nullptr;
        for (std::int64_t ic = 0; ic < cin; ++ic) {
          for (std::int64_t oc = 0; oc < cout; ++oc) {
            const T* dyc = dy + oc * ho * wo;
            for (std::int64_t r = 0; r < kh; ++r)
              for (std::int64_t c = 0; c < kw; ++c) {
                const std::int64_t widx = ((ic * cout + oc) * kh + r) * kw + c;
                const T wval = wv[widx];
                T acc = 0;
                for (std::int64_t ih = 0; ih < h; ++ih) {
                  const T* drow = dyc + (ih * s + r) * wo + c;
                  const std::int64_t base = ic * h * w + ih * w;
                  for (std::int64_t iw = 0; iw < w; ++iw) {
                    if (gx) gx[base + iw] += wval * drow[iw * s];
                    acc += xv[base + iw] * drow[iw * s];
                  }
                }
                if (gw) gw[widx] += acc;
              }
          }
        }
      });
}

template <typename T>
Tensor<T> take(const Tensor<T>& x, const IndexMap& index, Shape out_shape) {
  if (!index) throw UsageError("take: null index map");
  return gather_impl<T>("take", x, index, std::move(out_shape));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const auto& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::int64_t> slab;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
    out_shape[axis] += s[axis];
  }
  const std::int64_t inner = std::accumulate(first.begin() + static_cast<std::ptrdiff_t>(axis) + 1, first.end(),
                                             std::int64_t{1}, std::multiplies<>());
  const std::int64_t outer = std::accumulate(first.begin(), first.begin() + static_cast<std::ptrdiff_t>(axis),
                                             std::int64_t{1}, std::multiplies<>());
  for (const auto& p : parts) slab.push_back(p.shape()[axis] * inner);
  const std::int64_t row = out_shape[axis] * inner;
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<NodePtr<T>> inputs;
  std::int64_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + o * slab[k], slab[k], out.begin() + o * row + offset);
    offset += slab[k];
    inputs.push_back(parts[k].node());
  }
  return detail::make_result<T>("concat", std::move(out_shape), std::move(out), std::move(inputs),
                                [slab, outer, row](Node<T>& self) {
                                  std::int64_t off = 0;
                                  for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                    if (self.inputs[k]->needs_grad) {
                                      auto& g = self.inputs[k]->grad_buffer();
                                      for (std::int64_t o = 0; o < outer; ++o)
                                        for (std::int64_t i = 0; i < slab[k]; ++i)
                                          g[static_cast<std::size_t>(o * slab[k] + i)] +=
                                              self.grad[static_cast<std::size_t>(o * row + off + i)];
                                    }
                                    off += slab[k];
                                  }
                                });
}

#define UFORMER_INSTANTIATE_OPS(T)                                                                      \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                                       \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                  \
  template Tensor<T> sqrt(const Tensor<T>&);                                                           \
  template Tensor<T> add_broadcast(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sum(const Tensor<T>&);                                                            \
  template Tensor<T> mean(const Tensor<T>&);                                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);         \
  template Tensor<T> gelu(const Tensor<T>&);                                                           \
  template Tensor<T> leaky_relu(const Tensor<T>&, double);                                             \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                 \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                       \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions);      \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::int64_t); \
  template Tensor<T> take(const Tensor<T>&, const IndexMap&, Shape);                                   \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);

UFORMER_INSTANTIATE_OPS(float)
UFORMER_INSTANTIATE_OPS(double)

}  // namespace uformer
