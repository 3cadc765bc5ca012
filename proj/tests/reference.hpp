#pragma once

// Direct loop implementations used as test oracles. Everything here works on
// plain double arrays and shares no code with the library beyond reading
// parameter values out of tensors.

#include <cstdint>
#include <vector>

#include "uformer/image.hpp"
#include "uformer/lewin.hpp"
#include "uformer/model.hpp"

namespace ref {

using i64 = std::int64_t;
using Vec = std::vector<double>;

template <typename T>
Vec values(const uformer::Tensor<T>& t) {
  const auto d = t.data();
  return Vec(d.begin(), d.end());
}

struct Map {
  i64 c = 0, h = 0, w = 0;
  Vec v;

  Map() = default;
  Map(i64 c_, i64 h_, i64 w_) : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_ * h_ * w_), 0.0) {}
  double& at(i64 ch, i64 y, i64 x) { return v[static_cast<std::size_t>((ch * h + y) * w + x)]; }
  double at(i64 ch, i64 y, i64 x) const { return v[static_cast<std::size_t>((ch * h + y) * w + x)]; }
};

template <typename T>
Map to_map(const uformer::Tensor<T>& t) {
  Map m(t.dim(0), t.dim(1), t.dim(2));
  m.v = values(t);
  return m;
}

/// a [m, k] times b [k, n].
Vec matmul(const Vec& a, const Vec& b, i64 m, i64 k, i64 n);

/// Cross-correlation with zero padding; weight [cout, cin/groups, k, k].
Map conv2d(const Map& x, const Vec& weight, const Vec& bias, i64 cout, i64 kernel, i64 stride, i64 padding,
           i64 groups = 1);

/// weight [cin, cout, k, k]; out[o, y*s + ky, x*s + kx] += x[i, y, x] w[i, o, ky, kx].
Map conv_transpose2d(const Map& x, const Vec& weight, const Vec& bias, i64 cout, i64 kernel, i64 stride);

double gelu(double v);
double leaky_relu(double v, double slope);

/// Normalizes each pixel's channel vector (biased variance).
Map layer_norm(const Map& x, const Vec& gamma, const Vec& beta, double eps = 1e-5);

/// Mirror reflection without edge repetition.
i64 reflect(i64 i, i64 n);

struct Attention {
  i64 heads = 1;
  i64 window = 0;
  i64 dim = 0;     // output channels
  i64 kv_dim = 0;  // channels of the key/value source
  i64 q_dim = 0;
  Vec wq, wk, wv, proj_w, proj_b, table;
};

template <typename T>
Attention attention_from(const uformer::WMSAParams<T>& p, std::int64_t window) {
  Attention a;
  a.heads = p.heads;
  a.window = window;
  a.dim = p.dim();
  a.q_dim = p.wq.dim(0);
  a.kv_dim = p.wk.dim(0);
  a.wq = values(p.wq);
  a.wk = values(p.wk);
  a.wv = values(p.wv);
  a.proj_w = values(p.proj.weight);
  a.proj_b = values(p.proj.bias);
  a.table = values(p.bias_table);
  return a;
}

/// Offset-bucket index of token i relative to token j in an M x M window.
i64 rel_bucket(i64 i, i64 j, i64 window);

/// Shifted-window attention computed pixel by pixel from coordinates:
/// reflect padding, torus roll, wrap-around masking, optional window-local
/// modulator [M, M, C] added to the queries (and to self-attention keys).
/// `q_src`/`kv_src` are already normalized.
Map window_attention(const Map& q_src, const Map* kv_src, const Attention& a, i64 shift, const Vec* modulator);

/// Every pixel attends to every pixel of a square map; relative bias read
/// with window = extent.
Map global_attention(const Map& x, const Attention& a);

struct LeFF {
  i64 hidden = 0;
  Vec w1, b1, dw, dwb, w2, b2;
};

template <typename T>
LeFF leff_from(const uformer::LeFFParams<T>& p) {
  return {p.hidden(), values(p.lin1.weight), values(p.lin1.bias), values(p.dwconv.weight),
          values(p.dwconv.bias), values(p.lin2.weight), values(p.lin2.bias)};
}

Map leff(const Map& x, const LeFF& p);

/// Self-attention LeWin block.
template <typename T>
Map lewin_block(const Map& x, const uformer::LeWinBlockParams<T>& p);

/// Concat-skip Uformer forward.
template <typename T>
Map uformer_forward(const Map& input, const uformer::UformerParams<T>& p);

double psnr(const uformer::Image& a, const uformer::Image& b);
/// 11x11 Gaussian (sigma 1.5) windows evaluated directly at every valid
/// position.
double ssim(const uformer::Image& a, const uformer::Image& b);

double rel_error(const Vec& got, const Vec& want);

}  // namespace ref
