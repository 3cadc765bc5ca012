#include "reference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ref {

Vec matmul(const Vec& a, const Vec& b, i64 m, i64 k, i64 n) {
  Vec out(static_cast<std::size_t>(m * n), 0.0);
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < n; ++j) {
      double s = 0.0;
      for (i64 p = 0; p < k; ++p) s += a[static_cast<std::size_t>(i * k + p)] * b[static_cast<std::size_t>(p * n + j)];
      out[static_cast<std::size_t>(i * n + j)] = s;
    }
  return out;
}

Map conv2d(const Map& x, const Vec& weight, const Vec& bias, i64 cout, i64 kernel, i64 stride, i64 padding,
           i64 groups) {
  const i64 ho = (x.h + 2 * padding - kernel) / stride + 1;
  const i64 wo = (x.w + 2 * padding - kernel) / stride + 1;
  const i64 cin_g = x.c / groups, cout_g = cout / groups;
  Map out(cout, ho, wo);
  for (i64 o = 0; o < cout; ++o) {
    const i64 g = o / cout_g;
    for (i64 y = 0; y < ho; ++y)
      for (i64 xo = 0; xo < wo; ++xo) {
        double s = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(o)];
        for (i64 ci = 0; ci < cin_g; ++ci)
          for (i64 ky = 0; ky < kernel; ++ky)
            for (i64 kx = 0; kx < kernel; ++kx) {
              const i64 iy = y * stride - padding + ky, ix = xo * stride - padding + kx;
              if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
              s += x.at(g * cin_g + ci, iy, ix) *
                   weight[static_cast<std::size_t>(((o * cin_g + ci) * kernel + ky) * kernel + kx)];
            }
        out.at(o, y, xo) = s;
      }
  }
  return out;
}

Map conv_transpose2d(const Map& x, const Vec& weight, const Vec& bias, i64 cout, i64 kernel, i64 stride) {
  Map out(cout, (x.h - 1) * stride + kernel, (x.w - 1) * stride + kernel);
  for (i64 o = 0; o < cout; ++o)
    for (i64 y = 0; y < out.h; ++y)
      for (i64 xo = 0; xo < out.w; ++xo) out.at(o, y, xo) = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(o)];
  for (i64 i = 0; i < x.c; ++i)
    for (i64 y = 0; y < x.h; ++y)
      for (i64 xi = 0; xi < x.w; ++xi)
        for (i64 o = 0; o < cout; ++o)
          for (i64 ky = 0; ky < kernel; ++ky)
            for (i64 kx = 0; kx < kernel; ++kx)
              out.at(o, y * stride + ky, xi * stride + kx) +=
                  x.at(i, y, xi) * weight[static_cast<std::size_t>(((i * cout + o) * kernel + ky) * kernel + kx)];
  return out;
}

double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }
double leaky_relu(double v, double slope) { return v >= 0 ? v : slope * v; }

Map layer_norm(const Map& x, const Vec& gamma, const Vec& beta, double eps) {
  Map out(x.c, x.h, x.w);
  for (i64 y = 0; y < x.h; ++y)
    for (i64 xx = 0; xx < x.w; ++xx) {
      double mu = 0.0;
      for (i64 c = 0; c < x.c; ++c) mu += x.at(c, y, xx);
      mu /= static_cast<double>(x.c);
      double var = 0.0;
      for (i64 c = 0; c < x.c; ++c) var += (x.at(c, y, xx) - mu) * (x.at(c, y, xx) - mu);
      var /= static_cast<double>(x.c);
      for (i64 c = 0; c < x.c; ++c)
        out.at(c, y, xx) = (x.at(c, y, xx) - mu) / std::sqrt(var + eps) * gamma[static_cast<std::size_t>(c)] +
                           beta[static_cast<std::size_t>(c)];
    }
  return out;
}

i64 reflect(i64 i, i64 n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

i64 rel_bucket(i64 i, i64 j, i64 window) {
  const i64 dr = i / window - j / window + window - 1;
  const i64 dc = i % window - j % window + window - 1;
  return dr * (2 * window - 1) + dc;
}

namespace {

Vec project(const Vec& feat, const Vec& w, i64 in, i64 out) { return matmul(feat, w, 1, in, out); }

// Multi-head attention over explicit token lists; `logit_bias(h, i, j)` adds
// the relative bias and mask.
template <typename Bias>
std::vector<Vec> attend(const std::vector<Vec>& q_feat, const std::vector<Vec>& kv_feat, const Attention& a,
                        const Bias& logit_bias) {
  const i64 n = static_cast<i64>(q_feat.size());
  const i64 dk = a.dim / a.heads;
  std::vector<Vec> q(q_feat.size()), k(q_feat.size()), v(q_feat.size());
  for (i64 t = 0; t < n; ++t) {
    q[static_cast<std::size_t>(t)] = project(q_feat[static_cast<std::size_t>(t)], a.wq, a.q_dim, a.dim);
    k[static_cast<std::size_t>(t)] = project(kv_feat[static_cast<std::size_t>(t)], a.wk, a.kv_dim, a.dim);
    v[static_cast<std::size_t>(t)] = project(kv_feat[static_cast<std::size_t>(t)], a.wv, a.kv_dim, a.dim);
  }
  std::vector<Vec> out(static_cast<std::size_t>(n), Vec(static_cast<std::size_t>(a.dim), 0.0));
  for (i64 h = 0; h < a.heads; ++h)
    for (i64 i = 0; i < n; ++i) {
      Vec logits(static_cast<std::size_t>(n));
      double mx = -1e300;
      for (i64 j = 0; j < n; ++j) {
        double s = 0.0;
        for (i64 d = 0; d < dk; ++d)
          s += q[static_cast<std::size_t>(i)][static_cast<std::size_t>(h * dk + d)] *
               k[static_cast<std::size_t>(j)][static_cast<std::size_t>(h * dk + d)];
        s = s / std::sqrt(static_cast<double>(dk)) + logit_bias(h, i, j);
        logits[static_cast<std::size_t>(j)] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (i64 j = 0; j < n; ++j)
        for (i64 d = 0; d < dk; ++d)
          out[static_cast<std::size_t>(i)][static_cast<std::size_t>(h * dk + d)] +=
              logits[static_cast<std::size_t>(j)] / z * v[static_cast<std::size_t>(j)][static_cast<std::size_t>(h * dk + d)];
    }
  for (auto& o : out) {
    auto p = project(o, a.proj_w, a.dim, a.dim);
    for (i64 c = 0; c < a.dim; ++c) p[static_cast<std::size_t>(c)] += a.proj_b[static_cast<std::size_t>(c)];
    o = std::move(p);
  }
  return out;
}

Vec pixel(const Map& m, i64 y, i64 x) {
  Vec f(static_cast<std::size_t>(m.c));
  for (i64 c = 0; c < m.c; ++c) f[static_cast<std::size_t>(c)] = m.at(c, y, x);
  return f;
}

}  // namespace

Map window_attention(const Map& q_src, const Map* kv_src, const Attention& a, i64 shift, const Vec* modulator) {
  const i64 M = a.window;
  const i64 hp = (q_src.h + M - 1) / M * M, wp = (q_src.w + M - 1) / M * M;
  const i64 t = M * M;
  const i64 nb = 2 * M - 1;
  Map out(a.dim, q_src.h, q_src.w);
  for (i64 wy = 0; wy < hp / M; ++wy)
    for (i64 wx = 0; wx < wp / M; ++wx) {
      std::vector<Vec> qf, kf;
      std::vector<i64> ys, xs, label;
      for (i64 k = 0; k < t; ++k) {
        const i64 yr = wy * M + k / M, xr = wx * M + k % M;  // rolled coordinates
        const i64 yp = (yr + shift) % hp, xp = (xr + shift) % wp;
        const i64 sy = reflect(yp, q_src.h), sx = reflect(xp, q_src.w);
        auto f = pixel(q_src, sy, sx);
        if (modulator)
          for (i64 c = 0; c < q_src.c; ++c) f[static_cast<std::size_t>(c)] += (*modulator)[static_cast<std::size_t>(k * q_src.c + c)];
        kf.push_back(kv_src ? pixel(*kv_src, sy, sx) : f);
        qf.push_back(std::move(f));
        ys.push_back(yp);
        xs.push_back(xp);
        // Tokens that wrapped around the torus belong to a different region.
        const i64 ly = shift > 0 && yr >= hp - shift ? 1 : 0;
        const i64 lx = shift > 0 && xr >= wp - shift ? 1 : 0;
        label.push_back(ly * 2 + lx);
      }
      const auto res = attend(qf, kf, a, [&](i64 h, i64 i, i64 j) {
        const double mask = label[static_cast<std::size_t>(i)] != label[static_cast<std::size_t>(j)] ? -1e9 : 0.0;
        return a.table[static_cast<std::size_t>(h * nb * nb + rel_bucket(i, j, M))] + mask;
      });
      for (i64 k = 0; k < t; ++k) {
        const i64 yp = ys[static_cast<std::size_t>(k)], xp = xs[static_cast<std::size_t>(k)];
        if (yp >= q_src.h || xp >= q_src.w) continue;
        for (i64 c = 0; c < a.dim; ++c) out.at(c, yp, xp) = res[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
      }
    }
  return out;
}

Map global_attention(const Map& x, const Attention& a) {
  if (x.h != x.w) throw std::invalid_argument("global_attention oracle expects a square map");
  const i64 n = x.h * x.w;
  const i64 nb = 2 * x.h - 1;
  std::vector<Vec> feat;
  for (i64 i = 0; i < n; ++i) feat.push_back(pixel(x, i / x.w, i % x.w));
  const auto res = attend(feat, feat, a, [&](i64 h, i64 i, i64 j) {
    const i64 dr = i / x.w - j / x.w + x.h - 1, dc = i % x.w - j % x.w + x.w - 1;
    return a.table[static_cast<std::size_t>(h * nb * nb + dr * nb + dc)];
  });
  Map out(a.dim, x.h, x.w);
  for (i64 i = 0; i < n; ++i)
    for (i64 c = 0; c < a.dim; ++c) out.at(c, i / x.w, i % x.w) = res[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
  return out;
}

namespace {

Map pointwise_linear(const Map& x, const Vec& w, const Vec& b, i64 out_c) {
  Map out(out_c, x.h, x.w);
  for (i64 y = 0; y < x.h; ++y)
    for (i64 xx = 0; xx < x.w; ++xx)
      for (i64 o = 0; o < out_c; ++o) {
        double s = b.empty() ? 0.0 : b[static_cast<std::size_t>(o)];
        for (i64 c = 0; c < x.c; ++c) s += x.at(c, y, xx) * w[static_cast<std::size_t>(c * out_c + o)];
        out.at(o, y, xx) = s;
      }
  return out;
}

Map apply(Map m, double (*f)(double)) {
  for (auto& v : m.v) v = f(v);
  return m;
}

Map plus(Map a, const Map& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

}  // namespace

Map leff(const Map& x, const LeFF& p) {
  auto h = apply(pointwise_linear(x, p.w1, p.b1, p.hidden), gelu);
  h = apply(conv2d(h, p.dw, p.dwb, p.hidden, 3, 1, 1, p.hidden), gelu);
  return pointwise_linear(h, p.w2, p.b2, x.c);
}

template <typename T>
Map lewin_block(const Map& x, const uformer::LeWinBlockParams<T>& p) {
  if (p.skip != uformer::SkipAttention::none) throw std::invalid_argument("reference block covers self-attention only");
  const auto normed = layer_norm(x, values(p.norm1.gamma), values(p.norm1.beta));
  Vec mod;
  if (p.modulator) mod = values(p.modulator->bias);
  if (p.modulator && p.modulator_before_shift && p.shift() != 0) {
    throw std::invalid_argument("reference block places the modulator after the shift");
  }
  const auto attn = window_attention(normed, nullptr, attention_from(p.attn, p.window), p.shift(),
                                     p.modulator ? &mod : nullptr);
  const auto x1 = plus(x, attn);
  return plus(x1, leff(layer_norm(x1, values(p.norm2.gamma), values(p.norm2.beta)), leff_from(p.leff)));
}

namespace {

template <typename T>
Map conv(const Map& x, const uformer::ConvParams<T>& cp) {
  return conv2d(x, values(cp.weight), values(cp.bias), cp.weight.dim(0), cp.weight.dim(2), cp.options.stride,
                cp.options.padding, cp.options.groups);
}

Map pad_bottom_right(const Map& x, i64 ph, i64 pw) {
  Map out(x.c, x.h + ph, x.w + pw);
  for (i64 c = 0; c < x.c; ++c)
    for (i64 y = 0; y < out.h; ++y)
      for (i64 xx = 0; xx < out.w; ++xx) out.at(c, y, xx) = x.at(c, reflect(y, x.h), reflect(xx, x.w));
  return out;
}

Map crop(const Map& x, i64 h, i64 w) {
  Map out(x.c, h, w);
  for (i64 c = 0; c < x.c; ++c)
    for (i64 y = 0; y < h; ++y)
      for (i64 xx = 0; xx < w; ++xx) out.at(c, y, xx) = x.at(c, y, xx);
  return out;
}

Map stack(const Map& a, const Map& b) {
  Map out(a.c + b.c, a.h, a.w);
  std::copy(a.v.begin(), a.v.end(), out.v.begin());
  std::copy(b.v.begin(), b.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()));
  return out;
}

}  // namespace

template <typename T>
Map uformer_forward(const Map& input, const uformer::UformerParams<T>& p) {
  if (p.config.skip_mode != uformer::SkipMode::concat) throw std::invalid_argument("reference covers concat skips");
  const double slope = p.config.leaky_slope;
  auto y = conv(input, p.input_proj);
  for (auto& v : y.v) v = leaky_relu(v, slope);
  std::vector<Map> skips;
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    for (const auto& b : p.encoder[l]) y = lewin_block(y, b);
    skips.push_back(y);
    y = conv(pad_bottom_right(y, y.h % 2, y.w % 2), p.downsample[l]);
  }
  for (const auto& b : p.bottleneck) y = lewin_block(y, b);
  for (std::size_t i = p.decoder.size(); i-- > 0;) {
    const auto& up = p.upsample[i];
    y = conv_transpose2d(y, values(up.weight), values(up.bias), up.weight.dim(1), up.weight.dim(2), up.options.stride);
    y = crop(y, skips[i].h, skips[i].w);
    y = stack(y, skips[i]);
    for (const auto& b : p.decoder[i]) y = lewin_block(y, b);
  }
  return plus(input, conv(y, p.output_proj));
}

template Map lewin_block(const Map&, const uformer::LeWinBlockParams<float>&);
template Map lewin_block(const Map&, const uformer::LeWinBlockParams<double>&);
template Map uformer_forward(const Map&, const uformer::UformerParams<float>&);
template Map uformer_forward(const Map&, const uformer::UformerParams<double>&);

double psnr(const uformer::Image& a, const uformer::Image& b) {
  double se = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) se += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  const double mse = se / static_cast<double>(a.data.size());
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(const uformer::Image& a, const uformer::Image& b) {
  constexpr int K = 11;
  double g[K][K], total = 0.0;
  for (int u = 0; u < K; ++u)
    for (int v = 0; v < K; ++v) total += g[u][v] = std::exp(-((u - 5) * (u - 5) + (v - 5) * (v - 5)) / (2 * 1.5 * 1.5));
  for (auto& row : g)
    for (auto& e : row) e /= total;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double sum = 0.0;
  i64 count = 0;
  for (i64 c = 0; c < a.channels; ++c)
    for (i64 y = 0; y + K <= a.height; ++y)
      for (i64 x = 0; x + K <= a.width; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int u = 0; u < K; ++u)
          for (int v = 0; v < K; ++v) {
            const double pa = a.at(c, y + u, x + v), pb = b.at(c, y + u, x + v), w = g[u][v];
            ma += w * pa, mb += w * pb, saa += w * pa * pa, sbb += w * pb * pb, sab += w * pa * pb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        sum += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return sum / static_cast<double>(count);
}

double rel_error(const Vec& got, const Vec& want) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    num += (got[i] - want[i]) * (got[i] - want[i]);
    den += want[i] * want[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace ref
