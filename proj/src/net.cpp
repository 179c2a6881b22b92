#include "pfa/net.hpp"

#include <algorithm>

#include "pfa/rng.hpp"

namespace pfa {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnDecay = 0.99;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
  int h, w, cin, ho, wo, cout, fh, fw, stride, pad_top, pad_left;
};

ConvGeom conv_geom(const LayerSpec& l, const std::vector<int>& in,
                   const std::vector<int>& out) {
  ConvGeom g{};
  g.h = in[0];
  g.w = in[1];
  g.cin = in[2];
  g.ho = out[0];
  g.wo = out[1];
  g.cout = out[2];
  g.fh = l.kernel_h;
  g.fw = l.kernel_w;
  g.stride = l.stride;
  if (l.padding == PadMode::Same) {
    g.pad_top = std::max(0, ((g.ho - 1) * g.stride + g.fh - g.h)) / 2;
    g.pad_left = std::max(0, ((g.wo - 1) * g.stride + g.fw - g.w)) / 2;
  }
  return g;
}

template <typename T>
void im2col(const NdArray<T>& in, const ConvGeom& g, NdArray<T>& col) {
  const std::size_t b = in.shape[0];
  const std::size_t k = static_cast<std::size_t>(g.fh) * g.fw * g.cin;
  col = NdArray<T>({b * g.ho * g.wo, k});
  T* dst = col.data.data();
  for (std::size_t s = 0; s < b; ++s) {
    const T* img = in.data.data() + s * (static_cast<std::size_t>(g.h) * g.w * g.cin);
    for (int ho = 0; ho < g.ho; ++ho) {
      for (int wo = 0; wo < g.wo; ++wo) {
        for (int kh = 0; kh < g.fh; ++kh) {
          const int y = ho * g.stride - g.pad_top + kh;
          for (int kw = 0; kw < g.fw; ++kw) {
            const int x = wo * g.stride - g.pad_left + kw;
            if (y >= 0 && y < g.h && x >= 0 && x < g.w)
              std::copy_n(img + (static_cast<std::size_t>(y) * g.w + x) * g.cin, g.cin, dst);
            else
              std::fill_n(dst, g.cin, T(0));
            dst += g.cin;
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const NdArray<T>& dcol, const ConvGeom& g, NdArray<T>& dx) {
  const std::size_t b = dx.shape[0];
  const T* src = dcol.data.data();
  for (std::size_t s = 0; s < b; ++s) {
    T* img = dx.data.data() + s * (static_cast<std::size_t>(g.h) * g.w * g.cin);
    for (int ho = 0; ho < g.ho; ++ho) {
      for (int wo = 0; wo < g.wo; ++wo) {
        for (int kh = 0; kh < g.fh; ++kh) {
          const int y = ho * g.stride - g.pad_top + kh;
          for (int kw = 0; kw < g.fw; ++kw) {
            const int x = wo * g.stride - g.pad_left + kw;
            if (y >= 0 && y < g.h && x >= 0 && x < g.w) {
              T* cell = img + (static_cast<std::size_t>(y) * g.w + x) * g.cin;
              for (int ci = 0; ci < g.cin; ++ci) cell[ci] += src[ci];
            }
            src += g.cin;
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<T> to_scalar_vector(const TensorData& t) {
  const NdArray<double> d = tensor_to_f64(t);
  std::vector<T> out(d.data.size());
  for (std::size_t i = 0; i < d.data.size(); ++i) out[i] = static_cast<T>(d.data[i]);
  return out;
}

}  // namespace

void validate_config(const TrainConfig& c) {
  if (!(c.lr > 0.0)) fail(ErrorCode::InvalidParams, "learning rate must be positive");
  if (c.momentum < 0.0 || c.momentum >= 1.0)
    fail(ErrorCode::InvalidParams, "momentum must be in [0,1)");
  if (c.epochs < 0) fail(ErrorCode::InvalidParams, "epochs must be non-negative");
  if (c.batch_size < 1) fail(ErrorCode::InvalidParams, "batch size must be positive");
  if (c.weight_decay < 0.0) fail(ErrorCode::InvalidParams, "weight decay must be non-negative");
  if (c.lr_decay_every < 0) fail(ErrorCode::InvalidParams, "lr decay interval must be non-negative");
  if (!(c.lr_decay_factor > 0.0) || c.lr_decay_factor > 1.0)
    fail(ErrorCode::InvalidParams, "lr decay factor must be in (0,1]");
}

template <typename T>
Network<T>::Network(const ArchSpec& arch, const WeightBundle& weights) : arch_(arch) {
  shapes_ = infer_shapes(arch_);
  main_in_ = main_inputs(arch_);
  skip_in_ = skip_inputs(arch_);
  validate_weights(weights, arch_);

  states_.resize(arch_.layers.size());
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const LayerSpec& l = arch_.layers[i];
    State& s = states_[i];
    auto load = [&](WeightRole role) {
      s.params[role] = to_scalar_vector<T>(weights.at(l.id, role));
    };
    switch (l.kind) {
      case LayerKind::Conv2d:
      case LayerKind::Dense:
        load(WeightRole::Kernel);
        if (l.bias) load(WeightRole::Bias);
        break;
      case LayerKind::BatchNorm:
        load(WeightRole::Scale);
        load(WeightRole::Shift);
        load(WeightRole::MovingMean);
        load(WeightRole::MovingVariance);
        break;
      default:
        break;
    }
    for (const auto& [role, p] : s.params) {
      if (role == WeightRole::MovingMean || role == WeightRole::MovingVariance) continue;
      s.grads[role] = std::vector<T>(p.size(), T(0));
      s.velocity[role] = std::vector<T>(p.size(), T(0));
    }
  }
}

template <typename T>
void Network<T>::forward_layer(std::size_t i, const NdArray<T>& x, bool training) {
  const LayerSpec& l = arch_.layers[i];
  const NdArray<T>& in = buffer(main_in_[i], x);
  const std::size_t b = in.shape[0];
  State& s = states_[i];
  const std::vector<int>& oshape = shapes_[i];

  switch (l.kind) {
    case LayerKind::Conv2d: {
      const std::vector<int>& ishape =
          main_in_[i] < 0 ? arch_.input_shape : shapes_[main_in_[i]];
      const ConvGeom g = conv_geom(l, ishape, oshape);
      NdArray<T> col;
      im2col(in, g, col);
      s.out = NdArray<T>({b, static_cast<std::size_t>(g.ho), static_cast<std::size_t>(g.wo),
                          static_cast<std::size_t>(g.cout)});
      const std::size_t k = static_cast<std::size_t>(g.fh) * g.fw * g.cin;
      CMapM<T> colm(col.data.data(), static_cast<Eigen::Index>(b * g.ho * g.wo),
                    static_cast<Eigen::Index>(k));
      CMapM<T> wm(s.params.at(WeightRole::Kernel).data(), static_cast<Eigen::Index>(k),
                  g.cout);
      MapM<T> ym(s.out.data.data(), colm.rows(), g.cout);
      ym.noalias() = colm * wm;
      if (l.bias) {
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(
            s.params.at(WeightRole::Bias).data(), g.cout);
        ym.rowwise() += bias.transpose();
      }
      if (training) s.col = std::move(col);
      break;
    }
    case LayerKind::Dense: {
      const std::size_t cin = in.shape[1], cout = static_cast<std::size_t>(l.filters);
      s.out = NdArray<T>({b, cout});
      CMapM<T> xm(in.data.data(), static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(cin));
      CMapM<T> wm(s.params.at(WeightRole::Kernel).data(), static_cast<Eigen::Index>(cin),
                  static_cast<Eigen::Index>(cout));
      MapM<T> ym(s.out.data.data(), static_cast<Eigen::Index>(b),
                 static_cast<Eigen::Index>(cout));
      ym.noalias() = xm * wm;
      if (l.bias) {
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(
            s.params.at(WeightRole::Bias).data(), static_cast<Eigen::Index>(cout));
        ym.rowwise() += bias.transpose();
      }
      break;
    }
    case LayerKind::BatchNorm: {
      const std::size_t c = in.shape.back();
      const std::size_t n = in.numel() / c;
      s.out = NdArray<T>(in.shape);
      const std::vector<T>& scale = s.params.at(WeightRole::Scale);
      const std::vector<T>& shift = s.params.at(WeightRole::Shift);
      if (training) {
        std::vector<double> mean(c, 0.0), sqsum(c, 0.0);
        for (std::size_t e = 0; e < in.data.size(); ++e) {
          const double v = in.data[e];
          mean[e % c] += v;
          sqsum[e % c] += v * v;
        }
        s.batch_mean.resize(c);
        s.batch_invstd.resize(c);
        std::vector<T>& mmean = s.params.at(WeightRole::MovingMean);
        std::vector<T>& mvar = s.params.at(WeightRole::MovingVariance);
        for (std::size_t ch = 0; ch < c; ++ch) {
          mean[ch] /= static_cast<double>(n);
          const double var = std::max(0.0, sqsum[ch] / static_cast<double>(n) -
                                               mean[ch] * mean[ch]);
          s.batch_mean[ch] = static_cast<T>(mean[ch]);
          s.batch_invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + kBnEps));
          mmean[ch] = static_cast<T>(kBnDecay * mmean[ch] + (1.0 - kBnDecay) * mean[ch]);
          mvar[ch] = static_cast<T>(kBnDecay * mvar[ch] + (1.0 - kBnDecay) * var);
        }
        s.xhat = NdArray<T>(in.shape);
        for (std::size_t e = 0; e < in.data.size(); ++e) {
          const std::size_t ch = e % c;
          const T xh = (in.data[e] - s.batch_mean[ch]) * s.batch_invstd[ch];
          s.xhat.data[e] = xh;
          s.out.data[e] = scale[ch] * xh + shift[ch];
        }
      } else {
        const std::vector<T>& mmean = s.params.at(WeightRole::MovingMean);
        const std::vector<T>& mvar = s.params.at(WeightRole::MovingVariance);
        std::vector<T> a(c), bias(c);
        for (std::size_t ch = 0; ch < c; ++ch) {
          a[ch] = scale[ch] / static_cast<T>(std::sqrt(static_cast<double>(mvar[ch]) + kBnEps));
          bias[ch] = shift[ch] - a[ch] * mmean[ch];
        }
        for (std::size_t e = 0; e < in.data.size(); ++e) {
          const std::size_t ch = e % c;
          s.out.data[e] = a[ch] * in.data[e] + bias[ch];
        }
      }
      break;
    }
    case LayerKind::Relu:
      s.out = NdArray<T>(in.shape);
      for (std::size_t e = 0; e < in.data.size(); ++e)
        s.out.data[e] = in.data[e] > T(0) ? in.data[e] : T(0);
      break;
    case LayerKind::MaxPool: {
      const int h = shapes_[main_in_[i]][0], w = shapes_[main_in_[i]][1];
      const int c = shapes_[main_in_[i]][2];
      const int ho = oshape[0], wo = oshape[1];
      const int stride = l.pool_stride > 0 ? l.pool_stride : l.pool;
      s.out = NdArray<T>({b, static_cast<std::size_t>(ho), static_cast<std::size_t>(wo),
                          static_cast<std::size_t>(c)});
      s.argmax.assign(s.out.numel(), 0);
      std::size_t o = 0;
      for (std::size_t sm = 0; sm < b; ++sm) {
        const T* img = in.data.data() + sm * (static_cast<std::size_t>(h) * w * c);
        for (int y = 0; y < ho; ++y)
          for (int x = 0; x < wo; ++x)
            for (int ch = 0; ch < c; ++ch, ++o) {
              T best = img[((static_cast<std::size_t>(y) * stride) * w + x * stride) * c + ch];
              std::size_t best_at = ((static_cast<std::size_t>(y) * stride) * w + x * stride) * c + ch;
              for (int ky = 0; ky < l.pool; ++ky)
                for (int kx = 0; kx < l.pool; ++kx) {
                  const std::size_t at =
                      ((static_cast<std::size_t>(y) * stride + ky) * w + x * stride + kx) * c + ch;
                  if (img[at] > best) {
                    best = img[at];
                    best_at = at;
                  }
                }
              s.out.data[o] = best;
              s.argmax[o] = static_cast<int>(best_at);
            }
      }
      break;
    }
    case LayerKind::GlobalAvgPool: {
      const std::size_t h = in.shape[1], w = in.shape[2], c = in.shape[3];
      s.out = NdArray<T>({b, c});
      const double denom = static_cast<double>(h * w);
      for (std::size_t sm = 0; sm < b; ++sm)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum = 0.0;
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) sum += in(sm, y, x, ch);
          s.out(sm, ch) = static_cast<T>(sum / denom);
        }
      break;
    }
    case LayerKind::AddSkip: {
      const NdArray<T>& skip = buffer(skip_in_[i], x);
      const std::size_t cm = in.shape.back(), cs = skip.shape.back();
      const std::size_t co = std::max(cm, cs);
      std::vector<std::size_t> oshape_b = in.shape;
      oshape_b.back() = co;
      s.out = NdArray<T>(oshape_b);
      const std::size_t cells = s.out.numel() / co;
      for (std::size_t cell = 0; cell < cells; ++cell) {
        const T* pm = in.data.data() + cell * cm;
        const T* ps = skip.data.data() + cell * cs;
        T* po = s.out.data.data() + cell * co;
        for (std::size_t ch = 0; ch < co; ++ch)
          po[ch] = (ch < cm ? pm[ch] : T(0)) + (ch < cs ? ps[ch] : T(0));
      }
      break;
    }
  }
}

template <typename T>
const NdArray<T>& Network<T>::forward(const NdArray<T>& x, bool training) {
  if (x.shape.size() != arch_.input_shape.size() + 1)
    fail(ErrorCode::ShapeError, "input rank does not match the architecture");
  for (std::size_t d = 0; d < arch_.input_shape.size(); ++d)
    if (x.shape[d + 1] != static_cast<std::size_t>(arch_.input_shape[d]))
      fail(ErrorCode::ShapeError, "input shape does not match the architecture");
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) forward_layer(i, x, training);
  return states_.back().out;
}

template <typename T>
double Network<T>::loss(const NdArray<T>& x, const std::vector<int>& labels, bool training) {
  const NdArray<T>& logits = forward(x, training);
  if (logits.rank() != 2)
    fail(ErrorCode::ShapeError, "network must end in a flat layer for classification");
  const std::size_t b = logits.shape[0], k = logits.shape[1];
  if (labels.size() != b) fail(ErrorCode::ShapeError, "label count does not match batch");

  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      fail(ErrorCode::ShapeError, "label out of range");
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(logits(i, j)));
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(logits(i, j)) - mx);
    total += mx + std::log(sum) - static_cast<double>(logits(i, labels[i]));
  }
  return total / static_cast<double>(b);
}

template <typename T>
void Network<T>::backward_layer(std::size_t i, const NdArray<T>& x) {
  const LayerSpec& l = arch_.layers[i];
  State& s = states_[i];
  const NdArray<T>& in = buffer(main_in_[i], x);
  NdArray<T>& din = main_in_[i] < 0 ? input_grad_ : states_[main_in_[i]].dout;
  const NdArray<T>& dout = s.dout;
  const std::size_t b = in.shape[0];

  switch (l.kind) {
    case LayerKind::Conv2d: {
      const std::vector<int>& ishape =
          main_in_[i] < 0 ? arch_.input_shape : shapes_[main_in_[i]];
      const ConvGeom g = conv_geom(l, ishape, shapes_[i]);
      const std::size_t k = static_cast<std::size_t>(g.fh) * g.fw * g.cin;
      const Eigen::Index rows = static_cast<Eigen::Index>(b * g.ho * g.wo);
      CMapM<T> dym(dout.data.data(), rows, g.cout);
      CMapM<T> colm(s.col.data.data(), rows, static_cast<Eigen::Index>(k));
      MapM<T> dwm(s.grads.at(WeightRole::Kernel).data(), static_cast<Eigen::Index>(k), g.cout);
      dwm.noalias() += colm.transpose() * dym;
      if (l.bias) {
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dbm(
            s.grads.at(WeightRole::Bias).data(), g.cout);
        dbm.noalias() += dym.colwise().sum().transpose();
      }
      NdArray<T> dcol({b * g.ho * g.wo, k});
      CMapM<T> wm(s.params.at(WeightRole::Kernel).data(), static_cast<Eigen::Index>(k), g.cout);
      MapM<T> dcolm(dcol.data.data(), rows, static_cast<Eigen::Index>(k));
      dcolm.noalias() = dym * wm.transpose();
      col2im_add(dcol, g, din);
      break;
    }
    case LayerKind::Dense: {
      const std::size_t cin = in.shape[1], cout = static_cast<std::size_t>(l.filters);
      CMapM<T> xm(in.data.data(), static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(cin));
      CMapM<T> dym(dout.data.data(), static_cast<Eigen::Index>(b),
                   static_cast<Eigen::Index>(cout));
      MapM<T> dwm(s.grads.at(WeightRole::Kernel).data(), static_cast<Eigen::Index>(cin),
                  static_cast<Eigen::Index>(cout));
      dwm.noalias() += xm.transpose() * dym;
      if (l.bias) {
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dbm(
            s.grads.at(WeightRole::Bias).data(), static_cast<Eigen::Index>(cout));
        dbm.noalias() += dym.colwise().sum().transpose();
      }
      CMapM<T> wm(s.params.at(WeightRole::Kernel).data(), static_cast<Eigen::Index>(cin),
                  static_cast<Eigen::Index>(cout));
      MapM<T> dxm(din.data.data(), static_cast<Eigen::Index>(b),
                  static_cast<Eigen::Index>(cin));
      dxm.noalias() += dym * wm.transpose();
      break;
    }
    case LayerKind::BatchNorm: {
      const std::size_t c = in.shape.back();
      const std::size_t n = in.numel() / c;
      const std::vector<T>& scale = s.params.at(WeightRole::Scale);
      std::vector<T>& dscale = s.grads.at(WeightRole::Scale);
      std::vector<T>& dshift = s.grads.at(WeightRole::Shift);
      std::vector<double> sum_dxh(c, 0.0), sum_dxh_xh(c, 0.0);
      for (std::size_t e = 0; e < in.data.size(); ++e) {
        const std::size_t ch = e % c;
        const double dy = dout.data[e];
        const double xh = s.xhat.data[e];
        dscale[ch] += static_cast<T>(dy * xh);
        dshift[ch] += static_cast<T>(dy);
        const double dxh = dy * static_cast<double>(scale[ch]);
        sum_dxh[ch] += dxh;
        sum_dxh_xh[ch] += dxh * xh;
      }
      const double dn = static_cast<double>(n);
      for (std::size_t e = 0; e < in.data.size(); ++e) {
        const std::size_t ch = e % c;
        const double dxh = static_cast<double>(dout.data[e]) * scale[ch];
        const double xh = s.xhat.data[e];
        din.data[e] += static_cast<T>(static_cast<double>(s.batch_invstd[ch]) / dn *
                                      (dn * dxh - sum_dxh[ch] - xh * sum_dxh_xh[ch]));
      }
      break;
    }
    case LayerKind::Relu:
      for (std::size_t e = 0; e < in.data.size(); ++e)
        if (in.data[e] > T(0)) din.data[e] += dout.data[e];
      break;
    case LayerKind::MaxPool: {
      const std::size_t h = in.shape[1], w = in.shape[2], c = in.shape[3];
      const std::size_t img = h * w * c;
      const std::size_t per_sample = dout.numel() / b;
      for (std::size_t sm = 0; sm < b; ++sm) {
        T* dimg = din.data.data() + sm * img;
        const T* dsrc = dout.data.data() + sm * per_sample;
        const int* amax = s.argmax.data() + sm * per_sample;
        for (std::size_t o = 0; o < per_sample; ++o) dimg[amax[o]] += dsrc[o];
      }
      break;
    }
    case LayerKind::GlobalAvgPool: {
      const std::size_t h = in.shape[1], w = in.shape[2], c = in.shape[3];
      const T denom = static_cast<T>(h * w);
      for (std::size_t sm = 0; sm < b; ++sm)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T g = dout(sm, ch) / denom;
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) din(sm, y, x, ch) += g;
        }
      break;
    }
    case LayerKind::AddSkip: {
      const NdArray<T>& skip = buffer(skip_in_[i], x);
      NdArray<T>& dskip = skip_in_[i] < 0 ? input_grad_ : states_[skip_in_[i]].dout;
      const std::size_t cm = in.shape.back(), cs = skip.shape.back();
      const std::size_t co = dout.shape.back();
      const std::size_t cells = dout.numel() / co;
      for (std::size_t cell = 0; cell < cells; ++cell) {
        const T* pd = dout.data.data() + cell * co;
        T* pm = din.data.data() + cell * cm;
        T* ps = dskip.data.data() + cell * cs;
        for (std::size_t ch = 0; ch < cm; ++ch) pm[ch] += pd[ch];
        for (std::size_t ch = 0; ch < cs; ++ch) ps[ch] += pd[ch];
      }
      break;
    }
  }
}

template <typename T>
double Network<T>::loss_and_grad(const NdArray<T>& x, const std::vector<int>& labels) {
  const double value = loss(x, labels, true);

  for (State& s : states_) {
    for (auto& [role, g] : s.grads) std::fill(g.begin(), g.end(), T(0));
    s.dout = NdArray<T>(s.out.shape);  // zero-initialized
  }
  input_grad_ = NdArray<T>(x.shape);

  // d(mean CE)/d(logits) = (softmax - onehot) / batch
  State& last = states_.back();
  const NdArray<T>& logits = last.out;
  const std::size_t b = logits.shape[0], k = logits.shape[1];
  for (std::size_t i = 0; i < b; ++i) {
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(logits(i, j)));
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(logits(i, j)) - mx);
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(static_cast<double>(logits(i, j)) - mx) / sum;
      last.dout(i, j) =
          static_cast<T>((p - (static_cast<std::size_t>(labels[i]) == j ? 1.0 : 0.0)) /
                         static_cast<double>(b));
    }
  }

  for (std::size_t i = arch_.layers.size(); i-- > 0;) backward_layer(i, x);
  return value;
}

template <typename T>
void Network<T>::sgd_step(double lr, double momentum, double weight_decay) {
  for (State& s : states_) {
    for (auto& [role, g] : s.grads) {
      std::vector<T>& w = s.params.at(role);
      std::vector<T>& v = s.velocity.at(role);
      const T wd = role == WeightRole::Kernel ? static_cast<T>(weight_decay) : T(0);
      for (std::size_t e = 0; e < w.size(); ++e) {
        v[e] = static_cast<T>(momentum) * v[e] - static_cast<T>(lr) * (g[e] + wd * w[e]);
        w[e] += v[e];
      }
    }
  }
}

template <typename T>
WeightBundle Network<T>::weights() const {
  WeightBundle out;
  const std::vector<int> inputs = main_in_;
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const LayerSpec& l = arch_.layers[i];
    const State& s = states_[i];
    if (s.params.empty()) continue;
    const std::vector<int>& in = inputs[i] < 0 ? arch_.input_shape : shapes_[inputs[i]];
    auto store = [&](WeightRole role, std::vector<std::size_t> shape) {
      const std::vector<T>& p = s.params.at(role);
      if constexpr (std::is_same_v<T, float>) {
        out.set(l.id, role, NdArray<float>(std::move(shape), p));
      } else {
        NdArray<double> a(std::move(shape));
        for (std::size_t e = 0; e < p.size(); ++e) a.data[e] = p[e];
        out.set(l.id, role, std::move(a));
      }
    };
    switch (l.kind) {
      case LayerKind::Conv2d:
        store(WeightRole::Kernel,
              {static_cast<std::size_t>(l.kernel_h), static_cast<std::size_t>(l.kernel_w),
               static_cast<std::size_t>(in[2]), static_cast<std::size_t>(l.filters)});
        if (l.bias) store(WeightRole::Bias, {static_cast<std::size_t>(l.filters)});
        break;
      case LayerKind::Dense:
        store(WeightRole::Kernel,
              {static_cast<std::size_t>(in[0]), static_cast<std::size_t>(l.filters)});
        if (l.bias) store(WeightRole::Bias, {static_cast<std::size_t>(l.filters)});
        break;
      case LayerKind::BatchNorm: {
        const std::size_t c = static_cast<std::size_t>(in.back());
        store(WeightRole::Scale, {c});
        store(WeightRole::Shift, {c});
        store(WeightRole::MovingMean, {c});
        store(WeightRole::MovingVariance, {c});
        break;
      }
      default:
        break;
    }
  }
  return out;
}

template <typename T>
const NdArray<T>& Network<T>::activation(const std::string& layer_id) const {
  const int idx = find_layer(arch_, layer_id);
  if (idx < 0) fail(ErrorCode::InvalidInput, "no layer named '" + layer_id + "'");
  return states_[idx].out;
}

template <typename T>
std::vector<T>& Network<T>::param(const std::string& layer_id, WeightRole role) {
  const int idx = find_layer(arch_, layer_id);
  if (idx < 0) fail(ErrorCode::InvalidInput, "no layer named '" + layer_id + "'");
  return states_[idx].params.at(role);
}

template <typename T>
const std::vector<T>& Network<T>::grad(const std::string& layer_id, WeightRole role) const {
  const int idx = find_layer(arch_, layer_id);
  if (idx < 0) fail(ErrorCode::InvalidInput, "no layer named '" + layer_id + "'");
  return states_[idx].grads.at(role);
}

template class Network<float>;
template class Network<double>;

WeightBundle init_weights(const ArchSpec& arch, std::uint64_t seed) {
  const auto shapes = infer_shapes(arch);
  const auto inputs = main_inputs(arch);
  WeightBundle bundle;

  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    const std::vector<int>& in = inputs[i] < 0 ? arch.input_shape : shapes[inputs[i]];
    Rng rng(derive_seed(seed, "init-" + l.id));
    switch (l.kind) {
      case LayerKind::Conv2d: {
        const std::size_t fan_in = static_cast<std::size_t>(l.kernel_h) * l.kernel_w * in[2];
        const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        NdArray<float> kernel({static_cast<std::size_t>(l.kernel_h),
                               static_cast<std::size_t>(l.kernel_w),
                               static_cast<std::size_t>(in[2]),
                               static_cast<std::size_t>(l.filters)});
        for (float& v : kernel.data) v = static_cast<float>(sd * rng.normal());
        bundle.set(l.id, WeightRole::Kernel, std::move(kernel));
        if (l.bias)
          bundle.set(l.id, WeightRole::Bias,
                     NdArray<float>({static_cast<std::size_t>(l.filters)}));
        break;
      }
      case LayerKind::Dense: {
        const double sd = std::sqrt(2.0 / static_cast<double>(in[0]));
        NdArray<float> kernel(
            {static_cast<std::size_t>(in[0]), static_cast<std::size_t>(l.filters)});
        for (float& v : kernel.data) v = static_cast<float>(sd * rng.normal());
        bundle.set(l.id, WeightRole::Kernel, std::move(kernel));
        if (l.bias)
          bundle.set(l.id, WeightRole::Bias,
                     NdArray<float>({static_cast<std::size_t>(l.filters)}));
        break;
      }
      case LayerKind::BatchNorm: {
        const std::size_t c = static_cast<std::size_t>(in.back());
        NdArray<float> ones({c});
        std::fill(ones.data.begin(), ones.data.end(), 1.0f);
        bundle.set(l.id, WeightRole::Scale, ones);
        bundle.set(l.id, WeightRole::Shift, NdArray<float>({c}));
        bundle.set(l.id, WeightRole::MovingMean, NdArray<float>({c}));
        bundle.set(l.id, WeightRole::MovingVariance, std::move(ones));
        break;
      }
      default:
        break;
    }
  }
  return bundle;
}

namespace {

NdArray<float> gather_batch(const SynthDataset& ds, const std::vector<int>& idx,
                            std::size_t lo, std::size_t hi) {
  const std::size_t row = ds.images.numel() / ds.images.shape[0];
  std::vector<std::size_t> shape = ds.images.shape;
  shape[0] = hi - lo;
  NdArray<float> out(shape);
  for (std::size_t i = lo; i < hi; ++i)
    std::copy_n(ds.images.data.begin() + static_cast<std::size_t>(idx[i]) * row, row,
                out.data.begin() + (i - lo) * row);
  return out;
}

void check_dataset_shape(const ArchSpec& arch, const SynthDataset& ds) {
  if (arch.input_shape.size() != 3 || ds.images.rank() != 4)
    fail(ErrorCode::ShapeError, "dataset and architecture disagree on input rank");
  for (int d = 0; d < 3; ++d)
    if (static_cast<std::size_t>(arch.input_shape[d]) != ds.images.shape[d + 1])
      fail(ErrorCode::ShapeError, "dataset and architecture disagree on input shape");
}

}  // namespace

TrainResult train(const ArchSpec& arch, const SynthDataset& train_set,
                  const SynthDataset& test_set, const TrainConfig& config,
                  const WeightBundle* warm_start) {
  validate_config(config);
  check_dataset_shape(arch, train_set);
  check_dataset_shape(arch, test_set);

  const WeightBundle start =
      warm_start ? *warm_start : init_weights(arch, derive_seed(config.seed, "init"));
  Network<float> net(arch, start);

  const int n = static_cast<int>(train_set.labels.size());
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));

  TrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double lr = config.lr;
    if (config.lr_decay_every > 0)
      lr *= std::pow(config.lr_decay_factor, epoch / config.lr_decay_every);
    shuffle_rng.shuffle(idx);

    double epoch_total = 0.0;
    for (int lo = 0; lo < n; lo += config.batch_size) {
      const int hi = std::min(n, lo + config.batch_size);
      const NdArray<float> xb = gather_batch(train_set, idx, lo, hi);
      std::vector<int> yb(hi - lo);
      for (int i = lo; i < hi; ++i) yb[i - lo] = train_set.labels[idx[i]];
      const double batch_loss = net.loss_and_grad(xb, yb);
      if (!std::isfinite(batch_loss))
        fail(ErrorCode::DivergedLoss,
             "loss became non-finite at epoch " + std::to_string(epoch));
      net.sgd_step(lr, config.momentum, config.weight_decay);
      epoch_total += batch_loss * (hi - lo);
    }
    result.epoch_loss.push_back(epoch_total / n);
  }

  result.weights = net.weights();
  // Batchnorm can keep the loss finite while the raw parameters overflow, so
  // a blown-up run is not always caught by the per-batch loss check above.
  for (const auto& [layer, roles] : result.weights.by_layer)
    for (const auto& [role, tensor] : roles)
      if (!tensor_all_finite(tensor))
        fail(ErrorCode::DivergedLoss,
             "training produced non-finite weights in layer '" + layer + "'");
  result.test_accuracy = evaluate(arch, result.weights, test_set);
  return result;
}

double evaluate(const ArchSpec& arch, const WeightBundle& weights, const SynthDataset& ds) {
  check_dataset_shape(arch, ds);
  Network<float> net(arch, weights);
  const int n = static_cast<int>(ds.labels.size());
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;

  int hits = 0;
  constexpr int kEvalBatch = 256;
  for (int lo = 0; lo < n; lo += kEvalBatch) {
    const int hi = std::min(n, lo + kEvalBatch);
    const NdArray<float> xb = gather_batch(ds, idx, lo, hi);
    const NdArray<float>& logits = net.forward(xb, false);
    const std::size_t k = logits.shape[1];
    for (int i = 0; i < hi - lo; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (logits(i, j) > logits(i, best)) best = j;
      if (static_cast<int>(best) == ds.labels[lo + i]) ++hits;
    }
  }
  return static_cast<double>(hits) / n;
}

ActivationDump dump_activations(const ArchSpec& arch, const WeightBundle& weights,
                                const SynthDataset& ds,
                                const std::filesystem::path& manifest,
                                const std::vector<std::string>& layer_filter) {
  check_dataset_shape(arch, ds);
  std::vector<std::string> capture = layer_filter;
  if (capture.empty()) capture = analyzable_layers(arch);
  for (const std::string& id : capture) {
    const int idx = find_layer(arch, id);
    if (idx < 0 || !arch.layers[idx].analyzable)
      fail(ErrorCode::InvalidInput, "cannot dump non-analyzable layer '" + id + "'");
  }

  Network<float> net(arch, weights);
  const auto shapes = infer_shapes(arch);
  const std::size_t m = ds.labels.size();

  std::vector<std::pair<std::string, TensorData>> outputs;
  std::vector<NdArray<float>*> dest;
  for (const std::string& id : capture) {
    const std::vector<int>& s = shapes[find_layer(arch, id)];
    std::vector<std::size_t> shape{m};
    for (int d : s) shape.push_back(static_cast<std::size_t>(d));
    outputs.emplace_back(id, NdArray<float>(shape));
  }

  std::vector<int> idx(m);
  for (std::size_t i = 0; i < m; ++i) idx[i] = static_cast<int>(i);
  constexpr std::size_t kChunk = 128;
  for (std::size_t lo = 0; lo < m; lo += kChunk) {
    const std::size_t hi = std::min(m, lo + kChunk);
    const NdArray<float> xb = gather_batch(ds, idx, lo, hi);
    net.forward(xb, false);
    for (std::size_t c = 0; c < capture.size(); ++c) {
      const NdArray<float>& act = net.activation(capture[c]);
      NdArray<float>& full = std::get<NdArray<float>>(outputs[c].second);
      const std::size_t row = act.numel() / act.shape[0];
      std::copy_n(act.data.begin(), act.numel(), full.data.begin() + lo * row);
    }
  }

  // Non-finite responses mean the model itself blew up; report that as a
  // numerical failure instead of letting the file validator reject the dump.
  for (const auto& [id, tensor] : outputs)
    if (!tensor_all_finite(tensor))
      fail(ErrorCode::NumericalFailure,
           "layer '" + id + "': model produced non-finite activations");

  save_dump(manifest, outputs,
            "responses captured at analyzable layer outputs (pre-batchnorm, pre-activation)");
  return load_dump(manifest);
}

ArchSpec simple_cnn_mini(int classes, int height, int width, int channels) {
  ArchSpec arch;
  arch.input_shape = {height, width, channels};
  auto conv = [](const std::string& id, int filters, int k) {
    LayerSpec l;
    l.id = id;
    l.kind = LayerKind::Conv2d;
    l.filters = filters;
    l.kernel_h = l.kernel_w = k;
    l.analyzable = true;
    return l;
  };
  auto plain = [](const std::string& id, LayerKind kind) {
    LayerSpec l;
    l.id = id;
    l.kind = kind;
    return l;
  };
  auto block = [&](const std::string& id, int filters, int k) {
    arch.layers.push_back(conv(id, filters, k));
    arch.layers.push_back(plain(id + "_bn", LayerKind::BatchNorm));
    arch.layers.push_back(plain(id + "_relu", LayerKind::Relu));
  };

  block("conv1", 16, 3);
  block("conv2", 16, 3);
  LayerSpec pool = plain("pool1", LayerKind::MaxPool);
  pool.pool = 2;
  pool.pool_stride = 2;
  arch.layers.push_back(pool);
  block("conv3", 32, 3);
  block("conv4", 32, 3);
  block("conv5", 32, 3);
  block("head", 32, 1);
  // The classifier conv stays plain so its logits keep their scale.
  arch.layers.push_back(conv("cls", classes, 1));
  arch.layers.push_back(plain("gap", LayerKind::GlobalAvgPool));
  validate_arch(arch);
  return arch;
}

ArchSpec simple_cnn(int classes) {
  ArchSpec arch;
  arch.input_shape = {32, 32, 3};
  auto conv = [](const std::string& id, int filters, int k) {
    LayerSpec l;
    l.id = id;
    l.kind = LayerKind::Conv2d;
    l.filters = filters;
    l.kernel_h = l.kernel_w = k;
    l.analyzable = true;
    return l;
  };
  auto plain = [](const std::string& id, LayerKind kind) {
    LayerSpec l;
    l.id = id;
    l.kind = kind;
    return l;
  };
  auto block = [&](const std::string& id, int filters, int k) {
    arch.layers.push_back(conv(id, filters, k));
    arch.layers.push_back(plain(id + "_bn", LayerKind::BatchNorm));
    arch.layers.push_back(plain(id + "_relu", LayerKind::Relu));
  };

  block("conv1", 96, 3);
  block("conv2", 96, 3);
  block("conv3", 96, 3);
  LayerSpec pool = plain("pool1", LayerKind::MaxPool);
  pool.pool = 2;
  pool.pool_stride = 2;
  arch.layers.push_back(pool);
  block("conv4", 192, 3);
  block("conv5", 192, 3);
  block("conv6", 192, 3);
  block("conv7", 192, 3);
  block("conv8", 192, 1);
  block("conv9", classes, 1);
  arch.layers.push_back(plain("gap", LayerKind::GlobalAvgPool));
  validate_arch(arch);
  return arch;
}

}  // namespace pfa
