#include <algorithm>
#include <cmath>
#include <limits>

#include "driftguard/error.hpp"
#include "driftguard/nn.hpp"

namespace driftguard::nn {

Param::Param(std::string n, std::vector<std::size_t> s, ParamRole r) : name(std::move(n)), shape(std::move(s)), role(r) {
  std::size_t count = 1;
  for (auto d : shape) count *= d;
  value.assign(count, 0.0);
  grad.assign(count, 0.0);
}

int Prediction::argmax() const {
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

double Prediction::confidence() const { return *std::max_element(probs.begin(), probs.end()); }

std::array<double, kNumStages> softmax(const std::array<double, kNumStages>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::array<double, kNumStages> p{};
  double sum = 0.0;
  for (std::size_t c = 0; c < kNumStages; ++c) {
    p[c] = std::exp(logits[c] - mx);
    sum += p[c];
  }
  for (auto& v : p) v /= sum;
  return p;
}

double entropy(std::span<const double> probs) {
  double sum = 0.0;
  double h = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw Error(Errc::NotADistribution, "negative or NaN probability");
    sum += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw Error(Errc::NotADistribution, "probabilities sum to " + std::to_string(sum));
  }
  return std::max(0.0, h);
}

std::array<double, kNumStages> entropy_grad_logits(const std::array<double, kNumStages>& probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  std::array<double, kNumStages> g{};
  for (std::size_t c = 0; c < kNumStages; ++c) {
    const double p = probs[c];
    g[c] = p > 0.0 ? p * (-std::log(p) - h) : 0.0;
  }
  return g;
}

// ---------------------------------------------------------------------------

Conv1d::Conv1d(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
               bool depthwise)
    : weight(std::move(name), {out, depthwise ? 1 : in, kernel}, ParamRole::Weight),
      in_(in),
      out_(out),
      kernel_(kernel),
      stride_(stride),
      pad_(kernel / 2),
      depthwise_(depthwise) {}

namespace {

// Output steps t for which input index t*stride + j - pad lies in [0, in_len).
struct TRange {
  std::size_t lo, hi;  // [lo, hi)
};

TRange valid_range(std::size_t j, std::size_t pad, std::size_t stride, std::size_t in_len, std::size_t out_len) {
  std::size_t lo = 0;
  if (j < pad) lo = (pad - j + stride - 1) / stride;
  // t*stride + j - pad <= in_len - 1
  const long long lim = static_cast<long long>(in_len) - 1 - static_cast<long long>(j) + static_cast<long long>(pad);
  std::size_t hi = lim < 0 ? 0 : static_cast<std::size_t>(lim) / stride + 1;
  hi = std::min(hi, out_len);
  return {std::min(lo, hi), hi};
}

// y[q] += sum_p w[q * wq + p * wp] * x[p] over rows of length T, four input
// rows at a time so each output element is loaded and stored once per group.
void pointwise_accumulate(const double* w, std::size_t wq, std::size_t wp, const double* x, double* y,
                          std::size_t n_out, std::size_t n_in, std::size_t T) {
  for (std::size_t q = 0; q < n_out; ++q) {
    double* yr = y + q * T;
    std::size_t p = 0;
    for (; p + 4 <= n_in; p += 4) {
      const double w0 = w[q * wq + p * wp], w1 = w[q * wq + (p + 1) * wp];
      const double w2 = w[q * wq + (p + 2) * wp], w3 = w[q * wq + (p + 3) * wp];
      const double* x0 = x + p * T;
      const double* x1 = x0 + T;
      const double* x2 = x1 + T;
      const double* x3 = x2 + T;
      for (std::size_t t = 0; t < T; ++t) yr[t] += w0 * x0[t] + w1 * x1[t] + w2 * x2[t] + w3 * x3[t];
    }
    for (; p < n_in; ++p) {
      const double wv = w[q * wq + p * wp];
      const double* xr = x + p * T;
      for (std::size_t t = 0; t < T; ++t) yr[t] += wv * xr[t];
    }
  }
}

// Dot product with four interleaved partial sums (vectorizable without
// reassociating a single accumulator).
double dot(const double* a, const double* b, std::size_t n) {
  double s[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t t = 0;
  for (; t + 4 <= n; t += 4) {
    for (std::size_t m = 0; m < 4; ++m) s[m] += a[t + m] * b[t + m];
  }
  for (; t < n; ++t) s[0] += a[t] * b[t];
  return (s[0] + s[1]) + (s[2] + s[3]);
}

}  // namespace

Tensor Conv1d::forward(const Tensor& x) const {
  const std::size_t L = x.length;
  const std::size_t T = out_length(L);
  Tensor y(x.batch, out_, T);
  const double* w = weight.value.data();
  for (std::size_t b = 0; b < x.batch; ++b) {
    if (depthwise_) {
      for (std::size_t c = 0; c < out_; ++c) {
        double* yr = y.row(b, c);
        const double* xr = x.row(b, c);
        for (std::size_t j = 0; j < kernel_; ++j) {
          const double wj = w[c * kernel_ + j];
          const auto r = valid_range(j, pad_, stride_, L, T);
          for (std::size_t t = r.lo; t < r.hi; ++t) yr[t] += wj * xr[t * stride_ + j - pad_];
        }
      }
    } else if (kernel_ == 1 && stride_ == 1) {
      pointwise_accumulate(w, in_, 1, x.row(b, 0), y.row(b, 0), out_, in_, T);
    } else {
      for (std::size_t o = 0; o < out_; ++o) {
        double* yr = y.row(b, o);
        for (std::size_t i = 0; i < in_; ++i) {
          const double* xr = x.row(b, i);
          for (std::size_t j = 0; j < kernel_; ++j) {
            const double wj = w[(o * in_ + i) * kernel_ + j];
            const auto r = valid_range(j, pad_, stride_, L, T);
            for (std::size_t t = r.lo; t < r.hi; ++t) yr[t] += wj * xr[t * stride_ + j - pad_];
          }
        }
      }
    }
  }
  return y;
}

Tensor Conv1d::backward(const Tensor& x, const Tensor& dy, bool param_grads, bool input_grad) {
  const std::size_t L = x.length;
  const std::size_t T = dy.length;
  Tensor dx;
  if (input_grad) dx = Tensor(x.batch, in_, L);
  const double* w = weight.value.data();
  double* gw = weight.grad.data();
  for (std::size_t b = 0; b < x.batch; ++b) {
    if (depthwise_) {
      for (std::size_t c = 0; c < out_; ++c) {
        const double* dyr = dy.row(b, c);
        const double* xr = x.row(b, c);
        for (std::size_t j = 0; j < kernel_; ++j) {
          const auto r = valid_range(j, pad_, stride_, L, T);
          if (param_grads) {
            double acc = 0.0;
            for (std::size_t t = r.lo; t < r.hi; ++t) acc += dyr[t] * xr[t * stride_ + j - pad_];
            gw[c * kernel_ + j] += acc;
          }
          if (input_grad) {
            double* dxr = dx.row(b, c);
            const double wj = w[c * kernel_ + j];
            for (std::size_t t = r.lo; t < r.hi; ++t) dxr[t * stride_ + j - pad_] += wj * dyr[t];
          }
        }
      }
    } else if (kernel_ == 1 && stride_ == 1) {
      if (param_grads) {
        for (std::size_t o = 0; o < out_; ++o) {
          for (std::size_t i = 0; i < in_; ++i) gw[o * in_ + i] += dot(dy.row(b, o), x.row(b, i), T);
        }
      }
      if (input_grad) pointwise_accumulate(w, 1, in_, dy.row(b, 0), dx.row(b, 0), in_, out_, T);
    } else {
      for (std::size_t o = 0; o < out_; ++o) {
        const double* dyr = dy.row(b, o);
        for (std::size_t i = 0; i < in_; ++i) {
          const double* xr = x.row(b, i);
          for (std::size_t j = 0; j < kernel_; ++j) {
            const auto r = valid_range(j, pad_, stride_, L, T);
            const std::size_t widx = (o * in_ + i) * kernel_ + j;
            if (param_grads) {
              double acc = 0.0;
              for (std::size_t t = r.lo; t < r.hi; ++t) acc += dyr[t] * xr[t * stride_ + j - pad_];
              gw[widx] += acc;
            }
            if (input_grad) {
              double* dxr = dx.row(b, i);
              for (std::size_t t = r.lo; t < r.hi; ++t) dxr[t * stride_ + j - pad_] += w[widx] * dyr[t];
            }
          }
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

BatchNorm1d::BatchNorm1d(std::string name, std::size_t channels, double momentum, double eps)
    : gamma(name + ".gamma", {channels}, ParamRole::BnGamma),
      beta(name + ".beta", {channels}, ParamRole::BnBeta),
      running_mean{name + ".running_mean", {channels}, std::vector<double>(channels, 0.0)},
      running_var{name + ".running_var", {channels}, std::vector<double>(channels, 1.0)},
      momentum_(momentum),
      eps_(eps) {
  std::fill(gamma.value.begin(), gamma.value.end(), 1.0);
}

Tensor BatchNorm1d::forward(const Tensor& x, BnMode mode, Cache& cache) const {
  const std::size_t C = x.channels;
  const std::size_t T = x.length;
  const std::size_t B = x.batch;
  Tensor y(B, C, T);
  cache.mode = mode;
  cache.xhat = Tensor(B, C, T);
  cache.inv_std.assign(C, 0.0);
  cache.batch_mean.assign(C, 0.0);
  cache.batch_var.assign(C, 0.0);
  const double n = static_cast<double>(B * T);
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (mode == BnMode::Train) {
      for (std::size_t b = 0; b < B; ++b) {
        const double* xr = x.row(b, c);
        for (std::size_t t = 0; t < T; ++t) mean += xr[t];
      }
      mean /= n;
      for (std::size_t b = 0; b < B; ++b) {
        const double* xr = x.row(b, c);
        for (std::size_t t = 0; t < T; ++t) {
          const double d = xr[t] - mean;
          var += d * d;
        }
      }
      var /= n;
      cache.batch_mean[c] = mean;
      cache.batch_var[c] = var;
    } else {
      mean = running_mean.value[c];
      var = running_var.value[c];
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    cache.inv_std[c] = inv;
    const double g = gamma.value[c];
    const double be = beta.value[c];
    for (std::size_t b = 0; b < B; ++b) {
      const double* xr = x.row(b, c);
      double* hr = cache.xhat.row(b, c);
      double* yr = y.row(b, c);
      for (std::size_t t = 0; t < T; ++t) {
        hr[t] = (xr[t] - mean) * inv;
        yr[t] = g * hr[t] + be;
      }
    }
  }
  return y;
}

void BatchNorm1d::update_running(const Cache& cache) {
  if (cache.mode != BnMode::Train) return;
  for (std::size_t c = 0; c < channels(); ++c) {
    running_mean.value[c] = (1.0 - momentum_) * running_mean.value[c] + momentum_ * cache.batch_mean[c];
    running_var.value[c] = (1.0 - momentum_) * running_var.value[c] + momentum_ * cache.batch_var[c];
  }
}

Tensor BatchNorm1d::backward(const Cache& cache, const Tensor& dy, bool param_grads) {
  const std::size_t C = dy.channels;
  const std::size_t T = dy.length;
  const std::size_t B = dy.batch;
  Tensor dx(B, C, T);
  const double n = static_cast<double>(B * T);
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const double* dyr = dy.row(b, c);
      const double* hr = cache.xhat.row(b, c);
      for (std::size_t t = 0; t < T; ++t) {
        sum_dy += dyr[t];
        sum_dy_xhat += dyr[t] * hr[t];
      }
    }
    if (param_grads) {
      gamma.grad[c] += sum_dy_xhat;
      beta.grad[c] += sum_dy;
    }
    const double g = gamma.value[c];
    const double inv = cache.inv_std[c];
    for (std::size_t b = 0; b < B; ++b) {
      const double* dyr = dy.row(b, c);
      const double* hr = cache.xhat.row(b, c);
      double* dxr = dx.row(b, c);
      if (cache.mode == BnMode::Train) {
        const double k = g * inv / n;
        for (std::size_t t = 0; t < T; ++t) dxr[t] = k * (n * dyr[t] - sum_dy - hr[t] * sum_dy_xhat);
      } else {
        const double k = g * inv;
        for (std::size_t t = 0; t < T; ++t) dxr[t] = k * dyr[t];
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

SqueezeExcite::SqueezeExcite(std::string name, std::size_t channels, std::size_t reduction)
    : w1(name + ".fc1.weight", {std::max<std::size_t>(1, channels / reduction), channels}, ParamRole::Weight),
      b1(name + ".fc1.bias", {std::max<std::size_t>(1, channels / reduction)}, ParamRole::Bias),
      w2(name + ".fc2.weight", {channels, std::max<std::size_t>(1, channels / reduction)}, ParamRole::Weight),
      b2(name + ".fc2.bias", {channels}, ParamRole::Bias),
      channels_(channels),
      hidden_(std::max<std::size_t>(1, channels / reduction)) {}

Tensor SqueezeExcite::forward(const Tensor& x, Cache& cache) const {
  const std::size_t B = x.batch, C = channels_, T = x.length, H = hidden_;
  cache.x = x;
  cache.squeeze.assign(B * C, 0.0);
  cache.hidden.assign(B * H, 0.0);
  cache.excite.assign(B * C, 0.0);
  Tensor y(B, C, T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* xr = x.row(b, c);
      double s = 0.0;
      for (std::size_t t = 0; t < T; ++t) s += xr[t];
      cache.squeeze[b * C + c] = s / static_cast<double>(T);
    }
    for (std::size_t h = 0; h < H; ++h) {
      double a = b1.value[h];
      for (std::size_t c = 0; c < C; ++c) a += w1.value[h * C + c] * cache.squeeze[b * C + c];
      cache.hidden[b * H + h] = a > 0.0 ? a : 0.0;
    }
    for (std::size_t c = 0; c < C; ++c) {
      double a = b2.value[c];
      for (std::size_t h = 0; h < H; ++h) a += w2.value[c * H + h] * cache.hidden[b * H + h];
      const double e = 1.0 / (1.0 + std::exp(-a));
      cache.excite[b * C + c] = e;
      const double* xr = x.row(b, c);
      double* yr = y.row(b, c);
      for (std::size_t t = 0; t < T; ++t) yr[t] = xr[t] * e;
    }
  }
  return y;
}

Tensor SqueezeExcite::backward(const Cache& cache, const Tensor& dy, bool param_grads) {
  const std::size_t B = dy.batch, C = channels_, T = dy.length, H = hidden_;
  Tensor dx(B, C, T);
  std::vector<double> da2(C), dhid(H), ds(C);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* dyr = dy.row(b, c);
      const double* xr = cache.x.row(b, c);
      double de = 0.0;
      for (std::size_t t = 0; t < T; ++t) de += dyr[t] * xr[t];
      const double e = cache.excite[b * C + c];
      da2[c] = de * e * (1.0 - e);
    }
    std::fill(dhid.begin(), dhid.end(), 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t h = 0; h < H; ++h) {
        dhid[h] += w2.value[c * H + h] * da2[c];
        if (param_grads) w2.grad[c * H + h] += da2[c] * cache.hidden[b * H + h];
      }
      if (param_grads) b2.grad[c] += da2[c];
    }
    std::fill(ds.begin(), ds.end(), 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      const double da1 = cache.hidden[b * H + h] > 0.0 ? dhid[h] : 0.0;
      if (param_grads) b1.grad[h] += da1;
      for (std::size_t c = 0; c < C; ++c) {
        ds[c] += w1.value[h * C + c] * da1;
        if (param_grads) w1.grad[h * C + c] += da1 * cache.squeeze[b * C + c];
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      const double e = cache.excite[b * C + c];
      const double dsq = ds[c] / static_cast<double>(T);
      const double* dyr = dy.row(b, c);
      double* dxr = dx.row(b, c);
      for (std::size_t t = 0; t < T; ++t) dxr[t] = dyr[t] * e + dsq;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

AttentionPool::AttentionPool(std::string name, std::size_t channels)
    : score(name + ".score", {channels}, ParamRole::Weight) {}

std::vector<double> AttentionPool::forward(const Tensor& h, Cache& cache) const {
  const std::size_t B = h.batch, C = h.channels, T = h.length;
  cache.h = h;
  cache.alpha.assign(B * T, 0.0);
  std::vector<double> pooled(B * C, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    double* a = cache.alpha.data() + b * T;
    for (std::size_t c = 0; c < C; ++c) {
      const double w = score.value[c];
      const double* hr = h.row(b, c);
      for (std::size_t t = 0; t < T; ++t) a[t] += w * hr[t];
    }
    const double mx = *std::max_element(a, a + T);
    double sum = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      a[t] = std::exp(a[t] - mx);
      sum += a[t];
    }
    for (std::size_t t = 0; t < T; ++t) a[t] /= sum;
    for (std::size_t c = 0; c < C; ++c) {
      const double* hr = h.row(b, c);
      double acc = 0.0;
      for (std::size_t t = 0; t < T; ++t) acc += a[t] * hr[t];
      pooled[b * C + c] = acc;
    }
  }
  return pooled;
}

Tensor AttentionPool::backward(const Cache& cache, std::span<const double> dpooled, bool param_grads) {
  const Tensor& h = cache.h;
  const std::size_t B = h.batch, C = h.channels, T = h.length;
  Tensor dh(B, C, T);
  std::vector<double> dalpha(T), dscore(T);
  for (std::size_t b = 0; b < B; ++b) {
    const double* a = cache.alpha.data() + b * T;
    std::fill(dalpha.begin(), dalpha.end(), 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      const double g = dpooled[b * C + c];
      const double* hr = h.row(b, c);
      double* dhr = dh.row(b, c);
      for (std::size_t t = 0; t < T; ++t) {
        dalpha[t] += g * hr[t];
        dhr[t] = a[t] * g;
      }
    }
    double dot = 0.0;
    for (std::size_t t = 0; t < T; ++t) dot += a[t] * dalpha[t];
    for (std::size_t t = 0; t < T; ++t) dscore[t] = a[t] * (dalpha[t] - dot);
    for (std::size_t c = 0; c < C; ++c) {
      const double w = score.value[c];
      const double* hr = h.row(b, c);
      double* dhr = dh.row(b, c);
      double acc = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        dhr[t] += dscore[t] * w;
        acc += dscore[t] * hr[t];
      }
      if (param_grads) score.grad[c] += acc;
    }
  }
  return dh;
}

// ---------------------------------------------------------------------------

Linear::Linear(std::string name, std::size_t in, std::size_t out)
    : weight(name + ".weight", {out, in}, ParamRole::Weight),
      bias(name + ".bias", {out}, ParamRole::Bias),
      in_(in),
      out_(out) {}

std::vector<double> Linear::forward(std::span<const double> x, std::size_t batch) const {
  std::vector<double> y(batch * out_);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_; ++o) {
      double acc = bias.value[o];
      for (std::size_t i = 0; i < in_; ++i) acc += weight.value[o * in_ + i] * x[b * in_ + i];
      y[b * out_ + o] = acc;
    }
  }
  return y;
}

std::vector<double> Linear::backward(std::span<const double> x, std::span<const double> dy, std::size_t batch,
                                     bool param_grads, bool input_grad) {
  std::vector<double> dx;
  if (input_grad) dx.assign(batch * in_, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_; ++o) {
      const double g = dy[b * out_ + o];
      if (param_grads) bias.grad[o] += g;
      for (std::size_t i = 0; i < in_; ++i) {
        if (param_grads) weight.grad[o * in_ + i] += g * x[b * in_ + i];
        if (input_grad) dx[b * in_ + i] += weight.value[o * in_ + i] * g;
      }
    }
  }
  return dx;
}

}  // namespace driftguard::nn
