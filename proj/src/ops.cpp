#include "mhc/ops.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <type_traits>

namespace mhc {

float round_to_half(float x) {
  if (!std::isfinite(x) || x == 0.0f) return x;
  const float ax = std::fabs(x);
  if (ax >= 65520.0f) return std::copysign(std::numeric_limits<float>::infinity(), x);
  float quantum;
  if (ax < 6.103515625e-05f) {
    quantum = 5.9604644775390625e-08f;  // binary16 subnormal spacing, 2^-24
  } else {
    int e = 0;
    std::frexp(ax, &e);
    quantum = std::ldexp(1.0f, e - 11);
  }
  return std::nearbyint(x / quantum) * quantum;
}

namespace {
bool& half_flag() noexcept {
  thread_local bool on = false;
  return on;
}
}  // namespace

bool HalfPrecision::enabled() noexcept { return half_flag(); }
void HalfPrecision::set(bool on) noexcept { half_flag() = on; }

namespace ops {
namespace {

template <typename T>
void maybe_round_half(Tensor<T>& t) {
  if constexpr (std::is_same_v<T, float>) {
    if (HalfPrecision::enabled()) {
      for (auto& v : t.data()) v = round_to_half(v);
    }
  }
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  MHC_CHECK(a.shape() == b.shape(), ShapeError,
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
}

template <typename T>
void require_rank(const Var<T>& x, std::size_t rank, const char* op) {
  MHC_CHECK(x.shape().size() == rank, ShapeError,
            std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                shape_str(x.shape()));
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

// Axis bookkeeping for [..., n, D] stream tensors.
struct StreamDims {
  std::size_t prefix;
  std::size_t n;
  std::size_t d;
};

template <typename T>
StreamDims stream_dims(const Var<T>& x, std::size_t n, const char* op) {
  const auto& s = x.shape();
  MHC_CHECK(s.size() >= 2 && s[s.size() - 2] == n, ShapeError,
            std::string(op) + ": expected [..., " + std::to_string(n) + ", D], got " +
                shape_str(s));
  const std::size_t d = s.back();
  return {x.size() / std::max<std::size_t>(n * d, 1), n, d};
}

Shape with_last(Shape s, std::size_t last) {
  s.back() = last;
  return s;
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = input_grad(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
  return make_op<T>(std::move(out), {a}, [s](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
    }
  });
}

template <typename T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  MHC_CHECK(ys.size() <= xs.size() && std::equal(ys.begin(), ys.end(), xs.end() - ys.size()),
            ShapeError, "add_broadcast: " + shape_str(ys) + " is not a suffix of " + shape_str(xs));
  const std::size_t inner = y.size();
  Tensor<T> out(xs);
  const auto& xv = x.value();
  const auto& yv = y.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + yv[i % inner];
  return make_op<T>(std::move(out), {x, y}, [inner](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % inner] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> take_rows(const Var<T>& m, std::size_t count) {
  require_rank(m, 2, "take_rows");
  MHC_CHECK(count <= m.shape()[0], ShapeError,
            "take_rows: " + std::to_string(count) + " rows from " + shape_str(m.shape()));
  const std::size_t cols = m.shape()[1];
  Tensor<T> out({count, cols});
  std::copy_n(m.value().raw(), count * cols, out.raw());
  return make_op<T>(std::move(out), {m}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const TokenId> ids, std::size_t batch,
                 std::size_t time) {
  require_rank(table, 2, "embedding");
  MHC_CHECK(ids.size() == batch * time, ShapeError,
            "embedding: " + std::to_string(ids.size()) + " ids for [" + std::to_string(batch) +
                "," + std::to_string(time) + "]");
  const std::size_t vocab = table.shape()[0];
  const std::size_t dim = table.shape()[1];
  for (TokenId id : ids) {
    MHC_CHECK(id >= 0 && static_cast<std::size_t>(id) < vocab, DataError,
              "token id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
  }
  Tensor<T> out({batch, time, dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.value().raw() + static_cast<std::size_t>(ids[i]) * dim, dim,
                out.raw() + i * dim);
  }
  std::vector<TokenId> saved(ids.begin(), ids.end());
  return make_op<T>(std::move(out), {table}, [saved = std::move(saved), dim](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < saved.size(); ++i) {
        T* row = g->raw() + static_cast<std::size_t>(saved[i]) * dim;
        const T* src = self.grad.raw() + i * dim;
        for (std::size_t j = 0; j < dim; ++j) row[j] += src[j];
      }
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  require_rank(w, 2, "linear");
  const std::size_t in = w.shape()[0];
  const std::size_t outd = w.shape()[1];
  MHC_CHECK(!x.shape().empty() && x.shape().back() == in, ShapeError,
            "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) {
    MHC_CHECK(bias.size() == outd, ShapeError, "linear: bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.size() / in;
  Tensor<T> out(with_last(x.shape(), outd));
  const T* xv = x.value().raw();
  const T* wv = w.value().raw();
  for (std::size_t i = 0; i < rows; ++i) {
    T* y = out.raw() + i * outd;
    if (has_bias) std::copy_n(bias.value().raw(), outd, y);
    const T* xr = xv + i * in;
    for (std::size_t k = 0; k < in; ++k) {
      const T xk = xr[k];
      const T* wr = wv + k * outd;
      for (std::size_t j = 0; j < outd; ++j) y[j] += xk * wr[j];
    }
  }
  maybe_round_half(out);
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_op<T>(std::move(out), std::move(inputs), [rows, in, outd](Node<T>& self) {
    const T* gy = self.grad.raw();
    const T* xv = self.inputs[0]->value.raw();
    const T* wv = self.inputs[1]->value.raw();
    if (auto* g = input_grad(self, 0)) {
      T* gx = g->raw();
      for (std::size_t i = 0; i < rows; ++i) {
        const T* gr = gy + i * outd;
        for (std::size_t k = 0; k < in; ++k) {
          const T* wr = wv + k * outd;
          T acc{0};
          for (std::size_t j = 0; j < outd; ++j) acc += gr[j] * wr[j];
          gx[i * in + k] += acc;
        }
      }
      maybe_round_half(*g);
    }
    if (auto* g = input_grad(self, 1)) {
      T* gw = g->raw();
      for (std::size_t i = 0; i < rows; ++i) {
        const T* gr = gy + i * outd;
        const T* xr = xv + i * in;
        for (std::size_t k = 0; k < in; ++k) {
          const T xk = xr[k];
          T* wr = gw + k * outd;
          for (std::size_t j = 0; j < outd; ++j) wr[j] += xk * gr[j];
        }
      }
    }
    if (self.inputs.size() > 2) {
      if (auto* g = input_grad(self, 2)) {
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < outd; ++j) (*g)[j] += gy[i * outd + j];
        }
      }
    }
  });
}

template <typename T>
Var<T> linear_nt(const Var<T>& x, const Var<T>& w) {
  require_rank(w, 2, "linear_nt");
  const std::size_t outd = w.shape()[0];
  const std::size_t in = w.shape()[1];
  MHC_CHECK(!x.shape().empty() && x.shape().back() == in, ShapeError,
            "linear_nt: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const std::size_t rows = x.size() / in;
  Tensor<T> out(with_last(x.shape(), outd));
  const T* xv = x.value().raw();
  const T* wv = w.value().raw();
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xr = xv + i * in;
    T* y = out.raw() + i * outd;
    for (std::size_t o = 0; o < outd; ++o) {
      const T* wr = wv + o * in;
      T acc{0};
      for (std::size_t k = 0; k < in; ++k) acc += xr[k] * wr[k];
      y[o] = acc;
    }
  }
  maybe_round_half(out);
  return make_op<T>(std::move(out), {x, w}, [rows, in, outd](Node<T>& self) {
    const T* gy = self.grad.raw();
    const T* xv = self.inputs[0]->value.raw();
    const T* wv = self.inputs[1]->value.raw();
    if (auto* g = input_grad(self, 0)) {
      T* gx = g->raw();
      for (std::size_t i = 0; i < rows; ++i) {
        T* gr = gx + i * in;
        for (std::size_t o = 0; o < outd; ++o) {
          const T go = gy[i * outd + o];
          const T* wr = wv + o * in;
          for (std::size_t k = 0; k < in; ++k) gr[k] += go * wr[k];
        }
      }
      maybe_round_half(*g);
    }
    if (auto* g = input_grad(self, 1)) {
      T* gw = g->raw();
      for (std::size_t i = 0; i < rows; ++i) {
        const T* xr = xv + i * in;
        for (std::size_t o = 0; o < outd; ++o) {
          const T go = gy[i * outd + o];
          T* wr = gw + o * in;
          for (std::size_t k = 0; k < in; ++k) wr[k] += go * xr[k];
        }
      }
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> split_last(const Var<T>& x, std::size_t start, std::size_t len) {
  MHC_CHECK(!x.shape().empty() && start + len <= x.shape().back(), ShapeError,
            "split_last: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                ") out of " + shape_str(x.shape()));
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  Tensor<T> out(with_last(x.shape(), len));
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(x.value().raw() + i * cols + start, len, out.raw() + i * len);
  }
  return make_op<T>(std::move(out), {x}, [rows, cols, start, len](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < len; ++j) (*g)[i * cols + start + j] += self.grad[i * len + j];
      }
    }
  });
}

template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& gain, T eps) {
  const std::size_t d = gain.size();
  MHC_CHECK(!x.shape().empty() && x.shape().back() == d, ShapeError,
            "rms_norm: input " + shape_str(x.shape()) + " vs gain " + shape_str(gain.shape()));
  const std::size_t rows = x.size() / d;
  Tensor<T> out(x.shape());
  std::vector<T> inv_rms(rows);
  const T* xv = x.value().raw();
  const T* gv = gain.value().raw();
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xr = xv + i * d;
    T ms{0};
    for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
    ms /= static_cast<T>(d);
    const T r = T{1} / std::sqrt(ms + eps);
    inv_rms[i] = r;
    T* y = out.raw() + i * d;
    for (std::size_t j = 0; j < d; ++j) y[j] = xr[j] * r * gv[j];
  }
  return make_op<T>(std::move(out), {x, gain},
                    [inv_rms = std::move(inv_rms), rows, d](Node<T>& self) {
    const T* xv = self.inputs[0]->value.raw();
    const T* gv = self.inputs[1]->value.raw();
    const T* gy = self.grad.raw();
    auto* gx = input_grad(self, 0);
    auto* gg = input_grad(self, 1);
    for (std::size_t i = 0; i < rows; ++i) {
      const T r = inv_rms[i];
      const T* xr = xv + i * d;
      const T* gr = gy + i * d;
      if (gg) {
        for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * xr[j] * r;
      }
      if (gx) {
        T dot{0};
        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * gv[j] * xr[j] * r;
        dot /= static_cast<T>(d);
        T* out = gx->raw() + i * d;
        for (std::size_t j = 0; j < d; ++j) out[j] += r * (gr[j] * gv[j] - xr[j] * r * dot);
      }
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.value()[i];
    out[i] = v * sigmoid_scalar(v);
  }
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      const auto& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        const T s = sigmoid_scalar(xv[i]);
        (*g)[i] += self.grad[i] * s * (T{1} + xv[i] * (T{1} - s));
      }
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x.value()[i]);
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        const T s = self.value[i];
        (*g)[i] += self.grad[i] * s * (T{1} - s);
      }
    }
  });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.value()[i]);
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * self.value[i];
    }
  });
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x.value()[i], lo, hi);
  return make_op<T>(std::move(out), {x}, [lo, hi](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      const auto& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (xv[i] >= lo && xv[i] <= hi) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> dropout(const Var<T>& x, T rate, Rng& rng, bool training) {
  if (!training || rate <= T{0}) return x;
  MHC_CHECK(rate < T{1}, ConfigError, "dropout rate must be in [0, 1)");
  const T keep_scale = T{1} / (T{1} - rate);
  Tensor<T> mask(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    mask[i] = u >= static_cast<double>(rate) ? keep_scale : T{0};
    out[i] = x.value()[i] * mask[i];
  }
  return make_op<T>(std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * mask[i];
    }
  });
}

template <typename T>
Var<T> causal_depthwise_conv(const Var<T>& u, const Var<T>& kernel) {
  require_rank(u, 3, "causal_depthwise_conv");
  require_rank(kernel, 2, "causal_depthwise_conv");
  const std::size_t B = u.shape()[0], L = u.shape()[1], D = u.shape()[2];
  const std::size_t k = kernel.shape()[1];
  MHC_CHECK(k >= 1, ConfigError, "causal_depthwise_conv: kernel size must be >= 1");
  MHC_CHECK(kernel.shape()[0] == D, ShapeError,
            "causal_depthwise_conv: kernel " + shape_str(kernel.shape()) + " for " +
                shape_str(u.shape()));
  Tensor<T> out(u.shape());
  const T* uv = u.value().raw();
  const T* kv = kernel.value().raw();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < L; ++t) {
      T* y = out.raw() + (b * L + t) * D;
      for (std::size_t j = 0; j < k; ++j) {
        // Tap j reads position t - (k-1) + j; left padding is implicit.
        if (t + j + 1 < k) continue;
        const std::size_t s = t + j + 1 - k;
        const T* x = uv + (b * L + s) * D;
        for (std::size_t c = 0; c < D; ++c) y[c] += kv[c * k + j] * x[c];
      }
    }
  }
  return make_op<T>(std::move(out), {u, kernel}, [B, L, D, k](Node<T>& self) {
    const T* uv = self.inputs[0]->value.raw();
    const T* kv = self.inputs[1]->value.raw();
    const T* gy = self.grad.raw();
    auto* gu = input_grad(self, 0);
    auto* gk = input_grad(self, 1);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < L; ++t) {
        const T* g = gy + (b * L + t) * D;
        for (std::size_t j = 0; j < k; ++j) {
          if (t + j + 1 < k) continue;
          const std::size_t s = t + j + 1 - k;
          const std::size_t base = (b * L + s) * D;
          for (std::size_t c = 0; c < D; ++c) {
            if (gu) (*gu)[base + c] += kv[c * k + j] * g[c];
            if (gk) (*gk)[c * k + j] += g[c] * uv[base + c];
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> diagonal_scan(const Var<T>& u, const Var<T>& a, const Var<T>& b, const Var<T>& c,
                     const Var<T>& d) {
  require_rank(u, 3, "diagonal_scan");
  const std::size_t B = u.shape()[0], L = u.shape()[1], D = u.shape()[2];
  for (const Var<T>* p : {&a, &b, &c, &d}) {
    MHC_CHECK(p->size() == D, ShapeError,
              "diagonal_scan: parameter " + shape_str(p->shape()) + " for D = " + std::to_string(D));
  }
  // The recurrence runs in T (float or double). Emulated half precision
  // never touches it.
  Tensor<T> states(u.shape());
  Tensor<T> out(u.shape());
  const T* uv = u.value().raw();
  const T* av = a.value().raw();
  const T* bv = b.value().raw();
  const T* cv = c.value().raw();
  const T* dv = d.value().raw();
  for (std::size_t bi = 0; bi < B; ++bi) {
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t row = (bi * L + t) * D;
      for (std::size_t ch = 0; ch < D; ++ch) {
        const T prev = t == 0 ? T{0} : states[row - D + ch];
        const T s = av[ch] * prev + bv[ch] * uv[row + ch];
        states[row + ch] = s;
        out[row + ch] = cv[ch] * s + dv[ch] * uv[row + ch];
      }
    }
  }
  for (T v : out.data()) {
    MHC_CHECK(std::isfinite(v), NumericError, "diagonal_scan: non-finite value in recurrence");
  }
  return make_op<T>(std::move(out), {u, a, b, c, d},
                    [states = std::move(states), B, L, D](Node<T>& self) {
    const T* uv = self.inputs[0]->value.raw();
    const T* av = self.inputs[1]->value.raw();
    const T* bv = self.inputs[2]->value.raw();
    const T* cv = self.inputs[3]->value.raw();
    const T* dv = self.inputs[4]->value.raw();
    const T* gz = self.grad.raw();
    auto* gu = input_grad(self, 0);
    auto* ga = input_grad(self, 1);
    auto* gb = input_grad(self, 2);
    auto* gc = input_grad(self, 3);
    auto* gd = input_grad(self, 4);
    std::vector<T> carry(D);
    for (std::size_t bi = 0; bi < B; ++bi) {
      std::fill(carry.begin(), carry.end(), T{0});
      for (std::size_t t = L; t-- > 0;) {
        const std::size_t row = (bi * L + t) * D;
        for (std::size_t ch = 0; ch < D; ++ch) {
          const T g = gz[row + ch];
          const T s = states[row + ch];
          const T x = uv[row + ch];
          const T ds = g * cv[ch] + carry[ch];
          if (gc) (*gc)[ch] += g * s;
          if (gd) (*gd)[ch] += g * x;
          if (gu) (*gu)[row + ch] += g * dv[ch] + ds * bv[ch];
          if (gb) (*gb)[ch] += ds * x;
          if (ga && t > 0) (*ga)[ch] += ds * states[row - D + ch];
          carry[ch] = av[ch] * ds;
        }
      }
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
  MHC_CHECK(!x.shape().empty(), ShapeError, "softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xr = x.value().raw() + i * n;
    T* y = out.raw() + i * n;
    const T mx = *std::max_element(xr, xr + n);
    T total{0};
    for (std::size_t j = 0; j < n; ++j) total += (y[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  return make_op<T>(std::move(out), {x}, [rows, n](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < rows; ++i) {
        const T* y = self.value.raw() + i * n;
        const T* gy = self.grad.raw() + i * n;
        T dot{0};
        for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += y[j] * (gy[j] - dot);
      }
    }
  });
}

template <typename T>
Var<T> normalize_rows(const Var<T>& m) {
  require_rank(m, 2, "normalize_rows");
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  Tensor<T> out(m.shape());
  std::vector<T> sums(r, T{0});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) sums[i] += m.value()[i * c + j];
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.value()[i * c + j] / sums[i];
  }
  return make_op<T>(std::move(out), {m}, [sums = std::move(sums), r, c](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        T dot{0};
        for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += (self.grad[i * c + j] - dot) / sums[i];
      }
    }
  });
}

template <typename T>
Var<T> normalize_cols(const Var<T>& m) {
  require_rank(m, 2, "normalize_cols");
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  Tensor<T> out(m.shape());
  std::vector<T> sums(c, T{0});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) sums[j] += m.value()[i * c + j];
  }
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.value()[i * c + j] / sums[j];
  }
  return make_op<T>(std::move(out), {m}, [sums = std::move(sums), r, c](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      std::vector<T> dots(c, T{0});
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) dots[j] += self.grad[i * c + j] * self.value[i * c + j];
      }
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          (*g)[i * c + j] += (self.grad[i * c + j] - dots[j]) / sums[j];
        }
      }
    }
  });
}

template <typename T>
Var<T> stream_weighted_sum(const Var<T>& x, const Var<T>& w) {
  require_rank(w, 1, "stream_weighted_sum");
  const auto [P, n, D] = stream_dims(x, w.size(), "stream_weighted_sum");
  Shape shape(x.shape().begin(), x.shape().end() - 2);
  shape.push_back(D);
  Tensor<T> out(shape);
  const T* xv = x.value().raw();
  const T* wv = w.value().raw();
  for (std::size_t p = 0; p < P; ++p) {
    T* y = out.raw() + p * D;
    for (std::size_t i = 0; i < n; ++i) {
      const T* xs = xv + (p * n + i) * D;
      for (std::size_t j = 0; j < D; ++j) y[j] += wv[i] * xs[j];
    }
  }
  return make_op<T>(std::move(out), {x, w}, [P, n, D](Node<T>& self) {
    const T* xv = self.inputs[0]->value.raw();
    const T* wv = self.inputs[1]->value.raw();
    const T* gy = self.grad.raw();
    auto* gx = input_grad(self, 0);
    auto* gw = input_grad(self, 1);
    for (std::size_t p = 0; p < P; ++p) {
      const T* g = gy + p * D;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t base = (p * n + i) * D;
        if (gx) {
          for (std::size_t j = 0; j < D; ++j) (*gx)[base + j] += wv[i] * g[j];
        }
        if (gw) {
          T acc{0};
          for (std::size_t j = 0; j < D; ++j) acc += g[j] * xv[base + j];
          (*gw)[i] += acc;
        }
      }
    }
  });
}

template <typename T>
Var<T> stream_scatter(const Var<T>& y, const Var<T>& w) {
  require_rank(w, 1, "stream_scatter");
  MHC_CHECK(!y.shape().empty(), ShapeError, "stream_scatter: scalar input");
  const std::size_t n = w.size();
  const std::size_t D = y.shape().back();
  const std::size_t P = y.size() / D;
  Shape shape(y.shape().begin(), y.shape().end() - 1);
  shape.push_back(n);
  shape.push_back(D);
  Tensor<T> out(shape);
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < D; ++j) {
        out[(p * n + i) * D + j] = w.value()[i] * y.value()[p * D + j];
      }
    }
  }
  return make_op<T>(std::move(out), {y, w}, [P, n, D](Node<T>& self) {
    const T* yv = self.inputs[0]->value.raw();
    const T* wv = self.inputs[1]->value.raw();
    auto* gy = input_grad(self, 0);
    auto* gw = input_grad(self, 1);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t i = 0; i < n; ++i) {
        const T* g = self.grad.raw() + (p * n + i) * D;
        T acc{0};
        for (std::size_t j = 0; j < D; ++j) {
          if (gy) (*gy)[p * D + j] += wv[i] * g[j];
          acc += g[j] * yv[p * D + j];
        }
        if (gw) (*gw)[i] += acc;
      }
    }
  });
}

template <typename T>
Var<T> stream_scatter_each(const Var<T>& y, const Var<T>& w) {
  require_rank(w, 1, "stream_scatter_each");
  const auto [P, n, D] = stream_dims(y, w.size(), "stream_scatter_each");
  Tensor<T> out(y.shape());
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t base = (p * n + i) * D;
      for (std::size_t j = 0; j < D; ++j) out[base + j] = w.value()[i] * y.value()[base + j];
    }
  }
  return make_op<T>(std::move(out), {y, w}, [P, n, D](Node<T>& self) {
    const T* yv = self.inputs[0]->value.raw();
    const T* wv = self.inputs[1]->value.raw();
    auto* gy = input_grad(self, 0);
    auto* gw = input_grad(self, 1);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t base = (p * n + i) * D;
        T acc{0};
        for (std::size_t j = 0; j < D; ++j) {
          const T g = self.grad[base + j];
          if (gy) (*gy)[base + j] += wv[i] * g;
          acc += g * yv[base + j];
        }
        if (gw) (*gw)[i] += acc;
      }
    }
  });
}

template <typename T>
Var<T> stream_mix(const Var<T>& x, const Var<T>& h) {
  require_rank(h, 2, "stream_mix");
  MHC_CHECK(h.shape()[0] == h.shape()[1], ShapeError,
            "stream_mix: mixing matrix must be square, got " + shape_str(h.shape()));
  const auto [P, n, D] = stream_dims(x, h.shape()[0], "stream_mix");
  Tensor<T> out(x.shape());
  const T* xv = x.value().raw();
  const T* hv = h.value().raw();
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t i = 0; i < n; ++i) {
      T* y = out.raw() + (p * n + i) * D;
      for (std::size_t j = 0; j < n; ++j) {
        const T hij = hv[i * n + j];
        const T* xs = xv + (p * n + j) * D;
        for (std::size_t k = 0; k < D; ++k) y[k] += hij * xs[k];
      }
    }
  }
  return make_op<T>(std::move(out), {x, h}, [P, n, D](Node<T>& self) {
    const T* xv = self.inputs[0]->value.raw();
    const T* hv = self.inputs[1]->value.raw();
    auto* gx = input_grad(self, 0);
    auto* gh = input_grad(self, 1);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t i = 0; i < n; ++i) {
        const T* g = self.grad.raw() + (p * n + i) * D;
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t base = (p * n + j) * D;
          if (gx) {
            const T hij = hv[i * n + j];
            for (std::size_t k = 0; k < D; ++k) (*gx)[base + k] += hij * g[k];
          }
          if (gh) {
            T acc{0};
            for (std::size_t k = 0; k < D; ++k) acc += g[k] * xv[base + k];
            (*gh)[i * n + j] += acc;
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> stream_scale(const Var<T>& h, const Var<T>& gamma) {
  require_rank(gamma, 2, "stream_scale");
  const auto [P, n, r] = stream_dims(h, gamma.shape()[0], "stream_scale");
  MHC_CHECK(gamma.shape()[1] == r, ShapeError,
            "stream_scale: gamma " + shape_str(gamma.shape()) + " for " + shape_str(h.shape()));
  Tensor<T> out(h.shape());
  const std::size_t inner = n * r;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = h.value()[i] * gamma.value()[i % inner];
  return make_op<T>(std::move(out), {h, gamma}, [inner](Node<T>& self) {
    const auto& hv = self.inputs[0]->value;
    const auto& gv = self.inputs[1]->value;
    auto* gh = input_grad(self, 0);
    auto* gg = input_grad(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (gh) (*gh)[i] += self.grad[i] * gv[i % inner];
      if (gg) (*gg)[i % inner] += self.grad[i] * hv[i];
    }
  });
}

template <typename T>
Var<T> stream_broadcast_scale(const Var<T>& h, const Var<T>& gamma) {
  require_rank(gamma, 2, "stream_broadcast_scale");
  const std::size_t n = gamma.shape()[0];
  const std::size_t r = gamma.shape()[1];
  MHC_CHECK(!h.shape().empty() && h.shape().back() == r, ShapeError,
            "stream_broadcast_scale: gamma " + shape_str(gamma.shape()) + " for " +
                shape_str(h.shape()));
  const std::size_t P = h.size() / r;
  Shape shape(h.shape().begin(), h.shape().end() - 1);
  shape.push_back(n);
  shape.push_back(r);
  Tensor<T> out(shape);
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < r; ++j) {
        out[(p * n + i) * r + j] = h.value()[p * r + j] * gamma.value()[i * r + j];
      }
    }
  }
  return make_op<T>(std::move(out), {h, gamma}, [P, n, r](Node<T>& self) {
    const T* hv = self.inputs[0]->value.raw();
    const T* gv = self.inputs[1]->value.raw();
    auto* gh = input_grad(self, 0);
    auto* gg = input_grad(self, 1);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
          const T g = self.grad[(p * n + i) * r + j];
          if (gh) (*gh)[p * r + j] += g * gv[i * r + j];
          if (gg) (*gg)[i * r + j] += g * hv[p * r + j];
        }
      }
    }
  });
}

template <typename T>
Var<T> stream_broadcast_add(const Var<T>& y, const Var<T>& delta) {
  MHC_CHECK(!y.shape().empty(), ShapeError, "stream_broadcast_add: scalar input");
  const std::size_t D = y.shape().back();
  const std::size_t P = y.size() / D;
  MHC_CHECK(delta.shape().size() == y.shape().size() + 1 && delta.shape().back() == D &&
                delta.size() % y.size() == 0,
            ShapeError,
            "stream_broadcast_add: " + shape_str(y.shape()) + " vs " + shape_str(delta.shape()));
  const std::size_t n = delta.size() / y.size();
  Tensor<T> out(delta.shape());
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t base = (p * n + i) * D;
      for (std::size_t j = 0; j < D; ++j) out[base + j] = y.value()[p * D + j] + delta.value()[base + j];
    }
  }
  return make_op<T>(std::move(out), {y, delta}, [P, n, D](Node<T>& self) {
    auto* gy = input_grad(self, 0);
    auto* gd = input_grad(self, 1);
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t base = (p * n + i) * D;
        for (std::size_t j = 0; j < D; ++j) {
          const T g = self.grad[base + j];
          if (gy) (*gy)[p * D + j] += g;
          if (gd) (*gd)[base + j] += g;
        }
      }
    }
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const TokenId> targets) {
  MHC_CHECK(!logits.shape().empty(), ShapeError, "cross_entropy: scalar logits");
  const std::size_t V = logits.shape().back();
  const std::size_t N = logits.size() / V;
  MHC_CHECK(targets.size() == N, ShapeError,
            "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                std::to_string(N) + " rows");
  for (TokenId t : targets) {
    MHC_CHECK(t >= 0 && static_cast<std::size_t>(t) < V, DataError,
              "target id " + std::to_string(t) + " outside [0, " + std::to_string(V) + ")");
  }
  // Row losses are accumulated in double so the mean does not depend on
  // the activation type's summation error over long batches.
  double total = 0.0;
  const T* lv = logits.value().raw();
  for (std::size_t i = 0; i < N; ++i) {
    const T* row = lv + i * V;
    const T mx = *std::max_element(row, row + V);
    double se = 0.0;
    for (std::size_t j = 0; j < V; ++j) se += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(se) + static_cast<double>(mx) - static_cast<double>(row[targets[i]]);
  }
  Tensor<T> out(Shape{}, static_cast<T>(total / static_cast<double>(N)));
  MHC_CHECK(std::isfinite(out[0]), NumericError, "cross_entropy: non-finite loss");
  std::vector<TokenId> saved(targets.begin(), targets.end());
  return make_op<T>(std::move(out), {logits}, [saved = std::move(saved), N, V](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      const T* lv = self.inputs[0]->value.raw();
      const T scale = self.grad[0] / static_cast<T>(N);
      for (std::size_t i = 0; i < N; ++i) {
        const T* row = lv + i * V;
        const T mx = *std::max_element(row, row + V);
        T se{0};
        for (std::size_t j = 0; j < V; ++j) se += std::exp(row[j] - mx);
        T* gr = g->raw() + i * V;
        for (std::size_t j = 0; j < V; ++j) gr[j] += scale * std::exp(row[j] - mx) / se;
        gr[saved[i]] -= scale;
      }
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total{0};
  for (T v : x.value().data()) total += v;
  return make_op<T>(Tensor<T>(Shape{}, total), {x}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (auto& v : g->data()) v += self.grad[0];
    }
  });
}

template <typename T>
Var<T> sum_squares(const Var<T>& x) {
  T total{0};
  for (T v : x.value().data()) total += v * v;
  return make_op<T>(Tensor<T>(Shape{}, total), {x}, [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      const auto& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += T{2} * xv[i] * self.grad[0];
    }
  });
}

#define MHC_INSTANTIATE_OPS(T)                                                              \
  template Var<T> add(const Var<T>&, const Var<T>&);                                        \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                        \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                        \
  template Var<T> scale(const Var<T>&, T);                                                  \
  template Var<T> add_broadcast(const Var<T>&, const Var<T>&);                              \
  template Var<T> take_rows(const Var<T>&, std::size_t);                                    \
  template Var<T> embedding(const Var<T>&, std::span<const TokenId>, std::size_t,           \
                            std::size_t);                                                   \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                      \
  template Var<T> linear_nt(const Var<T>&, const Var<T>&);                                  \
  template Var<T> reshape(const Var<T>&, Shape);                                            \
  template Var<T> split_last(const Var<T>&, std::size_t, std::size_t);                      \
  template Var<T> rms_norm(const Var<T>&, const Var<T>&, T);                                \
  template Var<T> silu(const Var<T>&);                                                      \
  template Var<T> sigmoid(const Var<T>&);                                                   \
  template Var<T> exp(const Var<T>&);                                                       \
  template Var<T> clamp(const Var<T>&, T, T);                                               \
  template Var<T> dropout(const Var<T>&, T, Rng&, bool);                                    \
  template Var<T> causal_depthwise_conv(const Var<T>&, const Var<T>&);                      \
  template Var<T> diagonal_scan(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, \
                                const Var<T>&);                                             \
  template Var<T> softmax(const Var<T>&);                                                   \
  template Var<T> normalize_rows(const Var<T>&);                                            \
  template Var<T> normalize_cols(const Var<T>&);                                            \
  template Var<T> stream_weighted_sum(const Var<T>&, const Var<T>&);                        \
  template Var<T> stream_scatter(const Var<T>&, const Var<T>&);                             \
  template Var<T> stream_scatter_each(const Var<T>&, const Var<T>&);                        \
  template Var<T> stream_mix(const Var<T>&, const Var<T>&);                                 \
  template Var<T> stream_scale(const Var<T>&, const Var<T>&);                               \
  template Var<T> stream_broadcast_scale(const Var<T>&, const Var<T>&);                     \
  template Var<T> stream_broadcast_add(const Var<T>&, const Var<T>&);                       \
  template Var<T> cross_entropy(const Var<T>&, std::span<const TokenId>);                   \
  template Var<T> sum(const Var<T>&);                                                       \
  template Var<T> sum_squares(const Var<T>&);

MHC_INSTANTIATE_OPS(float)
MHC_INSTANTIATE_OPS(double)

#undef MHC_INSTANTIATE_OPS

}  // namespace ops
}  // namespace mhc
