#include "npd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace npd {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Matmul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::BiasChannel: return "bias_channel";
    case OpKind::BatchNorm2d: return "batchnorm2d";
    case OpKind::Relu: return "relu";
    case OpKind::Log: return "log";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Affine: return "affine";
    case OpKind::ClampMin: return "clamp_min";
    case OpKind::Mean: return "mean";
    case OpKind::Sum: return "sum";
    case OpKind::ConcatChannels: return "concat_channels";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::Softmax: return "softmax";
    case OpKind::PickClass: return "pick_class";
    case OpKind::MaskedMaxExcl: return "masked_max_excl";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::AddRowVec: return "add_rowvec";
    case OpKind::Reshape: return "reshape";
    case OpKind::GatherRows: return "gather_rows";
  }
  return "?";
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor: non-positive extent in " + shape_str(shape));
  }
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* what) {
  for (const T& x : v) {
    if (!std::isfinite(x)) throw std::runtime_error(std::string(what) + ": non-finite value");
  }
}

// --- raw matmul kernels -----------------------------------------------------
// c[M x N] (+)= a[M x K] * b[K x N]
template <typename T>
void mm_nn(const T* a, const T* b, T* c, int M, int K, int N, bool acc) {
  for (int i = 0; i < M; ++i) {
    T* ci = c + static_cast<std::size_t>(i) * N;
    if (!acc) std::fill(ci, ci + N, T(0));
    const T* ai = a + static_cast<std::size_t>(i) * K;
    for (int p = 0; p < K; ++p) {
      const T av = ai[p];
      const T* bp = b + static_cast<std::size_t>(p) * N;
      for (int j = 0; j < N; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[M x N] (+)= a[M x K] * b[N x K]^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, int M, int K, int N, bool acc) {
  for (int i = 0; i < M; ++i) {
    const T* ai = a + static_cast<std::size_t>(i) * K;
    T* ci = c + static_cast<std::size_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const T* bj = b + static_cast<std::size_t>(j) * K;
      T s = 0;
      for (int p = 0; p < K; ++p) s += ai[p] * bj[p];
      ci[j] = acc ? ci[j] + s : s;
    }
  }
}

// c[M x N] (+)= a[K x M]^T * b[K x N]
template <typename T>
void mm_tn(const T* a, const T* b, T* c, int M, int K, int N, bool acc) {
  if (!acc) std::fill(c, c + static_cast<std::size_t>(M) * N, T(0));
  for (int p = 0; p < K; ++p) {
    const T* ap = a + static_cast<std::size_t>(p) * M;
    const T* bp = b + static_cast<std::size_t>(p) * N;
    for (int i = 0; i < M; ++i) {
      const T av = ap[i];
      T* ci = c + static_cast<std::size_t>(i) * N;
      for (int j = 0; j < N; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
void accumulate(std::span<T> dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

// --- TensorT ----------------------------------------------------------------

template <typename T>
TensorT<T> TensorT<T>::zeros(Shape shape, bool requires_grad) {
  check_shape(shape);
  auto s = std::make_shared<Storage<T>>();
  const std::size_t n = static_cast<std::size_t>(numel(shape));
  s->shape = std::move(shape);
  s->values.assign(n, T(0));
  s->requires_grad = requires_grad;
  if (requires_grad) s->grad.assign(n, T(0));
  return TensorT(std::move(s));
}

template <typename T>
TensorT<T> TensorT<T>::full(Shape shape, T value, bool requires_grad) {
  TensorT t = zeros(std::move(shape), requires_grad);
  std::fill(t.s_->values.begin(), t.s_->values.end(), value);
  check_finite(t.s_->values, "full");
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  check_shape(shape);
  if (static_cast<std::int64_t>(values.size()) != numel(shape)) {
    throw std::invalid_argument("tensor: data length does not match shape " + shape_str(shape));
  }
  check_finite(values, "from");
  auto s = std::make_shared<Storage<T>>();
  s->shape = std::move(shape);
  s->values = std::move(values);
  s->requires_grad = requires_grad;
  if (requires_grad) s->grad.assign(s->values.size(), T(0));
  return TensorT(std::move(s));
}

template <typename T>
TensorT<T> TensorT<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <typename T>
void TensorT<T>::set_requires_grad(bool on) {
  s_->requires_grad = on;
  if (on) {
    s_->grad.assign(s_->values.size(), T(0));
  } else {
    s_->grad.clear();
    s_->grad.shrink_to_fit();
  }
}

template <typename T>
void TensorT<T>::zero_grad() {
  std::fill(s_->grad.begin(), s_->grad.end(), T(0));
}

template <typename T>
T TensorT<T>::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor is not scalar");
  return s_->values[0];
}

// --- GraphT -----------------------------------------------------------------

template <typename T>
void GraphT<T>::record(OpKind op, std::vector<TensorT<T>> inputs, TensorT<T> output,
                       std::function<void()> backward_fn) {
  nodes_.push_back(GraphNode<T>{op, std::move(inputs), std::move(output), std::move(backward_fn)});
}

template <typename T>
void GraphT<T>::backward(const TensorT<T>& root) {
  if (!root.defined() || root.size() != 1) {
    throw std::invalid_argument("backward: root must be a scalar tensor");
  }
  // Intermediate grads reset每 call so leaf grads accumulate cleanly.
  bool root_is_output = false;
  for (auto& node : nodes_) {
    if (node.output.requires_grad()) node.output.zero_grad();
    if (node.output.same_storage(root)) root_is_output = true;
  }
  if (!root.requires_grad()) return;  // nothing reachable requires grad
  if (root_is_output) {
    root.mutable_grad()[0] = T(1);
  } else {
    // Root is itself a leaf: d root / d root = 1.
    root.mutable_grad()[0] += T(1);
    return;
  }
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output.requires_grad() && it->backward) it->backward();
  }
}

namespace {

template <typename T>
bool any_requires(const std::vector<TensorT<T>>& inputs) {
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

// Builds the output tensor, runs the finiteness check and records the node.
template <typename T>
TensorT<T> finish(GraphT<T>& g, OpKind op, std::vector<TensorT<T>> inputs, Shape out_shape,
                  std::vector<T> out_values,
                  std::function<std::function<void()>(TensorT<T>&)> make_backward) {
  const bool rg = any_requires(inputs);
  TensorT<T> out = TensorT<T>::from(std::move(out_shape), std::move(out_values), rg);
  check_finite(std::vector<T>(out.values().begin(), out.values().end()), op_name(op));
  std::function<void()> bwd;
  if (rg && make_backward) bwd = make_backward(out);
  g.record(op, std::move(inputs), out, std::move(bwd));
  return out;
}

}  // namespace

// --- ops --------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(GraphT<T>& g, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2) {
    throw std::invalid_argument("matmul: expects 2-D operands");
  }
  const int m = a.shape()[0], k = a.shape()[1];
  const int k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw std::invalid_argument("matmul: inner extents differ " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  mm_nn(a.values().data(), b.values().data(), out.data(), m, k, n, false);
  return finish<T>(g, OpKind::Matmul, {a, b}, {m, n}, std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      const T* dy = y.grad().data();
      if (a.requires_grad()) {
        mm_nt(dy, b.values().data(), a.mutable_grad().data(), m, n, k, true);
      }
      if (b.requires_grad()) {
        mm_tn(a.values().data(), dy, b.mutable_grad().data(), n, m, k, true);
      }
    };
  });
}

template <typename T>
TensorT<T> transpose(GraphT<T>& g, const TensorT<T>& x) {
  if (x.shape().size() != 2) throw std::invalid_argument("transpose: expects 2-D input");
  const int m = x.shape()[0], n = x.shape()[1];
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = x.values()[static_cast<std::size_t>(i) * n + j];
  return finish<T>(g, OpKind::Transpose, {x}, {n, m}, std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      auto dx = x.mutable_grad();
      const T* dy = y.grad().data();
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i) dx[static_cast<std::size_t>(i) * n + j] += dy[static_cast<std::size_t>(j) * m + i];
    };
  });
}

namespace {

// col[(C*k*k) x (OH*OW)] for one image.
template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int OH, int OW, T* col) {
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        T* dst = col + (static_cast<std::size_t>(c) * k * k + kh * k + kw) *
                           (static_cast<std::size_t>(OH) * OW);
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride - pad + kh;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride - pad + kw;
            T v = 0;
            if (ih >= 0 && ih < H && iw >= 0 && iw < W) {
              v = x[(static_cast<std::size_t>(c) * H + ih) * W + iw];
            }
            dst[static_cast<std::size_t>(oh) * OW + ow] = v;
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, int k, int stride, int pad, int OH, int OW,
                T* dx) {
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const T* src = col + (static_cast<std::size_t>(c) * k * k + kh * k + kw) *
                                 (static_cast<std::size_t>(OH) * OW);
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride - pad + kw;
            if (iw < 0 || iw >= W) continue;
            dx[(static_cast<std::size_t>(c) * H + ih) * W + iw] +=
                src[static_cast<std::size_t>(oh) * OW + ow];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
TensorT<T> conv2d(GraphT<T>& g, const TensorT<T>& x, const TensorT<T>& w, int stride,
                  int padding) {
  if (x.shape().size() != 4 || w.shape().size() != 4) {
    throw std::invalid_argument("conv2d: expects NCHW input and OIKK kernel");
  }
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int F = w.shape()[0], CK = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
  if (kh != kw || (kh != 1 && kh != 3)) throw std::invalid_argument("conv2d: kernel must be 1x1 or 3x3");
  if (C != CK) {
    throw std::invalid_argument("conv2d: channel mismatch, input has " + std::to_string(C) +
                                ", kernel expects " + std::to_string(CK));
  }
  if (stride < 1 || stride > 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
  if (padding < 0 || padding >= kh) throw std::invalid_argument("conv2d: bad padding");
  const int k = kh;
  const int OH = (H + 2 * padding - k) / stride + 1;
  const int OW = (W + 2 * padding - k) / stride + 1;
  if (OH < 1 || OW < 1) throw std::invalid_argument("conv2d: output collapses to zero size");

  const int ckk = C * k * k;
  const std::size_t plane = static_cast<std::size_t>(OH) * OW;
  std::vector<T> out(static_cast<std::size_t>(N) * F * plane);
  std::vector<T> col(static_cast<std::size_t>(ckk) * plane);
  for (int n = 0; n < N; ++n) {
    im2col(x.values().data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, k, stride,
           padding, OH, OW, col.data());
    mm_nn(w.values().data(), col.data(), out.data() + static_cast<std::size_t>(n) * F * plane, F,
          ckk, static_cast<int>(plane), false);
  }
  return finish<T>(g, OpKind::Conv2d, {x, w}, {N, F, OH, OW}, std::move(out),
                   [=](TensorT<T>& y) {
                     return [=]() mutable {
                       std::vector<T> colb(static_cast<std::size_t>(ckk) * plane);
                       std::vector<T> dcol(static_cast<std::size_t>(ckk) * plane);
                       for (int n = 0; n < N; ++n) {
                         const T* dy = y.grad().data() + static_cast<std::size_t>(n) * F * plane;
                         if (w.requires_grad() || x.requires_grad()) {
                           im2col(x.values().data() + static_cast<std::size_t>(n) * C * H * W, C,
                                  H, W, k, stride, padding, OH, OW, colb.data());
                         }
                         if (w.requires_grad()) {
                           mm_nt(dy, colb.data(), w.mutable_grad().data(), F,
                                 static_cast<int>(plane), ckk, true);
                         }
                         if (x.requires_grad()) {
                           mm_tn(w.values().data(), dy, dcol.data(), ckk, F,
                                 static_cast<int>(plane), false);
                           col2im_add(dcol.data(), C, H, W, k, stride, padding, OH, OW,
                                      x.mutable_grad().data() +
                                          static_cast<std::size_t>(n) * C * H * W);
                         }
                       }
                     };
                   });
}

template <typename T>
TensorT<T> bias_channel(GraphT<T>& g, const TensorT<T>& x, const TensorT<T>& b) {
  if (x.shape().size() != 4) throw std::invalid_argument("bias_channel: expects NCHW input");
  const int N = x.shape()[0], C = x.shape()[1];
  const std::size_t plane = static_cast<std::size_t>(x.shape()[2]) * x.shape()[3];
  if (b.shape().size() != 1 || b.shape()[0] != C) {
    throw std::invalid_argument("bias_channel: channel mismatch");
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      T* dst = out.data() + (static_cast<std::size_t>(n) * C + c) * plane;
      const T bv = b.values()[c];
      for (std::size_t i = 0; i < plane; ++i) dst[i] += bv;
    }
  return finish<T>(g, OpKind::BiasChannel, {x, b}, x.shape(), std::move(out),
                   [=](TensorT<T>& y) {
                     return [=]() mutable {
                       const T* dy = y.grad().data();
                       if (x.requires_grad()) accumulate(x.mutable_grad(), std::vector<T>(y.grad().begin(), y.grad().end()));
                       if (b.requires_grad()) {
                         auto db = b.mutable_grad();
                         for (int n = 0; n < N; ++n)
                           for (int c = 0; c < C; ++c) {
                             const T* src = dy + (static_cast<std::size_t>(n) * C + c) * plane;
                             T s = 0;
                             for (std::size_t i = 0; i < plane; ++i) s += src[i];
                             db[c] += s;
                           }
                       }
                     };
                   });
}

template <typename T>
TensorT<T> batchnorm2d(GraphT<T>& g, const TensorT<T>& x, const TensorT<T>& gamma,
                       const TensorT<T>& beta, BatchNormStateT<T>& state, bool train, T eps,
                       T momentum) {
  if (x.shape().size() != 4) throw std::invalid_argument("batchnorm2d: expects NCHW input");
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} ||
      static_cast<int>(state.running_mean.size()) != C ||
      static_cast<int>(state.running_var.size()) != C) {
    throw std::invalid_argument("batchnorm2d: channel mismatch");
  }
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::int64_t m = static_cast<std::int64_t>(N) * H * W;
  if (train && m < 2) throw std::invalid_argument("batchnorm2d: batch too small for train mode");

  std::vector<T> out(x.size());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(C);

  if (train) {
    for (int c = 0; c < C; ++c) {
      T sum = 0, sq = 0;
      for (int n = 0; n < N; ++n) {
        const T* src = x.values().data() + (static_cast<std::size_t>(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum += src[i];
          sq += src[i] * src[i];
        }
      }
      const T mu = sum / static_cast<T>(m);
      T var = sq / static_cast<T>(m) - mu * mu;
      if (var < 0) var = 0;  // guards rounding on constant channels
      const T is = T(1) / std::sqrt(var + eps);
      (*inv_std)[c] = is;
      const T gc = gamma.values()[c], bc = beta.values()[c];
      for (int n = 0; n < N; ++n) {
        const T* src = x.values().data() + (static_cast<std::size_t>(n) * C + c) * plane;
        T* xh = xhat->data() + (static_cast<std::size_t>(n) * C + c) * plane;
        T* dst = out.data() + (static_cast<std::size_t>(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          xh[i] = (src[i] - mu) * is;
          dst[i] = gc * xh[i] + bc;
        }
      }
      const T unbiased = var * static_cast<T>(m) / static_cast<T>(m - 1);
      state.running_mean[c] = (T(1) - momentum) * state.running_mean[c] + momentum * mu;
      state.running_var[c] = (T(1) - momentum) * state.running_var[c] + momentum * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      // scale = gamma / sqrt(var + eps); exact pass-through when gamma equals
      // sqrt(var + eps) because x/x == 1 in IEEE arithmetic.
      const T scale = gamma.values()[c] / std::sqrt(state.running_var[c] + eps);
      const T shift = beta.values()[c] - state.running_mean[c] * scale;
      const T is = T(1) / std::sqrt(state.running_var[c] + eps);
      (*inv_std)[c] = is;
      const T mu = state.running_mean[c];
      for (int n = 0; n < N; ++n) {
        const T* src = x.values().data() + (static_cast<std::size_t>(n) * C + c) * plane;
        T* xh = xhat->data() + (static_cast<std::size_t>(n) * C + c) * plane;
        T* dst = out.data() + (static_cast<std::size_t>(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          xh[i] = (src[i] - mu) * is;
          dst[i] = src[i] * scale + shift;
        }
      }
    }
  }

  return finish<T>(g, OpKind::BatchNorm2d, {x, gamma, beta}, x.shape(), std::move(out),
                   [=](TensorT<T>& y) {
                     return [=]() mutable {
                       const T* dy = y.grad().data();
                       for (int c = 0; c < C; ++c) {
                         T sum_dy = 0, sum_dy_xh = 0;
                         for (int n = 0; n < N; ++n) {
                           const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                           for (std::size_t i = 0; i < plane; ++i) {
                             sum_dy += dy[base + i];
                             sum_dy_xh += dy[base + i] * (*xhat)[base + i];
                           }
                         }
                         if (gamma.requires_grad()) gamma.mutable_grad()[c] += sum_dy_xh;
                         if (beta.requires_grad()) beta.mutable_grad()[c] += sum_dy;
                         if (x.requires_grad()) {
                           auto dx = x.mutable_grad();
                           const T gc = gamma.values()[c];
                           const T is = (*inv_std)[c];
                           if (train) {
                             const T inv_m = T(1) / static_cast<T>(m);
                             for (int n = 0; n < N; ++n) {
                               const std::size_t base =
                                   (static_cast<std::size_t>(n) * C + c) * plane;
                               for (std::size_t i = 0; i < plane; ++i) {
                                 dx[base + i] += gc * is *
                                                 (dy[base + i] - sum_dy * inv_m -
                                                  (*xhat)[base + i] * sum_dy_xh * inv_m);
                               }
                             }
                           } else {
                             for (int n = 0; n < N; ++n) {
                               const std::size_t base =
                                   (static_cast<std::size_t>(n) * C + c) * plane;
                               for (std::size_t i = 0; i < plane; ++i) {
                                 dx[base + i] += gc * is * dy[base + i];
                               }
                             }
                           }
                         }
                       }
                     };
                   });
}

template <typename T>
TensorT<T> relu(GraphT<T>& g, const TensorT<T>& x) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  return finish<T>(g, OpKind::Relu, {x}, x.shape(), std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      auto dx = x.mutable_grad();
      const T* dy = y.grad().data();
      const T* xv = x.values().data();
      // subgradient at 0 is 0
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xv[i] > T(0) ? dy[i] : T(0);
    };
  });
}

template <typename T>
TensorT<T> log(GraphT<T>& g, const TensorT<T>& x) {
  std::vector<T> out(x.size());
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = std::log(x.values()[i]);
  return finish<T>(g, OpKind::Log, {x}, x.shape(), std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      auto dx = x.mutable_grad();
      const T* dy = y.grad().data();
      const T* xv = x.values().data();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] / xv[i];
    };
  });
}

template <typename T>
TensorT<T> add(GraphT<T>& g, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
  std::vector<T> out(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return finish<T>(g, OpKind::Add, {a, b}, a.shape(), std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      const T* dy = y.grad().data();
      if (a.requires_grad()) {
        auto da = a.mutable_grad();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto db = b.mutable_grad();
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i];
      }
    };
  });
}

template <typename T>
TensorT<T> mul(GraphT<T>& g, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("mul: shape mismatch");
  std::vector<T> out(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return finish<T>(g, OpKind::Mul, {a, b}, a.shape(), std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      const T* dy = y.grad().data();
      if (a.requires_grad()) {
        auto da = a.mutable_grad();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * b.values()[i];
      }
      if (b.requires_grad()) {
        auto db = b.mutable_grad();
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * a.values()[i];
      }
    };
  });
}

template <typename T>
TensorT<T> affine(GraphT<T>& g, const TensorT<T>& x, T a, T b) {
  std::vector<T> out(x.size());
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = a * x.values()[i] + b;
  return finish<T>(g, OpKind::Affine, {x}, x.shape(), std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      auto dx = x.mutable_grad();
      const T* dy = y.grad().data();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += a * dy[i];
    };
  });
}

template <typename T>
TensorT<T> clamp_min(GraphT<T>& g, const TensorT<T>& x, T floor) {
  std::vector<T> out(x.size());
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = std::max(x.values()[i], floor);
  return finish<T>(g, OpKind::ClampMin, {x}, x.shape(), std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      auto dx = x.mutable_grad();
      const T* dy = y.grad().data();
      const T* xv = x.values().data();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xv[i] > floor ? dy[i] : T(0);
    };
  });
}

template <typename T>
TensorT<T> mean(GraphT<T>& g, const TensorT<T>& x) {
  T s = 0;
  for (std::int64_t i = 0; i < x.size(); ++i) s += x.values()[i];
  const T inv_n = T(1) / static_cast<T>(x.size());
  return finish<T>(g, OpKind::Mean, {x}, {1}, {s * inv_n}, [=](TensorT<T>& y) {
    return [=]() mutable {
      auto dx = x.mutable_grad();
      const T d = y.grad()[0] * inv_n;
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d;
    };
  });
}

template <typename T>
TensorT<T> sum(GraphT<T>& g, const TensorT<T>& x) {
  T s = 0;
  for (std::int64_t i = 0; i < x.size(); ++i) s += x.values()[i];
  return finish<T>(g, OpKind::Sum, {x}, {1}, {s}, [=](TensorT<T>& y) {
    return [=]() mutable {
      auto dx = x.mutable_grad();
      const T d = y.grad()[0];
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d;
    };
  });
}

template <typename T>
TensorT<T> concat_channels(GraphT<T>& g, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape().size() != 4 || b.shape().size() != 4) {
    throw std::invalid_argument("concat_channels: expects NCHW inputs");
  }
  const int N = a.shape()[0], Ca = a.shape()[1], H = a.shape()[2], W = a.shape()[3];
  const int Cb = b.shape()[1];
  if (b.shape()[0] != N || b.shape()[2] != H || b.shape()[3] != W) {
    throw std::invalid_argument("concat_channels: non-channel extents differ");
  }
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<T> out(static_cast<std::size_t>(N) * (Ca + Cb) * plane);
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.values().data() + static_cast<std::size_t>(n) * Ca * plane, Ca * plane,
                out.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane);
    std::copy_n(b.values().data() + static_cast<std::size_t>(n) * Cb * plane, Cb * plane,
                out.data() + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane);
  }
  return finish<T>(g, OpKind::ConcatChannels, {a, b}, {N, Ca + Cb, H, W}, std::move(out),
                   [=](TensorT<T>& y) {
                     return [=]() mutable {
                       const T* dy = y.grad().data();
                       for (int n = 0; n < N; ++n) {
                         if (a.requires_grad()) {
                           T* da = a.mutable_grad().data() + static_cast<std::size_t>(n) * Ca * plane;
                           const T* src = dy + static_cast<std::size_t>(n) * (Ca + Cb) * plane;
                           for (std::size_t i = 0; i < Ca * plane; ++i) da[i] += src[i];
                         }
                         if (b.requires_grad()) {
                           T* db = b.mutable_grad().data() + static_cast<std::size_t>(n) * Cb * plane;
                           const T* src = dy + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane;
                           for (std::size_t i = 0; i < Cb * plane; ++i) db[i] += src[i];
                         }
                       }
                     };
                   });
}

template <typename T>
TensorT<T> concat_rows(GraphT<T>& g, const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Shape rest(parts[0].shape().begin() + 1, parts[0].shape().end());
  int rows = 0;
  for (const auto& p : parts) {
    Shape r(p.shape().begin() + 1, p.shape().end());
    if (r != rest) throw std::invalid_argument("concat_rows: trailing extents differ");
    rows += p.shape()[0];
  }
  const std::size_t stride = static_cast<std::size_t>(numel(rest) == 0 ? 1 : numel(rest));
  Shape out_shape;
  out_shape.push_back(rows);
  out_shape.insert(out_shape.end(), rest.begin(), rest.end());
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(rows) * stride);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  auto inputs = parts;
  return finish<T>(g, OpKind::ConcatRows, std::move(inputs), std::move(out_shape), std::move(out),
                   [=](TensorT<T>& y) {
                     return [=]() mutable {
                       const T* dy = y.grad().data();
                       std::size_t off = 0;
                       for (auto p : parts) {
                         const std::size_t len = static_cast<std::size_t>(p.size());
                         if (p.requires_grad()) {
                           auto dp = p.mutable_grad();
                           for (std::size_t i = 0; i < len; ++i) dp[i] += dy[off + i];
                         }
                         off += len;
                       }
                     };
                   });
}

template <typename T>
TensorT<T> softmax(GraphT<T>& g, const TensorT<T>& x) {
  if (x.shape().size() != 2) throw std::invalid_argument("softmax: expects 2-D logits");
  const int R = x.shape()[0], C = x.shape()[1];
  if (C < 2) throw std::invalid_argument("softmax: needs at least two classes");
  std::vector<T> out(x.size());
  for (int r = 0; r < R; ++r) {
    const T* row = x.values().data() + static_cast<std::size_t>(r) * C;
    T* dst = out.data() + static_cast<std::size_t>(r) * C;
    T mx = row[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    T z = 0;
    for (int c = 0; c < C; ++c) {
      dst[c] = std::exp(row[c] - mx);
      z += dst[c];
    }
    for (int c = 0; c < C; ++c) dst[c] /= z;
  }
  return finish<T>(g, OpKind::Softmax, {x}, x.shape(), std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      auto dx = x.mutable_grad();
      const T* dy = y.grad().data();
      const T* s = y.values().data();
      for (int r = 0; r < R; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * C;
        T dot = 0;
        for (int c = 0; c < C; ++c) dot += dy[base + c] * s[base + c];
        for (int c = 0; c < C; ++c) dx[base + c] += s[base + c] * (dy[base + c] - dot);
      }
    };
  });
}

namespace {

template <typename T>
void check_labels(const TensorT<T>& x, const std::vector<int>& labels, const char* what) {
  if (x.shape().size() != 2) throw std::invalid_argument(std::string(what) + ": expects 2-D input");
  if (static_cast<int>(labels.size()) != x.shape()[0]) {
    throw std::invalid_argument(std::string(what) + ": one label per row required");
  }
  for (int l : labels) {
    if (l < 0 || l >= x.shape()[1]) throw std::invalid_argument(std::string(what) + ": label out of range");
  }
}

}  // namespace

template <typename T>
TensorT<T> pick_class(GraphT<T>& g, const TensorT<T>& x, const std::vector<int>& labels) {
  check_labels(x, labels, "pick_class");
  const int R = x.shape()[0], C = x.shape()[1];
  std::vector<T> out(R);
  for (int r = 0; r < R; ++r) out[r] = x.values()[static_cast<std::size_t>(r) * C + labels[r]];
  return finish<T>(g, OpKind::PickClass, {x}, {R}, std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      auto dx = x.mutable_grad();
      const T* dy = y.grad().data();
      for (int r = 0; r < R; ++r) dx[static_cast<std::size_t>(r) * C + labels[r]] += dy[r];
    };
  });
}

template <typename T>
TensorT<T> masked_max_excl(GraphT<T>& g, const TensorT<T>& x, const std::vector<int>& labels) {
  check_labels(x, labels, "masked_max_excl");
  const int R = x.shape()[0], C = x.shape()[1];
  if (C < 2) throw std::invalid_argument("masked_max_excl: needs at least two classes");
  std::vector<T> out(R);
  auto arg = std::make_shared<std::vector<int>>(R);
  for (int r = 0; r < R; ++r) {
    const T* row = x.values().data() + static_cast<std::size_t>(r) * C;
    int best = -1;
    for (int c = 0; c < C; ++c) {
      if (c == labels[r]) continue;
      if (best < 0 || row[c] > row[best]) best = c;
    }
    (*arg)[r] = best;
    out[r] = row[best];
  }
  return finish<T>(g, OpKind::MaskedMaxExcl, {x}, {R}, std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      auto dx = x.mutable_grad();
      const T* dy = y.grad().data();
      for (int r = 0; r < R; ++r) dx[static_cast<std::size_t>(r) * C + (*arg)[r]] += dy[r];
    };
  });
}

template <typename T>
TensorT<T> global_avg_pool(GraphT<T>& g, const TensorT<T>& x) {
  if (x.shape().size() != 4) throw std::invalid_argument("global_avg_pool: expects NCHW input");
  const int N = x.shape()[0], C = x.shape()[1];
  const std::size_t plane = static_cast<std::size_t>(x.shape()[2]) * x.shape()[3];
  const T inv = T(1) / static_cast<T>(plane);
  std::vector<T> out(static_cast<std::size_t>(N) * C);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* src = x.values().data() + (static_cast<std::size_t>(n) * C + c) * plane;
      T s = 0;
      for (std::size_t i = 0; i < plane; ++i) s += src[i];
      out[static_cast<std::size_t>(n) * C + c] = s * inv;
    }
  return finish<T>(g, OpKind::GlobalAvgPool, {x}, {N, C}, std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      auto dx = x.mutable_grad();
      const T* dy = y.grad().data();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const T d = dy[static_cast<std::size_t>(n) * C + c] * inv;
          T* dst = dx.data() + (static_cast<std::size_t>(n) * C + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) dst[i] += d;
        }
    };
  });
}

template <typename T>
TensorT<T> add_rowvec(GraphT<T>& g, const TensorT<T>& x, const TensorT<T>& b) {
  if (x.shape().size() != 2) throw std::invalid_argument("add_rowvec: expects 2-D input");
  const int R = x.shape()[0], C = x.shape()[1];
  if (b.shape().size() != 1 || b.shape()[0] != C) {
    throw std::invalid_argument("add_rowvec: vector length mismatch");
  }
  std::vector<T> out(x.size());
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      out[static_cast<std::size_t>(r) * C + c] = x.values()[static_cast<std::size_t>(r) * C + c] + b.values()[c];
  return finish<T>(g, OpKind::AddRowVec, {x, b}, x.shape(), std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      const T* dy = y.grad().data();
      if (x.requires_grad()) {
        auto dx = x.mutable_grad();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto db = b.mutable_grad();
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < C; ++c) db[c] += dy[static_cast<std::size_t>(r) * C + c];
      }
    };
  });
}

template <typename T>
TensorT<T> reshape(GraphT<T>& g, const TensorT<T>& x, Shape shape) {
  check_shape(shape);
  if (numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: element count differs for " + shape_str(shape));
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  return finish<T>(g, OpKind::Reshape, {x}, std::move(shape), std::move(out), [=](TensorT<T>& y) {
    return [=]() mutable {
      auto dx = x.mutable_grad();
      const T* dy = y.grad().data();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
    };
  });
}

template <typename T>
TensorT<T> gather_rows(GraphT<T>& g, const TensorT<T>& x, const std::vector<int>& indices) {
  if (x.shape().empty()) throw std::invalid_argument("gather_rows: scalar input");
  if (indices.empty()) throw std::invalid_argument("gather_rows: empty index list");
  const int N = x.shape()[0];
  for (int i : indices) {
    if (i < 0 || i >= N) throw std::invalid_argument("gather_rows: index out of range");
  }
  Shape rest(x.shape().begin() + 1, x.shape().end());
  const std::size_t stride = rest.empty() ? 1 : static_cast<std::size_t>(numel(rest));
  Shape out_shape;
  out_shape.push_back(static_cast<int>(indices.size()));
  out_shape.insert(out_shape.end(), rest.begin(), rest.end());
  std::vector<T> out(indices.size() * stride);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(x.values().data() + static_cast<std::size_t>(indices[i]) * stride, stride,
                out.data() + i * stride);
  }
  return finish<T>(g, OpKind::GatherRows, {x}, std::move(out_shape), std::move(out),
                   [=](TensorT<T>& y) {
                     return [=]() mutable {
                       auto dx = x.mutable_grad();
                       const T* dy = y.grad().data();
                       for (std::size_t i = 0; i < indices.size(); ++i) {
                         T* dst = dx.data() + static_cast<std::size_t>(indices[i]) * stride;
                         const T* src = dy + i * stride;
                         for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
                       }
                     };
                   });
}

// --- explicit instantiations -------------------------------------------------

#define NPD_INSTANTIATE(T)                                                                        \
  template class TensorT<T>;                                                                      \
  template class GraphT<T>;                                                                       \
  template TensorT<T> matmul(GraphT<T>&, const TensorT<T>&, const TensorT<T>&);                   \
  template TensorT<T> transpose(GraphT<T>&, const TensorT<T>&);                                   \
  template TensorT<T> conv2d(GraphT<T>&, const TensorT<T>&, const TensorT<T>&, int, int);         \
  template TensorT<T> bias_channel(GraphT<T>&, const TensorT<T>&, const TensorT<T>&);             \
  template TensorT<T> batchnorm2d(GraphT<T>&, const TensorT<T>&, const TensorT<T>&,               \
                                  const TensorT<T>&, BatchNormStateT<T>&, bool, T, T);            \
  template TensorT<T> relu(GraphT<T>&, const TensorT<T>&);                                        \
  template TensorT<T> log(GraphT<T>&, const TensorT<T>&);                                         \
  template TensorT<T> add(GraphT<T>&, const TensorT<T>&, const TensorT<T>&);                      \
  template TensorT<T> mul(GraphT<T>&, const TensorT<T>&, const TensorT<T>&);                      \
  template TensorT<T> affine(GraphT<T>&, const TensorT<T>&, T, T);                                \
  template TensorT<T> clamp_min(GraphT<T>&, const TensorT<T>&, T);                                \
  template TensorT<T> mean(GraphT<T>&, const TensorT<T>&);                                        \
  template TensorT<T> sum(GraphT<T>&, const TensorT<T>&);                                         \
  template TensorT<T> concat_channels(GraphT<T>&, const TensorT<T>&, const TensorT<T>&);          \
  template TensorT<T> concat_rows(GraphT<T>&, const std::vector<TensorT<T>>&);                    \
  template TensorT<T> softmax(GraphT<T>&, const TensorT<T>&);                                     \
  template TensorT<T> pick_class(GraphT<T>&, const TensorT<T>&, const std::vector<int>&);         \
  template TensorT<T> masked_max_excl(GraphT<T>&, const TensorT<T>&, const std::vector<int>&);    \
  template TensorT<T> global_avg_pool(GraphT<T>&, const TensorT<T>&);                             \
  template TensorT<T> add_rowvec(GraphT<T>&, const TensorT<T>&, const TensorT<T>&);               \
  template TensorT<T> reshape(GraphT<T>&, const TensorT<T>&, Shape);                              \
  template TensorT<T> gather_rows(GraphT<T>&, const TensorT<T>&, const std::vector<int>&);

NPD_INSTANTIATE(float)
NPD_INSTANTIATE(double)

#undef NPD_INSTANTIATE

}  // namespace npd
