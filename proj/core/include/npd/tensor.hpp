#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

// Minimal reverse-mode autodiff engine. Tensors are immutable after
// construction except for their gradient buffers; a Graph records ops in
// creation order and replays them backwards exactly once per backward()
// call. Instantiated for float (training) and double (verification suites).

namespace npd {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // sized iff requires_grad
  bool requires_grad = false;
};

template <typename T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false);
  static TensorT full(Shape shape, T value, bool requires_grad = false);
  static TensorT from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static TensorT scalar(T value, bool requires_grad = false);

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  std::int64_t size() const { return static_cast<std::int64_t>(s_->values.size()); }
  bool requires_grad() const { return s_->requires_grad; }

  std::span<const T> values() const { return s_->values; }
  std::span<T> mutable_values() { return s_->values; }
  std::span<const T> grad() const { return s_->grad; }
  std::span<T> mutable_grad() { return s_->grad; }

  // Flips requires_grad, allocating or dropping the grad buffer.
  void set_requires_grad(bool on);
  void zero_grad();

  T item() const;  // scalar tensors only

  // Identity of the underlying buffer; used to tell leaves apart.
  const void* id() const { return s_.get(); }
  bool same_storage(const TensorT& other) const { return s_ == other.s_; }

 private:
  explicit TensorT(std::shared_ptr<Storage<T>> s) : s_(std::move(s)) {}
  std::shared_ptr<Storage<T>> s_;
};

enum class OpKind {
  Matmul,
  Transpose,
  Conv2d,
  BiasChannel,
  BatchNorm2d,
  Relu,
  Log,
  Add,
  Mul,
  Affine,
  ClampMin,
  Mean,
  Sum,
  ConcatChannels,
  ConcatRows,
  Softmax,
  PickClass,
  MaskedMaxExcl,
  GlobalAvgPool,
  AddRowVec,
  Reshape,
  GatherRows,
};

const char* op_name(OpKind kind);

template <typename T>
struct GraphNode {
  OpKind op;
  std::vector<TensorT<T>> inputs;
  TensorT<T> output;
  std::function<void()> backward;
};

// Append-only tape. Node order is creation order; backward() visits nodes in
// reverse creation order exactly once. Leaf gradients accumulate across
// repeated backward() calls; intermediate gradients are reset per call.
template <typename T>
class GraphT {
 public:
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void backward(const TensorT<T>& root);

  void record(OpKind op, std::vector<TensorT<T>> inputs, TensorT<T> output,
              std::function<void()> backward_fn);

 private:
  std::vector<GraphNode<T>> nodes_;
};

// Running statistics for batch normalization; owned by the layer, updated
// only by train-mode forwards.
template <typename T>
struct BatchNormStateT {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  static BatchNormStateT identity(int channels) {
    BatchNormStateT s;
    s.running_mean.assign(channels, T(0));
    s.running_var.assign(channels, T(1));
    return s;
  }
};

// --- operations ------------------------------------------------------------
// Every op validates shapes, checks its output for NaN/Inf and records a
// graph node so backward() can reach the inputs.

template <typename T>
TensorT<T> matmul(GraphT<T>& g, const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> transpose(GraphT<T>& g, const TensorT<T>& x);

// Cross-correlation over NCHW input, OIKK kernel, k in {1,3}.
template <typename T>
TensorT<T> conv2d(GraphT<T>& g, const TensorT<T>& x, const TensorT<T>& w, int stride,
                  int padding);

template <typename T>
TensorT<T> bias_channel(GraphT<T>& g, const TensorT<T>& x, const TensorT<T>& b);

template <typename T>
TensorT<T> batchnorm2d(GraphT<T>& g, const TensorT<T>& x, const TensorT<T>& gamma,
                       const TensorT<T>& beta, BatchNormStateT<T>& state, bool train,
                       T eps = T(1e-5), T momentum = T(0.1));

template <typename T>
TensorT<T> relu(GraphT<T>& g, const TensorT<T>& x);

template <typename T>
TensorT<T> log(GraphT<T>& g, const TensorT<T>& x);

template <typename T>
TensorT<T> add(GraphT<T>& g, const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> mul(GraphT<T>& g, const TensorT<T>& a, const TensorT<T>& b);

// a*x + b, elementwise with scalar coefficients.
template <typename T>
TensorT<T> affine(GraphT<T>& g, const TensorT<T>& x, T a, T b);

template <typename T>
TensorT<T> clamp_min(GraphT<T>& g, const TensorT<T>& x, T floor);

template <typename T>
TensorT<T> mean(GraphT<T>& g, const TensorT<T>& x);

template <typename T>
TensorT<T> sum(GraphT<T>& g, const TensorT<T>& x);

template <typename T>
TensorT<T> concat_channels(GraphT<T>& g, const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> concat_rows(GraphT<T>& g, const std::vector<TensorT<T>>& parts);

// Row-wise softmax over the last extent of a 2-D tensor, max-subtracted.
template <typename T>
TensorT<T> softmax(GraphT<T>& g, const TensorT<T>& x);

// out[r] = x[r, labels[r]]
template <typename T>
TensorT<T> pick_class(GraphT<T>& g, const TensorT<T>& x, const std::vector<int>& labels);

// out[r] = max_{k != labels[r]} x[r, k]; ties resolved to the lowest index.
template <typename T>
TensorT<T> masked_max_excl(GraphT<T>& g, const TensorT<T>& x, const std::vector<int>& labels);

template <typename T>
TensorT<T> global_avg_pool(GraphT<T>& g, const TensorT<T>& x);

template <typename T>
TensorT<T> add_rowvec(GraphT<T>& g, const TensorT<T>& x, const TensorT<T>& b);

template <typename T>
TensorT<T> reshape(GraphT<T>& g, const TensorT<T>& x, Shape shape);

// out[i, ...] = x[indices[i], ...]; backward scatter-adds.
template <typename T>
TensorT<T> gather_rows(GraphT<T>& g, const TensorT<T>& x, const std::vector<int>& indices);

// Product aliases used by the training code.
using Tensor = TensorT<float>;
using Graph = GraphT<float>;
using BatchNormState = BatchNormStateT<float>;

}  // namespace npd
