#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ctarnn {

enum class DType { f32, f64 };

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InvalidMaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Boolean validity mask. Shapes are op-specific: softmax wants the input
// shape, mean_axis wants the input shape truncated after the reduced axis.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> valid;

  static Mask all_valid(const Shape& shape);
  // [B x max_len] mask with row b valid on [0, lengths[b]).
  static Mask from_lengths(std::span<const std::size_t> lengths, std::size_t max_len);

  bool operator[](std::size_t i) const { return valid[i] != 0; }
  std::size_t size() const { return valid.size(); }
  bool all() const;
};

namespace detail {
struct TensorImpl;
}

// Dense row-major array with an optional gradient. Copies share storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dtype = DType::f32);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::f32);
  static Tensor from_values(const Shape& shape, std::span<const double> values,
                            DType dtype = DType::f32);
  static Tensor from_floats(const Shape& shape, std::vector<float> values);
  static Tensor from_doubles(const Shape& shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  double item() const;
  double value(std::size_t flat_index) const;
  std::vector<double> values() const;
  void set_value(std::size_t flat_index, double v);

  template <typename T>
  std::span<const T> data() const;
  template <typename T>
  std::span<T> mutable_data();

  bool has_grad() const;
  // Accumulated gradient in place; empty when none has been accumulated.
  template <typename T>
  std::span<const T> grad_data() const;
  // Snapshot of the accumulated gradient, detached from any tape.
  Tensor grad() const;
  std::vector<double> grad_values() const;
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;
  Tensor cast(DType dtype) const;
  // Converts storage in place; every handle sharing this tensor sees it. Drops grad.
  void convert_(DType dtype);
  // Overwrites values from a tensor of equal shape (any dtype).
  void assign_(const Tensor& other);

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape

class Tape {
 public:
  struct Entry {
    std::string_view op;
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> backward;
  };

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss)=1, replays adjoints newest-first, then clears.
  void backward(const Tensor& loss);

 private:
  std::vector<Entry> entries_;
};

// Tape of the calling thread.
Tape& current_tape();

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

void backward(const Tensor& loss);

// Fault injection for negative-control gradient tests: the adjoint of every
// op named `op` is scaled by `factor`. Pass an empty name to disable.
void set_adjoint_fault(std::string_view op, double factor);

// ---------------------------------------------------------------------------
// Ops. All shape checks are explicit; nothing broadcasts implicitly.

Tensor matmul(const Tensor& a, const Tensor& b);
// Batched product: [B x r x k] * [B x k x c] -> [B x r x c].
Tensor bmm(const Tensor& a, const Tensor& b);
// x[r x in] * W[out x in]^T (+ bias[out]).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double c);
Tensor one_minus(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

// Softmax over the last axis. Masked entries are exactly zero.
Tensor softmax(const Tensor& x, const Mask* mask = nullptr);
// Mean over `axis`; mask shape must equal x.shape()[0..axis].
Tensor mean_axis(const Tensor& x, std::size_t axis, const Mask* mask = nullptr);
Tensor sum_axis(const Tensor& x, std::size_t axis);
// Sum of all entries, shape {1}.
Tensor sum(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& x);
// Left-pads rank with 1s, then expands every extent-1 axis to the target.
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor stack(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
// Removes `axis` by taking position `index` along it.
Tensor select(const Tensor& x, std::size_t axis, std::size_t index);

// Row-wise choice on [B x ...]: row b comes from `fresh` when take[b], else `kept`.
Tensor masked_update(const Tensor& fresh, const Tensor& kept, std::span<const std::uint8_t> take);

// Fused GRU recurrence. xz, xr, xh: [B x m x H] input projections with biases
// already added; u_*: [H x H]. Starting from a zero state, row b advances at
// step t only where valid[b*m + t], otherwise its state is carried. Returns
// the state after every step, [B x m x H]. Scans t = m-1..0 when `reverse`.
Tensor gru_scan(const Tensor& xz, const Tensor& xr, const Tensor& xh, const Tensor& u_z,
                const Tensor& u_r, const Tensor& u_h, std::span<const std::uint8_t> valid,
                bool reverse);

// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

// Mean negative log-likelihood of labels under softmax(logits); logits [B x C].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Gradient checking

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

// Central differences over every element of every parameter. The relative
// error of one element is |a - n| / max(|a|, |n|, 1e-8).
FiniteDiffReport finite_diff_report(const std::function<Tensor()>& loss_fn,
                                    const std::vector<Tensor>& params, double eps = 1e-5);
double finite_diff_check(const std::function<Tensor()>& loss_fn,
                         const std::vector<Tensor>& params, double eps = 1e-5);

}  // namespace ctarnn
