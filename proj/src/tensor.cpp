#include "ctarnn/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace ctarnn {

namespace detail {

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::vector<float> f32;
  std::vector<double> f64;
  std::vector<float> grad_f32;
  std::vector<double> grad_f64;
  bool requires_grad = false;
  bool has_grad = false;

  std::size_t numel() const { return shape_numel(shape); }

  template <typename T>
  std::vector<T>& buf() {
    if constexpr (std::is_same_v<T, float>) {
      return f32;
    } else {
      return f64;
    }
  }

  template <typename T>
  std::vector<T>& gbuf() {
    if constexpr (std::is_same_v<T, float>) {
      return grad_f32;
    } else {
      return grad_f64;
    }
  }

  // Allocates a zero gradient on first use.
  template <typename T>
  std::span<T> grad() {
    auto& g = gbuf<T>();
    if (!has_grad) {
      g.assign(numel(), T(0));
      has_grad = true;
    }
    return g;
  }

  void drop_grad() {
    grad_f32.clear();
    grad_f32.shrink_to_fit();
    grad_f64.clear();
    grad_f64.shrink_to_fit();
    has_grad = false;
  }
};

}  // namespace detail

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

namespace {

template <typename F>
void dispatch(DType dtype, F&& fn) {
  if (dtype == DType::f64) {
    fn.template operator()<double>();
  } else {
    fn.template operator()<float>();
  }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

thread_local Tape t_tape;
thread_local bool t_grad_enabled = true;

std::string g_fault_op;
double g_fault_factor = 1.0;

Tensor make_result(const Shape& shape, DType dtype) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->dtype = dtype;
  if (dtype == DType::f64) {
    impl->f64.assign(shape_numel(shape), 0.0);
  } else {
    impl->f32.assign(shape_numel(shape), 0.0f);
  }
  return Tensor(std::move(impl));
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!t_grad_enabled) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

bool should_record(const std::vector<Tensor>& inputs) {
  if (!t_grad_enabled) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

void record(std::string_view op, const Tensor& out, std::function<void()> fn) {
  out.impl()->requires_grad = true;
  t_tape.record({op, out.impl(), std::move(fn)});
}

void check_defined(const Tensor& t, std::string_view op) {
  if (!t.defined()) throw DimensionError(std::string(op) + ": undefined tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  check_defined(a, op);
  check_defined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  if (a.dtype() != b.dtype()) {
    throw DimensionError(std::string(op) + ": dtype mismatch");
  }
}

std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out.push_back(s[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& x, std::string_view name, Fwd fwd, Bwd bwd) {
  check_defined(x, name);
  Tensor out = make_result(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto in = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = static_cast<T>(fwd(in[i]));
  });
  if (should_record({&x})) {
    record(name, out, [xi = x.impl(), oi = out.impl(), bwd]() {
      if (!xi->requires_grad) return;
      dispatch(oi->dtype, [&]<typename T>() {
        const auto& in = xi->buf<T>();
        const auto& y = oi->buf<T>();
        const auto& g = oi->gbuf<T>();
        auto gx = xi->grad<T>();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += static_cast<T>(bwd(in[i], y[i], g[i]));
      });
    });
  }
  return out;
}

// out[i] = x[index[i]]; the adjoint scatters back.
Tensor gather(const Tensor& x, const Shape& out_shape, std::vector<std::size_t> index,
              std::string_view name) {
  Tensor out = make_result(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto in = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < index.size(); ++i) o[i] = in[index[i]];
  });
  if (should_record({&x})) {
    auto shared = std::make_shared<std::vector<std::size_t>>(std::move(index));
    record(name, out, [xi = x.impl(), oi = out.impl(), shared]() {
      if (!xi->requires_grad) return;
      dispatch(oi->dtype, [&]<typename T>() {
        const auto& g = oi->gbuf<T>();
        auto gx = xi->grad<T>();
        const auto& idx = *shared;
        for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
      });
    });
  }
  return out;
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

struct Block {
  std::size_t outer;
  std::size_t len;
  std::size_t inner;
};

// Joins parts viewed as [outer x len_i x inner] along the middle axis.
Tensor join(const std::vector<Tensor>& parts, const std::vector<Block>& blocks,
            const Shape& out_shape, std::string_view name) {
  const DType dtype = parts.front().dtype();
  const std::size_t outer = blocks.front().outer;
  const std::size_t inner = blocks.front().inner;
  std::size_t total = 0;
  for (const auto& b : blocks) total += b.len;
  Tensor out = make_result(out_shape, dtype);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& b : blocks) {
    offsets.push_back(off);
    off += b.len;
  }
  dispatch(dtype, [&]<typename T>() {
    auto o = out.mutable_data<T>();
    for (std::size_t p = 0; p < parts.size(); ++p) {
      auto in = parts[p].data<T>();
      const std::size_t chunk = blocks[p].len * inner;
      for (std::size_t r = 0; r < outer; ++r) {
        std::copy_n(in.begin() + r * chunk, chunk, o.begin() + (r * total + offsets[p]) * inner);
      }
    }
  });
  if (should_record(parts)) {
    std::vector<ImplPtr> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    record(name, out, [impls, blocks, offsets, outer, inner, total, oi = out.impl()]() {
      dispatch(oi->dtype, [&]<typename T>() {
        const auto& g = oi->gbuf<T>();
        for (std::size_t p = 0; p < impls.size(); ++p) {
          if (!impls[p]->requires_grad) continue;
          auto gx = impls[p]->grad<T>();
          const std::size_t chunk = blocks[p].len * inner;
          for (std::size_t r = 0; r < outer; ++r) {
            const T* src = g.data() + (r * total + offsets[p]) * inner;
            T* dst = gx.data() + r * chunk;
            for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
          }
        }
      });
    });
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Shape helpers and Mask

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

const char* dtype_name(DType dtype) { return dtype == DType::f64 ? "f64" : "f32"; }

Mask Mask::all_valid(const Shape& shape) {
  return Mask{shape, std::vector<std::uint8_t>(shape_numel(shape), 1)};
}

Mask Mask::from_lengths(std::span<const std::size_t> lengths, std::size_t max_len) {
  Mask m{{lengths.size(), max_len}, std::vector<std::uint8_t>(lengths.size() * max_len, 0)};
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    for (std::size_t t = 0; t < std::min(lengths[b], max_len); ++t) m.valid[b * max_len + t] = 1;
  }
  return m;
}

bool Mask::all() const {
  return std::all_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; });
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(const Shape& shape, DType dtype) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
  }
  return make_result(shape, dtype);
}

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  Tensor t = zeros(shape, dtype);
  dispatch(dtype, [&]<typename T>() {
    auto d = t.mutable_data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from_values(const Shape& shape, std::span<const double> values, DType dtype) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("from_values: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  Tensor t = zeros(shape, dtype);
  dispatch(dtype, [&]<typename T>() {
    auto d = t.mutable_data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_floats(const Shape& shape, std::vector<float> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("from_floats: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->dtype = DType::f32;
  impl->f32 = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_doubles(const Shape& shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("from_doubles: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->dtype = DType::f64;
  impl->f64 = std::move(values);
  return Tensor(std::move(impl));
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= dim()) throw DimensionError("axis out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->numel(); }
DType Tensor::dtype() const { return impl_->dtype; }
bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return value(0);
}

double Tensor::value(std::size_t i) const {
  return impl_->dtype == DType::f64 ? impl_->f64.at(i) : static_cast<double>(impl_->f32.at(i));
}

std::vector<double> Tensor::values() const {
  if (impl_->dtype == DType::f64) return impl_->f64;
  return {impl_->f32.begin(), impl_->f32.end()};
}

void Tensor::set_value(std::size_t i, double v) {
  if (impl_->dtype == DType::f64) {
    impl_->f64.at(i) = v;
  } else {
    impl_->f32.at(i) = static_cast<float>(v);
  }
}

template <typename T>
std::span<const T> Tensor::data() const {
  if ((impl_->dtype == DType::f64) != std::is_same_v<T, double>) {
    throw DimensionError(std::string("data<>() dtype mismatch, tensor is ") +
                         dtype_name(impl_->dtype));
  }
  return impl_->buf<T>();
}

template <typename T>
std::span<T> Tensor::mutable_data() {
  if ((impl_->dtype == DType::f64) != std::is_same_v<T, double>) {
    throw DimensionError(std::string("mutable_data<>() dtype mismatch, tensor is ") +
                         dtype_name(impl_->dtype));
  }
  return impl_->buf<T>();
}

template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;
template std::span<float> Tensor::mutable_data<float>();
template std::span<double> Tensor::mutable_data<double>();

bool Tensor::has_grad() const { return impl_ && impl_->has_grad; }

template <typename T>
std::span<const T> Tensor::grad_data() const {
  if ((impl_->dtype == DType::f64) != std::is_same_v<T, double>) {
    throw DimensionError(std::string("grad_data<>() dtype mismatch, tensor is ") +
                         dtype_name(impl_->dtype));
  }
  if (!impl_->has_grad) return {};
  return impl_->gbuf<T>();
}

template std::span<const float> Tensor::grad_data<float>() const;
template std::span<const double> Tensor::grad_data<double>() const;

Tensor Tensor::grad() const {
  if (!has_grad()) return zeros(shape(), dtype());
  if (dtype() == DType::f64) return from_doubles(shape(), impl_->grad_f64);
  return from_floats(shape(), impl_->grad_f32);
}

std::vector<double> Tensor::grad_values() const { return grad().values(); }

void Tensor::zero_grad() { impl_->drop_grad(); }

Tensor Tensor::detach() const {
  Tensor t = clone();
  t.impl_->requires_grad = false;
  return t;
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->f32 = impl_->f32;
  impl->f64 = impl_->f64;
  return Tensor(std::move(impl));
}

Tensor Tensor::cast(DType target) const {
  Tensor t = clone();
  t.convert_(target);
  return t;
}

void Tensor::convert_(DType target) {
  impl_->drop_grad();
  if (impl_->dtype == target) return;
  if (target == DType::f64) {
    impl_->f64.assign(impl_->f32.begin(), impl_->f32.end());
    impl_->f32.clear();
    impl_->f32.shrink_to_fit();
  } else {
    impl_->f32.resize(impl_->f64.size());
    std::transform(impl_->f64.begin(), impl_->f64.end(), impl_->f32.begin(),
                   [](double v) { return static_cast<float>(v); });
    impl_->f64.clear();
    impl_->f64.shrink_to_fit();
  }
  impl_->dtype = target;
}

void Tensor::assign_(const Tensor& other) {
  if (other.shape() != shape()) {
    throw DimensionError("assign_: shape mismatch " + shape_str(shape()) + " vs " +
                         shape_str(other.shape()));
  }
  if (other.dtype() == dtype()) {
    impl_->f32 = other.impl_->f32;
    impl_->f64 = other.impl_->f64;
    return;
  }
  for (std::size_t i = 0; i < numel(); ++i) set_value(i, other.value(i));
}

// ---------------------------------------------------------------------------
// Tape

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward: loss must be a scalar tensor");
  }
  const auto it = std::find_if(entries_.begin(), entries_.end(),
                               [&](const Entry& e) { return e.output == loss.impl(); });
  if (it == entries_.end()) {
    throw std::logic_error("backward: loss was not produced on the current tape");
  }
  dispatch(loss.dtype(), [&]<typename T>() { loss.impl()->grad<T>()[0] = T(1); });
  for (auto e = entries_.rbegin(); e != entries_.rend(); ++e) {
    if (!e->output->has_grad) continue;
    if (!g_fault_op.empty() && e->op == g_fault_op) {
      dispatch(e->output->dtype, [&]<typename T>() {
        for (auto& g : e->output->gbuf<T>()) g = static_cast<T>(g * g_fault_factor);
      });
    }
    e->backward();
    e->output->drop_grad();
  }
  entries_.clear();
}

Tape& current_tape() { return t_tape; }
bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void backward(const Tensor& loss) { t_tape.backward(loss); }

void set_adjoint_fault(std::string_view op, double factor) {
  g_fault_op = std::string(op);
  g_fault_factor = factor;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  if (a.dtype() != b.dtype()) throw DimensionError("matmul: dtype mismatch");
  const auto r = static_cast<Eigen::Index>(a.size(0));
  const auto k = static_cast<Eigen::Index>(a.size(1));
  const auto c = static_cast<Eigen::Index>(b.size(1));
  Tensor out = make_result({a.size(0), b.size(1)}, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    Eigen::Map<const RowMat<T>> A(a.data<T>().data(), r, k);
    Eigen::Map<const RowMat<T>> B(b.data<T>().data(), k, c);
    Eigen::Map<RowMat<T>> O(out.mutable_data<T>().data(), r, c);
    O.noalias() = A * B;
  });
  if (should_record({&a, &b})) {
    record("matmul", out, [ai = a.impl(), bi = b.impl(), oi = out.impl(), r, k, c]() {
      dispatch(oi->dtype, [&]<typename T>() {
        Eigen::Map<const RowMat<T>> G(oi->gbuf<T>().data(), r, c);
        if (ai->requires_grad) {
          Eigen::Map<const RowMat<T>> B(bi->buf<T>().data(), k, c);
          Eigen::Map<RowMat<T>> GA(ai->grad<T>().data(), r, k);
          GA.noalias() += G * B.transpose();
        }
        if (bi->requires_grad) {
          Eigen::Map<const RowMat<T>> A(ai->buf<T>().data(), r, k);
          Eigen::Map<RowMat<T>> GB(bi->grad<T>().data(), k, c);
          GB.noalias() += A.transpose() * G;
        }
      });
    });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  check_defined(a, "bmm");
  check_defined(b, "bmm");
  if (a.dim() != 3 || b.dim() != 3 || a.size(0) != b.size(0) || a.size(2) != b.size(1)) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  if (a.dtype() != b.dtype()) throw DimensionError("bmm: dtype mismatch");
  const std::size_t batch = a.size(0);
  const auto r = static_cast<Eigen::Index>(a.size(1));
  const auto k = static_cast<Eigen::Index>(a.size(2));
  const auto c = static_cast<Eigen::Index>(b.size(2));
  Tensor out = make_result({batch, a.size(1), b.size(2)}, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    for (std::size_t i = 0; i < batch; ++i) {
      Eigen::Map<const RowMat<T>> A(a.data<T>().data() + i * r * k, r, k);
      Eigen::Map<const RowMat<T>> B(b.data<T>().data() + i * k * c, k, c);
      Eigen::Map<RowMat<T>> O(out.mutable_data<T>().data() + i * r * c, r, c);
      O.noalias() = A * B;
    }
  });
  if (should_record({&a, &b})) {
    record("bmm", out, [ai = a.impl(), bi = b.impl(), oi = out.impl(), batch, r, k, c]() {
      dispatch(oi->dtype, [&]<typename T>() {
        for (std::size_t i = 0; i < batch; ++i) {
          Eigen::Map<const RowMat<T>> G(oi->gbuf<T>().data() + i * r * c, r, c);
          if (ai->requires_grad) {
            Eigen::Map<const RowMat<T>> B(bi->buf<T>().data() + i * k * c, k, c);
            Eigen::Map<RowMat<T>> GA(ai->grad<T>().data() + i * r * k, r, k);
            GA.noalias() += G * B.transpose();
          }
          if (bi->requires_grad) {
            Eigen::Map<const RowMat<T>> A(ai->buf<T>().data() + i * r * k, r, k);
            Eigen::Map<RowMat<T>> GB(bi->grad<T>().data() + i * k * c, k, c);
            GB.noalias() += A.transpose() * G;
          }
        }
      });
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check_defined(x, "linear");
  check_defined(weight, "linear");
  if (x.dim() != 2 || weight.dim() != 2 || x.size(1) != weight.size(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != weight.size(0))) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  if (x.dtype() != weight.dtype() || (bias.defined() && bias.dtype() != x.dtype())) {
    throw DimensionError("linear: dtype mismatch");
  }
  const auto r = static_cast<Eigen::Index>(x.size(0));
  const auto in = static_cast<Eigen::Index>(x.size(1));
  const auto o = static_cast<Eigen::Index>(weight.size(0));
  Tensor out = make_result({x.size(0), weight.size(0)}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    Eigen::Map<const RowMat<T>> X(x.data<T>().data(), r, in);
    Eigen::Map<const RowMat<T>> W(weight.data<T>().data(), o, in);
    Eigen::Map<RowMat<T>> O(out.mutable_data<T>().data(), r, o);
    O.noalias() = X * W.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.data<T>().data(), o);
      O.rowwise() += bv;
    }
  });
  if (should_record({&x, &weight, &bias})) {
    ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
    record("linear", out, [xi = x.impl(), wi = weight.impl(), bi, oi = out.impl(), r, in, o]() {
      dispatch(oi->dtype, [&]<typename T>() {
        Eigen::Map<const RowMat<T>> G(oi->gbuf<T>().data(), r, o);
        if (xi->requires_grad) {
          Eigen::Map<const RowMat<T>> W(wi->buf<T>().data(), o, in);
          Eigen::Map<RowMat<T>> GX(xi->grad<T>().data(), r, in);
          GX.noalias() += G * W;
        }
        if (wi->requires_grad) {
          Eigen::Map<const RowMat<T>> X(xi->buf<T>().data(), r, in);
          Eigen::Map<RowMat<T>> GW(wi->grad<T>().data(), o, in);
          GW.noalias() += G.transpose() * X;
        }
        if (bi && bi->requires_grad) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(bi->grad<T>().data(), o);
          gb += G.colwise().sum();
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = make_result(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  });
  if (should_record({&a, &b})) {
    record("add", out, [ai = a.impl(), bi = b.impl(), oi = out.impl()]() {
      dispatch(oi->dtype, [&]<typename T>() {
        const auto& g = oi->gbuf<T>();
        for (auto* in : {ai.get(), bi.get()}) {
          if (!in->requires_grad) continue;
          auto gx = in->template grad<T>();
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
      });
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = make_result(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  });
  if (should_record({&a, &b})) {
    record("sub", out, [ai = a.impl(), bi = b.impl(), oi = out.impl()]() {
      dispatch(oi->dtype, [&]<typename T>() {
        const auto& g = oi->gbuf<T>();
        if (ai->requires_grad) {
          auto gx = ai->grad<T>();
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (bi->requires_grad) {
          auto gy = bi->grad<T>();
          for (std::size_t i = 0; i < g.size(); ++i) gy[i] -= g[i];
        }
      });
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = make_result(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  });
  if (should_record({&a, &b})) {
    record("mul", out, [ai = a.impl(), bi = b.impl(), oi = out.impl()]() {
      dispatch(oi->dtype, [&]<typename T>() {
        const auto& g = oi->gbuf<T>();
        if (ai->requires_grad) {
          const auto& y = bi->buf<T>();
          auto gx = ai->grad<T>();
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
        }
        if (bi->requires_grad) {
          const auto& x = ai->buf<T>();
          auto gy = bi->grad<T>();
          for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i] * x[i];
        }
      });
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](auto v) { return v * factor; },
      [factor](auto, auto, auto g) { return g * factor; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary(
      x, "add_scalar", [c](auto v) { return v + c; }, [](auto, auto, auto g) { return g; });
}

Tensor one_minus(const Tensor& x) {
  return unary(
      x, "one_minus", [](auto v) { return decltype(v)(1) - v; },
      [](auto, auto, auto g) { return -g; });
}

Tensor neg(const Tensor& x) {
  return unary(
      x, "neg", [](auto v) { return -v; }, [](auto, auto, auto g) { return -g; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](auto v) {
        using T = decltype(v);
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](auto, auto y, auto g) { return g * y * (decltype(y)(1) - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](auto v) { return std::tanh(v); },
      [](auto, auto y, auto g) { return g * (decltype(y)(1) - y * y); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](auto v) { return std::exp(v); }, [](auto, auto y, auto g) { return g * y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](auto v) { return std::log(v); }, [](auto v, auto, auto g) { return g / v; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor softmax(const Tensor& x, const Mask* mask) {
  check_defined(x, "softmax");
  if (mask && mask->shape != x.shape()) {
    throw DimensionError("softmax: mask " + shape_str(mask->shape) + " vs input " +
                         shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Tensor out = make_result(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto in = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * n;
      auto ok = [&](std::size_t j) { return !mask || (*mask)[base + j]; };
      T mx = -std::numeric_limits<T>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < n; ++j) {
        if (ok(j)) {
          mx = std::max(mx, in[base + j]);
          any = true;
        }
      }
      if (!any) throw InvalidMaskError("softmax: row " + std::to_string(r) + " is fully masked");
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = ok(j) ? std::exp(in[base + j] - mx) : T(0);
        o[base + j] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) o[base + j] /= total;
    }
  });
  if (should_record({&x})) {
    record("softmax", out, [xi = x.impl(), oi = out.impl(), n, rows]() {
      if (!xi->requires_grad) return;
      dispatch(oi->dtype, [&]<typename T>() {
        const auto& y = oi->buf<T>();
        const auto& g = oi->gbuf<T>();
        auto gx = xi->grad<T>();
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * n;
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += y[base + j] * g[base + j];
          for (std::size_t j = 0; j < n; ++j) gx[base + j] += y[base + j] * (g[base + j] - dot);
        }
      });
    });
  }
  return out;
}

Tensor mean_axis(const Tensor& x, std::size_t axis, const Mask* mask) {
  check_defined(x, "mean_axis");
  if (axis >= x.dim()) throw DimensionError("mean_axis: axis out of range");
  const Shape& s = x.shape();
  const std::size_t outer = prod(s, 0, axis);
  const std::size_t n = s[axis];
  const std::size_t inner = prod(s, axis + 1, s.size());
  if (mask) {
    const Shape want(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis) + 1);
    if (mask->shape != want) {
      throw DimensionError("mean_axis: mask " + shape_str(mask->shape) + " expected " +
                           shape_str(want));
    }
  }
  std::vector<std::size_t> counts(outer, n);
  if (mask) {
    for (std::size_t o = 0; o < outer; ++o) {
      counts[o] = 0;
      for (std::size_t k = 0; k < n; ++k) counts[o] += (*mask)[o * n + k] ? 1 : 0;
      if (counts[o] == 0) {
        throw InvalidMaskError("mean_axis: no valid positions in slice " + std::to_string(o));
      }
    }
  }
  auto keep = std::make_shared<std::vector<std::uint8_t>>(
      mask ? mask->valid : std::vector<std::uint8_t>(outer * n, 1));
  Tensor out = make_result(drop_axis(s, axis), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto in = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t k = 0; k < n; ++k) {
        if (!(*keep)[a * n + k]) continue;
        const T* src = in.data() + (a * n + k) * inner;
        T* dst = o.data() + a * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
      const T c = static_cast<T>(counts[a]);
      for (std::size_t i = 0; i < inner; ++i) o[a * inner + i] /= c;
    }
  });
  if (should_record({&x})) {
    record("mean_axis", out, [xi = x.impl(), oi = out.impl(), keep, counts, outer, n, inner]() {
      if (!xi->requires_grad) return;
      dispatch(oi->dtype, [&]<typename T>() {
        const auto& g = oi->gbuf<T>();
        auto gx = xi->grad<T>();
        for (std::size_t a = 0; a < outer; ++a) {
          const T c = static_cast<T>(counts[a]);
          for (std::size_t k = 0; k < n; ++k) {
            if (!(*keep)[a * n + k]) continue;
            T* dst = gx.data() + (a * n + k) * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += g[a * inner + i] / c;
          }
        }
      });
    });
  }
  return out;
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  check_defined(x, "sum_axis");
  if (axis >= x.dim()) throw DimensionError("sum_axis: axis out of range");
  const Shape& s = x.shape();
  const std::size_t outer = prod(s, 0, axis);
  const std::size_t n = s[axis];
  const std::size_t inner = prod(s, axis + 1, s.size());
  Tensor out = make_result(drop_axis(s, axis), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto in = x.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t k = 0; k < n; ++k) {
        const T* src = in.data() + (a * n + k) * inner;
        T* dst = o.data() + a * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  });
  if (should_record({&x})) {
    record("sum_axis", out, [xi = x.impl(), oi = out.impl(), outer, n, inner]() {
      if (!xi->requires_grad) return;
      dispatch(oi->dtype, [&]<typename T>() {
        const auto& g = oi->gbuf<T>();
        auto gx = xi->grad<T>();
        for (std::size_t a = 0; a < outer; ++a) {
          for (std::size_t k = 0; k < n; ++k) {
            T* dst = gx.data() + (a * n + k) * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += g[a * inner + i];
          }
        }
      });
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  check_defined(x, "sum");
  return sum_axis(reshape(x, {x.numel()}), 0);
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& x, const Shape& shape) {
  check_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->dtype = x.dtype();
  impl->f32 = x.impl()->f32;
  impl->f64 = x.impl()->f64;
  Tensor out(std::move(impl));
  if (should_record({&x})) {
    record("reshape", out, [xi = x.impl(), oi = out.impl()]() {
      if (!xi->requires_grad) return;
      dispatch(oi->dtype, [&]<typename T>() {
        const auto& g = oi->gbuf<T>();
        auto gx = xi->grad<T>();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
    });
  }
  return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  check_defined(x, "permute");
  const Shape& s = x.shape();
  if (order.size() != s.size()) throw DimensionError("permute: order rank mismatch");
  std::vector<bool> seen(s.size(), false);
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= s.size() || seen[order[i]]) throw DimensionError("permute: invalid order");
    seen[order[i]] = true;
    out_shape[i] = s[order[i]];
  }
  const auto in_strides = strides_of(s);
  std::vector<std::size_t> index(x.numel());
  std::vector<std::size_t> counter(s.size(), 0);
  for (std::size_t flat = 0; flat < index.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < counter.size(); ++d) src += counter[d] * in_strides[order[d]];
    index[flat] = src;
    for (std::size_t d = counter.size(); d-- > 0;) {
      if (++counter[d] < out_shape[d]) break;
      counter[d] = 0;
    }
  }
  return gather(x, out_shape, std::move(index), "permute");
}

Tensor transpose(const Tensor& x) {
  check_defined(x, "transpose");
  if (x.dim() != 2) throw DimensionError("transpose: expects rank 2, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  check_defined(x, "broadcast_to");
  const Shape& s = x.shape();
  if (s.size() > shape.size()) {
    throw DimensionError("broadcast_to: cannot lower rank " + shape_str(s) + " -> " +
                         shape_str(shape));
  }
  Shape padded(shape.size() - s.size(), 1);
  padded.insert(padded.end(), s.begin(), s.end());
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (padded[d] != shape[d] && padded[d] != 1) {
      throw DimensionError("broadcast_to: incompatible " + shape_str(s) + " -> " +
                           shape_str(shape));
    }
  }
  const auto in_strides = strides_of(padded);
  std::vector<std::size_t> index(shape_numel(shape));
  std::vector<std::size_t> counter(shape.size(), 0);
  for (std::size_t flat = 0; flat < index.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < counter.size(); ++d) {
      if (padded[d] != 1) src += counter[d] * in_strides[d];
    }
    index[flat] = src;
    for (std::size_t d = counter.size(); d-- > 0;) {
      if (++counter[d] < shape[d]) break;
      counter[d] = 0;
    }
  }
  return gather(x, shape, std::move(index), "broadcast_to");
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts.front().shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<Block> blocks;
  for (const auto& p : parts) {
    check_defined(p, "concat");
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size() && p.dtype() == parts.front().dtype();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) throw DimensionError("concat: incompatible " + shape_str(s) + " vs " + shape_str(s0));
    out_shape[axis] += s[axis];
    blocks.push_back({prod(s, 0, axis), s[axis], prod(s, axis + 1, s.size())});
  }
  return join(parts, blocks, out_shape, "concat");
}

Tensor stack(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("stack: no inputs");
  const Shape& s0 = parts.front().shape();
  if (axis > s0.size()) throw DimensionError("stack: axis out of range");
  for (const auto& p : parts) {
    check_defined(p, "stack");
    if (p.shape() != s0 || p.dtype() != parts.front().dtype()) {
      throw DimensionError("stack: incompatible " + shape_str(p.shape()) + " vs " +
                           shape_str(s0));
    }
  }
  Shape out_shape = s0;
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), parts.size());
  const Block b{prod(s0, 0, axis), 1, prod(s0, axis, s0.size())};
  return join(parts, std::vector<Block>(parts.size(), b), out_shape, "stack");
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  check_defined(x, "slice");
  const Shape& s = x.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis]) {
    throw DimensionError("slice: [" + std::to_string(start) + ", +" + std::to_string(length) +
                         ") out of range for " + shape_str(s));
  }
  const std::size_t outer = prod(s, 0, axis);
  const std::size_t inner = prod(s, axis + 1, s.size());
  Shape out_shape = s;
  out_shape[axis] = length;
  std::vector<std::size_t> index;
  index.reserve(outer * length * inner);
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t k = start; k < start + length; ++k) {
      for (std::size_t i = 0; i < inner; ++i) index.push_back((a * s[axis] + k) * inner + i);
    }
  }
  return gather(x, out_shape, std::move(index), "slice");
}

Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
  check_defined(x, "select");
  if (axis >= x.dim() || index >= x.size(axis)) {
    throw DimensionError("select: index " + std::to_string(index) + " out of range for " +
                         shape_str(x.shape()));
  }
  const Shape& s = x.shape();
  const std::size_t outer = prod(s, 0, axis);
  const std::size_t inner = prod(s, axis + 1, s.size());
  std::vector<std::size_t> idx;
  idx.reserve(outer * inner);
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t i = 0; i < inner; ++i) idx.push_back((a * s[axis] + index) * inner + i);
  }
  return gather(x, drop_axis(s, axis), std::move(idx), "select");
}

Tensor masked_update(const Tensor& fresh, const Tensor& kept,
                     std::span<const std::uint8_t> take) {
  check_same_shape(fresh, kept, "masked_update");
  const std::size_t rows = fresh.size(0);
  if (take.size() != rows) throw DimensionError("masked_update: row mask length mismatch");
  const std::size_t width = fresh.numel() / rows;
  auto sel = std::make_shared<std::vector<std::uint8_t>>(take.begin(), take.end());
  Tensor out = make_result(fresh.shape(), fresh.dtype());
  dispatch(fresh.dtype(), [&]<typename T>() {
    auto a = fresh.data<T>();
    auto b = kept.data<T>();
    auto o = out.mutable_data<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      const auto& src = (*sel)[r] ? a : b;
      std::copy_n(src.begin() + r * width, width, o.begin() + r * width);
    }
  });
  if (should_record({&fresh, &kept})) {
    record("masked_update", out, [fi = fresh.impl(), ki = kept.impl(), oi = out.impl(), sel,
                                  rows, width]() {
      dispatch(oi->dtype, [&]<typename T>() {
        const auto& g = oi->gbuf<T>();
        for (std::size_t r = 0; r < rows; ++r) {
          TensorImpl* dst = (*sel)[r] ? fi.get() : ki.get();
          if (!dst->requires_grad) continue;
          auto gd = dst->grad<T>();
          for (std::size_t i = 0; i < width; ++i) gd[r * width + i] += g[r * width + i];
        }
      });
    });
  }
  return out;
}

Tensor gru_scan(const Tensor& xz, const Tensor& xr, const Tensor& xh, const Tensor& u_z,
                const Tensor& u_r, const Tensor& u_h, std::span<const std::uint8_t> valid,
                bool reverse) {
  check_same_shape(xz, xr, "gru_scan");
  check_same_shape(xz, xh, "gru_scan");
  check_same_shape(u_z, u_r, "gru_scan");
  check_same_shape(u_z, u_h, "gru_scan");
  if (xz.dim() != 3 || u_z.dim() != 2 || u_z.size(0) != xz.size(2) || u_z.size(1) != xz.size(2)) {
    throw DimensionError("gru_scan: inputs " + shape_str(xz.shape()) + ", recurrent weights " +
                         shape_str(u_z.shape()));
  }
  if (xz.dtype() != u_z.dtype()) throw DimensionError("gru_scan: dtype mismatch");
  const std::size_t batch = xz.size(0), steps = xz.size(1), hid = xz.size(2);
  if (valid.size() != batch * steps) throw DimensionError("gru_scan: mask size mismatch");

  struct Saved {
    std::vector<std::uint8_t> valid;
    std::vector<double> z, r, c, h_prev;  // per step, [B x H]; doubles keep one code path
  };
  auto saved = std::make_shared<Saved>();
  saved->valid.assign(valid.begin(), valid.end());
  const bool recording = should_record({&xz, &xr, &xh, &u_z, &u_r, &u_h});
  const std::size_t block = batch * hid;
  if (recording) {
    saved->z.resize(steps * block);
    saved->r.resize(steps * block);
    saved->c.resize(steps * block);
    saved->h_prev.resize(steps * block);
  }

  Tensor out = make_result(xz.shape(), xz.dtype());
  dispatch(xz.dtype(), [&]<typename T>() {
    using Mat = RowMat<T>;
    const auto B = static_cast<Eigen::Index>(batch), H = static_cast<Eigen::Index>(hid);
    Eigen::Map<const Mat> Uz(u_z.data<T>().data(), H, H);
    Eigen::Map<const Mat> Ur(u_r.data<T>().data(), H, H);
    Eigen::Map<const Mat> Uh(u_h.data<T>().data(), H, H);
    const T* pz = xz.data<T>().data();
    const T* pr = xr.data<T>().data();
    const T* ph = xh.data<T>().data();
    T* po = out.mutable_data<T>().data();
    Mat h = Mat::Zero(B, H), z(B, H), r(B, H), c(B, H);
    for (std::size_t k = 0; k < steps; ++k) {
      const std::size_t t = reverse ? steps - 1 - k : k;
      z.noalias() = h * Uz.transpose();
      r.noalias() = h * Ur.transpose();
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = (b * steps + t) * hid;
        for (std::size_t i = 0; i < hid; ++i) {
          z(b, i) = T(1) / (T(1) + std::exp(-(z(b, i) + pz[off + i])));
          r(b, i) = T(1) / (T(1) + std::exp(-(r(b, i) + pr[off + i])));
        }
      }
      c.noalias() = r.cwiseProduct(h) * Uh.transpose();
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = (b * steps + t) * hid;
        for (std::size_t i = 0; i < hid; ++i) c(b, i) = std::tanh(c(b, i) + ph[off + i]);
      }
      if (recording) {
        const std::size_t base = t * block;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t i = 0; i < hid; ++i) {
            const std::size_t j = base + b * hid + i;
            saved->z[j] = z(b, i);
            saved->r[j] = r(b, i);
            saved->c[j] = c(b, i);
            saved->h_prev[j] = h(b, i);
          }
        }
      }
      for (std::size_t b = 0; b < batch; ++b) {
        if (valid[b * steps + t]) {
          for (std::size_t i = 0; i < hid; ++i) {
            h(b, i) = (T(1) - z(b, i)) * h(b, i) + z(b, i) * c(b, i);
          }
        }
        std::copy_n(&h(b, 0), hid, po + (b * steps + t) * hid);
      }
    }
  });

  if (recording) {
    record("gru_scan", out, [xzi = xz.impl(), xri = xr.impl(), xhi = xh.impl(), uzi = u_z.impl(),
                             uri = u_r.impl(), uhi = u_h.impl(), oi = out.impl(), saved, batch,
                             steps, hid, reverse]() {
      dispatch(oi->dtype, [&]<typename T>() {
        using Mat = RowMat<T>;
        const auto B = static_cast<Eigen::Index>(batch), H = static_cast<Eigen::Index>(hid);
        Eigen::Map<const Mat> Uz(uzi->buf<T>().data(), H, H);
        Eigen::Map<const Mat> Ur(uri->buf<T>().data(), H, H);
        Eigen::Map<const Mat> Uh(uhi->buf<T>().data(), H, H);
        const T* g_out = oi->gbuf<T>().data();
        const bool need_u = uzi->requires_grad || uri->requires_grad || uhi->requires_grad;
        Mat gUz = Mat::Zero(H, H), gUr = Mat::Zero(H, H), gUh = Mat::Zero(H, H);
        Mat dh = Mat::Zero(B, H), da_z(B, H), da_r(B, H), da_c(B, H), hp(B, H), rh(B, H),
            r(B, H), drh(B, H), dprev(B, H);
        T* gxz = xzi->requires_grad ? xzi->grad<T>().data() : nullptr;
        T* gxr = xri->requires_grad ? xri->grad<T>().data() : nullptr;
        T* gxh = xhi->requires_grad ? xhi->grad<T>().data() : nullptr;
        for (std::size_t k = steps; k-- > 0;) {
          const std::size_t t = reverse ? steps - 1 - k : k;
          const std::size_t base = t * saved->z.size() / steps;
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < hid; ++i) dh(b, i) += g_out[(b * steps + t) * hid + i];
          }
          for (std::size_t b = 0; b < batch; ++b) {
            const bool on = saved->valid[b * steps + t] != 0;
            for (std::size_t i = 0; i < hid; ++i) {
              const std::size_t j = base + b * hid + i;
              const T z = static_cast<T>(saved->z[j]), c = static_cast<T>(saved->c[j]);
              const T h0 = static_cast<T>(saved->h_prev[j]);
              r(b, i) = static_cast<T>(saved->r[j]);
              hp(b, i) = h0;
              rh(b, i) = r(b, i) * h0;
              const T g = on ? dh(b, i) : T(0);
              da_z(b, i) = g * (c - h0) * z * (T(1) - z);
              da_c(b, i) = g * z * (T(1) - c * c);
              dprev(b, i) = on ? g * (T(1) - z) : dh(b, i);
            }
          }
          drh.noalias() = da_c * Uh;
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < hid; ++i) {
              const T rr = r(b, i);
              da_r(b, i) = drh(b, i) * hp(b, i) * rr * (T(1) - rr);
              dprev(b, i) += drh(b, i) * rr;
            }
          }
          dprev.noalias() += da_z * Uz;
          dprev.noalias() += da_r * Ur;
          if (need_u) {
            gUz.noalias() += da_z.transpose() * hp;
            gUr.noalias() += da_r.transpose() * hp;
            gUh.noalias() += da_c.transpose() * rh;
          }
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t off = (b * steps + t) * hid;
            for (std::size_t i = 0; i < hid; ++i) {
              if (gxz) gxz[off + i] += da_z(b, i);
              if (gxr) gxr[off + i] += da_r(b, i);
              if (gxh) gxh[off + i] += da_c(b, i);
            }
          }
          dh.swap(dprev);
        }
        auto accumulate = [&](const ImplPtr& u, const Mat& g) {
          if (!u->requires_grad) return;
          Eigen::Map<Mat> gu(u->grad<T>().data(), H, H);
          gu += g;
        };
        accumulate(uzi, gUz);
        accumulate(uri, gUr);
        accumulate(uhi, gUh);
      });
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const double inv = 1.0 / (1.0 - p);
  std::vector<double> m(x.numel());
  for (auto& v : m) v = keep(rng) ? inv : 0.0;
  return mul(x, Tensor::from_values(x.shape(), m, x.dtype()));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_defined(logits, "cross_entropy");
  if (logits.dim() != 2 || logits.size(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = logits.size(0);
  const std::size_t n = logits.size(1);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " out of range");
    }
  }
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  auto probs = std::make_shared<std::vector<double>>(rows * n);
  Tensor out = make_result({1}, logits.dtype());
  dispatch(logits.dtype(), [&]<typename T>() {
    auto in = logits.data<T>();
    T total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* z = in.data() + r * n;
      const T mx = *std::max_element(z, z + n);
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) s += std::exp(z[j] - mx);
      const T lse = mx + std::log(s);
      for (std::size_t j = 0; j < n; ++j) (*probs)[r * n + j] = std::exp(z[j] - lse);
      total += lse - z[(*lab)[r]];
    }
    out.mutable_data<T>()[0] = total / static_cast<T>(rows);
  });
  if (should_record({&logits})) {
    record("cross_entropy", out, [li = logits.impl(), oi = out.impl(), lab, probs, rows, n]() {
      if (!li->requires_grad) return;
      dispatch(oi->dtype, [&]<typename T>() {
        const T g = oi->gbuf<T>()[0] / static_cast<T>(rows);
        auto gx = li->grad<T>();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) {
            const T onehot = static_cast<int>(j) == (*lab)[r] ? T(1) : T(0);
            gx[r * n + j] += g * (static_cast<T>((*probs)[r * n + j]) - onehot);
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking

FiniteDiffReport finite_diff_report(const std::function<Tensor()>& loss_fn,
                                    const std::vector<Tensor>& params, double eps) {
  for (auto p : params) p.zero_grad();
  current_tape().clear();
  Tensor loss = loss_fn();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.push_back(p.grad_values());

  FiniteDiffReport report;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double orig = p.value(i);
      p.set_value(i, orig + eps);
      const double up = loss_fn().item();
      p.set_value(i, orig - eps);
      const double down = loss_fn().item();
      p.set_value(i, orig);
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (report.checked == 1 || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = pi;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

double finite_diff_check(const std::function<Tensor()>& loss_fn,
                         const std::vector<Tensor>& params, double eps) {
  return finite_diff_report(loss_fn, params, eps).max_rel_error;
}

}  // namespace ctarnn
