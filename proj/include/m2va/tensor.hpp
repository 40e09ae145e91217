#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace m2va {

using idx = std::int64_t;
using Shape = std::vector<idx>;

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& s);
idx numel_of(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    bool needs_grad = false;  // true when on a differentiable path

    void ensure_grad();
};

// Value-semantics handle over shared storage. All compute is f64, row-major.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor zeros(const Shape& s) { return Tensor(s, 0.0); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    idx numel() const { return static_cast<idx>(impl_->data.size()); }
    idx ndim() const { return static_cast<idx>(impl_->shape.size()); }
    idx dim(idx i) const { return impl_->shape[static_cast<size_t>(i)]; }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    std::vector<double>& grad() { return impl_->grad; }
    const std::vector<double>& grad() const { return impl_->grad; }

    double item() const;
    double at(std::initializer_list<idx> index) const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v);
    bool needs_grad() const { return impl_ && impl_->needs_grad; }

    void zero_grad();
    bool all_finite() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Records executed primitives so gradients can be replayed in reverse.
// Exactly one tape may be active at a time; ops executed while a tape is
// active and touching a needs_grad input append a backward closure.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();
    void record(std::function<void()> backward_fn);
    size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse order.
    // loss must be scalar.
    void backward(const Tensor& loss);

private:
    std::vector<std::function<void()>> nodes_;
    Tape* prev_ = nullptr;
};

// Deterministic random source. All initialization draws are rounded through
// f32 so freshly built models survive an f32 checkpoint round trip exactly.
class RandomSource {
public:
    explicit RandomSource(std::uint64_t seed) : engine_(seed) {}
    double normal(double stddev);
    double uniform();  // [0, 1)
    std::uint64_t next_u64() { return engine_(); }
    Tensor randn(const Shape& s, double stddev, bool requires_grad = false);

private:
    std::mt19937_64 engine_;
};

// ---- elementwise / broadcasting ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor gelu(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor sqrt_t(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);
// Copy of `a` severed from the differentiation graph (stop-gradient).
Tensor detach(const Tensor& a);

// ---- linear algebra ----
// a: [..., m, k] x b: [k, n] or [..., k, n] with identical batch dims.
Tensor matmul(const Tensor& a, const Tensor& b);
// a: [..., m, k] x b: [..., n, k] -> [..., m, n] (b transposed on the fly).
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// ---- shape manipulation ----
Tensor reshape(const Tensor& a, Shape s);
Tensor permute(const Tensor& a, const std::vector<idx>& axes);
Tensor slice(const Tensor& a, idx axis, idx start, idx len);
Tensor concat(idx axis, const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& a, const std::vector<idx>& rows);
Tensor take(const Tensor& a, const std::vector<idx>& flat_indices);

// ---- reductions / normalization ----
Tensor sum_all(const Tensor& a);       // -> [1]
Tensor mean_axis0(const Tensor& a);    // [n, ...] -> [...]
Tensor row_sums(const Tensor& a);      // [n, d] -> [n, 1]
Tensor softmax_lastdim(const Tensor& a);
Tensor log_softmax_lastdim(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// ---- convolutions (unit stride, zero padding, odd kernels) ----
// x: [T, L, c], kernel: [k, c_in, c_out], bias: [c_out]; conv along T.
Tensor conv1d_temporal(const Tensor& x, const Tensor& kernel, const Tensor& bias);
// x: [T, h, w, c], kernel: [k, k, c_in, c_out], bias: [c_out]; per frame.
Tensor conv2d_spatial(const Tensor& x, const Tensor& kernel, const Tensor& bias);

// ---- attention ----
struct AttentionWeights {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // each projection d x d (+ bias d)
};

// q_in: [..., Lq, d], kv_in: [..., Lk, d] with identical leading dims.
// mask, when given, is [Lq, Lk] and added to the attention scores.
Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in,
                            const AttentionWeights& w, idx heads,
                            const Tensor* mask = nullptr);

Tensor cosine_similarity(const Tensor& u, const Tensor& v, double eps = 1e-8);
// Rows scaled to unit L2 norm, zero-norm guarded by eps.
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-8);

}  // namespace m2va
