#include "m2va/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace m2va {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

idx numel_of(const Shape& s) {
    idx n = 1;
    for (idx d : s) n *= d;
    return n;
}

void TensorImpl::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel_of(shape) != static_cast<idx>(data.size()))
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
    impl_->needs_grad = requires_grad;
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
    impl_ = std::make_shared<TensorImpl>();
    impl_->data.assign(static_cast<size_t>(numel_of(shape)), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
    impl_->needs_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
}

double Tensor::item() const {
    if (numel() != 1)
        throw ContractError("item() called on non-scalar tensor of shape " +
                            shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<idx> index) const {
    const Shape& s = impl_->shape;
    if (index.size() != s.size())
        throw ShapeError("index rank mismatch for shape " + shape_str(s));
    idx flat = 0;
    size_t i = 0;
    for (idx v : index) {
        flat = flat * s[i] + v;
        ++i;
    }
    return impl_->data[static_cast<size_t>(flat)];
}

void Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    impl_->needs_grad = v;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tensor::all_finite() const {
    for (double v : impl_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---------------- tape ----------------

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape::Tape() {
    prev_ = g_current_tape;
    g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward requires a scalar loss, got shape " +
                            shape_str(loss.shape()));
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

double RandomSource::normal(double stddev) {
    std::normal_distribution<double> d(0.0, stddev);
    // round through f32 so checkpointed initializations are exact
    return static_cast<double>(static_cast<float>(d(engine_)));
}

double RandomSource::uniform() {
    return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
}

Tensor RandomSource::randn(const Shape& s, double stddev, bool requires_grad) {
    std::vector<double> v(static_cast<size_t>(numel_of(s)));
    for (double& x : v) x = normal(stddev);
    return Tensor(s, std::move(v), requires_grad);
}

// ---------------- helpers ----------------

namespace {

using Impl = std::shared_ptr<TensorImpl>;

bool tape_wants(const Tensor& a) { return Tape::current() && a.needs_grad(); }

// Outputs get their grad buffer up front: a recorded node may never receive
// upstream gradient (e.g. behind a detach), and its closure must still be
// safe to replay.
void mark_output(Tensor& out) {
    out.impl()->needs_grad = true;
    out.impl()->ensure_grad();
}

// Broadcast descriptor: per output dim, the stride into each input
// (0 where that input is broadcast).
struct Bcast {
    Shape out;
    std::vector<idx> sa, sb;
    bool same_shape;
};

Bcast broadcast_shapes(const Shape& a, const Shape& b, const char* opname) {
    Bcast r;
    r.same_shape = (a == b);
    size_t nd = std::max(a.size(), b.size());
    r.out.resize(nd);
    r.sa.assign(nd, 0);
    r.sb.assign(nd, 0);
    // compute row-major strides of a and b padded on the left
    std::vector<idx> da(nd, 1), db(nd, 1);
    for (size_t i = 0; i < nd; ++i) {
        da[i] = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        db[i] = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
            throw ShapeError(std::string(opname) + ": shapes " + shape_str(a) +
                             " and " + shape_str(b) + " are not broadcastable");
        r.out[i] = std::max(da[i], db[i]);
    }
    idx stra = 1, strb = 1;
    for (size_t i = nd; i-- > 0;) {
        r.sa[i] = (da[i] == 1 && r.out[i] != 1) ? 0 : stra;
        r.sb[i] = (db[i] == 1 && r.out[i] != 1) ? 0 : strb;
        stra *= da[i];
        strb *= db[i];
    }
    return r;
}

template <class F>
void bcast_apply(const Bcast& bc, F&& f) {
    size_t nd = bc.out.size();
    std::vector<idx> ix(nd, 0);
    idx n = numel_of(bc.out);
    idx ia = 0, ib = 0;
    for (idx lin = 0; lin < n; ++lin) {
        f(lin, ia, ib);
        for (size_t d = nd; d-- > 0;) {
            ix[d]++;
            ia += bc.sa[d];
            ib += bc.sb[d];
            if (ix[d] < bc.out[d]) break;
            ia -= bc.sa[d] * bc.out[d];
            ib -= bc.sb[d] * bc.out[d];
            ix[d] = 0;
        }
    }
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
    Bcast bc = broadcast_shapes(a.shape(), b.shape(), name);
    Tensor out(bc.out);
    auto* pa = a.data().data();
    auto* pb = b.data().data();
    auto* po = out.data().data();
    idx n = out.numel();
    auto apply = [op](double x, double y) {
        switch (op) {
            case BinOp::Add: return x + y;
            case BinOp::Sub: return x - y;
            case BinOp::Mul: return x * y;
            default: return x / y;
        }
    };
    if (bc.same_shape) {
        for (idx i = 0; i < n; ++i) po[i] = apply(pa[i], pb[i]);
    } else {
        bcast_apply(bc, [&](idx lin, idx ia, idx ib) { po[lin] = apply(pa[ia], pb[ib]); });
    }
    if (tape_wants(a) || tape_wants(b)) {
        mark_output(out);
        Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::current()->record([ai, bi, oi, bc, op]() {
            const auto& g = oi->grad;
            bool wa = ai->needs_grad, wb = bi->needs_grad;
            if (wa) ai->ensure_grad();
            if (wb) bi->ensure_grad();
            auto acc = [&](idx lin, idx ia, idx ib) {
                double go = g[static_cast<size_t>(lin)];
                switch (op) {
                    case BinOp::Add:
                        if (wa) ai->grad[static_cast<size_t>(ia)] += go;
                        if (wb) bi->grad[static_cast<size_t>(ib)] += go;
                        break;
                    case BinOp::Sub:
                        if (wa) ai->grad[static_cast<size_t>(ia)] += go;
                        if (wb) bi->grad[static_cast<size_t>(ib)] -= go;
                        break;
                    case BinOp::Mul:
                        if (wa) ai->grad[static_cast<size_t>(ia)] += go * bi->data[static_cast<size_t>(ib)];
                        if (wb) bi->grad[static_cast<size_t>(ib)] += go * ai->data[static_cast<size_t>(ia)];
                        break;
                    case BinOp::Div: {
                        double bv = bi->data[static_cast<size_t>(ib)];
                        if (wa) ai->grad[static_cast<size_t>(ia)] += go / bv;
                        if (wb)
                            bi->grad[static_cast<size_t>(ib)] -=
                                go * ai->data[static_cast<size_t>(ia)] / (bv * bv);
                        break;
                    }
                }
            };
            if (bc.same_shape) {
                idx n = static_cast<idx>(g.size());
                for (idx i = 0; i < n; ++i) acc(i, i, i);
            } else {
                bcast_apply(bc, acc);
            }
        });
    }
    return out;
}

template <class Fwd, class Bwd>
Tensor unary(const Tensor& a, Fwd fwd, Bwd dfdx) {
    Tensor out(a.shape());
    idx n = a.numel();
    for (idx i = 0; i < n; ++i) out.data()[static_cast<size_t>(i)] = fwd(a.data()[static_cast<size_t>(i)]);
    if (tape_wants(a)) {
        mark_output(out);
        Impl ai = a.impl(), oi = out.impl();
        Tape::current()->record([ai, oi, dfdx]() {
            ai->ensure_grad();
            size_t n = ai->data.size();
            for (size_t i = 0; i < n; ++i)
                ai->grad[i] += oi->grad[i] * dfdx(ai->data[i], oi->data[i]);
        });
    }
    return out;
}

}  // namespace

// ---------------- elementwise ----------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Div, "div"); }

Tensor scale(const Tensor& a, double c) {
    return unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor gelu(const Tensor& a) {
    const double inv_sqrt2 = 0.7071067811865475244;
    const double inv_sqrt2pi = 0.3989422804014326779;
    return unary(
        a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [=](double x, double) {
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            return cdf + x * pdf;
        });
}

Tensor exp_t(const Tensor& a) {
    return unary(a, [](double x) { return std::exp(x); },
                 [](double, double y) { return y; });
}

Tensor sqrt_t(const Tensor& a) {
    return unary(a, [](double x) { return std::sqrt(x); },
                 [](double, double y) { return 0.5 / y; });
}

Tensor clamp_min(const Tensor& a, double lo) {
    return unary(a, [lo](double x) { return x < lo ? lo : x; },
                 [lo](double x, double) { return x < lo ? 0.0 : 1.0; });
}

Tensor detach(const Tensor& a) {
    return Tensor(a.shape(), std::vector<double>(a.data()));
}

// ---------------- matmul ----------------

namespace {

// C[m,n] (+)= A[m,k] * B[k,n]; row-major, ikj order.
void gemm_nn(idx m, idx n, idx k, const double* A, const double* B, double* C) {
    for (idx i = 0; i < m; ++i) {
        double* c = C + i * n;
        const double* a = A + i * k;
        for (idx p = 0; p < k; ++p) {
            double av = a[p];
            if (av == 0.0) continue;
            const double* b = B + p * n;
            for (idx j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
void gemm_nt(idx m, idx n, idx k, const double* A, const double* B, double* C) {
    for (idx i = 0; i < m; ++i) {
        const double* a = A + i * k;
        double* c = C + i * n;
        for (idx j = 0; j < n; ++j) {
            const double* b = B + j * k;
            double s = 0.0;
            for (idx p = 0; p < k; ++p) s += a[p] * b[p];
            c[j] += s;
        }
    }
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
void gemm_tn(idx m, idx n, idx k, const double* A, const double* B, double* C) {
    for (idx i = 0; i < m; ++i) {
        const double* a = A + i * k;
        const double* b = B + i * n;
        for (idx p = 0; p < k; ++p) {
            double av = a[p];
            if (av == 0.0) continue;
            double* c = C + p * n;
            for (idx j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

struct MatmulDims {
    idx batch;   // product of leading dims
    idx m, k, n;
    bool b_batched;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, bool b_transposed,
                       const char* name) {
    if (a.ndim() < 2 || b.ndim() < 2)
        throw ShapeError(std::string(name) + ": operands must have rank >= 2, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
    MatmulDims d;
    d.m = a.dim(a.ndim() - 2);
    d.k = a.dim(a.ndim() - 1);
    idx bk = b_transposed ? b.dim(b.ndim() - 1) : b.dim(b.ndim() - 2);
    d.n = b_transposed ? b.dim(b.ndim() - 2) : b.dim(b.ndim() - 1);
    if (bk != d.k)
        throw ShapeError(std::string(name) + ": inner dimensions disagree for shapes " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
    d.batch = 1;
    for (idx i = 0; i < a.ndim() - 2; ++i) d.batch *= a.dim(i);
    d.b_batched = b.ndim() > 2;
    if (d.b_batched) {
        if (b.ndim() != a.ndim())
            throw ShapeError(std::string(name) + ": batch ranks disagree for shapes " +
                             shape_str(a.shape()) + " and " + shape_str(b.shape()));
        for (idx i = 0; i < a.ndim() - 2; ++i)
            if (a.dim(i) != b.dim(i))
                throw ShapeError(std::string(name) + ": batch dims disagree for shapes " +
                                 shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    return d;
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, bool b_transposed) {
    const char* name = b_transposed ? "matmul_nt" : "matmul";
    MatmulDims d = matmul_dims(a, b, b_transposed, name);
    Shape os(a.shape().begin(), a.shape().end() - 2);
    os.push_back(d.m);
    os.push_back(d.n);
    Tensor out(os);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    idx as = d.m * d.k, bs = d.b_batched ? d.k * d.n : 0, osz = d.m * d.n;
    for (idx t = 0; t < d.batch; ++t) {
        if (b_transposed)
            gemm_nt(d.m, d.n, d.k, pa + t * as, pb + t * bs, po + t * osz);
        else
            gemm_nn(d.m, d.n, d.k, pa + t * as, pb + t * bs, po + t * osz);
    }
    if (tape_wants(a) || tape_wants(b)) {
        mark_output(out);
        Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::current()->record([ai, bi, oi, d, b_transposed]() {
            bool wa = ai->needs_grad, wb = bi->needs_grad;
            if (wa) ai->ensure_grad();
            if (wb) bi->ensure_grad();
            const double* pa = ai->data.data();
            const double* pb = bi->data.data();
            const double* pg = oi->grad.data();
            idx as = d.m * d.k, bs = d.b_batched ? d.k * d.n : 0, osz = d.m * d.n;
            for (idx t = 0; t < d.batch; ++t) {
                const double* A = pa + t * as;
                const double* B = pb + t * bs;
                const double* G = pg + t * osz;
                if (!b_transposed) {
                    // dA += G * B^T ; dB += A^T * G
                    if (wa) gemm_nt(d.m, d.k, d.n, G, B, ai->grad.data() + t * as);
                    if (wb) gemm_tn(d.m, d.n, d.k, A, G, bi->grad.data() + t * bs);
                } else {
                    // out = A * B^T with B stored [n, k]
                    // dA += G * B ; dB += G^T * A
                    if (wa) gemm_nn(d.m, d.k, d.n, G, B, ai->grad.data() + t * as);
                    if (wb) gemm_tn(d.m, d.k, d.n, G, A, bi->grad.data() + t * bs);
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, true); }

// ---------------- shape ops ----------------

Tensor reshape(const Tensor& a, Shape s) {
    if (numel_of(s) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(s));
    Tensor out(std::move(s), std::vector<double>(a.data()));
    if (tape_wants(a)) {
        mark_output(out);
        Impl ai = a.impl(), oi = out.impl();
        Tape::current()->record([ai, oi]() {
            ai->ensure_grad();
            for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i];
        });
    }
    return out;
}

namespace {
std::vector<idx> strides_of(const Shape& s) {
    std::vector<idx> st(s.size(), 1);
    for (size_t i = s.size() - 1; i-- > 0;) st[i] = st[i + 1] * s[i + 1];
    return st;
}

// out linear index -> input linear index mapping for a permutation
std::vector<idx> permute_map(const Shape& in_shape, const std::vector<idx>& axes) {
    size_t nd = in_shape.size();
    Shape os(nd);
    for (size_t i = 0; i < nd; ++i) os[i] = in_shape[static_cast<size_t>(axes[i])];
    auto ist = strides_of(in_shape);
    std::vector<idx> map(static_cast<size_t>(numel_of(os)));
    std::vector<idx> ix(nd, 0);
    for (size_t lin = 0; lin < map.size(); ++lin) {
        idx src = 0;
        for (size_t d = 0; d < nd; ++d) src += ix[d] * ist[static_cast<size_t>(axes[d])];
        map[lin] = src;
        for (size_t d = nd; d-- > 0;) {
            if (++ix[d] < os[d]) break;
            ix[d] = 0;
        }
    }
    return map;
}
}  // namespace

Tensor permute(const Tensor& a, const std::vector<idx>& axes) {
    if (static_cast<idx>(axes.size()) != a.ndim())
        throw ShapeError("permute: axes rank mismatch for shape " + shape_str(a.shape()));
    Shape os(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) os[i] = a.dim(axes[i]);
    auto map = permute_map(a.shape(), axes);
    Tensor out(os);
    for (size_t i = 0; i < map.size(); ++i)
        out.data()[i] = a.data()[static_cast<size_t>(map[i])];
    if (tape_wants(a)) {
        mark_output(out);
        Impl ai = a.impl(), oi = out.impl();
        auto m = std::make_shared<std::vector<idx>>(std::move(map));
        Tape::current()->record([ai, oi, m]() {
            ai->ensure_grad();
            for (size_t i = 0; i < m->size(); ++i)
                ai->grad[static_cast<size_t>((*m)[i])] += oi->grad[i];
        });
    }
    return out;
}

namespace {
// slice along `axis`: views the tensor as [outer, dim, inner]
struct SliceDims {
    idx outer, dim, inner;
};
SliceDims slice_dims(const Shape& s, idx axis) {
    SliceDims d{1, s[static_cast<size_t>(axis)], 1};
    for (idx i = 0; i < axis; ++i) d.outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) d.inner *= s[i];
    return d;
}
}  // namespace

Tensor slice(const Tensor& a, idx axis, idx start, idx len) {
    if (axis < 0 || axis >= a.ndim() || start < 0 || len < 0 ||
        start + len > a.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") invalid on axis " +
                         std::to_string(axis) + " of shape " + shape_str(a.shape()));
    SliceDims d = slice_dims(a.shape(), axis);
    Shape os = a.shape();
    os[static_cast<size_t>(axis)] = len;
    Tensor out(os);
    for (idx o = 0; o < d.outer; ++o)
        std::memcpy(out.data().data() + o * len * d.inner,
                    a.data().data() + (o * d.dim + start) * d.inner,
                    static_cast<size_t>(len * d.inner) * sizeof(double));
    if (tape_wants(a)) {
        mark_output(out);
        Impl ai = a.impl(), oi = out.impl();
        Tape::current()->record([ai, oi, d, start, len]() {
            ai->ensure_grad();
            for (idx o = 0; o < d.outer; ++o) {
                double* dst = ai->grad.data() + (o * d.dim + start) * d.inner;
                const double* src = oi->grad.data() + o * len * d.inner;
                for (idx i = 0; i < len * d.inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor concat(idx axis, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Shape os = parts[0].shape();
    idx total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != parts[0].ndim())
            throw ShapeError("concat: rank mismatch");
        for (idx i = 0; i < p.ndim(); ++i)
            if (i != axis && p.dim(i) != os[static_cast<size_t>(i)])
                throw ShapeError("concat: shape mismatch between " + shape_str(os) +
                                 " and " + shape_str(p.shape()));
        total += p.dim(axis);
    }
    os[static_cast<size_t>(axis)] = total;
    Tensor out(os);
    SliceDims d = slice_dims(os, axis);
    idx offset = 0;
    bool any_grad = false;
    for (const Tensor& p : parts) {
        idx len = p.dim(axis);
        for (idx o = 0; o < d.outer; ++o)
            std::memcpy(out.data().data() + (o * d.dim + offset) * d.inner,
                        p.data().data() + o * len * d.inner,
                        static_cast<size_t>(len * d.inner) * sizeof(double));
        offset += len;
        any_grad = any_grad || tape_wants(p);
    }
    if (any_grad) {
        mark_output(out);
        Impl oi = out.impl();
        std::vector<Impl> ins;
        for (const Tensor& p : parts) ins.push_back(p.impl());
        Tape::current()->record([oi, ins, d]() {
            idx offset = 0;
            for (const Impl& pi : ins) {
                idx len = static_cast<idx>(pi->data.size()) / (d.outer * d.inner);
                if (pi->needs_grad) {
                    pi->ensure_grad();
                    for (idx o = 0; o < d.outer; ++o) {
                        double* dst = pi->grad.data() + o * len * d.inner;
                        const double* src = oi->grad.data() + (o * d.dim + offset) * d.inner;
                        for (idx i = 0; i < len * d.inner; ++i) dst[i] += src[i];
                    }
                }
                offset += len;
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<idx>& rows) {
    if (a.ndim() < 1) throw ShapeError("gather_rows: rank 0 input");
    idx inner = a.numel() / a.dim(0);
    Shape os = a.shape();
    os[0] = static_cast<idx>(rows.size());
    Tensor out(os);
    for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= a.dim(0))
            throw ContractError("gather_rows: index " + std::to_string(rows[r]) +
                                " out of range for shape " + shape_str(a.shape()));
        std::memcpy(out.data().data() + static_cast<idx>(r) * inner,
                    a.data().data() + rows[r] * inner,
                    static_cast<size_t>(inner) * sizeof(double));
    }
    if (tape_wants(a)) {
        mark_output(out);
        Impl ai = a.impl(), oi = out.impl();
        auto rs = std::make_shared<std::vector<idx>>(rows);
        Tape::current()->record([ai, oi, rs, inner]() {
            ai->ensure_grad();
            for (size_t r = 0; r < rs->size(); ++r) {
                double* dst = ai->grad.data() + (*rs)[r] * inner;
                const double* src = oi->grad.data() + static_cast<idx>(r) * inner;
                for (idx i = 0; i < inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor take(const Tensor& a, const std::vector<idx>& flat_indices) {
    Tensor out(Shape{static_cast<idx>(flat_indices.size())});
    for (size_t i = 0; i < flat_indices.size(); ++i) {
        idx f = flat_indices[i];
        if (f < 0 || f >= a.numel())
            throw ContractError("take: flat index " + std::to_string(f) +
                                " out of range for " + std::to_string(a.numel()) +
                                " elements");
        out.data()[i] = a.data()[static_cast<size_t>(f)];
    }
    if (tape_wants(a)) {
        mark_output(out);
        Impl ai = a.impl(), oi = out.impl();
        auto ix = std::make_shared<std::vector<idx>>(flat_indices);
        Tape::current()->record([ai, oi, ix]() {
            ai->ensure_grad();
            for (size_t i = 0; i < ix->size(); ++i)
                ai->grad[static_cast<size_t>((*ix)[i])] += oi->grad[i];
        });
    }
    return out;
}

// ---------------- reductions ----------------

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (tape_wants(a)) {
        mark_output(out);
        Impl ai = a.impl(), oi = out.impl();
        Tape::current()->record([ai, oi]() {
            ai->ensure_grad();
            double g = oi->grad[0];
            for (double& v : ai->grad) v += g;
        });
    }
    return out;
}

Tensor mean_axis0(const Tensor& a) {
    if (a.ndim() < 1 || a.dim(0) == 0) throw ShapeError("mean_axis0: empty axis");
    idx n = a.dim(0);
    idx inner = a.numel() / n;
    Shape os(a.shape().begin() + 1, a.shape().end());
    if (os.empty()) os = Shape{1};
    Tensor out(os);
    for (idx r = 0; r < n; ++r)
        for (idx i = 0; i < inner; ++i)
            out.data()[static_cast<size_t>(i)] += a.data()[static_cast<size_t>(r * inner + i)];
    for (double& v : out.data()) v /= static_cast<double>(n);
    if (tape_wants(a)) {
        mark_output(out);
        Impl ai = a.impl(), oi = out.impl();
        Tape::current()->record([ai, oi, n, inner]() {
            ai->ensure_grad();
            double inv = 1.0 / static_cast<double>(n);
            for (idx r = 0; r < n; ++r)
                for (idx i = 0; i < inner; ++i)
                    ai->grad[static_cast<size_t>(r * inner + i)] +=
                        oi->grad[static_cast<size_t>(i)] * inv;
        });
    }
    return out;
}

Tensor row_sums(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("row_sums expects rank 2, got " + shape_str(a.shape()));
    idx n = a.dim(0), d = a.dim(1);
    Tensor out(Shape{n, 1});
    for (idx r = 0; r < n; ++r) {
        double s = 0.0;
        for (idx i = 0; i < d; ++i) s += a.data()[static_cast<size_t>(r * d + i)];
        out.data()[static_cast<size_t>(r)] = s;
    }
    if (tape_wants(a)) {
        mark_output(out);
        Impl ai = a.impl(), oi = out.impl();
        Tape::current()->record([ai, oi, n, d]() {
            ai->ensure_grad();
            for (idx r = 0; r < n; ++r) {
                double g = oi->grad[static_cast<size_t>(r)];
                for (idx i = 0; i < d; ++i) ai->grad[static_cast<size_t>(r * d + i)] += g;
            }
        });
    }
    return out;
}

// ---------------- softmax family ----------------

namespace {
struct Rows {
    idx rows, d;
};
Rows lastdim_rows(const Tensor& a, const char* name) {
    if (a.ndim() < 1) throw ShapeError(std::string(name) + ": rank 0 input");
    idx d = a.dim(a.ndim() - 1);
    return Rows{a.numel() / d, d};
}
}  // namespace

Tensor softmax_lastdim(const Tensor& a) {
    Rows r = lastdim_rows(a, "softmax");
    Tensor out(a.shape());
    for (idx row = 0; row < r.rows; ++row) {
        const double* x = a.data().data() + row * r.d;
        double* y = out.data().data() + row * r.d;
        double mx = x[0];
        for (idx i = 1; i < r.d; ++i) mx = std::max(mx, x[i]);
        double s = 0.0;
        for (idx i = 0; i < r.d; ++i) {
            y[i] = std::exp(x[i] - mx);
            s += y[i];
        }
        for (idx i = 0; i < r.d; ++i) y[i] /= s;
    }
    if (tape_wants(a)) {
        mark_output(out);
        Impl ai = a.impl(), oi = out.impl();
        Tape::current()->record([ai, oi, r]() {
            ai->ensure_grad();
            for (idx row = 0; row < r.rows; ++row) {
                const double* y = oi->data.data() + row * r.d;
                const double* g = oi->grad.data() + row * r.d;
                double dot = 0.0;
                for (idx i = 0; i < r.d; ++i) dot += y[i] * g[i];
                double* da = ai->grad.data() + row * r.d;
                for (idx i = 0; i < r.d; ++i) da[i] += y[i] * (g[i] - dot);
            }
        });
    }
    return out;
}

Tensor log_softmax_lastdim(const Tensor& a) {
    Rows r = lastdim_rows(a, "log_softmax");
    Tensor out(a.shape());
    for (idx row = 0; row < r.rows; ++row) {
        const double* x = a.data().data() + row * r.d;
        double* y = out.data().data() + row * r.d;
        double mx = x[0];
        for (idx i = 1; i < r.d; ++i) mx = std::max(mx, x[i]);
        double s = 0.0;
        for (idx i = 0; i < r.d; ++i) s += std::exp(x[i] - mx);
        double lse = mx + std::log(s);
        for (idx i = 0; i < r.d; ++i) y[i] = x[i] - lse;
    }
    if (tape_wants(a)) {
        mark_output(out);
        Impl ai = a.impl(), oi = out.impl();
        Tape::current()->record([ai, oi, r]() {
            ai->ensure_grad();
            for (idx row = 0; row < r.rows; ++row) {
                const double* y = oi->data.data() + row * r.d;
                const double* g = oi->grad.data() + row * r.d;
                double gsum = 0.0;
                for (idx i = 0; i < r.d; ++i) gsum += g[i];
                double* da = ai->grad.data() + row * r.d;
                for (idx i = 0; i < r.d; ++i) da[i] += g[i] - std::exp(y[i]) * gsum;
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    Rows r = lastdim_rows(x, "layer_norm");
    if (gamma.numel() != r.d || beta.numel() != r.d)
        throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match feature dim " +
                         std::to_string(r.d));
    if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
    Tensor out(x.shape());
    std::vector<double> mean(static_cast<size_t>(r.rows)), rstd(static_cast<size_t>(r.rows));
    for (idx row = 0; row < r.rows; ++row) {
        const double* px = x.data().data() + row * r.d;
        double m = 0.0;
        for (idx i = 0; i < r.d; ++i) m += px[i];
        m /= static_cast<double>(r.d);
        double var = 0.0;
        for (idx i = 0; i < r.d; ++i) var += (px[i] - m) * (px[i] - m);
        var /= static_cast<double>(r.d);
        double rs = 1.0 / std::sqrt(var + eps);
        mean[static_cast<size_t>(row)] = m;
        rstd[static_cast<size_t>(row)] = rs;
        double* py = out.data().data() + row * r.d;
        for (idx i = 0; i < r.d; ++i)
            py[i] = (px[i] - m) * rs * gamma.data()[static_cast<size_t>(i)] +
                    beta.data()[static_cast<size_t>(i)];
    }
    if (tape_wants(x) || tape_wants(gamma) || tape_wants(beta)) {
        mark_output(out);
        Impl xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
        auto mn = std::make_shared<std::vector<double>>(std::move(mean));
        auto rs = std::make_shared<std::vector<double>>(std::move(rstd));
        Tape::current()->record([xi, gi, bi, oi, mn, rs, r]() {
            bool wx = xi->needs_grad, wg = gi->needs_grad, wb = bi->needs_grad;
            if (wx) xi->ensure_grad();
            if (wg) gi->ensure_grad();
            if (wb) bi->ensure_grad();
            for (idx row = 0; row < r.rows; ++row) {
                const double* px = xi->data.data() + row * r.d;
                const double* g = oi->grad.data() + row * r.d;
                double m = (*mn)[static_cast<size_t>(row)];
                double rstd = (*rs)[static_cast<size_t>(row)];
                if (wg || wb) {
                    for (idx i = 0; i < r.d; ++i) {
                        double xhat = (px[i] - m) * rstd;
                        if (wg) gi->grad[static_cast<size_t>(i)] += g[i] * xhat;
                        if (wb) bi->grad[static_cast<size_t>(i)] += g[i];
                    }
                }
                if (wx) {
                    // dL/dx = rstd * (gy - mean(gy) - xhat * mean(gy * xhat))
                    double s1 = 0.0, s2 = 0.0;
                    for (idx i = 0; i < r.d; ++i) {
                        double gy = g[i] * gi->data[static_cast<size_t>(i)];
                        double xhat = (px[i] - m) * rstd;
                        s1 += gy;
                        s2 += gy * xhat;
                    }
                    s1 /= static_cast<double>(r.d);
                    s2 /= static_cast<double>(r.d);
                    double* dx = xi->grad.data() + row * r.d;
                    for (idx i = 0; i < r.d; ++i) {
                        double gy = g[i] * gi->data[static_cast<size_t>(i)];
                        double xhat = (px[i] - m) * rstd;
                        dx[i] += rstd * (gy - s1 - xhat * s2);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------- convolutions ----------------

Tensor conv1d_temporal(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    if (x.ndim() != 3 || kernel.ndim() != 3)
        throw ShapeError("conv1d_temporal expects x [T, L, c] and kernel [k, c, c], got " +
                         shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
    idx T = x.dim(0), L = x.dim(1), cin = x.dim(2);
    idx k = kernel.dim(0), kc_in = kernel.dim(1), cout = kernel.dim(2);
    if (k % 2 == 0) throw ConfigError("conv1d_temporal: kernel size must be odd, got " +
                                      std::to_string(k));
    if (kc_in != cin || bias.numel() != cout)
        throw ShapeError("conv1d_temporal: channel mismatch between x " +
                         shape_str(x.shape()) + ", kernel " + shape_str(kernel.shape()) +
                         ", bias " + shape_str(bias.shape()));
    idx pad = (k - 1) / 2;
    Tensor out(Shape{T, L, cout});
    const double* px = x.data().data();
    const double* pk = kernel.data().data();
    double* po = out.data().data();
    for (idx t = 0; t < T; ++t)
        for (idx l = 0; l < L; ++l) {
            double* o = po + (t * L + l) * cout;
            for (idx co = 0; co < cout; ++co) o[co] = bias.data()[static_cast<size_t>(co)];
            for (idx dt = 0; dt < k; ++dt) {
                idx ts = t + dt - pad;
                if (ts < 0 || ts >= T) continue;
                const double* xi = px + (ts * L + l) * cin;
                const double* kv = pk + dt * cin * cout;
                for (idx ci = 0; ci < cin; ++ci) {
                    double xv = xi[ci];
                    if (xv == 0.0) continue;
                    const double* kr = kv + ci * cout;
                    for (idx co = 0; co < cout; ++co) o[co] += xv * kr[co];
                }
            }
        }
    if (tape_wants(x) || tape_wants(kernel) || tape_wants(bias)) {
        mark_output(out);
        Impl xi = x.impl(), ki = kernel.impl(), bi = bias.impl(), oi = out.impl();
        Tape::current()->record([xi, ki, bi, oi, T, L, cin, cout, k, pad]() {
            bool wx = xi->needs_grad, wk = ki->needs_grad, wb = bi->needs_grad;
            if (wx) xi->ensure_grad();
            if (wk) ki->ensure_grad();
            if (wb) bi->ensure_grad();
            const double* g = oi->grad.data();
            for (idx t = 0; t < T; ++t)
                for (idx l = 0; l < L; ++l) {
                    const double* go = g + (t * L + l) * cout;
                    if (wb)
                        for (idx co = 0; co < cout; ++co)
                            bi->grad[static_cast<size_t>(co)] += go[co];
                    for (idx dt = 0; dt < k; ++dt) {
                        idx ts = t + dt - pad;
                        if (ts < 0 || ts >= T) continue;
                        const double* xv = xi->data.data() + (ts * L + l) * cin;
                        for (idx ci = 0; ci < cin; ++ci) {
                            const double* kr = ki->data.data() + (dt * cin + ci) * cout;
                            double acc = 0.0;
                            for (idx co = 0; co < cout; ++co) {
                                if (wk)
                                    ki->grad[static_cast<size_t>((dt * cin + ci) * cout + co)] +=
                                        xv[ci] * go[co];
                                acc += kr[co] * go[co];
                            }
                            if (wx) xi->grad[static_cast<size_t>((ts * L + l) * cin + ci)] += acc;
                        }
                    }
                }
        });
    }
    return out;
}

Tensor conv2d_spatial(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    if (x.ndim() != 4 || kernel.ndim() != 4)
        throw ShapeError("conv2d_spatial expects x [T, h, w, c] and kernel [k, k, c, c], got " +
                         shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
    idx T = x.dim(0), H = x.dim(1), W = x.dim(2), cin = x.dim(3);
    idx k = kernel.dim(0), cout = kernel.dim(3);
    if (kernel.dim(1) != k || kernel.dim(2) != cin || bias.numel() != cout)
        throw ShapeError("conv2d_spatial: kernel " + shape_str(kernel.shape()) +
                         " incompatible with x " + shape_str(x.shape()));
    if (k % 2 == 0) throw ConfigError("conv2d_spatial: kernel size must be odd, got " +
                                      std::to_string(k));
    idx pad = (k - 1) / 2;
    Tensor out(Shape{T, H, W, cout});
    for (idx t = 0; t < T; ++t)
        for (idx i = 0; i < H; ++i)
            for (idx j = 0; j < W; ++j) {
                double* o = out.data().data() + ((t * H + i) * W + j) * cout;
                for (idx co = 0; co < cout; ++co) o[co] = bias.data()[static_cast<size_t>(co)];
                for (idx di = 0; di < k; ++di) {
                    idx si = i + di - pad;
                    if (si < 0 || si >= H) continue;
                    for (idx dj = 0; dj < k; ++dj) {
                        idx sj = j + dj - pad;
                        if (sj < 0 || sj >= W) continue;
                        const double* xv = x.data().data() + ((t * H + si) * W + sj) * cin;
                        const double* kv = kernel.data().data() + (di * k + dj) * cin * cout;
                        for (idx ci = 0; ci < cin; ++ci) {
                            double v = xv[ci];
                            if (v == 0.0) continue;
                            const double* kr = kv + ci * cout;
                            for (idx co = 0; co < cout; ++co) o[co] += v * kr[co];
                        }
                    }
                }
            }
    if (tape_wants(x) || tape_wants(kernel) || tape_wants(bias)) {
        mark_output(out);
        Impl xi = x.impl(), ki = kernel.impl(), bi = bias.impl(), oi = out.impl();
        Tape::current()->record([xi, ki, bi, oi, T, H, W, cin, cout, k, pad]() {
            bool wx = xi->needs_grad, wk = ki->needs_grad, wb = bi->needs_grad;
            if (wx) xi->ensure_grad();
            if (wk) ki->ensure_grad();
            if (wb) bi->ensure_grad();
            for (idx t = 0; t < T; ++t)
                for (idx i = 0; i < H; ++i)
                    for (idx j = 0; j < W; ++j) {
                        const double* go = oi->grad.data() + ((t * H + i) * W + j) * cout;
                        if (wb)
                            for (idx co = 0; co < cout; ++co)
                                bi->grad[static_cast<size_t>(co)] += go[co];
                        for (idx di = 0; di < k; ++di) {
                            idx si = i + di - pad;
                            if (si < 0 || si >= H) continue;
                            for (idx dj = 0; dj < k; ++dj) {
                                idx sj = j + dj - pad;
                                if (sj < 0 || sj >= W) continue;
                                idx xoff = ((t * H + si) * W + sj) * cin;
                                idx koff = (di * k + dj) * cin * cout;
                                for (idx ci = 0; ci < cin; ++ci) {
                                    double acc = 0.0;
                                    for (idx co = 0; co < cout; ++co) {
                                        if (wk)
                                            ki->grad[static_cast<size_t>(koff + ci * cout + co)] +=
                                                xi->data[static_cast<size_t>(xoff + ci)] * go[co];
                                        acc += ki->data[static_cast<size_t>(koff + ci * cout + co)] *
                                               go[co];
                                    }
                                    if (wx) xi->grad[static_cast<size_t>(xoff + ci)] += acc;
                                }
                            }
                        }
                    }
        });
    }
    return out;
}

// ---------------- attention ----------------

Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in,
                            const AttentionWeights& w, idx heads, const Tensor* mask) {
    idx d = q_in.dim(q_in.ndim() - 1);
    if (d % heads != 0)
        throw ConfigError("multi_head_attention: width " + std::to_string(d) +
                          " not divisible by " + std::to_string(heads) + " heads");
    if (kv_in.dim(kv_in.ndim() - 1) != d)
        throw ShapeError("multi_head_attention: query/key width mismatch " +
                         shape_str(q_in.shape()) + " vs " + shape_str(kv_in.shape()));
    idx dh = d / heads;
    idx Lq = q_in.dim(q_in.ndim() - 2);
    idx Lk = kv_in.dim(kv_in.ndim() - 2);
    idx batch = 1;
    for (idx i = 0; i < q_in.ndim() - 2; ++i) batch *= q_in.dim(i);
    Shape lead(q_in.shape().begin(), q_in.shape().end() - 2);

    Tensor q3 = reshape(q_in, Shape{batch, Lq, d});
    Tensor kv3 = reshape(kv_in, Shape{batch, Lk, d});

    auto split_heads = [&](const Tensor& x, idx L) {
        // [B, L, d] -> [B, heads, L, dh]
        return permute(reshape(x, Shape{batch, L, heads, dh}), {0, 2, 1, 3});
    };
    Tensor q = split_heads(add(matmul(q3, w.wq), w.bq), Lq);
    Tensor k = split_heads(add(matmul(kv3, w.wk), w.bk), Lk);
    Tensor v = split_heads(add(matmul(kv3, w.wv), w.bv), Lk);

    Tensor scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (mask) scores = add(scores, *mask);
    Tensor att = softmax_lastdim(scores);       // [B, heads, Lq, Lk]
    Tensor ctx = matmul(att, v);                // [B, heads, Lq, dh]
    Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), Shape{batch, Lq, d});
    Tensor out = add(matmul(merged, w.wo), w.bo);
    Shape os = lead;
    os.push_back(Lq);
    os.push_back(d);
    return reshape(out, os);
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
    if (x.ndim() != 2) throw ShapeError("l2_normalize_rows expects rank 2, got " +
                                        shape_str(x.shape()));
    Tensor norms = clamp_min(sqrt_t(row_sums(mul(x, x))), eps);
    return div(x, norms);
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v, double eps) {
    if (u.shape() != v.shape())
        throw ShapeError("cosine_similarity: shapes differ, " + shape_str(u.shape()) +
                         " vs " + shape_str(v.shape()));
    Tensor dot = sum_all(mul(u, v));
    Tensor nu = sqrt_t(sum_all(mul(u, u)));
    Tensor nv = sqrt_t(sum_all(mul(v, v)));
    return div(dot, clamp_min(mul(nu, nv), eps));
}

}  // namespace m2va
