#include "cpl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cpl {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

const char* op_name(Op op) {
    switch (op) {
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Relu: return "relu";
        case Op::Sigmoid: return "sigmoid";
        case Op::Square: return "square";
        case Op::SqrtProtected: return "sqrt_protected";
        case Op::Atan: return "atan";
        case Op::Conv2d: return "conv2d";
        case Op::AvgPool2: return "avg_pool2";
        case Op::Upsample2: return "upsample2";
        case Op::Sum: return "sum";
        case Op::Select: return "select";
        case Op::Gather: return "gather";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Tensor

namespace {

std::shared_ptr<TensorImpl> make_impl(const Shape& shape, bool requires_grad) {
    for (int d : shape)
        CPL_REQUIRE(d > 0, "tensor dimension must be positive, got shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
    impl->requires_grad = requires_grad;
    return impl;
}

} // namespace

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    Tensor t;
    t.impl_ = make_impl(shape, requires_grad);
    return t;
}

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
    Tensor t = zeros(shape, requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::scalar(float value) { return full({1}, value, false); }

Tensor Tensor::from_data(const Shape& shape, std::vector<float> data, bool requires_grad) {
    CPL_REQUIRE(shape_numel(shape) == static_cast<int64_t>(data.size()), "from_data: shape " + shape_str(shape) + " does not match " +
                std::to_string(data.size()) + " values");
    Tensor t;
    t.impl_ = make_impl(shape, requires_grad);
    t.impl_->data = std::move(data);
    return t;
}

const Shape& Tensor::shape() const {
    CPL_REQUIRE(defined(), "use of undefined tensor");
    return impl_->shape;
}

int64_t Tensor::numel() const { return shape_numel(shape()); }

float* Tensor::data() {
    require(defined(), "use of undefined tensor");
    return impl_->data.data();
}

const float* Tensor::data() const {
    require(defined(), "use of undefined tensor");
    return impl_->data.data();
}

float Tensor::item() const {
    require(numel() == 1, "item() requires a single-element tensor, got " + shape_str(shape()));
    return impl_->data[0];
}

float Tensor::at(int64_t flat_index) const {
    CPL_REQUIRE(flat_index >= 0 && flat_index < numel(), "at(): index out of range");
    return impl_->data[static_cast<size_t>(flat_index)];
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
    require(defined(), "use of undefined tensor");
    impl_->requires_grad = v;
}

bool Tensor::has_grad() const { return defined() && !impl_->grad.empty(); }

const std::vector<float>& Tensor::grad() const {
    require(has_grad(), "tensor has no gradient buffer");
    return impl_->grad;
}

void Tensor::zero_grad() {
    require(defined(), "use of undefined tensor");
    impl_->grad.assign(impl_->data.size(), 0.0f);
}

void Tensor::clear_grad() {
    require(defined(), "use of undefined tensor");
    impl_->grad.clear();
}

Tensor Tensor::clone_detached() const {
    require(defined(), "use of undefined tensor");
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = false;
    return t;
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* t_current_tape = nullptr;
} // namespace

Tape::Tape() {
    prev_ = t_current_tape;
    t_current_tape = this;
}

Tape::~Tape() { t_current_tape = prev_; }

Tape* Tape::current() { return t_current_tape; }

void Tape::record(TapeNode node, const std::shared_ptr<TensorImpl>& a,
                  const std::shared_ptr<TensorImpl>& b,
                  const std::shared_ptr<TensorImpl>& c,
                  const std::shared_ptr<TensorImpl>& out) {
    nodes_.push_back(node);
    if (a) retained_.push_back(a);
    if (b) retained_.push_back(b);
    if (c) retained_.push_back(c);
    retained_.push_back(out);
}

// ---------------------------------------------------------------------------
// shared kernel helpers

namespace {

void check_finite_forward(const TensorImpl& t, Op op) {
    // finite*0 is +-0, inf/nan*0 is nan; the sum stays vectorizable and only
    // trips the slow path on an actual failure
    const float* __restrict p = t.data.data();
    size_t n = t.data.size();
    float probe = 0.0f;
    for (size_t i = 0; i < n; ++i) probe += p[i] * 0.0f;
    if (probe == 0.0f && !std::isnan(probe)) return;
    for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(p[i]))
            fail(std::string("non-finite value produced by '") + op_name(op) +
                 "' at flat index " + std::to_string(i));
}

void ensure_grad(TensorImpl* t) {
    if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0f);
}

float protect_den(float d) {
    if (d >= 0.0f) return d < kProtectEps ? kProtectEps : d;
    return d > -kProtectEps ? -kProtectEps : d;
}

bool grads_needed(const Tensor& a) { return a.requires_grad() || !a.impl()->grad.empty(); }

// An op participates in the graph when a tape is recording and any input
// carries grad requirements. Otherwise it runs in pure inference mode.
bool should_record(std::initializer_list<const Tensor*> ins) {
    if (!Tape::current()) return false;
    for (const Tensor* t : ins)
        if (t->defined() && t->impl()->requires_grad) return true;
    return false;
}

Tensor make_output(const Shape& shape, Op op, bool track) {
    Tensor out = Tensor::zeros(shape, track);
    out.impl()->op = op_name(op);
    return out;
}

void record_node(Op op, const Tensor& a, const Tensor& b, const Tensor& c,
                 const Tensor& out, int i0 = 0) {
    TapeNode n;
    n.op = op;
    n.a = a.defined() ? a.impl() : nullptr;
    n.b = b.defined() ? b.impl() : nullptr;
    n.c = c.defined() ? c.impl() : nullptr;
    n.out = out.impl();
    n.i0 = i0;
    Tape::current()->record(n, a.defined() ? a.impl_ptr() : nullptr,
                            b.defined() ? b.impl_ptr() : nullptr,
                            c.defined() ? c.impl_ptr() : nullptr, out.impl_ptr());
}

enum class Bcast { Same, AScalar, BScalar };

Bcast binary_mode(const Tensor& a, const Tensor& b, Op op) {
    if (a.shape() == b.shape()) return Bcast::Same;
    if (a.numel() == 1) return Bcast::AScalar;
    if (b.numel() == 1) return Bcast::BScalar;
    fail(std::string("shape mismatch in '") + op_name(op) + "': " + shape_str(a.shape()) +
         " vs " + shape_str(b.shape()));
}

} // namespace

// ---------------------------------------------------------------------------
// binary elementwise

namespace {

Tensor binary_op(Op op, const Tensor& a, const Tensor& b) {
    Bcast mode = binary_mode(a, b, op);
    const Shape& out_shape = (mode == Bcast::AScalar) ? b.shape() : a.shape();
    bool track = should_record({&a, &b});
    Tensor out = make_output(out_shape, op, track);

    const float* __restrict pa = a.data();
    const float* __restrict pb = b.data();
    float* __restrict po = out.data();
    size_t n = static_cast<size_t>(out.numel());
    const bool as = mode == Bcast::AScalar, bs = mode == Bcast::BScalar;

    switch (op) {
        case Op::Add:
            if (as) { float s = pa[0]; for (size_t i = 0; i < n; ++i) po[i] = s + pb[i]; }
            else if (bs) { float s = pb[0]; for (size_t i = 0; i < n; ++i) po[i] = pa[i] + s; }
            else for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
            break;
        case Op::Sub:
            if (as) { float s = pa[0]; for (size_t i = 0; i < n; ++i) po[i] = s - pb[i]; }
            else if (bs) { float s = pb[0]; for (size_t i = 0; i < n; ++i) po[i] = pa[i] - s; }
            else for (size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
            break;
        case Op::Mul:
            if (as) { float s = pa[0]; for (size_t i = 0; i < n; ++i) po[i] = s * pb[i]; }
            else if (bs) { float s = pb[0]; for (size_t i = 0; i < n; ++i) po[i] = pa[i] * s; }
            else for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
            break;
        case Op::Div:
            if (as) { float s = pa[0]; for (size_t i = 0; i < n; ++i) po[i] = s / protect_den(pb[i]); }
            else if (bs) { float s = protect_den(pb[0]); for (size_t i = 0; i < n; ++i) po[i] = pa[i] / s; }
            else for (size_t i = 0; i < n; ++i) po[i] = pa[i] / protect_den(pb[i]);
            break;
        default:
            fail("internal: not a binary op");
    }
    check_finite_forward(*out.impl(), op);
    if (track) record_node(op, a, b, Tensor(), out);
    return out;
}

// Leaves with requires_grad and every tracked intermediate need gradient;
// plain constants (masks, targets, images) do not.
bool needs_grad(const TensorImpl* t) { return t->requires_grad || !t->grad.empty(); }

void binary_backward(const TapeNode& n) {
    TensorImpl* a = n.a;
    TensorImpl* b = n.b;
    const std::vector<float>& go = n.out->grad;
    size_t no = go.size();
    bool a_scalar = a->data.size() == 1 && no > 1;
    bool b_scalar = b->data.size() == 1 && no > 1;
    bool need_a = needs_grad(a);
    bool need_b = needs_grad(b);

    if (need_a) ensure_grad(a);
    if (need_b) ensure_grad(b);
    auto ga = [&](size_t i) -> float& { return a->grad[a_scalar ? 0 : i]; };
    auto gb = [&](size_t i) -> float& { return b->grad[b_scalar ? 0 : i]; };
    auto va = [&](size_t i) { return a->data[a_scalar ? 0 : i]; };
    auto vb = [&](size_t i) { return b->data[b_scalar ? 0 : i]; };

    switch (n.op) {
        case Op::Add:
            if (need_a)
                for (size_t i = 0; i < no; ++i) ga(i) += go[i];
            if (need_b)
                for (size_t i = 0; i < no; ++i) gb(i) += go[i];
            break;
        case Op::Sub:
            if (need_a)
                for (size_t i = 0; i < no; ++i) ga(i) += go[i];
            if (need_b)
                for (size_t i = 0; i < no; ++i) gb(i) -= go[i];
            break;
        case Op::Mul:
            if (need_a)
                for (size_t i = 0; i < no; ++i) ga(i) += go[i] * vb(i);
            if (need_b)
                for (size_t i = 0; i < no; ++i) gb(i) += go[i] * va(i);
            break;
        case Op::Div:
            if (need_a)
                for (size_t i = 0; i < no; ++i) ga(i) += go[i] / protect_den(vb(i));
            if (need_b)
                for (size_t i = 0; i < no; ++i) {
                    // inside the protection zone the output is constant in b
                    if (std::fabs(vb(i)) >= kProtectEps) {
                        float den = vb(i);
                        gb(i) -= go[i] * va(i) / (den * den);
                    }
                }
            break;
        default:
            fail("internal: not a binary op");
    }
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(Op::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(Op::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(Op::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(Op::Div, a, b); }

// ---------------------------------------------------------------------------
// unary elementwise

namespace {

Tensor unary_op(Op op, const Tensor& a) {
    bool track = should_record({&a});
    Tensor out = make_output(a.shape(), op, track);
    const float* pa = a.data();
    float* po = out.data();
    size_t n = static_cast<size_t>(a.numel());

    switch (op) {
        case Op::Relu:
            for (size_t i = 0; i < n; ++i) po[i] = pa[i] > 0.0f ? pa[i] : 0.0f;
            break;
        case Op::Sigmoid:
            for (size_t i = 0; i < n; ++i) po[i] = 1.0f / (1.0f + std::exp(-pa[i]));
            break;
        case Op::Square:
            for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pa[i];
            break;
        case Op::SqrtProtected:
            for (size_t i = 0; i < n; ++i)
                po[i] = std::sqrt(pa[i] < kProtectEps ? kProtectEps : pa[i]);
            break;
        case Op::Atan:
            for (size_t i = 0; i < n; ++i) po[i] = std::atan(pa[i]);
            break;
        default:
            fail("internal: not a unary op");
    }
    // square can overflow to inf; the other unary ops map finite to finite
    if (op == Op::Square) check_finite_forward(*out.impl(), op);
    if (track) record_node(op, a, Tensor(), Tensor(), out);
    return out;
}

void unary_backward(const TapeNode& n) {
    TensorImpl* a = n.a;
    if (!needs_grad(a)) return;
    ensure_grad(a);
    const std::vector<float>& go = n.out->grad;
    const std::vector<float>& vo = n.out->data;
    const std::vector<float>& va = a->data;

    switch (n.op) {
        case Op::Relu:
            for (size_t i = 0; i < go.size(); ++i)
                if (va[i] > 0.0f) a->grad[i] += go[i];
            break;
        case Op::Sigmoid:
            for (size_t i = 0; i < go.size(); ++i)
                a->grad[i] += go[i] * vo[i] * (1.0f - vo[i]);
            break;
        case Op::Square:
            for (size_t i = 0; i < go.size(); ++i) a->grad[i] += go[i] * 2.0f * va[i];
            break;
        case Op::SqrtProtected:
            for (size_t i = 0; i < go.size(); ++i)
                if (va[i] >= kProtectEps) a->grad[i] += go[i] * 0.5f / vo[i];
            break;
        case Op::Atan:
            for (size_t i = 0; i < go.size(); ++i)
                a->grad[i] += go[i] / (1.0f + va[i] * va[i]);
            break;
        default:
            fail("internal: not a unary op");
    }
}

} // namespace

Tensor relu(const Tensor& a) { return unary_op(Op::Relu, a); }
Tensor sigmoid(const Tensor& a) { return unary_op(Op::Sigmoid, a); }
Tensor square(const Tensor& a) { return unary_op(Op::Square, a); }
Tensor sqrt_protected(const Tensor& a) { return unary_op(Op::SqrtProtected, a); }
Tensor atan(const Tensor& a) { return unary_op(Op::Atan, a); }

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvDims {
    int ic, h, w, oc, k, pad, oh, ow;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, const Tensor& bias, int padding) {
    require(input.shape().size() == 3, "conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
    CPL_REQUIRE(kernel.shape().size() == 4, "conv2d: kernel must be [OC,IC,k,k], got " + shape_str(kernel.shape()));
    ConvDims d;
    d.ic = input.shape()[0];
    d.h = input.shape()[1];
    d.w = input.shape()[2];
    d.oc = kernel.shape()[0];
    d.k = kernel.shape()[2];
    d.pad = padding;
    CPL_REQUIRE(kernel.shape()[1] == d.ic, "conv2d: channel mismatch, input " + shape_str(input.shape()) + " vs kernel " +
                shape_str(kernel.shape()));
    CPL_REQUIRE(kernel.shape()[3] == d.k, "conv2d: kernel must be square");
    require(d.k % 2 == 1, "conv2d: kernel size must be odd");
    require(padding >= 0, "conv2d: padding must be >= 0");
    d.oh = d.h + 2 * d.pad - d.k + 1;
    d.ow = d.w + 2 * d.pad - d.k + 1;
    require(d.oh > 0 && d.ow > 0, "conv2d: output would be empty");
    if (bias.defined())
        require(bias.shape() == Shape{d.oc}, "conv2d: bias must be [OC]");
    return d;
}

// One (ky) row of a 3x3 kernel applied to one output row, all three taps
// fused in the interior; boundary columns fall back to per-tap updates.
void conv3_row(float* __restrict orow, const float* __restrict irow, const float* __restrict kw,
               int ow, int w, int pad) {
    int lo = std::min(std::max(0, pad), ow);
    int hi = std::max(std::min(ow, w + pad - 2), lo);
    const float w0 = kw[0], w1 = kw[1], w2 = kw[2];
    const float* ir = irow - pad;
    for (int ox = lo; ox < hi; ++ox)
        orow[ox] += w0 * ir[ox] + w1 * ir[ox + 1] + w2 * ir[ox + 2];
    for (int kx = 0; kx < 3; ++kx) {
        float wv = kw[kx];
        int xs = std::max(0, pad - kx);
        int xe = std::min(ow, w + pad - kx);
        for (int ox = xs; ox < std::min(lo, xe); ++ox) orow[ox] += wv * irow[ox + kx - pad];
        for (int ox = std::max(hi, xs); ox < xe; ++ox) orow[ox] += wv * irow[ox + kx - pad];
    }
}

// All nine taps of a 3x3 kernel applied to one output row whose three input
// rows are all in range.
void conv3_rows(float* __restrict orow, const float* __restrict r0, const float* __restrict r1,
                const float* __restrict r2, const float* __restrict kb, int ow, int w, int pad) {
    int lo = std::min(std::max(0, pad), ow);
    int hi = std::max(std::min(ow, w + pad - 2), lo);
    const float k00 = kb[0], k01 = kb[1], k02 = kb[2];
    const float k10 = kb[3], k11 = kb[4], k12 = kb[5];
    const float k20 = kb[6], k21 = kb[7], k22 = kb[8];
    const float* a = r0 - pad;
    const float* b = r1 - pad;
    const float* c = r2 - pad;
    for (int ox = lo; ox < hi; ++ox)
        orow[ox] += k00 * a[ox] + k01 * a[ox + 1] + k02 * a[ox + 2] + k10 * b[ox] +
                    k11 * b[ox + 1] + k12 * b[ox + 2] + k20 * c[ox] + k21 * c[ox + 1] +
                    k22 * c[ox + 2];
    if (lo > 0 || hi < ow) {
        const float* rows[3] = {r0, r1, r2};
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                float wv = kb[ky * 3 + kx];
                int xs = std::max(0, pad - kx);
                int xe = std::min(ow, w + pad - kx);
                for (int ox = xs; ox < std::min(lo, xe); ++ox)
                    orow[ox] += wv * rows[ky][ox + kx - pad];
                for (int ox = std::max(hi, xs); ox < xe; ++ox)
                    orow[ox] += wv * rows[ky][ox + kx - pad];
            }
    }
}

void conv_forward(const ConvDims& d, const float* __restrict in, const float* __restrict ker,
                  const float* __restrict bias, float* __restrict out) {
    const size_t isz = static_cast<size_t>(d.h) * d.w;
    const size_t osz = static_cast<size_t>(d.oh) * d.ow;
    for (int oc = 0; oc < d.oc; ++oc)
        std::fill(out + oc * osz, out + (oc + 1) * osz, bias ? bias[oc] : 0.0f);

    if (d.k == 1 && d.pad == 0) {
        for (int oc = 0; oc < d.oc; ++oc) {
            float* __restrict op = out + oc * osz;
            for (int ic = 0; ic < d.ic; ++ic) {
                const float wv = ker[static_cast<size_t>(oc) * d.ic + ic];
                const float* __restrict ip = in + ic * isz;
                for (size_t i = 0; i < osz; ++i) op[i] += wv * ip[i];
            }
        }
        return;
    }
    if (d.k == 3) {
        for (int oc = 0; oc < d.oc; ++oc) {
            float* oplane = out + oc * osz;
            for (int ic = 0; ic < d.ic; ++ic) {
                const float* iplane = in + ic * isz;
                const float* kb = ker + (static_cast<size_t>(oc) * d.ic + ic) * 9;
                for (int ky = 0; ky < 3; ++ky)
                    for (int oy = 0; oy < d.oh; ++oy) {
                        int iy = oy + ky - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        conv3_row(oplane + static_cast<size_t>(oy) * d.ow,
                                  iplane + static_cast<size_t>(iy) * d.w, kb + 3 * ky, d.ow, d.w,
                                  d.pad);
                    }
            }
        }
        return;
    }

    for (int oc = 0; oc < d.oc; ++oc) {
        float* oplane = out + oc * osz;
        for (int ic = 0; ic < d.ic; ++ic) {
            const float* iplane = in + ic * isz;
            const float* kbase = ker + ((static_cast<size_t>(oc) * d.ic + ic) * d.k) * d.k;
            for (int ky = 0; ky < d.k; ++ky) {
                for (int kx = 0; kx < d.k; ++kx) {
                    float wv = kbase[ky * d.k + kx];
                    int xs = std::max(0, d.pad - kx);
                    int xe = std::min(d.ow, d.w + d.pad - kx);
                    if (xs >= xe) continue;
                    for (int oy = 0; oy < d.oh; ++oy) {
                        int iy = oy + ky - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        float* __restrict orow = oplane + static_cast<size_t>(oy) * d.ow;
                        const float* __restrict irow =
                            iplane + static_cast<size_t>(iy) * d.w + (xs + kx - d.pad);
                        for (int ox = xs; ox < xe; ++ox) orow[ox] += wv * irow[ox - xs];
                    }
                }
            }
        }
    }
}

// Three fused row dots: s[kx] += sum_ox g[ox] * in[ox + kx - pad].
void conv3_row_dots(const float* __restrict grow, const float* __restrict irow, int ow, int w,
                    int pad, float* __restrict s) {
    int lo = std::min(std::max(0, pad), ow);
    int hi = std::max(std::min(ow, w + pad - 2), lo);
    const float* ir = irow - pad;
    float s0 = 0.0f, s1 = 0.0f, s2 = 0.0f;
    for (int ox = lo; ox < hi; ++ox) {
        float g = grow[ox];
        s0 += g * ir[ox];
        s1 += g * ir[ox + 1];
        s2 += g * ir[ox + 2];
    }
    s[0] += s0;
    s[1] += s1;
    s[2] += s2;
    for (int kx = 0; kx < 3; ++kx) {
        int xs = std::max(0, pad - kx);
        int xe = std::min(ow, w + pad - kx);
        float acc = 0.0f;
        for (int ox = xs; ox < std::min(lo, xe); ++ox) acc += grow[ox] * irow[ox + kx - pad];
        for (int ox = std::max(hi, xs); ox < xe; ++ox) acc += grow[ox] * irow[ox + kx - pad];
        s[kx] += acc;
    }
}

void conv_backward(const TapeNode& n) {
    TensorImpl* in = n.a;
    TensorImpl* ker = n.b;
    TensorImpl* bias = n.c;
    ConvDims d;
    d.ic = in->shape[0];
    d.h = in->shape[1];
    d.w = in->shape[2];
    d.oc = ker->shape[0];
    d.k = ker->shape[2];
    d.pad = n.i0;
    d.oh = n.out->shape[1];
    d.ow = n.out->shape[2];

    const std::vector<float>& go = n.out->grad;
    bool need_din = needs_grad(in);
    if (need_din) ensure_grad(in);
    ensure_grad(ker);
    if (bias) ensure_grad(bias);

    const size_t isz = static_cast<size_t>(d.h) * d.w;
    const size_t osz = static_cast<size_t>(d.oh) * d.ow;

    if (bias) {
        for (int oc = 0; oc < d.oc; ++oc) {
            const float* gplane = go.data() + oc * osz;
            float acc = 0.0f;
            for (size_t i = 0; i < osz; ++i) acc += gplane[i];
            bias->grad[oc] += acc;
        }
    }

    if (d.k == 1 && d.pad == 0) {
        for (int oc = 0; oc < d.oc; ++oc) {
            const float* __restrict gplane = go.data() + oc * osz;
            for (int ic = 0; ic < d.ic; ++ic) {
                const float wv = ker->data[static_cast<size_t>(oc) * d.ic + ic];
                const float* __restrict ip = in->data.data() + ic * isz;
                float dot = 0.0f;
                if (need_din) {
                    float* __restrict dip = in->grad.data() + ic * isz;
                    for (size_t i = 0; i < osz; ++i) {
                        dip[i] += wv * gplane[i];
                        dot += gplane[i] * ip[i];
                    }
                } else {
                    for (size_t i = 0; i < osz; ++i) dot += gplane[i] * ip[i];
                }
                ker->grad[static_cast<size_t>(oc) * d.ic + ic] += dot;
            }
        }
        return;
    }

    if (d.k == 3) {
        int bpad = 2 - d.pad; // din = dout (*) rot180(K), a same-family stencil
        for (int oc = 0; oc < d.oc; ++oc) {
            const float* gplane = go.data() + oc * osz;
            for (int ic = 0; ic < d.ic; ++ic) {
                const float* iplane = in->data.data() + ic * isz;
                float* diplane = need_din ? in->grad.data() + ic * isz : nullptr;
                size_t kbase = (static_cast<size_t>(oc) * d.ic + ic) * 9;

                // input gradient via the rotated-kernel stencil
                if (need_din) {
                    float rot9[9];
                    for (int ry = 0; ry < 3; ++ry)
                        for (int rx = 0; rx < 3; ++rx)
                            rot9[ry * 3 + rx] = ker->data[kbase + (2 - ry) * 3 + (2 - rx)];
                    for (int ry = 0; ry < 3; ++ry)
                        for (int iy = 0; iy < d.h; ++iy) {
                            int gy = iy + ry - bpad;
                            if (gy < 0 || gy >= d.oh) continue;
                            conv3_row(diplane + static_cast<size_t>(iy) * d.w,
                                      gplane + static_cast<size_t>(gy) * d.ow, rot9 + 3 * ry,
                                      d.w, d.ow, bpad);
                        }
                }

                // kernel gradient: three fused dots per kernel row
                for (int ky = 0; ky < 3; ++ky) {
                    float s[3] = {0.0f, 0.0f, 0.0f};
                    for (int oy = 0; oy < d.oh; ++oy) {
                        int iy = oy + ky - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        conv3_row_dots(gplane + static_cast<size_t>(oy) * d.ow,
                                       iplane + static_cast<size_t>(iy) * d.w, d.ow, d.w, d.pad,
                                       s);
                    }
                    for (int kx = 0; kx < 3; ++kx) ker->grad[kbase + ky * 3 + kx] += s[kx];
                }
            }
        }
        return;
    }

    for (int oc = 0; oc < d.oc; ++oc) {
        const float* gplane = go.data() + oc * osz;
        for (int ic = 0; ic < d.ic; ++ic) {
            const float* iplane = in->data.data() + ic * isz;
            float* diplane = need_din ? in->grad.data() + ic * isz : nullptr;
            size_t kbase = ((static_cast<size_t>(oc) * d.ic + ic) * d.k) * d.k;
            for (int ky = 0; ky < d.k; ++ky) {
                for (int kx = 0; kx < d.k; ++kx) {
                    float wv = ker->data[kbase + ky * d.k + kx];
                    float wacc = 0.0f;
                    int xs = std::max(0, d.pad - kx);
                    int xe = std::min(d.ow, d.w + d.pad - kx);
                    if (xs >= xe) continue;
                    for (int oy = 0; oy < d.oh; ++oy) {
                        int iy = oy + ky - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        const float* __restrict grow = gplane + static_cast<size_t>(oy) * d.ow;
                        const float* __restrict irow =
                            iplane + static_cast<size_t>(iy) * d.w + (xs + kx - d.pad);
                        float dot = 0.0f;
                        if (need_din) {
                            float* __restrict dirow =
                                diplane + static_cast<size_t>(iy) * d.w + (xs + kx - d.pad);
                            for (int ox = xs; ox < xe; ++ox) {
                                dirow[ox - xs] += wv * grow[ox];
                                dot += grow[ox] * irow[ox - xs];
                            }
                        } else {
                            for (int ox = xs; ox < xe; ++ox) dot += grow[ox] * irow[ox - xs];
                        }
                        wacc += dot;
                    }
                    ker->grad[kbase + ky * d.k + kx] += wacc;
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int padding) {
    ConvDims d = conv_dims(input, kernel, bias, padding);
    bool track = should_record({&input, &kernel, &bias});
    Tensor out = make_output({d.oc, d.oh, d.ow}, Op::Conv2d, track);
    conv_forward(d, input.data(), kernel.data(), bias.defined() ? bias.data() : nullptr,
                 out.data());
    check_finite_forward(*out.impl(), Op::Conv2d);
    if (track) record_node(Op::Conv2d, input, kernel, bias, out, padding);
    return out;
}

// ---------------------------------------------------------------------------
// pooling / resampling

Tensor avg_pool2(const Tensor& a) {
    require(a.shape().size() == 3, "avg_pool2: input must be [C,H,W]");
    int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
    require(h % 2 == 0 && w % 2 == 0, "avg_pool2: H and W must be even, got " + shape_str(a.shape()));
    bool track = should_record({&a});
    Tensor out = make_output({c, h / 2, w / 2}, Op::AvgPool2, track);
    const float* pa = a.data();
    float* po = out.data();
    int oh = h / 2, ow = w / 2;
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                const float* p = pa + (static_cast<size_t>(ci) * h + 2 * y) * w + 2 * x;
                po[(static_cast<size_t>(ci) * oh + y) * ow + x] =
                    0.25f * (p[0] + p[1] + p[w] + p[w + 1]);
            }
    if (track) record_node(Op::AvgPool2, a, Tensor(), Tensor(), out);
    return out;
}

Tensor upsample2(const Tensor& a) {
    CPL_REQUIRE(a.shape().size() == 3, "upsample2: input must be [C,H,W]");
    int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
    bool track = should_record({&a});
    Tensor out = make_output({c, h * 2, w * 2}, Op::Upsample2, track);
    const float* pa = a.data();
    float* po = out.data();
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < 2 * h; ++y)
            for (int x = 0; x < 2 * w; ++x)
                po[(static_cast<size_t>(ci) * 2 * h + y) * 2 * w + x] =
                    pa[(static_cast<size_t>(ci) * h + y / 2) * w + x / 2];
    if (track) record_node(Op::Upsample2, a, Tensor(), Tensor(), out);
    return out;
}

namespace {

void pool_backward(const TapeNode& n) {
    TensorImpl* a = n.a;
    if (!needs_grad(a)) return;
    ensure_grad(a);
    int c = a->shape[0], h = a->shape[1], w = a->shape[2];
    int oh = h / 2, ow = w / 2;
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                float g = 0.25f * n.out->grad[(static_cast<size_t>(ci) * oh + y) * ow + x];
                float* p = a->grad.data() + (static_cast<size_t>(ci) * h + 2 * y) * w + 2 * x;
                p[0] += g;
                p[1] += g;
                p[w] += g;
                p[w + 1] += g;
            }
}

void upsample_backward(const TapeNode& n) {
    TensorImpl* a = n.a;
    ensure_grad(a);
    int c = a->shape[0], h = a->shape[1], w = a->shape[2];
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < 2 * h; ++y)
            for (int x = 0; x < 2 * w; ++x)
                a->grad[(static_cast<size_t>(ci) * h + y / 2) * w + x / 2] +=
                    n.out->grad[(static_cast<size_t>(ci) * 2 * h + y) * 2 * w + x];
}

} // namespace

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
    bool track = should_record({&a});
    Tensor out = make_output({1}, Op::Sum, track);
    const float* pa = a.data();
    float acc = 0.0f;
    for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
    out.data()[0] = acc;
    check_finite_forward(*out.impl(), Op::Sum);
    if (track) record_node(Op::Sum, a, Tensor(), Tensor(), out);
    return out;
}

Tensor select(const Tensor& a, int64_t flat) {
    CPL_REQUIRE(flat >= 0 && flat < a.numel(), "select: index " + std::to_string(flat) +
                                                   " out of range for " + shape_str(a.shape()));
    bool track = should_record({&a});
    Tensor out = make_output({1}, Op::Select, track);
    out.data()[0] = a.data()[flat];
    if (track) record_node(Op::Select, a, Tensor(), Tensor(), out, static_cast<int>(flat));
    return out;
}

Tensor gather(const Tensor& a, std::vector<int32_t> flat_indices) {
    require(!flat_indices.empty(), "gather: empty index list");
    for (int32_t i : flat_indices)
        CPL_REQUIRE(i >= 0 && i < a.numel(), "gather: index " + std::to_string(i) +
                                                 " out of range for " + shape_str(a.shape()));
    bool track = should_record({&a});
    Tensor out = make_output({static_cast<int>(flat_indices.size())}, Op::Gather, track);
    const float* pa = a.data();
    float* po = out.data();
    for (size_t i = 0; i < flat_indices.size(); ++i) po[i] = pa[flat_indices[i]];
    if (track) {
        TapeNode n;
        n.op = Op::Gather;
        n.a = a.impl();
        n.out = out.impl();
        n.indices = std::make_shared<std::vector<int32_t>>(std::move(flat_indices));
        Tape::current()->record(n, a.impl_ptr(), nullptr, nullptr, out.impl_ptr());
    }
    return out;
}

Tensor maximum(const Tensor& a, const Tensor& b) { return add(a, relu(sub(b, a))); }
Tensor minimum(const Tensor& a, const Tensor& b) { return sub(a, relu(sub(a, b))); }

// ---------------------------------------------------------------------------
// backward sweep

void Tape::backward(const Tensor& loss) {
    CPL_REQUIRE(!backward_done_, "backward already called on this tape; build a fresh tape per step");
    require(loss.defined(), "backward: undefined loss");
    require(loss.numel() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    require(std::isfinite(loss.item()), "backward: loss is not finite");

    TensorImpl* root = loss.impl();
    bool on_tape = false;
    for (const TapeNode& n : nodes_)
        if (n.out == root) { on_tape = true; break; }
    require(on_tape, "backward: loss was not produced by this tape");

    backward_done_ = true;
    ensure_grad(root);
    root->grad[0] = 1.0f;

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        const TapeNode& n = *it;
        if (n.out->grad.empty()) continue; // not reachable from the loss
        for (float g : n.out->grad)
            if (!std::isfinite(g))
                fail(std::string("non-finite gradient at op '") + op_name(n.op) + "'");
        switch (n.op) {
            case Op::Add:
            case Op::Sub:
            case Op::Mul:
            case Op::Div:
                binary_backward(n);
                break;
            case Op::Relu:
            case Op::Sigmoid:
            case Op::Square:
            case Op::SqrtProtected:
            case Op::Atan:
                unary_backward(n);
                break;
            case Op::Conv2d:
                conv_backward(n);
                break;
            case Op::AvgPool2:
                pool_backward(n);
                break;
            case Op::Upsample2:
                upsample_backward(n);
                break;
            case Op::Sum: {
                ensure_grad(n.a);
                float g = n.out->grad[0];
                for (size_t i = 0; i < n.a->grad.size(); ++i) n.a->grad[i] += g;
                break;
            }
            case Op::Select: {
                ensure_grad(n.a);
                n.a->grad[static_cast<size_t>(n.i0)] += n.out->grad[0];
                break;
            }
            case Op::Gather: {
                ensure_grad(n.a);
                const std::vector<int32_t>& idx = *n.indices;
                for (size_t i = 0; i < idx.size(); ++i)
                    n.a->grad[static_cast<size_t>(idx[i])] += n.out->grad[i];
                break;
            }
        }
    }
}

} // namespace cpl
