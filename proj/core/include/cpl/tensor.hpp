#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cpl/error.hpp"

namespace cpl {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Denominators and sqrt arguments are clamped at this magnitude so degenerate
// boxes (zero width/height) never produce NaN/Inf.
inline constexpr float kProtectEps = 1e-12f;

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad; // allocated lazily by backward / zero_grad
    bool requires_grad = false;
    const char* op = "leaf"; // producing op, for diagnostics
};

// Value-semantics handle onto a shared float buffer. Copying a Tensor aliases
// the storage; ops return fresh tensors recorded on the active Tape.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, float value, bool requires_grad = false);
    static Tensor scalar(float value);
    static Tensor from_data(const Shape& shape, std::vector<float> data,
                            bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t numel() const;
    float* data();
    const float* data() const;
    float item() const; // requires numel()==1
    float at(int64_t flat_index) const;

    bool requires_grad() const;
    void set_requires_grad(bool v);
    bool has_grad() const;
    const std::vector<float>& grad() const; // throws when absent
    void zero_grad();                       // allocates + clears
    void clear_grad();                      // drops the buffer entirely

    // Deep copy with no grad tracking; used for weight snapshots.
    Tensor clone_detached() const;

    TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

enum class Op : uint8_t {
    Add, Sub, Mul, Div,
    Relu, Sigmoid, Square, SqrtProtected, Atan,
    Conv2d, AvgPool2, Upsample2,
    Sum, Select, Gather,
};

const char* op_name(Op op);

struct TapeNode {
    Op op;
    TensorImpl* a = nullptr;
    TensorImpl* b = nullptr;   // rhs / kernel
    TensorImpl* c = nullptr;   // conv bias
    TensorImpl* out = nullptr;
    int i0 = 0;                // padding or flat index
    std::shared_ptr<std::vector<int32_t>> indices; // gather only
};

// Ordered record of primitive operations. Creation order is a topological
// order, so the backward sweep is a single reverse pass that visits each node
// exactly once. A tape is confined to one thread; its constructor installs it
// as that thread's recording target.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Populates grads on every requires_grad tensor reachable from `loss`.
    // Requires a finite scalar produced by this tape; second call throws.
    void backward(const Tensor& loss);

    size_t size() const { return nodes_.size(); }
    bool backward_done() const { return backward_done_; }

    static Tape* current(); // nullptr when no tape is recording on this thread

    void record(TapeNode node, const std::shared_ptr<TensorImpl>& a,
                const std::shared_ptr<TensorImpl>& b,
                const std::shared_ptr<TensorImpl>& c,
                const std::shared_ptr<TensorImpl>& out);

private:
    std::vector<TapeNode> nodes_;
    std::vector<std::shared_ptr<TensorImpl>> retained_;
    Tape* prev_ = nullptr;
    bool backward_done_ = false;
};

// Elementwise binary ops; shapes must match exactly or one side must be a
// single-element tensor (scalar broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b); // protected denominator

// Elementwise unary ops.
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt_protected(const Tensor& a);
Tensor atan(const Tensor& a);

// input [C,H,W], kernel [OC,IC,k,k] with k odd, optional bias [OC]; stride 1.
// Output is [OC, H+2p-k+1, W+2p-k+1].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int padding);

Tensor avg_pool2(const Tensor& a); // 2x2 stride-2 average; H,W must be even
Tensor upsample2(const Tensor& a); // nearest-neighbour 2x

Tensor sum(const Tensor& a);                  // -> scalar
Tensor select(const Tensor& a, int64_t flat); // -> scalar, one element
Tensor gather(const Tensor& a, std::vector<int32_t> flat_indices); // -> [n] vector

// Compositions of the primitives above (no new tape node kinds).
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

} // namespace cpl
