#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "maml/tensor.hpp"

namespace maml::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; invalid when default-constructed.
struct Value {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape. Nodes are created in forward order; backward() runs the
// recorded closures in reverse creation order. With grad_enabled=false the
// same forward kernels run but nothing is recorded (inference mode).
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Value leaf(Tensor v, bool requires_grad);

    const Tensor& val(Value v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    Tensor& mutable_val(Value v) { return nodes_[static_cast<size_t>(v.id)].value; }

    // Gradient of a node; allocated (zero) on first access.
    Tensor& grad(Value v);
    bool has_grad(Value v) const { return !nodes_[static_cast<size_t>(v.id)].grad.empty(); }
    bool requires_grad(Value v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }

    // Seeds d(root)/d(root) = 1 (root must be a single-element tensor) and
    // propagates to every requires-grad node.
    void backward(Value root);

    bool grad_enabled() const { return grad_enabled_; }
    size_t size() const { return nodes_.size(); }

    struct Node {
        Tensor value;
        Tensor grad;  // empty until touched
        bool needs_grad = false;
        std::function<void(Tape&)> back;  // empty for leaves and constants
    };

    Value emit(Tensor value, bool requires_grad);
    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }

private:
    bool grad_enabled_;
    std::deque<Node> nodes_;  // deque: references stay valid as the tape grows
};

// --- graph ops -------------------------------------------------------------

// 3D convolution, kernel size taken from w (Co x Ci x K x K x K), zero padding
// K/2, stride 1 or 2. Bias b is (Co).
Value conv3d(Value x, Value w, Value b, int stride = 1);
// Nearest-neighbour 2x upsampling of a (C,D,H,W) tensor.
Value upsample_nearest2(Value x);
Value concat_channels(const std::vector<Value>& xs);
Value instance_norm(Value x, double eps);
Value leaky_relu(Value x, double slope);
Value sigmoid(Value x);
Value softmax_channels(Value x);
// att is (1,D,H,W), feat is (C,D,H,W); result feat scaled voxel-wise by att.
Value broadcast_mul(Value att, Value feat);
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value div(Value a, Value b);
Value affine(Value x, double scale, double shift);
Value select_channel(Value x, int c);
Value sum_all(Value x);
Value dot_const(Value x, Tensor weights);
Value log_clamped(Value x, double floor_value);
Value constant(Tape& t, Tensor v);
Value scalar_const(Tape& t, double v);

// --- eager helpers (same kernels, no tape) ----------------------------------

Tensor eval_conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1);
Tensor eval_instance_norm(const Tensor& x, double eps);
Tensor eval_leaky_relu(const Tensor& x, double slope);
Tensor eval_sigmoid(const Tensor& x);
Tensor eval_softmax_channels(const Tensor& x);
Tensor eval_upsample_nearest2(const Tensor& x);

}  // namespace maml::ad
