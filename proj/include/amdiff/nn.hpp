#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "amdiff/common.hpp"

namespace amdiff::nn {

/// Tensor shape. Spatial tensors use {C, D, H, W} with W (the volume x axis)
/// fastest-varying, matching the project-wide flat voxel order. Scalars are {1}.
using Shape = std::vector<int>;

long long shape_numel(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);
std::string shape_str(const Shape& s);

struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::function<void()> backprop;  // adds into parent grads; empty for leaves

    long long numel() const { return static_cast<long long>(val.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(val.size(), 0.0);
    }
};

using Var = std::shared_ptr<Node>;

/// Reverse-mode tape. Nodes are appended in construction order, which is a
/// topological order of the forward computation; backward simply walks the
/// list in reverse. With recording disabled the ops run forward-only and
/// keep no closures (inference mode).
class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    Var constant(Shape shape, std::vector<double> v);
    Var scalar(double v);
    Var leaf(Shape shape, std::vector<double> v, bool requires_grad = true);

    /// Seeds d(loss)/d(loss) = 1 and propagates to every recorded node.
    void backward(const Var& loss);

    Var adopt(Shape shape, bool requires_grad, std::function<void()> backprop);

    size_t node_count() const { return nodes_.size(); }

private:
    std::vector<Var> nodes_;
    bool recording_;
};

// ---- elementwise ----
Var add(Graph& g, const Var& a, const Var& b);
Var sub(Graph& g, const Var& a, const Var& b);
Var mul(Graph& g, const Var& a, const Var& b);
Var div(Graph& g, const Var& a, const Var& b);
Var neg(Graph& g, const Var& a);
Var add_scalar(Graph& g, const Var& a, double c);
Var mul_scalar(Graph& g, const Var& a, double c);
Var abs(Graph& g, const Var& a);
Var log(Graph& g, const Var& a);                      // requires positive inputs
Var pow_const(Graph& g, const Var& a, double p);      // requires a >= 0 and p >= 1
Var clamp(Graph& g, const Var& a, double lo, double hi);
Var sigmoid(Graph& g, const Var& a);
Var silu(Graph& g, const Var& a);
Var tanh(Graph& g, const Var& a);
Var detach(Graph& g, const Var& a);  // stop-gradient copy

// ---- reductions / reshaping ----
Var sum_all(Graph& g, const Var& a);   // -> {1}
Var mean_all(Graph& g, const Var& a);  // -> {1}
Var reshape(Graph& g, const Var& a, Shape s);

// ---- channel/spatial structure (tensors {C, D, H, W}) ----
Var concat_channels(Graph& g, const Var& a, const Var& b);
Var slice_channels(Graph& g, const Var& a, int c0, int c1);  // channels [c0, c1)
Var add_channel_bias(Graph& g, const Var& x, const Var& bias);   // bias {C}
Var scale_channels(Graph& g, const Var& x, const Var& scale);    // scale {C}
Var mul_spatial(Graph& g, const Var& x, const Var& gate);        // gate {1, D, H, W}
Var global_avg_pool(Graph& g, const Var& x);                     // -> {C}
Var softmax_channels(Graph& g, const Var& x);  // softmax over C at each voxel
Var upsample_nearest2(Graph& g, const Var& x);

/// 3D convolution, kernel {Cout, Cin, K, K, K}, bias {Cout}, symmetric zero padding.
Var conv3d(Graph& g, const Var& x, const Var& w, const Var& b, int stride, int pad);

/// Group normalization over channel groups; gamma/beta are {C}. group_size
/// caps the number of channels normalized together.
Var group_norm(Graph& g, const Var& x, const Var& gamma, const Var& beta, int group_size,
               double eps = 1e-5);

// ---- dense / matrix ----
Var linear(Graph& g, const Var& x, const Var& w, const Var& b);  // x {n}, w {m, n}, b {m}
Var matmul(Graph& g, const Var& a, const Var& b, bool trans_a, bool trans_b);
Var softmax_rows(Graph& g, const Var& x);  // x {m, n}, softmax along each row

/// Reverses each channel's sequence: x {C, N} -> y with y[c, k] = x[c, N-1-k].
Var reverse_seq(Graph& g, const Var& x);

/// Diagonal state-space scan over flattened voxel order. x {C, N};
/// a, b, c {C, S}; d {C}. Per channel ch and state j:
///   h_k = a[ch,j] * h_{k-1} + b[ch,j] * x[ch,k]   (h_0 = 0)
///   y[ch,k] = sum_j c[ch,j] * h_k + d[ch] * x[ch,k]
/// With S == 1 this is the scalar recurrence.
Var ssm_scan(Graph& g, const Var& x, const Var& a, const Var& b, const Var& c, const Var& d);

}  // namespace amdiff::nn
