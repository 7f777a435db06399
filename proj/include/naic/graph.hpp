#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "naic/tensor.hpp"

namespace naic {

// Parameter-name -> gradient tensor. Ordered so that reductions over it are
// deterministic.
using GradMap = std::map<std::string, Tensor>;

// Reverse-mode tape over dense tensors. Nodes are appended in topological
// order by construction; backward() walks them in exact reverse order.
// Tensors held by nodes are never mutated after creation.
//
// Op set: matmul (with transpose flags), add (same-shape or row-broadcast),
// scale, gelu, softmax (last axis), layer_norm (last axis, eps 1e-5),
// embedding gather, concat, slice, reduce_sum, reduce_mean, log,
// cross-entropy-with-logits.
class Graph {
public:
    static constexpr double kLayerNormEps = 1e-5;

    // --- leaves -----------------------------------------------------------
    int param(const std::string& name, Tensor value);
    int input(Tensor value);  // constant leaf, no gradient tracked

    // --- forward ops ------------------------------------------------------
    int matmul(int a, int b, bool trans_a = false, bool trans_b = false);
    int add(int a, int b);          // b may be a row vector (1 x cols) broadcast over rows of a
    int scale(int a, double c);
    int gelu(int a);                // exact erf form
    int softmax(int a);             // rows of the last axis; 2-D input
    int layer_norm(int x, int gain, int bias);  // normalizes last axis, then affine
    int embed(int table, std::vector<int> ids);
    int concat(const std::vector<int>& parts, int axis);  // 2-D, axis 0 or 1
    int slice(int a, int axis, int start, int len);       // 2-D, axis 0 or 1
    int reduce_sum(int a);          // full reduction to scalar
    int reduce_mean(int a);
    int log(int a);                 // elementwise; inputs must be positive
    // Scalar loss: -sum_i weights[i] * log softmax(logits_i)[targets[i]].
    // Uniform weight 1 when weights is empty.
    int xent_logits(int logits, std::vector<int> targets, std::vector<double> weights = {});

    // --- access -----------------------------------------------------------
    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    size_t size() const { return nodes_.size(); }
    // Drops all nodes appended after mark. Parameters registered before mark survive.
    void rollback(size_t mark);

    const std::map<std::string, int>& params() const { return param_ids_; }

    // --- backward ---------------------------------------------------------
    // Gradients of a scalar loss for every registered parameter; parameters
    // not reachable from the loss get zero tensors. Rejects non-scalar loss.
    GradMap backward(int loss);
    // Same walk but seeded with an arbitrary cotangent at `node`.
    GradMap backward_from(int node, const Tensor& seed);

private:
    enum class Op {
        Leaf, Matmul, Add, Scale, Gelu, Softmax, LayerNorm, Embed,
        Concat, Slice, ReduceSum, ReduceMean, Log, XentLogits
    };

    struct Node {
        Op op = Op::Leaf;
        std::vector<int> inputs;
        Tensor value;
        bool grad_tracked = false;   // param or depends on one
        bool is_param = false;
        bool trans_a = false, trans_b = false;
        bool broadcast_b = false;
        double scalar = 0.0;
        int axis = 0, start = 0, len = 0;
        std::vector<int> ids;          // embed ids / xent targets
        std::vector<double> weights;   // xent per-row weights
        std::string name;
    };

    int push(Node n);
    bool tracked(std::initializer_list<int> ids) const;
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    GradMap run_backward(int seed_node, const Tensor& seed);

    std::vector<Node> nodes_;
    std::map<std::string, int> param_ids_;
};

// Kernels shared by forward and backward; exposed for inference-style reuse.
namespace kernels {
// C = op_a(A) * op_b(B) where op_x transposes when the flag is set.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b);
Tensor softmax_rows(const Tensor& logits);
void softmax_row_inplace(std::span<double> row);
double log_sum_exp(std::span<const double> row);
}  // namespace kernels

// Central finite differences against a supplied analytic gradient.
// Returns max over sampled coordinates of |analytic - numeric| / max(1e-8, |numeric|).
// Rejects eps <= 0 and loss functions whose two evaluations at the same
// point disagree.
double finite_difference_check(
    const std::function<double(const std::map<std::string, Tensor>&)>& loss_fn,
    const std::map<std::string, Tensor>& params,
    const GradMap& analytic,
    double eps,
    int max_coords_per_param = 64,
    uint64_t seed = 0);

}  // namespace naic
