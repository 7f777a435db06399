#include "naic/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace naic {

namespace {

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

void require_2d(const std::string& op, const Tensor& t) {
    if (t.shape.size() != 2) shape_error(op, "expected 2-D tensor, got " + t.shape_str());
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

}  // namespace

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    require_2d("matmul", a);
    require_2d("matmul", b);
    const int m = trans_a ? a.cols() : a.rows();
    const int k = trans_a ? a.rows() : a.cols();
    const int kb = trans_b ? b.cols() : b.rows();
    const int n = trans_b ? b.rows() : b.cols();
    if (k != kb)
        shape_error("matmul", "inner dimensions disagree: " + a.shape_str() + (trans_a ? "^T" : "") + " vs " +
                                  b.shape_str() + (trans_b ? "^T" : ""));
    Tensor c = Tensor::zeros({m, n});
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* pc = c.data.data();
    const int lda = a.cols();
    const int ldb = b.cols();
    if (!trans_a && !trans_b) {
        for (int i = 0; i < m; ++i) {
            const double* arow = pa + static_cast<size_t>(i) * lda;
            double* crow = pc + static_cast<size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = pb + static_cast<size_t>(p) * ldb;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {
        for (int i = 0; i < m; ++i) {
            const double* arow = pa + static_cast<size_t>(i) * lda;
            double* crow = pc + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const double* brow = pb + static_cast<size_t>(j) * ldb;
                double acc = 0.0;
                for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] = acc;
            }
        }
    } else if (trans_a && !trans_b) {
        for (int p = 0; p < k; ++p) {
            const double* arow = pa + static_cast<size_t>(p) * lda;  // row p of a holds column values
            const double* brow = pb + static_cast<size_t>(p) * ldb;
            for (int i = 0; i < m; ++i) {
                const double av = arow[i];
                double* crow = pc + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        for (int i = 0; i < m; ++i) {
            double* crow = pc + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const double* brow = pb + static_cast<size_t>(j) * ldb;
                double acc = 0.0;
                for (int p = 0; p < k; ++p) acc += pa[static_cast<size_t>(p) * lda + i] * brow[p];
                crow[j] = acc;
            }
        }
    }
    return c;
}

double log_sum_exp(std::span<const double> row) {
    double mx = row[0];
    for (double x : row) mx = std::max(mx, x);
    double s = 0.0;
    for (double x : row) s += std::exp(x - mx);
    return mx + std::log(s);
}

void softmax_row_inplace(std::span<double> row) {
    double mx = row[0];
    for (double x : row) mx = std::max(mx, x);
    double s = 0.0;
    for (double& x : row) {
        x = std::exp(x - mx);
        s += x;
    }
    for (double& x : row) x /= s;
}

Tensor softmax_rows(const Tensor& logits) {
    require_2d("softmax", logits);
    Tensor out = logits;
    for (int r = 0; r < out.rows(); ++r) softmax_row_inplace(out.row(r));
    return out;
}

}  // namespace kernels

// --------------------------------------------------------------------------
// node construction
// --------------------------------------------------------------------------

int Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

bool Graph::tracked(std::initializer_list<int> ids) const {
    for (int id : ids)
        if (node(id).grad_tracked) return true;
    return false;
}

int Graph::param(const std::string& name, Tensor value) {
    if (param_ids_.count(name))
        throw std::invalid_argument("Graph::param: duplicate parameter name '" + name + "'");
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    n.grad_tracked = true;
    n.is_param = true;
    n.name = name;
    int id = push(std::move(n));
    param_ids_[name] = id;
    return id;
}

int Graph::input(Tensor value) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    return push(std::move(n));
}

int Graph::matmul(int a, int b, bool trans_a, bool trans_b) {
    Node n;
    n.op = Op::Matmul;
    n.inputs = {a, b};
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    n.value = kernels::matmul(value(a), value(b), trans_a, trans_b);
    n.grad_tracked = tracked({a, b});
    return push(std::move(n));
}

int Graph::add(int a, int b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    Node n;
    n.op = Op::Add;
    n.inputs = {a, b};
    n.grad_tracked = tracked({a, b});
    if (ta.same_shape(tb)) {
        n.value = ta;
        for (size_t i = 0; i < tb.data.size(); ++i) n.value.data[i] += tb.data[i];
    } else if (ta.shape.size() == 2 && tb.shape.size() == 2 && tb.rows() == 1 && tb.cols() == ta.cols()) {
        n.broadcast_b = true;
        n.value = ta;
        for (int r = 0; r < ta.rows(); ++r)
            for (int c = 0; c < ta.cols(); ++c) n.value.at(r, c) += tb.at(0, c);
    } else {
        shape_error("add", "shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    }
    return push(std::move(n));
}

int Graph::scale(int a, double c) {
    Node n;
    n.op = Op::Scale;
    n.inputs = {a};
    n.scalar = c;
    n.value = value(a);
    for (double& x : n.value.data) x *= c;
    n.grad_tracked = tracked({a});
    return push(std::move(n));
}

int Graph::gelu(int a) {
    Node n;
    n.op = Op::Gelu;
    n.inputs = {a};
    n.value = value(a);
    for (double& x : n.value.data) x = gelu_fwd(x);
    n.grad_tracked = tracked({a});
    return push(std::move(n));
}

int Graph::softmax(int a) {
    Node n;
    n.op = Op::Softmax;
    n.inputs = {a};
    n.value = kernels::softmax_rows(value(a));
    n.grad_tracked = tracked({a});
    return push(std::move(n));
}

int Graph::layer_norm(int x, int gain, int bias) {
    const Tensor& tx = value(x);
    const Tensor& tg = value(gain);
    const Tensor& tb = value(bias);
    require_2d("layer_norm", tx);
    const int cols = tx.cols();
    if (tg.shape != std::vector<int>{1, cols} || tb.shape != std::vector<int>{1, cols})
        shape_error("layer_norm", "gain/bias must be (1x" + std::to_string(cols) + "), got " + tg.shape_str() +
                                      " and " + tb.shape_str());
    Node n;
    n.op = Op::LayerNorm;
    n.inputs = {x, gain, bias};
    n.value = Tensor::zeros(tx.shape);
    for (int r = 0; r < tx.rows(); ++r) {
        double mean = 0.0;
        for (int c = 0; c < cols; ++c) mean += tx.at(r, c);
        mean /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) {
            const double d = tx.at(r, c) - mean;
            var += d * d;
        }
        var /= cols;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (int c = 0; c < cols; ++c)
            n.value.at(r, c) = (tx.at(r, c) - mean) * inv * tg.at(0, c) + tb.at(0, c);
    }
    n.grad_tracked = tracked({x, gain, bias});
    return push(std::move(n));
}

int Graph::embed(int table, std::vector<int> ids) {
    const Tensor& tt = value(table);
    require_2d("embed", tt);
    for (int id : ids)
        if (id < 0 || id >= tt.rows())
            shape_error("embed", "id " + std::to_string(id) + " out of range for table " + tt.shape_str());
    Node n;
    n.op = Op::Embed;
    n.inputs = {table};
    n.ids = std::move(ids);
    n.value = Tensor::zeros({static_cast<int>(n.ids.size()), tt.cols()});
    for (size_t r = 0; r < n.ids.size(); ++r)
        for (int c = 0; c < tt.cols(); ++c) n.value.at(static_cast<int>(r), c) = tt.at(n.ids[r], c);
    n.grad_tracked = tracked({table});
    return push(std::move(n));
}

int Graph::concat(const std::vector<int>& parts, int axis) {
    if (parts.empty()) shape_error("concat", "no inputs");
    if (axis != 0 && axis != 1) shape_error("concat", "axis must be 0 or 1");
    const Tensor& first = value(parts[0]);
    require_2d("concat", first);
    int rows = first.rows(), cols = first.cols();
    for (size_t i = 1; i < parts.size(); ++i) {
        const Tensor& t = value(parts[i]);
        require_2d("concat", t);
        if (axis == 0 && t.cols() != cols)
            shape_error("concat", "column mismatch " + first.shape_str() + " vs " + t.shape_str());
        if (axis == 1 && t.rows() != rows)
            shape_error("concat", "row mismatch " + first.shape_str() + " vs " + t.shape_str());
        if (axis == 0) rows += t.rows();
        else cols += t.cols();
    }
    if (axis == 0) rows = 0;  // recompute cleanly below
    Node n;
    n.op = Op::Concat;
    n.inputs = parts;
    n.axis = axis;
    if (axis == 0) {
        for (int p : parts) rows += value(p).rows();
        n.value = Tensor::zeros({rows, cols});
        int r0 = 0;
        for (int p : parts) {
            const Tensor& t = value(p);
            for (int r = 0; r < t.rows(); ++r)
                for (int c = 0; c < cols; ++c) n.value.at(r0 + r, c) = t.at(r, c);
            r0 += t.rows();
        }
    } else {
        n.value = Tensor::zeros({rows, cols});
        int c0 = 0;
        for (int p : parts) {
            const Tensor& t = value(p);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < t.cols(); ++c) n.value.at(r, c0 + c) = t.at(r, c);
            c0 += t.cols();
        }
    }
    bool any = false;
    for (int p : parts) any = any || node(p).grad_tracked;
    n.grad_tracked = any;
    return push(std::move(n));
}

int Graph::slice(int a, int axis, int start, int len) {
    const Tensor& t = value(a);
    require_2d("slice", t);
    if (axis != 0 && axis != 1) shape_error("slice", "axis must be 0 or 1");
    const int extent = axis == 0 ? t.rows() : t.cols();
    if (start < 0 || len <= 0 || start + len > extent)
        shape_error("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                                 ") out of bounds for " + t.shape_str());
    Node n;
    n.op = Op::Slice;
    n.inputs = {a};
    n.axis = axis;
    n.start = start;
    n.len = len;
    if (axis == 0) {
        n.value = Tensor::zeros({len, t.cols()});
        for (int r = 0; r < len; ++r)
            for (int c = 0; c < t.cols(); ++c) n.value.at(r, c) = t.at(start + r, c);
    } else {
        n.value = Tensor::zeros({t.rows(), len});
        for (int r = 0; r < t.rows(); ++r)
            for (int c = 0; c < len; ++c) n.value.at(r, c) = t.at(r, start + c);
    }
    n.grad_tracked = tracked({a});
    return push(std::move(n));
}

int Graph::reduce_sum(int a) {
    Node n;
    n.op = Op::ReduceSum;
    n.inputs = {a};
    double s = 0.0;
    for (double x : value(a).data) s += x;
    n.value = Tensor::scalar(s);
    n.grad_tracked = tracked({a});
    return push(std::move(n));
}

int Graph::reduce_mean(int a) {
    Node n;
    n.op = Op::ReduceMean;
    n.inputs = {a};
    const Tensor& t = value(a);
    double s = 0.0;
    for (double x : t.data) s += x;
    n.value = Tensor::scalar(s / static_cast<double>(t.numel()));
    n.grad_tracked = tracked({a});
    return push(std::move(n));
}

int Graph::log(int a) {
    Node n;
    n.op = Op::Log;
    n.inputs = {a};
    n.value = value(a);
    for (double& x : n.value.data) {
        if (!(x > 0.0)) shape_error("log", "input must be positive, got " + std::to_string(x));
        x = std::log(x);
    }
    n.grad_tracked = tracked({a});
    return push(std::move(n));
}

int Graph::xent_logits(int logits, std::vector<int> targets, std::vector<double> weights) {
    const Tensor& tl = value(logits);
    require_2d("xent_logits", tl);
    if (static_cast<int>(targets.size()) != tl.rows())
        shape_error("xent_logits", "targets size " + std::to_string(targets.size()) + " vs logits " + tl.shape_str());
    if (weights.empty()) weights.assign(targets.size(), 1.0);
    if (weights.size() != targets.size())
        shape_error("xent_logits", "weights size " + std::to_string(weights.size()) + " vs targets " +
                                       std::to_string(targets.size()));
    for (int t : targets)
        if (t < 0 || t >= tl.cols())
            shape_error("xent_logits", "target id " + std::to_string(t) + " out of vocab " + std::to_string(tl.cols()));
    Node n;
    n.op = Op::XentLogits;
    n.inputs = {logits};
    n.ids = std::move(targets);
    n.weights = std::move(weights);
    double loss = 0.0;
    for (int r = 0; r < tl.rows(); ++r) {
        const double lse = kernels::log_sum_exp(tl.row(r));
        loss -= n.weights[static_cast<size_t>(r)] * (tl.at(r, n.ids[static_cast<size_t>(r)]) - lse);
    }
    n.value = Tensor::scalar(loss);
    n.grad_tracked = tracked({logits});
    return push(std::move(n));
}

void Graph::rollback(size_t mark) {
    if (mark > nodes_.size()) throw std::invalid_argument("Graph::rollback: mark beyond end");
    for (size_t i = mark; i < nodes_.size(); ++i)
        if (nodes_[i].is_param) param_ids_.erase(nodes_[i].name);
    nodes_.resize(mark);
}

// --------------------------------------------------------------------------
// backward
// --------------------------------------------------------------------------

GradMap Graph::backward(int loss) {
    if (!value(loss).is_scalar())
        throw std::invalid_argument("Graph::backward: loss must be scalar, got " + value(loss).shape_str());
    return run_backward(loss, Tensor::scalar(1.0));
}

GradMap Graph::backward_from(int node_id, const Tensor& seed) {
    if (!seed.same_shape(value(node_id)))
        throw std::invalid_argument("Graph::backward_from: seed shape " + seed.shape_str() + " vs node " +
                                    value(node_id).shape_str());
    return run_backward(node_id, seed);
}

GradMap Graph::run_backward(int seed_node, const Tensor& seed) {
    std::vector<Tensor> grads(static_cast<size_t>(seed_node) + 1);
    auto accum = [&](int id, const Tensor& g) {
        if (!node(id).grad_tracked) return;
        Tensor& slot = grads[static_cast<size_t>(id)];
        if (slot.data.empty()) slot = Tensor::zeros(value(id).shape);
        for (size_t i = 0; i < g.data.size(); ++i) slot.data[i] += g.data[i];
    };
    if (node(seed_node).grad_tracked) grads[static_cast<size_t>(seed_node)] = seed;

    for (int id = seed_node; id >= 0; --id) {
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.grad_tracked || grads[static_cast<size_t>(id)].data.empty()) continue;
        const Tensor& g = grads[static_cast<size_t>(id)];
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Matmul: {
                const Tensor& a = value(n.inputs[0]);
                const Tensor& b = value(n.inputs[1]);
                if (node(n.inputs[0]).grad_tracked) {
                    Tensor da = n.trans_a
                                    ? (n.trans_b ? kernels::matmul(b, g, true, true) : kernels::matmul(b, g, false, true))
                                    : (n.trans_b ? kernels::matmul(g, b, false, false)
                                                 : kernels::matmul(g, b, false, true));
                    accum(n.inputs[0], da);
                }
                if (node(n.inputs[1]).grad_tracked) {
                    Tensor db = n.trans_b
                                    ? (n.trans_a ? kernels::matmul(g, a, true, true) : kernels::matmul(g, a, true, false))
                                    : (n.trans_a ? kernels::matmul(a, g, false, false)
                                                 : kernels::matmul(a, g, true, false));
                    accum(n.inputs[1], db);
                }
                break;
            }
            case Op::Add: {
                accum(n.inputs[0], g);
                if (node(n.inputs[1]).grad_tracked) {
                    if (!n.broadcast_b) {
                        accum(n.inputs[1], g);
                    } else {
                        Tensor gb = Tensor::zeros({1, g.cols()});
                        for (int r = 0; r < g.rows(); ++r)
                            for (int c = 0; c < g.cols(); ++c) gb.at(0, c) += g.at(r, c);
                        accum(n.inputs[1], gb);
                    }
                }
                break;
            }
            case Op::Scale: {
                Tensor gx = g;
                for (double& x : gx.data) x *= n.scalar;
                accum(n.inputs[0], gx);
                break;
            }
            case Op::Gelu: {
                const Tensor& x = value(n.inputs[0]);
                Tensor gx = g;
                for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] *= gelu_grad(x.data[i]);
                accum(n.inputs[0], gx);
                break;
            }
            case Op::Softmax: {
                const Tensor& y = n.value;
                Tensor gx = Tensor::zeros(y.shape);
                for (int r = 0; r < y.rows(); ++r) {
                    double dot = 0.0;
                    for (int c = 0; c < y.cols(); ++c) dot += g.at(r, c) * y.at(r, c);
                    for (int c = 0; c < y.cols(); ++c) gx.at(r, c) = y.at(r, c) * (g.at(r, c) - dot);
                }
                accum(n.inputs[0], gx);
                break;
            }
            case Op::LayerNorm: {
                const Tensor& x = value(n.inputs[0]);
                const Tensor& gain = value(n.inputs[1]);
                const int cols = x.cols();
                Tensor gx = Tensor::zeros(x.shape);
                Tensor gg = Tensor::zeros({1, cols});
                Tensor gb = Tensor::zeros({1, cols});
                for (int r = 0; r < x.rows(); ++r) {
                    double mean = 0.0;
                    for (int c = 0; c < cols; ++c) mean += x.at(r, c);
                    mean /= cols;
                    double var = 0.0;
                    for (int c = 0; c < cols; ++c) {
                        const double d = x.at(r, c) - mean;
                        var += d * d;
                    }
                    var /= cols;
                    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    std::vector<double> xhat(static_cast<size_t>(cols)), dxhat(static_cast<size_t>(cols));
                    for (int c = 0; c < cols; ++c) {
                        xhat[static_cast<size_t>(c)] = (x.at(r, c) - mean) * inv;
                        dxhat[static_cast<size_t>(c)] = g.at(r, c) * gain.at(0, c);
                        sum_dxhat += dxhat[static_cast<size_t>(c)];
                        sum_dxhat_xhat += dxhat[static_cast<size_t>(c)] * xhat[static_cast<size_t>(c)];
                        gg.at(0, c) += g.at(r, c) * xhat[static_cast<size_t>(c)];
                        gb.at(0, c) += g.at(r, c);
                    }
                    for (int c = 0; c < cols; ++c)
                        gx.at(r, c) = inv * (dxhat[static_cast<size_t>(c)] - sum_dxhat / cols -
                                             xhat[static_cast<size_t>(c)] * sum_dxhat_xhat / cols);
                }
                accum(n.inputs[0], gx);
                accum(n.inputs[1], gg);
                accum(n.inputs[2], gb);
                break;
            }
            case Op::Embed: {
                const Tensor& table = value(n.inputs[0]);
                Tensor gt = Tensor::zeros(table.shape);
                for (size_t r = 0; r < n.ids.size(); ++r)
                    for (int c = 0; c < table.cols(); ++c) gt.at(n.ids[r], c) += g.at(static_cast<int>(r), c);
                accum(n.inputs[0], gt);
                break;
            }
            case Op::Concat: {
                int off = 0;
                for (int p : n.inputs) {
                    const Tensor& t = value(p);
                    if (node(p).grad_tracked) {
                        Tensor gp = Tensor::zeros(t.shape);
                        if (n.axis == 0) {
                            for (int r = 0; r < t.rows(); ++r)
                                for (int c = 0; c < t.cols(); ++c) gp.at(r, c) = g.at(off + r, c);
                        } else {
                            for (int r = 0; r < t.rows(); ++r)
                                for (int c = 0; c < t.cols(); ++c) gp.at(r, c) = g.at(r, off + c);
                        }
                        accum(p, gp);
                    }
                    off += n.axis == 0 ? t.rows() : t.cols();
                }
                break;
            }
            case Op::Slice: {
                const Tensor& t = value(n.inputs[0]);
                Tensor gt = Tensor::zeros(t.shape);
                if (n.axis == 0) {
                    for (int r = 0; r < n.len; ++r)
                        for (int c = 0; c < t.cols(); ++c) gt.at(n.start + r, c) = g.at(r, c);
                } else {
                    for (int r = 0; r < t.rows(); ++r)
                        for (int c = 0; c < n.len; ++c) gt.at(r, n.start + c) = g.at(r, c);
                }
                accum(n.inputs[0], gt);
                break;
            }
            case Op::ReduceSum: {
                accum(n.inputs[0], Tensor::full(value(n.inputs[0]).shape, g.data[0]));
                break;
            }
            case Op::ReduceMean: {
                const Tensor& t = value(n.inputs[0]);
                accum(n.inputs[0], Tensor::full(t.shape, g.data[0] / static_cast<double>(t.numel())));
                break;
            }
            case Op::Log: {
                const Tensor& x = value(n.inputs[0]);
                Tensor gx = g;
                for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] /= x.data[i];
                accum(n.inputs[0], gx);
                break;
            }
            case Op::XentLogits: {
                const Tensor& logits = value(n.inputs[0]);
                Tensor gx = kernels::softmax_rows(logits);
                for (int r = 0; r < gx.rows(); ++r) {
                    const double w = n.weights[static_cast<size_t>(r)] * g.data[0];
                    for (int c = 0; c < gx.cols(); ++c) gx.at(r, c) *= w;
                    gx.at(r, n.ids[static_cast<size_t>(r)]) -= w;
                }
                accum(n.inputs[0], gx);
                break;
            }
        }
    }

    GradMap out;
    for (const auto& [name, id] : param_ids_) {
        if (id <= seed_node && !grads[static_cast<size_t>(id)].data.empty())
            out[name] = std::move(grads[static_cast<size_t>(id)]);
        else
            out[name] = Tensor::zeros(value(id).shape);
    }
    return out;
}

// --------------------------------------------------------------------------
// finite differences
// --------------------------------------------------------------------------

double finite_difference_check(
    const std::function<double(const std::map<std::string, Tensor>&)>& loss_fn,
    const std::map<std::string, Tensor>& params,
    const GradMap& analytic,
    double eps,
    int max_coords_per_param,
    uint64_t seed) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_check: eps must be positive");
    const double base = loss_fn(params);
    if (loss_fn(params) != base)
        throw std::invalid_argument("finite_difference_check: loss_fn is not deterministic");

    Rng rng(seed ^ 0xfdfdfdfdULL);
    double max_rel = 0.0;
    std::map<std::string, Tensor> work = params;
    for (const auto& [name, tensor] : params) {
        auto it = analytic.find(name);
        if (it == analytic.end())
            throw std::invalid_argument("finite_difference_check: missing analytic gradient for '" + name + "'");
        const int64_t n = tensor.numel();
        std::vector<int64_t> coords;
        if (n <= max_coords_per_param) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            Rng local = rng.fork(name);
            for (int i = 0; i < max_coords_per_param; ++i)
                coords.push_back(static_cast<int64_t>(local.next_u64() % static_cast<uint64_t>(n)));
        }
        Tensor& slot = work[name];
        for (int64_t c : coords) {
            const double orig = slot.data[static_cast<size_t>(c)];
            slot.data[static_cast<size_t>(c)] = orig + eps;
            const double up = loss_fn(work);
            slot.data[static_cast<size_t>(c)] = orig - eps;
            const double dn = loss_fn(work);
            slot.data[static_cast<size_t>(c)] = orig;
            const double numeric = (up - dn) / (2.0 * eps);
            const double a = it->second.data[static_cast<size_t>(c)];
            const double rel = std::fabs(a - numeric) / std::max(1e-8, std::fabs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace naic
