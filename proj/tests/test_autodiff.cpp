#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <string>

#include "doctest.h"
#include "naic/graph.hpp"
#include "naic/rng.hpp"
#include "naic/tensor.hpp"

using naic::GradMap;
using naic::Graph;
using naic::Rng;
using naic::Tensor;

namespace {

using Params = std::map<std::string, Tensor>;
using Builder = std::function<int(Graph&, const Params&)>;

// Builds the loss twice: once for analytic gradients, then as a pure function
// of the parameters for the central-difference probe.
double fd_max_rel_err(const Builder& build, const Params& params, double eps = 1e-5) {
    Graph g;
    const int loss = build(g, params);
    const GradMap analytic = g.backward(loss);
    auto loss_fn = [&build](const Params& p) {
        Graph g2;
        return g2.value(build(g2, p)).data[0];
    };
    return naic::finite_difference_check(loss_fn, params, analytic, eps);
}

Tensor rand_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& x : t.data) x = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("softmax rows sum to 1 within 1e-12") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        Graph g;
        const int x = g.input(rand_tensor({5, 9}, rng, -30.0, 30.0));
        const Tensor& y = g.value(g.softmax(x));
        for (int r = 0; r < y.rows(); ++r) {
            double s = 0.0;
            for (int c = 0; c < y.cols(); ++c) s += y.at(r, c);
            CHECK(std::fabs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("matmul by identity is the identity map") {
    Rng rng(11);
    Graph g;
    Tensor x = rand_tensor({4, 6}, rng);
    const int y = g.matmul(g.input(x), g.input(Tensor::identity(6)));
    CHECK(naic::bit_equal(g.value(y), x));
}

TEST_CASE("layer-norm of a constant row is zero before affine") {
    Graph g;
    const int x = g.input(Tensor::full({3, 8}, 2.5));
    const int gain = g.input(Tensor::full({1, 8}, 1.0));
    const int bias = g.input(Tensor::zeros({1, 8}));
    const Tensor& y = g.value(g.layer_norm(x, gain, bias));
    for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("reduce_sum backward gives all-ones") {
    Graph g;
    const int x = g.param("x", Tensor::full({3, 4}, 1.7));
    const GradMap grads = g.backward(g.reduce_sum(x));
    for (double v : grads.at("x").data) CHECK(v == 1.0);
}

TEST_CASE("zero-scaled loss gives zero gradients") {
    Graph g;
    const int x = g.param("x", Tensor::full({2, 5}, 3.0));
    const GradMap grads = g.backward(g.scale(g.reduce_sum(x), 0.0));
    for (double v : grads.at("x").data) CHECK(v == 0.0);
}

TEST_CASE("parameters unreachable from the loss get zero gradients") {
    Graph g;
    const int x = g.param("x", Tensor::full({2, 2}, 1.0));
    g.param("unused", Tensor::full({3, 3}, 4.0));
    const GradMap grads = g.backward(g.reduce_sum(x));
    REQUIRE(grads.count("unused") == 1);
    CHECK(grads.at("unused").shape == std::vector<int>{3, 3});
    for (double v : grads.at("unused").data) CHECK(v == 0.0);
}

TEST_CASE("non-scalar loss is rejected") {
    Graph g;
    const int x = g.param("x", Tensor::full({2, 2}, 1.0));
    CHECK_THROWS_AS((void)g.backward(x), std::invalid_argument);
}

TEST_CASE("shape mismatch reports op name and shapes") {
    Graph g;
    const int a = g.input(Tensor::zeros({2, 3}));
    const int b = g.input(Tensor::zeros({4, 5}));
    try {
        (void)g.matmul(a, b);
        FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("(2x3)") != std::string::npos);
        CHECK(msg.find("(4x5)") != std::string::npos);
    }
    try {
        (void)g.add(a, b);
        FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("add") != std::string::npos);
    }
}

TEST_CASE("forward and backward are bit-deterministic") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        Graph g;
        const int w = g.param("w", Tensor::randn({6, 6}, rng, 0.3));
        const int x = g.input(rand_tensor({4, 6}, rng));
        const int h = g.gelu(g.matmul(x, w));
        const int loss = g.xent_logits(g.matmul(h, w, false, true), {0, 1, 2, 3});
        GradMap grads = g.backward(loss);
        return std::make_pair(g.value(loss).data[0], std::move(grads));
    };
    auto [l1, g1] = run(42);
    auto [l2, g2] = run(42);
    CHECK(std::memcmp(&l1, &l2, sizeof l1) == 0);
    CHECK(naic::bit_equal(g1.at("w"), g2.at("w")));
}

TEST_CASE("softmax-xent gradient equals softmax minus onehot") {
    Rng rng(5);
    Graph g;
    const int logits = g.param("logits", rand_tensor({3, 7}, rng, -2.0, 2.0));
    const std::vector<int> targets = {2, 0, 6};
    const GradMap grads = g.backward(g.xent_logits(logits, targets));
    const Tensor probs = naic::kernels::softmax_rows(g.value(logits));
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 7; ++c) {
            const double expect = probs.at(r, c) - (targets[static_cast<size_t>(r)] == c ? 1.0 : 0.0);
            CHECK(std::fabs(grads.at("logits").at(r, c) - expect) < 1e-12);
        }
}

TEST_CASE("finite differences: quadratic loss is matched to 1e-8") {
    Rng rng(3);
    Params params;
    params["x"] = rand_tensor({4, 4}, rng, 0.5, 1.5);
    auto build = [](Graph& g, const Params& p) {
        const int x = g.param("x", p.at("x"));
        // 0.5 * sum(x^2) via x @ x^T trace surrogate: use gelu-free path
        const int sq = g.matmul(x, x, false, true);
        return g.scale(g.reduce_sum(g.slice(sq, 0, 0, 4)), 0.5);  // not trace; still a smooth quadratic
    };
    // analytic gradient of 0.5*sum_ij (x x^T)_ij is not x itself, so check via
    // the graph's own backward (the harness compares graph grads to numeric).
    CHECK(fd_max_rel_err(build, params, 1e-5) < 1e-8);
}

TEST_CASE("finite differences: simple quadratic analytic grad equals x") {
    // direct form of the spec example: loss = 0.5 * ||x||^2, grad = x
    Rng rng(9);
    Params params;
    params["x"] = rand_tensor({3, 5}, rng, 0.5, 1.5);
    Graph g;
    const int x = g.param("x", params.at("x"));
    // sum of squares via elementwise route: xent-free, use matmul with self
    const int sq = g.matmul(x, x, true, false);  // (5x5), trace = ||x||^2
    std::vector<int> diag_loss_parts;
    for (int i = 0; i < 5; ++i) diag_loss_parts.push_back(g.slice(g.slice(sq, 0, i, 1), 1, i, 1));
    const int loss = g.scale(g.reduce_sum(g.concat(diag_loss_parts, 0)), 0.5);
    const GradMap grads = g.backward(loss);
    CHECK(naic::max_abs_diff(grads.at("x"), params.at("x")) < 1e-12);
}

TEST_CASE("finite differences: eps = 0 is rejected") {
    Params params;
    params["x"] = Tensor::full({1, 1}, 1.0);
    auto loss_fn = [](const Params& p) { return p.at("x").data[0]; };
    GradMap analytic;
    analytic["x"] = Tensor::full({1, 1}, 1.0);
    CHECK_THROWS_AS((void)naic::finite_difference_check(loss_fn, params, analytic, 0.0), std::invalid_argument);
}

TEST_CASE("finite differences: non-deterministic loss is rejected") {
    Params params;
    params["x"] = Tensor::full({1, 1}, 1.0);
    int calls = 0;
    auto loss_fn = [&calls](const Params& p) { return p.at("x").data[0] + 0.01 * static_cast<double>(calls++); };
    GradMap analytic;
    analytic["x"] = Tensor::full({1, 1}, 1.0);
    CHECK_THROWS_AS((void)naic::finite_difference_check(loss_fn, params, analytic, 1e-5), std::invalid_argument);
}

TEST_CASE("per-op gradients match central finite differences over 20 seeds") {
    struct Case {
        const char* name;
        Builder build;
        std::function<Params(Rng&)> make_params;
    };
    std::vector<Case> cases;

    cases.push_back({"matmul-nn-nt-tn-tt",
                     [](Graph& g, const Params& p) {
                         const int a = g.param("a", p.at("a"));
                         const int b = g.param("b", p.at("b"));
                         const int nn = g.matmul(a, b);                  // (3x4)(4x5)
                         const int nt = g.matmul(nn, nn, false, true);   // (3x3)
                         const int tn = g.matmul(nn, nn, true, false);   // (5x5)
                         return g.reduce_sum(g.matmul(g.matmul(nt, nn), tn, false, true));
                     },
                     [](Rng& rng) {
                         Params p;
                         p["a"] = rand_tensor({3, 4}, rng, -0.8, 0.8);
                         p["b"] = rand_tensor({4, 5}, rng, -0.8, 0.8);
                         return p;
                     }});
    cases.push_back({"add-broadcast-scale",
                     [](Graph& g, const Params& p) {
                         const int x = g.param("x", p.at("x"));
                         const int b = g.param("b", p.at("b"));
                         return g.reduce_sum(g.gelu(g.scale(g.add(x, b), 1.3)));
                     },
                     [](Rng& rng) {
                         Params p;
                         p["x"] = rand_tensor({4, 6}, rng);
                         p["b"] = rand_tensor({1, 6}, rng);
                         return p;
                     }});
    cases.push_back({"softmax-matvec",
                     [](Graph& g, const Params& p) {
                         const int x = g.param("x", p.at("x"));
                         Tensor w = Tensor::zeros({7, 1});
                         for (int i = 0; i < 7; ++i) w.at(i, 0) = 0.2 * (i + 1);
                         return g.reduce_sum(g.matmul(g.softmax(x), g.input(w)));
                     },
                     [](Rng& rng) {
                         Params p;
                         p["x"] = rand_tensor({3, 7}, rng, -2.0, 2.0);
                         return p;
                     }});
    cases.push_back({"layer-norm",
                     [](Graph& g, const Params& p) {
                         const int x = g.param("x", p.at("x"));
                         const int gain = g.param("gain", p.at("gain"));
                         const int bias = g.param("bias", p.at("bias"));
                         const int y = g.layer_norm(x, gain, bias);
                         return g.xent_logits(y, {1, 0, 3}, {0.7, 1.1, 0.4});
                     },
                     [](Rng& rng) {
                         Params p;
                         p["x"] = rand_tensor({3, 6}, rng, -1.5, 1.5);
                         p["gain"] = rand_tensor({1, 6}, rng, 0.5, 1.5);
                         p["bias"] = rand_tensor({1, 6}, rng, -0.3, 0.3);
                         return p;
                     }});
    cases.push_back({"embed-concat-slice",
                     [](Graph& g, const Params& p) {
                         const int table = g.param("table", p.at("table"));
                         const int e1 = g.embed(table, {0, 3, 1});
                         const int e2 = g.embed(table, {2, 2, 4});
                         const int cat = g.concat({e1, e2}, 1);
                         const int sl = g.slice(cat, 1, 2, 6);
                         return g.reduce_mean(g.gelu(sl));
                     },
                     [](Rng& rng) {
                         Params p;
                         p["table"] = rand_tensor({5, 5}, rng);
                         return p;
                     }});
    cases.push_back({"log-softmax",
                     [](Graph& g, const Params& p) {
                         const int x = g.param("x", p.at("x"));
                         return g.reduce_sum(g.log(g.softmax(x)));
                     },
                     [](Rng& rng) {
                         Params p;
                         p["x"] = rand_tensor({4, 5}, rng, -1.0, 1.0);
                         return p;
                     }});
    cases.push_back({"xent-weighted",
                     [](Graph& g, const Params& p) {
                         const int x = g.param("x", p.at("x"));
                         return g.xent_logits(g.matmul(x, x, false, true), {0, 2, 1}, {1.5, 0.0, -0.7});
                     },
                     [](Rng& rng) {
                         Params p;
                         p["x"] = rand_tensor({3, 8}, rng, -0.9, 0.9);
                         return p;
                     }});

    for (const Case& c : cases) {
        CAPTURE(c.name);
        for (uint64_t seed = 1; seed <= 20; ++seed) {
            Rng rng(seed * 1000 + 17);
            const Params params = c.make_params(rng);
            const double err = fd_max_rel_err(c.build, params);
            CAPTURE(seed);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("3-layer MLP gradients match finite differences over 20 seeds") {
    Tensor input;
    auto build = [&input](Graph& g, const Params& p) {
        const int x = g.input(input);
        const int h1 = g.gelu(g.add(g.matmul(x, g.param("w1", p.at("w1"))), g.param("b1", p.at("b1"))));
        const int h2 = g.gelu(g.add(g.matmul(h1, g.param("w2", p.at("w2"))), g.param("b2", p.at("b2"))));
        const int out = g.add(g.matmul(h2, g.param("w3", p.at("w3"))), g.param("b3", p.at("b3")));
        return g.xent_logits(out, {1, 3, 0, 2});
    };
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed * 77 + 5);
        Params p;
        input = rand_tensor({4, 6}, rng);
        p["w1"] = rand_tensor({6, 8}, rng, -0.5, 0.5);
        p["b1"] = rand_tensor({1, 8}, rng, -0.2, 0.2);
        p["w2"] = rand_tensor({8, 8}, rng, -0.5, 0.5);
        p["b2"] = rand_tensor({1, 8}, rng, -0.2, 0.2);
        p["w3"] = rand_tensor({8, 4}, rng, -0.5, 0.5);
        p["b3"] = rand_tensor({1, 4}, rng, -0.2, 0.2);
        const double err = fd_max_rel_err(build, p);
        CAPTURE(seed);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("rollback drops appended nodes and lets the tape be reused") {
    Rng rng(21);
    Graph g;
    const int w = g.param("w", Tensor::randn({4, 4}, rng, 0.5));
    const int x = g.input(rand_tensor({2, 4}, rng));
    const int h = g.matmul(x, w);
    const size_t mark = g.size();

    const GradMap g1 = g.backward(g.xent_logits(h, {0, 1}));
    g.rollback(mark);
    const GradMap g2 = g.backward(g.xent_logits(h, {0, 1}));
    CHECK(naic::bit_equal(g1.at("w"), g2.at("w")));
    g.rollback(mark);
    const GradMap g3 = g.backward(g.xent_logits(h, {3, 2}, {2.0, -1.0}));
    CHECK_FALSE(naic::bit_equal(g1.at("w"), g3.at("w")));
}
