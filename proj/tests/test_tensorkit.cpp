#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>

#include "finesdf/tensorkit.hpp"

using namespace finesdf;
using tk::Graph;
using tk::Tensor;

namespace {

// central finite differences against the analytic gradient of a scalar loss
double max_rel_grad_error(std::vector<Tensor*> params,
                          const std::function<double()>& loss_value,
                          const std::function<void(Graph&)>& build) {
    Graph g;
    build(g);
    double worst = 0.0;
    const double h = 1e-4;
    for (auto& [p, grad] : g.param_grads()) {
        for (size_t i = 0; i < p->numel(); ++i) {
            double orig = p->data[i];
            p->data[i] = orig + h;
            double fp = loss_value();
            p->data[i] = orig - h;
            double fm = loss_value();
            p->data[i] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double scale = std::max({std::abs(fd), std::abs(grad->data[i]), 1e-6});
            worst = std::max(worst, std::abs(fd - grad->data[i]) / scale);
        }
    }
    (void)params;
    return worst;
}

}  // namespace

TEST_CASE("weighted mse identities") {
    Graph g;
    Tensor x = Tensor::from({3, 1}, {1.0, -2.0, 0.5});
    Graph::Id xi = g.input(x);
    Tensor w1 = Tensor::full({3, 1}, 1.0);
    CHECK(g.val(g.weighted_mse(xi, xi, w1)).data[0] == 0.0);

    Tensor y = Tensor::from({3, 1}, {0.0, 1.0, 2.0});
    Graph::Id yi = g.input(y);
    double wm = g.val(g.weighted_mse(xi, yi, w1)).data[0];
    double m = g.val(g.mse(xi, yi)).data[0];
    CHECK(wm == m);
}

TEST_CASE("weighted mse gradient is 2w(pred-target)/N") {
    Tensor pred = Tensor::from({4, 1}, {0.5, -1.0, 2.0, 0.0});
    Tensor target = Tensor::from({4, 1}, {0.0, 0.0, 1.0, 1.0});
    Tensor w = Tensor::from({4, 1}, {1.0, 2.0, 0.5, 3.0});
    Graph g;
    Graph::Id pi = g.param(&pred);
    Graph::Id loss = g.weighted_mse(pi, g.input(target), w);
    g.backward(loss);
    const Tensor& grad = g.grad(pi);
    for (size_t i = 0; i < 4; ++i)
        CHECK(grad.data[i] ==
              doctest::Approx(2.0 * w.data[i] * (pred.data[i] - target.data[i]) / 4.0)
                  .epsilon(1e-12));
    // zero weight kills the gradient
    CHECK(std::abs(g.grad(pi).data[2]) > 0.0);
}

TEST_CASE("conv2d reproduces the kernel from an impulse") {
    // input: single channel 5x5 impulse at center; one output channel
    Tensor x = Tensor::zeros({1, 1, 5, 5});
    x.data[2 * 5 + 2] = 1.0;
    Tensor w = Tensor::from({1, 9}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor b = Tensor::zeros({1, 1});
    Graph g;
    Graph::Id out = g.conv2d(g.input(x), g.param(&w), g.param(&b));
    const Tensor& v = g.val(out);
    // cross-correlation: output[r][c] = sum_k w[k] x[r+dr][c+dc]
    for (int r = 1; r <= 3; ++r)
        for (int c = 1; c <= 3; ++c) {
            // impulse at (2,2): out(r,c) picks up kernel entry (2-r+1, 2-c+1)
            double expect = w.data[size_t((2 - r + 1) * 3 + (2 - c + 1))];
            CHECK(v.data[size_t(r * 5 + c)] == doctest::Approx(expect).epsilon(1e-12));
        }
    CHECK(v.data[0] == 0.0);
}

TEST_CASE("backward of mean(x^2)") {
    Tensor x = Tensor::from({3, 1}, {1.0, 2.0, 3.0});
    Graph g;
    Graph::Id xi = g.param(&x);
    Graph::Id loss = g.reduce_mean(g.mul(xi, xi));
    g.backward(loss);
    const Tensor& grad = g.grad(xi);
    CHECK(grad.data[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(grad.data[1] == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
    CHECK(grad.data[2] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("loss must be scalar") {
    Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
    Graph g;
    Graph::Id xi = g.param(&x);
    CHECK_THROWS_AS(g.backward(xi), tk::NonScalarLoss);
}

TEST_CASE("shape mismatches are rejected") {
    Graph g;
    Graph::Id a = g.input(Tensor::zeros({2, 3}));
    Graph::Id b = g.input(Tensor::zeros({2, 2}));
    CHECK_THROWS_AS(g.add(a, b), ShapeMismatch);
    CHECK_THROWS_AS(g.matmul(a, a), ShapeMismatch);
}

TEST_CASE("finite differences across all primitives") {
    Rng rng(1234);
    Tensor w1 = Tensor::randn({6, 5}, rng, 0.5);
    Tensor b1 = Tensor::randn({1, 5}, rng, 0.5);
    Tensor w2 = Tensor::randn({10, 1}, rng, 0.5);
    Tensor cw = Tensor::randn({2, 1 * 9}, rng, 0.5);
    Tensor cb = Tensor::randn({1, 2}, rng, 0.5);
    Tensor cw1 = Tensor::randn({2, 1 * 3}, rng, 0.5);
    Tensor cb1 = Tensor::randn({1, 2}, rng, 0.5);
    Tensor gate = Tensor::randn({2, 5}, rng, 0.5);
    Tensor x2d = Tensor::randn({1, 1, 4, 4}, rng, 0.8);
    Tensor x1d = Tensor::randn({1, 1, 6}, rng, 0.8);
    Tensor xin = Tensor::randn({4, 6}, rng, 0.8);
    Tensor target = Tensor::randn({4, 1}, rng, 0.8);
    Tensor w = Tensor::from({4, 1}, {1.0, 0.5, 2.0, 1.5});

    auto build = [&](Graph& g) {
        Graph::Id x = g.input(xin);
        Graph::Id h = g.elu(g.add_bias(g.matmul(x, g.param(&w1)), g.param(&b1)));
        Graph::Id t = g.tanh_(h);
        Graph::Id s = g.sigmoid(h);
        Graph::Id mix = g.add(g.mul(t, s), g.scale(g.sin_(h), 0.3));
        mix = g.add(mix, g.cos_(h));
        mix = g.relu(g.add(mix, h));

        Graph::Id c2 = g.conv2d(g.input(x2d), g.param(&cw), g.param(&cb));
        Graph::Id c1 = g.conv1d(g.input(x1d), g.param(&cw1), g.param(&cb1));
        Graph::Id pooled = g.concat_cols(g.mean_pool(c2), g.max_pool(c1));  // (1,4)
        Graph::Id scatter = g.gated_scatter_sum(mix, g.sigmoid(g.param(&gate)),
                                                {{0, 1, 0}, {0, 2, 1}, {2, 3, 0}, {3, 0, 1}}, 4);
        Graph::Id rows = g.concat_cols(g.mean_rows(scatter), g.max_rows(mix));  // (1,10)
        Graph::Id head = g.matmul(rows, g.param(&w2));  // (1,1)
        Graph::Id bc = g.broadcast_rows(head, 4);
        Graph::Id loss = g.weighted_mse(bc, g.input(target), w);
        loss = g.add(loss, g.scale(g.reduce_mean(pooled), 0.1));
        g.backward(loss);
        return loss;
    };
    auto value = [&]() {
        Graph g;
        Graph::Id x = g.input(xin);
        Graph::Id h = g.elu(g.add_bias(g.matmul(x, g.param(&w1)), g.param(&b1)));
        Graph::Id t = g.tanh_(h);
        Graph::Id s = g.sigmoid(h);
        Graph::Id mix = g.add(g.mul(t, s), g.scale(g.sin_(h), 0.3));
        mix = g.add(mix, g.cos_(h));
        mix = g.relu(g.add(mix, h));
        Graph::Id c2 = g.conv2d(g.input(x2d), g.param(&cw), g.param(&cb));
        Graph::Id c1 = g.conv1d(g.input(x1d), g.param(&cw1), g.param(&cb1));
        Graph::Id pooled = g.concat_cols(g.mean_pool(c2), g.max_pool(c1));
        Graph::Id scatter = g.gated_scatter_sum(mix, g.sigmoid(g.param(&gate)),
                                                {{0, 1, 0}, {0, 2, 1}, {2, 3, 0}, {3, 0, 1}}, 4);
        Graph::Id rows = g.concat_cols(g.mean_rows(scatter), g.max_rows(mix));
        Graph::Id head = g.matmul(rows, g.param(&w2));
        Graph::Id bc = g.broadcast_rows(head, 4);
        Graph::Id loss = g.weighted_mse(bc, g.input(target), w);
        loss = g.add(loss, g.scale(g.reduce_mean(pooled), 0.1));
        return g.val(loss).data[0];
    };
    double err = max_rel_grad_error({}, value, build);
    CHECK(err < 1e-4);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    Tensor p = Tensor::from({2, 1}, {1.5, -0.5});
    Tensor g0 = Tensor::zeros({2, 1});
    tk::AdamState st;
    tk::adam_step({{&p, &g0}}, st, 0.1);
    CHECK(p.data[0] == 1.5);
    CHECK(p.data[1] == -0.5);
}

TEST_CASE("adam first step is -lr * sign(g)") {
    Tensor p = Tensor::from({3, 1}, {1.0, 2.0, 3.0});
    Tensor g0 = Tensor::from({3, 1}, {0.7, -0.002, 1e3});
    tk::AdamState st;
    tk::adam_step({{&p, &g0}}, st, 0.01);
    CHECK(p.data[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
    CHECK(p.data[1] == doctest::Approx(2.0 + 0.01).epsilon(1e-4));
    CHECK(p.data[2] == doctest::Approx(3.0 - 0.01).epsilon(1e-6));
}

TEST_CASE("adam converges on (x-3)^2") {
    Tensor x = Tensor::from({1, 1}, {0.0});
    tk::AdamState st;
    for (int i = 0; i < 200; ++i) {
        Graph g;
        Graph::Id xi = g.param(&x);
        Graph::Id c = g.input(Tensor::from({1, 1}, {3.0}));
        Graph::Id d = g.sub(xi, c);
        Graph::Id loss = g.reduce_mean(g.mul(d, d));
        g.backward(loss);
        tk::adam_step(g.param_grads(), st, 0.1);
    }
    CHECK(std::abs(x.data[0] - 3.0) < 0.05);
}

TEST_CASE("per-parameter learning-rate scaling") {
    Tensor a = Tensor::from({1, 1}, {1.0});
    Tensor b = Tensor::from({1, 1}, {1.0});
    Tensor ga = Tensor::from({1, 1}, {1.0});
    tk::AdamState st;
    tk::adam_step({{&a, &ga}, {&b, &ga}}, st, 0.1, {{&b, 0.01}});
    CHECK(a.data[0] == doctest::Approx(0.9).epsilon(1e-9));
    CHECK(b.data[0] == doctest::Approx(0.999).epsilon(1e-9));
}

TEST_CASE("determinism of forward and backward") {
    auto run = [] {
        Rng rng(5);
        Tensor w = Tensor::randn({4, 4}, rng, 1.0);
        Tensor x = Tensor::randn({2, 4}, rng, 1.0);
        Graph g;
        Graph::Id loss =
            g.reduce_mean(g.elu(g.matmul(g.input(x), g.param(&w))));
        g.backward(loss);
        std::vector<double> out = {g.val(loss).data[0]};
        for (auto& [p, grad] : g.param_grads())
            out.insert(out.end(), grad->data.begin(), grad->data.end());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("checkpoint round trip and corruption errors") {
    Rng rng(8);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0);
    Tensor b = Tensor::randn({2, 2, 5}, rng, 1.0);
    std::string path =
        (std::filesystem::temp_directory_path() / "finesdf_test_ckpt.tkpt").string();
    tk::write_checkpoint(path, {{"layer.a", &a}, {"layer.b", &b}});
    auto back = tk::read_checkpoint(path);
    REQUIRE(back.count("layer.a") == 1);
    CHECK(back["layer.a"].data == a.data);
    CHECK(back["layer.b"].shape == b.shape);
    CHECK(back["layer.b"].data == b.data);

    {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        std::ofstream out(path + ".t", std::ios::binary);
        out.write(bytes.data(), std::streamsize(bytes.size() - 10));
    }
    CHECK_THROWS_AS(tk::read_checkpoint(path + ".t"), FormatError);
    {
        std::ofstream out(path + ".m", std::ios::binary);
        out << "NOPE";
    }
    CHECK_THROWS_AS(tk::read_checkpoint(path + ".m"), FormatError);
    for (const char* s : {"", ".t", ".m"}) std::filesystem::remove(path + s);
}
