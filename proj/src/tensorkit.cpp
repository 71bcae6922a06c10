#include "finesdf/tensorkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>

#include <cblas.h>

namespace finesdf {
namespace tk {

namespace {

void gemm(bool ta, bool tb, size_t m, size_t n, size_t k, const double* a, const double* b,
          double* c, double beta = 0.0) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                int(m), int(n), int(k), 1.0, a, int(ta ? m : k), b, int(tb ? k : n), beta, c,
                int(n));
}

std::string shape_str(const std::vector<size_t>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + ")";
}

void require(bool ok, const std::string& what, const std::vector<size_t>& a,
             const std::vector<size_t>& b) {
    if (!ok) throw ShapeMismatch(what + ": " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

Graph::Id Graph::make(Tensor value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Id(nodes_.size() - 1);
}

Graph::Id Graph::input(Tensor t) { return make(std::move(t), false); }

Graph::Id Graph::param(Tensor* p) {
    auto it = param_ids_.find(p);
    if (it != param_ids_.end()) return it->second;
    Id id = make(*p, true);
    nodes_[id].bound_param = p;
    param_ids_[p] = id;
    return id;
}

Graph::Id Graph::matmul(Id a, Id b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    require(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[1] == B.shape[0], "matmul",
            A.shape, B.shape);
    size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
    Tensor C({m, n});
    gemm(false, false, m, n, k, A.data.data(), B.data.data(), C.data.data());
    bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    Id out = make(std::move(C), ng);
    if (ng)
        nodes_[out].back = [this, a, b, out, m, n, k] {
            const double* g = nodes_[out].grad.data.data();
            if (nodes_[a].needs_grad)
                gemm(false, true, m, k, n, g, nodes_[b].value.data.data(),
                     nodes_[a].grad.data.data(), 1.0);
            if (nodes_[b].needs_grad)
                gemm(true, false, k, n, m, nodes_[a].value.data.data(), g,
                     nodes_[b].grad.data.data(), 1.0);
        };
    return out;
}

Graph::Id Graph::add(Id a, Id b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    require(A.shape == B.shape, "add", A.shape, B.shape);
    Tensor C = A;
    for (size_t i = 0; i < C.numel(); ++i) C.data[i] += B.data[i];
    bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    Id out = make(std::move(C), ng);
    if (ng)
        nodes_[out].back = [this, a, b, out] {
            const auto& g = nodes_[out].grad.data;
            if (nodes_[a].needs_grad)
                for (size_t i = 0; i < g.size(); ++i) nodes_[a].grad.data[i] += g[i];
            if (nodes_[b].needs_grad)
                for (size_t i = 0; i < g.size(); ++i) nodes_[b].grad.data[i] += g[i];
        };
    return out;
}

Graph::Id Graph::add_bias(Id a, Id b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    require(A.shape.size() == 2 && B.shape.size() == 2 && B.shape[0] == 1 &&
                B.shape[1] == A.shape[1],
            "add_bias", A.shape, B.shape);
    size_t m = A.shape[0], n = A.shape[1];
    Tensor C = A;
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) C.data[i * n + j] += B.data[j];
    bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    Id out = make(std::move(C), ng);
    if (ng)
        nodes_[out].back = [this, a, b, out, m, n] {
            const auto& g = nodes_[out].grad.data;
            if (nodes_[a].needs_grad)
                for (size_t i = 0; i < g.size(); ++i) nodes_[a].grad.data[i] += g[i];
            if (nodes_[b].needs_grad)
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < n; ++j) nodes_[b].grad.data[j] += g[i * n + j];
        };
    return out;
}

Graph::Id Graph::sub(Id a, Id b) { return add(a, scale(b, -1.0)); }

Graph::Id Graph::mul(Id a, Id b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    require(A.shape == B.shape, "mul", A.shape, B.shape);
    Tensor C = A;
    for (size_t i = 0; i < C.numel(); ++i) C.data[i] *= B.data[i];
    bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    Id out = make(std::move(C), ng);
    if (ng)
        nodes_[out].back = [this, a, b, out] {
            const auto& g = nodes_[out].grad.data;
            if (nodes_[a].needs_grad)
                for (size_t i = 0; i < g.size(); ++i)
                    nodes_[a].grad.data[i] += g[i] * nodes_[b].value.data[i];
            if (nodes_[b].needs_grad)
                for (size_t i = 0; i < g.size(); ++i)
                    nodes_[b].grad.data[i] += g[i] * nodes_[a].value.data[i];
        };
    return out;
}

Graph::Id Graph::scale(Id a, double s) {
    Tensor C = nodes_[a].value;
    for (double& v : C.data) v *= s;
    bool ng = nodes_[a].needs_grad;
    Id out = make(std::move(C), ng);
    if (ng)
        nodes_[out].back = [this, a, out, s] {
            const auto& g = nodes_[out].grad.data;
            for (size_t i = 0; i < g.size(); ++i) nodes_[a].grad.data[i] += s * g[i];
        };
    return out;
}

Graph::Id Graph::concat_cols(Id a, Id b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    require(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[0] == B.shape[0], "concat_cols",
            A.shape, B.shape);
    size_t m = A.shape[0], p = A.shape[1], q = B.shape[1];
    Tensor C({m, p + q});
    for (size_t i = 0; i < m; ++i) {
        std::copy_n(&A.data[i * p], p, &C.data[i * (p + q)]);
        std::copy_n(&B.data[i * q], q, &C.data[i * (p + q) + p]);
    }
    bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    Id out = make(std::move(C), ng);
    if (ng)
        nodes_[out].back = [this, a, b, out, m, p, q] {
            const auto& g = nodes_[out].grad.data;
            for (size_t i = 0; i < m; ++i) {
                if (nodes_[a].needs_grad)
                    for (size_t j = 0; j < p; ++j) nodes_[a].grad.data[i * p + j] += g[i * (p + q) + j];
                if (nodes_[b].needs_grad)
                    for (size_t j = 0; j < q; ++j)
                        nodes_[b].grad.data[i * q + j] += g[i * (p + q) + p + j];
            }
        };
    return out;
}

Graph::Id Graph::broadcast_rows(Id v, size_t m) {
    const Tensor& V = nodes_[v].value;
    require(V.shape.size() == 2 && V.shape[0] == 1, "broadcast_rows", V.shape, {m});
    size_t n = V.shape[1];
    Tensor C({m, n});
    for (size_t i = 0; i < m; ++i) std::copy_n(V.data.data(), n, &C.data[i * n]);
    bool ng = nodes_[v].needs_grad;
    Id out = make(std::move(C), ng);
    if (ng)
        nodes_[out].back = [this, v, out, m, n] {
            const auto& g = nodes_[out].grad.data;
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) nodes_[v].grad.data[j] += g[i * n + j];
        };
    return out;
}

#define FINESDF_UNARY(NAME, FWD, BWD)                                             \
    Graph::Id Graph::NAME(Id a) {                                                 \
        Tensor C = nodes_[a].value;                                               \
        for (double& x : C.data) x = (FWD);                                       \
        bool ng = nodes_[a].needs_grad;                                           \
        Id out = make(std::move(C), ng);                                          \
        if (ng)                                                                   \
            nodes_[out].back = [this, a, out] {                                   \
                const auto& g = nodes_[out].grad.data;                            \
                const auto& xs = nodes_[a].value.data;                            \
                const auto& ys = nodes_[out].value.data;                          \
                (void)xs; (void)ys;                                               \
                for (size_t i = 0; i < g.size(); ++i) {                           \
                    double x = xs[i], y = ys[i];                                  \
                    (void)x; (void)y;                                             \
                    nodes_[a].grad.data[i] += g[i] * (BWD);                       \
                }                                                                 \
            };                                                                    \
        return out;                                                               \
    }

FINESDF_UNARY(relu, x > 0.0 ? x : 0.0, x > 0.0 ? 1.0 : 0.0)
FINESDF_UNARY(elu, x > 0.0 ? x : std::expm1(x), x > 0.0 ? 1.0 : y + 1.0)
FINESDF_UNARY(tanh_, std::tanh(x), 1.0 - y * y)
FINESDF_UNARY(sigmoid, 1.0 / (1.0 + std::exp(-x)), y * (1.0 - y))
FINESDF_UNARY(sin_, std::sin(x), std::cos(x))
FINESDF_UNARY(cos_, std::cos(x), -std::sin(x))

#undef FINESDF_UNARY

namespace {

// im2col for 3x3 (2D) and 3 (1D) zero-padded kernels
void im2col2d(const double* x, size_t cin, size_t h, size_t w, double* col) {
    // col: (h*w, cin*9)
    for (size_t i = 0; i < h; ++i)
        for (size_t j = 0; j < w; ++j) {
            double* row = col + (i * w + j) * cin * 9;
            for (size_t c = 0; c < cin; ++c)
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        long ii = long(i) + di, jj = long(j) + dj;
                        double v = (ii < 0 || jj < 0 || ii >= long(h) || jj >= long(w))
                                       ? 0.0
                                       : x[c * h * w + size_t(ii) * w + size_t(jj)];
                        *row++ = v;
                    }
        }
}

void col2im2d(const double* col, size_t cin, size_t h, size_t w, double* x) {
    for (size_t i = 0; i < h; ++i)
        for (size_t j = 0; j < w; ++j) {
            const double* row = col + (i * w + j) * cin * 9;
            for (size_t c = 0; c < cin; ++c)
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        long ii = long(i) + di, jj = long(j) + dj;
                        double v = *row++;
                        if (ii >= 0 && jj >= 0 && ii < long(h) && jj < long(w))
                            x[c * h * w + size_t(ii) * w + size_t(jj)] += v;
                    }
        }
}

void im2col1d(const double* x, size_t cin, size_t l, double* col) {
    for (size_t i = 0; i < l; ++i) {
        double* row = col + i * cin * 3;
        for (size_t c = 0; c < cin; ++c)
            for (int di = -1; di <= 1; ++di) {
                long ii = long(i) + di;
                *row++ = (ii < 0 || ii >= long(l)) ? 0.0 : x[c * l + size_t(ii)];
            }
    }
}

void col2im1d(const double* col, size_t cin, size_t l, double* x) {
    for (size_t i = 0; i < l; ++i) {
        const double* row = col + i * cin * 3;
        for (size_t c = 0; c < cin; ++c)
            for (int di = -1; di <= 1; ++di) {
                long ii = long(i) + di;
                double v = *row++;
                if (ii >= 0 && ii < long(l)) x[c * l + size_t(ii)] += v;
            }
    }
}

}  // namespace

Graph::Id Graph::conv2d(Id x, Id w, Id b) {
    const Tensor& X = nodes_[x].value;
    const Tensor& W = nodes_[w].value;
    const Tensor& B = nodes_[b].value;
    require(X.shape.size() == 4 && W.shape.size() == 2, "conv2d", X.shape, W.shape);
    size_t n = X.shape[0], cin = X.shape[1], h = X.shape[2], wd = X.shape[3];
    size_t cout = W.shape[0];
    require(W.shape[1] == cin * 9 && B.shape == std::vector<size_t>({1, cout}), "conv2d kernel",
            W.shape, B.shape);
    Tensor Y({n, cout, h, wd});
    size_t plane = h * wd;
    std::vector<double> col(plane * cin * 9);
    std::vector<double> ybuf(plane * cout);
    for (size_t s = 0; s < n; ++s) {
        im2col2d(&X.data[s * cin * plane], cin, h, wd, col.data());
        // (plane, cin*9) x (cin*9, cout)  [W transposed]
        gemm(false, true, plane, cout, cin * 9, col.data(), W.data.data(), ybuf.data());
        for (size_t c = 0; c < cout; ++c)
            for (size_t p = 0; p < plane; ++p)
                Y.data[s * cout * plane + c * plane + p] = ybuf[p * cout + c] + B.data[c];
    }
    bool ng = nodes_[x].needs_grad || nodes_[w].needs_grad || nodes_[b].needs_grad;
    Id out = make(std::move(Y), ng);
    if (ng)
        nodes_[out].back = [this, x, w, b, out, n, cin, h, wd, cout, plane] {
            const auto& g = nodes_[out].grad.data;
            std::vector<double> col(plane * cin * 9), gbuf(plane * cout), gcol(plane * cin * 9);
            for (size_t s = 0; s < n; ++s) {
                for (size_t c = 0; c < cout; ++c)
                    for (size_t p = 0; p < plane; ++p)
                        gbuf[p * cout + c] = g[s * cout * plane + c * plane + p];
                if (nodes_[w].needs_grad) {
                    im2col2d(&nodes_[x].value.data[s * cin * plane], cin, h, wd, col.data());
                    // dW += gbuf^T (plane,cout)^T x col (plane, cin*9)
                    gemm(true, false, cout, cin * 9, plane, gbuf.data(), col.data(),
                         nodes_[w].grad.data.data(), 1.0);
                }
                if (nodes_[b].needs_grad)
                    for (size_t c = 0; c < cout; ++c)
                        for (size_t p = 0; p < plane; ++p)
                            nodes_[b].grad.data[c] += gbuf[p * cout + c];
                if (nodes_[x].needs_grad) {
                    gemm(false, false, plane, cin * 9, cout, gbuf.data(),
                         nodes_[w].value.data.data(), gcol.data());
                    col2im2d(gcol.data(), cin, h, wd, &nodes_[x].grad.data[s * cin * plane]);
                }
            }
        };
    return out;
}

Graph::Id Graph::conv1d(Id x, Id w, Id b) {
    const Tensor& X = nodes_[x].value;
    const Tensor& W = nodes_[w].value;
    const Tensor& B = nodes_[b].value;
    require(X.shape.size() == 3 && W.shape.size() == 2, "conv1d", X.shape, W.shape);
    size_t n = X.shape[0], cin = X.shape[1], l = X.shape[2];
    size_t cout = W.shape[0];
    require(W.shape[1] == cin * 3 && B.shape == std::vector<size_t>({1, cout}), "conv1d kernel",
            W.shape, B.shape);
    Tensor Y({n, cout, l});
    std::vector<double> col(l * cin * 3), ybuf(l * cout);
    for (size_t s = 0; s < n; ++s) {
        im2col1d(&X.data[s * cin * l], cin, l, col.data());
        gemm(false, true, l, cout, cin * 3, col.data(), W.data.data(), ybuf.data());
        for (size_t c = 0; c < cout; ++c)
            for (size_t p = 0; p < l; ++p)
                Y.data[s * cout * l + c * l + p] = ybuf[p * cout + c] + B.data[c];
    }
    bool ng = nodes_[x].needs_grad || nodes_[w].needs_grad || nodes_[b].needs_grad;
    Id out = make(std::move(Y), ng);
    if (ng)
        nodes_[out].back = [this, x, w, b, out, n, cin, l, cout] {
            const auto& g = nodes_[out].grad.data;
            std::vector<double> col(l * cin * 3), gbuf(l * cout), gcol(l * cin * 3);
            for (size_t s = 0; s < n; ++s) {
                for (size_t c = 0; c < cout; ++c)
                    for (size_t p = 0; p < l; ++p) gbuf[p * cout + c] = g[s * cout * l + c * l + p];
                if (nodes_[w].needs_grad) {
                    im2col1d(&nodes_[x].value.data[s * cin * l], cin, l, col.data());
                    gemm(true, false, cout, cin * 3, l, gbuf.data(), col.data(),
                         nodes_[w].grad.data.data(), 1.0);
                }
                if (nodes_[b].needs_grad)
                    for (size_t c = 0; c < cout; ++c)
                        for (size_t p = 0; p < l; ++p) nodes_[b].grad.data[c] += gbuf[p * cout + c];
                if (nodes_[x].needs_grad) {
                    gemm(false, false, l, cin * 3, cout, gbuf.data(), nodes_[w].value.data.data(),
                         gcol.data());
                    col2im1d(gcol.data(), cin, l, &nodes_[x].grad.data[s * cin * l]);
                }
            }
        };
    return out;
}

Graph::Id Graph::mean_pool(Id x) {
    const Tensor& X = nodes_[x].value;
    require(X.shape.size() >= 3, "mean_pool", X.shape, {});
    size_t n = X.shape[0], c = X.shape[1];
    size_t sp = X.numel() / (n * c);
    Tensor Y({n, c});
    for (size_t s = 0; s < n; ++s)
        for (size_t ch = 0; ch < c; ++ch) {
            double sum = 0.0;
            for (size_t p = 0; p < sp; ++p) sum += X.data[(s * c + ch) * sp + p];
            Y.data[s * c + ch] = sum / double(sp);
        }
    bool ng = nodes_[x].needs_grad;
    Id out = make(std::move(Y), ng);
    if (ng)
        nodes_[out].back = [this, x, out, n, c, sp] {
            const auto& g = nodes_[out].grad.data;
            for (size_t s = 0; s < n; ++s)
                for (size_t ch = 0; ch < c; ++ch) {
                    double gv = g[s * c + ch] / double(sp);
                    for (size_t p = 0; p < sp; ++p) nodes_[x].grad.data[(s * c + ch) * sp + p] += gv;
                }
        };
    return out;
}

Graph::Id Graph::max_pool(Id x) {
    const Tensor& X = nodes_[x].value;
    require(X.shape.size() >= 3, "max_pool", X.shape, {});
    size_t n = X.shape[0], c = X.shape[1];
    size_t sp = X.numel() / (n * c);
    Tensor Y({n, c});
    auto arg = std::make_shared<std::vector<size_t>>(n * c);
    for (size_t s = 0; s < n; ++s)
        for (size_t ch = 0; ch < c; ++ch) {
            size_t base = (s * c + ch) * sp, best = 0;
            for (size_t p = 1; p < sp; ++p)
                if (X.data[base + p] > X.data[base + best]) best = p;
            (*arg)[s * c + ch] = best;
            Y.data[s * c + ch] = X.data[base + best];
        }
    bool ng = nodes_[x].needs_grad;
    Id out = make(std::move(Y), ng);
    if (ng)
        nodes_[out].back = [this, x, out, n, c, sp, arg] {
            const auto& g = nodes_[out].grad.data;
            for (size_t i = 0; i < n * c; ++i) nodes_[x].grad.data[i * sp + (*arg)[i]] += g[i];
        };
    return out;
}

Graph::Id Graph::mean_rows(Id x) {
    const Tensor& X = nodes_[x].value;
    require(X.shape.size() == 2, "mean_rows", X.shape, {});
    size_t m = X.shape[0], n = X.shape[1];
    Tensor Y({1, n});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) Y.data[j] += X.data[i * n + j] / double(m);
    bool ng = nodes_[x].needs_grad;
    Id out = make(std::move(Y), ng);
    if (ng)
        nodes_[out].back = [this, x, out, m, n] {
            const auto& g = nodes_[out].grad.data;
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < n; ++j) nodes_[x].grad.data[i * n + j] += g[j] / double(m);
        };
    return out;
}

Graph::Id Graph::max_rows(Id x) {
    const Tensor& X = nodes_[x].value;
    require(X.shape.size() == 2, "max_rows", X.shape, {});
    size_t m = X.shape[0], n = X.shape[1];
    Tensor Y({1, n});
    auto arg = std::make_shared<std::vector<size_t>>(n, 0);
    for (size_t j = 0; j < n; ++j) {
        size_t best = 0;
        for (size_t i = 1; i < m; ++i)
            if (X.data[i * n + j] > X.data[best * n + j]) best = i;
        (*arg)[j] = best;
        Y.data[j] = X.data[best * n + j];
    }
    bool ng = nodes_[x].needs_grad;
    Id out = make(std::move(Y), ng);
    if (ng)
        nodes_[out].back = [this, x, out, n, arg] {
            const auto& g = nodes_[out].grad.data;
            for (size_t j = 0; j < n; ++j) nodes_[x].grad.data[(*arg)[j] * n + j] += g[j];
        };
    return out;
}

Graph::Id Graph::reduce_mean(Id x) {
    const Tensor& X = nodes_[x].value;
    size_t n = X.numel();
    Tensor Y({1, 1});
    for (double v : X.data) Y.data[0] += v;
    Y.data[0] /= double(n);
    bool ng = nodes_[x].needs_grad;
    Id out = make(std::move(Y), ng);
    if (ng)
        nodes_[out].back = [this, x, out, n] {
            double gv = nodes_[out].grad.data[0] / double(n);
            for (size_t i = 0; i < n; ++i) nodes_[x].grad.data[i] += gv;
        };
    return out;
}

Graph::Id Graph::mse(Id pred, Id target) {
    Tensor w = Tensor::full(nodes_[pred].value.shape, 1.0);
    return weighted_mse(pred, target, w);
}

Graph::Id Graph::weighted_mse(Id pred, Id target, const Tensor& weights) {
    const Tensor& P = nodes_[pred].value;
    const Tensor& T = nodes_[target].value;
    require(P.shape == T.shape, "weighted_mse", P.shape, T.shape);
    require(P.numel() == weights.numel(), "weighted_mse weights", P.shape, weights.shape);
    size_t n = P.numel();
    Tensor Y({1, 1});
    for (size_t i = 0; i < n; ++i) {
        double d = P.data[i] - T.data[i];
        Y.data[0] += weights.data[i] * d * d;
    }
    Y.data[0] /= double(n);
    bool ng = nodes_[pred].needs_grad || nodes_[target].needs_grad;
    Id out = make(std::move(Y), ng);
    if (ng) {
        auto wcopy = std::make_shared<Tensor>(weights);
        nodes_[out].back = [this, pred, target, out, n, wcopy] {
            double gv = nodes_[out].grad.data[0];
            for (size_t i = 0; i < n; ++i) {
                double d = nodes_[pred].value.data[i] - nodes_[target].value.data[i];
                double g = gv * 2.0 * wcopy->data[i] * d / double(n);
                if (nodes_[pred].needs_grad) nodes_[pred].grad.data[i] += g;
                if (nodes_[target].needs_grad) nodes_[target].grad.data[i] -= g;
            }
        };
    }
    return out;
}

Graph::Id Graph::gated_scatter_sum(Id h, Id gate, std::vector<std::array<uint32_t, 3>> triples,
                                   size_t out_rows) {
    const Tensor& H = nodes_[h].value;
    const Tensor& G = nodes_[gate].value;
    require(H.shape.size() == 2 && G.shape.size() == 2 && H.shape[1] == G.shape[1],
            "gated_scatter_sum", H.shape, G.shape);
    size_t n = H.shape[1];
    Tensor Y({out_rows, n});
    for (const auto& t : triples)
        for (size_t j = 0; j < n; ++j)
            Y.data[t[0] * n + j] += G.data[t[2] * n + j] * H.data[t[1] * n + j];
    bool ng = nodes_[h].needs_grad || nodes_[gate].needs_grad;
    Id out = make(std::move(Y), ng);
    if (ng) {
        auto tr = std::make_shared<std::vector<std::array<uint32_t, 3>>>(std::move(triples));
        nodes_[out].back = [this, h, gate, out, n, tr] {
            const auto& g = nodes_[out].grad.data;
            for (const auto& t : *tr)
                for (size_t j = 0; j < n; ++j) {
                    double gv = g[t[0] * n + j];
                    if (nodes_[h].needs_grad)
                        nodes_[h].grad.data[t[1] * n + j] += gv * nodes_[gate].value.data[t[2] * n + j];
                    if (nodes_[gate].needs_grad)
                        nodes_[gate].grad.data[t[2] * n + j] += gv * nodes_[h].value.data[t[1] * n + j];
                }
        };
    }
    return out;
}

void Graph::backward(Id loss) {
    if (nodes_[loss].value.numel() != 1)
        throw NonScalarLoss("backward requires a scalar loss, got " +
                            std::to_string(nodes_[loss].value.numel()) + " elements");
    for (auto& n : nodes_) {
        n.grad = Tensor(n.value.shape);
    }
    nodes_[loss].grad.data[0] = 1.0;
    for (Id id = loss; id >= 0; --id)
        if (nodes_[id].back && nodes_[id].needs_grad) nodes_[id].back();
}

std::vector<std::pair<Tensor*, const Tensor*>> Graph::param_grads() const {
    std::vector<std::pair<Tensor*, const Tensor*>> out;
    for (const auto& [p, id] : param_ids_) out.push_back({p, &nodes_[id].grad});
    return out;
}

void adam_step(const std::vector<std::pair<Tensor*, const Tensor*>>& param_grads,
               AdamState& state, double lr) {
    adam_step(param_grads, state, lr, {});
}

void adam_step(const std::vector<std::pair<Tensor*, const Tensor*>>& param_grads,
               AdamState& state, double lr, const std::map<Tensor*, double>& lr_scale) {
    state.step += 1;
    double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
    double bc1 = 1.0 - std::pow(b1, double(state.step));
    double bc2 = 1.0 - std::pow(b2, double(state.step));
    for (const auto& [p, g] : param_grads) {
        if (p->shape != g->shape) throw ShapeMismatch("adam: grad/param shape mismatch");
        double plr = lr;
        if (auto s = lr_scale.find(p); s != lr_scale.end()) plr = lr * s->second;
        auto it = state.moments.find(p);
        if (it == state.moments.end())
            it = state.moments.emplace(p, std::make_pair(Tensor(p->shape), Tensor(p->shape))).first;
        Tensor& m = it->second.first;
        Tensor& v = it->second.second;
        for (size_t i = 0; i < p->numel(); ++i) {
            double gi = g->data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            double mh = m.data[i] / bc1;
            double vh = v.data[i] / bc2;
            p->data[i] -= plr * mh / (std::sqrt(vh) + state.cfg.eps);
        }
    }
}

namespace {

template <typename T>
void wle(std::ofstream& out, T v) { out.write(reinterpret_cast<const char*>(&v), sizeof(T)); }

template <typename T>
T rle(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("truncated checkpoint");
    return v;
}

}  // namespace

void write_checkpoint(const std::string& path,
                      const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out.write("TKPT", 4);
    wle<uint16_t>(out, 1);
    wle<uint32_t>(out, uint32_t(tensors.size()));
    for (const auto& [name, t] : tensors) {
        wle<uint16_t>(out, uint16_t(name.size()));
        out.write(name.data(), std::streamsize(name.size()));
        wle<uint8_t>(out, uint8_t(t->shape.size()));
        for (size_t d : t->shape) wle<uint32_t>(out, uint32_t(d));
        out.write(reinterpret_cast<const char*>(t->data.data()),
                  std::streamsize(t->data.size() * sizeof(double)));
    }
}

std::map<std::string, Tensor> read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("missing checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "TKPT", 4) != 0) throw FormatError("bad checkpoint magic");
    if (rle<uint16_t>(in) != 1) throw FormatError("unsupported checkpoint version");
    uint32_t count = rle<uint32_t>(in);
    std::map<std::string, Tensor> out;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t len = rle<uint16_t>(in);
        std::string name(len, '\0');
        in.read(name.data(), len);
        uint8_t rank = rle<uint8_t>(in);
        std::vector<size_t> shape(rank);
        for (auto& d : shape) d = rle<uint32_t>(in);
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data.data()),
                std::streamsize(t.data.size() * sizeof(double)));
        if (!in) throw FormatError("truncated checkpoint tensor data");
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace tk
}  // namespace finesdf
