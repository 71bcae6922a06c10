#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "finesdf/core.hpp"

namespace finesdf {
namespace tk {

struct NonScalarLoss : std::runtime_error { using std::runtime_error::runtime_error; };

struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), 0.0);
    }
    static size_t numel_of(const std::vector<size_t>& s) {
        size_t n = 1;
        for (size_t d : s) n *= d;
        return n;
    }
    size_t numel() const { return data.size(); }

    static Tensor zeros(std::vector<size_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<size_t> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor randn(std::vector<size_t> s, Rng& rng, double stddev) {
        Tensor t(std::move(s));
        for (double& v : t.data) v = stddev * rng.gaussian();
        return t;
    }
    static Tensor from(std::vector<size_t> s, std::vector<double> d) {
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(d);
        if (t.data.size() != numel_of(t.shape)) throw ShapeMismatch("tensor data/shape mismatch");
        return t;
    }
};

// Reverse-mode tape over dense f64 tensors. Single-owner: build a fresh
// Graph per forward/backward pass; parameter tensors live outside and are
// registered with param().
class Graph {
public:
    using Id = int32_t;

    Id input(Tensor t);          // constant leaf (no gradient)
    Id param(Tensor* p);         // trainable leaf; repeated calls dedupe

    const Tensor& val(Id id) const { return nodes_[id].value; }
    const Tensor& grad(Id id) const { return nodes_[id].grad; }

    Id matmul(Id a, Id b);               // (m,k) x (k,n)
    Id add(Id a, Id b);                  // same shape
    Id add_bias(Id a, Id b);             // (m,n) + (1,n) row bias
    Id sub(Id a, Id b);
    Id mul(Id a, Id b);                  // elementwise
    Id scale(Id a, double s);
    Id concat_cols(Id a, Id b);          // (m,p) || (m,q)
    Id broadcast_rows(Id v, size_t m);   // (1,n) -> (m,n); grad sums over rows
    Id relu(Id a);
    Id elu(Id a);
    Id tanh_(Id a);
    Id sigmoid(Id a);
    Id sin_(Id a);
    Id cos_(Id a);
    // x: (N,Cin,H,W), w: (Cout, Cin*3*3), b: (1,Cout); 3x3, stride 1, zero pad
    Id conv2d(Id x, Id w, Id b);
    // x: (N,Cin,L), w: (Cout, Cin*3), b: (1,Cout); kernel 3, stride 1, zero pad
    Id conv1d(Id x, Id w, Id b);
    Id mean_pool(Id x);                  // (N,C,spatial...) -> (N,C)
    Id max_pool(Id x);                   // (N,C,spatial...) -> (N,C)
    Id mean_rows(Id x);                  // (m,n) -> (1,n)
    Id max_rows(Id x);                   // (m,n) -> (1,n)
    Id reduce_mean(Id x);                // -> (1,1)
    Id mse(Id pred, Id target);
    Id weighted_mse(Id pred, Id target, const Tensor& weights);  // weights constant
    // out[dst] += gate[g] (*) h[src] for each (dst, src, g) triple; h and
    // gate are (rows, n) matrices. The message-passing aggregation.
    Id gated_scatter_sum(Id h, Id gate, std::vector<std::array<uint32_t, 3>> triples,
                         size_t out_rows);

    // Populates gradients for every param leaf; loss must be scalar.
    void backward(Id loss);

    // (parameter tensor, accumulated gradient) after backward().
    std::vector<std::pair<Tensor*, const Tensor*>> param_grads() const;

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        Tensor* bound_param = nullptr;
        std::function<void()> back;  // accumulates into parents' grads
    };
    Id make(Tensor value, bool needs_grad);
    std::vector<Node> nodes_;
    std::map<Tensor*, Id> param_ids_;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig cfg;
    int64_t step = 0;
    std::map<Tensor*, std::pair<Tensor, Tensor>> moments;  // m, v per parameter
};

void adam_step(const std::vector<std::pair<Tensor*, const Tensor*>>& param_grads,
               AdamState& state, double lr);
// Per-parameter learning-rate multipliers (e.g. finetuned encoder at 0.01x).
void adam_step(const std::vector<std::pair<Tensor*, const Tensor*>>& param_grads,
               AdamState& state, double lr, const std::map<Tensor*, double>& lr_scale);

// Checkpoint format: magic "TKPT", version u16, count u32, then records of
// (name_len u16, name bytes, rank u8, dims u32[], f64 data LE).
void write_checkpoint(const std::string& path,
                      const std::vector<std::pair<std::string, const Tensor*>>& tensors);
std::map<std::string, Tensor> read_checkpoint(const std::string& path);

}  // namespace tk
}  // namespace finesdf
