#include "finesdf/brepnet.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace finesdf {
namespace net {

using tk::Graph;
using tk::Tensor;

FourierFeatureMap FourierFeatureMap::create(size_t m, double sigma, uint64_t seed) {
    FourierFeatureMap f;
    f.m = m;
    f.sigma = sigma;
    f.seed = seed;
    Rng rng(seed);
    f.freq = Tensor::randn({m, 3}, rng, sigma);
    return f;
}

void FourierFeatureMap::features(const Vec3& x, double* out) const {
    for (size_t i = 0; i < m; ++i) {
        double phase = 2.0 * M_PI *
                       (freq.data[3 * i] * x.x + freq.data[3 * i + 1] * x.y +
                        freq.data[3 * i + 2] * x.z);
        out[i] = std::sin(phase);
        out[m + i] = std::cos(phase);
    }
}

std::vector<double> locality_features(const Vec3& point, LocalityMode mode,
                                      const FourierFeatureMap* fmap) {
    if (mode == LocalityMode::RawXYZ) return {point.x, point.y, point.z};
    if (!fmap) throw MissingFrequencyMap("Fourier locality requested without a frequency map");
    std::vector<double> out(fmap->dim());
    fmap->features(point, out.data());
    return out;
}

PretrainModel PretrainModel::init(const EncoderConfig& enc, const DecoderConfig& dec,
                                  uint64_t seed) {
    PretrainModel m;
    m.enc = enc;
    m.dec = dec;
    Rng rng(seed);
    auto he = [&](std::vector<size_t> shape, size_t fan_in) {
        return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / double(fan_in)));
    };
    size_t H = enc.hidden;
    m.face_w1 = he({enc.face_c1, 6 * 9}, 6 * 9);
    m.face_b1 = Tensor({1, enc.face_c1});
    m.face_w2 = he({enc.face_c2, enc.face_c1 * 9}, enc.face_c1 * 9);
    m.face_b2 = Tensor({1, enc.face_c2});
    m.face_proj_w = he({2 * enc.face_c2, H}, 2 * enc.face_c2);
    m.face_proj_b = Tensor({1, H});
    m.edge_w1 = he({enc.edge_c1, 6 * 3}, 6 * 3);
    m.edge_b1 = Tensor({1, enc.edge_c1});
    m.edge_w2 = he({enc.edge_c2, enc.edge_c1 * 3}, enc.edge_c1 * 3);
    m.edge_b2 = Tensor({1, enc.edge_c2});
    m.edge_proj_w = he({2 * enc.edge_c2, H}, 2 * enc.edge_c2);
    m.edge_proj_b = Tensor({1, H});
    for (int r = 0; r < enc.rounds; ++r) {
        m.gate_w.push_back(he({H, H}, H));
        m.gate_b.push_back(Tensor({1, H}));
        m.self_w.push_back(he({H, H}, H));
        m.msg_w.push_back(he({H, H}, H));
        m.mp_b.push_back(Tensor({1, H}));
    }
    m.readout_w = he({2 * H, kLatentDim}, 2 * H);
    m.readout_b = Tensor({1, kLatentDim});

    if (dec.mode == LocalityMode::Fourier)
        m.fmap = FourierFeatureMap::create(dec.fourier_m, dec.fourier_sigma, dec.fourier_seed);
    size_t in = kLatentDim + dec.locality_dim();
    size_t skip = dec.latent_skip ? kLatentDim : 0;
    for (size_t l = 0; l < dec.depth; ++l) {
        size_t din = l == 0 ? in : dec.width + skip;
        size_t dout = l + 1 == dec.depth ? 1 : dec.width;
        m.dec_w.push_back(he({din, dout}, din));
        m.dec_b.push_back(Tensor({1, dout}));
    }
    return m;
}

std::vector<std::pair<std::string, Tensor*>> PretrainModel::named_params() {
    std::vector<std::pair<std::string, Tensor*>> out = {
        {"face_w1", &face_w1}, {"face_b1", &face_b1}, {"face_w2", &face_w2},
        {"face_b2", &face_b2}, {"face_proj_w", &face_proj_w}, {"face_proj_b", &face_proj_b},
        {"edge_w1", &edge_w1}, {"edge_b1", &edge_b1}, {"edge_w2", &edge_w2},
        {"edge_b2", &edge_b2}, {"edge_proj_w", &edge_proj_w}, {"edge_proj_b", &edge_proj_b},
        {"readout_w", &readout_w}, {"readout_b", &readout_b}};
    for (int r = 0; r < enc.rounds; ++r) {
        std::string s = std::to_string(r);
        out.push_back({"gate_w" + s, &gate_w[r]});
        out.push_back({"gate_b" + s, &gate_b[r]});
        out.push_back({"self_w" + s, &self_w[r]});
        out.push_back({"msg_w" + s, &msg_w[r]});
        out.push_back({"mp_b" + s, &mp_b[r]});
    }
    for (size_t l = 0; l < dec_w.size(); ++l) {
        std::string s = std::to_string(l);
        out.push_back({"dec_w" + s, &dec_w[l]});
        out.push_back({"dec_b" + s, &dec_b[l]});
    }
    return out;
}

std::vector<Tensor*> PretrainModel::encoder_params() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_params())
        if (name.rfind("dec_", 0) != 0) out.push_back(t);
    return out;
}

std::vector<Tensor*> PretrainModel::decoder_params() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_params())
        if (name.rfind("dec_", 0) == 0) out.push_back(t);
    return out;
}

size_t PretrainModel::param_count() const {
    size_t n = 0;
    for (auto& [name, t] : const_cast<PretrainModel*>(this)->named_params()) n += t->numel();
    return n;
}

Graph::Id PretrainModel::encode(Graph& g, const BrepGraph& graph) {
    graph.validate();
    if (graph.faces.empty()) throw GraphError("graph has no faces");
    const size_t nf = graph.faces.size(), ne = graph.edges.size();
    constexpr int FG = FacePatch::kGrid, ES = EdgeCurve::kSamples;

    // faces as (nf, 6, 10, 10)
    Tensor fx({nf, 6, FG, FG});
    for (size_t f = 0; f < nf; ++f)
        for (int c = 0; c < 6; ++c)
            for (int i = 0; i < FG; ++i)
                for (int j = 0; j < FG; ++j)
                    fx.data[((f * 6 + c) * FG + i) * FG + j] = graph.faces[f].grid[i][j][c];
    Graph::Id h = g.conv2d(g.input(std::move(fx)), g.param(&face_w1), g.param(&face_b1));
    h = g.elu(h);
    h = g.conv2d(h, g.param(&face_w2), g.param(&face_b2));
    h = g.elu(h);
    h = g.concat_cols(g.mean_pool(h), g.max_pool(h));
    h = g.elu(g.add_bias(g.matmul(h, g.param(&face_proj_w)), g.param(&face_proj_b)));

    // edges as (ne, 6, 10); a faceless edge set is a graph error upstream
    Graph::Id e = -1;
    if (ne > 0) {
        Tensor ex({ne, 6, ES});
        for (size_t k = 0; k < ne; ++k)
            for (int c = 0; c < 6; ++c)
                for (int s = 0; s < ES; ++s)
                    ex.data[(k * 6 + c) * ES + s] = graph.edges[k].samples[s][c];
        e = g.conv1d(g.input(std::move(ex)), g.param(&edge_w1), g.param(&edge_b1));
        e = g.elu(e);
        e = g.conv1d(e, g.param(&edge_w2), g.param(&edge_b2));
        e = g.elu(e);
        e = g.concat_cols(g.mean_pool(e), g.max_pool(e));
        e = g.elu(g.add_bias(g.matmul(e, g.param(&edge_proj_w)), g.param(&edge_proj_b)));
    }

    // message passing with edge-feature gates, both directions per edge
    std::vector<std::array<uint32_t, 3>> triples;
    triples.reserve(2 * graph.adjacency.size());
    for (const auto& adj : graph.adjacency) {
        triples.push_back({adj[0], adj[1], adj[2]});
        triples.push_back({adj[1], adj[0], adj[2]});
    }
    for (int r = 0; r < enc.rounds; ++r) {
        Graph::Id z = g.matmul(h, g.param(&self_w[r]));
        if (ne > 0) {
            Graph::Id gate = g.sigmoid(
                g.add_bias(g.matmul(e, g.param(&gate_w[r])), g.param(&gate_b[r])));
            Graph::Id agg = g.gated_scatter_sum(h, gate, triples, nf);
            z = g.add(z, g.matmul(agg, g.param(&msg_w[r])));
        }
        h = g.elu(g.add_bias(z, g.param(&mp_b[r])));
    }

    Graph::Id pooled = g.concat_cols(g.mean_rows(h), g.max_rows(h));
    return g.add_bias(g.matmul(pooled, g.param(&readout_w)), g.param(&readout_b));
}

Graph::Id PretrainModel::decode(Graph& g, Graph::Id latent, const Tensor& locality) {
    if (locality.shape.size() != 2 || locality.shape[1] != dec.locality_dim())
        throw ShapeMismatch("locality rows do not match decoder config");
    size_t n = locality.shape[0];
    Graph::Id zrows = g.broadcast_rows(latent, n);
    Graph::Id x = g.concat_cols(zrows, g.input(locality));
    for (size_t l = 0; l < dec_w.size(); ++l) {
        if (l > 0 && dec.latent_skip) x = g.concat_cols(zrows, x);
        x = g.add_bias(g.matmul(x, g.param(&dec_w[l])), g.param(&dec_b[l]));
        if (l + 1 < dec_w.size()) x = g.elu(x);
    }
    return x;
}

Tensor PretrainModel::locality_rows(const std::vector<Vec3>& points) const {
    size_t ld = dec.locality_dim();
    Tensor rows({points.size(), ld});
    for (size_t i = 0; i < points.size(); ++i) {
        if (dec.mode == LocalityMode::RawXYZ) {
            rows.data[i * ld] = points[i].x;
            rows.data[i * ld + 1] = points[i].y;
            rows.data[i * ld + 2] = points[i].z;
        } else {
            if (!fmap) throw MissingFrequencyMap("decoder configured Fourier without a map");
            fmap->features(points[i], &rows.data[i * ld]);
        }
    }
    return rows;
}

std::vector<double> PretrainModel::encode_latent(const BrepGraph& graph) {
    Graph g;
    Graph::Id z = encode(g, graph);
    return g.val(z).data;
}

std::vector<double> PretrainModel::decode_values(const std::vector<double>& latent,
                                                 const std::vector<Vec3>& points) {
    Graph g;
    Graph::Id z = g.input(Tensor::from({1, kLatentDim}, latent));
    Graph::Id out = decode(g, z, locality_rows(points));
    return g.val(out).data;
}

void PretrainModel::save(const std::string& path) {
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for (auto& [name, t] : named_params()) tensors.push_back({name, t});
    tk::write_checkpoint(path, tensors);
    nlohmann::json j;
    j["encoder"] = {{"face_c1", enc.face_c1}, {"face_c2", enc.face_c2},
                    {"edge_c1", enc.edge_c1}, {"edge_c2", enc.edge_c2},
                    {"hidden", enc.hidden},   {"rounds", enc.rounds}};
    j["decoder"] = {{"width", dec.width},
                    {"depth", dec.depth},
                    {"locality_mode", dec.mode == LocalityMode::RawXYZ ? "raw_xyz" : "fourier"},
                    {"fourier_m", dec.fourier_m},
                    {"fourier_sigma", dec.fourier_sigma},
                    {"fourier_seed", dec.fourier_seed},
                    {"latent_skip", dec.latent_skip}};
    std::ofstream out(path + ".json");
    out << j.dump(1);
}

PretrainModel PretrainModel::load(const std::string& path) {
    std::ifstream cfg(path + ".json");
    if (!cfg) throw MissingArtifact("missing model config header: " + path + ".json");
    nlohmann::json j;
    cfg >> j;
    EncoderConfig enc;
    enc.face_c1 = j["encoder"]["face_c1"];
    enc.face_c2 = j["encoder"]["face_c2"];
    enc.edge_c1 = j["encoder"]["edge_c1"];
    enc.edge_c2 = j["encoder"]["edge_c2"];
    enc.hidden = j["encoder"]["hidden"];
    enc.rounds = j["encoder"]["rounds"];
    DecoderConfig dec;
    dec.width = j["decoder"]["width"];
    dec.depth = j["decoder"]["depth"];
    dec.mode = j["decoder"]["locality_mode"] == "fourier" ? LocalityMode::Fourier
                                                          : LocalityMode::RawXYZ;
    dec.fourier_m = j["decoder"]["fourier_m"];
    dec.fourier_sigma = j["decoder"]["fourier_sigma"];
    dec.fourier_seed = j["decoder"]["fourier_seed"];
    dec.latent_skip = j["decoder"]["latent_skip"];
    PretrainModel m = init(enc, dec, 0);
    auto tensors = tk::read_checkpoint(path);
    for (auto& [name, t] : m.named_params()) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw FormatError("checkpoint missing tensor: " + name);
        if (it->second.shape != t->shape) throw FormatError("checkpoint shape mismatch: " + name);
        *t = it->second;
    }
    return m;
}

}  // namespace net
}  // namespace finesdf
