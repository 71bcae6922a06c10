#pragma once

#include <optional>
#include <string>
#include <vector>

#include "finesdf/geometry.hpp"
#include "finesdf/tensorkit.hpp"

namespace finesdf {
namespace net {

constexpr size_t kLatentDim = 64;

enum class LocalityMode : int { RawXYZ = 0, Fourier = 1 };

struct MissingFrequencyMap : std::runtime_error { using std::runtime_error::runtime_error; };

// Fixed random frequency matrix, frozen after construction.
struct FourierFeatureMap {
    size_t m = 128;
    double sigma = 6.0;
    uint64_t seed = 1;
    tk::Tensor freq;  // (m, 3), entries ~ Normal(0, sigma^2)

    static FourierFeatureMap create(size_t m, double sigma, uint64_t seed);
    size_t dim() const { return 2 * m; }
    // [sin(2 pi B x) || cos(2 pi B x)]
    void features(const Vec3& x, double* out) const;
};

// Locality indicator for one point: 3 raw coordinates or 2m Fourier features.
std::vector<double> locality_features(const Vec3& point, LocalityMode mode,
                                      const FourierFeatureMap* fmap);

struct EncoderConfig {
    size_t face_c1 = 16, face_c2 = 32;   // 2D CNN channel widths
    size_t edge_c1 = 16, edge_c2 = 32;   // 1D CNN channel widths
    size_t hidden = 64;                  // node feature width
    int rounds = 3;                      // message-passing rounds

    static EncoderConfig desk() { return {}; }
    // Instantiation-only reference configuration at full paper scale.
    static EncoderConfig full_scale() { return {128, 256, 64, 128, 752, 3}; }
};

struct DecoderConfig {
    size_t width = 256;
    size_t depth = 4;  // total linear layers
    LocalityMode mode = LocalityMode::RawXYZ;
    size_t fourier_m = 128;
    double fourier_sigma = 6.0;
    uint64_t fourier_seed = 1;
    bool latent_skip = false;  // re-concatenate the latent at every hidden layer

    static DecoderConfig desk_crashbox() { return {256, 4, LocalityMode::RawXYZ}; }
    static DecoderConfig desk_bottle() { return {512, 5, LocalityMode::Fourier}; }

    size_t locality_dim() const { return mode == LocalityMode::RawXYZ ? 3 : 2 * fourier_m; }
};

// Encoder + locality map + implicit SDF decoder with all trainable weights.
struct PretrainModel {
    EncoderConfig enc;
    DecoderConfig dec;
    std::optional<FourierFeatureMap> fmap;

    tk::Tensor face_w1, face_b1, face_w2, face_b2, face_proj_w, face_proj_b;
    tk::Tensor edge_w1, edge_b1, edge_w2, edge_b2, edge_proj_w, edge_proj_b;
    std::vector<tk::Tensor> gate_w, gate_b, self_w, msg_w, mp_b;
    tk::Tensor readout_w, readout_b;
    std::vector<tk::Tensor> dec_w, dec_b;

    static PretrainModel init(const EncoderConfig& enc, const DecoderConfig& dec, uint64_t seed);

    size_t param_count() const;
    std::vector<std::pair<std::string, tk::Tensor*>> named_params();
    std::vector<tk::Tensor*> encoder_params();
    std::vector<tk::Tensor*> decoder_params();

    // Graph -> (1, 64) latent node. Throws GraphError on bad adjacency.
    tk::Graph::Id encode(tk::Graph& g, const BrepGraph& graph);

    // latent: (1, 64) node; locality: (n, locality_dim) constant rows.
    // Returns (n, 1) predicted signed distances.
    tk::Graph::Id decode(tk::Graph& g, tk::Graph::Id latent, const tk::Tensor& locality);

    // Convenience: locality rows for a point list.
    tk::Tensor locality_rows(const std::vector<Vec3>& points) const;

    // Inference without tracking gradients elsewhere.
    std::vector<double> encode_latent(const BrepGraph& graph);
    std::vector<double> decode_values(const std::vector<double>& latent,
                                      const std::vector<Vec3>& points);

    void save(const std::string& path);  // TKPT + path .json config header
    static PretrainModel load(const std::string& path);
};

}  // namespace net
}  // namespace finesdf
