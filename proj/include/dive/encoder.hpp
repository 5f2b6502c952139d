#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dive/errors.hpp"
#include "dive/numeric.hpp"
#include "dive/rng.hpp"

namespace dive {

// Hidden layers use tanh; the output layer is linear followed by L2
// normalization, so embeddings always live on the unit hypersphere.
struct LayerWeights {
    Matrix w;  // out x in
    Vec b;     // out
};

struct EncoderWeights {
    std::vector<LayerWeights> layers;

    std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().w.cols; }
    std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().w.rows; }
};

struct ModelSpec {
    std::size_t image_input_dim = 32;
    std::size_t text_input_dim = 32;
    std::size_t hidden_width = 64;
    std::size_t hidden_layers = 2;
    std::size_t embed_dim = 16;
    double init_temperature = 0.07;
};

inline constexpr double kTemperatureMin = 0.001;
inline constexpr double kTemperatureMax = 10.0;

struct TwoTowerModel {
    EncoderWeights image_encoder;
    EncoderWeights text_encoder;
    double log_temperature = 0.0;

    double temperature() const { return std::exp(log_temperature); }

    void clamp_temperature() {
        const double lo = std::log(kTemperatureMin);
        const double hi = std::log(kTemperatureMax);
        if (log_temperature < lo) log_temperature = lo;
        if (log_temperature > hi) log_temperature = hi;
    }
};

inline LayerWeights init_layer(std::size_t out, std::size_t in, SeededRng& rng) {
    LayerWeights layer{Matrix(out, in), Vec(out, 0.0)};
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (double& w : layer.w.data) w = rng.uniform(-bound, bound);
    return layer;
}

inline EncoderWeights init_encoder(std::size_t input_dim, const ModelSpec& spec, SeededRng& rng) {
    EncoderWeights enc;
    std::size_t in = input_dim;
    for (std::size_t k = 0; k < spec.hidden_layers; ++k) {
        enc.layers.push_back(init_layer(spec.hidden_width, in, rng));
        in = spec.hidden_width;
    }
    enc.layers.push_back(init_layer(spec.embed_dim, in, rng));
    return enc;
}

inline TwoTowerModel init_two_tower(const ModelSpec& spec, SeededRng& rng) {
    TwoTowerModel model;
    model.image_encoder = init_encoder(spec.image_input_dim, spec, rng);
    model.text_encoder = init_encoder(spec.text_input_dim, spec, rng);
    model.log_temperature = std::log(spec.init_temperature);
    return model;
}

// Immutable deep copy of the model taken before fine-tuning.
class FrozenSnapshot {
public:
    explicit FrozenSnapshot(TwoTowerModel model) : model_(std::move(model)) {}

    const TwoTowerModel& model() const { return model_; }

private:
    TwoTowerModel model_;
};

struct ForwardTrace {
    std::vector<Vec> inputs;  // inputs[k] feeds layer k; inputs[0] is the raw input
    Vec pre_norm;             // last linear output before normalization
    double pre_norm_len = 0.0;
    Vec embedding;
};

inline ForwardTrace forward_trace(const EncoderWeights& enc, const Vec& input) {
    if (input.size() != enc.input_dim())
        throw ShapeMismatch("forward: input length does not match encoder input_dim");
    ForwardTrace trace;
    trace.inputs.reserve(enc.layers.size());
    Vec a = input;
    for (std::size_t k = 0; k < enc.layers.size(); ++k) {
        trace.inputs.push_back(a);
        Vec z = matvec(enc.layers[k].w, a);
        axpy(1.0, enc.layers[k].b, z);
        if (k + 1 < enc.layers.size()) {
            for (double& x : z) x = std::tanh(x);
        }
        a = std::move(z);
    }
    trace.pre_norm = a;
    trace.pre_norm_len = norm(a);
    if (!(trace.pre_norm_len > kNormEpsilon))
        throw ZeroNorm("forward: pre-normalization output has near-zero norm");
    trace.embedding.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) trace.embedding[i] = a[i] / trace.pre_norm_len;
    return trace;
}

inline Vec forward(const EncoderWeights& enc, const Vec& input) {
    return forward_trace(enc, input).embedding;
}

struct EncoderGrads {
    std::vector<LayerWeights> layers;  // same shapes as the encoder
    Vec input_grad;
};

inline EncoderGrads zero_grads_like(const EncoderWeights& enc) {
    EncoderGrads g;
    g.layers.reserve(enc.layers.size());
    for (const auto& layer : enc.layers)
        g.layers.push_back({Matrix(layer.w.rows, layer.w.cols), Vec(layer.b.size(), 0.0)});
    g.input_grad.assign(enc.input_dim(), 0.0);
    return g;
}

// Reverse-mode pass for (upstream . embedding). The normalization Jacobian
// (I - e e^T)/|z| maps the upstream gradient into pre-normalization space.
inline EncoderGrads backward(const EncoderWeights& enc, const ForwardTrace& trace,
                             const Vec& upstream) {
    if (upstream.size() != enc.output_dim())
        throw ShapeMismatch("backward: upstream gradient has wrong length");
    EncoderGrads grads = zero_grads_like(enc);

    const double ge = dot(upstream, trace.embedding);
    Vec dz(upstream.size());
    for (std::size_t i = 0; i < dz.size(); ++i)
        dz[i] = (upstream[i] - ge * trace.embedding[i]) / trace.pre_norm_len;

    for (std::size_t k = enc.layers.size(); k-- > 0;) {
        const Vec& a_in = trace.inputs[k];
        auto& layer_grad = grads.layers[k];
        for (std::size_t r = 0; r < enc.layers[k].w.rows; ++r) {
            const double g = dz[r];
            layer_grad.b[r] = g;
            double* row = &layer_grad.w.data[r * layer_grad.w.cols];
            for (std::size_t c = 0; c < layer_grad.w.cols; ++c) row[c] = g * a_in[c];
        }
        Vec da = matvec_transposed(enc.layers[k].w, dz);
        if (k > 0) {
            // a_in was produced by tanh, so tanh' = 1 - a_in^2
            for (std::size_t i = 0; i < da.size(); ++i) da[i] *= 1.0 - a_in[i] * a_in[i];
        }
        dz = std::move(da);
    }
    grads.input_grad = std::move(dz);
    return grads;
}

inline EncoderGrads backward(const EncoderWeights& enc, const Vec& input, const Vec& upstream) {
    return backward(enc, forward_trace(enc, input), upstream);
}

// Per-parameter accumulators mirroring a TwoTowerModel.
struct GradientBag {
    std::vector<LayerWeights> image_layers;
    std::vector<LayerWeights> text_layers;
    double log_temperature_grad = 0.0;

    static GradientBag like(const TwoTowerModel& model) {
        GradientBag bag;
        auto shape = [](const EncoderWeights& enc) {
            std::vector<LayerWeights> out;
            out.reserve(enc.layers.size());
            for (const auto& layer : enc.layers)
                out.push_back({Matrix(layer.w.rows, layer.w.cols), Vec(layer.b.size(), 0.0)});
            return out;
        };
        bag.image_layers = shape(model.image_encoder);
        bag.text_layers = shape(model.text_encoder);
        return bag;
    }

    void zero() {
        for (auto& layer : image_layers) {
            std::fill(layer.w.data.begin(), layer.w.data.end(), 0.0);
            std::fill(layer.b.begin(), layer.b.end(), 0.0);
        }
        for (auto& layer : text_layers) {
            std::fill(layer.w.data.begin(), layer.w.data.end(), 0.0);
            std::fill(layer.b.begin(), layer.b.end(), 0.0);
        }
        log_temperature_grad = 0.0;
    }
};

inline void accumulate(std::vector<LayerWeights>& into, const EncoderGrads& grads, double scale) {
    if (into.size() != grads.layers.size()) throw ShapeMismatch("accumulate: layer count differs");
    for (std::size_t k = 0; k < into.size(); ++k) {
        if (!into[k].w.same_shape(grads.layers[k].w))
            throw ShapeMismatch("accumulate: weight shape differs");
        for (std::size_t i = 0; i < into[k].w.data.size(); ++i)
            into[k].w.data[i] += scale * grads.layers[k].w.data[i];
        for (std::size_t i = 0; i < into[k].b.size(); ++i)
            into[k].b[i] += scale * grads.layers[k].b[i];
    }
}

inline TwoTowerModel interpolate_weights(const TwoTowerModel& pre, const TwoTowerModel& ft,
                                         double coeff) {
    if (!(coeff >= 0.0 && coeff <= 1.0))
        throw CoeffOutOfRange("interpolate_weights: coeff must be in [0, 1]");
    if (coeff == 0.0) return pre;
    if (coeff == 1.0) return ft;
    auto blend_encoder = [coeff](const EncoderWeights& a, const EncoderWeights& b) {
        if (a.layers.size() != b.layers.size())
            throw ShapeMismatch("interpolate_weights: layer count differs");
        EncoderWeights out = a;
        for (std::size_t k = 0; k < a.layers.size(); ++k) {
            if (!a.layers[k].w.same_shape(b.layers[k].w) || a.layers[k].b.size() != b.layers[k].b.size())
                throw ShapeMismatch("interpolate_weights: layer shape differs");
            for (std::size_t i = 0; i < out.layers[k].w.data.size(); ++i)
                out.layers[k].w.data[i] =
                    (1.0 - coeff) * a.layers[k].w.data[i] + coeff * b.layers[k].w.data[i];
            for (std::size_t i = 0; i < out.layers[k].b.size(); ++i)
                out.layers[k].b[i] = (1.0 - coeff) * a.layers[k].b[i] + coeff * b.layers[k].b[i];
        }
        return out;
    };
    TwoTowerModel out;
    out.image_encoder = blend_encoder(pre.image_encoder, ft.image_encoder);
    out.text_encoder = blend_encoder(pre.text_encoder, ft.text_encoder);
    out.log_temperature = (1.0 - coeff) * pre.log_temperature + coeff * ft.log_temperature;
    return out;
}

// --- checkpoint io ---------------------------------------------------------
//
// Layout (little-endian): magic "DIVE", u32 version, then for the image tower
// and the text tower in that order: u32 layer count followed by per-layer
// (u32 rows, u32 cols, rows*cols f64 row-major weights, rows f64 biases),
// and finally the f64 log_temperature.

namespace detail {

inline constexpr char kCheckpointMagic[4] = {'D', 'I', 'V', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FileHandle = std::unique_ptr<std::FILE, FileCloser>;

inline void write_bytes(std::FILE* f, const void* data, std::size_t n) {
    if (std::fwrite(data, 1, n, f) != n) throw IoError("checkpoint: short write");
}

inline void read_bytes(std::FILE* f, void* data, std::size_t n) {
    if (std::fread(data, 1, n, f) != n) throw FormatError("checkpoint: truncated file");
}

inline void write_u32(std::FILE* f, std::uint32_t v) {
    unsigned char buf[4];
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_bytes(f, buf, 4);
}

inline std::uint32_t read_u32(std::FILE* f) {
    unsigned char buf[4];
    read_bytes(f, buf, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
    return v;
}

inline void write_f64(std::FILE* f, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    write_bytes(f, buf, 8);
}

inline double read_f64(std::FILE* f) {
    unsigned char buf[8];
    read_bytes(f, buf, 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline void write_tower(std::FILE* f, const EncoderWeights& enc) {
    write_u32(f, static_cast<std::uint32_t>(enc.layers.size()));
    for (const auto& layer : enc.layers) {
        write_u32(f, static_cast<std::uint32_t>(layer.w.rows));
        write_u32(f, static_cast<std::uint32_t>(layer.w.cols));
        for (double v : layer.w.data) write_f64(f, v);
        for (double v : layer.b) write_f64(f, v);
    }
}

inline EncoderWeights read_tower(std::FILE* f) {
    const std::uint32_t count = read_u32(f);
    if (count == 0 || count > 1024) throw FormatError("checkpoint: implausible layer count");
    EncoderWeights enc;
    std::size_t expected_in = 0;
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::uint32_t rows = read_u32(f);
        const std::uint32_t cols = read_u32(f);
        if (rows == 0 || cols == 0 || rows > (1u << 20) || cols > (1u << 20))
            throw FormatError("checkpoint: implausible layer shape");
        if (k > 0 && cols != expected_in)
            throw FormatError("checkpoint: layer shapes do not chain");
        LayerWeights layer{Matrix(rows, cols), Vec(rows, 0.0)};
        for (double& v : layer.w.data) v = read_f64(f);
        for (double& v : layer.b) v = read_f64(f);
        expected_in = rows;
        enc.layers.push_back(std::move(layer));
    }
    return enc;
}

}  // namespace detail

inline void save_checkpoint(const TwoTowerModel& model, const std::filesystem::path& path) {
    detail::FileHandle f(std::fopen(path.string().c_str(), "wb"));
    if (!f) throw IoError("checkpoint: cannot open for writing: " + path.string());
    detail::write_bytes(f.get(), detail::kCheckpointMagic, 4);
    detail::write_u32(f.get(), detail::kCheckpointVersion);
    detail::write_tower(f.get(), model.image_encoder);
    detail::write_tower(f.get(), model.text_encoder);
    detail::write_f64(f.get(), model.log_temperature);
    if (std::fflush(f.get()) != 0) throw IoError("checkpoint: flush failed");
}

inline TwoTowerModel load_checkpoint(const std::filesystem::path& path) {
    detail::FileHandle f(std::fopen(path.string().c_str(), "rb"));
    if (!f) throw IoError("checkpoint: cannot open for reading: " + path.string());
    char magic[4];
    detail::read_bytes(f.get(), magic, 4);
    if (std::memcmp(magic, detail::kCheckpointMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic bytes");
    const std::uint32_t version = detail::read_u32(f.get());
    if (version != detail::kCheckpointVersion)
        throw FormatError("checkpoint: unsupported format version");
    TwoTowerModel model;
    model.image_encoder = detail::read_tower(f.get());
    model.text_encoder = detail::read_tower(f.get());
    model.log_temperature = detail::read_f64(f.get());
    if (std::fgetc(f.get()) != EOF) throw FormatError("checkpoint: trailing bytes");
    return model;
}

}  // namespace dive
