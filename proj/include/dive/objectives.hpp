#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dive/errors.hpp"
#include "dive/numeric.hpp"

namespace dive {

// Index-aligned image/text embedding pairs. Validation is explicit so tests
// and finite-difference probes can operate on slightly off-sphere vectors.
struct EmbeddingBatch {
    std::vector<Vec> image;
    std::vector<Vec> text;
};

inline void validate_embedding_batch(const EmbeddingBatch& batch, double tol = 1e-9) {
    if (batch.image.size() != batch.text.size())
        throw ShapeMismatch("embedding batch: image/text counts differ");
    for (const auto& e : batch.image)
        if (!is_unit_norm(e, tol)) throw NotNormalized("embedding batch: image vector off-sphere");
    for (const auto& e : batch.text)
        if (!is_unit_norm(e, tol)) throw NotNormalized("embedding batch: text vector off-sphere");
}

// Loss plus exact gradients w.r.t. the embeddings fed in. For the reference
// losses (avl/pvl/snd/cosine variants) the gradients are w.r.t. the
// fine-tuning embeddings; the frozen side never receives gradient.
struct LossValue {
    double value = 0.0;
    std::vector<Vec> image_grads;
    std::vector<Vec> text_grads;
    double grad_log_temperature = 0.0;
};

enum class Method { VanillaFT, LPFT, FLYP, FLYPReplay, SnD, DiVE, DiVECosine };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::VanillaFT: return "VanillaFT";
        case Method::LPFT: return "LPFT";
        case Method::FLYP: return "FLYP";
        case Method::FLYPReplay: return "FLYPReplay";
        case Method::SnD: return "SnD";
        case Method::DiVE: return "DiVE";
        case Method::DiVECosine: return "DiVECosine";
    }
    return "?";
}

struct MethodSpec {
    Method method = Method::FLYP;
    double lambda = 1000.0;      // weight on AVL + PVL
    double lambda_snd = 1.0;     // weight on the SnD distillation term
    double lambda_aux = 1.0;     // weight on the replay contrastive term
    bool use_avl = true;         // DiVE/DiVECosine component toggles
    bool use_pvl = true;

    bool uses_reference() const {
        return method == Method::FLYPReplay || method == Method::SnD || method == Method::DiVE ||
               method == Method::DiVECosine;
    }
    bool uses_head() const { return method == Method::VanillaFT || method == Method::LPFT; }
    bool uses_difference_vectors() const {
        return method == Method::DiVE || method == Method::DiVECosine;
    }
};

// Symmetric InfoNCE over B index-aligned pairs. Softmax rows/columns are
// stabilized by max-logit subtraction. Also returns dL/d(log tau).
inline LossValue contrastive_loss(const std::vector<Vec>& image, const std::vector<Vec>& text,
                                  double tau) {
    const std::size_t b = image.size();
    if (b == 0 || text.size() != b) throw EmptyBatch("contrastive_loss: batch must be nonempty and aligned");
    if (!(tau > 0.0)) throw SpecInvalid("contrastive_loss: tau must be positive");

    Matrix logits(b, b);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) logits(i, j) = dot(image[i], text[j]) / tau;

    Matrix dlogits(b, b);  // dL/dS
    double loss = 0.0;
    const double inv2b = 1.0 / (2.0 * static_cast<double>(b));

    // image -> text direction (softmax over rows)
    for (std::size_t i = 0; i < b; ++i) {
        double mx = logits(i, 0);
        for (std::size_t j = 1; j < b; ++j) mx = std::max(mx, logits(i, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < b; ++j) denom += std::exp(logits(i, j) - mx);
        loss -= inv2b * (logits(i, i) - mx - std::log(denom));
        for (std::size_t j = 0; j < b; ++j) {
            const double p = std::exp(logits(i, j) - mx) / denom;
            dlogits(i, j) += inv2b * (p - (i == j ? 1.0 : 0.0));
        }
    }
    // text -> image direction (softmax over columns)
    for (std::size_t j = 0; j < b; ++j) {
        double mx = logits(0, j);
        for (std::size_t i = 1; i < b; ++i) mx = std::max(mx, logits(i, j));
        double denom = 0.0;
        for (std::size_t i = 0; i < b; ++i) denom += std::exp(logits(i, j) - mx);
        loss -= inv2b * (logits(j, j) - mx - std::log(denom));
        for (std::size_t i = 0; i < b; ++i) {
            const double q = std::exp(logits(i, j) - mx) / denom;
            dlogits(i, j) += inv2b * (q - (i == j ? 1.0 : 0.0));
        }
    }

    if (!std::isfinite(loss)) throw NonFinite("contrastive_loss: loss overflowed");

    LossValue out;
    out.value = loss;
    out.image_grads.assign(b, Vec(image[0].size(), 0.0));
    out.text_grads.assign(b, Vec(text[0].size(), 0.0));
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            const double g = dlogits(i, j);
            if (g == 0.0) continue;
            axpy(g / tau, text[j], out.image_grads[i]);
            axpy(g / tau, image[i], out.text_grads[j]);
            // S = dot/exp(log tau)  =>  dS/dlog tau = -S
            out.grad_log_temperature -= g * logits(i, j);
        }
    }
    return out;
}

struct ClassifierHead {
    Matrix w;  // |C| x d
    Vec b;     // |C|
};

struct HeadLoss {
    double value = 0.0;
    std::vector<Vec> feature_grads;
    Matrix grad_w;
    Vec grad_b;
};

// Mean softmax cross-entropy over the batch, with exact gradients for the
// features and the head parameters.
inline HeadLoss cross_entropy_head_loss(const std::vector<Vec>& features,
                                        const std::vector<int>& labels,
                                        const ClassifierHead& head) {
    const std::size_t b = features.size();
    if (b == 0 || labels.size() != b) throw EmptyBatch("cross_entropy_head_loss: empty or misaligned batch");
    const std::size_t num_classes = head.w.rows;

    HeadLoss out;
    out.feature_grads.assign(b, Vec(head.w.cols, 0.0));
    out.grad_w = Matrix(head.w.rows, head.w.cols);
    out.grad_b.assign(head.b.size(), 0.0);

    const double invb = 1.0 / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
            throw LabelOutOfRange("cross_entropy_head_loss: label outside [0, |C|)");
        Vec logits = matvec(head.w, features[i]);
        axpy(1.0, head.b, logits);
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double denom = 0.0;
        for (double v : logits) denom += std::exp(v - mx);
        const std::size_t y = static_cast<std::size_t>(labels[i]);
        out.value += invb * (std::log(denom) - (logits[y] - mx));
        for (std::size_t c = 0; c < num_classes; ++c) {
            const double p = std::exp(logits[c] - mx) / denom;
            const double g = invb * (p - (c == y ? 1.0 : 0.0));
            out.grad_b[c] += g;
            double* wrow = &out.grad_w.data[c * out.grad_w.cols];
            const double* hrow = &head.w.data[c * head.w.cols];
            for (std::size_t k = 0; k < head.w.cols; ++k) {
                wrow[k] += g * features[i][k];
                out.feature_grads[i][k] += g * hrow[k];
            }
        }
    }
    return out;
}

// AVL: (1/B') sum_j (|u_j - m|^2 + |v_j - m|^2). m is a detached EMA
// target; no gradient flows through it.
inline LossValue avl(const std::vector<Vec>& u_batch, const std::vector<Vec>& v_batch,
                     const Vec& m) {
    const std::size_t b = u_batch.size();
    if (b == 0) throw EmptyBatch("avl: empty batch");
    if (v_batch.size() != b) throw ShapeMismatch("avl: u/v counts differ");
    LossValue out;
    out.image_grads.assign(b, Vec(m.size(), 0.0));
    out.text_grads.assign(b, Vec(m.size(), 0.0));
    const double invb = 1.0 / static_cast<double>(b);
    for (std::size_t j = 0; j < b; ++j) {
        if (u_batch[j].size() != m.size() || v_batch[j].size() != m.size())
            throw ShapeMismatch("avl: vector dimension differs from m");
        for (std::size_t k = 0; k < m.size(); ++k) {
            const double du = u_batch[j][k] - m[k];
            const double dv = v_batch[j][k] - m[k];
            out.value += invb * (du * du + dv * dv);
            out.image_grads[j][k] = 2.0 * invb * du;
            out.text_grads[j][k] = 2.0 * invb * dv;
        }
    }
    return out;
}

// PVL: (1/B') sum_j |u_j - v_j|^2.
inline LossValue pvl(const std::vector<Vec>& u_batch, const std::vector<Vec>& v_batch) {
    const std::size_t b = u_batch.size();
    if (b == 0) throw EmptyBatch("pvl: empty batch");
    if (v_batch.size() != b) throw ShapeMismatch("pvl: u/v counts differ");
    LossValue out;
    out.image_grads.assign(b, Vec(u_batch[0].size(), 0.0));
    out.text_grads.assign(b, Vec(u_batch[0].size(), 0.0));
    const double invb = 1.0 / static_cast<double>(b);
    for (std::size_t j = 0; j < b; ++j) {
        if (u_batch[j].size() != v_batch[j].size())
            throw ShapeMismatch("pvl: u/v dimensions differ");
        for (std::size_t k = 0; k < u_batch[j].size(); ++k) {
            const double d = u_batch[j][k] - v_batch[j][k];
            out.value += invb * d * d;
            out.image_grads[j][k] = 2.0 * invb * d;
            out.text_grads[j][k] = -2.0 * invb * d;
        }
    }
    return out;
}

// SnD distillation: (1/B') sum_j |f_ft(x_j) - f_pre(x_j)|^2, image side only.
inline LossValue snd_loss(const std::vector<Vec>& ft_image_embs,
                          const std::vector<Vec>& pre_image_embs) {
    const std::size_t b = ft_image_embs.size();
    if (b == 0) throw EmptyBatch("snd_loss: empty batch");
    if (pre_image_embs.size() != b) throw ShapeMismatch("snd_loss: ft/pre counts differ");
    LossValue out;
    out.image_grads.assign(b, Vec(ft_image_embs[0].size(), 0.0));
    const double invb = 1.0 / static_cast<double>(b);
    for (std::size_t j = 0; j < b; ++j) {
        if (ft_image_embs[j].size() != pre_image_embs[j].size())
            throw ShapeMismatch("snd_loss: dimension differs");
        for (std::size_t k = 0; k < ft_image_embs[j].size(); ++k) {
            const double d = ft_image_embs[j][k] - pre_image_embs[j][k];
            out.value += invb * d * d;
            out.image_grads[j][k] = 2.0 * invb * d;
        }
    }
    return out;
}

// u^cos / v^cos: inner product of the fine-tuning and pre-trained embeddings
// of the same sample. The cosine-ablation replaces difference vectors with
// these scalars.
inline double cosine_diff_scalar(const Vec& ft_emb, const Vec& pre_emb) {
    if (!is_unit_norm(ft_emb) || !is_unit_norm(pre_emb))
        throw NotNormalized("cosine_diff_scalar: inputs must be unit-norm");
    return dot(ft_emb, pre_emb);
}

inline std::vector<double> cosine_diff_scalars(const std::vector<Vec>& ft_embs,
                                               const std::vector<Vec>& pre_embs) {
    if (ft_embs.size() != pre_embs.size())
        throw ShapeMismatch("cosine_diff_scalars: counts differ");
    std::vector<double> out(ft_embs.size());
    for (std::size_t j = 0; j < ft_embs.size(); ++j)
        out[j] = cosine_diff_scalar(ft_embs[j], pre_embs[j]);
    return out;
}

// Scalar AVL of the cosine ablation. Gradients w.r.t. the fine-tuning
// embeddings via d u^cos/d e_ft = e_pre.
inline LossValue avl_cosine(const std::vector<Vec>& ft_image, const std::vector<Vec>& pre_image,
                            const std::vector<Vec>& ft_text, const std::vector<Vec>& pre_text,
                            double m_scalar) {
    const std::size_t b = ft_image.size();
    if (b == 0) throw EmptyBatch("avl_cosine: empty batch");
    if (pre_image.size() != b || ft_text.size() != b || pre_text.size() != b)
        throw ShapeMismatch("avl_cosine: counts differ");
    LossValue out;
    out.image_grads.assign(b, Vec(ft_image[0].size(), 0.0));
    out.text_grads.assign(b, Vec(ft_text[0].size(), 0.0));
    const double invb = 1.0 / static_cast<double>(b);
    for (std::size_t j = 0; j < b; ++j) {
        const double du = dot(ft_image[j], pre_image[j]) - m_scalar;
        const double dv = dot(ft_text[j], pre_text[j]) - m_scalar;
        out.value += invb * (du * du + dv * dv);
        axpy(2.0 * invb * du, pre_image[j], out.image_grads[j]);
        axpy(2.0 * invb * dv, pre_text[j], out.text_grads[j]);
    }
    return out;
}

inline LossValue pvl_cosine(const std::vector<Vec>& ft_image, const std::vector<Vec>& pre_image,
                            const std::vector<Vec>& ft_text, const std::vector<Vec>& pre_text) {
    const std::size_t b = ft_image.size();
    if (b == 0) throw EmptyBatch("pvl_cosine: empty batch");
    if (pre_image.size() != b || ft_text.size() != b || pre_text.size() != b)
        throw ShapeMismatch("pvl_cosine: counts differ");
    LossValue out;
    out.image_grads.assign(b, Vec(ft_image[0].size(), 0.0));
    out.text_grads.assign(b, Vec(ft_text[0].size(), 0.0));
    const double invb = 1.0 / static_cast<double>(b);
    for (std::size_t j = 0; j < b; ++j) {
        const double d = dot(ft_image[j], pre_image[j]) - dot(ft_text[j], pre_text[j]);
        out.value += invb * d * d;
        axpy(2.0 * invb * d, pre_image[j], out.image_grads[j]);
        axpy(-2.0 * invb * d, pre_text[j], out.text_grads[j]);
    }
    return out;
}

// Weighted sum of the components a method defines. The target-batch gradients
// (contrastive) and reference-batch gradients (avl/pvl/snd/aux) are kept in
// separate slots because they address different samples.
struct CombinedLoss {
    double value = 0.0;
    LossValue target;     // gradients for the target batch
    LossValue reference;  // gradients for the reference batch
    double grad_log_temperature = 0.0;
};

inline CombinedLoss combine_final(const MethodSpec& method, const LossValue& cl,
                                  const std::optional<LossValue>& avl_part,
                                  const std::optional<LossValue>& pvl_part,
                                  const std::optional<LossValue>& snd_part,
                                  const std::optional<LossValue>& aux_cl) {
    auto require = [&](const std::optional<LossValue>& part, const char* name) -> const LossValue& {
        if (!part)
            throw MissingComponent(std::string("combine_final: ") + method_name(method.method) +
                                   " requires " + name);
        return *part;
    };
    auto forbid = [&](const std::optional<LossValue>& part, const char* name) {
        if (part)
            throw IncompatibleComponent(std::string("combine_final: ") +
                                        method_name(method.method) + " does not define " + name);
    };
    auto add_scaled = [](LossValue& into, const LossValue& part, double scale) {
        auto add_block = [scale](std::vector<Vec>& dst, const std::vector<Vec>& src) {
            if (src.empty()) return;
            if (dst.empty()) dst.assign(src.size(), Vec(src[0].size(), 0.0));
            if (dst.size() != src.size()) throw ShapeMismatch("combine_final: gradient counts differ");
            for (std::size_t i = 0; i < src.size(); ++i) axpy(scale, src[i], dst[i]);
        };
        add_block(into.image_grads, part.image_grads);
        add_block(into.text_grads, part.text_grads);
        into.grad_log_temperature += scale * part.grad_log_temperature;
    };

    CombinedLoss out;
    out.value = cl.value;
    out.target = cl;
    out.grad_log_temperature = cl.grad_log_temperature;

    switch (method.method) {
        case Method::VanillaFT:
        case Method::LPFT:
        case Method::FLYP:
            forbid(avl_part, "avl");
            forbid(pvl_part, "pvl");
            forbid(snd_part, "snd");
            forbid(aux_cl, "aux_cl");
            break;
        case Method::DiVE:
        case Method::DiVECosine: {
            forbid(snd_part, "snd");
            forbid(aux_cl, "aux_cl");
            if (method.use_avl) {
                const LossValue& a = require(avl_part, "avl");
                out.value += method.lambda * a.value;
                add_scaled(out.reference, a, method.lambda);
            } else {
                forbid(avl_part, "avl (disabled)");
            }
            if (method.use_pvl) {
                const LossValue& p = require(pvl_part, "pvl");
                out.value += method.lambda * p.value;
                add_scaled(out.reference, p, method.lambda);
            } else {
                forbid(pvl_part, "pvl (disabled)");
            }
            break;
        }
        case Method::SnD: {
            forbid(avl_part, "avl");
            forbid(pvl_part, "pvl");
            forbid(aux_cl, "aux_cl");
            const LossValue& s = require(snd_part, "snd");
            out.value += method.lambda_snd * s.value;
            add_scaled(out.reference, s, method.lambda_snd);
            break;
        }
        case Method::FLYPReplay: {
            forbid(avl_part, "avl");
            forbid(pvl_part, "pvl");
            forbid(snd_part, "snd");
            const LossValue& a = require(aux_cl, "aux_cl");
            out.value += method.lambda_aux * a.value;
            add_scaled(out.reference, a, method.lambda_aux);
            break;
        }
    }
    out.grad_log_temperature += out.reference.grad_log_temperature;
    if (!std::isfinite(out.value)) throw NonFinite("combine_final: non-finite combined loss");
    return out;
}

}  // namespace dive
