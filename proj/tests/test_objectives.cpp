#include <gtest/gtest.h>

#include <cmath>
#include <optional>

#include "dive/encoder.hpp"
#include "dive/numeric.hpp"
#include "dive/objectives.hpp"
#include "dive/rng.hpp"

using namespace dive;

namespace {

std::vector<Vec> random_unit_batch(std::size_t count, std::size_t dim, SeededRng& rng) {
    std::vector<Vec> out(count);
    for (auto& v : out) {
        v.resize(dim);
        for (double& x : v) x = rng.gaussian();
        v = l2_normalize(v);
    }
    return out;
}

std::vector<Vec> random_batch(std::size_t count, std::size_t dim, SeededRng& rng, double scale) {
    std::vector<Vec> out(count);
    for (auto& v : out) {
        v.resize(dim);
        for (double& x : v) x = scale * rng.gaussian();
    }
    return out;
}

Vec pack(const std::vector<Vec>& a, const std::vector<Vec>& b, double extra,
         bool with_extra) {
    Vec out;
    for (const auto& v : a) out.insert(out.end(), v.begin(), v.end());
    for (const auto& v : b) out.insert(out.end(), v.begin(), v.end());
    if (with_extra) out.push_back(extra);
    return out;
}

void unpack(const Vec& flat, std::vector<Vec>& a, std::vector<Vec>& b, double* extra) {
    std::size_t pos = 0;
    for (auto& v : a)
        for (double& x : v) x = flat[pos++];
    for (auto& v : b)
        for (double& x : v) x = flat[pos++];
    if (extra) *extra = flat[pos++];
}

Vec pack_grads(const LossValue& loss, bool with_tau) {
    Vec out;
    for (const auto& v : loss.image_grads) out.insert(out.end(), v.begin(), v.end());
    for (const auto& v : loss.text_grads) out.insert(out.end(), v.begin(), v.end());
    if (with_tau) out.push_back(loss.grad_log_temperature);
    return out;
}

}  // namespace

TEST(Contrastive, SinglePairIsExactlyZero) {
    SeededRng rng(21);
    const auto img = random_unit_batch(1, 8, rng);
    const LossValue loss = contrastive_loss(img, img, 0.07);
    EXPECT_EQ(loss.value, 0.0);
}

TEST(Contrastive, TwoOrthogonalPairs) {
    const std::vector<Vec> img{{1.0, 0.0}, {0.0, 1.0}};
    const LossValue loss = contrastive_loss(img, img, 1.0);
    EXPECT_NEAR(loss.value, std::log(1.0 + std::exp(-1.0)), 1e-12);
}

TEST(Contrastive, PermutationInvariant) {
    SeededRng rng(22);
    const auto img = random_unit_batch(5, 6, rng);
    const auto txt = random_unit_batch(5, 6, rng);
    const double base = contrastive_loss(img, txt, 0.5).value;

    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<Vec> img_p, txt_p;
    for (std::size_t i : perm) {
        img_p.push_back(img[i]);
        txt_p.push_back(txt[i]);
    }
    EXPECT_NEAR(contrastive_loss(img_p, txt_p, 0.5).value, base, 1e-12);
}

TEST(Contrastive, RotationInvariant) {
    SeededRng rng(23);
    const auto img = random_unit_batch(4, 4, rng);
    const auto txt = random_unit_batch(4, 4, rng);
    const double base = contrastive_loss(img, txt, 0.3).value;

    const double c = std::cos(0.7), s = std::sin(0.7);
    auto rot = [&](const std::vector<Vec>& batch) {
        std::vector<Vec> out = batch;
        for (auto& v : out) {
            const double x = v[0], y = v[1];
            v[0] = c * x - s * y;
            v[1] = s * x + c * y;
        }
        return out;
    };
    EXPECT_NEAR(contrastive_loss(rot(img), rot(txt), 0.3).value, base, 1e-9);
}

TEST(Contrastive, EmptyBatchThrows) {
    EXPECT_THROW(contrastive_loss({}, {}, 1.0), EmptyBatch);
}

TEST(Contrastive, GradientsMatchFiniteDifferences) {
    SeededRng rng(24);
    for (int instance = 0; instance < 20; ++instance) {
        const std::size_t b = 1 + rng.next_below(8);
        const std::size_t d = 2 + rng.next_below(15);
        auto img = random_unit_batch(b, d, rng);
        auto txt = random_unit_batch(b, d, rng);
        const double log_tau = rng.uniform(-3.0, 1.0);

        const LossValue loss = contrastive_loss(img, txt, std::exp(log_tau));
        const Vec analytic = pack_grads(loss, true);

        std::vector<Vec> img_p = img, txt_p = txt;
        const Vec numeric = finite_difference_gradient(
            [&](const Vec& flat) {
                double lt = 0.0;
                unpack(flat, img_p, txt_p, &lt);
                return contrastive_loss(img_p, txt_p, std::exp(lt)).value;
            },
            pack(img, txt, log_tau, true), 1e-5);
        EXPECT_LE(max_relative_error(analytic, numeric), 1e-4) << "instance " << instance;
    }
}

TEST(CrossEntropy, UniformLogits) {
    ClassifierHead head{Matrix(4, 3), Vec(4, 0.0)};
    const std::vector<Vec> features{{0.1, -0.2, 0.3}};
    const HeadLoss loss = cross_entropy_head_loss(features, {2}, head);
    EXPECT_NEAR(loss.value, std::log(4.0), 1e-12);
}

TEST(CrossEntropy, SaturatesAtLargeMargin) {
    ClassifierHead head{Matrix(4, 2), Vec{20.0, 0.0, 0.0, 0.0}};
    const std::vector<Vec> features{{0.0, 0.0}};
    const HeadLoss loss = cross_entropy_head_loss(features, {0}, head);
    EXPECT_LT(loss.value, 1e-8);
}

TEST(CrossEntropy, LabelOutOfRangeThrows) {
    ClassifierHead head{Matrix(3, 2), Vec(3, 0.0)};
    const std::vector<Vec> features{{0.0, 0.0}};
    EXPECT_THROW(cross_entropy_head_loss(features, {3}, head), LabelOutOfRange);
    EXPECT_THROW(cross_entropy_head_loss(features, {-1}, head), LabelOutOfRange);
}

TEST(CrossEntropy, GradientsMatchFiniteDifferences) {
    SeededRng rng(25);
    for (int instance = 0; instance < 20; ++instance) {
        const std::size_t b = 1 + rng.next_below(6);
        const std::size_t d = 2 + rng.next_below(8);
        const std::size_t classes = 2 + rng.next_below(5);
        ClassifierHead head{Matrix(classes, d), Vec(classes, 0.0)};
        for (double& w : head.w.data) w = rng.gaussian();
        for (double& x : head.b) x = 0.3 * rng.gaussian();
        auto features = random_batch(b, d, rng, 1.0);
        std::vector<int> labels(b);
        for (auto& y : labels) y = static_cast<int>(rng.next_below(classes));

        const HeadLoss loss = cross_entropy_head_loss(features, labels, head);
        Vec analytic;
        for (const auto& g : loss.feature_grads) analytic.insert(analytic.end(), g.begin(), g.end());
        analytic.insert(analytic.end(), loss.grad_w.data.begin(), loss.grad_w.data.end());
        analytic.insert(analytic.end(), loss.grad_b.begin(), loss.grad_b.end());

        Vec flat;
        for (const auto& f : features) flat.insert(flat.end(), f.begin(), f.end());
        flat.insert(flat.end(), head.w.data.begin(), head.w.data.end());
        flat.insert(flat.end(), head.b.begin(), head.b.end());

        auto features_p = features;
        ClassifierHead head_p = head;
        const Vec numeric = finite_difference_gradient(
            [&](const Vec& params) {
                std::size_t pos = 0;
                for (auto& f : features_p)
                    for (double& x : f) x = params[pos++];
                for (double& w : head_p.w.data) w = params[pos++];
                for (double& x : head_p.b) x = params[pos++];
                return cross_entropy_head_loss(features_p, labels, head_p).value;
            },
            flat, 1e-5);
        EXPECT_LE(max_relative_error(analytic, numeric), 1e-4) << "instance " << instance;
    }
}

TEST(Avl, IdealStateIsZero) {
    const Vec m{0.1, -0.2};
    const std::vector<Vec> u{m, m, m};
    EXPECT_EQ(avl(u, u, m).value, 0.0);
}

TEST(Avl, HandExample) {
    const std::vector<Vec> u{{0.2, 0.0}};
    const std::vector<Vec> v{{0.0, 0.0}};
    const Vec m{0.1, 0.0};
    EXPECT_NEAR(avl(u, v, m).value, 0.02, 1e-15);
}

TEST(Avl, GradientsMatchFiniteDifferences) {
    SeededRng rng(26);
    for (int instance = 0; instance < 20; ++instance) {
        const std::size_t b = 1 + rng.next_below(8);
        const std::size_t d = 2 + rng.next_below(15);
        auto u = random_batch(b, d, rng, 0.3);
        auto v = random_batch(b, d, rng, 0.3);
        Vec m(d);
        for (double& x : m) x = 0.1 * rng.gaussian();

        const Vec analytic = pack_grads(avl(u, v, m), false);
        auto u_p = u;
        auto v_p = v;
        const Vec numeric = finite_difference_gradient(
            [&](const Vec& flat) {
                unpack(flat, u_p, v_p, nullptr);
                return avl(u_p, v_p, m).value;
            },
            pack(u, v, 0.0, false), 1e-5);
        EXPECT_LE(max_relative_error(analytic, numeric), 1e-4);
    }
}

TEST(Avl, Errors) {
    EXPECT_THROW(avl({}, {}, {0.0}), EmptyBatch);
    EXPECT_THROW(avl({{1.0, 0.0}}, {}, {0.0, 0.0}), ShapeMismatch);
}

TEST(Pvl, AlignedPairsAreZero) {
    const std::vector<Vec> u{{0.3, 0.1}, {-0.2, 0.5}};
    EXPECT_EQ(pvl(u, u).value, 0.0);
}

TEST(Pvl, HandExample) {
    EXPECT_NEAR(pvl({{1.0, 0.0}}, {{0.0, 1.0}}).value, 2.0, 1e-15);
}

TEST(Pvl, QuadraticHomogeneity) {
    SeededRng rng(27);
    const auto u = random_batch(5, 4, rng, 0.5);
    const auto v = random_batch(5, 4, rng, 0.5);
    const double base = pvl(u, v).value;
    std::vector<Vec> u2 = u, v2 = v;
    // doubling every (u - v): scale the gap around v
    for (std::size_t j = 0; j < u.size(); ++j)
        for (std::size_t k = 0; k < u[j].size(); ++k) u2[j][k] = v[j][k] + 2.0 * (u[j][k] - v[j][k]);
    EXPECT_NEAR(pvl(u2, v2).value, 4.0 * base, 1e-9);
}

TEST(Pvl, GradientsMatchFiniteDifferences) {
    SeededRng rng(28);
    for (int instance = 0; instance < 20; ++instance) {
        const std::size_t b = 1 + rng.next_below(8);
        const std::size_t d = 2 + rng.next_below(15);
        auto u = random_batch(b, d, rng, 0.3);
        auto v = random_batch(b, d, rng, 0.3);
        const Vec analytic = pack_grads(pvl(u, v), false);
        auto u_p = u;
        auto v_p = v;
        const Vec numeric = finite_difference_gradient(
            [&](const Vec& flat) {
                unpack(flat, u_p, v_p, nullptr);
                return pvl(u_p, v_p).value;
            },
            pack(u, v, 0.0, false), 1e-5);
        EXPECT_LE(max_relative_error(analytic, numeric), 1e-4);
    }
}

TEST(Snd, UnchangedModelIsZero) {
    const std::vector<Vec> e{{1.0, 0.0}, {0.0, 1.0}};
    EXPECT_EQ(snd_loss(e, e).value, 0.0);
}

TEST(Snd, HandExample) {
    EXPECT_NEAR(snd_loss({{1.0, 0.0}}, {{0.0, 1.0}}).value, 2.0, 1e-15);
}

TEST(Snd, GradientsMatchFiniteDifferences) {
    SeededRng rng(29);
    for (int instance = 0; instance < 20; ++instance) {
        const std::size_t b = 1 + rng.next_below(8);
        const std::size_t d = 2 + rng.next_below(15);
        auto ft = random_unit_batch(b, d, rng);
        const auto pre = random_unit_batch(b, d, rng);
        const LossValue loss = snd_loss(ft, pre);
        Vec analytic;
        for (const auto& g : loss.image_grads) analytic.insert(analytic.end(), g.begin(), g.end());

        auto ft_p = ft;
        Vec flat;
        for (const auto& v : ft) flat.insert(flat.end(), v.begin(), v.end());
        const Vec numeric = finite_difference_gradient(
            [&](const Vec& f) {
                std::size_t pos = 0;
                for (auto& v : ft_p)
                    for (double& x : v) x = f[pos++];
                return snd_loss(ft_p, pre).value;
            },
            flat, 1e-5);
        EXPECT_LE(max_relative_error(analytic, numeric), 1e-4);
    }
}

TEST(CosineScalars, Examples) {
    EXPECT_DOUBLE_EQ(cosine_diff_scalar({1.0, 0.0}, {1.0, 0.0}), 1.0);
    EXPECT_DOUBLE_EQ(cosine_diff_scalar({1.0, 0.0}, {0.0, 1.0}), 0.0);
    EXPECT_DOUBLE_EQ(cosine_diff_scalar({1.0, 0.0}, {-1.0, 0.0}), -1.0);
    EXPECT_THROW(cosine_diff_scalar({2.0, 0.0}, {1.0, 0.0}), NotNormalized);
}

TEST(CosineVariant, ZeroWhenScalarsEqualTarget) {
    SeededRng rng(30);
    const auto pre = random_unit_batch(3, 4, rng);
    // ft == pre makes every cosine scalar 1; with m = 1 the loss is 0.
    EXPECT_NEAR(avl_cosine(pre, pre, pre, pre, 1.0).value, 0.0, 1e-12);
    EXPECT_NEAR(pvl_cosine(pre, pre, pre, pre).value, 0.0, 1e-12);
}

TEST(CosineVariant, GradientsMatchFiniteDifferences) {
    SeededRng rng(31);
    for (int instance = 0; instance < 20; ++instance) {
        const std::size_t b = 1 + rng.next_below(6);
        const std::size_t d = 2 + rng.next_below(10);
        auto ft_img = random_unit_batch(b, d, rng);
        auto ft_txt = random_unit_batch(b, d, rng);
        const auto pre_img = random_unit_batch(b, d, rng);
        const auto pre_txt = random_unit_batch(b, d, rng);
        const double m = rng.uniform(-0.5, 1.0);

        for (int which = 0; which < 2; ++which) {
            const LossValue loss = which == 0
                                       ? avl_cosine(ft_img, pre_img, ft_txt, pre_txt, m)
                                       : pvl_cosine(ft_img, pre_img, ft_txt, pre_txt);
            const Vec analytic = pack_grads(loss, false);
            auto img_p = ft_img;
            auto txt_p = ft_txt;
            const Vec numeric = finite_difference_gradient(
                [&](const Vec& flat) {
                    unpack(flat, img_p, txt_p, nullptr);
                    return which == 0 ? avl_cosine(img_p, pre_img, txt_p, pre_txt, m).value
                                      : pvl_cosine(img_p, pre_img, txt_p, pre_txt).value;
                },
                pack(ft_img, ft_txt, 0.0, false), 1e-5);
            EXPECT_LE(max_relative_error(analytic, numeric), 1e-4);
        }
    }
}

TEST(Combine, DiveAtLambdaZeroEqualsContrastive) {
    SeededRng rng(32);
    const auto img = random_unit_batch(3, 5, rng);
    const auto txt = random_unit_batch(3, 5, rng);
    const LossValue cl = contrastive_loss(img, txt, 0.1);
    const LossValue a = avl({{0.1, 0.0}}, {{0.0, 0.1}}, {0.0, 0.0});
    const LossValue p = pvl({{0.1, 0.0}}, {{0.0, 0.1}});

    MethodSpec spec;
    spec.method = Method::DiVE;
    spec.lambda = 0.0;
    const CombinedLoss combined = combine_final(spec, cl, a, p, std::nullopt, std::nullopt);
    EXPECT_EQ(combined.value, cl.value);
    EXPECT_EQ(combined.grad_log_temperature, cl.grad_log_temperature);
    for (std::size_t i = 0; i < cl.image_grads.size(); ++i)
        EXPECT_EQ(combined.target.image_grads[i], cl.image_grads[i]);
    for (const auto& g : combined.reference.image_grads)
        for (double x : g) EXPECT_EQ(x, 0.0);
}

TEST(Combine, HandExample) {
    LossValue cl;
    cl.value = 1.0;
    LossValue a;
    a.value = 0.002;
    LossValue p;
    p.value = 0.001;
    MethodSpec spec;
    spec.method = Method::DiVE;
    spec.lambda = 1000.0;
    const CombinedLoss combined = combine_final(spec, cl, a, p, std::nullopt, std::nullopt);
    EXPECT_NEAR(combined.value, 4.0, 1e-12);
}

TEST(Combine, MissingAndIncompatibleComponents) {
    LossValue cl;
    cl.value = 1.0;
    LossValue extra;
    extra.value = 0.5;

    MethodSpec dive;
    dive.method = Method::DiVE;
    EXPECT_THROW(combine_final(dive, cl, std::nullopt, std::nullopt, std::nullopt, std::nullopt),
                 MissingComponent);

    MethodSpec flyp;
    flyp.method = Method::FLYP;
    EXPECT_THROW(combine_final(flyp, cl, extra, std::nullopt, std::nullopt, std::nullopt),
                 IncompatibleComponent);

    MethodSpec snd;
    snd.method = Method::SnD;
    EXPECT_THROW(combine_final(snd, cl, std::nullopt, std::nullopt, std::nullopt, extra),
                 IncompatibleComponent);
    EXPECT_THROW(combine_final(snd, cl, std::nullopt, std::nullopt, std::nullopt, std::nullopt),
                 MissingComponent);

    MethodSpec avl_only;
    avl_only.method = Method::DiVE;
    avl_only.use_pvl = false;
    EXPECT_THROW(combine_final(avl_only, cl, extra, extra, std::nullopt, std::nullopt),
                 IncompatibleComponent);
    EXPECT_NO_THROW(combine_final(avl_only, cl, extra, std::nullopt, std::nullopt, std::nullopt));
}

TEST(Combine, SndAndReplayWeights) {
    LossValue cl;
    cl.value = 2.0;
    LossValue part;
    part.value = 0.25;

    MethodSpec snd;
    snd.method = Method::SnD;
    snd.lambda_snd = 4.0;
    EXPECT_NEAR(combine_final(snd, cl, std::nullopt, std::nullopt, part, std::nullopt).value, 3.0,
                1e-12);

    MethodSpec replay;
    replay.method = Method::FLYPReplay;
    replay.lambda_aux = 2.0;
    EXPECT_NEAR(combine_final(replay, cl, std::nullopt, std::nullopt, std::nullopt, part).value,
                2.5, 1e-12);
}

// End-to-end: analytic parameter gradients of the full combined objective
// (contrastive on a target batch plus lambda * (AVL + PVL) on a reference
// batch) against finite differences through both towers.
TEST(Combine, EndToEndParameterGradcheck) {
    SeededRng rng(33);
    ModelSpec spec;
    spec.image_input_dim = 5;
    spec.text_input_dim = 5;
    spec.hidden_width = 6;
    spec.hidden_layers = 2;
    spec.embed_dim = 4;

    for (int instance = 0; instance < 5; ++instance) {
        TwoTowerModel model = init_two_tower(spec, rng);
        const TwoTowerModel pre_model = init_two_tower(spec, rng);
        const std::size_t b = 3, bref = 2;
        std::vector<Vec> target_img(b), target_txt(b), ref_img(bref), ref_txt(bref);
        for (auto& v : target_img) v = random_batch(1, 5, rng, 1.0)[0];
        for (auto& v : target_txt) v = random_batch(1, 5, rng, 1.0)[0];
        for (auto& v : ref_img) v = random_batch(1, 5, rng, 1.0)[0];
        for (auto& v : ref_txt) v = random_batch(1, 5, rng, 1.0)[0];
        std::vector<Vec> pre_img(bref), pre_txt(bref);
        for (std::size_t j = 0; j < bref; ++j) {
            pre_img[j] = forward(pre_model.image_encoder, ref_img[j]);
            pre_txt[j] = forward(pre_model.text_encoder, ref_txt[j]);
        }
        Vec m(4);
        for (double& x : m) x = 0.05 * rng.gaussian();

        MethodSpec method;
        method.method = Method::DiVE;
        method.lambda = 10.0;

        auto loss_of = [&](const TwoTowerModel& mdl) {
            std::vector<Vec> ti(b), tt(b), ri(bref), rt(bref);
            for (std::size_t i = 0; i < b; ++i) {
                ti[i] = forward(mdl.image_encoder, target_img[i]);
                tt[i] = forward(mdl.text_encoder, target_txt[i]);
            }
            std::vector<Vec> u(bref), v(bref);
            for (std::size_t j = 0; j < bref; ++j) {
                ri[j] = forward(mdl.image_encoder, ref_img[j]);
                rt[j] = forward(mdl.text_encoder, ref_txt[j]);
                u[j] = sub(ri[j], pre_img[j]);
                v[j] = sub(rt[j], pre_txt[j]);
            }
            const LossValue cl = contrastive_loss(ti, tt, mdl.temperature());
            return combine_final(method, cl, avl(u, v, m), pvl(u, v), std::nullopt, std::nullopt);
        };

        // analytic: backprop each gradient slot through its tower
        const CombinedLoss combined = loss_of(model);
        GradientBag bag = GradientBag::like(model);
        for (std::size_t i = 0; i < b; ++i) {
            accumulate(bag.image_layers,
                       backward(model.image_encoder, target_img[i], combined.target.image_grads[i]),
                       1.0);
            accumulate(bag.text_layers,
                       backward(model.text_encoder, target_txt[i], combined.target.text_grads[i]),
                       1.0);
        }
        for (std::size_t j = 0; j < bref; ++j) {
            accumulate(bag.image_layers,
                       backward(model.image_encoder, ref_img[j], combined.reference.image_grads[j]),
                       1.0);
            accumulate(bag.text_layers,
                       backward(model.text_encoder, ref_txt[j], combined.reference.text_grads[j]),
                       1.0);
        }

        Vec analytic;
        for (const auto& layer : bag.image_layers) {
            analytic.insert(analytic.end(), layer.w.data.begin(), layer.w.data.end());
            analytic.insert(analytic.end(), layer.b.begin(), layer.b.end());
        }
        for (const auto& layer : bag.text_layers) {
            analytic.insert(analytic.end(), layer.w.data.begin(), layer.w.data.end());
            analytic.insert(analytic.end(), layer.b.begin(), layer.b.end());
        }
        analytic.push_back(combined.grad_log_temperature);

        Vec flat;
        for (const auto& layer : model.image_encoder.layers) {
            flat.insert(flat.end(), layer.w.data.begin(), layer.w.data.end());
            flat.insert(flat.end(), layer.b.begin(), layer.b.end());
        }
        for (const auto& layer : model.text_encoder.layers) {
            flat.insert(flat.end(), layer.w.data.begin(), layer.w.data.end());
            flat.insert(flat.end(), layer.b.begin(), layer.b.end());
        }
        flat.push_back(model.log_temperature);

        TwoTowerModel probe = model;
        const Vec numeric = finite_difference_gradient(
            [&](const Vec& params) {
                std::size_t pos = 0;
                for (auto& layer : probe.image_encoder.layers) {
                    for (double& w : layer.w.data) w = params[pos++];
                    for (double& x : layer.b) x = params[pos++];
                }
                for (auto& layer : probe.text_encoder.layers) {
                    for (double& w : layer.w.data) w = params[pos++];
                    for (double& x : layer.b) x = params[pos++];
                }
                probe.log_temperature = params[pos++];
                return loss_of(probe).value;
            },
            flat, 1e-5);
        EXPECT_LE(max_relative_error(analytic, numeric), 1e-4) << "instance " << instance;
    }
}

TEST(EmbeddingBatch, ValidationChecksAlignmentAndNorms) {
    SeededRng rng(35);
    EmbeddingBatch good{random_unit_batch(3, 4, rng), random_unit_batch(3, 4, rng)};
    EXPECT_NO_THROW(validate_embedding_batch(good));

    EmbeddingBatch misaligned{random_unit_batch(3, 4, rng), random_unit_batch(2, 4, rng)};
    EXPECT_THROW(validate_embedding_batch(misaligned), ShapeMismatch);

    EmbeddingBatch off_sphere = good;
    off_sphere.text[1][0] += 0.01;
    EXPECT_THROW(validate_embedding_batch(off_sphere), NotNormalized);
}

// Cross-entropy through the image encoder: the feature gradients must chain
// correctly through backward().
TEST(CrossEntropy, EndToEndEncoderGradcheck) {
    SeededRng rng(36);
    ModelSpec spec;
    spec.image_input_dim = 5;
    spec.text_input_dim = 5;
    spec.hidden_width = 6;
    spec.hidden_layers = 2;
    spec.embed_dim = 4;
    for (int instance = 0; instance < 5; ++instance) {
        TwoTowerModel model = init_two_tower(spec, rng);
        const std::size_t b = 3, classes = 3;
        ClassifierHead head{Matrix(classes, 4), Vec(classes, 0.0)};
        for (double& w : head.w.data) w = rng.gaussian();
        std::vector<Vec> inputs = random_batch(b, 5, rng, 1.0);
        std::vector<int> labels(b);
        for (auto& y : labels) y = static_cast<int>(rng.next_below(classes));

        auto loss_of = [&](const EncoderWeights& enc) {
            std::vector<Vec> feats(b);
            for (std::size_t i = 0; i < b; ++i) feats[i] = forward(enc, inputs[i]);
            return cross_entropy_head_loss(feats, labels, head);
        };

        const HeadLoss hl = loss_of(model.image_encoder);
        std::vector<LayerWeights> bag;
        for (const auto& layer : model.image_encoder.layers)
            bag.push_back({Matrix(layer.w.rows, layer.w.cols), Vec(layer.b.size(), 0.0)});
        for (std::size_t i = 0; i < b; ++i)
            accumulate(bag, backward(model.image_encoder, inputs[i], hl.feature_grads[i]), 1.0);

        Vec analytic, flat;
        for (std::size_t k = 0; k < bag.size(); ++k) {
            analytic.insert(analytic.end(), bag[k].w.data.begin(), bag[k].w.data.end());
            analytic.insert(analytic.end(), bag[k].b.begin(), bag[k].b.end());
            flat.insert(flat.end(), model.image_encoder.layers[k].w.data.begin(),
                        model.image_encoder.layers[k].w.data.end());
            flat.insert(flat.end(), model.image_encoder.layers[k].b.begin(),
                        model.image_encoder.layers[k].b.end());
        }
        EncoderWeights probe = model.image_encoder;
        const Vec numeric = finite_difference_gradient(
            [&](const Vec& params) {
                std::size_t pos = 0;
                for (auto& layer : probe.layers) {
                    for (double& w : layer.w.data) w = params[pos++];
                    for (double& x : layer.b) x = params[pos++];
                }
                return loss_of(probe).value;
            },
            flat, 1e-5);
        EXPECT_LE(max_relative_error(analytic, numeric), 1e-4) << "instance " << instance;
    }
}

TEST(Finiteness, AllLossesFiniteOnUnitInputs) {
    SeededRng rng(34);
    for (double tau : {0.001, 0.07, 1.0, 10.0}) {
        const auto img = random_unit_batch(6, 8, rng);
        const auto txt = random_unit_batch(6, 8, rng);
        EXPECT_TRUE(std::isfinite(contrastive_loss(img, txt, tau).value));
    }
    const auto u = random_batch(6, 8, rng, 2.0);
    const auto v = random_batch(6, 8, rng, 2.0);
    EXPECT_TRUE(std::isfinite(avl(u, v, Vec(8, 0.0)).value));
    EXPECT_TRUE(std::isfinite(pvl(u, v).value));
    EXPECT_GE(avl(u, v, Vec(8, 0.0)).value, 0.0);
    EXPECT_GE(pvl(u, v).value, 0.0);
}
