#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dive/data.hpp"
#include "dive/encoder.hpp"
#include "dive/errors.hpp"
#include "dive/numeric.hpp"
#include "dive/rng.hpp"
#include "dive/training.hpp"

namespace dive {

// Desk-scale stand-in for LAION/ImageNet/CC3M: class prototypes in input
// space, a fixed linear "semantic map" from image space to text space, an
// affine OOD shift, and a target/zero-shot class partition.
struct WorldSpec {
    int num_classes_total = 40;
    int num_target_classes = 10;
    std::size_t input_dim = 32;
    double noise_sigma = 0.18;
    double ood_shift_strength = 0.5;
    std::size_t pretrain_per_class = 200;
    std::size_t id_train_per_class = 100;
    std::size_t id_val_per_class = 30;
    std::size_t test_per_class = 30;
    std::size_t reference_per_class = 50;
    std::size_t rsa_pairs = 256;
    // Fraction of paired-corpus images (pretrain/reference/RSA) drawn from the
    // shifted domain, with clean captions. This is what makes the pre-trained
    // model OOD-capable in the first place, mirroring web-scale diversity.
    double domain_mix = 0.3;
    bool label_imbalance = false;
};

struct SyntheticWorld {
    WorldSpec spec;
    std::uint64_t seed = 0;

    std::vector<Vec> image_prototypes;  // unit vectors, one per class
    Matrix semantic_map;                // orthogonal image-space -> text-space map
    Matrix ood_rotation;
    Vec ood_shift;
    std::vector<int> target_classes;  // ascending
    std::vector<int> zs_classes;      // ascending

    PairedDataset pretrain_corpus;  // all classes
    PairedDataset reference;        // all classes (CC3M analogue)
    PairedDataset rsa_corpus;       // held-out paired set for RSA evaluation
    LabeledDataset id_train;
    LabeledDataset id_val;
    LabeledDataset id_test;
    LabeledDataset ood_test;
    LabeledDataset zs_test;

    ClassPromptSet target_prompts;
    ClassPromptSet zs_prompts;

    Vec prompt_input(int class_index) const {
        return matvec(semantic_map, image_prototypes[static_cast<std::size_t>(class_index)]);
    }
};

namespace detail {

inline Vec gaussian_vec(std::size_t n, SeededRng& rng) {
    Vec v(n);
    for (double& x : v) x = rng.gaussian();
    return v;
}

// Gram-Schmidt on a Gaussian matrix: a deterministic random orthogonal matrix.
inline Matrix random_orthogonal(std::size_t n, SeededRng& rng) {
    std::vector<Vec> cols(n);
    for (auto& c : cols) c = gaussian_vec(n, rng);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < i; ++j) axpy(-dot(cols[i], cols[j]), cols[j], cols[i]);
        cols[i] = l2_normalize(cols[i]);
    }
    Matrix q(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < n; ++r) q(r, i) = cols[i][r];
    return q;
}

// Rotation by `angle` in every (2k, 2k+1) plane of a random orthonormal
// basis: R = U diag(G(angle)) U^T. Displacement of any unit vector is
// 2 sin(angle/2), independent of dimension.
inline Matrix plane_rotation(std::size_t n, double angle, SeededRng& rng) {
    const Matrix u = random_orthogonal(n, rng);
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    Matrix block(n, n);
    for (std::size_t k = 0; k + 1 < n; k += 2) {
        block(k, k) = c;
        block(k, k + 1) = -s;
        block(k + 1, k) = s;
        block(k + 1, k + 1) = c;
    }
    if (n % 2 == 1) block(n - 1, n - 1) = 1.0;
    // R = U * block * U^T
    Matrix tmp(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += u(i, k) * block(k, j);
            tmp(i, j) = acc;
        }
    Matrix r(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += tmp(i, k) * u(j, k);
            r(i, j) = acc;
        }
    return r;
}

}  // namespace detail

inline void validate_world_spec(const WorldSpec& spec) {
    if (spec.num_classes_total < 2) throw SpecInvalid("world: need at least 2 classes");
    if (spec.num_target_classes < 1) throw SpecInvalid("world: need at least 1 target class");
    if (spec.num_target_classes >= spec.num_classes_total)
        throw SpecInvalid("world: target classes must be a strict subset (zero-shot split would be empty)");
    if (spec.input_dim < 2) throw SpecInvalid("world: input_dim must be >= 2");
    if (!(spec.noise_sigma >= 0.0)) throw SpecInvalid("world: noise_sigma must be >= 0");
    if (!(spec.ood_shift_strength >= 0.0)) throw SpecInvalid("world: ood_shift_strength must be >= 0");
    if (!(spec.domain_mix >= 0.0 && spec.domain_mix <= 1.0))
        throw SpecInvalid("world: domain_mix must lie in [0, 1]");
    if (spec.pretrain_per_class < 1 || spec.id_train_per_class < 1 || spec.id_val_per_class < 1 ||
        spec.test_per_class < 1 || spec.reference_per_class < 1 || spec.rsa_pairs < 1)
        throw SpecInvalid("world: all split sizes must be >= 1");
}

inline SyntheticWorld generate_world(const WorldSpec& spec, std::uint64_t seed) {
    validate_world_spec(spec);
    SyntheticWorld world;
    world.spec = spec;
    world.seed = seed;

    const std::size_t n = spec.input_dim;
    const std::size_t num_classes = static_cast<std::size_t>(spec.num_classes_total);

    {
        SeededRng rng(derive_seed(seed, "prototypes"));
        world.image_prototypes.reserve(num_classes);
        for (std::size_t c = 0; c < num_classes; ++c)
            world.image_prototypes.push_back(l2_normalize(detail::gaussian_vec(n, rng)));
        for (std::size_t a = 0; a < num_classes; ++a)
            for (std::size_t b = a + 1; b < num_classes; ++b)
                if (norm(sub(world.image_prototypes[a], world.image_prototypes[b])) < 1e-6)
                    throw SpecInvalid("world: duplicate class prototypes");
    }
    {
        SeededRng rng(derive_seed(seed, "semantic-map"));
        world.semantic_map = detail::random_orthogonal(n, rng);
    }
    {
        SeededRng rng(derive_seed(seed, "ood"));
        world.ood_rotation = detail::plane_rotation(n, spec.ood_shift_strength, rng);
        world.ood_shift = scaled(l2_normalize(detail::gaussian_vec(n, rng)),
                                 0.5 * spec.ood_shift_strength);
    }
    {
        SeededRng rng(derive_seed(seed, "classes"));
        std::vector<int> order(num_classes);
        for (std::size_t c = 0; c < num_classes; ++c) order[c] = static_cast<int>(c);
        rng.shuffle(order);
        world.target_classes.assign(order.begin(), order.begin() + spec.num_target_classes);
        world.zs_classes.assign(order.begin() + spec.num_target_classes, order.end());
        std::sort(world.target_classes.begin(), world.target_classes.end());
        std::sort(world.zs_classes.begin(), world.zs_classes.end());
    }

    const double sigma = spec.noise_sigma;
    // Shifted-domain images: the whole latent goes through the fixed affine
    // shift and the modality noise is inflated by (1 + strength).
    auto image_sample = [&](int c, SeededRng& rng, bool shifted) {
        const Vec& p = world.image_prototypes[static_cast<std::size_t>(c)];
        Vec latent = p;
        axpy(sigma, detail::gaussian_vec(n, rng), latent);
        Vec x;
        if (shifted) {
            x = matvec(world.ood_rotation, latent);
            axpy(1.0, world.ood_shift, x);
            axpy(0.5 * sigma * (1.0 + spec.ood_shift_strength), detail::gaussian_vec(n, rng), x);
        } else {
            x = latent;
            axpy(0.5 * sigma, detail::gaussian_vec(n, rng), x);
        }
        return x;
    };
    // Captions always describe the clean semantics; only the image side may
    // come from the shifted domain.
    auto paired_sample = [&](int c, SeededRng& rng, std::uint64_t id) {
        const Vec& p = world.image_prototypes[static_cast<std::size_t>(c)];
        Vec latent = p;
        axpy(sigma, detail::gaussian_vec(n, rng), latent);
        const bool shifted = rng.next_double() < spec.domain_mix;
        PairedSample s;
        s.class_index = c;
        s.pair_id = id;
        if (shifted) {
            s.image_input = matvec(world.ood_rotation, latent);
            axpy(1.0, world.ood_shift, s.image_input);
            axpy(0.5 * sigma * (1.0 + spec.ood_shift_strength), detail::gaussian_vec(n, rng),
                 s.image_input);
        } else {
            s.image_input = latent;
            axpy(0.5 * sigma, detail::gaussian_vec(n, rng), s.image_input);
        }
        s.text_input = matvec(world.semantic_map, latent);
        axpy(0.5 * sigma, detail::gaussian_vec(n, rng), s.text_input);
        return s;
    };
    auto make_paired = [&](const std::vector<int>& classes, std::size_t per_class,
                           const char* stream) {
        SeededRng rng(derive_seed(seed, stream));
        PairedDataset ds;
        std::uint64_t id = 0;
        for (int c : classes)
            for (std::size_t k = 0; k < per_class; ++k) ds.samples.push_back(paired_sample(c, rng, id++));
        return ds;
    };
    auto class_count = [&](std::size_t base, std::size_t rank) -> std::size_t {
        if (!spec.label_imbalance) return base;
        const double scaled_count = static_cast<double>(base) * std::pow(0.7, static_cast<double>(rank));
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scaled_count)));
    };
    auto make_labeled = [&](const std::vector<int>& classes, std::size_t per_class,
                            const char* stream, bool shifted, bool imbalance) {
        SeededRng rng(derive_seed(seed, stream));
        LabeledDataset ds;
        for (std::size_t rank = 0; rank < classes.size(); ++rank) {
            const std::size_t count = imbalance ? class_count(per_class, rank) : per_class;
            for (std::size_t k = 0; k < count; ++k)
                ds.samples.push_back({image_sample(classes[rank], rng, shifted), classes[rank]});
        }
        return ds;
    };

    std::vector<int> all_classes(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) all_classes[c] = static_cast<int>(c);

    world.pretrain_corpus = make_paired(all_classes, spec.pretrain_per_class, "split:pretrain");
    world.reference = make_paired(all_classes, spec.reference_per_class, "split:reference");
    world.id_train = make_labeled(world.target_classes, spec.id_train_per_class, "split:id-train",
                                  false, spec.label_imbalance);
    world.id_val = make_labeled(world.target_classes, spec.id_val_per_class, "split:id-val", false,
                                spec.label_imbalance);
    world.id_test = make_labeled(world.target_classes, spec.test_per_class, "split:id-test", false,
                                 spec.label_imbalance);
    world.ood_test =
        make_labeled(world.target_classes, spec.test_per_class, "split:ood-test", true, false);
    world.zs_test =
        make_labeled(world.zs_classes, spec.test_per_class, "split:zs-test", false, false);

    {
        SeededRng rng(derive_seed(seed, "split:rsa"));
        std::uint64_t id = 0;
        for (std::size_t k = 0; k < spec.rsa_pairs; ++k)
            world.rsa_corpus.samples.push_back(
                paired_sample(all_classes[k % num_classes], rng, id++));
    }

    auto prompts_for = [&](const std::vector<int>& classes) {
        ClassPromptSet prompts;
        prompts.class_ids = classes;
        for (int c : classes) prompts.prompt_inputs.push_back(world.prompt_input(c));
        return prompts;
    };
    world.target_prompts = prompts_for(world.target_classes);
    world.zs_prompts = prompts_for(world.zs_classes);
    return world;
}

// --- pre-training -------------------------------------------------------------

struct PretrainConfig {
    int max_epochs = 40;
    int min_epochs = 40;  // the floor is only consulted from this epoch on
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    double weight_decay = 0.01;
    long warmup_steps = 50;
    double zs_floor = 0.8;  // quality gate on held-out-class zero-shot accuracy
    bool train_temperature = true;
};

struct PretrainResult {
    TwoTowerModel model;
    bool floor_reached = false;
    double zs_accuracy = 0.0;
    int epochs_run = 0;
    std::vector<double> zs_per_epoch;
};

// Contrastive pre-training on the all-class paired corpus (symmetric InfoNCE),
// stopping once zero-shot accuracy on the held-out classes clears the floor.
// A missed floor is reported via floor_reached, not thrown.
inline PretrainResult pretrain(const SyntheticWorld& world, const ModelSpec& model_spec,
                               const PretrainConfig& config, std::uint64_t seed) {
    if (world.pretrain_corpus.empty()) throw SpecInvalid("pretrain: empty pre-training corpus");
    if (config.batch_size < 1) throw SpecInvalid("pretrain: batch_size must be >= 1");
    ModelSpec spec = model_spec;
    spec.image_input_dim = world.spec.input_dim;
    spec.text_input_dim = world.spec.input_dim;

    SeededRng init_rng(derive_seed(seed, "model-init"));
    TwoTowerModel model = init_two_tower(spec, init_rng);

    detail::BatchIterator iter(world.pretrain_corpus.size(), config.batch_size,
                               derive_seed(seed, "batches"));
    const long steps_per_epoch = static_cast<long>(iter.batches_per_epoch());
    const long total_steps = static_cast<long>(config.max_epochs) * steps_per_epoch;

    OptimizerState opt = OptimizerState::like(model);
    GradientBag bag = GradientBag::like(model);

    PretrainResult result;
    long global_step = 0;
    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        for (long s = 0; s < steps_per_epoch; ++s) {
            const double lr = lr_at(global_step, total_steps, config.warmup_steps,
                                    config.learning_rate);
            const auto batch = iter.next();
            std::vector<const Vec*> image_inputs(batch.size());
            std::vector<const Vec*> text_inputs(batch.size());
            for (std::size_t i = 0; i < batch.size(); ++i) {
                image_inputs[i] = &world.pretrain_corpus.samples[batch[i]].image_input;
                text_inputs[i] = &world.pretrain_corpus.samples[batch[i]].text_input;
            }
            auto image_batch = detail::embed_with_traces(model.image_encoder, image_inputs);
            auto text_batch = detail::embed_with_traces(model.text_encoder, text_inputs);
            const LossValue cl = contrastive_loss(image_batch.embeddings, text_batch.embeddings,
                                                  model.temperature());
            bag.zero();
            detail::backprop_batch(model.image_encoder, image_batch, cl.image_grads,
                                   bag.image_layers);
            detail::backprop_batch(model.text_encoder, text_batch, cl.text_grads, bag.text_layers);
            bag.log_temperature_grad = cl.grad_log_temperature;
            optimizer_step(model, bag, opt, lr, config.weight_decay,
                           StepMask{true, true, config.train_temperature});
            ++global_step;
        }
        result.epochs_run = epoch + 1;
        result.zs_accuracy = evaluate(model, world.zs_test, world.zs_prompts);
        result.zs_per_epoch.push_back(result.zs_accuracy);
        if (result.zs_accuracy >= config.zs_floor) {
            result.floor_reached = true;
            if (epoch + 1 >= config.min_epochs) break;
        } else {
            result.floor_reached = false;
        }
    }
    result.model = std::move(model);
    return result;
}

}  // namespace dive
