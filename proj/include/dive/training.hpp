#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dive/data.hpp"
#include "dive/encoder.hpp"
#include "dive/errors.hpp"
#include "dive/geometry.hpp"
#include "dive/numeric.hpp"
#include "dive/objectives.hpp"
#include "dive/rng.hpp"

namespace dive {

// Synthetic analogue of one text prompt per class of interest.
struct ClassPromptSet {
    std::vector<int> class_ids;      // ascending global class indices
    std::vector<Vec> prompt_inputs;  // index-aligned with class_ids

    std::size_t size() const { return class_ids.size(); }
};

// --- optimizer ---------------------------------------------------------------

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// First/second moment accumulators shaped like the model, plus the shared
// step counter for bias correction.
struct OptimizerState {
    GradientBag m;
    GradientBag v;
    long step = 0;

    static OptimizerState like(const TwoTowerModel& model) {
        OptimizerState s;
        s.m = GradientBag::like(model);
        s.v = GradientBag::like(model);
        return s;
    }
};

struct StepMask {
    bool image = true;
    bool text = true;
    bool temperature = true;
};

namespace detail {

inline void adamw_update(double& param, double grad, double& m, double& v, long step, double lr,
                         double weight_decay) {
    m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * grad;
    v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * grad * grad;
    const double mhat = m / (1.0 - std::pow(kAdamBeta1, static_cast<double>(step)));
    const double vhat = v / (1.0 - std::pow(kAdamBeta2, static_cast<double>(step)));
    param -= lr * (mhat / (std::sqrt(vhat) + kAdamEps) + weight_decay * param);
}

inline void adamw_layers(std::vector<LayerWeights>& params, const std::vector<LayerWeights>& grads,
                         std::vector<LayerWeights>& m, std::vector<LayerWeights>& v, long step,
                         double lr, double weight_decay) {
    if (params.size() != grads.size()) throw ShapeMismatch("optimizer_step: layer count differs");
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (!params[k].w.same_shape(grads[k].w))
            throw ShapeMismatch("optimizer_step: weight shape differs");
        for (std::size_t i = 0; i < params[k].w.data.size(); ++i)
            adamw_update(params[k].w.data[i], grads[k].w.data[i], m[k].w.data[i], v[k].w.data[i],
                         step, lr, weight_decay);
        for (std::size_t i = 0; i < params[k].b.size(); ++i)
            adamw_update(params[k].b[i], grads[k].b[i], m[k].b[i], v[k].b[i], step, lr,
                         weight_decay);
    }
}

}  // namespace detail

// AdamW with decoupled weight decay. log_temperature is never decayed, and
// the temperature clamp runs after every step.
inline void optimizer_step(TwoTowerModel& model, const GradientBag& grads, OptimizerState& opt,
                           double lr, double weight_decay, const StepMask& mask = {}) {
    if (!(lr >= 0.0)) throw SpecInvalid("optimizer_step: lr must be nonnegative");
    ++opt.step;
    if (mask.image)
        detail::adamw_layers(model.image_encoder.layers, grads.image_layers, opt.m.image_layers,
                             opt.v.image_layers, opt.step, lr, weight_decay);
    if (mask.text)
        detail::adamw_layers(model.text_encoder.layers, grads.text_layers, opt.m.text_layers,
                             opt.v.text_layers, opt.step, lr, weight_decay);
    if (mask.temperature)
        detail::adamw_update(model.log_temperature, grads.log_temperature_grad,
                             opt.m.log_temperature_grad, opt.v.log_temperature_grad, opt.step, lr,
                             0.0);
    model.clamp_temperature();
}

// Linear warmup to peak_lr, then cosine decay to zero at total_steps.
inline double lr_at(long step, long total_steps, long warmup_steps, double peak_lr) {
    step = std::clamp(step, 0L, total_steps);
    if (warmup_steps > 0 && step < warmup_steps)
        return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return peak_lr;
    const double t = static_cast<double>(step - warmup_steps) /
                     static_cast<double>(total_steps - warmup_steps);
    return peak_lr * 0.5 * (1.0 + std::cos(3.141592653589793238462643383279502884 * t));
}

// --- inference and evaluation ------------------------------------------------

inline std::size_t argmax_similarity(const Vec& image_embedding,
                                     const std::vector<Vec>& prompt_embeddings) {
    std::size_t best = 0;
    double best_score = dot(image_embedding, prompt_embeddings[0]);
    for (std::size_t c = 1; c < prompt_embeddings.size(); ++c) {
        const double s = dot(image_embedding, prompt_embeddings[c]);
        if (s > best_score) {  // ties keep the lowest index
            best_score = s;
            best = c;
        }
    }
    return best;
}

inline std::vector<Vec> embed_prompts(const TwoTowerModel& model, const ClassPromptSet& prompts) {
    std::vector<Vec> out;
    out.reserve(prompts.size());
    for (const auto& p : prompts.prompt_inputs) out.push_back(forward(model.text_encoder, p));
    return out;
}

// Position of the winning prompt (ascending class order).
inline std::size_t zero_shot_classify(const TwoTowerModel& model, const Vec& image_input,
                                      const ClassPromptSet& prompts) {
    if (prompts.size() == 0) throw EmptyBatch("zero_shot_classify: no prompts");
    return argmax_similarity(forward(model.image_encoder, image_input), embed_prompts(model, prompts));
}

enum class EvalMetric { Accuracy, MacroF1 };

// Macro F1 from per-class confusion counts. Classes with no true and no
// predicted instances are excluded from the mean.
inline double macro_f1_from_counts(const std::vector<long>& tp, const std::vector<long>& fp,
                                   const std::vector<long>& fn) {
    if (tp.size() != fp.size() || tp.size() != fn.size())
        throw ShapeMismatch("macro_f1_from_counts: count lengths differ");
    double sum = 0.0;
    std::size_t included = 0;
    for (std::size_t c = 0; c < tp.size(); ++c) {
        if (tp[c] + fp[c] + fn[c] == 0) continue;
        sum += 2.0 * static_cast<double>(tp[c]) /
               static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
        ++included;
    }
    if (included == 0) throw EmptyDataset("macro_f1_from_counts: no class has any instance");
    return sum / static_cast<double>(included);
}

namespace detail {

inline double score_predictions(const std::vector<int>& labels, const std::vector<int>& preds,
                                const std::vector<int>& class_ids, EvalMetric metric) {
    if (metric == EvalMetric::Accuracy) {
        long correct = 0;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == preds[i]) ++correct;
        return static_cast<double>(correct) / static_cast<double>(labels.size());
    }
    std::vector<long> tp(class_ids.size(), 0), fp(class_ids.size(), 0), fn(class_ids.size(), 0);
    auto slot = [&](int class_id) -> long {
        for (std::size_t c = 0; c < class_ids.size(); ++c)
            if (class_ids[c] == class_id) return static_cast<long>(c);
        return -1;
    };
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const long t = slot(labels[i]);
        const long p = slot(preds[i]);
        if (t >= 0 && t == p) {
            ++tp[t];
        } else {
            if (p >= 0) ++fp[p];
            if (t >= 0) ++fn[t];
        }
    }
    return macro_f1_from_counts(tp, fp, fn);
}

}  // namespace detail

// Prompt-based evaluation: fraction correct under zero-shot classification,
// or macro F1 over the prompt-set classes.
inline double evaluate(const TwoTowerModel& model, const LabeledDataset& dataset,
                       const ClassPromptSet& prompts, EvalMetric metric = EvalMetric::Accuracy) {
    if (dataset.empty()) throw EmptyDataset("evaluate: empty dataset");
    const std::vector<Vec> prompt_embs = embed_prompts(model, prompts);
    std::vector<int> labels, preds;
    labels.reserve(dataset.size());
    preds.reserve(dataset.size());
    for (const auto& s : dataset.samples) {
        const Vec e = forward(model.image_encoder, s.image_input);
        preds.push_back(prompts.class_ids[argmax_similarity(e, prompt_embs)]);
        labels.push_back(s.label);
    }
    return detail::score_predictions(labels, preds, prompts.class_ids, metric);
}

// Head-based evaluation for the cross-entropy methods (vanilla FT / LP-FT).
inline double evaluate_with_head(const TwoTowerModel& model, const ClassifierHead& head,
                                 const LabeledDataset& dataset, const std::vector<int>& class_ids,
                                 EvalMetric metric = EvalMetric::Accuracy) {
    if (dataset.empty()) throw EmptyDataset("evaluate_with_head: empty dataset");
    std::vector<int> labels, preds;
    labels.reserve(dataset.size());
    preds.reserve(dataset.size());
    for (const auto& s : dataset.samples) {
        const Vec e = forward(model.image_encoder, s.image_input);
        Vec logits = matvec(head.w, e);
        axpy(1.0, head.b, logits);
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.size(); ++c)
            if (logits[c] > logits[best]) best = c;
        preds.push_back(class_ids[best]);
        labels.push_back(s.label);
    }
    return detail::score_predictions(labels, preds, class_ids, metric);
}

// --- training loop -----------------------------------------------------------

struct TrainConfig {
    MethodSpec method;
    std::size_t batch_size = 64;      // B, target batches
    std::size_t ref_batch_size = 64;  // B', reference batches
    int epochs = 30;
    double learning_rate = 1e-3;
    double weight_decay = 0.01;
    long warmup_steps = 50;
    double alpha = 0.99;  // EMA decay of the average vector
    std::uint64_t seed = 0;
    bool train_temperature = true;
    bool early_stopping = true;
    long max_steps = 0;                 // 0 = run all epochs
    double lpft_probe_fraction = 0.5;   // share of epochs spent head-only
    bool ema_update_before_avl = true;  // refresh the EMA target before AVL within a step
    double head_lr_multiplier = 10.0;   // classification head learns faster than the backbone
};

struct EpochRecord {
    int epoch = 0;
    double loss_total = 0.0;
    double loss_cl = 0.0;
    double loss_avl = 0.0;
    double loss_pvl = 0.0;
    double loss_snd = 0.0;
    double loss_aux = 0.0;
    double loss_ce = 0.0;
    double id_val_accuracy = 0.0;
};

struct RunMetrics {
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;
    double best_id_val = 0.0;
    // Final evaluation, filled by the harness after training:
    double id_test_accuracy = 0.0;
    double id_test_macro_f1 = 0.0;
    double ood_accuracy = 0.0;
    double zs_accuracy = 0.0;
    double rsa_score = 0.0;
    double mean_diff_norm = 0.0;
    double max_diff_norm = 0.0;
    // Reported in report.json only; deliberately absent from the JSONL so
    // repeated runs stay byte-identical.
    double wall_clock_seconds = 0.0;
};

struct TargetTask {
    LabeledDataset train;
    LabeledDataset validation;
    ClassPromptSet prompts;  // one prompt per target class
};

struct TrainResult {
    TwoTowerModel model;
    ClassifierHead head;  // meaningful for VanillaFT / LPFT only
    RunMetrics metrics;
};

namespace detail {

// Shuffled-epoch batch iterator. Each stream owns its RNG, so reference
// sampling never perturbs target sampling.
class BatchIterator {
public:
    BatchIterator(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
        : rng_(seed), batch_size_(std::min(batch_size, dataset_size)), order_(dataset_size) {
        for (std::size_t i = 0; i < dataset_size; ++i) order_[i] = i;
        reshuffle();
    }

    std::vector<std::size_t> next() {
        if (cursor_ >= order_.size()) reshuffle();
        const std::size_t take = std::min(batch_size_, order_.size() - cursor_);
        std::vector<std::size_t> batch(order_.begin() + static_cast<long>(cursor_),
                                       order_.begin() + static_cast<long>(cursor_ + take));
        cursor_ += take;
        return batch;
    }

    std::size_t batches_per_epoch() const {
        return (order_.size() + batch_size_ - 1) / batch_size_;
    }

private:
    void reshuffle() {
        rng_.shuffle(order_);
        cursor_ = 0;
    }

    SeededRng rng_;
    std::size_t batch_size_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

struct TracedBatch {
    std::vector<ForwardTrace> traces;
    std::vector<Vec> embeddings;
};

inline TracedBatch embed_with_traces(const EncoderWeights& enc,
                                     const std::vector<const Vec*>& inputs) {
    TracedBatch out;
    out.traces.reserve(inputs.size());
    out.embeddings.reserve(inputs.size());
    for (const Vec* input : inputs) {
        out.traces.push_back(forward_trace(enc, *input));
        out.embeddings.push_back(out.traces.back().embedding);
    }
    return out;
}

inline void backprop_batch(const EncoderWeights& enc, const TracedBatch& batch,
                           const std::vector<Vec>& upstream, std::vector<LayerWeights>& into) {
    if (upstream.empty()) return;
    if (upstream.size() != batch.traces.size())
        throw ShapeMismatch("backprop_batch: gradient count differs from batch");
    for (std::size_t i = 0; i < batch.traces.size(); ++i)
        accumulate(into, backward(enc, batch.traces[i], upstream[i]), 1.0);
}

inline ClassifierHead init_head(std::size_t num_classes, std::size_t embed_dim,
                                std::uint64_t seed) {
    SeededRng rng(seed);
    ClassifierHead head{Matrix(num_classes, embed_dim), Vec(num_classes, 0.0)};
    const double bound = std::sqrt(6.0 / static_cast<double>(embed_dim + num_classes));
    for (double& w : head.w.data) w = rng.uniform(-bound, bound);
    return head;
}

struct HeadOptimizer {
    Matrix m_w, v_w;
    Vec m_b, v_b;
    long step = 0;

    explicit HeadOptimizer(const ClassifierHead& head)
        : m_w(head.w.rows, head.w.cols),
          v_w(head.w.rows, head.w.cols),
          m_b(head.b.size(), 0.0),
          v_b(head.b.size(), 0.0) {}

    void apply(ClassifierHead& head, const HeadLoss& grads, double lr, double weight_decay) {
        ++step;
        for (std::size_t i = 0; i < head.w.data.size(); ++i)
            adamw_update(head.w.data[i], grads.grad_w.data[i], m_w.data[i], v_w.data[i], step, lr,
                         weight_decay);
        for (std::size_t i = 0; i < head.b.size(); ++i)
            adamw_update(head.b[i], grads.grad_b[i], m_b[i], v_b[i], step, lr, weight_decay);
    }
};

}  // namespace detail

// Fine-tunes `model` on the target task with the configured method. The
// reference dataset must be supplied exactly for the methods that use one.
inline TrainResult train(const TrainConfig& config, const TargetTask& task,
                         const PairedDataset* reference, const FrozenSnapshot& frozen,
                         TwoTowerModel model) {
    const MethodSpec& spec = config.method;
    if (task.train.empty()) throw ConfigInvalid("train: empty target training set");
    if (config.batch_size < 1 || config.ref_batch_size < 1)
        throw ConfigInvalid("train: batch sizes must be >= 1");
    if (config.epochs < 0) throw ConfigInvalid("train: negative epoch count");
    if (spec.uses_reference()) {
        if (reference == nullptr || reference->empty())
            throw MissingReferenceDataset(std::string("train: ") + method_name(spec.method) +
                                          " requires a reference dataset");
    } else if (reference != nullptr) {
        throw ConfigInvalid(std::string("train: ") + method_name(spec.method) +
                            " does not take a reference dataset");
    }

    const auto t_start = std::chrono::steady_clock::now();

    // Compact label mapping for the classification head and FLYP prompts.
    const std::vector<int>& class_ids = task.prompts.class_ids;
    auto compact_label = [&](int label) -> std::size_t {
        for (std::size_t c = 0; c < class_ids.size(); ++c)
            if (class_ids[c] == label) return c;
        throw LabelOutOfRange("train: target label has no prompt");
    };

    detail::BatchIterator target_iter(task.train.size(), config.batch_size,
                                      derive_seed(config.seed, "target-batches"));
    std::optional<detail::BatchIterator> ref_iter;
    const ReferenceCache* cache = nullptr;
    ReferenceCache cache_storage;
    if (spec.uses_reference()) {
        ref_iter.emplace(reference->size(), config.ref_batch_size,
                         derive_seed(config.seed, "reference-batches"));
        cache_storage = build_reference_cache(frozen, *reference);
        cache = &cache_storage;
    }

    const long steps_per_epoch = static_cast<long>(target_iter.batches_per_epoch());
    long total_steps = static_cast<long>(config.epochs) * steps_per_epoch;
    if (config.max_steps > 0) total_steps = std::min(total_steps, config.max_steps);

    ClassifierHead head;
    std::optional<detail::HeadOptimizer> head_opt;
    long probe_epochs = 0;
    if (spec.uses_head()) {
        head = detail::init_head(class_ids.size(), model.image_encoder.output_dim(),
                                 derive_seed(config.seed, "head-init"));
        head_opt.emplace(head);
        if (spec.method == Method::LPFT)
            probe_epochs = std::lround(config.lpft_probe_fraction * config.epochs);
    }

    OptimizerState opt = OptimizerState::like(model);
    GradientBag bag = GradientBag::like(model);

    const std::size_t ema_dim = spec.method == Method::DiVECosine ? 1 : model.image_encoder.output_dim();
    AverageVectorState ema = AverageVectorState::zero(ema_dim, config.alpha);

    RunMetrics metrics;
    TwoTowerModel best_model = model;
    ClassifierHead best_head = head;
    metrics.best_id_val = -1.0;

    long global_step = 0;
    bool stop = false;
    for (int epoch = 0; epoch < config.epochs && !stop; ++epoch) {
        EpochRecord record;
        record.epoch = epoch;
        long steps_this_epoch = 0;
        const bool encoder_frozen = spec.uses_head() && epoch < probe_epochs;

        for (long s = 0; s < steps_per_epoch; ++s) {
            if (config.max_steps > 0 && global_step >= config.max_steps) {
                stop = true;
                break;
            }
            const double lr = lr_at(global_step, total_steps, config.warmup_steps,
                                    config.learning_rate);
            const auto batch = target_iter.next();
            std::vector<const Vec*> image_inputs(batch.size());
            for (std::size_t i = 0; i < batch.size(); ++i)
                image_inputs[i] = &task.train.samples[batch[i]].image_input;
            auto image_batch = detail::embed_with_traces(model.image_encoder, image_inputs);

            if (spec.uses_head()) {
                std::vector<int> compact(batch.size());
                for (std::size_t i = 0; i < batch.size(); ++i)
                    compact[i] = static_cast<int>(compact_label(task.train.samples[batch[i]].label));
                const HeadLoss ce = cross_entropy_head_loss(image_batch.embeddings, compact, head);
                record.loss_ce += ce.value;
                record.loss_total += ce.value;
                head_opt->apply(head, ce, lr * config.head_lr_multiplier, config.weight_decay);
                if (!encoder_frozen) {
                    bag.zero();
                    detail::backprop_batch(model.image_encoder, image_batch, ce.feature_grads,
                                           bag.image_layers);
                    optimizer_step(model, bag, opt, lr, config.weight_decay,
                                   StepMask{true, false, false});
                }
            } else {
                std::vector<const Vec*> text_inputs(batch.size());
                for (std::size_t i = 0; i < batch.size(); ++i) {
                    const std::size_t c = compact_label(task.train.samples[batch[i]].label);
                    text_inputs[i] = &task.prompts.prompt_inputs[c];
                }
                auto text_batch = detail::embed_with_traces(model.text_encoder, text_inputs);
                const LossValue cl = contrastive_loss(image_batch.embeddings,
                                                      text_batch.embeddings, model.temperature());

                std::optional<LossValue> avl_part, pvl_part, snd_part, aux_part;
                detail::TracedBatch ref_image, ref_text;
                std::vector<std::size_t> ref_batch;
                if (spec.uses_reference()) {
                    ref_batch = ref_iter->next();
                    std::vector<const Vec*> ref_image_inputs(ref_batch.size());
                    std::vector<const Vec*> ref_text_inputs(ref_batch.size());
                    for (std::size_t j = 0; j < ref_batch.size(); ++j) {
                        ref_image_inputs[j] = &reference->samples[ref_batch[j]].image_input;
                        ref_text_inputs[j] = &reference->samples[ref_batch[j]].text_input;
                    }
                    ref_image = detail::embed_with_traces(model.image_encoder, ref_image_inputs);
                    if (spec.method != Method::SnD)
                        ref_text = detail::embed_with_traces(model.text_encoder, ref_text_inputs);

                    std::vector<Vec> pre_image(ref_batch.size()), pre_text(ref_batch.size());
                    for (std::size_t j = 0; j < ref_batch.size(); ++j) {
                        pre_image[j] = cache->image[ref_batch[j]];
                        if (spec.method != Method::SnD) pre_text[j] = cache->text[ref_batch[j]];
                    }

                    switch (spec.method) {
                        case Method::FLYPReplay:
                            aux_part = contrastive_loss(ref_image.embeddings, ref_text.embeddings,
                                                        model.temperature());
                            break;
                        case Method::SnD:
                            snd_part = snd_loss(ref_image.embeddings, pre_image);
                            break;
                        case Method::DiVE: {
                            DifferenceVectorBatch dvb;
                            dvb.ids = ref_batch;
                            dvb.u.reserve(ref_batch.size());
                            dvb.v.reserve(ref_batch.size());
                            for (std::size_t j = 0; j < ref_batch.size(); ++j) {
                                dvb.u.push_back(sub(ref_image.embeddings[j], pre_image[j]));
                                dvb.v.push_back(sub(ref_text.embeddings[j], pre_text[j]));
                            }
                            if (config.ema_update_before_avl) ema = update_average_vector(ema, dvb);
                            if (spec.use_avl) avl_part = avl(dvb.u, dvb.v, ema.m);
                            if (spec.use_pvl) pvl_part = pvl(dvb.u, dvb.v);
                            if (!config.ema_update_before_avl) ema = update_average_vector(ema, dvb);
                            break;
                        }
                        case Method::DiVECosine: {
                            DifferenceVectorBatch scalar_dvb;
                            scalar_dvb.ids = ref_batch;
                            scalar_dvb.u.reserve(ref_batch.size());
                            scalar_dvb.v.reserve(ref_batch.size());
                            for (std::size_t j = 0; j < ref_batch.size(); ++j) {
                                scalar_dvb.u.push_back({dot(ref_image.embeddings[j], pre_image[j])});
                                scalar_dvb.v.push_back({dot(ref_text.embeddings[j], pre_text[j])});
                            }
                            if (config.ema_update_before_avl)
                                ema = update_average_vector(ema, scalar_dvb);
                            if (spec.use_avl)
                                avl_part = avl_cosine(ref_image.embeddings, pre_image,
                                                      ref_text.embeddings, pre_text, ema.m[0]);
                            if (spec.use_pvl)
                                pvl_part = pvl_cosine(ref_image.embeddings, pre_image,
                                                      ref_text.embeddings, pre_text);
                            if (!config.ema_update_before_avl)
                                ema = update_average_vector(ema, scalar_dvb);
                            break;
                        }
                        default:
                            break;
                    }
                }

                const CombinedLoss combined =
                    combine_final(spec, cl, avl_part, pvl_part, snd_part, aux_part);
                record.loss_cl += cl.value;
                record.loss_total += combined.value;
                if (avl_part) record.loss_avl += avl_part->value;
                if (pvl_part) record.loss_pvl += pvl_part->value;
                if (snd_part) record.loss_snd += snd_part->value;
                if (aux_part) record.loss_aux += aux_part->value;

                bag.zero();
                detail::backprop_batch(model.image_encoder, image_batch,
                                       combined.target.image_grads, bag.image_layers);
                detail::backprop_batch(model.text_encoder, text_batch, combined.target.text_grads,
                                       bag.text_layers);
                detail::backprop_batch(model.image_encoder, ref_image,
                                       combined.reference.image_grads, bag.image_layers);
                detail::backprop_batch(model.text_encoder, ref_text,
                                       combined.reference.text_grads, bag.text_layers);
                bag.log_temperature_grad = combined.grad_log_temperature;

                optimizer_step(model, bag, opt, lr, config.weight_decay,
                               StepMask{true, true, config.train_temperature});
            }
            ++global_step;
            ++steps_this_epoch;
        }
        if (steps_this_epoch == 0) break;

        const double denom = static_cast<double>(steps_this_epoch);
        record.loss_total /= denom;
        record.loss_cl /= denom;
        record.loss_avl /= denom;
        record.loss_pvl /= denom;
        record.loss_snd /= denom;
        record.loss_aux /= denom;
        record.loss_ce /= denom;

        record.id_val_accuracy =
            spec.uses_head()
                ? evaluate_with_head(model, head, task.validation, class_ids)
                : evaluate(model, task.validation, task.prompts);
        metrics.epochs.push_back(record);

        if (record.id_val_accuracy > metrics.best_id_val) {
            metrics.best_id_val = record.id_val_accuracy;
            metrics.best_epoch = record.epoch;
            best_model = model;
            best_head = head;
        }
    }

    TrainResult result;
    if (config.early_stopping && metrics.best_epoch >= 0) {
        result.model = std::move(best_model);
        result.head = std::move(best_head);
    } else {
        result.model = std::move(model);
        result.head = std::move(head);
        metrics.best_epoch = metrics.epochs.empty() ? -1 : metrics.epochs.back().epoch;
    }
    metrics.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.metrics = std::move(metrics);
    return result;
}

// LP-FT: linear probe first (head only, encoder frozen), then full
// fine-tuning. The epoch split comes from lpft_probe_fraction.
inline TrainResult lpft_train(TrainConfig config, const TargetTask& task,
                              const FrozenSnapshot& frozen, TwoTowerModel model) {
    config.method.method = Method::LPFT;
    return train(config, task, nullptr, frozen, std::move(model));
}

}  // namespace dive
