#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dive/datagen.hpp"
#include "dive/encoder.hpp"
#include "dive/errors.hpp"
#include "dive/geometry.hpp"
#include "dive/stats.hpp"
#include "dive/training.hpp"

namespace dive {

using nlohmann::json;

struct RunSpec {
    std::string name;  // unique; defaults to the lowercased method name
    TrainConfig train;
    std::size_t reference_per_class = 0;  // 0 = full reference set; >0 = per-class subset
};

struct ExperimentConfig {
    WorldSpec world;
    ModelSpec model;
    PretrainConfig pretrain;
    TrainConfig train_defaults;
    std::vector<RunSpec> runs;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    bool ensemble_enabled = false;
    std::vector<double> ensemble_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    std::string outdir = "out";
};

// --- config parsing ----------------------------------------------------------

namespace detail {

inline void check_keys(const json& obj, const std::set<std::string>& allowed,
                       const std::string& context) {
    for (const auto& item : obj.items())
        if (!allowed.count(item.key()))
            throw ConfigInvalid("unknown key \"" + item.key() + "\" in " + context);
}

template <typename T>
inline void read_field(const json& obj, const char* key, T& into) {
    if (obj.contains(key)) into = obj.at(key).get<T>();
}

inline Method parse_method(const std::string& name) {
    if (name == "VanillaFT") return Method::VanillaFT;
    if (name == "LPFT") return Method::LPFT;
    if (name == "FLYP") return Method::FLYP;
    if (name == "FLYPReplay") return Method::FLYPReplay;
    if (name == "SnD") return Method::SnD;
    if (name == "DiVE") return Method::DiVE;
    if (name == "DiVECosine") return Method::DiVECosine;
    throw ConfigInvalid("unknown method \"" + name + "\"");
}

inline std::string lowercase(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

inline const std::set<std::string>& train_keys() {
    static const std::set<std::string> keys{
        "batch_size",    "ref_batch_size",    "epochs",       "learning_rate",
        "weight_decay",  "warmup_steps",      "alpha",        "lambda",
        "lambda_snd",    "lambda_aux",        "use_avl",      "use_pvl",
        "train_temperature", "early_stopping", "max_steps",   "lpft_probe_fraction",
        "ema_order",     "head_lr_multiplier"};
    return keys;
}

inline void apply_train_json(const json& obj, TrainConfig& config, const std::string& context) {
    read_field(obj, "batch_size", config.batch_size);
    read_field(obj, "ref_batch_size", config.ref_batch_size);
    read_field(obj, "epochs", config.epochs);
    read_field(obj, "learning_rate", config.learning_rate);
    read_field(obj, "weight_decay", config.weight_decay);
    read_field(obj, "warmup_steps", config.warmup_steps);
    read_field(obj, "alpha", config.alpha);
    read_field(obj, "lambda", config.method.lambda);
    read_field(obj, "lambda_snd", config.method.lambda_snd);
    read_field(obj, "lambda_aux", config.method.lambda_aux);
    read_field(obj, "use_avl", config.method.use_avl);
    read_field(obj, "use_pvl", config.method.use_pvl);
    read_field(obj, "train_temperature", config.train_temperature);
    read_field(obj, "early_stopping", config.early_stopping);
    read_field(obj, "max_steps", config.max_steps);
    read_field(obj, "lpft_probe_fraction", config.lpft_probe_fraction);
    read_field(obj, "head_lr_multiplier", config.head_lr_multiplier);
    if (obj.contains("ema_order")) {
        const std::string order = obj.at("ema_order").get<std::string>();
        if (order == "update-then-avl") {
            config.ema_update_before_avl = true;
        } else if (order == "avl-then-update") {
            config.ema_update_before_avl = false;
        } else {
            throw ConfigInvalid("bad ema_order \"" + order + "\" in " + context +
                                " (expected update-then-avl or avl-then-update)");
        }
    }
    if (!(config.alpha >= 0.0 && config.alpha <= 1.0))
        throw ConfigInvalid("alpha outside [0, 1] in " + context);
    if (config.method.lambda < 0.0 || config.method.lambda_snd < 0.0 ||
        config.method.lambda_aux < 0.0)
        throw ConfigInvalid("negative loss weight in " + context);
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const json& root) {
    ExperimentConfig cfg;
    detail::check_keys(root, {"world", "model", "pretrain", "train", "runs", "seeds", "ensemble",
                              "outdir"},
                       "config");
    if (root.contains("world")) {
        const json& w = root.at("world");
        detail::check_keys(w,
                           {"num_classes_total", "num_target_classes", "input_dim", "noise_sigma",
                            "ood_shift_strength", "pretrain_per_class", "id_train_per_class",
                            "id_val_per_class", "test_per_class", "reference_per_class",
                            "rsa_pairs", "domain_mix", "label_imbalance"},
                           "config.world");
        detail::read_field(w, "num_classes_total", cfg.world.num_classes_total);
        detail::read_field(w, "num_target_classes", cfg.world.num_target_classes);
        detail::read_field(w, "input_dim", cfg.world.input_dim);
        detail::read_field(w, "noise_sigma", cfg.world.noise_sigma);
        detail::read_field(w, "ood_shift_strength", cfg.world.ood_shift_strength);
        detail::read_field(w, "pretrain_per_class", cfg.world.pretrain_per_class);
        detail::read_field(w, "id_train_per_class", cfg.world.id_train_per_class);
        detail::read_field(w, "id_val_per_class", cfg.world.id_val_per_class);
        detail::read_field(w, "test_per_class", cfg.world.test_per_class);
        detail::read_field(w, "reference_per_class", cfg.world.reference_per_class);
        detail::read_field(w, "rsa_pairs", cfg.world.rsa_pairs);
        detail::read_field(w, "domain_mix", cfg.world.domain_mix);
        detail::read_field(w, "label_imbalance", cfg.world.label_imbalance);
    }
    if (root.contains("model")) {
        const json& m = root.at("model");
        detail::check_keys(m, {"hidden_width", "hidden_layers", "embed_dim", "init_temperature"},
                           "config.model");
        detail::read_field(m, "hidden_width", cfg.model.hidden_width);
        detail::read_field(m, "hidden_layers", cfg.model.hidden_layers);
        detail::read_field(m, "embed_dim", cfg.model.embed_dim);
        detail::read_field(m, "init_temperature", cfg.model.init_temperature);
    }
    if (root.contains("pretrain")) {
        const json& p = root.at("pretrain");
        detail::check_keys(p,
                           {"max_epochs", "min_epochs", "batch_size", "learning_rate",
                            "weight_decay", "warmup_steps", "zs_floor", "train_temperature"},
                           "config.pretrain");
        detail::read_field(p, "max_epochs", cfg.pretrain.max_epochs);
        detail::read_field(p, "min_epochs", cfg.pretrain.min_epochs);
        detail::read_field(p, "batch_size", cfg.pretrain.batch_size);
        detail::read_field(p, "learning_rate", cfg.pretrain.learning_rate);
        detail::read_field(p, "weight_decay", cfg.pretrain.weight_decay);
        detail::read_field(p, "warmup_steps", cfg.pretrain.warmup_steps);
        detail::read_field(p, "zs_floor", cfg.pretrain.zs_floor);
        detail::read_field(p, "train_temperature", cfg.pretrain.train_temperature);
    }
    if (root.contains("train")) {
        detail::check_keys(root.at("train"), detail::train_keys(), "config.train");
        detail::apply_train_json(root.at("train"), cfg.train_defaults, "config.train");
    }
    if (root.contains("runs")) {
        for (const json& r : root.at("runs")) {
            std::set<std::string> allowed = detail::train_keys();
            allowed.insert("method");
            allowed.insert("name");
            allowed.insert("reference_per_class");
            detail::check_keys(r, allowed, "config.runs[]");
            if (!r.contains("method")) throw ConfigInvalid("run without a method");
            RunSpec run;
            run.train = cfg.train_defaults;
            run.train.method.method = detail::parse_method(r.at("method").get<std::string>());
            detail::apply_train_json(r, run.train, "config.runs[]");
            detail::read_field(r, "reference_per_class", run.reference_per_class);
            run.name = r.contains("name") ? r.at("name").get<std::string>()
                                          : detail::lowercase(method_name(run.train.method.method));
            cfg.runs.push_back(std::move(run));
        }
    }
    if (root.contains("seeds")) {
        cfg.seeds = root.at("seeds").get<std::vector<std::uint64_t>>();
    }
    if (root.contains("ensemble")) {
        const json& e = root.at("ensemble");
        detail::check_keys(e, {"enabled", "grid"}, "config.ensemble");
        detail::read_field(e, "enabled", cfg.ensemble_enabled);
        if (e.contains("grid")) cfg.ensemble_grid = e.at("grid").get<std::vector<double>>();
    }
    if (root.contains("outdir")) cfg.outdir = root.at("outdir").get<std::string>();

    if (cfg.seeds.empty()) throw ConfigInvalid("seeds must be nonempty");
    for (double c : cfg.ensemble_grid)
        if (!(c > 0.0 && c < 1.0)) throw ConfigInvalid("ensemble grid coefficients must lie in (0, 1)");
    std::set<std::string> names;
    for (const auto& run : cfg.runs) {
        if (run.name == "pretrained")
            throw ConfigInvalid("run name \"pretrained\" is reserved for the frozen baseline row");
        if (!names.insert(run.name).second)
            throw ConfigInvalid("duplicate run name \"" + run.name + "\"");
    }
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path.string());
    json root;
    try {
        in >> root;
    } catch (const json::exception& e) {
        throw ConfigInvalid("config: " + std::string(e.what()));
    }
    return parse_experiment_config(root);
}

// --- RSA report ----------------------------------------------------------------

struct RsaReport {
    std::size_t corpus_size = 0;  // number of image-text pairs
    double score = 0.0;
    double mean_diff_norm = 0.0;
    double max_diff_norm = 0.0;

    json to_json() const {
        return json{{"corpus_size", corpus_size},
                    {"score", score},
                    {"mean_diff_norm", mean_diff_norm},
                    {"max_diff_norm", max_diff_norm}};
    }
};

// Pools image and text embeddings of the evaluation corpus from both models
// and correlates the resulting RDMs.
inline RsaReport rsa_report(const FrozenSnapshot& frozen, const TwoTowerModel& ft_model,
                            const PairedDataset& eval_corpus) {
    if (eval_corpus.size() < 3) throw TooFew("rsa_report: evaluation corpus needs >= 3 pairs");
    const ReferenceCache cache = build_reference_cache(frozen, eval_corpus);
    std::vector<Vec> set_pre, set_ft;
    set_pre.reserve(2 * eval_corpus.size());
    set_ft.reserve(2 * eval_corpus.size());
    std::vector<Vec> ft_image, ft_text;
    ft_image.reserve(eval_corpus.size());
    ft_text.reserve(eval_corpus.size());
    for (const auto& s : eval_corpus.samples) {
        ft_image.push_back(forward(ft_model.image_encoder, s.image_input));
        ft_text.push_back(forward(ft_model.text_encoder, s.text_input));
    }
    for (std::size_t i = 0; i < eval_corpus.size(); ++i) set_pre.push_back(cache.image[i]);
    for (std::size_t i = 0; i < eval_corpus.size(); ++i) set_pre.push_back(cache.text[i]);
    for (std::size_t i = 0; i < eval_corpus.size(); ++i) set_ft.push_back(ft_image[i]);
    for (std::size_t i = 0; i < eval_corpus.size(); ++i) set_ft.push_back(ft_text[i]);

    DifferenceVectorBatch dvb;
    dvb.u.reserve(eval_corpus.size());
    dvb.v.reserve(eval_corpus.size());
    for (std::size_t i = 0; i < eval_corpus.size(); ++i) {
        dvb.u.push_back(sub(ft_image[i], cache.image[i]));
        dvb.v.push_back(sub(ft_text[i], cache.text[i]));
        dvb.ids.push_back(i);
    }
    const DiffNormStats stats = diff_norm_stats(dvb);

    RsaReport report;
    report.corpus_size = eval_corpus.size();
    report.score = rsa_score(set_pre, set_ft);
    report.mean_diff_norm = stats.mean_norm;
    report.max_diff_norm = stats.max_norm;
    return report;
}

// --- weight-ensemble sweep -------------------------------------------------------

struct SweepPoint {
    double coeff = 0.0;
    double id_val_accuracy = 0.0;
};

struct SweepResult {
    double best_coeff = 0.0;
    std::vector<SweepPoint> points;
};

// Core argmax over an arbitrary evaluator; ties resolve to the smaller
// coefficient. Exposed so hand-constructed grids can drive it directly.
inline SweepResult ensemble_sweep_impl(const std::vector<double>& grid,
                                       const std::function<double(double)>& eval_at) {
    if (grid.empty()) throw EmptyGrid("ensemble_sweep: empty coefficient grid");
    std::vector<double> sorted = grid;
    std::sort(sorted.begin(), sorted.end());
    SweepResult result;
    double best_acc = -1.0;
    for (double coeff : sorted) {
        const double acc = eval_at(coeff);
        result.points.push_back({coeff, acc});
        if (acc > best_acc) {  // strict: ties keep the smaller coefficient
            best_acc = acc;
            result.best_coeff = coeff;
        }
    }
    return result;
}

inline SweepResult ensemble_sweep(const TwoTowerModel& pre, const TwoTowerModel& ft,
                                  const std::vector<double>& grid, const LabeledDataset& id_val,
                                  const ClassPromptSet& prompts) {
    return ensemble_sweep_impl(grid, [&](double coeff) {
        return evaluate(interpolate_weights(pre, ft, coeff), id_val, prompts);
    });
}

// --- experiment pipeline ---------------------------------------------------------

struct MethodSeedResult {
    std::string name;
    std::string method;
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    RunMetrics metrics;
    double ensemble_best_coeff = 0.0;
    double ensemble_id_val = 0.0;
    bool has_ensemble = false;
};

struct AggregateStat {
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation over seeds
    std::size_t count = 0;
};

struct ComparisonReport {
    std::vector<MethodSeedResult> rows;
    // aggregate[run][metric] and p_values["a|b"][metric]
    std::map<std::string, std::map<std::string, AggregateStat>> aggregate;
    std::map<std::string, std::map<std::string, TTestResult>> p_values;
};

namespace detail {

inline AggregateStat aggregate_stat(const std::vector<double>& values) {
    AggregateStat stat;
    stat.count = values.size();
    if (values.empty()) return stat;
    for (double v : values) stat.mean += v;
    stat.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - stat.mean) * (v - stat.mean);
        stat.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return stat;
}

inline json epoch_to_json(const EpochRecord& r) {
    return json{{"epoch", r.epoch},
                {"id_val_accuracy", r.id_val_accuracy},
                {"loss",
                 {{"total", r.loss_total},
                  {"cl", r.loss_cl},
                  {"avl", r.loss_avl},
                  {"pvl", r.loss_pvl},
                  {"snd", r.loss_snd},
                  {"aux", r.loss_aux},
                  {"ce", r.loss_ce}}}};
}

inline json final_to_json(const MethodSeedResult& row) {
    json j{{"final", true},
           {"name", row.name},
           {"method", row.method},
           {"seed", row.seed},
           {"best_epoch", row.metrics.best_epoch},
           {"best_id_val", row.metrics.best_id_val},
           {"id_test_accuracy", row.metrics.id_test_accuracy},
           {"id_test_macro_f1", row.metrics.id_test_macro_f1},
           {"ood_accuracy", row.metrics.ood_accuracy},
           {"zs_accuracy", row.metrics.zs_accuracy},
           {"rsa_score", row.metrics.rsa_score},
           {"mean_diff_norm", row.metrics.mean_diff_norm},
           {"max_diff_norm", row.metrics.max_diff_norm}};
    if (row.has_ensemble) {
        j["ensemble_best_coeff"] = row.ensemble_best_coeff;
        j["ensemble_id_val"] = row.ensemble_id_val;
    }
    return j;
}

inline void write_jsonl(const MethodSeedResult& row, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string());
    for (const auto& r : row.metrics.epochs) out << epoch_to_json(r).dump() << "\n";
    out << final_to_json(row).dump() << "\n";
}

inline const std::vector<std::pair<const char*, double RunMetrics::*>>& report_metrics() {
    static const std::vector<std::pair<const char*, double RunMetrics::*>> metrics{
        {"id_test_accuracy", &RunMetrics::id_test_accuracy},
        {"id_test_macro_f1", &RunMetrics::id_test_macro_f1},
        {"ood_accuracy", &RunMetrics::ood_accuracy},
        {"zs_accuracy", &RunMetrics::zs_accuracy},
        {"rsa_score", &RunMetrics::rsa_score},
        {"mean_diff_norm", &RunMetrics::mean_diff_norm}};
    return metrics;
}

}  // namespace detail

// First `per_class` samples of every class, for the reference-size grid.
inline PairedDataset subset_per_class(const PairedDataset& ds, std::size_t per_class) {
    PairedDataset out;
    std::map<int, std::size_t> taken;
    for (const auto& s : ds.samples)
        if (taken[s.class_index]++ < per_class) out.samples.push_back(s);
    return out;
}

inline std::filesystem::path resolve_outdir(const std::string& configured) {
    if (const char* env = std::getenv("DIVE_OUTDIR"); env != nullptr && *env != '\0')
        return std::filesystem::path(env);
    return std::filesystem::path(configured);
}

// Evaluates one fine-tuned model against every final metric. CE-family
// methods score ID/OOD with their trained head; everything else is
// prompt-based, and zero-shot always is.
inline void evaluate_final_metrics(const MethodSpec& spec, const TrainResult& result,
                                   const SyntheticWorld& world, const FrozenSnapshot& frozen,
                                   RunMetrics& metrics) {
    if (spec.uses_head()) {
        metrics.id_test_accuracy = evaluate_with_head(result.model, result.head, world.id_test,
                                                      world.target_prompts.class_ids);
        metrics.id_test_macro_f1 = evaluate_with_head(result.model, result.head, world.id_test,
                                                      world.target_prompts.class_ids,
                                                      EvalMetric::MacroF1);
        metrics.ood_accuracy = evaluate_with_head(result.model, result.head, world.ood_test,
                                                  world.target_prompts.class_ids);
    } else {
        metrics.id_test_accuracy = evaluate(result.model, world.id_test, world.target_prompts);
        metrics.id_test_macro_f1 =
            evaluate(result.model, world.id_test, world.target_prompts, EvalMetric::MacroF1);
        metrics.ood_accuracy = evaluate(result.model, world.ood_test, world.target_prompts);
    }
    metrics.zs_accuracy = evaluate(result.model, world.zs_test, world.zs_prompts);
    const RsaReport rsa = rsa_report(frozen, result.model, world.rsa_corpus);
    metrics.rsa_score = rsa.score;
    metrics.mean_diff_norm = rsa.mean_diff_norm;
    metrics.max_diff_norm = rsa.max_diff_norm;
}

// Full pipeline: per seed, generate the world, pre-train once, then run every
// configured method against the same frozen snapshot. Failures are tagged per
// (method, seed); the remaining runs continue.
inline ComparisonReport run_experiment(const ExperimentConfig& cfg) {
    if (cfg.runs.empty()) throw ConfigInvalid("experiment: no runs configured");
    const std::filesystem::path outdir = resolve_outdir(cfg.outdir);
    std::filesystem::create_directories(outdir);

    ComparisonReport report;
    std::ofstream sweep_csv;
    if (cfg.ensemble_enabled) {
        sweep_csv.open(outdir / "sweep.csv", std::ios::binary | std::ios::trunc);
        sweep_csv << "name,seed,coeff,id_val_accuracy\n";
    }

    for (std::uint64_t seed : cfg.seeds) {
        const SyntheticWorld world = generate_world(cfg.world, derive_seed(seed, "world"));
        const PretrainResult pre =
            pretrain(world, cfg.model, cfg.pretrain, derive_seed(seed, "pretrain"));
        if (!pre.floor_reached)
            std::fprintf(stderr,
                         "warning: PretrainFailed: seed %llu reached zero-shot accuracy %.4f "
                         "(floor %.4f) after %d epochs\n",
                         static_cast<unsigned long long>(seed), pre.zs_accuracy,
                         cfg.pretrain.zs_floor, pre.epochs_run);
        const FrozenSnapshot frozen(pre.model);

        // Reference row: the frozen model itself.
        {
            MethodSeedResult row;
            row.name = "pretrained";
            row.method = "Pretrained";
            row.seed = seed;
            row.metrics.id_test_accuracy = evaluate(pre.model, world.id_test, world.target_prompts);
            row.metrics.id_test_macro_f1 =
                evaluate(pre.model, world.id_test, world.target_prompts, EvalMetric::MacroF1);
            row.metrics.ood_accuracy = evaluate(pre.model, world.ood_test, world.target_prompts);
            row.metrics.zs_accuracy = evaluate(pre.model, world.zs_test, world.zs_prompts);
            row.metrics.rsa_score = 1.0;
            report.rows.push_back(std::move(row));
        }

        for (const RunSpec& run : cfg.runs) {
            MethodSeedResult row;
            row.name = run.name;
            row.method = method_name(run.train.method.method);
            row.seed = seed;
            try {
                TrainConfig train_cfg = run.train;
                train_cfg.seed = derive_seed(seed, "train");
                TargetTask task{world.id_train, world.id_val, world.target_prompts};
                PairedDataset reference_subset;
                const PairedDataset* reference = nullptr;
                if (train_cfg.method.uses_reference()) {
                    if (run.reference_per_class > 0) {
                        reference_subset = subset_per_class(world.reference, run.reference_per_class);
                        reference = &reference_subset;
                    } else {
                        reference = &world.reference;
                    }
                }
                TrainResult result = train(train_cfg, task, reference, frozen, pre.model);
                evaluate_final_metrics(train_cfg.method, result, world, frozen, result.metrics);
                row.metrics = result.metrics;

                if (cfg.ensemble_enabled && !train_cfg.method.uses_head()) {
                    const SweepResult sweep = ensemble_sweep(pre.model, result.model,
                                                             cfg.ensemble_grid, world.id_val,
                                                             world.target_prompts);
                    row.has_ensemble = true;
                    row.ensemble_best_coeff = sweep.best_coeff;
                    for (const auto& point : sweep.points) {
                        if (point.coeff == sweep.best_coeff) row.ensemble_id_val = point.id_val_accuracy;
                        sweep_csv << run.name << ',' << seed << ',' << point.coeff << ','
                                  << point.id_val_accuracy << "\n";
                    }
                }
                detail::write_jsonl(row, outdir / (run.name + "-" + std::to_string(seed) + ".jsonl"));
            } catch (const std::exception& e) {
                row.failed = true;
                row.error = e.what();
                std::fprintf(stderr, "error in run (%s, seed %llu): %s\n", run.name.c_str(),
                             static_cast<unsigned long long>(seed), e.what());
            }
            report.rows.push_back(std::move(row));
        }
    }

    // Aggregates per run and metric, in seed order.
    auto collect = [&](const std::string& name, double RunMetrics::*field) {
        std::vector<double> values;
        for (std::uint64_t seed : cfg.seeds)
            for (const auto& row : report.rows)
                if (row.name == name && row.seed == seed && !row.failed)
                    values.push_back(row.metrics.*field);
        return values;
    };
    std::vector<std::string> run_names{"pretrained"};
    for (const auto& run : cfg.runs) run_names.push_back(run.name);
    for (const auto& name : run_names)
        for (const auto& [metric, field] : detail::report_metrics())
            report.aggregate[name][metric] = detail::aggregate_stat(collect(name, field));

    // Pairwise two-sided paired t-tests over seeds, per metric.
    if (cfg.seeds.size() >= 2) {
        for (std::size_t a = 0; a < run_names.size(); ++a) {
            for (std::size_t b = a + 1; b < run_names.size(); ++b) {
                for (const auto& [metric, field] : detail::report_metrics()) {
                    const auto va = collect(run_names[a], field);
                    const auto vb = collect(run_names[b], field);
                    if (va.size() != cfg.seeds.size() || vb.size() != cfg.seeds.size()) continue;
                    report.p_values[run_names[a] + "|" + run_names[b]][metric] =
                        paired_t_test(va, vb);
                }
            }
        }
    }

    // report.json
    json out;
    out["rows"] = json::array();
    for (const auto& row : report.rows) {
        json r = detail::final_to_json(row);
        r.erase("final");
        r["failed"] = row.failed;
        if (row.failed) r["error"] = row.error;
        r["wall_clock_seconds"] = row.metrics.wall_clock_seconds;
        out["rows"].push_back(std::move(r));
    }
    for (const auto& [name, metrics] : report.aggregate)
        for (const auto& [metric, stat] : metrics)
            out["aggregate"][name][metric] = {
                {"mean", stat.mean}, {"stddev", stat.stddev}, {"count", stat.count}};
    for (const auto& [pair, metrics] : report.p_values) {
        for (const auto& [metric, test] : metrics) {
            json t{{"t", test.t}, {"df", test.df}, {"degenerate", test.degenerate}};
            if (!test.degenerate) t["p"] = test.p;
            out["p_values"][pair][metric] = std::move(t);
        }
    }
    std::ofstream report_file(outdir / "report.json", std::ios::binary | std::ios::trunc);
    if (!report_file) throw IoError("cannot write report.json");
    report_file << out.dump(2) << "\n";
    return report;
}

}  // namespace dive
