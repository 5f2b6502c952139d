#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dive/harness.hpp"

namespace dive {

namespace detail {

inline ExperimentConfig config_from_flag(const std::string& config_path) {
    if (config_path.empty()) return ExperimentConfig{};
    return load_experiment_config(config_path);
}

inline std::vector<RunSpec> default_runs(const TrainConfig& defaults) {
    std::vector<RunSpec> runs;
    for (Method m : {Method::VanillaFT, Method::LPFT, Method::FLYP, Method::FLYPReplay,
                     Method::SnD, Method::DiVE, Method::DiVECosine}) {
        RunSpec run;
        run.train = defaults;
        run.train.method.method = m;
        run.name = lowercase(method_name(m));
        runs.push_back(std::move(run));
    }
    return runs;
}

inline std::vector<double> parse_grid_values(const std::string& csv, const std::string& what) {
    std::vector<double> values;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        const std::size_t comma = csv.find(',', pos);
        const std::string token = csv.substr(pos, comma == std::string::npos ? std::string::npos
                                                                             : comma - pos);
        try {
            values.push_back(std::stod(token));
        } catch (const std::exception&) {
            throw UsageError("bad " + what + " value \"" + token + "\"");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (values.empty()) throw UsageError(what + " grid is empty");
    return values;
}

struct PretrainedStage {
    SyntheticWorld world;
    TwoTowerModel model;
};

inline PretrainedStage make_pretrained(const ExperimentConfig& cfg, std::uint64_t seed,
                                       const std::string& checkpoint) {
    PretrainedStage stage{generate_world(cfg.world, derive_seed(seed, "world")), {}};
    if (!checkpoint.empty()) {
        stage.model = load_checkpoint(checkpoint);
    } else {
        const PretrainResult pre =
            pretrain(stage.world, cfg.model, cfg.pretrain, derive_seed(seed, "pretrain"));
        if (!pre.floor_reached)
            std::fprintf(stderr,
                         "warning: PretrainFailed: zero-shot accuracy %.4f below floor %.4f\n",
                         pre.zs_accuracy, cfg.pretrain.zs_floor);
        stage.model = pre.model;
    }
    return stage;
}

}  // namespace detail

// CLI entry point; tools/dive.cpp forwards to this. Exit status: 0 success,
// 1 runtime failure (one machine-parsable `error: <Kind>: ...` line on
// stderr), 2 usage errors.
inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Desk-scale laboratory for geometry-preserving robust fine-tuning of two-tower "
                 "contrastive encoders"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    std::vector<std::uint64_t> seeds;
    std::string outdir;
    std::string method_name_flag = "DiVE";
    std::string checkpoint_path;
    std::string pretrained_path;
    std::string out_path = "pretrained.ckpt";
    std::string split = "id_test";
    std::string metric = "accuracy";
    std::string data_path;
    std::string grid_spec;
    std::string run_name;
    bool with_csv = false;
    bool with_pvl = false;

    auto add_common = [&](CLI::App* sub, bool multi_seed) {
        sub->add_option("--config", config_path, "JSON experiment config (defaults when omitted)");
        if (multi_seed)
            sub->add_option("--seeds", seeds, "comma-separated master seeds")->delimiter(',');
        else
            sub->add_option("--seed", seed, "master seed");
        sub->add_option("--outdir", outdir, "output directory (env DIVE_OUTDIR overrides)");
    };

    CLI::App* gen = app.add_subcommand("gen", "generate the synthetic world and export datasets");
    add_common(gen, false);
    gen->add_flag("--csv", with_csv, "also export CSV files");

    CLI::App* pre = app.add_subcommand("pretrain", "contrastively pre-train the two-tower model");
    add_common(pre, false);
    pre->add_option("--out", out_path, "checkpoint path to write");

    CLI::App* tr = app.add_subcommand("train", "fine-tune one method against the frozen snapshot");
    add_common(tr, false);
    tr->add_option("--method", method_name_flag, "VanillaFT|LPFT|FLYP|FLYPReplay|SnD|DiVE|DiVECosine");
    tr->add_option("--pretrained", pretrained_path, "load the pre-trained model from a checkpoint");
    tr->add_option("--name", run_name, "run name used for output files");

    CLI::App* ev = app.add_subcommand("eval", "prompt-based evaluation of a checkpoint");
    add_common(ev, false);
    ev->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    ev->add_option("--split", split, "id_test|ood_test|zs_test");
    ev->add_option("--metric", metric, "accuracy|macro_f1");
    ev->add_option("--data", data_path, "labeled .divd file overriding the split");

    CLI::App* rs = app.add_subcommand("rsa", "RSA geometry report of a checkpoint vs pre-trained");
    add_common(rs, false);
    rs->add_option("--checkpoint", checkpoint_path, "fine-tuned model checkpoint")->required();
    rs->add_option("--pretrained", pretrained_path, "pre-trained checkpoint (else pre-train in-process)");

    CLI::App* ex = app.add_subcommand("experiment", "full pipeline over every method and seed");
    add_common(ex, true);

    CLI::App* ab = app.add_subcommand("ablate", "grids: alpha=..|lambda=..|components|refsize=..");
    add_common(ab, true);
    ab->add_option("--grid", grid_spec, "grid specification")->required();
    ab->add_flag("--with-pvl", with_pvl, "keep PVL active in the alpha grid");

    CLI::App* en = app.add_subcommand("ensemble", "weight-interpolation sweep (pre vs fine-tuned)");
    add_common(en, false);
    en->add_option("--method", method_name_flag, "method to fine-tune before the sweep");
    en->add_option("--grid", grid_spec, "comma-separated coefficients in (0,1)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: UsageError: " << e.what() << "\n" << app.help() << "\n";
        return 2;
    }

    try {
        ExperimentConfig cfg = detail::config_from_flag(config_path);
        if (!outdir.empty()) cfg.outdir = outdir;
        if (!seeds.empty()) cfg.seeds = seeds;
        const std::filesystem::path out = resolve_outdir(cfg.outdir);

        if (gen->parsed()) {
            const SyntheticWorld world = generate_world(cfg.world, derive_seed(seed, "world"));
            std::filesystem::create_directories(out);
            save_paired_dataset(world.pretrain_corpus, out / "pretrain.divd");
            save_paired_dataset(world.reference, out / "reference.divd");
            save_paired_dataset(world.rsa_corpus, out / "rsa.divd");
            save_labeled_dataset(world.id_train, out / "id_train.divd");
            save_labeled_dataset(world.id_val, out / "id_val.divd");
            save_labeled_dataset(world.id_test, out / "id_test.divd");
            save_labeled_dataset(world.ood_test, out / "ood_test.divd");
            save_labeled_dataset(world.zs_test, out / "zs_test.divd");
            if (with_csv) {
                export_paired_csv(world.reference, out / "reference.csv");
                export_labeled_csv(world.id_train, out / "id_train.csv");
                export_labeled_csv(world.ood_test, out / "ood_test.csv");
                export_labeled_csv(world.zs_test, out / "zs_test.csv");
            }
            json summary{{"outdir", out.string()},
                         {"pretrain", world.pretrain_corpus.size()},
                         {"reference", world.reference.size()},
                         {"rsa_pairs", world.rsa_corpus.size()},
                         {"id_train", world.id_train.size()},
                         {"id_val", world.id_val.size()},
                         {"id_test", world.id_test.size()},
                         {"ood_test", world.ood_test.size()},
                         {"zs_test", world.zs_test.size()}};
            std::cout << summary.dump() << "\n";
            return 0;
        }

        if (pre->parsed()) {
            const SyntheticWorld world = generate_world(cfg.world, derive_seed(seed, "world"));
            const PretrainResult result =
                pretrain(world, cfg.model, cfg.pretrain, derive_seed(seed, "pretrain"));
            save_checkpoint(result.model, out_path);
            json summary{{"checkpoint", out_path},
                         {"zs_accuracy", result.zs_accuracy},
                         {"floor_reached", result.floor_reached},
                         {"epochs_run", result.epochs_run}};
            if (!result.floor_reached)
                std::cerr << "warning: PretrainFailed: zero-shot floor not reached\n";
            std::cout << summary.dump() << "\n";
            return 0;
        }

        if (tr->parsed()) {
            auto stage = detail::make_pretrained(cfg, seed, pretrained_path);
            const FrozenSnapshot frozen(stage.model);
            TrainConfig train_cfg = cfg.train_defaults;
            train_cfg.method.method = detail::parse_method(method_name_flag);
            train_cfg.seed = derive_seed(seed, "train");
            TargetTask task{stage.world.id_train, stage.world.id_val, stage.world.target_prompts};
            const PairedDataset* reference =
                train_cfg.method.uses_reference() ? &stage.world.reference : nullptr;
            TrainResult result = train(train_cfg, task, reference, frozen, stage.model);
            evaluate_final_metrics(train_cfg.method, result, stage.world, frozen, result.metrics);

            MethodSeedResult row;
            row.name = run_name.empty() ? detail::lowercase(method_name_flag) : run_name;
            row.method = method_name(train_cfg.method.method);
            row.seed = seed;
            row.metrics = result.metrics;
            std::filesystem::create_directories(out);
            detail::write_jsonl(row, out / (row.name + "-" + std::to_string(seed) + ".jsonl"));
            save_checkpoint(result.model, out / (row.name + "-" + std::to_string(seed) + ".ckpt"));
            std::cout << detail::final_to_json(row).dump() << "\n";
            return 0;
        }

        if (ev->parsed()) {
            const SyntheticWorld world = generate_world(cfg.world, derive_seed(seed, "world"));
            const TwoTowerModel model = load_checkpoint(checkpoint_path);
            const LabeledDataset* dataset = nullptr;
            LabeledDataset loaded;
            const ClassPromptSet* prompts = &world.target_prompts;
            if (!data_path.empty()) {
                loaded = load_labeled_dataset(data_path);
                dataset = &loaded;
                bool zs = !loaded.empty();
                for (const auto& s : loaded.samples)
                    zs = zs && std::find(world.zs_classes.begin(), world.zs_classes.end(),
                                         s.label) != world.zs_classes.end();
                if (zs) prompts = &world.zs_prompts;
            } else if (split == "id_test") {
                dataset = &world.id_test;
            } else if (split == "ood_test") {
                dataset = &world.ood_test;
            } else if (split == "zs_test") {
                dataset = &world.zs_test;
                prompts = &world.zs_prompts;
            } else {
                throw UsageError("unknown split \"" + split + "\"");
            }
            EvalMetric m = EvalMetric::Accuracy;
            if (metric == "macro_f1")
                m = EvalMetric::MacroF1;
            else if (metric != "accuracy")
                throw UsageError("unknown metric \"" + metric + "\"");
            json summary{{"split", data_path.empty() ? split : data_path},
                         {"metric", metric},
                         {"value", evaluate(model, *dataset, *prompts, m)}};
            std::cout << summary.dump() << "\n";
            return 0;
        }

        if (rs->parsed()) {
            auto stage = detail::make_pretrained(cfg, seed, pretrained_path);
            const FrozenSnapshot frozen(stage.model);
            const TwoTowerModel ft = load_checkpoint(checkpoint_path);
            std::cout << rsa_report(frozen, ft, stage.world.rsa_corpus).to_json().dump() << "\n";
            return 0;
        }

        if (ex->parsed()) {
            if (cfg.runs.empty()) cfg.runs = detail::default_runs(cfg.train_defaults);
            run_experiment(cfg);
            std::cout << json{{"report", (resolve_outdir(cfg.outdir) / "report.json").string()}}.dump()
                      << "\n";
            return 0;
        }

        if (ab->parsed()) {
            cfg.runs.clear();
            const std::size_t eq = grid_spec.find('=');
            const std::string kind = grid_spec.substr(0, eq);
            auto dive_run = [&](const std::string& name) {
                RunSpec run;
                run.train = cfg.train_defaults;
                run.train.method.method = Method::DiVE;
                run.name = name;
                return run;
            };
            auto format_value = [](double v) {
                char buf[32];
                std::snprintf(buf, sizeof buf, "%g", v);
                return std::string(buf);
            };
            if (kind == "alpha") {
                if (eq == std::string::npos) throw UsageError("alpha grid needs values");
                for (double a : detail::parse_grid_values(grid_spec.substr(eq + 1), "alpha")) {
                    RunSpec run = dive_run("dive-alpha-" + format_value(a));
                    run.train.alpha = a;
                    run.train.method.use_pvl = with_pvl;
                    cfg.runs.push_back(std::move(run));
                }
            } else if (kind == "lambda") {
                if (eq == std::string::npos) throw UsageError("lambda grid needs values");
                for (double l : detail::parse_grid_values(grid_spec.substr(eq + 1), "lambda")) {
                    RunSpec run = dive_run("dive-lambda-" + std::to_string(static_cast<long>(l)));
                    run.train.method.lambda = l;
                    cfg.runs.push_back(std::move(run));
                }
            } else if (kind == "components") {
                RunSpec flyp;
                flyp.train = cfg.train_defaults;
                flyp.train.method.method = Method::FLYP;
                flyp.name = "flyp";
                cfg.runs.push_back(std::move(flyp));
                RunSpec avl_only = dive_run("dive-avl-only");
                avl_only.train.method.use_pvl = false;
                cfg.runs.push_back(std::move(avl_only));
                RunSpec pvl_only = dive_run("dive-pvl-only");
                pvl_only.train.method.use_avl = false;
                cfg.runs.push_back(std::move(pvl_only));
                cfg.runs.push_back(dive_run("dive"));
            } else if (kind == "refsize") {
                if (eq == std::string::npos) throw UsageError("refsize grid needs values");
                for (double v : detail::parse_grid_values(grid_spec.substr(eq + 1), "refsize")) {
                    const auto per_class = static_cast<std::size_t>(v);
                    if (per_class < 1 ||
                        per_class > cfg.world.reference_per_class)
                        throw UsageError("refsize values must be in [1, reference_per_class]");
                    RunSpec run = dive_run("dive-ref-" + std::to_string(per_class));
                    run.reference_per_class = per_class;
                    cfg.runs.push_back(std::move(run));
                }
            } else {
                throw UsageError("unknown grid \"" + grid_spec + "\"");
            }
            run_experiment(cfg);
            std::cout << json{{"report", (resolve_outdir(cfg.outdir) / "report.json").string()}}.dump()
                      << "\n";
            return 0;
        }

        if (en->parsed()) {
            auto stage = detail::make_pretrained(cfg, seed, pretrained_path);
            const FrozenSnapshot frozen(stage.model);
            TrainConfig train_cfg = cfg.train_defaults;
            train_cfg.method.method = detail::parse_method(method_name_flag);
            if (train_cfg.method.uses_head())
                throw UsageError("ensemble sweep applies to the contrastive methods");
            train_cfg.seed = derive_seed(seed, "train");
            TargetTask task{stage.world.id_train, stage.world.id_val, stage.world.target_prompts};
            const PairedDataset* reference =
                train_cfg.method.uses_reference() ? &stage.world.reference : nullptr;
            TrainResult result = train(train_cfg, task, reference, frozen, stage.model);
            const std::vector<double> grid = grid_spec.empty()
                                                 ? cfg.ensemble_grid
                                                 : detail::parse_grid_values(grid_spec, "coefficient");
            for (double c : grid)
                if (!(c > 0.0 && c < 1.0))
                    throw UsageError("ensemble coefficients must lie in (0, 1)");
            const SweepResult sweep =
                ensemble_sweep(stage.model, result.model, grid, stage.world.id_val,
                               stage.world.target_prompts);
            std::filesystem::create_directories(out);
            std::ofstream csv(out / "sweep.csv", std::ios::binary | std::ios::trunc);
            csv << "name,seed,coeff,id_val_accuracy\n";
            double best_val = 0.0;
            for (const auto& p : sweep.points) {
                csv << detail::lowercase(method_name_flag) << ',' << seed << ',' << p.coeff << ','
                    << p.id_val_accuracy << "\n";
                if (p.coeff == sweep.best_coeff) best_val = p.id_val_accuracy;
            }
            std::cout << json{{"best_coeff", sweep.best_coeff}, {"id_val_accuracy", best_val}}.dump()
                      << "\n";
            return 0;
        }

        throw UsageError("no subcommand given");
    } catch (const Error& e) {
        if (e.kind() == "UsageError") {
            std::cerr << "error: " << e.what() << "\n";
            return 2;
        }
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: Unhandled: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace dive
