// segcal: command-line front end for the calibration experiments.
//
// Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "segcal/calibrators.hpp"
#include "segcal/config.hpp"
#include "segcal/errors.hpp"
#include "segcal/experiment.hpp"
#include "segcal/io.hpp"
#include "segcal/metrics.hpp"
#include "segcal/synth.hpp"
#include "segcal/train.hpp"

namespace fs = std::filesystem;
using namespace segcal;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> config;
    std::optional<std::string> out;
    std::optional<std::size_t> threads;
};

void progress(const std::string& msg) { std::cerr << "segcal: " << msg << std::endl; }

RunConfig base_config(const Globals& g) {
    RunConfig c;
    if (g.config) c = load_run_config(*g.config);
    if (g.seed) c.seed = *g.seed;
    if (g.out) c.output_dir = *g.out;
    if (g.threads) {
        c.threads = *g.threads;
    } else if (const char* env = std::getenv("SEG_CALIB_THREADS")) {
        try {
            std::size_t used = 0;
            const long v = std::stol(env, &used);
            if (used != std::string(env).size() || v < 1) throw std::invalid_argument("range");
            c.threads = static_cast<std::size_t>(v);
        } catch (const std::exception&) {
            throw ConfigError(std::string("SEG_CALIB_THREADS must be a positive integer, got '") + env + "'");
        }
    }
    if (c.threads == 0) throw ConfigError("--threads must be >= 1");
    return c;
}

fs::path require_out(const Globals& g, const char* cmd) {
    if (!g.out) throw ConfigError(std::string(cmd) + ": --out is required");
    return *g.out;
}

std::vector<Subject> load_data(const std::string& dir) {
    if (!fs::is_directory(dir)) throw ConfigError("--data: '" + dir + "' is not a directory");
    auto subjects = load_dataset(dir);
    if (subjects.empty()) throw ConfigError("--data: no .scv subjects in '" + dir + "'");
    return subjects;
}

FoldPartition fold_of(const RunConfig& c, const std::vector<Subject>& subjects, std::size_t fold) {
    const auto split = split_folds(subject_ids(subjects), c.folds, c.seed);
    auto p = partition_fold(subjects, split, fold, c.calib_fraction, c.seed);
    assert_evaluation_hygiene(p);
    return p;
}

// ---------------------------------------------------------------------------------------------

struct SynthArgs {
    std::size_t subjects = 50;
    std::optional<std::size_t> grid_size;
    std::optional<double> noise;
    std::optional<double> blur;
    std::optional<std::size_t> dilation;
};

int cmd_synth_gen(const Globals& g, const SynthArgs& a) {
    RunConfig c = base_config(g);
    SynthConfig sc = c.synth;
    if (g.seed) sc.seed = *g.seed;
    if (a.grid_size) sc.grid_size = *a.grid_size;
    if (a.noise) sc.noise_sigma = *a.noise;
    if (a.blur) sc.blur_sigma = *a.blur;
    if (a.dilation) sc.mask_dilation = *a.dilation;
    sc.validate();
    if (a.subjects == 0) throw ConfigError("--subjects must be >= 1");
    const fs::path out = require_out(g, "synth-gen");
    progress("rendering " + std::to_string(a.subjects) + " subjects");
    save_dataset(out, render_dataset(sc, a.subjects));
    progress("wrote " + out.string());
    return 0;
}

struct FoldArgs {
    std::string data;
    std::string regime = "CE";
    std::size_t fold = 0;
    std::optional<std::size_t> folds;
};

RunConfig fold_config(const Globals& g, const FoldArgs& a) {
    RunConfig c = base_config(g);
    if (a.folds) c.folds = *a.folds;
    if (c.folds < 2) throw ConfigError("--folds must be >= 2");
    if (a.fold >= c.folds) throw ConfigError("--fold must be < --folds");
    return c;
}

int cmd_train(const Globals& g, const FoldArgs& a, std::optional<std::size_t> epochs) {
    RunConfig c = fold_config(g, a);
    if (epochs) c.train.max_epochs = *epochs;
    c.train.validate();
    const Regime regime = parse_regime(a.regime);
    const fs::path out = require_out(g, "train");
    const auto subjects = load_data(a.data);
    const auto p = fold_of(c, subjects, a.fold);
    progress("fold " + std::to_string(a.fold) + ": training " + to_string(regime) + " on " +
             std::to_string(p.base_fit.size()) + " subjects, early stopping on " +
             std::to_string(p.calib.size()));
    TrainResult res;
    try {
        res = train_fold_base(c, p, regime);
    } catch (const TrainingError& e) {
        fs::create_directories(out);
        CsvTable log{{"epoch", "train_loss", "val_loss", "learning_rate"}, {}};
        for (const auto& r : e.log()) {
            log.rows.push_back({std::to_string(r.epoch), format_real(r.train_loss), format_real(r.val_loss),
                                format_real(r.learning_rate)});
        }
        write_csv(out / "training_log.csv", log);
        throw;
    }
    fs::create_directories(out);
    const fs::path ckpt = out / checkpoint_name(a.fold, regime, "base");
    save_checkpoint(ckpt, res.params);
    CsvTable log{{"epoch", "train_loss", "val_loss", "learning_rate"}, {}};
    for (const auto& r : res.log) {
        log.rows.push_back({std::to_string(r.epoch), format_real(r.train_loss), format_real(r.val_loss),
                            format_real(r.learning_rate)});
    }
    write_csv(out / "training_log.csv", log);
    std::cout << ckpt.string() << "\n";
    return 0;
}

int cmd_calibrate(const Globals& g, const FoldArgs& a, const std::string& weights, const std::string& method) {
    RunConfig c = fold_config(g, a);
    const Regime regime = parse_regime(a.regime);
    const Method m = parse_method(method);
    const fs::path out = require_out(g, "calibrate");
    const NetParams base = load_network_checkpoint(weights);
    const auto subjects = load_data(a.data);
    const auto p = fold_of(c, subjects, a.fold);
    progress("fold " + std::to_string(a.fold) + ": fitting " + to_string(m) + " on " +
             std::to_string(p.calib.size()) + " calibration subjects");
    const auto fit = calibrate_pipeline(m, regime, base, p.calib, p.calib,
                                        fold_calibration_config(c, a.fold, regime));
    for (const auto& n : fit.notes) progress(n);
    save_predictor(out, fit.predictor);
    std::cout << (out / "predictor.json").string() << "\n";
    return 0;
}

struct PredictArgs {
    std::string data;
    std::optional<std::string> weights;
    std::optional<std::string> predictor;
    std::optional<std::size_t> mc_samples;
    std::string dropout_sites = "decoder";
    std::optional<std::size_t> fold;
    std::optional<std::size_t> folds;
};

int cmd_predict(const Globals& g, const PredictArgs& a) {
    RunConfig c = base_config(g);
    if (a.weights.has_value() == a.predictor.has_value()) {
        throw ConfigError("predict: give exactly one of --weights or --predictor");
    }
    const fs::path out = require_out(g, "predict");
    CalibratedPredictor pred = a.predictor ? load_predictor(*a.predictor)
                                           : CalibratedPredictor::base(load_network_checkpoint(*a.weights));
    if (a.mc_samples) {
        if (*a.mc_samples == 0) throw ConfigError("--mc-samples must be >= 1");
        McConfig mc;
        if (pred.mc_config()) {
            mc = *pred.mc_config();
        } else if (pred.method() == Method::BASE || pred.method() == Method::FINETUNE) {
            // Test-time dropout on a network that was not retrained with it.
            if (a.dropout_sites == "decoder") {
                mc.dropout = DropoutConfig::decoder(c.calibration.dropout_rate);
            } else if (a.dropout_sites == "center") {
                mc.dropout = DropoutConfig::center(c.calibration.dropout_rate);
            } else {
                throw ConfigError("--dropout-sites must be decoder or center");
            }
            mc.seed = derive_seed(c.seed, 47);
        } else {
            throw ConfigError(std::string("--mc-samples does not apply to ") + to_string(pred.method()));
        }
        mc.n_samples = *a.mc_samples;
        pred = CalibratedPredictor::mc(pred.method() == Method::MC_CENTER ? Method::MC_CENTER : Method::MC_DECODER,
                                       pred.net(), mc);
    }
    auto subjects = load_data(a.data);
    if (a.fold) {
        if (a.folds) c.folds = *a.folds;
        if (*a.fold >= c.folds) throw ConfigError("--fold must be < --folds");
        subjects = fold_of(c, subjects, *a.fold).eval;
    }
    progress("predicting " + std::to_string(subjects.size()) + " subjects with " + to_string(pred.method()));
    std::vector<std::optional<Subject>> results(subjects.size());
    parallel_for(subjects.size(), c.threads, [&](std::size_t i) {
        Subject s = subjects[i];
        s.probabilities = pred.predict(s);
        s.logits.reset();
        results[i] = std::move(s);
    });
    std::vector<Subject> done;
    for (auto& r : results) done.push_back(std::move(*r));
    save_dataset(out, done);
    return 0;
}

struct EvaluateArgs {
    std::vector<std::string> preds;
    std::vector<std::string> names;
    std::size_t bins = kDefaultBins;
    std::string mode = "prediction";
};

int cmd_evaluate(const Globals& g, const EvaluateArgs& a) {
    RunConfig c = base_config(g);
    const ConfidenceMode mode = parse_confidence_mode(a.mode);
    if (a.bins == 0) throw ConfigError("--bins must be >= 1");
    if (!a.names.empty() && a.names.size() != a.preds.size()) {
        throw ConfigError("--name must be given once per --pred");
    }
    nlohmann::json sets = nlohmann::json::array();
    std::vector<std::vector<double>> dice_sets;
    std::vector<std::vector<double>> ece_sets;
    std::vector<std::string> ref_ids;
    for (std::size_t k = 0; k < a.preds.size(); ++k) {
        const auto subjects = load_data(a.preds[k]);
        std::vector<std::string> ids;
        std::vector<BinInput> inputs;
        for (const auto& s : subjects) {
            if (!s.probabilities) {
                throw ConfigError("--pred: subject '" + s.id + "' in '" + a.preds[k] + "' has no probabilities");
            }
            ids.push_back(s.id);
            inputs.push_back({s.id, &*s.probabilities, &s.labels, &s.eval_mask});
        }
        if (k == 0) {
            ref_ids = ids;
        } else if (ids != ref_ids) {
            throw ConfigError("--pred: '" + a.preds[k] + "' does not contain the same subjects as '" +
                              a.preds[0] + "'");
        }
        const auto bins = reliability_bins(inputs, a.bins, mode);
        std::vector<double> dice;
        std::vector<double> ece_v;
        for (std::size_t i = 0; i < subjects.size(); ++i) {
            dice.push_back(dice_score(predicted_class(*subjects[i].probabilities), subjects[i].labels));
            ece_v.push_back(subject_ece(bins.subjects[i]));
        }
        const std::string name = a.names.empty() ? a.preds[k] : a.names[k];
        sets.push_back({{"name", name},
                        {"subjects", subjects.size()},
                        {"mean_dice", mean_of(dice)},
                        {"mean_ece", mean_of(ece_v)},
                        {"pooled_ece", ece(bins)}});
        if (g.out) {
            fs::create_directories(*g.out);
            emit_reliability_csv(bins, c.min_bin_count, fs::path(*g.out) / ("reliability_" + std::to_string(k) + ".csv"));
            emit_violin_csv(bins, c.min_bin_count, fs::path(*g.out) / ("violin_" + std::to_string(k) + ".csv"));
        }
        dice_sets.push_back(std::move(dice));
        ece_sets.push_back(std::move(ece_v));
    }
    nlohmann::json report{{"confidence_mode", to_string(mode)}, {"bins", a.bins}, {"sets", sets}};
    auto test = [](const std::vector<double>& x, const std::vector<double>& y) -> nlohmann::json {
        try {
            const auto w = wilcoxon_signed_rank(x, y);
            return {{"statistic", w.statistic},
                    {"p_value", w.p_value},
                    {"n_effective", w.n_effective},
                    {"method", w.method == WilcoxonMethod::Exact ? "exact" : "normal"}};
        } catch (const DegenerateError&) {
            return {{"p_value", 1.0}, {"n_effective", 0}, {"method", "identical"}};
        }
    };
    nlohmann::json comparisons = nlohmann::json::array();
    for (std::size_t k = 1; k < a.preds.size(); ++k) {
        comparisons.push_back({{"a", sets[0]["name"]},
                               {"b", sets[k]["name"]},
                               {"wilcoxon_ece", test(ece_sets[0], ece_sets[k])},
                               {"wilcoxon_dice", test(dice_sets[0], dice_sets[k])}});
    }
    report["comparisons"] = comparisons;
    std::cout << report.dump(2) << "\n";
    return 0;
}

int cmd_run(const Globals& g) {
    const RunConfig c = base_config(g);
    c.validate();
    const auto t0 = std::chrono::steady_clock::now();
    auto stamp = [&](const std::string& m) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char buf[32];
        std::snprintf(buf, sizeof buf, "[%7.1fs] ", s);
        progress(buf + m);
    };
    const auto subjects = load_or_generate(c);
    stamp("dataset: " + std::to_string(subjects.size()) + " subjects, " + std::to_string(c.folds) +
          " folds, threads " + std::to_string(c.threads));
    const auto art = run_experiment(c, subjects, c.output_dir / "checkpoints", stamp);
    write_reports(art.table, c.output_dir);
    write_run_log(art.log, c.output_dir / "run.log");
    std::cout << format_results_table(art.table);
    stamp("wrote " + c.output_dir.string());
    bool any_failed = false;
    for (const auto& cell : art.table.cells) any_failed = any_failed || !cell.ok();
    return any_failed ? 2 : 0;
}

int cmd_report(const Globals& g, const std::string& results) {
    const auto t = load_results(results);
    if (g.out) {
        write_reports(t, *g.out);
        progress("wrote reports to " + *g.out);
    }
    std::cout << format_results_table(t);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Post hoc calibration experiments for binary segmentation"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Random seed");
    app.add_option("--config", g.config, "Run configuration file");
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--threads", g.threads, "Worker threads (default: SEG_CALIB_THREADS or 1)");

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth-gen", "Write a synthetic dataset");
    c_synth->add_option("--subjects", synth.subjects, "Number of subjects")->capture_default_str();
    c_synth->add_option("--grid-size", synth.grid_size, "Grid side length");
    c_synth->add_option("--noise", synth.noise, "Image noise sigma");
    c_synth->add_option("--blur", synth.blur, "Label blur sigma");
    c_synth->add_option("--mask-dilation", synth.dilation, "Evaluation mask dilation radius");

    FoldArgs fold;
    auto add_fold = [&](CLI::App* c) {
        c->add_option("--data", fold.data, "Dataset directory")->required();
        c->add_option("--regime", fold.regime, "Weight regime: CE, CE_SD or SD")->capture_default_str();
        c->add_option("--fold", fold.fold, "Fold index")->capture_default_str();
        c->add_option("--folds", fold.folds, "Number of folds");
    };
    std::optional<std::size_t> epochs;
    auto* c_train = app.add_subcommand("train", "Train one base model for one fold");
    add_fold(c_train);
    c_train->add_option("--epochs", epochs, "Maximum epochs");

    std::string weights;
    std::string method;
    auto* c_cal = app.add_subcommand("calibrate", "Fit one calibration method for one fold");
    add_fold(c_cal);
    c_cal->add_option("--weights", weights, "Base network checkpoint")->required();
    c_cal->add_option("--method", method, "BASE, PLATT, AUX, FINETUNE, MC_DECODER or MC_CENTER")->required();

    PredictArgs pred;
    auto* c_pred = app.add_subcommand("predict", "Write probability maps");
    c_pred->add_option("--data", pred.data, "Dataset directory")->required();
    c_pred->add_option("--weights", pred.weights, "Network checkpoint");
    c_pred->add_option("--predictor", pred.predictor, "predictor.json written by calibrate");
    c_pred->add_option("--mc-samples", pred.mc_samples, "Monte Carlo dropout samples");
    c_pred->add_option("--dropout-sites", pred.dropout_sites, "decoder or center (plain networks only)")
        ->capture_default_str();
    c_pred->add_option("--fold", pred.fold, "Only predict this fold's evaluation subjects");
    c_pred->add_option("--folds", pred.folds, "Number of folds");

    EvaluateArgs ev;
    auto* c_eval = app.add_subcommand("evaluate", "Compare prediction sets");
    c_eval->add_option("--pred", ev.preds, "Prediction directory (repeatable)")->required();
    c_eval->add_option("--name", ev.names, "Display name per --pred");
    c_eval->add_option("--bins", ev.bins, "Number of bins")->capture_default_str();
    c_eval->add_option("--mode", ev.mode, "prediction or class")->capture_default_str();

    auto* c_run = app.add_subcommand("run", "Run the full cross-validated grid");

    std::string results;
    auto* c_report = app.add_subcommand("report", "Print and re-emit reports from results.json");
    c_report->add_option("--results", results, "results.json")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "segcal: " << e.what() << "\n" << app.help();
        return 1;
    }

    try {
        if (c_synth->parsed()) return cmd_synth_gen(g, synth);
        if (c_train->parsed()) return cmd_train(g, fold, epochs);
        if (c_cal->parsed()) return cmd_calibrate(g, fold, weights, method);
        if (c_pred->parsed()) return cmd_predict(g, pred);
        if (c_eval->parsed()) return cmd_evaluate(g, ev);
        if (c_run->parsed()) return cmd_run(g);
        if (c_report->parsed()) return cmd_report(g, results);
    } catch (const ValidationError& e) {
        std::cerr << "segcal: error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "segcal: failed: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
