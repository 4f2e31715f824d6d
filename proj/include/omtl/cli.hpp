#pragma once

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "omtl/datastore.hpp"
#include "omtl/errors.hpp"
#include "omtl/evaluation.hpp"
#include "omtl/gradcheck.hpp"
#include "omtl/model.hpp"
#include "omtl/ontology.hpp"
#include "omtl/trainer.hpp"

namespace omtl::cli {

inline constexpr const char* kToolVersion = "0.1.0";

inline nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("'" + path + "': " + e.what());
    }
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    out << j.dump(2) << '\n';
}

inline std::string hash_json(const nlohmann::json& j) {
    std::ostringstream s;
    s << std::hex << fnv1a64(j.dump());
    return s.str();
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Provenance of one run. The manifest is deterministic; start and finish
/// times go to a separate sidecar.
struct Manifest {
    std::string command;
    std::optional<std::uint64_t> seed;
    std::string config_hash, graph_hash, data_hash;
    std::vector<std::string> outputs;
    std::string started = utc_now();
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    void write(const std::string& primary) const {
        nlohmann::json j{{"command", command},       {"tool_version", kToolVersion}, {"config_hash", config_hash},
                         {"graph_hash", graph_hash}, {"data_hash", data_hash},       {"outputs", outputs}};
        j["seed"] = seed ? nlohmann::json(*seed) : nlohmann::json(nullptr);
        write_json(primary + ".manifest.json", j);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_json(primary + ".time.json", {{"started", started}, {"finished", utc_now()}, {"wall_seconds", secs}});
    }
};

inline std::optional<std::set<std::string>> outcome_set(const std::string& csv) {
    if (csv.empty()) return std::nullopt;
    auto v = split_list(csv);
    return std::set<std::string>(v.begin(), v.end());
}

inline TrainConfig load_config(const std::string& path) {
    return path.empty() ? TrainConfig{} : TrainConfig::from_json(read_json(path));
}

/// Training records of a fold plan with fold `test_fold` held out.
inline Dataset without_fold(const Dataset& data, const std::string& folds_path, int test_fold) {
    if (folds_path.empty()) return data;
    const FoldPlan plan = FoldPlan::from_json(read_json(folds_path));
    if (test_fold < 0 || test_fold >= plan.k) throw ValidationError("--test-fold out of range for the fold plan");
    for (const auto& r : data.records) {
        if (!plan.assignment.contains(r.id)) throw ValidationError("fold plan does not cover record '" + r.id + "'");
    }
    return data.subset(plan.ids_in(test_fold), true);
}

inline Dataset only_fold(const Dataset& data, const std::string& folds_path, int test_fold) {
    if (folds_path.empty()) return data;
    const FoldPlan plan = FoldPlan::from_json(read_json(folds_path));
    if (test_fold < 0 || test_fold >= plan.k) throw ValidationError("--test-fold out of range for the fold plan");
    return data.subset(plan.ids_in(test_fold));
}

/// Parses `argv` and runs one subcommand. Returns 0 on success, 1 on invalid
/// input and 2 on runtime or numerical failure; messages go to `err`.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Ontology-driven multi-task learning toolkit", "omtl"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    std::string graph_path, data_path, config_path, out_path, log_path, model_path, report_path, roc_path,
        scores_path, folds_path, outcomes_csv, variants_csv = "omtl,mmoe,moe,sb", core_csv, reports_csv,
        scores_a, scores_b, graph_out, data_out, variant_name;
    std::uint64_t seed = 0;
    int k = 5, jobs = 1, hops = 2, iterations = 0, test_fold = -1, instances = 10;
    double lambda = 0.1;
    bool delong = false, benchmark = false;

    auto* validate = app.add_subcommand("validate-graph", "Check a concept graph");
    validate->add_option("--graph", graph_path, "Graph JSON")->required();
    validate->add_option("--outcomes", outcomes_csv, "Comma-separated list of allowed outcome names");

    auto* augment = app.add_subcommand("augment", "Grow a cohort graph from core nodes");
    augment->add_option("--graph", graph_path, "Full ontology graph JSON")->required();
    augment->add_option("--core", core_csv, "Comma-separated core node ids")->required();
    augment->add_option("--hops", hops, "Maximum predecessor hops per walk");
    augment->add_option("--iters,--iterations", iterations, "Number of random walks")->required();
    augment->add_option("--seed", seed);
    augment->add_option("--out", out_path, "Output graph JSON")->required();

    auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort");
    auto* synth_config = synth->add_option("--config", config_path, "Generator config JSON");
    synth->add_flag("--benchmark", benchmark, "Use the default benchmark configuration")->excludes(synth_config);
    auto* synth_seed = synth->add_option("--seed", seed);
    synth->add_option("--out-graph,--graph-out", graph_out)->required();
    synth->add_option("--out-data,--data-out", data_out)->required();

    auto* folds = app.add_subcommand("folds", "Stratified fold assignment");
    folds->add_option("--graph", graph_path)->required();
    folds->add_option("--data", data_path)->required();
    folds->add_option("--k", k);
    folds->add_option("--seed", seed);
    folds->add_option("--out", out_path)->required();

    auto* train = app.add_subcommand("train", "Train one model");
    train->add_option("--graph", graph_path)->required();
    train->add_option("--data", data_path)->required();
    train->add_option("--config", config_path);
    train->add_option("--variant", variant_name, "omtl, mmoe, moe or sb (overrides the config)");
    auto* train_seed = train->add_option("--seed", seed, "Overrides the config seed");
    train->add_option("--out", out_path, "Model JSON")->required();
    train->add_option("--log", log_path, "Training log JSON");
    auto* train_folds = train->add_option("--folds", folds_path, "Fold plan; trains without --test-fold");
    train->add_option("--test-fold", test_fold)->needs(train_folds);

    auto* eval = app.add_subcommand("eval", "Score a dataset with a trained model");
    eval->add_option("--model", model_path)->required();
    eval->add_option("--graph", graph_path)->required();
    eval->add_option("--data", data_path)->required();
    eval->add_option("--report", report_path)->required();
    eval->add_option("--roc-out", roc_path);
    eval->add_option("--scores-out", scores_path);
    auto* eval_folds = eval->add_option("--folds", folds_path, "Fold plan; scores only --test-fold");
    eval->add_option("--test-fold", test_fold)->needs(eval_folds);

    auto* cv = app.add_subcommand("cv", "Cross-validate several variants on shared folds");
    cv->add_option("--graph", graph_path)->required();
    cv->add_option("--data", data_path)->required();
    cv->add_option("--config", config_path);
    cv->add_option("--variants", variants_csv);
    cv->add_option("--report", report_path)->required();
    cv->add_option("--k", k);
    auto* cv_seed = cv->add_option("--seed", seed, "Overrides the config seed");
    cv->add_option("--jobs", jobs, "Parallel training jobs");
    cv->add_option("--folds", folds_path, "Use this fold plan instead of deriving one");
    cv->add_option("--scores-out", scores_path, "Pooled out-of-fold scores per variant");

    auto* compare = app.add_subcommand("compare", "Compare two evaluation reports");
    compare->add_option("--reports", reports_csv, "a.json,b.json")->required();
    auto* delong_flag = compare->add_flag("--delong", delong, "Run the DeLong test on the score files");
    compare->add_option("--scores-a", scores_a)->needs(delong_flag);
    compare->add_option("--scores-b", scores_b)->needs(delong_flag);
    compare->add_option("--out", out_path)->required();

    auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the loss gradients");
    grad->add_option("--seed", seed);
    grad->add_option("--instances", instances);
    grad->add_option("--lambda", lambda);
    grad->add_option("--out", out_path);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (validate->parsed()) {
            const OntologyGraph g = load_graph(graph_path, outcome_set(outcomes_csv));
            out << "graph ok: " << g.size() << " nodes, " << g.edges().size() << " edges, depth " << g.depth()
                << ", " << g.core_ids().size() << " core\n";
            return 0;
        }
        if (augment->parsed()) {
            Manifest m{"augment", seed, "", "", "", {}};
            const OntologyGraph full = load_graph(graph_path);
            const OntologyGraph grown = grow_from_core(full, GrowthConfig{split_list(core_csv), hops, iterations, seed});
            write_json(out_path, grown.to_json());
            m.graph_hash = full.hash();
            m.config_hash = hash_json({{"core", core_csv}, {"hops", hops}, {"iterations", iterations}});
            m.outputs = {out_path};
            m.write(out_path);
            out << "kept " << grown.size() << " of " << full.size() << " nodes\n";
            return 0;
        }
        if (synth->parsed()) {
            SynthConfig c = benchmark ? default_benchmark_config()
                            : config_path.empty() ? SynthConfig{}
                                                  : SynthConfig::from_json(read_json(config_path));
            if (synth_seed->count() > 0) c.seed = seed;
            const SynthResult r = generate_synthetic(c);
            write_json(graph_out, r.graph.to_json());
            save_dataset(r.data, data_out);
            Manifest m{"synth", c.seed, hash_json(c.to_json()), r.graph.hash(), dataset_hash(r.data), {graph_out, data_out}};
            m.write(data_out);
            out << "wrote " << r.data.records.size() << " records over " << r.graph.size() << " nodes\n";
            return 0;
        }
        if (folds->parsed()) {
            const OntologyGraph g = load_graph(graph_path);
            const Dataset d = load_dataset(data_path, g);
            const FoldPlan plan = make_folds(d, g, k, seed);
            write_json(out_path, plan.to_json());
            Manifest m{"folds", seed, hash_json({{"k", k}}), g.hash(), dataset_hash(d), {out_path}};
            m.write(out_path);
            return 0;
        }
        if (train->parsed()) {
            TrainConfig c = load_config(config_path);
            if (!variant_name.empty()) c.variant = parse_variant(variant_name);
            if (train_seed->count() > 0) c.seed = seed;
            const OntologyGraph g = load_graph(graph_path);
            const Dataset all = load_dataset(data_path, g);
            const Dataset d = without_fold(all, folds_path, test_fold);
            if (!folds_path.empty() && test_fold < 0) throw ValidationError("--folds requires --test-fold");
            TrainedModel tm = train_model(g, d, c);
            write_json(out_path, tm.model.to_json());
            Manifest m{"train", c.seed, hash_json(c.to_json()), g.hash(), dataset_hash(d), {out_path}};
            if (!log_path.empty()) {
                write_json(log_path, tm.log.to_json());
                m.outputs.push_back(log_path);
            }
            m.write(out_path);
            if (tm.log.frozen_intact && !*tm.log.frozen_intact) throw NumericalError("frozen parameters changed in phase 2");
            return 0;
        }
        if (eval->parsed()) {
            if (!folds_path.empty() && test_fold < 0) throw ValidationError("--folds requires --test-fold");
            const OntologyGraph g = load_graph(graph_path);
            const OmtlModel model = model_from_json(read_json(model_path), g);
            const Dataset d = only_fold(load_dataset(data_path, g), folds_path, test_fold);
            ScoreTable scores;
            const EvalReport rep = evaluate(model, g, d, &scores);
            write_json(report_path, rep.to_json());
            Manifest m{"eval", std::nullopt, hash_json(model.spec.to_json()), g.hash(), dataset_hash(d), {report_path}};
            if (!roc_path.empty()) {
                write_json(roc_path, rep.roc_export());
                m.outputs.push_back(roc_path);
            }
            if (!scores_path.empty()) {
                write_json(scores_path, scores_to_json(scores));
                m.outputs.push_back(scores_path);
            }
            m.write(report_path);
            return 0;
        }
        if (cv->parsed()) {
            TrainConfig c = load_config(config_path);
            if (cv_seed->count() > 0) c.seed = seed;
            std::vector<Variant> vs;
            for (const auto& v : split_list(variants_csv)) vs.push_back(parse_variant(v));
            const OntologyGraph g = load_graph(graph_path);
            const Dataset d = load_dataset(data_path, g);
            std::optional<FoldPlan> plan;
            if (!folds_path.empty()) plan = FoldPlan::from_json(read_json(folds_path));
            const CvReport rep = run_cv(g, d, c, vs, k, jobs, plan);
            write_json(report_path, rep.to_json());
            Manifest m{"cv", c.seed, hash_json(c.to_json()), g.hash(), dataset_hash(d), {report_path}};
            if (!scores_path.empty()) {
                nlohmann::json s = nlohmann::json::object();
                for (const auto& v : rep.variants) s[to_string(v.variant)] = scores_to_json(v.pooled);
                write_json(scores_path, s);
                m.outputs.push_back(scores_path);
            }
            m.write(report_path);
            for (const auto& v : rep.variants) {
                for (const auto& f : v.folds) {
                    if (f.frozen_intact && !*f.frozen_intact) throw NumericalError("frozen parameters changed in phase 2");
                    if (!f.leakage_free) throw NumericalError("a held-out record contributed a gradient");
                }
            }
            return 0;
        }
        if (compare->parsed()) {
            const auto paths = split_list(reports_csv);
            if (paths.size() != 2) throw ValidationError("--reports takes exactly two report files");
            const nlohmann::json a = read_json(paths[0]);
            const nlohmann::json b = read_json(paths[1]);
            auto aucs = [](const nlohmann::json& r) {
                std::map<StratumKey, nlohmann::json> m;
                if (!r.contains("strata")) throw ValidationError("report lacks 'strata'");
                for (const auto& s : r.at("strata")) m[{s.at("node").get<std::string>(), s.at("outcome").get<std::string>()}] = s.at("auc");
                return m;
            };
            const std::string name_a = a.value("model", paths[0]);
            const std::string name_b = b.value("model", paths[1]);
            nlohmann::json rows = nlohmann::json::array();
            const auto aa = aucs(a), ab = aucs(b);
            for (const auto& [key, va] : aa) {
                auto it = ab.find(key);
                if (it == ab.end()) continue;
                nlohmann::json row{{"node", key.first}, {"outcome", key.second}, {"auc_a", va}, {"auc_b", it->second}};
                row["delta_auc"] = va.is_number() && it->second.is_number()
                                       ? nlohmann::json(va.get<double>() - it->second.get<double>())
                                       : nlohmann::json(nullptr);
                rows.push_back(row);
            }
            nlohmann::json result{{"model_a", name_a}, {"model_b", name_b}, {"strata", rows}};
            if (delong) {
                if (scores_a.empty() || scores_b.empty()) throw ValidationError("--delong needs --scores-a and --scores-b");
                const auto cs = compare_scores(name_a, scores_from_json(read_json(scores_a)), name_b,
                                               scores_from_json(read_json(scores_b)));
                nlohmann::json cj = nlohmann::json::array();
                for (const auto& x : cs) cj.push_back(x.to_json());
                result["comparisons"] = cj;
            }
            write_json(out_path, result);
            Manifest m{"compare", std::nullopt, hash_json({{"reports", reports_csv}, {"delong", delong}}), "", "", {out_path}};
            m.write(out_path);
            return 0;
        }
        if (grad->parsed()) {
            const GradCheckResult r = gradcheck(seed, instances, lambda);
            const bool ok = r.max_rel_error < 1e-4;
            out << "max relative error " << r.max_rel_error << " over " << r.checked << " entries (worst "
                << r.worst_param << "[" << r.worst_index << "]: analytic " << r.analytic << ", numeric " << r.numeric
                << ")\n";
            if (!out_path.empty()) {
                write_json(out_path, {{"seed", seed},
                                      {"instances", instances},
                                      {"lambda", lambda},
                                      {"max_relative_error", r.max_rel_error},
                                      {"entries", r.checked},
                                      {"worst_parameter", r.worst_param},
                                      {"passed", ok}});
                Manifest m{"gradcheck", seed, hash_json({{"instances", instances}, {"lambda", lambda}}), "", "", {out_path}};
                m.write(out_path);
            }
            if (!ok) {
                err << "error: gradient check failed\n";
                return 2;
            }
            return 0;
        }
    } catch (const NumericalError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const nlohmann::json::exception& e) {
        err << "error: malformed input: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

}  // namespace omtl::cli
