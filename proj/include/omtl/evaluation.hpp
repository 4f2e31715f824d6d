#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "omtl/datastore.hpp"
#include "omtl/metrics.hpp"
#include "omtl/model.hpp"
#include "omtl/ontology.hpp"
#include "omtl/trainer.hpp"

namespace omtl {

using StratumKey = std::pair<std::string, std::string>;  // (node, outcome)

/// Held-out scores of one stratum together with the record ids, sorted by id.
struct StratumScores {
    ScoredSet set;
    std::vector<std::string> ids;

    nlohmann::json to_json() const {
        return {{"node", set.node}, {"outcome", set.outcome}, {"ids", ids}, {"scores", set.scores},
                {"labels", set.labels}};
    }
    static StratumScores from_json(const nlohmann::json& j) {
        StratumScores s;
        try {
            s.set.node = j.at("node").get<std::string>();
            s.set.outcome = j.at("outcome").get<std::string>();
            s.ids = j.at("ids").get<std::vector<std::string>>();
            s.set.scores = j.at("scores").get<std::vector<double>>();
            s.set.labels = j.at("labels").get<std::vector<int>>();
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("scores: ") + e.what());
        }
        if (s.ids.size() != s.set.scores.size()) throw ValidationError("scores: ids and scores differ in length");
        s.set.check();
        return s;
    }
};

using ScoreTable = std::map<StratumKey, StratumScores>;

inline nlohmann::json scores_to_json(const ScoreTable& t) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& [_, s] : t) a.push_back(s.to_json());
    return {{"strata", a}};
}

inline ScoreTable scores_from_json(const nlohmann::json& j) {
    ScoreTable t;
    if (!j.contains("strata") || !j.at("strata").is_array()) throw ValidationError("scores: missing 'strata' array");
    for (const auto& e : j.at("strata")) {
        StratumScores s = StratumScores::from_json(e);
        t[{s.set.node, s.set.outcome}] = std::move(s);
    }
    return t;
}

/// Eval-mode predictions on every labeled outcome of every expressed core node.
inline ScoreTable score_records(const OmtlModel& model, const OntologyGraph& graph,
                                const std::vector<const Record*>& records, std::size_t batch_size = 256) {
    std::vector<const Record*> sorted = records;
    std::sort(sorted.begin(), sorted.end(), [](const Record* a, const Record* b) { return a->id < b->id; });
    ScoreTable table;
    Rng unused(0);
    for (std::size_t start = 0; start < sorted.size(); start += batch_size) {
        const std::size_t end = std::min(sorted.size(), start + batch_size);
        std::span<const Record* const> batch(sorted.data() + start, end - start);
        Tape tape;
        const BatchTrace trace = forward_batch(model, graph, batch, Mode::eval, tape, unused);
        const auto results = split_trace(trace, batch, Mode::eval);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const Record& r = *batch[i];
            for (const auto& [node, out] : results[i].nodes) {
                const auto& cn = graph.node(node);
                if (!cn.is_core) continue;
                for (const auto& o : cn.outcomes) {
                    auto label = r.labels.find(o);
                    if (label == r.labels.end()) continue;
                    auto pred = out.predictions.find(o);
                    if (pred == out.predictions.end()) continue;
                    StratumScores& s = table[{node, o}];
                    s.set.node = node;
                    s.set.outcome = o;
                    s.ids.push_back(r.id);
                    s.set.scores.push_back(pred->second);
                    s.set.labels.push_back(label->second);
                }
            }
        }
    }
    return table;
}

struct StratumMetrics {
    std::string node, outcome;
    std::size_t n = 0, n_positive = 0;
    std::optional<double> auc, aps;  // undefined when a class is missing
    std::vector<RocPoint> roc;
};

inline StratumMetrics stratum_metrics(const ScoredSet& s) {
    StratumMetrics m{s.node, s.outcome, s.labels.size(), s.positives(), {}, {}, {}};
    if (m.n_positive > 0) m.aps = average_precision(s);
    if (m.n_positive > 0 && m.n_positive < m.n) {
        m.auc = auc_roc(s);
        m.roc = roc_curve(s);
    }
    return m;
}

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

struct Comparison {
    std::string model_a, model_b, node, outcome;
    DeLongResult result;

    nlohmann::json to_json() const {
        return {{"model_a", model_a}, {"model_b", model_b}, {"node", node},
                {"outcome", outcome}, {"auc_a", result.auc_a}, {"auc_b", result.auc_b},
                {"delta_auc", result.delta}, {"z", std::isfinite(result.z) ? nlohmann::json(result.z) : nlohmann::json(result.z > 0 ? "inf" : "-inf")},
                {"p_value", result.p_value}, {"significant_at_0.05", result.significant}};
    }
};

struct EvalReport {
    std::string model;
    std::map<StratumKey, StratumMetrics> strata;
    std::vector<Comparison> comparisons;

    nlohmann::json to_json(bool with_roc = false) const {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& [_, m] : strata) {
            nlohmann::json e{{"node", m.node}, {"outcome", m.outcome}, {"n", m.n}, {"n_positive", m.n_positive},
                             {"auc", opt_json(m.auc)}, {"aps", opt_json(m.aps)}};
            if (with_roc) e["roc"] = roc_json(m.roc);
            a.push_back(e);
        }
        nlohmann::json c = nlohmann::json::array();
        for (const auto& x : comparisons) c.push_back(x.to_json());
        return {{"model", model}, {"strata", a}, {"comparisons", c}};
    }

    static nlohmann::json roc_json(const std::vector<RocPoint>& pts) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& p : pts) a.push_back({p.fpr, p.tpr});
        return a;
    }

    nlohmann::json roc_export() const {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& [_, m] : strata) {
            a.push_back({{"model", model}, {"node", m.node}, {"outcome", m.outcome}, {"points", roc_json(m.roc)}});
        }
        return a;
    }
};

inline EvalReport make_report(const std::string& model, const ScoreTable& table) {
    EvalReport r{model, {}, {}};
    for (const auto& [key, s] : table) r.strata[key] = stratum_metrics(s.set);
    return r;
}

inline EvalReport evaluate(const OmtlModel& model, const OntologyGraph& graph, const Dataset& data,
                           ScoreTable* scores_out = nullptr) {
    std::vector<const Record*> all;
    for (const auto& r : data.records) all.push_back(&r);
    ScoreTable table = score_records(model, graph, all);
    EvalReport rep = make_report(to_string(model.spec.variant), table);
    if (scores_out) *scores_out = std::move(table);
    return rep;
}

/// DeLong comparisons of two score tables on every shared stratum where both
/// classes are present. Records are matched by id.
inline std::vector<Comparison> compare_scores(const std::string& name_a, const ScoreTable& a, const std::string& name_b,
                                              const ScoreTable& b) {
    std::vector<Comparison> out;
    for (const auto& [key, sa] : a) {
        auto it = b.find(key);
        if (it == b.end()) continue;
        const StratumScores& sb = it->second;
        if (sa.ids != sb.ids) {
            throw ValidationError("compare: stratum " + key.first + "/" + key.second +
                                  " covers different records in the two score sets");
        }
        if (sa.set.labels != sb.set.labels) {
            throw ValidationError("compare: stratum " + key.first + "/" + key.second + " has mismatched labels");
        }
        if (sa.set.positives() == 0 || sa.set.negatives() == 0) continue;
        out.push_back({name_a, name_b, key.first, key.second, delong_test(sa.set, sb.set)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

struct FoldResult {
    int fold = 0;
    EvalReport report;
    ScoreTable scores;
    nlohmann::json train_log;
    std::optional<bool> frozen_intact;
    bool leakage_free = true;  // no held-out record produced a gradient
};

struct VariantCv {
    Variant variant = Variant::OMTL;
    std::vector<FoldResult> folds;
    ScoreTable pooled;                    // out-of-fold scores over all folds
    EvalReport pooled_report;
    std::map<StratumKey, double> mean_auc;  // over folds where AUC is defined
    std::map<StratumKey, double> mean_aps;
};

struct CvReport {
    int k = 5;
    std::uint64_t seed = 0;
    TrainConfig config;
    std::string graph_hash, data_hash;
    std::vector<VariantCv> variants;
    std::vector<Comparison> comparisons;

    const VariantCv& variant(Variant v) const {
        for (const auto& x : variants) {
            if (x.variant == v) return x;
        }
        throw ValidationError("cv report has no variant " + to_string(v));
    }

    nlohmann::json to_json() const {
        nlohmann::json vs = nlohmann::json::array();
        for (const auto& v : variants) {
            nlohmann::json folds = nlohmann::json::array();
            for (const auto& f : v.folds) {
                nlohmann::json fj = f.report.to_json();
                fj["fold"] = f.fold;
                fj["train_log"] = f.train_log;
                fj["leakage_free"] = f.leakage_free;
                folds.push_back(fj);
            }
            nlohmann::json agg = nlohmann::json::array();
            for (const auto& [key, auc] : v.mean_auc) {
                agg.push_back({{"node", key.first}, {"outcome", key.second}, {"mean_auc", auc},
                               {"mean_aps", v.mean_aps.count(key) ? nlohmann::json(v.mean_aps.at(key)) : nlohmann::json(nullptr)}});
            }
            vs.push_back({{"variant", to_string(v.variant)}, {"folds", folds}, {"aggregate", agg},
                          {"pooled", v.pooled_report.to_json()}});
        }
        nlohmann::json cs = nlohmann::json::array();
        for (const auto& c : comparisons) cs.push_back(c.to_json());
        return {{"k", k},
                {"seed", seed},
                {"config", config.to_json()},
                {"graph_hash", graph_hash},
                {"data_hash", data_hash},
                {"variants", vs},
                {"comparisons", cs},
                {"metadata", {{"delong_scores", "pooled out-of-fold"}, {"folds_shared_across_variants", true}}}};
    }
};

/// Seed of the model trained on fold `fold`; shared by all variants so that
/// they start from the same streams.
inline std::uint64_t fold_seed(std::uint64_t seed, int fold) {
    return splitmix64(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(fold + 1)));
}

/// k-fold cross-validation of every variant on one shared fold plan.
/// Independent (variant, fold) jobs may run on up to `jobs` threads; the
/// result does not depend on the thread count.
inline CvReport run_cv(const OntologyGraph& graph, const Dataset& data, const TrainConfig& config,
                       const std::vector<Variant>& variants, int k = 5, int jobs = 1,
                       std::optional<FoldPlan> plan = std::nullopt) {
    config.validate();
    if (variants.empty()) throw ValidationError("cv: no variants requested");
    if (!plan) plan = make_folds(data, graph, k, config.seed);
    if (plan->k != k) throw ValidationError("cv: fold plan has k=" + std::to_string(plan->k) + ", expected " + std::to_string(k));
    for (const auto& r : data.records) {
        if (!plan->assignment.contains(r.id)) throw ValidationError("cv: fold plan does not cover record '" + r.id + "'");
    }
    if (plan->assignment.size() != data.records.size()) throw ValidationError("cv: fold plan lists records not in the data");

    CvReport rep;
    rep.k = k;
    rep.seed = config.seed;
    rep.config = config;
    rep.graph_hash = graph.hash();
    rep.data_hash = dataset_hash(data);
    rep.variants.resize(variants.size());
    for (std::size_t v = 0; v < variants.size(); ++v) {
        rep.variants[v].variant = variants[v];
        rep.variants[v].folds.resize(static_cast<std::size_t>(k));
    }

    auto run_one = [&](std::size_t v, int fold) {
        std::set<std::string> held = plan->ids_in(fold);
        Dataset train = data.subset(held, true);
        TrainConfig c = config;
        c.variant = variants[v];
        c.seed = fold_seed(config.seed, fold);
        TrainedModel tm = train_model(graph, train, c);
        FoldResult& fr = rep.variants[v].folds[static_cast<std::size_t>(fold)];
        fr.fold = fold;
        std::vector<const Record*> test;
        for (const auto& r : data.records) {
            if (held.contains(r.id)) test.push_back(&r);
        }
        fr.scores = score_records(tm.model, graph, test);
        fr.report = make_report(to_string(variants[v]), fr.scores);
        fr.train_log = tm.log.to_json();
        fr.frozen_intact = tm.log.frozen_intact;
        for (const auto& id : held) fr.leakage_free = fr.leakage_free && !tm.log.trained_ids.contains(id);
    };

    std::vector<std::pair<std::size_t, int>> tasks;
    for (std::size_t v = 0; v < variants.size(); ++v) {
        for (int f = 0; f < k; ++f) tasks.emplace_back(v, f);
    }
    if (jobs <= 1) {
        for (auto [v, f] : tasks) run_one(v, f);
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mutex;
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < tasks.size(); i = next++) {
                    try {
                        run_one(tasks[i].first, tasks[i].second);
                    } catch (...) {
                        std::lock_guard lock(failure_mutex);
                        if (!failure) failure = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }

    for (auto& vc : rep.variants) {
        std::map<StratumKey, std::vector<double>> aucs, apss;
        for (const auto& f : vc.folds) {
            for (const auto& [key, m] : f.report.strata) {
                if (m.auc) aucs[key].push_back(*m.auc);
                if (m.aps) apss[key].push_back(*m.aps);
            }
            for (const auto& [key, s] : f.scores) {
                StratumScores& p = vc.pooled[key];
                p.set.node = key.first;
                p.set.outcome = key.second;
                p.ids.insert(p.ids.end(), s.ids.begin(), s.ids.end());
                p.set.scores.insert(p.set.scores.end(), s.set.scores.begin(), s.set.scores.end());
                p.set.labels.insert(p.set.labels.end(), s.set.labels.begin(), s.set.labels.end());
            }
        }
        // Re-sort pooled entries by id so that variants line up record by record.
        for (auto& [_, p] : vc.pooled) {
            std::vector<std::size_t> idx(p.ids.size());
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p.ids[a] < p.ids[b]; });
            StratumScores s;
            s.set.node = p.set.node;
            s.set.outcome = p.set.outcome;
            for (std::size_t i : idx) {
                s.ids.push_back(p.ids[i]);
                s.set.scores.push_back(p.set.scores[i]);
                s.set.labels.push_back(p.set.labels[i]);
            }
            p = std::move(s);
        }
        auto mean = [](const std::vector<double>& xs) {
            double s = 0.0;
            for (double x : xs) s += x;
            return s / static_cast<double>(xs.size());
        };
        for (const auto& [key, xs] : aucs) vc.mean_auc[key] = mean(xs);
        for (const auto& [key, xs] : apss) vc.mean_aps[key] = mean(xs);
        vc.pooled_report = make_report(to_string(vc.variant), vc.pooled);
    }

    // Every pair of variants; OMTL is always model_a when it takes part.
    for (std::size_t a = 0; a < rep.variants.size(); ++a) {
        for (std::size_t b = a + 1; b < rep.variants.size(); ++b) {
            std::size_t first = a, second = b;
            if (rep.variants[b].variant == Variant::OMTL) std::swap(first, second);
            const auto& va = rep.variants[first];
            const auto& vb = rep.variants[second];
            auto cs = compare_scores(to_string(va.variant), va.pooled, to_string(vb.variant), vb.pooled);
            rep.comparisons.insert(rep.comparisons.end(), cs.begin(), cs.end());
        }
    }
    return rep;
}

}  // namespace omtl
