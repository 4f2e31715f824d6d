#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "omtl/errors.hpp"
#include "omtl/ontology.hpp"
#include "omtl/rng.hpp"

namespace omtl {

struct Record {
    std::string id;
    std::vector<double> features;
    std::set<std::string> concepts;      // ancestor-closed
    std::map<std::string, int> labels;   // outcome -> 0/1; empty for augmented records

    bool labeled() const { return !labels.empty(); }
};

struct Dataset {
    std::vector<Record> records;
    std::size_t feature_dim = 0;
    std::set<std::string> outcomes;

    std::size_t labeled_count() const {
        return static_cast<std::size_t>(
            std::count_if(records.begin(), records.end(), [](const Record& r) { return r.labeled(); }));
    }

    /// Records whose id is (or is not, when `invert`) in `ids`, in dataset order.
    Dataset subset(const std::set<std::string>& ids, bool invert = false) const {
        Dataset out{{}, feature_dim, outcomes};
        for (const auto& r : records) {
            if (ids.contains(r.id) != invert) out.records.push_back(r);
        }
        return out;
    }
};

inline nlohmann::json record_to_json(const Record& r) {
    nlohmann::json labels = nlohmann::json::object();
    for (const auto& [o, y] : r.labels) labels[o] = y;
    return {{"id", r.id},
            {"features", r.features},
            {"concepts", std::vector<std::string>(r.concepts.begin(), r.concepts.end())},
            {"labels", labels}};
}

/// Parses one record and closes its concept set over `graph`. `where` prefixes
/// error messages (e.g. "line 12").
inline Record parse_record(const nlohmann::json& j, const OntologyGraph& graph, const std::set<std::string>& outcomes,
                           const std::string& where) {
    auto fail = [&](const std::string& msg) { return ValidationError(where + ": " + msg); };
    if (!j.is_object()) throw fail("expected a JSON object");
    Record r;
    try {
        r.id = j.at("id").get<std::string>();
        r.features = j.at("features").get<std::vector<double>>();
        for (const auto& c : j.at("concepts")) r.concepts.insert(c.get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw fail(std::string("malformed record: ") + e.what());
    }
    for (double v : r.features) {
        if (!std::isfinite(v)) throw fail("non-finite feature value");
    }
    if (r.concepts.empty()) throw fail("record '" + r.id + "' has no concepts");
    for (const auto& c : r.concepts) {
        if (!graph.contains(c)) throw fail("unknown concept '" + c + "'");
    }
    r.concepts = ancestor_closure(graph, r.concepts);
    if (j.contains("labels")) {
        const auto& labels = j.at("labels");
        if (!labels.is_object()) throw fail("'labels' must be an object");
        for (const auto& [o, y] : labels.items()) {
            if (!outcomes.contains(o)) throw fail("unknown outcome '" + o + "'");
            if (!y.is_number_integer() || (y.get<long long>() != 0 && y.get<long long>() != 1)) {
                throw fail("label for '" + o + "' must be 0 or 1, got " + y.dump());
            }
            r.labels[o] = y.get<int>();
        }
    }
    return r;
}

/// Reads a JSONL records file against a loaded graph.
inline Dataset load_dataset(const std::string& path, const OntologyGraph& graph) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open data file '" + path + "'");
    Dataset ds;
    ds.outcomes = graph.outcome_names();
    std::unordered_set<std::string> ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path + " line " + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(where + ": " + e.what());
        }
        Record r = parse_record(j, graph, ds.outcomes, where);
        if (ds.records.empty()) ds.feature_dim = r.features.size();
        if (r.features.size() != ds.feature_dim || ds.feature_dim == 0) {
            throw ValidationError(where + ": feature dimension " + std::to_string(r.features.size()) +
                                  " does not match " + std::to_string(ds.feature_dim));
        }
        if (!ids.insert(r.id).second) throw ValidationError(where + ": duplicate record id '" + r.id + "'");
        ds.records.push_back(std::move(r));
    }
    if (ds.records.empty()) throw ValidationError("data file '" + path + "' has no records");
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write data file '" + path + "'");
    for (const auto& r : ds.records) out << record_to_json(r).dump() << '\n';
}

/// Content hash of a dataset in its serialized form.
inline std::string dataset_hash(const Dataset& ds) {
    std::uint64_t h = fnv1a64("");
    for (const auto& r : ds.records) h = fnv1a64(record_to_json(r).dump() + "\n", h);
    std::ostringstream s;
    s << std::hex << h;
    return s.str();
}

// ---------------------------------------------------------------------------
// Cross-validation folds
// ---------------------------------------------------------------------------

struct FoldPlan {
    int k = 5;
    std::uint64_t seed = 0;
    std::map<std::string, int> assignment;

    int fold_of(const std::string& id) const {
        auto it = assignment.find(id);
        if (it == assignment.end()) throw ValidationError("fold plan has no entry for record '" + id + "'");
        return it->second;
    }
    std::set<std::string> ids_in(int fold) const {
        std::set<std::string> out;
        for (const auto& [id, f] : assignment) {
            if (f == fold) out.insert(id);
        }
        return out;
    }

    nlohmann::json to_json() const { return {{"k", k}, {"seed", seed}, {"assignment", assignment}}; }

    static FoldPlan from_json(const nlohmann::json& j) {
        FoldPlan p;
        try {
            p.k = j.at("k").get<int>();
            p.seed = j.at("seed").get<std::uint64_t>();
            p.assignment = j.at("assignment").get<std::map<std::string, int>>();
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("fold plan: ") + e.what());
        }
        for (const auto& [id, f] : p.assignment) {
            if (f < 0 || f >= p.k) throw ValidationError("fold plan: record '" + id + "' has fold out of range");
        }
        return p;
    }
};

/// Stratum memberships of a record: one entry per (core node, outcome, label)
/// it takes part in.
inline std::vector<std::string> strata_of(const Record& r, const OntologyGraph& graph) {
    std::vector<std::string> out;
    for (const auto& c : r.concepts) {
        const auto& node = graph.node(c);
        if (!node.is_core) continue;
        for (const auto& o : node.outcomes) {
            auto it = r.labels.find(o);
            if (it != r.labels.end()) out.push_back(c + '\x1f' + o + '\x1f' + std::to_string(it->second));
        }
    }
    return out;
}

/// Stratified k-fold assignment.
///
/// Labeled records are grouped by their exact set of stratum memberships.
/// Groups are dealt largest first; each record goes to the fold with the
/// largest summed remaining demand over its strata (ties to the lowest fold
/// index), so every stratum ends up split into floor/ceil shares and the
/// surplus positives and negatives of one stratum land in the same folds.
/// Unlabeled records are assigned uniformly at random.
inline FoldPlan make_folds(const Dataset& ds, const OntologyGraph& graph, int k, std::uint64_t seed) {
    if (k < 2) throw ValidationError("folds: k must be at least 2");
    if (ds.labeled_count() < static_cast<std::size_t>(k)) {
        throw ValidationError("folds: " + std::to_string(ds.labeled_count()) + " labeled records cannot fill " +
                              std::to_string(k) + " folds");
    }
    FoldPlan plan{k, seed, {}};
    Rng rng = Rng::stream(seed, "folds");

    std::map<std::vector<std::string>, std::vector<const Record*>> groups;
    std::map<std::string, double> totals;
    static const std::string kUnstratified = "\x1f" "labeled-without-core";
    for (const auto& r : ds.records) {
        if (!r.labeled()) continue;
        auto key = strata_of(r, graph);
        if (key.empty()) key.push_back(kUnstratified);
        for (const auto& s : key) totals[s] += 1.0;
        groups[key].push_back(&r);
    }
    std::vector<std::pair<std::vector<std::string>, std::vector<const Record*>>> ordered(groups.begin(), groups.end());
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const auto& a, const auto& b) { return a.second.size() > b.second.size(); });

    std::map<std::string, std::vector<double>> counts;
    for (const auto& [s, _] : totals) counts[s].assign(static_cast<std::size_t>(k), 0.0);
    for (auto& [key, members] : ordered) {
        rng.shuffle(members);
        for (const Record* r : members) {
            int best = 0;
            double best_demand = -1e300;
            for (int f = 0; f < k; ++f) {
                double demand = 0.0;
                for (const auto& s : key) demand += totals[s] / k - counts[s][static_cast<std::size_t>(f)];
                if (demand > best_demand + 1e-12) {
                    best_demand = demand;
                    best = f;
                }
            }
            for (const auto& s : key) counts[s][static_cast<std::size_t>(best)] += 1.0;
            plan.assignment[r->id] = best;
        }
    }
    for (const auto& r : ds.records) {
        if (!r.labeled()) plan.assignment[r.id] = static_cast<int>(rng.index(static_cast<std::size_t>(k)));
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Synthetic cohorts
// ---------------------------------------------------------------------------

struct SynthConfig {
    int levels = 3;                 // graph depth
    int branching = 2;              // children per node
    double cross_parent_prob = 0.0; // chance of a second parent from the level above
    int records_per_node = 500;     // records anchored at each node
    std::map<std::string, int> records_override;  // node id -> anchored record count
    std::vector<int> core_levels{1, 2};           // levels whose nodes are core
    std::map<std::string, double> prevalence{{"mortality", 0.15}};
    double rho = 0.9;               // parent-child weight correlation
    double noise_scale = 1.0;       // feature noise around the node prototype
    double prototype_scale = 0.5;   // spread of node prototypes
    double signal_scale = 3.0;      // norm of the label weight vectors
    bool label_augmented = false;   // also label records that express no core node
    std::size_t feature_dim = 41;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const {
        return {{"levels", levels},
                {"branching", branching},
                {"cross_parent_prob", cross_parent_prob},
                {"records_per_node", records_per_node},
                {"records_override", records_override},
                {"core_levels", core_levels},
                {"prevalence", prevalence},
                {"rho", rho},
                {"noise_scale", noise_scale},
                {"prototype_scale", prototype_scale},
                {"signal_scale", signal_scale},
                {"label_augmented", label_augmented},
                {"feature_dim", feature_dim},
                {"seed", seed}};
    }

    /// Every field optional; missing ones keep their defaults.
    static SynthConfig from_json(const nlohmann::json& j) {
        SynthConfig c;
        static const std::set<std::string> known{"levels",        "branching",       "cross_parent_prob",
                                                 "records_per_node", "records_override", "core_levels",
                                                 "prevalence",    "rho",             "noise_scale",
                                                 "prototype_scale", "signal_scale",   "label_augmented",
                                                 "feature_dim",   "seed"};
        if (!j.is_object()) throw ValidationError("synth config: expected a JSON object");
        for (const auto& [key, _] : j.items()) {
            if (!known.contains(key)) throw ValidationError("synth config: unknown field '" + key + "'");
        }
        try {
            c.levels = j.value("levels", c.levels);
            c.branching = j.value("branching", c.branching);
            c.cross_parent_prob = j.value("cross_parent_prob", c.cross_parent_prob);
            c.records_per_node = j.value("records_per_node", c.records_per_node);
            c.records_override = j.value("records_override", c.records_override);
            c.core_levels = j.value("core_levels", c.core_levels);
            c.prevalence = j.value("prevalence", c.prevalence);
            c.rho = j.value("rho", c.rho);
            c.noise_scale = j.value("noise_scale", c.noise_scale);
            c.prototype_scale = j.value("prototype_scale", c.prototype_scale);
            c.signal_scale = j.value("signal_scale", c.signal_scale);
            c.label_augmented = j.value("label_augmented", c.label_augmented);
            c.feature_dim = j.value("feature_dim", c.feature_dim);
            c.seed = j.value("seed", c.seed);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("synth config: ") + e.what());
        }
        return c;
    }
};

/// Id of the i-th child path, e.g. "n0", "n0.1", "n0.1.0".
inline std::string synth_node_id(const std::vector<int>& path) {
    std::string id = "n0";
    for (int p : path) id += "." + std::to_string(p);
    return id;
}

/// The benchmark used for the end-to-end comparison: depth-3 binary tree,
/// rho = 0.9, prevalence 0.15, and one core leaf limited to 200 records.
inline SynthConfig default_benchmark_config(std::uint64_t seed = 0) {
    SynthConfig c;
    c.seed = seed;
    c.records_override[synth_node_id({1, 1})] = 200;
    return c;
}

struct SynthResult {
    OntologyGraph graph;
    Dataset data;
    std::map<std::string, std::map<std::string, std::vector<double>>> weights;  // outcome -> node -> label weights
};

/// Layered DAG plus records whose labels follow node-specific logistic
/// models. Child label weights are rho * parent weights + sqrt(1 - rho^2) *
/// fresh noise. One bias per (outcome, anchor node) is bisected so that the
/// realized prevalence among the records anchored there hits the target.
inline SynthResult generate_synthetic(const SynthConfig& cfg) {
    if (cfg.levels < 1 || cfg.branching < 1) throw ValidationError("synth: levels and branching must be positive");
    if (cfg.feature_dim == 0) throw ValidationError("synth: feature_dim must be positive");
    if (cfg.rho < 0.0 || cfg.rho > 1.0) throw ValidationError("synth: rho must lie in [0, 1]");
    if (cfg.records_per_node < 0) throw ValidationError("synth: records_per_node must be non-negative");
    if (cfg.prevalence.empty()) throw ValidationError("synth: at least one outcome is required");
    for (const auto& [o, p] : cfg.prevalence) {
        if (!(p > 0.0 && p < 1.0)) throw ValidationError("synth: prevalence target for '" + o + "' unreachable");
    }
    const std::size_t d = cfg.feature_dim;
    Rng graph_rng = Rng::stream(cfg.seed, "synth/graph");
    Rng param_rng = Rng::stream(cfg.seed, "synth/params");
    Rng data_rng = Rng::stream(cfg.seed, "synth/data");

    // Topology: a complete tree, optionally with extra parents.
    std::vector<std::vector<std::vector<int>>> paths_by_level{{{}}};
    for (int l = 1; l < cfg.levels; ++l) {
        std::vector<std::vector<int>> next;
        for (const auto& p : paths_by_level.back()) {
            for (int b = 0; b < cfg.branching; ++b) {
                auto q = p;
                q.push_back(b);
                next.push_back(q);
            }
        }
        paths_by_level.push_back(std::move(next));
    }
    std::set<int> core_levels(cfg.core_levels.begin(), cfg.core_levels.end());
    std::vector<ConceptNode> nodes;
    std::vector<Edge> edges;
    for (int l = 0; l < cfg.levels; ++l) {
        const auto& level_paths = paths_by_level[static_cast<std::size_t>(l)];
        for (const auto& p : level_paths) {
            const std::string id = synth_node_id(p);
            ConceptNode n{id, "SYN-" + id, core_levels.contains(l), {}};
            if (n.is_core) {
                for (const auto& [o, _] : cfg.prevalence) n.outcomes.push_back(o);
            }
            nodes.push_back(n);
            if (l == 0) continue;
            const std::string parent = synth_node_id(std::vector<int>(p.begin(), p.end() - 1));
            edges.push_back({parent, id});
            if (cfg.cross_parent_prob > 0.0 && graph_rng.bernoulli(cfg.cross_parent_prob)) {
                const auto& above = paths_by_level[static_cast<std::size_t>(l - 1)];
                const std::string extra = synth_node_id(above[graph_rng.index(above.size())]);
                if (extra != parent) edges.push_back({extra, id});
            }
        }
    }
    OntologyGraph graph = OntologyGraph::build(nodes, edges);

    auto gaussian = [&](double scale) {
        std::vector<double> v(d);
        for (auto& x : v) x = scale * param_rng.normal();
        return v;
    };
    const double w_scale = cfg.signal_scale / std::sqrt(static_cast<double>(d));
    const double fresh = std::sqrt(std::max(0.0, 1.0 - cfg.rho * cfg.rho));

    // Prototypes and label weights, parents before children.
    std::map<std::string, std::vector<double>> prototype;
    std::map<std::string, std::map<std::string, std::vector<double>>> weights;  // outcome -> node -> w
    for (const auto& id : graph.order()) {
        const auto& parents = graph.parents(id);
        std::vector<double> proto = gaussian(cfg.prototype_scale);
        if (!parents.empty()) {
            for (std::size_t i = 0; i < d; ++i) {
                double mean = 0.0;
                for (const auto& p : parents) mean += prototype[p][i];
                proto[i] += mean / static_cast<double>(parents.size());
            }
        }
        prototype[id] = std::move(proto);
        for (const auto& [o, _] : cfg.prevalence) {
            std::vector<double> noise = gaussian(w_scale);
            if (parents.empty()) {
                weights[o][id] = std::move(noise);
                continue;
            }
            std::vector<double> w(d);
            for (std::size_t i = 0; i < d; ++i) {
                double mean = 0.0;
                for (const auto& p : parents) mean += weights[o][p][i];
                mean /= static_cast<double>(parents.size());
                w[i] = cfg.rho * mean + fresh * noise[i];
            }
            weights[o][id] = std::move(w);
        }
    }

    Dataset ds;
    ds.feature_dim = d;
    for (const auto& [o, _] : cfg.prevalence) ds.outcomes.insert(o);
    struct Draw {
        std::size_t record;
        double logit;
        double u;
    };
    std::map<std::pair<std::string, std::string>, std::vector<Draw>> draws;  // (outcome, anchor node)
    std::size_t serial = 0;
    for (const auto& id : graph.order()) {
        auto it = cfg.records_override.find(id);
        const int count = it != cfg.records_override.end() ? it->second : cfg.records_per_node;
        const auto concepts = ancestor_closure(graph, {id});
        bool expresses_core = false;
        for (const auto& c : concepts) expresses_core = expresses_core || graph.node(c).is_core;
        for (int i = 0; i < count; ++i) {
            Record r;
            char buf[32];
            std::snprintf(buf, sizeof buf, "rec%06zu", serial++);
            r.id = buf;
            r.concepts = concepts;
            r.features.resize(d);
            for (std::size_t j = 0; j < d; ++j) r.features[j] = prototype[id][j] + cfg.noise_scale * data_rng.normal();
            for (const auto& [o, _] : cfg.prevalence) {
                const auto& w = weights[o][id];
                double z = 0.0;
                for (std::size_t j = 0; j < d; ++j) z += w[j] * r.features[j];
                const double u = data_rng.uniform();
                if (expresses_core || cfg.label_augmented) draws[{o, id}].push_back({ds.records.size(), z, u});
            }
            ds.records.push_back(std::move(r));
        }
    }

    for (const auto& [key, ds_draws] : draws) {
        const auto& [o, anchor] = key;
        const double target = cfg.prevalence.at(o);
        auto realized = [&](double b) {
            std::size_t pos = 0;
            for (const auto& dr : ds_draws) pos += dr.u < 1.0 / (1.0 + std::exp(-(dr.logit + b)));
            return static_cast<double>(pos) / static_cast<double>(ds_draws.size());
        };
        double lo = -100.0, hi = 100.0;
        for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (lo + hi);
            (realized(mid) < target ? lo : hi) = mid;
        }
        const double bias = std::abs(realized(lo) - target) < std::abs(realized(hi) - target) ? lo : hi;
        if (std::abs(realized(bias) - target) > 0.02) {
            throw ValidationError("synth: prevalence target " + std::to_string(target) + " for '" + o + "' at '" +
                                  anchor + "' is unreachable with " + std::to_string(ds_draws.size()) + " records");
        }
        for (const auto& dr : ds_draws) {
            ds.records[dr.record].labels[o] = dr.u < 1.0 / (1.0 + std::exp(-(dr.logit + bias))) ? 1 : 0;
        }
    }
    return {std::move(graph), std::move(ds), std::move(weights)};
}

}  // namespace omtl
