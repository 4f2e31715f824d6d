#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omtl/adam.hpp"
#include "omtl/autodiff.hpp"
#include "omtl/datastore.hpp"
#include "omtl/errors.hpp"
#include "omtl/ontology.hpp"
#include "omtl/rng.hpp"
#include "omtl/tensor.hpp"

namespace omtl {

/// SB: one shared expert. MOE: several experts averaged without gates.
/// MMOE: per-node expert gates. OMTL: MMOE plus parent gates along the graph.
enum class Variant { SB, MOE, MMOE, OMTL };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::SB: return "sb";
        case Variant::MOE: return "moe";
        case Variant::MMOE: return "mmoe";
        case Variant::OMTL: return "omtl";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "sb") return Variant::SB;
    if (s == "moe") return Variant::MOE;
    if (s == "mmoe") return Variant::MMOE;
    if (s == "omtl") return Variant::OMTL;
    throw ValidationError("unknown variant '" + s + "' (expected sb, moe, mmoe or omtl)");
}

struct ModelSpec {
    Variant variant = Variant::OMTL;
    int num_experts = 3;
    std::size_t feature_dim = 41;
    std::size_t repr_dim = 5;
    bool hierarchy_enabled = true;
    double dropout = 0.5;
    double leaky_slope = 0.01;
    /// When set, every node gets an outcome head for this outcome so that
    /// level-weighted losses can supervise augmented nodes as well.
    std::optional<std::string> shared_outcome;

    /// Spec with the variant's fixed structure filled in.
    static ModelSpec for_variant(Variant v, std::size_t feature_dim = 41, int num_experts = 3) {
        ModelSpec s;
        s.variant = v;
        s.feature_dim = feature_dim;
        s.num_experts = v == Variant::SB ? 1 : num_experts;
        s.hierarchy_enabled = v == Variant::OMTL;
        return s;
    }

    bool has_gates() const { return variant == Variant::MMOE || variant == Variant::OMTL; }

    void validate() const {
        if (feature_dim == 0 || repr_dim == 0) throw ValidationError("model: feature and representation sizes must be positive");
        if (num_experts < 1) throw ValidationError("model: at least one expert is required");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("model: dropout must lie in [0, 1)");
        switch (variant) {
            case Variant::SB:
                if (num_experts != 1) throw ValidationError("model: SB uses exactly one expert");
                if (hierarchy_enabled) throw ValidationError("model: SB has no hierarchy");
                break;
            case Variant::MOE:
                if (num_experts < 2) throw ValidationError("model: MOE needs more than one expert");
                if (hierarchy_enabled) throw ValidationError("model: MOE has no hierarchy");
                break;
            case Variant::MMOE:
                if (hierarchy_enabled) throw ValidationError("model: MMOE has no hierarchy");
                break;
            case Variant::OMTL:
                if (!hierarchy_enabled) throw ValidationError("model: OMTL requires hierarchy_enabled");
                break;
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"variant", to_string(variant)},   {"num_experts", num_experts},
                         {"feature_dim", feature_dim},      {"repr_dim", repr_dim},
                         {"hierarchy_enabled", hierarchy_enabled}, {"dropout", dropout},
                         {"leaky_slope", leaky_slope}};
        j["shared_outcome"] = shared_outcome ? nlohmann::json(*shared_outcome) : nlohmann::json(nullptr);
        return j;
    }

    static ModelSpec from_json(const nlohmann::json& j) {
        ModelSpec s;
        try {
            s.variant = parse_variant(j.at("variant").get<std::string>());
            s.num_experts = j.at("num_experts").get<int>();
            s.feature_dim = j.at("feature_dim").get<std::size_t>();
            s.repr_dim = j.at("repr_dim").get<std::size_t>();
            s.hierarchy_enabled = j.at("hierarchy_enabled").get<bool>();
            s.dropout = j.at("dropout").get<double>();
            s.leaky_slope = j.value("leaky_slope", 0.01);
            if (j.contains("shared_outcome") && !j.at("shared_outcome").is_null()) {
                s.shared_outcome = j.at("shared_outcome").get<std::string>();
            }
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("model spec: ") + e.what());
        }
        s.validate();
        return s;
    }
};

namespace names {
inline std::string expert(int e, char wb) { return "expert/" + std::to_string(e) + "/" + wb; }
inline std::string gate_g(const std::string& node, char wb) { return "gate_g/" + node + "/" + wb; }
inline std::string gate_h(const std::string& node, char wb) { return "gate_h/" + node + "/" + wb; }
inline std::string repr(const std::string& node, char wb) { return "repr/" + node + "/" + wb; }
inline std::string recon(const std::string& node, char wb) { return "recon/" + node + "/" + wb; }
inline std::string head(const std::string& node, const std::string& outcome, char wb) {
    return "head/" + node + "/" + outcome + "/" + wb;
}
inline bool is_expert(const std::string& name) { return name.starts_with("expert/"); }
inline bool is_gate_g(const std::string& name) { return name.starts_with("gate_g/"); }
inline bool is_gate_h(const std::string& name) { return name.starts_with("gate_h/"); }
inline bool is_head(const std::string& name) { return name.starts_with("head/"); }
}  // namespace names

/// All parameters of one network, keyed by name in lexicographic order.
struct OmtlModel {
    ModelSpec spec;
    ParameterMap params;
    std::string graph_hash;
    /// Outcomes with a head, per node.
    std::map<std::string, std::vector<std::string>> heads;
    /// Whether forward uses the parent path. OMTL trains its first phase
    /// with this switched off.
    bool hierarchy_active = false;

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params) n += t.size();
        return n;
    }
    const DenseTensor& param(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw ValidationError("model has no parameter '" + name + "'");
        return it->second;
    }
    bool has_head(const std::string& node, const std::string& outcome) const {
        auto it = heads.find(node);
        return it != heads.end() && std::find(it->second.begin(), it->second.end(), outcome) != it->second.end();
    }

    nlohmann::json to_json() const {
        nlohmann::json p = nlohmann::json::object();
        for (const auto& [name, t] : params) {
            p[name] = {{"shape", {t.rows(), t.cols()}}, {"values", t.values()}};
        }
        return {{"spec", spec.to_json()}, {"graph_hash", graph_hash}, {"hierarchy_active", hierarchy_active}, {"params", p}};
    }
};

namespace detail {

inline std::map<std::string, std::vector<std::string>> head_layout(const ModelSpec& spec, const OntologyGraph& graph) {
    std::map<std::string, std::vector<std::string>> heads;
    for (const auto& id : graph.order()) {
        std::vector<std::string> outs = graph.node(id).outcomes;
        if (spec.shared_outcome && std::find(outs.begin(), outs.end(), *spec.shared_outcome) == outs.end()) {
            outs.push_back(*spec.shared_outcome);
        }
        std::sort(outs.begin(), outs.end());
        if (!outs.empty()) heads[id] = std::move(outs);
    }
    return heads;
}

/// Fan-in scaled uniform initialization; each parameter draws from its own
/// named stream so shared parameters agree across variants.
inline void init_layer(ParameterMap& params, const std::string& w_name, const std::string& b_name, std::size_t fan_in,
                       std::size_t fan_out, std::uint64_t seed) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    auto make = [&](const std::string& name, std::size_t rows) {
        Rng rng = Rng::stream(seed, "init/" + name);
        DenseTensor t(rows, fan_out);
        for (double& v : t.data()) v = rng.uniform(-bound, bound);
        params[name] = std::move(t);
    };
    make(w_name, fan_in);
    make(b_name, 1);
}

}  // namespace detail

/// Re-draws the parent gates of every node with parents.
inline void init_parent_gates(OmtlModel& model, const OntologyGraph& graph, std::uint64_t seed) {
    for (const auto& id : graph.order()) {
        const std::size_t n = graph.parents(id).size();
        if (n == 0) continue;
        detail::init_layer(model.params, names::gate_h(id, 'W'), names::gate_h(id, 'b'), model.spec.feature_dim, n,
                           seed);
    }
}

inline OmtlModel build_model(const ModelSpec& spec, const OntologyGraph& graph, std::uint64_t seed) {
    spec.validate();
    if (graph.size() == 0) throw ValidationError("model: graph has no nodes");
    if (spec.shared_outcome && spec.shared_outcome->empty()) throw ValidationError("model: empty shared outcome");
    OmtlModel m;
    m.spec = spec;
    m.graph_hash = graph.hash();
    m.heads = detail::head_layout(spec, graph);
    m.hierarchy_active = spec.hierarchy_enabled;
    const std::size_t d = spec.feature_dim, de = spec.repr_dim;
    const auto E = static_cast<std::size_t>(spec.num_experts);
    for (int e = 0; e < spec.num_experts; ++e) {
        detail::init_layer(m.params, names::expert(e, 'W'), names::expert(e, 'b'), d, de, seed);
    }
    for (const auto& id : graph.order()) {
        if (spec.has_gates()) detail::init_layer(m.params, names::gate_g(id, 'W'), names::gate_g(id, 'b'), d, E, seed);
        detail::init_layer(m.params, names::repr(id, 'W'), names::repr(id, 'b'), de, de, seed);
        detail::init_layer(m.params, names::recon(id, 'W'), names::recon(id, 'b'), de, d, seed);
        if (auto it = m.heads.find(id); it != m.heads.end()) {
            for (const auto& o : it->second) {
                detail::init_layer(m.params, names::head(id, o, 'W'), names::head(id, o, 'b'), de, 1, seed);
            }
        }
    }
    if (spec.hierarchy_enabled) init_parent_gates(m, graph, seed);
    return m;
}

/// Rebuilds a model from its JSON form and checks it against `graph`.
inline OmtlModel model_from_json(const nlohmann::json& j, const OntologyGraph& graph) {
    OmtlModel m;
    try {
        m.spec = ModelSpec::from_json(j.at("spec"));
        m.graph_hash = j.at("graph_hash").get<std::string>();
        for (const auto& [name, t] : j.at("params").items()) {
            const auto shape = t.at("shape").get<std::vector<std::size_t>>();
            if (shape.size() != 2) throw ValidationError("model: parameter '" + name + "' must be 2-D");
            m.params[name] = DenseTensor(shape[0], shape[1], t.at("values").get<std::vector<double>>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("model file: ") + e.what());
    }
    if (m.graph_hash != graph.hash()) throw ValidationError("model was trained on a different graph");
    m.heads = detail::head_layout(m.spec, graph);
    m.hierarchy_active = j.value("hierarchy_active", m.spec.hierarchy_enabled) && m.spec.hierarchy_enabled;
    const OmtlModel reference = build_model(m.spec, graph, 0);
    for (const auto& [name, t] : reference.params) {
        auto it = m.params.find(name);
        if (it == m.params.end()) throw ValidationError("model file lacks parameter '" + name + "'");
        require_shape(it->second.shape() == t.shape(), name.c_str(), it->second.shape(), t.shape());
    }
    if (m.params.size() != reference.params.size()) throw ValidationError("model file has unexpected parameters");
    return m;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

enum class Mode { train, eval };

/// Tape handles for one node over the batch rows that express it.
struct NodeTrace {
    std::vector<std::size_t> rows;  // batch row indices, ascending
    Var gate_g;                     // rows x E (gated variants only)
    Var gate_h;                     // rows x n_parents (parent path only)
    Var mixture;                    // M_j
    Var parent_mixture;             // P_j (parent path only)
    Var repr;                       // rows x d_e
    Var recon;                      // rows x d
    std::map<std::string, Var> logits;  // outcome -> rows x 1
};

struct BatchTrace {
    Var input;
    std::vector<std::string> order;  // nodes computed, in evaluation order
    std::map<std::string, NodeTrace> nodes;
};

using NodeObserver = std::function<void(const std::string& node)>;

namespace detail {

inline Var param(Tape& tape, const OmtlModel& m, const std::string& name) { return tape.parameter(name, m.param(name)); }

inline Var layer(Tape& tape, const OmtlModel& m, Var x, const std::string& w, const std::string& b) {
    return ops::affine(x, param(tape, m, w), param(tape, m, b));
}

/// Expert mixture for `node` given the expert outputs on the node's rows.
inline Var mix(Tape& tape, const OmtlModel& m, const std::string& node, Var x, const std::vector<Var>& experts,
               Var* gate_out) {
    switch (m.spec.variant) {
        case Variant::SB: return experts[0];
        case Variant::MOE: return ops::scale(ops::sum(experts), 1.0 / static_cast<double>(experts.size()));
        default: break;
    }
    Var gate = ops::softmax(layer(tape, m, x, names::gate_g(node, 'W'), names::gate_g(node, 'b')));
    if (gate_out) *gate_out = gate;
    std::vector<Var> terms;
    for (std::size_t e = 0; e < experts.size(); ++e) terms.push_back(ops::scale_rows(experts[e], ops::column(gate, e)));
    return ops::sum(terms);
}

/// Parent mixture P_j = sum_k H_j^k(x) E_k(x).
inline Var parent_mix(Tape& tape, const OmtlModel& m, const std::string& node, Var x, const std::vector<Var>& parents,
                      Var* gate_out) {
    Var gate = ops::softmax(layer(tape, m, x, names::gate_h(node, 'W'), names::gate_h(node, 'b')));
    if (gate_out) *gate_out = gate;
    std::vector<Var> terms;
    for (std::size_t k = 0; k < parents.size(); ++k) terms.push_back(ops::scale_rows(parents[k], ops::column(gate, k)));
    return ops::sum(terms);
}

inline Var represent(Tape& tape, const OmtlModel& m, const std::string& node, Var mixture, std::optional<Var> parents) {
    Var in = parents ? ops::add(mixture, *parents) : mixture;
    return ops::softplus(layer(tape, m, in, names::repr(node, 'W'), names::repr(node, 'b')));
}

inline bool labeled_for(const Record& r, const std::string& outcome) { return r.labels.contains(outcome); }

}  // namespace detail

/// Level-ordered routing of a batch through the network.
///
/// Nodes are visited by nondecreasing level (ties by id). A node is computed
/// only on the rows whose record expresses it; parents are always computed
/// first because concept sets are ancestor-closed. Outcome logits are
/// produced for every head on an expressed node; in train mode the loss
/// reads only rows that carry the label.
inline BatchTrace forward_batch(const OmtlModel& m, const OntologyGraph& graph, std::span<const Record* const> batch,
                                Mode mode, Tape& tape, Rng& dropout_rng, const NodeObserver& observer = {}) {
    if (batch.empty()) throw ValidationError("forward: empty batch");
    const std::size_t d = m.spec.feature_dim;
    DenseTensor x(batch.size(), d);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Record& r = *batch[i];
        if (r.features.size() != d) {
            throw ShapeError("forward: record '" + r.id + "' has " + std::to_string(r.features.size()) +
                             " features, model expects " + std::to_string(d));
        }
        std::copy(r.features.begin(), r.features.end(), x.data().begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    BatchTrace trace;
    trace.input = tape.constant(std::move(x));

    const bool train = mode == Mode::train;
    std::vector<Var> experts;
    for (int e = 0; e < m.spec.num_experts; ++e) {
        Var h = ops::leaky_relu(
            detail::layer(tape, m, trace.input, names::expert(e, 'W'), names::expert(e, 'b')), m.spec.leaky_slope);
        experts.push_back(ops::dropout(h, m.spec.dropout, dropout_rng, train));
    }

    for (const auto& id : graph.order()) {
        NodeTrace node;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            if (batch[i]->concepts.contains(id)) node.rows.push_back(i);
        }
        if (node.rows.empty()) continue;
        if (observer) observer(id);
        const bool whole_batch = node.rows.size() == batch.size();
        Var xs = whole_batch ? trace.input : ops::gather_rows(trace.input, node.rows);
        std::vector<Var> ex;
        for (Var e : experts) ex.push_back(whole_batch ? e : ops::gather_rows(e, node.rows));
        node.mixture = detail::mix(tape, m, id, xs, ex, &node.gate_g);

        std::optional<Var> parent_path;
        const auto& parents = graph.parents(id);
        if (m.hierarchy_active && !parents.empty()) {
            std::vector<Var> parent_reprs;
            for (const auto& p : parents) {
                auto it = trace.nodes.find(p);
                if (it == trace.nodes.end()) {
                    throw NumericalError("forward: parent '" + p + "' of '" + id + "' was not computed");
                }
                const auto& prow = it->second.rows;
                std::vector<std::size_t> pos;
                pos.reserve(node.rows.size());
                for (std::size_t r : node.rows) {
                    auto at = std::lower_bound(prow.begin(), prow.end(), r);
                    if (at == prow.end() || *at != r) {
                        throw NumericalError("forward: record '" + batch[r]->id + "' expresses '" + id +
                                             "' but not its parent '" + p + "'");
                    }
                    pos.push_back(static_cast<std::size_t>(at - prow.begin()));
                }
                const bool same_rows = pos.size() == prow.size();
                parent_reprs.push_back(same_rows ? it->second.repr : ops::gather_rows(it->second.repr, pos));
            }
            node.parent_mixture = detail::parent_mix(tape, m, id, xs, parent_reprs, &node.gate_h);
            parent_path = node.parent_mixture;
        }
        node.repr = detail::represent(tape, m, id, node.mixture, parent_path);
        node.recon = ops::relu(detail::layer(tape, m, node.repr, names::recon(id, 'W'), names::recon(id, 'b')));
        if (auto it = m.heads.find(id); it != m.heads.end()) {
            for (const auto& o : it->second) {
                bool any = !train;
                for (std::size_t r : node.rows) any = any || detail::labeled_for(*batch[r], o);
                if (!any) continue;
                node.logits[o] = detail::layer(tape, m, node.repr, names::head(id, o, 'W'), names::head(id, o, 'b'));
            }
        }
        trace.order.push_back(id);
        trace.nodes.emplace(id, std::move(node));
    }
    return trace;
}

/// Outputs of one record at one node.
struct NodeOutput {
    std::vector<double> representation;
    std::vector<double> reconstruction;
    std::map<std::string, double> logits;
    std::map<std::string, double> predictions;
};

/// Per-record view of a forward pass: only expressed nodes appear.
struct ForwardResult {
    std::vector<std::string> order;
    std::map<std::string, NodeOutput> nodes;
};

inline double probability_from_logit(double z) {
    const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    return std::clamp(p, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

/// Splits a batch trace into per-record results. In train mode only labeled
/// outcomes are reported.
inline std::vector<ForwardResult> split_trace(const BatchTrace& trace, std::span<const Record* const> batch, Mode mode) {
    std::vector<ForwardResult> out(batch.size());
    for (const auto& id : trace.order) {
        const NodeTrace& node = trace.nodes.at(id);
        const DenseTensor& rep = node.repr.value();
        const DenseTensor& rec = node.recon.value();
        for (std::size_t k = 0; k < node.rows.size(); ++k) {
            const std::size_t r = node.rows[k];
            NodeOutput no;
            auto rs = rep.row_span(k);
            auto cs = rec.row_span(k);
            no.representation.assign(rs.begin(), rs.end());
            no.reconstruction.assign(cs.begin(), cs.end());
            for (const auto& [o, v] : node.logits) {
                if (mode == Mode::train && !detail::labeled_for(*batch[r], o)) continue;
                const double z = v.value()[k];
                no.logits[o] = z;
                no.predictions[o] = probability_from_logit(z);
            }
            out[r].order.push_back(id);
            out[r].nodes.emplace(id, std::move(no));
        }
    }
    return out;
}

/// Single-record forward pass.
inline ForwardResult forward(const OmtlModel& m, const OntologyGraph& graph, const Record& record, Mode mode,
                             Rng& dropout_rng, const NodeObserver& observer = {}) {
    Tape tape;
    const Record* batch[] = {&record};
    BatchTrace trace = forward_batch(m, graph, batch, mode, tape, dropout_rng, observer);
    return std::move(split_trace(trace, batch, mode)[0]);
}

inline ForwardResult forward(const OmtlModel& m, const OntologyGraph& graph, const Record& record) {
    Rng unused(0);
    return forward(m, graph, record, Mode::eval, unused);
}

// ---------------------------------------------------------------------------
// Single-input building blocks (evaluation mode, no dropout)
// ---------------------------------------------------------------------------

namespace detail {

inline Var input_row(Tape& tape, const OmtlModel& m, std::span<const double> x) {
    if (x.size() != m.spec.feature_dim) {
        throw ShapeError("input has " + std::to_string(x.size()) + " features, model expects " +
                         std::to_string(m.spec.feature_dim));
    }
    return tape.constant(DenseTensor::row(x));
}

inline std::vector<Var> expert_rows(Tape& tape, const OmtlModel& m, Var x) {
    std::vector<Var> out;
    for (int e = 0; e < m.spec.num_experts; ++e) {
        out.push_back(
            ops::leaky_relu(layer(tape, m, x, names::expert(e, 'W'), names::expert(e, 'b')), m.spec.leaky_slope));
    }
    return out;
}

inline std::vector<double> to_vector(Var v) { return v.value().values(); }

}  // namespace detail

/// Expert gate G_p(x); empty for ungated variants.
inline std::vector<double> expert_gate(const OmtlModel& m, const std::string& node, std::span<const double> x) {
    if (!m.spec.has_gates()) return {};
    Tape tape;
    Var xv = detail::input_row(tape, m, x);
    return detail::to_vector(
        ops::softmax(detail::layer(tape, m, xv, names::gate_g(node, 'W'), names::gate_g(node, 'b'))));
}

/// Parent gate H_j(x); empty when the node has no parent gate.
inline std::vector<double> parent_gate(const OmtlModel& m, const std::string& node, std::span<const double> x) {
    if (!m.params.contains(names::gate_h(node, 'W'))) return {};
    Tape tape;
    Var xv = detail::input_row(tape, m, x);
    return detail::to_vector(
        ops::softmax(detail::layer(tape, m, xv, names::gate_h(node, 'W'), names::gate_h(node, 'b'))));
}

/// M_p(x): the node's mixture of expert outputs.
inline std::vector<double> mix_experts(const OmtlModel& m, const std::string& node, std::span<const double> x) {
    Tape tape;
    Var xv = detail::input_row(tape, m, x);
    return detail::to_vector(detail::mix(tape, m, node, xv, detail::expert_rows(tape, m, xv), nullptr));
}

/// Representation of node j given its parents' representations. The parent
/// path is used when the hierarchy is active and j has parents.
inline std::vector<double> node_representation(const OmtlModel& m, const OntologyGraph& graph, const std::string& node,
                                               std::span<const double> x,
                                               const std::map<std::string, std::vector<double>>& parent_reprs) {
    Tape tape;
    Var xv = detail::input_row(tape, m, x);
    Var mixture = detail::mix(tape, m, node, xv, detail::expert_rows(tape, m, xv), nullptr);
    std::optional<Var> parent_path;
    const auto& parents = graph.parents(node);
    if (m.hierarchy_active && !parents.empty()) {
        std::vector<Var> reps;
        for (const auto& p : parents) {
            auto it = parent_reprs.find(p);
            if (it == parent_reprs.end()) {
                throw NumericalError("node_representation: missing representation of parent '" + p + "'");
            }
            reps.push_back(tape.constant(DenseTensor::row(it->second)));
        }
        parent_path = detail::parent_mix(tape, m, node, xv, reps, nullptr);
    }
    return detail::to_vector(detail::represent(tape, m, node, mixture, parent_path));
}

}  // namespace omtl
