#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "omtl/autodiff.hpp"
#include "omtl/datastore.hpp"
#include "omtl/model.hpp"
#include "omtl/objective.hpp"
#include "omtl/ontology.hpp"
#include "omtl/rng.hpp"

namespace omtl {

// ---------------------------------------------------------------------------
// Small random problems, used by the gradient checker and the test suites
// ---------------------------------------------------------------------------

struct InstanceShape {
    int min_nodes = 2;
    int max_nodes = 6;
    std::size_t feature_dim = 7;
    std::size_t repr_dim = 3;
    int num_experts = 2;
    std::size_t records = 4;
    double edge_prob = 0.45;
    double label_prob = 0.7;
};

/// Random DAG over ids c0..c{n-1}; edges only run from lower to higher index.
/// At least one node is core; core nodes carry outcome "y" and sometimes "z".
inline OntologyGraph random_graph(Rng& rng, const InstanceShape& shape) {
    const int n = shape.min_nodes + static_cast<int>(rng.index(static_cast<std::size_t>(shape.max_nodes - shape.min_nodes + 1)));
    std::vector<ConceptNode> nodes;
    const std::size_t forced_core = rng.index(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        ConceptNode c;
        c.id = "c" + std::to_string(i);
        c.concept_code = "R" + std::to_string(i);
        c.is_core = static_cast<std::size_t>(i) == forced_core || rng.bernoulli(0.5);
        if (c.is_core) {
            c.outcomes.push_back("y");
            if (rng.bernoulli(0.5)) c.outcomes.push_back("z");
        }
        nodes.push_back(std::move(c));
    }
    std::vector<Edge> edges;
    for (int j = 1; j < n; ++j) {
        for (int i = 0; i < j; ++i) {
            if (rng.bernoulli(shape.edge_prob)) edges.push_back({"c" + std::to_string(i), "c" + std::to_string(j)});
        }
    }
    return OntologyGraph::build(std::move(nodes), std::move(edges));
}

/// Record expressing the ancestor closure of a random nonempty node subset.
inline Record random_record(Rng& rng, const OntologyGraph& graph, std::size_t feature_dim, double label_prob,
                            const std::string& id) {
    Record r;
    r.id = id;
    for (std::size_t i = 0; i < feature_dim; ++i) r.features.push_back(rng.normal());
    std::set<std::string> picked;
    const auto& order = graph.order();
    picked.insert(order[rng.index(order.size())]);
    for (const auto& n : order) {
        if (rng.bernoulli(0.3)) picked.insert(n);
    }
    r.concepts = ancestor_closure(graph, picked);
    for (const auto& c : r.concepts) {
        const auto& node = graph.node(c);
        for (const auto& o : node.outcomes) {
            if (!r.labels.contains(o) && rng.bernoulli(label_prob)) r.labels[o] = rng.bernoulli(0.5) ? 1 : 0;
        }
    }
    return r;
}

struct RandomInstance {
    OntologyGraph graph;
    OmtlModel model;
    std::vector<Record> records;

    std::vector<const Record*> batch() const {
        std::vector<const Record*> b;
        for (const auto& r : records) b.push_back(&r);
        return b;
    }
};

inline RandomInstance random_instance(std::uint64_t seed, const InstanceShape& shape = {},
                                      Variant variant = Variant::OMTL) {
    Rng rng = Rng::stream(seed, "instance");
    RandomInstance inst{random_graph(rng, shape), {}, {}};
    ModelSpec spec = ModelSpec::for_variant(variant, shape.feature_dim, shape.num_experts);
    spec.repr_dim = shape.repr_dim;
    inst.model = build_model(spec, inst.graph, seed);
    for (std::size_t i = 0; i < shape.records; ++i) {
        inst.records.push_back(random_record(rng, inst.graph, shape.feature_dim, shape.label_prob, "r" + std::to_string(i)));
    }
    return inst;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is zero from dividing rounding noise by zero.
inline double relative_error(double a, double n, double floor = 1e-6) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Compares tape gradients of the batch loss with central differences on
/// every parameter entry. Dropout draws the same mask on every evaluation.
inline GradCheckResult check_gradients(OmtlModel& model, const OntologyGraph& graph,
                                       const std::vector<const Record*>& batch, double lambda, double h = 1e-5,
                                       std::uint64_t mask_seed = 0) {
    std::span<const Record* const> rows(batch.data(), batch.size());
    auto loss_value = [&]() {
        Tape tape;
        Rng mask = Rng::stream(mask_seed, "dropout");
        BatchTrace trace = forward_batch(model, graph, rows, Mode::train, tape, mask);
        return batch_loss(tape, trace, rows, graph, model, lambda).value;
    };
    Gradients grads;
    {
        Tape tape;
        Rng mask = Rng::stream(mask_seed, "dropout");
        BatchTrace trace = forward_batch(model, graph, rows, Mode::train, tape, mask);
        BatchLoss loss = batch_loss(tape, trace, rows, graph, model, lambda);
        grads = tape.backward(loss.total);
    }
    GradCheckResult res;
    for (auto& [name, tensor] : model.params) {
        auto g = grads.find(name);
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            const double saved = tensor[i];
            tensor[i] = saved + h;
            const double up = loss_value();
            tensor[i] = saved - h;
            const double down = loss_value();
            tensor[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = g == grads.end() ? 0.0 : g->second[i];
            const double err = relative_error(analytic, numeric);
            ++res.checked;
            if (err > res.max_rel_error || res.worst_param.empty()) {
                res.max_rel_error = err;
                res.worst_param = name;
                res.worst_index = i;
                res.analytic = analytic;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

/// Gradient check over `instances` random OMTL problems derived from `seed`.
inline GradCheckResult gradcheck(std::uint64_t seed, int instances = 10, double lambda = 0.1) {
    GradCheckResult worst;
    for (int k = 0; k < instances; ++k) {
        RandomInstance inst = random_instance(splitmix64(seed) + static_cast<std::uint64_t>(k));
        GradCheckResult r = check_gradients(inst.model, inst.graph, inst.batch(), lambda, 1e-5, seed + k);
        worst.checked += r.checked;
        if (r.max_rel_error >= worst.max_rel_error) {
            const std::size_t checked = worst.checked;
            worst = r;
            worst.checked = checked;
        }
    }
    return worst;
}

}  // namespace omtl
