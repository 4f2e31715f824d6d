#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "omtl/autodiff.hpp"
#include "omtl/datastore.hpp"
#include "omtl/errors.hpp"
#include "omtl/model.hpp"
#include "omtl/ontology.hpp"

namespace omtl {

/// Outcome loss L1, reconstruction loss L2 and total = L1 + lambda * L2.
struct LossBreakdown {
    double l1 = 0.0;
    double l2 = 0.0;
    double lambda = 0.0;
    double total = 0.0;
    std::map<std::pair<std::string, std::string>, double> outcome_terms;  // (node, outcome)
    std::map<std::string, double> recon_terms;                           // node

    void finish() { total = l1 + lambda * l2; }
};

inline void check_lambda(double lambda) {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("loss: lambda must be a finite value >= 0");
}

/// Level weights ((level + 1) / depth)^f before normalization.
inline std::map<std::string, double> raw_reward_weights(const OntologyGraph& graph, double f) {
    if (!(f >= -1.0 && f <= 1.0)) throw ValidationError("reward: f must lie in [-1, 1]");
    std::map<std::string, double> w;
    const double depth = static_cast<double>(graph.depth());
    for (const auto& [id, level] : graph.levels()) w[id] = std::pow((level + 1) / depth, f);
    return w;
}

/// Level weights rescaled to mean 1 over the graph's nodes.
inline std::map<std::string, double> reward_weights(const OntologyGraph& graph, double f) {
    auto w = raw_reward_weights(graph, f);
    if (w.empty()) return w;
    double mean = 0.0;
    for (const auto& [_, v] : w) mean += v;
    mean /= static_cast<double>(w.size());
    for (auto& [_, v] : w) v /= mean;
    return w;
}

/// Supervision of one shared outcome at every node, weighted by level.
struct RewardScheme {
    std::string outcome;
    double f = 0.0;
    std::map<std::string, double> weights;

    static RewardScheme make(const OntologyGraph& graph, std::string outcome, double f) {
        return RewardScheme{std::move(outcome), f, reward_weights(graph, f)};
    }
    double weight(const std::string& node) const {
        auto it = weights.find(node);
        if (it == weights.end()) throw ValidationError("reward: no weight for node '" + node + "'");
        return it->second;
    }
};

namespace detail {

inline double squared_residual(const std::vector<double>& recon, const std::vector<double>& x) {
    if (recon.size() != x.size()) throw ShapeError("loss: reconstruction and input sizes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (recon[i] - x[i]) * (recon[i] - x[i]);
    return s;
}

/// Outcomes a node is supervised on. Core outcomes always; the scheme's
/// outcome at every node when a scheme is given.
inline std::vector<std::pair<std::string, double>> supervised_outcomes(const OntologyGraph& graph, const std::string& node,
                                                                       const RewardScheme* scheme) {
    std::vector<std::pair<std::string, double>> out;
    const auto& n = graph.node(node);
    if (n.is_core) {
        for (const auto& o : n.outcomes) {
            if (scheme && o == scheme->outcome) continue;
            out.emplace_back(o, 1.0);
        }
    }
    if (scheme) out.emplace_back(scheme->outcome, scheme->weight(node));
    return out;
}

inline LossBreakdown record_loss(const ForwardResult& fr, const Record& record, const OntologyGraph& graph,
                                 double lambda, const RewardScheme* scheme) {
    check_lambda(lambda);
    LossBreakdown lb;
    lb.lambda = lambda;
    for (const auto& id : fr.order) {
        const NodeOutput& out = fr.nodes.at(id);
        const double r = squared_residual(out.reconstruction, record.features);
        lb.recon_terms[id] = r;
        lb.l2 += r;
        for (const auto& [o, w] : supervised_outcomes(graph, id, scheme)) {
            auto label = record.labels.find(o);
            if (label == record.labels.end()) continue;
            auto logit = out.logits.find(o);
            if (logit == out.logits.end()) {
                throw ValidationError("loss: node '" + id + "' has no prediction for outcome '" + o + "'");
            }
            const double term = w * ops::bce_from_logit(logit->second, label->second);
            lb.outcome_terms[{id, o}] = term;
            lb.l1 += term;
        }
    }
    lb.finish();
    return lb;
}

}  // namespace detail

/// Masked multi-task loss of one record: outcome loss over labeled outcomes
/// of expressed core nodes, reconstruction loss over all expressed nodes.
inline LossBreakdown masked_loss(const ForwardResult& fr, const Record& record, const OntologyGraph& graph,
                                 double lambda) {
    return detail::record_loss(fr, record, graph, lambda, nullptr);
}

/// Like masked_loss, but the scheme's outcome is supervised at every
/// expressed node with weight w_k.
inline LossBreakdown shaped_loss(const ForwardResult& fr, const Record& record, const OntologyGraph& graph,
                                 double lambda, const RewardScheme& scheme) {
    return detail::record_loss(fr, record, graph, lambda, &scheme);
}

/// Differentiable batch loss (mean over records) plus its value breakdown.
struct BatchLoss {
    Var total;
    double l1 = 0.0;  // batch means
    double l2 = 0.0;
    double value = 0.0;
};

/// Builds the batch objective on the trace's tape. With lambda == 0 the
/// reconstruction heads are left off the tape entirely.
inline BatchLoss batch_loss(Tape& tape, const BatchTrace& trace, std::span<const Record* const> batch,
                            const OntologyGraph& graph, const OmtlModel& model, double lambda,
                            const RewardScheme* scheme = nullptr) {
    check_lambda(lambda);
    std::vector<Var> outcome_terms;
    std::vector<Var> recon_terms;
    double l1 = 0.0, l2 = 0.0;
    const std::size_t d = model.spec.feature_dim;
    for (const auto& id : trace.order) {
        const NodeTrace& node = trace.nodes.at(id);
        const DenseTensor& rec = node.recon.value();
        DenseTensor target(node.rows.size(), d);
        for (std::size_t k = 0; k < node.rows.size(); ++k) {
            const auto& f = batch[node.rows[k]]->features;
            std::copy(f.begin(), f.end(), target.data().begin() + static_cast<std::ptrdiff_t>(k * d));
        }
        double sq = 0.0;
        for (std::size_t i = 0; i < rec.size(); ++i) sq += (rec[i] - target[i]) * (rec[i] - target[i]);
        l2 += sq;
        if (lambda > 0.0) recon_terms.push_back(ops::squared_error(node.recon, target));

        for (const auto& [o, w] : detail::supervised_outcomes(graph, id, scheme)) {
            if (!model.has_head(id, o)) {
                throw ValidationError("loss: node '" + id + "' has no head for outcome '" + o + "'");
            }
            std::vector<std::size_t> pos;
            std::vector<double> labels;
            for (std::size_t k = 0; k < node.rows.size(); ++k) {
                const auto& lab = batch[node.rows[k]]->labels;
                if (auto it = lab.find(o); it != lab.end()) {
                    pos.push_back(k);
                    labels.push_back(it->second);
                }
            }
            if (pos.empty()) continue;
            auto lit = node.logits.find(o);
            if (lit == node.logits.end()) throw NumericalError("loss: missing logits for '" + id + "/" + o + "'");
            Var logits = pos.size() == node.rows.size() ? lit->second : ops::gather_rows(lit->second, pos);
            Var term = ops::bce_with_logits(logits, labels, std::vector<double>(labels.size(), w));
            l1 += term.value().item();
            outcome_terms.push_back(term);
        }
    }
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    std::vector<Var> parts;
    if (!outcome_terms.empty()) parts.push_back(ops::sum(outcome_terms));
    if (!recon_terms.empty()) parts.push_back(ops::scale(ops::sum(recon_terms), lambda));
    BatchLoss out;
    out.l1 = l1 * inv_b;
    out.l2 = l2 * inv_b;
    out.value = out.l1 + lambda * out.l2;
    out.total = parts.empty() ? tape.constant(DenseTensor::scalar(0.0)) : ops::scale(ops::sum(parts), inv_b);
    return out;
}

}  // namespace omtl
