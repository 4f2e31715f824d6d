#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omtl/adam.hpp"
#include "omtl/datastore.hpp"
#include "omtl/errors.hpp"
#include "omtl/model.hpp"
#include "omtl/objective.hpp"
#include "omtl/ontology.hpp"

namespace omtl {

struct TrainConfig {
    std::size_t batch_size = 64;
    double lr = 0.001;
    double dropout = 0.5;
    double lambda = 0.0001;
    int num_experts = 3;
    std::size_t repr_dim = 5;
    int max_epochs = 100;
    int patience = 10;
    double validation_fraction = 0.1;
    std::uint64_t seed = 0;
    Variant variant = Variant::OMTL;
    bool hierarchy_finetune = true;
    /// Level-weighted supervision of `reward_outcome` at every node during
    /// the hierarchy fine-tuning phase.
    std::optional<double> reward_f;
    std::string reward_outcome = "mortality";

    void validate() const {
        if (batch_size < 1) throw ValidationError("config: batch_size must be at least 1");
        check_lambda(lambda);
        if (!(lr > 0.0)) throw ValidationError("config: lr must be positive");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("config: dropout must lie in [0, 1)");
        if (max_epochs < 0 || patience < 1) throw ValidationError("config: max_epochs >= 0 and patience >= 1 required");
        if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
            throw ValidationError("config: validation_fraction must lie in [0, 1)");
        }
        if (reward_f && !(*reward_f >= -1.0 && *reward_f <= 1.0)) throw ValidationError("config: reward_f must lie in [-1, 1]");
    }

    ModelSpec model_spec(std::size_t feature_dim) const {
        ModelSpec s = ModelSpec::for_variant(variant, feature_dim, num_experts);
        s.repr_dim = repr_dim;
        s.dropout = dropout;
        if (reward_f && variant == Variant::OMTL) s.shared_outcome = reward_outcome;
        return s;
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"batch_size", batch_size},
                         {"lr", lr},
                         {"dropout", dropout},
                         {"lambda", lambda},
                         {"num_experts", num_experts},
                         {"repr_dim", repr_dim},
                         {"max_epochs", max_epochs},
                         {"patience", patience},
                         {"validation_fraction", validation_fraction},
                         {"seed", seed},
                         {"variant", to_string(variant)},
                         {"hierarchy_finetune", hierarchy_finetune},
                         {"reward_outcome", reward_outcome}};
        j["reward_f"] = reward_f ? nlohmann::json(*reward_f) : nlohmann::json(nullptr);
        return j;
    }

    /// All fields optional; unknown fields are rejected.
    static TrainConfig from_json(const nlohmann::json& j) {
        static const std::set<std::string> known{
            "batch_size", "lr",       "dropout", "lambda",  "num_experts",        "repr_dim",     "max_epochs",
            "patience",   "validation_fraction", "seed",    "variant",            "hierarchy_finetune",
            "reward_f",   "reward_outcome"};
        if (!j.is_object()) throw ValidationError("config: expected a JSON object");
        for (const auto& [key, _] : j.items()) {
            if (!known.contains(key)) throw ValidationError("config: unknown field '" + key + "'");
        }
        TrainConfig c;
        try {
            c.batch_size = j.value("batch_size", c.batch_size);
            c.lr = j.value("lr", c.lr);
            c.dropout = j.value("dropout", c.dropout);
            c.lambda = j.value("lambda", c.lambda);
            c.num_experts = j.value("num_experts", c.num_experts);
            c.repr_dim = j.value("repr_dim", c.repr_dim);
            c.max_epochs = j.value("max_epochs", c.max_epochs);
            c.patience = j.value("patience", c.patience);
            c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
            c.seed = j.value("seed", c.seed);
            if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
            c.hierarchy_finetune = j.value("hierarchy_finetune", c.hierarchy_finetune);
            if (j.contains("reward_f") && !j.at("reward_f").is_null()) c.reward_f = j.at("reward_f").get<double>();
            c.reward_outcome = j.value("reward_outcome", c.reward_outcome);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("config: ") + e.what());
        }
        c.validate();
        return c;
    }
};

struct EpochEntry {
    std::string phase;
    int epoch = 0;  // 0 = before any update
    double train_l1 = 0.0, train_l2 = 0.0, train_total = 0.0;
    double val_l1 = 0.0, val_l2 = 0.0, val_total = 0.0;
};

struct TrainLog {
    std::vector<EpochEntry> epochs;
    std::map<std::string, int> best_epoch;    // phase -> epoch of the returned snapshot
    std::map<std::string, double> best_val;   // phase -> its validation total
    std::map<std::string, double> best_val_l1;
    std::set<std::string> trained_ids;        // records that produced gradients
    std::set<std::string> validation_ids;
    std::optional<bool> frozen_intact;        // phase-2 freeze audit (OMTL only)
    double wall_seconds = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json e = nlohmann::json::array();
        for (const auto& x : epochs) {
            e.push_back({{"phase", x.phase},
                         {"epoch", x.epoch},
                         {"train", {{"l1", x.train_l1}, {"l2", x.train_l2}, {"total", x.train_total}}},
                         {"validation", {{"l1", x.val_l1}, {"l2", x.val_l2}, {"total", x.val_total}}}});
        }
        nlohmann::json j{{"epochs", e}, {"best_epoch", best_epoch}, {"best_validation_total", best_val},
                         {"best_validation_l1", best_val_l1}, {"trained_records", trained_ids.size()},
                         {"validation_records", validation_ids.size()}};
        j["frozen_intact"] = frozen_intact ? nlohmann::json(*frozen_intact) : nlohmann::json(nullptr);
        return j;
    }
};

struct LossSummary {
    double l1 = 0.0, l2 = 0.0, total = 0.0;
};

/// Mean loss over `records` in evaluation mode.
inline LossSummary evaluate_loss(const OmtlModel& model, const OntologyGraph& graph, const std::vector<const Record*>& records,
                                 double lambda, const RewardScheme* scheme, std::size_t batch_size = 256) {
    LossSummary s;
    if (records.empty()) return s;
    Rng unused(0);
    for (std::size_t start = 0; start < records.size(); start += batch_size) {
        const std::size_t end = std::min(records.size(), start + batch_size);
        std::span<const Record* const> batch(records.data() + start, end - start);
        Tape tape;
        BatchTrace trace = forward_batch(model, graph, batch, Mode::eval, tape, unused);
        BatchLoss bl = batch_loss(tape, trace, batch, graph, model, lambda, scheme);
        const double w = static_cast<double>(batch.size());
        s.l1 += bl.l1 * w;
        s.l2 += bl.l2 * w;
    }
    const double n = static_cast<double>(records.size());
    s.l1 /= n;
    s.l2 /= n;
    s.total = s.l1 + lambda * s.l2;
    return s;
}

/// Training records split into a fitting part and a stratified validation part.
struct TrainSplit {
    std::vector<const Record*> fit;
    std::vector<const Record*> validation;
};

inline TrainSplit split_validation(const Dataset& data, const OntologyGraph& graph, const TrainConfig& config) {
    TrainSplit split;
    const int k = config.validation_fraction > 0.0
                      ? std::max(2, static_cast<int>(std::lround(1.0 / config.validation_fraction)))
                      : 0;
    if (k == 0 || data.labeled_count() < static_cast<std::size_t>(2 * k)) {
        for (const auto& r : data.records) split.fit.push_back(&r);
        return split;
    }
    const FoldPlan plan = make_folds(data, graph, k, splitmix64(config.seed) ^ fnv1a64("validation"));
    for (const auto& r : data.records) (plan.fold_of(r.id) == 0 ? split.validation : split.fit).push_back(&r);
    return split;
}

using TrainablePredicate = std::function<bool(const std::string&)>;

/// One optimization phase with Adam, shuffled mini-batches and early stopping
/// on validation total loss. The returned parameters are the best snapshot
/// seen, including the starting point.
inline void run_phase(OmtlModel& model, const OntologyGraph& graph, const TrainSplit& split, const TrainConfig& config,
                      const std::string& phase, const TrainablePredicate& trainable, const RewardScheme* scheme,
                      TrainLog& log) {
    Adam adam(AdamConfig{config.lr});
    Rng shuffle_rng = Rng::stream(config.seed, "shuffle/" + phase);
    Rng dropout_rng = Rng::stream(config.seed, "dropout/" + phase);
    const bool early_stop = !split.validation.empty();

    auto validate = [&](EpochEntry& e) {
        const auto& pool = early_stop ? split.validation : split.fit;
        const LossSummary v = evaluate_loss(model, graph, pool, config.lambda, scheme);
        e.val_l1 = v.l1;
        e.val_l2 = v.l2;
        e.val_total = v.total;
    };

    EpochEntry start{phase, 0};
    validate(start);
    log.epochs.push_back(start);
    double best = start.val_total;
    double best_l1 = start.val_l1;
    int best_epoch = 0;
    ParameterMap best_params = model.params;
    int since_best = 0;

    std::vector<const Record*> order = split.fit;
    for (int epoch = 1; epoch <= config.max_epochs && !order.empty(); ++epoch) {
        shuffle_rng.shuffle(order);
        EpochEntry entry{phase, epoch};
        double seen = 0.0;
        for (std::size_t start_i = 0, b = 0; start_i < order.size(); start_i += config.batch_size, ++b) {
            const std::size_t end = std::min(order.size(), start_i + config.batch_size);
            std::span<const Record* const> batch(order.data() + start_i, end - start_i);
            try {
                Tape tape;
                BatchTrace trace = forward_batch(model, graph, batch, Mode::train, tape, dropout_rng);
                BatchLoss loss = batch_loss(tape, trace, batch, graph, model, config.lambda, scheme);
                if (!std::isfinite(loss.value)) throw NumericalError("non-finite loss");
                Gradients grads = tape.backward(loss.total);
                adam.step(model.params, grads, trainable);
                const double w = static_cast<double>(batch.size());
                entry.train_l1 += loss.l1 * w;
                entry.train_l2 += loss.l2 * w;
                seen += w;
            } catch (const NumericalError& e) {
                throw NumericalError(phase + " epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                                     " (first record '" + batch[0]->id + "'): " + e.what());
            }
            for (const Record* r : batch) log.trained_ids.insert(r->id);
        }
        entry.train_l1 /= seen;
        entry.train_l2 /= seen;
        entry.train_total = entry.train_l1 + config.lambda * entry.train_l2;
        validate(entry);
        log.epochs.push_back(entry);
        if (entry.val_total < best) {
            best = entry.val_total;
            best_l1 = entry.val_l1;
            best_epoch = epoch;
            best_params = model.params;
            since_best = 0;
        } else if (early_stop && ++since_best >= config.patience) {
            break;
        }
    }
    model.params = std::move(best_params);
    log.best_epoch[phase] = best_epoch;
    log.best_val[phase] = best;
    log.best_val_l1[phase] = best_l1;
}

namespace detail {

inline void record_validation(const TrainSplit& split, TrainLog& log) {
    for (const Record* r : split.validation) log.validation_ids.insert(r->id);
}

inline std::optional<RewardScheme> scheme_for(const TrainConfig& config, const OntologyGraph& graph) {
    if (!config.reward_f) return std::nullopt;
    return RewardScheme::make(graph, config.reward_outcome, *config.reward_f);
}

}  // namespace detail

/// First OMTL phase: experts, expert gates and node heads, with the
/// hierarchy switched off.
inline void train_phase1(OmtlModel& model, const OntologyGraph& graph, const Dataset& data, const TrainConfig& config,
                         TrainLog& log) {
    if (model.spec.variant != Variant::OMTL) throw ValidationError("train_phase1: model is not an OMTL model");
    config.validate();
    const TrainSplit split = split_validation(data, graph, config);
    detail::record_validation(split, log);
    model.hierarchy_active = false;
    run_phase(model, graph, split, config, "phase1", [](const std::string& n) { return !names::is_gate_h(n); },
              nullptr, log);
}

/// Second OMTL phase: hierarchy on, experts and expert gates frozen; parent
/// gates, representation, reconstruction and outcome heads are fine-tuned.
inline void train_phase2(OmtlModel& model, const OntologyGraph& graph, const Dataset& data, const TrainConfig& config,
                         TrainLog& log) {
    if (model.spec.variant != Variant::OMTL) throw ValidationError("train_phase2: model is not an OMTL model");
    config.validate();
    const TrainSplit split = split_validation(data, graph, config);
    detail::record_validation(split, log);
    init_parent_gates(model, graph, config.seed);
    model.hierarchy_active = true;
    const auto scheme = detail::scheme_for(config, graph);
    ParameterMap frozen;
    for (const auto& [name, t] : model.params) {
        if (names::is_expert(name) || names::is_gate_g(name)) frozen.emplace(name, t);
    }
    run_phase(
        model, graph, split, config, "phase2",
        [](const std::string& n) { return !names::is_expert(n) && !names::is_gate_g(n); },
        scheme ? &*scheme : nullptr, log);
    bool intact = true;
    for (const auto& [name, t] : frozen) intact = intact && model.params.at(name) == t;
    log.frozen_intact = intact;
}

/// Single-phase training of SB, MOE or MMOE with the masked loss.
inline void train_baseline(OmtlModel& model, const OntologyGraph& graph, const Dataset& data, const TrainConfig& config,
                           TrainLog& log) {
    if (model.spec.variant == Variant::OMTL) throw ValidationError("train_baseline: OMTL trains in two phases");
    config.validate();
    const TrainSplit split = split_validation(data, graph, config);
    detail::record_validation(split, log);
    run_phase(model, graph, split, config, "phase1", [](const std::string&) { return true; }, nullptr, log);
}

struct TrainedModel {
    OmtlModel model;
    TrainLog log;
};

/// Builds and trains `config.variant` end to end.
inline TrainedModel train_model(const OntologyGraph& graph, const Dataset& data, const TrainConfig& config) {
    config.validate();
    const auto t0 = std::chrono::steady_clock::now();
    TrainedModel out{build_model(config.model_spec(data.feature_dim), graph, config.seed), {}};
    if (config.variant == Variant::OMTL) {
        train_phase1(out.model, graph, data, config, out.log);
        if (config.hierarchy_finetune) train_phase2(out.model, graph, data, config, out.log);
        out.model.hierarchy_active = config.hierarchy_finetune;
    } else {
        train_baseline(out.model, graph, data, config, out.log);
    }
    out.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace omtl
