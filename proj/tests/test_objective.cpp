#include <gtest/gtest.h>

#include <numbers>

#include "omtl/gradcheck.hpp"
#include "omtl/objective.hpp"
#include "test_util.hpp"

using namespace omtl;
using omtl::testing::data_path;

namespace {

NodeOutput hand_output(std::vector<double> recon, std::map<std::string, double> logits) {
    NodeOutput n;
    n.representation = {0.0};
    n.reconstruction = std::move(recon);
    n.logits = std::move(logits);
    for (const auto& [o, z] : n.logits) n.predictions[o] = probability_from_logit(z);
    return n;
}

double bce(double p, int y) { return y == 1 ? -std::log(p) : -std::log(1.0 - p); }

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// x and y are core children of the root r.
OntologyGraph two_core() {
    return OntologyGraph::build({ConceptNode{"r", "R", false, {}}, ConceptNode{"x", "X", true, {"mortality"}},
                                 ConceptNode{"y", "Y", true, {"mortality"}}},
                                {{"r", "x"}, {"r", "y"}});
}

ForwardResult train_forward(const OmtlModel& m, const OntologyGraph& g, const Record& r) {
    Rng rng(0);
    auto eval_like = m;
    eval_like.spec.dropout = 0.0;
    return forward(eval_like, g, r, Mode::train, rng);
}

}  // namespace

TEST(MaskedLoss, TwoCoreNodesAtOneHalf) {
    auto g = two_core();
    Record rec{"r1", {1.0, 2.0}, {"r", "x", "y"}, {{"mortality", 1}}};
    ForwardResult fr;
    fr.order = {"r", "x", "y"};
    fr.nodes["r"] = hand_output({1.0, 2.0}, {});
    fr.nodes["x"] = hand_output({1.0, 2.0}, {{"mortality", 0.0}});
    fr.nodes["y"] = hand_output({1.0, 2.0}, {{"mortality", 0.0}});
    auto lb = masked_loss(fr, rec, g, 0.3);
    EXPECT_NEAR(lb.l1, 2.0 * std::numbers::ln2, 1e-12);
    EXPECT_NEAR(lb.l1, 1.3862943611, 1e-10);
    EXPECT_EQ(lb.l2, 0.0);
    EXPECT_EQ(lb.total, lb.l1);
    EXPECT_EQ(lb.outcome_terms.size(), 2u);
    EXPECT_FALSE(lb.outcome_terms.contains({"r", "mortality"}));
}

TEST(MaskedLoss, ResidualsAndAdditivity) {
    auto g = two_core();
    Record rec{"r1", {1.0, 2.0}, {"r", "x"}, {{"mortality", 0}}};
    ForwardResult fr;
    fr.order = {"r", "x"};
    fr.nodes["r"] = hand_output({1.0, 2.0}, {});  // perfect reconstruction
    fr.nodes["x"] = hand_output({0.0, 4.0}, {{"mortality", 1.5}});
    auto lb = masked_loss(fr, rec, g, 0.25);
    EXPECT_EQ(lb.recon_terms.at("r"), 0.0);
    EXPECT_DOUBLE_EQ(lb.recon_terms.at("x"), 5.0);
    EXPECT_DOUBLE_EQ(lb.l2, 5.0);
    EXPECT_NEAR(lb.l1, bce(sigmoid(1.5), 0), 1e-12);
    EXPECT_EQ(lb.total, lb.l1 + 0.25 * lb.l2);
    EXPECT_FALSE(lb.recon_terms.contains("y"));
    EXPECT_THROW(masked_loss(fr, rec, g, -1.0), ValidationError);
}

TEST(MaskedLoss, UnlabeledRecordHasNoOutcomeLoss) {
    auto g = two_core();
    Record rec{"u", {1.0, 2.0}, {"r", "x", "y"}, {}};
    ForwardResult fr;
    fr.order = {"r", "x", "y"};
    for (const auto& id : fr.order) fr.nodes[id] = hand_output({0.5, 0.5}, {});
    auto lb = masked_loss(fr, rec, g, 1.0);
    EXPECT_EQ(lb.l1, 0.0);
    EXPECT_GT(lb.l2, 0.0);
}

TEST(RewardWeights, FlatAtZero) {
    auto g = load_graph(data_path("valve.json"));
    for (const auto& [_, w] : reward_weights(g, 0.0)) EXPECT_EQ(w, 1.0);
    for (const auto& [_, w] : raw_reward_weights(g, 0.0)) EXPECT_EQ(w, 1.0);
}

TEST(RewardWeights, ChainExamples) {
    auto g = load_graph(data_path("chain.json"));
    auto up = raw_reward_weights(g, 1.0);
    EXPECT_NEAR(up.at("a"), 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(up.at("b"), 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(up.at("c"), 1.0, 1e-15);
    auto down = raw_reward_weights(g, -1.0);
    EXPECT_NEAR(down.at("a"), 3.0, 1e-15);
    EXPECT_NEAR(down.at("b"), 1.5, 1e-15);
    EXPECT_NEAR(down.at("c"), 1.0, 1e-15);
    auto norm = reward_weights(g, 1.0);
    EXPECT_NEAR(norm.at("a") + norm.at("b") + norm.at("c"), 3.0, 1e-12);
    EXPECT_NEAR(norm.at("c") / norm.at("a"), 3.0, 1e-12);
    EXPECT_THROW(raw_reward_weights(g, 1.5), ValidationError);
}

TEST(ShapedLoss, EqualsMaskedWhenFlatAndAllCore) {
    auto g = OntologyGraph::build({ConceptNode{"a", "A", true, {"mortality"}}, ConceptNode{"b", "B", true, {"mortality"}}},
                                  {{"a", "b"}});
    auto m = build_model(ModelSpec::for_variant(Variant::OMTL, 3), g, 1);
    auto scheme = RewardScheme::make(g, "mortality", 0.0);
    for (int y : {0, 1}) {
        Record rec{"r", {0.2, -0.1, 0.4}, {"a", "b"}, {{"mortality", y}}};
        auto fr = train_forward(m, g, rec);
        auto a = masked_loss(fr, rec, g, 0.1);
        auto b = shaped_loss(fr, rec, g, 0.1, scheme);
        EXPECT_EQ(a.l1, b.l1);
        EXPECT_EQ(a.total, b.total);
    }
}

TEST(ShapedLoss, RootOnlyRecordAndHandWeightedSum) {
    auto g = load_graph(data_path("chain.json"));
    auto spec = ModelSpec::for_variant(Variant::OMTL, 3);
    spec.shared_outcome = "mortality";
    auto m = build_model(spec, g, 2);
    auto scheme = RewardScheme::make(g, "mortality", 1.0);

    Record root{"r0", {0.1, 0.2, 0.3}, {"a"}, {{"mortality", 1}}};
    auto fr = train_forward(m, g, root);
    auto lb = shaped_loss(fr, root, g, 0.0, scheme);
    ASSERT_EQ(lb.outcome_terms.size(), 1u);
    const double p_root = fr.nodes.at("a").predictions.at("mortality");
    EXPECT_NEAR(lb.l1, scheme.weight("a") * bce(p_root, 1), 1e-12);

    Record two{"r1", {0.1, 0.2, 0.3}, {"a", "b"}, {{"mortality", 0}}};
    auto fr2 = train_forward(m, g, two);
    auto lb2 = shaped_loss(fr2, two, g, 0.0, scheme);
    // Hand evaluation: weights (1/3, 2/3) rescaled by the chain mean 2/3.
    const double expected = 0.5 * bce(fr2.nodes.at("a").predictions.at("mortality"), 0) +
                            1.0 * bce(fr2.nodes.at("b").predictions.at("mortality"), 0);
    EXPECT_NEAR(lb2.l1, expected, 1e-12);
    // Masked loss ignores the non-core nodes.
    EXPECT_EQ(masked_loss(fr2, two, g, 0.0).l1, 0.0);
}

TEST(ShapedLoss, NodeWithoutTheOutcomeIsAnError) {
    auto g = load_graph(data_path("chain.json"));
    auto m = build_model(ModelSpec::for_variant(Variant::OMTL, 3), g, 2);  // no shared heads
    auto scheme = RewardScheme::make(g, "mortality", 1.0);
    Record rec{"r", {0.1, 0.2, 0.3}, {"a", "b"}, {{"mortality", 1}}};
    auto fr = train_forward(m, g, rec);
    EXPECT_THROW(shaped_loss(fr, rec, g, 0.0, scheme), ValidationError);
    std::vector<const Record*> batch{&rec};
    Tape tape;
    Rng rng(0);
    auto trace = forward_batch(m, g, batch, Mode::train, tape, rng);
    EXPECT_THROW(batch_loss(tape, trace, batch, g, m, 0.0, &scheme), ValidationError);
}

TEST(BatchLoss, IsTheMeanOfRecordLosses) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        InstanceShape shape;
        shape.records = 7;
        auto inst = random_instance(seed, shape);
        inst.model.spec.dropout = 0.0;
        auto batch = inst.batch();
        Tape tape;
        Rng rng(0);
        auto trace = forward_batch(inst.model, inst.graph, batch, Mode::train, tape, rng);
        auto bl = batch_loss(tape, trace, batch, inst.graph, inst.model, 0.3);
        double l1 = 0.0, l2 = 0.0;
        for (const auto& r : inst.records) {
            auto lb = masked_loss(train_forward(inst.model, inst.graph, r), r, inst.graph, 0.3);
            EXPECT_GE(lb.l1, 0.0);
            EXPECT_GE(lb.l2, 0.0);
            l1 += lb.l1;
            l2 += lb.l2;
        }
        const double n = static_cast<double>(inst.records.size());
        EXPECT_NEAR(bl.l1, l1 / n, 1e-10);
        EXPECT_NEAR(bl.l2, l2 / n, 1e-9);
        EXPECT_NEAR(bl.total.value().item(), bl.value, 1e-10);
        EXPECT_NEAR(bl.value, bl.l1 + 0.3 * bl.l2, 1e-12);
    }
}

TEST(BatchLoss, LambdaScalesOnlyReconstruction) {
    auto inst = random_instance(4);
    inst.model.spec.dropout = 0.0;
    auto batch = inst.batch();
    auto at = [&](double lambda) {
        Tape tape;
        Rng rng(0);
        auto trace = forward_batch(inst.model, inst.graph, batch, Mode::train, tape, rng);
        return batch_loss(tape, trace, batch, inst.graph, inst.model, lambda);
    };
    auto a = at(0.1), b = at(0.4);
    EXPECT_EQ(a.l1, b.l1);
    EXPECT_EQ(a.l2, b.l2);
    EXPECT_NEAR(b.value - b.l1, 4.0 * (a.value - a.l1), 1e-12);
}

TEST(BatchLoss, UnlabeledAndUnexpressedHeadsGetZeroGradient) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto inst = random_instance(seed);
        for (auto& r : inst.records) r.labels.clear();
        // First record keeps a label so the outcome path is exercised.
        auto& first = inst.records.front();
        std::string labeled_node;
        for (const auto& c : first.concepts) {
            if (inst.graph.node(c).is_core) labeled_node = c;
        }
        std::set<std::string> live;
        if (!labeled_node.empty()) {
            first.labels["y"] = 1;
            for (const auto& c : first.concepts) {
                if (!inst.graph.node(c).is_core) continue;
                live.insert(names::head(c, "y", 'W'));
                live.insert(names::head(c, "y", 'b'));
            }
        }
        auto batch = inst.batch();
        Tape tape;
        Rng rng(1);
        auto trace = forward_batch(inst.model, inst.graph, batch, Mode::train, tape, rng);
        auto grads = tape.backward(batch_loss(tape, trace, batch, inst.graph, inst.model, 0.1).total);
        std::set<std::string> expressed;
        for (const auto& r : inst.records) expressed.insert(r.concepts.begin(), r.concepts.end());
        for (const auto& [name, t] : inst.model.params) {
            auto it = grads.find(name);
            const bool zero = it == grads.end() || std::all_of(it->second.data().begin(), it->second.data().end(),
                                                               [](double v) { return v == 0.0; });
            if (names::is_head(name) && !live.contains(name)) EXPECT_TRUE(zero) << name;
            // Nodes nobody expresses are never touched.
            const auto node = name.substr(name.find('/') + 1, name.find('/', name.find('/') + 1) - name.find('/') - 1);
            if (!names::is_expert(name) && !expressed.contains(node)) EXPECT_TRUE(zero) << name;
        }
    }
}

TEST(BatchLoss, FullyUnlabeledBatchLeavesEveryHeadAtZero) {
    auto inst = random_instance(9);
    for (auto& r : inst.records) r.labels.clear();
    auto batch = inst.batch();
    Tape tape;
    Rng rng(1);
    auto trace = forward_batch(inst.model, inst.graph, batch, Mode::train, tape, rng);
    auto bl = batch_loss(tape, trace, batch, inst.graph, inst.model, 0.1);
    EXPECT_EQ(bl.l1, 0.0);
    auto grads = tape.backward(bl.total);
    for (const auto& [name, g] : grads) {
        if (!names::is_head(name)) continue;
        for (double v : g.data()) EXPECT_EQ(v, 0.0) << name;
    }
}

TEST(BatchLoss, ZeroLambdaKeepsReconstructionOffTheTape) {
    auto inst = random_instance(5);
    auto batch = inst.batch();
    Tape tape;
    Rng rng(1);
    auto trace = forward_batch(inst.model, inst.graph, batch, Mode::train, tape, rng);
    auto grads = tape.backward(batch_loss(tape, trace, batch, inst.graph, inst.model, 0.0).total);
    for (const auto& [name, g] : grads) {
        if (!name.starts_with("recon/")) continue;
        for (double v : g.data()) EXPECT_EQ(v, 0.0) << name;
    }
}
