#include <gtest/gtest.h>

#include <functional>

#include "omtl/ontology.hpp"
#include "omtl/rng.hpp"
#include "test_util.hpp"

using namespace omtl;
using omtl::testing::data_path;

namespace {

ConceptNode plain(const std::string& id) { return ConceptNode{id, "X-" + id, false, {}}; }
ConceptNode core(const std::string& id) { return ConceptNode{id, "X-" + id, true, {"mortality"}}; }

OntologyGraph diamond() {
    return OntologyGraph::build({plain("a"), plain("b"), plain("c"), core("d")},
                                {{"a", "b"}, {"a", "c"}, {"b", "d"}, {"c", "d"}});
}

OntologyGraph chain4() {
    return OntologyGraph::build({plain("a"), plain("b"), plain("c"), core("d")}, {{"a", "b"}, {"b", "c"}, {"c", "d"}});
}

// Longest path ending at each node, by enumerating every path from every root.
std::map<std::string, int> brute_force_levels(const std::vector<std::string>& ids, const std::vector<Edge>& edges) {
    std::map<std::string, std::vector<std::string>> children;
    std::set<std::string> has_parent;
    for (const auto& e : edges) {
        children[e.parent].push_back(e.child);
        has_parent.insert(e.child);
    }
    std::map<std::string, int> best;
    for (const auto& id : ids) best[id] = 0;
    std::function<void(const std::string&, int)> walk = [&](const std::string& at, int len) {
        best[at] = std::max(best[at], len);
        for (const auto& c : children[at]) walk(c, len + 1);
    };
    for (const auto& id : ids) {
        if (!has_parent.contains(id)) walk(id, 0);
    }
    return best;
}

}  // namespace

TEST(Levels, SingleNode) {
    auto g = OntologyGraph::build({core("x")}, {});
    EXPECT_EQ(g.level("x"), 0);
    EXPECT_EQ(g.depth(), 1);
}

TEST(Levels, ChainFromFile) {
    auto g = load_graph(data_path("chain.json"));
    EXPECT_EQ(g.level("a"), 0);
    EXPECT_EQ(g.level("b"), 1);
    EXPECT_EQ(g.level("c"), 2);
    EXPECT_EQ(g.depth(), 3);
}

TEST(Levels, Diamond) {
    auto g = diamond();
    EXPECT_EQ(g.levels(), (LevelMap{{"a", 0}, {"b", 1}, {"c", 1}, {"d", 2}}));
    EXPECT_EQ(g.order(), (std::vector<std::string>{"a", "b", "c", "d"}));
}

TEST(Levels, ChildSitsBelowItsDeepestParent) {
    // x has parents at levels 1 and 3.
    auto g = OntologyGraph::build({plain("r"), plain("p1"), plain("q1"), plain("q2"), plain("q3"), core("x")},
                                  {{"r", "p1"}, {"r", "q1"}, {"q1", "q2"}, {"q2", "q3"}, {"p1", "x"}, {"q3", "x"}});
    EXPECT_EQ(g.level("p1"), 1);
    EXPECT_EQ(g.level("q3"), 3);
    EXPECT_EQ(g.level("x"), 4);
}

TEST(Levels, RandomDagsMatchBruteForce) {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng.index(20));
        std::vector<std::string> ids;
        std::vector<ConceptNode> nodes;
        // Random labels so that id order and topological order disagree.
        std::vector<int> perm(n);
        for (int i = 0; i < n; ++i) perm[i] = i;
        rng.shuffle(perm);
        for (int i = 0; i < n; ++i) {
            ids.push_back("v" + std::to_string(perm[i]));
            nodes.push_back(plain(ids.back()));
        }
        std::vector<Edge> edges;
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < j; ++i)
                if (rng.bernoulli(0.2)) edges.push_back({ids[i], ids[j]});
        auto g = OntologyGraph::build(nodes, edges);
        const auto oracle = brute_force_levels(ids, edges);
        for (const auto& id : ids) ASSERT_EQ(g.level(id), oracle.at(id));
        for (const auto& e : edges) ASSERT_LT(g.level(e.parent), g.level(e.child));
        int depth = 0;
        for (const auto& [_, l] : oracle) depth = std::max(depth, l + 1);
        EXPECT_EQ(g.depth(), depth);
        for (std::size_t i = 1; i < g.order().size(); ++i) {
            const auto& a = g.order()[i - 1];
            const auto& b = g.order()[i];
            ASSERT_TRUE(std::pair(g.level(a), a) < std::pair(g.level(b), b));
        }
    }
}

TEST(Validation, CycleIsNamed) {
    try {
        load_graph(data_path("cycle.json"));
        FAIL() << "expected a ValidationError";
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("cycle"), std::string::npos);
        EXPECT_NE(msg.find("a"), std::string::npos);
        EXPECT_NE(msg.find("->"), std::string::npos);
    }
    EXPECT_THROW(compute_levels({"a", "b"}, {{"a", "b"}, {"b", "a"}}), ValidationError);
}

TEST(Validation, StructuralErrors) {
    EXPECT_THROW(OntologyGraph::build({plain("a"), plain("a")}, {}), ValidationError);
    EXPECT_THROW(OntologyGraph::build({plain("a")}, {{"a", "zz"}}), ValidationError);
    EXPECT_THROW(OntologyGraph::build({plain("a")}, {{"a", "a"}}), ValidationError);
    EXPECT_THROW(OntologyGraph::build({plain("a"), plain("b")}, {{"a", "b"}, {"a", "b"}}), ValidationError);
    EXPECT_THROW(OntologyGraph::build({ConceptNode{"a", "", false, {"mortality"}}}, {}), ValidationError);
}

TEST(Validation, UnknownOutcomeName) {
    EXPECT_NO_THROW(load_graph(data_path("chain.json"), std::set<std::string>{"mortality"}));
    EXPECT_THROW(load_graph(data_path("chain.json"), std::set<std::string>{"sepsis"}), ValidationError);
}

TEST(Validation, MalformedFiles) {
    EXPECT_THROW(load_graph(data_path("does_not_exist.json")), ValidationError);
    EXPECT_THROW(parse_graph(nlohmann::json::parse(R"({"nodes": [{"core": true}]})")), ValidationError);
    EXPECT_THROW(parse_graph(nlohmann::json::parse(R"([1, 2])")), ValidationError);
}

TEST(Fixture, ValveGraph) {
    auto g = load_graph(data_path("valve.json"));
    EXPECT_EQ(g.size(), 7u);
    const auto core = g.core_ids();
    EXPECT_EQ(std::set<std::string>(core.begin(), core.end()),
              (std::set<std::string>{"mitral_valve_stenosis", "rheumatic_heart_valve_disease"}));
    EXPECT_EQ(g.parents("rheumatic_heart_valve_disease"),
              (std::vector<std::string>{"heart_valve_disorder", "rheumatic_heart_disease"}));
    EXPECT_EQ(g.parents("mitral_valve_stenosis"), (std::vector<std::string>{"mitral_valve_disorder"}));
    EXPECT_EQ(g.parents("heart_disease"), (std::vector<std::string>{"cardiovascular_disorder"}));
    EXPECT_TRUE(g.parents("cardiovascular_disorder").empty());
    EXPECT_EQ(g.level("mitral_valve_stenosis"), 4);
    EXPECT_EQ(g.depth(), 5);
}

TEST(Serialization, JsonRoundTripKeepsHash) {
    auto g = load_graph(data_path("valve.json"));
    auto again = parse_graph(g.to_json());
    EXPECT_EQ(g.hash(), again.hash());
    EXPECT_EQ(g.to_json(), again.to_json());
}

TEST(Closure, Examples) {
    auto g = load_graph(data_path("chain.json"));
    EXPECT_EQ(ancestor_closure(g, {"c"}), (std::set<std::string>{"a", "b", "c"}));
    EXPECT_EQ(ancestor_closure(g, {"a"}), (std::set<std::string>{"a"}));
    EXPECT_EQ(ancestor_closure(diamond(), {"d"}), (std::set<std::string>{"a", "b", "c", "d"}));
    EXPECT_THROW(ancestor_closure(g, {"nope"}), ValidationError);
}

TEST(Closure, IdempotentAndMonotone) {
    auto g = load_graph(data_path("valve.json"));
    Rng rng(8);
    const auto& ids = g.order();
    for (int trial = 0; trial < 100; ++trial) {
        std::set<std::string> small, big;
        for (const auto& id : ids) {
            const bool in_small = rng.bernoulli(0.3);
            if (in_small) small.insert(id);
            if (in_small || rng.bernoulli(0.3)) big.insert(id);
        }
        const auto cs = ancestor_closure(g, small);
        EXPECT_EQ(ancestor_closure(g, cs), cs);
        const auto cb = ancestor_closure(g, big);
        EXPECT_TRUE(std::includes(cb.begin(), cb.end(), cs.begin(), cs.end()));
        for (const auto& c : cs)
            for (const auto& p : g.parents(c)) EXPECT_TRUE(cs.contains(p));
    }
}

namespace {

std::set<std::string> node_set(const OntologyGraph& g) {
    std::set<std::string> out;
    for (const auto& n : g.nodes()) out.insert(n.id);
    return out;
}

}  // namespace

TEST(Growth, NoIterationsKeepsOnlyCore) {
    auto g = chain4();
    auto out = grow_from_core(g, GrowthConfig{{"d"}, 2, 0, 1});
    EXPECT_EQ(node_set(out), (std::set<std::string>{"d"}));
    auto zero_hops = grow_from_core(g, GrowthConfig{{"d"}, 0, 500, 1});
    EXPECT_EQ(node_set(zero_hops), (std::set<std::string>{"d"}));
}

TEST(Growth, TwoHopBallOnChain) {
    auto g = chain4();
    for (int iters : {1, 2, 5}) {
        auto out = grow_from_core(g, GrowthConfig{{"d"}, 2, iters, 3});
        const auto s = node_set(out);
        EXPECT_TRUE(s.contains("d"));
        EXPECT_FALSE(s.contains("a"));
    }
    auto many = grow_from_core(g, GrowthConfig{{"d"}, 2, 200, 3});
    EXPECT_EQ(node_set(many), (std::set<std::string>{"b", "c", "d"}));
    EXPECT_EQ(many.parents("d"), (std::vector<std::string>{"c"}));
    EXPECT_TRUE(many.node("d").is_core);
    EXPECT_FALSE(many.node("b").is_core);
}

TEST(Growth, MissingCoreIsAnError) {
    EXPECT_THROW(grow_from_core(chain4(), GrowthConfig{{"zz"}, 2, 3, 0}), ValidationError);
}

TEST(Growth, SubgraphWithinHopRadius) {
    Rng rng(21);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<ConceptNode> nodes;
        std::vector<Edge> edges;
        const int n = 12;
        for (int i = 0; i < n; ++i) nodes.push_back(plain("v" + std::to_string(i)));
        for (int j = 1; j < n; ++j)
            for (int i = 0; i < j; ++i)
                if (rng.bernoulli(0.25)) edges.push_back({"v" + std::to_string(i), "v" + std::to_string(j)});
        nodes[n - 1] = core("v" + std::to_string(n - 1));
        nodes[n - 2] = core("v" + std::to_string(n - 2));
        auto full = OntologyGraph::build(nodes, edges);
        const int hops = 1 + trial % 3;
        auto out = grow_from_core(full, GrowthConfig{{"v11", "v10"}, hops, 40, static_cast<std::uint64_t>(trial)});
        const auto kept = node_set(out);
        EXPECT_TRUE(kept.contains("v10") && kept.contains("v11"));
        // Reverse-edge distance to the nearest core node, by breadth-first search.
        std::map<std::string, int> dist{{"v10", 0}, {"v11", 0}};
        std::vector<std::string> frontier{"v10", "v11"};
        while (!frontier.empty()) {
            std::vector<std::string> next;
            for (const auto& v : frontier)
                for (const auto& p : full.parents(v))
                    if (!dist.contains(p)) {
                        dist[p] = dist[v] + 1;
                        next.push_back(p);
                    }
            frontier = next;
        }
        for (const auto& id : kept) {
            ASSERT_TRUE(dist.contains(id));
            EXPECT_LE(dist[id], hops);
        }
        for (const auto& e : out.edges()) {
            const auto& ps = full.parents(e.child);
            EXPECT_TRUE(std::find(ps.begin(), ps.end(), e.parent) != ps.end());
        }
        // Induced: every full edge between kept nodes survives.
        std::size_t induced = 0;
        for (const auto& e : full.edges()) induced += kept.contains(e.parent) && kept.contains(e.child);
        EXPECT_EQ(out.edges().size(), induced);
    }
}
