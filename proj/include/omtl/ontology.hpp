#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "omtl/errors.hpp"
#include "omtl/rng.hpp"

namespace omtl {

struct ConceptNode {
    std::string id;
    std::string concept_code;
    bool is_core = false;
    std::vector<std::string> outcomes;
};

struct Edge {
    std::string parent;
    std::string child;
};

using LevelMap = std::map<std::string, int>;

namespace detail {

inline std::string describe_cycle(const std::vector<std::string>& path) {
    std::string s;
    for (const auto& id : path) s += id + " -> ";
    return s + path.front();
}

/// Finds one directed cycle, or returns an empty vector.
inline std::vector<std::string> find_cycle(const std::map<std::string, std::vector<std::string>>& children) {
    enum class Mark { white, grey, black };
    std::map<std::string, Mark> mark;
    for (const auto& [id, _] : children) mark[id] = Mark::white;
    std::vector<std::string> stack;
    std::vector<std::string> cycle;

    std::function<bool(const std::string&)> visit = [&](const std::string& u) {
        mark[u] = Mark::grey;
        stack.push_back(u);
        for (const auto& v : children.at(u)) {
            if (mark[v] == Mark::grey) {
                auto it = std::find(stack.begin(), stack.end(), v);
                cycle.assign(it, stack.end());
                return true;
            }
            if (mark[v] == Mark::white && visit(v)) return true;
        }
        stack.pop_back();
        mark[u] = Mark::black;
        return false;
    };
    for (const auto& [id, _] : children) {
        if (mark[id] == Mark::white && visit(id)) return cycle;
    }
    return {};
}

}  // namespace detail

/// Longest-path-from-roots level of every node. Roots sit at level 0.
inline LevelMap compute_levels(const std::vector<std::string>& ids, const std::vector<Edge>& edges) {
    std::map<std::string, std::vector<std::string>> children;
    std::map<std::string, int> indegree;
    for (const auto& id : ids) {
        children[id];
        indegree[id] = 0;
    }
    for (const auto& e : edges) {
        if (!children.contains(e.parent) || !children.contains(e.child)) {
            throw ValidationError("edge " + e.parent + " -> " + e.child + " references an unknown node");
        }
        children[e.parent].push_back(e.child);
        ++indegree[e.child];
    }
    for (auto& [_, c] : children) std::sort(c.begin(), c.end());

    LevelMap level;
    std::set<std::string> ready;
    for (const auto& [id, deg] : indegree) {
        if (deg == 0) {
            ready.insert(id);
            level[id] = 0;
        }
    }
    std::size_t visited = 0;
    while (!ready.empty()) {
        const std::string u = *ready.begin();
        ready.erase(ready.begin());
        ++visited;
        for (const auto& v : children[u]) {
            level[v] = std::max(level.contains(v) ? level[v] : 0, level[u] + 1);
            if (--indegree[v] == 0) ready.insert(v);
        }
    }
    if (visited != ids.size()) {
        throw ValidationError("graph has a cycle: " + detail::describe_cycle(detail::find_cycle(children)));
    }
    return level;
}

/// Validated concept DAG. Immutable after construction.
class OntologyGraph {
public:
    OntologyGraph() = default;

    /// Checks ids, edges, acyclicity and outcome placement, then computes
    /// levels. When `known_outcomes` is given every outcome name must be in it.
    static OntologyGraph build(std::vector<ConceptNode> nodes, std::vector<Edge> edges,
                               const std::optional<std::set<std::string>>& known_outcomes = std::nullopt) {
        OntologyGraph g;
        std::vector<std::string> ids;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            const auto& n = nodes[i];
            if (n.id.empty()) throw ValidationError("node " + std::to_string(i) + " has an empty id");
            if (!g.index_.emplace(n.id, i).second) throw ValidationError("duplicate node id '" + n.id + "'");
            if (!n.outcomes.empty() && !n.is_core) {
                throw ValidationError("node '" + n.id + "' carries outcomes but is not a core node");
            }
            std::set<std::string> seen;
            for (const auto& o : n.outcomes) {
                if (o.empty()) throw ValidationError("node '" + n.id + "' has an empty outcome name");
                if (known_outcomes && !known_outcomes->contains(o)) {
                    throw ValidationError("node '" + n.id + "' has unknown outcome '" + o + "'");
                }
                if (!seen.insert(o).second) {
                    throw ValidationError("node '" + n.id + "' lists outcome '" + o + "' twice");
                }
            }
            ids.push_back(n.id);
        }
        std::set<std::pair<std::string, std::string>> seen_edges;
        for (const auto& e : edges) {
            if (!g.index_.contains(e.parent)) throw ValidationError("edge references unknown parent '" + e.parent + "'");
            if (!g.index_.contains(e.child)) throw ValidationError("edge references unknown child '" + e.child + "'");
            if (e.parent == e.child) throw ValidationError("graph has a cycle: " + e.parent + " -> " + e.parent);
            if (!seen_edges.emplace(e.parent, e.child).second) {
                throw ValidationError("duplicate edge " + e.parent + " -> " + e.child);
            }
        }
        g.levels_ = compute_levels(ids, edges);
        g.nodes_ = std::move(nodes);
        std::sort(edges.begin(), edges.end(),
                  [](const Edge& a, const Edge& b) { return std::tie(a.parent, a.child) < std::tie(b.parent, b.child); });
        g.edges_ = std::move(edges);
        for (const auto& id : ids) {
            g.parents_[id];
            g.children_[id];
        }
        for (const auto& e : g.edges_) {
            g.parents_[e.parent];
            g.parents_[e.child].push_back(e.parent);
            g.children_[e.parent].push_back(e.child);
        }
        for (auto& [_, p] : g.parents_) std::sort(p.begin(), p.end());
        for (auto& [_, c] : g.children_) std::sort(c.begin(), c.end());
        g.order_ = ids;
        std::sort(g.order_.begin(), g.order_.end(), [&](const std::string& a, const std::string& b) {
            return std::pair(g.levels_.at(a), a) < std::pair(g.levels_.at(b), b);
        });
        for (const auto& [_, l] : g.levels_) g.depth_ = std::max(g.depth_, l + 1);
        return g;
    }

    const std::vector<ConceptNode>& nodes() const { return nodes_; }
    const std::vector<Edge>& edges() const { return edges_; }
    std::size_t size() const { return nodes_.size(); }
    bool contains(const std::string& id) const { return index_.contains(id); }

    const ConceptNode& node(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw ValidationError("unknown node id '" + id + "'");
        return nodes_[it->second];
    }
    /// Parents sorted by id; this order indexes the parent gate.
    const std::vector<std::string>& parents(const std::string& id) const { return lookup(parents_, id); }
    const std::vector<std::string>& children(const std::string& id) const { return lookup(children_, id); }
    int level(const std::string& id) const {
        auto it = levels_.find(id);
        if (it == levels_.end()) throw ValidationError("unknown node id '" + id + "'");
        return it->second;
    }
    const LevelMap& levels() const { return levels_; }
    /// Max level + 1; zero for an empty graph.
    int depth() const { return depth_; }
    /// Nodes by nondecreasing level, ties broken by id.
    const std::vector<std::string>& order() const { return order_; }

    std::vector<std::string> core_ids() const {
        std::vector<std::string> out;
        for (const auto& id : order_) {
            if (node(id).is_core) out.push_back(id);
        }
        return out;
    }

    std::set<std::string> outcome_names() const {
        std::set<std::string> out;
        for (const auto& n : nodes_) out.insert(n.outcomes.begin(), n.outcomes.end());
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json nodes = nlohmann::json::array();
        std::vector<std::string> ids = order_;
        std::sort(ids.begin(), ids.end());
        for (const auto& id : ids) {
            const auto& n = node(id);
            nodes.push_back({{"id", n.id}, {"concept", n.concept_code}, {"core", n.is_core}, {"outcomes", n.outcomes}});
        }
        nlohmann::json edges = nlohmann::json::array();
        for (const auto& e : edges_) edges.push_back({{"parent", e.parent}, {"child", e.child}});
        return {{"nodes", nodes}, {"edges", edges}};
    }

    /// Hex FNV-1a of the canonical JSON form.
    std::string hash() const {
        std::ostringstream s;
        s << std::hex << fnv1a64(to_json().dump());
        return s.str();
    }

private:
    static const std::vector<std::string>& lookup(const std::map<std::string, std::vector<std::string>>& m,
                                                  const std::string& id) {
        auto it = m.find(id);
        if (it == m.end()) throw ValidationError("unknown node id '" + id + "'");
        return it->second;
    }

    std::vector<ConceptNode> nodes_;
    std::vector<Edge> edges_;
    std::unordered_map<std::string, std::size_t> index_;
    std::map<std::string, std::vector<std::string>> parents_;
    std::map<std::string, std::vector<std::string>> children_;
    LevelMap levels_;
    std::vector<std::string> order_;
    int depth_ = 0;
};

inline OntologyGraph parse_graph(const nlohmann::json& j,
                                 const std::optional<std::set<std::string>>& known_outcomes = std::nullopt) {
    if (!j.is_object() || !j.contains("nodes")) throw ValidationError("graph: expected an object with a 'nodes' array");
    std::vector<ConceptNode> nodes;
    std::vector<Edge> edges;
    try {
        for (const auto& n : j.at("nodes")) {
            ConceptNode c;
            c.id = n.at("id").get<std::string>();
            c.concept_code = n.value("concept", std::string{});
            c.is_core = n.value("core", false);
            if (n.contains("outcomes")) c.outcomes = n.at("outcomes").get<std::vector<std::string>>();
            nodes.push_back(std::move(c));
        }
        if (j.contains("edges")) {
            for (const auto& e : j.at("edges")) {
                edges.push_back({e.at("parent").get<std::string>(), e.at("child").get<std::string>()});
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("graph: malformed entry: ") + e.what());
    }
    return OntologyGraph::build(std::move(nodes), std::move(edges), known_outcomes);
}

inline OntologyGraph load_graph(const std::string& path,
                                const std::optional<std::set<std::string>>& known_outcomes = std::nullopt) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open graph file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("graph file '" + path + "': " + e.what());
    }
    return parse_graph(j, known_outcomes);
}

/// Smallest superset of `concepts` closed under "add all parents".
inline std::set<std::string> ancestor_closure(const OntologyGraph& graph, const std::set<std::string>& concepts) {
    std::set<std::string> closed;
    std::vector<std::string> frontier;
    for (const auto& c : concepts) {
        if (!graph.contains(c)) throw ValidationError("unknown concept id '" + c + "'");
        if (closed.insert(c).second) frontier.push_back(c);
    }
    while (!frontier.empty()) {
        const std::string u = frontier.back();
        frontier.pop_back();
        for (const auto& p : graph.parents(u)) {
            if (closed.insert(p).second) frontier.push_back(p);
        }
    }
    return closed;
}

/// Subgraph induced by `keep`. Outcomes stay only on nodes that remain core.
inline OntologyGraph induced_subgraph(const OntologyGraph& graph, const std::set<std::string>& keep,
                                      const std::set<std::string>& core) {
    std::vector<ConceptNode> nodes;
    for (const auto& id : keep) {
        ConceptNode n = graph.node(id);
        n.is_core = core.contains(id);
        if (!n.is_core) n.outcomes.clear();
        nodes.push_back(std::move(n));
    }
    std::vector<Edge> edges;
    for (const auto& e : graph.edges()) {
        if (keep.contains(e.parent) && keep.contains(e.child)) edges.push_back(e);
    }
    return OntologyGraph::build(std::move(nodes), std::move(edges));
}

struct GrowthConfig {
    std::vector<std::string> core_ids;
    int max_hops = 2;
    int iterations = 0;
    std::uint64_t seed = 0;
};

/// Grows a cohort graph from core nodes by sampling predecessors.
///
/// Each iteration starts at a uniformly chosen core node and walks up to
/// `max_hops` steps along parent edges, picking a parent uniformly at each
/// step. Every visited node joins the result; the walk ends early at a root.
inline OntologyGraph grow_from_core(const OntologyGraph& full, const GrowthConfig& config) {
    if (config.max_hops < 0) throw ValidationError("augment: max_hops must be non-negative");
    if (config.iterations < 0) throw ValidationError("augment: iterations must be non-negative");
    if (config.core_ids.empty()) throw ValidationError("augment: at least one core node is required");
    std::set<std::string> core;
    for (const auto& id : config.core_ids) {
        if (!full.contains(id)) throw ValidationError("augment: core node '" + id + "' is not in the graph");
        core.insert(id);
    }
    std::set<std::string> keep = core;
    const std::vector<std::string> starts(core.begin(), core.end());
    Rng rng = Rng::stream(config.seed, "augment");
    for (int it = 0; it < config.iterations && config.max_hops > 0; ++it) {
        std::string at = starts[rng.index(starts.size())];
        for (int hop = 0; hop < config.max_hops; ++hop) {
            const auto& parents = full.parents(at);
            if (parents.empty()) break;
            at = parents[rng.index(parents.size())];
            keep.insert(at);
        }
    }
    return induced_subgraph(full, keep, core);
}

}  // namespace omtl
