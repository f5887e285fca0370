#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsmi/patching.hpp"

namespace tsmi {

enum class Tier { Timestep, Head, Class };

inline const char* tier_name(Tier t) {
  switch (t) {
    case Tier::Timestep: return "timestep";
    case Tier::Head: return "head";
    case Tier::Class: return "class";
  }
  return "?";
}

inline Tier tier_from_name(const std::string& s) {
  if (s == "timestep") return Tier::Timestep;
  if (s == "head") return Tier::Head;
  if (s == "class") return Tier::Class;
  throw std::invalid_argument("unknown node tier '" + s + "'");
}

/// Node identity. `a`/`b` hold (t) for timesteps, (layer, head) for heads,
/// (class) for classes.
struct GraphNode {
  Tier tier = Tier::Timestep;
  std::size_t a = 0;
  std::size_t b = 0;

  std::string id() const {
    switch (tier) {
      case Tier::Timestep: return "T" + std::to_string(a);
      case Tier::Head: return "L" + std::to_string(a) + "H" + std::to_string(b);
      case Tier::Class: return "C" + std::to_string(a);
    }
    return "?";
  }
  friend auto operator<=>(const GraphNode&, const GraphNode&) = default;
};

struct GraphEdge {
  GraphNode from;
  GraphNode to;
  double weight = 0.0;  // delta_p of the patch the edge came from
};

/// Three-tier directed graph: timesteps -> heads -> class.
struct CausalGraph {
  std::size_t seq_len = 0;
  std::size_t layers = 0;
  std::size_t heads = 0;
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();
  std::vector<GraphEdge> edges;  // timestep->head edges first, then head->class

  /// Nodes touched by at least one edge, ordered by (tier, indices).
  std::vector<GraphNode> nodes() const {
    std::set<GraphNode> s;
    for (const auto& e : edges) {
      s.insert(e.from);
      s.insert(e.to);
    }
    return {s.begin(), s.end()};
  }

  std::size_t count(Tier from, Tier to) const {
    return static_cast<std::size_t>(std::count_if(edges.begin(), edges.end(), [&](const GraphEdge& e) {
      return e.from.tier == from && e.to.tier == to;
    }));
  }

  /// Throws if an edge breaks the tier order or carries a non-finite weight.
  void validate() const {
    for (const auto& e : edges) {
      const bool th = e.from.tier == Tier::Timestep && e.to.tier == Tier::Head;
      const bool hc = e.from.tier == Tier::Head && e.to.tier == Tier::Class;
      if (!th && !hc)
        throw std::logic_error("edge " + e.from.id() + "->" + e.to.id() + " violates tier order");
      if (!std::isfinite(e.weight)) throw std::logic_error("edge " + e.from.id() + "->" + e.to.id() + " has non-finite weight");
    }
  }
};

namespace detail {

inline const PatchResult& head_result(const SweepReport& head_sweep, std::size_t layer, std::size_t head) {
  for (const auto& r : head_sweep.results)
    if (r.targets.size() == 1 && r.targets[0].kind == TapKind::Head && r.targets[0].layer == layer &&
        r.targets[0].head == head)
      return r;
  throw std::invalid_argument("head sweep has no result for L" + std::to_string(layer) + "H" + std::to_string(head));
}

inline void canonicalize(CausalGraph& g) {
  std::stable_sort(g.edges.begin(), g.edges.end(), [](const GraphEdge& x, const GraphEdge& y) {
    // timestep->head edges grouped by head then timestep, then head->class.
    auto key = [](const GraphEdge& e) {
      const bool th = e.from.tier == Tier::Timestep;
      return th ? std::make_tuple(0, e.to.a, e.to.b, e.from.a) : std::make_tuple(1, e.from.a, e.from.b, e.to.a);
    };
    return key(x) < key(y);
  });
}

inline CausalGraph empty_graph(const std::vector<SweepReport>& pos, const SweepReport& head_sweep) {
  CausalGraph g;
  for (const auto& s : pos) {
    if (s.layer) g.layers = std::max(g.layers, *s.layer + 1);
    if (s.head) g.heads = std::max(g.heads, *s.head + 1);
    g.seq_len = std::max(g.seq_len, s.results.size());
  }
  for (const auto& r : head_sweep.results)
    for (const auto& tp : r.targets) {
      g.layers = std::max(g.layers, tp.layer + 1);
      g.heads = std::max(g.heads, tp.head + 1);
    }
  return g;
}

}  // namespace detail

/// The k highest-delta_p (timestep, head) patches, each contributing
/// T_t -> LlHh (position delta_p) and LlHh -> C_true (head delta_p).
inline CausalGraph build_topk_graph(const std::vector<SweepReport>& position_sweeps, const SweepReport& head_sweep,
                                    int true_class, std::size_t k, std::ostream* notice = &std::cerr) {
  CausalGraph g = detail::empty_graph(position_sweeps, head_sweep);
  auto ranked = rank_all(position_sweeps);
  if (k > ranked.size()) {
    if (notice) *notice << "note: graph requested " << k << " patches but only " << ranked.size() << " exist; truncating\n";
    k = ranked.size();
  }
  std::set<std::pair<std::size_t, std::size_t>> heads_done;
  for (std::size_t i = 0; i < k; ++i) {
    const TapPoint& tp = ranked[i].tap;
    GraphNode head{Tier::Head, tp.layer, tp.head};
    g.edges.push_back({GraphNode{Tier::Timestep, tp.pos, 0}, head, ranked[i].delta_p});
    if (heads_done.insert({tp.layer, tp.head}).second)
      g.edges.push_back({head, GraphNode{Tier::Class, static_cast<std::size_t>(true_class), 0},
                         detail::head_result(head_sweep, tp.layer, tp.head).delta_p});
  }
  detail::canonicalize(g);
  return g;
}

/// Heads with head-level delta_p >= theta_head get a head->class edge; for
/// those heads, timesteps with position delta_p >= theta_pos get an edge in.
inline CausalGraph build_threshold_graph(const std::vector<SweepReport>& position_sweeps,
                                         const SweepReport& head_sweep, int true_class,
                                         double theta_head = 0.10, double theta_pos = 0.01) {
  CausalGraph g = detail::empty_graph(position_sweeps, head_sweep);
  for (const auto& r : head_sweep.results) {
    if (r.targets.size() != 1 || r.targets[0].kind != TapKind::Head || !(r.delta_p >= theta_head)) continue;
    const std::size_t l = r.targets[0].layer, h = r.targets[0].head;
    GraphNode head{Tier::Head, l, h};
    g.edges.push_back({head, GraphNode{Tier::Class, static_cast<std::size_t>(true_class), 0}, r.delta_p});
    for (const auto& s : position_sweeps) {
      if (s.layer != l || s.head != h) continue;
      for (const auto& pr : s.results)
        if (pr.delta_p >= theta_pos) g.edges.push_back({GraphNode{Tier::Timestep, pr.targets[0].pos, 0}, head, pr.delta_p});
    }
  }
  detail::canonicalize(g);
  return g;
}

struct DegreeCentrality {
  std::vector<std::size_t> timestep_out;  // per t in [0, T)
  std::vector<std::size_t> head_in;       // per (layer, head), layer-major; head->class edges excluded
};

inline DegreeCentrality degree_centrality(const CausalGraph& g) {
  DegreeCentrality d;
  d.timestep_out.assign(g.seq_len, 0);
  d.head_in.assign(g.layers * g.heads, 0);
  for (const auto& e : g.edges) {
    if (e.from.tier != Tier::Timestep || e.to.tier != Tier::Head) continue;
    ++d.timestep_out.at(e.from.a);
    ++d.head_in.at(e.to.a * g.heads + e.to.b);
  }
  return d;
}

struct DotStyle {
  std::string timestep_color = "#7fc97f";  // green
  std::string head_color = "#80b1d3";      // blue
  std::string class_color = "#fdb462";     // orange
};

inline std::string format_weight(double w) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", w);
  return buf;
}

inline std::string to_dot(const CausalGraph& g, const DotStyle& style = {}) {
  std::ostringstream os;
  for (const auto& [k, v] : g.provenance.items()) os << "// " << k << ": " << v.dump() << '\n';
  os << "digraph causal_graph {\n";
  os << "  rankdir=LR;\n";
  os << "  node [style=filled, shape=ellipse];\n";
  for (const auto& n : g.nodes()) {
    const char* color = n.tier == Tier::Timestep ? style.timestep_color.c_str()
                        : n.tier == Tier::Head   ? style.head_color.c_str()
                                                 : style.class_color.c_str();
    os << "  \"" << n.id() << "\" [class=\"" << tier_name(n.tier) << "\", fillcolor=\"" << color
       << "\", label=\"" << n.id() << "\"];\n";
  }
  for (const auto& e : g.edges)
    os << "  \"" << e.from.id() << "\" -> \"" << e.to.id() << "\" [label=\"" << format_weight(e.weight) << "\"];\n";
  os << "}\n";
  return os.str();
}

namespace detail {
inline nlohmann::ordered_json node_json(const GraphNode& n) {
  nlohmann::ordered_json j = {{"id", n.id()}, {"tier", tier_name(n.tier)}};
  switch (n.tier) {
    case Tier::Timestep: j["t"] = n.a; break;
    case Tier::Head: j["layer"] = n.a; j["head"] = n.b; break;
    case Tier::Class: j["class"] = n.a; break;
  }
  return j;
}

inline GraphNode node_from_json(const nlohmann::ordered_json& j) {
  GraphNode n;
  n.tier = tier_from_name(j.at("tier").get<std::string>());
  switch (n.tier) {
    case Tier::Timestep: n.a = j.at("t").get<std::size_t>(); break;
    case Tier::Head: n.a = j.at("layer").get<std::size_t>(); n.b = j.at("head").get<std::size_t>(); break;
    case Tier::Class: n.a = j.at("class").get<std::size_t>(); break;
  }
  return n;
}
}  // namespace detail

inline std::string to_json(const CausalGraph& g) {
  nlohmann::ordered_json j;
  j["provenance"] = g.provenance;
  j["seq_len"] = g.seq_len;
  j["layers"] = g.layers;
  j["heads"] = g.heads;
  j["nodes"] = nlohmann::ordered_json::array();
  for (const auto& n : g.nodes()) j["nodes"].push_back(detail::node_json(n));
  j["edges"] = nlohmann::ordered_json::array();
  for (const auto& e : g.edges)
    j["edges"].push_back({{"from", e.from.id()}, {"to", e.to.id()}, {"weight", e.weight}});
  return j.dump(2) + "\n";
}

inline CausalGraph graph_from_json(const std::string& text) {
  auto j = nlohmann::ordered_json::parse(text);
  CausalGraph g;
  g.provenance = j.value("provenance", nlohmann::ordered_json::object());
  g.seq_len = j.at("seq_len").get<std::size_t>();
  g.layers = j.at("layers").get<std::size_t>();
  g.heads = j.at("heads").get<std::size_t>();
  std::map<std::string, GraphNode> by_id;
  for (const auto& n : j.at("nodes")) by_id[n.at("id").get<std::string>()] = detail::node_from_json(n);
  for (const auto& e : j.at("edges")) {
    auto f = by_id.find(e.at("from").get<std::string>());
    auto t = by_id.find(e.at("to").get<std::string>());
    if (f == by_id.end() || t == by_id.end()) throw std::invalid_argument("graph edge references an unknown node");
    g.edges.push_back({f->second, t->second, e.at("weight").get<double>()});
  }
  g.validate();
  return g;
}

}  // namespace tsmi
