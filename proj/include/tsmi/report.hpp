#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsmi/causal_graph.hpp"
#include "tsmi/patching.hpp"
#include "tsmi/sae.hpp"
#include "tsmi/trainer.hpp"

// File writers for every artifact the pipeline emits. CSV files open with
// "# key: value" provenance lines; JSON files carry a "provenance" object.
// Nothing here depends on wall-clock time or thread count, so reruns are
// byte-identical.
namespace tsmi::report {

using ojson = nlohmann::ordered_json;

inline std::string fmt(double v, int digits = 17) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

inline void write_provenance_comments(std::ostream& out, const ojson& prov) {
  for (const auto& [k, v] : prov.items()) out << "# " << k << ": " << v.dump() << '\n';
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline ojson pair_json(const InstancePair& p) {
  return {{"true_class", p.true_class},
          {"clean", {{"id", p.clean.id}, {"predicted", p.clean.predicted}, {"p_true", p.clean.p_true}}},
          {"corrupt", {{"id", p.corrupt.id}, {"predicted", p.corrupt.predicted}, {"p_true", p.corrupt.p_true}}}};
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& log, const ojson& prov) {
  std::ostringstream os;
  write_provenance_comments(os, prov);
  os << "epoch,train_loss,test_acc\n";
  for (const auto& m : log) os << m.epoch << ',' << fmt(m.train_loss) << ',' << fmt(m.test_acc) << '\n';
  return os.str();
}

inline std::string confusion_csv(const EvalResult& r, const ojson& prov) {
  std::ostringstream os;
  write_provenance_comments(os, prov);
  os << "# accuracy: " << fmt(r.accuracy) << '\n';
  os << "true\\pred";
  for (std::size_t j = 0; j < r.confusion.size(); ++j) os << ',' << j;
  os << '\n';
  for (std::size_t i = 0; i < r.confusion.size(); ++i) {
    os << i;
    for (std::size_t v : r.confusion[i]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

inline std::string pairs_json(const std::vector<InstancePair>& pairs, const ojson& prov) {
  ojson j;
  j["provenance"] = prov;
  j["status"] = pairs.empty() ? "no_qualifying_pair" : "ok";
  j["criteria"] = {{"clean_p_true_gt", kCleanThreshold}, {"corrupt_p_true_lt", kCorruptThreshold}};
  j["pairs"] = ojson::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    ojson p = pair_json(pairs[i]);
    p["rank"] = i;
    j["pairs"].push_back(std::move(p));
  }
  return j.dump(2) + "\n";
}

inline std::string sweep_csv(const SweepReport& s, const ojson& prov) {
  std::ostringstream os;
  write_provenance_comments(os, prov);
  os << "granularity,target,layer,head,pos,p_orig,p_patched,delta_p,predicted_after\n";
  for (const auto& r : s.results) {
    const TapPoint& tp = r.targets.at(0);
    os << granularity_name(s.granularity) << ',' << tp.to_string() << ',' << tp.layer << ',';
    if (tp.kind == TapKind::Layer) os << ',';
    else os << tp.head << ',';
    if (tp.kind == TapKind::HeadPos) os << tp.pos;
    os << ',' << fmt(r.p_orig) << ',' << fmt(r.p_patched) << ',' << fmt(r.delta_p) << ',' << r.predicted_after << '\n';
  }
  return os.str();
}

inline ojson sweep_json_value(const SweepReport& s, const ojson& prov) {
  ojson j;
  j["provenance"] = prov;
  j["granularity"] = granularity_name(s.granularity);
  if (s.layer) j["layer"] = *s.layer;
  if (s.head) j["head"] = *s.head;
  j["results"] = ojson::array();
  double sum = 0.0;
  for (const auto& r : s.results) {
    const TapPoint& tp = r.targets.at(0);
    ojson e = {{"target", tp.to_string()}, {"layer", tp.layer}};
    if (tp.kind != TapKind::Layer) e["head"] = tp.head;
    if (tp.kind == TapKind::HeadPos) e["pos"] = tp.pos;
    e["p_orig"] = r.p_orig;
    e["p_patched"] = r.p_patched;
    e["delta_p"] = r.delta_p;
    e["predicted_after"] = r.predicted_after;
    j["results"].push_back(std::move(e));
    sum += r.delta_p;
  }
  j["sum_delta_p"] = sum;
  return j;
}

inline std::string sweep_json(const SweepReport& s, const ojson& prov) { return sweep_json_value(s, prov).dump(2) + "\n"; }

/// Position sweep plus the matching whole-head patch, for the additivity check.
inline std::string position_sweep_json(const SweepReport& s, const PatchResult& full_head, const ojson& prov) {
  ojson j = sweep_json_value(s, prov);
  j["full_head_delta_p"] = full_head.delta_p;
  j["sum_minus_full_head"] = j["sum_delta_p"].get<double>() - full_head.delta_p;
  return j.dump(2) + "\n";
}

inline std::string topk_csv(const std::vector<TopkRow>& rows, const std::vector<CriticalPatch>& ranked,
                            const ojson& prov) {
  std::ostringstream os;
  write_provenance_comments(os, prov);
  os << "k,delta_p_cumulative,p_final,added_patch,added_patch_delta_p\n";
  for (const auto& r : rows)
    os << r.k << ',' << fmt(r.delta_p) << ',' << fmt(r.p_final) << ',' << ranked.at(r.k - 1).tap.to_string() << ','
       << fmt(ranked.at(r.k - 1).delta_p) << '\n';
  return os.str();
}

inline std::string critical_csv(const std::vector<CriticalPatch>& ranked, double threshold, const ojson& prov) {
  std::ostringstream os;
  write_provenance_comments(os, prov);
  os << "# threshold: " << fmt(threshold) << '\n';
  os << "rank,target,layer,head,pos,delta_p\n";
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const auto& tp = ranked[i].tap;
    os << i + 1 << ',' << tp.to_string() << ',' << tp.layer << ',' << tp.head << ',' << tp.pos << ','
       << fmt(ranked[i].delta_p) << '\n';
  }
  return os.str();
}

inline std::string degree_csv(const CausalGraph& g, const ojson& prov) {
  const DegreeCentrality d = degree_centrality(g);
  std::ostringstream os;
  write_provenance_comments(os, prov);
  os << "node,tier,degree\n";
  for (std::size_t t = 0; t < d.timestep_out.size(); ++t) os << 'T' << t << ",timestep_out," << d.timestep_out[t] << '\n';
  for (std::size_t i = 0; i < d.head_in.size(); ++i)
    os << 'L' << i / g.heads << 'H' << i % g.heads << ",head_in," << d.head_in[i] << '\n';
  return os.str();
}

inline std::string sae_train_json(const SaeConfig& cfg, const SaeTrainResult& r, std::size_t dead,
                                  const ojson& prov) {
  ojson j;
  j["provenance"] = prov;
  j["config"] = nlohmann::json(cfg);
  j["final_loss"] = r.loss_curve.empty() ? 0.0 : r.loss_curve.back();
  j["active_fraction"] = r.active_fraction;
  j["reconstruction_mse"] = r.reconstruction_mse;
  j["input_variance"] = r.input_variance;
  j["dead_neurons"] = dead;
  j["loss_curve"] = r.loss_curve;
  return j.dump(2) + "\n";
}

inline ojson neuron_json(const NeuronReport& r) {
  ojson j = {{"neuron", r.neuron},
             {"dead", r.dead},
             {"max_activation", r.max_activation},
             {"mean_activation", r.mean_activation},
             {"active_fraction", r.active_fraction},
             {"dominant_class", r.dominant_class},
             {"dominant_share", r.dominant_share}};
  j["top"] = ojson::array();
  for (const auto& e : r.entries)
    j["top"].push_back({{"instance", e.instance}, {"timestep", e.timestep}, {"activation", e.activation}, {"label", e.label}});
  return j;
}

inline std::string steer_json(const SteerResult& r, std::size_t instance, int true_class, const ojson& prov) {
  ojson j;
  j["provenance"] = prov;
  j["instance"] = instance;
  j["true_class"] = true_class;
  j["neuron"] = r.neuron;
  j["gain"] = r.gain;
  j["probs_before"] = r.probs_before;
  j["probs_after"] = r.probs_after;
  j["delta"] = r.delta;
  return j.dump(2) + "\n";
}

}  // namespace tsmi::report
