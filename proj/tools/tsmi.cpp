// tsmi: command-line driver for training, patching, saliency, SAE and graph
// artifacts. Run `tsmi --help` for the subcommand list.
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tsmi/tsmi.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using namespace tsmi;

namespace {

constexpr int kExitPartial = 3;

struct Options {
  std::string train_file = TSMI_SOURCE_DIR "/data/JapaneseVowels_TRAIN.ts";
  std::string test_file = TSMI_SOURCE_DIR "/data/JapaneseVowels_TEST.ts";
  std::string checkpoint = TSMI_SOURCE_DIR "/data/reference/model.tsmi";
  std::string sae_checkpoint = TSMI_SOURCE_DIR "/data/reference/sae.tsmi";
  std::string out = "tsmi_out";
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  bool no_standardize = false;

  ModelConfig model;
  TrainConfig train;
  SaeConfig sae;

  // pair selection
  std::size_t pair_rank = 0;
  std::optional<std::size_t> clean_id;
  std::optional<std::size_t> corrupt_id;
};

ojson config_json(const Options& o) {
  ojson j;
  j["model"] = nlohmann::json(o.model);
  j["train"] = {{"epochs", o.train.epochs}, {"batch_size", o.train.batch_size}, {"lr", o.train.lr},
                {"weight_decay", o.train.weight_decay}, {"seed", o.seed}};
  j["sae"] = nlohmann::json(o.sae);
  j["data"] = {{"standardize", !o.no_standardize}};
  return j;
}

/// Tracks every file a command writes and emits manifest.json at the end.
class Run {
 public:
  Run(const Options& o, std::string command) : opts_(o), command_(std::move(command)), root_(o.out) {
    fs::create_directories(root_);
  }

  void text(const std::string& rel, const std::string& content) {
    report::write_text(root_ / rel, content);
    files_.push_back(rel);
  }

  void container(const std::string& rel, const TensorContainer& c) {
    write_container(root_ / rel, c);
    files_.push_back(rel);
  }

  fs::path path(const std::string& rel) const { return root_ / rel; }

  void set_checkpoint_hash(std::string h) { checkpoint_hash_ = std::move(h); }
  const std::string& checkpoint_hash() const { return checkpoint_hash_; }
  void note(const std::string& key, ojson v) { notes_[key] = std::move(v); }

  ojson provenance(const InstancePair* pair = nullptr) const {
    ojson p;
    p["tool"] = "tsmi";
    p["version"] = TSMI_VERSION;
    p["checkpoint_hash"] = checkpoint_hash_;
    p["seed"] = opts_.seed;
    p["standardize"] = !opts_.no_standardize;
    p["model_config"] = nlohmann::json(opts_.model);
    if (pair)
      p["pair"] = {{"clean_id", pair->clean.id}, {"corrupt_id", pair->corrupt.id}, {"true_class", pair->true_class}};
    return p;
  }

  void finish(const std::string& status = "ok") {
    ojson m;
    m["tool"] = "tsmi";
    m["version"] = TSMI_VERSION;
    m["command"] = command_;
    m["status"] = status;
    m["checkpoint_hash"] = checkpoint_hash_;
    m["seed"] = opts_.seed;
    m["config"] = config_json(opts_);
    if (!notes_.empty()) m["notes"] = notes_;
    m["files"] = ojson::array();
    for (const auto& f : files_) m["files"].push_back({{"path", f}, {"fnv1a64", file_hash(root_ / f)}});
    report::write_text(root_ / "manifest.json", m.dump(2) + "\n");
  }

  std::size_t file_count() const { return files_.size(); }

 private:
  const Options& opts_;
  std::string command_;
  fs::path root_;
  std::string checkpoint_hash_;
  ojson notes_ = ojson::object();
  std::vector<std::string> files_;
};

Dataset load_data(const Options& o, std::size_t seq_len) {
  return load_dataset(o.train_file, o.test_file, seq_len, !o.no_standardize);
}

/// Loads the checkpoint, records its hash and adopts its model config.
Model load_model(Options& o, Run& run) {
  if (!fs::exists(o.checkpoint)) throw std::runtime_error("checkpoint not found: " + o.checkpoint);
  run.set_checkpoint_hash(file_hash(o.checkpoint));
  Model m = load_checkpoint(o.checkpoint);
  o.model = m.config();
  return m;
}

const TimeSeriesInstance& test_instance(const Dataset& ds, std::size_t id) {
  if (id >= ds.test.size())
    throw std::out_of_range("instance " + std::to_string(id) + " outside test split [0," +
                            std::to_string(ds.test.size()) + ")");
  return ds.test[id];
}

InstanceScore score_one(Model& model, const TimeSeriesInstance& inst) {
  Tensor<float> p = model.predict(inst.values);
  return {inst.id, inst.label, argmax(p), static_cast<double>(p[static_cast<std::size_t>(inst.label)])};
}

/// Explicit --clean/--corrupt ids, otherwise the ranked pair at --pair.
InstancePair choose_pair(const Options& o, Model& model, const Dataset& ds) {
  if (o.clean_id || o.corrupt_id) {
    if (!o.clean_id || !o.corrupt_id) throw CLI::ValidationError("--clean and --corrupt must be given together");
    const auto& c = test_instance(ds, *o.clean_id);
    const auto& k = test_instance(ds, *o.corrupt_id);
    if (c.label != k.label)
      throw std::invalid_argument("instances " + std::to_string(c.id) + " and " + std::to_string(k.id) +
                                  " have different true classes");
    return {score_one(model, c), score_one(model, k), c.label};
  }
  auto pairs = select_pairs(model, ds.test, o.jobs);
  if (o.pair_rank >= pairs.size())
    throw std::runtime_error("no qualifying pair at rank " + std::to_string(o.pair_rank) + " (" +
                             std::to_string(pairs.size()) + " pairs found); pass --clean/--corrupt explicitly");
  return pairs[o.pair_rank];
}

PatchSession make_session(Model& model, const Dataset& ds, const InstancePair& p) {
  return PatchSession(model, test_instance(ds, p.clean.id).values, test_instance(ds, p.corrupt.id).values,
                      p.true_class);
}

/// Head with the largest delta_p; ties go to the lower (layer, head).
std::pair<std::size_t, std::size_t> best_head(const SweepReport& heads) {
  const PatchResult* best = nullptr;
  for (const auto& r : heads.results)
    if (!best || r.delta_p > best->delta_p) best = &r;
  if (!best) throw std::logic_error("empty head sweep");
  return {best->targets[0].layer, best->targets[0].head};
}

std::string head_tag(std::size_t l, std::size_t h) { return "L" + std::to_string(l) + "H" + std::to_string(h); }

// ---- per-pair artifact writers ------------------------------------------

void write_sweep(Run& run, const std::string& prefix, const SweepReport& s, const ojson& prov,
                 const PatchSession* session = nullptr) {
  std::string stem = prefix + "sweep_" + granularity_name(s.granularity);
  if (s.granularity == Granularity::Position) stem += "_" + head_tag(*s.layer, *s.head);
  run.text(stem + ".csv", report::sweep_csv(s, prov));
  if (s.granularity == Granularity::Position && session)
    run.text(stem + ".json",
             report::position_sweep_json(s, session->delta_p({TapPoint::single_head(*s.layer, *s.head)}), prov));
  else
    run.text(stem + ".json", report::sweep_json(s, prov));
}

void write_topk(Run& run, const std::string& prefix, const PatchSession& s, const std::vector<SweepReport>& pos,
                std::size_t k, double threshold, std::size_t jobs, const ojson& prov) {
  const auto ranked = rank_all(pos);
  const auto rows = accumulate_topk(s, ranked, k, jobs);
  ojson p = prov;
  p["k"] = k;
  run.text(prefix + "topk.csv", report::topk_csv(rows, ranked, p));
  run.text(prefix + "critical.csv", report::critical_csv(find_critical(pos, threshold), threshold, prov));
}

void write_saliency(Run& run, const std::string& prefix, Model& model, const TimeSeriesInstance& inst,
                    std::size_t layer, std::size_t head, const ojson& prov) {
  ActivationCache<float> cache;
  model.predict(inst.values, &cache);
  const SaliencyProfile prof = attention_saliency(cache, layer, head);
  std::ostringstream os;
  ojson p = prov;
  p["instance"] = inst.id;
  p["head"] = head_tag(layer, head);
  report::write_provenance_comments(os, p);
  write_saliency_overlay(prof, inst.values, os);
  run.text(prefix + "saliency_" + head_tag(layer, head) + "_i" + std::to_string(inst.id) + ".csv", os.str());
}

ojson threshold_prov(ojson prov, double theta_head, double theta_pos) {
  prov["theta_head"] = theta_head;
  prov["theta_pos"] = theta_pos;
  return prov;
}

void write_graph(Run& run, const std::string& prefix, CausalGraph g, const std::string& name, const ojson& prov) {
  g.provenance = prov;
  g.provenance["graph"] = name;
  run.text(prefix + "graph_" + name + ".dot", to_dot(g));
  run.text(prefix + "graph_" + name + ".json", to_json(g));
  run.text(prefix + "degree_" + name + ".csv", report::degree_csv(g, g.provenance));
}

void write_heatmap(Run& run, const std::string& prefix, Model& model, SparseAutoencoder& sae,
                   const TimeSeriesInstance& inst, const std::string& role, const ojson& prov) {
  std::ostringstream os;
  ojson p = prov;
  p["instance"] = inst.id;
  if (!role.empty()) p["role"] = role;
  report::write_provenance_comments(os, p);
  write_heatmap_csv(activation_heatmap(model, sae, inst.values), os);
  run.text(prefix + "sae_heatmap_i" + std::to_string(inst.id) + ".csv", os.str());
}

/// Live neuron whose top activations are most concentrated on `cls`.
std::optional<std::size_t> selective_neuron(const std::vector<NeuronReport>& reports, int cls) {
  const NeuronReport* best = nullptr;
  for (const auto& r : reports) {
    if (r.dead || r.dominant_class != cls) continue;
    if (!best || r.dominant_share > best->dominant_share ||
        (r.dominant_share == best->dominant_share && r.max_activation > best->max_activation))
      best = &r;
  }
  if (!best) return std::nullopt;
  return best->neuron;
}

std::vector<NeuronReport> neuron_reports(SparseAutoencoder& sae, const ActivationSet& acts, std::size_t top_n) {
  const Tensor<float> codes = encode_all(sae, acts);
  std::vector<NeuronReport> out;
  for (std::size_t j = 0; j < sae.config().code_dim; ++j) out.push_back(top_activating(codes, acts, j, top_n));
  return out;
}

std::string sae_report_json(const std::vector<NeuronReport>& reps, const ojson& prov) {
  ojson j;
  j["provenance"] = prov;
  j["split"] = "test";
  std::size_t dead = 0;
  for (const auto& r : reps) dead += r.dead;
  j["dead_neurons"] = dead;
  j["live_neurons"] = reps.size() - dead;
  j["neurons"] = ojson::array();
  for (const auto& r : reps) j["neurons"].push_back(report::neuron_json(r));
  return j.dump(2) + "\n";
}

std::string steer_name(std::size_t neuron, std::size_t id) {
  return "sae_steer_n" + std::to_string(neuron) + "_i" + std::to_string(id) + ".json";
}

// ---- repro ----------------------------------------------------------------

void repro_pair(Run& run, const std::string& prefix, Model& model, const Dataset& ds, const InstancePair& pair,
                SparseAutoencoder& sae, const std::vector<NeuronReport>& reps, const Options& o) {
  const ojson prov = run.provenance(&pair);
  PatchSession s = make_session(model, ds, pair);
  write_sweep(run, prefix, sweep_layers(s, o.jobs), prov);
  const SweepReport heads = sweep_heads(s, o.jobs);
  write_sweep(run, prefix, heads, prov);
  const auto [bl, bh] = best_head(heads);
  const auto pos = sweep_all_positions(s, o.jobs);
  write_sweep(run, prefix, pos[bl * o.model.heads + bh], prov, &s);
  write_topk(run, prefix, s, pos, 10, 0.01, o.jobs, prov);
  write_saliency(run, prefix, model, test_instance(ds, pair.clean.id), bl, bh, prov);
  write_saliency(run, prefix, model, test_instance(ds, pair.corrupt.id), bl, bh, prov);
  write_graph(run, prefix, build_topk_graph(pos, heads, pair.true_class, 10), "topk", prov);
  write_graph(run, prefix, build_threshold_graph(pos, heads, pair.true_class, 0.10, 0.01), "threshold",
              threshold_prov(prov, 0.10, 0.01));
  write_heatmap(run, prefix, model, sae, test_instance(ds, pair.clean.id), "clean", prov);
  write_heatmap(run, prefix, model, sae, test_instance(ds, pair.corrupt.id), "corrupt", prov);
  const std::size_t neuron = selective_neuron(reps, pair.true_class).value_or(0);
  const SteerResult st = sae_steer_patch(model, sae, test_instance(ds, pair.corrupt.id).values, neuron, 5.0);
  run.text(prefix + steer_name(neuron, pair.corrupt.id), report::steer_json(st, pair.corrupt.id, pair.true_class, prov));
}

int cmd_repro(Options& o, bool retrain) {
  Run run(o, "repro");
  std::optional<Model> loaded;
  Dataset ds;
  if (retrain) {
    ds = load_data(o, o.model.seq_len);
    o.model.channels = ds.channels;
    o.model.classes = ds.num_classes();
    loaded.emplace(o.model, o.seed);
    std::cerr << "training seed " << o.seed << " for " << o.train.epochs << " epochs\n";
    auto log = train(*loaded, ds, o.train, [](const EpochMetrics& m) {
      if (m.epoch % 10 == 0) std::cerr << "  epoch " << m.epoch << " loss " << m.train_loss << " acc " << m.test_acc << '\n';
    }, o.jobs);
    run.container("model.tsmi", model_container(*loaded));
    run.set_checkpoint_hash(file_hash(run.path("model.tsmi")));
    run.text("metrics.csv", report::metrics_csv(log, run.provenance()));
  } else {
    loaded.emplace(load_model(o, run));
    ds = load_data(o, o.model.seq_len);
  }
  Model& model = *loaded;
  const ojson prov = run.provenance();
  const EvalResult ev = evaluate(model, ds.test, o.jobs);
  std::cout << "test accuracy " << report::fmt(ev.accuracy, 6) << '\n';
  run.text("confusion.csv", report::confusion_csv(ev, prov));
  const auto pairs = select_pairs(model, ds.test, o.jobs);
  run.text("pairs.json", report::pairs_json(pairs, prov));

  SaeConfig sc = o.sae;
  sc.seed = o.seed;
  SaeTrainResult tr;
  ActivationSet train_acts = collect_activations(model, ds.train, sc.layer, o.jobs);
  std::cerr << "training SAE on " << train_acts.rows.dim(0) << " activation rows\n";
  SparseAutoencoder sae = train_sae(train_acts.rows, sc, &tr);
  run.container("sae.tsmi", sae.to_container());
  std::size_t dead = 0;
  ActivationSet test_acts = collect_activations(model, ds.test, sc.layer, o.jobs);
  const auto reps = neuron_reports(sae, test_acts, 10);
  for (const auto& r : reps) dead += r.dead;
  run.text("sae_train.json", report::sae_train_json(sae.config(), tr, dead, prov));
  run.text("sae_report.json", sae_report_json(reps, prov));

  const std::size_t n = std::min<std::size_t>(2, pairs.size());
  for (std::size_t i = 0; i < n; ++i) {
    std::cerr << "pair " << i << ": clean " << pairs[i].clean.id << " corrupt " << pairs[i].corrupt.id << '\n';
    repro_pair(run, "pair" + std::to_string(i) + "/", model, ds, pairs[i], sae, reps, o);
  }
  if (n < 2) {
    run.note("missing_pairs", 2 - n);
    run.finish("partial");
    std::cerr << "error: only " << n << " qualifying pair(s); bundle is incomplete\n";
    return kExitPartial;
  }
  run.finish();
  std::cout << "wrote " << run.file_count() + 1 << " files to " << o.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"tsmi: train and mechanistically probe a time-series transformer"};
  app.set_config("--config", "", "TOML/INI file whose keys are long option names");
  app.require_subcommand(1);
  app.fallthrough();

  app.add_option("--train-file", o.train_file, "UEA .ts training split")->check(CLI::ExistingFile);
  app.add_option("--test-file", o.test_file, "UEA .ts test split")->check(CLI::ExistingFile);
  app.add_option("--checkpoint", o.checkpoint, "model checkpoint to read");
  app.add_option("--sae-checkpoint", o.sae_checkpoint, "SAE checkpoint to read");
  app.add_option("--out", o.out, "output directory")->envname("TSMI_OUT");
  app.add_option("--seed", o.seed, "seed for training runs");
  app.add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--no-standardize", o.no_standardize, "keep raw input values");

  app.add_option("--seq-len", o.model.seq_len, "timesteps per instance");
  app.add_option("--d-model", o.model.d_model);
  app.add_option("--layers", o.model.layers);
  app.add_option("--heads", o.model.heads);
  app.add_option("--mlp-hidden", o.model.mlp_hidden);
  app.add_option("--dropout", o.model.dropout);
  app.add_option("--epochs", o.train.epochs);
  app.add_option("--batch-size", o.train.batch_size);
  app.add_option("--lr", o.train.lr);
  app.add_option("--weight-decay", o.train.weight_decay);
  app.add_option("--sae-code-dim", o.sae.code_dim);
  app.add_option("--sae-lambda", o.sae.lambda);
  app.add_option("--sae-lr", o.sae.lr);
  app.add_option("--sae-epochs", o.sae.epochs);
  app.add_option("--sae-batch-size", o.sae.batch_size);
  bool sae_no_center = false;
  app.add_flag("--sae-no-center", sae_no_center, "train the SAE on raw activations");

  app.add_option("--pair", o.pair_rank, "rank of the clean/corrupt pair to analyse");
  app.add_option("--clean", o.clean_id, "explicit clean test instance id");
  app.add_option("--corrupt", o.corrupt_id, "explicit corrupt test instance id");

  auto* train_cmd = app.add_subcommand("train", "train a model; writes checkpoint and metrics");
  auto* eval_cmd = app.add_subcommand("eval", "accuracy and confusion matrix on the test split");
  auto* pairs_cmd = app.add_subcommand("pairs", "ranked clean/corrupt pairs");

  auto* patch_cmd = app.add_subcommand("patch", "activation patching");
  patch_cmd->require_subcommand(1);
  auto* sweep_cmd = patch_cmd->add_subcommand("sweep", "single-component sweep");
  std::string granularity = "layer";
  std::optional<std::size_t> layer, head;
  sweep_cmd->add_option("--granularity", granularity)->check(CLI::IsMember({"layer", "head", "pos"}));
  sweep_cmd->add_option("--layer", layer);
  sweep_cmd->add_option("--head", head);
  auto* topk_cmd = patch_cmd->add_subcommand("topk", "cumulative top-k position patches");
  std::size_t k = 10;
  double critical_threshold = 0.01;
  topk_cmd->add_option("--k", k)->check(CLI::PositiveNumber);
  topk_cmd->add_option("--threshold", critical_threshold, "delta_p cut for critical.csv");

  auto* sal_cmd = app.add_subcommand("saliency", "attention saliency for one head and instance");
  std::optional<std::size_t> instance;
  sal_cmd->add_option("--layer", layer);
  sal_cmd->add_option("--head", head);
  sal_cmd->add_option("--instance", instance, "test instance id (default: the pair's clean instance)");

  auto* graph_cmd = app.add_subcommand("graph", "causal graph from patching sweeps");
  std::string mode = "threshold";
  double theta_head = 0.10, theta_pos = 0.01;
  graph_cmd->add_option("--mode", mode)->check(CLI::IsMember({"topk", "threshold"}));
  graph_cmd->add_option("--k", k)->check(CLI::PositiveNumber);
  graph_cmd->add_option("--theta-head", theta_head);
  graph_cmd->add_option("--theta-pos", theta_pos);

  auto* sae_cmd = app.add_subcommand("sae", "sparse autoencoder over MLP outputs");
  sae_cmd->require_subcommand(1);
  auto* sae_train_cmd = sae_cmd->add_subcommand("train", "train on train-split activations");
  auto* sae_report_cmd = sae_cmd->add_subcommand("report", "top-activating test rows per neuron");
  std::size_t top_n = 10;
  sae_report_cmd->add_option("--top-n", top_n);
  auto* sae_heat_cmd = sae_cmd->add_subcommand("heatmap", "neuron x timestep code matrix");
  sae_heat_cmd->add_option("--instance", instance, "test instance id (default: both pair instances)");
  auto* sae_steer_cmd = sae_cmd->add_subcommand("steer", "scale one code unit and patch the reconstruction");
  std::optional<std::size_t> neuron;
  double gain = 5.0;
  sae_steer_cmd->add_option("--neuron", neuron, "code unit (default: most class-selective live unit)");
  sae_steer_cmd->add_option("--gain", gain);
  sae_steer_cmd->add_option("--instance", instance, "test instance id (default: the pair's corrupt instance)");

  auto* repro_cmd = app.add_subcommand("repro", "train, analyse the top two pairs, write the full bundle");
  bool use_checkpoint = false;
  repro_cmd->add_flag("--use-checkpoint", use_checkpoint, "analyse --checkpoint instead of training");

  CLI11_PARSE(app, argc, argv);
  o.sae.center = !sae_no_center;
  o.train.seed = o.seed;

  try {
    o.model.validate();
    if (*repro_cmd) return cmd_repro(o, !use_checkpoint);

    if (*train_cmd) {
      Run run(o, "train");
      Dataset ds = load_data(o, o.model.seq_len);
      o.model.channels = ds.channels;
      o.model.classes = ds.num_classes();
      Model model(o.model, o.seed);
      auto log = train(model, ds, o.train, [](const EpochMetrics& m) {
        std::cerr << "epoch " << m.epoch << " loss " << report::fmt(m.train_loss, 6) << " acc "
                  << report::fmt(m.test_acc, 6) << '\n';
      }, o.jobs);
      run.container("model.tsmi", model_container(model));
      run.set_checkpoint_hash(file_hash(run.path("model.tsmi")));
      run.text("metrics.csv", report::metrics_csv(log, run.provenance()));
      std::cout << "final test accuracy " << report::fmt(log.back().test_acc, 6) << '\n';
      run.finish();
      return 0;
    }

    const std::string command = sweep_cmd->parsed()        ? "patch sweep"
                                : topk_cmd->parsed()       ? "patch topk"
                                : sae_train_cmd->parsed()  ? "sae train"
                                : sae_report_cmd->parsed() ? "sae report"
                                : sae_heat_cmd->parsed()   ? "sae heatmap"
                                : sae_steer_cmd->parsed()  ? "sae steer"
                                                           : app.get_subcommands().front()->get_name();
    Run run(o, command);
    Model model = load_model(o, run);
    Dataset ds = load_data(o, o.model.seq_len);
    const ojson base_prov = run.provenance();

    if (*eval_cmd) {
      const EvalResult ev = evaluate(model, ds.test, o.jobs);
      std::cout << "test accuracy " << report::fmt(ev.accuracy, 6) << " (" << ev.total << " instances)\n";
      run.text("confusion.csv", report::confusion_csv(ev, base_prov));
      ojson j;
      j["provenance"] = base_prov;
      j["accuracy"] = ev.accuracy;
      j["total"] = ev.total;
      run.text("eval.json", j.dump(2) + "\n");
    } else if (*pairs_cmd) {
      const auto pairs = select_pairs(model, ds.test, o.jobs);
      std::cout << pairs.size() << " qualifying pair(s)\n";
      if (!pairs.empty())
        std::cout << "top: clean " << pairs[0].clean.id << " (P=" << report::fmt(pairs[0].clean.p_true, 4)
                  << ") corrupt " << pairs[0].corrupt.id << " (P=" << report::fmt(pairs[0].corrupt.p_true, 4)
                  << ") class " << pairs[0].true_class << '\n';
      run.text("pairs.json", report::pairs_json(pairs, base_prov));
    } else if (*patch_cmd || *sal_cmd || *graph_cmd) {
      const InstancePair pair = choose_pair(o, model, ds);
      const ojson prov = run.provenance(&pair);
      PatchSession s = make_session(model, ds, pair);
      if (sweep_cmd->parsed()) {
        if (granularity == "layer") {
          write_sweep(run, "", sweep_layers(s, o.jobs), prov);
        } else if (granularity == "head") {
          write_sweep(run, "", sweep_heads(s, o.jobs), prov);
        } else {
          if (layer.has_value() != head.has_value())
            throw CLI::ValidationError("--layer and --head must be given together");
          if (!layer) std::tie(layer, head) = best_head(sweep_heads(s, o.jobs));
          write_sweep(run, "", sweep_positions(s, *layer, *head, o.jobs), prov, &s);
        }
      } else if (topk_cmd->parsed()) {
        write_topk(run, "", s, sweep_all_positions(s, o.jobs), k, critical_threshold, o.jobs, prov);
      } else if (*sal_cmd) {
        if (layer.has_value() != head.has_value()) throw CLI::ValidationError("--layer and --head must be given together");
        if (!layer) std::tie(layer, head) = best_head(sweep_heads(s, o.jobs));
        write_saliency(run, "", model, test_instance(ds, instance.value_or(pair.clean.id)), *layer, *head, prov);
      } else {
        const SweepReport heads = sweep_heads(s, o.jobs);
        const auto pos = sweep_all_positions(s, o.jobs);
        if (mode == "topk") {
          write_graph(run, "", build_topk_graph(pos, heads, pair.true_class, k), "topk", prov);
        } else {
          write_graph(run, "", build_threshold_graph(pos, heads, pair.true_class, theta_head, theta_pos),
                      "threshold", threshold_prov(prov, theta_head, theta_pos));
        }
      }
    } else if (sae_train_cmd->parsed()) {
      SaeConfig sc = o.sae;
      sc.seed = o.seed;
      SaeTrainResult tr;
      ActivationSet acts = collect_activations(model, ds.train, sc.layer, o.jobs);
      SparseAutoencoder sae = train_sae(acts.rows, sc, &tr);
      run.container("sae.tsmi", sae.to_container());
      std::size_t dead = 0;
      for (const auto& r : neuron_reports(sae, acts, 0)) dead += r.dead;
      run.text("sae_train.json", report::sae_train_json(sae.config(), tr, dead, base_prov));
      std::cout << "SAE active fraction " << report::fmt(tr.active_fraction, 4) << ", mse/var "
                << report::fmt(tr.reconstruction_mse / tr.input_variance, 4) << '\n';
    } else {
      SparseAutoencoder sae = load_sae(o.sae_checkpoint);
      run.note("sae_checkpoint_hash", file_hash(o.sae_checkpoint));
      if (sae_report_cmd->parsed()) {
        ActivationSet acts = collect_activations(model, ds.test, sae.config().layer, o.jobs);
        run.text("sae_report.json", sae_report_json(neuron_reports(sae, acts, top_n), base_prov));
      } else if (sae_heat_cmd->parsed()) {
        if (instance) {
          write_heatmap(run, "", model, sae, test_instance(ds, *instance), "", base_prov);
        } else {
          const InstancePair pair = choose_pair(o, model, ds);
          const ojson prov = run.provenance(&pair);
          write_heatmap(run, "", model, sae, test_instance(ds, pair.clean.id), "clean", prov);
          write_heatmap(run, "", model, sae, test_instance(ds, pair.corrupt.id), "corrupt", prov);
        }
      } else {
        std::optional<InstancePair> pair;
        if (!instance || !neuron) pair = choose_pair(o, model, ds);
        const auto& inst = test_instance(ds, instance.value_or(pair ? pair->corrupt.id : 0));
        if (!neuron) {
          ActivationSet acts = collect_activations(model, ds.test, sae.config().layer, o.jobs);
          neuron = selective_neuron(neuron_reports(sae, acts, 10), inst.label).value_or(0);
        }
        const SteerResult st = sae_steer_patch(model, sae, inst.values, *neuron, gain);
        run.text(steer_name(*neuron, inst.id),
                 report::steer_json(st, inst.id, inst.label, pair ? run.provenance(&*pair) : base_prov));
      }
    }
    run.finish();
    return 0;
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
