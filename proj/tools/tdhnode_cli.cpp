// tdhnode: generate cohorts, train, evaluate and inspect models.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/sha.h>

#include "CLI11.hpp"
#include "tdhnode/tdhnode.hpp"

namespace fs = std::filesystem;
using namespace tdhnode;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << text;
}

// Same digest git gives a blob with this content.
std::string blob_hash(const std::string& content) {
  const std::string data = "blob " + std::to_string(content.size()) + std::string(1, '\0') + content;
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(data.data()), data.size(), digest);
  std::ostringstream hex;
  for (unsigned char c : digest) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(c);
  return hex.str();
}

/// Run record written next to the main output.
struct Manifest {
  nlohmann::json doc;

  Manifest(const std::string& command, int argc, char** argv) {
    doc["command"] = command;
    doc["argv"] = std::vector<std::string>(argv, argv + argc);
    doc["inputs"] = nlohmann::json::object();
    doc["outputs"] = nlohmann::json::object();
    doc["metrics_scope"] = "micro-averaged over (encounter, marker) pairs where the marker has not yet onset";
  }
  void input(const std::string& path) {
    if (path.rfind("builtin:", 0) == 0) {
      doc["inputs"][path] = "builtin";
    } else {
      doc["inputs"][path] = blob_hash(read_file(path));
    }
  }
  void output(const std::string& path) {
    if (!path.empty() && path != "-" && fs::exists(path)) doc["outputs"][path] = blob_hash(read_file(path));
  }
  void write(const std::string& main_output) const {
    const std::string path =
        (main_output.empty() || main_output == "-") ? std::string("tdhnode.manifest.json") : main_output + ".manifest.json";
    write_file(path, doc.dump(2) + "\n");
  }
};

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("TDHNODE_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw Error(ErrorCode::ConfigInvalid, std::string("TDHNODE_SEED is not an integer: ") + s);
  }
}

TrainConfig resolve_train_config(const std::string& path) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : load_train_config(path);
  if (auto s = env_seed()) cfg.seed = *s;
  return cfg;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

const std::vector<PatientSequence>& pick_split(const Dataset& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "val") return d.val;
  if (split == "test") return d.test;
  if (split == "all") return d.data.sequences;
  throw Error(ErrorCode::ConfigInvalid, "split must be train, val, test or all");
}

/// Re-ingests a cohort with a checkpoint's schema and split seed.
Dataset dataset_for_checkpoint(const Checkpoint& c, const std::string& cohort) {
  Dataset d;
  d.pathways = c.pathways;
  d.hg = c.pathways.build();
  d.data = ingest(read_cohort(cohort), d.hg, {}, {}, &c.schema);
  d.split = split_indices(d.data.sequences.size(), c.train.seed, c.train.train_fraction, c.train.val_fraction);
  d.train = select(d.data.sequences, d.split.train);
  d.val = select(d.data.sequences, d.split.val);
  d.test = select(d.data.sequences, d.split.test);
  return d;
}

const PatientSequence& find_patient(const Dataset& d, const std::string& id) {
  for (const auto& s : d.data.sequences)
    if (s.patient_id == id) return s;
  throw Error(ErrorCode::IndexOutOfRange, "no patient " + id);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Time-aware hypergraph neural ODE for disease progression"};
  app.require_subcommand(1);

  std::string config, out, cohort, pathways = "builtin:diabetes", rules = "builtin:clinical", ckpt, log_path;
  std::string split = "test", grid = "full,-H,-W,none", axis, values, patient, resume;
  double threshold = -1.0;
  std::size_t encounter = 0;
  bool processed_stats = false;

  auto* gen = app.add_subcommand("generate", "Write a synthetic cohort");
  gen->add_option("--config", config, "Generator config (JSON)");
  gen->add_option("--out", out, "Cohort file (JSON lines)")->required();

  auto* stats = app.add_subcommand("stats", "Cohort statistics as CSV");
  stats->add_option("--cohort", cohort)->required();
  stats->add_option("--pathways", pathways);
  stats->add_option("--rules", rules);
  stats->add_flag("--processed", processed_stats, "Statistics after ingestion instead of on the raw file");
  stats->add_option("--out", out);

  auto* ing = app.add_subcommand("ingest", "Impute, truncate and discretize a raw cohort");
  ing->add_option("--cohort", cohort)->required();
  ing->add_option("--pathways", pathways);
  ing->add_option("--rules", rules);
  ing->add_option("--out", out)->required();

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--cohort", cohort)->required();
  train->add_option("--pathways", pathways);
  train->add_option("--rules", rules);
  train->add_option("--config", config, "Train config (JSON)");
  train->add_option("--out", out, "Checkpoint path")->required();
  train->add_option("--log", log_path, "Training log CSV (default <out>.log.csv)");
  train->add_option("--resume", resume, "Continue from a checkpoint with training state");

  auto* eval = app.add_subcommand("evaluate", "Metrics of a checkpoint on a cohort split");
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--cohort", cohort)->required();
  eval->add_option("--pathways", pathways, "Verify the checkpoint against this pathway file");
  eval->add_option("--threshold", threshold);
  eval->add_option("--split", split);
  eval->add_option("--out", out);

  auto* abl = app.add_subcommand("ablate", "Train and evaluate incidence/weight ablations");
  abl->add_option("--cohort", cohort)->required();
  abl->add_option("--pathways", pathways);
  abl->add_option("--rules", rules);
  abl->add_option("--config", config);
  abl->add_option("--grid", grid);
  abl->add_option("--out", out);

  auto* swp = app.add_subcommand("sweep", "Train and evaluate over one hyperparameter axis");
  swp->add_option("--cohort", cohort)->required();
  swp->add_option("--pathways", pathways);
  swp->add_option("--rules", rules);
  swp->add_option("--config", config);
  swp->add_option("--axis", axis)->required()->check(CLI::IsMember({"embedding_dim", "ode_steps"}));
  swp->add_option("--values", values)->required();
  swp->add_option("--out", out);

  auto* emb = app.add_subcommand("export-embeddings", "Per-patient mean final hidden state");
  emb->add_option("--ckpt", ckpt)->required();
  emb->add_option("--cohort", cohort)->required();
  emb->add_option("--split", split);
  emb->add_option("--out", out);

  auto* insp = app.add_subcommand("inspect", "Dump H_p, W_p, L and attention at one encounter");
  insp->add_option("--ckpt", ckpt)->required();
  insp->add_option("--cohort", cohort)->required();
  insp->add_option("--patient", patient)->required();
  insp->add_option("--encounter", encounter)->required();
  insp->add_option("--out", out);

  CLI11_PARSE(app, argc, argv);

  try {
    Manifest manifest(app.get_subcommands().front()->get_name(), argc, argv);

    if (*gen) {
      GeneratorConfig g = config.empty() ? GeneratorConfig{} : load_generator_config(config);
      if (auto s = env_seed()) g.seed = *s;
      if (!config.empty()) manifest.input(config);
      write_cohort(generate_cohort(g), out);
      manifest.doc["config"] = g;
      manifest.doc["seeds"] = {{"generator", g.seed}};
      manifest.output(out);
      manifest.write(out);
      std::cerr << "wrote " << g.n_patients << " patients to " << out << "\n";
      return 0;
    }

    if (*stats || *ing) {
      const PathwaySet p = load_pathways(pathways);
      const ProgressionHypergraph hg = p.build();
      std::vector<PatientRecord> recs = read_cohort(cohort);
      if (*ing || processed_stats) {
        IngestResult r = ingest(recs, hg, load_rules(rules));
        recs = r.processed;
        std::cerr << "imputed from defaults: " << r.diagnostics.leading_imputed
                  << ", carried forward: " << r.diagnostics.carried_forward
                  << ", truncated patients: " << r.diagnostics.truncated_patients
                  << ", status reversals repaired: " << r.diagnostics.reversals_repaired << "\n";
      }
      if (*ing) {
        write_cohort(recs, out);
      } else {
        write_file(out, stats_csv(cohort_stats(recs, hg)));
      }
      manifest.input(cohort);
      manifest.input(pathways);
      manifest.output(out);
      if (!out.empty()) manifest.write(out);
      return 0;
    }

    if (*train) {
      const PathwaySet p = load_pathways(pathways);
      const TrainConfig cfg = resolve_train_config(config);
      Dataset d = prepare_dataset(read_cohort(cohort), p, load_rules(rules), cfg);
      TrainConfig full = cfg;
      full.model.n_markers = d.hg.num_markers();
      full.model.n_risk = d.data.schema.width();
      Checkpoint ck;
      ck.train = full;
      ck.pathways = p;
      ck.schema = d.data.schema;
      ck.model_seed = model_seed_for(full.seed);
      Model<float> model(full.model, d.hg, ck.model_seed);
      Trainer<float> trainer(model, full);
      if (!resume.empty()) {
        Checkpoint prev = load_checkpoint(resume, &d.hg);
        if (!prev.state) throw Error(ErrorCode::CorruptFile, resume + " has no training state to resume");
        trainer.restore(*prev.state);
        manifest.input(resume);
      }
      const std::string log_file = log_path.empty() ? out + ".log.csv" : log_path;
      TrainState<float> last;
      trainer.run(d.train, d.val, [&](const EpochLog& e, const Trainer<float>& t) {
        std::cerr << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << " recall "
                  << e.val_recall << " f1 " << e.val_f1 << " (" << e.seconds << " s"
                  << (e.clipped ? ", clipped " + std::to_string(e.clipped) : std::string{}) << ")\n";
        last = t.snapshot();
        ck.params = export_params(model.params());
        ck.state = last;
        save_checkpoint(ck, out);
        write_file(log_file, training_log_csv(t.history()));
      });
      ck.params = export_params(model.params());
      ck.state = last;
      save_checkpoint(ck, out);
      const MetricsReport test = evaluate(model, d.test, full.threshold);
      std::cerr << "best epoch " << trainer.best_epoch() << ", test " << test.to_json().dump() << "\n";
      manifest.input(cohort);
      manifest.input(pathways);
      if (!config.empty()) manifest.input(config);
      manifest.doc["config"] = full;
      manifest.doc["seeds"] = {{"run", full.seed}, {"model", ck.model_seed}};
      manifest.doc["test"] = test.to_json();
      manifest.output(out);
      manifest.output(log_file);
      manifest.write(out);
      return 0;
    }

    if (*eval || *emb || *insp) {
      std::optional<ProgressionHypergraph> expected;
      if (*eval && eval->count("--pathways")) expected = load_pathways(pathways).build();
      const Checkpoint c = load_checkpoint(ckpt, expected ? &*expected : nullptr);
      const Model<float> model = model_from_checkpoint(c);
      const Dataset d = dataset_for_checkpoint(c, cohort);
      manifest.input(ckpt);
      manifest.input(cohort);
      if (*eval) {
        const double th = threshold >= 0.0 ? threshold : c.train.threshold;
        const MetricsReport r = evaluate(model, pick_split(d, split), th);
        std::ostringstream csv;
        csv.precision(6);
        csv << "split,threshold,accuracy,precision,recall,f1,tp,fp,fn,tn,evaluated\n";
        csv << split << "," << th << "," << r.accuracy << "," << r.precision << "," << r.recall << "," << r.f1 << ","
            << r.counts.tp << "," << r.counts.fp << "," << r.counts.fn << "," << r.counts.tn << ","
            << r.counts.total() << "\n";
        write_file(out, csv.str());
        manifest.doc["threshold"] = th;
      } else if (*emb) {
        write_file(out, export_embeddings_csv(model, pick_split(d, split)));
      } else {
        write_file(out, inspect_json(model, find_patient(d, patient), encounter).dump(2) + "\n");
      }
      manifest.output(out);
      if (!out.empty()) manifest.write(out);
      return 0;
    }

    if (*abl || *swp) {
      const PathwaySet p = load_pathways(pathways);
      const TrainConfig cfg = resolve_train_config(config);
      const Dataset d = prepare_dataset(read_cohort(cohort), p, load_rules(rules), cfg);
      std::string csv;
      if (*abl) {
        csv = ablation_csv(ablate(d, cfg, parse_ablation_grid(grid)));
      } else {
        csv = sweep_csv(axis, sweep(d, cfg, axis, parse_int_list(values)));
      }
      write_file(out, csv);
      manifest.input(cohort);
      manifest.input(pathways);
      if (!config.empty()) manifest.input(config);
      manifest.doc["config"] = cfg;
      manifest.doc["seeds"] = {{"run", cfg.seed}, {"model", model_seed_for(cfg.seed)}};
      manifest.output(out);
      manifest.write(out);
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
