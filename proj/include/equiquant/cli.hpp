#pragma once

// Command-line driver. Every subcommand prints a human-readable table followed
// by one JSON object per line, and writes a manifest (argv, resolved settings,
// seed, artifacts) beside its outputs.
//
// Exit codes: 0 success, 1 usage error, 2 data or model error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "equiquant/checkpoint.hpp"
#include "equiquant/config.hpp"
#include "equiquant/data.hpp"
#include "equiquant/int8_infer.hpp"
#include "equiquant/model.hpp"
#include "equiquant/quantizers.hpp"
#include "equiquant/training.hpp"

namespace equiquant {

inline constexpr const char* kVersion = "0.1.0";

namespace cli {

using json = nlohmann::ordered_json;

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << text;
  if (!f) throw DataError("write failed for " + path);
}

inline std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(3) << v;
  return os.str();
}

struct Manifest {
  std::string subcommand;
  json config = json::object();
  std::optional<std::uint64_t> seed;
  std::vector<std::string> artifacts;
  std::vector<std::string> argv;

  void write(const std::string& path) const {
    json j;
    j["subcommand"] = subcommand;
    j["argv"] = argv;
    j["config"] = config;
    if (seed) j["seed"] = *seed;
    else j["seed"] = nullptr;
    j["artifacts"] = artifacts;
    j["versions"] = {{"equiquant", kVersion}, {"checkpoint_format", kCheckpointVersion}};
    write_file(path, j.dump(2) + "\n");
  }
};

/// Loads a float or integer checkpoint as a predictor.
struct LoadedModel {
  std::optional<Model> fake;
  std::optional<IntegerModel> integer;
  bool is_integer() const { return integer.has_value(); }
  const Model& model() const { return integer ? integer->model() : *fake; }
  Predictor predictor() const { return integer ? integer->predictor() : make_predictor(*fake); }
};

inline LoadedModel load_model(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  LoadedModel m;
  if (ck.config_value("format").value_or("") == "integer") m.integer.emplace(ck);
  else m.fake.emplace(model_from_checkpoint(ck));
  return m;
}

inline Dataset load_dataset(const std::string& path, double cutoff) { return parse_xyz(read_file(path), cutoff); }

inline std::string manifest_path_for(const std::string& out) { return out + ".manifest.json"; }

}  // namespace cli

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using cli::json;
  CLI::App app{"Equivariance-aware quantization toolkit", "equiquant"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  std::string manifest_override;
  app.add_option("--manifest", manifest_override, "Manifest path (default: beside the outputs)");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic Lennard-Jones dataset");
  std::string gen_out, gen_atoms = "8..16";
  std::size_t gen_n = 500;
  std::uint64_t gen_seed = 0;
  double gen_cutoff = 5.0;
  gen->add_option("--out", gen_out, "Output extended-XYZ file")->required();
  gen->add_option("--n", gen_n, "Number of molecules");
  gen->add_option("--atoms", gen_atoms, "Atom count range LO..HI");
  gen->add_option("--seed", gen_seed, "Random seed");
  gen->add_option("--cutoff", gen_cutoff, "Neighbor cutoff (A)");

  // train
  auto* train = app.add_subcommand("train", "Train or fine-tune a model");
  std::string train_config, train_scheme, train_out, train_data;
  train->add_option("--config", train_config, "Key-value config file")->required();
  train->add_option("--scheme", train_scheme, "fp32 | int8-scalar | int8-full | w4a8");
  train->add_option("--out", train_out, "Output checkpoint")->required();
  train->add_option("--data", train_data, "Dataset (overrides the config's data key)");

  // quantize
  auto* quant = app.add_subcommand("quantize", "Convert a QAT checkpoint to an integer checkpoint");
  std::string q_ckpt, q_out;
  quant->add_option("--ckpt", q_ckpt, "Float checkpoint")->required();
  quant->add_option("--out", q_out, "Integer checkpoint")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Energy/force MAE and LEE on a dataset");
  std::string e_ckpt, e_data;
  std::size_t e_rot = 8;
  std::uint64_t e_seed = 0;
  eval->add_option("--ckpt", e_ckpt, "Checkpoint (float or integer)")->required();
  eval->add_option("--data", e_data, "Extended-XYZ dataset")->required();
  eval->add_option("--rotations", e_rot, "Rotations per molecule for LEE");
  eval->add_option("--seed", e_seed, "Rotation seed");

  // lee
  auto* leec = app.add_subcommand("lee", "Local equivariance error per molecule");
  std::string l_ckpt, l_data;
  std::size_t l_rot = 8;
  std::uint64_t l_seed = 0;
  leec->add_option("--ckpt", l_ckpt, "Checkpoint (float or integer)")->required();
  leec->add_option("--data", l_data, "Extended-XYZ dataset")->required();
  leec->add_option("--rotations", l_rot, "Rotations per molecule")->check(CLI::PositiveNumber);
  leec->add_option("--seed", l_seed, "Rotation seed");

  // bench
  auto* benchc = app.add_subcommand("bench", "Latency and memory of FP32 vs integer inference");
  std::string b_fp, b_int, b_data;
  std::size_t b_runs = 1000;
  benchc->add_option("--ckpt-fp32", b_fp, "Float checkpoint")->required();
  benchc->add_option("--ckpt-int", b_int, "Integer checkpoint")->required();
  benchc->add_option("--runs", b_runs, "Timed runs per variant")->check(CLI::PositiveNumber);
  benchc->add_option("--data", b_data, "Dataset whose first molecule is timed (default: a generated molecule)");

  // diag-mddq
  auto* diag = app.add_subcommand("diag-mddq", "Angular error of MDDQ vs per-component vector quantization");
  std::vector<int> d_bits{2, 4, 8};
  std::size_t d_samples = 10000;
  std::uint64_t d_seed = 0;
  diag->add_option("--bits", d_bits, "Bit-widths")->delimiter(',')->check(CLI::Range(2, 8));
  diag->add_option("--samples", d_samples, "Random vectors per bit-width");
  diag->add_option("--seed", d_seed, "Random seed");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  if (!argv_rev.empty()) argv_rev.pop_back();  // program name
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  cli::Manifest manifest;
  manifest.argv = args;
  auto finish = [&](const std::string& default_path) {
    const std::string path = manifest_override.empty() ? default_path : manifest_override;
    manifest.write(path);
  };

  try {
    if (*gen) {
      manifest.subcommand = "gen-data";
      GenConfig g;
      g.n_molecules = gen_n;
      g.seed = gen_seed;
      g.cutoff = gen_cutoff;
      const std::size_t dots = gen_atoms.find("..");
      if (dots == std::string::npos) {
        err << "error: --atoms expects LO..HI\n";
        return 1;
      }
      try {
        g.atoms_min = std::stoul(gen_atoms.substr(0, dots));
        g.atoms_max = std::stoul(gen_atoms.substr(dots + 2));
      } catch (const std::logic_error&) {
        err << "error: --atoms expects LO..HI\n";
        return 1;
      }
      const Dataset ds = gen_synthetic(g);
      cli::write_file(gen_out, write_xyz(ds));
      std::size_t atoms = 0;
      for (const auto& m : ds.graphs) atoms += m.size();
      out << "molecules  atoms  seed\n" << ds.size() << "  " << atoms << "  " << gen_seed << "\n";
      out << json{{"table", "gen-data"}, {"molecules", ds.size()}, {"atoms", atoms}, {"seed", gen_seed}}.dump() << "\n";
      manifest.config = {{"n", gen_n}, {"atoms", gen_atoms}, {"cutoff", gen_cutoff}};
      manifest.seed = gen_seed;
      manifest.artifacts = {gen_out};
      finish(cli::manifest_path_for(gen_out));
      return 0;
    }

    if (*train) {
      manifest.subcommand = "train";
      RunConfig rc;
      try {
        rc = resolve_config(parse_key_values(cli::read_file(train_config)));
        if (!train_scheme.empty()) rc.train.scheme = parse_scheme(train_scheme);
        if (!train_data.empty()) rc.data = train_data;
        if (auto s = seed_from_env()) rc.train.seed = *s;
      } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
      } catch (const ModelError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
      }
      if (rc.data.empty()) {
        err << "error: no dataset (set `data` in the config or pass --data)\n";
        return 1;
      }
      const Dataset ds = cli::load_dataset(rc.data, rc.model.cutoff);
      const DatasetSplit parts = split(ds, rc.split, rc.split_seed);
      Model init = rc.init.empty() ? make_model(rc.model, Scheme::fp32, rc.init_seed)
                                   : model_from_checkpoint(load_checkpoint(rc.init));
      if (!(init.config == rc.model)) {
        err << "error: initial checkpoint architecture differs from the config\n";
        return 2;
      }
      const std::string log_path = train_out + ".log.jsonl";
      std::ofstream log_file(log_path);
      if (!log_file) throw DataError("cannot write " + log_path);
      out << "epoch  e_mae_mev  f_mae_mev_a  lee_mev_a  loss\n";
      TrainResult res = qat_train(init, parts.train, parts.val, rc.train, [&](const EpochRecord& r) {
        out << r.epoch << "  " << cli::fixed(r.e_mae_mev, 3) << "  " << cli::fixed(r.f_mae_mev_a, 3) << "  "
            << cli::sci(r.lee_mev_a) << "  " << cli::fixed(r.loss, 5) << "\n";
        log_file << r.to_json().dump() << "\n";
        log_file.flush();
      });
      for (const auto& r : res.log.records) out << r.to_json().dump() << "\n";
      save_checkpoint(model_to_checkpoint(res.model), train_out);
      manifest.config = json::object();
      for (const auto& [k, v] : describe(rc)) manifest.config[k] = v;
      manifest.seed = rc.train.seed;
      manifest.artifacts = {train_out, log_path};
      finish(cli::manifest_path_for(train_out));
      return 0;
    }

    if (*quant) {
      manifest.subcommand = "quantize";
      const Checkpoint fp = load_checkpoint(q_ckpt);
      const Checkpoint ic = convert(fp);
      save_checkpoint(ic, q_out);
      const MemoryReport mem = memory_report(ic);
      out << "tensors  fp32_bytes  quant_bytes  ratio\n"
          << mem.rows.size() << "  " << mem.fp32_total << "  " << mem.quant_total << "  " << cli::fixed(mem.ratio(), 4)
          << "\n";
      out << json{{"table", "quantize"},       {"scheme", ic.config_value("scheme").value_or("fp32")},
                  {"tensors", mem.rows.size()}, {"fp32_bytes", mem.fp32_total},
                  {"quant_bytes", mem.quant_total}, {"ratio", mem.ratio()}}
                 .dump()
          << "\n";
      manifest.config = {{"ckpt", q_ckpt}};
      manifest.artifacts = {q_out};
      finish(cli::manifest_path_for(q_out));
      return 0;
    }

    if (*eval) {
      manifest.subcommand = "eval";
      const cli::LoadedModel m = cli::load_model(e_ckpt);
      const Dataset ds = cli::load_dataset(e_data, m.model().config.cutoff);
      const EvalResult r = evaluate(m.predictor(), ds, {e_rot, e_seed});
      out << "molecules  e_mae_mev  f_mae_mev_a  lee_mev_a\n"
          << r.molecules << "  " << cli::fixed(r.e_mae_mev, 3) << "  " << cli::fixed(r.f_mae_mev_a, 3) << "  "
          << cli::sci(r.lee_mev_a) << "\n";
      out << json{{"table", "eval"},         {"molecules", r.molecules},     {"e_mae_mev", r.e_mae_mev},
                  {"f_mae_mev_a", r.f_mae_mev_a}, {"lee_mev_a", r.lee_mev_a}, {"rotations", e_rot}}
                 .dump()
          << "\n";
      manifest.config = {{"ckpt", e_ckpt}, {"data", e_data}, {"rotations", e_rot}};
      manifest.seed = e_seed;
      finish("equiquant-eval.manifest.json");
      return 0;
    }

    if (*leec) {
      manifest.subcommand = "lee";
      const cli::LoadedModel m = cli::load_model(l_ckpt);
      const Dataset ds = cli::load_dataset(l_data, m.model().config.cutoff);
      const Predictor f = m.predictor();
      out << "molecule  atoms  lee_mev_a\n";
      std::vector<json> rows;
      double total = 0.0;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const double v = lee(f, ds.graphs[i], eval_rotations(l_seed, i, l_rot));
        total += v;
        out << i << "  " << ds.graphs[i].size() << "  " << cli::sci(v) << "\n";
        rows.push_back({{"table", "lee"}, {"molecule", i}, {"atoms", ds.graphs[i].size()}, {"lee_mev_a", v}});
      }
      const double mean = ds.empty() ? 0.0 : total / static_cast<double>(ds.size());
      out << "mean  " << cli::sci(mean) << "\n";
      for (const auto& r : rows) out << r.dump() << "\n";
      out << json{{"table", "lee-summary"}, {"molecules", ds.size()}, {"rotations", l_rot}, {"lee_mev_a", mean}}.dump()
          << "\n";
      manifest.config = {{"ckpt", l_ckpt}, {"data", l_data}, {"rotations", l_rot}};
      manifest.seed = l_seed;
      finish("equiquant-lee.manifest.json");
      return 0;
    }

    if (*benchc) {
      manifest.subcommand = "bench";
      const cli::LoadedModel fp = cli::load_model(b_fp);
      const cli::LoadedModel iq = cli::load_model(b_int);
      MolGraph g;
      if (!b_data.empty()) {
        const Dataset ds = cli::load_dataset(b_data, fp.model().config.cutoff);
        if (ds.empty()) throw DataError("bench: empty dataset");
        g = ds.graphs.front();
      } else {
        GenConfig gc;
        gc.n_molecules = 1;
        gc.atoms_min = gc.atoms_max = 12;
        gc.cutoff = fp.model().config.cutoff;
        g = gen_synthetic(gc).graphs.front();
      }
      const auto rows = bench({{"fp32", fp.predictor()}, {iq.is_integer() ? "int" : "fake-quant", iq.predictor()}}, g,
                              b_runs);
      out << "variant  runs  median_us  mean_us  speedup\n";
      for (const auto& r : rows)
        out << r.variant << "  " << r.runs << "  " << cli::fixed(r.median_us, 1) << "  " << cli::fixed(r.mean_us, 1)
            << "  " << cli::fixed(r.speedup, 3) << "\n";
      const MemoryReport mem = memory_report(load_checkpoint(b_int));
      out << "memory  fp32_bytes  quant_bytes  ratio\n"
          << "quantized-tensors  " << mem.fp32_total << "  " << mem.quant_total << "  " << cli::fixed(mem.ratio(), 4)
          << "\n";
      for (const auto& r : rows)
        out << json{{"table", "latency"}, {"variant", r.variant},  {"runs", r.runs},
                    {"median_us", r.median_us}, {"mean_us", r.mean_us}, {"speedup", r.speedup}}
                   .dump()
            << "\n";
      out << json{{"table", "memory"}, {"fp32_bytes", mem.fp32_total}, {"quant_bytes", mem.quant_total},
                  {"ratio", mem.ratio()}}
                 .dump()
          << "\n";
      manifest.config = {{"ckpt_fp32", b_fp}, {"ckpt_int", b_int}, {"runs", b_runs}, {"atoms", g.size()}};
      finish("equiquant-bench.manifest.json");
      return 0;
    }

    if (*diag) {
      manifest.subcommand = "diag-mddq";
      const auto rows = angular_error_report(d_bits, d_samples, d_seed);
      out << "bits  quantizer  samples  mean_angle_rad  mean_cosine\n";
      for (const auto& r : rows)
        out << r.bits << "  " << r.quantizer << "  " << r.samples << "  " << cli::sci(r.mean_angle_rad) << "  "
            << cli::fixed(r.mean_cosine, 6) << "\n";
      for (const auto& r : rows)
        out << json{{"table", "diag-mddq"},           {"bits", r.bits},
                    {"quantizer", r.quantizer},       {"samples", r.samples},
                    {"mean_angle_rad", r.mean_angle_rad}, {"mean_cosine", r.mean_cosine}}
                   .dump()
            << "\n";
      manifest.config = {{"bits", d_bits}, {"samples", d_samples}};
      manifest.seed = d_seed;
      finish("equiquant-diag-mddq.manifest.json");
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  err << app.help();
  return 1;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace equiquant
