#pragma once

// Composite loss, local equivariance error, evaluation and the staged QAT loop.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "equiquant/autograd.hpp"
#include "equiquant/data.hpp"
#include "equiquant/geometry.hpp"
#include "equiquant/model.hpp"
#include "equiquant/quantizers.hpp"

namespace equiquant {

/// Non-finite loss or invalid training setup.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t warmup_epochs = 5;
  double lr = 1e-4;
  double lambda_energy = 1.0;
  double lambda_force = 10.0;
  double lambda_lee = 0.01;
  std::size_t n_lee_rotations = 1;  // per batch
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  Scheme scheme = Scheme::fp32;
  std::size_t calibration_molecules = 32;
  std::size_t val_lee_rotations = 2;  // per molecule, per-epoch log only

  void validate() const {
    if (epochs == 0) throw TrainingError("TrainConfig: epochs must be positive");
    if (warmup_epochs >= epochs) throw TrainingError("TrainConfig: warmup_epochs must be smaller than epochs");
    if (!(lr > 0.0)) throw TrainingError("TrainConfig: lr must be positive");
    if (lambda_energy < 0.0 || lambda_force < 0.0 || lambda_lee < 0.0) {
      throw TrainingError("TrainConfig: loss weights must be non-negative");
    }
    if (batch_size == 0) throw TrainingError("TrainConfig: batch_size must be positive");
    if (n_lee_rotations == 0) throw TrainingError("TrainConfig: n_lee_rotations must be positive");
  }
};

// ---------------------------------------------------------------------------
// Loss

struct LossWeights {
  double energy = 1.0;
  double force = 10.0;
  double lee = 0.0;
};

struct LossTerms {
  Var total;
  Var energy;  // |E - E_ref|, eV
  Var force;   // mean |F - F_ref| over components, eV/A
};

inline Tensor forces_tensor(const std::vector<Vec3>& f) {
  Tensor t(Shape{f.size(), 3});
  for (std::size_t i = 0; i < f.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) t[3 * i + c] = static_cast<float>(f[i][c]);
  return t;
}

/// lambda_e |E - E_ref| + lambda_f mean|F - F_ref| (+ lambda_lee * lee_term when given).
inline LossTerms task_loss(const Prediction& pred, const MolGraph& ref, const LossWeights& w,
                           const Var* lee_term = nullptr) {
  if (!ref.has_references()) throw TrainingError("loss: reference energy/forces missing");
  Tape& tape = *pred.energy.tape;
  const Shape& fs = pred.forces.shape();
  if (fs.size() != 2 || fs[0] != ref.forces->size() || fs[1] != 3) {
    throw ShapeError("loss: predicted forces " + shape_str(fs) + " vs " + std::to_string(ref.forces->size()) +
                     " reference atoms");
  }
  Var e_ref = tape.constant(Tensor::scalar(static_cast<float>(*ref.energy)));
  Var f_ref = tape.constant(forces_tensor(*ref.forces));
  LossTerms t;
  t.energy = abs(sub(pred.energy, e_ref));
  t.force = mean(abs(sub(pred.forces, f_ref)));
  t.total = add(scale(t.energy, static_cast<float>(w.energy)), scale(t.force, static_cast<float>(w.force)));
  if (lee_term && w.lee != 0.0) t.total = add(t.total, scale(*lee_term, static_cast<float>(w.lee)));
  return t;
}

// ---------------------------------------------------------------------------
// Local equivariance error

inline Tensor rotation_transposed_tensor(const Rotation& r) {
  Tensor t(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) t[3 * i + j] = static_cast<float>(r.m[j][i]);
  return t;
}

/// Differentiable LEE in meV/A: mean over atoms of |f(R G) - R f(G)|.
inline Var lee_term(const Var& forces, const Var& rotated_forces, const Rotation& r) {
  Tape& tape = *forces.tape;
  Var rf = matmul(forces, tape.constant(rotation_transposed_tensor(r)));
  return scale(mean(l2norm(sub(rotated_forces, rf))), 1000.0f);
}

/// Mean over atoms of |f(R G) - R f(G)| for one rotation, eV/A, in double.
inline double equivariance_error(const Predictor& f, const MolGraph& g, const ForcePrediction& base, const Rotation& r) {
  const ForcePrediction rot = f(rotate_graph(g, r));
  double s = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) s += norm(rot.forces[i] - r.apply(base.forces[i]));
  return s / static_cast<double>(g.size());
}

/// LEE in meV/A averaged over the given rotations.
inline double lee(const Predictor& f, const MolGraph& g, const std::vector<Rotation>& rotations) {
  if (rotations.empty()) throw TrainingError("lee: at least one rotation required");
  const ForcePrediction base = f(g);
  double s = 0.0;
  for (const Rotation& r : rotations) s += equivariance_error(f, g, base, r);
  return 1000.0 * s / static_cast<double>(rotations.size());
}

/// Rotation r of molecule m for evaluation, independent of everything else.
inline std::uint64_t eval_rotation_seed(std::uint64_t base, std::size_t molecule, std::size_t r) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(molecule), static_cast<std::uint32_t>(r), 0x1eeu};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline std::vector<Rotation> eval_rotations(std::uint64_t base, std::size_t molecule, std::size_t k) {
  std::vector<Rotation> rs;
  rs.reserve(k);
  for (std::size_t r = 0; r < k; ++r) rs.push_back(random_rotation(eval_rotation_seed(base, molecule, r)));
  return rs;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double e_mae_mev = 0.0;
  double f_mae_mev_a = 0.0;
  double lee_mev_a = 0.0;
  std::size_t molecules = 0;
};

struct EvalOptions {
  std::size_t lee_rotations = 8;  // 0 skips the LEE column
  std::uint64_t rotation_seed = 0;
};

inline EvalResult evaluate(const Predictor& f, const Dataset& ds, const EvalOptions& opt = {}) {
  if (ds.empty()) throw TrainingError("evaluate: empty dataset");
  EvalResult r;
  r.molecules = ds.size();
  for (std::size_t m = 0; m < ds.size(); ++m) {
    const MolGraph& g = ds.graphs[m];
    if (!g.has_references()) throw TrainingError("evaluate: molecule " + std::to_string(m) + " lacks references");
    const ForcePrediction p = f(g);
    r.e_mae_mev += 1000.0 * std::fabs(p.energy - *g.energy);
    double fe = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t c = 0; c < 3; ++c) fe += std::fabs(p.forces[i][c] - (*g.forces)[i][c]);
    r.f_mae_mev_a += 1000.0 * fe / static_cast<double>(3 * g.size());
    if (opt.lee_rotations > 0) {
      double s = 0.0;
      for (const Rotation& rot : eval_rotations(opt.rotation_seed, m, opt.lee_rotations))
        s += equivariance_error(f, g, p, rot);
      r.lee_mev_a += 1000.0 * s / static_cast<double>(opt.lee_rotations);
    }
  }
  const double n = static_cast<double>(ds.size());
  r.e_mae_mev /= n;
  r.f_mae_mev_a /= n;
  r.lee_mev_a /= n;
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam over a parameter store. Step-size parameters are clamped to the
/// minimum step after every update.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore& params, const std::map<std::string, std::vector<float>>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& [name, p] : params.all()) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      const std::vector<float>& g = it->second;
      auto& st = state_[name];
      if (st.m.empty()) {
        st.m.assign(g.size(), 0.0);
        st.v.assign(g.size(), 0.0);
      }
      const bool is_step = name.rfind("qstep.", 0) == 0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        st.m[i] = b1_ * st.m[i] + (1.0 - b1_) * g[i];
        st.v[i] = b2_ * st.v[i] + (1.0 - b2_) * static_cast<double>(g[i]) * g[i];
        const double upd = lr_ * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_);
        p[i] = static_cast<float>(p[i] - upd);
        if (is_step) p[i] = std::max(p[i], kMinStep);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double e_mae_mev = 0.0;    // validation
  double f_mae_mev_a = 0.0;  // validation
  double lee_mev_a = 0.0;    // validation
  double loss = 0.0;         // mean training loss
  double loss_energy = 0.0;
  double loss_force = 0.0;
  double loss_lee = 0.0;
  bool full_quant = false;

  nlohmann::ordered_json to_json() const {
    return {{"epoch", epoch},           {"e_mae_mev", e_mae_mev},     {"f_mae_mev_a", f_mae_mev_a},
            {"lee_mev_a", lee_mev_a},   {"loss", loss},               {"loss_energy", loss_energy},
            {"loss_force", loss_force}, {"loss_lee", loss_lee},       {"full_quant", full_quant}};
  }
};

struct TrainLog {
  std::vector<EpochRecord> records;

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : records) out += r.to_json().dump() + "\n";
    return out;
  }
};

struct TrainResult {
  Model model;
  TrainLog log;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

namespace detail {

inline void freeze_steps(Model& m, const ObserverSink& sink, bool vectors) {
  if (!vectors) {
    for (const auto& a : m.quant.activations) {
      Observer obs(a.bits, a.is_signed);
      auto it = sink.max_abs.find(a.name);
      if (it != sink.max_abs.end()) obs.observe(it->second);
      m.params.at(step_param(a.name)) = Tensor(Shape{1}, obs.calibrate().params.scale);
      m.phase[a.name] = QuantPhase::active;
    }
    return;
  }
  for (const auto& v : m.quant.vectors) {
    Observer obs(v.mag_bits, false);
    auto it = sink.max_abs.find(v.name);
    if (it != sink.max_abs.end()) obs.observe(it->second);
    m.params.at(step_param(v.name)) = Tensor(Shape{1}, obs.calibrate().params.scale);
    m.phase[v.name] = QuantPhase::active;
  }
}

inline void check_finite(double v, std::size_t epoch, const char* term) {
  if (!std::isfinite(v)) {
    throw TrainingError("non-finite " + std::string(term) + " loss in epoch " + std::to_string(epoch));
  }
}

}  // namespace detail

/// Observer pass over the first molecules; freezes scalar steps (and vector
/// steps when `vectors` is set).
inline void calibrate(Model& m, const Dataset& ds, std::size_t n_molecules, bool vectors) {
  if (ds.empty()) throw TrainingError("calibrate: empty dataset");
  ObserverSink sink;
  const std::size_t n = std::min(n_molecules == 0 ? ds.size() : n_molecules, ds.size());
  for (std::size_t i = 0; i < n; ++i) {
    Tape tape(false);
    ParamVars pv(tape, m.params, false);
    model_forward(tape, m, pv, prepare_features(ds.graphs[i], m.config), {nullptr, &sink});
  }
  detail::freeze_steps(m, sink, false);
  if (vectors) detail::freeze_steps(m, sink, true);
}

/// Staged QAT. Epochs [0, warmup) train with scalar fake quantization and the
/// vector quantizers observing; from `warmup` on, MDDQ is active and the LEE
/// term is added. With scheme fp32 this is ordinary training.
inline TrainResult qat_train(const Model& init, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                             const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train.empty()) throw TrainingError("qat_train: empty training set");
  if (val.empty()) throw TrainingError("qat_train: empty validation set");
  Model model = init.scheme() == cfg.scheme ? init : with_scheme(init, cfg.scheme);
  const bool q_scalar = quantizes_scalars(cfg.scheme);
  const bool q_vector = quantizes_vectors(cfg.scheme);
  if (q_scalar) {
    model.set_scalar_phase(QuantPhase::observe);
    model.set_vector_phase(QuantPhase::observe);
    calibrate(model, train, cfg.calibration_molecules, q_vector && cfg.warmup_epochs == 0);
  }

  std::vector<GraphFeatures> feats;
  feats.reserve(train.size());
  for (const auto& g : train.graphs) feats.push_back(prepare_features(g, model.config));

  std::mt19937_64 order_rng(cfg.seed);
  std::mt19937_64 rot_rng(cfg.seed ^ 0x5bd1e995ull);
  Adam opt(cfg.lr);
  TrainLog log;
  const LossWeights base_w{cfg.lambda_energy, cfg.lambda_force, 0.0};

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool full = epoch >= cfg.warmup_epochs;
    if (q_vector && full && model.phase_of(model.quant.vectors.front().name) != QuantPhase::active) {
      throw TrainingError("vector quantizers were not calibrated at the warm-up boundary");
    }
    const bool use_lee = q_vector && full && cfg.lambda_lee > 0.0;
    ObserverSink sink;
    ObserverSink* observing = (q_vector && !full) ? &sink : nullptr;

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(order_rng)]);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.full_quant = q_vector && full;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Rotation> rots;
      for (std::size_t k = 0; k < cfg.n_lee_rotations; ++k) rots.push_back(random_rotation(rot_rng()));
      std::map<std::string, std::vector<float>> grads;
      const float inv_batch = 1.0f / static_cast<float>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const MolGraph& g = train.graphs[order[b]];
        Tape tape;
        ParamVars pv(tape, model.params, true);
        Forward fwd(tape, model, pv, {nullptr, observing});
        Prediction pred = fwd.run(feats[order[b]]);
        Var lee_v;
        const Var* lee_ptr = nullptr;
        if (use_lee) {
          for (const Rotation& r : rots) {
            Prediction pr = fwd.run(prepare_features(rotate_graph(g, r), model.config));
            Var l = lee_term(pred.forces, pr.forces, r);
            lee_v = lee_v.valid() ? add(lee_v, l) : l;
          }
          lee_v = scale(lee_v, 1.0f / static_cast<float>(rots.size()));
          lee_ptr = &lee_v;
        }
        LossWeights w = base_w;
        w.lee = use_lee ? cfg.lambda_lee : 0.0;
        LossTerms lt = task_loss(pred, g, w, lee_ptr);
        const double total = lt.total.value().item();
        detail::check_finite(lt.energy.value().item(), epoch, "energy");
        detail::check_finite(lt.force.value().item(), epoch, "force");
        if (lee_ptr) detail::check_finite(lee_v.value().item(), epoch, "LEE");
        detail::check_finite(total, epoch, "total");
        rec.loss += total;
        rec.loss_energy += lt.energy.value().item();
        rec.loss_force += lt.force.value().item();
        if (lee_ptr) rec.loss_lee += lee_v.value().item();
        tape.backward(scale(lt.total, inv_batch));
        for (const auto& [name, v] : pv.all()) {
          if (!tape.has_grad(v)) continue;
          const Tensor gt = tape.grad_or_zeros(v);
          auto& acc = grads[name];
          if (acc.empty()) acc.assign(gt.numel(), 0.0f);
          for (std::size_t i = 0; i < gt.numel(); ++i) acc[i] += gt[i];
        }
      }
      opt.step(model.params, grads);
    }
    const double n = static_cast<double>(train.size());
    rec.loss /= n;
    rec.loss_energy /= n;
    rec.loss_force /= n;
    rec.loss_lee /= n;

    const EvalResult ev = evaluate(make_predictor(model), val, {cfg.val_lee_rotations, cfg.seed + 1});
    rec.e_mae_mev = ev.e_mae_mev;
    rec.f_mae_mev_a = ev.f_mae_mev_a;
    rec.lee_mev_a = ev.lee_mev_a;
    log.records.push_back(rec);
    if (on_epoch) on_epoch(rec);
    // vector steps come from the warm-up statistics and go live next epoch
    if (q_vector && epoch + 1 == cfg.warmup_epochs) detail::freeze_steps(model, sink, true);
  }
  return {std::move(model), std::move(log)};
}

}  // namespace equiquant
