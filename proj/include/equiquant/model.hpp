#pragma once

// Two-branch SO(3)-equivariant transformer.
//
// Every atom carries invariant scalars h0 [F0] and equivariant vectors
// h1 [F1, 3]. Attention is computed from h0 only (l2-normalised queries and
// keys plus a learned bias of the radial basis), and the same attention weights
// modulate both the scalar messages and the vector messages
//   s_ij * rhat_ij + t_ij * h1_j
// where s, t are invariant gates. Vectors are only ever scaled by invariant
// quantities, so the network is exactly equivariant in exact arithmetic.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "equiquant/autograd.hpp"
#include "equiquant/geometry.hpp"
#include "equiquant/quantizers.hpp"
#include "equiquant/tensor.hpp"

namespace equiquant {

/// Invalid model input or configuration.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t F0 = 32;
  std::size_t F1 = 32;
  std::size_t n_layers = 3;
  std::size_t n_rbf = 16;
  std::size_t d_attn = 32;
  double cutoff = 5.0;
  std::vector<int> species{10, 18};  // atomic numbers, one embedding row each

  std::size_t n_species() const noexcept { return species.size(); }

  void validate() const {
    if (!F0 || !F1 || !n_layers || !n_rbf || !d_attn || species.empty() || !(cutoff > 0.0)) {
      throw ModelError("ModelConfig: all sizes and the cutoff must be positive");
    }
    if (std::set<int>(species.begin(), species.end()).size() != species.size()) {
      throw ModelError("ModelConfig: duplicate species");
    }
  }

  int species_index(int z) const {
    for (std::size_t i = 0; i < species.size(); ++i)
      if (species[i] == z) return static_cast<int>(i);
    throw ModelError("embed: unknown species Z=" + std::to_string(z));
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Scheme { fp32, int8_scalar, int8_full, w4a8 };

inline std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::fp32: return "fp32";
    case Scheme::int8_scalar: return "int8-scalar";
    case Scheme::int8_full: return "int8-full";
    case Scheme::w4a8: return "w4a8";
  }
  return "?";
}

inline Scheme parse_scheme(std::string_view s) {
  if (s == "fp32") return Scheme::fp32;
  if (s == "int8-scalar" || s == "int8-scalar-only") return Scheme::int8_scalar;
  if (s == "int8-full") return Scheme::int8_full;
  if (s == "w4a8") return Scheme::w4a8;
  throw ModelError("unknown quantization scheme '" + std::string(s) + "'");
}

inline bool quantizes_scalars(Scheme s) noexcept { return s != Scheme::fp32; }
inline bool quantizes_vectors(Scheme s) noexcept { return s == Scheme::int8_full || s == Scheme::w4a8; }

// ---------------------------------------------------------------------------
// Quantizer attachment

struct LinearSpec {
  std::string name;
  std::size_t in = 0, out = 0;
  bool bias = true;
  bool quantized = false;
  int weight_bits = 32;
};

struct ActivationQuantSpec {
  std::string name;
  int bits = 8;
  bool is_signed = true;
};

struct VectorQuantSpec {
  std::string name;
  int mag_bits = 8;
  int dir_bits = 8;
};

/// Which linear layers carry weight/activation quantizers and where MDDQ sits.
struct QuantDescription {
  Scheme scheme = Scheme::fp32;
  std::vector<LinearSpec> linears;
  std::vector<ActivationQuantSpec> activations;
  std::vector<VectorQuantSpec> vectors;

  std::size_t quantizer_count() const {
    std::size_t n = activations.size() + vectors.size();
    for (const auto& l : linears) n += l.quantized ? 1 : 0;
    return n;
  }

  const LinearSpec& linear(const std::string& name) const {
    for (const auto& l : linears)
      if (l.name == name) return l;
    throw ModelError("no linear layer named " + name);
  }
};

inline std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l) + "."; }

/// Quantizer placement: the embedding and both readout heads stay FP32; every
/// interaction-layer linear map gets per-channel weight and per-tensor input and
/// output quantizers; the post-layer scalar state gets an activation quantizer
/// and the post-layer vector state gets MDDQ (vector schemes only).
inline QuantDescription attach_quantizers(const ModelConfig& cfg, Scheme scheme) {
  cfg.validate();
  QuantDescription d;
  d.scheme = scheme;
  const bool q = quantizes_scalars(scheme);
  const int wbits = scheme == Scheme::w4a8 ? 4 : 8;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    const std::vector<LinearSpec> layer{
        {p + "query", cfg.F0, cfg.d_attn, true, q, wbits},
        {p + "key", cfg.F0, cfg.d_attn, true, q, wbits},
        {p + "attn_bias", cfg.n_rbf, 1, true, q, wbits},
        {p + "value", cfg.F0, cfg.F0, true, q, wbits},
        {p + "mlp1", cfg.F0, cfg.F0, true, q, wbits},
        {p + "mlp2", cfg.F0, cfg.F0, true, q, wbits},
        {p + "gate", cfg.F0, 2 * cfg.F1, true, q, wbits},
        {p + "gate_rbf", cfg.n_rbf, 2 * cfg.F1, false, q, wbits},
    };
    for (const auto& spec : layer) {
      d.linears.push_back(spec);
      if (q) {
        d.activations.push_back({spec.name + ".in", 8, true});
        d.activations.push_back({spec.name + ".out", 8, true});
      }
    }
    if (q) d.activations.push_back({p + "h0", 8, true});
    if (quantizes_vectors(scheme)) d.vectors.push_back({p + "h1", 8, 8});
  }
  d.linears.push_back({"energy_head", cfg.F0, 1, true, false, 32});
  return d;
}

// ---------------------------------------------------------------------------
// Parameters

/// Named parameter tensors, iterated in name order.
class ParamStore {
 public:
  void set(const std::string& name, Tensor t) { params_[name] = std::move(t); }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ModelError("missing parameter " + name);
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ModelError("missing parameter " + name);
    return it->second;
  }
  const std::map<std::string, Tensor>& all() const noexcept { return params_; }
  std::map<std::string, Tensor>& all() noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_) n += v.numel();
    return n;
  }

  friend bool operator==(const ParamStore&, const ParamStore&) = default;

 private:
  std::map<std::string, Tensor> params_;
};

inline std::string step_param(const std::string& quantizer) { return "qstep." + quantizer; }

enum class QuantPhase { off, observe, active };

struct Model {
  ModelConfig config;
  QuantDescription quant;
  ParamStore params;
  std::map<std::string, QuantPhase> phase;  // activation and vector quantizers

  Scheme scheme() const noexcept { return quant.scheme; }

  QuantPhase phase_of(const std::string& quantizer) const {
    auto it = phase.find(quantizer);
    return it == phase.end() ? QuantPhase::off : it->second;
  }

  void set_scalar_phase(QuantPhase p) {
    for (const auto& a : quant.activations) phase[a.name] = p;
  }
  void set_vector_phase(QuantPhase p) {
    for (const auto& v : quant.vectors) phase[v.name] = p;
  }
};

namespace detail {

inline Tensor xavier(std::mt19937_64& rng, std::size_t in, std::size_t out) {
  const float a = std::sqrt(6.0f / static_cast<float>(in + out));
  std::uniform_real_distribution<float> u(-a, a);
  Tensor t(Shape{in, out});
  for (float& v : t.data()) v = u(rng);
  return t;
}

}  // namespace detail

/// Fresh model with deterministic initialisation. Quantizers start in the
/// observe phase (pass-through while collecting statistics).
inline Model make_model(const ModelConfig& cfg, Scheme scheme, std::uint64_t seed) {
  Model m;
  m.config = cfg;
  m.quant = attach_quantizers(cfg, scheme);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);

  Tensor embed(Shape{cfg.n_species(), cfg.F0});
  for (float& v : embed.data()) v = normal(rng);
  m.params.set("embed", std::move(embed));
  for (const auto& l : m.quant.linears) {
    m.params.set(l.name + ".w", detail::xavier(rng, l.in, l.out));
    if (l.bias) m.params.set(l.name + ".b", Tensor(Shape{l.out}, 0.0f));
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    m.params.set(p + "vgate_a", Tensor(Shape{cfg.F1}, 0.0f));
    m.params.set(p + "vgate_b", Tensor(Shape{cfg.F1}, 1.2785f));  // silu(1.2785) ~= 1
  }
  Tensor fw(Shape{cfg.F1});
  const float fs = 1.0f / std::sqrt(static_cast<float>(cfg.F1));
  for (float& v : fw.data()) v = fs * normal(rng);
  m.params.set("force_head.w", std::move(fw));

  for (const auto& a : m.quant.activations) {
    m.params.set(step_param(a.name), Tensor(Shape{1}, 1.0f));
    m.phase[a.name] = QuantPhase::observe;
  }
  for (const auto& v : m.quant.vectors) {
    m.params.set(step_param(v.name), Tensor(Shape{1}, 1.0f));
    m.phase[v.name] = QuantPhase::observe;
  }
  return m;
}

/// Same weights under another quantization scheme (fresh quantizer state).
inline Model with_scheme(const Model& src, Scheme scheme) {
  Model m = make_model(src.config, scheme, 0);
  for (auto& [name, t] : m.params.all())
    if (src.params.contains(name) && name.rfind("qstep.", 0) != 0) t = src.params.at(name);
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

/// Per-molecule inputs derived from the geometry: directed edges i <- j for
/// every neighbor pair, unit displacements and radial features.
struct GraphFeatures {
  std::size_t n_atoms = 0;
  std::vector<int> species_index;
  IndexList centers;    // receiving atom i of each edge
  IndexList neighbors;  // sending atom j of each edge
  Tensor rhat;          // [E, 3], (r_j - r_i) / |r_j - r_i|
  Tensor rbf;           // [E, n_rbf]

  std::size_t n_edges() const noexcept { return centers->size(); }
};

inline GraphFeatures prepare_features(const MolGraph& g, const ModelConfig& cfg) {
  if (g.size() == 0) throw ModelError("forward: empty graph");
  if (g.neighbors.size() != g.size()) throw ModelError("forward: graph has no neighbor lists");
  if (std::fabs(g.cutoff - cfg.cutoff) > 1e-12) {
    throw ModelError("forward: graph cutoff " + std::to_string(g.cutoff) + " differs from model cutoff " +
                     std::to_string(cfg.cutoff));
  }
  GraphFeatures f;
  f.n_atoms = g.size();
  f.species_index.reserve(g.size());
  for (int z : g.species) f.species_index.push_back(cfg.species_index(z));
  std::vector<int> ci, nj;
  for (std::size_t i = 0; i < g.size(); ++i)
    for (int j : g.neighbors[i]) {
      ci.push_back(static_cast<int>(i));
      nj.push_back(j);
    }
  const std::size_t e = ci.size();
  f.rhat = Tensor(Shape{e, 3});
  f.rbf = Tensor(Shape{e, cfg.n_rbf});
  for (std::size_t k = 0; k < e; ++k) {
    const Vec3 d = g.positions[static_cast<std::size_t>(nj[k])] - g.positions[static_cast<std::size_t>(ci[k])];
    const double r = norm(d);
    for (int c = 0; c < 3; ++c) f.rhat[3 * k + static_cast<std::size_t>(c)] = static_cast<float>(d[c] / r);
    const std::vector<double> b = rbf_expand(std::min(r, cfg.cutoff), cfg.n_rbf, cfg.cutoff);
    for (std::size_t c = 0; c < cfg.n_rbf; ++c) f.rbf[k * cfg.n_rbf + c] = static_cast<float>(b[c]);
  }
  f.centers = make_index(std::move(ci));
  f.neighbors = make_index(std::move(nj));
  return f;
}

inline constexpr float kAttentionEps = 1e-6f;

/// softmax_j(<q_i/|q_i|, k_j/|k_j|> / sqrt(d) + bias_ij) per receiving atom i.
/// The cosines (before scaling and bias) are returned through `cosines`.
inline Var normalized_attention(Var q, Var k, Var bias, const GraphFeatures& g, Var* cosines = nullptr) {
  Var qn = div(q, add_scalar(l2norm(q), kAttentionEps));
  Var kn = div(k, add_scalar(l2norm(k), kAttentionEps));
  Var dots = sum_axis(mul(gather_rows(qn, g.centers), gather_rows(kn, g.neighbors)), 1);
  if (cosines) *cosines = dots;
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(q.shape().back()));
  return segment_softmax(add(scale(dots, inv_sqrt_d), bias), g.centers, g.n_atoms);
}

/// Integer execution of quantized linear layers (implemented by the integer
/// inference runtime). `forward` receives the float input and returns the
/// dequantized output on the layer's output grid.
class IntegerLinearBackend {
 public:
  virtual ~IntegerLinearBackend() = default;
  virtual bool has(const std::string& layer) const = 0;
  virtual Tensor forward(const std::string& layer, const Tensor& x) const = 0;
};

/// Running maxima collected while quantizers are in the observe phase.
struct ObserverSink {
  std::map<std::string, float> max_abs;

  void record(const std::string& name, float v) {
    float& m = max_abs[name];
    if (std::isfinite(v)) m = std::max(m, v);
  }
  void merge(const ObserverSink& o) {
    for (const auto& [k, v] : o.max_abs) record(k, v);
  }
};

/// Parameters bound as tape leaves.
class ParamVars {
 public:
  ParamVars(Tape& tape, const ParamStore& params, bool trainable) {
    for (const auto& [name, t] : params.all()) vars_.emplace(name, tape.leaf(t, trainable));
  }
  Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ModelError("unbound parameter " + name);
    return it->second;
  }
  const std::map<std::string, Var>& all() const noexcept { return vars_; }
  /// Substitute a parameter with another node of the same tape.
  void rebind(const std::string& name, Var v) {
    if (!vars_.count(name)) throw ModelError("unbound parameter " + name);
    vars_[name] = v;
  }

 private:
  std::map<std::string, Var> vars_;
};

struct ForwardOptions {
  const IntegerLinearBackend* integer = nullptr;
  ObserverSink* observers = nullptr;
};

struct Prediction {
  Var energy;  // scalar, eV
  Var forces;  // [N, 3], eV/A
};

/// Per-layer intermediate state, exposed for equivariance tests.
struct NodeFeatures {
  Var h0;  // [N, F0]
  Var h1;  // [N, F1, 3]
};

class Forward {
 public:
  Forward(Tape& tape, const Model& model, const ParamVars& params, ForwardOptions opts = {})
      : tape_(tape), model_(model), p_(params), opts_(opts) {}

  NodeFeatures embed(const GraphFeatures& g) {
    const IndexList idx = make_index(g.species_index);
    Var h0 = gather_rows(p_["embed"], idx);
    Var h1 = tape_.constant(Tensor(Shape{g.n_atoms, model_.config.F1, 3}, 0.0f));
    return {h0, h1};
  }

  /// Attention weights alpha_ij over the directed edges, shape [E].
  Var attention(const std::string& prefix, Var h0, const GraphFeatures& g, Var* cosines = nullptr) {
    Var q = linear(prefix + "query", h0);
    Var k = linear(prefix + "key", h0);
    Var bias = reshape(linear(prefix + "attn_bias", tape_.constant(g.rbf)), Shape{g.n_edges()});
    return normalized_attention(q, k, bias, g, cosines);
  }

  NodeFeatures layer(std::size_t l, const NodeFeatures& in, const GraphFeatures& g) {
    const ModelConfig& c = model_.config;
    const std::string p = layer_prefix(l);
    const std::size_t n = g.n_atoms, e = g.n_edges();
    if (e == 0) return in;  // isolated atoms: residual only
    Var alpha = attention(p, in.h0, g);
    Var alpha_col = reshape(alpha, Shape{e, 1});

    // invariant branch
    Var v = gather_rows(linear(p + "value", in.h0), g.neighbors);
    Var agg0 = scatter_add_rows(mul(v, alpha_col), g.centers, n);
    Var upd0 = linear(p + "mlp2", silu(linear(p + "mlp1", agg0)));
    Var h0 = activation(p + "h0", add(in.h0, upd0));

    // equivariant branch
    Var gates = add(gather_rows(linear(p + "gate", in.h0), g.neighbors),
                    linear(p + "gate_rbf", tape_.constant(g.rbf)));
    Var s = reshape(slice_last(gates, 0, c.F1), Shape{e, c.F1, 1});
    Var t = reshape(slice_last(gates, c.F1, 2 * c.F1), Shape{e, c.F1, 1});
    Var rhat = reshape(tape_.constant(g.rhat), Shape{e, 1, 3});
    Var h1j = gather_rows(in.h1, g.neighbors);
    Var msg = add(mul(s, rhat), mul(t, h1j));
    Var agg1 = scatter_add_rows(mul(msg, reshape(alpha, Shape{e, 1, 1})), g.centers, n);
    Var h1 = add(in.h1, agg1);

    // gated nonlinearity: each vector scaled by silu(a * |v| + b)
    Var norms = reshape(l2norm(h1), Shape{n, c.F1});
    Var gate = silu(add(mul(norms, p_[p + "vgate_a"]), p_[p + "vgate_b"]));
    h1 = mul(h1, reshape(gate, Shape{n, c.F1, 1}));
    h1 = vector_quant(p + "h1", h1);
    return {h0, h1};
  }

  Prediction readout(const NodeFeatures& f) {
    Var e_atom = linear("energy_head", f.h0);
    Var energy = sum(e_atom);
    Var w = reshape(p_["force_head.w"], Shape{model_.config.F1, 1});
    Var forces = sum_axis(mul(f.h1, w), 1);
    return {energy, forces};
  }

  Prediction run(const GraphFeatures& g) {
    NodeFeatures f = embed(g);
    for (std::size_t l = 0; l < model_.config.n_layers; ++l) f = layer(l, f, g);
    return readout(f);
  }

  /// y = x W + b with the configured fake quantization or integer execution.
  Var linear(const std::string& name, Var x) {
    const LinearSpec& spec = model_.quant.linear(name);
    Var w = p_[name + ".w"];
    if (!spec.quantized) {
      Var y = matmul(x, w);
      return spec.bias ? add(y, p_[name + ".b"]) : y;
    }
    const std::string in_q = name + ".in", out_q = name + ".out";
    const bool calibrated =
        model_.phase_of(in_q) == QuantPhase::active && model_.phase_of(out_q) == QuantPhase::active;
    if (calibrated && opts_.integer && opts_.integer->has(name)) {
      Tensor y = opts_.integer->forward(name, x.value());
      return tape_.record(OpKind::integer_linear, std::move(y), {x}, {});
    }
    Var xq = activation(in_q, x);
    const QuantParams wp = weight_quant_params(w.value(), spec.weight_bits);
    Var y = matmul(xq, fake_quantize_weight(w, wp));
    if (spec.bias) {
      Var b = p_[name + ".b"];
      if (model_.phase_of(in_q) == QuantPhase::active) {
        b = fake_quantize_bias(b, p_[step_param(in_q)].value().item(), channel_scales(wp, spec.out));
      }
      y = add(y, b);
    }
    return activation(out_q, y);
  }

  Var activation(const std::string& name, Var x) {
    switch (model_.phase_of(name)) {
      case QuantPhase::off: return x;
      case QuantPhase::observe:
        if (opts_.observers) {
          float m = 0.0f;
          for (float v : x.value().data()) m = std::max(m, std::fabs(v));
          opts_.observers->record(name, m);
        }
        return x;
      case QuantPhase::active: break;
    }
    const ActivationQuantSpec* spec = nullptr;
    for (const auto& a : model_.quant.activations)
      if (a.name == name) spec = &a;
    if (!spec) throw ModelError("no activation quantizer named " + name);
    return fake_quantize(x, p_[step_param(name)], spec->bits, spec->is_signed);
  }

  Var vector_quant(const std::string& name, Var h1) {
    switch (model_.phase_of(name)) {
      case QuantPhase::off: return h1;
      case QuantPhase::observe:
        if (opts_.observers) {
          const Tensor& v = h1.value();
          float m = 0.0f;
          for (std::size_t r = 0; r < v.numel() / 3; ++r)
            m = std::max(m, canonical_norm({v[3 * r], v[3 * r + 1], v[3 * r + 2]}));
          opts_.observers->record(name, m);
        }
        return h1;
      case QuantPhase::active: break;
    }
    for (const auto& spec : model_.quant.vectors)
      if (spec.name == name) return mddq(h1, p_[step_param(name)], spec.mag_bits, spec.dir_bits);
    throw ModelError("no vector quantizer named " + name);
  }

 private:
  Tape& tape_;
  const Model& model_;
  const ParamVars& p_;
  ForwardOptions opts_;
};

inline Prediction model_forward(Tape& tape, const Model& model, const ParamVars& params, const GraphFeatures& g,
                                ForwardOptions opts = {}) {
  return Forward(tape, model, params, opts).run(g);
}

/// Plain-number model output.
struct ForcePrediction {
  double energy = 0.0;
  std::vector<Vec3> forces;
};

using Predictor = std::function<ForcePrediction(const MolGraph&)>;

inline ForcePrediction to_prediction(const Prediction& p) {
  ForcePrediction out;
  out.energy = p.energy.value().item();
  const Tensor& f = p.forces.value();
  out.forces.resize(f.dim(0));
  for (std::size_t i = 0; i < f.dim(0); ++i)
    out.forces[i] = {f[3 * i], f[3 * i + 1], f[3 * i + 2]};
  return out;
}

inline ForcePrediction predict(const Model& model, const MolGraph& g, const IntegerLinearBackend* integer = nullptr) {
  Tape tape(false);
  ParamVars pv(tape, model.params, false);
  return to_prediction(model_forward(tape, model, pv, prepare_features(g, model.config), {integer, nullptr}));
}

inline Predictor make_predictor(const Model& model, const IntegerLinearBackend* integer = nullptr) {
  return [&model, integer](const MolGraph& g) { return predict(model, g, integer); };
}

}  // namespace equiquant
