#pragma once

// Integer inference: int8 activations, int8/int4 weights, int32 accumulation and
// a float requantization multiplier per output channel. Everything that is not
// a quantized linear layer (attention softmax, norms, MDDQ renormalisation,
// embedding and readout heads) runs in float.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "equiquant/checkpoint.hpp"
#include "equiquant/model.hpp"
#include "equiquant/quantizers.hpp"

namespace equiquant {

inline constexpr std::size_t kMaxQLinearInputs = 4096;

/// Quantized linear layer. Weights are row-major [out, in].
struct QLinear {
  std::string name;
  std::size_t in = 0, out = 0;
  int weight_bits = 8;
  std::vector<std::int8_t> weights;
  std::vector<float> w_scales;
  float in_scale = 1.0f;
  float out_scale = 1.0f;
  std::vector<std::int32_t> bias;  // on the grid in_scale * w_scales[c]
  std::vector<float> multiplier;   // in_scale * w_scales[c] / out_scale
  int act_qmin = -128, act_qmax = 127;

  void finalize() {
    if (in == 0 || out == 0) throw std::invalid_argument("QLinear " + name + ": empty layer");
    if (in > kMaxQLinearInputs) {
      throw std::invalid_argument("QLinear " + name + ": more than 4096 inputs could overflow the int32 accumulator");
    }
    if (weights.size() != in * out || w_scales.size() != out || bias.size() != out) {
      throw std::invalid_argument("QLinear " + name + ": inconsistent sizes");
    }
    const int wmax = (1 << (weight_bits - 1)) - 1;
    for (std::int8_t w : weights)
      if (w < -wmax - 1 || w > wmax) throw std::invalid_argument("QLinear " + name + ": weight outside its bit range");
    for (std::int32_t b : bias)
      if (b < -kBiasCodeLimit || b > kBiasCodeLimit) throw std::invalid_argument("QLinear " + name + ": bias too large");
    multiplier.resize(out);
    for (std::size_t c = 0; c < out; ++c) {
      multiplier[c] = in_scale * w_scales[c] / out_scale;
      if (!(multiplier[c] > 0.0f) || !std::isfinite(multiplier[c])) {
        throw std::invalid_argument("QLinear " + name + ": requantization multiplier must be finite and positive");
      }
    }
  }
};

/// y = clamp(round((W x + b) * multiplier)) for `rows` input rows of length `in`.
inline std::vector<std::int8_t> qlinear_forward(std::span<const std::int8_t> x, std::size_t rows, const QLinear& l) {
  if (x.size() != rows * l.in) throw ShapeError("qlinear_forward: input does not match layer " + l.name);
  std::vector<std::int8_t> y(rows * l.out);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int8_t* xr = x.data() + r * l.in;
    for (std::size_t c = 0; c < l.out; ++c) {
      const std::int8_t* wr = l.weights.data() + c * l.in;
      std::int32_t acc = l.bias[c];
      for (std::size_t k = 0; k < l.in; ++k) acc += static_cast<std::int32_t>(wr[k]) * static_cast<std::int32_t>(xr[k]);
      const float v = round_half_away(static_cast<float>(acc) * l.multiplier[c]);
      y[r * l.out + c] = static_cast<std::int8_t>(
          std::clamp(v, static_cast<float>(l.act_qmin), static_cast<float>(l.act_qmax)));
    }
  }
  return y;
}

inline std::vector<std::int8_t> quantize_activations(std::span<const float> x, float scale, int qmin = -128,
                                                     int qmax = 127) {
  std::vector<std::int8_t> q(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) q[i] = static_cast<std::int8_t>(quantize_code(x[i], scale, qmin, qmax));
  return q;
}

// ---------------------------------------------------------------------------
// Conversion

/// Integer checkpoint from a float checkpoint with frozen quantization params.
/// Quantized linear weights become i8 (or packed i4 for 4-bit weights); biases
/// stay f32 and are folded onto the accumulator grid when layers are loaded.
inline Checkpoint convert(const Checkpoint& fp) {
  const ModelConfig cfg = read_model_config(fp);
  Scheme scheme;
  try {
    scheme = parse_scheme(fp.config_value("scheme").value_or("fp32"));
  } catch (const ModelError& e) {
    throw CheckpointError(e.what());
  }
  Checkpoint out = fp;
  if (scheme == Scheme::fp32) return out;
  const QuantDescription desc = attach_quantizers(cfg, scheme);
  auto require = [&](const std::string& tensor, const std::string& layer) -> const CheckpointTensor& {
    const CheckpointTensor& t = fp.at(tensor);
    if (!t.quant) throw CheckpointError("missing QuantParams on quantized layer " + layer + " (" + tensor + ")");
    return t;
  };
  for (const auto& l : desc.linears) {
    if (!l.quantized) continue;
    const CheckpointTensor& w = require(l.name + ".w", l.name);
    require(step_param(l.name + ".in"), l.name);
    require(step_param(l.name + ".out"), l.name);
    if (w.dtype != DType::f32) throw CheckpointError("checkpoint is already converted (" + w.name + ")");
    if (w.quant->bits != l.weight_bits) throw CheckpointError("weight bits of " + l.name + " do not match the scheme");
    CheckpointTensor* dst = out.find(w.name);
    dst->ints = quantize_weight_codes(w.to_tensor(), *w.quant);
    dst->f32.clear();
    dst->dtype = l.weight_bits <= 4 ? DType::i4 : DType::i8;
  }
  for (const auto& a : desc.activations) require(step_param(a.name), a.name);
  for (const auto& v : desc.vectors) require(step_param(v.name), v.name);
  out.set_config("format", "integer");
  return out;
}

/// Integer realisation of a converted checkpoint.
class IntegerModel : public IntegerLinearBackend {
 public:
  explicit IntegerModel(const Checkpoint& ck) : model_(model_from_checkpoint(ck)) {
    for (const auto& spec : model_.quant.linears) {
      if (!spec.quantized) continue;
      const CheckpointTensor& w = ck.at(spec.name + ".w");
      if (w.dtype == DType::f32) throw CheckpointError("tensor " + w.name + " is not converted to integers");
      QLinear q;
      q.name = spec.name;
      q.in = spec.in;
      q.out = spec.out;
      q.weight_bits = w.quant->bits;
      q.weights.resize(q.in * q.out);
      for (std::size_t k = 0; k < q.in; ++k)
        for (std::size_t c = 0; c < q.out; ++c) q.weights[c * q.in + k] = w.ints[k * q.out + c];
      q.w_scales = channel_scales(*w.quant, q.out);
      q.in_scale = model_.params.at(step_param(spec.name + ".in")).item();
      q.out_scale = model_.params.at(step_param(spec.name + ".out")).item();
      q.bias.assign(q.out, 0);
      if (spec.bias) {
        const Tensor& b = model_.params.at(spec.name + ".b");
        for (std::size_t c = 0; c < q.out; ++c) q.bias[c] = bias_code(b[c], q.in_scale * q.w_scales[c]);
      }
      try {
        q.finalize();
      } catch (const std::invalid_argument& e) {
        throw CheckpointError(e.what());
      }
      layers_.emplace(spec.name, std::move(q));
    }
  }

  bool has(const std::string& layer) const override { return layers_.count(layer) != 0; }

  Tensor forward(const std::string& layer, const Tensor& x) const override {
    const QLinear& l = this->layer(layer);
    if (x.rank() != 2 || x.dim(1) != l.in) throw ShapeError("integer " + layer + ": input " + shape_str(x.shape()));
    const std::vector<std::int8_t> q = quantize_activations(x.data(), l.in_scale, l.act_qmin, l.act_qmax);
    const std::vector<std::int8_t> y = qlinear_forward(q, x.dim(0), l);
    Tensor out(Shape{x.dim(0), l.out});
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = static_cast<float>(y[i]) * l.out_scale;
    return out;
  }

  const QLinear& layer(const std::string& name) const {
    auto it = layers_.find(name);
    if (it == layers_.end()) throw ModelError("no integer layer " + name);
    return it->second;
  }
  const std::map<std::string, QLinear>& layers() const noexcept { return layers_; }
  const Model& model() const noexcept { return model_; }

  ForcePrediction predict(const MolGraph& g) const { return equiquant::predict(model_, g, this); }
  Predictor predictor() const {
    return [this](const MolGraph& g) { return predict(g); };
  }

 private:
  Model model_;
  std::map<std::string, QLinear> layers_;
};

// ---------------------------------------------------------------------------
// Cost model

enum class Arch { schnet, painn, spookynet, nequip, so3krates };

inline Arch parse_arch(std::string_view s) {
  if (s == "schnet") return Arch::schnet;
  if (s == "painn") return Arch::painn;
  if (s == "spookynet") return Arch::spookynet;
  if (s == "nequip") return Arch::nequip;
  if (s == "so3krates") return Arch::so3krates;
  throw std::invalid_argument("unknown architecture '" + std::string(s) + "'");
}

struct CostModel {
  double n = 1.0;              // atoms
  double avg_neighbors = 1.0;  // <N>
  double F = 1.0;              // feature channels
  int l_max = 0;
  int k = 32;  // bits
};

struct Cost {
  double c_full = 0.0;  // per-layer asymptotic term, FP32
  double rho = 1.0;     // k / 32
  double speedup = 1.0;  // 32 / k
  double c_quant() const { return c_full * rho; }
};

inline Cost theoretical_cost(const CostModel& cm, Arch arch) {
  if (cm.k != 4 && cm.k != 8 && cm.k != 16 && cm.k != 32) throw std::invalid_argument("cost model: k must be 4, 8, 16 or 32");
  if (cm.l_max < 0 || cm.l_max > 3) throw std::invalid_argument("cost model: l_max must be in 0..3");
  if (!(cm.n > 0) || !(cm.avg_neighbors > 0) || !(cm.F > 0)) {
    throw std::invalid_argument("cost model: n, <N> and F must be positive");
  }
  const double nn = cm.n * cm.avg_neighbors;
  const double l1 = cm.l_max + 1.0;
  Cost c;
  switch (arch) {
    case Arch::schnet: c.c_full = nn * cm.F; break;
    case Arch::painn: c.c_full = nn * 4.0 * cm.F; break;
    case Arch::spookynet: c.c_full = nn * l1 * l1 * cm.F; break;
    case Arch::nequip: c.c_full = nn * std::pow(l1, 6) * cm.F; break;
    case Arch::so3krates: c.c_full = nn * (l1 * l1 + cm.F); break;
  }
  c.rho = cm.k / 32.0;
  c.speedup = 32.0 / cm.k;
  return c;
}

// ---------------------------------------------------------------------------
// Benchmarks

inline constexpr std::size_t kBenchWarmup = 10;

struct LatencyRow {
  std::string variant;
  std::size_t runs = 0;
  double median_us = 0.0;
  double mean_us = 0.0;
  double speedup = 1.0;  // t_reference / t_variant (medians)
};

struct BenchVariant {
  std::string name;
  Predictor predict;
};

/// Times each variant on one graph; the first variant is the reference.
inline std::vector<LatencyRow> bench(const std::vector<BenchVariant>& variants, const MolGraph& g, std::size_t n_runs) {
  if (n_runs == 0) throw std::invalid_argument("bench: n_runs must be at least 1");
  std::vector<LatencyRow> rows;
  for (const auto& v : variants) {
    for (std::size_t i = 0; i < kBenchWarmup; ++i) (void)v.predict(g);
    std::vector<double> us(n_runs);
    for (std::size_t i = 0; i < n_runs; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const ForcePrediction p = v.predict(g);
      const auto t1 = std::chrono::steady_clock::now();
      if (!std::isfinite(p.energy)) throw ModelError("bench: non-finite prediction from " + v.name);
      us[i] = std::chrono::duration<double, std::micro>(t1 - t0).count();
    }
    LatencyRow r;
    r.variant = v.name;
    r.runs = n_runs;
    r.mean_us = std::accumulate(us.begin(), us.end(), 0.0) / static_cast<double>(n_runs);
    std::sort(us.begin(), us.end());
    r.median_us = n_runs % 2 ? us[n_runs / 2] : 0.5 * (us[n_runs / 2 - 1] + us[n_runs / 2]);
    rows.push_back(r);
  }
  for (auto& r : rows) r.speedup = rows.front().median_us / r.median_us;
  return rows;
}

struct MemoryRow {
  std::string tensor;
  std::size_t fp32_bytes = 0;
  std::size_t quant_bytes = 0;
};

struct MemoryReport {
  std::vector<MemoryRow> rows;
  std::size_t fp32_total = 0;
  std::size_t quant_total = 0;
  double ratio() const { return fp32_total ? static_cast<double>(quant_total) / static_cast<double>(fp32_total) : 1.0; }
};

/// Serialized record bytes of the integer tensors of `quant` against the same
/// tensors stored as plain FP32 records.
inline MemoryReport memory_report(const Checkpoint& quant) {
  MemoryReport m;
  for (const auto& t : quant.tensors) {
    if (t.dtype == DType::f32) continue;
    CheckpointTensor plain;
    plain.name = t.name;
    plain.shape = t.shape;
    plain.f32.assign(t.numel(), 0.0f);
    MemoryRow r{t.name, record_bytes(plain), record_bytes(t)};
    m.fp32_total += r.fp32_bytes;
    m.quant_total += r.quant_bytes;
    m.rows.push_back(std::move(r));
  }
  return m;
}

}  // namespace equiquant
