#pragma once

// Scalar fake quantization with learned step sizes, per-output-channel weight
// quantization, naive per-component vector quantization and
// magnitude-direction decoupled quantization (MDDQ) of 3-vectors.
//
// All quantizers are symmetric around zero (zero_point == 0) and round half
// away from zero.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "equiquant/autograd.hpp"
#include "equiquant/tensor.hpp"

namespace equiquant {

enum class Granularity : std::uint8_t { per_tensor = 0, per_channel = 1 };

inline constexpr float kMinStep = 1e-8f;
inline constexpr int kChannelCodeMax = 255;

/// Parameters of one uniform quantizer.
///
/// Per-channel weight quantizers store their scales in two levels: `scale` is
/// the largest channel scale and `channel_codes[c]` in [1, 255] gives channel c
/// the scale `scale * code / 255`.
struct QuantParams {
  int bits = 8;
  bool is_signed = true;
  float scale = 1.0f;
  std::int32_t zero_point = 0;
  Granularity granularity = Granularity::per_tensor;
  std::vector<std::uint8_t> channel_codes;

  int qmin() const noexcept { return is_signed ? -(1 << (bits - 1)) : 0; }
  int qmax() const noexcept { return is_signed ? (1 << (bits - 1)) - 1 : (1 << bits) - 1; }

  float channel_scale(std::size_t c) const {
    if (granularity == Granularity::per_tensor) return scale;
    return scale * static_cast<float>(channel_codes.at(c)) / static_cast<float>(kChannelCodeMax);
  }

  void validate() const {
    if (bits < 2 || bits > 8) throw std::invalid_argument("QuantParams: bits must be in [2,8], got " + std::to_string(bits));
    if (!(scale > 0.0f) || !std::isfinite(scale)) throw std::invalid_argument("QuantParams: scale must be positive");
    if (zero_point != 0) throw std::invalid_argument("QuantParams: only symmetric (zero_point 0) quantizers are supported");
    if (granularity == Granularity::per_channel && channel_codes.empty()) {
      throw std::invalid_argument("QuantParams: per-channel granularity without channel scales");
    }
  }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

inline QuantParams make_quant_params(int bits, bool is_signed, float scale) {
  QuantParams p;
  p.bits = bits;
  p.is_signed = is_signed;
  p.scale = scale;
  p.validate();
  return p;
}

inline std::int32_t quantize_code(float x, float step, int qmin, int qmax) noexcept {
  const float v = round_half_away(x / step);
  return static_cast<std::int32_t>(std::clamp(v, static_cast<float>(qmin), static_cast<float>(qmax)));
}

inline float fake_quantize_value(float x, float step, int qmin, int qmax) noexcept {
  return static_cast<float>(quantize_code(x, step, qmin, qmax)) * step;
}

inline float fake_quantize_value(float x, const QuantParams& p) noexcept {
  return fake_quantize_value(x, p.scale, p.qmin(), p.qmax());
}

// ---------------------------------------------------------------------------
// Observers

struct Calibration {
  QuantParams params;
  bool degenerate = false;
};

/// Running-max statistics collector.
class Observer {
 public:
  Observer(int bits, bool is_signed) : bits_(bits), signed_(is_signed) {}

  void observe(float x) noexcept {
    const float m = signed_ ? std::fabs(x) : x;
    if (std::isfinite(m)) max_ = std::max(max_, m);
    ++count_;
  }

  void observe(std::span<const float> xs) noexcept {
    for (float x : xs) observe(x);
  }

  void merge(const Observer& o) noexcept {
    max_ = std::max(max_, o.max_);
    count_ += o.count_;
  }

  float running_max() const noexcept { return max_; }
  std::size_t count() const noexcept { return count_; }

  Calibration calibrate() const {
    QuantParams p;
    p.bits = bits_;
    p.is_signed = signed_;
    Calibration c;
    if (max_ > 0.0f) {
      p.scale = max_ / static_cast<float>(p.qmax());
    } else {
      p.scale = kMinStep;
      c.degenerate = true;
    }
    p.scale = std::max(p.scale, kMinStep);
    c.params = p;
    return c;
  }

 private:
  int bits_;
  bool signed_;
  float max_ = 0.0f;
  std::size_t count_ = 0;
};

inline Calibration observe_calibrate(std::span<const Tensor> samples, bool is_signed, int bits) {
  if (samples.empty()) throw std::invalid_argument("observe_calibrate: no samples");
  if (bits < 2 || bits > 8) throw std::invalid_argument("observe_calibrate: bits must be in [2,8]");
  Observer obs(bits, is_signed);
  for (const Tensor& t : samples) obs.observe(t.data());
  return obs.calibrate();
}

// ---------------------------------------------------------------------------
// Weights: symmetric, per output channel. Weights are stored [in, out]; the
// output channel is the column index.

inline QuantParams weight_quant_params(const Tensor& w, int bits) {
  if (w.rank() != 2) throw ShapeError("weight quantization expects a matrix, got " + shape_str(w.shape()));
  const std::size_t in = w.dim(0), out = w.dim(1);
  QuantParams p;
  p.bits = bits;
  p.is_signed = true;
  p.granularity = Granularity::per_channel;
  const float qmax = static_cast<float>(p.qmax());
  std::vector<float> raw(out, 0.0f);
  for (std::size_t k = 0; k < in; ++k)
    for (std::size_t c = 0; c < out; ++c) raw[c] = std::max(raw[c], std::fabs(w[k * out + c]));
  float top = 0.0f;
  for (float& r : raw) {
    r /= qmax;
    top = std::max(top, r);
  }
  p.scale = std::max(top, kMinStep);
  p.channel_codes.resize(out);
  for (std::size_t c = 0; c < out; ++c) {
    const float code = std::ceil(raw[c] / p.scale * static_cast<float>(kChannelCodeMax));
    p.channel_codes[c] = static_cast<std::uint8_t>(std::clamp(code, 1.0f, static_cast<float>(kChannelCodeMax)));
  }
  return p;
}

inline std::vector<float> channel_scales(const QuantParams& p, std::size_t channels) {
  std::vector<float> s(channels);
  for (std::size_t c = 0; c < channels; ++c) s[c] = p.channel_scale(c);
  return s;
}

/// Integer weight codes, same [in, out] layout as `w`.
inline std::vector<std::int8_t> quantize_weight_codes(const Tensor& w, const QuantParams& p) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  std::vector<std::int8_t> q(w.numel());
  for (std::size_t c = 0; c < out; ++c) {
    const float s = p.channel_scale(c);
    for (std::size_t k = 0; k < in; ++k)
      q[k * out + c] = static_cast<std::int8_t>(quantize_code(w[k * out + c], s, p.qmin(), p.qmax()));
  }
  return q;
}

inline Tensor dequantize_weight_codes(std::span<const std::int8_t> q, const Shape& shape, const QuantParams& p) {
  Tensor w(shape);
  const std::size_t in = shape.at(0), out = shape.at(1);
  for (std::size_t c = 0; c < out; ++c) {
    const float s = p.channel_scale(c);
    for (std::size_t k = 0; k < in; ++k) w[k * out + c] = static_cast<float>(q[k * out + c]) * s;
  }
  return w;
}

inline constexpr std::int32_t kBiasCodeLimit = 1 << 30;

/// Bias code on the accumulator grid (input step times channel weight step).
inline std::int32_t bias_code(float b, float accumulator_step) noexcept {
  const float v = round_half_away(b / accumulator_step);
  return static_cast<std::int32_t>(
      std::clamp(v, -static_cast<float>(kBiasCodeLimit), static_cast<float>(kBiasCodeLimit)));
}

// ---------------------------------------------------------------------------
// Tape operations

/// clamp(round(x / step), qmin, qmax) * step. `step` is a one-element tensor;
/// its gradient follows the learned-step-size rule with rounding treated as
/// identity.
inline Var fake_quantize(Var x, Var step, int bits, bool is_signed) {
  detail::same_tape(x, step, "fake_quantize");
  const float s = step.value().item();
  QuantParams p;
  p.bits = bits;
  p.is_signed = is_signed;
  const int qmin = p.qmin(), qmax = p.qmax();
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fake_quantize_value(xv[i], s, qmin, qmax);
  const int ix = x.id, is = step.id;
  return x.tape->record(OpKind::fake_quantize, std::move(out), {x, step},
                        [ix, is, s, qmin, qmax](Tape& tp, const Tensor& g) {
                          const Tensor& xv = tp.value(ix);
                          const bool want_x = tp.wants_grad(ix), want_s = tp.wants_grad(is);
                          Tensor* gx = want_x ? &tp.grad_slot(ix) : nullptr;
                          float gs = 0.0f;
                          for (std::size_t i = 0; i < g.numel(); ++i) {
                            const float v = xv[i] / s;
                            if (v < static_cast<float>(qmin)) {
                              gs += g[i] * static_cast<float>(qmin);
                            } else if (v > static_cast<float>(qmax)) {
                              gs += g[i] * static_cast<float>(qmax);
                            } else {
                              if (gx) (*gx)[i] += g[i];
                              gs += g[i] * (round_half_away(v) - v);
                            }
                          }
                          if (want_s) tp.grad_slot(is)[0] += gs;
                        });
}

/// Per-output-channel weight fake quantization with a straight-through gradient.
inline Var fake_quantize_weight(Var w, const QuantParams& p) {
  const Tensor& wv = w.value();
  const std::vector<std::int8_t> q = quantize_weight_codes(wv, p);
  Tensor out = dequantize_weight_codes(q, wv.shape(), p);
  const int iw = w.id;
  return w.tape->record(OpKind::fake_quantize_weight, std::move(out), {w}, [iw](Tape& tp, const Tensor& g) {
    Tensor& gw = tp.grad_slot(iw);
    for (std::size_t i = 0; i < g.numel(); ++i) gw[i] += g[i];
  });
}

/// Bias rounded onto the accumulator grid `in_step * channel_step[c]`.
inline Var fake_quantize_bias(Var b, float in_step, const std::vector<float>& channel_step) {
  const Tensor& bv = b.value();
  if (bv.numel() != channel_step.size()) throw ShapeError("fake_quantize_bias: channel count mismatch");
  Tensor out(bv.shape());
  for (std::size_t c = 0; c < out.numel(); ++c) {
    const float acc_step = in_step * channel_step[c];
    out[c] = static_cast<float>(bias_code(bv[c], acc_step)) * acc_step;
  }
  const int ib = b.id;
  return b.tape->record(OpKind::fake_quantize_bias, std::move(out), {b}, [ib](Tape& tp, const Tensor& g) {
    Tensor& gb = tp.grad_slot(ib);
    for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Vector quantizers

using Vec3f = std::array<float, 3>;

inline constexpr float kZeroVector = 1e-12f;

/// Magnitude quantizer (unsigned) plus a fixed direction grid on [-1, 1].
struct MddqParams {
  QuantParams mag;
  QuantParams dir;

  static MddqParams make(int mag_bits, float mag_step, int dir_bits) {
    MddqParams m;
    m.mag = make_quant_params(mag_bits, false, mag_step);
    m.dir.bits = dir_bits;
    m.dir.is_signed = true;
    m.dir.scale = 1.0f / static_cast<float>((1 << (dir_bits - 1)) - 1);
    m.dir.validate();
    return m;
  }
};

/// Squared norm summed smallest-first so the result is invariant under
/// permutations and sign flips of the components.
inline float canonical_norm(const Vec3f& h) noexcept {
  std::array<float, 3> sq{h[0] * h[0], h[1] * h[1], h[2] * h[2]};
  std::sort(sq.begin(), sq.end());
  return std::sqrt((sq[0] + sq[1]) + sq[2]);
}

/// Integer form of an MDDQ-quantized vector: magnitude code and direction codes.
struct MddqCode {
  std::int32_t mag = 0;
  std::array<std::int32_t, 3> dir{0, 0, 0};
};

inline MddqCode mddq_encode(const Vec3f& h, const MddqParams& p) {
  MddqCode c;
  const float r = canonical_norm(h);
  if (r < kZeroVector) return c;
  c.mag = quantize_code(r, p.mag.scale, p.mag.qmin(), p.mag.qmax());
  for (int k = 0; k < 3; ++k) c.dir[k] = quantize_code(h[k] / r, p.dir.scale, p.dir.qmin(), p.dir.qmax());
  return c;
}

/// Renormalised reconstruction Q_r(r) * d / |d| in float.
inline Vec3f mddq_decode(const MddqCode& c, const MddqParams& p) {
  const float qr = static_cast<float>(c.mag) * p.mag.scale;
  const Vec3f d{static_cast<float>(c.dir[0]), static_cast<float>(c.dir[1]), static_cast<float>(c.dir[2])};
  const float dn = canonical_norm(d);
  if (dn < kZeroVector) return {0.0f, 0.0f, 0.0f};
  return {qr * (d[0] / dn), qr * (d[1] / dn), qr * (d[2] / dn)};
}

/// Magnitude-direction decoupled quantization of one 3-vector.
inline Vec3f mddq_quantize(const Vec3f& h, const MddqParams& p) {
  const float r = canonical_norm(h);
  if (r < kZeroVector) return {0.0f, 0.0f, 0.0f};
  const MddqCode c = mddq_encode(h, p);
  const Vec3f d{static_cast<float>(c.dir[0]), static_cast<float>(c.dir[1]), static_cast<float>(c.dir[2])};
  if (canonical_norm(d) < kZeroVector) {
    // Direction grid collapsed: keep the unquantized direction.
    const float qr = static_cast<float>(c.mag) * p.mag.scale;
    return {qr * (h[0] / r), qr * (h[1] / r), qr * (h[2] / r)};
  }
  return mddq_decode(c, p);
}

/// Baseline: every component quantized independently.
inline Vec3f naive_vec_quantize(const Vec3f& h, const QuantParams& p) {
  return {fake_quantize_value(h[0], p), fake_quantize_value(h[1], p), fake_quantize_value(h[2], p)};
}

/// MDDQ over the rows of a [..., 3] tensor. Rounding in both quantizers is
/// straight-through; the norm and the renormalisation are differentiated
/// exactly. `mag_step` receives the learned-step-size gradient.
inline Var mddq(Var x, Var mag_step, int mag_bits, int dir_bits) {
  detail::same_tape(x, mag_step, "mddq");
  const Tensor& xv = x.value();
  if (xv.rank() == 0 || xv.shape().back() != 3) throw ShapeError("mddq: expects [..., 3], got " + shape_str(xv.shape()));
  const MddqParams p = MddqParams::make(mag_bits, mag_step.value().item(), dir_bits);
  const std::size_t rows = xv.numel() / 3;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const Vec3f q = mddq_quantize({xv[3 * r], xv[3 * r + 1], xv[3 * r + 2]}, p);
    for (int k = 0; k < 3; ++k) out[3 * r + k] = q[k];
  }
  const int ix = x.id, is = mag_step.id;
  return x.tape->record(OpKind::mddq, std::move(out), {x, mag_step}, [ix, is, p, rows](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ix);
    const bool want_x = tp.wants_grad(ix), want_s = tp.wants_grad(is);
    Tensor* gx = want_x ? &tp.grad_slot(ix) : nullptr;
    const float step = p.mag.scale;
    const float qmax = static_cast<float>(p.mag.qmax());
    float gs = 0.0f;
    for (std::size_t row = 0; row < rows; ++row) {
      const Vec3f h{xv[3 * row], xv[3 * row + 1], xv[3 * row + 2]};
      const float r = canonical_norm(h);
      if (r < kZeroVector) continue;
      const Vec3f u{h[0] / r, h[1] / r, h[2] / r};
      const MddqCode c = mddq_encode(h, p);
      const float qr = static_cast<float>(c.mag) * step;
      Vec3f d{static_cast<float>(c.dir[0]) * p.dir.scale, static_cast<float>(c.dir[1]) * p.dir.scale,
              static_cast<float>(c.dir[2]) * p.dir.scale};
      float dn = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
      const bool collapsed = dn < kZeroVector;
      if (collapsed) {
        d = u;
        dn = 1.0f;
      }
      const Vec3f v{d[0] / dn, d[1] / dn, d[2] / dn};
      const Vec3f gr{g[3 * row], g[3 * row + 1], g[3 * row + 2]};

      // out = Q_r(r) * v
      const float g_qr = gr[0] * v[0] + gr[1] * v[1] + gr[2] * v[2];
      const float t = r / step;
      float dqr_dr = 0.0f;
      if (t > qmax) {
        gs += g_qr * qmax;
      } else {
        dqr_dr = 1.0f;
        gs += g_qr * (round_half_away(t) - t);
      }
      if (!gx) continue;
      // v = d / |d|, d = Q_d(u) with identity rounding gradient
      const Vec3f gv{qr * gr[0], qr * gr[1], qr * gr[2]};
      const float vgv = v[0] * gv[0] + v[1] * gv[1] + v[2] * gv[2];
      Vec3f gu{(gv[0] - v[0] * vgv) / dn, (gv[1] - v[1] * vgv) / dn, (gv[2] - v[2] * vgv) / dn};
      if (collapsed) gu = gv;
      // u = h / r, r = |h|
      const float ugu = u[0] * gu[0] + u[1] * gu[1] + u[2] * gu[2];
      const float g_r = g_qr * dqr_dr;
      for (int k = 0; k < 3; ++k) (*gx)[3 * row + k] += (gu[k] - u[k] * ugu) / r + g_r * u[k];
    }
    if (want_s) tp.grad_slot(is)[0] += gs;
  });
}

// ---------------------------------------------------------------------------
// Angular-error diagnostic

struct AngularErrorRow {
  int bits = 0;
  std::string quantizer;  // "mddq" or "naive"
  std::size_t samples = 0;
  double mean_angle_rad = 0.0;
  double mean_cosine = 0.0;
};

/// Sampling used by the angular-error table: isotropic directions with
/// magnitudes uniform on [kMagLow, kMagHigh].
struct VectorSampler {
  static constexpr double kMagLow = 0.2;
  static constexpr double kMagHigh = 2.0;

  static std::vector<Vec3f> draw(std::size_t n, std::uint64_t seed, double mag_low = kMagLow,
                                 double mag_high = kMagHigh) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> mag(mag_low, mag_high);
    std::vector<Vec3f> out;
    out.reserve(n);
    while (out.size() < n) {
      const double x = normal(rng), y = normal(rng), z = normal(rng);
      const double nn = std::sqrt(x * x + y * y + z * z);
      if (nn < 1e-12) continue;
      const double m = mag(rng);
      out.push_back({static_cast<float>(m * x / nn), static_cast<float>(m * y / nn), static_cast<float>(m * z / nn)});
    }
    return out;
  }
};

/// Cosine between a vector and its quantized image; a collapsed image counts as 0.
inline double quantized_cosine(const Vec3f& h, const Vec3f& q) {
  const double hn = std::sqrt(double(h[0]) * h[0] + double(h[1]) * h[1] + double(h[2]) * h[2]);
  const double qn = std::sqrt(double(q[0]) * q[0] + double(q[1]) * q[1] + double(q[2]) * q[2]);
  if (hn == 0.0 || qn == 0.0) return 0.0;
  const double c = (double(h[0]) * q[0] + double(h[1]) * q[1] + double(h[2]) * q[2]) / (hn * qn);
  return std::clamp(c, -1.0, 1.0);
}

/// Quantizer calibration used by the diagnostic: both quantizers observe the
/// sample set (running max) before quantizing it.
struct VectorQuantizerPair {
  MddqParams mddq;
  QuantParams naive;

  static VectorQuantizerPair calibrate(std::span<const Vec3f> hs, int bits) {
    Observer mag(bits, false), comp(bits, true);
    for (const Vec3f& h : hs) {
      mag.observe(canonical_norm(h));
      comp.observe(std::span<const float>(h.data(), 3));
    }
    return {MddqParams::make(bits, mag.calibrate().params.scale, bits), comp.calibrate().params};
  }
};

inline std::vector<AngularErrorRow> angular_error_report(const std::vector<int>& bits, std::size_t n_samples,
                                                         std::uint64_t seed) {
  std::vector<AngularErrorRow> rows;
  if (n_samples == 0) return rows;
  for (int b : bits) {
    if (b < 2 || b > 8) throw std::invalid_argument("angular_error_report: bits must be in [2,8]");
  }
  const std::vector<Vec3f> hs = VectorSampler::draw(n_samples, seed);
  for (int b : bits) {
    const VectorQuantizerPair qp = VectorQuantizerPair::calibrate(hs, b);
    double cm = 0, am = 0, cn = 0, an = 0;
    for (const Vec3f& h : hs) {
      const double c1 = quantized_cosine(h, mddq_quantize(h, qp.mddq));
      const double c2 = quantized_cosine(h, naive_vec_quantize(h, qp.naive));
      cm += c1;
      am += std::acos(c1);
      cn += c2;
      an += std::acos(c2);
    }
    const double n = static_cast<double>(hs.size());
    rows.push_back({b, "mddq", hs.size(), am / n, cm / n});
    rows.push_back({b, "naive", hs.size(), an / n, cn / n});
  }
  return rows;
}

}  // namespace equiquant
