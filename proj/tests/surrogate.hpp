#pragma once

// Straight-through surrogates of the quantizers with rounding offsets frozen
// at the evaluation point. Central differences of these in double are the
// reference for the tape gradients.

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "support.hpp"

namespace eqtest {

namespace surrogate {

inline double fq(double x, double step, double offset, int qmin, int qmax, bool clamped_low, bool clamped_high) {
  if (clamped_low) return step * qmin;
  if (clamped_high) return step * qmax;
  return step * (x / step + offset);
}

inline std::array<double, 3> mddq_row(const std::array<double, 3>& h, double step, double dir_step, double mag_off,
                                      const std::array<double, 3>& dir_off) {
  const double r = std::sqrt(h[0] * h[0] + h[1] * h[1] + h[2] * h[2]);
  const double qr = step * (r / step + mag_off);
  std::array<double, 3> d;
  for (int k = 0; k < 3; ++k) d[k] = dir_step * (h[k] / r / dir_step + dir_off[k]);
  const double dn = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
  return {qr * d[0] / dn, qr * d[1] / dn, qr * d[2] / dn};
}

}  // namespace surrogate

struct SurrogateCheck {
  double input_error = 0.0;
  double step_error = 0.0;
  bool clamped = false;  // some inputs sat outside the grid
};

/// 8-bit signed fake quantization of 40 values, some of them clamped.
inline SurrogateCheck fake_quantize_surrogate_check() {
  const float step0 = 0.05f;
  const int qmin = -128, qmax = 127;
  Tensor x0 = random_tensor(Shape{40}, 5, -8.0f, 8.0f);
  // keep away from rounding midpoints and from the clamp edges
  for (float& v : x0.data()) {
    const float t = v / step0;
    if (std::fabs(t - std::trunc(t)) > 0.4f && std::fabs(t - std::trunc(t)) < 0.6f) v += 0.25f * step0;
    if (std::fabs(std::fabs(v / step0) - 127.5f) < 2.0f) v *= 1.1f;
  }
  const Tensor w = random_tensor(Shape{40}, 6);
  Tape tape;
  Var x = tape.leaf(x0, true);
  Var s = tape.leaf(Tensor(Shape{1}, step0), true);
  tape.backward(sum(mul(fake_quantize(x, s, 8, true), tape.constant(w))));
  const Tensor gx = tape.grad_or_zeros(x);
  const double gs = tape.grad_or_zeros(s)[0];

  std::vector<double> off(40);
  std::vector<char> lo(40), hi(40);
  SurrogateCheck out;
  for (std::size_t i = 0; i < 40; ++i) {
    const double t = static_cast<double>(x0[i]) / step0;
    lo[i] = t < qmin;
    hi[i] = t > qmax;
    off[i] = std::round(t) - t;
    out.clamped = out.clamped || lo[i] || hi[i];
  }
  auto loss = [&](const std::vector<double>& xv, double st) {
    double l = 0.0;
    for (std::size_t i = 0; i < 40; ++i) l += w[i] * surrogate::fq(xv[i], st, off[i], qmin, qmax, lo[i], hi[i]);
    return l;
  };
  std::vector<double> xv(x0.data().begin(), x0.data().end());
  const double h = 1e-4;
  std::vector<double> a, n;
  for (std::size_t i = 0; i < 40; ++i) {
    std::vector<double> p = xv, m = xv;
    p[i] += h;
    m[i] -= h;
    a.push_back(gx[i]);
    n.push_back((loss(p, step0) - loss(m, step0)) / (2 * h));
  }
  out.input_error = rel_error(a, n);
  const double ns = (loss(xv, step0 + 1e-6) - loss(xv, step0 - 1e-6)) / 2e-6;
  out.step_error = rel_error({gs}, {ns});
  return out;
}

/// MDDQ with an 8-bit magnitude over 30 rows drawn away from grid midpoints.
inline SurrogateCheck mddq_surrogate_check(int dir_bits) {
  const std::size_t rows = 30;
  const float step0 = 0.01f;
  const double dstep = 1.0 / ((1 << (dir_bits - 1)) - 1);
  Tensor x0(Shape{rows, 3});
  std::vector<double> mag_off(rows);
  std::vector<std::array<double, 3>> dir_off(rows);
  std::mt19937_64 rng(51 + static_cast<std::uint64_t>(dir_bits));
  std::uniform_real_distribution<float> u(-1.5f, 1.5f);
  // draw rows whose roundings sit at least 0.05 grid steps away from a midpoint
  for (std::size_t r = 0; r < rows;) {
    const Vec3f h{u(rng), u(rng), u(rng)};
    const double n = canonical_norm(h);
    auto far = [](double t) { return std::fabs(std::fabs(t - std::trunc(t)) - 0.5) > 0.05; };
    bool ok = n > 0.1 && n / step0 < 250 && far(n / step0);
    for (int k = 0; k < 3 && ok; ++k) ok = far(h[k] / n / dstep);
    if (!ok) continue;
    for (int k = 0; k < 3; ++k) x0[3 * r + k] = h[k];
    mag_off[r] = std::round(n / step0) - n / step0;
    for (int k = 0; k < 3; ++k) dir_off[r][k] = std::round(h[k] / n / dstep) - h[k] / n / dstep;
    ++r;
  }
  const Tensor w = random_tensor(Shape{rows, 3}, 52);
  Tape tape;
  Var x = tape.leaf(x0, true);
  Var s = tape.leaf(Tensor(Shape{1}, step0), true);
  tape.backward(sum(mul(mddq(x, s, 8, dir_bits), tape.constant(w))));
  const Tensor gx = tape.grad_or_zeros(x);
  const double gs = tape.grad_or_zeros(s)[0];

  auto loss = [&](const std::vector<double>& xv, double st) {
    double l = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const auto y = surrogate::mddq_row({xv[3 * r], xv[3 * r + 1], xv[3 * r + 2]}, st, dstep, mag_off[r], dir_off[r]);
      for (int k = 0; k < 3; ++k) l += w[3 * r + k] * y[k];
    }
    return l;
  };
  std::vector<double> xv(x0.data().begin(), x0.data().end()), a, n;
  const double h = 1e-5;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    std::vector<double> p = xv, m = xv;
    p[i] += h;
    m[i] -= h;
    a.push_back(gx[i]);
    n.push_back((loss(p, step0) - loss(m, step0)) / (2 * h));
  }
  SurrogateCheck out;
  out.input_error = rel_error(a, n);
  const double ns = (loss(xv, step0 + 1e-7) - loss(xv, step0 - 1e-7)) / 2e-7;
  out.step_error = rel_error({gs}, {ns});
  return out;
}

}  // namespace eqtest
