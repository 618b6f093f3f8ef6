#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "equiquant/equiquant.hpp"

namespace eqtest {

using namespace equiquant;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = u(rng);
  return t;
}

inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max(std::sqrt(std::max(na, nb)), 1e-12);
  return std::sqrt(diff) / scale;
}

using UnaryBuild = std::function<Var(Tape&, Var)>;
using Reference = std::function<std::vector<double>(const std::vector<double>&)>;

// Analytic tape gradient of sum(w * f(x)) for fixed random weights w, next to
// a numeric derivative of the same reduction.
struct GradCheck {
  std::vector<double> analytic;
  std::vector<double> numeric;
  double error() const { return rel_error(analytic, numeric); }
};

inline Tensor reduction_weights(const UnaryBuild& f, const Tensor& x0, std::uint64_t seed) {
  Tape t(false);
  return random_tensor(f(t, t.constant(x0)).value().shape(), seed);
}

inline std::vector<double> tape_gradient(const UnaryBuild& f, const Tensor& x0, const Tensor& w) {
  Tape tape;
  Var x = tape.leaf(x0, true);
  tape.backward(sum(mul(f(tape, x), tape.constant(w))));
  const Tensor gx = tape.grad_or_zeros(x);
  return {gx.data().begin(), gx.data().end()};
}

// Central differences (step h) of a double-precision reference forward.
inline GradCheck gradcheck_reference(const UnaryBuild& f, const Reference& ref, const Tensor& x0, double h = 1e-3,
                                     std::uint64_t seed = 7) {
  const Tensor w = reduction_weights(f, x0, seed);
  GradCheck out;
  out.analytic = tape_gradient(f, x0, w);
  std::vector<double> x(x0.data().begin(), x0.data().end());
  auto loss = [&](const std::vector<double>& v) {
    const std::vector<double> y = ref(v);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(w[i]) * y[i];
    return s;
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    out.numeric.push_back((loss(xp) - loss(xm)) / (2.0 * h));
  }
  return out;
}

// Five-point differences of the float forward itself, summed in double. The
// default step is a power of two so the perturbed inputs are exact.
inline GradCheck gradcheck_float(const UnaryBuild& f, const Tensor& x0, float h = 0.0078125f, std::uint64_t seed = 7) {
  const Tensor w = reduction_weights(f, x0, seed);
  GradCheck out;
  out.analytic = tape_gradient(f, x0, w);
  auto loss = [&](const Tensor& x) {
    Tape t(false);
    const Tensor y = f(t, t.constant(x)).value();
    double s = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += static_cast<double>(w[i]) * y[i];
    return s;
  };
  for (std::size_t i = 0; i < x0.numel(); ++i) {
    double l[4];
    const float off[4] = {-2.0f * h, -h, h, 2.0f * h};
    for (int k = 0; k < 4; ++k) {
      Tensor xs = x0;
      xs[i] += off[k];
      l[k] = loss(xs);
    }
    out.numeric.push_back((l[0] - 8.0 * l[1] + 8.0 * l[2] - l[3]) / (12.0 * h));
  }
  return out;
}

inline MolGraph small_molecule(std::uint64_t seed, std::size_t n = 6, double cutoff = 5.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.6, 1.6);
  std::bernoulli_distribution ar(0.5);
  for (;;) {
    std::vector<int> z;
    std::vector<Vec3> p;
    for (std::size_t i = 0; i < n; ++i) {
      z.push_back(ar(rng) ? kArgon : kNeon);
      p.push_back({u(rng), u(rng), u(rng)});
    }
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i)
      for (std::size_t j = i + 1; j < n && ok; ++j) ok = norm(p[i] - p[j]) > 0.9;
    if (!ok) continue;
    MolGraph g = build_graph(std::move(z), std::move(p), cutoff);
    attach_oracle(g);
    return g;
  }
}

inline ModelConfig small_config() {
  ModelConfig c;
  c.F0 = 8;
  c.F1 = 6;
  c.n_layers = 2;
  c.n_rbf = 6;
  c.d_attn = 8;
  return c;
}

inline Dataset small_dataset(std::size_t n, std::uint64_t seed) {
  GenConfig gc;
  gc.n_molecules = n;
  gc.atoms_min = 4;
  gc.atoms_max = 6;
  gc.seed = seed;
  return gen_synthetic(gc);
}

}  // namespace eqtest
