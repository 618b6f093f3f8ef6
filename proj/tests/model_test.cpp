#include <gtest/gtest.h>

#include <numeric>

#include "reference_model.hpp"
#include "support.hpp"

using namespace eqtest;

namespace {

ForcePrediction run(const Model& m, const MolGraph& g) { return predict(m, g); }

// Observe on a few molecules, then activate every quantizer.
Model calibrated(Scheme s, std::uint64_t seed = 0) {
  Model m = make_model(small_config(), s, seed);
  calibrate(m, small_dataset(6, 77), 6, true);
  return m;
}

}  // namespace

TEST(Config, Validation) {
  ModelConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.F0 = 0;
  EXPECT_THROW(c.validate(), ModelError);
  c = small_config();
  c.species = {10, 10};
  EXPECT_THROW(c.validate(), ModelError);
  EXPECT_THROW(small_config().species_index(1), ModelError);
  EXPECT_EQ(small_config().species_index(18), 1);
}

TEST(Schemes, ParseAndName) {
  for (Scheme s : {Scheme::fp32, Scheme::int8_scalar, Scheme::int8_full, Scheme::w4a8})
    EXPECT_EQ(parse_scheme(scheme_name(s)), s);
  EXPECT_EQ(parse_scheme("int8-scalar-only"), Scheme::int8_scalar);
  EXPECT_THROW(parse_scheme("int3"), ModelError);
}

TEST(AttachQuantizers, Fp32HasNone) {
  const QuantDescription d = attach_quantizers(small_config(), Scheme::fp32);
  EXPECT_EQ(d.quantizer_count(), 0u);
  for (const auto& l : d.linears) EXPECT_FALSE(l.quantized);
}

TEST(AttachQuantizers, ScalarOnlyHasNoMddq) {
  const QuantDescription d = attach_quantizers(small_config(), Scheme::int8_scalar);
  EXPECT_TRUE(d.vectors.empty());
  EXPECT_FALSE(d.activations.empty());
  const Model m = calibrated(Scheme::int8_scalar);
  Tape t(false);
  ParamVars pv(t, m.params, false);
  model_forward(t, m, pv, prepare_features(small_molecule(1), m.config));
  for (std::size_t id = 0; id < t.size(); ++id) EXPECT_NE(t.kind(Var{&t, static_cast<int>(id)}), OpKind::mddq);
}

TEST(AttachQuantizers, FullQuantizesEveryInnerLinear) {
  const ModelConfig c = small_config();
  const QuantDescription d = attach_quantizers(c, Scheme::int8_full);
  std::size_t inner = 0;
  for (const auto& l : d.linears) {
    if (l.name == "energy_head") {
      EXPECT_FALSE(l.quantized);
      continue;
    }
    ++inner;
    EXPECT_TRUE(l.quantized) << l.name;
    EXPECT_EQ(l.weight_bits, 8);
    int found = 0;
    for (const auto& a : d.activations) found += a.name == l.name + ".in" || a.name == l.name + ".out";
    EXPECT_EQ(found, 2) << l.name;
  }
  EXPECT_EQ(inner, 8 * c.n_layers);
  EXPECT_EQ(d.vectors.size(), c.n_layers);
  EXPECT_EQ(d.quantizer_count(), inner * 3 + c.n_layers * 2);
  for (const auto& l : attach_quantizers(c, Scheme::w4a8).linears) {
    EXPECT_TRUE(!l.quantized || l.weight_bits == 4) << l.name;
  }
}

TEST(Model, DeterministicInit) {
  EXPECT_EQ(make_model(small_config(), Scheme::fp32, 3).params, make_model(small_config(), Scheme::fp32, 3).params);
  EXPECT_FALSE(make_model(small_config(), Scheme::fp32, 3).params == make_model(small_config(), Scheme::fp32, 4).params);
}

TEST(Model, WithSchemeKeepsWeights) {
  const Model a = make_model(small_config(), Scheme::fp32, 5);
  const Model b = with_scheme(a, Scheme::int8_full);
  for (const auto& [name, t] : a.params.all()) EXPECT_EQ(b.params.at(name), t) << name;
  EXPECT_EQ(b.scheme(), Scheme::int8_full);
  EXPECT_GT(b.params.size(), a.params.size());
}

TEST(Model, SameSpeciesSameEmbedding) {
  const Model m = make_model(small_config(), Scheme::fp32, 1);
  const MolGraph g = build_graph({10, 18, 10}, {{0, 0, 0}, {9, 0, 0}, {0, 9, 0}}, 5.0);
  Tape t(false);
  ParamVars pv(t, m.params, false);
  Forward f(t, m, pv);
  const Tensor h0 = f.embed(prepare_features(g, m.config)).h0.value();
  const std::size_t F = m.config.F0;
  for (std::size_t c = 0; c < F; ++c) EXPECT_EQ(h0[c], h0[2 * F + c]);
}

TEST(Model, RejectsBadGraphs) {
  const Model m = make_model(small_config(), Scheme::fp32, 1);
  MolGraph empty;
  EXPECT_THROW(run(m, empty), ModelError);
  EXPECT_THROW(run(m, build_graph({10, 10}, {{0, 0, 0}, {1, 0, 0}}, 4.0)), ModelError);
  EXPECT_THROW(run(m, build_graph({10, 7}, {{0, 0, 0}, {2, 0, 0}}, 5.0)), ModelError);
}

TEST(Model, IsolatedAtom) {
  const Model m = make_model(small_config(), Scheme::fp32, 2);
  const MolGraph g = build_graph({18}, {{0.3, -1.0, 2.0}}, 5.0);
  const ForcePrediction p = run(m, g);
  EXPECT_EQ(p.forces[0], (Vec3{0, 0, 0}));
  // pure residual: energy is the readout of the embedding
  Tape t(false);
  ParamVars pv(t, m.params, false);
  Forward f(t, m, pv);
  const GraphFeatures feats = prepare_features(g, m.config);
  NodeFeatures x = f.embed(feats);
  const NodeFeatures y = f.layer(0, x, feats);
  EXPECT_EQ(y.h0.value(), x.h0.value());
  EXPECT_EQ(y.h1.value(), x.h1.value());
  EXPECT_FLOAT_EQ(static_cast<float>(p.energy), f.readout(x).energy.value().item());
}

TEST(Model, Fp32ForcesRotateAndEnergyInvariant) {
  const Model m = make_model(small_config(), Scheme::fp32, 4);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const MolGraph g = small_molecule(100 + s, 7);
    const Rotation r = random_rotation(200 + s);
    const ForcePrediction a = run(m, g), b = run(m, rotate_graph(g, r));
    EXPECT_LT(std::fabs(b.energy - a.energy), 1e-4 * std::max(1.0, std::fabs(a.energy)));
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Vec3 ra = r.apply(a.forces[i]);
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(b.forces[i][c], ra[c], 1e-5);
    }
  }
}

TEST(Model, ScalarQuantizationKeepsEquivariance) {
  // Only invariant features are rounded; the vector branch stays exact.
  const Model m = calibrated(Scheme::int8_scalar);
  const MolGraph g = small_molecule(5, 7);
  const Rotation r = random_rotation(6);
  const ForcePrediction a = run(m, g), b = run(m, rotate_graph(g, r));
  EXPECT_LT(std::fabs(b.energy - a.energy), 1e-4 * std::max(1.0, std::fabs(a.energy)));
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Vec3 ra = r.apply(a.forces[i]);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(b.forces[i][c], ra[c], 1e-4);
  }
}

TEST(Model, FullQuantizationBreaksExactEquivarianceOnly) {
  const Model m = calibrated(Scheme::int8_full);
  const MolGraph g = small_molecule(5, 7);
  const Predictor f = make_predictor(m);
  const double l = lee(f, g, {random_rotation(1), random_rotation(2)});
  EXPECT_GT(l, 0.0);
  EXPECT_TRUE(std::isfinite(l));
}

TEST(Model, TranslationInvariance) {
  const Model m = make_model(small_config(), Scheme::fp32, 4);
  const MolGraph g = small_molecule(7, 7);
  const ForcePrediction a = run(m, g), b = run(m, translate_graph(g, {3.5, -2.0, 10.0}));
  EXPECT_NEAR(a.energy, b.energy, 1e-4 * std::max(1.0, std::fabs(a.energy)));
  for (std::size_t i = 0; i < g.size(); ++i)
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(a.forces[i][c], b.forces[i][c], 1e-5);
}

TEST(Model, PermutationEquivariance) {
  const Model m = make_model(small_config(), Scheme::fp32, 4);
  const MolGraph g = small_molecule(8, 7);
  std::vector<std::size_t> perm(g.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(3);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> z;
  std::vector<Vec3> p;
  for (std::size_t i : perm) {
    z.push_back(g.species[i]);
    p.push_back(g.positions[i]);
  }
  const ForcePrediction a = run(m, g), b = run(m, build_graph(z, p, g.cutoff));
  EXPECT_NEAR(a.energy, b.energy, 1e-4 * std::max(1.0, std::fabs(a.energy)));
  for (std::size_t k = 0; k < perm.size(); ++k)
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(b.forces[k][c], a.forces[perm[k]][c], 1e-5);
}

TEST(Model, LayerFeaturesTransformCorrectly) {
  const Model m = make_model(small_config(), Scheme::fp32, 9);
  const MolGraph g = small_molecule(10, 6);
  const Rotation r = random_rotation(11);
  Tape t(false);
  ParamVars pv(t, m.params, false);
  Forward f(t, m, pv);
  const GraphFeatures fa = prepare_features(g, m.config), fb = prepare_features(rotate_graph(g, r), m.config);
  NodeFeatures a = f.embed(fa), b = f.embed(fb);
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    a = f.layer(l, a, fa);
    b = f.layer(l, b, fb);
    const Tensor &h0a = a.h0.value(), &h0b = b.h0.value();
    for (std::size_t i = 0; i < h0a.numel(); ++i) EXPECT_NEAR(h0a[i], h0b[i], 1e-5);
    const Tensor &h1a = a.h1.value(), &h1b = b.h1.value();
    for (std::size_t v = 0; v < h1a.numel() / 3; ++v) {
      const Vec3 ra = r.apply({h1a[3 * v], h1a[3 * v + 1], h1a[3 * v + 2]});
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(h1b[3 * v + c], ra[c], 1e-5);
    }
  }
}

namespace {

struct AttentionCase {
  GraphFeatures g;
  Tensor q, k, bias;
};

AttentionCase attention_case(std::uint64_t seed) {
  AttentionCase c;
  c.g = prepare_features(small_molecule(seed, 7), small_config());
  c.q = random_tensor(Shape{c.g.n_atoms, 8}, seed + 1, -2.0f, 2.0f);
  c.k = random_tensor(Shape{c.g.n_atoms, 8}, seed + 2, -2.0f, 2.0f);
  c.bias = random_tensor(Shape{c.g.n_edges()}, seed + 3);
  return c;
}

Tensor attention_of(const AttentionCase& c, const Tensor& q, Tensor* cos = nullptr) {
  Tape t(false);
  Var cv;
  Var a = normalized_attention(t.constant(q), t.constant(c.k), t.constant(c.bias), c.g, &cv);
  if (cos) *cos = cv.value();
  return a.value();
}

}  // namespace

TEST(Attention, QueryScaleInvariance) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const AttentionCase c = attention_case(300 + s);
    const Tensor base = attention_of(c, c.q);
    for (float scale : {0.1f, 10.0f}) {
      for (std::size_t row = 0; row < c.g.n_atoms; ++row) {
        Tensor q = c.q;
        for (std::size_t j = 0; j < 8; ++j) q[row * 8 + j] *= scale;
        const Tensor a = attention_of(c, q);
        for (std::size_t e = 0; e < a.numel(); ++e) EXPECT_LT(std::fabs(a[e] - base[e]), 1e-5);
      }
    }
  }
}

TEST(Attention, CosineLogitsBounded) {
  const AttentionCase c = attention_case(400);
  Tensor cos;
  attention_of(c, c.q, &cos);
  for (float v : cos.data()) {
    EXPECT_GE(v, -1.0f - 1e-5f);
    EXPECT_LE(v, 1.0f + 1e-5f);
  }
}

TEST(Attention, SingleNeighborWeightIsOne) {
  const MolGraph g = build_graph({10, 18}, {{0, 0, 0}, {2, 0, 0}}, 5.0);
  const Model m = make_model(small_config(), Scheme::fp32, 1);
  Tape t(false);
  ParamVars pv(t, m.params, false);
  Forward f(t, m, pv);
  const GraphFeatures feats = prepare_features(g, m.config);
  const Tensor a = f.attention("layer0.", f.embed(feats).h0, feats).value();
  EXPECT_EQ(a[0], 1.0f);
  EXPECT_EQ(a[1], 1.0f);
}

TEST(Model, ObserversSeeEveryQuantizer) {
  Model m = make_model(small_config(), Scheme::int8_full, 1);
  ObserverSink sink;
  Tape t(false);
  ParamVars pv(t, m.params, false);
  model_forward(t, m, pv, prepare_features(small_molecule(2), m.config), {nullptr, &sink});
  EXPECT_EQ(sink.max_abs.size(), m.quant.activations.size() + m.quant.vectors.size());
  for (const auto& [name, v] : sink.max_abs) EXPECT_GT(v, 0.0f) << name;
}

TEST(ReferenceModel, FloatForwardMatchesDoubleReference) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Model m = make_model(small_config(), Scheme::fp32, seed);
    const MolGraph g = small_dataset(1, 50 + seed).graphs[0];
    const refmodel::Output o = refmodel::forward(m.config, refmodel::to_double(m.params), g);
    const ForcePrediction p = predict(m, g);
    EXPECT_NEAR(p.energy, o.energy, 1e-5 * std::max(1.0, std::fabs(o.energy)));
    std::vector<double> a, b;
    for (std::size_t i = 0; i < g.size(); ++i)
      for (int c = 0; c < 3; ++c) {
        a.push_back(p.forces[i][c]);
        b.push_back(o.forces[i][c]);
      }
    EXPECT_LT(rel_error(a, b), 1e-5);
  }
}
