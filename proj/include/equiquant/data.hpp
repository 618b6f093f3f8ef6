#pragma once

// Synthetic Lennard-Jones clusters, extended-XYZ I/O and dataset splitting.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "equiquant/geometry.hpp"

namespace equiquant {

/// Dataset generation or splitting failed.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::vector<MolGraph> graphs;
  std::map<std::string, std::string> metadata;

  std::size_t size() const noexcept { return graphs.size(); }
  bool empty() const noexcept { return graphs.empty(); }
};

// ---------------------------------------------------------------------------
// Lennard-Jones oracle

inline constexpr int kNeon = 10;
inline constexpr int kArgon = 18;

struct LJPair {
  double epsilon;  // eV
  double sigma;    // Angstrom
};

/// Pair parameters for the two synthetic species. Mixed pairs use the
/// arithmetic mean of sigma and the geometric mean of epsilon.
inline LJPair lj_pair(int za, int zb) {
  auto self = [](int z) -> LJPair {
    if (z == kNeon) return {0.08, 1.8};
    if (z == kArgon) return {0.12, 2.3};
    throw DataError("lj_pair: no parameters for Z=" + std::to_string(z));
  };
  const LJPair a = self(za), b = self(zb);
  return {std::sqrt(a.epsilon * b.epsilon), 0.5 * (a.sigma + b.sigma)};
}

struct OracleResult {
  double energy = 0.0;
  std::vector<Vec3> forces;
};

/// Energy and forces summed over all pairs (no cutoff).
inline OracleResult lj_oracle(const std::vector<int>& species, const std::vector<Vec3>& positions) {
  if (species.size() != positions.size()) throw DataError("lj_oracle: species/positions length mismatch");
  OracleResult out;
  out.forces.assign(positions.size(), Vec3{0.0, 0.0, 0.0});
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t j = i + 1; j < positions.size(); ++j) {
      const LJPair p = lj_pair(species[i], species[j]);
      const Vec3 d = positions[i] - positions[j];
      const double r2 = dot(d, d);
      const double s2 = p.sigma * p.sigma / r2;
      const double s6 = s2 * s2 * s2;
      const double s12 = s6 * s6;
      out.energy += 4.0 * p.epsilon * (s12 - s6);
      // -dE/dr * (1/r), applied along d = r_i - r_j
      const double f = 24.0 * p.epsilon * (2.0 * s12 - s6) / r2;
      out.forces[i] = out.forces[i] + f * d;
      out.forces[j] = out.forces[j] - f * d;
    }
  }
  return out;
}

inline OracleResult lj_oracle(const MolGraph& g) { return lj_oracle(g.species, g.positions); }

inline void attach_oracle(MolGraph& g) {
  OracleResult r = lj_oracle(g);
  g.energy = r.energy;
  g.forces = std::move(r.forces);
}

// ---------------------------------------------------------------------------
// Generator

struct GenConfig {
  std::size_t n_molecules = 500;
  std::size_t atoms_min = 8;
  std::size_t atoms_max = 16;
  std::uint64_t seed = 0;
  double cutoff = 5.0;
  double min_distance_factor = 0.8;  // times the pair sigma
  double cluster_radius_factor = 0.9;  // times the cutoff
  std::size_t max_attempts = 10000;
};

inline Dataset gen_synthetic(const GenConfig& cfg) {
  if (cfg.atoms_min < 2 || cfg.atoms_max > 32 || cfg.atoms_min > cfg.atoms_max) {
    throw DataError("gen_synthetic: atom range must lie within [2, 32]");
  }
  if (!(cfg.cutoff > 0.0)) throw DataError("gen_synthetic: cutoff must be positive");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> count(cfg.atoms_min, cfg.atoms_max);
  std::bernoulli_distribution pick_argon(0.5);
  const double radius = cfg.cluster_radius_factor * cfg.cutoff;
  std::uniform_real_distribution<double> box(-radius, radius);

  Dataset ds;
  ds.graphs.reserve(cfg.n_molecules);
  for (std::size_t m = 0; m < cfg.n_molecules; ++m) {
    const std::size_t n = count(rng);
    std::vector<int> species;
    std::vector<Vec3> pos;
    for (std::size_t a = 0; a < n; ++a) {
      const int z = pick_argon(rng) ? kArgon : kNeon;
      bool placed = false;
      for (std::size_t attempt = 0; attempt < cfg.max_attempts && !placed; ++attempt) {
        const Vec3 p{box(rng), box(rng), box(rng)};
        if (norm(p) > radius) continue;
        placed = true;
        for (std::size_t b = 0; b < pos.size(); ++b) {
          if (norm(p - pos[b]) < cfg.min_distance_factor * lj_pair(z, species[b]).sigma) {
            placed = false;
            break;
          }
        }
        if (placed) {
          species.push_back(z);
          pos.push_back(p);
        }
      }
      if (!placed) {
        throw DataError("gen_synthetic: rejection sampling failed for molecule " + std::to_string(m) + ", atom " +
                        std::to_string(a) + " after " + std::to_string(cfg.max_attempts) +
                        " attempts (seed " + std::to_string(cfg.seed) + ")");
      }
    }
    MolGraph g = build_graph(std::move(species), std::move(pos), cfg.cutoff);
    attach_oracle(g);
    ds.graphs.push_back(std::move(g));
  }
  ds.metadata["generator"] = "lennard-jones";
  ds.metadata["n_molecules"] = std::to_string(cfg.n_molecules);
  ds.metadata["atoms"] = std::to_string(cfg.atoms_min) + ".." + std::to_string(cfg.atoms_max);
  ds.metadata["seed"] = std::to_string(cfg.seed);
  return ds;
}

// ---------------------------------------------------------------------------
// Extended XYZ

/// Malformed extended-XYZ input. Lines and columns are 1-based.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, std::size_t column, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + what),
        line_(line),
        column_(column) {}
  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_, column_;
};

inline constexpr std::array<std::string_view, 118> kElements{
    "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si", "P",  "S",  "Cl", "Ar",
    "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr",
    "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe",
    "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf",
    "Ta", "W",  "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs",
    "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};

inline std::string_view element_symbol(int z) {
  if (z < 1 || z > static_cast<int>(kElements.size())) throw DataError("no element with Z=" + std::to_string(z));
  return kElements[static_cast<std::size_t>(z - 1)];
}

/// Atomic number for a symbol, or 0 when unknown.
inline int atomic_number(std::string_view symbol) {
  for (std::size_t i = 0; i < kElements.size(); ++i)
    if (kElements[i] == symbol) return static_cast<int>(i + 1);
  return 0;
}

/// Shortest decimal that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace detail {

struct Token {
  std::string_view text;
  std::size_t column;  // 1-based
};

inline std::vector<Token> split_ws(std::string_view line) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) out.push_back({line.substr(start, i - start), start + 1});
  }
  return out;
}

inline double parse_number(const Token& t, std::size_t line) {
  double v = 0.0;
  const char* b = t.text.data();
  const char* e = b + t.text.size();
  if (!t.text.empty() && *b == '+') ++b;
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e || !std::isfinite(v)) {
    throw ParseError(line, t.column, "expected a number, found '" + std::string(t.text) + "'");
  }
  return v;
}

}  // namespace detail

inline std::string write_xyz(const Dataset& ds) {
  std::string out;
  for (const MolGraph& g : ds.graphs) {
    const bool with_forces = g.forces.has_value();
    out += std::to_string(g.size()) + "\n";
    out += with_forces ? "Properties=species:S:1:pos:R:3:forces:R:3" : "Properties=species:S:1:pos:R:3";
    if (g.energy) out += " energy=" + format_double(*g.energy);
    out += " pbc=\"F F F\"\n";
    for (std::size_t i = 0; i < g.size(); ++i) {
      out += element_symbol(g.species[i]);
      for (double c : g.positions[i]) out += " " + format_double(c);
      if (with_forces)
        for (double c : (*g.forces)[i]) out += " " + format_double(c);
      out += "\n";
    }
  }
  return out;
}

/// Parses concatenated frames; each frame becomes a graph with the given cutoff.
inline Dataset parse_xyz(std::string_view text, double cutoff = 5.0) {
  std::vector<std::string_view> lines;
  for (std::size_t pos = 0; pos < text.size();) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    lines.push_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  Dataset ds;
  std::size_t li = 0;
  while (li < lines.size()) {
    const auto head = detail::split_ws(lines[li]);
    if (head.empty()) {
      ++li;  // blank separators between frames
      continue;
    }
    const std::size_t count_line = li + 1;
    std::size_t n = 0;
    {
      const auto& t = head[0];
      auto res = std::from_chars(t.text.data(), t.text.data() + t.text.size(), n);
      if (res.ec != std::errc() || res.ptr != t.text.data() + t.text.size() || head.size() != 1) {
        throw ParseError(count_line, t.column, "expected an atom count, found '" + std::string(lines[li]) + "'");
      }
      if (n == 0) throw ParseError(count_line, t.column, "atom count must be positive");
    }
    if (li + 1 >= lines.size()) throw ParseError(count_line + 1, 1, "missing properties line");
    std::optional<double> energy;
    {
      const std::string_view props = lines[li + 1];
      const std::size_t at = props.find("energy=");
      const bool word_start = at != std::string_view::npos && (at == 0 || props[at - 1] == ' ' || props[at - 1] == '\t');
      if (word_start) {
        std::size_t end = props.find_first_of(" \t\r", at);
        if (end == std::string_view::npos) end = props.size();
        const detail::Token t{props.substr(at + 7, end - at - 7), at + 8};
        energy = detail::parse_number(t, count_line + 1);
      }
    }
    std::vector<int> species;
    std::vector<Vec3> pos;
    std::vector<Vec3> forces;
    std::size_t columns = 0;
    for (std::size_t a = 0; a < n; ++a) {
      const std::size_t ln = li + 2 + a;
      if (ln >= lines.size() || detail::split_ws(lines[ln]).empty()) {
        throw ParseError(ln + 1, 1, "expected atom " + std::to_string(a + 1) + " of " + std::to_string(n));
      }
      const auto tok = detail::split_ws(lines[ln]);
      if (tok.size() != 4 && tok.size() != 7) {
        throw ParseError(ln + 1, tok.back().column, "expected 4 or 7 fields, found " + std::to_string(tok.size()));
      }
      if (columns == 0) columns = tok.size();
      if (tok.size() != columns) throw ParseError(ln + 1, tok.back().column, "inconsistent field count within frame");
      const int z = atomic_number(tok[0].text);
      if (z == 0) throw ParseError(ln + 1, tok[0].column, "unknown element '" + std::string(tok[0].text) + "'");
      species.push_back(z);
      pos.push_back({detail::parse_number(tok[1], ln + 1), detail::parse_number(tok[2], ln + 1),
                     detail::parse_number(tok[3], ln + 1)});
      if (columns == 7) {
        forces.push_back({detail::parse_number(tok[4], ln + 1), detail::parse_number(tok[5], ln + 1),
                          detail::parse_number(tok[6], ln + 1)});
      }
    }
    MolGraph g;
    try {
      g = build_graph(std::move(species), std::move(pos), cutoff);
    } catch (const GeometryError& e) {
      throw ParseError(count_line, 1, e.what());
    }
    g.energy = energy;
    if (columns == 7) g.forces = std::move(forces);
    ds.graphs.push_back(std::move(g));
    li += 2 + n;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Split

struct DatasetSplit {
  Dataset train, val, test;
};

inline DatasetSplit split(const Dataset& ds, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw DataError("split: fractions must be non-negative");
    total += f;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw DataError("split: fractions must sum to 1");
  const std::size_t n = ds.size();
  std::size_t n_train = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n))));
  const std::size_t n_val =
      std::min<std::size_t>(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n))));
  std::size_t n_test = n - n_train - n_val;
  if (fractions[2] == 0.0) {  // rounding remainder goes to train
    n_train += n_test;
    n_test = 0;
  }
  const std::array<std::size_t, 3> sizes{n_train, n_val, n_test};
  const char* names[3] = {"train", "val", "test"};
  for (int k = 0; k < 3; ++k) {
    if (fractions[static_cast<std::size_t>(k)] > 0.0 && sizes[static_cast<std::size_t>(k)] == 0) {
      throw DataError(std::string("split: ") + names[k] + " split would be empty for " + std::to_string(n) +
                      " molecules");
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  DatasetSplit out;
  for (Dataset* d : {&out.train, &out.val, &out.test}) d->metadata = ds.metadata;
  for (std::size_t i = 0; i < n; ++i) {
    Dataset& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
    dst.graphs.push_back(ds.graphs[order[i]]);
  }
  return out;
}

}  // namespace equiquant
