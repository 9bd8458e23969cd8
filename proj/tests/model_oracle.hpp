#pragma once

// Scalar re-implementations of the network maps, written with plain loops over
// std::vector so they share no code with the Eigen path.

#include <cmath>
#include <vector>

#include "aetree/autoencoder.hpp"

namespace aetree::oracle {

using Dvec = std::vector<double>;

inline double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline Dvec affine(const Mat& w, const Vec& b, const Dvec& x) {
  Dvec y(static_cast<std::size_t>(w.rows()));
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    double s = b[r];
    for (Eigen::Index c = 0; c < w.cols(); ++c) s += w(r, c) * x[static_cast<std::size_t>(c)];
    y[static_cast<std::size_t>(r)] = s;
  }
  return y;
}

inline void lstm(const LstmCell& cell, const Dvec& x, const Dvec& h, const Dvec& c, Dvec& h_out, Dvec& c_out) {
  const auto s = static_cast<std::size_t>(cell.state_size());
  h_out.assign(s, 0.0);
  c_out.assign(s, 0.0);
  for (std::size_t j = 0; j < s; ++j) {
    double gate[4];
    for (std::size_t g = 0; g < 4; ++g) {
      const auto row = static_cast<Eigen::Index>(g * s + j);
      double z = cell.b[row];
      for (std::size_t k = 0; k < x.size(); ++k) z += cell.wx(row, static_cast<Eigen::Index>(k)) * x[k];
      for (std::size_t k = 0; k < s; ++k) z += cell.wh(row, static_cast<Eigen::Index>(k)) * h[k];
      gate[g] = z;
    }
    const double in = sig(gate[0]);
    const double forget = sig(gate[1]);
    const double cand = std::tanh(gate[2]);
    const double out = sig(gate[3]);
    c_out[j] = forget * c[j] + in * cand;
    h_out[j] = out * std::tanh(c_out[j]);
  }
}

inline Dvec to_dvec(const Vec& v) { return Dvec(v.data(), v.data() + v.size()); }

struct ScalarChild {
  Dvec params;  // 6 params + logit
  Dvec h, c;
};

/// Composed decode step: lifts, decoder cell, split, head.
inline std::pair<ScalarChild, ScalarChild> decode_step(const AETreeModel& m, const Params& p, const Dvec& h,
                                                       const Dvec& c) {
  const Dvec lh = affine(m.lift_h.weight, m.lift_h.bias, h);
  const Dvec lc = affine(m.lift_c.weight, m.lift_c.bias, c);
  Dvec x(p.begin(), p.end());
  x.insert(x.end(), h.begin(), h.end());
  x.insert(x.end(), c.begin(), c.end());
  Dvec ho, co;
  lstm(m.decoder, x, lh, lc, ho, co);
  const std::size_t half = h.size();
  ScalarChild l, r;
  l.h.assign(ho.begin(), ho.begin() + static_cast<std::ptrdiff_t>(half));
  r.h.assign(ho.begin() + static_cast<std::ptrdiff_t>(half), ho.end());
  l.c.assign(co.begin(), co.begin() + static_cast<std::ptrdiff_t>(half));
  r.c.assign(co.begin() + static_cast<std::ptrdiff_t>(half), co.end());
  l.params = affine(m.head.weight, m.head.bias, l.h);
  r.params = affine(m.head.weight, m.head.bias, r.h);
  return {l, r};
}

}  // namespace aetree::oracle
