#pragma once

// Test-only double-precision reference network evaluation and a central
// finite-difference gradient oracle. Shares no code with the tape engine: it
// reads layer specs and raw parameter values and recomputes everything in f64.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ilalab/model.hpp"

namespace ilalab::testing {

struct ReferenceEval {
  double loss = 0.0;
  std::vector<double> logits;
  // ReLU signs and pooling winners; the function is smooth between two points
  // that share a pattern.
  std::vector<std::uint32_t> pattern;
};

inline ReferenceEval reference_eval(const Model& model, std::span<const double> x, int label,
                                    std::size_t begin = 0, std::size_t end = static_cast<std::size_t>(-1)) {
  end = std::min(end, model.layers().size());
  const auto params = model.params();
  std::size_t pi = 0;
  // skip parameters of layers before `begin`
  for (std::size_t i = 0; i < begin; ++i) {
    if (model.layers()[i].has_params()) pi += 2;
  }
  Shape shape = begin == 0 ? model.input_shape() : model.layer_shapes()[begin - 1];
  std::vector<double> h(x.begin(), x.end());
  ReferenceEval ev;
  for (std::size_t li = begin; li < end; ++li) {
    const auto& l = model.layers()[li];
    switch (l.kind) {
      case LayerKind::dense: {
        const auto W = params[pi].data();
        const auto b = params[pi + 1].data();
        pi += 2;
        std::vector<double> out(l.out);
        for (std::size_t o = 0; o < l.out; ++o) {
          double s = b[o];
          for (std::size_t i = 0; i < l.in; ++i) s += h[i] * W[i * l.out + o];
          out[o] = s;
        }
        h = std::move(out);
        shape = {l.out};
        break;
      }
      case LayerKind::conv2d: {
        const auto W = params[pi].data();
        const auto b = params[pi + 1].data();
        pi += 2;
        const std::size_t C = shape[0], H = shape[1], Wd = shape[2], K = l.kernel, s = l.stride;
        const bool same = l.padding == Padding::same;
        const std::size_t OH = same ? (H + s - 1) / s : (H - K) / s + 1;
        const std::size_t OW = same ? (Wd + s - 1) / s : (Wd - K) / s + 1;
        const long pad_h = same ? std::max<long>(0, static_cast<long>((OH - 1) * s + K) - static_cast<long>(H)) / 2 : 0;
        const long pad_w = same ? std::max<long>(0, static_cast<long>((OW - 1) * s + K) - static_cast<long>(Wd)) / 2 : 0;
        std::vector<double> out(l.out * OH * OW);
        for (std::size_t o = 0; o < l.out; ++o)
          for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox) {
              double acc = b[o];
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t ky = 0; ky < K; ++ky)
                  for (std::size_t kx = 0; kx < K; ++kx) {
                    const long iy = static_cast<long>(oy * s + ky) - pad_h;
                    const long ix = static_cast<long>(ox * s + kx) - pad_w;
                    if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(Wd)) continue;
                    acc += h[(c * H + iy) * Wd + ix] * W[((o * C + c) * K + ky) * K + kx];
                  }
              out[(o * OH + oy) * OW + ox] = acc;
            }
        h = std::move(out);
        shape = {l.out, OH, OW};
        break;
      }
      case LayerKind::relu:
        for (auto& v : h) {
          ev.pattern.push_back(v > 0 ? 1u : 0u);
          v = v > 0 ? v : 0.0;
        }
        break;
      case LayerKind::maxpool2d: {
        const std::size_t C = shape[0], H = shape[1], Wd = shape[2], w = l.window;
        std::vector<double> out(C * (H / w) * (Wd / w));
        std::size_t oi = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t oy = 0; oy < H / w; ++oy)
            for (std::size_t ox = 0; ox < Wd / w; ++ox, ++oi) {
              std::size_t best = (c * H + oy * w) * Wd + ox * w;
              for (std::size_t dy = 0; dy < w; ++dy)
                for (std::size_t dx = 0; dx < w; ++dx) {
                  const std::size_t idx = (c * H + oy * w + dy) * Wd + ox * w + dx;
                  if (h[idx] > h[best]) best = idx;
                }
              out[oi] = h[best];
              ev.pattern.push_back(static_cast<std::uint32_t>(best));
            }
        h = std::move(out);
        shape = {C, H / w, Wd / w};
        break;
      }
      case LayerKind::flatten:
        shape = {h.size()};
        break;
    }
  }
  ev.logits = h;
  if (label >= 0) {
    const double zy = h[static_cast<std::size_t>(label)];
    const double zmax = *std::max_element(h.begin(), h.end());
    if (zy == zmax) {
      // log1p keeps relative precision for confident predictions
      double rest = 0;
      for (std::size_t c = 0; c < h.size(); ++c) {
        if (c != static_cast<std::size_t>(label)) rest += std::exp(h[c] - zy);
      }
      ev.loss = std::log1p(rest);
    } else {
      double sum = 0;
      for (double z : h) sum += std::exp(z - zmax);
      ev.loss = zmax + std::log(sum) - zy;
    }
  }
  return ev;
}

struct FdResult {
  std::vector<double> grad;
  std::size_t skipped = 0;  // coordinates whose stencil crosses a kink
  std::vector<bool> valid;
};

// Central differences of the f64 reference loss w.r.t. the input.
inline FdResult fd_input_gradient(const Model& model, std::span<const float> x, int label, double step) {
  FdResult r;
  std::vector<double> xd(x.begin(), x.end());
  r.grad.assign(xd.size(), 0.0);
  r.valid.assign(xd.size(), true);
  const auto base = reference_eval(model, xd, label);
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double orig = xd[i];
    xd[i] = orig + step;
    const auto plus = reference_eval(model, xd, label);
    xd[i] = orig - step;
    const auto minus = reference_eval(model, xd, label);
    xd[i] = orig;
    if (plus.pattern != base.pattern || minus.pattern != base.pattern) {
      r.valid[i] = false;
      ++r.skipped;
      continue;
    }
    r.grad[i] = (plus.loss - minus.loss) / (2 * step);
  }
  return r;
}

// max_i |a_i - b_i| / max_i |b_i| over coordinates marked valid.
inline double max_relative_error(std::span<const float> analytic, const FdResult& fd) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < fd.grad.size(); ++i) {
    if (!fd.valid[i]) continue;
    num = std::max(num, std::abs(analytic[i] - fd.grad[i]));
    den = std::max(den, std::abs(fd.grad[i]));
  }
  return den > 0 ? num / den : num;
}

}  // namespace ilalab::testing
