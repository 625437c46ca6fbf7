#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "sagdrive/autodiff.hpp"
#include "sagdrive/optim.hpp"
#include "sagdrive/rng.hpp"

namespace sagdrive::oracle {

// Builds the loss from graph-bound params; must be re-runnable so the same
// function drives both the reverse-mode pass and the finite-difference oracle.
using LossBuilder = std::function<Var(Graph&, GraphParams&)>;

inline double eval_loss(ParamStore& store, const LossBuilder& build) {
  Graph g;
  GraphParams p(g, store);
  return build(g, p).value().data[0];
}

// Max relative error between reverse-mode gradients and central finite
// differences over every parameter coordinate.
inline double fd_max_rel_err(ParamStore& store, const LossBuilder& build, double h = 1e-5) {
  Graph g;
  GraphParams p(g, store);
  Var loss = build(g, p);
  g.backward(loss);
  std::map<std::string, Tensor> grads = p.grads();

  double worst = 0.0;
  for (auto& [name, grad] : grads) {
    Tensor& value = store.value(name);
    for (int64_t i = 0; i < value.numel(); ++i) {
      double keep = value.data[static_cast<size_t>(i)];
      value.data[static_cast<size_t>(i)] = keep + h;
      double hi = eval_loss(store, build);
      value.data[static_cast<size_t>(i)] = keep - h;
      double lo = eval_loss(store, build);
      value.data[static_cast<size_t>(i)] = keep;
      double fd = (hi - lo) / (2.0 * h);
      double ad = grad.data[static_cast<size_t>(i)];
      double denom = std::max({1.0, std::abs(fd), std::abs(ad)});
      worst = std::max(worst, std::abs(fd - ad) / denom);
    }
  }
  return worst;
}

}  // namespace sagdrive::oracle
