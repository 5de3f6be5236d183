#pragma once

#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "capf/ops.hpp"
#include "capf/tensor.hpp"

namespace capf {

struct FiniteDiffReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  int coords_checked = 0;
  std::string worst;

  bool pass(double tol) const { return max_rel_err < tol; }
};

// Central-difference gradient verification. `params` are the live tensors
// the loss reads; `loss` recomputes the scalar from their current contents;
// `analytic` holds gradients aligned with `params`. A random subset of
// coordinates per parameter is perturbed by +/- h. Relative error uses a
// denominator floored at 1e-6 so near-zero gradients are compared
// absolutely (central differences carry ~|f|*eps/h of roundoff noise).
inline FiniteDiffReport finite_diff_check(const std::vector<Tensor*>& params,
                                          const std::vector<Tensor>& analytic,
                                          const std::function<double()>& loss,
                                          double h, int max_coords_per_param,
                                          Rng& rng) {
  require(h >= 1e-7 && h <= 1e-3, "finite_diff_check: h must lie in [1e-7, 1e-3]");
  require(params.size() == analytic.size(), "finite_diff_check: grad count mismatch");
  FiniteDiffReport rep;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& param = *params[p];
    require(param.same_shape(analytic[p]), "finite_diff_check: grad shape mismatch");
    std::int64_t n = param.numel();
    std::vector<std::int64_t> coords;
    if (n <= max_coords_per_param) {
      for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < max_coords_per_param; ++i)
        coords.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n))));
    }
    for (std::int64_t i : coords) {
      double saved = param[i];
      param[i] = saved + h;
      double fp = loss();
      param[i] = saved - h;
      double fm = loss();
      param[i] = saved;
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[p][i];
      double abs_err = std::abs(a - numeric);
      double rel = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-6});
      ++rep.coords_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        std::ostringstream os;
        os << "param " << p << " coord " << i << ": analytic " << a << ", numeric "
           << numeric;
        rep.worst = os.str();
      }
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    }
  }
  return rep;
}

// Convenience driver: runs `forward` on leaves bound to `params`, reduces
// the output to a scalar with a fixed random weighting, computes analytic
// gradients by backward(), and verifies them against central differences.
inline FiniteDiffReport check_gradients(
    std::vector<Tensor>& params,
    const std::function<Value(Tape&, const std::vector<Value>&)>& forward,
    std::uint64_t seed, double h = 1e-5, int max_coords_per_param = 12) {
  Rng weight_rng(derive_seed(seed, hash_str("gradcheck-weights")));
  Tensor weights;
  std::vector<Tensor> analytic;

  auto run = [&](bool with_grad) -> double {
    Tape t;
    std::vector<Value> vals;
    vals.reserve(params.size());
    for (Tensor& p : params) vals.push_back(make_leaf(t, p, with_grad));
    Value out = forward(t, vals);
    if (weights.empty()) weights = Tensor::randn(out.val().shape(), weight_rng);
    Value lossv = sum_all(mul(out, make_constant(t, weights)));
    double loss = lossv.val().scalar_value();
    if (with_grad) {
      t.backward(lossv.id);
      analytic.clear();
      for (const Value& v : vals) analytic.push_back(v.grad());
    }
    return loss;
  };

  run(true);
  std::vector<Tensor*> ptrs;
  for (Tensor& p : params) ptrs.push_back(&p);
  Rng coord_rng(derive_seed(seed, hash_str("gradcheck-coords")));
  return finite_diff_check(
      ptrs, analytic, [&] { return run(false); }, h, max_coords_per_param, coord_rng);
}

}  // namespace capf
