#include "protopool/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <exception>

namespace protopool::ad {

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& p : params) worst = std::max(worst, p.max_rel_error);
  return worst;
}

double GradCheckReport::max_abs_error() const {
  double worst = 0.0;
  for (const auto& p : params) worst = std::max(worst, p.max_abs_error);
  return worst;
}

namespace {

double evaluate(const ScalarFunction& f, const std::vector<Tensor>& params) {
  Graph g;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& t : params) vars.push_back(g.constant(t));
  return f(g, vars).item();
}

}  // namespace

GradCheckReport finite_diff_check(const ScalarFunction& f, std::vector<Tensor> params, double step,
                                  double tol) {
  GradCheckReport report;
  try {
    Graph g;
    std::vector<Var> vars;
    for (const Tensor& t : params) vars.push_back(g.variable(t));
    Var out = f(g, vars);
    g.backward(out);
    for (Var v : vars) {
      GradCheckEntry entry;
      entry.analytic = g.grad(v);
      report.params.push_back(std::move(entry));
    }

    for (std::size_t p = 0; p < params.size(); ++p) {
      GradCheckEntry& entry = report.params[p];
      entry.numeric.resize(params[p].numel());
      for (std::size_t i = 0; i < params[p].numel(); ++i) {
        const double saved = params[p][i];
        params[p][i] = saved + step;
        const double hi = evaluate(f, params);
        params[p][i] = saved - step;
        const double lo = evaluate(f, params);
        params[p][i] = saved;
        if (!std::isfinite(hi) || !std::isfinite(lo)) {
          report.diagnostic = "non-finite value while probing parameter " + std::to_string(p) +
                              " entry " + std::to_string(i);
          return report;
        }
        entry.numeric[i] = (hi - lo) / (2.0 * step);
      }
      double scale = 1e-8;
      for (std::size_t i = 0; i < entry.numeric.size(); ++i) {
        scale = std::max({scale, std::fabs(entry.analytic[i]), std::fabs(entry.numeric[i])});
        entry.max_abs_error = std::max(entry.max_abs_error, std::fabs(entry.analytic[i] - entry.numeric[i]));
      }
      entry.max_rel_error = entry.max_abs_error / scale;
    }
  } catch (const std::exception& e) {
    report.diagnostic = e.what();
    return report;
  }
  report.passed = std::all_of(report.params.begin(), report.params.end(),
                              [tol](const GradCheckEntry& e) { return e.max_rel_error < tol; });
  return report;
}

}  // namespace protopool::ad
