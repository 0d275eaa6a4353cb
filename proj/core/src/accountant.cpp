// Copyright 2026 The dpaflab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dpaf/accountant.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "dpaf/errors.hpp"

namespace dpaf {
namespace {

constexpr double kSigmaLow = 1e-2;
constexpr double kSigmaHigh = 1e6;
constexpr int kBisectionCap = 200;
constexpr double kBisectionRelTol = 1e-6;

// log(e^x - 1) for x > 0 without overflow.
double log_expm1(double x) {
  if (x > 1e-8) return x + std::log1p(-std::exp(-x));
  return std::log(std::expm1(x));
}

double log_binomial(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) -
         std::lgamma(n - k + 1.0);
}

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

// Log-space terms of the subsampled Gaussian bound at fixed (alpha, gamma).
// Splitting the sigma-independent part out keeps calibration bisections off
// the lgamma path.
class SubsampledTerms {
 public:
  SubsampledTerms(int alpha, double gamma) : alpha_(alpha) {
    if (alpha < 2) throw ValidationError("subsampled_rdp: alpha must be >= 2");
    if (!(gamma > 0.0) || gamma > 1.0) {
      throw ValidationError("subsampled_rdp: gamma must be in (0, 1]");
    }
    const double log_gamma = std::log(gamma);
    log_t2_base_ = 2.0 * log_gamma + log_binomial(alpha, 2);
    if (alpha >= 3) {
      base_.resize(alpha - 2);
      for (int j = 3; j <= alpha; ++j) {
        base_[j - 3] =
            j * log_gamma + log_binomial(alpha, j) + std::log(2.0);
      }
    }
  }

  // Bound at q = u^2 / (2 sigma^2), i.e. eps(j) = j * q.
  double epsilon(double q) const {
    const double eps2 = 2.0 * q;
    // min{4(e^{eps2}-1), 2 e^{eps2}}, in logs. (The second branch already
    // carries the Gaussian min{2, .} = 2 factor.)
    const double log_t2 =
        log_t2_base_ + std::min(std::log(4.0) + log_expm1(eps2),
                                std::log(2.0) + eps2);
    double max_log = std::max(0.0, log_t2);  // the leading 1 has log 0
    for (int j = 3; j <= alpha_; ++j) {
      max_log = std::max(max_log, base_[j - 3] + (j - 1.0) * j * q);
    }
    // Kahan-compensated sum of exp(term - max); terms more than ~700 nats
    // below the max underflow to zero, which is the intended cutoff.
    double sum = 0.0, comp = 0.0;
    auto add = [&](double term_log) {
      const double y = std::exp(term_log - max_log) - comp;
      const double t = sum + y;
      comp = (t - sum) - y;
      sum = t;
    };
    add(0.0);
    add(log_t2);
    for (int j = 3; j <= alpha_; ++j) {
      add(base_[j - 3] + (j - 1.0) * j * q);
    }
    return (max_log + std::log(sum)) / (alpha_ - 1.0);
  }

 private:
  int alpha_;
  double log_t2_base_ = 0.0;
  std::vector<double> base_;
};

void validate_grid(std::span<const int> grid) {
  if (grid.empty()) throw ValidationError("alpha grid must be nonempty");
  for (int a : grid) {
    if (a < 2) throw ValidationError("alpha grid entries must be >= 2");
  }
}

double conversion_term(int alpha, double delta) {
  return std::log(1.0 / delta) / (alpha - 1.0);
}

}  // namespace

void MechanismConfig::validate() const {
  if (!(sensitivity > 0.0)) {
    throw ValidationError("MechanismConfig: sensitivity must be positive");
  }
  if (!(subsampling_rate > 0.0) || subsampling_rate > 1.0) {
    throw ValidationError(
        "MechanismConfig: subsampling rate must be in (0, 1]");
  }
  if (iterations < 0) {
    throw ValidationError("MechanismConfig: iterations must be >= 0");
  }
  if (iterations > 0 && !(noise_multiplier > 0.0)) {
    throw ValidationError(
        "MechanismConfig: noise multiplier must be positive when the "
        "mechanism runs");
  }
}

void RdpCurve::validate() const {
  if (orders.size() != epsilons.size()) {
    throw ValidationError("RdpCurve: orders/epsilons length mismatch");
  }
  for (std::size_t i = 0; i < orders.size(); ++i) {
    if (orders[i] < 2) throw ValidationError("RdpCurve: order below 2");
    if (i > 0 && orders[i] <= orders[i - 1]) {
      throw ValidationError("RdpCurve: orders must be strictly increasing");
    }
    if (!(epsilons[i] >= 0.0) || !std::isfinite(epsilons[i])) {
      throw ValidationError("RdpCurve: epsilon must be finite and >= 0");
    }
  }
}

std::array<double, 3> BudgetAllocation::shares(double epsilon_total) const {
  validate(epsilon_total);
  if (mode == AllocationMode::kPercent) {
    return {conv1 / 100.0, conv2 / 100.0, dpagg / 100.0};
  }
  const double s1 = conv1 / epsilon_total;
  const double s3 = dpagg / epsilon_total;
  return {s1, 1.0 - s1 - s3, s3};
}

void BudgetAllocation::validate(double epsilon_total) const {
  if (conv1 < 0.0 || conv2 < 0.0 || dpagg < 0.0) {
    throw ValidationError("BudgetAllocation: negative share");
  }
  if (mode == AllocationMode::kPercent) {
    const double sum = conv1 + conv2 + dpagg;
    if (std::abs(sum - 100.0) > 1e-9) {
      throw ValidationError("BudgetAllocation: percentages must sum to 100");
    }
  } else {
    if (!(epsilon_total > 0.0)) {
      throw ValidationError("BudgetAllocation: epsilon_total must be positive");
    }
    if (!(conv1 + dpagg < epsilon_total)) {
      throw ValidationError(
          "BudgetAllocation: absolute epsilons leave no remainder for conv2");
    }
  }
}

void PrivacySpec::validate() const {
  if (!(epsilon_total > 0.0)) {
    throw ValidationError("PrivacySpec: epsilon_total must be positive");
  }
  if (!(delta > 0.0) || !(delta < 1.0)) {
    throw ValidationError("PrivacySpec: delta must be in (0, 1)");
  }
  conv1.validate();
  conv2.validate();
  dpagg.validate();
  allocation.validate(epsilon_total);
}

double gaussian_rdp(int alpha, double u, double sigma) {
  if (alpha < 2) throw ValidationError("gaussian_rdp: alpha must be >= 2");
  if (!(u > 0.0)) throw ValidationError("gaussian_rdp: u must be positive");
  if (!(sigma > 0.0)) {
    throw ValidationError("gaussian_rdp: sigma must be positive");
  }
  return alpha * u * u / (2.0 * sigma * sigma);
}

RdpCurve compose_rdp(const std::vector<RdpCurve>& curves) {
  if (curves.empty()) throw ValidationError("compose_rdp: no curves");
  curves.front().validate();
  RdpCurve out = curves.front();
  for (std::size_t k = 1; k < curves.size(); ++k) {
    curves[k].validate();
    if (curves[k].orders != out.orders) {
      throw ValidationError("compose_rdp: mismatched order grids");
    }
    for (std::size_t i = 0; i < out.epsilons.size(); ++i) {
      out.epsilons[i] += curves[k].epsilons[i];
    }
  }
  return out;
}

double subsampled_rdp(int alpha, double gamma, double u, double sigma) {
  if (!(u > 0.0)) throw ValidationError("subsampled_rdp: u must be positive");
  if (!(sigma > 0.0)) {
    throw ValidationError("subsampled_rdp: sigma must be positive");
  }
  SubsampledTerms terms(alpha, gamma);
  return terms.epsilon(u * u / (2.0 * sigma * sigma));
}

double rdp_to_dp(int alpha, double eps_rdp, double delta) {
  if (alpha < 2) throw ValidationError("rdp_to_dp: alpha must be >= 2");
  if (!(delta > 0.0) || !(delta < 1.0)) {
    throw ValidationError("rdp_to_dp: delta must be in (0, 1)");
  }
  if (eps_rdp < 0.0) throw ValidationError("rdp_to_dp: negative epsilon");
  return eps_rdp + conversion_term(alpha, delta);
}

std::vector<int> default_alpha_grid() {
  std::vector<int> grid(255);
  for (int i = 0; i < 255; ++i) grid[i] = i + 2;
  return grid;
}

TotalEpsilon dpaf_total_epsilon(const PrivacySpec& spec,
                                std::span<const int> alpha_grid) {
  ComposedEpsilonTable table(spec, alpha_grid);
  return table.total(spec.conv1.iterations, spec.conv2.iterations,
                     spec.dpagg.iterations);
}

ComposedEpsilonTable::ComposedEpsilonTable(const PrivacySpec& spec,
                                           std::span<const int> alpha_grid)
    : delta_(spec.delta) {
  validate_grid(alpha_grid);
  if (!(spec.delta > 0.0) || !(spec.delta < 1.0)) {
    throw ValidationError("ComposedEpsilonTable: delta must be in (0, 1)");
  }
  orders_.assign(alpha_grid.begin(), alpha_grid.end());
  const MechanismConfig* comps[3] = {&spec.conv1, &spec.conv2, &spec.dpagg};
  for (int i = 0; i < 3; ++i) {
    const MechanismConfig& c = *comps[i];
    auto& col = per_step_[i];
    if (!(c.noise_multiplier > 0.0)) continue;  // inactive, never queried
    col.resize(orders_.size());
    for (std::size_t k = 0; k < orders_.size(); ++k) {
      // Unit sensitivity: the multiplier already expresses noise relative
      // to the component's sensitivity.
      col[k] = subsampled_rdp(orders_[k], c.subsampling_rate, 1.0,
                              c.noise_multiplier);
    }
  }
}

TotalEpsilon ComposedEpsilonTable::total(long t1, long t2, long t3) const {
  const long ts[3] = {t1, t2, t3};
  for (int i = 0; i < 3; ++i) {
    if (ts[i] < 0) throw ValidationError("total: negative iteration count");
    if (ts[i] > 0 && per_step_[i].empty()) {
      throw ValidationError(
          "total: iterations requested for a component with no noise "
          "multiplier");
    }
  }
  TotalEpsilon best{std::numeric_limits<double>::infinity(), 0};
  for (std::size_t k = 0; k < orders_.size(); ++k) {
    double eps = conversion_term(orders_[k], delta_);
    for (int i = 0; i < 3; ++i) {
      if (ts[i] > 0) eps += static_cast<double>(ts[i]) * per_step_[i][k];
    }
    if (eps < best.epsilon) best = {eps, orders_[k]};
  }
  return best;
}

double agg_sensitivity(int m, int p) {
  if (m < 1 || p < 1) {
    throw ValidationError("agg_sensitivity: m and p must be >= 1");
  }
  return std::sqrt(static_cast<double>(m)) * p;
}

double agg_sensitivity_at_layer(int rho, int c, std::span<const int> filters,
                                int a) {
  if (a < 0 || a > static_cast<int>(filters.size())) {
    throw ValidationError("agg_sensitivity_at_layer: layer index out of range");
  }
  if (rho < 1 || c < 1) {
    throw ValidationError("agg_sensitivity_at_layer: bad input shape");
  }
  if (rho % (1 << a) != 0) {
    throw ValidationError(
        "agg_sensitivity_at_layer: input side not divisible by 2^a");
  }
  double maps = c;
  for (int i = 0; i < a; ++i) {
    if (filters[i] < 1) {
      throw ValidationError("agg_sensitivity_at_layer: nonpositive filters");
    }
    maps *= filters[i];
  }
  return std::sqrt(maps) * (static_cast<double>(rho) / (1 << a));
}

namespace {

struct ComponentView {
  const MechanismConfig* cfg;
  double share;
  const char* name;
};

// Smallest sigma in [kSigmaLow, kSigmaHigh] with
// T * eps'(alpha, gamma, sigma) <= target_rdp, or nan when even the top of
// the bracket exceeds the budget. The bound is strictly decreasing in sigma.
double bisect_sigma(const SubsampledTerms& terms, long iterations,
                    double target_rdp) {
  auto composed = [&](double sigma) {
    return static_cast<double>(iterations) *
           terms.epsilon(1.0 / (2.0 * sigma * sigma));
  };
  if (composed(kSigmaHigh) > target_rdp) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  if (composed(kSigmaLow) <= target_rdp) return kSigmaLow;
  double lo = kSigmaLow, hi = kSigmaHigh;
  int iter = 0;
  while ((hi - lo) / hi > kBisectionRelTol) {
    if (++iter > kBisectionCap) {
      throw InfeasibleBudgetError(
          "calibrate_sigma: sigma bisection did not converge");
    }
    const double mid = 0.5 * (lo + hi);
    if (composed(mid) <= target_rdp) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

}  // namespace

CalibrationResult calibrate_sigma(const PrivacySpec& target,
                                  std::span<const int> alpha_grid,
                                  double tolerance) {
  validate_grid(alpha_grid);
  if (!(tolerance > 0.0) || tolerance >= 1.0) {
    throw ValidationError("calibrate_sigma: tolerance must be in (0, 1)");
  }
  if (!(target.epsilon_total > 0.0)) {
    throw ValidationError("calibrate_sigma: epsilon_total must be positive");
  }
  if (!(target.delta > 0.0) || !(target.delta < 1.0)) {
    throw ValidationError("calibrate_sigma: delta must be in (0, 1)");
  }
  const auto shares = target.allocation.shares(target.epsilon_total);
  const ComponentView comps[3] = {{&target.conv1, shares[0], "conv1"},
                                  {&target.conv2, shares[1], "conv2"},
                                  {&target.dpagg, shares[2], "dpagg"}};
  bool any_active = false;
  for (const auto& comp : comps) {
    if (!(comp.cfg->sensitivity > 0.0)) {
      throw ValidationError("calibrate_sigma: sensitivity must be positive");
    }
    if (comp.cfg->iterations > 0 && comp.share <= 0.0) {
      throw ValidationError(std::string("calibrate_sigma: component ") +
                            comp.name + " runs but has a zero share");
    }
    if (comp.cfg->iterations == 0 && comp.share > 0.0) {
      throw ValidationError(std::string("calibrate_sigma: component ") +
                            comp.name +
                            " has a share but never runs; shift its share");
    }
    any_active |= comp.cfg->iterations > 0;
  }
  if (!any_active) {
    throw ValidationError("calibrate_sigma: no component performs releases");
  }

  // Pass 1: per order, bisect each active component against its slice of
  // the post-conversion Renyi budget; keep the order with the smallest
  // worst-case multiplier.
  double best_max_sigma = std::numeric_limits<double>::infinity();
  int best_alpha = 0;
  std::array<double, 3> best_sigma{0.0, 0.0, 0.0};
  for (int alpha : alpha_grid) {
    const double budget =
        target.epsilon_total - conversion_term(alpha, target.delta);
    if (!(budget > 0.0)) continue;
    std::array<double, 3> sigma{0.0, 0.0, 0.0};
    double max_sigma = 0.0;
    bool feasible = true;
    for (int i = 0; i < 3; ++i) {
      if (comps[i].cfg->iterations == 0) continue;
      SubsampledTerms terms(alpha, comps[i].cfg->subsampling_rate);
      sigma[i] = bisect_sigma(terms, comps[i].cfg->iterations,
                              comps[i].share * budget);
      if (std::isnan(sigma[i])) {
        feasible = false;
        break;
      }
      max_sigma = std::max(max_sigma, sigma[i]);
    }
    if (feasible && max_sigma < best_max_sigma) {
      best_max_sigma = max_sigma;
      best_alpha = alpha;
      best_sigma = sigma;
    }
  }
  if (best_alpha == 0) {
    throw InfeasibleBudgetError(
        "calibrate_sigma: no order in the grid can meet the target budget");
  }

  // Pass 2: re-run the composed accountant on the calibrated multipliers.
  // The total never exceeds the target; if the grid minimum lands more than
  // the tolerance below it (the orders favored by individual components can
  // disagree), scale all multipliers down together until it re-enters the
  // window. Shrinking sigmas raises the bound at every order, so the scan
  // is monotone.
  auto total_at = [&](double scale) {
    PrivacySpec spec = target;
    MechanismConfig* cfgs[3] = {&spec.conv1, &spec.conv2, &spec.dpagg};
    for (int i = 0; i < 3; ++i) {
      cfgs[i]->noise_multiplier =
          comps[i].cfg->iterations > 0 ? best_sigma[i] * scale : 0.0;
    }
    return dpaf_total_epsilon(spec, alpha_grid);
  };
  const double floor_eps = (1.0 - tolerance) * target.epsilon_total;
  double scale = 1.0;
  TotalEpsilon achieved = total_at(scale);
  if (achieved.epsilon < floor_eps) {
    double hi = 1.0;  // achieved(hi) below the window
    double lo = 1.0;
    int iter = 0;
    do {
      if (++iter > kBisectionCap) {
        throw InfeasibleBudgetError(
            "calibrate_sigma: scale search did not converge");
      }
      lo *= 0.5;
      achieved = total_at(lo);
    } while (achieved.epsilon < floor_eps);
    scale = lo;
    while (achieved.epsilon > target.epsilon_total) {
      if (++iter > kBisectionCap) {
        throw InfeasibleBudgetError(
            "calibrate_sigma: scale search did not converge");
      }
      const double mid = 0.5 * (lo + hi);
      const TotalEpsilon mid_total = total_at(mid);
      if (mid_total.epsilon < floor_eps) {
        hi = mid;
      } else {
        scale = mid;
        achieved = mid_total;
        lo = mid;
      }
    }
  }

  CalibrationResult result;
  result.sigma_conv1 = comps[0].cfg->iterations > 0 ? best_sigma[0] * scale : 0.0;
  result.sigma_conv2 = comps[1].cfg->iterations > 0 ? best_sigma[1] * scale : 0.0;
  result.sigma_dpagg = comps[2].cfg->iterations > 0 ? best_sigma[2] * scale : 0.0;
  result.achieved_epsilon = achieved.epsilon;
  result.alpha = achieved.alpha;
  result.epsilon_total = target.epsilon_total;
  result.delta = target.delta;
  result.conv1 = target.conv1;
  result.conv2 = target.conv2;
  result.dpagg = target.dpagg;
  result.conv1.noise_multiplier = result.sigma_conv1;
  result.conv2.noise_multiplier = result.sigma_conv2;
  result.dpagg.noise_multiplier = result.sigma_dpagg;
  for (int i = 0; i < 3; ++i) {
    result.component_epsilons[i] = shares[i] * target.epsilon_total;
  }
  return result;
}

std::string CalibrationResult::to_text() const {
  std::ostringstream out;
  out << "dpaf-calibration-v1\n";
  out << "epsilon_total=" << fmt_double(epsilon_total) << "\n";
  out << "delta=" << fmt_double(delta) << "\n";
  out << "alpha=" << alpha << "\n";
  out << "achieved_epsilon=" << fmt_double(achieved_epsilon) << "\n";
  const MechanismConfig* cfgs[3] = {&conv1, &conv2, &dpagg};
  const char* names[3] = {"conv1", "conv2", "dpagg"};
  const double sigmas[3] = {sigma_conv1, sigma_conv2, sigma_dpagg};
  for (int i = 0; i < 3; ++i) {
    out << "component=" << names[i] << " sigma=" << fmt_double(sigmas[i])
        << " iterations=" << cfgs[i]->iterations
        << " subsampling_rate=" << fmt_double(cfgs[i]->subsampling_rate)
        << " sensitivity=" << fmt_double(cfgs[i]->sensitivity)
        << " epsilon=" << fmt_double(component_epsilons[i]) << "\n";
  }
  return out.str();
}

CalibrationResult CalibrationResult::from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "dpaf-calibration-v1") {
    throw ValidationError("calibration record: bad header");
  }
  CalibrationResult result;
  int component_count = 0;
  auto parse_kv = [](const std::string& token, std::string& key,
                     std::string& value) {
    const auto pos = token.find('=');
    if (pos == std::string::npos) {
      throw ValidationError("calibration record: expected key=value, got '" +
                            token + "'");
    }
    key = token.substr(0, pos);
    value = token.substr(pos + 1);
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream tokens(line);
    std::string token, key, value;
    tokens >> token;
    parse_kv(token, key, value);
    if (key == "epsilon_total") {
      result.epsilon_total = std::stod(value);
    } else if (key == "delta") {
      result.delta = std::stod(value);
    } else if (key == "alpha") {
      result.alpha = std::stoi(value);
    } else if (key == "achieved_epsilon") {
      result.achieved_epsilon = std::stod(value);
    } else if (key == "component") {
      MechanismConfig* cfg = nullptr;
      double* sigma = nullptr;
      int index = 0;
      if (value == "conv1") {
        cfg = &result.conv1;
        sigma = &result.sigma_conv1;
        index = 0;
      } else if (value == "conv2") {
        cfg = &result.conv2;
        sigma = &result.sigma_conv2;
        index = 1;
      } else if (value == "dpagg") {
        cfg = &result.dpagg;
        sigma = &result.sigma_dpagg;
        index = 2;
      } else {
        throw ValidationError("calibration record: unknown component '" +
                              value + "'");
      }
      ++component_count;
      while (tokens >> token) {
        parse_kv(token, key, value);
        if (key == "sigma") {
          *sigma = std::stod(value);
          cfg->noise_multiplier = *sigma;
        } else if (key == "iterations") {
          cfg->iterations = std::stol(value);
        } else if (key == "subsampling_rate") {
          cfg->subsampling_rate = std::stod(value);
        } else if (key == "sensitivity") {
          cfg->sensitivity = std::stod(value);
        } else if (key == "epsilon") {
          result.component_epsilons[index] = std::stod(value);
        } else {
          throw ValidationError("calibration record: unknown field '" + key +
                                "'");
        }
      }
    } else {
      throw ValidationError("calibration record: unknown field '" + key + "'");
    }
  }
  if (component_count != 3) {
    throw ValidationError("calibration record: expected three components");
  }
  return result;
}

}  // namespace dpaf
