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

#ifndef DPAF_ACCOUNTANT_HPP_
#define DPAF_ACCOUNTANT_HPP_

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dpaf {

// One subsampled Gaussian mechanism, as the accountant sees it. The noise
// multiplier is the ratio of the noise standard deviation to the
// sensitivity, i.e. the mechanism adds N(0, (noise_multiplier *
// sensitivity)^2) per coordinate. All Renyi computations therefore depend
// on sigma alone; the sensitivity matters only when turning a multiplier
// into an absolute noise scale.
struct MechanismConfig {
  double sensitivity = 1.0;      // u, l2
  double noise_multiplier = 0.0; // sigma
  double subsampling_rate = 1.0; // gamma in (0, 1]
  long iterations = 0;           // T, number of noisy releases

  void validate() const;
};

// Renyi-DP bound epsilon(alpha) on a grid of integer orders.
struct RdpCurve {
  std::vector<int> orders;      // strictly increasing, all >= 2
  std::vector<double> epsilons; // same length, all >= 0, finite

  void validate() const;
};

// How the total budget is divided between the three privatized components
// (conv1 pre-training, conv2 DPSGD, forward-phase aggregation noise).
// Percent mode gives each component a percentage of epsilon_total;
// absolute mode pins conv1 and the aggregation and gives the remainder to
// conv2.
enum class AllocationMode { kPercent, kAbsoluteRemainder };

struct BudgetAllocation {
  AllocationMode mode = AllocationMode::kAbsoluteRemainder;
  // Percent mode: percentages summing to 100. Absolute mode: conv1 and
  // dpagg are absolute epsilons, conv2 is ignored.
  double conv1 = 0.1;
  double conv2 = 0.0;
  double dpagg = 0.1;

  // Fractions of epsilon_total per component, summing to 1.
  std::array<double, 3> shares(double epsilon_total) const;
  void validate(double epsilon_total) const;
};

struct PrivacySpec {
  double epsilon_total = 0.0;
  double delta = 1e-5;
  MechanismConfig conv1;
  MechanismConfig conv2;
  MechanismConfig dpagg;
  BudgetAllocation allocation;

  void validate() const;
};

// Renyi bound of the plain Gaussian mechanism with l2-sensitivity u and
// absolute noise standard deviation sigma: alpha * u^2 / (2 sigma^2).
double gaussian_rdp(int alpha, double u, double sigma);

// Pointwise sum of curves sharing one order grid.
RdpCurve compose_rdp(const std::vector<RdpCurve>& curves);

// Renyi bound of the Gaussian mechanism under subsampling without
// replacement at rate gamma, at integer order alpha >= 2:
//
//   (1/(alpha-1)) * log( 1
//       + gamma^2 C(alpha,2) min{ 4(e^{eps(2)}-1), 2 e^{eps(2)} }
//       + sum_{j=3..alpha} 2 gamma^j C(alpha,j) e^{(j-1) eps(j)} )
//
// with eps(j) = j u^2 / (2 sigma^2). The factor min{2, (e^{eps(inf)}-1)^j}
// equals 2 here because eps(inf) is infinite for Gaussian noise. The sum
// is evaluated in log space so large alpha and small sigma cannot
// overflow.
double subsampled_rdp(int alpha, double gamma, double u, double sigma);

// (alpha, eps)-RDP implies (eps + log(1/delta)/(alpha-1), delta)-DP.
double rdp_to_dp(int alpha, double eps_rdp, double delta);

// Default order grid: all integers in [2, 256].
std::vector<int> default_alpha_grid();

struct TotalEpsilon {
  double epsilon = 0.0;
  int alpha = 0;
};

// Total (epsilon, delta)-DP guarantee of a three-component run:
// min over the grid of
//   T1 eps'(a,g1,s1) + T2 eps'(a,g2,s2) + T3 eps'(a,g3,s3)
//       + log(1/delta)/(a-1),
// where eps' is the subsampled Renyi bound at unit sensitivity (each
// component's noise is expressed through its multiplier). Components with
// zero iterations contribute nothing.
TotalEpsilon dpaf_total_epsilon(const PrivacySpec& spec,
                                std::span<const int> alpha_grid);

// Precomputed per-order epsilon' for each component, for cheap repeated
// totals with varying iteration counts (the trainer logs the budget spent
// after every release).
class ComposedEpsilonTable {
 public:
  ComposedEpsilonTable(const PrivacySpec& spec,
                       std::span<const int> alpha_grid);

  TotalEpsilon total(long t1, long t2, long t3) const;

 private:
  std::vector<int> orders_;
  std::vector<double> per_step_[3];
  double delta_;
};

// Result of noise calibration. `sigma` entries for components with zero
// iterations are reported as zero and are never used.
struct CalibrationResult {
  double sigma_conv1 = 0.0;
  double sigma_conv2 = 0.0;
  double sigma_dpagg = 0.0;
  double achieved_epsilon = 0.0;
  int alpha = 0;
  double epsilon_total = 0.0;
  double delta = 0.0;
  // Echo of the inputs, for the report record.
  MechanismConfig conv1;
  MechanismConfig conv2;
  MechanismConfig dpagg;
  std::array<double, 3> component_epsilons{}; // nominal share_i * eps_total

  // Deterministic key=value text record, parseable by from_text.
  std::string to_text() const;
  static CalibrationResult from_text(const std::string& text);
};

// Finds per-component noise multipliers meeting the allocation. For each
// feasible order alpha the post-conversion Renyi budget eps_total -
// log(1/delta)/(alpha-1) is split by the allocation shares and each
// component's sigma is bisected to the smallest value whose composed bound
// stays within its share; the order minimizing the largest multiplier
// wins. The returned multipliers satisfy
//   (1 - tolerance) * eps_total <= achieved_epsilon <= eps_total
// where achieved_epsilon is dpaf_total_epsilon re-run on the outputs.
//
// Throws InfeasibleBudgetError when no grid order can meet the target and
// ValidationError on inconsistent inputs (e.g. a component with a positive
// share but zero iterations).
CalibrationResult calibrate_sigma(const PrivacySpec& target,
                                  std::span<const int> alpha_grid,
                                  double tolerance = 0.01);

// l2-sensitivity of the normalize-concatenate-sum aggregation: one sample
// contributes m maps of l2 norm at most p each, hence sqrt(m) * p.
double agg_sensitivity(int m, int p);

// Aggregation sensitivity if placed after conv layer a of a halving
// network on rho x rho inputs with c channels and the given filter counts:
// sqrt(c * prod_{i<=a} k_i) * rho / 2^a. a = 0 means the raw image.
double agg_sensitivity_at_layer(int rho, int c, std::span<const int> filters,
                                int a);

}  // namespace dpaf

#endif  // DPAF_ACCOUNTANT_HPP_
