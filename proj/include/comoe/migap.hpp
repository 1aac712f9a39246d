// SPDX-License-Identifier: Apache-2.0
#pragma once

// Exact mutual-information machinery on finite discrete distributions and
// a numerical witness for the lower bound
//
//     delta_I  >=  log(N) - L_NCE
//
// where delta_I is the MI gap between activated and inactivated experts
// and L_NCE is evaluated with the exact density-ratio scores
// h1 = p(e+|x)/p(e+), h2 = p(e-|x)/p(e-). Everything is in nats.

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "comoe/error.hpp"

namespace comoe {

// Joint distribution p(x, m) over finite supports, row-major |X| x |M|.
// Entries nonnegative, total mass 1 within 1e-12.
class DiscreteJoint {
public:
    DiscreteJoint() = default;
    DiscreteJoint(std::size_t nx, std::size_t nm, std::vector<double> probs);

    std::size_t nx() const { return nx_; }
    std::size_t nm() const { return nm_; }
    double p(std::size_t x, std::size_t m) const { return p_[x * nm_ + m]; }
    const std::vector<double>& values() const { return p_; }
    std::vector<double> x_marginal() const;
    std::vector<double> m_marginal() const;

private:
    std::size_t nx_ = 0, nm_ = 0;
    std::vector<double> p_;
};

// A matched pair of joints: (x, activated-expert) and (x, inactivated-
// expert), sharing the x-marginal within 1e-9.
struct GapScenario {
    DiscreteJoint joint_pos;
    DiscreteJoint joint_neg;
};

// Throws DomainError when the x-marginals diverge beyond 1e-9 or the
// supports disagree.
void validate_gap_scenario(const GapScenario& s);

// Exact sum p(x,m) log(p(x,m) / (p(x) p(m))), with 0 log 0 = 0.
// Nonnegative; negative rounding residue below 1e-12 is clamped to zero.
double mutual_information(const DiscreteJoint& joint);

// mutual_information(joint_pos) - mutual_information(joint_neg).
double mi_gap(const GapScenario& s);

enum class EstimateMode { kAuto, kExact, kMonteCarlo };

struct InfoNceEstimate {
    double value = 0.0;      // log(N) - L_NCE
    double std_error = 0.0;  // Monte-Carlo standard error; 0 when exact
    bool exact = false;
    std::size_t samples = 0;  // enumeration leaves or MC draws
};

// Estimates log(N) - L_NCE where one positive is drawn from joint_pos and
// N negatives are drawn from joint_neg conditioned on the same x. Supports
// with |X| * max(|M+|, |M-|) <= 64 and a modest multiset count are
// evaluated by exact enumeration (deterministic, std_error 0); larger ones
// fall back to num_mc seeded Monte-Carlo draws. kExact throws
// ContractError when enumeration is infeasible.
InfoNceEstimate infonce_estimate(const GapScenario& s, std::size_t N, std::size_t num_mc,
                                 std::uint64_t seed, EstimateMode mode = EstimateMode::kAuto);

struct BoundRow {
    std::size_t scenario_id = 0;
    std::size_t N = 0;
    double delta_I = 0.0;
    double estimate = 0.0;
    double slack = 0.0;  // delta_I - estimate; negative means bound violated
    double std_error = 0.0;
    bool exact = false;
};

// One row per (scenario, N). Per-row seeds are derived from `seed` so cells
// are independent but the whole table is reproducible.
std::vector<BoundRow> bound_report(const std::vector<GapScenario>& scenarios,
                                   const std::vector<std::size_t>& Ns, std::size_t num_mc,
                                   std::uint64_t seed);

// Header scenario_id,N,delta_I,estimate,slack,stderr; %.17g values.
std::string bound_report_csv(const std::vector<BoundRow>& rows);

// x uniform over m outcomes; e+ a bijection of x (MI = ln m); e- uniform
// and independent (MI = 0). The bound's slack on this scenario is
// log(1 + m/N), strictly decreasing in N.
GapScenario make_deterministic_vs_independent(std::size_t m);

// Both joints factorize: delta_I = 0.
GapScenario make_independent_pair(std::size_t nx, std::size_t nm);

// Random strictly-positive-marginal scenario with varied sharpness.
GapScenario make_random_scenario(std::size_t nx, std::size_t nm_pos, std::size_t nm_neg,
                                 std::mt19937_64& rng);

// Named suite for the command-line bound check.
std::vector<GapScenario> builtin_scenarios();

// JSON file: {"scenarios": [{"joint_pos": [[...], ...],
//                            "joint_neg": [[...], ...]}, ...]}
std::vector<GapScenario> load_scenarios(const std::string& path);

}  // namespace comoe
