// SPDX-License-Identifier: Apache-2.0
#include "comoe/migap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

namespace comoe {

namespace {

constexpr double kMassTol = 1e-12;
constexpr double kMarginalTol = 1e-9;
constexpr std::size_t kExactSupportCap = 64;
constexpr double kExactWorkCap = 4e6;

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Number of multisets of size N over s slots, C(N+s-1, s-1), saturating.
double multiset_count(std::size_t N, std::size_t s) {
    double c = 1.0;
    for (std::size_t i = 1; i < s; ++i) {
        c *= static_cast<double>(N + i) / static_cast<double>(i);
        if (c > 1e18) return 1e18;
    }
    return c;
}

struct Conditionals {
    std::vector<double> px;        // shared x weights (from joint_pos)
    std::vector<double> pos_cond;  // nx * nmp, rows normalized
    std::vector<double> neg_cond;  // nx * nmn, rows normalized
    std::vector<double> h1;        // nx * nmp density ratios
    std::vector<double> h2;        // nx * nmn density ratios
};

Conditionals prepare(const GapScenario& s) {
    validate_gap_scenario(s);
    const auto& jp = s.joint_pos;
    const auto& jn = s.joint_neg;
    const std::size_t nx = jp.nx(), nmp = jp.nm(), nmn = jn.nm();
    Conditionals c;
    c.px = jp.x_marginal();
    auto pxn = jn.x_marginal();
    auto pmp = jp.m_marginal();
    auto pmn = jn.m_marginal();
    c.pos_cond.assign(nx * nmp, 0.0);
    c.neg_cond.assign(nx * nmn, 0.0);
    c.h1.assign(nx * nmp, 0.0);
    c.h2.assign(nx * nmn, 0.0);
    for (std::size_t x = 0; x < nx; ++x) {
        if (c.px[x] > 0.0 && pxn[x] == 0.0)
            throw DomainError("negative-sampling conditional undefined at x=" +
                              std::to_string(x) + ": positives carry mass but negatives none");
        for (std::size_t m = 0; m < nmp; ++m) {
            if (c.px[x] > 0.0) c.pos_cond[x * nmp + m] = jp.p(x, m) / c.px[x];
            if (pmp[m] > 0.0) c.h1[x * nmp + m] = c.pos_cond[x * nmp + m] / pmp[m];
        }
        for (std::size_t m = 0; m < nmn; ++m) {
            if (pxn[x] > 0.0) c.neg_cond[x * nmn + m] = jn.p(x, m) / pxn[x];
            if (pmn[m] > 0.0) c.h2[x * nmn + m] = c.neg_cond[x * nmn + m] / pmn[m];
        }
    }
    return c;
}

// Per-tuple value log(N * h1 / (h1 + sum of h2 over the N negatives)).
double tuple_value(std::size_t N, double h1, double h2_sum) {
    return std::log(static_cast<double>(N) * h1 / (h1 + h2_sum));
}

InfoNceEstimate estimate_exact(const GapScenario& s, const Conditionals& c, std::size_t N) {
    const std::size_t nx = s.joint_pos.nx();
    const std::size_t nmp = s.joint_pos.nm();
    const std::size_t nmn = s.joint_neg.nm();
    const double lgN1 = std::lgamma(static_cast<double>(N) + 1.0);

    double acc = 0.0;
    std::size_t leaves = 0;
    for (std::size_t x = 0; x < nx; ++x) {
        if (c.px[x] == 0.0) continue;
        // Support of the negative conditional at this x.
        std::vector<double> q, logq, h2;
        for (std::size_t m = 0; m < nmn; ++m) {
            const double v = c.neg_cond[x * nmn + m];
            if (v > 0.0) {
                q.push_back(v);
                logq.push_back(std::log(v));
                h2.push_back(c.h2[x * nmn + m]);
            }
        }
        const std::size_t sup = q.size();
        // Distribute N negative draws over the support; weight each count
        // vector by its multinomial probability.
        std::vector<std::size_t> counts(sup, 0);
        std::function<void(std::size_t, std::size_t, double, double)> walk =
            [&](std::size_t slot, std::size_t left, double logw, double h2_sum) {
                if (slot + 1 == sup) {
                    const double lw = logw + static_cast<double>(left) * logq[slot] -
                                      std::lgamma(static_cast<double>(left) + 1.0);
                    const double hs = h2_sum + static_cast<double>(left) * h2[slot];
                    const double w = std::exp(lgN1 + lw);
                    ++leaves;
                    for (std::size_t e = 0; e < nmp; ++e) {
                        const double pc = c.pos_cond[x * nmp + e];
                        if (pc == 0.0) continue;
                        acc += c.px[x] * pc * w * tuple_value(N, c.h1[x * nmp + e], hs);
                    }
                    return;
                }
                for (std::size_t cnt = 0; cnt <= left; ++cnt) {
                    walk(slot + 1, left - cnt,
                         logw + static_cast<double>(cnt) * logq[slot] -
                             std::lgamma(static_cast<double>(cnt) + 1.0),
                         h2_sum + static_cast<double>(cnt) * h2[slot]);
                }
            };
        walk(0, N, 0.0, 0.0);
    }
    InfoNceEstimate r;
    r.value = acc;
    r.std_error = 0.0;
    r.exact = true;
    r.samples = leaves;
    return r;
}

std::size_t sample_index(const std::vector<double>& w, std::size_t offset, std::size_t count,
                         double total, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, total);
    const double r = u(rng);
    double acc = 0.0;
    std::size_t last = offset;
    for (std::size_t i = 0; i < count; ++i) {
        if (w[offset + i] <= 0.0) continue;
        acc += w[offset + i];
        last = offset + i;
        if (r < acc) return offset + i;
    }
    return last;
}

InfoNceEstimate estimate_mc(const GapScenario& s, const Conditionals& c, std::size_t N,
                            std::size_t num_mc, std::uint64_t seed) {
    const std::size_t nmp = s.joint_pos.nm();
    const std::size_t nmn = s.joint_neg.nm();
    const auto& joint = s.joint_pos.values();
    std::mt19937_64 rng(seed);
    double mean = 0.0, m2 = 0.0;
    for (std::size_t t = 0; t < num_mc; ++t) {
        const std::size_t xe = sample_index(joint, 0, joint.size(), 1.0, rng);
        const std::size_t x = xe / nmp, e = xe % nmp;
        double h2_sum = 0.0;
        for (std::size_t j = 0; j < N; ++j) {
            const std::size_t neg =
                sample_index(c.neg_cond, x * nmn, nmn, 1.0, rng) - x * nmn;
            h2_sum += c.h2[x * nmn + neg];
        }
        const double v = tuple_value(N, c.h1[x * nmp + e], h2_sum);
        const double d = v - mean;
        mean += d / static_cast<double>(t + 1);
        m2 += d * (v - mean);
    }
    InfoNceEstimate r;
    r.value = mean;
    r.std_error = num_mc > 1 ? std::sqrt(m2 / (static_cast<double>(num_mc) - 1.0) /
                                         static_cast<double>(num_mc))
                             : 0.0;
    r.exact = false;
    r.samples = num_mc;
    return r;
}

bool exact_feasible(const GapScenario& s, const Conditionals& c, std::size_t N) {
    const std::size_t nx = s.joint_pos.nx();
    const std::size_t nmn = s.joint_neg.nm();
    if (nx * std::max(s.joint_pos.nm(), nmn) > kExactSupportCap) return false;
    double work = 0.0;
    for (std::size_t x = 0; x < nx; ++x) {
        if (c.px[x] == 0.0) continue;
        std::size_t sup = 0;
        for (std::size_t m = 0; m < nmn; ++m)
            if (c.neg_cond[x * nmn + m] > 0.0) ++sup;
        work += multiset_count(N, sup) * static_cast<double>(sup + s.joint_pos.nm());
        if (work > kExactWorkCap) return false;
    }
    return true;
}

DiscreteJoint joint_from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty() || rows[0].empty()) throw ValidationError("joint needs at least one cell");
    const std::size_t nm = rows[0].size();
    std::vector<double> flat;
    flat.reserve(rows.size() * nm);
    for (const auto& r : rows) {
        if (r.size() != nm) throw ValidationError("joint rows have unequal lengths");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return DiscreteJoint(rows.size(), nm, std::move(flat));
}

}  // namespace

DiscreteJoint::DiscreteJoint(std::size_t nx, std::size_t nm, std::vector<double> probs)
    : nx_(nx), nm_(nm), p_(std::move(probs)) {
    if (nx_ == 0 || nm_ == 0) throw ValidationError("joint dimensions must be positive");
    if (p_.size() != nx_ * nm_)
        throw ValidationError("joint needs " + std::to_string(nx_ * nm_) + " entries, got " +
                              std::to_string(p_.size()));
    double total = 0.0;
    for (double v : p_) {
        if (!(v >= 0.0)) throw ValidationError("joint entries must be nonnegative finite");
        total += v;
    }
    if (std::fabs(total - 1.0) > kMassTol)
        throw ValidationError("joint mass is " + fmt(total) + ", must be 1 within 1e-12");
}

std::vector<double> DiscreteJoint::x_marginal() const {
    std::vector<double> out(nx_, 0.0);
    for (std::size_t x = 0; x < nx_; ++x)
        for (std::size_t m = 0; m < nm_; ++m) out[x] += p(x, m);
    return out;
}

std::vector<double> DiscreteJoint::m_marginal() const {
    std::vector<double> out(nm_, 0.0);
    for (std::size_t x = 0; x < nx_; ++x)
        for (std::size_t m = 0; m < nm_; ++m) out[m] += p(x, m);
    return out;
}

void validate_gap_scenario(const GapScenario& s) {
    if (s.joint_pos.nx() == 0 || s.joint_neg.nx() == 0)
        throw ValidationError("gap scenario has an empty joint");
    if (s.joint_pos.nx() != s.joint_neg.nx())
        throw DomainError("joints disagree on |X|: " + std::to_string(s.joint_pos.nx()) +
                          " vs " + std::to_string(s.joint_neg.nx()));
    auto mp = s.joint_pos.x_marginal();
    auto mn = s.joint_neg.x_marginal();
    for (std::size_t x = 0; x < mp.size(); ++x)
        if (std::fabs(mp[x] - mn[x]) > kMarginalTol)
            throw DomainError("x-marginals diverge at x=" + std::to_string(x) + ": " +
                              fmt(mp[x]) + " vs " + fmt(mn[x]));
}

double mutual_information(const DiscreteJoint& joint) {
    if (joint.nx() == 0) throw ValidationError("mutual information of an empty joint");
    auto px = joint.x_marginal();
    auto pm = joint.m_marginal();
    double mi = 0.0;
    for (std::size_t x = 0; x < joint.nx(); ++x)
        for (std::size_t m = 0; m < joint.nm(); ++m) {
            const double p = joint.p(x, m);
            if (p > 0.0) mi += p * std::log(p / (px[x] * pm[m]));
        }
    if (mi < 0.0 && mi > -kMassTol) mi = 0.0;
    return mi;
}

double mi_gap(const GapScenario& s) {
    validate_gap_scenario(s);
    return mutual_information(s.joint_pos) - mutual_information(s.joint_neg);
}

InfoNceEstimate infonce_estimate(const GapScenario& s, std::size_t N, std::size_t num_mc,
                                 std::uint64_t seed, EstimateMode mode) {
    if (N < 1) throw ContractError("N must be at least 1");
    if (num_mc < 1) throw ContractError("num_mc must be at least 1");
    auto c = prepare(s);
    const bool feasible = exact_feasible(s, c, N);
    if (mode == EstimateMode::kExact && !feasible)
        throw ContractError("exact enumeration infeasible for this scenario/N");
    if (mode != EstimateMode::kMonteCarlo && feasible) return estimate_exact(s, c, N);
    return estimate_mc(s, c, N, num_mc, seed);
}

std::vector<BoundRow> bound_report(const std::vector<GapScenario>& scenarios,
                                   const std::vector<std::size_t>& Ns, std::size_t num_mc,
                                   std::uint64_t seed) {
    std::vector<BoundRow> rows;
    rows.reserve(scenarios.size() * Ns.size());
    for (std::size_t i = 0; i < scenarios.size(); ++i) {
        const double delta = mi_gap(scenarios[i]);
        for (std::size_t N : Ns) {
            const std::uint64_t cell_seed =
                seed + 1000003ULL * static_cast<std::uint64_t>(i) + static_cast<std::uint64_t>(N);
            auto est = infonce_estimate(scenarios[i], N, num_mc, cell_seed);
            BoundRow r;
            r.scenario_id = i;
            r.N = N;
            r.delta_I = delta;
            r.estimate = est.value;
            r.slack = delta - est.value;
            r.std_error = est.std_error;
            r.exact = est.exact;
            rows.push_back(r);
        }
    }
    return rows;
}

std::string bound_report_csv(const std::vector<BoundRow>& rows) {
    std::ostringstream os;
    os << "scenario_id,N,delta_I,estimate,slack,stderr\n";
    for (const auto& r : rows)
        os << r.scenario_id << "," << r.N << "," << fmt(r.delta_I) << "," << fmt(r.estimate)
           << "," << fmt(r.slack) << "," << fmt(r.std_error) << "\n";
    return os.str();
}

GapScenario make_deterministic_vs_independent(std::size_t m) {
    if (m < 2) throw ValidationError("deterministic scenario needs m >= 2");
    const double u = 1.0 / static_cast<double>(m);
    std::vector<double> pos(m * m, 0.0), neg(m * m, u * u);
    for (std::size_t i = 0; i < m; ++i) pos[i * m + i] = u;
    GapScenario s{DiscreteJoint(m, m, std::move(pos)), DiscreteJoint(m, m, std::move(neg))};
    return s;
}

GapScenario make_independent_pair(std::size_t nx, std::size_t nm) {
    if (nx < 1 || nm < 2) throw ValidationError("independent pair needs nx >= 1, nm >= 2");
    std::vector<double> px(nx), pm_pos(nm), pm_neg(nm);
    for (std::size_t i = 0; i < nx; ++i) px[i] = static_cast<double>(i + 1);
    for (std::size_t j = 0; j < nm; ++j) {
        pm_pos[j] = static_cast<double>(j + 1);
        pm_neg[j] = static_cast<double>(nm - j);
    }
    const double zx = nx * (nx + 1) / 2.0, zm = nm * (nm + 1) / 2.0;
    std::vector<double> pos(nx * nm), neg(nx * nm);
    for (std::size_t x = 0; x < nx; ++x)
        for (std::size_t j = 0; j < nm; ++j) {
            pos[x * nm + j] = (px[x] / zx) * (pm_pos[j] / zm);
            neg[x * nm + j] = (px[x] / zx) * (pm_neg[j] / zm);
        }
    return {DiscreteJoint(nx, nm, std::move(pos)), DiscreteJoint(nx, nm, std::move(neg))};
}

GapScenario make_random_scenario(std::size_t nx, std::size_t nm_pos, std::size_t nm_neg,
                                 std::mt19937_64& rng) {
    if (nx < 1 || nm_pos < 1 || nm_neg < 1)
        throw ValidationError("scenario dimensions must be positive");
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::uniform_int_distribution<int> sharp(1, 3);
    const int power = sharp(rng);
    std::vector<double> px(nx);
    double zx = 0.0;
    for (auto& v : px) zx += (v = u(rng));
    for (auto& v : px) v /= zx;

    auto random_cond = [&](std::size_t nm) {
        std::vector<double> c(nm);
        for (auto& v : c) {
            v = u(rng);
            for (int p = 1; p < power; ++p) v *= v;
            v += 1e-3;  // keep every conditional strictly positive
        }
        double z = 0.0;
        for (double v : c) z += v;
        for (auto& v : c) v /= z;
        return c;
    };

    std::vector<double> pos(nx * nm_pos), neg(nx * nm_neg);
    for (std::size_t x = 0; x < nx; ++x) {
        auto cp = random_cond(nm_pos);
        auto cn = random_cond(nm_neg);
        for (std::size_t m = 0; m < nm_pos; ++m) pos[x * nm_pos + m] = px[x] * cp[m];
        for (std::size_t m = 0; m < nm_neg; ++m) neg[x * nm_neg + m] = px[x] * cn[m];
    }
    // Renormalize exactly once against accumulated rounding.
    double zp = 0.0, zn = 0.0;
    for (double v : pos) zp += v;
    for (double v : neg) zn += v;
    for (auto& v : pos) v /= zp;
    for (auto& v : neg) v /= zn;
    return {DiscreteJoint(nx, nm_pos, std::move(pos)), DiscreteJoint(nx, nm_neg, std::move(neg))};
}

std::vector<GapScenario> builtin_scenarios() {
    std::vector<GapScenario> out;
    out.push_back(make_deterministic_vs_independent(4));
    out.push_back(make_deterministic_vs_independent(8));
    out.push_back(make_independent_pair(4, 4));
    out.push_back(make_independent_pair(6, 3));
    std::mt19937_64 rng(20240817);
    out.push_back(make_random_scenario(3, 4, 2, rng));
    out.push_back(make_random_scenario(4, 2, 2, rng));
    out.push_back(make_random_scenario(5, 3, 3, rng));
    out.push_back(make_random_scenario(6, 4, 4, rng));
    out.push_back(make_random_scenario(8, 4, 4, rng));
    out.push_back(make_random_scenario(10, 6, 6, rng));
    out.push_back(make_random_scenario(12, 8, 8, rng));
    out.push_back(make_random_scenario(16, 8, 8, rng));
    return out;
}

std::vector<GapScenario> load_scenarios(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open scenario file " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": JSON parse failure: " + e.what());
    }
    if (!doc.contains("scenarios") || !doc["scenarios"].is_array())
        throw ValidationError(path + ": expected a top-level \"scenarios\" array");
    std::vector<GapScenario> out;
    for (const auto& item : doc["scenarios"]) {
        if (!item.contains("joint_pos") || !item.contains("joint_neg"))
            throw ValidationError(path + ": scenario needs joint_pos and joint_neg");
        auto rows = [&](const nlohmann::json& j) {
            std::vector<std::vector<double>> r;
            for (const auto& row : j) r.push_back(row.get<std::vector<double>>());
            return r;
        };
        GapScenario s{joint_from_rows(rows(item["joint_pos"])),
                      joint_from_rows(rows(item["joint_neg"]))};
        validate_gap_scenario(s);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace comoe
