#pragma once

// Slow, direct re-implementations used as references by the unit tests and
// the acceptance run.

#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "omtl/rng.hpp"

namespace omtl::oracle {

/// Scalar Adam on f(w) = w^2, written out step by step.
inline std::vector<double> adam_on_square(double w, int steps, double lr = 0.001, double b1 = 0.9, double b2 = 0.999,
                                          double eps = 1e-8) {
    double m = 0, v = 0;
    std::vector<double> path;
    for (int t = 1; t <= steps; ++t) {
        const double g = 2 * w;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t));
        const double vh = v / (1 - std::pow(b2, t));
        w = w - lr * mh / (std::sqrt(vh) + eps);
        path.push_back(w);
    }
    return path;
}

/// AUC by counting every (positive, negative) pair; ties count one half.
inline double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (y[i] != 1) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j] != 0) continue;
            pairs += 1.0;
            wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    }
    return wins / pairs;
}

/// Average precision by enumerating each distinct score as a threshold and
/// recounting precision and recall from scratch.
inline double threshold_sweep_ap(const std::vector<double>& s, const std::vector<int>& y) {
    std::set<double, std::greater<>> thresholds(s.begin(), s.end());
    double total_pos = 0.0;
    for (int v : y) total_pos += v;
    double ap = 0.0, prev_recall = 0.0;
    for (double t : thresholds) {
        double tp = 0.0, selected = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] >= t) {
                selected += 1.0;
                tp += y[i];
            }
        }
        const double recall = tp / total_pos;
        ap += (recall - prev_recall) * (tp / selected);
        prev_recall = recall;
    }
    return ap;
}

/// Two-sided paired permutation test of AUC(a) - AUC(b): under the null the
/// two models' scores are exchangeable within each record.
inline double permutation_p(const std::vector<double>& a, const std::vector<double>& b, const std::vector<int>& y,
                            int resamples, std::uint64_t seed) {
    const double observed = std::abs(pairwise_auc(a, y) - pairwise_auc(b, y));
    Rng rng(seed);
    std::vector<double> pa(a.size()), pb(b.size());
    int extreme = 0;
    for (int r = 0; r < resamples; ++r) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            const bool swap = rng.bernoulli(0.5);
            pa[i] = swap ? b[i] : a[i];
            pb[i] = swap ? a[i] : b[i];
        }
        if (std::abs(pairwise_auc(pa, y) - pairwise_auc(pb, y)) >= observed - 1e-12) ++extreme;
    }
    return static_cast<double>(extreme) / resamples;
}

}  // namespace omtl::oracle
