#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "omtl/errors.hpp"

namespace omtl {

/// Scores and 0/1 labels aligned by index for one (node, outcome) stratum.
struct ScoredSet {
    std::vector<double> scores;
    std::vector<int> labels;
    std::string node;
    std::string outcome;

    std::string name() const { return node.empty() ? std::string("scores") : node + "/" + outcome; }
    std::size_t positives() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }
    std::size_t negatives() const { return labels.size() - positives(); }

    void check() const {
        if (scores.size() != labels.size()) throw ValidationError(name() + ": scores and labels differ in length");
        for (int y : labels) {
            if (y != 0 && y != 1) throw ValidationError(name() + ": labels must be 0 or 1");
        }
        for (double s : scores) {
            if (!std::isfinite(s)) throw ValidationError(name() + ": non-finite score");
        }
    }
    void require_both_classes() const {
        check();
        if (positives() == 0 || negatives() == 0) {
            throw ValidationError(name() + ": needs at least one positive and one negative");
        }
    }
};

/// 1-based midranks; tied values share the mean of their ranks.
inline std::vector<double> midranks(const std::vector<double>& x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> rank(x.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && x[idx[j]] == x[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) rank[idx[k]] = r;
        i = j;
    }
    return rank;
}

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
inline double auc_roc(const ScoredSet& s) {
    s.require_both_classes();
    const auto rank = midranks(s.scores);
    const double p = static_cast<double>(s.positives());
    const double n = static_cast<double>(s.negatives());
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < rank.size(); ++i) {
        if (s.labels[i] == 1) rank_sum += rank[i];
    }
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

/// Step-wise average precision over descending distinct thresholds.
inline double average_precision(const ScoredSet& s) {
    s.check();
    const double total_pos = static_cast<double>(s.positives());
    if (total_pos == 0) throw ValidationError(s.name() + ": average precision needs at least one positive");
    std::vector<std::size_t> idx(s.scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
    double tp = 0.0, fp = 0.0, prev_recall = 0.0, ap = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && s.scores[idx[j]] == s.scores[idx[i]]) {
            (s.labels[idx[j]] == 1 ? tp : fp) += 1.0;
            ++j;
        }
        const double recall = tp / total_pos;
        ap += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
        i = j;
    }
    return ap;
}

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

/// ROC points from (0,0) to (1,1), one per distinct threshold.
inline std::vector<RocPoint> roc_curve(const ScoredSet& s) {
    s.require_both_classes();
    std::vector<std::size_t> idx(s.scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
    const double p = static_cast<double>(s.positives());
    const double n = static_cast<double>(s.negatives());
    std::vector<RocPoint> pts{{0.0, 0.0}};
    double tp = 0.0, fp = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && s.scores[idx[j]] == s.scores[idx[i]]) {
            (s.labels[idx[j]] == 1 ? tp : fp) += 1.0;
            ++j;
        }
        pts.push_back({fp / n, tp / p});
        i = j;
    }
    return pts;
}

struct DeLongResult {
    double auc_a = 0.0;
    double auc_b = 0.0;
    double delta = 0.0;     // auc_a - auc_b
    double variance = 0.0;  // of delta
    double z = 0.0;
    double p_value = 1.0;
    bool significant = false;  // p < 0.05
};

/// Two-sided p-value of a standard normal statistic.
inline double normal_two_sided_p(double z) {
    if (std::isinf(z)) return 0.0;
    return std::erfc(std::abs(z) / std::sqrt(2.0));
}

/// DeLong test for two correlated AUCs on the same records, using the
/// midrank formulation of the structural components.
///
/// Zero variance with zero difference gives p = 1. With fewer than two
/// positives (or negatives) the corresponding covariance term is zero.
inline DeLongResult delong_test(const ScoredSet& a, const ScoredSet& b) {
    a.require_both_classes();
    b.require_both_classes();
    if (a.labels != b.labels) throw ValidationError("delong: the two score sets cover different records");
    const std::size_t total = a.labels.size();
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < total; ++i) (a.labels[i] == 1 ? pos : neg).push_back(i);
    const double m = static_cast<double>(pos.size());
    const double n = static_cast<double>(neg.size());

    struct Components {
        double auc;
        std::vector<double> v10;  // per positive
        std::vector<double> v01;  // per negative
    };
    auto components = [&](const std::vector<double>& scores) {
        std::vector<double> xs, ys;
        for (std::size_t i : pos) xs.push_back(scores[i]);
        for (std::size_t i : neg) ys.push_back(scores[i]);
        const auto tz = midranks(scores);
        const auto tx = midranks(xs);
        const auto ty = midranks(ys);
        Components c;
        c.auc = 0.0;
        for (std::size_t k = 0; k < pos.size(); ++k) {
            c.v10.push_back((tz[pos[k]] - tx[k]) / n);
            c.auc += tz[pos[k]];
        }
        c.auc = (c.auc - m * (m + 1.0) / 2.0) / (m * n);
        for (std::size_t k = 0; k < neg.size(); ++k) c.v01.push_back(1.0 - (tz[neg[k]] - ty[k]) / m);
        return c;
    };
    const Components ca = components(a.scores);
    const Components cb = components(b.scores);

    auto cov = [](const std::vector<double>& u, const std::vector<double>& v) {
        if (u.size() < 2) return 0.0;
        const double mu = std::accumulate(u.begin(), u.end(), 0.0) / static_cast<double>(u.size());
        const double mv = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double s = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) s += (u[i] - mu) * (v[i] - mv);
        return s / static_cast<double>(u.size() - 1);
    };
    const double s10 = cov(ca.v10, ca.v10) + cov(cb.v10, cb.v10) - 2.0 * cov(ca.v10, cb.v10);
    const double s01 = cov(ca.v01, ca.v01) + cov(cb.v01, cb.v01) - 2.0 * cov(ca.v01, cb.v01);

    DeLongResult r;
    r.auc_a = ca.auc;
    r.auc_b = cb.auc;
    r.delta = ca.auc - cb.auc;
    r.variance = std::max(0.0, s10 / m + s01 / n);
    if (r.delta == 0.0) {
        r.z = 0.0;
        r.p_value = 1.0;
    } else if (r.variance <= 0.0) {
        r.z = r.delta > 0 ? INFINITY : -INFINITY;
        r.p_value = 0.0;
    } else {
        r.z = r.delta / std::sqrt(r.variance);
        r.p_value = normal_two_sided_p(r.z);
    }
    r.significant = r.p_value < 0.05;
    return r;
}

}  // namespace omtl
