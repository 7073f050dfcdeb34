#include "dsm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dsm::metrics {

namespace {

void check_scores(const std::vector<double>& scores, const std::vector<uint8_t>& labels,
                  const char* name) {
    if (scores.size() != labels.size() || scores.empty()) {
        throw ContractError(std::string(name) + ": scores and labels must be equal-length");
    }
    size_t pos = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] > 1) throw ContractError(std::string(name) + ": labels must be 0/1");
        if (!std::isfinite(scores[i])) {
            throw ContractError(std::string(name) + ": non-finite score");
        }
        pos += labels[i];
    }
    if (pos == 0 || pos == labels.size()) {
        throw DataError(std::string(name) + ": needs both positive and negative samples");
    }
}

} // namespace

double dsc(const Tensor& pred, const Tensor& truth) {
    if (!pred.defined() || !truth.defined() || pred.shape() != truth.shape()) {
        throw ContractError("dsc: masks must share a shape");
    }
    double inter = 0, np = 0, nt = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        double p = pred.at(i), t = truth.at(i);
        if ((p != 0.0 && p != 1.0) || (t != 0.0 && t != 1.0)) {
            throw ContractError("dsc: masks must be binary");
        }
        inter += p * t;
        np += p;
        nt += t;
    }
    if (np + nt == 0) return 1.0;
    return 2.0 * inter / (np + nt);
}

double auroc(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
    check_scores(scores, labels, "auroc");
    size_t n = scores.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    // average ranks across tie groups, then the rank-sum statistic
    std::vector<double> rank(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double rank_pos = 0;
    size_t n_pos = 0;
    for (size_t k = 0; k < n; ++k) {
        if (labels[k]) {
            rank_pos += rank[k];
            ++n_pos;
        }
    }
    size_t n_neg = n - n_pos;
    double u = rank_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double fpr_at_tpr(const std::vector<double>& scores, const std::vector<uint8_t>& labels,
                  double tpr_target) {
    check_scores(scores, labels, "fpr_at_tpr");
    if (!(tpr_target > 0.0 && tpr_target <= 1.0)) {
        throw ContractError("fpr_at_tpr: target must lie in (0,1]");
    }
    size_t n = scores.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] > scores[b]; });
    double n_pos = 0, n_neg = 0;
    for (uint8_t l : labels) (l ? n_pos : n_neg) += 1.0;
    double best = 1.0; // threshold at min score always reaches TPR 1
    double tp = 0, fp = 0;
    size_t i = 0;
    while (i < n) {
        // consume the whole tie group: the threshold sits at this score
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] ? tp : fp) += 1.0;
            ++j;
        }
        if (tp / n_pos >= tpr_target) best = std::min(best, fp / n_neg);
        i = j;
    }
    return best;
}

} // namespace dsm::metrics
