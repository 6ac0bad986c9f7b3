#pragma once

// Classification metrics: accuracy, macro-F1, one-vs-rest macro-AUROC by the
// rank statistic, confusion matrix, per-class precision and recall.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "errors.hpp"

namespace seegraph::metrics {

/// AUROC of `scores` for the positive set: the fraction of (positive,
/// negative) pairs ordered correctly, ties counted as 1/2. Computed through
/// midranks in O(n log n). Undefined (no positives or no negatives) -> 0.5.
inline double auroc(const std::vector<double>& scores, const std::vector<bool>& positive) {
    if (scores.size() != positive.size()) throw ShapeError("auroc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    std::size_t pos = 0;
    for (std::size_t start = 0; start < n;) {
        std::size_t end = start;
        while (end < n && scores[order[end]] == scores[order[start]]) ++end;
        const double midrank = 0.5 * static_cast<double>(start + 1 + end);
        for (std::size_t k = start; k < end; ++k)
            if (positive[order[k]]) {
                rank_sum += midrank;
                ++pos;
            }
        start = end;
    }
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) return 0.5;
    const double p = static_cast<double>(pos), q = static_cast<double>(neg);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

struct Report {
    std::size_t classes = 0;
    std::size_t count = 0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double macro_auroc = 0.0;
    std::vector<double> precision;  // per class
    std::vector<double> recall;
    std::vector<double> f1;
    std::vector<double> class_auroc;
    std::vector<std::vector<std::size_t>> confusion;  // [truth][predicted]
};

/// `probabilities[k]` is the class distribution predicted for sample k; the
/// prediction is its argmax (lowest index on ties).
inline Report evaluate(const std::vector<std::size_t>& truth, const std::vector<std::vector<double>>& probabilities,
                       std::size_t classes) {
    if (truth.empty()) throw ValidationError("cannot score an empty split");
    if (truth.size() != probabilities.size()) throw ShapeError("metrics: truth and predictions differ in length");
    if (classes < 2) throw ValidationError("metrics need at least 2 classes");
    Report r;
    r.classes = classes;
    r.count = truth.size();
    r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
    std::size_t correct = 0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        const auto& p = probabilities[k];
        if (p.size() != classes) throw ShapeError("metrics: probability vector has wrong length");
        if (truth[k] >= classes) throw ValidationError("metrics: label out of range");
        const auto pred = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        ++r.confusion[truth[k]][pred];
        if (pred == truth[k]) ++correct;
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());

    for (std::size_t c = 0; c < classes; ++c) {
        std::size_t tp = r.confusion[c][c], predicted = 0, actual = 0;
        for (std::size_t o = 0; o < classes; ++o) {
            predicted += r.confusion[o][c];
            actual += r.confusion[c][o];
        }
        const double prec = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
        const double rec = actual ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
        r.precision.push_back(prec);
        r.recall.push_back(rec);
        r.f1.push_back(prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0);

        std::vector<double> scores;
        std::vector<bool> positive;
        for (std::size_t k = 0; k < truth.size(); ++k) {
            scores.push_back(probabilities[k][c]);
            positive.push_back(truth[k] == c);
        }
        r.class_auroc.push_back(auroc(scores, positive));
    }
    r.macro_f1 = std::accumulate(r.f1.begin(), r.f1.end(), 0.0) / static_cast<double>(classes);
    r.macro_auroc = std::accumulate(r.class_auroc.begin(), r.class_auroc.end(), 0.0) / static_cast<double>(classes);
    return r;
}

}  // namespace seegraph::metrics
