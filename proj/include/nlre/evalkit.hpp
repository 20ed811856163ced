#pragma once
// Evaluation: test accuracy, selection-quality metrics against the ground
// truth flip mask, noise-rate error, and per-epoch CSV records.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nlre/select.hpp"

namespace nlre {

struct SelectionMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double clean_ratio = 0.0;
    bool degenerate = false;  // empty positive-prediction set
};

struct EpochRecord {
    std::size_t epoch = 0;
    double test_accuracy = 0.0;
    double eps_hat = 0.0;
    double implied_flip_rate = 0.0;
    SelectionMetrics selection;
    double mean_elbo = 0.0;
    double mean_constraint = 0.0;
};

inline double test_accuracy(const MlpParams& clean, const CleanDataset& test) {
    if (test.n == 0) throw std::invalid_argument("test_accuracy: empty test set");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test.n; ++i) {
        Vec p = clean_prob(clean, test.x(i));
        std::size_t arg = 0;
        for (std::size_t cc = 1; cc < test.c; ++cc)
            if (p[cc] > p[arg]) arg = cc;
        hits += arg == test.labels[i];
    }
    return static_cast<double>(hits) / static_cast<double>(test.n);
}

// Positive class = selected clean AND truly unflipped.
inline SelectionMetrics selection_metrics(const SelectionSplit& split,
                                          const std::vector<bool>& flip_mask) {
    std::size_t n = flip_mask.size();
    std::size_t tp = 0;
    for (std::size_t i : split.clean) tp += !flip_mask[i];
    std::size_t actual_clean = 0;
    for (std::size_t i = 0; i < n; ++i) actual_clean += !flip_mask[i];
    SelectionMetrics m;
    m.clean_ratio = static_cast<double>(split.clean.size()) / static_cast<double>(n);
    if (split.clean.empty()) {
        m.degenerate = true;
        m.precision = 0.0;
    } else {
        m.precision = static_cast<double>(tp) / static_cast<double>(split.clean.size());
    }
    m.recall = actual_clean == 0 ? 0.0
                                 : static_cast<double>(tp) / static_cast<double>(actual_clean);
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

// Signed error eps_hat - realized rate.
inline double noise_rate_error(double eps_hat, double realized_rate) {
    return eps_hat - realized_rate;
}

// eps * E[1 - softmax(f_y^(x,y))[y]] under the model's own posterior; the
// mislabel probability the mixture actually implies.
inline double model_implied_flip_rate(const GraphicalModel& m, const NoisyDataset& ds) {
    double eps = m.eps();
    double acc = 0.0;
    for (std::size_t i = 0; i < ds.n; ++i) {
        auto x = ds.x(i);
        Vec post = exact_posterior(m.clean, m.noisy, eps, x, ds.noisy_labels[i]);
        for (std::size_t cc = 0; cc < m.c; ++cc) {
            Vec s = softmax(mlp_forward(m.noisy, concat(x, one_hot(m.c, cc))));
            acc += post[cc] * eps * (1.0 - s[cc]);
        }
    }
    return acc / static_cast<double>(ds.n);
}

inline std::string format_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline constexpr const char* kRecordsCsvHeader =
    "epoch,test_acc,eps_hat,implied_flip_rate,sel_precision,sel_recall,sel_f1,clean_ratio,"
    "mean_elbo,mean_constraint,degenerate_flags";

inline std::string records_to_csv(const std::vector<EpochRecord>& records) {
    std::ostringstream out;
    out << kRecordsCsvHeader << "\n";
    for (const auto& r : records) {
        out << r.epoch << ',' << format_g17(r.test_accuracy) << ',' << format_g17(r.eps_hat) << ','
            << format_g17(r.implied_flip_rate) << ',' << format_g17(r.selection.precision) << ','
            << format_g17(r.selection.recall) << ',' << format_g17(r.selection.f1) << ','
            << format_g17(r.selection.clean_ratio) << ',' << format_g17(r.mean_elbo) << ','
            << format_g17(r.mean_constraint) << ',' << (r.selection.degenerate ? "P" : "") << "\n";
    }
    return out.str();
}

inline void write_records(const std::vector<EpochRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_records: cannot open " + path);
    out << records_to_csv(records);
    if (!out) throw std::runtime_error("write_records: write failed for " + path);
}

// Split dump for debugging: index,score,is_clean[,true_flip]
inline void write_split_csv(const CriterionScores& scores, const SelectionSplit& split,
                            const std::vector<bool>* flip_mask, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_split_csv: cannot open " + path);
    out << (flip_mask ? "index,score,is_clean,true_flip" : "index,score,is_clean") << "\n";
    std::vector<bool> is_clean(scores.scores.size(), false);
    for (std::size_t i : split.clean) is_clean[i] = true;
    for (std::size_t i = 0; i < scores.scores.size(); ++i) {
        out << i << ',' << format_g17(scores.scores[i]) << ',' << (is_clean[i] ? 1 : 0);
        if (flip_mask) out << ',' << ((*flip_mask)[i] ? 1 : 0);
        out << "\n";
    }
}

}  // namespace nlre
