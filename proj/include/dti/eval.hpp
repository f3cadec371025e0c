#pragma once

#include <string>
#include <vector>

#include "dti/tensor.hpp"

namespace dti::eval {

// Clustering accuracy: best one-to-one cluster-to-class matching over a
// KxK contingency table (Hungarian algorithm, O(K^3)).
double accuracy(const std::vector<int>& assignments, const std::vector<int>& labels, int K);

// I(A;L) / sqrt(H(A) H(L)), natural logs; 0/0 -> 0.
double nmi(const std::vector<int>& assignments, const std::vector<int>& labels);

struct RunRecord {
    std::string run_dir;
    double final_loss = 0.0;
    double acc = -1.0;  // negative when unlabeled
    double nmi = -1.0;
    double wall_seconds = 0.0;
    uint64_t seed = 0;
};

struct Stats {
    double avg, std_dev, min, median, max;
    double min_loss_acc;  // metric of the lowest-final-loss run
    int min_loss_index;
};

// Multi-run statistics over accuracy; minLoss picks the run with the
// smallest final full-dataset loss (ties to the earliest run).
Stats aggregate(const std::vector<RunRecord>& runs);

// Max-weight assignment on an NxN score matrix; returns column for each row.
std::vector<int> hungarian(const std::vector<std::vector<double>>& score);

}  // namespace dti::eval
