#include "dti/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dti::eval {

std::vector<int> hungarian(const std::vector<std::vector<double>>& score) {
    int n = static_cast<int>(score.size());
    const double kInf = 1e18;
    // potentials-based O(n^3) assignment on cost = -score
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, kInf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            int i0 = p[j0], j1 = 0;
            double delta = kInf;
            for (int j = 1; j <= n; ++j)
                if (!used[j]) {
                    double cur = -score[i0 - 1][j - 1] - u[i0] - v[j];
                    if (cur < minv[j]) {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if (minv[j] < delta) {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            for (int j = 0; j <= n; ++j)
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> match(n, -1);
    for (int j = 1; j <= n; ++j)
        if (p[j]) match[p[j] - 1] = j - 1;
    return match;
}

double accuracy(const std::vector<int>& assignments, const std::vector<int>& labels, int K) {
    if (assignments.size() != labels.size())
        throw std::invalid_argument("accuracy: assignment/label length mismatch");
    int n = static_cast<int>(assignments.size());
    int dim = K;
    for (int l : labels) dim = std::max(dim, l + 1);
    for (int a : assignments) dim = std::max(dim, a + 1);
    std::vector<std::vector<double>> cont(dim, std::vector<double>(dim, 0.0));
    for (int i = 0; i < n; ++i) cont[assignments[i]][labels[i]] += 1.0;
    auto match = hungarian(cont);
    double hits = 0.0;
    for (int k = 0; k < dim; ++k)
        if (match[k] >= 0) hits += cont[k][match[k]];
    return hits / n;
}

double nmi(const std::vector<int>& assignments, const std::vector<int>& labels) {
    if (assignments.size() != labels.size())
        throw std::invalid_argument("nmi: assignment/label length mismatch");
    int n = static_cast<int>(assignments.size());
    int ka = 1 + *std::max_element(assignments.begin(), assignments.end());
    int kl = 1 + *std::max_element(labels.begin(), labels.end());
    std::vector<double> pa(ka, 0.0), pl(kl, 0.0);
    std::vector<std::vector<double>> pj(ka, std::vector<double>(kl, 0.0));
    for (int i = 0; i < n; ++i) {
        pa[assignments[i]] += 1.0 / n;
        pl[labels[i]] += 1.0 / n;
        pj[assignments[i]][labels[i]] += 1.0 / n;
    }
    double ha = 0.0, hl = 0.0, mi = 0.0;
    for (double p : pa)
        if (p > 0) ha -= p * std::log(p);
    for (double p : pl)
        if (p > 0) hl -= p * std::log(p);
    for (int a = 0; a < ka; ++a)
        for (int l = 0; l < kl; ++l)
            if (pj[a][l] > 0) mi += pj[a][l] * std::log(pj[a][l] / (pa[a] * pl[l]));
    double denom = std::sqrt(ha * hl);
    return denom > 0 ? mi / denom : 0.0;  // single-cluster degenerate
}

Stats aggregate(const std::vector<RunRecord>& runs) {
    if (runs.empty()) throw std::invalid_argument("aggregate: no runs");
    std::vector<double> accs;
    for (const auto& r : runs) accs.push_back(r.acc);
    double avg = 0.0;
    for (double a : accs) avg += a;
    avg /= accs.size();
    double var = 0.0;
    for (double a : accs) var += (a - avg) * (a - avg);
    double sd = accs.size() > 1 ? std::sqrt(var / accs.size()) : 0.0;
    std::vector<double> sorted = accs;
    std::sort(sorted.begin(), sorted.end());
    double median = sorted.size() % 2 ? sorted[sorted.size() / 2]
                                      : 0.5 * (sorted[sorted.size() / 2 - 1] +
                                               sorted[sorted.size() / 2]);
    int best = 0;
    for (size_t i = 1; i < runs.size(); ++i)
        if (runs[i].final_loss < runs[best].final_loss) best = static_cast<int>(i);
    return {avg, sd, sorted.front(), median, sorted.back(), runs[best].acc, best};
}

}  // namespace dti::eval
