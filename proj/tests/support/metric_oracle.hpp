#pragma once

// Brute-force rank-metric oracles, independent of the eval module.

#include <algorithm>
#include <functional>
#include <vector>

namespace periloom::testing {

/// O(n^2) pairwise Mann-Whitney count; ties count one half.
inline double pairwise_auroc(const std::vector<double>& s, const std::vector<int>& y) {
    double num = 0, pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[i] != 1 || y[j] != 0) continue;
            pairs += 1;
            if (s[i] > s[j]) num += 1;
            else if (s[i] == s[j]) num += 0.5;
        }
    return num / pairs;
}

/// Precision/recall at every distinct threshold by direct counting.
inline double enumerated_ap(const std::vector<double>& s, const std::vector<int>& y) {
    std::vector<double> thresholds(s.begin(), s.end());
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    double total_pos = 0;
    for (int v : y) total_pos += v;
    double ap = 0, prev = 0;
    for (double t : thresholds) {
        double tp = 0, fp = 0;
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s[i] >= t) (y[i] ? tp : fp) += 1;
        const double r = tp / total_pos;
        ap += (r - prev) * (tp / (tp + fp));
        prev = r;
    }
    return ap;
}

/// Calls f(scores, labels) for every multiset of n <= max_n (score, label)
/// pairs over `grid` x {0, 1}, presented in ascending order. Returns the
/// number of multisets visited.
template <class F>
std::size_t for_each_multiset(const std::vector<double>& grid, int max_n, F&& f) {
    const int kinds_n = static_cast<int>(grid.size()) * 2;
    const int g = static_cast<int>(grid.size());
    std::size_t visited = 0;
    for (int n = 1; n <= max_n; ++n) {
        std::vector<int> kinds(static_cast<std::size_t>(n), 0);  // nondecreasing in [0, kinds_n)
        while (true) {
            std::vector<double> s;
            std::vector<int> y;
            for (int k : kinds) {
                s.push_back(grid[static_cast<std::size_t>(k % g)]);
                y.push_back(k / g);
            }
            f(s, y);
            ++visited;
            int i = n - 1;
            while (i >= 0 && kinds[static_cast<std::size_t>(i)] == kinds_n - 1) --i;
            if (i < 0) break;
            const int v = kinds[static_cast<std::size_t>(i)] + 1;
            for (int j = i; j < n; ++j) kinds[static_cast<std::size_t>(j)] = v;
        }
    }
    return visited;
}

}  // namespace periloom::testing
