#include "amdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace amdiff {

namespace {

double stddev_normal_sf(double z) {
    // Upper tail of the standard normal.
    return 0.5 * std::erfc(z / std::sqrt(2.0));
}

double nrmse_impl(const Volume3D& pred, const Volume3D& ref, const Volume3D* mask) {
    require_same_geometry(pred, ref, "nrmse");
    if (mask) require_same_geometry(pred, *mask, "nrmse mask");
    double sum_sq = 0.0;
    double lo = 0.0, hi = 0.0;
    long long count = 0;
    for (size_t i = 0; i < ref.data.size(); ++i) {
        if (mask && mask->data[i] < 0.5f) continue;
        const double r = ref.data[i];
        const double d = static_cast<double>(pred.data[i]) - r;
        sum_sq += d * d;
        if (count == 0) {
            lo = hi = r;
        } else {
            lo = std::min(lo, r);
            hi = std::max(hi, r);
        }
        ++count;
    }
    if (count < 2) throw DataError("nrmse: region must contain at least 2 voxels");
    const double range = hi - lo;
    if (range <= 0.0)
        throw NumericError("nrmse undefined: reference range is zero over the evaluated region");
    return std::sqrt(sum_sq / static_cast<double>(count)) / range;
}

}  // namespace

double nrmse(const Volume3D& pred, const Volume3D& ref) { return nrmse_impl(pred, ref, nullptr); }

double nrmse(const Volume3D& pred, const Volume3D& ref, const Volume3D& mask) {
    return nrmse_impl(pred, ref, &mask);
}

double dice(const Volume3D& pred_mask, const Volume3D& ref_mask) {
    require_same_geometry(pred_mask, ref_mask, "dice");
    long long a = 0, b = 0, inter = 0;
    for (size_t i = 0; i < pred_mask.data.size(); ++i) {
        const bool pa = pred_mask.data[i] >= 0.5f;
        const bool pb = ref_mask.data[i] >= 0.5f;
        a += pa;
        b += pb;
        inter += (pa && pb);
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

double dice(const LabelVolume& pred, const LabelVolume& ref, int class_index) {
    if (!same_geometry(pred, ref))
        throw DataError("dice: label geometry mismatch");
    long long a = 0, b = 0, inter = 0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const bool pa = pred.data[i] == class_index;
        const bool pb = ref.data[i] == class_index;
        a += pa;
        b += pb;
        inter += (pa && pb);
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

double percent_bias(double est, double gt) {
    if (gt == 0.0) throw NumericError("percent_bias undefined: ground truth is zero");
    return 100.0 * (est - gt) / gt;
}

MeanStd mean_std(const std::vector<double>& values) {
    MeanStd r;
    r.n = static_cast<int>(values.size());
    if (r.n == 0) return r;
    r.mean = std::accumulate(values.begin(), values.end(), 0.0) / r.n;
    if (r.n < 2) return r;
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / (r.n - 1));
    return r;
}

RegressionResult ols_regression(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw DataError("ols_regression: x and y lengths differ");
    const int n = static_cast<int>(x.size());
    if (n < 2) throw NumericError("ols_regression needs n >= 2");
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (int i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0) throw NumericError("ols_regression degenerate: x is constant");
    RegressionResult r;
    r.n = n;
    r.slope = sxy / sxx;
    r.intercept = my - r.slope * mx;
    if (syy == 0.0) {
        r.constant_y = true;
        r.r_squared = 0.0;
        return r;
    }
    double ss_res = 0.0;
    for (int i = 0; i < n; ++i) {
        const double e = y[i] - (r.slope * x[i] + r.intercept);
        ss_res += e * e;
    }
    r.r_squared = 1.0 - ss_res / syy;
    return r;
}

namespace {

/// Mid-ranks of |d|, doubled so that every rank is an exact integer.
std::vector<long long> doubled_midranks(const std::vector<double>& abs_d) {
    const int n = static_cast<int>(abs_d.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int i, int j) { return abs_d[i] < abs_d[j]; });
    std::vector<long long> ranks2(n);
    int i = 0;
    while (i < n) {
        int j = i;
        while (j + 1 < n && abs_d[order[j + 1]] == abs_d[order[i]]) ++j;
        // positions i..j share the mid-rank ((i+1)+(j+1))/2; doubled it is (i+j+2)
        const long long r2 = i + j + 2;
        for (int k = i; k <= j; ++k) ranks2[order[k]] = r2;
        i = j + 1;
    }
    return ranks2;
}

}  // namespace

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DataError("wilcoxon: sample lengths differ");
    if (a.empty()) throw NumericError("wilcoxon needs n >= 1");

    std::vector<double> abs_d;
    std::vector<bool> positive;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (d == 0.0) continue;  // classic zero-handling: drop
        abs_d.push_back(std::fabs(d));
        positive.push_back(d > 0.0);
    }
    WilcoxonResult r;
    r.n_effective = static_cast<int>(abs_d.size());
    if (r.n_effective == 0) {
        r.degenerate = true;
        r.p_two_sided = 1.0;
        return r;
    }

    const std::vector<long long> ranks2 = doubled_midranks(abs_d);
    long long w2 = 0;  // doubled W+
    for (int i = 0; i < r.n_effective; ++i)
        if (positive[i]) w2 += ranks2[i];
    r.statistic = static_cast<double>(w2) / 2.0;

    const int n = r.n_effective;
    if (n <= 15) {
        r.exact = true;
        const uint32_t total = 1u << n;
        long long count_le = 0, count_ge = 0;
        for (uint32_t mask = 0; mask < total; ++mask) {
            long long s = 0;
            for (int i = 0; i < n; ++i)
                if (mask & (1u << i)) s += ranks2[i];
            count_le += (s <= w2);
            count_ge += (s >= w2);
        }
        const double p_le = static_cast<double>(count_le) / total;
        const double p_ge = static_cast<double>(count_ge) / total;
        r.p_two_sided = std::min(1.0, 2.0 * std::min(p_le, p_ge));
        return r;
    }

    // Normal approximation with continuity and tie corrections.
    const double w = r.statistic;
    const double mu = n * (n + 1) / 4.0;
    double tie_term = 0.0;
    {
        std::vector<long long> sorted = ranks2;
        std::sort(sorted.begin(), sorted.end());
        size_t i = 0;
        while (i < sorted.size()) {
            size_t j = i;
            while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
            const double t = static_cast<double>(j - i + 1);
            tie_term += t * t * t - t;
            i = j + 1;
        }
    }
    const double var = n * (n + 1) * (2.0 * n + 1) / 24.0 - tie_term / 48.0;
    if (var <= 0.0) {
        r.p_two_sided = 1.0;
        return r;
    }
    double num = w - mu;
    if (num > 0.5) num -= 0.5;
    else if (num < -0.5) num += 0.5;
    else num = 0.0;
    const double z = num / std::sqrt(var);
    r.p_two_sided = std::min(1.0, 2.0 * stddev_normal_sf(std::fabs(z)));
    if (r.p_two_sided <= 0.0) r.p_two_sided = std::numeric_limits<double>::min();
    return r;
}

}  // namespace amdiff
