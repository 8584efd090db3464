#pragma once

#include <optional>
#include <vector>

#include "amdiff/volume.hpp"

namespace amdiff {

struct RegressionResult {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    int n = 0;
    bool constant_y = false;  // SS_tot was 0; r_squared reported as 0 by convention
};

struct WilcoxonResult {
    double statistic = 0.0;  // W+ (sum of ranks of positive differences, mid-ranks for ties)
    double p_two_sided = 1.0;
    int n_effective = 0;     // pairs remaining after dropping zero differences
    bool exact = false;      // exact enumeration vs normal approximation
    bool degenerate = false; // all differences were zero
};

/// RMSE over (masked) voxels divided by (max - min) of ref over the same region.
/// Throws NumericError when the reference range is zero; DataError on geometry mismatch
/// or masks with fewer than 2 voxels.
double nrmse(const Volume3D& pred, const Volume3D& ref);
double nrmse(const Volume3D& pred, const Volume3D& ref, const Volume3D& mask);

/// Dice overlap 2|A∩B|/(|A|+|B|); both masks empty gives 1, exactly one empty gives 0.
/// Masks are Volume3D with values >= 0.5 counted as inside.
double dice(const Volume3D& pred_mask, const Volume3D& ref_mask);
double dice(const LabelVolume& pred, const LabelVolume& ref, int class_index);

/// 100*(est - gt)/gt. Throws NumericError when gt == 0.
double percent_bias(double est, double gt);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation (n-1); 0 when n < 2
    int n = 0;
};
MeanStd mean_std(const std::vector<double>& values);

/// Ordinary least squares with intercept. Throws ConfigError for n < 2 or constant x.
RegressionResult ols_regression(const std::vector<double>& x, const std::vector<double>& y);

/// Two-sided Wilcoxon signed-rank test between paired samples. Zero differences are
/// dropped; ties get mid-ranks. Exact enumeration for effective n <= 15, normal
/// approximation with continuity and tie correction above.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace amdiff
