#include "amdiff/phantom.hpp"

#include <algorithm>
#include <cmath>

namespace amdiff {

namespace {

double extent_mm(const Index3& dims, const Spacing3& voxel_mm, int axis) {
    return dims[axis] * voxel_mm[axis];
}

bool inside_ellipsoid(const std::array<double, 3>& p, const std::array<double, 3>& c,
                      const std::array<double, 3>& semi) {
    double d = 0.0;
    for (int i = 0; i < 3; ++i) {
        const double u = (p[i] - c[i]) / semi[i];
        d += u * u;
    }
    return d <= 1.0;
}

double ellipsoid_volume(const std::array<double, 3>& semi) {
    return semi[0] * semi[1] * semi[2];  // up to the common 4/3*pi factor
}

void separable_gaussian_smooth(Volume3D& v, double fwhm_mm) {
    for (int axis = 0; axis < 3; ++axis) {
        const double sigma_vox = fwhm_mm / 2.3548200450309493 / v.voxel_mm[axis];
        if (sigma_vox <= 0.0) continue;
        const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_vox)));
        std::vector<double> kernel(2 * radius + 1);
        double sum = 0.0;
        for (int k = -radius; k <= radius; ++k) {
            kernel[k + radius] = std::exp(-0.5 * (k / sigma_vox) * (k / sigma_vox));
            sum += kernel[k + radius];
        }
        for (auto& k : kernel) k /= sum;

        const Index3 d = v.dims;
        std::vector<float> out(v.data.size());
        for (int z = 0; z < d[2]; ++z)
            for (int y = 0; y < d[1]; ++y)
                for (int x = 0; x < d[0]; ++x) {
                    double acc = 0.0;
                    double wsum = 0.0;
                    for (int k = -radius; k <= radius; ++k) {
                        int q[3] = {x, y, z};
                        q[axis] += k;
                        if (q[axis] < 0 || q[axis] >= d[axis]) continue;  // renormalized edges
                        acc += kernel[k + radius] * v.at(q[0], q[1], q[2]);
                        wsum += kernel[k + radius];
                    }
                    out[flat_index(d, x, y, z)] = static_cast<float>(acc / wsum);
                }
        v.data = std::move(out);
    }
}

}  // namespace

void PhantomSpec::validate() const {
    for (int i = 0; i < 3; ++i) {
        if (dims[i] < 1) throw ConfigError("phantom dims must be >= 1 per axis");
        if (!(voxel_mm[i] > 0.0)) throw ConfigError("phantom voxel_mm must be positive");
    }
    roster.validate();
    const int S = roster.num_classes() - 1;
    if (!(background_suv >= 0.0)) throw ConfigError("background_suv must be >= 0");
    double max_organ_suv = 0.0;
    for (const auto& o : organs) {
        if (o.class_index < 2 || o.class_index > S)
            throw ConfigError("organ class index " + std::to_string(o.class_index) +
                              " outside [2, " + std::to_string(S) + "]");
        if (!(o.suv >= 0.0)) throw ConfigError("organ SUV must be >= 0");
        for (int i = 0; i < 3; ++i) {
            if (!(o.semi_axes_mm[i] > 0.0)) throw ConfigError("organ semi-axes must be positive");
            if (o.center_mm[i] - o.semi_axes_mm[i] < 0.0 ||
                o.center_mm[i] + o.semi_axes_mm[i] > extent_mm(dims, voxel_mm, i))
                throw ConfigError("organ shape for class " + std::to_string(o.class_index) +
                                  " exceeds the volume bounds on axis " + std::to_string(i));
        }
        max_organ_suv = std::max(max_organ_suv, o.suv);
    }
    if (lesions.count_min < 0 || lesions.count_max < lesions.count_min)
        throw ConfigError("lesion count range is invalid");
    if (lesions.count_max > 0) {
        if (!(lesions.radius_mm_min > 0.0) || lesions.radius_mm_max < lesions.radius_mm_min)
            throw ConfigError("lesion radius range is invalid");
        if (!(lesions.suv_min > max_organ_suv))
            throw ConfigError("lesion SUV minimum must exceed the hottest organ (lesions are hot)");
        if (lesions.suv_max < lesions.suv_min) throw ConfigError("lesion SUV range is invalid");
        for (int i = 0; i < 3; ++i)
            if (2.0 * lesions.radius_mm_max > extent_mm(dims, voxel_mm, i))
                throw ConfigError("maximum lesion radius does not fit inside the volume");
    }
    if (ramp_amplitude < 0.0 || ramp_amplitude >= 1.0)
        throw ConfigError("ramp_amplitude must lie in [0, 1)");
    if (smoothing_fwhm_mm < 0.0) throw ConfigError("smoothing_fwhm_mm must be >= 0");
}

PhantomCase generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    Rng rng = Rng(spec.seed).derive(0x70686e746dULL);  // phantom stream

    // Lesion draws happen first so structural changes to rasterization below
    // cannot alter the sampled lesion set for a given seed.
    std::vector<LesionBall> lesions;
    const int count = spec.lesions.count_max == spec.lesions.count_min
                          ? spec.lesions.count_min
                          : spec.lesions.count_min +
                                static_cast<int>(rng.below(
                                    spec.lesions.count_max - spec.lesions.count_min + 1));
    for (int i = 0; i < count; ++i) {
        LesionBall ball;
        ball.radius_mm = rng.uniform(spec.lesions.radius_mm_min, spec.lesions.radius_mm_max);
        for (int axis = 0; axis < 3; ++axis) {
            const double lo = ball.radius_mm;
            const double hi = extent_mm(spec.dims, spec.voxel_mm, axis) - ball.radius_mm;
            ball.center_mm[axis] = rng.uniform(lo, hi);
        }
        ball.suv = rng.uniform(spec.lesions.suv_min, spec.lesions.suv_max);
        lesions.push_back(ball);
    }

    PhantomCase out;
    out.lesions = lesions;
    out.activity = Volume3D(spec.dims, spec.voxel_mm);
    out.labels = LabelVolume(spec.dims, spec.voxel_mm, spec.roster.num_classes());

    // Organs sorted by volume so the innermost (smallest) containing shape wins.
    std::vector<const OrganShape*> organs_by_size;
    for (const auto& o : spec.organs) organs_by_size.push_back(&o);
    std::stable_sort(organs_by_size.begin(), organs_by_size.end(),
                     [](const OrganShape* a, const OrganShape* b) {
                         return ellipsoid_volume(a->semi_axes_mm) <
                                ellipsoid_volume(b->semi_axes_mm);
                     });

    const Index3 d = spec.dims;
    for (int z = 0; z < d[2]; ++z) {
        for (int y = 0; y < d[1]; ++y) {
            for (int x = 0; x < d[0]; ++x) {
                const std::array<double, 3> p = {(x + 0.5) * spec.voxel_mm[0],
                                                 (y + 0.5) * spec.voxel_mm[1],
                                                 (z + 0.5) * spec.voxel_mm[2]};
                int label = 0;
                double suv = spec.background_suv;
                for (const OrganShape* o : organs_by_size) {
                    if (inside_ellipsoid(p, o->center_mm, o->semi_axes_mm)) {
                        label = o->class_index;
                        suv = o->suv;
                        break;
                    }
                }
                double best_radius = 0.0;
                for (const auto& ball : lesions) {
                    const std::array<double, 3> semi = {ball.radius_mm, ball.radius_mm,
                                                        ball.radius_mm};
                    if (inside_ellipsoid(p, ball.center_mm, semi) &&
                        (best_radius == 0.0 || ball.radius_mm < best_radius)) {
                        label = 1;
                        suv = ball.suv;
                        best_radius = ball.radius_mm;
                    }
                }
                double ramp = 1.0;
                if (spec.ramp_amplitude > 0.0) {
                    const double ux = d[0] > 1 ? 2.0 * x / (d[0] - 1) - 1.0 : 0.0;
                    const double uy = d[1] > 1 ? 2.0 * y / (d[1] - 1) - 1.0 : 0.0;
                    const double uz = d[2] > 1 ? 2.0 * z / (d[2] - 1) - 1.0 : 0.0;
                    ramp = 1.0 + spec.ramp_amplitude * (ux + uy + uz) / 3.0;
                }
                out.labels.at(x, y, z) = static_cast<uint8_t>(label);
                out.activity.at(x, y, z) = static_cast<float>(suv * ramp);
            }
        }
    }

    if (spec.smoothing_fwhm_mm > 0.0)
        separable_gaussian_smooth(out.activity, spec.smoothing_fwhm_mm);
    return out;
}

void CountModel::validate() const {
    if (!(counts_per_suv > 0.0)) throw ConfigError("counts_per_suv must be positive");
    if (!(fraction > 0.0) || fraction > 1.0) throw ConfigError("count fraction must be in (0, 1]");
}

Volume3D simulate_count_level(const Volume3D& activity, const CountModel& model, uint64_t seed) {
    model.validate();
    activity.validate();
    Rng rng = Rng(seed).derive(0x636f756e7473ULL);  // counts stream
    const double rate = model.counts_per_suv * model.fraction;
    Volume3D out(activity.dims, activity.voxel_mm);
    for (size_t i = 0; i < activity.data.size(); ++i) {
        const double lambda = activity.data[i] * rate;
        out.data[i] = static_cast<float>(static_cast<double>(rng.poisson(lambda)) / rate);
    }
    return out;
}

std::vector<OrganShape> default_organ_layout(const Index3& dims, const Spacing3& voxel_mm,
                                             int num_classes) {
    const double lx = dims[0] * voxel_mm[0];
    const double ly = dims[1] * voxel_mm[1];
    const double lz = dims[2] * voxel_mm[2];
    auto shape = [&](int cls, double cx, double cy, double cz, double sx, double sy, double sz,
                     double suv) {
        OrganShape o;
        o.class_index = cls;
        o.center_mm = {cx * lx, cy * ly, cz * lz};
        o.semi_axes_mm = {sx * lx, sy * ly, sz * lz};
        o.suv = suv;
        return o;
    };
    const std::vector<OrganShape> full = {
        shape(2, 0.35, 0.50, 0.40, 0.22, 0.25, 0.20, 2.5),  // liver
        shape(3, 0.68, 0.45, 0.65, 0.18, 0.20, 0.22, 0.8),  // lung
        shape(4, 0.50, 0.15, 0.50, 0.08, 0.08, 0.35, 1.8),  // bone
        shape(5, 0.20, 0.76, 0.50, 0.12, 0.15, 0.30, 1.0),  // muscle
        shape(6, 0.72, 0.72, 0.32, 0.09, 0.09, 0.12, 2.2),  // kidney
        shape(7, 0.76, 0.28, 0.45, 0.10, 0.10, 0.12, 2.0),  // spleen
        shape(8, 0.45, 0.35, 0.50, 0.05, 0.05, 0.38, 2.1),  // aorta
    };
    std::vector<OrganShape> out;
    for (const auto& o : full)
        if (o.class_index < num_classes) out.push_back(o);
    return out;
}

}  // namespace amdiff
