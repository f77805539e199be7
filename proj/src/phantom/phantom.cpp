#include "calvaria/phantom/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "calvaria/core/rng.hpp"

namespace calvaria::phantom {
namespace {

struct Vec3 {
    double d, h, w;
};

Vec3 normalize(Vec3 v) {
    const double n = std::sqrt(v.d * v.d + v.h * v.h + v.w * v.w);
    return {v.d / n, v.h / n, v.w / n};
}

double dot(const Vec3& a, const Vec3& b) { return a.d * b.d + a.h * b.h + a.w * b.w; }

// Plate anchor directions on the head surface, index = label code - 1.
// Axes: d superior(+), h posterior(+), w subject-left(+).
constexpr Vec3 kAnchors[7] = {
    {0.50, -0.75, -0.45}, // r_frontal
    {0.50, -0.75, +0.45}, // l_frontal
    {-0.15, 0.10, -0.95}, // r_temporal
    {-0.15, 0.10, +0.95}, // l_temporal
    {-0.05, 0.98, 0.00},  // occipital
    {0.80, 0.35, -0.45},  // r_parietal
    {0.80, 0.35, +0.45},  // l_parietal
};

constexpr double kAnchorJitterRad = 0.03;
constexpr double kWMinMm = 0.6;      // suture width at the oldest age
constexpr double kFontanelleMm = 11.0; // fontanelle radius at the youngest age

// tissue classes during construction
enum : std::uint8_t { kBg = 0, kBrain = 1, kScalp = 2, kShell = 3 };

void validate_spec(const PhantomSpec& spec) {
    for (int a = 0; a < 3; ++a) {
        if (spec.grid[a] < 24 || spec.grid[a] > 160) {
            throw ArgumentError("phantom grid axis " + std::to_string(a) + " is " +
                                std::to_string(spec.grid[a]) + ", supported range is [24,160]");
        }
    }
    if (spec.age_days < kMinAgeDays || spec.age_days > kMaxAgeDays) {
        throw ArgumentError("age_days must be in [36, 730]");
    }
    if (!(spec.suture_base_width_mm > 0.0)) {
        throw ArgumentError("suture_base_width_mm must be positive");
    }
    if (spec.noise_sigma < 0.0 || spec.bias_amplitude < 0.0) {
        throw ArgumentError("noise_sigma and bias_amplitude must be nonnegative");
    }
}

} // namespace

double suture_width_mm(double base_width_mm, int age_days) {
    const double frac = static_cast<double>(age_days - kMinAgeDays) / (kMaxAgeDays - kMinAgeDays);
    return base_width_mm - (base_width_mm - kWMinMm) * frac;
}

SubjectRecord generate_subject(const PhantomSpec& spec) {
    validate_spec(spec);
    const bool fontanelle = spec.fontanelle || spec.age_days < 120;

    Rng geo_rng(Rng::derive_seed(spec.seed, 1));
    Rng bias_rng(Rng::derive_seed(spec.seed, 2));
    Rng noise_rng(Rng::derive_seed(spec.seed, 3));

    const Shape3 grid = spec.grid;
    Spacing3 spacing;
    double max_vox = 0;
    for (int a = 0; a < 3; ++a) {
        spacing[a] = kFovMm / grid[a];
        max_vox = std::max(max_vox, spacing[a]);
    }

    // head geometry
    const double age_factor = 0.82 + 0.13 * (spec.age_days - kMinAgeDays) /
                                         static_cast<double>(kMaxAgeDays - kMinAgeDays);
    const double sex_factor = spec.sex == Sex::M ? 1.02 : 1.0;
    const double radii[3] = {62.0 * age_factor * sex_factor, 72.0 * age_factor * sex_factor,
                             58.0 * age_factor * sex_factor};
    const double shell_mm = std::max(6.0, 1.6 * max_vox);
    const double scalp_mm = std::max(4.0, 1.1 * max_vox);
    const double r_mean = (radii[0] + radii[1] + radii[2]) / 3.0;
    if (shell_mm >= 0.6 * *std::min_element(radii, radii + 3)) {
        throw GenerationError("skull shell thickness exceeds the head radius");
    }

    // jittered plate anchors
    Vec3 anchors[7];
    for (int k = 0; k < 7; ++k) {
        Vec3 a = kAnchors[k];
        a.d += geo_rng.uniform(-kAnchorJitterRad, kAnchorJitterRad);
        a.h += geo_rng.uniform(-kAnchorJitterRad, kAnchorJitterRad);
        a.w += geo_rng.uniform(-kAnchorJitterRad, kAnchorJitterRad);
        anchors[k] = normalize(a);
    }
    double min_sep = M_PI;
    for (int i = 0; i < 7; ++i) {
        for (int j = i + 1; j < 7; ++j) {
            min_sep = std::min(min_sep, std::acos(std::clamp(dot(anchors[i], anchors[j]), -1.0, 1.0)));
        }
    }
    if (spec.suture_base_width_mm / r_mean >= 0.5 * min_sep) {
        throw GenerationError("suture width is not smaller than the plate size");
    }

    // head center: FOV center plus a small per-subject offset
    double center[3];
    for (double& c : center) {
        c = kFovMm / 2.0;
    }
    for (double& c : center) {
        c += geo_rng.uniform(-2.0, 2.0);
    }

    const auto n = static_cast<std::size_t>(voxel_count(grid));
    std::vector<std::uint8_t> tissue(n, kBg);
    std::vector<std::uint8_t> plate(n, 0);       // 1..7 on shell voxels
    std::vector<float> boundary_mm(n, 1e30f);    // arc distance to the plate boundary
    std::vector<std::uint8_t> second(n, 0);      // second-closest plate on shell voxels

    const double inner[3] = {radii[0] - shell_mm, radii[1] - shell_mm, radii[2] - shell_mm};
    const double outer_scalp[3] = {radii[0] + scalp_mm, radii[1] + scalp_mm, radii[2] + scalp_mm};

    std::size_t i = 0;
    for (int d = 0; d < grid[0]; ++d) {
        const double pd = (d + 0.5) * spacing[0] - center[0];
        for (int h = 0; h < grid[1]; ++h) {
            const double ph = (h + 0.5) * spacing[1] - center[1];
            for (int w = 0; w < grid[2]; ++w, ++i) {
                const double pw = (w + 0.5) * spacing[2] - center[2];
                const double q_out = pd * pd / (radii[0] * radii[0]) +
                                     ph * ph / (radii[1] * radii[1]) +
                                     pw * pw / (radii[2] * radii[2]);
                if (q_out <= 1.0) {
                    const double q_in = pd * pd / (inner[0] * inner[0]) +
                                        ph * ph / (inner[1] * inner[1]) +
                                        pw * pw / (inner[2] * inner[2]);
                    if (q_in < 1.0) {
                        tissue[i] = kBrain;
                        continue;
                    }
                    tissue[i] = kShell;
                    const Vec3 dir = normalize({pd / radii[0], ph / radii[1], pw / radii[2]});
                    double best = -2, second_best = -2;
                    int best_k = 0, second_k = 0;
                    for (int k = 0; k < 7; ++k) {
                        const double dp = dot(dir, anchors[k]);
                        if (dp > best) {
                            second_best = best;
                            second_k = best_k;
                            best = dp;
                            best_k = k;
                        } else if (dp > second_best) {
                            second_best = dp;
                            second_k = k;
                        }
                    }
                    plate[i] = static_cast<std::uint8_t>(best_k + 1);
                    second[i] = static_cast<std::uint8_t>(second_k + 1);
                    const double th1 = std::acos(std::clamp(best, -1.0, 1.0));
                    const double th2 = std::acos(std::clamp(second_best, -1.0, 1.0));
                    boundary_mm[i] = static_cast<float>((th2 - th1) * r_mean / 2.0);
                } else {
                    const double q_scalp = pd * pd / (outer_scalp[0] * outer_scalp[0]) +
                                           ph * ph / (outer_scalp[1] * outer_scalp[1]) +
                                           pw * pw / (outer_scalp[2] * outer_scalp[2]);
                    if (q_scalp <= 1.0) {
                        tissue[i] = kScalp;
                    }
                }
            }
        }
    }

    // label assembly: plates first, then the suture gaps
    LabelMap labels(grid, spacing);
    for (std::size_t v = 0; v < n; ++v) {
        labels.data[v] = tissue[v] == kShell ? plate[v] : LabelMap::kBackground;
    }

    const double gate_mm =
        std::max(suture_width_mm(spec.suture_base_width_mm, spec.age_days) / 2.0, 0.30 * max_vox);
    const double second_side_gate = gate_mm - 0.5 * max_vox;

    auto in_grid = [&](int d, int h, int w) {
        return d >= 0 && d < grid[0] && h >= 0 && h < grid[1] && w >= 0 && w < grid[2];
    };
    constexpr int k6[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};

    // One-sided interface marking: a shell voxel of plate a becomes suture when
    // a 6-neighbor holds a higher plate code (so exactly one side of every
    // interface is marked and the other keeps its bone code), gated by the
    // age-dependent arc distance. The far side joins only when the gate is
    // clearly wider than a voxel, and a repair pass below enforces the
    // two-plate-contact property afterwards.
    std::vector<std::uint8_t> is_suture(n, 0);
    i = 0;
    for (int d = 0; d < grid[0]; ++d)
        for (int h = 0; h < grid[1]; ++h)
            for (int w = 0; w < grid[2]; ++w, ++i) {
                if (tissue[i] != kShell) continue;
                const int a = plate[i];
                bool lower_side = false, higher_side = false;
                for (const auto& kk : k6) {
                    const int dd = d + kk[0], hh = h + kk[1], ww = w + kk[2];
                    if (!in_grid(dd, hh, ww)) continue;
                    const std::size_t j = labels.index(dd, hh, ww);
                    if (tissue[j] != kShell || plate[j] == a) continue;
                    (plate[j] > a ? lower_side : higher_side) = true;
                }
                if (lower_side && boundary_mm[i] <= gate_mm) {
                    is_suture[i] = 1;
                } else if (higher_side && boundary_mm[i] <= second_side_gate) {
                    is_suture[i] = 1;
                }
            }

    // fontanelle patch at the bregma (meeting point of frontal and parietal
    // plates), radius shrinking with age; exempt from the repair pass
    std::vector<std::uint8_t> in_fontanelle(n, 0);
    if (fontanelle) {
        Vec3 bregma{0, 0, 0};
        for (int k : {0, 1, 5, 6}) {
            bregma.d += anchors[k].d;
            bregma.h += anchors[k].h;
            bregma.w += anchors[k].w;
        }
        bregma = normalize(bregma);
        const double shrink = 1.0 - (spec.age_days - kMinAgeDays) / 600.0;
        const double radius_mm = std::max(kFontanelleMm * std::max(shrink, 0.0), 0.8 * max_vox);
        i = 0;
        for (int d = 0; d < grid[0]; ++d) {
            const double pd = (d + 0.5) * spacing[0] - center[0];
            for (int h = 0; h < grid[1]; ++h) {
                const double ph = (h + 0.5) * spacing[1] - center[1];
                for (int w = 0; w < grid[2]; ++w, ++i) {
                    if (tissue[i] != kShell) continue;
                    const double pw = (w + 0.5) * spacing[2] - center[2];
                    const Vec3 dir = normalize({pd / radii[0], ph / radii[1], pw / radii[2]});
                    const double arc = std::acos(std::clamp(dot(dir, bregma), -1.0, 1.0)) * r_mean;
                    if (arc <= radius_mm) {
                        is_suture[i] = 1;
                        in_fontanelle[i] = 1;
                    }
                }
            }
        }
    }

    for (std::size_t v = 0; v < n; ++v) {
        if (is_suture[v]) labels.data[v] = LabelMap::kSuture;
    }

    // Repair: every suture voxel outside the fontanelle must touch >= 2
    // distinct bone codes in its 26-neighborhood. Violators revert to their
    // plate code, farthest-from-boundary first; reverting one voxel can only
    // help its neighbors, so each voxel needs processing at most once.
    auto count_plate_contacts = [&](int d, int h, int w) {
        std::uint8_t seen[8] = {};
        int distinct = 0;
        for (int dd = -1; dd <= 1; ++dd)
            for (int hh = -1; hh <= 1; ++hh)
                for (int ww = -1; ww <= 1; ++ww) {
                    if (!dd && !hh && !ww) continue;
                    const int x = d + dd, y = h + hh, z = w + ww;
                    if (!in_grid(x, y, z)) continue;
                    const std::uint8_t c = labels.at(x, y, z);
                    if (c >= 1 && c <= 7 && !seen[c]) {
                        seen[c] = 1;
                        ++distinct;
                    }
                }
        return distinct;
    };
    struct Violator {
        float dist;
        int d, h, w;
    };
    std::vector<Violator> violators;
    i = 0;
    for (int d = 0; d < grid[0]; ++d)
        for (int h = 0; h < grid[1]; ++h)
            for (int w = 0; w < grid[2]; ++w, ++i) {
                if (labels.data[i] == LabelMap::kSuture && !in_fontanelle[i] &&
                    count_plate_contacts(d, h, w) < 2) {
                    violators.push_back({boundary_mm[i], d, h, w});
                }
            }
    std::sort(violators.begin(), violators.end(),
              [](const Violator& a, const Violator& b) { return a.dist > b.dist; });
    for (const auto& v : violators) {
        if (count_plate_contacts(v.d, v.h, v.w) < 2) {
            labels.at(v.d, v.h, v.w) = plate[labels.index(v.d, v.h, v.w)];
        }
    }

    std::array<std::int64_t, LabelMap::kNumCodes> histogram{};
    for (std::uint8_t c : labels.data) ++histogram[c];
    for (int c = 0; c < LabelMap::kNumCodes; ++c) {
        if (histogram[c] == 0) {
            throw GenerationError("label code " + std::to_string(c) +
                                  " is empty; the requested geometry is not realizable "
                                  "on this grid");
        }
    }

    // CT: piecewise-constant tissue intensities
    Volume ct(grid, spacing, Modality::CT);
    for (std::size_t v = 0; v < n; ++v) {
        if (labels.data[v] >= 1 && labels.data[v] <= 7) {
            ct.data[v] = kCtBone;
        } else if (labels.data[v] == LabelMap::kSuture) {
            ct.data[v] = kCtSuture;
        } else if (tissue[v] == kBrain) {
            ct.data[v] = kCtBrain;
        } else if (tissue[v] == kScalp) {
            ct.data[v] = kCtScalp;
        }
    }

    // MRI: tissue contrast x degree-2 bias field x (1 + noise)
    double coeff[9];
    double coeff_norm = 0;
    for (double& c : coeff) {
        c = bias_rng.uniform(-1.0, 1.0);
        coeff_norm += std::abs(c);
    }
    for (double& c : coeff) {
        c *= spec.bias_amplitude / coeff_norm;
    }

    Volume mri(grid, spacing, Modality::MRI);
    i = 0;
    for (int d = 0; d < grid[0]; ++d) {
        const double ud = 2.0 * (d + 0.5) / grid[0] - 1.0;
        for (int h = 0; h < grid[1]; ++h) {
            const double uh = 2.0 * (h + 0.5) / grid[1] - 1.0;
            for (int w = 0; w < grid[2]; ++w, ++i) {
                const double uw = 2.0 * (w + 0.5) / grid[2] - 1.0;
                float base = 0.0f;
                if (labels.data[i] == LabelMap::kSuture) {
                    base = kMriSuture;
                } else if (labels.data[i] >= 1) {
                    base = kMriBone;
                } else if (tissue[i] == kBrain) {
                    base = kMriBrain;
                } else if (tissue[i] == kScalp) {
                    base = kMriScalp;
                }
                const double field = 1.0 + coeff[0] * ud + coeff[1] * uh + coeff[2] * uw +
                                     coeff[3] * ud * uh + coeff[4] * ud * uw +
                                     coeff[5] * uh * uw + coeff[6] * ud * ud +
                                     coeff[7] * uh * uh + coeff[8] * uw * uw;
                const double noise = 1.0 + noise_rng.gaussian(0.0, spec.noise_sigma);
                mri.data[i] = std::max(0.0f, static_cast<float>(base * field * noise));
            }
        }
    }

    SubjectRecord rec;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "phantom_%016llx",
                  static_cast<unsigned long long>(spec.seed));
    rec.subject_id = idbuf;
    rec.age_days = spec.age_days;
    rec.sex = spec.sex;
    rec.mri = std::move(mri);
    rec.ct = std::move(ct);
    rec.bones_sutures = std::move(labels);
    return rec;
}

std::vector<PhantomSpec> cohort_specs(int n, std::uint64_t seed, const Shape3& grid) {
    if (n < 4) {
        throw ArgumentError("cohort size must be at least 4");
    }
    Rng rng(Rng::derive_seed(seed, 0xC0'0457));
    std::vector<Sex> sexes;
    const int males = (n + 1) / 2;
    for (int i = 0; i < n; ++i) {
        sexes.push_back(i < males ? Sex::M : Sex::F);
    }
    for (int i = n - 1; i > 0; --i) {
        std::swap(sexes[static_cast<std::size_t>(i)],
                  sexes[static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(i) + 1))]);
    }
    std::vector<PhantomSpec> specs;
    for (int i = 0; i < n; ++i) {
        PhantomSpec s;
        s.seed = Rng::derive_seed(seed, static_cast<std::uint64_t>(i));
        s.age_days = kMinAgeDays + static_cast<int>(rng.uniform_int(kMaxAgeDays - kMinAgeDays + 1));
        s.sex = sexes[static_cast<std::size_t>(i)];
        s.grid = grid;
        s.fontanelle = s.age_days < 120;
        specs.push_back(s);
    }
    return specs;
}

std::vector<SubjectRecord> generate_cohort(int n, std::uint64_t seed, const Shape3& grid) {
    const auto specs = cohort_specs(n, seed, grid);
    std::vector<SubjectRecord> cohort;
    cohort.reserve(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
        SubjectRecord rec = generate_subject(specs[i]);
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "subject_%03zu", i);
        rec.subject_id = idbuf;
        cohort.push_back(std::move(rec));
    }
    return cohort;
}

} // namespace calvaria::phantom
