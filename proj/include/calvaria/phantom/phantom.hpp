#pragma once

#include <cstdint>
#include <vector>

#include "calvaria/core/volume.hpp"

namespace calvaria::phantom {

/// Cubic physical field of view; voxel spacing per axis is kFovMm / dim.
constexpr double kFovMm = 192.0;

// Piecewise tissue intensities (normalized units).
constexpr float kCtBone = 0.90f;
constexpr float kCtScalp = 0.45f;
constexpr float kCtBrain = 0.35f;
constexpr float kCtSuture = 0.30f;
constexpr float kMriBrain = 0.60f;
constexpr float kMriScalp = 0.40f;
constexpr float kMriSuture = 0.12f;
constexpr float kMriBone = 0.05f;

constexpr int kMinAgeDays = 36;
constexpr int kMaxAgeDays = 730;

struct PhantomSpec {
    std::uint64_t seed = 0;
    int age_days = 365;
    Sex sex = Sex::M;
    Shape3 grid{64, 64, 64};
    double suture_base_width_mm = 5.0; // width at the youngest age
    bool fontanelle = false;           // forced on when age_days < 120
    double noise_sigma = 0.08;
    double bias_amplitude = 0.15;
};

/// Suture width in mm at a given age: linear ossification from the base
/// width at 36 days down to 0.6 mm at 730 days (strictly decreasing).
double suture_width_mm(double base_width_mm, int age_days);

/// Deterministically generates one paired pseudo-MRI/pseudo-CT subject with
/// ground-truth labels. The CT is piecewise-constant (bright skull shell,
/// darker soft tissue); the MRI shows soft-tissue contrast with
/// near-background bone, multiplied by a smooth degree-2 bias field and
/// (1 + Gaussian noise). Identical specs produce bit-identical subjects.
///
/// Errors: grid outside [24,160] per axis or age outside [36,730] ->
/// ArgumentError; suture width incompatible with plate size ->
/// GenerationError.
SubjectRecord generate_subject(const PhantomSpec& spec);

/// The per-subject specs of a cohort: ages uniform over [36,730] days,
/// sexes balanced to within one, per-subject seeds derived from the cohort
/// seed. n < 4 -> ArgumentError.
std::vector<PhantomSpec> cohort_specs(int n, std::uint64_t seed, const Shape3& grid);

/// cohort_specs + generate_subject, ids subject_000, subject_001, ...
std::vector<SubjectRecord> generate_cohort(int n, std::uint64_t seed, const Shape3& grid);

} // namespace calvaria::phantom
