#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "calvaria/core/errors.hpp"

namespace calvaria {

enum class Modality { MRI, CT, SCT };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

/// Grid shape in (depth, height, width) order. Serialization is C-order with
/// depth slowest; every module in the project uses this one convention.
using Shape3 = std::array<int, 3>;
using Spacing3 = std::array<double, 3>;

constexpr int kMinAxisDim = 8;

inline std::int64_t voxel_count(const Shape3& s) {
    return static_cast<std::int64_t>(s[0]) * s[1] * s[2];
}

/// 3D scalar intensity grid with physical spacing. Intensities are float32;
/// CT-like volumes are kept in [0,1] by construction at the generation and
/// synthesis boundaries.
struct Volume {
    Shape3 shape{0, 0, 0};
    Spacing3 spacing_mm{1.0, 1.0, 1.0};
    Modality modality = Modality::CT;
    std::vector<float> data;

    Volume() = default;
    Volume(Shape3 s, Spacing3 sp, Modality m, float fill = 0.0f)
        : shape(s), spacing_mm(sp), modality(m),
          data(static_cast<std::size_t>(voxel_count(s)), fill) {}

    std::size_t index(int d, int h, int w) const {
        return (static_cast<std::size_t>(d) * shape[1] + h) * shape[2] + w;
    }
    float& at(int d, int h, int w) { return data[index(d, h, w)]; }
    float at(int d, int h, int w) const { return data[index(d, h, w)]; }
    std::int64_t size() const { return voxel_count(shape); }
};

/// 3D integer label grid over the fixed 9-code table:
/// 0 background, 1 right frontal, 2 left frontal, 3 right temporal,
/// 4 left temporal, 5 occipital, 6 right parietal, 7 left parietal, 8 suture.
struct LabelMap {
    static constexpr int kNumCodes = 9;
    static constexpr std::uint8_t kBackground = 0;
    static constexpr std::uint8_t kSuture = 8;

    Shape3 shape{0, 0, 0};
    Spacing3 spacing_mm{1.0, 1.0, 1.0};
    std::vector<std::uint8_t> data;

    LabelMap() = default;
    LabelMap(Shape3 s, Spacing3 sp, std::uint8_t fill = 0)
        : shape(s), spacing_mm(sp),
          data(static_cast<std::size_t>(voxel_count(s)), fill) {}

    std::size_t index(int d, int h, int w) const {
        return (static_cast<std::size_t>(d) * shape[1] + h) * shape[2] + w;
    }
    std::uint8_t& at(int d, int h, int w) { return data[index(d, h, w)]; }
    std::uint8_t at(int d, int h, int w) const { return data[index(d, h, w)]; }
    std::int64_t size() const { return voxel_count(shape); }
};

/// Human-readable names for the 8 anatomy codes (1..8), used in reports.
const std::array<std::string, 9>& label_names();

enum class Sex { M, F };

std::string to_string(Sex s);
Sex sex_from_string(const std::string& s);

/// One cohort member: paired volumes plus ground-truth labels.
struct SubjectRecord {
    std::string subject_id;
    int age_days = 0;
    Sex sex = Sex::M;
    Volume mri;
    Volume ct;
    LabelMap bones_sutures;
};

/// Throws ArgumentError unless shape/spacing satisfy the grid invariants
/// (all dims >= 8, spacing > 0, data size matches shape).
void validate_grid(const Shape3& shape, const Spacing3& spacing);
void validate_grid(const Shape3& shape, const Spacing3& spacing, std::size_t data_size);
void validate(const Volume& v);
void validate(const LabelMap& m);

/// Throws ArgumentError if any value is NaN/Inf.
void require_finite(const Volume& v, const std::string& context);

} // namespace calvaria
