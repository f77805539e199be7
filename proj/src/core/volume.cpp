#include "calvaria/core/volume.hpp"

#include <cmath>

namespace calvaria {

std::string to_string(Modality m) {
    switch (m) {
        case Modality::MRI: return "MRI";
        case Modality::CT: return "CT";
        case Modality::SCT: return "SCT";
    }
    return "CT";
}

Modality modality_from_string(const std::string& s) {
    if (s == "MRI") return Modality::MRI;
    if (s == "CT") return Modality::CT;
    if (s == "SCT") return Modality::SCT;
    throw FormatError("unknown modality: " + s);
}

const std::array<std::string, 9>& label_names() {
    static const std::array<std::string, 9> names = {
        "background",  "r_frontal", "l_frontal", "r_temporal", "l_temporal",
        "occipital",   "r_parietal", "l_parietal", "suture"};
    return names;
}

std::string to_string(Sex s) { return s == Sex::M ? "M" : "F"; }

Sex sex_from_string(const std::string& s) {
    if (s == "M") return Sex::M;
    if (s == "F") return Sex::F;
    throw FormatError("unknown sex: " + s);
}

void validate_grid(const Shape3& shape, const Spacing3& spacing) {
    for (int a = 0; a < 3; ++a) {
        if (shape[a] < kMinAxisDim) {
            throw ArgumentError("axis " + std::to_string(a) + " has dimension " +
                                std::to_string(shape[a]) + ", minimum is " +
                                std::to_string(kMinAxisDim));
        }
        if (!(spacing[a] > 0.0)) {
            throw ArgumentError("spacing must be positive on every axis");
        }
    }
}

void validate_grid(const Shape3& shape, const Spacing3& spacing, std::size_t data_size) {
    validate_grid(shape, spacing);
    if (data_size != static_cast<std::size_t>(voxel_count(shape))) {
        throw ArgumentError("data size does not match shape");
    }
}

void validate(const Volume& v) { validate_grid(v.shape, v.spacing_mm, v.data.size()); }

void validate(const LabelMap& m) {
    validate_grid(m.shape, m.spacing_mm, m.data.size());
    for (std::uint8_t c : m.data) {
        if (c >= LabelMap::kNumCodes) {
            throw ArgumentError("label code out of range: " + std::to_string(c));
        }
    }
}

void require_finite(const Volume& v, const std::string& context) {
    for (float x : v.data) {
        if (!std::isfinite(x)) {
            throw ArgumentError(context + ": volume contains non-finite values");
        }
    }
}

} // namespace calvaria
