#include "calvaria/preprocess/preprocess.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "calvaria/core/resample.hpp"
#include "transform_detail.hpp"

namespace calvaria::preprocess {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

/// Recovers Z-Y-X Euler angles from a row-major rotation matrix in the
/// (x, y, z) basis; the gimbal-lock branch pins rot[0] to zero.
std::array<double, 3> euler_from_rotation(const std::array<double, 9>& m) {
    std::array<double, 3> rot{};
    const double sb = -m[6];
    if (std::abs(sb) < 1.0 - 1e-12) {
        rot[1] = std::asin(sb);
        rot[0] = std::atan2(m[7], m[8]);
        rot[2] = std::atan2(m[3], m[0]);
    } else {
        rot[1] = std::copysign(std::acos(-1.0) / 2.0, sb);
        rot[0] = 0.0;
        rot[2] = std::atan2(-m[1], m[4]);
    }
    return rot;
}

} // namespace

std::string to_string(RegMode m) {
    return m == RegMode::rigid6 ? "rigid6" : "similarity9";
}

std::string to_string(RegMetric m) {
    return m == RegMetric::mse ? "mse" : "mutual_information";
}

RegMode reg_mode_from_string(const std::string& s) {
    if (s == "rigid6") return RegMode::rigid6;
    if (s == "similarity9") return RegMode::similarity9;
    throw ArgumentError("unknown registration mode: " + s);
}

RegMetric reg_metric_from_string(const std::string& s) {
    if (s == "mse") return RegMetric::mse;
    if (s == "mutual_information") return RegMetric::mutual_information;
    throw ArgumentError("unknown registration metric: " + s);
}

SimilarityTransform inverse(const SimilarityTransform& t) {
    const double smax = std::max({t.scale[0], t.scale[1], t.scale[2]});
    const double smin = std::min({t.scale[0], t.scale[1], t.scale[2]});
    if (!(smin > 0.0)) {
        throw ArgumentError("transform scale must be positive");
    }
    if (smax - smin > 1e-9 * smax) {
        throw DomainError(
            "inverse of an anisotropically scaled transform is not a "
            "rotate-after-scale similarity transform");
    }
    const double s = (t.scale[0] + t.scale[1] + t.scale[2]) / 3.0;
    const auto r = detail::rotation_zyx(t.rotation);
    const std::array<double, 9> rt = {r[0], r[3], r[6], r[1], r[4],
                                      r[7], r[2], r[5], r[8]};
    SimilarityTransform inv;
    inv.rotation = euler_from_rotation(rt);
    for (int a = 0; a < 3; ++a) {
        inv.translation_mm[a] = -(rt[3 * a + 0] * t.translation_mm[0] +
                                  rt[3 * a + 1] * t.translation_mm[1] +
                                  rt[3 * a + 2] * t.translation_mm[2]) /
                                s;
        inv.scale[a] = t.mode == RegMode::rigid6 ? 1.0 : 1.0 / s;
    }
    inv.mode = t.mode;
    inv.metric = t.metric;
    inv.converged = t.converged;
    return inv;
}

Volume apply_transform(const Volume& v, const SimilarityTransform& t) {
    validate(v);
    const auto pb =
        detail::make_pullback(t, v.shape, v.spacing_mm, v.shape, v.spacing_mm);
    Volume out(v.shape, v.spacing_mm, v.modality);
    std::size_t idx = 0;
    for (int d = 0; d < v.shape[0]; ++d) {
        for (int h = 0; h < v.shape[1]; ++h) {
            for (int w = 0; w < v.shape[2]; ++w, ++idx) {
                double vd, vh, vw;
                pb.map(d, h, w, vd, vh, vw);
                out.data[idx] = detail::inside(vd, vh, vw, v.shape)
                                    ? sample_trilinear(v, vd, vh, vw)
                                    : 0.0f;
            }
        }
    }
    return out;
}

LabelMap apply_transform(const LabelMap& m, const SimilarityTransform& t) {
    validate(m);
    const auto pb =
        detail::make_pullback(t, m.shape, m.spacing_mm, m.shape, m.spacing_mm);
    LabelMap out(m.shape, m.spacing_mm);
    std::size_t idx = 0;
    for (int d = 0; d < m.shape[0]; ++d) {
        for (int h = 0; h < m.shape[1]; ++h) {
            for (int w = 0; w < m.shape[2]; ++w, ++idx) {
                double vd, vh, vw;
                pb.map(d, h, w, vd, vh, vw);
                out.data[idx] =
                    sample_nearest(m, vd, vh, vw, LabelMap::kBackground);
            }
        }
    }
    return out;
}

void save_transform(const SimilarityTransform& t, const fs::path& path) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    json j;
    j["rotation"] = t.rotation;
    j["translation_mm"] = t.translation_mm;
    j["scale"] = t.scale;
    j["mode"] = to_string(t.mode);
    j["metric"] = to_string(t.metric);
    j["converged"] = t.converged;
    std::ofstream out(path);
    if (!out) {
        throw FormatError("cannot open for writing: " + path.string());
    }
    out << j.dump(2) << '\n';
}

SimilarityTransform load_transform(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("missing transform file: " + path.string());
    }
    json j;
    try {
        in >> j;
        SimilarityTransform t;
        t.rotation = j.at("rotation").get<std::array<double, 3>>();
        t.translation_mm = j.at("translation_mm").get<std::array<double, 3>>();
        t.scale = j.at("scale").get<std::array<double, 3>>();
        t.mode = reg_mode_from_string(j.at("mode").get<std::string>());
        t.metric = reg_metric_from_string(j.at("metric").get<std::string>());
        t.converged = j.at("converged").get<bool>();
        for (int a = 0; a < 3; ++a) {
            if (!std::isfinite(t.rotation[a]) ||
                !std::isfinite(t.translation_mm[a]) || !(t.scale[a] > 0.0)) {
                throw FormatError("non-finite or non-positive transform "
                                  "parameters in " +
                                  path.string());
            }
        }
        if (t.mode == RegMode::rigid6 &&
            (t.scale[0] != 1.0 || t.scale[1] != 1.0 || t.scale[2] != 1.0)) {
            throw FormatError("rigid transform with non-unit scale in " +
                              path.string());
        }
        return t;
    } catch (const json::exception& e) {
        throw FormatError("bad transform file " + path.string() + ": " +
                          e.what());
    }
}

} // namespace calvaria::preprocess
