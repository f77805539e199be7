#include "calvaria/models/tensor.hpp"

#include <algorithm>

#include "calvaria/core/errors.hpp"

namespace calvaria::models {

Tensor4 to_tensor(const Volume& v) {
    Tensor4 t(1, v.shape);
    std::copy(v.data.begin(), v.data.end(), t.data.begin());
    return t;
}

Volume to_volume(const Tensor4& t, const Spacing3& spacing_mm, Modality modality) {
    if (t.c < 1) {
        throw ShapeError("to_volume: tensor has no channels");
    }
    Volume v;
    v.shape = t.grid();
    v.spacing_mm = spacing_mm;
    v.modality = modality;
    v.data.assign(t.data.begin(), t.data.begin() + t.voxels());
    return v;
}

Tensor4 one_hot(const LabelMap& m) {
    Tensor4 t(LabelMap::kNumCodes, m.shape);
    const std::int64_t n = t.voxels();
    for (std::int64_t i = 0; i < n; ++i) {
        const std::uint8_t code = m.data[static_cast<std::size_t>(i)];
        if (code >= LabelMap::kNumCodes) {
            throw ArgumentError("one_hot: label code " + std::to_string(code) +
                                " outside the 9-code table");
        }
        t.data[static_cast<std::size_t>(code) * n + i] = 1.0f;
    }
    return t;
}

} // namespace calvaria::models
