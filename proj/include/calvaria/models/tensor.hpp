#pragma once

#include <cstdint>
#include <vector>

#include "calvaria/core/volume.hpp"

namespace calvaria::models {

/// Dense float tensor in (channel, depth, height, width) order, channel
/// slowest. The channel-major layout makes each channel a contiguous
/// (D*H*W)-long row of the im2col GEMM.
struct Tensor4 {
    int c = 0, d = 0, h = 0, w = 0;
    std::vector<float> data;

    Tensor4() = default;
    Tensor4(int c_, int d_, int h_, int w_, float fill = 0.0f)
        : c(c_), d(d_), h(h_), w(w_),
          data(static_cast<std::size_t>(c_) * d_ * h_ * w_, fill) {}
    Tensor4(int c_, const Shape3& s, float fill = 0.0f)
        : Tensor4(c_, s[0], s[1], s[2], fill) {}

    std::int64_t voxels() const { return static_cast<std::int64_t>(d) * h * w; }
    std::int64_t size() const { return voxels() * c; }
    Shape3 grid() const { return {d, h, w}; }

    std::size_t index(int cc, int dd, int hh, int ww) const {
        return ((static_cast<std::size_t>(cc) * d + dd) * h + hh) * w + ww;
    }
    float& at(int cc, int dd, int hh, int ww) { return data[index(cc, dd, hh, ww)]; }
    float at(int cc, int dd, int hh, int ww) const { return data[index(cc, dd, hh, ww)]; }

    bool same_shape(const Tensor4& o) const {
        return c == o.c && d == o.d && h == o.h && w == o.w;
    }
};

/// Single-channel tensor view of a volume's data (copies).
Tensor4 to_tensor(const Volume& v);

/// Channel 0 of a tensor as a volume on the given grid metadata.
Volume to_volume(const Tensor4& t, const Spacing3& spacing_mm, Modality modality);

/// One-hot encoding over the fixed 9-code label table.
Tensor4 one_hot(const LabelMap& m);

} // namespace calvaria::models
