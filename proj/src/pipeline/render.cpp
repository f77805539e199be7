#include "render.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "calvaria/core/errors.hpp"

namespace calvaria::pipeline::detail {

namespace {

void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
    b.push_back(static_cast<std::uint8_t>(v & 0xff));
    b.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

/// (x, y) of a slice pixel -> volume indices for the chosen plane.
struct PlaneView {
    int width = 0;
    int height = 0;
    int plane = 0;
    int index = 0;

    PlaneView(const Shape3& shape, int plane_, int index_) : plane(plane_) {
        switch (plane) {
        case 0: width = shape[2]; height = shape[1]; break; // axial: (w, h)
        case 1: width = shape[2]; height = shape[0]; break; // coronal: (w, d)
        case 2: width = shape[1]; height = shape[0]; break; // sagittal: (h, d)
        default: throw ArgumentError("render: plane must be 0, 1, or 2");
        }
        const int extent = plane == 0 ? shape[0] : (plane == 1 ? shape[1] : shape[2]);
        index = index_ < 0 ? extent / 2 : index_;
        if (index < 0 || index >= extent) {
            throw ArgumentError("render: slice index out of range");
        }
    }

    void voxel(int x, int y, int& d, int& h, int& w) const {
        switch (plane) {
        case 0: d = index; h = y; w = x; break;
        case 1: h = index; d = y; w = x; break;
        default: w = index; d = y; h = x; break;
        }
    }
};

} // namespace

void save_bmp(const Image& img, const std::filesystem::path& path) {
    if (img.width <= 0 || img.height <= 0) {
        throw ArgumentError("render: empty image");
    }
    const int row_bytes = ((img.width * 3 + 3) / 4) * 4;
    const std::uint32_t pixel_bytes = static_cast<std::uint32_t>(row_bytes) * img.height;
    std::vector<std::uint8_t> out;
    out.reserve(54 + pixel_bytes);
    // BITMAPFILEHEADER
    out.push_back('B');
    out.push_back('M');
    put_u32(out, 54 + pixel_bytes);
    put_u16(out, 0);
    put_u16(out, 0);
    put_u32(out, 54);
    // BITMAPINFOHEADER
    put_u32(out, 40);
    put_u32(out, static_cast<std::uint32_t>(img.width));
    put_u32(out, static_cast<std::uint32_t>(img.height));
    put_u16(out, 1);
    put_u16(out, 24);
    put_u32(out, 0); // BI_RGB
    put_u32(out, pixel_bytes);
    put_u32(out, 2835); // 72 dpi
    put_u32(out, 2835);
    put_u32(out, 0);
    put_u32(out, 0);
    for (int y = img.height - 1; y >= 0; --y) { // bottom-up rows
        const std::size_t row_start = out.size();
        for (int x = 0; x < img.width; ++x) {
            const Rgb& p = img.at(x, y);
            out.push_back(p.b);
            out.push_back(p.g);
            out.push_back(p.r);
        }
        while (out.size() - row_start < static_cast<std::size_t>(row_bytes)) {
            out.push_back(0);
        }
    }
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw StateError("render: cannot write " + path.string());
    }
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

Image gray_slice(const Volume& v, int plane, int index) {
    const PlaneView view(v.shape, plane, index);
    Image img(view.width, view.height);
    for (int y = 0; y < view.height; ++y) {
        for (int x = 0; x < view.width; ++x) {
            int d = 0, h = 0, w = 0;
            view.voxel(x, y, d, h, w);
            const float g = std::clamp(v.at(d, h, w), 0.0f, 1.0f);
            const auto q = static_cast<std::uint8_t>(std::lround(g * 255.0f));
            img.at(x, y) = {q, q, q};
        }
    }
    return img;
}

void overlay_heat(Image& img, const models::ProbabilityMap& p, int channel, int plane, int index,
                  Rgb color, float threshold) {
    const PlaneView view(p.probs.grid(), plane, index);
    if (view.width != img.width || view.height != img.height) {
        throw ShapeError("render: overlay grid does not match the image");
    }
    for (int y = 0; y < view.height; ++y) {
        for (int x = 0; x < view.width; ++x) {
            int d = 0, h = 0, w = 0;
            view.voxel(x, y, d, h, w);
            const float a = p.probs.at(channel, d, h, w);
            if (a < threshold) {
                continue;
            }
            Rgb& px = img.at(x, y);
            const auto blend = [a](std::uint8_t base, std::uint8_t over) {
                return static_cast<std::uint8_t>(
                    std::lround((1.0f - a) * base + a * over));
            };
            px = {blend(px.r, color.r), blend(px.g, color.g), blend(px.b, color.b)};
        }
    }
}

void overlay_label(Image& img, const LabelMap& m, int label, int plane, int index, Rgb color) {
    const PlaneView view(m.shape, plane, index);
    if (view.width != img.width || view.height != img.height) {
        throw ShapeError("render: overlay grid does not match the image");
    }
    for (int y = 0; y < view.height; ++y) {
        for (int x = 0; x < view.width; ++x) {
            int d = 0, h = 0, w = 0;
            view.voxel(x, y, d, h, w);
            if (m.at(d, h, w) == label) {
                img.at(x, y) = color;
            }
        }
    }
}

Image upscale(const Image& img, int factor) {
    if (factor <= 1) {
        return img;
    }
    Image out(img.width * factor, img.height * factor);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            out.at(x, y) = img.at(x / factor, y / factor);
        }
    }
    return out;
}

Image compose_grid(const std::vector<std::vector<Image>>& rows, int pad) {
    const Rgb bg{24, 24, 24};
    int total_h = pad;
    int total_w = 0;
    for (const auto& row : rows) {
        int row_h = 0, row_w = pad;
        for (const Image& cell : row) {
            row_h = std::max(row_h, cell.height);
            row_w += cell.width + pad;
        }
        total_h += row_h + pad;
        total_w = std::max(total_w, row_w);
    }
    Image out(total_w, total_h, bg);
    int y0 = pad;
    for (const auto& row : rows) {
        int row_h = 0;
        int x0 = pad;
        for (const Image& cell : row) {
            for (int y = 0; y < cell.height; ++y) {
                for (int x = 0; x < cell.width; ++x) {
                    out.at(x0 + x, y0 + y) = cell.at(x, y);
                }
            }
            row_h = std::max(row_h, cell.height);
            x0 += cell.width + pad;
        }
        y0 += row_h + pad;
    }
    return out;
}

} // namespace calvaria::pipeline::detail
