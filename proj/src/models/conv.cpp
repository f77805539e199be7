#include "calvaria/models/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <cblas.h>

#include "calvaria/core/errors.hpp"

extern "C" void openblas_set_num_threads(int);

namespace calvaria::models {
namespace {

// The environment is single-core; threaded BLAS would only add
// nondeterministic reduction orders.
const bool kBlasSingleThread = [] {
    openblas_set_num_threads(1);
    return true;
}();

// im2col working buffer cap (floats). 8M floats = 32 MB.
constexpr std::int64_t kMaxColsFloats = 8 * 1024 * 1024;

int out_dim(int n, int stride) { return stride == 1 ? n : (n + 1) / 2; }

// Fills `cols` (K x nslab, row-major, K = cin*27) with the receptive fields
// of output depths [d0, d0+dn). Column order: (depth, height, width).
void im2col_slab(const Tensor4& x, int d0, int dn, int oh, int ow, int stride,
                 float* cols) {
    const std::int64_t nslab = static_cast<std::int64_t>(dn) * oh * ow;
    std::int64_t row = 0;
    for (int ci = 0; ci < x.c; ++ci) {
        const float* chan = x.data.data() + static_cast<std::size_t>(ci) * x.voxels();
        for (int kd = 0; kd < 3; ++kd) {
            for (int kh = 0; kh < 3; ++kh) {
                for (int kw = 0; kw < 3; ++kw, ++row) {
                    float* dst = cols + row * nslab;
                    for (int dd = 0; dd < dn; ++dd) {
                        const int id = (d0 + dd) * stride + kd - 1;
                        if (static_cast<unsigned>(id) >= static_cast<unsigned>(x.d)) {
                            std::memset(dst, 0, sizeof(float) * oh * ow);
                            dst += static_cast<std::int64_t>(oh) * ow;
                            continue;
                        }
                        for (int hh = 0; hh < oh; ++hh, dst += ow) {
                            const int ih = hh * stride + kh - 1;
                            if (static_cast<unsigned>(ih) >= static_cast<unsigned>(x.h)) {
                                std::memset(dst, 0, sizeof(float) * ow);
                                continue;
                            }
                            const float* src = chan + (static_cast<std::size_t>(id) * x.h + ih) * x.w;
                            for (int ww = 0; ww < ow; ++ww) {
                                const int iw = ww * stride + kw - 1;
                                dst[ww] = static_cast<unsigned>(iw) < static_cast<unsigned>(x.w)
                                              ? src[iw]
                                              : 0.0f;
                            }
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add transpose of im2col_slab: accumulates dcols into dx.
void col2im_slab(const float* dcols, int d0, int dn, int oh, int ow, int stride,
                 Tensor4& dx) {
    const std::int64_t nslab = static_cast<std::int64_t>(dn) * oh * ow;
    std::int64_t row = 0;
    for (int ci = 0; ci < dx.c; ++ci) {
        float* chan = dx.data.data() + static_cast<std::size_t>(ci) * dx.voxels();
        for (int kd = 0; kd < 3; ++kd) {
            for (int kh = 0; kh < 3; ++kh) {
                for (int kw = 0; kw < 3; ++kw, ++row) {
                    const float* src = dcols + row * nslab;
                    for (int dd = 0; dd < dn; ++dd) {
                        const int id = (d0 + dd) * stride + kd - 1;
                        if (static_cast<unsigned>(id) >= static_cast<unsigned>(dx.d)) {
                            src += static_cast<std::int64_t>(oh) * ow;
                            continue;
                        }
                        for (int hh = 0; hh < oh; ++hh, src += ow) {
                            const int ih = hh * stride + kh - 1;
                            if (static_cast<unsigned>(ih) >= static_cast<unsigned>(dx.h)) {
                                continue;
                            }
                            float* out = chan + (static_cast<std::size_t>(id) * dx.h + ih) * dx.w;
                            for (int ww = 0; ww < ow; ++ww) {
                                const int iw = ww * stride + kw - 1;
                                if (static_cast<unsigned>(iw) < static_cast<unsigned>(dx.w)) {
                                    out[iw] += src[ww];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

int slab_depth(int kdim, int od, int oh, int ow) {
    const std::int64_t per_depth = static_cast<std::int64_t>(kdim) * oh * ow;
    const std::int64_t dn = per_depth > 0 ? kMaxColsFloats / per_depth : od;
    return std::max<std::int64_t>(1, std::min<std::int64_t>(od, dn));
}

} // namespace

Conv3d::Conv3d(int cin, int cout, int stride, Rng& rng)
    : cin_(cin), cout_(cout), stride_(stride) {
    if (cin < 1 || cout < 1 || (stride != 1 && stride != 2)) {
        throw ArgumentError("Conv3d: channels must be >= 1 and stride 1 or 2");
    }
    const std::size_t k = static_cast<std::size_t>(cin) * 27;
    weight.resize(static_cast<std::size_t>(cout) * k);
    bias.assign(cout, 0.0f);
    grad_weight.assign(weight.size(), 0.0f);
    grad_bias.assign(bias.size(), 0.0f);
    const double he_sd = std::sqrt(2.0 / static_cast<double>(k));
    for (auto& w : weight) {
        w = static_cast<float>(rng.gaussian(0.0, he_sd));
    }
}

Tensor4 Conv3d::forward(const Tensor4& x) const {
    if (x.c != cin_) {
        throw ShapeError("Conv3d: input has " + std::to_string(x.c) + " channels, expected " +
                         std::to_string(cin_));
    }
    const int od = out_dim(x.d, stride_);
    const int oh = out_dim(x.h, stride_);
    const int ow = out_dim(x.w, stride_);
    Tensor4 y(cout_, od, oh, ow);

    const int kdim = cin_ * 27;
    const int chunk = slab_depth(kdim, od, oh, ow);
    std::vector<float> cols(static_cast<std::size_t>(kdim) * chunk * oh * ow);
    const std::int64_t y_row_stride = static_cast<std::int64_t>(od) * oh * ow;

    for (int d0 = 0; d0 < od; d0 += chunk) {
        const int dn = std::min(chunk, od - d0);
        const std::int64_t nslab = static_cast<std::int64_t>(dn) * oh * ow;
        im2col_slab(x, d0, dn, oh, ow, stride_, cols.data());
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, cout_,
                    static_cast<int>(nslab), kdim, 1.0f, weight.data(), kdim, cols.data(),
                    static_cast<int>(nslab), 0.0f,
                    y.data.data() + static_cast<std::int64_t>(d0) * oh * ow,
                    static_cast<int>(y_row_stride));
    }
    for (int co = 0; co < cout_; ++co) {
        const float b = bias[co];
        float* dst = y.data.data() + static_cast<std::size_t>(co) * y_row_stride;
        for (std::int64_t i = 0; i < y_row_stride; ++i) {
            dst[i] += b;
        }
    }
    return y;
}

Tensor4 Conv3d::input_gradient(const Shape3& in_grid, const Tensor4& dy) const {
    const int od = out_dim(in_grid[0], stride_);
    const int oh = out_dim(in_grid[1], stride_);
    const int ow = out_dim(in_grid[2], stride_);
    if (dy.c != cout_ || dy.d != od || dy.h != oh || dy.w != ow) {
        throw ShapeError("Conv3d::input_gradient: dy does not match the layer output");
    }
    Tensor4 dx(cin_, in_grid[0], in_grid[1], in_grid[2]);

    const int kdim = cin_ * 27;
    const int chunk = slab_depth(kdim, od, oh, ow);
    std::vector<float> dcols(static_cast<std::size_t>(kdim) * chunk * oh * ow);
    const std::int64_t dy_row_stride = static_cast<std::int64_t>(od) * oh * ow;

    for (int d0 = 0; d0 < od; d0 += chunk) {
        const int dn = std::min(chunk, od - d0);
        const std::int64_t nslab = static_cast<std::int64_t>(dn) * oh * ow;
        const float* dy_slab = dy.data.data() + static_cast<std::int64_t>(d0) * oh * ow;
        // dcols = W^T . dy_slab
        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, kdim, static_cast<int>(nslab),
                    cout_, 1.0f, weight.data(), kdim, dy_slab,
                    static_cast<int>(dy_row_stride), 0.0f, dcols.data(),
                    static_cast<int>(nslab));
        col2im_slab(dcols.data(), d0, dn, oh, ow, stride_, dx);
    }
    return dx;
}

Tensor4 Conv3d::backward(const Tensor4& x, const Tensor4& dy, bool accumulate_param_grads) {
    const int od = out_dim(x.d, stride_);
    const int oh = out_dim(x.h, stride_);
    const int ow = out_dim(x.w, stride_);
    if (x.c != cin_ || dy.c != cout_ || dy.d != od || dy.h != oh || dy.w != ow) {
        throw ShapeError("Conv3d::backward: tensor shapes do not match the layer");
    }
    if (!accumulate_param_grads) {
        return input_gradient(x.grid(), dy);
    }
    Tensor4 dx(cin_, x.d, x.h, x.w);

    const int kdim = cin_ * 27;
    const int chunk = slab_depth(kdim, od, oh, ow);
    std::vector<float> cols(static_cast<std::size_t>(kdim) * chunk * oh * ow);
    std::vector<float> dcols(cols.size());
    const std::int64_t dy_row_stride = static_cast<std::int64_t>(od) * oh * ow;

    for (int d0 = 0; d0 < od; d0 += chunk) {
        const int dn = std::min(chunk, od - d0);
        const std::int64_t nslab = static_cast<std::int64_t>(dn) * oh * ow;
        const float* dy_slab = dy.data.data() + static_cast<std::int64_t>(d0) * oh * ow;
        im2col_slab(x, d0, dn, oh, ow, stride_, cols.data());
        // grad_weight += dy_slab . cols^T
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, cout_, kdim,
                    static_cast<int>(nslab), 1.0f, dy_slab,
                    static_cast<int>(dy_row_stride), cols.data(), static_cast<int>(nslab),
                    1.0f, grad_weight.data(), kdim);
        // dcols = W^T . dy_slab
        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, kdim, static_cast<int>(nslab),
                    cout_, 1.0f, weight.data(), kdim, dy_slab,
                    static_cast<int>(dy_row_stride), 0.0f, dcols.data(),
                    static_cast<int>(nslab));
        col2im_slab(dcols.data(), d0, dn, oh, ow, stride_, dx);
    }

    for (int co = 0; co < cout_; ++co) {
        const float* src = dy.data.data() + static_cast<std::size_t>(co) * dy_row_stride;
        double sum = 0.0;
        for (std::int64_t i = 0; i < dy_row_stride; ++i) {
            sum += src[i];
        }
        grad_bias[co] += static_cast<float>(sum);
    }
    return dx;
}

Tensor4 activate(const Tensor4& x, Act act) {
    Tensor4 y = x;
    switch (act) {
    case Act::none:
        break;
    case Act::lrelu:
        for (auto& v : y.data) {
            v = v > 0.0f ? v : 0.2f * v;
        }
        break;
    case Act::sigmoid:
        for (auto& v : y.data) {
            v = 1.0f / (1.0f + std::exp(-v));
        }
        break;
    }
    return y;
}

Tensor4 activate_backward(const Tensor4& y, const Tensor4& dy, Act act) {
    Tensor4 dx = dy;
    switch (act) {
    case Act::none:
        break;
    case Act::lrelu:
        for (std::size_t i = 0; i < dx.data.size(); ++i) {
            if (y.data[i] <= 0.0f) {
                dx.data[i] *= 0.2f;
            }
        }
        break;
    case Act::sigmoid:
        for (std::size_t i = 0; i < dx.data.size(); ++i) {
            dx.data[i] *= y.data[i] * (1.0f - y.data[i]);
        }
        break;
    }
    return dx;
}

Tensor4 upsample2(const Tensor4& x) {
    Tensor4 y(x.c, x.d * 2, x.h * 2, x.w * 2);
    for (int c = 0; c < x.c; ++c) {
        for (int d = 0; d < y.d; ++d) {
            for (int h = 0; h < y.h; ++h) {
                const float* src = &x.data[x.index(c, d / 2, h / 2, 0)];
                float* dst = &y.data[y.index(c, d, h, 0)];
                for (int w = 0; w < y.w; ++w) {
                    dst[w] = src[w / 2];
                }
            }
        }
    }
    return y;
}

Tensor4 upsample2_backward(const Tensor4& dy) {
    if (dy.d % 2 || dy.h % 2 || dy.w % 2) {
        throw ShapeError("upsample2_backward: dimensions must be even");
    }
    Tensor4 dx(dy.c, dy.d / 2, dy.h / 2, dy.w / 2);
    for (int c = 0; c < dy.c; ++c) {
        for (int d = 0; d < dy.d; ++d) {
            for (int h = 0; h < dy.h; ++h) {
                const float* src = &dy.data[dy.index(c, d, h, 0)];
                float* dst = &dx.data[dx.index(c, d / 2, h / 2, 0)];
                for (int w = 0; w < dy.w; ++w) {
                    dst[w / 2] += src[w];
                }
            }
        }
    }
    return dx;
}

Tensor4 avg_pool2(const Tensor4& x) {
    if (x.d % 2 || x.h % 2 || x.w % 2) {
        throw ShapeError("avg_pool2: dimensions must be even");
    }
    Tensor4 y(x.c, x.d / 2, x.h / 2, x.w / 2);
    for (int c = 0; c < x.c; ++c) {
        for (int d = 0; d < y.d; ++d) {
            for (int h = 0; h < y.h; ++h) {
                for (int w = 0; w < y.w; ++w) {
                    float sum = 0.0f;
                    for (int dd = 0; dd < 2; ++dd) {
                        for (int hh = 0; hh < 2; ++hh) {
                            const float* src = &x.data[x.index(c, 2 * d + dd, 2 * h + hh, 2 * w)];
                            sum += src[0] + src[1];
                        }
                    }
                    y.at(c, d, h, w) = sum * 0.125f;
                }
            }
        }
    }
    return y;
}

Tensor4 avg_pool2_backward(const Tensor4& dy) {
    Tensor4 dx(dy.c, dy.d * 2, dy.h * 2, dy.w * 2);
    for (int c = 0; c < dy.c; ++c) {
        for (int d = 0; d < dx.d; ++d) {
            for (int h = 0; h < dx.h; ++h) {
                const float* src = &dy.data[dy.index(c, d / 2, h / 2, 0)];
                float* dst = &dx.data[dx.index(c, d, h, 0)];
                for (int w = 0; w < dx.w; ++w) {
                    dst[w] = 0.125f * src[w / 2];
                }
            }
        }
    }
    return dx;
}

Tensor4 Sequential::forward(const Tensor4& x, std::vector<BlockCache>* tape) const {
    if (tape) {
        tape->clear();
        tape->reserve(blocks.size());
    }
    Tensor4 cur = x;
    for (const Block& b : blocks) {
        Tensor4 conv_in = b.upsample_before ? upsample2(cur) : std::move(cur);
        Tensor4 out = activate(b.conv.forward(conv_in), b.act);
        if (tape) {
            tape->push_back(BlockCache{std::move(conv_in), std::move(out)});
            cur = tape->back().out;
        } else {
            cur = std::move(out);
        }
    }
    return cur;
}

Tensor4 Sequential::backward(const std::vector<BlockCache>& tape, const Tensor4& dy,
                             bool accumulate_param_grads) {
    if (tape.size() != blocks.size()) {
        throw StateError("Sequential::backward: tape does not match the block chain");
    }
    Tensor4 grad = dy;
    for (int i = static_cast<int>(blocks.size()) - 1; i >= 0; --i) {
        Block& b = blocks[static_cast<std::size_t>(i)];
        const BlockCache& cache = tape[static_cast<std::size_t>(i)];
        grad = activate_backward(cache.out, grad, b.act);
        grad = b.conv.backward(cache.conv_in, grad, accumulate_param_grads);
        if (b.upsample_before) {
            grad = upsample2_backward(grad);
        }
    }
    return grad;
}

Tensor4 sequential_input_gradient(const Sequential& s, const std::vector<BlockCache>& tape,
                                  const Tensor4& dy) {
    if (tape.size() != s.blocks.size()) {
        throw StateError("sequential_input_gradient: tape does not match the block chain");
    }
    Tensor4 grad = dy;
    for (int i = static_cast<int>(s.blocks.size()) - 1; i >= 0; --i) {
        const Block& b = s.blocks[static_cast<std::size_t>(i)];
        const BlockCache& cache = tape[static_cast<std::size_t>(i)];
        grad = activate_backward(cache.out, grad, b.act);
        grad = b.conv.input_gradient(cache.conv_in.grid(), grad);
        if (b.upsample_before) {
            grad = upsample2_backward(grad);
        }
    }
    return grad;
}

void collect_params(Conv3d& c, const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back(ParamRef{prefix + ".w", &c.weight, &c.grad_weight});
    out.push_back(ParamRef{prefix + ".b", &c.bias, &c.grad_bias});
}

void collect_params(Sequential& s, const std::string& prefix, std::vector<ParamRef>& out) {
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
        collect_params(s.blocks[i].conv, prefix + std::to_string(i), out);
    }
}

void zero_grads(const std::vector<ParamRef>& params) {
    for (const ParamRef& p : params) {
        std::fill(p.grad->begin(), p.grad->end(), 0.0f);
    }
}

void scale_grads(const std::vector<ParamRef>& params, float factor) {
    for (const ParamRef& p : params) {
        for (float& g : *p.grad) {
            g *= factor;
        }
    }
}

void Adam::step(const std::vector<ParamRef>& params) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].value->size(), 0.0f);
            v_[i].assign(params[i].value->size(), 0.0f);
        }
    }
    if (m_.size() != params.size()) {
        throw StateError("Adam: parameter registry changed size mid-run");
    }
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        std::vector<float>& w = *params[i].value;
        const std::vector<float>& g = *params[i].grad;
        if (m_[i].size() != w.size()) {
            throw StateError("Adam: parameter array changed size mid-run");
        }
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g[j];
            const double mj = kBeta1 * m_[i][j] + (1.0 - kBeta1) * gj;
            const double vj = kBeta2 * v_[i][j] + (1.0 - kBeta2) * gj * gj;
            m_[i][j] = static_cast<float>(mj);
            v_[i][j] = static_cast<float>(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            w[j] = static_cast<float>(w[j] - lr_ * mhat / (std::sqrt(vhat) + kEps));
        }
    }
}

void Adam::reset() {
    t_ = 0;
    m_.clear();
    v_.clear();
}

} // namespace calvaria::models
