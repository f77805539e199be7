#include <cmath>
#include <utility>

#include "calvaria/core/errors.hpp"
#include "calvaria/models/models.hpp"

namespace calvaria::models {
namespace {

// Distinct init streams per network so generator/discriminator/segmentation
// weights are independent even under one config seed.
constexpr std::uint64_t kGeneratorStream = 101;
constexpr std::uint64_t kDiscriminatorStream = 202;
constexpr std::uint64_t kSegmentationStream = 303;

void check_divisible(const Shape3& shape, int levels, const char* what) {
    const int factor = 1 << levels;
    for (int axis = 0; axis < 3; ++axis) {
        if (shape[axis] % factor != 0) {
            throw ShapeError(std::string(what) + ": grid " + std::to_string(shape[0]) + "x" +
                             std::to_string(shape[1]) + "x" + std::to_string(shape[2]) +
                             " is not divisible by 2^" + std::to_string(levels));
        }
    }
}

// Shared encoder trunk: stem conv, then per level a stride-2 halving conv
// followed by a same-resolution mixing conv, channels doubling per level.
Sequential make_encoder_trunk(int cin, int base, int levels, Rng& rng) {
    Sequential s;
    s.blocks.push_back(Block{false, Conv3d(cin, base, 1, rng), Act::lrelu});
    int ch = base;
    for (int l = 0; l < levels; ++l) {
        s.blocks.push_back(Block{false, Conv3d(ch, ch * 2, 2, rng), Act::lrelu});
        s.blocks.push_back(Block{false, Conv3d(ch * 2, ch * 2, 1, rng), Act::lrelu});
        ch *= 2;
    }
    return s;
}

// Shared decoder: latent stem, a mixing conv, one nearest-upsample +
// channel-halving conv per level, and an output head.
Sequential make_decoder(int latent, int base, int levels, int cout, Act out_act, Rng& rng) {
    Sequential s;
    int ch = base << levels;
    s.blocks.push_back(Block{false, Conv3d(latent, ch, 1, rng), Act::lrelu});
    s.blocks.push_back(Block{false, Conv3d(ch, ch, 1, rng), Act::lrelu});
    for (int l = levels; l >= 1; --l) {
        s.blocks.push_back(Block{true, Conv3d(ch, ch / 2, 1, rng), Act::lrelu});
        ch /= 2;
    }
    s.blocks.push_back(Block{false, Conv3d(ch, cout, 1, rng), out_act});
    return s;
}

Tensor4 clamp_log_variance(Tensor4 lv) {
    for (float& v : lv.data) {
        v = std::min(kLogVarMax, std::max(kLogVarMin, v));
    }
    return lv;
}

} // namespace

void validate(const NetworkConfig& cfg) {
    if (cfg.base_channels < 1 || cfg.latent_channels < 1) {
        throw ConfigError("NetworkConfig: channel counts must be >= 1");
    }
    if (cfg.downsampling_levels < 2) {
        throw ConfigError("NetworkConfig: downsampling_levels must be >= 2");
    }
    if (cfg.discriminator_levels < 1) {
        throw ConfigError("NetworkConfig: discriminator_levels must be >= 1");
    }
    const double lambdas[] = {cfg.lambda_rec,  cfg.lambda_adv, cfg.lambda_kl,
                              cfg.lambda_perc, cfg.lambda_dicefocal, cfg.lambda_hd};
    for (const double l : lambdas) {
        if (!(l >= 0.0) || !std::isfinite(l)) {
            throw ConfigError("NetworkConfig: loss weights must be finite and >= 0");
        }
    }
    if (!(cfg.lambda_rec > 0.0)) {
        throw ConfigError("NetworkConfig: lambda_rec must be > 0");
    }
    if (!(cfg.focal_gamma >= 0.0) || !std::isfinite(cfg.focal_gamma)) {
        throw ConfigError("NetworkConfig: focal_gamma must be finite and >= 0");
    }
}

// ---------------------------------------------------------------------------
// FrozenFeatures
// ---------------------------------------------------------------------------

namespace {

constexpr double kFrozenLrelu = 0.2;

Shape3 frozen_out_grid(const Shape3& in) {
    return {(in[0] + 1) / 2, (in[1] + 1) / 2, (in[2] + 1) / 2};
}

std::size_t grid_count(const Shape3& g) {
    return static_cast<std::size_t>(g[0]) * static_cast<std::size_t>(g[1]) *
           static_cast<std::size_t>(g[2]);
}

// Direct stride-2, pad-1, 3x3x3 correlation followed by LeakyReLU, all in
// double. The stack is small enough that plain loops are fast.
std::vector<double> frozen_layer_forward(const std::vector<double>& x, const Shape3& in,
                                         int cin, int cout, const std::vector<double>& w,
                                         const std::vector<double>& b) {
    const Shape3 out = frozen_out_grid(in);
    const std::size_t in_vox = grid_count(in);
    const std::size_t out_vox = grid_count(out);
    std::vector<double> y(static_cast<std::size_t>(cout) * out_vox);
    for (int co = 0; co < cout; ++co) {
        const double* wc = w.data() + static_cast<std::size_t>(co) * cin * 27;
        double* yc = y.data() + static_cast<std::size_t>(co) * out_vox;
        for (int od = 0; od < out[0]; ++od) {
            for (int oh = 0; oh < out[1]; ++oh) {
                for (int ow = 0; ow < out[2]; ++ow) {
                    double acc = b[static_cast<std::size_t>(co)];
                    for (int ci = 0; ci < cin; ++ci) {
                        const double* xc = x.data() + static_cast<std::size_t>(ci) * in_vox;
                        const double* wk = wc + static_cast<std::size_t>(ci) * 27;
                        for (int kd = 0; kd < 3; ++kd) {
                            const int id = od * 2 + kd - 1;
                            if (id < 0 || id >= in[0]) continue;
                            for (int kh = 0; kh < 3; ++kh) {
                                const int ih = oh * 2 + kh - 1;
                                if (ih < 0 || ih >= in[1]) continue;
                                for (int kw = 0; kw < 3; ++kw) {
                                    const int iw = ow * 2 + kw - 1;
                                    if (iw < 0 || iw >= in[2]) continue;
                                    acc += wk[(kd * 3 + kh) * 3 + kw] *
                                           xc[(static_cast<std::size_t>(id) * in[1] + ih) * in[2] + iw];
                                }
                            }
                        }
                    }
                    const std::size_t oi =
                        (static_cast<std::size_t>(od) * out[1] + oh) * out[2] + ow;
                    yc[oi] = acc > 0.0 ? acc : kFrozenLrelu * acc;
                }
            }
        }
    }
    return y;
}

// Transpose of frozen_layer_forward's correlation: scatter dy back onto the
// input grid (the LeakyReLU backward happens at the caller using the
// post-activation sign).
std::vector<double> frozen_layer_input_grad(const std::vector<double>& dy, const Shape3& in,
                                            int cin, int cout, const std::vector<double>& w) {
    const Shape3 out = frozen_out_grid(in);
    const std::size_t in_vox = grid_count(in);
    const std::size_t out_vox = grid_count(out);
    std::vector<double> dx(static_cast<std::size_t>(cin) * in_vox, 0.0);
    for (int co = 0; co < cout; ++co) {
        const double* wc = w.data() + static_cast<std::size_t>(co) * cin * 27;
        const double* dyc = dy.data() + static_cast<std::size_t>(co) * out_vox;
        for (int od = 0; od < out[0]; ++od) {
            for (int oh = 0; oh < out[1]; ++oh) {
                for (int ow = 0; ow < out[2]; ++ow) {
                    const double g =
                        dyc[(static_cast<std::size_t>(od) * out[1] + oh) * out[2] + ow];
                    if (g == 0.0) continue;
                    for (int ci = 0; ci < cin; ++ci) {
                        double* xc = dx.data() + static_cast<std::size_t>(ci) * in_vox;
                        const double* wk = wc + static_cast<std::size_t>(ci) * 27;
                        for (int kd = 0; kd < 3; ++kd) {
                            const int id = od * 2 + kd - 1;
                            if (id < 0 || id >= in[0]) continue;
                            for (int kh = 0; kh < 3; ++kh) {
                                const int ih = oh * 2 + kh - 1;
                                if (ih < 0 || ih >= in[1]) continue;
                                for (int kw = 0; kw < 3; ++kw) {
                                    const int iw = ow * 2 + kw - 1;
                                    if (iw < 0 || iw >= in[2]) continue;
                                    xc[(static_cast<std::size_t>(id) * in[1] + ih) * in[2] + iw] +=
                                        wk[(kd * 3 + kh) * 3 + kw] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    return dx;
}

} // namespace

FrozenFeatures::FrozenFeatures(std::uint64_t seed) : seed_(seed) {
    Rng rng(seed);
    int ch = 4;
    int cin = 1;
    for (int l = 0; l < kLayers; ++l) {
        // Draw through Conv3d so the weights follow the shared He-init
        // stream, then promote them to double for the frozen engine.
        Conv3d proto(cin, ch, 2, rng);
        Layer& L = layers_[static_cast<std::size_t>(l)];
        L.cin = cin;
        L.cout = ch;
        L.w.assign(proto.weight.begin(), proto.weight.end());
        L.b.assign(proto.bias.begin(), proto.bias.end());
        cin = ch;
        ch *= 2;
    }
}

std::vector<std::vector<double>> FrozenFeatures::run(const std::vector<double>& x,
                                                     const Shape3& grid,
                                                     std::vector<Shape3>& grids) const {
    std::vector<std::vector<double>> feats;
    feats.reserve(layers_.size());
    grids.clear();
    const std::vector<double>* cur = &x;
    Shape3 g = grid;
    for (const Layer& L : layers_) {
        feats.push_back(frozen_layer_forward(*cur, g, L.cin, L.cout, L.w, L.b));
        g = frozen_out_grid(g);
        grids.push_back(g);
        cur = &feats.back();
    }
    return feats;
}

std::vector<Tensor4> FrozenFeatures::features(const Tensor4& x) const {
    if (x.c != 1) {
        throw ShapeError("FrozenFeatures: expected a single-channel tensor");
    }
    std::vector<double> xd(x.data.begin(), x.data.end());
    std::vector<Shape3> grids;
    const std::vector<std::vector<double>> feats = run(xd, x.grid(), grids);
    std::vector<Tensor4> out;
    out.reserve(feats.size());
    for (std::size_t l = 0; l < feats.size(); ++l) {
        Tensor4 t(layers_[l].cout, grids[l]);
        for (std::size_t i = 0; i < feats[l].size(); ++i) {
            t.data[i] = static_cast<float>(feats[l][i]);
        }
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<Tensor4> FrozenFeatures::features(const Volume& v) const {
    return features(to_tensor(v));
}

double FrozenFeatures::perceptual_loss(const Volume& a, const Volume& b, Tensor4* grad_a) const {
    if (a.shape != b.shape) {
        throw ShapeError("perceptual_loss: volume shapes differ");
    }
    std::vector<double> xa(a.data.begin(), a.data.end());
    std::vector<double> xb(b.data.begin(), b.data.end());
    std::vector<Shape3> grids;
    const std::vector<std::vector<double>> fa = run(xa, a.shape, grids);
    const std::vector<std::vector<double>> fb = run(xb, b.shape, grids);

    const double inv_layers = 1.0 / static_cast<double>(layers_.size());
    double loss = 0.0;
    std::vector<std::vector<double>> layer_grads(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const std::vector<double>& pa = fa[l];
        const std::vector<double>& pb = fb[l];
        double acc = 0.0;
        if (grad_a) {
            layer_grads[l].resize(pa.size());
        }
        const double gscale = 2.0 * inv_layers / static_cast<double>(pa.size());
        for (std::size_t i = 0; i < pa.size(); ++i) {
            const double d = pa[i] - pb[i];
            acc += d * d;
            if (grad_a) {
                layer_grads[l][i] = gscale * d;
            }
        }
        loss += inv_layers * acc / static_cast<double>(pa.size());
    }

    if (grad_a) {
        // Every layer's gradient flows back through the stack; layer l's
        // contribution joins the carried gradient at block l's output.
        std::vector<double> carried = std::move(layer_grads.back());
        for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i) {
            const Layer& L = layers_[static_cast<std::size_t>(i)];
            const std::vector<double>& post = fa[static_cast<std::size_t>(i)];
            // LeakyReLU backward from the post-activation sign.
            for (std::size_t j = 0; j < carried.size(); ++j) {
                if (post[j] <= 0.0) {
                    carried[j] *= kFrozenLrelu;
                }
            }
            const Shape3 in_grid = i == 0 ? a.shape : grids[static_cast<std::size_t>(i) - 1];
            std::vector<double> g = frozen_layer_input_grad(carried, in_grid, L.cin, L.cout, L.w);
            if (i > 0) {
                carried = std::move(layer_grads[static_cast<std::size_t>(i) - 1]);
                for (std::size_t j = 0; j < carried.size(); ++j) {
                    carried[j] += g[j];
                }
            } else {
                carried = std::move(g);
            }
        }
        *grad_a = Tensor4(1, a.shape);
        for (std::size_t i = 0; i < carried.size(); ++i) {
            grad_a->data[i] = static_cast<float>(carried[i]);
        }
    }
    return loss;
}

std::vector<float> FrozenFeatures::descriptor(const Tensor4& x) const {
    if (x.c != 1) {
        throw ShapeError("FrozenFeatures: expected a single-channel tensor");
    }
    std::vector<double> xd(x.data.begin(), x.data.end());
    std::vector<Shape3> grids;
    const std::vector<std::vector<double>> feats = run(xd, x.grid(), grids);
    const std::vector<double>& last = feats.back();
    const int cout = layers_.back().cout;
    const std::size_t n = grid_count(grids.back());
    std::vector<float> out(static_cast<std::size_t>(cout));
    for (int c = 0; c < cout; ++c) {
        double acc = 0.0;
        const double* src = last.data() + static_cast<std::size_t>(c) * n;
        for (std::size_t i = 0; i < n; ++i) {
            acc += src[i];
        }
        out[static_cast<std::size_t>(c)] = static_cast<float>(acc / static_cast<double>(n));
    }
    return out;
}

std::vector<float> FrozenFeatures::descriptor(const Volume& v) const {
    return descriptor(to_tensor(v));
}

// ---------------------------------------------------------------------------
// SynthesisVae
// ---------------------------------------------------------------------------

SynthesisVae::SynthesisVae(const NetworkConfig& cfg) : cfg_(cfg) {
    validate(cfg);
    Rng rng(Rng::derive_seed(cfg.seed, kGeneratorStream));
    encoder_trunk = make_encoder_trunk(1, cfg.base_channels, cfg.downsampling_levels, rng);
    const int bottom = cfg.base_channels << cfg.downsampling_levels;
    mean_head = Conv3d(bottom, cfg.latent_channels, 1, rng);
    log_variance_head = Conv3d(bottom, cfg.latent_channels, 1, rng);
    decoder = make_decoder(cfg.latent_channels, cfg.base_channels, cfg.downsampling_levels, 1,
                           Act::sigmoid, rng);
}

LatentCode SynthesisVae::encode(const Volume& v) const {
    calvaria::validate(v);
    check_divisible(v.shape, cfg_.downsampling_levels, "encode");
    const Tensor4 t = encoder_trunk.forward(to_tensor(v));
    LatentCode z;
    z.mean = mean_head.forward(t);
    z.log_variance = clamp_log_variance(log_variance_head.forward(t));
    return z;
}

Volume SynthesisVae::decode(const Tensor4& z, const Spacing3& out_spacing_mm) const {
    if (z.c != cfg_.latent_channels) {
        throw ShapeError("decode: latent has " + std::to_string(z.c) + " channels, expected " +
                         std::to_string(cfg_.latent_channels));
    }
    const Tensor4 y = decoder.forward(z);
    return to_volume(y, out_spacing_mm, Modality::SCT);
}

Volume SynthesisVae::synthesize(const Volume& mri, bool deterministic, Rng* rng) const {
    if (!trained_) {
        throw StateError("synthesize: no trained weights loaded");
    }
    LatentCode code = encode(mri);
    Tensor4 z = std::move(code.mean);
    if (!deterministic) {
        Rng local(Rng::derive_seed(cfg_.seed, 0xA11CE));
        Rng& gen = rng ? *rng : local;
        for (std::size_t i = 0; i < z.data.size(); ++i) {
            const double sd = std::exp(0.5 * static_cast<double>(code.log_variance.data[i]));
            z.data[i] = static_cast<float>(z.data[i] + sd * gen.gaussian());
        }
    }
    return decode(z, mri.spacing_mm);
}

std::vector<ParamRef> SynthesisVae::params(const std::string& prefix) {
    std::vector<ParamRef> out;
    collect_params(encoder_trunk, prefix + "enc.", out);
    collect_params(mean_head, prefix + "mu", out);
    collect_params(log_variance_head, prefix + "lv", out);
    collect_params(decoder, prefix + "dec.", out);
    return out;
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

Discriminator::Discriminator(const NetworkConfig& cfg) : cfg_(cfg) {
    validate(cfg);
    Rng rng(Rng::derive_seed(cfg.seed, kDiscriminatorStream));
    const int base = cfg.base_channels;
    for (int s = 0; s < cfg.discriminator_levels; ++s) {
        Sequential scale;
        scale.blocks.push_back(Block{false, Conv3d(1, base, 2, rng), Act::lrelu});
        scale.blocks.push_back(Block{false, Conv3d(base, base * 2, 2, rng), Act::lrelu});
        scale.blocks.push_back(Block{false, Conv3d(base * 2, 1, 1, rng), Act::none});
        scales.push_back(std::move(scale));
    }
}

std::vector<Tensor4> Discriminator::scores(const Volume& v) const {
    std::vector<Tensor4> out;
    out.reserve(scales.size());
    Tensor4 x = to_tensor(v);
    for (std::size_t s = 0; s < scales.size(); ++s) {
        if (s > 0) {
            x = avg_pool2(x);
        }
        out.push_back(scales[s].forward(x));
    }
    return out;
}

double Discriminator::training_loss(const Volume& real, const Volume& fake) const {
    if (real.shape != fake.shape) {
        throw ShapeError("discriminator: real and fake shapes differ");
    }
    return lsgan_discriminator_loss(scores(real), scores(fake));
}

double Discriminator::generator_loss(const Volume& fake, Tensor4* grad_fake) const {
    Tensor4 x = to_tensor(fake);
    const double inv_scales = 1.0 / static_cast<double>(scales.size());
    double loss = 0.0;
    Tensor4 dx_total;
    if (grad_fake) {
        dx_total = Tensor4(1, x.d, x.h, x.w);
    }
    Tensor4 cur = x;
    for (std::size_t s = 0; s < scales.size(); ++s) {
        if (s > 0) {
            cur = avg_pool2(cur);
        }
        std::vector<BlockCache> tape;
        const Tensor4 score = scales[s].forward(cur, grad_fake ? &tape : nullptr);
        double term = 0.0;
        for (const float f : score.data) {
            term += (static_cast<double>(f) - 1.0) * (static_cast<double>(f) - 1.0);
        }
        const double inv_n = 1.0 / static_cast<double>(score.data.size());
        loss += term * inv_n * inv_scales;
        if (grad_fake) {
            Tensor4 dscore(score.c, score.d, score.h, score.w);
            for (std::size_t i = 0; i < score.data.size(); ++i) {
                dscore.data[i] = static_cast<float>(2.0 * (static_cast<double>(score.data[i]) - 1.0) *
                                                    inv_n * inv_scales);
            }
            Tensor4 dx = sequential_input_gradient(scales[s], tape, dscore);
            // undo the box-downsampling chain back to full resolution
            for (std::size_t k = 0; k < s; ++k) {
                dx = avg_pool2_backward(dx);
            }
            for (std::size_t i = 0; i < dx_total.data.size(); ++i) {
                dx_total.data[i] += dx.data[i];
            }
        }
    }
    if (grad_fake) {
        *grad_fake = std::move(dx_total);
    }
    return loss;
}

std::vector<ParamRef> Discriminator::params(const std::string& prefix) {
    std::vector<ParamRef> out;
    for (std::size_t s = 0; s < scales.size(); ++s) {
        collect_params(scales[s], prefix + "s" + std::to_string(s) + ".", out);
    }
    return out;
}

// ---------------------------------------------------------------------------
// SegmentationNet
// ---------------------------------------------------------------------------

SegmentationNet::SegmentationNet(const NetworkConfig& cfg) : cfg_(cfg) {
    validate(cfg);
    Rng rng(Rng::derive_seed(cfg.seed, kSegmentationStream));
    encoder_trunk = make_encoder_trunk(1 + LabelMap::kNumCodes, cfg.base_channels,
                                       cfg.downsampling_levels, rng);
    const int bottom = cfg.base_channels << cfg.downsampling_levels;
    mean_head = Conv3d(bottom, cfg.latent_channels, 1, rng);
    decoder = make_decoder(cfg.latent_channels, cfg.base_channels, cfg.downsampling_levels,
                           LabelMap::kNumCodes, Act::none, rng);
}

ProbabilityMap SegmentationNet::segment(const Volume& sct, const LabelMap& atlas) const {
    calvaria::validate(sct);
    if (sct.shape != atlas.shape) {
        throw ArgumentError("segment: sct and atlas grids differ");
    }
    check_divisible(sct.shape, cfg_.downsampling_levels, "segment");

    Tensor4 x(1 + LabelMap::kNumCodes, sct.shape);
    const std::int64_t n = x.voxels();
    std::copy(sct.data.begin(), sct.data.end(), x.data.begin());
    const Tensor4 prior = one_hot(atlas);
    std::copy(prior.data.begin(), prior.data.end(), x.data.begin() + n);

    const Tensor4 t = encoder_trunk.forward(x);
    const Tensor4 z = mean_head.forward(t);
    const Tensor4 logits = decoder.forward(z);
    ProbabilityMap out;
    out.probs = softmax_channels(logits);
    out.spacing_mm = sct.spacing_mm;
    return out;
}

std::vector<ParamRef> SegmentationNet::params(const std::string& prefix) {
    std::vector<ParamRef> out;
    collect_params(encoder_trunk, prefix + "enc.", out);
    collect_params(mean_head, prefix + "mu", out);
    collect_params(decoder, prefix + "dec.", out);
    return out;
}

} // namespace calvaria::models
