#include <algorithm>
#include <cmath>
#include <cstring>

#include "calvaria/core/edt.hpp"
#include "calvaria/core/errors.hpp"
#include "calvaria/models/models.hpp"

namespace calvaria::models {
namespace {

constexpr double kDiceEps = 1e-6;
constexpr double kFocalProbFloor = 1e-7;
constexpr float kHdPredMaskThreshold = 0.5f; // prediction-mask cut for the HD surrogate

void check_same_shape(const Tensor4& a, const Tensor4& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": tensor shapes differ");
    }
}

double grid_diagonal_sq_mm(const Shape3& shape, const Spacing3& spacing) {
    double s = 0.0;
    for (int axis = 0; axis < 3; ++axis) {
        const double extent = static_cast<double>(shape[axis]) * spacing[axis];
        s += extent * extent;
    }
    return s;
}

} // namespace

double kl_divergence(const LatentCode& z) {
    check_same_shape(z.mean, z.log_variance, "kl_divergence");
    const std::size_t n = z.mean.data.size();
    if (n == 0) {
        throw ShapeError("kl_divergence: empty latent");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double mu = z.mean.data[i];
        const double lv = z.log_variance.data[i];
        acc += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
    }
    return acc / static_cast<double>(n);
}

double kl_divergence_grad(const LatentCode& z, Tensor4& d_mean, Tensor4& d_log_variance) {
    check_same_shape(z.mean, z.log_variance, "kl_divergence_grad");
    const std::size_t n = z.mean.data.size();
    if (n == 0) {
        throw ShapeError("kl_divergence_grad: empty latent");
    }
    d_mean = Tensor4(z.mean.c, z.mean.d, z.mean.h, z.mean.w);
    d_log_variance = Tensor4(z.mean.c, z.mean.d, z.mean.h, z.mean.w);
    const double inv_n = 1.0 / static_cast<double>(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double mu = z.mean.data[i];
        const double lv = z.log_variance.data[i];
        const double var = std::exp(lv);
        acc += 0.5 * (mu * mu + var - 1.0 - lv);
        d_mean.data[i] = static_cast<float>(mu * inv_n);
        d_log_variance.data[i] = static_cast<float>(0.5 * (var - 1.0) * inv_n);
    }
    return acc * inv_n;
}

double l1_loss(const Tensor4& a, const Tensor4& b, Tensor4* grad_a) {
    check_same_shape(a, b, "l1_loss");
    const std::size_t n = a.data.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    double acc = 0.0;
    if (grad_a) {
        *grad_a = Tensor4(a.c, a.d, a.h, a.w);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double diff = static_cast<double>(a.data[i]) - b.data[i];
        acc += std::abs(diff);
        if (grad_a) {
            grad_a->data[i] = static_cast<float>((diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) * inv_n);
        }
    }
    return acc * inv_n;
}

double mse_loss(const Tensor4& a, const Tensor4& b, Tensor4* grad_a) {
    check_same_shape(a, b, "mse_loss");
    const std::size_t n = a.data.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    double acc = 0.0;
    if (grad_a) {
        *grad_a = Tensor4(a.c, a.d, a.h, a.w);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double diff = static_cast<double>(a.data[i]) - b.data[i];
        acc += diff * diff;
        if (grad_a) {
            grad_a->data[i] = static_cast<float>(2.0 * diff * inv_n);
        }
    }
    return acc * inv_n;
}

SynthesisLossBreakdown synthesis_loss(const Volume& sct, const Volume& ct,
                                      const LatentCode& z, double disc_fake_score,
                                      const std::vector<std::pair<Tensor4, Tensor4>>& feat_pairs,
                                      const NetworkConfig& cfg) {
    if (sct.shape != ct.shape) {
        throw ShapeError("synthesis_loss: sct and ct shapes differ");
    }
    SynthesisLossBreakdown out;
    {
        const std::size_t n = sct.data.size();
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            acc += std::abs(static_cast<double>(sct.data[i]) - ct.data[i]);
        }
        out.reconstruction_l1 = acc / static_cast<double>(n);
    }
    out.adversarial = (disc_fake_score - 1.0) * (disc_fake_score - 1.0);
    out.kl = kl_divergence(z);
    if (!feat_pairs.empty()) {
        double acc = 0.0;
        for (const auto& [fa, fb] : feat_pairs) {
            acc += mse_loss(fa, fb);
        }
        out.perceptual = acc / static_cast<double>(feat_pairs.size());
    }
    out.total = cfg.lambda_rec * out.reconstruction_l1 + cfg.lambda_adv * out.adversarial +
                cfg.lambda_kl * out.kl + cfg.lambda_perc * out.perceptual;
    return out;
}

double lsgan_discriminator_loss(const std::vector<Tensor4>& real_scores,
                                const std::vector<Tensor4>& fake_scores) {
    if (real_scores.empty() || real_scores.size() != fake_scores.size()) {
        throw ArgumentError("lsgan_discriminator_loss: scale counts differ or are empty");
    }
    double acc = 0.0;
    for (std::size_t s = 0; s < real_scores.size(); ++s) {
        double real_term = 0.0, fake_term = 0.0;
        for (const float r : real_scores[s].data) {
            real_term += (static_cast<double>(r) - 1.0) * (static_cast<double>(r) - 1.0);
        }
        for (const float f : fake_scores[s].data) {
            fake_term += static_cast<double>(f) * f;
        }
        real_term /= static_cast<double>(real_scores[s].data.size());
        fake_term /= static_cast<double>(fake_scores[s].data.size());
        acc += 0.5 * (real_term + fake_term);
    }
    return acc / static_cast<double>(real_scores.size());
}

double lsgan_generator_loss(const std::vector<Tensor4>& fake_scores) {
    if (fake_scores.empty()) {
        throw ArgumentError("lsgan_generator_loss: no scales");
    }
    double acc = 0.0;
    for (const Tensor4& t : fake_scores) {
        double term = 0.0;
        for (const float f : t.data) {
            term += (static_cast<double>(f) - 1.0) * (static_cast<double>(f) - 1.0);
        }
        acc += term / static_cast<double>(t.data.size());
    }
    return acc / static_cast<double>(fake_scores.size());
}

SegmentationLossBreakdown segmentation_loss(const ProbabilityMap& p, const LabelMap& gt,
                                            const NetworkConfig& cfg, Tensor4* grad_probs) {
    const Tensor4& probs = p.probs;
    if (probs.c != LabelMap::kNumCodes) {
        throw ShapeError("segmentation_loss: probability map must have 9 channels");
    }
    if (probs.grid() != gt.shape) {
        throw ShapeError("segmentation_loss: probability map and label grid differ");
    }
    const std::int64_t n = probs.voxels();
    const int nc = probs.c;
    if (grad_probs) {
        *grad_probs = Tensor4(nc, probs.d, probs.h, probs.w);
    }

    SegmentationLossBreakdown out;

    // --- Soft Dice (squared denominator), averaged over all 9 classes.
    std::vector<double> sum_pg(nc, 0.0), sum_pp(nc, 0.0), sum_gg(nc, 0.0);
    for (int c = 0; c < nc; ++c) {
        const float* pc = probs.data.data() + static_cast<std::size_t>(c) * n;
        double pg = 0.0, pp = 0.0, gg = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double pv = pc[i];
            const double gv = gt.data[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0;
            pg += pv * gv;
            pp += pv * pv;
            gg += gv;
        }
        sum_pg[c] = pg;
        sum_pp[c] = pp;
        sum_gg[c] = gg;
        const double denom = pp + gg + kDiceEps;
        out.dice += 1.0 - (2.0 * pg + kDiceEps) / denom;
    }
    out.dice /= static_cast<double>(nc);

    // --- Focal loss over voxels on the true-class probability.
    const double gamma = cfg.focal_gamma;
    {
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const int c = gt.data[static_cast<std::size_t>(i)];
            const double pt = probs.data[static_cast<std::size_t>(c) * n + i];
            const double q = std::max(pt, kFocalProbFloor);
            const double one_minus = 1.0 - pt;
            const double mod = gamma == 0.0 ? 1.0 : (one_minus > 0.0 ? std::pow(one_minus, gamma) : 0.0);
            acc += -mod * std::log(q);
        }
        out.focal = acc / static_cast<double>(n);
    }

    // --- Hausdorff surrogate: (p-g)^2 * (dt_g^2 + dt_p^2), distance
    // transforms in mm, empty masks capped at the grid diagonal.
    const double cap_sq = grid_diagonal_sq_mm(gt.shape, p.spacing_mm);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n));
    std::vector<std::vector<double>> dt_sum(static_cast<std::size_t>(nc)); // dt_g^2 + dt_p^2 per class
    {
        double acc = 0.0;
        for (int c = 0; c < nc; ++c) {
            const float* pc = probs.data.data() + static_cast<std::size_t>(c) * n;
            for (std::int64_t i = 0; i < n; ++i) {
                mask[static_cast<std::size_t>(i)] = gt.data[static_cast<std::size_t>(i)] == c;
            }
            std::vector<double> dt_g = squared_edt(mask, gt.shape, p.spacing_mm);
            for (std::int64_t i = 0; i < n; ++i) {
                mask[static_cast<std::size_t>(i)] = pc[i] >= kHdPredMaskThreshold;
            }
            std::vector<double> dt_p = squared_edt(mask, gt.shape, p.spacing_mm);
            std::vector<double>& dts = dt_sum[static_cast<std::size_t>(c)];
            dts.resize(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) {
                const double a = std::min(dt_g[static_cast<std::size_t>(i)], cap_sq);
                const double b = std::min(dt_p[static_cast<std::size_t>(i)], cap_sq);
                dts[static_cast<std::size_t>(i)] = a + b;
                const double gv = gt.data[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0;
                const double diff = pc[i] - gv;
                acc += diff * diff * dts[static_cast<std::size_t>(i)];
            }
        }
        out.hausdorff = acc / static_cast<double>(n * nc);
    }

    out.total = cfg.lambda_dicefocal * (out.dice + out.focal) + cfg.lambda_hd * out.hausdorff;

    if (grad_probs) {
        const double inv_nc = 1.0 / static_cast<double>(nc);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (int c = 0; c < nc; ++c) {
            const float* pc = probs.data.data() + static_cast<std::size_t>(c) * n;
            float* gc = grad_probs->data.data() + static_cast<std::size_t>(c) * n;
            const double denom = sum_pp[c] + sum_gg[c] + kDiceEps;
            const double numer = 2.0 * sum_pg[c] + kDiceEps;
            const std::vector<double>& dts = dt_sum[static_cast<std::size_t>(c)];
            for (std::int64_t i = 0; i < n; ++i) {
                const double gv = gt.data[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0;
                const double pv = pc[i];
                // dice
                double g = cfg.lambda_dicefocal * inv_nc *
                           (-(2.0 * gv * denom - numer * 2.0 * pv) / (denom * denom));
                // focal (true class only)
                if (gv > 0.0) {
                    const double q = std::max(pv, kFocalProbFloor);
                    const double one_minus = 1.0 - pv;
                    double dfocal;
                    if (gamma == 0.0) {
                        dfocal = -1.0 / q;
                    } else {
                        const double mod = one_minus > 0.0 ? std::pow(one_minus, gamma) : 0.0;
                        const double dmod = one_minus > 0.0 ? gamma * std::pow(one_minus, gamma - 1.0) : 0.0;
                        dfocal = dmod * std::log(q) - (pv > kFocalProbFloor ? mod / q : 0.0);
                    }
                    g += cfg.lambda_dicefocal * inv_n * dfocal;
                }
                // Hausdorff surrogate, distance transforms locally constant
                g += cfg.lambda_hd * inv_n * inv_nc * 2.0 * (pv - gv) *
                     dts[static_cast<std::size_t>(i)];
                gc[i] = static_cast<float>(g);
            }
        }
    }
    return out;
}

Tensor4 softmax_channels(const Tensor4& logits) {
    Tensor4 out(logits.c, logits.d, logits.h, logits.w);
    const std::int64_t n = logits.voxels();
    for (std::int64_t i = 0; i < n; ++i) {
        float mx = logits.data[static_cast<std::size_t>(i)];
        for (int c = 1; c < logits.c; ++c) {
            mx = std::max(mx, logits.data[static_cast<std::size_t>(c) * n + i]);
        }
        double sum = 0.0;
        for (int c = 0; c < logits.c; ++c) {
            const double e = std::exp(static_cast<double>(logits.data[static_cast<std::size_t>(c) * n + i]) - mx);
            out.data[static_cast<std::size_t>(c) * n + i] = static_cast<float>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int c = 0; c < logits.c; ++c) {
            out.data[static_cast<std::size_t>(c) * n + i] =
                static_cast<float>(out.data[static_cast<std::size_t>(c) * n + i] * inv);
        }
    }
    return out;
}

LabelMap heatmap_to_segmentation(const ProbabilityMap& p, double suture_threshold,
                                 bool apply_suture_threshold) {
    if (!(suture_threshold >= 0.0 && suture_threshold <= 1.0)) {
        throw ArgumentError("heatmap_to_segmentation: suture_threshold must be in [0,1]");
    }
    if (p.probs.c != LabelMap::kNumCodes) {
        throw ShapeError("heatmap_to_segmentation: probability map must have 9 channels");
    }
    LabelMap out;
    out.shape = p.probs.grid();
    out.spacing_mm = p.spacing_mm;
    const std::int64_t n = p.probs.voxels();
    out.data.assign(static_cast<std::size_t>(n), 0);
    for (std::int64_t i = 0; i < n; ++i) {
        int best = 0;
        float best_p = p.probs.data[static_cast<std::size_t>(i)];
        for (int c = 1; c < p.probs.c; ++c) {
            const float pc = p.probs.data[static_cast<std::size_t>(c) * n + i];
            if (pc > best_p) {
                best_p = pc;
                best = c;
            }
        }
        if (apply_suture_threshold &&
            p.probs.data[static_cast<std::size_t>(LabelMap::kSuture) * n + i] >=
                static_cast<float>(suture_threshold)) {
            best = LabelMap::kSuture;
        }
        out.data[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
    }
    return out;
}

} // namespace calvaria::models
