#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "calvaria/core/errors.hpp"
#include "calvaria/models/models.hpp"

namespace calvaria::models {
namespace {

constexpr std::uint64_t kSamplingStream = 777;

void check_training_pair(const Shape3& a, const Shape3& b, int levels, const char* what) {
    if (a != b) {
        throw ShapeError(std::string(what) + ": paired grids differ");
    }
    const int factor = 1 << levels;
    for (int axis = 0; axis < 3; ++axis) {
        if (a[axis] % factor != 0) {
            throw ShapeError(std::string(what) + ": grid not divisible by 2^" +
                             std::to_string(levels));
        }
    }
}

void add_into(Tensor4& dst, const Tensor4& src, double weight = 1.0) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) {
        dst.data[i] = static_cast<float>(dst.data[i] + weight * src.data[i]);
    }
}

} // namespace

// ---------------------------------------------------------------------------
// SynthesisTrainer
// ---------------------------------------------------------------------------

SynthesisTrainer::SynthesisTrainer(const NetworkConfig& cfg, double lr_generator,
                                   double lr_discriminator)
    : cfg_(cfg), vae_(cfg), disc_(cfg), frozen_(FrozenFeatures::kCanonicalSeed),
      opt_g_(lr_generator), opt_d_(lr_discriminator),
      rng_(Rng::derive_seed(cfg.seed, kSamplingStream)) {}

SynthesisStepStats SynthesisTrainer::accumulate(const Volume& mri, const Volume& ct,
                                                const std::string& batch_id) {
    check_training_pair(mri.shape, ct.shape, cfg_.downsampling_levels, "synthesis step");
    require_finite(mri, "training MRI");
    require_finite(ct, "training CT");

    // ---- Generator forward with tapes.
    const Tensor4 x = to_tensor(mri);
    std::vector<BlockCache> trunk_tape;
    const Tensor4 t = vae_.encoder_trunk.forward(x, &trunk_tape);
    const Tensor4 mu = vae_.mean_head.forward(t);
    const Tensor4 lv_raw = vae_.log_variance_head.forward(t);

    Tensor4 lv = lv_raw;
    std::vector<std::uint8_t> lv_gate(lv.data.size());
    for (std::size_t i = 0; i < lv.data.size(); ++i) {
        const bool inside = lv_raw.data[i] >= kLogVarMin && lv_raw.data[i] <= kLogVarMax;
        lv_gate[i] = inside;
        lv.data[i] = std::min(kLogVarMax, std::max(kLogVarMin, lv_raw.data[i]));
    }

    Tensor4 eps(mu.c, mu.d, mu.h, mu.w);
    for (auto& e : eps.data) {
        e = static_cast<float>(rng_.gaussian());
    }
    Tensor4 z = mu;
    std::vector<float> sigma(z.data.size());
    for (std::size_t i = 0; i < z.data.size(); ++i) {
        sigma[i] = static_cast<float>(std::exp(0.5 * static_cast<double>(lv.data[i])));
        z.data[i] += sigma[i] * eps.data[i];
    }

    std::vector<BlockCache> dec_tape;
    const Tensor4 y = vae_.decoder.forward(z, &dec_tape);
    const Volume sct = to_volume(y, mri.spacing_mm, Modality::SCT);
    const Tensor4 ct_t = to_tensor(ct);

    // ---- Loss terms and their gradients w.r.t. the decoder output.
    SynthesisStepStats stats;
    Tensor4 g_l1, g_perc, g_adv;
    stats.generator.reconstruction_l1 = l1_loss(y, ct_t, &g_l1);
    stats.generator.perceptual = frozen_.perceptual_loss(sct, ct, &g_perc);
    stats.generator.adversarial = disc_.generator_loss(sct, &g_adv);

    LatentCode code{mu, lv};
    Tensor4 g_mu_kl, g_lv_kl;
    stats.generator.kl = kl_divergence_grad(code, g_mu_kl, g_lv_kl);

    stats.generator.total = cfg_.lambda_rec * stats.generator.reconstruction_l1 +
                            cfg_.lambda_adv * stats.generator.adversarial +
                            cfg_.lambda_kl * stats.generator.kl +
                            cfg_.lambda_perc * stats.generator.perceptual;

    // ---- Generator backward.
    Tensor4 dy(y.c, y.d, y.h, y.w);
    add_into(dy, g_l1, cfg_.lambda_rec);
    add_into(dy, g_perc, cfg_.lambda_perc);
    add_into(dy, g_adv, cfg_.lambda_adv);

    const Tensor4 dz = vae_.decoder.backward(dec_tape, dy, true);

    Tensor4 dmu = dz;
    add_into(dmu, g_mu_kl, cfg_.lambda_kl);
    Tensor4 dlv(lv.c, lv.d, lv.h, lv.w);
    for (std::size_t i = 0; i < dlv.data.size(); ++i) {
        double g = static_cast<double>(dz.data[i]) * eps.data[i] * 0.5 * sigma[i];
        g += cfg_.lambda_kl * static_cast<double>(g_lv_kl.data[i]);
        dlv.data[i] = lv_gate[i] ? static_cast<float>(g) : 0.0f;
    }

    Tensor4 dt = vae_.mean_head.backward(t, dmu, true);
    add_into(dt, vae_.log_variance_head.backward(t, dlv, true));
    vae_.encoder_trunk.backward(trunk_tape, dt, true);

    // ---- Discriminator step (fake detached: plain forward on sct).
    {
        Tensor4 x_real = ct_t;
        Tensor4 x_fake = y;
        const double inv_scales = 1.0 / static_cast<double>(disc_.scales.size());
        double d_loss = 0.0;
        for (std::size_t s = 0; s < disc_.scales.size(); ++s) {
            if (s > 0) {
                x_real = avg_pool2(x_real);
                x_fake = avg_pool2(x_fake);
            }
            std::vector<BlockCache> tape_r, tape_f;
            const Tensor4 score_r = disc_.scales[s].forward(x_real, &tape_r);
            const Tensor4 score_f = disc_.scales[s].forward(x_fake, &tape_f);
            const double inv_nr = 1.0 / static_cast<double>(score_r.data.size());
            const double inv_nf = 1.0 / static_cast<double>(score_f.data.size());
            double real_term = 0.0, fake_term = 0.0;
            Tensor4 ds_r(score_r.c, score_r.d, score_r.h, score_r.w);
            Tensor4 ds_f(score_f.c, score_f.d, score_f.h, score_f.w);
            for (std::size_t i = 0; i < score_r.data.size(); ++i) {
                const double r = score_r.data[i];
                real_term += (r - 1.0) * (r - 1.0);
                ds_r.data[i] = static_cast<float>((r - 1.0) * inv_nr * inv_scales);
            }
            for (std::size_t i = 0; i < score_f.data.size(); ++i) {
                const double f = score_f.data[i];
                fake_term += f * f;
                ds_f.data[i] = static_cast<float>(f * inv_nf * inv_scales);
            }
            d_loss += 0.5 * (real_term * inv_nr + fake_term * inv_nf) * inv_scales;
            disc_.scales[s].backward(tape_r, ds_r, true);
            disc_.scales[s].backward(tape_f, ds_f, true);
        }
        stats.discriminator = d_loss;
    }

    if (!std::isfinite(stats.generator.total) || !std::isfinite(stats.discriminator)) {
        throw TrainingAbort("non-finite synthesis loss in batch " + batch_id);
    }
    ++pending_;
    return stats;
}

void SynthesisTrainer::apply_updates() {
    if (pending_ == 0) {
        return;
    }
    const float inv = 1.0f / static_cast<float>(pending_);
    std::vector<ParamRef> g_params = vae_.params();
    std::vector<ParamRef> d_params = disc_.params();
    scale_grads(g_params, inv);
    scale_grads(d_params, inv);
    opt_g_.step(g_params);
    opt_d_.step(d_params);
    zero_grads(g_params);
    zero_grads(d_params);
    vae_.mark_trained();
    pending_ = 0;
}

// ---------------------------------------------------------------------------
// SegmentationTrainer
// ---------------------------------------------------------------------------

SegmentationTrainer::SegmentationTrainer(const NetworkConfig& cfg, double lr)
    : cfg_(cfg), net_(cfg), opt_(lr) {}

SegmentationStepStats SegmentationTrainer::accumulate(const Volume& sct, const LabelMap& atlas,
                                                      const LabelMap& gt,
                                                      const std::string& batch_id) {
    check_training_pair(sct.shape, atlas.shape, cfg_.downsampling_levels, "segmentation step");
    if (sct.shape != gt.shape) {
        throw ShapeError("segmentation step: ground-truth grid differs");
    }
    require_finite(sct, "training sCT");

    // ---- Forward with tapes (deterministic bottleneck: mean head only).
    Tensor4 x(1 + LabelMap::kNumCodes, sct.shape);
    const std::int64_t n = x.voxels();
    std::copy(sct.data.begin(), sct.data.end(), x.data.begin());
    const Tensor4 prior = one_hot(atlas);
    std::copy(prior.data.begin(), prior.data.end(), x.data.begin() + n);

    std::vector<BlockCache> trunk_tape, dec_tape;
    const Tensor4 t = net_.encoder_trunk.forward(x, &trunk_tape);
    const Tensor4 z = net_.mean_head.forward(t);
    const Tensor4 logits = net_.decoder.forward(z, &dec_tape);
    const Tensor4 probs = softmax_channels(logits);

    ProbabilityMap pm;
    pm.probs = probs;
    pm.spacing_mm = sct.spacing_mm;
    Tensor4 dprobs;
    SegmentationStepStats stats;
    stats.loss = segmentation_loss(pm, gt, cfg_, &dprobs);

    // ---- Softmax Jacobian: dlogit_c = p_c (dp_c - sum_k dp_k p_k).
    Tensor4 dlogits(logits.c, logits.d, logits.h, logits.w);
    for (std::int64_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int c = 0; c < logits.c; ++c) {
            const std::size_t idx = static_cast<std::size_t>(c) * n + i;
            dot += static_cast<double>(dprobs.data[idx]) * probs.data[idx];
        }
        for (int c = 0; c < logits.c; ++c) {
            const std::size_t idx = static_cast<std::size_t>(c) * n + i;
            dlogits.data[idx] =
                static_cast<float>(probs.data[idx] * (static_cast<double>(dprobs.data[idx]) - dot));
        }
    }

    const Tensor4 dz = net_.decoder.backward(dec_tape, dlogits, true);
    const Tensor4 dt = net_.mean_head.backward(t, dz, true);
    net_.encoder_trunk.backward(trunk_tape, dt, true);

    if (!std::isfinite(stats.loss.total)) {
        throw TrainingAbort("non-finite segmentation loss in batch " + batch_id);
    }
    ++pending_;
    return stats;
}

void SegmentationTrainer::apply_updates() {
    if (pending_ == 0) {
        return;
    }
    std::vector<ParamRef> params = net_.params();
    scale_grads(params, 1.0f / static_cast<float>(pending_));
    opt_.step(params);
    zero_grads(params);
    net_.mark_trained();
    pending_ = 0;
}

} // namespace calvaria::models
