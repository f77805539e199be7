#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "calvaria/core/errors.hpp"
#include "calvaria/core/rng.hpp"
#include "calvaria/core/volume.hpp"
#include "calvaria/models/layers.hpp"
#include "calvaria/models/tensor.hpp"

namespace calvaria::models {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct NetworkConfig {
    int base_channels = 8;
    int latent_channels = 8;
    int downsampling_levels = 2;
    int discriminator_levels = 2;
    double lambda_rec = 1.0;
    double lambda_adv = 0.05;
    double lambda_kl = 1e-4;
    double lambda_perc = 0.1;
    double lambda_dicefocal = 1.0;
    double lambda_hd = 0.1;
    double focal_gamma = 2.0;
    std::uint64_t seed = 0;
};

/// Throws ConfigError unless: downsampling_levels >= 2, all lambdas >= 0,
/// lambda_rec > 0, channel counts >= 1, discriminator_levels >= 1,
/// focal_gamma >= 0.
void validate(const NetworkConfig& cfg);

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Gaussian posterior parameters on the latent grid. log_variance is
/// clamped to [-30, 20] by the encoder.
struct LatentCode {
    Tensor4 mean;
    Tensor4 log_variance;
};

inline constexpr float kLogVarMin = -30.0f;
inline constexpr float kLogVarMax = 20.0f;

/// Per-voxel class probabilities: 9 channels (codes 0..8, channel 8 is the
/// suture heatmap) summing to 1 per voxel.
struct ProbabilityMap {
    Tensor4 probs;
    Spacing3 spacing_mm{1.0, 1.0, 1.0};
};

// ---------------------------------------------------------------------------
// Losses (pure functions of their inputs; double accumulation throughout)
// ---------------------------------------------------------------------------

/// Mean over latent dimensions of 0.5*(mu^2 + sigma^2 - 1 - log sigma^2).
double kl_divergence(const LatentCode& z);

/// KL with analytic gradients w.r.t. mean and log_variance (gradients are
/// overwritten, shaped like the latent).
double kl_divergence_grad(const LatentCode& z, Tensor4& d_mean, Tensor4& d_log_variance);

/// Mean absolute difference; optional gradient w.r.t. `a`.
double l1_loss(const Tensor4& a, const Tensor4& b, Tensor4* grad_a = nullptr);

/// Mean squared difference; optional gradient w.r.t. `a`.
double mse_loss(const Tensor4& a, const Tensor4& b, Tensor4* grad_a = nullptr);

struct SynthesisLossBreakdown {
    double reconstruction_l1 = 0.0; // pre-weighting
    double adversarial = 0.0;       // pre-weighting
    double kl = 0.0;                // pre-weighting
    double perceptual = 0.0;        // pre-weighting
    double total = 0.0;             // weighted sum
};

/// Composite synthesis loss:
///   lambda_rec*L1(sct,ct) + lambda_adv*(disc_fake_score-1)^2
///   + lambda_kl*KL(z) + lambda_perc*mean-over-layers MSE(feature pairs).
/// Throws ShapeError on sct/ct shape mismatch.
SynthesisLossBreakdown synthesis_loss(const Volume& sct, const Volume& ct,
                                      const LatentCode& z, double disc_fake_score,
                                      const std::vector<std::pair<Tensor4, Tensor4>>& feat_pairs,
                                      const NetworkConfig& cfg);

struct SegmentationLossBreakdown {
    double dice = 0.0;      // pre-weighting, class-averaged soft Dice loss
    double focal = 0.0;     // pre-weighting, voxel-averaged focal loss
    double hausdorff = 0.0; // pre-weighting, distance-transform surrogate
    double total = 0.0;     // lambda_dicefocal*(dice+focal) + lambda_hd*hausdorff
};

/// Dice-Focal + Hausdorff-surrogate segmentation loss. Throws ShapeError on
/// grid mismatch. If `grad_probs` is non-null it receives d(total)/d(probs)
/// with the distance transforms treated as locally constant.
SegmentationLossBreakdown segmentation_loss(const ProbabilityMap& p, const LabelMap& gt,
                                            const NetworkConfig& cfg,
                                            Tensor4* grad_probs = nullptr);

/// Least-squares GAN discriminator objective from per-scale patch score
/// maps: mean over scales of 0.5*[mean (r-1)^2 + mean f^2].
double lsgan_discriminator_loss(const std::vector<Tensor4>& real_scores,
                                const std::vector<Tensor4>& fake_scores);

/// Least-squares GAN generator objective: mean over scales of
/// mean (f-1)^2.
double lsgan_generator_loss(const std::vector<Tensor4>& fake_scores);

// ---------------------------------------------------------------------------
// Frozen perceptual feature stack
// ---------------------------------------------------------------------------

/// Four stride-2 convolution + LeakyReLU layers (1->4->8->16->32 channels)
/// with weights drawn once from the given seed and never trained. The
/// canonical seed makes perceptual metrics comparable across experiments.
/// The stack is tiny and frozen, so it runs in double precision end to end;
/// gradients w.r.t. its inputs are exact to double-FD resolution.
class FrozenFeatures {
public:
    static constexpr std::uint64_t kCanonicalSeed = 20260816u;
    static constexpr int kLayers = 4;
    static constexpr int kDescriptorDim = 32;

    explicit FrozenFeatures(std::uint64_t seed = kCanonicalSeed);

    /// Post-activation feature maps of all four layers.
    std::vector<Tensor4> features(const Tensor4& x) const;
    std::vector<Tensor4> features(const Volume& v) const;

    /// Perceptual loss between two volumes: mean over layers of the MSE of
    /// their feature maps. If grad_a is non-null it receives the gradient
    /// w.r.t. `a` (shaped 1xDxHxW).
    double perceptual_loss(const Volume& a, const Volume& b, Tensor4* grad_a = nullptr) const;

    /// Global-average-pooled last-layer features: a 32-dim descriptor.
    std::vector<float> descriptor(const Tensor4& x) const;
    std::vector<float> descriptor(const Volume& v) const;

    std::uint64_t seed() const { return seed_; }

private:
    struct Layer {
        int cin = 0;
        int cout = 0;
        std::vector<double> w; // [cout][cin*27]
        std::vector<double> b; // [cout]
    };

    std::vector<std::vector<double>> run(const std::vector<double>& x,
                                         const Shape3& grid,
                                         std::vector<Shape3>& grids) const;

    std::uint64_t seed_ = 0;
    std::array<Layer, kLayers> layers_;
};

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

/// MRI -> sCT variational autoencoder. All members are deterministic
/// functions of (config.seed, training history).
class SynthesisVae {
public:
    explicit SynthesisVae(const NetworkConfig& cfg);

    /// Posterior parameters at grid shape/2^levels. Throws ShapeError when
    /// any axis is not divisible by 2^downsampling_levels.
    LatentCode encode(const Volume& v) const;

    /// Decode a latent sample to a volume in [0,1] at grid*2^levels.
    /// `out_spacing_mm` stamps the result's metadata.
    Volume decode(const Tensor4& z, const Spacing3& out_spacing_mm = {1.0, 1.0, 1.0}) const;

    /// Full MRI->sCT pass. deterministic=true uses the latent mean; false
    /// draws z = mean + exp(log_variance/2)*eps with eps from `rng` (an
    /// internal config-seeded generator when rng is null). Throws
    /// StateError until trained weights are present.
    Volume synthesize(const Volume& mri, bool deterministic, Rng* rng = nullptr) const;

    bool trained() const { return trained_; }
    void mark_trained() { trained_ = true; }

    const NetworkConfig& config() const { return cfg_; }

    std::vector<ParamRef> params(const std::string& prefix = "g.");

    // Network pieces, exposed for the trainer's tape-based backward pass.
    Sequential encoder_trunk;
    Conv3d mean_head;
    Conv3d log_variance_head;
    Sequential decoder;

private:
    NetworkConfig cfg_;
    bool trained_ = false;
};

/// Multi-scale 3D patch discriminator (LSGAN). Scale s sees the input
/// box-downsampled s times; each scale emits a patch score map.
class Discriminator {
public:
    explicit Discriminator(const NetworkConfig& cfg);

    /// Per-scale patch score maps for a single-channel volume.
    std::vector<Tensor4> scores(const Volume& v) const;

    /// LSGAN discriminator loss over real/fake volumes (forward only).
    double training_loss(const Volume& real, const Volume& fake) const;

    /// Generator-side adversarial loss with gradient w.r.t. the input
    /// volume (discriminator weights untouched).
    double generator_loss(const Volume& fake, Tensor4* grad_fake = nullptr) const;

    std::vector<ParamRef> params(const std::string& prefix = "d.");

    std::vector<Sequential> scales;

private:
    NetworkConfig cfg_;
};

/// Atlas-conditioned segmentation network: the synthesis backbone with a
/// 10-channel input (sCT + one-hot atlas prior), a deterministic (mean
/// only) bottleneck, and a 9-channel softmax output head.
class SegmentationNet {
public:
    explicit SegmentationNet(const NetworkConfig& cfg);

    /// Softmax probabilities over the 9 codes. Throws ArgumentError when
    /// sct and atlas grids differ, ShapeError when the grid is not
    /// divisible by 2^downsampling_levels.
    ProbabilityMap segment(const Volume& sct, const LabelMap& atlas) const;

    bool trained() const { return trained_; }
    void mark_trained() { trained_ = true; }

    const NetworkConfig& config() const { return cfg_; }

    std::vector<ParamRef> params(const std::string& prefix = "s.");

    Sequential encoder_trunk;
    Conv3d mean_head;
    Sequential decoder; // emits 9-channel logits; softmax applied in segment()

private:
    NetworkConfig cfg_;
    bool trained_ = false;
};

/// Per-voxel softmax over channels.
Tensor4 softmax_channels(const Tensor4& logits);

/// Argmax labels from a probability map; ties break toward the lowest code.
/// When apply_suture_threshold is set, voxels whose channel-8 probability is
/// >= suture_threshold are forced to the suture code. Throws ArgumentError
/// when suture_threshold is outside [0,1].
LabelMap heatmap_to_segmentation(const ProbabilityMap& p, double suture_threshold = 0.5,
                                 bool apply_suture_threshold = false);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct CheckpointMeta {
    std::string kind; // "synthesis" | "segmentation"
    NetworkConfig config;
    int epoch = 0;
    std::uint64_t seed = 0;
    std::vector<double> loss_history;
    std::string parent; // originating checkpoint for fine-tuned models
};

/// Writes <base>.ckpt (binary weights) and <base>.json (manifest).
void save_checkpoint(const std::filesystem::path& base, const CheckpointMeta& meta,
                     const std::vector<ParamRef>& params);

/// Restores weights into `params` and returns the manifest. Throws
/// FormatError when files are missing/corrupt or array shapes mismatch.
CheckpointMeta load_checkpoint(const std::filesystem::path& base,
                               const std::vector<ParamRef>& params);

/// Reads only the manifest.
CheckpointMeta peek_checkpoint(const std::filesystem::path& base);

// ---------------------------------------------------------------------------
// Trainers
// ---------------------------------------------------------------------------

struct SynthesisStepStats {
    SynthesisLossBreakdown generator;
    double discriminator = 0.0;
};

/// Alternating generator/discriminator trainer. Gradients accumulate over
/// accumulate() calls; apply_updates() averages them, takes one Adam step
/// per network, and clears the accumulators. Non-finite losses raise
/// TrainingAbort tagged with the offending batch id.
class SynthesisTrainer {
public:
    explicit SynthesisTrainer(const NetworkConfig& cfg, double lr_generator = 1e-3,
                              double lr_discriminator = 1e-3);

    SynthesisStepStats accumulate(const Volume& mri, const Volume& ct,
                                  const std::string& batch_id);
    void apply_updates();

    SynthesisVae& generator() { return vae_; }
    const SynthesisVae& generator() const { return vae_; }
    Discriminator& discriminator() { return disc_; }
    const FrozenFeatures& frozen_features() const { return frozen_; }
    Rng& sampling_rng() { return rng_; }

private:
    NetworkConfig cfg_;
    SynthesisVae vae_;
    Discriminator disc_;
    FrozenFeatures frozen_;
    Adam opt_g_, opt_d_;
    Rng rng_;
    int pending_ = 0;
};

struct SegmentationStepStats {
    SegmentationLossBreakdown loss;
};

class SegmentationTrainer {
public:
    explicit SegmentationTrainer(const NetworkConfig& cfg, double lr = 1e-3);

    SegmentationStepStats accumulate(const Volume& sct, const LabelMap& atlas,
                                     const LabelMap& gt, const std::string& batch_id);
    void apply_updates();

    SegmentationNet& network() { return net_; }
    const SegmentationNet& network() const { return net_; }
    Adam& optimizer() { return opt_; }

private:
    NetworkConfig cfg_;
    SegmentationNet net_;
    Adam opt_;
    int pending_ = 0;
};

} // namespace calvaria::models
