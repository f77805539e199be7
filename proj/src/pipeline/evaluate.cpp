#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>

#include "calvaria/core/errors.hpp"
#include "calvaria/core/volume_io.hpp"
#include "calvaria/metrics/metrics.hpp"
#include "calvaria/pipeline/pipeline.hpp"
#include "render.hpp"
#include "stage_util.hpp"

namespace calvaria::pipeline {

namespace detail {

models::SynthesisVae load_generator(const std::filesystem::path& base) {
    if (!std::filesystem::exists(base.string() + ".json")) {
        throw StateError("missing synthesis checkpoint " + base.string());
    }
    const models::CheckpointMeta meta = models::peek_checkpoint(base);
    models::SynthesisVae vae(meta.config);
    models::load_checkpoint(base, vae.params("g."));
    vae.mark_trained();
    return vae;
}

models::SegmentationNet load_segmenter(const std::filesystem::path& base) {
    if (!std::filesystem::exists(base.string() + ".json")) {
        throw StateError("missing segmentation checkpoint " + base.string());
    }
    const models::CheckpointMeta meta = models::peek_checkpoint(base);
    models::SegmentationNet net(meta.config);
    models::load_checkpoint(base, net.params("s."));
    net.mark_trained();
    return net;
}

} // namespace detail

namespace {

constexpr const char* kConditions[] = {"real_ct", "sct", "sct_ft"};

/// Shortest-width deterministic float formatting for the CSV.
std::string num(double v) {
    if (std::isinf(v)) {
        return v > 0 ? "inf" : "-inf";
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct ConditionMetrics {
    std::map<int, double> dice;
    std::map<int, std::optional<double>> hd95;

    double mean_dice() const {
        double acc = 0.0;
        for (const auto& [label, v] : dice) {
            (void)label;
            acc += v;
        }
        return acc / static_cast<double>(dice.size());
    }
    std::optional<double> mean_hd95() const {
        double acc = 0.0;
        int n = 0;
        for (const auto& [label, v] : hd95) {
            (void)label;
            if (v) {
                acc += *v;
                ++n;
            }
        }
        if (n == 0) {
            return std::nullopt;
        }
        return acc / n;
    }
};

ConditionMetrics score_segmentation(const LabelMap& pred, const LabelMap& gt) {
    ConditionMetrics out;
    out.dice = metrics::dice_per_label(pred, gt);
    for (int label = 1; label <= 8; ++label) {
        try {
            out.hd95[label] = metrics::hd95(pred, gt, label);
        } catch (const UndefinedDistanceError&) {
            out.hd95[label] = std::nullopt;
        }
    }
    return out;
}

nlohmann::json condition_json(const ConditionMetrics& m) {
    nlohmann::json dice = nlohmann::json::object();
    nlohmann::json hd = nlohmann::json::object();
    for (const auto& [label, v] : m.dice) {
        dice[std::to_string(label)] = v;
    }
    for (const auto& [label, v] : m.hd95) {
        if (v) {
            hd[std::to_string(label)] = *v;
        } else {
            hd[std::to_string(label)] = nullptr;
        }
    }
    nlohmann::json j{{"dice", dice}, {"hd95_mm", hd}, {"mean_dice", m.mean_dice()}};
    const std::optional<double> mh = m.mean_hd95();
    j["mean_hd95_mm"] = mh ? nlohmann::json(*mh) : nlohmann::json(nullptr);
    return j;
}

} // namespace

InferenceResult infer_subject(const ExperimentConfig& cfg,
                              const std::filesystem::path& synthesis_ckpt,
                              const std::filesystem::path& segmentation_ckpt,
                              const std::string& subject_id) {
    validate(cfg);
    const std::filesystem::path pre = detail::preprocessed_dir(cfg);
    if (!std::filesystem::exists(pre / subject_id / "subject.json")) {
        throw StateError("infer: no preprocessed subject " + subject_id + " under " +
                         pre.string());
    }
    const SubjectRecord rec = load_subject(pre / subject_id);
    const std::filesystem::path atlas_path = pre / "atlas" / "labels.vol";
    if (!std::filesystem::exists(atlas_path)) {
        throw StateError("infer: missing atlas prior " + atlas_path.string());
    }
    const LabelMap atlas = load_labels(atlas_path);

    const models::SynthesisVae vae = detail::load_generator(synthesis_ckpt);
    const models::SegmentationNet net = detail::load_segmenter(segmentation_ckpt);

    InferenceResult out;
    out.sct = vae.synthesize(rec.mri, /*deterministic=*/true);
    out.heatmap = net.segment(out.sct, atlas);
    out.labels = models::heatmap_to_segmentation(out.heatmap);
    return out;
}

std::filesystem::path run_full_evaluation(const ExperimentConfig& cfg) {
    validate(cfg);
    const std::string hash = config_hash(cfg);
    const std::filesystem::path pre = detail::preprocessed_dir(cfg);
    const std::filesystem::path out = detail::eval_dir(cfg);
    if (detail::stamp_matches(out, hash) && std::filesystem::exists(out / "metrics.json")) {
        return out;
    }
    if (!std::filesystem::exists(pre / "split.json")) {
        throw StateError("evaluate: no preprocessed split under " + pre.string());
    }

    const SplitAssignment split = detail::load_split(pre / "split.json");
    const std::vector<std::string> test_ids = split.ids(SplitPart::test);
    if (test_ids.empty()) {
        throw StateError("evaluate: test split is empty");
    }
    const LabelMap atlas = load_labels(pre / "atlas" / "labels.vol");

    const std::filesystem::path ckpts = detail::checkpoints_dir(cfg);
    const models::SynthesisVae vae = detail::load_generator(ckpts / "synthesis" / "best");
    const models::SegmentationNet seg = detail::load_segmenter(ckpts / "segmentation" / "best");
    const models::SegmentationNet seg_ft =
        detail::load_segmenter(ckpts / "segmentation_ft" / "best");

    std::filesystem::create_directories(out);
    const std::filesystem::path figdir = detail::figures_dir(cfg);
    std::filesystem::create_directories(figdir);

    nlohmann::json subjects = nlohmann::json::object();
    std::string csv = "subject_id,condition,ssim,psnr_db,mae,lpips_proxy";
    for (int label = 1; label <= 8; ++label) {
        csv += ",dice_" + std::to_string(label);
    }
    for (int label = 1; label <= 8; ++label) {
        csv += ",hd95_" + std::to_string(label);
    }
    csv += ",mean_dice,mean_hd95_mm\n";

    std::vector<std::vector<float>> fid_real, fid_sct;
    std::vector<double> all_ssim, bone_dice_sct, suture_dice_sct, suture_dice_ft;

    for (const std::string& id : test_ids) {
        const SubjectRecord rec = load_subject(pre / id);
        const Volume sct = vae.synthesize(rec.mri, /*deterministic=*/true);

        const double s = metrics::ssim(sct, rec.ct);
        const metrics::PsnrMae pm = metrics::psnr_mae(sct, rec.ct);
        const double lpips = metrics::perceptual_distance(sct, rec.ct);
        all_ssim.push_back(s);

        for (auto& d : metrics::fid_descriptors(rec.ct)) {
            fid_real.push_back(std::move(d));
        }
        for (auto& d : metrics::fid_descriptors(sct)) {
            fid_sct.push_back(std::move(d));
        }

        const models::ProbabilityMap heat_real = seg.segment(rec.ct, atlas);
        const models::ProbabilityMap heat_sct = seg.segment(sct, atlas);
        const models::ProbabilityMap heat_ft = seg_ft.segment(sct, atlas);
        const std::map<std::string, ConditionMetrics> scores{
            {"real_ct", score_segmentation(models::heatmap_to_segmentation(heat_real),
                                           rec.bones_sutures)},
            {"sct",
             score_segmentation(models::heatmap_to_segmentation(heat_sct), rec.bones_sutures)},
            {"sct_ft",
             score_segmentation(models::heatmap_to_segmentation(heat_ft), rec.bones_sutures)},
        };
        for (int label = 1; label <= 7; ++label) {
            bone_dice_sct.push_back(scores.at("sct").dice.at(label));
        }
        suture_dice_sct.push_back(scores.at("sct").dice.at(8));
        suture_dice_ft.push_back(scores.at("sct_ft").dice.at(8));

        nlohmann::json entry;
        entry["image_quality"] = {
            {"ssim", s},
            {"psnr_db", std::isinf(pm.psnr_db) ? nlohmann::json("inf") : nlohmann::json(pm.psnr_db)},
            {"mae", pm.mae},
            {"lpips_proxy", lpips},
        };
        nlohmann::json segj = nlohmann::json::object();
        for (const char* cond : kConditions) {
            segj[cond] = condition_json(scores.at(cond));
        }
        entry["segmentation"] = segj;
        subjects[id] = entry;

        for (const char* cond : kConditions) {
            const ConditionMetrics& m = scores.at(cond);
            csv += id;
            csv += ",";
            csv += cond;
            if (std::string(cond) == "sct") {
                csv += "," + num(s) + "," + num(pm.psnr_db) + "," + num(pm.mae) + "," +
                       num(lpips);
            } else {
                csv += ",,,,";
            }
            for (int label = 1; label <= 8; ++label) {
                csv += "," + num(m.dice.at(label));
            }
            for (int label = 1; label <= 8; ++label) {
                csv += ",";
                if (m.hd95.at(label)) {
                    csv += num(*m.hd95.at(label));
                }
            }
            csv += "," + num(m.mean_dice());
            const std::optional<double> mh = m.mean_hd95();
            csv += ",";
            if (mh) {
                csv += num(*mh);
            }
            csv += "\n";
        }

        // Figures: modality grid and suture overlays, mid-slices of all
        // three planes, 4x upscale.
        std::vector<std::vector<detail::Image>> grid_rows, overlay_rows;
        for (int plane = 0; plane < 3; ++plane) {
            grid_rows.push_back({detail::upscale(detail::gray_slice(rec.mri, plane), 4),
                                 detail::upscale(detail::gray_slice(rec.ct, plane), 4),
                                 detail::upscale(detail::gray_slice(sct, plane), 4)});
            detail::Image pred = detail::gray_slice(sct, plane);
            detail::overlay_heat(pred, heat_sct, LabelMap::kSuture, plane, -1,
                                 detail::Rgb{255, 48, 48});
            detail::Image truth = detail::gray_slice(rec.ct, plane);
            detail::overlay_label(truth, rec.bones_sutures, LabelMap::kSuture, plane, -1,
                                  detail::Rgb{48, 160, 255});
            overlay_rows.push_back({detail::upscale(pred, 4), detail::upscale(truth, 4)});
        }
        detail::save_bmp(detail::compose_grid(grid_rows), figdir / (id + "_slices.bmp"));
        detail::save_bmp(detail::compose_grid(overlay_rows),
                         figdir / (id + "_suture_overlay.bmp"));
    }

    const double fid_value = metrics::fid(fid_sct, fid_real);
    const auto mean_of = [](const std::vector<double>& v) {
        double acc = 0.0;
        for (const double x : v) {
            acc += x;
        }
        return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
    };

    nlohmann::json report{
        {"config_hash", hash},
        {"fid_sct_vs_real", fid_value},
        {"subjects", subjects},
        {"summary",
         {{"mean_ssim", mean_of(all_ssim)},
          {"mean_bone_dice_sct", mean_of(bone_dice_sct)},
          {"mean_suture_dice_sct", mean_of(suture_dice_sct)},
          {"mean_suture_dice_sct_ft", mean_of(suture_dice_ft)},
          {"n_test", static_cast<int>(test_ids.size())}}},
    };
    {
        std::ofstream f(out / "metrics.json", std::ios::trunc);
        if (!f) {
            throw StateError("evaluate: cannot write metrics.json");
        }
        f << report.dump(2) << "\n";
    }
    {
        std::ofstream f(out / "metrics.csv", std::ios::trunc);
        if (!f) {
            throw StateError("evaluate: cannot write metrics.csv");
        }
        f << csv;
    }
    detail::write_stamp(out, hash, "evaluate");
    return out;
}

} // namespace calvaria::pipeline
