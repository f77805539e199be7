#include <algorithm>
#include <cmath>
#include <fstream>

#include "calvaria/core/errors.hpp"
#include "calvaria/core/resample.hpp"
#include "calvaria/core/volume_io.hpp"
#include "calvaria/phantom/phantom.hpp"
#include "calvaria/pipeline/pipeline.hpp"
#include "calvaria/preprocess/preprocess.hpp"
#include "stage_util.hpp"

namespace calvaria::pipeline {

namespace detail {

bool stamp_matches(const std::filesystem::path& dir, const std::string& hash) {
    std::ifstream in(dir / "stamp.json");
    if (!in) {
        return false;
    }
    try {
        nlohmann::json j;
        in >> j;
        return j.at("config_hash").get<std::string>() == hash;
    } catch (const nlohmann::json::exception&) {
        return false;
    }
}

void write_stamp(const std::filesystem::path& dir, const std::string& hash,
                 const std::string& stage) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "stamp.json", std::ios::trunc);
    if (!out) {
        throw StateError("cannot write stamp in " + dir.string());
    }
    out << nlohmann::json{{"config_hash", hash}, {"stage", stage}}.dump(2) << "\n";
}

void save_split(const SplitAssignment& split, const std::filesystem::path& path) {
    nlohmann::json parts = nlohmann::json::object();
    for (const auto& [id, part] : split.parts) {
        parts[id] = to_string(part);
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw StateError("cannot write " + path.string());
    }
    out << nlohmann::json{{"parts", parts}}.dump(2) << "\n";
}

SplitAssignment load_split(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw StateError("missing split assignment " + path.string() +
                         " (run the preprocess stage first)");
    }
    try {
        nlohmann::json j;
        in >> j;
        SplitAssignment split;
        for (const auto& [id, part] : j.at("parts").items()) {
            split.parts[id] = split_part_from_string(part.get<std::string>());
        }
        return split;
    } catch (const nlohmann::json::exception& e) {
        throw StateError("invalid split assignment " + path.string() + ": " + e.what());
    }
}

std::string file_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw StateError("cannot hash missing file " + path.string());
    }
    std::uint64_t h = 1469598103934665603ull;
    char buf[4096];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    static const char* hex = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = hex[h & 0xf];
        h >>= 4;
    }
    return out;
}

} // namespace detail

std::filesystem::path run_phantom(const ExperimentConfig& cfg, int n) {
    validate(cfg);
    const std::string hash = config_hash(cfg);
    if (detail::stamp_matches(cfg.data_dir, hash)) {
        return cfg.data_dir;
    }
    const auto cohort = phantom::generate_cohort(n, cfg.seed, cfg.grid);
    for (const auto& rec : cohort) {
        write_subject(cfg.data_dir / rec.subject_id, rec);
    }
    detail::write_stamp(cfg.data_dir, hash, "phantom");
    return cfg.data_dir;
}

std::filesystem::path run_preprocess(const ExperimentConfig& cfg) {
    validate(cfg);
    const std::string hash = config_hash(cfg);
    const std::filesystem::path out = detail::preprocessed_dir(cfg);
    if (detail::stamp_matches(out, hash) && std::filesystem::exists(out / "split.json")) {
        return out;
    }

    const std::vector<SubjectMeta> cohort = list_cohort(cfg.data_dir);
    const SubjectMeta& atlas_meta = select_atlas(cohort, cfg.atlas_subject);

    // Clean the atlas subject first: its CT is the registration reference.
    const SubjectRecord atlas_raw = load_subject(cfg.data_dir / atlas_meta.subject_id);
    const Volume reference = preprocess::remove_bed(atlas_raw.ct);

    std::filesystem::create_directories(out);
    for (const auto& meta : cohort) {
        const std::filesystem::path sdir = out / meta.subject_id;
        SubjectRecord rec = load_subject(cfg.data_dir / meta.subject_id);

        Volume ct = preprocess::remove_bed(rec.ct);
        Volume mri = preprocess::correct_bias(rec.mri);

        // Within-subject 9-DOF MRI->CT alignment (cross-modality metric).
        const preprocess::SimilarityTransform mri_to_ct = preprocess::register_volumes(
            mri, ct, preprocess::RegMode::similarity9, preprocess::RegMetric::mutual_information);
        mri = preprocess::apply_transform(mri, mri_to_ct);

        // Rigid alignment of the subject onto the reference CT; labels ride
        // along. The atlas subject is the reference, so its transform is
        // the identity.
        preprocess::SimilarityTransform ct_to_ref;
        if (meta.subject_id != atlas_meta.subject_id) {
            ct_to_ref = preprocess::register_volumes(ct, reference, preprocess::RegMode::rigid6,
                                                     preprocess::RegMetric::mse);
            ct = preprocess::apply_transform(ct, ct_to_ref);
            mri = preprocess::apply_transform(mri, ct_to_ref);
            rec.bones_sutures = preprocess::apply_transform(rec.bones_sutures, ct_to_ref);
        }

        rec.mri = resample(mri, cfg.grid);
        rec.ct = resample(ct, cfg.grid);
        rec.bones_sutures = resample(rec.bones_sutures, cfg.grid);
        write_subject(sdir, rec);
        preprocess::save_transform(mri_to_ct, sdir / "mri_to_ct.json");
        preprocess::save_transform(ct_to_ref, sdir / "ct_to_ref.json");
    }

    // A pre-seeded split.json that covers exactly this cohort is kept (it
    // lets callers pin a hand-built split, e.g. for cohorts below the
    // stratified splitter's minimum); anything else is recomputed.
    bool reuse_split = false;
    if (std::filesystem::exists(out / "split.json")) {
        try {
            const SplitAssignment existing = detail::load_split(out / "split.json");
            reuse_split = existing.parts.size() == cohort.size() &&
                          std::all_of(cohort.begin(), cohort.end(), [&](const SubjectMeta& m) {
                              return existing.parts.count(m.subject_id) == 1;
                          });
        } catch (const StateError&) {
            reuse_split = false;
        }
    }
    if (!reuse_split) {
        const SplitAssignment split = split_dataset(cohort, cfg.train_fraction, cfg.val_fraction,
                                                    cfg.test_fraction, cfg.seed);
        detail::save_split(split, out / "split.json");
    }

    // Atlas prior + reference CT, both on the common grid.
    const std::filesystem::path adir = out / "atlas";
    std::filesystem::create_directories(adir);
    const LabelMap atlas_labels =
        load_labels(out / atlas_meta.subject_id / "labels.vol");
    save_labels(atlas_labels, adir / "labels.vol");
    save_volume(resample(reference, cfg.grid), adir / "reference_ct.vol");
    {
        std::ofstream ainfo(adir / "atlas.json", std::ios::trunc);
        ainfo << nlohmann::json{{"subject_id", atlas_meta.subject_id},
                                {"age_days", atlas_meta.age_days}}
                     .dump(2)
              << "\n";
    }

    detail::write_stamp(out, hash, "preprocess");
    return out;
}

} // namespace calvaria::pipeline
