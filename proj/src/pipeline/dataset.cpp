#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "calvaria/core/errors.hpp"
#include "calvaria/core/rng.hpp"
#include "calvaria/core/volume_io.hpp"
#include "calvaria/pipeline/pipeline.hpp"

namespace calvaria::pipeline {

std::string to_string(SplitPart p) {
    switch (p) {
    case SplitPart::train: return "train";
    case SplitPart::val: return "val";
    case SplitPart::test: return "test";
    }
    throw ArgumentError("unknown split part");
}

SplitPart split_part_from_string(const std::string& s) {
    if (s == "train") return SplitPart::train;
    if (s == "val") return SplitPart::val;
    if (s == "test") return SplitPart::test;
    throw ArgumentError("unknown split part \"" + s + "\"");
}

std::vector<std::string> SplitAssignment::ids(SplitPart p) const {
    std::vector<std::string> out;
    for (const auto& [id, part] : parts) {
        if (part == p) {
            out.push_back(id);
        }
    }
    return out; // parts is an ordered map, so this is already sorted
}

namespace {

/// Apportions `total` slots over strata proportionally to their sizes,
/// flooring the ideal share and handing remainders to the largest
/// fractional parts (ties toward the earlier stratum).
std::vector<int> apportion(const std::vector<int>& sizes, int total) {
    const int n = std::accumulate(sizes.begin(), sizes.end(), 0);
    std::vector<int> out(sizes.size(), 0);
    std::vector<std::pair<double, std::size_t>> rema;
    int assigned = 0;
    for (std::size_t s = 0; s < sizes.size(); ++s) {
        const double ideal = n > 0 ? static_cast<double>(total) * sizes[s] / n : 0.0;
        out[s] = static_cast<int>(std::floor(ideal));
        out[s] = std::min(out[s], sizes[s]);
        assigned += out[s];
        rema.emplace_back(ideal - std::floor(ideal), s);
    }
    std::stable_sort(rema.begin(), rema.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    bool progressed = true;
    while (assigned < total && progressed) {
        progressed = false;
        for (const auto& [frac, s] : rema) {
            (void)frac;
            if (assigned == total) {
                break;
            }
            if (out[s] < sizes[s]) {
                ++out[s];
                ++assigned;
                progressed = true;
            }
        }
    }
    return out;
}

} // namespace

SplitAssignment split_dataset(const std::vector<SubjectMeta>& cohort, double train_fraction,
                              double val_fraction, double test_fraction, std::uint64_t seed) {
    if (cohort.size() < 10) {
        throw ArgumentError("split_dataset: cohort must have at least 10 subjects, got " +
                            std::to_string(cohort.size()));
    }
    const double sum = train_fraction + val_fraction + test_fraction;
    if (!(train_fraction >= 0 && val_fraction >= 0 && test_fraction >= 0) ||
        std::abs(sum - 1.0) > 1e-9) {
        throw ArgumentError("split_dataset: fractions must be nonnegative and sum to 1");
    }

    const int n = static_cast<int>(cohort.size());
    const int n_val = static_cast<int>(std::llround(val_fraction * n));
    const int n_test = static_cast<int>(std::llround(test_fraction * n));
    if (n_val + n_test > n) {
        throw ArgumentError("split_dataset: val + test exceed the cohort");
    }

    // Age terciles from the pooled sorted ages; strata are sex x tercile.
    std::vector<int> ages;
    ages.reserve(cohort.size());
    for (const auto& m : cohort) {
        ages.push_back(m.age_days);
    }
    std::sort(ages.begin(), ages.end());
    const int cut1 = ages[static_cast<std::size_t>(n / 3)];
    const int cut2 = ages[static_cast<std::size_t>(2 * n / 3)];
    const auto stratum_of = [&](const SubjectMeta& m) {
        const int tercile = m.age_days < cut1 ? 0 : (m.age_days < cut2 ? 1 : 2);
        return (m.sex == Sex::M ? 0 : 3) + tercile;
    };

    std::array<std::vector<std::string>, 6> strata;
    for (const auto& m : cohort) {
        strata[static_cast<std::size_t>(stratum_of(m))].push_back(m.subject_id);
    }
    std::vector<int> sizes;
    for (const auto& s : strata) {
        sizes.push_back(static_cast<int>(s.size()));
    }
    const std::vector<int> val_quota = apportion(sizes, n_val);
    const std::vector<int> test_quota = apportion(sizes, n_test);

    SplitAssignment split;
    for (std::size_t s = 0; s < strata.size(); ++s) {
        auto& ids = strata[s];
        std::sort(ids.begin(), ids.end());
        Rng rng(Rng::derive_seed(seed, s));
        for (std::size_t i = ids.size(); i > 1; --i) { // Fisher-Yates
            std::swap(ids[i - 1], ids[rng.uniform_int(i)]);
        }
        std::size_t k = 0;
        for (int i = 0; i < val_quota[s]; ++i) {
            split.parts[ids[k++]] = SplitPart::val;
        }
        for (int i = 0; i < test_quota[s] && k < ids.size(); ++i) {
            split.parts[ids[k++]] = SplitPart::test;
        }
        for (; k < ids.size(); ++k) {
            split.parts[ids[k]] = SplitPart::train;
        }
    }

    // A quota can be unfillable in a tiny stratum; rebalance from train.
    const auto count = [&](SplitPart p) {
        int c = 0;
        for (const auto& [id, part] : split.parts) {
            (void)id;
            if (part == p) ++c;
        }
        return c;
    };
    Rng fix_rng(Rng::derive_seed(seed, 6));
    for (const auto [part, want] :
         {std::pair{SplitPart::val, n_val}, std::pair{SplitPart::test, n_test}}) {
        int have = count(part);
        auto train_ids = split.ids(SplitPart::train);
        while (have < want && !train_ids.empty()) {
            const std::size_t pick = fix_rng.uniform_int(train_ids.size());
            split.parts[train_ids[pick]] = part;
            train_ids.erase(train_ids.begin() + static_cast<std::ptrdiff_t>(pick));
            ++have;
        }
    }
    return split;
}

const SubjectMeta& select_atlas(const std::vector<SubjectMeta>& cohort,
                                const std::optional<std::string>& explicit_id) {
    if (cohort.empty()) {
        throw ArgumentError("select_atlas: empty cohort");
    }
    if (explicit_id) {
        for (const auto& m : cohort) {
            if (m.subject_id == *explicit_id) {
                return m;
            }
        }
        throw ArgumentError("select_atlas: subject \"" + *explicit_id + "\" is not in the cohort");
    }
    const SubjectMeta* best = &cohort.front();
    for (const auto& m : cohort) {
        if (m.age_days < best->age_days ||
            (m.age_days == best->age_days && m.subject_id < best->subject_id)) {
            best = &m;
        }
    }
    return *best;
}

// ---------------------------------------------------------------------------
// Subject IO
// ---------------------------------------------------------------------------

void write_subject(const std::filesystem::path& dir, const SubjectRecord& rec) {
    std::filesystem::create_directories(dir);
    save_volume(rec.mri, dir / "mri.vol");
    save_volume(rec.ct, dir / "ct.vol");
    save_labels(rec.bones_sutures, dir / "labels.vol");
    const nlohmann::json meta{
        {"subject_id", rec.subject_id},
        {"age_days", rec.age_days},
        {"sex", to_string(rec.sex)},
    };
    std::ofstream out(dir / "subject.json", std::ios::trunc);
    if (!out) {
        throw StateError("write_subject: cannot write " + (dir / "subject.json").string());
    }
    out << meta.dump(2) << "\n";
}

SubjectMeta load_subject_meta(const std::filesystem::path& dir) {
    std::ifstream in(dir / "subject.json");
    if (!in) {
        throw FormatError("load_subject_meta: missing " + (dir / "subject.json").string());
    }
    nlohmann::json j;
    try {
        in >> j;
        SubjectMeta meta;
        meta.subject_id = j.at("subject_id").get<std::string>();
        meta.age_days = j.at("age_days").get<int>();
        meta.sex = sex_from_string(j.at("sex").get<std::string>());
        return meta;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_subject_meta: invalid " + (dir / "subject.json").string() + ": " +
                          e.what());
    }
}

SubjectRecord load_subject(const std::filesystem::path& dir) {
    const SubjectMeta meta = load_subject_meta(dir);
    SubjectRecord rec;
    rec.subject_id = meta.subject_id;
    rec.age_days = meta.age_days;
    rec.sex = meta.sex;
    rec.mri = load_volume(dir / "mri.vol");
    rec.ct = load_volume(dir / "ct.vol");
    rec.bones_sutures = load_labels(dir / "labels.vol");
    return rec;
}

std::vector<SubjectMeta> list_cohort(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) {
        throw StateError("list_cohort: " + root.string() + " is not a directory");
    }
    std::vector<SubjectMeta> cohort;
    for (const auto& entry : std::filesystem::directory_iterator(root)) {
        if (entry.is_directory() && std::filesystem::exists(entry.path() / "subject.json")) {
            cohort.push_back(load_subject_meta(entry.path()));
        }
    }
    if (cohort.empty()) {
        throw StateError("list_cohort: no subjects under " + root.string());
    }
    std::sort(cohort.begin(), cohort.end(),
              [](const SubjectMeta& a, const SubjectMeta& b) { return a.subject_id < b.subject_id; });
    return cohort;
}

} // namespace calvaria::pipeline
