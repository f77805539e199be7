#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>

#include "calvaria/phantom/phantom.hpp"

using namespace calvaria;
using namespace calvaria::phantom;

namespace {

std::array<std::int64_t, LabelMap::kNumCodes> histogram(const LabelMap& m) {
    std::array<std::int64_t, LabelMap::kNumCodes> h{};
    for (std::uint8_t c : m.data) ++h[c];
    return h;
}

PhantomSpec base_spec(std::uint64_t seed, int age, Shape3 grid = {32, 32, 32}) {
    PhantomSpec s;
    s.seed = seed;
    s.age_days = age;
    s.grid = grid;
    return s;
}

} // namespace

TEST_CASE("identical specs generate bit-identical subjects") {
    const auto a = generate_subject(base_spec(99, 300));
    const auto b = generate_subject(base_spec(99, 300));
    CHECK_EQ(a.mri.data, b.mri.data);
    CHECK_EQ(a.ct.data, b.ct.data);
    CHECK_EQ(a.bones_sutures.data, b.bones_sutures.data);
    CHECK_EQ(a.subject_id, b.subject_id);
}

TEST_CASE("every label code is present and sutures widen at younger ages") {
    for (int age : {80, 683}) {
        CAPTURE(age);
        const auto rec = generate_subject(base_spec(7, age, {48, 48, 48}));
        const auto h = histogram(rec.bones_sutures);
        for (int c = 0; c < LabelMap::kNumCodes; ++c) {
            CAPTURE(c);
            CHECK_GT(h[static_cast<std::size_t>(c)], 0);
        }
    }
    const auto young = generate_subject(base_spec(7, 80, {48, 48, 48}));
    const auto old = generate_subject(base_spec(7, 683, {48, 48, 48}));
    CHECK_GT(histogram(young.bones_sutures)[LabelMap::kSuture],
             histogram(old.bones_sutures)[LabelMap::kSuture]);
}

TEST_CASE("suture width model is strictly decreasing in age") {
    double prev = 1e9;
    for (int age = 36; age <= 730; age += 50) {
        const double w = suture_width_mm(3.5, age);
        CHECK_LT(w, prev);
        CHECK_GT(w, 0.0);
        prev = w;
    }
}

TEST_CASE("bone labels coincide with bright CT and sutures with the gap value") {
    const auto rec = generate_subject(base_spec(21, 400));
    for (std::size_t i = 0; i < rec.ct.data.size(); ++i) {
        const std::uint8_t c = rec.bones_sutures.data[i];
        if (c >= 1 && c <= 7) {
            CHECK_EQ(rec.ct.data[i], kCtBone);
            if (rec.ct.data[i] != kCtBone) break;
        } else if (c == LabelMap::kSuture) {
            CHECK_EQ(rec.ct.data[i], kCtSuture);
            if (rec.ct.data[i] != kCtSuture) break;
        } else {
            CHECK_NE(rec.ct.data[i], kCtBone);
            if (rec.ct.data[i] == kCtBone) break;
        }
    }
}

TEST_CASE("CT bone intensity clears all soft tissue by the 0.3 margin") {
    const auto rec = generate_subject(base_spec(33, 500));
    float min_bone = 1e9f, max_soft = -1e9f;
    for (std::size_t i = 0; i < rec.ct.data.size(); ++i) {
        const std::uint8_t c = rec.bones_sutures.data[i];
        if (c >= 1 && c <= 7) {
            min_bone = std::min(min_bone, rec.ct.data[i]);
        } else if (rec.ct.data[i] > 0.0f) {
            max_soft = std::max(max_soft, rec.ct.data[i]);
        }
    }
    CHECK_GE(min_bone - max_soft, 0.3f);
}

TEST_CASE("MRI bone signal is near background level") {
    const auto spec = base_spec(17, 350);
    const auto rec = generate_subject(spec);
    double bone_sum = 0, bg_sum = 0;
    std::int64_t bone_n = 0, bg_n = 0;
    for (std::size_t i = 0; i < rec.mri.data.size(); ++i) {
        const std::uint8_t c = rec.bones_sutures.data[i];
        if (c >= 1 && c <= 7) {
            bone_sum += rec.mri.data[i];
            ++bone_n;
        } else if (rec.ct.data[i] == 0.0f) {
            bg_sum += rec.mri.data[i];
            ++bg_n;
        }
    }
    REQUIRE_GT(bone_n, 0);
    REQUIRE_GT(bg_n, 0);
    CHECK_LT(std::abs(bone_sum / bone_n - bg_sum / bg_n), spec.noise_sigma);
}

TEST_CASE("suture voxels touch two distinct bone plates when no fontanelle exists") {
    PhantomSpec spec = base_spec(5, 600, {48, 48, 48});
    spec.fontanelle = false; // age >= 120, so it stays off
    const auto rec = generate_subject(spec);
    const auto& m = rec.bones_sutures;
    const auto [D, H, W] = m.shape;
    int violations = 0;
    for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                if (m.at(d, h, w) != LabelMap::kSuture) continue;
                bool seen[8] = {};
                int distinct = 0;
                for (int dd = -1; dd <= 1; ++dd)
                    for (int hh = -1; hh <= 1; ++hh)
                        for (int ww = -1; ww <= 1; ++ww) {
                            const int x = d + dd, y = h + hh, z = w + ww;
                            if ((dd || hh || ww) && x >= 0 && x < D && y >= 0 && y < H &&
                                z >= 0 && z < W) {
                                const std::uint8_t c = m.at(x, y, z);
                                if (c >= 1 && c <= 7 && !seen[c]) {
                                    seen[c] = true;
                                    ++distinct;
                                }
                            }
                        }
                if (distinct < 2) ++violations;
            }
    CHECK_EQ(violations, 0);
}

TEST_CASE("fontanelle is forced for young subjects and enlarges the suture area") {
    PhantomSpec young = base_spec(13, 80, {48, 48, 48});
    young.fontanelle = false; // forced on anyway at 80 days
    const auto with_patch = generate_subject(young);

    PhantomSpec old_spec = base_spec(13, 80, {48, 48, 48});
    // same geometry seed at a later age: patch shrinks and gates narrow
    old_spec.age_days = 700;
    const auto old_rec = generate_subject(old_spec);
    CHECK_GT(histogram(with_patch.bones_sutures)[LabelMap::kSuture],
             histogram(old_rec.bones_sutures)[LabelMap::kSuture]);
}

TEST_CASE("unsatisfiable suture geometry is a generation error") {
    PhantomSpec s = base_spec(1, 100);
    s.suture_base_width_mm = 80.0;
    CHECK_THROWS_AS(generate_subject(s), GenerationError);
}

TEST_CASE("spec validation") {
    PhantomSpec s = base_spec(1, 100);
    s.grid = {16, 32, 32};
    CHECK_THROWS_AS(generate_subject(s), ArgumentError);
    s = base_spec(1, 20);
    CHECK_THROWS_AS(generate_subject(s), ArgumentError);
    s = base_spec(1, 800);
    CHECK_THROWS_AS(generate_subject(s), ArgumentError);
    s = base_spec(1, 100);
    s.noise_sigma = -0.1;
    CHECK_THROWS_AS(generate_subject(s), ArgumentError);
}

TEST_CASE("cohorts balance sexes and stay in the age range") {
    const auto four = cohort_specs(4, 11, {32, 32, 32});
    int m4 = 0;
    for (const auto& s : four) m4 += s.sex == Sex::M;
    CHECK_EQ(m4, 2);

    const auto specs = cohort_specs(116, 42, {32, 32, 32});
    int males = 0;
    for (const auto& s : specs) {
        males += s.sex == Sex::M;
        CHECK_GE(s.age_days, 36);
        CHECK_LE(s.age_days, 730);
        if (s.age_days < 120) CHECK(s.fontanelle);
    }
    CHECK_EQ(males, 58);

    // distinct per-subject seeds
    for (std::size_t i = 1; i < specs.size(); ++i) {
        CHECK_NE(specs[i].seed, specs[0].seed);
    }
    CHECK_THROWS_AS(cohort_specs(3, 1, {32, 32, 32}), ArgumentError);
}

TEST_CASE("cohort generation is deterministic and ids are ordinal") {
    const auto a = generate_cohort(4, 5, {32, 32, 32});
    const auto b = generate_cohort(4, 5, {32, 32, 32});
    REQUIRE_EQ(a.size(), 4);
    CHECK_EQ(a[0].subject_id, "subject_000");
    CHECK_EQ(a[3].subject_id, "subject_003");
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK_EQ(a[i].mri.data, b[i].mri.data);
        CHECK_EQ(a[i].bones_sutures.data, b[i].bones_sutures.data);
        CHECK_EQ(a[i].age_days, b[i].age_days);
    }
}
