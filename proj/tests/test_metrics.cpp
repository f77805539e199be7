#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "calvaria/core/rng.hpp"
#include "calvaria/metrics/metrics.hpp"
#include "calvaria/models/models.hpp"

using namespace calvaria;
using namespace calvaria::metrics;

namespace {

Volume random_volume(Shape3 shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    Volume v(shape, {1, 1, 1}, Modality::CT);
    Rng rng(seed);
    for (auto& x : v.data) {
        x = static_cast<float>(rng.uniform(lo, hi));
    }
    return v;
}

// Direct (non-separable) windowed SSIM recomputation used as an oracle.
double ssim_direct(const Volume& a, const Volume& b) {
    const double c1 = 1e-4, c2 = 9e-4, sigma = 1.5;
    double taps[7];
    double norm = 0;
    for (int i = 0; i < 7; ++i) {
        taps[i] = std::exp(-(i - 3.0) * (i - 3.0) / (2 * sigma * sigma));
        norm += taps[i];
    }
    for (double& t : taps) t /= norm;

    const auto [D, H, W] = a.shape;
    double total = 0;
    int count = 0;
    for (int d = 3; d < D - 3; ++d)
        for (int h = 3; h < H - 3; ++h)
            for (int w = 3; w < W - 3; ++w) {
                double ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
                for (int i = -3; i <= 3; ++i)
                    for (int j = -3; j <= 3; ++j)
                        for (int k = -3; k <= 3; ++k) {
                            const double wt = taps[i + 3] * taps[j + 3] * taps[k + 3];
                            const double x = a.at(d + i, h + j, w + k);
                            const double y = b.at(d + i, h + j, w + k);
                            ma += wt * x;
                            mb += wt * y;
                            maa += wt * x * x;
                            mbb += wt * y * y;
                            mab += wt * x * y;
                        }
                const double va = maa - ma * ma, vb = mbb - mb * mb, cov = mab - ma * mb;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                         ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return total / count;
}

LabelMap cube_map(Shape3 shape, int label, int lo0, int lo1, int lo2, int side) {
    LabelMap m(shape, {1, 1, 1});
    for (int d = lo0; d < lo0 + side; ++d)
        for (int h = lo1; h < lo1 + side; ++h)
            for (int w = lo2; w < lo2 + side; ++w)
                m.at(d, h, w) = static_cast<std::uint8_t>(label);
    return m;
}

} // namespace

TEST_CASE("ssim of a volume with itself is 1") {
    const Volume v = random_volume({12, 12, 12}, 1);
    CHECK_EQ(ssim(v, v), doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("ssim of constant 0 vs constant 1 follows the scalar formula") {
    Volume a({8, 8, 8}, {1, 1, 1}, Modality::CT, 0.0f);
    Volume b({8, 8, 8}, {1, 1, 1}, Modality::CT, 1.0f);
    const double c1 = 1e-4;
    CHECK_EQ(ssim(a, b), doctest::Approx(c1 / (1.0 + c1)).epsilon(1e-9));
}

TEST_CASE("ssim matches the direct windowed recomputation") {
    const Volume a = random_volume({16, 16, 16}, 3);
    Volume b = a;
    Rng rng(4);
    for (auto& x : b.data) {
        x = std::clamp(x + static_cast<float>(rng.gaussian(0.0, 0.1)), 0.0f, 1.0f);
    }
    CHECK_EQ(ssim(a, b), doctest::Approx(ssim_direct(a, b)).epsilon(1e-6));
    CHECK_GT(ssim(a, b), -1.0);
    CHECK_LT(ssim(a, b), 1.0);
}

TEST_CASE("ssim rejects mismatched shapes") {
    CHECK_THROWS_AS(ssim(random_volume({8, 8, 8}, 1), random_volume({8, 8, 9}, 1)), ShapeError);
}

TEST_CASE("psnr and mae fixtures") {
    const Volume a = random_volume({10, 10, 10}, 5);

    SUBCASE("identical volumes") {
        const auto r = psnr_mae(a, a);
        CHECK(std::isinf(r.psnr_db));
        CHECK_GT(r.psnr_db, 0);
        CHECK_EQ(r.mae, 0.0);
    }
    SUBCASE("uniform offset of 0.1") {
        Volume b = a;
        for (auto& x : b.data) x += 0.1f;
        const auto r = psnr_mae(a, b);
        CHECK_EQ(r.mae, doctest::Approx(0.1).epsilon(1e-6));
        CHECK_EQ(r.psnr_db, doctest::Approx(20.0).epsilon(1e-5));
    }
    SUBCASE("half the voxels differ by 0.2") {
        Volume b = a;
        for (std::size_t i = 0; i < b.data.size(); i += 2) b.data[i] += 0.2f;
        CHECK_EQ(psnr_mae(a, b).mae, doctest::Approx(0.1).epsilon(1e-6));
    }
}

TEST_CASE("psnr strictly decreases as noise amplitude grows") {
    const Volume base = random_volume({12, 12, 12}, 8);
    Rng rng(9);
    std::vector<float> noise(base.data.size());
    for (auto& x : noise) x = static_cast<float>(rng.gaussian());

    double prev = std::numeric_limits<double>::infinity();
    for (double amp : {0.01, 0.05, 0.1, 0.3}) {
        Volume noisy = base;
        for (std::size_t i = 0; i < noisy.data.size(); ++i) {
            noisy.data[i] += static_cast<float>(amp) * noise[i];
        }
        const double p = psnr_mae(base, noisy).psnr_db;
        CHECK_LT(p, prev);
        prev = p;
    }
}

TEST_CASE("fid of identical feature sets is zero") {
    Rng rng(11);
    std::vector<std::vector<float>> feats;
    for (int i = 0; i < 20; ++i) {
        std::vector<float> f(6);
        for (auto& x : f) x = static_cast<float>(rng.gaussian());
        feats.push_back(f);
    }
    CHECK_EQ(fid(feats, feats), doctest::Approx(0.0).epsilon(1).scale(1));
    CHECK_LT(std::abs(fid(feats, feats)), 1e-6);
    CHECK_GE(fid(feats, feats), -1e-6);
}

TEST_CASE("fid recovers the squared mean shift for equal covariances") {
    Rng rng(12);
    std::vector<std::vector<float>> a, b;
    for (int i = 0; i < 4000; ++i) {
        a.push_back({static_cast<float>(rng.gaussian(0.0, 1.0))});
        b.push_back({static_cast<float>(rng.gaussian(3.0, 1.0))});
    }
    CHECK_EQ(fid(a, b), doctest::Approx(9.0).epsilon(0.05));
}

TEST_CASE("fid closed form for diagonal covariances 4I vs I") {
    // Four sign combinations of (+-s, +-s) have exact sample moments
    // mu = 0, cov = (4 s^2 / 3) I; s = sqrt(3) gives 4I, s = sqrt(3)/2 gives I.
    const double sa = std::sqrt(3.0), sb = std::sqrt(3.0) / 2.0;
    std::vector<std::vector<float>> a, b;
    for (int sd : {-1, 1})
        for (int sh : {-1, 1}) {
            a.push_back({static_cast<float>(sd * sa), static_cast<float>(sh * sa)});
            b.push_back({static_cast<float>(sd * sb), static_cast<float>(sh * sb)});
        }
    // d * (4 + 1 - 2*2) = d = 2 (float-precision inputs)
    CHECK_EQ(fid(a, b), doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("fid is invariant under identical re-ordering of both sets' dimensions") {
    Rng rng(13);
    std::vector<std::vector<float>> a, b, ap, bp;
    for (int i = 0; i < 30; ++i) {
        std::vector<float> fa(4), fb(4);
        for (int j = 0; j < 4; ++j) {
            fa[j] = static_cast<float>(rng.gaussian(0.0, 1.0 + j));
            fb[j] = static_cast<float>(rng.gaussian(0.5, 1.5));
        }
        a.push_back(fa);
        b.push_back(fb);
        ap.push_back({fa[2], fa[0], fa[3], fa[1]});
        bp.push_back({fb[2], fb[0], fb[3], fb[1]});
    }
    CHECK_EQ(fid(a, b), doctest::Approx(fid(ap, bp)).epsilon(1e-9));
}

TEST_CASE("fid rejects singletons and mixed dimensions") {
    std::vector<std::vector<float>> one = {{1.0f, 2.0f}};
    std::vector<std::vector<float>> two = {{1.0f, 2.0f}, {3.0f, 4.0f}};
    std::vector<std::vector<float>> bad = {{1.0f, 2.0f}, {3.0f}};
    std::vector<std::vector<float>> other_dim = {{1.0f}, {2.0f}};
    CHECK_THROWS_AS(fid(one, two), ArgumentError);
    CHECK_THROWS_AS(fid(two, bad), ArgumentError);
    CHECK_THROWS_AS(fid(two, other_dim), ArgumentError);
}

TEST_CASE("dice voxel-counting fixtures") {
    SUBCASE("identical maps give 1 for present labels") {
        const LabelMap m = cube_map({16, 16, 16}, 3, 4, 4, 4, 5);
        const auto d = dice_per_label(m, m);
        CHECK_EQ(d.at(3), 1.0);
        CHECK_EQ(d.at(5), 1.0); // absent in both
    }
    SUBCASE("two 4-cubes overlapping in a 2x4x4 slab") {
        const LabelMap a = cube_map({16, 16, 16}, 1, 4, 4, 4, 4);
        const LabelMap b = cube_map({16, 16, 16}, 1, 6, 4, 4, 4);
        CHECK_EQ(dice_per_label(a, b).at(1), doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("label present in exactly one map gives 0") {
        const LabelMap a = cube_map({16, 16, 16}, 2, 4, 4, 4, 4);
        const LabelMap empty({16, 16, 16}, {1, 1, 1});
        CHECK_EQ(dice_per_label(a, empty).at(2), 0.0);
    }
    SUBCASE("symmetry") {
        const LabelMap a = cube_map({16, 16, 16}, 4, 3, 3, 3, 6);
        const LabelMap b = cube_map({16, 16, 16}, 4, 5, 4, 3, 6);
        CHECK_EQ(dice_per_label(a, b).at(4), dice_per_label(b, a).at(4));
    }
    SUBCASE("dice shrinks as the symmetric difference grows") {
        const LabelMap gt = cube_map({20, 20, 20}, 1, 4, 4, 4, 8);
        double prev = 1.0;
        for (int shift : {1, 2, 3, 4}) {
            const LabelMap pred = cube_map({20, 20, 20}, 1, 4 + shift, 4, 4, 8);
            const double d = dice_per_label(pred, gt).at(1);
            CHECK_LT(d, prev);
            prev = d;
        }
    }
}

TEST_CASE("hd95 of identical masks is zero") {
    const LabelMap m = cube_map({16, 16, 16}, 2, 4, 4, 4, 6);
    CHECK_EQ(hd95(m, m, 2), 0.0);
}

TEST_CASE("hd95 of two single voxels is their distance") {
    LabelMap a({12, 12, 12}, {1.5, 1, 1});
    LabelMap b({12, 12, 12}, {1.5, 1, 1});
    a.at(4, 4, 4) = 7;
    b.at(6, 4, 4) = 7; // 2 voxels * 1.5 mm = 3 mm apart
    CHECK_EQ(hd95(a, b, 7), doctest::Approx(3.0).epsilon(1e-12));
    CHECK_EQ(hd95(b, a, 7), doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("hd95 matches a brute-force all-pairs oracle") {
    const LabelMap a = cube_map({24, 24, 24}, 1, 4, 4, 4, 8);
    const LabelMap b = cube_map({24, 24, 24}, 1, 6, 4, 4, 8);

    auto collect = [](const LabelMap& m, int label) {
        const auto mask = boundary_mask(m, label);
        std::vector<std::array<int, 3>> pts;
        const auto [D, H, W] = m.shape;
        for (int d = 0; d < D; ++d)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w)
                    if (mask[m.index(d, h, w)]) pts.push_back({d, h, w});
        return pts;
    };
    const auto pa = collect(a, 1);
    const auto pb = collect(b, 1);
    std::vector<double> pooled;
    auto directed = [&](const auto& from, const auto& to) {
        for (const auto& p : from) {
            double best = 1e300;
            for (const auto& q : to) {
                const double dd = p[0] - q[0], hh = p[1] - q[1], ww = p[2] - q[2];
                best = std::min(best, dd * dd + hh * hh + ww * ww);
            }
            pooled.push_back(std::sqrt(best));
        }
    };
    directed(pa, pb);
    directed(pb, pa);
    std::sort(pooled.begin(), pooled.end());
    const double rank = 0.95 * (static_cast<double>(pooled.size()) - 1);
    const auto lo = static_cast<std::size_t>(rank);
    const double expected = pooled[lo] + (rank - lo) * (pooled[lo + 1] - pooled[lo]);

    const double got = hd95(a, b, 1);
    CHECK_EQ(got, doctest::Approx(expected).epsilon(1e-6));
    // pooled percentile never exceeds the max directed Hausdorff distance
    CHECK_LE(got, pooled.back() + 1e-12);
}

TEST_CASE("hd95 is symmetric and rejects empty labels") {
    const LabelMap a = cube_map({16, 16, 16}, 3, 3, 3, 3, 5);
    const LabelMap b = cube_map({16, 16, 16}, 3, 7, 6, 5, 5);
    CHECK_EQ(hd95(a, b, 3), hd95(b, a, 3));
    CHECK_THROWS_AS(hd95(a, b, 4), UndefinedDistanceError);
    LabelMap off_grid = a;
    off_grid.spacing_mm = {2, 1, 1};
    CHECK_THROWS_AS(hd95(a, off_grid, 3), ShapeError);
}

TEST_CASE("percentile and mean/sd helpers") {
    CHECK_EQ(percentile({4, 1, 3, 2}, 50), doctest::Approx(2.5));
    CHECK_EQ(percentile({5}, 95), 5.0);
    CHECK_EQ(percentile({1, 2, 3, 4, 5}, 0), 1.0);
    CHECK_EQ(percentile({1, 2, 3, 4, 5}, 100), 5.0);
    CHECK_THROWS_AS(percentile({}, 50), ArgumentError);

    const auto ms = mean_sd({1, 2, 3, 4});
    CHECK_EQ(ms.mean, doctest::Approx(2.5));
    CHECK_EQ(ms.sd, doctest::Approx(std::sqrt(5.0 / 3.0)));
    CHECK_EQ(mean_sd({7}).sd, 0.0);
}

TEST_CASE("perceptual distance is zero at identity and symmetric") {
    const Volume a = random_volume({16, 16, 16}, 901);
    CHECK_EQ(perceptual_distance(a, a), 0.0);
    const Volume b = random_volume({16, 16, 16}, 902);
    const double ab = perceptual_distance(a, b);
    CHECK_GT(ab, 0.0);
    CHECK_LT(std::abs(ab - perceptual_distance(b, a)), 1e-9);
    Volume off = b;
    off.shape = {16, 16, 8};
    off.data.resize(2048);
    CHECK_THROWS_AS(perceptual_distance(a, off), ShapeError);
}

TEST_CASE("perceptual distance grows with noise amplitude") {
    const Volume x = random_volume({16, 16, 16}, 903);
    Volume noise = random_volume({16, 16, 16}, 904, -1.0, 1.0);
    Volume x1 = x, x2 = x;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        x1.data[i] = x.data[i] + 0.1f * noise.data[i];
        x2.data[i] = x.data[i] + 0.2f * noise.data[i];
    }
    CHECK_GT(perceptual_distance(x, x2), perceptual_distance(x, x1));
}

TEST_CASE("perceptual distance matches a direct recomputation from the stack") {
    const Volume a = random_volume({16, 16, 16}, 905);
    const Volume b = random_volume({16, 16, 16}, 906);
    const models::FrozenFeatures stack; // canonical seed
    const auto fa = stack.features(a);
    const auto fb = stack.features(b);
    double expected = 0.0;
    for (std::size_t l = 0; l < fa.size(); ++l) {
        const std::int64_t n = fa[l].voxels();
        double layer = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            double na = 1e-10, nb = 1e-10;
            for (int c = 0; c < fa[l].c; ++c) {
                na += static_cast<double>(fa[l].data[static_cast<std::size_t>(c) * n + i]) *
                      fa[l].data[static_cast<std::size_t>(c) * n + i];
                nb += static_cast<double>(fb[l].data[static_cast<std::size_t>(c) * n + i]) *
                      fb[l].data[static_cast<std::size_t>(c) * n + i];
            }
            for (int c = 0; c < fa[l].c; ++c) {
                const double d =
                    fa[l].data[static_cast<std::size_t>(c) * n + i] / std::sqrt(na) -
                    fb[l].data[static_cast<std::size_t>(c) * n + i] / std::sqrt(nb);
                layer += d * d;
            }
        }
        expected += layer / static_cast<double>(n);
    }
    expected /= static_cast<double>(fa.size());
    CHECK_EQ(perceptual_distance(a, b), doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("fid descriptors tile the volume and use the canonical stack") {
    const Volume small = random_volume({16, 16, 16}, 907);
    const auto single = fid_descriptors(small);
    REQUIRE_EQ(single.size(), 1);
    REQUIRE_EQ(single[0].size(), models::FrozenFeatures::kDescriptorDim);
    const models::FrozenFeatures stack;
    const auto direct = stack.descriptor(models::to_tensor(small));
    CHECK(single[0] == direct);

    const Volume vol = random_volume({24, 24, 24}, 908);
    const auto many = fid_descriptors(vol);
    CHECK_EQ(many.size(), 8); // anchors {0, 8} per axis
    const auto again = fid_descriptors(vol);
    CHECK(many == again);

    const double self_fid = fid(many, again);
    CHECK_LT(std::abs(self_fid), 1e-6);

    CHECK_THROWS_AS(fid_descriptors(vol, 16, 0), ArgumentError);
    CHECK_THROWS_AS(fid_descriptors(vol, 8, 8), ArgumentError);
    CHECK_THROWS_AS(fid_descriptors(small, 24, 8), ArgumentError);
}
