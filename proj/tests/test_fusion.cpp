#include <doctest.h>

#include <cmath>

#include "m2fmoe/fusion.hpp"
#include "oracles.hpp"

using namespace m2fmoe;

TEST_SUITE("fusion") {

TEST_CASE("segment_recent") {
    Tensor x({10, 1});
    for (int64_t i = 0; i < 10; ++i) x.at2(i, 0) = static_cast<double>(i + 1);
    Tensor all = segment_recent(x, 10);
    CHECK(all.v == x.v);
    Tensor tail = segment_recent(x, 3);
    CHECK(tail.v == std::vector<double>({8, 9, 10}));
    // idempotent at the same length
    CHECK(segment_recent(tail, 3).v == tail.v);
    CHECK_THROWS_AS(segment_recent(x, 11), ConfigError);
    CHECK_THROWS_AS(segment_recent(x, 0), ConfigError);
}

TEST_CASE("smooth_conv hand values and contracts") {
    Tensor x = Tensor::from({4, 1}, {1, 3, 5, 7});
    CHECK(smooth_conv(x, 1).v == x.v);
    CHECK(smooth_conv(x, 2).v == std::vector<double>({1, 2, 4, 6}));
    Tensor c({6, 1}, 3.25);
    for (int64_t k = 1; k <= 6; ++k) CHECK(smooth_conv(c, k).v == c.v);
    CHECK_THROWS_AS(smooth_conv(x, 5), ConfigError);

    // contraction toward the window mean: output range within input range
    Rng rng(3, "smooth");
    Tensor r = oracles::random_tensor({30, 2}, rng);
    Tensor s = smooth_conv(r, 5);
    double in_lo = 1e300, in_hi = -1e300, out_lo = 1e300, out_hi = -1e300;
    for (double v : r.v) { in_lo = std::min(in_lo, v); in_hi = std::max(in_hi, v); }
    for (double v : s.v) { out_lo = std::min(out_lo, v); out_hi = std::max(out_hi, v); }
    CHECK(out_lo >= in_lo - 1e-12);
    CHECK(out_hi <= in_hi + 1e-12);
}

TEST_CASE("first_diff and telescoping") {
    Tensor x = Tensor::from({3, 1}, {1, 2, 4});
    CHECK(first_diff(x).v == std::vector<double>({1, 2}));
    Tensor c({5, 1}, 2.5);
    for (double v : first_diff(c).v) CHECK(v == 0.0);
    // cumulative sum of the diff plus x0 reconstructs x
    Rng rng(9, "diff");
    Tensor r = oracles::random_tensor({20, 1}, rng);
    Tensor d = first_diff(r);
    double acc = r.at2(0, 0);
    for (int64_t i = 0; i < d.shape[0]; ++i) {
        acc += d.at2(i, 0);
        CHECK(acc == doctest::Approx(r.at2(i + 1, 0)).epsilon(1e-12));
    }
    Tensor one({1, 1}, 1.0);
    CHECK_THROWS_AS(first_diff(one), ShapeError);
}

TEST_CASE("positional embedding") {
    Tensor pe = positional_embedding(8);
    CHECK(pe.shape == std::vector<int64_t>({8, 2}));
    CHECK(pe.at2(0, 0) == 0.0);
    CHECK(pe.at2(0, 1) == 1.0);
    for (int64_t i = 0; i < 8; ++i) {
        double s = pe.at2(i, 0), c = pe.at2(i, 1);
        CHECK(s * s + c * c == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(positional_embedding(8).v == pe.v);  // deterministic
}

TEST_CASE("multi_view_fuse shapes and eval determinism") {
    for (int64_t c : {1, 3}) {
        Rng rng(static_cast<uint64_t>(c), "fuse");
        int64_t t_p = 6, hidden = 8;
        Tensor vf = oracles::random_tensor({t_p, c}, rng);
        Tensor vw = oracles::random_tensor({t_p, c}, rng);
        Tensor pos = positional_embedding(t_p);
        Tensor u1 = oracles::random_tensor({hidden, 2 * c + 2}, rng);
        Tensor u2 = oracles::random_tensor({c, hidden}, rng);
        BatchNormState bn;
        bn.init(hidden);
        auto run_once = [&]() {
            Tape t;
            Rng drop(5, "drop");
            MafStackTensors p{constant(t, u1), constant(t, u2)};
            return multi_view_fuse(t, constant(t, vf), constant(t, vw), constant(t, pos), p, bn,
                                   false, 0.2, drop);
        };
        Tensor h1 = run_once();
        Tensor h2 = run_once();
        CHECK(h1.shape == std::vector<int64_t>({t_p, c}));
        CHECK(h1.v == h2.v);  // eval mode determinism (bit-exact)
    }
}

TEST_CASE("multi_view_fuse gradient through the full stack") {
    Rng rng(17, "fusegrad");
    int64_t t_p = 5, c = 2, hidden = 4;
    Tensor vf = oracles::random_tensor({t_p, c}, rng);
    Tensor vw = oracles::random_tensor({t_p, c}, rng);
    Tensor pos = positional_embedding(t_p);
    Tensor u1 = oracles::random_tensor({hidden, 2 * c + 2}, rng);
    Tensor u2 = oracles::random_tensor({c, hidden}, rng);
    Tensor probe = oracles::random_tensor({t_p, c}, rng);

    auto eval = [&](const std::vector<double>& u1v) {
        Tape t;
        Rng drop(5, "drop");
        BatchNormState bn;
        MafStackTensors p{leaf(t, Tensor::from({hidden, 2 * c + 2}, u1v)), constant(t, u2)};
        Tensor h = multi_view_fuse(t, constant(t, vf), constant(t, vw), constant(t, pos), p, bn,
                                   true, 0.0, drop);
        return reduce_sum(t, mul(t, h, constant(t, probe))).item();
    };
    Tape t;
    Rng drop(5, "drop");
    BatchNormState bn;
    MafStackTensors p{leaf(t, u1), constant(t, u2)};
    Tensor h = multi_view_fuse(t, constant(t, vf), constant(t, vw), constant(t, pos), p, bn, true,
                               0.0, drop);
    backward(t, reduce_sum(t, mul(t, h, constant(t, probe))));
    CHECK(oracles::max_rel_err(t.grad(p.u1_w.node),
                               oracles::central_diff(eval, u1.v, 1e-6)) < 1e-4);
}

TEST_CASE("multi_resolution_fuse shift restore and additivity") {
    int64_t n = 4, c = 2;
    Tensor last({n, c});
    for (int64_t i = 0; i < n; ++i) {
        last.at2(i, 0) = 7.0;
        last.at2(i, 1) = -2.0;
    }
    Tensor ident = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor zero_bias({2}, 0.0);

    {
        // R=1, identity map, zero H_u: every row equals the last observed value
        Tape t;
        std::vector<Tensor> h = {constant(t, Tensor({n, c}, 0.0))};
        std::vector<ResolutionOutputTensors> maps = {{constant(t, ident), constant(t, zero_bias)}};
        Tensor out = multi_resolution_fuse(t, h, maps, constant(t, last));
        CHECK(out.v == last.v);
    }
    {
        // R=2 identity maps: output equals h1+h2+shift, resolution order irrelevant
        Rng rng(7, "mrf");
        Tensor h1 = oracles::random_tensor({n, c}, rng);
        Tensor h2 = oracles::random_tensor({n, c}, rng);
        auto fuse = [&](const Tensor& a, const Tensor& b) {
            Tape t;
            std::vector<Tensor> h = {constant(t, a), constant(t, b)};
            std::vector<ResolutionOutputTensors> maps = {
                {constant(t, ident), constant(t, zero_bias)},
                {constant(t, ident), constant(t, zero_bias)}};
            return multi_resolution_fuse(t, h, maps, constant(t, last));
        };
        Tensor out = fuse(h1, h2);
        Tensor swapped = fuse(h2, h1);
        for (int64_t i = 0; i < out.numel(); ++i) {
            double expect = h1.v[static_cast<size_t>(i)] + h2.v[static_cast<size_t>(i)] +
                            last.v[static_cast<size_t>(i)];
            CHECK(out.v[static_cast<size_t>(i)] == doctest::Approx(expect).epsilon(1e-12));
            CHECK(out.v[static_cast<size_t>(i)] ==
                  doctest::Approx(swapped.v[static_cast<size_t>(i)]).epsilon(1e-12));
        }
    }
}

}  // TEST_SUITE
