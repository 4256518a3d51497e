#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <vector>

#include "hamkit/graddiff.hpp"
#include "hamkit/trainer.hpp"

using namespace hamkit;

namespace {

SyntheticTaskSpec small_spec() {
    SyntheticTaskSpec spec;
    spec.height = 8;
    spec.width = 8;
    spec.c_in = 6;
    spec.classes = 2;
    spec.r_true = 3;
    spec.noise_sigma = 0.1;
    spec.texture_library = 4;
    spec.train_count = 12;
    spec.val_count = 6;
    spec.test_count = 6;
    spec.seed = 7;
    return spec;
}

ModelConfig small_model(ContextKind context, const SyntheticTaskSpec& spec) {
    ModelConfig mc;
    mc.c_in = spec.c_in;
    mc.d_z = 8;
    mc.classes = spec.classes;
    mc.context = context;
    mc.ham.d_z = 8;
    mc.ham.d = 8;
    mc.ham.r = 2;
    mc.ham.k = 2;
    mc.ham.model = MdModel(MdKind::VQ, 0.05);
    mc.ham.grad_mode = GradMode::OneStep;
    return mc;
}

}  // namespace

TEST_CASE("task generator structure") {
    SyntheticTaskSpec spec = small_spec();

    SECTION("zero noise gives a low-rank unfolded matrix") {
        SyntheticTaskSpec clean = spec;
        clean.noise_sigma = 0.0;
        Dataset data = make_synthetic_task(clean);
        for (std::size_t s = 0; s < 3; ++s) {
            auto sv = singular_values(data.train[s].x);
            // Four quadrant regions, each a single texture column repeated.
            REQUIRE(sv.size() > 4);
            CHECK(sv[4] / sv[0] < 1e-10);
        }
    }

    SECTION("same seed is bit-identical, splits differ") {
        Dataset a = make_synthetic_task(spec);
        Dataset b = make_synthetic_task(spec);
        REQUIRE(a.train.size() == b.train.size());
        for (std::size_t s = 0; s < a.train.size(); ++s) {
            CHECK(a.train[s].x.data == b.train[s].x.data);
            CHECK(a.train[s].labels == b.train[s].labels);
        }
        CHECK(a.train[0].x.data != a.val[0].x.data);
        CHECK(a.val[0].x.data != a.test[0].x.data);
    }

    SECTION("label histogram is roughly balanced") {
        SyntheticTaskSpec audit = small_spec();
        audit.train_count = 64;
        Dataset data = make_synthetic_task(audit);
        std::vector<double> counts(audit.classes, 0.0);
        double total = 0.0;
        for (const Sample& s : data.train)
            for (int l : s.labels) {
                counts[static_cast<std::size_t>(l)] += 1.0;
                total += 1.0;
            }
        for (std::size_t c = 0; c < audit.classes; ++c)
            CHECK(counts[c] / total >= 0.5 / static_cast<double>(audit.classes));
    }

    SECTION("inconsistent specs are rejected") {
        SyntheticTaskSpec bad = spec;
        bad.r_true = bad.c_in + 1;
        CHECK_THROWS_AS(make_synthetic_task(bad), std::invalid_argument);
        bad = spec;
        bad.classes = bad.texture_library + 1;
        CHECK_THROWS_AS(make_synthetic_task(bad), std::invalid_argument);
        bad = spec;
        bad.noise_sigma = -0.1;
        CHECK_THROWS_AS(make_synthetic_task(bad), std::invalid_argument);
    }
}

TEST_CASE("dataset disk round trip") {
    namespace fs = std::filesystem;
    SyntheticTaskSpec spec = small_spec();
    spec.train_count = 3;
    spec.val_count = 2;
    spec.test_count = 2;
    Dataset data = make_synthetic_task(spec);
    const std::string dir = (fs::temp_directory_path() / "hamkit_dataset_test").string();
    fs::remove_all(dir);
    save_dataset(data, dir);
    std::vector<Sample> train = load_split(dir, "train");
    std::vector<Sample> val = load_split(dir, "val");
    REQUIRE(train.size() == 3);
    REQUIRE(val.size() == 2);
    for (std::size_t s = 0; s < train.size(); ++s) {
        CHECK(train[s].x.data == data.train[s].x.data);
        CHECK(train[s].labels == data.train[s].labels);
    }
    fs::remove_all(dir);
}

TEST_CASE("poly schedule and sgd update") {
    TrainConfig cfg;
    cfg.iters_max = 100;
    CHECK(poly_lr(cfg, 0) == 0.009);
    CHECK(poly_lr(cfg, 100) == 0.0);
    for (std::size_t i = 0; i <= 100; ++i) {
        const double expect = 0.009 * std::pow(1.0 - static_cast<double>(i) / 100.0, 0.9);
        CHECK(std::abs(poly_lr(cfg, i) - expect) <= 1e-15);
    }

    SECTION("zero gradient and zero weight decay leave parameters fixed") {
        TrainConfig c = cfg;
        c.weight_decay = 0.0;
        Matrix p(2, 2, {1.0, -2.0, 3.0, 4.0});
        Matrix p0 = p;
        Matrix g(2, 2), v;
        sgd_poly_step(p, g, v, 0, c);
        CHECK(p.data == p0.data);
    }

    SECTION("two hand-computed momentum steps") {
        TrainConfig c = cfg;
        c.lr0 = 0.1;
        c.poly_power = 1.0;
        c.momentum = 0.5;
        c.weight_decay = 0.01;
        Matrix p(1, 1, {2.0});
        Matrix g(1, 1, {0.3});
        Matrix v;
        // Step 0: v = 0.3 + 0.01*2 = 0.32; p = 2 - 0.1*0.32 = 1.968.
        sgd_poly_step(p, g, v, 0, c);
        CHECK(p(0, 0) == Catch::Approx(1.968).margin(1e-15));
        // Step 1: lr = 0.1*0.99; v = 0.5*0.32 + 0.3 + 0.01*1.968 = 0.47968.
        sgd_poly_step(p, g, v, 1, c);
        CHECK(p(0, 0) == Catch::Approx(1.968 - 0.099 * 0.47968).margin(1e-12));
    }

    SECTION("iteration past the schedule end is rejected") {
        Matrix p(1, 1, {1.0}), g(1, 1, {0.0}), v;
        CHECK_THROWS_AS(sgd_poly_step(p, g, v, 100, cfg), std::invalid_argument);
    }
}

TEST_CASE("model gradients match finite differences end to end") {
    SyntheticTaskSpec spec = small_spec();
    spec.height = 4;
    spec.width = 4;
    Dataset data = make_synthetic_task(spec);
    const Sample& sample = data.train[0];

    for (ContextKind context : {ContextKind::None, ContextKind::Hamburger, ContextKind::Attention}) {
        ModelConfig mc = small_model(context, spec);
        mc.ham.grad_mode = GradMode::BPTT;
        mc.ham.init = InitStrategy::fixed();
        RngState init_rng(3);
        PixelModel base = make_pixel_model(mc, init_rng);
        base.ham.bn.mode = BnMode::Train;
        const std::uint64_t fwd_seed = 5;
        // Pin the fixed dictionary before perturbed evaluations.
        {
            RngState pin(fwd_seed);
            model_forward(base, sample.x, pin);
        }
        auto loss_of = [&](const PixelModel& m) {
            PixelModel local = m;
            RngState fwd(fwd_seed);
            ForwardCache cache;
            model_forward(local, sample.x, fwd, &cache);
            return cross_entropy(cache, sample.labels);
        };

        PixelModel run = base;
        RngState fwd(fwd_seed);
        ForwardCache cache;
        model_forward(run, sample.x, fwd, &cache);
        ModelGrads grads = make_zero_grads(base);
        model_backward(base, sample.x, sample.labels, cache, grads);

        INFO("context=" << context_kind_name(context));
        Matrix fd_enc = finite_difference_grad(
            [&](const Matrix& m) {
                PixelModel p = base;
                p.w_enc = m;
                return loss_of(p);
            },
            base.w_enc, 1e-5);
        CHECK(gradient_rel_error(grads.w_enc, fd_enc) < 1e-4);

        Matrix fd_cls = finite_difference_grad(
            [&](const Matrix& m) {
                PixelModel p = base;
                p.w_cls = m;
                return loss_of(p);
            },
            base.w_cls, 1e-5);
        CHECK(gradient_rel_error(grads.w_cls, fd_cls) < 1e-4);

        Matrix fd_b = finite_difference_grad(
            [&](const Matrix& m) {
                PixelModel p = base;
                p.b_cls = m;
                return loss_of(p);
            },
            base.b_cls, 1e-5);
        CHECK(gradient_rel_error(grads.b_cls, fd_b) < 1e-4);
    }
}

TEST_CASE("evaluation metrics") {
    SECTION("perfect predictions") {
        std::vector<std::vector<int>> truth = {{0, 1, 2, 1}};
        EvalResult r = evaluate_predictions(truth, truth, 3);
        CHECK(r.accuracy == 1.0);
        CHECK(r.miou == 1.0);
    }
    SECTION("constant predictions on balanced two-class data") {
        std::vector<std::vector<int>> truth = {{0, 0, 1, 1}};
        std::vector<std::vector<int>> pred = {{0, 0, 0, 0}};
        EvalResult r = evaluate_predictions(pred, truth, 2);
        // Class 0: tp=2, fp=2, fn=0 -> IoU 0.5. Class 1: tp=0, fn=2 -> 0.
        CHECK(r.accuracy == 0.5);
        CHECK(r.per_class_iou[0] == Catch::Approx(0.5));
        CHECK(r.per_class_iou[1] == 0.0);
        CHECK(r.miou == Catch::Approx(0.25));
    }
    SECTION("classes absent everywhere are skipped") {
        std::vector<std::vector<int>> truth = {{0, 1, 0, 1}};
        std::vector<std::vector<int>> pred = {{0, 1, 1, 1}};
        EvalResult r = evaluate_predictions(pred, truth, 3);
        CHECK(r.per_class_iou[2] == -1.0);
        // Class 0: tp=1, fn=1 -> 0.5. Class 1: tp=2, fp=1 -> 2/3.
        CHECK(r.miou == Catch::Approx((0.5 + 2.0 / 3.0) / 2.0));
    }
    SECTION("shape mismatches are rejected") {
        std::vector<std::vector<int>> a = {{0, 1}};
        std::vector<std::vector<int>> b = {{0, 1, 1}};
        CHECK_THROWS_AS(evaluate_predictions(a, b, 2), shape_error);
    }
}

TEST_CASE("single-class task trains to zero loss") {
    SyntheticTaskSpec spec = small_spec();
    spec.classes = 1;
    spec.texture_library = 2;
    spec.train_count = 8;
    spec.val_count = 4;
    Dataset data = make_synthetic_task(spec);
    ModelConfig mc = small_model(ContextKind::None, spec);
    mc.classes = 1;
    TrainConfig cfg;
    cfg.iters_max = 20;
    cfg.eval_interval = 10;
    cfg.batch = 4;
    TrainResult res = train(mc, data, cfg);
    REQUIRE_FALSE(res.trace.nan_flag);
    CHECK(res.trace.loss.back() < 1e-6);
    CHECK(res.trace.acc.back() == 1.0);
    CHECK(res.trace.miou.back() == 1.0);
}

TEST_CASE("training is bitwise reproducible") {
    SyntheticTaskSpec spec = small_spec();
    Dataset data = make_synthetic_task(spec);
    ModelConfig mc = small_model(ContextKind::Hamburger, spec);
    TrainConfig cfg;
    cfg.iters_max = 8;
    cfg.eval_interval = 4;
    cfg.batch = 2;
    cfg.seed = 11;
    TrainResult a = train(mc, data, cfg);
    TrainResult b = train(mc, data, cfg);
    CHECK(a.trace.loss == b.trace.loss);
    CHECK(a.trace.acc == b.trace.acc);
    CHECK(a.trace.miou == b.trace.miou);
    CHECK(a.model.w_enc.data == b.model.w_enc.data);
    CHECK(a.model.ham.w_l.data == b.model.ham.w_l.data);
    for (double l : a.trace.loss) CHECK(std::isfinite(l));
}

TEST_CASE("one sgd step equals minus lr times the recomputed velocity") {
    SyntheticTaskSpec spec = small_spec();
    spec.height = 4;
    spec.width = 4;
    Dataset data = make_synthetic_task(spec);
    ModelConfig mc = small_model(ContextKind::Hamburger, spec);
    mc.ham.init = InitStrategy::fixed();
    RngState init_rng(9);
    PixelModel model = make_pixel_model(mc, init_rng);
    model.ham.bn.mode = BnMode::Train;

    // Frozen batch of two samples, shared solver stream for both passes.
    auto batch_grads = [&](PixelModel& m) {
        ModelGrads g = make_zero_grads(m);
        RngState solver(21);
        for (std::size_t s = 0; s < 2; ++s) {
            ForwardCache cache;
            model_forward(m, data.train[s].x, solver, &cache);
            model_backward(m, data.train[s].x, data.train[s].labels, cache, g, 0.5);
        }
        return g;
    };
    PixelModel before = model;
    ModelGrads grads = batch_grads(model);
    TrainConfig cfg;
    cfg.iters_max = 10;
    SgdState sgd;
    apply_sgd(model, grads, sgd, 0, cfg);
    // Zero initial velocity: v = g + wd p, delta = -lr v exactly.
    const double lr = poly_lr(cfg, 0);
    for (std::size_t i = 0; i < model.w_enc.size(); ++i) {
        const double v = grads.w_enc.data[i] + cfg.weight_decay * before.w_enc.data[i];
        CHECK(model.w_enc.data[i] == Catch::Approx(before.w_enc.data[i] - lr * v).margin(1e-15));
    }
    for (std::size_t i = 0; i < model.ham.w_u.size(); ++i) {
        const double v = grads.ham.grad_w_u.data[i] + cfg.weight_decay * before.ham.w_u.data[i];
        CHECK(model.ham.w_u.data[i] ==
              Catch::Approx(before.ham.w_u.data[i] - lr * v).margin(1e-15));
    }
}

TEST_CASE("divergent run is flagged, not thrown") {
    SyntheticTaskSpec spec = small_spec();
    Dataset data = make_synthetic_task(spec);
    ModelConfig mc = small_model(ContextKind::None, spec);
    TrainConfig cfg;
    cfg.iters_max = 50;
    cfg.eval_interval = 1000;
    cfg.batch = 2;
    cfg.lr0 = 1e150;  // guarantees overflow within a few steps
    TrainResult res;
    REQUIRE_NOTHROW(res = train(mc, data, cfg));
    CHECK(res.trace.nan_flag);
    CHECK(res.trace.loss.size() < 50);
    CHECK(std::isnan(res.trace.loss.back()));
}

TEST_CASE("metrics trace serializes to csv") {
    MetricsTrace t;
    t.loss = {1.5, 1.25, 1.0};
    t.eval_iters = {1};
    t.acc = {0.75};
    t.miou = {0.5};
    std::string csv = t.to_csv();
    CHECK(csv.find("iter,loss,acc,miou\n") == 0);
    CHECK(csv.find("0,1.5,,\n") != std::string::npos);
    CHECK(csv.find("1,1.25,0.75,0.5\n") != std::string::npos);
    CHECK(csv.find("2,1,0.75,0.5\n") != std::string::npos);
}
