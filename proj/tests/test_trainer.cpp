#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "edm2se/pipeline.hpp"
#include "edm2se/trainer.hpp"

using namespace edm2se;

namespace {

NetConfig tiny_net() {
    NetConfig nc;
    nc.width0 = 8;
    nc.width1 = 12;
    nc.emb_dim = 16;
    return nc;
}

TrainConfig tiny_cfg() {
    TrainConfig cfg;
    cfg.seed = 42;
    cfg.batch_size = 2;
    cfg.total_steps = 4;
    cfg.snapshot_every = 2;
    cfg.segment_samples = 160;
    cfg.measure_stats = false;
    cfg.sigma_x2 = 0.029;
    cfg.sigma_n2 = 0.023;
    cfg.stats_items = 8;
    return cfg;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::filesystem::path fresh_dir(const char* name) {
    auto d = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(d);
    return d;
}

} // namespace

TEST_CASE("config validation names the offending field") {
    auto expect_field = [](TrainConfig cfg, const std::string& field) {
        try {
            Trainer<float> t(std::move(cfg), tiny_net());
            FAIL("expected invalid_argument for " << field);
        } catch (const std::invalid_argument& e) {
            CHECK(std::string(e.what()).find(field) != std::string::npos);
        }
    };
    auto cfg = tiny_cfg();
    cfg.lr0 = 0.0;
    expect_field(cfg, "lr0");
    cfg = tiny_cfg();
    cfg.batch_size = 0;
    expect_field(cfg, "batch_size");
    cfg = tiny_cfg();
    cfg.alpha = -1.0;
    expect_field(cfg, "alpha");
    cfg = tiny_cfg();
    cfg.snapshot_every = 0;
    expect_field(cfg, "snapshot_every");
    cfg = tiny_cfg();
    cfg.ema_gammas = {};
    expect_field(cfg, "ema_gammas");
    cfg = tiny_cfg();
    cfg.segment_samples = 64; // shorter than one analysis window
    expect_field(cfg, "segment_samples");
    cfg = tiny_cfg();
    cfg.sigma_x2 = 0.0;
    expect_field(cfg, "sigma_x2");
}

TEST_CASE("learning rate decays as inverse square root of samples") {
    Trainer<float> tr(tiny_cfg(), tiny_net());
    const double lr0 = tr.config().lr0;
    const double ref = tr.config().lr_ref_samples;
    CHECK(tr.lr_at_samples(0) == lr0);
    CHECK(tr.lr_at_samples(static_cast<long long>(ref)) == lr0);
    CHECK(tr.lr_at_samples(static_cast<long long>(4 * ref)) == Catch::Approx(lr0 / 2.0).epsilon(1e-12));
    CHECK(tr.lr_at_samples(static_cast<long long>(9 * ref)) == Catch::Approx(lr0 / 3.0).epsilon(1e-12));
}

TEST_CASE("two trainers with the same seed walk in lockstep") {
    auto cfg = tiny_cfg();
    Trainer<float> a(cfg, tiny_net()), b(cfg, tiny_net());
    for (int s = 0; s < 3; ++s) {
        const auto ra = a.step();
        const auto rb = b.step();
        CHECK(ra.loss_spec == rb.loss_spec);
        CHECK(ra.grad_norm == rb.grad_norm);
    }
    const auto& pa = a.net().params();
    const auto& pb = b.net().params();
    for (size_t k = 0; k < pa.size(); ++k)
        for (size_t i = 0; i < pa[k].value.numel(); ++i)
            REQUIRE(pa[k].value[i] == pb[k].value[i]);
}

TEST_CASE("every normalized weight sits at sqrt(fan_in) after each step") {
    Trainer<float> tr(tiny_cfg(), tiny_net());
    for (int s = 0; s < 4; ++s) {
        tr.step();
        for (const auto& p : tr.net().params()) {
            if (!p.mp_normalized()) continue;
            const int ch = p.value.dim(0);
            const size_t per = p.value.numel() / static_cast<size_t>(ch);
            for (int c = 0; c < ch; ++c) {
                double n2 = 0.0;
                for (size_t i = 0; i < per; ++i) {
                    const double v = p.value[per * c + i];
                    n2 += v * v;
                }
                CHECK(std::abs(std::sqrt(n2) - std::sqrt(static_cast<double>(p.fan_in))) < 1e-6);
            }
        }
    }
}

TEST_CASE("an untrained output head prices the loss at the coefficient count") {
    // out_gain starts at zero, so the estimate is identically zero in
    // clean-prediction mode and the weighted square error averages to one
    // per spectrogram cell.
    auto cfg = tiny_cfg();
    cfg.batch_size = 8;
    cfg.measure_stats = true; // the contract needs stats that match the data
    cfg.stats_items = 256;
    Trainer<float> tr(cfg, tiny_net());
    const auto row = tr.step();
    const double coeffs = 2.0 * 65.0 * 6.0;
    CHECK(row.loss_spec > 0.4 * coeffs);
    CHECK(row.loss_spec < 2.0 * coeffs);
}

TEST_CASE("running averages match the profile applied to the parameter history") {
    auto cfg = tiny_cfg();
    cfg.total_steps = 6;
    Trainer<float> tr(cfg, tiny_net());
    size_t probe = tr.net().index_of("out_gain");
    std::vector<double> history;
    for (int s = 0; s < 6; ++s) {
        tr.step();
        history.push_back(tr.net().params()[probe].value[0]);
    }
    for (const auto& trace : tr.traces()) {
        const auto w = response_profile(6, trace.gamma);
        double ref = 0.0;
        for (size_t j = 0; j < 6; ++j) ref += w[j] * history[j];
        CHECK(std::abs(static_cast<double>(trace.avg[probe][0]) - ref) < 1e-6);
    }
}

TEST_CASE("alpha only adds the waveform term, visible before the first update") {
    auto cfg = tiny_cfg();
    auto a0 = cfg;
    a0.alpha = 0.0;
    auto a1 = cfg;
    a1.alpha = 0.001;
    Trainer<float> t0(a0, tiny_net()), t1(a1, tiny_net());
    const auto r0 = t0.step();
    const auto r1 = t1.step();
    CHECK(r0.loss_spec == r1.loss_spec); // same data, same parameters
    CHECK(r0.loss_l1 == 0.0);
    CHECK(r1.loss_l1 > 0.0);
    // the zero-initialized head keeps the estimate at the origin, where the
    // decompression has zero slope, so the first update is still shared
    const auto s0 = t0.step();
    const auto s1 = t1.step();
    CHECK(s0.loss_spec == s1.loss_spec);

    // a heavier waveform weight steers the gradients apart once the head is live
    auto a2 = cfg;
    a2.alpha = 1.0;
    Trainer<float> u0(a0, tiny_net()), u1(a2, tiny_net());
    u0.step();
    u1.step();
    const auto v0 = u0.step();
    const auto v1 = u1.step();
    CHECK(v0.grad_norm != v1.grad_norm);
    double worst = 0.0;
    const auto& p0 = u0.net().params();
    const auto& p1 = u1.net().params();
    for (size_t k = 0; k < p0.size(); ++k)
        for (size_t i = 0; i < p0[k].value.numel(); ++i)
            worst = std::max(worst, std::abs(static_cast<double>(p0[k].value[i]) - p1[k].value[i]));
    CHECK(worst > 1e-5);
}

TEST_CASE("exploding updates abort with a step diagnostic") {
    auto cfg = tiny_cfg();
    cfg.lr0 = 1e25;
    cfg.total_steps = 6;
    Trainer<float> tr(cfg, tiny_net());
    bool thrown = false;
    try {
        for (int s = 0; s < 6; ++s) tr.step();
    } catch (const std::runtime_error& e) {
        thrown = true;
        const std::string msg = e.what();
        CHECK(msg.find("step") != std::string::npos);
        CHECK(msg.find("t=") != std::string::npos);
    }
    CHECK(thrown);
}

TEST_CASE("full run writes the complete artifact set") {
    const auto dir = fresh_dir("edm2se_trainer_run");
    auto cfg = tiny_cfg();
    train_run(cfg, dir.string(), tiny_net());

    const auto csv = slurp(dir / "train_log.csv");
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    CHECK(line == "step,samples,lr,loss_spec,loss_l1,grad_norm");
    int rows = 0;
    while (std::getline(lines, line))
        if (!line.empty()) ++rows;
    CHECK(rows == cfg.total_steps);

    // snapshot index: 2 snapshot times x 2 traces
    auto store = SnapshotStore::open((dir / "snapshots").string());
    CHECK(store.n_total() == cfg.total_steps);
    CHECK(store.records().size() == 4);
    for (const auto& r : store.records()) {
        CHECK(std::filesystem::exists(dir / "snapshots" / r.file));
        CHECK(r.trace != "");
        CHECK(r.gamma > 0.0);
    }

    // the model file restores the exact final parameters
    auto lm = load_model((dir / "model_base.bin").string());
    Trainer<float> ref(cfg, tiny_net());
    for (int s = 0; s < cfg.total_steps; ++s) ref.step();
    const auto& pa = lm.net.params();
    const auto& pb = ref.net().params();
    REQUIRE(pa.size() == pb.size());
    for (size_t k = 0; k < pa.size(); ++k)
        for (size_t i = 0; i < pa[k].value.numel(); ++i) REQUIRE(pa[k].value[i] == pb[k].value[i]);
    // meta scalars are stored as float32
    CHECK(lm.meta.stats.var_clean == Catch::Approx(ref.stats().var_clean).epsilon(1e-6));

    // stats JSON mentions the measured variances
    const auto stats = slurp(dir / "stats.json");
    CHECK(stats.find("sigma_x2_measured") != std::string::npos);
    CHECK(stats.find("sigma_n2_measured") != std::string::npos);

    // rerun is byte-identical
    const auto dir2 = fresh_dir("edm2se_trainer_run2");
    train_run(cfg, dir2.string(), tiny_net());
    CHECK(slurp(dir2 / "train_log.csv") == csv);
    CHECK(slurp(dir2 / "model_base.bin") == slurp(dir / "model_base.bin"));

    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("snapshot blobs round-trip the trace averages exactly") {
    const auto dir = fresh_dir("edm2se_trainer_snap");
    auto cfg = tiny_cfg();
    cfg.total_steps = 2;
    cfg.snapshot_every = 2;
    train_run(cfg, dir.string(), tiny_net());

    Trainer<float> ref(cfg, tiny_net());
    ref.step();
    ref.step();

    auto store = SnapshotStore::open((dir / "snapshots").string());
    REQUIRE(store.records().size() == 2);
    for (const auto& rec : store.records()) {
        const auto ts = store.load(rec);
        const EmaTrace<float>* tr = nullptr;
        for (const auto& cand : ref.traces())
            if (cand.name == rec.trace) tr = &cand;
        REQUIRE(tr != nullptr);
        const auto& params = ref.net().params();
        for (size_t k = 0; k < params.size(); ++k) {
            const auto* t = find_tensor(ts, params[k].name);
            REQUIRE(t != nullptr);
            for (size_t i = 0; i < t->value.numel(); ++i) REQUIRE(t->value[i] == tr->avg[k][i]);
        }
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("fixed statistics are honored when measurement is off") {
    auto cfg = tiny_cfg();
    Trainer<float> tr(cfg, tiny_net());
    CHECK(tr.stats().var_clean == cfg.sigma_x2);
    CHECK(tr.stats().var_noise == cfg.sigma_n2);
}
