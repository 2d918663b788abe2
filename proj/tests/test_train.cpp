#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "vti/errors.hpp"
#include "vti/train.hpp"

using namespace vti;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.d_vocab = 12;
    c.img_size = 16;
    c.conv_c1 = 4;
    c.conv_c2 = 6;
    c.d_v = 8;
    c.d_vt = 14;
    c.d_e = 8;
    c.d_h = 8;
    c.d_z = 4;
    c.d_mlp = 10;
    c.n_max = 7;
    c.vt_layers = 1;
    c.lang_layers = 1;
    c.lang_heads = 2;
    c.max_len = 16;
    c.dropout = real(0);  // keep tiny-fit losses deterministic and smooth
    return c;
}

DatasetRecord tiny_record(Rng& rng, int n_sentences) {
    DatasetRecord rec;
    rec.image.resize(16 * 16);
    for (real& v : rec.image) v = static_cast<real>(rng.uniform());
    for (int s = 0; s < n_sentences; ++s) {
        std::vector<int> toks;
        const int len = 2 + rng.uniform_int(3);
        for (int i = 0; i < len; ++i) toks.push_back(5 + rng.uniform_int(7));
        rec.sentences.push_back(toks);
    }
    rec.split = "train";
    return rec;
}

std::vector<DatasetRecord> tiny_corpus(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<DatasetRecord> out;
    for (int i = 0; i < n; ++i) out.push_back(tiny_record(rng, 1 + rng.uniform_int(2)));
    return out;
}

// Single-parameter fixture for the optimizer unit tests.
struct OneParam {
    std::vector<std::pair<std::string, Tensor>> params;
    AdamState state;

    explicit OneParam(real value) {
        Tensor t({1}, value, true);
        params.emplace_back("w", t);
        state = make_adam_state(params);
    }
    void set_grad(real g) { params[0].second.grad()[0] = g; }
    real value() const { return params[0].second.at(0); }
};

std::filesystem::path fresh_dir(const std::string& name) {
    const auto dir = std::filesystem::path("test_train_tmp") / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::vector<unsigned char> file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(bool(in));
    return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                      std::istreambuf_iterator<char>());
}

bool same_params(const VtiModel& a, const VtiModel& b) {
    const auto pa = named_parameters(a), pb = named_parameters(b);
    if (pa.size() != pb.size()) return false;
    for (size_t i = 0; i < pa.size(); ++i)
        if (pa[i].second.vec() != pb[i].second.vec()) return false;
    return true;
}

}  // namespace

TEST_CASE("crc32 matches the standard check value") {
    const std::string msg = "123456789";
    CHECK(crc32(reinterpret_cast<const unsigned char*>(msg.data()), msg.size()) ==
          0xCBF43926u);
    CHECK(crc32(nullptr, 0) == 0u);
}

TEST_CASE("adam first step moves a unit-gradient weight by almost exactly lr") {
    OneParam fix(real(1));
    fix.set_grad(real(1));
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    adam_step(fix.params, fix.state, cfg);
    // bias correction makes m_hat = v_hat = 1, so the update is lr/(1 + eps)
    CHECK(std::abs(static_cast<double>(fix.value()) - (1.0 - 1e-3)) < 1e-6);
    CHECK(fix.state.t == 1);
}

TEST_CASE("adam leaves a weight with zero gradient unchanged") {
    OneParam fix(real(0.5));
    fix.set_grad(real(0));
    TrainConfig cfg;
    for (int i = 0; i < 3; ++i) adam_step(fix.params, fix.state, cfg);
    CHECK(fix.value() == real(0.5));
    CHECK(fix.state.t == 3);
}

TEST_CASE("adam updates are deterministic across reruns") {
    auto run = [] {
        OneParam fix(real(2));
        TrainConfig cfg;
        Rng rng(7);
        for (int i = 0; i < 50; ++i) {
            fix.set_grad(static_cast<real>(rng.uniform(-1.0, 1.0)));
            adam_step(fix.params, fix.state, cfg);
        }
        return fix.value();
    };
    CHECK(run() == run());
}

TEST_CASE("adam minimizes a simple quadratic") {
    OneParam fix(real(3));
    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    for (int i = 0; i < 400; ++i) {
        fix.set_grad(real(2) * fix.value());
        adam_step(fix.params, fix.state, cfg);
    }
    CHECK(std::abs(static_cast<double>(fix.value())) < 1e-2);
}

TEST_CASE("adam rejects a non-finite gradient and names the parameter") {
    OneParam fix(real(1));
    fix.set_grad(std::numeric_limits<real>::quiet_NaN());
    TrainConfig cfg;
    CHECK_THROWS_WITH_AS(adam_step(fix.params, fix.state, cfg),
                         doctest::Contains("'w'"), TrainError);
}

TEST_CASE("global norm clipping rescales gradients above the bound") {
    Tensor t({2}, real(0), true);
    t.grad()[0] = real(3);
    t.grad()[1] = real(4);
    std::vector<std::pair<std::string, Tensor>> params{{"w", t}};

    CHECK(clip_global_norm(params, 10.0) == doctest::Approx(5.0));
    CHECK(t.grad()[0] == real(3));  // under the bound: untouched

    CHECK(clip_global_norm(params, 2.5) == doctest::Approx(5.0));
    CHECK(t.grad()[0] == doctest::Approx(1.5));
    CHECK(t.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("checkpoint files round-trip tensors bit for bit") {
    const auto dir = fresh_dir("roundtrip");
    Checkpoint c;
    Rng rng(99);
    c.tensors.emplace_back("a.w", Tensor::from({2, 3}, {1, -2, 3.5f, 0.25f, -0.125f, 9}));
    c.tensors.emplace_back("a.b", Tensor::from({3}, {0.1f, 0.2f, 0.3f}));
    std::vector<real> big(4 * 2 * 3 * 3);
    for (real& v : big) v = static_cast<real>(rng.uniform(-2.0, 2.0));
    c.tensors.emplace_back("conv.w", Tensor::from({4, 2, 3, 3}, big));
    c.tensors.emplace_back("__note__", text_tensor("epoch=3\nbest_val=1.25\n"));

    const auto path = (dir / "t.ckpt").string();
    save_checkpoint(c, path);
    const Checkpoint r = load_checkpoint(path);

    REQUIRE(r.tensors.size() == c.tensors.size());
    for (size_t i = 0; i < c.tensors.size(); ++i) {
        CHECK(r.tensors[i].first == c.tensors[i].first);
        CHECK(r.tensors[i].second.shape() == c.tensors[i].second.shape());
        CHECK(r.tensors[i].second.vec() == c.tensors[i].second.vec());
    }
    CHECK(tensor_text(*find_tensor(r, "__note__")) == "epoch=3\nbest_val=1.25\n");
    CHECK(find_tensor(r, "missing") == nullptr);
}

TEST_CASE("checkpoint loader rejects damaged files") {
    const auto dir = fresh_dir("damage");
    Checkpoint c;
    c.tensors.emplace_back("w", Tensor::from({4}, {1, 2, 3, 4}));
    const auto path = (dir / "ok.ckpt").string();
    save_checkpoint(c, path);
    const std::vector<unsigned char> good = file_bytes(path);

    auto rewrite = [&](std::vector<unsigned char> bytes) {
        const auto p = (dir / "bad.ckpt").string();
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        out.close();
        return p;
    };

    SUBCASE("wrong magic") {
        auto bytes = good;
        bytes[0] = 'X';
        CHECK_THROWS_WITH_AS(load_checkpoint(rewrite(bytes)), doctest::Contains("magic"),
                             ParseError);
    }
    SUBCASE("unsupported version") {
        auto bytes = good;
        bytes[4] = 2;  // little-endian u32 version right after the magic
        CHECK_THROWS_WITH_AS(load_checkpoint(rewrite(bytes)),
                             doctest::Contains("version 2"), ParseError);
    }
    SUBCASE("truncation reports the byte offset") {
        auto bytes = good;
        bytes.resize(bytes.size() / 2);
        const std::string want = "truncated at byte " + std::to_string(bytes.size());
        CHECK_THROWS_WITH_AS(load_checkpoint(rewrite(bytes)), doctest::Contains(want.c_str()),
                             ParseError);
    }
    SUBCASE("corrupted payload fails the checksum") {
        auto bytes = good;
        bytes[bytes.size() - 6] ^= 0x40;  // inside the last tensor's data
        CHECK_THROWS_WITH_AS(load_checkpoint(rewrite(bytes)), doctest::Contains("checksum"),
                             ParseError);
    }
    SUBCASE("trailing bytes are rejected") {
        auto bytes = good;
        bytes.push_back(0);
        CHECK_THROWS_WITH_AS(load_checkpoint(rewrite(bytes)), doctest::Contains("trailing"),
                             ParseError);
    }
    SUBCASE("missing file is an I/O error") {
        CHECK_THROWS_AS(load_checkpoint((dir / "nope.ckpt").string()), IoError);
    }
}

TEST_CASE("loading parameters into a model checks names and shapes") {
    Rng rng(3);
    VtiModel m = make_model(tiny(), rng);
    VtiModel fresh = make_model(tiny(), rng);  // different draws
    REQUIRE(!same_params(m, fresh));

    Checkpoint c;
    for (const auto& [name, t] : named_parameters(m))
        c.tensors.emplace_back(name, Tensor::from(t.shape(), t.vec()));

    SUBCASE("full parameter set copies over") {
        load_model_params(fresh, c);
        CHECK(same_params(m, fresh));
    }
    SUBCASE("a missing parameter is rejected") {
        c.tensors.erase(c.tensors.begin() + 5);
        CHECK_THROWS_WITH_AS(load_model_params(fresh, c), doctest::Contains("missing"),
                             ContractError);
    }
    SUBCASE("an unknown parameter is rejected") {
        c.tensors.emplace_back("bogus.w", Tensor::from({1}, {real(1)}));
        CHECK_THROWS_WITH_AS(load_model_params(fresh, c), doctest::Contains("bogus.w"),
                             ContractError);
    }
    SUBCASE("a shape mismatch is rejected") {
        c.tensors[0].second = Tensor::from({1}, {real(1)});
        CHECK_THROWS_WITH_AS(load_model_params(fresh, c), doctest::Contains("shape"),
                             ContractError);
    }
}

TEST_CASE("fit trains, checkpoints the best epoch, and the file reloads") {
    const auto dir = fresh_dir("fit");
    const auto ckpt = (dir / "model.ckpt").string();
    const auto corpus = tiny_corpus(8, 11);
    const auto val = tiny_corpus(3, 22);

    Rng rng(42);
    VtiModel m = make_model(tiny(), rng);
    TrainConfig cfg;
    cfg.learning_rate = 2e-3;
    cfg.batch_size = 4;
    cfg.max_epochs = 6;
    cfg.patience = 6;
    cfg.seed = 5;

    const TrainResult res = fit(m, corpus, val, cfg, ckpt);
    REQUIRE(!res.diverged);
    REQUIRE(res.history.size() == 6);
    CHECK(res.global_steps == 12);  // 8 records / batch 4 = 2 steps per epoch
    CHECK(res.history.back().train_loss < res.history.front().train_loss);

    double best = std::numeric_limits<double>::infinity();
    for (const EpochStats& e : res.history) {
        CHECK(std::isfinite(e.train_loss));
        CHECK(e.val_kl >= 0);
        CHECK((e.improved == (e.val_loss < best)));
        best = std::min(best, e.val_loss);
    }
    CHECK(res.best_val_loss == doctest::Approx(best));
    CHECK(res.history[static_cast<size_t>(res.best_epoch)].val_loss ==
          doctest::Approx(res.best_val_loss));

    // the best checkpoint restores the recorded architecture and weights
    VtiModel loaded = model_from_checkpoint(load_checkpoint(ckpt));
    CHECK(loaded.cfg.d_vocab == 12);
    CHECK(loaded.cfg.d_vt == 14);
    const double acc = teacher_forced_accuracy(loaded, corpus);
    CHECK(acc >= 0);
    CHECK(acc <= 1);

    // if the last epoch was the best the two files carry identical weights
    if (res.best_epoch == res.history.back().epoch) {
        VtiModel last = model_from_checkpoint(load_checkpoint(ckpt + ".last"));
        CHECK(same_params(loaded, last));
    }
}

TEST_CASE("a frozen model stops after exactly patience+1 validations") {
    const auto dir = fresh_dir("patience");
    const auto corpus = tiny_corpus(4, 33);
    const auto val = tiny_corpus(2, 44);

    Rng rng(1);
    VtiModel m = make_model(tiny(), rng);
    TrainConfig cfg;
    cfg.learning_rate = 0;  // nothing improves after the first validation
    cfg.batch_size = 4;
    cfg.max_epochs = 50;
    cfg.patience = 3;

    const TrainResult res = fit(m, corpus, val, cfg, (dir / "m.ckpt").string());
    CHECK(res.history.size() == 4);  // patience + 1
    CHECK(res.best_epoch == 0);
    for (size_t i = 1; i < res.history.size(); ++i) CHECK(!res.history[i].improved);
}

TEST_CASE("identical seeds give identical histories and checkpoint bytes") {
    const auto corpus = tiny_corpus(6, 55);
    const auto val = tiny_corpus(2, 66);

    auto run = [&](const std::string& tag) {
        const auto dir = fresh_dir("det_" + tag);
        Rng rng(9);
        VtiModel m = make_model(tiny(), rng);
        TrainConfig cfg;
        cfg.learning_rate = 1e-3;
        cfg.batch_size = 3;
        cfg.max_epochs = 3;
        cfg.seed = 77;
        const TrainResult res = fit(m, corpus, val, cfg, (dir / "m.ckpt").string());
        return std::make_pair(res, file_bytes(dir / "m.ckpt.last"));
    };

    const auto [ra, bytes_a] = run("a");
    const auto [rb, bytes_b] = run("b");
    REQUIRE(ra.history.size() == rb.history.size());
    for (size_t i = 0; i < ra.history.size(); ++i) {
        CHECK(ra.history[i].train_loss == rb.history[i].train_loss);
        CHECK(ra.history[i].val_loss == rb.history[i].val_loss);
        CHECK(ra.history[i].beta_last == rb.history[i].beta_last);
    }
    CHECK(bytes_a == bytes_b);
}

TEST_CASE("resuming from the rolling checkpoint replays the uninterrupted run") {
    const auto corpus = tiny_corpus(6, 77);
    const auto val = tiny_corpus(2, 88);

    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 3;
    cfg.max_epochs = 4;
    cfg.anneal_total_steps = 8;  // pin the schedule so both runs share it
    cfg.seed = 123;

    const auto dir_a = fresh_dir("resume_a");
    Rng rng_a(4);
    VtiModel ma = make_model(tiny(), rng_a);
    const TrainResult full = fit(ma, corpus, val, cfg, (dir_a / "m.ckpt").string());
    REQUIRE(full.history.size() == 4);

    const auto dir_b = fresh_dir("resume_b");
    Rng rng_b(4);
    VtiModel mb = make_model(tiny(), rng_b);
    TrainConfig half = cfg;
    half.max_epochs = 2;
    fit(mb, corpus, val, half, (dir_b / "m.ckpt").string());

    const TrainResult tail = fit(mb, corpus, val, cfg, (dir_b / "m.ckpt").string(),
                                 (dir_b / "m.ckpt.last").string());
    REQUIRE(tail.history.size() == 2);  // epochs 2 and 3 only
    CHECK(tail.history[0].train_loss == full.history[2].train_loss);
    CHECK(tail.history[0].val_loss == full.history[2].val_loss);
    CHECK(tail.history[1].train_loss == full.history[3].train_loss);
    CHECK(tail.history[1].val_loss == full.history[3].val_loss);
    CHECK(tail.best_val_loss == full.best_val_loss);
    CHECK(tail.best_epoch == full.best_epoch);
    CHECK(file_bytes(dir_a / "m.ckpt.last") == file_bytes(dir_b / "m.ckpt.last"));
}

TEST_CASE("a non-finite loss aborts training and leaves prior checkpoints untouched") {
    const auto dir = fresh_dir("diverge");
    const auto ckpt = (dir / "m.ckpt").string();
    const auto corpus = tiny_corpus(4, 99);
    const auto val = tiny_corpus(2, 111);

    // stands in for the best checkpoint of an earlier, healthy run
    const std::string keep = "pre-existing checkpoint bytes";
    std::ofstream(ckpt, std::ios::binary) << keep;

    Rng rng(6);
    VtiModel m = make_model(tiny(), rng);
    for (real& v : m.words.table.vec()) v = std::numeric_limits<real>::quiet_NaN();

    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.max_epochs = 5;

    const TrainResult res = fit(m, corpus, val, cfg, ckpt);
    CHECK(res.diverged);
    CHECK(res.divergence_reason.find("non-finite") != std::string::npos);
    CHECK(res.history.empty());  // died inside the first epoch
    CHECK(!std::filesystem::exists(ckpt + ".last"));  // no epoch completed

    const auto bytes = file_bytes(ckpt);
    CHECK(std::string(bytes.begin(), bytes.end()) == keep);
}

TEST_CASE("fit validates its inputs") {
    const auto corpus = tiny_corpus(2, 1);
    Rng rng(2);
    VtiModel m = make_model(tiny(), rng);
    TrainConfig cfg;
    CHECK_THROWS_AS(fit(m, {}, corpus, cfg, "x.ckpt"), ContractError);
    CHECK_THROWS_AS(fit(m, corpus, {}, cfg, "x.ckpt"), ContractError);
    cfg.patience = 0;
    CHECK_THROWS_AS(fit(m, corpus, corpus, cfg, "x.ckpt"), ContractError);
}
