#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "vti/data.hpp"
#include "vti/errors.hpp"
#include "vti/generate.hpp"

using namespace vti;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.d_vocab = 12;
    c.img_size = 16;  // k = 4 feature locations, a 2x2 grid
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
    return c;
}

std::vector<real> random_image(Rng& rng) {
    std::vector<real> img(16 * 16);
    for (real& v : img) v = static_cast<real>(rng.uniform());
    return img;
}

std::filesystem::path fresh_dir(const std::string& name) {
    const auto dir = std::filesystem::path("test_generate_tmp") / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

bool variants_equal(const ReportVariant& a, const ReportVariant& b) {
    return a.sentences == b.sentences && a.slots == b.slots &&
           a.sentence_log_prob == b.sentence_log_prob && a.attention == b.attention &&
           a.topic_samples.vec() == b.topic_samples.vec();
}

// The rescoring draws select_best_report makes, rebuilt from public pieces.
std::vector<std::vector<Tensor>> rescore_draws(const VtiModel& m, const std::vector<real>& img,
                                               int S) {
    const Tensor V = extract_visual_features(m, img, nullptr);
    const auto priors = infer_priors(m, V, nullptr);
    Rng rs(kRescoreSeed);
    std::vector<std::vector<Tensor>> draws(static_cast<size_t>(m.cfg.n_max));
    for (int j = 0; j < m.cfg.n_max; ++j)
        for (int s = 0; s < S; ++s) {
            Tensor eps({1, m.cfg.d_z});
            for (real& v : eps.vec()) v = static_cast<real>(rs.normal());
            draws[static_cast<size_t>(j)].push_back(
                reparameterize(priors[static_cast<size_t>(j)], eps, nullptr));
        }
    return draws;
}

}  // namespace

TEST_CASE("sampling distribution renormalizes the top-k mass") {
    const std::vector<real> p{real(0.5), real(0.3), real(0.2)};

    SUBCASE("hand example: k=2 keeps 0.5 and 0.3") {
        const auto d = sampling_distribution(p, 1.0, 2);
        CHECK(d[0] == doctest::Approx(0.625).epsilon(1e-6));
        CHECK(d[1] == doctest::Approx(0.375).epsilon(1e-6));
        CHECK(d[2] == 0.0);
    }
    SUBCASE("k = vocab at temperature 1 reproduces the input") {
        const auto d = sampling_distribution(p, 1.0, 3);
        for (int i = 0; i < 3; ++i)
            CHECK(d[static_cast<size_t>(i)] ==
                  doctest::Approx(static_cast<double>(p[static_cast<size_t>(i)])).epsilon(1e-6));
    }
    SUBCASE("k=1 is a point mass on the argmax") {
        for (const double t : {0.25, 1.0, 4.0}) {
            const auto d = sampling_distribution(p, t, 1);
            CHECK(d[0] == 1.0);
            CHECK(d[1] == 0.0);
        }
    }
    SUBCASE("low temperature sharpens toward the argmax") {
        const auto d = sampling_distribution(p, 0.05, 3);
        CHECK(d[0] > 0.9999);
    }
    SUBCASE("high temperature flattens but keeps the ordering") {
        const auto d = sampling_distribution(p, 4.0, 3);
        CHECK(d[0] < 0.625);
        CHECK(d[0] > d[1]);
        CHECK(d[1] > d[2]);
    }
    SUBCASE("ties keep the lower id") {
        const std::vector<real> q{real(0.3), real(0.3), real(0.3), real(0.1)};
        const auto d1 = sampling_distribution(q, 1.0, 1);
        CHECK(d1[0] == 1.0);
        const auto d2 = sampling_distribution(q, 1.0, 2);
        CHECK(d2[0] == doctest::Approx(0.5).epsilon(1e-6));
        CHECK(d2[1] == doctest::Approx(0.5).epsilon(1e-6));
        CHECK(d2[2] == 0.0);
    }
    SUBCASE("preconditions") {
        Rng rng(1);
        CHECK_THROWS_AS(sampling_distribution(p, 0.0, 2), ContractError);
        CHECK_THROWS_AS(sampling_distribution(p, 1.0, 0), ContractError);
        CHECK_THROWS_AS(sampling_distribution(p, 1.0, 4), ContractError);
        const std::vector<real> neg{real(0.5), real(-0.1)};
        CHECK_THROWS_AS(sampling_distribution(neg, 1.0, 1), ContractError);
        CHECK_THROWS_AS(sample_token(p, 0.0, 2, rng), ContractError);
    }
}

TEST_CASE("sample_token with k=1 always returns the argmax") {
    const std::vector<real> p{real(0.2), real(0.5), real(0.3)};
    Rng rng(7);
    for (int i = 0; i < 100; ++i) CHECK(sample_token(p, 3.7, 1, rng) == 1);
}

TEST_CASE("sampled frequencies match the distribution within three standard errors") {
    const std::vector<real> p{real(0.4), real(0.3), real(0.2), real(0.1)};
    const int n = 10000;
    Rng rng(2024);
    std::vector<int> counts(4, 0);
    for (int i = 0; i < n; ++i) counts[static_cast<size_t>(sample_token(p, 1.0, 4, rng))]++;
    for (int i = 0; i < 4; ++i) {
        const double pi = static_cast<double>(p[static_cast<size_t>(i)]);
        const double se = std::sqrt(pi * (1 - pi) / n);
        const double freq = counts[static_cast<size_t>(i)] / static_cast<double>(n);
        CHECK(std::abs(freq - pi) <= 3 * se);
    }
}

TEST_CASE("generated reports have well-formed sentences, slots, and attention") {
    Rng init(3);
    const VtiModel m = make_model(tiny(), init);
    Rng img_rng(5);
    const auto img = random_image(img_rng);

    Rng rng(11);
    const ReportVariant v = generate_report(m, img, 0.7, 5, rng);

    CHECK(v.topic_samples.shape() == std::vector<int>{7, 4});
    for (int i = 0; i < v.topic_samples.size(); ++i)
        CHECK(std::isfinite(static_cast<double>(v.topic_samples.at(i))));

    REQUIRE(v.sentences.size() == v.slots.size());
    REQUIRE(v.sentences.size() == v.sentence_log_prob.size());
    REQUIRE(v.sentences.size() == v.attention.size());

    for (size_t s = 0; s < v.sentences.size(); ++s) {
        const auto& toks = v.sentences[s];
        REQUIRE(!toks.empty());
        CHECK(toks.size() <= static_cast<size_t>(kMaxGenTokens));
        // termination contract: either an [EOS] was drawn or the cap was hit
        CHECK((toks.back() == kEosId || toks.size() == static_cast<size_t>(kMaxGenTokens)));
        for (size_t t = 0; t + 1 < toks.size(); ++t) CHECK(toks[t] != kEosId);

        CHECK(std::isfinite(v.sentence_log_prob[s]));
        CHECK(v.sentence_log_prob[s] <= 0);

        REQUIRE(v.attention[s].size() == toks.size());  // one map per sampled token
        for (const auto& row : v.attention[s]) {
            REQUIRE(row.size() == 4);
            double sum = 0;
            for (const real a : row) {
                CHECK(a >= 0);
                sum += static_cast<double>(a);
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }

    // slots ascend and kept sentences are pairwise distinct by construction
    for (size_t s = 1; s < v.slots.size(); ++s) CHECK(v.slots[s - 1] < v.slots[s]);
    for (size_t a = 0; a < v.sentences.size(); ++a)
        for (size_t b = a + 1; b < v.sentences.size(); ++b)
            CHECK(v.sentences[a] != v.sentences[b]);
}

TEST_CASE("generation is seed-deterministic and seed-sensitive") {
    Rng init(3);
    const VtiModel m = make_model(tiny(), init);
    Rng img_rng(5);
    const auto img = random_image(img_rng);

    Rng r1(99), r2(99), r3(100);
    const ReportVariant a = generate_report(m, img, 0.7, 5, r1);
    const ReportVariant b = generate_report(m, img, 0.7, 5, r2);
    const ReportVariant c = generate_report(m, img, 0.7, 5, r3);

    CHECK(variants_equal(a, b));
    CHECK(!variants_equal(a, c));  // topic draws alone make collisions implausible
}

TEST_CASE("baseline mode generates from the prior mean") {
    ModelConfig cfg = tiny();
    cfg.deterministic_baseline = true;
    Rng init(3);
    const VtiModel m = make_model(cfg, init);
    Rng img_rng(5);
    const auto img = random_image(img_rng);

    // topic vectors ignore the seed; only token sampling consumes randomness
    Rng r1(99), r2(1234);
    const ReportVariant a = generate_report(m, img, 0.7, 5, r1);
    const ReportVariant b = generate_report(m, img, 0.7, 5, r2);
    CHECK(a.topic_samples.vec() == b.topic_samples.vec());

    const Tensor V = extract_visual_features(m, img, nullptr);
    const auto priors = infer_priors(m, V, nullptr);
    for (int j = 0; j < cfg.n_max; ++j)
        for (int d = 0; d < cfg.d_z; ++d)
            CHECK(a.topic_samples.at2(j, d) == priors[static_cast<std::size_t>(j)].mu.at(d));

    // selection still works; rescoring draws collapse onto the mean
    const auto best = select_best_report(m, img, {a, b}, 3);
    for (const double lp : best.sentence_log_prob) CHECK(std::isfinite(lp));
}

TEST_CASE("generation never touches the posterior network") {
    Rng init(3);
    VtiModel m = make_model(tiny(), init);
    for (real& v : m.posterior_head.fc1.weight.vec()) v = std::numeric_limits<real>::quiet_NaN();

    Rng img_rng(5);
    const auto img = random_image(img_rng);
    Rng rng(21);
    const ReportVariant v = generate_report(m, img, 0.7, 5, rng);
    for (int i = 0; i < v.topic_samples.size(); ++i)
        CHECK(std::isfinite(static_cast<double>(v.topic_samples.at(i))));
    for (const double lp : v.sentence_log_prob) CHECK(std::isfinite(lp));

    Rng rng2(22);
    const auto best = select_best_report(m, img, {generate_report(m, img, 0.7, 5, rng2), v}, 4);
    for (const double lp : best.sentence_log_prob) CHECK(std::isfinite(lp));
}

TEST_CASE("model-averaged log-likelihood prefers tokens the decoder favors") {
    Rng init(9);
    VtiModel m = make_model(tiny(), init);
    m.out_proj.bias.at(5) = real(6);  // push most of the mass onto token 5

    Rng img_rng(5);
    const auto img = random_image(img_rng);
    const Tensor V = extract_visual_features(m, img, nullptr);
    const VisualContext ctx = make_visual_context(m, V, nullptr);
    const auto draws = rescore_draws(m, img, 3);

    const double favored = model_averaged_loglik(m, ctx, draws[0], {5, 5, 5});
    const double other = model_averaged_loglik(m, ctx, draws[0], {7, 8, 9});
    CHECK(favored > other);
    CHECK_THROWS_AS(model_averaged_loglik(m, ctx, draws[0], {}), ContractError);
}

TEST_CASE("select_best_report picks the argmax candidate per slot") {
    Rng init(3);
    const VtiModel m = make_model(tiny(), init);
    Rng img_rng(5);
    const auto img = random_image(img_rng);

    std::vector<ReportVariant> vs;
    for (int s = 0; s < 3; ++s) {
        Rng rng(200 + s);
        vs.push_back(generate_report(m, img, 0.9, 5, rng));
    }
    const int S = 4;
    const ReportVariant best = select_best_report(m, img, vs, S);

    // replicate the scoring with public pieces and compare winners
    const Tensor V = extract_visual_features(m, img, nullptr);
    const VisualContext ctx = make_visual_context(m, V, nullptr);
    const auto draws = rescore_draws(m, img, S);

    size_t out_idx = 0;
    for (int j = 0; j < m.cfg.n_max; ++j) {
        double top = -std::numeric_limits<double>::infinity();
        const std::vector<int>* want = nullptr;
        for (const ReportVariant& v : vs)
            for (size_t s = 0; s < v.slots.size(); ++s) {
                if (v.slots[s] != j) continue;
                const double score =
                    model_averaged_loglik(m, ctx, draws[static_cast<size_t>(j)], v.sentences[s]);
                if (score > top) {
                    top = score;
                    want = &v.sentences[s];
                }
            }
        if (!want) continue;
        REQUIRE(out_idx < best.sentences.size());
        CHECK(best.slots[out_idx] == j);
        CHECK(best.sentences[out_idx] == *want);
        ++out_idx;
    }
    CHECK(out_idx == best.sentences.size());
}

TEST_CASE("select_best_report passes a single variant through and is idempotent") {
    Rng init(3);
    const VtiModel m = make_model(tiny(), init);
    Rng img_rng(5);
    const auto img = random_image(img_rng);

    Rng rng(77);
    const ReportVariant v = generate_report(m, img, 0.7, 5, rng);
    REQUIRE(!v.sentences.empty());

    const ReportVariant alone = select_best_report(m, img, {v}, 5);
    CHECK(variants_equal(alone, v));

    const ReportVariant dup = select_best_report(m, img, {v, v}, 5);
    CHECK(variants_equal(dup, v));

    Rng rng2(78), rng3(79);
    const std::vector<ReportVariant> vs{v, generate_report(m, img, 0.7, 5, rng2),
                                        generate_report(m, img, 0.7, 5, rng3)};
    const ReportVariant best = select_best_report(m, img, vs, 5);
    const ReportVariant again = select_best_report(m, img, {best}, 5);
    CHECK(variants_equal(best, again));

    CHECK_THROWS_AS(select_best_report(m, img, {}, 5), ContractError);
}

TEST_CASE("select_best_report unions the slots covered by different variants") {
    Rng init(3);
    const VtiModel m = make_model(tiny(), init);
    Rng img_rng(5);
    const auto img = random_image(img_rng);

    ReportVariant va;
    va.sentences = {{5, 6, kEosId}, {7, 8, kEosId}};
    va.slots = {0, 2};
    va.sentence_log_prob = {-1.0, -1.5};
    va.attention = {{}, {}};
    ReportVariant vb;
    vb.sentences = {{9, 10, kEosId}, {10, 9, 8, kEosId}};
    vb.slots = {1, 2};
    vb.sentence_log_prob = {-2.0, -2.5};
    vb.attention = {{}, {}};

    const ReportVariant best = select_best_report(m, img, {va, vb}, 3);
    REQUIRE(best.slots == std::vector<int>{0, 1, 2});
    CHECK(best.sentences[0] == va.sentences[0]);  // only candidate for slot 0
    CHECK(best.sentences[1] == vb.sentences[0]);  // only candidate for slot 1
    CHECK((best.sentences[2] == va.sentences[1] || best.sentences[2] == vb.sentences[1]));
}

TEST_CASE("attention export writes one CSV per sentence and one heat map per token") {
    const auto dir = fresh_dir("export");
    Rng init(3);
    const VtiModel m = make_model(tiny(), init);
    Rng img_rng(5);
    const auto img = random_image(img_rng);
    Rng rng(31);
    const ReportVariant v = generate_report(m, img, 0.7, 5, rng);
    REQUIRE(!v.sentences.empty());

    export_attention_maps(v, dir.string());

    for (size_t s = 0; s < v.sentences.size(); ++s) {
        char name[64];
        std::snprintf(name, sizeof name, "sentence_%02zu_attention.csv", s);
        std::ifstream csv(dir / name);
        REQUIRE(bool(csv));
        size_t rows = 0;
        std::string line;
        while (std::getline(csv, line)) {
            double sum = 0;
            size_t cols = 0, pos = 0;
            while (pos <= line.size()) {
                const size_t comma = std::min(line.find(',', pos), line.size());
                sum += std::strtod(line.substr(pos, comma - pos).c_str(), nullptr);
                ++cols;
                pos = comma + 1;
            }
            CHECK(cols == 4);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
            ++rows;
        }
        CHECK(rows == v.sentences[s].size());

        for (size_t t = 0; t < v.sentences[s].size(); ++t) {
            std::snprintf(name, sizeof name, "sentence_%02zu_token_%02zu.pgm", s, t);
            const auto pix = read_pgm((dir / name).string(), 8, 8);  // 2x2 grid upsampled 4x4
            CHECK(pix.size() == 64);
        }
    }
}

TEST_CASE("uniform attention exports a constant-gray heat map") {
    const auto dir = fresh_dir("uniform");
    ReportVariant v;
    v.sentences = {{5}};
    v.slots = {0};
    v.sentence_log_prob = {-1.0};
    v.attention = {{{real(0.25), real(0.25), real(0.25), real(0.25)}}};

    export_attention_maps(v, dir.string());
    const auto pix = read_pgm((dir / "sentence_00_token_00.pgm").string(), 8, 8);
    for (const real p : pix) CHECK(p == pix[0]);
}

TEST_CASE("attention export surfaces unwritable directories as I/O errors") {
    const auto dir = fresh_dir("blocked");
    const auto blocker = dir / "blocker";
    std::ofstream(blocker) << "not a directory";

    ReportVariant v;
    v.sentences = {{5}};
    v.slots = {0};
    v.sentence_log_prob = {-1.0};
    v.attention = {{{real(1), real(0), real(0), real(0)}}};
    CHECK_THROWS_AS(export_attention_maps(v, (blocker / "sub").string()), IoError);
}
