#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vti/config.hpp"
#include "vti/errors.hpp"

using namespace vti;
namespace fs = std::filesystem;

namespace {

const std::string kBin = VTI_BIN;  // absolute path, injected by the build

struct RunResult {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

RunResult run(const std::string& args) {
    static int counter = 0;
    const fs::path dir = "test_cli_tmp";
    fs::create_directories(dir);
    const fs::path out = dir / ("stdout_" + std::to_string(counter) + ".txt");
    const fs::path err = dir / ("stderr_" + std::to_string(counter) + ".txt");
    ++counter;
    const std::string cmd =
        kBin + " " + args + " > " + out.string() + " 2> " + err.string();
    const int rc = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> lines;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) lines.push_back(line);
    return lines;
}

int line_count(const fs::path& p) { return static_cast<int>(lines_of(slurp(p)).size()); }

int count_test_rows(const fs::path& manifest) {
    int n = 0;
    for (const std::string& line : lines_of(slurp(manifest)))
        if (line.find("\"split\":\"test\"") != std::string::npos) ++n;
    return n;
}

double csv_value(const fs::path& csv, const std::string& metric) {
    for (const std::string& line : lines_of(slurp(csv)))
        if (line.rfind(metric + ",", 0) == 0) return std::stod(line.substr(metric.size() + 1));
    FAIL("metric not found: " << metric);
    return -1;
}

}  // namespace

TEST_CASE("config registry parses, rejects, and round-trips") {
    SUBCASE("defaults survive a text round trip") {
        const Config defaults;
        const std::string text = config_text(defaults);
        const Config re = parse_config_text(text);
        CHECK(config_text(re) == text);
        CHECK(text.find("learning_rate=0.0003\n") != std::string::npos);
        CHECK(text.find("beta2=0.999\n") != std::string::npos);
        CHECK(text.find("z_per_step=false\n") != std::string::npos);
        CHECK(text.find("d_vocab") == std::string::npos);  // derived, never a key
    }
    SUBCASE("every registered key accepts its own printed value") {
        Config c;
        const std::string text = config_text(c);
        for (const std::string& line : lines_of(text)) {
            const std::size_t eq = line.find('=');
            REQUIRE(eq != std::string::npos);
            apply_config_entry(c, line.substr(0, eq), line.substr(eq + 1));
        }
        CHECK(config_keys().size() == lines_of(text).size());
    }
    SUBCASE("values land in the right fields") {
        Config c = parse_config_text(
            "learning_rate = 0.001  # tuned\n\n# comment line\nmax_epochs=3\n"
            "z_per_step=true\nseed=42\ntemperature=1.5\nn=17\n");
        CHECK(c.train.learning_rate == 0.001);
        CHECK(c.train.max_epochs == 3);
        CHECK(c.model.z_per_step);
        CHECK(c.train.seed == 42);
        CHECK(c.temperature == 1.5);
        CHECK(c.n == 17);
    }
    SUBCASE("unknown keys and malformed values are rejected") {
        Config c;
        CHECK_THROWS_AS(apply_config_entry(c, "bogus_key", "1"), ContractError);
        CHECK_THROWS_AS(apply_config_entry(c, "batch_size", "1.5"), ContractError);
        CHECK_THROWS_AS(apply_config_entry(c, "batch_size", ""), ContractError);
        CHECK_THROWS_AS(apply_config_entry(c, "learning_rate", "fast"), ContractError);
        CHECK_THROWS_AS(apply_config_entry(c, "z_per_step", "yes"), ContractError);
        CHECK_THROWS_AS(apply_config_entry(c, "seed", "-1"), ContractError);
        CHECK_THROWS_AS(parse_config_text("just words\n"), ContractError);
    }
    SUBCASE("missing config file is an I/O error") {
        CHECK_THROWS_AS(load_config("test_cli_tmp/absent.cfg"), IoError);
    }
}

// One flat sequence (not subcases) so the expensive synth/train steps run once.
TEST_CASE("subcommand pipeline runs end to end") {
    const fs::path root = "test_cli_tmp";
    fs::remove_all(root);
    fs::create_directories(root);
    const fs::path data = root / "data";

    // ---- synth ----
    const RunResult synth =
        run("synth --out " + data.string() + " --n 48 --seed 11 --set min_freq=1");
    CHECK(synth.code == 0);
    CHECK(synth.out.find("# resolved configuration") != std::string::npos);
    CHECK(synth.out.find("n=48\n") != std::string::npos);  // flag override visible
    CHECK(synth.out.find("data_seed=11\n") != std::string::npos);
    CHECK(synth.out.find("min_freq=1\n") != std::string::npos);
    REQUIRE(fs::exists(data / "manifest.jsonl"));
    REQUIRE(fs::exists(data / "vocab.txt"));
    REQUIRE(fs::exists(data / "rec_000000.pgm"));

    // ---- train, dimensions shrunk through a config file ----
    const fs::path cfg_path = root / "tiny.cfg";
    {
        std::ofstream cfg(cfg_path);
        cfg << "# desk-sized model for the smoke test\n"
               "conv_c1=4\nconv_c2=8\nd_v=16\nd_vt=14\nd_e=16\nd_h=16\nd_z=8\nd_mlp=16\n"
               "vt_layers=1\nlang_layers=1\nlang_heads=2\ndropout=0\n"
               "batch_size=8\nmax_epochs=2\nmc_samples=1\n";
    }
    const fs::path ckpt = root / "ckpt.bin";
    const RunResult train = run("train --data " + data.string() + " --config " +
                                cfg_path.string() + " --out " + ckpt.string());
    CHECK(train.code == 0);
    CHECK(train.out.find("d_vt=14\n") != std::string::npos);
    REQUIRE(fs::exists(ckpt));
    REQUIRE(fs::exists(ckpt.string() + ".last"));
    const auto history = lines_of(slurp(ckpt.string() + ".history.csv"));
    REQUIRE(history.size() == 3);  // header + two epochs
    CHECK(history[0].rfind("epoch,", 0) == 0);

    // --set outranks the config file
    const RunResult t1 = run("train --data " + data.string() + " --config " + cfg_path.string() +
                             " --set max_epochs=1 --out " + (root / "ckpt1.bin").string());
    CHECK(t1.code == 0);
    CHECK(t1.out.find("max_epochs=1\n") != std::string::npos);
    CHECK(line_count((root / "ckpt1.bin").string() + ".history.csv") == 2);

    // ---- generate ----
    const std::string gen_flags = " --data " + data.string() + " --split test --variants 2" +
                                  " --seed 5 --attention 2 --ckpt " + ckpt.string();
    const RunResult gen1 = run("generate" + gen_flags + " --out " + (root / "gen1").string());
    CHECK(gen1.code == 0);
    REQUIRE(fs::exists(root / "gen1" / "generated.jsonl"));
    REQUIRE(fs::exists(root / "gen1" / "variants.jsonl"));
    const int n_test = count_test_rows(data / "manifest.jsonl");
    REQUIRE(n_test > 0);
    CHECK(line_count(root / "gen1" / "generated.jsonl") == n_test);
    CHECK(line_count(root / "gen1" / "variants.jsonl") == 2 * n_test);
    int attn_dirs = 0;
    for (const auto& e : fs::directory_iterator(root / "gen1" / "attn"))
        attn_dirs += e.is_directory() ? 1 : 0;
    CHECK(attn_dirs == 2);

    // the same seed reproduces the manifests byte for byte
    const RunResult gen2 = run("generate" + gen_flags + " --out " + (root / "gen2").string());
    CHECK(gen2.code == 0);
    CHECK(slurp(root / "gen2" / "generated.jsonl") == slurp(root / "gen1" / "generated.jsonl"));
    CHECK(slurp(root / "gen2" / "variants.jsonl") == slurp(root / "gen1" / "variants.jsonl"));

    // a different seed changes the sampled reports
    const RunResult gen3 = run("generate --data " + data.string() +
                               " --split test --variants 2 --seed 6 --attention 0 --ckpt " +
                               ckpt.string() + " --out " + (root / "gen3").string());
    CHECK(gen3.code == 0);
    CHECK(slurp(root / "gen3" / "generated.jsonl") != slurp(root / "gen1" / "generated.jsonl"));

    // --best selection completes and keeps one row per record
    const RunResult best = run("generate" + gen_flags + " --best --out " +
                               (root / "best").string());
    CHECK(best.code == 0);
    CHECK(line_count(root / "best" / "generated.jsonl") == n_test);
    CHECK(slurp(root / "best" / "generated.jsonl").find("\"style\":-1") != std::string::npos);

    // ---- evaluate ----
    const RunResult ev = run("evaluate --generated " + (root / "gen1" / "generated.jsonl").string() +
                             " --reference " + (data / "manifest.jsonl").string() + " --out " +
                             (root / "eval1").string());
    CHECK(ev.code == 0);
    CHECK(ev.out.find("bleu1=") != std::string::npos);
    for (const char* name : {"eval.csv", "gen_length_hist.csv", "ref_length_hist.csv",
                             "per_report_bleu.csv"})
        REQUIRE(fs::exists(root / "eval1" / name));
    for (const char* metric : {"bleu1", "bleu4", "rouge_l", "meteor_lite", "clinical_micro_f1",
                               "clinical_macro_f1"}) {
        const double v = csv_value(root / "eval1" / "eval.csv", metric);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(line_count(root / "eval1" / "per_report_bleu.csv") == n_test + 1);

    // histogram counts in the evaluation output sum to the corpus size
    long long total = 0;
    const auto hist_rows = lines_of(slurp(root / "eval1" / "gen_length_hist.csv"));
    for (std::size_t i = 1; i < hist_rows.size(); ++i)
        total += std::stoll(hist_rows[i].substr(hist_rows[i].find(',') + 1));
    CHECK(total == n_test);

    // reference scored against itself saturates every metric
    const RunResult self = run("evaluate --generated " + (data / "manifest.jsonl").string() +
                               " --reference " + (data / "manifest.jsonl").string() + " --out " +
                               (root / "eval_self").string());
    CHECK(self.code == 0);
    CHECK(csv_value(root / "eval_self" / "eval.csv", "bleu1") == doctest::Approx(1.0));
    CHECK(csv_value(root / "eval_self" / "eval.csv", "rouge_l") == doctest::Approx(1.0));
    CHECK(csv_value(root / "eval_self" / "eval.csv", "clinical_micro_f1") == doctest::Approx(1.0));

    // vocabulary mismatched with the checkpoint is rejected
    const fs::path bad = root / "data_badvocab";
    fs::copy(data, bad, fs::copy_options::recursive);
    std::ofstream(bad / "vocab.txt", std::ios::app) << "straggler\n";
    const RunResult vb = run("generate --ckpt " + ckpt.string() + " --data " + bad.string() +
                             " --split test --out " + (root / "genbad").string());
    CHECK(vb.code == 1);
    CHECK(vb.err.find("vocabulary size") != std::string::npos);

    // generated image missing from the reference manifest is rejected
    std::ofstream(root / "orphan.jsonl")
        << R"({"image":"zzz.pgm","labels":[],"sentences":["a"],"split":"test","style":0})"
        << "\n";
    const RunResult orphan = run("evaluate --generated " + (root / "orphan.jsonl").string() +
                                 " --reference " + (data / "manifest.jsonl").string() + " --out " +
                                 (root / "evalbad").string());
    CHECK(orphan.code == 1);
    CHECK(orphan.err.find("zzz.pgm") != std::string::npos);
}

TEST_CASE("failure exit codes distinguish contract from I/O errors") {
    SUBCASE("missing manifest exits 2 and names the path") {
        const RunResult r = run("train --data test_cli_tmp/nowhere --out test_cli_tmp/x.bin");
        CHECK(r.code == 2);
        CHECK(r.err.find("nowhere") != std::string::npos);
    }
    SUBCASE("missing checkpoint exits 2") {
        const RunResult r = run("generate --ckpt test_cli_tmp/missing.bin --data test_cli_tmp/d"
                                " --out test_cli_tmp/g");
        CHECK(r.code == 2);
    }
    SUBCASE("unknown flag exits 1 with usage text") {
        const RunResult r = run("synth --out test_cli_tmp/d --bogus");
        CHECK(r.code == 1);
        CHECK(r.err.find("bogus") != std::string::npos);
        CHECK(r.err.find("Usage") != std::string::npos);
    }
    SUBCASE("missing subcommand exits 1") {
        CHECK(run("").code == 1);
    }
    SUBCASE("unknown config key exits 1 naming the key") {
        const RunResult r = run("synth --out test_cli_tmp/d --set bogus_key=3");
        CHECK(r.code == 1);
        CHECK(r.err.find("bogus_key") != std::string::npos);
    }
    SUBCASE("malformed config value exits 1") {
        const RunResult r = run("synth --out test_cli_tmp/d --set learning_rate=fast");
        CHECK(r.code == 1);
        CHECK(r.err.find("learning_rate") != std::string::npos);
    }
}
