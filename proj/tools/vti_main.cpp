// Command-line front end tying the library together: dataset synthesis,
// training, report generation, and evaluation as subcommands of one binary.
// Every run starts by printing its resolved configuration so output
// directories are self-describing. Exit codes: 0 success, 1 contract or
// parse errors (including bad flags), 2 I/O errors.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vti/config.hpp"
#include "vti/data.hpp"
#include "vti/errors.hpp"
#include "vti/generate.hpp"
#include "vti/metrics.hpp"
#include "vti/model.hpp"
#include "vti/rng.hpp"
#include "vti/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "key=value config file");
    cmd->add_option("--set", o.sets, "config override as key=value (repeatable)");
}

vti::Config resolve_config(const CommonOpts& o) {
    vti::Config c = o.config_path.empty() ? vti::Config{} : vti::load_config(o.config_path);
    for (const std::string& kv : o.sets) {
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw vti::ContractError("--set expects key=value, got '" + kv + "'");
        vti::apply_config_entry(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return c;
}

void print_config(const vti::Config& c) {
    std::cout << "# resolved configuration\n" << vti::config_text(c) << std::flush;
}

std::string join_sentences(const std::vector<std::string>& sentences) {
    std::string all;
    for (const std::string& s : sentences) {
        if (!all.empty()) all += ' ';
        all += s;
    }
    return all;
}

// Manifest rows without the image payload: what generate and evaluate need.
struct ManifestRow {
    std::string image;
    std::vector<std::string> sentences;
    std::vector<int> labels;
};

std::vector<ManifestRow> read_manifest_rows(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw vti::IoError("cannot read manifest: " + path);
    std::vector<ManifestRow> rows;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            ManifestRow row;
            row.image = j.at("image").get<std::string>();
            for (const auto& s : j.at("sentences")) row.sentences.push_back(s.get<std::string>());
            if (j.contains("labels"))
                for (const auto& l : j.at("labels"))
                    row.labels.push_back(vti::condition_from_name(l.get<std::string>()));
            rows.push_back(std::move(row));
        } catch (const json::exception& e) {
            throw vti::ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return rows;
}

// ---- synth ----

int run_synth(const std::string& out_dir, const vti::Config& cfg) {
    print_config(cfg);
    std::vector<vti::DatasetRecord> records =
        vti::synth_generate(cfg.n, cfg.data_seed, cfg.style_count);
    vti::assign_splits(records, cfg.data_seed);
    vti::write_dataset(records, out_dir);

    // the vocabulary sees only the training split, as a real corpus would
    std::vector<std::vector<std::string>> corpus;
    for (const auto& rec : records)
        if (rec.split == "train")
            for (const auto& s : rec.sentence_text) corpus.push_back(vti::tokenize(s));
    const vti::Vocabulary vocab = vti::build_vocab(corpus, cfg.min_freq);
    vti::save_vocab(vocab, (fs::path(out_dir) / "vocab.txt").string());

    std::cout << "wrote " << records.size() << " records and a vocabulary of " << vocab.size()
              << " tokens to " << out_dir << "\n";
    return 0;
}

// ---- train ----

void write_history_csv(const vti::TrainResult& result, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw vti::IoError("cannot write history CSV: " + path);
    out << "epoch,train_loss,train_ce,train_kl,val_loss,val_ce,val_kl,beta_last,improved\n";
    char buf[200];
    for (const vti::EpochStats& e : result.history) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d\n", e.epoch,
                      e.train_loss, e.train_ce, e.train_kl, e.val_loss, e.val_ce, e.val_kl,
                      e.beta_last, e.improved ? 1 : 0);
        out << buf;
    }
    if (!out.good()) throw vti::IoError("failed writing history CSV: " + path);
}

int run_train(const std::string& data_dir, const std::string& ckpt_out,
              const std::string& resume, vti::Config cfg) {
    print_config(cfg);
    std::vector<vti::DatasetRecord> records =
        vti::load_dataset((fs::path(data_dir) / "manifest.jsonl").string());
    const vti::Vocabulary vocab = vti::load_vocab((fs::path(data_dir) / "vocab.txt").string());
    vti::encode_records(records, vocab);

    std::vector<vti::DatasetRecord> train_set, val_set;
    for (auto& rec : records) {
        if (rec.split == "train") train_set.push_back(std::move(rec));
        else if (rec.split == "val") val_set.push_back(std::move(rec));
    }
    std::cout << "train records: " << train_set.size() << ", val records: " << val_set.size()
              << ", vocabulary: " << vocab.size() << "\n";

    cfg.model.d_vocab = vocab.size();
    vti::Rng init_rng(vti::derive_stream(cfg.train.seed, 0));
    vti::VtiModel model = vti::make_model(cfg.model, init_rng);

    const vti::TrainResult result = vti::fit(model, train_set, val_set, cfg.train, ckpt_out, resume);
    write_history_csv(result, ckpt_out + ".history.csv");

    for (const vti::EpochStats& e : result.history)
        std::cout << "epoch " << e.epoch << ": train " << e.train_loss << " val " << e.val_loss
                  << " (ce " << e.val_ce << ", kl " << e.val_kl << ")"
                  << (e.improved ? " *" : "") << "\n";
    if (result.diverged) {
        std::cerr << "training diverged: " << result.divergence_reason << "\n";
    } else {
        std::cout << "best epoch " << result.best_epoch << " with validation loss "
                  << result.best_val_loss << "; checkpoint at " << ckpt_out << "\n";
    }
    return 0;
}

// ---- generate ----

int run_generate(const std::string& ckpt, const std::string& data_dir, const std::string& split,
                 const std::string& out_dir, bool best, const vti::Config& cfg) {
    print_config(cfg);
    const vti::Checkpoint c = vti::load_checkpoint(ckpt);
    const vti::VtiModel model = vti::model_from_checkpoint(c);
    const vti::Vocabulary vocab = vti::load_vocab((fs::path(data_dir) / "vocab.txt").string());
    if (vocab.size() != model.cfg.d_vocab)
        throw vti::ContractError("vocabulary size " + std::to_string(vocab.size()) +
                                 " does not match checkpoint vocabulary size " +
                                 std::to_string(model.cfg.d_vocab));

    if (cfg.variants < 1) throw vti::ContractError("variants must be at least 1");
    const std::string manifest = (fs::path(data_dir) / "manifest.jsonl").string();
    const std::vector<vti::DatasetRecord> records = vti::load_dataset(manifest);
    const std::vector<ManifestRow> rows = read_manifest_rows(manifest);

    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "generated.jsonl", std::ios::binary);
    if (!out) throw vti::IoError("cannot write generated manifest in: " + out_dir);
    std::ofstream var_out(fs::path(out_dir) / "variants.jsonl", std::ios::binary);
    if (!var_out) throw vti::IoError("cannot write variants manifest in: " + out_dir);

    int emitted = 0, exported = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].split != split) continue;
        // stream keyed by the absolute record index: stable under re-splits
        vti::Rng rng(vti::derive_stream(cfg.gen_seed, i));
        std::vector<vti::ReportVariant> variants;
        for (int v = 0; v < cfg.variants; ++v)
            variants.push_back(
                vti::generate_report(model, records[i].image, cfg.temperature, cfg.top_k, rng));

        for (std::size_t v = 0; v < variants.size(); ++v) {
            json j;
            j["image"] = rows[i].image;
            j["variant"] = v;
            json sents = json::array();
            for (const auto& s : variants[v].sentences) sents.push_back(vti::detokenize(vocab, s));
            j["sentences"] = sents;
            var_out << j.dump() << '\n';
        }

        const vti::ReportVariant chosen =
            best ? vti::select_best_report(model, records[i].image, variants, cfg.rescore_samples)
                 : variants.front();
        json j;
        j["image"] = rows[i].image;
        j["labels"] = json::array();  // generated reports carry no ground truth
        json sents = json::array();
        for (const auto& s : chosen.sentences) sents.push_back(vti::detokenize(vocab, s));
        j["sentences"] = sents;
        j["split"] = split;
        j["style"] = best ? -1 : 0;  // which variant the report came from
        out << j.dump() << '\n';
        emitted += 1;

        if (exported < cfg.attention_records) {
            const std::string stem = fs::path(rows[i].image).stem().string();
            vti::export_attention_maps(chosen, (fs::path(out_dir) / "attn" / stem).string());
            exported += 1;
        }
    }
    if (!out.good() || !var_out.good())
        throw vti::IoError("failed writing generated manifests in: " + out_dir);
    std::cout << "generated " << emitted << " reports (" << cfg.variants
              << " variants each) for split '" << split << "' into " << out_dir << "\n";
    return 0;
}

// ---- evaluate ----

int run_evaluate(const std::string& gen_path, const std::string& ref_path,
                 const std::string& out_dir, const vti::Config& cfg) {
    print_config(cfg);
    const std::vector<ManifestRow> gen_rows = read_manifest_rows(gen_path);
    const std::vector<ManifestRow> ref_rows = read_manifest_rows(ref_path);
    std::map<std::string, const ManifestRow*> by_image;
    for (const ManifestRow& r : ref_rows) by_image[r.image] = &r;

    std::vector<std::vector<std::string>> gen_tokens, ref_tokens;
    std::vector<std::vector<int>> labels;
    for (const ManifestRow& g : gen_rows) {
        const auto it = by_image.find(g.image);
        if (it == by_image.end())
            throw vti::ContractError("no reference row for image '" + g.image + "'");
        gen_tokens.push_back(vti::tokenize(join_sentences(g.sentences)));
        ref_tokens.push_back(vti::tokenize(join_sentences(it->second->sentences)));
        labels.push_back(it->second->labels);
    }

    const vti::EvalReport report = vti::evaluate_corpus(gen_tokens, ref_tokens, labels);
    fs::create_directories(out_dir);
    vti::write_eval_csv(report, (fs::path(out_dir) / "eval.csv").string());
    vti::write_hist_csv(report.gen_length_hist, (fs::path(out_dir) / "gen_length_hist.csv").string());
    vti::write_hist_csv(report.ref_length_hist, (fs::path(out_dir) / "ref_length_hist.csv").string());

    std::ofstream per(fs::path(out_dir) / "per_report_bleu.csv", std::ios::trunc);
    if (!per) throw vti::IoError("cannot write per-report CSV in: " + out_dir);
    per << "image,bleu1,bleu2,bleu3,bleu4\n";
    std::vector<std::vector<double>> per_n;
    for (int n = 1; n <= 4; ++n) per_n.push_back(vti::per_report_bleu(gen_tokens, ref_tokens, n));
    char buf[160];
    for (std::size_t i = 0; i < gen_rows.size(); ++i) {
        std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%.6f\n", per_n[0][i], per_n[1][i],
                      per_n[2][i], per_n[3][i]);
        per << gen_rows[i].image << buf;
    }
    if (!per.good()) throw vti::IoError("failed writing per-report CSV in: " + out_dir);

    std::cout << "evaluated " << gen_rows.size() << " reports\n"
              << "bleu1=" << report.bleu[0] << " bleu4=" << report.bleu[3]
              << " rouge_l=" << report.rouge_l << " meteor_lite=" << report.meteor_lite << "\n"
              << "clinical micro P/R/F1 = " << report.clinical.micro.precision << "/"
              << report.clinical.micro.recall << "/" << report.clinical.micro.f1 << "\n"
              << "clinical macro P/R/F1 = " << report.clinical.macro.precision << "/"
              << report.clinical.macro.recall << "/" << report.clinical.macro.f1 << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"latent-topic report generation from images"};
    app.require_subcommand(1);

    CommonOpts synth_common, train_common, gen_common, eval_common;

    CLI::App* synth = app.add_subcommand("synth", "write a synthetic dataset and vocabulary");
    std::string synth_out;
    int synth_n = 0, synth_styles = 0, synth_min_freq = 0;
    std::uint64_t synth_seed = 0;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--n", synth_n, "number of records");
    synth->add_option("--seed", synth_seed, "corpus seed");
    synth->add_option("--styles", synth_styles, "writer styles");
    synth->add_option("--min-freq", synth_min_freq, "vocabulary frequency threshold");
    add_common(synth, synth_common);

    CLI::App* train = app.add_subcommand("train", "fit the model on a dataset directory");
    std::string train_data, train_out, train_resume;
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--out", train_out, "checkpoint output path")->required();
    train->add_option("--resume", train_resume, "checkpoint to resume from");
    add_common(train, train_common);

    CLI::App* gen = app.add_subcommand("generate", "sample reports from a checkpoint");
    std::string gen_ckpt, gen_data, gen_split = "test", gen_out;
    int gen_variants = 0, gen_topk = 0, gen_attention = 0;
    double gen_temperature = 0;
    std::uint64_t gen_seed = 0;
    bool gen_best = false;
    gen->add_option("--ckpt", gen_ckpt, "checkpoint path")->required();
    gen->add_option("--data", gen_data, "dataset directory")->required();
    gen->add_option("--split", gen_split, "dataset split to generate for");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--variants", gen_variants, "variants per image");
    gen->add_option("--temperature", gen_temperature, "sampling temperature");
    gen->add_option("--topk", gen_topk, "top-k cutoff");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--attention", gen_attention, "records with attention exports");
    gen->add_flag("--best", gen_best, "keep the model-averaged best sentences");
    add_common(gen, gen_common);

    CLI::App* eval = app.add_subcommand("evaluate", "score a generated manifest");
    std::string eval_gen, eval_ref, eval_out;
    eval->add_option("--generated", eval_gen, "generated manifest")->required();
    eval->add_option("--reference", eval_ref, "reference manifest")->required();
    eval->add_option("--out", eval_out, "output directory")->required();
    add_common(eval, eval_common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return 1;
    }

    try {
        if (synth->parsed()) {
            vti::Config cfg = resolve_config(synth_common);
            if (synth->count("--n")) cfg.n = synth_n;
            if (synth->count("--seed")) cfg.data_seed = synth_seed;
            if (synth->count("--styles")) cfg.style_count = synth_styles;
            if (synth->count("--min-freq")) cfg.min_freq = synth_min_freq;
            return run_synth(synth_out, cfg);
        }
        if (train->parsed()) {
            return run_train(train_data, train_out, train_resume,
                             resolve_config(train_common));
        }
        if (gen->parsed()) {
            vti::Config cfg = resolve_config(gen_common);
            if (gen->count("--variants")) cfg.variants = gen_variants;
            if (gen->count("--temperature")) cfg.temperature = gen_temperature;
            if (gen->count("--topk")) cfg.top_k = gen_topk;
            if (gen->count("--seed")) cfg.gen_seed = gen_seed;
            if (gen->count("--attention")) cfg.attention_records = gen_attention;
            return run_generate(gen_ckpt, gen_data, gen_split, gen_out, gen_best, cfg);
        }
        return run_evaluate(eval_gen, eval_ref, eval_out, resolve_config(eval_common));
    } catch (const vti::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
