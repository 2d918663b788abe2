#include "vti/generate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "vti/data.hpp"
#include "vti/errors.hpp"

namespace vti {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw ContractError(msg);
}

}  // namespace

std::vector<double> sampling_distribution(std::span<const real> p, double temperature, int k) {
    const int n = static_cast<int>(p.size());
    require(n > 0, "sampling_distribution: empty distribution");
    require(temperature > 0, "sampling_distribution: temperature must be positive");
    require(k >= 1 && k <= n, "sampling_distribution: k must lie in [1, vocab size]");
    double sum = 0;
    for (const real v : p) {
        require(std::isfinite(static_cast<double>(v)) && v >= 0,
                "sampling_distribution: probabilities must be finite and non-negative");
        sum += static_cast<double>(v);
    }
    require(sum > 0, "sampling_distribution: probabilities sum to zero");

    std::vector<double> scaled(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        scaled[static_cast<std::size_t>(i)] = std::log(static_cast<double>(p[i])) / temperature;

    // top-k by scaled logit; stable sort keeps the lower id on ties
    std::vector<int> ids(static_cast<std::size_t>(n));
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(),
                     [&](int a, int b) { return scaled[static_cast<std::size_t>(a)] >
                                                scaled[static_cast<std::size_t>(b)]; });

    double hi = -std::numeric_limits<double>::infinity();
    for (int r = 0; r < k; ++r) hi = std::max(hi, scaled[static_cast<std::size_t>(ids[r])]);
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    double z = 0;
    for (int r = 0; r < k; ++r) {
        const int id = ids[static_cast<std::size_t>(r)];
        const double e = std::exp(scaled[static_cast<std::size_t>(id)] - hi);
        out[static_cast<std::size_t>(id)] = e;
        z += e;
    }
    for (double& v : out) v /= z;
    return out;
}

int sample_token(std::span<const real> p, double temperature, int k, Rng& rng) {
    const std::vector<double> dist = sampling_distribution(p, temperature, k);
    const double u = rng.uniform();
    double cum = 0;
    int last = 0;
    for (int i = 0; i < static_cast<int>(dist.size()); ++i) {
        if (dist[static_cast<std::size_t>(i)] <= 0) continue;
        cum += dist[static_cast<std::size_t>(i)];
        last = i;
        if (u < cum) return i;
    }
    return last;  // u landed in the rounding tail
}

ReportVariant generate_report(const VtiModel& m, const std::vector<real>& image,
                              double temperature, int k, Rng& rng) {
    const Tensor V = extract_visual_features(m, image, nullptr);
    const std::vector<DiagonalGaussian> priors = infer_priors(m, V, nullptr);
    const VisualContext ctx = make_visual_context(m, V, nullptr);

    ReportVariant out;
    out.topic_samples = Tensor({m.cfg.n_max, m.cfg.d_z});
    std::vector<Tensor> zs;
    zs.reserve(static_cast<std::size_t>(m.cfg.n_max));
    for (int i = 0; i < m.cfg.n_max; ++i) {
        // baseline mode decodes from the prior mean, mirroring its training loss
        Tensor z;
        if (m.cfg.deterministic_baseline) {
            z = priors[static_cast<std::size_t>(i)].mu;
        } else {
            Tensor eps({1, m.cfg.d_z});
            for (real& v : eps.vec()) v = static_cast<real>(rng.normal());
            z = reparameterize(priors[static_cast<std::size_t>(i)], eps, nullptr);
        }
        for (int d = 0; d < m.cfg.d_z; ++d) out.topic_samples.at2(i, d) = z.at(d);
        zs.push_back(std::move(z));
    }

    for (int i = 0; i < m.cfg.n_max; ++i) {
        const Tensor& z = zs[static_cast<std::size_t>(i)];
        DecoderState st = init_decoder(m, z, nullptr);
        int prev = kBosId;
        std::vector<int> toks;
        std::vector<std::vector<real>> att;
        double lp = 0;
        for (int t = 0; t < kMaxGenTokens; ++t) {
            const DecodeStep step = decode_step(m, prev, st, ctx, z, nullptr);
            const int tok = sample_token(
                std::span<const real>(step.probs.data(),
                                      static_cast<std::size_t>(m.cfg.d_vocab)),
                temperature, k, rng);
            toks.push_back(tok);
            att.emplace_back(step.alpha.data(), step.alpha.data() + step.alpha.size());
            lp += std::log(static_cast<double>(step.probs.at(tok)));
            if (tok == kEosId) break;
            prev = tok;
            st = step.state;
        }
        if (toks.size() == 1 && toks[0] == kEosId) continue;  // empty sentence
        if (std::find(out.sentences.begin(), out.sentences.end(), toks) != out.sentences.end())
            continue;  // exact duplicate of an earlier sentence
        out.sentence_log_prob.push_back(lp / static_cast<double>(toks.size()));
        out.sentences.push_back(std::move(toks));
        out.slots.push_back(i);
        out.attention.push_back(std::move(att));
    }
    return out;
}

double model_averaged_loglik(const VtiModel& m, const VisualContext& ctx,
                             const std::vector<Tensor>& topic_draws,
                             const std::vector<int>& sentence) {
    require(!topic_draws.empty(), "model_averaged_loglik: no topic samples");
    require(!sentence.empty(), "model_averaged_loglik: empty sentence");
    double total = 0;
    for (const Tensor& z : topic_draws) {
        DecoderState st = init_decoder(m, z, nullptr);
        int prev = kBosId;
        double lp = 0;
        for (const int tok : sentence) {
            const DecodeStep step = decode_step(m, prev, st, ctx, z, nullptr);
            lp += std::log(static_cast<double>(step.probs.at(tok)));
            prev = tok;
            st = step.state;
        }
        total += lp / static_cast<double>(sentence.size());
    }
    return total / static_cast<double>(topic_draws.size());
}

ReportVariant select_best_report(const VtiModel& m, const std::vector<real>& image,
                                 const std::vector<ReportVariant>& variants, int S,
                                 std::uint64_t rescore_seed) {
    require(!variants.empty(), "select_best_report: no variants");
    require(S >= 1, "select_best_report: need at least one rescoring sample");
    for (const ReportVariant& v : variants) {
        require(v.sentences.size() == v.slots.size() &&
                    v.sentences.size() == v.sentence_log_prob.size() &&
                    v.sentences.size() == v.attention.size(),
                "select_best_report: variant fields are misaligned");
        for (const int s : v.slots)
            require(s >= 0 && s < m.cfg.n_max, "select_best_report: slot out of range");
    }

    const Tensor V = extract_visual_features(m, image, nullptr);
    const std::vector<DiagonalGaussian> priors = infer_priors(m, V, nullptr);
    const VisualContext ctx = make_visual_context(m, V, nullptr);

    Rng rs(rescore_seed);
    std::vector<std::vector<Tensor>> draws(static_cast<std::size_t>(m.cfg.n_max));
    for (int j = 0; j < m.cfg.n_max; ++j) {
        for (int s = 0; s < S; ++s) {
            if (m.cfg.deterministic_baseline) {  // rescoring collapses to the mean
                draws[static_cast<std::size_t>(j)].push_back(
                    priors[static_cast<std::size_t>(j)].mu);
                continue;
            }
            Tensor eps({1, m.cfg.d_z});
            for (real& v : eps.vec()) v = static_cast<real>(rs.normal());
            draws[static_cast<std::size_t>(j)].push_back(
                reparameterize(priors[static_cast<std::size_t>(j)], eps, nullptr));
        }
    }

    ReportVariant out;
    out.topic_samples = Tensor({m.cfg.n_max, m.cfg.d_z});
    for (int d = 0; d < out.topic_samples.size(); ++d)
        out.topic_samples.at(d) = variants[0].topic_samples.defined()
                                      ? variants[0].topic_samples.at(d)
                                      : real(0);

    for (int j = 0; j < m.cfg.n_max; ++j) {
        double best_score = -std::numeric_limits<double>::infinity();
        const ReportVariant* best_v = nullptr;
        std::size_t best_s = 0;
        for (const ReportVariant& v : variants) {
            for (std::size_t s = 0; s < v.slots.size(); ++s) {
                if (v.slots[s] != j) continue;
                const double score = model_averaged_loglik(
                    m, ctx, draws[static_cast<std::size_t>(j)], v.sentences[s]);
                if (score > best_score) {
                    best_score = score;
                    best_v = &v;
                    best_s = s;
                }
            }
        }
        if (!best_v) continue;  // every variant dropped this slot
        out.sentences.push_back(best_v->sentences[best_s]);
        out.slots.push_back(j);
        out.sentence_log_prob.push_back(best_v->sentence_log_prob[best_s]);
        out.attention.push_back(best_v->attention[best_s]);
        if (best_v->topic_samples.defined())
            for (int d = 0; d < m.cfg.d_z; ++d)
                out.topic_samples.at2(j, d) = best_v->topic_samples.at2(j, d);
    }
    return out;
}

void export_attention_maps(const ReportVariant& v, const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create attention output directory: " + out_dir);

    char name[64];
    for (std::size_t s = 0; s < v.attention.size(); ++s) {
        const auto& rows = v.attention[s];
        require(!rows.empty(), "export_attention_maps: sentence without attention rows");

        std::snprintf(name, sizeof name, "sentence_%02zu_attention.csv", s);
        const auto csv_path = std::filesystem::path(out_dir) / name;
        std::ofstream csv(csv_path);
        if (!csv) throw IoError("cannot write attention CSV: " + csv_path.string());
        for (const auto& row : rows) {
            for (std::size_t j = 0; j < row.size(); ++j) {
                char num[32];
                std::snprintf(num, sizeof num, "%.9g", static_cast<double>(row[j]));
                csv << (j ? "," : "") << num;
            }
            csv << "\n";
        }
        if (!csv.good()) throw IoError("failed writing attention CSV: " + csv_path.string());

        for (std::size_t t = 0; t < rows.size(); ++t) {
            const auto& row = rows[t];
            const int k = static_cast<int>(row.size());
            const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(k))));
            require(side * side == k, "export_attention_maps: k is not a square grid");
            real peak = 0;
            for (const real a : row) peak = std::max(peak, a);
            require(peak > 0, "export_attention_maps: attention row sums to zero");

            const int up = side * 4;
            std::vector<real> img(static_cast<std::size_t>(up) * up);
            for (int r = 0; r < up; ++r)
                for (int c = 0; c < up; ++c)
                    img[static_cast<std::size_t>(r) * up + c] =
                        row[static_cast<std::size_t>((r / 4) * side + (c / 4))] / peak;
            std::snprintf(name, sizeof name, "sentence_%02zu_token_%02zu.pgm", s, t);
            write_pgm((std::filesystem::path(out_dir) / name).string(), img, up, up);
        }
    }
}

}  // namespace vti
