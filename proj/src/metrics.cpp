#include "vti/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <unordered_map>

#include "vti/data.hpp"
#include "vti/errors.hpp"

namespace vti {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw ContractError(msg);
}

void require_paired(const std::vector<std::vector<std::string>>& c,
                    const std::vector<std::vector<std::string>>& r, const char* who) {
    require(c.size() == r.size(),
            std::string(who) + ": candidate and reference counts differ");
}

// n-gram key: tokens joined on a separator that cannot occur inside a token
std::unordered_map<std::string, long long> ngram_counts(const std::vector<std::string>& toks,
                                                        int n) {
    std::unordered_map<std::string, long long> counts;
    if (static_cast<int>(toks.size()) < n) return counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
        std::string key = toks[i];
        for (int j = 1; j < n; ++j) {
            key += '\x1f';
            key += toks[i + static_cast<std::size_t>(j)];
        }
        counts[key] += 1;
    }
    return counts;
}

double safe_f1(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

}  // namespace

std::vector<double> bleu(const std::vector<std::vector<std::string>>& candidates,
                         const std::vector<std::vector<std::string>>& references, int max_n) {
    require_paired(candidates, references, "bleu");
    require(max_n >= 1, "bleu: max_n must be at least 1");

    std::vector<long long> matched(static_cast<std::size_t>(max_n), 0);
    std::vector<long long> total(static_cast<std::size_t>(max_n), 0);
    long long cand_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        cand_len += static_cast<long long>(candidates[i].size());
        ref_len += static_cast<long long>(references[i].size());
        for (int n = 1; n <= max_n; ++n) {
            const auto cc = ngram_counts(candidates[i], n);
            const auto rc = ngram_counts(references[i], n);
            for (const auto& [g, count] : cc) {
                const auto it = rc.find(g);
                if (it != rc.end())
                    matched[static_cast<std::size_t>(n - 1)] += std::min(count, it->second);
            }
            const long long slots =
                static_cast<long long>(candidates[i].size()) - n + 1;
            total[static_cast<std::size_t>(n - 1)] += std::max<long long>(0, slots);
        }
    }

    const double bp = cand_len == 0 ? 0.0
                      : cand_len < ref_len
                          ? std::exp(1.0 - static_cast<double>(ref_len) /
                                               static_cast<double>(cand_len))
                          : 1.0;
    std::vector<double> out(static_cast<std::size_t>(max_n), 0.0);
    double log_sum = 0;
    bool dead = false;
    for (int n = 1; n <= max_n; ++n) {
        const long long m = matched[static_cast<std::size_t>(n - 1)];
        const long long t = total[static_cast<std::size_t>(n - 1)];
        if (m == 0 || t == 0) dead = true;
        if (!dead) log_sum += std::log(static_cast<double>(m) / static_cast<double>(t));
        out[static_cast<std::size_t>(n - 1)] =
            dead ? 0.0 : bp * std::exp(log_sum / n);
    }
    return out;
}

namespace {

int lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[m];
}

}  // namespace

double rouge_l(const std::vector<std::vector<std::string>>& candidates,
               const std::vector<std::vector<std::string>>& references) {
    require_paired(candidates, references, "rouge_l");
    if (candidates.empty()) return 0.0;
    double sum = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const int lcs = lcs_length(candidates[i], references[i]);
        if (lcs == 0 || candidates[i].empty() || references[i].empty()) continue;
        const double p = static_cast<double>(lcs) / static_cast<double>(candidates[i].size());
        const double r = static_cast<double>(lcs) / static_cast<double>(references[i].size());
        sum += safe_f1(p, r);
    }
    return sum / static_cast<double>(candidates.size());
}

// ---- METEOR-lite alignment ----

namespace {

// Branch-and-bound over candidate positions, left to right. Each matched
// word is assigned an unused reference occurrence; a chunk continues when
// position i-1 matched reference j-1. The first leaf explored is the
// chunk-greedy leftmost assignment, so exhausting the node budget still
// leaves a valid (merely possibly non-minimal) alignment.
struct ChunkSearch {
    const std::vector<std::string>& cand;
    std::unordered_map<std::string, std::vector<int>> ref_pos;
    std::unordered_map<std::string, std::vector<bool>> used;
    std::unordered_map<std::string, int> skips;  // cand occurrences left unmatched
    long long budget = 200000;
    int best = std::numeric_limits<int>::max();

    void run(std::size_t i, int prev_ref, int chunks) {
        if (chunks >= best || budget <= 0) return;
        --budget;
        if (i == cand.size()) {
            best = chunks;
            return;
        }
        const std::string& w = cand[i];
        const auto rp = ref_pos.find(w);
        if (rp == ref_pos.end()) {
            run(i + 1, -2, chunks);
            return;
        }
        auto& flags = used[w];
        // continuing the current chunk first steers the search toward small
        // chunk counts early, tightening the bound
        const auto& positions = rp->second;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t o = 0; o < positions.size(); ++o) {
                if (flags[o]) continue;
                const bool contiguous = positions[o] == prev_ref + 1 && prev_ref >= 0;
                if ((pass == 0) != contiguous) continue;
                flags[o] = true;
                run(i + 1, positions[o], chunks + (contiguous ? 0 : 1));
                flags[o] = false;
            }
        }
        auto sk = skips.find(w);
        if (sk != skips.end() && sk->second > 0) {
            sk->second -= 1;
            run(i + 1, -2, chunks);
            sk->second += 1;
        }
    }
};

}  // namespace

MeteorAlignment meteor_align(const std::vector<std::string>& cand,
                             const std::vector<std::string>& ref) {
    std::unordered_map<std::string, int> cc, rc;
    for (const auto& w : cand) cc[w] += 1;
    for (const auto& w : ref) rc[w] += 1;

    MeteorAlignment a;
    ChunkSearch search{cand, {}, {}, {}};
    for (int i = 0; i < static_cast<int>(ref.size()); ++i) search.ref_pos[ref[static_cast<std::size_t>(i)]].push_back(i);
    for (const auto& [w, n] : cc) {
        const auto it = rc.find(w);
        const int quota = it == rc.end() ? 0 : std::min(n, it->second);
        a.matches += quota;
        if (quota == 0) {
            search.ref_pos.erase(w);  // unmatched word type: always skipped
        } else {
            search.used[w].assign(search.ref_pos[w].size(), false);
            search.skips[w] = n - quota;
        }
    }
    if (a.matches == 0) return a;
    search.run(0, -2, 0);
    a.chunks = search.best;
    return a;
}

double meteor_lite(const std::vector<std::vector<std::string>>& candidates,
                   const std::vector<std::vector<std::string>>& references) {
    require_paired(candidates, references, "meteor_lite");
    if (candidates.empty()) return 0.0;
    double sum = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const MeteorAlignment a = meteor_align(candidates[i], references[i]);
        if (a.matches == 0) continue;
        const double m = a.matches;
        const double p = m / static_cast<double>(candidates[i].size());
        const double r = m / static_cast<double>(references[i].size());
        const double fmean = 10 * p * r / (r + 9 * p);
        const double frag = static_cast<double>(a.chunks) / m;
        sum += fmean * (1.0 - 0.5 * frag * frag * frag);
    }
    return sum / static_cast<double>(candidates.size());
}

// ---- clinical efficacy ----

const LabelerRules& default_labeler_rules() {
    static const LabelerRules rules = {
        {"cardiomegaly", "heart", "cardiac"},
        {"effusion", "effusions"},
        {"opacity", "opacities"},
        {"pneumothorax"},
        {"fracture", "fractures", "fractured"},
        {"device"},
    };
    return rules;
}

std::vector<int> label_report(const std::vector<std::string>& tokens,
                              const LabelerRules& rules) {
    std::vector<int> out;
    for (int label = 0; label < static_cast<int>(rules.size()); ++label) {
        bool hit = false;
        for (std::size_t i = 0; i < tokens.size() && !hit; ++i) {
            const auto& keywords = rules[static_cast<std::size_t>(label)];
            if (std::find(keywords.begin(), keywords.end(), tokens[i]) == keywords.end())
                continue;
            bool negated = false;
            for (std::size_t back = 1; back <= 3 && back <= i; ++back) {
                const std::string& t = tokens[i - back];
                if (t == "no" || t == "without") negated = true;
            }
            hit = !negated;
        }
        if (hit) out.push_back(label);
    }
    return out;
}

ClinicalScores clinical_efficacy(const std::vector<std::vector<std::string>>& generated,
                                 const std::vector<std::vector<int>>& gt_labels,
                                 const LabelerRules& rules) {
    require(generated.size() == gt_labels.size(),
            "clinical_efficacy: report and label counts differ");
    const int n_labels = static_cast<int>(rules.size());
    std::vector<long long> tp(static_cast<std::size_t>(n_labels), 0);
    std::vector<long long> fp(static_cast<std::size_t>(n_labels), 0);
    std::vector<long long> fn(static_cast<std::size_t>(n_labels), 0);

    for (std::size_t i = 0; i < generated.size(); ++i) {
        std::vector<bool> truth(static_cast<std::size_t>(n_labels), false);
        for (const int l : gt_labels[i]) {
            require(l >= 0 && l < n_labels,
                    "clinical_efficacy: unknown label id " + std::to_string(l));
            truth[static_cast<std::size_t>(l)] = true;
        }
        std::vector<bool> pred(static_cast<std::size_t>(n_labels), false);
        for (const int l : label_report(generated[i], rules))
            pred[static_cast<std::size_t>(l)] = true;
        for (int l = 0; l < n_labels; ++l) {
            const auto s = static_cast<std::size_t>(l);
            if (pred[s] && truth[s]) tp[s] += 1;
            else if (pred[s]) fp[s] += 1;
            else if (truth[s]) fn[s] += 1;
        }
    }

    ClinicalScores out;
    long long TP = 0, FP = 0, FN = 0;
    for (int l = 0; l < n_labels; ++l) {
        TP += tp[static_cast<std::size_t>(l)];
        FP += fp[static_cast<std::size_t>(l)];
        FN += fn[static_cast<std::size_t>(l)];
    }
    out.micro.precision = TP + FP > 0 ? static_cast<double>(TP) / static_cast<double>(TP + FP) : 0.0;
    out.micro.recall = TP + FN > 0 ? static_cast<double>(TP) / static_cast<double>(TP + FN) : 0.0;
    out.micro.f1 = safe_f1(out.micro.precision, out.micro.recall);

    // macro averages run over the labels with any activity; see header
    double p_sum = 0, r_sum = 0, f_sum = 0;
    int active = 0, predicted = 0;
    for (int l = 0; l < n_labels; ++l) {
        const auto s = static_cast<std::size_t>(l);
        const long long preds = tp[s] + fp[s], positives = tp[s] + fn[s];
        if (preds == 0 && positives == 0) continue;
        active += 1;
        const double p = preds > 0 ? static_cast<double>(tp[s]) / static_cast<double>(preds) : 0.0;
        const double r =
            positives > 0 ? static_cast<double>(tp[s]) / static_cast<double>(positives) : 0.0;
        if (preds > 0) {
            predicted += 1;
            p_sum += p;
        }
        r_sum += r;
        f_sum += safe_f1(p, r);
    }
    out.macro.precision = predicted > 0 ? p_sum / predicted : 0.0;
    out.macro.recall = active > 0 ? r_sum / active : 0.0;
    out.macro.f1 = active > 0 ? f_sum / active : 0.0;
    return out;
}

std::map<int, long long> length_hist(const std::vector<std::vector<std::string>>& reports) {
    std::map<int, long long> hist;
    for (const auto& r : reports) hist[static_cast<int>(r.size())] += 1;
    return hist;
}

void write_hist_csv(const std::map<int, long long>& hist, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write histogram CSV: " + path);
    out << "length,count\n";
    for (const auto& [len, count] : hist) out << len << "," << count << "\n";
    if (!out.good()) throw IoError("failed writing histogram CSV: " + path);
}

std::vector<double> per_report_bleu(const std::vector<std::vector<std::string>>& candidates,
                                    const std::vector<std::vector<std::string>>& references,
                                    int n) {
    require_paired(candidates, references, "per_report_bleu");
    std::vector<double> out;
    out.reserve(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i)
        out.push_back(bleu({candidates[i]}, {references[i]}, n).back());
    return out;
}

EvalReport evaluate_corpus(const std::vector<std::vector<std::string>>& generated,
                           const std::vector<std::vector<std::string>>& references,
                           const std::vector<std::vector<int>>& gt_labels) {
    EvalReport r;
    const std::vector<double> b = bleu(generated, references, 4);
    std::copy(b.begin(), b.end(), r.bleu.begin());
    r.rouge_l = rouge_l(generated, references);
    r.meteor_lite = meteor_lite(generated, references);
    r.clinical = clinical_efficacy(generated, gt_labels);
    r.gen_length_hist = length_hist(generated);
    r.ref_length_hist = length_hist(references);
    return r;
}

void write_eval_csv(const EvalReport& r, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write evaluation CSV: " + path);
    char num[32];
    const auto row = [&](const char* name, double v) {
        std::snprintf(num, sizeof num, "%.6f", v);
        out << name << "," << num << "\n";
    };
    out << "metric,value\n";
    row("bleu1", r.bleu[0]);
    row("bleu2", r.bleu[1]);
    row("bleu3", r.bleu[2]);
    row("bleu4", r.bleu[3]);
    row("rouge_l", r.rouge_l);
    row("meteor_lite", r.meteor_lite);
    row("clinical_micro_precision", r.clinical.micro.precision);
    row("clinical_micro_recall", r.clinical.micro.recall);
    row("clinical_micro_f1", r.clinical.micro.f1);
    row("clinical_macro_precision", r.clinical.macro.precision);
    row("clinical_macro_recall", r.clinical.macro.recall);
    row("clinical_macro_f1", r.clinical.macro.f1);
    if (!out.good()) throw IoError("failed writing evaluation CSV: " + path);
}

}  // namespace vti
