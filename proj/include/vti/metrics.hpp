#pragma once

// Corpus evaluation: BLEU-1..4, ROUGE-L, METEOR-lite (exact matching only),
// clinical efficacy via a keyword labeler with a negation guard, and report
// length histograms. All functions take whole reports as flat token lists,
// one reference per candidate, and run in a fixed order so corpus scores are
// reproducible bit for bit.

#include <array>
#include <map>
#include <string>
#include <vector>

namespace vti {

struct PrfScores {
    double precision = 0, recall = 0, f1 = 0;
};

struct ClinicalScores {
    PrfScores micro, macro;
};

struct EvalReport {
    std::array<double, 4> bleu{};  // cumulative orders 1..4
    double rouge_l = 0;
    double meteor_lite = 0;
    ClinicalScores clinical;
    std::map<int, long long> gen_length_hist, ref_length_hist;
};

// Corpus BLEU: clipped n-gram matches pooled over all pairs, geometric mean
// of orders 1..n, times brevity penalty exp(1 - r/c) when c < r. Returns one
// cumulative score per order. Empty candidates contribute zero matches.
std::vector<double> bleu(const std::vector<std::vector<std::string>>& candidates,
                         const std::vector<std::vector<std::string>>& references, int max_n);

// Mean over pairs of the LCS-based F1 (P = LCS/|cand|, R = LCS/|ref|).
double rouge_l(const std::vector<std::vector<std::string>>& candidates,
               const std::vector<std::vector<std::string>>& references);

// Exact-match unigram alignment. The match count is fixed by per-word
// minimum counts; the assignment minimizing the chunk count is found by
// branch-and-bound (exact within a node budget that always covers short
// sentences, falling back to the best assignment explored).
struct MeteorAlignment {
    int matches = 0;
    int chunks = 0;
};

MeteorAlignment meteor_align(const std::vector<std::string>& cand,
                             const std::vector<std::string>& ref);

// Mean over pairs of Fmean * (1 - penalty) with Fmean = 10PR/(R+9P) and
// penalty = 0.5 * (chunks/matches)^3; 0 when nothing matches.
double meteor_lite(const std::vector<std::vector<std::string>>& candidates,
                   const std::vector<std::vector<std::string>>& references);

// Keyword lists per condition id; a keyword hit is suppressed when "no" or
// "without" occurs within the three preceding tokens.
using LabelerRules = std::vector<std::vector<std::string>>;

const LabelerRules& default_labeler_rules();

std::vector<int> label_report(const std::vector<std::string>& tokens,
                              const LabelerRules& rules = default_labeler_rules());

// Micro: pooled TP/FP/FN over all reports. Macro: unweighted mean over the
// labels with any activity (ground-truth positives or predictions); labels
// never predicted are left out of macro precision, labels without positives
// score zero recall/F1. Ground-truth ids outside the rule set are rejected.
ClinicalScores clinical_efficacy(const std::vector<std::vector<std::string>>& generated,
                                 const std::vector<std::vector<int>>& gt_labels,
                                 const LabelerRules& rules = default_labeler_rules());

std::map<int, long long> length_hist(const std::vector<std::vector<std::string>>& reports);

// One line per length, ascending, after a "length,count" header.
void write_hist_csv(const std::map<int, long long>& hist, const std::string& path);

// BLEU-n of each pair in isolation, for per-report inspection dumps.
std::vector<double> per_report_bleu(const std::vector<std::vector<std::string>>& candidates,
                                    const std::vector<std::vector<std::string>>& references,
                                    int n);

// Everything above in one pass (BLEU to order 4).
EvalReport evaluate_corpus(const std::vector<std::vector<std::string>>& generated,
                           const std::vector<std::vector<std::string>>& references,
                           const std::vector<std::vector<int>>& gt_labels);

// "metric,value" rows for every scalar in the report.
void write_eval_csv(const EvalReport& r, const std::string& path);

}  // namespace vti
