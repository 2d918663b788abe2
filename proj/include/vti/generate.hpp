#pragma once

// Inference-time report generation: one topic draw per slot from the visual
// priors, temperature + top-k token sampling, duplicate-sentence suppression,
// model-averaged selection among variants, and attention-map export.
//
// Nothing here touches ground-truth sentences or the posterior network; the
// only model entry points used are the prior/decoder ones.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vti/model.hpp"

namespace vti {

inline constexpr int kMaxGenTokens = 20;  // sampled tokens per sentence, [EOS] included

// Fixed internal stream for select_best_report's fresh prior samples; a fixed
// default keeps selection deterministic and therefore idempotent.
inline constexpr std::uint64_t kRescoreSeed = 0x7a36c0de;

struct ReportVariant {
    // Sampled token ids per kept sentence; a sentence keeps its trailing
    // [EOS] when one was drawn, otherwise it was cut at kMaxGenTokens.
    std::vector<std::vector<int>> sentences;
    std::vector<int> slots;                 // topic slot that produced each sentence
    std::vector<double> sentence_log_prob;  // mean ln p_model(token) over the sentence
    std::vector<std::vector<std::vector<real>>> attention;  // [sentence][step][k]
    Tensor topic_samples;                   // (n_max, d_z): one draw per slot, kept or not
};

// Distribution actually sampled from: ln(p) is scaled by 1/temperature, all
// but the k largest entries are masked (ties keep the lower id), and the
// rest renormalize. Probabilities come in, not logits.
std::vector<double> sampling_distribution(std::span<const real> p, double temperature, int k);

int sample_token(std::span<const real> p, double temperature, int k, Rng& rng);

// Draws every topic sample first (n_max * d_z normals), then decodes slot by
// slot. A sentence whose first sample is [EOS], or that exactly duplicates an
// earlier kept sentence, is dropped (its slot simply stays silent).
ReportVariant generate_report(const VtiModel& m, const std::vector<real>& image,
                              double temperature, int k, Rng& rng);

// Average over topic_draws of the teacher-forced mean-token log-likelihood
// of one sentence; the quantity select_best_report maximizes per slot.
double model_averaged_loglik(const VtiModel& m, const VisualContext& ctx,
                             const std::vector<Tensor>& topic_draws,
                             const std::vector<int>& sentence);

// Per slot, every candidate sentence is rescored with model_averaged_loglik
// over S fresh prior samples (drawn slot by slot, S at a time, from
// Rng(rescore_seed)); the best candidate wins, ties keeping the earliest
// variant. Winning sentences pass through unchanged, so a single variant is
// returned as-is and the operation is idempotent.
ReportVariant select_best_report(const VtiModel& m, const std::vector<real>& image,
                                 const std::vector<ReportVariant>& variants, int S,
                                 std::uint64_t rescore_seed = kRescoreSeed);

// One CSV per sentence (rows = decoding steps, columns = the k image
// locations) plus one max-normalized PGM heat map per token, upsampled 4x4
// per location for visual inspection.
void export_attention_maps(const ReportVariant& v, const std::string& out_dir);

}  // namespace vti
