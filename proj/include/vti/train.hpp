#pragma once

// Adam training loop with cyclical KL annealing, early stopping on a
// posterior-mean validation loss, divergence handling, and binary
// checkpointing.
//
// Checkpoint format (little-endian): magic "VTI1", u32 version, u32 tensor
// count, then per tensor { u16 name length, name bytes, u8 rank, u32 dims,
// raw float32 data }, and a trailing CRC-32 over every preceding byte.
// Besides model parameters the file carries optimizer moments, RNG states,
// the model configuration, and loop counters; non-parameter entries use
// reserved "__"-prefixed names and encode text as byte-valued floats.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vti/data.hpp"
#include "vti/latent.hpp"
#include "vti/model.hpp"

namespace vti {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 5.0;  // global gradient norm bound
    int batch_size = 32;
    int max_epochs = 30;
    int patience = 5;    // epochs without strict validation improvement
    int mc_samples = 1;  // z draws per sentence in the training loss
    double beta_max = 1.0;
    int anneal_cycles = 4;
    double ramp_ratio = 0.5;
    long long anneal_total_steps = 0;  // 0: max_epochs * steps-per-epoch
    std::uint64_t seed = 12345;
};

// First and second moment buffers, aligned with a named parameter list.
struct AdamState {
    std::vector<Tensor> m, v;
    long long t = 0;  // completed steps
};

AdamState make_adam_state(const std::vector<std::pair<std::string, Tensor>>& params);

// Scales all gradients so their joint L2 norm is at most max_norm;
// returns the pre-clip norm.
double clip_global_norm(const std::vector<std::pair<std::string, Tensor>>& params,
                        double max_norm);

// One bias-corrected Adam update from the accumulated gradients.
// A non-finite gradient raises TrainError naming the parameter.
void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& st,
               const TrainConfig& cfg);

struct EpochStats {
    int epoch = 0;
    double train_loss = 0, train_ce = 0, train_kl = 0;
    double val_loss = 0, val_ce = 0, val_kl = 0;
    double beta_last = 0;  // annealed KL weight at the epoch's final step
    bool improved = false;
};

struct TrainResult {
    std::vector<EpochStats> history;
    double best_val_loss = 0;
    int best_epoch = -1;
    long long global_steps = 0;
    bool diverged = false;
    std::string divergence_reason;
};

// Trains in place. Writes the best-validation state to ckpt_out whenever it
// improves and the rolling end-of-epoch state to ckpt_out + ".last" (which
// resume_from accepts to continue a run step-for-step, given the same
// config). On divergence the loop aborts, keeping the last good checkpoint.
TrainResult fit(VtiModel& model, const std::vector<DatasetRecord>& train_set,
                const std::vector<DatasetRecord>& val_set, const TrainConfig& cfg,
                const std::string& ckpt_out, const std::string& resume_from = "");

// Fraction of teacher-forced argmax predictions matching the target token,
// with z at the posterior mean (prior mean in baseline mode).
double teacher_forced_accuracy(const VtiModel& m, const std::vector<DatasetRecord>& records);

// ---- checkpoint container ----

struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> tensors;  // preserved order
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);  // ParseError / IoError

// Text payloads (config, RNG states, counters) stored as byte-valued floats.
Tensor text_tensor(const std::string& s);
std::string tensor_text(const Tensor& t);
const Tensor* find_tensor(const Checkpoint& c, const std::string& name);  // null if absent

// Copies parameter tensors into the model by name. Reserved "__" entries are
// skipped; a missing, extra, or shape-mismatched parameter is a contract
// violation.
void load_model_params(VtiModel& m, const Checkpoint& c);

// Rebuilds the architecture recorded in the checkpoint and loads its weights.
ModelConfig config_from_checkpoint(const Checkpoint& c);
VtiModel model_from_checkpoint(const Checkpoint& c);

std::uint32_t crc32(const unsigned char* data, std::size_t n);

}  // namespace vti
