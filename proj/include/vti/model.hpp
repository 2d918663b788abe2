#pragma once

// The report-generation network. One latent "topic" vector per sentence:
// a conv encoder turns the image into k local features; a visual transformer
// with one attention head per topic slot produces per-topic priors at a
// prepended [IMG] position; during training a language transformer reads each
// sentence into a posterior at a prepended [SENT] position. A two-LSTM
// decoder with additive visual attention emits the sentence, its first cell
// state seeded from the topic vector.
//
// Training draws z from the posterior; generation draws z from the prior.
// infer_posterior is deliberately not called anywhere on the generation path.
//
// All forward functions are pure given (parameters, inputs, explicit RNG);
// pass a null Tape for inference. Dropout (inside the prior/posterior MLP
// heads only) happens only when a dropout RNG is supplied.

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vti/data.hpp"
#include "vti/latent.hpp"
#include "vti/layers.hpp"
#include "vti/rng.hpp"
#include "vti/tensor.hpp"

namespace vti {

struct ModelConfig {
    int d_vocab = 0;   // set from the vocabulary before make_model
    int img_size = 32;
    int conv_c1 = 16;  // channels after conv stage 1
    int conv_c2 = 32;  // channels after conv stage 2
    int d_v = 64;      // visual feature dim (conv stage 3 channels)
    int d_vt = 112;    // visual transformer width; divisible by n_max
    int d_e = 64;      // word embedding width == language transformer width
    int d_h = 128;     // LSTM hidden width (also the attention score width)
    int d_z = 64;      // latent topic width
    int d_mlp = 128;   // hidden width of the prior/posterior MLP heads
    int n_max = 7;     // topic slots == visual attention heads
    int vt_layers = 2;  // full encoder layers below the topic read-out
    int lang_layers = 2;
    int lang_heads = 4;
    int max_len = 32;      // positional table size; sentences are truncated to it
    real dropout = 0.5;    // rate inside MLP heads when a dropout RNG is given
    bool z_per_step = false;  // ablation: concatenate z to every decoder input
    bool deterministic_baseline = false;  // z = prior mean, no posterior, no KL

    // number of conv output positions: three stride-2 stages halve thrice
    int feature_count() const {
        const int side = img_size / 8;
        return side * side;
    }
};

// Two-layer MLP head: fc1 -> relu -> (dropout) -> fc2.
struct MlpHead {
    LinearLayer fc1, fc2;
};

MlpHead make_mlp_head(int d_in, int d_hidden, int d_out, Rng& rng);
Tensor mlp_head(const MlpHead& h, const Tensor& x, real dropout_rate, Rng* dropout_rng,
                Tape* tape);

// Read-out attention on top of the visual encoder stack: layer norm plus one
// scaled-dot-product head per topic slot. Only the per-head outputs are
// consumed (there is no concat/projection/FFN tail), so every parameter here
// influences the priors.
struct TopicReadout {
    std::vector<Tensor> wq, wk, wv;  // n_max heads, (d_vt, d_vt/n_max) each
    Tensor ln_gamma, ln_beta;
};

struct VtiModel {
    ModelConfig cfg;

    Tensor conv1_w, conv1_b;  // (c1, 1, 3, 3)
    Tensor conv2_w, conv2_b;  // (c2, c1, 3, 3)
    Tensor conv3_w, conv3_b;  // (d_v, c2, 3, 3)
    LinearLayer vis_proj;     // d_v -> d_vt
    Tensor img_token;         // (1, d_vt), learned
    std::vector<TransformerLayerParams> visual_tf;  // n_max heads each
    TopicReadout topic_readout;     // final attention whose heads feed the priors
    std::vector<MlpHead> prior_mu;  // per topic: (d_vt/n_max) -> d_mlp -> d_z
    std::vector<MlpHead> prior_ls;

    EmbeddingTable words;  // shared by the posterior stream and the decoder
    Tensor sent_token;     // (1, d_e), learned
    std::vector<TransformerLayerParams> lang_tf;
    MlpHead posterior_head;  // d_e -> d_mlp -> 2*d_z (mu then log_sigma)

    LinearLayer z_to_cell;   // d_z -> d_h, seeds c1
    LstmCellParams lstm1;    // input d_e (+ d_z when z_per_step)
    LstmCellParams lstm2;    // input d_v + d_h
    LinearLayer attn_v;      // d_v -> d_h
    LinearLayer attn_h;      // d_h -> d_h
    Tensor attn_score;       // (d_h, 1)
    LinearLayer out_proj;    // d_h -> d_vocab
};

VtiModel make_model(const ModelConfig& cfg, Rng& rng);

// Fixed enumeration order; checkpoints and the optimizer depend on it.
std::vector<std::pair<std::string, Tensor>> named_parameters(const VtiModel& m);

// image must hold img_size^2 row-major pixels; returns (k, d_v).
Tensor extract_visual_features(const VtiModel& m, const std::vector<real>& image, Tape* tape);

// Per-topic priors from the k visual features (one per attention head of the
// last visual transformer layer, read at the [IMG] position).
std::vector<DiagonalGaussian> infer_priors(const VtiModel& m, const Tensor& V, Tape* tape,
                                           Rng* dropout_rng = nullptr);

// Posterior over the topic of one sentence. Training-time only by design.
DiagonalGaussian infer_posterior(const VtiModel& m, std::span<const int> sentence, Tape* tape,
                                 Rng* dropout_rng = nullptr);

// V plus its attention-space projection, computed once per report.
struct VisualContext {
    Tensor V;       // (k, d_v)
    Tensor proj_v;  // (k, d_h): attn_v applied to every feature
};

VisualContext make_visual_context(const VtiModel& m, const Tensor& V, Tape* tape);

struct VisualAttention {
    Tensor alpha;  // (k, 1), sums to 1
    Tensor v_a;    // (1, d_v)
};

VisualAttention visual_attention(const VtiModel& m, const VisualContext& ctx, const Tensor& h1,
                                 Tape* tape);
VisualAttention visual_attention(const VtiModel& m, const Tensor& V, const Tensor& h1, Tape* tape);

struct DecoderState {
    LstmState s1, s2;
};

// h1 = 0, c1 = z_to_cell(z), h2 = 0, c2 = 0; the first input token is [BOS].
DecoderState init_decoder(const VtiModel& m, const Tensor& z, Tape* tape);

struct DecodeStep {
    Tensor logits;  // (1, d_vocab)
    Tensor probs;   // softmax(logits)
    Tensor alpha;   // (k, 1) visual attention of this step
    DecoderState state;
};

DecodeStep decode_step(const VtiModel& m, int prev_token, const DecoderState& st,
                       const VisualContext& ctx, const Tensor& z, Tape* tape);

struct ElboOptions {
    real beta = real(1);
    int mc_samples = 1;              // z draws averaged inside each sentence CE
    bool use_posterior_mean = false; // validation: z = posterior mean, no draws
    Rng* rng = nullptr;              // required unless every z is a mean
    Rng* dropout_rng = nullptr;      // enables MLP-head dropout
};

struct ElboParts {
    Tensor loss;   // scalar: sum_i (CE_i + beta*KL_i) / active_sentences
    double ce = 0;  // per-sentence mean of summed token cross entropy (NLL)
    double kl = 0;  // per-sentence mean KL (unweighted)
    std::vector<double> kl_per_sentence;
    int active_sentences = 0;
};

// Teacher-forced loss of one record; sentences beyond n_max are dropped and
// each sentence is truncated to max_len tokens. The record must be encoded
// (DatasetRecord::sentences filled) and hold at least one sentence.
ElboParts elbo_loss(const VtiModel& m, const DatasetRecord& rec, const ElboOptions& opt,
                    Tape* tape);

}  // namespace vti
