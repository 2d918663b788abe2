#pragma once

// Neural building blocks shared by both model streams: linear projections,
// token embeddings with sinusoidal positions, an LSTM cell, and a pre-norm
// Transformer encoder layer whose per-head attention outputs can be captured
// before concatenation.
//
// All sequence inputs are rank-2 (positions x features). Parameters are plain
// tensors; initializers draw from a caller-supplied Rng so builds are
// reproducible. Dropout masks are always made explicitly by the caller.

#include <span>
#include <vector>

#include "vti/rng.hpp"
#include "vti/tensor.hpp"

namespace vti {

struct LinearLayer {
    Tensor weight;  // (d_in, d_out)
    Tensor bias;    // (d_out)
};

// Weights uniform in [-1/sqrt(d_in), 1/sqrt(d_in)], bias zero.
LinearLayer make_linear(int d_in, int d_out, Rng& rng);
Tensor linear(const LinearLayer& l, const Tensor& x, Tape* tape);

struct EmbeddingTable {
    Tensor table;       // (d_vocab, d_e), trainable
    Tensor positional;  // (max_len, d_e), fixed sinusoidal
};

EmbeddingTable make_embedding(int d_vocab, int d_e, int max_len, Rng& rng);
// positional[p, 2i] = sin(p / 10000^(2i/d)), positional[p, 2i+1] = cos(...)
Tensor sinusoidal_positions(int max_len, int d_e);
Tensor embed(const EmbeddingTable& t, std::span<const int> ids, bool add_position, Tape* tape);

struct LstmCellParams {
    // gate order along the 4*d_h axis: input, forget, cell-candidate, output
    Tensor w_x;   // (d_in, 4*d_h)
    Tensor w_h;   // (d_h, 4*d_h)
    Tensor bias;  // (4*d_h), forget block starts at 1
};

LstmCellParams make_lstm_cell(int d_in, int d_h, Rng& rng);

struct LstmState {
    Tensor h;  // (1, d_h)
    Tensor c;  // (1, d_h)
};

LstmState lstm_cell(const LstmCellParams& p, const Tensor& x, const Tensor& h_prev,
                    const Tensor& c_prev, Tape* tape);

struct TransformerLayerParams {
    int n_heads = 0;
    // Weight-only projections, one (d_model, d_model/n_heads) per head. A key
    // bias shifts every score in a softmax row equally (exactly no effect);
    // query/value biases are absorbed by the score shift and the output
    // projection, so attention biases would be dead or redundant parameters.
    std::vector<Tensor> wq, wk, wv;
    LinearLayer wo;  // (d_model -> d_model)
    LinearLayer ff1, ff2;                 // d_model -> 2*d_model -> d_model
    Tensor ln1_gamma, ln1_beta;           // attention-branch norm
    Tensor ln2_gamma, ln2_beta;           // feed-forward-branch norm
};

TransformerLayerParams make_transformer_layer(int d_model, int n_heads, Rng& rng);

// Internals exposed on request: head outputs before the concat+projection,
// and per-head attention weights (rows sum to 1).
struct MhaCapture {
    std::vector<Tensor> head_outputs;  // n_heads x (n, d_model/n_heads)
    std::vector<Tensor> attention;     // n_heads x (n, n)
};

Tensor multi_head_attention(const TransformerLayerParams& p, const Tensor& seq, Tape* tape,
                            MhaCapture* capture = nullptr);

// Pre-norm residual layout: x + MHA(LN(x)), then + FFN(LN(.)).
Tensor transformer_layer(const TransformerLayerParams& p, const Tensor& seq, Tape* tape,
                         MhaCapture* capture = nullptr);

// Bernoulli keep-mask (1 with probability 1-rate) for the dropout op.
Tensor make_dropout_mask(const std::vector<int>& shape, real rate, Rng& rng);

// Parameter enumeration, in a fixed documented order (used for optimizer
// state, checkpoints, and gradient checks).
void collect_params(const LinearLayer& l, std::vector<Tensor>& out);
void collect_params(const LstmCellParams& p, std::vector<Tensor>& out);
void collect_params(const TransformerLayerParams& p, std::vector<Tensor>& out);

}  // namespace vti
