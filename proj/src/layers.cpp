#include "vti/layers.hpp"

#include <cmath>
#include <numeric>

namespace vti {

namespace {

Tensor uniform_tensor(std::vector<int> shape, double bound, Rng& rng) {
    Tensor t(std::move(shape));
    for (long long i = 0; i < t.size(); ++i)
        t.at(i) = static_cast<real>(rng.uniform(-bound, bound));
    t.set_requires_grad(true);
    return t;
}

Tensor const_param(std::vector<int> shape, real v) {
    Tensor t(std::move(shape), v);
    t.set_requires_grad(true);
    return t;
}

}  // namespace

LinearLayer make_linear(int d_in, int d_out, Rng& rng) {
    if (d_in <= 0 || d_out <= 0) throw ContractError("make_linear: non-positive dimension");
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    LinearLayer l;
    l.weight = uniform_tensor({d_in, d_out}, bound, rng);
    l.bias = const_param({d_out}, real(0));
    return l;
}

Tensor linear(const LinearLayer& l, const Tensor& x, Tape* tape) {
    if (x.rank() != 2 || x.cols() != l.weight.dim(0))
        throw ContractError("linear: input columns " +
                            std::to_string(x.rank() == 2 ? x.cols() : -1) +
                            " do not match weight rows " + std::to_string(l.weight.dim(0)));
    return add(matmul(x, l.weight, tape), l.bias, tape);
}

Tensor sinusoidal_positions(int max_len, int d_e) {
    Tensor t(std::vector<int>{max_len, d_e});
    for (int p = 0; p < max_len; ++p)
        for (int i = 0; i < d_e; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d_e);
            const double angle = p * freq;
            t.at2(p, i) = static_cast<real>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    return t;
}

EmbeddingTable make_embedding(int d_vocab, int d_e, int max_len, Rng& rng) {
    EmbeddingTable e;
    e.table = uniform_tensor({d_vocab, d_e}, 1.0 / std::sqrt(static_cast<double>(d_e)), rng);
    e.positional = sinusoidal_positions(max_len, d_e);
    return e;
}

Tensor embed(const EmbeddingTable& t, std::span<const int> ids, bool add_position, Tape* tape) {
    Tensor rows = gather_rows(t.table, ids, tape);
    if (!add_position) return rows;
    const int n = static_cast<int>(ids.size());
    if (n > t.positional.dim(0))
        throw ContractError("embed: sequence length " + std::to_string(n) +
                            " exceeds positional table " + std::to_string(t.positional.dim(0)));
    std::vector<int> pos(static_cast<size_t>(n));
    std::iota(pos.begin(), pos.end(), 0);
    Tensor posrows = gather_rows(t.positional, pos, tape);
    return add(rows, posrows, tape);
}

LstmCellParams make_lstm_cell(int d_in, int d_h, Rng& rng) {
    LstmCellParams p;
    p.w_x = uniform_tensor({d_in, 4 * d_h}, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
    p.w_h = uniform_tensor({d_h, 4 * d_h}, 1.0 / std::sqrt(static_cast<double>(d_h)), rng);
    p.bias = const_param({4 * d_h}, real(0));
    for (int j = d_h; j < 2 * d_h; ++j) p.bias.at(j) = real(1);  // forget gate open at start
    return p;
}

LstmState lstm_cell(const LstmCellParams& p, const Tensor& x, const Tensor& h_prev,
                    const Tensor& c_prev, Tape* tape) {
    const int d_h = p.w_h.dim(0);
    if (x.rank() != 2 || x.rows() != 1 || x.cols() != p.w_x.dim(0))
        throw ContractError("lstm_cell: input shape mismatch");
    if (h_prev.rank() != 2 || h_prev.rows() != 1 || h_prev.cols() != d_h ||
        c_prev.rank() != 2 || c_prev.rows() != 1 || c_prev.cols() != d_h)
        throw ContractError("lstm_cell: state shape mismatch");
    Tensor gates = add(add(matmul(x, p.w_x, tape), matmul(h_prev, p.w_h, tape), tape), p.bias, tape);
    Tensor i = sigmoid(slice_cols(gates, 0, d_h, tape), tape);
    Tensor f = sigmoid(slice_cols(gates, d_h, d_h, tape), tape);
    Tensor g = vti::tanh(slice_cols(gates, 2 * d_h, d_h, tape), tape);
    Tensor o = sigmoid(slice_cols(gates, 3 * d_h, d_h, tape), tape);
    LstmState s;
    s.c = add(mul(f, c_prev, tape), mul(i, g, tape), tape);
    s.h = mul(o, vti::tanh(s.c, tape), tape);
    return s;
}

TransformerLayerParams make_transformer_layer(int d_model, int n_heads, Rng& rng) {
    if (n_heads <= 0 || d_model % n_heads != 0)
        throw ContractError("make_transformer_layer: d_model " + std::to_string(d_model) +
                            " not divisible by heads " + std::to_string(n_heads));
    const int hd = d_model / n_heads;
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
    TransformerLayerParams p;
    p.n_heads = n_heads;
    for (int h = 0; h < n_heads; ++h) {
        p.wq.push_back(uniform_tensor({d_model, hd}, bound, rng));
        p.wk.push_back(uniform_tensor({d_model, hd}, bound, rng));
        p.wv.push_back(uniform_tensor({d_model, hd}, bound, rng));
    }
    p.wo = make_linear(d_model, d_model, rng);
    p.ff1 = make_linear(d_model, 2 * d_model, rng);
    p.ff2 = make_linear(2 * d_model, d_model, rng);
    p.ln1_gamma = const_param({d_model}, real(1));
    p.ln1_beta = const_param({d_model}, real(0));
    p.ln2_gamma = const_param({d_model}, real(1));
    p.ln2_beta = const_param({d_model}, real(0));
    return p;
}

Tensor multi_head_attention(const TransformerLayerParams& p, const Tensor& seq, Tape* tape,
                            MhaCapture* capture) {
    if (seq.rank() != 2 || seq.rows() < 1)
        throw ContractError("multi_head_attention: sequence must be (n >= 1, d_model)");
    const int hd = p.wq[0].dim(1);
    const real inv_scale = static_cast<real>(1.0 / std::sqrt(static_cast<double>(hd)));
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(p.n_heads));
    for (int h = 0; h < p.n_heads; ++h) {
        Tensor q = matmul(seq, p.wq[static_cast<size_t>(h)], tape);
        Tensor k = matmul(seq, p.wk[static_cast<size_t>(h)], tape);
        Tensor v = matmul(seq, p.wv[static_cast<size_t>(h)], tape);
        Tensor scores = scale(matmul(q, k, tape, false, true), inv_scale, tape);
        Tensor attn = softmax(scores, 1, tape);
        Tensor out = matmul(attn, v, tape);
        heads.push_back(out);
        if (capture) {
            capture->head_outputs.push_back(out);
            capture->attention.push_back(attn);
        }
    }
    Tensor merged = concat_cols(std::span<const Tensor>(heads.data(), heads.size()), tape);
    return linear(p.wo, merged, tape);
}

Tensor transformer_layer(const TransformerLayerParams& p, const Tensor& seq, Tape* tape,
                         MhaCapture* capture) {
    Tensor normed = layer_norm(seq, p.ln1_gamma, p.ln1_beta, tape);
    Tensor x = add(seq, multi_head_attention(p, normed, tape, capture), tape);
    Tensor normed2 = layer_norm(x, p.ln2_gamma, p.ln2_beta, tape);
    Tensor ff = linear(p.ff2, relu(linear(p.ff1, normed2, tape), tape), tape);
    return add(x, ff, tape);
}

Tensor make_dropout_mask(const std::vector<int>& shape, real rate, Rng& rng) {
    Tensor m(shape);
    for (long long i = 0; i < m.size(); ++i)
        m.at(i) = rng.bernoulli(static_cast<double>(rate)) ? real(0) : real(1);
    return m;
}

void collect_params(const LinearLayer& l, std::vector<Tensor>& out) {
    out.push_back(l.weight);
    out.push_back(l.bias);
}

void collect_params(const LstmCellParams& p, std::vector<Tensor>& out) {
    out.push_back(p.w_x);
    out.push_back(p.w_h);
    out.push_back(p.bias);
}

void collect_params(const TransformerLayerParams& p, std::vector<Tensor>& out) {
    for (int h = 0; h < p.n_heads; ++h) {
        out.push_back(p.wq[static_cast<size_t>(h)]);
        out.push_back(p.wk[static_cast<size_t>(h)]);
        out.push_back(p.wv[static_cast<size_t>(h)]);
    }
    collect_params(p.wo, out);
    collect_params(p.ff1, out);
    collect_params(p.ff2, out);
    out.push_back(p.ln1_gamma);
    out.push_back(p.ln1_beta);
    out.push_back(p.ln2_gamma);
    out.push_back(p.ln2_beta);
}

}  // namespace vti
