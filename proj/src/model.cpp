#include "vti/model.hpp"

#include <algorithm>
#include <cmath>

namespace vti {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw ContractError(msg);
}

Tensor uniform_param(std::vector<int> shape, double bound, Rng& rng) {
    Tensor t(std::move(shape));
    for (long long i = 0; i < t.size(); ++i)
        t.at(i) = static_cast<real>(rng.uniform(-bound, bound));
    t.set_requires_grad(true);
    return t;
}

Tensor zero_param(std::vector<int> shape) {
    Tensor t(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

// Negative log-likelihood of one teacher-forced sentence, summed over tokens:
// inputs are [BOS] + tokens, targets are tokens + [EOS]. The sum (not a
// per-token mean) keeps the reconstruction term commensurate with the KL so
// the beta trade-off is independent of sentence length.
Tensor sentence_ce(const VtiModel& m, const VisualContext& ctx, const Tensor& z,
                   std::span<const int> tokens, Tape* tape) {
    DecoderState st = init_decoder(m, z, tape);
    std::vector<int> inputs;
    inputs.reserve(tokens.size() + 1);
    inputs.push_back(kBosId);
    inputs.insert(inputs.end(), tokens.begin(), tokens.end());
    std::vector<int> targets(tokens.begin(), tokens.end());
    targets.push_back(kEosId);

    Tensor acc;
    for (size_t t = 0; t < targets.size(); ++t) {
        DecodeStep step = decode_step(m, inputs[t], st, ctx, z, tape);
        Tensor lp = log_softmax(step.logits, 1, tape);
        Tensor tok = pick(lp, targets[t], tape);
        acc = acc.defined() ? add(acc, tok, tape) : tok;
        st = step.state;
    }
    return scale(acc, -real(1), tape);
}

void add_param(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name,
               const Tensor& t) {
    out.emplace_back(name, t);
}

void add_linear(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                const LinearLayer& l) {
    add_param(out, prefix + ".w", l.weight);
    add_param(out, prefix + ".b", l.bias);
}

void add_lstm(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
              const LstmCellParams& p) {
    add_param(out, prefix + ".wx", p.w_x);
    add_param(out, prefix + ".wh", p.w_h);
    add_param(out, prefix + ".b", p.bias);
}

void add_mlp(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
             const MlpHead& h) {
    add_linear(out, prefix + ".fc1", h.fc1);
    add_linear(out, prefix + ".fc2", h.fc2);
}

void add_transformer(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                     const TransformerLayerParams& p) {
    for (int h = 0; h < p.n_heads; ++h) {
        const std::string hp = prefix + ".h" + std::to_string(h);
        add_param(out, hp + ".q", p.wq[static_cast<size_t>(h)]);
        add_param(out, hp + ".k", p.wk[static_cast<size_t>(h)]);
        add_param(out, hp + ".v", p.wv[static_cast<size_t>(h)]);
    }
    add_linear(out, prefix + ".wo", p.wo);
    add_linear(out, prefix + ".ff1", p.ff1);
    add_linear(out, prefix + ".ff2", p.ff2);
    add_param(out, prefix + ".ln1g", p.ln1_gamma);
    add_param(out, prefix + ".ln1b", p.ln1_beta);
    add_param(out, prefix + ".ln2g", p.ln2_gamma);
    add_param(out, prefix + ".ln2b", p.ln2_beta);
}

}  // namespace

MlpHead make_mlp_head(int d_in, int d_hidden, int d_out, Rng& rng) {
    return {make_linear(d_in, d_hidden, rng), make_linear(d_hidden, d_out, rng)};
}

Tensor mlp_head(const MlpHead& h, const Tensor& x, real dropout_rate, Rng* dropout_rng,
                Tape* tape) {
    Tensor hidden = relu(linear(h.fc1, x, tape), tape);
    if (dropout_rng && dropout_rate > real(0)) {
        Tensor mask = make_dropout_mask(hidden.shape(), dropout_rate, *dropout_rng);
        hidden = dropout(hidden, mask, dropout_rate, tape);
    }
    return linear(h.fc2, hidden, tape);
}

VtiModel make_model(const ModelConfig& cfg, Rng& rng) {
    require(cfg.d_vocab > 5, "make_model: d_vocab must exceed the 5 special tokens");
    require(cfg.img_size >= 8 && cfg.img_size % 8 == 0,
            "make_model: img_size must be a positive multiple of 8");
    require(cfg.n_max >= 1 && cfg.d_vt % cfg.n_max == 0,
            "make_model: d_vt must be divisible by n_max");
    require(cfg.d_e % cfg.lang_heads == 0, "make_model: d_e must be divisible by lang_heads");
    require(cfg.vt_layers >= 1 && cfg.lang_layers >= 1, "make_model: layer counts must be >= 1");

    // Construction order doubles as the named_parameters order below.
    VtiModel m;
    m.cfg = cfg;
    m.conv1_w = uniform_param({cfg.conv_c1, 1, 3, 3}, 1.0 / std::sqrt(9.0), rng);
    m.conv1_b = zero_param({cfg.conv_c1});
    m.conv2_w = uniform_param({cfg.conv_c2, cfg.conv_c1, 3, 3},
                              1.0 / std::sqrt(9.0 * cfg.conv_c1), rng);
    m.conv2_b = zero_param({cfg.conv_c2});
    m.conv3_w = uniform_param({cfg.d_v, cfg.conv_c2, 3, 3}, 1.0 / std::sqrt(9.0 * cfg.conv_c2),
                              rng);
    m.conv3_b = zero_param({cfg.d_v});
    m.vis_proj = make_linear(cfg.d_v, cfg.d_vt, rng);
    m.img_token = uniform_param({1, cfg.d_vt}, 1.0 / std::sqrt(cfg.d_vt), rng);
    for (int l = 0; l < cfg.vt_layers; ++l)
        m.visual_tf.push_back(make_transformer_layer(cfg.d_vt, cfg.n_max, rng));
    const int head_dim = cfg.d_vt / cfg.n_max;
    const double ro_bound = 1.0 / std::sqrt(static_cast<double>(cfg.d_vt));
    for (int i = 0; i < cfg.n_max; ++i) {
        m.topic_readout.wq.push_back(uniform_param({cfg.d_vt, head_dim}, ro_bound, rng));
        m.topic_readout.wk.push_back(uniform_param({cfg.d_vt, head_dim}, ro_bound, rng));
        m.topic_readout.wv.push_back(uniform_param({cfg.d_vt, head_dim}, ro_bound, rng));
    }
    m.topic_readout.ln_gamma = Tensor({cfg.d_vt}, real(1), true);
    m.topic_readout.ln_beta = zero_param({cfg.d_vt});
    for (int i = 0; i < cfg.n_max; ++i) {
        m.prior_mu.push_back(make_mlp_head(head_dim, cfg.d_mlp, cfg.d_z, rng));
        m.prior_ls.push_back(make_mlp_head(head_dim, cfg.d_mlp, cfg.d_z, rng));
    }
    m.words = make_embedding(cfg.d_vocab, cfg.d_e, cfg.max_len, rng);
    m.sent_token = uniform_param({1, cfg.d_e}, 1.0 / std::sqrt(cfg.d_e), rng);
    for (int l = 0; l < cfg.lang_layers; ++l)
        m.lang_tf.push_back(make_transformer_layer(cfg.d_e, cfg.lang_heads, rng));
    m.posterior_head = make_mlp_head(cfg.d_e, cfg.d_mlp, 2 * cfg.d_z, rng);
    m.z_to_cell = make_linear(cfg.d_z, cfg.d_h, rng);
    m.lstm1 = make_lstm_cell(cfg.d_e + (cfg.z_per_step ? cfg.d_z : 0), cfg.d_h, rng);
    m.lstm2 = make_lstm_cell(cfg.d_v + cfg.d_h, cfg.d_h, rng);
    m.attn_v = make_linear(cfg.d_v, cfg.d_h, rng);
    m.attn_h = make_linear(cfg.d_h, cfg.d_h, rng);
    m.attn_score = uniform_param({cfg.d_h, 1}, 1.0 / std::sqrt(cfg.d_h), rng);
    m.out_proj = make_linear(cfg.d_h, cfg.d_vocab, rng);
    return m;
}

std::vector<std::pair<std::string, Tensor>> named_parameters(const VtiModel& m) {
    std::vector<std::pair<std::string, Tensor>> out;
    add_param(out, "conv1.w", m.conv1_w);
    add_param(out, "conv1.b", m.conv1_b);
    add_param(out, "conv2.w", m.conv2_w);
    add_param(out, "conv2.b", m.conv2_b);
    add_param(out, "conv3.w", m.conv3_w);
    add_param(out, "conv3.b", m.conv3_b);
    add_linear(out, "vis_proj", m.vis_proj);
    add_param(out, "img_token", m.img_token);
    for (size_t l = 0; l < m.visual_tf.size(); ++l)
        add_transformer(out, "vtf." + std::to_string(l), m.visual_tf[l]);
    for (size_t h = 0; h < m.topic_readout.wq.size(); ++h) {
        const std::string hp = "readout.h" + std::to_string(h);
        add_param(out, hp + ".q", m.topic_readout.wq[h]);
        add_param(out, hp + ".k", m.topic_readout.wk[h]);
        add_param(out, hp + ".v", m.topic_readout.wv[h]);
    }
    add_param(out, "readout.lng", m.topic_readout.ln_gamma);
    add_param(out, "readout.lnb", m.topic_readout.ln_beta);
    for (size_t i = 0; i < m.prior_mu.size(); ++i) {
        add_mlp(out, "prior." + std::to_string(i) + ".mu", m.prior_mu[i]);
        add_mlp(out, "prior." + std::to_string(i) + ".ls", m.prior_ls[i]);
    }
    add_param(out, "words", m.words.table);
    add_param(out, "sent_token", m.sent_token);
    for (size_t l = 0; l < m.lang_tf.size(); ++l)
        add_transformer(out, "ltf." + std::to_string(l), m.lang_tf[l]);
    add_mlp(out, "posterior", m.posterior_head);
    add_linear(out, "z_to_cell", m.z_to_cell);
    add_lstm(out, "lstm1", m.lstm1);
    add_lstm(out, "lstm2", m.lstm2);
    add_linear(out, "attn_v", m.attn_v);
    add_linear(out, "attn_h", m.attn_h);
    add_param(out, "attn_score", m.attn_score);
    add_linear(out, "out_proj", m.out_proj);
    return out;
}

Tensor extract_visual_features(const VtiModel& m, const std::vector<real>& image, Tape* tape) {
    const int s = m.cfg.img_size;
    require(static_cast<long long>(image.size()) == static_cast<long long>(s) * s,
            "extract_visual_features: image size does not match img_size");
    Tensor x = Tensor::from({1, s, s}, image);
    x = relu(conv2d(x, m.conv1_w, m.conv1_b, 2, 1, tape), tape);
    x = relu(conv2d(x, m.conv2_w, m.conv2_b, 2, 1, tape), tape);
    x = relu(conv2d(x, m.conv3_w, m.conv3_b, 2, 1, tape), tape);
    return flatten_spatial(x, tape);  // (k, d_v)
}

std::vector<DiagonalGaussian> infer_priors(const VtiModel& m, const Tensor& V, Tape* tape,
                                           Rng* dropout_rng) {
    Tensor seq = concat_rows(m.img_token, linear(m.vis_proj, V, tape), tape);
    for (const TransformerLayerParams& layer : m.visual_tf)
        seq = transformer_layer(layer, seq, tape);
    // Topic read-out: one attention head per topic over the encoded sequence,
    // queried at the [IMG] position (row 0).
    const TopicReadout& ro = m.topic_readout;
    Tensor normed = layer_norm(seq, ro.ln_gamma, ro.ln_beta, tape);
    const int head_dim = m.cfg.d_vt / m.cfg.n_max;
    const real att_scale = real(1) / static_cast<real>(std::sqrt(static_cast<double>(head_dim)));
    static constexpr int kImgRow[1] = {0};
    Tensor query_row = gather_rows(normed, std::span<const int>(kImgRow, 1), tape);
    std::vector<DiagonalGaussian> priors;
    priors.reserve(m.prior_mu.size());
    for (size_t i = 0; i < m.prior_mu.size(); ++i) {
        Tensor q = matmul(query_row, ro.wq[i], tape);                    // (1, hd)
        Tensor k = matmul(normed, ro.wk[i], tape);                       // (n, hd)
        Tensor v = matmul(normed, ro.wv[i], tape);                       // (n, hd)
        Tensor attn = softmax(scale(matmul(q, k, tape, false, true), att_scale, tape), 1, tape);
        Tensor h = matmul(attn, v, tape);                                // (1, hd)
        Tensor mu = mlp_head(m.prior_mu[i], h, m.cfg.dropout, dropout_rng, tape);
        Tensor ls = mlp_head(m.prior_ls[i], h, m.cfg.dropout, dropout_rng, tape);
        priors.push_back(make_gaussian(mu, ls, tape));
    }
    return priors;
}

DiagonalGaussian infer_posterior(const VtiModel& m, std::span<const int> sentence, Tape* tape,
                                 Rng* dropout_rng) {
    require(!sentence.empty(), "infer_posterior: empty sentence");
    Tensor emb = embed(m.words, sentence, true, tape);
    Tensor seq = concat_rows(m.sent_token, emb, tape);
    for (const TransformerLayerParams& layer : m.lang_tf)
        seq = transformer_layer(layer, seq, tape);
    static constexpr int kSentRow[1] = {0};
    Tensor s = gather_rows(seq, std::span<const int>(kSentRow, 1), tape);
    Tensor out = mlp_head(m.posterior_head, s, m.cfg.dropout, dropout_rng, tape);
    Tensor mu = slice_cols(out, 0, m.cfg.d_z, tape);
    Tensor ls = slice_cols(out, m.cfg.d_z, m.cfg.d_z, tape);
    return make_gaussian(mu, ls, tape);
}

VisualContext make_visual_context(const VtiModel& m, const Tensor& V, Tape* tape) {
    return {V, linear(m.attn_v, V, tape)};
}

VisualAttention visual_attention(const VtiModel& m, const VisualContext& ctx, const Tensor& h1,
                                 Tape* tape) {
    Tensor pre = tanh(add(ctx.proj_v, linear(m.attn_h, h1, tape), tape), tape);  // (k, d_h)
    Tensor scores = matmul(pre, m.attn_score, tape);                             // (k, 1)
    Tensor alpha = softmax(scores, 0, tape);
    Tensor v_a = matmul(alpha, ctx.V, tape, /*trans_a=*/true);                   // (1, d_v)
    return {alpha, v_a};
}

VisualAttention visual_attention(const VtiModel& m, const Tensor& V, const Tensor& h1,
                                 Tape* tape) {
    return visual_attention(m, make_visual_context(m, V, tape), h1, tape);
}

DecoderState init_decoder(const VtiModel& m, const Tensor& z, Tape* tape) {
    DecoderState st;
    st.s1.h = Tensor({1, m.cfg.d_h});
    st.s1.c = linear(m.z_to_cell, z, tape);
    st.s2.h = Tensor({1, m.cfg.d_h});
    st.s2.c = Tensor({1, m.cfg.d_h});
    return st;
}

DecodeStep decode_step(const VtiModel& m, int prev_token, const DecoderState& st,
                       const VisualContext& ctx, const Tensor& z, Tape* tape) {
    require(prev_token >= 0 && prev_token < m.cfg.d_vocab,
            "decode_step: token id out of vocabulary range");
    const int ids[1] = {prev_token};
    Tensor x1 = embed(m.words, std::span<const int>(ids, 1), false, tape);
    if (m.cfg.z_per_step) x1 = concat_cols(x1, z, tape);
    LstmState s1 = lstm_cell(m.lstm1, x1, st.s1.h, st.s1.c, tape);
    VisualAttention va = visual_attention(m, ctx, s1.h, tape);
    LstmState s2 = lstm_cell(m.lstm2, concat_cols(va.v_a, s1.h, tape), st.s2.h, st.s2.c, tape);
    Tensor logits = linear(m.out_proj, s2.h, tape);
    return {logits, softmax(logits, 1, tape), va.alpha, {s1, s2}};
}

ElboParts elbo_loss(const VtiModel& m, const DatasetRecord& rec, const ElboOptions& opt,
                    Tape* tape) {
    require(!rec.sentences.empty(), "elbo_loss: record holds no encoded sentences");
    const ModelConfig& cfg = m.cfg;
    Tensor V = extract_visual_features(m, rec.image, tape);
    std::vector<DiagonalGaussian> priors = infer_priors(m, V, tape, opt.dropout_rng);
    VisualContext ctx = make_visual_context(m, V, tape);

    const int n_act = std::min(static_cast<int>(rec.sentences.size()), cfg.n_max);
    ElboParts parts;
    parts.active_sentences = n_act;
    Tensor total;
    for (int i = 0; i < n_act; ++i) {
        std::vector<int> sent = rec.sentences[static_cast<size_t>(i)];
        if (static_cast<int>(sent.size()) > cfg.max_len)
            sent.resize(static_cast<size_t>(cfg.max_len));

        Tensor ce, sentence_loss;
        if (cfg.deterministic_baseline) {
            // calibration mode: decode from the prior mean, no latent sampling
            ce = sentence_ce(m, ctx, priors[static_cast<size_t>(i)].mu, sent, tape);
            sentence_loss = ce;
            parts.kl_per_sentence.push_back(0.0);
        } else {
            DiagonalGaussian q = infer_posterior(m, sent, tape, opt.dropout_rng);
            Tensor kl = kl_diag_gauss(q, priors[static_cast<size_t>(i)], tape);
            parts.kl_per_sentence.push_back(static_cast<double>(kl.item()));
            if (opt.use_posterior_mean) {
                ce = sentence_ce(m, ctx, q.mu, sent, tape);
            } else {
                require(opt.rng != nullptr, "elbo_loss: rng required to sample z");
                const int L = std::max(1, opt.mc_samples);
                Tensor acc;
                for (int l = 0; l < L; ++l) {
                    Tensor eps({1, cfg.d_z});
                    for (long long d = 0; d < eps.size(); ++d)
                        eps.at(d) = static_cast<real>(opt.rng->normal());
                    Tensor z = reparameterize(q, eps, tape);
                    Tensor term = sentence_ce(m, ctx, z, sent, tape);
                    acc = acc.defined() ? add(acc, term, tape) : term;
                }
                ce = scale(acc, real(1) / static_cast<real>(L), tape);
            }
            sentence_loss = add(ce, scale(kl, opt.beta, tape), tape);
        }
        parts.ce += static_cast<double>(ce.item());
        parts.kl += parts.kl_per_sentence.back();
        total = total.defined() ? add(total, sentence_loss, tape) : sentence_loss;
    }
    parts.loss = scale(total, real(1) / static_cast<real>(n_act), tape);
    parts.ce /= n_act;
    parts.kl /= n_act;
    return parts;
}

}  // namespace vti
