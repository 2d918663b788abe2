#include "vti/train.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "vti/errors.hpp"
#include "vti/rng.hpp"

namespace vti {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw ContractError(msg);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
}

double parse_double(const std::string& s, const std::string& what) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw ParseError("checkpoint: bad numeric value for " + what + ": '" + s + "'");
    return v;
}

long long parse_ll(const std::string& s, const std::string& what) {
    const double v = parse_double(s, what);
    return static_cast<long long>(v);
}

// "key=value" lines -> ordered map; blank lines are ignored.
std::map<std::string, std::string> parse_kv(const std::string& text, const std::string& what) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError("checkpoint: malformed " + what + " line '" + line + "'");
        out[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return out;
}

const std::string& kv_get(const std::map<std::string, std::string>& kv, const std::string& key,
                          const std::string& what) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw ParseError("checkpoint: " + what + " is missing key '" + key + "'");
    return it->second;
}

}  // namespace

// ---- CRC-32 (reflected, polynomial 0xEDB88320) ----

std::uint32_t crc32(const unsigned char* data, std::size_t n) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

// ---- checkpoint serialization ----

namespace {

void put_u8(std::vector<unsigned char>& b, std::uint8_t v) { b.push_back(v); }

void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
    b.push_back(static_cast<unsigned char>(v & 0xFF));
    b.push_back(static_cast<unsigned char>(v >> 8));
}

void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::vector<unsigned char>& b, float v) {
    put_u32(b, std::bit_cast<std::uint32_t>(v));
}

struct Reader {
    const std::vector<unsigned char>& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw ParseError("checkpoint truncated at byte " + std::to_string(buf.size()) +
                             ": reading " + what + " at offset " + std::to_string(pos) +
                             " needs " + std::to_string(n) + " bytes");
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return buf[pos++];
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(buf[pos] | (buf[pos + 1] << 8));
        pos += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::string& path) {
    std::vector<unsigned char> buf;
    buf.push_back('V');
    buf.push_back('T');
    buf.push_back('I');
    buf.push_back('1');
    put_u32(buf, kCheckpointVersion);
    put_u32(buf, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        require(t.defined(), "save_checkpoint: undefined tensor '" + name + "'");
        require(name.size() <= 0xFFFF, "save_checkpoint: name too long: " + name);
        require(t.rank() <= 0xFF, "save_checkpoint: rank too large for '" + name + "'");
        put_u16(buf, static_cast<std::uint16_t>(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
        put_u8(buf, static_cast<std::uint8_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d) put_u32(buf, static_cast<std::uint32_t>(t.dim(d)));
        for (long long i = 0; i < t.size(); ++i) put_f32(buf, static_cast<float>(t.at(i)));
    }
    put_u32(buf, crc32(buf.data(), buf.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());

    Reader r{buf};
    const std::string magic = r.str(4, "magic");
    if (magic != "VTI1") throw ParseError("not a checkpoint file (bad magic): " + path);
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw ParseError("unsupported checkpoint version " + std::to_string(version) +
                         " (expected " + std::to_string(kCheckpointVersion) + ")");
    const std::uint32_t count = r.u32("tensor count");

    Checkpoint c;
    c.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16("name length");
        const std::string name = r.str(name_len, "name");
        const std::uint8_t rank = r.u8("rank");
        std::vector<int> shape(rank);
        unsigned long long elems = 1;
        for (int d = 0; d < rank; ++d) {
            const std::uint32_t dim = r.u32("dimension");
            if (dim == 0 || dim > (1u << 28))
                throw ParseError("checkpoint: implausible dimension " + std::to_string(dim) +
                                 " in tensor '" + name + "'");
            shape[static_cast<std::size_t>(d)] = static_cast<int>(dim);
            elems *= dim;
            if (elems > (1ull << 32))
                throw ParseError("checkpoint: tensor '" + name + "' is implausibly large");
        }
        r.need(elems * 4, "tensor data");
        std::vector<real> values(elems);
        for (unsigned long long j = 0; j < elems; ++j)
            values[j] = static_cast<real>(r.f32("tensor data"));
        c.tensors.emplace_back(name, Tensor::from(std::move(shape), std::move(values)));
    }

    const std::size_t payload_end = r.pos;
    const std::uint32_t stored = r.u32("checksum");
    if (r.pos != buf.size())
        throw ParseError("checkpoint has " + std::to_string(buf.size() - r.pos) +
                         " trailing bytes after the checksum");
    if (stored != crc32(buf.data(), payload_end))
        throw ParseError("checkpoint checksum mismatch: " + path);
    return c;
}

Tensor text_tensor(const std::string& s) {
    std::vector<real> vals(s.size());
    for (std::size_t i = 0; i < s.size(); ++i)
        vals[i] = static_cast<real>(static_cast<unsigned char>(s[i]));
    return Tensor::from({static_cast<int>(std::max<std::size_t>(1, s.size()))},
                        s.empty() ? std::vector<real>{real(0)} : std::move(vals));
}

std::string tensor_text(const Tensor& t) {
    std::string s;
    s.reserve(static_cast<std::size_t>(t.size()));
    for (long long i = 0; i < t.size(); ++i) {
        const long v = std::lround(static_cast<double>(t.at(i)));
        if (v < 0 || v > 255) throw ParseError("checkpoint: text tensor holds a non-byte value");
        if (v != 0) s.push_back(static_cast<char>(v));
    }
    return s;
}

const Tensor* find_tensor(const Checkpoint& c, const std::string& name) {
    for (const auto& [n, t] : c.tensors)
        if (n == name) return &t;
    return nullptr;
}

namespace {

bool is_reserved(const std::string& name) { return name.rfind("__", 0) == 0; }

std::string shape_str(const Tensor& t) {
    std::string s = "(";
    for (int d = 0; d < t.rank(); ++d) s += (d ? "," : "") + std::to_string(t.dim(d));
    return s + ")";
}

}  // namespace

void load_model_params(VtiModel& m, const Checkpoint& c) {
    auto params = named_parameters(m);
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : c.tensors)
        if (!is_reserved(name)) by_name[name] = &t;

    for (auto& [name, dst] : params) {
        const auto it = by_name.find(name);
        if (it == by_name.end())
            throw ContractError("checkpoint is missing parameter '" + name + "'");
        const Tensor& src = *it->second;
        if (src.shape() != dst.shape())
            throw ContractError("checkpoint parameter '" + name + "' has shape " +
                                shape_str(src) + ", model expects " + shape_str(dst));
        dst.vec() = src.vec();
        by_name.erase(it);
    }
    if (!by_name.empty())
        throw ContractError("checkpoint holds unknown parameter '" + by_name.begin()->first +
                            "'");
}

namespace {

std::string model_config_text(const ModelConfig& cfg) {
    std::ostringstream out;
    out << "d_vocab=" << cfg.d_vocab << "\nimg_size=" << cfg.img_size
        << "\nconv_c1=" << cfg.conv_c1 << "\nconv_c2=" << cfg.conv_c2 << "\nd_v=" << cfg.d_v
        << "\nd_vt=" << cfg.d_vt << "\nd_e=" << cfg.d_e << "\nd_h=" << cfg.d_h
        << "\nd_z=" << cfg.d_z << "\nd_mlp=" << cfg.d_mlp << "\nn_max=" << cfg.n_max
        << "\nvt_layers=" << cfg.vt_layers << "\nlang_layers=" << cfg.lang_layers
        << "\nlang_heads=" << cfg.lang_heads << "\nmax_len=" << cfg.max_len
        << "\ndropout=" << fmt_double(static_cast<double>(cfg.dropout))
        << "\nz_per_step=" << (cfg.z_per_step ? 1 : 0)
        << "\ndeterministic_baseline=" << (cfg.deterministic_baseline ? 1 : 0) << "\n";
    return out.str();
}

}  // namespace

ModelConfig config_from_checkpoint(const Checkpoint& c) {
    const Tensor* t = find_tensor(c, "__model_config__");
    if (!t) throw ParseError("checkpoint has no model configuration entry");
    const auto kv = parse_kv(tensor_text(*t), "model config");
    ModelConfig cfg;
    auto geti = [&](const char* key) {
        return static_cast<int>(parse_ll(kv_get(kv, key, "model config"), key));
    };
    cfg.d_vocab = geti("d_vocab");
    cfg.img_size = geti("img_size");
    cfg.conv_c1 = geti("conv_c1");
    cfg.conv_c2 = geti("conv_c2");
    cfg.d_v = geti("d_v");
    cfg.d_vt = geti("d_vt");
    cfg.d_e = geti("d_e");
    cfg.d_h = geti("d_h");
    cfg.d_z = geti("d_z");
    cfg.d_mlp = geti("d_mlp");
    cfg.n_max = geti("n_max");
    cfg.vt_layers = geti("vt_layers");
    cfg.lang_layers = geti("lang_layers");
    cfg.lang_heads = geti("lang_heads");
    cfg.max_len = geti("max_len");
    cfg.dropout = static_cast<real>(parse_double(kv_get(kv, "dropout", "model config"), "dropout"));
    cfg.z_per_step = geti("z_per_step") != 0;
    cfg.deterministic_baseline = geti("deterministic_baseline") != 0;
    return cfg;
}

VtiModel model_from_checkpoint(const Checkpoint& c) {
    Rng throwaway(0);
    VtiModel m = make_model(config_from_checkpoint(c), throwaway);
    load_model_params(m, c);
    return m;
}

// ---- optimizer ----

AdamState make_adam_state(const std::vector<std::pair<std::string, Tensor>>& params) {
    AdamState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& [name, t] : params) {
        st.m.emplace_back(t.shape());
        st.v.emplace_back(t.shape());
    }
    return st;
}

double clip_global_norm(const std::vector<std::pair<std::string, Tensor>>& params,
                        double max_norm) {
    require(max_norm > 0, "clip_global_norm: max_norm must be positive");
    double ss = 0;
    for (const auto& [name, t] : params)
        for (const real g : t.grad_vec()) ss += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(ss);
    if (norm > max_norm) {
        const real s = static_cast<real>(max_norm / norm);
        for (const auto& [name, t] : params)
            for (real& g : t.grad_vec()) g *= s;
    }
    return norm;
}

void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& st,
               const TrainConfig& cfg) {
    require(params.size() == st.m.size() && params.size() == st.v.size(),
            "adam_step: optimizer state does not match the parameter list");
    require(cfg.learning_rate >= 0, "adam_step: negative learning rate");
    require(cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1,
            "adam_step: betas must lie in [0, 1)");

    st.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    for (std::size_t p = 0; p < params.size(); ++p) {
        const std::string& name = params[p].first;
        Tensor t = params[p].second;  // shared handle onto the same storage
        require(st.m[p].size() == t.size(),
                "adam_step: state shape mismatch for parameter '" + name + "'");
        real* w = t.data();
        const real* g = t.grad();
        real* m = st.m[p].data();
        real* v = st.v[p].data();
        for (long long i = 0; i < t.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            if (!std::isfinite(gi))
                throw TrainError("non-finite gradient in parameter '" + name + "'");
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<real>(mi);
            v[i] = static_cast<real>(vi);
            const double update = cfg.learning_rate * (mi / bc1) /
                                  (std::sqrt(vi / bc2) + cfg.adam_eps);
            w[i] = static_cast<real>(static_cast<double>(w[i]) - update);
        }
    }
}

// ---- evaluation helpers ----

double teacher_forced_accuracy(const VtiModel& m, const std::vector<DatasetRecord>& records) {
    require(!records.empty(), "teacher_forced_accuracy: no records");
    long long correct = 0, total = 0;
    for (const DatasetRecord& rec : records) {
        require(!rec.sentences.empty(), "teacher_forced_accuracy: record is not encoded");
        const Tensor V = extract_visual_features(m, rec.image, nullptr);
        const std::vector<DiagonalGaussian> priors = infer_priors(m, V, nullptr);
        const VisualContext ctx = make_visual_context(m, V, nullptr);
        const int n_act = std::min<int>(static_cast<int>(rec.sentences.size()), m.cfg.n_max);
        for (int i = 0; i < n_act; ++i) {
            std::vector<int> toks = rec.sentences[static_cast<std::size_t>(i)];
            if (static_cast<int>(toks.size()) > m.cfg.max_len)
                toks.resize(static_cast<std::size_t>(m.cfg.max_len));
            const Tensor z = m.cfg.deterministic_baseline
                                 ? priors[static_cast<std::size_t>(i)].mu
                                 : infer_posterior(m, toks, nullptr).mu;
            DecoderState st = init_decoder(m, z, nullptr);
            int prev = kBosId;
            for (std::size_t s = 0; s <= toks.size(); ++s) {
                const int target = s < toks.size() ? toks[s] : kEosId;
                const DecodeStep step = decode_step(m, prev, st, ctx, z, nullptr);
                int arg = 0;
                for (int j = 1; j < m.cfg.d_vocab; ++j)
                    if (step.logits.at(j) > step.logits.at(arg)) arg = j;
                correct += (arg == target);
                total += 1;
                st = step.state;
                prev = target;
            }
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

// ---- training loop ----

namespace {

Tensor deep_copy(const Tensor& t) {
    std::vector<real> vals(t.vec());
    return Tensor::from(t.shape(), std::move(vals));
}

struct LoopState {
    long long global_step = 0;
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    int bad_epochs = 0;
    int next_epoch = 0;
};

std::string meta_text(const LoopState& ls, long long adam_t) {
    std::ostringstream out;
    out << "epoch=" << (ls.next_epoch - 1) << "\nglobal_step=" << ls.global_step
        << "\nadam_t=" << adam_t << "\nbest_val=" << fmt_double(ls.best_val)
        << "\nbest_epoch=" << ls.best_epoch << "\nbad_epochs=" << ls.bad_epochs << "\n";
    return out.str();
}

Checkpoint snapshot_state(const VtiModel& m, const AdamState& adam, const LoopState& ls,
                          const Rng& shuffle_rng, const Rng& z_rng, const Rng& drop_rng) {
    Checkpoint c;
    const auto params = named_parameters(m);
    for (const auto& [name, t] : params) c.tensors.emplace_back(name, deep_copy(t));
    for (std::size_t p = 0; p < params.size(); ++p) {
        c.tensors.emplace_back("__adam_m__." + params[p].first, deep_copy(adam.m[p]));
        c.tensors.emplace_back("__adam_v__." + params[p].first, deep_copy(adam.v[p]));
    }
    c.tensors.emplace_back("__model_config__", text_tensor(model_config_text(m.cfg)));
    c.tensors.emplace_back("__meta__", text_tensor(meta_text(ls, adam.t)));
    c.tensors.emplace_back("__rng_shuffle__", text_tensor(shuffle_rng.serialize()));
    c.tensors.emplace_back("__rng_z__", text_tensor(z_rng.serialize()));
    c.tensors.emplace_back("__rng_drop__", text_tensor(drop_rng.serialize()));
    return c;
}

void restore_loop_state(const Checkpoint& c, VtiModel& m, AdamState& adam, LoopState& ls,
                        Rng& shuffle_rng, Rng& z_rng, Rng& drop_rng) {
    load_model_params(m, c);
    const auto params = named_parameters(m);
    for (std::size_t p = 0; p < params.size(); ++p) {
        const Tensor* tm = find_tensor(c, "__adam_m__." + params[p].first);
        const Tensor* tv = find_tensor(c, "__adam_v__." + params[p].first);
        if (!tm || !tv)
            throw ContractError("resume checkpoint lacks optimizer state for '" +
                                params[p].first + "'");
        require(tm->shape() == adam.m[p].shape() && tv->shape() == adam.v[p].shape(),
                "resume checkpoint optimizer shape mismatch for '" + params[p].first + "'");
        adam.m[p].vec() = tm->vec();
        adam.v[p].vec() = tv->vec();
    }
    const Tensor* meta = find_tensor(c, "__meta__");
    if (!meta) throw ParseError("resume checkpoint has no meta entry");
    const auto kv = parse_kv(tensor_text(*meta), "meta");
    ls.next_epoch = static_cast<int>(parse_ll(kv_get(kv, "epoch", "meta"), "epoch")) + 1;
    ls.global_step = parse_ll(kv_get(kv, "global_step", "meta"), "global_step");
    adam.t = parse_ll(kv_get(kv, "adam_t", "meta"), "adam_t");
    ls.best_val = parse_double(kv_get(kv, "best_val", "meta"), "best_val");
    ls.best_epoch = static_cast<int>(parse_ll(kv_get(kv, "best_epoch", "meta"), "best_epoch"));
    ls.bad_epochs = static_cast<int>(parse_ll(kv_get(kv, "bad_epochs", "meta"), "bad_epochs"));
    const std::pair<const char*, Rng*> streams[] = {{"__rng_shuffle__", &shuffle_rng},
                                                    {"__rng_z__", &z_rng},
                                                    {"__rng_drop__", &drop_rng}};
    for (const auto& [name, rng] : streams) {
        const Tensor* t = find_tensor(c, name);
        if (!t) throw ParseError(std::string("resume checkpoint has no ") + name + " entry");
        rng->deserialize(tensor_text(*t));
    }
}

}  // namespace

TrainResult fit(VtiModel& model, const std::vector<DatasetRecord>& train_set,
                const std::vector<DatasetRecord>& val_set, const TrainConfig& cfg,
                const std::string& ckpt_out, const std::string& resume_from) {
    require(!train_set.empty(), "fit: empty training set");
    require(!val_set.empty(), "fit: empty validation set");
    require(cfg.batch_size >= 1, "fit: batch_size must be at least 1");
    require(cfg.max_epochs >= 1, "fit: max_epochs must be at least 1");
    require(cfg.patience >= 1, "fit: patience must be at least 1");
    require(!ckpt_out.empty(), "fit: checkpoint path is empty");

    auto params = named_parameters(model);
    AdamState adam = make_adam_state(params);
    LoopState ls;
    Rng shuffle_rng(derive_stream(cfg.seed, 1));
    Rng z_rng(derive_stream(cfg.seed, 2));
    Rng drop_rng(derive_stream(cfg.seed, 3));
    if (!resume_from.empty())
        restore_loop_state(load_checkpoint(resume_from), model, adam, ls, shuffle_rng, z_rng,
                           drop_rng);

    const std::size_t n = train_set.size();
    const long long steps_per_epoch =
        static_cast<long long>((n + static_cast<std::size_t>(cfg.batch_size) - 1) /
                               static_cast<std::size_t>(cfg.batch_size));
    AnnealSchedule sched;
    sched.beta_max = cfg.beta_max;
    sched.total_steps = cfg.anneal_total_steps > 0 ? cfg.anneal_total_steps
                                                   : cfg.max_epochs * steps_per_epoch;
    sched.cycles = cfg.anneal_cycles;
    sched.ramp_ratio = cfg.ramp_ratio;

    TrainResult res;
    std::string diverged_why;

    for (int epoch = ls.next_epoch; epoch < cfg.max_epochs && diverged_why.empty(); ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j =
                static_cast<std::size_t>(shuffle_rng.uniform_int(static_cast<int>(i)));
            std::swap(order[i - 1], order[j]);
        }

        double ep_loss = 0, ep_ce = 0, ep_kl = 0, beta_last = 0;
        long long batches = 0;
        for (std::size_t b0 = 0; b0 < n && diverged_why.empty(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t b1 = std::min(n, b0 + static_cast<std::size_t>(cfg.batch_size));
            const double beta = beta_at(sched, ls.global_step);
            beta_last = beta;
            for (auto& [name, t] : params) t.zero_grad();

            double batch_loss = 0;
            for (std::size_t i = b0; i < b1; ++i) {
                Tape tape;
                ElboOptions opt;
                opt.beta = static_cast<real>(beta);
                opt.mc_samples = cfg.mc_samples;
                opt.rng = &z_rng;
                opt.dropout_rng = &drop_rng;
                const ElboParts parts = elbo_loss(model, train_set[order[i]], opt, &tape);
                const double l = static_cast<double>(parts.loss.item());
                if (!std::isfinite(l)) {
                    diverged_why = "non-finite training loss at step " +
                                   std::to_string(ls.global_step);
                    break;
                }
                const Tensor scaled =
                    scale(parts.loss, static_cast<real>(1.0 / static_cast<double>(b1 - b0)),
                          &tape);
                backward(scaled, tape);
                batch_loss += l / static_cast<double>(b1 - b0);
                ep_ce += parts.ce;
                ep_kl += parts.kl;
            }
            if (!diverged_why.empty()) break;

            clip_global_norm(params, cfg.grad_clip);
            try {
                adam_step(params, adam, cfg);
            } catch (const TrainError& e) {
                diverged_why = e.what();
                break;
            }
            ep_loss += batch_loss;
            batches += 1;
            ls.global_step += 1;
        }
        if (!diverged_why.empty()) break;

        EpochStats st;
        st.epoch = epoch;
        st.train_loss = ep_loss / static_cast<double>(batches);
        st.train_ce = ep_ce / static_cast<double>(n);
        st.train_kl = ep_kl / static_cast<double>(n);
        st.beta_last = beta_last;

        double val_loss = 0, val_ce = 0, val_kl = 0;
        for (const DatasetRecord& rec : val_set) {
            ElboOptions opt;
            opt.beta = real(1);
            opt.use_posterior_mean = true;
            const ElboParts parts = elbo_loss(model, rec, opt, nullptr);
            val_loss += static_cast<double>(parts.loss.item());
            val_ce += parts.ce;
            val_kl += parts.kl;
        }
        st.val_loss = val_loss / static_cast<double>(val_set.size());
        st.val_ce = val_ce / static_cast<double>(val_set.size());
        st.val_kl = val_kl / static_cast<double>(val_set.size());
        if (!std::isfinite(st.val_loss)) {
            diverged_why = "non-finite validation loss after epoch " + std::to_string(epoch);
            break;
        }

        st.improved = st.val_loss < ls.best_val;
        ls.next_epoch = epoch + 1;
        if (st.improved) {
            ls.best_val = st.val_loss;
            ls.best_epoch = epoch;
            ls.bad_epochs = 0;
            save_checkpoint(snapshot_state(model, adam, ls, shuffle_rng, z_rng, drop_rng),
                            ckpt_out);
        } else {
            ls.bad_epochs += 1;
        }
        res.history.push_back(st);
        save_checkpoint(snapshot_state(model, adam, ls, shuffle_rng, z_rng, drop_rng),
                        ckpt_out + ".last");
        if (ls.bad_epochs >= cfg.patience) break;
    }

    res.best_val_loss = ls.best_val;
    res.best_epoch = ls.best_epoch;
    res.global_steps = ls.global_step;
    res.diverged = !diverged_why.empty();
    res.divergence_reason = diverged_why;
    return res;
}

}  // namespace vti
