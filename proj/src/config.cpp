#include "vti/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "vti/errors.hpp"

namespace vti {

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* want) {
    throw ContractError("config: key '" + key + "' expects " + want + ", got '" + value + "'");
}

long long checked_ll(const std::string& key, const std::string& value) {
    const char* s = value.c_str();
    char* end = nullptr;
    errno = 0;
    const long long v = std::strtoll(s, &end, 10);
    if (end == s || *end != '\0' || errno == ERANGE) bad_value(key, value, "an integer");
    return v;
}

int checked_int(const std::string& key, const std::string& value) {
    const long long v = checked_ll(key, value);
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
        bad_value(key, value, "an integer");
    return static_cast<int>(v);
}

std::uint64_t checked_u64(const std::string& key, const std::string& value) {
    const char* s = value.c_str();
    if (*s == '-') bad_value(key, value, "a non-negative integer");
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (end == s || *end != '\0' || errno == ERANGE)
        bad_value(key, value, "a non-negative integer");
    return v;
}

double checked_double(const std::string& key, const std::string& value) {
    const char* s = value.c_str();
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(s, &end);
    if (end == s || *end != '\0') bad_value(key, value, "a number");
    return v;
}

bool checked_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    bad_value(key, value, "true or false");
}

// shortest decimal form that parses back exactly
std::string fmt_double(double v) {
    char buf[40];
    for (int prec = 6; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

struct Entry {
    std::string key;
    std::function<std::string(Config&)> get;
    std::function<void(Config&, const std::string&)> set;
};

const std::vector<Entry>& registry() {
    static const std::vector<Entry> table = [] {
        std::vector<Entry> r;
        const auto add_int = [&r](const char* key, auto ref) {
            r.push_back({key, [ref](Config& c) { return std::to_string(ref(c)); },
                         [ref, key](Config& c, const std::string& v) {
                             ref(c) = checked_int(key, v);
                         }});
        };
        const auto add_ll = [&r](const char* key, auto ref) {
            r.push_back({key, [ref](Config& c) { return std::to_string(ref(c)); },
                         [ref, key](Config& c, const std::string& v) {
                             ref(c) = checked_ll(key, v);
                         }});
        };
        const auto add_u64 = [&r](const char* key, auto ref) {
            r.push_back({key, [ref](Config& c) { return std::to_string(ref(c)); },
                         [ref, key](Config& c, const std::string& v) {
                             ref(c) = checked_u64(key, v);
                         }});
        };
        const auto add_double = [&r](const char* key, auto ref) {
            r.push_back({key, [ref](Config& c) { return fmt_double(ref(c)); },
                         [ref, key](Config& c, const std::string& v) {
                             ref(c) = checked_double(key, v);
                         }});
        };
        const auto add_real = [&r](const char* key, auto ref) {
            r.push_back(
                {key,
                 [ref](Config& c) { return fmt_double(static_cast<double>(ref(c))); },
                 [ref, key](Config& c, const std::string& v) {
                     ref(c) = static_cast<real>(checked_double(key, v));
                 }});
        };
        const auto add_bool = [&r](const char* key, auto ref) {
            r.push_back({key, [ref](Config& c) { return ref(c) ? "true" : "false"; },
                         [ref, key](Config& c, const std::string& v) {
                             ref(c) = checked_bool(key, v);
                         }});
        };

        // model dimensions
        add_int("img_size", [](Config& c) -> int& { return c.model.img_size; });
        add_int("conv_c1", [](Config& c) -> int& { return c.model.conv_c1; });
        add_int("conv_c2", [](Config& c) -> int& { return c.model.conv_c2; });
        add_int("d_v", [](Config& c) -> int& { return c.model.d_v; });
        add_int("d_vt", [](Config& c) -> int& { return c.model.d_vt; });
        add_int("d_e", [](Config& c) -> int& { return c.model.d_e; });
        add_int("d_h", [](Config& c) -> int& { return c.model.d_h; });
        add_int("d_z", [](Config& c) -> int& { return c.model.d_z; });
        add_int("d_mlp", [](Config& c) -> int& { return c.model.d_mlp; });
        add_int("n_max", [](Config& c) -> int& { return c.model.n_max; });
        add_int("vt_layers", [](Config& c) -> int& { return c.model.vt_layers; });
        add_int("lang_layers", [](Config& c) -> int& { return c.model.lang_layers; });
        add_int("lang_heads", [](Config& c) -> int& { return c.model.lang_heads; });
        add_int("max_len", [](Config& c) -> int& { return c.model.max_len; });
        add_real("dropout", [](Config& c) -> real& { return c.model.dropout; });
        add_bool("z_per_step", [](Config& c) -> bool& { return c.model.z_per_step; });
        add_bool("deterministic_baseline",
                 [](Config& c) -> bool& { return c.model.deterministic_baseline; });

        // training recipe
        add_double("learning_rate", [](Config& c) -> double& { return c.train.learning_rate; });
        add_double("beta1", [](Config& c) -> double& { return c.train.beta1; });
        add_double("beta2", [](Config& c) -> double& { return c.train.beta2; });
        add_double("adam_eps", [](Config& c) -> double& { return c.train.adam_eps; });
        add_double("grad_clip", [](Config& c) -> double& { return c.train.grad_clip; });
        add_int("batch_size", [](Config& c) -> int& { return c.train.batch_size; });
        add_int("max_epochs", [](Config& c) -> int& { return c.train.max_epochs; });
        add_int("patience", [](Config& c) -> int& { return c.train.patience; });
        add_int("mc_samples", [](Config& c) -> int& { return c.train.mc_samples; });
        add_double("beta_max", [](Config& c) -> double& { return c.train.beta_max; });
        add_int("anneal_cycles", [](Config& c) -> int& { return c.train.anneal_cycles; });
        add_double("ramp_ratio", [](Config& c) -> double& { return c.train.ramp_ratio; });
        add_ll("anneal_total_steps",
               [](Config& c) -> long long& { return c.train.anneal_total_steps; });
        add_u64("seed", [](Config& c) -> std::uint64_t& { return c.train.seed; });

        // generation
        add_double("temperature", [](Config& c) -> double& { return c.temperature; });
        add_int("top_k", [](Config& c) -> int& { return c.top_k; });
        add_int("variants", [](Config& c) -> int& { return c.variants; });
        add_int("rescore_samples", [](Config& c) -> int& { return c.rescore_samples; });
        add_int("attention_records", [](Config& c) -> int& { return c.attention_records; });
        add_u64("gen_seed", [](Config& c) -> std::uint64_t& { return c.gen_seed; });

        // synthetic data
        add_int("n", [](Config& c) -> int& { return c.n; });
        add_u64("data_seed", [](Config& c) -> std::uint64_t& { return c.data_seed; });
        add_int("style_count", [](Config& c) -> int& { return c.style_count; });
        add_int("min_freq", [](Config& c) -> int& { return c.min_freq; });
        return r;
    }();
    return table;
}

std::string strip(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    keys.reserve(registry().size());
    for (const Entry& e : registry()) keys.push_back(e.key);
    return keys;
}

void apply_config_entry(Config& c, const std::string& key, const std::string& value) {
    for (const Entry& e : registry()) {
        if (e.key == key) {
            e.set(c, value);
            return;
        }
    }
    throw ContractError("config: unknown key '" + key + "'");
}

Config parse_config_text(const std::string& text) {
    Config c;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = strip(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ContractError("config line " + std::to_string(line_no) +
                                ": expected key=value, got '" + line + "'");
        apply_config_entry(c, strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
    }
    return c;
}

Config load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string config_text(const Config& c) {
    Config copy = c;  // accessors hand out mutable references
    std::string out;
    for (const Entry& e : registry()) {
        out += e.key;
        out += '=';
        out += e.get(copy);
        out += '\n';
    }
    return out;
}

}  // namespace vti
