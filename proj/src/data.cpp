#include "vti/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "vti/rng.hpp"

namespace vti {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr double kConditionProb = 0.35;
constexpr double kNoiseAmplitude = 0.05;
constexpr real kSeverityIntensity[3] = {real(0.55), real(0.75), real(0.95)};

// Top-left corner (row, col) of each condition's 8x8 region; pairwise disjoint.
constexpr int kRegionOrigin[kNumConditions][2] = {
    {0, 0},    // cardiomegaly: disk
    {0, 24},   // effusion: bar
    {8, 8},    // opacity: wedge
    {16, 16},  // pneumothorax: cross
    {24, 0},   // fracture: ring
    {24, 24},  // device: dot-pair
};

// families[condition][style][paraphrase]; every sentence mentions its
// condition's keyword and no other condition's, with no negation words.
const std::vector<std::vector<std::vector<std::string>>>& template_families() {
    static const std::vector<std::vector<std::vector<std::string>>> f = {
        {
            {"the heart is enlarged", "the heart size is increased", "the heart appears enlarged"},
            {"enlarged cardiac silhouette", "the cardiac silhouette is enlarged",
             "cardiac enlargement is present"},
            {"cardiomegaly is present", "stable cardiomegaly", "there is cardiomegaly"},
        },
        {
            {"there is a pleural effusion", "a pleural effusion is present",
             "pleural effusion is seen"},
            {"small effusion on the left", "a small left effusion is noted",
             "left sided effusion noted"},
            {"bilateral effusions are present", "effusions are seen at both bases",
             "there are bilateral effusions"},
        },
        {
            {"there is a focal opacity", "a focal opacity is present", "focal opacity is seen"},
            {"patchy opacity is noted", "an area of patchy opacity is seen",
             "patchy airspace opacity"},
            {"scattered opacities are present", "there are scattered opacities",
             "opacities are noted"},
        },
        {
            {"there is a pneumothorax", "a pneumothorax is present", "pneumothorax is seen"},
            {"a small apical pneumothorax is noted", "small apical pneumothorax",
             "apical pneumothorax is present"},
            {"pneumothorax is identified", "there is a visible pneumothorax",
             "a pneumothorax is identified"},
        },
        {
            {"there is a rib fracture", "a rib fracture is present", "rib fracture is seen"},
            {"an acute fracture is noted", "acute fracture of a rib",
             "an acute rib fracture is noted"},
            {"old healed fractures are present", "there are old healed fractures",
             "healed fractures are noted"},
        },
        {
            {"a support device is in place", "a support device is present",
             "support device in place"},
            {"a monitoring device projects over the chest", "monitoring device is in place",
             "a monitoring device is seen"},
            {"an implanted device is present", "there is an implanted device",
             "implanted device in place"},
        },
    };
    return f;
}

void render_glyph(std::vector<real>& img, int condition, int severity) {
    const real v = kSeverityIntensity[severity];
    const int r0 = kRegionOrigin[condition][0];
    const int c0 = kRegionOrigin[condition][1];
    auto put = [&](int r, int c) { img[static_cast<size_t>((r0 + r) * kImageSize + c0 + c)] = v; };
    auto dist2 = [](int r, int c) {
        const double dr = r - 3.5, dc = c - 3.5;
        return dr * dr + dc * dc;
    };
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) {
            bool on = false;
            switch (condition) {
                case 0: on = dist2(r, c) <= 2.8 * 2.8; break;                    // disk
                case 1: on = r == 3 || r == 4; break;                            // bar
                case 2: on = r >= c; break;                                      // wedge
                case 3: on = r == 3 || r == 4 || c == 3 || c == 4; break;        // cross
                case 4: on = dist2(r, c) >= 1.8 * 1.8 && dist2(r, c) <= 3.2 * 3.2; break;  // ring
                case 5:                                                          // dot-pair
                    on = (r >= 1 && r <= 2 && c >= 1 && c <= 2) ||
                         (r >= 5 && r <= 6 && c >= 5 && c <= 6);
                    break;
                default: throw ContractError("render_glyph: bad condition id");
            }
            if (on) put(r, c);
        }
}

real quantize_pixel(double v) {
    const long b = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
    return static_cast<real>(b) / real(255);
}

}  // namespace

const std::array<std::string, kNumConditions>& condition_names() {
    static const std::array<std::string, kNumConditions> names = {
        "cardiomegaly", "effusion", "opacity", "pneumothorax", "fracture", "device"};
    return names;
}

int condition_from_name(const std::string& name) {
    const auto& names = condition_names();
    for (int i = 0; i < kNumConditions; ++i)
        if (names[static_cast<size_t>(i)] == name) return i;
    throw ContractError("unknown condition name: " + name);
}

const std::vector<std::string>& condition_templates(int condition, int style) {
    if (condition < 0 || condition >= kNumConditions)
        throw ContractError("condition_templates: bad condition id " + std::to_string(condition));
    if (style < 0) throw ContractError("condition_templates: negative style");
    const auto& fam = template_families()[static_cast<size_t>(condition)];
    return fam[static_cast<size_t>(style) % fam.size()];
}

const std::string& closing_sentence() {
    static const std::string s = "the remainder of the examination is unremarkable";
    return s;
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string raw;
    while (is >> raw) {
        size_t b = 0, e = raw.size();
        while (b < e && std::ispunct(static_cast<unsigned char>(raw[b]))) ++b;
        while (e > b && std::ispunct(static_cast<unsigned char>(raw[e - 1]))) --e;
        std::string tok = raw.substr(b, e - b);
        bool has_alpha = false;
        for (char& ch : tok) {
            ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
            has_alpha = has_alpha || std::isalpha(static_cast<unsigned char>(ch));
        }
        if (has_alpha) out.push_back(std::move(tok));
    }
    return out;
}

int Vocabulary::encode(const std::string& token) const {
    if (index_.size() != tokens.size()) rebuild_index();
    auto it = std::lower_bound(index_.begin(), index_.end(), token,
                               [](const auto& p, const std::string& t) { return p.first < t; });
    if (it != index_.end() && it->first == token) return it->second;
    return kUnkId;
}

std::vector<int> Vocabulary::encode_tokens(const std::vector<std::string>& toks) const {
    std::vector<int> ids;
    ids.reserve(toks.size());
    for (const std::string& t : toks) ids.push_back(encode(t));
    return ids;
}

const std::string& Vocabulary::decode(int id) const {
    if (id < 0 || id >= size())
        throw ContractError("vocabulary: id " + std::to_string(id) + " out of range");
    return tokens[static_cast<size_t>(id)];
}

void Vocabulary::rebuild_index() const {
    index_.clear();
    index_.reserve(tokens.size());
    for (int i = 0; i < size(); ++i) index_.emplace_back(tokens[static_cast<size_t>(i)], i);
    std::sort(index_.begin(), index_.end());
}

Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus, int min_freq) {
    if (min_freq < 1) throw ContractError("build_vocab: min_freq must be >= 1");
    std::map<std::string, long long> counts;
    for (const auto& sent : corpus)
        for (const std::string& t : sent) ++counts[t];
    std::vector<std::pair<long long, std::string>> order;
    for (const auto& [tok, cnt] : counts)
        if (cnt >= min_freq) order.emplace_back(-cnt, tok);
    std::sort(order.begin(), order.end());

    Vocabulary v;
    v.tokens = {"[PAD]", "[BOS]", "[EOS]", "[UNK]", "[SENT]"};
    for (const auto& [negcnt, tok] : order) v.tokens.push_back(tok);
    v.rebuild_index();
    return v;
}

void save_vocab(const Vocabulary& v, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write vocabulary file: " + path);
    for (const std::string& t : v.tokens) os << t << '\n';
}

Vocabulary load_vocab(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read vocabulary file: " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(is, line)) v.tokens.push_back(line);
    if (v.size() < 5 || v.tokens[0] != "[PAD]" || v.tokens[4] != "[SENT]")
        throw ParseError("vocabulary file missing special tokens: " + path);
    v.rebuild_index();
    return v;
}

std::vector<DatasetRecord> synth_generate(int n, std::uint64_t seed, int style_count) {
    if (n < 1) throw ContractError("synth_generate: n must be >= 1");
    if (style_count < 1) throw ContractError("synth_generate: style_count must be >= 1");
    std::vector<DatasetRecord> records;
    records.reserve(static_cast<size_t>(n));
    for (int idx = 0; idx < n; ++idx) {
        Rng rng(derive_stream(seed, static_cast<std::uint64_t>(idx)));
        DatasetRecord rec;
        // Draw order is part of the format: style, then per-condition
        // presence/severity/paraphrase, then background noise.
        rec.style = rng.uniform_int(style_count);
        struct Pick { int severity, paraphrase; };
        std::vector<std::pair<int, Pick>> present;
        for (int c = 0; c < kNumConditions; ++c) {
            if (!rng.bernoulli(kConditionProb)) continue;
            Pick p;
            p.severity = rng.uniform_int(3);
            const auto& paraphrases = condition_templates(c, rec.style);
            p.paraphrase = rng.uniform_int(static_cast<int>(paraphrases.size()));
            present.emplace_back(c, p);
        }
        rec.image.resize(static_cast<size_t>(kImageSize * kImageSize));
        for (real& px : rec.image) px = static_cast<real>(rng.uniform(0.0, kNoiseAmplitude));
        for (const auto& [c, p] : present) {
            rec.labels.push_back(c);
            render_glyph(rec.image, c, p.severity);
            rec.sentence_text.push_back(condition_templates(c, rec.style)[static_cast<size_t>(p.paraphrase)]);
        }
        rec.sentence_text.push_back(closing_sentence());
        for (real& px : rec.image) px = quantize_pixel(static_cast<double>(px));
        records.push_back(std::move(rec));
    }
    return records;
}

void assign_splits(std::vector<DatasetRecord>& records, std::uint64_t seed) {
    const size_t n = records.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        const auto ka = derive_stream(seed, a), kb = derive_stream(seed, b);
        return ka != kb ? ka < kb : a < b;
    });
    const auto n_train = static_cast<size_t>(std::llround(0.7 * static_cast<double>(n)));
    const auto n_val = static_cast<size_t>(std::llround(0.1 * static_cast<double>(n)));
    for (size_t i = 0; i < n; ++i) {
        std::string& s = records[order[i]].split;
        if (i < n_train) s = "train";
        else if (i < n_train + n_val) s = "val";
        else s = "test";
    }
}

void write_pgm(const std::string& path, const std::vector<real>& image, int w, int h) {
    if (static_cast<long long>(image.size()) != static_cast<long long>(w) * h)
        throw ContractError("write_pgm: image size does not match dimensions");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write image file: " + path);
    os << "P5\n" << w << ' ' << h << "\n255\n";
    for (real v : image) {
        const long b = std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0);
        os.put(static_cast<char>(static_cast<unsigned char>(b)));
    }
    if (!os) throw IoError("failed writing image file: " + path);
}

std::vector<real> read_pgm(const std::string& path, int expect_w, int expect_h) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read image file: " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    if (!(is >> magic >> w >> h >> maxval) || magic != "P5" || maxval != 255)
        throw ParseError("not a maxval-255 P5 PGM file: " + path);
    is.get();  // single whitespace after header
    if (w != expect_w || h != expect_h)
        throw ContractError("image " + path + " is " + std::to_string(w) + "x" +
                            std::to_string(h) + ", expected " + std::to_string(expect_w) + "x" +
                            std::to_string(expect_h));
    std::vector<char> bytes(static_cast<size_t>(w) * h);
    if (!is.read(bytes.data(), static_cast<std::streamsize>(bytes.size())))
        throw ParseError("truncated PGM data: " + path);
    std::vector<real> out(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i)
        out[i] = static_cast<real>(static_cast<unsigned char>(bytes[i])) / real(255);
    return out;
}

void write_dataset(const std::vector<DatasetRecord>& records, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.jsonl", std::ios::binary);
    if (!manifest) throw IoError("cannot write manifest in: " + dir);
    char name[32];
    for (size_t i = 0; i < records.size(); ++i) {
        const DatasetRecord& rec = records[i];
        std::snprintf(name, sizeof(name), "rec_%06zu.pgm", i);
        write_pgm((fs::path(dir) / name).string(), rec.image, kImageSize, kImageSize);
        json j;
        j["image"] = name;
        json labels = json::array();
        for (int c : rec.labels) labels.push_back(condition_names()[static_cast<size_t>(c)]);
        j["labels"] = labels;
        j["sentences"] = rec.sentence_text;
        j["split"] = rec.split;
        j["style"] = rec.style;
        manifest << j.dump() << '\n';
    }
    if (!manifest) throw IoError("failed writing manifest in: " + dir);
}

std::vector<DatasetRecord> load_dataset(const std::string& manifest_path) {
    std::ifstream is(manifest_path, std::ios::binary);
    if (!is) throw IoError("cannot read manifest: " + manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    std::vector<DatasetRecord> records;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        DatasetRecord rec;
        try {
            const auto img_rel = j.at("image").get<std::string>();
            for (const auto& s : j.at("sentences")) rec.sentence_text.push_back(s.get<std::string>());
            for (const auto& l : j.at("labels")) rec.labels.push_back(condition_from_name(l.get<std::string>()));
            rec.split = j.at("split").get<std::string>();
            rec.style = j.at("style").get<int>();
            const fs::path img_path = base / img_rel;
            if (!fs::exists(img_path)) throw IoError("missing image file: " + img_path.string());
            rec.image = read_pgm(img_path.string(), kImageSize, kImageSize);
        } catch (const json::exception& e) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        std::sort(rec.labels.begin(), rec.labels.end());
        records.push_back(std::move(rec));
    }
    return records;
}

void encode_records(std::vector<DatasetRecord>& records, const Vocabulary& vocab) {
    for (DatasetRecord& rec : records) {
        rec.sentences.clear();
        for (const std::string& s : rec.sentence_text)
            rec.sentences.push_back(vocab.encode_tokens(tokenize(s)));
    }
}

std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids) {
    std::string out;
    for (const int id : ids) {
        if (id <= kSentId) continue;
        if (!out.empty()) out += ' ';
        out += vocab.decode(id);
    }
    return out;
}

}  // namespace vti
