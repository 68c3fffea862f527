#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mmx/error.hpp"
#include "mmx/io.hpp"
#include "mmx/model.hpp"
#include "mmx/rng.hpp"

namespace mmx {

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

// Bytes >= 0x80 count as alphanumeric so that multi-byte UTF-8 letters stay
// inside word runs. ASCII follows the usual character classes.
inline bool is_alnum_byte(unsigned char c) {
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}

inline bool is_control_byte(unsigned char c) { return c < 0x20 || c == 0x7f; }

// ASCII lower-casing; multi-byte sequences pass through unchanged.
inline std::string lowercase(std::string_view text) {
    std::string out(text);
    for (char& c : out)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return out;
}

// Splits text into maximal runs of alphanumeric vs. non-alphanumeric bytes.
// An interior run consisting of exactly one space is dropped; detokenize
// restores it. Any other run (including multi-space runs) is kept verbatim.
inline std::vector<std::string> group_tokenize(std::string_view text) {
    for (unsigned char c : text)
        if (is_control_byte(c)) throw InputError("control character in text");
    std::vector<std::string> tokens;
    if (text.empty()) return tokens;
    std::size_t start = 0;
    for (std::size_t pos = 1; pos < text.size(); ++pos) {
        if (is_alnum_byte(static_cast<unsigned char>(text[pos])) !=
            is_alnum_byte(static_cast<unsigned char>(text[pos - 1]))) {
            std::string_view tok = text.substr(start, pos - start);
            if (tok != " " || start == 0) tokens.emplace_back(tok);
            start = pos;
        }
    }
    tokens.emplace_back(text.substr(start));
    return tokens;
}

// Inverse of group_tokenize: joins tokens, inserting one space between two
// adjacent tokens whose boundary characters are both alphanumeric.
inline std::string detokenize(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i > 0 && !tokens[i].empty() && !tokens[i - 1].empty() &&
            is_alnum_byte(static_cast<unsigned char>(tokens[i - 1].back())) &&
            is_alnum_byte(static_cast<unsigned char>(tokens[i].front())))
            out += ' ';
        out += tokens[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subword vocabulary (byte-pair merges over group_tokenize output)
// ---------------------------------------------------------------------------

namespace detail {
// End-of-token sentinel appended to every token before merging. Control
// bytes cannot occur in text, so it never collides with real content.
inline constexpr char kEndOfToken = '\x01';

// Percent-escapes bytes that would break the line-oriented vocab file.
inline std::string escape_piece(const std::string& s) {
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned char c : s) {
        if (c < 0x20 || c == 0x7f || c == '%') {
            out += '%';
            out += hex[c >> 4];
            out += hex[c & 0xf];
        } else {
            out += static_cast<char>(c);
        }
    }
    return out;
}

inline std::string unescape_piece(const std::string& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '%' && i + 2 < s.size()) {
            out += static_cast<char>(std::stoi(s.substr(i + 1, 2), nullptr, 16));
            i += 2;
        } else {
            out += s[i];
        }
    }
    return out;
}
}  // namespace detail

// Greedy byte-pair vocabulary with single-byte fallback, so any string over
// the training alphabet encodes without UNK and decodes back exactly.
class SubwordVocab {
  public:
    static constexpr std::size_t kNumSpecials = 4;

    // Learns merges over the lower-cased, tokenized corpus until the
    // vocabulary reaches target_size or no pair occurs at least twice.
    // Ties between equally frequent pairs break lexicographically.
    static SubwordVocab learn(const std::vector<std::string>& corpus, std::size_t target_size) {
        if (corpus.empty()) throw ConfigError("cannot learn a vocabulary from an empty corpus");
        std::map<std::vector<std::string>, std::uint64_t> words;
        for (const std::string& line : corpus) {
            for (const std::string& token : group_tokenize(lowercase(line))) {
                std::vector<std::string> symbols;
                for (char c : token) symbols.emplace_back(1, c);
                symbols.emplace_back(1, detail::kEndOfToken);
                ++words[symbols];
            }
        }

        SubwordVocab vocab;
        std::map<std::string, bool> alphabet;
        alphabet[std::string(1, detail::kEndOfToken)] = true;
        for (const auto& [symbols, freq] : words)
            for (const std::string& s : symbols) alphabet[s] = true;
        if (target_size < alphabet.size() + kNumSpecials)
            throw ConfigError("vocabulary budget " + std::to_string(target_size) + " below alphabet size " +
                              std::to_string(alphabet.size()) + " plus " + std::to_string(kNumSpecials) + " specials");
        for (const auto& [sym, _] : alphabet) vocab.add_piece(sym);

        while (vocab.size() < target_size) {
            std::map<std::pair<std::string, std::string>, std::uint64_t> pair_counts;
            for (const auto& [symbols, freq] : words)
                for (std::size_t i = 0; i + 1 < symbols.size(); ++i)
                    pair_counts[{symbols[i], symbols[i + 1]}] += freq;
            std::pair<std::string, std::string> best;
            std::uint64_t best_count = 0;
            for (const auto& [pair, count] : pair_counts) {
                if (count > best_count) {  // map order makes ties lexicographic
                    best_count = count;
                    best = pair;
                }
            }
            if (best_count < 2) break;
            vocab.merges_.push_back(best);
            vocab.add_piece(best.first + best.second);
            std::map<std::vector<std::string>, std::uint64_t> next;
            for (const auto& [symbols, freq] : words) {
                std::vector<std::string> merged;
                for (std::size_t i = 0; i < symbols.size(); ++i) {
                    if (i + 1 < symbols.size() && symbols[i] == best.first && symbols[i + 1] == best.second) {
                        merged.push_back(best.first + best.second);
                        ++i;
                    } else {
                        merged.push_back(symbols[i]);
                    }
                }
                next[merged] += freq;
            }
            words = std::move(next);
        }
        return vocab;
    }

    std::size_t size() const { return id_to_piece_.size(); }

    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

    int id_of(const std::string& piece) const {
        auto it = piece_to_id_.find(piece);
        return it == piece_to_id_.end() ? kUnk : it->second;
    }

    const std::string& piece(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= id_to_piece_.size())
            throw VocabError("piece id " + std::to_string(id) + " out of range");
        return id_to_piece_[static_cast<std::size_t>(id)];
    }

    // Lower-cases, tokenizes and BPE-encodes. Characters never seen during
    // learning fall back to UNK.
    std::vector<int> encode(std::string_view text) const {
        std::vector<int> ids;
        for (const std::string& token : group_tokenize(lowercase(text))) {
            std::vector<std::string> symbols;
            for (char c : token) symbols.emplace_back(1, c);
            symbols.emplace_back(1, detail::kEndOfToken);
            apply_merges(symbols);
            for (const std::string& s : symbols) ids.push_back(id_of(s));
        }
        return ids;
    }

    // Inverse of encode for UNK-free sequences; specials are skipped.
    std::string decode(const std::vector<int>& ids) const {
        std::string flat;
        for (int id : ids) {
            if (id == kPad || id == kBos || id == kEos) continue;
            if (id == kUnk) {
                flat += "<unk>";
                continue;
            }
            flat += piece(id);
        }
        std::vector<std::string> tokens;
        std::string current;
        for (char c : flat) {
            if (c == detail::kEndOfToken) {
                tokens.push_back(current);
                current.clear();
            } else {
                current += c;
            }
        }
        if (!current.empty()) tokens.push_back(current);
        return detokenize(tokens);
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw InputError("cannot open " + path.string() + " for writing");
        for (std::size_t i = 0; i < id_to_piece_.size(); ++i)
            out << detail::escape_piece(id_to_piece_[i]) << '\t' << i << '\n';
        out << "#MERGES\n";
        for (const auto& [a, b] : merges_) out << detail::escape_piece(a) << '\t' << detail::escape_piece(b) << '\n';
    }

    static SubwordVocab load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw InputError("cannot open vocabulary file " + path.string());
        SubwordVocab vocab;
        vocab.id_to_piece_.clear();
        vocab.piece_to_id_.clear();
        std::string line;
        bool merges = false;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (line == "#MERGES") {
                merges = true;
                continue;
            }
            const std::size_t tab = line.find('\t');
            if (merges) {
                if (tab == std::string::npos) throw InputError("malformed merge line in " + path.string());
                vocab.merges_.emplace_back(detail::unescape_piece(line.substr(0, tab)),
                                           detail::unescape_piece(line.substr(tab + 1)));
            } else {
                if (tab == std::string::npos) throw InputError("malformed vocab line in " + path.string());
                const std::string tok = detail::unescape_piece(line.substr(0, tab));
                const std::size_t id = std::stoul(line.substr(tab + 1));
                if (id != vocab.id_to_piece_.size())
                    throw InputError("vocabulary ids must be dense and ordered in " + path.string());
                vocab.id_to_piece_.push_back(tok);
                vocab.piece_to_id_[tok] = static_cast<int>(id);
            }
        }
        if (vocab.size() <= kNumSpecials) throw InputError("vocabulary file " + path.string() + " has no pieces");
        return vocab;
    }

  private:
    SubwordVocab() {
        id_to_piece_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
        for (std::size_t i = 0; i < id_to_piece_.size(); ++i) piece_to_id_[id_to_piece_[i]] = static_cast<int>(i);
    }

    void add_piece(const std::string& piece) {
        if (piece_to_id_.count(piece)) return;
        piece_to_id_[piece] = static_cast<int>(id_to_piece_.size());
        id_to_piece_.push_back(piece);
    }

    void apply_merges(std::vector<std::string>& symbols) const {
        // Repeatedly applies the earliest-learned merge present.
        while (symbols.size() > 1) {
            std::size_t best_rank = merges_.size();
            std::size_t best_pos = 0;
            for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
                for (std::size_t r = 0; r < best_rank; ++r) {
                    if (merges_[r].first == symbols[i] && merges_[r].second == symbols[i + 1]) {
                        best_rank = r;
                        best_pos = i;
                        break;
                    }
                }
            }
            if (best_rank == merges_.size()) break;
            symbols[best_pos] += symbols[best_pos + 1];
            symbols.erase(symbols.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
        }
    }

    std::vector<std::string> id_to_piece_;
    std::map<std::string, int> piece_to_id_;
    std::vector<std::pair<std::string, std::string>> merges_;
};

// ---------------------------------------------------------------------------
// Datasets (JSON lines, modality-optional records)
// ---------------------------------------------------------------------------

struct Example {
    std::string id;
    std::string source;
    std::optional<std::string> target;
    std::optional<std::string> image_ref;
};

inline std::vector<Example> parse_dataset(std::istream& in, const std::string& origin) {
    std::vector<Example> out;
    std::map<std::string, bool> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw InputError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
        Example ex;
        if (!j.contains("id") || !j.contains("source"))
            throw InputError(origin + ":" + std::to_string(lineno) + ": record needs `id` and `source`");
        ex.id = j.at("id").get<std::string>();
        ex.source = j.at("source").get<std::string>();
        if (j.contains("target")) ex.target = j.at("target").get<std::string>();
        if (j.contains("image_ref")) ex.image_ref = j.at("image_ref").get<std::string>();
        if (!ex.target && !ex.image_ref)
            throw InputError(origin + ":" + std::to_string(lineno) + ": record has neither target nor image_ref");
        if (seen.count(ex.id)) throw InputError(origin + ": duplicate example id `" + ex.id + "`");
        seen[ex.id] = true;
        out.push_back(std::move(ex));
    }
    return out;
}

inline std::vector<Example> load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open dataset " + path.string());
    return parse_dataset(in, path.string());
}

inline void write_dataset(std::ostream& out, const std::vector<Example>& examples) {
    for (const Example& ex : examples) {
        nlohmann::ordered_json j;
        j["id"] = ex.id;
        j["source"] = ex.source;
        if (ex.target) j["target"] = *ex.target;
        if (ex.image_ref) j["image_ref"] = *ex.image_ref;
        out << j.dump() << '\n';
    }
}

inline void save_dataset(const std::filesystem::path& path, const std::vector<Example>& examples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open " + path.string() + " for writing");
    write_dataset(out, examples);
}

// ---------------------------------------------------------------------------
// Image feature files
// ---------------------------------------------------------------------------

// Binary container of per-example grid and pooled image features.
// Layout: "MMXI", u32 version, u32 count, u32 positions, u32 grid dim,
// u32 pooled dim, then per record a length-prefixed id followed by grid and
// pooled values as 32-bit little-endian floats.
class FeatureFile {
  public:
    static constexpr std::uint32_t kVersion = 1;

    std::uint32_t positions = 0;
    std::uint32_t grid_dim = 0;
    std::uint32_t pooled_dim = 0;

    void add(const std::string& id, ImageFeatures f) {
        if (index_.count(id)) throw InputError("duplicate feature record id `" + id + "`");
        if (f.positions != positions || f.dim != grid_dim || f.pooled.size() != pooled_dim)
            throw InputError("feature record `" + id + "` does not match the file header");
        index_[id] = records_.size();
        records_.emplace_back(id, std::move(f));
    }

    bool contains(const std::string& id) const { return index_.count(id) != 0; }
    std::size_t count() const { return records_.size(); }
    const std::vector<std::pair<std::string, ImageFeatures>>& records() const { return records_; }

    const ImageFeatures& get(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw InputError("image_ref `" + id + "` not present in the feature file");
        return records_[it->second].second;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw InputError("cannot open " + path.string() + " for writing");
        out.write("MMXI", 4);
        io::write_u32(out, kVersion);
        io::write_u32(out, static_cast<std::uint32_t>(records_.size()));
        io::write_u32(out, positions);
        io::write_u32(out, grid_dim);
        io::write_u32(out, pooled_dim);
        for (const auto& [id, f] : records_) {
            io::write_string(out, id);
            for (double v : f.grid) io::write_f32(out, static_cast<float>(v));
            for (double v : f.pooled) io::write_f32(out, static_cast<float>(v));
        }
    }

    static FeatureFile load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw InputError("cannot open feature file " + path.string());
        io::expect_magic(in, "MMXI", "feature");
        const std::uint32_t version = io::read_u32(in);
        if (version != kVersion) throw InputError("unsupported feature file version " + std::to_string(version));
        const std::uint32_t count = io::read_u32(in);
        FeatureFile file;
        file.positions = io::read_u32(in);
        file.grid_dim = io::read_u32(in);
        file.pooled_dim = io::read_u32(in);
        for (std::uint32_t r = 0; r < count; ++r) {
            const std::string id = io::read_string(in);
            ImageFeatures f;
            f.positions = file.positions;
            f.dim = file.grid_dim;
            f.grid.resize(static_cast<std::size_t>(file.positions) * file.grid_dim);
            f.pooled.resize(file.pooled_dim);
            for (double& v : f.grid) v = static_cast<double>(io::read_f32(in));
            for (double& v : f.pooled) v = static_cast<double>(io::read_f32(in));
            file.add(id, std::move(f));
        }
        return file;
    }

  private:
    std::vector<std::pair<std::string, ImageFeatures>> records_;
    std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Oversampling mixer
// ---------------------------------------------------------------------------

// Repeats each part `factor` times and shuffles the union with the run seed.
// Replicas beyond the first get a `~r<k>` id suffix so the result remains a
// valid dataset. Empty parts are skipped with a warning.
inline std::vector<Example> mix_datasets(const std::vector<std::pair<std::vector<Example>, std::uint32_t>>& parts,
                                         Rng& rng, std::ostream* warnings = nullptr) {
    std::vector<Example> out;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& [examples, factor] = parts[p];
        if (factor < 1) throw ContractError("oversampling factor must be >= 1");
        if (examples.empty()) {
            if (warnings) *warnings << "warning: dataset part " << p << " is empty, skipped\n";
            continue;
        }
        for (std::uint32_t rep = 0; rep < factor; ++rep) {
            for (const Example& ex : examples) {
                Example copy = ex;
                if (rep > 0) copy.id += "~r" + std::to_string(rep);
                out.push_back(std::move(copy));
            }
        }
    }
    rng.shuffle(out);
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic visual-disambiguation task
// ---------------------------------------------------------------------------

struct ToyTaskConfig {
    std::size_t n_val = 200;
    std::size_t grid_positions = 4;
    std::size_t feature_dim = 8;  // grid feature width; pooled width is the same
    double noise = 0.2;
};

struct ToyTask {
    // Surface forms of the ambiguity: one source word whose target is
    // decided only by the sign of image feature column 0.
    static constexpr const char* kAmbiguousSource = "amb";
    static constexpr const char* kSenseA = "va";
    static constexpr const char* kSenseB = "vb";
    static constexpr std::size_t kContentWords = 12;

    std::vector<Example> train, val, test;
    FeatureFile features;
};

namespace detail {

struct ToyGenerator {
    Rng content;
    Rng noise_rng;
    std::vector<std::vector<double>> word_vectors;  // per content word, feature_dim - 1 wide
    const ToyTaskConfig& cfg;
    FeatureFile* features;
    std::size_t next_image = 0;

    ToyGenerator(std::uint64_t seed, const ToyTaskConfig& c, FeatureFile* f)
        : content(Rng(seed).stream("toy-content")), noise_rng(Rng(seed).stream("toy-noise")), cfg(c), features(f) {
        Rng words = Rng(seed).stream("toy-words");
        for (std::size_t w = 0; w < ToyTask::kContentWords; ++w) {
            std::vector<double> v(cfg.feature_dim - 1);
            for (double& x : v) x = words.uniform(-1.0, 1.0);
            word_vectors.push_back(std::move(v));
        }
    }

    // One sentence: 3-5 content words with the ambiguous word at a random
    // position. Returns source words including "amb".
    std::vector<std::size_t> sample_content() {
        const std::size_t len = 3 + static_cast<std::size_t>(content.next_below(3));
        std::vector<std::size_t> words(len);
        for (std::size_t& w : words) w = static_cast<std::size_t>(content.next_below(ToyTask::kContentWords));
        return words;
    }

    Example make_example(const std::string& prefix, std::size_t index, const std::vector<std::size_t>& words,
                         std::size_t amb_pos, bool sense_a) {
        std::string source, target;
        for (std::size_t i = 0; i <= words.size(); ++i) {
            auto append = [&](const std::string& s, const std::string& t) {
                if (!source.empty()) source += ' ';
                if (!target.empty()) target += ' ';
                source += s;
                target += t;
            };
            if (i == amb_pos) append(ToyTask::kAmbiguousSource, sense_a ? ToyTask::kSenseA : ToyTask::kSenseB);
            if (i < words.size())
                append("w" + std::to_string(words[i]), "v" + std::to_string(words[i]));
        }

        // image: column 0 carries the sense, the rest is the word-vector
        // mean plus per-cell noise; pooled is exactly the grid row mean
        const std::size_t p = cfg.grid_positions, c = cfg.feature_dim;
        ImageFeatures img;
        img.positions = p;
        img.dim = c;
        img.grid.assign(p * c, 0.0);
        std::vector<double> mean_word(c - 1, 0.0);
        for (std::size_t w : words)
            for (std::size_t j = 0; j + 1 < c; ++j) mean_word[j] += word_vectors[w][j] / static_cast<double>(words.size());
        for (std::size_t cell = 0; cell < p; ++cell) {
            img.grid[cell * c] = sense_a ? 1.0 : -1.0;
            for (std::size_t j = 1; j < c; ++j)
                img.grid[cell * c + j] = mean_word[j - 1] + noise_rng.uniform(-cfg.noise, cfg.noise);
        }
        img.pooled.assign(c, 0.0);
        for (std::size_t cell = 0; cell < p; ++cell)
            for (std::size_t j = 0; j < c; ++j) img.pooled[j] += img.grid[cell * c + j] / static_cast<double>(p);

        Example ex;
        ex.id = prefix + "-" + std::to_string(index);
        ex.source = source;
        ex.target = target;
        ex.image_ref = ex.id;
        features->add(ex.id, std::move(img));
        return ex;
    }

    // Every sentence is emitted once per sense, so the sense is exactly
    // independent of the text and decided only by the image.
    std::vector<Example> split(const std::string& prefix, std::size_t n) {
        std::vector<Example> out;
        std::size_t index = 0;
        while (out.size() + 2 <= n) {
            const auto words = sample_content();
            const std::size_t amb_pos = static_cast<std::size_t>(content.next_below(words.size() + 1));
            out.push_back(make_example(prefix, index++, words, amb_pos, true));
            out.push_back(make_example(prefix, index++, words, amb_pos, false));
        }
        if (out.size() < n) {
            const auto words = sample_content();
            const std::size_t amb_pos = static_cast<std::size_t>(content.next_below(words.size() + 1));
            out.push_back(make_example(prefix, index++, words, amb_pos, content.next_below(2) == 0));
        }
        content.shuffle(out);
        return out;
    }
};

}  // namespace detail

// Generates the synthetic disambiguation datasets plus their feature file.
// Same seed, same bytes.
inline ToyTask generate_toy_task(std::size_t n_train, std::size_t n_test, std::uint64_t seed,
                                 const ToyTaskConfig& cfg = {}) {
    if (n_train < 1 || n_test < 1) throw ContractError("toy task sizes must be >= 1");
    if (cfg.feature_dim < 2) throw ConfigError("toy feature_dim must be >= 2");
    ToyTask task;
    task.features.positions = static_cast<std::uint32_t>(cfg.grid_positions);
    task.features.grid_dim = static_cast<std::uint32_t>(cfg.feature_dim);
    task.features.pooled_dim = static_cast<std::uint32_t>(cfg.feature_dim);
    detail::ToyGenerator gen(seed, cfg, &task.features);
    task.train = gen.split("train", n_train);
    task.val = gen.split("val", cfg.n_val);
    task.test = gen.split("test", n_test);
    return task;
}

// ---------------------------------------------------------------------------
// Encoding examples for the model
// ---------------------------------------------------------------------------

inline EncodedExample encode_example(const Example& ex, const SubwordVocab& vocab, const FeatureFile* features) {
    EncodedExample enc;
    enc.id = ex.id;
    enc.src = vocab.encode(ex.source);
    enc.src.push_back(kEos);
    if (ex.target) {
        std::vector<int> tgt = {kBos};
        for (int id : vocab.encode(*ex.target)) tgt.push_back(id);
        tgt.push_back(kEos);
        enc.tgt = std::move(tgt);
    }
    if (ex.image_ref) {
        if (features == nullptr) throw InputError("example `" + ex.id + "` references an image but no feature file was given");
        enc.img = features->get(*ex.image_ref);
    }
    return enc;
}

inline Batch encode_dataset(const std::vector<Example>& examples, const SubwordVocab& vocab,
                            const FeatureFile* features) {
    Batch batch;
    batch.reserve(examples.size());
    for (const Example& ex : examples) batch.push_back(encode_example(ex, vocab, features));
    return batch;
}

// Plain one-sentence-per-line corpus reader.
inline std::vector<std::string> load_lines(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

}  // namespace mmx
