#pragma once

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include "odelm/tensor.hpp"

namespace odelm {

// Character vocabulary built from corpus text; ids are sorted char codes.
struct Vocab {
    std::vector<char> itos;
    std::array<std::int16_t, 256> stoi{};

    static Vocab from_text(const std::string& text) {
        std::array<bool, 256> seen{};
        for (unsigned char c : text) seen[c] = true;
        Vocab v;
        v.stoi.fill(-1);
        for (int c = 0; c < 256; ++c)
            if (seen[static_cast<std::size_t>(c)]) {
                v.stoi[static_cast<std::size_t>(c)] = static_cast<std::int16_t>(v.itos.size());
                v.itos.push_back(static_cast<char>(c));
            }
        return v;
    }

    std::int64_t size() const { return static_cast<std::int64_t>(itos.size()); }

    std::int64_t id(char c) const {
        const std::int16_t i = stoi[static_cast<unsigned char>(c)];
        if (i < 0) throw ContractViolation(std::string("character '") + c + "' not in vocabulary");
        return i;
    }

    std::vector<std::int64_t> encode(const std::string& s) const {
        std::vector<std::int64_t> out;
        out.reserve(s.size());
        for (char c : s) out.push_back(id(c));
        return out;
    }

    std::string decode(const std::vector<std::int64_t>& ids) const {
        std::string out;
        out.reserve(ids.size());
        for (auto i : ids) out.push_back(itos.at(static_cast<std::size_t>(i)));
        return out;
    }
};

struct Corpus {
    std::string text;
    Vocab vocab;
    std::vector<std::int64_t> tokens;
};

namespace corpus_detail {

inline const std::vector<std::string>& filler_subjects() {
    static const std::vector<std::string> v = {
        "the river",     "a small boat",  "the old clock",  "a gray cat",     "the tall tree",
        "a young fox",   "the open road", "a warm wind",    "the quiet town", "a silver coin",
        "the long bridge", "a wooden door", "the night sky", "a paper kite",  "the green field",
        "a stone wall",  "the deep well", "a candle flame", "the iron gate",  "a glass jar",
        "the last train", "a broken wheel", "the low cloud", "a narrow lane", "the red roof",
        "a quiet engine", "the early frost", "a second lamp", "the far harbor", "a torn map",
        "the spare key", "a round table",  "the pale moon",  "a loose thread", "the back stair",
        "a copper bell", "the north wall", "a dusty shelf",  "the thin ice",   "a folded letter"};
    return v;
}

inline const std::vector<std::string>& filler_verbs() {
    static const std::vector<std::string> v = {
        "drifts", "turns",  "rests",   "waits",  "shines", "moves",  "stands", "falls",
        "rises",  "sings",  "sleeps",  "leans",  "runs",   "glows",  "hums",   "bends",
        "cools",  "cracks", "settles", "fades",  "spins",  "slides", "rattles", "breaks"};
    return v;
}

inline const std::vector<std::string>& filler_tails() {
    static const std::vector<std::string> v = {
        "near the shore",     "by the hill",       "under the stars",  "past the garden",
        "through the valley", "in the morning",    "after the rain",   "before the dawn",
        "along the path",     "beside the lake",   "over the meadow",  "behind the house",
        "against the wind",   "beyond the fence",  "inside the barn",  "across the square",
        "beneath the arch",   "around the corner", "within the walls", "toward the coast",
        "despite the cold",   "without a sound",   "between the rows", "during the storm"};
    return v;
}

inline const std::vector<std::string>& connectors() {
    static const std::vector<std::string> v = {"and", "but", "while", "so", "yet", "then"};
    return v;
}

inline const std::vector<std::string>& media_subjects() {
    static const std::vector<std::string> v = {"the movie", "the film",   "that story", "the play",
                                               "this book", "the show",   "her song",   "the plot",
                                               "the acting", "that scene", "the script", "the cast",
                                               "the music", "the sequel", "the drama",  "the novel"};
    return v;
}

inline const std::vector<std::string>& media_verbs() {
    static const std::vector<std::string> v = {"was", "felt", "seemed", "looked"};
    return v;
}

inline void append_filler_clause(std::string& out, Rng& rng) {
    out += filler_subjects()[rng.below(filler_subjects().size())];
    out += ' ';
    out += filler_verbs()[rng.below(filler_verbs().size())];
    out += ' ';
    out += filler_tails()[rng.below(filler_tails().size())];
}

// Unpredictable letter groups; keeps the stream from being learnable to the
// floor within a few hundred steps, like a real text corpus.
inline void append_noise_words(std::string& out, Rng& rng) {
    const int n_words = 3 + static_cast<int>(rng.below(5));
    for (int w = 0; w < n_words; ++w) {
        const int len = 2 + static_cast<int>(rng.below(6));
        for (int i = 0; i < len; ++i) out += static_cast<char>('a' + rng.below(26));
        if (w + 1 < n_words) out += ' ';
    }
}

}  // namespace corpus_detail

// Deterministic bundled corpus. Filler sentences (single- or two-clause)
// and unpredictable letter-group lines, mixed with sentiment sentences
// whose completion is "good" 90% of the time; the positive skew is what
// the neutral-control row measures later.
inline std::string generate_corpus_text(std::size_t target_chars = 1000000) {
    using namespace corpus_detail;
    Rng rng(0x0DE1A5EEDULL);
    std::string out;
    out.reserve(target_chars + 128);
    while (out.size() < target_chars) {
        const std::uint64_t kind = rng.below(10);
        if (kind < 2) {  // plain filler
            append_filler_clause(out, rng);
            out += ".\n";
        } else if (kind < 4) {  // two joined clauses
            append_filler_clause(out, rng);
            out += ", ";
            out += connectors()[rng.below(connectors().size())];
            out += ' ';
            append_filler_clause(out, rng);
            out += ".\n";
        } else if (kind < 7) {  // unpredictable letter groups
            append_noise_words(out, rng);
            out += ".\n";
        } else {  // sentiment line
            const auto& s = media_subjects()[rng.below(media_subjects().size())];
            const auto& v = media_verbs()[rng.below(media_verbs().size())];
            const bool positive = rng.below(10) != 0;
            out += s;
            out += ' ';
            out += v;
            out += positive ? " good" : " bad";
            if (rng.below(4) == 0) {
                out += ", ";
                out += connectors()[rng.below(connectors().size())];
                out += ' ';
                append_filler_clause(out, rng);
            }
            out += ".\n";
        }
    }
    return out;
}

inline Corpus corpus_from_text(std::string text) {
    if (text.size() < 2) throw ContractViolation("corpus: text too short");
    Corpus c;
    c.text = std::move(text);
    c.vocab = Vocab::from_text(c.text);
    c.tokens.reserve(c.text.size());
    for (char ch : c.text) c.tokens.push_back(c.vocab.id(ch));
    return c;
}

inline Corpus builtin_corpus(std::size_t target_chars = 1000000) {
    return corpus_from_text(generate_corpus_text(target_chars));
}

inline Corpus corpus_from_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("corpus: cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return corpus_from_text(std::move(text));
}

// [B, seq+1] token windows at uniformly chosen offsets
inline std::vector<std::int64_t> sample_lm_batch(const std::vector<std::int64_t>& tokens, std::int64_t B,
                                                 std::int64_t seq, Rng& rng) {
    const std::int64_t n = static_cast<std::int64_t>(tokens.size());
    if (n < seq + 2) throw ContractViolation("corpus too small for requested sequence length");
    std::vector<std::int64_t> out;
    out.reserve(static_cast<std::size_t>(B * (seq + 1)));
    for (std::int64_t b = 0; b < B; ++b) {
        const std::int64_t off = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n - seq - 1)));
        for (std::int64_t i = 0; i <= seq; ++i) out.push_back(tokens[static_cast<std::size_t>(off + i)]);
    }
    return out;
}

// Fixed-length (left '\n'-padded) sentiment prompts with single-character
// targets at the shared answer position.
struct SteeringTask {
    std::vector<std::string> prompts;       // padded to equal length
    std::vector<std::int64_t> prompt_rows;  // [n_prompts * prompt_len]
    std::int64_t prompt_len = 0;
    std::int64_t answer_pos = 0;  // logits position that predicts the target
    std::int64_t good_id = -1;
    std::int64_t bad_id = -1;
};

inline SteeringTask make_steering_task(const Vocab& vocab, std::size_t n_prompts = 32) {
    using namespace corpus_detail;
    const auto& subj = media_subjects();
    const auto& verbs = media_verbs();
    if (n_prompts > subj.size() * verbs.size())
        throw ContractViolation("steering task: not enough prompt templates");
    std::vector<std::string> raw;
    for (std::size_t i = 0; i < n_prompts; ++i)
        raw.push_back(subj[i % subj.size()] + " " + verbs[i / subj.size()] + " ");
    std::size_t maxlen = 0;
    for (const auto& p : raw) maxlen = std::max(maxlen, p.size());

    SteeringTask task;
    task.prompt_len = static_cast<std::int64_t>(maxlen);
    task.answer_pos = task.prompt_len - 1;
    task.good_id = vocab.id('g');
    task.bad_id = vocab.id('b');
    for (auto& p : raw) {
        std::string padded(maxlen - p.size(), '\n');
        padded += p;
        const auto ids = vocab.encode(padded);
        task.prompt_rows.insert(task.prompt_rows.end(), ids.begin(), ids.end());
        task.prompts.push_back(std::move(padded));
    }
    return task;
}

}  // namespace odelm
