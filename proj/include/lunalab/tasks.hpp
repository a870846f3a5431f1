#pragma once

// Desk-scale synthetic sequence-classification tasks and the plain-text
// dataset format shared with external tooling:
//
//   <ids separated by spaces> TAB <label>                      single input
//   <ids a> TAB <ids b> TAB <label>                            dual input

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lunalab/errors.hpp"

namespace lunalab {

enum class TaskKind { listops, marker, pixel_grid, file_ingest };

inline const char* task_kind_name(TaskKind k) {
    switch (k) {
    case TaskKind::listops: return "listops";
    case TaskKind::marker: return "marker";
    case TaskKind::pixel_grid: return "pixel-grid";
    case TaskKind::file_ingest: return "file-ingest";
    }
    return "?";
}

struct TaskSpec {
    TaskKind kind = TaskKind::marker;
    std::size_t min_len = 128;
    std::size_t max_len = 128;
    std::size_t min_depth = 1;  // listops
    std::size_t max_depth = 3;  // listops
    std::size_t vocab_size = 32;
    std::size_t num_classes = 2;
    std::uint64_t seed = 1234;
    bool dual_input = false;
    std::size_t n_train = 4096;
    std::size_t n_val = 512;
    std::size_t grid_side = 16;  // pixel-grid
    double noise = 0.1;          // pixel-grid, std-dev of additive noise
    std::string train_path;      // file-ingest
    std::string val_path;        // file-ingest

    bool operator==(const TaskSpec&) const = default;
};

struct SequenceSample {
    std::vector<int> tokens;
    std::vector<bool> mask;  // empty = every position valid
    std::vector<int> tokens_b;
    std::vector<bool> mask_b;
    int label = 0;

    bool operator==(const SequenceSample&) const = default;
};

using Dataset = std::vector<SequenceSample>;

struct TaskData {
    Dataset train;
    Dataset val;
};

// ---------------------------------------------------------------------------
// ListOps

namespace listops {

inline constexpr int kMax = 10;
inline constexpr int kMin = 11;
inline constexpr int kMed = 12;
inline constexpr int kSumMod = 13;
inline constexpr int kOpen = 14;
inline constexpr int kClose = 15;
inline constexpr std::size_t kVocabSize = 16;
inline constexpr std::size_t kNumClasses = 10;

inline bool is_operator(int id) { return id >= kMax && id <= kSumMod; }

inline int apply(int op, std::vector<int> args) {
    switch (op) {
    case kMax: return *std::max_element(args.begin(), args.end());
    case kMin: return *std::min_element(args.begin(), args.end());
    case kMed:
        // lower median for even counts
        std::sort(args.begin(), args.end());
        return args[(args.size() - 1) / 2];
    case kSumMod: {
        int total = 0;
        for (int a : args) total += a;
        return total % 10;
    }
    default: throw InputError("listops: unknown operator id " + std::to_string(op));
    }
}

// Stack evaluator over token ids.
inline int evaluate(const std::vector<int>& tokens) {
    struct Frame {
        int op;
        std::vector<int> args;
    };
    std::vector<Frame> stack;
    std::optional<int> result;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int id = tokens[i];
        if (result) throw InputError("listops: trailing tokens after expression");
        if (id == kOpen) {
            if (i + 1 >= tokens.size() || !is_operator(tokens[i + 1])) throw InputError("listops: '[' must be followed by an operator");
            stack.push_back({tokens[++i], {}});
        } else if (id == kClose) {
            if (stack.empty() || stack.back().args.empty()) throw InputError("listops: unbalanced or empty ']'");
            const int value = apply(stack.back().op, stack.back().args);
            stack.pop_back();
            if (stack.empty()) result = value;
            else stack.back().args.push_back(value);
        } else if (id >= 0 && id <= 9) {
            if (stack.empty()) {
                if (tokens.size() != 1) throw InputError("listops: digit outside brackets");
                return id;
            }
            stack.back().args.push_back(id);
        } else {
            throw InputError("listops: unexpected token id " + std::to_string(id));
        }
    }
    if (!result || !stack.empty()) throw InputError("listops: unbalanced expression");
    return *result;
}

inline const char* token_text(int id) {
    static const char* names[] = {"0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "MAX", "MIN", "MED", "SM", "[", "]"};
    if (id < 0 || id >= static_cast<int>(kVocabSize)) throw InputError("listops: token id out of range");
    return names[id];
}

// "[MAX 1 [MIN 2 3]]" style rendering.
inline std::string to_string(const std::vector<int>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int id = tokens[i];
        const bool glue = i > 0 && (tokens[i - 1] == kOpen || id == kClose);
        if (i > 0 && !glue) out += ' ';
        out += token_text(id);
    }
    return out;
}

inline std::vector<int> tokenize(const std::string& text) {
    std::vector<int> out;
    std::istringstream is(text);
    std::string word;
    while (is >> word) {
        std::size_t begin = 0, end = word.size();
        while (begin < end && word[begin] == '[') {
            out.push_back(kOpen);
            ++begin;
        }
        std::size_t closes = 0;
        while (end > begin && word[end - 1] == ']') {
            ++closes;
            --end;
        }
        if (begin < end) {
            const std::string core = word.substr(begin, end - begin);
            if (core == "MAX") out.push_back(kMax);
            else if (core == "MIN") out.push_back(kMin);
            else if (core == "MED") out.push_back(kMed);
            else if (core == "SM") out.push_back(kSumMod);
            else if (core.size() == 1 && core[0] >= '0' && core[0] <= '9') out.push_back(core[0] - '0');
            else throw InputError("listops: unknown token '" + core + "'");
        }
        out.insert(out.end(), closes, kClose);
    }
    return out;
}

} // namespace listops

struct ListOpsSample {
    std::vector<int> tokens;
    int label = 0;
    std::size_t depth = 0;
    std::size_t length = 0;
};

namespace detail {

struct ListOpsDraw {
    int value;
    std::size_t depth;
};

// Appends one expression to `out`. level 0 is the root.
inline ListOpsDraw draw_listops(std::mt19937_64& rng, std::size_t level, std::size_t max_depth, std::vector<int>& out) {
    std::uniform_int_distribution<int> op_dist(listops::kMax, listops::kSumMod);
    std::uniform_int_distribution<int> arity_dist(2, 5);
    std::uniform_int_distribution<int> digit_dist(0, 9);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int op = op_dist(rng);
    const int arity = arity_dist(rng);
    out.push_back(listops::kOpen);
    out.push_back(op);
    std::vector<int> args;
    std::size_t depth = 1;
    const double subtree_p = 0.3 * std::pow(0.6, static_cast<double>(level));
    for (int i = 0; i < arity; ++i) {
        if (level + 1 < max_depth && unit(rng) < subtree_p) {
            const auto child = draw_listops(rng, level + 1, max_depth, out);
            args.push_back(child.value);
            depth = std::max(depth, child.depth + 1);
        } else {
            const int digit = digit_dist(rng);
            out.push_back(digit);
            args.push_back(digit);
        }
    }
    out.push_back(listops::kClose);
    return {listops::apply(op, args), depth};
}

inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 of (seed, stream)
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

} // namespace detail

inline std::vector<ListOpsSample> gen_listops(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
    if (spec.min_depth < 1 || spec.max_depth < spec.min_depth) throw ConfigError("listops: need 1 <= min_depth <= max_depth");
    if (spec.min_len > spec.max_len) throw ConfigError("listops: min_len exceeds max_len");
    // shortest expression of depth D: [OP d [OP d ... ]] = 4D + 1 tokens
    if (4 * spec.min_depth + 1 > spec.max_len) {
        throw ConfigError("listops: depth " + std::to_string(spec.min_depth) + " cannot fit in max_len " +
                          std::to_string(spec.max_len));
    }
    if (spec.vocab_size < listops::kVocabSize) throw ConfigError("listops: vocab_size must be at least 16");
    std::mt19937_64 rng(seed);
    std::vector<ListOpsSample> out;
    out.reserve(n);
    constexpr std::size_t kMaxAttempts = 100000;
    while (out.size() < n) {
        std::size_t attempts = 0;
        for (;;) {
            if (++attempts > kMaxAttempts) throw ConfigError("listops: length/depth bounds are infeasible for the grammar");
            std::vector<int> tokens;
            const auto draw = detail::draw_listops(rng, 0, spec.max_depth, tokens);
            if (tokens.size() < spec.min_len || tokens.size() > spec.max_len) continue;
            if (draw.depth < spec.min_depth) continue;
            out.push_back({tokens, draw.value, draw.depth, tokens.size()});
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Marker detection: label 1 iff the marker token occurs in the first half.

inline constexpr int kPadToken = 0;
inline constexpr int kMarkerToken = 1;

inline int marker_label(const std::vector<int>& tokens, int marker = kMarkerToken) {
    const std::size_t half = tokens.size() / 2;
    for (std::size_t i = 0; i < half; ++i)
        if (tokens[i] == marker) return 1;
    return 0;
}

namespace detail {

inline std::vector<int> draw_marker_sequence(std::mt19937_64& rng, const TaskSpec& spec, bool positive) {
    std::uniform_int_distribution<std::size_t> len_dist(spec.min_len, spec.max_len);
    std::uniform_int_distribution<int> noise_dist(2, static_cast<int>(spec.vocab_size) - 1);
    std::bernoulli_distribution coin(0.5);
    const std::size_t len = len_dist(rng);
    std::vector<int> tokens(len);
    for (auto& t : tokens) t = noise_dist(rng);
    const std::size_t half = len / 2;
    if (positive) {
        tokens[std::uniform_int_distribution<std::size_t>(0, half - 1)(rng)] = kMarkerToken;
    } else if (coin(rng)) {
        // distractor in the second half
        tokens[std::uniform_int_distribution<std::size_t>(half, len - 1)(rng)] = kMarkerToken;
    }
    return tokens;
}

} // namespace detail

inline Dataset gen_marker(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
    if (spec.min_len < 4 || spec.min_len > spec.max_len) throw ConfigError("marker: need 4 <= min_len <= max_len");
    if (spec.vocab_size < 4) throw ConfigError("marker: vocab_size must be at least 4");
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution coin(0.5);
    Dataset out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        SequenceSample s;
        if (!spec.dual_input) {
            const bool positive = coin(rng);
            s.tokens = detail::draw_marker_sequence(rng, spec, positive);
            s.label = positive ? 1 : 0;
        } else {
            // matching variant: label 1 iff both inputs share the first-half status
            const bool same = coin(rng);
            const bool first = coin(rng);
            s.tokens = detail::draw_marker_sequence(rng, spec, first);
            s.tokens_b = detail::draw_marker_sequence(rng, spec, same ? first : !first);
            s.label = same ? 1 : 0;
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pixel grid: g x g grayscale shapes flattened row-major, 256 intensity levels.

enum class GridShape { hbar, vbar, blob_top_left, blob_bottom_right, blob_top_right, blob_bottom_left, diagonal, anti_diagonal };
inline constexpr std::size_t kGridShapeCount = 8;

// Noiseless intensities in [0, 1]; `position` selects the bar row/column or blob offset.
inline std::vector<double> render_shape(GridShape shape, std::size_t g, std::size_t position) {
    std::vector<double> img(g * g, 0.0);
    auto set = [&](std::size_t r, std::size_t c) {
        if (r < g && c < g) img[r * g + c] = 1.0;
    };
    const std::size_t blob = std::max<std::size_t>(2, g / 4);
    const std::size_t off = position % std::max<std::size_t>(1, g / 8 + 1);
    switch (shape) {
    case GridShape::hbar:
        for (std::size_t c = 0; c < g; ++c) set(position % g, c);
        break;
    case GridShape::vbar:
        for (std::size_t r = 0; r < g; ++r) set(r, position % g);
        break;
    case GridShape::blob_top_left:
        for (std::size_t r = 0; r < blob; ++r)
            for (std::size_t c = 0; c < blob; ++c) set(off + r, off + c);
        break;
    case GridShape::blob_bottom_right:
        for (std::size_t r = 0; r < blob; ++r)
            for (std::size_t c = 0; c < blob; ++c) set(g - 1 - off - r, g - 1 - off - c);
        break;
    case GridShape::blob_top_right:
        for (std::size_t r = 0; r < blob; ++r)
            for (std::size_t c = 0; c < blob; ++c) set(off + r, g - 1 - off - c);
        break;
    case GridShape::blob_bottom_left:
        for (std::size_t r = 0; r < blob; ++r)
            for (std::size_t c = 0; c < blob; ++c) set(g - 1 - off - r, off + c);
        break;
    case GridShape::diagonal:
        for (std::size_t i = 0; i < g; ++i) set(i, i);
        break;
    case GridShape::anti_diagonal:
        for (std::size_t i = 0; i < g; ++i) set(i, g - 1 - i);
        break;
    }
    return img;
}

inline int quantize_intensity(double v) {
    return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline Dataset gen_pixel_grid(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
    const std::size_t g = spec.grid_side;
    if (g < 4) throw ConfigError("pixel-grid: grid_side must be at least 4");
    if (g * g > spec.max_len) throw ConfigError("pixel-grid: grid_side^2 exceeds max_len");
    if (spec.vocab_size < 256) throw ConfigError("pixel-grid: vocab_size must be at least 256");
    if (spec.num_classes < 2 || spec.num_classes > kGridShapeCount) {
        throw ConfigError("pixel-grid: num_classes must lie in [2, 8]");
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> class_dist(0, spec.num_classes - 1);
    std::uniform_int_distribution<std::size_t> pos_dist(0, g - 1);
    std::normal_distribution<double> noise(0.0, spec.noise);
    Dataset out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = class_dist(rng);
        auto img = render_shape(static_cast<GridShape>(cls), g, pos_dist(rng));
        SequenceSample s;
        s.tokens.reserve(img.size());
        for (double v : img) s.tokens.push_back(quantize_intensity(spec.noise > 0 ? v + noise(rng) : v));
        s.label = static_cast<int>(cls);
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Line-based dataset files.

// Streams samples one line at a time.
class LraReader {
public:
    LraReader(const std::filesystem::path& path, const TaskSpec& spec) : spec_(spec), in_(path) {
        if (!in_) throw InputError("dataset: cannot open " + path.string());
    }

    std::optional<SequenceSample> next() {
        std::string line;
        while (std::getline(in_, line)) {
            ++line_number_;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.find_first_not_of(" \t") == std::string::npos) continue;
            return parse(line);
        }
        return std::nullopt;
    }

    std::size_t line_number() const { return line_number_; }

private:
    [[noreturn]] void fail(const std::string& what) const {
        throw InputError("dataset line " + std::to_string(line_number_) + ": " + what);
    }

    long parse_int(const std::string& text) const {
        std::size_t used = 0;
        long value = 0;
        try {
            value = std::stol(text, &used);
        } catch (const std::exception&) {
            fail("'" + text + "' is not an integer");
        }
        if (used != text.size()) fail("'" + text + "' is not an integer");
        return value;
    }

    std::vector<int> parse_ids(const std::string& field) const {
        std::istringstream is(field);
        std::vector<int> ids;
        std::string word;
        while (is >> word) {
            const long id = parse_int(word);
            if (id < 0) fail("negative token id " + word);
            if (static_cast<std::size_t>(id) >= spec_.vocab_size) {
                fail("token id " + word + " >= vocab_size " + std::to_string(spec_.vocab_size));
            }
            ids.push_back(static_cast<int>(id));
        }
        if (ids.empty()) fail("empty token sequence");
        if (ids.size() > spec_.max_len) fail("sequence length " + std::to_string(ids.size()) + " exceeds max_len");
        return ids;
    }

    SequenceSample parse(const std::string& line) const {
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (;;) {
            const auto tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        const std::size_t expected = spec_.dual_input ? 3 : 2;
        if (fields.size() != expected) {
            fail("expected " + std::to_string(expected) + " tab-separated fields, found " + std::to_string(fields.size()));
        }
        SequenceSample s;
        s.tokens = parse_ids(fields[0]);
        if (spec_.dual_input) s.tokens_b = parse_ids(fields[1]);
        std::string label_text = fields.back();
        label_text.erase(0, label_text.find_first_not_of(' '));
        label_text.erase(label_text.find_last_not_of(' ') + 1);
        const long label = parse_int(label_text);
        if (label < 0 || static_cast<std::size_t>(label) >= spec_.num_classes) {
            fail("label " + label_text + " outside [0, " + std::to_string(spec_.num_classes) + ")");
        }
        s.label = static_cast<int>(label);
        return s;
    }

    TaskSpec spec_;
    std::ifstream in_;
    std::size_t line_number_ = 0;
};

inline Dataset ingest_lra(const std::filesystem::path& path, const TaskSpec& spec) {
    LraReader reader(path, spec);
    Dataset out;
    while (auto s = reader.next()) out.push_back(std::move(*s));
    return out;
}

inline void export_lra(const std::filesystem::path& path, const Dataset& data, bool dual_input) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw UsageError("dataset: cannot open " + path.string() + " for writing");
    auto write_ids = [&os](const std::vector<int>& ids) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) os << ' ';
            os << ids[i];
        }
    };
    for (const auto& s : data) {
        write_ids(s.tokens);
        os << '\t';
        if (dual_input) {
            write_ids(s.tokens_b);
            os << '\t';
        }
        os << s.label << '\n';
    }
}

// ---------------------------------------------------------------------------

inline Dataset listops_dataset(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
    Dataset out;
    for (auto& s : gen_listops(spec, n, seed)) {
        SequenceSample seq;
        seq.tokens = std::move(s.tokens);
        seq.label = s.label;
        out.push_back(std::move(seq));
    }
    return out;
}

inline void validate_task(const TaskSpec& spec) {
    if (spec.dual_input && spec.kind != TaskKind::marker && spec.kind != TaskKind::file_ingest) {
        throw ConfigError(std::string("task.dual_input is not supported for kind=") + task_kind_name(spec.kind));
    }
    if (spec.kind == TaskKind::listops && spec.num_classes != listops::kNumClasses) {
        throw ConfigError("task.num_classes must be 10 for listops");
    }
    if (spec.kind == TaskKind::marker && spec.num_classes != 2) throw ConfigError("task.num_classes must be 2 for marker");
    if (spec.kind == TaskKind::file_ingest && (spec.train_path.empty() || spec.val_path.empty())) {
        throw ConfigError("task.train_path and task.val_path are required for kind=file-ingest");
    }
}

// Train and validation splits from disjoint generator streams.
inline TaskData generate_task(const TaskSpec& spec) {
    validate_task(spec);
    const std::uint64_t train_seed = detail::split_seed(spec.seed, 0);
    const std::uint64_t val_seed = detail::split_seed(spec.seed, 1);
    switch (spec.kind) {
    case TaskKind::listops:
        return {listops_dataset(spec, spec.n_train, train_seed), listops_dataset(spec, spec.n_val, val_seed)};
    case TaskKind::marker:
        return {gen_marker(spec, spec.n_train, train_seed), gen_marker(spec, spec.n_val, val_seed)};
    case TaskKind::pixel_grid:
        return {gen_pixel_grid(spec, spec.n_train, train_seed), gen_pixel_grid(spec, spec.n_val, val_seed)};
    case TaskKind::file_ingest:
        return {ingest_lra(spec.train_path, spec), ingest_lra(spec.val_path, spec)};
    }
    throw ConfigError("task: unknown kind");
}

} // namespace lunalab
