#pragma once

// Tokenization, datasets, vocabularies, index encoding and embedding tables.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nlrf/error.hpp"
#include "nlrf/random.hpp"

namespace nlrf::corpus {

struct Span {
  std::size_t start = 0;  // byte offset, inclusive
  std::size_t end = 0;    // byte offset, exclusive
  friend bool operator==(const Span&, const Span&) = default;
};

struct Token {
  std::string text;  // lowercased, never empty, no whitespace
  Span source_span;
  friend bool operator==(const Token&, const Token&) = default;
};

using TokenSeq = std::vector<Token>;

/// Binary sentiment label: 0 negative, 1 positive.
using Label = int;

struct Instance {
  std::size_t id = 0;
  TokenSeq tokens;
  Label label = 0;
  friend bool operator==(const Instance&, const Instance&) = default;
};

struct Dataset {
  std::string name;
  std::vector<Instance> instances;

  std::size_t size() const noexcept { return instances.size(); }
  bool empty() const noexcept { return instances.empty(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

enum class DatasetFormat { LabelText, TextLabel };

namespace detail {

inline bool is_space(char c) noexcept {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline char ascii_lower(char c) noexcept {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

inline std::string_view trim(std::string_view s) noexcept {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Lowercase + whitespace split. Spans are byte offsets into `raw_line`.
/// Case folding is ASCII-only; multi-byte UTF-8 sequences pass through.
inline TokenSeq tokenize(std::string_view raw_line) {
  TokenSeq tokens;
  std::size_t i = 0;
  while (i < raw_line.size()) {
    while (i < raw_line.size() && detail::is_space(raw_line[i])) ++i;
    const std::size_t start = i;
    while (i < raw_line.size() && !detail::is_space(raw_line[i])) ++i;
    if (i > start) {
      Token tok;
      tok.text.reserve(i - start);
      for (std::size_t k = start; k < i; ++k) tok.text.push_back(detail::ascii_lower(raw_line[k]));
      tok.source_span = {start, i};
      tokens.push_back(std::move(tok));
    }
  }
  if (tokens.empty()) throw Error(Errc::EmptyLine, "line is empty after trimming whitespace");
  return tokens;
}

/// Tokens joined with single spaces.
inline std::string join(std::span<const Token> tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t.text;
  }
  return out;
}

inline Label parse_label(std::string_view field, std::size_t line) {
  field = detail::trim(field);
  if (field == "0") return 0;
  if (field == "1") return 1;
  throw Error(Errc::ParseError, "malformed label '" + std::string(field) + "' (expected 0 or 1)", line);
}

/// Parses one example per non-blank line. In label-tab-text files an optional
/// third tab-separated column (rule provenance, as written by `extract`) is
/// accepted and ignored. Instance ids are 0-based ordinals of the examples.
inline Dataset parse_dataset(std::istream& in, DatasetFormat format, std::string name = {}) {
  Dataset ds;
  ds.name = std::move(name);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;

    std::vector<std::string_view> fields;
    std::string_view rest = line;
    for (;;) {
      auto tab = rest.find('\t');
      fields.push_back(rest.substr(0, tab));
      if (tab == std::string_view::npos) break;
      rest.remove_prefix(tab + 1);
    }
    const bool ok_arity = format == DatasetFormat::LabelText
                              ? (fields.size() == 2 || fields.size() == 3)
                              : fields.size() == 2;
    if (!ok_arity)
      throw Error(Errc::ParseError,
                  "expected exactly one tab separator, found " + std::to_string(fields.size() - 1),
                  line_no);

    const std::string_view label_field = format == DatasetFormat::LabelText ? fields[0] : fields[1];
    const std::string_view text_field = format == DatasetFormat::LabelText ? fields[1] : fields[0];

    Instance inst;
    inst.id = ds.instances.size();
    inst.label = parse_label(label_field, line_no);
    try {
      inst.tokens = tokenize(text_field);
    } catch (const Error&) {
      throw Error(Errc::ParseError, "example text is empty", line_no);
    }
    // Spans refer to the raw line, not the text field.
    const std::size_t field_offset = static_cast<std::size_t>(text_field.data() - line.data());
    for (auto& t : inst.tokens) {
      t.source_span.start += field_offset;
      t.source_span.end += field_offset;
    }
    ds.instances.push_back(std::move(inst));
  }
  if (ds.instances.empty()) throw Error(Errc::EmptyDataset, "no examples in '" + ds.name + "'");
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path,
                            DatasetFormat format = DatasetFormat::LabelText) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open dataset '" + path.string() + "'");
  return parse_dataset(in, format, path.stem().string());
}

/// Token -> index map. Index 0 is PAD and 1 is UNK; neither has a surface
/// form, so no token text can ever map to them.
class Vocab {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kReserved = 2;

  Vocab() = default;

  /// Real tokens in index order (index = position + 2). Duplicates are rejected.
  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    index_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].empty()) throw Error(Errc::FormatError, "empty vocabulary entry");
      if (!index_.emplace(tokens_[i], i + kReserved).second)
        throw Error(Errc::FormatError, "duplicate vocabulary entry '" + tokens_[i] + "'");
    }
  }

  std::size_t size() const noexcept { return tokens_.size() + kReserved; }

  std::size_t index_of(std::string_view text) const {
    auto it = index_.find(std::string(text));
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view text) const { return index_.count(std::string(text)) != 0; }

  /// Surface form of index i; reserved slots render as <pad>/<unk>.
  std::string_view token_at(std::size_t i) const {
    if (i == kPad) return "<pad>";
    if (i == kUnk) return "<unk>";
    return tokens_.at(i - kReserved);
  }

  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Tokens with frequency >= min_freq, ordered by (frequency desc, text asc).
inline Vocab build_vocab(std::span<const Instance> instances, std::size_t min_freq = 1) {
  if (min_freq == 0) throw Error(Errc::InvalidConfig, "min_freq must be positive");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& inst : instances)
    for (const auto& t : inst.tokens) ++counts[t.text];

  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [text, n] : counts)
    if (n >= min_freq) kept.emplace_back(text, n);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });

  std::vector<std::string> tokens;
  tokens.reserve(kept.size());
  for (auto& [text, n] : kept) tokens.push_back(std::move(text));
  return Vocab(std::move(tokens));
}

inline Vocab build_vocab(const Dataset& dataset, std::size_t min_freq = 1) {
  return build_vocab(std::span<const Instance>(dataset.instances), min_freq);
}

struct EncodedInstance {
  std::vector<std::uint32_t> indices;  // right-padded with PAD
  std::size_t length = 0;              // token count before padding
  Label label = 0;
  friend bool operator==(const EncodedInstance&, const EncodedInstance&) = default;
};

inline EncodedInstance encode(std::span<const Token> tokens, Label label, const Vocab& vocab,
                              std::size_t pad_to) {
  if (pad_to == 0) throw Error(Errc::InvalidConfig, "pad_to must be positive");
  EncodedInstance enc;
  enc.length = tokens.size();
  enc.label = label;
  enc.indices.assign(std::max(pad_to, tokens.size()), static_cast<std::uint32_t>(Vocab::kPad));
  for (std::size_t i = 0; i < tokens.size(); ++i)
    enc.indices[i] = static_cast<std::uint32_t>(vocab.index_of(tokens[i].text));
  return enc;
}

inline EncodedInstance encode(const Instance& instance, const Vocab& vocab, std::size_t pad_to) {
  return encode(instance.tokens, instance.label, vocab, pad_to);
}

/// |V| x dim row-major matrix of word vectors.
struct EmbeddingTable {
  std::size_t dim = 0;
  std::vector<double> matrix;
  /// Rows whose values came from the embedding file (for diagnostics).
  std::size_t rows_from_file = 0;

  std::size_t rows() const noexcept { return dim ? matrix.size() / dim : 0; }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(matrix).subspan(i * dim, dim);
  }
};

inline constexpr double kInitRange = 0.25;

/// Embedding table with every non-PAD row drawn from uniform(-0.25, 0.25).
inline EmbeddingTable random_embeddings(std::size_t vocab_size, std::size_t dim, Rng& rng) {
  EmbeddingTable table;
  table.dim = dim;
  table.matrix.assign(vocab_size * dim, 0.0);
  for (std::size_t r = 1; r < vocab_size; ++r)
    for (std::size_t c = 0; c < dim; ++c) table.matrix[r * dim + c] = rng.uniform(-kInitRange, kInitRange);
  return table;
}

/// Reads word2vec text format ("count dim" header, then "word v1 ... v_dim").
/// Vocab rows found in the file are copied; the rest keep their seeded random
/// initialization; the PAD row is zero. File words are lowercased and the
/// first occurrence of a word wins.
inline EmbeddingTable parse_embeddings(std::istream& in, const Vocab& vocab, std::uint64_t seed) {
  std::string line;
  std::size_t line_no = 0;
  std::size_t count = 0, dim = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty()) break;
  }
  {
    std::istringstream header(line);
    std::string extra;
    if (!(header >> count >> dim) || (header >> extra) || dim == 0)
      throw Error(Errc::FormatError, "expected header 'count dim'", line_no);
  }

  Rng rng = Rng::derive(seed, {0x656d62ULL});
  EmbeddingTable table = random_embeddings(vocab.size(), dim, rng);
  std::vector<bool> filled(vocab.size(), false);

  std::size_t rows = 0;
  std::vector<double> values(dim);
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    ++rows;
    std::istringstream row(line);
    std::string word;
    row >> word;
    std::size_t n = 0;
    std::string field;
    while (row >> field) {
      if (n == dim) {
        ++n;
        break;
      }
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc() || ptr != field.data() + field.size() || !std::isfinite(v))
        throw Error(Errc::FormatError, "bad value '" + field + "'", line_no);
      values[n++] = v;
    }
    if (n != dim)
      throw Error(Errc::FormatError,
                  "row has " + std::string(n > dim ? "more than " : "") + std::to_string(n) +
                      " values, header declares " + std::to_string(dim),
                  line_no);
    for (auto& c : word) c = detail::ascii_lower(c);
    const std::size_t idx = vocab.index_of(word);
    if (idx == Vocab::kUnk || filled[idx]) continue;
    std::copy(values.begin(), values.end(), table.matrix.begin() + static_cast<std::ptrdiff_t>(idx * dim));
    filled[idx] = true;
    ++table.rows_from_file;
  }
  if (rows != count)
    throw Error(Errc::FormatError,
                "header declares " + std::to_string(count) + " rows, file has " + std::to_string(rows),
                line_no);
  std::fill_n(table.matrix.begin(), dim, 0.0);
  return table;
}

inline EmbeddingTable load_embeddings(const std::filesystem::path& path, const Vocab& vocab,
                                      std::uint64_t seed) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open embeddings '" + path.string() + "'");
  return parse_embeddings(in, vocab, seed);
}

}  // namespace nlrf::corpus
