#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "NLRF" | version (1 byte) | manifest length (u64) | manifest (text)
//   | parameters (f64 each, manifest order) | CRC32 of all preceding bytes (u32)
//
// The manifest is line-oriented "key=value" text carrying the training
// config, model shape, training log, vocabulary and canonical rule source.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "nlrf/error.hpp"
#include "nlrf/io.hpp"
#include "nlrf/pipeline.hpp"
#include "nlrf/rules.hpp"

namespace nlrf::pipeline {

inline constexpr std::string_view kCheckpointMagic = "NLRF";
inline constexpr std::uint8_t kCheckpointVersion = 1;
/// magic + version byte + manifest length.
inline constexpr std::size_t kCheckpointHeaderBytes = 4 + 1 + 8;
inline constexpr std::size_t kCheckpointTrailerBytes = 4;

using io::format_double;

inline double parse_double(std::string_view s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw Error(Errc::CorruptCheckpoint, "bad number '" + std::string(s) + "'");
  return v;
}

inline std::uint64_t parse_uint(std::string_view s) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw Error(Errc::CorruptCheckpoint, "bad integer '" + std::string(s) + "'");
  return v;
}

inline std::string format_widths(const std::vector<std::size_t>& widths) {
  std::string out;
  for (auto w : widths) out += (out.empty() ? "" : ",") + std::to_string(w);
  return out;
}

inline std::vector<std::size_t> parse_widths(std::string_view s) {
  std::vector<std::size_t> out;
  while (!s.empty()) {
    auto comma = s.find(',');
    out.push_back(static_cast<std::size_t>(parse_uint(s.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

/// Ordered key/value view of a config; also used for run manifests.
inline std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& c) {
  return {
      {"epochs", std::to_string(c.epochs)},
      {"batch_size", std::to_string(c.batch_size)},
      {"dim", std::to_string(c.dim)},
      {"widths", format_widths(c.widths)},
      {"maps", std::to_string(c.maps)},
      {"dropout", format_double(c.dropout)},
      {"seed", std::to_string(c.seed)},
      {"patience", std::to_string(c.patience)},
      {"apply_rules_at_inference", c.apply_rules_at_inference ? "1" : "0"},
      {"embeddings_path", c.embeddings_path},
      {"pad_to", std::to_string(c.pad_to)},
      {"min_freq", std::to_string(c.min_freq)},
      {"dev_fraction", format_double(c.dev_fraction)},
      {"adadelta.rho", format_double(c.optimizer.rho)},
      {"adadelta.epsilon", format_double(c.optimizer.epsilon)},
      {"adadelta.max_norm", format_double(c.optimizer.max_norm)},
  };
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64(std::string_view in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<unsigned char>(in[at + i])} << (8 * i);
  return v;
}
inline std::uint32_t get_u32(std::string_view in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<unsigned char>(in[at + i])} << (8 * i);
  return v;
}

inline std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t at = 0; at < bytes.size(); at += kChunk) {
    const std::size_t n = std::min(kChunk, bytes.size() - at);
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + at), static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(crc);
}

class ManifestReader {
 public:
  explicit ManifestReader(std::string_view text) : text_(text) {}

  std::string_view line() {
    if (pos_ >= text_.size()) throw Error(Errc::CorruptCheckpoint, "manifest ends early");
    auto nl = text_.find('\n', pos_);
    if (nl == std::string_view::npos) throw Error(Errc::CorruptCheckpoint, "manifest line not terminated");
    auto l = text_.substr(pos_, nl - pos_);
    pos_ = nl + 1;
    return l;
  }

  std::string_view value(std::string_view key) {
    auto l = line();
    if (l.size() <= key.size() || l.substr(0, key.size()) != key || l[key.size()] != '=')
      throw Error(Errc::CorruptCheckpoint, "expected manifest key '" + std::string(key) + "'");
    return l.substr(key.size() + 1);
  }

  bool done() const { return pos_ == text_.size(); }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string checkpoint_manifest(const TrainedModel& model) {
  std::ostringstream m;
  for (const auto& [k, v] : config_entries(model.config)) m << "config." << k << '=' << v << '\n';
  const auto& s = model.params.shape();
  m << "shape.vocab=" << s.vocab_size << '\n'
    << "shape.dim=" << s.dim << '\n'
    << "shape.widths=" << format_widths(s.widths) << '\n'
    << "shape.maps=" << s.maps << '\n'
    << "shape.parameters=" << s.parameter_count() << '\n'
    << "best_epoch=" << model.best_epoch << '\n'
    << "log.size=" << model.log.size() << '\n';
  for (const auto& e : model.log)
    m << "log=" << e.epoch << ' ' << format_double(e.train_loss) << ' ' << format_double(e.dev_accuracy) << '\n';
  m << "vocab.size=" << model.vocab.tokens().size() << '\n';
  for (const auto& t : model.vocab.tokens()) m << "w=" << t << '\n';
  m << "rules.size=" << model.rules.size() << '\n' << rules::format_rules(model.rules);
  return m.str();
}

inline std::string serialize_model(const TrainedModel& model) {
  const std::string manifest = checkpoint_manifest(model);
  std::string out;
  out.reserve(kCheckpointHeaderBytes + manifest.size() + 8 * model.params.size() + kCheckpointTrailerBytes);
  out += kCheckpointMagic;
  out.push_back(static_cast<char>(kCheckpointVersion));
  detail::put_u64(out, manifest.size());
  out += manifest;
  for (double v : model.params.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  detail::put_u32(out, detail::crc32_of(out));
  return out;
}

inline TrainedModel deserialize_model(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() || bytes.substr(0, 4) != kCheckpointMagic)
    throw Error(Errc::IncompatibleCheckpoint, "not a checkpoint (bad magic)");
  if (bytes.size() < kCheckpointHeaderBytes + kCheckpointTrailerBytes)
    throw Error(Errc::CorruptCheckpoint, "file truncated in header");
  if (static_cast<std::uint8_t>(bytes[4]) != kCheckpointVersion)
    throw Error(Errc::IncompatibleCheckpoint,
                "unsupported checkpoint version " + std::to_string(static_cast<unsigned char>(bytes[4])));
  const std::uint64_t manifest_len = detail::get_u64(bytes, 5);
  if (manifest_len > bytes.size() - kCheckpointHeaderBytes - kCheckpointTrailerBytes)
    throw Error(Errc::CorruptCheckpoint, "file truncated in manifest");
  const std::size_t body_end = bytes.size() - kCheckpointTrailerBytes;
  if (detail::crc32_of(bytes.substr(0, body_end)) != detail::get_u32(bytes, body_end))
    throw Error(Errc::CorruptCheckpoint, "CRC mismatch (file truncated or damaged)");

  detail::ManifestReader r(bytes.substr(kCheckpointHeaderBytes, manifest_len));
  TrainedModel model;
  auto& c = model.config;
  c.epochs = parse_uint(r.value("config.epochs"));
  c.batch_size = parse_uint(r.value("config.batch_size"));
  c.dim = parse_uint(r.value("config.dim"));
  c.widths = parse_widths(r.value("config.widths"));
  c.maps = parse_uint(r.value("config.maps"));
  c.dropout = parse_double(r.value("config.dropout"));
  c.seed = parse_uint(r.value("config.seed"));
  c.patience = parse_uint(r.value("config.patience"));
  c.apply_rules_at_inference = r.value("config.apply_rules_at_inference") == "1";
  c.embeddings_path = std::string(r.value("config.embeddings_path"));
  c.pad_to = parse_uint(r.value("config.pad_to"));
  c.min_freq = parse_uint(r.value("config.min_freq"));
  c.dev_fraction = parse_double(r.value("config.dev_fraction"));
  c.optimizer.rho = parse_double(r.value("config.adadelta.rho"));
  c.optimizer.epsilon = parse_double(r.value("config.adadelta.epsilon"));
  c.optimizer.max_norm = parse_double(r.value("config.adadelta.max_norm"));

  neural::ModelShape shape;
  shape.vocab_size = parse_uint(r.value("shape.vocab"));
  shape.dim = parse_uint(r.value("shape.dim"));
  shape.widths = parse_widths(r.value("shape.widths"));
  shape.maps = parse_uint(r.value("shape.maps"));
  const std::uint64_t declared = parse_uint(r.value("shape.parameters"));
  if (declared != shape.parameter_count()) throw Error(Errc::CorruptCheckpoint, "parameter count disagrees with shape");
  model.best_epoch = parse_uint(r.value("best_epoch"));

  const std::uint64_t log_size = parse_uint(r.value("log.size"));
  for (std::uint64_t i = 0; i < log_size; ++i) {
    std::istringstream ls{std::string(r.value("log"))};
    std::string epoch, loss, acc;
    ls >> epoch >> loss >> acc;
    model.log.push_back({static_cast<std::size_t>(parse_uint(epoch)), parse_double(loss), parse_double(acc)});
  }

  const std::uint64_t vocab_size = parse_uint(r.value("vocab.size"));
  std::vector<std::string> tokens;
  tokens.reserve(vocab_size);
  for (std::uint64_t i = 0; i < vocab_size; ++i) tokens.emplace_back(r.value("w"));
  model.vocab = corpus::Vocab(std::move(tokens));
  if (model.vocab.size() != shape.vocab_size) throw Error(Errc::CorruptCheckpoint, "vocabulary size disagrees with shape");

  const std::uint64_t rule_count = parse_uint(r.value("rules.size"));
  std::string source;
  for (std::uint64_t i = 0; i < rule_count; ++i) (source += r.line()) += '\n';
  model.rules = rules::parse_rules(source);
  if (!r.done()) throw Error(Errc::CorruptCheckpoint, "trailing manifest content");

  const std::size_t params_at = kCheckpointHeaderBytes + manifest_len;
  if (body_end - params_at != 8 * shape.parameter_count())
    throw Error(Errc::CorruptCheckpoint, "parameter block has the wrong size");
  model.params = neural::ModelParams(shape);
  auto values = model.params.values();
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] = std::bit_cast<double>(detail::get_u64(bytes, params_at + 8 * i));
  return model;
}

inline void save_model(const TrainedModel& model, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_model(model));
}

inline TrainedModel load_model(const std::filesystem::path& path) {
  return deserialize_model(io::read_file(path));
}

}  // namespace nlrf::pipeline
