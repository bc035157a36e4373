#pragma once

// Rule DSL, groundings, and compiled feature-extracting functions.
//
//   program   := { rule_stmt } ;
//   rule_stmt := "rule" IDENT [ "(" "confidence" NUMBER ")" ] ":" matcher "keep" region ";" ;
//   matcher   := "on" "token" STRING ;
//   region    := "after" | "before" ;
//
// Comments run from '#' to end of line. Default confidence is 1.0.

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nlrf/corpus.hpp"
#include "nlrf/error.hpp"

namespace nlrf::rules {

using corpus::Dataset;
using corpus::Instance;
using corpus::Token;
using corpus::TokenSeq;

enum class Region { After, Before };

struct Rule {
  std::string name;
  double confidence = 1.0;
  std::string pivot;  // single lowercase token
  Region region = Region::After;
  friend bool operator==(const Rule&, const Rule&) = default;
};

struct RuleSet {
  std::vector<Rule> rules;

  std::size_t size() const noexcept { return rules.size(); }
  bool empty() const noexcept { return rules.empty(); }
  friend bool operator==(const RuleSet&, const RuleSet&) = default;
};

inline constexpr std::string_view kAButBSource =
    "rule a_but_b (confidence 1.0): on token \"but\" keep after;\n";

namespace detail {

enum class Tok { Ident, String, Number, LParen, RParen, Colon, Semicolon, End };

inline std::string_view describe(Tok t) {
  switch (t) {
    case Tok::Ident: return "identifier";
    case Tok::String: return "string";
    case Tok::Number: return "number";
    case Tok::LParen: return "'('";
    case Tok::RParen: return "')'";
    case Tok::Colon: return "':'";
    case Tok::Semicolon: return "';'";
    case Tok::End: return "end of input";
  }
  return "?";
}

struct Lexeme {
  Tok kind = Tok::End;
  std::string text;  // identifier / decoded string / number literal
  std::size_t line = 1;
  std::size_t column = 1;
};

class Lexer {
 public:
  explicit Lexer(std::string_view src) : src_(src) {}

  Lexeme next() {
    skip_trivia();
    Lexeme lx;
    lx.line = line_;
    lx.column = col_;
    if (pos_ >= src_.size()) return lx;

    const char c = src_[pos_];
    auto single = [&](Tok k) {
      advance();
      lx.kind = k;
      lx.text = std::string(1, c);
      return lx;
    };
    switch (c) {
      case '(': return single(Tok::LParen);
      case ')': return single(Tok::RParen);
      case ':': return single(Tok::Colon);
      case ';': return single(Tok::Semicolon);
      case '"': return string_literal(lx);
      default: break;
    }
    if (is_ident_start(c)) {
      lx.kind = Tok::Ident;
      while (pos_ < src_.size() && is_ident_char(src_[pos_])) lx.text.push_back(advance());
      return lx;
    }
    if (is_digit(c) || c == '.') {
      lx.kind = Tok::Number;
      while (pos_ < src_.size() && (is_digit(src_[pos_]) || src_[pos_] == '.')) lx.text.push_back(advance());
      return lx;
    }
    throw Error(Errc::ParseError, "unexpected character '" + std::string(1, c) + "'", lx.line, lx.column);
  }

 private:
  static bool is_digit(char c) { return c >= '0' && c <= '9'; }
  static bool is_ident_start(char c) { return (c >= 'a' && c <= 'z') || c == '_'; }
  static bool is_ident_char(char c) { return is_ident_start(c) || is_digit(c); }

  char advance() {
    const char c = src_[pos_++];
    if (c == '\n') {
      ++line_;
      col_ = 1;
    } else {
      ++col_;
    }
    return c;
  }

  void skip_trivia() {
    while (pos_ < src_.size()) {
      const char c = src_[pos_];
      if (c == '#') {
        while (pos_ < src_.size() && src_[pos_] != '\n') advance();
      } else if (corpus::detail::is_space(c)) {
        advance();
      } else {
        break;
      }
    }
  }

  Lexeme string_literal(Lexeme lx) {
    advance();  // opening quote
    lx.kind = Tok::String;
    for (;;) {
      if (pos_ >= src_.size() || src_[pos_] == '\n')
        throw Error(Errc::ParseError, "unterminated string literal", lx.line, lx.column);
      char c = advance();
      if (c == '"') break;
      if (c == '\\') {
        if (pos_ >= src_.size()) throw Error(Errc::ParseError, "unterminated string literal", lx.line, lx.column);
        c = advance();
        if (c != '"' && c != '\\')
          throw Error(Errc::ParseError, "unknown escape '\\" + std::string(1, c) + "'", line_, col_ - 1);
      }
      lx.text.push_back(c);
    }
    return lx;
  }

  std::string_view src_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
  std::size_t col_ = 1;
};

class Parser {
 public:
  explicit Parser(std::string_view src) : lexer_(src) { look_ = lexer_.next(); }

  RuleSet program() {
    RuleSet set;
    std::unordered_set<std::string> names;
    while (look_.kind != Tok::End) {
      const Lexeme at = look_;
      Rule r = rule_stmt();
      if (!names.insert(r.name).second)
        throw Error(Errc::DuplicateRule, "rule '" + r.name + "' is already defined", at.line, at.column);
      set.rules.push_back(std::move(r));
    }
    return set;
  }

 private:
  [[noreturn]] void fail(std::string_view expected) const {
    std::string found = look_.kind == Tok::End ? std::string(describe(Tok::End))
                                               : "'" + look_.text + "'";
    throw Error(Errc::ParseError, "expected " + std::string(expected) + " but found " + found, look_.line,
                look_.column);
  }

  Lexeme expect(Tok kind) {
    if (look_.kind != kind) fail(describe(kind));
    Lexeme lx = std::move(look_);
    look_ = lexer_.next();
    return lx;
  }

  void keyword(std::string_view kw) {
    if (look_.kind != Tok::Ident || look_.text != kw) fail("'" + std::string(kw) + "'");
    look_ = lexer_.next();
  }

  Rule rule_stmt() {
    Rule r;
    keyword("rule");
    r.name = expect(Tok::Ident).text;
    if (look_.kind == Tok::LParen) {
      look_ = lexer_.next();
      keyword("confidence");
      const Lexeme num = expect(Tok::Number);
      r.confidence = parse_confidence(num);
      expect(Tok::RParen);
    }
    expect(Tok::Colon);
    keyword("on");
    keyword("token");
    const Lexeme pivot = expect(Tok::String);
    if (pivot.text.empty()) throw Error(Errc::ParseError, "pivot token is empty", pivot.line, pivot.column);
    for (char c : pivot.text) {
      if (corpus::detail::is_space(c))
        throw Error(Errc::ParseError, "pivot must be a single token", pivot.line, pivot.column);
      if (c >= 'A' && c <= 'Z')
        throw Error(Errc::ParseError, "pivot must be lowercase", pivot.line, pivot.column);
    }
    r.pivot = pivot.text;
    keyword("keep");
    if (look_.kind == Tok::Ident && look_.text == "after") {
      r.region = Region::After;
    } else if (look_.kind == Tok::Ident && look_.text == "before") {
      r.region = Region::Before;
    } else {
      fail("'after' or 'before'");
    }
    look_ = lexer_.next();
    expect(Tok::Semicolon);
    return r;
  }

  static double parse_confidence(const Lexeme& num) {
    double v = 0.0;
    const char* first = num.text.data();
    const char* last = first + num.text.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || num.text.front() == '.' || num.text.back() == '.')
      throw Error(Errc::ParseError, "malformed number '" + num.text + "'", num.line, num.column);
    if (!(v > 0.0 && v <= 1.0))
      throw Error(Errc::ConfidenceRange, "confidence " + num.text + " is outside (0, 1]", num.line,
                  num.column);
    return v;
  }

  Lexer lexer_;
  Lexeme look_;
};

}  // namespace detail

inline RuleSet parse_rules(std::string_view source) { return detail::Parser(source).program(); }

/// Canonical DSL text; parse_rules(format_rules(s)) == s.
inline std::string format_rules(const RuleSet& set) {
  std::string out;
  for (const auto& r : set.rules) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, r.confidence);
    std::string conf(buf, ptr);
    if (conf.find_first_of(".e") == std::string::npos) conf += ".0";
    std::string pivot;
    for (char c : r.pivot) {
      if (c == '"' || c == '\\') pivot.push_back('\\');
      pivot.push_back(c);
    }
    out += "rule " + r.name + " (confidence " + conf + "): on token \"" + pivot + "\" keep " +
           (r.region == Region::After ? "after" : "before") + ";\n";
  }
  return out;
}

/// Match sites of one rule on one instance.
struct Grounding {
  std::string rule;
  std::size_t instance_id = 0;
  std::vector<std::size_t> positions;  // strictly increasing token indices

  bool fired() const noexcept { return !positions.empty(); }
};

inline std::vector<std::size_t> match_positions(const Rule& rule, std::span<const Token> tokens) {
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i].text == rule.pivot) pos.push_back(i);
  return pos;
}

inline Grounding ground(const Rule& rule, const Instance& instance) {
  return {rule.name, instance.id, match_positions(rule, instance.tokens)};
}

struct TransformedInstance {
  std::size_t id = 0;
  TokenSeq tokens;
  corpus::Label label = 0;
  std::vector<std::string> fired_rules;  // in application order
  friend bool operator==(const TransformedInstance&, const TransformedInstance&) = default;
};

inline TransformedInstance lift(const Instance& inst) { return {inst.id, inst.tokens, inst.label, {}}; }
inline Instance lower(const TransformedInstance& t) { return {t.id, t.tokens, t.label}; }

/// Compiled form of one rule: splits at the first pivot occurrence and keeps
/// one side. An empty kept side leaves the input untouched.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(Rule rule) : rule_(std::move(rule)) {}

  const Rule& rule() const noexcept { return rule_; }

  /// Extracted tokens, or nullopt when the rule does not apply.
  std::optional<TokenSeq> extract(std::span<const Token> tokens) const {
    auto it = std::find_if(tokens.begin(), tokens.end(), [&](const Token& t) { return t.text == rule_.pivot; });
    if (it == tokens.end()) return std::nullopt;
    TokenSeq kept = rule_.region == Region::After ? TokenSeq(it + 1, tokens.end()) : TokenSeq(tokens.begin(), it);
    if (kept.empty()) return std::nullopt;
    return kept;
  }

  TransformedInstance operator()(TransformedInstance in) const {
    if (auto kept = extract(in.tokens)) {
      in.tokens = std::move(*kept);
      in.fired_rules.push_back(rule_.name);
    }
    return in;
  }

 private:
  Rule rule_;
};

/// Extractors in source order; each consumes the previous one's output.
class ExtractorChain {
 public:
  ExtractorChain() = default;
  explicit ExtractorChain(std::vector<FeatureExtractor> extractors) : extractors_(std::move(extractors)) {}

  std::size_t size() const noexcept { return extractors_.size(); }
  bool empty() const noexcept { return extractors_.empty(); }
  const std::vector<FeatureExtractor>& extractors() const noexcept { return extractors_; }

  TransformedInstance operator()(const Instance& inst) const {
    TransformedInstance t = lift(inst);
    for (const auto& f : extractors_) t = f(std::move(t));
    return t;
  }

 private:
  std::vector<FeatureExtractor> extractors_;
};

/// Only confidence 1 has a defined data-level meaning; anything else is rejected.
inline ExtractorChain compile(const RuleSet& set) {
  std::vector<FeatureExtractor> out;
  out.reserve(set.size());
  for (const auto& r : set.rules) {
    if (r.confidence != 1.0)
      throw Error(Errc::UnsupportedConfidence,
                  "rule '" + r.name + "' has confidence " + std::to_string(r.confidence) +
                      "; only 1.0 is executable");
    out.emplace_back(r);
  }
  return ExtractorChain(std::move(out));
}

inline TransformedInstance apply_one(const FeatureExtractor& extractor, const Instance& instance) {
  return extractor(lift(instance));
}

/// Element-wise chain application. Work may be split over `workers` threads;
/// output order always equals input order.
inline std::vector<TransformedInstance> apply_batch(const ExtractorChain& chain, std::span<const Instance> batch,
                                                    unsigned workers = 1) {
  std::vector<TransformedInstance> out(batch.size());
  auto run = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) out[i] = chain(batch[i]);
  };
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(batch.size())));
  if (workers <= 1) {
    run(0, batch.size());
    return out;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (batch.size() + workers - 1) / workers;
  for (std::size_t lo = 0; lo < batch.size(); lo += chunk)
    pool.emplace_back(run, lo, std::min(batch.size(), lo + chunk));
  pool.clear();
  return out;
}

inline std::vector<TransformedInstance> apply_batch(const ExtractorChain& chain, const Dataset& batch,
                                                    unsigned workers = 1) {
  return apply_batch(chain, std::span<const Instance>(batch.instances), workers);
}

/// D* as a plain dataset (provenance dropped).
inline Dataset transform_dataset(const ExtractorChain& chain, const Dataset& ds) {
  Dataset out;
  out.name = ds.name;
  out.instances.reserve(ds.size());
  for (const auto& t : apply_batch(chain, ds)) out.instances.push_back(lower(t));
  return out;
}

/// True when any rule has at least one grounding on the instance.
inline bool any_grounds(const RuleSet& set, const Instance& inst) {
  return std::any_of(set.rules.begin(), set.rules.end(),
                     [&](const Rule& r) { return !match_positions(r, inst.tokens).empty(); });
}

}  // namespace nlrf::rules
