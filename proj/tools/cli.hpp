#pragma once

// `nlrf` command-line frontend. Exit codes: 0 success, 1 runtime/data
// failure, 2 usage error. Every file output gets a PATH.manifest sibling.

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "CLI11.hpp"
#include "nlrf/nlrf.hpp"

namespace nlrf::cli {

inline constexpr std::string_view kToolVersion = "0.1.0";

namespace detail {

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error(Errc::Io, "sha256 failed");
  std::ostringstream s;
  for (unsigned i = 0; i < len; ++i) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return s.str();
}

/// Record of one invocation: enough to re-create any of its outputs.
class RunManifest {
 public:
  explicit RunManifest(std::string subcommand) : subcommand_(std::move(subcommand)) {}

  void set(const std::string& key, const std::string& value) { entries_.emplace_back(key, value); }

  void config(const pipeline::TrainConfig& c) {
    for (const auto& [k, v] : pipeline::config_entries(c)) set("config." + k, v);
  }

  void input(const std::string& role, const std::filesystem::path& path) {
    set("input." + role + ".path", path.string());
    set("input." + role + ".sha256", sha256_hex(io::read_file(path)));
  }

  std::string text() const {
    std::ostringstream s;
    s << "tool=nlrf\nversion=" << kToolVersion << "\nsubcommand=" << subcommand_ << '\n';
    for (const auto& [k, v] : entries_) s << k << '=' << v << '\n';
    return s.str();
  }

 private:
  std::string subcommand_;
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Writes `bytes` to `path` and the manifest to `path.manifest`, both atomically.
inline void emit(const std::filesystem::path& path, const std::string& bytes, const RunManifest& manifest) {
  io::write_file_atomic(path, bytes);
  std::filesystem::path m = path;
  m += ".manifest";
  io::write_file_atomic(m, manifest.text());
}

struct Common {
  std::string format = "label-text";
  corpus::DatasetFormat dataset_format() const {
    return format == "text-label" ? corpus::DatasetFormat::TextLabel : corpus::DatasetFormat::LabelText;
  }
};

inline void add_format_flag(CLI::App* cmd, Common& common) {
  cmd->add_option("--format", common.format, "Dataset layout: label-text (label<TAB>text) or text-label")
      ->check(CLI::IsMember({"label-text", "text-label"}))
      ->capture_default_str();
}

inline void add_train_flags(CLI::App* cmd, pipeline::TrainConfig& c, bool& no_infer_rules) {
  cmd->add_option("--seed", c.seed, "Seed for every random choice")->capture_default_str();
  cmd->add_option("--epochs", c.epochs, "Maximum training epochs")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--batch-size", c.batch_size, "Mini-batch size")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--dim", c.dim, "Embedding width")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--widths", c.widths, "Convolution filter widths")->delimiter(',')->capture_default_str();
  cmd->add_option("--maps", c.maps, "Feature maps per filter width")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--dropout", c.dropout, "Dropout rate on pooled features")
      ->check(CLI::Range(0.0, 0.999999))
      ->capture_default_str();
  cmd->add_option("--patience", c.patience, "Epochs without dev improvement before stopping")->capture_default_str();
  cmd->add_option("--dev-fraction", c.dev_fraction, "Training share carved out as dev when no dev set is given")
      ->check(CLI::Range(0.0, 0.999999))
      ->capture_default_str();
  cmd->add_option("--min-freq", c.min_freq, "Minimum token frequency for the vocabulary")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--embeddings", c.embeddings_path, "word2vec text-format embeddings (dimension must match --dim)")
      ->check(CLI::ExistingFile);
  cmd->add_flag("--no-infer-rules", no_infer_rules, "Do not apply the rules at inference time");
}

inline rules::RuleSet load_rules(const std::string& path) {
  if (path.empty()) return {};
  return rules::parse_rules(io::read_file(path));
}

inline std::string metrics_table(const std::vector<std::pair<std::string, eval::Metrics>>& rows) {
  std::ostringstream s;
  eval::write_metric_table(s, rows);
  return s.str();
}

}  // namespace detail

/// Parses and executes one invocation.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  using namespace detail;

  CLI::App app{"Feature-extracting rule functions for CNN sentence classification", "nlrf"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  Common common;
  pipeline::TrainConfig cfg;
  bool no_infer_rules = false;
  std::string train_path, dev_path, rules_path, out_path, model_path, test_path, data_path, report_path, table_path,
      matches_path;
  bool subset = false, stratified = false;
  std::size_t k = 10;
  unsigned workers = 1;

  auto* train_cmd = app.add_subcommand("train", "Train a model (rules applied to every mini-batch)");
  train_cmd->add_option("--train", train_path, "Training data")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--dev", dev_path, "Dev data for early stopping (default: carve --dev-fraction)")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--rules", rules_path, "Rule DSL file (omit for the plain CNN baseline)")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--out", out_path, "Checkpoint path; the log goes to OUT.log")->required();
  add_format_flag(train_cmd, common);
  add_train_flags(train_cmd, cfg, no_infer_rules);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on labelled data");
  eval_cmd->add_option("--model", model_path, "Checkpoint")->required();
  eval_cmd->add_option("--test", test_path, "Test data")->required()->check(CLI::ExistingFile);
  eval_cmd->add_flag("--subset", subset, "Also report metrics on instances where a rule grounds");
  eval_cmd->add_option("--rules", rules_path, "Rules defining the subset (default: the model's, else a_but_b)")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--report", report_path, "Machine-readable key=value report");
  eval_cmd->add_option("--table", table_path, "Tab-separated metric table");
  add_format_flag(eval_cmd, common);

  auto* extract_cmd = app.add_subcommand("extract", "Write D* (rule-transformed data) with provenance");
  extract_cmd->add_option("--data", data_path, "Input data")->required()->check(CLI::ExistingFile);
  extract_cmd->add_option("--rules", rules_path, "Rule DSL file")->required()->check(CLI::ExistingFile);
  extract_cmd->add_option("--out", out_path, "Output path (default: standard output)");
  add_format_flag(extract_cmd, common);

  auto* stats_cmd = app.add_subcommand("rules-stats", "Count instances on which each rule grounds");
  stats_cmd->add_option("--data", data_path, "Input data")->required()->check(CLI::ExistingFile);
  stats_cmd->add_option("--rules", rules_path, "Rule DSL file (default: a_but_b)")->check(CLI::ExistingFile);
  stats_cmd->add_option("--report", report_path, "Machine-readable key=value report");
  stats_cmd->add_option("--matches", matches_path, "Write matching lines (id<TAB>label<TAB>text) here");
  add_format_flag(stats_cmd, common);

  auto add_cv_flags = [&](CLI::App* cmd) {
    cmd->add_option("--data", data_path, "Input data")->required()->check(CLI::ExistingFile);
    cmd->add_option("--rules", rules_path, "Rule DSL file (omit for no rules)")->check(CLI::ExistingFile);
    cmd->add_option("--k", k, "Number of folds")->check(CLI::Range(2, 1000))->capture_default_str();
    cmd->add_flag("--stratified", stratified, "Class-stratified fold assignment");
    cmd->add_option("--workers", workers, "Folds trained in parallel (results do not depend on this)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd->add_option("--report", report_path, "Machine-readable key=value report");
    cmd->add_option("--table", table_path, "Tab-separated table");
    add_format_flag(cmd, common);
    add_train_flags(cmd, cfg, no_infer_rules);
  };
  auto* cv_cmd = app.add_subcommand("cv", "k-fold cross-validation with 95% confidence intervals");
  add_cv_flags(cv_cmd);
  auto* gd_cmd = app.add_subcommand("gaindrop", "Metric deltas between training with and without the rules");
  add_cv_flags(gd_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  cfg.apply_rules_at_inference = !no_infer_rules;

  try {
    if (*train_cmd) {
      const auto train_ds = corpus::load_dataset(train_path, common.dataset_format());
      corpus::Dataset tr = train_ds, dev;
      if (!dev_path.empty()) {
        dev = corpus::load_dataset(dev_path, common.dataset_format());
      } else if (cfg.dev_fraction > 0.0) {
        std::tie(tr, dev) = pipeline::split_dev(train_ds, cfg.dev_fraction, cfg.seed);
      }
      const auto ruleset = load_rules(rules_path);
      const auto model = pipeline::train(cfg, tr, dev, ruleset, [&](const pipeline::EpochLog& e) {
        out << "epoch " << e.epoch << "\ttrain_loss " << io::format_double(e.train_loss) << "\tdev_accuracy "
            << io::format_double(e.dev_accuracy) << '\n';
      });

      RunManifest manifest("train");
      manifest.config(cfg);
      manifest.input("train", train_path);
      if (!dev_path.empty()) manifest.input("dev", dev_path);
      if (!rules_path.empty()) manifest.input("rules", rules_path);
      if (!cfg.embeddings_path.empty()) manifest.input("embeddings", cfg.embeddings_path);
      manifest.set("seed", std::to_string(cfg.seed));

      std::ostringstream log;
      log << "epoch\ttrain_loss\tdev_accuracy\n";
      for (const auto& e : model.log)
        log << e.epoch << '\t' << io::format_double(e.train_loss) << '\t' << io::format_double(e.dev_accuracy) << '\n';
      log << "# best_epoch=" << model.best_epoch << '\n';
      emit(out_path, pipeline::serialize_model(model), manifest);
      emit(out_path + ".log", log.str(), manifest);
      out << "best epoch " << model.best_epoch << ", vocabulary " << model.vocab.size() << ", rules "
          << model.rules.size() << "\nwrote " << out_path << '\n';
      return 0;
    }

    if (*eval_cmd) {
      const auto model = pipeline::load_model(model_path);
      const auto test = corpus::load_dataset(test_path, common.dataset_format());
      const auto pred = pipeline::predict(model, test);
      std::vector<std::pair<std::string, eval::Metrics>> rows;
      rows.emplace_back("whole", eval::metrics(eval::confusion(pred.labels, eval::gold_labels(test.instances))));
      rules::RuleSet subset_rules;
      if (subset) {
        subset_rules = !rules_path.empty()      ? load_rules(rules_path)
                       : !model.rules.empty()   ? model.rules
                                                : rules::parse_rules(rules::kAButBSource);
        rows.emplace_back("subset", eval::subset_eval(model, test, subset_rules));
      }
      const std::string table = metrics_table(rows);

      RunManifest manifest("eval");
      manifest.input("model", model_path);
      manifest.input("test", test_path);
      if (!rules_path.empty()) manifest.input("rules", rules_path);
      manifest.set("subset", subset ? "1" : "0");
      std::ostringstream kv;
      kv << "n=" << test.size() << '\n';
      for (const auto& [name, m] : rows) eval::write_kv(kv, name, m);
      if (!report_path.empty()) emit(report_path, kv.str(), manifest);
      if (!table_path.empty()) emit(table_path, table, manifest);
      out << table;
      return 0;
    }

    if (*extract_cmd) {
      const auto data = corpus::load_dataset(data_path, common.dataset_format());
      const auto chain = rules::compile(load_rules(rules_path));
      std::ostringstream s;
      for (const auto& t : rules::apply_batch(chain, data)) {
        s << t.label << '\t' << corpus::join(t.tokens);
        if (!t.fired_rules.empty()) {
          s << '\t';
          for (std::size_t i = 0; i < t.fired_rules.size(); ++i) s << (i ? "," : "") << t.fired_rules[i];
        }
        s << '\n';
      }
      if (out_path.empty()) {
        out << s.str();
      } else {
        RunManifest manifest("extract");
        manifest.input("data", data_path);
        manifest.input("rules", rules_path);
        emit(out_path, s.str(), manifest);
      }
      return 0;
    }

    if (*stats_cmd) {
      const auto data = corpus::load_dataset(data_path, common.dataset_format());
      const auto ruleset = rules_path.empty() ? rules::parse_rules(rules::kAButBSource) : load_rules(rules_path);
      std::ostringstream table, kv;
      for (const auto& st : eval::rule_stats(data, ruleset)) {
        table << st.rule << ' ' << st.matched << '/' << st.total << '\n';
        kv << st.rule << ".matched=" << st.matched << '\n' << st.rule << ".total=" << st.total << '\n';
      }
      RunManifest manifest("rules-stats");
      manifest.input("data", data_path);
      if (!rules_path.empty()) manifest.input("rules", rules_path);
      if (!report_path.empty()) emit(report_path, kv.str(), manifest);
      if (!matches_path.empty()) {
        std::ostringstream m;
        for (const auto& inst : eval::rule_subset(data.instances, ruleset))
          m << inst.id << '\t' << inst.label << '\t' << corpus::join(inst.tokens) << '\n';
        emit(matches_path, m.str(), manifest);
      }
      out << table.str();
      return 0;
    }

    if (*cv_cmd || *gd_cmd) {
      const auto data = corpus::load_dataset(data_path, common.dataset_format());
      const auto ruleset = load_rules(rules_path);
      const eval::CvOptions options{stratified, workers};
      RunManifest manifest(*cv_cmd ? "cv" : "gaindrop");
      manifest.config(cfg);
      manifest.input("data", data_path);
      if (!rules_path.empty()) manifest.input("rules", rules_path);
      manifest.set("k", std::to_string(k));
      manifest.set("stratified", stratified ? "1" : "0");
      manifest.set("seed", std::to_string(cfg.seed));

      std::ostringstream table, kv;
      if (*cv_cmd) {
        const auto rep = eval::cross_validate(cfg, data, ruleset, k, options);
        table << "# whole test folds\n";
        eval::write_cv_table(table, rep, false);
        if (!ruleset.empty()) {
          table << "# rule subset\n";
          eval::write_cv_table(table, rep, true);
        }
        eval::write_kv(kv, "cv", rep);
      } else {
        const auto rep = eval::gain_drop(cfg, data, ruleset, k, options);
        eval::write_delta_table(table, rep.whole, rep.subset);
        eval::write_kv(kv, "gaindrop", rep);
      }
      if (!report_path.empty()) emit(report_path, kv.str(), manifest);
      if (!table_path.empty()) emit(table_path, table.str(), manifest);
      out << table.str();
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace nlrf::cli
