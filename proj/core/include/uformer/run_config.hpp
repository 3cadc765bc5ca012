#pragma once

#include <filesystem>
#include <string>

#include "uformer/model.hpp"
#include "uformer/train.hpp"

namespace uformer {

struct RunPaths {
  std::string data;        // training/eval pairs; empty means synthetic data
  std::string checkpoint;  // checkpoint to write (train) or read (eval, infer)
  std::string out;         // output directory for logs and reports

  bool operator==(const RunPaths&) const = default;
};

/// Everything one command needs. Text form: `key = value` lines, `#`
/// comments, dotted keys (model.*, train.*, paths.*, run.*).
struct RunConfig {
  UformerConfig model;
  TrainConfig train;
  RunPaths paths;
  bool deterministic = false;
  bool f64 = false;

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

/// Throws ConfigError naming the line for unknown keys, duplicates and
/// malformed values. Keys not mentioned keep their defaults.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Every key, in a fixed order; parse_run_config(serialize(c)) == c.
std::string serialize(const RunConfig& config);

}  // namespace uformer
