#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "uformer/model.hpp"
#include "uformer/train.hpp"

namespace uformer {

// Checkpoint layout (little-endian): "UFCK", u32 version, u32 length + config
// text, u64 optimizer step, u32 tensor count, then per tensor a u32 name
// length, the UTF-8 name and one UFT1 tensor. Optimizer moments are stored as
// "adam.m/<param>" and "adam.v/<param>".

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  std::string config_text;
  std::int64_t step = 0;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
};

/// Written to a temporary file and renamed into place.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::string& config_text, const UformerParams<T>& model,
                     const OptimizerState<T>* optimizer = nullptr);

/// Only the stored config text; no tensors are read.
std::string read_checkpoint_config(const std::filesystem::path& path);

template <typename T>
Checkpoint<T> read_checkpoint(const std::filesystem::path& path);

/// Copies stored values into `model` (and `optimizer` when non-null). Every
/// expected name must be present exactly once with a matching shape, and no
/// unknown names may remain.
template <typename T>
void restore(const Checkpoint<T>& ckpt, UformerParams<T>& model, OptimizerState<T>* optimizer = nullptr);

}  // namespace uformer
