#include "uformer/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "uformer/error.hpp"
#include "uformer/tensor_io.hpp"

namespace uformer {

namespace {

constexpr char kMagic[4] = {'U', 'F', 'C', 'K'};

void write_string(std::ostream& out, const std::string& s) {
  io::write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in, std::uint32_t limit) {
  const auto n = io::read_u32(in);
  if (n > limit) throw FormatError("checkpoint string length " + std::to_string(n) + " is implausible");
  std::string s(n, '\0');
  io::read_exact(in, s.data(), n);
  return s;
}

template <typename T>
Tensor<T> moment_tensor(const Tensor<T>& like, const std::vector<T>& values) {
  return Tensor<T>(like.shape(), values);
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::string& config_text, const UformerParams<T>& model,
                     const OptimizerState<T>* optimizer) {
  const auto params = model.parameters();
  std::vector<std::pair<std::string, Tensor<T>>> entries;
  for (const auto& p : params) entries.emplace_back(p.name, p.tensor);
  if (optimizer) {
    if (optimizer->m.size() != params.size()) throw UsageError("optimizer state does not match the model");
    for (std::size_t i = 0; i < params.size(); ++i)
      entries.emplace_back("adam.m/" + params[i].name, moment_tensor(params[i].tensor, optimizer->m[i]));
    for (std::size_t i = 0; i < params.size(); ++i)
      entries.emplace_back("adam.v/" + params[i].name, moment_tensor(params[i].tensor, optimizer->v[i]));
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(kMagic, 4);
    io::write_u32(out, kCheckpointVersion);
    write_string(out, config_text);
    io::write_u64(out, static_cast<std::uint64_t>(optimizer ? optimizer->step : 0));
    io::write_u32(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
      write_string(out, name);
      write_tensor(out, t);
    }
    out.flush();
    if (!out) throw FormatError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

std::string read_header(std::istream& in, const std::filesystem::path& path) {
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  char magic[4];
  io::read_exact(in, magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError(path.string() + " is not a checkpoint");
  const auto version = io::read_u32(in);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  return read_string(in, 1u << 20);
}

}  // namespace

std::string read_checkpoint_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return read_header(in, path);
}

template <typename T>
Checkpoint<T> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  Checkpoint<T> ck;
  ck.config_text = read_header(in, path);
  ck.step = static_cast<std::int64_t>(io::read_u64(in));
  const auto count = io::read_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = read_string(in, 4096);
    ck.tensors.emplace_back(std::move(name), read_tensor<T>(in));
  }
  return ck;
}

template <typename T>
void restore(const Checkpoint<T>& ckpt, UformerParams<T>& model, OptimizerState<T>* optimizer) {
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& [name, t] : ckpt.tensors) {
    if (!by_name.emplace(name, &t).second) throw FormatError("checkpoint stores '" + name + "' twice");
  }
  auto take_entry = [&](const std::string& name, const Shape& shape) -> const Tensor<T>& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing '" + name + "'");
    if (it->second->shape() != shape) {
      throw FormatError("checkpoint entry '" + name + "' has shape " + shape_str(it->second->shape()) +
                        ", expected " + shape_str(shape));
    }
    const Tensor<T>& t = *it->second;
    by_name.erase(it);
    return t;
  };

  const auto params = model.parameters();
  for (const auto& p : params) {
    const auto& src = take_entry(p.name, p.tensor.shape());
    auto dst = p.tensor;
    std::ranges::copy(src.data(), dst.mutable_data().begin());
  }
  const bool has_moments = by_name.count("adam.m/" + (params.empty() ? std::string() : params.front().name)) > 0;
  if (optimizer) {
    *optimizer = OptimizerState<T>::init(params);
    optimizer->step = ckpt.step;
    if (has_moments) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto m = take_entry("adam.m/" + params[i].name, params[i].tensor.shape()).data();
        const auto v = take_entry("adam.v/" + params[i].name, params[i].tensor.shape()).data();
        optimizer->m[i].assign(m.begin(), m.end());
        optimizer->v[i].assign(v.begin(), v.end());
      }
    } else if (ckpt.step != 0) {
      throw FormatError("checkpoint at step " + std::to_string(ckpt.step) + " carries no optimizer moments");
    }
  } else if (has_moments) {
    for (const auto& p : params) {
      by_name.erase("adam.m/" + p.name);
      by_name.erase("adam.v/" + p.name);
    }
  }
  if (!by_name.empty()) throw FormatError("checkpoint has unexpected entry '" + by_name.begin()->first + "'");
}

#define UFORMER_INSTANTIATE_CHECKPOINT(T)                                                                 \
  template void save_checkpoint(const std::filesystem::path&, const std::string&, const UformerParams<T>&, \
                                const OptimizerState<T>*);                                               \
  template Checkpoint<T> read_checkpoint(const std::filesystem::path&);                                  \
  template void restore(const Checkpoint<T>&, UformerParams<T>&, OptimizerState<T>*);

UFORMER_INSTANTIATE_CHECKPOINT(float)
UFORMER_INSTANTIATE_CHECKPOINT(double)

}  // namespace uformer
