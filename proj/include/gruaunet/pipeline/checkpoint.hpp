// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gruaunet/pipeline/config.hpp"
#include "gruaunet/tensor/params.hpp"

namespace gruaunet::pipeline {

inline constexpr char kCheckpointMagic[4] = {'G', 'A', 'U', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Raw container contents: tensors in file order plus the metadata JSON.
struct CheckpointFile {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  nlohmann::json meta;
};

/// A loaded checkpoint with parameters re-bound to the model layout.
struct Checkpoint {
  RunConfig config;
  ParamSet<float> params;
  std::uint64_t step = 0;
  double threshold = 0.5;
  nlohmann::json meta;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& data) : data_(data) {}
  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n, const std::string& what) const {
    if (remaining() < n) {
      throw TruncatedError(gruaunet::detail::concat("checkpoint truncated: ", what, " needs ", n, " bytes, ",
                                                    remaining(), " left"));
    }
  }
  const std::string& data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const CheckpointFile& file) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& [name, t] : file.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  const std::string meta = file.meta.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  return out;
}

inline CheckpointFile decode_checkpoint(const std::string& data) {
  using gruaunet::detail::concat;
  if (data.size() < 4 || std::memcmp(data.data(), kCheckpointMagic, 4) != 0) {
    throw BadMagicError("bad magic: not a GAUN checkpoint");
  }
  detail::ByteReader r(data);
  r.bytes(4, "magic");
  const std::uint32_t version = r.u32("format version");
  if (version != kCheckpointVersion) {
    throw VersionMismatchError(concat("checkpoint format version ", version, " not supported (expected ",
                                      kCheckpointVersion, ")"));
  }
  CheckpointFile file;
  const std::uint32_t count = r.u32("tensor count");
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = concat("tensor #", i);
    const std::uint32_t len = r.u32(where + " name length");
    std::string name = r.bytes(len, where + " name");
    const std::string tag = "tensor '" + name + "'";
    if (!names.insert(name).second) throw CheckpointError("duplicate " + tag + " in checkpoint");
    const std::uint32_t rank = r.u32(tag + " rank");
    if (rank > 8) throw CheckpointError(concat(tag, " has implausible rank ", rank));
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(r.u32(tag + " dims"));
      numel *= shape.back();
    }
    if (numel > r.remaining() / 4) {
      throw TruncatedError(concat("checkpoint truncated: ", tag, " payload needs ", numel * 4, " bytes, ",
                                  r.remaining(), " left"));
    }
    Tensor<float> t(shape);
    for (auto& v : t.data()) v = std::bit_cast<float>(r.u32(tag + " payload"));
    file.tensors.emplace_back(std::move(name), std::move(t));
  }
  const std::uint32_t meta_len = r.u32("config length");
  const std::string meta = r.bytes(meta_len, "config snapshot");
  if (r.remaining() != 0) throw CheckpointError(concat("checkpoint has ", r.remaining(), " trailing bytes"));
  try {
    file.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint config snapshot is not valid JSON: ") + e.what());
  }
  return file;
}

inline void write_binary_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

inline std::string read_binary_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void save_checkpoint(const std::filesystem::path& path, const ParamSet<float>& params, const RunConfig& cfg,
                            std::uint64_t step, double threshold) {
  CheckpointFile file;
  for (const auto& e : params.entries()) file.tensors.emplace_back(e.name, e.value);
  file.meta = {{"config", to_json(cfg)}, {"step", step}, {"threshold", threshold}};
  write_binary_file(path, encode_checkpoint(file));
}

/// Copies stored tensors into `params`; names and shapes must match exactly.
inline void restore_params(const CheckpointFile& file, ParamSet<float>& params) {
  using gruaunet::detail::concat;
  std::set<std::string> stored;
  for (const auto& [name, t] : file.tensors) {
    if (!params.contains(name)) throw CheckpointError("checkpoint has unknown tensor '" + name + "'");
    auto& dst = params.get(name);
    if (dst.shape() != t.shape()) {
      throw CheckpointError(concat("tensor '", name, "' has shape ", shape_str(t.shape()), ", model expects ",
                                   shape_str(dst.shape())));
    }
    dst = t;
    stored.insert(name);
  }
  for (const auto& e : params.entries()) {
    if (!stored.count(e.name)) throw CheckpointError("checkpoint is missing tensor '" + e.name + "'");
  }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  CheckpointFile file = decode_checkpoint(read_binary_file(path));
  Checkpoint ck;
  try {
    ck.config = run_config_from_json(file.meta.at("config"));
    ck.step = file.meta.at("step").get<std::uint64_t>();
    ck.threshold = file.meta.at("threshold").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata incomplete: ") + e.what());
  }
  ck.params = init_model<float>(ck.config.model, 0);
  restore_params(file, ck.params);
  ck.meta = std::move(file.meta);
  return ck;
}

}  // namespace gruaunet::pipeline
