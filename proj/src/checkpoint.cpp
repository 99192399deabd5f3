// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace triformer {

namespace {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
    std::memcpy(&v, b, sizeof(U));
  }
  return v;
}

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw FormatError("cannot open '" + path.string() + "' for writing");
  }
  template <typename U>
  void put(U v) {
    v = to_little(v);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(U));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), n); }
  void finish(const std::filesystem::path& path) {
    out_.flush();
    if (!out_) throw FormatError("write to '" + path.string() + "' failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint '" + path_ + "'");
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return to_little(v);
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t offset() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (buf_.size() - pos_ < n)
      throw FormatError("checkpoint '" + path_ + "' truncated reading " + what + " at byte offset " +
                        std::to_string(pos_));
  }
  std::string path_;
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint_records(const std::filesystem::path& path,
                              const std::vector<CheckpointRecord>& records) {
  Writer w(path);
  w.bytes("TRIF", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (shape_numel(r.shape) != r.values.size())
      throw FormatError("record '" + r.name + "' has inconsistent shape");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) w.put<std::uint64_t>(e);
    for (float v : r.values) w.put<float>(v);
  }
  w.finish(path);
}

std::vector<CheckpointRecord> read_checkpoint_records(const std::filesystem::path& path) {
  Reader r(path);
  if (r.str(4, "magic") != "TRIF") throw FormatError("'" + path.string() + "' is not a checkpoint (bad magic at byte offset 0)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("record count");
  std::vector<CheckpointRecord> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord rec;
    const auto len = r.get<std::uint32_t>("name length");
    rec.name = r.str(len, "name");
    const auto rank = r.get<std::uint32_t>("rank");
    for (std::uint32_t d = 0; d < rank; ++d)
      rec.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("extent")));
    const std::size_t n = shape_numel(rec.shape);
    rec.values.resize(n);
    for (std::size_t j = 0; j < n; ++j) rec.values[j] = r.get<float>("values");
    records.push_back(std::move(rec));
  }
  if (!r.at_end())
    throw FormatError("trailing bytes in checkpoint '" + path.string() + "' at byte offset " +
                      std::to_string(r.offset()));
  return records;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterSet<T>& params,
                     const Adam<T>* adam) {
  std::vector<CheckpointRecord> records;
  auto as_float = [](const auto& values) { return std::vector<float>(values.begin(), values.end()); };
  for (const auto& p : params.items()) records.push_back({p.name, p.tensor.shape(), as_float(p.tensor.data())});
  if (adam) {
    const auto& items = params.items();
    for (std::size_t i = 0; i < items.size(); ++i)
      records.push_back({"adam.m." + items[i].name, items[i].tensor.shape(), as_float(adam->first_moments()[i])});
    for (std::size_t i = 0; i < items.size(); ++i)
      records.push_back({"adam.v." + items[i].name, items[i].tensor.shape(), as_float(adam->second_moments()[i])});
    records.push_back({"adam.t", Shape{1}, {static_cast<float>(adam->steps())}});
  }
  write_checkpoint_records(path, records);
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, ParameterSet<T>& params, Adam<T>* adam) {
  auto records = read_checkpoint_records(path);
  std::map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;

  auto fetch = [&](const std::string& name, const Shape& shape) -> const CheckpointRecord& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint '" + path.string() + "' lacks '" + name + "'");
    if (it->second->shape != shape)
      throw FormatError("checkpoint record '" + name + "' has shape " + shape_str(it->second->shape) +
                        ", model expects " + shape_str(shape));
    return *it->second;
  };

  for (auto& p : params.items()) {
    const auto& rec = fetch(p.name, p.tensor.shape());
    auto dst = p.tensor.mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(rec.values[j]);
  }
  if (adam && by_name.count("adam.t")) {
    std::vector<std::vector<T>> m, v;
    for (const auto& p : params.items()) {
      const auto& rm = fetch("adam.m." + p.name, p.tensor.shape());
      const auto& rv = fetch("adam.v." + p.name, p.tensor.shape());
      m.emplace_back(rm.values.begin(), rm.values.end());
      v.emplace_back(rv.values.begin(), rv.values.end());
    }
    adam->set_state(std::move(m), std::move(v),
                    static_cast<std::uint64_t>(fetch("adam.t", Shape{1}).values[0]));
  }
  for (const auto& r : records) {
    if (r.name.rfind("adam.", 0) == 0) continue;
    if (!params.find(r.name))
      throw FormatError("checkpoint parameter '" + r.name + "' does not exist in the model");
  }
}

template void save_checkpoint(const std::filesystem::path&, const ParameterSet<float>&, const Adam<float>*);
template void save_checkpoint(const std::filesystem::path&, const ParameterSet<double>&, const Adam<double>*);
template void load_checkpoint(const std::filesystem::path&, ParameterSet<float>&, Adam<float>*);
template void load_checkpoint(const std::filesystem::path&, ParameterSet<double>&, Adam<double>*);

}  // namespace triformer
