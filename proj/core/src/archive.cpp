#include "dcaunet/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "dcaunet/config_io.hpp"
#include "dcaunet/errors.hpp"

namespace dcaunet {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> buf;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError("archive truncated at byte " + std::to_string(pos_));
  }
  template <typename T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = le<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::vector<std::uint8_t> encode_archive(const Archive& archive) {
  Writer w;
  w.bytes(kArchiveMagic, sizeof kArchiveMagic);
  w.le(kArchiveVersion);
  w.str(archive.metadata);
  w.le(static_cast<std::uint64_t>(archive.records.size()));
  for (const auto& r : archive.records) {
    if (r.data.size() != numel(r.shape)) {
      throw FormatError("archive record " + r.name + ": data size does not match shape " + to_string(r.shape));
    }
    w.str(r.name);
    w.le(static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) w.le(static_cast<std::uint64_t>(d));
    for (float f : r.data) w.le(std::bit_cast<std::uint32_t>(f));
  }
  w.le(fnv1a64(w.buf));
  return std::move(w.buf);
}

Archive decode_archive(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof kArchiveMagic + 8 ||
      std::memcmp(bytes.data(), kArchiveMagic, sizeof kArchiveMagic) != 0) {
    throw FormatError("not a dcaunet archive (bad magic)");
  }
  const auto body = bytes.first(bytes.size() - 8);
  Reader tail(bytes.last(8));
  if (tail.le<std::uint64_t>() != fnv1a64(body)) throw FormatError("archive checksum mismatch");
  Reader r(body);
  for (std::size_t i = 0; i < sizeof kArchiveMagic; ++i) r.le<std::uint8_t>();
  const auto version = r.le<std::uint32_t>();
  if (version != kArchiveVersion) throw FormatError("unsupported archive version " + std::to_string(version));
  Archive a;
  a.metadata = r.str();
  const auto count = r.le<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord rec;
    rec.name = r.str();
    const auto rank = r.le<std::uint32_t>();
    if (rank > 8) throw FormatError("archive record " + rec.name + ": rank " + std::to_string(rank) + " too large");
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = r.le<std::uint64_t>();
      n *= dim;
      if (n > body.size()) throw FormatError("archive record " + rec.name + ": extents exceed file size");
      rec.shape.push_back(static_cast<std::size_t>(dim));
    }
    r.need(n * 4);
    rec.data.resize(n);
    for (auto& f : rec.data) f = std::bit_cast<float>(r.le<std::uint32_t>());
    a.records.push_back(std::move(rec));
  }
  if (r.pos() != body.size()) throw FormatError("archive has trailing bytes before the checksum");
  return a;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  const auto bytes = encode_archive(archive);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling then rename so a crash never leaves a torn file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_archive(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

TensorRecord to_record(const std::string& name, const Tensor& t) {
  TensorRecord r;
  r.name = name;
  r.shape = t.shape();
  r.data.reserve(t.numel());
  for (double v : t.values()) r.data.push_back(static_cast<float>(v));
  return r;
}

Archive network_archive(const Network& net, const std::string& extra_json) {
  nlohmann::ordered_json meta;
  meta["format"] = "dcaunet-checkpoint";
  meta["network"] = network_config_to_json(net.config());
  meta["extra"] = nlohmann::ordered_json::parse(extra_json);
  Archive a;
  a.metadata = meta.dump();
  const ParamList params = net.parameters();
  for (const auto& p : params.entries()) a.records.push_back(to_record(p.name, p.tensor));
  return a;
}

void save_checkpoint(const std::filesystem::path& path, const Network& net, const std::string& extra_json) {
  write_archive(path, network_archive(net, extra_json));
}

void load_weights(Network& net, const Archive& archive) {
  ParamList params = net.parameters();
  auto& entries = params.entries();
  if (entries.size() != archive.records.size()) {
    throw FormatError("checkpoint holds " + std::to_string(archive.records.size()) + " tensors, network expects " +
                      std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& rec = archive.records[i];
    if (rec.name != entries[i].name || rec.shape != entries[i].tensor.shape()) {
      throw FormatError("checkpoint tensor " + std::to_string(i) + " is " + rec.name + " " + to_string(rec.shape) +
                        ", network expects " + entries[i].name + " " + to_string(entries[i].tensor.shape()));
    }
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto dst = entries[i].tensor.mutable_values();
    const auto& src = archive.records[i].data;
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<double>(src[j]);
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  const auto meta = nlohmann::json::parse(a.metadata, nullptr, false);
  if (meta.is_discarded() || !meta.is_object() || meta.value("format", "") != "dcaunet-checkpoint" ||
      !meta.contains("network")) {
    throw FormatError(path.string() + ": not a checkpoint (metadata lacks a network config)");
  }
  LoadedCheckpoint out{Network(network_config_from_json(meta["network"])),
                       meta.contains("extra") ? meta["extra"].dump() : "{}"};
  load_weights(out.network, a);
  return out;
}

}  // namespace dcaunet
