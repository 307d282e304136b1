#pragma once

// Checkpoint layout (little-endian):
//
//   char[8]  magic "PSLABCKP"
//   u32      format version (1)
//   u32 x 6  n_layers, d_model, d_mlp, n_heads, vocab_size, max_seq
//   u8       activation (0 relu, 1 gelu, 2 silu)
//   u8       mlp style (0 two-matrix, 1 three-matrix-gated)
//   u16      reserved, zero
//   u32      parameter record count
//   records: u32 name length, name bytes, u32 rank, u64 dims[rank],
//            f32 values[prod(dims)] row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "pslab/error.hpp"
#include "pslab/model.hpp"

namespace pslab {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr std::string_view kCheckpointMagic = "PSLABCKP";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace io {

template <typename V>
void put(std::string& out, V value) {
  char buf[sizeof(V)];
  std::memcpy(buf, &value, sizeof(V));
  out.append(buf, sizeof(V));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename V>
  V get() {
    need(sizeof(V));
    V value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return value;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("unexpected end of file");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("short write to " + path.string());
}

template <typename T>
void put_named_tensor(std::string& out, const std::string& name, const Tensor<T>& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
  for (T v : t.data()) put<float>(out, static_cast<float>(v));
}

inline NamedTensor<float> get_named_tensor(Reader& in) {
  NamedTensor<float> rec;
  rec.name = std::string(in.take(in.get<std::uint32_t>()));
  const auto rank = in.get<std::uint32_t>();
  if (rank > 4) throw FormatError("record '" + rec.name + "' has implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(in.get<std::uint64_t>());
  const std::size_t n = shape_numel(shape);
  std::vector<float> data(n);
  auto raw = in.take(n * sizeof(float));
  if (n > 0) std::memcpy(data.data(), raw.data(), raw.size());
  rec.value = Tensor<float>(std::move(shape), std::move(data));
  return rec;
}

}  // namespace io

inline void put_model_config(std::string& out, const ModelConfig& c) {
  for (std::size_t v : {c.n_layers, c.d_model, c.d_mlp, c.n_heads, c.vocab_size, c.max_seq}) {
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  io::put<std::uint8_t>(out, static_cast<std::uint8_t>(c.activation));
  io::put<std::uint8_t>(out, static_cast<std::uint8_t>(c.mlp_style));
  io::put<std::uint16_t>(out, 0);
}

inline ModelConfig get_model_config(io::Reader& in) {
  ModelConfig c;
  c.n_layers = in.get<std::uint32_t>();
  c.d_model = in.get<std::uint32_t>();
  c.d_mlp = in.get<std::uint32_t>();
  c.n_heads = in.get<std::uint32_t>();
  c.vocab_size = in.get<std::uint32_t>();
  c.max_seq = in.get<std::uint32_t>();
  const auto act = in.get<std::uint8_t>();
  const auto style = in.get<std::uint8_t>();
  in.get<std::uint16_t>();
  if (act > 2 || style > 1) throw FormatError("checkpoint has an unknown activation or MLP style");
  c.activation = static_cast<ActivationKind>(act);
  c.mlp_style = static_cast<MlpStyle>(style);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  return c;
}

inline std::string serialize_checkpoint(const TransformerWeights<float>& weights) {
  std::string out(kCheckpointMagic);
  io::put<std::uint32_t>(out, kCheckpointVersion);
  put_model_config(out, weights.config());
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(weights.parameters().size()));
  for (const auto& p : weights.parameters()) io::put_named_tensor(out, p.name, p.value);
  return out;
}

inline TransformerWeights<float> deserialize_checkpoint(std::string_view bytes) {
  io::Reader in(bytes);
  if (in.take(kCheckpointMagic.size()) != kCheckpointMagic) throw FormatError("not a checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  TransformerWeights<float> weights(get_model_config(in));
  const auto count = in.get<std::uint32_t>();
  if (count != weights.parameters().size()) {
    throw FormatError("checkpoint has " + std::to_string(count) + " parameters, config implies " +
                      std::to_string(weights.parameters().size()));
  }
  for (auto& slot : weights.parameters()) {
    auto rec = io::get_named_tensor(in);
    if (rec.name != slot.name || rec.value.shape() != slot.value.shape()) {
      throw FormatError("unexpected record '" + rec.name + "' " + shape_string(rec.value.shape()) + ", expected '" +
                        slot.name + "' " + shape_string(slot.value.shape()));
    }
    slot.value = std::move(rec.value);
  }
  if (!in.at_end()) throw FormatError("trailing bytes after checkpoint records");
  return weights;
}

inline void save_checkpoint(const TransformerWeights<float>& weights, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(weights));
}

inline TransformerWeights<float> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file(path));
}

}  // namespace pslab
