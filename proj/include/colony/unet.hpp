#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "colony/graph.hpp"
#include "colony/mask.hpp"

namespace colony {

inline constexpr int kNumClasses = 4;
inline constexpr int kInputChannels = 3;
inline constexpr double kHeadInitScale = 0.1;

struct UNetConfig {
  int depth = 2;           // number of pooling stages: 2, 4 or 6
  int base_channels = 16;  // width of the first encoder level
  bool batchnorm = false;

  int required_multiple() const { return 1 << depth; }

  void validate() const {
    if (depth != 2 && depth != 4 && depth != 6) {
      throw ConfigError("depth", "must be 2, 4, or 6 (got " +
                                     std::to_string(depth) + ")");
    }
    if (base_channels < 1) {
      throw ConfigError("base_channels", "must be positive");
    }
  }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

/// Encoder-decoder segmentation network with skip connections.
///
/// Layout for depth D and base width b:
///   encoder level l (l = 0..D-1): 2 x [conv3x3 -> (bn) -> relu] at b*2^l,
///   then maxpool2;
///   bottleneck: 2 x conv unit at b*2^D;
///   decoder level l (l = D-1..0): upsample2 -> conv unit to b*2^l ->
///   concat(skip_l, up) -> 2 x conv unit at b*2^l;
///   head: conv3x3 to 4 logits -> softmax over channels.
/// Conv layers followed by batchnorm carry no bias.
template <typename T = float>
class UNet {
 public:
  UNet(const UNetConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    build();
    std::mt19937_64 rng(seed);
    init_he_uniform(graph_, rng);
    // Relu features are all positive, so a full-scale head gives every pixel
    // the same large per-class offset. Shrinking it starts near uniform.
    for (auto& p : graph_.parameters()) {
      if (p.name == "head.conv.weight") {
        for (auto& v : p.value.storage()) v *= static_cast<T>(kHeadInitScale);
      }
    }
  }

  const UNetConfig& config() const { return config_; }
  Graph<T>& graph() { return graph_; }
  const Graph<T>& graph() const { return graph_; }
  int logits_node() const { return logits_; }

  /// Channel widths of the encoder levels followed by the bottleneck.
  std::vector<int> level_widths() const {
    std::vector<int> w;
    for (int l = 0; l <= config_.depth; ++l) w.push_back(config_.base_channels << l);
    return w;
  }

  void check_input(const Shape& s) const {
    if (s.c != kInputChannels) {
      throw ShapeError("unet expects 3 input channels, got " + std::to_string(s.c));
    }
    const int m = config_.required_multiple();
    if (s.h % m != 0 || s.w % m != 0) {
      throw ShapeError("input size " + std::to_string(s.h) + "x" +
                       std::to_string(s.w) + " must be a multiple of " +
                       std::to_string(m) + " for depth " +
                       std::to_string(config_.depth));
    }
  }

  /// Per-pixel class probabilities, shape (n, 4, h, w).
  const Tensor<T>& forward(const Tensor<T>& images, Mode mode) {
    check_input(images.shape());
    return graph_.forward(images, mode);
  }

  /// Backpropagates a gradient w.r.t. the pre-softmax logits.
  void backward_from_logits(const Tensor<T>& grad_logits) {
    graph_.backward(grad_logits, logits_);
  }

  /// Snapshot of every parameter value (trainable and running statistics).
  std::vector<Tensor<T>> state() const {
    std::vector<Tensor<T>> s;
    for (const auto& p : graph_.parameters()) s.push_back(p.value);
    return s;
  }
  void set_state(const std::vector<Tensor<T>>& s) {
    auto& params = graph_.parameters();
    if (s.size() != params.size()) throw ShapeError("state size mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      require_same_shape(s[i].shape(), params[i].value.shape(), "set_state");
      params[i].value = s[i];
    }
  }

 private:
  int conv_unit(int in, int cin, int cout, const std::string& name) {
    int x = graph_.add_conv3x3(in, cin, cout, name + ".conv", !config_.batchnorm);
    if (config_.batchnorm) x = graph_.add_batchnorm(x, cout, name + ".bn");
    return graph_.add_relu(x, name + ".relu");
  }

  void build() {
    const int depth = config_.depth;
    const int b = config_.base_channels;
    int x = graph_.add_input("images");
    int cin = kInputChannels;
    std::vector<int> skips;
    for (int l = 0; l < depth; ++l) {
      const int c = b << l;
      const std::string name = "enc" + std::to_string(l);
      x = conv_unit(x, cin, c, name + ".0");
      x = conv_unit(x, c, c, name + ".1");
      skips.push_back(x);
      x = graph_.add_maxpool2(x, name + ".pool");
      cin = c;
    }
    const int cb = b << depth;
    x = conv_unit(x, cin, cb, "mid.0");
    x = conv_unit(x, cb, cb, "mid.1");
    cin = cb;
    for (int l = depth - 1; l >= 0; --l) {
      const int c = b << l;
      const std::string name = "dec" + std::to_string(l);
      x = graph_.add_upsample2(x, name + ".up");
      x = conv_unit(x, cin, c, name + ".upconv");
      x = graph_.add_concat(skips[l], x, name + ".cat");
      x = conv_unit(x, 2 * c, c, name + ".0");
      x = conv_unit(x, c, c, name + ".1");
      cin = c;
    }
    logits_ = graph_.add_conv3x3(x, cin, kNumClasses, "head.conv");
    graph_.add_softmax(logits_, "head.softmax");
  }

  UNetConfig config_;
  Graph<T> graph_;
  int logits_ = -1;
};

/// Per-pixel argmax over the class channels; ties go to the lower index.
template <typename T>
std::vector<LabelMask> predict_mask(const Tensor<T>& probs) {
  const Shape& s = probs.shape();
  std::vector<LabelMask> masks;
  masks.reserve(s.n);
  for (int n = 0; n < s.n; ++n) {
    LabelMask m(s.h, s.w);
    for (std::size_t i = 0; i < s.plane(); ++i) {
      int best = 0;
      T best_v = probs.plane(n, 0)[i];
      for (int c = 1; c < s.c; ++c) {
        if (probs.plane(n, c)[i] > best_v) {
          best_v = probs.plane(n, c)[i];
          best = c;
        }
      }
      m.data()[i] = static_cast<std::uint8_t>(best);
    }
    masks.push_back(std::move(m));
  }
  return masks;
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   "CSEG" | u16 version | u16 depth | u32 base_channels | u8 batchnorm |
//   u32 tensor count | per tensor: u16 name length, name bytes, 4 x u32 dims,
//   raw f32 values | u32 CRC32 of every preceding byte
//
// All integers and floats are little-endian.

inline constexpr char kCheckpointMagic[4] = {'C', 'S', 'E', 'G'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Code { io, bad_magic, version_mismatch, corrupt, shape_mismatch };
  CheckpointError(Code code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    if constexpr (std::endian::native == std::endian::big) {
      v = byteswap_any(v);
    }
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  std::vector<char> bytes;

  template <typename U>
  static U byteswap_any(U v) {
    char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    std::reverse(b, b + sizeof(U));
    std::memcpy(&v, b, sizeof(U));
    return v;
  }
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const char> bytes) : bytes_(bytes) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    if constexpr (std::endian::native == std::endian::big) {
      v = ByteWriter::byteswap_any(v);
    }
    return v;
  }
  void get_bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Code::corrupt,
                            "checkpoint truncated");
    }
  }
  std::span<const char> bytes_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()),
                static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<char> serialize_weights(const UNet<float>& model) {
  for (const auto& p : model.graph().parameters()) {
    if (!p.value.all_finite()) {
      throw CheckpointError(CheckpointError::Code::corrupt,
                            "refusing to save non-finite parameter " + p.name);
    }
  }
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(model.config().depth));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.config().base_channels));
  w.put<std::uint8_t>(model.config().batchnorm ? 1 : 0);
  const auto& params = model.graph().parameters();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.name.size()));
    w.put_bytes(p.name.data(), p.name.size());
    const Shape& s = p.value.shape();
    for (int d : {s.n, s.c, s.h, s.w}) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float v : p.value.storage()) w.put<float>(v);
  }
  w.put<std::uint32_t>(detail::crc32_of(w.bytes));
  return std::move(w.bytes);
}

inline void save_weights(const UNet<float>& model,
                         const std::filesystem::path& path) {
  const auto bytes = serialize_weights(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw CheckpointError(CheckpointError::Code::io,
                          "cannot open " + path.string() + " for writing");
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw CheckpointError(CheckpointError::Code::io,
                          "write failed: " + path.string());
  }
}

struct CheckpointHeader {
  std::uint16_t version = 0;
  UNetConfig config;
};

enum class LoadMode { full, encoder_only };

/// Parses and validates a checkpoint, then copies its tensors into `model`.
/// In encoder_only mode, only tensors named "enc*" are copied and tensors the
/// model lacks are ignored. The model is untouched unless the whole file
/// validates.
inline void deserialize_weights(std::span<const char> bytes, UNet<float>& model,
                                LoadMode mode = LoadMode::full) {
  using Code = CheckpointError::Code;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError(Code::bad_magic, "not a CSEG checkpoint");
  }
  if (bytes.size() < 4 + 2 + 4) {
    throw CheckpointError(Code::corrupt, "checkpoint truncated");
  }
  detail::ByteReader r(bytes.subspan(4));
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Code::version_mismatch,
                          "checkpoint version " + std::to_string(version) +
                              ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto payload = bytes.first(bytes.size() - 4);
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if constexpr (std::endian::native == std::endian::big) {
    stored_crc = detail::ByteWriter::byteswap_any(stored_crc);
  }
  if (detail::crc32_of(payload) != stored_crc) {
    throw CheckpointError(Code::corrupt, "checkpoint CRC mismatch (truncated or damaged)");
  }
  detail::ByteReader body(payload.subspan(6));
  UNetConfig cfg;
  cfg.depth = body.get<std::uint16_t>();
  cfg.base_channels = static_cast<int>(body.get<std::uint32_t>());
  cfg.batchnorm = body.get<std::uint8_t>() != 0;
  if (mode == LoadMode::full && !(cfg == model.config())) {
    throw CheckpointError(Code::shape_mismatch,
                          "checkpoint config does not match model config");
  }
  const auto count = body.get<std::uint32_t>();
  auto& params = model.graph().parameters();
  std::vector<std::pair<std::size_t, std::vector<float>>> staged;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = body.get<std::uint16_t>();
    std::string name(len, '\0');
    body.get_bytes(name.data(), len);
    Shape s;
    s.n = static_cast<int>(body.get<std::uint32_t>());
    s.c = static_cast<int>(body.get<std::uint32_t>());
    s.h = static_cast<int>(body.get<std::uint32_t>());
    s.w = static_cast<int>(body.get<std::uint32_t>());
    std::vector<float> values(s.size());
    for (auto& v : values) v = body.get<float>();
    const bool wanted = mode == LoadMode::full || name.starts_with("enc");
    if (!wanted) continue;
    auto it = std::find_if(params.begin(), params.end(),
                           [&](const auto& p) { return p.name == name; });
    if (it == params.end()) {
      if (mode == LoadMode::full) {
        throw CheckpointError(Code::shape_mismatch,
                              "unexpected tensor '" + name + "' in checkpoint");
      }
      continue;
    }
    if (!(it->value.shape() == s)) {
      throw CheckpointError(Code::shape_mismatch,
                            "tensor '" + name + "' has shape " + s.str() +
                                ", model expects " + it->value.shape().str());
    }
    staged.emplace_back(static_cast<std::size_t>(it - params.begin()),
                        std::move(values));
  }
  if (body.remaining() != 0) {
    throw CheckpointError(Code::corrupt, "trailing bytes after tensor table");
  }
  if (mode == LoadMode::full && staged.size() != params.size()) {
    throw CheckpointError(Code::shape_mismatch,
                          "checkpoint holds " + std::to_string(staged.size()) +
                              " tensors, model has " +
                              std::to_string(params.size()));
  }
  for (auto& [idx, values] : staged) {
    params[idx].value = Tensor<float>(params[idx].value.shape(), std::move(values));
  }
}

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError(CheckpointError::Code::io,
                          "cannot open " + path.string());
  }
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

/// Reads the config block without loading tensors.
inline CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  using Code = CheckpointError::Code;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError(Code::bad_magic, "not a CSEG checkpoint");
  }
  detail::ByteReader r(std::span<const char>(bytes).subspan(4));
  CheckpointHeader h;
  h.version = r.get<std::uint16_t>();
  if (h.version != kCheckpointVersion) {
    throw CheckpointError(Code::version_mismatch, "unsupported checkpoint version");
  }
  h.config.depth = r.get<std::uint16_t>();
  h.config.base_channels = static_cast<int>(r.get<std::uint32_t>());
  h.config.batchnorm = r.get<std::uint8_t>() != 0;
  return h;
}

/// Builds a model for `config` and fills it from the checkpoint at `path`.
inline UNet<float> load_weights(const std::filesystem::path& path,
                                const UNetConfig& config,
                                LoadMode mode = LoadMode::full,
                                std::uint64_t seed = 0) {
  UNet<float> model(config, seed);
  const auto bytes = read_file_bytes(path);
  deserialize_weights(bytes, model, mode);
  return model;
}

}  // namespace colony
