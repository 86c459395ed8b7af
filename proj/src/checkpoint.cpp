#include "simprop/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "simprop/data.hpp"

namespace simprop {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

std::string format_float(float v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

std::uint32_t crc_update(std::uint32_t crc, const void* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(crc, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

ModelConfig parse_config(const std::vector<std::pair<std::string, std::string>>& header) {
  ModelConfig c;
  auto get = [&](const char* key) -> const std::string& {
    for (const auto& [k, v] : header) {
      if (k == key) return v;
    }
    throw CheckpointError(std::string("checkpoint header lacks '") + key + "'");
  };
  auto to_int = [](const std::string& s) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw CheckpointError("bad integer in checkpoint header: " + s);
    return v;
  };
  auto to_float = [](const std::string& s) {
    float v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw CheckpointError("bad float in checkpoint header: " + s);
    return v;
  };
  c.input_size = to_int(get("input_size"));
  c.feature_channels = to_int(get("feature_channels"));
  c.fusion_channels = to_int(get("fusion_channels"));
  c.decoder_channels = to_int(get("decoder_channels"));
  c.encoder_channels = parse_ints(get("encoder_channels"));
  c.aspp_rates = parse_ints(get("aspp_rates"));
  c.use_fbaf = get("use_fbaf") == "1";
  c.map_raw = get("map_raw") == "1";
  c.input_mean = to_float(get("input_mean"));
  c.input_std = to_float(get("input_std"));
  if (get("foreground_channel") != "1") throw CheckpointError("unsupported foreground channel index");
  return c;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> config_header(const ModelConfig& cfg) {
  return {
      {"input_size", std::to_string(cfg.input_size)},
      {"feature_stride", std::to_string(ModelConfig::kFeatureStride)},
      {"feature_channels", std::to_string(cfg.feature_channels)},
      {"fusion_channels", std::to_string(cfg.fusion_channels)},
      {"decoder_channels", std::to_string(cfg.decoder_channels)},
      {"encoder_channels", join_ints(cfg.encoder_channels)},
      {"aspp_rates", join_ints(cfg.aspp_rates)},
      {"use_fbaf", cfg.use_fbaf ? "1" : "0"},
      {"map_raw", cfg.map_raw ? "1" : "0"},
      {"input_mean", format_float(cfg.input_mean)},
      {"input_std", format_float(cfg.input_std)},
      {"foreground_channel", "1"},
  };
}

void save_checkpoint(const fs::path& path, const ModelParams& params, const ModelConfig& cfg) {
  validate_params(params, cfg);
  std::ostringstream os(std::ios::binary);
  os << kCheckpointMagic;
  for (const auto& [k, v] : config_header(cfg)) os << k << '=' << v << '\n';
  os << '\n';
  std::uint32_t crc = ::crc32(0L, Z_NULL, 0);
  visit_params(params, [&](const std::string& name, const Tensor& t) {
    os << name << '\n';
    for (int i = 0; i < t.rank(); ++i) os << (i ? " " : "") << t.dim(i);
    os << '\n';
    const std::size_t bytes = t.size() * sizeof(float);
    os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(bytes));
    crc = crc_update(crc, t.ptr(), bytes);
  });
  const unsigned char tail[4] = {static_cast<unsigned char>(crc), static_cast<unsigned char>(crc >> 8),
                                 static_cast<unsigned char>(crc >> 16), static_cast<unsigned char>(crc >> 24)};
  os.write(reinterpret_cast<const char*>(tail), 4);

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ValidationError("cannot write checkpoint " + path.string());
    const std::string blob = os.str();
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw ValidationError("write failed for checkpoint " + path.string());
  }
  fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path.string());
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t magic_len = std::strlen(kCheckpointMagic);
  if (blob.compare(0, magic_len, kCheckpointMagic) != 0) throw CheckpointError(path.string() + ": bad magic");

  std::size_t pos = magic_len;
  auto next_line = [&]() {
    const std::size_t nl = blob.find('\n', pos);
    if (nl == std::string::npos) throw CheckpointError(path.string() + ": truncated (CRC check impossible)");
    std::string line = blob.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };

  std::vector<std::pair<std::string, std::string>> header;
  for (std::string line = next_line(); !line.empty(); line = next_line()) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError(path.string() + ": malformed header line '" + line + "'");
    header.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  Checkpoint ck;
  ck.config = parse_config(header);
  try {
    ck.config.validate();
  } catch (const ValidationError& e) {
    throw CheckpointError(path.string() + ": invalid stored configuration: " + e.what());
  }
  ck.params = zeros_like_config(ck.config);

  std::uint32_t crc = ::crc32(0L, Z_NULL, 0);
  visit_params(ck.params, [&](const std::string& name, Tensor& t) {
    const std::string got = next_line();
    if (got != name) throw CheckpointError(path.string() + ": expected tensor '" + name + "', found '" + got + "'");
    std::ostringstream want;
    for (int i = 0; i < t.rank(); ++i) want << (i ? " " : "") << t.dim(i);
    const std::string shape = next_line();
    if (shape != want.str()) {
      throw CheckpointError(path.string() + ": tensor " + name + " has shape '" + shape + "', expected '" +
                            want.str() + "'");
    }
    const std::size_t bytes = t.size() * sizeof(float);
    if (pos + bytes > blob.size()) throw CheckpointError(path.string() + ": truncated payload, CRC mismatch");
    std::memcpy(t.ptr(), blob.data() + pos, bytes);
    crc = crc_update(crc, blob.data() + pos, bytes);
    pos += bytes;
  });
  if (pos + 4 != blob.size()) {
    throw CheckpointError(path.string() + (pos + 4 > blob.size() ? ": truncated, CRC mismatch" : ": trailing bytes"));
  }
  const auto* tail = reinterpret_cast<const unsigned char*>(blob.data() + pos);
  const std::uint32_t stored = static_cast<std::uint32_t>(tail[0]) | (static_cast<std::uint32_t>(tail[1]) << 8) |
                               (static_cast<std::uint32_t>(tail[2]) << 16) |
                               (static_cast<std::uint32_t>(tail[3]) << 24);
  if (stored != crc) throw CheckpointError(path.string() + ": CRC mismatch");
  return ck;
}

ModelParams load_checkpoint(const fs::path& path, const ModelConfig& expected) {
  Checkpoint ck = read_checkpoint(path);
  if (!(ck.config == expected)) {
    std::string diff;
    const auto a = config_header(ck.config), b = config_header(expected);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].second != b[i].second) diff += " " + a[i].first + "=" + a[i].second + " (expected " + b[i].second + ")";
    }
    throw CheckpointError(path.string() + ": configuration mismatch:" + diff);
  }
  return std::move(ck.params);
}

}  // namespace simprop
