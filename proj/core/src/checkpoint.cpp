#include "iclprobe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "iclprobe/errors.hpp"

namespace iclprobe {

namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
  const auto bits = std::bit_cast<Bits>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(U));
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<Bits>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<U>(bits);
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

ModelConfig read_config(Reader& r) {
  if (r.get_string(8) != std::string(kCheckpointMagic, 8)) throw CheckpointError("bad checkpoint magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.n_layers = r.get<std::int32_t>();
  c.n_heads = r.get<std::int32_t>();
  c.d_model = r.get<std::int32_t>();
  c.d_ff = r.get<std::int32_t>();
  c.vocab_size = r.get<std::int32_t>();
  c.max_seq = r.get<std::int32_t>();
  const auto prec = r.get<std::int32_t>();
  if (prec != 0 && prec != 1) throw CheckpointError("unknown precision code " + std::to_string(prec));
  c.precision = static_cast<Precision>(prec);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  return c;
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const Model<T>& model) {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  const auto& c = model.config();
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  put_le(out, kCheckpointVersion);
  for (std::int32_t v : {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_seq}) put_le(out, v);
  put_le(out, static_cast<std::int32_t>(sizeof(T) == 8 ? Precision::double_ : Precision::single));
  const auto& tensors = model.layout().tensors();
  put_le(out, static_cast<std::uint32_t>(tensors.size()));
  const auto& p = model.parameters();
  for (const auto& t : tensors) {
    put_le(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put_le(out, static_cast<std::uint32_t>(t.rows));
    put_le(out, static_cast<std::uint32_t>(t.cols));
    for (std::size_t i = 0; i < t.size(); ++i) put_le(out, p[t.offset + i]);
  }
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed for " + path.string());
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  Reader r(bytes);
  return read_config(r);
}

template <typename T>
Model<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  ModelConfig stored = read_config(r);
  const bool stored_double = stored.precision == Precision::double_;
  ModelConfig target = stored;
  target.precision = sizeof(T) == 8 ? Precision::double_ : Precision::single;
  Model<T> model(target);
  const auto& tensors = model.layout().tensors();
  const auto count = r.get<std::uint32_t>();
  if (count != tensors.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(count) + " tensors, config implies " +
                          std::to_string(tensors.size()));
  }
  auto& p = model.parameters();
  for (const auto& t : tensors) {
    const auto len = r.get<std::uint32_t>();
    const std::string name = r.get_string(len);
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    if (name != t.name || static_cast<int>(rows) != t.rows || static_cast<int>(cols) != t.cols) {
      throw CheckpointError("tensor " + name + " [" + std::to_string(rows) + "x" + std::to_string(cols) +
                            "] does not match expected " + t.name + " [" + std::to_string(t.rows) + "x" +
                            std::to_string(t.cols) + "]");
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      p[t.offset + i] = stored_double ? static_cast<T>(r.get<double>()) : static_cast<T>(r.get<float>());
    }
  }
  if (!r.at_end()) throw CheckpointError("trailing bytes after last tensor");
  return model;
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  return decode_checkpoint<T>(read_file_bytes(path));
}

std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << value;
  return os.str();
}

template std::vector<std::uint8_t> encode_checkpoint(const Model<float>&);
template std::vector<std::uint8_t> encode_checkpoint(const Model<double>&);
template void save_checkpoint(const std::filesystem::path&, const Model<float>&);
template void save_checkpoint(const std::filesystem::path&, const Model<double>&);
template Model<float> decode_checkpoint(const std::vector<std::uint8_t>&);
template Model<double> decode_checkpoint(const std::vector<std::uint8_t>&);
template Model<float> load_checkpoint(const std::filesystem::path&);
template Model<double> load_checkpoint(const std::filesystem::path&);

}  // namespace iclprobe
