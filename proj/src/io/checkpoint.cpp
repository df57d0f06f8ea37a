#include "nrp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "nrp/builders.hpp"

namespace nrp::io {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[4] = {'N', 'R', 'P', 'C'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + at_, sizeof(T));
    at_ += sizeof(T);
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const auto* p = b_.data() + at_;
    at_ += n;
    return p;
  }
  bool done() const { return at_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - at_ < n) throw FormatError("truncated checkpoint");
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t at_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<nets::NamedTensor>& tensors) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()));
    visit_dtype(t.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto d = t.data<T>();
      const auto* p = reinterpret_cast<const std::uint8_t*>(d.data());
      out.insert(out.end(), p, p + d.size() * sizeof(T));
    });
  }
  return out;
}

std::vector<nets::NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const auto* magic = r.take(4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<nets::NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    const auto* name = r.take(len);
    nets::NamedTensor nt;
    nt.name.assign(reinterpret_cast<const char*>(name), len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("tensor '" + nt.name + "' has implausible rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::int64_t>(r.get<std::uint64_t>()));
    const auto code = r.get<std::uint8_t>();
    if (code > 1) throw FormatError("tensor '" + nt.name + "' has unknown dtype code " + std::to_string(code));
    const auto n = static_cast<std::size_t>(numel_of(shape));
    nt.value = visit_dtype(static_cast<DType>(code), [&](auto tag) {
      using T = decltype(tag);
      std::vector<T> v(n);
      const auto* p = r.take(n * sizeof(T));
      std::memcpy(v.data(), p, n * sizeof(T));
      return make_tensor(shape, std::move(v));
    });
    out.push_back(std::move(nt));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint");
  return out;
}

std::filesystem::path meta_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".meta";
  return p;
}

std::string format_key_values(const std::map<std::string, std::string>& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
  return os.str();
}

std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path.string() + ": expected key=value, got '" + line + "'");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw FormatError(path.string() + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

void save_checkpoint(const nets::Network& net, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& extra) {
  atomic_write(path, encode_checkpoint(net.state()));
  auto meta = net.metadata();
  for (const auto& [k, v] : extra) meta[k] = v;
  atomic_write_text(meta_path(path), format_key_values(meta));
}

std::vector<nets::NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

void load_checkpoint_into(nets::Network& net, const std::filesystem::path& path) {
  net.load_state(load_checkpoint(path));
}

nets::Network load_network(const std::filesystem::path& path) {
  auto net = nets::build_from_metadata(read_key_values(meta_path(path)));
  auto state = load_checkpoint(path);
  if (!state.empty() && state.front().value.dtype() != net.dtype()) net = net.cast(state.front().value.dtype());
  net.load_state(state);
  return net;
}

}  // namespace nrp::io
