#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "nrp/data.hpp"
#include "nrp/rng.hpp"

namespace nrp::io {
namespace {

constexpr std::int64_t kCifarImage = 3 * 32 * 32;
constexpr std::int64_t kCifarRecord = 1 + kCifarImage;
constexpr char kImgbMagic[4] = {'I', 'M', 'G', 'B'};

std::uint32_t get_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
         static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint8_t quantize(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

}  // namespace

ImageBatch Dataset::batch(std::span<const std::int64_t> indices, DType dtype) const {
  const auto n = static_cast<std::int64_t>(indices.size());
  const auto per = image_bytes();
  ImageBatch out;
  out.labels.reserve(indices.size());
  out.images = visit_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> v(static_cast<std::size_t>(n * per));
    for (std::int64_t i = 0; i < n; ++i) {
      const auto idx = indices[static_cast<std::size_t>(i)];
      if (idx < 0 || idx >= count) throw std::out_of_range("dataset index " + std::to_string(idx));
      const std::uint8_t* src = pixels.data() + idx * per;
      for (std::int64_t j = 0; j < per; ++j) v[i * per + j] = static_cast<T>(src[j]) / static_cast<T>(255);
    }
    return make_tensor(Shape{n, channels, height, width}, std::move(v));
  });
  for (auto idx : indices) out.labels.push_back(labels[static_cast<std::size_t>(idx)]);
  return out;
}

ImageBatch Dataset::slice(std::int64_t begin, std::int64_t n, DType dtype) const {
  if (begin < 0 || n < 0 || begin + n > count) throw std::out_of_range("dataset slice out of range");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[i] = begin + i;
  return batch(idx, dtype);
}

Dataset Dataset::head(std::int64_t n) const {
  n = std::min(n, count);
  Dataset d = *this;
  d.count = n;
  d.pixels.resize(static_cast<std::size_t>(n * image_bytes()));
  d.labels.resize(static_cast<std::size_t>(n));
  return d;
}

void Dataset::validate() const {
  if (count < 0 || channels < 1 || height < 1 || width < 1 || num_classes < 1)
    throw FormatError("dataset has invalid geometry");
  if (static_cast<std::int64_t>(pixels.size()) != count * image_bytes() ||
      static_cast<std::int64_t>(labels.size()) != count)
    throw FormatError("dataset buffers do not match its declared size");
  for (int l : labels)
    if (l < 0 || l >= num_classes) throw FormatError("label " + std::to_string(l) + " out of range");
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.count < 0 || spec.num_classes < 1 || spec.size < 4) throw std::invalid_argument("bad synthetic spec");
  Dataset d;
  d.count = spec.count;
  d.channels = 3;
  d.height = d.width = spec.size;
  d.num_classes = spec.num_classes;
  d.pixels.resize(static_cast<std::size_t>(d.count * d.image_bytes()));
  d.labels.resize(static_cast<std::size_t>(d.count));

  // Class signatures: orientation cycles through half the classes, frequency
  // doubles for the other half; each class also gets a fixed colour tint.
  const int K = spec.num_classes;
  const int orientations = (K + 1) / 2;
  std::vector<double> theta(K), freq(K), tint(3 * K);
  Rng sig(splitmix64(spec.seed ^ 0x5157a11cULL));
  for (int k = 0; k < K; ++k) {
    theta[k] = std::numbers::pi * (k % orientations) / orientations;
    freq[k] = (k < orientations ? 3.0 : 6.0) / spec.size;
    for (int c = 0; c < 3; ++c) tint[3 * k + c] = sig.uniform(-1.0, 1.0);
  }

  const Rng base(spec.seed);
  const int S = spec.size;
  for (std::int64_t i = 0; i < spec.count; ++i) {
    Rng r = base.fork(static_cast<std::uint64_t>(i));
    const int k = static_cast<int>(r.uniform_int(static_cast<std::uint64_t>(K)));
    d.labels[i] = k;
    const double th = theta[k] + spec.orientation_jitter * r.normal();
    const double f = freq[k] * r.uniform(0.9, 1.1);
    const double phase = r.uniform(0.0, 2.0 * std::numbers::pi);
    const double ct = std::cos(th), st = std::sin(th);
    double bg[3], amp[3];
    for (int c = 0; c < 3; ++c) {
      bg[c] = r.uniform(0.3, 0.7) + spec.color_cue * tint[3 * k + c];
      amp[c] = spec.contrast * r.uniform(0.7, 1.3);
    }
    std::uint8_t* dst = d.pixels.data() + i * d.image_bytes();
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const double wave = std::cos(2.0 * std::numbers::pi * f * (x * ct + y * st) + phase);
          const double v = bg[c] + amp[c] * wave + spec.noise * r.normal();
          dst[(c * S + y) * S + x] = quantize(v);
        }
  }
  return d;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void atomic_write(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
  atomic_write(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

Dataset read_cifar10_file(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.empty() || bytes.size() % kCifarRecord != 0)
    throw FormatError(path.string() + ": truncated CIFAR-10 file (" + std::to_string(bytes.size()) + " bytes)");
  Dataset d;
  d.count = static_cast<std::int64_t>(bytes.size()) / kCifarRecord;
  d.pixels.resize(static_cast<std::size_t>(d.count * kCifarImage));
  d.labels.resize(static_cast<std::size_t>(d.count));
  for (std::int64_t i = 0; i < d.count; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] >= 10) throw FormatError(path.string() + ": label " + std::to_string(rec[0]) + " out of range");
    d.labels[i] = rec[0];
    std::copy(rec + 1, rec + kCifarRecord, d.pixels.begin() + i * kCifarImage);
  }
  return d;
}

Dataset load_cifar10(const std::filesystem::path& dir, bool train) {
  if (!train) return read_cifar10_file(dir / "test_batch.bin");
  Dataset all;
  all.count = 0;
  for (int b = 1; b <= 5; ++b) {
    auto part = read_cifar10_file(dir / ("data_batch_" + std::to_string(b) + ".bin"));
    all.pixels.insert(all.pixels.end(), part.pixels.begin(), part.pixels.end());
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
    all.count += part.count;
  }
  return all;
}

Dataset read_imgb(const std::filesystem::path& path) {
  const auto b = read_file(path);
  if (b.size() < 20 || !std::equal(kImgbMagic, kImgbMagic + 4, b.begin()))
    throw FormatError(path.string() + ": bad IMGB magic");
  Dataset d;
  d.count = get_u32(b, 4);
  d.channels = static_cast<int>(get_u32(b, 8));
  d.height = static_cast<int>(get_u32(b, 12));
  d.width = static_cast<int>(get_u32(b, 16));
  const std::size_t need = 20 + static_cast<std::size_t>(d.count) * (1 + static_cast<std::size_t>(d.image_bytes()));
  if (b.size() != need) throw FormatError(path.string() + ": truncated IMGB container");
  int max_label = 0;
  d.labels.assign(b.begin() + 20, b.begin() + 20 + d.count);
  for (int l : d.labels) max_label = std::max(max_label, l);
  d.num_classes = std::max(10, max_label + 1);
  d.pixels.assign(b.begin() + 20 + d.count, b.end());
  return d;
}

void write_imgb(const Dataset& data, const std::filesystem::path& path) {
  data.validate();
  for (int l : data.labels)
    if (l > 255) throw FormatError("IMGB labels are single bytes");
  std::vector<std::uint8_t> b(kImgbMagic, kImgbMagic + 4);
  put_u32(b, static_cast<std::uint32_t>(data.count));
  put_u32(b, static_cast<std::uint32_t>(data.channels));
  put_u32(b, static_cast<std::uint32_t>(data.height));
  put_u32(b, static_cast<std::uint32_t>(data.width));
  for (int l : data.labels) b.push_back(static_cast<std::uint8_t>(l));
  b.insert(b.end(), data.pixels.begin(), data.pixels.end());
  atomic_write(path, b);
}

DatasetHandle DatasetHandle::parse(const std::string& text) {
  DatasetHandle h;
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : text.substr(colon + 1);
  if (kind == "synthetic") {
    h.source = Source::Synthetic;
    std::stringstream ss(rest);
    std::string kv;
    while (std::getline(ss, kv, ',')) {
      if (kv.empty()) continue;
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("bad synthetic option '" + kv + "'");
      const auto key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "count") h.synthetic.count = std::stoll(val);
      else if (key == "seed") h.synthetic.seed = std::stoull(val);
      else if (key == "classes") h.synthetic.num_classes = std::stoi(val);
      else if (key == "size") h.synthetic.size = std::stoi(val);
      else throw std::invalid_argument("unknown synthetic option '" + key + "'");
    }
  } else if (kind == "cifar10") {
    h.source = Source::Cifar10;
    auto split_at = rest.rfind(':');
    std::string dir = rest;
    if (split_at != std::string::npos) {
      const auto split = rest.substr(split_at + 1);
      if (split == "train" || split == "test") {
        h.train = split == "train";
        dir = rest.substr(0, split_at);
      }
    }
    if (dir.empty()) throw std::invalid_argument("cifar10 source needs a directory");
    h.path = dir;
  } else if (kind == "imgb") {
    h.source = Source::Imgb;
    if (rest.empty()) throw std::invalid_argument("imgb source needs a file");
    h.path = rest;
  } else {
    throw std::invalid_argument("unknown dataset source '" + text + "'");
  }
  return h;
}

std::string DatasetHandle::describe() const {
  switch (source) {
    case Source::Synthetic:
      return "synthetic:count=" + std::to_string(synthetic.count) + ",seed=" + std::to_string(synthetic.seed) +
             ",classes=" + std::to_string(synthetic.num_classes) + ",size=" + std::to_string(synthetic.size);
    case Source::Cifar10: return "cifar10:" + path.string() + (train ? ":train" : ":test");
    case Source::Imgb: return "imgb:" + path.string();
  }
  return "?";
}

Dataset load_dataset(const DatasetHandle& h) {
  Dataset d;
  switch (h.source) {
    case DatasetHandle::Source::Synthetic: d = make_synthetic(h.synthetic); break;
    case DatasetHandle::Source::Cifar10: d = load_cifar10(h.path, h.train); break;
    case DatasetHandle::Source::Imgb: d = read_imgb(h.path); break;
  }
  d.validate();
  return d;
}

BatchStream::BatchStream(const Dataset& data, std::int64_t batch_size, std::optional<std::uint64_t> seed,
                         bool drop_last)
    : data_(&data), batch_size_(batch_size), seed_(seed), drop_last_(drop_last) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (data.count == 0) throw std::invalid_argument("cannot stream an empty dataset");
  if (drop_last && data.count < batch_size) throw std::invalid_argument("dataset smaller than one batch");
  reshuffle();
}

void BatchStream::reshuffle() {
  order_.resize(static_cast<std::size_t>(data_->count));
  for (std::int64_t i = 0; i < data_->count; ++i) order_[i] = i;
  if (seed_) {
    Rng r = Rng(*seed_).fork(static_cast<std::uint64_t>(epoch_));
    r.shuffle(order_.begin(), order_.end());
  }
  cursor_ = 0;
}

std::int64_t BatchStream::batches_per_epoch() const {
  return drop_last_ ? data_->count / batch_size_ : (data_->count + batch_size_ - 1) / batch_size_;
}

ImageBatch BatchStream::next() {
  const std::int64_t remaining = data_->count - cursor_;
  if (remaining <= 0 || (drop_last_ && remaining < batch_size_)) {
    ++epoch_;
    reshuffle();
  }
  const std::int64_t n = std::min(batch_size_, data_->count - cursor_);
  std::span<const std::int64_t> idx(order_.data() + cursor_, static_cast<std::size_t>(n));
  cursor_ += n;
  return data_->batch(idx);
}

}  // namespace nrp::io
