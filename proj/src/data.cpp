#include "rknet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace rknet {

Tensor Dataset::gather(std::span<const std::size_t> indices, DType dtype) const {
  const Shape& s = images.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  Tensor out({indices.size(), s[1], s[2], s[3]}, dtype);
  const auto src = images.data<float>();
  visit_dtype(dtype, [&]<typename T>(std::type_identity<T>) {
    auto dst = out.data<T>();
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const float* from = src.data() + indices[b] * per;
      std::copy(from, from + per, dst.data() + b * per);
    }
  });
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

ChannelStats channel_stats(const Dataset& data) {
  const Shape& s = data.images.shape();
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
  const auto x = data.images.data<float>();
  ChannelStats st{std::vector<double>(C), std::vector<double>(C)};
  for (std::size_t c = 0; c < C; ++c) {
    double sum = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const float* p = x.data() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) sum += p[i];
    }
    const double mean = sum / static_cast<double>(N * HW);
    double sq = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const float* p = x.data() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) sq += (p[i] - mean) * (p[i] - mean);
    }
    st.mean[c] = mean;
    st.stddev[c] = std::sqrt(sq / static_cast<double>(N * HW));
  }
  return st;
}

void normalize(Dataset& data, const ChannelStats& stats) {
  const Shape& s = data.images.shape();
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
  if (stats.mean.size() != C || stats.stddev.size() != C) {
    throw std::invalid_argument("normalize: statistics cover " + std::to_string(stats.mean.size()) +
                                " channels, data has " + std::to_string(C));
  }
  auto x = data.images.data<float>();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double sd = stats.stddev[c] > 0 ? stats.stddev[c] : 1.0;
      float* p = x.data() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        p[i] = static_cast<float>((p[i] - stats.mean[c]) / sd);
      }
    }
  }
}

Dataset parse_cifar10_batch(const std::string& path, std::size_t records) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open CIFAR-10 batch '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t expected = records * kCifarRecordBytes;
  if (bytes.size() != expected) {
    throw DataError(path + ": expected " + std::to_string(expected) + " bytes (" +
                    std::to_string(records) + " records), found " + std::to_string(bytes.size()));
  }
  Dataset d;
  d.num_classes = 10;
  d.images = Tensor({records, 3, 32, 32}, DType::Float32);
  d.labels.resize(records);
  auto x = d.images.data<float>();
  for (std::size_t r = 0; r < records; ++r) {
    const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data()) + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw DataError(path + ": record " + std::to_string(r) + " has label byte " +
                      std::to_string(rec[0]) + " (must be 0-9)");
    }
    d.labels[r] = rec[0];
    for (std::size_t i = 0; i < 3072; ++i) x[r * 3072 + i] = rec[1 + i] / 255.0f;
  }
  return d;
}

namespace {

Dataset concat_datasets(const std::vector<Dataset>& parts, const std::string& split) {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  const Shape& s = parts.front().images.shape();
  Dataset out;
  out.num_classes = parts.front().num_classes;
  out.split = split;
  out.images = Tensor({n, s[1], s[2], s[3]}, DType::Float32);
  auto dst = out.images.data<float>();
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto src = p.images.data<float>();
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(off));
    off += src.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

}  // namespace

CifarData load_cifar10_binary(const std::string& dir, Normalization norm,
                              std::size_t records_per_file) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("CIFAR-10 directory '" + dir + "' does not exist");
  std::vector<Dataset> train_parts;
  for (int i = 1; i <= 5; ++i) {
    const auto file = fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin");
    train_parts.push_back(parse_cifar10_batch(file.string(), records_per_file));
  }
  CifarData data;
  data.train = concat_datasets(train_parts, "train");
  data.test = parse_cifar10_batch((fs::path(dir) / "test_batch.bin").string(), records_per_file);
  data.test.split = "test";
  if (norm == Normalization::PerChannel) {
    const auto stats = channel_stats(data.train);
    normalize(data.train, stats);
    normalize(data.test, stats);
  }
  return data;
}

namespace {

bool shape_pixel(int cls, int dy, int dx) {
  switch (cls) {
    case 0:  // filled square
      return std::abs(dy) <= 3 && std::abs(dx) <= 3;
    case 1:  // disk
      return dy * dy + dx * dx <= 12;
    case 2:  // plus-shaped cross
      return (std::abs(dy) <= 1 && std::abs(dx) <= 4) || (std::abs(dx) <= 1 && std::abs(dy) <= 4);
    default:  // horizontal stripes
      return std::abs(dy) <= 4 && std::abs(dx) <= 4 && (dy + 4) % 2 == 0;
  }
}

}  // namespace

Dataset gen_synthetic_shapes(std::size_t n_per_class, int classes, int size, double noise,
                             std::uint64_t seed, const std::string& split) {
  if (size < 8) throw std::invalid_argument("synthetic shapes need size >= 8");
  if (classes < 1 || classes > 4) {
    throw std::invalid_argument("synthetic shapes support 1 to 4 classes");
  }
  if (n_per_class == 0) throw std::invalid_argument("synthetic shapes need n_per_class >= 1");
  if (noise < 0) throw std::invalid_argument("noise must be non-negative");
  const std::size_t n = n_per_class * static_cast<std::size_t>(classes);
  const auto S = static_cast<std::size_t>(size);
  Dataset d;
  d.num_classes = classes;
  d.split = split;
  d.images = Tensor({n, 3, S, S}, DType::Float32);
  d.labels.resize(n);
  auto x = d.images.data<float>();
  const CounterRng root(seed);
  // Centres jitter over a 5x5 grid around the middle; shapes fit within radius 4.
  const int lo = size / 2 - 2;
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng = root.fork(i);
    const int cls = static_cast<int>(i % static_cast<std::size_t>(classes));
    d.labels[i] = cls;
    const int cy = lo + static_cast<int>(rng.below(5));
    const int cx = lo + static_cast<int>(rng.below(5));
    for (std::size_t c = 0; c < 3; ++c) {
      float* plane = x.data() + (i * 3 + c) * S * S;
      for (int yy = 0; yy < size; ++yy) {
        for (int xx = 0; xx < size; ++xx) {
          double v = shape_pixel(cls, yy - cy, xx - cx) ? 1.0 : 0.0;
          if (noise > 0) v += noise * rng.normal();
          plane[yy * size + xx] = static_cast<float>(v);
        }
      }
    }
  }
  return d;
}

AugmentDraw draw_augment(CounterRng& rng) {
  AugmentDraw d;
  d.dy = static_cast<int>(rng.below(9));
  d.dx = static_cast<int>(rng.below(9));
  d.flip = rng.bernoulli(0.5);
  return d;
}

namespace {

void require_cifar_shape(const Tensor& x) {
  if (x.rank() != 4 || x.dim(2) != 32 || x.dim(3) != 32) {
    throw ShapeError("augmentation expects (N,C,32,32), got " + shape_to_string(x.shape()));
  }
}

}  // namespace

void augment_sample(Tensor& batch, std::size_t index, const AugmentDraw& draw) {
  require_cifar_shape(batch);
  if (draw.dy < 0 || draw.dy > 8 || draw.dx < 0 || draw.dx > 8) {
    throw std::invalid_argument("crop offsets must lie in [0, 8]");
  }
  const std::size_t C = batch.dim(1);
  visit_dtype(batch.dtype(), [&]<typename T>(std::type_identity<T>) {
    auto data = batch.data<T>();
    std::vector<T> src(32 * 32);
    for (std::size_t c = 0; c < C; ++c) {
      T* plane = data.data() + (index * C + c) * 1024;
      std::copy(plane, plane + 1024, src.begin());
      for (int y = 0; y < 32; ++y) {
        const int sy = y + draw.dy - 4;
        for (int x = 0; x < 32; ++x) {
          const int ox = draw.flip ? 31 - x : x;
          const int sx = ox + draw.dx - 4;
          const bool inside = sy >= 0 && sy < 32 && sx >= 0 && sx < 32;
          plane[y * 32 + x] = inside ? src[static_cast<std::size_t>(sy * 32 + sx)] : T(0);
        }
      }
    }
  });
}

Tensor augment_cifar(const Tensor& x, CounterRng& rng) {
  require_cifar_shape(x);
  Tensor out = x;
  for (std::size_t i = 0; i < x.dim(0); ++i) augment_sample(out, i, draw_augment(rng));
  return out;
}

}  // namespace rknet
