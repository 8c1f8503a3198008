#include "rknet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace rknet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'K', 'N', 'T'};

enum class Code : std::uint8_t { F32 = 0, F64 = 1, U8 = 2, U64 = 3 };

std::size_t code_width(Code c) {
  switch (c) {
    case Code::F32: return 4;
    case Code::F64: return 8;
    case Code::U8: return 1;
    case Code::U64: return 8;
  }
  throw CheckpointError("unknown dtype code " + std::to_string(static_cast<int>(c)));
}

struct Entry {
  Code code;
  Shape shape;
  std::string bytes;
};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf_.append(b, sizeof(T));
  }
  void raw(const void* data, std::size_t n) { buf_.append(static_cast<const char*>(data), n); }

  void entry(const std::string& name, Code code, const Shape& shape, const void* data,
             std::size_t bytes) {
    if (name.size() > 0xFFFF) throw CheckpointError("tensor name too long: " + name);
    put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    raw(name.data(), name.size());
    put<std::uint8_t>(static_cast<std::uint8_t>(code));
    put<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) put<std::uint32_t>(static_cast<std::uint32_t>(d));
    raw(data, bytes);
    ++count_;
  }

  void tensor(const std::string& name, const Tensor& t) {
    if (t.dtype() == DType::Float32) {
      entry(name, Code::F32, t.shape(), t.data<float>().data(), t.numel() * 4);
    } else {
      entry(name, Code::F64, t.shape(), t.data<double>().data(), t.numel() * 8);
    }
  }

  std::string finish() const {
    std::string out(kMagic, 4);
    auto append_u32 = [&](std::uint32_t v) {
      char b[4];
      std::memcpy(b, &v, 4);
      out.append(b, 4);
    };
    append_u32(kCheckpointVersion);
    append_u32(count_);
    return out + buf_;
  }

 private:
  std::string buf_;
  std::uint32_t count_ = 0;
};

class Reader {
 public:
  Reader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }

  const char* take(std::size_t n) {
    if (data_.size() - pos_ < n) {
      throw CheckpointError(path_ + ": truncated checkpoint (needed " + std::to_string(n) +
                            " bytes at offset " + std::to_string(pos_) + ", file has " +
                            std::to_string(data_.size()) + ")");
    }
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }

  bool done() const { return pos_ == data_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& data_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

std::map<std::string, Entry> parse(const std::string& data, const std::string& path) {
  Reader r(data, path);
  if (std::memcmp(r.take(4), kMagic, 4) != 0) {
    throw CheckpointError(path + ": not a checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(path + ": checkpoint version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  const auto count = r.get<std::uint32_t>();
  std::map<std::string, Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    std::string name(r.take(len), len);
    Entry e;
    e.code = static_cast<Code>(r.get<std::uint8_t>());
    const std::size_t width = code_width(e.code);
    const auto rank = r.get<std::uint8_t>();
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      e.shape.push_back(r.get<std::uint32_t>());
      n *= e.shape.back();
    }
    e.bytes.assign(r.take(n * width), n * width);
    if (!entries.emplace(name, std::move(e)).second) {
      throw CheckpointError(path + ": duplicate tensor '" + name + "'");
    }
  }
  if (!r.done()) {
    throw CheckpointError(path + ": " + std::to_string(data.size() - r.pos()) +
                          " trailing bytes after the last tensor");
  }
  return entries;
}

const Entry& require(const std::map<std::string, Entry>& entries, const std::string& name,
                     Code code, const std::string& path) {
  auto it = entries.find(name);
  if (it == entries.end()) throw CheckpointError(path + ": missing tensor '" + name + "'");
  if (it->second.code != code) {
    throw CheckpointError(path + ": tensor '" + name + "' has the wrong dtype");
  }
  return it->second;
}

std::uint64_t read_u64(const Entry& e, std::size_t i) {
  std::uint64_t v;
  std::memcpy(&v, e.bytes.data() + 8 * i, 8);
  return v;
}

void restore(Tensor& dst, const Entry& e, const std::string& name, const std::string& path) {
  const Code want = dst.dtype() == DType::Float32 ? Code::F32 : Code::F64;
  if (e.code != want || e.shape != dst.shape()) {
    throw CheckpointError(path + ": tensor '" + name + "' stored as " + shape_to_string(e.shape) +
                          ", model expects " + shape_to_string(dst.shape()) + " " +
                          to_string(dst.dtype()));
  }
  if (dst.dtype() == DType::Float32) {
    std::memcpy(dst.data<float>().data(), e.bytes.data(), e.bytes.size());
  } else {
    std::memcpy(dst.data<double>().data(), e.bytes.data(), e.bytes.size());
  }
}

}  // namespace

void save_checkpoint(RkNetModel& model, const std::string& path, const TrainingState& state) {
  Writer w;
  nlohmann::json config;
  config["model"] = spec_to_json(model.spec());
  config["seed"] = model.seed();
  config["dtype"] = to_string(model.dtype());
  const std::string text = config.dump();
  w.entry("meta.config", Code::U8, {text.size()}, text.data(), text.size());
  w.entry("meta.epoch", Code::U64, {1}, &state.epoch, 8);
  const std::uint64_t rng[2] = {state.rng.key(), state.rng.counter()};
  w.entry("meta.rng", Code::U64, {2}, rng, 16);
  for (auto* p : model.parameters()) w.tensor(p->name, p->value);
  for (auto& [name, t] : model.buffers()) w.tensor(name, *t);
  const std::string bytes = w.finish();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto entries = parse(data, path);

  const auto& cfg = require(entries, "meta.config", Code::U8, path);
  nlohmann::json config;
  try {
    config = nlohmann::json::parse(cfg.bytes);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path + ": unreadable model config: " + e.what());
  }
  DType dtype;
  std::uint64_t seed;
  ModelSpec spec;
  try {
    const auto dt = config.at("dtype").get<std::string>();
    if (dt != to_string(DType::Float32) && dt != to_string(DType::Float64)) {
      throw CheckpointError(path + ": unknown model dtype '" + dt + "'");
    }
    dtype = dt == to_string(DType::Float32) ? DType::Float32 : DType::Float64;
    seed = config.at("seed").get<std::uint64_t>();
    spec = spec_from_json(config.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path + ": malformed model config: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(path + ": invalid model config: " + e.what());
  }

  const auto& epoch = require(entries, "meta.epoch", Code::U64, path);
  const auto& rng = require(entries, "meta.rng", Code::U64, path);
  if (epoch.shape != Shape{1} || rng.shape != Shape{2}) {
    throw CheckpointError(path + ": malformed training state");
  }
  TrainingState state{read_u64(epoch, 0), CounterRng(read_u64(rng, 0), read_u64(rng, 1))};

  RkNetModel model(std::move(spec), seed, dtype);
  auto params = model.parameters();
  auto buffers = model.buffers();
  std::set<std::string> expected{"meta.config", "meta.epoch", "meta.rng"};
  for (auto* p : params) expected.insert(p->name);
  for (auto& b : buffers) expected.insert(b.first);
  std::ostringstream unknown;
  for (const auto& entry : entries) {
    if (!expected.count(entry.first)) unknown << " '" << entry.first << "'";
  }
  if (!unknown.str().empty()) {
    throw CheckpointError(path + ": unknown tensor(s) in checkpoint:" + unknown.str());
  }
  auto fetch = [&](const std::string& name) -> const Entry& {
    auto it = entries.find(name);
    if (it == entries.end()) throw CheckpointError(path + ": missing tensor '" + name + "'");
    return it->second;
  };
  for (auto* p : params) restore(p->value, fetch(p->name), p->name, path);
  for (auto& [name, t] : buffers) restore(*t, fetch(name), name, path);
  return {std::move(model), state};
}

}  // namespace rknet
