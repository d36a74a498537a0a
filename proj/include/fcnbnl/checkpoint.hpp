#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fcnbnl/fcn.hpp"
#include "fcnbnl/nbnl.hpp"

namespace fcnbnl {

// Checkpoint file layout:
//   magic "FCNBNL1\n", then records of
//   name length (u32 LE) + name bytes + dtype (u8: 1=f32, 2=f64) +
//   ndim (u8) + dims (u32 LE each) + raw values (LE).
inline constexpr char kCheckpointMagic[8] = {'F', 'C', 'N', 'B', 'N', 'L', '1', '\n'};

enum : std::uint8_t { kDtypeF32 = 1, kDtypeF64 = 2 };

template <typename T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "checkpoint: f32/f64 only");
  return std::is_same_v<T, float> ? kDtypeF32 : kDtypeF64;
}

struct CheckpointRecord {
  std::string name;
  std::uint8_t dtype = 0;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;  // widened on read; written back at the stored dtype

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

/// Raw record list in file order plus name lookup.
struct CheckpointFile {
  std::vector<CheckpointRecord> records;

  const CheckpointRecord& get(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return r;
    fail("checkpoint: missing tensor '" + name + "'");
  }
  bool has(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return true;
    return false;
  }
};

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_u64le(std::string& out, std::uint64_t v) {
  put_u32le(out, static_cast<std::uint32_t>(v & 0xffffffffu));
  put_u32le(out, static_cast<std::uint32_t>(v >> 32));
}

inline void append_record(std::string& out, const CheckpointRecord& r) {
  put_u32le(out, static_cast<std::uint32_t>(r.name.size()));
  out += r.name;
  out.push_back(static_cast<char>(r.dtype));
  out.push_back(static_cast<char>(r.dims.size()));
  for (auto d : r.dims) put_u32le(out, d);
  check(r.values.size() == r.numel(), "checkpoint: record '" + r.name + "' dims/value count mismatch");
  for (double v : r.values) {
    if (r.dtype == kDtypeF32) {
      put_u32le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      put_u64le(out, std::bit_cast<std::uint64_t>(v));
    }
  }
}

struct ByteReader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  [[noreturn]] void truncated(const std::string& what) const {
    throw std::invalid_argument("checkpoint: truncated file at byte " + std::to_string(pos) + " reading " + what);
  }
  std::uint8_t u8(const char* what) {
    if (pos + 1 > bytes.size()) truncated(what);
    return bytes[pos++];
  }
  std::uint32_t u32(const char* what) {
    if (pos + 4 > bytes.size()) truncated(what);
    std::uint32_t v = bytes[pos] | (bytes[pos + 1] << 8) | (bytes[pos + 2] << 16) |
                      (static_cast<std::uint32_t>(bytes[pos + 3]) << 24);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    const std::uint64_t lo = u32(what);
    const std::uint64_t hi = u32(what);
    return lo | (hi << 32);
  }
};

}  // namespace detail

inline void save_checkpoint_file(const CheckpointFile& file, const std::string& path) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  for (const auto& r : file.records) detail::append_record(out, r);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline CheckpointFile load_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("checkpoint: cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      !std::equal(kCheckpointMagic, kCheckpointMagic + sizeof(kCheckpointMagic), bytes.begin())) {
    throw std::invalid_argument("checkpoint: bad magic in '" + path + "' (expected FCNBNL1)");
  }
  detail::ByteReader r{bytes, sizeof(kCheckpointMagic)};
  CheckpointFile file;
  while (r.pos < bytes.size()) {
    CheckpointRecord rec;
    const auto name_len = r.u32("name length");
    check(name_len <= 4096, "checkpoint: implausible name length");
    if (r.pos + name_len > bytes.size()) r.truncated("name");
    rec.name.assign(reinterpret_cast<const char*>(bytes.data() + r.pos), name_len);
    r.pos += name_len;
    rec.dtype = r.u8("dtype");
    check(rec.dtype == kDtypeF32 || rec.dtype == kDtypeF64,
          "checkpoint: unknown dtype code " + std::to_string(rec.dtype) + " for '" + rec.name + "'");
    const auto ndim = r.u8("ndim");
    for (int i = 0; i < ndim; ++i) rec.dims.push_back(r.u32("dims"));
    rec.values.reserve(rec.numel());
    for (std::size_t i = 0; i < rec.numel(); ++i) {
      if (rec.dtype == kDtypeF32) {
        rec.values.push_back(std::bit_cast<float>(r.u32(rec.name.c_str())));
      } else {
        rec.values.push_back(std::bit_cast<double>(r.u64(rec.name.c_str())));
      }
    }
    file.records.push_back(std::move(rec));
  }
  return file;
}

/// Everything needed to run inference or resume training.
template <typename T>
struct TrainedState {
  FcnModel<T> model;
  PrototypeBank<T> bank;
  ScalePyramidConfig pyramid;
  int epoch = 0;
  std::uint64_t seed = 0;
};

namespace detail {

template <typename T>
CheckpointRecord tensor_record(const std::string& name, const Tensor<T>& t) {
  CheckpointRecord r;
  r.name = name;
  r.dtype = dtype_code<T>();
  for (int d : t.dims) r.dims.push_back(static_cast<std::uint32_t>(d));
  r.values.assign(t.data.begin(), t.data.end());
  return r;
}

template <typename T>
CheckpointRecord vector_record(const std::string& name, const std::vector<T>& v) {
  CheckpointRecord r;
  r.name = name;
  r.dtype = dtype_code<T>();
  r.dims = {static_cast<std::uint32_t>(v.size())};
  r.values.assign(v.begin(), v.end());
  return r;
}

inline CheckpointRecord meta_record(const std::string& name, std::vector<double> values,
                                    std::vector<std::uint32_t> dims) {
  CheckpointRecord r;
  r.name = name;
  r.dtype = kDtypeF64;
  r.dims = std::move(dims);
  r.values = std::move(values);
  return r;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const TrainedState<T>& state, const std::string& path) {
  state.model.validate();
  const auto& topo = state.model.topology;
  CheckpointFile file;

  std::vector<double> layer_rows;
  for (int i = 0; i < topo.num_layers(); ++i) {
    const auto& l = topo.layers[i];
    layer_rows.insert(layer_rows.end(),
                      {static_cast<double>(l.kernel_size), static_cast<double>(l.stride),
                       static_cast<double>(l.in_channels), static_cast<double>(l.out_channels),
                       l.has_bias ? 1.0 : 0.0, topo.relu_after[i] ? 1.0 : 0.0});
  }
  file.records.push_back(detail::meta_record("topology/layers", std::move(layer_rows),
                                             {static_cast<std::uint32_t>(topo.num_layers()), 6}));
  file.records.push_back(detail::meta_record(
      "topology/flags", {topo.normalize_descriptors ? 1.0 : 0.0, topo.batch_norm_before_head ? 1.0 : 0.0}, {2}));

  std::vector<double> mask;
  for (bool b : state.model.trainable) mask.push_back(b ? 1.0 : 0.0);
  file.records.push_back(detail::meta_record("fcn/trainable_mask", std::move(mask),
                                             {static_cast<std::uint32_t>(topo.num_layers())}));
  for (int i = 0; i < topo.num_layers(); ++i) {
    file.records.push_back(detail::tensor_record("fcn/layer" + std::to_string(i) + "/weight", state.model.weights[i]));
    file.records.push_back(detail::tensor_record("fcn/layer" + std::to_string(i) + "/bias", state.model.biases[i]));
  }
  if (topo.batch_norm_before_head) {
    file.records.push_back(detail::vector_record("bn/gamma", state.model.bn.gamma));
    file.records.push_back(detail::vector_record("bn/beta", state.model.bn.beta));
    file.records.push_back(detail::vector_record("bn/running_mean", state.model.bn.running_mean));
    file.records.push_back(detail::vector_record("bn/running_var", state.model.bn.running_var));
  }

  file.records.push_back(detail::meta_record(
      "nbnl/config",
      {state.bank.config.q, static_cast<double>(state.bank.config.p), static_cast<double>(state.bank.config.k)},
      {3}));
  file.records.push_back(detail::tensor_record("nbnl/prototypes", state.bank.w));

  file.records.push_back(
      detail::meta_record("pyramid/factors", std::vector<double>(state.pyramid.factors.begin(),
                                                                 state.pyramid.factors.end()),
                          {static_cast<std::uint32_t>(state.pyramid.factors.size())}));
  file.records.push_back(
      detail::meta_record("pyramid/base", {static_cast<double>(state.pyramid.base_resolution)}, {1}));
  file.records.push_back(detail::meta_record("meta/epoch", {static_cast<double>(state.epoch)}, {1}));
  file.records.push_back(detail::meta_record(
      "meta/seed",
      {static_cast<double>(state.seed & 0xffffffffu), static_cast<double>(state.seed >> 32)}, {2}));

  save_checkpoint_file(file, path);
}

inline std::uint8_t checkpoint_precision(const CheckpointFile& file) {
  return file.get("fcn/layer0/weight").dtype;
}

namespace detail {

template <typename T>
Tensor<T> record_to_tensor(const CheckpointRecord& r, const std::vector<int>& want_dims) {
  check(r.dtype == dtype_code<T>(), "checkpoint: tensor '" + r.name + "' has dtype code " +
                                        std::to_string(r.dtype) + ", expected " + std::to_string(dtype_code<T>()));
  std::vector<int> dims(r.dims.begin(), r.dims.end());
  if (!want_dims.empty()) {
    check(dims == want_dims, "checkpoint: tensor '" + r.name + "' has shape inconsistent with the topology");
  }
  Tensor<T> t(dims);
  for (std::size_t i = 0; i < r.values.size(); ++i) t.data[i] = static_cast<T>(r.values[i]);
  return t;
}

}  // namespace detail

template <typename T>
TrainedState<T> checkpoint_to_state(const CheckpointFile& file) {
  TrainedState<T> state;

  const auto& layers = file.get("topology/layers");
  check(layers.dims.size() == 2 && layers.dims[1] == 6, "checkpoint: tensor 'topology/layers' malformed");
  FcnTopology topo;
  for (std::uint32_t i = 0; i < layers.dims[0]; ++i) {
    const double* row = layers.values.data() + static_cast<std::size_t>(i) * 6;
    topo.layers.push_back({.kernel_size = static_cast<int>(row[0]),
                           .stride = static_cast<int>(row[1]),
                           .in_channels = static_cast<int>(row[2]),
                           .out_channels = static_cast<int>(row[3]),
                           .has_bias = row[4] != 0.0});
    topo.relu_after.push_back(row[5] != 0.0);
  }
  const auto& flags = file.get("topology/flags");
  check(flags.values.size() == 2, "checkpoint: tensor 'topology/flags' malformed");
  topo.normalize_descriptors = flags.values[0] != 0.0;
  topo.batch_norm_before_head = flags.values[1] != 0.0;
  topo.validate();

  state.model.topology = topo;
  const auto& mask = file.get("fcn/trainable_mask");
  check(mask.values.size() == static_cast<std::size_t>(topo.num_layers()),
        "checkpoint: tensor 'fcn/trainable_mask' has shape inconsistent with the topology");
  for (double v : mask.values) state.model.trainable.push_back(v != 0.0);

  for (int i = 0; i < topo.num_layers(); ++i) {
    const auto& l = topo.layers[i];
    state.model.weights.push_back(
        detail::record_to_tensor<T>(file.get("fcn/layer" + std::to_string(i) + "/weight"),
                                    {l.out_channels, l.in_channels, l.kernel_size, l.kernel_size}));
    state.model.biases.push_back(
        detail::record_to_tensor<T>(file.get("fcn/layer" + std::to_string(i) + "/bias"), {l.out_channels}));
  }
  if (topo.batch_norm_before_head) {
    const int d = topo.descriptor_dim();
    state.model.bn = BatchNormState<T>(d);
    auto load_vec = [&](const char* name, std::vector<T>& dst) {
      const auto& rec = file.get(name);
      check(rec.dtype == dtype_code<T>(), "checkpoint: tensor '" + rec.name + "' dtype mismatch");
      check(rec.values.size() == static_cast<std::size_t>(d),
            "checkpoint: tensor '" + rec.name + "' has shape inconsistent with the topology");
      dst.assign(rec.values.begin(), rec.values.end());
    };
    load_vec("bn/gamma", state.model.bn.gamma);
    load_vec("bn/beta", state.model.bn.beta);
    load_vec("bn/running_mean", state.model.bn.running_mean);
    load_vec("bn/running_var", state.model.bn.running_var);
  }
  state.model.validate();

  const auto& nbnl_cfg = file.get("nbnl/config");
  check(nbnl_cfg.values.size() == 3, "checkpoint: tensor 'nbnl/config' malformed");
  NbnlConfig cfg;
  cfg.q = nbnl_cfg.values[0];
  cfg.p = static_cast<int>(nbnl_cfg.values[1]);
  cfg.k = static_cast<int>(nbnl_cfg.values[2]);
  cfg.validate();
  state.bank.config = cfg;
  state.bank.w =
      detail::record_to_tensor<T>(file.get("nbnl/prototypes"), {cfg.k, cfg.p, topo.descriptor_dim()});

  const auto& factors = file.get("pyramid/factors");
  state.pyramid.factors.assign(factors.values.begin(), factors.values.end());
  state.pyramid.base_resolution = static_cast<int>(file.get("pyramid/base").values.at(0));
  state.pyramid.validate();

  state.epoch = static_cast<int>(file.get("meta/epoch").values.at(0));
  const auto& seed = file.get("meta/seed");
  check(seed.values.size() == 2, "checkpoint: tensor 'meta/seed' malformed");
  state.seed = static_cast<std::uint64_t>(seed.values[0]) |
               (static_cast<std::uint64_t>(seed.values[1]) << 32);
  return state;
}

template <typename T>
TrainedState<T> load_checkpoint(const std::string& path) {
  return checkpoint_to_state<T>(load_checkpoint_file(path));
}

}  // namespace fcnbnl
