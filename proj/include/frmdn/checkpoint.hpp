#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "frmdn/binary_io.hpp"
#include "frmdn/model.hpp"

namespace frmdn {

inline constexpr std::string_view kCheckpointMagic = "FRMD";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> data;
};

/// Raw container: a config text block plus named float64 arrays.
struct CheckpointFile {
  std::string config_text;
  std::vector<NamedArray> arrays;

  const NamedArray* find(std::string_view name) const {
    for (const auto& a : arrays) {
      if (a.name == name) return &a;
    }
    return nullptr;
  }
};

inline std::string encode_checkpoint(const CheckpointFile& file) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(file.config_text.size()));
  w.bytes(file.config_text);
  w.u32(static_cast<std::uint32_t>(file.arrays.size()));
  for (const auto& a : file.arrays) {
    if (a.name.size() > 0xffff) throw FormatError("checkpoint: array name too long");
    if (a.dims.size() > 0xff) throw FormatError("checkpoint: array rank too large");
    std::uint64_t n = 1;
    for (auto dim : a.dims) n *= dim;
    if (n != a.data.size()) throw FormatError("checkpoint: array '" + a.name + "' dims do not match data");
    w.u16(static_cast<std::uint16_t>(a.name.size()));
    w.bytes(a.name);
    w.u8(static_cast<std::uint8_t>(a.dims.size()));
    for (auto dim : a.dims) w.u64(dim);
    for (double v : a.data) w.f64(v);
  }
  return w.take();
}

inline CheckpointFile decode_checkpoint(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4) != kCheckpointMagic) throw FormatError("checkpoint: bad magic (not an FRMD file)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  CheckpointFile file;
  file.config_text = std::string(r.bytes(r.u32()));
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = std::string(r.bytes(r.u16()));
    const auto rank = r.u8();
    std::uint64_t n = 1;
    for (std::uint8_t j = 0; j < rank; ++j) {
      a.dims.push_back(r.u64());
      n *= a.dims.back();
    }
    if (n > r.remaining() / 8) throw FormatError("checkpoint: array '" + a.name + "' extends past end of file");
    a.data.resize(n);
    for (auto& v : a.data) v = r.f64();
    file.arrays.push_back(std::move(a));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes after last array");
  return file;
}

/// Training progress stored alongside the weights so a run can resume.
struct TrainingState {
  OptimizerConfig optimizer;
  std::uint64_t optimizer_steps = 0;
  std::uint64_t epochs_done = 0;
  std::vector<Tensor> first;   // per-parameter moment buffers, may be empty
  std::vector<Tensor> second;
};

struct LoadedCheckpoint {
  FrmdnModel model;
  std::optional<TrainingState> training;
};

namespace checkpoint_detail {

inline NamedArray to_array(std::string name, const Tensor& t) {
  return {std::move(name), {t.rows(), t.cols()}, t.vec()};
}

inline Tensor from_array(const NamedArray& a, const Tensor& like) {
  if (a.dims.size() != 2 || a.dims[0] != like.rows() || a.dims[1] != like.cols()) {
    std::string got;
    for (auto dim : a.dims) got += (got.empty() ? "" : "x") + std::to_string(dim);
    throw FormatError("checkpoint: array '" + a.name + "' has shape [" + got + "], expected " + like.shape_string());
  }
  return Tensor(like.rows(), like.cols(), a.data);
}

inline std::string format_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace checkpoint_detail

inline CheckpointFile make_checkpoint(FrmdnModel& model, const TrainingState* training = nullptr) {
  using namespace checkpoint_detail;
  CheckpointFile file;
  file.config_text = model.config.to_text();
  std::vector<std::string> names;
  model.visit_parameters([&](const std::string& name, Tensor& t) {
    names.push_back(name);
    file.arrays.push_back(to_array(name, t));
  });
  if (training) {
    file.config_text += "optimizer=" + std::string(to_string(training->optimizer.kind)) + "\n";
    file.config_text += "lr=" + format_double(training->optimizer.lr) + "\n";
    file.config_text += "clip_norm=" + format_double(training->optimizer.clip_norm) + "\n";
    file.config_text += "optimizer_steps=" + std::to_string(training->optimizer_steps) + "\n";
    file.config_text += "epochs_done=" + std::to_string(training->epochs_done) + "\n";
    if (!training->first.empty()) {
      if (training->first.size() != names.size() || training->second.size() != names.size()) {
        throw ShapeError("checkpoint: optimizer state does not match parameter count");
      }
      for (std::size_t i = 0; i < names.size(); ++i) file.arrays.push_back(to_array("opt.m." + names[i], training->first[i]));
      for (std::size_t i = 0; i < names.size(); ++i) file.arrays.push_back(to_array("opt.v." + names[i], training->second[i]));
    }
  }
  return file;
}

/// Rebuilds the model from the config block, then overwrites every
/// parameter from the stored arrays.
inline LoadedCheckpoint load_checkpoint(const CheckpointFile& file) {
  using namespace checkpoint_detail;
  ModelConfig cfg;
  std::map<std::string, std::string> extra;
  for (const auto& [key, value] : config_detail::parse_lines(file.config_text)) {
    if (!cfg.set(key, value)) extra[key] = value;
  }
  LoadedCheckpoint out;
  try {
    out.model = FrmdnModel::create(cfg);
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint: invalid config block: ") + e.what());
  }
  std::vector<std::string> names;
  out.model.visit_parameters([&](const std::string& name, Tensor& t) {
    const auto* a = file.find(name);
    if (!a) throw FormatError("checkpoint: missing array '" + name + "'");
    t = from_array(*a, t);
    names.push_back(name);
  });
  if (extra.count("optimizer")) {
    TrainingState ts;
    ts.optimizer.kind = parse_optimizer(extra["optimizer"]);
    if (extra.count("lr")) ts.optimizer.lr = config_detail::to_double("lr", extra["lr"]);
    if (extra.count("clip_norm")) ts.optimizer.clip_norm = config_detail::to_double("clip_norm", extra["clip_norm"]);
    if (extra.count("optimizer_steps")) ts.optimizer_steps = config_detail::to_size("optimizer_steps", extra["optimizer_steps"]);
    if (extra.count("epochs_done")) ts.epochs_done = config_detail::to_size("epochs_done", extra["epochs_done"]);
    if (file.find("opt.m." + names.front())) {
      std::size_t i = 0;
      out.model.visit_parameters([&](const std::string& name, Tensor& t) {
        const auto* m = file.find("opt.m." + name);
        const auto* v = file.find("opt.v." + name);
        if (!m || !v) throw FormatError("checkpoint: incomplete optimizer state for '" + name + "'");
        ts.first.push_back(from_array(*m, t));
        ts.second.push_back(from_array(*v, t));
        ++i;
      });
    }
    out.training = std::move(ts);
  }
  return out;
}

inline void save_checkpoint(const std::string& path, FrmdnModel& model, const TrainingState* training = nullptr) {
  io::write_file(path, encode_checkpoint(make_checkpoint(model, training)));
}

inline LoadedCheckpoint read_checkpoint(const std::string& path) {
  return load_checkpoint(decode_checkpoint(io::read_file(path)));
}

}  // namespace frmdn
