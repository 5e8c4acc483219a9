#pragma once

#include <string>
#include <utility>
#include <vector>

#include "frmdn/binary_io.hpp"
#include "frmdn/model.hpp"

namespace frmdn {

/// Everything a training or evaluation run needs, settable from key=value
/// text (config file) and from command-line flags with the same names.
struct RunConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  std::size_t batch_size = 16;
  std::size_t window = 32;
  std::size_t epochs = 1;
  std::string data;   // training FSEQ
  std::string test;   // optional held-out FSEQ
  std::string out;    // checkpoint path
  std::string log;    // metrics CSV path
  std::string resume; // checkpoint to continue from

  /// Throws ValidationError for unknown keys or malformed values.
  void set(const std::string& key, const std::string& value) {
    using namespace config_detail;
    if (model.set(key, value)) return;
    if (key == "optimizer") optimizer.kind = parse_optimizer(value);
    else if (key == "lr") optimizer.lr = to_double(key, value);
    else if (key == "clip_norm") optimizer.clip_norm = to_double(key, value);
    else if (key == "batch_size") batch_size = to_size(key, value);
    else if (key == "window") window = to_size(key, value);
    else if (key == "epochs") epochs = to_size(key, value);
    else if (key == "data") data = value;
    else if (key == "test") test = value;
    else if (key == "out") out = value;
    else if (key == "log") log = value;
    else if (key == "resume") resume = value;
    else throw ValidationError("unknown config key '" + key + "'");
  }

  void apply_text(std::string_view text) {
    for (const auto& [k, v] : config_detail::parse_lines(text)) set(k, v);
  }

  void apply_file(const std::string& path) { apply_text(io::read_file(path)); }

  void validate() const {
    model.validate();
    if (!(optimizer.lr >= 0.0)) throw ValidationError("lr must be non-negative");
    if (!(optimizer.clip_norm > 0.0)) throw ValidationError("clip_norm must be positive");
    if (batch_size == 0) throw ValidationError("batch_size must be positive");
    if (window < 2) throw ValidationError("window must be at least 2");
  }
};

}  // namespace frmdn
