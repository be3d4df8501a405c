#pragma once

// Scalar scorers over embeddings: a linear map or a tanh MLP.
//
// Parameters live in one flat vector so gradients and optimizer state are
// plain congruent buffers. Layer l (fan_in -> fan_out) stores its weight
// matrix row-major (fan_out x fan_in) followed by its bias vector (omitted
// when the probe has no bias). A linear probe is the single layer dim -> 1.

#include <bit>
#include <charconv>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qprobe/data.hpp"
#include "qprobe/error.hpp"
#include "qprobe/rng.hpp"

namespace qprobe {

enum class ProbeKind { linear, mlp };

inline std::string to_string(ProbeKind k) { return k == ProbeKind::linear ? "linear" : "mlp"; }

inline ProbeKind parse_probe_kind(const std::string& s) {
  if (s == "linear") return ProbeKind::linear;
  if (s == "mlp") return ProbeKind::mlp;
  throw FormatError("unknown probe kind '" + s + "'");
}

/// Provenance carried alongside the parameters.
struct ProbeMetadata {
  std::optional<std::string> loss;
  std::optional<std::uint64_t> seed;
  std::optional<double> beta;

  friend bool operator==(const ProbeMetadata&, const ProbeMetadata&) = default;
};

struct LayerShape {
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
};

class Probe {
 public:
  Probe() = default;

  Probe(ProbeKind kind, std::size_t dim, std::vector<std::size_t> hidden_sizes, bool bias = true)
      : kind_(kind), dim_(dim), hidden_(std::move(hidden_sizes)), bias_(bias) {
    if (dim_ == 0) {
      throw ArgumentError("probe dim must be positive");
    }
    if (kind_ == ProbeKind::linear && !hidden_.empty()) {
      throw ArgumentError("linear probe takes no hidden sizes");
    }
    if (kind_ == ProbeKind::mlp && hidden_.empty()) {
      throw ArgumentError("mlp probe needs at least one hidden layer");
    }
    for (std::size_t h : hidden_) {
      if (h == 0) throw ArgumentError("hidden layer sizes must be positive");
    }
    std::size_t fan_in = dim_;
    for (std::size_t h : hidden_) {
      layers_.push_back({fan_in, h});
      fan_in = h;
    }
    layers_.push_back({fan_in, 1});
    std::size_t n = 0;
    for (const auto& l : layers_) {
      n += l.fan_in * l.fan_out + (bias_ ? l.fan_out : 0);
    }
    params_.assign(n, 0.0);
  }

  ProbeKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  const std::vector<std::size_t>& hidden_sizes() const { return hidden_; }
  bool has_bias() const { return bias_; }
  const std::vector<LayerShape>& layers() const { return layers_; }
  std::size_t param_count() const { return params_.size(); }

  std::span<const double> params() const { return params_; }
  std::span<double> params() { return params_; }

  ProbeMetadata& metadata() { return meta_; }
  const ProbeMetadata& metadata() const { return meta_; }

  friend bool operator==(const Probe& a, const Probe& b) {
    return a.kind_ == b.kind_ && a.dim_ == b.dim_ && a.hidden_ == b.hidden_ &&
           a.bias_ == b.bias_ && a.meta_ == b.meta_ &&
           std::equal(a.params_.begin(), a.params_.end(), b.params_.begin(), b.params_.end(),
                      [](double x, double y) {
                        return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
                      });
  }

 private:
  ProbeKind kind_ = ProbeKind::linear;
  std::size_t dim_ = 0;
  std::vector<std::size_t> hidden_;
  bool bias_ = true;
  std::vector<LayerShape> layers_;
  std::vector<double> params_;
  ProbeMetadata meta_;
};

/// d(objective)/d(theta), congruent with Probe::params().
struct ProbeGradient {
  std::vector<double> values;

  ProbeGradient() = default;
  explicit ProbeGradient(const Probe& p) : values(p.param_count(), 0.0) {}
};

namespace detail {

template <std::floating_point T>
void check_input(const Probe& p, std::span<const T> x) {
  if (x.size() != p.dim()) {
    throw ArgumentError("embedding dim " + std::to_string(x.size()) + " does not match probe dim " +
                        std::to_string(p.dim()));
  }
}

// Affine layer: out = W in + b, reading parameters from `w` (advanced past the layer).
inline void affine(const LayerShape& l, bool bias, const double*& w, std::span<const double> in,
                   std::span<double> out) {
  for (std::size_t o = 0; o < l.fan_out; ++o) {
    double s = 0.0;
    const double* row = w + o * l.fan_in;
    for (std::size_t i = 0; i < l.fan_in; ++i) {
      s += row[i] * in[i];
    }
    out[o] = s;
  }
  w += l.fan_in * l.fan_out;
  if (bias) {
    for (std::size_t o = 0; o < l.fan_out; ++o) {
      out[o] += w[o];
    }
    w += l.fan_out;
  }
}

}  // namespace detail

/// Q(x). Pure: repeated calls agree bitwise.
template <std::floating_point T>
double probe_forward(const Probe& p, std::span<const T> x) {
  detail::check_input(p, x);
  const double* w = p.params().data();
  if (p.kind() == ProbeKind::linear) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      s += w[i] * static_cast<double>(x[i]);
    }
    return p.has_bias() ? s + w[x.size()] : s;
  }
  std::vector<double> act(x.begin(), x.end());
  std::vector<double> next;
  const auto& layers = p.layers();
  for (std::size_t li = 0; li < layers.size(); ++li) {
    next.assign(layers[li].fan_out, 0.0);
    detail::affine(layers[li], p.has_bias(), w, act, next);
    if (li + 1 < layers.size()) {
      for (double& v : next) v = std::tanh(v);
    }
    act.swap(next);
  }
  return act[0];
}

inline double probe_forward(const Probe& p, Embedding x) { return probe_forward<float>(p, x); }

/// Adds scale * dQ/dtheta at `x` into `grad` and returns Q(x).
template <std::floating_point T>
double accumulate_probe_gradient(const Probe& p, std::span<const T> x, double scale,
                                 std::span<double> grad) {
  detail::check_input(p, x);
  if (grad.size() != p.param_count()) {
    throw InternalError("gradient buffer is not congruent with the probe");
  }
  const std::size_t d = x.size();
  if (p.kind() == ProbeKind::linear) {
    const double* w = p.params().data();
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      s += w[i] * static_cast<double>(x[i]);
      grad[i] += scale * static_cast<double>(x[i]);
    }
    if (p.has_bias()) {
      s += w[d];
      grad[d] += scale;
    }
    return s;
  }

  // Forward pass keeping every layer's activation (post-tanh; the input for layer 0).
  const auto& layers = p.layers();
  std::vector<std::vector<double>> acts;
  acts.reserve(layers.size() + 1);
  acts.emplace_back(x.begin(), x.end());
  std::vector<std::size_t> offsets;
  const double* base = p.params().data();
  const double* w = base;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    offsets.push_back(static_cast<std::size_t>(w - base));
    std::vector<double> z(layers[li].fan_out);
    detail::affine(layers[li], p.has_bias(), w, acts.back(), z);
    if (li + 1 < layers.size()) {
      for (double& v : z) v = std::tanh(v);
    }
    acts.push_back(std::move(z));
  }
  const double q = acts.back()[0];

  // Backward: delta holds dQ/d(pre-activation) of the current layer.
  std::vector<double> delta{scale};
  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& l = layers[li];
    const double* W = base + offsets[li];
    double* gW = grad.data() + offsets[li];
    const auto& in = acts[li];
    for (std::size_t o = 0; o < l.fan_out; ++o) {
      for (std::size_t i = 0; i < l.fan_in; ++i) {
        gW[o * l.fan_in + i] += delta[o] * in[i];
      }
    }
    if (p.has_bias()) {
      double* gb = gW + l.fan_in * l.fan_out;
      for (std::size_t o = 0; o < l.fan_out; ++o) gb[o] += delta[o];
    }
    if (li == 0) break;
    std::vector<double> prev(l.fan_in, 0.0);
    for (std::size_t o = 0; o < l.fan_out; ++o) {
      for (std::size_t i = 0; i < l.fan_in; ++i) {
        prev[i] += W[o * l.fan_in + i] * delta[o];
      }
    }
    for (std::size_t i = 0; i < l.fan_in; ++i) {
      prev[i] *= 1.0 - in[i] * in[i];  // tanh'
    }
    delta.swap(prev);
  }
  return q;
}

template <std::floating_point T>
std::pair<double, ProbeGradient> probe_forward_with_grad(const Probe& p, std::span<const T> x) {
  ProbeGradient g(p);
  const double q = accumulate_probe_gradient(p, x, 1.0, std::span<double>(g.values));
  return {q, std::move(g)};
}

inline std::pair<double, ProbeGradient> probe_forward_with_grad(const Probe& p, Embedding x) {
  return probe_forward_with_grad<float>(p, x);
}

/// Linear probes start at zero (every score equal, so the reranking policy
/// is the base policy). MLP weights are Glorot-uniform, biases zero.
inline Probe init_probe(ProbeKind kind, std::size_t dim, std::vector<std::size_t> hidden_sizes,
                        std::uint64_t seed, bool bias = true) {
  Probe p(kind, dim, std::move(hidden_sizes), bias);
  if (kind == ProbeKind::mlp) {
    Rng rng = Rng(seed).derive("init_probe");
    double* w = p.params().data();
    for (const auto& l : p.layers()) {
      const double s = std::sqrt(6.0 / static_cast<double>(l.fan_in + l.fan_out));
      for (std::size_t i = 0; i < l.fan_in * l.fan_out; ++i) {
        *w++ = rng.uniform(-s, s);
      }
      if (bias) w += l.fan_out;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Probe file: JSON with decimal parameters plus their exact IEEE-754 bit
// patterns as 16-digit hex strings. The hex form is authoritative.
// ---------------------------------------------------------------------------

inline constexpr int kProbeFormatVersion = 1;

inline std::string double_to_hex(double v) {
  char buf[17];
  const auto bits = std::bit_cast<std::uint64_t>(v);
  static constexpr char kDigits[] = "0123456789abcdef";
  for (int i = 0; i < 16; ++i) {
    buf[i] = kDigits[(bits >> (60 - 4 * i)) & 0xf];
  }
  buf[16] = '\0';
  return buf;
}

inline double hex_to_double(const std::string& s) {
  std::uint64_t bits = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), bits, 16);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.size() != 16) {
    throw FormatError("bad hex parameter '" + s + "'");
  }
  return std::bit_cast<double>(bits);
}

inline nlohmann::json probe_to_json(const Probe& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : p.layers()) {
    layers.push_back({{"fan_in", l.fan_in}, {"fan_out", l.fan_out}});
  }
  nlohmann::json hex = nlohmann::json::array();
  for (double v : p.params()) hex.push_back(double_to_hex(v));
  nlohmann::json meta = nlohmann::json::object();
  if (p.metadata().loss) meta["loss"] = *p.metadata().loss;
  if (p.metadata().seed) meta["seed"] = *p.metadata().seed;
  if (p.metadata().beta) meta["beta"] = *p.metadata().beta;
  return {{"qprobe_probe", kProbeFormatVersion},
          {"kind", to_string(p.kind())},
          {"dim", p.dim()},
          {"hidden_sizes", p.hidden_sizes()},
          {"bias", p.has_bias()},
          {"layers", layers},
          {"params", std::vector<double>(p.params().begin(), p.params().end())},
          {"params_hex", hex},
          {"metadata", meta}};
}

inline Probe probe_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object() || !j.contains("qprobe_probe")) {
      throw FormatError("not a probe file");
    }
    if (j.at("qprobe_probe") != kProbeFormatVersion) {
      throw FormatError("unsupported probe format version " + j.at("qprobe_probe").dump());
    }
    Probe p(parse_probe_kind(j.at("kind").get<std::string>()), j.at("dim").get<std::size_t>(),
            j.at("hidden_sizes").get<std::vector<std::size_t>>(), j.at("bias").get<bool>());
    const auto& hex = j.at("params_hex");
    const auto& dec = j.at("params");
    if (!hex.is_array() || hex.size() != p.param_count() || !dec.is_array() ||
        dec.size() != p.param_count()) {
      throw FormatError("probe file: expected " + std::to_string(p.param_count()) + " parameters");
    }
    auto params = p.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i] = hex_to_double(hex[i].get<std::string>());
      if (!std::isfinite(params[i])) {
        throw DataError("probe file: parameter " + std::to_string(i) + " is not finite");
      }
      if (dec[i].get<double>() != params[i]) {
        throw FormatError("probe file: decimal and hex disagree at parameter " + std::to_string(i));
      }
    }
    if (j.contains("metadata")) {
      const auto& m = j.at("metadata");
      if (m.contains("loss")) p.metadata().loss = m.at("loss").get<std::string>();
      if (m.contains("seed")) p.metadata().seed = m.at("seed").get<std::uint64_t>();
      if (m.contains("beta")) p.metadata().beta = m.at("beta").get<double>();
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("probe file: ") + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("probe file: ") + e.what());
  }
}

inline void save_probe(const Probe& p, const std::filesystem::path& path) {
  detail::write_file(path, probe_to_json(p).dump(2) + '\n');
}

inline Probe load_probe(const std::filesystem::path& path) {
  const auto text = detail::read_file(path);
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) {
    throw FormatError("probe file " + path.string() + " is not valid JSON");
  }
  return probe_from_json(j);
}

}  // namespace qprobe
