#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpl/matrix.hpp"
#include "cpl/rng.hpp"

namespace cpl {

struct EncoderConfig {
  std::size_t feat_dim = 8;
  std::size_t conv_kernel = 7;
  std::size_t conv_stride = 3;
  std::size_t conv_channels = 32;
  std::vector<std::size_t> hidden_dims = {32};
  std::size_t vocab_size = 7;  // includes blank at index vocab_size - 1
  double dropout = 0.1;
  std::uint64_t seed = 0;
};

struct AugmentConfig {
  std::size_t n_freq_masks = 2;
  std::size_t freq_mask_param = 2;
  std::size_t n_time_masks = 4;
  std::size_t time_mask_param = 6;
  double max_time_mask_ratio = 0.1;
  long activate_after_step = 200;
};

// Learning rate: linear warmup to base_lr over warmup_steps, constant,
// then halving at each step listed in decay_steps.
struct LRSchedule {
  double base_lr = 0.03;
  long warmup_steps = 64;
  std::vector<long> decay_steps;

  double lr(long step) const {
    double eta = base_lr;
    if (warmup_steps > 0 && step < warmup_steps)
      eta = base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    for (long d : decay_steps)
      if (step >= d) eta *= 0.5;
    return eta;
  }
};

struct ModelState {
  std::vector<double> theta;
  std::vector<double> adagrad_accum;
  long step = 0;
  double dropout_rate = 0.0;
};

enum class ForwardMode { Train, Inference };

// Intermediates retained by a forward pass for the matching backward.
struct Tape {
  std::vector<Matrix> inputs;       // post-dropout input of each linear layer
  std::vector<Matrix> activations;  // pre-dropout tanh output of each non-final layer
  std::vector<Matrix> masks;        // dropout scale masks (empty matrix = identity)
};

inline void set_dropout(ModelState& state, double rate) {
  if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("set_dropout: rate must be in [0,1]");
  state.dropout_rate = rate;
}

// Conv frontend (1-D over time, kernel x feat_dim window) followed by a
// small per-frame stack of fully connected tanh layers and a linear
// output projection. Flat parameter layout; analytic gradients via Tape.
class Encoder {
 public:
  explicit Encoder(const EncoderConfig& cfg) : cfg_(cfg) {
    if (cfg.conv_stride < 1) throw std::invalid_argument("Encoder: stride must be >= 1");
    if (cfg.vocab_size < 2) throw std::invalid_argument("Encoder: vocab_size must be >= 2");
    std::size_t in = cfg.conv_kernel * cfg.feat_dim;
    dims_.push_back(in);
    dims_.push_back(cfg.conv_channels);
    for (std::size_t h : cfg.hidden_dims) dims_.push_back(h);
    dims_.push_back(cfg.vocab_size);
    offsets_.push_back(0);
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      offsets_.push_back(offsets_.back() + dims_[l] * dims_[l + 1]);  // W
      offsets_.push_back(offsets_.back() + dims_[l + 1]);             // b
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  std::size_t num_params() const { return offsets_.back(); }
  std::size_t num_layers() const { return dims_.size() - 1; }

  ModelState init_state(Rng& rng) const {
    ModelState s;
    s.theta.resize(num_params());
    s.adagrad_accum.assign(num_params(), 0.0);
    s.dropout_rate = cfg_.dropout;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(dims_[l]));
      double* w = s.theta.data() + offsets_[2 * l];
      for (std::size_t i = 0; i < dims_[l] * dims_[l + 1]; ++i) w[i] = scale * rng.normal();
      double* b = s.theta.data() + offsets_[2 * l + 1];
      for (std::size_t i = 0; i < dims_[l + 1]; ++i) b[i] = 0.0;
    }
    return s;
  }

  std::size_t out_frames(std::size_t in_frames) const {
    return (in_frames - cfg_.conv_kernel) / cfg_.conv_stride + 1;
  }

  // features: T x feat_dim. Train mode applies dropout with the state's
  // current rate; inference mode is deterministic.
  Matrix forward(const ModelState& state, const Matrix& features, ForwardMode mode, Rng* rng,
                 Tape* tape = nullptr) const {
    if (features.cols != cfg_.feat_dim)
      throw std::invalid_argument("forward: feature dim mismatch");
    if (features.rows < cfg_.conv_kernel)
      throw std::invalid_argument("forward: input shorter than conv kernel");
    if (mode == ForwardMode::Train && state.dropout_rate > 0.0 && rng == nullptr)
      throw std::invalid_argument("forward: train mode with dropout needs an rng");

    const std::size_t tp = out_frames(features.rows);
    Matrix x(tp, cfg_.conv_kernel * cfg_.feat_dim);
    for (std::size_t t = 0; t < tp; ++t) {
      const std::size_t start = t * cfg_.conv_stride;
      for (std::size_t k = 0; k < cfg_.conv_kernel; ++k)
        for (std::size_t f = 0; f < cfg_.feat_dim; ++f)
          x(t, k * cfg_.feat_dim + f) = features(start + k, f);
    }

    if (tape) {
      tape->inputs.clear();
      tape->activations.clear();
      tape->masks.clear();
    }

    const std::size_t n_layers = num_layers();
    Matrix h = std::move(x);
    for (std::size_t l = 0; l < n_layers; ++l) {
      if (tape) tape->inputs.push_back(h);
      Matrix a = linear(state, l, h);
      if (l + 1 == n_layers) return a;  // output projection, no activation
      for (double& val : a.v) val = std::tanh(val);
      if (tape) tape->activations.push_back(a);
      Matrix mask;
      if (mode == ForwardMode::Train && state.dropout_rate > 0.0) {
        const double p = state.dropout_rate;
        mask = Matrix(a.rows, a.cols);
        for (double& mval : mask.v)
          mval = (p >= 1.0) ? 0.0 : (rng->uniform() < p ? 0.0 : 1.0 / (1.0 - p));
        for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] *= mask.v[i];
      }
      if (tape) tape->masks.push_back(std::move(mask));
      h = std::move(a);
    }
    return h;  // unreachable
  }

  // Exact gradient of sum(grad_logits .* logits) w.r.t. theta.
  std::vector<double> backward(const ModelState& state, const Tape& tape,
                               const Matrix& grad_logits) const {
    const std::size_t n_layers = num_layers();
    if (tape.inputs.size() != n_layers)
      throw std::invalid_argument("backward: tape does not match this encoder");
    if (grad_logits.rows != tape.inputs.back().rows || grad_logits.cols != cfg_.vocab_size)
      throw std::invalid_argument("backward: grad_logits shape mismatch");

    std::vector<double> grad(num_params(), 0.0);
    Matrix g = grad_logits;
    for (std::size_t li = n_layers; li-- > 0;) {
      const Matrix& in = tape.inputs[li];
      Matrix dw = matmul_tn(in, g);
      double* wgt = grad.data() + offsets_[2 * li];
      for (std::size_t i = 0; i < dw.v.size(); ++i) wgt[i] = dw.v[i];
      double* bg = grad.data() + offsets_[2 * li + 1];
      for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) bg[c] += g(r, c);
      if (li == 0) break;
      // grad w.r.t. layer input, then through dropout and tanh below
      Matrix w(dims_[li], dims_[li + 1]);
      const double* wp = state.theta.data() + offsets_[2 * li];
      std::copy(wp, wp + w.v.size(), w.v.begin());
      Matrix gin = matmul_nt(g, w);
      const Matrix& act = tape.activations[li - 1];
      const Matrix& mask = tape.masks[li - 1];
      for (std::size_t i = 0; i < gin.v.size(); ++i) {
        double gv = gin.v[i];
        if (!mask.v.empty()) gv *= mask.v[i];
        gin.v[i] = gv * (1.0 - act.v[i] * act.v[i]);
      }
      g = std::move(gin);
    }
    return grad;
  }

 private:
  Matrix linear(const ModelState& state, std::size_t l, const Matrix& in) const {
    const std::size_t din = dims_[l], dout = dims_[l + 1];
    const double* w = state.theta.data() + offsets_[2 * l];
    const double* b = state.theta.data() + offsets_[2 * l + 1];
    Matrix out(in.rows, dout);
    for (std::size_t r = 0; r < in.rows; ++r)
      for (std::size_t i = 0; i < din; ++i) {
        const double x = in(r, i);
        if (x == 0.0) continue;
        const double* wrow = w + i * dout;
        for (std::size_t j = 0; j < dout; ++j) out(r, j) += x * wrow[j];
      }
    for (std::size_t r = 0; r < in.rows; ++r)
      for (std::size_t j = 0; j < dout; ++j) out(r, j) += b[j];
    return out;
  }

  EncoderConfig cfg_;
  std::vector<std::size_t> dims_;     // layer widths incl. input and output
  std::vector<std::size_t> offsets_;  // W/b offsets into theta, 2 per layer
};

enum class StepStatus { Ok, NonFiniteGradient };

// accum += grad^2; theta -= eta_k * grad / (sqrt(accum) + eps); step += 1.
inline StepStatus adagrad_step(ModelState& state, const std::vector<double>& grad,
                               const LRSchedule& schedule, double eps = 1e-8) {
  if (grad.size() != state.theta.size())
    throw std::invalid_argument("adagrad_step: gradient shape mismatch");
  for (double g : grad)
    if (!std::isfinite(g)) return StepStatus::NonFiniteGradient;
  const double eta = schedule.lr(state.step);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    state.adagrad_accum[i] += grad[i] * grad[i];
    state.theta[i] -= eta * grad[i] / (std::sqrt(state.adagrad_accum[i]) + eps);
  }
  state.step += 1;
  return StepStatus::Ok;
}

// SpecAugment-style masking: identity before activate_after_step, then
// random frequency bands and time bands zeroed.
inline Matrix augment(const Matrix& features, const AugmentConfig& cfg, long step, Rng& rng) {
  Matrix out = features;
  if (step < cfg.activate_after_step) return out;
  const std::size_t T = features.rows;
  const std::size_t F = features.cols;
  for (std::size_t i = 0; i < cfg.n_freq_masks; ++i) {
    const std::size_t w = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<long>(std::min(cfg.freq_mask_param, F))));
    if (w == 0) continue;
    const std::size_t start =
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(F - w)));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = start; f < start + w; ++f) out(t, f) = 0.0;
  }
  const std::size_t max_time_w = std::min<std::size_t>(
      cfg.time_mask_param,
      static_cast<std::size_t>(cfg.max_time_mask_ratio * static_cast<double>(T)));
  for (std::size_t i = 0; i < cfg.n_time_masks; ++i) {
    const std::size_t w =
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(max_time_w)));
    if (w == 0) continue;
    const std::size_t start =
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(T - w)));
    for (std::size_t t = start; t < start + w; ++t)
      for (std::size_t f = 0; f < F; ++f) out(t, f) = 0.0;
  }
  return out;
}

// ---- checkpoint I/O: versioned little-endian binary, bit-exact round trip.

namespace detail {
inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline void write_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(d));
  std::memcpy(&bits, &d, 8);
  write_u64(os, bits);
}
inline double read_f64(std::istream& is) {
  const std::uint64_t bits = read_u64(is);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}
inline void write_vec(std::ostream& os, const std::vector<double>& v) {
  write_u64(os, v.size());
  for (double d : v) write_f64(os, d);
}
inline std::vector<double> read_vec(std::istream& is) {
  std::vector<double> v(read_u64(is));
  for (double& d : v) d = read_f64(is);
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const EncoderConfig& cfg,
                            const ModelState& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write("CPLCKPT1", 8);
  detail::write_u64(os, cfg.feat_dim);
  detail::write_u64(os, cfg.conv_kernel);
  detail::write_u64(os, cfg.conv_stride);
  detail::write_u64(os, cfg.conv_channels);
  detail::write_u64(os, cfg.hidden_dims.size());
  for (std::size_t h : cfg.hidden_dims) detail::write_u64(os, h);
  detail::write_u64(os, cfg.vocab_size);
  detail::write_f64(os, cfg.dropout);
  detail::write_u64(os, cfg.seed);
  detail::write_u64(os, static_cast<std::uint64_t>(state.step));
  detail::write_f64(os, state.dropout_rate);
  detail::write_vec(os, state.theta);
  detail::write_vec(os, state.adagrad_accum);
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline std::pair<EncoderConfig, ModelState> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != "CPLCKPT1")
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  EncoderConfig cfg;
  cfg.feat_dim = detail::read_u64(is);
  cfg.conv_kernel = detail::read_u64(is);
  cfg.conv_stride = detail::read_u64(is);
  cfg.conv_channels = detail::read_u64(is);
  cfg.hidden_dims.resize(detail::read_u64(is));
  for (std::size_t& h : cfg.hidden_dims) h = detail::read_u64(is);
  cfg.vocab_size = detail::read_u64(is);
  cfg.dropout = detail::read_f64(is);
  cfg.seed = detail::read_u64(is);
  ModelState st;
  st.step = static_cast<long>(detail::read_u64(is));
  st.dropout_rate = detail::read_f64(is);
  st.theta = detail::read_vec(is);
  st.adagrad_accum = detail::read_vec(is);
  if (!is) throw std::runtime_error("load_checkpoint: truncated file " + path);
  return {cfg, st};
}

}  // namespace cpl
