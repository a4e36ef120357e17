#pragma once

// Minimal differentiable building blocks: dense layers, a PointNet-style
// encoder (shared per-point layers + max pool), MLP heads, Adam.
//
// Forward passes return a trace object; backward consumes it and accumulates
// into the parameter gradient buffers, so one network can be run on several
// inputs (Siamese use) before any backward call.

#include "kpdeform/common.hpp"

#include <fstream>
#include <sstream>

namespace kpd {

struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;

  Tensor() = default;
  Tensor(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    values.assign(count, 0.0);
    grad.assign(count, 0.0);
  }

  std::size_t size() const { return values.size(); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

  Eigen::Map<RowMatrix> mat() { return {values.data(), rows(), cols()}; }
  Eigen::Map<const RowMatrix> mat() const { return {values.data(), rows(), cols()}; }
  Eigen::Map<RowMatrix> grad_mat() { return {grad.data(), rows(), cols()}; }
  Eigen::Map<Eigen::VectorXd> vec() { return {values.data(), static_cast<Eigen::Index>(values.size())}; }
  Eigen::Map<const Eigen::VectorXd> vec() const { return {values.data(), static_cast<Eigen::Index>(values.size())}; }
  Eigen::Map<Eigen::VectorXd> grad_vec() { return {grad.data(), static_cast<Eigen::Index>(grad.size())}; }
};

/// y = x W + b, W stored (in x out).
struct Dense {
  Tensor weight;
  Tensor bias;

  Dense() = default;
  Dense(const std::string& name, int in, int out) : weight(name + ".weight", {in, out}), bias(name + ".bias", {out}) {}

  int in() const { return weight.rows(); }
  int out() const { return weight.cols(); }

  void init_normal(Rng& rng, double stddev) {
    for (auto& w : weight.values) w = stddev * rng.normal();
    std::fill(bias.values.begin(), bias.values.end(), 0.0);
  }
};

// ---------------------------------------------------------------- encoder

struct EncoderTrace {
  bool valid = false;
  std::vector<RowMatrix> inputs;      // input of each layer
  std::vector<RowMatrix> activations; // post-ReLU output of each layer
  std::vector<Eigen::Index> argmax;   // pooled row per output channel
};

/// Shared per-point dense+ReLU layers followed by a channel-wise max over
/// points. The output is invariant under point permutations.
class PointEncoder {
 public:
  PointEncoder() = default;
  PointEncoder(const std::string& name, const std::vector<int>& widths) {
    int in = 3;
    for (std::size_t l = 0; l < widths.size(); ++l) {
      layers_.emplace_back(name + ".layer" + std::to_string(l), in, widths[l]);
      in = widths[l];
    }
  }

  void init(Rng& rng) {
    for (auto& l : layers_) l.init_normal(rng, std::sqrt(2.0 / l.in()));
  }

  int feature_size() const { return layers_.empty() ? 3 : layers_.back().out(); }
  std::vector<int> widths() const {
    std::vector<int> w;
    for (const auto& l : layers_) w.push_back(l.out());
    return w;
  }

  Eigen::VectorXd forward(const Points& cloud, EncoderTrace* trace = nullptr) const {
    if (cloud.rows() == 0) throw InvalidInput("encoder: empty point cloud");
    RowMatrix x = cloud;
    if (trace) {
      trace->inputs.clear();
      trace->activations.clear();
    }
    for (const auto& l : layers_) {
      RowMatrix z = x * l.weight.mat();
      z.rowwise() += l.bias.vec().transpose();
      z = z.cwiseMax(0.0);
      if (trace) {
        trace->inputs.push_back(std::move(x));
        trace->activations.push_back(z);
      }
      x = std::move(z);
    }
    Eigen::VectorXd feature(x.cols());
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(x.cols()), 0);
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      Eigen::Index best = 0;
      double v = x(0, c);
      for (Eigen::Index r = 1; r < x.rows(); ++r)
        if (x(r, c) > v) {  // first maximal index wins ties
          v = x(r, c);
          best = r;
        }
      feature(c) = v;
      arg[static_cast<std::size_t>(c)] = best;
    }
    if (trace) {
      trace->argmax = std::move(arg);
      trace->valid = true;
    }
    return feature;
  }

  /// Accumulates parameter gradients for d(loss)/d(feature) = grad_feature.
  void backward(const EncoderTrace& trace, const Eigen::VectorXd& grad_feature) {
    if (!trace.valid) throw std::logic_error("encoder backward called without a recorded forward pass");
    const auto& last = trace.activations.back();
    if (grad_feature.size() != last.cols()) throw InvalidInput("encoder backward: gradient size mismatch");
    RowMatrix g = RowMatrix::Zero(last.rows(), last.cols());
    for (Eigen::Index c = 0; c < last.cols(); ++c) g(trace.argmax[static_cast<std::size_t>(c)], c) = grad_feature(c);
    for (std::size_t li = layers_.size(); li-- > 0;) {
      auto& l = layers_[li];
      g = g.cwiseProduct((trace.activations[li].array() > 0.0).cast<double>().matrix());
      l.weight.grad_mat().noalias() += trace.inputs[li].transpose() * g;
      l.bias.grad_vec() += g.colwise().sum().transpose();
      if (li > 0) g = g * l.weight.mat().transpose();
    }
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }
  std::vector<Dense>& layers() { return layers_; }

 private:
  std::vector<Dense> layers_;
};

// ------------------------------------------------------------------- head

struct HeadTrace {
  bool valid = false;
  Eigen::VectorXd input;
  Eigen::VectorXd hidden;  // post-ReLU
  Eigen::VectorXd output;  // after squash
};

/// Dense -> ReLU -> Dense, optionally squashed into [-bound, bound] by
/// bound * tanh(.).
class Head {
 public:
  Head() = default;
  Head(const std::string& name, int in, int hidden, int out, double bound)
      : hidden_(name + ".hidden", in, hidden), out_(name + ".out", hidden, out), bound_(bound) {}

  /// He init for the hidden layer; the output layer uses `out_stddev`
  /// (0 gives an all-zero output layer).
  void init(Rng& rng, double out_stddev) {
    hidden_.init_normal(rng, std::sqrt(2.0 / hidden_.in()));
    out_.init_normal(rng, out_stddev);
  }

  int in() const { return hidden_.in(); }
  int hidden() const { return hidden_.out(); }
  int out() const { return out_.out(); }
  double bound() const { return bound_; }

  Eigen::VectorXd forward(const Eigen::VectorXd& feature, HeadTrace* trace = nullptr) const {
    if (feature.size() != in()) throw InvalidInput("head: feature size mismatch");
    Eigen::VectorXd h = (hidden_.weight.mat().transpose() * feature + hidden_.bias.vec()).cwiseMax(0.0);
    Eigen::VectorXd y = out_.weight.mat().transpose() * h + out_.bias.vec();
    if (bound_ > 0.0) y = bound_ * y.array().tanh();
    if (trace) {
      trace->input = feature;
      trace->hidden = h;
      trace->output = y;
      trace->valid = true;
    }
    return y;
  }

  /// Returns d(loss)/d(feature) and accumulates parameter gradients.
  Eigen::VectorXd backward(const HeadTrace& trace, const Eigen::VectorXd& grad_output) {
    if (!trace.valid) throw std::logic_error("head backward called without a recorded forward pass");
    if (grad_output.size() != out()) throw InvalidInput("head backward: gradient size mismatch");
    Eigen::VectorXd g = grad_output;
    if (bound_ > 0.0) {
      // d/dz [b tanh z] = b (1 - tanh^2 z) = b - y^2 / b
      g = g.array() * (bound_ - trace.output.array().square() / bound_);
    }
    out_.weight.grad_mat().noalias() += trace.hidden * g.transpose();
    out_.bias.grad_vec() += g;
    Eigen::VectorXd gh = out_.weight.mat() * g;
    gh = gh.array() * (trace.hidden.array() > 0.0).cast<double>();
    hidden_.weight.grad_mat().noalias() += trace.input * gh.transpose();
    hidden_.bias.grad_vec() += gh;
    return hidden_.weight.mat() * gh;
  }

  std::vector<Tensor*> parameters() { return {&hidden_.weight, &hidden_.bias, &out_.weight, &out_.bias}; }
  Dense& hidden_layer() { return hidden_; }
  Dense& output_layer() { return out_; }

 private:
  Dense hidden_;
  Dense out_;
  double bound_ = 0.0;
};

// ------------------------------------------------------------------- adam

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// Bias-corrected Adam update of every tensor from its `grad` buffer.
/// Throws before touching anything if a gradient is non-finite.
inline void adam_step(AdamState& state, std::span<Tensor* const> params) {
  for (const Tensor* p : params)
    for (double g : p->grad)
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + p->name + "'");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw InvalidInput("adam_step: parameter list changed between steps");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& p = *params[t];
    auto& m = state.m[t];
    auto& v = state.v[t];
    if (m.size() != p.size()) throw InvalidInput("adam_step: shape mismatch for '" + p.name + "'");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = p.grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.values[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// ------------------------------------------------------------- checkpoint

/// File layout: one line of JSON header, then the raw little-endian float64
/// blob of every tensor in order. The header carries tensor names/shapes,
/// blob size and an FNV-1a checksum of the blob.
inline void write_checkpoint(const std::string& path, json header, std::span<const Tensor* const> tensors) {
  std::string blob;
  json shapes = json::array();
  for (const Tensor* t : tensors) {
    shapes.push_back({{"name", t->name}, {"shape", t->shape}});
    for (double v : t->values) {
      const std::uint64_t bits = Hasher::to_le(v);
      blob.append(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
  header["format"] = "kpdeform-checkpoint";
  header["version"] = 1;
  header["tensors"] = shapes;
  header["blob_bytes"] = blob.size();
  header["checksum"] = Hasher().bytes(blob.data(), blob.size()).hex();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << header.dump() << '\n';
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

struct CheckpointBlob {
  json header;
  std::vector<std::pair<std::string, std::vector<double>>> tensors;
};

inline CheckpointBlob read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open checkpoint " + path);
  std::string line;
  std::getline(in, line);
  CheckpointBlob out;
  try {
    out.header = json::parse(line);
  } catch (const json::exception& e) {
    throw InvalidInput("checkpoint header is not valid JSON: " + std::string(e.what()));
  }
  if (out.header.value("format", "") != "kpdeform-checkpoint") throw InvalidInput("not a kpdeform checkpoint");
  const auto bytes = out.header.at("blob_bytes").get<std::size_t>();
  std::string blob(bytes, '\0');
  if (!in.read(blob.data(), static_cast<std::streamsize>(bytes))) throw InvalidInput("checkpoint blob truncated");
  if (Hasher().bytes(blob.data(), blob.size()).hex() != out.header.at("checksum").get<std::string>())
    throw InvalidInput("checkpoint checksum mismatch");
  std::size_t offset = 0;
  for (const auto& t : out.header.at("tensors")) {
    std::size_t count = 1;
    for (int d : t.at("shape").get<std::vector<int>>()) count *= static_cast<std::size_t>(d);
    std::vector<double> vals(count);
    if (offset + count * 8 > blob.size()) throw InvalidInput("checkpoint blob smaller than declared tensors");
    std::memcpy(vals.data(), blob.data() + offset, count * 8);
    offset += count * 8;
    out.tensors.emplace_back(t.at("name").get<std::string>(), std::move(vals));
  }
  return out;
}

}  // namespace kpd
