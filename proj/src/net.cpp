#include "reconuq/net.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "reconuq/errors.hpp"
#include "reconuq/rng.hpp"
#include "reconuq/uqt1.hpp"

namespace reconuq {

void NetConfig::validate() const {
  if (levels < 2) throw ConfigError("net.levels must be >= 2");
  if (base_channels < 4) throw ConfigError("net.base_channels must be >= 4");
  if (growth < 1) throw ConfigError("net.growth must be >= 1");
  if (convs_per_block < 1) throw ConfigError("net.convs_per_block must be >= 1");
  if (in_channels < 1) throw ConfigError("net.in_channels must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0))
    throw ConfigError("net.dropout_p must be in [0,1)");
}

void to_json(nlohmann::json& j, const NetConfig& c) {
  j = nlohmann::json{{"levels", c.levels},
                     {"base_channels", c.base_channels},
                     {"growth", c.growth},
                     {"convs_per_block", c.convs_per_block},
                     {"in_channels", c.in_channels},
                     {"dropout_p", c.dropout_p},
                     {"recon_branch", c.recon_branch}};
}

void from_json(const nlohmann::json& j, NetConfig& c) {
  c.levels = j.value("levels", c.levels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.growth = j.value("growth", c.growth);
  c.convs_per_block = j.value("convs_per_block", c.convs_per_block);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.dropout_p = j.value("dropout_p", c.dropout_p);
  c.recon_branch = j.value("recon_branch", c.recon_branch);
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

std::string net_config_hash(const NetConfig& c) {
  nlohmann::json j = c;
  return hash_hex(fnv1a(j.dump()));
}

template <typename S>
int ParamsT<S>::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].name == name) return static_cast<int>(i);
  return -1;
}

template <typename S>
std::int64_t ParamsT<S>::count() const {
  std::int64_t n = 0;
  for (const auto& t : tensors) n += t.value.size();
  return n;
}

template struct ParamsT<float>;
template struct ParamsT<double>;

namespace {

struct ParamSpec {
  std::string name;
  std::vector<int> shape;  // [out, in, 3, 3] for kernels, [out] for biases
};

void push_conv(std::vector<ParamSpec>& out, const std::string& name, int c_out, int c_in) {
  out.push_back({name + "/w", {c_out, c_in, 3, 3}});
  out.push_back({name + "/b", {c_out}});
}

void push_dense_block(std::vector<ParamSpec>& out, const std::string& prefix,
                      const NetConfig& cfg, int c_in) {
  for (int j = 0; j < cfg.convs_per_block; ++j)
    push_conv(out, prefix + "/d" + std::to_string(j), cfg.growth, c_in + j * cfg.growth);
}

void push_decoder(std::vector<ParamSpec>& out, const std::string& branch,
                  const NetConfig& cfg) {
  for (int l = cfg.levels - 2; l >= 0; --l) {
    const std::string ls = std::to_string(l);
    push_conv(out, branch + "/up" + ls, cfg.enc_in(l), cfg.enc_out(l + 1));
    push_conv(out, branch + "/merge" + ls, cfg.enc_in(l), cfg.enc_in(l) + cfg.enc_out(l));
    push_dense_block(out, branch + "/l" + ls, cfg, cfg.enc_in(l));
  }
  push_conv(out, branch + "/head", 1, cfg.enc_out(0));
}

// Tensor order is load-bearing: the encoder and dose decoder come first so a
// recon_branch=false net is an exact prefix, draw-for-draw, of the dual one.
std::vector<ParamSpec> param_specs(const NetConfig& cfg) {
  std::vector<ParamSpec> out;
  push_conv(out, "enc/stem", cfg.base_channels, cfg.in_channels);
  for (int l = 0; l < cfg.levels; ++l) {
    push_dense_block(out, "enc/l" + std::to_string(l), cfg, cfg.enc_in(l));
    if (l + 1 < cfg.levels)
      push_conv(out, "enc/down" + std::to_string(l), cfg.enc_in(l + 1), cfg.enc_out(l));
  }
  push_decoder(out, "dec_dose", cfg);
  if (cfg.recon_branch) push_decoder(out, "dec_recon", cfg);
  return out;
}

}  // namespace

Params init(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Params p;
  Rng rng(seed);
  for (const auto& spec : param_specs(cfg)) {
    NamedTensor<float> t{spec.name, Tensor<float>(spec.shape)};
    if (spec.shape.size() == 4) {
      const double fan_in = static_cast<double>(spec.shape[1]) * spec.shape[2] * spec.shape[3];
      const double sd = std::sqrt(2.0 / fan_in);
      for (std::int64_t i = 0; i < t.value.size(); ++i)
        t.value.data[i] = static_cast<float>(rng.normal() * sd);
    }
    p.tensors.push_back(std::move(t));
  }
  return p;
}

ParamsT<double> widen(const Params& p) {
  ParamsT<double> out;
  out.tensors.reserve(p.tensors.size());
  for (const auto& t : p.tensors) {
    NamedTensor<double> d{t.name, Tensor<double>(t.value.shape)};
    d.value.data = t.value.data.template cast<double>();
    out.tensors.push_back(std::move(d));
  }
  return out;
}

template <typename S>
Tensor<S> dropout_multipliers(const std::vector<int>& shape, double p, std::uint64_t seed) {
  Tensor<S> m(shape);
  Rng rng(seed);
  const S scale = static_cast<S>(1.0 / (1.0 - p));
  for (std::int64_t i = 0; i < m.size(); ++i)
    m.data[i] = rng.uniform() < p ? S(0) : scale;
  return m;
}

template Tensor<float> dropout_multipliers(const std::vector<int>&, double, std::uint64_t);
template Tensor<double> dropout_multipliers(const std::vector<int>&, double, std::uint64_t);

namespace {

std::atomic<std::uint64_t> g_forward_passes{0};

enum class OpKind { kInput, kConv, kRelu, kUpsample2, kConcat, kDropout };

template <typename S>
struct TapeNode {
  OpKind kind = OpKind::kInput;
  std::vector<int> inputs;
  Tensor<S> out;
  int weight = -1;  // param index of the kernel; bias is weight+1
  int stride = 1;
  Tensor<S> drop_mask;
};

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
struct Workspace {
  std::vector<S> col, dcol;
};

template <typename S>
Workspace<S>& workspace() {
  thread_local Workspace<S> ws;
  return ws;
}

// Unpacks x [Cin,H,W] into (Ho*Wo) x (Cin*9) column-major; column c*9+ky*3+kx
// holds the input plane c sampled at offset (ky-1, kx-1) with zero padding.
template <typename S>
void im2col(const Tensor<S>& x, int stride, int ho, int wo, S* col) {
  const int cin = x.shape[0], h = x.shape[1], w = x.shape[2];
  const std::int64_t npix = static_cast<std::int64_t>(ho) * wo;
  const S* xp = x.data.data();
  for (int c = 0; c < cin; ++c) {
    const S* plane = xp + static_cast<std::int64_t>(c) * h * w;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        S* column = col + (static_cast<std::int64_t>(c) * 9 + ky * 3 + kx) * npix;
        std::memset(column, 0, sizeof(S) * static_cast<std::size_t>(npix));
        // ix = ox*stride + kx - 1 must land in [0, w)
        const int ox_lo = kx == 0 ? 1 : 0;
        const int ox_hi = std::min(wo - 1, (w - kx) / stride);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) continue;
          const S* src = plane + static_cast<std::int64_t>(iy) * w;
          S* dst = column + static_cast<std::int64_t>(oy) * wo;
          if (stride == 1) {
            const int ix0 = ox_lo + kx - 1;
            std::memcpy(dst + ox_lo, src + ix0,
                        sizeof(S) * static_cast<std::size_t>(ox_hi - ox_lo + 1));
          } else {
            for (int ox = ox_lo; ox <= ox_hi; ++ox)
              dst[ox] = src[ox * stride + kx - 1];
          }
        }
      }
    }
  }
}

// Scatter-adds a (Ho*Wo) x (Cin*9) gradient back onto dx [Cin,H,W].
template <typename S>
void col2im_add(const S* dcol, int stride, int ho, int wo, Tensor<S>& dx) {
  const int cin = dx.shape[0], h = dx.shape[1], w = dx.shape[2];
  const std::int64_t npix = static_cast<std::int64_t>(ho) * wo;
  S* xp = dx.data.data();
  for (int c = 0; c < cin; ++c) {
    S* plane = xp + static_cast<std::int64_t>(c) * h * w;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const S* column = dcol + (static_cast<std::int64_t>(c) * 9 + ky * 3 + kx) * npix;
        const int ox_lo = kx == 0 ? 1 : 0;
        const int ox_hi = std::min(wo - 1, (w - kx) / stride);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) continue;
          S* row = plane + static_cast<std::int64_t>(iy) * w;
          const S* src = column + static_cast<std::int64_t>(oy) * wo;
          for (int ox = ox_lo; ox <= ox_hi; ++ox)
            row[ox * stride + kx - 1] += src[ox];
        }
      }
    }
  }
}

inline int conv_out_extent(int n, int stride) {
  return (n - 1) / stride + 1;  // kernel 3, pad 1
}

}  // namespace

template <typename S>
struct TapeT {
  std::vector<TapeNode<S>> nodes;
  int dose_node = -1;
  int recon_node = -1;
};

namespace {

template <typename S>
class GraphBuilder {
 public:
  GraphBuilder(const ParamsT<S>& p, const NetConfig& cfg, Mode mode, std::uint64_t seed)
      : p_(p), cfg_(cfg), mode_(mode), seed_(seed) {
    tape_ = std::make_shared<TapeT<S>>();
  }

  int input(const Tensor<S>& x) {
    TapeNode<S> n;
    n.kind = OpKind::kInput;
    n.out = x;
    return push(std::move(n));
  }

  int conv(int x, const std::string& name, int stride) {
    const int wi = p_.index_of(name + "/w");
    if (wi < 0) throw ConfigError("missing parameter " + name + "/w");
    const Tensor<S>& w = p_.tensors[static_cast<std::size_t>(wi)].value;
    const Tensor<S>& b = p_.tensors[static_cast<std::size_t>(wi) + 1].value;
    const Tensor<S>& in = out(x);
    const int cin = in.shape[0], h = in.shape[1], wd = in.shape[2];
    if (w.shape[1] != cin)
      throw ShapeMismatch("conv " + name + ": expected " + std::to_string(w.shape[1]) +
                          " input channels, got " + std::to_string(cin));
    const int cout = w.shape[0];
    const int ho = conv_out_extent(h, stride), wo = conv_out_extent(wd, stride);
    const std::int64_t npix = static_cast<std::int64_t>(ho) * wo;
    const std::int64_t k = static_cast<std::int64_t>(cin) * 9;

    auto& ws = workspace<S>();
    ws.col.resize(static_cast<std::size_t>(npix * k));
    im2col(in, stride, ho, wo, ws.col.data());

    TapeNode<S> n;
    n.kind = OpKind::kConv;
    n.inputs = {x};
    n.weight = wi;
    n.stride = stride;
    n.out = Tensor<S>({cout, ho, wo});

    Eigen::Map<const Mat<S>> col(ws.col.data(), npix, k);
    Eigen::Map<const RowMat<S>> wm(w.data.data(), cout, k);
    Eigen::Map<Mat<S>> y(n.out.data.data(), npix, cout);
    y.noalias() = col * wm.transpose();
    for (int c = 0; c < cout; ++c) y.col(c).array() += b.data[c];
    return push(std::move(n));
  }

  int relu(int x) {
    TapeNode<S> n;
    n.kind = OpKind::kRelu;
    n.inputs = {x};
    n.out = Tensor<S>(out(x).shape);
    n.out.data = out(x).data.max(S(0));
    return push(std::move(n));
  }

  int upsample2(int x) {
    const Tensor<S>& in = out(x);
    const int c = in.shape[0], h = in.shape[1], w = in.shape[2];
    TapeNode<S> n;
    n.kind = OpKind::kUpsample2;
    n.inputs = {x};
    n.out = Tensor<S>({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch) {
      const S* src = in.data.data() + static_cast<std::int64_t>(ch) * h * w;
      S* dst = n.out.data.data() + static_cast<std::int64_t>(ch) * 4 * h * w;
      for (int y = 0; y < h; ++y) {
        S* row0 = dst + static_cast<std::int64_t>(2 * y) * 2 * w;
        S* row1 = row0 + 2 * w;
        for (int xx = 0; xx < w; ++xx) {
          const S v = src[y * w + xx];
          row0[2 * xx] = row0[2 * xx + 1] = v;
          row1[2 * xx] = row1[2 * xx + 1] = v;
        }
      }
    }
    return push(std::move(n));
  }

  int concat(const std::vector<int>& xs) {
    if (xs.size() == 1) return xs[0];
    int ctot = 0;
    const auto& first = out(xs[0]);
    for (int x : xs) {
      ctot += out(x).shape[0];
      if (out(x).shape[1] != first.shape[1] || out(x).shape[2] != first.shape[2])
        throw ShapeMismatch("concat: spatial shapes differ");
    }
    TapeNode<S> n;
    n.kind = OpKind::kConcat;
    n.inputs = xs;
    n.out = Tensor<S>({ctot, first.shape[1], first.shape[2]});
    std::int64_t off = 0;
    for (int x : xs) {
      const auto& t = out(x);
      std::memcpy(n.out.data.data() + off, t.data.data(),
                  sizeof(S) * static_cast<std::size_t>(t.size()));
      off += t.size();
    }
    return push(std::move(n));
  }

  int dropout(int x) {
    const bool active = cfg_.dropout_p > 0.0 &&
                        (mode_ == Mode::kMcDropout || mode_ == Mode::kTrain);
    if (!active) return x;
    TapeNode<S> n;
    n.kind = OpKind::kDropout;
    n.inputs = {x};
    n.drop_mask = dropout_multipliers<S>(out(x).shape, cfg_.dropout_p,
                                         mix64(seed_, 0x64726f70ULL, static_cast<std::uint64_t>(site_++)));
    n.out = Tensor<S>(out(x).shape);
    n.out.data = out(x).data * n.drop_mask.data;
    return push(std::move(n));
  }

  int dense_block(int x, const std::string& prefix) {
    std::vector<int> feats = {x};
    for (int j = 0; j < cfg_.convs_per_block; ++j) {
      const int in = concat(feats);
      feats.push_back(relu(conv(in, prefix + "/d" + std::to_string(j), 1)));
    }
    return concat(feats);
  }

  int decode(const std::string& branch, const std::vector<int>& skips) {
    int d = skips.back();
    for (int l = cfg_.levels - 2; l >= 0; --l) {
      const std::string ls = std::to_string(l);
      const int u = relu(conv(upsample2(d), branch + "/up" + ls, 1));
      const int m = relu(conv(concat({u, skips[static_cast<std::size_t>(l)]}),
                              branch + "/merge" + ls, 1));
      d = dropout(dense_block(m, branch + "/l" + ls));
    }
    return conv(d, branch + "/head", 1);
  }

  const Tensor<S>& out(int i) const { return tape_->nodes[static_cast<std::size_t>(i)].out; }
  std::shared_ptr<TapeT<S>> tape() { return tape_; }

 private:
  int push(TapeNode<S>&& n) {
    tape_->nodes.push_back(std::move(n));
    return static_cast<int>(tape_->nodes.size()) - 1;
  }

  const ParamsT<S>& p_;
  const NetConfig& cfg_;
  Mode mode_;
  std::uint64_t seed_;
  int site_ = 0;
  std::shared_ptr<TapeT<S>> tape_;
};

}  // namespace

template <typename S>
ForwardOutputT<S> forward_t(const ParamsT<S>& p, const NetConfig& cfg,
                            const Tensor<S>& x, Mode mode, std::uint64_t rng_seed) {
  cfg.validate();
  if (x.rank() != 3)
    throw ShapeMismatch("forward: input must be [channels, rows, cols]");
  if (x.shape[0] != cfg.in_channels)
    throw ShapeMismatch("forward: input has " + std::to_string(x.shape[0]) +
                        " channels, config expects " + std::to_string(cfg.in_channels));
  const int div = 1 << (cfg.levels - 1);
  if (x.shape[1] % div != 0 || x.shape[2] % div != 0)
    throw ShapeMismatch("forward: spatial extents must be divisible by " + std::to_string(div));

  GraphBuilder<S> g(p, cfg, mode, rng_seed);
  const int x0 = g.input(x);
  int cur = g.relu(g.conv(x0, "enc/stem", 1));

  std::vector<int> skips;
  for (int l = 0; l < cfg.levels; ++l) {
    const int blk = g.dropout(g.dense_block(cur, "enc/l" + std::to_string(l)));
    skips.push_back(blk);
    if (l + 1 < cfg.levels)
      cur = g.relu(g.conv(blk, "enc/down" + std::to_string(l), 2));
  }

  auto tape = g.tape();
  tape->dose_node = g.decode("dec_dose", skips);
  if (cfg.recon_branch) tape->recon_node = g.decode("dec_recon", skips);

  ForwardOutputT<S> fo;
  fo.dose_hat = tape->nodes[static_cast<std::size_t>(tape->dose_node)].out;
  if (cfg.recon_branch)
    fo.ct_hat = tape->nodes[static_cast<std::size_t>(tape->recon_node)].out;
  fo.tape = std::move(tape);
  g_forward_passes.fetch_add(1, std::memory_order_relaxed);
  return fo;
}

template ForwardOutputT<float> forward_t(const ParamsT<float>&, const NetConfig&,
                                         const Tensor<float>&, Mode, std::uint64_t);
template ForwardOutputT<double> forward_t(const ParamsT<double>&, const NetConfig&,
                                          const Tensor<double>&, Mode, std::uint64_t);

std::uint64_t forward_pass_count() { return g_forward_passes.load(); }
void reset_forward_pass_count() { g_forward_passes.store(0); }

namespace {

template <typename S>
Tensor<S> stack_channels(const std::vector<Volume>& chans) {
  const auto& sp = chans.front().shape;
  if (sp.size() != 2) throw ShapeMismatch("stack_channels: expected 2D channels");
  Tensor<S> x({static_cast<int>(chans.size()), sp[0], sp[1]});
  std::int64_t off = 0;
  for (const auto& ch : chans) {
    for (std::int64_t i = 0; i < ch.size(); ++i)
      x.data[off + i] = static_cast<S>(ch.data[i]);
    off += ch.size();
  }
  return x;
}

// Seeds the output-node gradient and walks the tape backwards, accumulating
// per-node gradients and named parameter gradients.
template <typename S>
void backward(const TapeT<S>& tape, const ParamsT<S>& p,
              const Tensor<S>& d_dose, const Tensor<S>* d_recon,
              ParamsT<S>& grads) {
  std::vector<Tensor<S>> node_grad(tape.nodes.size());
  auto ensure = [&](int i) -> Tensor<S>& {
    auto& g = node_grad[static_cast<std::size_t>(i)];
    if (g.size() == 0) g = Tensor<S>(tape.nodes[static_cast<std::size_t>(i)].out.shape);
    return g;
  };

  ensure(tape.dose_node).data += d_dose.data;
  if (d_recon) ensure(tape.recon_node).data += d_recon->data;

  auto& ws = workspace<S>();
  for (int i = static_cast<int>(tape.nodes.size()) - 1; i >= 0; --i) {
    const auto& node = tape.nodes[static_cast<std::size_t>(i)];
    auto& gout = node_grad[static_cast<std::size_t>(i)];
    if (gout.size() == 0) continue;  // node does not influence the loss

    switch (node.kind) {
      case OpKind::kInput:
        break;
      case OpKind::kRelu: {
        auto& gin = ensure(node.inputs[0]);
        gin.data += gout.data * (node.out.data > S(0)).template cast<S>();
        break;
      }
      case OpKind::kDropout: {
        auto& gin = ensure(node.inputs[0]);
        gin.data += gout.data * node.drop_mask.data;
        break;
      }
      case OpKind::kConcat: {
        std::int64_t off = 0;
        for (int xi : node.inputs) {
          auto& gin = ensure(xi);
          gin.data += gout.data.segment(off, gin.size());
          off += gin.size();
        }
        break;
      }
      case OpKind::kUpsample2: {
        auto& gin = ensure(node.inputs[0]);
        const int c = gin.shape[0], h = gin.shape[1], w = gin.shape[2];
        for (int ch = 0; ch < c; ++ch) {
          S* dst = gin.data.data() + static_cast<std::int64_t>(ch) * h * w;
          const S* src = gout.data.data() + static_cast<std::int64_t>(ch) * 4 * h * w;
          for (int y = 0; y < h; ++y) {
            const S* row0 = src + static_cast<std::int64_t>(2 * y) * 2 * w;
            const S* row1 = row0 + 2 * w;
            for (int xx = 0; xx < w; ++xx)
              dst[y * w + xx] += row0[2 * xx] + row0[2 * xx + 1] + row1[2 * xx] + row1[2 * xx + 1];
          }
        }
        break;
      }
      case OpKind::kConv: {
        const auto& in = tape.nodes[static_cast<std::size_t>(node.inputs[0])].out;
        const int cin = in.shape[0];
        const int cout = node.out.shape[0], ho = node.out.shape[1], wo = node.out.shape[2];
        const std::int64_t npix = static_cast<std::int64_t>(ho) * wo;
        const std::int64_t k = static_cast<std::int64_t>(cin) * 9;

        ws.col.resize(static_cast<std::size_t>(npix * k));
        im2col(in, node.stride, ho, wo, ws.col.data());
        Eigen::Map<const Mat<S>> col(ws.col.data(), npix, k);
        Eigen::Map<const Mat<S>> dy(gout.data.data(), npix, cout);

        auto& gw = grads.tensors[static_cast<std::size_t>(node.weight)].value;
        auto& gb = grads.tensors[static_cast<std::size_t>(node.weight) + 1].value;
        Eigen::Map<RowMat<S>> gwm(gw.data.data(), cout, k);
        gwm.noalias() += dy.transpose() * col;
        for (int c = 0; c < cout; ++c) gb.data[c] += dy.col(c).sum();

        const auto& w = p.tensors[static_cast<std::size_t>(node.weight)].value;
        Eigen::Map<const RowMat<S>> wm(w.data.data(), cout, k);
        ws.dcol.resize(static_cast<std::size_t>(npix * k));
        Eigen::Map<Mat<S>> dcol(ws.dcol.data(), npix, k);
        dcol.noalias() = dy * wm;
        auto& gin = ensure(node.inputs[0]);
        col2im_add(ws.dcol.data(), node.stride, ho, wo, gin);
        break;
      }
    }
    gout = Tensor<S>();  // free as we go
  }
}

template <typename S>
ParamsT<S> zero_like(const ParamsT<S>& p) {
  ParamsT<S> g;
  g.tensors.reserve(p.tensors.size());
  for (const auto& t : p.tensors)
    g.tensors.push_back({t.name, Tensor<S>(t.value.shape)});
  return g;
}

}  // namespace

ForwardOutput forward(const Params& p, const NetConfig& cfg, const Patch& x,
                      Mode mode, std::uint64_t rng_seed) {
  return forward_t<float>(p, cfg, stack_channels<float>(x.channels), mode, rng_seed);
}

BatchItem to_batch_item(const Patch& p, double rx_high) {
  if (!p.dose) throw EmptyTarget("to_batch_item: patch has no dose label");
  BatchItem item;
  item.x = stack_channels<float>(p.channels);
  item.dose = Tensor<float>({1, p.dose->shape[0], p.dose->shape[1]});
  const float inv = static_cast<float>(1.0 / rx_high);
  for (std::int64_t i = 0; i < p.dose->size(); ++i)
    item.dose.data[i] = p.dose->data[i] * inv;
  return item;
}

template <typename S>
LossGradT<S> loss_and_grad_t(const ParamsT<S>& p, const NetConfig& cfg,
                             const std::vector<BatchItemT<S>>& batch, Mode mode,
                             std::uint64_t rng_seed) {
  if (batch.empty()) throw LengthMismatch("loss_and_grad: empty batch");
  LossGradT<S> r;
  r.grads = zero_like(p);
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& item = batch[b];
    auto fo = forward_t<S>(p, cfg, item.x, mode, mix64(rng_seed, b));
    const std::int64_t npix = fo.dose_hat.size();
    const double inv_n = 1.0 / static_cast<double>(npix);

    Tensor<S> d_dose(fo.dose_hat.shape);
    double dose_term = 0.0;
    for (std::int64_t i = 0; i < npix; ++i) {
      const double diff = static_cast<double>(fo.dose_hat.data[i]) -
                          static_cast<double>(item.dose.data[i]);
      dose_term += diff * diff;
      d_dose.data[i] = static_cast<S>(2.0 * diff * inv_n * inv_b);
    }
    r.dose_term += dose_term * inv_n * inv_b;

    Tensor<S> d_recon;
    if (cfg.recon_branch) {
      d_recon = Tensor<S>(fo.ct_hat->shape);
      double ct_term = 0.0;
      // The reconstruction target is the CT the net consumed: channel 0 of x.
      for (std::int64_t i = 0; i < npix; ++i) {
        const double diff = static_cast<double>(fo.ct_hat->data[i]) -
                            static_cast<double>(item.x.data[i]);
        ct_term += diff * diff;
        d_recon.data[i] = static_cast<S>(2.0 * diff * inv_n * inv_b);
      }
      r.recon_term += ct_term * inv_n * inv_b;
    }
    backward<S>(*fo.tape, p, d_dose, cfg.recon_branch ? &d_recon : nullptr, r.grads);
  }
  r.loss = r.dose_term + r.recon_term;
  return r;
}

template LossGradT<float> loss_and_grad_t(const ParamsT<float>&, const NetConfig&,
                                          const std::vector<BatchItemT<float>>&, Mode,
                                          std::uint64_t);
template LossGradT<double> loss_and_grad_t(const ParamsT<double>&, const NetConfig&,
                                           const std::vector<BatchItemT<double>>&, Mode,
                                           std::uint64_t);

LossGrad loss_and_grad(const Params& p, const NetConfig& cfg,
                       const std::vector<Patch>& batch, std::uint64_t rng_seed) {
  std::vector<BatchItem> items;
  items.reserve(batch.size());
  for (const auto& pt : batch) items.push_back(to_batch_item(pt));
  return loss_and_grad_t<float>(p, cfg, items, Mode::kTrain, rng_seed);
}

double loss_only(const Params& p, const NetConfig& cfg, const std::vector<Patch>& batch) {
  if (batch.empty()) throw LengthMismatch("loss_only: empty batch");
  double loss = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& pt : batch) {
    const BatchItem item = to_batch_item(pt);
    auto fo = forward_t<float>(p, cfg, item.x, Mode::kEval, 0);
    const std::int64_t npix = fo.dose_hat.size();
    double dose_term = 0.0, ct_term = 0.0;
    for (std::int64_t i = 0; i < npix; ++i) {
      const double d = static_cast<double>(fo.dose_hat.data[i]) -
                       static_cast<double>(item.dose.data[i]);
      dose_term += d * d;
    }
    if (cfg.recon_branch) {
      for (std::int64_t i = 0; i < npix; ++i) {
        const double d = static_cast<double>(fo.ct_hat->data[i]) -
                         static_cast<double>(item.x.data[i]);
        ct_term += d * d;
      }
    }
    loss += (dose_term + ct_term) / static_cast<double>(npix) * inv_b;
  }
  return loss;
}

void save_params(const Params& p, const NetConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["config"] = cfg;
  manifest["config_hash"] = net_config_hash(cfg);
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    char fname[32];
    std::snprintf(fname, sizeof(fname), "p%04zu.uqt1", i);
    write_uqt1(dir / fname, p.tensors[i].value, p.tensors[i].name);
    tensors.push_back({{"name", p.tensors[i].name},
                       {"shape", p.tensors[i].value.shape},
                       {"file", fname}});
  }
  manifest["tensors"] = std::move(tensors);
  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

Params load_params(const std::filesystem::path& dir, NetConfig* cfg) {
  std::ifstream in(dir / "manifest.json", std::ios::binary);
  if (!in) throw IoError("cannot read " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad manifest in " + dir.string() + ": " + e.what());
  }
  if (cfg) *cfg = manifest.at("config").get<NetConfig>();

  Params p;
  for (const auto& entry : manifest.at("tensors")) {
    NamedTensor<float> t;
    t.name = entry.at("name").get<std::string>();
    std::string role;
    t.value = read_uqt1_f32(dir / entry.at("file").get<std::string>(), &role);
    if (t.value.shape != entry.at("shape").get<std::vector<int>>())
      throw IoError("manifest/tensor shape mismatch for " + t.name);
    p.tensors.push_back(std::move(t));
  }
  return p;
}

}  // namespace reconuq
