#include "uad/sae.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "uad/binary_io.hpp"
#include "uad/rng.hpp"

namespace uad {

LayerSpec conv_spec(int k, int s, int filters) {
  return {LayerKind::conv, k, k, s, s, filters};
}
LayerSpec tconv_spec(int k, int s, int filters) {
  return {LayerKind::tconv, k, k, s, s, filters};
}
LayerSpec gelu_spec() { return {LayerKind::gelu, 0, 0, 1, 1, 0}; }
LayerSpec batch_norm_spec() { return {LayerKind::batch_norm, 0, 0, 1, 1, 0}; }

namespace {

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::tconv: return "tconv";
    case LayerKind::gelu: return "gelu";
    default: return "batch_norm";
  }
}

Shape3 layer_output_shape(const LayerSpec& s, const Shape3& in, std::size_t index) {
  switch (s.kind) {
    case LayerKind::conv: {
      if (s.kh < 1 || s.kw < 1 || s.sh < 1 || s.sw < 1 || s.filters < 1)
        throw std::invalid_argument("layer " + std::to_string(index) + ": bad conv spec");
      if (in.h < s.kh || in.w < s.kw || (in.h - s.kh) % s.sh != 0 || (in.w - s.kw) % s.sw != 0)
        throw std::invalid_argument(
            "layer " + std::to_string(index) + ": conv " + std::to_string(s.kh) + "x" +
            std::to_string(s.kw) + "/" + std::to_string(s.sh) +
            " does not tile input " + std::to_string(in.h) + "x" + std::to_string(in.w) +
            " without padding");
      return {s.filters, (in.h - s.kh) / s.sh + 1, (in.w - s.kw) / s.sw + 1};
    }
    case LayerKind::tconv:
      if (s.kh < 1 || s.kw < 1 || s.sh < 1 || s.sw < 1 || s.filters < 1)
        throw std::invalid_argument("layer " + std::to_string(index) + ": bad tconv spec");
      return {s.filters, (in.h - 1) * s.sh + s.kh, (in.w - 1) * s.sw + s.kw};
    default:
      return in;
  }
}

std::vector<Shape3> stack_shapes(const Shape3& input, const std::vector<LayerSpec>& specs) {
  std::vector<Shape3> shapes{input};
  for (std::size_t i = 0; i < specs.size(); ++i)
    shapes.push_back(layer_output_shape(specs[i], shapes.back(), i));
  return shapes;
}

void build_stack(Stack& st, const Shape3& input) {
  st.shapes = stack_shapes(input, st.specs);
  st.conv.clear();
  st.bn.clear();
  for (std::size_t i = 0; i < st.specs.size(); ++i) {
    const auto& s = st.specs[i];
    const Shape3& in = st.shapes[i];
    if (s.kind == LayerKind::conv || s.kind == LayerKind::tconv) {
      ConvWeights w;
      const int rows = s.kind == LayerKind::conv ? s.filters : in.c;
      const int cols = s.kind == LayerKind::conv ? in.c : s.filters;
      w.k.assign(static_cast<std::size_t>(rows),
                 std::vector<Eigen::MatrixXd>(static_cast<std::size_t>(cols),
                                              Eigen::MatrixXd::Zero(s.kh, s.kw)));
      w.b = Eigen::VectorXd::Zero(s.filters);
      st.conv.push_back(std::move(w));
    } else if (s.kind == LayerKind::batch_norm) {
      BatchNormWeights w;
      w.scale = Eigen::VectorXd::Ones(in.c);
      w.shift = Eigen::VectorXd::Zero(in.c);
      w.run_mean = Eigen::VectorXd::Zero(in.c);
      w.run_var = Eigen::VectorXd::Ones(in.c);
      st.bn.push_back(std::move(w));
    }
  }
}

std::int64_t stack_params(const Stack& st) {
  std::int64_t n = 0;
  for (const auto& c : st.conv) {
    for (const auto& row : c.k)
      for (const auto& m : row) n += m.size();
    n += c.b.size();
  }
  for (const auto& b : st.bn) n += b.scale.size() + b.shift.size();
  return n;
}

template <typename FnConv, typename FnBn>
void walk_params(const Stack& st, FnConv&& on_conv, FnBn&& on_bn) {
  std::size_t ci = 0, bi = 0;
  for (std::size_t i = 0; i < st.specs.size(); ++i) {
    const auto kind = st.specs[i].kind;
    if (kind == LayerKind::conv || kind == LayerKind::tconv)
      on_conv(i, ci++);
    else if (kind == LayerKind::batch_norm)
      on_bn(i, bi++);
  }
}

}  // namespace

std::int64_t SaeModel::num_params() const {
  return stack_params(encoder) + stack_params(decoder);
}

Eigen::VectorXd SaeModel::pack() const {
  Eigen::VectorXd theta(num_params());
  std::int64_t at = 0;
  for (const Stack* st : {&encoder, &decoder}) {
    for (const auto& c : st->conv) {
      for (const auto& row : c.k)
        for (const auto& m : row) {
          std::copy(m.data(), m.data() + m.size(), theta.data() + at);
          at += m.size();
        }
      std::copy(c.b.data(), c.b.data() + c.b.size(), theta.data() + at);
      at += c.b.size();
    }
    for (const auto& b : st->bn) {
      std::copy(b.scale.data(), b.scale.data() + b.scale.size(), theta.data() + at);
      at += b.scale.size();
      std::copy(b.shift.data(), b.shift.data() + b.shift.size(), theta.data() + at);
      at += b.shift.size();
    }
  }
  return theta;
}

void SaeModel::unpack(const Eigen::VectorXd& theta) {
  if (theta.size() != num_params())
    throw std::invalid_argument("unpack: expected " + std::to_string(num_params()) +
                                " parameters, got " + std::to_string(theta.size()));
  std::int64_t at = 0;
  for (Stack* st : {&encoder, &decoder}) {
    for (auto& c : st->conv) {
      for (auto& row : c.k)
        for (auto& m : row) {
          std::copy(theta.data() + at, theta.data() + at + m.size(), m.data());
          at += m.size();
        }
      std::copy(theta.data() + at, theta.data() + at + c.b.size(), c.b.data());
      at += c.b.size();
    }
    for (auto& b : st->bn) {
      std::copy(theta.data() + at, theta.data() + at + b.scale.size(), b.scale.data());
      at += b.scale.size();
      std::copy(theta.data() + at, theta.data() + at + b.shift.size(), b.shift.data());
      at += b.shift.size();
    }
  }
}

std::string SaeModel::param_layer(std::int64_t i) const {
  std::int64_t at = 0;
  const char* names[2] = {"encoder", "decoder"};
  const Stack* stacks[2] = {&encoder, &decoder};
  for (int s = 0; s < 2; ++s) {
    std::int64_t layer_at = at;
    std::size_t ci = 0, bi = 0;
    for (std::size_t l = 0; l < stacks[s]->specs.size(); ++l) {
      const auto kind = stacks[s]->specs[l].kind;
      std::int64_t sz = 0;
      if (kind == LayerKind::conv || kind == LayerKind::tconv) {
        const auto& c = stacks[s]->conv[ci++];
        for (const auto& row : c.k)
          for (const auto& m : row) sz += m.size();
        sz += c.b.size();
      } else if (kind == LayerKind::batch_norm) {
        const auto& b = stacks[s]->bn[bi++];
        sz = b.scale.size() + b.shift.size();
      }
      if (i < layer_at + sz)
        return std::string(names[s]) + " layer " + std::to_string(l) + " (" +
               kind_name(kind) + ")";
      layer_at += sz;
    }
    at = layer_at;
  }
  return "unknown layer";
}

SaeModel make_sae(const Shape3& input, std::vector<LayerSpec> encoder,
                  std::vector<LayerSpec> decoder, double alpha) {
  if (input.c < 1 || input.h < 1 || input.w < 1)
    throw std::invalid_argument("make_sae: bad input shape");
  if (alpha < 0) throw std::invalid_argument("make_sae: alpha must be >= 0");
  SaeModel m;
  m.input = input;
  m.alpha = alpha;
  m.encoder.specs = std::move(encoder);
  m.decoder.specs = std::move(decoder);
  build_stack(m.encoder, input);
  build_stack(m.decoder, m.encoder.shapes.back());
  if (!m.decoder.specs.empty() && !(m.decoder.shapes.back() == input))
    throw std::invalid_argument(
        "make_sae: decoder output " + std::to_string(m.decoder.shapes.back().c) + "x" +
        std::to_string(m.decoder.shapes.back().h) + "x" +
        std::to_string(m.decoder.shapes.back().w) + " does not reproduce the input shape");
  return m;
}

std::vector<LayerSpec> mirror_decoder(const Shape3& input,
                                      const std::vector<LayerSpec>& encoder) {
  const auto shapes = stack_shapes(input, encoder);
  std::vector<LayerSpec> out;
  std::vector<std::pair<LayerSpec, int>> convs;  // spec + input channels
  for (std::size_t i = 0; i < encoder.size(); ++i)
    if (encoder[i].kind == LayerKind::conv)
      convs.emplace_back(encoder[i], shapes[i].c);
  for (auto it = convs.rbegin(); it != convs.rend(); ++it) {
    out.push_back(tconv_spec(it->first.kh, it->first.sh, it->second));
    if (std::next(it) != convs.rend()) {
      out.push_back(gelu_spec());
      out.push_back(batch_norm_spec());
    }
  }
  return out;
}

SaeModel make_reference_sae(int p, int channels, double alpha) {
  std::vector<LayerSpec> enc;
  const int kernels[4] = {5, 3, 3, 3};
  const int strides[4] = {1, 1, 3, 1};
  const int filters[4] = {3, 4, 12, 16};
  for (int i = 0; i < 4; ++i) {
    enc.push_back(conv_spec(kernels[i], strides[i], filters[i]));
    enc.push_back(gelu_spec());
    enc.push_back(batch_norm_spec());
  }
  const Shape3 input{channels, p, p};
  return make_sae(input, enc, mirror_decoder(input, enc), alpha);
}

void init_weights(SaeModel& m, std::uint64_t seed) {
  Rng rng(substream_seed(seed, "sae-init"));
  for (Stack* st : {&m.encoder, &m.decoder}) {
    std::size_t ci = 0;
    for (std::size_t i = 0; i < st->specs.size(); ++i) {
      const auto& s = st->specs[i];
      if (s.kind != LayerKind::conv && s.kind != LayerKind::tconv) continue;
      auto& w = st->conv[ci++];
      const int in_c = st->shapes[i].c;
      const double bound = 1.0 / std::sqrt(static_cast<double>(in_c) * s.kh * s.kw);
      for (auto& row : w.k)
        for (auto& kernel : row)
          for (Eigen::Index e = 0; e < kernel.size(); ++e)
            kernel.data()[e] = bound * (2.0 * rng.uniform() - 1.0);
      w.b.setZero();
    }
    for (auto& b : st->bn) {
      b.scale.setOnes();
      b.shift.setZero();
      b.run_mean.setZero();
      b.run_var.setOnes();
    }
  }
}

namespace {

Image zero_image(const Shape3& s) {
  return Image(static_cast<std::size_t>(s.c), Eigen::MatrixXd::Zero(s.h, s.w));
}

void conv_forward(const LayerSpec& s, const ConvWeights& w, const Image& in, Image& out) {
  for (std::size_t f = 0; f < out.size(); ++f) {
    auto& o = out[f];
    for (Eigen::Index oy = 0; oy < o.rows(); ++oy)
      for (Eigen::Index ox = 0; ox < o.cols(); ++ox) {
        double acc = w.b[static_cast<Eigen::Index>(f)];
        for (std::size_t c = 0; c < in.size(); ++c)
          acc += in[c].block(oy * s.sh, ox * s.sw, s.kh, s.kw).cwiseProduct(w.k[f][c]).sum();
        o(oy, ox) = acc;
      }
  }
}

void conv_backward(const LayerSpec& s, const ConvWeights& w, const Image& in, const Image& dout,
                   Image& din, ConvWeights& grad) {
  for (std::size_t f = 0; f < dout.size(); ++f) {
    const auto& dof = dout[f];
    grad.b[static_cast<Eigen::Index>(f)] += dof.sum();
    for (Eigen::Index oy = 0; oy < dof.rows(); ++oy)
      for (Eigen::Index ox = 0; ox < dof.cols(); ++ox) {
        const double g = dof(oy, ox);
        if (g == 0.0) continue;
        for (std::size_t c = 0; c < in.size(); ++c) {
          grad.k[f][c].noalias() += g * in[c].block(oy * s.sh, ox * s.sw, s.kh, s.kw);
          din[c].block(oy * s.sh, ox * s.sw, s.kh, s.kw).noalias() += g * w.k[f][c];
        }
      }
  }
}

void tconv_forward(const LayerSpec& s, const ConvWeights& w, const Image& in, Image& out) {
  for (std::size_t f = 0; f < out.size(); ++f) out[f].setConstant(w.b[static_cast<Eigen::Index>(f)]);
  for (std::size_t c = 0; c < in.size(); ++c) {
    const auto& ic = in[c];
    for (Eigen::Index iy = 0; iy < ic.rows(); ++iy)
      for (Eigen::Index ix = 0; ix < ic.cols(); ++ix) {
        const double v = ic(iy, ix);
        if (v == 0.0) continue;
        for (std::size_t f = 0; f < out.size(); ++f)
          out[f].block(iy * s.sh, ix * s.sw, s.kh, s.kw).noalias() += v * w.k[c][f];
      }
  }
}

void tconv_backward(const LayerSpec& s, const ConvWeights& w, const Image& in, const Image& dout,
                    Image& din, ConvWeights& grad) {
  for (std::size_t f = 0; f < dout.size(); ++f)
    grad.b[static_cast<Eigen::Index>(f)] += dout[f].sum();
  for (std::size_t c = 0; c < in.size(); ++c) {
    const auto& ic = in[c];
    for (Eigen::Index iy = 0; iy < ic.rows(); ++iy)
      for (Eigen::Index ix = 0; ix < ic.cols(); ++ix) {
        double acc = 0.0;
        for (std::size_t f = 0; f < dout.size(); ++f) {
          const auto block = dout[f].block(iy * s.sh, ix * s.sw, s.kh, s.kw);
          acc += block.cwiseProduct(w.k[c][f]).sum();
          grad.k[c][f].noalias() += ic(iy, ix) * block;
        }
        din[c](iy, ix) = acc;
      }
  }
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

struct BnCache {
  Eigen::VectorXd mean, var;        // batch statistics actually used
  std::vector<Image> xhat;          // normalized pre-affine activations
};

struct StackTrace {
  std::vector<std::vector<Image>> inputs;  // [layer][sample]
  std::vector<BnCache> bn;                 // by bn ordinal
};

// running_update, when non-null, receives the EMA update of the batch-norm
// running statistics (training mode only)
std::vector<Image> stack_forward(const Stack& st, std::vector<Image> batch, bool training,
                                 double bn_eps, double bn_momentum, StackTrace* trace,
                                 Stack* running_update = nullptr) {
  std::size_t ci = 0, bi = 0;
  if (trace) {
    trace->inputs.clear();
    trace->bn.clear();
  }
  for (std::size_t l = 0; l < st.specs.size(); ++l) {
    const auto& spec = st.specs[l];
    if (trace) trace->inputs.push_back(batch);
    switch (spec.kind) {
      case LayerKind::conv: {
        const auto& w = st.conv[ci++];
        for (auto& img : batch) {
          Image out = zero_image(st.shapes[l + 1]);
          conv_forward(spec, w, img, out);
          img = std::move(out);
        }
        break;
      }
      case LayerKind::tconv: {
        const auto& w = st.conv[ci++];
        for (auto& img : batch) {
          Image out = zero_image(st.shapes[l + 1]);
          tconv_forward(spec, w, img, out);
          img = std::move(out);
        }
        break;
      }
      case LayerKind::gelu:
        for (auto& img : batch)
          for (auto& ch : img) ch = ch.unaryExpr([](double x) { return gelu(x); });
        break;
      case LayerKind::batch_norm: {
        const auto& w = st.bn[bi];
        const int C = st.shapes[l].c;
        Eigen::VectorXd mean(C), var(C);
        if (training) {
          const double n =
              static_cast<double>(batch.size()) * st.shapes[l].h * st.shapes[l].w;
          for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (const auto& img : batch) acc += img[static_cast<std::size_t>(c)].sum();
            mean[c] = acc / n;
            double sq = 0.0;
            for (const auto& img : batch)
              sq += (img[static_cast<std::size_t>(c)].array() - mean[c]).square().sum();
            var[c] = sq / n;
          }
          if (running_update) {
            auto& rw = running_update->bn[bi];
            rw.run_mean = bn_momentum * rw.run_mean + (1.0 - bn_momentum) * mean;
            rw.run_var = bn_momentum * rw.run_var + (1.0 - bn_momentum) * var;
          }
        } else {
          mean = w.run_mean;
          var = w.run_var;
        }
        BnCache cache;
        cache.mean = mean;
        cache.var = var;
        if (trace) cache.xhat.reserve(batch.size());
        for (auto& img : batch) {
          Image xhat(img.size());
          for (int c = 0; c < C; ++c) {
            const double inv = 1.0 / std::sqrt(var[c] + bn_eps);
            xhat[static_cast<std::size_t>(c)] =
                (img[static_cast<std::size_t>(c)].array() - mean[c]).matrix() * inv;
            img[static_cast<std::size_t>(c)] =
                xhat[static_cast<std::size_t>(c)] * w.scale[c] +
                Eigen::MatrixXd::Constant(img[static_cast<std::size_t>(c)].rows(),
                                          img[static_cast<std::size_t>(c)].cols(), w.shift[c]);
          }
          if (trace) cache.xhat.push_back(std::move(xhat));
        }
        if (trace) trace->bn.push_back(std::move(cache));
        ++bi;
        break;
      }
    }
  }
  return batch;
}

struct StackGrads {
  std::vector<ConvWeights> conv;
  std::vector<BatchNormWeights> bn;  // run_* unused

  static StackGrads like(const Stack& st) {
    StackGrads g;
    for (const auto& c : st.conv) {
      ConvWeights z;
      z.k.assign(c.k.size(), std::vector<Eigen::MatrixXd>());
      for (std::size_t i = 0; i < c.k.size(); ++i)
        for (const auto& m : c.k[i])
          z.k[i].push_back(Eigen::MatrixXd::Zero(m.rows(), m.cols()));
      z.b = Eigen::VectorXd::Zero(c.b.size());
      g.conv.push_back(std::move(z));
    }
    for (const auto& b : st.bn) {
      BatchNormWeights z;
      z.scale = Eigen::VectorXd::Zero(b.scale.size());
      z.shift = Eigen::VectorXd::Zero(b.shift.size());
      g.bn.push_back(std::move(z));
    }
    return g;
  }
};

std::vector<Image> stack_backward(const Stack& st, const StackTrace& trace,
                                  std::vector<Image> dout, double bn_eps, StackGrads& grads) {
  std::size_t ci = st.conv.size(), bi = st.bn.size();
  for (std::size_t l = st.specs.size(); l-- > 0;) {
    const auto& spec = st.specs[l];
    const auto& inputs = trace.inputs[l];
    switch (spec.kind) {
      case LayerKind::conv: {
        --ci;
        for (std::size_t s = 0; s < dout.size(); ++s) {
          Image din = zero_image(st.shapes[l]);
          conv_backward(spec, st.conv[ci], inputs[s], dout[s], din, grads.conv[ci]);
          dout[s] = std::move(din);
        }
        break;
      }
      case LayerKind::tconv: {
        --ci;
        for (std::size_t s = 0; s < dout.size(); ++s) {
          Image din = zero_image(st.shapes[l]);
          tconv_backward(spec, st.conv[ci], inputs[s], dout[s], din, grads.conv[ci]);
          dout[s] = std::move(din);
        }
        break;
      }
      case LayerKind::gelu:
        for (std::size_t s = 0; s < dout.size(); ++s)
          for (std::size_t c = 0; c < dout[s].size(); ++c)
            dout[s][c] = dout[s][c].cwiseProduct(
                inputs[s][c].unaryExpr([](double x) { return gelu_grad(x); }));
        break;
      case LayerKind::batch_norm: {
        --bi;
        const auto& cache = trace.bn[bi];
        const auto& w = st.bn[bi];
        auto& gw = grads.bn[bi];
        const int C = st.shapes[l].c;
        const double n = static_cast<double>(dout.size()) * st.shapes[l].h * st.shapes[l].w;
        for (int c = 0; c < C; ++c) {
          const double inv = 1.0 / std::sqrt(cache.var[c] + bn_eps);
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t s = 0; s < dout.size(); ++s) {
            sum_dy += dout[s][static_cast<std::size_t>(c)].sum();
            sum_dy_xhat += dout[s][static_cast<std::size_t>(c)]
                               .cwiseProduct(cache.xhat[s][static_cast<std::size_t>(c)])
                               .sum();
          }
          gw.shift[c] += sum_dy;
          gw.scale[c] += sum_dy_xhat;
          const double k1 = w.scale[c] * inv;
          for (std::size_t s = 0; s < dout.size(); ++s) {
            auto& d = dout[s][static_cast<std::size_t>(c)];
            d = k1 * (d.array() - sum_dy / n -
                      cache.xhat[s][static_cast<std::size_t>(c)].array() * (sum_dy_xhat / n))
                    .matrix();
          }
        }
        break;
      }
    }
  }
  return dout;
}

Eigen::VectorXd pack_grads(const SaeModel& m, const StackGrads& enc, const StackGrads& dec) {
  Eigen::VectorXd g(m.num_params());
  std::int64_t at = 0;
  for (const StackGrads* st : {&enc, &dec}) {
    for (const auto& c : st->conv) {
      for (const auto& row : c.k)
        for (const auto& mat : row) {
          std::copy(mat.data(), mat.data() + mat.size(), g.data() + at);
          at += mat.size();
        }
      std::copy(c.b.data(), c.b.data() + c.b.size(), g.data() + at);
      at += c.b.size();
    }
    for (const auto& b : st->bn) {
      std::copy(b.scale.data(), b.scale.data() + b.scale.size(), g.data() + at);
      at += b.scale.size();
      std::copy(b.shift.data(), b.shift.data() + b.shift.size(), g.data() + at);
      at += b.shift.size();
    }
  }
  return g;
}

Eigen::VectorXd flatten_image(const Image& img) {
  Eigen::VectorXd z(static_cast<Eigen::Index>(img.size()) *
                    (img.empty() ? 0 : img.front().size()));
  Eigen::Index at = 0;
  for (const auto& ch : img) {
    // row-major within a channel: y, then x
    for (Eigen::Index y = 0; y < ch.rows(); ++y)
      for (Eigen::Index x = 0; x < ch.cols(); ++x) z[at++] = ch(y, x);
  }
  return z;
}

Image unflatten_image(const Eigen::VectorXd& z, const Shape3& shape) {
  if (z.size() != shape.size())
    throw std::invalid_argument("latent size " + std::to_string(z.size()) +
                                " does not match shape of size " + std::to_string(shape.size()));
  Image img(static_cast<std::size_t>(shape.c), Eigen::MatrixXd(shape.h, shape.w));
  Eigen::Index at = 0;
  for (auto& ch : img)
    for (Eigen::Index y = 0; y < ch.rows(); ++y)
      for (Eigen::Index x = 0; x < ch.cols(); ++x) ch(y, x) = z[at++];
  return img;
}

void check_input_shape(const SaeModel& m, const Image& x) {
  const bool ok = static_cast<int>(x.size()) == m.input.c && !x.empty() &&
                  x.front().rows() == m.input.h && x.front().cols() == m.input.w;
  if (!ok)
    throw std::invalid_argument("encode: patch shape does not match model input " +
                                std::to_string(m.input.c) + "x" + std::to_string(m.input.h) +
                                "x" + std::to_string(m.input.w));
}

}  // namespace

Eigen::VectorXd encode(const SaeModel& m, const Image& x) {
  check_input_shape(m, x);
  auto out =
      stack_forward(m.encoder, {x}, /*training=*/false, m.bn_eps, m.bn_momentum, nullptr);
  return flatten_image(out.front());
}

Eigen::VectorXd encode(const SaeModel& m, const Patch& x) { return encode(m, x.window); }

Image decode(const SaeModel& m, const Eigen::VectorXd& z) {
  auto out = stack_forward(m.decoder, {unflatten_image(z, m.encoder.shapes.back())},
                           /*training=*/false, m.bn_eps, m.bn_momentum, nullptr);
  return out.front();
}

double recon_error(const SaeModel& m, const Image& x) {
  const Image xhat = decode(m, encode(m, x));
  double acc = 0.0;
  for (std::size_t c = 0; c < x.size(); ++c) acc += (x[c] - xhat[c]).squaredNorm();
  return acc;
}

PairBatchLoss sae_loss(SaeModel& m, const std::vector<PatchPair>& batch, bool update_running) {
  if (batch.empty()) throw std::invalid_argument("sae_loss: empty batch");
  const std::size_t B = batch.size();
  std::vector<Image> inputs;
  inputs.reserve(2 * B);
  for (const auto& pair : batch) {
    check_input_shape(m, pair.a.window);
    check_input_shape(m, pair.b.window);
  }
  for (const auto& pair : batch) inputs.push_back(pair.a.window);
  for (const auto& pair : batch) inputs.push_back(pair.b.window);

  StackTrace enc_trace, dec_trace;
  Stack* enc_running = update_running ? &m.encoder : nullptr;
  Stack* dec_running = update_running ? &m.decoder : nullptr;
  auto bottleneck = stack_forward(m.encoder, inputs, /*training=*/true, m.bn_eps,
                                  m.bn_momentum, &enc_trace, enc_running);
  auto recons = stack_forward(m.decoder, bottleneck, /*training=*/true, m.bn_eps,
                              m.bn_momentum, &dec_trace, dec_running);

  PairBatchLoss result;
  const double inv_b = 1.0 / static_cast<double>(B);

  // reconstruction term and its gradient at the decoder output
  std::vector<Image> drecon(2 * B);
  for (std::size_t j = 0; j < 2 * B; ++j) {
    drecon[j] = Image(inputs[j].size());
    for (std::size_t c = 0; c < inputs[j].size(); ++c) {
      const Eigen::MatrixXd diff = recons[j][c] - inputs[j][c];
      result.recon += inv_b * diff.squaredNorm();
      drecon[j][c] = 2.0 * inv_b * diff;
    }
  }

  // cosine term on the flattened bottleneck
  std::vector<Eigen::VectorXd> z(2 * B);
  for (std::size_t j = 0; j < 2 * B; ++j) z[j] = flatten_image(bottleneck[j]);
  std::vector<Eigen::VectorXd> dz(2 * B, Eigen::VectorXd::Zero(z[0].size()));
  for (std::size_t i = 0; i < B; ++i) {
    const auto& za = z[i];
    const auto& zb = z[B + i];
    const double na = std::sqrt(za.squaredNorm() + m.cos_eps);
    const double nb = std::sqrt(zb.squaredNorm() + m.cos_eps);
    const double cosv = za.dot(zb) / (na * nb);
    result.cosine += inv_b * cosv;
    // loss contains -alpha * cos
    dz[i] -= m.alpha * inv_b * (zb / (na * nb) - cosv * za / (na * na));
    dz[B + i] -= m.alpha * inv_b * (za / (na * nb) - cosv * zb / (nb * nb));
  }
  result.loss = result.recon - m.alpha * result.cosine;

  StackGrads dec_grads = StackGrads::like(m.decoder);
  StackGrads enc_grads = StackGrads::like(m.encoder);
  auto dbottleneck = stack_backward(m.decoder, dec_trace, std::move(drecon), m.bn_eps, dec_grads);
  const Shape3 bshape = m.encoder.shapes.back();
  for (std::size_t j = 0; j < 2 * B; ++j) {
    const Image dcos = unflatten_image(dz[j], bshape);
    for (std::size_t c = 0; c < dbottleneck[j].size(); ++c) dbottleneck[j][c] += dcos[c];
  }
  stack_backward(m.encoder, enc_trace, std::move(dbottleneck), m.bn_eps, enc_grads);

  result.grad = pack_grads(m, enc_grads, dec_grads);
  return result;
}

PairBatchLoss sae_loss(SaeModel& m, const PatchPair& pair, bool update_running) {
  return sae_loss(m, std::vector<PatchPair>{pair}, update_running);
}

AdamState AdamState::for_size(std::int64_t n, double lr, double beta1, double beta2,
                              double eps) {
  AdamState s;
  s.m = Eigen::VectorXd::Zero(n);
  s.v = Eigen::VectorXd::Zero(n);
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  return s;
}

void adam_step(AdamState& state, Eigen::VectorXd& weights, const Eigen::VectorXd& grads) {
  if (weights.size() != state.m.size() || grads.size() != state.m.size())
    throw std::invalid_argument("adam_step: size mismatch");
  for (Eigen::Index i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i]))
      throw std::runtime_error("adam_step: non-finite gradient at parameter " +
                               std::to_string(i));
  ++state.t;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
  state.v = state.beta2 * state.v.array().matrix() +
            (1.0 - state.beta2) * grads.array().square().matrix();
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  weights.array() -= state.lr * (state.m.array() / bc1) /
                     ((state.v.array() / bc2).sqrt() + state.eps);
}

std::vector<EpochStats> train_sae(SaeModel& m, const std::vector<PatchPair>& train_pairs,
                                  const std::vector<PatchPair>& val_pairs,
                                  const SaeTrainConfig& cfg) {
  if (train_pairs.empty() || val_pairs.empty())
    throw std::invalid_argument("train_sae: train and validation pair sets must be nonempty");
  if (cfg.epochs < 1 || cfg.batch_pairs < 1)
    throw std::invalid_argument("train_sae: epochs and batch size must be >= 1");

  init_weights(m, cfg.seed);
  Eigen::VectorXd theta = m.pack();
  AdamState adam = AdamState::for_size(theta.size(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

  const auto eval_loss = [&](const std::vector<PatchPair>& pairs) {
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t at = 0; at < pairs.size(); at += static_cast<std::size_t>(cfg.batch_pairs)) {
      const std::size_t hi = std::min(pairs.size(), at + static_cast<std::size_t>(cfg.batch_pairs));
      std::vector<PatchPair> batch(pairs.begin() + static_cast<std::ptrdiff_t>(at),
                                   pairs.begin() + static_cast<std::ptrdiff_t>(hi));
      acc += sae_loss(m, batch, /*update_running=*/false).loss * static_cast<double>(hi - at);
      count += hi - at;
    }
    return acc / static_cast<double>(count);
  };

  std::vector<EpochStats> trace;
  double best_val = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_theta = theta;
  Stack best_enc = m.encoder, best_dec = m.decoder;

  std::vector<std::size_t> order(train_pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(substream_seed(cfg.seed, "sae-epoch", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_pairs)) {
      const std::size_t hi = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_pairs));
      std::vector<PatchPair> batch;
      batch.reserve(hi - at);
      for (std::size_t i = at; i < hi; ++i) batch.push_back(train_pairs[order[i]]);

      const auto res = sae_loss(m, batch, /*update_running=*/true);
      if (!std::isfinite(res.loss))
        throw std::runtime_error("train_sae: training diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch));
      for (Eigen::Index i = 0; i < res.grad.size(); ++i)
        if (!std::isfinite(res.grad[i]))
          throw std::runtime_error("train_sae: non-finite gradient in " + m.param_layer(i) +
                                   " at epoch " + std::to_string(epoch));
      adam_step(adam, theta, res.grad);
      m.unpack(theta);
      epoch_loss += res.loss * static_cast<double>(hi - at);
      seen += hi - at;
    }

    EpochStats st;
    st.epoch = epoch;
    st.train_loss = epoch_loss / static_cast<double>(seen);
    st.val_loss = eval_loss(val_pairs);
    if (!std::isfinite(st.val_loss))
      throw std::runtime_error("train_sae: non-finite validation loss at epoch " +
                               std::to_string(epoch));
    trace.push_back(st);

    if (st.val_loss < best_val) {
      best_val = st.val_loss;
      best_theta = theta;
      best_enc = m.encoder;
      best_dec = m.decoder;
    }
  }

  m.encoder = std::move(best_enc);
  m.decoder = std::move(best_dec);
  m.unpack(best_theta);
  return trace;
}

std::string loss_trace_csv(const std::vector<EpochStats>& trace) {
  std::ostringstream out;
  out.precision(12);
  out << "epoch,train_loss,val_loss\n";
  for (const auto& e : trace) out << e.epoch << "," << e.train_loss << "," << e.val_loss << "\n";
  return out.str();
}

namespace {
constexpr char kModelMagic[4] = {'U', 'A', 'D', 'M'};
constexpr std::uint32_t kModelVersion = 1;
constexpr std::uint32_t kKindSae = 1;

void write_specs(ByteWriter& w, const std::vector<LayerSpec>& specs) {
  w.u32(static_cast<std::uint32_t>(specs.size()));
  for (const auto& s : specs) {
    w.u32(static_cast<std::uint32_t>(s.kind));
    w.i32(s.kh);
    w.i32(s.kw);
    w.i32(s.sh);
    w.i32(s.sw);
    w.i32(s.filters);
  }
}

std::vector<LayerSpec> read_specs(ByteReader& r) {
  std::vector<LayerSpec> specs(r.u32());
  for (auto& s : specs) {
    s.kind = static_cast<LayerKind>(r.u32());
    s.kh = r.i32();
    s.kw = r.i32();
    s.sh = r.i32();
    s.sw = r.i32();
    s.filters = r.i32();
  }
  return specs;
}

void write_stack_weights(ByteWriter& w, const Stack& st) {
  for (const auto& c : st.conv) {
    for (const auto& row : c.k)
      for (const auto& m : row)
        for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(static_cast<float>(m.data()[i]));
    for (Eigen::Index i = 0; i < c.b.size(); ++i) w.f32(static_cast<float>(c.b[i]));
  }
  for (const auto& b : st.bn) {
    for (const auto* v : {&b.scale, &b.shift, &b.run_mean, &b.run_var})
      for (Eigen::Index i = 0; i < v->size(); ++i) w.f32(static_cast<float>((*v)[i]));
  }
}

void read_stack_weights(ByteReader& r, Stack& st) {
  for (auto& c : st.conv) {
    for (auto& row : c.k)
      for (auto& m : row)
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f32();
    for (Eigen::Index i = 0; i < c.b.size(); ++i) c.b[i] = r.f32();
  }
  for (auto& b : st.bn) {
    for (auto* v : {&b.scale, &b.shift, &b.run_mean, &b.run_var})
      for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = r.f32();
  }
}
}  // namespace

void save_sae(const SaeModel& m, const std::filesystem::path& path) {
  ByteWriter w;
  w.magic(kModelMagic);
  w.u32(kModelVersion);
  w.u32(kKindSae);
  w.i32(m.input.c);
  w.i32(m.input.h);
  w.i32(m.input.w);
  w.f64(m.alpha);
  w.f64(m.bn_momentum);
  w.f64(m.bn_eps);
  w.f64(m.cos_eps);
  write_specs(w, m.encoder.specs);
  write_specs(w, m.decoder.specs);
  write_stack_weights(w, m.encoder);
  write_stack_weights(w, m.decoder);
  write_file_bytes(path, w.bytes());
}

SaeModel load_sae(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  if (r.magic4() != std::string(kModelMagic, 4))
    throw std::runtime_error(path.string() + ": bad magic (expected UADM)");
  if (r.u32() != kModelVersion) throw std::runtime_error(path.string() + ": unsupported version");
  if (r.u32() != kKindSae)
    throw std::runtime_error(path.string() + ": not an auto-encoder checkpoint");
  Shape3 input{r.i32(), r.i32(), r.i32()};
  const double alpha = r.f64();
  const double bn_momentum = r.f64();
  const double bn_eps = r.f64();
  const double cos_eps = r.f64();
  auto enc = read_specs(r);
  auto dec = read_specs(r);
  SaeModel m = make_sae(input, std::move(enc), std::move(dec), alpha);
  m.bn_momentum = bn_momentum;
  m.bn_eps = bn_eps;
  m.cos_eps = cos_eps;
  read_stack_weights(r, m.encoder);
  read_stack_weights(r, m.decoder);
  return m;
}

}  // namespace uad
