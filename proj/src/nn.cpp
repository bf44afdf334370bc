#include "bevkd/nn.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "bevkd/util.hpp"

namespace bevkd::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::int64_t in, std::int64_t out)
    : w({out, in}), b({out}), gw({out, in}), gb({out}), in_(in), out_(out) {}

void Linear::init(Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(in_));
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, std);
  b.zero();
}

Tensor Linear::forward(const Tensor& x, bool cache) {
  const std::int64_t rows = x.numel() / in_;
  Tensor y({rows, out_});
  CMapRM xm(x.data(), rows, in_);
  CMapRM wm(w.data(), out_, in_);
  MapRM ym(y.data(), rows, out_);
  ym.noalias() = xm * wm.transpose();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t o = 0; o < out_; ++o) y.at(r, o) += b[o];
  if (cache) x_ = x;
  return y;
}

Tensor Linear::backward(const Tensor& dy, bool param_grads) {
  const std::int64_t rows = dy.numel() / out_;
  CMapRM dym(dy.data(), rows, out_);
  if (param_grads) {
    CMapRM xm(x_.data(), rows, in_);
    MapRM gwm(gw.data(), out_, in_);
    gwm.noalias() += dym.transpose() * xm;
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t o = 0; o < out_; ++o) gb[o] += dy.at(r, o);
  }
  Tensor dx({rows, in_});
  MapRM dxm(dx.data(), rows, in_);
  CMapRM wm(w.data(), out_, in_);
  dxm.noalias() = dym * wm;
  return dx;
}

void Linear::params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".w", &w, &gw, true});
  out.push_back({prefix + ".b", &b, &gb, false});
}

void Linear::state(const std::string& prefix, StateDict& out) {
  out.push_back({prefix + ".w", &w});
  out.push_back({prefix + ".b", &b});
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::int64_t in_ch, std::int64_t out_ch, int kernel)
    : w({out_ch, in_ch * kernel * kernel}),
      b({out_ch}),
      gw({out_ch, in_ch * kernel * kernel}),
      gb({out_ch}),
      in_ch_(in_ch),
      out_ch_(out_ch),
      k_(kernel) {}

void Conv2d::init(Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(in_ch_ * k_ * k_));
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, std);
  b.zero();
}

void Conv2d::im2col(const double* img, std::int64_t h, std::int64_t width, double* cols) const {
  // cols: [in*k*k, h*width]; row (c*k+ky)*k+kx holds the input shifted by
  // (ky-pad, kx-pad), zero outside.
  const int pad = k_ / 2;
  const std::int64_t hw = h * width;
  for (std::int64_t c = 0; c < in_ch_; ++c) {
    const double* src = img + c * hw;
    for (int ky = 0; ky < k_; ++ky) {
      for (int kx = 0; kx < k_; ++kx) {
        double* dst = cols + ((c * k_ + ky) * k_ + kx) * hw;
        const std::int64_t dy = ky - pad, dx = kx - pad;
        for (std::int64_t i = 0; i < h; ++i) {
          const std::int64_t si = i + dy;
          double* drow = dst + i * width;
          if (si < 0 || si >= h) {
            std::memset(drow, 0, sizeof(double) * static_cast<std::size_t>(width));
            continue;
          }
          const double* srow = src + si * width;
          for (std::int64_t j = 0; j < width; ++j) {
            const std::int64_t sj = j + dx;
            drow[j] = (sj < 0 || sj >= width) ? 0.0 : srow[sj];
          }
        }
      }
    }
  }
}

void Conv2d::col2im(const double* cols, std::int64_t h, std::int64_t width, double* img) const {
  const int pad = k_ / 2;
  const std::int64_t hw = h * width;
  for (std::int64_t c = 0; c < in_ch_; ++c) {
    double* dst = img + c * hw;
    for (int ky = 0; ky < k_; ++ky) {
      for (int kx = 0; kx < k_; ++kx) {
        const double* src = cols + ((c * k_ + ky) * k_ + kx) * hw;
        const std::int64_t dy = ky - pad, dx = kx - pad;
        for (std::int64_t i = 0; i < h; ++i) {
          const std::int64_t si = i + dy;
          if (si < 0 || si >= h) continue;
          const double* srow = src + i * width;
          double* drow = dst + si * width;
          for (std::int64_t j = 0; j < width; ++j) {
            const std::int64_t sj = j + dx;
            if (sj >= 0 && sj < width) drow[sj] += srow[j];
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x, bool cache) {
  const std::int64_t n = x.size(0), h = x.size(2), width = x.size(3);
  if (x.size(1) != in_ch_) {
    std::ostringstream ss;
    ss << "conv expects " << in_ch_ << " input channels, got " << x.size(1);
    throw Error(ErrorKind::kRuntime, ss.str());
  }
  const std::int64_t hw = h * width;
  const std::int64_t kk = in_ch_ * k_ * k_;
  Tensor y({n, out_ch_, h, width});
  col_buf_.resize(static_cast<std::size_t>(kk * hw));
  CMapRM wm(w.data(), out_ch_, kk);
  for (std::int64_t i = 0; i < n; ++i) {
    im2col(x.data() + i * in_ch_ * hw, h, width, col_buf_.data());
    CMapRM cm(col_buf_.data(), kk, hw);
    MapRM ym(y.data() + i * out_ch_ * hw, out_ch_, hw);
    ym.noalias() = wm * cm;
    for (std::int64_t o = 0; o < out_ch_; ++o) ym.row(o).array() += b[o];
  }
  if (cache) x_ = x;
  return y;
}

Tensor Conv2d::backward(const Tensor& dy, bool param_grads, bool need_dx) {
  const std::int64_t n = dy.size(0), h = dy.size(2), width = dy.size(3);
  const std::int64_t hw = h * width;
  const std::int64_t kk = in_ch_ * k_ * k_;
  Tensor dx;
  if (need_dx) dx = Tensor({n, in_ch_, h, width});
  col_buf_.resize(static_cast<std::size_t>(kk * hw));
  AlignedBuffer dcol(static_cast<std::size_t>(kk * hw));
  CMapRM wm(w.data(), out_ch_, kk);
  MapRM gwm(gw.data(), out_ch_, kk);
  for (std::int64_t i = 0; i < n; ++i) {
    CMapRM dym(dy.data() + i * out_ch_ * hw, out_ch_, hw);
    if (param_grads) {
      im2col(x_.data() + i * in_ch_ * hw, h, width, col_buf_.data());
      CMapRM cm(col_buf_.data(), kk, hw);
      gwm.noalias() += dym * cm.transpose();
      for (std::int64_t o = 0; o < out_ch_; ++o) {
        // Fixed-order scalar reduction; Eigen's vectorized sum is
        // alignment-dependent and would break run-to-run bit equality.
        const double* row = dy.data() + (i * out_ch_ + o) * hw;
        double acc = 0.0;
        for (std::int64_t kcol = 0; kcol < hw; ++kcol) acc += row[kcol];
        gb[o] += acc;
      }
    }
    if (need_dx) {
      MapRM dcm(dcol.data(), kk, hw);
      dcm.noalias() = wm.transpose() * dym;
      col2im(dcol.data(), h, width, dx.data() + i * in_ch_ * hw);
    }
  }
  return dx;
}

void Conv2d::params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".w", &w, &gw, true});
  out.push_back({prefix + ".b", &b, &gb, false});
}

void Conv2d::state(const std::string& prefix, StateDict& out) {
  out.push_back({prefix + ".w", &w});
  out.push_back({prefix + ".b", &b});
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(std::int64_t channels)
    : gamma(Tensor::full({channels}, 1.0)),
      beta({channels}),
      ggamma({channels}),
      gbeta({channels}),
      running_mean({channels}),
      running_var(Tensor::full({channels}, 1.0)),
      c_(channels) {}

Tensor BatchNorm2d::forward(const Tensor& x, bool train, bool cache) {
  const std::int64_t n = x.size(0), h = x.size(2), w = x.size(3);
  const std::int64_t hw = h * w;
  const double count = static_cast<double>(n * hw);
  Tensor y(x.shape());
  if (cache) {
    xhat_ = Tensor(x.shape());
    inv_std_.assign(static_cast<std::size_t>(c_), 0.0);
  }
  trained_forward_ = train;
  for (std::int64_t c = 0; c < c_; ++c) {
    double mean, var;
    if (train) {
      double s = 0.0, s2 = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const double* p = x.data() + (i * c_ + c) * hw;
        for (std::int64_t j = 0; j < hw; ++j) {
          s += p[j];
          s2 += p[j] * p[j];
        }
      }
      mean = s / count;
      var = std::max(0.0, s2 / count - mean * mean);
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean;
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var;
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const double inv = 1.0 / std::sqrt(var + eps);
    if (cache) inv_std_[static_cast<std::size_t>(c)] = inv;
    const double g = gamma[c], bb = beta[c];
    for (std::int64_t i = 0; i < n; ++i) {
      const double* p = x.data() + (i * c_ + c) * hw;
      double* q = y.data() + (i * c_ + c) * hw;
      double* xh = cache ? xhat_.data() + (i * c_ + c) * hw : nullptr;
      for (std::int64_t j = 0; j < hw; ++j) {
        const double v = (p[j] - mean) * inv;
        if (xh) xh[j] = v;
        q[j] = g * v + bb;
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy, bool param_grads) {
  const std::int64_t n = dy.size(0), h = dy.size(2), w = dy.size(3);
  const std::int64_t hw = h * w;
  const double count = static_cast<double>(n * hw);
  Tensor dx(dy.shape());
  for (std::int64_t c = 0; c < c_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double* d = dy.data() + (i * c_ + c) * hw;
      const double* xh = xhat_.data() + (i * c_ + c) * hw;
      for (std::int64_t j = 0; j < hw; ++j) {
        sum_dy += d[j];
        sum_dy_xhat += d[j] * xh[j];
      }
    }
    if (param_grads) {
      ggamma[c] += sum_dy_xhat;
      gbeta[c] += sum_dy;
    }
    const double g = gamma[c];
    const double inv = inv_std_[static_cast<std::size_t>(c)];
    for (std::int64_t i = 0; i < n; ++i) {
      const double* d = dy.data() + (i * c_ + c) * hw;
      const double* xh = xhat_.data() + (i * c_ + c) * hw;
      double* out = dx.data() + (i * c_ + c) * hw;
      if (trained_forward_) {
        for (std::int64_t j = 0; j < hw; ++j)
          out[j] = g * inv * (d[j] - sum_dy / count - xh[j] * sum_dy_xhat / count);
      } else {
        for (std::int64_t j = 0; j < hw; ++j) out[j] = g * inv * d[j];
      }
    }
  }
  return dx;
}

void BatchNorm2d::params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".gamma", &gamma, &ggamma, false});
  out.push_back({prefix + ".beta", &beta, &gbeta, false});
}

void BatchNorm2d::state(const std::string& prefix, StateDict& out) {
  out.push_back({prefix + ".gamma", &gamma});
  out.push_back({prefix + ".beta", &beta});
  out.push_back({prefix + ".running_mean", &running_mean});
  out.push_back({prefix + ".running_var", &running_var});
}

// ---------------------------------------------------------------------------
// ReLU / softmax / sigmoid

Tensor ReLU::forward(const Tensor& x, bool cache) {
  Tensor y(x.shape());
  if (cache) mask_ = Tensor(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const bool pos = x[i] > 0.0;
    y[i] = pos ? x[i] : 0.0;
    if (cache) mask_[i] = pos ? 1.0 : 0.0;
  }
  return y;
}

Tensor ReLU::backward(const Tensor& dy) {
  Tensor dx(dy.shape());
  const std::int64_t n = dy.numel();
  for (std::int64_t i = 0; i < n; ++i) dx[i] = dy[i] * mask_[i];
  return dx;
}

Tensor softmax_rows(const Tensor& logits) {
  const std::int64_t rows = logits.size(0), d = logits.size(1);
  Tensor y(logits.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    double mx = logits.at(r, 0);
    for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, logits.at(r, j));
    double z = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double e = std::exp(logits.at(r, j) - mx);
      y.at(r, j) = e;
      z += e;
    }
    for (std::int64_t j = 0; j < d; ++j) y.at(r, j) /= z;
  }
  return y;
}

Tensor softmax_backward_rows(const Tensor& probs, const Tensor& dprobs) {
  const std::int64_t rows = probs.size(0), d = probs.size(1);
  Tensor dx(probs.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (std::int64_t j = 0; j < d; ++j) dot += dprobs.at(r, j) * probs.at(r, j);
    for (std::int64_t j = 0; j < d; ++j) dx.at(r, j) = probs.at(r, j) * (dprobs.at(r, j) - dot);
  }
  return dx;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void sigmoid_inplace(Tensor& t) {
  const std::int64_t n = t.numel();
  for (std::int64_t i = 0; i < n; ++i) t[i] = sigmoid(t[i]);
}

// ---------------------------------------------------------------------------
// AdamW

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(const std::vector<ParamRef>& params) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value->shape());
      v_.emplace_back(p.value->shape());
    }
  }
  if (m_.size() != params.size())
    throw Error(ErrorKind::kRuntime, "AdamW: parameter list changed between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const ParamRef& p = params[pi];
    Tensor& m = m_[pi];
    Tensor& v = v_[pi];
    const std::int64_t n = p.value->numel();
    for (std::int64_t i = 0; i < n; ++i) {
      const double g = (*p.grad)[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double upd = mhat / (std::sqrt(vhat) + eps_);
      if (p.decay) upd += wd_ * (*p.value)[i];
      (*p.value)[i] -= lr_ * upd;
    }
  }
}

void zero_grads(const std::vector<ParamRef>& params) {
  for (const auto& p : params) p.grad->zero();
}

std::uint64_t params_hash(const StateDict& state) {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& [name, t] : state) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(t->data(), static_cast<std::size_t>(t->numel()) * sizeof(double), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kMagic[4] = {'B', 'K', 'C', 'K'};

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_i64(std::string& out, std::int64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }
void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::string& kind,
                     const std::string& config_json, const StateDict& state) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_str(out, kind);
  put_str(out, config_json);
  put_u32(out, static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, t] : state) {
    put_str(out, name);
    put_u32(out, static_cast<std::uint32_t>(t->ndim()));
    for (std::int64_t d : t->shape()) put_i64(out, d);
    out.append(reinterpret_cast<const char*>(t->data()),
               static_cast<std::size_t>(t->numel()) * sizeof(double));
  }
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  atomic_write_file(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw Error(ErrorKind::kMissingArtifact, "checkpoint not found: " + path.string());
  const std::string buf = read_file(path);
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > buf.size())
      throw Error(ErrorKind::kRuntime, path.string() + ": truncated checkpoint");
  };
  auto get_u32 = [&]() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  };
  auto get_i64 = [&]() {
    need(8);
    std::int64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  };
  auto get_str = [&]() {
    const std::uint32_t n = get_u32();
    need(n);
    std::string s(buf.data() + pos, n);
    pos += n;
    return s;
  };

  need(4);
  if (std::memcmp(buf.data(), kMagic, 4) != 0)
    throw Error(ErrorKind::kRuntime, path.string() + ": not a checkpoint file");
  pos = 4;
  const std::uint32_t version = get_u32();
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::kRuntime, path.string() + ": checkpoint version mismatch");
  Checkpoint ck;
  ck.kind = get_str();
  ck.config_json = get_str();
  const std::uint32_t count = get_u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = get_str();
    const std::uint32_t ndim = get_u32();
    std::vector<std::int64_t> shape(ndim);
    for (auto& d : shape) d = get_i64();
    Tensor t(shape);
    need(static_cast<std::size_t>(t.numel()) * sizeof(double));
    std::memcpy(t.data(), buf.data() + pos, static_cast<std::size_t>(t.numel()) * sizeof(double));
    pos += static_cast<std::size_t>(t.numel()) * sizeof(double);
    ck.tensors.emplace(name, std::move(t));
  }
  return ck;
}

void Checkpoint::load_into(const StateDict& state) const {
  for (const auto& [name, dst] : state) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw Error(ErrorKind::kRuntime, "checkpoint missing tensor " + name);
    if (it->second.shape() != dst->shape())
      throw Error(ErrorKind::kRuntime, "checkpoint tensor " + name + " shape mismatch: file " +
                                           it->second.shape_str() + " vs model " + dst->shape_str());
    *dst = it->second;
  }
}

}  // namespace bevkd::nn
