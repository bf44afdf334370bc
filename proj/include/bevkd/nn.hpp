#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bevkd/rng.hpp"
#include "bevkd/tensor.hpp"

namespace bevkd::nn {

struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
  bool decay = true;  // weight decay applies (off for biases and norm params)
};

using StateDict = std::vector<std::pair<std::string, Tensor*>>;

// y = x W^T + b for row-stacked inputs [R, in] -> [R, out].
class Linear {
 public:
  Linear() = default;
  Linear(std::int64_t in, std::int64_t out);
  void init(Rng& rng);

  Tensor forward(const Tensor& x, bool cache = true);
  Tensor backward(const Tensor& dy, bool param_grads = true);

  void params(const std::string& prefix, std::vector<ParamRef>& out);
  void state(const std::string& prefix, StateDict& out);

  Tensor w, b, gw, gb;  // w: [out, in]

 private:
  std::int64_t in_ = 0, out_ = 0;
  Tensor x_;
};

// 2D convolution, stride 1, same padding, square kernel. im2col + GEMM.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::int64_t in_ch, std::int64_t out_ch, int kernel);
  void init(Rng& rng);

  Tensor forward(const Tensor& x, bool cache = true);  // [N,Cin,H,W] -> [N,Cout,H,W]
  Tensor backward(const Tensor& dy, bool param_grads = true, bool need_dx = true);

  void params(const std::string& prefix, std::vector<ParamRef>& out);
  void state(const std::string& prefix, StateDict& out);

  Tensor w, b, gw, gb;  // w: [out, in*k*k]
  std::int64_t in_ch() const { return in_ch_; }
  std::int64_t out_ch() const { return out_ch_; }

 private:
  void im2col(const double* img, std::int64_t h, std::int64_t width, double* cols) const;
  void col2im(const double* cols, std::int64_t h, std::int64_t width, double* img) const;

  std::int64_t in_ch_ = 0, out_ch_ = 0;
  int k_ = 3;
  Tensor x_;
  mutable AlignedBuffer col_buf_;
};

// Per-channel batch statistics over (N, H, W) in training, running stats in
// eval. Biased variance; running stats updated with momentum 0.1.
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::int64_t channels);

  Tensor forward(const Tensor& x, bool train, bool cache = true);
  Tensor backward(const Tensor& dy, bool param_grads = true);

  void params(const std::string& prefix, std::vector<ParamRef>& out);
  void state(const std::string& prefix, StateDict& out);

  Tensor gamma, beta, ggamma, gbeta;
  Tensor running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

 private:
  std::int64_t c_ = 0;
  Tensor xhat_;
  std::vector<double> inv_std_;
  bool trained_forward_ = false;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x, bool cache = true);
  Tensor backward(const Tensor& dy);

 private:
  Tensor mask_;
};

// Row-wise stable softmax for [R, D] logits.
Tensor softmax_rows(const Tensor& logits);
// dx given softmax output y and dy: y .* (dy - rowdot(dy, y)).
Tensor softmax_backward_rows(const Tensor& probs, const Tensor& dprobs);

double sigmoid(double x);
void sigmoid_inplace(Tensor& t);

// Decoupled weight decay optimizer. State is positional: call with the same
// parameter list every step.
class AdamW {
 public:
  explicit AdamW(double lr, double weight_decay = 0.01, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8);
  void step(const std::vector<ParamRef>& params);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_, wd_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

void zero_grads(const std::vector<ParamRef>& params);
// FNV-1a over parameter bytes in declaration order; used for frozen audits.
std::uint64_t params_hash(const StateDict& state);

// Versioned checkpoint: named double tensors plus a module kind tag and a
// JSON config snapshot for provenance.
void save_checkpoint(const std::filesystem::path& path, const std::string& kind,
                     const std::string& config_json, const StateDict& state);

struct Checkpoint {
  std::string kind;
  std::string config_json;
  std::map<std::string, Tensor> tensors;
  void load_into(const StateDict& state) const;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace bevkd::nn
