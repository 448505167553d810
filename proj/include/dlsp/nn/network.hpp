#pragma once

// Forward and reverse-mode passes for the conv/FC stack. Convolutions are
// lowered to GEMM via im2col over the whole mini-batch; activations are
// stored HWC per sample so a conv output block (batch*positions x filters,
// row-major) doubles as the next layer's input without copying.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "dlsp/nn/model.hpp"

namespace dlsp::nn {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using ConstRowVecMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

/// Scratch buffers for up to `capacity` samples. Not shared across threads.
template <class T>
class Workspace {
 public:
  Workspace(const ArchSpec& arch, int capacity) : shapes(arch.conv_shapes()), arch_(arch), capacity_(capacity) {
    const auto cap = static_cast<std::size_t>(capacity);
    sizes.push_back(shapes[0].size());
    for (std::size_t i = 0; i < arch.convs.size(); ++i) {
      sizes.push_back(shapes[i + 1].size());
      const auto& cv = arch.convs[i];
      cols.emplace_back(cap * shapes[i + 1].h * shapes[i + 1].w * cv.kernel * cv.kernel * shapes[i].c);
    }
    for (int hdim : arch.hidden) sizes.push_back(static_cast<std::size_t>(hdim));
    sizes.push_back(static_cast<std::size_t>(arch.classes));
    for (auto s : sizes) {
      acts.emplace_back(cap * s);
      deltas.emplace_back(cap * s);
    }
  }

  [[nodiscard]] int capacity() const { return capacity_; }
  [[nodiscard]] const ArchSpec& arch() const { return arch_; }
  [[nodiscard]] std::span<T> input() { return acts.front(); }
  [[nodiscard]] std::span<const T> logits() const { return acts.back(); }
  [[nodiscard]] std::span<T> logit_grad() { return deltas.back(); }
  [[nodiscard]] std::span<const T> input_grad() const { return deltas.front(); }

  std::vector<Shape3> shapes;
  std::vector<std::size_t> sizes;      // per-sample size of acts[l]
  std::vector<std::vector<T>> acts;    // [0] input, [l+1] output of layer l (post-ReLU / logits)
  std::vector<std::vector<T>> deltas;  // dLoss/d acts[l]
  std::vector<std::vector<T>> cols;    // im2col buffers per conv layer

 private:
  ArchSpec arch_;
  int capacity_;
};

namespace detail {

template <class T>
void im2col(const T* in, const Shape3& s, const ConvSpec& cv, const Shape3& o, T* cols) {
  const int k = cv.kernel, c = s.c;
  for (int oy = 0; oy < o.h; ++oy) {
    for (int ox = 0; ox < o.w; ++ox) {
      for (int ky = 0; ky < k; ++ky) {
        const T* src = in + (static_cast<std::size_t>(oy * cv.stride + ky) * s.w + ox * cv.stride) * c;
        std::copy(src, src + static_cast<std::size_t>(k) * c, cols);
        cols += static_cast<std::size_t>(k) * c;
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, const Shape3& s, const ConvSpec& cv, const Shape3& o, T* in) {
  const int k = cv.kernel, c = s.c;
  for (int oy = 0; oy < o.h; ++oy) {
    for (int ox = 0; ox < o.w; ++ox) {
      for (int ky = 0; ky < k; ++ky) {
        T* dst = in + (static_cast<std::size_t>(oy * cv.stride + ky) * s.w + ox * cv.stride) * c;
        for (int j = 0; j < k * c; ++j) dst[j] += cols[j];
        cols += static_cast<std::size_t>(k) * c;
      }
    }
  }
}

template <class T>
void relu_inplace(std::span<T> v) {
  for (auto& x : v) x = x > T{0} ? x : T{0};
}

/// delta *= (activation > 0)
template <class T>
void relu_backward(std::span<T> delta, std::span<const T> act) {
  for (std::size_t i = 0; i < delta.size(); ++i)
    if (!(act[i] > T{0})) delta[i] = T{0};
}

}  // namespace detail

/// Runs the first `batch` rows of ws.input() through the network.
template <class T>
void forward(const Model<T>& model, Workspace<T>& ws, int batch) {
  if (batch < 1 || batch > ws.capacity() || !(model.arch == ws.arch())) {
    throw NnError(NnError::Code::ShapeMismatch, "workspace does not match model or batch size");
  }
  const auto& arch = model.arch;
  const auto b = static_cast<std::size_t>(batch);
  const std::size_t n_conv = arch.convs.size();
  for (std::size_t i = 0; i < n_conv; ++i) {
    const auto& cv = arch.convs[i];
    const auto& s = ws.shapes[i];
    const auto& o = ws.shapes[i + 1];
    const std::size_t positions = static_cast<std::size_t>(o.h) * o.w;
    const std::size_t k = static_cast<std::size_t>(cv.kernel) * cv.kernel * s.c;
    T* cols = ws.cols[i].data();
    for (std::size_t n = 0; n < b; ++n) {
      detail::im2col(ws.acts[i].data() + n * s.size(), s, cv, o, cols + n * positions * k);
    }
    ConstMatMap<T> col_m(cols, static_cast<Eigen::Index>(b * positions), static_cast<Eigen::Index>(k));
    ConstMatMap<T> w(model.weight(i).data(), cv.filters, static_cast<Eigen::Index>(k));
    MatMap<T> out(ws.acts[i + 1].data(), static_cast<Eigen::Index>(b * positions), cv.filters);
    out.noalias() = col_m * w.transpose();
    out.rowwise() += ConstRowVecMap<T>(model.bias(i).data(), cv.filters);
    detail::relu_inplace(std::span<T>(ws.acts[i + 1].data(), b * o.size()));
  }
  const std::size_t n_fc = arch.hidden.size() + 1;
  for (std::size_t j = 0; j < n_fc; ++j) {
    const std::size_t layer = n_conv + j;
    const auto in = static_cast<Eigen::Index>(ws.sizes[layer]);
    const auto out_dim = static_cast<Eigen::Index>(ws.sizes[layer + 1]);
    ConstMatMap<T> x(ws.acts[layer].data(), static_cast<Eigen::Index>(b), in);
    ConstMatMap<T> w(model.weight(layer).data(), out_dim, in);
    MatMap<T> y(ws.acts[layer + 1].data(), static_cast<Eigen::Index>(b), out_dim);
    y.noalias() = x * w.transpose();
    y.rowwise() += ConstRowVecMap<T>(model.bias(layer).data(), out_dim);
    if (j + 1 < n_fc) detail::relu_inplace(std::span<T>(ws.acts[layer + 1].data(), b * ws.sizes[layer + 1]));
  }
}

/// Reverse pass from ws.logit_grad(); adds parameter gradients into `grads`
/// (flat, same layout as model.params). Fills ws.input_grad() when asked.
template <class T>
void backward(const Model<T>& model, Workspace<T>& ws, int batch, std::span<T> grads, bool want_input_grad = false) {
  const auto& arch = model.arch;
  const auto b = static_cast<std::size_t>(batch);
  const std::size_t n_conv = arch.convs.size();
  const std::size_t n_fc = arch.hidden.size() + 1;
  if (grads.size() != model.params.size()) throw NnError(NnError::Code::ShapeMismatch, "gradient buffer size mismatch");
  auto grad_of = [&](std::size_t tensor) { return grads.data() + model.layout[tensor].offset; };

  for (std::size_t jj = n_fc; jj-- > 0;) {
    const std::size_t layer = n_conv + jj;
    const auto in = static_cast<Eigen::Index>(ws.sizes[layer]);
    const auto out_dim = static_cast<Eigen::Index>(ws.sizes[layer + 1]);
    if (jj + 1 < n_fc) {
      detail::relu_backward(std::span<T>(ws.deltas[layer + 1].data(), b * ws.sizes[layer + 1]),
                            std::span<const T>(ws.acts[layer + 1].data(), b * ws.sizes[layer + 1]));
    }
    ConstMatMap<T> dy(ws.deltas[layer + 1].data(), static_cast<Eigen::Index>(b), out_dim);
    ConstMatMap<T> x(ws.acts[layer].data(), static_cast<Eigen::Index>(b), in);
    ConstMatMap<T> w(model.weight(layer).data(), out_dim, in);
    MatMap<T> dw(grad_of(2 * layer), out_dim, in);
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(grad_of(2 * layer + 1), out_dim);
    dw.noalias() += dy.transpose() * x;
    db += dy.colwise().sum();
    if (layer > 0 || want_input_grad) {
      MatMap<T> dx(ws.deltas[layer].data(), static_cast<Eigen::Index>(b), in);
      dx.noalias() = dy * w;
    }
  }

  for (std::size_t i = n_conv; i-- > 0;) {
    const auto& cv = arch.convs[i];
    const auto& s = ws.shapes[i];
    const auto& o = ws.shapes[i + 1];
    const std::size_t positions = static_cast<std::size_t>(o.h) * o.w;
    const std::size_t k = static_cast<std::size_t>(cv.kernel) * cv.kernel * s.c;
    detail::relu_backward(std::span<T>(ws.deltas[i + 1].data(), b * o.size()), std::span<const T>(ws.acts[i + 1].data(), b * o.size()));
    ConstMatMap<T> dout(ws.deltas[i + 1].data(), static_cast<Eigen::Index>(b * positions), cv.filters);
    ConstMatMap<T> col_m(ws.cols[i].data(), static_cast<Eigen::Index>(b * positions), static_cast<Eigen::Index>(k));
    ConstMatMap<T> w(model.weight(i).data(), cv.filters, static_cast<Eigen::Index>(k));
    MatMap<T> dw(grad_of(2 * i), cv.filters, static_cast<Eigen::Index>(k));
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(grad_of(2 * i + 1), cv.filters);
    dw.noalias() += dout.transpose() * col_m;
    db += dout.colwise().sum();
    if (i > 0 || want_input_grad) {
      // dcols reuses the im2col buffer, which is no longer needed.
      MatMap<T> dcols(ws.cols[i].data(), static_cast<Eigen::Index>(b * positions), static_cast<Eigen::Index>(k));
      dcols.noalias() = dout * w;
      std::fill_n(ws.deltas[i].data(), b * s.size(), T{0});
      for (std::size_t n = 0; n < b; ++n) {
        detail::col2im_add(ws.cols[i].data() + n * positions * k, s, cv, o, ws.deltas[i].data() + n * s.size());
      }
    }
  }
}

/// Row-wise softmax with max subtraction.
template <class T>
std::vector<T> softmax(std::span<const T> logits, int classes) {
  std::vector<T> p(logits.begin(), logits.end());
  for (std::size_t r = 0; r < p.size() / classes; ++r) {
    T* row = p.data() + r * classes;
    const T mx = *std::max_element(row, row + classes);
    T sum = 0;
    for (int c = 0; c < classes; ++c) sum += (row[c] = std::exp(row[c] - mx));
    for (int c = 0; c < classes; ++c) row[c] /= sum;
  }
  return p;
}

/// Lowest index wins ties.
template <class T>
int argmax(std::span<const T> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

struct XentStats {
  double loss_sum = 0.0;
  int correct = 0;
};

/// Softmax cross-entropy on ws logits. Writes scale * (p - onehot) into the
/// logit gradient and returns the summed loss and argmax hits.
template <class T>
XentStats softmax_xent(Workspace<T>& ws, int batch, std::span<const int> labels, T scale) {
  const int classes = ws.arch().classes;
  XentStats st;
  const auto logits = ws.logits();
  auto grad = ws.logit_grad();
  for (int n = 0; n < batch; ++n) {
    const T* z = logits.data() + static_cast<std::size_t>(n) * classes;
    T* g = grad.data() + static_cast<std::size_t>(n) * classes;
    const int y = labels[n];
    if (y < 0 || y >= classes) throw NnError(NnError::Code::ShapeMismatch, "label out of range");
    const T mx = *std::max_element(z, z + classes);
    double sum = 0;
    for (int c = 0; c < classes; ++c) sum += std::exp(static_cast<double>(z[c] - mx));
    const double log_sum = std::log(sum);
    st.loss_sum += log_sum - static_cast<double>(z[y] - mx);
    for (int c = 0; c < classes; ++c) {
      const double p = std::exp(static_cast<double>(z[c] - mx) - log_sum);
      g[c] = static_cast<T>(scale * (p - (c == y ? 1.0 : 0.0)));
    }
    if (argmax(std::span<const T>(z, classes)) == y) ++st.correct;
  }
  return st;
}

template <class T>
struct LossAndGrads {
  double loss = 0.0;           // mean over the batch
  std::vector<T> param_grads;  // d loss / d params
  std::vector<T> input_grads;  // d loss / d inputs, batch x input size
};

/// One-shot mean cross-entropy and gradients for a batch (rows of `inputs`).
template <class T>
LossAndGrads<T> loss_and_grads(const Model<T>& model, std::span<const T> inputs, std::span<const int> labels) {
  const auto in_size = model.arch.input.size();
  if (inputs.size() != labels.size() * in_size || labels.empty()) throw NnError(NnError::Code::ShapeMismatch, "inputs/labels shape mismatch");
  const int batch = static_cast<int>(labels.size());
  Workspace<T> ws(model.arch, batch);
  std::copy(inputs.begin(), inputs.end(), ws.input().begin());
  forward(model, ws, batch);
  const auto st = softmax_xent(ws, batch, labels, static_cast<T>(1.0 / batch));
  LossAndGrads<T> out;
  out.loss = st.loss_sum / batch;
  out.param_grads.assign(model.params.size(), T{0});
  backward(model, ws, batch, std::span<T>(out.param_grads), true);
  out.input_grads.assign(ws.input_grad().begin(), ws.input_grad().begin() + static_cast<std::ptrdiff_t>(inputs.size()));
  return out;
}

/// Logits for a batch of inputs (rows), batch x classes.
template <class T>
std::vector<T> forward_logits(const Model<T>& model, std::span<const T> inputs) {
  const auto in_size = model.arch.input.size();
  if (inputs.empty() || inputs.size() % in_size != 0) throw NnError(NnError::Code::ShapeMismatch, "input size is not a multiple of the model input");
  const int batch = static_cast<int>(inputs.size() / in_size);
  Workspace<T> ws(model.arch, batch);
  std::copy(inputs.begin(), inputs.end(), ws.input().begin());
  forward(model, ws, batch);
  return {ws.logits().begin(), ws.logits().begin() + static_cast<std::ptrdiff_t>(batch) * model.arch.classes};
}

}  // namespace dlsp::nn
