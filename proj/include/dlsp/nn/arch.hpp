#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace dlsp::nn {

class NnError : public std::runtime_error {
 public:
  enum class Code { ShapeMismatch, BadMagic, ShapeMismatchWithArch, Truncated, EmptySplit, EmptyTrainSplit, InvalidConfig };
  NnError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  [[nodiscard]] Code code() const noexcept { return code_; }

 private:
  Code code_;
};

/// Valid-padding convolution: out = floor((in - kernel) / stride) + 1.
struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int filters = 1;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct Shape3 {
  int h = 0, w = 0, c = 0;
  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(h) * w * c; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

struct TensorInfo {
  std::string name;
  std::vector<std::size_t> dims;
  std::size_t offset = 0;  // into the flat parameter vector
  std::size_t size = 0;
  friend bool operator==(const TensorInfo&, const TensorInfo&) = default;
};

/// Conv layers (ReLU) -> flatten (HWC) -> hidden FC layers (ReLU) -> FC(classes) logits.
struct ArchSpec {
  Shape3 input{101, 101, 1};
  std::vector<ConvSpec> convs;
  std::vector<int> hidden;
  int classes = 10;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;

  /// 101x101x1 -> 5x5/2 x24 -> 5x5/2 x36 -> 5x5/2 x48 -> 3x3/1 x64 -> 4096 -> 256 -> 64 -> 10.
  static ArchSpec default_arch() { return {{101, 101, 1}, {{5, 2, 24}, {5, 2, 36}, {5, 2, 48}, {3, 1, 64}}, {256, 64}, 10}; }

  /// Activation shapes: input followed by each conv output.
  [[nodiscard]] std::vector<Shape3> conv_shapes() const {
    std::vector<Shape3> s{input};
    for (const auto& cv : convs) {
      const auto& in = s.back();
      if (cv.kernel < 1 || cv.stride < 1 || cv.filters < 1) throw NnError(NnError::Code::InvalidConfig, "bad conv spec");
      if (in.h < cv.kernel || in.w < cv.kernel) throw NnError(NnError::Code::InvalidConfig, "conv kernel larger than its input");
      s.push_back({(in.h - cv.kernel) / cv.stride + 1, (in.w - cv.kernel) / cv.stride + 1, cv.filters});
    }
    return s;
  }

  [[nodiscard]] std::size_t flat_size() const { return conv_shapes().back().size(); }
  [[nodiscard]] std::size_t layer_count() const { return convs.size() + hidden.size() + 1; }

  /// Parameter tensors in file/flat order: conv{i}.weight [out,k,k,in], conv{i}.bias,
  /// fc{j}.weight [out,in], fc{j}.bias.
  [[nodiscard]] std::vector<TensorInfo> tensors() const {
    if (input.h < 1 || input.w < 1 || input.c < 1 || classes < 1) throw NnError(NnError::Code::InvalidConfig, "bad input/classes");
    std::vector<TensorInfo> t;
    std::size_t off = 0;
    auto add = [&](std::string name, std::vector<std::size_t> dims) {
      std::size_t n = 1;
      for (auto d : dims) n *= d;
      t.push_back({std::move(name), std::move(dims), off, n});
      off += n;
    };
    const auto shapes = conv_shapes();
    for (std::size_t i = 0; i < convs.size(); ++i) {
      const auto& cv = convs[i];
      const auto k = static_cast<std::size_t>(cv.kernel);
      add("conv" + std::to_string(i + 1) + ".weight", {static_cast<std::size_t>(cv.filters), k, k, static_cast<std::size_t>(shapes[i].c)});
      add("conv" + std::to_string(i + 1) + ".bias", {static_cast<std::size_t>(cv.filters)});
    }
    std::size_t in = shapes.back().size();
    std::vector<int> widths = hidden;
    widths.push_back(classes);
    for (std::size_t j = 0; j < widths.size(); ++j) {
      if (widths[j] < 1) throw NnError(NnError::Code::InvalidConfig, "bad FC width");
      const auto out = static_cast<std::size_t>(widths[j]);
      add("fc" + std::to_string(j + 1) + ".weight", {out, in});
      add("fc" + std::to_string(j + 1) + ".bias", {out});
      in = out;
    }
    return t;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    const auto t = tensors();
    return t.back().offset + t.back().size;
  }
};

}  // namespace dlsp::nn
