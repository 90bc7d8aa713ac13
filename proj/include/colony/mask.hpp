#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "colony/tensor.hpp"

namespace colony {

/// Pixel classes. Values are the on-disk mask values.
enum class PixelClass : std::uint8_t {
  background = 0,
  bvg_plus = 1,
  bvg_minus = 2,
  border = 3,
};

inline const char* class_name(PixelClass c) {
  switch (c) {
    case PixelClass::background: return "background";
    case PixelClass::bvg_plus: return "bvg+";
    case PixelClass::bvg_minus: return "bvg-";
    case PixelClass::border: return "border";
  }
  return "?";
}

/// Per-pixel class map, row-major.
class LabelMask {
 public:
  LabelMask() = default;
  LabelMask(int h, int w, PixelClass fill = PixelClass::background)
      : h_(h), w_(w),
        data_(static_cast<std::size_t>(h) * w, static_cast<std::uint8_t>(fill)) {}

  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return data_.size(); }

  std::uint8_t* data() { return data_.data(); }
  const std::uint8_t* data() const { return data_.data(); }
  std::vector<std::uint8_t>& storage() { return data_; }
  const std::vector<std::uint8_t>& storage() const { return data_; }

  PixelClass at(int y, int x) const {
    return static_cast<PixelClass>(data_[static_cast<std::size_t>(y) * w_ + x]);
  }
  void set(int y, int x, PixelClass c) {
    data_[static_cast<std::size_t>(y) * w_ + x] = static_cast<std::uint8_t>(c);
  }
  bool inside(int y, int x) const { return y >= 0 && y < h_ && x >= 0 && x < w_; }

  /// Pixel count per class value 0..3.
  std::array<std::size_t, 4> histogram() const {
    std::array<std::size_t, 4> h{};
    for (auto v : data_) {
      if (v < 4) ++h[v];
    }
    return h;
  }

  void validate() const {
    for (auto v : data_) {
      if (v > 3) {
        throw LabelError("label value " + std::to_string(v) +
                         " outside 0..3");
      }
    }
  }

  friend bool operator==(const LabelMask&, const LabelMask&) = default;

 private:
  int h_ = 0, w_ = 0;
  std::vector<std::uint8_t> data_;
};

/// 8-bit RGB image, interleaved row-major.
class RgbImage {
 public:
  RgbImage() = default;
  RgbImage(int h, int w, std::array<std::uint8_t, 3> fill = {0, 0, 0})
      : h_(h), w_(w), data_(static_cast<std::size_t>(h) * w * 3) {
    for (std::size_t i = 0; i < data_.size(); i += 3) {
      data_[i] = fill[0];
      data_[i + 1] = fill[1];
      data_[i + 2] = fill[2];
    }
  }

  int height() const { return h_; }
  int width() const { return w_; }
  std::uint8_t* data() { return data_.data(); }
  const std::uint8_t* data() const { return data_.data(); }
  std::vector<std::uint8_t>& storage() { return data_; }
  const std::vector<std::uint8_t>& storage() const { return data_; }

  std::uint8_t* px(int y, int x) {
    return data_.data() + (static_cast<std::size_t>(y) * w_ + x) * 3;
  }
  const std::uint8_t* px(int y, int x) const {
    return data_.data() + (static_cast<std::size_t>(y) * w_ + x) * 3;
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;

 private:
  int h_ = 0, w_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Stacks images into an (n, 3, h, w) tensor scaled to [0, 1].
template <typename T = float>
Tensor<T> images_to_tensor(std::span<const RgbImage* const> images) {
  if (images.empty()) throw ShapeError("images_to_tensor: empty batch");
  const int h = images[0]->height(), w = images[0]->width();
  Tensor<T> t(Shape{static_cast<int>(images.size()), 3, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const RgbImage& img = *images[n];
    if (img.height() != h || img.width() != w) {
      throw ShapeError("images_to_tensor: mixed image sizes in one batch");
    }
    for (int c = 0; c < 3; ++c) {
      T* dst = t.plane(static_cast<int>(n), c);
      for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) {
        dst[i] = static_cast<T>(img.data()[i * 3 + c]) / T(255);
      }
    }
  }
  return t;
}

}  // namespace colony
