#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace saga {

/// Axis-aligned integer rectangle. Units are whatever grid it lives on
/// (attention patches or image pixels).
struct Rect {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;

  int bottom() const noexcept { return top + height; }
  int right() const noexcept { return left + width; }
  long area() const noexcept { return static_cast<long>(height) * width; }
  bool empty() const noexcept { return height <= 0 || width <= 0; }
  bool contains(const Rect& other) const noexcept {
    return other.top >= top && other.left >= left && other.bottom() <= bottom() &&
           other.right() <= right();
  }
  bool inside(int grid_height, int grid_width) const noexcept {
    return top >= 0 && left >= 0 && bottom() <= grid_height && right() <= grid_width;
  }

  friend bool operator==(const Rect&, const Rect&) = default;
};

/// Intersection of two rectangles; empty (zero-sized) when they do not overlap.
Rect intersect(const Rect& a, const Rect& b) noexcept;

/// Maps a rectangle on a (from_h, from_w) grid onto a (to_h, to_w) grid by
/// proportional floor scaling of both edges. Works for non-integer ratios
/// such as a 24x24 patch grid over a 224x224 image.
Rect rescale(const Rect& r, int from_h, int from_w, int to_h, int to_w);

/// Row-major H x W x C image of doubles (HWC layout), nominally in [0, 1].
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels = 3, double fill = 0.0);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return channels_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool same_shape(const Image& o) const noexcept {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }

  double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return data_[index(y, x, c)]; }
  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  Rect bounds() const noexcept { return {0, 0, height_, width_}; }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

Image crop(const Image& img, const Rect& r);
void paste(Image& dst, const Image& src, const Rect& at);

/// Bilinear resampling with half-pixel centres (the usual
/// align_corners=false convention), no anti-aliasing. The adjoint maps a
/// cotangent on the output grid back onto the input grid and is the exact
/// transpose of the forward map.
class BilinearResize {
 public:
  BilinearResize(int in_h, int in_w, int out_h, int out_w);

  Image forward(const Image& in) const;
  Image adjoint(const Image& out_grad) const;

  int in_height() const noexcept { return in_h_; }
  int in_width() const noexcept { return in_w_; }
  int out_height() const noexcept { return out_h_; }
  int out_width() const noexcept { return out_w_; }

 private:
  struct Tap {
    int i0;
    int i1;
    double w1;  // weight of i1; i0 gets 1 - w1
  };
  static std::vector<Tap> taps(int in, int out);

  int in_h_, in_w_, out_h_, out_w_;
  std::vector<Tap> rows_;
  std::vector<Tap> cols_;
};

Image resize_bilinear(const Image& in, int out_h, int out_w);

}  // namespace saga
