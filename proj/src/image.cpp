#include "saga/image.hpp"

#include <algorithm>
#include <cmath>

#include "saga/error.hpp"

namespace saga {

Rect intersect(const Rect& a, const Rect& b) noexcept {
  const int top = std::max(a.top, b.top);
  const int left = std::max(a.left, b.left);
  const int bottom = std::min(a.bottom(), b.bottom());
  const int right = std::min(a.right(), b.right());
  if (bottom <= top || right <= left) return {top, left, 0, 0};
  return {top, left, bottom - top, right - left};
}

Rect rescale(const Rect& r, int from_h, int from_w, int to_h, int to_w) {
  if (from_h <= 0 || from_w <= 0 || to_h <= 0 || to_w <= 0)
    throw Error(ErrorCode::InvalidArgument, "rescale: non-positive grid");
  auto edge = [](int v, int from, int to) {
    return static_cast<int>((static_cast<long>(v) * to) / from);
  };
  const int top = edge(r.top, from_h, to_h);
  const int left = edge(r.left, from_w, to_w);
  const int bottom = edge(r.bottom(), from_h, to_h);
  const int right = edge(r.right(), from_w, to_w);
  return {top, left, bottom - top, right - left};
}

Image::Image(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
  if (height < 0 || width < 0 || channels < 0)
    throw Error(ErrorCode::ShapeMismatch, "negative image dimension");
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

Image crop(const Image& img, const Rect& r) {
  if (r.empty() || !r.inside(img.height(), img.width()))
    throw Error(ErrorCode::ShapeMismatch, "crop rectangle outside image");
  Image out(r.height, r.width, img.channels());
  const std::size_t row = static_cast<std::size_t>(r.width) * img.channels();
  for (int y = 0; y < r.height; ++y) {
    const double* src = img.values().data() + img.index(r.top + y, r.left, 0);
    std::copy(src, src + row, out.values().data() + out.index(y, 0, 0));
  }
  return out;
}

void paste(Image& dst, const Image& src, const Rect& at) {
  if (at.height != src.height() || at.width != src.width() || src.channels() != dst.channels() ||
      !at.inside(dst.height(), dst.width()))
    throw Error(ErrorCode::ShapeMismatch, "paste: source does not fit target rectangle");
  const std::size_t row = static_cast<std::size_t>(at.width) * dst.channels();
  for (int y = 0; y < at.height; ++y) {
    const double* s = src.values().data() + src.index(y, 0, 0);
    std::copy(s, s + row, dst.values().data() + dst.index(at.top + y, at.left, 0));
  }
}

std::vector<BilinearResize::Tap> BilinearResize::taps(int in, int out) {
  std::vector<Tap> t(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::max(src, 0.0);
    int i0 = static_cast<int>(std::floor(src));
    i0 = std::min(i0, in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    const double w1 = (i1 == i0) ? 0.0 : src - i0;
    t[o] = {i0, i1, w1};
  }
  return t;
}

BilinearResize::BilinearResize(int in_h, int in_w, int out_h, int out_w)
    : in_h_(in_h), in_w_(in_w), out_h_(out_h), out_w_(out_w) {
  if (in_h <= 0 || in_w <= 0 || out_h <= 0 || out_w <= 0)
    throw Error(ErrorCode::ShapeMismatch, "resize: non-positive dimension");
  rows_ = taps(in_h, out_h);
  cols_ = taps(in_w, out_w);
}

Image BilinearResize::forward(const Image& in) const {
  if (in.height() != in_h_ || in.width() != in_w_)
    throw Error(ErrorCode::ShapeMismatch, "resize: input shape differs from plan");
  if (in_h_ == out_h_ && in_w_ == out_w_) return in;
  const int ch = in.channels();
  Image out(out_h_, out_w_, ch);
  for (int y = 0; y < out_h_; ++y) {
    const Tap& ry = rows_[y];
    for (int x = 0; x < out_w_; ++x) {
      const Tap& cx = cols_[x];
      const double w00 = (1 - ry.w1) * (1 - cx.w1);
      const double w01 = (1 - ry.w1) * cx.w1;
      const double w10 = ry.w1 * (1 - cx.w1);
      const double w11 = ry.w1 * cx.w1;
      for (int c = 0; c < ch; ++c) {
        out.at(y, x, c) = w00 * in.at(ry.i0, cx.i0, c) + w01 * in.at(ry.i0, cx.i1, c) +
                          w10 * in.at(ry.i1, cx.i0, c) + w11 * in.at(ry.i1, cx.i1, c);
      }
    }
  }
  return out;
}

Image BilinearResize::adjoint(const Image& g) const {
  if (g.height() != out_h_ || g.width() != out_w_)
    throw Error(ErrorCode::ShapeMismatch, "resize adjoint: gradient shape differs from plan");
  if (in_h_ == out_h_ && in_w_ == out_w_) return g;
  const int ch = g.channels();
  Image in(in_h_, in_w_, ch);
  for (int y = 0; y < out_h_; ++y) {
    const Tap& ry = rows_[y];
    for (int x = 0; x < out_w_; ++x) {
      const Tap& cx = cols_[x];
      const double w00 = (1 - ry.w1) * (1 - cx.w1);
      const double w01 = (1 - ry.w1) * cx.w1;
      const double w10 = ry.w1 * (1 - cx.w1);
      const double w11 = ry.w1 * cx.w1;
      for (int c = 0; c < ch; ++c) {
        const double v = g.at(y, x, c);
        in.at(ry.i0, cx.i0, c) += w00 * v;
        in.at(ry.i0, cx.i1, c) += w01 * v;
        in.at(ry.i1, cx.i0, c) += w10 * v;
        in.at(ry.i1, cx.i1, c) += w11 * v;
      }
    }
  }
  return in;
}

Image resize_bilinear(const Image& in, int out_h, int out_w) {
  return BilinearResize(in.height(), in.width(), out_h, out_w).forward(in);
}

}  // namespace saga
