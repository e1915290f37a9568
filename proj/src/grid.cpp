#include "reconuq/grid.hpp"

#include <algorithm>
#include <cstring>

namespace reconuq {

std::vector<Volume> input_channels(const Sample& s) {
  std::vector<Volume> out;
  out.reserve(input_channel_count(s));

  Volume ct = s.ct;
  for (std::int64_t i = 0; i < ct.size(); ++i)
    if (!s.body.data[i]) ct.data[i] = 0.0f;
  out.push_back(std::move(ct));

  Volume high(s.ct.shape);
  high.spacing = s.ct.spacing;
  for (std::int64_t i = 0; i < high.size(); ++i)
    high.data[i] = s.tv_high.data[i] ? 1.0f : 0.0f;
  out.push_back(std::move(high));

  Volume low(s.ct.shape);
  low.spacing = s.ct.spacing;
  const float low_level = static_cast<float>(s.rx_low / s.rx_high);
  for (std::int64_t i = 0; i < low.size(); ++i)
    low.data[i] = s.tv_low.data[i] ? low_level : 0.0f;
  out.push_back(std::move(low));

  for (const auto& [name, mask] : s.oars) {
    (void)name;
    Volume ch(s.ct.shape);
    ch.spacing = s.ct.spacing;
    for (std::int64_t i = 0; i < ch.size(); ++i)
      ch.data[i] = mask.data[i] ? 1.0f : 0.0f;
    out.push_back(std::move(ch));
  }
  return out;
}

double masked_mse(const Volume& a, const Volume& b, const Mask& m) {
  require_same_shape(a, b, "masked_mse");
  require_same_shape(a, m, "masked_mse");
  double acc = 0.0;
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < m.size(); ++i) {
    if (!m.data[i]) continue;
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    acc += d * d;
    ++count;
  }
  if (count == 0) throw EmptyMask("masked_mse: mask has no set voxel");
  return acc / static_cast<double>(count);
}

namespace {

// Copies the box [origin, origin+size) out of a flat row-major array,
// one contiguous run of the last axis at a time.
template <typename S>
void copy_box(const S* src, const std::vector<int>& src_shape,
              const std::vector<int>& origin, const std::vector<int>& size,
              S* dst) {
  const int rank = static_cast<int>(src_shape.size());
  const auto src_strides = strides_of(src_shape);
  const auto dst_strides = strides_of(size);
  const int run = size[rank - 1];

  std::vector<int> outer(size.begin(), size.end() - 1);
  if (outer.empty()) outer.push_back(1);
  std::vector<int> idx(outer.size(), 0);
  do {
    std::int64_t s = origin[rank - 1];
    std::int64_t d = 0;
    for (int a = 0; a + 1 < rank; ++a) {
      s += (origin[a] + idx[a]) * src_strides[a];
      d += idx[a] * dst_strides[a];
    }
    std::memcpy(dst + d, src + s, sizeof(S) * static_cast<std::size_t>(run));
  } while (advance_index(idx, outer));
}

std::vector<int> clamp_origin(const std::vector<int>& center,
                              const std::vector<int>& size,
                              const std::vector<int>& shape) {
  std::vector<int> origin(shape.size());
  for (std::size_t a = 0; a < shape.size(); ++a) {
    int o = center[a] - size[a] / 2;
    o = std::clamp(o, 0, shape[a] - size[a]);
    origin[a] = o;
  }
  return origin;
}

}  // namespace

Volume crop_volume(const Volume& v, const std::vector<int>& origin,
                   const std::vector<int>& size) {
  Volume out(size);
  out.spacing = v.spacing;
  copy_box(v.data.data(), v.shape, origin, size, out.data.data());
  return out;
}

Mask crop_mask(const Mask& m, const std::vector<int>& origin,
               const std::vector<int>& size) {
  Mask out(size);
  copy_box(m.data.data(), m.shape, origin, size, out.data.data());
  return out;
}

Patch extract_patch(const Sample& s, const std::vector<int>& center,
                    const std::vector<int>& size) {
  const auto& shape = s.ct.shape;
  if (center.size() != shape.size() || size.size() != shape.size())
    throw ShapeMismatch("extract_patch: center/size rank mismatch");
  for (std::size_t a = 0; a < shape.size(); ++a)
    if (size[a] > shape[a] || size[a] <= 0)
      throw PatchTooLarge("extract_patch: patch exceeds sample shape");

  Patch p;
  p.size = size;
  p.origin = clamp_origin(center, size, shape);
  for (const Volume& ch : input_channels(s))
    p.channels.push_back(crop_volume(ch, p.origin, size));
  p.body = crop_mask(s.body, p.origin, size);
  if (s.dose) p.dose = crop_volume(*s.dose, p.origin, size);
  return p;
}

template <typename S>
Tensor<S> flip_tensor(const Tensor<S>& t, const std::set<int>& axes) {
  for (int a : axes)
    if (a < 0 || a >= t.rank()) throw BadAxis("flip: axis out of range");
  if (axes.empty()) return t;

  Tensor<S> out(t.shape);
  const auto strides = strides_of(t.shape);
  std::vector<int> idx(t.shape.size(), 0);
  do {
    std::int64_t src = 0;
    std::int64_t dst = 0;
    for (std::size_t a = 0; a < t.shape.size(); ++a) {
      src += idx[a] * strides[a];
      const int j = axes.count(static_cast<int>(a)) ? t.shape[a] - 1 - idx[a] : idx[a];
      dst += j * strides[a];
    }
    out.data[dst] = t.data[src];
  } while (advance_index(idx, t.shape));
  return out;
}

template Tensor<float> flip_tensor(const Tensor<float>&, const std::set<int>&);
template Tensor<double> flip_tensor(const Tensor<double>&, const std::set<int>&);
template Tensor<std::uint8_t> flip_tensor(const Tensor<std::uint8_t>&, const std::set<int>&);

namespace {

Volume flip_volume(const Volume& v, const std::set<int>& axes) {
  Volume out(v.shape);
  out.spacing = v.spacing;
  out.data = flip_tensor<float>(v, axes).data;
  return out;
}

}  // namespace

Patch flip(const Patch& p, const std::set<int>& axes) {
  Patch out;
  out.origin = p.origin;
  out.size = p.size;
  for (const Volume& ch : p.channels) out.channels.push_back(flip_volume(ch, axes));
  out.body = flip_tensor(p.body, axes);
  if (p.dose) out.dose = flip_volume(*p.dose, axes);
  return out;
}

}  // namespace reconuq
