#pragma once

#include <optional>
#include <set>
#include <vector>

#include "reconuq/sample.hpp"
#include "reconuq/tensor.hpp"

namespace reconuq {

// A crop of one sample: the model input channels plus the identically
// cropped body mask and (when present) dose. channels[0] is the image and
// doubles as the reconstruction target.
struct Patch {
  std::vector<int> origin;
  std::vector<int> size;
  std::vector<Volume> channels;
  Mask body;
  std::optional<Volume> dose;
};

// Mean squared error over the voxels where m is set, 64-bit accumulation.
//
// Throws ShapeMismatch when the three fields disagree, EmptyMask when the
// mask has no set voxel (a degenerate body contour).
double masked_mse(const Volume& a, const Volume& b, const Mask& m);

// Crop a box of `size` voxels out of every field of the sample. The origin
// is clamp(center - size/2, 0, shape - size); centers near the border are
// clamped rather than padded. Throws PatchTooLarge when size exceeds the
// sample shape on any axis.
Patch extract_patch(const Sample& s, const std::vector<int>& center,
                    const std::vector<int>& size);

// Reverse the given spatial axes of every field in the patch. Applying the
// same flip twice restores the patch bit for bit.
Patch flip(const Patch& p, const std::set<int>& axes);

// Low-level workers shared with the synthetic generator.
Volume crop_volume(const Volume& v, const std::vector<int>& origin,
                   const std::vector<int>& size);
Mask crop_mask(const Mask& m, const std::vector<int>& origin,
               const std::vector<int>& size);

template <typename S>
Tensor<S> flip_tensor(const Tensor<S>& t, const std::set<int>& axes);

}  // namespace reconuq
