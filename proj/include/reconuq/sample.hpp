#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "reconuq/tensor.hpp"

namespace reconuq {

enum class Family { kId, kOod };

inline const char* family_name(Family f) {
  return f == Family::kId ? "ID" : "OOD";
}

// One synthetic patient. The image is normalized to [0,1] and zeroed
// outside the body; dose is in physical units (prescription scale) and is
// present for ID patients only.
struct Sample {
  std::string id;
  Volume ct;
  Mask body;
  Mask tv_high;
  Mask tv_low;
  std::vector<std::pair<std::string, Mask>> oars;
  double rx_high = 70.0;
  double rx_low = 54.25;
  std::optional<Volume> dose;
  Family family = Family::kId;
};

// Model input channels, channel-first: body-masked image, the two
// prescription channels (target masks scaled by prescription / rx_high),
// then one channel per OAR mask. Masking the image keeps everything
// outside the body contour from reaching the network.
std::vector<Volume> input_channels(const Sample& s);

inline int input_channel_count(const Sample& s) {
  return 3 + static_cast<int>(s.oars.size());
}

}  // namespace reconuq
