#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "reconuq/tensor.hpp"

namespace reconuq {

// On-disk tensor container:
//   bytes 0-3   magic "UQT1"
//   bytes 4-7   little-endian u32 header length H
//   bytes 8..   UTF-8 JSON header {"dtype":"f32"|"u8","role":...,"shape":[...]}
//   remainder   raw little-endian payload, row-major
struct Uqt1Header {
  std::string dtype;
  std::vector<int> shape;
  std::string role;
};

void write_uqt1(const std::filesystem::path& path, const Tensor<float>& t,
                const std::string& role);
void write_uqt1(const std::filesystem::path& path, const Tensor<std::uint8_t>& t,
                const std::string& role);

Uqt1Header read_uqt1_header(const std::filesystem::path& path);
Tensor<float> read_uqt1_f32(const std::filesystem::path& path,
                            std::string* role = nullptr);
Tensor<std::uint8_t> read_uqt1_u8(const std::filesystem::path& path,
                                  std::string* role = nullptr);

}  // namespace reconuq
