#include "reconuq/uqt1.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "reconuq/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "UQT1 payloads are written as raw native little-endian bytes");

namespace reconuq {

namespace {

constexpr char kMagic[4] = {'U', 'Q', 'T', '1'};

void write_file(const std::filesystem::path& path, const std::string& header_json,
                const void* payload, std::size_t payload_bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(kMagic, 4);
  const std::uint32_t h = static_cast<std::uint32_t>(header_json.size());
  out.write(reinterpret_cast<const char*>(&h), 4);
  out.write(header_json.data(), static_cast<std::streamsize>(header_json.size()));
  out.write(static_cast<const char*>(payload), static_cast<std::streamsize>(payload_bytes));
  if (!out) throw IoError("short write: " + path.string());
}

std::string make_header(const std::string& dtype, const std::vector<int>& shape,
                        const std::string& role) {
  nlohmann::json j;
  j["dtype"] = dtype;
  j["shape"] = shape;
  j["role"] = role;
  return j.dump();
}

struct RawFile {
  Uqt1Header header;
  std::vector<char> payload;
};

RawFile read_file(const std::filesystem::path& path, bool want_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());

  char magic[4];
  std::uint32_t hlen = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&hlen), 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("not a UQT1 file: " + path.string());

  std::string header_json(hlen, '\0');
  in.read(header_json.data(), hlen);
  if (!in) throw IoError("truncated UQT1 header: " + path.string());

  RawFile f;
  try {
    const auto j = nlohmann::json::parse(header_json);
    f.header.dtype = j.at("dtype").get<std::string>();
    f.header.shape = j.at("shape").get<std::vector<int>>();
    f.header.role = j.at("role").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad UQT1 header in " + path.string() + ": " + e.what());
  }

  if (want_payload) {
    std::int64_t n = 1;
    for (int d : f.header.shape) n *= d;
    const std::size_t elem = f.header.dtype == "f32" ? 4 : 1;
    f.payload.resize(static_cast<std::size_t>(n) * elem);
    in.read(f.payload.data(), static_cast<std::streamsize>(f.payload.size()));
    if (!in) throw IoError("truncated UQT1 payload: " + path.string());
  }
  return f;
}

}  // namespace

void write_uqt1(const std::filesystem::path& path, const Tensor<float>& t,
                const std::string& role) {
  write_file(path, make_header("f32", t.shape, role), t.data.data(),
             static_cast<std::size_t>(t.size()) * sizeof(float));
}

void write_uqt1(const std::filesystem::path& path, const Tensor<std::uint8_t>& t,
                const std::string& role) {
  write_file(path, make_header("u8", t.shape, role), t.data.data(),
             static_cast<std::size_t>(t.size()));
}

Uqt1Header read_uqt1_header(const std::filesystem::path& path) {
  return read_file(path, false).header;
}

Tensor<float> read_uqt1_f32(const std::filesystem::path& path, std::string* role) {
  auto f = read_file(path, true);
  if (f.header.dtype != "f32")
    throw IoError("expected f32 tensor in " + path.string() + ", got " + f.header.dtype);
  Tensor<float> t(f.header.shape);
  std::memcpy(t.data.data(), f.payload.data(), f.payload.size());
  if (role) *role = f.header.role;
  return t;
}

Tensor<std::uint8_t> read_uqt1_u8(const std::filesystem::path& path, std::string* role) {
  auto f = read_file(path, true);
  if (f.header.dtype != "u8")
    throw IoError("expected u8 tensor in " + path.string() + ", got " + f.header.dtype);
  Tensor<std::uint8_t> t(f.header.shape);
  std::memcpy(t.data.data(), f.payload.data(), f.payload.size());
  if (role) *role = f.header.role;
  return t;
}

}  // namespace reconuq
