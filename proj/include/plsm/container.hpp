#pragma once

#include "plsm/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace plsm {

/// Binary container shared by datasets and checkpoints:
///
///   "PLSM" | version (u8) | header length (u64 LE) | JSON header | payload
///
/// The header lists arrays as {"name", "shape"}; the payload holds their
/// values as little-endian f64 in header order, with nothing after them.
inline constexpr char kContainerMagic[4] = {'P', 'L', 'S', 'M'};
inline constexpr std::uint8_t kContainerVersion = 1;

enum class ContainerErrc { io, bad_magic, version_mismatch, malformed_header, truncated_payload };

class ContainerError : public std::runtime_error {
public:
  ContainerError(ContainerErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ContainerErrc code() const { return code_; }

private:
  ContainerErrc code_;
};

struct NamedArray {
  std::string name;
  Tensor values;
};

struct Container {
  std::string kind;       // "dataset" or "checkpoint"
  nlohmann::json meta;    // free-form: config echo, variant tag, ...
  std::vector<NamedArray> arrays;

  const Tensor& array(const std::string& name) const;
};

std::string encode_container(const Container& c);
Container decode_container(const std::string& bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

}  // namespace plsm
