#include "plsm/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace plsm {

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t offset) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

double get_f64(const std::string& in, std::size_t offset) { return std::bit_cast<double>(get_u64(in, offset)); }

constexpr std::size_t kPreambleSize = 4 + 1 + 8;

}  // namespace

const Tensor& Container::array(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a.values;
  throw ContainerError(ContainerErrc::malformed_header, "container has no array named '" + name + "'");
}

std::string encode_container(const Container& c) {
  nlohmann::json header;
  header["kind"] = c.kind;
  header["meta"] = c.meta;
  header["arrays"] = nlohmann::json::array();
  for (const auto& a : c.arrays) header["arrays"].push_back({{"name", a.name}, {"shape", a.values.shape()}});
  const std::string text = header.dump();

  std::string out(kContainerMagic, 4);
  out.push_back(static_cast<char>(kContainerVersion));
  put_u64(out, text.size());
  out += text;
  for (const auto& a : c.arrays)
    for (double d : a.values.data()) put_f64(out, d);
  return out;
}

Container decode_container(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
    throw ContainerError(ContainerErrc::bad_magic, "bad magic: not a PLSM container");
  }
  if (bytes.size() < 5) throw ContainerError(ContainerErrc::truncated_payload, "truncated payload: missing version");
  const auto version = static_cast<std::uint8_t>(bytes[4]);
  if (version != kContainerVersion) {
    throw ContainerError(ContainerErrc::version_mismatch, "version mismatch: file has version " +
                                                              std::to_string(version) + ", expected " +
                                                              std::to_string(kContainerVersion));
  }
  if (bytes.size() < kPreambleSize) {
    throw ContainerError(ContainerErrc::truncated_payload, "truncated payload: missing header length");
  }
  const std::uint64_t header_len = get_u64(bytes, 5);
  if (header_len > bytes.size() - kPreambleSize) {
    throw ContainerError(ContainerErrc::truncated_payload, "truncated payload: header extends past end of file");
  }

  Container c;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(kPreambleSize, header_len));
    c.kind = header.at("kind").get<std::string>();
    c.meta = header.at("meta");
  } catch (const nlohmann::json::exception& e) {
    throw ContainerError(ContainerErrc::malformed_header, std::string("malformed header: ") + e.what());
  }

  std::size_t offset = kPreambleSize + header_len;
  std::size_t expected = 0;
  std::vector<std::pair<std::string, Shape>> manifest;
  try {
    for (const auto& entry : header.at("arrays")) {
      Shape shape = entry.at("shape").get<Shape>();
      if (shape.empty()) throw ContainerError(ContainerErrc::malformed_header, "malformed header: empty shape");
      for (std::size_t d : shape)
        if (d == 0) throw ContainerError(ContainerErrc::malformed_header, "malformed header: zero dimension");
      expected += shape_product(shape);
      manifest.emplace_back(entry.at("name").get<std::string>(), std::move(shape));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ContainerError(ContainerErrc::malformed_header, std::string("malformed header: ") + e.what());
  }
  const std::size_t payload = bytes.size() - offset;
  if (payload != expected * 8) {
    throw ContainerError(ContainerErrc::truncated_payload,
                         "truncated payload: header describes " + std::to_string(expected * 8) + " bytes, file has " +
                             std::to_string(payload));
  }
  for (auto& [name, shape] : manifest) {
    std::vector<double> values(shape_product(shape));
    for (double& v : values) {
      v = get_f64(bytes, offset);
      offset += 8;
    }
    c.arrays.push_back({name, Tensor(std::move(shape), std::move(values))});
  }
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const std::string bytes = encode_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContainerError(ContainerErrc::io, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ContainerError(ContainerErrc::io, "failed writing " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContainerError(ContainerErrc::io, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_container(buf.str());
}

}  // namespace plsm
