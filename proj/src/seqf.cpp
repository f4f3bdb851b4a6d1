#include "ctarnn/seqf.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ctarnn/errors.hpp"

namespace ctarnn {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[off + i]) << (8 * i);
  return v;
}

struct Header {
  Shape shape;
  std::size_t payload_offset;
};

Header parse_header(std::span<const std::uint8_t> in) {
  if (in.size() < 4) throw FormatError("SEQF: file shorter than magic", in.size());
  if (std::memcmp(in.data(), "SEQF", 4) != 0) throw FormatError("SEQF: bad magic", 0);
  if (in.size() < 12) throw FormatError("SEQF: truncated header", in.size());
  const std::uint32_t version = get_u32(in, 4);
  if (version != kSeqfVersion) {
    throw FormatError("SEQF: unsupported version " + std::to_string(version), 4);
  }
  const std::uint32_t ndim = get_u32(in, 8);
  if (ndim != 2 && ndim != 3) {
    throw FormatError("SEQF: ndim must be 2 or 3, got " + std::to_string(ndim), 8);
  }
  const std::size_t payload_offset = 12 + 4 * std::size_t{ndim};
  if (in.size() < payload_offset) throw FormatError("SEQF: truncated extents", in.size());
  Header h{{}, payload_offset};
  for (std::uint32_t d = 0; d < ndim; ++d) {
    const std::uint32_t e = get_u32(in, 12 + 4 * d);
    if (e == 0) throw FormatError("SEQF: zero extent", 12 + 4 * d);
    h.shape.push_back(e);
  }
  return h;
}

void check_payload(const Header& h, std::size_t total) {
  const std::size_t expected = shape_numel(h.shape) * 4;
  const std::size_t actual = total - h.payload_offset;
  if (actual != expected) {
    throw FormatError("SEQF: payload is " + std::to_string(actual) + " bytes, expected " +
                          std::to_string(expected),
                      total < h.payload_offset + expected ? total : h.payload_offset + expected);
  }
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

Tensor FloatArray::to_tensor(DType dtype) const {
  if (dtype == DType::f32) return Tensor::from_floats(shape, data);
  return Tensor::from_doubles(shape, std::vector<double>(data.begin(), data.end()));
}

FloatArray FloatArray::from_tensor(const Tensor& t) {
  FloatArray a{t.shape(), {}};
  if (t.dtype() == DType::f32) {
    auto d = t.data<float>();
    a.data.assign(d.begin(), d.end());
  } else {
    auto d = t.data<double>();
    a.data.resize(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) a.data[i] = static_cast<float>(d[i]);
  }
  return a;
}

std::vector<std::uint8_t> encode_seqf(const FloatArray& array) {
  if (array.shape.size() != 2 && array.shape.size() != 3) {
    throw DimensionError("SEQF stores rank 2 or 3 arrays, got " + shape_str(array.shape));
  }
  if (shape_numel(array.shape) != array.data.size()) {
    throw DimensionError("SEQF: data length does not match shape " + shape_str(array.shape));
  }
  std::vector<std::uint8_t> out;
  out.reserve(12 + 4 * array.shape.size() + 4 * array.data.size());
  for (char c : {'S', 'E', 'Q', 'F'}) out.push_back(static_cast<std::uint8_t>(c));
  put_u32(out, kSeqfVersion);
  put_u32(out, static_cast<std::uint32_t>(array.shape.size()));
  for (std::size_t e : array.shape) put_u32(out, static_cast<std::uint32_t>(e));
  for (float f : array.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

FloatArray decode_seqf(std::span<const std::uint8_t> bytes) {
  const Header h = parse_header(bytes);
  check_payload(h, bytes.size());
  FloatArray a{h.shape, std::vector<float>(shape_numel(h.shape))};
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    a.data[i] = std::bit_cast<float>(get_u32(bytes, h.payload_offset + 4 * i));
  }
  return a;
}

void write_seqf(const std::filesystem::path& path, const FloatArray& array) {
  const auto bytes = encode_seqf(array);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

FloatArray read_seqf(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  try {
    return decode_seqf(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.message(), e.offset());
  }
}

Shape inspect_seqf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path.string());
  const auto total = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> head(std::min<std::size_t>(total, 24));
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  const Header h = parse_header(head);
  check_payload(h, total);
  return h.shape;
}

}  // namespace ctarnn
