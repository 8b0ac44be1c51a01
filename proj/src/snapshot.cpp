#include "leirstd/snapshot.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace leirstd {
namespace {

template <class T>
void put_le(std::vector<std::uint8_t>& buf, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <class T>
T get_le(const std::uint8_t* p) {
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(p[i]) << (8 * i);
    return value;
}

}  // namespace

std::vector<std::uint8_t> encode_snapshot(const Shape& shape, const std::vector<double>& values) {
    if (values.size() != shape.size()) throw DimensionError("snapshot: value count does not match shape");
    std::vector<std::uint8_t> buf;
    buf.reserve(kSnapshotHeaderBytes + 4 * values.size());
    buf.insert(buf.end(), std::begin(kSnapshotMagic), std::end(kSnapshotMagic));
    put_le<std::uint32_t>(buf, kSnapshotVersion);
    for (std::uint64_t d : {shape.n, shape.c, shape.h, shape.w}) put_le<std::uint64_t>(buf, d);
    for (double v : values) put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    return buf;
}

void write_snapshot(std::ostream& out, const Shape& shape, const std::vector<double>& values) {
    const auto buf = encode_snapshot(shape, values);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("snapshot: write failed");
}

void write_snapshot(const std::filesystem::path& path, const Tensor& tensor) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("snapshot: cannot open " + path.string() + " for writing");
    write_snapshot(out, tensor.shape(), tensor.to_vector());
}

Tensor read_snapshot(std::istream& in) {
    std::uint8_t header[kSnapshotHeaderBytes];
    if (!in.read(reinterpret_cast<char*>(header), sizeof(header))) throw IoError("snapshot: truncated header");
    if (std::memcmp(header, kSnapshotMagic, 4) != 0) throw DataError("snapshot: bad magic bytes");
    const auto version = get_le<std::uint32_t>(header + 4);
    if (version != kSnapshotVersion) throw DataError("snapshot: unsupported version " + std::to_string(version));
    Shape shape{get_le<std::uint64_t>(header + 8), get_le<std::uint64_t>(header + 16),
                get_le<std::uint64_t>(header + 24), get_le<std::uint64_t>(header + 32)};
    check_valid_shape(shape);
    std::vector<std::uint8_t> body(4 * shape.size());
    if (!in.read(reinterpret_cast<char*>(body.data()), static_cast<std::streamsize>(body.size()))) {
        throw IoError("snapshot: truncated payload for shape " + shape.str());
    }
    std::vector<double> values(shape.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        values[i] = std::bit_cast<float>(get_le<std::uint32_t>(body.data() + 4 * i));
    return Tensor::from(shape, std::move(values));
}

Tensor read_snapshot(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("snapshot: cannot open " + path.string());
    return read_snapshot(in);
}

}  // namespace leirstd
