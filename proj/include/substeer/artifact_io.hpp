#pragma once

#include "substeer/artifacts.hpp"
#include "substeer/linalg.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace substeer::io {

using Bytes = std::vector<std::uint8_t>;

Bytes read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

// Lower-case hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

// Little-endian primitives shared by every binary format.
class ByteWriter {
public:
    void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
    void magic(const char (&m)[5]);
    void u32(std::uint32_t v);
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f32(float v);
    void f64(double v);
    void json_block(const nlohmann::json& j);
    Bytes take() { return std::move(out_); }
    const Bytes& view() const { return out_; }

private:
    Bytes out_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> in, std::string what) : in_(in), what_(std::move(what)) {}
    void expect_magic(const char (&m)[5]);
    std::uint32_t u32();
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    float f32();
    double f64();
    nlohmann::json json_block();
    std::size_t remaining() const noexcept { return in_.size() - pos_; }
    void need(std::size_t n, const char* field);

private:
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
    std::string what_;
};

inline constexpr std::uint32_t kFormatVersion = 1;

// SubspaceFile ("TXSS"): version, d, k, layer_index, k*d f64 vector-major, JSON metadata.
Bytes encode_subspace(const ToxicSubspace& s);
ToxicSubspace decode_subspace(std::span<const std::uint8_t> bytes);
void save_subspace(const ToxicSubspace& s, const std::filesystem::path& path);
// When gradient_file is given, its SHA-256 must match the recorded gradient hash.
ToxicSubspace load_subspace(const std::filesystem::path& path,
                            const std::optional<std::filesystem::path>& gradient_file = std::nullopt);

// DenseMatrixFile ("TXMD"): version, rows, cols, row-major f64, JSON metadata.
struct DenseMatrixFile {
    linalg::Matrix matrix;
    nlohmann::json metadata = nlohmann::json::object();
};

Bytes encode_matrix(const DenseMatrixFile& m);
DenseMatrixFile decode_matrix(std::span<const std::uint8_t> bytes);
void save_matrix(const DenseMatrixFile& m, const std::filesystem::path& path);
DenseMatrixFile load_matrix(const std::filesystem::path& path);

// Gradient matrices travel as DenseMatrixFiles with provenance metadata and unit rows.
DenseMatrixFile to_matrix_file(const GradientMatrix& g);
GradientMatrix to_gradient_matrix(const DenseMatrixFile& f);
void save_gradient_matrix(const GradientMatrix& g, const std::filesystem::path& path);
GradientMatrix load_gradient_matrix(const std::filesystem::path& path);

} // namespace substeer::io
