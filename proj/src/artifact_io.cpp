#include "substeer/artifact_io.hpp"

#include "substeer/error.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unistd.h>

namespace substeer {

nlohmann::json GradientProvenance::to_json() const {
    return {{"model_hash", model_hash},
            {"corpus_seed", corpus_seed},
            {"delta", delta},
            {"T", T},
            {"skipped_zero_norm", skipped_zero_norm}};
}

GradientProvenance GradientProvenance::from_json(const nlohmann::json& j) {
    GradientProvenance p;
    p.model_hash = j.value("model_hash", std::string{});
    p.corpus_seed = j.value("corpus_seed", std::uint64_t{0});
    p.delta = j.value("delta", 0.0);
    p.T = j.value("T", std::size_t{0});
    p.skipped_zero_norm = j.value("skipped_zero_norm", std::size_t{0});
    return p;
}

nlohmann::json SubspaceProvenance::to_json() const {
    return {{"model_hash", model_hash}, {"gradient_hash", gradient_hash}, {"created", created},
            {"delta", delta},           {"T", T},                         {"corpus_seed", corpus_seed},
            {"model_seed", model_seed}};
}

SubspaceProvenance SubspaceProvenance::from_json(const nlohmann::json& j) {
    SubspaceProvenance p;
    p.model_hash = j.value("model_hash", std::string{});
    p.gradient_hash = j.value("gradient_hash", std::string{});
    p.created = j.value("created", std::int64_t{0});
    p.delta = j.value("delta", 0.0);
    p.T = j.value("T", std::size_t{0});
    p.corpus_seed = j.value("corpus_seed", std::uint64_t{0});
    p.model_seed = j.value("model_seed", std::uint64_t{0});
    return p;
}

namespace io {

Bytes read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatErrorCode::io, "cannot open " + path.string());
    Bytes out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return out;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError(FormatErrorCode::io, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError(FormatErrorCode::io, "short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw InternalError("sha256 digest failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

void ByteWriter::magic(const char (&m)[5]) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(m[i]));
}

void ByteWriter::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

void ByteWriter::json_block(const nlohmann::json& j) {
    const std::string text = j.dump();
    u32(static_cast<std::uint32_t>(text.size()));
    out_.insert(out_.end(), text.begin(), text.end());
}

void ByteReader::need(std::size_t n, const char* field) {
    if (remaining() < n) {
        throw FormatError(FormatErrorCode::truncated, what_ + ": file ends inside " + field + " (needs " +
                                                          std::to_string(n) + " bytes, " +
                                                          std::to_string(remaining()) + " left)");
    }
}

void ByteReader::expect_magic(const char (&m)[5]) {
    need(4, "magic");
    for (int i = 0; i < 4; ++i) {
        if (in_[pos_ + i] != static_cast<std::uint8_t>(m[i])) {
            throw FormatError(FormatErrorCode::bad_magic, what_ + ": expected magic '" + std::string(m, 4) + "'");
        }
    }
    pos_ += 4;
}

std::uint32_t ByteReader::u32() {
    need(4, "header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

double ByteReader::f64() {
    need(8, "payload");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
}

nlohmann::json ByteReader::json_block() {
    need(4, "metadata length");
    const std::uint32_t len = u32();
    need(len, "metadata");
    const std::string text(in_.begin() + static_cast<long>(pos_), in_.begin() + static_cast<long>(pos_ + len));
    pos_ += len;
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorCode::metadata, what_ + ": " + e.what());
    }
}

Bytes encode_subspace(const ToxicSubspace& s) {
    s.basis.validate();
    ByteWriter w;
    w.magic("TXSS");
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(s.dim()));
    w.u32(static_cast<std::uint32_t>(s.k()));
    w.i32(s.layer_index);
    for (double x : s.basis.data()) w.f64(x);
    nlohmann::json meta = s.provenance.to_json();
    meta["k"] = s.k();
    w.json_block(meta);
    return w.take();
}

ToxicSubspace decode_subspace(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "subspace file");
    r.expect_magic("TXSS");
    const auto version = r.u32();
    if (version != kFormatVersion) {
        throw FormatError(FormatErrorCode::bad_version, "subspace file version " + std::to_string(version));
    }
    const std::size_t d = r.u32();
    const std::size_t k = r.u32();
    const int layer = r.i32();
    if (k == 0 || d == 0 || k > d) {
        throw FormatError(FormatErrorCode::invariant,
                          "subspace file: k=" + std::to_string(k) + ", d=" + std::to_string(d));
    }
    r.need(8 * k * d, "payload");
    std::vector<double> vectors(k * d);
    for (double& x : vectors) x = r.f64();
    const auto meta = r.json_block();
    if (r.remaining() != 0) throw FormatError(FormatErrorCode::invariant, "subspace file: trailing bytes");
    ToxicSubspace s;
    try {
        s.basis = linalg::SubspaceBasis(d, k, std::move(vectors));
    } catch (const DataError& e) {
        throw FormatError(FormatErrorCode::invariant, e.what());
    }
    s.layer_index = layer;
    s.provenance = SubspaceProvenance::from_json(meta);
    return s;
}

void save_subspace(const ToxicSubspace& s, const std::filesystem::path& path) {
    write_file_atomic(path, encode_subspace(s));
}

ToxicSubspace load_subspace(const std::filesystem::path& path, const std::optional<std::filesystem::path>& gradient_file) {
    auto s = decode_subspace(read_file(path));
    if (gradient_file) {
        const auto actual = sha256_file(*gradient_file);
        if (actual != s.provenance.gradient_hash) {
            throw FormatError(FormatErrorCode::metadata, "subspace " + path.string() +
                                                             " does not derive from gradient file " +
                                                             gradient_file->string());
        }
    }
    return s;
}

Bytes encode_matrix(const DenseMatrixFile& m) {
    if (m.matrix.rows() == 0 || m.matrix.cols() == 0) {
        throw FormatError(FormatErrorCode::empty_matrix, "refusing to save a " + std::to_string(m.matrix.rows()) +
                                                             "x" + std::to_string(m.matrix.cols()) + " matrix");
    }
    ByteWriter w;
    w.magic("TXMD");
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(m.matrix.rows()));
    w.u32(static_cast<std::uint32_t>(m.matrix.cols()));
    for (double x : m.matrix.data()) w.f64(x);
    w.json_block(m.metadata);
    return w.take();
}

DenseMatrixFile decode_matrix(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "matrix file");
    r.expect_magic("TXMD");
    const auto version = r.u32();
    if (version != kFormatVersion) {
        throw FormatError(FormatErrorCode::bad_version, "matrix file version " + std::to_string(version));
    }
    const std::size_t rows = r.u32();
    const std::size_t cols = r.u32();
    if (rows == 0 || cols == 0) {
        throw FormatError(FormatErrorCode::empty_matrix,
                          "matrix file declares " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    r.need(8 * rows * cols, "payload");
    std::vector<double> data(rows * cols);
    for (double& x : data) {
        x = r.f64();
        if (!std::isfinite(x)) throw FormatError(FormatErrorCode::invariant, "matrix file: non-finite entry");
    }
    DenseMatrixFile out;
    out.matrix = linalg::Matrix(rows, cols, std::move(data));
    out.metadata = r.json_block();
    if (r.remaining() != 0) throw FormatError(FormatErrorCode::invariant, "matrix file: trailing bytes");
    return out;
}

void save_matrix(const DenseMatrixFile& m, const std::filesystem::path& path) {
    write_file_atomic(path, encode_matrix(m));
}

DenseMatrixFile load_matrix(const std::filesystem::path& path) { return decode_matrix(read_file(path)); }

DenseMatrixFile to_matrix_file(const GradientMatrix& g) {
    DenseMatrixFile f;
    f.matrix = g.rows;
    f.metadata = g.provenance.to_json();
    f.metadata["kind"] = "gradient_matrix";
    return f;
}

GradientMatrix to_gradient_matrix(const DenseMatrixFile& f) {
    for (std::size_t i = 0; i < f.matrix.rows(); ++i) {
        // 1e-6 admits rows written in single precision by other tools
        if (std::abs(linalg::norm2(f.matrix.row(i)) - 1.0) > 1e-6) {
            throw FormatError(FormatErrorCode::invariant,
                              "gradient matrix row " + std::to_string(i) + " is not unit length");
        }
    }
    GradientMatrix g;
    g.rows = f.matrix;
    g.provenance = GradientProvenance::from_json(f.metadata);
    return g;
}

void save_gradient_matrix(const GradientMatrix& g, const std::filesystem::path& path) {
    save_matrix(to_matrix_file(g), path);
}

GradientMatrix load_gradient_matrix(const std::filesystem::path& path) {
    return to_gradient_matrix(load_matrix(path));
}

} // namespace io
} // namespace substeer
