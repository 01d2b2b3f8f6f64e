#include "doctest.h"

#include "substeer/artifact_io.hpp"
#include "substeer/error.hpp"
#include "test_support.hpp"

#include <cstring>
#include <random>

using namespace substeer;
using namespace substeer::io;

namespace {

ToxicSubspace random_subspace(std::size_t d, std::size_t k, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ToxicSubspace s;
    s.basis = testing_support::random_basis(d, k, rng);
    s.layer_index = kHeadLayer;
    s.provenance.model_hash = std::string(64, 'a');
    s.provenance.gradient_hash = std::string(64, 'b');
    s.provenance.created = 1700000000;
    s.provenance.delta = 0.1;
    s.provenance.T = 20;
    s.provenance.corpus_seed = 1234;
    s.provenance.model_seed = 7;
    return s;
}

FormatErrorCode decode_error(const Bytes& b, bool subspace) {
    try {
        if (subspace) {
            decode_subspace(b);
        } else {
            decode_matrix(b);
        }
    } catch (const FormatError& e) {
        return e.code;
    }
    FAIL("decoder accepted a bad file");
    return FormatErrorCode::io;
}

std::uint32_t read_u32(const Bytes& b, std::size_t at) {
    return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
           static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

} // namespace

TEST_CASE("subspace file layout is little-endian and fixed-offset") {
    const auto s = random_subspace(64, 8, 1);
    const auto b = encode_subspace(s);
    CHECK(std::memcmp(b.data(), "TXSS", 4) == 0);
    CHECK(read_u32(b, 4) == 1);
    CHECK(read_u32(b, 8) == 64);
    CHECK(read_u32(b, 12) == 8);
    CHECK(read_u32(b, 16) == 0xffffffffu);
    const std::size_t payload = 8 * 8 * 64;
    CHECK(payload == 4096);
    const std::size_t meta_len = read_u32(b, 20 + payload);
    CHECK(b.size() == 20 + payload + 4 + meta_len);
    double first = 0.0;
    std::memcpy(&first, b.data() + 20, 8);
    CHECK(first == s.basis.vector(0)[0]);
    const auto meta = nlohmann::json::parse(std::string(b.begin() + 24 + payload, b.end()));
    CHECK(meta.at("k") == 8);
    CHECK(meta.at("model_hash") == s.provenance.model_hash);
}

TEST_CASE("subspace round-trip is field- and byte-equal") {
    const auto dir = testing_support::scratch_dir("subspace_rt");
    for (std::size_t k : {1u, 3u, 8u}) {
        auto s = random_subspace(16, k, 10 + k);
        s.layer_index = static_cast<int>(k) - 2;
        save_subspace(s, dir / "s.txss");
        const auto back = load_subspace(dir / "s.txss");
        CHECK(back == s);
        CHECK(encode_subspace(back) == read_file(dir / "s.txss"));
    }
}

TEST_CASE("subspace decoding errors are named") {
    const auto good = encode_subspace(random_subspace(8, 2, 3));

    auto bad = good;
    bad[0] = 'X';
    CHECK(decode_error(bad, true) == FormatErrorCode::bad_magic);

    bad = good;
    bad[4] = 2;
    CHECK(decode_error(bad, true) == FormatErrorCode::bad_version);

    for (std::size_t cut : {std::size_t{2}, std::size_t{10}, std::size_t{20 + 8 * 8}, good.size() - 1}) {
        Bytes t(good.begin(), good.begin() + static_cast<long>(cut));
        CHECK(decode_error(t, true) == FormatErrorCode::truncated);
    }

    bad = good;
    bad[12] = 9;  // k > d
    CHECK(decode_error(bad, true) == FormatErrorCode::invariant);

    bad = good;
    double x = 0.0;
    std::memcpy(&x, bad.data() + 20, 8);
    x *= 1.5;
    std::memcpy(bad.data() + 20, &x, 8);
    CHECK(decode_error(bad, true) == FormatErrorCode::invariant);

    bad = good;
    bad.push_back(0);
    CHECK(decode_error(bad, true) == FormatErrorCode::invariant);

    bad = good;
    bad[good.size() - 2] = '{';
    CHECK(decode_error(bad, true) == FormatErrorCode::metadata);

    CHECK_THROWS_AS(load_subspace("/nonexistent/dir/s.txss"), FormatError);
}

TEST_CASE("subspace load cross-checks the gradient hash") {
    const auto dir = testing_support::scratch_dir("subspace_hash");
    std::mt19937_64 rng(4);
    DenseMatrixFile g;
    g.matrix = testing_support::random_matrix(5, 8, rng);
    save_matrix(g, dir / "g.txmd");
    auto s = random_subspace(8, 2, 5);
    s.provenance.gradient_hash = sha256_file(dir / "g.txmd");
    save_subspace(s, dir / "s.txss");
    CHECK_NOTHROW(load_subspace(dir / "s.txss", dir / "g.txmd"));
    g.matrix(0, 0) += 1.0;
    save_matrix(g, dir / "g.txmd");
    CHECK_THROWS_AS(load_subspace(dir / "s.txss", dir / "g.txmd"), FormatError);
}

TEST_CASE("sha256 known answers") {
    CHECK(sha256_hex({}) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    const std::string abc = "abc";
    CHECK(sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(abc.data()), abc.size())) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("matrix round-trip 100x64") {
    const auto dir = testing_support::scratch_dir("matrix_rt");
    std::mt19937_64 rng(100);
    DenseMatrixFile m;
    m.matrix = testing_support::random_matrix(100, 64, rng);
    m.metadata = {{"kind", "hidden_states"}, {"note", "x"}};
    save_matrix(m, dir / "m.txmd");
    const auto bytes = read_file(dir / "m.txmd");
    CHECK(bytes.size() == 16 + 8 * 100 * 64 + 4 + m.metadata.dump().size());
    const auto back = load_matrix(dir / "m.txmd");
    CHECK(back.matrix == m.matrix);
    CHECK(back.metadata == m.metadata);
    CHECK(encode_matrix(back) == bytes);
}

TEST_CASE("matrix errors") {
    DenseMatrixFile empty;
    empty.matrix = linalg::Matrix(0, 64);
    try {
        encode_matrix(empty);
        FAIL("empty matrix accepted");
    } catch (const FormatError& e) {
        CHECK(e.code == FormatErrorCode::empty_matrix);
    }

    std::mt19937_64 rng(5);
    DenseMatrixFile m;
    m.matrix = testing_support::random_matrix(3, 4, rng);
    const auto good = encode_matrix(m);
    Bytes t(good.begin(), good.begin() + 40);
    CHECK(decode_error(t, false) == FormatErrorCode::truncated);
    auto bad = good;
    bad[3] = 'S';
    CHECK(decode_error(bad, false) == FormatErrorCode::bad_magic);
    bad = good;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::memcpy(bad.data() + 16, &nan, 8);
    CHECK(decode_error(bad, false) == FormatErrorCode::invariant);
    bad = good;
    bad[8] = 0;
    bad[9] = 0;
    CHECK(decode_error(bad, false) == FormatErrorCode::empty_matrix);
}

TEST_CASE("gradient matrix files require unit rows") {
    const auto dir = testing_support::scratch_dir("gradmat");
    GradientMatrix g;
    g.rows = linalg::Matrix(2, 3, {0.6, 0.8, 0.0, 0.0, 0.0, 1.0});
    g.provenance.model_hash = "abc";
    g.provenance.delta = 0.1;
    g.provenance.T = 20;
    save_gradient_matrix(g, dir / "g.txmd");
    const auto back = load_gradient_matrix(dir / "g.txmd");
    CHECK(back.rows == g.rows);
    CHECK(back.provenance == g.provenance);

    DenseMatrixFile raw;
    raw.matrix = linalg::Matrix(1, 2, {1.0, 1.0});
    save_matrix(raw, dir / "bad.txmd");
    CHECK_THROWS_AS(load_gradient_matrix(dir / "bad.txmd"), FormatError);

    // single-precision rows written by other tools are accepted
    raw.matrix = linalg::Matrix(1, 2, {static_cast<float>(0.6), static_cast<float>(0.8)});
    save_matrix(raw, dir / "f32.txmd");
    CHECK_NOTHROW(load_gradient_matrix(dir / "f32.txmd"));
}

TEST_CASE("atomic writes leave no temp files") {
    const auto dir = testing_support::scratch_dir("atomic");
    write_text_atomic(dir / "a" / "b.txt", "hello");
    write_text_atomic(dir / "a" / "b.txt", "world");
    std::size_t n = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir / "a")) {
        (void)e;
        ++n;
    }
    CHECK(n == 1);
    const auto b = read_file(dir / "a" / "b.txt");
    CHECK(std::string(b.begin(), b.end()) == "world");
}
