#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "csr/store.hpp"

using namespace csr;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const char* name) {
    auto dir = fs::temp_directory_path() / "csr_store_tests";
    fs::create_directories(dir);
    return (dir / name).string();
}

std::vector<unsigned char> slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("checkpoint: empty record list writes 8-byte header plus count") {
    Checkpoint ck;
    const auto path = tmp_path("empty.csrk");
    write_checkpoint(path, ck);
    auto bytes = slurp(path);
    REQUIRE(bytes.size() >= 12);
    CHECK(bytes[0] == 'C');
    CHECK(bytes[1] == 'S');
    CHECK(bytes[2] == 'R');
    CHECK(bytes[3] == 'K');
    // version 1 little-endian
    CHECK(bytes[4] == 1);
    CHECK(bytes[5] == 0);
    Checkpoint back = read_checkpoint(path);
    CHECK(back.records.empty());
}

TEST_CASE("checkpoint: one 2x2 tensor carries exactly 16 data bytes") {
    Checkpoint ck;
    TensorRecord r;
    r.name = "t";
    r.dims = {2, 2};
    r.data = {1.0f, 2.0f, 3.0f, 4.0f};
    ck.records.push_back(r);
    const auto a = tmp_path("one.csrk");
    write_checkpoint(a, ck);
    Checkpoint empty;
    const auto b = tmp_path("none.csrk");
    write_checkpoint(b, empty);
    // identical containers except the record: header(name=1B string) + u32 name_len
    // + u32 ndim + 2*u32 dims + u8 flag + 16 data bytes
    const auto sa = slurp(a).size(), sb = slurp(b).size();
    CHECK(sa - sb == 4 + 1 + 4 + 8 + 1 + 16);
}

TEST_CASE("checkpoint: round trip is bit-exact") {
    Checkpoint ck;
    ck.stage = Stage::Control;
    ck.rng_seed = 0xdeadbeef12345678ULL;
    ck.format_version = 1;
    TensorRecord r1;
    r1.name = "alpha.w";
    r1.dims = {2, 3};
    r1.data = {0.1f, -0.0f, 3e-38f, 1e38f, -7.25f, 42.0f};
    r1.trainable = true;
    TensorRecord r2;
    r2.name = "beta.b";
    r2.dims = {1};
    r2.data = {-1.5f};
    ck.records = {r1, r2};
    ck.has_config = true;
    ck.config.alpha = 0.03;
    ck.config.T = 777;

    const auto path = tmp_path("rt.csrk");
    write_checkpoint(path, ck);
    Checkpoint back = read_checkpoint(path);
    CHECK(back.stage == ck.stage);
    CHECK(back.rng_seed == ck.rng_seed);
    REQUIRE(back.records.size() == 2);
    CHECK(back.records[0].name == "alpha.w");
    CHECK(back.records[0].dims == r1.dims);
    CHECK(back.records[0].trainable);
    for (size_t i = 0; i < r1.data.size(); ++i) {
        uint32_t ba, bb;
        std::memcpy(&ba, &back.records[0].data[i], 4);
        std::memcpy(&bb, &r1.data[i], 4);
        CHECK(ba == bb);
    }
    CHECK(back.has_config);
    CHECK(back.config.alpha == 0.03);
    CHECK(back.config.T == 777);

    // write the same checkpoint twice: files byte-identical
    const auto path2 = tmp_path("rt2.csrk");
    write_checkpoint(path2, ck);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("checkpoint: wrong magic names offset 0") {
    const auto path = tmp_path("bad.csrk");
    std::ofstream(path, std::ios::binary) << "NOPEjunkdata";
    CHECK_THROWS_WITH_AS(read_checkpoint(path), doctest::Contains("offset 0"), ParseError);
}

TEST_CASE("checkpoint: truncated payload reports expected bytes") {
    // 2x2 tensor declaring 16 bytes but only 12 present
    Checkpoint ck;
    TensorRecord r;
    r.name = "t";
    r.dims = {2, 2};
    r.data = {1, 2, 3, 4};
    ck.records.push_back(r);
    const auto path = tmp_path("trunc.csrk");
    write_checkpoint(path, ck);
    auto bytes = slurp(path);
    bytes.resize(bytes.size() - 4);
    std::ofstream os(tmp_path("trunc2.csrk"), std::ios::binary);
    os.write((const char*)bytes.data(), (std::streamsize)bytes.size());
    os.close();
    CHECK_THROWS_WITH_AS(read_checkpoint(tmp_path("trunc2.csrk")),
                         doctest::Contains("expected 16"), ParseError);
}

TEST_CASE("checkpoint: duplicate names rejected") {
    Checkpoint ck;
    TensorRecord r;
    r.name = "dup";
    r.dims = {1};
    r.data = {1.0f};
    ck.records = {r, r};
    CHECK_THROWS_AS(write_checkpoint(tmp_path("dup.csrk"), ck), ValidationError);
}

TEST_CASE("ppm: 1x1 white pixel and value mapping") {
    const auto path = tmp_path("white.ppm");
    {
        std::ofstream os(path, std::ios::binary);
        os << "P6\n1 1\n255\n";
        unsigned char px[3] = {255, 255, 255};
        os.write((const char*)px, 3);
    }
    ImageBuffer img = read_ppm(path);
    CHECK(img.height == 1);
    CHECK(img.width == 1);
    CHECK(img.at(0, 0, 0) == 1.0);
    CHECK(img.at(1, 0, 0) == 1.0);
    CHECK(img.at(2, 0, 0) == 1.0);
}

TEST_CASE("ppm: value 0.5 writes byte 128") {
    ImageBuffer img(1, 1);
    img.at(0, 0, 0) = img.at(1, 0, 0) = img.at(2, 0, 0) = 0.5;
    const auto path = tmp_path("half.ppm");
    write_ppm(path, img);
    auto bytes = slurp(path);
    CHECK(bytes[bytes.size() - 3] == 128);
}

TEST_CASE("ppm: round trip error bounded by quantization") {
    ImageBuffer img(4, 6);
    Rng rng(5);
    for (double& v : img.values) v = rng.uniform();
    const auto path = tmp_path("rt.ppm");
    write_ppm(path, img);
    ImageBuffer back = read_ppm(path);
    for (size_t i = 0; i < img.values.size(); ++i)
        CHECK(std::fabs(img.values[i] - back.values[i]) <= 1.0 / 510 + 1e-12);
}

TEST_CASE("ppm: rejects non-P6 and maxval != 255") {
    const auto p1 = tmp_path("p3.ppm");
    std::ofstream(p1, std::ios::binary) << "P3\n1 1\n255\n255 255 255\n";
    CHECK_THROWS_AS(read_ppm(p1), ParseError);
    const auto p2 = tmp_path("max.ppm");
    {
        std::ofstream os(p2, std::ios::binary);
        os << "P6\n1 1\n65535\n";
        unsigned char px[6] = {0};
        os.write((const char*)px, 6);
    }
    CHECK_THROWS_AS(read_ppm(p2), ParseError);
}

TEST_CASE("config: empty object yields paper defaults") {
    RunConfig cfg = parse_config("{}");
    CHECK(cfg.steps == 50);
    CHECK(cfg.alpha == 0.01);
    CHECK(cfg.beta == 0.01);
    CHECK(cfg.T == 1000);
    CHECK(cfg.lr == 5e-5);
    CHECK(cfg.lora_rank == 16);
}

TEST_CASE("config: single override keeps other defaults") {
    RunConfig cfg = parse_config("{\"alpha\": 0.03}");
    CHECK(cfg.alpha == 0.03);
    CHECK(cfg.beta == 0.01);
    CHECK(cfg.steps == 50);
}

TEST_CASE("config: validation errors name the key") {
    CHECK_THROWS_WITH_AS(parse_config("{\"steps\": -1}"), doctest::Contains("steps"),
                         ValidationError);
    CHECK_THROWS_WITH_AS(parse_config("{\"alpha\": -0.5}"), doctest::Contains("alpha"),
                         ValidationError);
    CHECK_THROWS_WITH_AS(parse_config("{\"bogus\": 1}"), doctest::Contains("bogus"),
                         ValidationError);
    CHECK_THROWS_WITH_AS(parse_config("{\"steps\": \"many\"}"), doctest::Contains("steps"),
                         ValidationError);
    CHECK_THROWS_AS(parse_config("not json"), ParseError);
    // nested form of a dotted key is accepted
    RunConfig cfg = parse_config("{\"degrade\": {\"blur_max\": 1.0}}");
    CHECK(cfg.degrade_blur_max == 1.0);
    CHECK_THROWS_AS(parse_config("{\"degrade\": {\"a\": {\"b\": 1}}}"), ValidationError);
}

TEST_CASE("config: parsing is total on fuzzed inputs") {
    Rng rng(17);
    const char* snippets[] = {"{", "}", "[1,2]", "{\"alpha\":", "null", "{\"T\": 0}",
                              "{\"scale\": 3}", "{\"vae_widths\": [1]}", "{\"lr\": 0}"};
    for (const char* s : snippets) {
        bool ok = false;
        try {
            parse_config(s);
            ok = true;
        } catch (const ValidationError&) {
            ok = true;
        } catch (const ParseError&) {
            ok = true;
        }
        CHECK(ok);
    }
    (void)rng;
}
