// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>

#include "broadnas/bytes.hpp"
#include "broadnas/weight_store.hpp"
#include "doctest.h"

using namespace broadnas;

namespace {

WeightStore populated(std::uint64_t seed) {
    WeightStore s(seed);
    s.get_or_init("conv/b1.c1.normal/n2.a/s0/sep3/dw", Shape{4, 1, 3, 3}, {InitKind::KaimingNormal, 9, true});
    s.get_or_init("stem/bn/gamma", Shape{4}, {InitKind::Ones, 1, true});
    s.get_or_init("stem/bn/mean", Shape{4}, {InitKind::Zeros, 1, false});
    s.find("conv/b1.c1.normal/n2.a/s0/sep3/dw")->momentum.assign(36, 0.25);
    s.set_section("controller", std::string("\x01\x00\x02", 3));
    return s;
}

}  // namespace

TEST_CASE("initial values depend only on seed and key") {
    WeightStore a(7), b(7);
    const InitSpec init{InitKind::KaimingNormal, 18, true};
    const Tensor x1 = a.get_or_init("k1", Shape{3, 6}, init);
    a.get_or_init("k2", Shape{5}, init);
    b.get_or_init("k2", Shape{5}, init);
    const Tensor y1 = b.get_or_init("k1", Shape{3, 6}, init);
    CHECK(x1.data()[0] == y1.data()[0]);
    CHECK(a.digest() == b.digest());
    const Tensor z = WeightStore::initial_value(8, "k1", Shape{3, 6}, init);
    CHECK(z.data()[0] != x1.data()[0]);

    double ss = 0.0;
    const Tensor big = WeightStore::initial_value(1, "wide", Shape{200, 50}, {InitKind::KaimingNormal, 50, true});
    for (double v : big.data()) ss += v * v;
    CHECK(ss / 10000.0 == doctest::Approx(2.0 / 50.0).epsilon(0.05));
}

TEST_CASE("a second request returns the bound buffer") {
    WeightStore s(1);
    Tensor t = s.get_or_init("w", Shape{2, 2}, {InitKind::Zeros, 1, true});
    t.data_mut()[0] = 3.0;
    CHECK(s.get_or_init("w", Shape{2, 2}, {InitKind::Ones, 1, true}).data()[0] == 3.0);
    CHECK(t.requires_grad());
    try {
        s.get_or_init("w", Shape{4}, {InitKind::Zeros, 1, true});
        FAIL("expected Error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("'w'") != std::string::npos);
    }
}

TEST_CASE("clone owns its buffers") {
    WeightStore s = populated(3);
    WeightStore c = s.clone();
    CHECK(c.digest() == s.digest());
    c.find("stem/bn/gamma")->value.data_mut()[0] = -5.0;
    CHECK(s.find("stem/bn/gamma")->value.data()[0] == 1.0);
    CHECK(c.digest() != s.digest());
    CHECK(*c.section("controller") == *s.section("controller"));
}

TEST_CASE("key digests change only for touched keys") {
    WeightStore s = populated(4);
    const auto before = s.key_digests();
    s.find("stem/bn/mean")->value.data_mut()[1] = 0.5;
    const auto after = s.key_digests();
    for (const auto& [k, d] : before) CHECK((d != after.at(k)) == (k == "stem/bn/mean"));
}

TEST_CASE("checkpoint round trip preserves values, momentum, flags and sections") {
    const WeightStore s = populated(5);
    const std::string bytes = checkpoint_bytes(s);
    const WeightStore r = checkpoint_from_bytes(bytes);
    CHECK(r.seed() == 5);
    CHECK(r.digest() == s.digest());
    CHECK(checkpoint_bytes(r) == bytes);
    CHECK_FALSE(r.find("stem/bn/mean")->trainable);
    CHECK(r.find("stem/bn/gamma")->momentum.empty());
    CHECK(r.find("conv/b1.c1.normal/n2.a/s0/sep3/dw")->momentum.size() == 36);
    CHECK(*r.section("controller") == std::string("\x01\x00\x02", 3));
    CHECK(r.section("missing") == nullptr);

    const auto dir = std::filesystem::temp_directory_path() / "broadnas_test_weight_store";
    std::filesystem::create_directories(dir);
    save_checkpoint(s, dir / "a.ckpt");
    CHECK(load_checkpoint(dir / "a.ckpt").digest() == s.digest());
    std::filesystem::remove_all(dir);
}

TEST_CASE("damaged checkpoints are rejected") {
    const std::string bytes = checkpoint_bytes(populated(6));
    auto message = [](std::string_view b) {
        try {
            checkpoint_from_bytes(b);
        } catch (const CheckpointError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    std::string magic = bytes;
    magic[0] = 'X';
    CHECK(message(magic).find("bad magic") != std::string::npos);

    std::string version = bytes;
    version[8] = 9;
    CHECK(message(version).find("version 9") != std::string::npos);

    std::string flipped = bytes;
    flipped[bytes.size() - 20] ^= 0x40;
    CHECK(message(flipped).find("checksum") != std::string::npos);

    CHECK(message(std::string_view(bytes).substr(0, bytes.size() / 2)).find("truncated") != std::string::npos);
    CHECK(message(bytes + "x").find("trailing") != std::string::npos);

    CHECK_THROWS_AS(load_checkpoint("/nonexistent/broadnas.ckpt"), CheckpointError);
}

TEST_CASE("substreams are distinct and stable") {
    CHECK(substream_seed(1, "a") == substream_seed(1, "a"));
    CHECK(substream_seed(1, "a") != substream_seed(1, "b"));
    CHECK(substream_seed(1, "a", 0) != substream_seed(1, "a", 1));
    CHECK(substream_seed(1, "a") != substream_seed(2, "a"));
    CHECK(fnv1a("") == 1469598103934665603ull);
}
