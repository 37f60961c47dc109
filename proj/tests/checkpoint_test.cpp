#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <vector>

#include "test_util.hpp"
#include "treeground/checkpoint.hpp"
#include "treeground/common.hpp"

using namespace tg;
using namespace tgtest;

namespace {

std::vector<uint8_t> slurp(const char* path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const char* path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ParamStore sample_store() {
    Rng rng(41);
    ParamStore ps;
    ps.add("enc.w1", rand_tensor({3, 4}, rng));
    ps.add("enc.b1", rand_tensor({4}, rng));
    ps.add("head.w", rand_tensor({2, 2, 2}, rng));
    return ps;
}

}  // namespace

TEST_CASE("save-load-save round trips byte-identically") {
    ParamStore ps = sample_store();
    save_checkpoint("ck_a.itgw", ps);
    ParamStore loaded;
    load_checkpoint("ck_a.itgw", loaded);
    REQUIRE(loaded.size() == ps.size());
    for (size_t i = 0; i < ps.size(); ++i) {
        CHECK(loaded.item(i).first == ps.item(i).first);
        CHECK(loaded.item(i).second.same_values(ps.item(i).second));
    }
    save_checkpoint("ck_b.itgw", loaded);
    CHECK(slurp("ck_a.itgw") == slurp("ck_b.itgw"));
    std::remove("ck_a.itgw");
    std::remove("ck_b.itgw");
}

TEST_CASE("header layout: magic, version, count") {
    ParamStore ps = sample_store();
    save_checkpoint("ck_hdr.itgw", ps);
    const auto bytes = slurp("ck_hdr.itgw");
    REQUIRE(bytes.size() > 10);
    CHECK(bytes[0] == 'I');
    CHECK(bytes[1] == 'T');
    CHECK(bytes[2] == 'G');
    CHECK(bytes[3] == 'W');
    CHECK(bytes[4] == 1);  // version u16 LE
    CHECK(bytes[5] == 0);
    CHECK(bytes[6] == 3);  // count u32 LE
    CHECK(bytes[7] == 0);
    std::remove("ck_hdr.itgw");
}

TEST_CASE("loading into a populated store enforces names and shapes") {
    ParamStore ps = sample_store();
    save_checkpoint("ck_m.itgw", ps);

    ParamStore renamed;
    Rng rng(42);
    renamed.add("enc.w1", rand_tensor({3, 4}, rng));
    renamed.add("enc.b1", rand_tensor({4}, rng));
    renamed.add("other.w", rand_tensor({2, 2, 2}, rng));
    CHECK_THROWS_AS(load_checkpoint("ck_m.itgw", renamed), DataError);

    ParamStore reshaped;
    reshaped.add("enc.w1", rand_tensor({4, 3}, rng));
    reshaped.add("enc.b1", rand_tensor({4}, rng));
    reshaped.add("head.w", rand_tensor({2, 2, 2}, rng));
    CHECK_THROWS_AS(load_checkpoint("ck_m.itgw", reshaped), DataError);

    ParamStore fewer;
    fewer.add("enc.w1", rand_tensor({3, 4}, rng));
    CHECK_THROWS_AS(load_checkpoint("ck_m.itgw", fewer), DataError);
    std::remove("ck_m.itgw");
}

TEST_CASE("bad magic is rejected naming the magic") {
    ParamStore ps = sample_store();
    save_checkpoint("ck_bad.itgw", ps);
    auto bytes = slurp("ck_bad.itgw");
    bytes[0] = 'X';
    spit("ck_bad.itgw", bytes);
    ParamStore out;
    try {
        load_checkpoint("ck_bad.itgw", out);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("XTGW") != std::string::npos);
        CHECK(msg.find("ITGW") != std::string::npos);
    }
    std::remove("ck_bad.itgw");
}

TEST_CASE("truncated files report the offset") {
    ParamStore ps = sample_store();
    save_checkpoint("ck_tr.itgw", ps);
    auto bytes = slurp("ck_tr.itgw");
    bytes.resize(bytes.size() - 9);
    spit("ck_tr.itgw", bytes);
    ParamStore out;
    try {
        load_checkpoint("ck_tr.itgw", out);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
    std::remove("ck_tr.itgw");
}

TEST_CASE("unsupported version is rejected") {
    ParamStore ps = sample_store();
    save_checkpoint("ck_v.itgw", ps);
    auto bytes = slurp("ck_v.itgw");
    bytes[4] = 9;
    spit("ck_v.itgw", bytes);
    ParamStore out;
    CHECK_THROWS_AS(load_checkpoint("ck_v.itgw", out), DataError);
    std::remove("ck_v.itgw");
}

TEST_CASE("trailing bytes are rejected") {
    ParamStore ps = sample_store();
    save_checkpoint("ck_t.itgw", ps);
    auto bytes = slurp("ck_t.itgw");
    bytes.push_back(0);
    spit("ck_t.itgw", bytes);
    ParamStore out;
    CHECK_THROWS_AS(load_checkpoint("ck_t.itgw", out), DataError);
    std::remove("ck_t.itgw");
}

TEST_CASE("param store rejects duplicates and unknown names") {
    ParamStore ps;
    ps.add("a", Tensor::scalar(1.0));
    CHECK_THROWS_AS(ps.add("a", Tensor::scalar(2.0)), DataError);
    CHECK_THROWS_AS(ps.get("b"), DataError);
    CHECK(ps.has("a"));
    CHECK_FALSE(ps.has("b"));
}
