#include <doctest.h>

#include <filesystem>

#include "periloom/nn.hpp"
#include "periloom/tensor_io.hpp"

using namespace periloom;
using namespace periloom::tensor_io;

namespace {

Container sample() {
    Container c;
    c.meta["kind"] = "test";
    c.provenance["config_hash"] = "abc";
    const std::vector<float> a = {1.5f, -2.0f, 3.25f, 0.0f, 7.0f, 8.0f};
    const std::vector<double> b = {0.1, 0.2};
    c.add<float>("a", {2, 3}, a);
    c.add<double>("b", {2}, b);
    return c;
}

}  // namespace

TEST_CASE("serialize / deserialize is an identity and byte-stable") {
    const auto c = sample();
    const auto bytes = c.serialize();
    CHECK(bytes.substr(0, 4) == "PLTC");
    const auto back = Container::deserialize(bytes);
    CHECK(back.serialize() == bytes);
    CHECK(back.meta["kind"] == "test");
    CHECK(back.provenance["config_hash"] == "abc");
    CHECK(back.get<float>("a", {2, 3}) == std::vector<float>{1.5f, -2.0f, 3.25f, 0.0f, 7.0f, 8.0f});
    CHECK(back.get<double>("a")[2] == 3.25);
    CHECK(back.get<double>("b") == std::vector<double>{0.1, 0.2});
}

TEST_CASE("corruption is reported with distinct errors") {
    const auto bytes = sample().serialize();
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(Container::deserialize(bad_magic), FormatError);

    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(Container::deserialize(bad_version), VersionError);

    CHECK_THROWS_AS(Container::deserialize(bytes.substr(0, bytes.size() - 5)), TruncatedError);
    CHECK_THROWS_AS(Container::deserialize(bytes + "x"), FormatError);
    CHECK_THROWS_AS(sample().get<float>("a", {3, 2}), ShapeError);
    CHECK_THROWS_AS(sample().get<float>("zz"), ShapeError);
}

TEST_CASE("param sets round-trip through a file") {
    nn::ParamSet<float> p;
    p.add("w", {2, 2}, true);
    p.add("b", {2}, false);
    for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] = static_cast<float>(i) * 0.5f;
    Container c;
    p.write(c, "m.");
    const auto path = std::filesystem::temp_directory_path() / "periloom_test.pltc";
    c.save(path);
    auto q = p.zeros_like();
    q.read(Container::load(path), "m.");
    CHECK(q.data == p.data);
    std::filesystem::remove(path);
}

TEST_CASE("adam with decay shrinks only decayed tensors on a zero gradient") {
    nn::ParamSet<double> p;
    p.add("w", {2}, true);
    p.add("b", {2}, false);
    std::fill(p.data.begin(), p.data.end(), 1.0);
    auto g = p.zeros_like();
    nn::Adam<double> opt(p, {});
    opt.step(p, g, 0.1);
    CHECK(p.data[0] == doctest::Approx(1.0 - 0.1 * 0.01));
    CHECK(p.data[2] == 1.0);
}
