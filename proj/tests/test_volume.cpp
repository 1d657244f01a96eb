#include <doctest.h>

#include <cstring>
#include <fstream>
#include <random>

#include "dectseg/metaimage.hpp"
#include "scratch_dir.hpp"

using namespace dectseg;
using dectseg::testing::ScratchDir;

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

void write_floats(const std::filesystem::path& p, const std::vector<float>& v) {
  std::ofstream f(p, std::ios::binary);
  for (float x : v) {
    unsigned char b[4];
    std::memcpy(b, &x, 4);  // host is little-endian in every supported build
    f.write(reinterpret_cast<const char*>(b), 4);
  }
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("grid construction enforces its invariants") {
  CHECK_THROWS_AS(Volume(Dims{2, 2, 2}, Spacing{}, std::vector<float>(7)), ShapeError);
  CHECK_THROWS_AS(Volume(Dims{0, 2, 2}, Spacing{}, 0.0f), ShapeError);
  CHECK_THROWS_AS(Volume(Dims{1, 1, 1}, Spacing{1, 0, 1}, 0.0f), DomainError);
  CHECK_THROWS_AS(Volume(Dims{1, 1, 1}, Spacing{}, std::vector<float>{NAN}), DomainError);
  CHECK_THROWS_AS(LabelVolume(Dims{1, 1, 1}, Spacing{}, std::vector<Organ>{Organ{5}}), DomainError);
  CHECK_NOTHROW(LabelVolume(Dims{1, 1, 1}, Spacing{}, std::vector<Organ>{Organ{4}}));

  const Volume v(Dims{3, 2, 2}, Spacing{}, std::vector<float>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  CHECK(v(1, 1, 0) == 4.0f);
  CHECK(v(2, 0, 1) == 8.0f);
}

TEST_CASE("dect pair requires co-registered images") {
  const Volume a(Dims{2, 2, 2}, Spacing{}, 0.0f);
  CHECK_THROWS_AS(DectPair(a, Volume(Dims{2, 2, 3}, Spacing{}, 0.0f)), ShapeError);
  CHECK_THROWS_AS(DectPair(a, Volume(Dims{2, 2, 2}, Spacing{1, 1, 0.5}, 0.0f)), ShapeError);
  CHECK_NOTHROW(DectPair(a, a, "case"));
}

TEST_CASE("volume stats") {
  const auto s = volume_stats(Volume(Dims{2, 3, 4}, Spacing{}, 5.0f));
  CHECK(s.min == 5.0);
  CHECK(s.max == 5.0);
  CHECK(s.mean == 5.0);
  CHECK(s.voxel_count == 24);

  const auto r = volume_stats(Volume(Dims{4, 1, 1}, Spacing{}, std::vector<float>{0, 1, 2, 3}));
  CHECK(r.min == 0.0);
  CHECK(r.max == 3.0);
  CHECK(r.mean == 1.5);
  CHECK(r.voxel_count == 4);
}

TEST_CASE("hand-written metaimage files") {
  ScratchDir dir("mhd");
  SUBCASE("zero volume") {
    write_text(dir / "z.mhd",
               "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\n"
               "ElementType = MET_FLOAT\nElementDataFile = z.raw\n");
    write_floats(dir / "z.raw", std::vector<float>(8, 0.0f));
    const Volume v = read_volume(dir / "z.mhd");
    CHECK(v.dims() == Dims{2, 2, 2});
    for (float x : v.values()) CHECK(x == 0.0f);
  }
  SUBCASE("single voxel with anisotropic spacing") {
    write_text(dir / "one.mhd",
               "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n"
               "DimSize = 1 1 1\nElementSpacing = 0.7 0.7 0.6\nElementType = MET_FLOAT\n"
               "ElementDataFile = one.raw\n");
    write_floats(dir / "one.raw", {100.0f});
    const Volume v = read_volume(dir / "one.mhd");
    CHECK(v.dims() == Dims{1, 1, 1});
    CHECK(v.spacing() == Spacing{0.7, 0.7, 0.6});
    CHECK(v[0] == 100.0f);
  }
  SUBCASE("malformed headers") {
    const std::string good_tail = "ElementType = MET_FLOAT\nElementDataFile = b.raw\n";
    write_floats(dir / "b.raw", std::vector<float>(8, 1.0f));
    write_text(dir / "missing.mhd", "NDims = 3\nElementSpacing = 1 1 1\n" + good_tail);
    CHECK_THROWS_AS(read_volume(dir / "missing.mhd"), FormatError);
    write_text(dir / "unknown.mhd", "NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nColour = red\n" + good_tail);
    CHECK_THROWS_AS(read_volume(dir / "unknown.mhd"), FormatError);
    write_text(dir / "count.mhd", "NDims = 3\nDimSize = 2 2 3\nElementSpacing = 1 1 1\n" + good_tail);
    CHECK_THROWS_AS(read_volume(dir / "count.mhd"), FormatError);
    write_text(dir / "type.mhd", "NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\n"
                                 "ElementType = MET_DOUBLE\nElementDataFile = b.raw\n");
    CHECK_THROWS_AS(read_volume(dir / "type.mhd"), FormatError);
    write_text(dir / "wrongkind.mhd", "NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\n" + good_tail);
    CHECK_THROWS_AS(read_labels(dir / "wrongkind.mhd"), FormatError);
  }
}

TEST_CASE("metaimage writer output") {
  ScratchDir dir("mhdw");
  write_metaimage(Volume(Dims{2, 2, 2}, Spacing{0.9, 0.9, 0.6}, 1.5f), dir / "v.mhd");
  CHECK(std::filesystem::file_size(dir / "v.raw") == 32);
  CHECK(slurp(dir / "v.mhd") ==
        "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementSpacing = 0.9 0.9 0.6\n"
        "ElementType = MET_FLOAT\nElementDataFile = v.raw\n");

  write_metaimage(LabelVolume(Dims{3, 3, 3}, Spacing{}, Organ::spleen), dir / "l.mhd");
  CHECK(std::filesystem::file_size(dir / "l.raw") == 27);
  CHECK(slurp(dir / "l.mhd").find("ElementType = MET_UCHAR\n") != std::string::npos);
}

TEST_CASE("metaimage round trips are bit exact") {
  ScratchDir dir("mhdrt");
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<float> hu(-1000.0f, 1000.0f);
  std::uniform_int_distribution<int> lab(0, 4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> v(64);
    for (float& x : v) x = hu(rng);
    v[0] = -0.0f;
    v[1] = 1e-40f;  // subnormal
    const Volume vol(Dims{4, 4, 4}, Spacing{0.6895, 0.959, 0.6}, v);
    write_metaimage(vol, dir / "v.mhd");
    const Volume back = read_volume(dir / "v.mhd");
    CHECK(back.dims() == vol.dims());
    CHECK(back.spacing() == vol.spacing());
    CHECK(std::memcmp(back.values().data(), vol.values().data(), 64 * sizeof(float)) == 0);

    std::vector<Organ> l(64);
    for (Organ& x : l) x = static_cast<Organ>(lab(rng));
    const LabelVolume labels(Dims{4, 4, 4}, Spacing{1, 2, 3}, l);
    write_metaimage(labels, dir / "l.mhd");
    CHECK(read_labels(dir / "l.mhd") == labels);

    std::vector<std::uint8_t> m(64);
    for (auto& x : m) x = static_cast<std::uint8_t>(lab(rng) % 2);
    const MaskVolume mask(Dims{4, 4, 4}, Spacing{}, m);
    write_metaimage(mask, dir / "m.mhd");
    CHECK(read_mask(dir / "m.mhd") == mask);
  }
}

TEST_CASE("organ names round trip") {
  for (Organ o : kOrgans) CHECK(organ_from_name(organ_name(o)) == o);
  CHECK(organ_name(Organ::right_kidney) == "r.kidney");
  CHECK_THROWS(organ_from_name("pancreas"));
}
