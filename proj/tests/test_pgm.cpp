#include <gtest/gtest.h>

#include "microdiff/io/pgm.hpp"
#include "test_util.hpp"

using namespace microdiff;

TEST(Pgm, BinaryRoundTrip) {
  test::TempDir dir;
  Bitmap b(5, 3);
  for (std::size_t i = 0; i < b.values.size(); ++i) b.values[i] = static_cast<std::uint8_t>(i * 17);
  io::write_pgm(dir / "a.pgm", b);
  EXPECT_EQ(test::read_text(dir / "a.pgm").substr(0, 11), "P5\n5 3\n255\n");
  EXPECT_EQ(io::read_pgm(dir / "a.pgm"), b);
}

TEST(Pgm, AsciiWithCommentsAndMaxval) {
  test::TempDir dir;
  test::write_text(dir / "a.pgm", "P2\n# glyph\n2 2\n15\n0 15\n5 10\n");
  const auto b = io::read_pgm(dir / "a.pgm");
  EXPECT_EQ(b.width, 2);
  EXPECT_EQ(b.values, (std::vector<std::uint8_t>{0, 255, 85, 170}));
}

TEST(Pgm, RejectsOtherFormats) {
  test::TempDir dir;
  test::write_text(dir / "a.ppm", "P6\n1 1\n255\nabc");
  EXPECT_THROW(io::read_pgm(dir / "a.ppm"), FormatError);
  test::write_text(dir / "b.pgm", "P5\n4 4\n255\nab");
  EXPECT_THROW(io::read_pgm(dir / "b.pgm"), DataError);
}

TEST(Pgm, TileLayout) {
  std::vector<Bitmap> imgs{Bitmap(2, 2, 10), Bitmap(2, 2, 20), Bitmap(2, 2, 30)};
  const auto t = io::tile(imgs, 2);
  EXPECT_EQ(t.width, 5);
  EXPECT_EQ(t.height, 5);
  EXPECT_EQ(t.at(0, 0), 10);
  EXPECT_EQ(t.at(0, 2), 0);
  EXPECT_EQ(t.at(0, 3), 20);
  EXPECT_EQ(t.at(3, 0), 30);
  EXPECT_EQ(t.at(4, 4), 0);
}
