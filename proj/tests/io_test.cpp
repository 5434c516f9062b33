#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace difgs;
using namespace difgs::testing;
namespace fs = std::filesystem;

namespace {

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

std::string truncate_tail(const std::string& s, std::size_t n) { return s.substr(0, s.size() - n); }

std::string replace_once(std::string s, const std::string& from, const std::string& to) {
  const auto i = s.find(from);
  EXPECT_NE(i, std::string::npos) << from;
  if (i != std::string::npos) s.replace(i, from.size(), to);
  return s;
}

RunConfig tiny_run_config() {
  RunConfig rc;
  rc.geometry = GeometryConfig::from(tiny_geometry(3));
  rc.model = tiny_config(3);
  rc.sync();
  return rc;
}

class Formats : public ::testing::Test {
 protected:
  fs::path dir = temp_dir("io");
  void TearDown() override { fs::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_F(Formats, VolumeRoundTripIsBitExact) {
  auto v = random_volume({5, 4, 3}, {1.5, 2.25, 3}, 101);
  v.origin = {-1.0 / 3.0, 7.125, 1e-9};
  v.data[0] = -0.0f;
  v.data[1] = 1e-42f;  // subnormal
  v.data[2] = std::numeric_limits<float>::max();
  save_volume(v, path("a.vol"));
  const auto w = load_volume(path("a.vol"));
  EXPECT_EQ(w.dims, v.dims);
  EXPECT_EQ(w.spacing.y, v.spacing.y);
  EXPECT_EQ(w.origin.x, v.origin.x);
  EXPECT_EQ(w.origin.z, v.origin.z);
  EXPECT_EQ(0, std::memcmp(w.data.data(), v.data.data(), v.data.size() * 4));
  save_volume(w, path("b.vol"));
  EXPECT_EQ(file_bytes(dir / "a.vol"), file_bytes(dir / "b.vol"));
}

TEST_F(Formats, VolumePayloadIsLittleEndianFloat32) {
  auto v = VoxelVolume::centered({1, 1, 1}, {1, 1, 1});
  v.data[0] = 1.0f;
  save_volume(v, path("one.vol"));
  const auto bytes = file_bytes(dir / "one.vol");
  EXPECT_EQ(bytes.substr(0, 13), "GSDIF-VOL v1\n");
  EXPECT_EQ(bytes.substr(bytes.size() - 4), std::string("\x00\x00\x80\x3f", 4));
  EXPECT_NE(bytes.find("dims=1 1 1\n"), std::string::npos);
  EXPECT_NE(bytes.find("dtype=f32le\nend_header\n"), std::string::npos);
}

TEST_F(Formats, VolumeErrors) {
  const auto v = random_volume({4, 4, 4}, {1, 1, 1}, 102);
  save_volume(v, path("ok.vol"));
  const auto good = file_bytes(dir / "ok.vol");
  write_bytes(dir / "magic.vol", replace_once(good, "GSDIF-VOL v1", "GSDIF-VOL v2"));
  EXPECT_THROW(load_volume(path("magic.vol")), BadMagic);
  write_bytes(dir / "proj_as_vol.vol", replace_once(good, "GSDIF-VOL v1", "GSDIF-PROJ v1"));
  EXPECT_THROW(load_volume(path("proj_as_vol.vol")), BadMagic);
  write_bytes(dir / "short.vol", truncate_tail(good, 3));
  EXPECT_THROW(load_volume(path("short.vol")), TruncatedPayload);
  write_bytes(dir / "nohdr.vol", "GSDIF-VOL v1\ndims=4 4 4\n");
  EXPECT_THROW(load_volume(path("nohdr.vol")), TruncatedPayload);
  write_bytes(dir / "long.vol", good + "xxxx");
  EXPECT_THROW(load_volume(path("long.vol")), ShapeInconsistency);
  write_bytes(dir / "dims.vol", replace_once(good, "dims=4 4 4", "dims=4 4"));
  EXPECT_THROW(load_volume(path("dims.vol")), ShapeInconsistency);
  write_bytes(dir / "dims2.vol", replace_once(good, "dims=4 4 4", "dims=4 4 5"));
  EXPECT_THROW(load_volume(path("dims2.vol")), TruncatedPayload);
  write_bytes(dir / "dtype.vol", replace_once(good, "dtype=f32le", "dtype=f64le"));
  EXPECT_THROW(load_volume(path("dtype.vol")), ShapeInconsistency);
  write_bytes(dir / "zero.vol", replace_once(good, "dims=4 4 4", "dims=0 4 4"));
  EXPECT_THROW(load_volume(path("zero.vol")), ShapeInconsistency);
  EXPECT_THROW(load_volume(path("missing.vol")), IoError);
}

TEST_F(Formats, ProjectionRoundTripAndErrors) {
  const auto p = random_stack(make_circular_geometry(3, 987.5, 1499.25, {16, 8}, 2.5), 103);
  save_projections(p, path("a.proj"));
  const auto q = load_projections(path("a.proj"));
  EXPECT_EQ(q.geometry.n_views, 3u);
  EXPECT_EQ(q.geometry.sid, 987.5);
  EXPECT_EQ(q.geometry.det_shape.n_u, 16u);
  EXPECT_EQ(q.geometry.det_shape.n_v, 8u);
  EXPECT_EQ(q.data, p.data);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(q.geometry.poses[k].source_pos.x, p.geometry.poses[k].source_pos.x);
  save_projections(q, path("b.proj"));
  const auto good = file_bytes(dir / "a.proj");
  EXPECT_EQ(good, file_bytes(dir / "b.proj"));

  write_bytes(dir / "magic.proj", replace_once(good, "GSDIF-PROJ v1", "GSDIF-VOL v1"));
  EXPECT_THROW(load_projections(path("magic.proj")), BadMagic);
  write_bytes(dir / "short.proj", truncate_tail(good, 1));
  EXPECT_THROW(load_projections(path("short.proj")), TruncatedPayload);
  write_bytes(dir / "long.proj", good + std::string(4, '\0'));
  EXPECT_THROW(load_projections(path("long.proj")), ShapeInconsistency);
  write_bytes(dir / "geom.proj", replace_once(good, "sdd_mm=1499.25", "sdd_mm=10"));
  EXPECT_THROW(load_projections(path("geom.proj")), ShapeInconsistency);
  write_bytes(dir / "nokey.proj", replace_once(good, "n_views=3\n", ""));
  EXPECT_THROW(load_projections(path("nokey.proj")), ShapeInconsistency);
  write_bytes(dir / "bad.proj", replace_once(good, "det_nu=16", "det_nu=sixteen"));
  EXPECT_THROW(load_projections(path("bad.proj")), ShapeInconsistency);
}

TEST_F(Formats, CheckpointRoundTripAndErrors) {
  auto rc = tiny_run_config();
  rc.tto.steps = 7;
  rc.sart.relaxation = 0.25;
  DifModel<float> m(rc.model, 104);
  scramble(m, 105);
  save_checkpoint(rc, m, path("a.ckpt"));
  const auto ck = load_checkpoint(path("a.ckpt"));
  EXPECT_EQ(config_entries(ck.config), config_entries(rc));
  for (std::size_t i = 0; i < m.params.size(); ++i) EXPECT_EQ(ck.model->params.at(i).values, m.params.at(i).values);
  save_checkpoint(ck.config, *ck.model, path("b.ckpt"));
  const auto good = file_bytes(dir / "a.ckpt");
  EXPECT_EQ(good, file_bytes(dir / "b.ckpt"));

  write_bytes(dir / "magic.ckpt", "GSDIF-CKPT v0" + good.substr(13));
  EXPECT_THROW(load_checkpoint(path("magic.ckpt")), BadMagic);
  write_bytes(dir / "short.ckpt", truncate_tail(good, 4));
  EXPECT_THROW(load_checkpoint(path("short.ckpt")), TruncatedPayload);
  write_bytes(dir / "long.ckpt", good + "zz");
  EXPECT_THROW(load_checkpoint(path("long.ckpt")), ShapeInconsistency);
  write_bytes(dir / "shape.ckpt", replace_once(good, "tensor=enc.0.w [4,1,3,3]", "tensor=enc.0.w [4,1,3,4]"));
  EXPECT_THROW(load_checkpoint(path("shape.ckpt")), ShapeInconsistency);
  write_bytes(dir / "width.ckpt", replace_once(good, "model.c_g=3", "model.c_g=5"));
  EXPECT_THROW(load_checkpoint(path("width.ckpt")), ShapeInconsistency);
  write_bytes(dir / "count.ckpt", replace_once(good, "tensor_count=", "tensor_count=1"));
  EXPECT_THROW(load_checkpoint(path("count.ckpt")), ShapeInconsistency);
}

TEST(Config, ParsesSectionsDottedKeysAndComments) {
  const auto rc = parse_config(
      "# run\n[geometry]\nn_views = 4\nsid_mm=900\n\n[model]\nv=3\nencoder_widths=8,16\nc_t=16\n"
      "decoder_stages=1\nenable_gaussians=false\n[training]\nlr0=0.2\n[tto]\nclip_to_volume=0\n"
      "[volume]\ndims=16,16,8\n");
  EXPECT_EQ(rc.geometry.n_views, 4u);
  EXPECT_EQ(rc.model.k_views, 4u);
  EXPECT_EQ(rc.geometry.sid_mm, 900);
  EXPECT_EQ(rc.model.v, 3u);
  EXPECT_EQ(rc.model.encoder_widths, (std::vector<std::size_t>{8, 16}));
  EXPECT_FALSE(rc.model.enable_gaussians);
  EXPECT_EQ(rc.model.training.lr0, 0.2);
  EXPECT_FALSE(rc.tto.clip_to_volume);
  EXPECT_EQ(rc.model.volume_dims, (Dims3{16, 16, 8}));
  EXPECT_EQ(parse_config("training.epochs=3\n").model.training.epochs, 3u);
}

TEST(Config, TextRoundTrip) {
  auto rc = tiny_run_config();
  rc.model.training.lr0 = 0.123456789012345;
  rc.tto.lr = 3e-7;
  EXPECT_EQ(config_entries(parse_config(config_to_text(rc))), config_entries(rc));
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("[model]\nnope=1\n"), InvalidParameter);
  EXPECT_THROW(parse_config("[model]\nv=abc\n"), InvalidParameter);
  EXPECT_THROW(parse_config("[model]\nv\n"), InvalidParameter);
  EXPECT_THROW(parse_config("[model\n"), InvalidParameter);
  EXPECT_THROW(parse_config("v=3\n"), InvalidParameter);
  EXPECT_THROW(parse_config("[volume]\ndims=1,2\n"), InvalidParameter);
  EXPECT_THROW(load_config("/nonexistent/run.cfg"), IoError);
}

TEST(Pgm, HeaderAndScaling) {
  const auto dir = temp_dir("pgm");
  save_pgm({0.0f, 0.5f, 1.0f, 2.0f, -1.0f, 0.25f}, 3, 2, (dir / "a.pgm").string());
  const auto b = file_bytes(dir / "a.pgm");
  EXPECT_EQ(b.substr(0, 11), "P5\n3 2\n255\n");
  const std::string px = b.substr(11);
  ASSERT_EQ(px.size(), 6u);
  EXPECT_EQ(static_cast<unsigned char>(px[0]), 0);
  EXPECT_EQ(static_cast<unsigned char>(px[1]), 128);
  EXPECT_EQ(static_cast<unsigned char>(px[2]), 255);
  EXPECT_EQ(static_cast<unsigned char>(px[3]), 255);
  EXPECT_EQ(static_cast<unsigned char>(px[4]), 0);
  EXPECT_EQ(static_cast<unsigned char>(px[5]), 64);
  fs::remove_all(dir);
}
