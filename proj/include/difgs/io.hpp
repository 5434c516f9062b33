#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "difgs/baselines.hpp"
#include "difgs/dif_model.hpp"
#include "difgs/tto.hpp"

namespace difgs {

// ---------------------------------------------------------------------------
// Run configuration (flat key=value text with [sections])
// ---------------------------------------------------------------------------

struct GeometryConfig {
  std::size_t n_views = 6;
  double sid_mm = 1000;
  double sdd_mm = 1500;
  std::size_t det_nu = 128, det_nv = 128;
  double det_spacing_mm = 3;

  ScanGeometry build() const {
    return make_circular_geometry(n_views, sid_mm, sdd_mm, {det_nu, det_nv}, det_spacing_mm);
  }
  static GeometryConfig from(const ScanGeometry& g) {
    return {g.n_views, g.sid, g.sdd, g.det_shape.n_u, g.det_shape.n_v, g.det_spacing};
  }
};

struct RunConfig {
  GeometryConfig geometry;
  ModelConfig model;
  std::size_t drr_samples = kDrrSamples;
  TtoConfig tto;
  SartConfig sart;

  // model.k_views always follows geometry.n_views
  void sync() { model.k_views = geometry.n_views; }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename E>
std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw E("bad integer for " + key + ": '" + v + "'");
  return out;
}

template <typename E>
double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw E("bad number for " + key + ": '" + v + "'");
  return out;
}

template <typename E>
bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw E("bad boolean for " + key + ": '" + v + "'");
}

template <typename E>
std::vector<std::string> split(const std::string& key, const std::string& v, char sep, std::size_t n = 0) {
  std::vector<std::string> parts;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, sep)) parts.push_back(trim(item));
  if (n && parts.size() != n) throw E("expected " + std::to_string(n) + " values for " + key);
  return parts;
}

template <typename E>
std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& p : split<E>(key, v, ',')) out.push_back(parse_size<E>(key, p));
  return out;
}

}  // namespace detail

// Ordered (section.key, value) pairs for a configuration.
inline std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& rc) {
  using detail::fmt_double;
  const auto& g = rc.geometry;
  const auto& m = rc.model;
  const auto& t = m.training;
  return {
      {"geometry.n_views", std::to_string(g.n_views)},
      {"geometry.sid_mm", fmt_double(g.sid_mm)},
      {"geometry.sdd_mm", fmt_double(g.sdd_mm)},
      {"geometry.det_nu", std::to_string(g.det_nu)},
      {"geometry.det_nv", std::to_string(g.det_nv)},
      {"geometry.det_spacing_mm", fmt_double(g.det_spacing_mm)},
      {"volume.dims", detail::fmt_list({m.volume_dims[0], m.volume_dims[1], m.volume_dims[2]})},
      {"volume.spacing_mm", fmt_double(m.volume_spacing.x) + "," + fmt_double(m.volume_spacing.y) + "," +
                                fmt_double(m.volume_spacing.z)},
      {"model.c", std::to_string(m.c)},
      {"model.c_t", std::to_string(m.c_t)},
      {"model.c_g", std::to_string(m.c_g)},
      {"model.v", std::to_string(m.v)},
      {"model.k_nearest", std::to_string(m.k_nearest)},
      {"model.enable_gaussians", m.enable_gaussians ? "true" : "false"},
      {"model.encoder_widths", detail::fmt_list(m.encoder_widths)},
      {"model.decoder_stages", std::to_string(m.decoder_stages)},
      {"model.gaussian_hidden", std::to_string(m.gaussian_hidden)},
      {"model.atten_hidden", detail::fmt_list(m.atten_hidden)},
      {"training.epochs", std::to_string(t.epochs)},
      {"training.batch_size", std::to_string(t.batch_size)},
      {"training.points_per_sample", std::to_string(t.points_per_sample)},
      {"training.lr0", fmt_double(t.lr0)},
      {"training.momentum", fmt_double(t.momentum)},
      {"training.drr_samples", std::to_string(rc.drr_samples)},
      {"tto.steps", std::to_string(rc.tto.steps)},
      {"tto.lr", fmt_double(rc.tto.lr)},
      {"tto.momentum", fmt_double(rc.tto.momentum)},
      {"tto.rays_per_step", std::to_string(rc.tto.rays_per_step)},
      {"tto.n_r", std::to_string(rc.tto.n_r)},
      {"tto.clip_to_volume", rc.tto.clip_to_volume ? "true" : "false"},
      {"sart.iterations", std::to_string(rc.sart.iterations)},
      {"sart.relaxation", fmt_double(rc.sart.relaxation)},
      {"sart.n_r", std::to_string(rc.sart.n_r)},
  };
}

// Applies one section.key=value; E is the error type for malformed values.
template <typename E>
void apply_config_entry(RunConfig& rc, const std::string& key, const std::string& v) {
  using namespace detail;
  auto& g = rc.geometry;
  auto& m = rc.model;
  auto& t = m.training;
  if (key == "geometry.n_views") g.n_views = parse_size<E>(key, v);
  else if (key == "geometry.sid_mm") g.sid_mm = parse_double<E>(key, v);
  else if (key == "geometry.sdd_mm") g.sdd_mm = parse_double<E>(key, v);
  else if (key == "geometry.det_nu") g.det_nu = parse_size<E>(key, v);
  else if (key == "geometry.det_nv") g.det_nv = parse_size<E>(key, v);
  else if (key == "geometry.det_spacing_mm") g.det_spacing_mm = parse_double<E>(key, v);
  else if (key == "volume.dims") {
    const auto d = split<E>(key, v, ',', 3);
    for (int i = 0; i < 3; ++i) m.volume_dims[i] = parse_size<E>(key, d[i]);
  } else if (key == "volume.spacing_mm") {
    const auto d = split<E>(key, v, ',', 3);
    m.volume_spacing = {parse_double<E>(key, d[0]), parse_double<E>(key, d[1]), parse_double<E>(key, d[2])};
  } else if (key == "model.c") m.c = parse_size<E>(key, v);
  else if (key == "model.c_t") m.c_t = parse_size<E>(key, v);
  else if (key == "model.c_g") m.c_g = parse_size<E>(key, v);
  else if (key == "model.v") m.v = parse_size<E>(key, v);
  else if (key == "model.k_nearest") m.k_nearest = parse_size<E>(key, v);
  else if (key == "model.enable_gaussians") m.enable_gaussians = parse_bool<E>(key, v);
  else if (key == "model.encoder_widths") m.encoder_widths = parse_list<E>(key, v);
  else if (key == "model.decoder_stages") m.decoder_stages = parse_size<E>(key, v);
  else if (key == "model.gaussian_hidden") m.gaussian_hidden = parse_size<E>(key, v);
  else if (key == "model.atten_hidden") m.atten_hidden = parse_list<E>(key, v);
  else if (key == "training.epochs") t.epochs = parse_size<E>(key, v);
  else if (key == "training.batch_size") t.batch_size = parse_size<E>(key, v);
  else if (key == "training.points_per_sample") t.points_per_sample = parse_size<E>(key, v);
  else if (key == "training.lr0") t.lr0 = parse_double<E>(key, v);
  else if (key == "training.momentum") t.momentum = parse_double<E>(key, v);
  else if (key == "training.drr_samples") rc.drr_samples = parse_size<E>(key, v);
  else if (key == "tto.steps") rc.tto.steps = parse_size<E>(key, v);
  else if (key == "tto.lr") rc.tto.lr = parse_double<E>(key, v);
  else if (key == "tto.momentum") rc.tto.momentum = parse_double<E>(key, v);
  else if (key == "tto.rays_per_step") rc.tto.rays_per_step = parse_size<E>(key, v);
  else if (key == "tto.n_r") rc.tto.n_r = parse_size<E>(key, v);
  else if (key == "tto.clip_to_volume") rc.tto.clip_to_volume = parse_bool<E>(key, v);
  else if (key == "sart.iterations") rc.sart.iterations = parse_size<E>(key, v);
  else if (key == "sart.relaxation") rc.sart.relaxation = parse_double<E>(key, v);
  else if (key == "sart.n_r") rc.sart.n_r = parse_size<E>(key, v);
  else throw E("unknown config key '" + key + "'");
}

inline std::string config_to_text(const RunConfig& rc) {
  std::string out, section;
  for (const auto& [key, value] : config_entries(rc)) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += key.substr(dot + 1) + "=" + value + "\n";
  }
  return out;
}

// Keys may be written as "key" under a [section] header or fully dotted.
inline RunConfig parse_config(const std::string& text) {
  RunConfig rc;
  std::stringstream ss(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw InvalidParameter("config line " + std::to_string(lineno) + ": bad section");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidParameter("config line " + std::to_string(lineno) + ": expected key=value");
    std::string key = detail::trim(line.substr(0, eq));
    if (key.find('.') == std::string::npos) {
      if (section.empty()) throw InvalidParameter("config line " + std::to_string(lineno) + ": key outside a section");
      key = section + "." + key;
    }
    apply_config_entry<InvalidParameter>(rc, key, detail::trim(line.substr(eq + 1)));
  }
  rc.sync();
  rc.model.validate();
  rc.sart.validate();
  return rc;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline RunConfig load_config(const std::string& path) { return parse_config(read_text_file(path)); }

// ---------------------------------------------------------------------------
// Binary files: text header terminated by "end_header", f32le payload
// ---------------------------------------------------------------------------

inline constexpr const char* kVolumeMagic = "GSDIF-VOL v1";
inline constexpr const char* kProjMagic = "GSDIF-PROJ v1";
inline constexpr const char* kCheckpointMagic = "GSDIF-CKPT v1";

namespace detail {

inline constexpr std::size_t kMaxHeaderBytes = 1 << 20;

inline void write_f32le(std::ostream& out, std::span<const float> v) {
  std::vector<unsigned char> buf(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(v[i]);
    for (int b = 0; b < 4; ++b) buf[4 * i + b] = static_cast<unsigned char>(u >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void read_f32le(std::istream& in, std::span<float> v, const std::string& path) {
  std::vector<unsigned char> buf(v.size() * 4);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size())
    throw TruncatedPayload(path + ": payload has " + std::to_string(in.gcount()) + " bytes, header promises " +
                           std::to_string(buf.size()));
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(buf[4 * i + b]) << (8 * b);
    v[i] = std::bit_cast<float>(u);
  }
}

inline void expect_eof(std::istream& in, const std::string& path) {
  if (in.peek() != std::char_traits<char>::eof())
    throw ShapeInconsistency(path + ": trailing bytes after the payload");
}

struct Header {
  std::vector<std::pair<std::string, std::string>> entries;

  const std::string& get(const std::string& key, const std::string& path) const {
    for (const auto& [k, v] : entries)
      if (k == key) return v;
    throw ShapeInconsistency(path + ": header lacks '" + key + "'");
  }
};

inline Header read_header(std::istream& in, const std::string& magic, const std::string& path) {
  std::string line;
  if (!std::getline(in, line) || line != magic)
    throw BadMagic(path + ": expected magic '" + magic + "'");
  Header h;
  std::size_t total = line.size();
  while (std::getline(in, line)) {
    total += line.size() + 1;
    if (total > kMaxHeaderBytes) break;
    if (line == "end_header") return h;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ShapeInconsistency(path + ": malformed header line '" + line + "'");
    h.entries.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  throw TruncatedPayload(path + ": header is not terminated");
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return in;
}

inline void finish(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace detail

inline void save_volume(const VoxelVolume& vol, const std::string& path) {
  using detail::fmt_double;
  auto out = detail::open_out(path);
  out << kVolumeMagic << "\n"
      << "dims=" << vol.dims[0] << " " << vol.dims[1] << " " << vol.dims[2] << "\n"
      << "spacing_mm=" << fmt_double(vol.spacing.x) << " " << fmt_double(vol.spacing.y) << " "
      << fmt_double(vol.spacing.z) << "\n"
      << "origin_mm=" << fmt_double(vol.origin.x) << " " << fmt_double(vol.origin.y) << " "
      << fmt_double(vol.origin.z) << "\n"
      << "dtype=f32le\nend_header\n";
  detail::write_f32le(out, vol.data);
  detail::finish(out, path);
}

inline VoxelVolume load_volume(const std::string& path) {
  using E = ShapeInconsistency;
  auto in = detail::open_in(path);
  const auto h = detail::read_header(in, kVolumeMagic, path);
  if (h.get("dtype", path) != "f32le") throw E(path + ": unsupported dtype");
  const auto d = detail::split<E>("dims", h.get("dims", path), ' ', 3);
  const auto s = detail::split<E>("spacing_mm", h.get("spacing_mm", path), ' ', 3);
  const auto o = detail::split<E>("origin_mm", h.get("origin_mm", path), ' ', 3);
  Dims3 dims;
  for (int i = 0; i < 3; ++i) {
    dims[i] = detail::parse_size<E>("dims", d[i]);
    if (dims[i] == 0) throw E(path + ": zero dimension");
  }
  const Vec3 sp{detail::parse_double<E>("spacing_mm", s[0]), detail::parse_double<E>("spacing_mm", s[1]),
                detail::parse_double<E>("spacing_mm", s[2])};
  if (!(sp.x > 0 && sp.y > 0 && sp.z > 0)) throw E(path + ": spacing must be positive");
  VoxelVolume vol(dims, sp,
                  {detail::parse_double<E>("origin_mm", o[0]), detail::parse_double<E>("origin_mm", o[1]),
                   detail::parse_double<E>("origin_mm", o[2])});
  detail::read_f32le(in, vol.data, path);
  detail::expect_eof(in, path);
  return vol;
}

inline void save_projections(const ProjectionStack& proj, const std::string& path) {
  const auto& g = proj.geometry;
  using detail::fmt_double;
  auto out = detail::open_out(path);
  out << kProjMagic << "\n"
      << "n_views=" << g.n_views << "\n"
      << "det_nu=" << g.det_shape.n_u << "\n"
      << "det_nv=" << g.det_shape.n_v << "\n"
      << "det_spacing_mm=" << fmt_double(g.det_spacing) << "\n"
      << "sid_mm=" << fmt_double(g.sid) << "\n"
      << "sdd_mm=" << fmt_double(g.sdd) << "\n"
      << "dtype=f32le\nend_header\n";
  detail::write_f32le(out, proj.data);
  detail::finish(out, path);
}

inline ProjectionStack load_projections(const std::string& path) {
  using E = ShapeInconsistency;
  auto in = detail::open_in(path);
  const auto h = detail::read_header(in, kProjMagic, path);
  if (h.get("dtype", path) != "f32le") throw E(path + ": unsupported dtype");
  GeometryConfig gc;
  gc.n_views = detail::parse_size<E>("n_views", h.get("n_views", path));
  gc.det_nu = detail::parse_size<E>("det_nu", h.get("det_nu", path));
  gc.det_nv = detail::parse_size<E>("det_nv", h.get("det_nv", path));
  gc.det_spacing_mm = detail::parse_double<E>("det_spacing_mm", h.get("det_spacing_mm", path));
  gc.sid_mm = detail::parse_double<E>("sid_mm", h.get("sid_mm", path));
  gc.sdd_mm = detail::parse_double<E>("sdd_mm", h.get("sdd_mm", path));
  ScanGeometry g;
  try {
    g = gc.build();
  } catch (const InvalidParameter& e) {
    throw E(path + ": " + e.what());
  }
  ProjectionStack proj(std::move(g));
  detail::read_f32le(in, proj.data, path);
  detail::expect_eof(in, path);
  return proj;
}

struct Checkpoint {
  RunConfig config;
  std::unique_ptr<DifModel<float>> model;
};

inline void save_checkpoint(const RunConfig& rc, const DifModel<float>& model, const std::string& path) {
  auto out = detail::open_out(path);
  out << kCheckpointMagic << "\n";
  for (const auto& [k, v] : config_entries(rc)) out << k << "=" << v << "\n";
  out << "tensor_count=" << model.params.size() << "\n";
  for (std::size_t i = 0; i < model.params.size(); ++i)
    out << "tensor=" << model.params.name(i) << " " << nn::shape_str(model.params.at(i).shape) << "\n";
  out << "end_header\n";
  for (std::size_t i = 0; i < model.params.size(); ++i) detail::write_f32le(out, model.params.at(i).values);
  detail::finish(out, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  using E = ShapeInconsistency;
  auto in = detail::open_in(path);
  const auto h = detail::read_header(in, kCheckpointMagic, path);
  Checkpoint ck;
  std::vector<std::pair<std::string, std::string>> tensors;
  std::size_t count = 0;
  bool have_count = false;
  for (const auto& [k, v] : h.entries) {
    if (k == "tensor_count") {
      count = detail::parse_size<E>(k, v);
      have_count = true;
    } else if (k == "tensor") {
      const auto sp = v.find(' ');
      if (sp == std::string::npos) throw E(path + ": malformed tensor line '" + v + "'");
      tensors.emplace_back(v.substr(0, sp), v.substr(sp + 1));
    } else {
      apply_config_entry<E>(ck.config, k, v);
    }
  }
  ck.config.sync();
  if (!have_count || count != tensors.size()) throw E(path + ": tensor_count does not match tensor list");
  try {
    ck.model = std::make_unique<DifModel<float>>(ck.config.model);
  } catch (const InvalidParameter& e) {
    throw E(path + ": " + e.what());
  }
  auto& params = ck.model->params;
  if (tensors.size() != params.size())
    throw E(path + ": checkpoint has " + std::to_string(tensors.size()) + " tensors, model expects " +
            std::to_string(params.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].first != params.name(i) || tensors[i].second != nn::shape_str(params.at(i).shape))
      throw E(path + ": tensor " + tensors[i].first + " [" + tensors[i].second + "] does not match model tensor " +
              params.name(i) + " [" + nn::shape_str(params.at(i).shape) + "]");
  for (std::size_t i = 0; i < params.size(); ++i) detail::read_f32le(in, params.at(i).values, path);
  detail::expect_eof(in, path);
  return ck;
}

// Binary portable graymap, linear over [0,1].
inline void save_pgm(const std::vector<float>& img, std::size_t w, std::size_t h, const std::string& path) {
  require(img.size() == w * h, "save_pgm: image size mismatch");
  auto out = detail::open_out(path);
  out << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> bytes(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(static_cast<double>(img[i]), 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  detail::finish(out, path);
}

}  // namespace difgs
