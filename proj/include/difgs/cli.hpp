#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "difgs/io.hpp"

namespace difgs {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitDivergence = 4;

namespace cli_detail {

inline double half_extent(Dims3 dims, double spacing) {
  const std::size_t d = *std::min_element(dims.begin(), dims.end());
  return 0.5 * static_cast<double>(d - 1) * spacing;
}

inline RunConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    RunConfig rc;
    rc.sync();
    return rc;
  }
  return load_config(path);
}

inline void write_text(const std::string& path, const std::string& text) {
  if (path.empty()) return;
  auto out = detail::open_out(path);
  out << text;
  detail::finish(out, path);
}

inline std::vector<TrainSample> load_dataset(const std::string& dir, const RunConfig& rc) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir);
  std::vector<fs::path> vols;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".vol") vols.push_back(e.path());
  std::sort(vols.begin(), vols.end());
  if (vols.empty()) throw IoError("no .vol files in " + dir);
  const ScanGeometry geom = rc.geometry.build();
  std::vector<TrainSample> data;
  for (const auto& p : vols) {
    TrainSample s;
    s.volume = load_volume(p.string());
    if (s.volume.dims != rc.model.volume_dims)
      throw InvalidParameter(p.string() + ": volume dims differ from the configured volume.dims");
    auto proj_path = p;
    proj_path.replace_extension(".proj");
    s.projections = fs::exists(proj_path) ? load_projections(proj_path.string())
                                          : drr(s.volume, geom, rc.drr_samples);
    data.push_back(std::move(s));
  }
  return data;
}

}  // namespace cli_detail

// Entry point shared by the difgs tool and the tests. Returns the exit status.
inline int run_command(int argc, const char* const* argv, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  CLI::App app{"Sparse-view CBCT reconstruction with Gaussian feature fields"};
  app.require_subcommand(1);
  app.fallthrough();
  int workers = 1;
  app.add_option("--workers", workers, "worker threads (results do not depend on it)")->check(CLI::PositiveNumber);

  // phantom
  auto* ph = app.add_subcommand("phantom", "generate a phantom volume");
  std::string ph_out, ph_kind = "random";
  std::uint64_t ph_seed = 0;
  std::size_t ph_dims = 32;
  double ph_spacing = 6, ph_radius = 60, ph_value = 1;
  ph->add_option("--out", ph_out)->required();
  ph->add_option("--seed", ph_seed)->required();
  ph->add_option("--kind", ph_kind)->check(CLI::IsMember({"random", "shepp", "sphere"}));
  ph->add_option("--dims", ph_dims)->check(CLI::Range(8, 1024));
  ph->add_option("--spacing", ph_spacing)->check(CLI::PositiveNumber);
  ph->add_option("--radius", ph_radius, "sphere radius (mm)")->check(CLI::PositiveNumber);
  ph->add_option("--value", ph_value, "sphere attenuation");

  // project
  auto* pr = app.add_subcommand("project", "simulate cone-beam projections of a volume");
  std::string pr_vol, pr_out, pr_cfg;
  std::size_t pr_nr = 0;
  pr->add_option("--volume", pr_vol)->required();
  pr->add_option("--out", pr_out)->required();
  pr->add_option("--config", pr_cfg);
  pr->add_option("--nr", pr_nr, "samples per ray (default from config)");

  // train
  auto* tr = app.add_subcommand("train", "train a model on a directory of .vol (+ .proj) files");
  std::string tr_data, tr_out, tr_cfg, tr_log;
  std::uint64_t tr_seed = 0;
  tr->add_option("--data", tr_data)->required();
  tr->add_option("--out", tr_out)->required();
  tr->add_option("--seed", tr_seed)->required();
  tr->add_option("--config", tr_cfg);
  tr->add_option("--loss-log", tr_log);

  // reconstruct
  auto* rc_cmd = app.add_subcommand("reconstruct", "reconstruct a volume from projections");
  std::string rc_proj, rc_out, rc_ckpt, rc_method, rc_cfg;
  rc_cmd->add_option("--proj", rc_proj)->required();
  rc_cmd->add_option("--out", rc_out)->required();
  auto* ck_opt = rc_cmd->add_option("--checkpoint", rc_ckpt);
  auto* me_opt = rc_cmd->add_option("--method", rc_method)->check(CLI::IsMember({"sart", "fdk"}));
  ck_opt->excludes(me_opt);
  rc_cmd->add_option("--config", rc_cfg, "volume/SART settings for --method");

  // tto
  auto* tt = app.add_subcommand("tto", "test-time optimization of a checkpoint on one projection stack");
  std::string tt_ckpt, tt_proj, tt_out, tt_log;
  std::uint64_t tt_seed = 0;
  std::optional<std::size_t> tt_steps;
  std::optional<double> tt_lr;
  tt->add_option("--checkpoint", tt_ckpt)->required();
  tt->add_option("--proj", tt_proj)->required();
  tt->add_option("--out", tt_out)->required();
  tt->add_option("--seed", tt_seed)->required();
  tt->add_option("--loss-log", tt_log);
  tt->add_option("--steps", tt_steps);
  tt->add_option("--lr", tt_lr);

  // eval
  auto* ev = app.add_subcommand("eval", "PSNR/SSIM between two volumes");
  std::string ev_a, ev_b;
  ev->add_option("a", ev_a)->required();
  ev->add_option("b", ev_b)->required();

  // slice
  auto* sl = app.add_subcommand("slice", "export one slice as a binary PGM");
  std::string sl_vol, sl_out, sl_axis = "z";
  std::size_t sl_index = 0;
  sl->add_option("--volume", sl_vol)->required();
  sl->add_option("--out", sl_out)->required();
  sl->add_option("--axis", sl_axis)->check(CLI::IsMember({"x", "y", "z"}));
  sl->add_option("--index", sl_index)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    set_worker_count(workers);
    if (*ph) {
      PhantomSpec spec;
      const Dims3 dims{ph_dims, ph_dims, ph_dims};
      if (ph_kind == "sphere") {
        spec = sphere_phantom(ph_radius, ph_value);
      } else if (ph_kind == "shepp") {
        spec = shepp_logan_phantom(cli_detail::half_extent(dims, ph_spacing));
      } else {
        std::mt19937_64 rng(ph_seed);
        spec = random_phantom(rng, cli_detail::half_extent(dims, ph_spacing));
      }
      save_volume(generate_phantom(spec, dims, {ph_spacing, ph_spacing, ph_spacing}), ph_out);
    } else if (*pr) {
      const auto rc = cli_detail::config_or_default(pr_cfg);
      const auto vol = load_volume(pr_vol);
      save_projections(drr(vol, rc.geometry.build(), pr_nr ? pr_nr : rc.drr_samples), pr_out);
    } else if (*tr) {
      const auto rc = cli_detail::config_or_default(tr_cfg);
      const auto data = cli_detail::load_dataset(tr_data, rc);
      DifModel<float> model(rc.model, tr_seed);
      std::string log = "epoch,lr,mse\n";
      train(model, data, mix_seed(tr_seed, 1), [&](const EpochLog& e) {
        log += std::to_string(e.epoch) + "," + detail::fmt_double(e.lr) + "," + detail::fmt_double(e.mse) + "\n";
      });
      save_checkpoint(rc, model, tr_out);
      cli_detail::write_text(tr_log, log);
    } else if (*rc_cmd) {
      if (rc_ckpt.empty() == rc_method.empty())
        throw InvalidParameter("reconstruct: give exactly one of --checkpoint or --method");
      const auto proj = load_projections(rc_proj);
      if (!rc_ckpt.empty()) {
        const auto ck = load_checkpoint(rc_ckpt);
        save_volume(reconstruct(*ck.model, proj), rc_out);
      } else {
        const auto rc = cli_detail::config_or_default(rc_cfg);
        const auto& m = rc.model;
        save_volume(rc_method == "sart" ? sart_reconstruct(proj, m.volume_dims, m.volume_spacing, rc.sart)
                                        : fdk_reconstruct(proj, m.volume_dims, m.volume_spacing),
                    rc_out);
      }
    } else if (*tt) {
      auto ck = load_checkpoint(tt_ckpt);
      const auto proj = load_projections(tt_proj);
      TtoConfig cfg = ck.config.tto;
      if (tt_steps) cfg.steps = *tt_steps;
      if (tt_lr) cfg.lr = *tt_lr;
      const auto losses = tto_finetune(*ck.model, proj, cfg, tt_seed);
      save_checkpoint(ck.config, *ck.model, tt_out);
      std::string log = "step,loss\n";
      for (std::size_t i = 0; i < losses.size(); ++i)
        log += std::to_string(i) + "," + detail::fmt_double(losses[i]) + "\n";
      cli_detail::write_text(tt_log, log);
    } else if (*ev) {
      const auto a = load_volume(ev_a), b = load_volume(ev_b);
      char line[96];
      std::snprintf(line, sizeof line, "psnr_db=%.4f, ssim=%.4f", psnr(a, b), ssim(a, b));
      out << line << "\n";
    } else if (*sl) {
      const auto vol = load_volume(sl_vol);
      const int axis = sl_axis == "x" ? 0 : sl_axis == "y" ? 1 : 2;
      if (sl_index >= vol.dims[axis])
        throw InvalidParameter("slice: index " + std::to_string(sl_index) + " out of range for axis " + sl_axis);
      // image axes: the two remaining volume axes in x, y, z order
      const int a0 = axis == 0 ? 1 : 0, a1 = axis == 2 ? 1 : 2;
      const std::size_t w = vol.dims[a0], h = vol.dims[a1];
      std::vector<float> img(w * h);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
          std::size_t ijk[3];
          ijk[axis] = sl_index;
          ijk[a0] = c;
          ijk[a1] = r;
          img[r * w + c] = vol.at(ijk[0], ijk[1], ijk[2]);
        }
      save_pgm(img, w, h, sl_out);
    }
  } catch (const Divergence& e) {
    err << "error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const InvalidParameter& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeMismatch& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

inline int run_command(const std::vector<std::string>& args, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"difgs"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_command(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace difgs
