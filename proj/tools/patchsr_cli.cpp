// patchsr: train, infer, degrade, eval and gradcheck subcommands.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "patchsr/checkpoint.hpp"
#include "patchsr/config.hpp"
#include "patchsr/image_io.hpp"
#include "patchsr/metrics.hpp"

namespace fs = std::filesystem;
using namespace patchsr;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key = value configuration file");
  app->add_option("--seed", c.seed, "random seed (overrides the config)");
  app->add_option("--threads", c.threads, "worker threads; 1 is bit-reproducible")->check(CLI::PositiveNumber);
}

RunConfig load_config(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) rc.seed = *c.seed;
  rc.infer.threads = c.threads;
  rc.finalize();
  return rc;
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FormatError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".png" || ext == ".ppm" || ext == ".PNG" || ext == ".PPM")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read " + path.string());
  std::vector<std::string> out;
  for (std::string line; std::getline(is, line);) {
    line = trim(line);
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  Common common;
  std::string manifest;
  std::string out = "checkpoints";
  std::string log;
};

int run_train(const TrainArgs& a) {
  RunConfig rc = load_config(a.common);
  const fs::path base = fs::path(a.manifest).parent_path();
  Corpus corpus;
  for (const auto& r : read_manifest(a.manifest)) {
    const ImageBuffer hq = io::read_image(base / r.hq_path);
    const ImageBuffer lq = io::read_image(base / r.lq_path);
    auto& pool = r.stage == StageTag::texture ? corpus.texture : corpus.removal;
    pool.push_back(make_sample(rc.model, hq, lq, r.global_prompt, r.local_prompt));
  }
  fs::create_directories(a.out);
  std::ofstream log;
  JointTrainHooks hooks;
  if (!a.log.empty()) {
    log.open(a.log, std::ios::binary);
    if (!log) throw FormatError("cannot write " + a.log);
    hooks.log = &log;
  }
  const std::string snapshot = rc.to_text();
  const std::uint64_t seed = rc.seed;
  hooks.checkpoint = [&](int step, const ParamStore& p) {
    std::ostringstream name;
    name << "step_" << std::setw(6) << std::setfill('0') << step << ".dsr";
    save_checkpoint({p, snapshot, seed}, (fs::path(a.out) / name.str()).string());
  };
  ParamStore params = make_model(rc.model, seed);
  joint_train(params, corpus, rc.model, rc.train, seed, hooks);
  save_checkpoint({params, snapshot, seed}, (fs::path(a.out) / "final.dsr").string());
  std::cout << "trained " << rc.train.total_steps << " steps on " << corpus.texture.size() << " texture and "
            << corpus.removal.size() << " removal pairs; wrote " << (fs::path(a.out) / "final.dsr").string() << "\n";
  return 0;
}

// ------------------------------------------------------------------ infer

struct InferArgs {
  Common common;
  std::string checkpoint, input, output;
  std::optional<int> patch, overlap, steps;
  std::optional<double> t_start;
  std::string global_prompt = "a photo";
  std::string patch_prompts;
};

int run_infer(const InferArgs& a) {
  RunConfig rc = load_config(a.common);
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const ModelConfig mc = parse_run_config(ck.config, a.checkpoint + " (config snapshot)").model;
  check_against(ck.params, make_model(mc, 0), a.checkpoint);
  InferenceConfig ic = rc.infer;
  if (a.patch) ic.patch = *a.patch;
  if (a.overlap) ic.overlap = *a.overlap;
  if (a.steps) ic.steps = *a.steps;
  if (a.t_start) ic.t_start = *a.t_start;
  ic.seed = rc.seed;
  const std::vector<std::string> texts = a.patch_prompts.empty() ? std::vector<std::string>{} : read_lines(a.patch_prompts);
  const ImageBuffer lq = io::read_image(a.input);
  const DualBranchModel model(mc, ck.params);
  const ImageBuffer sr = super_resolve(lq, a.global_prompt, texts, ic, model, mc);
  io::write_image(a.output, sr);
  std::cout << a.input << " " << lq.height() << "x" << lq.width() << " -> " << a.output << " " << sr.height() << "x"
            << sr.width() << "\n";
  return 0;
}

// ------------------------------------------------------------------ degrade

struct DegradeArgs {
  Common common;
  std::string input, output, checkpoint;
  std::string global_prompt = "a photo";
};

int run_degrade(const DegradeArgs& a) {
  RunConfig rc = load_config(a.common);
  ModelConfig mc = rc.model;
  ParamStore params;
  if (a.checkpoint.empty()) {
    params = make_model(mc, rc.seed);
  } else {
    const Checkpoint ck = read_checkpoint(a.checkpoint);
    mc = parse_run_config(ck.config, a.checkpoint + " (config snapshot)").model;
    check_against(ck.params, make_model(mc, 0), a.checkpoint);
    params = ck.params;
  }
  const DualBranchModel eraser(mc, params);
  const fs::path out(a.output);
  fs::create_directories(out / "hq");
  fs::create_directories(out / "lq");
  std::vector<CorpusRecord> records;
  const auto images = list_images(a.input);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const std::uint64_t s = mix_seed(rc.seed, n);
    const CropResult crop = rfe_crop(io::read_image(images[n]), rc.crop, s);
    const std::string stem = images[n].stem().string();
    const std::string local =
        crop.scope == PromptScope::global
            ? a.global_prompt
            : a.global_prompt + " [crop " + std::to_string(crop.top) + "," + std::to_string(crop.left) + "]";
    const std::string hq = "hq/" + stem + ".png";
    io::write_image(out / hq, crop.patch);

    DegradeConfig dc = rc.degrade;
    dc.seed = s;
    const std::string lq_r = "lq/" + stem + "_removal.png";
    io::write_image(out / lq_r, realesrgan_lite(crop.patch, dc));
    records.push_back({hq, lq_r, StageTag::removal, a.global_prompt, local, s});

    I2iConfig ic = rc.i2i;
    ic.seed = s;
    const std::string lq_t = "lq/" + stem + "_texture.png";
    io::write_image(out / lq_t, i2i_degrade(crop.patch, ic, eraser, mc));
    records.push_back({hq, lq_t, StageTag::texture, a.global_prompt, local, s});
  }
  write_manifest((out / "manifest.jsonl").string(), records);
  std::cout << "wrote " << records.size() << " pairs to " << (out / "manifest.jsonl").string() << "\n";
  return 0;
}

// ------------------------------------------------------------------ eval

struct EvalArgs {
  std::string sr, gt;
};

int run_eval(const EvalArgs& a) {
  const auto srs = list_images(a.sr);
  if (srs.empty()) throw FormatError("no images in " + a.sr);
  double sum_p = 0.0, sum_s = 0.0;
  std::cout << std::left << std::setw(32) << "image" << std::right << std::setw(10) << "psnr" << std::setw(10) << "ssim"
            << "\n";
  std::cout << std::fixed << std::setprecision(4);
  for (const auto& p : srs) {
    const fs::path g = fs::path(a.gt) / p.filename();
    if (!fs::exists(g)) throw FormatError("no ground truth for " + p.filename().string() + " in " + a.gt);
    const ImageBuffer x = io::read_image(p), y = io::read_image(g);
    const double ps = psnr(x, y), ss = ssim(x, y);
    sum_p += ps;
    sum_s += ss;
    std::cout << std::left << std::setw(32) << p.filename().string() << std::right << std::setw(10) << ps
              << std::setw(10) << ss << "\n";
  }
  const double n = static_cast<double>(srs.size());
  std::cout << std::left << std::setw(32) << "mean" << std::right << std::setw(10) << sum_p / n << std::setw(10)
            << sum_s / n << "\n";
  return 0;
}

// ------------------------------------------------------------------ gradcheck

struct GradcheckArgs {
  Common common;
  int per_param = 2;
  double tolerance = 1e-3;
};

int run_gradcheck(const GradcheckArgs& a) {
  RunConfig rc = a.common.config.empty() ? RunConfig{} : load_run_config(a.common.config);
  if (a.common.config.empty()) rc.model = ModelConfig::smallest();
  if (a.common.seed) rc.seed = *a.common.seed;
  const ModelConfig& mc = rc.model;
  ParamStore params = make_model(mc, rc.seed);
  Rng rng(mix_seed(rc.seed, 0x6C));
  for (auto& [name, p] : params)
    if (p.group != ParamGroup::backbone)
      for (double& v : p.value.data) v += 0.05 * rng.normal();
  const int size = 4 * mc.codec_factor;
  ImageBuffer gt(size, size), lq(size, size);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    gt[i] = rng.uniform();
    lq[i] = std::clamp(gt[i] + 0.1 * rng.normal(), 0.0, 1.0);
  }
  GradcheckInput in{make_sample(mc, gt, lq, "global", "local"), 0.1, {}};
  in.eps = LatentGrid::normal(in.sample.z0.channels(), in.sample.z0.height(), in.sample.z0.width(), rng);
  bool ok = true;
  for (CheckedLoss l : {CheckedLoss::velocity, CheckedLoss::pixel, CheckedLoss::lora, CheckedLoss::discriminator}) {
    const GradcheckReport rep = gradcheck(params, mc, rc.train, in, l, a.per_param, rc.seed);
    const double frac = rep.fraction_below(a.tolerance);
    ok = ok && frac >= 0.99 && rep.worst() < 10 * a.tolerance;
    std::cout << std::left << std::setw(14) << to_string(l) << " entries " << std::setw(6) << rep.entries.size()
              << " below " << a.tolerance << ": " << std::fixed << std::setprecision(4) << frac << "  worst "
              << std::scientific << std::setprecision(3) << rep.worst() << std::defaultfloat << "\n";
  }
  std::cout << (ok ? "gradcheck ok" : "gradcheck FAILED") << "\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patch-wise dual-branch latent super-resolution (desk scale)"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "joint training from a corpus manifest");
  add_common(train, ta.common);
  train->add_option("--manifest", ta.manifest, "corpus manifest (JSON lines)")->required();
  train->add_option("--out", ta.out, "checkpoint directory");
  train->add_option("--log", ta.log, "training log (JSON lines)");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "super-resolve one image");
  add_common(infer, ia.common);
  infer->add_option("--checkpoint", ia.checkpoint, "trained checkpoint")->required();
  infer->add_option("--input", ia.input, "low-quality PNG or PPM")->required();
  infer->add_option("--output", ia.output, "output image path")->required();
  infer->add_option("--patch", ia.patch, "latent patch size");
  infer->add_option("--overlap", ia.overlap, "latent patch overlap");
  infer->add_option("--steps", ia.steps, "texture-generation steps");
  infer->add_option("--t-start", ia.t_start, "restart time");
  infer->add_option("--global-prompt", ia.global_prompt, "global text");
  infer->add_option("--patch-prompts", ia.patch_prompts, "file with one text per patch");

  DegradeArgs da;
  auto* degrade = app.add_subcommand("degrade", "synthesise stage-tagged training pairs");
  add_common(degrade, da.common);
  degrade->add_option("--input", da.input, "directory of HQ images")->required();
  degrade->add_option("--output", da.output, "output corpus directory")->required();
  degrade->add_option("--checkpoint", da.checkpoint, "model used as the i2i eraser (default: fresh model)");
  degrade->add_option("--global-prompt", da.global_prompt, "global text recorded for every pair");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "PSNR/SSIM of SR images against ground truth");
  eval->add_option("--sr", ea.sr, "directory of SR images")->required();
  eval->add_option("--gt", ea.gt, "directory of GT images with matching names")->required();

  GradcheckArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  add_common(grad, ga.common);
  grad->add_option("--per-param", ga.per_param, "sampled elements per parameter")->check(CLI::PositiveNumber);
  grad->add_option("--tolerance", ga.tolerance, "relative error tolerance");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return run_train(ta);
    if (*infer) return run_infer(ia);
    if (*degrade) return run_degrade(da);
    if (*eval) return run_eval(ea);
    if (*grad) return run_gradcheck(ga);
  } catch (const std::exception& e) {
    std::cerr << "patchsr: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
