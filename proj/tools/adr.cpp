// Command-line front end: synth, train, enhance, decompose, eval, gradcheck.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "adr/adr.hpp"
#include "adr/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace adr;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

void warn(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

struct SynthArgs {
  std::string spec, out;
  std::size_t n = 64, size = 64, test = 0;
  std::uint64_t seed = 0;
  bool truth = false;
};

int cmd_synth(const SynthArgs& a, bool seed_given, bool test_given) {
  SceneSpec spec;
  if (!a.spec.empty()) spec = scene_spec_from_json(read_json(a.spec));
  if (seed_given) spec.seed = a.seed;
  const std::size_t n_test = test_given ? a.test : a.n / 5;
  const auto ds = make_dataset(a.n, spec, a.size, n_test);
  const auto hash = write_dataset(ds, a.out, a.truth);
  std::printf("wrote %zu train / %zu test pairs to %s (manifest %s)\n", ds.train.size(), ds.test.size(),
              a.out.c_str(), hex64(hash).c_str());
  return kOk;
}

int cmd_train(const std::string& config_path, bool quiet) {
  const Config cfg = load_config(config_path);
  auto data = load_training_pairs(cfg, warn);
  Trainer trainer(cfg, std::move(data));
  std::printf("training %zu steps (%zu epochs x %zu batches), %zu parameters\n", trainer.total_steps(), cfg.epochs,
              trainer.batches_per_epoch(), trainer.model().parameters().element_count());
  trainer.run([&](const StepRecord& r) {
    if (!quiet) {
      std::printf("step %5zu  epoch %3zu  total %.6f  l1 %.5f  ssim %.5f  perc %.5f  dehaze %.5f  retinex %.5f\n",
                  r.step, r.epoch, r.total, r.l1, r.ssim, r.perc, r.dehaze, r.retinex);
      std::fflush(stdout);
    }
  });
  if (!cfg.checkpoint.empty()) std::printf("checkpoint: %s\n", cfg.checkpoint.c_str());
  return kOk;
}

int cmd_enhance(const std::string& ckpt, const std::string& in, const std::string& out, bool dump, bool strict) {
  const auto model = load_model(Checkpoint::load(ckpt));
  auto img = load_image(in);
  const std::size_t h = img.dim(1), w = img.dim(2);
  if (h % 8 != 0 || w % 8 != 0) {
    if (strict) {
      throw DataError(in + ": size " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by 8");
    }
    const std::size_t nh = std::max<std::size_t>(8, (h + 4) / 8 * 8), nw = std::max<std::size_t>(8, (w + 4) / 8 * 8);
    warn(in + ": resized from " + std::to_string(h) + "x" + std::to_string(w) + " to " + std::to_string(nh) + "x" +
         std::to_string(nw));
    img = resize_bilinear(img, nh, nw);
  }
  const auto result = run_model(model, img);
  if (!first_non_finite(result).empty()) throw NumericError("non-finite output in " + first_non_finite(result));
  fs::create_directories(out);
  if (dump) {
    dump_intermediates(result, out);
  } else {
    const auto& J = result.J_enhanced;
    save_image(Tensor<float>(Shape{3, J.dim(2), J.dim(3)}, J.values()), fs::path(out) / "enhanced.ppm");
  }
  std::printf("wrote %s\n", (fs::path(out) / "enhanced.ppm").c_str());
  return kOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& csv, bool with_phi) {
  const auto ck = Checkpoint::load(ckpt);
  const Config cfg = checkpoint_config(ck);
  const auto model = load_model(ck);
  const auto data = load_pairs(data_dir, cfg.image_size, cfg.strict, warn);
  std::unique_ptr<PhiNetwork<double>> phi;
  if (with_phi) phi = std::make_unique<PhiNetwork<double>>();
  const auto base = evaluate([](const Tensor<float>& x) { return x; }, data, phi.get());
  const auto rep = evaluate([&](const Tensor<float>& x) { return enhance_image(model, x); }, data, phi.get());
  base.write_table(std::cout, "input");
  std::ostringstream row;
  rep.write_table(row, "enhanced");
  std::string s = row.str();
  std::cout << s.substr(s.find('\n') + 1);
  std::printf("%zu images%s\n", rep.count(), with_phi ? "; *phi-dist is not comparable to LPIPS" : "");
  if (!csv.empty()) {
    std::ofstream f(csv);
    if (!f) throw DataError("cannot write " + csv);
    rep.write_csv(f);
  }
  return kOk;
}

int cmd_gradcheck(bool inject_fault, std::size_t size) {
  GradSuiteOptions o;
  o.inject_fault = inject_fault;
  o.composite_size = size;
  o.on_result = [](const ComponentCheck& c) {
    std::printf("%-34s max rel err %.3e  tol %.0e  %5zu probes  %6.2fs  %s\n", c.name.c_str(), c.max_rel_error,
                c.tolerance, c.probes, c.seconds, c.passed ? "PASS" : "FAIL");
    std::fflush(stdout);
  };
  const auto results = run_grad_suite(o);
  int failed = 0;
  for (const auto& r : results) {
    if (!r.passed) {
      std::fprintf(stderr, "gradcheck failed: %s (%.3e >= %.0e)\n", r.name.c_str(), r.max_rel_error, r.tolerance);
      ++failed;
    }
  }
  std::printf("%zu components, %d failed\n", results.size(), failed);
  return failed ? kNumeric : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ADR underwater image enhancement"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic paired dataset");
  synth->add_option("--spec", sa.spec, "Scene spec JSON")->check(CLI::ExistingFile);
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--n", sa.n, "Number of pairs")->check(CLI::PositiveNumber);
  synth->add_option("--size", sa.size, "Image side length (multiple of 8)");
  auto* seed_opt = synth->add_option("--seed", sa.seed, "Seed (overrides the spec)");
  auto* test_opt = synth->add_option("--test", sa.test, "Held-out pairs (default n/5)");
  synth->add_flag("--truth", sa.truth, "Also write truth/ field dumps");

  std::string config_path;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "Train from a config file");
  train->add_option("--config", config_path, "Config JSON")->required()->check(CLI::ExistingFile);
  train->add_flag("--quiet", quiet, "Do not print per-step losses");

  std::string ckpt, in, out;
  bool dump = false, strict = false;
  auto* enhance = app.add_subcommand("enhance", "Enhance one image");
  enhance->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  enhance->add_option("--in", in, "Input PPM")->required()->check(CLI::ExistingFile);
  enhance->add_option("--out", out, "Output directory")->required();
  enhance->add_flag("--dump-intermediates", dump, "Write the intermediate panels");
  enhance->add_flag("--strict", strict, "Fail instead of resizing");

  auto* decompose = app.add_subcommand("decompose", "Same as enhance --dump-intermediates");
  decompose->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  decompose->add_option("--in", in, "Input PPM")->required()->check(CLI::ExistingFile);
  decompose->add_option("--out", out, "Output directory")->required();
  decompose->add_flag("--strict", strict, "Fail instead of resizing");

  std::string data_dir, csv;
  bool phi = false;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on paired data");
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir, "Directory of NAME_input.ppm / NAME_gt.ppm")->required();
  eval->add_option("--csv", csv, "Per-image CSV output");
  eval->add_flag("--phi", phi, "Add the phi-distance column");

  bool inject = false;
  std::size_t gc_size = 8;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_flag("--inject-fault", inject, "Include a deliberately wrong gradient");
  gradcheck->add_option("--size", gc_size, "Composite input size");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(sa, seed_opt->count() > 0, test_opt->count() > 0);
    if (*train) return cmd_train(config_path, quiet);
    if (*enhance) return cmd_enhance(ckpt, in, out, dump, strict);
    if (*decompose) return cmd_enhance(ckpt, in, out, true, strict);
    if (*eval) return cmd_eval(ckpt, data_dir, csv, phi);
    if (*gradcheck) return cmd_gradcheck(inject, gc_size);
  } catch (const NumericError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
