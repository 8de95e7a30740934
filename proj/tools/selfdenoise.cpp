// selfdenoise: corpus synthesis, training, denoising, evaluation and
// gradient-flow diagnostics.
//
// Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical abort.

#include <CLI11.hpp>

#include <Eigen/Core>
#ifdef _OPENMP
#include <omp.h>
#endif

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "selfdenoise/config.hpp"
#include "selfdenoise/corpus_io.hpp"
#include "selfdenoise/inference.hpp"
#include "selfdenoise/io.hpp"
#include "selfdenoise/kernel_memory.hpp"
#include "selfdenoise/metrics.hpp"
#include "selfdenoise/training.hpp"

using namespace selfdenoise;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;
constexpr std::size_t kTheoryParameterLimit = 5000;

void apply_thread_cap() {
  const char* env = std::getenv("SELFDENOISE_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError(std::string("SELFDENOISE_THREADS must be a positive integer, got '") + env + "'");
  Eigen::setNbThreads(static_cast<int>(n));
#ifdef _OPENMP
  omp_set_num_threads(static_cast<int>(n));
#endif
}

/// Flags that map one-to-one onto config keys, applied after --config and
/// before --set.
struct ConfigFlags {
  struct Binding {
    std::string key;
    std::unique_ptr<std::string> slot;  // null for fixed-value toggles
    std::string fixed;
    CLI::Option* option = nullptr;
  };
  std::string config_file;
  std::vector<std::string> assignments;
  std::vector<Binding> bindings;

  void common(CLI::App* app) {
    app->add_option("--config", config_file, "key = value config file (e.g. a previous run's config.txt)")
        ->check(CLI::ExistingFile);
    app->add_option("--set", assignments, "override any config key, e.g. --set train.lr=0.002");
  }

  void bind(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    Binding b{key, std::make_unique<std::string>(), {}, nullptr};
    b.option = app->add_option(flag, *b.slot, help + " [" + key + "]");
    bindings.push_back(std::move(b));
  }

  void toggle(CLI::App* app, const std::string& flag, const std::string& key, const std::string& value,
              const std::string& help) {
    const std::string text = help + " [" + key + " = " + value + "]";
    bindings.push_back({key, nullptr, value, app->add_flag(flag, text)});
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_file.empty()) cfg.merge_file(config_file);
    for (const auto& b : bindings)
      if (b.option->count() > 0) cfg.set(b.key, b.slot ? *b.slot : b.fixed);
    for (const auto& a : assignments) cfg.set_assignment(a);
    return cfg;
  }
};

fs::path output_dir(const RunConfig& cfg) {
  const auto& d = cfg.str("output.dir");
  if (d.empty()) throw UsageError("no output directory (--out or output.dir)");
  return d;
}

void prepare_output_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
}

// ---------------------------------------------------------------------------

int cmd_synth(const RunConfig& cfg, bool force) {
  const auto out = output_dir(cfg);
  const auto noise = cfg.noise();
  const auto seed = cfg.integer("data.seed");
  Corpus<float> corpus;
  try {
    const auto kind = parse_image_kind(cfg.str("data.kind"));
    corpus = build_corpus<float>(kind, cfg.count("data.count"), cfg.count("data.size"), noise, seed, cfg.style());
  } catch (const DimensionError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  KeyValues manifest{{"seed", std::to_string(seed)},
                     {"noise.low", cfg.str("noise.low")},
                     {"noise.high", cfg.str("noise.high")},
                     {"noise.seed", cfg.str("noise.seed")}};
  write_corpus(out, corpus, manifest, force);
  cfg.write(out / kResolvedConfigName);
  std::cout << "wrote " << corpus.noisy.size() << " image pairs to " << out.string() << " (SNR "
            << read_key_values(out / "manifest").at("snr_db") << " dB)\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  const auto out = output_dir(cfg);
  const auto& corpus_dir = cfg.str("data.corpus");
  if (corpus_dir.empty()) throw UsageError("no corpus (--corpus or data.corpus)");
  const auto model_cfg = cfg.model();
  auto train_cfg = cfg.train();
  try {
    model_cfg.validate();
    train_cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  auto corpus = read_corpus(corpus_dir);
  PatchDataset<float> data = corpus.noisy;
  const auto& shape = data.patch_shape();
  if (shape[0] != model_cfg.input_channels)
    throw DataError("corpus images have " + std::to_string(shape[0]) + " channel(s), model.channels is " +
                    std::to_string(model_cfg.input_channels));
  if (const auto patches = cfg.count("train.patches"); patches > 0) {
    data = sample_patches<float>(corpus.noisy.patches, model_cfg.input_size, patches, false, train_cfg.seed);
  } else if (shape[1] != model_cfg.input_size) {
    throw DataError("corpus images are " + std::to_string(shape[1]) + "x" + std::to_string(shape[2]) +
                    " but model.input_size is " + std::to_string(model_cfg.input_size) +
                    "; set train.patches to train on crops");
  }

  prepare_output_dir(out);
  cfg.write(out / kResolvedConfigName);
  auto model = AutoencoderModel<float>::build(model_cfg, cfg.integer("model.seed"));
  const auto report = train(model, data, train_cfg);
  save_checkpoint(out / "model.ckpt", model);
  std::ofstream csv(out / "report.csv");
  report.write_csv(csv);
  if (!csv) throw DataError("cannot write " + (out / "report.csv").string());
  std::cout << "trained " << report.epochs.size() << " epoch(s) on " << data.size() << " patches";
  if (!report.epochs.empty()) std::cout << ", final mean L1 " << report.epochs.back().mean_l1;
  std::cout << "\n";
  return 0;
}

int cmd_denoise(const RunConfig& cfg) {
  const auto out = output_dir(cfg);
  const auto& ckpt = cfg.str("denoise.checkpoint");
  if (ckpt.empty()) throw UsageError("no checkpoint (--checkpoint or denoise.checkpoint)");
  std::vector<std::string> inputs;
  std::istringstream list(cfg.str("denoise.inputs"));
  for (std::string item; std::getline(list, item, ',');)
    if (!trim(item).empty()) inputs.push_back(trim(item));
  if (inputs.empty()) throw UsageError("no input images");
  auto model = load_checkpoint<float>(ckpt);
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      auto more = list_images(in);
      files.insert(files.end(), more.begin(), more.end());
    } else if (fs::exists(in)) {
      files.emplace_back(in);
    } else {
      throw DataError(in + ": no such file or directory");
    }
  }
  std::map<std::string, fs::path> seen;
  for (const auto& f : files)
    if (auto [it, fresh] = seen.emplace(f.filename().string(), f); !fresh)
      throw DataError("two inputs share the name " + f.filename().string() + ": " + it->second.string() + ", " +
                      f.string());

  prepare_output_dir(out);
  cfg.write(out / kResolvedConfigName);
  const bool tile = cfg.flag("denoise.tile");
  for (const auto& f : files) write_image(out / f.filename(), denoise_image(model, read_image(f), tile));
  std::cout << "denoised " << files.size() << " image(s) into " << out.string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  const auto out = output_dir(cfg);
  const fs::path den_dir = cfg.str("eval.denoised"), clean_dir = cfg.str("eval.clean");
  if (den_dir.empty() || clean_dir.empty()) throw UsageError("eval needs --denoised and --clean");
  std::map<std::string, fs::path> den, clean;
  for (const auto& p : list_images(den_dir)) den[p.filename().string()] = p;
  for (const auto& p : list_images(clean_dir)) clean[p.filename().string()] = p;
  std::string only_den, only_clean;
  for (const auto& [n, p] : den)
    if (!clean.contains(n)) only_den += " " + n;
  for (const auto& [n, p] : clean)
    if (!den.contains(n)) only_clean += " " + n;
  if (!only_den.empty() || !only_clean.empty())
    throw DataError("unmatched files; only in " + den_dir.string() + ":" + (only_den.empty() ? " none" : only_den) +
                    "; only in " + clean_dir.string() + ":" + (only_clean.empty() ? " none" : only_clean));
  if (den.empty()) throw DataError(den_dir.string() + ": no images");

  prepare_output_dir(out);
  cfg.write(out / kResolvedConfigName);
  std::ofstream csv(out / "metrics.csv");
  csv.precision(9);
  csv << "file,ssim,psnr,snr,hf_energy\n";
  MetricReport mean;
  for (const auto& [name, path] : den) {
    const auto a = read_image(path);
    const auto b = read_image(clean.at(name));
    if (a.shape() != b.shape())
      throw DataError(name + ": denoised " + shape_str(a.shape()) + " vs clean " + shape_str(b.shape()));
    const auto r = evaluate(a, b);
    csv << name << ',' << r.ssim << ',' << r.psnr << ',' << r.snr << ',' << r.hf_energy << '\n';
    mean.ssim += r.ssim;
    mean.psnr += r.psnr;
    mean.snr += r.snr;
    mean.hf_energy += r.hf_energy;
  }
  const double n = static_cast<double>(den.size());
  csv << "mean," << mean.ssim / n << ',' << mean.psnr / n << ',' << mean.snr / n << ',' << mean.hf_energy / n << '\n';
  if (!csv) throw DataError("cannot write " + (out / "metrics.csv").string());
  std::cout << "mean SSIM " << mean.ssim / n << " over " << den.size() << " image(s)\n";
  return 0;
}

int cmd_theory(const RunConfig& cfg) {
  const auto out = output_dir(cfg);
  const auto& which = cfg.str("theory.model");
  if (which != "linear" && which != "autoencoder")
    throw UsageError("theory.model: expected linear or autoencoder, got '" + which + "'");
  const auto model_cfg = cfg.model();
  const auto samples = cfg.count("theory.samples");
  const double step = cfg.number("theory.step");
  const auto steps = cfg.count("theory.steps");
  if (samples == 0) throw UsageError("theory.samples must be positive");
  if (!(step > 0)) throw UsageError("theory.step must be positive");
  if (which == "autoencoder") try {
      model_cfg.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }

  const std::size_t S = model_cfg.input_size, C = model_cfg.input_channels;
  if (C != 1) throw UsageError("theory runs on single-channel glyphs; set model.channels = 1");
  auto corpus = build_corpus<double>(parse_image_kind(cfg.str("data.kind")), samples + 1, S, cfg.noise(),
                                     cfg.integer("data.seed"), cfg.style());
  std::vector<Tensor<double>> xs;
  for (const auto& p : corpus.noisy.patches) xs.push_back(p.reshaped({1, C, S, S}));
  const Tensor<double> query = xs.back();
  xs.pop_back();
  std::vector<Tensor<double>> train_items;
  for (std::size_t i = 0; i < samples; ++i) train_items.push_back(corpus.noisy.patches[i]);
  const Tensor<double> data = stack<double>(train_items);
  std::vector<Tensor<double>> probes{xs.front(), query};

  std::optional<AutoencoderModel<double>> ae;
  std::optional<LinearModel<double>> lin;
  FlowSubject<double> subject;
  KernelProbe<double> probe;
  std::size_t params = 0;
  if (which == "linear") {
    lin.emplace(C, S, cfg.integer("model.seed"));
    subject = lin->subject();
    probe = KernelProbe<double>::center_mean(1, 1, 1);
    params = lin->theta().value.size();
  } else {
    ae.emplace(AutoencoderModel<double>::build(model_cfg, cfg.integer("model.seed")));
    subject = autoencoder_subject(*ae);
    probe = KernelProbe<double>::center_mean(C, S, std::max<std::size_t>(1, S / 4));
    params = ae->parameter_count();
  }
  if (params > kTheoryParameterLimit)
    throw UsageError("theory traces one kernel per step and sample, which is only affordable for tiny models; this "
                     "model has " + std::to_string(params) + " parameters, the limit is " +
                     std::to_string(kTheoryParameterLimit) +
                     " (try --size 16 --stages 2 --base-width 2 --bottleneck-channels 2)");

  prepare_output_dir(out);
  cfg.write(out / kResolvedConfigName);
  FlowTrace<double> trace;
  try {
    trace = gradient_flow<double>(subject, data, step, static_cast<double>(steps) * step, probes, probe);
  } catch (const FlowDiverged<double>&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  std::ofstream csv(out / "flow.csv");
  trace.write_csv(csv);
  const double r_train = verify_query_decomposition(trace, subject, probes[0], probe);
  const double r_query = verify_query_decomposition(trace, subject, probes[1], probe);
  std::ostringstream a, b;
  a.precision(9);
  b.precision(9);
  a << r_train;
  b << r_query;
  write_key_values(out / "summary", {{"model", which},
                                     {"parameters", std::to_string(params)},
                                     {"steps", std::to_string(steps)},
                                     {"step", cfg.str("theory.step")},
                                     {"residual_train_probe", a.str()},
                                     {"residual_query", b.str()}});
  std::cout << "parameters " << params << "\nresidual_train_probe " << a.str() << "\nresidual_query " << b.str()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised compressive autoencoder denoising"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a paired noisy/clean corpus");
  ConfigFlags synth_flags;
  bool force = false;
  synth_flags.common(synth);
  synth_flags.bind(synth, "--kind", "data.kind", "glyph, antidiagonal, lattice or blobs");
  synth_flags.bind(synth, "--count", "data.count", "number of images");
  synth_flags.bind(synth, "--size", "data.size", "image side length");
  synth_flags.bind(synth, "--seed", "data.seed", "generator seed");
  synth_flags.bind(synth, "--noise-seed", "noise.seed", "noise seed");
  synth_flags.bind(synth, "--glyph-grid", "data.glyph_grid", "snap glyph strokes to this grid");
  synth_flags.bind(synth, "--out", "output.dir", "corpus directory");
  std::string noise_range;
  auto* noise_opt = synth->add_option("--noise", noise_range, "uniform noise range LOW,HIGH [noise.low, noise.high]");
  synth->add_flag("--force", force, "overwrite an existing corpus");

  auto* trainc = app.add_subcommand("train", "train an autoencoder on a corpus");
  ConfigFlags train_flags;
  train_flags.common(trainc);
  train_flags.bind(trainc, "--corpus", "data.corpus", "corpus directory");
  train_flags.bind(trainc, "--out", "output.dir", "run directory");
  train_flags.bind(trainc, "--input-size", "model.input_size", "model input side length");
  train_flags.bind(trainc, "--channels", "model.channels", "image channels");
  train_flags.bind(trainc, "--stages", "model.stages", "encoder stages");
  train_flags.bind(trainc, "--base-width", "model.base_width", "channels after the first stage");
  train_flags.bind(trainc, "--bottleneck-channels", "model.bottleneck_channels", "bottleneck channels");
  train_flags.bind(trainc, "--model-seed", "model.seed", "initialisation seed");
  train_flags.bind(trainc, "--optimizer", "train.optimizer", "adam or sgd");
  train_flags.bind(trainc, "--lr", "train.lr", "learning rate");
  train_flags.bind(trainc, "--batch-size", "train.batch_size", "batch size");
  train_flags.bind(trainc, "--epochs", "train.epochs", "epochs");
  train_flags.bind(trainc, "--patches", "train.patches", "train on this many random crops (0: whole images)");
  train_flags.bind(trainc, "--seed", "train.seed", "shuffle and augmentation seed");
  train_flags.toggle(trainc, "--no-augment", "train.augment", "false", "disable dihedral augmentation");

  auto* den = app.add_subcommand("denoise", "denoise images with a trained checkpoint");
  ConfigFlags den_flags;
  std::vector<std::string> inputs;
  den_flags.common(den);
  den_flags.bind(den, "--checkpoint", "denoise.checkpoint", "model checkpoint");
  den_flags.bind(den, "--out", "output.dir", "output directory");
  den_flags.toggle(den, "--tile", "denoise.tile", "true", "tile images larger than the model input");
  den->add_option("inputs", inputs, "image files or directories");

  auto* ev = app.add_subcommand("eval", "compare denoised images with clean references");
  ConfigFlags eval_flags;
  eval_flags.common(ev);
  eval_flags.bind(ev, "--denoised", "eval.denoised", "denoised image directory");
  eval_flags.bind(ev, "--clean", "eval.clean", "clean image directory");
  eval_flags.bind(ev, "--out", "output.dir", "directory for metrics.csv");

  auto* th = app.add_subcommand("theory", "trace the gradient flow of a tiny model");
  ConfigFlags th_flags;
  th_flags.common(th);
  th_flags.bind(th, "--model", "theory.model", "linear or autoencoder");
  th_flags.bind(th, "--samples", "theory.samples", "training samples");
  th_flags.bind(th, "--step", "theory.step", "Euler step");
  th_flags.bind(th, "--steps", "theory.steps", "number of steps");
  th_flags.bind(th, "--size", "model.input_size", "image side length");
  th_flags.bind(th, "--stages", "model.stages", "encoder stages");
  th_flags.bind(th, "--base-width", "model.base_width", "channels after the first stage");
  th_flags.bind(th, "--bottleneck-channels", "model.bottleneck_channels", "bottleneck channels");
  th_flags.bind(th, "--seed", "model.seed", "initialisation seed");
  th_flags.bind(th, "--out", "output.dir", "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    apply_thread_cap();
    if (synth->parsed()) {
      auto cfg = synth_flags.resolve();
      if (noise_opt->count()) {
        const auto comma = noise_range.find(',');
        if (comma == std::string::npos) throw UsageError("--noise expects LOW,HIGH");
        cfg.set("noise.low", trim(noise_range.substr(0, comma)));
        cfg.set("noise.high", trim(noise_range.substr(comma + 1)));
      }
      return cmd_synth(cfg, force);
    }
    if (trainc->parsed()) return cmd_train(train_flags.resolve());
    if (den->parsed()) {
      auto cfg = den_flags.resolve();
      if (!inputs.empty()) {
        std::string joined;
        for (const auto& in : inputs) {
          if (in.find(',') != std::string::npos) throw UsageError("input paths may not contain ','");
          joined += (joined.empty() ? "" : ",") + in;
        }
        cfg.set("denoise.inputs", joined);
      }
      return cmd_denoise(cfg);
    }
    if (ev->parsed()) return cmd_eval(eval_flags.resolve());
    if (th->parsed()) return cmd_theory(th_flags.resolve());
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const FlowDiverged<double>& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
