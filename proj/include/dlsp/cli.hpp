#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dlsp/chgen.hpp"
#include "dlsp/design.hpp"
#include "dlsp/interpret.hpp"
#include "dlsp/kvfile.hpp"
#include "dlsp/morpho.hpp"
#include "dlsp/nn/model.hpp"
#include "dlsp/nn/train.hpp"
#include "dlsp/oracle.hpp"
#include "dlsp/parallel.hpp"
#include "dlsp/presets.hpp"
#include "dlsp/report.hpp"
#include "dlsp/server.hpp"

namespace dlsp::cli {

/// Usage problems: bad flags, unknown config keys, missing inputs. Exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Knob {
  std::string section;
  std::string key;
  std::string fallback;
  std::string help;
};

inline const std::vector<Knob>& knobs() {
  static const std::vector<Knob> all = [] {
    const ChParams ch;
    const OracleParams op;
    const nn::TrainConfig tc;
    const PbilParams pb;
    std::string steps;
    for (auto s : ch.snapshot_steps) steps += (steps.empty() ? "" : ",") + std::to_string(s);
    return std::vector<Knob>{
        {"chgen", "grid_n", std::to_string(ch.grid_n), "simulation grid side (power of two)"},
        {"chgen", "eps2", format_real(ch.eps2), "interface energy coefficient"},
        {"chgen", "mobility", format_real(ch.mobility), "mobility M"},
        {"chgen", "dt", format_real(ch.dt), "time step"},
        {"chgen", "stabilization", format_real(ch.stabilization), "linear stabilization S"},
        {"chgen", "blend_mean", "auto", "initial mean composition, or auto (picked per seed)"},
        {"chgen", "noise_amp", format_real(ch.noise_amp), "initial noise amplitude"},
        {"chgen", "snapshot_steps", steps, "comma-separated snapshot steps"},
        {"chgen", "crop", std::to_string(ch.crop), "centre crop side"},
        {"chgen", "seed", "0", "seed of the first run; run r uses seed + r"},
        {"oracle", "diffusion_length", format_real(op.diffusion_length), "exciton diffusion length L_D (px)"},
        {"oracle", "transport_length", format_real(op.transport_length), "carrier transport length L_t (px)"},
        {"oracle", "generation", format_real(op.generation), "generation rate G"},
        {"oracle", "solver_tol", format_real(op.solver_tol), "relative residual tolerance"},
        {"oracle", "solver_max_iters", std::to_string(op.solver_max_iters), "iteration cap"},
        {"oracle", "j_scale", format_real(op.j_scale), "proxy to jsc scale"},
        {"train", "lr", format_real(tc.learning_rate), "Adam learning rate"},
        {"train", "batch", std::to_string(tc.batch_size), "mini-batch size"},
        {"train", "epochs", std::to_string(tc.epochs), "epochs"},
        {"train", "beta1", format_real(tc.beta1), "Adam beta1"},
        {"train", "beta2", format_real(tc.beta2), "Adam beta2"},
        {"train", "epsilon", format_real(tc.epsilon), "Adam epsilon"},
        {"train", "chunk", std::to_string(tc.chunk), "samples per worker task"},
        {"train", "seed", "0", "initialization and shuffling seed"},
        {"pbil", "n", std::to_string(pb.n), "population size"},
        {"pbil", "n_b", std::to_string(pb.n_b), "elite count"},
        {"pbil", "l_r", format_real(pb.l_r), "learning rate"},
        {"pbil", "mutation_prob", format_real(pb.mutation_prob), "per-pixel mutation probability"},
        {"pbil", "mutation_shift", format_real(pb.mutation_shift), "mutation shift"},
        {"pbil", "p_min", format_real(pb.p_min), "lower probability clamp"},
        {"pbil", "p_max", format_real(pb.p_max), "upper probability clamp"},
        {"pbil", "smoothing_radius", std::to_string(pb.smoothing_radius), "box-blur radius for samples"},
        {"pbil", "max_iters", std::to_string(pb.max_iters), "iteration limit"},
        {"pbil", "improvement_tol", format_real(pb.improvement_tol), "minimum best-fitness gain over the window"},
        {"pbil", "improvement_window", std::to_string(pb.improvement_window), "window for the improvement test"},
        {"pbil", "delta", format_real(pb.delta), "probability margin for the initial matrix"},
        {"pbil", "seed", "0", "sampling seed"},
        {"serve", "host", "127.0.0.1", "bind address"},
        {"serve", "port", "8080", "port"},
        {"serve", "ui_dir", "", "static UI directory served at /"},
        {"serve", "max_jobs", "4", "concurrent design jobs"},
    };
  }();
  return all;
}

/// Knob values for one invocation: flag, then config file, then (for seeds) DLSP_SEED, then default.
class Settings {
 public:
  void bind(CLI::App* app, const std::string& section, const std::string& flag_override = {}) {
    for (const auto& k : knobs()) {
      if (k.section != section) continue;
      std::string name = k.key;
      std::replace(name.begin(), name.end(), '_', '-');
      if (!flag_override.empty() && k.key == "seed") name = flag_override;
      auto& slot = flags_[section + "." + k.key];
      const std::string help = k.help + " [" + section + "] " + k.key;
      options_[section + "." + k.key] = app->add_option("--" + name, slot, help)->default_str(k.fallback);
    }
  }

  void load_config(const std::filesystem::path& path) {
    KeyValues kv;
    try {
      kv = read_key_values(path);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
    for (const auto& [key, value] : kv) {
      const bool known = std::any_of(knobs().begin(), knobs().end(), [&](const Knob& k) { return k.section + "." + k.key == key; });
      if (!known) throw UsageError("unknown configuration key '" + key + "' in " + path.string());
      file_[key] = value;
    }
  }

  void set_global_seed(std::optional<std::string> s) { global_seed_ = std::move(s); }

  /// Global seed (flag or DLSP_SEED) for commands without a config section, else 0.
  [[nodiscard]] std::uint64_t global_seed() const {
    if (!global_seed_) return 0;
    try {
      return static_cast<std::uint64_t>(parse_int(*global_seed_));
    } catch (const std::exception&) {
      throw UsageError("global seed: cannot parse '" + *global_seed_ + "'");
    }
  }

  [[nodiscard]] std::string get(const std::string& section, const std::string& key) const {
    const auto id = section + "." + key;
    if (auto it = options_.find(id); it != options_.end() && it->second->count() > 0) return flags_.at(id);
    if (auto it = file_.find(id); it != file_.end()) return it->second;
    if (key == "seed" && global_seed_) return *global_seed_;
    for (const auto& k : knobs())
      if (k.section == section && k.key == key) return k.fallback;
    throw std::logic_error("no knob " + id);
  }

  [[nodiscard]] double real(const std::string& section, const std::string& key) const { return convert(section, key, [](const std::string& v) { return parse_real(v); }); }
  [[nodiscard]] long long integer(const std::string& section, const std::string& key) const { return convert(section, key, [](const std::string& v) { return parse_int(v); }); }
  [[nodiscard]] std::uint64_t seed(const std::string& section) const {
    const auto v = integer(section, "seed");
    if (v < 0) throw UsageError("[" + section + "] seed must be non-negative");
    return static_cast<std::uint64_t>(v);
  }

  [[nodiscard]] ChParams chgen() const {
    ChParams p;
    p.grid_n = static_cast<int>(integer("chgen", "grid_n"));
    p.eps2 = real("chgen", "eps2");
    p.mobility = real("chgen", "mobility");
    p.dt = real("chgen", "dt");
    p.stabilization = real("chgen", "stabilization");
    p.noise_amp = real("chgen", "noise_amp");
    p.crop = static_cast<int>(integer("chgen", "crop"));
    p.snapshot_steps.clear();
    const auto steps = get("chgen", "snapshot_steps");
    std::size_t start = 0;
    while (start <= steps.size()) {
      const auto comma = steps.find(',', start);
      const auto item = steps.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      try {
        p.snapshot_steps.push_back(parse_int(item));
      } catch (const std::exception&) {
        throw UsageError("[chgen] snapshot_steps: bad entry '" + item + "'");
      }
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return p;
  }

  [[nodiscard]] std::optional<double> blend_mean() const {
    if (get("chgen", "blend_mean") == "auto") return std::nullopt;
    return real("chgen", "blend_mean");
  }

  [[nodiscard]] OracleParams oracle() const {
    OracleParams p;
    p.diffusion_length = real("oracle", "diffusion_length");
    p.transport_length = real("oracle", "transport_length");
    p.generation = real("oracle", "generation");
    p.solver_tol = real("oracle", "solver_tol");
    p.solver_max_iters = static_cast<int>(integer("oracle", "solver_max_iters"));
    p.j_scale = real("oracle", "j_scale");
    return p;
  }

  [[nodiscard]] nn::TrainConfig train() const {
    nn::TrainConfig c;
    c.learning_rate = real("train", "lr");
    c.batch_size = static_cast<int>(integer("train", "batch"));
    c.epochs = static_cast<int>(integer("train", "epochs"));
    c.beta1 = real("train", "beta1");
    c.beta2 = real("train", "beta2");
    c.epsilon = real("train", "epsilon");
    c.chunk = static_cast<int>(integer("train", "chunk"));
    c.seed = seed("train");
    return c;
  }

  [[nodiscard]] PbilParams pbil() const {
    PbilParams p;
    p.n = static_cast<int>(integer("pbil", "n"));
    p.n_b = static_cast<int>(integer("pbil", "n_b"));
    p.l_r = real("pbil", "l_r");
    p.mutation_prob = real("pbil", "mutation_prob");
    p.mutation_shift = real("pbil", "mutation_shift");
    p.p_min = real("pbil", "p_min");
    p.p_max = real("pbil", "p_max");
    p.smoothing_radius = static_cast<int>(integer("pbil", "smoothing_radius"));
    p.max_iters = static_cast<int>(integer("pbil", "max_iters"));
    p.improvement_tol = real("pbil", "improvement_tol");
    p.improvement_window = static_cast<int>(integer("pbil", "improvement_window"));
    p.delta = real("pbil", "delta");
    p.seed = seed("pbil");
    return p;
  }

 private:
  template <class F>
  std::invoke_result_t<F, const std::string&> convert(const std::string& section, const std::string& key, F&& f) const {
    const auto v = get(section, key);
    try {
      return f(v);
    } catch (const std::exception&) {
      throw UsageError("[" + section + "] " + key + ": cannot parse '" + v + "'");
    }
  }

  std::map<std::string, std::string> flags_;
  std::map<std::string, CLI::Option*> options_;
  std::map<std::string, std::string> file_;
  std::optional<std::string> global_seed_;
};

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string file_digest(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

inline SplitFractions parse_fractions(const std::string& text) {
  std::vector<double> v;
  std::size_t start = 0;
  for (;;) {
    const auto comma = text.find(',', start);
    try {
      v.push_back(parse_real(text.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    } catch (const std::exception&) {
      throw UsageError("--fractions expects three comma-separated numbers");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (v.size() != 3) throw UsageError("--fractions expects three comma-separated numbers");
  if (!(v[0] > 0 && v[1] > 0 && v[2] > 0) || std::abs(v[0] + v[1] + v[2] - 1.0) > 1e-9) throw UsageError("--fractions must be positive and sum to 1");
  return {v[0], v[1], v[2]};
}

inline std::vector<int> parse_int_list(const std::string& text, const std::string& flag) {
  std::vector<int> v;
  if (text.empty()) return v;
  std::size_t start = 0;
  for (;;) {
    const auto comma = text.find(',', start);
    try {
      v.push_back(static_cast<int>(parse_int(text.substr(start, comma == std::string::npos ? std::string::npos : comma - start))));
    } catch (const std::exception&) {
      throw UsageError(flag + " expects comma-separated integers");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands. Each returns normally on success and throws on failure.

struct Context {
  std::ostream& out;
  std::ostream& err;
  int jobs = 1;
  bool deterministic = false;
};

struct GenerateArgs {
  int runs = 1;
  std::filesystem::path out;
  int augment = 0;
};

inline void cmd_generate(const Context& ctx, const Settings& s, const GenerateArgs& a) {
  if (a.runs < 1) throw UsageError("--runs must be >= 1");
  if (a.augment < 0) throw UsageError("--augment must be >= 0");
  ChParams base = s.chgen();
  base.validate();
  const auto fixed_mean = s.blend_mean();
  const auto seed0 = s.seed("chgen");
  std::filesystem::create_directories(a.out);

  const auto runs = static_cast<std::size_t>(a.runs);
  std::vector<std::vector<LabeledSample>> rows(runs);
  std::mutex log_mu;
  parallel_for(runs, ctx.jobs, [&](std::size_t r) {
    ChParams p = base;
    p.seed = seed0 + r;
    p.blend_mean = fixed_mean ? *fixed_mean : default_blend_mean(p.seed);
    for (const auto& snap : ch_run(p)) {
      const auto variants = a.augment > 0 ? augment(snap.morphology, a.augment) : std::vector<Morphology>{snap.morphology};
      for (std::size_t v = 0; v < variants.size(); ++v) {
        std::string name = "ch_" + std::to_string(p.seed) + "_" + std::to_string(snap.step);
        if (v > 0) name += "_a" + std::to_string(v);
        name += ".pgm";
        write_pgm(a.out / name, variants[v]);
        rows[r].push_back({name, std::nullopt, std::nullopt, Split::None, snap.group});
      }
    }
    std::lock_guard lock(log_mu);
    ctx.err << "generate: run " << p.seed << " done (blend mean " << format_real(p.blend_mean) << ")\n";
  });

  DatasetManifest m;
  for (auto& r : rows)
    for (auto& x : r) m.samples.push_back(std::move(x));
  const auto manifest_path = a.out / "manifest.csv";
  write_manifest(manifest_path, m);
  auto kv = base.to_kv();
  for (auto& [k, v] : kv) {
    if (k == "seed") v = std::to_string(seed0);
    if (k == "blend_mean") v = fixed_mean ? format_real(*fixed_mean) : "auto";
  }
  kv.push_back({"runs", std::to_string(a.runs)});
  kv.push_back({"augment", std::to_string(a.augment)});
  kv.push_back({"digest", detail::file_digest(manifest_path)});
  write_key_values(params_sidecar_path(manifest_path), kv);
  ctx.out << json{{"manifest", manifest_path.string()}, {"images", m.samples.size()}}.dump() << '\n';
}

inline void cmd_label(const Context& ctx, const Settings& s, const std::filesystem::path& manifest_path, std::optional<std::filesystem::path> out) {
  auto m = read_manifest(manifest_path);
  if (m.samples.empty()) throw MorphoError(MorphoError::Code::EmptyManifest, "manifest has no samples");
  const auto t0 = std::chrono::steady_clock::now();
  m = label_dataset(std::move(m), s.oracle(), ctx.jobs);
  const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto dest = out.value_or(manifest_path);
  if (dest != manifest_path && std::filesystem::exists(params_sidecar_path(manifest_path))) {
    std::filesystem::copy_file(params_sidecar_path(manifest_path), params_sidecar_path(dest), std::filesystem::copy_options::overwrite_existing);
  }
  write_manifest(dest, m);
  std::array<long, kNumClasses> hist{};
  for (const auto& x : m.samples) ++hist[*x.class_id];
  ctx.err << "label: " << m.samples.size() << " images in " << format_real(std::round(secs * 10) / 10) << " s\n";
  ctx.out << json{{"manifest", dest.string()}, {"j_min", m.binning->j_min}, {"j_max", m.binning->j_max}, {"class_counts", hist}}.dump() << '\n';
}

inline void cmd_split(const Context& ctx, const std::filesystem::path& manifest_path, const std::string& fractions, std::uint64_t seed,
                      std::optional<std::filesystem::path> out) {
  const auto f = detail::parse_fractions(fractions);
  auto m = read_manifest(manifest_path);
  m = rebin_from_train(split_dataset(std::move(m), f, seed));
  const auto dest = out.value_or(manifest_path);
  if (dest != manifest_path && std::filesystem::exists(params_sidecar_path(manifest_path))) {
    std::filesystem::copy_file(params_sidecar_path(manifest_path), params_sidecar_path(dest), std::filesystem::copy_options::overwrite_existing);
  }
  write_manifest(dest, m);
  std::array<std::size_t, 3> counts{m.indices_of(Split::Train).size(), m.indices_of(Split::Val).size(), m.indices_of(Split::Test).size()};
  ctx.out << json{{"manifest", dest.string()}, {"train", counts[0]}, {"val", counts[1]}, {"test", counts[2]}}.dump() << '\n';
}

struct TrainArgs {
  std::filesystem::path manifest;
  std::filesystem::path out;
  std::optional<std::filesystem::path> history;
};

inline void cmd_train(const Context& ctx, const Settings& s, const TrainArgs& a) {
  auto cfg = s.train();
  cfg.jobs = ctx.jobs;
  cfg.validate();
  const auto m = read_manifest(a.manifest);
  const auto train_set = nn::load_images(m, Split::Train, ctx.jobs);
  if (train_set.size() == 0) throw nn::NnError(nn::NnError::Code::EmptyTrainSplit, "manifest has no labelled training samples");
  const auto val_set = nn::load_images(m, Split::Val, ctx.jobs);
  ctx.err << "train: " << train_set.size() << " train / " << val_set.size() << " val images, " << cfg.epochs << " epochs\n";
  const auto model = nn::build_model<float>(nn::ArchSpec::default_arch(), cfg.seed);
  const auto t0 = std::chrono::steady_clock::now();
  auto log = [&](const nn::EpochRecord& r, const nn::Model<float>&) {
    const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ctx.err << "epoch " << r.epoch << " loss " << format_real(std::round(r.train_loss * 1e4) / 1e4) << " train_acc " << format_real(std::round(r.train_acc * 1e4) / 1e4)
            << " val_acc " << format_real(std::round(r.val_acc * 1e4) / 1e4) << " (" << static_cast<long>(secs) << " s)\n";
    return true;
  };
  const auto result = nn::train(model, train_set, val_set.size() ? &val_set : nullptr, cfg, nn::EpochCallback<float>(log));
  nn::save_weights(result.best_model, a.out);
  if (m.binning) write_key_values(binning_sidecar_path(a.out), binning_to_kv(*m.binning));
  const auto history = a.history.value_or(std::filesystem::path(a.out.string() + ".history.csv"));
  detail::write_text(history, training_history_csv(result.history));
  ctx.out << json{{"model", a.out.string()},
                  {"best_epoch", result.best_epoch},
                  {"best_val_acc", result.best_val_acc},
                  {"epochs", result.history.size()},
                  {"history", history.string()}}
                 .dump()
          << '\n';
}

inline void cmd_eval(const Context& ctx, const std::filesystem::path& model_path, const std::filesystem::path& manifest_path, const std::string& split_name,
                     std::optional<std::filesystem::path> confusion) {
  const auto split = parse_split(split_name);
  const auto model = nn::load_weights(model_path);
  const auto m = read_manifest(manifest_path);
  const auto set = nn::load_images(m, split, ctx.jobs);
  if (set.size() == 0) throw nn::NnError(nn::NnError::Code::EmptySplit, "split '" + split_name + "' has no labelled samples");
  const auto report = nn::evaluate(model, set, ctx.jobs);
  const auto path = confusion.value_or(std::filesystem::path(model_path.string() + "." + split_name + ".confusion.csv"));
  detail::write_text(path, confusion_csv(report));
  auto j = to_json(report);
  j["confusion_csv"] = path.string();
  ctx.out << j.dump() << '\n';
}

inline void cmd_saliency(const Context& ctx, const std::filesystem::path& model_path, const std::filesystem::path& image, const std::filesystem::path& out,
                         std::optional<int> target) {
  const auto model = nn::load_weights(model_path);
  const auto m = read_pgm(image);
  if (target && (*target < 0 || *target >= model.arch.classes)) throw UsageError("--target must be a class index");
  const auto s = saliency(model, m, target);
  write_pgm(out, s.values);
  ctx.out << json{{"target", s.target_class}, {"interface_concentration", interface_concentration(s, binarize(m))}, {"out", out.string()}}.dump() << '\n';
}

struct DesignArgs {
  std::filesystem::path model;
  std::string init = "bilayer";
  std::optional<int> iters;
  std::filesystem::path out;
  std::string snapshots = "10,30,50";
};

inline void cmd_design(const Context& ctx, const Settings& s, const DesignArgs& a) {
  auto params = s.pbil();
  if (a.iters) params.max_iters = *a.iters;
  params.validate();
  const auto snaps = detail::parse_int_list(a.snapshots, "--snapshots");
  auto model = std::make_shared<const nn::Model<float>>(nn::load_weights(a.model));
  const auto& shape = model->arch.input;
  const auto f = cnn_expected_class(model);

  PbilState st;
  if (a.init == "uniform") {
    st = pbil_init_uniform(shape.h, shape.w, params, f);
  } else if (auto p = presets::by_name(a.init, shape.h, shape.w)) {
    st = pbil_init(Morphology(*p), params, f);
  } else {
    if (!std::filesystem::is_regular_file(a.init)) throw UsageError("--init: not uniform, a preset name, or an existing PGM: " + a.init);
    const auto m = read_pgm(a.init);
    if (m.height() != shape.h || m.width() != shape.w) throw UsageError("--init image does not match the model input size");
    st = pbil_init(m, params, f);
  }
  std::filesystem::create_directories(a.out);
  const double initial = st.best_fitness;
  const auto t0 = std::chrono::steady_clock::now();
  auto observer = [&](const PbilState& cur) {
    if (std::find(snaps.begin(), snaps.end(), cur.iteration) != snaps.end()) {
      write_pgm(a.out / ("p_" + std::to_string(cur.iteration) + ".pgm"), cur.p);
    }
    const auto& h = cur.history.back();
    ctx.err << "iter " << h.iteration << " best " << format_real(std::round(h.best_fitness * 1e4) / 1e4) << " elite_mean "
            << format_real(std::round(h.elite_mean * 1e4) / 1e4) << '\n';
    return true;
  };
  st = pbil_run(std::move(st), params, f, ctx.jobs, observer);
  const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_pgm(a.out / "p_final.pgm", st.p);
  write_pgm(a.out / "best.pgm", st.best_sample.to_morphology());
  detail::write_text(a.out / "history.csv", pbil_history_csv(st.history));
  ctx.out << json{{"iterations", st.iteration}, {"initial_fitness", initial}, {"best_fitness", st.best_fitness}, {"seconds", secs}, {"out", a.out.string()}}.dump()
          << '\n';
}

inline void cmd_oracle(const Context& ctx, const Settings& s, const std::filesystem::path& image, std::optional<std::filesystem::path> binning) {
  const auto m = read_pgm(image);
  const auto r = evaluate(m, s.oracle());
  std::optional<int> cls;
  if (binning) cls = assign_class(r.jsc, binning_from_kv(read_key_values(*binning)));
  ctx.out << to_json(r, cls).dump() << '\n';
}

inline void cmd_serve(const Context& ctx, const Settings& s, const std::optional<std::filesystem::path>& model) {
  server::ServiceConfig cfg;
  cfg.model_path = model;
  if (const auto ui = s.get("serve", "ui_dir"); !ui.empty()) cfg.ui_dir = ui;
  cfg.max_jobs = static_cast<int>(s.integer("serve", "max_jobs"));
  if (cfg.max_jobs < 1) throw UsageError("--max-jobs must be >= 1");
  cfg.jobs = ctx.jobs;
  cfg.oracle = s.oracle();
  cfg.pbil = s.pbil();
  cfg.pbil.validate();
  auto service = server::Service::from_config(cfg);
  const auto host = s.get("serve", "host");
  const auto port = static_cast<int>(s.integer("serve", "port"));
  ctx.err << "serving on http://" << host << ":" << port << '\n';
  server::serve(service, host, port);
}

// ---------------------------------------------------------------------------

/// Runs one command line (without the program name). Exit codes: 0 ok, 1 usage, 2 runtime failure.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Morphology generation, labelling, surrogate training and design"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  std::optional<std::filesystem::path> config;
  int jobs = default_jobs();
  bool deterministic = false;
  std::optional<std::string> seed_flag;
  app.add_option("--config", config, "key=value configuration file with [chgen] [oracle] [train] [pbil] [serve] sections")->check(CLI::ExistingFile);
  app.add_option("--jobs", jobs, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_flag("--deterministic", deterministic, "serial execution for bitwise-reproducible runs");
  app.add_option("--global-seed", seed_flag, "seed used wherever a subcommand seed is not set (env DLSP_SEED)");

  Settings settings;

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "run phase-field simulations and write snapshot images + manifest");
  generate->add_option("--runs", gen.runs, "number of simulation runs")->required();
  generate->add_option("--out", gen.out, "output directory")->required();
  generate->add_option("--augment", gen.augment, "cyclic shifts per snapshot; > 0 also adds the mirror")->capture_default_str();
  settings.bind(generate, "chgen");

  std::filesystem::path manifest;
  std::optional<std::filesystem::path> manifest_out;
  auto* label = app.add_subcommand("label", "evaluate every image with the device oracle and bin the results");
  label->add_option("--manifest", manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  label->add_option("--out", manifest_out, "write the labelled manifest here (default: in place)");
  settings.bind(label, "oracle");

  std::string fractions = "0.7,0.15,0.15";
  std::uint64_t split_seed = 0;
  auto* split = app.add_subcommand("split", "group-aware train/val/test split");
  split->add_option("--manifest", manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  split->add_option("--fractions", fractions, "train,val,test fractions")->capture_default_str();
  auto* split_seed_opt = split->add_option("--seed", split_seed, "shuffle seed")->default_str("0");
  split->add_option("--out", manifest_out, "write the split manifest here (default: in place)");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "train the surrogate classifier");
  train->add_option("--manifest", tr.manifest, "labelled, split manifest")->required()->check(CLI::ExistingFile);
  train->add_option("--out", tr.out, "weights file for the best-validation epoch")->required();
  train->add_option("--history", tr.history, "per-epoch CSV (default: <out>.history.csv)");
  settings.bind(train, "train");

  std::filesystem::path model_path;
  std::string split_name = "test";
  std::optional<std::filesystem::path> confusion;
  auto* eval = app.add_subcommand("eval", "evaluate a model on one split");
  eval->add_option("--model", model_path, "weights file")->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", manifest, "labelled manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split_name, "train|val|test")->capture_default_str()->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--confusion", confusion, "confusion CSV path (default: <model>.<split>.confusion.csv)");

  std::filesystem::path image, out_path;
  std::optional<int> target;
  auto* sal = app.add_subcommand("saliency", "gradient saliency map for one image");
  sal->add_option("--model", model_path, "weights file")->required()->check(CLI::ExistingFile);
  sal->add_option("--image", image, "input PGM")->required()->check(CLI::ExistingFile);
  sal->add_option("--out", out_path, "output PGM")->required();
  sal->add_option("--target", target, "class to explain (default: predicted)");

  DesignArgs des;
  auto* design = app.add_subcommand("design", "PBIL morphology design with the surrogate as fitness");
  design->add_option("--model", des.model, "weights file")->required()->check(CLI::ExistingFile);
  design->add_option("--init", des.init, "uniform, a preset name (bilayer, columns_w4, ...) or a PGM path")->capture_default_str();
  design->add_option("--iters", des.iters, "iteration limit (overrides [pbil] max_iters)");
  design->add_option("--out", des.out, "output directory")->required();
  design->add_option("--snapshots", des.snapshots, "iterations at which P is written")->capture_default_str();
  settings.bind(design, "pbil");

  std::optional<std::filesystem::path> binning;
  auto* orc = app.add_subcommand("oracle", "device oracle for one image");
  orc->add_option("--image", image, "input PGM")->required()->check(CLI::ExistingFile);
  orc->add_option("--binning", binning, "binning sidecar; adds the class to the output")->check(CLI::ExistingFile);
  settings.bind(orc, "oracle");

  std::optional<std::filesystem::path> serve_model;
  auto* serve = app.add_subcommand("serve", "HTTP API and static UI");
  serve->add_option("--model", serve_model, "weights file")->check(CLI::ExistingFile);
  settings.bind(serve, "serve");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  try {
    if (config) settings.load_config(*config);
    if (seed_flag) {
      settings.set_global_seed(seed_flag);
    } else if (const char* env = std::getenv("DLSP_SEED"); env && *env) {
      settings.set_global_seed(std::string(env));
    }
    Context ctx{out, err, deterministic ? 1 : jobs, deterministic};

    if (generate->parsed()) {
      cmd_generate(ctx, settings, gen);
    } else if (label->parsed()) {
      cmd_label(ctx, settings, manifest, manifest_out);
    } else if (split->parsed()) {
      std::uint64_t seed = split_seed;
      if (split_seed_opt->count() == 0) seed = settings.global_seed();
      cmd_split(ctx, manifest, fractions, seed, manifest_out);
    } else if (train->parsed()) {
      cmd_train(ctx, settings, tr);
    } else if (eval->parsed()) {
      cmd_eval(ctx, model_path, manifest, split_name, confusion);
    } else if (sal->parsed()) {
      cmd_saliency(ctx, model_path, image, out_path, target);
    } else if (design->parsed()) {
      cmd_design(ctx, settings, des);
    } else if (orc->parsed()) {
      cmd_oracle(ctx, settings, image, binning);
    } else if (serve->parsed()) {
      cmd_serve(ctx, settings, serve_model);
    }
    return 0;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace dlsp::cli
