// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dlsp/chgen.hpp"
#include "dlsp/cli.hpp"
#include "dlsp/design.hpp"
#include "dlsp/interpret.hpp"
#include "dlsp/nn/gradcheck.hpp"
#include "dlsp/nn/model.hpp"
#include "dlsp/nn/train.hpp"
#include "dlsp/oracle.hpp"
#include "dlsp/presets.hpp"

using namespace dlsp;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

/// Everything the trained-model criteria need.
struct Pipeline {
  bool ok = false;
  std::string error;
  fs::path manifest_path, model_path;
  DatasetManifest manifest;
  BinningSpec binning;
  std::shared_ptr<const nn::Model<float>> model;
  nn::EvalReport test_report;
  double seconds = 0;
  std::size_t images = 0;
};

struct Options {
  fs::path work_dir = "acceptance_work";
  int runs = 60;
  int augment = 18;
  int jobs = default_jobs();
  bool reuse = false;
};

void run_step(const std::vector<std::string>& args, std::ostream& log, std::string* stdout_text = nullptr) {
  std::ostringstream out;
  log << "$ dlsp";
  for (const auto& a : args) log << ' ' << a;
  log << '\n';
  const int rc = cli::run_cli(args, out, log);
  log << out.str();
  log.flush();
  if (stdout_text) *stdout_text = out.str();
  if (rc != 0) throw std::runtime_error("'" + args.at(std::min<std::size_t>(args.size() - 1, 4)) + "' step exited with " + std::to_string(rc));
}

Pipeline build_pipeline(const Options& opt) {
  Pipeline p;
  const auto data = opt.work_dir / "data";
  p.manifest_path = data / "manifest.csv";
  p.model_path = opt.work_dir / "model.bin";
  const auto timing = opt.work_dir / "pipeline.kv";
  try {
    const bool have = fs::exists(p.model_path) && fs::exists(p.manifest_path) && fs::exists(timing);
    if (!(opt.reuse && have)) {
      fs::remove_all(opt.work_dir);
      fs::create_directories(opt.work_dir);
      std::ofstream(opt.work_dir / "pipeline.cfg") << "[chgen]\nseed=1000\n[train]\nseed=1\nlr=0.0001\nbatch=128\nepochs=30\n";
      std::ofstream log(opt.work_dir / "pipeline.log");
      const auto cfg = (opt.work_dir / "pipeline.cfg").string();
      const auto jobs = std::to_string(opt.jobs);
      const auto t0 = Clock::now();
      run_step({"--config", cfg, "--jobs", jobs, "generate", "--runs", std::to_string(opt.runs), "--augment", std::to_string(opt.augment), "--out", data.string()}, log);
      run_step({"--config", cfg, "--jobs", jobs, "label", "--manifest", p.manifest_path.string()}, log);
      run_step({"--config", cfg, "--jobs", jobs, "split", "--manifest", p.manifest_path.string(), "--fractions", "0.7,0.15,0.15", "--seed", "42"}, log);
      run_step({"--config", cfg, "--jobs", jobs, "train", "--manifest", p.manifest_path.string(), "--out", p.model_path.string()}, log);
      std::string eval_out;
      run_step({"--jobs", jobs, "eval", "--model", p.model_path.string(), "--manifest", p.manifest_path.string(), "--split", "test"}, log, &eval_out);
      write_key_values(timing, {{"seconds", format_real(seconds_since(t0))}, {"jobs", jobs}});
    }
    p.seconds = parse_real(to_map(read_key_values(timing)).at("seconds"));
    p.manifest = read_manifest(p.manifest_path);
    p.images = p.manifest.samples.size();
    if (!p.manifest.binning) throw std::runtime_error("manifest has no binning");
    p.binning = *p.manifest.binning;
    p.model = std::make_shared<const nn::Model<float>>(nn::load_weights(p.model_path));
    p.test_report = nn::evaluate(*p.model, nn::load_images(p.manifest, Split::Test, opt.jobs), opt.jobs);
    p.ok = true;
  } catch (const std::exception& e) {
    p.error = e.what();
  }
  return p;
}

// ---------------------------------------------------------------------------

Outcome c1_pipeline(const Pipeline& p, const Options& opt) {
  if (!p.ok) return {false, "pipeline failed: " + p.error};
  const auto& r = p.test_report;
  const bool pass = p.seconds <= 7200.0 && r.accuracy >= 0.70 && r.within_one_accuracy >= 0.95;
  return {pass, std::to_string(p.images) + " images, " + fmt(p.seconds, 5) + " s on " + std::to_string(opt.jobs) + " thread(s) (limit 7200 s); test accuracy " +
                    fmt(r.accuracy) + " (>= 0.70), within-one " + fmt(r.within_one_accuracy) + " (>= 0.95), macro-F1 " + fmt(r.macro_f1) + ", n=" +
                    std::to_string(r.count)};
}

Outcome c2_confusion(const Pipeline& p) {
  if (!p.ok) return {false, "pipeline failed: " + p.error};
  std::string bad;
  for (int t = 0; t < nn::kClasses; ++t) {
    const auto& row = p.test_report.confusion[t];
    const long mx = *std::max_element(row.begin(), row.end());
    const long sum = std::accumulate(row.begin(), row.end(), 0L);
    if (sum > 0 && row[t] != mx) bad += (bad.empty() ? "" : ", ") + std::to_string(t) + " (diag " + std::to_string(row[t]) + " < max " + std::to_string(mx) + ")";
  }
  return {bad.empty(), bad.empty() ? "every non-empty test row peaks on the diagonal" : "rows off-diagonal: " + bad};
}

Outcome c3_gradcheck() {
  const auto t0 = Clock::now();
  auto m = nn::build_model<double>(nn::reduced_arch(), 1);
  nn::randomize_biases(m, 0.1, 1001);
  auto [x, y] = nn::random_batch<double>(m.arch, 4, 1);
  const auto r = nn::gradient_check(m, std::span<const double>(x), std::span<const int>(y), 1e-5, 1e-4);
  const double secs = seconds_since(t0);
  return {r.max_relative_error <= 1e-6 && secs <= 60.0 && r.checked == m.params.size(),
          std::to_string(r.checked) + " parameters, max relative error " + fmt(r.max_relative_error, 3) + " (<= 1e-6, denominator floor 1e-4), " + fmt(secs, 3) +
              " s (<= 60)"};
}

Outcome c4_overfit(const Pipeline& p, const Options& opt) {
  if (!p.ok) return {false, "pipeline failed: " + p.error};
  const auto train_all = nn::load_images(p.manifest, Split::Train, opt.jobs);
  if (train_all.size() < 64) return {false, "fewer than 64 training images"};
  std::vector<std::size_t> idx(train_all.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(64);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(64);
  const auto subset = train_all.subset(idx);
  nn::TrainConfig cfg;
  cfg.epochs = 300;
  cfg.seed = 7;
  cfg.jobs = opt.jobs;
  int reached = 0;
  double last = 0;
  auto stop = [&](const nn::EpochRecord& r, const nn::Model<float>& m) {
    last = nn::accuracy(m, subset, opt.jobs);
    if (last == 1.0) {
      reached = r.epoch;
      return false;
    }
    return true;
  };
  (void)nn::train(nn::build_model(nn::ArchSpec::default_arch(), 7), subset, nullptr, cfg, nn::EpochCallback<float>(stop));
  return {reached > 0, reached > 0 ? "100% train accuracy on 64 samples at epoch " + std::to_string(reached) + " (<= 300, lr 1e-4, batch 128)"
                                   : "train accuracy " + fmt(last) + " after 300 epochs"};
}

Outcome c5_ch_physics() {
  ChParams p;
  p.seed = 5;
  p.blend_mean = 0.1;
  ChIntegrator integ(p);
  ChState s = integ.init();
  const double m0 = mean(s.phi);
  double e_prev = integ.energy(s.phi);
  double worst_mass = 0, worst_rise = -std::numeric_limits<double>::infinity();
  int rises = 0;
  for (int k = 0; k < 10000; ++k) {
    integ.step(s);
    worst_mass = std::max(worst_mass, std::abs(mean(s.phi) - m0));
    const double e = integ.energy(s.phi);
    const double rise = (e - e_prev) / std::abs(e_prev);
    worst_rise = std::max(worst_rise, rise);
    if (rise > 1e-6) ++rises;
    e_prev = e;
  }
  ChParams u;
  u.noise_amp = 0.0;
  u.blend_mean = 0.3;
  ChIntegrator ui(u);
  ChState us = ui.init();
  for (int k = 0; k < 100; ++k) ui.step(us);
  const bool fixed = std::all_of(us.phi.data.begin(), us.phi.data.end(), [](double v) { return v == 0.3; });
  return {worst_mass <= 1e-8 && rises == 0 && fixed, "10000 steps: max |mean drift| " + fmt(worst_mass, 3) + " (<= 1e-8), max relative energy rise per step " +
                                                         fmt(worst_rise, 3) + " (<= 1e-6, violations " + std::to_string(rises) + "), uniform field fixed point " +
                                                         (fixed ? "exact" : "violated")};
}

Outcome c6_oracle(const Pipeline& p) {
  const OracleParams op;
  std::string detail;
  bool pass = true;
  for (int t : {20, 50, 80}) {
    const auto r = evaluate(Morphology(presets::bilayer_slab(t + 1)), op);
    const double expect = op.diffusion_length / t * std::tanh(t / op.diffusion_length);
    const double rel = std::abs(r.eta_diss - expect) / expect;
    pass = pass && rel <= 0.05;
    detail += "t=" + std::to_string(t) + " eta " + fmt(r.eta_diss) + " vs " + fmt(expect) + " (" + fmt(100 * rel, 2) + "%); ";
  }
  std::vector<Morphology> samples{Morphology(presets::blob_field()), Morphology(presets::columns(7)), Morphology(presets::blocking_layer())};
  if (p.ok) {
    for (std::size_t i = 0; i < p.manifest.samples.size() && samples.size() < 23; i += 97) samples.push_back(read_pgm(p.manifest.resolve(p.manifest.samples[i])));
  }
  double worst_flux = 0, worst_mirror = 0;
  for (const auto& m : samples) {
    const auto b = binarize(m);
    const auto sol = solve_exciton(b, op);
    double flux = 0, dens = 0;
    for (const auto& f : sol.interface_flux) flux += f.flux;
    for (double v : sol.density.data) dens += v;
    const double expect = op.generation * static_cast<double>(b.donor_count()) - dens;
    if (expect > 0) worst_flux = std::max(worst_flux, std::abs(flux - expect) / expect);
    const double a = evaluate(m, op).jsc, c = evaluate(mirror(m), op).jsc;
    worst_mirror = std::max(worst_mirror, std::abs(a - c) / std::max(std::abs(a), 1e-300));
  }
  const double all_donor = evaluate(Morphology(101, 101, 1.0), op).jsc;
  pass = pass && worst_flux <= 1e-6 && worst_mirror <= 1e-6 && all_donor == 0.0;
  detail += "flux conservation " + fmt(worst_flux, 3) + ", mirror " + fmt(worst_mirror, 3) + " over " + std::to_string(samples.size()) +
            " morphologies (<= 1e-6); all-donor jsc " + fmt(all_donor);
  return {pass, detail};
}

Outcome c7_columnar(const Pipeline& p) {
  if (!p.ok) return {false, "pipeline failed: " + p.error};
  int hits = 0, total = 0;
  std::vector<double> jsc;
  std::string trace;
  for (int w = 2; w <= 50; ++w) {
    const Morphology m(presets::columns(w));
    const double j = evaluate(m, OracleParams{}).jsc;
    jsc.push_back(j);
    const int oc = assign_class(j, p.binning);
    const int cc = nn::predict(*p.model, m).class_id;
    hits += std::abs(oc - cc) <= 1;
    ++total;
    if (w <= 6 || w % 8 == 2) trace += " w" + std::to_string(w) + ":" + std::to_string(oc) + "/" + std::to_string(cc);
  }
  // Unimodal: once the sequence strictly decreases it never strictly increases again.
  bool falling = false, unimodal = true;
  for (std::size_t i = 1; i < jsc.size(); ++i) {
    if (jsc[i] < jsc[i - 1]) falling = true;
    if (falling && jsc[i] > jsc[i - 1]) unimodal = false;
  }
  const double frac = static_cast<double>(hits) / total;
  const auto peak = std::max_element(jsc.begin(), jsc.end()) - jsc.begin() + 2;
  return {frac >= 0.70 && unimodal, "CNN within +-1 of oracle class for " + std::to_string(hits) + "/" + std::to_string(total) + " widths (" + fmt(frac, 3) +
                                        " >= 0.70); oracle jsc(w) " + (unimodal ? "unimodal" : "NOT unimodal") + ", peak at w=" + std::to_string(peak) +
                                        "; oracle/CNN class:" + trace};
}

Outcome c8_saliency(const Pipeline& p) {
  if (!p.ok) return {false, "pipeline failed: " + p.error};
  const auto idx = p.manifest.indices_of(Split::Test);
  double sum = 0;
  int finite = 0, infinite = 0;
  for (auto i : idx) {
    const auto m = read_pgm(p.manifest.resolve(p.manifest.samples[i]));
    const double r = interface_concentration(saliency(*p.model, m), binarize(m));
    if (std::isinf(r)) {
      ++infinite;
    } else {
      sum += r;
      ++finite;
    }
  }
  const double avg = finite ? sum / finite : 0.0;
  return {finite + infinite >= 100 && avg >= 1.5, "mean interface concentration " + fmt(avg) + " (>= 1.5) over " + std::to_string(finite) +
                                                      " test morphologies (" + std::to_string(infinite) + " infinite ratios excluded)"};
}

Outcome c9_pbil_mechanics() {
  bool pass = true;
  std::string detail = "OneMax 8x8 iterations to mean(P) >= 0.95:";
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    PbilParams pp;
    pp.n = 50;
    pp.n_b = 5;
    pp.l_r = 0.1;
    pp.mutation_prob = 0.0;
    pp.smoothing_radius = 0;
    pp.max_iters = 200;
    pp.improvement_tol = 0.0;
    pp.improvement_window = 1000;
    pp.seed = seed;
    int reached = -1;
    const auto s = pbil_run(pbil_init_uniform(8, 8, pp, onemax()), pp, onemax(), 1, [&](const PbilState& st) {
      const double m = std::accumulate(st.p.data.begin(), st.p.data.end(), 0.0) / static_cast<double>(st.p.data.size());
      if (reached < 0 && m >= 0.95) reached = st.iteration;
      return true;
    });
    bool monotone = true;
    for (std::size_t k = 1; k < s.history.size(); ++k) monotone = monotone && s.history[k].best_fitness >= s.history[k - 1].best_fitness;
    pass = pass && reached > 0 && monotone;
    detail += " " + (reached > 0 ? std::to_string(reached) : std::string("never")) + (monotone ? "" : "(non-monotone best)");
  }
  PbilParams up;
  Grid<double> prob(5, 5), elite(5, 5);
  std::mt19937_64 rng(3);
  for (auto& v : prob.data) v = 0.05 + 0.9 * detail::unit_uniform(rng);
  for (auto& v : elite.data) v = static_cast<double>(rng() % 11) / 10.0;
  auto expect = prob;
  for (std::size_t i = 0; i < expect.data.size(); ++i) expect.data[i] = std::clamp(prob.data[i] * (1.0 - up.l_r) + elite.data[i] * up.l_r, up.p_min, up.p_max);
  pbil_update(prob, elite, up);
  const bool exact = prob.data == expect.data;
  pass = pass && exact;
  detail += std::string("; best fitness monotone; update formula ") + (exact ? "exact" : "MISMATCH");
  return {pass, detail};
}

Outcome c10_design(const Pipeline& p, const Options& opt) {
  if (!p.ok) return {false, "pipeline failed: " + p.error};
  PbilParams pp;
  pp.n = 100;
  pp.max_iters = 50;
  pp.seed = 1;
  const auto f = cnn_expected_class(p.model);
  const auto t0 = Clock::now();
  const auto s = pbil_run(pbil_init(Morphology(presets::bilayer()), pp, f), pp, f, opt.jobs);
  const double secs = seconds_since(t0);
  const double gain = s.best_fitness - s.history.front().best_fitness;
  return {gain >= 2.0 && secs <= 900.0, "best expected class " + fmt(s.history.front().best_fitness) + " -> " + fmt(s.best_fitness) + " (gain " + fmt(gain) +
                                            " >= 2.0) in " + std::to_string(s.iteration) + " iterations, " + fmt(secs, 4) + " s (<= 900)"};
}

Outcome c11_blocking(const Pipeline& p) {
  if (!p.ok) return {false, "pipeline failed: " + p.error};
  const Morphology open(presets::columns(4)), blocked(presets::blocking_layer());
  const auto ro = evaluate(open, OracleParams{}), rb = evaluate(blocked, OracleParams{});
  const int oo = assign_class(ro.jsc, p.binning), ob = assign_class(rb.jsc, p.binning);
  const int co = nn::predict(*p.model, open).class_id, cb = nn::predict(*p.model, blocked).class_id;
  return {oo - ob >= 2 && co - cb >= 1, "oracle class " + std::to_string(oo) + " -> " + std::to_string(ob) + " (jsc " + fmt(ro.jsc) + " -> " + fmt(rb.jsc) +
                                            ", drop >= 2); CNN class " + std::to_string(co) + " -> " + std::to_string(cb) + " (drop >= 1)"};
}

Outcome c12_serialization(const Pipeline& p, const Options& opt) {
  std::string detail;
  bool pass = true;
  const fs::path dir = opt.work_dir / "serialization";
  fs::create_directories(dir);

  const auto model = p.ok ? *p.model : nn::build_model(nn::ArchSpec::default_arch(), 3);
  nn::save_weights(model, dir / "copy.bin");
  const bool weights = nn::load_weights(dir / "copy.bin").params == model.params &&
                       (!p.ok || read_file_bytes(dir / "copy.bin") == read_file_bytes(p.model_path));
  pass = pass && weights;
  detail += std::string("weights round-trip ") + (weights ? "bitwise" : "MISMATCH");

  ChParams cp;
  cp.seed = 11;
  cp.snapshot_steps = {100, 400};
  const auto snaps = ch_run(cp);
  double worst = 0;
  for (const auto& s : snaps) {
    const auto back = decode_pgm(encode_pgm(s.morphology));
    for (std::size_t i = 0; i < back.values().size(); ++i) worst = std::max(worst, std::abs(back.values()[i] - s.morphology.values()[i]));
  }
  pass = pass && worst <= 1.0 / 510.0;
  detail += "; PGM max error " + fmt(worst, 3) + " (<= " + fmt(1.0 / 510.0, 3) + ")";

  const auto snaps2 = ch_run(cp);
  bool same = snaps.size() == snaps2.size();
  for (std::size_t i = 0; same && i < snaps.size(); ++i) same = std::ranges::equal(snaps[i].morphology.values(), snaps2[i].morphology.values());

  nn::ImageSet set{{101, 101, 1}, {}, {}};
  for (const auto& s : snaps) set.add(s.morphology, 1);
  for (const auto& s : snaps) set.add(mirror(s.morphology), 2);
  nn::TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 2;
  tc.seed = 4;
  const auto t1 = nn::train(nn::build_model(nn::ArchSpec::default_arch(), 4), set, nullptr, tc);
  const auto t2 = nn::train(nn::build_model(nn::ArchSpec::default_arch(), 4), set, nullptr, tc);
  same = same && t1.final_model.params == t2.final_model.params && t1.history[1].train_loss == t2.history[1].train_loss;

  PbilParams pp;
  pp.n = 12;
  pp.n_b = 3;
  pp.max_iters = 4;
  pp.seed = 8;
  const auto f = oracle_jsc();
  const auto init = pbil_init(Morphology(presets::bilayer(40, 40)), pp, f);
  const auto a = pbil_run(init, pp, f, 1), b = pbil_run(init, pp, f, 1);
  same = same && a.p.data == b.p.data && a.best_fitness == b.best_fitness;
  const auto o1 = evaluate(snaps.back().morphology, OracleParams{}), o2 = evaluate(snaps.back().morphology, OracleParams{});
  same = same && o1.jsc == o2.jsc;
  pass = pass && same;
  detail += std::string("; fixed-seed serial CH/train/PBIL/oracle reruns ") + (same ? "bitwise identical" : "DIFFER");
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  CLI::App app{"acceptance suite"};
  app.add_option("--work-dir", opt.work_dir, "scratch directory for the pipeline run")->capture_default_str();
  app.add_option("--runs", opt.runs, "simulation runs")->capture_default_str();
  app.add_option("--augment", opt.augment, "cyclic shifts per snapshot (plus the mirror)")->capture_default_str();
  app.add_option("--jobs", opt.jobs, "worker threads")->capture_default_str();
  app.add_flag("--reuse", opt.reuse, "reuse a previous pipeline run in --work-dir (also env DLSP_ACCEPT_REUSE=1)");
  CLI11_PARSE(app, argc, argv);
  if (const char* r = std::getenv("DLSP_ACCEPT_REUSE"); r && std::string(r) == "1") opt.reuse = true;
  opt.work_dir = fs::absolute(opt.work_dir);

  std::cout << "acceptance: work dir " << opt.work_dir.string() << ", " << opt.jobs << " thread(s)" << (opt.reuse ? ", reuse" : "") << std::endl;
  const auto pipeline = build_pipeline(opt);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"pipeline end-to-end", [&] { return c1_pipeline(pipeline, opt); }},
      {"confusion diagonal dominance", [&] { return c2_confusion(pipeline); }},
      {"gradient correctness", [] { return c3_gradcheck(); }},
      {"overfit 64 samples", [&] { return c4_overfit(pipeline, opt); }},
      {"CH physics", [] { return c5_ch_physics(); }},
      {"oracle analytics", [&] { return c6_oracle(pipeline); }},
      {"out-of-sample columnar sweep", [&] { return c7_columnar(pipeline); }},
      {"saliency interface concentration", [&] { return c8_saliency(pipeline); }},
      {"PBIL mechanics", [] { return c9_pbil_mechanics(); }},
      {"automated design from bilayer", [&] { return c10_design(pipeline, opt); }},
      {"blocking-layer regression", [&] { return c11_blocking(pipeline); }},
      {"serialization and reproducibility", [&] { return c12_serialization(pipeline, opt); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("acceptance: %zu passed, %d failed\n", criteria.size() - failed, failed);
  return failed ? 1 : 0;
}
