#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "dlsp/design.hpp"
#include "dlsp/interpret.hpp"
#include "dlsp/nn/model.hpp"
#include "dlsp/nn/train.hpp"
#include "dlsp/oracle.hpp"
#include "dlsp/presets.hpp"
#include "dlsp/report.hpp"

// After Eigen: <resolv.h> defines a _res macro that collides with Eigen identifiers.
#include <httplib.h>
#include <nlohmann/json.hpp>

namespace dlsp::server {

using nlohmann::json;

// ---------------------------------------------------------------------------
// base64 (RFC 4648, padded)

inline std::string base64_encode(std::span<const std::uint8_t> bytes) {
  static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    for (int s = 18; s >= 0; s -= 6) out.push_back(table[(v >> s) & 63]);
  }
  if (const auto rest = bytes.size() - i; rest > 0) {
    std::uint32_t v = bytes[i] << 16;
    if (rest == 2) v |= bytes[i + 1] << 8;
    out.push_back(table[(v >> 18) & 63]);
    out.push_back(table[(v >> 12) & 63]);
    out.push_back(rest == 2 ? table[(v >> 6) & 63] : '=');
    out.push_back('=');
  }
  return out;
}

inline std::optional<std::vector<std::uint8_t>> base64_decode(std::string_view text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) return std::nullopt;
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
      } else if (pad > 0 || (v[k] = value(c)) < 0) {
        return std::nullopt;
      }
    }
    const std::uint32_t n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(n >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((n >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(n & 0xff));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid payloads: {height, width, grid_b64}, byte = round(value * 255)

class BadRequest : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline json encode_grid(const Grid<double>& g) {
  std::vector<std::uint8_t> bytes(g.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize_byte(std::clamp(g.data[i], 0.0, 1.0));
  return {{"height", g.height}, {"width", g.width}, {"grid_b64", base64_encode(bytes)}};
}

inline Grid<double> decode_grid(const json& j) {
  if (!j.is_object()) throw BadRequest("grid payload must be an object");
  for (const char* k : {"height", "width", "grid_b64"}) {
    if (!j.contains(k)) throw BadRequest(std::string("grid payload missing '") + k + "'");
  }
  if (!j["height"].is_number_integer() || !j["width"].is_number_integer() || !j["grid_b64"].is_string()) throw BadRequest("grid payload has wrong field types");
  const int h = j["height"].get<int>(), w = j["width"].get<int>();
  if (h < 3 || w < 3 || h > 4096 || w > 4096) throw BadRequest("grid dimensions out of range");
  const auto bytes = base64_decode(j["grid_b64"].get<std::string>());
  if (!bytes) throw BadRequest("grid_b64 is not valid base64");
  if (bytes->size() != static_cast<std::size_t>(h) * w) {
    throw BadRequest("grid_b64 decodes to " + std::to_string(bytes->size()) + " bytes, expected " + std::to_string(h * w));
  }
  Grid<double> g(h, w);
  for (std::size_t i = 0; i < bytes->size(); ++i) g.data[i] = (*bytes)[i] / 255.0;
  return g;
}

// ---------------------------------------------------------------------------
// Design jobs

struct DesignJob {
  std::string id;
  std::atomic<bool> cancel{false};
  std::thread worker;

  mutable std::mutex mu;
  std::string status = "running";
  std::string reason;
  double initial_fitness = 0.0;
  std::optional<PbilState> snapshot;  // guarded by mu; replaced whole after each iteration

  [[nodiscard]] json to_json() const {
    std::lock_guard lock(mu);
    json j{{"id", id}, {"status", status}};
    if (!reason.empty()) j["reason"] = reason;
    if (!snapshot) {
      j["iteration"] = 0;
      j["fitness_history"] = json::array();
      return j;
    }
    json hist = json::array();
    for (const auto& r : snapshot->history) hist.push_back({{"iter", r.iteration}, {"best_fitness", r.best_fitness}, {"elite_mean", r.elite_mean}});
    j["iteration"] = snapshot->iteration;
    j["initial_fitness"] = initial_fitness;
    j["best_fitness"] = snapshot->best_fitness;
    j["fitness_history"] = std::move(hist);
    j["p"] = encode_grid(snapshot->p);
    j["best_sample"] = encode_grid(snapshot->best_sample.to_morphology().grid());
    return j;
  }
};

struct ServiceConfig {
  std::optional<std::filesystem::path> model_path;
  std::optional<std::filesystem::path> ui_dir;
  int max_jobs = 4;
  int jobs = 1;  // fitness workers per design job
  OracleParams oracle;
  BinningSpec binning{0.2, 7.0, kNumClasses};
  PbilParams pbil;
};

struct Response {
  int status = 200;
  std::string body;
};

/// Request handling, independent of the transport so it can be exercised directly.
class Service {
 public:
  explicit Service(ServiceConfig cfg, std::shared_ptr<const nn::Model<float>> model = nullptr, std::string model_digest = {})
      : cfg_(std::move(cfg)), model_(std::move(model)), digest_(std::move(model_digest)) {}

  /// Loads weights and the `<model>.binning` sidecar when present.
  static Service from_config(ServiceConfig cfg) {
    std::shared_ptr<const nn::Model<float>> model;
    std::string digest;
    if (cfg.model_path) {
      const auto bytes = read_file_bytes(*cfg.model_path);
      model = std::make_shared<const nn::Model<float>>(nn::decode_weights(bytes, nn::ArchSpec::default_arch()));
      digest = hex64(fnv1a64(bytes.data(), bytes.size()));
      if (const auto side = binning_sidecar_path(*cfg.model_path); std::filesystem::exists(side)) cfg.binning = binning_from_kv(read_key_values(side));
    }
    return Service(std::move(cfg), std::move(model), std::move(digest));
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;
  Service(Service&& o) noexcept : cfg_(std::move(o.cfg_)), model_(std::move(o.model_)), digest_(std::move(o.digest_)) {}

  ~Service() { shutdown(); }

  /// Cancels running jobs and joins their workers.
  void shutdown() {
    std::map<std::string, std::shared_ptr<DesignJob>> jobs;
    {
      std::lock_guard lock(jobs_mu_);
      jobs = jobs_;
    }
    for (auto& [id, job] : jobs) {
      job->cancel = true;
      if (job->worker.joinable()) job->worker.join();
    }
  }

  [[nodiscard]] const ServiceConfig& config() const { return cfg_; }

  Response health() const { return ok({{"status", "ok"}, {"model_loaded", model_ != nullptr}, {"model_digest", digest_}}); }

  Response predict(const std::string& body) const {
    return guarded([&] {
      const auto model = need_model();
      const auto g = decode_grid(parse(body));
      return ok(to_json(nn::predict(*model, morphology_for(*model, g))));
    });
  }

  Response saliency(const std::string& body) const {
    return guarded([&] {
      const auto model = need_model();
      const auto req = parse(body);
      const auto g = decode_grid(req);
      std::optional<int> target;
      if (req.contains("target") && !req["target"].is_null()) {
        if (!req["target"].is_number_integer()) throw BadRequest("target must be an integer");
        target = req["target"].get<int>();
        if (*target < 0 || *target >= model->arch.classes) throw BadRequest("target class out of range");
      }
      const auto s = dlsp::saliency(*model, morphology_for(*model, g), target);
      auto j = encode_grid(s.values);
      j["map_b64"] = j["grid_b64"];
      j.erase("grid_b64");
      j["target"] = s.target_class;
      return ok(j);
    });
  }

  Response oracle(const std::string& body) const {
    return guarded([&] {
      const auto g = decode_grid(parse(body));
      try {
        const auto r = evaluate(Morphology(g), cfg_.oracle);
        return ok(to_json(r, assign_class(r.jsc, cfg_.binning)));
      } catch (const OracleError& e) {
        if (e.code() != OracleError::Code::SolverDiverged) throw;
        return Response{422, json{{"error", e.what()}, {"iterations", e.iterations()}}.dump()};
      }
    });
  }

  Response design_start(const std::string& body) {
    return guarded([&]() -> Response {
      auto model = need_model();
      const auto req = body.empty() ? json::object() : parse(body);
      PbilParams params = cfg_.pbil;
      if (req.contains("params")) apply_overrides(params, req["params"]);
      params.validate();

      const auto& shape = model->arch.input;
      std::optional<Grid<double>> init;
      bool uniform = false;
      const json init_j = req.contains("init") ? req["init"] : json("bilayer");
      if (init_j.is_string()) {
        const auto name = init_j.get<std::string>();
        if (name == "uniform") {
          uniform = true;
        } else if (auto p = presets::by_name(name, shape.h, shape.w)) {
          init = std::move(*p);
        } else {
          throw BadRequest("unknown init '" + name + "'");
        }
      } else {
        init = decode_grid(init_j);
        if (init->height != shape.h || init->width != shape.w) throw BadRequest("init grid does not match the model input size");
      }

      auto job = std::make_shared<DesignJob>();
      {
        std::lock_guard lock(jobs_mu_);
        int running = 0;
        for (const auto& [id, j] : jobs_) {
          std::lock_guard jl(j->mu);
          running += j->status == "running";
        }
        if (running >= cfg_.max_jobs) return Response{429, json{{"error", "too many running design jobs"}}.dump()};
        std::uniform_int_distribution<std::uint64_t> dist;
        job->id = hex64(dist(id_rng_));
        jobs_[job->id] = job;
      }
      const int workers = cfg_.jobs;
      job->worker = std::thread([job, model, params, init, uniform, workers, shape] {
        try {
          const auto f = cnn_expected_class(model);
          auto st = uniform ? pbil_init_uniform(shape.h, shape.w, params, f) : pbil_init(Morphology(*init), params, f);
          {
            std::lock_guard lock(job->mu);
            job->initial_fitness = st.best_fitness;
            job->snapshot = st;
          }
          auto observer = [&](const PbilState& s) {
            std::lock_guard lock(job->mu);
            job->snapshot = s;
            return !job->cancel.load();
          };
          if (!job->cancel) st = pbil_run(std::move(st), params, f, workers, observer);
          std::lock_guard lock(job->mu);
          job->snapshot = std::move(st);
          if (job->cancel) {
            job->status = "failed";
            job->reason = "cancelled";
          } else {
            job->status = "done";
          }
        } catch (const std::exception& e) {
          std::lock_guard lock(job->mu);
          job->status = "failed";
          job->reason = e.what();
        }
      });
      return ok({{"job_id", job->id}});
    });
  }

  Response design_get(const std::string& id) const {
    const auto job = find(id);
    if (!job) return Response{404, json{{"error", "unknown job id"}}.dump()};
    return ok(job->to_json());
  }

  Response design_cancel(const std::string& id) {
    const auto job = find(id);
    if (!job) return Response{404, json{{"error", "unknown job id"}}.dump()};
    job->cancel = true;
    if (job->worker.joinable() && job->worker.get_id() != std::this_thread::get_id()) {
      std::lock_guard lock(join_mu_);
      if (job->worker.joinable()) job->worker.join();
    }
    return ok(job->to_json());
  }

  /// Routes under /api plus static files from ui_dir at /.
  void mount(httplib::Server& http) {
    auto send = [](httplib::Response& res, const Response& r) {
      res.status = r.status;
      res.set_content(r.body, "application/json");
    };
    http.Get("/api/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
    http.Post("/api/predict", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, predict(req.body)); });
    http.Post("/api/saliency", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, saliency(req.body)); });
    http.Post("/api/oracle", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, oracle(req.body)); });
    http.Post("/api/design/start", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, design_start(req.body)); });
    http.Get(R"(/api/design/([0-9a-f]+))", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, design_get(req.matches[1])); });
    http.Delete(R"(/api/design/([0-9a-f]+))", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, design_cancel(req.matches[1])); });
    if (cfg_.ui_dir && !http.set_mount_point("/", cfg_.ui_dir->string())) {
      throw std::runtime_error("cannot serve UI directory " + cfg_.ui_dir->string());
    }
  }

 private:
  static Response ok(const json& j) { return {200, j.dump()}; }

  template <class F>
  static Response guarded(F&& f) {
    try {
      return f();
    } catch (const BadRequest& e) {
      return {400, json{{"error", e.what()}}.dump()};
    } catch (const MorphoError& e) {
      return {400, json{{"error", e.what()}}.dump()};
    } catch (const nn::NnError& e) {
      if (e.code() == nn::NnError::Code::ShapeMismatch) return {400, json{{"error", e.what()}}.dump()};
      return {500, json{{"error", e.what()}}.dump()};
    } catch (const ModelMissing& e) {
      return {503, json{{"error", e.what()}}.dump()};
    } catch (const std::invalid_argument& e) {
      return {400, json{{"error", e.what()}}.dump()};
    } catch (const std::exception& e) {
      return {500, json{{"error", e.what()}}.dump()};
    }
  }

  struct ModelMissing : std::runtime_error {
    ModelMissing() : std::runtime_error("no model loaded") {}
  };

  [[nodiscard]] std::shared_ptr<const nn::Model<float>> need_model() const {
    if (!model_) throw ModelMissing();
    return model_;
  }

  static json parse(const std::string& body) {
    auto j = json::parse(body, nullptr, false);
    if (j.is_discarded()) throw BadRequest("request body is not valid JSON");
    return j;
  }

  static Morphology morphology_for(const nn::Model<float>& model, const Grid<double>& g) {
    if (g.height != model.arch.input.h || g.width != model.arch.input.w) {
      throw BadRequest("grid is " + std::to_string(g.height) + "x" + std::to_string(g.width) + ", model expects " + std::to_string(model.arch.input.h) + "x" +
                       std::to_string(model.arch.input.w));
    }
    return Morphology(g);
  }

  static void apply_overrides(PbilParams& p, const json& o) {
    if (!o.is_object()) throw BadRequest("params must be an object");
    for (const auto& [key, v] : o.items()) {
      if (!v.is_number()) throw BadRequest("param '" + key + "' must be numeric");
      if (key == "n") p.n = v.get<int>();
      else if (key == "n_b") p.n_b = v.get<int>();
      else if (key == "l_r") p.l_r = v.get<double>();
      else if (key == "mutation_prob") p.mutation_prob = v.get<double>();
      else if (key == "mutation_shift") p.mutation_shift = v.get<double>();
      else if (key == "p_min") p.p_min = v.get<double>();
      else if (key == "p_max") p.p_max = v.get<double>();
      else if (key == "smoothing_radius") p.smoothing_radius = v.get<int>();
      else if (key == "max_iters") p.max_iters = v.get<int>();
      else if (key == "improvement_tol") p.improvement_tol = v.get<double>();
      else if (key == "improvement_window") p.improvement_window = v.get<int>();
      else if (key == "delta") p.delta = v.get<double>();
      else if (key == "seed") p.seed = v.get<std::uint64_t>();
      else throw BadRequest("unknown design parameter '" + key + "'");
    }
  }

  [[nodiscard]] std::shared_ptr<DesignJob> find(const std::string& id) const {
    std::lock_guard lock(jobs_mu_);
    const auto it = jobs_.find(id);
    return it == jobs_.end() ? nullptr : it->second;
  }

  ServiceConfig cfg_;
  std::shared_ptr<const nn::Model<float>> model_;
  std::string digest_;
  mutable std::mutex jobs_mu_;
  std::mutex join_mu_;
  std::map<std::string, std::shared_ptr<DesignJob>> jobs_;
  std::mt19937_64 id_rng_{std::random_device{}()};
};

/// Blocks until the server stops.
inline void serve(Service& service, const std::string& host, int port) {
  httplib::Server http;
  service.mount(http);
  if (!http.listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace dlsp::server
