#include "ofa/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ofa/checkpoint.hpp"
#include "ofa/cost.hpp"
#include "ofa/elastic.hpp"
#include "ofa/error.hpp"

namespace ofa {

using nlohmann::json;

ArchSpec ArchChoice::build() const {
  if (preset == "ofa_mbv3") return ArchSpec::ofa_mbv3(variant, width_multiplier, n_classes);
  if (preset == "miniature") {
    ArchSpec a = ArchSpec::miniature(variant, n_classes, blocks_per_stage);
    if (width_multiplier != 1.0) throw ConfigError("arch.width_multiplier must be 1.0 for the miniature preset");
    return a;
  }
  throw ConfigError("arch.preset must be ofa_mbv3 or miniature, got '" + preset + "'");
}

void to_json(json& j, const ArchChoice& a) {
  j = {{"preset", a.preset},
       {"variant", a.variant},
       {"width_multiplier", a.width_multiplier},
       {"n_classes", a.n_classes},
       {"blocks_per_stage", a.blocks_per_stage},
       {"arch_version", ArchSpec::kVersion}};
}

namespace {

ArchChoice parse_arch(const json& a) {
  if (a.at("arch_version").get<int>() != ArchSpec::kVersion)
    throw VersionError("arch_version " + a.at("arch_version").dump() + " is not supported");
  ArchChoice c;
  c.preset = a.at("preset").get<std::string>();
  c.variant = a.at("variant").get<std::string>();
  c.width_multiplier = a.at("width_multiplier").get<double>();
  c.n_classes = a.at("n_classes").get<int>();
  c.blocks_per_stage = a.at("blocks_per_stage").get<int>();
  return c;
}

void reject_unknown(const json& given, const json& known, const std::string& path);

}  // namespace

ArchChoice arch_choice_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("arch must be a JSON object");
  json base;
  to_json(base, ArchChoice{});
  reject_unknown(j, base, "arch");
  base.merge_patch(j);
  try {
    return parse_arch(base);
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("arch: ") + ex.what());
  }
}

void RunConfig::validate() const {
  if (!is_valid_variant(arch.variant)) throw ConfigError("arch.variant '" + arch.variant + "' is not a known variant");
  if (arch.width_multiplier <= 0.0) throw ConfigError("arch.width_multiplier must be positive");
  if (arch.n_classes != dataset.n_classes)
    throw ConfigError("arch.n_classes (" + std::to_string(arch.n_classes) + ") differs from dataset.n_classes (" +
                      std::to_string(dataset.n_classes) + ")");
  const ArchSpec a = arch.build();
  if (training.batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
  if (!(training.epoch_scale > 0.0)) throw ConfigError("training.epoch_scale must be positive");
  if (!(training.bn_momentum > 0.0f && training.bn_momentum <= 1.0f))
    throw ConfigError("training.bn_momentum must be in (0, 1]");
  const auto names = phase_names(a);
  auto known = [&](const std::string& n) { return std::find(names.begin(), names.end(), n) != names.end(); };
  for (const auto& [name, o] : training.phase_overrides) {
    if (!known(name)) throw ConfigError("phase override '" + name + "' is not part of the " + a.network_name() + " schedule");
    if (o.lr && !(*o.lr > 0.0)) throw ConfigError("phase override " + name + ".lr must be positive");
    if (o.epochs && *o.epochs < 1) throw ConfigError("phase override " + name + ".epochs must be >= 1");
    if (o.warmup_epochs && *o.warmup_epochs < 0) throw ConfigError("phase override " + name + ".warmup_epochs must be >= 0");
    if (o.n_subnets && *o.n_subnets < 0) throw ConfigError("phase override " + name + ".n_subnets must be >= 0");
  }
  if (!training.stop_after.empty() && !known(training.stop_after))
    throw ConfigError("training.stop_after '" + training.stop_after + "' is not a phase of " + a.network_name());
  if (distill.kd.kd_ratio < 0.0) throw ConfigError("distill.kd_ratio must be >= 0");
  if (!(distill.kd.temperature > 0.0f)) throw ConfigError("distill.temperature must be positive");
  if (eval.batch_size < 1) throw ConfigError("eval.batch_size must be >= 1");
  if (eval.bn_calibration_batches < 0) throw ConfigError("eval.bn_calibration_batches must be >= 0");
}

RunConfig preset_config(std::string_view name) {
  RunConfig c;
  c.preset = std::string(name);
  if (name == "desk") {
    c.dataset.val_fraction = 0.0;  // 8 x 50 = 400 training images
    c.training.phase_overrides["Full"].lr = 0.05;
    c.eval.bn_calibration_batches = 2;
    c.output_dir = "runs/desk";
    return c;
  }
  if (name == "reference") {
    c.arch.n_classes = 200;
    c.dataset.kind = "tiny_imagenet";
    c.dataset.n_classes = 200;
    c.dataset.train_per_class = 0;
    c.dataset.test_per_class = 0;
    c.dataset.augment = true;
    c.training.batch_size = 200;
    c.training.epoch_scale = 1.0;
    c.eval.batch_size = 200;
    c.eval.bn_calibration_batches = 10;
    c.output_dir = "runs/reference";
    return c;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected desk or reference)");
}

void to_json(json& j, const RunConfig& c) {
  json overrides = json::object();
  for (const auto& [name, o] : c.training.phase_overrides) {
    json e = json::object();
    if (o.lr) e["lr"] = *o.lr;
    if (o.epochs) e["epochs"] = *o.epochs;
    if (o.warmup_epochs) e["warmup_epochs"] = *o.warmup_epochs;
    if (o.n_subnets) e["n_subnets"] = *o.n_subnets;
    overrides[name] = e;
  }
  j = {{"seed", c.seed},
       {"preset", c.preset},
       {"arch", c.arch},
       {"dataset", c.dataset},
       {"training",
        {{"batch_size", c.training.batch_size},
         {"epoch_scale", c.training.epoch_scale},
         {"phase_overrides", overrides},
         {"per_slot_sampling", c.training.per_slot_sampling},
         {"bn_momentum", c.training.bn_momentum},
         {"stop_after", c.training.stop_after}}},
       {"distill",
        {{"teacher", distill::teacher_kind_name(c.distill.teacher)},
         {"kd_ratio", c.distill.kd.kd_ratio},
         {"temperature", c.distill.kd.temperature},
         {"divergence", distill::divergence_name(c.distill.kd.divergence)},
         {"exit_weights", distill::weight_scheme_name(c.distill.exit_weights)}}},
       {"eval",
        {{"ensemble_exits", c.eval.ensemble_exits},
         {"bn_calibration_batches", c.eval.bn_calibration_batches},
         {"batch_size", c.eval.batch_size}}},
       {"output_dir", c.output_dir}};
}

namespace {

void reject_unknown(const json& given, const json& known, const std::string& path) {
  for (const auto& [key, value] : given.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!known.contains(key)) throw ConfigError("unknown run config field '" + where + "'");
    if (where == "training.phase_overrides") {
      if (!value.is_object()) throw ConfigError("training.phase_overrides must be an object");
      const json fields = {{"lr", 0}, {"epochs", 0}, {"warmup_epochs", 0}, {"n_subnets", 0}};
      for (const auto& [phase, o] : value.items()) {
        if (!o.is_object()) throw ConfigError("phase override '" + phase + "' must be an object");
        reject_unknown(o, fields, where + "." + phase);
      }
      continue;
    }
    if (value.is_object() && known.at(key).is_object()) reject_unknown(value, known.at(key), where);
  }
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  if (!j.contains("seed")) throw ConfigError("run config is missing the required field 'seed'");
  RunConfig c;
  try {
    const std::string preset = j.value("preset", std::string());
    json base;
    to_json(base, preset.empty() ? RunConfig{} : preset_config(preset));
    reject_unknown(j, base, "");
    json merged = base;
    merged.merge_patch(j);
    if (j.contains("training") && j["training"].contains("phase_overrides"))
      merged["training"]["phase_overrides"] = j["training"]["phase_overrides"];

    c.seed = merged.at("seed").get<uint64_t>();
    c.preset = preset;
    c.arch = parse_arch(merged.at("arch"));
    c.dataset = merged.at("dataset").get<data::DatasetSpec>();
    const json& t = merged.at("training");
    c.training.batch_size = t.at("batch_size").get<int>();
    c.training.epoch_scale = t.at("epoch_scale").get<double>();
    for (const auto& [name, o] : t.at("phase_overrides").items()) {
      PhaseOverride po;
      if (o.contains("lr")) po.lr = o["lr"].get<double>();
      if (o.contains("epochs")) po.epochs = o["epochs"].get<int>();
      if (o.contains("warmup_epochs")) po.warmup_epochs = o["warmup_epochs"].get<int>();
      if (o.contains("n_subnets")) po.n_subnets = o["n_subnets"].get<int>();
      c.training.phase_overrides[name] = po;
    }
    c.training.per_slot_sampling = t.at("per_slot_sampling").get<bool>();
    c.training.bn_momentum = t.at("bn_momentum").get<float>();
    c.training.stop_after = t.at("stop_after").get<std::string>();
    const json& d = merged.at("distill");
    c.distill.teacher = distill::parse_teacher_kind(d.at("teacher").get<std::string>());
    c.distill.kd.kd_ratio = d.at("kd_ratio").get<double>();
    c.distill.kd.temperature = d.at("temperature").get<float>();
    c.distill.kd.divergence = distill::parse_divergence(d.at("divergence").get<std::string>());
    c.distill.exit_weights = distill::parse_weight_scheme(d.at("exit_weights").get<std::string>());
    const json& e = merged.at("eval");
    c.eval.ensemble_exits = e.at("ensemble_exits").get<bool>();
    c.eval.bn_calibration_batches = e.at("bn_calibration_batches").get<int>();
    c.eval.batch_size = e.at("batch_size").get<int>();
    c.output_dir = merged.at("output_dir").get<std::string>();
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("run config: ") + ex.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "cannot open run config");
  json j;
  try {
    in >> j;
  } catch (const json::exception& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
  return run_config_from_json(j);
}

std::vector<PhaseSpec> run_phases(const RunConfig& cfg, const ArchSpec& arch) {
  auto phases = phase_sequence(arch);
  const double s = cfg.training.epoch_scale;
  for (auto& p : phases) {
    if (auto it = cfg.training.phase_overrides.find(p.name); it != cfg.training.phase_overrides.end()) {
      const auto& o = it->second;
      if (o.lr) p.lr = *o.lr;
      if (o.epochs) p.epochs = *o.epochs;
      if (o.warmup_epochs) p.warmup_epochs = *o.warmup_epochs;
      if (o.n_subnets) p.n_subnets = *o.n_subnets;
    }
    p.epochs = std::max(1, static_cast<int>(std::lround(p.epochs * s)));
    p.warmup_epochs = std::min(static_cast<int>(std::lround(p.warmup_epochs * s)), p.epochs - 1);
  }
  return phases;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

struct BatchCache {
  int resolution = 0;
  std::vector<Tensor> inputs;
  std::vector<std::vector<int>> labels;
};

void fill_cache(BatchCache& cache, const data::Dataset& d, const data::Normalization& norm, int batch_size, int r,
                size_t max_batches) {
  if (cache.resolution == r) return;
  cache = {};
  cache.resolution = r;
  auto batches = data::sequential_batches(d.size(), batch_size);
  if (batches.size() > max_batches) batches.resize(max_batches);
  for (const auto& b : batches) {
    cache.inputs.push_back(data::resize_batch(data::batch_tensor(d, b, norm), r));
    cache.labels.push_back(data::batch_labels(d, b));
  }
}

std::vector<int> predict(const std::vector<Tensor>& logits, const EvalOptions& eval, distill::WeightScheme scheme) {
  if (eval.ensemble_exits && logits.size() > 1)
    return distill::aep_predict(logits, distill::exit_weights(static_cast<int>(logits.size()), scheme));
  const Tensor& z = logits.back();
  const int64_t b = z.dim(0), c = z.dim(1);
  std::vector<int> out(static_cast<size_t>(b));
  auto d = z.data();
  for (int64_t i = 0; i < b; ++i) {
    const float* row = d.data() + i * c;
    out[static_cast<size_t>(i)] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

double accuracy_on(const std::function<std::vector<Tensor>(const Tensor&)>& fwd, const BatchCache& test,
                   const EvalOptions& eval, distill::WeightScheme scheme) {
  int64_t correct = 0, total = 0;
  for (size_t i = 0; i < test.inputs.size(); ++i) {
    const auto pred = predict(fwd(test.inputs[i]), eval, scheme);
    for (size_t k = 0; k < pred.size(); ++k) correct += pred[k] == test.labels[i][k];
    total += static_cast<int64_t>(pred.size());
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

double evaluate_cached(const Supernet& net, const SubnetConfig& cfg, const BatchCache& test, const BatchCache* calib,
                       const EvalOptions& eval, distill::WeightScheme scheme) {
  NoGradGuard ng;
  ExecOptions opt;
  opt.mode = ops::NormMode::eval;
  if (calib && !calib->inputs.empty()) {
    auto sub = elastic::extract_subnet(net, cfg);
    sub.recalibrate_norms(calib->inputs);
    return accuracy_on([&](const Tensor& x) { return sub.forward(x, opt); }, test, eval, scheme);
  }
  return accuracy_on([&](const Tensor& x) { return net.forward(x, cfg, opt); }, test, eval, scheme);
}

}  // namespace

double evaluate_config(const Supernet& net, const SubnetConfig& cfg, const data::Dataset& test,
                       const data::Normalization& norm, const EvalOptions& eval, distill::WeightScheme scheme,
                       const data::Dataset* calibration) {
  BatchCache t, c;
  fill_cache(t, test, norm, eval.batch_size, cfg.resolution, SIZE_MAX);
  const bool calibrate = calibration && eval.bn_calibration_batches > 0;
  if (calibrate)
    fill_cache(c, *calibration, norm, eval.batch_size, cfg.resolution,
               static_cast<size_t>(eval.bn_calibration_batches));
  return evaluate_cached(net, cfg, t, calibrate ? &c : nullptr, eval, scheme);
}

PhaseReport evaluate_sweep(const Supernet& net, std::string_view phase, const data::Dataset& test,
                           const data::Normalization& norm, const EvalOptions& eval, distill::WeightScheme scheme,
                           const data::Dataset* calibration) {
  PhaseReport rep;
  rep.phase = std::string(phase);
  const auto& arch = net.arch();
  const SubnetConfig maximal = SubnetConfig::maximal(arch, 64);
  const bool calibrate = calibration && eval.bn_calibration_batches > 0;
  BatchCache t, c;
  bool saw_maximal = false;
  for (const auto& cfg : enumerate_space(phase, arch)) {
    fill_cache(t, test, norm, eval.batch_size, cfg.resolution, SIZE_MAX);
    if (calibrate)
      fill_cache(c, *calibration, norm, eval.batch_size, cfg.resolution,
                 static_cast<size_t>(eval.bn_calibration_batches));
    SubnetRecord rec;
    rec.config = cfg;
    rec.key = cfg.key();
    rec.accuracy = evaluate_cached(net, cfg, t, calibrate ? &c : nullptr, eval, scheme);
    const Cost cost = count_cost(arch, cfg);
    rec.params = cost.params;
    rec.macs = cost.macs;
    if (cfg == maximal) {
      rep.maximal_accuracy = rec.accuracy;
      saw_maximal = true;
    }
    rep.subnets.push_back(std::move(rec));
  }
  if (!saw_maximal) throw Error(ErrorKind::internal, "maximal config missing from the " + rep.phase + " sweep");
  summarize(rep);
  return rep;
}

// ---------------------------------------------------------------------------
// Run checkpoints

namespace {

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

void set_rng_state(std::mt19937_64& rng, const std::string& state) {
  std::istringstream s(state);
  s >> rng;
  if (!s) throw FormatError("checkpoint RNG state is corrupt");
}

json run_config_json(const RunConfig& cfg) {
  json j;
  to_json(j, cfg);
  return j;
}

/// The fields that shape the computation; output_dir and stop_after may
/// legitimately differ between the interrupted and the resumed invocation.
json identity_of(json j) {
  j.erase("output_dir");
  j["training"].erase("stop_after");
  return j;
}

struct RunState {
  size_t next_phase = 0;
  int64_t global_epoch = 0;
  std::vector<PhaseReport> reports;
};

void save_run(const std::filesystem::path& path, const RunConfig& cfg, const Supernet& net, const Sgd& opt,
              const std::mt19937_64& rng, const distill::Teacher& teacher, const RunState& st) {
  checkpoint::Container c;
  c.kind = "run";
  json reports = json::array();
  for (const auto& r : st.reports) reports.push_back(to_json(r));
  c.meta = {{"run_config", run_config_json(cfg)},
            {"arch", net.arch()},
            {"phase", st.reports.empty() ? std::string() : st.reports.back().phase},
            {"next_phase", st.next_phase},
            {"global_epoch", st.global_epoch},
            {"rng", rng_state(rng)},
            {"reports", reports},
            {"teacher", {{"kind", distill::teacher_kind_name(teacher.kind())},
                         {"extractions", teacher.extractions()},
                         {"has_snapshot", teacher.has_snapshot()}}}};
  checkpoint::put_supernet(c, "supernet/", net);
  for (const auto& [name, v] : opt.velocity()) c.add("optimizer/" + name, Shape{static_cast<int64_t>(v.size())}, v);
  if (teacher.has_snapshot()) {
    auto snap = teacher.snapshot().clone();
    checkpoint::put_network(c, "teacher/", snap.weights());
    json& tm = c.meta["teacher"];
    tm["arch"] = snap.arch();
    json cj;
    to_json(cj, snap.config());
    tm["config"] = cj;
  }
  checkpoint::write(path, c);
}

std::string checkpoint_name(size_t index, const std::string& phase) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%02zu_%s.ckpt", index + 1, phase.c_str());
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string(), "cannot write");
  out << text;
  if (!out) throw IoError(path.string(), "write failed");
}

}  // namespace

std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& output_dir) {
  const auto dir = output_dir / "checkpoints";
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) return std::nullopt;
  std::optional<std::filesystem::path> best;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() != ".ckpt") continue;
    if (!best || e.path().filename() > best->filename()) best = e.path();
  }
  return best;
}

Supernet load_supernet(const std::filesystem::path& path) {
  const auto c = checkpoint::read(path);
  if (c.kind != "run" && c.kind != "supernet")
    throw FormatError(path.string() + ": expected a run checkpoint, found kind '" + c.kind + "'");
  ArchSpec arch;
  try {
    arch = c.meta.at("arch").get<ArchSpec>();
  } catch (const json::exception& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
  Supernet net(arch, 0);
  checkpoint::get_supernet(c, "supernet/", net);
  return net;
}

// ---------------------------------------------------------------------------
// EPS driver

RunResult run_eps(const RunConfig& cfg, const RunHooks& hooks, const std::optional<std::filesystem::path>& resume) {
  cfg.validate();
  auto log = [&](const std::string& s) {
    if (hooks.log) hooks.log(s);
  };
  const ArchSpec arch = cfg.arch.build();
  const auto phases = run_phases(cfg, arch);
  const auto splits = data::load_dataset(cfg.dataset);
  if (splits.train.size() == 0 || splits.test.size() == 0) throw ConfigError("dataset has an empty train or test split");

  Supernet net(arch, cfg.seed);
  Sgd opt;
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  distill::Teacher teacher(cfg.distill.teacher);
  RunState st;
  const json cfg_json = run_config_json(cfg);
  const std::filesystem::path out_dir = std::filesystem::path(cfg.output_dir.empty() ? "." : cfg.output_dir);

  if (resume) {
    const auto c = checkpoint::read(*resume);
    if (c.kind != "run") throw FormatError(resume->string() + ": not a run checkpoint (kind '" + c.kind + "')");
    try {
      if (identity_of(c.meta.at("run_config")) != identity_of(cfg_json))
        throw ConfigError(resume->string() + ": checkpoint was written by a different run config");
      checkpoint::get_supernet(c, "supernet/", net);
      for (const auto& b : c.tensors)
        if (b.key.rfind("optimizer/", 0) == 0) opt.velocity()[b.key.substr(10)] = b.data;
      set_rng_state(rng, c.meta.at("rng").get<std::string>());
      st.next_phase = c.meta.at("next_phase").get<size_t>();
      st.global_epoch = c.meta.at("global_epoch").get<int64_t>();
      for (const auto& r : c.meta.at("reports")) st.reports.push_back(phase_report_from_json(r, arch));
      const json& tm = c.meta.at("teacher");
      if (tm.at("has_snapshot").get<bool>())
        teacher.restore(checkpoint::subnet_from(c, "teacher/", tm), tm.at("extractions").get<int>());
    } catch (const json::exception& ex) {
      throw FormatError(resume->string() + ": " + ex.what());
    }
    log("resumed from " + resume->string() + " before phase " +
        (st.next_phase < phases.size() ? phases[st.next_phase].name : std::string("<end>")));
  }

  auto make_report = [&] {
    RunReport r;
    r.arch = arch;
    r.teacher = std::string(distill::teacher_kind_name(cfg.distill.teacher));
    r.run_config = cfg_json;
    r.phases = st.reports;
    r.teacher_extractions = teacher.extractions();
    return r;
  };

  const auto& train = splits.train;
  const int bs = cfg.training.batch_size;
  const int64_t per_epoch = static_cast<int64_t>((train.size() + static_cast<size_t>(bs) - 1) / static_cast<size_t>(bs));
  StepOptions step_opt;
  step_opt.per_slot_sampling = cfg.training.per_slot_sampling;
  step_opt.bn_momentum = cfg.training.bn_momentum;
  const auto& kd = cfg.distill.kd;
  const auto scheme = cfg.distill.exit_weights;

  BatchCache teacher_calib;
  if (cfg.eval.bn_calibration_batches > 0)
    fill_cache(teacher_calib, train, splits.norm, cfg.eval.batch_size, 64,
               static_cast<size_t>(cfg.eval.bn_calibration_batches));

  RunResult result{Supernet(arch, 0), {}, false, {}};
  if (resume) result.last_checkpoint = *resume;
  bool stopped = false;
  for (size_t pi = st.next_phase; pi < phases.size() && !stopped; ++pi) {
    const PhaseSpec& ph = phases[pi];
    const auto t0 = std::chrono::steady_clock::now();
    if (pi > 0 && teacher.update(net, ph.name, teacher_calib.inputs)) log("teacher extracted before " + ph.name);
    opt.reset();

    const int64_t total = per_epoch * ph.epochs;
    const int64_t warmup = per_epoch * ph.warmup_epochs;
    int64_t t = 0;
    double last_epoch_loss = 0.0;
    for (int e = 0; e < ph.epochs; ++e) {
      const auto batches = data::make_batches(train.size(), bs, cfg.seed, st.global_epoch);
      double epoch_loss = 0.0;
      for (const auto& b : batches) {
        const int r = sample_resolution(ph.unlocked, rng);
        Tensor x = cfg.dataset.augment ? data::augmented_batch(train, b, splits.norm, rng)
                                       : data::batch_tensor(train, b, splits.norm);
        x = data::resize_batch(x, r);
        const auto labels = data::batch_labels(train, b);
        Tensor soft;
        if (pi > 0 && kd.kd_ratio > 0.0 && teacher.has_snapshot())
          soft = teacher.soft_labels(x, scheme, kd.temperature);
        const SubnetLoss loss = [&](const std::vector<Tensor>& logits, const SubnetConfig&) {
          return distill::multi_exit_kd_loss(logits, labels, soft, kd, scheme);
        };
        const double lr = lr_at(ph.lr, t, total, warmup);
        const auto stats = train_step(net, x, ph, opt, lr, rng, loss, step_opt);
        if (!std::isfinite(stats.loss))
          throw Error(ErrorKind::internal, "training diverged in " + ph.name + " (non-finite loss)");
        epoch_loss += stats.loss;
        ++t;
        if (hooks.on_step) hooks.on_step(ph.name, t, total, stats.loss, lr);
      }
      last_epoch_loss = epoch_loss / static_cast<double>(batches.size());
      ++st.global_epoch;
    }

    PhaseReport rep = evaluate_sweep(net, ph.name, splits.test, splits.norm, cfg.eval, scheme, &splits.train);
    rep.train_loss = last_epoch_loss;
    rep.iterations = total;
    rep.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    st.reports.push_back(rep);
    st.next_phase = pi + 1;

    const auto ckpt = out_dir / "checkpoints" / checkpoint_name(pi, ph.name);
    save_run(ckpt, cfg, net, opt, rng, teacher, st);
    result.last_checkpoint = ckpt;
    const RunReport rr = make_report();
    write_text(out_dir / "report.json", to_json(rr).dump(2) + "\n");
    write_text(out_dir / "report.txt", render_table({rr}));
    char line[160];
    std::snprintf(line, sizeof line, "%s: avg %.2f%% best %.2f%% maximal %.2f%% loss %.4f (%.1f s)", ph.name.c_str(),
                  100.0 * rep.avg, 100.0 * rep.best, 100.0 * rep.maximal_accuracy, rep.train_loss, rep.wall_clock_s);
    log(line);
    if (hooks.on_phase) hooks.on_phase(rep);
    stopped = ph.name == cfg.training.stop_after;
  }

  result.completed = st.next_phase >= phases.size();
  result.report = make_report();
  result.net = std::move(net);
  return result;
}

}  // namespace ofa
