#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ofa/ofa.h"

using nlohmann::json;

namespace {

struct Failure {
  ofa_status status;
  std::string message;
};

void check(ofa_status s) {
  if (s != OFA_OK) throw Failure{s, ofa_last_error()};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  ofa_free_string(s);
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Failure{OFA_ERR_IO, path + ": cannot open"};
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
    if (!text.empty() && text.back() != '\n') std::cout << '\n';
    return;
  }
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw Failure{OFA_ERR_IO, out_path + ": cannot write"};
  out << text;
}

/// Inline JSON, "maximal", or a path to a JSON file.
std::string subnet_arg(const std::string& v) {
  if (v.empty() || v == "maximal") return "{}";
  if (v.front() == '{') return v;
  return read_file(v);
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Failure{OFA_ERR_FORMAT, what + ": " + e.what()};
  }
}

/// Options that mirror run-config fields. Only flags given on the command
/// line are applied, on top of the config file.
struct RunFlags {
  std::string preset;
  uint64_t seed = 0;
  std::string arch_preset, variant, dataset_kind, dataset_root, teacher, divergence, exit_weights, output_dir,
      stop_after;
  double wm = 1.0, epoch_scale = 0.0, kd_ratio = 0.0, val_fraction = 0.0;
  float temperature = 1.0f, bn_momentum = 0.1f;
  int n_classes = 0, blocks_per_stage = 0, train_per_class = 0, test_per_class = 0, batch_size = 0,
      bn_calibration_batches = 0, eval_batch_size = 0;
  bool augment = false, ensemble_exits = false, per_slot_sampling = false;
  uint64_t dataset_seed = 0;
  std::vector<std::pair<CLI::Option*, std::function<void(json&)>>> apply;

  void add_arch(CLI::App* app) {
    on(app->add_option("--arch-preset", arch_preset, "ofa_mbv3 | miniature"),
       [this](json& j) { j["arch"]["preset"] = arch_preset; });
    on(app->add_option("--variant", variant, "B, D, P, DP, with SE_ or EE_ prefix"),
       [this](json& j) { j["arch"]["variant"] = variant; });
    on(app->add_option("--wm,--width-multiplier", wm, "width multiplier"),
       [this](json& j) { j["arch"]["width_multiplier"] = wm; });
    on(app->add_option("--n-classes", n_classes, "classifier outputs (also sets dataset.n_classes)"),
       [this](json& j) {
         j["arch"]["n_classes"] = n_classes;
         j["dataset"]["n_classes"] = n_classes;
       });
    on(app->add_option("--blocks-per-stage", blocks_per_stage, "miniature preset only"),
       [this](json& j) { j["arch"]["blocks_per_stage"] = blocks_per_stage; });
  }

  void add_run(CLI::App* app) {
    on(app->add_option("--preset", preset, "desk | reference"), [this](json& j) { j["preset"] = preset; });
    on(app->add_option("--seed", seed, "RNG seed"), [this](json& j) { j["seed"] = seed; });
    add_arch(app);
    on(app->add_option("--dataset", dataset_kind, "synthetic | tiny_imagenet"),
       [this](json& j) { j["dataset"]["kind"] = dataset_kind; });
    on(app->add_option("--dataset-root", dataset_root, "Tiny-ImageNet directory"),
       [this](json& j) { j["dataset"]["root"] = dataset_root; });
    on(app->add_option("--train-per-class", train_per_class), [this](json& j) {
      j["dataset"]["train_per_class"] = train_per_class;
    });
    on(app->add_option("--test-per-class", test_per_class), [this](json& j) {
      j["dataset"]["test_per_class"] = test_per_class;
    });
    on(app->add_option("--val-fraction", val_fraction), [this](json& j) { j["dataset"]["val_fraction"] = val_fraction; });
    on(app->add_option("--dataset-seed", dataset_seed), [this](json& j) { j["dataset"]["seed"] = dataset_seed; });
    on(app->add_flag("--augment", augment), [this](json& j) { j["dataset"]["augment"] = augment; });
    on(app->add_option("--batch-size", batch_size), [this](json& j) { j["training"]["batch_size"] = batch_size; });
    on(app->add_option("--epoch-scale", epoch_scale), [this](json& j) { j["training"]["epoch_scale"] = epoch_scale; });
    on(app->add_flag("--per-slot-sampling", per_slot_sampling),
       [this](json& j) { j["training"]["per_slot_sampling"] = per_slot_sampling; });
    on(app->add_option("--bn-momentum", bn_momentum), [this](json& j) { j["training"]["bn_momentum"] = bn_momentum; });
    on(app->add_option("--stop-after", stop_after, "checkpoint this phase and stop"),
       [this](json& j) { j["training"]["stop_after"] = stop_after; });
    on(app->add_option("--teacher", teacher, "fixed | progressive"),
       [this](json& j) { j["distill"]["teacher"] = teacher; });
    on(app->add_option("--kd-ratio", kd_ratio), [this](json& j) { j["distill"]["kd_ratio"] = kd_ratio; });
    on(app->add_option("--temperature", temperature), [this](json& j) { j["distill"]["temperature"] = temperature; });
    on(app->add_option("--divergence", divergence, "ce | kl"),
       [this](json& j) { j["distill"]["divergence"] = divergence; });
    on(app->add_option("--exit-weights", exit_weights, "desc | asc | uniform"),
       [this](json& j) { j["distill"]["exit_weights"] = exit_weights; });
    add_eval(app);
    on(app->add_option("--output-dir", output_dir), [this](json& j) { j["output_dir"] = output_dir; });
  }

  void add_eval(CLI::App* app) {
    on(app->add_flag("--ensemble-exits", ensemble_exits, "score early-exit subnets by the exit ensemble"),
       [this](json& j) { j["eval"]["ensemble_exits"] = ensemble_exits; });
    on(app->add_option("--bn-calibration-batches", bn_calibration_batches),
       [this](json& j) { j["eval"]["bn_calibration_batches"] = bn_calibration_batches; });
    on(app->add_option("--eval-batch-size", eval_batch_size),
       [this](json& j) { j["eval"]["batch_size"] = eval_batch_size; });
  }

  void on(CLI::Option* o, std::function<void(json&)> f) { apply.emplace_back(o, std::move(f)); }

  void patch(json& j) const {
    for (const auto& [opt, f] : apply)
      if (opt->count() > 0) f(j);
  }
};

json arch_doc(const RunFlags& f, const std::string& config_path) {
  json run = config_path.empty() ? json::object() : parse_json(read_file(config_path), config_path);
  f.patch(run);
  return run.value("arch", json::object());
}

void print_progress(void* user, const char* event) {
  const bool quiet = *static_cast<bool*>(user);
  const json e = json::parse(event);
  const std::string kind = e.at("event");
  if (kind == "step") {
    if (quiet) return;
    const int64_t it = e.at("iteration"), total = e.at("total");
    if (it % 10 == 0 || it == total)
      std::fprintf(stderr, "[%s] %lld/%lld loss %.4f lr %.5f\n", e.at("phase").get<std::string>().c_str(),
                   static_cast<long long>(it), static_cast<long long>(total), e.at("loss").get<double>(),
                   e.at("lr").get<double>());
  } else if (kind == "log") {
    std::fprintf(stderr, "%s\n", e.at("message").get<std::string>().c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Elastic supernet training and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(ofa_version()));

  RunFlags train_flags;
  std::string train_config, resume, train_out;
  bool quiet = false, print_config = false;
  auto* train = app.add_subcommand("train", "run extended progressive shrinking");
  train->add_option("-c,--config", train_config, "run config JSON; explicit flags take precedence");
  train_flags.add_run(train);
  train->add_option("--resume", resume, "run checkpoint to continue from, or 'auto'");
  train->add_option("-o,--out", train_out, "also write the final report JSON here");
  train->add_flag("-q,--quiet", quiet, "suppress per-step progress");
  train->add_flag("--print-config", print_config, "print the resolved run config and exit");

  RunFlags eval_flags;
  std::string eval_ckpt, eval_config, eval_phase, eval_subnet, eval_out;
  auto* evaluate = app.add_subcommand("evaluate", "test accuracy of a trained supernet");
  evaluate->add_option("checkpoint", eval_ckpt, "run checkpoint")->required();
  evaluate->add_option("-c,--config", eval_config, "run config (default: the one stored in the checkpoint)");
  evaluate->add_option("--phase", eval_phase, "sweep this phase's space (default: the checkpoint's phase)");
  evaluate->add_option("--subnet", eval_subnet, "score one config: inline JSON, file, or 'maximal'");
  eval_flags.add_eval(evaluate);
  evaluate->add_option("-o,--out", eval_out, "write JSON here instead of stdout");

  RunFlags enum_flags;
  std::string enum_config, enum_phase, enum_out;
  bool enum_phases = false;
  auto* enumerate = app.add_subcommand("enumerate", "list the subnets of a phase, or the phase table");
  enumerate->add_option("-c,--config", enum_config, "run config supplying the architecture");
  enum_flags.add_arch(enumerate);
  enumerate->add_option("--phase", enum_phase, "phase whose space to list");
  enumerate->add_flag("--phases", enum_phases, "print the phase table instead");
  enumerate->add_option("-o,--out", enum_out);

  std::string ex_ckpt, ex_subnet = "maximal", ex_out;
  auto* extract = app.add_subcommand("extract", "write a standalone subnet file");
  extract->add_option("checkpoint", ex_ckpt, "run checkpoint")->required();
  extract->add_option("--subnet", ex_subnet, "inline JSON, file, or 'maximal'");
  extract->add_option("-o,--out", ex_out, "output path")->required();

  RunFlags cost_flags;
  std::string cost_config, cost_subnet = "maximal", cost_file;
  auto* cost = app.add_subcommand("cost", "parameters and MACs of a subnet");
  cost->add_option("-c,--config", cost_config, "run config supplying the architecture");
  cost_flags.add_arch(cost);
  cost->add_option("--subnet", cost_subnet, "inline JSON, file, or 'maximal'");
  cost->add_option("--file", cost_file, "standalone subnet file to count instead");

  std::vector<std::string> report_files;
  std::string report_out, report_format = "text";
  auto* report = app.add_subcommand("report", "render run reports as a table");
  report->add_option("reports", report_files, "report.json files")->required();
  report->add_option("--format", report_format, "text | json")->check(CLI::IsMember({"text", "json"}));
  report->add_option("-o,--out", report_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      json run = train_config.empty() ? json::object() : parse_json(read_file(train_config), train_config);
      train_flags.patch(run);
      char* resolved = nullptr;
      check(ofa_resolve_run_config(run.dump().c_str(), &resolved));
      const std::string cfg = take(resolved);
      if (print_config) {
        emit(cfg, "");
        return 0;
      }
      char* rep = nullptr;
      check(ofa_train(cfg.c_str(), resume.empty() ? nullptr : resume.c_str(), print_progress, &quiet, &rep));
      const std::string report_json = take(rep);
      const char* docs[] = {report_json.c_str()};
      char* table = nullptr;
      check(ofa_report_render(docs, 1, &table));
      std::cout << take(table);
      if (!train_out.empty()) emit(report_json, train_out);
    } else if (evaluate->parsed()) {
      ofa_supernet* net = nullptr;
      check(ofa_supernet_load(eval_ckpt.c_str(), &net));
      std::unique_ptr<ofa_supernet, decltype(&ofa_supernet_free)> guard(net, ofa_supernet_free);
      json run;
      if (!eval_config.empty()) {
        run = parse_json(read_file(eval_config), eval_config);
      } else {
        char* info = nullptr;
        check(ofa_supernet_info(net, &info));
        run = json::parse(take(info)).at("run_config");
      }
      eval_flags.patch(run);
      const std::string run_s = run.dump();
      const std::string sub = eval_subnet.empty() ? std::string() : subnet_arg(eval_subnet);
      char* out = nullptr;
      check(ofa_supernet_evaluate(net, run_s.c_str(), eval_phase.empty() ? nullptr : eval_phase.c_str(),
                                  sub.empty() ? nullptr : sub.c_str(), &out));
      emit(take(out), eval_out);
    } else if (enumerate->parsed()) {
      const std::string arch = arch_doc(enum_flags, enum_config).dump();
      char* out = nullptr;
      if (enum_phases || enum_phase.empty()) {
        check(ofa_phase_sequence(arch.c_str(), &out));
      } else {
        check(ofa_enumerate(arch.c_str(), enum_phase.c_str(), &out));
      }
      emit(json::parse(take(out)).dump(2), enum_out);
    } else if (extract->parsed()) {
      ofa_supernet* net = nullptr;
      check(ofa_supernet_load(ex_ckpt.c_str(), &net));
      std::unique_ptr<ofa_supernet, decltype(&ofa_supernet_free)> guard(net, ofa_supernet_free);
      check(ofa_supernet_extract(net, subnet_arg(ex_subnet).c_str(), ex_out.c_str()));
      ofa_subnet* sub = nullptr;
      check(ofa_subnet_load(ex_out.c_str(), &sub));
      std::unique_ptr<ofa_subnet, decltype(&ofa_subnet_free)> sguard(sub, ofa_subnet_free);
      char* info = nullptr;
      check(ofa_subnet_info(sub, &info));
      json j = json::parse(take(info));
      j["path"] = ex_out;
      emit(j.dump(2), "");
    } else if (cost->parsed()) {
      json out;
      if (!cost_file.empty()) {
        ofa_subnet* sub = nullptr;
        check(ofa_subnet_load(cost_file.c_str(), &sub));
        std::unique_ptr<ofa_subnet, decltype(&ofa_subnet_free)> sguard(sub, ofa_subnet_free);
        char* info = nullptr;
        check(ofa_subnet_info(sub, &info));
        const json j = json::parse(take(info));
        int64_t counted = 0;
        check(ofa_subnet_param_count(sub, &counted));
        out = {{"key", j.at("key")}, {"params", j.at("params")}, {"flops", j.at("flops")}, {"counted_params", counted}};
      } else {
        const std::string arch = arch_doc(cost_flags, cost_config).dump();
        int64_t params = 0, macs = 0;
        check(ofa_cost(arch.c_str(), subnet_arg(cost_subnet).c_str(), &params, &macs));
        out = {{"params", params}, {"flops", macs}};
      }
      emit(out.dump(2), "");
    } else if (report->parsed()) {
      std::vector<std::string> docs;
      for (const auto& f : report_files) docs.push_back(read_file(f));
      if (report_format == "json") {
        json all = json::array();
        for (size_t i = 0; i < docs.size(); ++i) all.push_back(parse_json(docs[i], report_files[i]));
        emit(all.dump(2), report_out);
      } else {
        std::vector<const char*> ptrs;
        for (const auto& d : docs) ptrs.push_back(d.c_str());
        char* table = nullptr;
        check(ofa_report_render(ptrs.data(), ptrs.size(), &table));
        emit(take(table), report_out);
      }
    }
  } catch (const Failure& f) {
    const json diag = {{"error", ofa_status_name(f.status)}, {"code", static_cast<int>(f.status)},
                       {"message", f.message}};
    std::cerr << diag.dump() << std::endl;
    return 10 + static_cast<int>(f.status);
  }
  return 0;
}
