#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "privisp/error.hpp"
#include "privisp/workbench.hpp"

using namespace privisp;

namespace {

const char* describe(wb::ExperimentKind kind) {
  switch (kind) {
    case wb::ExperimentKind::simulate: return "Capture images through a parameter file";
    case wb::ExperimentKind::train_isp: return "Run the adversarial game and export the learned parameters";
    case wb::ExperimentKind::train_enhancer: return "Train the image enhancer on captured scenes";
    case wb::ExperimentKind::eval_afr: return "Closed-set identification accuracy, raw and captured";
    case wb::ExperimentKind::eval_utility: return "Person detection AP, raw and captured";
    case wb::ExperimentKind::eval_iqa: return "PSNR, SSIM and MS-SSIM against reference images";
    case wb::ExperimentKind::attack: return "Re-enrollment, white-box retraining and restoration attacks";
    case wb::ExperimentKind::sweep: return "Privacy/utility sweep over baseline degradations";
    case wb::ExperimentKind::export_params: return "Write deployable parameter JSON";
    case wb::ExperimentKind::preliminary: return "Feature inversion analysis on captured faces";
  }
  return "";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Privacy-preserving camera ISP workbench"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out;
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
  bool dry_run = false;
  bool quiet = false;
  for (auto kind : wb::all_kinds()) {
    auto* sub = app.add_subcommand(wb::to_string(kind), describe(kind));
    sub->add_option("--config", config_path, "JSON experiment config (defaults when omitted)");
    sub->add_option("--seed", seed, "Experiment seed (overrides the config)");
    sub->add_option("--out", out, "Output directory (overrides the config)");
    sub->add_option("--override", overrides, "key.path=value, applied before validation")->take_all();
    sub->add_flag("--dry-run", dry_run, "Validate and print the resolved config only");
    sub->add_flag("-q,--quiet", quiet, "Do not log defaults and progress");
  }
  CLI11_PARSE(app, argc, argv);

  const std::string verb = app.get_subcommands().front()->get_name();
  const auto* sub = app.get_subcommands().front();
  std::vector<std::string> all{"kind=\"" + verb + "\""};
  if (sub->count("--seed")) all.push_back("seed=" + std::to_string(seed));
  if (sub->count("--out")) all.push_back("out=\"" + out + "\"");
  all.insert(all.end(), overrides.begin(), overrides.end());
  wb::Log log;
  if (!quiet) log = [](const std::string& s) { std::cerr << s << '\n'; };

  try {
    std::string text = "{}";
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw Error("cannot read config " + config_path);
      std::stringstream ss;
      ss << in.rdbuf();
      text = ss.str();
    }
    const auto cfg = wb::parse_config(text, all, log);
    wb::check_paths(cfg);
    if (dry_run) {
      std::cout << wb::to_json(cfg) << '\n';
      return 0;
    }
    const auto summary = wb::run_experiment(cfg, log);
    for (const auto& r : summary.rows)
      std::cout << summary.experiment_id << ' ' << r.metric << ' ' << r.method << ' ' << r.value << '\n';
  } catch (const ParseError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    return 2;
  } catch (const LockError& e) {
    std::cerr << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
