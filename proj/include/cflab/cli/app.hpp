#ifndef CFLAB_CLI_APP_HPP
#define CFLAB_CLI_APP_HPP

#include <CLI11.hpp>

#include <thread>

#include "cflab/cli/commands.hpp"

namespace cflab::cli {

/// Maps library errors to exit codes and prints them to `err`.
template <typename F>
int guarded(F&& body, std::ostream& err) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const InvalidArgument& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kConfigError;
  } catch (const MissingArtifact& e) {
    err << "missing artifact: " << e.what() << "\n";
    return kMissingArtifact;
  } catch (const ShapeError& e) {
    err << "shape mismatch: " << e.what() << "\n";
    return kMissingArtifact;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumericalFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

/// Full command line, argv[0] included. Progress goes to `log`.
inline int run(std::vector<std::string> args, std::ostream& log = std::cerr) {
  CLI::App app{"Counterfactual lab: synthetic retinal data, diffusion and classifier training, counterfactuals"};
  app.require_subcommand(1);
  unsigned jobs = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("-j,--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);

  struct Sub {
    Sub(std::string n, int (*f)(const Context&), std::string h) : name(std::move(n)), fn(f), help(std::move(h)) {}
    std::string name;
    int (*fn)(const Context&);
    std::string help;
    CLI::App* app = nullptr;
    std::string config;
    std::vector<std::string> overrides;
  };
  std::vector<Sub> subs{{"dataset", cmd_dataset, "build the synthetic dataset manifest"},
                        {"train", cmd_train, "train the diffusion model and classifiers"},
                        {"generate", cmd_generate, "generate DVC and/or SVC counterfactuals"},
                        {"experiment", cmd_experiment, "run a sweep, comparison or metrics experiment"},
                        {"export", cmd_export, "export diffusion samples or dataset images"}};
  for (auto& s : subs) {
    s.app = app.add_subcommand(s.name, s.help);
    s.app->add_option("-c,--config", s.config, "YAML config file");
    s.app->add_option("overrides", s.overrides,
                      s.name == "experiment" ? "optional sweep|comparison|metrics, plus key=value overrides"
                                             : "key=value overrides");
  }

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    std::ostringstream out, err;
    const int code = app.exit(e, out, err);
    log << out.str() << err.str();
    return code == 0 ? kOk : kConfigError;
  }

  for (auto& s : subs) {
    if (!s.app->parsed()) continue;
    return guarded(
        [&] {
          Context ctx;
          ctx.jobs = jobs;
          ctx.log = &log;
          if (!s.config.empty()) ctx.cfg = Config::from_file(s.config);
          bool kind_seen = false;
          for (const auto& o : s.overrides) {
            if (s.name == "experiment" && !kind_seen && o.find('=') == std::string::npos) {
              ctx.cfg.apply_override("experiment.kind=" + o);
              kind_seen = true;
            } else {
              ctx.cfg.apply_override(o);
            }
          }
          validate(ctx.cfg);
          echo_config(ctx, s.name);
          return s.fn(ctx);
        },
        log);
  }
  return kConfigError;
}

}  // namespace cflab::cli

#endif  // CFLAB_CLI_APP_HPP
