// lmgrad: command line front end for the matrix LM experiments.
//
//   lmgrad <subcommand> [--config FILE] [--out DIR] [--<dotted.key>=VALUE ...]

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lmgrad/checkpoint.hpp"
#include "lmgrad/corpus.hpp"
#include "lmgrad/diagnostics.hpp"
#include "lmgrad/experiments.hpp"

namespace {

/// Turns leftover `--a.b=v` / `--a.b v` arguments into key/value pairs.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0) throw lmgrad::ConfigError("unexpected argument '" + arg + "'");
    const std::string body = arg.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw lmgrad::ConfigError("override --" + body + " needs a value");
      out.emplace_back(body, extras[++i]);
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Matrix language model experiments: corpora, training, diagnostics and checks"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path;
  std::string out_dir;
  bool print_config = false;
  const char* blurbs[] = {
      "Generate a synthetic corpus and its count statistics",
      "Train a matrix LM and write its trajectory and checkpoints",
      "Run the gradient diagnostics on a checkpoint",
      "Run the randomized structural checks (exit 2 on any violation)",
      "Sweep SpamLang over vocabulary size and learning rate",
      "Sweep the LM head rank on a shared Zipf corpus",
      "Summarize run directories into a markdown report",
  };
  std::vector<CLI::App*> subs;
  const auto& names = lmgrad::experiment_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    CLI::App* sub = app.add_subcommand(names[i], blurbs[i]);
    sub->add_option("-c,--config", config_path, "JSON config file");
    sub->add_option("-o,--out", out_dir, "Output directory (default: $LMGRAD_OUT/<subcommand>)");
    sub->add_flag("--print-config", print_config, "Print the resolved config and exit");
    sub->allow_extras();
    sub->footer("Any config key can be overridden as --<block>.<key>=<value>, e.g. --train.lr=0.003");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? lmgrad::kExitOk : lmgrad::kExitUsage;
  }

  CLI::App* chosen = nullptr;
  for (auto* s : subs)
    if (s->parsed()) chosen = s;

  try {
    lmgrad::Json config = lmgrad::default_config();
    if (!config_path.empty()) lmgrad::merge_config(config, lmgrad::load_config_file(config_path));
    for (const auto& [key, value] : parse_overrides(chosen->remaining())) lmgrad::apply_override(config, key, value);
    if (!out_dir.empty()) config["out_dir"] = out_dir;
    if (print_config) {
      std::cout << config.dump(2) << '\n';
      return lmgrad::kExitOk;
    }
    const lmgrad::RunOutcome outcome = lmgrad::run_experiment(chosen->get_name(), config);
    std::cout << chosen->get_name() << ": " << outcome.message << '\n';
    std::cout << "wrote " << outcome.files.size() << " file(s) to " << outcome.out_dir << '\n';
    return outcome.exit_code;
  } catch (const lmgrad::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return lmgrad::kExitUsage;
  } catch (const lmgrad::CorpusError& e) {
    std::cerr << "corpus error: " << e.what() << '\n';
    return lmgrad::kExitUsage;
  } catch (const lmgrad::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return lmgrad::kExitUsage;
  } catch (const lmgrad::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return lmgrad::kExitNumeric;
  } catch (const lmgrad::LinalgError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return lmgrad::kExitNumeric;
  } catch (const lmgrad::ModelError& e) {
    std::cerr << "model error: " << e.what() << '\n';
    return lmgrad::kExitUsage;
  } catch (const lmgrad::DiagnosticsError& e) {
    std::cerr << "diagnostics error: " << e.what() << '\n';
    return lmgrad::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return lmgrad::kExitUsage;
  }
}
