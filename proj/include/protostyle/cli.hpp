#pragma once

// Command-line front end. Exit codes: 0 success, 1 configuration error,
// 2 usage (unknown or missing subcommand), 3 I/O error, 4 state or
// precondition violation, 5 anything else.

#include "protostyle/pipeline.hpp"

#include <CLI11.hpp>

namespace protostyle {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitUsage = 2, kExitIo = 3, kExitState = 4, kExitOther = 5 };

inline std::string dashed(std::string k) {
  for (char& c : k)
    if (c == '_') c = '-';
  return k;
}

inline std::string usage_text() {
  std::ostringstream os;
  os << "usage: protostyle <subcommand> [--config FILE] [--from-manifest FILE] [--key value ...]\n\nsubcommands:\n";
  for (const auto& c : subcommands()) os << "  " << std::left << std::setw(20) << c << subcommand_summary(c) << "\n";
  os << "\nRun 'protostyle --help' for every configuration key.\n";
  return os.str();
}

inline std::string keys_help() {
  std::ostringstream os;
  os << "Configuration keys (config file: key=value lines, '#' comments; flags: --key value, dashes or underscores):\n";
  for (const auto& k : config_registry()) {
    std::string def = k.default_value.empty() ? "\"\"" : k.default_value;
    os << "  --" << std::left << std::setw(22) << dashed(k.name) << k.help << " [" << def << "]\n";
  }
  os << "\nPROTOSTYLE_THREADS caps worker threads (default: hardware concurrency).\n"
        "--from-manifest FILE reruns a recorded run: its config is loaded, input hashes are checked,\n"
        "and the produced outputs are compared against the recorded hashes.\n"
        "Exit codes: 0 ok, 1 config, 2 usage, 3 io, 4 state/precondition, 5 other.\n";
  return os.str();
}

inline int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  const auto& cmds = subcommands();
  if (argc < 2) {
    err << usage_text();
    return kExitUsage;
  }
  const std::string first = argv[1];
  const bool help = first == "-h" || first == "--help";
  if (!help && std::find(cmds.begin(), cmds.end(), first) == cmds.end()) {
    err << "protostyle: unknown subcommand '" << first << "'\n\n" << usage_text();
    return kExitUsage;
  }

  CLI::App app{"protostyle: prototype-guided motion stylization on a synthetic corpus", "protostyle"};
  app.require_subcommand(1);
  app.footer(keys_help());
  std::string config_path;
  std::string manifest_path;
  std::map<std::string, std::string> flags;
  std::map<std::string, std::map<std::string, CLI::Option*>> opts;
  for (const auto& c : cmds) {
    CLI::App* sub = app.add_subcommand(c, subcommand_summary(c));
    sub->add_option("--config", config_path, "key=value configuration file");
    sub->add_option("--from-manifest", manifest_path, "rerun the run recorded in this manifest");
    for (const auto& k : config_registry()) {
      std::string names = "--" + dashed(k.name);
      if (dashed(k.name) != k.name) names += ",--" + k.name;
      opts[c][k.name] = sub->add_option(names, flags[k.name], k.help + " [" + k.default_value + "]");
    }
  }

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      err << "protostyle: config error: " << e.what() << "\n";
      return kExitConfig;
    }
    const std::string cmd = app.get_subcommands().front()->get_name();

    Config cfg;
    json recorded;
    if (!manifest_path.empty()) {
      recorded = manifest_run(read_json(manifest_path));
      if (recorded.at("command").get<std::string>() != cmd)
        throw ConfigError("from_manifest", "manifest records '" + recorded.at("command").get<std::string>() + "', not '" + cmd + "'");
      cfg.load_json(recorded.at("config"));
      verify_inputs(recorded);
    }
    if (!config_path.empty()) cfg.load_file(config_path);
    for (const auto& [key, opt] : opts[cmd])
      if (opt->count() > 0) cfg.set(key, flags[key]);
    worker_count();  // rejects a malformed PROTOSTYLE_THREADS before any work

    const RunRecord rec = run_subcommand(cmd, cfg, err);
    if (!recorded.is_null()) {
      const auto bad = output_mismatches(recorded.at("outputs"), rec.outputs);
      if (!bad.empty()) {
        std::string list;
        for (const auto& b : bad) list += (list.empty() ? "" : ", ") + b;
        throw StateError("rerun outputs differ from the manifest: " + list);
      }
      out << "reproduced " << rec.outputs.size() << " outputs bit-identically\n";
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "protostyle: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "protostyle: " << e.what() << "\n";
    return kExitIo;
  } catch (const json::exception& e) {
    err << "protostyle: io error: malformed json: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    err << "protostyle: " << e.what() << "\n";
    return kExitState;
  } catch (const std::exception& e) {
    err << "protostyle: error: " << e.what() << "\n";
    return kExitOther;
  }
}

}  // namespace protostyle
