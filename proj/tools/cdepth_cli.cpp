#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cdepth/depth_io.hpp"
#include "cdepth/errors.hpp"
#include "cdepth/model_check.hpp"
#include "cdepth/scene.hpp"
#include "cdepth/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cdepth;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitContract = 1;
constexpr int kExitNumeric = 2;

/// One subcommand: a flat JSON object of resolved settings, the flags that
/// may override them, and the keys that must end up non-empty.
struct Command {
  CLI::App* app = nullptr;
  json defaults;
  std::vector<std::pair<std::string, std::string>> flags;  // flag name, key
  std::map<std::string, std::string> given;
  std::vector<std::string> required;
  std::string config_path;
};

void add_flags(Command& cmd, const std::vector<std::pair<std::string, std::string>>& flags) {
  for (const auto& [flag, key] : flags) {
    cmd.flags.emplace_back(flag, key);
    cmd.app->add_option("--" + flag, cmd.given[key]);
  }
  cmd.app->add_option("--config", cmd.config_path, "JSON file; flags override its values");
}

double parse_double(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw ConfigError("'" + key + "' expects a number, got '" + text + "'");
  return v;
}

json parse_integer(const std::string& key, const std::string& text, bool is_unsigned) {
  std::size_t used = 0;
  json out;
  try {
    if (is_unsigned) {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
      out = static_cast<std::uint64_t>(std::stoull(text, &used));
    } else {
      out = static_cast<std::int64_t>(std::stoll(text, &used));
    }
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw ConfigError("'" + key + "' expects an integer, got '" + text + "'");
  return out;
}

json parse_like(const std::string& key, const json& like, const std::string& text) {
  if (like.is_string()) return text;
  if (like.is_number_unsigned()) return parse_integer(key, text, true);
  if (like.is_number_integer()) return parse_integer(key, text, false);
  if (like.is_number_float()) return parse_double(key, text);
  if (like.is_array()) {
    json arr = json::array();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) arr.push_back(parse_double(key, item));
    if (arr.empty()) throw ConfigError("'" + key + "' expects a comma-separated list");
    return arr;
  }
  throw ConfigError("'" + key + "' cannot be set from the command line");
}

void check_type(const std::string& key, const json& like, const json& value) {
  bool ok = false;
  if (like.is_string()) ok = value.is_string();
  else if (like.is_number_unsigned()) ok = value.is_number_unsigned();
  else if (like.is_number_integer()) ok = value.is_number_integer();
  else if (like.is_number_float()) ok = value.is_number();
  else if (like.is_array()) ok = value.is_array();
  if (!ok) throw ConfigError("config key '" + key + "' has the wrong type: " + value.dump());
}

/// defaults < config file < explicit flags.
json resolve(const Command& cmd) {
  json out = cmd.defaults;
  if (!cmd.config_path.empty()) {
    std::ifstream is(cmd.config_path);
    if (!is) throw ConfigError("cannot open config '" + cmd.config_path + "'");
    json file;
    try {
      file = json::parse(is);
    } catch (const json::parse_error& e) {
      throw ConfigError("config '" + cmd.config_path + "' is not valid JSON: " + e.what());
    }
    if (!file.is_object()) throw ConfigError("config '" + cmd.config_path + "' must hold a JSON object");
    for (const auto& [key, value] : file.items()) {
      if (!out.contains(key)) throw ConfigError("unknown config key '" + key + "'");
      check_type(key, out[key], value);
      out[key] = value;
    }
  }
  for (const auto& [flag, key] : cmd.flags) {
    if (cmd.app->count("--" + flag) > 0) out[key] = parse_like(key, cmd.defaults[key], cmd.given.at(key));
  }
  for (const auto& key : cmd.required) {
    if (out[key].is_string() && out[key].get<std::string>().empty()) {
      throw ConfigError("missing required setting '" + key + "'");
    }
  }
  return out;
}

void echo(const std::string& name, const json& resolved) {
  std::cout << resolved.dump() << std::endl;
  std::cerr << "[" << name << "] resolved config echoed on stdout" << std::endl;
}

void write_json(const json& j, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path + "' for writing");
  os << std::setw(2) << j << "\n";
  if (!os) throw FormatError(FormatError::Kind::kIo, "write to '" + path + "' failed");
}

std::string numbered(const std::string& stem, std::size_t i, const std::string& ext) {
  std::ostringstream ss;
  ss << stem << "_" << std::setw(4) << std::setfill('0') << i << ext;
  return ss.str();
}

/// Training settings share the checkpoint's key names; the CLI keys on top of
/// them are stripped before conversion.
TrainConfig train_config(const json& resolved, const std::vector<std::string>& cli_keys) {
  json j = resolved;
  for (const auto& k : cli_keys) j.erase(k);
  TrainConfig cfg = train_config_from_json(j);
  cfg.validate();
  return cfg;
}

std::vector<std::pair<std::string, std::string>> training_flags() {
  return {{"data", "train_path"}, {"val", "val_path"},   {"p", "p"},         {"alpha", "alpha"},
          {"beta", "beta"},       {"gamma", "gamma"},    {"epochs", "epochs"}, {"batch", "batch"},
          {"lr-start", "lr_start"}, {"lr-end", "lr_end"}, {"seed", "seed"},   {"latent-dim", "latent_dim"}};
}

// ---------------------------------------------------------------------------

int run_gen(const json& r) {
  GeneratorConfig cfg;
  cfg.height = r["height"].get<int>();
  cfg.width = r["width"].get<int>();
  cfg.focal = r["focal"].get<double>();
  cfg.wall_min = r["wall_min"].get<double>();
  cfg.wall_max = r["wall_max"].get<double>();
  cfg.wall_albedo = r["wall_albedo"].get<double>();
  cfg.min_objects = r["min_objects"].get<int>();
  cfg.max_objects = r["max_objects"].get<int>();
  const int count = r["count"].get<int>();
  if (count < 0) throw ConfigError("count must be non-negative");
  const Dataset data = generate_dataset(r["seed"].get<std::uint64_t>(), count, default_catalog(), cfg);
  write_dataset(data, r["out"].get<std::string>());
  std::cout << json{{"written", r["out"]}, {"count", data.samples.size()}}.dump() << std::endl;
  return kExitOk;
}

int run_train(const json& r) {
  const TrainConfig cfg = train_config(r, {"out_ckpt", "save"});
  const Dataset train = read_dataset(cfg.train_path);
  const Dataset val = read_dataset(cfg.val_path);
  const FitResult fr = fit(cfg, train, val, &std::cout);
  const bool last = r["save"].get<std::string>() == "last";
  if (!last && r["save"].get<std::string>() != "best") throw ConfigError("save must be 'best' or 'last'");
  save_checkpoint(last ? fr.last : fr.best, r["out_ckpt"].get<std::string>());
  std::cout << json{{"best_epoch", fr.best_epoch},
                    {"best_val", to_json(fr.best_val)},
                    {"text_steps", fr.text_steps},
                    {"image_steps", fr.image_steps},
                    {"rolled_back_steps", fr.rolled_back_steps},
                    {"checkpoint", r["out_ckpt"]}}
                   .dump()
            << std::endl;
  return kExitOk;
}

int run_eval(const json& r) {
  const Predictor model(load_checkpoint(r["ckpt"].get<std::string>()));
  const Dataset data = read_dataset(r["data"].get<std::string>());
  const std::string maps = r["error_maps"].get<std::string>();
  if (!maps.empty()) fs::create_directories(maps);
  const int h = data.header.height;
  const int w = data.header.width;
  const MetricsReport m = evaluate_dataset(model, data, [&](std::size_t i, const Eigen::ArrayXd& err) {
    if (maps.empty()) return;
    write_pgm16(err.cast<float>(), h, w, r["error_map_unit"].get<double>(), fs::path(maps) / numbered("error", i, ".pgm"));
  });
  json report = to_json(m);
  report["samples"] = data.samples.size();
  write_json(report, r["report"].get<std::string>());
  std::cout << report.dump() << std::endl;
  return kExitOk;
}

int run_sample(const json& r) {
  const Predictor model(load_checkpoint(r["ckpt"].get<std::string>()));
  const std::string text = r["caption"].get<std::string>();
  const auto ids = tokenize(text, model.vocab());
  const int n = r["n"].get<int>();
  if (n < 1) throw ConfigError("n must be at least 1");
  const auto samples = model.infer_text(ids, n, r["seed"].get<std::uint64_t>());
  const fs::path dir = r["out_dir"].get<std::string>();
  fs::create_directories(dir);
  const std::string format = r["format"].get<std::string>();
  if (format != "pgm16" && format != "raw32") throw ConfigError("format must be pgm16 or raw32");
  const int h = model.config().height;
  const int w = model.config().width;
  json files = json::array();
  json means = json::array();
  for (std::size_t i = 0; i < samples.depths.size(); ++i) {
    const auto& d = samples.depths[i];
    const fs::path path = dir / numbered("sample", i, format == "pgm16" ? ".pgm" : ".raw");
    if (format == "pgm16") write_pgm16(d, h, w, r["meters_per_unit"].get<double>(), path);
    else write_raw32(d, h, w, path);
    files.push_back(path.filename().string());
    means.push_back(static_cast<double>(d.cast<double>().mean()));
  }
  const json out{{"caption", text},
                 {"tokens", ids},
                 {"mu", std::vector<float>(samples.mu.data(), samples.mu.data() + samples.mu.size())},
                 {"sigma", std::vector<float>(samples.sigma.data(), samples.sigma.data() + samples.sigma.size())},
                 {"files", files},
                 {"mean_depth", means}};
  write_json(out, (dir / "samples.json").string());
  std::cout << json{{"written", files.size()}, {"out_dir", dir.string()}}.dump() << std::endl;
  return kExitOk;
}

int run_gradcheck(const json& r) {
  const auto first = r["seed"].get<std::uint64_t>();
  const int trials = r["trials"].get<int>();
  if (trials < 1) throw ConfigError("trials must be at least 1");
  bool all = true;
  json rows = json::array();
  for (int t = 0; t < trials; ++t) {
    for (const ObjectiveCheck& c : {check_vae_objective(first + t), check_cs_objective(first + t)}) {
      json leaves = json::object();
      for (const auto& [name, e] : c.report.leaves) leaves[name] = e.max_rel_error;
      rows.push_back({{"objective", c.objective},
                      {"seed", c.seed},
                      {"max_rel_error", c.report.max_rel_error()},
                      {"denominator_floor", c.report.denominator_floor},
                      {"kink_crossings", c.report.kink_crossings},
                      {"detach_exact_zero", c.detach_exact_zero},
                      {"pass", c.pass()},
                      {"leaves", leaves}});
      all = all && c.pass();
    }
  }
  std::cout << json{{"pass", all}, {"checks", rows}}.dump() << std::endl;
  return all ? kExitOk : kExitNumeric;
}

int run_sweep(const json& r) {
  const TrainConfig cfg = train_config(r, {"test_path", "p_list", "report"});
  std::vector<double> ps;
  for (const auto& v : r["p_list"]) ps.push_back(v.get<double>());
  const Dataset train = read_dataset(cfg.train_path);
  const Dataset val = read_dataset(cfg.val_path);
  const Dataset test = read_dataset(r["test_path"].get<std::string>());
  const auto rows = run_ratio_sweep(cfg, ps, train, val, test, &std::cout);
  json out = json::array();
  for (const auto& row : rows) out.push_back({{"p", row.p}, {"test", to_json(row.test)}, {"best_val", to_json(row.best_val)}});
  write_json(json{{"rows", out}}, r["report"].get<std::string>());
  std::cout << json{{"rows", out}}.dump() << std::endl;
  return kExitOk;
}

int run_ablate(const json& r) {
  const TrainConfig cfg = train_config(r, {"test_path", "report"});
  const Dataset train = read_dataset(cfg.train_path);
  const Dataset val = read_dataset(cfg.val_path);
  const Dataset test = read_dataset(r["test_path"].get<std::string>());
  const AblationResult a = run_caption_ablation(cfg, train, val, test, &std::cout);
  const json out{{"with_caption", to_json(a.with_caption)},
                 {"empty_caption", to_json(a.empty_caption)},
                 {"ablated_nonzero_features", a.ablated_nonzero_features}};
  write_json(out, r["report"].get<std::string>());
  std::cout << out.dump() << std::endl;
  return kExitOk;
}

void report_error(const char* kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Caption-conditioned monocular depth on synthetic scenes"};
  app.require_subcommand(1);

  std::map<std::string, Command> cmds;
  const auto make = [&](const std::string& name, const std::string& help, json defaults) -> Command& {
    Command& c = cmds[name];
    c.app = app.add_subcommand(name, help);
    c.defaults = std::move(defaults);
    return c;
  };

  const GeneratorConfig gen_defaults;
  Command& gen = make("gen", "Render a synthetic dataset",
                      {{"seed", std::uint64_t{0}},
                       {"count", 100},
                       {"out", ""},
                       {"height", gen_defaults.height},
                       {"width", gen_defaults.width},
                       {"focal", gen_defaults.focal},
                       {"wall_min", gen_defaults.wall_min},
                       {"wall_max", gen_defaults.wall_max},
                       {"wall_albedo", gen_defaults.wall_albedo},
                       {"min_objects", gen_defaults.min_objects},
                       {"max_objects", gen_defaults.max_objects}});
  add_flags(gen, {{"seed", "seed"}, {"count", "count"}, {"out", "out"}, {"max-objects", "max_objects"},
                  {"height", "height"}, {"width", "width"}, {"focal", "focal"}});
  gen.required = {"out"};

  json train_defaults = to_json(TrainConfig{});
  json t = train_defaults;
  t["out_ckpt"] = "";
  t["save"] = "best";
  Command& train = make("train", "Fit a model with alternating text/image steps", t);
  auto tf = training_flags();
  tf.emplace_back("out-ckpt", "out_ckpt");
  tf.emplace_back("save", "save");
  add_flags(train, tf);
  train.required = {"train_path", "val_path", "out_ckpt"};

  Command& eval = make("eval", "Evaluate a checkpoint on a dataset",
                       {{"ckpt", ""}, {"data", ""}, {"report", ""}, {"error_maps", ""}, {"error_map_unit", 1e-3}});
  add_flags(eval, {{"ckpt", "ckpt"}, {"data", "data"}, {"report", "report"}, {"error-maps", "error_maps"}});
  eval.required = {"ckpt", "data", "report"};

  Command& sample = make("sample", "Draw depth maps from a caption alone",
                         {{"ckpt", ""},
                          {"caption", ""},
                          {"n", 8},
                          {"seed", std::uint64_t{0}},
                          {"out_dir", ""},
                          {"format", "pgm16"},
                          {"meters_per_unit", 1e-3}});
  add_flags(sample, {{"ckpt", "ckpt"}, {"caption", "caption"}, {"n", "n"}, {"seed", "seed"}, {"out-dir", "out_dir"},
                     {"format", "format"}});
  sample.required = {"ckpt", "out_dir"};

  Command& gradcheck = make("gradcheck", "Finite-difference check of both objectives at toy size",
                            {{"seed", std::uint64_t{1}}, {"trials", 3}});
  add_flags(gradcheck, {{"seed", "seed"}, {"trials", "trials"}});

  json s = train_defaults;
  s["test_path"] = "";
  s["p_list"] = {0.0, 0.01, 0.5, 1.0};
  s["report"] = "";
  Command& sweep = make("sweep", "Train once per text-step ratio and report test metrics", s);
  auto sf = training_flags();
  sf.emplace_back("test", "test_path");
  sf.emplace_back("p-list", "p_list");
  sf.emplace_back("report", "report");
  add_flags(sweep, sf);
  sweep.required = {"train_path", "val_path", "test_path", "report"};

  json a = train_defaults;
  a["test_path"] = "";
  a["report"] = "";
  Command& ablate = make("ablate", "Compare training with and without captions", a);
  auto af = training_flags();
  af.emplace_back("test", "test_path");
  af.emplace_back("report", "report");
  add_flags(ablate, af);
  ablate.required = {"train_path", "val_path", "test_path", "report"};

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what());
    return kExitContract;
  }

  try {
    for (auto& [name, cmd] : cmds) {
      if (!cmd.app->parsed()) continue;
      const json resolved = resolve(cmd);
      echo(name, resolved);
      if (name == "gen") return run_gen(resolved);
      if (name == "train") return run_train(resolved);
      if (name == "eval") return run_eval(resolved);
      if (name == "sample") return run_sample(resolved);
      if (name == "gradcheck") return run_gradcheck(resolved);
      if (name == "sweep") return run_sweep(resolved);
      if (name == "ablate") return run_ablate(resolved);
    }
  } catch (const NumericError& e) {
    report_error("numeric", e.what());
    return kExitNumeric;
  } catch (const ConfigError& e) {
    report_error("config", e.what());
    return kExitContract;
  } catch (const ContractError& e) {
    report_error("contract", e.what());
    return kExitContract;
  } catch (const VocabularyError& e) {
    report_error("vocabulary", e.what());
    return kExitContract;
  } catch (const FormatError& e) {
    report_error("format", e.what());
    return kExitContract;
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return kExitContract;
  }
  return kExitContract;
}
