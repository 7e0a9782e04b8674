#include "doprompt/cli.hpp"

#include <fmt/format.h>
#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <map>
#include <optional>
#include <sstream>

#include "doprompt/analysis.hpp"
#include "doprompt/checkpoint.hpp"
#include "doprompt/errors.hpp"
#include "doprompt/pipeline.hpp"
#include "doprompt/run_config.hpp"

namespace doprompt::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string data;
  std::string out;
  std::size_t workers = 1;
  // eval / analyze
  std::string checkpoint;
  std::string mode;
  std::string features = "auto";
  bool raw = false;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw FormatError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

fs::path output_dir(const Options& opt) {
  fs::path dir;
  if (!opt.out.empty()) {
    dir = opt.out;
  } else if (const char* env = std::getenv("DOPROMPT_OUT"); env != nullptr && *env != '\0') {
    dir = env;
  } else {
    dir = "doprompt_out";
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

RunConfig load_config(const Options& opt) {
  RunConfig cfg;
  if (!opt.config.empty()) {
    cfg = load_run_config(opt.config);
  } else if (!opt.checkpoint.empty()) {
    // A run directory keeps the config next to its checkpoint.
    const fs::path beside = fs::path(opt.checkpoint).parent_path() / "config.txt";
    if (fs::exists(beside)) cfg = load_run_config(beside);
  }
  for (const std::string& s : opt.sets) cfg.apply(s);
  if (opt.seed) {
    cfg.train.seed = *opt.seed;
    cfg.seeds = {*opt.seed};
  }
  if (!opt.data.empty()) cfg.data = opt.data;
  return cfg;
}

SyntheticDataset load_data(RunConfig& cfg) {
  SyntheticDataset data;
  if (cfg.data.empty()) {
    data = generate_dataset(cfg.train.num_domains, cfg.train.per_domain, cfg.data_seed);
  } else {
    const fs::path p = cfg.data;
    if (!fs::exists(p)) throw FormatError("data path not found: " + p.string());
    data = fs::is_directory(p) ? import_raw_directory(p) : load_dataset(p);
  }
  cfg.train.num_domains = data.num_domains;
  return data;
}

std::vector<int> target_list(const RunConfig& cfg) {
  if (!cfg.targets.empty()) return cfg.targets;
  std::vector<int> all;
  for (std::size_t d = 0; d < cfg.train.num_domains; ++d) all.push_back(static_cast<int>(d));
  return all;
}

std::string domain_name(const SyntheticDataset& data, int d) {
  if (d >= 0 && static_cast<std::size_t>(d) < data.domain_names.size()) {
    return data.domain_names[static_cast<std::size_t>(d)];
  }
  return "domain" + std::to_string(d);
}

Json config_json(const RunConfig& cfg) {
  Json j = Json::object();
  std::istringstream in(cfg.to_text());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) j[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return j;
}

std::string_view mode_name(InferenceMode m) {
  switch (m) {
    case InferenceMode::adapted: return "adapted";
    case InferenceMode::prompt_free: return "prompt_free";
    case InferenceMode::prompt_averaged: return "prompt_averaged";
  }
  return "unknown";
}

InferenceMode parse_mode(std::string_view s) {
  if (s == "adapted") return InferenceMode::adapted;
  if (s == "prompt_free") return InferenceMode::prompt_free;
  if (s == "prompt_averaged") return InferenceMode::prompt_averaged;
  throw ConfigError(fmt::format("unknown inference mode '{}'", s));
}

int code_for_current_exception(std::ostream& err) {
  try {
    throw;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const FormatError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

// ---- train -----------------------------------------------------------------

Json train_into(const RunConfig& cfg, const SyntheticDataset& data, const fs::path& dir,
                std::ostream& out) {
  fs::create_directories(dir);
  const ExperimentResult r = run_experiment(data, cfg.train, [&](const std::string& line) {
    out << line << "\n";
    out.flush();
  });
  save_checkpoint(dir / "checkpoint.dpt", r.best.checkpoint_tensors());
  write_text(dir / "loss_curve.csv", loss_curve_csv(r.loss_curve));
  write_text(dir / "config.txt", cfg.to_text());

  std::size_t n_train = 0, n_val = 0;
  for (const auto& v : r.split.train) n_train += v.size();
  for (const auto& v : r.split.validation) n_val += v.size();
  Json sources = Json::array(), source_names = Json::array();
  for (int d : r.split.source_domains) {
    sources.push_back(d);
    source_names.push_back(domain_name(data, d));
  }
  Json report;
  report["variant"] = std::string(variant_name(r.variant));
  report["target_domain"] = r.target_domain;
  report["target_domain_name"] = domain_name(data, r.target_domain);
  report["seed"] = r.seed;
  report["source_domains"] = sources;
  report["source_domain_names"] = source_names;
  report["inference_mode"] = std::string(mode_name(inference_mode_for(r.variant)));
  report["chosen_step"] = r.selection.chosen_step;
  report["val_acc"] = r.selection.chosen_val_acc;
  report["test_acc"] = r.test_acc;
  report["selection"] = {{"steps", r.selection.steps}, {"val_acc", r.selection.val_acc}};
  report["split"] = {{"train", n_train},
                     {"validation", n_val},
                     {"test", r.split.test.size()},
                     {"val_fraction", cfg.train.val_fraction}};
  report["loss_curve_csv_path"] = "loss_curve.csv";
  report["checkpoint_path"] = "checkpoint.dpt";
  report["dataset"] = {{"num_images", data.size()},
                       {"num_domains", data.num_domains},
                       {"num_classes", data.num_classes},
                       {"seed", data.seed},
                       {"domain_names", data.domain_names}};
  report["config"] = config_json(cfg);
  write_text(dir / "report.json", report.dump(2) + "\n");
  return report;
}

int cmd_train(const Options& opt, std::ostream& out) {
  RunConfig cfg = load_config(opt);
  SyntheticDataset data = load_data(cfg);
  cfg.validate();
  const fs::path dir = output_dir(opt);
  const Json report = train_into(cfg, data, dir, out);
  out << fmt::format("{} target={} ({}) seed={}: chosen step {} val {:.2f}% test {:.2f}%\n",
                     report["variant"].get<std::string>(), cfg.train.target_domain,
                     report["target_domain_name"].get<std::string>(), cfg.train.seed,
                     report["chosen_step"].get<std::size_t>(), report["val_acc"].get<double>(),
                     report["test_acc"].get<double>());
  out << "wrote " << (dir / "report.json").string() << "\n";
  return kOk;
}

// ---- sweeps ------------------------------------------------------------------

struct Job {
  RunConfig cfg;
  fs::path dir;
};

int run_job(const Job& job, const SyntheticDataset& data, std::ostream& out, std::ostream& err) {
  try {
    train_into(job.cfg, data, job.dir, out);
    return kOk;
  } catch (...) {
    err << job.dir.string() << ": ";
    return code_for_current_exception(err);
  }
}

/// Runs every job, in up to `workers` forked processes, and returns the exit
/// code of each.
std::vector<int> run_jobs(const std::vector<Job>& jobs, const SyntheticDataset& data,
                          std::size_t workers, std::ostream& out, std::ostream& err) {
  std::vector<int> codes(jobs.size(), kFailure);
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) codes[i] = run_job(jobs[i], data, out, err);
    return codes;
  }
  out.flush();
  err.flush();
  std::map<pid_t, std::size_t> running;
  std::size_t next = 0;
  while (next < jobs.size() || !running.empty()) {
    while (next < jobs.size() && running.size() < workers) {
      const pid_t pid = fork();
      if (pid < 0) throw FormatError("fork failed");
      if (pid == 0) {
        const int code = run_job(jobs[next], data, out, err);
        out.flush();
        err.flush();
        _exit(code);
      }
      running[pid] = next++;
    }
    int status = 0;
    const pid_t done = waitpid(-1, &status, 0);
    if (done < 0) throw FormatError("waitpid failed");
    auto it = running.find(done);
    if (it == running.end()) continue;
    codes[it->second] = WIFEXITED(status) ? WEXITSTATUS(status) : kFailure;
    running.erase(it);
  }
  return codes;
}

double read_test_acc(const fs::path& dir) {
  const Json report = Json::parse(read_text(dir / "report.json"));
  return report.at("test_acc").get<double>();
}

struct CellStats {
  double mean = kNaN;
  double std = kNaN;
};

CellStats summarize(const std::vector<double>& v) {
  CellStats s;
  if (v.empty() || std::any_of(v.begin(), v.end(), [](double x) { return std::isnan(x); })) return s;
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return s;
}

std::string cell_text(const CellStats& s) {
  if (std::isnan(s.mean)) return "nan";
  return fmt::format("{:.2f}±{:.2f}", s.mean, s.std);
}

Json json_number(double v) { return std::isnan(v) ? Json(nullptr) : Json(v); }

// acc[row][target][seed] -> per-target cells plus the per-seed average cell.
struct SweepTable {
  std::vector<std::string> rows;
  std::vector<std::vector<std::vector<double>>> acc;
};

std::vector<std::vector<CellStats>> table_cells(const SweepTable& t) {
  std::vector<std::vector<CellStats>> cells;
  for (const auto& per_target : t.acc) {
    std::vector<CellStats> row;
    for (const auto& seeds : per_target) row.push_back(summarize(seeds));
    const std::size_t n_seeds = per_target.empty() ? 0 : per_target[0].size();
    std::vector<double> averages;
    for (std::size_t s = 0; s < n_seeds; ++s) {
      double sum = 0.0;
      for (const auto& seeds : per_target) sum += seeds[s];
      averages.push_back(sum / static_cast<double>(per_target.size()));
    }
    row.push_back(summarize(averages));
    cells.push_back(std::move(row));
  }
  return cells;
}

void print_table(std::ostream& out, const std::string& corner, const std::vector<std::string>& columns,
                 const std::vector<std::string>& rows,
                 const std::vector<std::vector<std::string>>& cells) {
  std::size_t first = corner.size();
  for (const auto& r : rows) first = std::max(first, r.size());
  std::vector<std::size_t> widths;
  for (std::size_t c = 0; c < columns.size(); ++c) {
    std::size_t w = columns[c].size();
    for (const auto& row : cells) w = std::max(w, row[c].size());
    widths.push_back(w);
  }
  out << fmt::format("{:<{}}", corner, first);
  for (std::size_t c = 0; c < columns.size(); ++c) out << fmt::format("  {:>{}}", columns[c], widths[c]);
  out << "\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out << fmt::format("{:<{}}", rows[r], first);
    for (std::size_t c = 0; c < columns.size(); ++c) {
      // "±" is two bytes but one column wide.
      const std::size_t extra = cells[r][c].find("±") != std::string::npos ? 1 : 0;
      out << fmt::format("  {:>{}}", cells[r][c], widths[c] + extra);
    }
    out << "\n";
  }
}

std::string csv_line(const std::vector<std::string>& fields) {
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) line += ',';
    line += fields[i];
  }
  return line + "\n";
}

int first_failure(const std::vector<int>& codes) {
  for (int c : codes) {
    if (c != kOk) return c;
  }
  return kOk;
}

int cmd_ablate(const Options& opt, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_config(opt);
  SyntheticDataset data = load_data(cfg);
  cfg.validate();
  const fs::path dir = output_dir(opt);
  const auto targets = target_list(cfg);
  const auto& variants = all_variants();

  std::vector<Job> jobs;
  for (Variant v : variants) {
    for (int t : targets) {
      for (std::uint64_t s : cfg.seeds) {
        Job job{cfg, dir / "runs" / std::string(variant_name(v)) / fmt::format("t{}_s{}", t, s)};
        job.cfg.train.variant = v;
        job.cfg.train.target_domain = t;
        job.cfg.train.seed = s;
        job.cfg.seeds = {s};
        job.cfg.targets = {t};
        jobs.push_back(std::move(job));
      }
    }
  }
  const auto codes = run_jobs(jobs, data, opt.workers, out, err);

  SweepTable table;
  Json runs = Json::array();
  std::size_t j = 0;
  for (Variant v : variants) {
    table.rows.emplace_back(variant_name(v));
    std::vector<std::vector<double>> per_target;
    for (int t : targets) {
      std::vector<double> seeds;
      for (std::uint64_t s : cfg.seeds) {
        const double acc = codes[j] == kOk ? read_test_acc(jobs[j].dir) : kNaN;
        seeds.push_back(acc);
        runs.push_back({{"variant", std::string(variant_name(v))},
                        {"target_domain", t},
                        {"seed", s},
                        {"exit_code", codes[j]},
                        {"test_acc", json_number(acc)},
                        {"report", fs::relative(jobs[j].dir / "report.json", dir).string()}});
        ++j;
      }
      per_target.push_back(std::move(seeds));
    }
    table.acc.push_back(std::move(per_target));
  }

  const auto cells = table_cells(table);
  std::vector<std::string> columns;
  for (int t : targets) columns.push_back(domain_name(data, t));
  columns.emplace_back("average");
  std::vector<std::string> header{"variant"};
  header.insert(header.end(), columns.begin(), columns.end());
  std::string csv = csv_line(header);
  std::vector<std::vector<std::string>> text_cells;
  Json summary = Json::array();
  for (std::size_t r = 0; r < cells.size(); ++r) {
    std::vector<std::string> fields{table.rows[r]};
    std::vector<std::string> texts;
    Json row = {{"variant", table.rows[r]}};
    Json jcells = Json::object();
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      texts.push_back(cell_text(cells[r][c]));
      jcells[columns[c]] = {{"mean", json_number(cells[r][c].mean)}, {"std", json_number(cells[r][c].std)}};
    }
    fields.insert(fields.end(), texts.begin(), texts.end());
    csv += csv_line(fields);
    text_cells.push_back(std::move(texts));
    row["cells"] = jcells;
    summary.push_back(row);
  }
  write_text(dir / "ablation.csv", csv);
  Json doc;
  doc["targets"] = targets;
  doc["seeds"] = cfg.seeds;
  doc["table"] = summary;
  doc["runs"] = runs;
  doc["config"] = config_json(cfg);
  write_text(dir / "ablation.json", doc.dump(2) + "\n");
  print_table(out, "variant", columns, table.rows, text_cells);
  out << "wrote " << (dir / "ablation.csv").string() << "\n";
  return first_failure(codes);
}

int cmd_sweep_length(const Options& opt, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_config(opt);
  SyntheticDataset data = load_data(cfg);
  cfg.validate();
  const fs::path dir = output_dir(opt);
  const auto targets = target_list(cfg);

  std::vector<Job> jobs;
  for (std::size_t len : cfg.lengths) {
    for (int t : targets) {
      for (std::uint64_t s : cfg.seeds) {
        Job job{cfg, dir / "runs" / fmt::format("L{}", len) / fmt::format("t{}_s{}", t, s)};
        job.cfg.train.prompt_length = len;
        job.cfg.train.target_domain = t;
        job.cfg.train.seed = s;
        job.cfg.seeds = {s};
        job.cfg.targets = {t};
        jobs.push_back(std::move(job));
      }
    }
  }
  const auto codes = run_jobs(jobs, data, opt.workers, out, err);

  SweepTable table;
  std::size_t j = 0;
  for (std::size_t len : cfg.lengths) {
    table.rows.push_back(std::to_string(len));
    std::vector<std::vector<double>> per_target;
    for (std::size_t ti = 0; ti < targets.size(); ++ti) {
      std::vector<double> seeds;
      for (std::size_t si = 0; si < cfg.seeds.size(); ++si, ++j) {
        seeds.push_back(codes[j] == kOk ? read_test_acc(jobs[j].dir) : kNaN);
      }
      per_target.push_back(std::move(seeds));
    }
    table.acc.push_back(std::move(per_target));
  }
  const auto cells = table_cells(table);
  std::vector<std::string> columns;
  for (int t : targets) columns.push_back(domain_name(data, t));
  columns.emplace_back("average");
  std::vector<std::string> header{"prompt_length"};
  header.insert(header.end(), columns.begin(), columns.end());
  std::string csv = csv_line(header);
  std::vector<std::vector<std::string>> text_cells;
  Json rows = Json::array();
  for (std::size_t r = 0; r < cells.size(); ++r) {
    std::vector<std::string> fields{table.rows[r]};
    std::vector<std::string> texts;
    Json means = Json::object();
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      fields.push_back(std::isnan(cells[r][c].mean) ? "nan" : fmt::format("{:.4f}", cells[r][c].mean));
      texts.push_back(cell_text(cells[r][c]));
      means[columns[c]] = json_number(cells[r][c].mean);
    }
    csv += csv_line(fields);
    text_cells.push_back(std::move(texts));
    rows.push_back({{"prompt_length", cfg.lengths[r]}, {"mean_test_acc", means}});
  }
  write_text(dir / "sweep_length.csv", csv);
  Json doc;
  doc["lengths"] = cfg.lengths;
  doc["targets"] = targets;
  doc["seeds"] = cfg.seeds;
  doc["rows"] = rows;
  doc["config"] = config_json(cfg);
  write_text(dir / "sweep_length.json", doc.dump(2) + "\n");
  print_table(out, "L", columns, table.rows, text_cells);
  out << "wrote " << (dir / "sweep_length.csv").string() << "\n";
  return first_failure(codes);
}

// ---- gen-data ----------------------------------------------------------------

int cmd_gen_data(const Options& opt, std::ostream& out) {
  RunConfig cfg = load_config(opt);
  if (opt.seed) cfg.data_seed = *opt.seed;
  cfg.train.validate();
  const SyntheticDataset data =
      generate_dataset(cfg.train.num_domains, cfg.train.per_domain, cfg.data_seed);
  const fs::path dir = output_dir(opt);
  fs::path written;
  if (opt.raw) {
    written = dir / "dataset_raw";
    export_raw_directory(written, data);
  } else {
    written = dir / "dataset.dpd";
    save_dataset(written, data);
  }
  for (const auto& w : data.warnings) out << "warning: " << w << "\n";
  out << fmt::format("{} images, {} domains ({}), {} classes, seed {}\n", data.size(),
                     data.num_domains, fmt::join(data.domain_names, ", "), data.num_classes,
                     data.seed);
  const DistanceReport report = domain_distance(raw_pixel_features(data));
  out << fmt::format("raw-pixel cross/in distance ratio {:.4f}\n", report.cross_in_ratio);
  out << "wrote " << written.string() << "\n";
  return kOk;
}

// ---- eval / analyze ----------------------------------------------------------

DoPromptModel load_model(const fs::path& path, const RunConfig& cfg) {
  const auto tensors = load_checkpoint(path);
  const Tensor* bank = nullptr;
  for (const auto& nt : tensors) {
    if (nt.name == "prompts.bank") bank = &nt.tensor;
  }
  if (bank == nullptr || bank->rank() != 3) throw FormatError("checkpoint: no prompts.bank tensor");
  DoPromptModel model = DoPromptModel::init(cfg.train.model, bank->dim(0), bank->dim(1), 0);
  auto named = model.named();
  assign_named(tensors, named);
  return model;
}

void require_checkpoint(const Options& opt) {
  if (opt.checkpoint.empty()) throw ConfigError("--checkpoint is required for this mode");
}

int cmd_eval(const Options& opt, std::ostream& out) {
  require_checkpoint(opt);
  RunConfig cfg = load_config(opt);
  SyntheticDataset data = load_data(cfg);
  cfg.validate();
  const DoPromptModel model = load_model(opt.checkpoint, cfg);
  const InferenceMode mode =
      opt.mode.empty() ? inference_mode_for(cfg.train.variant) : parse_mode(opt.mode);
  const DomainSplit split = split_domains(data, cfg.train.target_domain, cfg.train.val_fraction, cfg.train.seed);
  std::vector<std::size_t> validation;
  for (const auto& v : split.validation) validation.insert(validation.end(), v.begin(), v.end());

  Json doc;
  doc["checkpoint"] = fs::path(opt.checkpoint).filename().string();
  doc["mode"] = std::string(mode_name(mode));
  doc["target_domain"] = cfg.train.target_domain;
  doc["test_acc"] = evaluate_accuracy(model, data, split.test, mode);
  doc["val_acc"] = evaluate_accuracy(model, data, validation, mode);
  Json per_domain = Json::object();
  std::vector<std::string> rows;
  std::vector<std::vector<std::string>> cells;
  for (std::size_t d = 0; d < data.num_domains; ++d) {
    const auto idx = data.indices_of_domain(static_cast<int>(d));
    if (idx.empty()) continue;
    const double acc = evaluate_accuracy(model, data, idx, mode);
    per_domain[domain_name(data, static_cast<int>(d))] = acc;
    rows.push_back(domain_name(data, static_cast<int>(d)) +
                   (static_cast<int>(d) == cfg.train.target_domain ? " (target)" : ""));
    cells.push_back({fmt::format("{:.2f}", acc)});
  }
  doc["per_domain_acc"] = per_domain;
  print_table(out, "domain", {std::string(mode_name(mode))}, rows, cells);
  out << fmt::format("target test {:.2f}%  source validation {:.2f}%\n", doc["test_acc"].get<double>(),
                     doc["val_acc"].get<double>());
  if (!opt.out.empty() || std::getenv("DOPROMPT_OUT") != nullptr) {
    const fs::path dir = output_dir(opt);
    write_text(dir / "eval.json", doc.dump(2) + "\n");
    out << "wrote " << (dir / "eval.json").string() << "\n";
  }
  return kOk;
}

std::string matrix_csv(const std::vector<std::string>& names, const std::vector<double>& m,
                       std::size_t cols, const std::vector<std::string>& col_names) {
  std::vector<std::string> header{"domain"};
  header.insert(header.end(), col_names.begin(), col_names.end());
  std::string csv = csv_line(header);
  for (std::size_t r = 0; r < names.size(); ++r) {
    std::vector<std::string> fields{names[r]};
    for (std::size_t c = 0; c < cols; ++c) fields.push_back(fmt::format("{:.6f}", m[r * cols + c]));
    csv += csv_line(fields);
  }
  return csv;
}

std::vector<std::vector<std::string>> matrix_cells(const std::vector<double>& m, std::size_t rows,
                                                   std::size_t cols, const char* format) {
  std::vector<std::vector<std::string>> cells(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) cells[r].push_back(fmt::format(fmt::runtime(format), m[r * cols + c]));
  }
  return cells;
}

int analyze_distance(const Options& opt, RunConfig& cfg, const SyntheticDataset& data,
                     const fs::path& dir, std::ostream& out) {
  bool use_model = false;
  if (opt.features == "model") {
    require_checkpoint(opt);
    use_model = true;
  } else if (opt.features == "auto") {
    use_model = !opt.checkpoint.empty();
  } else if (opt.features != "raw") {
    throw ConfigError(fmt::format("unknown feature source '{}' (raw, model)", opt.features));
  }
  const auto features =
      use_model ? model_features(load_model(opt.checkpoint, cfg), data) : raw_pixel_features(data);
  const DistanceReport report = domain_distance(features);
  const std::size_t k = report.num_domains;
  std::vector<std::string> names;
  for (std::size_t d = 0; d < k; ++d) names.push_back(domain_name(data, static_cast<int>(d)));
  write_text(dir / "domain_distance.csv", matrix_csv(names, report.domain_dist, k, names));
  write_text(dir / "class_distance.csv", matrix_csv(names, report.class_dist, k, names));
  Json doc;
  doc["features"] = use_model ? "model" : "raw";
  doc["domains"] = names;
  doc["in_dist"] = report.in_dist;
  Json dd = Json::array(), cd = Json::array();
  for (std::size_t i = 0; i < k; ++i) {
    Json a = Json::array(), b = Json::array();
    for (std::size_t j = 0; j < k; ++j) {
      a.push_back(json_number(report.dist(i, j)));
      b.push_back(json_number(report.cls(i, j)));
    }
    dd.push_back(a);
    cd.push_back(b);
  }
  doc["domain_dist"] = dd;
  doc["class_dist"] = cd;
  doc["cross_in_ratio"] = json_number(report.cross_in_ratio);
  doc["cross_in_class_ratio"] = json_number(report.cross_in_class_ratio);
  doc["warnings"] = report.warnings;
  write_text(dir / "distance.json", doc.dump(2) + "\n");

  for (const auto& w : report.warnings) out << "warning: " << w << "\n";
  out << "normalized domain distance (" << (use_model ? "model" : "raw-pixel") << " features)\n";
  print_table(out, "domain", names, names, matrix_cells(report.domain_dist, k, k, "{:.4f}"));
  out << "averaged class distance\n";
  print_table(out, "domain", names, names, matrix_cells(report.class_dist, k, k, "{:.4f}"));
  out << fmt::format("cross/in dist {:.4f}   cross/in class dist {:.4f}\n", report.cross_in_ratio,
                     report.cross_in_class_ratio);
  return kOk;
}

int analyze_weights(const Options& opt, const RunConfig& cfg, const SyntheticDataset& data,
                    const fs::path& dir, std::ostream& out) {
  require_checkpoint(opt);
  const DoPromptModel model = load_model(opt.checkpoint, cfg);
  const DomainSplit split = split_domains(data, cfg.train.target_domain, cfg.train.val_fraction, cfg.train.seed);
  if (split.source_domains.size() != model.num_domains()) {
    throw ConfigError(fmt::format("checkpoint has {} domain prompts but target_domain {} leaves {} sources",
                                  model.num_domains(), cfg.train.target_domain, split.source_domains.size()));
  }
  // Source domains are read on their validation split, the target on all of it.
  std::vector<std::vector<std::size_t>> rows;
  std::vector<int> ids;
  for (std::size_t d = 0; d < data.num_domains; ++d) {
    const auto pos = std::find(split.source_domains.begin(), split.source_domains.end(), static_cast<int>(d));
    rows.push_back(pos == split.source_domains.end()
                       ? split.test
                       : split.validation[static_cast<std::size_t>(pos - split.source_domains.begin())]);
    ids.push_back(static_cast<int>(d));
  }
  const AdapterWeightStats stats = adapter_weight_stats(model, data, rows, ids);
  std::vector<std::string> row_names, col_names;
  for (int d : stats.evaluated) {
    row_names.push_back(domain_name(data, d) + (d == cfg.train.target_domain ? " (target)" : ""));
  }
  for (int d : split.source_domains) col_names.push_back(domain_name(data, d));
  const std::size_t k = stats.num_sources;
  write_text(dir / "weights_percentage.csv", matrix_csv(row_names, stats.percentage, k, col_names));
  write_text(dir / "weights_average.csv", matrix_csv(row_names, stats.average, k, col_names));
  Json doc;
  doc["sources"] = col_names;
  Json jrows = Json::array();
  for (std::size_t r = 0; r < stats.evaluated.size(); ++r) {
    jrows.push_back({{"domain", domain_name(data, stats.evaluated[r])},
                     {"samples", stats.counts[r]},
                     {"percentage", std::vector<double>(stats.percentage.begin() + static_cast<std::ptrdiff_t>(r * k),
                                                        stats.percentage.begin() + static_cast<std::ptrdiff_t>((r + 1) * k))},
                     {"average", std::vector<double>(stats.average.begin() + static_cast<std::ptrdiff_t>(r * k),
                                                     stats.average.begin() + static_cast<std::ptrdiff_t>((r + 1) * k))}});
  }
  doc["rows"] = jrows;
  doc["warnings"] = stats.warnings;
  write_text(dir / "weights.json", doc.dump(2) + "\n");
  for (const auto& w : stats.warnings) out << "warning: " << w << "\n";
  out << "argmax share (%)\n";
  print_table(out, "domain", col_names, row_names, matrix_cells(stats.percentage, row_names.size(), k, "{:.1f}"));
  out << "average weight\n";
  print_table(out, "domain", col_names, row_names, matrix_cells(stats.average, row_names.size(), k, "{:.3f}"));
  return kOk;
}

int analyze_prompt_table(const Options& opt, const RunConfig& cfg, const SyntheticDataset& data,
                         const fs::path& dir, std::ostream& out) {
  require_checkpoint(opt);
  const DoPromptModel model = load_model(opt.checkpoint, cfg);
  const DomainSplit split = split_domains(data, cfg.train.target_domain, cfg.train.val_fraction, cfg.train.seed);
  if (split.source_domains.size() != model.num_domains()) {
    throw ConfigError(fmt::format("checkpoint has {} domain prompts but target_domain {} leaves {} sources",
                                  model.num_domains(), cfg.train.target_domain, split.source_domains.size()));
  }
  const PromptAccuracyTable table = per_prompt_accuracy_table(model, data, split.test);
  std::vector<std::string> columns{"adapted"};
  for (int d : split.source_domains) columns.push_back(domain_name(data, d));
  std::vector<std::string> accs;
  for (double a : table.accuracy) accs.push_back(fmt::format("{:.4f}", a));
  write_text(dir / "prompt_table.csv", csv_line(columns) + csv_line(accs));

  std::string dump = "column,sample,label";
  for (std::size_t c = 0; c < table.num_classes; ++c) dump += fmt::format(",logit{}", c);
  dump += "\n";
  const std::size_t n = table.labels.size();
  for (std::size_t col = 0; col < table.logits.size(); ++col) {
    for (std::size_t i = 0; i < n; ++i) {
      dump += fmt::format("{},{},{}", columns[col], i, table.labels[i]);
      for (std::size_t c = 0; c < table.num_classes; ++c) {
        dump += fmt::format(",{}", table.logits[col][i * table.num_classes + c]);
      }
      dump += "\n";
    }
  }
  write_text(dir / "prompt_logits.csv", dump);
  Json doc;
  doc["target_domain"] = domain_name(data, cfg.train.target_domain);
  doc["samples"] = n;
  Json acc = Json::object();
  for (std::size_t c = 0; c < columns.size(); ++c) acc[columns[c]] = table.accuracy[c];
  doc["accuracy"] = acc;
  write_text(dir / "prompt_table.json", doc.dump(2) + "\n");
  std::vector<std::vector<std::string>> cells{{}};
  for (double a : table.accuracy) cells[0].push_back(fmt::format("{:.2f}", a));
  print_table(out, "target", columns, {domain_name(data, cfg.train.target_domain)}, cells);
  return kOk;
}

int cmd_analyze(const Options& opt, std::ostream& out) {
  RunConfig cfg = load_config(opt);
  SyntheticDataset data = load_data(cfg);
  cfg.validate();
  const fs::path dir = output_dir(opt);
  if (opt.mode == "distance") return analyze_distance(opt, cfg, data, dir, out);
  if (opt.mode == "weights") return analyze_weights(opt, cfg, data, dir, out);
  if (opt.mode == "prompt-table") return analyze_prompt_table(opt, cfg, data, dir, out);
  throw ConfigError(fmt::format("unknown analyze mode '{}' (distance, weights, prompt-table)", opt.mode));
}

void add_common(CLI::App* cmd, Options& opt, bool sweep) {
  cmd->add_option("--config", opt.config, "Run config file (key = value lines)");
  cmd->add_option("--set", opt.sets, "Override a config key, KEY=VALUE (repeatable)");
  cmd->add_option("--seed", opt.seed, "Seed for every random stream of the run");
  cmd->add_option("--data", opt.data, "Dataset file (.dpd) or raw-array directory");
  cmd->add_option("--out", opt.out, "Output directory (default $DOPROMPT_OUT or ./doprompt_out)");
  if (sweep) {
    cmd->add_option("--workers", opt.workers, "Parallel worker processes")->check(CLI::PositiveNumber);
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Domain-prompt learning for vision transformers on synthetic multi-domain data",
               "doprompt"};
  app.require_subcommand(1);
  Options opt;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic multi-domain dataset");
  add_common(gen, opt, false);
  gen->add_flag("--raw", opt.raw, "Write the directory-of-raw-arrays layout instead of .dpd");

  auto* train = app.add_subcommand("train", "Train one variant with one domain held out");
  add_common(train, opt, false);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval, opt, false);
  eval->add_option("--checkpoint", opt.checkpoint, "Checkpoint file")->required();
  eval->add_option("--mode", opt.mode, "adapted, prompt_free or prompt_averaged (default: by variant)");

  auto* ablate = app.add_subcommand("ablate", "Run every variant over targets and seeds");
  add_common(ablate, opt, true);

  auto* sweep = app.add_subcommand("sweep-length", "Run over the prompt-length grid");
  add_common(sweep, opt, true);

  auto* analyze = app.add_subcommand("analyze", "Domain distances and adapter diagnostics");
  add_common(analyze, opt, false);
  analyze->add_option("--checkpoint", opt.checkpoint, "Checkpoint file");
  analyze->add_option("--mode", opt.mode, "distance, weights or prompt-table")->required();
  analyze->add_option("--features", opt.features, "Distance features: raw, model or auto");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << "run 'doprompt --help' for usage\n";
    return kConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(opt, out);
    if (train->parsed()) return cmd_train(opt, out);
    if (eval->parsed()) return cmd_eval(opt, out);
    if (ablate->parsed()) return cmd_ablate(opt, out, err);
    if (sweep->parsed()) return cmd_sweep_length(opt, out, err);
    if (analyze->parsed()) return cmd_analyze(opt, out);
  } catch (...) {
    return code_for_current_exception(err);
  }
  return kFailure;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace doprompt::cli
