#include "memreg/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace memreg {

namespace {

std::string fd(double v) {
  char b[40];
  std::snprintf(b, sizeof(b), "%.9g", v);
  return b;
}

bool valid_arm_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.' && c != '-')
      return false;
  return true;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// ---------------------------------------------------------------------------
// per-run metrics file

std::string metrics_header(std::size_t num_classes) {
  std::string h =
      "arm,seed,stage,lambda_mr,status,aux_miou,primary_miou,fused_miou,"
      "disagreement_rate,source_draws,target_draws,best_iter";
  for (std::size_t i = 0; i < num_classes; ++i) h += ",iou_c" + std::to_string(i);
  return h;
}

std::string format_row(const ReportRow& r) {
  if (r.failed) return r.arm + "," + r.seed + ",,,FAILED,,,,,,,";
  std::string line = r.arm + "," + r.seed + "," + std::to_string(r.stage) + "," +
                     fd(r.lambda_mr) + ",ok," + fd(r.aux_miou) + "," + fd(r.primary_miou) +
                     "," + fd(r.fused_miou) + "," + fd(r.disagreement_rate) + "," +
                     fd(r.source_draws) + "," + fd(r.target_draws) + "," + fd(r.best_iter);
  for (double v : r.per_class_iou) line += "," + fd(v);
  return line;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double field_num(const std::string& s) { return s.empty() ? 0.0 : std::strtod(s.c_str(), nullptr); }

ReportRow parse_row(const std::string& line) {
  auto f = split_csv(line);
  if (f.size() < 12)
    throw std::runtime_error("metrics row has " + std::to_string(f.size()) +
                             " fields, expected at least 12: " + line);
  ReportRow r;
  r.arm = f[0];
  r.seed = f[1];
  r.failed = (f[4] == "FAILED");
  r.raw_line = line;
  if (r.failed) return r;
  r.stage = static_cast<int>(field_num(f[2]));
  r.lambda_mr = field_num(f[3]);
  r.aux_miou = field_num(f[5]);
  r.primary_miou = field_num(f[6]);
  r.fused_miou = field_num(f[7]);
  r.disagreement_rate = field_num(f[8]);
  r.source_draws = field_num(f[9]);
  r.target_draws = field_num(f[10]);
  r.best_iter = field_num(f[11]);
  for (std::size_t i = 12; i < f.size(); ++i) r.per_class_iou.push_back(field_num(f[i]));
  return r;
}

ReportRow make_row(const std::string& arm, std::uint64_t seed, int stage, double lambda,
                   const RunMetrics& eval, const RunMetrics& train) {
  ReportRow r;
  r.arm = arm;
  r.seed = std::to_string(seed);
  r.stage = stage;
  r.lambda_mr = lambda;
  r.aux_miou = eval.aux_miou;
  r.primary_miou = eval.primary_miou;
  r.fused_miou = eval.fused_miou;
  r.disagreement_rate = eval.disagreement_rate;
  r.source_draws = static_cast<double>(train.source_draws);
  r.target_draws = static_cast<double>(train.target_draws);
  r.best_iter = static_cast<double>(train.best_iter);
  r.per_class_iou = eval.per_class_iou;
  r.raw_line = format_row(r);
  return r;
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path);
  f << content;
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// plan plumbing

std::size_t thread_cap() {
  const char* env = std::getenv("MEMREG_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1)
    throw ConfigError("MEMREG_THREADS must be a positive integer, got '" + std::string(env) +
                      "'");
  return static_cast<std::size_t>(v);
}

void run_jobs(std::size_t threads, std::vector<std::function<void()>>& jobs) {
  if (threads <= 1 || jobs.size() <= 1) {
    for (auto& j : jobs) j();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::size_t n = std::min(threads, jobs.size());
  pool.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    pool.emplace_back([&] {
      for (std::size_t k; (k = next.fetch_add(1)) < jobs.size();) jobs[k]();
    });
  for (auto& t : pool) t.join();
}

std::string spec_sig(const DomainSpec& s) {
  std::string out = std::to_string(s.seed) + "|" + std::to_string(s.height) + "x" +
                    std::to_string(s.width) + "|" + std::to_string(s.num_classes);
  for (const auto& p : s.style.palette)
    out += "|" + fd(p[0]) + "," + fd(p[1]) + "," + fd(p[2]);
  out += "|" + fd(s.style.noise_sigma) + "," + fd(s.style.texture_freq) + "," +
         fd(s.style.texture_amp) + "," + fd(s.style.illum_strength);
  return out;
}

void clean_run_dir(const fs::path& dir) {
  fs::create_directories(dir);
  for (const char* name :
       {"config.cfg", "trace.csv", "checkpoint.bin", "metrics.csv", "FAILED", "alias.txt",
        "pseudo.bin", "log.txt", "timing.csv"})
    fs::remove(dir / name);
}

}  // namespace

DomainSpec source_for(const TrainConfig& cfg) {
  auto s = source_domain(cfg.seed);
  if (s.num_classes != cfg.num_classes)
    throw ConfigError("the shapes world provides " + std::to_string(s.num_classes) +
                      " classes; the config asks for " + std::to_string(cfg.num_classes));
  s.height = s.width = cfg.image_size;
  return s;
}

DomainSpec target_for(const TrainConfig& cfg) {
  auto t = target_domain(cfg.seed, cfg.style_shift);
  if (t.num_classes != cfg.num_classes)
    throw ConfigError("the shapes world provides " + std::to_string(t.num_classes) +
                      " classes; the config asks for " + std::to_string(cfg.num_classes));
  t.height = t.width = cfg.image_size;
  return t;
}

ExperimentPlan default_plan(const TrainConfig& base) {
  ExperimentPlan p;
  p.base = base;
  p.arms = {
      {"source_only", 1, {{"use_target", "false"}}, ""},
      {"adv_only", 1, {{"lambda_mr", "0"}}, ""},
      {"mr_only", 1, {{"adv_primary_weight", "0"}, {"adv_aux_weight", "0"}}, ""},
      {"full_stage1", 1, {}, ""},
      {"pseudo_only", 2, {{"lambda_mr", "0"}}, "full_stage1"},
      {"full_stage2", 2, {}, "full_stage1"},
  };
  for (double l : base.lambda_sweep) {
    char name[48];
    std::snprintf(name, sizeof(name), "lambda_%g", l);
    p.arms.push_back({name, 1, {{"lambda_mr", fd(l)}}, ""});
  }
  return p;
}

TrainConfig resolve_arm(const ExperimentPlan& plan, const ArmSpec& arm, std::uint64_t seed) {
  TrainConfig cfg = plan.base;
  const std::string where = "arm " + arm.name;
  for (const auto& [k, v] : arm.overrides) apply_config_entry(cfg, k, v, where);
  apply_config_entry(cfg, "seed", std::to_string(seed), where);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return cfg;
}

ExperimentPlan parse_plan(const std::string& text, const std::string& origin) {
  ExperimentPlan p;
  bool saw_arm = false;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto pos = line.find('#'); pos != std::string::npos) line = line.substr(0, pos);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(where + ": expected '<statement> = <value>', got '" + line + "'");
    std::string head = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    std::istringstream hs(head);
    std::string kind, name, extra;
    hs >> kind >> name;
    if (hs >> extra)
      throw ConfigError(where + ": unexpected token '" + extra + "' in '" + head + "'");

    if (kind == "seeds" && name.empty()) {
      p.seeds.clear();
      std::stringstream vs(value);
      std::string item;
      while (std::getline(vs, item, ',')) {
        item = trim(item);
        char* end = nullptr;
        unsigned long long v = std::strtoull(item.c_str(), &end, 10);
        if (item.empty() || *end != '\0')
          throw ConfigError(where + ": bad seed '" + item + "'");
        if (std::find(p.seeds.begin(), p.seeds.end(), v) != p.seeds.end())
          throw ConfigError(where + ": duplicate seed " + item);
        p.seeds.push_back(v);
      }
      if (p.seeds.empty()) throw ConfigError(where + ": empty seed list");
    } else if (kind == "out" && name.empty()) {
      if (value.empty()) throw ConfigError(where + ": empty output directory");
      p.out_dir = value;
    } else if (kind == "base" && !name.empty()) {
      apply_config_entry(p.base, name, value, where);
    } else if (kind == "arm" && !name.empty()) {
      if (!valid_arm_name(name))
        throw ConfigError(where + ": arm name '" + name +
                          "' may only use letters, digits, '_', '.', '-'");
      for (const auto& a : p.arms)
        if (a.name == name) throw ConfigError(where + ": duplicate arm '" + name + "'");
      ArmSpec arm;
      arm.name = name;
      if (value != "defaults") {
        std::stringstream vs(value);
        std::string ov;
        while (std::getline(vs, ov, ';')) {
          ov = trim(ov);
          if (ov.empty()) throw ConfigError(where + ": empty override in arm '" + name + "'");
          auto oeq = ov.find('=');
          if (oeq == std::string::npos)
            throw ConfigError(where + ": override '" + ov + "' is not key=value");
          std::string k = trim(ov.substr(0, oeq));
          std::string v = trim(ov.substr(oeq + 1));
          if (k == "stage") {
            if (v == "1")
              arm.stage = 1;
            else if (v == "2")
              arm.stage = 2;
            else
              throw ConfigError(where + ": stage must be 1 or 2, got '" + v + "'");
          } else if (k == "from") {
            if (!valid_arm_name(v)) throw ConfigError(where + ": bad upstream arm '" + v + "'");
            arm.from = v;
          } else {
            // Validate the key/value now so a broken plan fails before
            // any training starts.
            TrainConfig probe;
            apply_config_entry(probe, k, v, where);
            arm.overrides.emplace_back(k, v);
          }
        }
      }
      p.arms.push_back(std::move(arm));
      saw_arm = true;
    } else {
      throw ConfigError(where + ": unknown statement '" + head + "'");
    }
  }
  p.base.validate();
  if (!saw_arm) p.arms = default_plan(p.base).arms;
  return p;
}

ExperimentPlan load_plan(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open plan file '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_plan(text, path);
}

std::string metrics_file_content(const std::string& arm, std::uint64_t seed, int stage,
                                 double lambda_mr, const RunMetrics& eval,
                                 const RunMetrics& train) {
  ReportRow row = make_row(arm, seed, stage, lambda_mr, eval, train);
  return metrics_header(row.per_class_iou.size()) + "\n" + row.raw_line + "\n";
}

// ---------------------------------------------------------------------------
// report emission

std::vector<ReportRow> collect_rows(const std::string& out_dir) {
  std::vector<ReportRow> rows;
  if (!fs::is_directory(out_dir)) return rows;
  std::vector<std::string> arms;
  for (const auto& e : fs::directory_iterator(out_dir)) {
    if (!e.is_directory()) continue;
    std::string name = e.path().filename().string();
    if (name == "pseudo_labels") continue;
    arms.push_back(name);
  }
  std::sort(arms.begin(), arms.end());
  for (const auto& arm : arms) {
    std::vector<std::pair<std::uint64_t, fs::path>> seeds;
    for (const auto& e : fs::directory_iterator(fs::path(out_dir) / arm)) {
      if (!e.is_directory()) continue;
      std::string name = e.path().filename().string();
      if (name.empty() ||
          !std::all_of(name.begin(), name.end(),
                       [](unsigned char c) { return std::isdigit(c); }))
        continue;
      seeds.emplace_back(std::strtoull(name.c_str(), nullptr, 10), e.path());
    }
    std::sort(seeds.begin(), seeds.end());
    for (const auto& [seed, dir] : seeds) {
      if (fs::exists(dir / "metrics.csv")) {
        std::ifstream f(dir / "metrics.csv");
        std::string header, line;
        std::getline(f, header);
        if (std::getline(f, line) && !trim(line).empty()) rows.push_back(parse_row(trim(line)));
      } else if (fs::exists(dir / "FAILED")) {
        ReportRow r;
        r.arm = arm;
        r.seed = std::to_string(seed);
        r.failed = true;
        r.raw_line = format_row(r);
        rows.push_back(r);
      }
    }
  }
  return rows;
}

namespace {

std::vector<ReportRow> arm_means(const std::vector<ReportRow>& rows) {
  std::vector<ReportRow> means;
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ReportRow*>> by_arm;
  for (const auto& r : rows) {
    if (r.failed) continue;
    if (!by_arm.count(r.arm)) order.push_back(r.arm);
    by_arm[r.arm].push_back(&r);
  }
  for (const auto& arm : order) {
    const auto& rs = by_arm[arm];
    ReportRow m = *rs[0];
    m.seed = "mean";
    m.aux_miou = m.primary_miou = m.fused_miou = m.disagreement_rate = 0.0;
    m.source_draws = m.target_draws = m.best_iter = 0.0;
    const double n = static_cast<double>(rs.size());
    std::size_t nc = rs[0]->per_class_iou.size();
    std::vector<double> class_sum(nc, 0.0);
    std::vector<double> class_n(nc, 0.0);
    for (const auto* r : rs) {
      m.aux_miou += r->aux_miou / n;
      m.primary_miou += r->primary_miou / n;
      m.fused_miou += r->fused_miou / n;
      m.disagreement_rate += r->disagreement_rate / n;
      m.source_draws += r->source_draws / n;
      m.target_draws += r->target_draws / n;
      m.best_iter += r->best_iter / n;
      for (std::size_t c = 0; c < nc && c < r->per_class_iou.size(); ++c)
        if (r->per_class_iou[c] >= 0.0) {
          class_sum[c] += r->per_class_iou[c];
          class_n[c] += 1.0;
        }
    }
    m.per_class_iou.assign(nc, -1.0);
    for (std::size_t c = 0; c < nc; ++c)
      if (class_n[c] > 0.0) m.per_class_iou[c] = class_sum[c] / class_n[c];
    m.raw_line = format_row(m);
    means.push_back(std::move(m));
  }
  return means;
}

std::string render_text(const std::vector<ReportRow>& rows, const std::vector<ReportRow>& means) {
  std::string out = "ablation report\n===============\n\n";
  char buf[200];
  out += "arm means over seeds (mIoU in percent, disagreement as a fraction)\n\n";
  std::snprintf(buf, sizeof(buf), "%-16s %5s %5s %8s %8s %8s %10s\n", "arm", "stage", "n",
                "aux", "primary", "fused", "disagree");
  out += buf;
  for (const auto& m : means) {
    std::size_t n = 0;
    for (const auto& r : rows)
      if (!r.failed && r.arm == m.arm) ++n;
    std::snprintf(buf, sizeof(buf), "%-16s %5d %5zu %8.2f %8.2f %8.2f %10.4f\n", m.arm.c_str(),
                  m.stage, n, 100.0 * m.aux_miou, 100.0 * m.primary_miou, 100.0 * m.fused_miou,
                  m.disagreement_rate);
    out += buf;
  }
  out += "\nper-seed runs\n\n";
  std::snprintf(buf, sizeof(buf), "%-16s %6s %5s %8s %8s %8s %10s %9s\n", "arm", "seed", "stage",
                "aux", "primary", "fused", "disagree", "best_iter");
  out += buf;
  for (const auto& r : rows) {
    if (r.failed) continue;
    std::snprintf(buf, sizeof(buf), "%-16s %6s %5d %8.2f %8.2f %8.2f %10.4f %9.0f\n",
                  r.arm.c_str(), r.seed.c_str(), r.stage, 100.0 * r.aux_miou,
                  100.0 * r.primary_miou, 100.0 * r.fused_miou, r.disagreement_rate,
                  r.best_iter);
    out += buf;
  }
  bool any_failed = false;
  for (const auto& r : rows) any_failed |= r.failed;
  if (any_failed) {
    out += "\nfailed runs\n\n";
    for (const auto& r : rows)
      if (r.failed) out += r.arm + " seed " + r.seed + " FAILED\n";
  }
  return out;
}

}  // namespace

int write_report(const std::string& out_dir) {
  auto rows = collect_rows(out_dir);
  auto means = arm_means(rows);

  std::size_t nc = 0;
  for (const auto& r : rows)
    if (!r.failed) nc = std::max(nc, r.per_class_iou.size());

  std::string csv = metrics_header(nc) + "\n";
  for (const auto& r : rows) csv += r.raw_line + "\n";
  for (const auto& m : means) csv += m.raw_line + "\n";
  write_text_file(fs::path(out_dir) / "report.csv", csv);
  write_text_file(fs::path(out_dir) / "report.txt", render_text(rows, means));

  // Fig.-4 style series: one row per sweep point, mean over seeds.
  std::map<double, std::vector<const ReportRow*>> sweep;
  for (const auto& r : rows)
    if (!r.failed && r.arm.rfind("lambda_", 0) == 0) sweep[r.lambda_mr].push_back(&r);
  if (!sweep.empty()) {
    std::string s = "lambda,aux_miou,primary_miou,fused_miou,disagreement_rate,seeds\n";
    for (const auto& [lambda, rs] : sweep) {
      double aux = 0, pri = 0, fus = 0, dis = 0;
      const double n = static_cast<double>(rs.size());
      for (const auto* r : rs) {
        aux += r->aux_miou / n;
        pri += r->primary_miou / n;
        fus += r->fused_miou / n;
        dis += r->disagreement_rate / n;
      }
      s += fd(lambda) + "," + fd(aux) + "," + fd(pri) + "," + fd(fus) + "," + fd(dis) + "," +
           std::to_string(rs.size()) + "\n";
    }
    write_text_file(fs::path(out_dir) / "lambda_sweep.csv", s);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// plan execution

namespace {

struct Task {
  const ArmSpec* arm = nullptr;
  std::uint64_t seed = 0;
  TrainConfig cfg;
  std::string sig;
  fs::path dir;
  std::size_t canonical = 0;  // index of the task that actually runs
  bool is_canonical = false;
  std::string upstream_sig;   // stage-2 only
  std::string pseudo_key;     // stage-2 only
  bool failed = false;
  std::string error;
};

void record_failure(Task& t, const std::string& what) {
  t.failed = true;
  t.error = what;
  try {
    write_text_file(t.dir / "FAILED", what + "\n");
  } catch (...) {
    // the marker is best-effort; the in-memory state is authoritative
  }
}

void write_timing(const fs::path& dir, std::chrono::steady_clock::time_point t0) {
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text_file(dir / "timing.csv", "train_seconds\n" + fd(secs) + "\n");
}

void run_stage1_task(Task& t, std::ostream* log) {
  try {
    clean_run_dir(t.dir);
    write_text_file(t.dir / "config.cfg", t.cfg.to_string());
    std::ofstream run_log(t.dir / "log.txt");
    auto t0 = std::chrono::steady_clock::now();
    TrainResult res = train_stage1(t.cfg, source_for(t.cfg), target_for(t.cfg),
                                   log ? log : &run_log);
    write_timing(t.dir, t0);
    std::ofstream trace(t.dir / "trace.csv");
    write_trace_csv(trace, res.metrics.trace);
    if (!trace) throw std::runtime_error("cannot write trace.csv");
    save_checkpoint((t.dir / "checkpoint.bin").string(), res.checkpoint);
    RunMetrics ev = evaluate(res.checkpoint, target_for(t.cfg), t.cfg.eval_count);
    write_text_file(t.dir / "metrics.csv",
                    metrics_file_content(t.arm->name, t.seed, 1, t.cfg.weights.lambda_mr, ev,
                                         res.metrics));
  } catch (const std::exception& e) {
    record_failure(t, e.what());
  }
}

void run_stage2_task(Task& t, const fs::path& upstream_dir, const PseudoLabelSet& pseudo,
                     std::ostream* log) {
  try {
    clean_run_dir(t.dir);
    write_text_file(t.dir / "config.cfg", t.cfg.to_string());
    Checkpoint ck = load_checkpoint((upstream_dir / "checkpoint.bin").string());
    std::ofstream run_log(t.dir / "log.txt");
    auto t0 = std::chrono::steady_clock::now();
    TrainResult res = train_stage2(t.cfg, ck, target_for(t.cfg), pseudo,
                                   log ? log : &run_log);
    write_timing(t.dir, t0);
    std::ofstream trace(t.dir / "trace.csv");
    write_trace_csv(trace, res.metrics.trace);
    if (!trace) throw std::runtime_error("cannot write trace.csv");
    save_checkpoint((t.dir / "checkpoint.bin").string(), res.checkpoint);
    RunMetrics ev = evaluate(res.checkpoint, target_for(t.cfg), t.cfg.eval_count);
    write_text_file(t.dir / "metrics.csv",
                    metrics_file_content(t.arm->name, t.seed, 2, t.cfg.weights.lambda_mr, ev,
                                         res.metrics));
  } catch (const std::exception& e) {
    record_failure(t, e.what());
  }
}

void write_alias_task(Task& t, const Task& canon) {
  try {
    clean_run_dir(t.dir);
    write_text_file(t.dir / "config.cfg", t.cfg.to_string());
    write_text_file(t.dir / "alias.txt",
                    "same configuration as " + canon.arm->name + "/" +
                        std::to_string(canon.seed) + "; results shared\n");
    if (canon.failed) {
      record_failure(t, "shares a configuration with " + canon.arm->name + "/" +
                            std::to_string(canon.seed) + ", which failed: " + canon.error);
      return;
    }
    std::ifstream f(canon.dir / "metrics.csv");
    std::string header, line;
    std::getline(f, header);
    std::getline(f, line);
    if (!f) throw std::runtime_error("cannot read canonical metrics for alias");
    ReportRow row = parse_row(trim(line));
    row.arm = t.arm->name;
    row.raw_line = format_row(row);
    write_text_file(t.dir / "metrics.csv", header + "\n" + row.raw_line + "\n");
  } catch (const std::exception& e) {
    record_failure(t, e.what());
  }
}

}  // namespace

int run_plan(const ExperimentPlan& plan, std::ostream* log) {
  if (plan.arms.empty()) throw ConfigError("plan has no arms");
  if (plan.seeds.empty()) throw ConfigError("plan has no seeds");
  if (plan.out_dir.empty()) throw ConfigError("plan has no output directory");
  for (std::size_t i = 0; i < plan.arms.size(); ++i) {
    const auto& a = plan.arms[i];
    if (!valid_arm_name(a.name)) throw ConfigError("bad arm name '" + a.name + "'");
    if (a.stage != 1 && a.stage != 2)
      throw ConfigError("arm '" + a.name + "' has stage " + std::to_string(a.stage));
    for (std::size_t j = 0; j < i; ++j)
      if (plan.arms[j].name == a.name) throw ConfigError("duplicate arm '" + a.name + "'");
  }
  // every stage-2 arm must name a stage-1 arm in the plan
  std::map<std::string, const ArmSpec*> by_name;
  for (const auto& a : plan.arms) by_name[a.name] = &a;
  for (const auto& a : plan.arms) {
    if (a.stage != 2) continue;
    auto it = by_name.find(a.from);
    if (it == by_name.end())
      throw ConfigError("arm '" + a.name + "' starts from unknown arm '" + a.from + "'");
    if (it->second->stage != 1)
      throw ConfigError("arm '" + a.name + "' must start from a stage-1 arm, but '" + a.from +
                        "' is stage " + std::to_string(it->second->stage));
  }

  // Resolve every arm x seed up front so configuration errors surface
  // before any training runs.
  std::vector<Task> tasks;
  std::map<std::string, std::size_t> canon_of_sig;
  for (const auto& arm : plan.arms) {
    for (std::uint64_t seed : plan.seeds) {
      Task t;
      t.arm = &arm;
      t.seed = seed;
      t.cfg = resolve_arm(plan, arm, seed);
      t.dir = fs::path(plan.out_dir) / arm.name / std::to_string(seed);
      if (arm.stage == 1) {
        t.sig = "s1|" + t.cfg.to_string();
      } else {
        TrainConfig up = resolve_arm(plan, *by_name.at(arm.from), seed);
        t.upstream_sig = "s1|" + up.to_string();
        t.sig = "s2|" + t.cfg.to_string() + "|" + t.upstream_sig;
        t.pseudo_key = t.upstream_sig + "|" + std::to_string(t.cfg.epoch_size) + "|" +
                       spec_sig(target_for(t.cfg));
      }
      auto [it, fresh] = canon_of_sig.try_emplace(t.sig, tasks.size());
      t.is_canonical = fresh;
      t.canonical = it->second;
      tasks.push_back(std::move(t));
    }
  }

  const std::size_t threads = thread_cap();
  std::mutex log_mu;
  auto announce = [&](const Task& t) {
    if (!log) return;
    std::lock_guard<std::mutex> lk(log_mu);
    *log << "[" << t.arm->name << "/" << t.seed << "] "
         << (t.failed ? "FAILED: " + t.error : "done") << "\n";
  };
  // With one worker the pipeline logs stream straight through; with
  // more they would interleave, so each run logs to its own file.
  std::ostream* run_log = threads <= 1 ? log : nullptr;

  fs::create_directories(plan.out_dir);

  // stage-1 arms
  std::vector<std::function<void()>> jobs;
  for (auto& t : tasks)
    if (t.arm->stage == 1 && t.is_canonical)
      jobs.push_back([&t, run_log, &announce] {
        run_stage1_task(t, run_log);
        announce(t);
      });
  run_jobs(threads, jobs);

  // pseudo labels, one set per distinct (upstream run, target, count)
  std::map<std::string, PseudoLabelSet> pseudo_sets;
  std::map<std::string, std::string> pseudo_errors;
  std::vector<std::string> pseudo_keys;
  for (const auto& t : tasks)
    if (t.arm->stage == 2 && t.is_canonical && !pseudo_sets.count(t.pseudo_key) &&
        !pseudo_errors.count(t.pseudo_key)) {
      const Task& up = tasks[canon_of_sig.at(t.upstream_sig)];
      if (up.failed) {
        pseudo_errors[t.pseudo_key] =
            "stage-1 run " + up.arm->name + "/" + std::to_string(up.seed) + " failed";
        continue;
      }
      pseudo_sets[t.pseudo_key] = PseudoLabelSet{};  // reserve the slot
      pseudo_keys.push_back(t.pseudo_key);
    }
  jobs.clear();
  std::mutex pseudo_mu;
  for (const auto& key : pseudo_keys)
    jobs.push_back([&, key] {
      // find any canonical stage-2 task with this key to supply cfg/upstream
      const Task* owner = nullptr;
      for (const auto& t : tasks)
        if (t.is_canonical && t.pseudo_key == key) {
          owner = &t;
          break;
        }
      try {
        const Task& up = tasks[canon_of_sig.at(owner->upstream_sig)];
        Checkpoint ck = load_checkpoint((up.dir / "checkpoint.bin").string());
        PseudoLabelSet set =
            generate_pseudo_labels(ck, target_for(owner->cfg), owner->cfg.epoch_size);
        fs::create_directories(fs::path(plan.out_dir) / "pseudo_labels");
        std::string fname = up.arm->name + "_" + std::to_string(up.seed) + ".bin";
        save_pseudo_labels((fs::path(plan.out_dir) / "pseudo_labels" / fname).string(), set);
        std::lock_guard<std::mutex> lk(pseudo_mu);
        pseudo_sets[key] = std::move(set);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lk(pseudo_mu);
        pseudo_sets.erase(key);
        pseudo_errors[key] = e.what();
      }
    });
  run_jobs(threads, jobs);

  // stage-2 arms
  jobs.clear();
  for (auto& t : tasks)
    if (t.arm->stage == 2 && t.is_canonical)
      jobs.push_back([&tasks, &canon_of_sig, &pseudo_sets, &pseudo_errors, &t, run_log,
                      &announce] {
        auto err = pseudo_errors.find(t.pseudo_key);
        if (err != pseudo_errors.end()) {
          try {
            clean_run_dir(t.dir);
            write_text_file(t.dir / "config.cfg", t.cfg.to_string());
          } catch (...) {
          }
          record_failure(t, "no pseudo labels: " + err->second);
        } else {
          const Task& up = tasks[canon_of_sig.at(t.upstream_sig)];
          run_stage2_task(t, up.dir, pseudo_sets.at(t.pseudo_key), run_log);
        }
        announce(t);
      });
  run_jobs(threads, jobs);

  // aliases share the canonical results
  for (auto& t : tasks)
    if (!t.is_canonical) {
      write_alias_task(t, tasks[t.canonical]);
      announce(t);
    }

  write_report(plan.out_dir);

  bool any_failed = false;
  for (const auto& t : tasks) any_failed |= t.failed;
  return any_failed ? 1 : 0;
}

}  // namespace memreg
