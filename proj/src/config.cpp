#include "memreg/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace memreg {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

double parse_real(const std::string& key, const std::string& value, const std::string& where) {
  try {
    std::size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(where + ": value '" + value + "' for key '" + key + "' is not a number");
  }
}

std::size_t parse_count(const std::string& key, const std::string& value,
                        const std::string& where) {
  unsigned long long v = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size())
    throw ConfigError(where + ": value '" + value + "' for key '" + key +
                      "' is not a non-negative integer");
  return static_cast<std::size_t>(v);
}

bool parse_bool(const std::string& key, const std::string& value, const std::string& where) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(where + ": value '" + value + "' for key '" + key + "' is not a boolean");
}

std::vector<double> parse_list(const std::string& key, const std::string& value,
                               const std::string& where) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty())
      throw ConfigError(where + ": empty element in list for key '" + key + "'");
    out.push_back(parse_real(key, item, where));
  }
  if (out.empty()) throw ConfigError(where + ": empty list for key '" + key + "'");
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value,
                        const std::string& where) {
  if (key == "stage1_iters")
    cfg.stage1_iters = parse_count(key, value, where);
  else if (key == "stage2_iters")
    cfg.stage2_iters = parse_count(key, value, where);
  else if (key == "mr_warmup_frac")
    cfg.mr_warmup_frac = parse_real(key, value, where);
  else if (key == "batch_size")
    cfg.batch_size = parse_count(key, value, where);
  else if (key == "seg_lr")
    cfg.seg_lr = parse_real(key, value, where);
  else if (key == "disc_lr")
    cfg.disc_lr = parse_real(key, value, where);
  else if (key == "sgd_momentum")
    cfg.sgd_momentum = parse_real(key, value, where);
  else if (key == "aux_weight")
    cfg.weights.aux_seg = parse_real(key, value, where);
  else if (key == "adv_primary_weight")
    cfg.weights.adv_primary = parse_real(key, value, where);
  else if (key == "adv_aux_weight")
    cfg.weights.adv_aux = parse_real(key, value, where);
  else if (key == "lambda_mr")
    cfg.weights.lambda_mr = parse_real(key, value, where);
  else if (key == "lambda_sweep")
    cfg.lambda_sweep = parse_list(key, value, where);
  else if (key == "seed")
    cfg.seed = parse_count(key, value, where);
  else if (key == "eval_every")
    cfg.eval_every = parse_count(key, value, where);
  else if (key == "mr_detach")
    cfg.mr_detach = parse_bool(key, value, where);
  else if (key == "use_target")
    cfg.use_target = parse_bool(key, value, where);
  else if (key == "image_size")
    cfg.image_size = parse_count(key, value, where);
  else if (key == "crop")
    cfg.crop = parse_count(key, value, where);
  else if (key == "num_classes")
    cfg.num_classes = parse_count(key, value, where);
  else if (key == "style_shift")
    cfg.style_shift = parse_real(key, value, where);
  else if (key == "epoch_size")
    cfg.epoch_size = parse_count(key, value, where);
  else if (key == "eval_count")
    cfg.eval_count = parse_count(key, value, where);
  else if (key == "holdout_count")
    cfg.holdout_count = parse_count(key, value, where);
  else if (key == "lr_total_factor")
    cfg.lr_total_factor = parse_real(key, value, where);
  else
    throw ConfigError(where + ": unknown config key '" + key + "'");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid config: " + msg); };
  if (stage1_iters == 0 || stage2_iters == 0) fail("iteration counts must be positive");
  if (mr_warmup_frac < 0.0 || mr_warmup_frac >= 1.0)
    fail("mr_warmup_frac must be in [0,1) so the warmup ends before the stage does");
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (seg_lr <= 0.0 || disc_lr <= 0.0) fail("learning rates must be positive");
  if (sgd_momentum < 0.0 || sgd_momentum >= 1.0) fail("sgd_momentum must be in [0,1)");
  if (weights.aux_seg < 0.0 || weights.adv_primary < 0.0 || weights.adv_aux < 0.0 ||
      weights.lambda_mr < 0.0)
    fail("loss weights must be non-negative");
  if (eval_every == 0) fail("eval_every must be >= 1");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (image_size < 16) fail("image_size must be >= 16");
  if (image_size % 8 != 0) fail("image_size must be divisible by 8");
  if (crop != 0 && (crop < 16 || crop > image_size || crop % 8 != 0))
    fail("crop must be 0 or a multiple of 8 in [16, image_size]");
  if (style_shift < 0.0 || style_shift > 1.0) fail("style_shift must be in [0,1]");
  if (epoch_size == 0 || eval_count == 0 || holdout_count == 0)
    fail("dataset sizes must be positive");
  if (lr_total_factor < 1.0) fail("lr_total_factor must be >= 1");
  if (lambda_sweep.empty()) fail("lambda_sweep must not be empty");
  for (double l : lambda_sweep)
    if (l < 0.0) fail("lambda_sweep values must be non-negative");
}

std::string TrainConfig::to_string() const {
  std::ostringstream os;
  os << "stage1_iters = " << stage1_iters << "\n"
     << "stage2_iters = " << stage2_iters << "\n"
     << "mr_warmup_frac = " << fmt(mr_warmup_frac) << "\n"
     << "batch_size = " << batch_size << "\n"
     << "seg_lr = " << fmt(seg_lr) << "\n"
     << "disc_lr = " << fmt(disc_lr) << "\n"
     << "sgd_momentum = " << fmt(sgd_momentum) << "\n"
     << "aux_weight = " << fmt(weights.aux_seg) << "\n"
     << "adv_primary_weight = " << fmt(weights.adv_primary) << "\n"
     << "adv_aux_weight = " << fmt(weights.adv_aux) << "\n"
     << "lambda_mr = " << fmt(weights.lambda_mr) << "\n";
  os << "lambda_sweep = ";
  for (std::size_t i = 0; i < lambda_sweep.size(); ++i)
    os << (i ? "," : "") << fmt(lambda_sweep[i]);
  os << "\n";
  os << "seed = " << seed << "\n"
     << "eval_every = " << eval_every << "\n"
     << "mr_detach = " << (mr_detach ? "true" : "false") << "\n"
     << "use_target = " << (use_target ? "true" : "false") << "\n"
     << "image_size = " << image_size << "\n"
     << "crop = " << crop << "\n"
     << "num_classes = " << num_classes << "\n"
     << "style_shift = " << fmt(style_shift) << "\n"
     << "epoch_size = " << epoch_size << "\n"
     << "eval_count = " << eval_count << "\n"
     << "holdout_count = " << holdout_count << "\n"
     << "lr_total_factor = " << fmt(lr_total_factor) << "\n";
  return os.str();
}

std::uint64_t TrainConfig::hash() const {
  std::string s = to_string();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

TrainConfig parse_config(const std::string& text, const std::string& origin) {
  TrainConfig cfg;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto hash_pos = line.find('#'); hash_pos != std::string::npos)
      line = line.substr(0, hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    std::string where = origin + ":" + std::to_string(lineno);
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": missing key before '='");
    if (value.empty()) throw ConfigError(where + ": missing value for key '" + key + "'");
    apply_config_entry(cfg, key, value, where);
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config(text, path);
}

}  // namespace memreg
