#include "ddrn/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <set>
#include <sstream>
#include <type_traits>
#include <variant>
#include <vector>

namespace ddrn {

namespace {

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "config fields assume a 64-bit size_t");

using FieldRef = std::variant<std::uint64_t*, double*, bool*>;

struct Field {
  const char* name;
  FieldRef ref;
};

std::vector<Field> fields(RunConfig& c) {
  ModelConfig& m = c.model;
  TrainConfig& t = c.train;
  SynthSpec& s = c.synth;
  return {
      {"num_blocks", &m.num_blocks},
      {"embed_dim", &m.embed_dim},
      {"heads", &m.heads},
      {"mlp_ratio", &m.mlp_ratio},
      {"patch_size", &m.patch_size},
      {"stride", &m.stride},
      {"image_height", &m.image_height},
      {"image_width", &m.image_width},
      {"codebook_size", &m.codebook_size},
      {"tau", &m.tau},
      {"levels", &m.levels},
      {"num_ids", &m.num_ids},
      {"embedding_space", &m.embedding_space},
      {"resample_softmax_first", &m.resample_softmax_first},
      {"epochs", &t.epochs},
      {"ids_per_batch", &t.ids_per_batch},
      {"instances_per_id", &t.instances_per_id},
      {"lr", &t.lr},
      {"weight_decay", &t.weight_decay},
      {"warmup_fraction", &t.warmup_fraction},
      {"adam_beta1", &t.adam_beta1},
      {"adam_beta2", &t.adam_beta2},
      {"adam_eps", &t.adam_eps},
      {"lambda_hs", &t.lambda_hs},
      {"lambda_id", &t.lambda_id},
      {"lambda_tri", &t.lambda_tri},
      {"lambda_orth", &t.lambda_orth},
      {"arc_margin", &t.arc_margin},
      {"arc_scale", &t.arc_scale},
      {"triplet_margin", &t.triplet_margin},
      {"id_smoothing", &t.id_smoothing},
      {"erasing_prob", &t.erasing_prob},
      {"pad", &t.pad},
      {"orthogonal_loss", &t.orthogonal_loss},
      {"hs_arcface", &t.hs_arcface},
      {"eval_every", &t.eval_every},
      {"seed", &t.seed},
      {"images_per_id", &s.images_per_id},
      {"test_fraction", &s.test_fraction},
      {"train_occlusion_prob", &s.train_occlusion_prob},
      {"test_occlusion_prob", &s.test_occlusion_prob},
      {"occluder_min_area", &s.occluder_min_area},
      {"occluder_max_area", &s.occluder_max_area},
      {"background_pool", &s.background_pool},
      {"data_seed", &s.data_seed},
  };
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void parse_into(const std::string& key, const std::string& text, std::uint64_t* out) {
  std::uint64_t v = 0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  *out = v;
}

void parse_into(const std::string& key, const std::string& text, double* out) {
  double v = 0.0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw ConfigError(key + ": expected a finite number, got '" + text + "'");
  }
  *out = v;
}

void parse_into(const std::string& key, const std::string& text, bool* out) {
  if (text == "true" || text == "on" || text == "1") {
    *out = true;
  } else if (text == "false" || text == "off" || text == "0") {
    *out = false;
  } else {
    throw ConfigError(key + ": expected true/false/on/off, got '" + text + "'");
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

void ModelConfig::validate() const {
  require(num_blocks >= 1, "num_blocks must be >= 1");
  require(embed_dim >= 1 && heads >= 1 && embed_dim % heads == 0, "embed_dim must be divisible by heads");
  require(mlp_ratio >= 1, "mlp_ratio must be >= 1");
  require(patch_size >= 1 && stride >= 1 && stride <= patch_size, "stride must be in [1, patch_size]");
  require(image_height >= patch_size && image_width >= patch_size, "image smaller than one patch");
  require((image_height - patch_size) % stride == 0 && (image_width - patch_size) % stride == 0,
          "(image size - patch_size) must be divisible by stride");
  require(codebook_size >= 2, "codebook_size must be >= 2");
  require(tau > 0.0, "tau must be > 0");
  require(levels >= 1, "levels must be >= 1");
  require(num_ids >= 2, "num_ids must be >= 2");
}

void TrainConfig::validate() const {
  require(ids_per_batch >= 2, "ids_per_batch must be >= 2");
  require(instances_per_id >= 2, "instances_per_id must be >= 2");
  require(lr > 0.0, "lr must be > 0");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(warmup_fraction >= 0.0 && warmup_fraction < 1.0, "warmup_fraction must be in [0, 1)");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam betas must be in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be > 0");
  require(lambda_hs >= 0.0 && lambda_id >= 0.0 && lambda_tri >= 0.0 && lambda_orth >= 0.0, "loss weights must be >= 0");
  require(arc_margin >= 0.0, "arc_margin must be >= 0");
  require(arc_scale > 0.0, "arc_scale must be > 0");
  require(triplet_margin >= 0.0, "triplet_margin must be >= 0");
  require(id_smoothing >= 0.0 && id_smoothing < 1.0, "id_smoothing must be in [0, 1)");
  require(erasing_prob >= 0.0 && erasing_prob <= 1.0, "erasing_prob must be in [0, 1]");
}

void SynthSpec::validate() const {
  require(num_ids >= 2, "num_ids must be >= 2");
  require(images_per_id >= 4, "images_per_id must be >= 4");
  require(test_fraction > 0.0 && test_fraction < 1.0, "test_fraction must be in (0, 1)");
  const auto test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(images_per_id)));
  require(test >= 2 && images_per_id - test >= 2, "test_fraction leaves fewer than 2 train or test images per id");
  require(train_occlusion_prob >= 0.0 && train_occlusion_prob <= 1.0, "train_occlusion_prob must be in [0, 1]");
  require(test_occlusion_prob >= 0.0 && test_occlusion_prob <= 1.0, "test_occlusion_prob must be in [0, 1]");
  require(occluder_min_area > 0.0 && occluder_min_area <= occluder_max_area && occluder_max_area < 1.0,
          "occluder area range must satisfy 0 < min <= max < 1");
  require(background_pool >= 1, "background_pool must be >= 1");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  synth.validate();
  require(model.num_ids == synth.num_ids, "num_ids differs between model and data");
  require(train.ids_per_batch <= synth.num_ids, "ids_per_batch exceeds num_ids");
}

bool set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const Field& f : fields(cfg)) {
    if (key != f.name) continue;
    std::visit([&](auto* p) { parse_into(key, value, p); }, f.ref);
    // num_ids is shared by the model head and the generator.
    if (key == "num_ids") cfg.synth.num_ids = cfg.model.num_ids;
    return true;
  }
  return false;
}

RunConfig parse_config(std::istream& in, RunConfig base) {
  std::string line;
  std::size_t lineno = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigParseError(lineno, "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigParseError(lineno, "expected 'key = value'");
    if (!seen.insert(key).second) throw ConfigParseError(lineno, "duplicate key '" + key + "'");
    try {
      if (!set_config_value(base, key, value)) throw ConfigParseError(lineno, "unknown key '" + key + "'");
    } catch (const ConfigParseError&) {
      throw;
    } catch (const ConfigError& e) {
      throw ConfigParseError(lineno, e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return parse_config(in);
  } catch (const ConfigParseError& e) {
    throw ConfigParseError(e.line(), e.detail(), path);
  }
}

std::string format_config(const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::ostringstream out;
  for (const Field& f : fields(copy)) {
    out << f.name << " = ";
    std::visit(
        [&](auto* p) {
          if constexpr (std::is_same_v<decltype(p), bool*>) {
            out << (*p ? "true" : "false");
          } else if constexpr (std::is_same_v<decltype(p), double*>) {
            char buf[32];
            auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), *p);
            out << std::string_view(buf, static_cast<std::size_t>(end - buf));
          } else {
            out << *p;
          }
        },
        f.ref);
    out << '\n';
  }
  return out.str();
}

void apply_ablation(RunConfig& cfg, const std::string& spec) {
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("ablation item '" + item + "' is not switch=on|off");
    const std::string key = trim(item.substr(0, eq));
    const std::string value = trim(item.substr(eq + 1));
    if (value != "on" && value != "off") throw ConfigError("ablation value for '" + key + "' must be on or off");
    const bool on = value == "on";
    if (key == "embedding_space") {
      cfg.model.embedding_space = on;
    } else if (key == "orthogonal_loss") {
      cfg.train.orthogonal_loss = on;
    } else if (key == "hs_arcface") {
      cfg.train.hs_arcface = on;
    } else {
      throw ConfigError("unknown ablation switch '" + key + "'");
    }
  }
}

}  // namespace ddrn
