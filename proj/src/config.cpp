// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace triformer {

namespace {

const std::vector<std::pair<Variant, std::string>>& variant_names() {
  static const std::vector<std::pair<Variant, std::string>> names = {
      {Variant::kImageCnn, "image3dcnn-baseline"},
      {Variant::kImageVit, "image-vit-only"},
      {Variant::kClinicalMlp, "clinical-mlp-only"},
      {Variant::kClinicalTransformer, "clinical-transformer-only"},
      {Variant::kMlpFusion, "vit+clinical+mlp-fusion"},
      {Variant::kTransformerFusion, "vit+clinical+transformer-fusion"},
  };
  return names;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct Binding {
  std::string key;
  std::function<void(const std::string& where, const std::string& value)> set;
  std::function<std::string()> get;
};

Binding size_field(std::string key, std::size_t& field) {
  return {std::move(key), [&field](const std::string& w, const std::string& v) { field = parse_size(w, v); },
          [&field] { return std::to_string(field); }};
}
Binding u64_field(std::string key, std::uint64_t& field) {
  return {std::move(key), [&field](const std::string& w, const std::string& v) { field = parse_u64(w, v); },
          [&field] { return std::to_string(field); }};
}
Binding double_field(std::string key, double& field) {
  return {std::move(key), [&field](const std::string& w, const std::string& v) { field = parse_double(w, v); },
          [&field] { return fmt_double(field); }};
}
Binding bool_field(std::string key, bool& field) {
  return {std::move(key), [&field](const std::string& w, const std::string& v) { field = parse_bool(w, v); },
          [&field] { return std::string(field ? "true" : "false"); }};
}
Binding string_field(std::string key, std::string& field) {
  return {std::move(key), [&field](const std::string&, const std::string& v) { field = v; },
          [&field] { return field; }};
}

std::vector<Binding> bindings(RunConfig& c) {
  auto& m = c.model;
  auto& t = c.train;
  std::vector<Binding> b;
  b.push_back({"model.variant",
               [&m](const std::string& w, const std::string& v) {
                 try {
                   m.variant = parse_variant(v);
                 } catch (const ConfigError& e) {
                   throw ConfigError(w, e.what());
                 }
               },
               [&m] { return to_string(m.variant); }});
  b.push_back(size_field("model.extent_h", m.extent_h));
  b.push_back(size_field("model.extent_w", m.extent_w));
  b.push_back(size_field("model.extent_d", m.extent_d));
  b.push_back(size_field("model.embed_channels", m.embed_channels));
  b.push_back(size_field("model.slice_features", m.slice_features));
  b.push_back(size_field("model.d_model", m.d_model));
  b.push_back(size_field("model.patch_size", m.patch_size));
  b.push_back(size_field("model.vit.d_model", m.vit_d_model));
  b.push_back(size_field("model.vit.layers", m.vit.layers));
  b.push_back(size_field("model.vit.heads", m.vit.heads));
  b.push_back(size_field("model.image.layers", m.image.layers));
  b.push_back(size_field("model.image.heads", m.image.heads));
  b.push_back(size_field("model.clinical.layers", m.clinical.layers));
  b.push_back(size_field("model.clinical.heads", m.clinical.heads));
  b.push_back(size_field("model.fusion.layers", m.fusion.layers));
  b.push_back(size_field("model.fusion.heads", m.fusion.heads));
  b.push_back(size_field("model.mlp_ratio", m.mlp_ratio));
  b.push_back(double_field("model.dropout", m.dropout));
  b.push_back(double_field("model.ln_eps", m.ln_eps));
  b.push_back(bool_field("model.shared_clinical_projection", m.shared_clinical_projection));
  b.push_back(bool_field("model.tie_fusion_embeddings", m.tie_fusion_embeddings));
  b.push_back(size_field("model.cnn_channels", m.cnn_channels));

  b.push_back(size_field("train.epochs", t.epochs));
  b.push_back(size_field("train.batch_size", t.batch_size));
  b.push_back(double_field("train.lr", t.adam.lr));
  b.push_back(double_field("train.beta1", t.adam.beta1));
  b.push_back(double_field("train.beta2", t.adam.beta2));
  b.push_back(double_field("train.eps", t.adam.eps));
  b.push_back(bool_field("train.augment", t.augment.enabled));
  b.push_back(double_field("train.flip_prob", t.augment.flip_prob));
  b.push_back({"train.flip_axis",
               [&t](const std::string& w, const std::string& v) {
                 try {
                   t.augment.flip_axis = parse_flip_axis(v);
                 } catch (const ConfigError& e) {
                   throw ConfigError(w, e.what());
                 }
               },
               [&t] { return to_string(t.augment.flip_axis); }});
  b.push_back(double_field("train.noise_sigma", t.augment.noise_sigma));
  b.push_back(bool_field("train.adcn_augment", t.adcn_augment));
  b.push_back(double_field("train.split_fraction", t.split_fraction));
  b.push_back(size_field("train.repeats", t.repeats));
  b.push_back(u64_field("train.seed", t.seed));
  b.push_back(double_field("train.acc_threshold", t.acc_threshold));
  b.push_back(double_field("train.stop_auc", t.stop_auc));
  b.push_back(string_field("train.train_cohort", t.train_cohort));
  b.push_back(string_field("train.test_cohort", t.test_cohort));
  b.push_back(size_field("train.threads", t.threads));
  b.push_back({"run.precision",
               [&c](const std::string& w, const std::string& v) {
                 if (v != "f32" && v != "f64") throw ConfigError(w, "precision must be f32 or f64, got '" + v + "'");
                 c.precision = v;
               },
               [&c] { return c.precision; }});
  return b;
}

}  // namespace

std::string to_string(Variant v) {
  for (const auto& [variant, name] : variant_names())
    if (variant == v) return name;
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  std::string valid;
  for (const auto& [variant, n] : variant_names()) {
    if (n == name) return variant;
    valid += (valid.empty() ? "" : ", ") + n;
  }
  throw ConfigError("variant", "unknown variant '" + name + "' (valid: " + valid + ")");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> all = [] {
    std::vector<Variant> v;
    for (const auto& [variant, n] : variant_names()) v.push_back(variant);
    return v;
  }();
  return all;
}

std::string to_string(FlipAxis axis) {
  switch (axis) {
    case FlipAxis::kCoronal: return "coronal";
    case FlipAxis::kSagittal: return "sagittal";
    case FlipAxis::kAxial: return "axial";
  }
  return "sagittal";
}

FlipAxis parse_flip_axis(const std::string& name) {
  if (name == "coronal") return FlipAxis::kCoronal;
  if (name == "sagittal") return FlipAxis::kSagittal;
  if (name == "axial") return FlipAxis::kAxial;
  throw ConfigError("flip_axis", "unknown axis '" + name + "' (valid: coronal, sagittal, axial)");
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.extent_h = c.extent_w = c.extent_d = 16;
  c.embed_channels = 8;
  c.slice_features = 64;
  c.d_model = 32;
  c.patch_size = 4;
  c.vit = c.image = c.clinical = c.fusion = StackShape{2, 4};
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.extent_h = c.extent_w = c.extent_d = 8;
  c.embed_channels = 4;
  c.slice_features = 16;
  c.d_model = 16;
  c.patch_size = 4;
  c.vit = c.image = c.clinical = c.fusion = StackShape{1, 2};
  return c;
}

EncoderConfig ModelConfig::encoder(const StackShape& shape, std::size_t width) const {
  EncoderConfig e;
  e.d_model = width;
  e.n_heads = shape.heads;
  e.n_layers = shape.layers;
  e.mlp_hidden = mlp_ratio * width;
  e.dropout = dropout;
  e.ln_eps = ln_eps;
  return e;
}

bool ModelConfig::uses_image() const { return variant != Variant::kClinicalMlp && variant != Variant::kClinicalTransformer; }

bool ModelConfig::uses_clinical() const { return variant != Variant::kImageCnn && variant != Variant::kImageVit; }

void ModelConfig::validate() const {
  auto positive = [](const char* key, std::size_t v) {
    if (v == 0) throw ConfigError(key, "must be positive");
  };
  positive("model.extent_h", extent_h);
  positive("model.extent_w", extent_w);
  positive("model.extent_d", extent_d);
  positive("model.embed_channels", embed_channels);
  positive("model.slice_features", slice_features);
  positive("model.d_model", d_model);
  positive("model.patch_size", patch_size);
  positive("model.mlp_ratio", mlp_ratio);
  positive("model.cnn_channels", cnn_channels);
  if (d_model < 2) throw ConfigError("model.d_model", "must be at least 2 for the d_model/2 head");
  for (auto [key, e] : {std::pair{"model.extent_h", extent_h}, {"model.extent_w", extent_w},
                        {"model.extent_d", extent_d}}) {
    if (uses_image() && variant != Variant::kImageCnn && e % patch_size != 0)
      throw ConfigError(key, "slice extent " + std::to_string(e) + " is not divisible by patch size " +
                                 std::to_string(patch_size));
    if (uses_image() && e < 3) throw ConfigError(key, "extent smaller than the 3^3 embedding kernel");
  }
  auto check_stack = [&](const char* key, const StackShape& s, std::size_t width) {
    if (s.heads == 0 || width % s.heads != 0)
      throw ConfigError(key, "width " + std::to_string(width) + " is not divisible by " +
                                 std::to_string(s.heads) + " heads");
  };
  check_stack("model.vit.heads", vit, vit_width());
  check_stack("model.image.heads", image, d_model);
  check_stack("model.clinical.heads", clinical, d_model);
  check_stack("model.fusion.heads", fusion, d_model);
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout", "must lie in [0, 1)");
  if (ln_eps <= 0.0) throw ConfigError("model.ln_eps", "must be positive");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
  if (!(split_fraction > 0.0 && split_fraction < 1.0))
    throw ConfigError("train.split_fraction", "must lie strictly between 0 and 1");
  if (repeats < 1) throw ConfigError("train.repeats", "must be >= 1");
  if (adam.lr <= 0.0) throw ConfigError("train.lr", "must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("train.beta1", "must lie in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
  if (augment.flip_prob < 0.0 || augment.flip_prob > 1.0) throw ConfigError("train.flip_prob", "must lie in [0, 1]");
  if (augment.noise_sigma < 0.0) throw ConfigError("train.noise_sigma", "must be >= 0");
  if (threads < 1) throw ConfigError("train.threads", "must be >= 1");
  if (stop_auc < 0.0 || stop_auc > 1.0) throw ConfigError("train.stop_auc", "must lie in [0, 1]");
  if (!train_cohort.empty() && train_cohort == test_cohort)
    throw ConfigError("train.test_cohort", "test cohort must differ from the training cohort");
}

KeyValueFile KeyValueFile::parse(const std::string& text, const std::string& source) {
  KeyValueFile kv;
  kv.source = source;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(line_no);
    if (eq == std::string::npos) throw ConfigError(where, "expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where, "empty key");
    if (kv.entries_.count(key)) throw ConfigError(where, "duplicate key '" + key + "'");
    kv.entries_[key] = Entry{trim(line.substr(eq + 1)), line_no, false};
  }
  return kv;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), "cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

const KeyValueFile::Entry* KeyValueFile::get(const std::string& key) {
  auto it = entries_.find(key);
  if (it == entries_.end()) return nullptr;
  it->second.used = true;
  return &it->second;
}

std::string KeyValueFile::location(const std::string& key) const {
  auto it = entries_.find(key);
  const int line = it == entries_.end() ? 0 : it->second.line;
  return source + ":" + std::to_string(line) + " (" + key + ")";
}

void KeyValueFile::reject_unused() const {
  for (const auto& [key, entry] : entries_)
    if (!entry.used) throw ConfigError(location(key), "unknown key");
}

RunConfig default_run_config() { return RunConfig{ModelConfig::desk(), TrainConfig{}, "f32"}; }

RunConfig parse_run_config(KeyValueFile kv, RunConfig base) {
  for (auto& b : bindings(base)) {
    if (const auto* e = kv.get(b.key)) b.set(kv.location(b.key), e->value);
  }
  kv.reject_unused();
  try {
    base.model.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(kv.source + " (" + e.where() + ")", e.what());
  }
  base.train.validate();
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(KeyValueFile::load(path)); }

std::string to_config_text(const RunConfig& config) {
  RunConfig copy = config;
  std::ostringstream os;
  for (auto& b : bindings(copy)) os << b.key << " = " << b.get() << '\n';
  return os.str();
}

std::size_t parse_size(const std::string& where, const std::string& value) {
  std::size_t v = 0;
  auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc{} || res.ptr != value.data() + value.size())
    throw ConfigError(where, "expected a non-negative integer, got '" + value + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& where, const std::string& value) {
  std::uint64_t v = 0;
  auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc{} || res.ptr != value.data() + value.size())
    throw ConfigError(where, "expected an unsigned integer, got '" + value + "'");
  return v;
}

double parse_double(const std::string& where, const std::string& value) {
  double v = 0;
  auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc{} || res.ptr != value.data() + value.size())
    throw ConfigError(where, "expected a number, got '" + value + "'");
  return v;
}

bool parse_bool(const std::string& where, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(where, "expected true/false, got '" + value + "'");
}

}  // namespace triformer
