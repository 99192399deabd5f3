// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "triformer/adam.hpp"
#include "triformer/transformer.hpp"

namespace triformer {

/// Invalid configuration value or file. `where` names the field or line.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string where, const std::string& what)
      : std::runtime_error(where + ": " + what), where_(std::move(where)) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

/// Which network is trained; mirrors the rows of the module ablation table.
enum class Variant {
  kImageCnn,             // 3D CNN baseline (coarse stand-in)
  kImageVit,             // 2.5D ViT image branch only
  kClinicalMlp,          // MLP over the 12 normalised modalities
  kClinicalTransformer,  // clinical transformer only
  kMlpFusion,            // image + clinical, MLP over the two class tokens
  kTransformerFusion,    // full model with the modality fusion transformer
};

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);
const std::vector<Variant>& all_variants();

struct StackShape {
  std::size_t layers = 6;
  std::size_t heads = 8;
};

/// Architecture. Member defaults are paper scale; see desk() and tiny().
struct ModelConfig {
  Variant variant = Variant::kTransformerFusion;
  std::size_t extent_h = 128;
  std::size_t extent_w = 128;
  std::size_t extent_d = 128;
  std::size_t embed_channels = 32;   // C
  std::size_t slice_features = 512;  // C'
  std::size_t d_model = 256;
  std::size_t patch_size = 16;
  std::size_t vit_d_model = 0;  // 0: same as d_model
  StackShape vit;
  StackShape image;
  StackShape clinical;
  StackShape fusion;
  std::size_t mlp_ratio = 4;
  double dropout = 0.0;
  double ln_eps = 1e-5;
  bool shared_clinical_projection = false;
  bool tie_fusion_embeddings = false;
  std::size_t cnn_channels = 8;

  static ModelConfig paper() { return {}; }
  /// 16^3, C=8, C'=64, d_model=32, 2 layers / 4 heads, patch 4.
  static ModelConfig desk();
  /// 8^3, C=4, C'=16, d_model=16, 1 layer / 2 heads, patch 4.
  static ModelConfig tiny();

  std::size_t vit_width() const { return vit_d_model ? vit_d_model : d_model; }
  EncoderConfig encoder(const StackShape& shape, std::size_t width) const;
  std::size_t token_count() const { return extent_h + extent_w + extent_d + 4; }
  bool uses_image() const;
  bool uses_clinical() const;
  void validate() const;
};

enum class FlipAxis { kCoronal = 0, kSagittal = 1, kAxial = 2 };
std::string to_string(FlipAxis axis);
FlipAxis parse_flip_axis(const std::string& name);

struct AugmentConfig {
  bool enabled = true;
  double flip_prob = 0.5;
  FlipAxis flip_axis = FlipAxis::kSagittal;
  double noise_sigma = 0.01;
};

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 2;
  AdamConfig adam;
  AugmentConfig augment;
  bool adcn_augment = true;
  double split_fraction = 0.8;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  double acc_threshold = 0.5;
  double stop_auc = 0;  // stop once validation AUC reaches this; 0 disables
  std::string train_cohort;  // empty: all cohorts
  std::string test_cohort;   // empty: no held-out test cohort
  std::size_t threads = 1;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string precision = "f32";
};

/// Flat `dotted.key = value` text with `#` comments.
class KeyValueFile {
 public:
  static KeyValueFile parse(const std::string& text, const std::string& source = "<config>");
  static KeyValueFile load(const std::filesystem::path& path);

  struct Entry {
    std::string value;
    int line = 0;
    bool used = false;
  };

  bool has(const std::string& key) const { return entries_.count(key) > 0; }
  const Entry* get(const std::string& key);
  std::string location(const std::string& key) const;
  /// Throws ConfigError for the first key never read.
  void reject_unused() const;
  const std::map<std::string, Entry>& entries() const { return entries_; }

  std::string source;

 private:
  std::map<std::string, Entry> entries_;
};

/// Desk-scale model with default training settings.
RunConfig default_run_config();

/// Overlays values from `kv` onto `base`; unknown keys are rejected.
RunConfig parse_run_config(KeyValueFile kv, RunConfig base = default_run_config());
RunConfig load_run_config(const std::filesystem::path& path);
/// Every field materialised, in a form parse_run_config reads back.
std::string to_config_text(const RunConfig& config);

// Typed field readers shared by other key=value schemas.
std::size_t parse_size(const std::string& where, const std::string& value);
double parse_double(const std::string& where, const std::string& value);
bool parse_bool(const std::string& where, const std::string& value);
std::uint64_t parse_u64(const std::string& where, const std::string& value);

}  // namespace triformer
