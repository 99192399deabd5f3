// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include "triformer/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "triformer/checkpoint.hpp"

namespace triformer {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool is_mci(const Subject& s) { return s.label == Label::kSMCI || s.label == Label::kPMCI; }

std::vector<int> targets(const Split& split) {
  std::vector<int> out;
  out.reserve(split.subjects.size());
  for (const auto& s : split.subjects) out.push_back(target_of(s));
  return out;
}

struct CohortPools {
  std::vector<Subject> mci;
  std::vector<Subject> adcn;
  std::vector<Subject> test;
};

CohortPools cohort_pools(std::span<const Subject> subjects, const TrainConfig& config) {
  CohortPools pools;
  for (const auto& s : subjects) {
    const bool is_test = !config.test_cohort.empty() && s.cohort == config.test_cohort;
    if (is_test) {
      if (is_mci(s)) pools.test.push_back(s);
      continue;
    }
    if (!config.train_cohort.empty() && s.cohort != config.train_cohort) continue;
    (is_mci(s) ? pools.mci : pools.adcn).push_back(s);
  }
  if (pools.mci.empty())
    throw ProtocolError("no sMCI/pMCI subjects in the training cohort" +
                        (config.train_cohort.empty() ? std::string() : " '" + config.train_cohort + "'"));
  if (!config.test_cohort.empty() && pools.test.empty())
    throw ProtocolError("test cohort '" + config.test_cohort + "' has no sMCI/pMCI subjects");
  return pools;
}

ExperimentData finish_experiment(SplitPair split, const CohortPools& pools, const TrainConfig& config) {
  ExperimentData data;
  data.train = config.adcn_augment ? adcn_augment(split.train, pools.adcn) : std::move(split.train);
  data.validation = std::move(split.validation);
  data.test = {SplitRole::kTest, pools.test};
  std::vector<ClinicalRecord> records;
  for (const auto& s : data.train.subjects) records.push_back(s.clinical);
  data.normalizer = fit_normalizer(records);
  return data;
}

}  // namespace

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw MetricError("auc: " + std::to_string(scores.size()) + " scores for " + std::to_string(labels.size()) +
                      " labels");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw MetricError("auc: labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw MetricError("auc: both classes must be present");
  for (double s : scores)
    if (std::isnan(s)) throw MetricError("auc: NaN score");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the midrank keeps every rank an exact integer.
  double rank_sum2 = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank2 = static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) rank_sum2 += midrank2;
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  const double u = 0.5 * rank_sum2 - p * (p + 1) / 2;
  return u / (p * n);
}

double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold) {
  if (scores.size() != labels.size())
    throw MetricError("accuracy: " + std::to_string(scores.size()) + " scores for " +
                      std::to_string(labels.size()) + " labels");
  if (scores.empty()) throw MetricError("accuracy: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    correct += static_cast<std::size_t>((scores[i] >= threshold ? 1 : 0) == labels[i]);
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

SplitPair split_patients(std::span<const Subject> subjects, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction < 1)) throw ProtocolError("split fraction must be in (0, 1)");
  std::array<std::vector<std::size_t>, 2> by_class;
  std::map<std::string, int> seen;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    if (!is_mci(subjects[i]))
      throw ProtocolError("split_patients expects sMCI/pMCI subjects only; " + subjects[i].id + " is " +
                          to_string(subjects[i].label));
    if (seen[subjects[i].id]++) throw ProtocolError("duplicate subject id '" + subjects[i].id + "'");
    by_class[static_cast<std::size_t>(target_of(subjects[i]))].push_back(i);
  }
  std::vector<char> in_train(subjects.size(), 0);
  for (std::size_t c = 0; c < 2; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 2)
      throw ProtocolError("class " + to_string(static_cast<Label>(c)) + " has " + std::to_string(idx.size()) +
                          " subject(s); at least 2 are needed to split");
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(0x5eed0000ULL + c)));
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    for (std::size_t k = 0; k < n_train; ++k) in_train[idx[k]] = 1;
  }
  SplitPair out{{SplitRole::kTrain, {}}, {SplitRole::kValidation, {}}};
  for (std::size_t i = 0; i < subjects.size(); ++i)
    (in_train[i] ? out.train : out.validation).subjects.push_back(subjects[i]);
  return out;
}

ExperimentData prepare_experiment(std::span<const Subject> subjects, const TrainConfig& config,
                                  std::uint64_t split_seed) {
  auto pools = cohort_pools(subjects, config);
  return finish_experiment(split_patients(pools.mci, config.split_fraction, split_seed), pools, config);
}

ExperimentData prepare_experiment(std::span<const Subject> subjects, const TrainConfig& config,
                                  const std::vector<std::string>& train_ids,
                                  const std::vector<std::string>& validation_ids) {
  auto pools = cohort_pools(subjects, config);
  std::map<std::string, const Subject*> by_id;
  for (const auto& s : pools.mci) by_id[s.id] = &s;
  SplitPair split{{SplitRole::kTrain, {}}, {SplitRole::kValidation, {}}};
  std::map<std::string, int> used;
  auto take = [&](const std::vector<std::string>& ids, Split& into) {
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw ProtocolError("split file names unknown or non-MCI subject '" + id + "'");
      if (used[id]++) throw ProtocolError("subject '" + id + "' appears in more than one split");
      into.subjects.push_back(*it->second);
    }
  };
  take(train_ids, split.train);
  take(validation_ids, split.validation);
  return finish_experiment(std::move(split), pools, config);
}

template <typename T>
ModelInput<T> make_input(const Subject& subject, const NormalizationSpec& normalizer) {
  const Volume& v = subject.volume;
  std::vector<T> voxels(v.voxels.begin(), v.voxels.end());
  const auto values = normalizer.normalize(subject.clinical);
  return {Tensor<T>(Shape{1, v.h, v.w, v.d}, std::move(voxels)),
          Tensor<T>(Shape{kClinicalModalities}, std::vector<T>(values.begin(), values.end()))};
}

template <typename T>
std::vector<double> predict(const TriFormerModel<T>& model, std::span<const Subject> subjects,
                            const NormalizationSpec& normalizer, std::size_t threads) {
  std::vector<double> scores(subjects.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    NoGradGuard guard;
    for (std::size_t i = begin; i < end; ++i) {
      const Tensor<T> logits = model.logits(make_input<T>(subjects[i], normalizer));
      const T pair[2] = {logits.data()[0], logits.data()[1]};
      scores[i] = static_cast<double>(softmax_values<T>(std::span<const T>(pair, 2))[1]);
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, subjects.size()));
  if (threads == 1) {
    work(0, subjects.size());
    return scores;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (subjects.size() + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t b = t * chunk, e = std::min(subjects.size(), b + chunk);
    if (b < e) pool.emplace_back(work, b, e);
  }
  for (auto& th : pool) th.join();
  return scores;
}

template <typename T>
Metrics evaluate(const TriFormerModel<T>& model, const Split& split, const NormalizationSpec& normalizer,
                 double threshold, std::size_t threads) {
  Metrics m;
  m.scores = predict(model, split.subjects, normalizer, threads);
  m.labels = targets(split);
  m.auc = auc(m.scores, m.labels);
  m.acc = accuracy(m.scores, m.labels, threshold);
  return m;
}

std::string history_csv(std::span<const EpochRecord> history) {
  std::string out = "epoch,train_loss,val_auc,val_acc\n";
  for (const auto& r : history)
    out += std::to_string(r.epoch) + "," + fmt(r.train_loss) + "," + fmt(r.val_auc) + "," + fmt(r.val_acc) + "\n";
  return out;
}

namespace {

template <typename T>
std::string parameter_norm_report(const ParameterSet<T>& params) {
  double global = 0, largest = -1;
  std::string largest_name;
  std::vector<std::string> bad;
  for (const auto& p : params.items()) {
    double sq = 0;
    bool finite = true;
    for (T v : p.tensor.data()) {
      finite = finite && std::isfinite(static_cast<double>(v));
      sq += static_cast<double>(v) * static_cast<double>(v);
    }
    if (!finite) bad.push_back(p.name);
    global += sq;
    if (std::sqrt(sq) > largest) {
      largest = std::sqrt(sq);
      largest_name = p.name;
    }
  }
  std::ostringstream os;
  os << "global parameter L2 norm " << std::sqrt(global) << ", largest " << largest_name << " = " << largest;
  if (!bad.empty()) {
    os << ", non-finite:";
    for (std::size_t i = 0; i < bad.size() && i < 8; ++i) os << " " << bad[i];
    if (bad.size() > 8) os << " (+" << bad.size() - 8 << " more)";
  }
  return os.str();
}

}  // namespace

template <typename T>
TrainResult train(TriFormerModel<T>& model, const ExperimentData& data, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  if (data.train.subjects.empty()) throw ProtocolError("empty training split");
  for (const auto& s : data.validation.subjects)
    if (s.source_label) throw ProtocolError("validation split contains AD/CN-augmented subject " + s.id);

  TrainResult result;
  auto& params = model.parameters();
  if (!options.out_dir.empty()) fs::create_directories(options.out_dir);
  if (config.epochs == 0) {
    if (!options.out_dir.empty()) write_text(options.out_dir / "history.csv", history_csv(result.history));
    return result;
  }

  Adam<T> adam(params, config.adam);
  std::vector<std::vector<T>> best_weights;
  const std::size_t n = data.train.subjects.size();
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::mt19937_64 rng(splitmix64(config.seed ^ splitmix64(0xe90c0000ULL + epoch)));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const ForwardContext ctx{true, &rng};

    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      std::vector<ModelInput<T>> inputs;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        const Subject& s = data.train.subjects[order[k]];
        if (config.augment.enabled) {
          Subject augmented = s;
          augmented.volume = augment(s.volume, config.augment, rng);
          inputs.push_back(make_input<T>(augmented, data.normalizer));
        } else {
          inputs.push_back(make_input<T>(s, data.normalizer));
        }
        labels.push_back(target_of(s));
      }
      adam.zero_grad();
      auto loss = cross_entropy(model.batch_logits(inputs, ctx), labels);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value))
        throw NanLossError("non-finite training loss " + fmt(value) + " at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batches + 1) + "; " + parameter_norm_report(params));
      loss.backward();
      adam.step();
      loss_sum += value;
      ++batches;
    }

    const Metrics val = evaluate(model, data.validation, data.normalizer, config.acc_threshold, config.threads);
    EpochRecord record{epoch, loss_sum / static_cast<double>(batches), val.auc, val.acc};
    result.history.push_back(record);
    if (result.best_epoch == 0 || val.auc > result.best_auc) {
      result.best_epoch = epoch;
      result.best_auc = val.auc;
      result.best_acc = val.acc;
      best_weights = params.snapshot();
      if (!options.out_dir.empty()) save_checkpoint(options.out_dir / "best.ckpt", params, &adam);
    }
    if (!options.out_dir.empty()) write_text(options.out_dir / "history.csv", history_csv(result.history));
    if (options.observer && !options.observer(record)) break;
    if (config.stop_auc > 0 && val.auc >= config.stop_auc) break;
  }
  params.restore(best_weights);
  return result;
}

std::uint64_t repeat_seed(std::uint64_t seed, std::size_t r) {
  return r == 0 ? seed : splitmix64(seed ^ splitmix64(0x4e9e0000ULL + r));
}

namespace {

template <typename T>
RepeatResult run_one(const ExperimentData& data, const RunConfig& config, std::uint64_t seed,
                     const fs::path& out_dir) {
  TrainConfig tc = config.train;
  tc.seed = seed;
  TriFormerModel<T> model(config.model, seed);
  TrainOptions options;
  options.out_dir = out_dir;
  auto trained = train(model, data, tc, options);

  RepeatResult r;
  r.seed = seed;
  r.best_epoch = trained.best_epoch;
  const Metrics val = evaluate(model, data.validation, data.normalizer, tc.acc_threshold, tc.threads);
  r.auc = val.auc;
  r.acc = val.acc;
  r.scores = val.scores;
  for (const auto& s : data.validation.subjects) r.subject_ids.push_back(s.id);
  if (!data.test.subjects.empty()) {
    const Metrics test = evaluate(model, data.test, data.normalizer, tc.acc_threshold, tc.threads);
    r.test_auc = test.auc;
    r.test_acc = test.acc;
  }
  return r;
}

void summarise(EvalResult& result) {
  const double n = static_cast<double>(result.repeats.size());
  result.mean_auc = result.mean_acc = result.mean_test_auc = result.mean_test_acc = 0;
  for (const auto& r : result.repeats) {
    result.mean_auc += r.auc;
    result.mean_acc += r.acc;
    result.mean_test_auc += r.test_auc;
    result.mean_test_acc += r.test_acc;
  }
  if (n > 0) {
    result.mean_auc /= n;
    result.mean_acc /= n;
    result.mean_test_auc /= n;
    result.mean_test_acc /= n;
  }
}

std::string split_file_text(const ExperimentData& data) {
  std::string out;
  for (const auto& s : data.train.subjects)
    if (!s.source_label) out += "train " + s.id + "\n";
  for (const auto& s : data.validation.subjects) out += "val " + s.id + "\n";
  return out;
}

std::uint64_t text_hash(const std::string& text) {
  return fnv1a({reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

}  // namespace

template <typename T>
EvalResult run_repeats(std::span<const Subject> subjects, const RunConfig& config, const fs::path& out_dir) {
  EvalResult result;
  result.has_test = !config.train.test_cohort.empty();
  for (std::size_t r = 0; r < config.train.repeats; ++r) {
    const std::uint64_t seed = repeat_seed(config.train.seed, r);
    const auto data = prepare_experiment(subjects, config.train, seed);
    const fs::path dir = out_dir.empty() ? fs::path() : out_dir / ("repeat" + std::to_string(r));
    result.repeats.push_back(run_one<T>(data, config, seed, dir));
  }
  summarise(result);
  return result;
}

template <typename T>
std::vector<AblationRow> run_ablation(std::span<const Subject> subjects, const RunConfig& config,
                                      const std::vector<Variant>& variants, const fs::path& out_dir) {
  if (variants.empty()) throw ConfigError("variants", "no ablation variants requested");
  fs::create_directories(out_dir / "splits");
  std::vector<std::uint64_t> hashes;
  for (std::size_t r = 0; r < config.train.repeats; ++r) {
    const auto data = prepare_experiment(subjects, config.train, repeat_seed(config.train.seed, r));
    const std::string text = split_file_text(data);
    write_text(out_dir / "splits" / ("repeat" + std::to_string(r) + ".txt"), text);
    hashes.push_back(text_hash(text));
  }

  std::vector<AblationRow> rows;
  for (Variant v : variants) {
    RunConfig vc = config;
    vc.model.variant = v;
    AblationRow row{v, {}};
    row.result.has_test = !config.train.test_cohort.empty();
    for (std::size_t r = 0; r < config.train.repeats; ++r) {
      const fs::path split_path = out_dir / "splits" / ("repeat" + std::to_string(r) + ".txt");
      const std::string text = read_text(split_path);
      if (text_hash(text) != hashes[r])
        throw ProtocolError("split file " + split_path.string() + " changed during the ablation (hash " +
                            hex64(text_hash(text)) + ", expected " + hex64(hashes[r]) + ")");
      std::vector<std::string> train_ids, val_ids;
      std::istringstream in(text);
      std::string role, id;
      while (in >> role >> id) (role == "train" ? train_ids : val_ids).push_back(id);
      const auto data = prepare_experiment(subjects, vc.train, train_ids, val_ids);
      const auto seed = repeat_seed(config.train.seed, r);
      row.result.repeats.push_back(
          run_one<T>(data, vc, seed, out_dir / to_string(v) / ("repeat" + std::to_string(r))));
    }
    summarise(row.result);
    rows.push_back(std::move(row));
    write_text(out_dir / "ablation.csv", ablation_csv(rows));
  }
  return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::string out = "image,clinical,fusion,variant,auc,acc,test_auc,test_acc,repeats\n";
  for (const auto& row : rows) {
    const char* cells = "";
    switch (row.variant) {
      case Variant::kImageCnn: cells = "3D CNN,-,-"; break;
      case Variant::kImageVit: cells = "2.5D ViT,-,-"; break;
      case Variant::kClinicalMlp: cells = "-,MLP,-"; break;
      case Variant::kClinicalTransformer: cells = "-,Transformer,-"; break;
      case Variant::kMlpFusion: cells = "2.5D ViT,Transformer,MLP"; break;
      case Variant::kTransformerFusion: cells = "2.5D ViT,Transformer,Transformer"; break;
    }
    const auto& r = row.result;
    out += std::string(cells) + "," + to_string(row.variant) + "," + fmt(r.mean_auc) + "," + fmt(r.mean_acc) + "," +
           (r.has_test ? fmt(r.mean_test_auc) : "") + "," + (r.has_test ? fmt(r.mean_test_acc) : "") + "," +
           std::to_string(r.repeats.size()) + "\n";
  }
  return out;
}

std::string result_json(const EvalResult& result, const RunConfig& config) {
  nlohmann::ordered_json j;
  j["variant"] = to_string(config.model.variant);
  j["mean_auc"] = result.mean_auc;
  j["mean_acc"] = result.mean_acc;
  if (result.has_test) {
    j["test_cohort"] = config.train.test_cohort;
    j["mean_test_auc"] = result.mean_test_auc;
    j["mean_test_acc"] = result.mean_test_acc;
  }
  auto& reps = j["repeats"] = nlohmann::ordered_json::array();
  for (const auto& r : result.repeats) {
    nlohmann::ordered_json e;
    e["seed"] = r.seed;
    e["best_epoch"] = r.best_epoch;
    e["auc"] = r.auc;
    e["acc"] = r.acc;
    if (result.has_test) {
      e["test_auc"] = r.test_auc;
      e["test_acc"] = r.test_acc;
    }
    auto& scores = e["validation_scores"] = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < r.subject_ids.size(); ++i) scores[r.subject_ids[i]] = r.scores[i];
    reps.push_back(std::move(e));
  }
  return j.dump(2) + "\n";
}

#define TRIFORMER_INSTANTIATE(T)                                                                              \
  template ModelInput<T> make_input<T>(const Subject&, const NormalizationSpec&);                             \
  template std::vector<double> predict<T>(const TriFormerModel<T>&, std::span<const Subject>,                 \
                                          const NormalizationSpec&, std::size_t);                             \
  template Metrics evaluate<T>(const TriFormerModel<T>&, const Split&, const NormalizationSpec&, double,      \
                               std::size_t);                                                                  \
  template TrainResult train<T>(TriFormerModel<T>&, const ExperimentData&, const TrainConfig&,                \
                                const TrainOptions&);                                                         \
  template EvalResult run_repeats<T>(std::span<const Subject>, const RunConfig&, const fs::path&);            \
  template std::vector<AblationRow> run_ablation<T>(std::span<const Subject>, const RunConfig&,               \
                                                    const std::vector<Variant>&, const fs::path&);

TRIFORMER_INSTANTIATE(float)
TRIFORMER_INSTANTIATE(double)

#undef TRIFORMER_INSTANTIATE

}  // namespace triformer
