#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpl/cache.hpp"
#include "cpl/data.hpp"
#include "cpl/model.hpp"
#include "cpl/trainer.hpp"

namespace cpl {

// Every experiment knob in one serializable record. Defaults reproduce
// the reference experiment.
struct ExperimentConfig {
  CorpusConfig corpus;
  std::string corpus_manifest = "corpus/manifest.json";
  std::string corpus_features = "corpus/features.bin";
  EncoderConfig encoder;
  AugmentConfig augment;
  LRSchedule lr;
  TrainerConfig trainer;
  std::string output_dir = "runs";
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  // frozen supervised-floor threshold used by the acceptance experiments,
  // calibrated once by pilot runs on the reference corpus
  double t_sup = 0.15;
};

namespace cfgio {

inline std::string pout_kind_name(PoutKind k) {
  switch (k) {
    case PoutKind::Constant: return "constant";
    case PoutKind::Scheduled: return "scheduled";
    case PoutKind::Dynamic: return "dynamic";
    case PoutKind::DynamicThenOne: return "dynamic_then_one";
  }
  return "?";
}
inline PoutKind pout_kind_from(const std::string& s) {
  if (s == "constant") return PoutKind::Constant;
  if (s == "scheduled") return PoutKind::Scheduled;
  if (s == "dynamic") return PoutKind::Dynamic;
  if (s == "dynamic_then_one") return PoutKind::DynamicThenOne;
  throw std::invalid_argument("unknown pout kind: " + s);
}
inline std::string pout_f_name(PoutF f) { return f == PoutF::Identity ? "identity" : "one_minus"; }
inline PoutF pout_f_from(const std::string& s) {
  if (s == "identity") return PoutF::Identity;
  if (s == "one_minus") return PoutF::OneMinus;
  throw std::invalid_argument("unknown pout f: " + s);
}

}  // namespace cfgio

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["format"] = "cpl-config";
  j["version"] = 1;
  j["corpus"] = {
      {"vocab_tokens", c.corpus.vocab_tokens},
      {"feat_dim", c.corpus.feat_dim},
      {"prototype_seed", c.corpus.prototype_seed},
      {"corpus_seed", c.corpus.corpus_seed},
      {"d_min", c.corpus.d_min},
      {"d_max", c.corpus.d_max},
      {"noise_sigma", c.corpus.noise_sigma},
      {"len_min", c.corpus.len_min},
      {"len_max", c.corpus.len_max},
      {"n_labeled", c.corpus.n_labeled},
      {"n_unlabeled", c.corpus.n_unlabeled},
      {"n_dev", c.corpus.n_dev},
      {"n_test", c.corpus.n_test},
      {"max_frames", c.corpus.max_frames},
      {"proto_dot_bound", c.corpus.proto_dot_bound},
      {"unlabeled_sigma", c.corpus.unlabeled_sigma},
      {"manifest", c.corpus_manifest},
      {"features", c.corpus_features},
  };
  j["encoder"] = {
      {"feat_dim", c.encoder.feat_dim},
      {"conv_kernel", c.encoder.conv_kernel},
      {"conv_stride", c.encoder.conv_stride},
      {"conv_channels", c.encoder.conv_channels},
      {"hidden_dims", c.encoder.hidden_dims},
      {"vocab_size", c.encoder.vocab_size},
      {"dropout", c.encoder.dropout},
      {"seed", c.encoder.seed},
  };
  j["augment"] = {
      {"n_freq_masks", c.augment.n_freq_masks},
      {"freq_mask_param", c.augment.freq_mask_param},
      {"n_time_masks", c.augment.n_time_masks},
      {"time_mask_param", c.augment.time_mask_param},
      {"max_time_mask_ratio", c.augment.max_time_mask_ratio},
      {"activate_after_step", c.augment.activate_after_step},
  };
  j["lr"] = {
      {"base_lr", c.lr.base_lr},
      {"warmup_steps", c.lr.warmup_steps},
      {"decay_steps", c.lr.decay_steps},
  };
  j["trainer"] = {
      {"M", c.trainer.pt_steps},
      {"C", c.trainer.cache_capacity},
      {"lambda", c.trainer.lambda},
      {"pout",
       {{"kind", cfgio::pout_kind_name(c.trainer.pout.kind)},
        {"p", c.trainer.pout.p},
        {"p1", c.trainer.pout.p1},
        {"p2", c.trainer.pout.p2},
        {"switch_step", c.trainer.pout.switch_step},
        {"f", cfgio::pout_f_name(c.trainer.pout.f)}}},
      {"pl_writeback", c.trainer.writeback == Writeback::Old ? "old" : "new"},
      {"tau",
       {{"kind", c.trainer.tau.kind == TauSchedule::Kind::Constant ? "constant" : "linear"},
        {"value", c.trainer.tau.value},
        {"tau_start", c.trainer.tau.tau_start},
        {"tau_end", c.trainer.tau.tau_end},
        {"horizon", c.trainer.tau.horizon}}},
      {"pl_mode", c.trainer.pl_mode == PlMode::Argmax ? "argmax" : "sample"},
      {"max_steps", c.trainer.max_steps},
      {"eval_every", c.trainer.eval_every},
      {"dropout_high", c.trainer.dropout_high},
      {"dropout_low", c.trainer.dropout_low},
      {"labeled_batch_size", c.trainer.labeled_batch_size},
      {"unlabeled_batch_size", c.trainer.unlabeled_batch_size},
      {"batch_mode", c.trainer.batch_mode == BatchMode::Static ? "static" : "dynamic"},
      {"max_batch_frames", c.trainer.max_batch_frames},
      {"dv_window", c.trainer.dv_window},
      {"dv_blank_threshold", c.trainer.dv_blank_threshold},
      {"dv_len_ratio_threshold", c.trainer.dv_len_ratio_threshold},
      {"dv_ter_threshold", c.trainer.dv_ter_threshold},
      {"dv_warmup", c.trainer.dv_warmup},
  };
  j["output_dir"] = c.output_dir;
  j["seeds"] = c.seeds;
  j["t_sup"] = c.t_sup;
  return j;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "cpl-config" || j.value("version", 0) != 1)
    throw std::invalid_argument("config: expected cpl-config version 1");
  ExperimentConfig c;
  const auto& jc = j.at("corpus");
  c.corpus.vocab_tokens = jc.at("vocab_tokens").get<std::size_t>();
  c.corpus.feat_dim = jc.at("feat_dim").get<std::size_t>();
  c.corpus.prototype_seed = jc.at("prototype_seed").get<std::uint64_t>();
  c.corpus.corpus_seed = jc.at("corpus_seed").get<std::uint64_t>();
  c.corpus.d_min = jc.at("d_min").get<std::size_t>();
  c.corpus.d_max = jc.at("d_max").get<std::size_t>();
  c.corpus.noise_sigma = jc.at("noise_sigma").get<double>();
  c.corpus.len_min = jc.at("len_min").get<std::size_t>();
  c.corpus.len_max = jc.at("len_max").get<std::size_t>();
  c.corpus.n_labeled = jc.at("n_labeled").get<std::size_t>();
  c.corpus.n_unlabeled = jc.at("n_unlabeled").get<std::size_t>();
  c.corpus.n_dev = jc.at("n_dev").get<std::size_t>();
  c.corpus.n_test = jc.at("n_test").get<std::size_t>();
  c.corpus.max_frames = jc.at("max_frames").get<std::size_t>();
  c.corpus.proto_dot_bound = jc.at("proto_dot_bound").get<double>();
  c.corpus.unlabeled_sigma = jc.at("unlabeled_sigma").get<double>();
  c.corpus_manifest = jc.at("manifest").get<std::string>();
  c.corpus_features = jc.at("features").get<std::string>();

  const auto& je = j.at("encoder");
  c.encoder.feat_dim = je.at("feat_dim").get<std::size_t>();
  c.encoder.conv_kernel = je.at("conv_kernel").get<std::size_t>();
  c.encoder.conv_stride = je.at("conv_stride").get<std::size_t>();
  c.encoder.conv_channels = je.at("conv_channels").get<std::size_t>();
  c.encoder.hidden_dims = je.at("hidden_dims").get<std::vector<std::size_t>>();
  c.encoder.vocab_size = je.at("vocab_size").get<std::size_t>();
  c.encoder.dropout = je.at("dropout").get<double>();
  c.encoder.seed = je.at("seed").get<std::uint64_t>();

  const auto& ja = j.at("augment");
  c.augment.n_freq_masks = ja.at("n_freq_masks").get<std::size_t>();
  c.augment.freq_mask_param = ja.at("freq_mask_param").get<std::size_t>();
  c.augment.n_time_masks = ja.at("n_time_masks").get<std::size_t>();
  c.augment.time_mask_param = ja.at("time_mask_param").get<std::size_t>();
  c.augment.max_time_mask_ratio = ja.at("max_time_mask_ratio").get<double>();
  c.augment.activate_after_step = ja.at("activate_after_step").get<long>();

  const auto& jl = j.at("lr");
  c.lr.base_lr = jl.at("base_lr").get<double>();
  c.lr.warmup_steps = jl.at("warmup_steps").get<long>();
  c.lr.decay_steps = jl.at("decay_steps").get<std::vector<long>>();

  const auto& jt = j.at("trainer");
  c.trainer.pt_steps = jt.at("M").get<long>();
  c.trainer.cache_capacity = jt.at("C").get<std::size_t>();
  c.trainer.lambda = jt.at("lambda").get<double>();
  const auto& jp = jt.at("pout");
  c.trainer.pout.kind = cfgio::pout_kind_from(jp.at("kind").get<std::string>());
  c.trainer.pout.p = jp.at("p").get<double>();
  c.trainer.pout.p1 = jp.at("p1").get<double>();
  c.trainer.pout.p2 = jp.at("p2").get<double>();
  c.trainer.pout.switch_step = jp.at("switch_step").get<long>();
  c.trainer.pout.f = cfgio::pout_f_from(jp.at("f").get<std::string>());
  {
    const std::string wb = jt.at("pl_writeback").get<std::string>();
    if (wb != "old" && wb != "new")
      throw std::invalid_argument("config: pl_writeback must be old or new");
    c.trainer.writeback = wb == "old" ? Writeback::Old : Writeback::New;
  }
  const auto& jtau = jt.at("tau");
  {
    const std::string k = jtau.at("kind").get<std::string>();
    if (k != "constant" && k != "linear")
      throw std::invalid_argument("config: tau kind must be constant or linear");
    c.trainer.tau.kind = k == "constant" ? TauSchedule::Kind::Constant : TauSchedule::Kind::Linear;
  }
  c.trainer.tau.value = jtau.at("value").get<double>();
  c.trainer.tau.tau_start = jtau.at("tau_start").get<double>();
  c.trainer.tau.tau_end = jtau.at("tau_end").get<double>();
  c.trainer.tau.horizon = jtau.at("horizon").get<long>();
  {
    const std::string pm = jt.at("pl_mode").get<std::string>();
    if (pm != "argmax" && pm != "sample")
      throw std::invalid_argument("config: pl_mode must be argmax or sample");
    c.trainer.pl_mode = pm == "argmax" ? PlMode::Argmax : PlMode::Sample;
  }
  c.trainer.max_steps = jt.at("max_steps").get<long>();
  c.trainer.eval_every = jt.at("eval_every").get<long>();
  c.trainer.dropout_high = jt.at("dropout_high").get<double>();
  c.trainer.dropout_low = jt.at("dropout_low").get<double>();
  c.trainer.labeled_batch_size = jt.at("labeled_batch_size").get<std::size_t>();
  c.trainer.unlabeled_batch_size = jt.at("unlabeled_batch_size").get<std::size_t>();
  {
    const std::string bm = jt.at("batch_mode").get<std::string>();
    if (bm != "static" && bm != "dynamic")
      throw std::invalid_argument("config: batch_mode must be static or dynamic");
    c.trainer.batch_mode = bm == "static" ? BatchMode::Static : BatchMode::Dynamic;
  }
  c.trainer.max_batch_frames = jt.at("max_batch_frames").get<std::size_t>();
  c.trainer.dv_window = jt.at("dv_window").get<long>();
  c.trainer.dv_blank_threshold = jt.at("dv_blank_threshold").get<double>();
  c.trainer.dv_len_ratio_threshold = jt.at("dv_len_ratio_threshold").get<double>();
  c.trainer.dv_ter_threshold = jt.at("dv_ter_threshold").get<double>();
  c.trainer.dv_warmup = jt.at("dv_warmup").get<long>();

  c.output_dir = j.at("output_dir").get<std::string>();
  c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.t_sup = j.at("t_sup").get<double>();

  validate(c.corpus);
  validate(c.trainer);
  if (c.encoder.feat_dim != c.corpus.feat_dim)
    throw std::invalid_argument("config: encoder.feat_dim must match corpus.feat_dim");
  if (c.encoder.vocab_size != c.corpus.vocab_tokens + 1)
    throw std::invalid_argument("config: encoder.vocab_size must be corpus.vocab_tokens + 1");
  return c;
}

// Applies a dotted-path override like "trainer.lambda=5" onto the JSON
// form of a config. The path must already exist; unknown paths are
// rejected.
inline void apply_override(nlohmann::ordered_json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override must look like path.to.field=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  nlohmann::ordered_json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!node->contains(key))
      throw std::invalid_argument("unknown config field in override: " + path);
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  // parse the value as JSON; bare words fall back to strings
  nlohmann::ordered_json parsed = nlohmann::ordered_json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  *node = std::move(parsed);
}

inline ExperimentConfig load_experiment_config(const std::string& path,
                                               const std::vector<std::string>& overrides = {}) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path);
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(is);
  for (const auto& o : overrides) apply_override(j, o);
  return experiment_config_from_json(j);
}

}  // namespace cpl
