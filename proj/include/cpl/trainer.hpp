#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpl/cache.hpp"
#include "cpl/ctc.hpp"
#include "cpl/data.hpp"
#include "cpl/metrics.hpp"
#include "cpl/model.hpp"
#include "cpl/rng.hpp"

namespace cpl {

struct TauSchedule {
  enum class Kind { Constant, Linear };
  Kind kind = Kind::Linear;
  double value = 0.0;  // Constant mode
  double tau_start = 1.0;
  double tau_end = 0.1;
  long horizon = 2000;  // K_tau
};

// Linear decay from tau_start to tau_end over horizon steps, then held.
inline double temperature(long step, const TauSchedule& sched) {
  if (step < 0) throw std::invalid_argument("temperature: step must be >= 0");
  if (sched.kind == TauSchedule::Kind::Constant) return sched.value;
  const double t = sched.tau_start -
                   (sched.tau_start - sched.tau_end) * static_cast<double>(step) /
                       static_cast<double>(sched.horizon);
  return std::max(sched.tau_end, t);
}

enum class PlMode { Argmax, Sample };

struct TrainerConfig {
  long pt_steps = 0;                 // M
  std::size_t cache_capacity = 150;  // C, counted in batches; the fill phase
                                     // doubles as supervised grounding when M=0
  double lambda = 5.0;               // unlabeled-to-labeled proportion; N_L=1, N_U=lambda
  PoutStrategy pout = PoutStrategy::dynamic_then_one(PoutF::Identity, 4000);
  Writeback writeback = Writeback::New;
  TauSchedule tau;
  PlMode pl_mode = PlMode::Sample;
  long max_steps = 4000;
  long eval_every = 200;
  double dropout_high = 0.2;
  double dropout_low = 0.05;
  std::size_t labeled_batch_size = 4;
  std::size_t unlabeled_batch_size = 4;
  BatchMode batch_mode = BatchMode::Static;
  std::size_t max_batch_frames = 0;  // Dynamic mode frame budget
  // divergence detection
  long dv_window = 40;
  double dv_blank_threshold = 0.95;
  double dv_len_ratio_threshold = 0.05;
  double dv_ter_threshold = 0.95;
  long dv_warmup = 0;  // 0: defaults to M + C + dv_window
};

inline void validate(const TrainerConfig& cfg) {
  if (cfg.pt_steps < 0) throw std::invalid_argument("trainer: pt_steps must be >= 0");
  if (cfg.lambda < 0) throw std::invalid_argument("trainer: lambda must be >= 0");
  if (cfg.tau.kind == TauSchedule::Kind::Linear && cfg.tau.tau_start < cfg.tau.tau_end)
    throw std::invalid_argument("trainer: tau schedule must be non-increasing");
  if (cfg.tau.kind == TauSchedule::Kind::Linear && cfg.tau.horizon <= 0)
    throw std::invalid_argument("trainer: tau horizon must be > 0");
  if (cfg.max_steps <= cfg.pt_steps + static_cast<long>(cfg.cache_capacity))
    throw std::invalid_argument("trainer: max_steps must exceed pt_steps + cache_capacity");
  if (cfg.eval_every <= 0) throw std::invalid_argument("trainer: eval_every must be > 0");
}

// One record per optimizer step, appended to the JSONL log.
struct StepRecord {
  long step = 0;
  std::string phase;   // pt | fill | continuous
  std::string branch;  // labeled | unlabeled
  double loss = std::nan("");
  double tau = std::nan("");
  double eta = std::nan("");
  double p_out = std::nan("");
  double pl_ter = std::nan("");          // batch TER(old PL, new PL)
  double oracle_wer = std::nan("");      // WER(new PL, golden), analysis only
  double blank_fraction = std::nan("");  // of the freshly generated alignments
  double pl_len_ratio = std::nan("");    // mean |PL| over output frames
  double dev_ter = std::nan("");         // present on eval steps
  double dev_ter_recent = std::nan("");  // most recent dev evaluation
};

inline nlohmann::ordered_json to_json(const StepRecord& r) {
  auto num = [](double d) {
    return std::isfinite(d) ? nlohmann::ordered_json(d) : nlohmann::ordered_json(nullptr);
  };
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["phase"] = r.phase;
  j["branch"] = r.branch;
  j["loss"] = num(r.loss);
  j["tau"] = num(r.tau);
  j["eta"] = num(r.eta);
  j["p_out"] = num(r.p_out);
  j["pl_ter"] = num(r.pl_ter);
  j["oracle_wer"] = num(r.oracle_wer);
  j["blank_fraction"] = num(r.blank_fraction);
  j["pl_len_ratio"] = num(r.pl_len_ratio);
  j["dev_ter"] = num(r.dev_ter);
  j["dev_ter_recent"] = num(r.dev_ter_recent);
  return j;
}

struct DvConfig {
  long window = 40;
  double blank_threshold = 0.95;
  double len_ratio_threshold = 0.05;
  double ter_threshold = 0.95;
  long warmup = 0;
};

// DV iff, over a full window of unlabeled-branch records, PLs are almost
// all blanks, almost empty, or (past warmup) the dev TER stays degenerate.
inline bool detect_divergence(const std::deque<StepRecord>& recent_unlabeled,
                              const DvConfig& cfg) {
  if (static_cast<long>(recent_unlabeled.size()) < cfg.window) return false;
  double blank_sum = 0.0, len_sum = 0.0;
  bool ter_bad = true;
  for (const auto& r : recent_unlabeled) {
    blank_sum += r.blank_fraction;
    len_sum += r.pl_len_ratio;
    if (!(r.step > cfg.warmup && std::isfinite(r.dev_ter_recent) &&
          r.dev_ter_recent > cfg.ter_threshold))
      ter_bad = false;
  }
  const double n = static_cast<double>(recent_unlabeled.size());
  return blank_sum / n > cfg.blank_threshold || len_sum / n < cfg.len_ratio_threshold ||
         ter_bad;
}

// Pearson correlation between the per-batch PL-evolution distance and the
// oracle error over logged unlabeled-branch steps. Degenerate variance or
// fewer than 30 usable records -> nullopt.
inline std::optional<double> oracle_correlation(const std::vector<StepRecord>& records) {
  std::vector<double> x, y;
  for (const auto& r : records) {
    if (r.branch == "unlabeled" && std::isfinite(r.pl_ter) && std::isfinite(r.oracle_wer)) {
      x.push_back(r.pl_ter);
      y.push_back(r.oracle_wer);
    }
  }
  if (x.size() < 30) return std::nullopt;
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

enum class RunStatus { Ok, Dv };

struct RunResult {
  RunStatus status = RunStatus::Ok;
  long steps = 0;
  double final_dev_ter = std::nan("");
  double final_dev_wer = std::nan("");
  double final_test_ter = std::nan("");
  double final_test_wer = std::nan("");
  std::vector<StepRecord> records;
};

// Analysis-only hook: receives the utterance refs of a drawn batch and
// the freshly generated PLs, returns the oracle word error rate. This is
// the only path through which golden transcripts of unlabeled data flow.
using OracleHook =
    std::function<double(const std::vector<std::size_t>&, const std::vector<Transcript>&)>;

// Word ids split on this separator token for WER computation.
constexpr TokenId kWordSeparator = 0;

inline OracleHook make_oracle_hook(const Corpus& corpus) {
  return [&corpus](const std::vector<std::size_t>& refs,
                   const std::vector<Transcript>& pls) -> double {
    std::vector<Transcript> ref_words, hyp_words;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      ref_words.push_back(word_ids(corpus.utterances[refs[i]].golden, kWordSeparator));
      hyp_words.push_back(word_ids(pls[i], kWordSeparator));
    }
    return batch_wer(ref_words, hyp_words);
  };
}

// Orchestrates the full run: optional PT phase, cache-fill phase, and the
// continuous phase with labeled/unlabeled interleaving, temperature
// schedule, PL write-back and divergence detection.
class Trainer {
 public:
  Trainer(const EncoderConfig& enc_cfg, const AugmentConfig& aug_cfg, const LRSchedule& lr,
          const TrainerConfig& cfg, const Corpus& corpus, std::uint64_t master_seed,
          std::ostream* jsonl = nullptr, OracleHook oracle = nullptr)
      : encoder_(enc_cfg),
        aug_cfg_(aug_cfg),
        lr_(lr),
        cfg_(cfg),
        corpus_(&corpus),
        cache_(cfg.cache_capacity),
        labeled_batcher_(corpus, Split::Labeled, cfg.batch_mode, cfg.labeled_batch_size,
                         cfg.max_batch_frames, derive_seed(master_seed, Stream::LabeledBatcher)),
        unlabeled_batcher_(corpus, Split::Unlabeled, cfg.batch_mode, cfg.unlabeled_batch_size,
                           cfg.max_batch_frames,
                           derive_seed(master_seed, Stream::UnlabeledBatcher)),
        dropout_rng_(derive_seed(master_seed, Stream::Dropout)),
        augment_rng_(derive_seed(master_seed, Stream::Augment)),
        sampling_rng_(derive_seed(master_seed, Stream::PlSampling)),
        cache_rng_(derive_seed(master_seed, Stream::Cache)),
        trainer_rng_(derive_seed(master_seed, Stream::Trainer)),
        jsonl_(jsonl),
        oracle_(std::move(oracle)) {
    validate(cfg);
    Rng init_rng(derive_seed(master_seed, Stream::ModelInit));
    state_ = encoder_.init_state(init_rng);
    set_dropout(state_, cfg.dropout_high);
    dv_.window = cfg.dv_window;
    dv_.blank_threshold = cfg.dv_blank_threshold;
    dv_.len_ratio_threshold = cfg.dv_len_ratio_threshold;
    dv_.ter_threshold = cfg.dv_ter_threshold;
    dv_.warmup = cfg.dv_warmup > 0
                     ? cfg.dv_warmup
                     : cfg.pt_steps + static_cast<long>(cfg.cache_capacity) + cfg.dv_window;
  }

  const ModelState& state() const { return state_; }
  const Cache& cache() const { return cache_; }
  const std::vector<StepRecord>& records() const { return records_; }

  // M supervised steps, then the dropout decrease. M=0 is a no-op except
  // for the dropout transition.
  bool run_pt_phase() {
    for (long i = 0; i < cfg_.pt_steps; ++i) {
      const bool ok = supervised_step("pt");
      after_step();
      if (!ok) return false;
    }
    set_dropout(state_, cfg_.dropout_low);
    return true;
  }

  // Exactly C iterations: generate PLs for a fresh unlabeled batch,
  // insert, then one supervised step.
  bool run_fill_phase() {
    for (std::size_t i = 0; i < cfg_.cache_capacity; ++i) {
      const double tau = temperature(state_.step, cfg_.tau);
      auto batch = unlabeled_batcher_.next();
      PlBatch pl = generate_pls(batch, tau);
      const bool ok = supervised_step("fill");
      CacheEntry entry;
      entry.batch_id = next_batch_id_++;
      entry.utterance_refs = std::move(batch);
      entry.pls = std::move(pl.transcripts);
      entry.created_step = state_.step;
      cache_.insert(std::move(entry));
      after_step();
      if (!ok) return false;
    }
    return true;
  }

  bool run_continuous_phase() {
    while (state_.step < cfg_.max_steps) {
      const double branch_coin = trainer_rng_.uniform();
      const bool labeled = branch_coin < 1.0 / (1.0 + cfg_.lambda);
      const bool ok = labeled ? supervised_step("continuous") : unsupervised_step();
      after_step();
      if (!ok) return false;
      if (records_.back().branch == "unlabeled" && detect_divergence(dv_window_, dv_))
        return false;
    }
    return true;
  }

  RunResult run() {
    bool ok = run_pt_phase() && run_fill_phase() && run_continuous_phase();
    RunResult res;
    res.status = ok ? RunStatus::Ok : RunStatus::Dv;
    res.steps = state_.step;
    res.final_dev_ter = eval_ter(Split::Dev);
    res.final_dev_wer = eval_wer(Split::Dev);
    res.final_test_ter = eval_ter(Split::Test);
    res.final_test_wer = eval_wer(Split::Test);
    res.records = records_;
    return res;
  }

  // Pooled greedy-decode error rate over a split; always at tau = 0.
  double eval_ter(Split split) const {
    std::vector<Transcript> refs, hyps;
    for (std::size_t idx : corpus_->split_indices(split)) {
      const Utterance& u = corpus_->utterances[idx];
      const Matrix logits = encoder_.forward(state_, u.features, ForwardMode::Inference, nullptr);
      refs.push_back(u.golden);
      hyps.push_back(greedy_decode(logits, blank_id()));
    }
    return batch_ter(refs, hyps);
  }

  double eval_wer(Split split) const {
    std::vector<Transcript> refs, hyps;
    for (std::size_t idx : corpus_->split_indices(split)) {
      const Utterance& u = corpus_->utterances[idx];
      const Matrix logits = encoder_.forward(state_, u.features, ForwardMode::Inference, nullptr);
      refs.push_back(word_ids(u.golden, kWordSeparator));
      hyps.push_back(word_ids(greedy_decode(logits, blank_id()), kWordSeparator));
    }
    return batch_wer(refs, hyps);
  }

 private:
  struct PlBatch {
    std::vector<Transcript> transcripts;
    std::size_t blank_frames = 0;
    std::size_t total_frames = 0;
    std::size_t total_tokens = 0;
  };

  TokenId blank_id() const {
    return static_cast<TokenId>(encoder_.config().vocab_size - 1);
  }

  // Inference-mode PL generation at the given temperature; no dropout,
  // no augmentation.
  PlBatch generate_pls(const std::vector<std::size_t>& batch, double tau) {
    PlBatch out;
    for (std::size_t idx : batch) {
      const Matrix logits =
          encoder_.forward(state_, corpus_->utterances[idx].features, ForwardMode::Inference,
                           nullptr);
      Alignment a;
      if (cfg_.pl_mode == PlMode::Sample) {
        a = sample_alignment(logits, tau, sampling_rng_);
      } else {
        a.resize(logits.rows);
        for (std::size_t t = 0; t < logits.rows; ++t)
          a[t] = static_cast<TokenId>(detail::argmax_row(logits, t));
      }
      for (TokenId t : a)
        if (t == blank_id()) ++out.blank_frames;
      out.total_frames += a.size();
      Transcript tr = collapse(a, blank_id());
      out.total_tokens += tr.size();
      out.transcripts.push_back(std::move(tr));
    }
    return out;
  }

  // One gradient step on a batch of (features, target) pairs; infeasible
  // targets are skipped.
  bool gradient_step(const std::vector<std::size_t>& batch,
                     const std::vector<const Transcript*>& targets, StepRecord& rec) {
    std::vector<double> grad(encoder_.num_params(), 0.0);
    double loss_sum = 0.0;
    std::size_t contributed = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Utterance& u = corpus_->utterances[batch[i]];
      const Matrix feats = augment(u.features, aug_cfg_, state_.step, augment_rng_);
      Tape tape;
      const Matrix logits =
          encoder_.forward(state_, feats, ForwardMode::Train, &dropout_rng_, &tape);
      const CtcResult ctc = ctc_loss_grad(logits, *targets[i], blank_id());
      if (!ctc.feasible) continue;
      const std::vector<double> g = encoder_.backward(state_, tape, ctc.grad);
      for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += g[j];
      loss_sum += ctc.loss;
      ++contributed;
    }
    if (contributed > 0) {
      const double inv = 1.0 / static_cast<double>(contributed);
      for (double& g : grad) g *= inv;
      rec.loss = loss_sum * inv;
    }
    rec.eta = lr_.lr(state_.step);
    return adagrad_step(state_, grad, lr_) == StepStatus::Ok;
  }

  bool supervised_step(const char* phase) {
    StepRecord rec;
    rec.phase = phase;
    rec.branch = "labeled";
    rec.tau = temperature(state_.step, cfg_.tau);
    const auto batch = labeled_batcher_.next();
    std::vector<const Transcript*> targets;
    for (std::size_t idx : batch) targets.push_back(&corpus_->utterances[idx].golden);
    const bool ok = gradient_step(batch, targets, rec);
    rec.step = state_.step;
    push_record(std::move(rec));
    return ok;
  }

  bool unsupervised_step() {
    StepRecord rec;
    rec.phase = "continuous";
    rec.branch = "unlabeled";
    rec.tau = temperature(state_.step, cfg_.tau);

    CacheEntry entry = cache_.draw(cache_rng_);
    std::vector<const Transcript*> targets;
    for (const Transcript& pl : entry.pls) targets.push_back(&pl);
    const bool ok = gradient_step(entry.utterance_refs, targets, rec);
    rec.step = state_.step;

    // regenerate PLs with the current model state
    PlBatch fresh = generate_pls(entry.utterance_refs, rec.tau);
    rec.pl_ter = batch_ter(entry.pls, fresh.transcripts);
    rec.blank_fraction = fresh.total_frames == 0
                             ? 1.0
                             : static_cast<double>(fresh.blank_frames) /
                                   static_cast<double>(fresh.total_frames);
    rec.pl_len_ratio = fresh.total_frames == 0
                           ? 0.0
                           : static_cast<double>(fresh.total_tokens) /
                                 static_cast<double>(fresh.total_frames);
    if (oracle_) rec.oracle_wer = oracle_(entry.utterance_refs, fresh.transcripts);
    rec.p_out = compute_pout(cfg_.pout, state_.step, entry.pls, fresh.transcripts);

    if (trainer_rng_.uniform() < rec.p_out) {
      auto batch = unlabeled_batcher_.next();
      PlBatch pls = generate_pls(batch, rec.tau);
      CacheEntry fresh_entry;
      fresh_entry.batch_id = next_batch_id_++;
      fresh_entry.utterance_refs = std::move(batch);
      fresh_entry.pls = std::move(pls.transcripts);
      fresh_entry.created_step = state_.step;
      cache_.replace(std::move(fresh_entry));
    } else {
      cache_.readmit(std::move(entry), cfg_.writeback, std::move(fresh.transcripts),
                     state_.step);
    }
    push_record(std::move(rec));
    return ok;
  }

  void push_record(StepRecord rec) {
    rec.dev_ter_recent = last_dev_ter_;
    records_.push_back(std::move(rec));
  }

  // Runs the dev evaluation on schedule and only then emits the step's
  // JSONL line, so eval results land on the record that triggered them.
  void after_step() {
    if (records_.empty()) return;
    if (state_.step % cfg_.eval_every == 0) {
      last_dev_ter_ = eval_ter(Split::Dev);
      records_.back().dev_ter = last_dev_ter_;
      records_.back().dev_ter_recent = last_dev_ter_;
    }
    if (records_.back().branch == "unlabeled") {
      dv_window_.push_back(records_.back());
      while (static_cast<long>(dv_window_.size()) > dv_.window) dv_window_.pop_front();
    }
    if (jsonl_) *jsonl_ << to_json(records_.back()).dump() << "\n";
  }

  Encoder encoder_;
  AugmentConfig aug_cfg_;
  LRSchedule lr_;
  TrainerConfig cfg_;
  const Corpus* corpus_;
  ModelState state_;
  Cache cache_;
  Batcher labeled_batcher_;
  Batcher unlabeled_batcher_;
  Rng dropout_rng_;
  Rng augment_rng_;
  Rng sampling_rng_;
  Rng cache_rng_;
  Rng trainer_rng_;
  std::ostream* jsonl_;
  OracleHook oracle_;
  DvConfig dv_;
  std::deque<StepRecord> dv_window_;
  std::vector<StepRecord> records_;
  std::int64_t next_batch_id_ = 0;
  double last_dev_ter_ = std::nan("");
};

}  // namespace cpl
