#include <doctest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "cpl/trainer.hpp"

using cpl::Corpus;
using cpl::StepRecord;
using cpl::TauSchedule;
using cpl::Trainer;
using cpl::TrainerConfig;

namespace {

Corpus tiny_corpus() {
  cpl::CorpusConfig cfg;
  cfg.n_labeled = 4;
  cfg.n_unlabeled = 12;
  cfg.n_dev = 4;
  cfg.n_test = 4;
  cfg.len_min = 2;
  cfg.len_max = 4;
  return cpl::generate_corpus(cfg);
}

cpl::EncoderConfig tiny_encoder() {
  cpl::EncoderConfig cfg;
  cfg.conv_channels = 8;
  cfg.hidden_dims = {8};
  return cfg;
}

TrainerConfig tiny_trainer(long max_steps = 60) {
  TrainerConfig cfg;
  cfg.cache_capacity = 4;
  cfg.max_steps = max_steps;
  cfg.eval_every = 10;
  cfg.labeled_batch_size = 2;
  cfg.unlabeled_batch_size = 2;
  return cfg;
}

cpl::AugmentConfig no_augment() {
  cpl::AugmentConfig cfg;
  cfg.activate_after_step = 1000000;
  return cfg;
}

StepRecord unlabeled_record(long step, double blank_frac, double len_ratio,
                            double dev_recent = std::nan("")) {
  StepRecord r;
  r.step = step;
  r.phase = "continuous";
  r.branch = "unlabeled";
  r.blank_fraction = blank_frac;
  r.pl_len_ratio = len_ratio;
  r.dev_ter_recent = dev_recent;
  return r;
}

}  // namespace

TEST_CASE("temperature schedule endpoints and midpoint") {
  TauSchedule sched;  // linear 1 -> 0.1 over 2000 steps
  CHECK(cpl::temperature(0, sched) == doctest::Approx(1.0));
  CHECK(cpl::temperature(1000, sched) == doctest::Approx(0.55));
  CHECK(cpl::temperature(2000, sched) == doctest::Approx(0.1));
  CHECK(cpl::temperature(5000, sched) == doctest::Approx(0.1));  // held at the floor
  for (long k = 1; k <= 2000; k += 97)
    CHECK(cpl::temperature(k, sched) <= cpl::temperature(k - 1, sched));

  TauSchedule c;
  c.kind = TauSchedule::Kind::Constant;
  c.value = 0.3;
  CHECK(cpl::temperature(0, c) == 0.3);
  CHECK(cpl::temperature(12345, c) == 0.3);
  CHECK_THROWS_AS(cpl::temperature(-1, sched), std::invalid_argument);
}

TEST_CASE("trainer config validation") {
  TrainerConfig cfg = tiny_trainer();
  cfg.max_steps = static_cast<long>(cfg.cache_capacity);  // no room for continuous phase
  CHECK_THROWS_AS(cpl::validate(cfg), std::invalid_argument);
  cfg = tiny_trainer();
  cfg.lambda = -1.0;
  CHECK_THROWS_AS(cpl::validate(cfg), std::invalid_argument);
  cfg = tiny_trainer();
  cfg.tau.tau_start = 0.1;
  cfg.tau.tau_end = 1.0;
  CHECK_THROWS_AS(cpl::validate(cfg), std::invalid_argument);
  cfg = tiny_trainer();
  cfg.eval_every = 0;
  CHECK_THROWS_AS(cpl::validate(cfg), std::invalid_argument);
}

TEST_CASE("detect_divergence fixtures") {
  cpl::DvConfig dv;
  dv.window = 5;
  std::deque<StepRecord> window;

  // healthy trace
  for (long s = 0; s < 5; ++s) window.push_back(unlabeled_record(s, 0.5, 0.3));
  CHECK_FALSE(cpl::detect_divergence(window, dv));

  // partial window never fires
  window.pop_front();
  CHECK_FALSE(cpl::detect_divergence(window, dv));

  // blank collapse
  window.clear();
  for (long s = 0; s < 5; ++s) window.push_back(unlabeled_record(s, 0.99, 0.3));
  CHECK(cpl::detect_divergence(window, dv));

  // empty-output collapse
  window.clear();
  for (long s = 0; s < 5; ++s) window.push_back(unlabeled_record(s, 0.5, 0.01));
  CHECK(cpl::detect_divergence(window, dv));

  // persistent degenerate dev TER past warmup
  dv.warmup = 10;
  window.clear();
  for (long s = 20; s < 25; ++s) window.push_back(unlabeled_record(s, 0.5, 0.3, 0.99));
  CHECK(cpl::detect_divergence(window, dv));
  // ...but not while still inside warmup
  window.clear();
  for (long s = 0; s < 5; ++s) window.push_back(unlabeled_record(s, 0.5, 0.3, 0.99));
  CHECK_FALSE(cpl::detect_divergence(window, dv));
}

TEST_CASE("oracle_correlation on synthetic records") {
  std::vector<StepRecord> records;
  for (int i = 0; i < 40; ++i) {
    StepRecord r;
    r.branch = "unlabeled";
    r.pl_ter = 0.01 * i;
    r.oracle_wer = 2.0 * r.pl_ter + 1.0;
    records.push_back(r);
  }
  auto r = cpl::oracle_correlation(records);
  REQUIRE(r.has_value());
  CHECK(*r == doctest::Approx(1.0));

  for (auto& rec : records) rec.oracle_wer = 5.0 - rec.pl_ter;
  r = cpl::oracle_correlation(records);
  REQUIRE(r.has_value());
  CHECK(*r == doctest::Approx(-1.0));

  // labeled records and NaNs are excluded; fewer than 30 usable -> nullopt
  records.resize(20);
  CHECK_FALSE(cpl::oracle_correlation(records).has_value());

  records.resize(40);
  for (int i = 20; i < 40; ++i) records.push_back(records[0]);
  for (auto& rec : records) rec.pl_ter = 0.5;  // zero variance
  CHECK_FALSE(cpl::oracle_correlation(records).has_value());
}

TEST_CASE("phase step counts and cache fill bookkeeping") {
  const Corpus corpus = tiny_corpus();
  TrainerConfig cfg = tiny_trainer();
  cfg.pt_steps = 5;
  Trainer trainer(tiny_encoder(), no_augment(), cpl::LRSchedule{}, cfg, corpus, 123);

  REQUIRE(trainer.run_pt_phase());
  CHECK(trainer.state().step == 5);
  CHECK(trainer.state().dropout_rate == cfg.dropout_low);
  REQUIRE(trainer.run_fill_phase());
  CHECK(trainer.state().step == 9);
  CHECK(trainer.cache().full());

  const auto& records = trainer.records();
  REQUIRE(records.size() == 9);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(records[i].phase == "pt");
    CHECK(records[i].branch == "labeled");
  }
  for (std::size_t i = 5; i < 9; ++i) CHECK(records[i].phase == "fill");

  // each cached batch was stamped with the post-step counter of its
  // fill iteration, so stamps cover (M, M+C]
  for (const auto& e : trainer.cache().entries()) {
    CHECK(e.created_step > 5);
    CHECK(e.created_step <= 9);
    CHECK(e.pls.size() == e.utterance_refs.size());
  }
}

TEST_CASE("lambda=0 reduces the continuous phase to supervised training") {
  const Corpus corpus = tiny_corpus();
  TrainerConfig cfg = tiny_trainer(40);
  cfg.lambda = 0.0;
  Trainer trainer(tiny_encoder(), no_augment(), cpl::LRSchedule{}, cfg, corpus, 7);
  const auto res = trainer.run();
  CHECK(res.status == cpl::RunStatus::Ok);
  CHECK(res.steps == 40);
  for (const auto& r : trainer.records())
    if (r.phase == "continuous") CHECK(r.branch == "labeled");
}

TEST_CASE("branch frequency tracks 1/(1+lambda) within 3 sigma") {
  const Corpus corpus = tiny_corpus();
  TrainerConfig cfg = tiny_trainer(404);
  cfg.lambda = 3.0;
  Trainer trainer(tiny_encoder(), no_augment(), cpl::LRSchedule{}, cfg, corpus, 11);
  const auto res = trainer.run();
  REQUIRE(res.status == cpl::RunStatus::Ok);
  long labeled = 0, total = 0;
  for (const auto& r : trainer.records())
    if (r.phase == "continuous") {
      ++total;
      if (r.branch == "labeled") ++labeled;
    }
  REQUIRE(total == 400);
  const double p = 0.25;
  const double sigma = std::sqrt(total * p * (1 - p));
  CHECK(std::abs(labeled - total * p) < 3 * sigma);
}

TEST_CASE("run is deterministic: identical seeds give identical logs") {
  const Corpus corpus = tiny_corpus();
  const TrainerConfig cfg = tiny_trainer();
  std::ostringstream log_a, log_b, log_c;
  Trainer(tiny_encoder(), no_augment(), cpl::LRSchedule{}, cfg, corpus, 42, &log_a,
          cpl::make_oracle_hook(corpus))
      .run();
  Trainer(tiny_encoder(), no_augment(), cpl::LRSchedule{}, cfg, corpus, 42, &log_b,
          cpl::make_oracle_hook(corpus))
      .run();
  Trainer(tiny_encoder(), no_augment(), cpl::LRSchedule{}, cfg, corpus, 43, &log_c,
          cpl::make_oracle_hook(corpus))
      .run();
  CHECK(log_a.str() == log_b.str());
  CHECK(log_a.str() != log_c.str());
}

TEST_CASE("jsonl stream carries one well-formed line per step") {
  const Corpus corpus = tiny_corpus();
  std::ostringstream log;
  Trainer trainer(tiny_encoder(), no_augment(), cpl::LRSchedule{}, tiny_trainer(), corpus, 5,
                  &log, cpl::make_oracle_hook(corpus));
  const auto res = trainer.run();
  REQUIRE(res.status == cpl::RunStatus::Ok);

  std::istringstream in(log.str());
  std::string line;
  long lines = 0, unlabeled = 0, evals = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("step").get<long>() == lines + 1);
    CHECK(j.contains("phase"));
    CHECK(j.contains("p_out"));
    if (j.at("branch") == "unlabeled") {
      ++unlabeled;
      CHECK(j.at("p_out").is_number());
      CHECK(j.at("pl_ter").is_number());
      CHECK(j.at("oracle_wer").is_number());
      CHECK(j.at("blank_fraction").is_number());
    } else {
      CHECK(j.at("p_out").is_null());
    }
    if (j.at("step").get<long>() % 10 == 0) {
      ++evals;
      CHECK(j.at("dev_ter").is_number());
    } else {
      CHECK(j.at("dev_ter").is_null());
    }
    ++lines;
  }
  CHECK(lines == res.steps);
  CHECK(lines == static_cast<long>(trainer.records().size()));
  CHECK(evals == 6);
  CHECK(unlabeled > 0);
}

TEST_CASE("p_out extremes steer cache turnover") {
  const Corpus corpus = tiny_corpus();

  TrainerConfig always = tiny_trainer();
  always.pout = cpl::PoutStrategy::constant(1.0);
  Trainer ta(tiny_encoder(), no_augment(), cpl::LRSchedule{}, always, corpus, 21);
  REQUIRE(ta.run().status == cpl::RunStatus::Ok);
  bool replaced = false;
  for (const auto& r : ta.records())
    if (r.branch == "unlabeled") CHECK(r.p_out == 1.0);
  for (const auto& e : ta.cache().entries())
    if (e.batch_id >= static_cast<std::int64_t>(always.cache_capacity)) replaced = true;
  CHECK(replaced);  // every unlabeled step evicts, so fresh ids appear

  TrainerConfig never = tiny_trainer();
  never.pout = cpl::PoutStrategy::constant(0.0);
  Trainer tn(tiny_encoder(), no_augment(), cpl::LRSchedule{}, never, corpus, 21);
  REQUIRE(tn.run().status == cpl::RunStatus::Ok);
  for (const auto& e : tn.cache().entries())
    CHECK(e.batch_id < static_cast<std::int64_t>(never.cache_capacity));
}

TEST_CASE("old write-back with p_out=0 freezes the cached transcripts") {
  const Corpus corpus = tiny_corpus();
  TrainerConfig cfg = tiny_trainer();
  cfg.pout = cpl::PoutStrategy::constant(0.0);
  cfg.writeback = cpl::Writeback::Old;
  Trainer trainer(tiny_encoder(), no_augment(), cpl::LRSchedule{}, cfg, corpus, 31);
  REQUIRE(trainer.run_pt_phase());
  REQUIRE(trainer.run_fill_phase());
  std::map<std::int64_t, std::vector<cpl::Transcript>> filled;
  for (const auto& e : trainer.cache().entries()) filled[e.batch_id] = e.pls;
  REQUIRE(trainer.run_continuous_phase());
  for (const auto& e : trainer.cache().entries()) CHECK(filled.at(e.batch_id) == e.pls);
}

TEST_CASE("divergence detection ends the run with a DV status") {
  const Corpus corpus = tiny_corpus();
  TrainerConfig cfg = tiny_trainer(200);
  cfg.dv_window = 5;
  cfg.dv_len_ratio_threshold = 100.0;  // any full window trips the detector
  Trainer trainer(tiny_encoder(), no_augment(), cpl::LRSchedule{}, cfg, corpus, 3);
  const auto res = trainer.run();
  CHECK(res.status == cpl::RunStatus::Dv);
  CHECK(res.steps < 200);
  long unlabeled = 0;
  for (const auto& r : trainer.records())
    if (r.branch == "unlabeled") ++unlabeled;
  CHECK(unlabeled == 5);  // stops at exactly one full window
}

TEST_CASE("eval metrics are finite and improve over a supervised-only run") {
  const Corpus corpus = tiny_corpus();
  TrainerConfig cfg = tiny_trainer(300);
  cfg.lambda = 0.0;
  Trainer trainer(tiny_encoder(), no_augment(), cpl::LRSchedule{}, cfg, corpus, 9);
  const double before = trainer.eval_ter(cpl::Split::Dev);
  const auto res = trainer.run();
  REQUIRE(res.status == cpl::RunStatus::Ok);
  CHECK(std::isfinite(res.final_dev_ter));
  CHECK(std::isfinite(res.final_test_ter));
  CHECK(std::isfinite(res.final_dev_wer));
  CHECK(res.final_dev_ter < before);
}
