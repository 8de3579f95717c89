#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpl/matrix.hpp"
#include "cpl/metrics.hpp"
#include "cpl/model.hpp"  // little-endian I/O helpers
#include "cpl/rng.hpp"

#include <nlohmann/json.hpp>

namespace cpl {

enum class Split { Labeled, Unlabeled, Dev, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Labeled: return "labeled";
    case Split::Unlabeled: return "unlabeled";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split split_from_name(const std::string& s) {
  if (s == "labeled") return Split::Labeled;
  if (s == "unlabeled") return Split::Unlabeled;
  if (s == "dev") return Split::Dev;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split name: " + s);
}

struct Utterance {
  std::int64_t id = 0;
  Matrix features;     // T x F
  Transcript golden;   // never exposed to the trainer for unlabeled data
  Transcript frame_labels;  // true per-frame alignment (analysis only)
  Split split = Split::Labeled;
};

struct CorpusConfig {
  std::size_t vocab_tokens = 6;  // excluding blank
  std::size_t feat_dim = 8;
  std::uint64_t prototype_seed = 1;
  std::uint64_t corpus_seed = 2;
  std::size_t d_min = 7;   // frames per token
  std::size_t d_max = 12;
  double noise_sigma = 0.4;
  std::size_t len_min = 2;
  std::size_t len_max = 8;
  std::size_t n_labeled = 8;   // 10% of labeled + unlabeled
  std::size_t n_unlabeled = 72;
  std::size_t n_dev = 32;
  std::size_t n_test = 32;
  std::size_t max_frames = 0;  // 0 = unbounded
  double proto_dot_bound = 0.6;
  // domain-shift knob for the unlabeled split; < 0 means same as noise_sigma
  double unlabeled_sigma = -1.0;
};

struct Corpus {
  CorpusConfig cfg;
  Matrix prototypes;  // vocab_tokens x feat_dim, unit rows
  std::vector<Utterance> utterances;

  std::vector<std::size_t> split_indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < utterances.size(); ++i)
      if (utterances[i].split == s) out.push_back(i);
    return out;
  }
};

namespace detail {

// Unit prototype vectors with pairwise dot products below the bound;
// redrawn wholesale until the bound holds.
inline Matrix draw_prototypes(const CorpusConfig& cfg, Rng& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Matrix p(cfg.vocab_tokens, cfg.feat_dim);
    for (std::size_t i = 0; i < cfg.vocab_tokens; ++i) {
      double norm2 = 0.0;
      for (std::size_t f = 0; f < cfg.feat_dim; ++f) {
        p(i, f) = rng.normal();
        norm2 += p(i, f) * p(i, f);
      }
      const double inv = 1.0 / std::sqrt(norm2);
      for (std::size_t f = 0; f < cfg.feat_dim; ++f) p(i, f) *= inv;
    }
    bool ok = true;
    for (std::size_t i = 0; i < cfg.vocab_tokens && ok; ++i)
      for (std::size_t j = i + 1; j < cfg.vocab_tokens && ok; ++j) {
        double dot = 0.0;
        for (std::size_t f = 0; f < cfg.feat_dim; ++f) dot += p(i, f) * p(j, f);
        if (std::abs(dot) > cfg.proto_dot_bound) ok = false;
      }
    if (ok) return p;
  }
  throw std::invalid_argument("draw_prototypes: could not satisfy dot-product bound");
}

}  // namespace detail

inline void validate(const CorpusConfig& cfg) {
  if (cfg.vocab_tokens < 2) throw std::invalid_argument("corpus: vocab_tokens must be >= 2");
  if (cfg.d_min < 1) throw std::invalid_argument("corpus: d_min must be >= 1");
  if (cfg.d_max < cfg.d_min) throw std::invalid_argument("corpus: d_max < d_min");
  if (cfg.noise_sigma < 0) throw std::invalid_argument("corpus: noise_sigma must be >= 0");
  if (cfg.len_min < 1 || cfg.len_max < cfg.len_min)
    throw std::invalid_argument("corpus: bad transcript length range");
  if (cfg.n_labeled < 1 || cfg.n_unlabeled < 1 || cfg.n_dev < 1 || cfg.n_test < 1)
    throw std::invalid_argument("corpus: split sizes must be >= 1");
  if (cfg.max_frames > 0 && cfg.len_max * cfg.d_max > cfg.max_frames)
    throw std::invalid_argument("corpus: len_max * d_max exceeds max_frames");
}

// Token prototypes rendered as repeated frames plus i.i.d. Gaussian
// noise. Deterministic given the two seeds; splits disjoint by id.
inline Corpus generate_corpus(const CorpusConfig& cfg) {
  validate(cfg);
  Corpus corpus;
  corpus.cfg = cfg;
  Rng proto_rng(derive_seed(cfg.prototype_seed, Stream::Prototypes));
  corpus.prototypes = detail::draw_prototypes(cfg, proto_rng);

  Rng rng(derive_seed(cfg.corpus_seed, Stream::Corpus));
  const std::size_t total = cfg.n_labeled + cfg.n_unlabeled + cfg.n_dev + cfg.n_test;
  corpus.utterances.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    Utterance u;
    u.id = static_cast<std::int64_t>(i);
    if (i < cfg.n_labeled) u.split = Split::Labeled;
    else if (i < cfg.n_labeled + cfg.n_unlabeled) u.split = Split::Unlabeled;
    else if (i < cfg.n_labeled + cfg.n_unlabeled + cfg.n_dev) u.split = Split::Dev;
    else u.split = Split::Test;

    const std::size_t len =
        static_cast<std::size_t>(rng.uniform_int(static_cast<long>(cfg.len_min),
                                                 static_cast<long>(cfg.len_max)));
    // uniform over repeat-free transcripts: a frame-local encoder has no
    // cue for the boundary between two identical prototypes, so immediate
    // repeats would be undecodable by construction
    u.golden.resize(len);
    for (std::size_t j = 0; j < len; ++j) {
      if (j == 0) {
        u.golden[j] = static_cast<TokenId>(rng.uniform_index(cfg.vocab_tokens));
      } else {
        const std::size_t r = rng.uniform_index(cfg.vocab_tokens - 1);
        u.golden[j] = static_cast<TokenId>(
            r + (r >= static_cast<std::size_t>(u.golden[j - 1]) ? 1 : 0));
      }
    }

    std::vector<std::size_t> durations(len);
    std::size_t T = 0;
    for (auto& d : durations) {
      d = static_cast<std::size_t>(
          rng.uniform_int(static_cast<long>(cfg.d_min), static_cast<long>(cfg.d_max)));
      T += d;
    }
    double sigma = cfg.noise_sigma;
    if (u.split == Split::Unlabeled && cfg.unlabeled_sigma >= 0.0) sigma = cfg.unlabeled_sigma;

    u.features = Matrix(T, cfg.feat_dim);
    u.frame_labels.reserve(T);
    std::size_t t = 0;
    for (std::size_t i_tok = 0; i_tok < len; ++i_tok) {
      for (std::size_t d = 0; d < durations[i_tok]; ++d, ++t) {
        u.frame_labels.push_back(u.golden[i_tok]);
        for (std::size_t f = 0; f < cfg.feat_dim; ++f)
          u.features(t, f) =
              corpus.prototypes(static_cast<std::size_t>(u.golden[i_tok]), f) +
              sigma * rng.normal();
      }
    }
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

enum class BatchMode { Static, Dynamic };

// Infinite shuffled stream of batches over one split. Static mode packs
// a fixed utterance count; dynamic mode greedily packs up to a total
// frame budget (at least one utterance per batch).
class Batcher {
 public:
  Batcher(const Corpus& corpus, Split split, BatchMode mode, std::size_t batch_size,
          std::size_t max_frames, std::uint64_t seed)
      : corpus_(&corpus),
        indices_(corpus.split_indices(split)),
        mode_(mode),
        batch_size_(batch_size),
        max_frames_(max_frames),
        rng_(seed) {
    if (indices_.empty()) throw std::invalid_argument("Batcher: split is empty");
    if (mode == BatchMode::Static && batch_size == 0)
      throw std::invalid_argument("Batcher: batch_size must be > 0");
    if (mode == BatchMode::Dynamic && max_frames == 0)
      throw std::invalid_argument("Batcher: max_frames must be > 0");
    reshuffle();
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> batch;
    if (mode_ == BatchMode::Static) {
      for (std::size_t i = 0; i < batch_size_; ++i) batch.push_back(take());
      return batch;
    }
    std::size_t frames = 0;
    while (true) {
      const std::size_t idx = peek();
      const std::size_t t = corpus_->utterances[idx].features.rows;
      if (!batch.empty() && frames + t > max_frames_) break;
      batch.push_back(take());
      frames += t;
      if (frames >= max_frames_) break;
    }
    return batch;
  }

 private:
  std::size_t peek() {
    if (pos_ >= order_.size()) reshuffle();
    return order_[pos_];
  }
  std::size_t take() {
    const std::size_t idx = peek();
    ++pos_;
    return idx;
  }
  void reshuffle() {
    order_ = indices_;
    for (std::size_t i = order_.size(); i > 1; --i)
      std::swap(order_[i - 1], order_[rng_.uniform_index(i)]);
    pos_ = 0;
  }

  const Corpus* corpus_;
  std::vector<std::size_t> indices_;
  BatchMode mode_;
  std::size_t batch_size_;
  std::size_t max_frames_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// ---- corpus serialization: JSON manifest + dense little-endian binary
// feature file with a version header.

inline void save_corpus(const Corpus& corpus, const std::string& manifest_path,
                        const std::string& features_path) {
  std::ofstream fb(features_path, std::ios::binary);
  if (!fb) throw std::runtime_error("save_corpus: cannot open " + features_path);
  fb.write("CPLFEAT1", 8);
  detail::write_u64(fb, corpus.utterances.size());

  nlohmann::ordered_json man;
  man["format"] = "cpl-corpus";
  man["version"] = 1;
  man["endianness"] = "little";
  man["config"] = {
      {"vocab_tokens", corpus.cfg.vocab_tokens},
      {"feat_dim", corpus.cfg.feat_dim},
      {"prototype_seed", corpus.cfg.prototype_seed},
      {"corpus_seed", corpus.cfg.corpus_seed},
      {"d_min", corpus.cfg.d_min},
      {"d_max", corpus.cfg.d_max},
      {"noise_sigma", corpus.cfg.noise_sigma},
      {"len_min", corpus.cfg.len_min},
      {"len_max", corpus.cfg.len_max},
      {"n_labeled", corpus.cfg.n_labeled},
      {"n_unlabeled", corpus.cfg.n_unlabeled},
      {"n_dev", corpus.cfg.n_dev},
      {"n_test", corpus.cfg.n_test},
      {"max_frames", corpus.cfg.max_frames},
      {"proto_dot_bound", corpus.cfg.proto_dot_bound},
      {"unlabeled_sigma", corpus.cfg.unlabeled_sigma},
  };
  man["prototypes"] = corpus.prototypes.v;
  man["utterances"] = nlohmann::json::array();

  std::uint64_t offset = 16;  // header bytes
  for (const auto& u : corpus.utterances) {
    nlohmann::ordered_json ju;
    ju["id"] = u.id;
    ju["split"] = split_name(u.split);
    ju["frames"] = u.features.rows;
    ju["golden"] = u.golden;
    ju["frame_labels"] = u.frame_labels;
    ju["offset"] = offset;
    man["utterances"].push_back(std::move(ju));
    for (double d : u.features.v) detail::write_f64(fb, d);
    offset += 8 * u.features.v.size();
  }
  if (!fb) throw std::runtime_error("save_corpus: write failed for " + features_path);
  fb.close();

  std::ofstream fm(manifest_path);
  if (!fm) throw std::runtime_error("save_corpus: cannot open " + manifest_path);
  fm << man.dump(2) << "\n";
  if (!fm) throw std::runtime_error("save_corpus: write failed for " + manifest_path);
}

inline Corpus load_corpus(const std::string& manifest_path, const std::string& features_path) {
  std::ifstream fm(manifest_path);
  if (!fm) throw std::runtime_error("load_corpus: cannot open " + manifest_path);
  nlohmann::json man = nlohmann::json::parse(fm);
  if (man.value("format", "") != "cpl-corpus" || man.value("version", 0) != 1)
    throw std::runtime_error("load_corpus: unsupported manifest format in " + manifest_path);

  Corpus corpus;
  const auto& jc = man.at("config");
  corpus.cfg.vocab_tokens = jc.at("vocab_tokens").get<std::size_t>();
  corpus.cfg.feat_dim = jc.at("feat_dim").get<std::size_t>();
  corpus.cfg.prototype_seed = jc.at("prototype_seed").get<std::uint64_t>();
  corpus.cfg.corpus_seed = jc.at("corpus_seed").get<std::uint64_t>();
  corpus.cfg.d_min = jc.at("d_min").get<std::size_t>();
  corpus.cfg.d_max = jc.at("d_max").get<std::size_t>();
  corpus.cfg.noise_sigma = jc.at("noise_sigma").get<double>();
  corpus.cfg.len_min = jc.at("len_min").get<std::size_t>();
  corpus.cfg.len_max = jc.at("len_max").get<std::size_t>();
  corpus.cfg.n_labeled = jc.at("n_labeled").get<std::size_t>();
  corpus.cfg.n_unlabeled = jc.at("n_unlabeled").get<std::size_t>();
  corpus.cfg.n_dev = jc.at("n_dev").get<std::size_t>();
  corpus.cfg.n_test = jc.at("n_test").get<std::size_t>();
  corpus.cfg.max_frames = jc.at("max_frames").get<std::size_t>();
  corpus.cfg.proto_dot_bound = jc.at("proto_dot_bound").get<double>();
  corpus.cfg.unlabeled_sigma = jc.at("unlabeled_sigma").get<double>();

  corpus.prototypes = Matrix(corpus.cfg.vocab_tokens, corpus.cfg.feat_dim);
  corpus.prototypes.v = man.at("prototypes").get<std::vector<double>>();
  if (corpus.prototypes.v.size() != corpus.cfg.vocab_tokens * corpus.cfg.feat_dim)
    throw std::runtime_error("load_corpus: prototype size mismatch");

  std::ifstream fb(features_path, std::ios::binary);
  if (!fb) throw std::runtime_error("load_corpus: cannot open " + features_path);
  char magic[8];
  fb.read(magic, 8);
  if (!fb || std::string(magic, 8) != "CPLFEAT1")
    throw std::runtime_error("load_corpus: bad magic in " + features_path);
  const std::uint64_t count = detail::read_u64(fb);
  if (count != man.at("utterances").size())
    throw std::runtime_error("load_corpus: utterance count mismatch");

  for (const auto& ju : man.at("utterances")) {
    Utterance u;
    u.id = ju.at("id").get<std::int64_t>();
    u.split = split_from_name(ju.at("split").get<std::string>());
    u.golden = ju.at("golden").get<Transcript>();
    u.frame_labels = ju.at("frame_labels").get<Transcript>();
    const std::size_t frames = ju.at("frames").get<std::size_t>();
    u.features = Matrix(frames, corpus.cfg.feat_dim);
    for (double& d : u.features.v) d = detail::read_f64(fb);
    corpus.utterances.push_back(std::move(u));
  }
  if (!fb) throw std::runtime_error("load_corpus: truncated feature file " + features_path);
  return corpus;
}

}  // namespace cpl
