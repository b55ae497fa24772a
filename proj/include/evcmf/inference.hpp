#pragma once

// Autoregressive generation: the sequence [CLS] w1 .. wk [MASK] is decoded
// and the distribution at the [MASK] slot gives w(k+1).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "evcmf/model.hpp"
#include "evcmf/vocabulary.hpp"

namespace evcmf {

struct Hypothesis {
  std::vector<int> ids{kClsId};
  double log_prob = 0.0;
  bool finished = false;

  std::size_t generated() const { return ids.size() - 1; }
  double normalized_score() const {
    return generated() == 0 ? 0.0 : log_prob / static_cast<double>(generated());
  }
  std::vector<int> tokens() const { return {ids.begin() + 1, ids.end()}; }
};

/// Log-probabilities over the vocabulary for the token following prefix
/// (prefix starts with [CLS]).
using NextTokenFn = std::function<std::vector<double>(const std::vector<int>& prefix)>;

template <typename T>
std::vector<double> next_token_distribution(const EvcModel<T>& model, const Tensor<T>& visual_tokens,
                                            const Hypothesis& hyp) {
  if (hyp.finished) throw ContractError("next_token_distribution: hypothesis already finished");
  NoGradGuard no_grad;
  std::vector<int> ids = hyp.ids;
  ids.push_back(kMaskId);
  auto logits = model.logits(TextBatch::unpadded(ids), visual_tokens);
  auto logp = log_softmax_rows(slice_rows(logits, ids.size() - 1, 1));
  return {logp.data().begin(), logp.data().end()};
}

template <typename T>
NextTokenFn model_scorer(const EvcModel<T>& model, const Tensor<T>& visual_tokens) {
  return [&model, visual_tokens](const std::vector<int>& prefix) {
    Hypothesis h;
    h.ids = prefix;
    return next_token_distribution(model, visual_tokens, h);
  };
}

namespace detail {

// Higher normalized score first; ties go to the lexicographically smaller ids.
inline bool better(const Hypothesis& a, const Hypothesis& b) {
  const double sa = a.normalized_score(), sb = b.normalized_score();
  if (sa != sb) return sa > sb;
  return a.ids < b.ids;
}

}  // namespace detail

/// Argmax rollout until [EOS] or max_len generated tokens.
inline Hypothesis greedy_decode(const NextTokenFn& next, std::size_t max_len) {
  Hypothesis h;
  while (!h.finished) {
    const auto logp = next(h.ids);
    const auto best = static_cast<int>(std::max_element(logp.begin(), logp.end()) - logp.begin());
    h.ids.push_back(best);
    h.log_prob += logp[best];
    h.finished = best == kEosId || h.generated() >= max_len;
  }
  return h;
}

/// Beam search ranked by length-normalised log-probability. Each round keeps
/// the best `beam` expansions of the live hypotheses; those ending in [EOS]
/// or reaching max_len retire to the finished pool and the beam narrows.
inline Hypothesis beam_search(const NextTokenFn& next, std::size_t beam, std::size_t max_len) {
  beam = std::max<std::size_t>(beam, 1);
  max_len = std::max<std::size_t>(max_len, 1);
  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> done;
  while (!live.empty() && done.size() < beam) {
    std::vector<Hypothesis> candidates;
    for (const auto& h : live) {
      const auto logp = next(h.ids);
      for (std::size_t tok = 0; tok < logp.size(); ++tok) {
        if (!std::isfinite(logp[tok])) continue;
        Hypothesis c = h;
        c.ids.push_back(static_cast<int>(tok));
        c.log_prob += logp[tok];
        c.finished = static_cast<int>(tok) == kEosId || c.generated() >= max_len;
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(beam - done.size(), candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      detail::better);
    live.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      if (candidates[i].finished) {
        done.push_back(std::move(candidates[i]));
      } else {
        live.push_back(std::move(candidates[i]));
      }
    }
  }
  if (done.empty()) return Hypothesis{};
  return *std::min_element(done.begin(), done.end(), detail::better);
}

/// Clip -> caption text (no feature masking at inference).
template <typename T>
std::string generate_caption(const EvcModel<T>& model, const VideoClip& clip, const Vocabulary& vocab,
                             std::size_t beam, std::size_t max_len) {
  NoGradGuard no_grad;
  auto tokens = model.visual_tokens(model.encode(clip));
  const auto best = beam_search(model_scorer(model, tokens), beam, max_len);
  return vocab.decode(best.tokens());
}

struct Prediction {
  std::string video_id;
  std::string caption;
};

inline void write_predictions(const std::filesystem::path& path, const std::vector<Prediction>& preds) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  for (const auto& p : preds) os << nlohmann::json{{"video_id", p.video_id}, {"caption", p.caption}}.dump() << '\n';
  if (!os) throw InputError("write failed for " + path.string());
}

}  // namespace evcmf
