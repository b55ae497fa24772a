#pragma once

// Corpus caption metrics: BLEU-4, METEOR (exact match), ROUGE-L and CIDEr.
// All scores are fractions in [0, 1].

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "evcmf/error.hpp"
#include "evcmf/vocabulary.hpp"

namespace evcmf {

using Sentence = std::vector<std::string>;

struct EvalItem {
  std::string video_id;
  Sentence candidate;
  std::vector<Sentence> references;
};

struct EvalCorpus {
  std::vector<EvalItem> items;
  std::size_t size() const { return items.size(); }
};

struct MetricOptions {
  std::vector<double> bleu_weights{0.25, 0.25, 0.25, 0.25};
  std::vector<double> cider_weights{0.25, 0.25, 0.25, 0.25};
  double meteor_alpha = 3.0;
  double meteor_gamma = 0.5;
  double meteor_theta = 3.0;
  double rouge_alpha = 1.2;
};

using NgramCounts = std::map<Sentence, std::size_t>;

inline NgramCounts ngram_counts(const Sentence& s, std::size_t n) {
  NgramCounts out;
  if (s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[Sentence(s.begin() + i, s.begin() + i + n)];
  return out;
}

inline double bleu(const EvalCorpus& corpus, const std::vector<double>& weights) {
  const std::size_t order = weights.size();
  std::vector<double> matched(order, 0.0), total(order, 0.0);
  double c = 0.0, r = 0.0;
  for (const auto& item : corpus.items) {
    const auto& cand = item.candidate;
    c += static_cast<double>(cand.size());
    // closest reference length, shorter on ties
    std::size_t best = item.references.front().size();
    for (const auto& ref : item.references) {
      const auto d = [&](std::size_t len) { return len > cand.size() ? len - cand.size() : cand.size() - len; };
      if (d(ref.size()) < d(best) || (d(ref.size()) == d(best) && ref.size() < best)) best = ref.size();
    }
    r += static_cast<double>(best);
    for (std::size_t n = 1; n <= order; ++n) {
      NgramCounts max_ref;
      for (const auto& ref : item.references)
        for (const auto& [g, k] : ngram_counts(ref, n)) max_ref[g] = std::max(max_ref[g], k);
      for (const auto& [g, k] : ngram_counts(cand, n)) {
        total[n - 1] += static_cast<double>(k);
        const auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[n - 1] += static_cast<double>(std::min(k, it->second));
      }
    }
  }
  if (c == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < order; ++n) {
    if (matched[n] == 0.0) return 0.0;
    log_sum += weights[n] * std::log(matched[n] / total[n]);
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum);
}

inline double bleu4(const EvalCorpus& corpus, const MetricOptions& opt = {}) { return bleu(corpus, opt.bleu_weights); }

/// Single candidate/reference METEOR with greedy exact alignment in candidate order.
inline double meteor_sentence(const Sentence& cand, const Sentence& ref, const MetricOptions& opt = {}) {
  if (cand.empty() || ref.empty()) return 0.0;
  std::vector<bool> used(ref.size(), false);
  std::vector<long> align(cand.size(), -1);
  std::size_t matches = 0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (!used[j] && ref[j] == cand[i]) {
        used[j] = true;
        align[i] = static_cast<long>(j);
        ++matches;
        break;
      }
    }
  }
  if (matches == 0) return 0.0;
  std::size_t chunks = 0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (align[i] < 0) continue;
    const bool continues = i > 0 && align[i - 1] >= 0 && align[i - 1] + 1 == align[i];
    if (!continues) ++chunks;
  }
  const double p = static_cast<double>(matches) / static_cast<double>(cand.size());
  const double rc = static_cast<double>(matches) / static_cast<double>(ref.size());
  const double a2 = opt.meteor_alpha * opt.meteor_alpha;
  const double fmean = (a2 + 1.0) * p * rc / (rc + a2 * p);
  const double pen =
      opt.meteor_gamma * std::pow(static_cast<double>(chunks) / static_cast<double>(matches), opt.meteor_theta);
  return (1.0 - pen) * fmean;
}

inline double meteor(const EvalCorpus& corpus, const MetricOptions& opt = {}) {
  if (corpus.items.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& item : corpus.items) {
    double best = 0.0;
    for (const auto& ref : item.references) best = std::max(best, meteor_sentence(item.candidate, ref, opt));
    acc += best;
  }
  return acc / static_cast<double>(corpus.items.size());
}

inline std::size_t lcs_length(const Sentence& a, const Sentence& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l_sentence(const Sentence& cand, const Sentence& ref, double alpha = 1.2) {
  if (cand.empty() || ref.empty()) return 0.0;
  const auto l = static_cast<double>(lcs_length(cand, ref));
  if (l == 0.0) return 0.0;
  const double p = l / static_cast<double>(cand.size());
  const double r = l / static_cast<double>(ref.size());
  const double a2 = alpha * alpha;
  return (a2 + 1.0) * p * r / (r + a2 * p);
}

inline double rouge_l(const EvalCorpus& corpus, const MetricOptions& opt = {}) {
  if (corpus.items.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& item : corpus.items) {
    double best = 0.0;
    for (const auto& ref : item.references)
      best = std::max(best, rouge_l_sentence(item.candidate, ref, opt.rouge_alpha));
    acc += best;
  }
  return acc / static_cast<double>(corpus.items.size());
}

inline double cider(const EvalCorpus& corpus, const MetricOptions& opt = {}) {
  if (corpus.items.empty()) return 0.0;
  const double videos = static_cast<double>(corpus.items.size());
  double total = 0.0;
  for (std::size_t n = 1; n <= opt.cider_weights.size(); ++n) {
    // document frequency over videos, counted on references only
    std::map<Sentence, double> df;
    for (const auto& item : corpus.items) {
      std::set<Sentence> seen;
      for (const auto& ref : item.references)
        for (const auto& kv : ngram_counts(ref, n)) seen.insert(kv.first);
      for (const auto& g : seen) df[g] += 1.0;
    }
    const auto vec = [&](const Sentence& s) {
      std::map<Sentence, double> g;
      const auto counts = ngram_counts(s, n);
      double len = 0.0;
      for (const auto& kv : counts) len += static_cast<double>(kv.second);
      for (const auto& [gram, k] : counts) {
        const auto it = df.find(gram);
        const double d = it == df.end() ? 1.0 : it->second;
        g[gram] = static_cast<double>(k) / len * std::log(videos / d);
      }
      return g;
    };
    const auto cosine = [](const std::map<Sentence, double>& a, const std::map<Sentence, double>& b) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (const auto& [k, v] : a) {
        na += v * v;
        const auto it = b.find(k);
        if (it != b.end()) dot += v * it->second;
      }
      for (const auto& kv : b) nb += kv.second * kv.second;
      if (na == 0.0 || nb == 0.0) return 0.0;
      return dot / (std::sqrt(na) * std::sqrt(nb));
    };
    double score_n = 0.0;
    for (const auto& item : corpus.items) {
      const auto gc = vec(item.candidate);
      double acc = 0.0;
      for (const auto& ref : item.references) acc += cosine(gc, vec(ref));
      score_n += acc / static_cast<double>(item.references.size());
    }
    total += opt.cider_weights[n - 1] * score_n / videos;
  }
  return total;
}

struct MetricReport {
  double bleu4 = 0.0;
  double meteor = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  std::size_t videos = 0;
  std::size_t references = 0;

  static std::string percent(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v * 100.0);
    return buf;
  }

  nlohmann::json to_json() const {
    return {{"bleu4", bleu4},
            {"meteor", meteor},
            {"rouge_l", rouge_l},
            {"cider", cider},
            {"videos", videos},
            {"references", references},
            {"percent",
             {{"bleu4", percent(bleu4)},
              {"meteor", percent(meteor)},
              {"rouge_l", percent(rouge_l)},
              {"cider", percent(cider)}}}};
  }

  std::string table() const {
    std::string out = "metric    score\n";
    out += "B-4       " + percent(bleu4) + "\n";
    out += "M         " + percent(meteor) + "\n";
    out += "R         " + percent(rouge_l) + "\n";
    out += "C         " + percent(cider) + "\n";
    return out;
  }
};

inline MetricReport score_corpus(const EvalCorpus& corpus, const MetricOptions& opt = {}) {
  if (corpus.items.empty()) throw InputError("evaluation corpus is empty");
  MetricReport r;
  r.bleu4 = bleu4(corpus, opt);
  r.meteor = meteor(corpus, opt);
  r.rouge_l = rouge_l(corpus, opt);
  r.cider = cider(corpus, opt);
  r.videos = corpus.items.size();
  for (const auto& item : corpus.items) r.references += item.references.size();
  return r;
}

namespace detail {

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open " + path.string());
  std::vector<nlohmann::json> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(is, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace detail

/// Predictions: {"video_id", "caption"} per line (a "captions" list uses its
/// first entry). References: {"video_id", "captions": [...]} per line.
inline EvalCorpus load_eval_corpus(const std::filesystem::path& predictions, const std::filesystem::path& references) {
  std::map<std::string, std::vector<Sentence>> refs;
  for (const auto& j : detail::read_jsonl(references)) {
    if (!j.contains("video_id") || !j.contains("captions"))
      throw InputError(references.string() + ": entry lacks video_id or captions");
    auto& list = refs[j.at("video_id").get<std::string>()];
    for (const auto& c : j.at("captions")) list.push_back(tokenize(c.get<std::string>()));
  }
  EvalCorpus corpus;
  for (const auto& j : detail::read_jsonl(predictions)) {
    if (!j.contains("video_id")) throw InputError(predictions.string() + ": entry lacks video_id");
    const auto id = j.at("video_id").get<std::string>();
    std::string text;
    if (j.contains("caption")) {
      text = j.at("caption").get<std::string>();
    } else if (j.contains("captions") && !j.at("captions").empty()) {
      text = j.at("captions").front().get<std::string>();
    } else {
      throw InputError(predictions.string() + ": entry " + id + " has no caption");
    }
    const auto it = refs.find(id);
    if (it == refs.end() || it->second.empty()) throw InputError("no references for video id " + id);
    corpus.items.push_back({id, tokenize(text), it->second});
  }
  if (corpus.items.empty()) throw InputError(predictions.string() + ": no predictions");
  return corpus;
}

inline MetricReport evaluate(const std::filesystem::path& predictions, const std::filesystem::path& references,
                             const MetricOptions& opt = {}) {
  return score_corpus(load_eval_corpus(predictions, references), opt);
}

}  // namespace evcmf
