#include "pc4d/textmetrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include "pc4d/error.hpp"

namespace pc4d {

std::vector<std::string> metric_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

double bleu1(std::string_view candidate, std::string_view reference) {
  const auto cand = metric_tokens(candidate);
  const auto ref = metric_tokens(reference);
  if (cand.empty() || ref.empty()) return 0.0;
  std::map<std::string, int> ref_counts;
  for (const auto& w : ref) ++ref_counts[w];
  std::size_t clipped = 0;
  for (const auto& w : cand) {
    auto it = ref_counts.find(w);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++clipped;
    }
  }
  const double precision = double(clipped) / double(cand.size());
  const double bp = std::exp(std::min(0.0, 1.0 - double(ref.size()) / double(cand.size())));
  return precision * bp;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::string_view candidate, std::string_view reference) {
  const auto cand = metric_tokens(candidate);
  const auto ref = metric_tokens(reference);
  const std::size_t lcs = lcs_length(cand, ref);
  if (lcs == 0) return 0.0;
  const double p = double(lcs) / double(cand.size());
  const double r = double(lcs) / double(ref.size());
  return 2 * p * r / (p + r);
}

double meteor_lite(std::string_view candidate, std::string_view reference) {
  constexpr double alpha = 0.9, beta = 3.0, gamma = 0.5;
  const auto cand = metric_tokens(candidate);
  const auto ref = metric_tokens(reference);
  std::vector<bool> used(ref.size(), false);
  std::vector<std::ptrdiff_t> align(cand.size(), -1);
  std::size_t m = 0;
  for (std::size_t i = 0; i < cand.size(); ++i)
    for (std::size_t j = 0; j < ref.size(); ++j)
      if (!used[j] && ref[j] == cand[i]) {
        used[j] = true;
        align[i] = static_cast<std::ptrdiff_t>(j);
        ++m;
        break;
      }
  if (m == 0) return 0.0;
  std::size_t chunks = 0;
  std::ptrdiff_t prev = -2;
  bool in_chunk = false;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (align[i] < 0) {
      in_chunk = false;
      continue;
    }
    if (!in_chunk || align[i] != prev + 1) ++chunks;
    in_chunk = true;
    prev = align[i];
  }
  const double p = double(m) / double(cand.size());
  const double r = double(m) / double(ref.size());
  const double fmean = p * r / (alpha * r + (1 - alpha) * p);
  const double penalty = gamma * std::pow(double(chunks) / double(m), beta);
  return fmean * (1 - penalty);
}

double cosine(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size())
    fail(ErrorKind::kDimensionMismatch,
         "cosine of vectors with " + std::to_string(u.size()) + " and " + std::to_string(v.size()) + " entries");
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += double(u[i]) * v[i];
    nu += double(u[i]) * u[i];
    nv += double(v[i]) * v[i];
  }
  if (nu == 0 || nv == 0) return 0.0;
  return std::clamp(dot / std::sqrt(nu * nv), -1.0, 1.0);
}

PairScore score_pair(std::string_view candidate, std::string_view reference) {
  return {bleu1(candidate, reference), rouge_l(candidate, reference), meteor_lite(candidate, reference)};
}

MetricReport score_pairs(std::span<const std::string> candidates, std::span<const std::string> references) {
  if (candidates.size() != references.size())
    fail(ErrorKind::kDimensionMismatch, "candidate and reference counts differ");
  MetricReport rep;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    rep.pairs.push_back(score_pair(candidates[i], references[i]));
    rep.bleu1 += rep.pairs.back().bleu1;
    rep.rouge_l += rep.pairs.back().rouge_l;
    rep.meteor += rep.pairs.back().meteor;
  }
  if (!rep.pairs.empty()) {
    const double n = double(rep.pairs.size());
    rep.bleu1 /= n;
    rep.rouge_l /= n;
    rep.meteor /= n;
  }
  return rep;
}

}  // namespace pc4d
