#pragma once

// Caption metrics over lowercase alphanumeric word tokens: BLEU-1, ROUGE-L,
// a METEOR variant with exact-match alignment only, and vector cosine.

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pc4d {

std::vector<std::string> metric_tokens(std::string_view text);

double bleu1(std::string_view candidate, std::string_view reference);
double rouge_l(std::string_view candidate, std::string_view reference);
double meteor_lite(std::string_view candidate, std::string_view reference);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

// 0 when either vector has zero norm; DimensionMismatch on unequal sizes.
double cosine(std::span<const float> u, std::span<const float> v);

struct PairScore {
  double bleu1 = 0, rouge_l = 0, meteor = 0;
};

PairScore score_pair(std::string_view candidate, std::string_view reference);

struct MetricReport {
  double bleu1 = 0, rouge_l = 0, meteor = 0;
  std::vector<PairScore> pairs;
};

MetricReport score_pairs(std::span<const std::string> candidates, std::span<const std::string> references);

}  // namespace pc4d
