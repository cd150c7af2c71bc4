// Informative-sample selection: prediction-uncertainty weight, similarity /
// class-count gate against a memory bank of accepted outputs, and the
// sequential batch scan that combines them.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "idm/common.hpp"
#include "idm/model.hpp"
#include "idm/styletx.hpp"

namespace idm {

struct SelectionConfig {
  double lambda_ent = 0.015;
  double lambda_sim = 0.5;
  int k = 13;
  int batch_budget = 2;

  void validate() const;
  bool operator==(const SelectionConfig&) const = default;
};

/// Running mean of the spatially averaged softmax of every accepted sample.
struct MemoryBank {
  std::vector<double> mean_output;
  std::int64_t count = 0;

  bool empty() const { return count == 0; }
  void fold(std::span<const double> output_vec);
};

struct SelectionRecord {
  std::string sample_id;
  double entropy = 0.0;
  double w_pred = 0.0;
  double similarity = NAN;  // NaN when the bank was empty at scan time
  int class_count = 0;
  int w_sim = 0;
  double weight = 0.0;
  bool accepted = false;
};

/// Teacher-side summary of one candidate; everything the gates look at.
struct CandidateScore {
  double entropy = 0.0;
  std::vector<double> output_vec;
  int class_count = 0;
};

/// Spatial mean of per-pixel Shannon entropy divided by log C, in [0,1].
/// `probs` is C x pixels.
template <typename Derived>
double mean_entropy(const Eigen::MatrixBase<Derived>& probs) {
  const auto C = probs.rows();
  if (C < 2 || probs.cols() == 0) throw ContractError("mean_entropy: need >= 2 classes and >= 1 pixel");
  double total = 0.0;
  for (Eigen::Index p = 0; p < probs.cols(); ++p) {
    for (Eigen::Index c = 0; c < C; ++c) {
      const double v = static_cast<double>(probs(c, p));
      if (v > 0.0) total -= v * std::log(v);
    }
  }
  return total / (static_cast<double>(probs.cols()) * std::log(static_cast<double>(C)));
}

/// exp(H - lambda_ent) if H > lambda_ent, else 0.
double prediction_weight(double entropy, double lambda_ent);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// 1 iff (bank empty or cos(output_vec, bank) < lambda_sim) and class_count > k.
/// Writes the cosine (NaN for an empty bank) to `similarity` when given.
int similarity_gate(std::span<const double> output_vec, int class_count, const MemoryBank& bank,
                    const SelectionConfig& cfg, double* similarity = nullptr);

/// Number of distinct non-ignore classes in the map.
int class_count(const LabelMap& label);

CandidateScore score_candidate(const ModelState& teacher_net, const StylizedSample& candidate);

struct SelectionResult {
  std::vector<std::size_t> accepted;  // candidate indices, scan order
  std::vector<double> weights;        // W of each accepted candidate
  std::vector<SelectionRecord> records;  // one per candidate
  MemoryBank bank;
};

/// Sequential scan in candidate order. Accepts candidates with W > 0 until the
/// budget is met; records after that still carry their gate values but are not
/// accepted and do not touch the bank.
SelectionResult select_from_scores(std::span<const CandidateScore> scores,
                                   std::span<const std::string> ids, const MemoryBank& bank,
                                   const SelectionConfig& cfg);

/// Scores every candidate with the teacher (forward only) then runs the scan.
SelectionResult select_batch(std::span<const StylizedSample> candidates, const ModelState& teacher_net,
                             const MemoryBank& bank, const SelectionConfig& cfg);
SelectionResult select_batch(std::span<const StylizedSample> candidates, const TeacherState& teacher,
                             const MemoryBank& bank, const SelectionConfig& cfg);

/// id,entropy,w_pred,similarity,class_count,weight,accepted
void write_selection_csv(std::ostream& os, std::span<const SelectionRecord> records);

}  // namespace idm
