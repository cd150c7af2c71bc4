#include "idm/selection.hpp"

#include <array>
#include <iomanip>

namespace idm {

void SelectionConfig::validate() const {
  if (!(lambda_ent > 0.0)) throw ConfigError("selection: lambda_ent must be > 0");
  if (!(lambda_sim > -1.0 && lambda_sim <= 1.0)) throw ConfigError("selection: lambda_sim must be in (-1, 1]");
  if (k < 1) throw ConfigError("selection: k must be >= 1");
  if (batch_budget < 1) throw ConfigError("selection: batch_budget must be >= 1");
}

void MemoryBank::fold(std::span<const double> output_vec) {
  if (count == 0) {
    mean_output.assign(output_vec.begin(), output_vec.end());
  } else {
    if (output_vec.size() != mean_output.size()) throw ContractError("MemoryBank: dimension mismatch");
    const double n = static_cast<double>(count + 1);
    for (std::size_t c = 0; c < mean_output.size(); ++c) {
      mean_output[c] += (output_vec[c] - mean_output[c]) / n;
    }
  }
  ++count;
}

double prediction_weight(double entropy, double lambda_ent) {
  return entropy > lambda_ent ? std::exp(entropy - lambda_ent) : 0.0;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("cosine_similarity: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw ContractError("cosine_similarity: zero vector");
  return dot / std::sqrt(na * nb);
}

int similarity_gate(std::span<const double> output_vec, int class_count, const MemoryBank& bank,
                    const SelectionConfig& cfg, double* similarity) {
  bool any = false;
  for (const double v : output_vec) any = any || v != 0.0;
  if (!any) throw ContractError("similarity_gate: output vector is zero");
  bool diverse = true;
  double cos = NAN;
  if (!bank.empty()) {
    cos = cosine_similarity(output_vec, bank.mean_output);
    diverse = cos < cfg.lambda_sim;
  }
  if (similarity) *similarity = cos;
  return diverse && class_count > cfg.k ? 1 : 0;
}

int class_count(const LabelMap& label) {
  std::array<bool, 256> seen{};
  int n = 0;
  for (const auto v : label.data) {
    if (v == kIgnoreLabel || seen[v]) continue;
    seen[v] = true;
    ++n;
  }
  return n;
}

CandidateScore score_candidate(const ModelState& teacher_net, const StylizedSample& candidate) {
  const auto out = forward(teacher_net, candidate.image);
  CandidateScore s;
  s.entropy = mean_entropy(out.probs);
  const Eigen::VectorXd mean = out.probs.cast<double>().rowwise().mean();
  s.output_vec.assign(mean.data(), mean.data() + mean.size());
  s.class_count = class_count(candidate.source_label);
  return s;
}

SelectionResult select_from_scores(std::span<const CandidateScore> scores,
                                   std::span<const std::string> ids, const MemoryBank& bank,
                                   const SelectionConfig& cfg) {
  cfg.validate();
  if (ids.size() != scores.size()) throw ContractError("select: ids and scores differ in length");
  SelectionResult result;
  result.bank = bank;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto& s = scores[i];
    SelectionRecord r;
    r.sample_id = ids[i];
    r.entropy = s.entropy;
    r.class_count = s.class_count;
    r.w_pred = prediction_weight(s.entropy, cfg.lambda_ent);
    r.w_sim = similarity_gate(s.output_vec, s.class_count, result.bank, cfg, &r.similarity);
    r.weight = r.w_pred * r.w_sim;
    if (r.weight > 0.0 && static_cast<int>(result.accepted.size()) < cfg.batch_budget) {
      r.accepted = true;
      result.accepted.push_back(i);
      result.weights.push_back(r.weight);
      result.bank.fold(s.output_vec);
    }
    result.records.push_back(std::move(r));
  }
  return result;
}

SelectionResult select_batch(std::span<const StylizedSample> candidates, const ModelState& teacher_net,
                             const MemoryBank& bank, const SelectionConfig& cfg) {
  std::vector<CandidateScore> scores(candidates.size());
  std::vector<std::string> ids(candidates.size());
  const auto n = static_cast<int>(candidates.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    scores[i] = score_candidate(teacher_net, candidates[i]);
    ids[i] = candidates[i].source_id;
  }
  return select_from_scores(scores, ids, bank, cfg);
}

SelectionResult select_batch(std::span<const StylizedSample> candidates, const TeacherState& teacher,
                             const MemoryBank& bank, const SelectionConfig& cfg) {
  return select_batch(candidates, teacher.snapshot(), bank, cfg);
}

void write_selection_csv(std::ostream& os, std::span<const SelectionRecord> records) {
  os << "id,entropy,w_pred,similarity,class_count,weight,accepted\n";
  os << std::setprecision(9);
  for (const auto& r : records) {
    os << r.sample_id << ',' << r.entropy << ',' << r.w_pred << ',';
    if (std::isnan(r.similarity)) {
      os << "nan";
    } else {
      os << r.similarity;
    }
    os << ',' << r.class_count << ',' << r.weight << ',' << (r.accepted ? 1 : 0) << '\n';
  }
}

}  // namespace idm
