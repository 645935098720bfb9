#pragma once

#include <map>
#include <string>
#include <vector>

#include "seqdens/metrics.hpp"

namespace seqdens {

// One row of the experiment matrix: everything the summary tables need.
// Fields that were not computed are explicitly marked absent.
struct ExperimentReport {
  std::string model_id;
  std::string family;        // ar | gauss | flow
  std::string data_variant;  // raw | distilled
  std::string config_hash;
  std::string suite_version;
  double test_ll = 0.0;
  bool has_ll = false;
  double test_ll_std_error = 0.0;
  double test_bleu = 0.0;
  bool has_bleu = false;
  std::map<int, double> bleu_per_k;
  std::map<int, double> elbo_per_k;
  std::map<int, double> pairwise_bleu_per_k;
  double sentences_per_second = 0.0;
  bool has_speed = false;
  long decoder_passes = 0;
  int64_t param_count = 0;
  std::map<std::string, std::string> provenance;  // artifact -> hash

  std::string serialize() const;  // canonical JSON, byte-stable
  static ExperimentReport parse(const std::string& json_text);
  void save(const std::string& path) const;
  static ExperimentReport load(const std::string& path);
};

// Fixed-width correlation grid; the golden-fixture formatter.
std::string format_correlation_grid(
    const std::vector<std::string>& columns,
    const std::vector<std::pair<std::string, std::vector<double>>>& rows);

std::string format_results_table(const std::vector<ExperimentReport>& reports);
std::string format_refinement_table(const std::vector<ExperimentReport>& reports);
std::string format_speed_table(const std::vector<ExperimentReport>& reports);

struct ScatterPoint {
  double x = 0.0;
  double y = 0.0;
  std::string label;
  std::string group;
};

void write_scatter_data(const std::string& path,
                        const std::vector<ScatterPoint>& points,
                        const std::string& x_name, const std::string& y_name,
                        const std::string& provenance);
void write_scatter_svg(const std::string& path,
                       const std::vector<ScatterPoint>& points,
                       const std::string& x_name, const std::string& y_name,
                       const std::string& title,
                       const std::string& provenance);

}  // namespace seqdens
