#ifndef PLNBENCH_DATA_CORE_HPP
#define PLNBENCH_DATA_CORE_HPP

#include <Eigen/Dense>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "plnbench/errors.hpp"

namespace plnbench {

// N x D count table with per-sample sequencing-depth offsets. Entries are
// integer-valued on ingestion but may hold transformed values afterwards.
struct CountMatrix {
    std::vector<std::string> sample_ids;
    std::vector<std::string> taxon_names;
    Eigen::MatrixXd counts;  // N x D, nonnegative
    Eigen::VectorXd offsets; // length N, strictly positive

    Eigen::Index n_samples() const { return counts.rows(); }
    Eigen::Index n_taxa() const { return counts.cols(); }

    // Throws validation_error on any invariant violation.
    void validate() const;
};

struct DatasetStats {
    Eigen::Index n_samples = 0;
    Eigen::Index n_taxa = 0;
    double nd_ratio = 0.0;       // N / D
    double sparsity = 0.0;       // fraction of zero entries
    double mac = 0.0;            // mean |pairwise correlation|, log1p scale
    double overdispersion = 0.0; // mean variance-to-mean ratio across taxa
};

// Undirected truth edges over taxa, stored canonically (lexicographically
// ordered pairs) so membership checks are order-independent.
struct TruthEdgeSet {
    std::vector<std::string> taxa;
    std::set<std::pair<std::string, std::string>> edges;
    std::map<std::pair<std::string, std::string>, int> signs; // +1 / -1

    static std::pair<std::string, std::string> canonical(std::string a, std::string b);
};

enum class TableFormat { csv };
enum class OffsetPolicy { row_sum, unit };
enum class CountTransform { none, log1p_round };
enum class CorrScale { log1p };
enum class WinnerModel { pln, glm_poisson };

CountMatrix load_count_table(const std::string& path, TableFormat format = TableFormat::csv);
void save_count_table(const CountMatrix& m, const std::string& path);

// row_sum floors each sum at 1 so all-zero samples keep a usable offset.
Eigen::VectorXd compute_offsets(const CountMatrix& m, OffsetPolicy policy);

// log1p_round maps each entry to round(ln(1 + y)) and recomputes offsets as
// row sums of the transformed table (floored at 1).
CountMatrix apply_transform(const CountMatrix& m, CountTransform t);

DatasetStats dataset_stats(const CountMatrix& m, CorrScale scale = CorrScale::log1p);

struct WinnerAdvice {
    WinnerModel model = WinnerModel::glm_poisson;
    std::string rationale;
};

// Heuristic: the latent-covariance model is advised when N/D < 5.
WinnerAdvice predict_winner(const DatasetStats& stats);

TruthEdgeSet load_truth_edges(const std::string& path);
void save_truth_edges(const TruthEdgeSet& truth, const std::string& path);

nlohmann::json stats_to_json(const DatasetStats& stats);

// Row subsetting used by fold extraction and the bootstrap; `rows` may repeat
// indices, in which case sample ids get a uniqueness suffix.
CountMatrix subset_rows(const CountMatrix& m, const std::vector<int>& rows);

// Column subsetting (keeps offsets); used by the profiling D-sweep.
CountMatrix subset_columns(const CountMatrix& m, const std::vector<int>& cols);

std::string to_string(WinnerModel model);
std::string to_string(CountTransform t);

} // namespace plnbench

#endif
