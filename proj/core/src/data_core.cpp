#include "plnbench/data_core.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace plnbench {

namespace {

std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, sep)) out.push_back(field);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

// Nonnegative integer cell; rejects signs, decimals, and stray characters.
bool parse_count_cell(const std::string& cell, double& out) {
    if (cell.empty()) return false;
    unsigned long long value = 0;
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end) return false;
    out = static_cast<double>(value);
    return true;
}

std::string format_value(double v) {
    char buf[40];
    if (v == std::floor(v) && std::abs(v) < 1e15) {
        std::snprintf(buf, sizeof buf, "%.0f", v);
    } else {
        std::snprintf(buf, sizeof buf, "%.17g", v);
    }
    return buf;
}

} // namespace

void CountMatrix::validate() const {
    const Eigen::Index n = counts.rows();
    const Eigen::Index d = counts.cols();
    if (n < 2) throw validation_error("count matrix has fewer than 2 samples");
    if (d < 2) throw validation_error("count matrix has fewer than 2 taxa");
    if (static_cast<Eigen::Index>(sample_ids.size()) != n)
        throw validation_error("sample_ids length does not match row count");
    if (static_cast<Eigen::Index>(taxon_names.size()) != d)
        throw validation_error("taxon_names length does not match column count");
    if (offsets.size() != n)
        throw validation_error("offsets length does not match row count");
    if ((counts.array() < 0.0).any())
        throw validation_error("count matrix has a negative entry");
    if (!(offsets.array() > 0.0).all())
        throw validation_error("offsets must be strictly positive");
    std::unordered_set<std::string> seen;
    for (const auto& id : sample_ids) {
        if (!seen.insert(id).second)
            throw validation_error("duplicate sample id '" + id + "'");
    }
    seen.clear();
    for (const auto& name : taxon_names) {
        if (!seen.insert(name).second)
            throw validation_error("duplicate taxon '" + name + "'");
    }
}

CountMatrix load_count_table(const std::string& path, TableFormat) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open count table '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw io_error("empty count table '" + path + "'");
    const auto header = split(strip_cr(line), ',');
    if (header.size() < 2 || header[0] != "sample_id")
        throw validation_error("malformed header: expected 'sample_id,<taxon names>'");

    CountMatrix m;
    m.taxon_names.assign(header.begin() + 1, header.end());
    const std::size_t d = m.taxon_names.size();
    if (d < 2) throw validation_error("fewer than 2 taxa in header");

    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = strip_cr(line);
        if (line.empty()) continue;
        const auto cells = split(line, ',');
        if (cells.size() != d + 1) {
            throw validation_error("row " + std::to_string(line_no) + ": expected " +
                                   std::to_string(d + 1) + " fields, found " +
                                   std::to_string(cells.size()));
        }
        m.sample_ids.push_back(cells[0]);
        std::vector<double> row(d);
        for (std::size_t j = 0; j < d; ++j) {
            if (!parse_count_cell(cells[j + 1], row[j])) {
                throw validation_error("row " + std::to_string(line_no) + ", column '" +
                                       m.taxon_names[j] +
                                       "': negative or non-numeric cell '" + cells[j + 1] +
                                       "'");
            }
        }
        rows.push_back(std::move(row));
    }
    if (rows.size() < 2) throw validation_error("fewer than 2 samples in count table");

    const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
    m.counts.resize(n, static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(d); ++j)
            m.counts(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];

    m.offsets = compute_offsets(m, OffsetPolicy::row_sum);
    m.validate();
    return m;
}

void save_count_table(const CountMatrix& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write count table '" + path + "'");
    out << "sample_id";
    for (const auto& name : m.taxon_names) out << ',' << name;
    out << '\n';
    for (Eigen::Index i = 0; i < m.n_samples(); ++i) {
        out << m.sample_ids[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < m.n_taxa(); ++j) out << ',' << format_value(m.counts(i, j));
        out << '\n';
    }
    if (!out) throw io_error("failed while writing '" + path + "'");
}

Eigen::VectorXd compute_offsets(const CountMatrix& m, OffsetPolicy policy) {
    if (policy == OffsetPolicy::unit) return Eigen::VectorXd::Ones(m.n_samples());
    return m.counts.rowwise().sum().cwiseMax(1.0);
}

CountMatrix apply_transform(const CountMatrix& m, CountTransform t) {
    if (t == CountTransform::none) return m;
    CountMatrix out = m;
    out.counts = m.counts.array().log1p().round();
    out.offsets = compute_offsets(out, OffsetPolicy::row_sum);
    return out;
}

DatasetStats dataset_stats(const CountMatrix& m, CorrScale) {
    DatasetStats s;
    s.n_samples = m.n_samples();
    s.n_taxa = m.n_taxa();
    s.nd_ratio = static_cast<double>(s.n_samples) / static_cast<double>(s.n_taxa);
    const double total = static_cast<double>(s.n_samples) * static_cast<double>(s.n_taxa);
    s.sparsity = static_cast<double>((m.counts.array() == 0.0).count()) / total;

    // MAC on ln(1+y) columns; pairs with a constant column contribute 0.
    const Eigen::Index n = m.n_samples();
    const Eigen::Index d = m.n_taxa();
    Eigen::MatrixXd z = m.counts.array().log1p();
    z.rowwise() -= z.colwise().mean();
    const Eigen::VectorXd norms = z.colwise().norm();
    const Eigen::MatrixXd cross = z.transpose() * z;
    double abs_corr_sum = 0.0;
    for (Eigen::Index a = 0; a < d; ++a) {
        for (Eigen::Index b = a + 1; b < d; ++b) {
            if (norms(a) > 0.0 && norms(b) > 0.0)
                abs_corr_sum += std::abs(cross(a, b) / (norms(a) * norms(b)));
        }
    }
    const double n_pairs = static_cast<double>(d) * static_cast<double>(d - 1) / 2.0;
    s.mac = n_pairs > 0.0 ? abs_corr_sum / n_pairs : 0.0;

    // Dispersion index averaged over taxa that are not all-zero.
    double ratio_sum = 0.0;
    Eigen::Index n_kept = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
        const double mean = m.counts.col(j).mean();
        if (mean <= 0.0) continue;
        const double var =
            (m.counts.col(j).array() - mean).square().sum() / static_cast<double>(n - 1);
        ratio_sum += var / mean;
        ++n_kept;
    }
    s.overdispersion = n_kept > 0 ? ratio_sum / static_cast<double>(n_kept) : 0.0;
    return s;
}

WinnerAdvice predict_winner(const DatasetStats& stats) {
    WinnerAdvice advice;
    advice.model = stats.nd_ratio < 5.0 ? WinnerModel::pln : WinnerModel::glm_poisson;
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "N/D=%.2f, MAC=%.3f, overdispersion=%.2f; rule: N/D < 5 favors the "
                  "latent-covariance model -> advice: %s",
                  stats.nd_ratio, stats.mac, stats.overdispersion,
                  to_string(advice.model).c_str());
    advice.rationale = buf;
    return advice;
}

std::pair<std::string, std::string> TruthEdgeSet::canonical(std::string a, std::string b) {
    if (b < a) std::swap(a, b);
    return {std::move(a), std::move(b)};
}

TruthEdgeSet load_truth_edges(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open truth edges '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw io_error("empty truth file '" + path + "'");
    if (strip_cr(line) != "taxon_a\ttaxon_b\tsign")
        throw validation_error("malformed truth header: expected 'taxon_a\\ttaxon_b\\tsign'");

    TruthEdgeSet truth;
    std::unordered_set<std::string> seen_taxa;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = strip_cr(line);
        if (line.empty()) continue;
        const auto fields = split(line, '\t');
        if (fields.size() != 3)
            throw validation_error("truth row " + std::to_string(line_no) +
                                   ": expected 3 tab-separated fields");
        const std::string& a = fields[0];
        const std::string& b = fields[1];
        const std::string& sign_token = fields[2];
        if (a.empty() || b.empty())
            throw validation_error("truth row " + std::to_string(line_no) + ": empty taxon name");
        if (a == b)
            throw validation_error("truth row " + std::to_string(line_no) + ": self-loop on '" +
                                   a + "'");
        int sign = 0;
        if (sign_token == "+1") {
            sign = 1;
        } else if (sign_token == "-1") {
            sign = -1;
        } else if (!sign_token.empty()) {
            throw validation_error("truth row " + std::to_string(line_no) +
                                   ": unknown sign token '" + sign_token + "'");
        }
        auto edge = TruthEdgeSet::canonical(a, b);
        if (!truth.edges.insert(edge).second)
            throw validation_error("truth row " + std::to_string(line_no) + ": duplicate edge " +
                                   edge.first + " -- " + edge.second);
        if (sign != 0) truth.signs[edge] = sign;
        for (const auto& name : {a, b}) {
            if (seen_taxa.insert(name).second) truth.taxa.push_back(name);
        }
    }
    return truth;
}

void save_truth_edges(const TruthEdgeSet& truth, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write truth edges '" + path + "'");
    out << "taxon_a\ttaxon_b\tsign\n";
    for (const auto& edge : truth.edges) {
        out << edge.first << '\t' << edge.second << '\t';
        const auto it = truth.signs.find(edge);
        if (it != truth.signs.end()) out << (it->second > 0 ? "+1" : "-1");
        out << '\n';
    }
    if (!out) throw io_error("failed while writing '" + path + "'");
}

nlohmann::json stats_to_json(const DatasetStats& stats) {
    return nlohmann::json{{"n_samples", stats.n_samples},   {"n_taxa", stats.n_taxa},
                          {"nd_ratio", stats.nd_ratio},     {"sparsity", stats.sparsity},
                          {"mac", stats.mac},               {"overdispersion", stats.overdispersion}};
}

CountMatrix subset_rows(const CountMatrix& m, const std::vector<int>& rows) {
    CountMatrix out;
    out.taxon_names = m.taxon_names;
    const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
    out.counts.resize(n, m.n_taxa());
    out.offsets.resize(n);
    std::map<std::string, int> used;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int r = rows[static_cast<std::size_t>(i)];
        out.counts.row(i) = m.counts.row(r);
        out.offsets(i) = m.offsets(r);
        std::string id = m.sample_ids[static_cast<std::size_t>(r)];
        const int count = used[id]++;
        if (count > 0) id += "." + std::to_string(count);
        out.sample_ids.push_back(std::move(id));
    }
    return out;
}

CountMatrix subset_columns(const CountMatrix& m, const std::vector<int>& cols) {
    CountMatrix out;
    out.sample_ids = m.sample_ids;
    out.offsets = m.offsets;
    const Eigen::Index d = static_cast<Eigen::Index>(cols.size());
    out.counts.resize(m.n_samples(), d);
    for (Eigen::Index j = 0; j < d; ++j) {
        const int c = cols[static_cast<std::size_t>(j)];
        out.counts.col(j) = m.counts.col(c);
        out.taxon_names.push_back(m.taxon_names[static_cast<std::size_t>(c)]);
    }
    return out;
}

std::string to_string(WinnerModel model) {
    return model == WinnerModel::pln ? "pln" : "glm_poisson";
}

std::string to_string(CountTransform t) {
    return t == CountTransform::none ? "none" : "log1p_round";
}

} // namespace plnbench
