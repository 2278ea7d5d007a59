#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kte/dataset.hpp"
#include "kte/rng.hpp"

namespace kte {

enum class DgpFamily { dgp_a_confounded, dgp_b_randomized, dgp_effect };
enum class ZMode { one, bernoulli, uniform };

inline Eigen::VectorXd dgp_default_a() {
    Eigen::VectorXd a(9);
    a << 0.1, 0.2, 0.3, 0.4, 0.5, 0.1, 0.2, 0.3, 0.4;
    return a;
}

inline Eigen::VectorXd dgp_default_b() {
    Eigen::VectorXd b(9);
    b << 0.5, 0.4, 0.3, 0.2, 0.1, 0.4, 0.3, 0.2, 0.1;
    return b;
}

struct DgpSpec {
    DgpFamily family = DgpFamily::dgp_a_confounded;
    int n = 500;
    Eigen::VectorXd a = dgp_default_a();
    Eigen::VectorXd b = dgp_default_b();
    double sigma = 0.2;          // outcome noise (confounded and effect families)
    double beta = 3.0;           // effect size
    double alpha = 0.3;          // variance inflation under treatment (randomized family)
    double sigma_prime = 0.2;    // outcome noise (randomized family)
    double bernoulli_rate = 0.5; // treatment rate (randomized family)
    ZMode z_mode = ZMode::one;
    std::uint64_t seed = 0;
};

/// Monte Carlo estimate of E[(1 + exp(Z))^{-2}] for Z ~ N(0, var), with a
/// fixed internal seed so generation stays a deterministic function of the
/// spec seed. Cached per variance.
inline double squared_sigmoid_centering_constant(double var) {
    static std::map<double, double> cache;
    static std::mutex mutex;
    {
        std::lock_guard<std::mutex> lock(mutex);
        auto it = cache.find(var);
        if (it != cache.end()) return it->second;
    }
    std::mt19937_64 rng(0x5eedc0de12345678ULL);
    std::normal_distribution<double> normal(0.0, std::sqrt(var));
    const int draws = 1'000'000;
    long double acc = 0.0L;
    for (int i = 0; i < draws; ++i) {
        const double s = 1.0 / (1.0 + std::exp(normal(rng)));
        acc += s * s;
    }
    const double c = static_cast<double>(acc / draws);
    std::lock_guard<std::mutex> lock(mutex);
    cache.emplace(var, c);
    return c;
}

/// Confounded design: X ~ N(0, I_9), squared-sigmoid propensity centered
/// at 1/2, Y = b'X + beta T + eps. The raw centered propensity can exceed
/// valid probability bounds; values are clamped to [0.005, 0.995] and the
/// clamp fraction is reported on the dataset.
inline Dataset generate_dgp_a(const DgpSpec& spec) {
    if (spec.a.size() != 9 || spec.b.size() != 9)
        throw std::invalid_argument("dgp_a: a and b must have dimension 9");
    const double c = squared_sigmoid_centering_constant(spec.a.squaredNorm());
    auto rng = substream_rng(spec.seed, Stream::dgp);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);

    Dataset d;
    d.X.resize(spec.n, 9);
    d.T.resize(spec.n);
    d.Y.resize(spec.n, 1);
    d.Y0.emplace(spec.n, 1);
    d.Y1.emplace(spec.n, 1);
    d.true_e.emplace(spec.n);
    int clamped = 0;
    for (int i = 0; i < spec.n; ++i) {
        for (int j = 0; j < 9; ++j) d.X(i, j) = normal(rng);
        const double s = 1.0 / (1.0 + std::exp(spec.a.dot(d.X.row(i))));
        const double raw = 0.5 + s * s - c;
        const double p = std::min(std::max(raw, 0.005), 0.995);
        if (p != raw) ++clamped;
        (*d.true_e)[i] = p;
        d.T[i] = (uniform(rng) < p) ? 1 : 0;
        const double eps = spec.sigma * normal(rng);
        const double base = spec.b.dot(d.X.row(i)) + eps;
        (*d.Y0)(i, 0) = base;
        (*d.Y1)(i, 0) = base + spec.beta;
        d.Y(i, 0) = (d.T[i] == 1) ? (*d.Y1)(i, 0) : (*d.Y0)(i, 0);
    }
    d.clamp_rate = static_cast<double>(clamped) / spec.n;
    return d;
}

/// Randomized design with covariate-shift confounding of scale:
/// T ~ Ber(rate), X ~ N(0, (1 + alpha T) I_10), Y = f_T(X) + eps' with
/// f_0(x) = x_1 and f_1(x) = x_1^2. true_e is the posterior P(T=1 | X).
inline Dataset generate_dgp_b(const DgpSpec& spec) {
    const int dim = 10;
    auto rng = substream_rng(spec.seed, Stream::dgp);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const double rho = spec.bernoulli_rate;
    if (!(rho > 0.0 && rho < 1.0)) throw std::invalid_argument("dgp_b: bernoulli_rate must lie in (0,1)");

    Dataset d;
    d.X.resize(spec.n, dim);
    d.T.resize(spec.n);
    d.Y.resize(spec.n, 1);
    d.Y0.emplace(spec.n, 1);
    d.Y1.emplace(spec.n, 1);
    d.true_e.emplace(spec.n);
    for (int i = 0; i < spec.n; ++i) {
        d.T[i] = (uniform(rng) < rho) ? 1 : 0;
        const double scale = std::sqrt(1.0 + spec.alpha * d.T[i]);
        for (int j = 0; j < dim; ++j) d.X(i, j) = scale * normal(rng);
        const double eps = spec.sigma_prime * normal(rng);
        (*d.Y0)(i, 0) = d.X(i, 0) + eps;
        (*d.Y1)(i, 0) = d.X(i, 0) * d.X(i, 0) + eps;
        d.Y(i, 0) = (d.T[i] == 1) ? (*d.Y1)(i, 0) : (*d.Y0)(i, 0);
        // density ratio phi0 / phi1 for the unit-variance vs inflated gaussian
        const double q = d.X.row(i).squaredNorm();
        const double log_ratio = 0.5 * dim * std::log1p(spec.alpha) - q * spec.alpha / (2.0 * (1.0 + spec.alpha));
        (*d.true_e)[i] = 1.0 / (1.0 + (1.0 - rho) / rho * std::exp(log_ratio));
    }
    return d;
}

/// Distributional-effect design: X ~ N(0, I_9), plain sigmoid propensity
/// 1 / (1 + exp(a'X)), Y = b'X + beta (2Z - 1) T + eps. Z is 1, Ber(1/2)
/// or Unif[0,1]; both counterfactuals share one Z draw per unit, so
/// bernoulli and uniform modes move higher moments without the mean.
inline Dataset generate_dgp_effect(const DgpSpec& spec) {
    if (spec.a.size() != 9 || spec.b.size() != 9)
        throw std::invalid_argument("dgp_effect: a and b must have dimension 9");
    auto rng = substream_rng(spec.seed, Stream::dgp);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);

    Dataset d;
    d.X.resize(spec.n, 9);
    d.T.resize(spec.n);
    d.Y.resize(spec.n, 1);
    d.Y0.emplace(spec.n, 1);
    d.Y1.emplace(spec.n, 1);
    d.true_e.emplace(spec.n);
    for (int i = 0; i < spec.n; ++i) {
        for (int j = 0; j < 9; ++j) d.X(i, j) = normal(rng);
        const double p = 1.0 / (1.0 + std::exp(spec.a.dot(d.X.row(i))));
        (*d.true_e)[i] = p;
        d.T[i] = (uniform(rng) < p) ? 1 : 0;
        double z = 1.0;
        if (spec.z_mode == ZMode::bernoulli) z = (uniform(rng) < 0.5) ? 1.0 : 0.0;
        else if (spec.z_mode == ZMode::uniform) z = uniform(rng);
        const double eps = spec.sigma * normal(rng);
        const double base = spec.b.dot(d.X.row(i)) + eps;
        (*d.Y0)(i, 0) = base;
        (*d.Y1)(i, 0) = base + spec.beta * (2.0 * z - 1.0);
        d.Y(i, 0) = (d.T[i] == 1) ? (*d.Y1)(i, 0) : (*d.Y0)(i, 0);
    }
    return d;
}

inline Dataset generate(const DgpSpec& spec) {
    if (spec.n < 1) throw std::invalid_argument("generate: n must be >= 1");
    switch (spec.family) {
        case DgpFamily::dgp_a_confounded: return generate_dgp_a(spec);
        case DgpFamily::dgp_b_randomized: return generate_dgp_b(spec);
        case DgpFamily::dgp_effect: return generate_dgp_effect(spec);
    }
    throw std::logic_error("generate: unknown family");
}

/// Large i.i.d. draw of Y(t), the empirical stand-in for the true potential
/// outcome embedding with O(n_oracle^{-1/2}) error. With condition_arm in
/// {0, 1} the draw is restricted to P(Y(t) | T = condition_arm).
inline Eigen::MatrixXd oracle_embedding_sample(const DgpSpec& spec, int t, int n_oracle, int condition_arm = -1) {
    if (n_oracle < 1) throw std::invalid_argument("oracle_embedding_sample: n_oracle must be >= 1");
    if (t != 0 && t != 1) throw std::invalid_argument("oracle_embedding_sample: t must be 0 or 1");
    DgpSpec draw = spec;
    std::vector<Eigen::VectorXd> rows;
    rows.reserve(static_cast<std::size_t>(n_oracle));
    for (int chunk = 0; static_cast<int>(rows.size()) < n_oracle; ++chunk) {
        if (chunk > 200) throw std::runtime_error("oracle_embedding_sample: conditioning arm too rare");
        draw.n = n_oracle;
        draw.seed = substream_seed(spec.seed, Stream::oracle,
                                   static_cast<std::uint64_t>(t * 1024 + (condition_arm + 1) * 256 + chunk));
        const Dataset d = generate(draw);
        const Eigen::MatrixXd& Yt = (t == 1) ? *d.Y1 : *d.Y0;
        for (int i = 0; i < draw.n && static_cast<int>(rows.size()) < n_oracle; ++i) {
            if (condition_arm >= 0 && d.T[i] != condition_arm) continue;
            rows.push_back(Yt.row(i).transpose());
        }
    }
    Eigen::MatrixXd out(n_oracle, rows.front().size());
    for (int i = 0; i < n_oracle; ++i) out.row(i) = rows[static_cast<std::size_t>(i)].transpose();
    return out;
}

// ---------------------------------------------------------------------------
// Counterfactual CSV ingestion
// ---------------------------------------------------------------------------

/// Column mapping for counterfactual-complete CSV files. Columns not named
/// anywhere (and not excluded) default to covariates. Trimming removes
/// rows whose stated propensity falls outside [trim_low, trim_high].
struct CsvSchema {
    std::string treatment = "t";
    std::vector<std::string> outcomes = {"y1"};
    std::vector<std::string> y0_columns;
    std::vector<std::string> y1_columns;
    std::string propensity;
    std::vector<std::string> covariates;
    std::vector<std::string> exclude;
    bool trim = false;
    double trim_low = 0.03;
    double trim_high = 0.97;
};

struct CsvLoadReport {
    std::vector<int> rejected_rows;  // 1-based data rows dropped for non-finite values
    std::vector<int> trimmed_rows;   // 1-based data rows dropped by propensity trimming
};

namespace detail {
inline std::string trim_ws(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, ',')) out.push_back(trim_ws(cur));
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

inline double parse_number(const std::string& cell, int row, const std::string& col) {
    const std::string t = trim_ws(cell);
    if (t.empty()) throw std::invalid_argument("csv: empty cell at row " + std::to_string(row) + " column " + col);
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (end != t.c_str() + t.size())
        throw std::invalid_argument("csv: non-numeric value '" + t + "' at row " + std::to_string(row) +
                                    " column " + col);
    return v;
}
}  // namespace detail

inline Dataset load_counterfactual_csv(const std::string& path, const CsvSchema& schema,
                                       CsvLoadReport* report = nullptr) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::invalid_argument("csv: missing header row in " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::vector<std::string> header = detail::split_csv_line(line);
    std::map<std::string, int> col_index;
    for (std::size_t j = 0; j < header.size(); ++j) {
        if (col_index.count(header[j])) throw std::invalid_argument("csv: duplicate column " + header[j]);
        col_index[header[j]] = static_cast<int>(j);
    }
    const auto require = [&](const std::string& name) {
        auto it = col_index.find(name);
        if (it == col_index.end()) throw std::invalid_argument("csv: missing column " + name);
        return it->second;
    };

    const int t_col = require(schema.treatment);
    std::vector<int> y_cols, y0_cols, y1_cols, x_cols;
    for (const auto& c : schema.outcomes) y_cols.push_back(require(c));
    for (const auto& c : schema.y0_columns) y0_cols.push_back(require(c));
    for (const auto& c : schema.y1_columns) y1_cols.push_back(require(c));
    if (y0_cols.size() != y1_cols.size() || (!y0_cols.empty() && y0_cols.size() != y_cols.size()))
        throw std::invalid_argument("csv: counterfactual column counts must match outcome columns");
    int e_col = -1;
    if (!schema.propensity.empty()) e_col = require(schema.propensity);
    if (schema.trim && e_col < 0)
        throw std::invalid_argument("csv: trimming requires a propensity column");

    if (!schema.covariates.empty()) {
        for (const auto& c : schema.covariates) x_cols.push_back(require(c));
    } else {
        std::vector<bool> claimed(header.size(), false);
        claimed[static_cast<std::size_t>(t_col)] = true;
        for (int j : y_cols) claimed[static_cast<std::size_t>(j)] = true;
        for (int j : y0_cols) claimed[static_cast<std::size_t>(j)] = true;
        for (int j : y1_cols) claimed[static_cast<std::size_t>(j)] = true;
        if (e_col >= 0) claimed[static_cast<std::size_t>(e_col)] = true;
        for (const auto& c : schema.exclude) claimed[static_cast<std::size_t>(require(c))] = true;
        for (std::size_t j = 0; j < header.size(); ++j)
            if (!claimed[j]) x_cols.push_back(static_cast<int>(j));
    }

    std::vector<Eigen::VectorXd> xs, ys, y0s, y1s;
    std::vector<int> ts;
    std::vector<double> es;
    CsvLoadReport local_report;
    int row = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (detail::trim_ws(line).empty()) continue;
        ++row;
        const std::vector<std::string> cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw std::invalid_argument("csv: row " + std::to_string(row) + " has " +
                                        std::to_string(cells.size()) + " cells, expected " +
                                        std::to_string(header.size()));
        const auto cell = [&](int j) -> const std::string& { return cells[static_cast<std::size_t>(j)]; };

        const double t_val = detail::parse_number(cell(t_col), row, schema.treatment);
        if (t_val != 0.0 && t_val != 1.0)
            throw std::invalid_argument("csv: treatment value " + cell(t_col) + " outside {0,1} at row " +
                                        std::to_string(row));

        bool finite = true;
        Eigen::VectorXd x(static_cast<Eigen::Index>(x_cols.size()));
        for (std::size_t j = 0; j < x_cols.size(); ++j) {
            x[static_cast<Eigen::Index>(j)] =
                detail::parse_number(cell(x_cols[j]), row, header[static_cast<std::size_t>(x_cols[j])]);
            finite = finite && std::isfinite(x[static_cast<Eigen::Index>(j)]);
        }
        Eigen::VectorXd y(static_cast<Eigen::Index>(y_cols.size()));
        for (std::size_t j = 0; j < y_cols.size(); ++j) {
            y[static_cast<Eigen::Index>(j)] =
                detail::parse_number(cell(y_cols[j]), row, header[static_cast<std::size_t>(y_cols[j])]);
            finite = finite && std::isfinite(y[static_cast<Eigen::Index>(j)]);
        }
        Eigen::VectorXd y0(static_cast<Eigen::Index>(y0_cols.size())), y1(static_cast<Eigen::Index>(y1_cols.size()));
        for (std::size_t j = 0; j < y0_cols.size(); ++j) {
            y0[static_cast<Eigen::Index>(j)] =
                detail::parse_number(cell(y0_cols[j]), row, header[static_cast<std::size_t>(y0_cols[j])]);
            y1[static_cast<Eigen::Index>(j)] =
                detail::parse_number(cell(y1_cols[j]), row, header[static_cast<std::size_t>(y1_cols[j])]);
            finite = finite && std::isfinite(y0[static_cast<Eigen::Index>(j)]) &&
                     std::isfinite(y1[static_cast<Eigen::Index>(j)]);
        }
        double e_val = 0.5;
        if (e_col >= 0) {
            e_val = detail::parse_number(cell(e_col), row, schema.propensity);
            finite = finite && std::isfinite(e_val);
        }
        if (!finite) {
            local_report.rejected_rows.push_back(row);
            continue;
        }
        if (schema.trim && (e_val < schema.trim_low || e_val > schema.trim_high)) {
            local_report.trimmed_rows.push_back(row);
            continue;
        }
        xs.push_back(std::move(x));
        ys.push_back(std::move(y));
        if (!y0_cols.empty()) {
            y0s.push_back(std::move(y0));
            y1s.push_back(std::move(y1));
        }
        ts.push_back(static_cast<int>(t_val));
        if (e_col >= 0) es.push_back(e_val);
    }

    Dataset d;
    const auto n = static_cast<Eigen::Index>(xs.size());
    d.X.resize(n, static_cast<Eigen::Index>(x_cols.size()));
    d.T.resize(n);
    d.Y.resize(n, static_cast<Eigen::Index>(y_cols.size()));
    if (!y0s.empty()) {
        d.Y0.emplace(n, static_cast<Eigen::Index>(y0_cols.size()));
        d.Y1.emplace(n, static_cast<Eigen::Index>(y1_cols.size()));
    }
    if (!es.empty()) d.true_e.emplace(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        d.X.row(i) = xs[static_cast<std::size_t>(i)].transpose();
        d.Y.row(i) = ys[static_cast<std::size_t>(i)].transpose();
        d.T[i] = ts[static_cast<std::size_t>(i)];
        if (!y0s.empty()) {
            d.Y0->row(i) = y0s[static_cast<std::size_t>(i)].transpose();
            d.Y1->row(i) = y1s[static_cast<std::size_t>(i)].transpose();
        }
        if (!es.empty()) (*d.true_e)[i] = es[static_cast<std::size_t>(i)];
    }
    if (report) *report = std::move(local_report);
    return d;
}

/// Canonical column layout: x1..xd, t, y1..yp, then y0_*/y1_* and e_true
/// when present. Written at full precision for exact round trips.
inline void save_dataset_csv(const Dataset& d, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("csv: cannot write " + path);
    out << std::setprecision(17);
    for (Eigen::Index j = 0; j < d.dim(); ++j) out << "x" << (j + 1) << ",";
    out << "t";
    for (Eigen::Index j = 0; j < d.outcome_dim(); ++j) out << ",y" << (j + 1);
    if (d.Y0 && d.Y1) {
        for (Eigen::Index j = 0; j < d.outcome_dim(); ++j) out << ",y0_" << (j + 1);
        for (Eigen::Index j = 0; j < d.outcome_dim(); ++j) out << ",y1_" << (j + 1);
    }
    if (d.true_e) out << ",e_true";
    out << "\n";
    for (Eigen::Index i = 0; i < d.n(); ++i) {
        for (Eigen::Index j = 0; j < d.dim(); ++j) out << d.X(i, j) << ",";
        out << d.T[i];
        for (Eigen::Index j = 0; j < d.outcome_dim(); ++j) out << "," << d.Y(i, j);
        if (d.Y0 && d.Y1) {
            for (Eigen::Index j = 0; j < d.outcome_dim(); ++j) out << "," << (*d.Y0)(i, j);
            for (Eigen::Index j = 0; j < d.outcome_dim(); ++j) out << "," << (*d.Y1)(i, j);
        }
        if (d.true_e) out << "," << (*d.true_e)[i];
        out << "\n";
    }
}

}  // namespace kte
