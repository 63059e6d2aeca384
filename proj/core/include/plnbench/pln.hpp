#ifndef PLNBENCH_PLN_HPP
#define PLNBENCH_PLN_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "plnbench/data_core.hpp"

namespace plnbench {

struct PlnFitOptions {
    int max_iters = 500;
    double rel_tol = 1e-6;
    double jitter = 1e-8;   // diagonal ridge added to sigma when Cholesky fails
    std::uint64_t seed = 0; // recorded for provenance; the fit itself is deterministic
    int grad_steps_per_iter = 5;
};

// Fitted Poisson log-normal state: per-taxon intercepts, latent covariance,
// and a diagonal Gaussian variational posterior per sample.
struct PlnModel {
    Eigen::VectorXd eta;       // D
    Eigen::MatrixXd sigma;     // D x D, symmetric positive-definite
    Eigen::MatrixXd var_means; // N x D
    Eigen::MatrixXd var_vars;  // N x D, strictly positive
    std::vector<double> elbo_trace;

    Eigen::Index n_taxa() const { return eta.size(); }
    Eigen::Index n_samples() const { return var_means.rows(); }
};

// Counts above this bound overflow the Poisson terms; callers should apply
// the log1p transform first.
inline constexpr double kMaxCount = 1e6;

PlnModel fit_pln(const CountMatrix& m, const PlnFitOptions& opts = {});

// Evidence lower bound of `model` on `m` (diagonal Gaussian posterior,
// log(y!) via log-gamma).
double elbo(const PlnModel& model, const CountMatrix& m);

struct PlnGradients {
    Eigen::VectorXd eta;          // D
    Eigen::MatrixXd var_means;    // N x D
    Eigen::MatrixXd log_var_vars; // N x D, gradient wrt log(v)
};

// Analytic ELBO gradients with sigma held fixed.
PlnGradients elbo_gradients(const PlnModel& model, const CountMatrix& m);

// Scales off-diagonal entries by (1 - alpha); alpha=0 is a no-op, alpha=1
// drops all cross-covariance.
Eigen::MatrixXd shrink_covariance(const Eigen::MatrixXd& sigma, double alpha);

struct ConditionalMoments {
    double mean = 0.0;     // latent conditional mean of the hidden taxon
    double variance = 0.0; // latent conditional variance
};

// Per-target helper for held-out prediction: caches the restricted-covariance
// factorization so repeated samples and alpha values stay cheap.
class ConditionalPredictor {
public:
    ConditionalPredictor(const PlnModel& model, int target, const PlnFitOptions& opts = {});

    // Variational posterior mean over the observed coordinates of a new
    // sample, maximizing the restricted ELBO with (eta, sigma) frozen.
    Eigen::VectorXd infer_latent(const Eigen::VectorXd& counts_without_target,
                                 double offset) const;

    // Gaussian conditioning of the hidden coordinate under the alpha-shrunk
    // covariance.
    ConditionalMoments condition(const Eigen::VectorXd& latent_observed, double alpha) const;

    // offset * exp(eta_j + conditional mean + conditional variance / 2)
    double predict(const Eigen::VectorXd& counts_without_target, double offset,
                   double alpha) const;
    double predict_from_latent(const Eigen::VectorXd& latent_observed, double offset,
                               double alpha) const;

private:
    const PlnModel* model_;
    int target_;
    PlnFitOptions opts_;
    Eigen::VectorXd eta_obs_;
    Eigen::MatrixXd sigma_obs_;  // (D-1) x (D-1) marginal covariance
    Eigen::MatrixXd omega_obs_;  // its inverse
    double logdet_sigma_obs_ = 0.0;
};

double conditional_predict(const PlnModel& model, const Eigen::VectorXd& counts_without_target,
                           double offset, int target, double alpha,
                           const PlnFitOptions& opts = {});

// Draws Z_i ~ N(0, sigma) via Cholesky and Y_ij ~ Poisson(s_i exp(eta_j + Z_ij)).
// Deterministic given seed.
CountMatrix sample_pln(const Eigen::VectorXd& eta, const Eigen::MatrixXd& sigma,
                       const Eigen::VectorXd& offsets, std::uint64_t seed);

nlohmann::json pln_model_to_json(const PlnModel& model);
PlnModel pln_model_from_json(const nlohmann::json& j);

} // namespace plnbench

#endif
