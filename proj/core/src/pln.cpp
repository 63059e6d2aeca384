#include "plnbench/pln.hpp"

#include <algorithm>
#include <cmath>

#include "plnbench/rng.hpp"

namespace plnbench {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct SigmaContext {
    Eigen::MatrixXd omega; // sigma^{-1}
    double logdet_sigma = 0.0;
};

// Factors sigma, escalating the diagonal ridge a few times before giving up.
SigmaContext make_sigma_context(Eigen::MatrixXd& sigma, double jitter) {
    const Eigen::Index d = sigma.rows();
    double ridge = jitter;
    for (int attempt = 0; attempt < 4; ++attempt) {
        Eigen::LLT<Eigen::MatrixXd> llt(sigma);
        if (llt.info() == Eigen::Success) {
            SigmaContext ctx;
            ctx.omega = llt.solve(Eigen::MatrixXd::Identity(d, d));
            ctx.logdet_sigma =
                2.0 * llt.matrixLLT().diagonal().array().log().sum();
            return ctx;
        }
        if (ridge <= 0.0) ridge = 1e-10;
        sigma.diagonal().array() += ridge;
        ridge *= 100.0;
    }
    throw convergence_error("covariance update is not positive-definite after jitter");
}

struct FitData {
    Eigen::MatrixXd y;       // N x D
    Eigen::VectorXd log_s;   // N
    Eigen::MatrixXd lgamma1; // lgamma(y + 1)
    Eigen::Index n = 0, d = 0;
};

FitData make_fit_data(const CountMatrix& m) {
    if ((m.counts.array() > kMaxCount).any())
        throw validation_error(
            "counts exceed 1e6; apply the log1p transform or rescale before fitting");
    FitData data;
    data.y = m.counts;
    data.log_s = m.offsets.array().log();
    data.lgamma1 = m.counts.unaryExpr([](double v) { return std::lgamma(v + 1.0); });
    data.n = m.n_samples();
    data.d = m.n_taxa();
    return data;
}

struct FitState {
    Eigen::VectorXd eta;
    Eigen::MatrixXd m;
    Eigen::MatrixXd v; // strictly positive
};

// Linear predictor eta_j + m_ij + log s_i.
Eigen::MatrixXd linear_predictor(const FitData& data, const FitState& s) {
    Eigen::MatrixXd t = s.m;
    t.colwise() += data.log_s;
    t.rowwise() += s.eta.transpose();
    return t;
}

double evaluate_elbo(const FitData& data, const FitState& s, const SigmaContext& ctx) {
    const Eigen::MatrixXd t = linear_predictor(data, s);
    const Eigen::ArrayXXd a = (t + 0.5 * s.v).array().exp();
    if (!a.isFinite().all()) return kNegInf;
    const double poisson_part =
        (data.y.array() * t.array() - a - data.lgamma1.array()).sum();
    const double quad = (s.m * ctx.omega).cwiseProduct(s.m).sum();
    const double trace_v = (s.v * ctx.omega.diagonal()).sum();
    const double entropy = s.v.array().log().sum();
    const double gauss_part =
        0.5 * (-static_cast<double>(data.n) * ctx.logdet_sigma - quad - trace_v + entropy +
               static_cast<double>(data.n * data.d));
    return poisson_part + gauss_part;
}

struct FitGradients {
    Eigen::VectorXd eta;
    Eigen::MatrixXd m;
    Eigen::MatrixXd log_v;
};

FitGradients evaluate_gradients(const FitData& data, const FitState& s,
                                const SigmaContext& ctx) {
    const Eigen::MatrixXd t = linear_predictor(data, s);
    const Eigen::MatrixXd a = (t + 0.5 * s.v).array().exp();
    FitGradients g;
    const Eigen::MatrixXd resid = data.y - a;
    g.eta = resid.colwise().sum();
    g.m = resid - s.m * ctx.omega;
    Eigen::ArrayXXd rate = a.array();
    rate.rowwise() += ctx.omega.diagonal().transpose().array();
    g.log_v = (0.5 * (1.0 - s.v.array() * rate)).matrix();
    return g;
}

// One ascent step on a single coordinate block with backtracking halving.
// `apply` writes the candidate state for a given step size. Returns the new
// ELBO on success and updates the adaptive step.
template <typename ApplyFn>
bool block_step(const FitData& data, FitState& state, const SigmaContext& ctx,
                double& current_elbo, double& step, const ApplyFn& apply) {
    constexpr int kMaxHalvings = 40;
    double trial = step;
    for (int h = 0; h < kMaxHalvings; ++h) {
        FitState candidate = state;
        apply(candidate, trial);
        const double e = evaluate_elbo(data, candidate, ctx);
        if (std::isfinite(e) && e > current_elbo) {
            state = std::move(candidate);
            current_elbo = e;
            step = std::min(trial * 1.3, 10.0);
            return true;
        }
        trial *= 0.5;
    }
    step = std::max(step * 0.5, 1e-300);
    return false;
}

Eigen::MatrixXd covariance_m_step(const FitState& s, Eigen::Index n) {
    Eigen::MatrixXd sigma = (s.m.transpose() * s.m) / static_cast<double>(n);
    sigma.diagonal() += s.v.colwise().mean();
    return sigma;
}

} // namespace

PlnModel fit_pln(const CountMatrix& m, const PlnFitOptions& opts) {
    if (opts.max_iters < 1) throw validation_error("max_iters must be >= 1");
    if (opts.rel_tol <= 0.0) throw validation_error("rel_tol must be positive");
    if (opts.jitter < 0.0) throw validation_error("jitter must be nonnegative");
    m.validate();

    const FitData data = make_fit_data(m);
    FitState state;
    state.eta.resize(data.d);
    state.m.resize(data.n, data.d);
    state.v = Eigen::MatrixXd::Constant(data.n, data.d, 0.5);

    // Start from the column-wise log rate with a pseudo-count; latent means
    // carry the centered residual.
    for (Eigen::Index j = 0; j < data.d; ++j) {
        Eigen::ArrayXd log_rate =
            ((data.y.col(j).array() + 0.5) / m.offsets.array()).log();
        state.eta(j) = log_rate.mean();
        state.m.col(j) = log_rate - state.eta(j);
    }

    Eigen::MatrixXd sigma = covariance_m_step(state, data.n);
    SigmaContext ctx = make_sigma_context(sigma, opts.jitter);

    double current = evaluate_elbo(data, state, ctx);
    if (!std::isfinite(current))
        throw convergence_error(
            "non-finite ELBO at initialization; use smaller counts or the log1p transform");

    PlnModel model;
    model.elbo_trace.push_back(current);

    double step_m = 0.1;
    double step_v = 0.1;
    double step_eta = 0.1 / static_cast<double>(data.n);

    for (int iter = 0; iter < opts.max_iters; ++iter) {
        for (int g = 0; g < opts.grad_steps_per_iter; ++g) {
            const FitGradients grad = evaluate_gradients(data, state, ctx);
            block_step(data, state, ctx, current, step_m,
                       [&](FitState& c, double s) { c.m += s * grad.m; });
            block_step(data, state, ctx, current, step_v, [&](FitState& c, double s) {
                c.v = c.v.array() * (s * grad.log_v.array()).exp();
            });
            block_step(data, state, ctx, current, step_eta,
                       [&](FitState& c, double s) { c.eta += s * grad.eta; });
        }

        sigma = covariance_m_step(state, data.n);
        ctx = make_sigma_context(sigma, opts.jitter);
        const double updated = evaluate_elbo(data, state, ctx);
        if (!std::isfinite(updated))
            throw convergence_error(
                "non-finite ELBO; use smaller counts or the log1p transform");
        const double previous = model.elbo_trace.back();
        model.elbo_trace.push_back(updated);
        current = updated;
        if (std::abs(updated - previous) < opts.rel_tol * (1.0 + std::abs(updated))) break;
    }

    model.eta = std::move(state.eta);
    model.sigma = std::move(sigma);
    model.var_means = std::move(state.m);
    model.var_vars = std::move(state.v);
    return model;
}

namespace {

void check_dimensions(const PlnModel& model, const CountMatrix& m) {
    if (model.eta.size() != m.n_taxa() || model.var_means.rows() != m.n_samples() ||
        model.var_means.cols() != m.n_taxa() ||
        model.var_vars.rows() != m.n_samples() || model.var_vars.cols() != m.n_taxa() ||
        model.sigma.rows() != m.n_taxa() || model.sigma.cols() != m.n_taxa()) {
        throw validation_error("model dimensions do not match the count matrix");
    }
}

} // namespace

double elbo(const PlnModel& model, const CountMatrix& m) {
    check_dimensions(model, m);
    const FitData data = make_fit_data(m);
    FitState state{model.eta, model.var_means, model.var_vars};
    Eigen::MatrixXd sigma = model.sigma;
    const SigmaContext ctx = make_sigma_context(sigma, 0.0);
    return evaluate_elbo(data, state, ctx);
}

PlnGradients elbo_gradients(const PlnModel& model, const CountMatrix& m) {
    check_dimensions(model, m);
    const FitData data = make_fit_data(m);
    FitState state{model.eta, model.var_means, model.var_vars};
    Eigen::MatrixXd sigma = model.sigma;
    const SigmaContext ctx = make_sigma_context(sigma, 0.0);
    const FitGradients g = evaluate_gradients(data, state, ctx);
    return PlnGradients{g.eta, g.m, g.log_v};
}

Eigen::MatrixXd shrink_covariance(const Eigen::MatrixXd& sigma, double alpha) {
    if (alpha < 0.0 || alpha > 1.0)
        throw validation_error("shrinkage alpha must lie in [0, 1]");
    if (sigma.rows() != sigma.cols() || !sigma.isApprox(sigma.transpose(), 1e-10))
        throw validation_error("covariance must be symmetric");
    Eigen::MatrixXd out = (1.0 - alpha) * sigma;
    out.diagonal() = sigma.diagonal();
    return out;
}

ConditionalPredictor::ConditionalPredictor(const PlnModel& model, int target,
                                           const PlnFitOptions& opts)
    : model_(&model), target_(target), opts_(opts) {
    const Eigen::Index d = model.n_taxa();
    if (target < 0 || target >= d) throw validation_error("target taxon index out of range");
    const Eigen::Index p = d - 1;
    eta_obs_.resize(p);
    sigma_obs_.resize(p, p);
    Eigen::Index row = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
        if (j == target) continue;
        eta_obs_(row) = model.eta(j);
        Eigen::Index col = 0;
        for (Eigen::Index k = 0; k < d; ++k) {
            if (k == target) continue;
            sigma_obs_(row, col) = model.sigma(j, k);
            ++col;
        }
        ++row;
    }
    Eigen::MatrixXd sigma = sigma_obs_;
    const SigmaContext ctx = make_sigma_context(sigma, opts.jitter);
    sigma_obs_ = sigma;
    omega_obs_ = ctx.omega;
    logdet_sigma_obs_ = ctx.logdet_sigma;
}

Eigen::VectorXd ConditionalPredictor::infer_latent(
    const Eigen::VectorXd& counts_without_target, double offset) const {
    const Eigen::Index p = eta_obs_.size();
    if (counts_without_target.size() != p)
        throw validation_error("observed count vector must have D-1 entries");
    if (offset <= 0.0) throw validation_error("offset must be positive");

    FitData data;
    data.y = counts_without_target.transpose();
    data.log_s = Eigen::VectorXd::Constant(1, std::log(offset));
    data.lgamma1 =
        data.y.unaryExpr([](double v) { return std::lgamma(v + 1.0); });
    data.n = 1;
    data.d = p;

    SigmaContext ctx;
    ctx.omega = omega_obs_;
    ctx.logdet_sigma = logdet_sigma_obs_;

    FitState state;
    state.eta = eta_obs_;
    state.m = (((counts_without_target.array() + 0.5) / offset).log() -
               eta_obs_.array())
                  .matrix()
                  .transpose();
    state.v = Eigen::MatrixXd::Constant(1, p, 0.5);

    double current = evaluate_elbo(data, state, ctx);
    if (!std::isfinite(current))
        throw convergence_error("non-finite restricted ELBO for held-out sample");

    double step_m = 0.1;
    double step_v = 0.1;
    for (int iter = 0; iter < opts_.max_iters; ++iter) {
        const double before = current;
        const FitGradients grad = evaluate_gradients(data, state, ctx);
        block_step(data, state, ctx, current, step_m,
                   [&](FitState& c, double s) { c.m += s * grad.m; });
        block_step(data, state, ctx, current, step_v, [&](FitState& c, double s) {
            c.v = c.v.array() * (s * grad.log_v.array()).exp();
        });
        if (std::abs(current - before) < opts_.rel_tol * (1.0 + std::abs(current))) break;
    }
    return state.m.row(0).transpose();
}

ConditionalMoments ConditionalPredictor::condition(const Eigen::VectorXd& latent_observed,
                                                   double alpha) const {
    const Eigen::Index p = eta_obs_.size();
    if (latent_observed.size() != p)
        throw validation_error("latent vector must have D-1 entries");
    const Eigen::MatrixXd shrunk = shrink_covariance(model_->sigma, alpha);

    Eigen::MatrixXd shrunk_obs(p, p);
    Eigen::VectorXd cross(p);
    Eigen::Index row = 0;
    const Eigen::Index d = model_->n_taxa();
    for (Eigen::Index j = 0; j < d; ++j) {
        if (j == target_) continue;
        cross(row) = shrunk(j, target_);
        Eigen::Index col = 0;
        for (Eigen::Index k = 0; k < d; ++k) {
            if (k == target_) continue;
            shrunk_obs(row, col) = shrunk(j, k);
            ++col;
        }
        ++row;
    }

    Eigen::LLT<Eigen::MatrixXd> llt(shrunk_obs);
    if (llt.info() != Eigen::Success) {
        shrunk_obs.diagonal().array() += std::max(opts_.jitter, 1e-10);
        llt.compute(shrunk_obs);
        if (llt.info() != Eigen::Success)
            throw convergence_error("singular shrunk covariance block in conditioning");
    }

    ConditionalMoments out;
    out.mean = cross.dot(llt.solve(latent_observed));
    out.variance = shrunk(target_, target_) - cross.dot(llt.solve(cross));
    return out;
}

double ConditionalPredictor::predict_from_latent(const Eigen::VectorXd& latent_observed,
                                                 double offset, double alpha) const {
    const ConditionalMoments cm = condition(latent_observed, alpha);
    return offset * std::exp(model_->eta(target_) + cm.mean + 0.5 * cm.variance);
}

double ConditionalPredictor::predict(const Eigen::VectorXd& counts_without_target,
                                     double offset, double alpha) const {
    return predict_from_latent(infer_latent(counts_without_target, offset), offset, alpha);
}

double conditional_predict(const PlnModel& model, const Eigen::VectorXd& counts_without_target,
                           double offset, int target, double alpha,
                           const PlnFitOptions& opts) {
    return ConditionalPredictor(model, target, opts)
        .predict(counts_without_target, offset, alpha);
}

CountMatrix sample_pln(const Eigen::VectorXd& eta, const Eigen::MatrixXd& sigma,
                       const Eigen::VectorXd& offsets, std::uint64_t seed) {
    const Eigen::Index d = eta.size();
    const Eigen::Index n = offsets.size();
    if (sigma.rows() != d || sigma.cols() != d)
        throw validation_error("sigma dimensions do not match eta");
    if (!sigma.isApprox(sigma.transpose(), 1e-10))
        throw validation_error("sigma must be symmetric");
    if (!(offsets.array() > 0.0).all())
        throw validation_error("offsets must be strictly positive");
    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success)
        throw validation_error("sigma is not positive-definite");
    const Eigen::MatrixXd chol = llt.matrixL();

    Rng rng(seed);
    CountMatrix m;
    m.counts.resize(n, d);
    m.offsets = offsets;
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::VectorXd g(d);
        for (Eigen::Index j = 0; j < d; ++j) g(j) = rng.normal();
        const Eigen::VectorXd z = chol * g;
        for (Eigen::Index j = 0; j < d; ++j) {
            const double mean = offsets(i) * std::exp(eta(j) + z(j));
            if (!std::isfinite(mean) || mean > 1e8)
                throw convergence_error("sampled Poisson mean overflow; reduce eta or sigma");
            m.counts(i, j) = static_cast<double>(rng.poisson(mean));
        }
        m.sample_ids.push_back("sample_" + std::to_string(i + 1));
    }
    for (Eigen::Index j = 0; j < d; ++j) m.taxon_names.push_back("taxon_" + std::to_string(j + 1));
    return m;
}

nlohmann::json pln_model_to_json(const PlnModel& model) {
    nlohmann::json j;
    j["n_taxa"] = model.n_taxa();
    j["n_samples"] = model.n_samples();
    j["eta"] = std::vector<double>(model.eta.data(), model.eta.data() + model.eta.size());
    std::vector<double> sigma;
    sigma.reserve(static_cast<std::size_t>(model.sigma.size()));
    for (Eigen::Index r = 0; r < model.sigma.rows(); ++r)
        for (Eigen::Index c = 0; c < model.sigma.cols(); ++c) sigma.push_back(model.sigma(r, c));
    j["sigma"] = sigma; // row-major
    j["elbo_trace"] = model.elbo_trace;
    return j;
}

PlnModel pln_model_from_json(const nlohmann::json& j) {
    PlnModel model;
    const auto eta = j.at("eta").get<std::vector<double>>();
    const auto sigma = j.at("sigma").get<std::vector<double>>();
    const Eigen::Index d = static_cast<Eigen::Index>(eta.size());
    if (sigma.size() != static_cast<std::size_t>(d * d))
        throw validation_error("sigma payload does not match eta dimension");
    model.eta = Eigen::Map<const Eigen::VectorXd>(eta.data(), d);
    model.sigma.resize(d, d);
    for (Eigen::Index r = 0; r < d; ++r)
        for (Eigen::Index c = 0; c < d; ++c)
            model.sigma(r, c) = sigma[static_cast<std::size_t>(r * d + c)];
    model.elbo_trace = j.value("elbo_trace", std::vector<double>{});
    model.var_means.resize(0, d);
    model.var_vars.resize(0, d);
    return model;
}

} // namespace plnbench
