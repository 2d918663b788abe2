#include "vti/latent.hpp"

namespace vti {

namespace {

void check_pair(const DiagonalGaussian& g, const char* who) {
    if (!g.mu.defined() || !g.log_sigma.defined() || g.mu.shape() != g.log_sigma.shape())
        throw ContractError(std::string(who) + ": mu/log_sigma shape mismatch");
}

}  // namespace

DiagonalGaussian make_gaussian(const Tensor& mu, const Tensor& raw_log_sigma, Tape* tape) {
    if (mu.shape() != raw_log_sigma.shape())
        throw ContractError("make_gaussian: mu/log_sigma shape mismatch");
    return {mu, clip(raw_log_sigma, kLogSigmaMin, kLogSigmaMax, tape)};
}

Tensor reparameterize(const DiagonalGaussian& g, const Tensor& epsilon, Tape* tape) {
    check_pair(g, "reparameterize");
    if (epsilon.shape() != g.mu.shape())
        throw ContractError("reparameterize: epsilon shape mismatch");
    return add(g.mu, mul(vti::exp(g.log_sigma, tape), epsilon, tape), tape);
}

Tensor kl_diag_gauss(const DiagonalGaussian& q, const DiagonalGaussian& p, Tape* tape) {
    check_pair(q, "kl_diag_gauss");
    check_pair(p, "kl_diag_gauss");
    if (q.mu.shape() != p.mu.shape())
        throw ContractError("kl_diag_gauss: dimension mismatch between q and p");
    Tensor d = sub(q.mu, p.mu, tape);
    Tensor var_q = vti::exp(scale(q.log_sigma, real(2), tape), tape);
    Tensor inv_var_p = vti::exp(scale(p.log_sigma, real(-2), tape), tape);
    Tensor quad = scale(mul(add(var_q, mul(d, d, tape), tape), inv_var_p, tape), real(0.5), tape);
    Tensor per_dim =
        shift(add(sub(p.log_sigma, q.log_sigma, tape), quad, tape), real(-0.5), tape);
    return sum(per_dim, tape);
}

double beta_at(const AnnealSchedule& s, long long step) {
    if (step < 0) throw ContractError("beta_at: negative step");
    if (s.cycles < 1 || s.total_steps < s.cycles)
        throw ContractError("beta_at: cycle length must be at least 1");
    if (!(s.ramp_ratio > 0.0 && s.ramp_ratio <= 1.0))
        throw ContractError("beta_at: ramp_ratio must be in (0, 1]");
    const long long cycle_len = s.total_steps / s.cycles;
    const long long t = step % cycle_len;
    const double frac = static_cast<double>(t) / (s.ramp_ratio * static_cast<double>(cycle_len));
    return s.beta_max * std::min(1.0, frac);
}

}  // namespace vti
