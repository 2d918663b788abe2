#pragma once

// Diagonal-Gaussian latent machinery: reparameterized sampling, closed-form
// KL divergence between two diagonal Gaussians, and the cyclical KL-weight
// schedule used during training.

#include "vti/tensor.hpp"

namespace vti {

// Fully factorized Gaussian with log-standard-deviation parameterization.
// Construct through make_gaussian so log_sigma stays inside [-8, 4].
struct DiagonalGaussian {
    Tensor mu;         // (1, d_z)
    Tensor log_sigma;  // (1, d_z)
};

inline constexpr real kLogSigmaMin = real(-8);
inline constexpr real kLogSigmaMax = real(4);

// Clamps raw_log_sigma into the supported range (differentiable inside it).
DiagonalGaussian make_gaussian(const Tensor& mu, const Tensor& raw_log_sigma, Tape* tape);

// mu + exp(log_sigma) * epsilon, differentiable w.r.t. mu and log_sigma.
// epsilon holds standard-normal draws made by the caller.
Tensor reparameterize(const DiagonalGaussian& g, const Tensor& epsilon, Tape* tape);

// KL(q || p) = sum_d [ log(sigma_p/sigma_q)
//                      + (sigma_q^2 + (mu_q - mu_p)^2) / (2 sigma_p^2) - 1/2 ]
Tensor kl_diag_gauss(const DiagonalGaussian& q, const DiagonalGaussian& p, Tape* tape);

// Cyclical ramp for the KL weight: within each cycle of length
// C = total_steps / cycles, beta rises linearly to beta_max over the first
// ramp_ratio fraction, then plateaus until the cycle restarts.
struct AnnealSchedule {
    double beta_max = 1.0;
    long long total_steps = 0;
    int cycles = 1;
    double ramp_ratio = 0.5;  // in (0, 1]
};

double beta_at(const AnnealSchedule& s, long long step);

}  // namespace vti
