"""Priors and KL terms of the variational objective."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError

PROB_CLAMP = 1e-7


@dataclass
class IbpPrior:
    omega: float = 1.0
    blocks: int = 1

    def __post_init__(self):
        if not self.omega > 0:
            raise ContractError(f"IBP omega must be positive, got {self.omega}")


@dataclass
class KlBreakdown:
    """Per-layer KL terms.

    ``kl_xi`` is a single-sample estimate summed over the batch and can dip below
    zero; ``kl_z`` is closed form; ``kl_u`` is a single-sample estimate.
    """

    kl_xi: T.Tensor
    kl_z: T.Tensor
    kl_u: T.Tensor

    @property
    def total(self):
        return self.kl_xi + self.kl_z + self.kl_u

    def values(self):
        return {"kl_xi": float(self.kl_xi.data), "kl_z": float(self.kl_z.data), "kl_u": float(self.kl_u.data)}


def stick_breaking_pi(u):
    """Running product pi_b = u_1 * ... * u_b of the stick variables."""
    u = T.as_tensor(u)
    if np.any(u.data <= 0) or np.any(u.data > 1):
        raise ContractError("stick variables must lie in (0, 1]")
    return T.exp(T.cumsum(T.log(u), axis=-1))


def kl_categorical_mc(q_probs, sample):
    """Single-sample estimate of KL[q || Categorical(1/U)], summed over rows.

    log q(sample) is read off the probability masses, sum(sample * log q),
    which also covers relaxed (simplex-interior) samples.
    """
    q_probs, sample = T.as_tensor(q_probs), T.as_tensor(sample)
    n_outcomes = q_probs.shape[-1]
    log_q = T.log(T.clip(q_probs, PROB_CLAMP, 1.0))
    log_q_sample = T.sum(sample * log_q)
    log_p_sample = T.sum(sample) * (-np.log(n_outcomes))
    return log_q_sample - log_p_sample


def kl_bernoulli(q_pi, p_pi):
    """Closed-form KL between Bernoulli(q) and Bernoulli(p), summed."""
    q = T.clip(T.as_tensor(q_pi), PROB_CLAMP, 1.0 - PROB_CLAMP)
    p = T.clip(T.as_tensor(p_pi), PROB_CLAMP, 1.0 - PROB_CLAMP)
    on = q * (T.log(q) - T.log(p))
    off = (1.0 - q) * (T.log(1.0 - q) - T.log(1.0 - p))
    return T.sum(on + off)


def kumaraswamy_log_pdf(u, a, b):
    u, a, b = T.as_tensor(u), T.as_tensor(a), T.as_tensor(b)
    log_u = T.log(u)
    # log(1 - u^a) = log(-expm1(a log u))
    log_tail = T.log(T.clip(T.neg(T.expm1(a * log_u)), 1e-300, 1.0))
    return T.log(a) + T.log(b) + (a - 1.0) * log_u + (b - 1.0) * log_tail


def beta_omega_one_log_pdf(u, omega):
    """log Beta(u | omega, 1) = log omega + (omega - 1) log u."""
    return np.log(omega) + (omega - 1.0) * T.log(T.as_tensor(u))


def kl_kumaraswamy_beta(a_q, b_q, omega, u):
    """Single-sample estimate of KL[Kumaraswamy(a, b) || Beta(omega, 1)].

    ``u`` must be the sample drawn from the Kumaraswamy posterior.
    """
    if not omega > 0:
        raise ContractError(f"omega must be positive, got {omega}")
    log_q = kumaraswamy_log_pdf(u, a_q, b_q)
    log_p = beta_omega_one_log_pdf(u, omega)
    return T.sum(log_q - log_p)


def kl_gaussian_standard(mu, sigma):
    """Closed-form KL[N(mu, sigma^2) || N(0, I)] summed over the last axis."""
    mu, sigma = T.as_tensor(mu), T.as_tensor(sigma)
    var = sigma * sigma
    return 0.5 * T.sum(mu * mu + var - 1.0 - T.log(var), axis=-1)
