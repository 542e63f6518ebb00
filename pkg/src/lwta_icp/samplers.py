"""Reparameterized random variates for the winner, utility, stick and
Gaussian latents.

Every sampler is a pure function of its parameters and the generator it is
handed.  Generators are Philox (counter-based) so a seed replays the same
stream on every platform.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError

EPS = 1e-12


def make_rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed, n):
    """``n`` independent Philox streams derived from one seed."""
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def uniform(shape, rng):
    """Uniform(0, 1) draws clamped to [EPS, 1 - EPS] so logs stay finite."""
    return np.clip(rng.random(shape), EPS, 1.0 - EPS)


def gumbel_from_uniform(v):
    return -np.log(-np.log(v))


def sample_gumbel(shape, rng):
    shape = tuple(shape) if np.ndim(shape) else (int(shape),)
    if len(shape) == 0:
        raise ContractError("sample_gumbel needs a non-empty shape")
    return T.Tensor(gumbel_from_uniform(uniform(shape, rng)))


def _check_tau(tau):
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def sample_concrete_categorical(logits, tau, rng, gumbel=None):
    """Gumbel-softmax draw along the last axis; rows sum to one.

    ``gumbel`` lets a caller reuse noise (e.g. to compare with a hard draw).
    """
    logits = T.as_tensor(logits)
    _check_tau(tau)
    if logits.shape[-1] < 2:
        raise ConfigError(f"a categorical needs at least 2 outcomes, got {logits.shape[-1]}")
    if gumbel is None:
        gumbel = gumbel_from_uniform(uniform(logits.shape, rng))
    log_probs = T.log_softmax(logits, axis=-1)
    return T.softmax((log_probs + gumbel) / tau, axis=-1)


def sample_categorical_hard(logits, rng, gumbel=None):
    """One-hot Gumbel-max draw; distributed exactly as softmax(logits)."""
    logits = np.asarray(T.as_tensor(logits).data)
    if gumbel is None:
        gumbel = gumbel_from_uniform(uniform(logits.shape, rng))
    winners = np.argmax(logits + gumbel, axis=-1)
    return np.eye(logits.shape[-1], dtype=logits.dtype)[winners]


def logistic_noise(shape, rng):
    v = uniform(shape, rng)
    return np.log(v) - np.log1p(-v)


def sample_concrete_bernoulli(logit, tau, rng, noise=None):
    """Binary-Concrete draw sigmoid((logit + log V - log(1 - V)) / tau)."""
    logit = T.as_tensor(logit)
    _check_tau(tau)
    if noise is None:
        noise = logistic_noise(logit.shape, rng)
    return T.sigmoid((logit + noise) / tau)


def sample_bernoulli_hard(logit, rng, noise=None):
    """Zero-temperature limit of the binary Concrete with the same noise.

    ``logit + logistic_noise > 0`` has probability sigmoid(logit).
    """
    logit = np.asarray(T.as_tensor(logit).data)
    if noise is None:
        noise = logistic_noise(logit.shape, rng)
    return (logit + noise > 0).astype(logit.dtype)


def sample_kumaraswamy(a, b, rng, uniform_noise=None):
    """Inverse-CDF draw (1 - (1 - G)^(1/b))^(1/a), clamped inside (0, 1).

    Evaluated in log space so small ``a`` or large ``b`` do not underflow.
    """
    a, b = T.as_tensor(a), T.as_tensor(b)
    if np.any(a.data <= 0) or np.any(b.data <= 0):
        raise ContractError("Kumaraswamy parameters must be positive")
    shape = np.broadcast_shapes(a.shape, b.shape)
    g = uniform(shape, rng) if uniform_noise is None else uniform_noise
    log_tail = np.log1p(-g)  # log(1 - G) < 0
    # 1 - (1 - G)^(1/b) = -expm1(log(1 - G) / b)
    inner = T.neg(T.expm1(T.div(log_tail, b)))
    log_u = T.div(T.log(T.clip(inner, 1e-300, 1.0)), a)
    return T.clip(T.exp(log_u), EPS, 1.0 - EPS)


def sample_gaussian(mu, sigma, rng, noise=None):
    mu, sigma = T.as_tensor(mu), T.as_tensor(sigma)
    if noise is None:
        noise = rng.standard_normal(np.broadcast_shapes(mu.shape, sigma.shape))
    return mu + sigma * noise
