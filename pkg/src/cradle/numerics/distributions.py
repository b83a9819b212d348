"""Reparameterised samplers, log-densities and closed-form KL divergences.

Every function accepts tensors or plain arrays; results are tensors so they
compose with :mod:`cradle.numerics.autodiff`.  ``axis`` selects the axes
summed over (``None`` sums everything, giving a scalar).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GaussianParams:
    mean: object
    scale: object


def _reduce(t, axis):
    return t.sum() if axis is None else t.sum(axis=axis)


def _check_positive(x, what):
    data = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
    if np.any(data <= 0):
        raise ValueError(f"{what} must be strictly positive")


def normal_rsample(g, noise):
    """``mean + scale * noise``; differentiable in mean and scale."""
    if np.shape(noise) != np.broadcast_shapes(np.shape(_data(g.mean)), np.shape(noise)):
        raise ValueError("noise must have the shape of the broadcast mean")
    return ad.as_tensor(g.mean) + ad.as_tensor(g.scale) * ad.as_tensor(noise)


def _data(x):
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x)


def normal_log_prob(x, g, axis=None):
    x, mu, sd = ad.as_tensor(x), ad.as_tensor(g.mean), ad.as_tensor(g.scale)
    z = (x - mu) / sd
    return _reduce(-0.5 * (z * z) - ad.log(sd) - 0.5 * LOG_2PI, axis)


def normal_kl(q, p, axis=None):
    """KL(q || p) between diagonal Gaussians, summed over ``axis``."""
    _check_positive(q.scale, "q scale")
    _check_positive(p.scale, "p scale")
    mq, sq = ad.as_tensor(q.mean), ad.as_tensor(q.scale)
    mp, sp = ad.as_tensor(p.mean), ad.as_tensor(p.scale)
    diff = mq - mp
    kl = ad.log(sp) - ad.log(sq) + (sq * sq + diff * diff) / (2.0 * (sp * sp)) - 0.5
    return _reduce(kl, axis)


def relaxed_bernoulli_rsample(logits, temperature, uniform_noise, hard=False):
    """Binary concrete sample ``sigmoid((logits + logit(u)) / temperature)``.

    With ``hard=True`` the forward value is rounded to {0, 1} while the
    gradient is that of the relaxed sample (straight-through).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    u = np.asarray(uniform_noise, dtype=float)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("uniform noise must lie strictly inside (0, 1)")
    soft = ad.sigmoid((ad.as_tensor(logits) + (np.log(u) - np.log1p(-u))) / temperature)
    if not hard:
        return soft
    hard_values = (soft.data > 0.5).astype(soft.data.dtype)
    return soft + ad.Tensor(hard_values - soft.data)


def bernoulli_kl(q_prob, p_prob, axis=None):
    """KL(Bernoulli(q) || Bernoulli(p)), summed over ``axis``."""
    for prob, what in ((q_prob, "q_prob"), (p_prob, "p_prob")):
        d = _data(prob)
        if np.any(d <= 0) or np.any(d >= 1):
            raise ValueError(f"{what} must lie strictly inside (0, 1)")
    q, p = ad.as_tensor(q_prob), ad.as_tensor(p_prob)
    kl = q * (ad.log(q) - ad.log(p)) + (1.0 - q) * (ad.log(1.0 - q) - ad.log(1.0 - p))
    return _reduce(kl, axis)


def bernoulli_kl_from_logits(logits, p_prob, axis=None):
    """Same as :func:`bernoulli_kl` with q = sigmoid(logits); stable for large |logits|."""
    lg = ad.as_tensor(logits)
    q = ad.sigmoid(lg)
    log_q = -ad.softplus(-lg)
    log_1mq = -ad.softplus(lg)
    kl = q * (log_q - float(np.log(p_prob))) + (1.0 - q) * (log_1mq - float(np.log1p(-p_prob)))
    return _reduce(kl, axis)


def _check_counts(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(x != np.floor(x)):
        raise ValueError("counts must be nonnegative integers")
    return x


def gamma_poisson_log_prob(x, mean, inverse_dispersion, axis=None, log_mean=None):
    """Negative-binomial log-pmf parameterised by mean and inverse dispersion.

    ``log_mean`` may be supplied when it is available in a more stable form
    than ``log(mean)`` (e.g. from a log-softmax).
    """
    x = _check_counts(x)
    if log_mean is None:
        _check_positive(mean, "mean")
    elif np.any((mean.data if isinstance(mean, ad.Tensor) else np.asarray(mean)) < 0):
        raise ValueError("mean must be nonnegative")
    _check_positive(inverse_dispersion, "inverse dispersion")
    mu, theta = ad.as_tensor(mean), ad.as_tensor(inverse_dispersion)
    log_mu = ad.log(mu) if log_mean is None else ad.as_tensor(log_mean)
    log_theta_mu = ad.log(theta + mu)
    lp = (
        ad.lgamma(theta + x)
        - ad.lgamma(theta)
        - ad.lgamma(ad.Tensor(x + 1.0))
        + theta * (ad.log(theta) - log_theta_mu)
        + x * (log_mu - log_theta_mu)
    )
    return _reduce(lp, axis)


def gamma_poisson_sample(mean, inverse_dispersion, rng):
    """Draw ``rate ~ Gamma(shape=theta, mean=mean)`` then ``Poisson(rate)``."""
    mean = np.asarray(mean, dtype=float)
    theta = float(inverse_dispersion)
    rate = rng.gamma(shape=theta, scale=mean / theta)
    return rng.poisson(rate).astype(np.int64)
