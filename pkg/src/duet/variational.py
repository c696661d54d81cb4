"""Gaussian weight posteriors, weight priors and the KL / ELBO terms.

Everything that enters the training loss is expressed as graph nodes
(``*_node`` builders) so gradients come from the autodiff core.  The plain
functions evaluate the same builders on concrete arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .tensor import Graph, Node, evaluate

LOG_2PI = math.log(2.0 * math.pi)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def inverse_softplus(y: float) -> float:
    if y <= 0:
        raise ValueError("softplus is strictly positive")
    return float(y + np.log(-np.expm1(-y)))


@dataclass(frozen=True)
class IsoGaussian:
    sigma_p: float = 1.0

    def __post_init__(self):
        if not self.sigma_p > 0:
            raise ValueError("sigma_p must be positive")


@dataclass(frozen=True)
class Cauchy:
    kappa: float = 1.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")


@dataclass(frozen=True)
class ScaleMixture:
    sigma0: float = 1.0
    sigma1: float = 0.1
    beta: float = 0.5

    def __post_init__(self):
        if not (self.sigma0 > 0 and self.sigma1 > 0):
            raise ValueError("mixture scales must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


Prior = Union[IsoGaussian, Cauchy, ScaleMixture]


def prior_to_string(prior: Prior) -> str:
    if isinstance(prior, IsoGaussian):
        return f"iso_gaussian:{float(prior.sigma_p)!r}"
    if isinstance(prior, Cauchy):
        return f"cauchy:{float(prior.kappa)!r}"
    return f"scale_mixture:{float(prior.sigma0)!r},{float(prior.sigma1)!r},{float(prior.beta)!r}"


def prior_from_string(text: str) -> Prior:
    """Parse ``iso_gaussian:1.0``, ``cauchy:1.0`` or ``scale_mixture:1.0,0.1,0.5``.

    A bare kind name selects the default parameters.
    """
    kind, _, params = text.strip().partition(":")
    values = [float(v) for v in params.split(",") if v.strip()]
    table = {"iso_gaussian": IsoGaussian, "cauchy": Cauchy, "scale_mixture": ScaleMixture}
    if kind not in table:
        raise ValueError(f"unknown prior kind {kind!r}")
    return table[kind](*values)


@dataclass
class GaussianPosterior:
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.mu.shape != self.rho.shape:
            raise ValueError(f"mu {self.mu.shape} and rho {self.rho.shape} must share a shape")

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)


@dataclass(frozen=True)
class WeightSample:
    value: np.ndarray
    epsilon: np.ndarray


def sample_weights(post: GaussianPosterior, rng_seed) -> WeightSample:
    eps = np.random.default_rng(rng_seed).standard_normal(post.mu.shape)
    return WeightSample(value=post.mu + post.sigma * eps, epsilon=eps)


# ---------------------------------------------------------------------------
# graph builders


def weight_node(g: Graph, mu: Node, rho: Node, eps: Node) -> Node:
    """phi = mu + softplus(rho) * eps, differentiable in mu and rho."""
    return mu + g.softplus(rho) * eps


def kl_gaussian_iso_node(g: Graph, mu: Node, rho: Node, prior: IsoGaussian) -> Node:
    sigma = g.softplus(rho)
    sp = prior.sigma_p
    terms = (math.log(sp) - g.log(sigma)) + (sigma * sigma + mu * mu) * (1.0 / (2.0 * sp * sp)) - 0.5
    return g.sum(terms)


def log_prior_node(g: Graph, w: Node, prior: Prior) -> Node:
    if isinstance(prior, IsoGaussian):
        s = prior.sigma_p
        return g.sum(w * w * (-0.5 / (s * s)) - (math.log(s) + 0.5 * LOG_2PI))
    if isinstance(prior, Cauchy):
        k = prior.kappa
        z = w * (1.0 / k)
        return g.sum(-math.log(math.pi * k) - g.log(z * z + 1.0))
    # scale mixture: log(beta N0 + (1-beta) N1) via logaddexp; a zero weight drops its component
    parts = []
    for weight, s in ((prior.beta, prior.sigma0), (1.0 - prior.beta, prior.sigma1)):
        if weight > 0:
            parts.append(w * w * (-0.5 / (s * s)) + (math.log(weight) - math.log(s) - 0.5 * LOG_2PI))
    dens = parts[0] if len(parts) == 1 else g.logaddexp(parts[0], parts[1])
    return g.sum(dens)


def log_posterior_node(g: Graph, w: Node, mu: Node, rho: Node) -> Node:
    sigma = g.softplus(rho)
    z = (w - mu) / sigma
    return g.sum(z * z * -0.5 - g.log(sigma) - 0.5 * LOG_2PI)


def kl_monte_carlo_node(g: Graph, mu: Node, rho: Node, eps: Node, prior: Prior, w: Node | None = None) -> Node:
    """Single-sample KL estimate log q(phi) - log p(phi) with pathwise phi."""
    if w is None:
        w = weight_node(g, mu, rho, eps)
    return log_posterior_node(g, w, mu, rho) - log_prior_node(g, w, prior)


def kl_node(g: Graph, mu: Node, rho: Node, eps: Node, prior: Prior, w: Node | None = None) -> Node:
    """Closed form for the isotropic Gaussian prior, single-sample MC otherwise."""
    if isinstance(prior, IsoGaussian):
        return kl_gaussian_iso_node(g, mu, rho, prior)
    return kl_monte_carlo_node(g, mu, rho, eps, prior, w)


# ---------------------------------------------------------------------------
# numeric wrappers


def kl_gaussian_iso(post: GaussianPosterior, prior: Prior) -> float:
    if not isinstance(prior, IsoGaussian):
        raise TypeError(f"closed-form KL needs an IsoGaussian prior, got {type(prior).__name__}; use kl_monte_carlo")
    g = Graph()
    mu, rho = g.leaf("mu"), g.leaf("rho")
    (kl,) = evaluate(g, {mu: post.mu, rho: post.rho}, [kl_gaussian_iso_node(g, mu, rho, prior)])
    return float(kl)


def log_prior_density(prior: Prior, w) -> float:
    g = Graph()
    leaf = g.leaf("w")
    (lp,) = evaluate(g, {leaf: np.asarray(w, dtype=np.float64)}, [log_prior_node(g, leaf, prior)])
    return float(lp)


def kl_monte_carlo(post: GaussianPosterior, prior: Prior, sample: WeightSample) -> float:
    g = Graph()
    mu, rho, eps = g.leaf("mu"), g.leaf("rho"), g.leaf("eps")
    (kl,) = evaluate(g, {mu: post.mu, rho: post.rho, eps: sample.epsilon}, [kl_monte_carlo_node(g, mu, rho, eps, prior)])
    return float(kl)


def elbo_loss(kl_total, nll, kl_weight: float):
    """Negative ELBO estimate: ``kl_weight * kl_total + nll``.

    Works on floats and on graph nodes alike.
    """
    if kl_weight < 0:
        raise ValueError("kl_weight must be non-negative")
    if isinstance(nll, Node):
        if kl_weight == 0:
            return nll
        return kl_total * kl_weight + nll
    return kl_weight * kl_total + nll
