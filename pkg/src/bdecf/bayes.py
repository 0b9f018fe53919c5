"""Gaussian variational layers trained with Bayes by Backprop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .nn import Module, glorot_uniform, sigmoid

LOG_2PI = math.log(2 * math.pi)
PRUNED_RHO = -40.0


class StaleSampleError(RuntimeError):
    """The layer has no recorded noise sample for the requested computation."""


def softplus(rho):
    """``log(1 + exp(rho))`` computed without overflow or underflow to zero."""
    rho = np.asarray(rho)
    if rho.dtype.kind != "f":
        rho = rho.astype(np.float64)
    out = np.empty_like(rho)
    pos = rho > 0
    out[pos] = rho[pos] + np.log1p(np.exp(-rho[pos]))
    out[~pos] = np.log1p(np.exp(rho[~pos]))
    return out if out.ndim else out[()]


@dataclass(frozen=True)
class PriorSpec:
    """Weight prior. Unused fields for the chosen family are ignored.

    * ``gsm``: ``pi * N(0, sigma1^2) + (1 - pi) * N(0, sigma2^2)``
    * ``laplace``: location ``loc``, scale ``b``
    * ``isotropic``: ``N(loc, sigma^2)``
    """

    family: str = "gsm"
    pi: float = 0.5
    sigma1: float = 1.0
    sigma2: float = math.exp(-6)
    loc: float = 0.0
    b: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.family == "gsm":
            if not 0 <= self.pi <= 1:
                raise ValueError("gsm mixture weight must lie in [0, 1]")
            if self.sigma1 <= 0 or self.sigma2 <= 0:
                raise ValueError("gsm scales must be positive")
        elif self.family == "laplace":
            if self.b <= 0:
                raise ValueError("laplace scale must be positive")
        elif self.family == "isotropic":
            if self.sigma <= 0:
                raise ValueError("isotropic scale must be positive")
        else:
            raise ValueError(f"unknown prior family {self.family!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


PRIOR_FAMILIES = ("gsm", "laplace", "isotropic")


def _normal_logpdf(w, loc, sigma):
    return -math.log(sigma) - 0.5 * LOG_2PI - (w - loc) ** 2 / (2 * sigma**2)


def log_prior(prior: PriorSpec, w):
    """Summed log-density of ``w`` under ``prior``."""
    w = np.asarray(w, dtype=np.float64)
    if prior.family == "isotropic":
        return float(np.sum(_normal_logpdf(w, prior.loc, prior.sigma)))
    if prior.family == "laplace":
        return float(np.sum(-math.log(2 * prior.b) - np.abs(w - prior.loc) / prior.b))
    if prior.pi == 1.0:
        return float(np.sum(_normal_logpdf(w, 0.0, prior.sigma1)))
    if prior.pi == 0.0:
        return float(np.sum(_normal_logpdf(w, 0.0, prior.sigma2)))
    a = math.log(prior.pi) + _normal_logpdf(w, 0.0, prior.sigma1)
    c = math.log1p(-prior.pi) + _normal_logpdf(w, 0.0, prior.sigma2)
    return float(np.sum(np.logaddexp(a, c)))


def log_prior_grad(prior: PriorSpec, w):
    """Element-wise derivative of :func:`log_prior` with respect to ``w``."""
    if prior.family == "isotropic":
        return -(w - prior.loc) / prior.sigma**2
    if prior.family == "laplace":
        return -np.sign(w - prior.loc) / prior.b
    if prior.pi in (0.0, 1.0):
        s = prior.sigma1 if prior.pi == 1.0 else prior.sigma2
        return -w / s**2
    a = math.log(prior.pi) + _normal_logpdf(w, 0.0, prior.sigma1)
    c = math.log1p(-prior.pi) + _normal_logpdf(w, 0.0, prior.sigma2)
    r1 = np.exp(a - np.logaddexp(a, c))
    return -w * (r1 / prior.sigma1**2 + (1 - r1) / prior.sigma2**2)


def log_variational_posterior(mu, sigma, w):
    """Log-density of ``w`` under the diagonal Gaussian ``N(mu, sigma^2)``, summed."""
    mu, sigma, w = np.asarray(mu), np.asarray(sigma), np.asarray(w)
    if mu.shape != w.shape or sigma.shape != w.shape:
        raise ValueError(f"shape mismatch: mu {mu.shape}, sigma {sigma.shape}, w {w.shape}")
    return float(np.sum(-np.log(sigma) - 0.5 * LOG_2PI - (w - mu) ** 2 / (2 * sigma**2)))


def log_variational_posterior_grads(mu, sigma, w):
    """Partial derivatives of the summed log-density: ``(d/dw, d/dmu, d/dsigma)``."""
    diff = w - mu
    s2 = sigma**2
    return -diff / s2, diff / s2, -1.0 / sigma + diff**2 / (s2 * sigma)


class BayesianLinear(Module):
    """Affine layer whose weights and biases are Gaussian ``N(mu, softplus(rho)^2)``.

    Call :meth:`sample` to draw fresh noise, then :meth:`forward` with
    ``deterministic=False`` to use the sampled weights (or ``True`` for the
    posterior mean). The last draw is kept so the reparameterised backward
    pass and the KL term can reuse it.
    """

    def __init__(self, in_dim, out_dim, prior: PriorSpec | None = None, rng=None,
                 rho_init=-5.0, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.prior = prior or PriorSpec()
        self.params["W_mu"] = glorot_uniform(rng, in_dim, out_dim, dtype)
        self.params["W_rho"] = np.full((in_dim, out_dim), rho_init, dtype=dtype)
        self.params["b_mu"] = np.zeros(out_dim, dtype=dtype)
        self.params["b_rho"] = np.full(out_dim, rho_init, dtype=dtype)
        self.eps = None
        self.zero_grad()

    # -- sampling

    def sigmas(self):
        return softplus(self.params["W_rho"]), softplus(self.params["b_rho"])

    def sample(self, rng):
        """Draw standard-normal noise for weights and biases."""
        dt = self.params["W_mu"].dtype
        self.eps = (
            rng.standard_normal((self.in_dim, self.out_dim)).astype(dt),
            rng.standard_normal(self.out_dim).astype(dt),
        )
        return self.eps

    def set_noise(self, eps_W, eps_b):
        self.eps = (np.asarray(eps_W), np.asarray(eps_b))

    def weights(self, deterministic=False):
        if deterministic:
            return self.params["W_mu"], self.params["b_mu"]
        if self.eps is None:
            raise StaleSampleError("no noise sample recorded; call sample() first")
        return (sample_weights(self.params["W_mu"], self.params["W_rho"], self.eps[0]),
                self.params["b_mu"] + softplus(self.params["b_rho"]) * self.eps[1])

    # -- data path

    def forward(self, h, deterministic=False):
        if h.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {h.shape[-1]}")
        W, b = self.weights(deterministic)
        self._cache = (h, deterministic, W)
        return h @ W + b

    def backward(self, dout):
        h, deterministic, W = self._cache
        dW = h.T @ dout
        db = dout.sum(axis=0)
        self.grads["W_mu"] += dW
        self.grads["b_mu"] += db
        if not deterministic:
            eW, eb = self.eps
            self.grads["W_rho"] += dW * eW * sigmoid(self.params["W_rho"])
            self.grads["b_rho"] += db * eb * sigmoid(self.params["b_rho"])
        return dout @ W.T

    # -- complexity cost

    def kl_term(self):
        """Single-sample ``log q(w|theta) - log P(w)`` at the recorded noise."""
        if self.eps is None:
            raise StaleSampleError("no noise sample recorded; call sample() first")
        W, b = self.weights()
        sW, sb = self.sigmas()
        lq = log_variational_posterior(self.params["W_mu"], sW, W) + \
            log_variational_posterior(self.params["b_mu"], sb, b)
        lp = log_prior(self.prior, W) + log_prior(self.prior, b)
        return lq - lp

    def kl_backward(self, weight=1.0):
        """Accumulate ``weight * d kl_term`` into the parameter gradients."""
        W, b = self.weights()
        sW, sb = self.sigmas()
        for (w, s, eps, mu_key, rho_key) in (
            (W, sW, self.eps[0], "W_mu", "W_rho"),
            (b, sb, self.eps[1], "b_mu", "b_rho"),
        ):
            dq_w, dq_mu, dq_s = log_variational_posterior_grads(self.params[mu_key], s, w)
            dw = dq_w - log_prior_grad(self.prior, w)
            self.grads[mu_key] += weight * (dw + dq_mu)
            self.grads[rho_key] += weight * (dw * eps + dq_s) * sigmoid(self.params[rho_key])


def sample_weights(mu, rho, eps):
    """Reparameterised draw ``mu + softplus(rho) * eps``."""
    mu, rho, eps = np.asarray(mu), np.asarray(rho), np.asarray(eps)
    if eps.shape != mu.shape or rho.shape != mu.shape:
        raise ValueError(f"shape mismatch: mu {mu.shape}, rho {rho.shape}, eps {eps.shape}")
    return mu + softplus(rho) * eps


def elbo_loss(layers, log_likelihood, kl_weight=1.0):
    """``kl_weight * sum(log q - log P(w)) - log P(D|w)`` for the current sample.

    Averaging over several Monte-Carlo samples is the caller's loop.
    """
    if not 0 <= kl_weight <= 1:
        raise ValueError("kl_weight must lie in [0, 1]")
    kl = sum(layer.kl_term() for layer in layers)
    return kl_weight * kl - log_likelihood


def snr(layer: BayesianLinear):
    """Per-weight signal-to-noise ratio ``|mu| / sigma``."""
    return np.abs(layer.params["W_mu"]) / softplus(layer.params["W_rho"])


def snr_prune(layer: BayesianLinear, fraction=0.2):
    """Zero the ``floor(fraction * n)`` lowest-SNR weights of ``layer``.

    Returns a pruned copy and a boolean mask (True where pruned) shaped like
    the weight matrix. Biases are left untouched.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    ratio = snr(layer).ravel()
    n_prune = int(math.floor(fraction * ratio.size))
    mask = np.zeros(ratio.size, dtype=bool)
    if n_prune:
        # stable sort keeps index order among equal ratios
        mask[np.argsort(ratio, kind="stable")[:n_prune]] = True
    mask = mask.reshape(layer.params["W_mu"].shape)
    pruned = BayesianLinear.__new__(BayesianLinear)
    Module.__init__(pruned)
    pruned.in_dim, pruned.out_dim, pruned.prior = layer.in_dim, layer.out_dim, layer.prior
    pruned.params = {k: v.copy() for k, v in layer.params.items()}
    pruned.params["W_mu"][mask] = 0.0
    pruned.params["W_rho"][mask] = PRUNED_RHO
    pruned.eps = None
    pruned.zero_grad()
    return pruned, mask
