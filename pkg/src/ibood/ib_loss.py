"""Information-bottleneck training loss on embedded batches.

The total objective is  compression - beta * relevance  where

* compression estimates the information retained about the input: the mean
  over all N^2 ordered embedding pairs of -||z_j - z_i||^2 / (2 sigma_z^2)
  (plus d*log sigma_z when the constant is included). It shrinks as points
  spread apart, so minimizing it repels every sample pair.
* relevance estimates the information kept about the labels: the mean log
  posterior of each sample under per-class isotropic Gaussian prototypes,
  with class biases forced to zero. It is exactly the negative of the
  multi-class data-description MAP loss at zero bias, and grows as samples
  concentrate around their own class centers.

All operations are pure functions of torch tensors and differentiate w.r.t.
the embeddings and the prototype parameters (mu, log_sigma, bias).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


class NumericError(ValueError):
    """Raised when a loss input contains non-finite values."""


@dataclass
class EmbeddingBatch:
    """N embedded vectors with aligned labels in {0..K-1}."""

    z: torch.Tensor  # (N, d)
    y: torch.Tensor  # (N,) long

    def __post_init__(self):
        if self.z.ndim != 2:
            raise ValueError(f"z must be (N, d), got shape {tuple(self.z.shape)}")
        if self.y.shape != (self.z.shape[0],):
            raise ValueError("labels must align with embedding rows")

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def d(self) -> int:
        return self.z.shape[1]


class ClassPrototypes(nn.Module):
    """Per-class center mu_k, scale sigma_k = exp(log_sigma_k), and bias b_k."""

    def __init__(self, mu: torch.Tensor, log_sigma: torch.Tensor, bias: torch.Tensor):
        super().__init__()
        if mu.ndim != 2 or log_sigma.shape != (mu.shape[0],) or bias.shape != (mu.shape[0],):
            raise ValueError("prototype shapes must be mu (K, d), log_sigma (K,), bias (K,)")
        self.mu = nn.Parameter(mu.clone())
        self.log_sigma = nn.Parameter(log_sigma.clone())
        self.bias = nn.Parameter(bias.clone())

    @property
    def k(self) -> int:
        return self.mu.shape[0]

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)

    @classmethod
    def from_embeddings(
        cls, batch: EmbeddingBatch, n_classes: int, frequency_bias: bool = False
    ) -> "ClassPrototypes":
        """Initialize centers and scales from class statistics of a batch.

        sigma_k starts at the per-dimension RMS deviation of class k around its
        mean, so posteriors are well-scaled at step 0. Biases default to zero
        (uniform class prior); frequency_bias sets b_k = log(n_k / N).
        """
        d = batch.d
        mu = torch.zeros(n_classes, d, dtype=batch.z.dtype)
        log_sigma = torch.zeros(n_classes, dtype=batch.z.dtype)
        bias = torch.zeros(n_classes, dtype=batch.z.dtype)
        for k in range(n_classes):
            members = batch.z[batch.y == k]
            if members.shape[0] == 0:
                raise ValueError(f"class {k} has no members in the batch")
            mu[k] = members.mean(0)
            spread = ((members - mu[k]) ** 2).sum(1).mean() / d
            log_sigma[k] = 0.5 * torch.log(torch.clamp(spread, min=1e-8))
            if frequency_bias:
                bias[k] = torch.log(torch.tensor(members.shape[0] / batch.n))
        return cls(mu, log_sigma, bias)

    @classmethod
    def random(
        cls, n_classes: int, d: int, seed: int = 0, scale: float = 1.0
    ) -> "ClassPrototypes":
        gen = torch.Generator().manual_seed(seed)
        mu = torch.randn(n_classes, d, generator=gen) * scale
        return cls(mu, torch.zeros(n_classes), torch.zeros(n_classes))


@dataclass
class IBLossConfig:
    """Lagrange multiplier beta, conditional deviation sigma_z, constant toggle."""

    beta: float = 1.0
    sigma_z: float = 1.0
    include_log_sigma_term: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.sigma_z <= 0:
            raise ValueError("sigma_z must be positive")


@dataclass
class LossBreakdown:
    """Per-term loss values; total = compression - beta * relevance."""

    compression: torch.Tensor
    relevance: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "compression": float(self.compression),
            "relevance": float(self.relevance),
            "total": float(self.total),
        }


def _check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite values in loss input")


def _distances(
    z: torch.Tensor, protos: ClassPrototypes, include_log_sigma: bool
) -> torch.Tensor:
    """(N, K) matrix of D_k(x_i) = ||z_i - mu_k||^2 / (2 sigma_k^2) [+ d log sigma_k]."""
    d = z.shape[1]
    sq = ((z.unsqueeze(1) - protos.mu.unsqueeze(0)) ** 2).sum(-1)  # (N, K)
    out = sq / (2.0 * torch.exp(2.0 * protos.log_sigma))
    if include_log_sigma:
        out = out + d * protos.log_sigma
    return out


def class_distance(
    batch: EmbeddingBatch,
    protos: ClassPrototypes,
    k: int,
    include_log_sigma: bool = True,
) -> torch.Tensor:
    """Distance of every sample to the class-k Gaussian component, (N,)."""
    if not 0 <= k < protos.k:
        raise ValueError(f"class id {k} out of range for K={protos.k}")
    _check_finite(batch.z, protos.mu, protos.log_sigma)
    return _distances(batch.z, protos, include_log_sigma)[:, k]


def _log_posterior(
    batch: EmbeddingBatch,
    protos: ClassPrototypes,
    use_bias: bool,
    include_log_sigma: bool,
) -> torch.Tensor:
    """Per-sample log posterior of the true class, (N,), log-sum-exp stabilized."""
    _check_finite(batch.z, protos.mu, protos.log_sigma, protos.bias)
    logits = -_distances(batch.z, protos, include_log_sigma)
    if use_bias:
        logits = logits + protos.bias.unsqueeze(0)
    own = logits.gather(1, batch.y.view(-1, 1)).squeeze(1)
    return own - torch.logsumexp(logits, dim=1)


def mcdd_loss(
    batch: EmbeddingBatch, protos: ClassPrototypes, include_log_sigma: bool = True
) -> torch.Tensor:
    """MAP loss of the prototype generative classifier (mean negative log posterior)."""
    return -_log_posterior(batch, protos, use_bias=True, include_log_sigma=include_log_sigma).mean()


def compression_term(batch: EmbeddingBatch, cfg: IBLossConfig) -> torch.Tensor:
    """Mean over all N^2 ordered pairs of -||z_j - z_i||^2 / (2 sigma_z^2).

    Self-pairs contribute zero distance. The d*log sigma_z constant enters
    only when cfg.include_log_sigma_term is set.
    """
    if batch.n < 2:
        raise ValueError("compression term needs at least 2 samples")
    _check_finite(batch.z)
    z = batch.z
    sq = (z * z).sum(1)
    pair_sq = sq.unsqueeze(0) + sq.unsqueeze(1) - 2.0 * z @ z.T
    pair_sq = torch.clamp(pair_sq, min=0.0)
    value = -pair_sq.mean() / (2.0 * cfg.sigma_z**2)
    if cfg.include_log_sigma_term:
        value = value + batch.d * torch.log(torch.as_tensor(cfg.sigma_z, dtype=z.dtype))
    return value


def relevance_term(
    batch: EmbeddingBatch, protos: ClassPrototypes, cfg: IBLossConfig
) -> torch.Tensor:
    """Mean log posterior with zero class biases; the negative of the zero-bias MAP loss."""
    return _log_posterior(
        batch, protos, use_bias=False, include_log_sigma=cfg.include_log_sigma_term
    ).mean()


def ib_loss(
    batch: EmbeddingBatch, protos: ClassPrototypes, cfg: IBLossConfig
) -> LossBreakdown:
    """Combined objective: compression - beta * relevance."""
    compression = compression_term(batch, cfg)
    relevance = relevance_term(batch, protos, cfg)
    return LossBreakdown(
        compression=compression,
        relevance=relevance,
        total=compression - cfg.beta * relevance,
    )


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_location: str


def grad_check(
    loss_fn,
    batch: EmbeddingBatch,
    protos: ClassPrototypes,
    step: float = 1e-4,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare autograd gradients against central finite differences.

    `loss_fn(batch, protos)` must return a scalar tensor. Gradients are checked
    w.r.t. z, mu, and log_sigma on float64 copies of the fixture. The relative
    error is normalized by the larger of the two gradient norms (absolute when
    both are ~0).
    """
    z = batch.z.detach().double().clone().requires_grad_(True)
    protos64 = ClassPrototypes(
        protos.mu.detach().double(),
        protos.log_sigma.detach().double(),
        protos.bias.detach().double(),
    )
    batch64 = EmbeddingBatch(z, batch.y)

    loss = loss_fn(batch64, protos64)
    targets = {"z": z, "mu": protos64.mu, "log_sigma": protos64.log_sigma}
    grads = torch.autograd.grad(loss, list(targets.values()), allow_unused=True)

    worst = ("", 0.0)
    for (name, tensor), analytic in zip(targets.items(), grads):
        if analytic is None:
            analytic = torch.zeros_like(tensor)
        if not torch.isfinite(analytic).all():
            return GradCheckReport(False, float("inf"), f"non-finite gradient at {name}")
        flat = tensor.detach().view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus = float(loss_fn(batch64, protos64))
            flat[i] = orig - step
            minus = float(loss_fn(batch64, protos64))
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * step)
            a = analytic.view(-1)[i].item()
            scale = max(abs(a), abs(numeric))
            err = abs(a - numeric) if scale < 1e-8 else abs(a - numeric) / scale
            if err > worst[1]:
                worst = (f"{name}[{i}]", err)
    return GradCheckReport(worst[1] < tolerance, worst[1], worst[0])
