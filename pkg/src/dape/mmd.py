"""Multi-bandwidth Gaussian-kernel MMD and the pairwise domain-alignment loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_SIGMAS = (10.0, 15.0, 20.0, 50.0)


@dataclass(frozen=True)
class Bandwidths:
    sigma: tuple[float, ...] = DEFAULT_SIGMAS

    def __post_init__(self):
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        if not self.sigma:
            raise ValueError("need at least one bandwidth")
        if any(not s > 0 for s in self.sigma):
            raise ValueError(f"bandwidths must be positive, got {self.sigma}")

    def __len__(self):
        return len(self.sigma)


def gaussian_kernel(u, v, sigma: float) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    d = u - v
    return float(np.exp(-np.dot(d, d) / (2.0 * sigma * sigma)))


def _as_batch(z):
    if not isinstance(z, torch.Tensor):
        z = torch.as_tensor(np.asarray(z, dtype=np.float64))
    if z.ndim != 2:
        raise ValueError(f"expected a (B, n_z) batch, got shape {tuple(z.shape)}")
    return z


def _sqdist(a, b):
    # explicit differences: exact zeros on the diagonal, smooth gradient there
    return (a[:, None, :] - b[None, :, :]).pow(2).sum(-1)


def _check_pair(zp, zq):
    if zp.shape != zq.shape:
        raise ValueError(f"batch shape mismatch: {tuple(zp.shape)} vs {tuple(zq.shape)}")
    if zp.shape[0] < 2:
        raise ValueError("unbiased MMD needs B >= 2")


def _mmd2_from_dists(dpp, dqq, dpq, sigma, off_diag):
    B = dpp.shape[0]
    scale = -1.0 / (2.0 * sigma * sigma)
    kpp = torch.exp(dpp * scale)[off_diag].sum()
    kqq = torch.exp(dqq * scale)[off_diag].sum()
    kpq = torch.exp(dpq * scale).sum()
    return (kpp + kqq) / (B * (B - 1)) - 2.0 * kpq / (B * B)


def _mmd2_terms(zp, zq, sigmas):
    _check_pair(zp, zq)
    B = zp.shape[0]
    off_diag = ~torch.eye(B, dtype=torch.bool, device=zp.device)
    dpp, dqq, dpq = _sqdist(zp, zp), _sqdist(zq, zq), _sqdist(zp, zq)
    return [_mmd2_from_dists(dpp, dqq, dpq, s, off_diag) for s in sigmas]


def mmd2_unbiased(zp, zq, sigma: float):
    """Unbiased MMD^2 between two equal-size batches under a Gaussian kernel.

    Within-set sums exclude the diagonal and are scaled by 1/(B(B-1)); the cross
    sum is scaled by 2/B^2. The value is not clamped and can be negative.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return _mmd2_terms(_as_batch(zp), _as_batch(zq), [sigma])[0]


def sample_pairs(M: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """M source pairs (p, q), p < q, drawn uniformly over unordered pairs with
    replacement. Indices are 0-based."""
    if M < 2:
        raise ValueError("pair sampling needs at least two sources")
    p_idx, q_idx = np.triu_indices(M, k=1)
    picks = rng.integers(0, len(p_idx), size=M)
    return [(int(p_idx[i]), int(q_idx[i])) for i in picks]


def alignment_loss(latents, bandwidths: Bandwidths, pairs):
    """Sum of unbiased MMD^2 over the sampled pairs and all bandwidths.

    Summation order is fixed: pairs outer, bandwidths inner.
    """
    zs = [_as_batch(z) for z in latents]
    if len({tuple(z.shape) for z in zs}) != 1:
        raise ValueError("all latent batches must share (B, n_z)")
    total = zs[0].new_zeros(())
    for p, q in pairs:
        if p == q:
            raise ValueError(f"invalid pair ({p}, {q})")
        for term in _mmd2_terms(zs[p], zs[q], bandwidths.sigma):
            total = total + term
    return total
