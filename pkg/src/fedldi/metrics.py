"""Distances between label distributions (natural log throughout)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError, ValidationError

KL_SMOOTHING = 1e-6


def _pair(p, q):
    p = np.asarray(getattr(p, "p", p), dtype=np.float64)
    q = np.asarray(getattr(q, "p", q), dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"distributions must be equal-length vectors, got {p.shape} and {q.shape}")
    return p, q


def wasserstein1d(p, q) -> float:
    """Earth mover's distance with classes on the integer line (unit spacing)."""
    p, q = _pair(p, q)
    return float(np.sum(np.abs(np.cumsum(p)[:-1] - np.cumsum(q)[:-1])))


def kl(p, q) -> float:
    p, q = _pair(p, q)
    support = p > 0
    if np.any(q[support] <= 0):
        raise ValidationError("KL undefined: q has zeros where p has mass")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def _kl_to_mixture(p, m):
    # m >= p / 2 wherever p > 0; a zero m only comes from denormal underflow,
    # where the term p * log(p / m) is itself below the smallest float
    mask = (p > 0) & (m > 0)
    return float(np.sum(p[mask] * np.log(p[mask] / m[mask])))


def js(p, q) -> float:
    p, q = _pair(p, q)
    m = 0.5 * (p + q)
    return 0.5 * _kl_to_mixture(p, m) + 0.5 * _kl_to_mixture(q, m)


def l1(p, q) -> float:
    p, q = _pair(p, q)
    return float(np.sum(np.abs(p - q)))


def smooth(p, lam=KL_SMOOTHING) -> np.ndarray:
    """Mix with the uniform distribution: (1 - lam) p + lam / C."""
    p = np.asarray(getattr(p, "p", p), dtype=np.float64)
    return (1.0 - lam) * p + lam / p.size


@dataclass(frozen=True)
class DistanceReport:
    wasserstein: float
    kl: float
    js: float
    l1: float

    def to_dict(self):
        return asdict(self)


def distance_report(true, predicted, lam=KL_SMOOTHING) -> DistanceReport:
    """All four distances; KL is taken between smoothed copies of both inputs."""
    t, p = _pair(true, predicted)
    return DistanceReport(
        wasserstein=wasserstein1d(t, p),
        kl=kl(smooth(t, lam), smooth(p, lam)),
        js=js(t, p),
        l1=l1(t, p),
    )
