"""Dataset-size estimation by matching update norms against reference clients.

A reference client of candidate size ``s`` is trained from the same
broadcast parameters the victim saw; its update norm grows with ``s``. The
search doubles ``s`` while the probe norm is below the tolerance band around
the victim's norm and halves it while above, stopping once the probe lands
inside the band.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import Dataset, partition_iid
from .errors import SearchFailure, ValidationError
from .flsim import LdpConfig, apply_ldp, train_params
from .numerics.mlp import MlpModel
from .numerics.rng import RngStream
from .numerics.tensor import grad_l2_norm


@dataclass
class SizeSearchConfig:
    tolerance: float = None  # absolute; None means tolerance_frac * target
    tolerance_frac: float = 0.05
    s_init: int = 500
    s_min: int = 50
    s_max: int = 8000
    probe_rounds: int = 3
    probe_repeats: int = 5
    max_iters: int = 30
    probe_delta: float = 0.1
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05

    def __post_init__(self):
        if not 0 < self.s_min <= self.s_init <= self.s_max:
            raise ValidationError("need 0 < s_min <= s_init <= s_max")
        if self.tolerance is not None and not self.tolerance > 0:
            raise ValidationError("tolerance must be positive")
        if not self.tolerance_frac > 0:
            raise ValidationError("tolerance_frac must be positive")
        if self.probe_rounds < 1 or self.probe_repeats < 1 or self.max_iters < 1:
            raise ValidationError("probe_rounds, probe_repeats and max_iters must be positive")


@dataclass
class SizeEstimate:
    size: int
    iterations: int
    oscillated: bool = False
    trace: list = field(default_factory=list)
    target_norm: float = 0.0
    tolerance: float = 0.0

    def trace_json(self) -> str:
        return json.dumps({"target_norm": self.target_norm, "tolerance": self.tolerance,
                           "size": self.size, "iterations": self.iterations,
                           "oscillated": self.oscillated, "trace": self.trace}, indent=1)


def victim_norm(uploads, rounds=3) -> float:
    """Mean update norm over the victim's first ``rounds`` uploads."""
    ups = sorted(uploads, key=lambda u: u.round)[:rounds]
    if not ups:
        raise ValidationError("no victim uploads")
    return float(np.mean([u.grad_norm for u in ups]))


def probe_norms(global_models, size, aux_pool: Dataset, cfg: SizeSearchConfig, rng,
                ldp: LdpConfig = None) -> np.ndarray:
    """Per-repeat mean update norm of IID reference clients of ``size`` samples.

    ``global_models`` is one model or a sequence of broadcast models; the
    first ``probe_rounds`` are used (a single model is reused each round).
    Each repeat draws a fresh IID dataset and averages over the rounds.
    """
    if isinstance(global_models, MlpModel):
        models = [global_models] * cfg.probe_rounds
    else:
        models = list(global_models)[:cfg.probe_rounds]
        if len(models) < cfg.probe_rounds:
            raise ValidationError(f"need {cfg.probe_rounds} broadcast models, got {len(models)}")
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    out = []
    for rep in range(cfg.probe_repeats):
        rep_stream = stream.child("probe", int(size), rep)
        ds, _ = partition_iid(aux_pool, int(size), cfg.probe_delta, rep_stream.child("data"))
        norms = []
        for t, glob in enumerate(models, start=1):
            values = train_params(glob, ds, cfg.local_epochs, min(cfg.batch_size, len(ds)), cfg.lr,
                                  rep_stream.child("train", t))
            update = glob.params.with_values(glob.params.values - values)
            if ldp is not None:
                update = apply_ldp(update, ldp, rep_stream.child("ldp", t))
            norms.append(grad_l2_norm(update))
        out.append(np.mean(norms))
    return np.array(out)


def probe_norm(global_models, size, aux_pool: Dataset, cfg: SizeSearchConfig, rng,
               ldp: LdpConfig = None) -> float:
    """Mean of :func:`probe_norms` over the repeats."""
    return float(np.mean(probe_norms(global_models, size, aux_pool, cfg, rng, ldp)))


def search_size(target_norm, probe, cfg: SizeSearchConfig) -> SizeEstimate:
    """Doubling/halving search against an arbitrary ``probe(size) -> norm``.

    Stops when the probe lies strictly inside ``(target - tol, target + tol)``.
    Revisiting a size means the search is bouncing between two neighbours
    that bracket the band; the geometric mean of that pair is returned and
    the result flagged. Hitting a bound while still outside the band raises
    :class:`SearchFailure`.
    """
    if not target_norm > 0:
        raise ValidationError("target norm must be positive")
    tol = cfg.tolerance if cfg.tolerance is not None else cfg.tolerance_frac * target_norm
    lo_band, hi_band = target_norm - tol, target_norm + tol
    s = int(cfg.s_init)
    trace = []
    seen = {}
    best = None
    for it in range(1, cfg.max_iters + 1):
        norm = float(probe(s))
        gap = abs(norm - target_norm)
        if best is None or gap < best[1]:
            best = (s, gap)
        if lo_band < norm < hi_band:
            trace.append({"iteration": it, "size": s, "norm": norm, "decision": "accept"})
            return SizeEstimate(s, it, False, trace, target_norm, tol)
        if norm <= lo_band:
            decision, nxt = "double", min(2 * s, cfg.s_max)
        else:
            decision, nxt = "halve", max(s // 2, cfg.s_min)
        trace.append({"iteration": it, "size": s, "norm": norm, "decision": decision})
        seen[s] = decision
        if nxt == s:
            raise SearchFailure(f"target norm {target_norm:.6g} unreachable within "
                                f"[{cfg.s_min}, {cfg.s_max}]", best[0], trace)
        if nxt in seen and seen[nxt] != decision:
            size = int(round(math.sqrt(s * nxt)))
            trace.append({"iteration": it, "size": size, "norm": None, "decision": "oscillation"})
            return SizeEstimate(size, it, True, trace, target_norm, tol)
        s = nxt
    raise SearchFailure(f"no convergence after {cfg.max_iters} iterations", best[0], trace)


def estimate_size(target_norm, aux_pool: Dataset, global_models, cfg: SizeSearchConfig, rng,
                  ldp: LdpConfig = None) -> SizeEstimate:
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    cache = {}

    def probe(size):
        if size not in cache:
            cache[size] = probe_norm(global_models, size, aux_pool, cfg, stream, ldp)
        return cache[size]

    return search_size(target_norm, probe, cfg)
