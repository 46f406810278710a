"""Virtual-client cluster: construction, shadow training, temporal records.

Virtual clients never upload anything. Each round they start from the
parameters the server broadcast, train locally on auxiliary data, and the
server records the per-class accuracy of the resulting model. Those E x C
records, paired with the known label distributions, are the attacker's
training set.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import (Dataset, DirichletRegime, IidRegime, LabelDistribution, QuantityRegime,
                       regime_to_dict, sample_auxiliary)
from .errors import ShapeError, ValidationError
from .flsim import LdpConfig, apply_ldp, train_params
from .numerics.mlp import MlpModel, forward
from .numerics.rng import RngStream


def per_class_accuracy(model: MlpModel, eval_set: Dataset) -> np.ndarray:
    """Recall of every class on ``eval_set``."""
    counts = eval_set.class_counts()
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValidationError(f"eval set has no samples of classes {missing}")
    pred = np.argmax(forward(model, eval_set.features), axis=1)
    hits = np.bincount(eval_set.labels[pred == eval_set.labels], minlength=eval_set.n_classes)
    return hits / counts


def accuracy(model: MlpModel, dataset: Dataset) -> float:
    pred = np.argmax(forward(model, dataset.features), axis=1)
    return float(np.mean(pred == dataset.labels))


@dataclass
class TemporalMatrix:
    """Per-round, per-class accuracy record (rounds x classes)."""

    n_classes: int
    rows: list = field(default_factory=list)

    def __post_init__(self):
        rows = [np.asarray(r, dtype=np.float64) for r in self.rows]
        self.rows = []
        for r in rows:
            self.append(r)

    def append(self, row):
        row = np.asarray(row, dtype=np.float64).reshape(-1)
        if row.size != self.n_classes:
            raise ShapeError(f"row has {row.size} entries, expected {self.n_classes}")
        if np.any(row < 0) or np.any(row > 1) or not np.all(np.isfinite(row)):
            raise ValidationError("accuracies must lie in [0, 1]")
        self.rows.append(row)

    @property
    def rounds(self) -> int:
        return len(self.rows)

    @property
    def values(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, self.n_classes))
        return np.stack(self.rows)

    @classmethod
    def from_array(cls, arr) -> "TemporalMatrix":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError("temporal matrix must be 2-D")
        return cls(arr.shape[1], list(arr))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round"] + [f"acc_{c}" for c in range(self.n_classes)])
            for t, row in enumerate(self.rows, start=1):
                w.writerow([t] + [repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path) -> "TemporalMatrix":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "round":
                raise ValidationError(f"{path}: missing round column")
            n = len(header) - 1
            rows = []
            for i, line in enumerate(reader, start=1):
                if int(line[0]) != i:
                    raise ValidationError(f"{path}: round {i} missing")
                rows.append([float(x) for x in line[1:]])
        return cls(n, rows)


@dataclass
class VirtualClientSpec:
    id: int
    size: int
    regime: object
    seed: int
    split: str = "train"
    true_distribution: LabelDistribution = None
    dataset: Dataset = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {"id": self.id, "size": self.size, "regime": regime_to_dict(self.regime),
                "seed": self.seed, "split": self.split,
                "true_distribution": self.true_distribution.to_list() if self.true_distribution else None}


def _regime_cycle(kind, delta, c_f, alpha):
    if kind == "iid":
        return [IidRegime(delta)]
    if kind == "quantity":
        return [QuantityRegime(int(c)) for c in c_f]
    if kind == "dirichlet":
        return [DirichletRegime(float(a)) for a in alpha]
    raise ValidationError(f"unknown regime kind {kind!r}")


def build_cluster(aux_pool: Dataset, est_size, train_counts: dict, test_counts: dict = None,
                  delta=0.1, c_f=(3,), alpha=(0.5, 1.0, 2.0), rng=0, jitter=(0.8, 1.2)):
    """Create and populate virtual clients.

    ``train_counts`` / ``test_counts`` map a regime kind (``iid``,
    ``quantity``, ``dirichlet``) to a number of clients; list-valued
    ``c_f`` and ``alpha`` are cycled within their regime. Sizes are drawn
    uniformly from ``jitter`` times ``est_size``. Ids are 0..N-1, training
    clients first.
    """
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    gen = stream.child("cluster").generator()
    C = aux_pool.n_classes
    specs = []
    for split, counts in (("train", train_counts), ("test", test_counts or {})):
        for kind in ("iid", "quantity", "dirichlet"):
            n = int(counts.get(kind, 0))
            if n < 0:
                raise ValidationError("client counts must be non-negative")
            cycle = _regime_cycle(kind, delta, c_f, alpha)
            for j in range(n):
                cid = len(specs)
                size = max(C, int(round(est_size * gen.uniform(*jitter))))
                seed = int(gen.integers(0, 2 ** 63))
                spec = VirtualClientSpec(cid, size, cycle[j % len(cycle)], seed, split)
                ds, dist = sample_auxiliary(aux_pool, spec)
                spec.dataset = ds
                spec.true_distribution = dist
                specs.append(spec)
    for kind in set(train_counts) | set(test_counts or {}):
        if kind not in ("iid", "quantity", "dirichlet"):
            raise ValidationError(f"unknown regime kind {kind!r}")
    return specs


class ClusterRecorder:
    """Round observer that shadow-trains every virtual client.

    Call it with a ``RoundEvent`` (live federation) or feed rounds from a
    recorded history; it only reads the broadcast parameters.
    """

    def __init__(self, cluster, model: MlpModel, eval_set: Dataset, train_cfg: dict,
                 ldp: LdpConfig = None):
        self.cluster = list(cluster)
        self.model = model
        self.eval_set = eval_set
        self.epochs = int(train_cfg.get("local_epochs", 1))
        self.batch_size = int(train_cfg.get("batch_size", 32))
        self.lr = float(train_cfg.get("lr", 0.05))
        self.ldp = ldp
        self.matrices = {s.id: TemporalMatrix(eval_set.n_classes) for s in self.cluster}
        self.rounds_seen = 0

    def step(self, t, broadcast):
        if t != self.rounds_seen + 1:
            raise ValidationError(f"expected round {self.rounds_seen + 1}, got {t}")
        glob = self.model.with_params(broadcast)
        for spec in self.cluster:
            ds = spec.dataset
            values = train_params(glob, ds, self.epochs, min(self.batch_size, len(ds)), self.lr,
                                  RngStream(spec.seed).child("train", t))
            if self.ldp is not None:
                update = broadcast.with_values(broadcast.values - values)
                noised = apply_ldp(update, self.ldp, RngStream(spec.seed).child("ldp", t))
                values = broadcast.values - noised.values
            acc = per_class_accuracy(self.model.with_params(broadcast.with_values(values)), self.eval_set)
            self.matrices[spec.id].append(acc)
        self.rounds_seen = t

    def __call__(self, event):
        self.step(event.round, event.global_before)


def run_cluster(cluster, history, eval_set: Dataset, rounds, train_cfg: dict, ldp=None):
    """Shadow-train the cluster over the first ``rounds`` rounds of ``history``.

    Equivalent to attaching a :class:`ClusterRecorder` to the live
    federation, since virtual clients read only the broadcast parameters.
    Returns ``{id: TemporalMatrix}``.
    """
    if len(history.rounds) < rounds:
        raise ValidationError(f"history has {len(history.rounds)} rounds, need {rounds}")
    rec = ClusterRecorder(cluster, history.model, eval_set, train_cfg, ldp)
    for t in range(1, rounds + 1):
        rec.step(t, history.global_params(t))
    return rec.matrices


def record_victim(uploads, eval_set: Dataset, model: MlpModel, rounds=None) -> TemporalMatrix:
    """Per-class accuracy of the model in each of the victim's uploads."""
    uploads = sorted(uploads, key=lambda u: u.round)
    expected = rounds if rounds is not None else len(uploads)
    got = [u.round for u in uploads]
    if got[:expected] != list(range(1, expected + 1)) or len(got) < expected:
        raise ValidationError(f"victim uploads must cover rounds 1..{expected}, got {got}")
    tm = TemporalMatrix(eval_set.n_classes)
    for u in uploads[:expected]:
        tm.append(per_class_accuracy(model.with_params(u.params), eval_set))
    return tm


def save_cluster(out_dir, cluster, matrices):
    """``temporal/<id>.csv`` per client plus ``labels.json`` (id -> distribution)."""
    out = Path(out_dir)
    (out / "temporal").mkdir(parents=True, exist_ok=True)
    labels = {}
    for spec in cluster:
        matrices[spec.id].to_csv(out / "temporal" / f"{spec.id}.csv")
        labels[str(spec.id)] = spec.true_distribution.to_list()
    (out / "labels.json").write_text(json.dumps(labels, indent=1, sort_keys=True) + "\n")
    (out / "cluster.json").write_text(json.dumps([s.to_dict() for s in cluster], indent=1) + "\n")


def load_cluster_records(out_dir):
    """Read back ``{id: (TemporalMatrix, LabelDistribution)}``."""
    out = Path(out_dir)
    labels = json.loads((out / "labels.json").read_text())
    return {int(k): (TemporalMatrix.from_csv(out / "temporal" / f"{k}.csv"), LabelDistribution(v))
            for k, v in labels.items()}
