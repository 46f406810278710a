"""Federated orchestration: local SGD, FedAvg, observation hooks, LDP noise."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .errors import ShapeError, ValidationError
from .numerics import backend
from .numerics.mlp import MlpModel
from .numerics.rng import RngStream, as_generator
from .numerics.tensor import ParameterVector, grad_l2_norm


@dataclass
class ClientState:
    id: int
    dataset: Dataset
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")
        if self.local_epochs < 0:
            raise ValidationError("local_epochs must be non-negative")


@dataclass
class UploadRecord:
    """What the server receives from one client in one round.

    ``grad_update`` is ``params_before - params_after`` (the accumulated
    gradient step, i.e. G_L up to the learning rate); under LDP both fields
    reflect the noised upload.
    """

    round: int
    client: int
    params: ParameterVector
    grad_update: ParameterVector
    grad_norm: float
    n_samples: int = 0

    def copy(self) -> "UploadRecord":
        return UploadRecord(self.round, self.client, self.params.copy(),
                            self.grad_update.copy(), self.grad_norm, self.n_samples)


@dataclass(frozen=True)
class LdpConfig:
    epsilon: float
    delta: float = 1e-5
    clip_norm: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValidationError("delta must lie in (0, 1)")
        if not self.clip_norm > 0:
            raise ValidationError("clip_norm must be positive")

    @property
    def sigma(self) -> float:
        """Per-coordinate std of the Gaussian mechanism."""
        return self.clip_norm * math.sqrt(2.0 * math.log(1.25 / self.delta)) / self.epsilon


def train_params(global_model: MlpModel, dataset: Dataset, epochs, batch_size, lr, rng,
                 kernels=None) -> np.ndarray:
    """Mini-batch SGD from the global parameters; returns the new flat values."""
    kern = kernels or backend
    gen = as_generator(rng)
    values = global_model.params.values.copy()
    if len(dataset) == 0:
        raise ValidationError("cannot train on an empty dataset")
    if dataset.dim != global_model.dims[0]:
        raise ShapeError("dataset width does not match the model input")
    dims = np.asarray(global_model.dims, dtype=np.intp)
    codes = np.asarray(global_model.act_codes, dtype=np.intp)
    y = dataset.labels.astype(np.intp)
    for _ in range(epochs):
        order = gen.permutation(len(dataset)).astype(np.intp)
        values, _ = kern.mlp_sgd_epoch(values, dims, codes, dataset.features, y, order,
                                       int(batch_size), float(lr))
    return values


def local_train(global_model: MlpModel, client: ClientState, rng, round_index=0) -> UploadRecord:
    """Run the client's local epochs and package the result as an upload."""
    if len(client.dataset) == 0:
        raise ValidationError(f"client {client.id} has an empty dataset")
    before = global_model.params
    after = train_params(global_model, client.dataset, client.local_epochs,
                         min(client.batch_size, len(client.dataset)), client.lr, rng)
    update = before.with_values(before.values - after)
    return UploadRecord(round_index, client.id, before.with_values(after), update,
                        grad_l2_norm(update), len(client.dataset))


def fedavg(uploads, sizes=None) -> ParameterVector:
    """Size-weighted mean of the uploaded parameters.

    Computed as an offset from the first upload, so identical uploads
    reproduce their common value exactly.
    """
    uploads = list(uploads)
    if not uploads:
        raise ValidationError("fedavg needs at least one upload")
    vecs = [u.params if isinstance(u, UploadRecord) else u for u in uploads]
    if sizes is None:
        sizes = [u.n_samples for u in uploads]
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.shape[0] != len(vecs):
        raise ValidationError("need one size per upload")
    if np.any(sizes < 0) or sizes.sum() <= 0:
        raise ValidationError("client sizes must be non-negative with a positive total")
    for v in vecs[1:]:
        vecs[0].check_same_layout(v)
    w = sizes / sizes.sum()
    stack = np.stack([v.values for v in vecs])
    base = stack[0]
    out = base + w[1:] @ (stack[1:] - base) if len(vecs) > 1 else base.copy()
    # rounding guard: the exact mean lies inside the coordinate-wise hull
    out = np.clip(out, stack.min(axis=0), stack.max(axis=0))
    return vecs[0].with_values(out)


def clip_update(update: ParameterVector, clip_norm) -> ParameterVector:
    norm = grad_l2_norm(update)
    if norm <= clip_norm:
        return update.copy()
    return update.with_values(update.values * (clip_norm / norm))


def apply_ldp(update: ParameterVector, cfg: LdpConfig, rng) -> ParameterVector:
    """Clip the update to ``clip_norm`` then add N(0, sigma^2) per coordinate."""
    clipped = clip_update(update, cfg.clip_norm)
    noise = as_generator(rng).normal(0.0, cfg.sigma, size=len(clipped))
    return clipped.with_values(clipped.values + noise)


def privatize_upload(record: UploadRecord, global_params: ParameterVector, cfg: LdpConfig,
                     rng) -> UploadRecord:
    noised = apply_ldp(record.grad_update, cfg, rng)
    params = global_params.with_values(global_params.values - noised.values)
    return UploadRecord(record.round, record.client, params, noised, grad_l2_norm(noised),
                        record.n_samples)


# -- federation --------------------------------------------------------------

@dataclass
class RoundEvent:
    """Copy of one round's server-side view handed to observers."""

    round: int
    global_before: ParameterVector
    uploads: list
    global_after: ParameterVector


@dataclass
class RoundRecord:
    round: int
    global_before: ParameterVector
    uploads: list
    global_after: ParameterVector
    global_class_accuracy: list = None
    local_accuracy: dict = field(default_factory=dict)


@dataclass
class FederationHistory:
    model: MlpModel  # architecture and initial parameters
    rounds: list = field(default_factory=list)

    def global_params(self, t) -> ParameterVector:
        """Parameters broadcast at the start of round ``t`` (1-based)."""
        return self.rounds[t - 1].global_before

    def broadcast_models(self):
        return [self.model.with_params(r.global_before) for r in self.rounds]

    def uploads_of(self, client_id):
        out = []
        for r in self.rounds:
            match = [u for u in r.uploads if u.client == client_id]
            if match:
                out.append(match[0])
        return out

    def final_params(self) -> ParameterVector:
        return self.rounds[-1].global_after if self.rounds else self.model.params

    def param_history(self):
        return [r.global_after.values for r in self.rounds]

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.rounds:
                for u in r.uploads:
                    fh.write(json.dumps({"type": "upload", "round": r.round, "client": u.client,
                                         "n_samples": u.n_samples, "grad_norm": u.grad_norm}) + "\n")
                rec = {"type": "round", "round": r.round}
                if r.global_class_accuracy is not None:
                    rec["global_accuracy"] = [float(a) for a in r.global_class_accuracy]
                if r.local_accuracy:
                    rec["local_accuracy"] = {str(k): float(v) for k, v in sorted(r.local_accuracy.items())}
                fh.write(json.dumps(rec) + "\n")


def read_history_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def run_federation(model: MlpModel, clients, rounds, seed=0, ldp: LdpConfig = None,
                   observers=(), eval_set: Dataset = None, ldp_clients=None) -> FederationHistory:
    """FedAvg over all clients for ``rounds`` rounds.

    Each client trains from the broadcast parameters with the stream
    ``RngStream(client.seed).child("train", t)``; LDP noise, when configured,
    is drawn from ``RngStream(seed).child("ldp", client.id, t)`` and touches
    only the upload (of every client, or only of the ids in ``ldp_clients``).
    Observers receive a :class:`RoundEvent` of copies after
    aggregation. With ``eval_set`` the global model's per-class accuracy and
    each client's retained local-model accuracy are recorded every round.
    """
    from .vclients import per_class_accuracy, accuracy

    clients = list(clients)
    if not clients:
        raise ValidationError("federation needs at least one client")
    history = FederationHistory(model.copy())
    current = model.params.copy()
    master = RngStream(seed)
    for t in range(1, rounds + 1):
        glob = model.with_params(current)
        uploads = []
        local_acc = {}
        for client in clients:
            rec = local_train(glob, client, RngStream(client.seed).child("train", t), t)
            if eval_set is not None:
                local_acc[client.id] = accuracy(model.with_params(rec.params), eval_set)
            if ldp is not None and (ldp_clients is None or client.id in ldp_clients):
                rec = privatize_upload(rec, current, ldp, master.child("ldp", client.id, t))
            uploads.append(rec)
        new = fedavg(uploads, [u.n_samples for u in uploads])
        record = RoundRecord(t, current, uploads, new)
        if eval_set is not None:
            record.global_class_accuracy = per_class_accuracy(model.with_params(new), eval_set).tolist()
            record.local_accuracy = local_acc
        history.rounds.append(record)
        for obs in observers:
            obs(RoundEvent(t, current.copy(), [u.copy() for u in uploads], new.copy()))
        current = new
    return history
