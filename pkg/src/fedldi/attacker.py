"""LSTM with temporal attention mapping an E x C accuracy record to a label distribution.

Forward pass for one record R (rows r_1..r_E):

    h_t, c_t = LSTM(h_{t-1}, c_{t-1}, r_t)          from a zero state
    e_t      = v . tanh(W_h h_t + b_h)
    alpha    = softmax(e)
    context  = sum_t alpha_t h_t
    output   = softmax(context @ W_out + b_out)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import LabelDistribution
from .errors import FormatError, ShapeError, ValidationError
from .numerics.lstm import init_lstm_blocks, lstm_backward, lstm_forward, lstm_layout
from .numerics.mlp import log_softmax, softmax
from .numerics.optim import AdamState, adam_step
from .numerics.rng import RngStream
from .numerics.tensor import ParameterVector

CKPT_MAGIC = b"FLDIATK1"


def attacker_layout(n_classes, hidden):
    return lstm_layout(n_classes, hidden, "lstm_") + (
        ("att_W", (hidden, hidden)),
        ("att_b", (hidden,)),
        ("att_v", (hidden,)),
        ("out_W", (hidden, n_classes)),
        ("out_b", (n_classes,)),
    )


@dataclass
class AttackerModel:
    n_classes: int
    hidden: int
    params: ParameterVector = None

    def __post_init__(self):
        layout = attacker_layout(self.n_classes, self.hidden)
        if self.params is None:
            self.params = ParameterVector.zeros(layout)
        elif self.params.layout != layout:
            raise ShapeError("attacker params do not match widths")

    def blocks(self):
        return self.params.unflatten()

    def copy(self):
        return AttackerModel(self.n_classes, self.hidden, self.params.copy())


def init_attacker(n_classes, hidden=64, rng=0) -> AttackerModel:
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    gen = stream.child("attacker-init").generator()
    model = AttackerModel(n_classes, hidden)
    blk = model.blocks()
    for name, arr in init_lstm_blocks(n_classes, hidden, gen).items():
        blk["lstm_" + name][...] = arr
    k = 1.0 / np.sqrt(hidden)
    blk["att_W"][...] = gen.uniform(-k, k, (hidden, hidden))
    blk["att_b"][...] = gen.uniform(-k, k, hidden)
    blk["att_v"][...] = gen.uniform(-k, k, hidden)
    blk["out_W"][...] = gen.uniform(-k, k, (hidden, n_classes))
    return model


def attend(hidden_states, W, b, v):
    """Attention pooling of hidden states ``(E, H)`` or ``(B, E, H)``.

    Returns ``(context, weights)``.
    """
    Hs = np.asarray(hidden_states, dtype=np.float64)
    scores = np.tanh(Hs @ np.asarray(W).T + b) @ v
    weights = softmax(scores, axis=-1)
    context = np.einsum("...t,...th->...h", weights, Hs)
    return context, weights


def _lstm_blocks(blk):
    return {"Wx": blk["lstm_Wx"], "Wh": blk["lstm_Wh"], "b": blk["lstm_b"]}


def _as_batch(model, R):
    X = np.asarray(getattr(R, "values", R), dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != model.n_classes:
        raise ShapeError(f"expected records with {model.n_classes} columns, got shape {X.shape}")
    if X.shape[1] < 1:
        raise ShapeError("records need at least one round")
    return X


def forward_logits(model: AttackerModel, X, kernels=None):
    blk = model.blocks()
    Hs, cache = lstm_forward(X, _lstm_blocks(blk), kernels)
    U = np.tanh(Hs @ blk["att_W"].T + blk["att_b"])
    scores = U @ blk["att_v"]
    alpha = softmax(scores, axis=1)
    ctx = (alpha[:, None, :] @ Hs)[:, 0, :]
    logits = ctx @ blk["out_W"] + blk["out_b"]
    return logits, (cache, Hs, U, alpha, ctx)


def attacker_forward(model: AttackerModel, R) -> LabelDistribution:
    X = _as_batch(model, R)
    if X.shape[0] != 1:
        raise ShapeError("attacker_forward takes a single record; use predict_batch")
    return LabelDistribution(predict_batch(model, X)[0])


def predict_batch(model: AttackerModel, X, kernels=None) -> np.ndarray:
    logits, _ = forward_logits(model, _as_batch(model, X), kernels)
    p = softmax(logits, axis=1)
    return p / p.sum(axis=1, keepdims=True)


def loss_and_grad(model: AttackerModel, X, T, loss="kl", kernels=None):
    """Batch-mean loss and its gradient w.r.t. every attacker parameter.

    ``loss="kl"`` is KL(target || predicted); ``"mse"`` is the squared error
    summed over classes.
    """
    X = _as_batch(model, X)
    T = np.asarray(T, dtype=np.float64).reshape(X.shape[0], model.n_classes)
    B = X.shape[0]
    blk = model.blocks()
    logits, (cache, Hs, U, alpha, ctx) = forward_logits(model, X, kernels)
    logp = log_softmax(logits, axis=1)
    P = np.exp(logp)
    if loss == "kl":
        tlogt = np.where(T > 0, T * np.log(np.where(T > 0, T, 1.0)), 0.0)
        value = float(np.sum(tlogt - T * logp) / B)
        dlogits = (P * T.sum(axis=1, keepdims=True) - T) / B
    elif loss == "mse":
        diff = P - T
        value = float(np.sum(diff * diff) / B)
        dP = 2.0 * diff / B
        dlogits = P * (dP - np.sum(P * dP, axis=1, keepdims=True))
    else:
        raise ValidationError(f"unknown loss {loss!r}")
    g = {}
    g["out_W"] = ctx.T @ dlogits
    g["out_b"] = dlogits.sum(axis=0)
    dctx = dlogits @ blk["out_W"].T
    dalpha = (Hs @ dctx[:, :, None])[:, :, 0]
    dHs = alpha[:, :, None] * dctx[:, None, :]
    dscores = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    H = model.hidden
    g["att_v"] = dscores.reshape(-1) @ U.reshape(-1, H)
    dZ = dscores[:, :, None] * blk["att_v"] * (1.0 - U * U)
    g["att_W"] = dZ.reshape(-1, H).T @ Hs.reshape(-1, H)
    g["att_b"] = dZ.sum(axis=(0, 1))
    dHs = dHs + dZ @ blk["att_W"]
    lg, _ = lstm_backward(cache, dHs)
    for name, arr in lg.items():
        g["lstm_" + name] = arr
    return value, ParameterVector.flatten(g, model.params.layout)


def evaluate_loss(model: AttackerModel, X, T, loss="kl") -> float:
    """Batch-mean loss without the backward pass."""
    T = np.asarray(T, dtype=np.float64)
    logits, _ = forward_logits(model, _as_batch(model, X))
    logp = log_softmax(logits, axis=1)
    if loss == "kl":
        tlogt = np.where(T > 0, T * np.log(np.where(T > 0, T, 1.0)), 0.0)
        return float(np.sum(tlogt - T * logp) / T.shape[0])
    diff = np.exp(logp) - T
    return float(np.sum(diff * diff) / T.shape[0])


@dataclass
class AttackTrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 32
    loss: str = "kl"
    val_fraction: float = 0.2
    seed: int = 0
    hidden: int = 64
    select: str = "best_val"
    weight_decay: float = 0.0
    input_noise: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if not 0 < self.val_fraction <= 0.5:
            raise ValidationError("val_fraction must lie in (0, 0.5]")
        if self.loss not in ("kl", "mse"):
            raise ValidationError(f"unknown loss {self.loss!r}")
        if self.select not in ("best_val", "last"):
            raise ValidationError(f"unknown selection rule {self.select!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValidationError("epochs, batch_size and hidden must be positive")


@dataclass
class TrainResult:
    model: AttackerModel
    curve: list = field(default_factory=list)
    best_epoch: int = 0
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)


def _stack_pairs(pairs):
    if not pairs:
        raise ValidationError("no training pairs")
    mats = [np.asarray(getattr(m, "values", m), dtype=np.float64) for m, _ in pairs]
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise ShapeError("all temporal matrices must share one shape")
    dists = [np.asarray(getattr(d, "p", d), dtype=np.float64) for _, d in pairs]
    if any(d.shape != (shape[1],) for d in dists):
        raise ShapeError("distribution width does not match the matrices")
    return np.stack(mats), np.stack(dists)


def train_attacker(pairs, cfg: AttackTrainConfig = None) -> TrainResult:
    """Fit the attacker on ``(TemporalMatrix, LabelDistribution)`` pairs with Adam.

    A ``val_fraction`` share of the pairs is held out; with
    ``select="best_val"`` the parameters from the epoch with the lowest
    validation loss are returned. Deterministic given ``cfg.seed``.
    """
    cfg = cfg or AttackTrainConfig()
    X, T = _stack_pairs(pairs)
    n, _, C = X.shape
    if n < 2 * C:
        raise ValidationError(f"need at least 2C={2 * C} training pairs, got {n}")
    stream = RngStream(cfg.seed)
    perm = stream.child("split").generator().permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    model = init_attacker(C, cfg.hidden, stream)
    state = AdamState.zeros_like(model.params)
    shuffle = stream.child("shuffle").generator()
    jitter = stream.child("jitter").generator()
    best = (np.inf, model.params.copy(), 0)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        order = tr_idx[shuffle.permutation(tr_idx.size)]
        seen = 0.0
        for s in range(0, order.size, cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            xb = X[b]
            if cfg.input_noise > 0:
                xb = xb + cfg.input_noise * jitter.normal(size=xb.shape)
            value, grad = loss_and_grad(model, xb, T[b], cfg.loss)
            seen += value * b.size
            params, state = adam_step(state, model.params, grad, cfg.lr)
            if cfg.weight_decay > 0:
                params = params.with_values(params.values * (1.0 - cfg.lr * cfg.weight_decay))
            model = AttackerModel(C, cfg.hidden, params)
        train_loss = seen / tr_idx.size  # running mean over the epoch's batches
        val_loss = evaluate_loss(model, X[val_idx], T[val_idx], cfg.loss)
        if val_loss < best[0]:
            best = (val_loss, model.params.copy(), epoch)
        curve.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                      "best_val_loss": best[0]})
    final = model if cfg.select == "last" else AttackerModel(C, cfg.hidden, best[1])
    best_epoch = cfg.epochs if cfg.select == "last" else best[2]
    return TrainResult(final, curve, best_epoch, tr_idx.tolist(), val_idx.tolist())


def infer_distribution(model: AttackerModel, victim_matrix) -> LabelDistribution:
    X = _as_batch(model, victim_matrix)
    if X.shape[0] != 1:
        raise ShapeError("expected one victim record")
    return attacker_forward(model, X[0])


def save_checkpoint(model: AttackerModel, path, extra=None):
    """Header JSON (widths, layout, layout hash) then little-endian float64 params."""
    header = {
        "n_classes": model.n_classes,
        "hidden": model.hidden,
        "layout": [[n, list(s)] for n, s in model.params.layout],
        "layout_hash": model.params.layout_hash(),
        "n_params": len(model.params),
    }
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode()
    data = model.params.values.astype("<f8").tobytes()
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(hb)) + hb + data)


def load_checkpoint(path) -> AttackerModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError("not an attacker checkpoint")
    if len(raw) < 12:
        raise FormatError("truncated checkpoint header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from None
    model = AttackerModel(header["n_classes"], header["hidden"])
    if model.params.layout_hash() != header["layout_hash"]:
        raise FormatError("checkpoint layout hash does not match its widths")
    if [[n, list(s)] for n, s in model.params.layout] != header["layout"]:
        raise FormatError("checkpoint layout does not match its widths")
    data = raw[12 + hlen:]
    if len(data) != 8 * len(model.params):
        raise FormatError(f"expected {len(model.params)} parameters, found {len(data) // 8}")
    model.params = model.params.with_values(np.frombuffer(data, dtype="<f8").astype(np.float64))
    return model


def config_to_dict(cfg: AttackTrainConfig):
    return asdict(cfg)
