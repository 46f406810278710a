"""End-to-end experiment: federation, size estimate, cluster, attacker, evaluation.

Every random draw descends from the master seed through named child streams,
so a config plus seed fixes the whole run. Each stage writes its artifacts
as soon as it finishes; a failing stage raises :class:`StageError` tagged
with its name and leaves earlier artifacts in place.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..attacker import (AttackTrainConfig, config_to_dict as attack_cfg_dict, infer_distribution,
                        predict_batch, save_checkpoint, train_attacker)
from ..datasets import (Dataset, LabelDistribution, balanced_split, gen_synthetic, load_idx,
                        partition, partition_manifest, write_manifest)
from ..errors import FedLdiError, SearchFailure, StageError, ValidationError
from ..flsim import ClientState, run_federation
from ..metrics import distance_report
from ..numerics import backend
from ..numerics.mlp import init_mlp
from ..numerics.rng import RngStream
from ..sizeest import SizeSearchConfig, estimate_size, victim_norm
from ..vclients import build_cluster, record_victim, run_cluster, save_cluster
from .baselines import baseline_lastlayer, baseline_uniform
from .config import ENV_OUTPUT_ROOT, FLRunConfig, config_hash, config_to_dict, replace, write_config

STAGES = ("data", "federation", "size", "cluster", "attacker", "inference", "evaluation")
VICTIM_ID = 0
ACCURACY_WINDOW = 5  # victim main-task accuracy averages this many final rounds


@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    metadata: dict
    federation: dict = None
    size_estimate: dict = None
    cluster: dict = None
    attacker: dict = None
    victim: dict = None
    heldout: dict = None

    def to_dict(self):
        out = {"config": self.config, "config_hash": self.config_hash, "metadata": self.metadata}
        for key in ("federation", "size_estimate", "cluster", "attacker", "victim", "heldout"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: data.get(k) for k in
                      ("config", "config_hash", "metadata", "federation", "size_estimate",
                       "cluster", "attacker", "victim", "heldout")})

    @classmethod
    def read(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunState:
    """Intermediate objects handed from stage to stage."""

    cfg: FLRunConfig
    out: Path
    master: RngStream
    eval_set: Dataset = None
    fed_pool: Dataset = None
    aux_pool: Dataset = None
    model: object = None
    clients: list = field(default_factory=list)
    history: object = None
    estimate: object = None
    cluster: list = None
    matrices: dict = None
    result: object = None
    victim_matrix: object = None
    prediction: LabelDistribution = None


def default_output_dir(cfg: FLRunConfig) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = Path(os.environ.get(ENV_OUTPUT_ROOT, "runs"))
    return root / config_hash(cfg)[:12]


def derived_seed(master: RngStream, *labels) -> int:
    return int(master.child(*labels).generator().integers(0, 2 ** 63))


def _ldp(cfg):
    return cfg.ldp.build() if cfg.ldp is not None else None


def _mirror_ldp(cfg):
    return cfg.ldp.build() if cfg.ldp is not None and cfg.ldp.mirror else None


def _train_cfg(cfg):
    lt = cfg.local_train
    return {"local_epochs": lt.local_epochs, "batch_size": lt.batch_size, "lr": lt.lr}


def _split_fraction(pool: Dataset, fraction, rng):
    """Per-class split of ``pool``: ``fraction`` of each class to the first part."""
    gen = rng.generator()
    first = []
    for idx in pool.class_indices():
        k = int(round(fraction * idx.size))
        first.append(gen.choice(idx, size=k, replace=False))
    first = np.sort(np.concatenate(first))
    mask = np.ones(len(pool), dtype=bool)
    mask[first] = False
    return pool.subset(first), pool.subset(np.flatnonzero(mask))


def _remove(pool: Dataset, taken: Dataset) -> Dataset:
    keep = ~np.isin(pool.index, taken.index)
    return pool.subset(np.flatnonzero(keep))


# -- stages --------------------------------------------------------------------

def stage_data(st: RunState):
    cfg = st.cfg
    ds_cfg = cfg.dataset
    data_stream = RngStream(ds_cfg.seed) if ds_cfg.seed is not None else st.master.child("data")
    if ds_cfg.source == "synthetic":
        pool = gen_synthetic(ds_cfg.n_classes, ds_cfg.dim, ds_cfg.per_class, ds_cfg.sep,
                             data_stream.child("pool"), noise=ds_cfg.noise)
    else:
        pool = load_idx(ds_cfg.images, ds_cfg.labels, ds_cfg.n_classes)
    pool = pool.subset(np.arange(len(pool)))  # pin pool-relative indices
    st.eval_set, rest = balanced_split(pool, cfg.server.eval_per_class,
                                       st.master.child("split", "eval"))
    st.aux_pool, st.fed_pool = _split_fraction(rest, cfg.server.aux_fraction,
                                               st.master.child("split", "aux"))


def stage_federation(st: RunState):
    cfg = st.cfg
    C = st.eval_set.n_classes
    dims = [st.eval_set.dim] + list(cfg.model.hidden) + [C]
    acts = [cfg.model.activation] * len(cfg.model.hidden) + ["identity"]
    st.model = init_mlp(dims, acts, st.master.child("model"))
    lt = cfg.local_train
    remaining = st.fed_pool
    datasets = []
    specs = [(cfg.victim.size, cfg.victim.regime.build(), cfg.victim.seed)]
    specs += [(cfg.clients.size, cfg.clients.regime.build(), None)] * (cfg.clients.count - 1)
    for cid, (size, regime, seed) in enumerate(specs):
        stream = RngStream(seed) if seed is not None else st.master.child("client-data", cid)
        ds, _ = partition(remaining, size, regime, stream)
        remaining = _remove(remaining, ds)
        datasets.append(ds)
        st.clients.append(ClientState(cid, ds, lt.local_epochs, min(lt.batch_size, size), lt.lr,
                                      derived_seed(st.master, "client-train", cid)))
    ldp = _ldp(cfg)
    ldp_clients = {VICTIM_ID} if cfg.ldp is not None and cfg.ldp.apply_to == "victim" else None
    st.history = run_federation(st.model, st.clients, cfg.rounds, derived_seed(st.master, "ldp"),
                                ldp, eval_set=st.eval_set, ldp_clients=ldp_clients)
    st.out.mkdir(parents=True, exist_ok=True)
    st.history.to_jsonl(st.out / "history.jsonl")
    write_manifest(st.out / "victim_manifest.json",
                   partition_manifest(specs[0][1], datasets[:1]))


def stage_size(st: RunState):
    cfg = st.cfg
    ss = cfg.size_search
    if not ss.enabled:
        st.estimate = None
        return
    scfg = SizeSearchConfig(tolerance=ss.tolerance, tolerance_frac=ss.tolerance_frac,
                            s_init=ss.s_init, s_min=ss.s_min, s_max=ss.s_max,
                            probe_rounds=ss.probe_rounds, probe_repeats=ss.probe_repeats,
                            max_iters=ss.max_iters, local_epochs=cfg.local_train.local_epochs,
                            batch_size=cfg.local_train.batch_size, lr=cfg.local_train.lr)
    target = victim_norm(st.history.uploads_of(VICTIM_ID), ss.probe_rounds)
    models = st.history.broadcast_models()[:ss.probe_rounds]
    try:
        st.estimate = estimate_size(target, st.aux_pool, models, scfg, st.master.child("size"),
                                    _mirror_ldp(cfg))
    except SearchFailure as exc:
        (st.out / "search_trace.json").write_text(
            json.dumps({"target_norm": target, "failed": True, "best": exc.best,
                        "trace": exc.trace}, indent=1) + "\n")
        raise
    (st.out / "search_trace.json").write_text(st.estimate.trace_json() + "\n")


def cluster_size(st: RunState) -> int:
    if st.estimate is not None:
        return st.estimate.size
    return st.cfg.victim.size


def stage_cluster(st: RunState):
    cfg = st.cfg
    cc = cfg.cluster
    st.cluster = build_cluster(st.aux_pool, cluster_size(st), cc.train, cc.test, cc.delta,
                               tuple(cc.c_f), tuple(cc.alpha), st.master.child("cluster"),
                               tuple(cc.jitter))
    st.matrices = run_cluster(st.cluster, st.history, st.eval_set, cfg.rounds, _train_cfg(cfg),
                              _mirror_ldp(cfg))
    save_cluster(st.out, st.cluster, st.matrices)


def attack_config(cfg: FLRunConfig, master: RngStream) -> AttackTrainConfig:
    a = cfg.attacker
    seed = a.seed if a.seed is not None else derived_seed(master, "attacker")
    return AttackTrainConfig(epochs=a.epochs, lr=a.lr, batch_size=a.batch_size, loss=a.loss,
                             val_fraction=a.val_fraction, seed=seed, hidden=a.hidden,
                             select=a.select, weight_decay=a.weight_decay,
                             input_noise=a.input_noise)


def stage_attacker(st: RunState):
    acfg = attack_config(st.cfg, st.master)
    pairs = [(st.matrices[s.id], s.true_distribution) for s in st.cluster if s.split == "train"]
    st.result = train_attacker(pairs, acfg)
    save_checkpoint(st.result.model, st.out / "attacker.ckpt",
                    extra={"config": attack_cfg_dict(acfg), "best_epoch": st.result.best_epoch})


def stage_inference(st: RunState):
    st.victim_matrix = record_victim(st.history.uploads_of(VICTIM_ID), st.eval_set, st.model,
                                     st.cfg.rounds)
    st.victim_matrix.to_csv(st.out / "victim_temporal.csv")
    st.prediction = infer_distribution(st.result.model, st.victim_matrix)


# -- report sections -------------------------------------------------------------

def _dist_entry(true, pred):
    return {"predicted": [float(x) for x in pred], "distances": distance_report(true, pred).to_dict()}


def federation_section(st: RunState) -> dict:
    rounds = st.history.rounds
    window = rounds[-ACCURACY_WINDOW:]
    victim_acc = float(np.mean([r.local_accuracy[VICTIM_ID] for r in window]))
    final_global = rounds[-1].global_class_accuracy
    return {
        "rounds": len(rounds),
        "clients": len(st.clients),
        "victim_size": len(st.clients[VICTIM_ID].dataset),
        "victim_accuracy": victim_acc,
        "victim_accuracy_by_round": [float(r.local_accuracy[VICTIM_ID]) for r in rounds],
        "global_accuracy": float(np.mean(final_global)),
        "global_accuracy_by_round": [float(np.mean(r.global_class_accuracy)) for r in rounds],
        "victim_upload_norms": [float(u.grad_norm) for u in st.history.uploads_of(VICTIM_ID)],
        "final_params_sha256": _params_digest(st.history.final_params().values),
    }


def _params_digest(values):
    return hashlib.sha256(np.ascontiguousarray(values, dtype="<f8").tobytes()).hexdigest()


def size_section(st: RunState) -> dict:
    if st.estimate is None:
        return {"enabled": False, "size": cluster_size(st), "true_size": st.cfg.victim.size,
                "aux_pool_size": len(st.aux_pool)}
    e = st.estimate
    return {"enabled": True, "size": e.size, "iterations": e.iterations,
            "oscillated": e.oscillated, "target_norm": e.target_norm, "tolerance": e.tolerance,
            "true_size": st.cfg.victim.size, "aux_pool_size": len(st.aux_pool), "trace": e.trace}


def cluster_section(st: RunState) -> dict:
    def summary(split):
        specs = [s for s in st.cluster if s.split == split]
        kinds = {}
        for s in specs:
            kinds[s.regime.kind] = kinds.get(s.regime.kind, 0) + 1
        return {"count": len(specs), "regimes": dict(sorted(kinds.items())),
                "sizes": [s.size for s in specs]}
    return {"train": summary("train"), "test": summary("test")}


def attacker_section(st: RunState) -> dict:
    r = st.result
    return {"best_epoch": r.best_epoch, "curve": r.curve, "train_ids": r.train_ids,
            "val_ids": r.val_ids, "config": attack_cfg_dict(attack_config(st.cfg, st.master))}


def victim_section(st: RunState) -> dict:
    true = LabelDistribution.from_counts(st.clients[VICTIM_ID].dataset.class_counts()).p
    pred = st.prediction.p
    C = true.size
    uniform = baseline_uniform(C).p
    lastlayer = baseline_lastlayer(st.history.uploads_of(VICTIM_ID), st.history).p
    return {
        "true": [float(x) for x in true],
        "predicted": [float(x) for x in pred],
        "distances": distance_report(true, pred).to_dict(),
        "baselines": {"uniform": _dist_entry(true, uniform),
                      "lastlayer": _dist_entry(true, lastlayer)},
    }


def _mean_distances(entries):
    keys = ("wasserstein", "kl", "js", "l1")
    return {k: float(np.mean([e[k] for e in entries])) for k in keys}


def heldout_section(st: RunState) -> dict:
    specs = [s for s in st.cluster if s.split == "test"]
    if not specs:
        return {"count": 0}
    X = np.stack([st.matrices[s.id].values for s in specs])
    preds = predict_batch(st.result.model, X)
    C = X.shape[2]
    uniform = baseline_uniform(C).p
    clients, by_kind = [], {}
    for s, pred in zip(specs, preds):
        true = s.true_distribution.p
        support = true > 0
        entry = {
            "id": s.id,
            "regime": s.regime.kind,
            "true": [float(x) for x in true],
            "predicted": [float(x) for x in pred],
            "distances": distance_report(true, pred).to_dict(),
            "uniform_distances": distance_report(true, uniform).to_dict(),
            "argmax_match": bool(np.argmax(pred) == np.argmax(true)),
            "support_mass": float(pred[support].sum()),
        }
        clients.append(entry)
        by_kind.setdefault(s.regime.kind, []).append(entry)

    def summarize(entries):
        return {
            "count": len(entries),
            "mean": _mean_distances([e["distances"] for e in entries]),
            "uniform_mean": _mean_distances([e["uniform_distances"] for e in entries]),
            "argmax_accuracy": float(np.mean([e["argmax_match"] for e in entries])),
            "support_mass": float(np.mean([e["support_mass"] for e in entries])),
        }

    out = summarize(clients)
    out["by_regime"] = {k: summarize(v) for k, v in sorted(by_kind.items())}
    out["clients"] = clients
    return out


# -- driver -------------------------------------------------------------------------

_STAGE_FUNCS = {
    "data": stage_data,
    "federation": stage_federation,
    "size": stage_size,
    "cluster": stage_cluster,
    "attacker": stage_attacker,
    "inference": stage_inference,
    "evaluation": lambda st: None,
}


def run_experiment(cfg: FLRunConfig, out_dir=None, stop_after="evaluation",
                   skip=()) -> ExperimentReport:
    """Run the pipeline up to ``stop_after`` and write ``report.json``.

    ``skip`` may contain ``"cluster"`` to stop after the federation-side
    stages without touching the cluster (the federation results are the
    same either way).
    """
    if stop_after not in STAGES:
        raise ValidationError(f"unknown stage {stop_after!r}")
    started = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else default_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.json")
    st = RunState(cfg, out, RngStream(cfg.seed))
    report = ExperimentReport(
        config=config_to_dict(cfg),
        config_hash=config_hash(cfg),
        metadata={"seed": cfg.seed, "backend": backend.NAME, "version": __version__,
                  "stages": []},
    )
    last = STAGES.index(stop_after)
    if "cluster" in skip:
        last = min(last, STAGES.index("size"))
    try:
        for name in STAGES[:last + 1]:
            try:
                _STAGE_FUNCS[name](st)
            except FedLdiError as exc:
                raise StageError(name, exc) from exc
            except (ValueError, OSError, ArithmeticError) as exc:
                raise StageError(name, exc) from exc
            report.metadata["stages"].append(name)
            if name == "federation":
                report.federation = federation_section(st)
            elif name == "size":
                report.size_estimate = size_section(st)
            elif name == "cluster":
                report.cluster = cluster_section(st)
            elif name == "attacker":
                report.attacker = attacker_section(st)
            elif name == "inference":
                report.victim = victim_section(st)
            elif name == "evaluation":
                report.heldout = heldout_section(st)
    finally:
        report.metadata["wall_time_s"] = time.perf_counter() - started
        report.write(out / "report.json")
    return report


def run_dp_sweep(cfg: FLRunConfig, epsilons=None, out_dir=None):
    """One full experiment per privacy budget; returns the reports in order."""
    from .plotdata import emit_plotdata

    epsilons = list(epsilons if epsilons is not None else cfg.dp_sweep)
    out = Path(out_dir) if out_dir is not None else default_output_dir(cfg)
    reports = []
    for eps in epsilons:
        if cfg.ldp is None:
            sub = replace(cfg, ldp={"epsilon": float(eps)})
        else:
            sub = replace(cfg, **{"ldp.epsilon": float(eps)})
        reports.append(run_experiment(sub, out / f"eps_{eps:g}"))
    emit_plotdata(reports, out)
    summary = [{"epsilon": r.config["ldp"]["epsilon"],
                "victim_accuracy": r.federation["victim_accuracy"],
                "victim_l1": r.victim["distances"]["l1"],
                "uniform_l1": r.victim["baselines"]["uniform"]["distances"]["l1"],
                "heldout_l1": r.heldout["mean"]["l1"] if r.heldout.get("count") else None}
               for r in reports]
    (out / "sweep.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return reports
