"""Test-set task accuracy, representation extraction and the source-ID probe."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler
from sklearn.svm import LinearSVC

from .model import MultiSourceNet, encode_source
from .signalio import SCHEMA_VERSION, DataError, EpochStore
from .train import TrainConfig, load_run

REPORT_ORDER = ("local", "global", "dann", "dape_noalign", "adape_noalign", "dape", "adape")


@dataclass
class ProbeConfig:
    train_fraction: float = 0.8
    C: float = 1.0
    tol: float = 1e-6
    max_iter: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass
class LatentTable:
    z: np.ndarray  # (n, n_z)
    source: np.ndarray  # (n,) 0-based
    label: np.ndarray  # (n,)


@dataclass
class MetricsReport:
    variant: str
    per_source: list[float]
    macro: float
    pooled: float
    probe: float | None
    chance_task: float
    chance_domain: float
    store_digest: str = ""

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        if d.pop("schema_version", None) != SCHEMA_VERSION:
            raise DataError("metrics file has an unsupported schema_version")
        try:
            return cls(**d)
        except TypeError as e:
            raise DataError(f"malformed metrics: {e}") from e


def _check_store(config: dict, store: EpochStore):
    if config.get("store_digest") != store.digest():
        raise DataError("run was trained on a different store")


def _batching(config: dict) -> tuple[int, int]:
    t = config["train"]
    return t["batch_size"], t["eval_min_batch"]


def extract_representations(net: MultiSourceNet, config: dict, store: EpochStore,
                            split: str = "test") -> LatentTable:
    """One n_z vector per window of ``split``, in store order."""
    _check_store(config, store)
    B, mb = _batching(config)
    zs, src, lab = [], [], []
    for k in range(store.n_sources):
        X = store.X[k][split]
        if len(X) == 0:
            raise DataError(f"source {k} has an empty {split} split")
        zs.append(encode_source(net, k, X, B, mb).double().numpy())
        src.append(np.full(len(X), k))
        lab.append(store.y[k][split])
    return LatentTable(np.concatenate(zs), np.concatenate(src), np.concatenate(lab))


def accuracy_from_logits(logits, y) -> float:
    return float(np.mean(np.argmax(np.asarray(logits), axis=1) == np.asarray(y)))


def task_accuracy(net: MultiSourceNet, config: dict, store: EpochStore,
                  split: str = "test") -> tuple[list[float], float, float]:
    """(per-source accuracy, macro mean, pooled accuracy)."""
    table = extract_representations(net, config, store, split)
    per, hits = [], 0
    with torch.no_grad():
        for k in range(store.n_sources):
            mask = table.source == k
            logits = net.classify(k, torch.from_numpy(table.z[mask]).float()).numpy()
            acc = accuracy_from_logits(logits, table.label[mask])
            per.append(acc)
            hits += acc * mask.sum()
    return per, float(np.mean(per)), float(hits / len(table.label))


def domain_probe(z, source, cfg: ProbeConfig = ProbeConfig()) -> float:
    """Held-out accuracy of a linear SVM predicting the source from representations."""
    z = np.asarray(z, dtype=np.float64)
    source = np.asarray(source)
    if len(np.unique(source)) < 2:
        raise ValueError("the probe needs at least two sources")
    z_tr, z_te, s_tr, s_te = train_test_split(
        z, source, train_size=cfg.train_fraction, stratify=source, random_state=cfg.seed)
    if set(np.unique(s_tr)) != set(np.unique(s_te)):
        raise ValueError("every source must appear in both probe splits")
    scaler = StandardScaler().fit(z_tr)
    svm = LinearSVC(C=cfg.C, loss="squared_hinge", penalty="l2", tol=cfg.tol,
                    max_iter=cfg.max_iter, dual="auto", random_state=cfg.seed)
    svm.fit(scaler.transform(z_tr), s_tr)
    return float(np.mean(svm.predict(scaler.transform(z_te)) == s_te))


def evaluate_run(run_dir, store: EpochStore, probe_cfg: ProbeConfig = ProbeConfig(),
                 which: str = "best") -> MetricsReport:
    net, config = load_run(run_dir, which)
    _check_store(config, store)
    per, macro, pooled = task_accuracy(net, config, store)
    table = extract_representations(net, config, store)
    probe = domain_probe(table.z, table.source, probe_cfg)
    label = TrainConfig(**config["train"]).label
    M = store.n_sources
    return MetricsReport(label, per, macro, pooled, probe, 1 / 3, 1 / M, store.digest())


def make_report(reports: list[MetricsReport]) -> str:
    """CSV table in a fixed row order, with a trailing chance-level row."""
    if not reports:
        raise ValueError("no runs to report")
    M = len(reports[0].per_source)
    if any(len(r.per_source) != M for r in reports):
        raise DataError("runs disagree on the number of sources")
    if len({r.store_digest for r in reports}) > 1:
        raise DataError("runs were evaluated on different stores")
    rank = {v: i for i, v in enumerate(REPORT_ORDER)}
    rows = sorted(reports, key=lambda r: (rank.get(r.variant, len(rank)), r.variant))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", *[f"acc_src_{k + 1}" for k in range(M)], "acc_macro", "acc_pooled",
                "probe_acc"])
    fmt = "{:.6f}".format
    for r in rows:
        w.writerow([r.variant, *map(fmt, r.per_source), fmt(r.macro), fmt(r.pooled),
                    fmt(r.probe) if r.probe is not None else ""])
    w.writerow(["chance", *[fmt(1 / 3)] * (M + 2), fmt(1 / M)])
    return buf.getvalue()


def report_json(reports: list[MetricsReport]) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION,
                       "rows": [r.to_dict() for r in reports]}, indent=1) + "\n"
