"""Multi-objective training: cross-entropy on stacked source batches plus the
kappa-weighted alignment loss, and the local/global/DANN baselines."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .mmd import Bandwidths, alignment_loss, sample_pairs
from .model import (VARIANTS, EncoderConfig, MultiSourceNet, SourceShape, cross_entropy,
                    dann_lambda, grad_reverse, predict_source)
from .signalio import SCHEMA_VERSION, DataError, EpochStore, atomic_write

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class KappaSchedule:
    start_epoch: int = 5
    rate: float = 0.25
    cap: float = 16.25

    def __post_init__(self):
        if not self.rate > 0 or not self.cap > 0:
            raise ValueError("kappa rate and cap must be positive")
        steps = self.cap / self.rate
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("kappa cap must be an integer multiple of the rate")


def kappa(epoch: int, sched: KappaSchedule = KappaSchedule()) -> float:
    """0 before ``start_epoch``, then +rate per epoch until ``cap``."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    return min(sched.rate * max(0, epoch - (sched.start_epoch - 1)), sched.cap)


@dataclass
class TrainConfig:
    variant: str = "dape"
    batch_size: int = 32
    epochs: int = 100
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    align: bool = True  # False: kappa held at 0 (unaligned ablation)
    threads: int = 1
    eval_min_batch: int = 8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def label(self) -> str:
        """Report row name; the unaligned ablation gets its own row."""
        if self.variant in ("dape", "adape") and not self.align:
            return f"{self.variant}_noalign"
        return self.variant


@dataclass
class AlignConfig:
    bandwidths: Bandwidths = field(default_factory=Bandwidths)
    schedule: KappaSchedule = field(default_factory=KappaSchedule)


def seed_everything(seed: int, threads: int = 1) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def compute_losses(net: MultiSourceNet, xs, ys, bandwidths: Bandwidths, pairs=None,
                   row_weights=None, lam: float = 0.0) -> dict:
    """Forward every source batch and return the loss parts (tensors).

    ``row_weights`` (one tensor per source) reweights the per-row cross-entropy;
    it is used to isolate the contribution of single sources.
    """
    zs = net.encode_all(xs)
    if pairs:
        l_da = alignment_loss(zs, bandwidths, pairs)
    else:
        l_da = zs[0].new_zeros(())
    logits = net.classify_all(zs)
    y = torch.cat(ys)
    if row_weights is not None:
        w = torch.cat(row_weights).to(logits.dtype)
        l_ce = (torch.nn.functional.cross_entropy(logits, y, reduction="none") * w).sum() / len(y)
    elif net.variant == "local":
        # independent models: each source's mean loss drives only its own parameters
        l_ce = sum(cross_entropy(lg, yk) for lg, yk in zip(logits.split([len(v) for v in ys]), ys))
    else:
        l_ce = cross_entropy(logits, y)
    out = {"l_ce": l_ce, "l_da": l_da, "logits": logits, "latents": zs}
    if net.variant == "dann":
        dom = net.domain_head(grad_reverse(torch.cat(zs), lam))
        src = torch.cat([torch.full((len(x),), k, dtype=torch.long) for k, x in enumerate(xs)])
        out["l_dom"] = cross_entropy(dom, src)
    return out


def uses_alignment(cfg: TrainConfig) -> bool:
    return cfg.variant in ("dape", "adape") and cfg.align


def train_step(net, optimizer, xs, ys, kappa_value: float, bandwidths: Bandwidths,
               rng: np.random.Generator, lam: float = 0.0) -> dict:
    """One joint update of all encoders and the classifier on L_CE + kappa * L_DA."""
    net.train()
    pairs = sample_pairs(len(xs), rng) if len(xs) >= 2 else []
    try:
        parts = compute_losses(net, xs, ys, bandwidths, pairs, lam=lam)
    except FloatingPointError as e:
        raise DivergenceError(f"non-finite logits (kappa={kappa_value}): {e}") from e
    total = parts["l_ce"]
    if kappa_value and net.variant in ("dape", "adape"):
        total = total + kappa_value * parts["l_da"]
    if "l_dom" in parts:
        total = total + parts["l_dom"]
    if not torch.isfinite(total):
        raise DivergenceError(
            f"non-finite loss: l_ce={parts['l_ce'].item()} l_da={parts['l_da'].item()} "
            f"kappa={kappa_value}")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    parts["pairs"] = pairs
    parts["total"] = total
    return parts


@dataclass
class RunArtifacts:
    config: dict
    log: list[dict]
    best_state: dict
    best_epoch: int
    best_val: float
    final_state: dict
    rng_trace: dict

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = {"schema_version": SCHEMA_VERSION, "config": self.config}
        save_checkpoint(out / "best.ckpt", self.best_state,
                        {**header, "epoch": self.best_epoch, "val_acc_macro": self.best_val,
                         "rng": self.rng_trace})
        save_checkpoint(out / "final.ckpt", self.final_state,
                        {**header, "epoch": len(self.log), "rng": self.rng_trace})
        atomic_write(out / "log.csv", log_to_csv(self.log))
        atomic_write(out / "config.json", json.dumps(self.config, indent=1, sort_keys=True) + "\n")
        atomic_write(out / "rng.json", json.dumps(self.rng_trace, indent=1, sort_keys=True) + "\n")
        return out


def log_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def run_config(train_cfg: TrainConfig, model_cfg: EncoderConfig, align: AlignConfig,
               store: EpochStore) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "train": asdict(train_cfg) | {"betas": list(train_cfg.betas)},
        "model": model_cfg.to_dict(),
        "align": {"sigma": list(align.bandwidths.sigma), **asdict(align.schedule)},
        "sources": [asdict(s) for s in store.sources],
        "store_digest": store.digest(),
    }


def build_net(config: dict) -> MultiSourceNet:
    shapes = [SourceShape(s["channels"], s["window_samples"]) for s in config["sources"]]
    return MultiSourceNet(config["train"]["variant"], EncoderConfig(**config["model"]), shapes)


def load_run(run_dir, which: str = "best") -> tuple[MultiSourceNet, dict]:
    run_dir = Path(run_dir)
    try:
        config = json.loads((run_dir / "config.json").read_text())
        header, state = load_checkpoint(run_dir / f"{which}.ckpt")
    except (OSError, ValueError) as e:
        raise DataError(f"cannot load run {run_dir}: {e}") from e
    if header["config"] != config:
        raise DataError(f"{run_dir}: checkpoint and config.json disagree")
    net = build_net(config)
    net.load_state_dict(state)
    net.eval()
    return net, config


def _accuracy(logits, y) -> float:
    return float((logits.argmax(1) == y).double().mean())


def _state_copy(net) -> dict:
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


# variants that differ only in how batch norm behaves at evaluation time
COTRAINABLE = ("dape", "adape")


def fit(config: TrainConfig, store: EpochStore, model_cfg: EncoderConfig | None = None,
        align: AlignConfig | None = None, out_dir=None) -> RunArtifacts:
    """Train one variant; optionally write the run directory."""
    out_dirs = None if out_dir is None else {config.variant: out_dir}
    return fit_group(config, store, [config.variant], model_cfg, align, out_dirs)[config.variant]


def fit_group(config: TrainConfig, store: EpochStore, variants, model_cfg=None, align=None,
              out_dirs: dict | None = None) -> dict[str, RunArtifacts]:
    """Train once and keep one set of artifacts per variant in ``variants``.

    DAPE and aDAPE share every training step (batch norm uses batch statistics
    in train mode for both); they only differ in the validation pass, so they
    can share one trajectory. Each variant gets its own validation log, best
    checkpoint and config, identical to what a standalone ``fit`` produces.
    """
    variants = list(dict.fromkeys(variants))
    if len(variants) > 1 and not set(variants) <= set(COTRAINABLE):
        raise ValueError(f"only {COTRAINABLE} can share a training run, got {variants}")
    configs = {v: TrainConfig(**{**asdict(config), "variant": v}) for v in variants}
    model_cfg = model_cfg or EncoderConfig()
    align = align or AlignConfig()
    seed_everything(config.seed, config.threads)
    M, B = store.n_sources, config.batch_size
    cfg_dicts = {v: run_config(c, model_cfg, align, store) for v, c in configs.items()}
    net = build_net(cfg_dicts[variants[0]])
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr, betas=config.betas)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng([config.seed, 1])

    for k in range(M):
        for sp in ("train", "val"):
            if len(store.y[k][sp]) == 0:
                raise DataError(f"source {k} has an empty {sp} split")
    Xtr = [torch.from_numpy(store.X[k]["train"]) for k in range(M)]
    ytr = [torch.from_numpy(store.y[k]["train"]) for k in range(M)]
    yval = [torch.from_numpy(store.y[k]["val"]) for k in range(M)]
    n_steps = min(len(y) for y in ytr) // B
    if n_steps < 1:
        raise DataError(f"training split smaller than one batch of {B}")
    aligned = uses_alignment(config)

    history = {v: [] for v in variants}
    best = {v: (-1.0, 0, None) for v in variants}
    trace = {"seed": config.seed, "pairs_sha256": []}
    for epoch in range(1, config.epochs + 1):
        k_val = kappa(epoch, align.schedule) if aligned else 0.0
        lam = dann_lambda((epoch - 1) / config.epochs)  # 0 in the first epoch
        perms = [torch.randperm(len(y), generator=gen) for y in ytr]
        sums = {"l_ce": 0.0, "l_da": 0.0, "l_dom": 0.0}
        correct = np.zeros(M)
        pair_hash = hashlib.sha256()
        for step in range(n_steps):
            idx = [p[step * B:(step + 1) * B] for p in perms]
            xs = [Xtr[k][idx[k]] for k in range(M)]
            ys = [ytr[k][idx[k]] for k in range(M)]
            parts = train_step(net, optimizer, xs, ys, k_val, align.bandwidths, rng, lam)
            pair_hash.update(json.dumps(parts["pairs"]).encode())
            for key in sums:
                if key in parts:
                    sums[key] += parts[key].item()
            hits = (parts["logits"].argmax(1) == torch.cat(ys)).view(M, B)
            correct += hits.sum(1).numpy()
        trace["pairs_sha256"].append(pair_hash.hexdigest())

        train_acc = (correct / (n_steps * B)).tolist()
        base = {"epoch": epoch, "l_ce": sums["l_ce"] / n_steps, "l_da": sums["l_da"] / n_steps,
                "kappa": k_val}
        for v in variants:
            with net.batch_statistics(v == "adape"):
                val_acc = [_accuracy(predict_source(net, k, store.X[k]["val"], B,
                                                    config.eval_min_batch), yval[k])
                           for k in range(M)]
            row = dict(base)
            row |= {f"val_acc_src_{k + 1}": a for k, a in enumerate(val_acc)}
            row["val_acc_macro"] = float(np.mean(val_acc))
            row |= {f"train_acc_src_{k + 1}": a for k, a in enumerate(train_acc)}
            row["train_acc_macro"] = float(np.mean(train_acc))
            if v == "dann":
                row["l_dom"] = sums["l_dom"] / n_steps
            history[v].append(row)
            log.info("%s epoch %d  l_ce %.4f  l_da %.4f  kappa %.2f  val %.3f", v, epoch,
                     row["l_ce"], row["l_da"], k_val, row["val_acc_macro"])
            if row["val_acc_macro"] >= best[v][0]:  # ties: keep the later epoch
                best[v] = (row["val_acc_macro"], epoch, _state_copy(net))

    trace["numpy_state"] = rng.bit_generator.state
    final = _state_copy(net)
    out = {}
    for v in variants:
        val, epoch, state = best[v]
        out[v] = RunArtifacts(cfg_dicts[v], history[v], state, epoch, val, final, trace)
        if out_dirs is not None and v in out_dirs:
            out[v].save(out_dirs[v])
    return out


def fit_baseline(kind: str, config: TrainConfig, store: EpochStore,
                 model_cfg: EncoderConfig | None = None, align: AlignConfig | None = None,
                 out_dir=None) -> RunArtifacts:
    """Local, global or DANN baseline; same artifacts as ``fit``."""
    kind = kind.lower()
    if kind not in ("local", "global", "dann"):
        raise ValueError(f"unknown baseline {kind!r}")
    cfg = TrainConfig(**{**asdict(config), "variant": kind})
    return fit(cfg, store, model_cfg, align, out_dir)
