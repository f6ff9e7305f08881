"""Command-line entry point ``dape``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence. Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from scipy import signal

from . import __version__
from .config import ConfigError, ExperimentConfig, experiment_schema, load_config, reference_config
from .evaluate import (MetricsReport, ProbeConfig, domain_probe, evaluate_run,
                       extract_representations, make_report, report_json)
from .mmd import Bandwidths, alignment_loss, gaussian_kernel, mmd2_unbiased
from .model import VARIANTS
from .signalio import (SCHEMA_VERSION, DataError, atomic_write, design_bandpass, load_store,
                       prepare_sources, save_store)
from .synth import generate
from .train import DivergenceError, TrainConfig, fit, kappa, load_run

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4

log = logging.getLogger("dape")


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _config(path) -> ExperimentConfig:
    return load_config(path) if path else ExperimentConfig()


def cmd_synth(args) -> int:
    cfg = _config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = generate(cfg.synth_sources, cfg.classes, seed, out)
    atomic_write(out / "synth.json", _dump({"schema_version": SCHEMA_VERSION, "seed": seed,
                                            "datasets": [p.name for p in paths]}))
    print("\n".join(str(p) for p in paths))
    return 0


def cmd_prepare(args) -> int:
    seed = _config(args.config).seed if args.seed is None else args.seed
    store = prepare_sources([Path(d) for d in args.dataset], seed=seed)
    save_store(store, args.out)
    for k, info in enumerate(store.sources):
        print(f"{info.name}: " + " ".join(
            f"{sp}={len(store.y[k][sp])}" for sp in ("train", "val", "test")))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    over = {"variant": args.variant}
    if args.epochs is not None:
        over["epochs"] = args.epochs
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        over["threads"] = args.threads
    if args.no_align:
        over["align"] = False
    try:
        tcfg = TrainConfig(**{**asdict(cfg.train), **over})
    except ValueError as e:
        raise ConfigError(str(e)) from e
    store = load_store(args.store)
    art = fit(tcfg, store, cfg.model, cfg.align, out_dir=args.out)
    print(f"best epoch {art.best_epoch}  val_acc_macro {art.best_val:.4f}")
    return 0


def _probe_cfg(args) -> ProbeConfig:
    cfg = _config(args.config)
    if args.seed is not None:
        cfg.probe.seed = args.seed
    return cfg.probe


def cmd_eval(args) -> int:
    store = load_store(args.store)
    rep = evaluate_run(args.run, store, _probe_cfg(args), which=args.which)
    atomic_write(Path(args.out), _dump(rep.to_dict()))
    print(f"{rep.variant}: macro {rep.macro:.4f}  probe {rep.probe:.4f}")
    return 0


def cmd_probe(args) -> int:
    store = load_store(args.store)
    net, config = load_run(args.run, args.which)
    table = extract_representations(net, config, store)
    pcfg = _probe_cfg(args)
    acc = domain_probe(table.z, table.source, pcfg)
    atomic_write(Path(args.out), _dump({
        "schema_version": SCHEMA_VERSION, "probe_acc": acc, "chance": 1 / store.n_sources,
        "n_test": int(len(table.source)), "probe": asdict(pcfg)}))
    print(f"probe accuracy {acc:.4f} (chance {1 / store.n_sources:.4f})")
    return 0


def _load_report(path: Path) -> MetricsReport:
    f = path / "metrics.json" if path.is_dir() else path
    try:
        return MetricsReport.from_dict(json.loads(f.read_text()))
    except OSError as e:
        raise DataError(f"no metrics for {path}; run `dape eval` first ({e})") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{f} is not valid JSON: {e}") from e


def cmd_report(args) -> int:
    reports = [_load_report(Path(r)) for r in args.runs]
    table = make_report(reports)
    atomic_write(Path(args.out), table)
    if args.json:
        atomic_write(Path(args.json), report_json(reports))
    sys.stdout.write(table)
    return 0


def selftest_checks() -> list[tuple[str, bool]]:
    """Closed-form checks of the kernel, estimator, schedule and filter."""
    rng = np.random.default_rng(0)
    checks = []
    val = float(mmd2_unbiased(np.zeros((2, 1)), np.ones((2, 1)), 1.0))
    checks.append(("mmd two-point value", abs(val - (2 - 2 * math.exp(-0.5))) <= 1e-9))
    x = rng.normal(size=5)
    checks.append(("kernel self-similarity", gaussian_kernel(x, x, 3.0) == 1.0))
    z = np.tile(rng.normal(size=4), (6, 1))
    checks.append(("mmd equal constant batches", abs(float(mmd2_unbiased(z, z, 2.0))) <= 1e-12))
    wide = float(mmd2_unbiased(rng.normal(size=(8, 4)), rng.normal(2, 1, size=(8, 4)), 1e6))
    checks.append(("mmd huge bandwidth", abs(wide) < 1e-6))
    loss = float(alignment_loss([z, z], Bandwidths(), [(0, 1), (0, 1)]))
    checks.append(("alignment loss of identical sources", abs(loss) <= 1e-12))
    expect = {1: 0.0, 4: 0.0, 5: 0.25, 6: 0.5, 69: 16.25, 70: 16.25, 200: 16.25}
    checks.append(("kappa schedule", all(kappa(e) == v for e, v in expect.items())))
    _, h = signal.sosfreqz(design_bandpass(4.0, 40.0, 128.0), worN=[4.0, 40.0], fs=128.0)
    checks.append(("band-pass -3 dB edges", bool(np.all(np.abs(20 * np.log10(np.abs(h)) + 3.01) < 0.5))))
    return checks


def cmd_selftest(args) -> int:
    checks = selftest_checks()
    for name, ok in checks:
        print(f"{'ok  ' if ok else 'FAIL'} {name}")
    return 0 if all(ok for _, ok in checks) else 1


def cmd_schema(args) -> int:
    sys.stdout.write(_dump(experiment_schema()))
    return 0


def cmd_config(args) -> int:
    cfg = reference_config(args.epochs) if args.reference else _config(args.config)
    text = cfg.to_json()
    if args.out:
        atomic_write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_reference(args) -> int:
    from .experiment import run_experiment

    cfg = load_config(args.config) if args.config else reference_config(args.epochs or 80)
    if args.config and args.epochs is not None:
        cfg.train.epochs = args.epochs
    res = run_experiment(cfg, args.out)
    sys.stdout.write(Path(res["table"]).read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dape", description=(
        "Multi-source representation learning with private encoders, a shared "
        "classifier and MMD alignment."))
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    def config_flag(sp, required=False):
        sp.add_argument("--config", required=required,
                        help="experiment config JSON (see `dape schema`); defaults apply if omitted")

    s = add("synth", cmd_synth, "write synthetic multi-source datasets")
    config_flag(s)
    s.add_argument("--out", required=True, help="output directory, one subdirectory per source")
    s.add_argument("--seed", type=int, help="override the config seed")

    s = add("prepare", cmd_prepare, "preprocess, window, balance and split datasets into a store")
    s.add_argument("--dataset", nargs="+", required=True,
                   help="dataset directories (manifest.json + data/); order fixes source ids")
    s.add_argument("--out", required=True, help="store directory")
    config_flag(s)
    s.add_argument("--seed", type=int, help="seed for labels, balancing and splits")

    s = add("train", cmd_train, "train one variant on a store")
    config_flag(s)
    s.add_argument("--store", required=True, help="store directory from `dape prepare`")
    s.add_argument("--variant", required=True, choices=list(VARIANTS),
                   help="model variant: %(choices)s")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--epochs", type=int, help="override the number of epochs")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--threads", type=int, help="torch threads (1 gives bitwise-reproducible runs)")
    s.add_argument("--no-align", action="store_true",
                   help="hold kappa at 0 (unaligned ablation of dape/adape)")

    for name, fn, help_ in (("eval", cmd_eval, "task accuracy and probe of a run -> metrics JSON"),
                            ("probe", cmd_probe, "domain probe on a run's test representations")):
        s = add(name, fn, help_)
        s.add_argument("--run", required=True, help="run directory")
        s.add_argument("--store", required=True, help="store the run was trained on")
        s.add_argument("--out", required=True, help="output JSON file")
        s.add_argument("--which", choices=["best", "final"], default="best",
                       help="checkpoint to evaluate (default: best)")
        config_flag(s)
        s.add_argument("--seed", type=int, help="probe split seed")

    s = add("report", cmd_report, "collect metrics of several runs into the results table")
    s.add_argument("--runs", nargs="+", required=True,
                   help="run directories containing metrics.json, or metrics JSON files")
    s.add_argument("--out", required=True, help="CSV table")
    s.add_argument("--json", help="also write the rows as JSON")

    add("selftest", cmd_selftest, "run the closed-form kernel/estimator/schedule/filter checks")
    add("schema", cmd_schema, "print the experiment config JSON schema")

    s = add("config", cmd_config, "print a config with every default filled in")
    config_flag(s)
    s.add_argument("--reference", action="store_true", help="the reference experiment config")
    s.add_argument("--epochs", type=int, default=80, help="epochs for --reference")
    s.add_argument("--out", help="write to a file instead of stdout")

    s = add("reference", cmd_reference, "run the full synthetic experiment and print the table")
    config_flag(s)
    s.add_argument("--out", required=True, help="experiment directory")
    s.add_argument("--epochs", type=int, help="epochs (default 80)")
    return p


def _fail(kind: str, msg: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": msg, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        return _fail("config", str(e), EXIT_CONFIG)
    except DataError as e:
        return _fail("data", str(e), EXIT_DATA)
    except DivergenceError as e:
        return _fail("divergence", str(e), EXIT_DIVERGENCE)


if __name__ == "__main__":
    sys.exit(main())
