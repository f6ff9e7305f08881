"""Dataset ingestion and preprocessing.

Raw recordings come from a manifest directory (``manifest.json`` plus
``data/<id>.f32`` channel-major float32 blobs). ``prepare_sources`` runs the
fixed chain baseline correction -> band-pass -> tail truncation -> windowing,
harmonises labels to Negative/Neutral/Positive, balances and splits.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import signal

SCHEMA_VERSION = 1
LABEL_MODES = ("discrete3", "discrete4", "valence_arousal")
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Bad or inconsistent input data."""


class Class3(IntEnum):
    NEGATIVE = 0
    NEUTRAL = 1
    POSITIVE = 2


class Class4(IntEnum):
    FEAR = 0
    SAD = 1
    NEUTRAL = 2
    HAPPY = 3


# canonical positions in min-max normalised (valence, arousal) space
PROTOTYPES = {
    Class4.FEAR: (0.0, 1.0),
    Class4.SAD: (0.0, 0.0),
    Class4.NEUTRAL: (0.5, 0.5),
    Class4.HAPPY: (1.0, 1.0),
}


@dataclass
class DataSourceSpec:
    name: str
    channels: int
    sampling_rate: float
    label_mode: str
    tail_seconds: float | None = None

    def __post_init__(self):
        if self.channels < 1:
            raise DataError("channels must be >= 1")
        if not self.sampling_rate > 0:
            raise DataError("sampling_rate must be positive")
        if self.label_mode not in LABEL_MODES:
            raise DataError(f"unknown label_mode {self.label_mode!r}")
        if self.tail_seconds is not None and not self.tail_seconds > 0:
            raise DataError("tail_seconds must be positive")


@dataclass
class Recording:
    id: str
    samples: np.ndarray  # (C, N)
    raw_label: object
    sampling_rate: float

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def replace(self, samples) -> "Recording":
        return Recording(self.id, samples, self.raw_label, self.sampling_rate)


@dataclass
class Window:
    x: np.ndarray  # (C, L)
    y: int
    source_id: int
    key: tuple = ()  # (recording id, window index), stable identity for tests


def _n(seconds: float, rate: float) -> int:
    return int(round(seconds * rate))


# ---------------------------------------------------------------- manifest io

def _parse_label(raw, mode: str):
    if mode == "discrete3":
        names = {c.name.lower(): c for c in Class3}
        if raw not in names:
            raise DataError(f"bad discrete3 label {raw!r}")
        return names[raw]
    if mode == "discrete4":
        names = {c.name.lower(): c for c in Class4}
        if raw not in names:
            raise DataError(f"bad discrete4 label {raw!r}")
        return names[raw]
    if not (isinstance(raw, (list, tuple)) and len(raw) == 2):
        raise DataError(f"valence_arousal label must be a [v, a] pair, got {raw!r}")
    va = (float(raw[0]), float(raw[1]))
    if not all(np.isfinite(va)):
        raise DataError("non-finite valence/arousal label")
    return va


def _label_to_json(label, mode: str):
    if mode in ("discrete3", "discrete4"):
        return label.name.lower()
    return [float(label[0]), float(label[1])]


def load_dataset(path) -> tuple[DataSourceSpec, list[Recording]]:
    """Read a manifest directory (or its manifest.json)."""
    path = Path(path)
    root = path.parent if path.is_file() else path
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"missing manifest: {mpath}")
    try:
        meta = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"manifest is not valid JSON: {e}") from e
    for key in ("name", "channels", "sampling_rate_hz", "label_mode", "recordings"):
        if key not in meta:
            raise DataError(f"manifest missing field {key!r}")
    spec = DataSourceSpec(meta["name"], int(meta["channels"]), float(meta["sampling_rate_hz"]),
                          meta["label_mode"], meta.get("tail_seconds"))
    recs = []
    for r in meta["recordings"]:
        fpath = root / r["file"]
        if not fpath.exists():
            raise DataError(f"missing data file: {fpath}")
        data = np.fromfile(fpath, dtype="<f4")
        n = int(r["n_samples"])
        if data.size != spec.channels * n:
            raise DataError(
                f"{fpath.name}: expected {spec.channels}x{n}={spec.channels * n} floats, "
                f"found {data.size}")
        if not np.all(np.isfinite(data)):
            raise DataError(f"{fpath.name}: non-finite samples")
        recs.append(Recording(str(r["id"]), data.reshape(spec.channels, n),
                              _parse_label(r["label"], spec.label_mode), spec.sampling_rate))
    return spec, recs


def atomic_write(path, data: bytes | str):
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_dataset(root, spec: DataSourceSpec, recordings: list[Recording]) -> Path:
    root = Path(root)
    (root / "data").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in recordings:
        if rec.samples.shape[0] != spec.channels:
            raise DataError(f"recording {rec.id} has {rec.samples.shape[0]} channels")
        fname = f"data/{rec.id}.f32"
        atomic_write(root / fname, np.ascontiguousarray(rec.samples, dtype="<f4").tobytes())
        entries.append({"id": rec.id, "file": fname, "n_samples": rec.n_samples,
                        "label": _label_to_json(rec.raw_label, spec.label_mode)})
    meta = {"schema_version": SCHEMA_VERSION, "name": spec.name, "channels": spec.channels,
            "sampling_rate_hz": spec.sampling_rate, "label_mode": spec.label_mode,
            "recordings": entries}
    if spec.tail_seconds is not None:
        meta["tail_seconds"] = spec.tail_seconds
    atomic_write(root / "manifest.json", (json.dumps(meta, indent=1) + "\n").encode())
    return root


# ------------------------------------------------------------ preprocessing

def baseline_correct(rec: Recording, baseline_seconds: float = 3.0) -> Recording:
    """Subtract each channel's mean over the first ``baseline_seconds``."""
    n = _n(baseline_seconds, rec.sampling_rate)
    if n < 1 or rec.n_samples < n:
        raise DataError(f"recording {rec.id} shorter than the {baseline_seconds}s baseline")
    x = np.asarray(rec.samples, dtype=np.float64)
    return rec.replace(x - x[:, :n].mean(axis=1, keepdims=True))


def design_bandpass(low: float, high: float, fs: float, order: int = 4) -> np.ndarray:
    """Butterworth band-pass as second-order sections (bilinear, pre-warped edges)."""
    if int(order) != order or order < 1:
        raise DataError("filter order must be a positive integer")
    if not 0 < low < high < fs / 2:
        raise DataError(f"band edges must satisfy 0 < {low} < {high} < {fs / 2}")
    return signal.butter(int(order), [low, high], btype="bandpass", fs=fs, output="sos")


def bandpass_filter(rec: Recording, low: float = 4.0, high: float = 40.0,
                    order: int = 4) -> Recording:
    """Causal single-pass filtering of every channel; length preserved."""
    sos = design_bandpass(low, high, rec.sampling_rate, order)
    return rec.replace(signal.sosfilt(sos, np.asarray(rec.samples, dtype=np.float64), axis=1))


def truncate_tail(rec: Recording, T: float) -> Recording:
    n = _n(T, rec.sampling_rate)
    if n < 1 or rec.n_samples < n:
        raise DataError(f"recording {rec.id} ({rec.n_samples} samples) shorter than T={T}s")
    return rec.replace(rec.samples[:, rec.n_samples - n:])


def segment_windows(rec: Recording, label: int, source_id: int,
                    window_seconds: float = 2.0) -> list[Window]:
    L = _n(window_seconds, rec.sampling_rate)
    if rec.n_samples < L:
        raise DataError(f"recording {rec.id} shorter than one {window_seconds}s window")
    return [Window(rec.samples[:, i * L:(i + 1) * L], int(label), source_id, (rec.id, i))
            for i in range(rec.n_samples // L)]


# ------------------------------------------------------------------ labels

def merge_to_three(label: Class4) -> Class3:
    return {
        Class4.FEAR: Class3.NEGATIVE,
        Class4.SAD: Class3.NEGATIVE,
        Class4.NEUTRAL: Class3.NEUTRAL,
        Class4.HAPPY: Class3.POSITIVE,
    }[Class4(label)]


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 300):
    """Lloyd's algorithm with k-means++ seeding. Stops when assignments stop changing.

    Returns (centroids, assignment).
    """
    X = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = len(X)
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        centers.append(X[rng.choice(n, p=d2 / d2.sum())])
    C = np.array(centers)
    assign = None
    for _ in range(max_iter):
        new = np.argmin(((X[:, None, :] - C[None]) ** 2).sum(-1), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = X[assign == j]
            if len(members):
                C[j] = members.mean(axis=0)
    return C, assign


def harmonize_labels(va_points, k: int = 4, seed: int = 0) -> list[Class4]:
    """Cluster (valence, arousal) ratings and name each cluster after the
    prototype nearest to its centroid in min-max normalised space."""
    P = np.asarray(va_points, dtype=np.float64).reshape(-1, 2)
    if len(np.unique(P, axis=0)) < k:
        raise DataError(f"need at least {k} distinct valence/arousal points")
    lo, hi = P.min(axis=0), P.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    Pn = (P - lo) / span
    centroids, assign = kmeans(Pn, k, seed=seed)
    names = list(PROTOTYPES)
    protos = np.array([PROTOTYPES[c] for c in names])
    cluster_name = [names[int(np.argmin(((protos - c) ** 2).sum(-1)))] for c in centroids]
    return [cluster_name[a] for a in assign]


def three_class_labels(spec: DataSourceSpec, recordings: list[Recording],
                       seed: int = 0) -> list[Class3]:
    if spec.label_mode == "discrete3":
        return [Class3(r.raw_label) for r in recordings]
    if spec.label_mode == "discrete4":
        return [merge_to_three(r.raw_label) for r in recordings]
    return [merge_to_three(c) for c in harmonize_labels([r.raw_label for r in recordings], seed=seed)]


# --------------------------------------------------------- balance / split

def _class_buckets(windows):
    buckets: dict[tuple[int, int], list[Window]] = {}
    for w in windows:
        buckets.setdefault((w.source_id, w.y), []).append(w)
    return buckets


def undersample(windows: list[Window], seed: int) -> list[Window]:
    """Randomly drop windows so every (source, class) cell holds the global
    minimum cell count."""
    buckets = _class_buckets(windows)
    sources = sorted({s for s, _ in buckets})
    for s in sources:
        for c in Class3:
            if (s, int(c)) not in buckets:
                raise DataError(f"class {c.name} absent from source {s}")
    n_keep = min(len(v) for v in buckets.values())
    out = []
    for key in sorted(buckets):
        cell = buckets[key]
        rng = np.random.default_rng([seed, key[0], key[1]])
        keep = np.sort(rng.choice(len(cell), size=n_keep, replace=False))
        out.extend(cell[i] for i in keep)
    return out


def split_counts(n: int, ratios=(0.6, 0.2, 0.2)) -> list[int]:
    """Largest-remainder apportionment of n items; ties go to the earlier split."""
    quotas = [n * r / sum(ratios) for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


@dataclass
class SourceInfo:
    name: str
    channels: int
    sampling_rate: float
    window_samples: int


@dataclass
class EpochStore:
    """Windows grouped by source and split: ``X[s][split]`` is (n, C, L) float32,
    ``y[s][split]`` is (n,) int64."""

    sources: list[SourceInfo]
    X: list[dict[str, np.ndarray]]
    y: list[dict[str, np.ndarray]]

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    def class_counts(self, s: int, split: str) -> list[int]:
        return np.bincount(self.y[s][split], minlength=3).tolist()

    def subset(self, source_ids: list[int]) -> "EpochStore":
        return EpochStore([self.sources[i] for i in source_ids],
                          [self.X[i] for i in source_ids], [self.y[i] for i in source_ids])

    def digest(self) -> str:
        h = hashlib.sha256()
        for s, info in enumerate(self.sources):
            h.update(json.dumps([info.name, info.channels, info.window_samples]).encode())
            for sp in SPLITS:
                h.update(np.ascontiguousarray(self.X[s][sp], dtype="<f4").tobytes())
                h.update(np.ascontiguousarray(self.y[s][sp], dtype="<i8").tobytes())
        return h.hexdigest()


def split(windows: list[Window], sources: list[SourceInfo], ratios=(0.6, 0.2, 0.2),
          seed: int = 0) -> EpochStore:
    """Seeded stratified split per (source, class) cell."""
    buckets = _class_buckets(windows)
    parts: list[dict[str, list[Window]]] = [{sp: [] for sp in SPLITS} for _ in sources]
    for (s, c), cell in sorted(buckets.items()):
        counts = split_counts(len(cell), ratios)
        if min(counts) < 1:
            raise DataError(f"source {s} class {c}: {len(cell)} windows cannot fill every split")
        perm = np.random.default_rng([seed, s, c]).permutation(len(cell))
        start = 0
        for sp, n in zip(SPLITS, counts):
            parts[s][sp].extend(cell[i] for i in np.sort(perm[start:start + n]))
            start += n
    X, y = [], []
    for s, info in enumerate(sources):
        xs, ys = {}, {}
        for sp in SPLITS:
            ws = parts[s][sp]
            if not ws:
                raise DataError(f"source {s} has an empty {sp} split")
            # mixed class order, so fixed-order inference batches are not single-class
            order = np.random.default_rng([seed, s, SPLITS.index(sp), 7]).permutation(len(ws))
            ws = [ws[i] for i in order]
            xs[sp] = np.stack([w.x for w in ws]).astype(np.float32)
            ys[sp] = np.array([w.y for w in ws], dtype=np.int64)
        X.append(xs)
        y.append(ys)
    return EpochStore(list(sources), X, y)


# ------------------------------------------------------------------ pipeline

def preprocess_recording(rec: Recording, T: float, baseline_seconds: float = 3.0,
                         low: float = 4.0, high: float = 40.0, order: int = 4) -> Recording:
    rec = baseline_correct(rec, baseline_seconds)
    rec = bandpass_filter(rec, low, high, order)
    return truncate_tail(rec, T)


def source_windows(spec: DataSourceSpec, recordings: list[Recording], source_id: int,
                   label_seed: int = 0, window_seconds: float = 2.0) -> list[Window]:
    T = spec.tail_seconds
    if T is None:
        T = min(r.n_samples for r in recordings) / spec.sampling_rate
    labels = three_class_labels(spec, recordings, seed=label_seed)
    out = []
    for rec, lab in zip(recordings, labels):
        out.extend(segment_windows(preprocess_recording(rec, T), int(lab), source_id,
                                   window_seconds))
    return out


def prepare_sources(datasets: list, seed: int = 0, ratios=(0.6, 0.2, 0.2),
                    window_seconds: float = 2.0) -> EpochStore:
    """Full pipeline over a list of (DataSourceSpec, recordings) pairs or manifest dirs."""
    windows, infos = [], []
    for s, ds in enumerate(datasets):
        spec, recs = load_dataset(ds) if isinstance(ds, (str, Path)) else ds
        windows.extend(source_windows(spec, recs, s, label_seed=seed,
                                      window_seconds=window_seconds))
        infos.append(SourceInfo(spec.name, spec.channels, spec.sampling_rate,
                                _n(window_seconds, spec.sampling_rate)))
    return split(undersample(windows, seed), infos, ratios, seed)


def save_store(store: EpochStore, root) -> Path:
    """``windows.f32`` (window-major, channel-major within a window) + ``index.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    blobs, index, offset = [], [], 0
    for s, info in enumerate(store.sources):
        for sp in SPLITS:
            for x, y in zip(store.X[s][sp], store.y[s][sp]):
                blobs.append(np.ascontiguousarray(x, dtype="<f4").tobytes())
                index.append({"source": s, "class": int(y), "split": sp, "offset": offset})
                offset += x.size
    meta = {
        "schema_version": SCHEMA_VERSION,
        "sources": [{"name": i.name, "channels": i.channels, "sampling_rate_hz": i.sampling_rate,
                     "window_samples": i.window_samples} for i in store.sources],
        "digest": store.digest(),
        "windows": index,
    }
    atomic_write(root / "windows.f32", b"".join(blobs))
    atomic_write(root / "index.json", (json.dumps(meta) + "\n").encode())
    return root


def load_store(root) -> EpochStore:
    root = Path(root)
    try:
        meta = json.loads((root / "index.json").read_text())
        flat = np.fromfile(root / "windows.f32", dtype="<f4")
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read store at {root}: {e}") from e
    infos = [SourceInfo(d["name"], d["channels"], d["sampling_rate_hz"], d["window_samples"])
             for d in meta["sources"]]
    cells: list[dict[str, list]] = [{sp: [] for sp in SPLITS} for _ in infos]
    labels: list[dict[str, list]] = [{sp: [] for sp in SPLITS} for _ in infos]
    for w in meta["windows"]:
        info = infos[w["source"]]
        size = info.channels * info.window_samples
        if w["offset"] + size > flat.size:
            raise DataError("windows.f32 is shorter than index.json implies")
        cells[w["source"]][w["split"]].append(
            flat[w["offset"]:w["offset"] + size].reshape(info.channels, info.window_samples))
        labels[w["source"]][w["split"]].append(w["class"])
    X = [{sp: np.stack(c[sp]) for sp in SPLITS} for c in cells]
    y = [{sp: np.array(l[sp], dtype=np.int64) for sp in SPLITS} for l in labels]
    store = EpochStore(infos, X, y)
    if meta.get("digest") and store.digest() != meta["digest"]:
        raise DataError("store digest mismatch")
    return store
