"""Seeded multi-source synthetic recordings written in the manifest format.

Every trial carries one latent class sinusoid (class frequency, random phase)
mixed into the channels by a fixed per-source vector. Sources differ in
channel count, sampling rate, gain and DC offset, so the source is easy to
recover from raw statistics while the class signal is shared.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .signalio import (Class3, Class4, DataSourceSpec, LABEL_MODES, PROTOTYPES, Recording,
                       write_dataset)

BASELINE_SECONDS = 3.0
WINDOW_SECONDS = 2.0


@dataclass
class SynthSourceSpec:
    name: str
    channels: int
    sampling_rate: float
    amplitude_scale: float = 1.0
    noise_std: float = 0.5
    dc_offset: float = 0.0
    mixing_seed: int = 0
    trials_per_class: int = 60
    trial_seconds: float = 13.0
    label_mode: str = "discrete3"

    def validate(self):
        if self.channels < 1:
            raise ValueError(f"{self.name}: channels must be >= 1")
        if not self.sampling_rate > 0:
            raise ValueError(f"{self.name}: sampling_rate must be positive")
        if not self.amplitude_scale > 0:
            raise ValueError(f"{self.name}: amplitude_scale must be positive")
        if self.noise_std < 0:
            raise ValueError(f"{self.name}: noise_std must be >= 0")
        if self.trials_per_class < 1:
            raise ValueError(f"{self.name}: trials_per_class must be >= 1")
        if self.trial_seconds < WINDOW_SECONDS + BASELINE_SECONDS:
            raise ValueError(f"{self.name}: trials must last at least 5 s")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"{self.name}: unknown label_mode {self.label_mode!r}")


@dataclass
class SynthClassSpec:
    frequencies: tuple[float, float, float] = (6.0, 12.0, 24.0)  # Negative, Neutral, Positive
    amplitudes: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def validate(self):
        f = [float(v) for v in self.frequencies]
        if len(f) != 3 or len(self.amplitudes) != 3:
            raise ValueError("need one frequency and amplitude per class")
        if len(set(f)) != 3:
            raise ValueError("class frequencies must be distinct")
        if not all(4.0 < v < 40.0 for v in f):
            raise ValueError("class frequencies must lie inside (4, 40) Hz")


def reference_sources() -> list[SynthSourceSpec]:
    """Three heterogeneous sources used by the end-to-end reference experiment."""
    return [
        SynthSourceSpec("synth_a", 4, 128.0, 1.0, 0.5, 0.0, mixing_seed=11,
                        label_mode="valence_arousal"),
        SynthSourceSpec("synth_b", 8, 200.0, 3.0, 0.5, 1.0, mixing_seed=22,
                        label_mode="discrete3"),
        SynthSourceSpec("synth_c", 6, 128.0, 0.5, 0.5, -0.5, mixing_seed=33,
                        label_mode="discrete4"),
    ]


def mixing_vector(spec: SynthSourceSpec) -> np.ndarray:
    """Unit-norm channel weights with a positive first entry."""
    w = np.random.default_rng(spec.mixing_seed).standard_normal(spec.channels)
    w /= np.linalg.norm(w)
    return w if w[0] > 0 else -w


def _trial_label(cls: Class3, trial: int, mode: str, rng: np.random.Generator):
    if mode == "discrete3":
        return cls
    # negative trials alternate between the two negative emotions
    four = {Class3.NEGATIVE: (Class4.FEAR, Class4.SAD)[trial % 2],
            Class3.NEUTRAL: Class4.NEUTRAL,
            Class3.POSITIVE: Class4.HAPPY}[cls]
    if mode == "discrete4":
        return four
    # ratings on a 1..9 scale around the emotion's prototype
    v, a = PROTOTYPES[four]
    jitter = rng.normal(0.0, 0.25, size=2)
    return (float(np.clip(1 + 8 * v + jitter[0], 1, 9)), float(np.clip(1 + 8 * a + jitter[1], 1, 9)))


def generate_source(spec: SynthSourceSpec, classes: SynthClassSpec, seed: int,
                    source_index: int = 0) -> tuple[DataSourceSpec, list[Recording]]:
    spec.validate()
    classes.validate()
    w = mixing_vector(spec)
    n = int(round(spec.trial_seconds * spec.sampling_rate))
    t = np.arange(n) / spec.sampling_rate
    recs = []
    for cls in Class3:
        f, amp = classes.frequencies[cls], classes.amplitudes[cls]
        for trial in range(spec.trials_per_class):
            # per-trial stream: output does not depend on generation order
            rng = np.random.default_rng([seed, source_index, int(cls), trial])
            phase = rng.uniform(0, 2 * np.pi)
            latent = amp * np.sin(2 * np.pi * f * t + phase)
            x = spec.amplitude_scale * w[:, None] * latent[None, :] + spec.dc_offset
            if spec.noise_std > 0:
                x = x + spec.noise_std * rng.standard_normal((spec.channels, n))
            label = _trial_label(cls, trial, spec.label_mode, rng)
            recs.append(Recording(f"{cls.name.lower()}_{trial:04d}", x.astype(np.float32),
                                  label, spec.sampling_rate))
    ds = DataSourceSpec(spec.name, spec.channels, spec.sampling_rate, spec.label_mode)
    return ds, recs


def generate(source_specs: list[SynthSourceSpec], class_spec: SynthClassSpec, seed: int,
             out_dir) -> list[Path]:
    """Write one manifest directory per source under ``out_dir``."""
    out_dir = Path(out_dir)
    paths = []
    for i, spec in enumerate(source_specs):
        ds, recs = generate_source(spec, class_spec, seed, i)
        paths.append(write_dataset(out_dir / spec.name, ds, recs))
    return paths


def spec_to_dict(spec) -> dict:
    d = asdict(spec)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d
