import filecmp

import numpy as np
import pytest
from scipy import signal

from dape.evaluate import ProbeConfig, domain_probe
from dape.signalio import Class3, load_dataset, segment_windows
from dape.synth import (SynthClassSpec, SynthSourceSpec, generate, generate_source, mixing_vector,
                        reference_sources)


def test_noise_free_single_channel_is_pure_sinusoid():
    spec = SynthSourceSpec("s", 1, 128.0, amplitude_scale=1.0, noise_std=0.0, dc_offset=0.7,
                           trials_per_class=2, trial_seconds=6.0)
    assert mixing_vector(spec).tolist() == [1.0]
    classes = SynthClassSpec()
    _, recs = generate_source(spec, classes, seed=3)
    t = np.arange(int(6 * 128)) / 128
    for r in recs:
        cls = {"negative": 0, "neutral": 1, "positive": 2}[r.id.split("_")[0]]
        f = classes.frequencies[cls]
        x = r.samples[0].astype(np.float64) - 0.7
        basis = np.vstack([np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t)]).T
        coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
        assert np.hypot(*coef) == pytest.approx(1.0, abs=1e-5)
        assert np.max(np.abs(basis @ coef - x)) < 1e-5


def test_generation_is_byte_identical(tmp_path):
    specs = [SynthSourceSpec("a", 2, 128.0, trials_per_class=2, trial_seconds=6.0,
                             label_mode="valence_arousal"),
             SynthSourceSpec("b", 3, 200.0, trials_per_class=2, trial_seconds=6.0)]
    generate(specs, SynthClassSpec(), 5, tmp_path / "one")
    generate(specs, SynthClassSpec(), 5, tmp_path / "two")
    for name in ("a", "b"):
        cmp = filecmp.dircmp(tmp_path / "one" / name, tmp_path / "two" / name)
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
        sub = filecmp.dircmp(tmp_path / "one" / name / "data", tmp_path / "two" / name / "data")
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "one" / name / "data",
                                               tmp_path / "two" / name / "data",
                                               sub.common_files, shallow=False)
        assert not mismatch and not errors


def test_roundtrip_through_manifest_is_lossless(tmp_path):
    spec = SynthSourceSpec("a", 3, 128.0, trials_per_class=2, trial_seconds=6.0,
                           label_mode="discrete4")
    ds, recs = generate_source(spec, SynthClassSpec(), seed=1)
    (path,) = generate([spec], SynthClassSpec(), 1, tmp_path)
    loaded_spec, loaded = load_dataset(path)
    assert loaded_spec.channels == 3 and loaded_spec.label_mode == "discrete4"
    for a, b in zip(recs, loaded):
        assert a.id == b.id and a.raw_label == b.raw_label
        assert a.samples.tobytes() == b.samples.astype(np.float32).tobytes()


def test_positive_class_spectral_peak():
    spec = SynthSourceSpec("a", 4, 128.0, noise_std=0.5, trials_per_class=5)
    classes = SynthClassSpec()
    _, recs = generate_source(spec, classes, seed=0)
    for r in recs:
        if not r.id.startswith("positive"):
            continue
        f, p = signal.periodogram(r.samples.astype(np.float64), fs=128.0, axis=1)
        band = (f > 4) & (f < 40)
        peak = f[band][np.argmax(p.sum(0)[band])]
        assert peak == pytest.approx(classes.frequencies[Class3.POSITIVE], abs=0.1)


def test_valence_arousal_labels_are_class_consistent():
    spec = SynthSourceSpec("a", 2, 128.0, trials_per_class=10, trial_seconds=6.0,
                           label_mode="valence_arousal")
    _, recs = generate_source(spec, SynthClassSpec(), seed=0)
    for r in recs:
        v, a = r.raw_label
        if r.id.startswith("positive"):
            assert v > 7 and a > 7
        elif r.id.startswith("neutral"):
            assert 3 < v < 7 and 3 < a < 7
        else:
            assert v < 3


def test_invalid_specs():
    with pytest.raises(ValueError):
        generate_source(SynthSourceSpec("a", 0, 128.0), SynthClassSpec(), 0)
    with pytest.raises(ValueError):
        generate_source(SynthSourceSpec("a", 2, 128.0, trial_seconds=4.0), SynthClassSpec(), 0)
    with pytest.raises(ValueError):
        generate_source(SynthSourceSpec("a", 2, 128.0), SynthClassSpec((6, 6, 24)), 0)
    with pytest.raises(ValueError):
        generate_source(SynthSourceSpec("a", 2, 128.0), SynthClassSpec((2, 12, 24)), 0)


def test_reference_sources_linearly_separable_from_raw_statistics():
    feats, src = [], []
    for k, spec in enumerate(reference_sources()):
        spec.trials_per_class = 10
        _, recs = generate_source(spec, SynthClassSpec(), seed=0, source_index=k)
        for r in recs:
            for w in segment_windows(r, 0, k):
                feats.append([w.x.mean(), w.x.var()])
                src.append(k)
    acc = domain_probe(np.array(feats), np.array(src), ProbeConfig(seed=0))
    assert acc > 0.9
