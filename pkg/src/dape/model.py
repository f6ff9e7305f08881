"""Networks: private DeepConvNet-style encoders, the shared classifier and
the pieces used by the pooled baselines (channel adapter, gradient reversal).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

N_CLASSES = 3


@dataclass
class EncoderConfig:
    n_z: int = 50
    filters: tuple[int, ...] = (25, 25, 50, 100, 200)
    kernel_length: int = 10
    pool_length: int = 3
    pool_stride: int = 3
    adaptive_bn: bool = False
    classifier_hidden: tuple[int, ...] = ()
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        self.classifier_hidden = tuple(int(h) for h in self.classifier_hidden)
        if self.n_z < 1:
            raise ValueError("n_z must be >= 1")
        if len(self.filters) < 2 or any(f < 1 for f in self.filters):
            raise ValueError("need at least two positive filter counts (temporal, spatial, ...)")
        if self.kernel_length < 1 or self.pool_length < 1 or self.pool_stride < 1:
            raise ValueError("kernel and pool sizes must be positive")

    def time_lengths(self, n_samples: int) -> list[int]:
        """Temporal length after each max-pool stage (convolutions keep length)."""
        lengths = []
        t = n_samples
        for _ in range(len(self.filters) - 1):
            t = (t - self.pool_length) // self.pool_stride + 1 if t >= self.pool_length else 0
            lengths.append(t)
        return lengths

    def check_length(self, n_samples: int) -> None:
        lengths = self.time_lengths(n_samples)
        if min(lengths) < 1:
            raise ValueError(
                f"window of {n_samples} samples is too short for the pooling stack "
                f"(stage lengths {lengths})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        d["classifier_hidden"] = list(self.classifier_hidden)
        return d


class AdaptiveBatchNorm1d(nn.BatchNorm1d):
    """BatchNorm1d that can keep normalising with mini-batch statistics in eval mode."""

    def __init__(self, num_features, eps=1e-5, momentum=0.1, adaptive=False):
        super().__init__(num_features, eps=eps, momentum=momentum)
        self.adaptive = adaptive

    def forward(self, x):
        if x.shape[0] < 2 and (self.training or self.adaptive):
            raise ValueError("batch statistics need a batch of at least 2 samples")
        if self.training or not self.adaptive:
            return super().forward(x)
        # batch statistics, running buffers untouched
        return F.batch_norm(x, None, None, self.weight, self.bias, True, 0.0, self.eps)


class MaxPool(nn.Module):
    """1-D max-pool; non-overlapping windows use a reshape, which is much faster on CPU."""

    def __init__(self, length: int, stride: int):
        super().__init__()
        self.length, self.stride = length, stride

    def forward(self, h):
        if self.length != self.stride:
            return F.max_pool1d(h, self.length, self.stride)
        T = h.shape[-1] // self.length
        return h[..., :T * self.length].unflatten(-1, (T, self.length)).amax(-1)


class PrivateEncoder(nn.Module):
    """Temporal conv, spatial conv across channels, then conv blocks; each stage is
    BN -> ELU -> max-pool. An adaptive average pool over the (feature, time) plane
    gives the n_z-dimensional representation.

    The temporal and spatial kernels are kept as separate parameters but applied
    as their composition, one multichannel convolution.
    """

    def __init__(self, cfg: EncoderConfig, in_channels: int):
        super().__init__()
        if in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        self.cfg = cfg
        self.in_channels = in_channels
        f, k = cfg.filters, cfg.kernel_length
        self.pad = ((k - 1) // 2, k - 1 - (k - 1) // 2)
        pool = (cfg.pool_length, cfg.pool_stride)
        bn = dict(eps=cfg.bn_eps, momentum=cfg.bn_momentum, adaptive=cfg.adaptive_bn)

        self.conv_time = nn.Conv2d(1, f[0], (1, k))
        self.conv_spat = nn.Conv2d(f[0], f[1], (in_channels, 1), bias=False)
        stages = [nn.Sequential(AdaptiveBatchNorm1d(f[1], **bn), nn.ELU(), MaxPool(*pool))]
        for f_in, f_out in zip(f[1:-1], f[2:]):
            stages.append(nn.Sequential(
                nn.ConstantPad1d(self.pad, 0.0),  # "same" length, extra sample on the right
                nn.Conv1d(f_in, f_out, k, bias=False),
                AdaptiveBatchNorm1d(f_out, **bn),
                nn.ELU(),
                MaxPool(*pool),
            ))
        self.stages = nn.ModuleList(stages)
        self.pool_out = nn.AdaptiveAvgPool2d((cfg.n_z, 1))

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, L) input, got {tuple(x.shape)}")
        self.cfg.check_length(x.shape[-1])
        w_time = self.conv_time.weight[:, 0, 0, :]  # (F0, k)
        w_spat = self.conv_spat.weight[:, :, :, 0]  # (F1, F0, C)
        w = torch.einsum("gfc,fk->gck", w_spat, w_time)
        b = torch.einsum("gfc,f->g", w_spat, self.conv_time.bias)
        h = F.conv1d(F.pad(x, self.pad), w, b)  # (B, F1, L)
        for stage in self.stages:
            h = stage(h)
        # (B, F, T) -> (B, 1, F, T): pool over features and time to (n_z, 1)
        return self.pool_out(h.unsqueeze(1)).flatten(1)


class SharedClassifier(nn.Module):
    def __init__(self, n_z: int, hidden: tuple[int, ...] = (), n_out: int = N_CLASSES):
        super().__init__()
        layers: list[nn.Module] = []
        width = n_z
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ELU()]
            width = h
        layers.append(nn.Linear(width, n_out))
        self.net = nn.Sequential(*layers)
        self.n_z = n_z

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.n_z:
            raise ValueError(f"expected (N, {self.n_z}) representations, got {tuple(z.shape)}")
        return self.net(z)


def cross_entropy(logits, y):
    """Softmax + negative log-likelihood, mean over the stacked rows."""
    if logits.shape[0] != y.shape[0]:
        raise ValueError("logits and labels have different row counts")
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    return F.cross_entropy(logits, y)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, lam):
        ctx.lam = lam
        return z.view_as(z)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grad_reverse(z, lam: float = 1.0):
    """Identity forward; multiplies the incoming gradient by -lam on the way back."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return _GradReverse.apply(z, float(lam))


class ChannelAdapter(nn.Module):
    """Learned time-pointwise linear map C_k -> C_common."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if out_channels > in_channels:
            raise ValueError("adapter cannot expand the channel count")
        self.weight = nn.Parameter(torch.eye(out_channels, in_channels))

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.weight.shape[1]:
            raise ValueError(f"expected (B, {self.weight.shape[1]}, L), got {tuple(x.shape)}")
        return torch.einsum("oc,bcl->bol", self.weight, x)


def dann_lambda(progress: float) -> float:
    """Reversal weight ramp 2/(1+exp(-10p)) - 1 for training progress p in [0, 1]."""
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


# variant topology
PRIVATE_VARIANTS = ("dape", "adape", "local")
SHARED_VARIANTS = ("global", "dann")
VARIANTS = ("local", "global", "dann", "dape", "adape")


@dataclass
class SourceShape:
    channels: int
    window_samples: int


class MultiSourceNet(nn.Module):
    """All trainable pieces of one variant.

    dape/adape: one private encoder per source, one shared classifier.
    local: one encoder and one classifier per source.
    global/dann: per-source channel adapters, one shared encoder and classifier;
    inputs are cropped to the shortest window so sources can share a batch.
    dann adds a source-ID head behind a gradient reversal layer.
    """

    def __init__(self, variant: str, cfg: EncoderConfig, sources: list[SourceShape]):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if variant == "adape" and not cfg.adaptive_bn:
            cfg = EncoderConfig(**{**cfg.to_dict(), "adaptive_bn": True})
        self.variant = variant
        self.cfg = cfg
        self.sources = list(sources)
        M = len(sources)
        if variant in PRIVATE_VARIANTS:
            self.encoders = nn.ModuleList(PrivateEncoder(cfg, s.channels) for s in sources)
            n_cls = M if variant == "local" else 1
            self.classifiers = nn.ModuleList(
                SharedClassifier(cfg.n_z, cfg.classifier_hidden) for _ in range(n_cls))
        else:
            c_common = min(s.channels for s in sources)
            self.common_length = min(s.window_samples for s in sources)
            self.adapters = nn.ModuleList(ChannelAdapter(s.channels, c_common) for s in sources)
            self.encoders = nn.ModuleList([PrivateEncoder(cfg, c_common)])
            self.classifiers = nn.ModuleList([SharedClassifier(cfg.n_z, cfg.classifier_hidden)])
            if variant == "dann":
                self.domain_head = nn.Sequential(nn.Linear(cfg.n_z, 100), nn.ReLU(), nn.Linear(100, M))

    @property
    def private(self) -> bool:
        return self.variant in PRIVATE_VARIANTS

    def encode(self, k: int, x):
        """Representations of a batch from source k alone."""
        if self.private:
            return self.encoders[k](x)
        return self.encoders[0](self.adapters[k](x[..., :self.common_length]))

    def encode_all(self, xs: list):
        """One batch per source -> list of latent batches. Shared variants push
        the sources through the encoder as one stacked batch."""
        if self.private:
            return [enc(x) for enc, x in zip(self.encoders, xs)]
        h = torch.cat([self.adapters[k](x[..., :self.common_length]) for k, x in enumerate(xs)])
        z = self.encoders[0](h)
        return list(z.split([x.shape[0] for x in xs]))

    @contextmanager
    def batch_statistics(self, adaptive: bool):
        """Temporarily switch every batch norm between running and batch statistics
        for eval-mode forwards. Weights are untouched."""
        bns = [m for m in self.modules() if isinstance(m, AdaptiveBatchNorm1d)]
        saved = [m.adaptive for m in bns]
        for m in bns:
            m.adaptive = adaptive
        try:
            yield self
        finally:
            for m, a in zip(bns, saved):
                m.adaptive = a

    def classify(self, k: int, z):
        return self.classifiers[k if self.variant == "local" else 0](z)

    def classify_all(self, zs: list):
        """Stacked logits in source order."""
        if self.variant == "local":
            return torch.cat([c(z) for c, z in zip(self.classifiers, zs)])
        return self.classifiers[0](torch.cat(zs))


def eval_slices(n: int, batch_size: int, min_batch: int = 8) -> list[slice]:
    """Fixed-order inference batches; a trailing batch smaller than ``min_batch``
    is merged into the previous one."""
    if n < 1:
        return []
    edges = list(range(0, n, batch_size)) + [n]
    if len(edges) > 2 and edges[-1] - edges[-2] < min_batch:
        del edges[-2]
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


@torch.no_grad()
def encode_source(net: MultiSourceNet, k: int, X, batch_size: int = 32, min_batch: int = 8):
    """Eval-mode representations of source k's windows, batched deterministically."""
    was_training = net.training
    net.eval()
    X = torch.as_tensor(X)
    out = [net.encode(k, X[s]) for s in eval_slices(len(X), batch_size, min_batch)]
    net.train(was_training)
    return torch.cat(out)


@torch.no_grad()
def predict_source(net: MultiSourceNet, k: int, X, batch_size: int = 32, min_batch: int = 8):
    z = encode_source(net, k, X, batch_size, min_batch)
    net_mode = net.training
    net.eval()
    logits = net.classify(k, z)
    net.train(net_mode)
    return logits
