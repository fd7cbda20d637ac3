"""Siamese change-detection network with MK-MMD feature alignment.

Both acquisition dates go through one convolutional branch (a single set of
parameters, not two copies). The branch outputs are fused by their absolute
difference and classified by a dense head::

    conv3x3 -> relu -> conv3x3 -> relu -> [maxpool2] -> flatten
    |f(t1) - f(t2)| -> dense -> relu -> dense -> relu -> dense(2)

The post-activation outputs of the two hidden dense layers are the adapted
features: during training their source/target discrepancy, measured by the
linear-time MK-MMD, is added to the classification loss with weight
``lam``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import PatchSampler, Raster, read_container, write_container
from .kernels import MultiKernel, make_kernel_family
from .mmd import MmdEstimate, mmd2_linear, optimize_beta

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DSDA1"
MODES = ("dsdanet", "dscnet_v1", "dscnet_v2", "dscnet_v3")


@dataclass
class NetworkConfig:
    patch_size: int = 9
    bands: int = 4
    conv_widths: tuple = (16, 32)
    dense_widths: tuple = (128, 64)
    kernel_size: int = 3
    pool: int = 2

    def __post_init__(self):
        self.conv_widths = tuple(int(c) for c in self.conv_widths)
        self.dense_widths = tuple(int(d) for d in self.dense_widths)
        self.validate()

    def validate(self):
        if self.patch_size % 2 == 0 or self.patch_size < 5:
            raise ValueError(f"patch size must be odd and >= 5, got {self.patch_size}")
        if self.bands < 1:
            raise ValueError("need at least one band")
        if len(self.dense_widths) != 2:
            raise ValueError("exactly two adapted dense layers are required")
        if not self.conv_widths or min(self.conv_widths + self.dense_widths) < 1:
            raise ValueError("layer widths must be positive")
        if self.conv_extent < 1:
            raise ValueError(f"patch {self.patch_size} is too small for {len(self.conv_widths)} convolutions")

    @property
    def conv_extent(self):
        return self.patch_size - len(self.conv_widths) * (self.kernel_size - 1)

    @property
    def uses_pool(self):
        # pool only when the pre-pool extent divides evenly
        return self.conv_extent >= self.pool and self.conv_extent % self.pool == 0

    @property
    def feature_extent(self):
        e = self.conv_extent
        return e // self.pool if self.uses_pool else e

    @property
    def fused_size(self):
        return self.feature_extent**2 * self.conv_widths[-1]

    def to_dict(self):
        d = asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        d["dense_widths"] = list(self.dense_widths)
        return d


class Network:
    """Parameters of the siamese branch and the dense head.

    ``branch`` is one list of conv layers used for both dates, so weight
    sharing holds by construction.
    """

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        k = config.kernel_size
        self.branch = []
        channels = config.bands
        for width in config.conv_widths:
            self.branch.append(nn.init_conv2d(k, k, channels, width, rng))
            channels = width
        self.head = []
        fan_in = config.fused_size
        for width in config.dense_widths + (2,):
            self.head.append(nn.init_dense(fan_in, width, rng))
            fan_in = width
        self.kernels = [None, None]

    @property
    def layers(self):
        return self.branch + self.head

    @property
    def classifier(self):
        return self.head[-1]

    def parameters(self):
        return [a for layer in self.layers for a in layer.arrays]

    def copy(self):
        other = Network.__new__(Network)
        other.config = self.config
        other.branch = [nn.LayerParams(l.kind, l.weights.copy(), l.bias.copy()) for l in self.branch]
        other.head = [nn.LayerParams(l.kind, l.weights.copy(), l.bias.copy()) for l in self.head]
        other.kernels = list(self.kernels)
        return other


def _branch_forward(net, x):
    cache = []
    h = x
    for layer in net.branch:
        z = nn.conv2d_forward(h, layer)
        cache.append((h, z))
        h = nn.relu_forward(z)
    pool_idx = None
    pre_pool_shape = h.shape
    if net.config.uses_pool:
        h, pool_idx = nn.maxpool2d_forward(h, net.config.pool)
    return h, (cache, pool_idx, pre_pool_shape)


def _branch_backward(net, bcache, upstream):
    cache, pool_idx, pre_pool_shape = bcache
    grads = []
    g = upstream
    if pool_idx is not None:
        g = nn.maxpool2d_backward(g, pool_idx, pre_pool_shape, net.config.pool)
    for layer, (h_in, z) in zip(reversed(net.branch), reversed(cache)):
        g = nn.relu_backward(z, g)
        lg, g = nn.conv2d_backward(h_in, layer, g)
        grads = lg + grads
    return grads


def forward(net, t1, t2):
    """Batched forward pass on ``(N, k, k, C)`` patch stacks.

    Returns logits ``(N, 2)`` and a cache whose ``"adapted"`` entry holds the
    two hidden dense activations.
    """
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    k, c = net.config.patch_size, net.config.bands
    if t1.shape != t2.shape or t1.shape[1:] != (k, k, c):
        raise nn.ShapeError(f"patches must be (N, {k}, {k}, {c}), got {t1.shape} and {t2.shape}")
    n = t1.shape[0]
    feats, bcache = _branch_forward(net, np.concatenate([t1, t2]))
    diff = feats[:n] - feats[n:]
    fused = np.abs(diff).reshape(n, -1)
    h = fused
    head_cache = []
    adapted = []
    for i, layer in enumerate(net.head):
        z = nn.dense_forward(h, layer)
        head_cache.append((h, z))
        if i < len(net.head) - 1:
            h = nn.relu_forward(z)
            adapted.append(h)
        else:
            h = z
    cache = {"branch": bcache, "diff": diff, "head": head_cache, "adapted": adapted}
    return h, cache


def backward(net, cache, dlogits, dadapted=None):
    """Gradients for every parameter, in :meth:`Network.parameters` order.

    ``dadapted`` optionally adds upstream gradients on the two adapted
    activations (from the MMD penalty).
    """
    head_grads = []
    g = dlogits
    last = len(net.head) - 1
    for i in range(last, -1, -1):
        h_in, z = cache["head"][i]
        if i < last:
            if dadapted is not None and dadapted[i] is not None:
                g = g + dadapted[i]
            g = nn.relu_backward(z, g)
        lg, g = nn.dense_backward(h_in, net.head[i], g)
        head_grads = lg + head_grads
    diff = cache["diff"]
    # subgradient of |x| taken as 0 at x == 0
    dfeat = np.sign(diff) * g.reshape(diff.shape)
    branch_grads = _branch_backward(net, cache["branch"], np.concatenate([dfeat, -dfeat]))
    return branch_grads + head_grads


def forward_pair(net, patch_t1, patch_t2):
    """Logits and adapted activations for a single patch pair."""
    logits, cache = forward(net, np.asarray(patch_t1)[None], np.asarray(patch_t2)[None])
    return logits[0], {"fused": np.abs(cache["diff"][0]).ravel(), "adapted": [a[0] for a in cache["adapted"]]}


@dataclass
class LossBreakdown:
    cd_loss: float
    mmd_penalties: list
    total: float

    def to_dict(self):
        return {"cd_loss": self.cd_loss, "mmd_penalties": list(self.mmd_penalties), "total": self.total}


def batch_loss(net, source, target, kernels, lam, unchanged_weight=1.0):
    """Classification loss on ``source`` plus ``lam`` times the MK-MMD penalties.

    ``source`` is ``(t1, t2, labels)``; ``target`` is ``(t1, t2)`` and may be
    ``None`` when ``lam == 0``. Unchanged source samples count
    ``unchanged_weight`` times in the classification mean. Returns
    ``(LossBreakdown, grads, estimates)``.
    """
    s1, s2, y = source
    if y is None:
        raise ValueError("source batch must be labeled")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    ns = len(y)
    weights = None if unchanged_weight == 1 else np.where(np.asarray(y) == 0, float(unchanged_weight), 1.0)
    if lam == 0 or target is None:
        logits, cache = forward(net, s1, s2)
        cd, dlogits = nn.softmax_cross_entropy(logits, y, weights)
        grads = backward(net, cache, dlogits)
        return LossBreakdown(cd, [0.0, 0.0], cd), grads, None
    t1, t2 = target[0], target[1]
    if len(t1) != ns:
        raise ValueError(f"source batch has {ns} pairs, target batch {len(t1)}")
    logits, cache = forward(net, np.concatenate([s1, t1]), np.concatenate([s2, t2]))
    cd, dsrc = nn.softmax_cross_entropy(logits[:ns], y, weights)
    dlogits = np.zeros_like(logits)
    dlogits[:ns] = dsrc
    penalties, estimates, dadapted = [], [], []
    for act, mk in zip(cache["adapted"], kernels):
        est, dhs, dht = mmd2_linear(act[:ns], act[ns:], mk, with_grad=True)
        penalties.append(est.d2)
        estimates.append(est)
        dadapted.append(lam * np.concatenate([dhs, dht]))
    grads = backward(net, cache, dlogits, dadapted)
    total = cd + lam * sum(penalties)
    return LossBreakdown(cd, penalties, total), grads, estimates


@dataclass
class TrainConfig:
    lam: float = 1.0
    batch_size: int = 64
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    beta_refresh_interval: int = 0  # batches between QP solves; 0 means once per epoch
    n_kernels: int = 5
    kernel_spread: float = 2.0
    mode: str = "dsdanet"
    unchanged_weight: float = 1.0  # weight of unchanged samples in the classification loss

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.unchanged_weight <= 0:
            raise ValueError("unchanged_weight must be positive")
        if self.batch_size < 2 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 2, epochs >= 0 and lr > 0 are required")


def _labeled_arrays(dataset):
    y = dataset.sample_labels()
    keep = y != 255
    return dataset.indices[keep], y[keep].astype(np.intp)


def _init_kernels(net, src_patches, tgt_patches, cfg):
    _, cache = forward(net, np.concatenate([src_patches[0], tgt_patches[0]]),
                       np.concatenate([src_patches[1], tgt_patches[1]]))
    return [make_kernel_family(a, cfg.n_kernels, cfg.kernel_spread) for a in cache["adapted"]]


def train(net, source, target, cfg):
    """Alternate SGD on the network with QP updates of the kernel weights.

    ``source`` must be labeled. In ``dsdanet`` mode ``target`` supplies
    unlabeled batches; ``dscnet_v1``/``dscnet_v3`` ignore it and train on
    the source alone. ``dscnet_v2`` trains on ``source`` as given, which the
    caller sets to the small labeled target set. Returns one dict per epoch.
    """
    coords, labels = _labeled_arrays(source)
    if len(coords) < cfg.batch_size:
        raise ValueError(f"{len(coords)} labeled samples is fewer than one batch of {cfg.batch_size}")
    adapt = cfg.mode == "dsdanet" and cfg.lam > 0
    lam = cfg.lam if cfg.mode == "dsdanet" else 0.0
    if adapt and target is None:
        raise ValueError("dsdanet mode needs target data")

    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    k = net.config.patch_size
    src_sampler = PatchSampler(source.t1, source.t2, k)
    tgt_sampler = PatchSampler(target.t1, target.t2, k) if adapt else None
    params = net.parameters()
    velocity = None
    history = []
    bs = cfg.batch_size
    n_batches = len(coords) // bs

    for epoch in range(cfg.epochs):
        order = src_rng.permutation(len(coords))
        cd_sum, pen_sum, tot_sum = 0.0, np.zeros(2), 0.0
        pooled_g = [[], []]
        for b in range(n_batches):
            pick = order[b * bs:(b + 1) * bs]
            s1, s2 = src_sampler.patches(coords[pick])
            tgt = None
            if adapt:
                t_pick = tgt_rng.choice(target.n, size=bs, replace=False)
                tgt = tgt_sampler.patches(target.indices[t_pick])
                if net.kernels[0] is None:
                    net.kernels = _init_kernels(net, (s1, s2), tgt, cfg)
            loss, grads, estimates = batch_loss(
                net, (s1, s2, labels[pick]), tgt, net.kernels, lam, cfg.unchanged_weight
            )
            velocity = nn.sgd_step(params, grads, cfg.lr, cfg.momentum, velocity)
            cd_sum += loss.cd_loss
            pen_sum += loss.mmd_penalties
            tot_sum += loss.total
            if estimates is not None:
                for i, est in enumerate(estimates):
                    pooled_g[i].append(est.g_samples)
                interval = cfg.beta_refresh_interval
                if interval and (b + 1) % interval == 0:
                    _refresh_beta(net, pooled_g)
                    pooled_g = [[], []]
        if adapt and pooled_g[0]:
            _refresh_beta(net, pooled_g)
        record = {
            "epoch": epoch,
            "mode": cfg.mode,
            "cd_loss": cd_sum / n_batches,
            "mmd_penalties": list(pen_sum / n_batches),
            "total": tot_sum / n_batches,
        }
        if adapt:
            record["beta"] = [list(mk.coefficients) for mk in net.kernels]
        log.info("epoch %d: %s", epoch, record)
        history.append(record)
    return history


def _refresh_beta(net, pooled_g):
    new = []
    for mk, chunks in zip(net.kernels, pooled_g):
        g = np.concatenate(chunks, axis=1)
        est = MmdEstimate(
            d2=float(mk.beta @ g.mean(axis=1)),
            per_kernel_d2=g.mean(axis=1),
            g_samples=g,
            variance=g.var(axis=1, ddof=1),
            beta=mk.beta,
        )
        new.append(mk.with_coefficients(optimize_beta(est)))
    net.kernels = new


def adapted_features(net, dataset, coords=None, chunk=2048):
    """Adapted activations ``[dense1, dense2]`` for the given pixel coordinates."""
    coords = dataset.indices if coords is None else np.asarray(coords).reshape(-1, 2)
    sampler = PatchSampler(dataset.t1, dataset.t2, net.config.patch_size)
    out = [[], []]
    for start in range(0, len(coords), chunk):
        p1, p2 = sampler.patches(coords[start:start + chunk])
        _, cache = forward(net, p1, p2)
        for i in range(2):
            out[i].append(cache["adapted"][i])
    return [np.concatenate(o) for o in out]


def finetune_classifier(net, target_labeled, epochs=200, lr=0.05, unchanged_weight=1.0):
    """Refit only the final dense layer on a few labeled target pixels.

    Features below the classifier are frozen, so they are computed once; each
    epoch is one full-batch gradient step on the mean cross-entropy. Unchanged
    samples count ``unchanged_weight`` times in that mean, which lets a
    balanced fine-tuning set keep the class ratio the network was trained
    under. Returns the per-epoch loss (measured before that epoch's step).
    """
    if unchanged_weight <= 0:
        raise ValueError("unchanged_weight must be positive")
    coords, y = _labeled_arrays(target_labeled)
    if len(coords) == 0:
        raise ValueError("fine-tuning set is empty")
    feats = adapted_features(net, target_labeled, coords)[1]
    weights = None if unchanged_weight == 1 else np.where(y == 0, float(unchanged_weight), 1.0)
    clf = net.classifier
    losses = []
    for _ in range(epochs):
        logits = nn.dense_forward(feats, clf)
        loss, dlogits = nn.softmax_cross_entropy(logits, y, weights)
        losses.append(loss)
        grads, _ = nn.dense_backward(feats, clf, dlogits)
        nn.sgd_step(clf.arrays, grads, lr, 0.0)
    return losses


def predict_proba(net, t1, t2, coords, chunk=4096):
    sampler = PatchSampler(t1, t2, net.config.patch_size)
    out = []
    for start in range(0, len(coords), chunk):
        p1, p2 = sampler.patches(coords[start:start + chunk])
        logits, _ = forward(net, p1, p2)
        out.append(nn.softmax(logits)[:, 1])
    return np.concatenate(out)


def infer_change_map(net, image_t1, image_t2, chunk=4096):
    """Per-pixel argmax over the two logits; 1 marks change."""
    t1 = image_t1 if isinstance(image_t1, Raster) else Raster(image_t1)
    t2 = image_t2 if isinstance(image_t2, Raster) else Raster(image_t2)
    if t1.shape != t2.shape:
        raise ValueError(f"dates differ in extent: {t1.shape} vs {t2.shape}")
    if t1.bands != net.config.bands:
        raise ValueError(f"network expects {net.config.bands} bands, rasters have {t1.bands}")
    h, w = t1.height, t1.width
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([rr.ravel(), cc.ravel()], axis=1)
    sampler = PatchSampler(t1, t2, net.config.patch_size)
    out = np.empty(len(coords), dtype=np.uint8)
    for start in range(0, len(coords), chunk):
        p1, p2 = sampler.patches(coords[start:start + chunk])
        logits, _ = forward(net, p1, p2)
        # ties resolve to unchanged
        out[start:start + chunk] = logits[:, 1] > logits[:, 0]
    return out.reshape(h, w)


def save_checkpoint(net, path, seed=None, extra=None):
    header = {
        "format": "DSDA1",
        "config": net.config.to_dict(),
        "layers": [
            {"kind": l.kind, "weights": list(l.weights.shape), "bias": list(l.bias.shape)} for l in net.layers
        ],
        "kernels": [
            None if mk is None else {"bandwidths": list(mk.bandwidths), "beta": list(mk.coefficients)}
            for mk in net.kernels
        ],
        "seed": seed,
    }
    if extra:
        header["extra"] = extra
    payload = b"".join(a.astype("<f8").tobytes() for a in net.parameters())
    write_container(path, CHECKPOINT_MAGIC, header, payload)


def load_checkpoint(path):
    from .data import FormatError

    header, payload = read_container(path, CHECKPOINT_MAGIC)
    try:
        config = NetworkConfig(**header["config"])
        layer_meta = header["layers"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header: {exc}") from None
    net = Network(config, seed=0)
    if [(l["kind"], l["weights"], l["bias"]) for l in layer_meta] != [
        (l.kind, list(l.weights.shape), list(l.bias.shape)) for l in net.layers
    ]:
        raise FormatError(f"{path}: layer shapes do not match the stored config")
    expected = sum(a.size for a in net.parameters()) * 8
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype="<f8")
    pos = 0
    for a in net.parameters():
        a[...] = flat[pos:pos + a.size].reshape(a.shape)
        pos += a.size
    net.kernels = [
        None if k is None else MultiKernel(tuple(k["bandwidths"]), tuple(k["beta"])) for k in header["kernels"]
    ]
    return net, header
