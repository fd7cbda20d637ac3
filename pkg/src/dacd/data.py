"""Rasters, patch-pair datasets, sampling and the synthetic two-domain benchmark."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

RASTER_MAGIC = b"MTR1"
UNKNOWN = 255


class FormatError(ValueError):
    """Malformed or truncated container file."""


@dataclass
class Raster:
    values: np.ndarray  # (H, W, C) float64

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] < 1:
            raise ValueError(f"raster values must be (H, W, C), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("raster contains non-finite values")
        self.values = v

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def bands(self):
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape


def _header_bytes(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, magic, header, payload: bytes):
    """``magic | u64le header length | JSON header | payload``."""
    hb = _header_bytes(header)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(payload)


def read_container(path, magic):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(magic):
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    pos = len(magic)
    if len(blob) < pos + 8:
        raise FormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) < pos + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from None
    return header, blob[pos + hlen:]


def write_raster(raster, path):
    r = raster if isinstance(raster, Raster) else Raster(raster)
    header = {"height": r.height, "width": r.width, "bands": r.bands, "dtype": "f64le"}
    write_container(path, RASTER_MAGIC, header, r.values.astype("<f8").tobytes())


def read_raster(path):
    """Read an MTR1 raster exactly as stored (no rescaling)."""
    header, payload = read_container(path, RASTER_MAGIC)
    try:
        h, w, c = int(header["height"]), int(header["width"]), int(header["bands"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{path}: header lacks height/width/bands") from None
    if header.get("dtype") != "f64le":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    if h < 1 or w < 1 or c < 1:
        raise FormatError(f"{path}: empty extent {h}x{w}x{c}")
    expected = h * w * c * 8
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype="<f8").reshape(h, w, c).astype(np.float64)
    return Raster(values)


def write_label_map(labels, path):
    write_raster(Raster(np.asarray(labels, dtype=np.float64)[:, :, None]), path)


def read_label_map(path):
    r = read_raster(path)
    if r.bands != 1:
        raise FormatError(f"{path}: label map must have 1 band, has {r.bands}")
    v = r.values[:, :, 0]
    if not np.all(np.isin(v, (0, 1, UNKNOWN))):
        raise FormatError(f"{path}: label values must be 0, 1 or 255")
    return v.astype(np.uint8)


def write_pgm(change_map, path):
    """Binary PGM (P5, maxval 255) with change drawn as 255."""
    m = np.asarray(change_map)
    img = np.where(m > 0, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def normalize_minmax(raster):
    """Rescale every band to [0, 1]; constant bands map to 0."""
    v = raster.values
    lo = v.min(axis=(0, 1))
    span = v.max(axis=(0, 1)) - lo
    span = np.where(span > 0, span, 1.0)
    return Raster((v - lo) / span)


@dataclass
class DomainDataset:
    """Co-registered image pair plus the pixel coordinates that form samples.

    ``labels`` is an ``(H, W)`` map in {0, 1, 255} or ``None`` for unlabeled
    data. ``indices`` is an ``(n, 2)`` array of ``(row, col)``.
    """

    t1: Raster
    t2: Raster
    labels: np.ndarray | None = None
    indices: np.ndarray | None = None

    def __post_init__(self):
        if self.t1.shape != self.t2.shape:
            raise ValueError(f"dates differ in extent: {self.t1.shape} vs {self.t2.shape}")
        hw = self.t1.shape[:2]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != hw:
                raise ValueError(f"label map {self.labels.shape} does not match rasters {hw}")
        if self.indices is None:
            rr, cc = np.meshgrid(np.arange(hw[0]), np.arange(hw[1]), indexing="ij")
            self.indices = np.stack([rr.ravel(), cc.ravel()], axis=1)
        idx = np.asarray(self.indices, dtype=np.intp).reshape(-1, 2)
        if idx.size and (idx.min() < 0 or np.any(idx.max(axis=0) >= np.array(hw))):
            raise ValueError("sample index out of bounds")
        self.indices = idx

    @property
    def n(self):
        return len(self.indices)

    def sample_labels(self):
        if self.labels is None:
            raise ValueError("dataset carries no labels")
        return self.labels[self.indices[:, 0], self.indices[:, 1]]

    def subset(self, indices):
        return DomainDataset(self.t1, self.t2, self.labels, np.asarray(indices).reshape(-1, 2))


def extract_patch(raster, row, col, k):
    """``k x k x C`` window centred on ``(row, col)``, mirror-padded at borders."""
    if k % 2 == 0:
        raise ValueError(f"patch size must be odd, got {k}")
    values = raster.values if isinstance(raster, Raster) else np.asarray(raster)
    h, w = values.shape[:2]
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"centre ({row}, {col}) outside {h}x{w} raster")
    r = k // 2
    rows = _reflect(np.arange(row - r, row + r + 1), h)
    cols = _reflect(np.arange(col - r, col + r + 1), w)
    return values[np.ix_(rows, cols)].copy()


def _reflect(i, n):
    # mirror without repeating the edge sample; period 2(n-1)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i >= n, period - i, i)


class PatchSampler:
    """Vectorised patch extraction for many centres of one image pair."""

    def __init__(self, t1, t2, k):
        if k % 2 == 0:
            raise ValueError(f"patch size must be odd, got {k}")
        if t1.shape != t2.shape:
            raise ValueError(f"dates differ in extent: {t1.shape} vs {t2.shape}")
        self.k = k
        r = k // 2
        h, w = t1.shape[:2]
        self._rows = _reflect(np.arange(-r, h + r), h)
        self._cols = _reflect(np.arange(-r, w + r), w)
        offs = np.arange(k)
        self._dr = offs[:, None]
        self._dc = offs[None, :]
        self.t1 = t1.values[np.ix_(self._rows, self._cols)]
        self.t2 = t2.values[np.ix_(self._rows, self._cols)]

    def patches(self, coords):
        coords = np.asarray(coords, dtype=np.intp).reshape(-1, 2)
        rr = coords[:, 0, None, None] + self._dr
        cc = coords[:, 1, None, None] + self._dc
        return self.t1[rr, cc], self.t2[rr, cc]


def sample_training_set(dataset, fraction=0.1, max_ratio=4.0, seed=0):
    """Seeded random ``fraction`` of the labeled pixels, then class-capped.

    Unchanged samples are down-sampled so unchanged:changed <= ``max_ratio``.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    labels = dataset.sample_labels()
    known = dataset.indices[labels != UNKNOWN]
    if len(known) == 0:
        raise ValueError("no labeled pixels to sample from")
    rng = np.random.default_rng(seed)
    count = int(np.floor(fraction * len(known)))
    chosen = known[np.sort(rng.permutation(len(known))[:count])]
    y = dataset.labels[chosen[:, 0], chosen[:, 1]]
    changed, unchanged = chosen[y == 1], chosen[y == 0]
    cap = max_ratio * len(changed)
    if np.isfinite(cap) and len(unchanged) > cap:
        keep = np.sort(rng.permutation(len(unchanged))[: int(cap)])
        unchanged = unchanged[keep]
    merged = np.concatenate([changed, unchanged])
    order = np.lexsort((merged[:, 1], merged[:, 0]))
    return dataset.subset(merged[order])


def sample_finetune_set(dataset, count=200, seed=0):
    """``count`` labeled pixels, half changed and half unchanged when possible."""
    labels = dataset.sample_labels()
    changed = dataset.indices[labels == 1]
    unchanged = dataset.indices[labels == 0]
    if len(changed) + len(unchanged) == 0:
        raise ValueError("no labeled pixels to sample from")
    count = min(count, len(changed) + len(unchanged))
    n_changed = min(count // 2, len(changed))
    n_unchanged = min(count - n_changed, len(unchanged))
    n_changed = count - n_unchanged
    rng = np.random.default_rng(seed)
    pick_c = changed[np.sort(rng.permutation(len(changed))[:n_changed])]
    pick_u = unchanged[np.sort(rng.permutation(len(unchanged))[:n_unchanged])]
    return dataset.subset(np.concatenate([pick_c, pick_u]))


# Rows: water, vegetation, bare soil, built-up, cropland; columns: blue, green, red, NIR.
DEFAULT_SIGNATURES = (
    (0.06, 0.08, 0.05, 0.03),
    (0.04, 0.09, 0.05, 0.45),
    (0.16, 0.19, 0.24, 0.30),
    (0.26, 0.26, 0.28, 0.32),
    (0.08, 0.13, 0.10, 0.34),
)


@dataclass
class SynthSpec:
    height: int = 256
    width: int = 256
    bands: int = 4
    signatures: tuple = DEFAULT_SIGNATURES
    blob_scale: float = 10.0
    texture: float = 0.02
    changed_blobs: int = 8
    changed_fraction: float = 0.08
    noise: float = 0.03
    target_gain: tuple = (1.4, 0.6, 1.4, 0.6)
    target_bias: tuple = (0.1, -0.1, 0.05, -0.05)
    target_noise: float = 0.06

    def __post_init__(self):
        self.signatures = tuple(tuple(float(v) for v in row) for row in self.signatures)
        self.target_gain = tuple(float(g) for g in self.target_gain)
        self.target_bias = tuple(float(b) for b in self.target_bias)
        self.validate()

    @property
    def n_classes(self):
        return len(self.signatures)

    def validate(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"synthetic extent must be positive, got {self.height}x{self.width}")
        if self.bands < 1:
            raise ValueError("synthetic rasters need at least one band")
        if self.n_classes < 2:
            raise ValueError("synthetic scenes need at least two classes")
        if any(len(row) != self.bands for row in self.signatures):
            raise ValueError("every class signature needs one value per band")
        if len(self.target_gain) != self.bands or len(self.target_bias) != self.bands:
            raise ValueError("target gain and bias need one value per band")
        if not 0 <= self.changed_fraction < 1 or self.changed_blobs < 0:
            raise ValueError("changed fraction must be in [0, 1) and blob count non-negative")
        if self.noise < 0 or self.target_noise < 0 or self.blob_scale <= 0:
            raise ValueError("noise levels must be non-negative and blob scale positive")

    def to_dict(self):
        d = asdict(self)
        d["signatures"] = [list(r) for r in self.signatures]
        d["target_gain"] = list(self.target_gain)
        d["target_bias"] = list(self.target_bias)
        return d


def _class_field(spec, rng):
    fields = rng.standard_normal((spec.n_classes, spec.height, spec.width))
    smooth = np.stack([ndimage.gaussian_filter(f, spec.blob_scale, mode="wrap") for f in fields])
    return smooth.argmax(axis=0)


def _changed_mask(spec, rng):
    """Non-overlapping discs whose total area is ``changed_fraction`` of the scene."""
    h, w = spec.height, spec.width
    mask = np.zeros((h, w), dtype=bool)
    blob_id = np.full((h, w), -1)
    if spec.changed_blobs == 0 or spec.changed_fraction == 0:
        return mask, blob_id
    radius = np.sqrt(spec.changed_fraction * h * w / (np.pi * spec.changed_blobs))
    yy, xx = np.mgrid[0:h, 0:w]
    centres = []
    for attempt in range(10000):
        if len(centres) == spec.changed_blobs:
            break
        cy = rng.uniform(radius, h - radius)
        cx = rng.uniform(radius, w - radius)
        if all(np.hypot(cy - y0, cx - x0) > 2 * radius + 2 for y0, x0 in centres):
            centres.append((cy, cx))
    else:
        raise ValueError("could not place the requested changed blobs without overlap")
    for i, (cy, cx) in enumerate(centres):
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        mask |= disc
        blob_id[disc] = i
    return mask, blob_id


def _render(spec, classes, rng):
    sig = np.asarray(spec.signatures)
    texture = np.stack(
        [ndimage.gaussian_filter(rng.standard_normal(classes.shape), 2.0, mode="wrap") for _ in range(spec.bands)],
        axis=-1,
    )
    texture *= spec.texture / max(texture.std(), 1e-12)
    return sig[classes] + texture


def _make_scene(spec, rng):
    classes_t1 = _class_field(spec, rng)
    mask, blob_id = _changed_mask(spec, rng)
    shifts = rng.integers(1, spec.n_classes, size=max(spec.changed_blobs, 1))
    classes_t2 = classes_t1.copy()
    classes_t2[mask] = (classes_t1[mask] + shifts[blob_id[mask]]) % spec.n_classes
    clean_t1 = _render(spec, classes_t1, rng)
    clean_t2 = _render(spec, classes_t2, rng)
    return clean_t1, clean_t2, mask.astype(np.uint8)


def synth_generate(spec=None, seed=42):
    """Source and target scenes with the target under a per-band affine shift.

    Each scene is a smooth class partition rendered through the class
    signatures. The second date reassigns the classes inside a set of discs,
    which form the changed label. The target scene uses its own layout, then
    both of its dates pass through ``gain * x + bias`` before noise is added.
    """
    spec = spec or SynthSpec()
    spec.validate()
    src_seq, tgt_seq = np.random.SeedSequence(seed).spawn(2)
    src_rng = np.random.default_rng(src_seq)
    tgt_rng = np.random.default_rng(tgt_seq)

    s1, s2, s_lab = _make_scene(spec, src_rng)
    s1 = s1 + spec.noise * src_rng.standard_normal(s1.shape)
    s2 = s2 + spec.noise * src_rng.standard_normal(s2.shape)

    t1, t2, t_lab = _make_scene(spec, tgt_rng)
    gain = np.asarray(spec.target_gain)
    bias = np.asarray(spec.target_bias)
    t1 = gain * t1 + bias + spec.target_noise * tgt_rng.standard_normal(t1.shape)
    t2 = gain * t2 + bias + spec.target_noise * tgt_rng.standard_normal(t2.shape)

    source = DomainDataset(Raster(s1), Raster(s2), s_lab)
    target = DomainDataset(Raster(t1), Raster(t2), t_lab)
    return source, target


def save_dataset(dataset, directory, prefix):
    os.makedirs(directory, exist_ok=True)
    paths = {
        "t1": os.path.join(directory, f"{prefix}_t1.mtr"),
        "t2": os.path.join(directory, f"{prefix}_t2.mtr"),
        "labels": os.path.join(directory, f"{prefix}_labels.mtr"),
    }
    write_raster(dataset.t1, paths["t1"])
    write_raster(dataset.t2, paths["t2"])
    if dataset.labels is not None:
        write_label_map(dataset.labels, paths["labels"])
    return paths


def load_dataset(t1_path, t2_path, labels_path=None):
    labels = read_label_map(labels_path) if labels_path else None
    return DomainDataset(read_raster(t1_path), read_raster(t2_path), labels)
