"""Synthetic urban population with planted migrant/native behaviour.

Each resident has a home zone, a work zone and hourly call/SMS peaks. Per
observed day the resident is placed in one zone per hourly slice drawn from a
discrete Gaussian kernel around home (19:00-7:00) or work (7:00-19:00); calls
and SMS are drawn from a daily profile peaked at the resident's peak hours.

Migrants live on a ring around downtown or in the suburbs, tend to work near
industrial zones and call later in the evening; natives live and work
downtown. Everything is reproducible from ``GenConfig.seed``: truths come from
one random stream, features from per-block streams of ``BLOCK`` residents.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .model import HOURS

BLOCK = 512
WORK_HOURS = np.arange(7, 19)
HOME_HOURS = np.concatenate([np.arange(19, 24), np.arange(0, 7)])
PERIOD_SLICES = 12

MAGIC = b"CDDS"
FORMAT_VERSION = 1
UNLABELED = 255


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message names the offending section."""


class DatasetVersionError(DatasetFormatError):
    """Wrong magic bytes or unsupported format version."""


@dataclass(frozen=True)
class GenConfig:
    I: int = 24
    J: int = 24
    n_residents: int = 20000
    n_validation: int = 4000
    labeled_fraction: float = 0.1
    migrant_prior: float = 0.5
    days: int = 20
    downtown_center: tuple[float, float] = (11.5, 11.5)
    ring_radius: float = 7.0
    industrial_zones: tuple[tuple[int, int], ...] = ((4, 5), (19, 4), (4, 19), (19, 19))
    peak_shift_hours: float = 2.0
    noise_level: float = 0.5
    station_coverage: float = 0.9
    leaving_slope: float = 0.75
    seed: int = 0
    # 1 = migrants follow their own spatial priors, 0 = same priors as natives
    spatial_asymmetry: float = 1.0
    kernel_scale: float = 2.5
    calls_per_day: float = 3.0
    sms_per_day: float = 2.0
    peak_weight: float = 0.6
    peak_spread: float = 1.0
    leaving_base: float = 0.05
    # migrant homes cluster in enclave patches along the ring
    enclave_size: int = 2
    enclave_density: float = 0.5
    enclave_leak: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "downtown_center", tuple(float(v) for v in self.downtown_center))
        object.__setattr__(self, "industrial_zones", tuple(tuple(int(v) for v in z) for z in self.industrial_zones))
        if self.I < 1 or self.J < 1:
            raise ValueError("grid dimensions must be positive")
        if self.n_residents < 1 or self.n_validation < 0:
            raise ValueError("resident counts must be positive")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in [0, 1]")
        if not 0.0 < self.migrant_prior < 1.0:
            raise ValueError("migrant_prior must lie in (0, 1)")
        if self.days < 1:
            raise ValueError("days must be >= 1")
        if self.peak_shift_hours < 0:
            raise ValueError("peak_shift_hours must be >= 0")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")
        if not 0.0 < self.station_coverage <= 1.0:
            raise ValueError("station_coverage must lie in (0, 1]")
        if not 0.0 <= self.leaving_slope <= 1.0 or not 0.0 <= self.leaving_base <= 1.0 - self.leaving_slope:
            raise ValueError("leaving_slope and leaving_base must give probabilities in [0, 1]")
        if self.enclave_size < 1:
            raise ValueError("enclave_size must be >= 1")
        if not 0.0 <= self.enclave_density <= 1.0 or not 0.0 <= self.enclave_leak <= 0.5:
            raise ValueError("enclave_density must lie in [0, 1] and enclave_leak in [0, 0.5]")
        if not 0.0 <= self.spatial_asymmetry <= 1.0:
            raise ValueError("spatial_asymmetry must lie in [0, 1]")
        for zi, zj in self.industrial_zones:
            if not (0 <= zi < self.I and 0 <= zj < self.J):
                raise ValueError(f"industrial zone {(zi, zj)} outside the {self.I}x{self.J} grid")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["downtown_center"] = list(self.downtown_center)
        d["industrial_zones"] = [list(z) for z in self.industrial_zones]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GenConfig keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def n_labeled(self) -> int:
        return int(round(self.labeled_fraction * self.n_residents))


@dataclass
class Truths:
    """Ground truth per resident; used by evaluation only."""

    label: np.ndarray        # int8, 1 = migrant
    home: np.ndarray         # (n, 2) int zone coordinates
    work: np.ndarray
    call_peak: np.ndarray    # float hours
    sms_peak: np.ndarray
    leaving: np.ndarray      # bool
    has_events: np.ndarray   # bool, False when the resident made no call or SMS

    def __len__(self):
        return len(self.label)

    def subset(self, idx) -> "Truths":
        return Truths(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})


@dataclass
class Residents:
    """Feature matrices of a group of residents.

    ``R`` has shape ``(n, 2, I, J)`` with channel 0 = home period and
    channel 1 = working period; ``U`` has shape ``(n, 2, 24)`` with row 0 =
    calls and row 1 = SMS.
    """

    R: np.ndarray
    U: np.ndarray

    def __len__(self):
        return self.R.shape[0]

    def subset(self, idx) -> "Residents":
        return Residents(self.R[idx], self.U[idx])


@dataclass
class Dataset:
    config: GenConfig
    labeled: Residents
    labels: np.ndarray
    unlabeled: Residents
    validation: Residents
    # truths for labeled, unlabeled and validation residents, in that order
    truths: Truths
    coverage: np.ndarray = field(repr=False, default=None)

    @property
    def splits(self) -> dict[str, slice]:
        a, b = len(self.labeled), len(self.unlabeled)
        return {"labeled": slice(0, a), "unlabeled": slice(a, a + b), "validation": slice(a + b, len(self.truths))}

    def truth(self, split: str) -> Truths:
        return self.truths.subset(self.splits[split])

    def equals(self, other: "Dataset") -> bool:
        if self.config != other.config:
            return False
        pairs = [
            (self.labeled.R, other.labeled.R), (self.labeled.U, other.labeled.U),
            (self.unlabeled.R, other.unlabeled.R), (self.unlabeled.U, other.unlabeled.U),
            (self.validation.R, other.validation.R), (self.validation.U, other.validation.U),
            (self.labels, other.labels), (self.coverage, other.coverage),
        ]
        pairs += [(getattr(self.truths, f.name), getattr(other.truths, f.name)) for f in fields(Truths)]
        return all(a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b) for a, b in pairs)


# ----------------------------------------------------------------------------
# spatial priors
# ----------------------------------------------------------------------------

def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def coverage_mask(config: GenConfig) -> np.ndarray:
    """Boolean ``(I, J)`` map of zones that have a base station."""
    rng = _stream(config.seed, 0)
    n_zones = config.I * config.J
    n_cov = max(1, int(round(config.station_coverage * n_zones)))
    mask = np.zeros(n_zones, dtype=bool)
    mask[rng.permutation(n_zones)[:n_cov]] = True
    return mask.reshape(config.I, config.J)


def _normalise(w: np.ndarray, mask: np.ndarray) -> np.ndarray:
    w = np.where(mask, w, 0.0)
    if w.sum() == 0:
        w = mask.astype(float)
    return w / w.sum()


def enclave_share(config: GenConfig) -> np.ndarray:
    """Per-zone migrant share of home locations, before class priors.

    Square patches whose centre lies near the ring are enclaves with
    probability ``enclave_density``; enclaves get share ``1 - leak``, all
    other zones ``leak``.
    """
    rng = _stream(config.seed, 4)
    s = config.enclave_size
    pi, pj = -(-config.I // s), -(-config.J // s)
    ci, cj = config.downtown_center
    centres_i = (np.arange(pi) * s + (s - 1) / 2.0)[:, None]
    centres_j = (np.arange(pj) * s + (s - 1) / 2.0)[None, :]
    near_ring = np.abs(np.hypot(centres_i - ci, centres_j - cj) - config.ring_radius) <= 0.5 * config.ring_radius
    enclave = near_ring & (rng.random((pi, pj)) < config.enclave_density)
    share = np.where(enclave, 1.0 - config.enclave_leak, config.enclave_leak)
    return np.kron(share, np.ones((s, s)))[:config.I, :config.J]


def spatial_priors(config: GenConfig, mask: np.ndarray) -> dict[str, np.ndarray]:
    """Home and work zone distributions per class over covered zones."""
    ii, jj = np.meshgrid(np.arange(config.I), np.arange(config.J), indexing="ij")
    ci, cj = config.downtown_center
    d = np.hypot(ii - ci, jj - cj)
    r = config.ring_radius
    share = enclave_share(config)
    city = np.exp(-d ** 2 / (2 * r ** 2))
    native_home = _normalise(city * (1.0 - share), mask)
    migrant_home = _normalise(city * share, mask)
    native_work = _normalise(np.exp(-d ** 2 / (2 * (0.6 * r) ** 2)), mask)
    if config.industrial_zones:
        parks = sum(np.exp(-((ii - zi) ** 2 + (jj - zj) ** 2) / (2 * 1.5 ** 2)) for zi, zj in config.industrial_zones)
        migrant_work = 0.7 * _normalise(parks, mask) + 0.3 * native_work
    else:
        migrant_work = native_work
    a = config.spatial_asymmetry
    return {
        "native_home": native_home,
        "native_work": native_work,
        "migrant_home": a * migrant_home + (1 - a) * native_home,
        "migrant_work": a * migrant_work + (1 - a) * native_work,
    }


# ----------------------------------------------------------------------------
# truths and features
# ----------------------------------------------------------------------------

def sample_truths(config: GenConfig, n: int, mask: np.ndarray | None = None) -> Truths:
    """Draw ``n`` resident truths; depends on the seed but never on ``days``."""
    mask = coverage_mask(config) if mask is None else mask
    priors = spatial_priors(config, mask)
    rng = _stream(config.seed, 1)
    label = (rng.random(n) < config.migrant_prior).astype(np.int8)
    n_zones = config.I * config.J
    home = np.empty(n, dtype=np.int64)
    work = np.empty(n, dtype=np.int64)
    for cls, name in ((0, "native"), (1, "migrant")):
        sel = label == cls
        home[sel] = rng.choice(n_zones, size=sel.sum(), p=priors[f"{name}_home"].ravel())
        work[sel] = rng.choice(n_zones, size=sel.sum(), p=priors[f"{name}_work"].ravel())
    call_peak = 18.5 + config.peak_shift_hours * label + rng.normal(0.0, config.peak_spread, n)
    sms_peak = call_peak + rng.normal(0.5, 0.7, n)
    leaving_p = config.leaving_base + config.leaving_slope * label
    leaving = rng.random(n) < leaving_p
    return Truths(
        label=label,
        home=np.stack(np.unravel_index(home, (config.I, config.J)), axis=1),
        work=np.stack(np.unravel_index(work, (config.I, config.J)), axis=1),
        call_peak=np.clip(call_peak, 0.0, HOURS - 1.0),
        sms_peak=np.clip(sms_peak, 0.0, HOURS - 1.0),
        leaving=leaving,
        has_events=np.ones(n, dtype=bool),
    )


def _presence(rng, anchors: np.ndarray, config: GenConfig, mask: np.ndarray) -> np.ndarray:
    """Fraction of period hours spent per zone, for a block of residents."""
    b = anchors.shape[0]
    slices = PERIOD_SLICES * config.days
    sd = config.kernel_scale * config.noise_level
    recorded = rng.random((b, slices)) >= config.noise_level
    if sd > 0:
        off = np.rint(rng.normal(0.0, sd, (b, slices, 2))).astype(np.int64)
    else:
        off = np.zeros((b, slices, 2), dtype=np.int64)
    zi = anchors[:, None, 0] + off[..., 0]
    zj = anchors[:, None, 1] + off[..., 1]
    inside = (zi >= 0) & (zi < config.I) & (zj >= 0) & (zj < config.J)
    zi, zj = np.clip(zi, 0, config.I - 1), np.clip(zj, 0, config.J - 1)
    # no signaling record when the phone is silent, off-grid or out of coverage
    ok = recorded & inside & mask[zi, zj]
    flat = (np.arange(b)[:, None] * (config.I * config.J) + zi * config.J + zj)[ok]
    counts = np.bincount(flat, minlength=b * config.I * config.J).reshape(b, config.I, config.J)
    return counts / float(slices)


def _daily_profile(peaks: np.ndarray, weight: float) -> np.ndarray:
    hours = np.arange(HOURS)
    base = np.where((hours >= 7) & (hours <= 23), 1.0, 0.15)
    base = base / base.sum()
    bump = np.exp(-(hours[None, :] - peaks[:, None]) ** 2 / (2 * 1.5 ** 2))
    bump /= bump.sum(axis=1, keepdims=True)
    return (1 - weight) * base[None, :] + weight * bump


def _event_hours(rng, profile: np.ndarray, rate: float) -> np.ndarray:
    b = profile.shape[0]
    counts = rng.poisson(rate, b)
    owner = np.repeat(np.arange(b), counts)
    cdf = np.cumsum(profile, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(owner.size)
    hour = (u[:, None] > cdf[owner]).sum(axis=1)
    hist = np.zeros((b, HOURS))
    np.add.at(hist, (owner, hour), 1.0)
    return hist


def _normalise_rows(hist: np.ndarray) -> np.ndarray:
    total = hist.sum(axis=1, keepdims=True)
    return np.divide(hist, total, out=np.zeros_like(hist), where=total > 0)


def gen_block(truths: Truths, config: GenConfig, rng, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Features ``(R, U, has_events)`` for a block of residents."""
    Rh = _presence(rng, truths.home, config, mask)
    Rw = _presence(rng, truths.work, config, mask)
    calls = _event_hours(rng, _daily_profile(truths.call_peak, config.peak_weight), config.calls_per_day * config.days)
    sms = _event_hours(rng, _daily_profile(truths.sms_peak, config.peak_weight), config.sms_per_day * config.days)
    has_events = (calls.sum(axis=1) > 0) & (sms.sum(axis=1) > 0)
    R = np.stack([Rh, Rw], axis=1)
    U = np.stack([_normalise_rows(calls), _normalise_rows(sms)], axis=1)
    return R, U, has_events


def gen_resident(truth: Truths, config: GenConfig, rng: np.random.Generator, mask: np.ndarray | None = None):
    """``(R_h, R_w, U)`` for a single resident (``truth`` of length 1)."""
    mask = coverage_mask(config) if mask is None else mask
    R, U, _ = gen_block(truth, config, rng, mask)
    return R[0, 0], R[0, 1], U[0]


def gen_features(truths: Truths, config: GenConfig, mask: np.ndarray) -> Residents:
    n = len(truths)
    R = np.empty((n, 2, config.I, config.J))
    U = np.empty((n, 2, HOURS))
    for block, start in enumerate(range(0, n, BLOCK)):
        sl = slice(start, min(n, start + BLOCK))
        rng = _stream(config.seed, 2, block)
        R[sl], U[sl], truths.has_events[sl] = gen_block(truths.subset(sl), config, rng, mask)
    return Residents(R, U)


def stratified_indices(labels: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of a class-proportional subsample of ``size`` items."""
    n = len(labels)
    if size > n:
        raise ValueError(f"cannot draw {size} samples from {n}")
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = int(round(size * len(pos) / n))
    n_pos = min(max(n_pos, 1 if size >= 2 and len(pos) else 0), len(pos), size)
    n_neg = size - n_pos
    if n_neg > len(neg):
        n_neg, n_pos = len(neg), size - len(neg)
    chosen = np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)])
    return np.sort(chosen)


def gen_dataset(config: GenConfig) -> Dataset:
    n_lab = config.n_labeled
    if n_lab < 2:
        raise ValueError(
            f"labeled_fraction * n_residents = {config.labeled_fraction * config.n_residents:g} < 2; cannot stratify"
        )
    mask = coverage_mask(config)
    n_total = config.n_residents + config.n_validation
    truths = sample_truths(config, n_total, mask)
    feats = gen_features(truths, config, mask)
    rng = _stream(config.seed, 3)
    lab = stratified_indices(truths.label[:config.n_residents], n_lab, rng)
    rest = np.setdiff1d(np.arange(config.n_residents), lab)
    val = np.arange(config.n_residents, n_total)
    order = np.concatenate([lab, rest, val])
    return Dataset(
        config=config,
        labeled=feats.subset(lab),
        labels=truths.label[lab].copy(),
        unlabeled=feats.subset(rest),
        validation=feats.subset(val),
        truths=truths.subset(order),
        coverage=mask,
    )


def null_signal(config: GenConfig) -> GenConfig:
    """Same population with every planted class asymmetry removed."""
    return replace(config, peak_shift_hours=0.0, spatial_asymmetry=0.0)


# ----------------------------------------------------------------------------
# file format
# ----------------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.buf = memoryview(data)
        self.pos = 0
        self.section = "header"

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(f"file truncated in section {self.section!r} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        return np.frombuffer(self.take(np.dtype(dtype).itemsize * count), dtype=dtype, count=count)


def _write_sparse(out: io.BytesIO, matrix: np.ndarray):
    flat = matrix.ravel()
    idx = np.flatnonzero(flat)
    out.write(struct.pack("<I", idx.size))
    rec = np.empty(idx.size, dtype=[("i", "<u4"), ("v", "<f8")])
    rec["i"], rec["v"] = idx, flat[idx]
    out.write(rec.tobytes())


def _read_sparse(reader: _Reader, shape) -> np.ndarray:
    (count,) = reader.unpack("<I")
    rec = np.frombuffer(reader.take(12 * count), dtype=[("i", "<u4"), ("v", "<f8")], count=count)
    flat = np.zeros(int(np.prod(shape)))
    if count and rec["i"].max() >= flat.size:
        raise DatasetFormatError(f"zone index out of range in section {reader.section!r}")
    flat[rec["i"]] = rec["v"]
    return flat.reshape(shape)


def export_dataset(dataset: Dataset, path) -> None:
    """Write the dataset to ``path`` in the little-endian ``CDDS`` format."""
    c = dataset.config
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", FORMAT_VERSION))
    cfg = json.dumps(c.to_dict(), sort_keys=True).encode()
    out.write(struct.pack("<I", len(cfg)))
    out.write(cfg)
    counts = (len(dataset.labeled), len(dataset.unlabeled), len(dataset.validation))
    out.write(struct.pack("<III", *counts))
    out.write(np.asarray(dataset.coverage, dtype=np.uint8).tobytes())
    groups = [(dataset.labeled, dataset.labels), (dataset.unlabeled, None), (dataset.validation, None)]
    k = 0
    for residents, labels in groups:
        for i in range(len(residents)):
            label = UNLABELED if labels is None else int(labels[i])
            out.write(struct.pack("<BB", label, int(dataset.truths.leaving[k])))
            _write_sparse(out, residents.R[i, 0])
            _write_sparse(out, residents.R[i, 1])
            out.write(np.ascontiguousarray(residents.U[i], dtype="<f8").tobytes())
            k += 1
    t = dataset.truths
    out.write(t.label.astype("<i1").tobytes())
    out.write(t.home.astype("<u2").tobytes())
    out.write(t.work.astype("<u2").tobytes())
    out.write(t.call_peak.astype("<f8").tobytes())
    out.write(t.sms_peak.astype("<f8").tobytes())
    out.write(t.has_events.astype("<u1").tobytes())
    try:
        Path(path).write_bytes(out.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


def import_dataset(path) -> Dataset:
    reader = _Reader(Path(path).read_bytes())
    if bytes(reader.take(4) if len(reader.buf) >= 4 else b"") != MAGIC:
        raise DatasetVersionError(f"{path}: not a dataset file (bad magic)")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"{path}: unsupported dataset format version {version}")
    reader.section = "config"
    (length,) = reader.unpack("<I")
    try:
        config = GenConfig.from_dict(json.loads(bytes(reader.take(length)).decode()))
    except (ValueError, TypeError) as exc:
        raise DatasetFormatError(f"malformed section 'config': {exc}") from exc
    reader.section = "counts"
    n_lab, n_unl, n_val = reader.unpack("<III")
    n = n_lab + n_unl + n_val
    reader.section = "coverage"
    coverage = reader.array("u1", config.I * config.J).astype(bool).reshape(config.I, config.J)
    reader.section = "records"
    R = np.zeros((n, 2, config.I, config.J))
    U = np.empty((n, 2, HOURS))
    labels = np.empty(n_lab, dtype=np.int8)
    leaving = np.empty(n, dtype=bool)
    for k in range(n):
        label, leave = reader.unpack("<BB")
        if k < n_lab:
            if label not in (0, 1):
                raise DatasetFormatError(f"labeled record {k} carries label byte {label} in section 'records'")
            labels[k] = label
        elif label != UNLABELED:
            raise DatasetFormatError(f"record {k} should be unlabeled in section 'records'")
        leaving[k] = bool(leave)
        R[k, 0] = _read_sparse(reader, (config.I, config.J))
        R[k, 1] = _read_sparse(reader, (config.I, config.J))
        U[k] = reader.array("<f8", 2 * HOURS).reshape(2, HOURS)
    reader.section = "truths"
    truths = Truths(
        label=reader.array("<i1", n).astype(np.int8),
        home=reader.array("<u2", 2 * n).astype(np.int64).reshape(n, 2),
        work=reader.array("<u2", 2 * n).astype(np.int64).reshape(n, 2),
        call_peak=reader.array("<f8", n).astype(np.float64),
        sms_peak=reader.array("<f8", n).astype(np.float64),
        leaving=leaving,
        has_events=reader.array("<u1", n).astype(bool),
    )
    if reader.pos != len(reader.buf):
        raise DatasetFormatError("trailing bytes after section 'truths'")
    feats = Residents(R, U)
    return Dataset(
        config=config,
        labeled=feats.subset(slice(0, n_lab)),
        labels=labels,
        unlabeled=feats.subset(slice(n_lab, n_lab + n_unl)),
        validation=feats.subset(slice(n_lab + n_unl, n)),
        truths=truths,
        coverage=coverage,
    )
