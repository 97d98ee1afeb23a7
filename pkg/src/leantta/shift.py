"""Synthetic distribution shifts, labeled datasets and test-stream builders.

Severity tables (index = severity - 1):

=============  ==============================================  =========
kind           parameter                                        data
=============  ==============================================  =========
gaussian-noise sigma 0.04, 0.08, 0.12, 0.18, 0.26               any
shot-noise     variance x * c, c = 0.005, 0.01, 0.02, 0.04, 0.08  any
brightness     additive 0.1, 0.2, 0.3, 0.4, 0.5                  any
contrast       factor 0.75, 0.6, 0.45, 0.3, 0.15 about the mean   any
box-blur       radius 1..5 pixels (window 2r + 1, edge-replicate) images
mean-shift     additive 0.2 * s per feature                       any
scale-shift    multiply by 1 + 0.15 * s                           any
identity       none                                               any
=============  ==============================================  =========

Rank 3/4 tensors are images (values clamped to [0, 1] after corruption);
rank 1/2 tensors are feature vectors. The shot-noise entry is a Gaussian
approximation of Poisson noise.
"""

import enum
import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from leantta.container import Reader, Writer
from leantta.errors import ConfigError, FormatError, ShapeError, VersionError
from leantta.graph import atomic_write

DATASET_MAGIC = b"LTTD"
DATASET_VERSION = 1


class Corruption(str, enum.Enum):
    IDENTITY = "identity"
    GAUSSIAN_NOISE = "gaussian-noise"
    SHOT_NOISE = "shot-noise"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    BOX_BLUR = "box-blur"
    MEAN_SHIFT = "mean-shift"
    SCALE_SHIFT = "scale-shift"

    @property
    def code(self):
        return list(Corruption).index(self)

    @classmethod
    def from_code(cls, code):
        members = list(cls)
        if not 0 <= code < len(members):
            raise ConfigError(f"unknown corruption code {code}")
        return members[code]


SEVERITY_TABLE = {
    Corruption.GAUSSIAN_NOISE: (0.04, 0.08, 0.12, 0.18, 0.26),
    Corruption.SHOT_NOISE: (0.005, 0.01, 0.02, 0.04, 0.08),
    Corruption.BRIGHTNESS: (0.1, 0.2, 0.3, 0.4, 0.5),
    Corruption.CONTRAST: (0.75, 0.6, 0.45, 0.3, 0.15),
    Corruption.BOX_BLUR: (1, 2, 3, 4, 5),
    Corruption.MEAN_SHIFT: tuple(0.2 * s for s in range(1, 6)),
    Corruption.SCALE_SHIFT: tuple(1.0 + 0.15 * s for s in range(1, 6)),
}

SEVERITIES = (1, 2, 3, 4, 5)
GRADUAL_SEVERITIES = (1, 2, 3, 4, 5, 4, 3, 2, 1)


@dataclass(frozen=True)
class ShiftSpec:
    kind: Corruption
    severity: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", Corruption(self.kind))
        if self.kind is not Corruption.IDENTITY and self.severity not in SEVERITIES:
            raise ConfigError(f"severity must be in 1..5, got {self.severity}")

    @property
    def parameter(self):
        if self.kind is Corruption.IDENTITY:
            return None
        return SEVERITY_TABLE[self.kind][self.severity - 1]


def _sample_axes(ndim):
    # per-sample reduction axes: everything except a leading batch axis
    return tuple(range(1, ndim)) if ndim in (2, 4) else tuple(range(ndim))


def apply_corruption(x, spec, rng_seed=0):
    """Corrupt ``x`` (float32 out); deterministic for a fixed ``rng_seed``."""
    x = np.asarray(x, dtype=np.float32)
    if not np.isfinite(x).all():
        raise ShapeError("apply_corruption: input contains NaN or Inf")
    kind = spec.kind
    if kind is Corruption.IDENTITY:
        return x.copy()
    image = x.ndim >= 3
    p = spec.parameter
    xd = x.astype(np.float64)
    rng = np.random.default_rng(rng_seed)
    if kind is Corruption.GAUSSIAN_NOISE:
        y = xd + rng.normal(0.0, p, size=x.shape)
    elif kind is Corruption.SHOT_NOISE:
        y = xd + rng.normal(size=x.shape) * np.sqrt(np.maximum(xd, 0.0) * p)
    elif kind is Corruption.BRIGHTNESS or kind is Corruption.MEAN_SHIFT:
        y = xd + p
    elif kind is Corruption.CONTRAST:
        mean = xd.mean(axis=_sample_axes(x.ndim), keepdims=True)
        y = mean + p * (xd - mean)
    elif kind is Corruption.SCALE_SHIFT:
        y = xd * p
    elif kind is Corruption.BOX_BLUR:
        if not image:
            raise ShapeError(f"box-blur needs image data (rank 3 or 4), got rank {x.ndim}")
        size = [1] * (x.ndim - 2) + [2 * p + 1] * 2
        y = uniform_filter(xd, size=size, mode="nearest")
    else:  # pragma: no cover
        raise ConfigError(f"unhandled corruption {kind}")
    if image:
        y = np.clip(y, 0.0, 1.0)
    return y.astype(np.float32)


# -- datasets -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Samples stacked along axis 0 plus integer labels.

    Streams carry the optional annotation arrays: a stable ``sample_ids`` per
    item and the ``kinds`` / ``severities`` of the shift applied to it.
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    sample_ids: np.ndarray = None
    kinds: np.ndarray = None
    severities: np.ndarray = None

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float32)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim < 2:
            raise ShapeError("inputs must be stacked samples with a leading axis")
        if len(x) != len(y):
            raise ShapeError(f"{len(x)} inputs but {len(y)} labels")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        ann = [self.sample_ids, self.kinds, self.severities]
        if any(a is not None for a in ann):
            if any(a is None for a in ann):
                raise ConfigError("stream annotations must be given together")
            ids = np.asarray(self.sample_ids, dtype=np.uint64).reshape(-1)
            kinds = np.asarray(self.kinds, dtype=np.uint8).reshape(-1)
            sev = np.asarray(self.severities, dtype=np.uint8).reshape(-1)
            if not len(ids) == len(kinds) == len(sev) == len(y):
                raise ShapeError("annotation arrays must match the sample count")
            object.__setattr__(self, "sample_ids", ids)
            object.__setattr__(self, "kinds", kinds)
            object.__setattr__(self, "severities", sev)

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.inputs.shape[1:]

    @property
    def annotated(self):
        return self.sample_ids is not None

    def subset(self, index):
        index = np.asarray(index)
        if self.annotated:
            return LabeledDataset(self.inputs[index], self.labels[index], self.num_classes,
                                  self.sample_ids[index], self.kinds[index], self.severities[index])
        return LabeledDataset(self.inputs[index], self.labels[index], self.num_classes)

    def ids(self):
        return self.sample_ids if self.annotated else np.arange(len(self), dtype=np.uint64)

    def spec_at(self, i):
        if not self.annotated:
            return ShiftSpec(Corruption.IDENTITY)
        return ShiftSpec(Corruption.from_code(int(self.kinds[i])), int(self.severities[i]) or 1)

    def __iter__(self):
        """Yield ``(x, label, ShiftSpec, sample_id)`` with ``x`` batched to size 1."""
        ids = self.ids()
        for i in range(len(self)):
            yield self.inputs[i:i + 1], int(self.labels[i]), self.spec_at(i), int(ids[i])


def encode_dataset(ds):
    w = Writer()
    w.raw(DATASET_MAGIC)
    w.u32(DATASET_VERSION)
    w.u32(ds.num_classes)
    w.u64(len(ds))
    w.shape(ds.sample_shape)
    w.u8(int(ds.annotated))
    w.raw(ds.inputs.astype("<f4").tobytes())
    w.raw(ds.labels.astype("<u2").tobytes())
    if ds.annotated:
        w.raw(ds.sample_ids.astype("<u8").tobytes())
        w.raw(ds.kinds.astype("u1").tobytes())
        w.raw(ds.severities.astype("u1").tobytes())
    return w.getvalue()


def decode_dataset(data):
    r = Reader(data)
    magic = r.raw(4, "magic")
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", 0)
    version = r.u32("format version")
    if version != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {version}", 4)
    num_classes = r.u32("class count")
    n = r.u64("sample count")
    shape = r.shape("sample shape")
    annotated = r.u8("annotation flag")
    per = int(np.prod(shape, dtype=np.int64))
    x = np.frombuffer(r.raw(4 * n * per, "f32 data block"), dtype="<f4").reshape((n,) + shape)
    labels = np.frombuffer(r.raw(2 * n, "u16 label block"), dtype="<u2")
    ann = {}
    if annotated:
        ann["sample_ids"] = np.frombuffer(r.raw(8 * n, "sample id block"), dtype="<u8")
        ann["kinds"] = np.frombuffer(r.raw(n, "kind block"), dtype="u1")
        ann["severities"] = np.frombuffer(r.raw(n, "severity block"), dtype="u1")
    r.expect_end()
    try:
        return LabeledDataset(x.astype(np.float32), labels.astype(np.int64), num_classes, **ann)
    except (ShapeError, ConfigError) as exc:
        raise FormatError(f"dataset file is inconsistent: {exc}") from None


def save_dataset(ds, path):
    atomic_write(path, encode_dataset(ds))


def load_dataset(path):
    return decode_dataset(Path(path).read_bytes())


def corrupt_dataset(ds, spec, seed=0):
    """Corrupt every sample; sample ``i`` uses noise seed ``(seed, i)``."""
    out = np.empty_like(ds.inputs)
    for i in range(len(ds)):
        out[i] = apply_corruption(ds.inputs[i:i + 1], spec, _item_seed(seed, i))[0]
    return LabeledDataset(out, ds.labels.copy(), ds.num_classes, ds.sample_ids, ds.kinds, ds.severities)


# -- streams ------------------------------------------------------------------------


class StreamMode(str, enum.Enum):
    ABRUPT = "abrupt"
    GRADUAL = "gradual"


@dataclass(frozen=True)
class StreamSpec:
    mode: StreamMode
    per_cell: int
    kinds: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", StreamMode(self.mode))
        object.__setattr__(self, "kinds", tuple(Corruption(k) for k in self.kinds))
        if self.per_cell < 1:
            raise ConfigError("per-cell sample count K must be >= 1")
        if not self.kinds:
            raise ConfigError("stream needs at least one corruption kind")


def _item_seed(seed, item):
    return np.random.SeedSequence([int(seed), int(item)])


def _build(base, cells, spec, shuffle):
    k = spec.per_cell
    if len(base) < k:
        raise ConfigError(f"base dataset has {len(base)} samples, need at least K={k}")
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0x5EED]))
    xs, labels, kinds, sevs = [], [], [], []
    for kind, sev in cells:
        picks = rng.choice(len(base), size=k, replace=False)
        for j in picks:
            item = len(labels)
            cs = ShiftSpec(kind, sev)
            xs.append(apply_corruption(base.inputs[j:j + 1], cs, _item_seed(spec.seed, item))[0])
            labels.append(base.labels[j])
            kinds.append(kind.code)
            sevs.append(sev)
    ids = np.arange(len(labels), dtype=np.uint64)
    order = rng.permutation(len(labels)) if shuffle else ids.astype(np.int64)
    ds = LabeledDataset(np.stack(xs), np.asarray(labels), base.num_classes, ids, kinds, sevs)
    return ds.subset(order)


def build_abrupt_stream(base, spec):
    """K samples per (kind, severity) cell, then one global shuffle."""
    cells = [(kind, s) for kind in spec.kinds for s in SEVERITIES]
    return _build(base, cells, spec, shuffle=True)


def build_gradual_stream(base, spec):
    """Per kind, severities 1..5..1 with K samples each; kinds in list order."""
    cells = [(kind, s) for kind in spec.kinds for s in GRADUAL_SEVERITIES]
    return _build(base, cells, spec, shuffle=False)


def build_stream(base, spec):
    if spec.mode is StreamMode.ABRUPT:
        return build_abrupt_stream(base, spec)
    return build_gradual_stream(base, spec)


def clean_stream(base, n=None, seed=0):
    """Unshifted stream of ``n`` distinct base samples (identity kind)."""
    n = len(base) if n is None else n
    if n > len(base):
        raise ConfigError(f"requested {n} clean samples from a base of {len(base)}")
    idx = np.random.default_rng(seed).permutation(len(base))[:n]
    sub = base.subset(idx)
    return LabeledDataset(sub.inputs, sub.labels, base.num_classes, np.arange(n, dtype=np.uint64),
                          np.full(n, Corruption.IDENTITY.code), np.zeros(n, dtype=np.uint8))


def produce_in_background(items, capacity=8):
    """Iterate ``items`` from a producer thread through a bounded FIFO queue.

    The producer blocks while the queue holds ``capacity`` items. Exceptions
    raised by the producer are re-raised in the consumer.
    """
    if capacity < 1:
        raise ConfigError("queue capacity must be >= 1")
    q = queue.Queue(maxsize=capacity)
    done = object()
    stop = threading.Event()

    def put(item):
        while not stop.is_set():
            try:
                q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def produce():
        try:
            for item in items:
                if not put(item):
                    return
            put(done)
        except BaseException as exc:  # forwarded to the consumer
            put(exc)

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        t.join(timeout=1.0)
