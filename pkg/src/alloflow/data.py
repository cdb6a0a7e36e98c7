"""Synthetic clean distributions, parametric degradations and paired datasets.

Dataset file layout (little-endian)::

    b"AFDS" | u32 version=1 | u32 dim | u64 count
    | u32 len + UTF-8 canonical JSON provenance
    | count x (dim f64 z_H, dim f64 z_L)

Sample files (generated or restored points) use the same header with magic
``b"AFSM"`` and ``count x dim f64`` rows.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

DS_MAGIC = b"AFDS"
DS_VERSION = 1
SM_MAGIC = b"AFSM"
SM_VERSION = 1


class DataError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class DataSpec:
    """Clean-sample distribution.

    ``ring_mixture``: ``n_modes`` isotropic Gaussians of std ``mode_std`` at
    equally spaced angles on a circle of radius ``radius`` (dim must be 2).

    ``grid_image``: ``side x side`` patterns, each a sum of ``n_waves`` random
    plane waves with integer spatial frequencies up to ``max_freq`` and random
    phases, flattened row-major (dim must be ``side**2``).
    """

    kind: str = "ring_mixture"
    dim: int = 2
    n_modes: int = 8
    radius: float = 1.0
    mode_std: float = 0.1
    side: int = 4
    n_waves: int = 3
    max_freq: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind == "ring_mixture":
            if self.dim != 2:
                raise DataError("ring_mixture requires dim=2")
            if self.n_modes < 1 or self.radius < 0 or self.mode_std < 0:
                raise DataError("ring_mixture needs n_modes >= 1, radius >= 0, mode_std >= 0")
        elif self.kind == "grid_image":
            if self.side < 4 or self.dim != self.side**2:
                raise DataError("grid_image requires side >= 4 and dim = side**2")
            if self.n_waves < 1 or self.max_freq < 1:
                raise DataError("grid_image needs n_waves >= 1 and max_freq >= 1")
        else:
            raise DataError(f"unknown data kind {self.kind!r}")

    def mean(self) -> np.ndarray:
        # Both families are symmetric about the origin (uniform mode angles /
        # uniform phases).
        return np.zeros(self.dim)


@dataclass
class DegradeSpec:
    """``z_L = mean + contraction * (z_H - mean) + noise_std * eta``."""

    contraction: float = 0.8
    noise_std: float = 0.2
    seed: int = 1

    def __post_init__(self):
        if not (0.0 < self.contraction <= 1.0):
            raise DataError("contraction must lie in (0, 1]")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")


@dataclass
class PairedSample:
    z_h: np.ndarray
    z_l: np.ndarray


def sample_clean(spec: DataSpec, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw ``n`` i.i.d. clean vectors, shape ``(n, dim)``.

    Without ``rng`` the draw is seeded from ``spec.seed``.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if spec.kind == "ring_mixture":
        k = rng.integers(spec.n_modes, size=n)
        ang = 2.0 * np.pi * k / spec.n_modes
        centers = spec.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return centers + spec.mode_std * rng.standard_normal((n, 2))
    s = spec.side
    ii, jj = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    freqs = rng.integers(0, spec.max_freq + 1, size=(n, spec.n_waves, 2))
    # (0, 0) would be a constant offset; bump it to the lowest row frequency.
    dc = (freqs[..., 0] == 0) & (freqs[..., 1] == 0)
    freqs[..., 0][dc] = 1
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(n, spec.n_waves))
    arg = (freqs[..., 0, None, None] * ii + freqs[..., 1, None, None] * jj) * (2.0 * np.pi / s)
    img = np.sin(arg + phase[..., None, None]).sum(axis=1) * np.sqrt(2.0 / spec.n_waves)
    return img.reshape(n, s * s)


def degrade(z_h, spec: DegradeSpec, mean, rng: np.random.Generator) -> np.ndarray:
    z_h = np.asarray(z_h, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape[-1] != z_h.shape[-1]:
        raise DataError(f"dimension mismatch: {z_h.shape} vs mean {mean.shape}")
    eta = rng.standard_normal(z_h.shape)
    return mean + spec.contraction * (z_h - mean) + spec.noise_std * eta


class PairedDataset:
    """Arrays ``z_h``, ``z_l`` of shape ``(n, dim)`` plus provenance."""

    def __init__(self, z_h, z_l, provenance: dict | None = None):
        z_h = np.ascontiguousarray(z_h, dtype=np.float64)
        z_l = np.ascontiguousarray(z_l, dtype=np.float64)
        if z_h.ndim != 2 or z_h.shape != z_l.shape or len(z_h) == 0:
            raise DataError("dataset must be a non-empty homogeneous set of pairs")
        self.z_h, self.z_l = z_h, z_l
        self.provenance = dict(provenance or {})

    @property
    def dim(self) -> int:
        return self.z_h.shape[1]

    def __len__(self):
        return len(self.z_h)

    def __getitem__(self, i) -> PairedSample:
        return PairedSample(self.z_h[i], self.z_l[i])

    @property
    def samples(self) -> list[PairedSample]:
        return [self[i] for i in range(len(self))]

    def residual_power(self) -> float:
        return float(np.mean(np.sum((self.z_l - self.z_h) ** 2, axis=1)))

    def to_bytes(self) -> bytes:
        prov = canonical_json(self.provenance).encode()
        head = struct.pack("<4sIIQ", DS_MAGIC, DS_VERSION, self.dim, len(self))
        body = np.concatenate([self.z_h, self.z_l], axis=1).astype("<f8").tobytes()
        return head + struct.pack("<I", len(prov)) + prov + body

    @classmethod
    def from_bytes(cls, data: bytes) -> PairedDataset:
        if len(data) < 24:
            raise DataError("truncated dataset header")
        magic, version, dim, count = struct.unpack_from("<4sIIQ", data, 0)
        if magic != DS_MAGIC:
            raise DataError(f"bad dataset magic {magic!r}")
        if version != DS_VERSION:
            raise DataError(f"unsupported dataset version {version}")
        (plen,) = struct.unpack_from("<I", data, 20)
        off = 24 + plen
        if len(data) != off + 16 * dim * count:
            raise DataError("dataset payload length does not match header")
        prov = _provenance(data[24:off])
        arr = np.frombuffer(data, dtype="<f8", offset=off).reshape(count, 2 * dim)
        return cls(arr[:, :dim], arr[:, dim:], prov)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> PairedDataset:
        return cls.from_bytes(Path(path).read_bytes())


def _provenance(raw: bytes) -> dict:
    try:
        return json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"unreadable provenance block: {e}") from None


def build_dataset(data_spec: DataSpec, degrade_spec: DegradeSpec, n: int) -> PairedDataset:
    z_h = sample_clean(data_spec, n)
    z_l = degrade(z_h, degrade_spec, data_spec.mean(), np.random.default_rng(degrade_spec.seed))
    ds = PairedDataset(z_h, z_l)
    ds.provenance = {
        "data": asdict(data_spec),
        "degrade": asdict(degrade_spec),
        "count": n,
        "residual_power": ds.residual_power(),
    }
    return ds


class SampleSet:
    """A bare point set ``(n, dim)`` with provenance, e.g. samples or restorations."""

    def __init__(self, points, provenance: dict | None = None):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or len(points) == 0:
            raise DataError("sample set must be a non-empty (n, dim) array")
        self.points = points
        self.provenance = dict(provenance or {})

    def __len__(self):
        return len(self.points)

    def to_bytes(self) -> bytes:
        prov = canonical_json(self.provenance).encode()
        n, dim = self.points.shape
        head = struct.pack("<4sIIQ", SM_MAGIC, SM_VERSION, dim, n)
        return head + struct.pack("<I", len(prov)) + prov + self.points.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> SampleSet:
        if len(data) < 24:
            raise DataError("truncated sample header")
        magic, version, dim, count = struct.unpack_from("<4sIIQ", data, 0)
        if magic != SM_MAGIC:
            raise DataError(f"bad sample magic {magic!r}")
        if version != SM_VERSION:
            raise DataError(f"unsupported sample version {version}")
        (plen,) = struct.unpack_from("<I", data, 20)
        off = 24 + plen
        if len(data) != off + 8 * dim * count:
            raise DataError("sample payload length does not match header")
        prov = _provenance(data[24:off])
        return cls(np.frombuffer(data, dtype="<f8", offset=off).reshape(count, dim), prov)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> SampleSet:
        return cls.from_bytes(Path(path).read_bytes())


def load_points(path) -> np.ndarray:
    """Points from a sample file, or the clean side of a dataset file."""
    data = Path(path).read_bytes()
    if data[:4] == DS_MAGIC:
        return PairedDataset.from_bytes(data).z_h
    return SampleSet.from_bytes(data).points
