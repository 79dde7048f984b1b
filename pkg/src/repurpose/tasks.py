"""Synthetic n-way k-shot episodes with a tunable domain shift.

Each class prototype is a low-pass-filtered Gaussian noise field rescaled to
[0, 1]. Samples apply a random translation, a contrast change about mid-grey
and additive pixel noise, then clip to [0, 1]. Prototypes are drawn fresh for
every episode, so a model has to learn quickly rather than memorise classes.

Randomness comes from counter-based Philox streams keyed by
``(seed, purpose, index)``: episode ``i`` is the same no matter what else was
sampled before it.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(purpose.encode()), *(int(i) & 0xFFFFFFFF for i in index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


@dataclass(frozen=True)
class DomainParams:
    image_size: int = 16
    channels: int = 1
    cutoff: float = 0.25        # low-pass radius as a fraction of the Nyquist frequency
    noise: float = 0.25         # per-pixel Gaussian noise sigma
    contrast: tuple[float, float] = (0.8, 1.2)
    jitter: int = 2             # max translation in pixels
    stream_id: str = "base"

    def __post_init__(self):
        if self.cutoff <= 0 or self.noise < 0 or self.jitter < 0:
            raise ValueError("domain magnitudes must be nonnegative (cutoff positive)")
        lo, hi = self.contrast
        if not 0 <= lo <= hi:
            raise ValueError("contrast range must satisfy 0 <= lo <= hi")

    def to_dict(self) -> dict:
        return {"image_size": self.image_size, "channels": self.channels, "cutoff": self.cutoff,
                "noise": self.noise, "contrast": list(self.contrast), "jitter": self.jitter,
                "stream_id": self.stream_id}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainParams":
        d = dict(d)
        d["contrast"] = tuple(d["contrast"])
        return cls(**d)


@dataclass
class Episode:
    n_way: int
    k_shot: int
    support_x: np.ndarray   # (n*k, H, W, C)
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    task_seed: int

    @property
    def support(self) -> tuple[np.ndarray, np.ndarray]:
        return self.support_x, self.support_y

    @property
    def query(self) -> tuple[np.ndarray, np.ndarray]:
        return self.query_x, self.query_y


# Per unit of shift: noise grows by 100%, cutoff shrinks by 50%, contrast shrinks by 40%.
SHIFT_SCHEDULE = {"noise": 1.0, "cutoff": 0.5, "contrast": 0.4}


def shifted_domain(base: DomainParams, shift: float) -> DomainParams:
    """Move ``base`` away along the noise, smoothness and contrast axes; ``shift`` in [0, 1]."""
    if not 0.0 <= shift <= 1.0:
        raise ValueError("shift must lie in [0, 1]")
    if shift == 0:
        return base
    lo, hi = base.contrast
    c = 1.0 - SHIFT_SCHEDULE["contrast"] * shift
    return replace(base,
                   noise=base.noise * (1.0 + SHIFT_SCHEDULE["noise"] * shift),
                   cutoff=base.cutoff * (1.0 - SHIFT_SCHEDULE["cutoff"] * shift),
                   contrast=(lo * c, hi * c),
                   stream_id=f"{base.stream_id}+shift{shift:g}")


def _prototypes(domain: DomainParams, n: int, rng: np.random.Generator) -> np.ndarray:
    s, ch = domain.image_size, domain.channels
    f = np.fft.fftfreq(s)
    radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2) / 0.5
    lowpass = (radius <= domain.cutoff).astype(float)
    field = rng.standard_normal((n, ch, s, s))
    smooth = np.real(np.fft.ifft2(np.fft.fft2(field) * lowpass))
    lo = smooth.min(axis=(1, 2, 3), keepdims=True)
    hi = smooth.max(axis=(1, 2, 3), keepdims=True)
    smooth = (smooth - lo) / np.maximum(hi - lo, 1e-12)
    return smooth.transpose(0, 2, 3, 1)  # (n, H, W, C)


def _render(proto: np.ndarray, domain: DomainParams, rng: np.random.Generator) -> np.ndarray:
    img = proto
    if domain.jitter:
        dy, dx = rng.integers(-domain.jitter, domain.jitter + 1, size=2)
        img = np.roll(img, (int(dy), int(dx)), axis=(0, 1))
    lo, hi = domain.contrast
    c = rng.uniform(lo, hi) if hi > lo else lo
    img = 0.5 + c * (img - 0.5)
    if domain.noise:
        img = img + domain.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def sample_episode(domain: DomainParams, n: int, k: int, q_per_class: int, seed: int) -> Episode:
    """Draw one episode; the result depends only on ``(domain, n, k, q_per_class, seed)``."""
    if n < 2 or k < 1 or q_per_class < 0:
        raise ValueError("need n >= 2, k >= 1, q_per_class >= 0")
    rng = stream(seed, "episode:" + domain.stream_id, n, k, q_per_class)
    protos = _prototypes(domain, n, rng)
    sx, sy, qx, qy = [], [], [], []
    for cls in range(n):
        for _ in range(k):
            sx.append(_render(protos[cls], domain, rng))
            sy.append(cls)
        for _ in range(q_per_class):
            qx.append(_render(protos[cls], domain, rng))
            qy.append(cls)
    shape = (0, domain.image_size, domain.image_size, domain.channels)
    return Episode(n, k, np.array(sx), np.array(sy, dtype=np.int64),
                   np.array(qx) if qx else np.zeros(shape), np.array(qy, dtype=np.int64), int(seed))


def episode_seed(seed: int, purpose: str, index: int) -> int:
    """Derive a stable 32-bit episode seed for ``index`` within a ``(seed, purpose)`` stream."""
    return int(stream(seed, purpose, index).integers(0, 2**31 - 1))
