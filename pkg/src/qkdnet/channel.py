"""Fiber and free-space channel models.

A link is an ordered chain of lossy segments. Free-space segments may carry
a fading model describing turbulence-induced transmission fluctuations; the
fluctuations are modelled as a log-normal distribution truncated at unit
transmission.

Typical usage::

    link = CompositeLink("fwf", [
        ChannelSegment("fiber", 20.0, 0.5),
        ChannelSegment("fso", 1660.0, 19.71, fading=FadingModel(0.0107, 0.3)),
        ChannelSegment("fiber", 300.0, 0.0877),
    ])
    mean_transmission(link)
    model = link.fading_model()
    samples = sample_transmission(model, np.random.default_rng(1), size=10_000)
    hist = bin_transmissions(samples, 0.009)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special

from qkdnet.errors import DomainError

SEGMENT_KINDS = ("fiber", "fso", "component")


def db_to_transmission(loss_db: float) -> float:
    """Convert a loss in dB to a power transmission fraction.

    Negative losses (gain) are accepted and yield values above one.
    """
    return 10.0 ** (-loss_db / 10.0)


def transmission_to_db(transmission: float) -> float:
    """Inverse of :func:`db_to_transmission`."""
    if transmission <= 0:
        raise DomainError(f"transmission must be positive, got {transmission}")
    return -10.0 * math.log10(transmission)


@dataclass(frozen=True)
class FadingModel:
    """Truncated log-normal fading of the power transmission.

    Attributes:
        mean_transmission: Mean of the (truncated) distribution, in (0, 1].
        scintillation_index: Normalised intensity variance sigma_I^2 >= 0.
        distribution: Only ``"lognormal"`` is supported.
    """

    mean_transmission: float
    scintillation_index: float
    distribution: str = "lognormal"

    def __post_init__(self):
        if self.distribution != "lognormal":
            raise DomainError(f"unsupported fading distribution {self.distribution!r}")
        if not 0.0 < self.mean_transmission <= 1.0:
            raise DomainError(f"mean transmission must lie in (0, 1], got {self.mean_transmission}")
        if self.scintillation_index < 0:
            raise DomainError(f"scintillation index must be >= 0, got {self.scintillation_index}")
        if self.scintillation_index > 0 and self.mean_transmission >= 1.0:
            raise DomainError("a fading channel truncated at 1 cannot have unit mean")

    @cached_property
    def log_params(self) -> tuple[float, float]:
        """(mu, sigma) of the underlying normal in log space.

        sigma follows from the scintillation index of the untruncated law;
        mu is solved so that the *truncated* distribution has the requested
        mean.
        """
        s2 = math.log1p(self.scintillation_index)
        s = math.sqrt(s2)
        if s == 0.0:
            return math.log(self.mean_transmission), 0.0
        log_m = math.log(self.mean_transmission)

        def log_truncated_mean(mu):
            return mu + s2 / 2 + special.log_ndtr((-mu - s2) / s) - special.log_ndtr(-mu / s)

        lo = log_m - s2 / 2 - 1.0
        hi = log_m - s2 / 2 + 1.0
        while log_truncated_mean(lo) > log_m:
            lo -= 1.0
        while log_truncated_mean(hi) < log_m:
            hi += 1.0
        mu = optimize.brentq(lambda m: log_truncated_mean(m) - log_m, lo, hi, xtol=1e-14, rtol=1e-14)
        return mu, s


@dataclass(frozen=True)
class ChannelSegment:
    kind: str
    length: float
    loss: float
    fading: Optional[FadingModel] = None

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise DomainError(f"unknown segment kind {self.kind!r}")
        if self.loss < 0:
            raise DomainError(f"segment loss must be >= 0 dB, got {self.loss}")
        if self.length < 0:
            raise DomainError(f"segment length must be >= 0, got {self.length}")
        if self.fading is not None and self.kind != "fso":
            raise DomainError("only fso segments may carry a fading model")
        if self.fading is not None and not math.isclose(
            self.fading.mean_transmission, self.transmission, rel_tol=1e-9
        ):
            raise DomainError("fading mean transmission disagrees with the segment loss")

    @property
    def transmission(self) -> float:
        return db_to_transmission(self.loss)

    @classmethod
    def fso(cls, length: float, loss: float, scintillation_index: float = 0.0) -> "ChannelSegment":
        """Free-space segment whose fading mean is tied to its loss."""
        fading = FadingModel(db_to_transmission(loss), scintillation_index) if scintillation_index > 0 else None
        return cls("fso", length, loss, fading)


@dataclass(frozen=True)
class CompositeLink:
    id: str
    segments: Sequence[ChannelSegment] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not 0.0 < mean_transmission(self) <= 1.0:
            raise DomainError(f"link {self.id!r} has mean transmission outside (0, 1]")

    @property
    def is_fading(self) -> bool:
        return any(seg.fading is not None for seg in self.segments)

    def fading_model(self) -> Optional[FadingModel]:
        """Fading model of the whole link, or None for a static link.

        Static segments scale the mean. Independent log-normal factors compose
        to a log-normal with (1 + sigma^2) multiplying across factors.
        """
        if not self.is_fading:
            return None
        growth = 1.0
        for seg in self.segments:
            if seg.fading is not None:
                growth *= 1.0 + seg.fading.scintillation_index
        return FadingModel(mean_transmission(self), growth - 1.0)


def mean_transmission(link: CompositeLink) -> float:
    """Product of per-segment transmissions; 1.0 for an empty link."""
    return math.prod(seg.transmission for seg in link.segments)


@dataclass(frozen=True)
class ScintillationParams:
    cn2: float
    wavelength: float
    path_length: float

    def __post_init__(self):
        for name in ("cn2", "wavelength", "path_length"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be strictly positive")


def rytov_variance(p: ScintillationParams) -> float:
    """Plane-wave Rytov variance 1.23 Cn^2 k^(7/6) L^(11/6)."""
    k = 2.0 * math.pi / p.wavelength
    return 1.23 * p.cn2 * k ** (7.0 / 6.0) * p.path_length ** (11.0 / 6.0)


def scintillation_index(p: ScintillationParams) -> float:
    """Rytov variance, saturated at 1 for strong turbulence."""
    return min(rytov_variance(p), 1.0)


def sample_transmission(model: FadingModel, rng: np.random.Generator, size=None):
    """Draw transmissions from the truncated log-normal in ``model``.

    Uses inverse-CDF sampling restricted to the mass below unit transmission,
    so every draw consumes exactly one uniform variate.
    """
    if model.scintillation_index < 0:
        raise DomainError("scintillation index must be >= 0")
    mu, s = model.log_params
    if s == 0.0:
        if size is None:
            return model.mean_transmission
        return np.full(size, model.mean_transmission)
    upper = special.ndtr(-mu / s)
    u = rng.random(size) * upper
    # u == 0 maps to -inf in log space, i.e. zero transmission; nudge into (0, 1].
    u = np.maximum(u, np.finfo(float).tiny)
    out = np.exp(mu + s * special.ndtri(u))
    out = np.minimum(out, 1.0)
    return float(out) if size is None else out


@dataclass(frozen=True)
class TransmissionHistogram:
    """Contiguous fixed-width histogram of transmission samples.

    ``counts[j]`` holds the population of bin ``first_index + j`` whose lower
    edge is ``(first_index + j) * bin_width``.
    """

    bin_width: float
    first_index: int
    counts: tuple[int, ...]
    total_samples: int

    @property
    def bins(self) -> list[tuple[float, int]]:
        return [((self.first_index + j) * self.bin_width, c) for j, c in enumerate(self.counts)]

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.first_index, self.first_index + len(self.counts))

    @property
    def centers(self) -> np.ndarray:
        return (self.indices + 0.5) * self.bin_width

    def populated(self) -> list[int]:
        """Absolute indices of bins with non-zero count, ascending."""
        return [self.first_index + j for j, c in enumerate(self.counts) if c > 0]

    def count(self, index: int) -> int:
        j = index - self.first_index
        return self.counts[j] if 0 <= j < len(self.counts) else 0

    def center(self, index: int) -> float:
        return (index + 0.5) * self.bin_width

    def weighted_mean(self) -> float:
        if self.total_samples == 0:
            raise DomainError("empty histogram has no mean")
        return float(np.dot(self.centers, self.counts) / self.total_samples)


def bin_index(samples, width: float) -> np.ndarray:
    """Bin index floor(s / width), clamped so that s = 1 stays in the last bin."""
    if not 0.0 < width <= 1.0:
        raise DomainError(f"bin width must lie in (0, 1], got {width}")
    samples = np.asarray(samples, dtype=float)
    # rounding guards against 0.351 / 0.009 landing at 38.999...
    idx = np.floor(np.round(samples / width, 9)).astype(np.int64)
    last = math.ceil(round(1.0 / width, 9)) - 1
    return np.clip(idx, 0, last)


def bin_transmissions(samples, width: float) -> TransmissionHistogram:
    samples = np.asarray(samples, dtype=float)
    if samples.size and (samples.min() < 0 or samples.max() > 1):
        raise DomainError("transmission samples must lie in [0, 1]")
    idx = bin_index(samples, width)
    if idx.size == 0:
        return TransmissionHistogram(width, 0, (), 0)
    first = int(idx.min())
    counts = np.bincount(idx - first)
    return TransmissionHistogram(width, first, tuple(int(c) for c in counts), int(samples.size))


@dataclass(frozen=True)
class EnvironmentRecord:
    """Weather metadata echoed into reports."""

    timestamp: float
    cn2: float
    solar_irradiance: float

    def __post_init__(self):
        if min(self.timestamp, self.cn2, self.solar_irradiance) < 0:
            raise DomainError("environment fields must be non-negative")
