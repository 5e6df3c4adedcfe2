"""OT MACH and MINACE correlation filter synthesis."""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateFilterError, FormatError, InputError, ParameterError
from .imagefft import fft2

__all__ = [
    "FilterKind",
    "TrainingSet",
    "CorrelationFilter",
    "synthesize_otmach",
    "synthesize_minace",
    "filter_digest",
    "save_filter",
    "load_filter",
    "OTMACH_DEFAULTS",
    "MINACE_NOISE_REL",
]

DENOM_EPS = 1e-12
MAX_GRAM_COND = 1e12

# default (alpha, beta, gamma) for the pipeline
OTMACH_DEFAULTS = (0.01, 1.0, 0.1)
# default MINACE noise floor, relative to the peak of the spectral envelope
MINACE_NOISE_REL = 1e-7


class FilterKind(enum.IntEnum):
    OTMACH = 0
    MINACE = 1


@dataclass
class TrainingSet:
    images: Sequence[np.ndarray]
    labels: Sequence[float] | None = None

    def __post_init__(self):
        self.images = [np.asarray(im, dtype=np.float64) for im in self.images]
        if not self.images:
            raise InputError("training set is empty")
        shape = self.images[0].shape
        if any(im.shape != shape for im in self.images):
            raise InputError("training images must share one shape")
        if self.labels is None:
            self.labels = [1.0] * len(self.images)
        self.labels = [float(u) for u in self.labels]
        if len(self.labels) != len(self.images):
            raise InputError("one constraint value per image is required")
        if not np.all(np.isfinite(self.labels)):
            raise InputError("constraint values must be finite")

    @property
    def shape(self):
        return self.images[0].shape

    def spectra(self) -> np.ndarray:
        return fft2(np.stack(self.images))


@dataclass
class CorrelationFilter:
    kind: FilterKind
    H: np.ndarray
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    noise_c: float = 0.0
    training_digest: bytes = field(default=b"\0" * 32, repr=False)

    @property
    def shape(self):
        return self.H.shape

    @property
    def params(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
                "noise_c": self.noise_c}


def filter_digest(ts: TrainingSet) -> bytes:
    """SHA-256 over shapes, constraint values and pixel data, in image order."""
    h = hashlib.sha256()
    h.update(struct.pack("<II", len(ts.images), ts.images[0].ndim))
    h.update(np.asarray(ts.shape, dtype="<u4").tobytes())
    h.update(np.asarray(ts.labels, dtype="<f8").tobytes())
    for im in ts.images:
        h.update(np.ascontiguousarray(im, dtype="<f8").tobytes())
    return h.digest()


def synthesize_otmach(ts: TrainingSet, alpha: float, beta: float,
                      gamma: float) -> CorrelationFilter:
    """``H = m / (alpha*C + beta*D + gamma*S)`` per frequency, with white noise ``C = 1``.

    ``m`` is the mean training spectrum, ``D`` the mean power spectrum and
    ``S`` the spectral variance about ``m``.
    """
    weights = np.array([alpha, beta, gamma], dtype=np.float64)
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ParameterError(f"OT MACH weights must be finite and >= 0, got {weights}")
    if not np.any(weights > 0):
        raise ParameterError("OT MACH weights are all zero")
    X = ts.spectra()
    m = X.mean(axis=0)
    D = (np.abs(X) ** 2).mean(axis=0)
    S = (np.abs(X - m) ** 2).mean(axis=0)
    denom = alpha + beta * D + gamma * S
    # a vanishing denominator is only harmless where the mean spectrum vanishes too
    bad = (denom < DENOM_EPS) & (np.abs(m) > DENOM_EPS * max(np.abs(m).max(), 1.0))
    if np.any(bad):
        raise DegenerateFilterError(
            f"OT MACH denominator vanishes at {int(bad.sum())} frequencies with nonzero mean"
        )
    H = m / np.maximum(denom, DENOM_EPS)
    return CorrelationFilter(FilterKind.OTMACH, H, alpha=float(alpha), beta=float(beta),
                             gamma=float(gamma), training_digest=filter_digest(ts))


def minace_envelope(X: np.ndarray, noise_c: float) -> np.ndarray:
    return np.maximum((np.abs(X) ** 2).max(axis=0), noise_c)


def synthesize_minace(ts: TrainingSet, noise_c: float | None = None) -> CorrelationFilter:
    """Minimize ``H^† T H`` subject to ``X^† H = d u`` (``d = W*H``).

    ``T`` is the per-frequency envelope ``max(max_i |X_i|^2, noise_c)``; the
    solution is ``H = T^-1 X a`` with ``(X^† T^-1 X) a = d u``. With the FFT
    normalization of :mod:`corrpost.imagefft`, correlating training image
    ``i`` with ``H`` gives exactly ``u_i`` at the origin.
    ``noise_c=None`` selects ``MINACE_NOISE_REL * max T``.
    """
    X = ts.spectra()
    if noise_c is None:
        noise_c = MINACE_NOISE_REL * float((np.abs(X) ** 2).max())
    if not np.isfinite(noise_c) or noise_c < 0:
        raise ParameterError(f"noise_c must be finite and >= 0, got {noise_c}")
    n = X.shape[0]
    d = X.shape[-1] * X.shape[-2]
    T = minace_envelope(X, noise_c)
    if np.any(T <= 0):
        raise DegenerateFilterError("spectral envelope vanishes; add a noise floor")
    Xf = X.reshape(n, -1)                     # rows are training spectra
    Tf = T.reshape(-1)
    XT = Xf / Tf                              # rows: T^-1 x_i
    gram = np.conj(Xf) @ XT.T                 # gram[i, j] = x_i^† T^-1 x_j
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > MAX_GRAM_COND:
        raise DegenerateFilterError(f"MINACE Gram matrix is ill-conditioned (cond={cond:.3g})")
    u = np.asarray(ts.labels, dtype=np.float64)
    a = np.linalg.solve(gram, d * u.astype(np.complex128))
    H = (a @ XT).reshape(X.shape[1:])
    return CorrelationFilter(FilterKind.MINACE, H, noise_c=float(noise_c),
                             training_digest=filter_digest(ts))


# --- CFLT file format -------------------------------------------------------

_CFLT_VERSION = 1
_CFLT_HEAD = struct.Struct("<4sHBII4d32s")


def save_filter(path, filt: CorrelationFilter) -> None:
    h, w = filt.H.shape
    head = _CFLT_HEAD.pack(b"CFLT", _CFLT_VERSION, int(filt.kind), w, h,
                           filt.alpha, filt.beta, filt.gamma, filt.noise_c,
                           bytes(filt.training_digest))
    payload = np.ascontiguousarray(filt.H, dtype="<c8").tobytes()
    Path(path).write_bytes(head + payload)


def load_filter(path) -> CorrelationFilter:
    buf = Path(path).read_bytes()
    if len(buf) < _CFLT_HEAD.size:
        raise FormatError(f"{path}: truncated CFLT header")
    magic, version, kind, w, h, a, b, g, c, digest = _CFLT_HEAD.unpack_from(buf)
    if magic != b"CFLT":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _CFLT_VERSION:
        raise FormatError(f"{path}: unsupported CFLT version {version}")
    if len(buf) != _CFLT_HEAD.size + 8 * w * h:
        raise FormatError(f"{path}: payload size mismatch")
    H = np.frombuffer(buf, dtype="<c8", offset=_CFLT_HEAD.size).reshape(h, w)
    return CorrelationFilter(FilterKind(kind), H.astype(np.complex128), alpha=a, beta=b,
                             gamma=g, noise_c=c, training_digest=digest)
