"""2D radix-2 FFT and frequency-domain cross-correlation.

Conventions used throughout the package:

* ``fft2`` is the unnormalized forward DFT with the DC bin at ``[0, 0]``.
* ``ifft2`` carries the ``1/(W*H)`` factor, so ``ifft2(fft2(x)) == x``.
* ``cross_correlate(f, H) = |ifft2(conj(fft2(f)) * H)|`` (circular, unpadded).
  With ``H = fft2(t)`` this is ``r[y, x] = sum_p f[p] * t[p + (y, x)]`` with
  indices taken modulo the frame, so a scene equal to the template shifted by
  ``(dy, dx)`` peaks at ``(-dy mod H, -dx mod W)``.

Images are plain ``numpy`` arrays (float64, shape ``(H, W)``); spectra are
complex128 arrays of the same shape. Every transform also accepts a stack
``(..., H, W)`` and transforms the last two axes.
"""
from __future__ import annotations

import struct
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, SizeError

__all__ = [
    "is_power_of_two",
    "fft2",
    "ifft2",
    "cross_correlate",
    "spatial_correlate_oracle",
    "centered",
    "read_pgm",
    "write_pgm",
    "read_img2",
    "write_img2",
]


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_sides(shape) -> None:
    if len(shape) < 2:
        raise SizeError(f"expected at least 2 dimensions, got shape {shape}")
    h, w = shape[-2:]
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise SizeError(f"sides must be powers of two, got {h}x{w}")


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    k = np.arange(m // 2)
    tw = np.exp(sign * 2j * np.pi * k / m)
    tw.setflags(write=False)
    return tw


def _fft_last_axis(x: np.ndarray, inverse: bool) -> np.ndarray:
    """Iterative decimation-in-time radix-2 FFT along the last axis (no scaling)."""
    n = x.shape[-1]
    lead = x.shape[:-1]
    out = np.ascontiguousarray(x[..., _bit_reverse(n)], dtype=np.complex128)
    m = 2
    while m <= n:
        half = m // 2
        blocks = out.reshape(lead + (n // m, 2, half))
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * _twiddles(m, inverse)
        out = np.concatenate((even + odd, even - odd), axis=-1).reshape(lead + (n,))
        m *= 2
    return out


def _fft2_raw(x: np.ndarray, inverse: bool) -> np.ndarray:
    y = _fft_last_axis(x, inverse)
    y = _fft_last_axis(np.swapaxes(y, -1, -2), inverse)
    return np.swapaxes(y, -1, -2)


def fft2(img) -> np.ndarray:
    """Unnormalized forward 2D DFT over the last two axes."""
    x = np.asarray(img)
    _check_sides(x.shape)
    return _fft2_raw(x, inverse=False)


def ifft2(spec) -> np.ndarray:
    """Inverse 2D DFT with ``1/(W*H)`` normalization; returns complex values."""
    x = np.asarray(spec)
    _check_sides(x.shape)
    h, w = x.shape[-2:]
    return _fft2_raw(x, inverse=True) / (h * w)


def _filter_spectrum(filt) -> np.ndarray:
    # CorrelationFilter or a bare spectrum
    H = getattr(filt, "H", filt)
    return np.asarray(H)


def cross_correlate(scene, filt, *, scene_spectrum=None) -> np.ndarray:
    """Magnitude of ``ifft2(conj(fft2(scene)) * H)``.

    ``filt`` is a :class:`~corrpost.cfsynth.CorrelationFilter` or a complex
    spectrum. ``scene`` may be a stack ``(..., H, W)``; pass
    ``scene_spectrum`` to reuse an already transformed scene.
    """
    H = _filter_spectrum(filt)
    F = fft2(scene) if scene_spectrum is None else np.asarray(scene_spectrum)
    if F.shape[-2:] != H.shape[-2:]:
        raise DimensionError(
            f"scene shape {F.shape[-2:]} does not match filter shape {H.shape[-2:]}"
        )
    return np.abs(ifft2(np.conj(F) * H))


def spatial_correlate_oracle(scene, template) -> np.ndarray:
    """Direct O(N^4) circular cross-correlation, same convention as :func:`cross_correlate`.

    ``r[ty, tx] = | sum_{y,x} conj(scene[y, x]) * template[(y+ty) % H, (x+tx) % W] |``
    """
    f = np.asarray(scene)
    t = np.asarray(template)
    if f.shape != t.shape or f.ndim != 2:
        raise DimensionError(f"shape mismatch: {f.shape} vs {t.shape}")
    h, w = f.shape
    fc = np.conj(f)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    out = np.empty((h, w), dtype=np.result_type(f, t, np.complex128))
    for ty in range(h):
        for tx in range(w):
            out[ty, tx] = np.sum(fc * t[(rows + ty) % h, (cols + tx) % w])
    return np.abs(out)


def centered(resp: np.ndarray) -> np.ndarray:
    """Circularly shift a response so zero lag lands at ``(H//2, W//2)``."""
    h, w = resp.shape[-2:]
    return np.roll(resp, (h // 2, w // 2), axis=(-2, -1))


# --- file formats ---------------------------------------------------------

def _read_token(buf: bytes, pos: int):
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pgm(path) -> np.ndarray:
    """Load a binary (P5) PGM scaled to [0, 1]."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
    try:
        w_tok, pos = _read_token(buf, pos)
        h_tok, pos = _read_token(buf, pos)
        m_tok, pos = _read_token(buf, pos)
        w, h, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    pos += 1  # single whitespace byte before the raster
    if maxval < 256:
        dtype = np.dtype("u1")
    elif maxval < 65536:
        dtype = np.dtype(">u2")
    else:
        raise FormatError(f"{path}: maxval {maxval} out of range")
    count = w * h
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    return raw.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, img, maxval: int = 65535) -> None:
    if maxval not in (255, 65535):
        raise FormatError("maxval must be 255 or 65535")
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("PGM images are 2D")
    q = np.rint(np.clip(x, 0.0, 1.0) * maxval)
    data = q.astype("u1" if maxval == 255 else ">u2").tobytes()
    h, w = x.shape
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + data)


_IMG2 = struct.Struct("<4sIII")


def write_img2(path, img) -> None:
    """Raw float32 plane with a 16-byte header (magic, width, height, reserved)."""
    x = np.asarray(img)
    if x.ndim != 2:
        raise DimensionError("IMG2 planes are 2D")
    h, w = x.shape
    Path(path).write_bytes(_IMG2.pack(b"IMG2", w, h, 0) + x.astype("<f4").tobytes())


def read_img2(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _IMG2.size:
        raise FormatError(f"{path}: truncated IMG2 header")
    magic, w, h, _ = _IMG2.unpack_from(buf)
    if magic != b"IMG2":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if len(buf) != _IMG2.size + 4 * w * h:
        raise FormatError(f"{path}: payload size mismatch")
    return np.frombuffer(buf, dtype="<f4", offset=_IMG2.size).reshape(h, w).astype(np.float64)
