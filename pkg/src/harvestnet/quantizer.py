"""Affine integer quantization for Q8 and Q4 tensors.

A real tensor ``x`` maps to integer codes with

    code = clip(round((x - zero_point) / scale), qmin, qmax)

and back with ``code * scale + zero_point``. Rounding is half away from zero.
Parameters are per tensor. Q8 ranges are usually chosen with a min/max
observer; Q4 uses an MSE search over candidate scales because its 16 levels
make the min/max choice noticeably lossy.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParamsError, NonFiniteError, ValidationError

SCALE_FLOOR = 1e-8
MSE_GRID_POINTS = 100
MSE_GRID_LOW = 0.1
MSE_GRID_HIGH = 2.0


class BitWidth(enum.IntEnum):
    """Arithmetic precision tier. Ordered Q4 < Q8 < FP32."""

    Q4 = 4
    Q8 = 8
    FP32 = 32

    @property
    def code_range(self) -> tuple[int, int]:
        if self is BitWidth.FP32:
            raise ValidationError("FP32 has no integer code range")
        half = 1 << (int(self) - 1)
        return -half, half - 1

    @property
    def qmin(self) -> int:
        return self.code_range[0]

    @property
    def qmax(self) -> int:
        return self.code_range[1]

    @classmethod
    def parse(cls, text) -> "BitWidth":
        if isinstance(text, BitWidth):
            return text
        key = str(text).strip().upper()
        aliases = {"32": "FP32", "32-BIT": "FP32", "8": "Q8", "4": "Q4", "INT8": "Q8", "INT4": "Q4"}
        key = aliases.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise ValidationError(f"unknown precision {text!r}; expected FP32, Q8 or Q4") from None


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: float
    bit_width: BitWidth

    def __post_init__(self):
        object.__setattr__(self, "bit_width", BitWidth.parse(self.bit_width))
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "zero_point", float(self.zero_point))
        if self.bit_width is BitWidth.FP32:
            raise InvalidParamsError("FP32 tensors carry no quantization parameters")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise InvalidParamsError(f"scale must be positive and finite, got {self.scale!r}")
        if not np.isfinite(self.zero_point):
            raise InvalidParamsError(f"zero_point must be finite, got {self.zero_point!r}")

    @property
    def qmin(self) -> int:
        return self.bit_width.qmin

    @property
    def qmax(self) -> int:
        return self.bit_width.qmax


@dataclass(frozen=True)
class QuantTensor:
    codes: np.ndarray
    params: QuantParams

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.dtype.kind not in "iu":
            raise ValidationError(f"codes must be integers, got dtype {codes.dtype}")
        codes = codes.astype(np.int64, copy=False)
        if codes.size and (codes.min() < self.params.qmin or codes.max() > self.params.qmax):
            raise ValidationError(
                f"codes outside [{self.params.qmin}, {self.params.qmax}] for {self.params.bit_width.name}"
            )
        object.__setattr__(self, "codes", codes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    def __eq__(self, other):
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.codes, other.codes)


def _check_finite(x: np.ndarray) -> None:
    bad = ~np.isfinite(x)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(idx if len(idx) != 1 else idx[0], x[idx].item())


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    a = np.abs(v)
    f = np.floor(a)
    r = f + (a - f >= 0.5)
    return np.copysign(r, v)


def _scaled(x: np.ndarray, p: QuantParams) -> np.ndarray:
    return (x - p.zero_point) / p.scale


def affine_quantize(x, p: QuantParams) -> QuantTensor:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    codes = np.clip(round_half_away(_scaled(x, p)), p.qmin, p.qmax)
    return QuantTensor(codes.astype(np.int64), p)


def dequantize(q: QuantTensor) -> np.ndarray:
    return q.codes * q.params.scale + q.params.zero_point


def fake_quantize(x, p: QuantParams) -> np.ndarray:
    """Quantize then dequantize, staying in the real domain."""
    return dequantize(affine_quantize(x, p))


def ste_gradient(upstream, x, p: QuantParams) -> np.ndarray:
    """Clipped straight-through estimator for ``fake_quantize``.

    Gradient passes unchanged where the unrounded code lies in
    ``[qmin, qmax]`` (both ends inclusive) and is zero elsewhere.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ValidationError(f"shape mismatch: upstream {upstream.shape} vs x {x.shape}")
    return upstream * ste_mask(x, p)


def ste_mask(x: np.ndarray, p: QuantParams) -> np.ndarray:
    v = _scaled(x, p)
    return ((v >= p.qmin) & (v <= p.qmax)).astype(np.float64)


class ObserverMode(enum.Enum):
    MIN_MAX = "MinMax"
    MSE_SEARCH = "MseSearch"


@dataclass(frozen=True)
class RangeObserver:
    mode: ObserverMode = ObserverMode.MIN_MAX
    running_min: float = field(default=float("inf"))
    running_max: float = field(default=float("-inf"))
    sample_count: int = 0

    @classmethod
    def for_bit_width(cls, bw: BitWidth) -> "RangeObserver":
        return cls(ObserverMode.MSE_SEARCH if BitWidth.parse(bw) is BitWidth.Q4 else ObserverMode.MIN_MAX)


def observe(obs: RangeObserver, x) -> RangeObserver:
    """Return a new observer whose range also covers every element of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    if x.size == 0:
        return obs
    return RangeObserver(
        obs.mode,
        min(obs.running_min, float(x.min())),
        max(obs.running_max, float(x.max())),
        obs.sample_count + 1,
    )


def minmax_params(lo: float, hi: float, bw: BitWidth) -> QuantParams:
    bw = BitWidth.parse(bw)
    if hi <= lo:
        return QuantParams(SCALE_FLOOR, lo, bw)
    scale = (hi - lo) / (bw.qmax - bw.qmin)
    if scale < SCALE_FLOOR:
        scale = SCALE_FLOOR
    return QuantParams(scale, lo - bw.qmin * scale, bw)


def mse_candidates(lo: float, hi: float, bw: BitWidth) -> list[QuantParams]:
    """Candidate parameter sets for the MSE search.

    The min/max choice comes first so ties resolve to it. The remaining
    candidates sweep the scale geometrically and keep the range centred.
    """
    base = minmax_params(lo, hi, bw)
    if hi <= lo:
        return [base]
    mid = 0.5 * (lo + hi)
    code_mid = 0.5 * (bw.qmin + bw.qmax)
    out = [base]
    for s in np.geomspace(base.scale * MSE_GRID_LOW, base.scale * MSE_GRID_HIGH, MSE_GRID_POINTS):
        s = max(float(s), SCALE_FLOOR)
        out.append(QuantParams(s, mid - code_mid * s, bw))
    return out


def reconstruction_mse(x: np.ndarray, p: QuantParams) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean((fake_quantize(x, p) - x) ** 2))


def compute_qparams(obs: RangeObserver, bw, calib=None) -> QuantParams:
    bw = BitWidth.parse(bw)
    if bw is BitWidth.FP32:
        raise ValidationError("FP32 needs no quantization parameters")
    if obs.sample_count <= 0:
        raise ValidationError("observer has seen no data")
    lo, hi = obs.running_min, obs.running_max
    if obs.mode is ObserverMode.MIN_MAX:
        return minmax_params(lo, hi, bw)

    if calib is None:
        raise ValidationError("MseSearch mode needs a calibration sample")
    calib = np.asarray(calib, dtype=np.float64).ravel()
    if calib.size == 0:
        raise ValidationError("MseSearch mode needs a non-empty calibration sample")
    _check_finite(calib)
    cands = mse_candidates(lo, hi, bw)
    if len(cands) == 1:
        return cands[0]
    scales = np.array([c.scale for c in cands])[:, None]
    zps = np.array([c.zero_point for c in cands])[:, None]
    codes = np.clip(round_half_away((calib[None, :] - zps) / scales), bw.qmin, bw.qmax)
    err = np.mean((codes * scales + zps - calib[None, :]) ** 2, axis=1)
    return cands[int(np.argmin(err))]


def calibrate_tensor(x, bw, mode: ObserverMode | None = None) -> QuantParams:
    """Observe ``x`` once and derive parameters for it (weights, mostly)."""
    bw = BitWidth.parse(bw)
    obs = RangeObserver.for_bit_width(bw) if mode is None else RangeObserver(mode)
    obs = observe(obs, x)
    return compute_qparams(obs, bw, x)


def quantize_tensor(x, bw, mode: ObserverMode | None = None) -> QuantTensor:
    return affine_quantize(x, calibrate_tensor(x, bw, mode))
