"""Adaptive 1-D convolution: three exact variants with different cost profiles.

``convolve_direct`` accumulates one shifted copy of the signal per kernel tap,
so it is cheap for short kernels. ``convolve_fft`` transforms both inputs with
an iterative radix-2 FFT (zero padded to a power of two) and wins on long
kernels. ``convolve_blocked`` multiplies cache-sized tiles of sliding windows
by the reversed kernel. All three return the full linear convolution.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "Signal",
    "VARIANTS",
    "convolve_direct",
    "convolve_fft",
    "convolve_blocked",
    "fft",
    "ifft",
    "conv_context",
    "random_context",
    "mixed_workload",
    "uniform_workload",
    "ConvRun",
    "adaptive_convolve",
    "run_fixed",
]

BLOCK_ROWS = 1024


@dataclass(frozen=True)
class Signal:
    samples: np.ndarray
    kernel: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        k = np.asarray(self.kernel, dtype=float)
        if x.ndim != 1 or k.ndim != 1:
            raise ValueError("samples and kernel must be 1-D")
        if not 1 <= k.size <= x.size:
            raise ValueError(f"need n >= kk >= 1, got n={x.size} kk={k.size}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "kernel", k)

    @property
    def n(self) -> int:
        return self.samples.size

    @property
    def kk(self) -> int:
        return self.kernel.size


def _check(x, k):
    x = np.asarray(x, dtype=float)
    k = np.asarray(k, dtype=float)
    if x.ndim != 1 or k.ndim != 1 or k.size < 1 or x.size < k.size:
        raise ValueError(f"invalid sizes: signal {x.shape}, kernel {k.shape}")
    return x, k


def convolve_direct(x, k) -> np.ndarray:
    x, k = _check(x, k)
    n, kk = x.size, k.size
    out = np.zeros(n + kk - 1)
    for j in range(kk):
        out[j : j + n] += k[j] * x
    return out


@lru_cache(maxsize=32)
def _bit_reverse(size: int) -> np.ndarray:
    bits = size.bit_length() - 1
    idx = np.arange(size)
    rev = np.zeros(size, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(size: int, inverse: bool) -> np.ndarray:
    sign = 2j if inverse else -2j
    return np.exp(sign * np.pi * np.arange(size // 2) / size)


def _transform(a, inverse: bool) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    size = a.size
    if size & (size - 1):
        raise ValueError(f"length must be a power of two, got {size}")
    a = a[_bit_reverse(size)]
    span = 2
    while span <= size:
        half = span // 2
        blocks = a.reshape(-1, span)
        even = blocks[:, :half].copy()
        odd = blocks[:, half:] * _twiddles(span, inverse)
        blocks[:, :half] = even + odd
        blocks[:, half:] = even - odd
        span *= 2
    return a / size if inverse else a


def fft(a) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey transform; ``len(a)`` must be a power of two."""
    return _transform(a, False)


def ifft(a) -> np.ndarray:
    return _transform(a, True)


def convolve_fft(x, k) -> np.ndarray:
    x, k = _check(x, k)
    out_len = x.size + k.size - 1
    size = 1 << (out_len - 1).bit_length()
    fx = fft(np.concatenate([x, np.zeros(size - x.size)]))
    fk = fft(np.concatenate([k, np.zeros(size - k.size)]))
    return ifft(fx * fk).real[:out_len]


def convolve_blocked(x, k, block: int = BLOCK_ROWS) -> np.ndarray:
    x, k = _check(x, k)
    kk = k.size
    padded = np.concatenate([np.zeros(kk - 1), x, np.zeros(kk - 1)])
    windows = np.lib.stride_tricks.sliding_window_view(padded, kk)
    rk = k[::-1]
    out = np.empty(windows.shape[0])
    for start in range(0, out.size, block):
        out[start : start + block] = windows[start : start + block] @ rk
    return out


VARIANTS = (convolve_direct, convolve_fft, convolve_blocked)


def conv_context(signal: Signal) -> np.ndarray:
    n, kk = signal.n, signal.kk
    return np.array([n * kk, n, n * np.log2(n), kk * np.log2(kk) if kk > 1 else 0.0])


def random_context(rng: np.random.Generator) -> np.ndarray:
    """Four uninformative features, for checking robustness to useless context."""
    return rng.uniform(0.0, 1.0, 4)


def _signal(rng, n, kk) -> Signal:
    return Signal(rng.standard_normal(n), rng.standard_normal(kk))


def mixed_workload(count: int, rng: np.random.Generator) -> list[Signal]:
    """Half short kernels (direct is best), half long kernels (FFT is best), shuffled."""
    out = []
    for i in range(count):
        n = int(rng.integers(2048, 8193))
        kk = int(rng.integers(2, 9)) if i % 2 == 0 else int(rng.integers(512, 1025))
        out.append(_signal(rng, n, kk))
    order = rng.permutation(count)
    return [out[i] for i in order]


def uniform_workload(count: int, rng: np.random.Generator, n: int = 4096, kk: int = 256) -> list[Signal]:
    return [_signal(rng, n, kk) for _ in range(count)]


@dataclass
class ConvRun:
    outputs: list
    arms: list
    elapsed: float
    per_signal: list = field(default_factory=list)

    @property
    def throughput(self) -> float:
        return len(self.outputs) / self.elapsed if self.elapsed > 0 else float("inf")


def adaptive_convolve(signals, tuner, features: str = "dims", rng: np.random.Generator | None = None) -> ConvRun:
    """Convolve each signal with the variant the tuner picks; reward is minus elapsed seconds.

    ``features`` is ``"dims"`` for the size-derived context, ``"random"`` for
    noise features, or ``"none"`` for a context-free tuner.
    """
    if features not in ("dims", "random", "none"):
        raise ValueError(f"unknown feature mode {features!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    outputs, arms, times = [], [], []
    start = time.perf_counter()
    for sig in signals:
        t0 = time.perf_counter()
        if features == "dims":
            ctx = conv_context(sig)
        elif features == "random":
            ctx = random_context(rng)
        else:
            ctx = None
        variant, token = tuner.choose(ctx)
        outputs.append(variant(sig.samples, sig.kernel))
        tuner.observe_elapsed(token)
        arms.append(token.arm)
        times.append(time.perf_counter() - t0)
    return ConvRun(outputs, arms, time.perf_counter() - start, times)


def run_fixed(signals, variant) -> ConvRun:
    """Baseline: always run ``variant``."""
    outputs, times = [], []
    start = time.perf_counter()
    for sig in signals:
        t0 = time.perf_counter()
        outputs.append(variant(sig.samples, sig.kernel))
        times.append(time.perf_counter() - t0)
    idx = VARIANTS.index(variant) if variant in VARIANTS else -1
    return ConvRun(outputs, [idx] * len(outputs), time.perf_counter() - start, times)
