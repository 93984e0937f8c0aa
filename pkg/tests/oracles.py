"""Independent reference implementations used only by the tests.

Nothing here imports the package's tensor code: each oracle is plain
nested loops over numpy scalars so that agreement is meaningful.
"""
from __future__ import annotations

import itertools

import numpy as np


def naive_convolve(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Zero-padded 'same' cross-correlation, stride 1, any rank.

    x: (B, Cin, *S), w: (Cout, Cin, *K) with odd K.
    """
    b, c_in = x.shape[:2]
    c_out = w.shape[0]
    spatial = x.shape[2:]
    kext = w.shape[2:]
    half = [k // 2 for k in kext]
    out = np.zeros((b, c_out) + spatial)
    for n in range(b):
        for o in range(c_out):
            for pos in itertools.product(*(range(s) for s in spatial)):
                acc = 0.0 if bias is None else float(bias[o])
                for i in range(c_in):
                    for tap in itertools.product(*(range(k) for k in kext)):
                        src = [p + t - h for p, t, h in zip(pos, tap, half)]
                        if all(0 <= s < lim for s, lim in zip(src, spatial)):
                            acc += w[(o, i) + tap] * x[(n, i) + tuple(src)]
                out[(n, o) + pos] = acc
    return out


def brute_windows(clip: np.ndarray, t: int) -> list[np.ndarray]:
    f = clip.shape[0]
    out = []
    start = 0
    while start + t <= f:
        out.append(np.array([clip[start + j] for j in range(t)]))
        start += 1
    return out


def brute_frame_conv2d(frame: np.ndarray, w: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """One C×H×W frame through a Cout×Cin×k×k same-padded conv."""
    c_out, c_in, kh, kw = w.shape
    _, h, wd = frame.shape
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for r in range(h):
            for c in range(wd):
                acc = 0.0 if bias is None else float(bias[o])
                for i in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            rr, cc = r + a - kh // 2, c + b - kw // 2
                            if 0 <= rr < h and 0 <= cc < wd:
                                acc += w[o, i, a, b] * frame[i, rr, cc]
                out[o, r, c] = acc
    return out


def brute_motion(windows: list[np.ndarray], w: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """concat_i (conv(window_{i+1}) - window_i) along frames, by loops."""
    pieces = []
    for i in range(len(windows) - 1):
        later, earlier = windows[i + 1], windows[i]
        for j in range(later.shape[0]):
            pieces.append(brute_frame_conv2d(later[j], w, bias) - earlier[j])
    return np.array(pieces)


def motion_extent(f: int, tuple_set) -> int:
    """Count frames by enumerating windows and differences explicitly."""
    total = 0
    for t in tuple_set:
        n_windows = len([s for s in range(f) if s + t <= f])
        total += (n_windows - 1) * t
    return total


def softmax_rows(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    for idx in np.ndindex(a.shape[:-1]):
        row = a[idx]
        e = [np.exp(v - max(row)) for v in row]
        s = sum(e)
        out[idx] = [v / s for v in e]
    return out
