"""Shared oracles and probes for the test-suite."""

import contextlib

import numpy as np

from unetseg.tensor import Tensor

# acceptance criterion name -> (PASS | FAIL | SKIP, detail); printed in the terminal summary
ACCEPTANCE = {}


@contextlib.contextmanager
def criterion(name):
    """Record the outcome of an acceptance block; ``detail`` may be filled in by the block."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        status = "SKIP" if type(exc).__name__ == "Skipped" else "FAIL"
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        detail = f"{info['detail']} ({msg})" if info["detail"] and status == "FAIL" else info["detail"] or msg
        ACCEPTANCE[name] = (status, detail)
        print(f"{status} {name}: {ACCEPTANCE[name][1]}")
        raise
    ACCEPTANCE[name] = ("PASS", info["detail"])
    print(f"PASS {name}: {info['detail']}")


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """sum(out * weights) with fixed weights; a scalar probe for gradient checks."""
    return (out * Tensor(weights, dtype=out.dtype)).sum()


def away_from_zero(rng, shape, margin=0.05):
    """Standard normals pushed at least ``margin`` away from 0 (keeps relu kinks out of reach)."""
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.where(x >= 0, margin, -margin) + x, x)


def naive_conv2d(x, w, b, stride, pad):
    """Direct quadruple-loop cross-correlation."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ci, r * stride + u, c * stride + v] * w[o, ci, u, v]
                    out[i, o, r, c] = acc
    return out
