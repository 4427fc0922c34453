"""Bit-exact plaintext emulation of the encrypted prediction pipeline.

Because every truncation in the secure protocol is exact, its output is a
deterministic integer function of the encoded inputs. This module
evaluates that function directly on Python integers. It is used to
cross-check the protocol (they must agree to the last bit) and to explore
precision effects on grids too large for routine encrypted runs.
"""

from __future__ import annotations

import numpy as np

from .field import FixedPointParams, round_scaled
from .mpc import ExpConfig
from .protocol import EncodedModel, encode_model, encode_query


def rshift_round(x: int, m: int) -> int:
    return (x + (1 << (m - 1))) >> m


def exp_neg_fixed(u: int, params: FixedPointParams, cfg: ExpConfig) -> int:
    """Fixed-point exp(-u) for an integer ``u`` at scale 2**f.

    Mirrors :func:`eml.mpc.secure_exp_neg` step by step.
    """
    f = params.f
    W = cfg.work_bits(params)
    U = round_scaled(cfg.u_max, f)
    b = 1 if u >= U else 0
    uc = u - b * (u - U)
    sh = f + cfg.k
    coeffs = [round_scaled(float(c), W) for c in cfg.taylor_coeffs()]
    acc = rshift_round(uc * coeffs[-1], sh) + coeffs[-2]
    for c in reversed(coeffs[:-2]):
        acc = rshift_round(acc * uc, sh) + c
    for j in range(cfg.k):
        acc = rshift_round(acc * acc, 2 * W - f if j == cfg.k - 1 else W)
    if cfg.k == 0 and cfg.guard:
        acc = rshift_round(acc, cfg.guard)
    return acc - acc * b


def emulate_kernels(enc: EncodedModel, q: list, cfg: ExpConfig) -> list:
    f = enc.params.f
    out = []
    for row in enc.rows:
        s = sum((a - b) * (a - b) for a, b in zip(row, q))
        out.append(exp_neg_fixed(rshift_round(s, f), enc.params, cfg))
    return out


def emulate_predict(model, XQ, params: FixedPointParams, cfg: ExpConfig = ExpConfig(),
                    enc: EncodedModel | None = None) -> np.ndarray:
    """Predictions exactly as the encrypted protocol would reveal them."""
    enc = enc or encode_model(model, params)
    f = params.f
    queries = encode_query(XQ, model.sigma, params)
    preds = []
    for q in queries:
        kern = emulate_kernels(enc, q, cfg)
        s = sum(a * k for a, k in zip(enc.alpha, kern))
        preds.append((rshift_round(s, f) + enc.offset) / (1 << f))
    return np.array(preds)
