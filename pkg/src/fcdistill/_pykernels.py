"""Pure-Python reference kernels.

These are the fallback for the compiled ``_ckernels`` module and must stay
arithmetically identical to it: same operation order, ``d * d`` instead of
``d ** 2``, no fused multiply-add.  Mode-table rows are
``(a_in, a_vo, a_cf, alpha, beta)``.
"""

import math

import numpy as np

NAME = "python"


def step(il, vcf, vo, vin, io, row, l, cf, c, ts):
    a_in, a_vo, a_cf, alpha, beta = row
    il_n = il + ts * (a_in * vin - a_vo * vo - a_cf * vcf) / l
    vcf_n = vcf + ts * (beta * il) / cf
    vo_n = vo + ts * (alpha * il - io) / c
    return il_n, vcf_n, vo_n


def beam_search(z, table, l, cf, c, ts, horizon, width, lam_i, lam_cf, vcf_ref):
    """Depth-by-depth beam search over mode sequences.

    Returns ``(first_mode, cost, code, n_evals)`` where ``code`` is the
    winning sequence in base 4, first mode most significant.
    """
    il, vcf, vo, iref, vin, io = z
    for v in z:
        if not math.isfinite(v):
            raise FloatingPointError("non-finite feature vector")
    rows = [tuple(float(a) for a in table[m]) for m in range(4)]
    beam = [(0.0, 0, il, vcf, vo)]
    n_evals = 0
    for _ in range(horizon):
        children = []
        for cost, code, a, b, o in beam:
            for m in range(4):
                a_in, a_vo, a_cf, alpha, beta = rows[m]
                na = a + ts * (a_in * vin - a_vo * o - a_cf * b) / l
                nb = b + ts * (beta * a) / cf
                no = o + ts * (alpha * a - io) / c
                di = na - iref
                dc = nb - vcf_ref
                children.append((cost + (lam_i * (di * di) + lam_cf * (dc * dc)),
                                 code * 4 + m, na, nb, no))
        n_evals += len(children)
        # codes are unique, so tuple order is (cost, lexicographic sequence)
        children.sort(key=_sort_key)
        beam = children[:width]
    cost, code = beam[0][0], beam[0][1]
    if not math.isfinite(cost):
        raise FloatingPointError("non-finite predicted cost")
    return code >> (2 * (horizon - 1)), cost, code, n_evals


def _sort_key(child):
    return (child[0], child[1])


class BeamPolicy:
    """Expert with its plant and cost settings bound once; ``z -> first mode``."""

    def __init__(self, table, l, cf, c, ts, horizon, width, lam_i, lam_cf,
                 cf_gain_ref, cf_gain_in, v_ref):
        self._args = (table, l, cf, c, ts, horizon, width, lam_i, lam_cf)
        self._cf = (cf_gain_ref * v_ref, cf_gain_in)

    def __call__(self, z):
        vcf_ref = self._cf[0] + self._cf[1] * z[4]
        return beam_search(z, *self._args, vcf_ref)[0]


class MlpPolicy:
    """MLP argmax over a float32 snapshot of the weights; ties go to the lower index."""

    def __init__(self, mean, std, w1, b1, w2, b2):
        self._w = (np.array(mean, dtype=np.float64), np.array(std, dtype=np.float64),
                   np.array(w1, dtype=np.float32), np.array(b1, dtype=np.float32),
                   np.array(w2, dtype=np.float32), np.array(b2, dtype=np.float32))

    def __call__(self, z):
        mean, std, w1, b1, w2, b2 = self._w
        zn = ((np.asarray(z, dtype=np.float64) - mean) / std).astype(np.float32)
        h = w1 @ zn + b1
        np.maximum(h, 0.0, out=h)
        return int(np.argmax(w2 @ h + b2))
