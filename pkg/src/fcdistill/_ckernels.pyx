# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: beam-search expert, closed-loop expert episode, MLP argmax.

Arithmetic mirrors ``_pykernels`` term for term; the extension is built with
``-ffp-contract=off`` so results are bit-identical to the fallback.
"""

from libc.math cimport isfinite
from libc.stdlib cimport malloc, free

import numpy as np

NAME = "compiled"


cdef struct Node:
    double cost
    long long code
    double il
    double vcf
    double vo


cdef inline bint _less(Node* a, Node* b) noexcept nogil:
    if a.cost < b.cost:
        return True
    if a.cost > b.cost:
        return False
    return a.code < b.code


cdef void _sort(Node* arr, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef Node key
    for i in range(1, n):
        key = arr[i]
        j = i - 1
        while j >= 0 and _less(&key, &arr[j]):
            arr[j + 1] = arr[j]
            j -= 1
        arr[j + 1] = key


cdef int _beam(double il, double vcf, double vo, double iref, double vin, double io,
               const double[:, ::1] table, double l, double cf, double c, double ts,
               int horizon, Py_ssize_t width, double lam_i, double lam_cf, double vcf_ref,
               Node* buf_a, Node* buf_b, double* out_cost, long long* out_code,
               long long* out_evals) noexcept nogil:
    cdef Node* beam = buf_a
    cdef Node* children = buf_b
    cdef Node* tmp
    cdef Py_ssize_t n_beam = 1, n_child, p, depth
    cdef int m
    cdef double a, b, o, na, nb, no, di, dc
    cdef long long evals = 0
    beam[0].cost = 0.0
    beam[0].code = 0
    beam[0].il = il
    beam[0].vcf = vcf
    beam[0].vo = vo
    for depth in range(horizon):
        n_child = 0
        for p in range(n_beam):
            a = beam[p].il
            b = beam[p].vcf
            o = beam[p].vo
            for m in range(4):
                na = a + ts * (table[m, 0] * vin - table[m, 1] * o - table[m, 2] * b) / l
                nb = b + ts * (table[m, 4] * a) / cf
                no = o + ts * (table[m, 3] * a - io) / c
                di = na - iref
                dc = nb - vcf_ref
                children[n_child].cost = beam[p].cost + (lam_i * (di * di) + lam_cf * (dc * dc))
                children[n_child].code = beam[p].code * 4 + m
                children[n_child].il = na
                children[n_child].vcf = nb
                children[n_child].vo = no
                n_child += 1
        evals += n_child
        _sort(children, n_child)
        tmp = beam
        beam = children
        children = tmp
        n_beam = n_child if n_child < width else width
    out_cost[0] = beam[0].cost
    out_code[0] = beam[0].code
    out_evals[0] = evals
    if not isfinite(beam[0].cost):
        return -1
    return <int>(beam[0].code >> (2 * (horizon - 1)))


cdef Py_ssize_t _buffer_size(int horizon, Py_ssize_t width):
    cdef Py_ssize_t level = 1, best = 4, d
    for d in range(horizon):
        level = 4 * (level if level < width else width)
        if level > best:
            best = level
    return best


def step(double il, double vcf, double vo, double vin, double io, row,
         double l, double cf, double c, double ts):
    cdef double a_in = row[0], a_vo = row[1], a_cf = row[2], alpha = row[3], beta = row[4]
    return (il + ts * (a_in * vin - a_vo * vo - a_cf * vcf) / l,
            vcf + ts * (beta * il) / cf,
            vo + ts * (alpha * il - io) / c)


def beam_search(z, const double[:, ::1] table, double l, double cf, double c, double ts,
                int horizon, Py_ssize_t width, double lam_i, double lam_cf, double vcf_ref):
    cdef double il = z[0], vcf = z[1], vo = z[2], iref = z[3], vin = z[4], io = z[5]
    cdef double cost
    cdef long long code, evals
    cdef int first
    if not (isfinite(il) and isfinite(vcf) and isfinite(vo) and isfinite(iref)
            and isfinite(vin) and isfinite(io)):
        raise FloatingPointError("non-finite feature vector")
    cdef Py_ssize_t n = _buffer_size(horizon, width)
    cdef Node* buf_a = <Node*> malloc(n * sizeof(Node))
    cdef Node* buf_b = <Node*> malloc(n * sizeof(Node))
    if buf_a == NULL or buf_b == NULL:
        free(buf_a)
        free(buf_b)
        raise MemoryError()
    with nogil:
        first = _beam(il, vcf, vo, iref, vin, io, table, l, cf, c, ts, horizon, width,
                      lam_i, lam_cf, vcf_ref, buf_a, buf_b, &cost, &code, &evals)
    free(buf_a)
    free(buf_b)
    if first < 0:
        raise FloatingPointError("non-finite predicted cost")
    return first, cost, code, evals


def expert_episode(const double[::1] x0, Py_ssize_t n_steps, double ts, double l, double cf,
                   double c, const double[:, ::1] table, double vin0, double r0,
                   const long long[::1] ev_step, const signed char[::1] ev_kind, const double[::1] ev_value,
                   double v_ref, double kp, double ki, double i_lo, double i_hi,
                   double integral0, int horizon, Py_ssize_t width, double lam_i,
                   double lam_cf, double cf_gain_ref, double cf_gain_in,
                   double[:, ::1] out, signed char[::1] out_mode):
    """Closed-loop episode driven by the beam-search expert.

    ``out`` columns: i_l, v_cf, v_o, v_in, i_o, i_ref, r.  Returns the number
    of recorded steps; a value below ``n_steps`` marks divergence at that index.
    """
    cdef double il = x0[0], vcf = x0[1], vo = x0[2], vin = vin0, r = r0
    cdef double integral = integral0, e, cand, u, iref, io, vcf_ref, cost
    cdef double na, nb, no
    cdef long long code, evals
    cdef Py_ssize_t k, ev = 0, n_ev = ev_step.shape[0]
    cdef int m
    cdef Py_ssize_t n = _buffer_size(horizon, width)
    cdef Node* buf_a = <Node*> malloc(n * sizeof(Node))
    cdef Node* buf_b = <Node*> malloc(n * sizeof(Node))
    if buf_a == NULL or buf_b == NULL:
        free(buf_a)
        free(buf_b)
        raise MemoryError()
    with nogil:
        for k in range(n_steps):
            while ev < n_ev and ev_step[ev] <= k:
                if ev_kind[ev] == 0:
                    vin = ev_value[ev]
                else:
                    r = ev_value[ev]
                ev += 1
            io = vo / r
            e = v_ref - vo
            cand = integral + e * ts
            u = kp * e + ki * cand
            if u > i_hi:
                iref = i_hi
            elif u < i_lo:
                iref = i_lo
            else:
                iref = u
                integral = cand
            if not (isfinite(il) and isfinite(vcf) and isfinite(vo) and isfinite(io)
                    and isfinite(iref)):
                break
            vcf_ref = cf_gain_ref * v_ref + cf_gain_in * vin
            m = _beam(il, vcf, vo, iref, vin, io, table, l, cf, c, ts, horizon, width,
                      lam_i, lam_cf, vcf_ref, buf_a, buf_b, &cost, &code, &evals)
            if m < 0:
                break
            out[k, 0] = il
            out[k, 1] = vcf
            out[k, 2] = vo
            out[k, 3] = vin
            out[k, 4] = io
            out[k, 5] = iref
            out[k, 6] = r
            out_mode[k] = <signed char> m
            na = il + ts * (table[m, 0] * vin - table[m, 1] * vo - table[m, 2] * vcf) / l
            nb = vcf + ts * (table[m, 4] * il) / cf
            no = vo + ts * (table[m, 3] * il - io) / c
            il = na
            vcf = nb
            vo = no
        else:
            k = n_steps
    free(buf_a)
    free(buf_b)
    return k


cdef class BeamPolicy:
    """Expert with its plant and cost settings bound once; ``z -> first mode``."""

    cdef const double[:, ::1] table
    cdef double l, cf, c, ts, lam_i, lam_cf, cf0, cf_in
    cdef int horizon
    cdef Py_ssize_t width
    cdef Node* buf_a
    cdef Node* buf_b

    def __cinit__(self, table, double l, double cf, double c, double ts, int horizon,
                  Py_ssize_t width, double lam_i, double lam_cf, double cf_gain_ref,
                  double cf_gain_in, double v_ref):
        if horizon < 1 or width < 1:
            raise ValueError("horizon and width must be >= 1")
        self.table = np.array(table, dtype=np.float64, order="C")
        self.l, self.cf, self.c, self.ts = l, cf, c, ts
        self.horizon, self.width, self.lam_i, self.lam_cf = horizon, width, lam_i, lam_cf
        self.cf0 = cf_gain_ref * v_ref
        self.cf_in = cf_gain_in
        cdef Py_ssize_t n = _buffer_size(horizon, width)
        self.buf_a = <Node*> malloc(n * sizeof(Node))
        self.buf_b = <Node*> malloc(n * sizeof(Node))
        if self.buf_a == NULL or self.buf_b == NULL:
            raise MemoryError()

    def __dealloc__(self):
        free(self.buf_a)
        free(self.buf_b)

    def __call__(self, z):
        cdef double il = z[0], vcf = z[1], vo = z[2], iref = z[3], vin = z[4], io = z[5]
        cdef double cost
        cdef long long code, evals
        cdef int first
        if not (isfinite(il) and isfinite(vcf) and isfinite(vo) and isfinite(iref)
                and isfinite(vin) and isfinite(io)):
            raise FloatingPointError("non-finite feature vector")
        first = _beam(il, vcf, vo, iref, vin, io, self.table, self.l, self.cf, self.c, self.ts,
                      self.horizon, self.width, self.lam_i, self.lam_cf,
                      self.cf0 + self.cf_in * vin, self.buf_a, self.buf_b, &cost, &code, &evals)
        if first < 0:
            raise FloatingPointError("non-finite predicted cost")
        return first


cdef class MlpPolicy:
    """MLP argmax over a snapshot of the weights, in float32 like the training forward pass.

    Weights are stored transposed so the inner loops run over contiguous
    memory.  Each unit sums its inputs in index order; ties go to the lower
    class index.
    """

    cdef const double[::1] mean, std
    cdef float[:, ::1] w1t, w2t
    cdef float[::1] b1, b2
    cdef float* h
    cdef Py_ssize_t n_in, n_hid, n_out

    def __cinit__(self, mean, std, w1, b1, w2, b2):
        self.mean = np.array(mean, dtype=np.float64)
        self.std = np.array(std, dtype=np.float64)
        self.w1t = np.ascontiguousarray(np.asarray(w1, dtype=np.float32).T)
        self.b1 = np.array(b1, dtype=np.float32)
        self.w2t = np.ascontiguousarray(np.asarray(w2, dtype=np.float32).T)
        self.b2 = np.array(b2, dtype=np.float32)
        self.n_in, self.n_hid = self.w1t.shape[0], self.w1t.shape[1]
        self.n_out = self.w2t.shape[1]
        if self.n_in > 16 or self.n_out > 16:
            raise ValueError("MlpPolicy supports at most 16 inputs and outputs")
        self.h = <float*> malloc(self.n_hid * sizeof(float))
        if self.h == NULL:
            raise MemoryError()

    def __dealloc__(self):
        free(self.h)

    def __call__(self, z):
        cdef float zn[16]
        cdef float acc[16]
        cdef float s, zi, best = 0.0
        cdef int arg = 0
        cdef Py_ssize_t i, j, n_in = self.n_in, n_hid = self.n_hid, n_out = self.n_out
        cdef float* h = self.h
        cdef const float* w1t = &self.w1t[0, 0]
        cdef const float* b1 = &self.b1[0]
        cdef const float* w2t = &self.w2t[0, 0]
        cdef const float* b2 = &self.b2[0]
        for i in range(n_in):
            zn[i] = <float> ((<double> z[i] - self.mean[i]) / self.std[i])
        for j in range(n_hid):
            h[j] = 0.0
        for i in range(n_in):
            zi = zn[i]
            for j in range(n_hid):
                h[j] = h[j] + w1t[i * n_hid + j] * zi
        for j in range(n_hid):
            s = h[j] + b1[j]
            h[j] = s if s > 0.0 else 0.0
        for i in range(n_out):
            acc[i] = 0.0
        for j in range(n_hid):
            zi = h[j]
            for i in range(n_out):
                acc[i] = acc[i] + w2t[j * n_out + i] * zi
        for i in range(n_out):
            s = acc[i] + b2[i]
            if i == 0 or s > best:
                best = s
                arg = <int> i
        return arg
