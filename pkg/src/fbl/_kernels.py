"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
fallback. The active backend is picked once at import time from the
``FBL_KERNELS`` environment variable:

    FBL_KERNELS=auto    use numba when importable, else numpy (default)
    FBL_KERNELS=numba   require numba, fail fast if missing
    FBL_KERNELS=numpy   force the numpy fallback

Both variants of each kernel stay importable (``*_np`` / ``*_nb``) so the
kernel benchmark and the equivalence tests can time and compare them
directly. Results are deterministic within a backend; across backends they
agree to floating-point tolerance, not bit-for-bit (summation orders
differ).
"""

from __future__ import annotations

import os
import warnings

import numpy as np

_ENV = os.environ.get("FBL_KERNELS", "auto").strip().lower()
if _ENV not in {"auto", "numba", "numpy"}:
    warnings.warn(f"FBL_KERNELS={_ENV!r} not recognized, using 'auto'")
    _ENV = "auto"

HAVE_NUMBA = False
if _ENV != "numpy":
    try:
        import numba

        HAVE_NUMBA = True
    except ImportError:
        if _ENV == "numba":
            raise RuntimeError("FBL_KERNELS=numba but numba is not importable")
        warnings.warn("numba not importable, falling back to numpy kernels")

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# -- late-interaction scoring -------------------------------------------------
#
# Documents are packed into one contiguous row block plus an offsets array
# (offsets[i]:offsets[i+1] are document i's embedding rows, zero rows already
# dropped). Score per document: sum over query rows of the max inner product
# against the document's rows. A document with no rows scores -inf.


def maxsim_segments_np(
    query: np.ndarray, rows: np.ndarray, starts: np.ndarray, ends: np.ndarray
) -> np.ndarray:
    nseg = starts.shape[0]
    out = np.empty(nseg, dtype=np.float64)
    qt = np.ascontiguousarray(query.T)
    for i in range(nseg):
        s, e = starts[i], ends[i]
        if e <= s:
            out[i] = -np.inf
        else:
            sims = rows[s:e] @ qt
            out[i] = float(sims.max(axis=0).sum(dtype=np.float64))
    return out


def maxsim_packed_np(query: np.ndarray, rows: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return maxsim_segments_np(query, rows, offsets[:-1], offsets[1:])


# -- k-means helpers ----------------------------------------------------------


def assign_nearest_np(points: np.ndarray, centroids: np.ndarray):
    n = points.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    c2 = np.einsum("kd,kd->k", centroids, centroids, dtype=np.float64)
    chunk = 8192
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        block = points[s:e]
        d2 = c2[None, :] - 2.0 * (block @ centroids.T)
        d2 += np.einsum("nd,nd->n", block, block, dtype=np.float64)[:, None]
        lab = np.argmin(d2, axis=1)
        labels[s:e] = lab
        dists[s:e] = np.maximum(d2[np.arange(e - s), lab], 0.0)
    return labels, dists


def centroid_sums_np(points: np.ndarray, labels: np.ndarray, k: int):
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    sums = np.zeros((k, points.shape[1]), dtype=np.float64)
    order = np.argsort(labels, kind="stable")
    sorted_pts = points[order]
    sorted_lab = labels[order]
    uniq, first = np.unique(sorted_lab, return_index=True)
    if uniq.size:
        sums[uniq] = np.add.reduceat(sorted_pts.astype(np.float64, copy=False), first, axis=0)
    return sums, counts


# -- asymmetric distance scan -------------------------------------------------
#
# lut[m, k] holds the inner product of the query's m-th subvector with
# codebook centroid k; `base` is the query·coarse-centroid term shared by
# every entry of the partition being scanned.


def adc_scan_np(lut: np.ndarray, codes: np.ndarray, base: float) -> np.ndarray:
    m = codes.shape[1]
    acc = lut[0, codes[:, 0]].astype(np.float64)
    for s in range(1, m):
        acc += lut[s, codes[:, s]]
    acc += base
    return acc


def adc_scan_probes_np(
    lut: np.ndarray,
    flat_codes: np.ndarray,
    starts: np.ndarray,
    ends: np.ndarray,
    bases: np.ndarray,
) -> np.ndarray:
    """ADC over several partitions of one contiguous code block, concatenated."""
    total = int((ends - starts).sum())
    out = np.empty(total, dtype=np.float64)
    pos = 0
    for p in range(starts.shape[0]):
        s, e = int(starts[p]), int(ends[p])
        if e > s:
            out[pos : pos + (e - s)] = adc_scan_np(lut, flat_codes[s:e], float(bases[p]))
            pos += e - s
    return out


if HAVE_NUMBA:

    @numba.njit(parallel=True, fastmath=True, cache=True)
    def _maxsim_segments_jit(query, rows, starts, ends, out):  # pragma: no cover - jitted
        # f32 inner accumulation + fastmath so the dot loop vectorizes;
        # per-document results are position-independent, so exact-scan and
        # candidate re-scoring stay bit-identical for the same document
        nseg = starts.shape[0]
        nq = query.shape[0]
        d = query.shape[1]
        for i in numba.prange(nseg):
            s = starts[i]
            e = ends[i]
            if e <= s:
                out[i] = -np.inf
                continue
            total = 0.0
            for a in range(nq):
                best = np.float32(-np.inf)
                for j in range(s, e):
                    acc = np.float32(0.0)
                    for c in range(d):
                        acc += query[a, c] * rows[j, c]
                    if acc > best:
                        best = acc
                total += best
            out[i] = total

    @numba.njit(fastmath=True, cache=True)
    def _maxsim_segments_ser_jit(query, rows, starts, ends, out):  # pragma: no cover
        # serial twin of the scan above: the parallel region costs more than
        # it buys below a few tens of thousands of rows (re-ranking sized)
        nseg = starts.shape[0]
        nq = query.shape[0]
        d = query.shape[1]
        for i in range(nseg):
            s = starts[i]
            e = ends[i]
            if e <= s:
                out[i] = -np.inf
                continue
            total = 0.0
            for a in range(nq):
                best = np.float32(-np.inf)
                for j in range(s, e):
                    acc = np.float32(0.0)
                    for c in range(d):
                        acc += query[a, c] * rows[j, c]
                    if acc > best:
                        best = acc
                total += best
            out[i] = total

    @numba.njit(parallel=True, fastmath=True, cache=True)
    def _assign_jit(points, centroids, labels, dists):  # pragma: no cover - jitted
        n, d = points.shape
        k = centroids.shape[0]
        for i in numba.prange(n):
            best = np.inf
            bj = 0
            for j in range(k):
                acc = 0.0
                for c in range(d):
                    diff = points[i, c] - centroids[j, c]
                    acc += diff * diff
                if acc < best:
                    best = acc
                    bj = j
            labels[i] = bj
            dists[i] = best

    @numba.njit(cache=True)
    def _centroid_sums_jit(points, labels, sums, counts):  # pragma: no cover - jitted
        n, d = points.shape
        for i in range(n):
            j = labels[i]
            counts[j] += 1
            for c in range(d):
                sums[j, c] += points[i, c]

    @numba.njit(cache=True)
    def _adc_scan_jit(lut, codes, base, out):  # pragma: no cover - jitted
        n, m = codes.shape
        for i in range(n):
            acc = base
            for s in range(m):
                acc += lut[s, codes[i, s]]
            out[i] = acc

    @numba.njit(cache=True)
    def _adc_scan_probes_jit(lut, flat_codes, starts, ends, bases, out):  # pragma: no cover
        m = flat_codes.shape[1]
        pos = 0
        for p in range(starts.shape[0]):
            base = bases[p]
            for i in range(starts[p], ends[p]):
                acc = base
                for s in range(m):
                    acc += lut[s, flat_codes[i, s]]
                out[pos] = acc
                pos += 1

    @numba.njit(parallel=True, cache=True)
    def _adc_topk_rows_jit(  # pragma: no cover - jitted
        luts, flat_codes, flat_ids, starts, ends, bases, out_ids, out_scores, out_counts
    ):
        # all query rows scanned in one parallel pass; per row a running
        # top-k ordered by (score desc, id asc), matching the sort contract
        nq, nprobe = starts.shape
        per_row = out_ids.shape[1]
        m = flat_codes.shape[1]
        for r in numba.prange(nq):
            count = 0
            for p in range(nprobe):
                base = bases[r, p]
                for i in range(starts[r, p], ends[r, p]):
                    acc = base
                    for s in range(m):
                        acc += luts[r, s, flat_codes[i, s]]
                    eid = flat_ids[i]
                    if count < per_row:
                        j = count
                        count += 1
                    else:
                        worst = out_scores[r, per_row - 1]
                        if acc < worst or (
                            acc == worst and eid > out_ids[r, per_row - 1]
                        ):
                            continue
                        j = per_row - 1
                    while j > 0 and (
                        out_scores[r, j - 1] < acc
                        or (out_scores[r, j - 1] == acc and out_ids[r, j - 1] > eid)
                    ):
                        out_scores[r, j] = out_scores[r, j - 1]
                        out_ids[r, j] = out_ids[r, j - 1]
                        j -= 1
                    out_scores[r, j] = acc
                    out_ids[r, j] = eid
            out_counts[r] = count

    _PARALLEL_MIN_ROWS = 32_768

    def maxsim_segments_nb(query, rows, starts, ends):
        out = np.empty(starts.shape[0], dtype=np.float64)
        span = int((ends - starts).sum())
        if span >= _PARALLEL_MIN_ROWS:
            _maxsim_segments_jit(query, rows, starts, ends, out)
        else:
            _maxsim_segments_ser_jit(query, rows, starts, ends, out)
        return out

    def maxsim_packed_nb(query, rows, offsets):
        return maxsim_segments_nb(query, rows, offsets[:-1], offsets[1:])

    def adc_topk_rows_nb(luts, flat_codes, flat_ids, starts, ends, bases, per_row):
        nq = starts.shape[0]
        out_ids = np.zeros((nq, per_row), dtype=np.uint64)
        out_scores = np.full((nq, per_row), -np.inf, dtype=np.float64)
        out_counts = np.zeros(nq, dtype=np.int64)
        _adc_topk_rows_jit(
            luts, flat_codes, flat_ids, starts, ends, bases, out_ids, out_scores, out_counts
        )
        return out_ids, out_scores, out_counts

    def assign_nearest_nb(points, centroids):
        n = points.shape[0]
        labels = np.empty(n, dtype=np.int64)
        dists = np.empty(n, dtype=np.float64)
        _assign_jit(points, centroids, labels, dists)
        return labels, dists

    def centroid_sums_nb(points, labels, k):
        sums = np.zeros((k, points.shape[1]), dtype=np.float64)
        counts = np.zeros(k, dtype=np.int64)
        _centroid_sums_jit(points.astype(np.float64, copy=False), labels, sums, counts)
        return sums, counts

    def adc_scan_nb(lut, codes, base):
        out = np.empty(codes.shape[0], dtype=np.float64)
        _adc_scan_jit(lut, codes, float(base), out)
        return out

    def adc_scan_probes_nb(lut, flat_codes, starts, ends, bases):
        total = int((ends - starts).sum())
        out = np.empty(total, dtype=np.float64)
        _adc_scan_probes_jit(lut, flat_codes, starts, ends, bases, out)
        return out


if BACKEND == "numba":
    maxsim_packed = maxsim_packed_nb
    maxsim_segments = maxsim_segments_nb
    assign_nearest = assign_nearest_nb
    centroid_sums = centroid_sums_nb
    adc_scan = adc_scan_nb
    adc_scan_probes = adc_scan_probes_nb
    adc_topk_rows = adc_topk_rows_nb
else:
    maxsim_packed = maxsim_packed_np
    maxsim_segments = maxsim_segments_np
    assign_nearest = assign_nearest_np
    centroid_sums = centroid_sums_np
    adc_scan = adc_scan_np
    adc_scan_probes = adc_scan_probes_np
    adc_topk_rows = None  # numpy path keeps the per-row loop in index.py
