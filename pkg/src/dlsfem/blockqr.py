"""Least-squares solver for row-blocked rectangular systems.

Solves min ||B u - l||_2 where B is stored as independent dense row
blocks, each touching a small set of columns (the element panels produced
by the overdetermined assembly).  The algorithm is a sequential Householder
QR: columns are permuted into a geometric (left-to-right) order, blocks are
merged into a sliding active window of R rows, and rows whose leading
column can no longer be touched are frozen out.  Every arithmetic step is
a LAPACK Householder QR on a small dense stack, so the factorization is
backward stable like a dense QR while the work stays proportional to
(number of rows) x (window width)^2 instead of rows x columns^2.

The factorization runs in the dtype of the blocks (single/double, real or
complex); no normal equations are formed anywhere.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .linalg import RankDeficient, eps


def solve_blocked_ls(blocks, rhs, n_cols, sort_keys=None, row_cap=4096):
    """Minimize ||B u - l||_2 for a row-blocked B.

    Parameters
    ----------
    blocks : list of (rows, cols)
        Dense panels with their global column index lists.
    rhs : list of ndarray
        Right-hand-side slice for each block.
    n_cols : int
        Global column dimension.
    sort_keys : (n_cols, k) array, optional
        Lexicographic keys (primary first) used to order columns; geometric
        keys keep the active window small.  Identity order when omitted.
    row_cap : int
        Maximum number of incoming rows merged in one LAPACK call.

    Returns
    -------
    x : ndarray (n_cols,)
    r_diag : ndarray (n_cols,) magnitudes of the R diagonal (rank diagnostics)
    """
    if n_cols == 0:
        return np.zeros(0), np.zeros(0)
    dtype = blocks[0][0].dtype if blocks else np.float64
    if sort_keys is None:
        order = np.arange(n_cols)
    else:
        keys = np.asarray(sort_keys)
        order = np.lexsort(tuple(keys[:, k] for k in range(keys.shape[1] - 1, -1, -1)))
    rank_of = np.empty(n_cols, dtype=np.int64)
    rank_of[order] = np.arange(n_cols)

    total_rows = 0
    items = []
    for (rows, cols), r in zip(blocks, rhs):
        total_rows += rows.shape[0]
        if cols.size == 0:
            continue
        pcols = rank_of[cols]
        sort = np.argsort(pcols, kind="stable")
        items.append((int(pcols[sort[0]]), pcols[sort], np.asarray(rows)[:, sort], r))
    items.sort(key=lambda it: it[0])

    finished_data = [None] * n_cols    # per lead column: (row data, rhs value)
    act = np.zeros((0, 0), dtype=dtype)
    act_rhs = np.zeros(0, dtype=dtype)
    act_lo = 0                         # permuted column id of act[:, 0]

    def freeze_below(new_lo):
        """Move active rows with lead < new_lo to the finished store."""
        nonlocal act, act_rhs, act_lo
        if act.shape[0] == 0:
            act_lo = new_lo
            return
        keep = []
        for i in range(act.shape[0]):
            nz = np.flatnonzero(act[i])
            if nz.size == 0:
                continue
            lead = act_lo + nz[0]
            if lead < new_lo:
                data = act[i, nz[0] :]
                last = np.flatnonzero(data)
                finished_data[lead] = (data[: last[-1] + 1].copy(), act_rhs[i])
            else:
                keep.append(i)
        if keep:
            shift = min(int(np.flatnonzero(act[i])[0]) for i in keep)
            act = act[keep, shift:]
            act_rhs = act_rhs[keep]
            act_lo += shift
        else:
            act = np.zeros((0, 0), dtype=dtype)
            act_rhs = np.zeros(0, dtype=dtype)
            act_lo = new_lo

    idx = 0
    while idx < len(items):
        batch_lo = items[idx][0]
        freeze_below(batch_lo)
        lo = min(batch_lo, act_lo) if act.shape[0] else batch_lo
        hi = act_lo + act.shape[1] if act.shape[0] else lo
        hi = max(hi, int(items[idx][1][-1]) + 1)
        # growing the window is what costs; adding rows at fixed width is cheap
        width_cap = max(256, int(1.25 * (hi - lo)) + 64)
        # always consume at least one block so the loop advances
        mn, pcols, rows, r = items[idx]
        batch = [(pcols, rows, r)]
        nrows = act.shape[0] + rows.shape[0]
        idx += 1
        while idx < len(items) and nrows < row_cap:
            mn, pcols, rows, r = items[idx]
            new_hi = max(hi, int(pcols[-1]) + 1)
            if new_hi - lo > width_cap:
                break
            batch.append((pcols, rows, r))
            hi = new_hi
            nrows += rows.shape[0]
            idx += 1
        width = hi - lo
        stack = np.zeros((nrows, width + 1), dtype=dtype)
        pos = act.shape[0]
        if pos:
            stack[:pos, act_lo - lo : act_lo - lo + act.shape[1]] = act
            stack[:pos, width] = act_rhs
        for pcols, rows, r in batch:
            m = rows.shape[0]
            stack[pos : pos + m, pcols - lo] = rows
            stack[pos : pos + m, width] = r
            pos += m
        r_aug = scipy.linalg.qr(stack, mode="r", check_finite=False)[0]
        nkeep = min(r_aug.shape[0], width + 1)
        body = r_aug[:nkeep, :width]
        nz_rows = np.abs(body).sum(axis=1) > 0
        act = body[nz_rows]
        act_rhs = r_aug[:nkeep, width][nz_rows]
        act_lo = lo

    freeze_below(n_cols)

    missing = [c for c in range(n_cols) if finished_data[c] is None]
    if missing:
        raise RankDeficient(f"{len(missing)} columns without pivot (first: {missing[0]})")
    r_diag = np.array([np.abs(finished_data[c][0][0]) for c in range(n_cols)])
    dmax = r_diag.max() if n_cols else 0.0
    # structural rank guard: legitimate ill-conditioning may push diagonal
    # entries to eps-level of the scale, but a lost column falls far below
    if dmax == 0.0 or r_diag.min() < 100.0 * eps(dtype) * dmax:
        raise RankDeficient(
            "R diagonal below %g" % (100.0 * eps(dtype) * dmax)
        )

    x = np.zeros(n_cols, dtype=dtype)
    for c in range(n_cols - 1, -1, -1):
        data, rv = finished_data[c]
        span = min(data.size, n_cols - c)
        acc = rv - np.dot(data[1:span], x[c + 1 : c + span])
        x[c] = acc / data[0]

    out = np.zeros(n_cols, dtype=dtype)
    out[order] = x
    r_diag_out = np.zeros(n_cols)
    r_diag_out[order] = r_diag
    return out, r_diag_out
