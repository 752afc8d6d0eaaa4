"""Aggregated linear reformulation A u - b >= 0 of the surrogate over its box.

The stacked variable is u = [x; xhat_1; ...; xhat_L; beta], and the row
blocks are, in order: input box, binary box, four ReLU row families per
layer, and the two-sided output box applied to the effective output map
(normalization and feedthrough folded in). Big-M constants are tightened in
three stages: interval arithmetic, LP relaxation, and per-neuron MILP solved
by branch and bound with best-bound node selection.
"""

from __future__ import annotations

import heapq
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import conic
from .grid import VerificationBounds
from .surrogate import Surrogate

_CERT_SLACK = 10.0   # residual-based inflation factor on solver-reported bounds


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """Pre-activation affine map of one hidden layer: z = w @ input + b."""
    w: np.ndarray
    b: np.ndarray

    @property
    def size(self) -> int:
        return self.b.size


@dataclass
class EncodingLayout:
    n_in: int
    hidden: tuple[int, ...]
    n_out: int

    @property
    def h_total(self) -> int:
        return sum(self.hidden)

    @property
    def t(self) -> int:
        return self.n_in + 2 * self.h_total

    @property
    def x_slice(self) -> slice:
        return slice(0, self.n_in)

    def xhat_slice(self, layer: int) -> slice:
        a = self.n_in + sum(self.hidden[:layer])
        return slice(a, a + self.hidden[layer])

    @property
    def xhat_all(self) -> slice:
        return slice(self.n_in, self.n_in + self.h_total)

    def beta_slice(self, layer: int) -> slice:
        a = self.n_in + self.h_total + sum(self.hidden[:layer])
        return slice(a, a + self.hidden[layer])

    @property
    def beta_all(self) -> slice:
        return slice(self.n_in + self.h_total, self.t)

    def layer_input_slice(self, layer: int) -> slice:
        return self.x_slice if layer == 0 else self.xhat_slice(layer - 1)

    def to_dict(self) -> dict:
        return {"n_in": self.n_in, "hidden": list(self.hidden), "n_out": self.n_out}


@dataclass
class RowBlocks:
    """Row index ranges of each constraint family inside A."""
    input_lo: slice
    input_hi: slice
    beta_lo: slice
    beta_hi: slice
    relu_a: list[slice]   # xhat >= w x + b, per layer
    relu_b: list[slice]   # xhat >= 0
    relu_c: list[slice]   # xhat <= w x + b - M_min (1 - beta)
    relu_d: list[slice]   # xhat <= M_max beta
    output_lo: slice
    output_hi: slice


@dataclass
class BigMReport:
    interval_lo: np.ndarray
    interval_hi: np.ndarray
    lp_lo: np.ndarray
    lp_hi: np.ndarray
    milp_lo: np.ndarray
    milp_hi: np.ndarray
    milp_gap: np.ndarray
    time_spent: np.ndarray
    flagged: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).tolist() for k in (
            "interval_lo", "interval_hi", "lp_lo", "lp_hi",
            "milp_lo", "milp_hi", "milp_gap", "time_spent")}
        d["flagged"] = self.flagged
        return d


@dataclass
class Encoding:
    A: sp.csr_matrix
    b: np.ndarray
    layout: EncodingLayout
    rows: RowBlocks
    layers: list[LayerSpec]
    m_min: np.ndarray
    m_max: np.ndarray
    w_out_eff: np.ndarray
    b_out_eff: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray
    report: BigMReport | None = None

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def residuals(self, u: np.ndarray) -> np.ndarray:
        return self.A @ u - self.b

    def output(self, u: np.ndarray) -> np.ndarray:
        xpart = u[: self.layout.n_in + self.layout.h_total]
        return self.w_out_eff @ xpart + self.b_out_eff

    def select_output(self, i: int) -> tuple[np.ndarray, float]:
        """Row functional of output i: value = w . [x; xhat] + const."""
        return self.w_out_eff[i].copy(), float(self.b_out_eff[i])

    def save(self, path: str) -> None:
        coo = self.A.tocoo()
        blob = {
            "layout": self.layout.to_dict(),
            "A": {"row": coo.row.tolist(), "col": coo.col.tolist(),
                  "val": coo.data.tolist(), "shape": list(coo.shape)},
            "b": self.b.tolist(),
            "m_min": self.m_min.tolist(),
            "m_max": self.m_max.tolist(),
            "w_out_eff": self.w_out_eff.tolist(),
            "b_out_eff": self.b_out_eff.tolist(),
            "x_lo": self.x_lo.tolist(), "x_hi": self.x_hi.tolist(),
            "y_lo": self.y_lo.tolist(), "y_hi": self.y_hi.tolist(),
            "layers": [{"w": l.w.tolist(), "b": l.b.tolist()} for l in self.layers],
            "report": self.report.to_dict() if self.report else None,
        }
        with open(path, "w") as f:
            json.dump(blob, f, indent=1, sort_keys=True)


def load_encoding(path: str) -> Encoding:
    with open(path) as f:
        blob = json.load(f)
    lay = EncodingLayout(**blob["layout"])
    lay.hidden = tuple(lay.hidden)
    Ad = blob["A"]
    A = sp.csr_matrix((Ad["val"], (Ad["row"], Ad["col"])), shape=tuple(Ad["shape"]))
    layers = [LayerSpec(w=np.array(l["w"]), b=np.array(l["b"]))
              for l in blob["layers"]]
    rep = None
    if blob.get("report"):
        rd = blob["report"]
        flagged = rd.pop("flagged", [])
        rep = BigMReport(**{k: np.array(v) for k, v in rd.items()}, flagged=flagged)
    enc = _assemble_from_parts(
        layers, np.array(blob["w_out_eff"]), np.array(blob["b_out_eff"]),
        np.array(blob["x_lo"]), np.array(blob["x_hi"]),
        np.array(blob["y_lo"]), np.array(blob["y_hi"]),
        np.array(blob["m_min"]), np.array(blob["m_max"]))
    enc.report = rep
    return enc


# ---------------------------------------------------------------------------
# flattening
# ---------------------------------------------------------------------------

def flatten(s: Surrogate):
    """Absorb normalization and feedthrough into the layer and output maps.

    forward(s, x) == w_out_eff @ [x; relu(w0_eff x + b0_eff)] + b_out_eff.
    """
    if np.any(s.sigma_in <= 0.0):
        raise ValueError("sigma_in must be strictly positive")
    w0_eff = s.w0 / s.sigma_in[None, :]
    b0_eff = s.b0 - w0_eff @ s.mu_in
    w_out_eff = np.hstack([s.j_star, s.sigma_out[:, None] * s.w1])
    b_out_eff = s.sigma_out * s.b1 + s.mu_out + s.r_star
    return w0_eff, b0_eff, w_out_eff, b_out_eff


def encode_point(layers: list[LayerSpec], x: np.ndarray):
    """Exact lifted point (u, per-layer activations) induced by input x."""
    xs = [np.asarray(x, dtype=float)]
    betas = []
    for lay in layers:
        z = lay.w @ xs[-1] + lay.b
        xs.append(np.maximum(z, 0.0))
        betas.append((z > 0.0).astype(float))
    u = np.concatenate(xs + betas)
    return u, xs[1:], betas


# ---------------------------------------------------------------------------
# big-M: interval stage
# ---------------------------------------------------------------------------

def _interval_chain(layers, x_lo, x_hi):
    """Per-layer pre-activation interval bounds by forward interval arithmetic."""
    z_los, z_his = [], []
    lo, hi = np.asarray(x_lo, float), np.asarray(x_hi, float)
    for lay in layers:
        a = lay.w * lo[None, :]
        b = lay.w * hi[None, :]
        z_lo = lay.b + np.minimum(a, b).sum(axis=1)
        z_hi = lay.b + np.maximum(a, b).sum(axis=1)
        z_los.append(z_lo)
        z_his.append(z_hi)
        lo, hi = np.maximum(z_lo, 0.0), np.maximum(z_hi, 0.0)
    return np.concatenate(z_los), np.concatenate(z_his)


def clip_to_bigm(z_lo: np.ndarray, z_hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.minimum(z_lo, 0.0), np.maximum(z_hi, 0.0)


def bigm_interval(w0_eff, b0_eff, input_box):
    """Loose big-M constants from interval arithmetic over the input box."""
    lo, hi = input_box
    z_lo, z_hi = _interval_chain([LayerSpec(w0_eff, b0_eff)], lo, hi)
    return clip_to_bigm(z_lo, z_hi)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _assemble_from_parts(layers, w_out_eff, b_out_eff, x_lo, x_hi, y_lo, y_hi,
                         m_min, m_max) -> Encoding:
    for arr in (x_lo, x_hi, y_lo, y_hi, m_min, m_max):
        if not np.all(np.isfinite(arr)):
            raise EncodingError("all box and big-M bounds must be finite")
    if np.any(y_lo > y_hi) or np.any(x_lo > x_hi):
        raise EncodingError("empty verification box (min > max)")
    hidden = tuple(l.size for l in layers)
    n_out = w_out_eff.shape[0]
    lay = EncodingLayout(n_in=layers[0].w.shape[1], hidden=hidden, n_out=n_out)
    t = lay.t
    n_in, h_tot = lay.n_in, lay.h_total

    rows_ijv: list[tuple[int, int, float]] = []
    bvec: list[float] = []

    def add_row(cols, vals, bval):
        r = len(bvec)
        for c, v in zip(cols, vals):
            if v != 0.0:
                rows_ijv.append((r, c, float(v)))
        bvec.append(float(bval))
        return r

    # input box: x_k - lo >= 0, then hi - x_k >= 0
    input_lo = slice(0, n_in)
    for k in range(n_in):
        add_row([k], [1.0], x_lo[k])
    input_hi = slice(n_in, 2 * n_in)
    for k in range(n_in):
        add_row([k], [-1.0], -x_hi[k])

    # binary box: beta >= 0, then 1 - beta >= 0
    r0 = len(bvec)
    beta_lo = slice(r0, r0 + h_tot)
    for j in range(h_tot):
        add_row([lay.beta_all.start + j], [1.0], 0.0)
    r0 = len(bvec)
    beta_hi = slice(r0, r0 + h_tot)
    for j in range(h_tot):
        add_row([lay.beta_all.start + j], [-1.0], -1.0)

    # ReLU families, per layer
    relu_a, relu_b, relu_c, relu_d = [], [], [], []
    ofs = 0
    for li, spec in enumerate(layers):
        in_sl = lay.layer_input_slice(li)
        xh_sl = lay.xhat_slice(li)
        bt_sl = lay.beta_slice(li)
        h = spec.size
        in_cols = list(range(in_sl.start, in_sl.stop))
        r0 = len(bvec)
        relu_a.append(slice(r0, r0 + h))
        for i in range(h):
            add_row(in_cols + [xh_sl.start + i],
                    list(-spec.w[i]) + [1.0], spec.b[i])
        r0 = len(bvec)
        relu_b.append(slice(r0, r0 + h))
        for i in range(h):
            add_row([xh_sl.start + i], [1.0], 0.0)
        r0 = len(bvec)
        relu_c.append(slice(r0, r0 + h))
        for i in range(h):
            add_row(in_cols + [xh_sl.start + i, bt_sl.start + i],
                    list(spec.w[i]) + [-1.0, m_min[ofs + i]],
                    m_min[ofs + i] - spec.b[i])
        r0 = len(bvec)
        relu_d.append(slice(r0, r0 + h))
        for i in range(h):
            add_row([xh_sl.start + i, bt_sl.start + i],
                    [-1.0, m_max[ofs + i]], 0.0)
        ofs += h

    # output box on the effective output map
    xpart_cols = list(range(0, n_in + h_tot))
    r0 = len(bvec)
    output_lo = slice(r0, r0 + n_out)
    for i in range(n_out):
        add_row(xpart_cols, list(w_out_eff[i]), y_lo[i] - b_out_eff[i])
    r0 = len(bvec)
    output_hi = slice(r0, r0 + n_out)
    for i in range(n_out):
        add_row(xpart_cols, list(-w_out_eff[i]), b_out_eff[i] - y_hi[i])

    N = len(bvec)
    if rows_ijv:
        r, c, v = zip(*rows_ijv)
    else:
        r, c, v = [], [], []
    A = sp.csr_matrix((v, (r, c)), shape=(N, t))
    blocks = RowBlocks(input_lo=input_lo, input_hi=input_hi,
                       beta_lo=beta_lo, beta_hi=beta_hi,
                       relu_a=relu_a, relu_b=relu_b, relu_c=relu_c, relu_d=relu_d,
                       output_lo=output_lo, output_hi=output_hi)
    return Encoding(A=A, b=np.array(bvec), layout=lay, rows=blocks,
                    layers=list(layers), m_min=np.asarray(m_min, float),
                    m_max=np.asarray(m_max, float),
                    w_out_eff=w_out_eff, b_out_eff=b_out_eff,
                    x_lo=np.asarray(x_lo, float), x_hi=np.asarray(x_hi, float),
                    y_lo=np.asarray(y_lo, float), y_hi=np.asarray(y_hi, float))


def assemble(s: Surrogate, bounds: VerificationBounds,
             bigm: tuple[np.ndarray, np.ndarray]) -> Encoding:
    """Aggregate input box, binary box, ReLU rows and output box into A u - b >= 0."""
    w0_eff, b0_eff, w_out_eff, b_out_eff = flatten(s)
    x_lo, x_hi = bounds.x_box()
    y_lo, y_hi = bounds.y_box()
    return _assemble_from_parts([LayerSpec(w0_eff, b0_eff)], w_out_eff, b_out_eff,
                                x_lo, x_hi, y_lo, y_hi, *bigm)


# ---------------------------------------------------------------------------
# big-M: LP and MILP stages
# ---------------------------------------------------------------------------

def _lp_cone(enc: Encoding, fixed: list[tuple[int, float]] | None = None):
    """LP relaxation of the encoding as a cone problem (fixed binaries first)."""
    rows = [(-enc.A).tocsr()]
    h = [-enc.b]
    n_zero = 0
    if fixed:
        t = enc.layout.t
        F = sp.lil_matrix((len(fixed), t))
        fh = np.empty(len(fixed))
        for k, (col, val) in enumerate(fixed):
            F[k, col] = 1.0
            fh[k] = val
        rows = [F.tocsr()] + rows
        h = [fh] + h
        n_zero = len(fixed)
    G = sp.vstack(rows).tocsr()
    hh = np.concatenate(h)
    dims = conic.ConeDims(zero=n_zero, nonneg=enc.n_rows)
    return G, hh, dims


def _neuron_objective(enc: Encoding, neuron: int) -> tuple[np.ndarray, float]:
    """Linear functional of neuron's pre-activation over u."""
    ofs = 0
    for li, spec in enumerate(enc.layers):
        if neuron < ofs + spec.size:
            i = neuron - ofs
            in_sl = enc.layout.layer_input_slice(li)
            w = np.zeros(enc.layout.t)
            w[in_sl] = spec.w[i]
            return w, float(spec.b[i])
        ofs += spec.size
    raise IndexError(f"neuron {neuron} out of range")


def _pad(val: float, tol: float) -> float:
    return _CERT_SLACK * tol * (1.0 + abs(val))


def _lp_extremum(G, h, dims, w, sense: str, tol: float):
    """Padded outer value of max/min w.z over the cone program.

    Returns None on an uncertified solve and raises on primal infeasibility.
    """
    c = -w if sense == "max" else w
    sol = conic.solve(conic.ConeProblem(c=c, G=G, h=h, dims=dims), tol=tol)
    if sol.status == "primal_infeasible":
        raise EncodingError("LP relaxation is infeasible")
    if not sol.optimal:
        return None
    val = -sol.objective if sense == "max" else sol.objective
    return val + _pad(val, tol) if sense == "max" else val - _pad(val, tol)


def bigm_lp(enc: Encoding, tol: float = 1e-6):
    """Stage-2 big-M: per-neuron pre-activation extremes over the LP relaxation.

    Never loosens the interval bounds; neurons whose LP fails to solve keep
    them and are flagged.
    """
    G, h, dims = _lp_cone(enc)
    h_tot = enc.layout.h_total
    z_lo = np.empty(h_tot)
    z_hi = np.empty(h_tot)
    flagged = []
    iv_lo, iv_hi = _interval_chain(enc.layers, enc.x_lo, enc.x_hi)
    for j in range(h_tot):
        w, b0 = _neuron_objective(enc, j)
        try:
            hi = _lp_extremum(G, h, dims, w, "max", tol)
            lo = _lp_extremum(G, h, dims, w, "min", tol)
        except EncodingError:
            raise EncodingError("verification region is empty (LP infeasible)")
        if hi is None or lo is None:
            warnings.warn(f"big-M LP for neuron {j} did not certify; keeping interval")
            flagged.append(j)
            z_lo[j], z_hi[j] = iv_lo[j], iv_hi[j]
            continue
        z_lo[j] = max(lo + b0, iv_lo[j])
        z_hi[j] = min(hi + b0, iv_hi[j])
    return z_lo, z_hi, flagged


def _bb_max(enc: Encoding, w: np.ndarray, time_limit: float, tol: float,
            node_cap: int = 100_000):
    """Best-bound branch and bound maximizing w . u over the MILP.

    Returns (outer bound, gap). The outer bound is safe on timeout: it is the
    best open node bound, never the incumbent alone. Branching picks the most
    fractional free binary; children inherit the parent bound as a cap.
    """
    t_start = time.monotonic()
    beta_cols = np.arange(enc.layout.beta_all.start, enc.layout.beta_all.stop)

    def node_lp(fixed):
        G, h, dims = _lp_cone(enc, fixed)
        return conic.solve(conic.ConeProblem(c=-w, G=G, h=h, dims=dims), tol=tol)

    sol = node_lp([])
    if sol.status == "primal_infeasible":
        raise EncodingError("MILP root relaxation infeasible")
    if not sol.optimal:
        return np.inf, np.inf
    root_val = -sol.objective
    heap = [(-(root_val + _pad(root_val, tol)), 0, [], sol)]
    # inner: certified-achievable value; outer: upper bound on explored leaves
    inc_inner = -np.inf
    inc_outer = -np.inf
    count = 0
    while heap:
        open_top = -heap[0][0]
        bound = max(open_top, inc_outer)
        if open_top <= inc_inner + tol * (1.0 + abs(inc_inner)):
            return bound, max(bound - inc_inner, 0.0)
        if time.monotonic() - t_start > time_limit or count >= node_cap:
            return bound, bound - inc_inner
        nbound, _, fixed, sol = heapq.heappop(heap)
        parent_outer = -nbound
        beta = sol.z[beta_cols]
        fixed_cols = {c for c, _ in fixed}
        free = [j for j, cc in enumerate(beta_cols) if cc not in fixed_cols]
        int_viol = max((min(beta[j], 1.0 - beta[j]) for j in free), default=0.0)
        if int_viol <= 1e-6:
            val = -sol.objective
            inc_inner = max(inc_inner, val - _pad(val, tol))
            inc_outer = max(inc_outer, min(val + _pad(val, tol), parent_outer))
            continue
        branch_j = min(free, key=lambda j: abs(beta[j] - 0.5))
        for fix_val in (0.0, 1.0):
            child_fixed = fixed + [(int(beta_cols[branch_j]), fix_val)]
            csol = node_lp(child_fixed)
            if csol.status == "primal_infeasible":
                continue
            if not csol.optimal:
                bound = max(parent_outer, inc_outer)
                return bound, bound - inc_inner
            cval = -csol.objective
            couter = min(cval + _pad(cval, tol), parent_outer)
            count += 1
            heapq.heappush(heap, (-couter, count, child_fixed, csol))
    if not np.isfinite(inc_inner):
        raise EncodingError("MILP has no integral-feasible point")
    return inc_outer, max(inc_outer - inc_inner, 0.0)


def bigm_milp(enc: Encoding, time_limit_s: float = 75.0, tol: float = 1e-6):
    """Stage-3 big-M: exact per-neuron extremes by branch and bound.

    time_limit_s caps each neuron-direction solve; on timeout the proven
    outer bound (never the incumbent) is returned. time_limit_s = 0 keeps
    the stage-2 bounds unchanged.
    """
    h_tot = enc.layout.h_total
    iv_lo, iv_hi = _interval_chain(enc.layers, enc.x_lo, enc.x_hi)
    z_lo = np.empty(h_tot)
    z_hi = np.empty(h_tot)
    gaps = np.zeros(h_tot)
    times = np.zeros(h_tot)
    for j in range(h_tot):
        w, b0 = _neuron_objective(enc, j)
        t0 = time.monotonic()
        if time_limit_s <= 0.0:
            z_lo[j], z_hi[j] = iv_lo[j], iv_hi[j]
            continue
        ub, gap_hi = _bb_max(enc, w, time_limit_s, tol)
        lb_neg, gap_lo = _bb_max(enc, -w, time_limit_s, tol)
        times[j] = time.monotonic() - t0
        z_hi[j] = ub + b0
        z_lo[j] = -lb_neg + b0
        gaps[j] = max(gap_hi, gap_lo)
    return z_lo, z_hi, gaps, times


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def build_encoding(s: Surrogate, bounds: VerificationBounds,
                   time_limit_milp: float = 75.0, tol: float = 1e-6) -> Encoding:
    """Three-stage big-M tightening followed by final assembly."""
    w0_eff, b0_eff, w_out_eff, b_out_eff = flatten(s)
    layers = [LayerSpec(w0_eff, b0_eff)]
    x_lo, x_hi = bounds.x_box()
    y_lo, y_hi = bounds.y_box()
    iv_lo, iv_hi = _interval_chain(layers, x_lo, x_hi)

    draft = _assemble_from_parts(layers, w_out_eff, b_out_eff, x_lo, x_hi,
                                 y_lo, y_hi, *clip_to_bigm(iv_lo, iv_hi))
    lp_lo, lp_hi, flagged = bigm_lp(draft, tol=tol)

    draft2 = _assemble_from_parts(layers, w_out_eff, b_out_eff, x_lo, x_hi,
                                  y_lo, y_hi, *clip_to_bigm(lp_lo, lp_hi))
    milp_lo_raw, milp_hi_raw, gaps, times = bigm_milp(
        draft2, time_limit_s=time_limit_milp, tol=tol)
    milp_lo = np.maximum(milp_lo_raw, lp_lo) if time_limit_milp > 0 else lp_lo
    milp_hi = np.minimum(milp_hi_raw, lp_hi) if time_limit_milp > 0 else lp_hi

    enc = _assemble_from_parts(layers, w_out_eff, b_out_eff, x_lo, x_hi,
                               y_lo, y_hi, *clip_to_bigm(milp_lo, milp_hi))
    enc.report = BigMReport(
        interval_lo=iv_lo, interval_hi=iv_hi,
        lp_lo=lp_lo, lp_hi=lp_hi,
        milp_lo=milp_lo, milp_hi=milp_hi,
        milp_gap=gaps, time_spent=times, flagged=flagged)
    return enc
