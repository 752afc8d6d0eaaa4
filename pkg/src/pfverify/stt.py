"""Lifted SDP relaxation with selectively enforced product cuts, tightened
sequentially (Algorithm: solve, scan the product-constraint residual matrix
for the worst violations, enforce them, re-solve).

The single PSD variable is the (1+t) x (1+t) matrix

    [[1, u'], [u, Gamma]],   u = [x; xhat; beta],

stored as a scaled lower-triangle vector. Every model constraint is a linear
functional of that vector: the aggregated rows A u - b >= 0 act on the first
column, each enforced product cut acts on Gamma and u, and the equality
tightenings pin diag(B) = beta, diag(delta) = xhat and the per-neuron
quadratic ReLU identity on diag(eta).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import conic
from .reform import Encoding

_SQRT2 = np.sqrt(2.0)


def _tri_index(i: int, j: int) -> int:
    """Position of entry (i, j), i >= j, in the svec ordering."""
    if i < j:
        i, j = j, i
    return i * (i + 1) // 2 + j


@dataclass
class LiftedLayout:
    """Index bookkeeping for the lifted matrix over u = [x; xhat; beta]."""

    t: int

    @property
    def dim(self) -> int:
        return self.t + 1

    @property
    def n_z(self) -> int:
        return conic.svec_size(self.dim)

    def u_entry(self, k: int) -> tuple[int, float]:
        """svec position and weight w with u_k = w * z[pos]."""
        return _tri_index(k + 1, 0), 1.0 / _SQRT2

    def gamma_entry(self, i: int, j: int) -> tuple[int, float]:
        """svec position and weight w with Gamma_ij = w * z[pos]."""
        pos = _tri_index(i + 1, j + 1)
        return pos, (1.0 if i == j else 1.0 / _SQRT2)

    def corner(self) -> tuple[int, float]:
        return 0, 1.0


@dataclass
class VerificationTarget:
    family: str            # V2 | pinj | qinj | lft | ltf
    index: int             # element within the family
    direction: str         # under | over
    m: np.ndarray          # ground-truth quadratic form over the x block
    output_index: int      # row of the stacked output vector

    def label(self) -> str:
        return f"{self.family}:{self.index}:{self.direction}"


_FAMILY_OFFSETS = ("V2", "pinj", "qinj", "lft", "ltf")


def make_target(maps, net, family: str, index: int, direction: str) -> VerificationTarget:
    """Target from the quadratic map family and output element."""
    if direction not in ("under", "over"):
        raise ValueError("direction must be 'under' or 'over'")
    groups = {"V2": maps.m_v, "pinj": maps.m_p, "qinj": maps.m_q,
              "lft": maps.m_f, "ltf": maps.m_t}
    if family not in groups:
        raise ValueError(f"unknown family {family!r}")
    group = groups[family]
    if not 0 <= index < len(group):
        raise ValueError(f"index {index} out of range for family {family}")
    sizes = [net.n_b, net.n_b, net.n_b, net.n_l, net.n_l]
    offset = sum(sizes[: _FAMILY_OFFSETS.index(family)])
    return VerificationTarget(family=family, index=index, direction=direction,
                              m=group[index], output_index=offset + index)


@dataclass
class CutSet:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    provenance: dict[tuple[int, int], str] = field(default_factory=dict)
    n_rows: int = 0

    def __len__(self) -> int:
        return len(self.pairs)

    def __contains__(self, pair) -> bool:
        return self._norm(pair) in self._set()

    @staticmethod
    def _norm(pair) -> tuple[int, int]:
        i, j = int(pair[0]), int(pair[1])
        return (i, j) if i <= j else (j, i)

    def _set(self):
        return set(self.pairs)

    def add(self, pairs, provenance: str) -> int:
        """Add normalized pairs, skipping duplicates; returns count added."""
        have = self._set()
        added = 0
        for p in pairs:
            q = self._norm(p)
            if q[0] < 0 or q[1] >= self.n_rows:
                raise IndexError(f"cut index {q} outside row range 0..{self.n_rows - 1}")
            if q not in have:
                self.pairs.append(q)
                self.provenance[q] = provenance
                have.add(q)
                added += 1
        return added


def initial_cuts(enc: Encoding) -> CutSet:
    """Starting cut set: the diagonal-bounding product families.

    Per input coordinate, the product of its lower and upper box rows bounds
    diag(X) above; per neuron, the product of the ReLU rows xhat >= 0 and
    M_max beta - xhat >= 0 bounds diag(eta). Together these keep the lifted
    objective bounded (dual feasibility) and are the targeted initializers.
    """
    cuts = CutSet(n_rows=enc.n_rows)
    lay = enc.layout
    x_pairs = [(enc.rows.input_lo.start + k, enc.rows.input_hi.start + k)
               for k in range(lay.n_in)]
    cuts.add(x_pairs, "init-X-diag")
    eta_pairs = []
    for li in range(len(lay.hidden)):
        b_rows = enc.rows.relu_b[li]
        d_rows = enc.rows.relu_d[li]
        eta_pairs += [(b_rows.start + i, d_rows.start + i)
                      for i in range(lay.hidden[li])]
    cuts.add(eta_pairs, "init-eta-diag")
    return cuts


# ---------------------------------------------------------------------------
# Model 3 assembly
# ---------------------------------------------------------------------------

def _row_functional_u(lay: LiftedLayout, coeffs: np.ndarray):
    """(indices, values) of the svec functional for coeffs . u."""
    nz = np.nonzero(coeffs)[0]
    idx = np.empty(nz.size, dtype=np.int64)
    val = np.empty(nz.size)
    for p, k in enumerate(nz):
        pos, wgt = lay.u_entry(int(k))
        idx[p] = pos
        val[p] = wgt * coeffs[k]
    return idx, val


def _accumulate(idx_list, val_list, idx, val):
    idx_list.append(idx)
    val_list.append(val)


def _omega_row(lay: LiftedLayout, a_i, b_i, a_j, b_j):
    """Functional and constant of the lifted product of two rows.

    (a_i.u - b_i)(a_j.u - b_j) >= 0 lifts to
    a_i' Gamma a_j - b_j a_i.u - b_i a_j.u + b_i b_j >= 0.
    """
    nz_i = np.nonzero(a_i)[0]
    nz_j = np.nonzero(a_j)[0]
    acc: dict[int, float] = {}
    for k in nz_i:
        aik = a_i[k]
        for l in nz_j:
            pos, wgt = lay.gamma_entry(int(k), int(l))
            acc[pos] = acc.get(pos, 0.0) + wgt * aik * a_j[l]
    lin = -(b_j * a_i + b_i * a_j)
    for k in np.nonzero(lin)[0]:
        pos, wgt = lay.u_entry(int(k))
        acc[pos] = acc.get(pos, 0.0) + wgt * lin[k]
    idx = np.fromiter(acc.keys(), dtype=np.int64, count=len(acc))
    val = np.fromiter(acc.values(), dtype=float, count=len(acc))
    return idx, val, float(b_i * b_j)


def _equality_rows(enc: Encoding, lay: LiftedLayout):
    """diag(B) = beta, diag(delta) = xhat, and the quadratic ReLU identity
    on diag(eta), per layer."""
    rows = []
    el = enc.layout
    for li, spec in enumerate(enc.layers):
        xh = el.xhat_slice(li)
        bt = el.beta_slice(li)
        in_sl = el.layer_input_slice(li)
        for i in range(el.hidden[li]):
            xh_i = xh.start + i
            bt_i = bt.start + i
            # B_kk = beta_k
            pos_b, wgt_b = lay.gamma_entry(bt_i, bt_i)
            pos_u, wgt_u = lay.u_entry(bt_i)
            rows.append(([pos_b, pos_u], [wgt_b, -wgt_u], 0.0))
            # delta_kk = xhat_k
            pos_d, wgt_d = lay.gamma_entry(xh_i, bt_i)
            pos_x, wgt_x = lay.u_entry(xh_i)
            rows.append(([pos_d, pos_x], [wgt_d, -wgt_x], 0.0))
            # eta_ii = w_i . eps_i + xhat_i b_i
            acc: dict[int, float] = {}
            pos_e, wgt_e = lay.gamma_entry(xh_i, xh_i)
            acc[pos_e] = acc.get(pos_e, 0.0) + wgt_e
            for kk in np.nonzero(spec.w[i])[0]:
                pos_g, wgt_g = lay.gamma_entry(in_sl.start + int(kk), xh_i)
                acc[pos_g] = acc.get(pos_g, 0.0) - wgt_g * spec.w[i][kk]
            acc[pos_x] = acc.get(pos_x, 0.0) - wgt_x * spec.b[i]
            rows.append((list(acc.keys()), list(acc.values()), 0.0))
    return rows


def _relu_interval_rows(enc: Encoding, lay: LiftedLayout):
    """Optional off-by-default cuts (xhat - mu)^2 <= eps^2 on each neuron,
    linearized over eta: 2 mu xhat - eta_ii + eps^2 - mu^2 >= 0."""
    rows = []
    el = enc.layout
    lo = np.zeros(el.h_total)
    hi = np.maximum(enc.m_max, 0.0)
    mu = 0.5 * (lo + hi)
    ep = 0.5 * (hi - lo)
    for k in range(el.h_total):
        xh_k = el.xhat_all.start + k
        pos_e, wgt_e = lay.gamma_entry(xh_k, xh_k)
        pos_u, wgt_u = lay.u_entry(xh_k)
        rows.append(([pos_e, pos_u], [-wgt_e, 2.0 * mu[k] * wgt_u],
                     float(ep[k] ** 2 - mu[k] ** 2)))
    return rows


def build_model3(enc: Encoding, target: VerificationTarget, cuts: CutSet,
                 relu_interval_cuts: bool = False) -> conic.ConeProblem:
    """Lifted SDP: maximize the target error functional subject to the
    linear rows on u, the selected product cuts, the equality tightenings,
    and the PSD constraint with unit corner."""
    el = enc.layout
    lay = LiftedLayout(t=el.t)
    n_z = lay.n_z
    A = enc.A
    b = enc.b
    if cuts.n_rows != enc.n_rows:
        raise ValueError("cut set indexed against a different encoding")

    g_rows_i: list[np.ndarray] = []
    g_rows_v: list[np.ndarray] = []
    g_ptr = [0]
    h_vals: list[float] = []

    def push(idx, val, rhs):
        g_rows_i.append(np.asarray(idx, dtype=np.int64))
        g_rows_v.append(np.asarray(val, dtype=float))
        g_ptr.append(g_ptr[-1] + len(idx))
        h_vals.append(rhs)

    # zero cone: corner = 1, then equality tightenings
    pos_c, wgt_c = lay.corner()
    push([pos_c], [wgt_c], 1.0)
    for idx, val, rhs in _equality_rows(enc, lay):
        push(idx, val, rhs)
    n_zero = len(h_vals)

    # nonneg cone rows are stored as -f(z) + s = rhs_const, s >= 0
    # for constraints f(z) + const >= 0  =>  G = -f, h = const
    Ad = A.tocsr()
    for r in range(A.shape[0]):
        cols = Ad.indices[Ad.indptr[r]: Ad.indptr[r + 1]]
        vals = Ad.data[Ad.indptr[r]: Ad.indptr[r + 1]]
        coeffs = np.zeros(el.t)
        coeffs[cols] = vals
        idx, val = _row_functional_u(lay, coeffs)
        push(idx, -val, -float(b[r]))
    for (i, j) in cuts.pairs:
        a_i = np.asarray(Ad.getrow(i).todense()).ravel()
        a_j = np.asarray(Ad.getrow(j).todense()).ravel()
        idx, val, const = _omega_row(lay, a_i, float(b[i]), a_j, float(b[j]))
        push(idx, -val, const)
    if relu_interval_cuts:
        for idx, val, const in _relu_interval_rows(enc, lay):
            push(idx, -np.asarray(val), const)
    n_nonneg = len(h_vals) - n_zero

    G_top = sp.csr_matrix(
        (np.concatenate(g_rows_v), np.concatenate(g_rows_i), np.array(g_ptr)),
        shape=(len(h_vals), n_z))
    G = sp.vstack([G_top, -sp.eye(n_z, format="csr")]).tocsr()
    h = np.concatenate([np.array(h_vals), np.zeros(n_z)])

    # objective: tr(M X) - (w_out . [x; xhat] + b_out_i), sign-flipped for
    # overestimation; conic form minimizes, so negate again
    obj = np.zeros(n_z)
    m = target.m
    for i in range(m.shape[0]):
        for j in range(i + 1):
            if m[i, j] != 0.0 or m[j, i] != 0.0:
                pos, wgt = lay.gamma_entry(i, j)
                obj[pos] += wgt * (2.0 * m[i, j] if i != j else m[i, i])
    w_row, b_row = enc.select_output(target.output_index)
    for k in np.nonzero(w_row)[0]:
        pos, wgt = lay.u_entry(int(k))
        obj[pos] -= wgt * w_row[k]
    const = -b_row
    if target.direction == "over":
        obj = -obj
        const = -const
    dims = conic.ConeDims(zero=n_zero, nonneg=n_nonneg, psd=(lay.dim,))
    return conic.ConeProblem(c=-obj, G=G, h=h, dims=dims, obj_offset=-const)


def bound_from_solution(sol: conic.ConeSolution) -> float:
    """The relaxation optimum (an upper bound on the true worst-case error)."""
    return -sol.objective


def extract_blocks(sol: conic.ConeSolution, enc: Encoding):
    """(Gamma_hat, Gamma, u) from a Model 3 solution."""
    lay = LiftedLayout(t=enc.layout.t)
    gam_hat = conic.smat(sol.z, lay.dim)
    u = gam_hat[1:, 0].copy()
    return gam_hat, gam_hat[1:, 1:].copy(), u


def lift_point(u: np.ndarray) -> np.ndarray:
    """svec of the exact rank-1 lift [1; u][1; u]'."""
    v = np.concatenate([[1.0], u])
    return conic.svec(np.outer(v, v))


# ---------------------------------------------------------------------------
# violation scan
# ---------------------------------------------------------------------------

def omega_matrix(gamma: np.ndarray, u: np.ndarray, enc: Encoding) -> np.ndarray:
    """Dense product-constraint residual matrix at a solution."""
    A = enc.A.toarray()
    b = enc.b
    Au = A @ u
    return A @ gamma @ A.T - np.outer(Au, b) - np.outer(b, Au) + np.outer(b, b)


def scan_violations(gamma: np.ndarray, u: np.ndarray, enc: Encoding,
                    exclude: CutSet, n_c: int,
                    threshold: float = -1e-8):
    """Indices of the n_c most negative product-constraint entries.

    Only the upper triangle is scanned (the matrix is symmetric and pairs
    are interchangeable); excluded pairs are skipped and ties break in
    lexicographic (i, j) order. Returns (pairs, values).
    """
    om = omega_matrix(gamma, u, enc)
    N = om.shape[0]
    iu, ju = np.triu_indices(N)
    vals = om[iu, ju]
    neg = vals < threshold
    if exclude.pairs:
        have = set(exclude.pairs)
        keep = np.array([(int(i), int(j)) not in have
                         for i, j in zip(iu[neg], ju[neg])])
        idx_neg = np.nonzero(neg)[0][keep] if keep.size else np.array([], int)
    else:
        idx_neg = np.nonzero(neg)[0]
    if idx_neg.size == 0:
        return [], np.array([])
    order = np.lexsort((ju[idx_neg], iu[idx_neg], vals[idx_neg]))
    chosen = idx_neg[order[:n_c]]
    pairs = [(int(iu[k]), int(ju[k])) for k in chosen]
    return pairs, vals[chosen]


def eig_ratio(mat: np.ndarray, cap: float = np.inf) -> float:
    """|lambda_1| / |lambda_2| with eigenvalues sorted by magnitude."""
    w = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    mags = np.sort(np.abs(w))[::-1]
    if mags.size < 2 or mags[1] <= 1e-14 * mags[0]:
        return cap
    return float(min(mags[0] / mags[1], cap))


# ---------------------------------------------------------------------------
# the sequential tightening loop
# ---------------------------------------------------------------------------

@dataclass
class SttConfig:
    n_c: int = 150
    e_bar: float = 0.0
    r_e: float = 1e4
    max_outer_iters: int = 10
    tol: float = 1e-6
    solver_max_iter: int = 200_000
    warm_start: bool = True
    relu_interval_cuts: bool = False
    keep_top_violations: int = 200


@dataclass
class SttIteration:
    index: int
    bound: float
    certified: bool
    status: str
    eigratio: float
    eigratio_b: float
    n_cuts: int
    seconds: float
    solver_iterations: int
    stop: str = ""
    violations_top: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "iter": self.index, "bound": self.bound,
            "certified": self.certified, "status": self.status,
            "eigratio": self.eigratio, "eigratio_b": self.eigratio_b,
            "n_cuts": self.n_cuts, "seconds": round(self.seconds, 3),
            "solver_iterations": self.solver_iterations, "stop": self.stop,
            "violations_top": [float(v) for v in self.violations_top],
        }


@dataclass
class SttRun:
    target: VerificationTarget
    config: SttConfig
    iterations: list[SttIteration]
    cuts: CutSet
    gamma_hat: np.ndarray | None = None

    @property
    def certified_bounds(self) -> list[float]:
        return [it.bound for it in self.iterations if it.certified]

    @property
    def final_bound(self) -> float | None:
        certified = self.certified_bounds
        return certified[-1] if certified else None

    def write_jsonl(self, path: str) -> None:
        with open(path, "w") as f:
            for it in self.iterations:
                f.write(json.dumps(it.to_json(), sort_keys=True) + "\n")

    def guarantee(self) -> dict:
        return {
            "target": self.target.label(),
            "direction": self.target.direction,
            "certified_bound": self.final_bound,
            "iterations": len(self.iterations),
            "certified_iterations": len(self.certified_bounds),
            "stop": self.iterations[-1].stop if self.iterations else "none",
            "n_cuts_final": len(self.cuts),
            "config": {
                "n_c": self.config.n_c, "e_bar": self.config.e_bar,
                "r_e": self.config.r_e,
                "max_outer_iters": self.config.max_outer_iters,
                "tol": self.config.tol,
            },
        }


def _pad_warm(prev: conic.ConeSolution, prev_rows: int,
              problem: conic.ConeProblem) -> conic.ConeSolution:
    """Extend a previous solution to a problem with rows inserted before the
    PSD block: reuse z, zero-initialize the new duals."""
    # new cut rows sit at the end of the nonneg section
    cut_end = problem.dims.zero + problem.dims.nonneg
    n_new = problem.G.shape[0] - prev_rows
    old_cut_end = cut_end - n_new
    y = np.zeros(problem.G.shape[0])
    s = np.zeros(problem.G.shape[0])
    y[:old_cut_end] = prev.y[:old_cut_end]
    s[:old_cut_end] = prev.s[:old_cut_end]
    y[cut_end:] = prev.y[old_cut_end:]
    s[cut_end:] = prev.s[old_cut_end:]
    Gz = problem.G[old_cut_end:cut_end] @ prev.z
    s[old_cut_end:cut_end] = np.maximum(problem.h[old_cut_end:cut_end] - Gz, 0.0)
    return conic.ConeSolution(z=prev.z.copy(), s=s, y=y, status="warm",
                              prim_res=np.inf, dual_res=np.inf, gap=np.inf,
                              iterations=0, objective=prev.objective)


def run_stt(enc: Encoding, target: VerificationTarget,
            config: SttConfig | None = None) -> SttRun:
    """Sequential tightening: solve, record, stop on threshold or rank
    condition, otherwise enforce the worst violations and re-solve.

    A bound is certified only when the solver reports optimal at tolerance;
    uncertified iterations are recorded but never tighten the guarantee.
    """
    config = config or SttConfig()
    cuts = initial_cuts(enc)
    run = SttRun(target=target, config=config, iterations=[], cuts=cuts)
    prev_sol = None
    prev_rows = 0
    for j in range(1, config.max_outer_iters + 1):
        problem = build_model3(enc, target, cuts,
                               relu_interval_cuts=config.relu_interval_cuts)
        warm = None
        if config.warm_start and prev_sol is not None:
            warm = _pad_warm(prev_sol, prev_rows, problem)
        t0 = time.monotonic()
        sol = conic.solve(problem, tol=config.tol,
                          max_iter=config.solver_max_iter, warm_start=warm)
        dt = time.monotonic() - t0
        gam_hat, gamma, u = extract_blocks(sol, enc)
        bt = enc.layout.beta_all
        b_block = gamma[bt, :][:, bt]
        rec = SttIteration(
            index=j, bound=bound_from_solution(sol),
            certified=sol.optimal, status=sol.status,
            eigratio=eig_ratio(gam_hat, cap=1e18),
            eigratio_b=eig_ratio(np.block(
                [[np.ones((1, 1)), u[bt][None, :]],
                 [u[bt][:, None], b_block]]), cap=1e18),
            n_cuts=len(cuts), seconds=dt, solver_iterations=sol.iterations)
        run.iterations.append(rec)
        if sol.optimal:
            prev_sol = sol
            prev_rows = problem.G.shape[0]
            run.gamma_hat = gam_hat
        if sol.optimal and rec.bound <= config.e_bar:
            rec.stop = "performance"
            break
        if sol.optimal and rec.eigratio > config.r_e:
            rec.stop = "rank"
            break
        if j == config.max_outer_iters:
            rec.stop = "budget"
            break
        pairs, vals = scan_violations(gamma, u, enc, cuts, config.n_c)
        rec.violations_top = sorted(vals)[: config.keep_top_violations]
        if not pairs:
            rec.stop = "no_violations"
            break
        cuts.add(pairs, f"iter-{j}")
    return run
