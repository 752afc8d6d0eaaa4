"""First-order solver for cone programs over zero/nonnegative/PSD product cones.

Problems are stated in the standard conic form

    minimize    c' z
    subject to  G z + s = h,   s in K,

where K is a Cartesian product of a zero cone, a nonnegative orthant and a
list of PSD cones. PSD slacks are stored in scaled lower-triangle ("svec")
form, with off-diagonal entries multiplied by sqrt(2), so that Euclidean
inner products of svec vectors equal trace inner products of the matrices.

The solver is ADMM with over-relaxation: each iteration alternates a linear
solve against a cached factorization of (sigma*I + G'*R*G) with a projection
of the slack onto K (eigenvalue clipping for PSD blocks). Ruiz equilibration
is applied up front and undone on report. Termination requires primal
residual, dual residual and duality gap all below the requested tolerance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

_SQRT2 = np.sqrt(2.0)

# rows in the zero cone get a stiffer penalty, as is standard for equalities
_RHO_EQ_SCALE = 1e3


def svec_size(d: int) -> int:
    return d * (d + 1) // 2


def svec(M: np.ndarray) -> np.ndarray:
    """Scaled lower-triangle vectorization of a symmetric matrix."""
    d = M.shape[0]
    rows, cols = np.tril_indices(d)
    v = M[rows, cols].astype(float).copy()
    v[rows != cols] *= _SQRT2
    return v


def smat(v: np.ndarray, d: int) -> np.ndarray:
    """Inverse of :func:`svec`."""
    rows, cols = np.tril_indices(d)
    M = np.zeros((d, d))
    vals = np.asarray(v, dtype=float).copy()
    off = rows != cols
    vals[off] /= _SQRT2
    M[rows, cols] = vals
    M[cols, rows] = vals
    return M


def project_psd(M: np.ndarray) -> np.ndarray:
    """Frobenius-nearest PSD matrix: eigendecompose and clamp negative eigenvalues.

    Inputs that are asymmetric beyond 1e-12 (relative) are symmetrized with a
    warning rather than rejected.
    """
    M = np.asarray(M, dtype=float)
    skew = np.max(np.abs(M - M.T)) if M.size else 0.0
    scale = max(1.0, np.max(np.abs(M))) if M.size else 1.0
    if skew > 1e-12 * scale:
        warnings.warn(f"project_psd: symmetrizing input with asymmetry {skew:.3e}")
    S = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(S)
    if w.size and w[0] >= 0.0:
        return S
    w = np.clip(w, 0.0, None)
    return (V * w) @ V.T


@dataclass(frozen=True)
class ConeDims:
    """Sizes of the product cone, in storage order zero / nonneg / psd."""

    zero: int = 0
    nonneg: int = 0
    psd: tuple[int, ...] = ()

    @property
    def total(self) -> int:
        return self.zero + self.nonneg + sum(svec_size(d) for d in self.psd)


@dataclass
class ConeProblem:
    """min c'z  s.t.  Gz + s = h,  s in zero x nonneg x PSD blocks."""

    c: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    dims: ConeDims
    obj_offset: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.h = np.asarray(self.h, dtype=float).ravel()
        if not sp.issparse(self.G):
            self.G = sp.csr_matrix(np.atleast_2d(np.asarray(self.G, dtype=float)))
        else:
            self.G = self.G.tocsr().astype(float)
        m, n = self.G.shape
        if self.c.size != n:
            raise ValueError(f"c has size {self.c.size}, expected {n}")
        if self.h.size != m:
            raise ValueError(f"h has size {self.h.size}, expected {m}")
        if self.dims.total != m:
            raise ValueError(f"cone dims sum to {self.dims.total}, expected {m} rows")

    def dump(self, path: str) -> None:
        """Debug dump in a plain text triplet format."""
        Gc = self.G.tocoo()
        with open(path, "w") as f:
            f.write(f"# cone problem: m={self.G.shape[0]} n={self.G.shape[1]}\n")
            f.write(f"dims zero={self.dims.zero} nonneg={self.dims.nonneg} "
                    f"psd={list(self.dims.psd)}\n")
            f.write("c " + " ".join(repr(v) for v in self.c) + "\n")
            f.write("h " + " ".join(repr(v) for v in self.h) + "\n")
            for i, j, v in zip(Gc.row, Gc.col, Gc.data):
                f.write(f"G {i} {j} {v!r}\n")


@dataclass
class ConeSolution:
    z: np.ndarray
    s: np.ndarray
    y: np.ndarray
    status: str  # optimal | primal_infeasible | dual_infeasible | max_iter
    prim_res: float
    dual_res: float
    gap: float
    iterations: int
    objective: float  # c'z + obj_offset (meaningless for infeasible statuses)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _psd_row_blocks(dims: ConeDims) -> list[tuple[int, int, int]]:
    """(start, stop, matdim) for each PSD block in the stacked slack vector."""
    out = []
    ofs = dims.zero + dims.nonneg
    for d in dims.psd:
        out.append((ofs, ofs + svec_size(d), d))
        ofs += svec_size(d)
    return out


def _project_cone(v: np.ndarray, dims: ConeDims, psd_blocks) -> np.ndarray:
    s = v.copy()
    s[: dims.zero] = 0.0
    nn = slice(dims.zero, dims.zero + dims.nonneg)
    np.maximum(s[nn], 0.0, out=s[nn])
    for a, b, d in psd_blocks:
        M = smat(s[a:b], d)
        w, V = np.linalg.eigh(M)
        if w.size == 0 or w[0] >= 0.0:
            continue
        np.clip(w, 0.0, None, out=w)
        s[a:b] = svec((V * w) @ V.T)
    return s


def _in_dual_cone(v: np.ndarray, dims: ConeDims, psd_blocks, eps: float) -> bool:
    """Membership of v in K* = free x nonneg x PSD, up to eps."""
    nn = v[dims.zero: dims.zero + dims.nonneg]
    if nn.size and nn.min() < -eps:
        return False
    for a, b, d in psd_blocks:
        blk = smat(v[a:b], d)
        scale = max(1.0, np.max(np.abs(blk)))
        if np.linalg.eigvalsh(blk)[0] < -eps * scale:
            return False
    return True


def _in_neg_cone(v: np.ndarray, dims: ConeDims, psd_blocks, eps: float) -> bool:
    """Membership of v in -K, up to eps (zero rows must vanish)."""
    z = v[: dims.zero]
    if z.size and np.max(np.abs(z)) > eps:
        return False
    nn = v[dims.zero: dims.zero + dims.nonneg]
    if nn.size and nn.max() > eps:
        return False
    for a, b, d in psd_blocks:
        blk = smat(v[a:b], d)
        scale = max(1.0, np.max(np.abs(blk)))
        if np.linalg.eigvalsh(blk)[-1] > eps * scale:
            return False
    return True


def _ruiz_equilibrate(G: sp.csr_matrix, h: np.ndarray, dims: ConeDims,
                      n_passes: int = 15):
    """Iterative row/column scaling toward unit infinity norms.

    The right-hand side participates in the row norms (product cuts carry
    quadratically grown constants, and leaving them unscaled makes the
    residual checks meaningless on those rows). Rows belonging to one PSD
    block share a single scale factor, since independent row scaling would
    not preserve cone membership of the slack.
    """
    m, n = G.shape
    D = np.ones(m)
    E = np.ones(n)
    Gs = G.copy().tocsr()
    hs = h.copy()
    psd_blocks = _psd_row_blocks(dims)
    for _ in range(n_passes):
        Ga = abs(Gs)
        row_norm = np.maximum(np.asarray(Ga.max(axis=1).todense()).ravel(),
                              np.abs(hs))
        for a, b, _ in psd_blocks:
            blk_max = row_norm[a:b].max() if b > a else 0.0
            row_norm[a:b] = blk_max
        col_norm = np.asarray(Ga.max(axis=0).todense()).ravel()
        row_norm[row_norm == 0.0] = 1.0
        col_norm[col_norm == 0.0] = 1.0
        dr = 1.0 / np.sqrt(row_norm)
        dc = 1.0 / np.sqrt(col_norm)
        Gs = sp.diags(dr) @ Gs @ sp.diags(dc)
        hs = dr * hs
        D *= dr
        E *= dc
        if max(abs(1.0 - dr).max(initial=0.0), abs(1.0 - dc).max(initial=0.0)) < 1e-3:
            break
    return Gs.tocsr(), D, E


class _KKTFactor:
    """Cached factorization of sigma*I + G' R G (dense Cholesky or sparse LU)."""

    def __init__(self, G: sp.csr_matrix, rho_vec: np.ndarray, sigma: float):
        n = G.shape[1]
        M = (G.T @ sp.diags(rho_vec) @ G).tocsc()
        M = M + sigma * sp.eye(n, format="csc")
        if n <= 4000:
            self._chol = sla.cho_factor(M.toarray(), lower=True, check_finite=False)
            self._lu = None
        else:
            self._lu = spla.splu(M)
            self._chol = None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._chol is not None:
            return sla.cho_solve(self._chol, rhs, check_finite=False)
        return self._lu.solve(rhs)


def _kkt_refine(Ga: np.ndarray, c: np.ndarray, h_act: np.ndarray,
                delta: float = 1e-8, refine_steps: int = 3):
    """Solve the equality-constrained KKT system with regularization.

    Solves [[dI, Ga'], [Ga, -dI]] [z; nu] = [-c; h_act] and applies iterative
    refinement against the unregularized system, following the usual
    active-set polishing recipe.
    """
    n = Ga.shape[1]
    a = Ga.shape[0]
    K_reg = np.block([[delta * np.eye(n), Ga.T],
                      [Ga, -delta * np.eye(a)]])
    rhs = np.concatenate([-c, h_act])
    try:
        lu, piv = sla.lu_factor(K_reg, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return None
    sol = sla.lu_solve((lu, piv), rhs, check_finite=False)
    K = np.block([[np.zeros((n, n)), Ga.T], [Ga, np.zeros((a, a))]])
    for _ in range(refine_steps):
        sol = sol + sla.lu_solve((lu, piv), rhs - K @ sol, check_finite=False)
    return sol[:n], sol[n:]


def _kkt_check(problem: ConeProblem, z_p: np.ndarray, y_p: np.ndarray):
    """Full unscaled KKT residuals of a primal/dual candidate pair."""
    dims = problem.dims
    G, h, c = problem.G, problem.h, problem.c
    m = G.shape[0]
    nn = slice(dims.zero, m)
    Gz = G @ z_p
    s_p = h - Gz
    viol_zero = np.max(np.abs(s_p[: dims.zero]), initial=0.0)
    viol_nn = max(0.0, -np.min(s_p[nn], initial=0.0))
    norm_scale = max(np.max(np.abs(Gz), initial=0.0),
                     np.max(np.abs(h), initial=0.0), 1.0)
    rp = max(viol_zero, viol_nn) / norm_scale
    GTy = G.T @ y_p
    rd = (np.max(np.abs(c + GTy), initial=0.0)
          / max(np.max(np.abs(GTy), initial=0.0),
                np.max(np.abs(c), initial=0.0), 1.0))
    pobj = float(c @ z_p)
    dobj = float(-h @ y_p)
    gap = abs(pobj - dobj) / max(1.0, abs(pobj), abs(dobj))
    return s_p, rp, rd, gap


def _polish(problem: ConeProblem, s: np.ndarray, y: np.ndarray, tol: float,
            max_passes: int = 40):
    """Active-set refinement for problems without PSD blocks.

    Seeds a working set from the ADMM slacks/duals, then alternates adding
    primal-violated rows and dropping negative-multiplier rows, re-solving
    the equality KKT system each pass. Accepts only candidates whose full
    KKT residuals reach near machine precision, so a polished solution is
    exact regardless of how coarse the ADMM iterate was.
    """
    dims = problem.dims
    if dims.psd:
        return None
    G, h, c = problem.G, problem.h, problem.c
    m, n = G.shape
    nn = slice(dims.zero, m)
    accept = min(tol, 1e-9)

    act = np.zeros(m, dtype=bool)
    act[: dims.zero] = True
    y_scale = max(np.max(np.abs(y)) if m else 0.0, 1.0)
    act[nn] = (s[nn] <= 1e-4 * (1.0 + np.abs(h[nn]))) | (y[nn] >= 1e-4 * y_scale)
    cap = min(m, 2 * n + dims.zero)
    if act.sum() > cap:
        # keep the strongest duals only
        order = np.argsort(-y)
        keep = np.zeros(m, dtype=bool)
        keep[: dims.zero] = True
        keep[order[: cap - dims.zero]] = True
        act &= keep
        act[: dims.zero] = True

    for _ in range(max_passes):
        out = _kkt_refine(G[act].toarray(), c, h[act])
        if out is None:
            return None
        z_p, nu = out
        act_idx = np.where(act)[0]
        nu_scale = max(1.0, np.max(np.abs(nu), initial=0.0))
        neg = (nu < -1e-9 * nu_scale) & (act_idx >= dims.zero)

        y_p = np.zeros(m)
        y_p[act] = nu
        np.maximum(y_p[nn], 0.0, out=y_p[nn])
        s_p, rp, rd, gap = _kkt_check(problem, z_p, y_p)
        if rp <= accept and rd <= accept and gap <= accept and not neg.any():
            s_p[: dims.zero] = 0.0
            np.maximum(s_p[nn], 0.0, out=s_p[nn])
            return z_p, s_p, y_p, (rp, rd, gap)

        viol = s_p < -1e-11 * (1.0 + np.abs(h))
        viol[: dims.zero] = False
        viol &= ~act
        if not neg.any() and not viol.any():
            return None   # clean KKT failure: wrong face, give up
        act[act_idx[neg]] = False
        if viol.any():
            vidx = np.where(viol)[0]
            worst = vidx[np.argsort(s_p[vidx])]
            room = max(cap - int(act.sum()), 1)
            act[worst[:room]] = True
    return None


class _AndersonBuffer:
    """Type-II Anderson acceleration history over the fixed-point variable."""

    def __init__(self, memory: int = 10):
        self.memory = memory
        self.v_hist: list[np.ndarray] = []
        self.f_hist: list[np.ndarray] = []

    def reset(self) -> None:
        self.v_hist.clear()
        self.f_hist.clear()

    def push(self, v: np.ndarray, f: np.ndarray) -> None:
        self.v_hist.append(v.copy())
        self.f_hist.append(f.copy())
        if len(self.v_hist) > self.memory:
            self.v_hist.pop(0)
            self.f_hist.pop(0)

    def candidate(self) -> np.ndarray | None:
        k = len(self.f_hist)
        if k < 2:
            return None
        dF = np.column_stack([self.f_hist[i + 1] - self.f_hist[i]
                              for i in range(k - 1)])
        dV = np.column_stack([self.v_hist[i + 1] - self.v_hist[i]
                              for i in range(k - 1)])
        f_cur = self.f_hist[-1]
        try:
            gam, *_ = np.linalg.lstsq(dF, f_cur, rcond=None)
        except np.linalg.LinAlgError:
            return None
        return self.v_hist[-1] + f_cur - (dV + dF) @ gam


def solve(
    problem: ConeProblem,
    tol: float = 1e-6,
    max_iter: int = 200_000,
    warm_start: ConeSolution | None = None,
    sigma: float = 1e-6,
    alpha: float = 1.6,
    check_every: int = 25,
    eps_infeas: float = 1e-9,
    adapt_every: int = 100,
    adapt_threshold: float = 5.0,
    aa_memory: int = 10,
    aa_every: int = 10,
) -> ConeSolution:
    """Run ADMM on a cone problem until residuals and gap fall below tol.

    The iteration is evaluated as a fixed-point map on the Douglas-Rachford
    variable v (with s = proj_K(v) and y = R(s - v)), which makes safeguarded
    Anderson acceleration straightforward: every aa_every steps a candidate
    extrapolation is tested and kept only if it shrinks the fixed-point
    residual. Statuses other than "optimal" never carry a certified
    objective: callers must treat max_iter results as unverified and
    infeasibility results as carrying a certificate in y (primal) or z (dual).
    """
    dims = problem.dims
    m, n = problem.G.shape
    psd_blocks = _psd_row_blocks(dims)

    Gs, D, E = _ruiz_equilibrate(problem.G, problem.h, dims)
    cs = E * problem.c
    hs = D * problem.h
    c_scale = 1.0 / np.clip(np.max(np.abs(cs)) if cs.size else 1.0, 1e-6, 1e6)
    cs = cs * c_scale
    h_scale = 1.0 / np.clip(np.max(np.abs(hs)) if hs.size else 1.0, 1e-6, 1e6)
    hs = hs * h_scale

    GsT = Gs.T.tocsr()
    rho = 1.0
    rho_mult = np.ones(m)
    rho_mult[: dims.zero] = _RHO_EQ_SCALE
    rho_vec = rho * rho_mult
    fact = _KKTFactor(Gs, rho_vec, sigma)

    if warm_start is not None and warm_start.z.size == n and warm_start.y.size == m:
        z = (warm_start.z / E) * h_scale
        s0 = (D * warm_start.s) * h_scale
        y0 = (warm_start.y / D) * c_scale
        v = s0 - y0 / rho_vec
    else:
        z = np.zeros(n)
        v = _project_cone(hs.copy(), dims, psd_blocks)

    h_unsc = problem.h
    c_unsc = problem.c

    def apply_map(v_in, z_in):
        """One ADMM pass as v-map: returns (v_out, z_out, s_at_v_in)."""
        s_in = _project_cone(v_in, dims, psd_blocks)
        xi = 2.0 * s_in - v_in
        rhs = sigma * z_in - cs + GsT @ (rho_vec * (hs - xi))
        z_out = fact.solve(rhs)
        v_out = v_in + alpha * (hs - Gs @ z_out - s_in)
        return v_out, z_out, s_in

    aa = _AndersonBuffer(memory=aa_memory)
    status = "max_iter"
    prim_res = dual_res = gap = np.inf
    it = 0
    y_prev_chk = None
    z_prev_chk = z.copy()
    s_ema = None
    y_ema = None
    polish_every = max(10 * check_every, 250)

    for it in range(1, max_iter + 1):
        v_new, z_new, s_cur = apply_map(v, z)
        aa.push(v, v_new - v)

        if it % aa_every == 0:
            v_cand = aa.candidate()
            if v_cand is not None:
                v_cand_next, z_cand, _ = apply_map(v_cand, z_new)
                if (np.linalg.norm(v_cand_next - v_cand)
                        < np.linalg.norm(v_new - v)):
                    v_new, z_new = v_cand_next, z_cand
                    aa.reset()
        v, z = v_new, z_new

        if it % check_every != 0 and it != max_iter:
            continue

        s = _project_cone(v, dims, psd_blocks)
        y = rho_vec * (s - v)

        # residuals in the original (unscaled) problem, per-component relative
        z_u = (E * z) / h_scale
        s_u = s / D / h_scale
        y_u = (D * y) / c_scale
        Gz_u = problem.G @ z_u
        GTy_u = problem.G.T @ y_u
        rp_rel = np.max(np.abs(Gz_u + s_u - h_unsc)
                        / (1.0 + np.abs(h_unsc))) if m else 0.0
        rd_rel = np.max(np.abs(c_unsc + GTy_u)
                        / (1.0 + np.abs(c_unsc))) if n else 0.0
        pobj = float(c_unsc @ z_u)
        dobj = float(-h_unsc @ y_u)
        gap_rel = abs(pobj - dobj) / max(1.0, abs(pobj), abs(dobj))
        prim_res, dual_res, gap = float(rp_rel), float(rd_rel), gap_rel

        if rp_rel <= tol and rd_rel <= tol and gap_rel <= tol:
            status = "optimal"
            break

        if not dims.psd:
            if s_ema is None:
                s_ema, y_ema = s_u.copy(), y_u.copy()
            else:
                s_ema += 0.25 * (s_u - s_ema)
                y_ema += 0.25 * (y_u - y_ema)
            if it % polish_every == 0 or it == 2 * check_every:
                for s_try, y_try in ((s_u, y_u), (s_ema, y_ema)):
                    polished = _polish(problem, s_try, y_try, tol)
                    if polished is not None:
                        z_p, s_p, y_p, (rp_p, rd_p, gap_p) = polished
                        return ConeSolution(
                            z=z_p, s=s_p, y=y_p, status="optimal",
                            prim_res=rp_p, dual_res=rd_p, gap=gap_p,
                            iterations=it,
                            objective=float(problem.c @ z_p) + problem.obj_offset)

        if y_prev_chk is not None:
            dy = y - y_prev_chk
            dz = z - z_prev_chk
            ndy = np.max(np.abs(dy)) if m else 0.0
            if ndy > 1e-12:
                dy_u = (D * dy) / c_scale
                dy_n = dy_u / np.max(np.abs(dy_u))
                if (np.max(np.abs(problem.G.T @ dy_n), initial=0.0) <= eps_infeas
                        and h_unsc @ dy_n < -eps_infeas
                        and _in_dual_cone(dy_n, dims, psd_blocks, 1e-7)):
                    status = "primal_infeasible"
                    y = dy / np.max(np.abs(dy))
                    break
            ndz = np.max(np.abs(dz)) if n else 0.0
            if ndz > 1e-12:
                dz_u = E * dz
                dz_n = dz_u / np.max(np.abs(dz_u))
                Gdz = problem.G @ dz_n
                if (c_unsc @ dz_n < -eps_infeas
                        and _in_neg_cone(Gdz, dims, psd_blocks, eps_infeas)):
                    status = "dual_infeasible"
                    z = dz / np.max(np.abs(dz))
                    break
        y_prev_chk = y.copy()
        z_prev_chk = z.copy()

        # penalty rescale on residual imbalance; remap v since y = R(s - v)
        if it % adapt_every == 0 and rd_rel > 1e-14:
            ratio = np.sqrt(max(rp_rel, 1e-14) / max(rd_rel, 1e-14))
            rho_new = float(np.clip(rho * ratio, 1e-6, 1e6))
            if rho_new > adapt_threshold * rho or rho_new < rho / adapt_threshold:
                rho = rho_new
                new_rho_vec = rho * rho_mult
                v = s - (rho_vec * (s - v)) / new_rho_vec
                rho_vec = new_rho_vec
                fact = _KKTFactor(Gs, rho_vec, sigma)
                aa.reset()

    s = _project_cone(v, dims, psd_blocks)
    if status not in ("primal_infeasible", "dual_infeasible"):
        y = rho_vec * (s - v)
    z_u = (E * z) / h_scale
    s_u = s / D / h_scale
    y_u = (D * y) / c_scale
    return ConeSolution(
        z=z_u, s=s_u, y=y_u, status=status,
        prim_res=float(prim_res), dual_res=float(dual_res), gap=float(gap),
        iterations=it,
        objective=float(problem.c @ z_u) + problem.obj_offset,
    )
