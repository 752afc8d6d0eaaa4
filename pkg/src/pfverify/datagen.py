"""Training data collection: Newton power flow plus farthest-point sampling.

Each accepted sample is the most "distant" of a pool of freshly solved,
bound-feasible power flow solutions, where distance to the existing library
is the log-sum-of-absolute-differences score over sampled coordinate and
datapoint subsets. The library is seeded with the nominal-loading solution.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .grid import Admittances, Network, VerificationBounds, eval_ground_truth

_EPS_LOG = 1e-12


class CollectionError(RuntimeError):
    pass


@dataclass
class PFSample:
    x: np.ndarray          # rectangular voltage state, length 2*n_b - 1
    y: np.ndarray          # monitored outputs
    p_profile: np.ndarray  # gen p then load p
    q_profile: np.ndarray  # gen q then load q
    v_profile: np.ndarray  # bus voltage magnitudes


@dataclass
class Dataset:
    x: np.ndarray          # N x n_in
    y: np.ndarray          # N x n_out
    split: dict[str, list[int]]
    meta: dict

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.split[name]
        return self.x[idx], self.y[idx]


@dataclass
class DistanceConfig:
    n_v: int = 20
    n_d: int = 25
    candidate_pool_size: int = 32

    def __post_init__(self):
        if self.n_v < 1 or self.n_d < 1:
            raise ValueError("n_v and n_d must be >= 1")


# ---------------------------------------------------------------------------
# Newton power flow
# ---------------------------------------------------------------------------

def _bus_types(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """(pv, pq) index arrays; a non-slack bus is PV iff it hosts a generator."""
    has_gen = np.zeros(net.n_b, dtype=bool)
    for g in net.gens:
        has_gen[g.bus] = True
    pv = np.array([b for b in range(net.n_b)
                   if has_gen[b] and b != net.slack_bus], dtype=int)
    pq = np.array([b for b in range(net.n_b)
                   if not has_gen[b] and b != net.slack_bus], dtype=int)
    return pv, pq


def _newton_iterate(Y, p_spec, q_spec, vm, va, pv, pq, tol, max_iter):
    """Core polar Newton loop; mutates vm/va, returns True on convergence."""
    pvpq = np.concatenate([pv, pq])
    for _ in range(max_iter):
        v = vm * np.exp(1j * va)
        s = v * np.conj(Y @ v)
        f = np.concatenate([p_spec[pvpq] - s.real[pvpq], q_spec[pq] - s.imag[pq]])
        if np.max(np.abs(f), initial=0.0) <= tol:
            return True
        ibus = Y @ v
        vnorm = v / np.abs(v)
        dS_dVa = 1j * v[:, None] * np.conj(np.diag(ibus) - Y * v[None, :])
        dS_dVm = v[:, None] * np.conj(Y * vnorm[None, :]) \
            + np.diag(np.conj(ibus) * vnorm)
        J = np.block([
            [dS_dVa[np.ix_(pvpq, pvpq)].real, dS_dVm[np.ix_(pvpq, pq)].real],
            [dS_dVa[np.ix_(pq, pvpq)].imag, dS_dVm[np.ix_(pq, pq)].imag],
        ])
        try:
            step = np.linalg.solve(J, f)
        except np.linalg.LinAlgError:
            return False
        if not np.all(np.isfinite(step)) or np.max(np.abs(step)) > 1e3:
            return False
        va[pvpq] += step[: pvpq.size]
        vm[pq] += step[pvpq.size:]
        if np.any(vm <= 0.0):
            return False
    return False


def solve_newton_pf(
    net: Network,
    adm: Admittances,
    load_setpoint: tuple[np.ndarray, np.ndarray],
    gen_setpoint: tuple[np.ndarray, np.ndarray],
    bounds: VerificationBounds | None = None,
    tol: float = 1e-8,
    max_iter: int = 30,
    feas_tol: float = 1e-6,
    enforce_q_limits: bool = True,
) -> PFSample | None:
    """Polar Newton-Raphson solve; returns None for divergent or out-of-bounds cases.

    load_setpoint = (p_d, q_d) aligned with net.loads; gen_setpoint =
    (p_g, v_set) aligned with net.gens (the slack generator's p_g entry is
    ignored). Generator buses whose reactive output leaves its range are
    switched to PQ at the violated limit and the solve is repeated (standard
    Q-limit enforcement). When bounds are given, the solution must satisfy
    the input and output boxes within feas_tol or it is rejected.
    """
    n_b = net.n_b
    p_d, q_d = (np.asarray(a, dtype=float) for a in load_setpoint)
    p_g, v_set = (np.asarray(a, dtype=float) for a in gen_setpoint)

    p_spec = np.zeros(n_b)
    q_spec = np.zeros(n_b)
    qd_bus = np.zeros(n_b)
    pd_bus = np.zeros(n_b)
    for ld, p, q in zip(net.loads, p_d, q_d):
        p_spec[ld.bus] -= p
        q_spec[ld.bus] -= q
        pd_bus[ld.bus] += p
        qd_bus[ld.bus] += q
    vm = np.ones(n_b)
    qg_min_bus = np.zeros(n_b)
    qg_max_bus = np.zeros(n_b)
    n_gen_bus = np.zeros(n_b)
    for g, pg, vs in zip(net.gens, p_g, v_set):
        if g.bus != net.slack_bus:
            p_spec[g.bus] += pg
        vm[g.bus] = vs
        qg_min_bus[g.bus] += g.q_min
        qg_max_bus[g.bus] += g.q_max
        n_gen_bus[g.bus] += 1

    pv, pq = _bus_types(net)
    va = np.zeros(n_b)
    Y = adm.y_bus

    max_switch_passes = len(pv) + 1 if enforce_q_limits else 0
    for _ in range(max_switch_passes + 1):
        if not _newton_iterate(Y, p_spec, q_spec, vm, va, pv, pq, tol, max_iter):
            return None
        if not enforce_q_limits or pv.size == 0:
            break
        v = vm * np.exp(1j * va)
        q_inj = (v * np.conj(Y @ v)).imag
        qg = q_inj + qd_bus
        hi = pv[qg[pv] > qg_max_bus[pv] + 1e-9]
        lo = pv[qg[pv] < qg_min_bus[pv] - 1e-9]
        if hi.size == 0 and lo.size == 0:
            break
        for b in hi:
            q_spec[b] = qg_max_bus[b] - qd_bus[b]
        for b in lo:
            q_spec[b] = qg_min_bus[b] - qd_bus[b]
        switched = np.concatenate([hi, lo])
        pv = np.setdiff1d(pv, switched)
        pq = np.sort(np.concatenate([pq, switched]))

    v = vm * np.exp(1j * va)
    # rotate so the slack angle is exactly zero (input convention)
    v = v * np.exp(-1j * va[net.slack_bus])
    x = net.complex_to_x(v)
    y = eval_ground_truth(net, adm, x)

    if bounds is not None:
        lo_y, hi_y = bounds.y_box()
        if np.any(y < lo_y - feas_tol) or np.any(y > hi_y + feas_tol):
            return None
        xlo, xhi = bounds.x_box()
        if np.any(x < xlo - feas_tol) or np.any(x > xhi + feas_tol):
            return None

    s = v * np.conj(Y @ v)
    gen_p = np.empty(len(net.gens))
    gen_q = np.empty(len(net.gens))
    for k, g in enumerate(net.gens):
        share = n_gen_bus[g.bus]
        gen_p[k] = (s.real[g.bus] + pd_bus[g.bus]) / share
        gen_q[k] = (s.imag[g.bus] + qd_bus[g.bus]) / share
    return PFSample(
        x=x, y=y,
        p_profile=np.concatenate([gen_p, p_d]),
        q_profile=np.concatenate([gen_q, q_d]),
        v_profile=np.abs(v),
    )


# ---------------------------------------------------------------------------
# farthest-point scoring
# ---------------------------------------------------------------------------

def distance_score(
    candidate: PFSample,
    pool: list[PFSample],
    cfg: DistanceConfig,
    subset: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> float:
    """Log-distance of a candidate to the sampled library subset; larger = farther.

    subset = (p_idx, q_idx, v_idx, d_idx); when omitted, every coordinate and
    every library point is used. Coincident points are floored at log(1e-12)
    per term instead of -inf.
    """
    if not pool:
        raise ValueError("pool must be nonempty")
    if subset is None:
        p_idx = np.arange(candidate.p_profile.size)
        q_idx = np.arange(candidate.q_profile.size)
        v_idx = np.arange(candidate.v_profile.size)
        d_idx = np.arange(len(pool))
    else:
        p_idx, q_idx, v_idx, d_idx = subset
    score = 0.0
    for j in d_idx:
        ref = pool[j]
        dp = np.sum(np.abs(candidate.p_profile[p_idx] - ref.p_profile[p_idx]))
        dq = np.sum(np.abs(candidate.q_profile[q_idx] - ref.q_profile[q_idx]))
        dv = np.sum(np.abs(candidate.v_profile[v_idx] - ref.v_profile[v_idx]))
        score += np.log(max(dp, _EPS_LOG)) + np.log(max(dq, _EPS_LOG)) \
            + np.log(max(dv, _EPS_LOG))
    return float(score)


def _sample_subset(rng, candidate_dims, n_pool, cfg):
    np_, nq, nv = candidate_dims
    p_idx = rng.choice(np_, size=min(cfg.n_v, np_), replace=False)
    q_idx = rng.choice(nq, size=min(cfg.n_v, nq), replace=False)
    v_idx = rng.choice(nv, size=min(cfg.n_v, nv), replace=False)
    d_idx = rng.choice(n_pool, size=min(cfg.n_d, n_pool), replace=False)
    return p_idx, q_idx, v_idx, d_idx


# ---------------------------------------------------------------------------
# collection loop
# ---------------------------------------------------------------------------

def nominal_setpoints(net: Network):
    p_d = np.array([ld.p_nom for ld in net.loads])
    q_d = np.array([ld.q_nom for ld in net.loads])
    p_g = np.array([np.clip(g.pg_nom, g.p_min, g.p_max) for g in net.gens])
    v_set = np.array([np.clip(g.vg, net.buses[g.bus].v_min, net.buses[g.bus].v_max)
                      for g in net.gens])
    return (p_d, q_d), (p_g, v_set)


def _random_setpoints(net: Network, f: float, rng):
    p_d = np.empty(len(net.loads))
    q_d = np.empty(len(net.loads))
    for i, ld in enumerate(net.loads):
        lo, hi = sorted((ld.p_nom * (1 - f), ld.p_nom * (1 + f)))
        p_d[i] = rng.uniform(lo, hi)
        lo, hi = sorted((ld.q_nom * (1 - f), ld.q_nom * (1 + f)))
        q_d[i] = rng.uniform(lo, hi)
    p_g = np.empty(len(net.gens))
    v_set = np.empty(len(net.gens))
    for i, g in enumerate(net.gens):
        p_g[i] = rng.uniform(g.p_min, g.p_max)
        bus = net.buses[g.bus]
        v_set[i] = rng.uniform(bus.v_min, bus.v_max)
    return (p_d, q_d), (p_g, v_set)


def collect(
    net: Network,
    adm: Admittances,
    bounds: VerificationBounds,
    n_samples: int,
    cfg: DistanceConfig | None = None,
    seed: int = 0,
) -> Dataset:
    """Collect n_samples feasible solutions, growing outward from the nominal one."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    cfg = cfg or DistanceConfig()
    rng = np.random.default_rng(seed)

    first = solve_newton_pf(net, adm, *nominal_setpoints(net), bounds=bounds)
    if first is None:
        raise CollectionError("nominal power flow is infeasible for the given bounds")
    pool: list[PFSample] = [first]

    f = bounds.load_range_fraction
    dims = (first.p_profile.size, first.q_profile.size, first.v_profile.size)
    max_attempts = 1000 * cfg.candidate_pool_size
    while len(pool) < n_samples:
        subset = _sample_subset(rng, dims, len(pool), cfg)
        candidates: list[PFSample] = []
        attempts = 0
        while len(candidates) < cfg.candidate_pool_size:
            if attempts >= max_attempts:
                raise CollectionError(
                    f"no feasible candidate after {attempts} attempts")
            attempts += 1
            lsp, gsp = _random_setpoints(net, f, rng)
            cand = solve_newton_pf(net, adm, lsp, gsp, bounds=bounds)
            if cand is not None:
                candidates.append(cand)
        scores = [distance_score(c, pool, cfg, subset) for c in candidates]
        pool.append(candidates[int(np.argmax(scores))])

    x = np.array([s.x for s in pool])
    y = np.array([s.y for s in pool])
    split = _split_indices(n_samples, rng)
    meta = {
        "seed": seed,
        "network": net.name,
        "load_range_fraction": f,
        "n_samples": n_samples,
        "candidate_pool_size": cfg.candidate_pool_size,
        "n_v": cfg.n_v,
        "n_d": cfg.n_d,
        "bounds_hash": bounds_hash(bounds),
    }
    return Dataset(x=x, y=y, split=split, meta=meta)


def _split_indices(n: int, rng) -> dict[str, list[int]]:
    perm = rng.permutation(n)
    n_train = int(round(0.7 * n))
    n_val = int(round(0.15 * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return {
        "train": sorted(int(i) for i in perm[:n_train]),
        "val": sorted(int(i) for i in perm[n_train: n_train + n_val]),
        "test": sorted(int(i) for i in perm[n_train + n_val:]),
    }


def bounds_hash(bounds: VerificationBounds) -> str:
    blob = b"".join(np.ascontiguousarray(a).tobytes() for a in (
        bounds.v2_min, bounds.v2_max, bounds.p_inj_min, bounds.p_inj_max,
        bounds.q_inj_min, bounds.q_inj_max, bounds.l_ft_min, bounds.l_ft_max,
        bounds.l_tf_min, bounds.l_tf_max, bounds.v_max_rect,
        np.array([bounds.load_range_fraction]),
    ))
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    n_in = ds.x.shape[1]
    n_out = ds.y.shape[1]
    header = ",".join([f"x{i}" for i in range(n_in)] + [f"y{i}" for i in range(n_out)])
    np.savetxt(os.path.join(out_dir, "dataset.csv"),
               np.hstack([ds.x, ds.y]), delimiter=",", fmt="%.17g",
               header=header, comments="")
    with open(os.path.join(out_dir, "dataset.meta.json"), "w") as f:
        json.dump({"split": ds.split, **ds.meta}, f, indent=1, sort_keys=True)


def load_dataset(out_dir: str) -> Dataset:
    data = np.loadtxt(os.path.join(out_dir, "dataset.csv"),
                      delimiter=",", skiprows=1, ndmin=2)
    with open(os.path.join(out_dir, "dataset.meta.json")) as f:
        meta = json.load(f)
    split = meta.pop("split")
    with open(os.path.join(out_dir, "dataset.csv")) as f:
        n_in = sum(1 for c in f.readline().split(",") if c.startswith("x"))
    return Dataset(x=data[:, :n_in], y=data[:, n_in:], split=split, meta=meta)
