"""Grid model: case parsing, admittance matrices, quadratic output maps, bounds.

The network state is a rectangular voltage vector x = [v_r; v_i] with the
imaginary coordinate of the slack bus fixed at zero and removed, so
x has length 2*n_b - 1. The monitored outputs are stacked as

    y = [V^2 (n_b); p_inj (n_b); q_inj (n_b); l_ft (n_l); l_tf (n_l)],

each of which is an exact quadratic form y_k = x' M_k x. All quantities are
per-unit.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field

import numpy as np


class CaseParseError(ValueError):
    pass


class CaseValidationError(ValueError):
    pass


# rating fallback (p.u. current) for branches with no thermal limit in the file
_DEFAULT_AMPACITY = 10.0


@dataclass(frozen=True)
class Bus:
    bus_id: int
    bus_type: int          # 1 PQ, 2 PV, 3 slack
    g_shunt: float
    b_shunt: float
    v_min: float
    v_max: float
    vm_init: float = 1.0
    va_init: float = 0.0   # radians


@dataclass(frozen=True)
class Branch:
    f_bus: int             # 0-based internal index
    t_bus: int
    r: float
    x: float
    b_charge: float
    tap: float
    shift: float           # radians
    ampacity: float        # p.u. current limit


@dataclass(frozen=True)
class Gen:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    vg: float
    pg_nom: float


@dataclass(frozen=True)
class Load:
    bus: int
    p_nom: float
    q_nom: float


@dataclass
class Network:
    n_b: int
    n_l: int
    base_mva: float
    buses: list[Bus]
    branches: list[Branch]
    gens: list[Gen]
    loads: list[Load]
    incidence: np.ndarray  # signed node-branch matrix, n_l x n_b
    slack_bus: int
    name: str = "case"

    @property
    def n_in(self) -> int:
        return 2 * self.n_b - 1

    @property
    def n_out(self) -> int:
        return 3 * self.n_b + 2 * self.n_l

    def x_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Positions of (v_r, v_i) coordinates of each bus inside x.

        Returns (ir, ii) with ir[b] the x-index of v_r at bus b and ii[b]
        the x-index of v_i at bus b, ii[slack] = -1.
        """
        ir = np.arange(self.n_b)
        ii = np.full(self.n_b, -1)
        k = self.n_b
        for b in range(self.n_b):
            if b != self.slack_bus:
                ii[b] = k
                k += 1
        return ir, ii

    def x_to_complex(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"x has length {x.shape[-1]}, expected {self.n_in}")
        vr = x[..., : self.n_b]
        vi = np.zeros(x.shape[:-1] + (self.n_b,))
        _, ii = self.x_index()
        mask = ii >= 0
        vi[..., mask] = x[..., ii[mask]]
        return vr + 1j * vi

    def complex_to_x(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=complex)
        _, ii = self.x_index()
        mask = ii >= 0
        x = np.empty(v.shape[:-1] + (self.n_in,))
        x[..., : self.n_b] = v.real
        x[..., ii[mask]] = v.imag[..., mask]
        return x

    def to_json(self) -> str:
        d = {
            "name": self.name,
            "n_b": self.n_b,
            "n_l": self.n_l,
            "base_mva": self.base_mva,
            "slack_bus": self.slack_bus,
            "buses": [vars(b) for b in self.buses],
            "branches": [vars(b) for b in self.branches],
            "gens": [vars(g) for g in self.gens],
            "loads": [vars(l) for l in self.loads],
            "incidence": self.incidence.tolist(),
        }
        return json.dumps(d, indent=1, sort_keys=True)


@dataclass
class Admittances:
    y_bus: np.ndarray   # complex n_b x n_b, shunts included
    y_ft: np.ndarray    # complex n_l x n_b, I_from = y_ft @ v
    y_tf: np.ndarray    # complex n_l x n_b, I_to = y_tf @ v


@dataclass
class QuadraticMaps:
    """Symmetric matrices M with output = x' M x, over the reduced x vector."""

    m_v: list[np.ndarray]
    m_p: list[np.ndarray]
    m_q: list[np.ndarray]
    m_f: list[np.ndarray]
    m_t: list[np.ndarray]

    def stacked(self) -> list[np.ndarray]:
        return list(self.m_v) + list(self.m_p) + list(self.m_q) \
            + list(self.m_f) + list(self.m_t)


@dataclass
class VerificationBounds:
    v2_min: np.ndarray
    v2_max: np.ndarray
    p_inj_min: np.ndarray
    p_inj_max: np.ndarray
    q_inj_min: np.ndarray
    q_inj_max: np.ndarray
    l_ft_min: np.ndarray
    l_ft_max: np.ndarray
    l_tf_min: np.ndarray
    l_tf_max: np.ndarray
    v_max_rect: np.ndarray       # per-input-coordinate box half-width
    load_range_fraction: float

    def y_box(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.concatenate([self.v2_min, self.p_inj_min, self.q_inj_min,
                             self.l_ft_min, self.l_tf_min])
        hi = np.concatenate([self.v2_max, self.p_inj_max, self.q_inj_max,
                             self.l_ft_max, self.l_tf_max])
        return lo, hi

    def x_box(self) -> tuple[np.ndarray, np.ndarray]:
        return -self.v_max_rect, self.v_max_rect.copy()


# ---------------------------------------------------------------------------
# case parsing (MATPOWER subset)
# ---------------------------------------------------------------------------

_KNOWN_TABLES = ("bus", "gen", "branch")


def _parse_matrix(text: str, start_line: int) -> list[list[float]]:
    rows = []
    for off, line in enumerate(text.splitlines()):
        line = line.split("%")[0].strip()
        if not line:
            continue
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                rows.append([float(tok) for tok in chunk.split()])
            except ValueError as exc:
                raise CaseParseError(
                    f"line {start_line + off}: malformed table row: {chunk!r}") from exc
    return rows


def parse_case(text: str, name: str = "case") -> Network:
    """Parse a MATPOWER-format case (baseMVA, bus, gen, branch tables only)."""
    lines = text.splitlines()
    m = re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)\s*;", text)
    if m is None:
        raise CaseParseError("missing mpc.baseMVA")
    base = float(m.group(1))

    tables: dict[str, list[list[float]]] = {}
    for m in re.finditer(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", text, re.DOTALL):
        tname, body = m.group(1), m.group(2)
        start_line = text[: m.start()].count("\n") + 1
        if tname not in _KNOWN_TABLES:
            warnings.warn(f"ignoring unknown table mpc.{tname}")
            continue
        tables[tname] = _parse_matrix(body, start_line)
    for tname in _KNOWN_TABLES:
        if tname not in tables:
            raise CaseParseError(f"missing mpc.{tname} table")

    bus_rows = tables["bus"]
    id_to_idx = {}
    buses = []
    loads = []
    slack = None
    for row in bus_rows:
        if len(row) < 13:
            raise CaseParseError(f"bus row too short: {row}")
        bid, btype = int(row[0]), int(row[1])
        idx = len(buses)
        id_to_idx[bid] = idx
        buses.append(Bus(
            bus_id=bid, bus_type=btype,
            g_shunt=row[4] / base, b_shunt=row[5] / base,
            v_min=row[12], v_max=row[11],
            vm_init=row[7], va_init=np.deg2rad(row[8]),
        ))
        if row[2] != 0.0 or row[3] != 0.0:
            loads.append(Load(bus=idx, p_nom=row[2] / base, q_nom=row[3] / base))
        if btype == 3:
            if slack is not None:
                raise CaseValidationError("multiple slack buses")
            slack = idx
    if slack is None:
        raise CaseValidationError("no slack bus (type 3) found")
    n_b = len(buses)
    for b in buses:
        if not b.v_min < b.v_max:
            raise CaseValidationError(f"bus {b.bus_id}: V_min must be < V_max")

    gens = []
    for row in tables["gen"]:
        if len(row) < 10:
            raise CaseParseError(f"gen row too short: {row}")
        if int(row[7]) == 0:
            continue
        gbus = int(row[0])
        if gbus not in id_to_idx:
            raise CaseValidationError(f"gen references unknown bus {gbus}")
        gens.append(Gen(
            bus=id_to_idx[gbus],
            p_min=row[9] / base, p_max=row[8] / base,
            q_min=row[4] / base, q_max=row[3] / base,
            vg=row[5], pg_nom=row[1] / base,
        ))

    branches = []
    for row in tables["branch"]:
        if len(row) < 11:
            raise CaseParseError(f"branch row too short: {row}")
        if int(row[10]) == 0:
            continue
        fb, tb = int(row[0]), int(row[1])
        if fb not in id_to_idx or tb not in id_to_idx:
            raise CaseValidationError(f"branch references unknown bus {fb}-{tb}")
        rate = row[5] / base
        if rate <= 0.0:
            warnings.warn(f"branch {fb}-{tb}: no rating, using default ampacity")
            rate = _DEFAULT_AMPACITY
        tap = row[8] if row[8] != 0.0 else 1.0
        branches.append(Branch(
            f_bus=id_to_idx[fb], t_bus=id_to_idx[tb],
            r=row[2], x=row[3], b_charge=row[4],
            tap=tap, shift=np.deg2rad(row[9]), ampacity=rate,
        ))
    n_l = len(branches)

    E = np.zeros((n_l, n_b))
    for k, br in enumerate(branches):
        E[k, br.f_bus] = 1.0
        E[k, br.t_bus] = -1.0

    return Network(n_b=n_b, n_l=n_l, base_mva=base, buses=buses,
                   branches=branches, gens=gens, loads=loads,
                   incidence=E, slack_bus=slack, name=name)


# ---------------------------------------------------------------------------
# admittances
# ---------------------------------------------------------------------------

def build_admittances(net: Network) -> Admittances:
    """Y-bus and directed branch-flow matrices for the pi branch model."""
    n_b, n_l = net.n_b, net.n_l
    y_ft = np.zeros((n_l, n_b), dtype=complex)
    y_tf = np.zeros((n_l, n_b), dtype=complex)
    y_bus = np.zeros((n_b, n_b), dtype=complex)
    for k, br in enumerate(net.branches):
        if br.r == 0.0 and br.x == 0.0:
            raise CaseValidationError(
                f"branch {br.f_bus}-{br.t_bus}: zero series impedance")
        ys = 1.0 / (br.r + 1j * br.x)
        t = br.tap * np.exp(1j * br.shift)
        y_ff = (ys + 1j * br.b_charge / 2.0) / (t * np.conj(t))
        y_tt = ys + 1j * br.b_charge / 2.0
        y_ftk = -ys / np.conj(t)
        y_tfk = -ys / t
        f, tt = br.f_bus, br.t_bus
        y_ft[k, f] = y_ff
        y_ft[k, tt] = y_ftk
        y_tf[k, f] = y_tfk
        y_tf[k, tt] = y_tt
        y_bus[f, f] += y_ff
        y_bus[f, tt] += y_ftk
        y_bus[tt, f] += y_tfk
        y_bus[tt, tt] += y_tt
    for b, bus in enumerate(net.buses):
        y_bus[b, b] += bus.g_shunt + 1j * bus.b_shunt
    return Admittances(y_bus=y_bus, y_ft=y_ft, y_tf=y_tf)


# ---------------------------------------------------------------------------
# quadratic maps
# ---------------------------------------------------------------------------

def _hermitian_to_real(H: np.ndarray) -> np.ndarray:
    """Real symmetric form of v^H H v over [v_r; v_i], H hermitian."""
    A, B = H.real, H.imag
    M = np.block([[A, -B], [B, A]])
    return 0.5 * (M + M.T)   # scrub FMA-order noise from complex products


def _reduce(M: np.ndarray, slack_imag: int) -> np.ndarray:
    keep = np.delete(np.arange(M.shape[0]), slack_imag)
    return M[np.ix_(keep, keep)]


def build_quadratic_maps(net: Network, adm: Admittances) -> QuadraticMaps:
    """Symmetric matrices mapping x to each monitored output via x' M x.

    Built by symmetrizing the bilinear forms of S = v .* conj(Y v) and of
    the squared branch currents in rectangular coordinates, then deleting
    the slack-bus imaginary row/column (that coordinate is pinned to 0).
    """
    n_b = net.n_b
    slack_imag = n_b + net.slack_bus
    m_v, m_p, m_q, m_f, m_t = [], [], [], [], []
    Yh = adm.y_bus.conj().T
    for i in range(n_b):
        Eii = np.zeros((n_b, n_b))
        Eii[i, i] = 1.0
        m_v.append(_reduce(_hermitian_to_real(Eii.astype(complex)), slack_imag))
        K = np.outer(Yh[:, i], np.eye(n_b)[i])     # Y^H e_i e_i'
        Hp = 0.5 * (K + K.conj().T)
        Hq = (K - K.conj().T) / 2j
        m_p.append(_reduce(_hermitian_to_real(Hp), slack_imag))
        m_q.append(_reduce(_hermitian_to_real(Hq), slack_imag))
    for k in range(net.n_l):
        rf = adm.y_ft[k]
        rt = adm.y_tf[k]
        m_f.append(_reduce(_hermitian_to_real(np.outer(rf.conj(), rf)), slack_imag))
        m_t.append(_reduce(_hermitian_to_real(np.outer(rt.conj(), rt)), slack_imag))
    return QuadraticMaps(m_v=m_v, m_p=m_p, m_q=m_q, m_f=m_f, m_t=m_t)


def eval_quadratic(maps: QuadraticMaps, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.array([x @ M @ x for M in maps.stacked()])


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------

def eval_ground_truth(net: Network, adm: Admittances, x: np.ndarray) -> np.ndarray:
    """Direct complex-arithmetic evaluation of all monitored outputs at x."""
    v = net.x_to_complex(x)
    s_inj = v * np.conj(adm.y_bus @ v)
    i_f = adm.y_ft @ v
    i_t = adm.y_tf @ v
    return np.concatenate([
        np.abs(v) ** 2, s_inj.real, s_inj.imag,
        np.abs(i_f) ** 2, np.abs(i_t) ** 2,
    ])


# ---------------------------------------------------------------------------
# verification bounds
# ---------------------------------------------------------------------------

def build_bounds(net: Network, load_range_fraction: float = 0.5,
                 output_margin: float = 0.0) -> VerificationBounds:
    """Output and input boxes of the verification region.

    Loads vary by +-load_range_fraction around nominal; injection bounds are
    the generator ranges minus the opposing load extremes. Squared-current
    bounds are [0, ampacity^2]. The input box is the symmetric rectangular
    box with per-coordinate half-width equal to the bus V_max.

    output_margin widens every output box by that fraction of its width on
    each side. The deployment region is a subset of any widened region, so
    worst-case bounds certified over the widened box remain valid; a small
    margin keeps the region comfortably nonempty for imperfectly trained
    surrogates whose predictions stray just outside a hard physical bound.
    """
    n_b = net.n_b
    pg_min = np.zeros(n_b)
    pg_max = np.zeros(n_b)
    qg_min = np.zeros(n_b)
    qg_max = np.zeros(n_b)
    for g in net.gens:
        pg_min[g.bus] += g.p_min
        pg_max[g.bus] += g.p_max
        qg_min[g.bus] += g.q_min
        qg_max[g.bus] += g.q_max
    pd_min = np.zeros(n_b)
    pd_max = np.zeros(n_b)
    qd_min = np.zeros(n_b)
    qd_max = np.zeros(n_b)
    f = load_range_fraction
    for ld in net.loads:
        lo_p, hi_p = sorted((ld.p_nom * (1 - f), ld.p_nom * (1 + f)))
        lo_q, hi_q = sorted((ld.q_nom * (1 - f), ld.q_nom * (1 + f)))
        pd_min[ld.bus] += lo_p
        pd_max[ld.bus] += hi_p
        qd_min[ld.bus] += lo_q
        qd_max[ld.bus] += hi_q

    v_min = np.array([b.v_min for b in net.buses])
    v_max = np.array([b.v_max for b in net.buses])
    amp = np.array([br.ampacity for br in net.branches])

    _, ii = net.x_index()
    v_max_rect = np.empty(net.n_in)
    v_max_rect[: n_b] = v_max
    for b in range(n_b):
        if ii[b] >= 0:
            v_max_rect[ii[b]] = v_max[b]

    def widen(lo, hi):
        if output_margin == 0.0:
            return lo, hi
        w = output_margin * (hi - lo)
        return lo - w, hi + w

    v2_lo, v2_hi = widen(v_min ** 2, v_max ** 2)
    p_lo, p_hi = widen(pg_min - pd_max, pg_max - pd_min)
    q_lo, q_hi = widen(qg_min - qd_max, qg_max - qd_min)
    lf_lo, lf_hi = widen(np.zeros(net.n_l), amp ** 2)
    lt_lo, lt_hi = widen(np.zeros(net.n_l), amp ** 2)
    return VerificationBounds(
        v2_min=v2_lo, v2_max=v2_hi,
        p_inj_min=p_lo, p_inj_max=p_hi,
        q_inj_min=q_lo, q_inj_max=q_hi,
        l_ft_min=lf_lo, l_ft_max=lf_hi,
        l_tf_min=lt_lo, l_tf_max=lt_hi,
        v_max_rect=v_max_rect,
        load_range_fraction=load_range_fraction,
    )
