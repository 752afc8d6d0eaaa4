"""One-hidden-layer ReLU surrogate with affine feedthrough.

The model predicts y = S_out*(W1 relu(W0 x~ + b0) + b1) + mu_out + J x + r,
where x~ is the standardized input. The affine (J, r) term is a least-squares
linearization fit first; the network then learns corrections to it on
standardized residual targets. Training is Adam on shuffled minibatches with
one-shot magnitude sparsification halfway through, best-validation snapshot
selection, and a final hard prune of tiny parameters.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset

PRUNE_THRESHOLD = 1e-3
_SIGMA_FLOOR = 1e-8


class TrainingError(RuntimeError):
    pass


class KinkProximityError(ValueError):
    """Gradient check requested at a point too close to a ReLU kink."""


@dataclass
class Surrogate:
    w0: np.ndarray        # h x n_in
    b0: np.ndarray        # h
    w1: np.ndarray        # n_out x h
    b1: np.ndarray        # n_out
    j_star: np.ndarray    # n_out x n_in
    r_star: np.ndarray    # n_out
    mu_in: np.ndarray
    sigma_in: np.ndarray
    mu_out: np.ndarray
    sigma_out: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def h(self) -> int:
        return self.w0.shape[0]

    @property
    def n_in(self) -> int:
        return self.w0.shape[1]

    @property
    def n_out(self) -> int:
        return self.w1.shape[0]

    def save(self, path: str) -> None:
        blob = {k: getattr(self, k).tolist() for k in (
            "w0", "b0", "w1", "b1", "j_star", "r_star",
            "mu_in", "sigma_in", "mu_out", "sigma_out")}
        blob["meta"] = self.meta
        with open(path, "w") as f:
            json.dump(blob, f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "Surrogate":
        with open(path) as f:
            blob = json.load(f)
        meta = blob.pop("meta", {})
        return cls(**{k: np.array(v, dtype=float) for k, v in blob.items()},
                   meta=meta)


@dataclass
class TrainConfig:
    hidden: int = 25
    epochs: int = 2000
    learning_rate: float = 2e-4
    batch_size: int = 15
    sparsity_fraction: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.sparsity_fraction < 1.0:
            raise ValueError("sparsity_fraction must be in [0, 1)")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")


def forward(s: Surrogate, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != s.n_in:
        raise ValueError(f"x has length {x.shape[-1]}, expected {s.n_in}")
    xt = (x - s.mu_in) / s.sigma_in
    z = xt @ s.w0.T + s.b0
    a = np.maximum(z, 0.0)
    yt = a @ s.w1.T + s.b1
    return s.sigma_out * yt + s.mu_out + x @ s.j_star.T + s.r_star


def fit_feedthrough(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares affine fit of y on x over the training split."""
    x, y = dataset.part("train")
    n, n_in = x.shape
    if n < n_in + 1:
        raise ValueError(f"need at least {n_in + 1} training samples, have {n}")
    A = np.hstack([x, np.ones((n, 1))])
    theta, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    if rank < n_in + 1:
        warnings.warn("rank-deficient feedthrough fit, falling back to ridge")
        lam = 1e-8
        theta = np.linalg.solve(A.T @ A + lam * np.eye(n_in + 1), A.T @ y)
    j_star = theta[:-1].T
    r_star = theta[-1]
    return j_star, r_star


def _init_params(n_in: int, n_out: int, h: int, rng):
    lim0 = np.sqrt(6.0 / (n_in + h))
    lim1 = np.sqrt(6.0 / (h + n_out))
    w0 = rng.uniform(-lim0, lim0, size=(h, n_in))
    w1 = rng.uniform(-lim1, lim1, size=(n_out, h))
    return w0, np.zeros(h), w1, np.zeros(n_out)


def _loss(w0, b0, w1, b1, xt, t):
    z = xt @ w0.T + b0
    p = np.maximum(z, 0.0) @ w1.T + b1
    return float(np.mean((p - t) ** 2))


def train(dataset: Dataset, cfg: TrainConfig) -> Surrogate:
    """Adam on standardized residual targets; returns the pruned best snapshot."""
    rng = np.random.default_rng(cfg.seed)
    x_tr, y_tr = dataset.part("train")
    x_va, y_va = dataset.part("val")
    n, n_in = x_tr.shape
    n_out = y_tr.shape[1]

    j_star, r_star = fit_feedthrough(dataset)
    mu_in = x_tr.mean(axis=0)
    sigma_in = np.maximum(x_tr.std(axis=0), _SIGMA_FLOOR)
    res_tr = y_tr - (x_tr @ j_star.T + r_star)
    mu_out = res_tr.mean(axis=0)
    sigma_out = np.maximum(res_tr.std(axis=0), _SIGMA_FLOOR)

    xt_tr = (x_tr - mu_in) / sigma_in
    t_tr = (res_tr - mu_out) / sigma_out
    xt_va = (x_va - mu_in) / sigma_in
    t_va = (y_va - (x_va @ j_star.T + r_star) - mu_out) / sigma_out

    w0, b0, w1, b1 = _init_params(n_in, n_out, cfg.hidden, rng)
    params = [w0, b0, w1, b1]
    m_adam = [np.zeros_like(p) for p in params]
    v_adam = [np.zeros_like(p) for p in params]
    mask0 = np.ones_like(w0)
    mask1 = np.ones_like(w1)

    sparsify_epoch = int(np.ceil(cfg.epochs / 2))
    best = ([p.copy() for p in params],
            _loss(w0, b0, w1, b1, xt_va, t_va) if len(x_va) else np.inf)
    step = 0
    for epoch in range(cfg.epochs):
        if epoch == sparsify_epoch and cfg.sparsity_fraction > 0.0:
            mags = np.concatenate([np.abs(w0).ravel(), np.abs(w1).ravel()])
            k = int(np.floor(cfg.sparsity_fraction * mags.size))
            if k > 0:
                cut = np.partition(mags, k - 1)[k - 1]
                mask0 = (np.abs(w0) > cut).astype(float)
                mask1 = (np.abs(w1) > cut).astype(float)
                w0 *= mask0
                w1 *= mask1

        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start: start + cfg.batch_size]
            xb, tb = xt_tr[idx], t_tr[idx]
            z = xb @ w0.T + b0
            a = np.maximum(z, 0.0)
            p = a @ w1.T + b1
            g = 2.0 * (p - tb) / p.size
            dw1 = g.T @ a
            db1 = g.sum(axis=0)
            da = g @ w1
            dz = da * (z > 0.0)
            dw0 = dz.T @ xb
            db0 = dz.sum(axis=0)
            step += 1
            for p_arr, g_arr, m_, v_ in zip(params, [dw0, db0, dw1, db1],
                                            m_adam, v_adam):
                m_ *= cfg.beta1
                m_ += (1 - cfg.beta1) * g_arr
                v_ *= cfg.beta2
                v_ += (1 - cfg.beta2) * g_arr ** 2
                mhat = m_ / (1 - cfg.beta1 ** step)
                vhat = v_ / (1 - cfg.beta2 ** step)
                p_arr -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps_adam)
            w0 *= mask0
            w1 *= mask1

        val = _loss(w0, b0, w1, b1, xt_va, t_va) if len(x_va) else \
            _loss(w0, b0, w1, b1, xt_tr, t_tr)
        if not np.isfinite(val):
            raise TrainingError(
                f"non-finite loss at epoch {epoch} (lr={cfg.learning_rate})")
        if val < best[1]:
            best = ([p.copy() for p in params], val)

    w0, b0, w1, b1 = best[0]
    val_before_prune = _loss(w0, b0, w1, b1, xt_va, t_va) if len(x_va) else \
        _loss(w0, b0, w1, b1, xt_tr, t_tr)
    for p_arr in (w0, b0, w1, b1):
        p_arr[np.abs(p_arr) < PRUNE_THRESHOLD] = 0.0
    val_after_prune = _loss(w0, b0, w1, b1, xt_va, t_va) if len(x_va) else \
        _loss(w0, b0, w1, b1, xt_tr, t_tr)

    meta = {
        "config": vars(cfg).copy(),
        "best_val_loss": best[1],
        "val_loss_before_prune": val_before_prune,
        "val_loss_after_prune": val_after_prune,
        "train_loss_final": _loss(w0, b0, w1, b1, xt_tr, t_tr),
    }
    return Surrogate(w0=w0, b0=b0, w1=w1, b1=b1, j_star=j_star, r_star=r_star,
                     mu_in=mu_in, sigma_in=sigma_in, mu_out=mu_out,
                     sigma_out=sigma_out, meta=meta)


def grad_check(s: Surrogate, x: np.ndarray, direction: np.ndarray,
               fd_step: float = 1e-5, kink_tol: float = 1e-6) -> float:
    """Relative error between the analytic and central-difference directional
    derivatives of forward() at x along direction."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(direction, dtype=float)
    xt = (x - s.mu_in) / s.sigma_in
    z = s.w0 @ xt + s.b0
    if np.any(np.abs(z) < kink_tol):
        raise KinkProximityError(
            "pre-activation within tolerance of a ReLU kink; resample x")
    dz = s.w0 @ (d / s.sigma_in)
    analytic = s.sigma_out * (s.w1 @ ((z > 0.0) * dz)) + s.j_star @ d
    fd = (forward(s, x + fd_step * d) - forward(s, x - fd_step * d)) / (2 * fd_step)
    return float(np.max(np.abs(analytic - fd)) / (1.0 + np.max(np.abs(fd))))
