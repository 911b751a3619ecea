"""Simulation study for least-squares recovery of prompt experts.

The regression function mixes ``N`` frozen pre-trained experts (quadratic
gates) with a handful of prompt experts (linear gates through a shared frozen
matrix ``W``); every expert is a GELU unit ``h(X; a, b) = gelu(a.X + b)`` (a linear
unit is available for sanity checks).
``rate_experiment`` fits the prompt part by multi-restart least squares for a
grid of sample sizes and reports how the Voronoi loss shrinks with ``n``.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares

from .numerics import gelu, gelu_grad, gelu_grad2, make_rng


class FitFailure(RuntimeError):
    pass


_ACTIVATIONS = {
    "gelu": (gelu, gelu_grad),
    "linear": (lambda z: z, np.ones_like),
}


def _activation(name):
    if name not in _ACTIVATIONS:
        raise ValueError(f"unknown expert activation {name!r}")
    return _ACTIVATIONS[name]


@dataclass
class MixingMeasure:
    """Prompt-expert atoms: row ``i`` of each array is one atom."""

    beta0: np.ndarray   # (k,)
    beta1: np.ndarray   # (k, D)
    a: np.ndarray       # (k, D)
    b: np.ndarray       # (k,)
    W: np.ndarray       # (D, D), frozen and shared
    activation: str = "gelu"

    def __post_init__(self):
        _activation(self.activation)
        self.beta0 = np.atleast_1d(np.asarray(self.beta0, dtype=np.float64))
        self.beta1 = np.atleast_2d(np.asarray(self.beta1, dtype=np.float64))
        self.a = np.atleast_2d(np.asarray(self.a, dtype=np.float64))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        k = len(self.beta0)
        if not (self.beta1.shape[0] == self.a.shape[0] == len(self.b) == k):
            raise ValueError("atom arrays disagree on the number of atoms")
        if self.beta1.shape[1] != self.W.shape[1] or self.a.shape[1] != self.W.shape[0]:
            raise ValueError("atom dimensions do not match W")

    @property
    def n_atoms(self):
        return len(self.beta0)

    @property
    def dim(self):
        return self.W.shape[0]

    @property
    def weights(self):
        return np.exp(self.beta0)

    def omega(self):
        """Per-atom location ``(beta1, a, b)`` used for the Voronoi assignment."""
        return np.concatenate([self.beta1, self.a, self.b[:, None]], axis=1)

    def to_vector(self):
        return np.concatenate([self.beta0[:, None], self.beta1, self.a, self.b[:, None]], axis=1).ravel()

    @classmethod
    def from_vector(cls, theta, k, W, activation="gelu"):
        D = W.shape[0]
        m = np.asarray(theta, dtype=np.float64).reshape(k, 2 * D + 2)
        return cls(m[:, 0], m[:, 1:1 + D], m[:, 1 + D:1 + 2 * D], m[:, -1], W, activation)

    def permuted(self, order):
        order = np.asarray(order)
        return replace(self, beta0=self.beta0[order], beta1=self.beta1[order],
                       a=self.a[order], b=self.b[order])


@dataclass
class PretrainedGate:
    """Frozen pre-trained experts: gate ``X'B_jX + c_j`` and expert ``gelu(a_j.X + b_j)``."""

    B: np.ndarray   # (N, D, D), symmetric
    c: np.ndarray   # (N,)
    a: np.ndarray   # (N, D)
    b: np.ndarray   # (N,)

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.B.ndim == 2:
            self.B = self.B[None]
        self.c = np.atleast_1d(np.asarray(self.c, dtype=np.float64))
        self.a = np.atleast_2d(np.asarray(self.a, dtype=np.float64))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        if len(self.c) and not np.allclose(self.B, np.swapaxes(self.B, 1, 2)):
            raise ValueError("pre-trained gate matrices must be symmetric")

    @property
    def n_experts(self):
        return len(self.c)

    @classmethod
    def none(cls, dim):
        return cls(np.zeros((0, dim, dim)), np.zeros(0), np.zeros((0, dim)), np.zeros(0))


@dataclass
class RegressionDataset:
    X: np.ndarray
    Y: np.ndarray
    nu: float
    bound: float = 1.0

    @property
    def n(self):
        return len(self.Y)


def _pre_terms(pre: PretrainedGate, X, act):
    if pre.n_experts == 0:
        return np.zeros((len(X), 0)), np.zeros((len(X), 0))
    logits = np.einsum("nd,jde,ne->nj", X, pre.B, X) + pre.c
    return logits, act(X @ pre.a.T + pre.b)


def _forward(G: MixingMeasure, pre: PretrainedGate, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != G.dim:
        raise ValueError(f"inputs have dimension {X.shape[1]}, measure expects {G.dim}")
    act = _activation(G.activation)[0]
    pre_logits, pre_out = _pre_terms(pre, X, act)
    U = X @ G.W                                   # rows are W'X
    pl = U @ G.beta1.T + G.beta0                  # prompt logits (n, k)
    pz = X @ G.a.T + G.b
    logits = np.concatenate([pre_logits, pl], axis=1)
    logits -= logits.max(axis=1, keepdims=True)   # guard exp overflow
    e = np.exp(logits)
    pi = e / e.sum(axis=1, keepdims=True)
    out = np.concatenate([pre_out, act(pz)], axis=1)
    g = (pi * out).sum(axis=1)
    return g, pi, out, U, pz


def gate_weights(G: MixingMeasure, pre: PretrainedGate, X):
    """Softmax weights over all experts, pre-trained first; rows sum to one."""
    return _forward(G, pre, X)[1]


def eval_regression_fn(G: MixingMeasure, pre: PretrainedGate, X):
    """Mixture output for each row of ``X`` (a scalar for a single input)."""
    g = _forward(G, pre, X)[0]
    return float(g[0]) if np.ndim(X) == 1 else g


def regression_jacobian(G: MixingMeasure, pre: PretrainedGate, X):
    """``d g(X_i) / d theta`` with ``theta = G.to_vector()``; shape ``(n, k*(2D+2))``."""
    g, pi, out, U, pz = _forward(G, pre, X)
    npre = pre.n_experts
    pp = pi[:, npre:]
    dl = pp * (out[:, npre:] - g[:, None])        # d g / d prompt logit
    dz = pp * _activation(G.activation)[1](pz)    # d g / d prompt pre-activation
    n, k = pp.shape
    D = G.dim
    J = np.empty((n, k, 2 * D + 2))
    J[:, :, 0] = dl
    J[:, :, 1:1 + D] = dl[:, :, None] * U[:, None, :]
    J[:, :, 1 + D:1 + 2 * D] = dz[:, :, None] * X[:, None, :]
    J[:, :, -1] = dz
    return J.reshape(n, -1)


def squared_loss(G: MixingMeasure, pre: PretrainedGate, data: RegressionDataset):
    """Mean squared residual and its gradient with respect to ``G.to_vector()``."""
    r = eval_regression_fn(G, pre, data.X) - data.Y
    J = regression_jacobian(G, pre, data.X)
    return float(np.mean(r * r)), 2.0 * (J.T @ r) / data.n


def random_orthogonal(rng, dim):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def reference_problem(seed=0, tokens=2, d=2, n_pre=2, n_prompt=2):
    """Ground-truth measure and frozen pre-trained experts for the desk-scale study."""
    rng = make_rng(seed)
    D = tokens * d
    W = random_orthogonal(rng, D)
    B = rng.normal(0.0, 0.5, size=(n_pre, D, D))
    B = 0.5 * (B + np.swapaxes(B, 1, 2))
    pre = PretrainedGate(B, rng.normal(0.0, 0.5, n_pre), rng.normal(0.0, 1.0, (n_pre, D)), rng.normal(0.0, 0.5, n_pre))
    beta0 = rng.uniform(-0.5, 0.5, n_prompt)
    beta0[-1] = 0.0                               # identifiability convention on the truth
    G = MixingMeasure(beta0, rng.uniform(-1.5, 1.5, (n_prompt, D)),
                      rng.uniform(-1.5, 1.5, (n_prompt, D)), rng.uniform(-1.0, 1.0, n_prompt), W)
    return G, pre


def sample_dataset(G_star: MixingMeasure, pre: PretrainedGate, n, nu, seed, bound=1.0):
    if n < 1:
        raise ValueError("n must be positive")
    rng = make_rng(seed)
    X = rng.uniform(-bound, bound, size=(n, G_star.dim))
    Y = eval_regression_fn(G_star, pre, X) + nu * rng.standard_normal(n)
    return RegressionDataset(X, Y, nu, bound)


@dataclass
class FitResult:
    measure: MixingMeasure
    loss: float
    restarts: int
    failures: int


def _solve(data, pre, W, n_atoms, theta0, max_steps, box, activation):
    def resid(theta):
        return eval_regression_fn(MixingMeasure.from_vector(theta, n_atoms, W, activation), pre, data.X) - data.Y

    def jac(theta):
        return regression_jacobian(MixingMeasure.from_vector(theta, n_atoms, W, activation), pre, data.X)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = least_squares(resid, theta0, jac=jac, bounds=(-box, box), method="trf",
                            max_nfev=max_steps, x_scale="jac", xtol=1e-12, ftol=1e-12, gtol=1e-12)
    return sol.x, 2.0 * sol.cost / data.n


def fit_least_squares(data: RegressionDataset, pre: PretrainedGate, W, n_atoms, restarts=16,
                      max_steps=200, box=3.0, seed=0, init=None, screen_size=2000, polish=3,
                      activation="gelu"):
    """Best of ``restarts`` bounded least-squares fits of ``n_atoms`` prompt experts.

    Each restart starts uniformly inside ``[-box, box]`` (or at ``init`` for the
    first restart) and runs a trust-region solver with bound constraints, so all
    iterates stay in the parameter box. For large ``n`` the restarts are run on a
    random subsample of ``screen_size`` points and only the ``polish`` best are
    re-solved on the full data. Returns the fit with the smallest mean squared
    residual on the full data.
    """
    W = np.asarray(W, dtype=np.float64)
    D = W.shape[0]
    p = n_atoms * (2 * D + 2)
    rng = make_rng(seed)
    screen = data
    if screen_size and data.n > screen_size:
        idx = rng.choice(data.n, size=screen_size, replace=False)
        screen = RegressionDataset(data.X[idx], data.Y[idx], data.nu, data.bound)

    candidates, failures = [], 0
    for r in range(restarts):
        if r == 0 and init is not None:
            theta0 = np.clip(init.to_vector(), -box, box)
        else:
            theta0 = rng.uniform(-box, box, p)
        try:
            theta, loss = _solve(screen, pre, W, n_atoms, theta0, max_steps, box, activation)
        except (ValueError, np.linalg.LinAlgError, FloatingPointError):
            failures += 1
            continue
        if not np.isfinite(loss):
            failures += 1
            continue
        candidates.append((loss, r, theta))
    if not candidates:
        raise FitFailure(f"all {restarts} restarts diverged")
    candidates.sort(key=lambda c: (c[0], c[1]))
    if screen is not data:
        polished = []
        for _, r, theta in candidates[:polish]:
            try:
                theta, loss = _solve(data, pre, W, n_atoms, theta, max_steps, box, activation)
            except (ValueError, np.linalg.LinAlgError, FloatingPointError):
                failures += 1
                continue
            if np.isfinite(loss):
                polished.append((loss, r, theta))
        if not polished:
            raise FitFailure("every polished restart diverged")
        candidates = sorted(polished, key=lambda c: (c[0], c[1]))
    loss, _, theta = candidates[0]
    return FitResult(MixingMeasure.from_vector(theta, n_atoms, W, activation), loss, restarts, failures)


def voronoi_cells(G: MixingMeasure, G_star: MixingMeasure):
    """For each true atom, the indices of fitted atoms nearest to it (ties to the lower true index)."""
    dist = np.linalg.norm(G.omega()[:, None, :] - G_star.omega()[None, :, :], axis=2)
    owner = np.argmin(dist, axis=1)               # argmin returns the first minimiser
    return [np.flatnonzero(owner == j) for j in range(G_star.n_atoms)]


def voronoi_loss(G: MixingMeasure, G_star: MixingMeasure):
    """Voronoi discrepancy between a fitted measure and the truth.

    Cells holding several fitted atoms contribute weighted squared parameter
    errors, singleton cells weighted plain norms, and every cell adds the gap
    between its summed weight and the true weight.
    """
    if G.n_atoms == 0:
        raise ValueError("fitted measure has no atoms")
    if G.dim != G_star.dim:
        raise ValueError("measures have different dimensions")
    w = G.weights
    total = 0.0
    for j, cell in enumerate(voronoi_cells(G, G_star)):
        for i in cell:
            db1 = np.linalg.norm(G.beta1[i] - G_star.beta1[j])
            deta = np.linalg.norm(np.append(G.a[i] - G_star.a[j], G.b[i] - G_star.b[j]))
            if len(cell) > 1:
                total += w[i] * (db1 ** 2 + deta ** 2)
            else:
                total += w[i] * (db1 + deta)
        total += abs(w[cell].sum() - G_star.weights[j])
    return float(total)


def loglog_slope(ns, values):
    """OLS slope of ``log(values)`` against ``log(ns)``; ``nan`` if any value is non-positive."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values <= 0) or not np.all(np.isfinite(values)):
        return float("nan")
    return float(np.polyfit(np.log(np.asarray(ns, dtype=np.float64)), np.log(values), 1)[0])


@dataclass
class RateConfig:
    n_grid: tuple = (500, 2000, 8000, 32000)
    seeds: int = 10
    nu: float = 0.1
    tokens: int = 2
    dim: int = 2
    n_pre: int = 2
    n_prompt: int = 2
    n_fit: int = 2
    restarts: int = 16
    max_steps: int = 200
    box: float = 3.0
    problem_seed: int = 0
    init_at_truth: bool = False

    def validate(self):
        grid = np.asarray(self.n_grid, dtype=np.float64)
        if len(grid) < 2 or np.any(grid < 1) or np.any(np.diff(grid) <= 0):
            raise ValueError("n_grid must hold at least two increasing sizes")
        ratios = grid[1:] / grid[:-1]
        if not np.allclose(ratios, ratios[0], rtol=1e-6):
            raise ValueError("n_grid must be geometric")
        if self.seeds < 1 or self.restarts < 1:
            raise ValueError("seeds and restarts must be positive")
        if self.n_fit < self.n_prompt:
            raise ValueError("the fitted atom count must bound the true one")
        if self.nu < 0:
            raise ValueError("noise level must be non-negative")
        return self


@dataclass
class RateResult:
    records: list
    medians: dict
    slope: float
    failures: int
    degenerate: bool = False
    config: RateConfig = field(default=None, repr=False)

    def summary(self):
        return {
            "n_grid": [int(n) for n in self.medians],
            "median_voronoi_loss": {str(int(n)): v for n, v in self.medians.items()},
            "slope": None if np.isnan(self.slope) else self.slope,
            "degenerate": self.degenerate,
            "failures": self.failures,
            "seeds": self.config.seeds if self.config else None,
        }


def rate_experiment(cfg: RateConfig, on_record=None) -> RateResult:
    """Median Voronoi loss of the least-squares fit at each ``n`` and the log-log slope."""
    cfg.validate()
    G_star, pre = reference_problem(cfg.problem_seed, cfg.tokens, cfg.dim, cfg.n_pre, cfg.n_prompt)
    init = None
    if cfg.init_at_truth:
        init = G_star if cfg.n_fit == cfg.n_prompt else None
    records, failures = [], 0
    medians = {}
    for n in cfg.n_grid:
        losses = []
        for s in range(cfg.seeds):
            data = sample_dataset(G_star, pre, int(n), cfg.nu, seed=1_000_003 * (s + 1) + int(n))
            try:
                fit = fit_least_squares(data, pre, G_star.W, cfg.n_fit, restarts=cfg.restarts,
                                        max_steps=cfg.max_steps, box=cfg.box, seed=7919 * s + int(n), init=init)
            except FitFailure:
                failures += 1
                rec = {"n": int(n), "seed": s, "restart_best_loss": float("nan"), "voronoi_loss": float("nan")}
            else:
                failures += fit.failures
                v = voronoi_loss(fit.measure, G_star)
                losses.append(v)
                rec = {"n": int(n), "seed": s, "restart_best_loss": fit.loss, "voronoi_loss": v}
            records.append(rec)
            if on_record:
                on_record(rec)
        medians[int(n)] = float(np.median(losses)) if losses else float("nan")
    vals = np.array(list(medians.values()))
    degenerate = bool(np.all(np.isfinite(vals)) and np.all(vals < 1e-10))
    slope = float("nan") if degenerate else loglog_slope(list(medians), vals)
    return RateResult(records, medians, slope, failures, degenerate, cfg)


def write_rate_csv(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "seed", "restart_best_loss", "voronoi_loss"])
        for r in records:
            writer.writerow([r["n"], r["seed"], repr(float(r["restart_best_loss"])), repr(float(r["voronoi_loss"]))])


def write_rate_summary(path, result: RateResult):
    with open(path, "w") as fh:
        json.dump(result.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def identifiability_matrix(etas, X):
    """Columns ``X^nu * d^gamma h / d eta^gamma`` with ``|nu| + |gamma| <= 2`` for each ``eta = (a, b)``.

    Functions that coincide (for instance ``x_k * dh/db`` and ``dh/da_k``) are
    listed once, giving ``3 * C(D + 2, 2)`` columns per expert.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, D = X.shape
    cols = []
    for a, b in etas:
        z = X @ np.asarray(a, dtype=np.float64) + b
        phi = (gelu(z), gelu_grad(z), gelu_grad2(z))
        # an order-r eta derivative is phi^(r)(z) times a monomial of degree <= r in X,
        # and X^nu adds degree <= 2 - r, so each phi^(r) meets every monomial of degree <= 2
        for pr in phi:
            for deg in range(3):
                for mono in _monomials(X, deg):
                    cols.append(pr * mono)
    M = np.stack(cols, axis=1)
    return M


def _monomials(X, deg):
    n, D = X.shape
    if deg == 0:
        return [np.ones(n)]
    if deg == 1:
        return [X[:, k] for k in range(D)]
    return [X[:, k] * X[:, l] for k in range(D) for l in range(k, D)]


def identifiability_condition_number(etas, X):
    M = identifiability_matrix(etas, X)
    s = np.linalg.svd(M, compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
