"""Loss models with hand-derived gradients, smoothness constants and a prox solver.

Parameters are always a flat float64 vector ``theta``. Every model works on a
"prepared" pair ``(X, Y)``: ``X`` holds the features row-wise and ``Y`` is an
integer label vector (classifiers) or a target matrix (least squares).

    LeastSquares        l = 1/2 ||W x - y||^2          convex, beta = max ||x||^2
    LogisticMulticlass  l = logsumexp(W x) - (W x)_y   convex, beta <= 1/2 ||x||^2
    MLP                 tanh hidden layer + softmax CE not convex, beta estimated
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from fedstab.data import ClientDataset, FederatedDataset, Sample

DEFAULT_L_SAFETY = 1.05
DEFAULT_BETA_SAFETY = 1.5
DEFAULT_MU_SAFETY = 1.5
LOGISTIC_GRAD_CAP = math.sqrt(2.0)


class DimensionError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class ProxConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int, tol: float):
        super().__init__(f"prox solve stopped after {iterations} iterations with residual {residual:.3e} > tol {tol:.1e}")
        self.residual = residual
        self.iterations = iterations
        self.tol = tol


def check_finite(theta: np.ndarray, what: str = "parameter vector") -> np.ndarray:
    if not np.all(np.isfinite(theta)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return theta


def _softmax_rows(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    E /= E.sum(axis=1, keepdims=True)
    return E


def _logsumexp_rows(Z: np.ndarray) -> np.ndarray:
    mx = Z.max(axis=1)
    return mx + np.log(np.exp(Z - mx[:, None]).sum(axis=1))


class LossModel:
    """Common surface. Subclasses implement the array-level kernels."""

    kind = "base"
    convex = True

    def __init__(self, feature_dim: int):
        if feature_dim < 1:
            raise DimensionError("feature_dim must be positive")
        self.feature_dim = int(feature_dim)

    # -- kernels on prepared arrays (no validation, used in hot loops) --------
    def losses(self, theta, X, Y) -> np.ndarray:
        raise NotImplementedError

    def grad_mean(self, theta, X, Y) -> np.ndarray:
        raise NotImplementedError

    def grad_one(self, theta, x, y) -> np.ndarray:
        raise NotImplementedError

    def grads(self, theta, X, Y) -> np.ndarray:
        """Per-sample gradients, shape ``(n, dim)``."""
        raise NotImplementedError

    def grad_norms(self, theta, X, Y) -> np.ndarray:
        raise NotImplementedError

    def grad_dots(self, theta, X, Y, u) -> np.ndarray:
        """Per-sample ``<grad l(theta; z_j), u>`` without forming the gradients."""
        raise NotImplementedError

    def moments(self, theta, X, Y):
        """``(mean gradient, per-sample squared grad norms, dot(u))`` from one forward pass."""
        return (
            self.grad_mean(theta, X, Y),
            self.grad_norms(theta, X, Y) ** 2,
            lambda u: self.grad_dots(theta, X, Y, u),
        )

    def prepare_labels(self, labels, targets) -> np.ndarray:
        return np.asarray(labels, dtype=np.int64)

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def init_params(self, gen: np.random.Generator, scale: float = 0.01) -> np.ndarray:
        return scale * gen.standard_normal(self.dim)

    def to_dict(self) -> dict:
        raise NotImplementedError

    # -- validated public surface ------------------------------------------------
    def prepare(self, data) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(data, FederatedDataset):
            data = data.pooled()
        if isinstance(data, Sample):
            data = ClientDataset.from_samples([data])
        if not isinstance(data, ClientDataset):
            raise TypeError(f"expected a dataset, got {type(data).__name__}")
        if data.n < 1:
            raise ValueError("empty dataset")
        if data.dim != self.feature_dim:
            raise DimensionError(f"feature dimension {data.dim} != model feature_dim {self.feature_dim}")
        return data.features, self.prepare_labels(data.labels, data.targets)

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise DimensionError(f"parameter shape {theta.shape} != ({self.dim},)")
        return check_finite(theta)

    def loss(self, theta, z: Sample) -> float:
        theta = self.check_theta(theta)
        X, Y = self.prepare(z)
        return float(self.losses(theta, X, Y)[0])

    def grad(self, theta, z: Sample) -> np.ndarray:
        theta = self.check_theta(theta)
        X, Y = self.prepare(z)
        return self.grad_one(theta, X[0], Y[0])

    def batch_loss(self, theta, data) -> float:
        theta = self.check_theta(theta)
        X, Y = self.prepare(data)
        return float(np.mean(self.losses(theta, X, Y)))

    def batch_grad(self, theta, data) -> np.ndarray:
        theta = self.check_theta(theta)
        X, Y = self.prepare(data)
        return self.grad_mean(theta, X, Y)

    def hvp(self, theta, v, X, Y, eps: float = 1e-5) -> np.ndarray:
        """Hessian-vector product of the mean loss by central differences of gradients."""
        nv = np.linalg.norm(v)
        if nv == 0:
            return np.zeros_like(theta)
        h = eps * max(1.0, np.linalg.norm(theta)) / nv
        return (self.grad_mean(theta + h * v, X, Y) - self.grad_mean(theta - h * v, X, Y)) / (2 * h)


class LeastSquares(LossModel):
    kind = "least_squares"
    convex = True

    def __init__(self, feature_dim: int, num_outputs: int = 1):
        super().__init__(feature_dim)
        if num_outputs < 1:
            raise DimensionError("num_outputs must be positive")
        self.num_outputs = int(num_outputs)

    @property
    def dim(self) -> int:
        return self.num_outputs * self.feature_dim

    def to_dict(self) -> dict:
        return {"kind": self.kind, "feature_dim": self.feature_dim, "num_outputs": self.num_outputs}

    def prepare_labels(self, labels, targets) -> np.ndarray:
        o = self.num_outputs
        if targets is not None:
            Y = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
            if Y.shape[1] != o:
                raise DimensionError(f"target width {Y.shape[1]} != num_outputs {o}")
            return Y
        labels = np.asarray(labels, dtype=np.int64)
        if o == 1:
            return labels.astype(np.float64)[:, None]
        if labels.max(initial=0) >= o:
            raise DimensionError("label exceeds the number of outputs")
        return np.eye(o)[labels]

    def _W(self, theta):
        return theta.reshape(self.num_outputs, self.feature_dim)

    def _residuals(self, theta, X, Y):
        return X @ self._W(theta).T - Y

    def losses(self, theta, X, Y):
        R = self._residuals(theta, X, Y)
        return 0.5 * np.sum(R * R, axis=1)

    def grad_mean(self, theta, X, Y):
        R = self._residuals(theta, X, Y)
        return (R.T @ X).ravel() / len(X)

    def grad_one(self, theta, x, y):
        r = self._W(theta) @ x - y
        return np.outer(r, x).ravel()

    def grads(self, theta, X, Y):
        R = self._residuals(theta, X, Y)
        return (R[:, :, None] * X[:, None, :]).reshape(len(X), -1)

    def grad_norms(self, theta, X, Y):
        R = self._residuals(theta, X, Y)
        return np.linalg.norm(R, axis=1) * np.linalg.norm(X, axis=1)

    def grad_dots(self, theta, X, Y, u):
        R = self._residuals(theta, X, Y)
        return np.sum(R * (X @ self._W(u).T), axis=1)

    def init_params(self, gen, scale: float = 0.01):
        return scale * gen.standard_normal(self.dim)


class LogisticMulticlass(LossModel):
    """Softmax regression without bias; ``theta`` is ``W`` of shape ``(C, d)``."""

    kind = "logistic"
    convex = True

    def __init__(self, feature_dim: int, num_classes: int):
        super().__init__(feature_dim)
        if num_classes < 2:
            raise DimensionError("num_classes must be at least 2")
        self.num_classes = int(num_classes)

    @property
    def dim(self) -> int:
        return self.num_classes * self.feature_dim

    def to_dict(self) -> dict:
        return {"kind": self.kind, "feature_dim": self.feature_dim, "num_classes": self.num_classes}

    def prepare_labels(self, labels, targets):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and labels.max() >= self.num_classes:
            raise DimensionError(f"label {labels.max()} outside [0, {self.num_classes})")
        return labels

    def _W(self, theta):
        return theta.reshape(self.num_classes, self.feature_dim)

    def _delta(self, theta, X, Y):
        P = _softmax_rows(X @ self._W(theta).T)
        P[np.arange(len(Y)), Y] -= 1.0
        return P

    def losses(self, theta, X, Y):
        Z = X @ self._W(theta).T
        return np.maximum(_logsumexp_rows(Z) - Z[np.arange(len(Y)), Y], 0.0)

    def grad_mean(self, theta, X, Y):
        return (self._delta(theta, X, Y).T @ X).ravel() / len(X)

    def grad_one(self, theta, x, y):
        z = self._W(theta) @ x
        e = np.exp(z - z.max())
        p = e / e.sum()
        p[y] -= 1.0
        return np.outer(p, x).ravel()

    def grads(self, theta, X, Y):
        P = self._delta(theta, X, Y)
        return (P[:, :, None] * X[:, None, :]).reshape(len(X), -1)

    def grad_norms(self, theta, X, Y):
        P = self._delta(theta, X, Y)
        return np.linalg.norm(P, axis=1) * np.linalg.norm(X, axis=1)

    def grad_dots(self, theta, X, Y, u):
        P = self._delta(theta, X, Y)
        return np.sum(P * (X @ self._W(u).T), axis=1)

    def moments(self, theta, X, Y):
        P = self._delta(theta, X, Y)
        g = (P.T @ X).ravel() / len(X)
        sq = np.einsum("ij,ij->i", P, P) * np.einsum("ij,ij->i", X, X)
        return g, sq, lambda u: np.einsum("ij,ij->i", P, X @ self._W(u).T)


class MLP(LossModel):
    """One tanh hidden layer of width ``H`` with softmax cross-entropy.

    ``theta = [W1 (H x d), b1 (H), W2 (C x H), b2 (C)]`` flattened in that order.
    """

    kind = "mlp"
    convex = False

    def __init__(self, feature_dim: int, num_classes: int, hidden: int = 32):
        super().__init__(feature_dim)
        if num_classes < 2 or hidden < 1:
            raise DimensionError("MLP needs num_classes >= 2 and hidden >= 1")
        self.num_classes = int(num_classes)
        self.hidden = int(hidden)
        H, d, C = self.hidden, self.feature_dim, self.num_classes
        self._cuts = np.cumsum([H * d, H, C * H, C])

    @property
    def dim(self) -> int:
        return int(self._cuts[-1])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "feature_dim": self.feature_dim, "num_classes": self.num_classes, "hidden": self.hidden}

    prepare_labels = LogisticMulticlass.prepare_labels

    def unpack(self, theta):
        H, d, C = self.hidden, self.feature_dim, self.num_classes
        a, b, c, _ = self._cuts
        return theta[:a].reshape(H, d), theta[a:b], theta[b:c].reshape(C, H), theta[c:]

    def init_params(self, gen, scale: float = 1.0):
        H, d, C = self.hidden, self.feature_dim, self.num_classes
        W1 = gen.standard_normal((H, d)) * (scale / math.sqrt(d))
        W2 = gen.standard_normal((C, H)) * (scale / math.sqrt(H))
        return np.concatenate([W1.ravel(), np.zeros(H), W2.ravel(), np.zeros(C)])

    def _forward(self, theta, X, Y):
        W1, b1, W2, b2 = self.unpack(theta)
        Hh = np.tanh(X @ W1.T + b1)
        P = _softmax_rows(Hh @ W2.T + b2)
        P[np.arange(len(Y)), Y] -= 1.0
        D1 = (P @ W2) * (1.0 - Hh * Hh)
        return Hh, P, D1

    def losses(self, theta, X, Y):
        W1, b1, W2, b2 = self.unpack(theta)
        Z = np.tanh(X @ W1.T + b1) @ W2.T + b2
        return np.maximum(_logsumexp_rows(Z) - Z[np.arange(len(Y)), Y], 0.0)

    def grad_mean(self, theta, X, Y):
        Hh, P, D1 = self._forward(theta, X, Y)
        n = len(X)
        return np.concatenate([
            (D1.T @ X).ravel(), D1.sum(axis=0), (P.T @ Hh).ravel(), P.sum(axis=0)
        ]) / n

    def grad_one(self, theta, x, y):
        W1, b1, W2, b2 = self.unpack(theta)
        h = np.tanh(W1 @ x + b1)
        z = W2 @ h + b2
        e = np.exp(z - z.max())
        p = e / e.sum()
        p[y] -= 1.0
        d1 = (p @ W2) * (1.0 - h * h)
        return np.concatenate([np.outer(d1, x).ravel(), d1, np.outer(p, h).ravel(), p])

    def grads(self, theta, X, Y):
        Hh, P, D1 = self._forward(theta, X, Y)
        n = len(X)
        return np.concatenate([
            (D1[:, :, None] * X[:, None, :]).reshape(n, -1), D1,
            (P[:, :, None] * Hh[:, None, :]).reshape(n, -1), P,
        ], axis=1)

    def grad_norms(self, theta, X, Y):
        Hh, P, D1 = self._forward(theta, X, Y)
        sq = np.sum(D1 * D1, 1) * (np.sum(X * X, 1) + 1.0) + np.sum(P * P, 1) * (np.sum(Hh * Hh, 1) + 1.0)
        return np.sqrt(sq)

    def grad_dots(self, theta, X, Y, u):
        Hh, P, D1 = self._forward(theta, X, Y)
        U1, c1, U2, c2 = self.unpack(u)
        return np.sum(D1 * (X @ U1.T + c1), 1) + np.sum(P * (Hh @ U2.T + c2), 1)


def model_from_dict(d: dict) -> LossModel:
    kind = d["kind"]
    args = {k: v for k, v in d.items() if k != "kind"}
    table = {"least_squares": LeastSquares, "logistic": LogisticMulticlass, "mlp": MLP}
    if kind not in table:
        raise ValueError(f"unknown model kind {kind!r}")
    return table[kind](**args)


# module-level conveniences mirroring the method surface


def loss(model: LossModel, theta, z: Sample) -> float:
    return model.loss(theta, z)


def grad(model: LossModel, theta, z: Sample) -> np.ndarray:
    return model.grad(theta, z)


def batch_loss(model: LossModel, theta, data) -> float:
    return model.batch_loss(theta, data)


def batch_grad(model: LossModel, theta, data) -> np.ndarray:
    return model.batch_grad(theta, data)


# --- gradient statistics -----------------------------------------------------


@dataclass
class GradStats:
    """Monte Carlo summary of a mean gradient over ``n`` i.i.d. samples."""

    mean: np.ndarray
    norm: float
    norm_se: float
    trace_cov: float
    n: int


def gradient_stats(model: LossModel, theta, X, Y) -> GradStats:
    """Mean gradient, its norm and the delta-method standard error of the norm.

    ``trace_cov`` is the trace of the per-sample gradient covariance, so
    ``sqrt(trace_cov / n)`` is the RMS error of the mean gradient vector.
    """
    n = len(X)
    g, sq, dots = model.moments(theta, X, Y)
    nrm = float(np.linalg.norm(g))
    trace_cov = max(float(np.mean(sq)) - nrm**2, 0.0) * n / max(n - 1, 1)
    if nrm > 0 and n > 1:
        s = dots(g / nrm)
        se = float(np.std(s, ddof=1) / math.sqrt(n))
    else:
        se = math.sqrt(trace_cov / n)
    return GradStats(g, nrm, se, trace_cov, n)


# --- constants ---------------------------------------------------------------


@dataclass
class ConstantEstimates:
    L_hat: float
    beta: float
    sigma_hat: float
    mu_hat: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("L_hat", "beta", "sigma_hat", "mu_hat"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")

    def to_dict(self) -> dict:
        return {"L_hat": self.L_hat, "beta": self.beta, "sigma_hat": self.sigma_hat, "mu_hat": self.mu_hat, "meta": dict(self.meta)}


def _power_abs_max(matvec, dim: int, gen: np.random.Generator, iters: int = 40) -> float:
    v = gen.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        lam = nw
        v = w / nw
    return float(lam)


def smoothness_constant(
    model: LossModel,
    data=None,
    thetas: Sequence[np.ndarray] | None = None,
    seed: int = 0,
    num_points: int = 6,
    num_samples: int = 12,
    iters: int = 40,
    safety: float = DEFAULT_BETA_SAFETY,
) -> float:
    """Per-sample smoothness constant.

    Certified for the convex families under features in the unit ball. For
    the MLP it is ``safety`` times the largest per-sample Hessian spectral norm
    found by power iteration at probe parameters and samples.
    """
    if isinstance(model, LeastSquares):
        return 1.0
    if isinstance(model, LogisticMulticlass):
        return 0.5
    if data is None:
        raise ValueError("estimating an MLP smoothness constant needs data")
    gen = np.random.default_rng(seed)
    X, Y = model.prepare(data)
    if thetas is None or len(thetas) == 0:
        thetas = [model.init_params(gen) for _ in range(num_points)]
    best = 0.0
    for theta in thetas:
        theta = model.check_theta(theta)
        picks = gen.choice(len(X), size=min(num_samples, len(X)), replace=False)
        for j in picks:
            xj, yj = X[j : j + 1], Y[j : j + 1]
            lam = _power_abs_max(lambda v: model.hvp(theta, v, xj, yj), model.dim, gen, iters)
            best = max(best, lam)
    return safety * best if best > 0 else 1e-12


def min_curvature(model: LossModel, theta, X, Y, seed: int = 0) -> float:
    """Smallest Hessian eigenvalue of the mean loss at ``theta``."""
    d = model.dim
    op = LinearOperator((d, d), matvec=lambda v: model.hvp(theta, np.ravel(v), X, Y), dtype=np.float64)
    v0 = np.random.default_rng(seed).standard_normal(d)
    if d > 60:
        try:
            vals = eigsh(op, k=1, which="SA", v0=v0, tol=1e-6, maxiter=20 * d, return_eigenvectors=False)
            return float(vals[0])
        except ArpackNoConvergence:
            pass
    Hm = np.column_stack([model.hvp(theta, e, X, Y) for e in np.eye(d)])
    return float(np.linalg.eigvalsh(0.5 * (Hm + Hm.T))[0])


def curvature_floor(
    model: LossModel,
    thetas: Iterable[np.ndarray],
    datasets: Iterable,
    safety: float = DEFAULT_MU_SAFETY,
) -> float:
    """``safety * max(0, -lambda_min)`` over probe parameters and client risks."""
    if model.convex:
        return 0.0
    prepared = [model.prepare(ds) for ds in datasets]
    worst = 0.0
    for theta in thetas:
        for X, Y in prepared:
            worst = max(worst, -min_curvature(model, theta, X, Y))
    return safety * worst


def _subsample(thetas: list[np.ndarray], k: int) -> list[np.ndarray]:
    if len(thetas) <= k:
        return thetas
    idx = np.unique(np.linspace(0, len(thetas) - 1, k).round().astype(int))
    return [thetas[i] for i in idx]


def estimate_constants(
    model: LossModel,
    trajectories: Sequence,
    oracle,
    fed: FederatedDataset | None = None,
    safety: float = DEFAULT_L_SAFETY,
    max_iterates: int = 12,
    curvature: bool = True,
    seed: int = 0,
) -> ConstantEstimates:
    """Lipschitz, smoothness, variance and curvature constants along trajectories.

    ``L_hat`` is ``safety`` times the largest per-sample gradient norm over the
    visited server models, evaluated on the oracle set and on the training
    clients; for logistic regression it is clipped at the analytic cap sqrt(2).
    ``sigma_hat`` is the largest per-client RMS deviation of per-sample
    gradients from the client mean gradient at the probed iterates.
    """
    if not trajectories:
        raise ValueError("at least one trajectory is required")
    iterates: list[np.ndarray] = []
    for rec in trajectories:
        thetas = rec.thetas if hasattr(rec, "thetas") else rec
        iterates.extend(_subsample([np.asarray(t) for t in thetas], max_iterates))
    Xo, Yo = model.prepare(oracle)
    clients = fed.clients if fed is not None else [oracle]
    prepared = [model.prepare(c) for c in clients]

    gmax = 0.0
    sigma = 0.0
    for theta in iterates:
        gmax = max(gmax, float(np.max(model.grad_norms(theta, Xo, Yo))))
        for X, Y in prepared:
            G = model.grads(theta, X, Y)
            gmax = max(gmax, float(np.max(np.linalg.norm(G, axis=1))))
            dev = G - G.mean(axis=0)
            sigma = max(sigma, float(np.sqrt(np.mean(np.sum(dev * dev, axis=1)))))
    L_hat = safety * gmax
    capped = False
    if isinstance(model, LogisticMulticlass) and L_hat > LOGISTIC_GRAD_CAP:
        L_hat, capped = LOGISTIC_GRAD_CAP, True
    probe = _subsample(iterates, 4)
    beta = smoothness_constant(model, oracle, probe, seed=seed)
    mu = 0.0
    if curvature and not model.convex:
        mu = curvature_floor(model, probe, clients)
    meta = {"L_safety": safety, "L_capped": capped, "iterates_probed": len(iterates), "observed_grad_max": gmax}
    if not model.convex:
        meta.update(beta_safety=DEFAULT_BETA_SAFETY, mu_safety=DEFAULT_MU_SAFETY)
    return ConstantEstimates(L_hat=L_hat, beta=beta, sigma_hat=sigma, mu_hat=mu, meta=meta)


# --- proximal step -----------------------------------------------------------


def prox_residual(model: LossModel, theta, anchor, eta: float, X, Y) -> float:
    return float(np.linalg.norm(model.grad_mean(theta, X, Y) + (theta - anchor) / eta))


def _prox_least_squares(model: LeastSquares, anchor, eta, X, Y, tol):
    n, d = X.shape
    M = X.T @ X / n + np.eye(d) / eta
    A = model._W(anchor)
    rhs = X.T @ Y / n + A.T / eta
    Wt = np.linalg.solve(M, rhs)
    theta = Wt.T.ravel()
    res = prox_residual(model, theta, anchor, eta, X, Y)
    it = 0
    # iterative refinement absorbs conditioning losses
    while res > tol and it < 5:
        r = (model.grad_mean(theta, X, Y) + (theta - anchor) / eta).reshape(model.num_outputs, d)
        theta = theta - np.linalg.solve(M, r.T).T.ravel()
        res = prox_residual(model, theta, anchor, eta, X, Y)
        it += 1
    if res > tol:
        raise ProxConvergenceError(res, it + 1, tol)
    return theta, res, it + 1


def prox_solve(
    model: LossModel,
    anchor,
    eta: float,
    data,
    tol: float | None = None,
    max_iter: int = 10_000,
    beta: float | None = None,
    return_info: bool = False,
):
    """``argmin_theta R_S(theta) + ||theta - anchor||^2 / (2 eta)``.

    Closed form for least squares; otherwise gradient descent with Armijo
    backtracking, warm-started at the anchor. Stops once the first-order
    residual is at most ``tol``.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    anchor = model.check_theta(anchor)
    X, Y = data if isinstance(data, tuple) else model.prepare(data)
    if isinstance(model, LeastSquares):
        tol = 1e-10 if tol is None else tol
        theta, res, it = _prox_least_squares(model, anchor, eta, X, Y, tol)
    else:
        tol = 1e-8 if tol is None else tol
        theta, res, it = _prox_gd(model, anchor, eta, X, Y, tol, max_iter, beta)
    check_finite(theta, "prox solution")
    if return_info:
        return theta, {"residual": res, "iterations": it}
    return theta


def _prox_gd(model, anchor, eta, X, Y, tol, max_iter, beta):
    if beta is None:
        beta = 0.5 if isinstance(model, LogisticMulticlass) else 1.0
    inv = 1.0 / eta

    def objective(th):
        diff = th - anchor
        return float(np.mean(model.losses(th, X, Y))) + 0.5 * inv * float(diff @ diff)

    theta = anchor.copy()
    g = model.grad_mean(theta, X, Y)
    f = objective(theta)
    step = 1.0 / (beta + inv)
    for it in range(max_iter + 1):
        gf = g + (theta - anchor) * inv
        res = float(np.linalg.norm(gf))
        if res <= tol:
            return theta, res, it
        if it == max_iter:
            break
        gsq = res * res
        slack = 4e-16 * max(1.0, abs(f))
        while True:
            cand = theta - step * gf
            fc = objective(cand)
            if fc <= f - 0.5 * step * gsq + slack:
                break
            step *= 0.5
            if step < 1e-20:
                raise ProxConvergenceError(res, it, tol)
        theta, f = cand, fc
        g = model.grad_mean(theta, X, Y)
        step = min(step * 1.5, eta)
    raise ProxConvergenceError(res, max_iter, tol)
