"""Multi-output multi-fidelity GP with a causal prior (MF-CGP).

Covariance between output ``m`` at ``(x, s)`` and output ``m'`` at
``(x', s')``::

    (k_in(x, x') k_fid(s, s') + prior_scale * sig_m(x, s) sig_m'(x', s')) * B[m, m']

where ``sig`` is the causal-model std, ``k_in`` and ``k_fid`` are RBF kernels
and ``B = L L^T + diag(exp(a))``. Configurations are normalized to the unit
cube before entering ``k_in``; the fidelity is used as is.

Training targets are stored flattened point-major (index ``i * M + m``).
All linear algebra runs in the (optionally) standardized output space; public
methods return values in the original units.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist

from rescue.causal import AgnosticPrior, CausalModel
from rescue.core import STD_FLOOR, ConfigSpace, Dataset, DomainError, StateError

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1
MAX_JITTER = 1e-2
EIG_FLOOR = 1e-10
LOG_LS_BOUNDS = (np.log(1e-2), np.log(1e2))
LOG_NOISE_BOUNDS = (np.log(1e-8), np.log(1.0))
PRIOR_SCALE_BOUNDS = (0.0, 10.0)
COREG_FACTOR_BOUNDS = (-10.0, 10.0)
COREG_LOG_DIAG_BOUNDS = (np.log(1e-6), np.log(1e4))


class ConditioningError(ArithmeticError):
    """The Gram matrix stayed indefinite after jitter escalation."""


@dataclass
class KernelSpec:
    """Hyperparameters of the composite kernel."""

    input_lengthscales: np.ndarray
    fidelity_lengthscale: float = 0.5
    coreg_factor: np.ndarray | None = None
    coreg_log_diag: np.ndarray | None = None
    prior_scale: float = 1.0
    noise_variance: float = 1e-4
    jitter: float = 1e-6
    n_outputs: int = 1

    def __post_init__(self):
        self.input_lengthscales = np.atleast_1d(np.asarray(self.input_lengthscales, dtype=float))
        M = self.n_outputs
        rank = min(M, 2)
        if self.coreg_factor is None:
            self.coreg_factor = np.zeros((M, rank))
        if self.coreg_log_diag is None:
            self.coreg_log_diag = np.zeros(M)
        self.coreg_factor = np.asarray(self.coreg_factor, dtype=float).reshape(M, -1)
        self.coreg_log_diag = np.asarray(self.coreg_log_diag, dtype=float).reshape(M)
        if np.any(self.input_lengthscales <= 0) or self.fidelity_lengthscale <= 0:
            raise DomainError("lengthscales must be positive")
        if self.noise_variance <= 0 or self.prior_scale < 0:
            raise DomainError("noise must be positive and prior_scale nonnegative")

    @classmethod
    def default(cls, d: int, M: int, prior_scale: float = 1.0, noise_variance: float = 1e-4) -> "KernelSpec":
        return cls(np.full(d, 0.5), 0.5, prior_scale=prior_scale, noise_variance=noise_variance, n_outputs=M)

    @property
    def B(self) -> np.ndarray:
        L = self.coreg_factor
        return L @ L.T + np.diag(np.exp(self.coreg_log_diag))

    def to_dict(self) -> dict:
        return {
            "input_lengthscales": self.input_lengthscales.tolist(),
            "fidelity_lengthscale": self.fidelity_lengthscale,
            "coreg_factor": self.coreg_factor.tolist(),
            "coreg_log_diag": self.coreg_log_diag.tolist(),
            "prior_scale": self.prior_scale,
            "noise_variance": self.noise_variance,
            "jitter": self.jitter,
            "n_outputs": self.n_outputs,
        }

    @classmethod
    def from_dict(cls, d) -> "KernelSpec":
        return cls(**d)

    # flat parameter vector for hyperparameter search
    def pack(self, with_prior_scale: bool) -> np.ndarray:
        parts = [np.log(self.input_lengthscales), [np.log(self.fidelity_lengthscale)],
                 [np.log(self.noise_variance)], self.coreg_factor.ravel(), self.coreg_log_diag]
        if with_prior_scale:
            parts.append([self.prior_scale])
        return np.concatenate([np.asarray(p, float) for p in parts])

    def unpack(self, theta: np.ndarray, with_prior_scale: bool) -> "KernelSpec":
        d = self.input_lengthscales.size
        M, r = self.coreg_factor.shape
        k = 0
        ls = np.exp(theta[k:k + d]); k += d
        fls = float(np.exp(theta[k])); k += 1
        noise = float(np.exp(theta[k])); k += 1
        L = theta[k:k + M * r].reshape(M, r); k += M * r
        a = theta[k:k + M]; k += M
        ps = float(theta[k]) if with_prior_scale else self.prior_scale
        return KernelSpec(ls, fls, L, a, ps, noise, self.jitter, self.n_outputs)

    def bounds(self, with_prior_scale: bool) -> list[tuple[float, float]]:
        d = self.input_lengthscales.size
        M, r = self.coreg_factor.shape
        b = [LOG_LS_BOUNDS] * (d + 1) + [LOG_NOISE_BOUNDS]
        b += [COREG_FACTOR_BOUNDS] * (M * r) + [COREG_LOG_DIAG_BOUNDS] * M
        if with_prior_scale:
            b.append(PRIOR_SCALE_BOUNDS)
        return b


def _rbf(A: np.ndarray, B: np.ndarray, ls) -> np.ndarray:
    return np.exp(-0.5 * cdist(A / ls, B / ls, "sqeuclidean"))


def kernel_eval(spec: KernelSpec, a, b, sig_a: float = 0.0, sig_b: float = 0.0) -> float:
    """Kernel between ``a = (x, s, m)`` and ``b = (x', s', m')``.

    ``x`` is in normalized coordinates; ``sig_a``/``sig_b`` are the causal
    std of output ``m`` at ``a`` and of ``m'`` at ``b``.
    """
    (x1, s1, m1), (x2, s2, m2) = a, b
    M = spec.n_outputs
    if not (0 <= m1 < M and 0 <= m2 < M):
        raise DomainError("output index out of range")
    x1 = np.atleast_1d(np.asarray(x1, float)) / spec.input_lengthscales
    x2 = np.atleast_1d(np.asarray(x2, float)) / spec.input_lengthscales
    k_in = np.exp(-0.5 * np.sum((x1 - x2) ** 2))
    k_fid = np.exp(-0.5 * ((s1 - s2) / spec.fidelity_lengthscale) ** 2)
    return float((k_in * k_fid + spec.prior_scale * sig_a * sig_b) * spec.B[m1, m2])


def gram(spec: KernelSpec, X1n, S1, sig1, X2n, S2, sig2) -> np.ndarray:
    """Flattened cross-covariance of shape ``(n1 * M, n2 * M)``."""
    kx = _rbf(X1n, X2n, spec.input_lengthscales) * _rbf(
        np.asarray(S1, float)[:, None], np.asarray(S2, float)[:, None], spec.fidelity_lengthscale)
    B = spec.B
    G = (kx[:, None, :, None] + spec.prior_scale * sig1[:, :, None, None] * sig2[None, None, :, :]) * B[None, :, None, :]
    n1, M, n2, _ = G.shape
    return G.reshape(n1 * M, n2 * M)


def _prior_block(spec: KernelSpec, sig: np.ndarray) -> np.ndarray:
    """Per-point ``M x M`` prior covariance blocks, shape ``(n, M, M)``."""
    B = spec.B
    return (1.0 + spec.prior_scale * sig[:, :, None] * sig[:, None, :]) * B[None]


def robust_cholesky(K: np.ndarray, diag: float, jitter: float):
    """Cholesky of ``K + (diag + jitter) I`` escalating jitter by 10x up to 1e-2."""
    n = K.shape[0]
    j = jitter
    while True:
        try:
            L = np.linalg.cholesky(K + (diag + j) * np.eye(n))
            return L, j
        except np.linalg.LinAlgError:
            if j >= MAX_JITTER:
                raise ConditioningError(f"Cholesky failed with jitter {j:g}") from None
            j = min(j * 10, MAX_JITTER)
            log.warning("Cholesky failed; escalating jitter to %g", j)


def _psd_cholesky(A: np.ndarray) -> np.ndarray:
    """Cholesky of a symmetric block with an eigenvalue floor."""
    A = 0.5 * (A + A.T)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(A)
        return np.linalg.cholesky((V * np.maximum(w, EIG_FLOOR)) @ V.T)


class MfcgpPosterior:
    """Exact GP posterior for ``M`` outputs over ``(x, s)``.

    Args:
        space: Configuration space used to normalize inputs.
        spec: Kernel hyperparameters (``spec.n_outputs == M``).
        prior: Object with ``estimate(X, S) -> (mean, std)``; the mean is the
            prior mean function and the std enters the kernel.
        X, S, Y: Training configurations (original units), fidelities and
            targets of shape ``(N, M)``. ``N`` may be zero.
        transform: Optional ``(means, stds)`` affine output standardization.
    """

    def __init__(self, space: ConfigSpace, spec: KernelSpec, prior, X, S, Y, transform=None):
        self.space = space
        self.spec = spec
        self.prior = prior
        self.M = spec.n_outputs
        self.X = np.asarray(X, dtype=float).reshape(-1, space.dims)
        self.S = np.asarray(S, dtype=float).reshape(-1)
        self.Y = np.asarray(Y, dtype=float).reshape(-1, self.M)
        if transform is None:
            transform = (np.zeros(self.M), np.ones(self.M))
        self.y_mean = np.asarray(transform[0], float)
        self.y_std = np.asarray(transform[1], float)
        self.N = len(self.X)
        self.Xn = space.normalize(self.X) if self.N else np.zeros((0, space.dims))
        self.mu0, self.sig = self._prior(self.X, self.S)
        self.targets = (self.Y - self.y_mean) / self.y_std
        self._factorize()

    # -- construction helpers
    def _prior(self, X, S):
        if len(X) == 0:
            return np.zeros((0, self.M)), np.zeros((0, self.M))
        mean, std = self.prior.estimate(X, S)
        if getattr(self.prior, "centered", False):
            return np.asarray(mean, float), np.asarray(std) / self.y_std
        return (np.asarray(mean) - self.y_mean) / self.y_std, np.asarray(std) / self.y_std

    def _factorize(self):
        n = self.N * self.M
        self.resid = (self.targets - self.mu0).ravel()
        if n == 0:
            self.chol = np.zeros((0, 0))
            self.alpha = np.zeros(0)
            self.w = np.zeros(0)
            self.jitter_used = self.spec.jitter
            return
        K = gram(self.spec, self.Xn, self.S, self.sig, self.Xn, self.S, self.sig)
        self.chol, self.jitter_used = robust_cholesky(K, self.spec.noise_variance, self.spec.jitter)
        self.w = linalg.solve_triangular(self.chol, self.resid, lower=True)
        self.alpha = linalg.solve_triangular(self.chol.T, self.w, lower=False)

    @property
    def noise_eff(self) -> float:
        return self.spec.noise_variance + self.jitter_used

    def log_marginal_likelihood(self) -> float:
        n = self.N * self.M
        if n == 0:
            return 0.0
        return float(-0.5 * self.resid @ self.alpha - np.sum(np.log(np.diag(self.chol))) - 0.5 * n * np.log(2 * np.pi))

    # -- queries (standardized space)
    def _features(self, Xq, Sq):
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        Sq = np.broadcast_to(np.asarray(Sq, dtype=float), (len(Xq),)).copy()
        Xn = self.space.normalize(Xq)
        mu0, sig = self._prior(Xq, Sq)
        return Xn, Sq, mu0, sig

    def _solve_cross(self, Xn, Sq, sig):
        """``V = L^{-1} k(train, q)``, shape ``(N M, n M)``."""
        if self.N == 0:
            return np.zeros((0, len(Xn) * self.M))
        Kq = gram(self.spec, self.Xn, self.S, self.sig, Xn, Sq, sig)
        return linalg.solve_triangular(self.chol, Kq, lower=True)

    def _posterior_std_space(self, Xq, Sq):
        Xn, Sq, mu0, sig = self._features(Xq, Sq)
        n = len(Xn)
        V = self._solve_cross(Xn, Sq, sig)
        mean = mu0 + (V.T @ self.w).reshape(n, self.M) if self.N else mu0.copy()
        prior = _prior_block(self.spec, sig)
        Vr = V.reshape(-1, n, self.M)
        cov = prior - np.einsum("kim,kin->imn", Vr, Vr)
        return mean, cov, (Xn, Sq, mu0, sig, V)

    def posterior(self, Xq, Sq):
        """Posterior means ``(n, M)`` and per-point covariance blocks ``(n, M, M)``."""
        mean, cov, _ = self._posterior_std_space(Xq, Sq)
        idx = np.arange(self.M)
        diag = cov[:, idx, idx]
        cov[:, idx, idx] = np.where(diag < 0, 0.0, diag)
        return mean * self.y_std + self.y_mean, cov * np.outer(self.y_std, self.y_std)

    def predict(self, Xq, Sq):
        """Posterior means and marginal stds, both ``(n, M)``."""
        mean, cov = self.posterior(Xq, Sq)
        return mean, np.sqrt(np.maximum(np.diagonal(cov, axis1=1, axis2=2), 0.0))

    def mean(self, Xq, Sq) -> np.ndarray:
        Xn, Sq, mu0, sig = self._features(Xq, Sq)
        if self.N == 0:
            return mu0 * self.y_std + self.y_mean
        Kq = gram(self.spec, self.Xn, self.S, self.sig, Xn, Sq, sig)
        return (mu0 + (Kq.T @ self.alpha).reshape(len(Xn), self.M)) * self.y_std + self.y_mean

    # -- fantasies
    def predictive_factors(self, Xc, Sc):
        """Cholesky factors of the noisy predictive blocks (standardized), ``(n, M, M)``,
        along with the intermediate quantities needed for cross covariances."""
        mean, cov, feats = self._posterior_std_space(Xc, Sc)
        Lc = np.stack([_psd_cholesky(c + self.noise_eff * np.eye(self.M)) for c in cov])
        return mean, Lc, feats

    def cross_covariance(self, feats_a, feats_b) -> np.ndarray:
        """Posterior covariance between two query sets (standardized), ``(na, M, nb, M)``."""
        Xa, Sa, _, siga, Va = feats_a
        Xb, Sb, _, sigb, Vb = feats_b
        K = gram(self.spec, Xa, Sa, siga, Xb, Sb, sigb)
        if self.N:
            K = K - Va.T @ Vb
        return K.reshape(len(Xa), self.M, len(Xb), self.M)

    def condition_on(self, x, s: float, y) -> "MfcgpPosterior":
        """Posterior after appending ``(x, s, y)``, via a block Cholesky extension."""
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        x = np.atleast_2d(np.asarray(x, float))
        Xn, Sq, mu0, sig = self._features(x, s)
        new.X = np.vstack([self.X, x])
        new.S = np.append(self.S, Sq)
        new.Y = np.vstack([self.Y, np.asarray(y, float).reshape(1, self.M)])
        new.Xn = np.vstack([self.Xn, Xn])
        new.mu0 = np.vstack([self.mu0, mu0])
        new.sig = np.vstack([self.sig, sig])
        new.targets = (new.Y - self.y_mean) / self.y_std
        new.N = self.N + 1
        new.resid = (new.targets - new.mu0).ravel()
        k_cc = gram(self.spec, Xn, Sq, sig, Xn, Sq, sig) + self.noise_eff * np.eye(self.M)
        if self.N:
            k_bc = gram(self.spec, self.Xn, self.S, self.sig, Xn, Sq, sig)
            C = linalg.solve_triangular(self.chol, k_bc, lower=True).T
        else:
            C = np.zeros((self.M, 0))
        D = _psd_cholesky(k_cc - C @ C.T)
        n = self.N * self.M
        L = np.zeros((n + self.M, n + self.M))
        L[:n, :n] = self.chol
        L[n:, :n] = C
        L[n:, n:] = D
        new.chol = L
        new.w = linalg.solve_triangular(L, new.resid, lower=True)
        new.alpha = linalg.solve_triangular(L.T, new.w, lower=False)
        return new

    # -- persistence
    def to_snapshot(self) -> dict:
        prior = self.prior.to_dict() if isinstance(self.prior, CausalModel) else {"n_outputs": self.prior.n_outputs}
        return {
            "version": SNAPSHOT_VERSION,
            "spec": self.spec.to_dict(),
            "X": self.X.tolist(),
            "S": self.S.tolist(),
            "Y": self.Y.tolist(),
            "transform": [self.y_mean.tolist(), self.y_std.tolist()],
            "space": self.space.to_dict(),
            "prior_kind": "causal" if isinstance(self.prior, CausalModel) else "agnostic",
            "prior": prior,
        }

    @classmethod
    def from_snapshot(cls, snap) -> "MfcgpPosterior":
        if snap.get("version") != SNAPSHOT_VERSION:
            raise StateError(f"unsupported snapshot version {snap.get('version')}")
        space = ConfigSpace(np.asarray(snap["space"]["bounds"]), tuple(snap["space"]["names"]))
        if snap["prior_kind"] == "causal":
            prior = CausalModel.from_dict(snap["prior"], space)
        else:
            prior = AgnosticPrior(snap["prior"]["n_outputs"])
        return cls(space, KernelSpec.from_dict(snap["spec"]), prior, snap["X"], snap["S"], snap["Y"],
                   tuple(np.asarray(t) for t in snap["transform"]))


FantasyModel = MfcgpPosterior


def save_snapshot(model: MfcgpPosterior, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_snapshot(), fh, indent=1)


def load_snapshot(path) -> MfcgpPosterior:
    with open(path) as fh:
        return MfcgpPosterior.from_snapshot(json.load(fh))


def output_transform(Y) -> tuple[np.ndarray, np.ndarray]:
    Y = np.atleast_2d(np.asarray(Y, float))
    return Y.mean(axis=0), np.maximum(Y.std(axis=0), STD_FLOOR)


@dataclass
class HyperoptConfig:
    restarts: int = 8
    max_evals: int = 50
    seed: int = 0
    optimize_prior_scale: bool = True


def _random_start(spec: KernelSpec, rng: np.random.Generator, with_ps: bool) -> np.ndarray:
    d = spec.input_lengthscales.size
    M, r = spec.coreg_factor.shape
    parts = [rng.uniform(np.log(0.05), np.log(2.0), d + 1), rng.uniform(np.log(1e-6), np.log(1e-1), 1),
             rng.normal(0.0, 0.5, M * r), rng.uniform(np.log(0.1), np.log(2.0), M)]
    if with_ps:
        parts.append(rng.uniform(0.0, 2.0, 1))
    return np.concatenate(parts)


def optimize_hyperparameters(model: MfcgpPosterior, cfg: HyperoptConfig) -> KernelSpec:
    """Multi-start Powell search on the log marginal likelihood.

    The incumbent spec is always a candidate, so the returned spec never has
    a lower marginal likelihood than the starting one.
    """
    with_ps = cfg.optimize_prior_scale and bool(np.any(model.sig > 0))
    base = model.spec
    bounds = base.bounds(with_ps)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    n = model.N * model.M
    K_cache = {}

    def nlml(theta):
        theta = np.clip(theta, lo, hi)
        key = theta.tobytes()
        if key in K_cache:
            return K_cache[key]
        spec = base.unpack(theta, with_ps)
        K = gram(spec, model.Xn, model.S, model.sig, model.Xn, model.S, model.sig)
        try:
            L = np.linalg.cholesky(K + (spec.noise_variance + spec.jitter) * np.eye(n))
        except np.linalg.LinAlgError:
            val = 1e25
        else:
            a = linalg.cho_solve((L, True), model.resid)
            val = float(0.5 * model.resid @ a + np.sum(np.log(np.diag(L))) + 0.5 * n * np.log(2 * np.pi))
            if not np.isfinite(val):
                val = 1e25
        K_cache[key] = val
        return val

    rng = np.random.default_rng(cfg.seed)
    start0 = np.clip(base.pack(with_ps), lo, hi)
    best_theta, best_val = start0, nlml(start0)
    for k in range(cfg.restarts):
        x0 = start0 if k == 0 else np.clip(_random_start(base, rng, with_ps), lo, hi)
        res = optimize.minimize(nlml, x0, method="Powell", bounds=bounds,
                                options={"maxfev": cfg.max_evals, "xtol": 1e-3, "ftol": 1e-6})
        theta = np.clip(res.x, lo, hi)
        val = nlml(theta)
        if val < best_val:
            best_theta, best_val = theta, val
    return base.unpack(best_theta, with_ps)


def fit(dataset: Dataset, spec: KernelSpec, prior, space: ConfigSpace, hyperopt: bool = False,
        outputs: str = "y", standardize: bool = False, transform=None,
        hyperopt_cfg: HyperoptConfig | None = None) -> MfcgpPosterior:
    """Fit the MF-CGP on objectives (``outputs="y"``) or constraint metrics (``"h"``)."""
    if len(dataset) == 0:
        raise StateError("cannot fit on an empty dataset")
    X, S, Y, H, _ = dataset.arrays()
    T = Y if outputs == "y" else H
    if T.shape[1] != spec.n_outputs:
        raise DomainError(f"spec has {spec.n_outputs} outputs, data has {T.shape[1]}")
    if transform is None and standardize:
        transform = output_transform(T)
    model = MfcgpPosterior(space, spec, prior, X, S, T, transform)
    if hyperopt:
        new_spec = optimize_hyperparameters(model, hyperopt_cfg or HyperoptConfig())
        model = MfcgpPosterior(space, new_spec, prior, X, S, T, transform)
    return model


def prior_mean(model: MfcgpPosterior, x, s: float) -> np.ndarray:
    mean, _ = model.prior.estimate(np.atleast_2d(x), s)
    return mean[0]


def posterior(model: MfcgpPosterior, X, S):
    return model.posterior(X, S)


def fantasy_draws(M: int, n_fantasies: int, seed: int) -> np.ndarray:
    """Standard normal base draws shared by all candidates, ``(n_fantasies, M)``."""
    if n_fantasies < 1:
        raise DomainError("n_fantasies must be at least 1")
    return np.random.default_rng(seed).standard_normal((n_fantasies, M))


def fantasize(model: MfcgpPosterior, x, s: float, n_fantasies: int, seed: int = 0) -> list[MfcgpPosterior]:
    """Condition on ``n_fantasies`` draws from the noisy posterior predictive at ``(x, s)``."""
    z = fantasy_draws(model.M, n_fantasies, seed)
    mean, Lc, _ = model.predictive_factors(np.atleast_2d(x), s)
    ys = (mean[0] + z @ Lc[0].T) * model.y_std + model.y_mean
    return [model.condition_on(x, s, y) for y in ys]


@dataclass
class ConstraintPosterior:
    mean: np.ndarray
    std: np.ndarray


def constraint_posterior(model: MfcgpPosterior | None, X, s: float) -> ConstraintPosterior:
    """Marginal Gaussians of the constraint outputs; empty when there are none."""
    n = len(np.atleast_2d(X))
    if model is None:
        return ConstraintPosterior(np.zeros((n, 0)), np.zeros((n, 0)))
    mean, std = model.predict(X, s)
    return ConstraintPosterior(mean, std)
