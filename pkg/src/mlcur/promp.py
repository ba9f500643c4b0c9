"""Radial-basis movement primitives.

Trajectories are encoded as stacked per-dimension weight vectors obtained by
ridge regression onto row-normalized Gaussian basis functions over phase.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, TransformerMixin


class BasisError(ValueError):
    pass


def default_centers(n_basis: int) -> np.ndarray:
    """Uniform centers with one extra center beyond each end of [0, 1]."""
    if n_basis < 1:
        raise BasisError("n_basis must be positive")
    if n_basis == 1:
        return np.array([0.5])
    if n_basis < 4:
        return np.linspace(0.0, 1.0, n_basis)
    h = 1.0 / (n_basis - 3)
    return np.linspace(-h, 1.0 + h, n_basis)


@dataclass(frozen=True)
class BasisConfig:
    n_basis: int = 10
    centers: tuple = ()
    bandwidth: float = 0.0
    ridge: float = 1e-6

    def __post_init__(self):
        if self.n_basis < 1:
            raise BasisError("n_basis must be positive")
        if not self.centers:
            object.__setattr__(self, "centers", tuple(default_centers(self.n_basis).tolist()))
        c = np.asarray(self.centers, dtype=float)
        if c.shape != (self.n_basis,):
            raise BasisError(f"expected {self.n_basis} centers, got {c.size}")
        if not np.all(np.isfinite(c)) or np.any(np.diff(c) <= 0):
            raise BasisError("centers must be finite and strictly increasing")
        if self.bandwidth == 0.0:
            bw = float(c[1] - c[0]) if self.n_basis > 1 else 1.0
            object.__setattr__(self, "bandwidth", bw)
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise BasisError("bandwidth must be positive")
        if not (np.isfinite(self.ridge) and self.ridge >= 0):
            raise BasisError("ridge must be non-negative")

    def to_dict(self) -> dict:
        return {
            "n_basis": self.n_basis,
            "centers": list(self.centers),
            "bandwidth": self.bandwidth,
            "ridge": self.ridge,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisConfig":
        return cls(
            n_basis=int(d["n_basis"]),
            centers=tuple(float(x) for x in d.get("centers", ())),
            bandwidth=float(d.get("bandwidth", 0.0)),
            ridge=float(d.get("ridge", 1e-6)),
        )


@dataclass
class Trajectory:
    states: np.ndarray
    times: np.ndarray = field(default=None)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        T = self.states.shape[0]
        if T < 2:
            raise BasisError("a trajectory needs at least two samples")
        if self.times is None:
            self.times = np.linspace(0.0, 1.0, T)
        self.times = np.asarray(self.times, dtype=float)
        if self.times.shape != (T,):
            raise BasisError("times and states disagree in length")
        if self.times[0] != 0.0 or self.times[-1] != 1.0 or np.any(np.diff(self.times) <= 0):
            raise BasisError("times must increase monotonically from 0 to 1")


def build_basis(config: BasisConfig, times) -> np.ndarray:
    """Row-normalized Gaussian basis matrix, shape (T, n_basis)."""
    t = np.asarray(times, dtype=float).ravel()
    if t.size == 0:
        raise BasisError("times is empty")
    if not np.all(np.isfinite(t)):
        raise BasisError("times must be finite")
    centers = np.asarray(config.centers)
    d2 = (t[:, None] - centers[None, :]) ** 2
    log_phi = -d2 / (2.0 * config.bandwidth ** 2)
    # normalize in log space; far-from-center phases would otherwise underflow
    log_phi -= log_phi.max(axis=1, keepdims=True)
    phi = np.exp(log_phi)
    return phi / phi.sum(axis=1, keepdims=True)


def project_trajectory(traj: Trajectory, config: BasisConfig) -> np.ndarray:
    """Ridge-regress each state dimension onto the basis.

    Returns the weights stacked dimension by dimension, i.e. entry
    ``d * n_basis + k`` is basis ``k`` of state dimension ``d``.
    """
    phi = build_basis(config, traj.times)
    gram = phi.T @ phi + config.ridge * np.eye(config.n_basis)
    rhs = phi.T @ traj.states
    try:
        c, low = linalg.cho_factor(gram)
        w = linalg.cho_solve((c, low), rhs)
    except linalg.LinAlgError:
        raise BasisError(
            "normal matrix is singular; use a positive ridge or fewer basis functions"
        ) from None
    if config.ridge == 0 and np.linalg.cond(gram) > 1e13:
        raise BasisError("normal matrix is ill-conditioned; use a positive ridge")
    return w.T.ravel()


def reconstruct(omega, config: BasisConfig, times) -> Trajectory:
    omega = np.asarray(omega, dtype=float).ravel()
    if omega.size % config.n_basis:
        raise BasisError(
            f"weight vector of length {omega.size} is not a multiple of n_basis={config.n_basis}"
        )
    phi = build_basis(config, times)
    W = omega.reshape(-1, config.n_basis).T
    return Trajectory(phi @ W, np.asarray(times, dtype=float))


def reconstruct_states(omegas, config: BasisConfig, times) -> np.ndarray:
    """Batch decode: ``omegas`` (N, d*n_basis) -> states (N, T, d)."""
    omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
    if omegas.shape[1] % config.n_basis:
        raise BasisError("weight dimension is not a multiple of n_basis")
    phi = build_basis(config, times)
    W = omegas.reshape(omegas.shape[0], -1, config.n_basis)
    return np.einsum("tk,ndk->ntd", phi, W)


class ProMPEncoder(TransformerMixin, BaseEstimator):
    """Transformer from trajectories to primitive weights.

    Parameters
    ----------
    n_basis : int
        Number of Gaussian basis functions per state dimension.
    bandwidth : float or None
        Basis width in phase units; defaults to the center spacing.
    ridge : float
        Ridge regularizer of the regression.

    ``fit`` is stateless apart from recording the state dimension, since the
    basis does not depend on data.
    """

    def __init__(self, n_basis=10, bandwidth=None, ridge=1e-6):
        self.n_basis = n_basis
        self.bandwidth = bandwidth
        self.ridge = ridge

    @property
    def config(self) -> BasisConfig:
        return BasisConfig(self.n_basis, bandwidth=self.bandwidth or 0.0, ridge=self.ridge)

    def fit(self, X, y=None):
        trajs = [_as_trajectory(x) for x in X]
        dims = {t.states.shape[1] for t in trajs}
        if len(dims) != 1:
            raise BasisError("trajectories disagree in state dimension")
        self.n_state_dims_ = dims.pop()
        return self

    def transform(self, X):
        cfg = self.config
        return np.vstack([project_trajectory(_as_trajectory(x), cfg) for x in X])

    def inverse_transform(self, W, times=None):
        if times is None:
            times = np.linspace(0.0, 1.0, 100)
        return reconstruct_states(W, self.config, times)


def _as_trajectory(x) -> Trajectory:
    if isinstance(x, Trajectory):
        return x
    return Trajectory(np.asarray(x, dtype=float))
