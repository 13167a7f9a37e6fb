"""Interaction matrices for the splitting dynamics.

U is the epsilon-parameterized doubly stochastic mixing matrix over the M
selected clients; P[k] couples visible and invisible submodels in a
(1+m)M x (1+m)M block matrix; Phi(k,0) is the ordered product whose
contraction toward the rank-one averaging matrix gates every schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ScheduleValidationError

PSD_TOL = 1e-10


@dataclass(frozen=True)
class MixMatrixU:
    M: int
    epsilon: float
    entries: np.ndarray


@dataclass(frozen=True)
class StepWeights:
    """Per-client, per-invisible-index weights a_{i,n}[k].

    gamma has shape (M, m); rule selects the decay:
      constant  -> gamma
      harmonic  -> gamma / (k+1)
      inv_sqrt  -> gamma / sqrt(k+1)
    All rules are positive (where gamma > 0) and non-increasing in k, and
    harmonic satisfies a[k] <= 2 a[2k].
    """

    gamma: np.ndarray
    rule: str = "harmonic"

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gamma, dtype=np.float64))
        if np.any(g < 0):
            raise ScheduleValidationError("step weights must be nonnegative")
        if self.rule not in ("constant", "harmonic", "inv_sqrt"):
            raise ScheduleValidationError(f"unknown step-weight rule {self.rule!r}")
        object.__setattr__(self, "gamma", g)

    @property
    def M(self) -> int:
        return self.gamma.shape[0]

    @property
    def m(self) -> int:
        return self.gamma.shape[1]

    def at(self, k: int) -> np.ndarray:
        if self.rule == "constant":
            return self.gamma.copy()
        if self.rule == "harmonic":
            return self.gamma / (k + 1)
        return self.gamma / np.sqrt(k + 1)

    def a_max(self, k: int) -> float:
        """max_i a_{i,1}[k]; controls the shrinking-interval width."""
        return float(np.max(self.at(k)[:, 0]))

    def validate_sum_condition(self, u: MixMatrixU) -> None:
        """sum_n max_i a_{i,n}[0] must stay below lambda_min/(1+lambda_min)."""
        total = float(np.sum(np.max(self.gamma, axis=0)))
        lam_min = lambda_min_U(u)
        cap = lam_min / (1.0 + lam_min) if lam_min > 0 else 0.0
        if total > 0 and total >= cap:
            raise ScheduleValidationError(
                f"sum of max step weights {total:.6g} violates the bound "
                f"lambda_min/(1+lambda_min) = {cap:.6g}"
            )


@dataclass(frozen=True)
class TransitionP:
    entries: np.ndarray
    M: int
    m: int


def build_U(M: int, epsilon: float) -> MixMatrixU:
    """U_ij = eps/M off-diagonal, 1 - eps(M-1)/M on the diagonal."""
    if M < 1:
        raise ConfigError("need M >= 1")
    hi = M / (M - 1) if M > 1 else float("inf")
    if not 0 < epsilon < hi:
        raise ConfigError(f"epsilon must lie in (0, {hi:.6g}), got {epsilon}")
    U = np.full((M, M), epsilon / M)
    np.fill_diagonal(U, 1.0 - epsilon * (M - 1) / M)
    return MixMatrixU(M=M, epsilon=epsilon, entries=U)


def lambda2_U(u: MixMatrixU) -> float:
    """Second-largest eigenvalue magnitude (the contraction factor on 1-perp)."""
    eigs = np.linalg.eigvalsh(u.entries)
    mags = np.sort(np.abs(eigs))[::-1]
    return float(mags[1]) if len(mags) > 1 else 0.0


def lambda_min_U(u: MixMatrixU) -> float:
    """Smallest eigenvalue (by value); gates the step-weight budget."""
    return float(np.min(np.linalg.eigvalsh(u.entries)))


def build_P(u: MixMatrixU, weights_k: np.ndarray, m: int) -> TransitionP:
    """Block transition matrix at one round.

    Layout: first M rows are visible submodels, then m blocks of M invisible
    rows; block (0,n) and (n,0) carry A_n = diag(a_{i,n}), block (n,n) is
    I - A_n, and the top-left block is U - sum_n A_n.
    Raises when the step-weight sum condition fails (a = 0 is allowed).
    """
    M = u.M
    weights_k = np.atleast_2d(np.asarray(weights_k, dtype=np.float64))
    if weights_k.shape != (M, m):
        raise ConfigError(f"weights must have shape ({M}, {m})")
    total = float(np.sum(np.max(weights_k, axis=0)))
    lam_min = lambda_min_U(u)
    cap = lam_min / (1.0 + lam_min) if lam_min > 0 else 0.0
    if total > 0 and total >= cap:
        raise ScheduleValidationError(
            f"sum of max step weights {total:.6g} violates the bound "
            f"lambda_min/(1+lambda_min) = {cap:.6g}"
        )
    n = (1 + m) * M
    P = np.zeros((n, n))
    A_sum = np.zeros((M, M))
    for j in range(m):
        A = np.diag(weights_k[:, j])
        A_sum += A
        P[0:M, (1 + j) * M : (2 + j) * M] = A
        P[(1 + j) * M : (2 + j) * M, 0:M] = A
        P[(1 + j) * M : (2 + j) * M, (1 + j) * M : (2 + j) * M] = np.eye(M) - A
    P[0:M, 0:M] = u.entries - A_sum
    return TransitionP(entries=P, M=M, m=m)


def is_doubly_stochastic(mat: np.ndarray, tol: float = 1e-10) -> bool:
    return bool(
        np.all(np.abs(mat.sum(axis=0) - 1.0) <= tol)
        and np.all(np.abs(mat.sum(axis=1) - 1.0) <= tol)
    )


def is_psd(mat: np.ndarray) -> bool:
    scale = max(1.0, float(np.max(np.abs(mat))))
    return bool(np.min(np.linalg.eigvalsh(0.5 * (mat + mat.T))) >= -PSD_TOL * scale)


def phi_product(ps: list[TransitionP] | list[np.ndarray]) -> np.ndarray:
    """Ordered product P[k] ... P[0] of the round transitions."""
    mats = [p.entries if isinstance(p, TransitionP) else np.asarray(p) for p in ps]
    if not mats:
        raise ConfigError("need at least one transition matrix")
    n = mats[0].shape[0]
    for mat in mats:
        if mat.shape != (n, n):
            raise ConfigError("transition matrices must share dimensions")
    phi = mats[0]
    for mat in mats[1:]:
        phi = mat @ phi
    return phi


def phi_deviation(phi: np.ndarray) -> float:
    """Max entrywise distance from the rank-one averaging matrix."""
    n = phi.shape[0]
    return float(np.max(np.abs(phi - 1.0 / n)))


def contraction_probe(
    u: MixMatrixU, weights: StepWeights, horizon: int
) -> tuple[np.ndarray, float]:
    """Deviation curve of Phi(k,0) for k = 0..horizon-1 and the fitted
    per-step contraction factor over the probe."""
    devs = np.empty(horizon)
    phi = None
    for k in range(horizon):
        P = build_P(u, weights.at(k), weights.m).entries
        phi = P if phi is None else P @ phi
        devs[k] = phi_deviation(phi)
    if horizon >= 2 and devs[0] > 0 and devs[-1] > 0:
        factor = float((devs[-1] / devs[0]) ** (1.0 / (horizon - 1)))
    else:
        factor = 0.0
    return devs, factor


def fit_contraction_constant(devs: np.ndarray, lam: float) -> float:
    """Smallest C with dev(k) <= C lam^{k+1} over the probed range."""
    if not 0 < lam < 1:
        raise ConfigError("lambda must lie in (0, 1)")
    ks = np.arange(1, len(devs) + 1)
    return float(np.max(devs / lam**ks)) if len(devs) else 0.0
