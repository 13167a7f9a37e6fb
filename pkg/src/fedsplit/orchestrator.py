"""End-to-end training loops and their schedules.

Four modes share one skeleton: plain averaging (fedavg), averaging with
local Laplace noise on uploads (ldp), the splitting protocol (msp), and the
splitting protocol with dynamically quantized uploads (mspdq).  Every run is
a pure function of (config, seed): client sampling, gradient noise, split
draws and quantization each consume their own keyed stream.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .consensus import MSP, MSPDQ, run_consensus, state_from_splits
from .errors import ConfigError, ProtocolIntegrityError
from .problem import (
    ClientDataset,
    ProblemConstants,
    QuadraticClientLoss,
    global_optimum,
    make_client_datasets,
    make_quadratic_problem,
    problem_constants,
    stochastic_gradient,
)
from .quantizer import compute_pi_t, encoded_size
from .spectral import (
    StepWeights,
    build_U,
    contraction_probe,
    fit_contraction_constant,
    lambda2_U,
    lambda_min_U,
)
from .splitting import SplitRule, SplitState, split_model

MODES = ("fedavg", "ldp", "msp", "mspdq")


@dataclass
class FLConfig:
    """All schedules and constants of one experiment.

    Safety-critical fields (epsilon, gamma_max, lambda_, level) carry no
    defaults on the JSON surface: the schedules are conditional on them.
    """

    n_clients: int
    cohort: int  # M, sampled with replacement each round
    dim: int
    local_steps: int  # E
    rounds: int  # T
    mode: str
    seed: int
    problem_seed: int = 0  # shared across seeds so one task backs a seed sweep
    epsilon: float = float("nan")
    gamma_max: float = float("nan")
    lambda_: float = float("nan")
    level: int = 0
    weight_rule: str = ""
    split_variant: str = "uniform"
    split_m: int = 1
    eps_split: float = 0.3
    laplace_scale: float = 1.0
    ldp_scale: float = 0.0
    spread: float = 1.0
    gamma_target: float | None = None  # overrides spread to hit a heterogeneity level
    center_offset: float = 0.0  # common shift of every minimizer, sets |w0 - w*|
    eig_lo: float = 0.5
    eig_hi: float = 1.0
    n_samples: int = 64
    batch_size: int = 8
    sample_spread: float = 1.0
    ball_radius: float = 10.0
    q0_width: float | None = None
    kt_override: int | None = None

    def __post_init__(self):
        if not self.weight_rule:
            self.weight_rule = "harmonic" if self.mode == "mspdq" else "constant"

    @property
    def bits(self) -> int:
        return max(1, math.ceil(math.log2(self.level))) if self.level >= 2 else 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.n_clients < 1 or self.cohort < 1 or self.dim < 1:
            raise ConfigError("n_clients, cohort and dim must be positive")
        if self.local_steps < 1 or self.rounds < 1:
            raise ConfigError("local_steps and rounds must be positive")
        if not 1 <= self.batch_size <= self.n_samples:
            raise ConfigError("batch_size must lie in [1, n_samples]")
        if self.mode in ("msp", "mspdq"):
            hi = self.cohort / (self.cohort - 1) if self.cohort > 1 else float("inf")
            if not (self.epsilon == self.epsilon and 0 < self.epsilon < hi):
                raise ConfigError(
                    f"epsilon must lie in (0, M/(M-1)) = (0, {hi:.6g}), got {self.epsilon}"
                )
            if not (self.lambda_ == self.lambda_ and 0 < self.lambda_ < 1):
                raise ConfigError("lambda must lie in (0, 1)")
            if not self.gamma_max == self.gamma_max or self.gamma_max < 0:
                raise ConfigError("gamma_max must be a nonnegative number")
            u = build_U(self.cohort, self.epsilon)
            lam_min = lambda_min_U(u)
            cap = lam_min / (1 + lam_min) if lam_min > 0 else 0.0
            if self.gamma_max > 0 and self.split_m * self.gamma_max >= cap:
                raise ConfigError(
                    f"step-weight budget m*gamma_max = {self.split_m * self.gamma_max:.6g} "
                    f"violates the bound lambda_min/(1+lambda_min) = {cap:.6g}"
                )
            if self.split_m < 1:
                raise ConfigError("need at least one invisible submodel")
        if self.mode == "mspdq":
            if self.level < 2:
                raise ConfigError("quantization level must be at least 2")
            if self.weight_rule == "constant":
                raise ConfigError("quantized mode needs a decaying step-weight rule")
            if self.gamma_max <= 0:
                raise ConfigError("quantized mode needs gamma_max > 0")
        if self.mode == "ldp" and self.ldp_scale < 0:
            raise ConfigError("ldp_scale must be nonnegative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "FLConfig":
        mode = doc.get("mode")
        required = ["n_clients", "cohort", "dim", "local_steps", "rounds", "mode", "seed"]
        if mode in ("msp", "mspdq"):
            required += ["epsilon", "gamma_max", "lambda_"]
        if mode == "mspdq":
            required += ["level"]
        missing = [k for k in required if k not in doc]
        if missing:
            raise ConfigError(f"config is missing required fields: {', '.join(missing)}")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
        return cls(**doc)


@dataclass
class RoundMetrics:
    t: int
    gap: float
    dist2: float
    kt: int
    uploads: int
    bits: int
    max_width: float
    delta_max: float

    def __post_init__(self):
        if min(self.gap, self.dist2, self.kt, self.uploads, self.bits) < 0:
            raise ProtocolIntegrityError("metrics must be nonnegative")


@dataclass
class RunResult:
    config: FLConfig
    metrics: list
    constants: dict
    trajectory: np.ndarray  # (T+1, d) global models incl. w_0
    flags: dict = field(default_factory=dict)


# -- schedules ----------------------------------------------------------------


def vartheta(mu: float, L: float, E: int) -> float:
    """Learning-rate offset max{8L/mu, E} - 1."""
    return max(8.0 * L / mu, float(E)) - 1.0


def lr_schedule(t: int, mu: float, vtheta: float) -> float:
    """Diminishing rate 2 / (mu (vartheta + t))."""
    if t < 1:
        raise ConfigError("learning rounds start at t = 1")
    return 2.0 / (mu * (vtheta + t))


def kt_schedule(t: int, mu: float, vtheta: float, lam: float, mode: str) -> int:
    """Consensus-round budget after learning round t.

    Plain splitting: ceil(log_lam(2/(mu(vartheta+t)))); quantized mode takes
    the max with ceil(mu(vartheta+t)/2) so the interval has time to shrink.
    Clamped to at least one round.
    """
    if not 0 < lam < 1:
        raise ConfigError("lambda must lie in (0, 1)")
    eta = 2.0 / (mu * (vtheta + t))
    k_log = math.ceil(math.log(eta) / math.log(lam))
    if mode == "mspdq":
        return max(1, k_log, math.ceil(1.0 / eta))
    return max(1, k_log)


def sample_clients(p: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    """M i.i.d. draws with replacement; duplicates are distinct cohort slots."""
    p = np.asarray(p, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-9 or np.any(p < 0):
        raise ConfigError("sampling probabilities must be a distribution")
    return rng.choice(len(p), size=M, replace=True, p=p)


def local_sgd(
    w0: np.ndarray,
    loss: QuadraticClientLoss,
    dataset: ClientDataset,
    eta: float,
    E: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """E mini-batch gradient steps from the broadcast model."""
    if E < 1:
        raise ConfigError("need at least one local step")
    w = w0.copy()
    for _ in range(E):
        w -= eta * stochastic_gradient(loss, dataset, w, rng=rng)
    return w


# -- problem construction ----------------------------------------------------


@dataclass
class ProblemBundle:
    losses: list
    datasets: list
    constants: ProblemConstants


def build_problem(config: FLConfig) -> ProblemBundle:
    """Instantiate the synthetic task; gamma_target rescales the minimizer
    spread to hit the requested heterogeneity exactly (it is quadratic in
    the spread)."""
    losses = make_quadratic_problem(
        config.n_clients, config.dim, config.spread, config.problem_seed,
        eig_range=(config.eig_lo, config.eig_hi),
    )
    if config.gamma_target is not None and config.gamma_target > 0:
        if config.spread <= 0:
            raise ConfigError("gamma_target needs a positive starting spread")
        _, F_star = global_optimum(losses)
        if F_star <= 0:
            raise ConfigError("degenerate problem: zero heterogeneity at positive spread")
        scale = math.sqrt(config.gamma_target / F_star)
        losses = [
            QuadraticClientLoss(A=l.A, b=l.b * scale, p=l.p) for l in losses
        ]
    if config.center_offset:
        shift = config.center_offset * np.ones(config.dim) / math.sqrt(config.dim)
        losses = [QuadraticClientLoss(A=l.A, b=l.b + shift, p=l.p) for l in losses]
    datasets = make_client_datasets(
        losses, config.n_samples, config.batch_size, config.sample_spread, config.problem_seed
    )
    constants = problem_constants(losses, datasets, config.ball_radius)
    return ProblemBundle(losses=losses, datasets=datasets, constants=constants)


def _split_rule(config: FLConfig) -> SplitRule:
    return SplitRule(
        variant=config.split_variant,
        m=config.split_m,
        eps_split=config.eps_split,
        scale=config.laplace_scale,
    )


def _step_weights(config: FLConfig) -> StepWeights:
    gamma = np.full((config.cohort, config.split_m), config.gamma_max)
    return StepWeights(gamma=gamma, rule=config.weight_rule)


def _global_loss(losses, w: np.ndarray) -> float:
    return float(sum(l.p * l.value(w) for l in losses))


def _check_ball(w: np.ndarray, w_star: np.ndarray, radius: float, what: str) -> None:
    if np.linalg.norm(w - w_star) > radius:
        raise ProtocolIntegrityError(
            f"{what} left the operating ball (radius {radius}); "
            "theorem constants are void, enlarge ball_radius"
        )


# -- training loops -----------------------------------------------------------


def _local_round(config, bundle, w_prev, t, eta):
    """Sample the cohort and run local SGD once per unique client."""
    rng_rs = rngmod.stream(config.seed, rngmod.CLIENT_SAMPLING, t)
    p = np.array([l.p for l in bundle.losses])
    cohort = sample_clients(p, config.cohort, rng_rs)
    locals_by_client = {}
    for c in sorted(set(int(c) for c in cohort)):
        rng_sg = rngmod.stream(config.seed, rngmod.GRADIENT, t, c)
        locals_by_client[c] = local_sgd(
            w_prev, bundle.losses[c], bundle.datasets[c], eta, config.local_steps, rng_sg
        )
    return cohort, locals_by_client


def run(config: FLConfig, bundle: ProblemBundle | None = None) -> RunResult:
    config.validate()
    if bundle is None:
        bundle = build_problem(config)
    if config.mode == "fedavg":
        return _run_averaging(config, bundle, ldp_scale=0.0)
    if config.mode == "ldp":
        return _run_averaging(config, bundle, ldp_scale=config.ldp_scale)
    if config.mode == "msp":
        return _run_split(config, bundle)
    return _run_split_quantized(config, bundle)


def _base_constants(config: FLConfig, bundle: ProblemBundle) -> dict:
    pc = bundle.constants
    return {
        "mu": pc.mu,
        "L": pc.L,
        "gamma_het": pc.gamma_het,
        "G": pc.G,
        "sigma": pc.sigma_i.tolist(),
        "F_star": pc.F_star,
        "vartheta": vartheta(pc.mu, pc.L, config.local_steps),
    }


def _run_averaging(config: FLConfig, bundle: ProblemBundle, ldp_scale: float) -> RunResult:
    pc = bundle.constants
    vt = vartheta(pc.mu, pc.L, config.local_steps)
    w = np.zeros(config.dim)
    traj = [w.copy()]
    metrics = []
    for t in range(1, config.rounds + 1):
        eta = lr_schedule(t, pc.mu, vt)
        cohort, locals_by_client = _local_round(config, bundle, w, t, eta)
        uploads = np.stack([locals_by_client[int(c)] for c in cohort])
        if ldp_scale > 0:
            rng_n = rngmod.stream(config.seed, rngmod.LDP_NOISE, t)
            uploads = uploads + rng_n.laplace(0.0, ldp_scale, size=uploads.shape)
        w = uploads.mean(axis=0)
        _check_ball(w, pc.w_star, config.ball_radius, "global model")
        gap = _global_loss(bundle.losses, w) - pc.F_star
        metrics.append(
            RoundMetrics(
                t=t,
                gap=gap,
                dist2=float(np.sum((w - pc.w_star) ** 2)),
                kt=0,
                uploads=config.cohort,
                bits=config.cohort * 64 * config.dim,
                max_width=0.0,
                delta_max=0.0,
            )
        )
        traj.append(w.copy())
    return RunResult(config, metrics, _base_constants(config, bundle), np.stack(traj))


def _run_split(config: FLConfig, bundle: ProblemBundle) -> RunResult:
    pc = bundle.constants
    vt = vartheta(pc.mu, pc.L, config.local_steps)
    rule = _split_rule(config)
    weights = _step_weights(config)
    w = np.zeros(config.dim)
    traj = [w.copy()]
    metrics = []
    for t in range(1, config.rounds + 1):
        eta = lr_schedule(t, pc.mu, vt)
        kt = config.kt_override or kt_schedule(t, pc.mu, vt, config.lambda_, "msp")
        cohort, locals_by_client = _local_round(config, bundle, w, t, eta)
        splits = []
        for slot, c in enumerate(cohort):
            rng_ss = rngmod.stream(config.seed, rngmod.SPLITTING, t, slot)
            splits.append(split_model(locals_by_client[int(c)], rule, rng_ss))
        state = state_from_splits(splits)
        final, _, _ = run_consensus(
            state, kt, MSP, config.epsilon, weights, record=False
        )
        w = final.global_model
        _check_ball(w, pc.w_star, config.ball_radius, "global model")
        gap = _global_loss(bundle.losses, w) - pc.F_star
        metrics.append(
            RoundMetrics(
                t=t,
                gap=gap,
                dist2=float(np.sum((w - pc.w_star) ** 2)),
                kt=kt,
                uploads=config.cohort * (kt + 1),
                bits=config.cohort * (kt + 1) * 64 * config.dim,
                max_width=0.0,
                delta_max=0.0,
            )
        )
        traj.append(w.copy())
    return RunResult(config, metrics, _base_constants(config, bundle), np.stack(traj))


def mspdq_initial_state(
    splits: list[SplitState],
    w_prev: np.ndarray,
    q0_width: float,
    level: int,
):
    """Shared initial upload for the quantized mode.

    The first cohort slot's visible draw is snapped to the nearest knob of
    the round-zero interval (scalar bounds around the broadcast model) and
    broadcast; every slot adopts it, and each slot's absorbing invisible
    soaks up the difference so its own sum constraint still holds exactly.
    """
    lo0 = float(np.min(w_prev)) - q0_width / 2.0
    hi0 = float(np.max(w_prev)) + q0_width / 2.0
    bin0 = (hi0 - lo0) / (level - 1)
    vis0 = splits[0].visible
    if np.any(vis0 < lo0) or np.any(vis0 > hi0):
        raise ProtocolIntegrityError(
            "initial split visible escaped the round-zero interval; increase q0_width"
        )
    idx = np.clip(np.round((vis0 - lo0) / bin0), 0, level - 1)
    shared = lo0 + idx * bin0
    adjusted = []
    for s in splits:
        inv = [x.copy() for x in s.invisible]
        inv[-1] = inv[-1] + (s.visible - shared)
        adjusted.append(SplitState(visible=shared.copy(), invisible=inv, origin=s.origin))
    state = state_from_splits(adjusted)
    state.quantized = state.visible.copy()
    state.level = level
    state.global_model = state.quantized.mean(axis=0)
    return state, adjusted


def _run_split_quantized(config: FLConfig, bundle: ProblemBundle) -> RunResult:
    pc = bundle.constants
    vt = vartheta(pc.mu, pc.L, config.local_steps)
    rule = _split_rule(config)
    weights = _step_weights(config)
    u = build_U(config.cohort, config.epsilon)
    lam2 = lambda2_U(u)
    q0_width = config.q0_width
    if q0_width is None:
        q0_width = 6.0 * (float(np.linalg.norm(pc.w_star)) + config.ball_radius)
    w = np.zeros(config.dim)
    traj = [w.copy()]
    metrics = []
    w_tilde_run = 0.0
    for t in range(1, config.rounds + 1):
        eta = lr_schedule(t, pc.mu, vt)
        kt = config.kt_override or kt_schedule(t, pc.mu, vt, config.lambda_, "mspdq")
        cohort, locals_by_client = _local_round(config, bundle, w, t, eta)
        splits = []
        for slot, c in enumerate(cohort):
            rng_ss = rngmod.stream(config.seed, rngmod.SPLITTING, t, slot)
            splits.append(split_model(locals_by_client[int(c)], rule, rng_ss))
        state, _ = mspdq_initial_state(splits, w, q0_width, config.level)
        rng_sq = rngmod.stream(config.seed, rngmod.QUANTIZATION, t)
        final, _, summary = run_consensus(
            state,
            kt,
            MSPDQ,
            config.epsilon,
            weights,
            rng=rng_sq,
            lambda2_u=lam2,
            record=False,
            wire_check=(t <= 2),
        )
        if summary["bound_margin_min"] < 0:
            raise ProtocolIntegrityError("quantization error exceeded its bound")
        w_tilde_run = max(w_tilde_run, summary["w_tilde_max"])
        w = final.global_model
        _check_ball(w, pc.w_star, config.ball_radius, "global model")
        gap = _global_loss(bundle.losses, w) - pc.F_star
        bits_t = config.cohort * (kt + 1) * 8 * encoded_size(config.dim, config.bits)
        metrics.append(
            RoundMetrics(
                t=t,
                gap=gap,
                dist2=float(np.sum((w - pc.w_star) ** 2)),
                kt=kt,
                uploads=config.cohort * (kt + 1),
                bits=bits_t,
                max_width=summary["max_width"],
                delta_max=summary["delta_max"],
            )
        )
        traj.append(w.copy())
    constants = _base_constants(config, bundle)
    constants["w_tilde_run_max"] = w_tilde_run
    return RunResult(config, metrics, constants, np.stack(traj))


# -- theorem constants and communication accounting ---------------------------


def theorem_constants(
    bundle: ProblemBundle,
    config: FLConfig,
    w_tilde_max: float | None = None,
    probe_horizon: int | None = None,
) -> dict:
    """Constants of the convergence bounds, measured from the instance.

    The contraction constant C is fitted over a product probe at the
    config's own schedule so dev(k) <= C lambda^{k+1} holds on the horizon
    the schedules actually use.  The quantized-mode variance constant uses
    the supplied interval-width maximum (e.g. measured on a probe round).
    """
    pc = bundle.constants
    vt = vartheta(pc.mu, pc.L, config.local_steps)
    out = _base_constants(config, bundle)
    w0 = np.zeros(config.dim)
    dist0 = float(np.sum((w0 - pc.w_star) ** 2))
    out["dist0"] = dist0
    w_max_norm = float(np.linalg.norm(pc.w_star)) + config.ball_radius
    out["w_max_norm"] = w_max_norm
    if config.mode in ("msp", "mspdq"):
        u = build_U(config.cohort, config.epsilon)
        out["lambda2_U"] = lambda2_U(u)
        out["lambda_min_U"] = lambda_min_U(u)
        horizon = probe_horizon or max(
            kt_schedule(t, pc.mu, vt, config.lambda_, config.mode)
            for t in (1, config.rounds)
        )
        devs, measured = contraction_probe(u, _step_weights(config), horizon)
        C = fit_contraction_constant(devs, config.lambda_)
        out["C"] = C
        out["measured_contraction"] = measured
        out["lambda"] = config.lambda_
        x = config.eps_split
        D1 = (2 * x**2 - 4 * x + 8) / 3.0 * C**2 * w_max_norm**2
        sig = np.asarray(pc.sigma_i)
        p = np.array([l.p for l in bundle.losses])
        E = config.local_steps
        D2 = (
            D1
            + float(np.sum(p**2 * sig))
            + 6 * pc.L * pc.gamma_het
            + 8 * (E - 1) ** 2 * pc.G
            + 4.0 / config.cohort * E**2 * pc.G
        )
        out["D1"], out["D2"] = D1, D2
        D3 = 0.0
        if config.mode == "mspdq":
            if w_tilde_max is None:
                w_tilde_max = 2.0 * math.sqrt(config.cohort) * (1 + config.split_m) * w_max_norm
            pi_tilde = compute_pi_t(config.epsilon, lambda2_U(u), w_tilde_max)
            D3 = (
                config.dim
                * config.gamma_max**2
                * pi_tilde**2
                / (4 * config.cohort * (2**config.bits - 1) ** 2)
            )
            out["pi_tilde"] = pi_tilde
            out["w_tilde_max"] = w_tilde_max
            out["assumption3_bits_ok"] = config.bits <= math.log2(
                math.sqrt(config.cohort * config.dim) * pi_tilde + 1
            )
        out["D3"] = D3
        mu, L = pc.mu, pc.L
        out["nu1"] = max(4 * D2 / mu**2, (vt + 1) * dist0)
        out["nu2"] = max(4 * (D2 + D3) / mu**2, (vt + 1) * dist0)
    return out


def bound_curve(constants: dict, config: FLConfig, ts: np.ndarray) -> np.ndarray:
    """Objective-gap upper bound as a function of the learning round."""
    mu, L = constants["mu"], constants["L"]
    vt = constants["vartheta"]
    D = constants["D2"] + constants.get("D3", 0.0)
    E = config.local_steps
    dist0 = constants["dist0"]
    ts = np.asarray(ts, dtype=np.float64)
    return 8 * L / (mu * (vt + ts)) * (2 * D / mu + (8 * L + mu * E) / 2.0 * dist0)


def d3_formula(d: int, gamma_max: float, pi_tilde: float, M: int, B: int) -> float:
    return d * gamma_max**2 * pi_tilde**2 / (4 * M * (2**B - 1) ** 2)


def comm_complexity_bound(rho_acc: float, constants: dict, M: int) -> float:
    """Upload-count bound to reach relative distance ratio rho_acc."""
    if rho_acc <= 0:
        raise ConfigError("target accuracy must be positive")
    mu = constants["mu"]
    vt = constants["vartheta"]
    dist0 = constants["dist0"]
    I = constants["nu2"] / (rho_acc * dist0) - vt
    if I <= 0:
        return 0.0
    Ic = math.ceil(I)
    return M * Ic * (1 + mu * vt + mu / 2.0 * (1 + Ic))


def comm_counter(metrics: list) -> int:
    return int(sum(m.uploads for m in metrics))


def uploads_to_accuracy(results: list[RunResult], rho_acc: float, w_star: np.ndarray) -> int | None:
    """Uploads spent until the seed-mean distance ratio first drops below
    rho_acc; None when the target is never reached within the horizon."""
    start = results[0].trajectory[0]
    base = float(np.sum((start - w_star) ** 2))
    T = len(results[0].metrics)
    total = 0
    for t in range(T):
        total += int(np.mean([r.metrics[t].uploads for r in results]))
        ratio = float(np.mean([r.metrics[t].dist2 for r in results])) / base
        if ratio <= rho_acc:
            return total
    return None


# -- export -------------------------------------------------------------------

METRIC_FIELDS = ("t", "gap", "dist2", "kt", "uploads", "bits", "max_width", "delta_max")


def metrics_to_csv(metrics: list) -> str:
    lines = [",".join(METRIC_FIELDS)]
    for m in metrics:
        lines.append(
            ",".join(repr(getattr(m, f)) if isinstance(getattr(m, f), float) else str(getattr(m, f)) for f in METRIC_FIELDS)
        )
    return "\n".join(lines) + "\n"


def summary_dict(result: RunResult) -> dict:
    last = result.metrics[-1]
    return {
        "mode": result.config.mode,
        "seed": result.config.seed,
        "final_gap": last.gap,
        "final_dist2": last.dist2,
        "total_uploads": comm_counter(result.metrics),
        "total_bits": int(sum(m.bits for m in result.metrics)),
        "flags": result.flags,
    }
