"""Alternating minimization of the joint energy, plus the CSGM baseline.

Every solver returns a report with one record per outer iteration so runs can
be inspected and replayed. All randomness comes from explicit seeds.
"""
from __future__ import annotations

import io
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .degradation import DEFAULT_PINV_EPS, data_term, pseudo_inverse_init
from .energy import (EnergyContext, j1, j1_z_value_and_grad, x_update, z_update)
from .errors import NumericError, ParameterError
from .nn import AdamState, adam_step, mlp_backward, mlp_forward
from .vae import encode

BRANCHES = {
    "alg1": {"z1"},
    "alg2": {"z0", "z1", "z2"},
    "alg3": {"fast", "gd"},
}
MONOTONE_SLACK = 1e-9


def fmt(v) -> str:
    """Decimal with 17 significant digits, the CSV number format."""
    return format(float(v), ".17g")


@dataclass(frozen=True)
class GdConfig:
    lr: float = 0.01
    max_iters: int = 200
    rel_tol: float = 1e-6
    window: int = 5

    def __post_init__(self):
        if not self.lr > 0:
            raise ParameterError("lr must be > 0")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be >= 1")
        if self.rel_tol < 0:
            raise ParameterError("rel_tol must be >= 0")


@dataclass
class GdResult:
    z: np.ndarray  # best iterate seen
    value: float
    trace: list[float]  # energy before each Adam step, starting at z_init
    iterations: int  # Adam steps taken
    path: list[np.ndarray] | None = None


def _adam_descent(value_and_grad, z_init, cfg: GdConfig, record_path: bool = False) -> GdResult:
    z = np.array(z_init, dtype=np.float64)
    state = AdamState(lr=cfg.lr)
    best_z, best_val = z.copy(), math.inf
    trace, path = [], [] if record_path else None
    steps = 0
    while True:
        val, g = value_and_grad(z)
        if not math.isfinite(val) or not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite energy during descent at step {steps}")
        trace.append(val)
        if path is not None:
            path.append(z.copy())
        if val < best_val:
            best_val, best_z = val, z.copy()
        if steps >= cfg.max_iters:
            break
        if len(trace) > cfg.window:
            prev = trace[-1 - cfg.window]
            if abs(val - prev) / (1.0 + abs(val)) < cfg.rel_tol:
                break
        state, z = adam_step(state, z, g)
        steps += 1
    return GdResult(best_z, best_val, trace, steps, path)


def gd_z(ctx: EnergyContext, x, z_init, cfg: GdConfig = GdConfig(),
         record_path: bool = False) -> GdResult:
    """Adam on ``z -> J1(x, z)``; returns the best iterate, never worse than ``z_init``."""
    x = np.asarray(x, dtype=np.float64)
    data = data_term(ctx.deg, x, ctx.y)
    return _adam_descent(lambda z: j1_z_value_and_grad(ctx, x, z, data), z_init, cfg,
                         record_path)


@dataclass(frozen=True)
class SolverConfig:
    n_min: int = 5
    n_max: int = 30
    gd: GdConfig = field(default_factory=GdConfig)
    x_init: str = "pseudo_inverse"  # or "provided"
    pinv_eps: float = DEFAULT_PINV_EPS
    z_init: str = "encoder"  # "zeros" | "gaussian" | "encoder"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.n_min < self.n_max:
            raise ParameterError("need 0 <= n_min < n_max")
        if self.x_init not in ("pseudo_inverse", "provided"):
            raise ParameterError(f"unknown x_init {self.x_init!r}")
        if self.z_init not in ("zeros", "gaussian", "encoder"):
            raise ParameterError(f"unknown z_init {self.z_init!r}")
        if not self.pinv_eps > 0:
            raise ParameterError("pinv_eps must be > 0")

    def echo(self) -> dict:
        d = asdict(self)
        d["gd"] = asdict(self.gd)
        return d


@dataclass
class IterRecord:
    n: int
    j1_pre: float  # J1(x_n, z_n)
    j1_post_z: float  # J1(x_n, z_{n+1})
    j1_post_x: float  # J1(x_{n+1}, z_{n+1})
    branch: str
    grad_z_norm: float  # |grad_z J1(x_n, z_{n+1})|
    gd_iters: int
    candidates: dict[str, float] = field(default_factory=dict)


CSV_COLUMNS = ("n", "j1_pre", "j1_post_z", "j1_post_x", "branch", "grad_z_norm", "gd_iters")


@dataclass
class SolverReport:
    algorithm: str
    iterates: list[IterRecord]
    x: np.ndarray
    z: np.ndarray
    x0: np.ndarray
    z0: np.ndarray
    config: dict
    wall_time: float = 0.0

    @property
    def energies(self) -> list[float]:
        """Accepted energies ``J1(x_n, z_n)`` for n = 0, 1, ..."""
        if not self.iterates:
            return []
        return [self.iterates[0].j1_pre] + [r.j1_post_x for r in self.iterates]

    @property
    def final_energy(self) -> float:
        return self.energies[-1]

    def increases(self, slack: float = MONOTONE_SLACK) -> list[int]:
        """Iterations whose z-step or x-step raised J1 by more than ``slack``."""
        bad = []
        for r in self.iterates:
            if r.j1_post_z > r.j1_pre + slack or r.j1_post_x > r.j1_post_z + slack:
                bad.append(r.n)
        return bad

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for r in self.iterates:
            buf.write(",".join([str(r.n), fmt(r.j1_pre), fmt(r.j1_post_z), fmt(r.j1_post_x),
                                r.branch, fmt(r.grad_z_norm), str(r.gd_iters)]) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        """Structured text, one block per iteration. Wall time is left out so runs compare byte-for-byte."""
        lines = [f"algorithm = {self.algorithm}"]
        for key, value in sorted(_flatten(self.config).items()):
            lines.append(f"config.{key} = {value}")
        for r in self.iterates:
            lines.append("")
            lines.append(f"[iteration {r.n}]")
            lines.append(f"j1_pre = {fmt(r.j1_pre)}")
            lines.append(f"j1_post_z = {fmt(r.j1_post_z)}")
            lines.append(f"j1_post_x = {fmt(r.j1_post_x)}")
            lines.append(f"branch = {r.branch}")
            lines.append(f"grad_z_norm = {fmt(r.grad_z_norm)}")
            lines.append(f"gd_iters = {r.gd_iters}")
            for label, value in r.candidates.items():
                lines.append(f"candidate.{label} = {fmt(value)}")
        lines.append("")
        lines.append("[final]")
        lines.append(f"j1 = {fmt(self.final_energy) if self.iterates else 'nan'}")
        lines.append("z = " + " ".join(fmt(v) for v in self.z))
        return "\n".join(lines) + "\n"


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def initial_point(ctx: EnergyContext, cfg: SolverConfig, x0=None) -> tuple[np.ndarray, np.ndarray]:
    if cfg.x_init == "provided":
        if x0 is None:
            raise ParameterError("x_init='provided' needs an explicit x0")
        x0 = np.array(x0, dtype=np.float64)
    else:
        x0 = pseudo_inverse_init(ctx.deg, ctx.y, cfg.pinv_eps)
    if cfg.z_init == "zeros":
        z0 = np.zeros(ctx.k)
    elif cfg.z_init == "gaussian":
        z0 = np.random.default_rng(cfg.seed).standard_normal(ctx.k)
    else:
        z0 = z_update(ctx, x0)
    return x0, z0


def _x_step(ctx: EnergyContext, z, x_prev, j1_prev: float, guard: bool) -> tuple[np.ndarray, float]:
    x_new = x_update(ctx, z, x0=x_prev)
    value = j1(ctx, x_new, z)
    # the closed form is the exact minimizer; only round-off can make it worse
    if guard and value > j1_prev:
        return x_prev, j1_prev
    return x_new, value


def _grad_norm(ctx, x, z) -> float:
    return float(np.linalg.norm(j1_z_value_and_grad(ctx, x, z, data=0.0)[1]))


def algorithm1(ctx: EnergyContext, cfg: SolverConfig = SolverConfig(), x0=None) -> SolverReport:
    """Exact-case alternation: ``z = mu_phi(x)`` then the closed-form x-step.

    Monotone only when the encoder is the exact posterior; increases are
    recorded, not prevented (see :meth:`SolverReport.increases`).
    """
    start = time.perf_counter()
    x, z = initial_point(ctx, cfg, x0)
    x_first, z_first = x.copy(), z.copy()
    records = []
    current = j1(ctx, x, z)
    for n in range(cfg.n_max):
        z_new = z_update(ctx, x)
        after_z = j1(ctx, x, z_new)
        grad_norm = _grad_norm(ctx, x, z_new)
        x_new, after_x = _x_step(ctx, z_new, x, after_z, guard=False)
        records.append(IterRecord(n, current, after_z, after_x, "z1", grad_norm, 0))
        x, z, current = x_new, z_new, after_x
    return SolverReport("alg1", records, x, z, x_first, z_first, cfg.echo(),
                        time.perf_counter() - start)


def algorithm2(ctx: EnergyContext, cfg: SolverConfig = SolverConfig(), x0=None) -> SolverReport:
    """Approximate case: keep the best of three z-candidates under J1, then the x-step."""
    start = time.perf_counter()
    x, z = initial_point(ctx, cfg, x0)
    x_first, z_first = x.copy(), z.copy()
    records = []
    current = j1(ctx, x, z)
    for n in range(cfg.n_max):
        r0 = gd_z(ctx, x, z, cfg.gd)
        z1 = z_update(ctx, x)
        v1 = j1(ctx, x, z1)
        r2 = gd_z(ctx, x, z1, cfg.gd)
        # cheapest-first order breaks ties: z1, then z0, then z2
        candidates = [("z1", z1, v1), ("z0", r0.z, r0.value), ("z2", r2.z, r2.value)]
        label, z_new, after_z = min(candidates, key=lambda c: c[2])
        grad_norm = _grad_norm(ctx, x, z_new)
        x_new, after_x = _x_step(ctx, z_new, x, after_z, guard=True)
        records.append(IterRecord(n, current, after_z, after_x, label, grad_norm,
                                  r0.iterations + r2.iterations,
                                  {"z0": r0.value, "z1": v1, "z2": r2.value}))
        x, z, current = x_new, z_new, after_x
    return SolverReport("alg2", records, x, z, x_first, z_first, cfg.echo(),
                        time.perf_counter() - start)


def algorithm3(ctx: EnergyContext, cfg: SolverConfig = SolverConfig(), x0=None) -> SolverReport:
    """Faster approximate case: take the encoder mean while it lowers J1 and ``n <= n_min``."""
    start = time.perf_counter()
    x, z = initial_point(ctx, cfg, x0)
    x_first, z_first = x.copy(), z.copy()
    records = []
    current = j1(ctx, x, z)
    for n in range(cfg.n_max):
        z1 = z_update(ctx, x)
        v1 = j1(ctx, x, z1)
        v0 = current
        z_star = z1 if v1 <= v0 else z
        if v1 > v0 or n > cfg.n_min:
            res = gd_z(ctx, x, z_star, cfg.gd)
            z_new, after_z, branch, iters = res.z, res.value, "gd", res.iterations
        else:
            z_new, after_z, branch, iters = z1, v1, "fast", 0
        grad_norm = _grad_norm(ctx, x, z_new)
        x_new, after_x = _x_step(ctx, z_new, x, after_z, guard=True)
        records.append(IterRecord(n, current, after_z, after_x, branch, grad_norm, iters,
                                  {"z0": v0, "z1": v1}))
        x, z, current = x_new, z_new, after_x
    return SolverReport("alg3", records, x, z, x_first, z_first, cfg.echo(),
                        time.perf_counter() - start)


ALGORITHMS = {"alg1": algorithm1, "alg2": algorithm2, "alg3": algorithm3}


# ---------------------------------------------------------------- CSGM baseline

@dataclass
class CsgmReport:
    z: np.ndarray
    objective: float
    best_restart: int
    traces: list[list[float]]
    z_inits: list[np.ndarray]
    lam: float
    config: dict
    wall_time: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("restart,iter,objective\n")
        for r, trace in enumerate(self.traces):
            for i, v in enumerate(trace):
                buf.write(f"{r},{i},{fmt(v)}\n")
        return buf.getvalue()


def csgm_objective(ctx: EnergyContext, z, lam: float) -> tuple[float, np.ndarray]:
    """``F(mu_theta(z), y) + lam |z|^2`` and its gradient."""
    z = np.asarray(z, dtype=np.float64)
    mean, tape = mlp_forward(ctx.vae.decoder, z)
    r = ctx.deg.apply_A(mean) - ctx.y
    s2 = ctx.deg.sigma ** 2
    value = float(r @ r) / (2.0 * s2) + lam * float(z @ z)
    _, g = mlp_backward(ctx.vae.decoder, tape, ctx.deg.apply_At(r) / s2, need_params=False)
    return value, g + 2.0 * lam * z


def csgm(ctx: EnergyContext, lam: float = 0.1, z_init=None, cfg: GdConfig = GdConfig(),
         restarts: int = 1, seed: int = 0) -> tuple[np.ndarray, CsgmReport]:
    """Adam over z on the generator misfit; ``lam = 0.5`` gives the ``|z|^2 / 2`` penalty.

    The first restart uses ``z_init`` when given, otherwise every start is drawn
    from ``N(0, I)`` with ``seed``.
    """
    if lam < 0:
        raise ParameterError("lambda must be >= 0")
    if restarts < 1:
        raise ParameterError("restarts must be >= 1")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    best = None
    traces, inits = [], []
    for r in range(restarts):
        z0 = np.array(z_init, dtype=np.float64) if (r == 0 and z_init is not None) \
            else rng.standard_normal(ctx.k)
        res = _adam_descent(lambda z: csgm_objective(ctx, z, lam), z0, cfg)
        traces.append(res.trace)
        inits.append(z0)
        if best is None or res.value < best[1].value:
            best = (r, res)
    r_best, res = best
    x_hat = mlp_forward(ctx.vae.decoder, res.z)[0]
    report = CsgmReport(res.z, res.value, r_best, traces, inits, lam,
                        {"lam": lam, "restarts": restarts, "seed": seed, "gd": asdict(cfg)},
                        time.perf_counter() - start)
    return x_hat, report


# ---------------------------------------------------------------- multi-start check

@dataclass
class StartRun:
    z0: np.ndarray
    energies: list[float]
    distances: list[float]  # |z_k - z*| along the trajectory
    final_energy: float
    success: bool


@dataclass
class ValidationReport:
    init_kind: str
    runs: list[StartRun]
    encoder_run: StartRun
    z_star: np.ndarray  # coordinate-wise median of the final iterates
    reference_energy: float
    reference: str
    tolerance: float

    @property
    def success_fraction(self) -> float:
        return sum(r.success for r in self.runs) / len(self.runs)

    def energies_csv(self) -> str:
        return self._long_csv("energy", lambda run: run.energies)

    def distances_csv(self) -> str:
        return self._long_csv("distance", lambda run: run.distances)

    def _long_csv(self, column: str, values) -> str:
        buf = io.StringIO()
        buf.write(f"start,iter,{column}\n")
        for i, run in enumerate(self.runs):
            for k, v in enumerate(values(run)):
                buf.write(f"{i},{k},{fmt(v)}\n")
        for k, v in enumerate(values(self.encoder_run)):
            buf.write(f"encoder,{k},{fmt(v)}\n")
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        buf.write("start,final_energy,success\n")
        for i, run in enumerate(self.runs):
            buf.write(f"{i},{fmt(run.final_energy)},{int(run.success)}\n")
        buf.write(f"encoder,{fmt(self.encoder_run.final_energy)},{int(self.encoder_run.success)}\n")
        buf.write(f"fraction,{fmt(self.success_fraction)},\n")
        return buf.getvalue()


def multi_start_validation(ctx: EnergyContext, x0, n_starts: int, init_kind: str = "gaussian",
                           cfg: GdConfig = GdConfig(max_iters=1000), seed: int = 0,
                           tol: float = 1e-2, reference: str = "best") -> ValidationReport:
    """Minimize ``J1(x0, .)`` from many starts and measure how many agree.

    A start succeeds when its final energy is within ``tol * max(1, |E_ref|)``
    of a reference energy: the lowest final energy over all starts (encoder
    start included) for ``reference="best"``, or the median over the random
    starts for ``reference="median"``. The run started at the encoder mean is
    reported separately.
    """
    if n_starts < 1:
        raise ParameterError("n_starts must be >= 1")
    if reference not in ("best", "median"):
        raise ParameterError(f"unknown reference {reference!r}")
    x0 = np.asarray(x0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    mu, logvar = encode(ctx.vae, x0)
    if init_kind == "gaussian":
        starts = rng.standard_normal((n_starts, ctx.k))
    elif init_kind == "encoder_posterior":
        starts = mu + np.exp(0.5 * logvar) * rng.standard_normal((n_starts, ctx.k))
    else:
        raise ParameterError(f"unknown init kind {init_kind!r}")

    results = [gd_z(ctx, x0, s, cfg, record_path=True) for s in starts]
    encoder_result = gd_z(ctx, x0, mu, cfg, record_path=True)
    z_star = np.median(np.array([r.z for r in results]), axis=0)
    if reference == "best":
        e_ref = min(r.value for r in results + [encoder_result])
    else:
        e_ref = float(np.median([r.value for r in results]))
    band = tol * max(1.0, abs(e_ref))

    def within(value: float) -> bool:
        return abs(value - e_ref) <= band

    def run(start, res) -> StartRun:
        dist = [float(np.linalg.norm(p - z_star)) for p in res.path]
        return StartRun(np.asarray(start), res.trace, dist, res.value,
                        within(res.value))

    return ValidationReport(init_kind, [run(s, r) for s, r in zip(starts, results)],
                            run(mu, encoder_result), z_star, e_ref, reference, tol)
