"""Critic lower bound, sandwiched estimator and the tightness check for the sandwich."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Adam, NonFiniteError, Node, Tape, backward
from .nets import Critic

#: weight(W_L) : weight(W_U) = 1 : 20
DEFAULT_LAMBDA = 1.0 / 21.0


@dataclass
class SandwichConfig:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass
class LowerBoundConfig:
    critic_steps: int = 5
    clip: float = 0.5
    rho: float = 1.0            # quadratic penalty weight and multiplier step size
    multiplier: float = 0.0     # Lagrange multiplier of the second-moment constraint

    def __post_init__(self):
        if self.critic_steps < 1:
            raise ValueError("critic_steps must be >= 1")
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")


def sandwich_loss(w_u: float, w_l: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) * w_u + lam * w_l


def _scores(tape: Tape, critic: Critic, points, cond) -> Node:
    c = tape.input(cond) if cond is not None else None
    return critic.forward(tape, tape.input(points), c)


def w_lower_value(critic: Critic, real, fake, cond=None) -> float:
    """mean f(real) - mean f(fake); divide by ``critic.lipschitz`` for a bound on w."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.size == 0 or fake.size == 0:
        raise ValueError("empty batch")
    tape = Tape(record=False)
    fr = _scores(tape, critic, real, cond).value
    fg = _scores(tape, critic, fake, cond).value
    return float(fr.mean() - fg.mean())


def critic_objective(tape: Tape, critic: Critic, real, fake, config: LowerBoundConfig, cond=None):
    """Augmented Lagrangian of the IPM under 0.5 E_P f^2 + 0.5 E_G f^2 = 1.

    Returns (objective node, ipm value, constraint value).
    """
    fr = _scores(tape, critic, real, cond)
    fg = _scores(tape, critic, fake, cond)
    ipm = tape.sub(tape.mean(fr), tape.mean(fg))
    if config.rho == 0.0 and config.multiplier == 0.0:
        return ipm, float(ipm.value), 0.0
    omega = tape.scale(tape.add(tape.mean(tape.square(fr)), tape.mean(tape.square(fg))), 0.5)
    slack = tape.shift(tape.scale(omega, -1.0), 1.0)           # 1 - omega
    obj = tape.add(ipm, tape.scale(slack, config.multiplier))
    obj = tape.sub(obj, tape.scale(tape.square(slack), 0.5 * config.rho))
    return obj, float(ipm.value), float(slack.value)


def critic_update(critic: Critic, opt: Adam, real, fake, config: LowerBoundConfig, cond=None) -> float:
    """One ascent step on the penalised IPM, then clipping. Returns the IPM before the step."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.size == 0 or fake.size == 0:
        raise ValueError("empty batch")
    tape = Tape()
    obj, ipm, slack = critic_objective(tape, critic, real, fake, config, cond)
    if not np.isfinite(obj.value):
        raise NonFiniteError(f"critic objective is not finite (ipm={ipm}, slack={slack})")
    backward(tape, tape.scale(obj, -1.0))
    opt.step()
    # multiplier descends on the constraint violation
    config.multiplier -= config.rho * slack
    critic.clip_weights(config.clip)
    return ipm


@dataclass
class LemmaReport:
    lam: float
    window: tuple[float, float]
    worst_error: float          # worst |W_lambda - w| over the admissible estimator pairs
    one_sided_error: float      # smallest possible |W_U - w| or |W_L - w|, i.e. eps1 * w
    worst_case_pair_error: float  # |W_lambda - w| for W_U = (1+eps2)w, W_L = (1-eps2)w

    @property
    def tighter(self) -> bool:
        return self.worst_error < self.one_sided_error


def lambda_window(eps1: float, eps2: float) -> tuple[float, float]:
    return (eps2 - eps1) / (eps2 + eps1), 0.5


def _check_hypotheses(w: float, eps1: float, eps2: float) -> None:
    if not w > 0:
        raise ValueError(f"w > 0 violated (w={w})")
    if not eps1 > 0:
        raise ValueError(f"eps1 > 0 violated (eps1={eps1})")
    if not eps2 > eps1:
        raise ValueError(f"eps2 > eps1 violated (eps1={eps1}, eps2={eps2})")
    if not eps1 > eps2 / 3:
        raise ValueError(f"eps1 > eps2/3 violated (eps1={eps1}, eps2={eps2})")


def sandwich_worst_error(w: float, eps1: float, eps2: float, lam: float) -> float:
    """max |(1-lam) W_U + lam W_L - w| over W_U in [(1+eps1)w, (1+eps2)w], W_L in [(1-eps2)w, (1-eps1)w].

    The error is affine in both estimators, so the corners attain the maximum.
    """
    errs = [abs((1 - lam) * a - lam * b) for a in (eps1, eps2) for b in (eps1, eps2)]
    return max(errs) * w


def lemma1_verify(w: float, eps1: float, eps2: float, grid=None) -> LemmaReport:
    """Find lambda with a strictly tighter two-sided estimate than either bound alone."""
    _check_hypotheses(w, eps1, eps2)
    lo, hi = lambda_window(eps1, eps2)
    if grid is None:
        grid = np.append(np.linspace(0.0, 0.5, 1001)[1:-1], 0.5 * (lo + hi))
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or np.any((grid < 0) | (grid > 1)):
        raise ValueError("lambda grid must be non-empty within [0, 1]")
    # ties toward the smaller lambda; the window's upper edge is exclusive
    candidates = np.sort(grid[grid < 0.5])
    if candidates.size == 0:
        raise ValueError("lambda grid has no value below 0.5")
    errors = np.array([sandwich_worst_error(w, eps1, eps2, lam) for lam in candidates])
    best = int(np.argmin(errors))
    lam = float(candidates[best])
    report = LemmaReport(lam, (lo, hi), float(errors[best]), eps1 * w,
                         abs((1 - lam) * eps2 - lam * eps2) * w)
    if not report.tighter:
        raise AssertionError(f"no grid lambda beats the one-sided error {eps1 * w}: best {report.worst_error}")
    if not lo < lam < hi:
        raise AssertionError(f"best lambda {lam} lies outside the window ({lo}, {hi})")
    return report
