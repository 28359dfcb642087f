"""Guidance strategies as pure transformations of noise estimates.

The saddle-free step maintains a warm-started shifted power-iteration
estimate of the most positive log-density curvature via two model
evaluations (a base call plus one finite-difference probe) and, when the
curvature estimate is positive, subtracts the gated curvature direction from
the noise estimate. The probe step is h * sigma * v, so lambda estimates the
sigma^2-scaled Hessian eigenvalue, whose most negative value is >= -1 for
any Gaussian-smoothed density; a shift alpha >= 1 therefore keeps the
iteration pointed at the most positive eigenvalue.

Identity weights short-circuit (cfg/autoguidance at w = 1, the saddle-free
and classifier updates at w = 0) so guided and unguided sampling paths stay
bitwise identical.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .model import eps_to_score, score_to_eps
from .rng import generator

GUIDANCE_KINDS = ("none", "classifier", "cfg", "interval_cfg", "autoguidance", "sfg")


@dataclass(frozen=True)
class SfgState:
    """Per-trajectory carry for the saddle-free step.

    v is the unit perturbation vector (shape (..., n) for batched
    trajectories), alpha the non-decreasing shift, last_lambda the latest
    top-eigenvalue estimate. sigma_scaled_shift selects the written form of
    the warm-start shift (alpha * sigma * v); False uses alpha * v instead,
    exposed for ablation.
    """

    v: np.ndarray
    alpha: np.ndarray | float
    last_lambda: np.ndarray | float
    h: float = 0.1
    w: float = 0.0
    sigma_scaled_shift: bool = True

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        norms = np.linalg.norm(v, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("perturbation vector must be unit norm within 1e-9")
        if self.h <= 0:
            raise ValueError("finite-difference step h must be > 0")
        if self.w < 0:
            raise ValueError("guidance weight must be >= 0")
        if np.any(np.asarray(self.alpha) < 0):
            raise ValueError("shift alpha must be >= 0")
        object.__setattr__(self, "v", v)


def sfg_init(n: int, seed: int, alpha0: float = 1.0, h: float = 0.1, w: float = 0.0,
             sigma_scaled_shift: bool = True) -> SfgState:
    """Fresh state with v uniform on the unit sphere (normalized Gaussian)."""
    if n < 1:
        raise ValueError("dimension must be >= 1")
    v = generator(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    return SfgState(v=v, alpha=float(alpha0), last_lambda=0.0, h=h, w=w,
                    sigma_scaled_shift=sigma_scaled_shift)


def stack_states(states: list[SfgState]) -> SfgState:
    """Combine per-trajectory states into one batched state."""
    first = states[0]
    return SfgState(
        v=np.stack([s.v for s in states]),
        alpha=np.asarray([s.alpha for s in states], dtype=float),
        last_lambda=np.asarray([s.last_lambda for s in states], dtype=float),
        h=first.h, w=first.w, sigma_scaled_shift=first.sigma_scaled_shift,
    )


def sfg_step(eps_fn, x, sigma, state: SfgState):
    """One guided noise estimate plus the updated power-iteration carry.

    Exactly two eps_fn evaluations: the base estimate and one probe at
    x + h * sigma * v. Returns (eps_hat, state') without mutating state.
    Accepts a single point (n,) or a batch (B, n) with batched state.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    v = state.v
    if v.shape != x.shape:
        raise ValueError(f"state.v shape {v.shape} does not match x shape {x.shape}")
    eps_hat = np.asarray(eps_fn(x), dtype=float)
    probe = np.asarray(eps_fn(x + state.h * sigma * v), dtype=float)
    u = (eps_hat - probe) / state.h
    lam = np.sum(u * v, axis=-1)
    alpha = np.maximum(np.asarray(state.alpha, dtype=float), -lam)
    gate = lam > 0  # Heaviside with H(0) = 0: zero curvature is no saddle evidence
    eps_out = eps_hat
    if state.w > 0 and np.any(gate):
        eps_out = eps_hat.copy()
        if single:
            eps_out -= state.w * u
        else:
            eps_out[gate] -= state.w * u[gate]
    shift = alpha * sigma if state.sigma_scaled_shift else alpha
    u_shifted = u + shift[..., None] * v if not single else u + shift * v
    norms = np.linalg.norm(u_shifted, axis=-1)
    degenerate = norms == 0.0
    if np.any(degenerate):
        warnings.warn("saddle-free step degenerate (||u|| = 0 after shift); "
                      "keeping previous perturbation vector", RuntimeWarning)
        if single:
            v_new = v
            eps_out = eps_hat
        else:
            v_new = np.where(degenerate[..., None], v, u_shifted / np.where(degenerate, 1.0, norms)[..., None])
            eps_out = eps_out.copy()
            eps_out[degenerate] = eps_hat[degenerate]
    else:
        v_new = u_shifted / norms[..., None] if not single else u_shifted / norms
    new_state = replace(state, v=v_new, alpha=alpha if not single else float(alpha),
                        last_lambda=lam if not single else float(lam))
    return eps_out, new_state


def sfg_on_score(score_fn, x, sigma, state: SfgState):
    """Score-space wrapper: algebraically equivalent to the eps-space step."""
    eps_hat, new_state = sfg_step(lambda z: score_to_eps(score_fn(z), sigma), x, sigma, state)
    return eps_to_score(eps_hat, sigma), new_state


def _check_same_shape(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"estimate shapes differ: {a.shape} vs {b.shape}")
    return a, b


def cfg(eps_cond, eps_uncond, w: float):
    """eps_cond + (w - 1)(eps_cond - eps_uncond); w = 1 returns eps_cond as is."""
    eps_cond, eps_uncond = _check_same_shape(eps_cond, eps_uncond)
    if w == 1.0:
        return eps_cond
    return eps_cond + (w - 1.0) * (eps_cond - eps_uncond)


def interval_cfg(eps_cond, eps_uncond, w: float, t: float, interval):
    """cfg with weight w while t lies in [t_lo, t_hi], unguided outside."""
    t_lo, t_hi = interval
    if not t_lo < t_hi:
        raise ValueError("interval must satisfy t_lo < t_hi")
    eps_cond, eps_uncond = _check_same_shape(eps_cond, eps_uncond)
    if t_lo <= t <= t_hi:
        return cfg(eps_cond, eps_uncond, w)
    return eps_cond


def autoguidance(eps_main, eps_bad, w: float):
    """Extrapolate away from a degraded companion model's estimate."""
    eps_main, eps_bad = _check_same_shape(eps_main, eps_bad)
    if w == 1.0:
        return eps_main
    return eps_main + (w - 1.0) * (eps_main - eps_bad)


def classifier_guidance(score, classifier_grad, w: float):
    """score + w * grad log p(y|x); w = 0 returns the score as is."""
    score, classifier_grad = _check_same_shape(score, classifier_grad)
    if w == 0.0:
        return score
    return score + w * classifier_grad


@dataclass(frozen=True)
class GuidanceSpec:
    """Tagged selection of a guidance strategy.

    companion names the second model (cfg's unconditional branch or the
    autoguidance degraded model) in the run's model table. interval is
    required exactly for interval_cfg, classifier_class for classifier.
    alpha0/h/sigma_scaled_shift configure the saddle-free state.
    """

    kind: str
    weight: float = 1.0
    interval: tuple[float, float] | None = None
    companion: str | None = None
    classifier_class: int | None = None
    alpha0: float = 1.0
    h: float = 0.1
    sigma_scaled_shift: bool = True

    def __post_init__(self):
        if self.kind not in GUIDANCE_KINDS:
            raise ValueError(f"unknown guidance kind {self.kind!r}")
        if (self.interval is not None) != (self.kind == "interval_cfg"):
            raise ValueError("interval is required exactly for interval_cfg")
        if self.interval is not None:
            lo, hi = self.interval
            if not lo < hi:
                raise ValueError("interval must satisfy t_lo < t_hi")
            object.__setattr__(self, "interval", (float(lo), float(hi)))
        if self.kind in ("cfg", "interval_cfg", "autoguidance"):
            if self.companion is None:
                raise ValueError(f"{self.kind} requires a companion model")
            if self.weight < 1.0:
                raise ValueError(f"{self.kind} weight must be >= 1")
        if self.kind == "classifier" and self.classifier_class is None:
            raise ValueError("classifier guidance requires classifier_class")
        if self.kind in ("sfg", "classifier") and self.weight < 0:
            raise ValueError("weight must be >= 0")
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be >= 0")
        if self.h <= 0:
            raise ValueError("h must be > 0")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "weight": self.weight}
        if self.interval is not None:
            out["interval"] = list(self.interval)
        if self.companion is not None:
            out["companion"] = self.companion
        if self.classifier_class is not None:
            out["classifier_class"] = self.classifier_class
        if self.kind == "sfg":
            out["alpha0"] = self.alpha0
            out["h"] = self.h
            out["sigma_scaled_shift"] = self.sigma_scaled_shift
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceSpec":
        kw = dict(d)
        if "interval" in kw and kw["interval"] is not None:
            kw["interval"] = tuple(kw["interval"])
        return cls(**kw)
