"""Coefficient-stability bounds under proportional selection on unobservables.

Two short/long regressions sharing outcome and treatment summarize what the
observables do to the treatment coefficient and the fit; the adjusted
coefficient extrapolates that movement to unobservables whose selection is
proportional with factor delta, up to a maximal attainable R-squared.

The default ("restricted") estimator is the linear adjustment

    beta* = beta_c - delta * (beta_u - beta_c) * (r_max - r2_c) / (r2_c - r2_u)

An "exact" mode solves the proportional-selection moment system directly.
Writing nu for the remaining bias of the controlled coefficient and using the
auxiliary second moments (outcome variance, treatment variance, and residual
treatment variance given controls), the system pins down the observable-index
covariance sigma_1x(nu), the unobservable-index variance sigma_22(nu) from the
R-squared gap, and the observable-index variance sigma_11(nu) from the total
outcome-variance decomposition anchored at r_max; substituting all three into
the proportionality condition yields a cubic in nu.  All real roots are
reported and the one closest to the controlled coefficient is returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DataError, EstimationError

DEFAULT_DELTAS = (-1.0, -0.5, -0.25, 0.25, 0.5, 1.0)
DEFAULT_RMAXES = (0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class OsterInputs:
    beta_uncontrolled: float
    beta_controlled: float
    r2_uncontrolled: float
    r2_controlled: float
    n_obs: int
    # auxiliary second moments, required only by the exact mode
    var_outcome: float | None = None
    var_treatment: float | None = None
    tau_treatment: float | None = None

    def validate(self) -> None:
        if not (0.0 <= self.r2_uncontrolled <= self.r2_controlled <= 1.0):
            raise DataError("need 0 <= r2_uncontrolled <= r2_controlled <= 1")
        if self.r2_controlled == self.r2_uncontrolled:
            raise DataError("controls add no explanatory power; adjustment undefined")

    def has_moments(self) -> bool:
        return None not in (self.var_outcome, self.var_treatment, self.tau_treatment)


def from_fit_pair(uncontrolled, controlled, n_obs: int, *, var_outcome=None,
                  var_treatment=None, tau_treatment=None) -> OsterInputs:
    """Assemble inputs from two benchmark results sharing outcome/treatment."""
    return OsterInputs(
        beta_uncontrolled=float(uncontrolled.alpha_d),
        beta_controlled=float(controlled.alpha_d),
        r2_uncontrolled=float(uncontrolled.fit.r_squared),
        r2_controlled=float(controlled.fit.r_squared),
        n_obs=n_obs,
        var_outcome=var_outcome,
        var_treatment=var_treatment,
        tau_treatment=tau_treatment,
    )


def _check_rmax(inputs: OsterInputs, r_max: float) -> None:
    if r_max < inputs.r2_controlled:
        raise DataError(f"r_max={r_max} below controlled R-squared "
                        f"{inputs.r2_controlled}")
    if r_max > 1.0:
        raise DataError("r_max cannot exceed 1")


def restricted_beta(inputs: OsterInputs, delta: float, r_max: float) -> float:
    inputs.validate()
    _check_rmax(inputs, r_max)
    move = inputs.beta_uncontrolled - inputs.beta_controlled
    ratio = (r_max - inputs.r2_controlled) / (inputs.r2_controlled - inputs.r2_uncontrolled)
    return inputs.beta_controlled - delta * move * ratio


def _bias_polynomial(inputs: OsterInputs, delta: float, r_max: float):
    """Coefficients of the cubic P(nu) = 0 in the remaining bias nu."""
    sy2 = float(inputs.var_outcome)
    sx2 = float(inputs.var_treatment)
    tx = float(inputs.tau_treatment)
    if not (sy2 > 0 and sx2 > 0 and 0 < tx <= sx2):
        raise DataError("exact mode needs var_outcome > 0, var_treatment > 0, "
                        "and 0 < tau_treatment <= var_treatment")
    phi = sx2 - tx
    bc = inputs.beta_controlled
    move = inputs.beta_uncontrolled - bc
    r2c = inputs.r2_controlled

    def P(nu: float) -> float:
        s = nu * tx
        s1x = move * sx2 + nu * phi
        s22 = (r_max - r2c) * sy2 + nu * nu * tx
        beta = bc - nu
        s11 = r_max * sy2 - beta * beta * sx2 - s22 - 2.0 * beta * s1x - 2.0 * beta * s
        return s * s11 - delta * s1x * s22

    # P is a cubic; recover coefficients exactly from four evaluations
    nodes = np.array([0.0, 1.0, -1.0, 2.0])
    vand = np.vander(nodes, 4)
    coeffs = np.linalg.solve(vand, np.array([P(v) for v in nodes]))
    return coeffs


def exact_roots(inputs: OsterInputs, delta: float, r_max: float) -> list[float]:
    """All real adjusted coefficients solving the proportional-selection
    cubic, sorted by distance from the controlled coefficient."""
    inputs.validate()
    _check_rmax(inputs, r_max)
    if not inputs.has_moments():
        raise DataError("exact mode requires var_outcome, var_treatment, and "
                        "tau_treatment")
    coeffs = _bias_polynomial(inputs, delta, r_max)
    if np.allclose(coeffs, 0.0):
        raise EstimationError("degenerate coefficient-stability polynomial")
    # drop numerically vanishing leading terms; their roots are spurious
    scale = np.max(np.abs(coeffs))
    while len(coeffs) > 1 and abs(coeffs[0]) < 1e-12 * scale:
        coeffs = coeffs[1:]
    roots = np.roots(coeffs)
    real = [float(r.real) for r in roots if abs(r.imag) <= 1e-8 * (1.0 + abs(r.real))]
    if not real:
        raise EstimationError("no real root for the proportional-selection model")
    betas = sorted((inputs.beta_controlled - nu for nu in real),
                   key=lambda b: abs(b - inputs.beta_controlled))
    return betas


def adjusted_beta(inputs: OsterInputs, delta: float, r_max: float,
                  mode: str = "restricted") -> float:
    """Bias-adjusted treatment coefficient under proportionality delta and
    maximal R-squared r_max."""
    if mode == "restricted":
        return restricted_beta(inputs, delta, r_max)
    if mode == "exact":
        return exact_roots(inputs, delta, r_max)[0]
    raise DataError(f"unknown oster mode {mode!r}")


def grid(inputs: OsterInputs, deltas=DEFAULT_DELTAS, rmaxes=DEFAULT_RMAXES,
         mode: str = "restricted") -> pd.DataFrame:
    """Adjusted-coefficient grid with r_max rows and delta columns."""
    deltas = tuple(deltas)
    rmaxes = tuple(rmaxes)
    if not deltas or not rmaxes:
        raise DataError("empty delta or r_max grid")
    values = [[adjusted_beta(inputs, d, r, mode=mode) for d in deltas] for r in rmaxes]
    return pd.DataFrame(values, index=list(rmaxes), columns=list(deltas))
