"""Relay-side differential demodulation, re-encoding, and error-rate calibration.

The relay decodes each received symbol from the previous and current samples
only (no channel state information), re-encodes its decisions differentially,
and forwards them.  The average probability that a relay decision is wrong is
the quantity the destination decoders need; it is measured here, either by
Monte Carlo simulation or, for PSK, by numerical integration of the exact
differential-detection error rate over the fading distribution.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .channel import LinkParams, draw_block_gain, draw_noise, make_stream
from .constellation import ConstellationSpec
from .diffmod import encode_psk_frame, encode_qam_frame

_FRAME_LEN = 64


@dataclass(frozen=True)
class RelayObservation:
    """Two consecutive received samples on one source-relay link."""

    y_prev: complex
    y_curr: complex
    noise_var: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.y_prev) and np.isfinite(self.y_curr)):
            raise ValueError("observation samples must be finite")
        if not self.noise_var > 0.0:
            raise ValueError(f"noise_var must be > 0, got {self.noise_var}")


@dataclass(frozen=True)
class EpsilonEstimate:
    """Average relay symbol error probability with its provenance."""

    value: float
    method: str
    trials: int
    std_err: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.value < 1.0:
            raise ValueError(f"value must be in [0, 1), got {self.value}")
        if self.method not in ("monte_carlo", "analytic_approx"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.std_err < 0.0:
            raise ValueError(f"std_err must be >= 0, got {self.std_err}")
        if self.method == "monte_carlo" and self.trials <= 0:
            raise ValueError("monte_carlo estimates require trials > 0")


def demod_psk(obs: RelayObservation, spec: ConstellationSpec) -> int:
    """Differential PSK decision from one sample pair; ties to lowest index."""
    if spec.kind != "psk":
        raise ValueError(f"expected a psk constellation, got {spec.kind!r}")
    metric = np.real(np.conj(obs.y_curr) * obs.y_prev * spec.points)
    return int(np.argmax(metric))


def demod_psk_frame(y: np.ndarray, spec: ConstellationSpec) -> np.ndarray:
    """Vectorized differential PSK decisions over a frame.

    ``y`` has shape (..., L+1) including the reference symbol; the result has
    shape (..., L) of symbol indices.
    """
    if spec.kind != "psk":
        raise ValueError(f"expected a psk constellation, got {spec.kind!r}")
    y = np.asarray(y)
    z = np.conj(y[..., 1:]) * y[..., :-1]
    metric = np.real(z[..., None] * spec.points)
    return np.argmax(metric, axis=-1)


def qam_pair_objective(y_prev, y_curr, noise_var, points, prev_mag):
    """Per-candidate decision objective for differential QAM, broadcastable."""
    energy = np.abs(points) ** 2
    denom = 1.0 + energy / prev_mag**2
    resid = np.abs(y_curr - y_prev * points / prev_mag) ** 2
    return np.log(denom) + resid / (denom * noise_var)


def demod_qam(obs: RelayObservation, spec: ConstellationSpec, prev_mag_est: float) -> int:
    """Differential QAM decision given an estimate of the previous magnitude."""
    if spec.kind != "qam":
        raise ValueError(f"expected a qam constellation, got {spec.kind!r}")
    if not prev_mag_est > 0.0:
        raise ValueError(f"prev_mag_est must be > 0, got {prev_mag_est}")
    obj = qam_pair_objective(obs.y_prev, obs.y_curr, obs.noise_var,
                         spec.points, prev_mag_est)
    return int(np.argmin(obj))


def demod_qam_frame(
    y: np.ndarray,
    spec: ConstellationSpec,
    noise_var: float,
    genie_mags: np.ndarray | None = None,
) -> np.ndarray:
    """Sequential differential QAM decisions over a frame.

    The previous-symbol magnitude is fed back from the relay's own decisions
    (starting from the unit reference), or taken from ``genie_mags`` holding
    the true |x[n]| per data symbol when provided.
    """
    if spec.kind != "qam":
        raise ValueError(f"expected a qam constellation, got {spec.kind!r}")
    if not noise_var > 0.0:
        raise ValueError(f"noise_var must be > 0, got {noise_var}")
    y = np.asarray(y)
    n_data = y.shape[-1] - 1
    batch_shape = y.shape[:-1]
    decisions = np.empty(batch_shape + (n_data,), dtype=np.int64)
    mags = np.abs(spec.points)
    prev_mag = np.ones(batch_shape)
    for n in range(n_data):
        if genie_mags is not None and n > 0:
            prev_mag = np.asarray(genie_mags)[..., n - 1]
        obj = qam_pair_objective(
            y[..., n, None], y[..., n + 1, None], noise_var, spec.points, prev_mag[..., None]
        )
        d = np.argmin(obj, axis=-1)
        decisions[..., n] = d
        if genie_mags is None:
            prev_mag = mags[d]
    return decisions


def relay_process_frame(
    y: np.ndarray,
    spec: ConstellationSpec,
    noise_var: float,
    mode: str = "erroneous",
    true_indices: np.ndarray | None = None,
):
    """Demodulate a received frame and differentially re-encode the decisions.

    Returns (v_r, decisions) where v_r is the relay's transmit frame including
    its reference symbol.  In genie mode the decisions are the true indices,
    so v_r reproduces the source sequence exactly.
    """
    y = np.asarray(y)
    if y.shape[-1] < 2:
        raise ValueError("a frame needs at least the reference and one data symbol")
    if mode == "genie":
        if true_indices is None:
            raise ValueError("genie mode requires true_indices")
        decisions = np.asarray(true_indices)
    elif mode == "erroneous":
        if spec.kind == "psk":
            decisions = demod_psk_frame(y, spec)
        else:
            decisions = demod_qam_frame(y, spec, noise_var)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if spec.kind == "psk":
        v_r = encode_psk_frame(decisions, spec)
    else:
        v_r = encode_qam_frame(decisions, spec)
    return v_r, decisions


def _simulate_error_fraction(
    link: LinkParams, spec: ConstellationSpec, trials: int, rng: np.random.Generator
) -> tuple[int, int]:
    """Count relay demodulation errors over independent fading realizations.

    Each trial draws its own gain and a fresh symbol pair, so outcomes are
    i.i.d. and the binomial standard error of the frequency is exact.  QAM
    trials use the true previous-symbol magnitude, drawn uniformly over the
    constellation.
    """
    errors = 0
    total = 0
    chunk = 1 << 16
    for start in range(0, trials, chunk):
        b = min(chunk, trials - start)
        idx = rng.integers(0, spec.M, size=b)
        x = spec.points[idx]
        if spec.kind == "psk":
            v_prev = spec.points[rng.integers(0, spec.M, size=b)]
            v_curr = v_prev * x
        else:
            x_prev = spec.points[rng.integers(0, spec.M, size=b)]
            v_prev = x_prev
            v_curr = x_prev * x / np.abs(x_prev)
        h = draw_block_gain(link, rng, size=b)
        e = draw_noise(link.noise_var, rng, size=(b, 2))
        y_prev = h * v_prev + e[:, 0]
        y_curr = h * v_curr + e[:, 1]
        if spec.kind == "psk":
            metric = np.real(np.conj(y_curr)[:, None] * y_prev[:, None] * spec.points)
            d = np.argmax(metric, axis=-1)
        else:
            obj = qam_pair_objective(
                y_prev[:, None], y_curr[:, None], link.noise_var,
                spec.points, np.abs(x_prev)[:, None],
            )
            d = np.argmin(obj, axis=-1)
        errors += int(np.count_nonzero(d != idx))
        total += b
    return errors, total


def _dpsk_pairwise_density(theta: float, m: int) -> float:
    return 1.0 - math.cos(math.pi / m) * math.cos(theta)


def analytic_epsilon_psk(link: LinkParams, spec: ConstellationSpec) -> float:
    """Exact average error rate of differential PSK detection over Rayleigh fading.

    The conditional error rate sin(pi/M)/(2 pi) * int exp(-g a(t))/a(t) dt over
    t in [-pi/2, pi/2], with a(t) = 1 - cos(pi/M) cos t, averages in closed form
    against the exponential density of the instantaneous SNR g.
    """
    if spec.kind != "psk":
        raise ValueError("analytic_approx is available for psk constellations only")
    gbar = link.avg_snr
    m = spec.M

    def integrand(theta: float) -> float:
        a = _dpsk_pairwise_density(theta, m)
        return 1.0 / (a * (1.0 + gbar * a))

    val, _ = integrate.quad(integrand, -math.pi / 2, math.pi / 2,
                            epsabs=1e-14, epsrel=1e-12)
    return math.sin(math.pi / m) / (2.0 * math.pi) * val


def calibrate_epsilon(
    link: LinkParams,
    spec: ConstellationSpec,
    method: str = "monte_carlo",
    trials: int = 1_000_000,
    seed: int = 0,
    rng: np.random.Generator | None = None,
    target_std_err: float | None = None,
) -> EpsilonEstimate:
    """Estimate the relay's average symbol error probability for one link."""
    if method == "analytic_approx":
        value = analytic_epsilon_psk(link, spec)
        return EpsilonEstimate(value=value, method=method, trials=0, std_err=0.0)
    if method != "monte_carlo":
        raise ValueError(f"unknown method {method!r}")
    if trials <= 0:
        raise ValueError(f"trials must be > 0, got {trials}")
    if rng is None:
        snr_code = int(round(10.0 * math.log10(link.avg_snr) * 100.0)) % (1 << 64)
        rng = make_stream(seed, spec.M, snr_code)
    errors, total = _simulate_error_fraction(link, spec, trials, rng)
    value = errors / total
    std_err = math.sqrt(max(value * (1.0 - value), 1.0 / total) / total)
    if target_std_err is not None and std_err > target_std_err:
        warnings.warn(
            f"calibration budget too small: std_err {std_err:.3g} exceeds "
            f"target {target_std_err:.3g}",
            stacklevel=2,
        )
    return EpsilonEstimate(value=value, method=method, trials=total, std_err=std_err)


def save_epsilon_table(path, table: dict) -> None:
    """Persist calibration results keyed by (kind, M, snr_db) as CSV."""
    rows = sorted(table.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2]))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["M", "kind", "snr_db", "epsilon", "std_err", "trials"])
        for (kind, m, snr_db), est in rows:
            writer.writerow([m, kind, repr(float(snr_db)), repr(est.value),
                             repr(est.std_err), est.trials])


def load_epsilon_table(path) -> dict:
    """Load a calibration table written by save_epsilon_table."""
    table = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            trials = int(row["trials"])
            method = "monte_carlo" if trials > 0 else "analytic_approx"
            est = EpsilonEstimate(
                value=float(row["epsilon"]),
                method=method,
                trials=trials,
                std_err=float(row["std_err"]),
            )
            table[(row["kind"], int(row["M"]), float(row["snr_db"]))] = est
    return table
