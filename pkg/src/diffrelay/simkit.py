"""Monte Carlo experiment engine: frame simulation, SER curves, comparisons.

A plan fixes the constellation, decoder, SNR grid, stopping policy, and seed;
every random draw then comes from a counter-based stream addressed by
(seed, grid point, batch, purpose), so results are bit-identical for any
worker count.  Error counting is symbol-level against the transmitted
indices, and confidence intervals are Wilson intervals on a cluster-adjusted
effective sample size, since symbols within one coherence frame share a
channel draw.
"""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import LinkParams, TopologyParams, draw_block_gain, draw_noise, make_stream
from .constellation import ConstellationSpec
from .decoders import DecoderConfig, decode_psk_frames, decode_qam_frames
from .diffmod import encode_psk_frame, encode_qam_frame
from .relay import relay_process_frame

_Z95 = 1.959963984540054
_TYING = ("all_equal", "sr_infinite", "custom")
_SR_EPS_MODES = ("configured", "vanishing")

# stream purposes within one (seed, point, batch) address
_STREAM_SYMBOLS = 0
_STREAM_SD = 1
_STREAM_SR0 = 2  # relay r uses _STREAM_SR0 + 2 r and _STREAM_RD0 + 2 r
_STREAM_RD0 = 3


@dataclass(frozen=True)
class TrialsPolicy:
    """Stopping rule: simulate until min_errors errors or max_trials symbols."""

    min_errors: int = 200
    max_trials: int = 100_000_000

    def __post_init__(self) -> None:
        if self.min_errors < 1:
            raise ValueError(f"min_errors must be >= 1, got {self.min_errors}")
        if self.max_trials < 2 * self.min_errors:
            raise ValueError(
                "max_trials must allow min_errors to be observed at SER 1/2, "
                f"so at least {2 * self.min_errors}, got {self.max_trials}"
            )


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything that determines a sweep, including its randomness.

    ``snr_grid_db`` holds per-point average SNRs in dB; ``tying`` maps one
    grid value onto the three link classes: ``all_equal`` sets every link to
    the grid value, ``sr_infinite`` makes relay decisions error-free while
    direct and relay-destination links stay at the grid value, and ``custom``
    adds the per-relay dB offsets to the source-relay and relay-destination
    links.  Under ``sr_infinite`` the decoders keep their configured epsilons
    by default; ``sr_eps='vanishing'`` zeroes them instead.
    """

    spec: ConstellationSpec
    decoder: DecoderConfig
    snr_grid_db: tuple[float, ...]
    n_relays: int = 1
    tying: str = "all_equal"
    sr_offsets_db: tuple[float, ...] = ()
    rd_offsets_db: tuple[float, ...] = ()
    trials: TrialsPolicy = field(default_factory=TrialsPolicy)
    seed: int = 0
    frame_len: int = 64
    sr_eps: str = "configured"
    epsilon_table: tuple[tuple[tuple[str, int, float], float], ...] = ()
    zero_noise: bool = False

    def __post_init__(self) -> None:
        if not self.snr_grid_db:
            raise ValueError("snr_grid_db must be nonempty")
        if self.n_relays < 0:
            raise ValueError(f"n_relays must be >= 0, got {self.n_relays}")
        if self.tying not in _TYING:
            raise ValueError(f"tying must be one of {_TYING}, got {self.tying!r}")
        if self.sr_eps not in _SR_EPS_MODES:
            raise ValueError(
                f"sr_eps must be one of {_SR_EPS_MODES}, got {self.sr_eps!r}"
            )
        if self.tying == "custom":
            if len(self.sr_offsets_db) != self.n_relays or len(self.rd_offsets_db) != self.n_relays:
                raise ValueError("custom tying needs one sr and rd offset per relay")
        elif self.sr_offsets_db or self.rd_offsets_db:
            raise ValueError(f"link offsets are only meaningful with custom tying")
        if self.frame_len < 1:
            raise ValueError(f"frame_len must be >= 1, got {self.frame_len}")
        if self.decoder.epsilons and len(self.decoder.epsilons) != self.n_relays:
            raise ValueError(
                f"decoder carries {len(self.decoder.epsilons)} epsilons "
                f"for {self.n_relays} relays"
            )
        object.__setattr__(self, "snr_grid_db", tuple(float(v) for v in self.snr_grid_db))

    def topology_at(self, index: int) -> TopologyParams:
        """Per-link channel parameters of one grid point under the tying rule."""
        snr_db = self.snr_grid_db[index]
        coherence = self.frame_len + 1

        def link(db: float) -> LinkParams:
            return LinkParams(
                sigma2=1.0, noise_var=10.0 ** (-db / 10.0), coherence_len=coherence
            )

        sr_db = [snr_db] * self.n_relays
        rd_db = [snr_db] * self.n_relays
        if self.tying == "custom":
            sr_db = [snr_db + off for off in self.sr_offsets_db]
            rd_db = [snr_db + off for off in self.rd_offsets_db]
        return TopologyParams(
            source_dest=link(snr_db),
            source_relay=tuple(link(db) for db in sr_db),
            relay_dest=tuple(link(db) for db in rd_db),
        )

    def plan_hash(self) -> str:
        """Stable digest of every field that affects the simulated numbers."""
        parts = [
            self.spec.kind, str(self.spec.M), self.decoder.kind,
            repr(tuple(self.decoder.epsilons)), repr(self.decoder.thresholds),
            repr(self.snr_grid_db), str(self.n_relays), self.tying,
            repr(self.sr_offsets_db), repr(self.rd_offsets_db),
            str(self.trials.min_errors), str(self.trials.max_trials),
            str(self.seed), str(self.frame_len), self.sr_eps,
            repr(self.epsilon_table), str(self.zero_noise),
        ]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SerPoint:
    """One SER estimate: counts, rate, Wilson 95% interval, diagnostics."""

    snr_db: float
    errors: int
    trials: int
    ser: float
    ci_low: float
    ci_high: float
    fallbacks: int = 0
    failure: str | None = None


@dataclass(frozen=True)
class SerCurve:
    """Sweep result plus the metadata needed to reproduce it."""

    points: tuple[SerPoint, ...]
    plan_hash: str
    seed: int
    decoder_kind: str
    wall_time_s: float

    def _ok(self) -> list[SerPoint]:
        return [p for p in self.points if p.failure is None]

    @property
    def snr_db(self) -> np.ndarray:
        return np.array([p.snr_db for p in self._ok()])

    @property
    def ser(self) -> np.ndarray:
        return np.array([p.ser for p in self._ok()])

    @property
    def ci_low(self) -> np.ndarray:
        return np.array([p.ci_low for p in self._ok()])

    @property
    def ci_high(self) -> np.ndarray:
        return np.array([p.ci_high for p in self._ok()])

    @property
    def failures(self) -> tuple[SerPoint, ...]:
        return tuple(p for p in self.points if p.failure is not None)


def wilson_interval(errors: int, trials: int, n_eff: float | None = None) -> tuple[float, float]:
    """95% Wilson score interval for a binomial rate.

    ``n_eff`` substitutes an effective sample size when trials are positively
    correlated; it is floored at 1 and capped at ``trials`` so the interval is
    never narrower than the i.i.d. one.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if not 0 <= errors <= trials:
        raise ValueError(f"errors must lie in [0, trials], got {errors}/{trials}")
    p = errors / trials
    n = float(trials) if n_eff is None else min(max(n_eff, 1.0), float(trials))
    z2 = _Z95 * _Z95
    denom = 1.0 + z2 / n
    centre = (p + z2 / (2.0 * n)) / denom
    half = _Z95 * math.sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom
    # the score interval contains the point estimate; keep that under rounding
    return min(max(0.0, centre - half), p), max(min(1.0, centre + half), p)


def _effective_trials(trials: int, n_frames: int, sum_err: int, sum_sq: int) -> float:
    """Effective sample size under within-frame error correlation.

    Scales the symbol count down by the measured design effect of the frame
    clusters (never up: underdispersion is ignored for a conservative
    interval).
    """
    if sum_err == 0 or n_frames < 2:
        return float(trials)
    p = sum_err / trials
    cluster_var = sum_sq - sum_err * sum_err / n_frames
    binom_var = sum_err * (1.0 - p)
    if binom_var <= 0.0 or cluster_var <= 0.0:
        return float(trials)
    deff = max(cluster_var / binom_var, 1.0)
    return trials / deff


def resolve_epsilons(plan: ExperimentPlan, index: int) -> tuple[float, ...]:
    """Per-relay epsilon values the destination decoder should be built with.

    Resolution order: decoder kinds that ignore epsilon get zeros, explicit
    ``decoder.epsilons`` win, then the plan's calibration table is consulted
    per relay at the source-relay SNR of this grid point.  A miss raises with
    an instruction to calibrate first.
    """
    if plan.n_relays == 0:
        return ()
    if plan.decoder.kind == "naive_eps0":
        return tuple(0.0 for _ in range(plan.n_relays))
    if plan.tying == "sr_infinite" and plan.sr_eps == "vanishing":
        return tuple(0.0 for _ in range(plan.n_relays))
    if plan.decoder.epsilons:
        return plan.decoder.epsilons
    table = dict(plan.epsilon_table)
    snr_db = plan.snr_grid_db[index]
    out = []
    for r in range(plan.n_relays):
        sr_db = snr_db
        if plan.tying == "custom":
            sr_db = snr_db + plan.sr_offsets_db[r]
        key = (plan.spec.kind, plan.spec.M, round(sr_db, 6))
        if key not in table:
            raise ValueError(
                f"no calibrated epsilon for {plan.spec.kind}-{plan.spec.M} at "
                f"{sr_db:g} dB source-relay SNR; run the calibrate step first "
                "or set decoder.epsilons explicitly"
            )
        out.append(float(table[key]))
    return tuple(out)


def _simulate_batch(plan, index, batch, n_frames, decoder_cfg):
    """Simulate ``n_frames`` coherence frames; returns (errors, sq, fallbacks).

    All randomness comes from streams addressed by (seed, point, batch,
    purpose), so the result is a pure function of those integers.
    """
    spec = plan.spec
    topo = plan.topology_at(index)
    length = plan.frame_len
    genie_relay = plan.tying == "sr_infinite"
    rng_sym = make_stream(plan.seed, index, batch, _STREAM_SYMBOLS)
    idx = rng_sym.integers(0, spec.M, size=(n_frames, length))

    if spec.kind == "psk":
        v_s = encode_psk_frame(idx, spec)
    else:
        v_s = encode_qam_frame(idx, spec)

    def through(link, v, purpose):
        rng = make_stream(plan.seed, index, batch, purpose)
        h = draw_block_gain(link, rng, size=n_frames)
        y = h[:, None] * v
        if not plan.zero_noise:
            y = y + draw_noise(link.noise_var, rng, size=v.shape)
        return y

    y_sd = through(topo.source_dest, v_s, _STREAM_SD)

    y_rd = np.empty((plan.n_relays,) + y_sd.shape, dtype=complex)
    relay_decisions = []
    for r in range(plan.n_relays):
        if genie_relay:
            v_r, decisions = relay_process_frame(
                v_s, spec, topo.source_relay[r].noise_var, mode="genie",
                true_indices=idx,
            )
        else:
            y_sr = through(topo.source_relay[r], v_s, _STREAM_SR0 + 2 * r)
            v_r, decisions = relay_process_frame(
                y_sr, spec, topo.source_relay[r].noise_var, mode="erroneous"
            )
        relay_decisions.append(decisions)
        y_rd[r] = through(topo.relay_dest[r], v_r, _STREAM_RD0 + 2 * r)

    sd_nv = topo.source_dest.noise_var
    rd_nvs = tuple(link.noise_var for link in topo.relay_dest)
    if spec.kind == "psk":
        decoded, fallbacks = decode_psk_frames(y_sd, y_rd, sd_nv, rd_nvs, spec, decoder_cfg)
    else:
        kwargs = {}
        if decoder_cfg.kind == "genie_reference":
            kwargs["true_source_mags"] = np.abs(spec.points[idx])
            kwargs["true_relay_mags"] = np.abs(
                np.stack([spec.points[d] for d in relay_decisions])
            ) if plan.n_relays else np.empty((0,) + idx.shape)
        decoded, fallbacks = decode_qam_frames(
            y_sd, y_rd, sd_nv, rd_nvs, spec, decoder_cfg, **kwargs
        )
    frame_errors = np.count_nonzero(decoded != idx, axis=-1)
    return (
        int(frame_errors.sum()),
        int(np.sum(frame_errors.astype(np.int64) ** 2)),
        int(fallbacks),
    )


_BATCH_SYMBOL_TARGET = 8192
_ROUND_BATCHES = 8


def run_point(plan: ExperimentPlan, index: int, workers: int = 1) -> SerPoint:
    """Estimate the SER of one grid point under the plan's stopping policy.

    Batches within a round run in parallel; counts are reduced in batch order
    and the stopping rule is applied only at round boundaries, so the result
    does not depend on ``workers``.
    """
    if not 0 <= index < len(plan.snr_grid_db):
        raise ValueError(f"grid index {index} outside 0..{len(plan.snr_grid_db) - 1}")
    snr_db = plan.snr_grid_db[index]
    try:
        eps = resolve_epsilons(plan, index)
    except ValueError as exc:
        return SerPoint(snr_db, 0, 0, math.nan, math.nan, math.nan, failure=str(exc))
    decoder_cfg = replace(plan.decoder, epsilons=eps)

    length = plan.frame_len
    frames_per_batch = max(1, _BATCH_SYMBOL_TARGET // length)
    errors = 0
    trials = 0
    n_frames = 0
    sum_sq = 0
    fallbacks = 0
    batch = 0
    while errors < plan.trials.min_errors and trials < plan.trials.max_trials:
        jobs = []
        budget_frames = (plan.trials.max_trials - trials) // length
        if budget_frames == 0:
            break
        for _ in range(_ROUND_BATCHES):
            if budget_frames == 0:
                break
            take = min(frames_per_batch, budget_frames)
            jobs.append((batch, take))
            budget_frames -= take
            batch += 1
        if workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(
                    pool.map(
                        lambda job: _simulate_batch(plan, index, job[0], job[1], decoder_cfg),
                        jobs,
                    )
                )
        else:
            results = [
                _simulate_batch(plan, index, b, take, decoder_cfg) for b, take in jobs
            ]
        for (b, take), (err, sq, fb) in zip(jobs, results):
            errors += err
            sum_sq += sq
            fallbacks += fb
            n_frames += take
            trials += take * length
    n_eff = _effective_trials(trials, n_frames, errors, sum_sq)
    lo, hi = wilson_interval(errors, trials, n_eff)
    return SerPoint(snr_db, errors, trials, errors / trials, lo, hi, fallbacks)


def run_sweep(plan: ExperimentPlan, workers: int = 1) -> SerCurve:
    """Run every grid point; rows come back ordered by SNR.

    Point failures (for example missing calibration) are collected as
    annotated rows rather than aborting the sweep.
    """
    start = time.perf_counter()
    order = sorted(range(len(plan.snr_grid_db)), key=lambda i: plan.snr_grid_db[i])
    rows = tuple(run_point(plan, i, workers=workers) for i in order)
    return SerCurve(
        points=rows,
        plan_hash=plan.plan_hash(),
        seed=plan.seed,
        decoder_kind=plan.decoder.kind,
        wall_time_s=time.perf_counter() - start,
    )


@dataclass(frozen=True)
class ComparisonRow:
    snr_db: float
    value: float
    low: float
    high: float


@dataclass(frozen=True)
class ComparisonReport:
    mode: str
    rows: tuple[ComparisonRow, ...]


def _rel_half(point: SerPoint) -> float:
    if point.ser <= 0.0:
        return math.inf
    return (point.ci_high - point.ci_low) / (2.0 * point.ser)


def snr_at_level(curve: SerCurve, level: float) -> float:
    """SNR in dB where the curve crosses an SER level, log-linear interpolated."""
    if not level > 0.0:
        raise ValueError(f"level must be > 0, got {level}")
    snr = curve.snr_db
    ser = curve.ser
    if snr.size < 2:
        raise ValueError("need at least 2 successful points to interpolate")
    if np.any(ser <= 0.0):
        keep = ser > 0.0
        snr, ser = snr[keep], ser[keep]
    log_level = math.log10(level)
    log_ser = np.log10(ser)
    for i in range(len(snr) - 1):
        a, b = log_ser[i], log_ser[i + 1]
        if (a - log_level) * (b - log_level) <= 0.0 and a != b:
            frac = (a - log_level) / (a - b)
            return float(snr[i] + frac * (snr[i + 1] - snr[i]))
    raise ValueError(f"curve never crosses SER {level:g} on its grid")


def compare_curves(a: SerCurve, b: SerCurve, mode: str = "ratio") -> ComparisonReport:
    """Pointwise SER ratios, or horizontal dB gaps from a to b.

    ``ratio`` reports a/b at common SNRs with the relative CI half-widths
    combined in quadrature.  ``horizontal_db`` reports, at each successful
    point of ``a``, how many dB further ``b`` must go to reach the same SER
    (positive when ``a`` is better), with the gap recomputed at ``a``'s CI
    edges.
    """
    a_ok = {p.snr_db: p for p in a.points if p.failure is None}
    b_ok = {p.snr_db: p for p in b.points if p.failure is None}
    if mode == "ratio":
        common = sorted(set(a_ok) & set(b_ok))
        if not common:
            raise ValueError("curves share no successful SNR points")
        rows = []
        for s in common:
            pa, pb = a_ok[s], b_ok[s]
            if pb.ser <= 0.0:
                continue
            r = pa.ser / pb.ser
            half = r * math.hypot(_rel_half(pa), _rel_half(pb))
            rows.append(ComparisonRow(s, r, max(r - half, 0.0), r + half))
        if not rows:
            raise ValueError("no common point has a positive reference SER")
        return ComparisonReport("ratio", tuple(rows))
    if mode == "horizontal_db":
        rows = []
        for s in sorted(a_ok):
            pa = a_ok[s]
            gaps = []
            for level in (pa.ser, pa.ci_high, pa.ci_low):
                try:
                    gaps.append(snr_at_level(b, level) - s)
                except ValueError:
                    gaps.append(math.nan)
            if math.isnan(gaps[0]):
                continue
            bounds = [g for g in gaps if not math.isnan(g)]
            rows.append(ComparisonRow(s, gaps[0], min(bounds), max(bounds)))
        if not rows:
            raise ValueError("no SER level of the first curve is reachable on the second")
        return ComparisonReport("horizontal_db", tuple(rows))
    raise ValueError(f"mode must be 'ratio' or 'horizontal_db', got {mode!r}")
