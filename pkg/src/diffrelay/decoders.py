"""Destination-side decoders for differential decode-and-forward relaying.

The destination observes the direct link and each relay link as consecutive
sample pairs and combines them knowing only noise variances and each relay's
average decision error probability.  Two decoder families are provided:

* the exact maximum-likelihood rule, which mixes each relay's contribution
  over the relay being right or wrong, evaluated in the log domain;
* the piecewise-linear rule, which replaces the mixture nonlinearity by a
  clipped linear function of per-link statistic differences and selects the
  winner through pairwise comparisons.

QAM decoding needs the magnitude of each link's previous symbol; those are
fed back either from the destination's own decisions (decision-directed) or
from the true values (genie reference).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .channel import make_stream
from .constellation import ConstellationSpec, make_psk
from .relay import qam_pair_objective

_KINDS = ("ml", "pl", "naive_eps0", "genie_reference")
_EXP_CLAMP = 700.0


@dataclass(frozen=True)
class DestObservation:
    """One decision instant at the destination: sample pairs per link."""

    sd_pair: tuple[complex, complex]
    rd_pairs: tuple[tuple[complex, complex], ...]
    sd_noise_var: float
    rd_noise_vars: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.rd_pairs) != len(self.rd_noise_vars):
            raise ValueError("rd_pairs and rd_noise_vars must have equal length")
        if not self.sd_noise_var > 0.0:
            raise ValueError("sd_noise_var must be > 0")
        if any(not nv > 0.0 for nv in self.rd_noise_vars):
            raise ValueError("rd noise variances must be > 0")


@dataclass(frozen=True)
class QamFeedback:
    """Previous-symbol magnitude estimates needed by the QAM decoders."""

    source_prev_mag: float = 1.0
    relay_prev_mags: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not self.source_prev_mag > 0.0:
            raise ValueError("source_prev_mag must be > 0")
        if any(not m > 0.0 for m in self.relay_prev_mags):
            raise ValueError("relay_prev_mags must be > 0")


@dataclass(frozen=True)
class DecoderConfig:
    """Decoder family plus per-relay reliability parameters."""

    kind: str
    epsilons: tuple[float, ...] = ()
    thresholds: tuple[float, ...] | None = None
    qam_feedback: QamFeedback | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}, got {self.kind!r}")
        if any(not 0.0 <= e < 1.0 for e in self.epsilons):
            raise ValueError("epsilons must lie in [0, 1)")
        if self.thresholds is not None:
            if len(self.thresholds) != len(self.epsilons):
                raise ValueError("thresholds must match epsilons in length")
            if any(not t > 0.0 for t in self.thresholds):
                raise ValueError("thresholds must be > 0")

    def effective_epsilons(self) -> tuple[float, ...]:
        if self.kind == "naive_eps0":
            return tuple(0.0 for _ in self.epsilons)
        return self.epsilons

    def resolved_thresholds(self, m: int) -> tuple[float, ...]:
        if self.kind == "naive_eps0":
            return tuple(math.inf for _ in self.epsilons)
        if self.thresholds is not None:
            return self.thresholds
        return tuple(
            clip_threshold(m, e) if e > 0.0 else math.inf for e in self.epsilons
        )


def clip_threshold(m: int, eps: float) -> float:
    """Clipping level of the piecewise-linear relay statistic, in nats."""
    if m < 2:
        raise ValueError(f"m must be >= 2, got {m}")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    return math.log((m - 1) * (1.0 - eps) / eps)


def f_pl(t, threshold):
    """Clip a statistic to [-threshold, threshold]."""
    if not threshold > 0.0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    return np.clip(t, -threshold, threshold)


def _psk_statistics(y_prev, y_curr, points, noise_var):
    """Per-candidate correlation statistics, broadcast over leading axes."""
    z = np.conj(y_curr) * y_prev
    return np.real(np.asarray(z)[..., None] * points) / noise_var


def _qam_scores(y_prev, y_curr, points, noise_var, prev_mag):
    """Per-candidate log-density scores for one QAM link (larger is better)."""
    return -qam_pair_objective(y_prev, y_curr, noise_var, points, prev_mag)


def _mixture_log_scores(scores, eps):
    """Log of the right-or-wrong relay mixture applied to one relay's scores.

    scores has candidates on the last axis; entry k of the result is the log
    of (1-eps) exp(scores[k]) + eps/(M-1) sum over i != k of exp(scores[i]).
    """
    scores = np.asarray(scores, dtype=float)
    m = scores.shape[-1]
    if eps == 0.0:
        return scores
    w_other = eps / (m - 1)
    a = 1.0 - eps - w_other
    if a > 0.0:
        total = logsumexp(scores, axis=-1, keepdims=True)
        return np.logaddexp(math.log(a) + scores, math.log(w_other) + total)
    out = np.empty_like(scores)
    weights = np.full(m, w_other)
    for k in range(m):
        b = weights.copy()
        b[k] = 1.0 - eps
        out[..., k] = logsumexp(scores, axis=-1, b=b)
    return out


def _ml_objective(base, rels, epsilons):
    """base (..., M); rels (..., R, M); returns combined objective (..., M)."""
    obj = np.asarray(base, dtype=float).copy()
    for r, eps in enumerate(epsilons):
        obj += _mixture_log_scores(rels[..., r, :], eps)
    return obj


def _pairwise_select(base, rels, thresholds):
    """Winner of the pairwise clipped-statistic rule, batched.

    base has shape (..., M) and rels (..., R, M).  A candidate wins when its
    pairwise statistic against every rival is positive; a champion found by a
    sequential tournament is verified against all rivals, and when no
    unanimous winner exists the candidate with the largest total pairwise
    statistic is chosen (lowest index on ties).  Returns (winners, number of
    instances that needed the total-statistic fallback).
    """
    base = np.asarray(base, dtype=float)
    rels = np.asarray(rels, dtype=float)
    m = base.shape[-1]
    lead_shape = base.shape[:-1]
    n_rel = rels.shape[-2]
    b2 = base.reshape(-1, m)
    r2 = rels.reshape(-1, n_rel, m)
    n = b2.shape[0]
    rows = np.arange(n)
    thr = np.asarray(thresholds, dtype=float)
    champ = np.zeros(n, dtype=np.int64)
    for q in range(1, m):
        d0 = b2[rows, champ] - b2[:, q]
        dm = r2[rows, :, champ] - r2[:, :, q]
        lam = d0 + np.clip(dm, -thr, thr).sum(axis=-1)
        champ = np.where(lam > 0.0, champ, q)
    d0_all = b2[rows, champ][:, None] - b2
    dm_all = r2[rows, :, champ][:, :, None] - r2
    lam_all = d0_all + np.clip(dm_all, -thr[:, None], thr[:, None]).sum(axis=-2)
    lam_all[rows, champ] = np.inf
    unanimous = np.all(lam_all > 0.0, axis=-1)
    n_fallback = int(np.count_nonzero(~unanimous))
    if n_fallback:
        bad = np.nonzero(~unanimous)[0]
        diff0 = b2[bad, :, None] - b2[bad, None, :]
        diffm = r2[bad, :, :, None] - r2[bad, :, None, :]
        lam_mat = diff0 + np.clip(
            diffm, -thr[None, :, None, None], thr[None, :, None, None]
        ).sum(axis=1)
        totals = lam_mat.sum(axis=-1)
        champ[bad] = np.argmax(totals, axis=-1)
    return champ.reshape(lead_shape), n_fallback


def _check_psk(spec: ConstellationSpec) -> None:
    if spec.kind != "psk":
        raise ValueError(f"expected a psk constellation, got {spec.kind!r}")


def _check_qam(spec: ConstellationSpec) -> None:
    if spec.kind != "qam":
        raise ValueError(f"expected a qam constellation, got {spec.kind!r}")


def _check_relay_count(obs: DestObservation, cfg: DecoderConfig) -> None:
    if len(cfg.epsilons) != len(obs.rd_pairs):
        raise ValueError(
            f"config carries {len(cfg.epsilons)} epsilons for "
            f"{len(obs.rd_pairs)} relay observations"
        )


def _scalar_statistics_psk(obs: DestObservation, spec: ConstellationSpec):
    t0 = _psk_statistics(obs.sd_pair[0], obs.sd_pair[1], spec.points, obs.sd_noise_var)
    rels = np.stack(
        [
            _psk_statistics(pair[0], pair[1], spec.points, nv)
            for pair, nv in zip(obs.rd_pairs, obs.rd_noise_vars)
        ]
    ) if obs.rd_pairs else np.empty((0, spec.M))
    return t0, rels


def _scalar_statistics_qam(obs: DestObservation, spec: ConstellationSpec, cfg: DecoderConfig):
    fb = cfg.qam_feedback
    if fb is None:
        raise ValueError("qam decoding requires cfg.qam_feedback")
    if len(fb.relay_prev_mags) != len(obs.rd_pairs):
        raise ValueError("qam_feedback must carry one magnitude per relay")
    base = _qam_scores(
        obs.sd_pair[0], obs.sd_pair[1], spec.points, obs.sd_noise_var,
        fb.source_prev_mag,
    )
    rels = np.stack(
        [
            _qam_scores(pair[0], pair[1], spec.points, nv, mag)
            for pair, nv, mag in zip(obs.rd_pairs, obs.rd_noise_vars, fb.relay_prev_mags)
        ]
    ) if obs.rd_pairs else np.empty((0, spec.M))
    return base, rels


def ml_decode_psk(obs: DestObservation, spec: ConstellationSpec, cfg: DecoderConfig) -> int:
    """Maximum-likelihood PSK decision combining direct and relay links."""
    _check_psk(spec)
    if cfg.kind not in ("ml", "naive_eps0", "genie_reference"):
        raise ValueError(f"ml_decode_psk does not handle kind {cfg.kind!r}")
    _check_relay_count(obs, cfg)
    t0, rels = _scalar_statistics_psk(obs, spec)
    obj = _ml_objective(t0, np.moveaxis(rels, 0, -2), cfg.effective_epsilons())
    return int(np.argmax(obj))


def pl_decode_psk(obs: DestObservation, spec: ConstellationSpec, cfg: DecoderConfig) -> int:
    """Piecewise-linear PSK decision via pairwise clipped statistics."""
    _check_psk(spec)
    _check_relay_count(obs, cfg)
    t0, rels = _scalar_statistics_psk(obs, spec)
    winner, _ = _pairwise_select(
        t0, np.moveaxis(rels, 0, -2), cfg.resolved_thresholds(spec.M)
    )
    return int(winner)


def ml_decode_qam(obs: DestObservation, spec: ConstellationSpec, cfg: DecoderConfig) -> int:
    """Maximum-likelihood QAM decision with magnitude feedback."""
    _check_qam(spec)
    if cfg.kind not in ("ml", "naive_eps0", "genie_reference"):
        raise ValueError(f"ml_decode_qam does not handle kind {cfg.kind!r}")
    _check_relay_count(obs, cfg)
    base, rels = _scalar_statistics_qam(obs, spec, cfg)
    obj = _ml_objective(base, np.moveaxis(rels, 0, -2), cfg.effective_epsilons())
    return int(np.argmax(obj))


def pl_decode_qam(obs: DestObservation, spec: ConstellationSpec, cfg: DecoderConfig) -> int:
    """Piecewise-linear QAM decision via pairwise clipped score differences."""
    _check_qam(spec)
    _check_relay_count(obs, cfg)
    base, rels = _scalar_statistics_qam(obs, spec, cfg)
    winner, _ = _pairwise_select(
        base, np.moveaxis(rels, 0, -2), cfg.resolved_thresholds(spec.M)
    )
    return int(winner)


def dest_estimate_relay_prev(
    y_prev2: complex,
    y_prev1: complex,
    spec: ConstellationSpec,
    noise_var: float,
    prev_mag_est: float,
) -> tuple[int, float]:
    """Estimate the relay's previous symbol from its last two samples.

    Returns (index, magnitude); the magnitude feeds the next call's
    prev_mag_est.  The first data symbol needs no call: its predecessor is
    the unit reference.
    """
    _check_qam(spec)
    obj = qam_pair_objective(y_prev2, y_prev1, noise_var, spec.points, prev_mag_est)
    k = int(np.argmin(obj))
    return k, float(np.abs(spec.points[k]))


def decode_psk_frames(y_sd, y_rd, sd_noise_var, rd_noise_vars, spec, cfg):
    """Decode whole PSK frames at once.

    y_sd has shape (..., L+1) and y_rd shape (R, ..., L+1); returns
    (indices of shape (..., L), pairwise-fallback count).
    """
    _check_psk(spec)
    y_sd = np.asarray(y_sd)
    y_rd = np.asarray(y_rd)
    if y_rd.shape[0] != len(cfg.epsilons) or len(rd_noise_vars) != len(cfg.epsilons):
        raise ValueError("relay counts of observations, noise vars, and config differ")
    t0 = _psk_statistics(y_sd[..., :-1], y_sd[..., 1:], spec.points, sd_noise_var)
    rels = np.stack(
        [
            _psk_statistics(y_rd[r][..., :-1], y_rd[r][..., 1:], spec.points, nv)
            for r, nv in enumerate(rd_noise_vars)
        ],
        axis=-2,
    ) if len(rd_noise_vars) else np.empty(t0.shape[:-1] + (0, spec.M))
    if cfg.kind == "pl":
        winners, n_fallback = _pairwise_select(t0, rels, cfg.resolved_thresholds(spec.M))
        return winners, n_fallback
    obj = _ml_objective(t0, rels, cfg.effective_epsilons())
    return np.argmax(obj, axis=-1), 0


def decode_qam_frames(
    y_sd,
    y_rd,
    sd_noise_var,
    rd_noise_vars,
    spec,
    cfg,
    true_source_mags=None,
    true_relay_mags=None,
):
    """Decode whole QAM frames, running the magnitude feedback chains.

    y_sd has shape (B, L+1) and y_rd shape (R, B, L+1).  Decision-directed
    operation feeds each link's previous-magnitude estimate from the
    destination's own decisions; the genie_reference kind reads the true
    magnitudes (source symbols and relay transmit decisions) instead, which
    must then be supplied as (B, L) and (R, B, L) arrays.  Returns (indices
    of shape (B, L), pairwise-fallback count).
    """
    _check_qam(spec)
    y_sd = np.asarray(y_sd)
    y_rd = np.asarray(y_rd)
    n_rel = len(cfg.epsilons)
    if y_rd.shape[0] != n_rel or len(rd_noise_vars) != n_rel:
        raise ValueError("relay counts of observations, noise vars, and config differ")
    genie = cfg.kind == "genie_reference"
    if genie and (true_source_mags is None or true_relay_mags is None):
        raise ValueError("genie_reference decoding requires the true magnitudes")
    n_batch, n_plus_1 = y_sd.shape
    n_data = n_plus_1 - 1
    mags = np.abs(spec.points)
    epsilons = cfg.effective_epsilons()
    thresholds = cfg.resolved_thresholds(spec.M)
    decisions = np.empty((n_batch, n_data), dtype=np.int64)
    m0 = np.ones(n_batch)
    mr = np.ones((n_rel, n_batch))
    est_chain = np.ones((n_rel, n_batch))
    n_fallback = 0
    for n in range(n_data):
        if n > 0:
            if genie:
                m0 = np.asarray(true_source_mags)[:, n - 1]
                for r in range(n_rel):
                    mr[r] = np.asarray(true_relay_mags)[r][:, n - 1]
            else:
                for r in range(n_rel):
                    obj = qam_pair_objective(
                        y_rd[r][:, n - 1, None], y_rd[r][:, n, None],
                        rd_noise_vars[r], spec.points, est_chain[r][:, None],
                    )
                    est = np.argmin(obj, axis=-1)
                    mr[r] = mags[est]
                    est_chain[r] = mr[r]
        base = _qam_scores(
            y_sd[:, n, None], y_sd[:, n + 1, None], spec.points, sd_noise_var,
            m0[:, None],
        )
        rels = np.stack(
            [
                _qam_scores(
                    y_rd[r][:, n, None], y_rd[r][:, n + 1, None], spec.points,
                    rd_noise_vars[r], mr[r][:, None],
                )
                for r in range(n_rel)
            ],
            axis=-2,
        ) if n_rel else np.empty((n_batch, 0, spec.M))
        if cfg.kind == "pl":
            winners, nf = _pairwise_select(base, rels, thresholds)
            n_fallback += nf
        else:
            winners = np.argmax(_ml_objective(base, rels, epsilons), axis=-1)
        decisions[:, n] = winners
        if not genie:
            m0 = mags[decisions[:, n]]
    return decisions, n_fallback


class _OpCounter:
    """Running count of real additions and multiplications."""

    __slots__ = ("n",)

    def __init__(self) -> None:
        self.n = 0


def _counted_statistic(counter, y_prev, y_curr, x, inv_noise_var):
    z1 = np.conj(y_curr) * y_prev
    counter.n += 6
    z2 = z1 * x
    counter.n += 6
    z3 = z2 * inv_noise_var
    counter.n += 2
    return z3.real


def _safe_exp(t: float) -> float:
    return math.exp(min(max(t, -_EXP_CLAMP), _EXP_CLAMP))


def _counted_ml_decode(sd_pair, rd_pair, points, eps, sd_noise_var, rd_noise_var):
    """Operation-counted single-relay ML PSK decode, literal per-candidate form."""
    counter = _OpCounter()
    m = len(points)
    inv_sd = 1.0 / sd_noise_var
    inv_rd = 1.0 / rd_noise_var
    objective = []
    for k in range(m):
        t0 = _counted_statistic(counter, sd_pair[0], sd_pair[1], points[k], inv_sd)
        t_rel = [
            _counted_statistic(counter, rd_pair[0], rd_pair[1], points[i], inv_rd)
            for i in range(m)
        ]
        acc = _safe_exp(t_rel[0])
        for i in range(1, m):
            acc += _safe_exp(t_rel[i])
            counter.n += 1
        own_weight = 1.0 - eps
        counter.n += 1
        own = own_weight * _safe_exp(t_rel[k])
        counter.n += 1
        others = acc - _safe_exp(t_rel[k])
        counter.n += 1
        other_weight = eps / (m - 1)
        counter.n += 1
        cross = other_weight * others
        counter.n += 1
        mix = own + cross
        counter.n += 1
        objective.append(t0 + math.log(mix))
        counter.n += 1
    return int(np.argmax(objective)), counter.n


def _counted_pl_decode(sd_pair, rd_pair, points, threshold, sd_noise_var, rd_noise_var):
    """Operation-counted single-relay PL PSK decode, sequential tournament."""
    counter = _OpCounter()
    m = len(points)
    inv_sd = 1.0 / sd_noise_var
    inv_rd = 1.0 / rd_noise_var
    champ = 0
    for q in range(1, m):
        x_diff = points[champ] - points[q]
        counter.n += 2
        d0 = _counted_statistic(counter, sd_pair[0], sd_pair[1], x_diff, inv_sd)
        dr = _counted_statistic(counter, rd_pair[0], rd_pair[1], x_diff, inv_rd)
        counter.n += 2
        if dr > threshold:
            dr = threshold
        elif dr < -threshold:
            dr = -threshold
        lam = d0 + dr
        counter.n += 1
        if not lam > 0.0:
            champ = q
    return champ, counter.n


def _count_ops_instance(m: int):
    """Deterministic synthetic single-relay observation for op counting."""
    rng = make_stream(202, m)
    vals = rng.normal(size=8)
    sd_pair = (complex(vals[0], vals[1]), complex(vals[2], vals[3]))
    rd_pair = (complex(vals[4], vals[5]), complex(vals[6], vals[7]))
    return sd_pair, rd_pair


def count_ops(kind: str, m: int) -> int:
    """Measured real additions plus multiplications of one PSK decode call."""
    if m < 2:
        raise ValueError(f"m must be >= 2, got {m}")
    kind = kind.lower()
    spec = make_psk(m)
    sd_pair, rd_pair = _count_ops_instance(m)
    eps = 1e-2
    if kind == "ml":
        _, ops = _counted_ml_decode(sd_pair, rd_pair, spec.points, eps, 0.1, 0.1)
        return ops
    if kind == "pl":
        threshold = clip_threshold(m, eps)
        _, ops = _counted_pl_decode(sd_pair, rd_pair, spec.points, threshold, 0.1, 0.1)
        return ops
    raise ValueError(f"kind must be 'ml' or 'pl', got {kind!r}")
