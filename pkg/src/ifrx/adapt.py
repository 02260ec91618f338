"""Targeted fine-tuning of a trained receiver.

The procedure: pick evaluation instances with the largest relative BER gap to
the genie receiver, score the training set against them, then nudge the model
with a handful of updates built from the most beneficial (or harmful) samples
and measure how much of the gap closes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .arnoldi import RitzBasis
from .linkgen import Dataset, genie_lmmse, ls_lmmse, per_sample_ber
from .receiver import Optimizer

log = logging.getLogger(__name__)

MODES = ("first_order_descent", "first_order_ascent", "second_order_aligned")
SELECTIONS = ("influence", "random")
MAX_FRESH_STEPS = 3


class EmptySelectionError(ValueError):
    pass


class StaleBasisError(ValueError):
    pass


class FineTuneAborted(RuntimeError):
    def __init__(self, msg: str, report: "FineTuneReport"):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class TargetSpec:
    eval_index: int
    ber_model: float
    ber_genie: float
    gap: float


def relative_gap(ber_model, ber_genie):
    return (np.asarray(ber_model) - np.asarray(ber_genie)) / np.asarray(ber_genie)


def gap_reduction(before: float, after: float) -> float:
    """Percent of the relative gap removed; negative when the gap widened."""
    if not before > 0:
        raise ValueError(f"gap reduction undefined for before={before}")
    return (before - after) / before * 100.0


def select_targets_from_table(ber_model, ber_genie, top_n: int = 5, genie_floor: float = 1e-3,
                              indices=None) -> list[TargetSpec]:
    ber_model = np.asarray(ber_model, dtype=np.float64)
    ber_genie = np.asarray(ber_genie, dtype=np.float64)
    if ber_model.size == 0:
        raise ValueError("evaluation set is empty")
    idx = np.arange(ber_model.size) if indices is None else np.asarray(indices)
    ok = np.flatnonzero(ber_genie >= genie_floor)
    if ok.size == 0:
        raise EmptySelectionError(f"no instance has genie BER >= {genie_floor}")
    gaps = relative_gap(ber_model[ok], ber_genie[ok])
    order = ok[np.lexsort((idx[ok], -gaps))][:top_n]
    return [TargetSpec(int(idx[i]), float(ber_model[i]), float(ber_genie[i]),
                       float(relative_gap(ber_model[i], ber_genie[i]))) for i in order]


def select_targets(eval_set: Dataset, model, params, top_n: int = 5, genie_floor: float = 1e-3) -> list[TargetSpec]:
    if len(eval_set) == 0:
        raise ValueError("evaluation set is empty")
    bm = per_sample_ber(model.forward_llr(params, eval_set), eval_set.bits)
    bg = per_sample_ber(genie_lmmse(eval_set), eval_set.bits)
    return select_targets_from_table(bm, bg, top_n, genie_floor)


def select_pool(records, which: str, pool_size: int, seed: int) -> np.ndarray:
    """Train indices of the ``pool_size`` most beneficial or harmful records, shuffled."""
    if which not in {"beneficial", "harmful"}:
        raise ValueError(f"unknown pool kind {which!r}")
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    if len(records) < pool_size:
        log.warning("only %d records for a pool of %d; shrinking", len(records), pool_size)
        pool_size = len(records)
    chosen = records[:pool_size] if which == "beneficial" else records[len(records) - pool_size:]
    idx = np.array([r.train_index for r in chosen], dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _stream_id("pool-shuffle")]))
    return idx[rng.permutation(len(idx))]


def _stream_id(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


@dataclass(frozen=True)
class FineTuneConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    instances_per_step: int = 24
    steps: int = 3
    pool_size: int = 50
    mode: str = "first_order_descent"
    selection: str = "influence"
    seed: int = 0
    loss: str = "bce"
    optimizer: str = "adam"
    allow_stale: bool = False

    def __post_init__(self):
        if not 0 <= self.learning_rate < 1:
            raise ValueError("learning_rate must lie in [0, 1)")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.instances_per_step < 1 or self.pool_size < 1:
            raise ValueError("instances_per_step and pool_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.optimizer not in Optimizer.KINDS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def with_replacement(self) -> bool:
        return self.pool_size < self.instances_per_step

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class FineTuneReport:
    mode: str
    selection: str
    seed: int
    config_hash: str
    target_ids: list[int]
    target_ber: list[list[float]] = field(default_factory=list)  # [step][target]
    target_loss: list[list[float]] = field(default_factory=list)
    non_target_ber: list[float] = field(default_factory=list)
    genie_ber: list[float] = field(default_factory=list)
    predicted_loss_change: float | None = None
    aborted: str | None = None

    @property
    def gaps(self) -> np.ndarray:
        """Relative gap per step and target (needs genie BERs)."""
        return relative_gap(np.array(self.target_ber), np.array(self.genie_ber))

    @property
    def gap_before(self) -> list[float]:
        return self.gaps[0].tolist()

    @property
    def gap_after(self) -> list[float]:
        return self.gaps[-1].tolist()

    @property
    def r_gap(self) -> list[float | None]:
        return [gap_reduction(b, a) if b > 0 else None for b, a in zip(self.gap_before, self.gap_after)]

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.genie_ber and self.target_ber:
            d.update(gap_before=self.gap_before, gap_after=self.gap_after, r_gap=self.r_gap)
        return d


class Tracker:
    """Measures targets (and optionally a non-target subset) for a parameter vector."""

    def __init__(self, model, targets, loss_id: str = "bce", non_targets=None,
                 genie_ber=None, target_ids=None):
        self.model = model
        self.targets = targets
        self.loss_id = loss_id
        self.non_targets = non_targets
        self.has_ber = isinstance(targets, Dataset)
        if genie_ber is None and self.has_ber:
            genie_ber = per_sample_ber(genie_lmmse(targets), targets.bits)
        self.genie_ber = [] if genie_ber is None else [float(g) for g in genie_ber]
        self.target_ids = list(range(len(targets))) if target_ids is None else [int(t) for t in target_ids]
        self.last_non_target = None

    def measure(self, params, with_non_targets: bool = True) -> tuple[list[float], list[float], float | None]:
        loss = self.model.per_sample_loss(self.loss_id, params, self.targets)
        if not self.has_ber:
            return [], [float(v) for v in loss], None
        ber = per_sample_ber(self.model.forward_llr(params, self.targets), self.targets.bits)
        other = None
        if with_non_targets and self.non_targets is not None and len(self.non_targets):
            self.last_non_target = per_sample_ber(self.model.forward_llr(params, self.non_targets),
                                                  self.non_targets.bits)
            other = float(self.last_non_target.mean())
        return [float(b) for b in ber], [float(v) for v in loss], other


def _new_report(cfg: FineTuneConfig, tracker: Tracker) -> FineTuneReport:
    return FineTuneReport(cfg.mode, cfg.selection, cfg.seed, cfg.config_hash(), tracker.target_ids,
                          genie_ber=tracker.genie_ber)


def _record(report: FineTuneReport, tracker: Tracker, params, final: bool = False) -> None:
    """Targets are measured after every step; non-targets only before the first and after the last."""
    ber, loss, other = tracker.measure(params, with_non_targets=final or not report.target_loss)
    if ber:
        report.target_ber.append(ber)
    report.target_loss.append(loss)
    if other is not None:
        report.non_target_ber.append(other)
    if not np.all(np.isfinite(loss)):
        report.aborted = f"non-finite target loss after step {len(report.target_loss) - 1}"
        raise FineTuneAborted(report.aborted, report)


def _minibatch_rng(cfg: FineTuneConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(cfg.seed), _stream_id("minibatch")]))


def _draw(rng, pool: np.ndarray, k: int) -> np.ndarray:
    """``k`` pool entries: without replacement inside a step, with replacement across steps."""
    if len(pool) >= k:
        return pool[rng.choice(len(pool), size=k, replace=False)]
    return pool[rng.choice(len(pool), size=k, replace=True)]


def finetune_first_order(model, params, train_set, pool, cfg: FineTuneConfig,
                         tracker: Tracker) -> tuple[np.ndarray, FineTuneReport]:
    """A few optimizer steps on minibatches drawn from ``pool``.

    The optimizer starts from fresh state (Adam by default, like training).
    ``pool`` is ignored under ``selection="random"``: minibatches are then drawn
    from the whole training set. Ascent mode negates the loss gradient but keeps
    the weight-decay pull towards zero.
    """
    if cfg.mode == "second_order_aligned":
        raise ValueError("use finetune_second_order for the aligned mode")
    pool = np.arange(len(train_set)) if cfg.selection == "random" else np.asarray(pool, dtype=np.int64)
    if pool.size == 0:
        raise ValueError("fine-tuning pool is empty")
    sign = 1.0 if cfg.mode == "first_order_descent" else -1.0
    rng = _minibatch_rng(cfg)
    opt = Optimizer(cfg.optimizer, weight_decay=cfg.weight_decay)
    theta = np.array(params, dtype=np.float64, copy=True)
    report = _new_report(cfg, tracker)
    _record(report, tracker, theta)
    if cfg.learning_rate == 0:
        for s in range(cfg.steps):
            _record(report, tracker, theta, final=s == cfg.steps - 1)
        return theta, report
    for s in range(cfg.steps):
        batch = train_set.subset(np.sort(_draw(rng, pool, cfg.instances_per_step)))
        g = model.grad(cfg.loss, theta, batch)
        if not np.all(np.isfinite(g)):
            report.aborted = f"non-finite gradient at step {len(report.target_loss)}"
            raise FineTuneAborted(report.aborted, report)
        theta = opt.step(theta, sign * g, cfg.learning_rate)
        _record(report, tracker, theta, final=s == cfg.steps - 1)
    return theta, report


@dataclass(frozen=True)
class InfluencePair:
    """A (target, training sample) pair with the score and the sample's ``H^{-1} g``."""

    target: int
    train_index: int
    score: float
    ihvp: np.ndarray = field(repr=False, compare=False)


def _check_basis(basis: RitzBasis, expected_hash: str | None, cfg: FineTuneConfig) -> None:
    if expected_hash is not None and basis.source_hash != expected_hash:
        raise StaleBasisError("Ritz basis hash does not match the current model snapshot")
    if cfg.steps > MAX_FRESH_STEPS and not cfg.allow_stale:
        raise StaleBasisError(f"{cfg.steps} steps on one basis exceeds {MAX_FRESH_STEPS}; pass allow_stale")


def _aligned_update(pairs: list[InfluencePair]) -> tuple[np.ndarray, float]:
    step = np.zeros_like(pairs[0].ihvp, dtype=np.float64)
    total = 0.0
    for p in pairs:
        step += np.sign(p.score) * p.ihvp
        total += abs(p.score)
    return step, total


def finetune_second_order(model, params, pairs: list[InfluencePair], basis: RitzBasis, cfg: FineTuneConfig,
                          tracker: Tracker, expected_hash: str | None = None) -> tuple[np.ndarray, FineTuneReport]:
    """Influence-aligned steps ``theta += eta * sum sign(I) H^{-1} g`` over pair minibatches.

    The IHVPs are the ones computed at scoring time and are not refreshed, so
    the basis is trusted for a few steps only. The predicted first-step change of
    the summed target loss is ``-eta * sum |I|``.
    """
    if not pairs:
        raise ValueError("no influence pairs")
    _check_basis(basis, expected_hash, cfg)
    rng = _minibatch_rng(cfg)
    theta = np.array(params, dtype=np.float64, copy=True)
    report = _new_report(cfg, tracker)
    _record(report, tracker, theta)
    order = np.arange(len(pairs))
    per_step = min(cfg.instances_per_step, len(pairs))
    for s in range(cfg.steps):
        chosen = [pairs[i] for i in np.sort(_draw(rng, order, per_step))]
        step, total = _aligned_update(chosen)
        if s == 0:
            report.predicted_loss_change = -cfg.learning_rate * total
        theta = theta + cfg.learning_rate * step
        _record(report, tracker, theta, final=s == cfg.steps - 1)
    return theta, report


def finetune_multi_target(model, params, pairs: list[InfluencePair], basis: RitzBasis, cfg: FineTuneConfig,
                          tracker: Tracker, expected_hash: str | None = None) -> tuple[np.ndarray, FineTuneReport]:
    """One aggregated aligned update over the whole pair set per step."""
    if not pairs:
        raise ValueError("pair set M is empty")
    _check_basis(basis, expected_hash, cfg)
    step, total = _aligned_update(pairs)
    theta = np.array(params, dtype=np.float64, copy=True)
    report = _new_report(cfg, tracker)
    report.predicted_loss_change = -cfg.learning_rate * total
    _record(report, tracker, theta)
    for s in range(cfg.steps):
        theta = theta + cfg.learning_rate * step
        _record(report, tracker, theta, final=s == cfg.steps - 1)
    return theta, report


def build_pairs(records_by_target: dict, projected, basis: RitzBasis, pool_size: int, which: str = "beneficial",
                seed: int = 0) -> list[InfluencePair]:
    """Pair set M: each target contributes its own top ``pool_size // n_targets`` samples."""
    per = max(1, pool_size // max(1, len(records_by_target)))
    out = []
    for tid in sorted(records_by_target):
        recs = records_by_target[tid]
        pick = select_pool(recs, which, min(per, len(recs)), seed)
        score = {r.train_index: r.score for r in recs}
        ihvps = projected.ihvp(basis, pick)
        out.extend(InfluencePair(tid, int(i), score[int(i)], v) for i, v in zip(pick, ihvps))
    return out


# ------------------------------------------------------------------- evaluation


def evaluate_model(model, params, eval_set: Dataset, snr_bins: int = 55,
                   snr_range: tuple[float, float] | None = None) -> dict:
    """Per-SNR-bin mean BER of the model, LS-LMMSE and genie, plus the per-instance table."""
    if snr_bins < 1:
        raise ValueError("snr_bins must be >= 1")
    if len(eval_set) == 0:
        raise ValueError("evaluation set is empty")
    bits = eval_set.bits
    ber = {
        "model": per_sample_ber(model.forward_llr(params, eval_set), bits),
        "ls_lmmse": per_sample_ber(ls_lmmse(eval_set), bits),
        "genie_lmmse": per_sample_ber(genie_lmmse(eval_set), bits),
    }
    return ber_table(ber, eval_set.snr_db, snr_bins, snr_range)


def ber_table(ber: dict[str, np.ndarray], snr_db: np.ndarray, snr_bins: int = 55,
              snr_range: tuple[float, float] | None = None) -> dict:
    snr = np.asarray(snr_db, dtype=np.float64)
    lo, hi = snr_range if snr_range is not None else (float(snr.min()), float(snr.max()))
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, snr_bins + 1)
    which = np.clip(np.searchsorted(edges, snr, side="right") - 1, 0, snr_bins - 1)
    bins = []
    for b in range(snr_bins):
        sel = which == b
        n = int(sel.sum())
        if n == 0:
            continue
        row = {"bin": b, "snr_lo": float(edges[b]), "snr_hi": float(edges[b + 1]), "count": n}
        row.update({k: float(v[sel].mean()) for k, v in ber.items()})
        bins.append(row)
    instances = [{"index": i, "snr_db": float(snr[i]), **{k: float(v[i]) for k, v in ber.items()}}
                 for i in range(len(snr))]
    return {"edges": edges.tolist(), "bins": bins, "instances": instances}
