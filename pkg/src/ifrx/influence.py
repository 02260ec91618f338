"""Influence scores of training samples on evaluation targets.

All variants share the numerator ``-g_eval^T H^{-1} g_train`` (classic when both
gradients use the same loss, cross-loss otherwise) and differ in normalization
by quantities of the training gradient alone:

    theta-relative  ||H^{-1} g_train||
    ell-relative    sqrt(s),         s = g_train^T H^{-1} g_train
    newfluence      1 + s

``s`` is the unsigned quadratic form (the self-influence without its leading
minus), so the square root is defined on positive-definite Hessians. Negative
scores mark beneficial samples.

Scoring works in Ritz coordinates: every gradient is projected once onto the
basis (``c = U g``), after which each score is a k-dimensional dot product.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .arnoldi import RitzBasis, ihvp_apply

log = logging.getLogger(__name__)

VARIANTS = ("classic", "clif", "theta_rel", "ell_rel", "newfluence")
SELF_INFLUENCE_CONVENTION = "s = +g^T H^-1 g"
_ALIASES = {"ell-rel": "ell_rel", "theta-rel": "theta_rel", "l-rel": "ell_rel", "ell_relative": "ell_rel",
            "theta_relative": "theta_rel"}


class UndefinedScoreError(ArithmeticError):
    pass


def canonical_variant(name: str) -> str:
    key = _ALIASES.get(name, name).replace("-", "_")
    if key not in VARIANTS:
        raise ValueError(f"unknown influence variant {name!r}")
    return key


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    return a, b


def influence_classic(grad_test, grad_train, basis: RitzBasis) -> float:
    grad_test, grad_train = _check(grad_test, grad_train)
    return -float(grad_test @ ihvp_apply(basis, grad_train))


def influence_clif(grad_test_eval_loss, grad_train_train_loss, basis: RitzBasis) -> float:
    """Cross-loss influence; the basis must come from the training-loss Hessian."""
    return influence_classic(grad_test_eval_loss, grad_train_train_loss, basis)


def self_influence(grad_train, basis: RitzBasis) -> float:
    g = np.asarray(grad_train, dtype=np.float64)
    return float(g @ ihvp_apply(basis, g))


def influence_theta_relative(grad_test, grad_train, basis: RitzBasis, tol: float = 1e-12) -> float:
    grad_test, grad_train = _check(grad_test, grad_train)
    denom = np.linalg.norm(ihvp_apply(basis, grad_train))
    if denom < tol:
        raise UndefinedScoreError(f"||H^-1 g|| = {denom:.3g} below {tol}")
    return influence_classic(grad_test, grad_train, basis) / denom


def influence_ell_relative(grad_test, grad_train, basis: RitzBasis, tol: float = 1e-12) -> float:
    grad_test, grad_train = _check(grad_test, grad_train)
    s = self_influence(grad_train, basis)
    if s <= tol:
        raise UndefinedScoreError(f"self-influence {s:.3g} <= {tol}")
    return influence_classic(grad_test, grad_train, basis) / np.sqrt(s)


def influence_newfluence(grad_test, grad_train, basis: RitzBasis, tol: float = 1e-12) -> float:
    grad_test, grad_train = _check(grad_test, grad_train)
    s = self_influence(grad_train, basis)
    if abs(1.0 + s) <= tol:
        raise UndefinedScoreError(f"|1 + s| = {abs(1 + s):.3g} <= {tol}")
    return influence_classic(grad_test, grad_train, basis) / (1.0 + s)


# ------------------------------------------------------------------- batched scoring


@dataclass
class Projected:
    """Training gradients reduced to what every variant needs."""

    coords: np.ndarray  # [n, k] = U g
    self_term: np.ndarray  # [n] = g^T H^-1 g
    ihvp_norm: np.ndarray  # [n] = ||H^-1 g||

    @classmethod
    def from_coords(cls, coords: np.ndarray, basis: RitzBasis) -> "Projected":
        coords = np.atleast_2d(coords)
        lam = basis.eigenvalues
        scaled = coords / lam
        gram = basis.vectors @ basis.vectors.T
        s = np.einsum("nk,nk->n", coords, scaled)
        nrm = np.sqrt(np.maximum(np.einsum("nk,kj,nj->n", scaled, gram, scaled), 0.0))
        return cls(coords, s, nrm)

    def ihvp(self, basis: RitzBasis, rows=None) -> np.ndarray:
        """Reconstruct ``H^-1 g`` for the selected rows (reuses the stored projection)."""
        c = self.coords if rows is None else self.coords[rows]
        return (c / basis.eigenvalues) @ basis.vectors


def project_gradients(grads: np.ndarray, basis: RitzBasis) -> Projected:
    basis.check_floor()
    return Projected.from_coords(basis.project(grads), basis)


def score_matrix(test_coords: np.ndarray, train: Projected, basis: RitzBasis, variant: str,
                 tol: float = 1e-12) -> np.ndarray:
    """Scores ``[n_test, n_train]``; undefined entries are NaN."""
    variant = canonical_variant(variant)
    basis.check_floor()
    tc = np.atleast_2d(test_coords)
    classic = -(tc / basis.eigenvalues) @ train.coords.T
    if variant in {"classic", "clif"}:
        return classic
    with np.errstate(divide="ignore", invalid="ignore"):
        if variant == "theta_rel":
            denom = np.where(train.ihvp_norm >= tol, train.ihvp_norm, np.nan)
        elif variant == "ell_rel":
            denom = np.where(train.self_term > tol, np.sqrt(np.abs(train.self_term)), np.nan)
        else:
            denom = np.where(np.abs(1.0 + train.self_term) > tol, 1.0 + train.self_term, np.nan)
        return classic / denom


@dataclass(frozen=True)
class InfluenceRecord:
    train_index: int
    test_index: int
    variant: str
    score: float
    self_term: float
    loss_train: str = "bce"
    loss_eval: str = "bce"


def rank_scores(scores: np.ndarray, test_index: int, variant: str, self_terms: np.ndarray,
                loss_train: str = "bce", loss_eval: str = "bce",
                train_indices: np.ndarray | None = None) -> tuple[list[InfluenceRecord], int]:
    """Ascending records (beneficial first), stable on train index; NaN scores are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(len(scores)) if train_indices is None else np.asarray(train_indices)
    ok = np.isfinite(scores)
    skipped = int((~ok).sum())
    if skipped:
        log.info("target %d: skipped %d samples with undefined %s score", test_index, skipped, variant)
    sel = np.flatnonzero(ok)
    order = sel[np.lexsort((idx[sel], scores[sel]))]
    recs = [InfluenceRecord(int(idx[i]), int(test_index), variant, float(scores[i]), float(self_terms[i]),
                            loss_train, loss_eval) for i in order]
    return recs, skipped


def rank_training_set(test_targets, train_set, variant: str, losses: tuple[str, str], basis: RitzBasis,
                      model, params, expected_hash: str | None = None, grad_cache: "GradCache | None" = None,
                      cache_key: str = "", block: int = 256) -> tuple[dict[int, list[InfluenceRecord]], dict]:
    """Score every training sample against every target and sort.

    ``test_targets`` maps target ids to single-sample batches (``{eval_index: batch}``).
    Returns ``({target_id: records}, {target_id: skipped_count})``.
    """
    if expected_hash is not None and basis.source_hash != expected_hash:
        raise ValueError("Ritz basis was built for a different model/dataset/loss")
    variant = canonical_variant(variant)
    loss_train, loss_eval = losses
    if variant == "classic" and loss_train != loss_eval:
        variant = "clif"
    train = projected_training_gradients(model, params, train_set, loss_train, basis, grad_cache, cache_key, block)
    out, skipped = {}, {}
    for tid, batch in test_targets.items():
        g_test = model.grad(loss_eval, params, batch)
        sc = score_matrix(basis.project(g_test), train, basis, variant)[0]
        out[tid], skipped[tid] = rank_scores(sc, tid, variant, train.self_term, loss_train, loss_eval)
    return out, skipped


# ------------------------------------------------------------------- gradient cache


class GradCache:
    """Per-sample training gradients on disk as float32 ``.npy``, keyed by content hash."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(*parts: str) -> str:
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:24]

    def path(self, key: str) -> Path:
        return self.directory / f"grads-{key}.npy"

    def get(self, key: str):
        p = self.path(key)
        return np.load(p, mmap_mode="r") if p.exists() else None

    def put(self, key: str, grads: np.ndarray) -> None:
        tmp = self.path(key).with_suffix(".tmp.npy")
        np.save(tmp, np.asarray(grads, dtype=np.float32))
        tmp.replace(self.path(key))


def training_gradients(model, params, train_set, loss_id: str, grad_cache: GradCache | None = None,
                       cache_key: str = "", block: int = 256) -> np.ndarray:
    """All per-sample gradients, float32-rounded (the cached representation)."""
    if grad_cache is not None and cache_key:
        hit = grad_cache.get(cache_key)
        if hit is not None:
            return hit
    n = len(train_set)
    out = np.empty((n, model.n_params), dtype=np.float32)
    for lo in range(0, n, block):
        idx = np.arange(lo, min(n, lo + block))
        out[idx] = model.per_sample_grads(loss_id, params, train_set.subset(idx))
    if grad_cache is not None and cache_key:
        grad_cache.put(cache_key, out)
    return out


def projected_training_gradients(model, params, train_set, loss_id: str, basis: RitzBasis,
                                 grad_cache: GradCache | None = None, cache_key: str = "",
                                 block: int = 256) -> Projected:
    G = training_gradients(model, params, train_set, loss_id, grad_cache, cache_key, block)
    coords = np.empty((len(G), basis.k))
    for lo in range(0, len(G), block):
        coords[lo : lo + block] = basis.project(np.asarray(G[lo : lo + block], dtype=np.float64))
    basis.check_floor()
    return Projected.from_coords(coords, basis)


# ------------------------------------------------------------------- reporting


def score_histogram(records: list[InfluenceRecord], bins: int = 50, n_markers: int = 50) -> dict:
    """Histogram of scores plus the most beneficial / most harmful index lists."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not records:
        raise ValueError("no records to histogram")
    scores = np.array([r.score for r in records])
    finite = np.isfinite(scores)
    counts, edges = np.histogram(scores[finite], bins=bins)
    ordered = sorted((r for r, f in zip(records, finite) if f), key=lambda r: (r.score, r.train_index))
    return {
        "edges": edges.tolist(),
        "counts": counts.tolist(),
        "n_records": int(finite.sum()),
        "n_skipped": int((~finite).sum()),
        "beneficial": [r.train_index for r in ordered[:n_markers]],
        "harmful": [r.train_index for r in ordered[::-1][:n_markers]],
    }


def write_scores(path, records_by_target: dict[int, list[InfluenceRecord]], header: dict) -> Path:
    """JSON-lines: one header line, then one record per line (targets in ascending order)."""
    path = Path(path)
    head = {"header": True, "self_influence": SELF_INFLUENCE_CONVENTION, **header}
    with path.open("w") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for tid in sorted(records_by_target):
            for r in records_by_target[tid]:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    return path


def read_scores(path) -> tuple[dict, dict[int, list[InfluenceRecord]]]:
    header, recs = None, {}
    with Path(path).open() as fh:
        for line in fh:
            d = json.loads(line)
            if d.get("header"):
                header = d
                continue
            r = InfluenceRecord(**d)
            recs.setdefault(r.test_index, []).append(r)
    if header is None:
        raise ValueError(f"{path}: missing header line")
    return header, recs
