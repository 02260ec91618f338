"""Krylov approximation of a loss Hessian and the inverse-HVP it induces.

Arnoldi with full re-orthogonalization builds an orthonormal basis ``Q`` and a
small upper-Hessenberg ``T = Q^T H Q``. Ritz pairs ``(lam_i, u_i = Q y_i)`` of
``T`` then give

    H^{-1} v  ~=  sum_i (1 / lam_i) u_i (u_i^T v)

over the retained pairs. Hessians are symmetric, so ``T`` is symmetrized before
the eigendecomposition; on exact arithmetic it is already tridiagonal.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

RITZ_MAGIC = b"IFRXRITZ"
_RITZ_HEADER = struct.Struct("<8sIII32s")


@dataclass
class BatchSchedule:
    """Which training indices feed the Hessian at each Arnoldi step.

    ``cycle`` walks a seeded permutation of the training set (re-shuffled on
    every pass), taking ``batches_per_step`` consecutive batches per step.
    ``fixed`` reuses the same leading batches at every step, so the operator is
    one fixed matrix.
    """

    n: int
    batch_size: int = 22
    batches_per_step: int = 1
    seed: int = 0
    mode: str = "cycle"
    _stream: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.n < 1 or self.batch_size < 1 or self.batches_per_step < 1:
            raise ValueError("schedule sizes must be >= 1")
        if self.mode not in {"cycle", "fixed"}:
            raise ValueError(f"unknown schedule mode {self.mode!r}")

    @property
    def per_step(self) -> int:
        return self.batch_size * self.batches_per_step

    def _ensure(self, upto: int) -> None:
        if self._stream is not None and len(self._stream) >= upto:
            return
        # regenerate from the seed so the stream never depends on call order
        rng = np.random.default_rng(self.seed)
        parts = []
        total = 0
        while total < upto:
            parts.append(rng.permutation(self.n))
            total += self.n
        self._stream = np.concatenate(parts)

    def batch(self, step: int) -> np.ndarray:
        if self.mode == "fixed":
            self._ensure(self.per_step)
            return np.sort(self._stream[: min(self.per_step, self.n)])
        lo = step * self.per_step
        self._ensure(lo + self.per_step)
        return np.sort(self._stream[lo : lo + self.per_step])

    def passes(self, m: int) -> float:
        """Training-set passes consumed by ``m`` steps."""
        if self.mode == "fixed":
            return min(self.per_step, self.n) / self.n
        return m * self.per_step / self.n

    @classmethod
    def for_passes(cls, n: int, m: int, passes: float = 3.0, batch_size: int = 22, seed: int = 0) -> "BatchSchedule":
        """Cycle schedule sized so ``m`` steps cover the training set about ``passes`` times."""
        bps = max(1, int(np.ceil(passes * n / (batch_size * m))))
        return cls(n=n, batch_size=batch_size, batches_per_step=bps, seed=seed, mode="cycle")


@dataclass
class ArnoldiResult:
    Q: np.ndarray  # [m, P] orthonormal rows
    T: np.ndarray  # [m, m] upper Hessenberg
    beta: float  # norm of the residual direction after the last step
    breakdown: bool
    q_next: np.ndarray | None = None

    @property
    def m(self) -> int:
        return len(self.Q)


def arnoldi_iterate(hvp_oracle: Callable, m: int, start: np.ndarray,
                    batch_schedule: BatchSchedule | None = None, breakdown_tol: float = 1e-12,
                    progress: Callable | None = None) -> ArnoldiResult:
    """Run ``m`` Arnoldi steps against ``hvp_oracle``.

    ``hvp_oracle(v)`` or, with a schedule, ``hvp_oracle(v, indices)``. Each new
    direction is orthogonalized twice against the whole basis. A direction whose
    norm falls below ``breakdown_tol * ||H q||`` ends the sweep early.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    start = np.asarray(start, dtype=np.float64)
    nrm = np.linalg.norm(start)
    if not nrm > 0:
        raise ValueError("start vector must be non-zero")
    P = start.size
    m = min(m, P)
    Q = np.zeros((m, P))
    T = np.zeros((m, m))
    Q[0] = start / nrm
    beta = 0.0
    q_next = None
    for j in range(m):
        if batch_schedule is None:
            w = np.asarray(hvp_oracle(Q[j]), dtype=np.float64).copy()
        else:
            w = np.asarray(hvp_oracle(Q[j], batch_schedule.batch(j)), dtype=np.float64).copy()
        scale = np.linalg.norm(w)
        for _ in range(2):
            h = Q[: j + 1] @ w
            w -= Q[: j + 1].T @ h
            T[: j + 1, j] += h
        beta = float(np.linalg.norm(w))
        if progress is not None:
            progress(j + 1, m)
        if beta <= breakdown_tol * max(scale, np.finfo(float).tiny):
            n = j + 1
            return ArnoldiResult(Q[:n].copy(), T[:n, :n].copy(), beta, True, None)
        if j + 1 < m:
            T[j + 1, j] = beta
            Q[j + 1] = w / beta
        else:
            q_next = w / beta
    return ArnoldiResult(Q, T, beta, False, q_next)


@dataclass
class RitzBasis:
    eigenvalues: np.ndarray  # [k], sorted by |lambda| descending
    vectors: np.ndarray  # [k, P]
    krylov_dim: int
    source_hash: str = ""
    residuals: np.ndarray | None = None
    eigen_floor: float = 0.0

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if len(self.eigenvalues) != len(self.vectors):
            raise ValueError("eigenvalue / vector count mismatch")
        if self.residuals is None:
            self.residuals = np.zeros_like(self.eigenvalues)

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def n_params(self) -> int:
        return self.vectors.shape[1]

    def project(self, v: np.ndarray) -> np.ndarray:
        """Coordinates ``U v``; accepts ``[P]`` or ``[n, P]``."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.n_params:
            raise ValueError(f"vector length {v.shape[-1]} != P={self.n_params}")
        return v @ self.vectors.T

    def check_floor(self) -> None:
        bad = np.abs(self.eigenvalues) < self.eigen_floor
        if np.any(bad) or np.any(self.eigenvalues == 0):
            raise ValueError("basis retains Ritz values below the eigen floor; filter them at selection")

    def truncate(self, k: int) -> "RitzBasis":
        return RitzBasis(self.eigenvalues[:k], self.vectors[:k], self.krylov_dim, self.source_hash,
                         self.residuals[:k], self.eigen_floor)


def ritz_eigenpairs(result: ArnoldiResult, k: int, eigen_floor_rel: float = 1e-6,
                    max_residual_rel: float = 0.1, source_hash: str = "",
                    filter_pairs: bool = True) -> RitzBasis:
    """Top-``k`` Ritz pairs by ``|lambda|`` after dropping near-zero and unconverged pairs.

    Residuals come from the Arnoldi relation
    ``H u - lam u = Q (T y - lam y) + beta q_next y_last``.
    """
    m = result.m
    if k > m:
        raise ValueError(f"k={k} exceeds the Krylov dimension m={m}")
    if k < 1:
        raise ValueError("k must be >= 1")
    T = result.T
    Ts = 0.5 * (T + T.T)
    lam, Y = np.linalg.eigh(Ts)
    res = np.sqrt(np.sum((T @ Y - Y * lam) ** 2, axis=0) + (result.beta * Y[-1]) ** 2)
    order = np.argsort(-np.abs(lam), kind="stable")
    lam, Y, res = lam[order], Y[:, order], res[order]
    lam_max = np.abs(lam[0]) if len(lam) else 0.0
    floor = eigen_floor_rel * lam_max
    keep = np.ones(len(lam), dtype=bool)
    if filter_pairs:
        keep = (np.abs(lam) >= floor) & (np.abs(lam) > 0) & (res <= max_residual_rel * np.abs(lam))
    idx = np.flatnonzero(keep)[:k]
    if len(idx) < k:
        log.info("kept %d of %d requested Ritz pairs after filtering", len(idx), k)
    U = Y[:, idx].T @ result.Q
    return RitzBasis(lam[idx], U, m, source_hash, res[idx], floor)


def ihvp_apply(basis: RitzBasis, v: np.ndarray) -> np.ndarray:
    """``sum_i (1/lam_i) u_i (u_i^T v)``; accepts ``[P]`` or ``[n, P]``."""
    basis.check_floor()
    c = basis.project(v)
    return (c / basis.eigenvalues) @ basis.vectors


def truncation_diagnostic(eigenvalues, probes, basis: RitzBasis | None = None, threshold: float = 0.04,
                          eigen_floor_rel: float = 1e-6) -> dict:
    """Marginal effect of adding the k-th Ritz term, averaged over probe vectors.

    ``probes`` are parameter-space vectors when ``basis`` is given, otherwise
    coordinates in the eigenbasis. For each k the table holds

    * ``err``: mean truncation residual ``||H p - H_k p||`` of the rank-k operator;
    * ``abs_drop`` / ``rel_drop``: its decrease from k-1 to k (absolute, relative);
    * ``ihvp_norm`` / ``ihvp_abs_change`` / ``ihvp_rel_change``: same for ``||H_k^{-1} p||``.

    Terms below the eigen floor are unusable and contribute nothing. The elbow is
    the number of terms kept before the first term whose ``rel_drop`` falls below
    ``threshold`` (``len(eigenvalues)`` if none does).
    """
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if lam.size < 2:
        raise ValueError("need at least two Ritz values")
    order = np.argsort(-np.abs(lam), kind="stable")
    lam = lam[order]
    m = lam.size
    P = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    C = basis.project(P) if basis is not None else P[:, :m]
    C = C[:, order] if C.shape[1] == m else C
    usable = (np.abs(lam) >= eigen_floor_rel * np.abs(lam[0])) & (lam != 0)

    energy = (C * lam) ** 2  # [n_probes, m]
    used = np.zeros(m, dtype=bool)
    err = np.empty(m + 1)
    inv = np.empty(m + 1)
    inv_terms = np.where(usable, C**2 / np.where(usable, lam, 1.0) ** 2, 0.0)
    err[0] = np.mean(np.sqrt(energy.sum(axis=1)))
    inv[0] = 0.0
    for k in range(1, m + 1):
        used[k - 1] = usable[k - 1]
        err[k] = np.mean(np.sqrt(energy[:, ~used].sum(axis=1)))
        inv[k] = np.mean(np.sqrt(inv_terms[:, :k].sum(axis=1)))

    abs_drop = err[:-1] - err[1:]
    rel_drop = np.divide(abs_drop, err[:-1], out=np.zeros(m), where=err[:-1] > 0)
    inv_abs = inv[1:] - inv[:-1]
    inv_rel = np.divide(inv_abs, inv[:-1], out=np.zeros(m), where=inv[:-1] > 0)

    elbow = m
    for k in range(2, m + 1):
        if rel_drop[k - 1] < threshold:
            elbow = k - 1
            break
    rows = [
        {"k": k, "eigenvalue": float(lam[k - 1]), "usable": bool(usable[k - 1]), "err": float(err[k]),
         "abs_drop": float(abs_drop[k - 1]), "rel_drop": float(rel_drop[k - 1]),
         "ihvp_norm": float(inv[k]), "ihvp_abs_change": float(inv_abs[k - 1]),
         "ihvp_rel_change": float(inv_rel[k - 1])}
        for k in range(1, m + 1)
    ]
    return {"rows": rows, "elbow": int(elbow), "threshold": threshold, "initial_err": float(err[0])}


# ------------------------------------------------------------------- helpers


def start_vector(n_params: int, seed: int) -> np.ndarray:
    v = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA5])).standard_normal(n_params)
    return v / np.linalg.norm(v)


def source_digest(*parts: str) -> str:
    return hashlib.sha256("|".join(parts).encode()).hexdigest()


def build_basis(hvp_oracle: Callable, n_params: int, m: int, k: int, seed: int,
                schedule: BatchSchedule | None = None, source_hash: str = "",
                eigen_floor_rel: float = 1e-6, max_residual_rel: float = 0.1,
                progress: Callable | None = None) -> tuple[RitzBasis, ArnoldiResult]:
    """Arnoldi sweep from the seeded start vector, then Ritz selection."""
    m = min(m, n_params)
    res = arnoldi_iterate(hvp_oracle, m, start_vector(n_params, seed), schedule, progress=progress)
    basis = ritz_eigenpairs(res, min(k, res.m), eigen_floor_rel, max_residual_rel, source_hash)
    return basis, res


def basis_bytes(basis: RitzBasis) -> bytes:
    digest = bytes.fromhex(basis.source_hash) if basis.source_hash else bytes(32)
    header = _RITZ_HEADER.pack(RITZ_MAGIC, basis.n_params, basis.k, basis.krylov_dim, digest)
    return (header + basis.eigenvalues.astype("<f8").tobytes()
            + basis.vectors.astype("<f4").tobytes())


def save_basis(path, basis: RitzBasis, extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(basis_bytes(basis))
    side = {"residuals": [float(r) for r in basis.residuals], "eigen_floor": basis.eigen_floor,
            "source_hash": basis.source_hash}
    if extra:
        side.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def load_basis(path) -> RitzBasis:
    path = Path(path)
    raw = path.read_bytes()
    magic, P, k, m, digest = _RITZ_HEADER.unpack_from(raw, 0)
    if magic != RITZ_MAGIC:
        raise ValueError(f"{path}: not a Ritz basis file")
    off = _RITZ_HEADER.size
    lam = np.frombuffer(raw, dtype="<f8", count=k, offset=off).copy()
    off += 8 * k
    U = np.frombuffer(raw, dtype="<f4", count=k * P, offset=off).astype(np.float64).reshape(k, P)
    side_path = path.with_suffix(path.suffix + ".json")
    side = json.loads(side_path.read_text()) if side_path.exists() else {}
    return RitzBasis(lam, U, m, digest.hex() if any(digest) else "",
                     np.asarray(side.get("residuals", np.zeros(k))), side.get("eigen_floor", 0.0))
