"""Synthetic OFDM resource grids, classical receivers and the uncoded BER.

Grids are ``S`` subcarriers by ``T`` OFDM symbols, QPSK with Gray mapping,
full pilot symbols at configurable time indices. The channel is block Rayleigh
fading (constant in time) with exponential correlation across subcarriers,
generated as an AR(1) recursion in frequency.

LLR convention: natural log, ``llr = ln P(b=0)/P(b=1)``, so a positive value
decides bit 0. A zero LLR also decides bit 0.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SQRT2 = np.sqrt(2.0)
DATASET_MAGIC = b"IFRX"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHIIIQ")
_SPLIT_KEYS = {"train": 0, "eval": 1}


class ConfigError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class LinkConfig:
    n_subcarriers: int = 72
    n_symbols: int = 14
    pilot_symbols: tuple[int, ...] = (3,)
    snr_db_min: float = -4.0
    snr_db_max: float = 20.0
    channel: str = "block_rayleigh"  # or "awgn" (h = 1 everywhere)
    freq_correlation: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "pilot_symbols", tuple(int(p) for p in self.pilot_symbols))
        self.validate()

    def validate(self) -> None:
        if self.n_subcarriers < 1 or self.n_symbols < 1:
            raise ConfigError("grid must have at least one subcarrier and one symbol")
        if self.snr_db_min > self.snr_db_max:
            raise ConfigError(f"inverted SNR range [{self.snr_db_min}, {self.snr_db_max}]")
        if np.isnan(self.snr_db_min) or np.isnan(self.snr_db_max):
            raise ConfigError("SNR bounds must not be NaN")
        if any(p < 0 or p >= self.n_symbols for p in self.pilot_symbols):
            raise ConfigError("pilot symbol index outside the grid")
        if len(set(self.pilot_symbols)) != len(self.pilot_symbols):
            raise ConfigError("duplicate pilot symbol index")
        if len(self.pilot_symbols) >= self.n_symbols:
            raise ConfigError("no data symbols left after pilots")
        if self.channel not in {"block_rayleigh", "awgn"}:
            raise ConfigError(f"unknown channel model {self.channel!r}")
        if not 0.0 <= self.freq_correlation <= 1.0:
            raise ConfigError("freq_correlation must lie in [0, 1]")

    @property
    def data_symbols(self) -> tuple[int, ...]:
        return tuple(t for t in range(self.n_symbols) if t not in self.pilot_symbols)

    def pilot_mask(self) -> np.ndarray:
        mask = np.zeros((self.n_subcarriers, self.n_symbols), dtype=bool)
        mask[:, list(self.pilot_symbols)] = True
        return mask

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pilot_symbols"] = list(self.pilot_symbols)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LinkConfig":
        return cls(**{**d, "pilot_symbols": tuple(d.get("pilot_symbols", (3,)))})


@dataclass(frozen=True)
class Sample:
    grid_rx: np.ndarray  # [S, T] complex
    pilot_mask: np.ndarray  # [S, T] bool
    pilot_tx: np.ndarray  # [n_pilots] complex, row-major over pilot_mask
    bits: np.ndarray  # [S, T_data, 2] uint8
    channel: np.ndarray  # [S, T] complex
    noise_var: float
    snr_db: float


@dataclass
class Dataset:
    """Struct-of-arrays container; ``ds[i]`` yields a :class:`Sample`."""

    config: LinkConfig
    grid_rx: np.ndarray  # [n, S, T] complex64
    pilot_tx: np.ndarray  # [n, n_pilots] complex64
    bits: np.ndarray  # [n, S, T_data, 2] uint8
    channel: np.ndarray  # [n, S, T] complex64
    noise_var: np.ndarray  # [n] float32
    snr_db: np.ndarray  # [n] float32
    seed: int = 0
    split: str = "train"
    pilot_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.pilot_mask = self.config.pilot_mask()
        n = len(self.grid_rx)
        for name in ("pilot_tx", "bits", "channel", "noise_var", "snr_db"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.grid_rx)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            grid_rx=self.grid_rx[i],
            pilot_mask=self.pilot_mask,
            pilot_tx=self.pilot_tx[i],
            bits=self.bits[i],
            channel=self.channel[i],
            noise_var=float(self.noise_var[i]),
            snr_db=float(self.snr_db[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        return Dataset(
            config=self.config,
            grid_rx=self.grid_rx[idx],
            pilot_tx=self.pilot_tx[idx],
            bits=self.bits[idx],
            channel=self.channel[idx],
            noise_var=self.noise_var[idx],
            snr_db=self.snr_db[idx],
            seed=self.seed,
            split=self.split,
        )

    @classmethod
    def from_samples(cls, config: LinkConfig, samples, seed: int = 0, split: str = "train") -> "Dataset":
        samples = list(samples)
        return cls(
            config=config,
            grid_rx=np.stack([s.grid_rx for s in samples]).astype(np.complex64),
            pilot_tx=np.stack([s.pilot_tx for s in samples]).astype(np.complex64),
            bits=np.stack([s.bits for s in samples]).astype(np.uint8),
            channel=np.stack([s.channel for s in samples]).astype(np.complex64),
            noise_var=np.array([s.noise_var for s in samples], dtype=np.float32),
            snr_db=np.array([s.snr_db for s in samples], dtype=np.float32),
            seed=seed,
            split=split,
        )


def as_dataset(batch) -> Dataset:
    """Accept a Dataset, a single Sample, or a sequence of Samples."""
    if isinstance(batch, Dataset):
        return batch
    if isinstance(batch, Sample):
        batch = [batch]
    samples = list(batch)
    if not samples:
        raise ValueError("empty batch")
    s0 = samples[0]
    S, T = s0.grid_rx.shape
    pilots = tuple(int(t) for t in np.flatnonzero(s0.pilot_mask.all(axis=0)))
    cfg = LinkConfig(n_subcarriers=S, n_symbols=T, pilot_symbols=pilots)
    return Dataset.from_samples(cfg, samples)


def qpsk_map(bits: np.ndarray) -> np.ndarray:
    """Gray QPSK: bit 0 on the real axis, bit 1 on the imaginary axis, 0 -> +."""
    b = bits.astype(np.float64)
    return ((1.0 - 2.0 * b[..., 0]) + 1j * (1.0 - 2.0 * b[..., 1])) / SQRT2


def _sample_substream(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _SPLIT_KEYS.get(split, 2), int(index)]))


def generate_dataset(cfg: LinkConfig, seed: int, n: int, split: str = "train") -> Dataset:
    """Draw ``n`` samples; each sample uses its own substream keyed by (seed, split, index)."""
    cfg.validate()
    if n < 1:
        raise ConfigError("n must be >= 1")
    S, T = cfg.n_subcarriers, cfg.n_symbols
    data_t = list(cfg.data_symbols)
    pil_t = list(cfg.pilot_symbols)
    Td, Tp = len(data_t), len(pil_t)
    rho = cfg.freq_correlation
    innov = np.sqrt(1.0 - rho * rho)

    grid = np.empty((n, S, T), dtype=np.complex64)
    pilot_tx = np.empty((n, S * Tp), dtype=np.complex64)
    bits = np.empty((n, S, Td, 2), dtype=np.uint8)
    channel = np.empty((n, S, T), dtype=np.complex64)
    noise_var = np.empty(n, dtype=np.float32)
    snr_db = np.empty(n, dtype=np.float32)

    for i in range(n):
        rng = _sample_substream(seed, split, i)
        b = rng.integers(0, 2, size=(S, Td, 2), dtype=np.uint8)
        pb = rng.integers(0, 2, size=(S, Tp, 2), dtype=np.uint8)
        if cfg.snr_db_min == cfg.snr_db_max:
            snr = float(cfg.snr_db_min)
        else:
            snr = float(rng.uniform(cfg.snr_db_min, cfg.snr_db_max))
        snr = float(np.float32(snr))
        w = (rng.standard_normal(S) + 1j * rng.standard_normal(S)) / SQRT2
        noise = (rng.standard_normal((S, T)) + 1j * rng.standard_normal((S, T))) / SQRT2

        if cfg.channel == "awgn":
            h_f = np.ones(S, dtype=np.complex128)
        else:
            h_f = np.empty(S, dtype=np.complex128)
            h_f[0] = w[0]
            for s in range(1, S):
                h_f[s] = rho * h_f[s - 1] + innov * w[s]
        h = np.repeat(h_f[:, None], T, axis=1).astype(np.complex64)

        x = np.empty((S, T), dtype=np.complex128)
        x[:, data_t] = qpsk_map(b)
        x[:, pil_t] = qpsk_map(pb)

        nv = 0.0 if np.isinf(snr) and snr > 0 else 10.0 ** (-snr / 10.0)
        nv = float(np.float32(nv))
        y = h.astype(np.complex128) * x
        if nv > 0:
            y = y + np.sqrt(nv) * noise

        grid[i] = y
        pilot_tx[i] = x[:, pil_t].reshape(-1)
        bits[i] = b
        channel[i] = h
        noise_var[i] = nv
        snr_db[i] = snr

    return Dataset(cfg, grid, pilot_tx, bits, channel, noise_var, snr_db, seed=int(seed), split=split)


def transmitted_symbols(sample: Sample) -> np.ndarray:
    """Rebuild the transmitted grid from the bits and the known pilots."""
    S, T = sample.grid_rx.shape
    x = np.empty((S, T), dtype=np.complex128)
    data_cols = ~sample.pilot_mask.all(axis=0)
    x[:, data_cols] = qpsk_map(sample.bits)
    x[sample.pilot_mask] = sample.pilot_tx
    return x


def _data_columns(ds: Dataset) -> list[int]:
    return list(ds.config.data_symbols)


def lmmse_llr(y: np.ndarray, h: np.ndarray, noise_var) -> np.ndarray:
    """Single-tap MMSE equalization followed by the exact Gray-QPSK demapper.

    For ``y = h x + n`` the per-bit LLRs reduce to ``2*sqrt(2)*Re/Im(conj(h) y) / noise_var``,
    identical to demapping the MMSE estimate with its post-equalization SNR.
    """
    nv = np.maximum(np.asarray(noise_var, dtype=np.float64), 1e-30)
    mf = np.conj(h.astype(np.complex128)) * y.astype(np.complex128)
    scale = 2.0 * SQRT2 / nv
    scale = scale.reshape(scale.shape + (1,) * (mf.ndim - scale.ndim))
    return np.stack([mf.real * scale, mf.imag * scale], axis=-1)


def genie_lmmse(batch) -> np.ndarray:
    """LLRs ``[..., S, T_data, 2]`` using the true channel and noise variance."""
    single = isinstance(batch, Sample)
    ds = as_dataset(batch)
    cols = _data_columns(ds)
    llr = lmmse_llr(ds.grid_rx[:, :, cols], ds.channel[:, :, cols], ds.noise_var)
    return llr[0] if single else llr


def ls_channel_raw(ds: Dataset) -> np.ndarray:
    """Unsmoothed LS estimate ``y/p`` at the pilots, copied to the nearest pilot symbol in time."""
    pil = list(ds.config.pilot_symbols)
    if not pil:
        raise PreconditionError("sample carries no pilots")
    S, T = ds.config.n_subcarriers, ds.config.n_symbols
    p = ds.pilot_tx.reshape(len(ds), S, len(pil)).astype(np.complex128)
    h_p = ds.grid_rx[:, :, pil].astype(np.complex128) / p
    nearest = np.array([int(np.argmin([abs(t - q) for q in pil])) for t in range(T)])
    return h_p[:, :, nearest]


def smooth_frequency(h: np.ndarray, window: int = 3) -> np.ndarray:
    """Moving average along subcarriers (axis -2), averaging only in-grid neighbours."""
    half = window // 2
    S = h.shape[-2]
    acc = np.zeros_like(h)
    cnt = np.zeros(S)
    for d in range(-half, half + 1):
        lo, hi = max(0, -d), min(S, S - d)
        acc[..., lo:hi, :] += h[..., lo + d : hi + d, :]
        cnt[lo:hi] += 1
    return acc / cnt[:, None]


def ls_channel_estimate(ds: Dataset, window: int = 3) -> np.ndarray:
    return smooth_frequency(ls_channel_raw(ds), window)


def ls_lmmse(batch, window: int = 3) -> np.ndarray:
    """Pilot-based baseline: smoothed LS channel estimate, then the genie's equalizer/demapper."""
    single = isinstance(batch, Sample)
    ds = as_dataset(batch)
    if not ds.pilot_mask.any():
        raise PreconditionError("sample carries no pilots")
    h_est = ls_channel_estimate(ds, window)
    cols = _data_columns(ds)
    llr = lmmse_llr(ds.grid_rx[:, :, cols], h_est[:, :, cols], ds.noise_var)
    return llr[0] if single else llr


def hard_decisions(llr: np.ndarray) -> np.ndarray:
    return (np.asarray(llr) < 0).astype(np.uint8)


def uncoded_ber(hard_bits: np.ndarray, truth: np.ndarray) -> float:
    hard_bits = np.asarray(hard_bits)
    truth = np.asarray(truth)
    if hard_bits.shape != truth.shape:
        raise ValueError(f"shape mismatch: {hard_bits.shape} vs {truth.shape}")
    if hard_bits.size == 0:
        raise ValueError("need at least one bit")
    return float(np.count_nonzero(hard_bits != truth)) / hard_bits.size


def per_sample_ber(llr: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """BER of each sample along axis 0."""
    err = hard_decisions(llr) != bits
    return err.reshape(len(err), -1).mean(axis=1)


# --------------------------------------------------------------------- file IO


def _records(ds: Dataset) -> np.ndarray:
    n = len(ds)

    def cplx(a):
        a = np.asarray(a, dtype=np.complex64).reshape(n, -1)
        return np.stack([a.real, a.imag], axis=-1).reshape(n, -1)

    parts = [
        cplx(ds.grid_rx),
        np.broadcast_to(ds.pilot_mask.astype(np.float32).reshape(1, -1), (n, ds.pilot_mask.size)),
        cplx(ds.pilot_tx),
        ds.bits.astype(np.float32).reshape(n, -1),
        cplx(ds.channel),
        ds.noise_var.astype(np.float32).reshape(n, 1),
        ds.snr_db.astype(np.float32).reshape(n, 1),
    ]
    return np.concatenate(parts, axis=1).astype("<f4")


def dataset_bytes(ds: Dataset) -> bytes:
    cfg = ds.config
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, cfg.n_subcarriers, cfg.n_symbols, len(ds), ds.seed)
    return header + _records(ds).tobytes()


def save_dataset(path, ds: Dataset) -> Path:
    """Write ``path`` (binary) and ``path.json`` (LinkConfig sidecar)."""
    path = Path(path)
    path.write_bytes(dataset_bytes(ds))
    sidecar = {"link_config": ds.config.to_dict(), "split": ds.split, "seed": ds.seed, "n": len(ds)}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    magic, version, S, T, n, seed = _HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    cfg = LinkConfig.from_dict(side["link_config"])
    if (cfg.n_subcarriers, cfg.n_symbols) != (S, T):
        raise ValueError(f"{path}: header grid {S}x{T} disagrees with sidecar")
    Tp = len(cfg.pilot_symbols)
    Td = T - Tp
    sizes = [S * T * 2, S * T, S * Tp * 2, S * Td * 2, S * T * 2, 1, 1]
    rec = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if rec.size != n * sum(sizes):
        raise ValueError(f"{path}: sample count does not match header (n={n})")
    rec = rec.reshape(n, sum(sizes))
    off = np.cumsum([0] + sizes)
    f = [rec[:, off[k] : off[k + 1]] for k in range(len(sizes))]

    def cplx(a, shape):
        a = a.reshape(n, -1, 2)
        return (a[..., 0] + 1j * a[..., 1]).astype(np.complex64).reshape(n, *shape)

    ds = Dataset(
        config=cfg,
        grid_rx=cplx(f[0], (S, T)),
        pilot_tx=cplx(f[2], (S * Tp,)),
        bits=f[3].reshape(n, S, Td, 2).astype(np.uint8),
        channel=cplx(f[4], (S, T)),
        noise_var=f[5].reshape(n).astype(np.float32),
        snr_db=f[6].reshape(n).astype(np.float32),
        seed=int(seed),
        split=side.get("split", "train"),
    )
    if not np.array_equal(f[1][0].reshape(S, T) > 0.5, ds.pilot_mask):
        raise ValueError(f"{path}: pilot mask disagrees with sidecar config")
    return ds


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
