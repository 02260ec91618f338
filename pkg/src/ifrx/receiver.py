"""ToyRx: a small fully-convolutional neural receiver over one flat parameter vector.

The network maps per-resource-element features to two LLRs per data symbol:
``n_layers`` same-padded conv layers with a pointwise activation, then a linear
1x1 head. Gradients are exact reverse mode; Hessian-vector products use
Pearlmutter's R-operator (a forward-mode pass over the reverse pass), so both
are exact up to float64 round-off. The default activation is SiLU so the loss
is twice differentiable everywhere; ReLU is available but its gradient jumps
at kinks, which breaks finite-difference checks of the Hessian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import kernels
from .linkgen import ConfigError, Dataset, LinkConfig, Sample, as_dataset, ls_channel_raw

LN2 = np.log(2.0)
MODEL_MAGIC = b"IFRXMDL"
_MODEL_HEADER = struct.Struct("<7sI32s")


# ------------------------------------------------------------------- losses


@dataclass(frozen=True)
class BCELoss:
    """Base-2 binary cross-entropy on LLRs: one bit of uncertainty at llr = 0."""

    name: str = "bce"

    def value(self, x, s):
        return np.logaddexp(0.0, -s * x) / LN2

    def d1(self, x, s):
        return -s * expit(-s * x) / LN2

    def d2(self, x, s):
        p = expit(s * x)
        return p * (1.0 - p) / LN2


@dataclass(frozen=True)
class SmoothBERLoss:
    """Per-bit sigmoid error probability ``sigmoid(-kappa * s * llr)``."""

    kappa: float = 10.0
    name: str = "smooth-ber"

    def __post_init__(self):
        if not self.kappa > 0:
            raise ConfigError(f"smooth-BER steepness must be > 0, got {self.kappa}")

    def value(self, x, s):
        return expit(-self.kappa * s * x)

    def d1(self, x, s):
        p = expit(-self.kappa * s * x)
        return -self.kappa * s * p * (1.0 - p)

    def d2(self, x, s):
        p = expit(-self.kappa * s * x)
        return self.kappa**2 * p * (1.0 - p) * (1.0 - 2.0 * p)


LOSS_IDS = ("bce", "smooth-ber")


def get_loss(loss_id, kappa: float = 10.0):
    if isinstance(loss_id, (BCELoss, SmoothBERLoss)):
        return loss_id
    key = str(loss_id).lower().replace("_", "-")
    if key == "bce":
        return BCELoss()
    if key in {"smooth-ber", "ber"}:
        return SmoothBERLoss(kappa)
    raise ValueError(f"unknown loss id {loss_id!r}; expected one of {LOSS_IDS}")


def bit_signs(bits: np.ndarray) -> np.ndarray:
    """+1 for bit 0, -1 for bit 1 (the LLR sign that decides correctly)."""
    return 1.0 - 2.0 * bits.astype(np.float64)


# ------------------------------------------------------------------- activations


def _silu(z):
    return z * expit(z)


def _silu_d1(z):
    p = expit(z)
    return p * (1.0 + z * (1.0 - p))


def _silu_d2(z):
    p = expit(z)
    return p * (1.0 - p) * (2.0 + z * (1.0 - 2.0 * p))


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_d1(z):
    return (z > 0).astype(z.dtype)


def _relu_d2(z):
    return np.zeros_like(z)


ACTIVATIONS = {"silu": (_silu, _silu_d1, _silu_d2), "relu": (_relu, _relu_d1, _relu_d2)}


# ------------------------------------------------------------------- config


@dataclass(frozen=True)
class ToyRxConfig:
    hidden_channels: int = 16
    n_layers: int = 3
    kernel: tuple[int, int] = (3, 3)
    activation: str = "silu"
    mf_taps: int = 3  # matched-filter products y * conj(h_ls[s+d]) for |d| <= mf_taps
    noise_feature: bool = True
    ber_steepness: float = 10.0
    max_params: int = 20_000
    feature_layout: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.n_layers < 1 or self.hidden_channels < 1:
            raise ConfigError("need at least one hidden layer with one channel")
        if any(k % 2 == 0 or k < 1 for k in self.kernel):
            raise ConfigError("kernel sizes must be odd")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.mf_taps < 0:
            raise ConfigError("mf_taps must be >= 0")
        if not self.ber_steepness > 0:
            raise ConfigError("ber_steepness must be > 0")
        layout = ["re_y", "im_y", "re_h_ls", "im_h_ls"]
        for d in range(-self.mf_taps, self.mf_taps + 1):
            layout += [f"re_mf{d:+d}", f"im_mf{d:+d}"]
        if self.noise_feature:
            layout.append("log10_noise_var")
        object.__setattr__(self, "feature_layout", tuple(layout))
        if self.n_params() > self.max_params:
            raise ConfigError(f"ToyRx has {self.n_params()} parameters, above max_params={self.max_params}")

    @property
    def n_features(self) -> int:
        return len(self.feature_layout)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        kh, kw = self.kernel
        shapes = []
        cin = self.n_features
        for l in range(self.n_layers):
            shapes.append((f"conv{l}.w", (kh, kw, cin, self.hidden_channels)))
            shapes.append((f"conv{l}.b", (self.hidden_channels,)))
            cin = self.hidden_channels
        shapes.append(("head.w", (cin, 2)))
        shapes.append(("head.b", (2,)))
        return shapes

    def n_params(self) -> int:
        return int(sum(np.prod(s) for _, s in self.layer_shapes()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("feature_layout")
        d["kernel"] = list(self.kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyRxConfig":
        d = dict(d)
        d.pop("feature_layout", None)
        if "kernel" in d:
            d["kernel"] = tuple(d["kernel"])
        return cls(**d)

    def arch_hash(self, link: LinkConfig) -> bytes:
        blob = json.dumps({"model": self.to_dict(), "grid": [link.n_subcarriers, link.n_symbols,
                                                              list(link.pilot_symbols)]}, sort_keys=True)
        return hashlib.sha256(blob.encode()).digest()


# ------------------------------------------------------------------- features


def features(ds: Dataset, cfg: ToyRxConfig) -> np.ndarray:
    """Input planes ``[n, S, T, F]`` in the order of ``cfg.feature_layout``."""
    y = ds.grid_rx.astype(np.complex128)
    h = ls_channel_raw(ds)
    n, S, T = y.shape
    out = np.empty((n, S, T, cfg.n_features))
    out[..., 0] = y.real
    out[..., 1] = y.imag
    out[..., 2] = h.real
    out[..., 3] = h.imag
    k = 4
    for d in range(-cfg.mf_taps, cfg.mf_taps + 1):
        hs = np.zeros_like(h)
        lo, hi = max(0, -d), min(S, S - d)
        hs[:, lo:hi] = h[:, lo + d : hi + d]
        mf = y * np.conj(hs)
        out[..., k] = mf.real
        out[..., k + 1] = mf.imag
        k += 2
    if cfg.noise_feature:
        nv = np.maximum(ds.noise_var.astype(np.float64), 1e-6)
        out[..., k] = np.log10(nv)[:, None, None]
    return out


# ------------------------------------------------------------------- model


class ToyRx:
    """Architecture + pure functions of ``(params, batch)``.

    ``params`` is always a flat float64 vector; :meth:`unflatten` returns views
    into it following :meth:`ToyRxConfig.layer_shapes`.
    """

    chunk_size = 4

    def __init__(self, config: ToyRxConfig | None = None, link: LinkConfig | None = None, dtype=np.float64):
        self.config = config or ToyRxConfig()
        self.link = link or LinkConfig()
        self.dtype = np.dtype(dtype)
        self.shapes = self.config.layer_shapes()
        sizes = [int(np.prod(s)) for _, s in self.shapes]
        self.offsets = dict(zip([n for n, _ in self.shapes], np.cumsum([0] + sizes[:-1]).tolist()))
        self.n_params = int(sum(sizes))
        self.data_cols = np.array(self.link.data_symbols)

    def with_dtype(self, dtype) -> "ToyRx":
        """Same architecture computing in ``dtype`` (float32 is used for training)."""
        return ToyRx(self.config, self.link, dtype)

    def _params(self, theta) -> dict[str, np.ndarray]:
        return self.unflatten(np.asarray(theta, dtype=self.dtype))

    def _features(self, ds: Dataset) -> np.ndarray:
        return features(ds, self.config).astype(self.dtype, copy=False)

    # -- layout --------------------------------------------------------
    def unflatten(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        theta = np.asarray(theta)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected a parameter vector of length {self.n_params}, got {theta.shape}")
        out = {}
        for name, shape in self.shapes:
            o = self.offsets[name]
            out[name] = theta[o : o + int(np.prod(shape))].reshape(shape)
        return out

    def flatten(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(parts[name], dtype=np.float64).reshape(-1) for name, _ in self.shapes])

    def manifest(self) -> list[dict]:
        return [{"name": n, "shape": list(s), "offset": self.offsets[n]} for n, s in self.shapes]

    def init_params(self, seed: int, zero_head: bool = False) -> np.ndarray:
        rng = np.random.default_rng(seed)
        parts = {}
        for name, shape in self.shapes:
            if name.endswith(".b"):
                parts[name] = np.zeros(shape)
            elif name == "head.w":
                parts[name] = np.zeros(shape) if zero_head else rng.normal(0, np.sqrt(1.0 / shape[0]), shape)
            else:
                fan_in = shape[0] * shape[1] * shape[2]
                parts[name] = rng.normal(0, np.sqrt(2.0 / fan_in), shape)
        return self.flatten(parts)

    # -- batching ------------------------------------------------------
    def _check_batch(self, ds: Dataset) -> None:
        S, T = ds.grid_rx.shape[1:]
        if (S, T) != (self.link.n_subcarriers, self.link.n_symbols):
            raise ValueError(f"sample grid {S}x{T} does not match model grid "
                             f"{self.link.n_subcarriers}x{self.link.n_symbols}")
        if tuple(ds.config.pilot_symbols) != tuple(self.link.pilot_symbols):
            raise ValueError("sample pilot layout does not match model")

    def _chunks(self, batch):
        ds = as_dataset(batch)
        if len(ds) == 0:
            raise ValueError("empty batch")
        self._check_batch(ds)
        for lo in range(0, len(ds), self.chunk_size):
            sub = ds if len(ds) <= self.chunk_size else ds.subset(np.arange(lo, min(len(ds), lo + self.chunk_size)))
            yield sub

    # -- forward -------------------------------------------------------
    def _forward(self, p: dict, x: np.ndarray, keep: bool = True):
        kh, kw = self.config.kernel
        B, S, T, _ = x.shape
        act, dact, _ = ACTIVATIONS[self.config.activation]
        cache = {"cols": [], "dact": []}
        a = x
        for l in range(self.config.n_layers):
            cols = kernels.im2col(a, kh, kw)
            z = kernels.conv_forward(cols, p[f"conv{l}.w"], p[f"conv{l}.b"], (B, S, T))
            if keep:
                cache["cols"].append(cols)
                cache["dact"].append(dact(z))
            a = act(z)
        out = a @ p["head.w"] + p["head.b"]
        cache["a_last"] = a
        return out[:, :, self.data_cols, :], cache

    def forward_llr(self, params: np.ndarray, batch) -> np.ndarray:
        """LLRs ``[B, S, T_data, 2]`` (``[S, T_data, 2]`` for a single Sample)."""
        p = self._params(params)
        outs = []
        for ds in self._chunks(batch):
            llr, _ = self._forward(p, self._features(ds), keep=False)
            outs.append(llr)
        llr = np.concatenate(outs).astype(np.float64, copy=False)
        return llr[0] if isinstance(batch, Sample) else llr

    def loss_fn(self, loss_id):
        return get_loss(loss_id, self.config.ber_steepness)

    def per_sample_loss(self, loss_id, params, batch) -> np.ndarray:
        ds = as_dataset(batch)
        llr = self.forward_llr(params, ds)
        v = self.loss_fn(loss_id).value(llr, bit_signs(ds.bits))
        return v.reshape(len(ds), -1).mean(axis=1)

    def loss(self, loss_id, params, batch) -> float:
        return float(self.per_sample_loss(loss_id, params, batch).mean())

    # -- reverse mode --------------------------------------------------
    def _dout(self, loss, out_llr, bits, n_bits_total):
        s = bit_signs(bits)
        B, S, Td, _ = out_llr.shape
        d = np.zeros((B, S, self.link.n_symbols, 2), dtype=self.dtype)
        d[:, :, self.data_cols, :] = loss.d1(out_llr.astype(np.float64), s) / n_bits_total
        return d, s

    def _backward(self, p: dict, cache: dict, dout: np.ndarray, per_sample: bool):
        """Returns gradient parts; leading batch axis when ``per_sample``."""
        g = {}
        a_last = cache["a_last"]
        B = dout.shape[0]
        H = a_last.shape[-1]
        if per_sample:
            g["head.w"] = np.einsum("bsth,bsto->bho", a_last, dout)
            g["head.b"] = dout.sum(axis=(1, 2))
        else:
            g["head.w"] = a_last.reshape(-1, H).T @ dout.reshape(-1, 2)
            g["head.b"] = dout.sum(axis=(0, 1, 2))
        ga = dout @ p["head.w"].T
        for l in reversed(range(self.config.n_layers)):
            gz = ga * cache["dact"][l]
            w = p[f"conv{l}.w"]
            if per_sample:
                g[f"conv{l}.w"] = kernels.conv_weight_grad_per_sample(cache["cols"][l], gz, w.shape)
                g[f"conv{l}.b"] = gz.sum(axis=(1, 2))
            else:
                g[f"conv{l}.w"] = kernels.conv_weight_grad(cache["cols"][l], gz, w.shape)
                g[f"conv{l}.b"] = gz.sum(axis=(0, 1, 2))
            if l > 0:
                ga = kernels.conv_input_grad(gz, w, w.shape[2])
        if per_sample:
            return np.concatenate([g[n].reshape(B, -1) for n, _ in self.shapes], axis=1).astype(np.float64)
        return self.flatten(g)

    def grad(self, loss_id, params, batch) -> np.ndarray:
        """Exact gradient of the mean batch loss."""
        loss = self.loss_fn(loss_id)
        p = self._params(params)
        ds = as_dataset(batch)
        n_bits = ds.bits.size
        total = np.zeros(self.n_params)
        for sub in self._chunks(ds):
            out, cache = self._forward(p, self._features(sub))
            dout, _ = self._dout(loss, out, sub.bits, n_bits)
            total += self._backward(p, cache, dout, per_sample=False)
        return total

    def per_sample_grads(self, loss_id, params, batch) -> np.ndarray:
        """``[B, P]``: row ``i`` is the gradient of sample ``i``'s own mean loss."""
        loss = self.loss_fn(loss_id)
        p = self._params(params)
        ds = as_dataset(batch)
        bits_per_sample = ds.bits[0].size
        rows = []
        for sub in self._chunks(ds):
            out, cache = self._forward(p, self._features(sub))
            dout, _ = self._dout(loss, out, sub.bits, bits_per_sample)
            rows.append(self._backward(p, cache, dout, per_sample=True))
        return np.concatenate(rows)

    # -- forward-over-reverse -----------------------------------------
    def hvp(self, loss_id, params, batch, v) -> np.ndarray:
        """Exact Hessian-vector product of the mean batch loss (R-operator)."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_params,):
            raise ValueError(f"direction has shape {v.shape}, expected ({self.n_params},)")
        loss = self.loss_fn(loss_id)
        p = self._params(params)
        V = self._params(v)
        ds = as_dataset(batch)
        n_bits = ds.bits.size
        total = np.zeros(self.n_params)
        for sub in self._chunks(ds):
            total += self._hvp_chunk(loss, p, V, sub, n_bits)
        return total

    def _hvp_chunk(self, loss, p, V, ds, n_bits):
        kh, kw = self.config.kernel
        x = self._features(ds)
        B, S, T, _ = x.shape
        L = self.config.n_layers
        act, dact, d2act = ACTIVATIONS[self.config.activation]
        cols, rcols, d1s, rzs = [], [], [], []
        a, ra = x, None
        for l in range(L):
            c = kernels.im2col(a, kh, kw)
            z = kernels.conv_forward(c, p[f"conv{l}.w"], p[f"conv{l}.b"], (B, S, T))
            rz = kernels.conv_forward(c, V[f"conv{l}.w"], V[f"conv{l}.b"], (B, S, T))
            rc = None
            if ra is not None:
                rc = kernels.im2col(ra, kh, kw)
                rz += kernels.conv_forward(rc, p[f"conv{l}.w"], None, (B, S, T))
            d1 = dact(z)
            cols.append(c)
            rcols.append(rc)
            d1s.append(d1)
            rzs.append(rz * d2act(z))
            a = act(z)
            ra = rz * d1
        out = a @ p["head.w"] + p["head.b"]
        rout = ra @ p["head.w"] + a @ V["head.w"] + V["head.b"]

        dc = self.data_cols
        s = bit_signs(ds.bits)
        dout = np.zeros((B, S, T, 2), dtype=self.dtype)
        rdout = np.zeros((B, S, T, 2), dtype=self.dtype)
        o = out[:, :, dc, :].astype(np.float64)
        dout[:, :, dc, :] = loss.d1(o, s) / n_bits
        rdout[:, :, dc, :] = loss.d2(o, s) * rout[:, :, dc, :] / n_bits

        H = a.shape[-1]
        r = {}
        r["head.w"] = ra.reshape(-1, H).T @ dout.reshape(-1, 2) + a.reshape(-1, H).T @ rdout.reshape(-1, 2)
        r["head.b"] = rdout.sum(axis=(0, 1, 2))
        ga = dout @ p["head.w"].T
        rga = rdout @ p["head.w"].T + dout @ V["head.w"].T
        for l in reversed(range(L)):
            gz = ga * d1s[l]
            rgz = rga * d1s[l] + ga * rzs[l]
            w = p[f"conv{l}.w"]
            rw = kernels.conv_weight_grad(cols[l], rgz, w.shape)
            if rcols[l] is not None:
                rw += kernels.conv_weight_grad(rcols[l], gz, w.shape)
            r[f"conv{l}.w"] = rw
            r[f"conv{l}.b"] = rgz.sum(axis=(0, 1, 2))
            if l > 0:
                ga_next = kernels.conv_input_grad(gz, w, w.shape[2])
                rga = kernels.conv_input_grad(rgz, w, w.shape[2]) + kernels.conv_input_grad(
                    gz, V[f"conv{l}.w"], w.shape[2]
                )
                ga = ga_next
        return self.flatten(r)


# ------------------------------------------------------------------- checkpoints


def model_bytes(model: ToyRx, params: np.ndarray) -> bytes:
    header = _MODEL_HEADER.pack(MODEL_MAGIC, model.n_params, model.config.arch_hash(model.link))
    return header + np.asarray(params, dtype="<f4").tobytes()


def save_model(path, model: ToyRx, params: np.ndarray, extra: dict | None = None) -> Path:
    """Write the f32 checkpoint and a JSON sidecar with the architecture."""
    path = Path(path)
    path.write_bytes(model_bytes(model, params))
    side = {"model_config": model.config.to_dict(), "link_config": model.link.to_dict(),
            "n_params": model.n_params, "layout": model.manifest()}
    if extra:
        side.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def load_model(path) -> tuple[ToyRx, np.ndarray, dict]:
    path = Path(path)
    raw = path.read_bytes()
    magic, P, arch = _MODEL_HEADER.unpack_from(raw, 0)
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    model = ToyRx(ToyRxConfig.from_dict(side["model_config"]), LinkConfig.from_dict(side["link_config"]))
    if model.n_params != P or model.config.arch_hash(model.link) != arch:
        raise ValueError(f"{path}: architecture hash or parameter count mismatch")
    params = np.frombuffer(raw, dtype="<f4", offset=_MODEL_HEADER.size).astype(np.float64)
    if params.size != P:
        raise ValueError(f"{path}: truncated parameter array")
    return model, params, side


def round_f32(params: np.ndarray) -> np.ndarray:
    """Round-trip through float32 so in-memory params equal what a checkpoint stores."""
    return np.asarray(params, dtype=np.float32).astype(np.float64)


# ------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr_max: float = 5e-3
    optimizer: str = "adam"  # or "momentum"
    momentum: float = 0.9
    weight_decay: float = 1e-5
    warmup_frac: float = 0.05
    loss: str = "bce"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.lr_max < 1:
            raise ConfigError("lr_max must lie in (0, 1)")
        if self.optimizer not in {"adam", "momentum"}:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_max`` then cosine decay to zero."""
    warm = max(1, int(round(cfg.warmup_frac * total)))
    if step < warm:
        return cfg.lr_max * (step + 1) / warm
    frac = (step - warm) / max(1, total - warm)
    return 0.5 * cfg.lr_max * (1.0 + np.cos(np.pi * frac))


class Optimizer:
    """Adam with decoupled weight decay, heavy-ball momentum, or plain SGD."""

    KINDS = ("adam", "momentum", "sgd")

    def __init__(self, kind: str = "adam", momentum: float = 0.9, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if kind not in self.KINDS:
            raise ConfigError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, theta: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        if self.kind == "adam":
            self.m = self.b1 * self.m + (1 - self.b1) * g
            self.v = self.b2 * self.v + (1 - self.b2) * g * g
            mhat = self.m / (1 - self.b1**self.t)
            vhat = self.v / (1 - self.b2**self.t)
            return theta - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * theta)
        if self.kind == "momentum":
            self.m = self.momentum * self.m + g + self.weight_decay * theta
            return theta - lr * self.m
        return theta - lr * (g + self.weight_decay * theta)


def train(model: ToyRx, params: np.ndarray, ds: Dataset, cfg: TrainConfig, seed: int,
          log=None) -> tuple[np.ndarray, dict]:
    """Minibatch training in float32; returns f32-rounded float64 params and a history."""
    fast = model.with_dtype(np.float32)
    rng = np.random.default_rng(seed)
    theta = np.asarray(params, dtype=np.float64).copy()
    n = len(ds)
    steps_per_epoch = max(1, n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    opt = Optimizer(cfg.optimizer, cfg.momentum, cfg.weight_decay)
    history = {"epoch_loss": [], "lr_max": cfg.lr_max, "steps": total}
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for k in range(steps_per_epoch):
            idx = np.sort(order[k * cfg.batch_size : (k + 1) * cfg.batch_size])
            batch = ds.subset(idx)
            g = fast.grad(cfg.loss, theta, batch)
            theta = opt.step(theta, g, lr_at(step, total, cfg))
            step += 1
            if not np.all(np.isfinite(theta)):
                raise FloatingPointError(f"non-finite parameters at epoch {epoch}, step {k}")
            if k % 16 == 0:
                losses.append(fast.loss(cfg.loss, theta, batch))
        history["epoch_loss"].append(float(np.mean(losses)))
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {history['epoch_loss'][-1]:.4f}")
    return round_f32(theta), history
