"""End-to-end experiment runs with content-addressed stages.

A run directory holds one sub-directory per stage::

    generate/   train.ifrx eval.ifrx
    train/      model.ifrxmdl history.json
    evaluate/   eval_table.json targets.json
    arnoldi/    basis.ifrxritz truncation.json
    influence/  scores.jsonl projected.npy histograms.json
    finetune/   finetune.json
    reports/    plot-ready CSV / JSON

Each stage writes ``done.json`` with a key hashed from its own settings and the
content of the files it reads. A stage whose key still matches is skipped, so
editing an artifact by hand re-runs exactly the stages downstream of it.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapt, arnoldi, influence, linkgen, receiver
from .linkgen import LinkConfig
from .receiver import ToyRx, ToyRxConfig, TrainConfig

log = logging.getLogger(__name__)

STAGES = ("generate", "train", "evaluate", "arnoldi", "influence", "finetune")
SINGLE_STRATEGIES = ("influence", "random", "harmful", "second_order")
MULTI_STRATEGIES = ("multi_influence", "multi_random", "multi_second_order")


class StageError(RuntimeError):
    pass


class MissingStageError(StageError):
    def __init__(self, missing: list[str]):
        super().__init__("missing stage outputs: " + ", ".join(missing))
        self.missing = missing


# ------------------------------------------------------------------- config


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 20_000
    n_eval: int = 5_000


@dataclass(frozen=True)
class ArnoldiConfig:
    m: int = 200
    k: int = 40
    batch_size: int = 22
    passes: float = 3.0
    mode: str = "cycle"
    eigen_floor_rel: float = 1e-6
    max_residual_rel: float = 0.1
    n_probes: int = 32


@dataclass(frozen=True)
class InfluenceConfig:
    variant: str = "ell_rel"
    loss_train: str = "bce"
    loss_eval: str = "bce"
    top_n: int = 5
    genie_floor: float = 1e-3
    histogram_bins: int = 50


@dataclass(frozen=True)
class FinetuneSettings:
    lr_divisor: float = 50.0
    learning_rate: float = 0.0  # 0 derives lr_max / lr_divisor
    second_order_learning_rate: float = 0.0  # 0 reuses learning_rate
    weight_decay: float = 1e-5
    instances_per_step: int = 24
    steps: int = 3
    multi_steps: int = 15
    pool_size: int = 50
    optimizer: str = "adam"
    non_target_size: int = 256
    strategies: tuple[str, ...] = SINGLE_STRATEGIES + MULTI_STRATEGIES


@dataclass(frozen=True)
class SweepConfig:
    rates: tuple[float, ...] = (0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2)
    max_steps: int = 20


@dataclass(frozen=True)
class RunConfig:
    root_seed: int = 0
    seeds: tuple[int, ...] = tuple(range(10))
    snr_bins: int = 55
    output: str = "runs/default"


_SECTIONS = {
    "experiment": RunConfig,
    "link": LinkConfig,
    "data": DataConfig,
    "model": ToyRxConfig,
    "train": TrainConfig,
    "arnoldi": ArnoldiConfig,
    "influence": InfluenceConfig,
    "finetune": FinetuneSettings,
    "sweep": SweepConfig,
}

# unit / meaning comments written next to each key
UNITS = {
    "root_seed": "integer", "seeds": "comma-separated integers", "snr_bins": "bins", "output": "path",
    "n_subcarriers": "subcarriers", "n_symbols": "OFDM symbols", "pilot_symbols": "symbol indices",
    "snr_db_min": "dB", "snr_db_max": "dB", "channel": "block_rayleigh | awgn",
    "freq_correlation": "adjacent-subcarrier correlation, 0..1",
    "n_train": "samples", "n_eval": "samples",
    "hidden_channels": "channels", "n_layers": "conv layers", "kernel": "subcarriers, symbols",
    "activation": "silu | relu", "mf_taps": "subcarriers", "noise_feature": "bool",
    "ber_steepness": "1/LLR", "max_params": "parameters",
    "epochs": "passes", "batch_size": "samples", "lr_max": "per step", "optimizer": "adam | momentum | sgd",
    "momentum": "fraction", "weight_decay": "per step", "warmup_frac": "fraction of steps", "loss": "bce | smooth-ber",
    "m": "Krylov vectors", "k": "Ritz pairs", "passes": "training-set passes", "mode": "cycle | fixed",
    "eigen_floor_rel": "fraction of |lambda_max|", "max_residual_rel": "fraction of |lambda|", "n_probes": "gradients",
    "variant": "classic | theta_rel | ell_rel | newfluence", "loss_train": "bce | smooth-ber",
    "loss_eval": "bce | smooth-ber", "top_n": "targets", "genie_floor": "BER", "histogram_bins": "bins",
    "lr_divisor": "ratio", "learning_rate": "per step, 0 = lr_max / lr_divisor",
    "second_order_learning_rate": "per step, 0 = learning_rate", "instances_per_step": "samples",
    "steps": "updates", "multi_steps": "updates", "pool_size": "samples", "non_target_size": "samples",
    "strategies": "comma-separated", "rates": "comma-separated, per step", "max_steps": "updates",
}


def _fields(cls):
    return [f for f in dataclasses.fields(cls) if f.init]


def _coerce(text: str, default, name: str):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in {"1", "true", "yes", "on"}:
            return True
        if low in {"0", "false", "no", "off"}:
            return False
        raise ValueError(f"{name}: not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        kind = type(default[0]) if default else int
        return tuple(kind(t) for t in items)
    return text


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: RunConfig = field(default_factory=RunConfig)
    link: LinkConfig = field(default_factory=LinkConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ToyRxConfig = field(default_factory=ToyRxConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    arnoldi: ArnoldiConfig = field(default_factory=ArnoldiConfig)
    influence: InfluenceConfig = field(default_factory=InfluenceConfig)
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        cp.read_string(text)
        unknown = set(cp.sections()) - set(_SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, sub in _SECTIONS.items():
            base = sub()
            kwargs = {}
            if cp.has_section(name):
                known = {f.name for f in _fields(sub)}
                extra = set(cp[name]) - known
                if extra:
                    raise ValueError(f"[{name}] unknown keys: {sorted(extra)}")
                for key, text_val in cp[name].items():
                    kwargs[key] = _coerce(text_val, getattr(base, key), f"{name}.{key}")
            parts[name] = dataclasses.replace(base, **kwargs) if kwargs else base
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())

    def to_ini(self) -> str:
        out = io.StringIO()
        for name in _SECTIONS:
            sub = getattr(self, name)
            out.write(f"[{name}]\n")
            for f in _fields(type(sub)):
                unit = UNITS.get(f.name)
                line = f"{f.name} = {_format(getattr(sub, f.name))}"
                out.write(f"{line:<48} ; {unit}\n" if unit else line + "\n")
            out.write("\n")
        return out.getvalue()

    def section_dict(self, name: str) -> dict:
        sub = getattr(self, name)
        return {f.name: (list(v) if isinstance(v := getattr(sub, f.name), tuple) else v) for f in _fields(type(sub))}

    def section_hash(self, name: str) -> str:
        return _digest(json.dumps(self.section_dict(name), sort_keys=True))

    @property
    def finetune_lr(self) -> float:
        ft = self.finetune
        return ft.learning_rate if ft.learning_rate > 0 else self.train.lr_max / ft.lr_divisor

    @property
    def second_order_lr(self) -> float:
        ft = self.finetune
        return ft.second_order_learning_rate if ft.second_order_learning_rate > 0 else self.finetune_lr


def _digest(text: str | bytes) -> str:
    if isinstance(text, str):
        text = text.encode()
    return hashlib.sha256(text).hexdigest()


def substream_seed(root: int, name: str) -> int:
    """Independent 32-bit seed for a named stream under the root seed."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([int(root), tag]).generate_state(1)[0])


def file_hash(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------------- stage runner


class Pipeline:
    def __init__(self, config: ExperimentConfig, run_dir=None, progress=None):
        self.cfg = config
        self.dir = Path(run_dir if run_dir is not None else config.experiment.output)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.executed: list[str] = []
        self.progress = progress or (lambda msg: log.info(msg))
        self._memo: dict = {}

    # -- bookkeeping

    def stage_dir(self, name: str) -> Path:
        return self.dir / name

    def _done(self, name: str) -> dict | None:
        p = self.stage_dir(name) / "done.json"
        return json.loads(p.read_text()) if p.exists() else None

    def outputs_hash(self, name: str) -> str:
        done = self._done(name)
        if done is None:
            raise MissingStageError([name])
        d = self.stage_dir(name)
        return _digest("|".join(f"{f}:{file_hash(d / f)}" for f in sorted(done["outputs"])))

    def _key(self, name: str, params: dict, deps: tuple[str, ...]) -> str:
        blob = {"stage": name, "params": params, "deps": {d: self.outputs_hash(d) for d in deps}}
        return _digest(json.dumps(blob, sort_keys=True, default=list))

    def _stage(self, name: str, params: dict, deps: tuple[str, ...], fn) -> Path:
        key = self._key(name, params, deps)
        d = self.stage_dir(name)
        done = self._done(name)
        if done is not None and done.get("key") == key and all((d / f).exists() for f in done["outputs"]):
            return d
        d.mkdir(parents=True, exist_ok=True)
        (d / "done.json").unlink(missing_ok=True)
        self.progress(f"[{name}] running")
        t0 = time.perf_counter()
        try:
            outputs = fn(d)
        except Exception as exc:
            raise StageError(f"stage {name!r} failed: {exc}") from exc
        self.executed.append(name)
        self._memo = {k: v for k, v in self._memo.items() if k[0] not in _downstream(name)}
        (d / "done.json").write_text(json.dumps({"stage": name, "key": key, "outputs": sorted(outputs)},
                                                indent=2, sort_keys=True) + "\n")
        self.progress(f"[{name}] done in {time.perf_counter() - t0:.1f}s")
        return d

    # -- artifact loaders (memoized per process)

    def _load(self, kind: str, path: Path, loader):
        key = (kind, str(path), file_hash(path))
        if key not in self._memo:
            self._memo[key] = loader(path)
        return self._memo[key]

    def datasets(self):
        d = self.stage_dir("generate")
        return (self._load("generate", d / "train.ifrx", linkgen.load_dataset),
                self._load("generate", d / "eval.ifrx", linkgen.load_dataset))

    def model(self):
        model, params, _ = self._load("train", self.stage_dir("train") / "model.ifrxmdl", receiver.load_model)
        return model, params

    def basis(self):
        return self._load("arnoldi", self.stage_dir("arnoldi") / "basis.ifrxritz", arnoldi.load_basis)

    def targets(self) -> list[adapt.TargetSpec]:
        raw = json.loads((self.stage_dir("evaluate") / "targets.json").read_text())
        return [adapt.TargetSpec(**t) for t in raw["targets"]]

    def scores(self):
        return influence.read_scores(self.stage_dir("influence") / "scores.jsonl")

    def projected(self) -> influence.Projected:
        coords = np.load(self.stage_dir("influence") / "projected.npy")
        return influence.Projected.from_coords(coords, self.basis())

    # -- stages

    def run(self, until: str = "finetune") -> Path:
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}")
        for name in STAGES[: STAGES.index(until) + 1]:
            getattr(self, f"stage_{name}")()
        return self.dir

    def stage_generate(self) -> Path:
        cfg = self.cfg
        seed = substream_seed(cfg.experiment.root_seed, "data")
        params = {"link": cfg.link.to_dict(), "data": cfg.section_dict("data"), "seed": seed}

        def work(d):
            for split, n in (("train", cfg.data.n_train), ("eval", cfg.data.n_eval)):
                linkgen.save_dataset(d / f"{split}.ifrx", linkgen.generate_dataset(cfg.link, seed, n, split))
            return ["train.ifrx", "train.ifrx.json", "eval.ifrx", "eval.ifrx.json"]

        return self._stage("generate", params, (), work)

    def stage_train(self) -> Path:
        cfg = self.cfg
        seed = substream_seed(cfg.experiment.root_seed, "train")
        params = {"model": cfg.model.to_dict(), "train": cfg.section_dict("train"), "seed": seed}

        def work(d):
            train_set, _ = self.datasets()
            model = ToyRx(cfg.model, cfg.link)
            theta, hist = receiver.train(model, model.init_params(seed), train_set, cfg.train, seed)
            receiver.save_model(d / "model.ifrxmdl", model, theta, {"lr_max": cfg.train.lr_max})
            (d / "history.json").write_text(json.dumps(hist, indent=2, sort_keys=True) + "\n")
            return ["model.ifrxmdl", "model.ifrxmdl.json", "history.json"]

        return self._stage("train", params, ("generate",), work)

    def stage_evaluate(self) -> Path:
        cfg = self.cfg
        inf = cfg.influence
        params = {"snr_bins": cfg.experiment.snr_bins, "top_n": inf.top_n, "genie_floor": inf.genie_floor}

        def work(d):
            _, eval_set = self.datasets()
            model, theta = self.model()
            table = adapt.evaluate_model(model, theta, eval_set, cfg.experiment.snr_bins,
                                         (cfg.link.snr_db_min, cfg.link.snr_db_max))
            _write_json(d / "eval_table.json", table)
            inst = table["instances"]
            targets = adapt.select_targets_from_table([r["model"] for r in inst], [r["genie_lmmse"] for r in inst],
                                                      inf.top_n, inf.genie_floor)
            _write_json(d / "targets.json", {"genie_floor": inf.genie_floor,
                                             "targets": [dataclasses.asdict(t) for t in targets]})
            return ["eval_table.json", "targets.json"]

        return self._stage("evaluate", params, ("train",), work)

    def stage_arnoldi(self) -> Path:
        cfg = self.cfg
        ac = cfg.arnoldi
        seed = substream_seed(cfg.experiment.root_seed, "arnoldi-start")
        params = {"arnoldi": cfg.section_dict("arnoldi"), "loss": cfg.influence.loss_train, "seed": seed}

        def work(d):
            train_set, _ = self.datasets()
            model, theta = self.model()
            basis, res, diag = build_model_basis(model, theta, train_set, cfg.influence.loss_train, ac, seed,
                                                 self.source_hash(), progress=None)
            arnoldi.save_basis(d / "basis.ifrxritz", basis, {"krylov_steps": res.m, "breakdown": res.breakdown})
            _write_json(d / "truncation.json", diag)
            return ["basis.ifrxritz", "basis.ifrxritz.json", "truncation.json"]

        return self._stage("arnoldi", params, ("generate", "train"), work)

    def source_hash(self) -> str:
        """Digest tying a basis to the model, the training data and the loss."""
        return arnoldi.source_digest(file_hash(self.stage_dir("train") / "model.ifrxmdl"),
                                     file_hash(self.stage_dir("generate") / "train.ifrx"),
                                     self.cfg.influence.loss_train)

    def stage_influence(self) -> Path:
        cfg = self.cfg
        inf = cfg.influence
        params = {"influence": cfg.section_dict("influence")}

        def work(d):
            train_set, eval_set = self.datasets()
            model, theta = self.model()
            basis = self.basis()
            if basis.source_hash != self.source_hash():
                raise ValueError("Ritz basis does not belong to the current model and training set")
            cache = influence.GradCache(self.dir / "cache")
            key = cache.key(self.outputs_hash("train"), file_hash(self.stage_dir("generate") / "train.ifrx"),
                            inf.loss_train)
            proj = influence.projected_training_gradients(model, theta, train_set, inf.loss_train, basis, cache, key)
            np.save(d / "projected.npy", proj.coords)
            variant = influence.canonical_variant(inf.variant)
            if variant == "classic" and inf.loss_eval != inf.loss_train:
                variant = "clif"
            by_target, skipped, hists = {}, {}, {}
            for t in self.targets():
                g = model.grad(inf.loss_eval, theta, eval_set.subset([t.eval_index]))
                sc = influence.score_matrix(basis.project(g), proj, basis, variant)[0]
                recs, skipped[t.eval_index] = influence.rank_scores(sc, t.eval_index, variant, proj.self_term,
                                                                    inf.loss_train, inf.loss_eval)
                by_target[t.eval_index] = recs
                hists[str(t.eval_index)] = influence.score_histogram(recs, inf.histogram_bins)
            influence.write_scores(d / "scores.jsonl", by_target, {
                "variant": variant, "loss_train": inf.loss_train, "loss_eval": inf.loss_eval,
                "basis_hash": basis.source_hash, "model_hash": file_hash(self.stage_dir("train") / "model.ifrxmdl"),
                "skipped": {str(k): v for k, v in skipped.items()}})
            _write_json(d / "histograms.json", hists)
            return ["scores.jsonl", "projected.npy", "histograms.json"]

        return self._stage("influence", params, ("generate", "train", "evaluate", "arnoldi"), work)

    def non_target_indices(self, targets) -> np.ndarray:
        n_eval = self.cfg.data.n_eval
        skip = {t.eval_index for t in targets}
        rng = np.random.default_rng(substream_seed(self.cfg.experiment.root_seed, "non-target"))
        order = [int(i) for i in rng.permutation(n_eval) if int(i) not in skip]
        return np.sort(np.array(order[: self.cfg.finetune.non_target_size], dtype=np.int64))

    def finetune_context(self) -> "FinetuneContext":
        train_set, eval_set = self.datasets()
        model, theta = self.model()
        _, recs = self.scores()
        targets = self.targets()
        return FinetuneContext(self.cfg, model, theta, train_set, eval_set, targets, recs, self.basis(),
                               self.projected(), self.non_target_indices(targets))

    def stage_finetune(self) -> Path:
        cfg = self.cfg
        params = {"finetune": cfg.section_dict("finetune"), "seeds": list(cfg.experiment.seeds),
                  "lr": cfg.finetune_lr, "second_order_lr": cfg.second_order_lr, "root": cfg.experiment.root_seed}

        def work(d):
            ctx = self.finetune_context()
            runs = []
            for strategy in cfg.finetune.strategies:
                for seed in cfg.experiment.seeds:
                    runs.extend(ctx.run_strategy(strategy, seed))
            _write_json(d / "finetune.json", {"non_target_indices": ctx.non_target.tolist(), "runs": runs,
                                              "learning_rate": cfg.finetune_lr,
                                              "second_order_learning_rate": cfg.second_order_lr})
            return ["finetune.json"]

        return self._stage("finetune", params, ("generate", "train", "evaluate", "arnoldi", "influence"), work)


def _downstream(name: str) -> set[str]:
    return set(STAGES[STAGES.index(name):])


def build_model_basis(model, theta, train_set, loss_id: str, ac: ArnoldiConfig, seed: int, source_hash: str,
                      progress=None):
    """Arnoldi over the mini-batch training Hessian, Ritz selection and truncation diagnostic."""
    n = len(train_set)
    if ac.mode == "fixed":
        sched = arnoldi.BatchSchedule(n, ac.batch_size, 1, seed, "fixed")
    else:
        sched = arnoldi.BatchSchedule.for_passes(n, min(ac.m, model.n_params), ac.passes, ac.batch_size, seed)

    def hvp(v, idx):
        return model.hvp(loss_id, theta, train_set.subset(idx), v)

    basis, res = arnoldi.build_basis(hvp, model.n_params, ac.m, ac.k, seed, sched, source_hash,
                                     ac.eigen_floor_rel, ac.max_residual_rel, progress)
    diag = None
    if basis.k >= 2:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        probe_idx = np.sort(rng.choice(n, size=min(ac.n_probes, n), replace=False))
        probes = model.per_sample_grads(loss_id, theta, train_set.subset(probe_idx))
        diag = arnoldi.truncation_diagnostic(basis.eigenvalues, probes, basis, eigen_floor_rel=ac.eigen_floor_rel)
    return basis, res, {"eigenvalues": basis.eigenvalues.tolist(), "residuals": basis.residuals.tolist(),
                        "krylov_steps": res.m, "passes": sched.passes(res.m), "diagnostic": diag}


@dataclass
class FinetuneContext:
    """Everything a fine-tuning strategy needs, loaded once."""

    cfg: ExperimentConfig
    model: ToyRx
    theta: np.ndarray
    train_set: linkgen.Dataset
    eval_set: linkgen.Dataset
    targets: list
    records: dict
    basis: arnoldi.RitzBasis
    projected: influence.Projected
    non_target: np.ndarray

    def ft_config(self, mode: str, selection: str, seed: int, steps: int, lr: float | None = None,
                  allow_stale: bool = False) -> adapt.FineTuneConfig:
        ft = self.cfg.finetune
        return adapt.FineTuneConfig(
            learning_rate=self.cfg.finetune_lr if lr is None else lr, weight_decay=ft.weight_decay,
            instances_per_step=ft.instances_per_step, steps=steps, pool_size=ft.pool_size, mode=mode,
            selection=selection, seed=int(seed), loss=self.cfg.influence.loss_train, optimizer=ft.optimizer,
            allow_stale=allow_stale)

    def tracker(self, target_ids) -> adapt.Tracker:
        return adapt.Tracker(self.model, self.eval_set.subset(target_ids), self.cfg.influence.loss_eval,
                             self.eval_set.subset(self.non_target), target_ids=target_ids)

    def pairs(self, target_ids, per_target: int, seed: int) -> list[adapt.InfluencePair]:
        recs = {t: self.records[t] for t in target_ids}
        return adapt.build_pairs(recs, self.projected, self.basis, per_target * len(recs), "beneficial", seed)

    def first_order(self, target_ids, mode: str, selection: str, which: str, seed: int, steps: int,
                    lr: float | None = None):
        ft = self.cfg.finetune
        if len(target_ids) == 1:
            pool = adapt.select_pool(self.records[target_ids[0]], which, ft.pool_size, seed)
        else:
            pool = np.array(sorted({p.train_index for p in self.pairs(target_ids, max(1, ft.pool_size // len(target_ids)), seed)}))
        cfg = self.ft_config(mode, selection, seed, steps, lr)
        tracker = self.tracker(target_ids)
        _, report = adapt.finetune_first_order(self.model, self.theta, self.train_set, pool, cfg, tracker)
        return report, tracker

    def run_strategy(self, strategy: str, seed: int) -> list[dict]:
        ft = self.cfg.finetune
        ids = [t.eval_index for t in self.targets]
        jobs = []
        if strategy in SINGLE_STRATEGIES:
            for tid in ids:
                jobs.append(([tid], strategy))
        elif strategy in MULTI_STRATEGIES:
            jobs.append((ids, strategy))
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
        out = []
        for tids, strat in jobs:
            if strat in {"influence", "multi_influence"}:
                steps = ft.steps if strat == "influence" else ft.multi_steps
                rep, tr = self.first_order(tids, "first_order_descent", "influence", "beneficial", seed, steps)
            elif strat in {"random", "multi_random"}:
                steps = ft.steps if strat == "random" else ft.multi_steps
                rep, tr = self.first_order(tids, "first_order_descent", "random", "beneficial", seed, steps)
            elif strat == "harmful":
                rep, tr = self.first_order(tids, "first_order_ascent", "influence", "harmful", seed, ft.steps)
            elif strat == "second_order":
                cfg = self.ft_config("second_order_aligned", "influence", seed, min(ft.steps, adapt.MAX_FRESH_STEPS),
                                     self.cfg.second_order_lr)
                tr = self.tracker(tids)
                _, rep = adapt.finetune_second_order(self.model, self.theta, self.pairs(tids, ft.pool_size, seed),
                                                     self.basis, cfg, tr, self.basis.source_hash)
            else:
                cfg = self.ft_config("second_order_aligned", "influence", seed, min(ft.steps, adapt.MAX_FRESH_STEPS),
                                     self.cfg.second_order_lr)
                tr = self.tracker(tids)
                per = max(1, ft.pool_size // len(tids))
                _, rep = adapt.finetune_multi_target(self.model, self.theta, self.pairs(tids, per, seed),
                                                     self.basis, cfg, tr, self.basis.source_hash)
            out.append({"strategy": strat, "seed": int(seed), "targets": [int(t) for t in tids],
                        "report": rep.to_dict(),
                        "non_target_final": [float(b) for b in tr.last_non_target]})
        return out


def run(config: ExperimentConfig, run_dir=None, until: str = "finetune", progress=None) -> Path:
    """Execute (or resume) every stage up to ``until``; returns the run directory."""
    pipe = Pipeline(config, run_dir, progress)
    (pipe.dir / "config.ini").write_text(config.to_ini())
    return pipe.run(until)


# ------------------------------------------------------------------- learning-rate sweep


def lr_sweep(config: ExperimentConfig, rates, max_steps: int = 20, run_dir=None, progress=None) -> Path:
    """BER of the top target after each of ``max_steps`` beneficial updates, per learning rate."""
    rates = [float(r) for r in rates]
    if not rates:
        raise ValueError("rates must be non-empty")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    pipe = Pipeline(config, run_dir, progress)
    pipe.run("influence")
    ctx = pipe.finetune_context()
    top = ctx.targets[0].eval_index
    rows = []
    for rate in rates:
        traj = []
        for seed in config.experiment.seeds:
            rep, _ = ctx.first_order([top], "first_order_descent", "influence", "beneficial", seed, max_steps, lr=rate)
            traj.append([b[0] for b in rep.target_ber])
        traj = np.array(traj)
        for step in range(max_steps + 1):
            rows.append([rate, step, float(traj[:, step].mean()), float(traj[:, step].std()), len(traj)])
    path = pipe.dir / "reports" / "lr_sweep.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(path, ["rate", "step", "mean_ber", "std_ber", "n_seeds"], rows)
    return path


# ------------------------------------------------------------------- reports


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if not np.isfinite(v) else repr(v)
    return str(v)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _mean_std(values) -> tuple[float | None, float | None]:
    v = np.array([x for x in values if x is not None and np.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return None, None
    return float(v.mean()), float(v.std())


def emit_reports(run_dir, snr_bins: int | None = None) -> Path:
    """Plot-ready CSV / JSON from persisted stage outputs only."""
    run_dir = Path(run_dir)
    needed = {"generate", "train", "evaluate", "arnoldi", "influence", "finetune"}
    missing = sorted((s for s in needed if not (run_dir / s / "done.json").exists()), key=STAGES.index)
    if missing:
        raise MissingStageError(missing)
    out = run_dir / "reports"
    out.mkdir(exist_ok=True)
    table = json.loads((run_dir / "evaluate" / "eval_table.json").read_text())
    cfg = ExperimentConfig.load(run_dir / "config.ini") if (run_dir / "config.ini").exists() else ExperimentConfig()
    bins = snr_bins or cfg.experiment.snr_bins
    floor = json.loads((run_dir / "evaluate" / "targets.json").read_text())["genie_floor"]

    # (a) relative-gap scatter
    rows = []
    for r in table["instances"]:
        g = r["genie_lmmse"]
        gap = (r["model"] - g) / g if g >= floor else None
        rows.append([r["index"], r["snr_db"], r["model"], r["ls_lmmse"], g, gap])
    _write_csv(out / "gaps.csv", ["index", "snr_db", "ber_model", "ber_ls_lmmse", "ber_genie", "delta_ber"], rows)

    # baseline BER vs SNR over the whole evaluation split
    _write_csv(out / "ber_vs_snr_eval.csv", ["bin", "snr_lo", "snr_hi", "count", "ls_lmmse", "model", "genie_lmmse"],
               _bin_rows(table["edges"], {b["bin"]: b for b in table["bins"]}, ["ls_lmmse", "model", "genie_lmmse"]))

    # (b) fine-tuning trajectories and summary
    ft = json.loads((run_dir / "finetune" / "finetune.json").read_text())
    runs = ft["runs"]
    traj_rows, per_seed = [], {}
    for r in runs:
        rep = r["report"]
        target_ber = np.array(rep["target_ber"])
        for step, bers in enumerate(target_ber):
            for tid, b in zip(r["targets"], bers):
                traj_rows.append([r["strategy"], r["seed"], tid, step, float(b)])
        key = (r["strategy"], r["seed"])
        per_seed.setdefault(key, []).append(target_ber.mean(axis=1))
    _write_csv(out / "trajectories.csv", ["strategy", "seed", "target", "step", "target_ber"], traj_rows)
    summ_rows = []
    strategies = sorted({k[0] for k in per_seed})
    for strat in strategies:
        seeds = sorted(s for (st, s) in per_seed if st == strat)
        mat = np.array([np.mean(per_seed[(strat, s)], axis=0) for s in seeds])  # [seeds, steps+1]
        for step in range(mat.shape[1]):
            summ_rows.append([strat, step, float(mat[:, step].mean()), float(mat[:, step].std()), len(seeds)])
    _write_csv(out / "trajectories_summary.csv", ["strategy", "step", "mean_ber", "std_ber", "n_seeds"], summ_rows)

    summary = {}
    for strat in strategies:
        sel = [r for r in runs if r["strategy"] == strat]
        r_gaps = [g for r in sel for g in r["report"].get("r_gap", [])]
        before = [b for r in sel for b in r["report"]["target_ber"][0]]
        after = [b for r in sel for b in r["report"]["target_ber"][-1]]
        nt_b = [r["report"]["non_target_ber"][0] for r in sel if r["report"]["non_target_ber"]]
        nt_a = [r["report"]["non_target_ber"][-1] for r in sel if r["report"]["non_target_ber"]]
        pred = [r["report"]["predicted_loss_change"] for r in sel if r["report"]["predicted_loss_change"] is not None]
        summary[strat] = {
            "runs": len(sel),
            "r_gap_mean": _mean_std(r_gaps)[0], "r_gap_std": _mean_std(r_gaps)[1],
            "target_ber_before": _mean_std(before)[0], "target_ber_after": _mean_std(after)[0],
            "target_ber_after_std": _mean_std(after)[1],
            "non_target_ber_before": _mean_std(nt_b)[0], "non_target_ber_after": _mean_std(nt_a)[0],
            "predicted_loss_change_mean": _mean_std(pred)[0],
        }
    _write_json(out / "finetune_summary.json", summary)

    # (c) BER vs SNR on the fixed non-target subset for the five receiver variants
    nt = np.array(ft["non_target_indices"], dtype=np.int64)
    inst = {r["index"]: r for r in table["instances"]}
    snr = np.array([inst[int(i)]["snr_db"] for i in nt])
    curves = {"ls_lmmse": np.array([inst[int(i)]["ls_lmmse"] for i in nt]),
              "before": np.array([inst[int(i)]["model"] for i in nt])}
    for strat, name in (("random", "random"), ("influence", "influence")):
        finals = [r["non_target_final"] for r in runs if r["strategy"] == strat]
        if finals:
            curves[name] = np.mean(np.array(finals), axis=0)
    curves["genie_lmmse"] = np.array([inst[int(i)]["genie_lmmse"] for i in nt])
    bt = adapt.ber_table(curves, snr, bins, (cfg.link.snr_db_min, cfg.link.snr_db_max))
    _write_csv(out / "ber_vs_snr.csv", ["bin", "snr_lo", "snr_hi", "count", *curves],
               _bin_rows(bt["edges"], {b["bin"]: b for b in bt["bins"]}, list(curves)))

    # (d) influence histograms, (e) truncation diagnostics
    hists = json.loads((run_dir / "influence" / "histograms.json").read_text())
    _write_json(out / "histograms.json", hists)
    trunc = json.loads((run_dir / "arnoldi" / "truncation.json").read_text())
    diag = trunc.get("diagnostic")
    if diag is not None:
        cols = ["k", "eigenvalue", "usable", "err", "abs_drop", "rel_drop", "ihvp_norm", "ihvp_abs_change",
                "ihvp_rel_change"]
        _write_csv(out / "truncation.csv", cols, [[row[c] for c in cols] for row in diag["rows"]])
    _write_json(out / "truncation.json", {"elbow": None if diag is None else diag["elbow"],
                                          "eigenvalues": trunc["eigenvalues"], "residuals": trunc["residuals"],
                                          "krylov_steps": trunc["krylov_steps"], "passes": trunc["passes"]})
    return out


def _bin_rows(edges, populated: dict, cols: list[str]) -> list[list]:
    rows = []
    for b in range(len(edges) - 1):
        row = populated.get(b)
        vals = [row[c] for c in cols] if row else [None] * len(cols)
        rows.append([b, float(edges[b]), float(edges[b + 1]), row["count"] if row else 0, *vals])
    return rows
