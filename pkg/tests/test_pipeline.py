import csv
import json
import shutil

import numpy as np
import pytest

from ifrx import pipeline, receiver
from ifrx.pipeline import ExperimentConfig, MissingStageError, Pipeline


def _csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_ini_roundtrip(tiny_config):
    text = tiny_config.to_ini()
    assert ExperimentConfig.from_ini(text) == tiny_config
    assert ExperimentConfig.from_ini(ExperimentConfig().to_ini()) == ExperimentConfig()
    assert "; dB" in text


@pytest.mark.parametrize("text", ["[bogus]\nx = 1\n", "[arnoldi]\nkrylov = 3\n", "[model]\nnoise_feature = maybe\n"])
def test_ini_rejects_unknown_or_malformed(text):
    with pytest.raises(ValueError):
        ExperimentConfig.from_ini(text)


def test_section_hashes_change_with_content(tiny_config):
    import dataclasses

    other = dataclasses.replace(tiny_config, arnoldi=dataclasses.replace(tiny_config.arnoldi, k=5))
    assert other.section_hash("arnoldi") != tiny_config.section_hash("arnoldi")
    assert other.section_hash("data") == tiny_config.section_hash("data")


def test_derived_learning_rates():
    cfg = ExperimentConfig()
    assert cfg.finetune_lr == pytest.approx(cfg.train.lr_max / 50)
    assert cfg.second_order_lr == cfg.finetune_lr


def test_named_substreams_are_distinct_and_stable():
    names = ["data", "train", "arnoldi-start", "non-target"]
    seeds = [pipeline.substream_seed(0, n) for n in names]
    assert len(set(seeds)) == len(seeds)
    assert seeds == [pipeline.substream_seed(0, n) for n in names]
    assert pipeline.substream_seed(1, "data") != seeds[0]


def test_run_layout(tiny_run):
    for stage in pipeline.STAGES:
        done = json.loads((tiny_run / stage / "done.json").read_text())
        assert done["stage"] == stage
        assert all((tiny_run / stage / f).exists() for f in done["outputs"])
    assert (tiny_run / "config.ini").exists()
    header = (tiny_run / "influence" / "scores.jsonl").read_text().splitlines()[0]
    assert json.loads(header)["self_influence"]


def test_rerun_is_memoized(tiny_config, tiny_run):
    pipe = Pipeline(tiny_config, tiny_run)
    pipe.run()
    assert pipe.executed == []


def test_edited_artifact_invalidates_dependents(tiny_config, tiny_run, tmp_path):
    run = tmp_path / "copy"
    shutil.copytree(tiny_run, run)
    model, theta, side = receiver.load_model(run / "train" / "model.ifrxmdl")
    receiver.save_model(run / "train" / "model.ifrxmdl", model, theta * 1.01, {"lr_max": side["lr_max"]})
    pipe = Pipeline(tiny_config, run)
    pipe.run()
    assert pipe.executed == ["evaluate", "arnoldi", "influence", "finetune"]

    import dataclasses

    changed = dataclasses.replace(tiny_config, finetune=dataclasses.replace(tiny_config.finetune, steps=2))
    pipe = Pipeline(changed, run)
    pipe.run()
    assert pipe.executed == ["finetune"]


def test_reports_need_all_stages(tiny_config, tmp_path):
    pipe = Pipeline(tiny_config, tmp_path / "partial")
    pipe.run("generate")
    with pytest.raises(MissingStageError) as err:
        pipeline.emit_reports(tmp_path / "partial")
    assert err.value.missing == ["train", "evaluate", "arnoldi", "influence", "finetune"]
    with pytest.raises(ValueError):
        pipe.run("deploy")


def test_fig4_csv_has_55_bins(tiny_run):
    rows = _csv(tiny_run / "reports" / "ber_vs_snr.csv")
    assert len(rows) == 55
    assert set(rows[0]) >= {"ls_lmmse", "before", "random", "influence", "genie_lmmse"}
    ft = json.loads((tiny_run / "finetune" / "finetune.json").read_text())
    assert sum(int(r["count"]) for r in rows) == len(ft["non_target_indices"])
    assert len(_csv(tiny_run / "reports" / "ber_vs_snr_eval.csv")) == 55


def test_trajectory_shape(tiny_config, tiny_run):
    rows = _csv(tiny_run / "reports" / "trajectories.csv")
    seeds = len(tiny_config.experiment.seeds)
    n_targets = tiny_config.influence.top_n
    for strategy, steps, targets in (("influence", 3, n_targets), ("harmful", 3, n_targets),
                                     ("multi_random", 4, n_targets), ("multi_second_order", 3, n_targets)):
        sel = [r for r in rows if r["strategy"] == strategy]
        assert len(sel) == seeds * (steps + 1) * targets
    summ = [r for r in _csv(tiny_run / "reports" / "trajectories_summary.csv") if r["strategy"] == "influence"]
    assert len(summ) == 4 and all(int(r["n_seeds"]) == seeds for r in summ)


def test_gap_scatter_recomputes_from_table(tiny_run):
    table = json.loads((tiny_run / "evaluate" / "eval_table.json").read_text())
    rows = _csv(tiny_run / "reports" / "gaps.csv")
    assert len(rows) == len(table["instances"])
    for r, inst in zip(rows, table["instances"]):
        g = inst["genie_lmmse"]
        if g >= 1e-3:
            assert float(r["delta_ber"]) == (inst["model"] - g) / g
        else:
            assert r["delta_ber"] == ""


def test_r_gap_arithmetic_in_reports(tiny_run):
    ft = json.loads((tiny_run / "finetune" / "finetune.json").read_text())
    for run in ft["runs"]:
        rep = run["report"]
        for b, a, r in zip(rep["gap_before"], rep["gap_after"], rep["r_gap"]):
            if r is not None:
                assert r == pytest.approx((b - a) / b * 100)


def test_targets_match_table(tiny_run):
    table = json.loads((tiny_run / "evaluate" / "eval_table.json").read_text())
    targets = json.loads((tiny_run / "evaluate" / "targets.json").read_text())["targets"]
    model = np.array([r["model"] for r in table["instances"]])
    genie = np.array([r["genie_lmmse"] for r in table["instances"]])
    ok = np.flatnonzero(genie >= 1e-3)
    order = sorted(ok, key=lambda i: (-(model[i] - genie[i]) / genie[i], i))
    assert [t["eval_index"] for t in targets] == [int(i) for i in order[: len(targets)]]


def test_truncation_report(tiny_run):
    t = json.loads((tiny_run / "reports" / "truncation.json").read_text())
    rows = _csv(tiny_run / "reports" / "truncation.csv")
    assert len(rows) == len(t["eigenvalues"])
    assert t["passes"] >= 3.0


def test_lr_sweep_table(tiny_config, tiny_run, tmp_path):
    run = tmp_path / "sweep"
    shutil.copytree(tiny_run, run)
    path = pipeline.lr_sweep(tiny_config, [0.0, 1e-3], max_steps=3, run_dir=run)
    rows = _csv(path)
    assert len(rows) == 2 * 4
    zero = [float(r["mean_ber"]) for r in rows if float(r["rate"]) == 0.0]
    assert len(set(zero)) == 1
    with pytest.raises(ValueError):
        pipeline.lr_sweep(tiny_config, [], run_dir=run)
