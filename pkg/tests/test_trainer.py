import csv
import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from meshletemp.config import apply_overrides
from meshletemp.model import Prediction, build_model
from meshletemp.synth import Dataset, generate_dataset
from meshletemp.trainer import (
    METRIC_COLUMNS,
    Checkpoint,
    NumericalError,
    PresetMismatchError,
    evaluate,
    evaluate_predictions,
    finetune,
    load_model,
    lr_at,
    metrics_csv,
    model_state,
    train,
)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(root, 6, 0, resolution=32, coarse_count=24, test_fraction=0.34)
    return Dataset(root)


@pytest.fixture
def cfg(tiny_cfg):
    return apply_overrides(tiny_cfg, {"epochs": 2, "batch_size": 2, "base_lr": 1e-3})


def test_lr_examples():
    assert lr_at(0, 100, 1e-4) == 1e-4
    assert lr_at(100, 100, 1e-4) == pytest.approx(1.9509032201612826e-05, abs=1e-16)
    assert lr_at(8, 14, 1e-4) == pytest.approx(1e-4 / math.sqrt(2), abs=1e-18)
    with pytest.raises(ValueError):
        lr_at(101, 100, 1e-4)
    with pytest.raises(ValueError):
        lr_at(-1, 100, 1e-4)


@settings(max_examples=50, deadline=None)
@given(S=st.integers(1, 10_000), eta=st.floats(1e-8, 1.0))
def test_lr_strictly_decreasing_and_positive(S, eta):
    steps = np.unique(np.linspace(0, S, 200).astype(int))
    lrs = np.array([lr_at(int(s), S, eta) for s in steps])
    assert np.all(lrs > 0)
    assert np.all(np.diff(lrs) < 0)


def test_zero_gradient_step_leaves_weights(cfg):
    model = build_model(cfg)
    before = model_state(model)
    opt = torch.optim.Adam(model.parameters(), lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    after = model_state(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_zero_epochs_returns_initial_weights(cfg, tiny_data, tmp_path):
    ck = train(apply_overrides(cfg, {"epochs": 0}), tiny_data, out_dir=tmp_path)
    assert ck.step == 0 and len(ck.history) == 0
    init = model_state(build_model(ck.config, tiny_data.body, tiny_data.topo))
    assert all(np.array_equal(init[k], ck.weights[k]) for k in init)
    assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["step_0000000.mltc"]


def test_training_is_deterministic_and_logged(cfg, tiny_data, tmp_path):
    a = train(cfg, tiny_data, out_dir=tmp_path / "a")
    b = train(cfg, tiny_data, out_dir=tmp_path / "b")
    assert a.history.shape == (4, 8)
    assert np.array_equal(a.history, b.history)
    assert a.to_bytes() == b.to_bytes()
    names = sorted(p.name for p in (tmp_path / "a" / "checkpoints").iterdir())
    assert names == ["step_0000000.mltc", "step_0000002.mltc", "step_0000004.mltc"]
    with open(tmp_path / "a" / "train_log.csv", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "lr", "l_v", "l_j", "l_j_reg", "l_v_temp", "l_j_proj", "total"]
    assert len(rows) == 5
    assert float(rows[1][1]) == cfg.base_lr


def test_history_total_matches_weighted_terms(cfg, tiny_data):
    h = train(cfg, tiny_data).history
    w = cfg.loss
    recomputed = w.alpha * (h[:, 2] + h[:, 3] + h[:, 4]) + w.alpha_temp * h[:, 5] + w.beta * h[:, 6]
    np.testing.assert_allclose(h[:, 7], recomputed, rtol=0, atol=1e-12)


def test_checkpoint_roundtrip(cfg, tiny_data, tmp_path):
    ck = train(cfg, tiny_data)
    buf = ck.save(tmp_path / "c.mltc")
    back = Checkpoint.load(tmp_path / "c.mltc")
    assert back.to_bytes() == buf
    assert buf[:4] == b"MLTC"
    assert evaluate(back, tiny_data, "train") == evaluate(ck, tiny_data, "train")


def test_checkpoint_rejects_bad_magic():
    from meshletemp.tensorio import FormatError

    with pytest.raises(FormatError):
        Checkpoint.from_bytes(b"XXXX\x01\x00\x00\x00")


def test_evaluate_table_has_three_metrics(cfg, tiny_data):
    ck = train(apply_overrides(cfg, {"epochs": 0}), tiny_data)
    row = evaluate(ck, tiny_data, "test")
    assert list(row) == ["split", "mpve", "mpjpe", "pa_mpjpe"]
    text = metrics_csv([row])
    assert text.splitlines()[0].split(",") == list(METRIC_COLUMNS)


def test_preset_mismatch(cfg, tiny_data):
    bad = apply_overrides(cfg, {"model.coarse_count": 20})
    with pytest.raises(PresetMismatchError):
        train(bad, tiny_data)
    ck = train(apply_overrides(cfg, {"epochs": 0}), tiny_data)
    ck.config = bad
    with pytest.raises(PresetMismatchError):
        evaluate(ck, tiny_data, "test")


class _Injected(torch.nn.Module):
    """Stands in for the network: emits fixed predictions in call order."""

    def __init__(self, fine, joints):
        super().__init__()
        self.dummy = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
        self.fine, self.joints, self.pos = fine, joints, 0

    def forward(self, images, ratio, seed):
        n = images.shape[0]
        sl = slice(self.pos, self.pos + n)
        self.pos += n
        f, j = self.fine[sl], self.joints[sl]
        pred = Prediction(j, f[:, :1], f, torch.zeros(n, 3), j[..., :2])
        return SimpleNamespace(pred=pred, template=SimpleNamespace(template_coarse=f[:, :1]))


def test_evaluate_ground_truth_injection_is_zero(tiny_data):
    ids = tiny_data.ids("test")
    _, gt = tiny_data.tensors(ids)
    row = evaluate(_Injected(gt.fine_vertices, gt.joints3d), tiny_data, "test")
    assert row["mpve"] == row["mpjpe"] == 0.0
    assert row["pa_mpjpe"] < 1e-12


def _loop_oracle(pred_fine, pred_j, gts_fine, gts_j, reg):
    """Direct per-sample loops; rotations via Kabsch in scipy rather than our SVD code."""
    mpve_s, mpjpe_s, pa_s = [], [], []
    for gf, gj in zip(gts_fine, gts_j):
        pr = (reg @ pred_fine)[[2, 3]].mean(0)
        gr = (reg @ gf)[[2, 3]].mean(0)
        mpve_s.append(np.mean([np.linalg.norm((p - pr) - (g - gr)) for p, g in zip(pred_fine, gf)]))
        pj_root, gj_root = pred_j[[2, 3]].mean(0), gj[[2, 3]].mean(0)
        mpjpe_s.append(np.mean([np.linalg.norm((p - pj_root) - (g - gj_root)) for p, g in zip(pred_j, gj)]))
        p = pred_j - pred_j.mean(0)
        g = gj - gj.mean(0)
        rot, _ = Rotation.align_vectors(g, p)
        rp = rot.apply(p)
        s = (rp * g).sum() / (p**2).sum()
        pa_s.append(np.mean(np.linalg.norm(s * rp - g, axis=1)))
    return np.mean(mpve_s), np.mean(mpjpe_s), np.mean(pa_s)


def test_evaluate_rest_pose_prediction_matches_loop_oracle(tiny_data):
    ids = tiny_data.ids("all")
    _, gt = tiny_data.tensors(ids)
    rest = tiny_data.body.template_vertices
    reg = tiny_data.topo.joint_regressor @ tiny_data.topo.dense_downsample()
    rest_j = reg @ rest
    n = len(ids)
    model = _Injected(torch.from_numpy(np.repeat(rest[None], n, 0)), torch.from_numpy(np.repeat(rest_j[None], n, 0)))
    row = evaluate(model, tiny_data, "all")
    oracle = _loop_oracle(rest, rest_j, gt.fine_vertices.numpy(), gt.joints3d.numpy(), reg)
    assert row["mpve"] == pytest.approx(oracle[0], abs=1e-9)
    assert row["mpjpe"] == pytest.approx(oracle[1], abs=1e-9)
    assert row["pa_mpjpe"] == pytest.approx(oracle[2], abs=1e-9)
    assert row["mpve"] > 0.01


def test_evaluate_predictions_identity(tiny_data):
    _, gt = tiny_data.tensors(tiny_data.ids("all"))
    f, j = gt.fine_vertices.numpy(), gt.joints3d.numpy()
    m = evaluate_predictions(f, j, f, j, tiny_data.topo)
    assert m["mpve"] == 0.0 and m["mpjpe"] == 0.0 and m["pa_mpjpe"] < 1e-12


def test_finetune_zero_epochs_keeps_weights(cfg, tiny_data):
    ck = train(cfg, tiny_data)
    ft = finetune(ck, tiny_data, {"epochs": 0})
    assert all(np.array_equal(ck.weights[k], ft.weights[k]) for k in ck.weights)


def test_finetune_zero_lr_keeps_metrics(cfg, tiny_data):
    ck = train(cfg, tiny_data)
    ft = finetune(ck, tiny_data, {"base_lr": 0.0, "epochs": 1})
    assert ft.step == 2 and len(ft.history) == 2
    a, b = evaluate(ck, tiny_data, "test"), evaluate(ft, tiny_data, "test")
    for k in ("mpve", "mpjpe", "pa_mpjpe"):
        assert abs(a[k] - b[k]) <= 1e-12


def test_finetune_rejects_architecture_change(cfg, tiny_data):
    ck = train(apply_overrides(cfg, {"epochs": 0}), tiny_data)
    with pytest.raises(PresetMismatchError):
        finetune(ck, tiny_data, {"mte.layers_per_block": 2})


def test_forgetting_protocol_smoke(cfg, tmp_path):
    hard = generate_dataset(tmp_path / "hard", 4, 1, tiers=["hard"], resolution=32, coarse_count=24)
    easy = generate_dataset(tmp_path / "easy", 4, 2, tiers=["easy"], resolution=32, coarse_count=24)
    assert hard and easy
    hard_ds, easy_ds = Dataset(tmp_path / "hard"), Dataset(tmp_path / "easy")
    ck = train(cfg, easy_ds)
    ft = finetune(ck, hard_ds, {"epochs": 1})
    rows = [evaluate(ft, hard_ds, "train"), evaluate(ft, easy_ds, "train")]
    assert all(np.isfinite([r["mpve"], r["mpjpe"], r["pa_mpjpe"]]).all() for r in rows)


def test_nonfinite_loss_aborts_with_dump(cfg, tmp_path):
    import json

    generate_dataset(tmp_path / "d", 4, 3, resolution=32, coarse_count=24)
    ds = Dataset(tmp_path / "d")
    ds.records["000002"].image[0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="000002"):
        train(cfg, ds, out_dir=tmp_path / "run")
    dump = json.loads((tmp_path / "run" / "nonfinite_batch.json").read_text())
    assert "000002" in dump["batch_ids"]


def test_load_model_restores_weights(cfg, tiny_data):
    ck = train(cfg, tiny_data)
    m = load_model(Checkpoint.from_bytes(ck.to_bytes()), tiny_data)
    st = model_state(m)
    assert all(np.array_equal(st[k], ck.weights[k]) for k in st)
