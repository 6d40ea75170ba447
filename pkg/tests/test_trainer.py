import json
import math
import time

import numpy as np
import pytest
import torch

from textuda.config import TrainConfig
from textuda.losses import seg_loss
from textuda.metrics import validate_report
from textuda.trainer import (CheckpointMismatch, NonFiniteLoss, Trainer, evaluate, load_checkpoint, load_datasets,
                             params_hash, poly_lr, train)

TERMS = ("ce", "dice", "seg", "seg_aux", "adv", "vlcol", "proto", "total")


@pytest.fixture(scope="module")
def data():
    cfg = TrainConfig(phantom=dict(image_size=32, n_subjects=5, slices_per_subject=3))
    return load_datasets(cfg)


def _cfg(tmp_path, **kw):
    base = dict(iterations=6, batch_size=2, lr=1e-2, lr_fusion=1e-3, disc_width=8, eval_every=0,
                out_dir=str(tmp_path / "run"), phantom=dict(image_size=32, n_subjects=5, slices_per_subject=3))
    base.update(kw)
    return TrainConfig(**base)


def _state_bytes(tr):
    return [p.detach().numpy().tobytes() for m in (tr.model, tr.d_main, tr.d_aux) for p in m.state_dict().values()]


def test_poly_lr():
    assert poly_lr(1.0, 0, 10, 0.9) == 1.0
    assert poly_lr(1.0, 5, 10, 0.9) == pytest.approx(0.5 ** 0.9)
    assert poly_lr(1.0, 10, 10, 0.9) == 0.0


def test_one_step_terms_finite_nonnegative(tmp_path, data):
    tr = Trainer(_cfg(tmp_path), *data)
    for _ in range(2):
        rec = tr.step()
    for k in TERMS + ("d_main", "d_aux"):
        assert math.isfinite(rec[k]) and rec[k] >= 0, k
    assert rec["vlcol"] <= 2 and rec["vlcol_used"] and rec["proto_used"]


def test_recorded_total_is_weighted_sum(tmp_path, data):
    cfg = _cfg(tmp_path, lambda_adv=0.2, lambda_vlcol=0.7, lambda_proto=0.05, aux_seg_weight=0.3)
    tr = Trainer(cfg, *data)
    for _ in range(3):
        r = tr.step()
        expected = (r["seg"] + 0.3 * r["seg_aux"] + 0.2 * r["adv"] + 0.7 * r["vlcol"] * r["vlcol_used"]
                    + 0.05 * r["proto"] * r["proto_used"])
        assert r["total"] == pytest.approx(expected, rel=1e-6)
        assert r["seg"] == pytest.approx(r["ce"] + r["dice"], rel=1e-6)


def test_warmup_keeps_target_terms_out(tmp_path, data):
    tr = Trainer(_cfg(tmp_path, warmup_iters=2), *data)
    r = tr.step()
    assert not r["adapting"]
    assert r["total"] == pytest.approx(r["seg"] + tr.cfg.aux_seg_weight * r["seg_aux"] + r["vlcol"] * r["vlcol_used"], rel=1e-6)
    tr.step()
    assert tr.step()["adapting"]


def test_zero_lambdas_equal_pure_supervised_step(tmp_path, data):
    cfg = _cfg(tmp_path, lambda_adv=0.0, lambda_vlcol=0.0, lambda_proto=0.0)
    a, b = Trainer(cfg, *data), Trainer(cfg, *data)
    xs, ys = a.src_sampler.sample(2)
    xt, _ = a.tgt_sampler.sample(2)
    a.train_step(xs, ys, xt)

    b.model.train()
    b.set_lr()
    out = b.model(torch.as_tensor(xs), b.E_src)
    y = torch.as_tensor(ys)
    loss = seg_loss(out.probs, y)
    if cfg.aux_seg_weight > 0:
        loss = loss + cfg.aux_seg_weight * seg_loss(out.aux_probs, y)
    b.opt_seg.zero_grad(set_to_none=True)
    b.opt_fusion.zero_grad(set_to_none=True)
    loss.backward()
    b.opt_seg.step()
    b.opt_fusion.step()
    assert _state_bytes(a) == _state_bytes(b)


def test_generator_and_discriminator_updates_are_isolated(tmp_path, data):
    tr = Trainer(_cfg(tmp_path), *data)
    tr.step()
    g0, d0 = params_hash(tr.model), params_hash(tr.d_main) + params_hash(tr.d_aux)
    P = torch.softmax(torch.randn(2, 5, 32, 32), 1)
    E = torch.rand(2, 5, 32, 32)
    tr.discriminator_step(P, P, E, E)
    assert params_hash(tr.model) == g0
    assert params_hash(tr.d_main) + params_hash(tr.d_aux) != d0

    # generator step: discriminator weights stay put
    real_disc_step = tr.discriminator_step
    tr.discriminator_step = lambda *a: {}
    d1 = params_hash(tr.d_main) + params_hash(tr.d_aux)
    tr.step()
    assert params_hash(tr.d_main) + params_hash(tr.d_aux) == d1
    assert params_hash(tr.model) != g0
    tr.discriminator_step = real_disc_step


def test_resume_is_bitwise(tmp_path, data):
    cfg = _cfg(tmp_path, iterations=5)
    a = Trainer(cfg, *data)
    for _ in range(3):
        a.step()
    ckpt = a.save_checkpoint(tmp_path / "k.pt")
    a.step()
    b = Trainer(cfg.replace(seed=99), *data)
    b.load_state_dict(load_checkpoint(ckpt))
    b.step()
    assert _state_bytes(a) == _state_bytes(b)
    assert a.history[-1] == b.history[-1]


def test_checkpoint_arch_mismatch(tmp_path, data):
    a = Trainer(_cfg(tmp_path), *data)
    ckpt = a.save_checkpoint(tmp_path / "k.pt")
    b = Trainer(_cfg(tmp_path, disc_width=16), *data)
    with pytest.raises(CheckpointMismatch):
        b.load_state_dict(load_checkpoint(ckpt))


def test_nonfinite_loss_aborts(tmp_path, data):
    tr = Trainer(_cfg(tmp_path), *data)
    xs, ys = tr.src_sampler.sample(2)
    xt, _ = tr.tgt_sampler.sample(2)
    xs[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        tr.train_step(xs, ys, xt)


def test_train_writes_log_and_checkpoint(tmp_path, data):
    cfg = _cfg(tmp_path, iterations=10, eval_every=5)
    t0 = time.time()
    out = train(cfg, datasets=data)
    assert time.time() - t0 < 300
    lines = [json.loads(l) for l in out["log"].read_text().splitlines()]
    assert [r["iteration"] for r in lines] == list(range(1, 11))
    assert all(set(TERMS) <= set(r) for r in lines)
    assert out["checkpoint"].exists() and (tmp_path / "run" / "best.pt").exists()
    assert len((tmp_path / "run" / "eval.jsonl").read_text().splitlines()) == 2

    # resuming a finished run is a no-op; extending it appends to the log
    more = train(cfg.replace(iterations=12), resume=str(out["checkpoint"]), datasets=data)
    assert len(more["log"].read_text().splitlines()) == 12


def test_evaluate_deterministic_and_schema(tmp_path, data):
    out = train(_cfg(tmp_path, iterations=2), datasets=data)
    tgt = data[1].subset("test")
    r1, r2 = evaluate(out["checkpoint"], tgt), evaluate(out["checkpoint"], tgt)
    assert r1.to_dict() == r2.to_dict()
    validate_report(r1.to_dict())
    assert r1.classes == [1, 2, 3, 4]


@pytest.mark.slow
def test_converged_source_only_fits_source_train_split(tmp_path):
    from textuda.experiments import SOURCE_ONLY_OVERRIDES, budget_config

    cfg = budget_config("tiny", out_dir=str(tmp_path / "run"), iterations=1200, **SOURCE_ONLY_OVERRIDES)
    source, target = load_datasets(cfg)
    out = train(cfg, datasets=(source, target))
    assert evaluate(out["checkpoint"], source.subset("train")).mean_dice > 90
