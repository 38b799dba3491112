"""Acceptance suite: one test per release criterion.

Each test pins its tolerance and prints one PASS line (run with ``-s`` to
see them live); the two training-based criteria carry a ``slow`` marker
but run in the default suite.
"""

import copy
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import (
    boundary_oracle,
    ce_oracle,
    fd_grad,
    iou_sets_oracle,
    random_simplex,
    sdm_oracle,
    smooth_image,
)

from eyessl.core import DatasetPool, TrainConfig, seeded_rng
from eyessl.augment import (
    SpatialAugConfig,
    SpatialTransform,
    apply_spatial,
    invert_spatial,
    sample_T,
)
from eyessl.data import SplitSpec, generate_synthetic, make_split
from eyessl.engine import (
    assemble_batch,
    guess_labels_D,
    guess_labels_SS,
    make_optimizer,
    train,
    train_step,
)
from eyessl.evaluation import iou, render_report
from eyessl.losses import (
    boundary_weight_map,
    consistency_loss,
    cross_entropy,
    schedule,
    signed_distance,
    supervised_loss,
    surface_loss,
    total_loss,
)
from eyessl.network import ModelSpec, init_params, predict_probs

DESK_HW = (64, 96)

# recipe for the desk-scale directional experiment (criterion 8): schedule
# slopes are scaled up so the consistency terms matter within a dozen
# epochs instead of the production run's 250
EXP_SEEDS = (0, 1, 2)
EXP_EPOCHS_K4 = 12
EXP_EPOCHS_K200 = 6
EXP_SLOPE_U = 2.0
EXP_SUBJECTS = 24
EXP_UNLABELED = 500
EXP_VAL = 32


def _stamp(n, t0, budget, desc):
    elapsed = time.monotonic() - t0
    assert elapsed < budget, f"criterion {n} took {elapsed:.1f}s, budget {budget}s"
    print(f"\nACCEPTANCE {n:2d} PASS ({elapsed:5.1f}s < {budget}s): {desc}")


def _desk_model(seed=100):
    return init_params(ModelSpec.preset("desk"), seeded_rng(seed))


def _desk_images(n, seed=101, prefix="s"):
    items = generate_synthetic(n, seeded_rng(seed).child("acc"), size=DESK_HW,
                               n_subjects=min(n, 4), prefix=prefix)
    return [img for img, _ in items]


def test_criterion_1_label_guess_averaging():
    t0 = time.monotonic()
    model = _desk_model()
    images = _desk_images(3)
    out = guess_labels_D(model, images, A=2, rng=seeded_rng(7))
    for i, img in enumerate(images):
        hand = np.mean(
            [predict_probs(model, c[None])[0].astype(np.float64) for c in out.copies[i]],
            axis=0,
        )
        assert np.abs(out.guessed[i].probs - hand).max() <= 1e-6
        assert out.guessed[i].check_simplex(tol=1e-5)
    _stamp(1, t0, 10, "photometric label guess equals hand-averaged forward passes")


def test_criterion_2_inverse_guess_degenerates_to_photometric():
    t0 = time.monotonic()
    model = _desk_model(102)
    images = _desk_images(3, seed=103)
    d = guess_labels_D(model, images, A=2, rng=seeded_rng(11))
    ss = guess_labels_SS(model, images, A=2, rng=seeded_rng(11),
                         sp_cfg=SpatialAugConfig(t_prob=0.0))
    for gd, gs, v in zip(d.guessed, ss.guessed, ss.validity):
        assert np.array_equal(gd.probs, gs.probs)
        assert np.all(v.valid == 1.0)
    _stamp(2, t0, 10, "identity transforms make the inverse guess bit-identical")


def test_criterion_3_inverse_transform_exactness():
    t0 = time.monotonic()
    rng = seeded_rng(12)
    # integer translations: exact identity on the valid region
    cls = rng.integers(0, 4, size=DESK_HW)
    onehot = np.zeros((4,) + DESK_HW, dtype=np.float32)
    np.put_along_axis(onehot, cls[None], 1.0, axis=0)
    quarters = np.full((4,) + DESK_HW, 0.25, dtype=np.float32)
    for field in (onehot, quarters):
        for shift in ((0, 20), (5, -3), (-11, 7), (20, 20)):
            t = SpatialTransform(shift=shift, applied=True)
            back, v = invert_spatial(apply_spatial(field, t), t)
            good = v.valid > 0.99
            assert np.array_equal(back.probs[:, good], field[:, good])

    # sampled rotations: interior residual of the round trip stays small
    base = smooth_image(*DESK_HW)
    smooth = np.stack([base, 1.0 - base, 0.5 + 0.5 * base, np.full(DESK_HW, 0.6, np.float32)])
    smooth = smooth / smooth.sum(axis=0, keepdims=True)
    interior = np.zeros(DESK_HW, dtype=bool)
    interior[10:-10, 10:-10] = True
    cfg = SpatialAugConfig(t_prob=1.0, p_rotate=1.0, p_translate=0.0)
    for _ in range(12):
        t = sample_T(rng, cfg)
        back, v = invert_spatial(apply_spatial(smooth, t), t)
        sel = interior & (v.valid > 0.99)
        assert np.abs(back.probs[:, sel] - smooth[:, sel]).max() <= 0.02
    _stamp(3, t0, 30, "inverse warp: exact for integer shifts, <=0.02 interior for rotations")


def _params_equal(a, b):
    return all(torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))


def test_criterion_4_gradient_isolation():
    t0 = time.monotonic()
    cfg = TrainConfig(model="desk", method="SSL_D", synth_subjects=4)
    items = generate_synthetic(8, seeded_rng(13).child("d"), size=DESK_HW, n_subjects=4)
    pool = DatasetPool(labeled=items[:4], unlabeled=[i for i, _ in items[4:]])
    base = _desk_model(104)
    batch = assemble_batch(pool, cfg, seeded_rng(14))

    # (a) re-deriving the guess through a detached model copy leaves the
    # parameter update unchanged
    m_a = copy.deepcopy(base)
    train_step(m_a, make_optimizer(m_a, cfg), batch, 5, cfg, seeded_rng(15))

    from eyessl.augment import domain_cfg_from
    from eyessl.engine import _domain_copies, _forward_stack

    m_b = copy.deepcopy(base)
    opt_b = make_optimizer(m_b, cfg)
    imgs = np.stack([p[0].pixels for p in batch.labeled])
    masks = np.stack([p[1].classes for p in batch.labeled])
    l_sup = supervised_loss(m_b(torch.from_numpy(imgs).unsqueeze(1)), masks, cfg)
    copies = _domain_copies(batch.unlabeled, cfg.A, seeded_rng(15).child("domain"),
                            domain_cfg_from(cfg))
    preds_c = _forward_stack(m_b, copies, grad=True)
    detached_twin = copy.deepcopy(m_b)
    with torch.no_grad():
        guess = _forward_stack(detached_twin, copies, grad=False).mean(dim=1)
    l_u = consistency_loss(preds_c, guess[:, None].expand_as(preds_c))
    total = total_loss(l_sup, l_u, None, schedule(5, cfg), "SSL_D")
    opt_b.zero_grad()
    total.backward()
    opt_b.step()
    assert _params_equal(m_a, m_b)

    # (b) at epoch 0 both SSL modes reproduce the supervised update exactly
    m_sl = copy.deepcopy(base)
    cfg_sl = TrainConfig(model="desk", method="SL")
    train_step(m_sl, make_optimizer(m_sl, cfg_sl), batch, 0, cfg_sl, seeded_rng(16))
    for method in ("SSL_D", "SSL_SS"):
        m = copy.deepcopy(base)
        cfg_m = TrainConfig(model="desk", method=method)
        rep = train_step(m, make_optimizer(m, cfg_m), batch, 0, cfg_m, seeded_rng(16))
        assert rep.lambda_u == 0.0 and rep.lambda_ss == 0.0
        assert _params_equal(m_sl, m)
    _stamp(4, t0, 60, "guessed labels carry no gradient; zero-weight updates match SL")


def test_criterion_5_loss_oracles():
    t0 = time.monotonic()
    rng = seeded_rng(17)

    # cross-entropy value + gradient
    pred = np.clip(random_simplex(rng, 3, 3, 3), 0.05, None)
    target = rng.integers(0, 3, size=(3, 3))
    weights = rng.uniform(0.5, 2.0, size=(3, 3))
    assert cross_entropy(pred, target, weights).item() == pytest.approx(
        ce_oracle(pred, target, weights), abs=1e-6)
    tp = torch.tensor(pred, requires_grad=True)
    cross_entropy(tp, target, weights).backward()
    fd = fd_grad(lambda x: cross_entropy(torch.tensor(x), target, weights).item(), pred.copy())
    assert np.allclose(tp.grad.numpy(), fd, rtol=1e-3, atol=1e-7)

    # boundary-weighted composition at the production weights (1, 20, 1)
    pred5 = random_simplex(rng, 4, 5, 5)
    target5 = rng.integers(0, 4, size=(5, 5))
    cfg = TrainConfig(lambda1=1.0, lambda2=20.0, lambda3=1.0)
    w5 = 1.0 + 20.0 * boundary_oracle(target5, cfg.boundary_d, cfg.boundary_w)
    expected = ce_oracle(pred5, target5, w5) + float(np.mean(pred5 * sdm_oracle(target5, 4)))
    assert supervised_loss(pred5, target5, cfg).item() == pytest.approx(expected, abs=1e-6)
    assert np.array_equal(
        boundary_weight_map(target5, cfg.boundary_d, cfg.boundary_w).weights,
        boundary_oracle(target5, cfg.boundary_d, cfg.boundary_w))
    assert np.allclose(signed_distance(target5, 4).sdm, sdm_oracle(target5, 4), atol=1e-6)
    tp5 = torch.tensor(pred5, requires_grad=True)
    supervised_loss(tp5, target5, cfg).backward()
    fd5 = fd_grad(lambda x: supervised_loss(torch.tensor(x), target5, cfg).item(), pred5.copy())
    assert np.allclose(tp5.grad.numpy(), fd5, rtol=1e-3, atol=1e-7)

    # surface loss against the brute-force distance map
    pred3 = random_simplex(rng, 2, 3, 3)
    target3 = rng.integers(0, 2, size=(3, 3))
    manual = float(np.mean(pred3 * sdm_oracle(target3, 2)))
    assert surface_loss(pred3, signed_distance(target3, 2)).item() == pytest.approx(manual, abs=1e-6)

    # L2 consistency: analytic value and finite-difference gradient
    a = np.array([1.0, 0.0]).reshape(2, 1, 1)
    b = np.array([0.0, 1.0]).reshape(2, 1, 1)
    assert consistency_loss(a, b).item() == pytest.approx(1.0, abs=1e-6)
    pc = random_simplex(rng, 3, 3, 3)
    gc = random_simplex(rng, 3, 3, 3)
    vc = rng.uniform(0.0, 1.0, size=(3, 3))
    tc = torch.tensor(pc, requires_grad=True)
    consistency_loss(tc, gc, validity=vc).backward()
    fdc = fd_grad(lambda x: consistency_loss(torch.tensor(x), gc, validity=vc).item(), pc.copy())
    assert np.allclose(tc.grad.numpy(), fdc, rtol=1e-3, atol=1e-8)
    _stamp(5, t0, 60, "loss values match brute-force oracles; gradients match central FD")


def test_criterion_6_schedule():
    t0 = time.monotonic()
    cfg = TrainConfig()
    assert schedule(10, cfg).lambda_u == 0.2
    assert schedule(100, cfg).lambda_ss == 0.2
    assert schedule(0, cfg) == schedule(0, cfg)
    assert (schedule(0, cfg).lambda_u, schedule(0, cfg).lambda_ss) == (0.0, 0.0)
    _stamp(6, t0, 1, "linear ramps hit 0.2 at epochs 10 (u) and 100 (ss) exactly")


def test_criterion_7_iou_oracle():
    t0 = time.monotonic()
    grids = [np.array(bits, dtype=np.int64).reshape(2, 2)
             for bits in itertools.product((0, 1), repeat=4)]
    for a in grids:
        for b in grids:
            got = iou(a, b, num_classes=2)
            want = iou_sets_oracle(a, b, 2)
            assert np.allclose(got, want, atol=1e-12, equal_nan=True)
    rng = seeded_rng(18)
    for _ in range(10):
        a = rng.integers(0, 4, size=(16, 16))
        b = rng.integers(0, 4, size=(16, 16))
        assert np.allclose(iou(a, b, 4), iou_sets_oracle(a, b, 4), atol=1e-9, equal_nan=True)
    _stamp(7, t0, 10, "IoU equals set arithmetic on all 256 2x2 pairs and 4-class 16x16")


def _experiment_cfg(method, seed, k, epochs):
    return TrainConfig(
        method=method, seed=seed, k=k, epochs=epochs, model="desk",
        slope_u=EXP_SLOPE_U, slope_ss=EXP_SLOPE_U / 10,
        shift_max=6, eval_batch=EXP_VAL,
        synth_train=k + EXP_UNLABELED, synth_val=EXP_VAL, synth_subjects=EXP_SUBJECTS,
        unlabeled_cap=EXP_UNLABELED,
    )


def _experiment_data(seed, k):
    rng = seeded_rng(seed).child("data")
    train_items = generate_synthetic(k + EXP_UNLABELED, rng.child("train"), size=DESK_HW,
                                     n_subjects=EXP_SUBJECTS, prefix="s")
    val_items = generate_synthetic(EXP_VAL, rng.child("val"), size=DESK_HW,
                                   n_subjects=EXP_SUBJECTS // 2, prefix="v")
    pool = make_split(DatasetPool(labeled=train_items),
                      SplitSpec(k=k, mode="multi", seed=seed, unlabeled_cap=EXP_UNLABELED))
    return pool, val_items


def _best_miou(method, seed, k, epochs):
    cfg = _experiment_cfg(method, seed, k, epochs)
    pool, val_items = _experiment_data(seed, k)
    _, history = train(pool, val_items, cfg)
    return max(h["val_miou"] for h in history)


@pytest.mark.slow
def test_criterion_8_directional_synthetic_trend():
    t0 = time.monotonic()
    k4 = {m: [] for m in ("SL", "SSL_D", "SSL_SS")}
    for seed in EXP_SEEDS:
        for method in ("SL", "SSL_D", "SSL_SS"):
            k4[method].append(_best_miou(method, seed, 4, EXP_EPOCHS_K4))
    means = {m: float(np.mean(v)) for m, v in k4.items()}
    print(f"\n  k=4  per-seed SL={k4['SL']} SSL_D={k4['SSL_D']} SSL_SS={k4['SSL_SS']}")
    print(f"  k=4  means SL={means['SL']:.4f} SSL_D={means['SSL_D']:.4f} SSL_SS={means['SSL_SS']:.4f}")

    assert means["SSL_SS"] >= means["SSL_D"] >= means["SL"], f"ordering violated: {means}"
    wins = sum(d - s >= 0.01 for d, s in zip(k4["SSL_D"], k4["SL"]))
    assert wins >= 2, f"SSL_D beat SL by >=1 point in only {wins}/3 seeds"

    gap200 = []
    for seed in EXP_SEEDS:
        sl = _best_miou("SL", seed, 200, EXP_EPOCHS_K200)
        d = _best_miou("SSL_D", seed, 200, EXP_EPOCHS_K200)
        gap200.append(d - sl)
    gap4 = float(np.mean(k4["SSL_D"])) - float(np.mean(k4["SL"]))
    print(f"  gap k=4 {gap4:.4f} vs gap k=200 {np.mean(gap200):.4f}")
    assert float(np.mean(gap200)) < gap4, "SSL benefit did not shrink with more labels"
    _stamp(8, t0, 2700, "synthetic trend: SSL_SS >= SSL_D >= SL at k=4, gap shrinks at k=200")


def test_criterion_9_reporting_fixture():
    t0 = time.monotonic()
    summaries = [
        dict(method="SL", k_labeled=4, subject_mode="multi", seed=0, miou=0.8828),
        dict(method="SSL_D", k_labeled=4, subject_mode="multi", seed=0, miou=0.9242),
        dict(method="SSL_SS", k_labeled=4, subject_mode="multi", seed=0, miou=0.9254),
    ]
    out = Path("/tmp/eyessl-acceptance-report")
    render_report(summaries, out)
    table = (out / "report_table.txt").read_text()
    assert "88.28" in table and "92.42" in table and "92.54" in table
    assert "4.83" in table
    _stamp(9, t0, 1, "report fixture reproduces the 4.83% improvement cell")


@pytest.mark.slow
def test_criterion_10_reproducible_runs(tmp_path):
    t0 = time.monotonic()
    from eyessl.cli import main

    args = ["train", "--method", "SSL_SS", "--k", "4", "--seed", "5",
            "--set", "model=desk", "--set", "epochs=4",
            "--set", "synth_train=20", "--set", "synth_val=8",
            "--set", "synth_subjects=5", "--set", "eval_batch=8",
            "--set", "deterministic=true", "--set", "shift_max=6"]
    for sub in ("a", "b"):
        assert main(args + ["--out", str(tmp_path / sub)]) == 0
    hist = []
    for sub in ("a", "b"):
        (run_dir,) = [d for d in (tmp_path / sub).iterdir() if d.is_dir()]
        hist.append((run_dir / "history.jsonl").read_bytes())
    assert hist[0] == hist[1]
    records = [json.loads(l) for l in hist[0].decode().splitlines()]
    assert len(records) == 4
    assert all(math.isfinite(r["val_miou"]) for r in records)
    _stamp(10, t0, 1200, "identical seed and config give byte-identical histories")
