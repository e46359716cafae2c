"""Acceptance battery: eleven end-to-end checks, one test (and one
``pytest -v`` line) each.

Fast property checks come first; the slow end-to-end training checks sit at
the bottom.  ``test_c11`` trains nine small models to produce
``reports/ablation.json`` and is opt-in: set ``GEOMATTN_ABLATION=1`` to run
it.  Every oracle used here is written out independently in this file
(explicit loops over Python floats) rather than calling back into the
library code under test.
"""

import csv
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from geomattn import (
    AcmConfig,
    ArchConfig,
    AugmentConfig,
    FeatureTable,
    LossWeights,
    OptimConfig,
    ReidSample,
    RunningStats,
    SyntheticSpec,
    Tensor,
    ThreeBranchNet,
    TrainConfig,
    TripletBatch,
    amax,
    attention_mask,
    average_precision,
    batch_norm,
    box_sum2d,
    concat,
    conv2d,
    evaluate,
    evaluate_image_to_image,
    evaluate_image_to_track,
    expected_random_ap,
    extract_features,
    generate_synthetic_dataset,
    global_avg_pool,
    grad_check,
    hard_triplet_loss,
    l2_normalize,
    linear,
    load_checkpoint,
    lr_multistep,
    lr_warmup_cosine,
    overall_loss,
    rotate_image,
    rotation_loss,
    save_checkpoint,
    save_dataset,
    smoothed_ce,
    train,
)
from geomattn.data import all_rotation_samples
from geomattn.evaluation import filter_valid_gallery
from geomattn.layers import CosineClassifier
from geomattn.serialization import load_tensors

REPO_ROOT = Path(__file__).resolve().parent.parent

TOL_GRAD = 1e-4
MAX_KINK_SKIP_FRACTION = 0.05


def _unit(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _assert_low_skip(result) -> None:
    checked = result.n_checked
    skipped = result.n_skipped
    assert checked > 0
    assert skipped <= MAX_KINK_SKIP_FRACTION * (checked + skipped)


# --------------------------------------------------------------------------
# 1. gradient correctness over every primitive and the full composite loss
# --------------------------------------------------------------------------


def test_c01_gradcheck_primitives_and_composite():
    start = time.monotonic()
    rng = np.random.default_rng(0)
    results: dict[str, object] = {}

    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    c = Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
    results["arithmetic"] = grad_check(
        lambda: ((a + b) * (a - b) / c + 2.0 * a - 1.5).sum() + a.mean() * 3.0,
        [a, b, c],
    )
    results["pow"] = grad_check(lambda: ((a * 0.3) ** 3).sum() + (b ** 2).mean(), [a, b])

    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    bias = Tensor(rng.normal(size=2), requires_grad=True)
    mix = Tensor(rng.normal(size=(3, 2)))
    results["matmul"] = grad_check(lambda: ((x @ w) * mix).sum(), [x, w])
    results["linear"] = grad_check(lambda: (linear(x, w, bias) * mix).sum(), [x, w, bias])

    mix23 = Tensor(rng.normal(size=(2, 3)))
    results["getitem_reshape_transpose"] = grad_check(
        lambda: (x[1:, :3].reshape((3, 2)).T * mix23).sum(), [x]
    )

    p = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    q = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)
    mixp = Tensor(rng.normal(size=(4, 3)))
    results["exp_log_sqrt"] = grad_check(
        lambda: (p.exp() + q.log() + q.sqrt()).sum(), [p, q]
    )
    results["softplus"] = grad_check(lambda: (p.softplus() * mixp).sum(), [p])
    results["relu"] = grad_check(lambda: (p.relu() * mixp).sum(), [p], skip_kinks=True)
    results["clamp_min"] = grad_check(
        lambda: (p.clamp_min(-0.2) * mixp).sum(), [p], skip_kinks=True
    )

    u = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    v = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    mixcat = Tensor(rng.normal(size=(2, 6)))
    results["concat"] = grad_check(lambda: (concat([u, v], axis=1) * mixcat).sum(), [u, v])

    mixr = Tensor(rng.normal(size=(3,)))
    mixk = Tensor(rng.normal(size=(1, 4)))
    results["amax"] = grad_check(
        lambda: (amax(x, axis=1) * mixr).sum() + (amax(x, axis=0, keepdims=True) * mixk).sum(),
        [x],
        skip_kinks=True,
    )
    mixl2 = Tensor(rng.normal(size=(3, 4)))
    results["l2_normalize"] = grad_check(lambda: (l2_normalize(x) * mixl2).sum(), [x])

    xi = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    wi = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
    mixc = Tensor(rng.normal(size=(2, 4, 3, 3)))
    results["conv2d"] = grad_check(
        lambda: (conv2d(xi, wi, stride=2, pad=1) * mixc).sum(), [xi, wi]
    )
    mixg = Tensor(rng.normal(size=(2, 3)))
    results["global_avg_pool"] = grad_check(lambda: (global_avg_pool(xi) * mixg).sum(), [xi])

    xb = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    mixb = Tensor(rng.normal(size=(1, 2, 5, 5)))
    results["box_sum2d"] = grad_check(lambda: (box_sum2d(xb, 3) * mixb).sum(), [xb])

    xn = Tensor(rng.normal(size=(4, 3, 2, 2)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    beta = Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
    mixn = Tensor(rng.normal(size=(4, 3, 2, 2)))
    results["batch_norm"] = grad_check(
        lambda: (batch_norm(xn, gamma, beta, RunningStats(3), mode="train") * mixn).sum(),
        [xn, gamma, beta],
    )

    logits = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    cls = np.array([0, 1, 2, 3, 0, 1])
    results["smoothed_ce"] = grad_check(lambda: smoothed_ce(logits, cls), [logits])
    results["rotation_loss"] = grad_check(lambda: rotation_loss(logits, cls), [logits])

    feats = Tensor(rng.normal(size=(8, 5)), requires_grad=True)
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    results["triplet"] = grad_check(
        lambda: hard_triplet_loss(TripletBatch(feats, labels), 0.5), [feats], skip_kinks=True
    )

    lm = Tensor(rng.uniform(0.1, 2.0, size=(1, 3, 6, 6)), requires_grad=True)
    mixq = Tensor(rng.normal(size=(1, 6, 6)))
    results["attention_mask"] = grad_check(
        lambda: (attention_mask(lm, AcmConfig(K=3)).Q * mixq).sum(), [lm], skip_kinks=True
    )

    # full composite loss through all three branches on a 4-image 16x16 batch
    model = ThreeBranchNet(ArchConfig(num_identities=4, input_size=16), np.random.default_rng(1))
    imgs = Tensor(rng.uniform(size=(4, 3, 16, 16)))
    ids = np.array([0, 0, 1, 1])
    rots = np.array([0, 1, 2, 3])

    def composite():
        gb, shallow = model.global_branch_forward(imgs)
        ab, _ = model.attention_branch_forward(imgs, shallow)
        ssl = model.ssl_branch_forward(imgs)
        total, _ = overall_loss(gb, ab, ssl, ids, rots, LossWeights(), 0.5)
        return total

    results["composite_loss"] = grad_check(
        composite,
        list(model.parameters().values()),
        max_coords_per_param=4,
        rng=np.random.default_rng(2),
        skip_kinks=True,
    )

    for name, res in results.items():
        assert float(res) < TOL_GRAD, f"{name}: max rel err {float(res):.3e}"
        if res.n_skipped:
            _assert_low_skip(res)
    assert time.monotonic() - start < 60.0


# --------------------------------------------------------------------------
# 2-3. attention mask vs a naive loop oracle, plus its closed-form case
# --------------------------------------------------------------------------


def _naive_acm(L: np.ndarray, K: int):
    """Neighborhood softmax, channel peak normalization, masked max, and
    global normalization written as explicit loops over Python floats."""
    c, h, w = L.shape
    r = K // 2
    M = np.empty((c, h, w))
    for t in range(c):
        for iu in range(h):
            for iv in range(w):
                den = 0.0
                for du in range(-r, r + 1):
                    for dv in range(-r, r + 1):
                        ju, jv = iu + du, iv + dv
                        if 0 <= ju < h and 0 <= jv < w:
                            den += math.exp(float(L[t, ju, jv]))
                M[t, iu, iv] = math.exp(float(L[t, iu, iv])) / den
    G = np.empty((c, h, w))
    for iu in range(h):
        for iv in range(w):
            peak = max(float(L[t, iu, iv]) for t in range(c))
            for t in range(c):
                G[t, iu, iv] = float(L[t, iu, iv]) / peak
    Qt = np.empty((h, w))
    for iu in range(h):
        for iv in range(w):
            Qt[iu, iv] = max(M[t, iu, iv] * G[t, iu, iv] for t in range(c))
    return M, G, Qt / Qt.sum()


def test_c02_attention_mask_matches_naive_oracle():
    rng = np.random.default_rng(42)
    for _ in range(100):
        c = int(rng.integers(1, 9))
        h = int(rng.integers(2, 11))
        w = int(rng.integers(2, 11))
        K = int(rng.choice([1, 3, 5]))
        L = rng.uniform(0.05, 4.0, size=(c, h, w))
        got = attention_mask(Tensor(L), AcmConfig(K=K), keep_intermediates=True)
        M, G, Q = _naive_acm(L, K)
        assert np.max(np.abs(got.M.data - M)) <= 1e-12
        assert np.max(np.abs(got.G.data - G)) <= 1e-12
        assert np.max(np.abs(got.Q.data - Q)) <= 1e-12
        assert abs(float(got.Q.data.sum()) - 1.0) <= 1e-10
        assert np.all(np.max(got.G.data, axis=0) == 1.0)


def test_c03_attention_mask_closed_form():
    want = np.array(
        [
            [9 / 64, 3 / 32, 9 / 64],
            [3 / 32, 1 / 16, 3 / 32],
            [9 / 64, 3 / 32, 9 / 64],
        ]
    )
    for const in (0.7, 1.0, 2.0):
        q = attention_mask(Tensor(np.full((1, 3, 3), const)), AcmConfig(K=3)).Q.data
        assert np.max(np.abs(q - want)) <= 1e-12
        assert abs(float(q.sum()) - 1.0) <= 1e-12


# --------------------------------------------------------------------------
# 4. batch-hard triplet loss vs brute-force enumeration
# --------------------------------------------------------------------------


def _naive_batch_hard(feats: np.ndarray, ids: np.ndarray, tau: float) -> float:
    n, d = feats.shape

    def dist(i: int, j: int) -> float:
        return math.sqrt(sum((float(feats[i, k]) - float(feats[j, k])) ** 2 for k in range(d)))

    total = 0.0
    for i in range(n):
        pos = [dist(i, j) for j in range(n) if j != i and ids[j] == ids[i]]
        neg = [dist(i, j) for j in range(n) if ids[j] != ids[i]]
        total += max(0.0, tau + max(pos) - min(neg))
    return total / n


def test_c04_triplet_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(200):
        num_ids = int(rng.integers(2, 9))
        n = int(rng.integers(2 * num_ids, 33))
        d = int(rng.integers(2, 17))
        ids = np.arange(n) % num_ids
        rng.shuffle(ids)
        feats = rng.normal(size=(n, d))
        tau = float(rng.uniform(0.1, 1.0))
        got = hard_triplet_loss(TripletBatch(Tensor(feats), ids), tau).item()
        assert abs(got - _naive_batch_hard(feats, ids, tau)) <= 1e-12

    # hand case: every anchor hinge is inactive, e.g. [0.5 + 1 - 5]+ = 0
    feats = Tensor(np.array([[0.0], [1.0], [5.0], [6.0]]))
    ids = np.array([0, 0, 1, 1])
    assert hard_triplet_loss(TripletBatch(feats, ids), 0.5).item() == 0.0

    # hand case: exactly one active anchor with hinge [0.5 + 2 - 1.5]+ = 1.0,
    # so five anchors average to 0.2
    feats = Tensor(np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [1.5, 0.0], [1.5, 0.0]]))
    ids = np.array([0, 0, 0, 1, 1])
    loss = hard_triplet_loss(TripletBatch(feats, ids), 0.5).item()
    assert abs(loss * 5 - 1.0) <= 1e-12


# --------------------------------------------------------------------------
# 5. retrieval metric oracles
# --------------------------------------------------------------------------


def _naive_ap(rel: np.ndarray) -> float:
    hits = 0
    total = 0.0
    for k, r in enumerate(rel):
        if r:
            hits += 1
            total += hits / (k + 1.0)
    return total / hits


def test_c05_retrieval_metric_oracles():
    rng = np.random.default_rng(11)
    for _ in range(500):
        n = int(rng.integers(1, 41))
        rel = rng.random(n) < rng.uniform(0.05, 0.9)
        if rel.any():
            assert abs(average_precision(rel) - _naive_ap(rel)) <= 1e-12
        else:
            assert math.isnan(average_precision(rel))

    # ranked relevance [1, 0, 1]: AP = (1/1 + 2/3) / 2 = 5/6
    assert abs(average_precision(np.array([True, False, True])) - 5.0 / 6.0) <= 1e-12

    # track retrieval with singleton tracks must coincide with image retrieval
    for _ in range(50):
        nq = int(rng.integers(2, 7))
        qt = FeatureTable(_unit(rng.normal(size=(nq, 8))), np.arange(nq), np.zeros(nq, dtype=int))
        gids = np.repeat(np.arange(nq), 2)
        gcams = np.tile([1, 2], nq)
        gt = FeatureTable(
            _unit(rng.normal(size=(2 * nq, 8))), gids, gcams, tracks=np.arange(2 * nq)
        )
        im = evaluate_image_to_image(qt, gt)
        tr = evaluate_image_to_track(qt, gt)
        assert abs(im.imap - tr.tmap) <= 1e-12


# --------------------------------------------------------------------------
# 6. rotation pipeline exactness
# --------------------------------------------------------------------------


def test_c06_rotation_pipeline_exactness():
    rng = np.random.default_rng(5)
    for _ in range(100):
        side = int(rng.integers(2, 13))
        img = Tensor(rng.random((3, side, side)))
        r1 = rotate_image(img, 1)
        # an exact permutation preserves the multiset of pixel values
        assert sorted(img.data.ravel().tolist()) == sorted(r1.data.ravel().tolist())
        out = img
        for _k in range(4):
            out = rotate_image(out, 1)
        assert np.array_equal(out.data, img.data)
        assert np.array_equal(rotate_image(img, 2).data, rotate_image(r1, 1).data)
        assert np.array_equal(rotate_image(img, 0).data, img.data)

    # pseudo-label k belongs to the k * 90 degree rotation
    img = Tensor(np.random.default_rng(9).random((3, 12, 12)))
    rots = all_rotation_samples(ReidSample(image=img, identity=0, camera=0))
    assert [r.pseudo_label for r in rots] == [0, 1, 2, 3]
    for k, r in enumerate(rots):
        assert np.array_equal(r.image_rot.data, rotate_image(img, k).data)


# --------------------------------------------------------------------------
# 7. neck / classifier structural contract
# --------------------------------------------------------------------------


def test_c07_neck_and_classifier_structure(tmp_path):
    model = ThreeBranchNet(ArchConfig(num_identities=6, input_size=32), np.random.default_rng(0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    records = load_tensors(path)

    for neck in ("neck_gb", "neck_ab"):
        assert f"{neck}/bn/gamma" in records
        assert f"{neck}/bn/beta" not in records  # scale only, no shift
        assert f"{neck}/fc/weight" in records
        assert f"{neck}/fc/bias" not in records  # bias-free identity classifier
    assert "rot_classifier/weight" in records
    assert "rot_classifier/bias" not in records  # bias-free cosine classifier

    learnable = set(model.parameters())
    for neck in ("neck_gb", "neck_ab"):
        assert {k for k in learnable if k.startswith(neck + "/")} == {
            f"{neck}/bn/gamma",
            f"{neck}/fc/weight",
        }
    assert {k for k in learnable if k.startswith("rot_classifier/")} == {"rot_classifier/weight"}

    # cosine logits depend only on the feature direction
    clf = CosineClassifier(16, 5, 16.0, np.random.default_rng(3))
    feats = np.random.default_rng(4).normal(size=(8, 16))
    base = clf(Tensor(feats)).data
    for alpha in (0.1, 10.0):
        scaled = clf(Tensor(alpha * feats)).data
        assert np.max(np.abs(scaled - base)) <= 1e-10


# --------------------------------------------------------------------------
# 8. learning-rate schedules, exact values
# --------------------------------------------------------------------------


def test_c08_lr_schedules_exact():
    ms = OptimConfig(lr0=1e-4, schedule="multistep", milestones=(20, 40, 60), epochs=80)
    for epoch, want in ((0, 1e-4), (20, 1e-5), (40, 1e-6), (60, 1e-7)):
        assert abs(lr_multistep(epoch, ms) - want) <= 1e-12 * want

    wc = OptimConfig(
        lr0=1e-4,
        schedule="warmup_cosine",
        epochs=120,
        warmup_epochs=10,
        cosine_end_epoch=100,
        lr_floor=1e-7,
    )
    assert abs(lr_warmup_cosine(5, wc) - 0.5e-4) <= 1e-12 * 0.5e-4
    assert abs(lr_warmup_cosine(100, wc) - 1e-7) <= 1e-12 * 1e-7
    assert lr_warmup_cosine(120, wc) == 0.0


# --------------------------------------------------------------------------
# 9. bitwise training determinism through the command line
# --------------------------------------------------------------------------


def _run_cli(args, cwd, env=None):
    merged = {**os.environ}
    merged.pop("GEOMATTN_SEED", None)
    if env:
        merged.update(env)
    return subprocess.run(
        [sys.executable, "-m", "geomattn.cli", *args],
        capture_output=True,
        text=True,
        cwd=cwd,
        env=merged,
    )


def test_c09_cli_training_determinism(tmp_path):
    start = time.monotonic()
    outs = []
    for name in ("run_a", "run_b"):
        out = tmp_path / name
        proc = _run_cli(
            ["train", "--synthetic", "--ids", "20", "--epochs", "5", "--seed", "7",
             "--out", str(out)],
            cwd=tmp_path,
        )
        assert proc.returncode == 0, proc.stderr
        outs.append(out)
    a, b = outs
    # config.echo is excluded: it records the (differing) output directory
    for fname in ("model.ckpt", "train.log.jsonl"):
        assert (a / fname).read_bytes() == (b / fname).read_bytes(), fname
    assert time.monotonic() - start < 600.0


# --------------------------------------------------------------------------
# 10. desk-scale learning smoke test
# --------------------------------------------------------------------------


def test_c10_desk_scale_learning_smoke(tmp_path):
    start = time.monotonic()
    out = tmp_path / "smoke"
    proc = _run_cli(
        ["train", "--synthetic", "--seed", "3", "--epochs", "30", "--out", str(out)],
        cwd=tmp_path,
    )
    assert proc.returncode == 0, proc.stderr

    # (a) the total loss falls below half its first-epoch mean
    by_epoch: dict[int, list[float]] = {}
    for line in (out / "train.log.jsonl").read_text().splitlines():
        rec = json.loads(line)
        by_epoch.setdefault(int(rec["epoch"]), []).append(float(rec["total"]))
    first = float(np.mean(by_epoch[min(by_epoch)]))
    last = float(np.mean(by_epoch[max(by_epoch)]))
    assert last < 0.5 * first, f"loss ratio {last / first:.3f}"

    model = load_checkpoint(out / "model.ckpt")
    _, query, gallery = generate_synthetic_dataset(SyntheticSpec(rng_seed=3))

    # (b) rotation prediction on held-out images, all four rotations each
    correct = 0
    total = 0
    buf_imgs: list[np.ndarray] = []
    buf_labels: list[int] = []

    def flush():
        nonlocal correct, total
        if not buf_imgs:
            return
        logits = model.ssl_branch_forward(Tensor(np.stack(buf_imgs)), mode="eval").data
        correct_here = (logits.argmax(axis=1) == np.array(buf_labels)).sum()
        correct += int(correct_here)
        total += len(buf_labels)
        buf_imgs.clear()
        buf_labels.clear()

    for s in query.samples + gallery.samples:
        for r in all_rotation_samples(s):
            buf_imgs.append(r.image_rot.data)
            buf_labels.append(r.pseudo_label)
            if len(buf_imgs) == 32:
                flush()
    flush()
    rot_acc = correct / total
    assert rot_acc >= 0.90, f"rotation accuracy {rot_acc:.4f}"

    # (c) retrieval beats chance: Top-1 and imAP vs the random-ranking expectation
    report = evaluate(model, query, gallery)
    assert report.cmc[0] >= 0.80, f"Top-1 {report.cmc[0]:.4f}"

    qt = extract_features(model, query)
    gt = extract_features(model, gallery)
    valid = filter_valid_gallery(qt, gt)
    expectations = []
    for i in range(valid.shape[0]):
        n_valid = int(valid[i].sum())
        n_rel = int((valid[i] & (gt.ids == qt.ids[i])).sum())
        if n_rel > 0:
            expectations.append(expected_random_ap(n_valid, n_rel))
    random_imap = float(np.mean(expectations))
    assert report.imap > random_imap, f"imAP {report.imap:.4f} vs random {random_imap:.4f}"
    assert time.monotonic() - start < 1200.0


# --------------------------------------------------------------------------
# 11. branch ablation report (opt-in; the trend is reported, not gated)
# --------------------------------------------------------------------------


@pytest.mark.skipif(
    os.environ.get("GEOMATTN_ABLATION") != "1",
    reason="set GEOMATTN_ABLATION=1 to run the nine-run ablation",
)
def test_c11_ablation_trend_report(tmp_path):
    # a small per-identity image budget keeps the full model away from the
    # score ceiling so the branch contributions stay visible
    spec = SyntheticSpec(
        num_identities=20,
        images_per_identity=8,
        image_size=64,
        rng_seed=3,
        held_out_identities=12,
    )
    train_set, query, gallery = generate_synthetic_dataset(spec)
    arch = ArchConfig(num_identities=spec.num_identities, input_size=spec.image_size)
    epochs = 12
    seeds = (0, 1, 2)
    weight_sets = {
        "gb": LossWeights(0.5, 0.5, 0.0, 0.0, 0.0),
        "gb_ab": LossWeights(0.5, 0.5, 0.5, 0.5, 0.0),
        "gb_ab_sb": LossWeights(),
    }

    data_dir = tmp_path / "data"
    save_dataset(data_dir, train_set, query, gallery)
    with open(data_dir / "query.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    image_paths = [str(data_dir / r["path"]) for r in rows[:8]]

    imaps: dict[str, list[float]] = {name: [] for name in weight_sets}
    consistency: dict[str, list[float]] = {"gb_ab": [], "gb_ab_sb": []}
    for name, weights in weight_sets.items():
        for seed in seeds:
            model = ThreeBranchNet(arch, np.random.default_rng(seed))
            cfg = TrainConfig(
                P=4,
                K=4,
                tau=0.5,
                smoothing_eps=0.1,
                weights=weights,
                optim=OptimConfig(
                    lr0=1e-3, schedule="multistep", epochs=epochs, milestones=(8, 11)
                ),
                augment=AugmentConfig(),
                seed=seed,
            )
            train(model, train_set, cfg)
            imaps[name].append(evaluate(model, query, gallery).imap)
            if name in consistency:
                ckpt = tmp_path / f"{name}_{seed}.ckpt"
                save_checkpoint(ckpt, model)
                proc = _run_cli(
                    ["visualize-attention", "--checkpoint", str(ckpt),
                     "--out", str(tmp_path / f"vis_{name}_{seed}"), *image_paths],
                    cwd=tmp_path,
                )
                assert proc.returncode == 0, proc.stderr
                consistency[name].append(float(json.loads(proc.stdout)["rotation_consistency"]))

    means = {name: float(np.mean(vals)) for name, vals in imaps.items()}
    cons_means = {name: float(np.mean(vals)) for name, vals in consistency.items()}
    report = {
        "regime": {
            "num_identities": spec.num_identities,
            "images_per_identity": spec.images_per_identity,
            "image_size": spec.image_size,
            "held_out_identities": spec.held_out_identities,
            "data_seed": spec.rng_seed,
            "epochs": epochs,
            "lr0": 1e-3,
            "milestones": [8, 11],
            "P": 4,
            "K": 4,
            "seeds": list(seeds),
        },
        "imap": {
            name: {"per_seed": vals, "mean": means[name]} for name, vals in imaps.items()
        },
        "ordering": {
            "gb_lt_gb_ab": means["gb"] < means["gb_ab"],
            "gb_ab_le_gb_ab_sb": means["gb_ab"] <= means["gb_ab_sb"],
        },
        "rotation_consistency": {
            name: {"per_seed": vals, "mean": cons_means[name]}
            for name, vals in consistency.items()
        },
        "sb_consistency_higher": cons_means["gb_ab_sb"] > cons_means["gb_ab"],
    }
    reports_dir = REPO_ROOT / "reports"
    reports_dir.mkdir(exist_ok=True)
    (reports_dir / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    # structural validity only: scores exist and are in range
    for mean in means.values():
        assert math.isfinite(mean) and 0.0 <= mean <= 1.0
    for mean in cons_means.values():
        assert math.isfinite(mean) and -1.0 <= mean <= 1.0
