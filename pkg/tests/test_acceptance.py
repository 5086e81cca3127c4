"""Acceptance criteria, each at its stated tolerance.

Every test prints one PASS/FAIL line (also collected in the terminal summary).
Criteria 5-7 train the toy models end to end and take several minutes; run
``pytest -m "not slow"`` to skip them.
"""

import itertools
import time

import numpy as np
import pytest

from conftest import record_acceptance
from oracles import box_iou, greedy_match, greedy_nms, pr_auc, random_boxes
from oracles import roi_pool as oracle_roi_pool

from jointface.checks import LAYER_CHECKS, composite_objective, run_suite, tiny_model_config, tiny_scene
from jointface.checkpoint import load_checkpoint, save_checkpoint
from jointface.config import RunConfig
from jointface.dataset import Dataset, build_dataset
from jointface.metrics import Match, MatchResult, match_detections, pr_curve
from jointface.model import JointModel, threshold_attributes
from jointface.proposal import nms
from jointface.roi_pool import RoIGrid, quantize_rois, roi_pool_forward
from jointface.boxes import iou_matrix
from jointface.synth import GenConfig, generate_scene, hflip_record
from jointface.tensor import backward
from jointface.train import evaluate_joint, finetune, run_baseline, train, write_reports

REF_SEED, REF_COUNT = 7, 2500             # 2000 train / 250 val / 250 test
FT_SEED, FT_COUNT, FT_ITERS = 11, 500, 600
# pinned from the first verified reference run, valid for this dataset hash
REF_CONFIG_HASH = GenConfig().hash()
PINNED = {"max_mean_error": 0.15, "min_pr_auc": 0.90, "joint_margin": 0.01, "loss_ratio": 0.25}


# ---------------------------------------------------------------------------
# 1. gradient suite

def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for name, seed, rep in run_suite(range(10), tol=1e-4):
        worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-4 for v in worst.values()) and elapsed < 120 and set(worst) == set(LAYER_CHECKS)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_acceptance("1", ok, f"gradcheck 10 seeds, max rel err [{detail}] in {elapsed:.0f}s (tol 1e-4, <120s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. oracle equivalence

def _roi_instances(rng, n):
    for _ in range(n):
        c, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        scale = float(rng.choice([1.0, 0.5, 0.25]))
        x1, y1 = rng.uniform(-2, w / scale - 0.5), rng.uniform(-2, h / scale - 0.5)
        roi = [x1, y1, max(x1, 0.0) + rng.uniform(0.2, 3 * w / scale), max(y1, 0.0) + rng.uniform(0.2, 3 * h / scale)]
        yield rng.standard_normal((1, c, h, w)), roi, scale, int(rng.integers(1, 5)), int(rng.integers(1, 5))


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    n = 1000
    bad = {"roi_pool": 0, "nms": 0, "iou": 0, "match": 0, "pr_auc": 0}
    for f, roi, scale, gh, gw in _roi_instances(rng, n):
        out, _ = roi_pool_forward(f, [roi], RoIGrid(gh, gw, scale))
        cells = quantize_rois([roi], scale, f.shape[2], f.shape[3])
        bad["roi_pool"] += not np.array_equal(out.data, oracle_roi_pool(f[0], cells, gh, gw))
    for _ in range(n):
        k = int(rng.integers(0, 51))
        boxes, scores = random_boxes(rng, k, 30), np.round(rng.random(k), 2)
        t = float(rng.uniform(0, 1))
        bad["nms"] += nms(boxes, scores, t).tolist() != greedy_nms(boxes, scores, t)
    for _ in range(n):
        a, b = random_boxes(rng, 4, 30), random_boxes(rng, 3, 30)
        ref = np.array([[box_iou(x, y) for y in b] for x in a])
        bad["iou"] += not np.all(np.abs(iou_matrix(a, b) - ref) <= 1e-9)
    for _ in range(n):
        p, g = random_boxes(rng, int(rng.integers(0, 8)), 30), random_boxes(rng, int(rng.integers(0, 6)), 30)
        s = np.round(rng.random(len(p)), 1)
        r = match_detections((p, s), g, 0.5)
        bad["match"] += [(m.index, m.tp) for m in r.matches] != greedy_match(p, s, g, 0.5)
    for _ in range(n):
        k = int(rng.integers(1, 12))
        flags = (rng.random(k) < 0.6).tolist()
        scores = np.round(rng.random(k), 1).tolist()
        n_gt = max(1, sum(flags) + int(rng.integers(0, 3)))
        res = MatchResult([Match(i, sc, fl) for i, (sc, fl) in enumerate(zip(scores, flags))], n_gt, 0)
        bad["pr_auc"] += abs(pr_curve(res).auc - pr_auc(scores, flags, n_gt)) > 1e-9
    elapsed = time.perf_counter() - t0
    ok = not any(bad.values()) and elapsed < 120
    record_acceptance("2", ok, f"{n} random instances each, mismatches {bad} in {elapsed:.0f}s (<120s)")
    assert ok


# ---------------------------------------------------------------------------
# 3. loss composition and lambda_3 scaling

def test_criterion_3_loss_composition():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        model = JointModel(tiny_model_config(), seed=seed)
        for p in model.parameters().values():
            p.data += rng.normal(0, 0.05, p.shape)
        image, gt, attrs = tiny_scene(seed)
        lb = model.forward_train(image, gt, attrs, rng)
        resum = 1.0 * lb.attr + 1.0 * lb.score + 2.0 * lb.bbox + lb.rpn_score + lb.rpn_bbox
        worst = max(worst, abs(lb.total - resum))
    grads = {}
    for lam in (1.0, 2.0, 4.0):
        model = JointModel(tiny_model_config(lambda_bbox=lam), seed=0)
        image, gt, attrs = tiny_scene(0)
        backward(composite_objective(model, image, gt, attrs, 0).total_tensor)
        grads[lam] = model.W_b.grad.copy()
    nz = np.abs(grads[1.0]) > 1e-12
    ratio_err = max(np.max(np.abs(grads[lam][nz] / grads[1.0][nz] - lam)) for lam in (2.0, 4.0))
    ok = worst <= 1e-12 and ratio_err < 1e-9 and nz.any()
    record_acceptance("3", ok, f"|total - (L_a + L_s + 2 L_b + rpn)| max {worst:.1e} over 100 states (<=1e-12); "
                               f"dW_b ratio error {ratio_err:.1e} at lambda3 in {{1,2,4}} (<1e-9)")
    assert ok


# ---------------------------------------------------------------------------
# 4. thresholding rule

def test_criterion_4_threshold_grid():
    grid = np.r_[np.linspace(-3, 3, 121), -1e-12, 1e-12]
    wrong = 0
    for psi, tau in itertools.product(grid, grid):
        wrong += threshold_attributes([psi], tau)[0] != (1 if psi > tau else -1)
    boundary = all(threshold_attributes([t], t)[0] == -1 for t in grid)
    ok = wrong == 0 and boundary
    record_acceptance("4", ok, f"{len(grid) ** 2} (psi, tau) pairs, {wrong} wrong; psi == tau -> -1: {boundary}")
    assert ok


# ---------------------------------------------------------------------------
# 5-7. toy end to end

def _reference_run(data, run_dir):
    cfg = RunConfig(data=str(data))
    ds = Dataset(data)
    t0 = time.perf_counter()
    joint = train(cfg, run_dir / "joint", dataset=ds)
    joint_eval = evaluate_joint(joint.model, ds.split(cfg.eval_split), ds.attribute_names, cfg.eval_iou)
    cropped = run_baseline(cfg.with_updates(mode="cropped-baseline"), run_dir / "cropped", dataset=ds)
    elapsed = time.perf_counter() - t0
    write_reports({"joint": joint_eval, "cropped": cropped.eval}, run_dir / "reports")
    return {"config": cfg, "dataset": ds, "joint": joint, "joint_eval": joint_eval, "cropped": cropped.eval,
            "elapsed": elapsed, "metrics": (run_dir / "reports" / "metrics.csv").read_bytes()}


@pytest.fixture(scope="module")
def reference_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("reference") / "data"
    build_dataset(path, REF_SEED, REF_COUNT)
    return path


@pytest.fixture(scope="module")
def reference(reference_data, tmp_path_factory):
    return _reference_run(reference_data, tmp_path_factory.mktemp("run_a"))


@pytest.mark.slow
def test_criterion_5_toy_end_to_end(reference):
    ds = reference["dataset"]
    counts = {s: len(ds.split(s)) for s in ("train", "test")}
    assert counts == {"train": 2000, "test": 250} and ds.config_hash == REF_CONFIG_HASH
    joint, cropped = reference["joint_eval"].report.mean_error, reference["cropped"].report.mean_error
    auc = reference["joint_eval"].curve.auc
    log = np.array(reference["joint"].log)
    loss_ratio = log[-10:, 6].mean() / log[:10, 6].mean()
    checks = {
        "a": joint <= PINNED["max_mean_error"],
        "b": auc >= PINNED["min_pr_auc"],
        "c": joint <= cropped + PINNED["joint_margin"],
        "runtime": reference["elapsed"] < 30 * 60,
        "loss": loss_ratio < PINNED["loss_ratio"],
    }
    for key, text in (("a", f"joint mean error {joint:.4f} (<= 0.15)"),
                      ("b", f"detection PR-AUC {auc:.4f} at IoU > 0.5 (>= 0.90)"),
                      ("c", f"joint {joint:.4f} vs cropped baseline {cropped:.4f} + 0.01"),
                      ("runtime", f"train + baseline {reference['elapsed'] / 60:.1f} min (< 30 min)"),
                      ("loss", f"final / first-10 total loss ratio {loss_ratio:.3f} (< 0.25)")):
        record_acceptance(f"5{key if len(key) == 1 else ' ' + key}", checks[key], text)
    assert all(checks.values()), checks


@pytest.mark.slow
def test_criterion_6_determinism(reference, reference_data, tmp_path):
    again = _reference_run(reference_data, tmp_path)
    ok = again["metrics"] == reference["metrics"]
    record_acceptance("6", ok, f"second identical-seed run metrics.csv byte-identical ({len(again['metrics'])} bytes)")
    assert ok


@pytest.mark.slow
def test_criterion_7_checkpoint_and_finetune(reference, tmp_path):
    model = reference["joint"].model
    path = save_checkpoint(tmp_path / "ref.ckpt", model, reference["joint"].state, reference["config"].hash(),
                           reference["joint"].state.iteration)
    loaded = load_checkpoint(path).build_model()
    same = 0
    for rec in reference["dataset"].records[:100]:
        a, b = model.predict(rec.image), loaded.predict(rec.image)
        same += [(d.box, d.score) for d in a] == [(d.box, d.score) for d in b] and all(
            np.array_equal(x.psi, y.psi) for x, y in zip(a, b))
    record_acceptance("7 bit-equality", same == 100, f"save -> load forward identical on {same}/100 images")

    data = tmp_path / "fill"
    build_dataset(data, FT_SEED, FT_COUNT, GenConfig(style="fill"))
    ds = Dataset(data)
    cfg = RunConfig(data=str(data), iterations=FT_ITERS, decay_iters=(400,))
    tuned = finetune(path, cfg, tmp_path / "ft", dataset=ds)
    scratch = train(cfg, tmp_path / "scratch", dataset=ds)
    e_ft = evaluate_joint(tuned.model, ds.split("test"), ds.attribute_names).report.mean_error
    e_sc = evaluate_joint(scratch.model, ds.split("test"), ds.attribute_names).report.mean_error
    record_acceptance("7 fine-tune", e_ft < e_sc,
                      f"fill-style set (seed 11, 500 images, {FT_ITERS} iterations): fine-tuned {e_ft:.4f} "
                      f"vs from scratch {e_sc:.4f}")
    assert same == 100 and e_ft < e_sc


SINGLE_FACE = GenConfig(faces_min=1, faces_max=1, clutter_density=0.0, max_rotation_deg=0.0)


@pytest.mark.slow
def test_trained_model_mirror_equivariance(reference):
    """Every glyph attribute is mirror-symmetric, so a flipped scene should give the flipped top box."""
    model = reference["joint"].model
    gaps = []
    for seed in range(20):
        rec = generate_scene(1000 + seed, SINGLE_FACE)
        a, b = model.predict(rec.image), model.predict(hflip_record(rec).image)
        mirrored = a[0].box.hflip(rec.image.shape[-1]).as_array()
        gaps.append(float(np.abs(mirrored - b[0].box.as_array()).max()))
    worst = max(gaps)
    record_acceptance("extra mirror", worst <= 1.0,
                      f"mirrored top detection within {worst:.2f}px (<= 1), median {np.median(gaps):.2f}px "
                      f"over 20 single-face scenes")
    assert worst <= 1.0


@pytest.mark.slow
def test_trained_model_conv5_peak(reference):
    model = reference["joint"].model
    s = model.cfg.feature_stride
    hits, n = 0, 20
    for seed in range(n):
        rec = generate_scene(1000 + seed, SINGLE_FACE)
        grid = model.export_feature_map(rec.image, "conv5")
        r, c = np.unravel_index(np.argmax(grid), grid.shape)
        box = rec.faces[0].box
        hits += box.x1 - s <= (c + 0.5) * s <= box.x2 + s and box.y1 - s <= (r + 0.5) * s <= box.y2 + s
    record_acceptance("extra conv5", hits == n, f"conv5 peak inside the face cell region on {hits}/{n} "
                                               f"single-face scenes")
    assert hits == n
