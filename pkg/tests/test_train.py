import numpy as np
import pytest

from jointface.checks import tiny_model_config
from jointface.checkpoint import load_checkpoint
from jointface.config import RunConfig
from jointface.dataset import Dataset, build_dataset
from jointface.errors import DatasetMissing, DivergedLoss
from jointface.model import JointModel
from jointface.synth import GenConfig, LANDMARKS_LOCAL, generate_scene
from jointface.train import (LOG_COLUMNS, _association, crop_aligned, crop_box, evaluate_joint, finetune,
                             run_baseline, similarity_from_landmarks, train, write_reports)


def _cfg(path, **kw):
    base = dict(data=str(path), iterations=6, decay_iters=(3,), images_per_batch=2,
                model=tiny_model_config(num_attributes=8, dtype="float32"))
    base.update(kw)
    return RunConfig(**base)


def test_zero_iterations_keeps_init(small_dataset, tmp_path):
    cfg = _cfg(small_dataset, iterations=0, decay_iters=())
    res = train(cfg, tmp_path)
    init = JointModel(cfg.model, seed=cfg.seed)
    for k, v in init.parameters().items():
        assert np.array_equal(res.model.parameters()[k].data, v.data)
    assert (tmp_path / "train_log.csv").read_text().strip() == ",".join(LOG_COLUMNS)


def test_training_is_deterministic(small_dataset, tmp_path):
    a = train(_cfg(small_dataset), tmp_path / "a")
    b = train(_cfg(small_dataset), tmp_path / "b")
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    assert a.log == b.log and len(a.log) == 6 and a.log[-1][-1] == pytest.approx(0.001)   # decayed once
    c = train(_cfg(small_dataset, seed=8))
    assert c.log[0][6] != a.log[0][6]


def test_diverged_loss(small_dataset):
    with pytest.raises(DivergedLoss), np.errstate(all="ignore"):
        train(_cfg(small_dataset, base_lr=1e8, iterations=30, decay_iters=()))


def test_missing_dataset(tmp_path):
    with pytest.raises(DatasetMissing):
        train(_cfg(tmp_path / "nothing"))


def test_finetune_changes_attribute_count(small_dataset, tmp_path):
    base = train(_cfg(small_dataset), tmp_path / "base")
    other = tmp_path / "four"
    build_dataset(other, 2, 20, GenConfig(attributes=("hat", "smiling", "mustache", "earrings"), style="fill"))
    res = finetune(base.checkpoint, _cfg(other, iterations=3, decay_iters=()), tmp_path / "ft")
    ck = load_checkpoint(res.checkpoint)
    assert ck.model_config.num_attributes == 4
    assert res.state.base_lr == pytest.approx(RunConfig().base_lr * 0.1)
    base_conv = load_checkpoint(base.checkpoint).params["backbone.conv1.weight"]
    assert base_conv.shape == ck.params["backbone.conv1.weight"].shape


def test_eval_reports(small_dataset, tmp_path):
    res = train(_cfg(small_dataset))
    ds = Dataset(small_dataset)
    ev = evaluate_joint(res.model, ds.split("test"), ds.attribute_names)
    assert ev.report.count == sum(len(r.faces) for r in ds.split("test"))
    files = write_reports({"joint": ev}, tmp_path)
    assert {"metrics.csv", "attributes.csv", "attributes.txt", "pr_joint.csv", "pr_joint.svg"} <= set(files)


@pytest.mark.parametrize("mode", ["cropped-baseline", "aligned-baseline"])
def test_baseline_runs(small_dataset, tmp_path, mode):
    res = run_baseline(_cfg(small_dataset, mode=mode), tmp_path)
    assert 0.0 <= res.eval.report.mean_error <= 1.0
    assert (tmp_path / "model.ckpt").exists()


def test_association_rule():
    from jointface.boxes import BBox
    from jointface.model import Detection
    z = np.zeros(2)
    dets = [Detection(BBox(0, 0, 10, 10), 0.5, z, z), Detection(BBox(1, 0, 11, 10), 0.9, z, z),
            Detection(BBox(30, 30, 40, 40), 0.99, z, z)]
    got = _association(dets, [[0, 0, 10, 10], [28, 28, 40, 40], [50, 50, 60, 60]], 0.5)
    assert got[0] is dets[1] and got[1] is dets[2] and got[2] is None
    assert _association([], [[0, 0, 1, 1]], 0.5) == [None]


def test_crops():
    rec = generate_scene(6, GenConfig(faces_min=1, max_rotation_deg=0.0, noise_std=0.0))
    f = rec.faces[0]
    c = crop_box(rec.image, f.box, 32)
    assert c.shape == (1, 32, 32)
    a, b, tx, ty = similarity_from_landmarks(f.landmarks)
    assert np.allclose(np.c_[a * LANDMARKS_LOCAL[:, 0] - b * LANDMARKS_LOCAL[:, 1] + tx,
                             b * LANDMARKS_LOCAL[:, 0] + a * LANDMARKS_LOCAL[:, 1] + ty], f.landmarks)
    # with zero rotation the aligned crop frames the same square as the box crop
    assert np.abs(crop_aligned(rec.image, f.landmarks, 32) - c).mean() < 0.02


def test_finetune_zero_iterations_equals_base(small_dataset, tmp_path):
    base = train(_cfg(small_dataset), tmp_path / "base")
    res = finetune(base.checkpoint, _cfg(small_dataset, iterations=0, decay_iters=()))
    for k, v in base.model.parameters().items():
        assert np.array_equal(res.model.parameters()[k].data, v.data)


def test_logged_lr_is_closed_form(small_dataset):
    cfg = _cfg(small_dataset, iterations=7, decay_iters=(2, 5), base_lr=0.02)
    res = train(cfg)
    expected = [0.02 * 0.1 ** sum(d <= t for d in (2, 5)) for t in range(7)]
    assert [row[-1] for row in res.log] == expected
