"""Training, fine-tuning, baselines and evaluation runs."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .boxes import iou_matrix
from .checkpoint import Checkpoint, load_checkpoint, load_parameters, save_checkpoint
from .config import RunConfig
from .dataset import Dataset
from .errors import DatasetMissing, DivergedLoss, ShapeIncompatible
from .metrics import (AttributeReport, PRCurve, attribute_csv, attribute_report,
                      format_attribute_table, match_detections, pr_csv, pr_curve, pr_svg)
from .model import AttributeNet, JointModel, average_breakdowns, threshold_attributes
from .optim import SGDState, sgd_step
from .synth import LANDMARKS_LOCAL, hflip_record
from .tensor import backward

LOG_COLUMNS = ("iteration", "L_a", "L_s", "L_b", "rpn_score", "rpn_bbox", "total", "lr")


@dataclass
class TrainResult:
    model: object
    state: SGDState
    log: list
    checkpoint: Path | None = None


@dataclass
class EvalResult:
    report: AttributeReport
    curve: PRCurve | None = None
    matches: list = field(default_factory=list)
    n_images: int = 0

    def metrics(self) -> dict:
        out = {"mean_error": self.report.mean_error, "faces": self.report.count, "images": self.n_images}
        out.update({f"error.{n}": float(e) for n, e in zip(self.report.names, self.report.per_attribute_error)})
        if self.curve is not None:
            out["pr_auc"] = self.curve.auc
            out["detections"] = sum(len(m.matches) for m in self.matches)
            out["true_positives"] = sum(m.tp for m in self.matches)
        return out


def open_dataset(path) -> Dataset:
    if not path or not Path(path).exists():
        raise DatasetMissing(f"dataset directory {path!r} does not exist")
    return Dataset(path)


def _rngs(seed: int):
    ss = np.random.SeedSequence([int(seed), 0x7A1])
    return tuple(np.random.default_rng(s) for s in ss.spawn(2))


def _sgd(config: RunConfig, lr_scale: float = 1.0) -> SGDState:
    return SGDState(base_lr=config.base_lr * lr_scale, decay_factor=config.decay_factor,
                    decay_iters=config.decay_iters, momentum=config.momentum,
                    weight_decay=config.weight_decay)


def _model_config(config: RunConfig, ds: Dataset):
    if config.model.num_attributes != ds.num_attributes:
        return replace(config.model, num_attributes=ds.num_attributes)
    return config.model


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[0], *(repr(float(v)) for v in r[1:])])


def _check_finite(total: float, it: int) -> None:
    if not math.isfinite(total):
        raise DivergedLoss(f"total loss became {total} at iteration {it}")


# ---------------------------------------------------------------------------
# joint model

def _train_joint(model: JointModel, records, config: RunConfig, state: SGDState, run_dir: Path | None,
                 sample_rng, loss_rng) -> list:
    params = model.parameters()
    model.train()
    log = []
    order = np.empty(0, dtype=np.int64)
    pos = 0
    for it in range(config.iterations):
        parts = []
        for _ in range(config.images_per_batch):
            if pos == len(order):
                order, pos = sample_rng.permutation(len(records)), 0
            rec = records[order[pos]]
            pos += 1
            if config.hflip and sample_rng.random() < 0.5:
                rec = hflip_record(rec)
            parts.append(model.forward_train(rec.image, rec.boxes, rec.attr_matrix, loss_rng))
        lb = average_breakdowns(parts)
        _check_finite(lb.total, it)
        backward(lb.total_tensor)
        lr = sgd_step(params, state)
        log.append((it, lb.attr, lb.score, lb.bbox, lb.rpn_score, lb.rpn_bbox, lb.total, lr))
        if run_dir is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(run_dir / f"checkpoint_{it + 1:06d}.ckpt", model, state, config.hash(), it + 1)
    return log


def train(config: RunConfig, run_dir=None, dataset: Dataset | None = None) -> TrainResult:
    """Train from scratch in ``config.mode`` and write the log and final checkpoint."""
    if config.mode != "joint":
        return run_baseline(config, run_dir, dataset).train
    ds = dataset or open_dataset(config.data)
    model = JointModel(_model_config(config, ds), seed=config.seed)
    state = _sgd(config)
    return _finish(model, state, ds, config, run_dir)


def _finish(model, state, ds, config, run_dir) -> TrainResult:
    run_dir = Path(run_dir) if run_dir is not None else None
    sample_rng, loss_rng = _rngs(config.seed)
    log = _train_joint(model, ds.split("train"), config, state, run_dir, sample_rng, loss_rng)
    ckpt = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        write_log(log, run_dir / "train_log.csv")
        ckpt = Path(config.checkpoint_out) if config.checkpoint_out else run_dir / "model.ckpt"
        save_checkpoint(ckpt, model, state, config.hash(), state.iteration)
    return TrainResult(model, state, log, ckpt)


def finetune(base: Checkpoint | str | Path, config: RunConfig, run_dir=None, dataset: Dataset | None = None) -> TrainResult:
    """Continue from ``base`` on a new dataset with a fresh counter and reduced learning rate.

    The attribute head is re-initialized when the attribute count differs.
    """
    ckpt = base if isinstance(base, Checkpoint) else load_checkpoint(base)
    if ckpt.kind != "joint":
        raise ShapeIncompatible(f"cannot fine-tune a joint model from a {ckpt.kind!r} checkpoint")
    ds = dataset or open_dataset(config.data)
    mcfg = replace(ckpt.model_config, num_attributes=ds.num_attributes)
    model = JointModel(mcfg, seed=config.seed)
    allow = ("attr_head.weight", "attr_head.bias") if mcfg.num_attributes != ckpt.model_config.num_attributes else ()
    load_parameters(model, ckpt.params, allow_missing=allow)
    state = _sgd(config, config.finetune_lr_scale)
    return _finish(model, state, ds, replace(config, model=mcfg), run_dir)


def _association(dets, gt_boxes, iou_thresh: float):
    """Pick one detection per gt face: best score among IoU > thresh, else highest IoU."""
    if not dets:
        return [None] * len(gt_boxes)
    db = np.array([d.box.as_array() for d in dets])
    ious = iou_matrix(db, np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4))
    scores = np.array([d.score for d in dets])
    out = []
    for j in range(ious.shape[1]):
        good = np.flatnonzero(ious[:, j] > iou_thresh)
        if good.size:
            out.append(dets[good[np.argmax(scores[good])]])
        elif ious[:, j].max() > 0:
            out.append(dets[int(np.argmax(ious[:, j]))])
        else:
            out.append(None)
    return out


def evaluate_joint(model: JointModel, records, names=None, iou_thresh: float = 0.5) -> EvalResult:
    matches, preds, labels = [], [], []
    m = model.cfg.num_attributes
    for rec in records:
        dets = model.predict(rec.image)
        gts = [f.box.as_array() for f in rec.faces]
        matches.append(match_detections([(d.box, d.score) for d in dets], gts, iou_thresh))
        for face, det in zip(rec.faces, _association(dets, gts, iou_thresh)):
            preds.append(det.attributes if det is not None else -np.ones(m, dtype=np.int64))
            labels.append(face.attrs)
    report = attribute_report(np.array(preds).reshape(-1, m), np.array(labels).reshape(-1, m), names)
    return EvalResult(report, pr_curve(matches), matches, len(records))


# ---------------------------------------------------------------------------
# attribute-only baselines

def _sample_square(image2d, grid_x, grid_y):
    # pixel k covers [k, k+1), so its center sits at k + 0.5
    return map_coordinates(image2d, [grid_y - 0.5, grid_x - 0.5], order=1, mode="nearest")


def crop_box(image, box, size: int) -> np.ndarray:
    """Resample the axis-aligned ``box`` to a ``size x size`` crop."""
    img = np.asarray(image, dtype=np.float64)
    img = img[0] if img.ndim == 3 else img
    t = (np.arange(size) + 0.5) / size
    gx = box.x1 + t[None, :] * box.width
    gy = box.y1 + t[:, None] * box.height
    gx, gy = np.broadcast_arrays(gx, gy)
    return _sample_square(img, gx, gy)[None]


def similarity_from_landmarks(landmarks):
    """Least-squares ``(a, b, tx, ty)`` with ``x = a*u - b*v + tx``, ``y = b*u + a*v + ty``
    mapping the canonical local landmarks onto ``landmarks``."""
    uv = LANDMARKS_LOCAL
    xy = np.asarray(landmarks, dtype=np.float64)
    n = len(uv)
    A = np.zeros((2 * n, 4))
    A[0::2] = np.c_[uv[:, 0], -uv[:, 1], np.ones(n), np.zeros(n)]
    A[1::2] = np.c_[uv[:, 1], uv[:, 0], np.zeros(n), np.ones(n)]
    sol, *_ = np.linalg.lstsq(A, xy.reshape(-1), rcond=None)
    return sol


def crop_aligned(image, landmarks, size: int) -> np.ndarray:
    """Warp the face into the canonical frame (unit square of the local glyph frame)."""
    img = np.asarray(image, dtype=np.float64)
    img = img[0] if img.ndim == 3 else img
    a, b, tx, ty = similarity_from_landmarks(landmarks)
    t = (np.arange(size) + 0.5) / size - 0.5
    u, v = np.meshgrid(t, t)
    return _sample_square(img, a * u - b * v + tx, b * u + a * v + ty)[None]


def face_crops(records, mode: str, size: int):
    crops, attrs = [], []
    for rec in records:
        for f in rec.faces:
            crops.append(crop_aligned(rec.image, f.landmarks, size) if mode == "aligned-baseline"
                         else crop_box(rec.image, f.box, size))
            attrs.append(f.attrs)
    m = len(attrs[0]) if attrs else 0
    return np.asarray(crops, dtype=np.float32).reshape(-1, 1, size, size), np.asarray(attrs, dtype=np.float64).reshape(-1, m)


@dataclass
class BaselineResult:
    train: TrainResult
    eval: EvalResult | None


def run_baseline(config: RunConfig, run_dir=None, dataset: Dataset | None = None, evaluate: bool = True) -> BaselineResult:
    """Train and evaluate the attribute-only network on ground-truth face crops."""
    mode = config.mode if config.mode != "joint" else "cropped-baseline"
    ds = dataset or open_dataset(config.data)
    mcfg = _model_config(config, ds)
    size = mcfg.crop_size
    x, y = face_crops(ds.split("train"), mode, size)
    if len(x) == 0:
        raise DatasetMissing("training split has no faces to crop")
    model = AttributeNet(mcfg, seed=config.seed)
    params = model.parameters()
    state = _sgd(config)
    sample_rng, _ = _rngs(config.seed)
    model.train()
    log = []
    order, pos = np.empty(0, dtype=np.int64), 0
    for it in range(config.iterations):
        idx = []
        while len(idx) < config.baseline_batch:
            if pos == len(order):
                order, pos = sample_rng.permutation(len(x)), 0
            idx.append(order[pos])
            pos += 1
        batch = x[idx]
        if config.hflip:
            flip = sample_rng.random(len(idx)) < 0.5
            batch = np.where(flip[:, None, None, None], batch[..., ::-1], batch)
        loss = model.loss(batch, y[idx])
        total = float(loss.data)
        _check_finite(total, it)
        backward(loss)
        lr = sgd_step(params, state)
        log.append((it, total, 0.0, 0.0, 0.0, 0.0, total, lr))
    ckpt = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_log(log, run_dir / "train_log.csv")
        ckpt = Path(config.checkpoint_out) if config.checkpoint_out else run_dir / "model.ckpt"
        save_checkpoint(ckpt, model, state, config.hash(), state.iteration)
    result = TrainResult(model, state, log, ckpt)
    ev = evaluate_baseline(model, ds.split(config.eval_split), mode, ds.attribute_names) if evaluate else None
    return BaselineResult(result, ev)


def evaluate_baseline(model: AttributeNet, records, mode: str, names=None) -> EvalResult:
    x, y = face_crops(records, mode, model.cfg.crop_size)
    preds = np.concatenate([threshold_attributes(model.predict_psi(x[i:i + 64]), model.cfg.tau)
                            for i in range(0, len(x), 64)]) if len(x) else np.zeros_like(y)
    return EvalResult(attribute_report(preds, y.astype(np.int64), names), None, [], len(records))


def evaluate_checkpoint(ckpt: Checkpoint, ds: Dataset, config: RunConfig) -> EvalResult:
    model = ckpt.build_model()
    records = ds.split(config.eval_split)
    if ckpt.kind == "joint":
        return evaluate_joint(model, records, ds.attribute_names, config.eval_iou)
    mode = config.mode if config.mode != "joint" else "cropped-baseline"
    return evaluate_baseline(model, records, mode, ds.attribute_names)


# ---------------------------------------------------------------------------
# report files

def metrics_csv(results: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "metric", "value"])
    for name, res in results.items():
        for k, v in res.metrics().items():
            w.writerow([name, k, repr(v) if isinstance(v, float) else v])
    return buf.getvalue()


def write_reports(results: dict, out_dir) -> dict:
    """Write attribute table/CSV, PR CSV/SVG and the metrics CSV for ``{name: EvalResult}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = {k: r.report for k, r in results.items()}
    files = {
        "attributes.csv": attribute_csv(reports),
        "attributes.txt": format_attribute_table(reports),
        "metrics.csv": metrics_csv(results),
    }
    for name, r in results.items():
        if r.curve is not None:
            files[f"pr_{name}.csv"] = pr_csv(r.curve)
            files[f"pr_{name}.svg"] = pr_svg(r.curve, title=f"{name}: PR-AUC {r.curve.auc:.4f}")
    for fname, text in files.items():
        (out / fname).write_text(text)
    return {k: out / k for k in files}
