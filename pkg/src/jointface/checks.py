"""Gradient checks for every differentiable layer and the composite objective.

Each check builds small random float64 inputs from a seed and runs
:func:`jointface.gradcheck.gradcheck` on one scalar function of one input.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .gradcheck import GradReport, gradcheck
from .losses import mse_loss, smooth_l1_loss, softmax_ce_loss
from .model import JointModel, ModelConfig
from .nn import conv2d, dropout, linear, maxpool2d
from .roi_pool import RoIGrid, roi_pool
from .tensor import Tensor


def _weighted_sum(out: Tensor, rng) -> Tensor:
    # random projection turns any output into a scalar with a generic gradient
    w = rng.standard_normal(out.shape)
    return (out * w).sum()


def check_conv(seed, tol=1e-4):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    proj = np.random.default_rng(seed + 1)
    p = proj.standard_normal((2, 3, 3, 3))
    reports = [
        gradcheck(lambda t: (conv2d(t, w, b, stride=2, padding=1) * p).sum(), x, tol=tol),
        gradcheck(lambda t: (conv2d(x, t, b, stride=2, padding=1) * p).sum(), w, tol=tol),
        gradcheck(lambda t: (conv2d(x, w, t, stride=2, padding=1) * p).sum(), b, tol=tol),
    ]
    return _worst(reports)


def check_pool(seed, tol=1e-4):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 6, 6))
    p = rng.standard_normal((1, 2, 3, 3))
    return gradcheck(lambda t: (maxpool2d(t, 2, 2) * p).sum(), x, tol=tol)


def check_linear(seed, tol=1e-4):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(4)
    p = rng.standard_normal((3, 4))
    return _worst([
        gradcheck(lambda t: (linear(t, w, b) * p).sum(), x, tol=tol),
        gradcheck(lambda t: (linear(x, t, b) * p).sum(), w, tol=tol),
        gradcheck(lambda t: (linear(x, w, t) * p).sum(), b, tol=tol),
    ])


def check_dropout(seed, tol=1e-4):
    """Dropout with its mask frozen: every evaluation re-seeds the same generator."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 6))
    p = rng.standard_normal((4, 6))
    return gradcheck(lambda t: (dropout(t, 0.5, True, np.random.default_rng(seed)) * p).sum(), x, tol=tol)


def check_roi_pool(seed, tol=1e-4):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((1, 2, 8, 8))
    rois = np.array([[0.0, 0.0, 32.0, 32.0], [4.0, 6.0, 22.0, 30.0], [10.0, 2.0, 18.0, 12.0]])
    grid = RoIGrid(2, 3, 0.25)
    p = rng.standard_normal((3, 2, 2, 3))
    return gradcheck(lambda t: (roi_pool(t, rois, grid) * p).sum(), f, tol=tol)


def check_mse(seed, tol=1e-4):
    rng = np.random.default_rng(seed)
    pred = rng.standard_normal((5, 4))
    target = rng.choice([-1.0, 1.0], size=(5, 4))
    target[1] = 0.0
    mask = np.array([True, False, True, True, False])
    return _worst([
        gradcheck(lambda t: mse_loss(t, target), pred, tol=tol),
        gradcheck(lambda t: mse_loss(t, target, mask), pred, tol=tol),
    ])


def check_softmax_ce(seed, tol=1e-4):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((6, 3)) * 2
    labels = rng.integers(0, 3, 6)
    return gradcheck(lambda t: softmax_ce_loss(t, labels), logits, tol=tol)


def check_smooth_l1(seed, tol=1e-4):
    rng = np.random.default_rng(seed)
    pred = rng.standard_normal((5, 4)) * 1.5
    target = rng.standard_normal((5, 4))
    # keep every residual away from the |d| = 1 kink where the curvature jumps
    d = pred - target
    near = np.abs(np.abs(d) - 1.0) < 1e-3
    pred[near] += 0.01
    mask = np.array([True, True, False, True, False])
    return gradcheck(lambda t: smooth_l1_loss(t, target, mask), pred, tol=tol)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(conv_channels=(3, 3, 3, 3, 3), rpn_channels=3, fc_dim=6, num_attributes=3,
                anchor_scales=(6.0, 10.0), roi_h=2, roi_w=2, rpn_batch=16, roi_batch=8,
                train_top_k=8, dropout=0.5, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def tiny_scene(seed):
    rng = np.random.default_rng(seed)
    image = rng.random((1, 20, 20))
    gt = np.array([[3.0, 4.0, 12.0, 13.0], [10.0, 8.0, 18.0, 17.0]])
    attrs = rng.choice([-1, 1], size=(2, 3))
    return image, gt, attrs


@contextmanager
def swapped(model, dotted: str, tensor: Tensor):
    """Temporarily replace one parameter tensor so gradients flow to ``tensor``."""
    *path, leaf = dotted.split(".")
    owner = model
    for p in path:
        owner = getattr(owner, p)
    old = getattr(owner, leaf)
    object.__setattr__(owner, leaf, tensor)
    try:
        yield
    finally:
        object.__setattr__(owner, leaf, old)


def composite_objective(model: JointModel, image, gt, attrs, sample_seed: int, proposals=None):
    """Total loss with all sampling (anchors, RoIs, dropout) frozen by re-seeding.

    Training treats proposals as constants, so a finite-difference check must
    pin them too or it picks up their drift through the box targets.
    """
    drops = [model.head.drop6, model.head.drop7]
    for i, d in enumerate(drops):
        d.rng = np.random.default_rng([sample_seed, i])
    return model.forward_train(image, gt, attrs, np.random.default_rng(sample_seed), proposals)


COMPOSITE_PARAMS = ("backbone.conv1.weight", "rpn_score.weight", "head.fc7.weight",
                    "attr_head.weight", "score_head.weight", "bbox_head.weight")


def check_composite(seed, tol=1e-4):
    model = JointModel(tiny_model_config(), seed=seed)
    image, gt, attrs = tiny_scene(seed)
    props = model.training_proposals(image)
    reports = []
    for name in COMPOSITE_PARAMS:
        p0 = model.parameters()[name].data.copy()

        def fn(t, name=name):
            with swapped(model, name, t):
                return composite_objective(model, image, gt, attrs, seed, props).total_tensor

        reports.append(gradcheck(fn, p0, tol=tol))
    return _worst(reports)


def _worst(reports) -> GradReport:
    return max(reports, key=lambda r: r.max_rel_error)


LAYER_CHECKS = {
    "conv": check_conv,
    "pool": check_pool,
    "fc": check_linear,
    "dropout": check_dropout,
    "roi_pool": check_roi_pool,
    "mse": check_mse,
    "softmax_ce": check_softmax_ce,
    "smooth_l1": check_smooth_l1,
    "composite": check_composite,
}


def run_suite(seeds=range(10), tol: float = 1e-4, names=None):
    """Yield ``(name, seed, report)`` for every check and seed."""
    for name in names or LAYER_CHECKS:
        for seed in seeds:
            yield name, seed, LAYER_CHECKS[name](seed, tol)
