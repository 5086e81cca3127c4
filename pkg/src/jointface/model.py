"""The jointly learned detector/attribute network and its attribute-only baseline.

Layout: conv1..conv5 with max pooling produce a shared feature map. A
proposal branch slides over it to score anchors and regress box deltas;
the top proposals are RoI-pooled, pass through fc6/fc7, and feed three
heads: attributes (``W_a``), face score (``W_s``) and box refinement (``W_b``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .boxes import BBox, clip_boxes, decode_boxes, encode_boxes, iou_matrix
from .errors import NonFiniteInput, NoValidRoIs, ShapeMismatch, UnknownLayer
from .losses import mse_loss, smooth_l1_loss, softmax, softmax_ce_loss
from .nn import Conv2d, Dropout, Linear, MaxPool2d, Module, flatten
from .proposal import FACE, BACKGROUND, MAX_LOG_RATIO, anchor_array, assign_anchor_targets, nms, propose_arrays
from .roi_pool import RoIGrid, roi_pool
from .tensor import Tensor, no_grad, relu

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    in_channels: int = 1
    conv_channels: tuple = (16, 32, 32, 48, 48)
    conv_kernel: int = 3
    pool_after: tuple = (True, False, False, False, False)
    rpn_channels: int = 48
    fc_dim: int = 256
    num_attributes: int = 8
    lambda_attr: float = 1.0
    lambda_score: float = 1.0
    lambda_bbox: float = 2.0
    tau: float = 0.0
    dropout: float = 0.0
    anchor_scales: tuple = (8.0, 16.0, 32.0)
    anchor_ratios: tuple = (1.0,)
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    train_top_k: int = 32
    train_nms: float = 0.7
    eval_top_k: int = 32
    eval_nms: float = 0.5
    use_nms: bool = True
    roi_batch: int = 16
    roi_face_fraction: float = 0.25
    roi_face_iou: float = 0.5
    roi_gt_jitter: int = 4
    roi_jitter_scale: float = 0.1
    roi_h: int = 6
    roi_w: int = 6
    bbox_std: tuple = (1.0, 1.0, 1.0, 1.0)
    background_attr_mode: str = "zero"
    det_nms: float = 0.3
    det_min_score: float = 0.01
    crop_size: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("conv_channels", "pool_after", "anchor_scales", "anchor_ratios", "bbox_std"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if min(self.lambda_attr, self.lambda_score, self.lambda_bbox) < 0:
            raise ValueError("task weights must be non-negative")
        if self.num_attributes < 1:
            raise ValueError("need at least one attribute")
        if len(self.pool_after) != len(self.conv_channels):
            raise ValueError("pool_after needs one flag per conv stage")
        if self.background_attr_mode not in ("zero", "mask"):
            raise ValueError(f"background_attr_mode must be 'zero' or 'mask', got {self.background_attr_mode!r}")

    @property
    def feature_stride(self) -> int:
        return 2 ** sum(bool(p) for p in self.pool_after)

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LossBreakdown:
    attr: float
    score: float
    bbox: float
    rpn_score: float
    rpn_bbox: float
    total: float
    total_tensor: Tensor = field(repr=False, default=None)
    parts: dict = field(repr=False, default_factory=dict)

    @property
    def head_total(self) -> float:
        return self.total - self.rpn_score - self.rpn_bbox


@dataclass
class Detection:
    box: BBox
    score: float
    attributes: np.ndarray
    psi: np.ndarray


def threshold_attributes(psi, tau: float = 0.0) -> np.ndarray:
    """+1 where ``psi > tau``, otherwise -1 (``psi == tau`` maps to -1)."""
    p = np.asarray(psi.data if isinstance(psi, Tensor) else psi, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise NonFiniteInput("attribute scores must be finite")
    return np.where(p > tau, 1, -1).astype(np.int64)


def combine_losses(parts: dict, cfg: ModelConfig) -> Tensor:
    """Weighted head losses plus unit-weight proposal losses."""
    return (parts["attr"] * cfg.lambda_attr + parts["score"] * cfg.lambda_score
            + parts["bbox"] * cfg.lambda_bbox + parts["rpn_score"] + parts["rpn_bbox"])


def average_breakdowns(items: list) -> LossBreakdown:
    """Mean of per-image loss breakdowns; the total stays differentiable."""
    if len(items) == 1:
        return items[0]
    n = len(items)
    total = items[0].total_tensor
    for lb in items[1:]:
        total = total + lb.total_tensor
    total = total * (1.0 / n)
    avg = {k: sum(getattr(lb, k) for lb in items) / n for k in ("attr", "score", "bbox", "rpn_score", "rpn_bbox")}
    return LossBreakdown(total=float(total.data), total_tensor=total, **avg)


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        dtype = cfg.np_dtype
        c_in = cfg.in_channels
        self.names = []
        pad = cfg.conv_kernel // 2
        for i, (c_out, pool) in enumerate(zip(cfg.conv_channels, cfg.pool_after), start=1):
            setattr(self, f"conv{i}", Conv2d(c_in, c_out, cfg.conv_kernel, 1, pad, rng=rng, dtype=dtype))
            self.names.append(f"conv{i}")
            c_in = c_out
        self.pool_after = cfg.pool_after
        self.pool = MaxPool2d(2, 2)
        self.out_channels = c_in

    def forward(self, x, taps: dict | None = None):
        for name, pool in zip(self.names, self.pool_after):
            x = relu(getattr(self, name)(x))
            if taps is not None:
                taps[name] = x
            if pool:
                x = self.pool(x)
        return x


class RoIHead(Module):
    """fc6 / fc7 with dropout over RoI-pooled features."""

    def __init__(self, in_dim: int, cfg: ModelConfig, rng: np.random.Generator, dropout_rng: np.random.Generator):
        super().__init__()
        dtype = cfg.np_dtype
        self.fc6 = Linear(in_dim, cfg.fc_dim, rng=rng, dtype=dtype)
        self.fc7 = Linear(cfg.fc_dim, cfg.fc_dim, rng=rng, dtype=dtype)
        self.drop6 = Dropout(cfg.dropout, dropout_rng)
        self.drop7 = Dropout(cfg.dropout, dropout_rng)

    def forward(self, pooled):
        h = self.drop6(relu(self.fc6(flatten(pooled))))
        return self.drop7(relu(self.fc7(h)))


def _to_image_tensor(image, dtype) -> Tensor:
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(np.ascontiguousarray(arr))


class JointModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        object.__setattr__(self, "cfg", cfg)
        ss = np.random.SeedSequence(seed)
        init_rng, drop_rng, head_rng = (np.random.default_rng(s) for s in ss.spawn(3))
        dtype = cfg.np_dtype
        self.backbone = Backbone(cfg, init_rng)
        c = self.backbone.out_channels
        a = cfg.num_anchors
        self.rpn_conv = Conv2d(c, cfg.rpn_channels, 3, 1, 1, rng=init_rng, dtype=dtype)
        self.rpn_score = Conv2d(cfg.rpn_channels, 2 * a, 1, rng=init_rng, dtype=dtype, gain=1.0)
        self.rpn_bbox = Conv2d(cfg.rpn_channels, 4 * a, 1, rng=init_rng, dtype=dtype, gain=0.1)
        self.head = RoIHead(c * cfg.roi_h * cfg.roi_w, cfg, init_rng, drop_rng)
        self.attr_head = Linear(cfg.fc_dim, cfg.num_attributes, rng=head_rng, dtype=dtype, gain=1.0)
        self.score_head = Linear(cfg.fc_dim, 2, rng=head_rng, dtype=dtype, gain=1.0)
        self.bbox_head = Linear(cfg.fc_dim, 4, rng=head_rng, dtype=dtype, gain=0.1)
        object.__setattr__(self, "_anchor_cache", {})

    # named views of the task weights
    @property
    def W_a(self) -> Tensor:
        return self.attr_head.weight

    @property
    def W_s(self) -> Tensor:
        return self.score_head.weight

    @property
    def W_b(self) -> Tensor:
        return self.bbox_head.weight

    @property
    def grid(self) -> RoIGrid:
        return RoIGrid(self.cfg.roi_h, self.cfg.roi_w, 1.0 / self.cfg.feature_stride)

    def anchors(self, feature_hw) -> np.ndarray:
        key = tuple(feature_hw)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = anchor_array(key, self.cfg.feature_stride,
                                                   self.cfg.anchor_scales, self.cfg.anchor_ratios)
        return self._anchor_cache[key]

    # -- forward pieces -----------------------------------------------------

    def features(self, image, taps: dict | None = None) -> Tensor:
        x = _to_image_tensor(image, self.cfg.np_dtype)
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeMismatch("image channels differ from model in_channels", x.shape, (self.cfg.in_channels,))
        if min(x.shape[2:]) < self.cfg.feature_stride:
            raise ShapeMismatch(f"image smaller than the backbone stride {self.cfg.feature_stride}", x.shape)
        return self.backbone(x, taps)

    def rpn(self, feat: Tensor):
        h = relu(self.rpn_conv(feat))
        a = self.cfg.num_anchors
        logits = self.rpn_score(h).transpose(0, 2, 3, 1).reshape(-1, 2)
        deltas = self.rpn_bbox(h).transpose(0, 2, 3, 1).reshape(-1, 4)
        assert logits.shape[0] == feat.shape[2] * feat.shape[3] * a
        return logits, deltas

    def heads(self, feat: Tensor, rois: np.ndarray):
        pooled = roi_pool(feat, rois, self.grid)
        h = self.head(pooled)
        return self.attr_head(h), self.score_head(h), self.bbox_head(h)

    # -- training -----------------------------------------------------------

    def forward_train(self, image, gt_boxes, gt_attrs, rng: np.random.Generator,
                      proposals=None) -> LossBreakdown:
        """Composite loss for one image with its ground-truth boxes and attribute rows.

        Proposals are constants of the loss. Passing ``proposals`` pins them
        instead of decoding the current RPN output.
        """
        cfg = self.cfg
        gt = np.asarray([b.as_array() if isinstance(b, BBox) else b for b in gt_boxes], dtype=np.float64).reshape(-1, 4)
        attrs = np.asarray(gt_attrs, dtype=np.float64).reshape(len(gt), cfg.num_attributes)
        if attrs.size and not np.all(np.isin(attrs, (-1.0, 1.0))):
            raise ValueError("face attribute rows must be in {+1, -1}")
        feat = self.features(image)
        img_h, img_w = np.asarray(image.data if isinstance(image, Tensor) else image).shape[-2:]
        anchors = self.anchors(feat.shape[2:])

        logits, deltas = self.rpn(feat)
        targets = assign_anchor_targets(anchors, gt, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
        pos = np.flatnonzero(targets.labels == FACE)
        neg = np.flatnonzero(targets.labels == BACKGROUND)
        n_pos = min(len(pos), int(cfg.rpn_batch * cfg.rpn_pos_fraction))
        pos = np.sort(rng.choice(pos, n_pos, replace=False)) if n_pos < len(pos) else pos
        n_neg = min(len(neg), cfg.rpn_batch - len(pos))
        neg = np.sort(rng.choice(neg, n_neg, replace=False)) if n_neg < len(neg) else neg
        sampled = np.concatenate([pos, neg])
        rpn_labels = (targets.labels[sampled] == FACE).astype(np.int64)
        rpn_score_loss = softmax_ce_loss(logits[sampled], rpn_labels)
        rpn_bbox_loss = smooth_l1_loss(deltas[sampled], targets.deltas[sampled], rpn_labels == 1)

        props = (self._train_proposals(logits, deltas, anchors, (img_w, img_h)) if proposals is None
                 else np.asarray(proposals, dtype=np.float64).reshape(-1, 4))
        cand = np.concatenate([props, gt, self._jitter(gt, rng)], axis=0)
        rois, labels, roi_attrs, box_targets = self._sample_rois(cand, gt, attrs, rng)

        psi, phi, omega = self.heads(feat, rois)
        face = labels == 1
        row_mask = face if cfg.background_attr_mode == "mask" else None
        parts = {
            "attr": mse_loss(psi, roi_attrs, row_mask),
            "score": softmax_ce_loss(phi, labels),
            "bbox": smooth_l1_loss(omega, box_targets, face),
            "rpn_score": rpn_score_loss,
            "rpn_bbox": rpn_bbox_loss,
        }
        total = combine_losses(parts, cfg)
        vals = {k: float(v.data) for k, v in parts.items()}
        return LossBreakdown(vals["attr"], vals["score"], vals["bbox"], vals["rpn_score"], vals["rpn_bbox"],
                             float(total.data), total, parts)

    def _train_proposals(self, logits, deltas, anchors, image_size):
        with no_grad():
            probs = softmax(logits.data.astype(np.float64))[:, 1]
        nms_iou = self.cfg.train_nms if self.cfg.use_nms else None
        props, _, _ = propose_arrays(probs, deltas.data, anchors, image_size, self.cfg.train_top_k, nms_iou)
        return props

    def training_proposals(self, image) -> np.ndarray:
        """The proposal boxes ``forward_train`` would sample RoIs from."""
        with no_grad():
            feat = self.features(image)
            logits, deltas = self.rpn(feat)
        img_h, img_w = np.asarray(image.data if isinstance(image, Tensor) else image).shape[-2:]
        return self._train_proposals(logits, deltas, self.anchors(feat.shape[2:]), (img_w, img_h))

    def _jitter(self, gt, rng):
        """Random shifts and rescales of each gt box, ``roi_gt_jitter`` per face."""
        k = self.cfg.roi_gt_jitter
        if k == 0 or len(gt) == 0:
            return np.zeros((0, 4))
        s = self.cfg.roi_jitter_scale
        w = (gt[:, 2] - gt[:, 0])[:, None]
        h = (gt[:, 3] - gt[:, 1])[:, None]
        cx = (gt[:, 0] + gt[:, 2])[:, None] / 2 + rng.uniform(-s, s, (len(gt), k)) * w
        cy = (gt[:, 1] + gt[:, 3])[:, None] / 2 + rng.uniform(-s, s, (len(gt), k)) * h
        w = w * np.exp(rng.uniform(-s, s, (len(gt), k)))
        h = h * np.exp(rng.uniform(-s, s, (len(gt), k)))
        return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1).reshape(-1, 4)

    def _sample_rois(self, cand, gt, attrs, rng):
        cfg = self.cfg
        m = cfg.num_attributes
        if len(gt):
            ious = iou_matrix(cand, gt)
            best = ious.argmax(axis=1)
            best_iou = ious[np.arange(len(cand)), best]
        else:
            best = np.full(len(cand), -1)
            best_iou = np.zeros(len(cand))
        fg = np.flatnonzero(best_iou >= cfg.roi_face_iou)
        bg = np.flatnonzero(best_iou < cfg.roi_face_iou)
        n_fg = min(len(fg), int(round(cfg.roi_batch * cfg.roi_face_fraction)))
        fg = np.sort(rng.choice(fg, n_fg, replace=False)) if n_fg < len(fg) else fg
        n_bg = min(len(bg), cfg.roi_batch - len(fg))
        bg = np.sort(rng.choice(bg, n_bg, replace=False)) if n_bg < len(bg) else bg
        keep = np.concatenate([fg, bg])
        if keep.size == 0:
            raise NoValidRoIs("RoI sampling produced an empty minibatch")
        rois = cand[keep]
        labels = np.r_[np.ones(len(fg), dtype=np.int64), np.zeros(len(bg), dtype=np.int64)]
        roi_attrs = np.zeros((len(keep), m))
        box_targets = np.zeros((len(keep), 4))
        if len(fg):
            roi_attrs[: len(fg)] = attrs[best[fg]]
            box_targets[: len(fg)] = encode_boxes(gt[best[fg]], rois[: len(fg)]) / np.asarray(cfg.bbox_std)
        return rois, labels, roi_attrs, box_targets

    # -- inference ----------------------------------------------------------

    def predict(self, image, tau: float | None = None) -> list[Detection]:
        """Detect faces and predict their attributes on a whole, uncropped image."""
        cfg = self.cfg
        tau = cfg.tau if tau is None else tau
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                feat = self.features(image)
                img_h, img_w = np.asarray(image.data if isinstance(image, Tensor) else image).shape[-2:]
                anchors = self.anchors(feat.shape[2:])
                logits, deltas = self.rpn(feat)
                probs = softmax(logits.data.astype(np.float64))[:, 1]
                nms_iou = cfg.eval_nms if cfg.use_nms else None
                props, _, _ = propose_arrays(probs, deltas.data, anchors, (img_w, img_h), cfg.eval_top_k, nms_iou)
                if len(props) == 0:
                    return []
                psi, phi, omega = self.heads(feat, props)
        finally:
            self.train(was_training)
        return self._detections(props, psi.data, phi.data, omega.data, (img_w, img_h), tau)

    def _detections(self, props, psi, phi, omega, image_size, tau):
        cfg = self.cfg
        scores = softmax(np.asarray(phi, dtype=np.float64))[:, 1]
        d = np.asarray(omega, dtype=np.float64) * np.asarray(cfg.bbox_std)
        boxes = clip_boxes(decode_boxes(d, props, MAX_LOG_RATIO), *image_size)
        ok = ((boxes[:, 2] - boxes[:, 0]) > 0) & ((boxes[:, 3] - boxes[:, 1]) > 0) & (scores >= cfg.det_min_score)
        idx = np.flatnonzero(ok)
        if idx.size == 0:
            return []
        keep = idx[nms(boxes[idx], scores[idx], cfg.det_nms)] if cfg.det_nms is not None else idx[np.argsort(-scores[idx], kind="stable")]
        psi = np.asarray(psi, dtype=np.float64)
        return [Detection(BBox.from_array(boxes[k]), float(scores[k]), threshold_attributes(psi[k], tau), psi[k].copy())
                for k in keep]

    def attributes_for_boxes(self, image, boxes) -> np.ndarray:
        """Raw attribute scores for given boxes (used for detector-free probes)."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                feat = self.features(image)
                psi, _, _ = self.heads(feat, np.asarray([b.as_array() if isinstance(b, BBox) else b for b in boxes]))
        finally:
            self.train(was_training)
        return psi.data

    def export_feature_map(self, image, layer: str = "conv5") -> np.ndarray:
        """Per-cell mean absolute activation of ``layer``, scaled to [0, 1]."""
        if layer not in self.backbone.names:
            raise UnknownLayer(f"unknown layer {layer!r}; have {self.backbone.names}")
        taps = {}
        with no_grad():
            self.features(image, taps)
        act = np.abs(np.asarray(taps[layer].data, dtype=np.float64)[0]).mean(axis=0)
        peak = act.max()
        return act / peak if peak > 0 else np.zeros_like(act)


class AttributeNet(Module):
    """Attribute-only baseline: same backbone and fc layers, no detection branch.

    Input is a face crop resized to ``crop_size``; the whole feature map is
    pooled onto the same RoI grid as the joint model.
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        object.__setattr__(self, "cfg", cfg)
        ss = np.random.SeedSequence(seed)
        init_rng, drop_rng, head_rng = (np.random.default_rng(s) for s in ss.spawn(3))
        self.backbone = Backbone(cfg, init_rng)
        c = self.backbone.out_channels
        self.head = RoIHead(c * cfg.roi_h * cfg.roi_w, cfg, init_rng, drop_rng)
        self.attr_head = Linear(cfg.fc_dim, cfg.num_attributes, rng=head_rng, dtype=cfg.np_dtype, gain=1.0)

    @property
    def W_a(self) -> Tensor:
        return self.attr_head.weight

    def forward(self, crops) -> Tensor:
        x = Tensor(np.ascontiguousarray(np.asarray(crops, dtype=self.cfg.np_dtype)))
        feat = self.backbone(x)
        h, w = feat.shape[2:]
        stride = self.cfg.feature_stride
        whole = np.array([[0.0, 0.0, w * stride, h * stride]])
        grid = RoIGrid(self.cfg.roi_h, self.cfg.roi_w, 1.0 / stride)
        pooled = [roi_pool(feat[i:i + 1], whole, grid) for i in range(feat.shape[0])]
        from .tensor import concat
        return self.attr_head(self.head(concat(pooled, axis=0)))

    def loss(self, crops, attrs) -> Tensor:
        return mse_loss(self.forward(crops), np.asarray(attrs, dtype=np.float64))

    def predict_psi(self, crops) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                return np.asarray(self.forward(crops).data, dtype=np.float64)
        finally:
            self.train(was_training)
