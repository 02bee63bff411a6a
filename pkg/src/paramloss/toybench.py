"""Desk-scale synthetic detection benchmark.

A dataset of small scenes stands in for detector training data: each scene
holds a handful of ground-truth boxes, a fixed set of candidate (anchor)
boxes derived from them, and per-candidate features. A one-hidden-layer
model maps features to a classification score and a box refinement, and an
inner training loop drives it with the parameterized loss. The reward of a
trained model is its mean precision-recall AP over held-out scenes, which is
the quantity the outer parameter search maximizes.

The detector is deliberately tiny. The loss only ever sees scores, boxes
and an assignment, so a feature-to-(score, delta) map over precomputed
anchors preserves everything the loss can influence while keeping one inner
training run in the sub-second range.

Feature layout per candidate: the four box coordinates, a noisy copy of the
candidate's best IoU against the scene's ground truths (the learnable
ranking signal), and standard-normal distractor dimensions up to F.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .apmetric import COCO_THRESHOLDS, DetectionBatch, ap_pr_area, assign
from .errors import (
    ConfigError,
    EmptyPositiveError,
    InvalidInputError,
    TrainingDivergedError,
)
from .geometry import pairwise_iou, validate_boxes
from .optim import Adam
from .paploss import LossParams, loss_backward, loss_forward

ASSIGN_THRESHOLD = 0.5
MIN_BOX_SIZE = 0.02
DELTA_CAP = 4.0  # box-size deltas are clipped to keep exp() tame


@dataclass(frozen=True, eq=False)
class DatasetConfig:
    """Generator settings: scene count, boxes per scene, feature noise."""

    scenes: int = 200
    g_max: int = 3
    anchors: int = 16
    features: int = 8
    noise: float = 0.05
    seed: int = 7

    def __post_init__(self):
        if self.scenes < 2:
            raise ConfigError("need at least 2 scenes to split train/eval")
        if self.g_max < 1:
            raise ConfigError("G_max must be at least 1")
        if self.anchors < 2 * self.g_max:
            raise ConfigError("anchor count must be at least twice G_max")
        if self.features < 5:
            raise ConfigError("feature dimension must be at least 5 (4 coords + ranking signal)")
        if not (np.isfinite(self.noise) and self.noise >= 0.0):
            raise ConfigError("noise must be a finite non-negative real")

    def to_json_dict(self) -> dict:
        return {"scenes": self.scenes, "G_max": self.g_max, "A": self.anchors,
                "F": self.features, "noise": self.noise, "seed": self.seed}

    @classmethod
    def from_json_dict(cls, data: dict) -> "DatasetConfig":
        keys = {"scenes", "G_max", "A", "F", "noise", "seed"}
        unknown = set(data) - keys
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        merged = {"scenes": 200, "G_max": 3, "A": 16, "F": 8, "noise": 0.05, "seed": 7}
        merged.update(data)
        return cls(scenes=int(merged["scenes"]), g_max=int(merged["G_max"]),
                   anchors=int(merged["A"]), features=int(merged["F"]),
                   noise=float(merged["noise"]), seed=int(merged["seed"]))


@dataclass(frozen=True, eq=False)
class Scene:
    """One synthetic image: ground truths, candidate boxes, features.

    source[k] is the index of the ground truth candidate k was jittered
    from, -1 for background candidates. assignment is precomputed with the
    standard rule so that training and evaluation share identical labels.
    Every ground truth is covered by at least one candidate at the
    assignment threshold; the generator enforces this and the constructor
    re-checks it.
    """

    gt_boxes: np.ndarray
    anchors: np.ndarray
    features: np.ndarray
    assignment: np.ndarray
    source: np.ndarray

    def __post_init__(self):
        gt = validate_boxes(np.asarray(self.gt_boxes, dtype=float).reshape(-1, 4))
        anchors = validate_boxes(np.asarray(self.anchors, dtype=float).reshape(-1, 4))
        feats = np.asarray(self.features, dtype=float)
        asg = np.asarray(self.assignment, dtype=np.int64).reshape(-1)
        src = np.asarray(self.source, dtype=np.int64).reshape(-1)
        if gt.shape[0] < 1:
            raise InvalidInputError("scene needs at least one ground truth")
        a = anchors.shape[0]
        if feats.ndim != 2 or feats.shape[0] != a or asg.shape[0] != a or src.shape[0] != a:
            raise InvalidInputError("anchors, features, assignment and source lengths differ")
        if not np.all(np.isfinite(feats)):
            raise InvalidInputError("features must be finite")
        cover = pairwise_iou(anchors, gt).max(axis=0)
        if np.any(cover < ASSIGN_THRESHOLD):
            raise InvalidInputError("a ground truth has no candidate at the assignment threshold")
        expected = assign(anchors, gt, ASSIGN_THRESHOLD)
        if not np.array_equal(expected, asg):
            raise InvalidInputError("stored assignment disagrees with the assignment rule")
        object.__setattr__(self, "gt_boxes", gt)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "assignment", asg)
        object.__setattr__(self, "source", src)

    def to_json_dict(self) -> dict:
        return {"gt_boxes": self.gt_boxes.tolist(), "anchors": self.anchors.tolist(),
                "features": self.features.tolist(), "assignment": self.assignment.tolist(),
                "source": self.source.tolist()}

    @classmethod
    def from_json_dict(cls, data: dict) -> "Scene":
        return cls(np.asarray(data["gt_boxes"], dtype=float),
                   np.asarray(data["anchors"], dtype=float),
                   np.asarray(data["features"], dtype=float),
                   np.asarray(data["assignment"], dtype=np.int64),
                   np.asarray(data["source"], dtype=np.int64))


def _fit_boxes_into_unit_square(boxes: np.ndarray) -> np.ndarray:
    """Enforce minimum extent, then shift (width-preserving) into [0,1]^2."""
    out = boxes.copy()
    out[:, 2] = np.maximum(out[:, 2], out[:, 0] + MIN_BOX_SIZE)
    out[:, 3] = np.maximum(out[:, 3], out[:, 1] + MIN_BOX_SIZE)
    for lo, hi in ((0, 2), (1, 3)):
        span = np.minimum(out[:, hi] - out[:, lo], 1.0)
        out[:, hi] = out[:, lo] + span
        shift = np.maximum(0.0, -out[:, lo]) - np.maximum(0.0, out[:, hi] - 1.0)
        out[:, lo] += shift
        out[:, hi] += shift
    return out


def _random_boxes(rng, count: int) -> np.ndarray:
    w = rng.uniform(0.1, 0.4, size=count)
    h = rng.uniform(0.1, 0.4, size=count)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def _generate_scene(rng, config: DatasetConfig) -> Scene:
    n_gt = int(rng.integers(1, config.g_max + 1))
    gts = _random_boxes(rng, n_gt)

    n_jit = config.anchors // 2
    source = np.concatenate([
        np.arange(n_jit, dtype=np.int64) % n_gt,
        np.full(config.anchors - n_jit, -1, dtype=np.int64),
    ])
    jitter = rng.normal(0.0, 1.0, size=(n_jit, 4)) * config.noise
    jittered = _fit_boxes_into_unit_square(gts[source[:n_jit]] + jitter)
    background = _random_boxes(rng, config.anchors - n_jit)
    candidates = np.vstack([jittered, background])

    # learnability pass: any uncovered ground truth gets one exact copy.
    # Overwriting a slot can uncover an overlapping neighbour, so repeat
    # until stable; exact copies are never uncovered again, which bounds
    # the loop at n_gt rounds.
    while True:
        iou = pairwise_iou(candidates, gts)
        uncovered = np.flatnonzero(iou.max(axis=0) < ASSIGN_THRESHOLD)
        if uncovered.size == 0:
            break
        g = int(uncovered[0])
        slots = np.flatnonzero(source == g)
        slot = int(slots[0]) if slots.size else int(np.flatnonzero(source == -1)[0])
        candidates[slot] = gts[g]
        source[slot] = g

    best_iou = iou.max(axis=1)
    iou_feature = best_iou + config.noise * rng.normal(0.0, 1.0, size=config.anchors)
    distractors = rng.normal(0.0, 1.0, size=(config.anchors, config.features - 5))
    features = np.hstack([candidates, iou_feature[:, None], distractors])

    return Scene(gts, candidates, features,
                 assign(candidates, gts, ASSIGN_THRESHOLD), source)


def generate(config: DatasetConfig):
    """Deterministically build (train_scenes, eval_scenes) from the config.

    The newest fifth of the scenes (at least one) forms the eval split;
    the two splits are disjoint by construction.
    """
    rng = np.random.default_rng([config.seed, 977])
    scenes = [_generate_scene(rng, config) for _ in range(config.scenes)]
    n_eval = max(1, config.scenes // 5)
    return tuple(scenes[:-n_eval]), tuple(scenes[-n_eval:])


def dataset_to_json_dict(config: DatasetConfig, train, eval_scenes) -> dict:
    return {"config": config.to_json_dict(),
            "train": [s.to_json_dict() for s in train],
            "eval": [s.to_json_dict() for s in eval_scenes]}


def dataset_from_json_dict(data: dict):
    config = DatasetConfig.from_json_dict(data["config"])
    train = tuple(Scene.from_json_dict(s) for s in data["train"])
    eval_scenes = tuple(Scene.from_json_dict(s) for s in data["eval"])
    return config, train, eval_scenes


def save_dataset(path, config: DatasetConfig, train, eval_scenes):
    with open(path, "w") as fh:
        json.dump(dataset_to_json_dict(config, train, eval_scenes), fh)


def load_dataset(path):
    with open(path) as fh:
        return dataset_from_json_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class ToyModel:
    """One-hidden-layer map from features to (score logit, 4 box deltas).

    The refined box applies center offsets scaled by anchor extent and
    exponential size multipliers, then is shifted back into the unit square
    if it pokes out. A zero model therefore reproduces the anchors exactly
    and scores everything 0.5.
    """

    w1: np.ndarray  # (F, H)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, 5)
    b2: np.ndarray  # (5,)

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"model weights {name} must be finite")
            object.__setattr__(self, name, arr)
        if self.w1.ndim != 2 or self.b1.shape != (self.w1.shape[1],):
            raise InvalidInputError("hidden layer shapes are inconsistent")
        if self.w2.shape != (self.w1.shape[1], 5) or self.b2.shape != (5,):
            raise InvalidInputError("output layer must map hidden -> 5")

    @property
    def n_features(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def init(cls, n_features: int, hidden: int, seed: int) -> "ToyModel":
        """Seeded start: random trunk, zero output heads."""
        rng = np.random.default_rng([seed, 331])
        w1 = rng.normal(0.0, 1.0 / np.sqrt(n_features), size=(n_features, hidden))
        return cls(w1, np.zeros(hidden), np.zeros((hidden, 5)), np.zeros(5))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def with_vector(self, vec: np.ndarray) -> "ToyModel":
        v = np.asarray(vec, dtype=float)
        f, h = self.w1.shape
        sizes = [f * h, h, h * 5, 5]
        if v.shape != (sum(sizes),):
            raise InvalidInputError("weight vector has the wrong length")
        parts = np.split(v, np.cumsum(sizes)[:-1])
        return ToyModel(parts[0].reshape(f, h), parts[1], parts[2].reshape(h, 5), parts[3])


@dataclass(eq=False)
class _ForwardCache:
    features: np.ndarray
    hidden: np.ndarray
    scores: np.ndarray
    anchors: np.ndarray
    aw: np.ndarray
    ah: np.ndarray
    exp_w: np.ndarray
    exp_h: np.ndarray
    size_act_w: np.ndarray
    size_act_h: np.ndarray
    cap_act_w: np.ndarray
    cap_act_h: np.ndarray
    out_x1: np.ndarray
    out_x2: np.ndarray
    out_y1: np.ndarray
    out_y2: np.ndarray


def _decode_axis(anchor_lo, anchor_hi, center_move, extent_new, extent_old):
    # corner-offset form: bitwise identity when both deltas are zero
    grow_half = (extent_new - extent_old) / 2.0
    lo = anchor_lo + center_move - grow_half
    hi = anchor_hi + center_move + grow_half
    shift = np.maximum(0.0, -lo) - np.maximum(0.0, hi - 1.0)
    return lo + shift, hi + shift, lo < 0.0, hi > 1.0


def _model_apply(model: ToyModel, features: np.ndarray, anchors: np.ndarray):
    """Shared forward: returns (boxes, scores, cache)."""
    x = np.asarray(features, dtype=float)
    if x.shape[1] != model.n_features:
        raise InvalidInputError(
            f"feature dimension {x.shape[1]} does not match model ({model.n_features})"
        )
    u = np.tanh(x @ model.w1 + model.b1)
    out = u @ model.w2 + model.b2
    scores = expit(out[:, 0])
    dx, dy, dw, dh = out[:, 1], out[:, 2], out[:, 3], out[:, 4]

    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]

    cap_act_w = np.abs(dw) < DELTA_CAP
    cap_act_h = np.abs(dh) < DELTA_CAP
    exp_w = np.exp(np.clip(dw, -DELTA_CAP, DELTA_CAP))
    exp_h = np.exp(np.clip(dh, -DELTA_CAP, DELTA_CAP))
    raw_w = aw * exp_w
    raw_h = ah * exp_h
    wp = np.clip(raw_w, MIN_BOX_SIZE, 1.0)
    hp = np.clip(raw_h, MIN_BOX_SIZE, 1.0)
    size_act_w = (raw_w > MIN_BOX_SIZE) & (raw_w < 1.0)
    size_act_h = (raw_h > MIN_BOX_SIZE) & (raw_h < 1.0)

    x1, x2, out_x1, out_x2 = _decode_axis(anchors[:, 0], anchors[:, 2], dx * aw, wp, aw)
    y1, y2, out_y1, out_y2 = _decode_axis(anchors[:, 1], anchors[:, 3], dy * ah, hp, ah)
    boxes = np.stack([x1, y1, x2, y2], axis=1)

    cache = _ForwardCache(x, u, scores, anchors, aw, ah, exp_w, exp_h,
                          size_act_w, size_act_h, cap_act_w, cap_act_h,
                          out_x1, out_x2, out_y1, out_y2)
    return boxes, scores, cache


def _weight_grads(model: ToyModel, cache: _ForwardCache,
                  score_grads: np.ndarray, box_grads: np.ndarray) -> np.ndarray:
    """Chain loss gradients on (scores, boxes) back to a flat weight gradient."""
    gx1, gy1, gx2, gy2 = box_grads.T

    def axis_chain(g_lo, g_hi, lo_out, hi_out, a_extent, exp_d, size_act, cap_act):
        lo_out = lo_out.astype(float)
        hi_out = hi_out.astype(float)
        d_lo_raw = g_lo * (1.0 - lo_out) - g_hi * lo_out
        d_hi_raw = g_hi * (1.0 - hi_out) - g_lo * hi_out
        d_center = d_lo_raw + d_hi_raw
        d_extent = (d_hi_raw - d_lo_raw) / 2.0
        d_offset = d_center * a_extent
        d_size = d_extent * a_extent * exp_d * size_act * cap_act
        return d_offset, d_size

    g_dx, g_dw = axis_chain(gx1, gx2, cache.out_x1, cache.out_x2,
                            cache.aw, cache.exp_w, cache.size_act_w, cache.cap_act_w)
    g_dy, g_dh = axis_chain(gy1, gy2, cache.out_y1, cache.out_y2,
                            cache.ah, cache.exp_h, cache.size_act_h, cache.cap_act_h)
    g_logit = score_grads * cache.scores * (1.0 - cache.scores)

    out_grad = np.stack([g_logit, g_dx, g_dy, g_dw, g_dh], axis=1)
    g_w2 = cache.hidden.T @ out_grad
    g_b2 = out_grad.sum(axis=0)
    g_hidden = (out_grad @ model.w2.T) * (1.0 - cache.hidden**2)
    g_w1 = cache.features.T @ g_hidden
    g_b1 = g_hidden.sum(axis=0)
    return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])


def _merge_scenes(scenes):
    """Stack scene arrays into one joint batch with offset gt indices."""
    feats = np.vstack([s.features for s in scenes])
    anchors = np.vstack([s.anchors for s in scenes])
    gts = np.vstack([s.gt_boxes for s in scenes])
    assignment = []
    offset = 0
    for s in scenes:
        asg = s.assignment.copy()
        asg[asg >= 0] += offset
        assignment.append(asg)
        offset += s.gt_boxes.shape[0]
    return feats, anchors, gts, np.concatenate(assignment)


def model_forward(model: ToyModel, scene: Scene) -> DetectionBatch:
    """Run the detector on one scene; assignment is the scene's labels."""
    boxes, scores, _ = _model_apply(model, scene.features, scene.anchors)
    return DetectionBatch(boxes, scores, scene.gt_boxes, scene.assignment)


def train_inner(params: LossParams, train_set, steps: int, seed: int, *,
                batch_scenes: int = 8, lr: float = 0.02, hidden: int = 16,
                functions=None) -> ToyModel:
    """Seeded inner training of the detector under the given loss parameters.

    Runs `steps` Adam updates over shuffled mini-batches of scenes; all
    predictions of a mini-batch form one joint ranking. A mini-batch without
    positives is skipped (the step is consumed without an update). Raises
    TrainingDivergedError on the first non-finite loss, gradient or weight.
    `functions` overrides the piecewise substitutions with explicit callables
    (used by the handcrafted-substitution comparisons).
    """
    if steps < 0:
        raise InvalidInputError("steps must be non-negative")
    if not train_set:
        raise InvalidInputError("training needs at least one scene")
    n_features = train_set[0].features.shape[1]
    model = ToyModel.init(n_features, hidden, seed)
    if steps == 0:
        return model

    shuffle_rng = np.random.default_rng([seed, 733])
    batch_scenes = min(batch_scenes, len(train_set))
    order = []
    opt = Adam(model.to_vector().size, lr=lr)
    weights = model.to_vector()

    for step in range(steps):
        if len(order) < batch_scenes:
            order = list(shuffle_rng.permutation(len(train_set)))
        picked = [train_set[i] for i in order[:batch_scenes]]
        order = order[batch_scenes:]

        model = model.with_vector(weights)
        feats, anchors, gts, assignment = _merge_scenes(picked)
        boxes, scores, cache = _model_apply(model, feats, anchors)
        degenerate = (np.any(boxes[:, 2] - boxes[:, 0] <= 0.0)
                      or np.any(boxes[:, 3] - boxes[:, 1] <= 0.0))
        if degenerate or not (np.all(np.isfinite(boxes)) and np.all(np.isfinite(scores))):
            raise TrainingDivergedError(step)
        batch = DetectionBatch(boxes, scores, gts, assignment)
        try:
            value, loss_cache = loss_forward(batch, params, functions)
        except EmptyPositiveError:
            continue
        score_grads, box_grads = loss_backward(loss_cache, params)
        if not (np.isfinite(value) and np.all(np.isfinite(score_grads))
                and np.all(np.isfinite(box_grads))):
            raise TrainingDivergedError(step)
        grad = _weight_grads(model, cache, score_grads, box_grads)
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(step)
        # linear step-size decay: collapses the seed-to-seed spread of the
        # final weights by an order of magnitude versus a constant rate
        weights = opt.step(weights, grad, lr=lr * (1.0 - step / steps))
        if not np.all(np.isfinite(weights)):
            raise TrainingDivergedError(step)

    return model.with_vector(weights)


def reward(model: ToyModel, eval_scenes, thresholds=None) -> float:
    """Mean precision-recall AP of the model over the evaluation scenes."""
    if not eval_scenes:
        raise InvalidInputError("reward needs a non-empty evaluation set")
    if thresholds is None:
        thresholds = COCO_THRESHOLDS
    total = 0.0
    for scene in eval_scenes:
        batch = model_forward(model, scene)
        total += ap_pr_area(batch.boxes, batch.scores, batch.gt_boxes, thresholds)
    return float(total / len(eval_scenes))


def dataset_loss(model: ToyModel, params: LossParams, scenes) -> float:
    """Mean per-scene loss value; diagnostic helper for tests and tuning."""
    if not scenes:
        raise InvalidInputError("dataset_loss needs at least one scene")
    values = []
    for scene in scenes:
        batch = model_forward(model, scene)
        values.append(loss_forward(batch, params)[0])
    return float(np.mean(values))
