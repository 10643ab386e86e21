"""Online adaptation loop, ablations, selector oracle study and parameter sweeps.

Every frame is first segmented by the model as adapted up to the previous
frame and scored; only then may it drive an update. The loop pulls frames
one at a time and keeps just the last ``w`` of them for the temporal term.
"""
from __future__ import annotations

import dataclasses
import hashlib
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import autodiff as ad
from . import evalkit, objective, propagation, segnet, selection, stream
from .descriptor import DescriptorField, fpfh_descriptor
from .geom import Frame, relative_transform

SELECTORS = ("uncertainty", "confidence", "centroid")
ABLATIONS = ("A", "A+T", "A+T+P")
ABLATION_ALIASES = {"A": "A", "AT": "A+T", "A+T": "A+T", "ATP": "A+T+P", "A+T+P": "A+T+P"}

# The standard synthetic shifted benchmark: defaults everywhere except a
# smaller online step, since with ~1000 points and ~10 seeds per frame a
# 1e-3 Adam step mostly injects noise into the small network.
BENCHMARK = {"lr": 1e-4, "frames": 200}


class StreamTooShort(ValueError):
    pass


class NoGroundTruth(ValueError):
    pass


class CausalityViolation(RuntimeError):
    pass


@dataclass
class RunConfig:
    mode: str = "adapt"
    selector: str = "uncertainty"
    ablation: str = "A+T+P"
    J: int = 5
    a: float = 1.0
    dropout_p: float = 0.5
    uncertainty_mode: str = selection.DROPOUT_VARIANCE
    K: int = 10
    w: int = 5
    tau: float = 0.3
    lr: float = 1e-3
    weight_decay: float = 0.0
    steps_per_frame: int = 1
    # keep the classifier dropout active in the adaptation forward pass
    train_dropout: bool = True
    adapt_before_window: bool = False
    seed: int = 0
    frames: int = 200
    # generator overrides on top of the shifted target scene, or a KITTI-format sequence
    target: dict = field(default_factory=dict)
    kitti_root: Optional[str] = None
    descriptor_radius: float = 1.0
    normal_k: int = 15
    # source pretraining
    source: dict = field(default_factory=dict)
    source_frames: int = 50
    holdout_frames: int = 20
    epochs: int = 20
    pretrain_lr: float = 0.01
    pretrain_weight_decay: float = 1e-3
    pretrain_mirror: bool = True
    out_dir: Optional[str] = None

    def __post_init__(self):
        self.ablation = ABLATION_ALIASES.get(self.ablation, self.ablation)
        self.validate()

    def validate(self) -> "RunConfig":
        if self.w < 1:
            raise ValueError("w must be >= 1")
        if self.J < 1:
            raise ValueError("J must be >= 1")
        if not 0 < self.a < 100:
            raise ValueError("a must lie in (0, 100)")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.selector not in SELECTORS:
            raise ValueError(f"selector must be one of {SELECTORS}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.uncertainty_mode not in selection.UNCERTAINTY_MODES:
            raise ValueError(f"uncertainty_mode must be one of {selection.UNCERTAINTY_MODES}")
        if self.K < 1 or self.tau <= 0 or self.steps_per_frame < 0 or self.frames < 2:
            raise ValueError("K >= 1, tau > 0, steps_per_frame >= 0 and frames >= 2 required")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# streams


class InstrumentedStream:
    """Pull-through wrapper that logs every frame handed out."""

    def __init__(self, frames: Iterable[Frame], events: list):
        self._it = iter(frames)
        self.events = events
        self.pulled = 0

    def __iter__(self):
        return self

    def __next__(self) -> Frame:
        f = next(self._it)
        self.events.append(("pull", f.frame_id))
        self.pulled += 1
        return f


def target_stream(cfg: RunConfig) -> Iterable[Frame]:
    if cfg.kitti_root:
        return iter(stream.KittiSequence(cfg.kitti_root))
    scene = stream.target_config(cfg.seed, frames=cfg.frames, **cfg.target)
    return iter(stream.SyntheticStream(scene))


def source_scene(cfg: RunConfig) -> stream.SceneConfig:
    return stream.source_config(cfg.seed, frames=cfg.source_frames + cfg.holdout_frames,
                                **cfg.source)


def descriptor_fn(cfg: RunConfig) -> Callable[[Frame], DescriptorField]:
    return lambda f: fpfh_descriptor(f, radius=cfg.descriptor_radius, normal_k=cfg.normal_k)


def _hash(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


# --------------------------------------------------------------------------
# per-frame quantities that depend only on the frame and the frozen source model


@dataclass
class SourceView:
    frame: Frame
    desc: DescriptorField
    x: np.ndarray
    pred: np.ndarray
    p_mean: np.ndarray
    stack: np.ndarray
    nu: np.ndarray
    feats: np.ndarray
    p_det: np.ndarray


class SourceCache:
    """Memoizes frozen-source results per frame id.

    All the randomness involved is keyed by (seed, frame id), so a cached
    view is identical to a recomputed one; runs that share a stream (e.g.
    the three ablation modes) can share the cache.
    """

    def __init__(self, model: segnet.SegModel, cfg: RunConfig):
        self.model = model
        self.cfg = cfg
        self.describe = descriptor_fn(cfg)
        self._views: dict = {}

    def view(self, f: Frame) -> SourceView:
        key = (f.frame_id, len(f))
        if key not in self._views:
            self._views[key] = self._compute(f)
        return self._views[key]

    def _compute(self, f: Frame) -> SourceView:
        cfg, m = self.cfg, self.model
        desc = self.describe(f)
        x = segnet.build_input_features(f, desc)
        logits, feats = segnet.forward_seg(m, x)
        rng = np.random.default_rng([cfg.seed, 3, f.frame_id])
        p, stack = selection.mc_mean_distribution(m, x, cfg.J, rng, p=cfg.dropout_p)
        nu = (selection.uncertainty_index(stack, cfg.uncertainty_mode)
              if cfg.J >= 2 or cfg.uncertainty_mode != selection.DROPOUT_VARIANCE
              else np.zeros(len(x)))
        return SourceView(f, desc, x, logits.value.argmax(axis=1) + 1, p, stack, nu,
                          feats.value, ad.softmax_rows(logits).value)


def select(view: SourceView, selector: str, a: float, C: int):
    """Seed pseudo-labels and per-class thresholds (NaN for selectors without one)."""
    if selector == "uncertainty":
        pred = selection.predicted_classes(view.p_mean)
        lam = selection.per_class_thresholds(view.nu, pred, a, C)
        return selection.select_seeds(view.p_mean, view.nu, lam, a), lam
    if selector == "confidence":
        return selection.confidence_select(view.p_mean, a), np.full(C, np.nan)
    if selector == "centroid":
        return selection.centroid_select(view.feats, view.p_mean, a), np.full(C, np.nan)
    raise ValueError(f"unknown selector {selector!r}")


# --------------------------------------------------------------------------
# online adaptation


@dataclass
class RunResult:
    records: list
    model: segnet.SegModel
    events: list
    source_checksum: str

    def mean_miou(self) -> float:
        return float(np.mean([r.miou for r in self.records]))

    def mean_source_miou(self) -> float:
        return float(np.mean([r.source_miou for r in self.records]))


def _frame_miou(labels, pred) -> tuple[np.ndarray, float]:
    cm = evalkit.confusion_matrix(labels, pred)
    if cm.sum() == 0:
        return np.full(cm.shape[0], np.nan), float("nan")
    return evalkit.iou(cm)


def run_adaptation(cfg: RunConfig, source_model: segnet.SegModel,
                   frames: Optional[Iterable[Frame]] = None,
                   cache: Optional[SourceCache] = None,
                   events: Optional[list] = None,
                   on_record: Optional[Callable] = None) -> RunResult:
    """Strict predict-then-adapt loop over a frame stream.

    Frame t is scored with the model adapted through frame t-1. From frame
    ``w`` on (or from the first frame with ``adapt_before_window``) the
    model then takes ``steps_per_frame`` Adam steps on the frame's loss.
    """
    cfg.validate()
    if source_model.cfg.dropout_p != cfg.dropout_p:
        source_model = source_model.copy()
        source_model.cfg = dataclasses.replace(source_model.cfg, dropout_p=cfg.dropout_p)
    checksum = source_model.checksum()
    events = [] if events is None else events
    cache = cache or SourceCache(source_model, cfg)
    frames = InstrumentedStream(target_stream(cfg) if frames is None else frames, events)

    model = source_model.copy()
    model.reset_heads(cfg.seed)
    use_reg = cfg.ablation in ("A+T", "A+T+P")
    use_prop = cfg.ablation == "A+T+P"
    params = model.seg_parameters() + (model.head_parameters() if use_reg else [])
    opt = ad.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    C = model.cfg.num_classes
    window: deque = deque(maxlen=cfg.w)
    records = []

    for t, f in enumerate(frames):
        tic = time.perf_counter()
        view = cache.view(f)
        if not f.has_labels:
            raise NoGroundTruth(f"frame {f.frame_id} has no labels to score")
        # (1) score with the model adapted so far, before anything else touches it
        pred = segnet.predict(model, view.x)
        events.append(("predict", f.frame_id, _hash(pred)))
        per_class, miou = _frame_miou(f.labels, pred)
        _, source_miou = _frame_miou(f.labels, view.pred)
        rec = evalkit.MetricRecord(f.frame_id, per_class, miou, source_miou)

        # (2) adapt on this frame
        ready = t >= cfg.w or cfg.adapt_before_window
        if ready and cfg.steps_per_frame > 0:
            pseudo, lam = select(view, cfg.selector, cfg.a, C)
            rec.thresholds = lam
            rec.seeds = pseudo.n_seeds
            if use_prop and len(pseudo):
                pseudo = propagation.propagate(
                    pseudo, view.desc, propagation.PropagationConfig(K=cfg.K), f.points)
            rec.propagated = pseudo.n_propagated
            corr = None
            if use_reg and len(window) == cfg.w:
                prev = window[0]
                T = relative_transform(prev.frame.pose, f.pose)
                corr = objective.find_correspondences(f, prev.frame, T, cfg.tau, cfg.w)
                rec.correspondences = len(corr)
                if len(corr) == 0:
                    events.append(("skip-reg", f.frame_id))
                    corr = None
            if len(pseudo) == 0:
                events.append(("skip-dice", f.frame_id))
            rng = np.random.default_rng([cfg.seed, 4, f.frame_id])
            for step in range(cfg.steps_per_frame):
                loss, dice, reg = _frame_loss(model, view, pseudo, corr, window,
                                              rng, cfg.train_dropout)
                if loss is None:
                    break
                grads = ad.grad(loss, params)
                ad.adam_step(params, grads, opt)
                events.append(("update", f.frame_id, step))
                rec.adapted = True
                if step == 0:
                    rec.loss_dice = dice
                    rec.loss_reg = reg
        window.append(view)
        rec.wall_ms = 1000.0 * (time.perf_counter() - tic)
        events.append(("record", f.frame_id))
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    if len(records) < cfg.w + 1:
        raise StreamTooShort(f"stream has {len(records)} frames, need at least w+1 = {cfg.w + 1}")
    if source_model.checksum() != checksum:
        raise RuntimeError("frozen source model was modified during the run")
    return RunResult(records, model, events, checksum)


def _frame_loss(model, view: SourceView, pseudo, corr, window, rng, dropout=True):
    terms = []
    dice = reg = float("nan")
    logits, feats = None, None
    if len(pseudo):
        feats = model.backbone_forward(view.x)
        logits = model.classify(feats, dropout, rng)
        d = objective.soft_dice_loss(logits, pseudo)
        dice = d.item()
        terms.append(d)
    if corr is not None:
        if feats is None:
            feats = model.backbone_forward(view.x)
        prev_feats = model.backbone_forward(window[0].x)
        z_t, q_t = segnet.forward_heads(model, feats)
        z_p, q_p = segnet.forward_heads(model, prev_feats)
        r = objective.temporal_loss(q_t, z_t, q_p, z_p, corr)
        reg = r.item()
        terms.append(r)
    if not terms:
        return None, dice, reg
    loss = terms[0] if len(terms) == 1 else objective.total_loss(terms[0], terms[1])
    return loss, dice, reg


def frozen_source_records(cfg: RunConfig, source_model: segnet.SegModel, **kw) -> RunResult:
    return run_adaptation(cfg.replace(steps_per_frame=0), source_model, **kw)


# --------------------------------------------------------------------------
# ablation, oracle study, sweeps


def run_ablation(cfg: RunConfig, source_model: segnet.SegModel, mode: str,
                 cache: Optional[SourceCache] = None, **kw) -> RunResult:
    mode = ABLATION_ALIASES.get(mode, mode)
    return run_adaptation(cfg.replace(ablation=mode), source_model, cache=cache, **kw)


def benchmark_config(seed: int, **overrides) -> RunConfig:
    return RunConfig(seed=seed, **{**BENCHMARK, **overrides})


def run_ablation_suite(cfg: RunConfig, source_model: segnet.SegModel,
                       modes=ABLATIONS, cache: Optional[SourceCache] = None) -> dict:
    """Mean mIoU of the frozen source and of each ablation mode on one stream."""
    cache = cache or SourceCache(source_model, cfg)
    out = {}
    for mode in modes:
        res = run_ablation(cfg, source_model, mode, cache=cache)
        out.setdefault("source", res.mean_source_miou())
        out[mode] = res.mean_miou()
    return out


def run_oracle_study(cfg: RunConfig, source_model: segnet.SegModel,
                     frames: Optional[Iterable[Frame]] = None,
                     selectors=SELECTORS, tops=(1, 10),
                     cache: Optional[SourceCache] = None) -> dict:
    """Pseudo-label accuracy (percent) per selector and Top-k, over a whole stream.

    Top-k keeps, per seed, the seed and its first k-1 propagated points.
    """
    cache = cache or SourceCache(source_model, cfg)
    C = source_model.cfg.num_classes
    counts = {s: {k: [0, 0] for k in tops} for s in selectors}
    K = max(max(tops) - 1, 1)
    for f in (target_stream(cfg) if frames is None else frames):
        if not f.has_labels:
            raise NoGroundTruth(f"frame {f.frame_id} has no labels")
        view = cache.view(f)
        for s in selectors:
            seeds, _ = select(view, s, cfg.a, C)
            if len(seeds) == 0:
                continue
            full = propagation.propagate(seeds, view.desc, propagation.PropagationConfig(K=K))
            for k in tops:
                c, n = evalkit.pseudo_label_counts(full, f.labels, k)
                counts[s][k][0] += c
                counts[s][k][1] += n
    return {s: {k: (100.0 * c / n if n else float("nan")) for k, (c, n) in v.items()}
            for s, v in counts.items()}


def run_sweep(cfg: RunConfig, source_model: segnet.SegModel, param: str, values) -> list[dict]:
    if param not in ("K", "w"):
        raise ValueError("sweep parameter must be K or w")
    rows = []
    cache = SourceCache(source_model, cfg)
    for v in values:
        res = run_adaptation(cfg.replace(**{param: type(getattr(cfg, param))(v)}), source_model,
                             cache=cache)
        rows.append({param: v, "mean_miou": res.mean_miou(),
                     "mean_source_miou": res.mean_source_miou(),
                     "mean_improvement": res.mean_miou() - res.mean_source_miou()})
    return rows


# --------------------------------------------------------------------------
# source pretraining


def pretrain(cfg: RunConfig, history: Optional[list] = None):
    """Train a source model on generator source frames; returns (model, held-out mIoU)."""
    scene = source_scene(cfg)
    gen = stream.SyntheticStream(scene)
    describe = descriptor_fn(cfg)
    samples = []
    for f in gen:
        samples.append((segnet.build_input_features(f, describe(f)), f.labels))
    train, held = samples[:cfg.source_frames], samples[cfg.source_frames:]
    m = segnet.SegModel(segnet.SegConfig(d_in=train[0][0].shape[1], dropout_p=cfg.dropout_p),
                        seed=cfg.seed)
    segnet.pretrain_source(m, train, cfg.epochs, np.random.default_rng([cfg.seed, 5]),
                           lr=cfg.pretrain_lr, weight_decay=cfg.pretrain_weight_decay,
                           mirror=cfg.pretrain_mirror, history=history)
    held_miou = float("nan")
    if held:
        cm = sum(evalkit.confusion_matrix(y, segnet.predict(m, x)) for x, y in held)
        held_miou = evalkit.iou(cm)[1]
    return m, held_miou


def write_run_outputs(res: RunResult, cfg: RunConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    evalkit.write_metrics_csv(res.records, out / "metrics.csv")
    evalkit.write_summary(evalkit.summarize(res.records, cfg.to_dict()), out / "summary.json")
    with open(out / "timing.csv", "w") as fh:
        fh.write("frame_id,wall_ms\n")
        for r in res.records:
            fh.write(f"{r.frame_id},{r.wall_ms:.3f}\n")
    segnet.save_checkpoint(res.model, out / "final.ckpt")
