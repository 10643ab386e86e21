"""Point-wise segmentation network with temporal-consistency heads.

The backbone is a stack of per-point affine+ReLU layers over descriptor
augmented inputs. A dropout layer sits right before the classifier, which
makes Monte-Carlo inference cheap: the backbone runs once and only the
dropout mask and classifier are resampled.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .descriptor import DescriptorField
from .geom import Frame

CHECKPOINT_VERSION = 1


class FrameDescriptorMismatch(ValueError):
    pass


class EmptyStream(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class SegConfig:
    d_in: int = 37
    widths: tuple = (64, 96, 96, 96)
    num_classes: int = 7
    head_dim: int = 128
    dropout_p: float = 0.5

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or min(self.widths) < 1:
            raise ValueError("backbone needs at least one layer of positive width")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def build_input_features(f: Frame, desc: DescriptorField) -> np.ndarray:
    """Centered xyz, height above the estimated ground level, then the descriptor."""
    if len(desc) != len(f) or desc.source_frame_id != f.frame_id:
        raise FrameDescriptorMismatch(
            f"descriptor field ({len(desc)} rows, frame {desc.source_frame_id}) "
            f"does not belong to frame {f.frame_id} ({len(f)} points)"
        )
    pts = f.points
    if len(pts) == 0:
        return np.zeros((0, 4 + desc.dim))
    centered = pts - pts.mean(axis=0)
    ground = np.percentile(pts[:, 2], 5.0)
    height = pts[:, 2:3] - ground
    return np.hstack([centered, height, desc.descriptors])


def _he(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))


@dataclass
class HeadBlock:
    W: ad.Tensor
    b: ad.Tensor
    gamma: ad.Tensor
    beta: ad.Tensor
    stats: ad.BatchNormStats

    def __call__(self, x, training=True):
        h = ad.relu(ad.affine(x, self.W, self.b))
        return ad.batch_norm(h, self.gamma, self.beta, self.stats, training=training)

    def params(self):
        return [self.W, self.b, self.gamma, self.beta]


class SegModel:
    def __init__(self, cfg: SegConfig = None, seed: int = 0):
        self.cfg = cfg or SegConfig()
        rng = np.random.default_rng([seed, 7])
        dims = (self.cfg.d_in,) + self.cfg.widths
        self.backbone = [
            (ad.parameter(_he(rng, a, b), f"backbone.{i}.W"), ad.parameter(np.zeros(b), f"backbone.{i}.b"))
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]
        C = self.cfg.num_classes
        self.classifier = (
            ad.parameter(rng.normal(0, np.sqrt(1.0 / dims[-1]), (dims[-1], C)), "classifier.W"),
            ad.parameter(np.zeros(C), "classifier.b"),
        )
        # frozen input standardization, fitted on source data before pretraining
        self.input_shift = np.zeros(self.cfg.d_in)
        self.input_scale = np.ones(self.cfg.d_in)
        self.reset_heads(seed)

    def reset_heads(self, seed: int = 0):
        rng = np.random.default_rng([seed, 11])
        H = self.cfg.head_dim

        def block(a, b, name):
            return HeadBlock(
                ad.parameter(_he(rng, a, b), f"{name}.W"), ad.parameter(np.zeros(b), f"{name}.b"),
                ad.parameter(np.ones(b), f"{name}.gamma"), ad.parameter(np.zeros(b), f"{name}.beta"),
                ad.BatchNormStats.fresh(b),
            )

        self.encoder_h = [block(self.cfg.widths[-1], H, "h.0"), block(H, H, "h.1")]
        self.predictor_f = [block(H, H, "f.0"), block(H, H, "f.1")]

    # -- parameter bookkeeping -------------------------------------------------

    def seg_parameters(self) -> list[ad.Tensor]:
        out = [p for layer in self.backbone for p in layer]
        return out + list(self.classifier)

    def head_parameters(self) -> list[ad.Tensor]:
        return [p for blk in self.encoder_h + self.predictor_f for p in blk.params()]

    def parameters(self) -> list[ad.Tensor]:
        return self.seg_parameters() + self.head_parameters()

    def state_dict(self) -> dict:
        state = {p.name: p.value.copy() for p in self.parameters()}
        state["input_shift"] = self.input_shift.copy()
        state["input_scale"] = self.input_scale.copy()
        for blk, name in zip(self.encoder_h + self.predictor_f, ("h.0", "h.1", "f.0", "f.1")):
            state[f"{name}.running_mean"] = blk.stats.running_mean.copy()
            state[f"{name}.running_var"] = blk.stats.running_var.copy()
        return state

    def load_state_dict(self, state: dict):
        for p in self.parameters():
            if state[p.name].shape != p.value.shape:
                raise CheckpointMismatch(f"{p.name}: {state[p.name].shape} vs {p.value.shape}")
            p.value = np.array(state[p.name], dtype=np.float64)
        self.input_shift = np.array(state["input_shift"], dtype=np.float64)
        self.input_scale = np.array(state["input_scale"], dtype=np.float64)
        for blk, name in zip(self.encoder_h + self.predictor_f, ("h.0", "h.1", "f.0", "f.1")):
            blk.stats.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
            blk.stats.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)

    def copy(self) -> "SegModel":
        other = SegModel(self.cfg)
        other.load_state_dict(self.state_dict())
        return other

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    # -- forward ------------------------------------------------------------------

    def backbone_forward(self, x) -> ad.Tensor:
        x = np.asarray(x.value if isinstance(x, ad.Tensor) else x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.cfg.d_in:
            raise ad.ShapeMismatch(f"input features {x.shape}, model expects (N, {self.cfg.d_in})")
        h = ad.Tensor((x - self.input_shift) / self.input_scale)
        for W, b in self.backbone:
            h = ad.relu(ad.affine(h, W, b))
        return h

    def classify(self, feats: ad.Tensor, dropout_enabled: bool, rng=None, p: Optional[float] = None):
        p = self.cfg.dropout_p if p is None else p
        h = ad.dropout(feats, p, rng, enabled=dropout_enabled)
        W, b = self.classifier
        return ad.affine(h, W, b)


def forward_seg(m: SegModel, x, dropout_enabled: bool = False, rng=None):
    """Return (logits N x C, backbone features N x widths[-1])."""
    feats = m.backbone_forward(x)
    return m.classify(feats, dropout_enabled, rng), feats


def forward_heads(m: SegModel, backbone_feats, training: bool = True):
    """z = h(features), q = f(z)."""
    feats = ad.as_tensor(backbone_feats)
    if feats.value.ndim != 2 or feats.shape[1] != m.cfg.widths[-1]:
        raise ad.ShapeMismatch(f"head input {feats.shape}, expected (N, {m.cfg.widths[-1]})")
    z = feats
    for blk in m.encoder_h:
        z = blk(z, training)
    q = z
    for blk in m.predictor_f:
        q = blk(q, training)
    return z, q


def predict(m: SegModel, x) -> np.ndarray:
    """Deterministic class ids (1..C) for every point."""
    logits, _ = forward_seg(m, x, dropout_enabled=False)
    return logits.value.argmax(axis=1) + 1


def fit_input_standardization(m: SegModel, feature_sets: Sequence[np.ndarray]):
    allx = np.vstack(feature_sets)
    m.input_shift = allx.mean(axis=0)
    scale = allx.std(axis=0)
    m.input_scale = np.where(scale > 1e-6, scale, 1.0)


def pretrain_source(m: SegModel, source_stream, epochs: int, rng: np.random.Generator,
                    lr: float = 0.01, lr_decay: float = 0.9, weight_decay: float = 1e-5,
                    batch_points: int = 1024, mirror: bool = False,
                    history: Optional[list] = None) -> SegModel:
    """Supervised cross-entropy training on labelled source samples.

    ``source_stream`` yields (features, labels) pairs with labels in 0..C;
    unlabelled points (0) are ignored. The network is point-wise, so each
    epoch shuffles the labelled points of all frames together and steps
    Adam once per ``batch_points`` points. The learning rate decays by
    ``lr_decay`` after every epoch. With ``mirror`` each point's centered
    x and y are sign-flipped at random (the scenes are symmetric about both
    axes). Per-epoch mean losses are appended to ``history`` when given.
    """
    data = [(np.asarray(x), np.asarray(y)) for x, y in source_stream]
    if not data:
        raise EmptyStream("no source samples")
    if epochs <= 0:
        return m
    fit_input_standardization(m, [x for x, _ in data])
    X = np.vstack([x for x, _ in data])
    Y = np.concatenate([y for _, y in data])
    X, Y = X[Y > 0], Y[Y > 0] - 1
    if len(Y) == 0:
        raise EmptyStream("source samples carry no labelled points")
    params = m.seg_parameters()
    state = ad.OptimizerState(lr=lr, weight_decay=weight_decay)
    for _ in range(epochs):
        losses = []
        order = rng.permutation(len(Y))
        for lo in range(0, len(order), batch_points):
            sel = order[lo:lo + batch_points]
            xb = X[sel]
            if mirror:
                xb = xb.copy()
                xb[:, :2] *= rng.choice([-1.0, 1.0], size=(len(sel), 2))
            logits, _ = forward_seg(m, xb, dropout_enabled=True, rng=rng)
            loss = ad.cross_entropy(logits, Y[sel])
            grads = ad.grad(loss, params)
            ad.adam_step(params, grads, state)
            losses.append(loss.item())
        state.lr *= lr_decay
        if history is not None:
            history.append(float(np.mean(losses)))
    return m


def save_checkpoint(m: SegModel, path, extra: Optional[dict] = None):
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(m.cfg), "config_hash": m.cfg.digest(),
            "extra": extra or {}}
    arrays = m.state_dict()
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> SegModel:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointMismatch(f"unsupported checkpoint version {meta.get('version')}")
        cfg = SegConfig(**meta["config"])
        if cfg.digest() != meta["config_hash"]:
            raise CheckpointMismatch("config hash does not match stored config")
        state = {k: z[k] for k in z.files if k != "__meta__"}
    m = SegModel(cfg)
    m.load_state_dict(state)
    return m
