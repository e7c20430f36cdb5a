"""Spatio-temporal violence classifier.

Two spatial streams (frame t and frame t-1), each a VGG-19 convolutional
trunk tapped at conv4 of block 5 and followed by a wide dense residual block
(WDRB), feed an LSTM over consecutive frame pairs; an affine layer and a
softmax give P(non-violent), P(violent).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import CheckpointArchive
from .errors import InvalidConfig, NonFiniteLoss, ShapeError, TooFewFrames
from .metrics import PRF, ConfusionMatrix, precision_recall_f1
from .nn_utils import he_uniform_, load_module_tensors, module_tensors, seeded_generator
from .stage1 import TrainLog, cross_entropy

log = logging.getLogger(__name__)

VGG19_CONVS = (2, 2, 4, 4, 4)


def _from_dict(cls, d: dict):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise InvalidConfig(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class Vgg19Spec:
    widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    convs: tuple[int, ...] = VGG19_CONVS
    in_channels: int = 3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.convs = tuple(int(c) for c in self.convs)
        if len(self.widths) != 5 or self.convs != VGG19_CONVS:
            raise InvalidConfig("VGG-19 trunk has 5 blocks with (2, 2, 4, 4, 4) convolutions")

    from_dict = classmethod(_from_dict)


@dataclass
class WdrbSpec:
    layers: int = 2
    widen_factor: int = 2

    def __post_init__(self):
        if self.layers < 1 or self.widen_factor < 1:
            raise InvalidConfig("WDRB needs >= 1 layer and widen_factor >= 1")

    from_dict = classmethod(_from_dict)


@dataclass
class LstmSpec:
    hidden: int = 256
    dropout: float = 0.2

    def __post_init__(self):
        if self.hidden < 1 or not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("LSTM needs hidden >= 1 and dropout in [0, 1)")

    from_dict = classmethod(_from_dict)


@dataclass
class AnomalyTrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 8
    share_streams: bool = False

    def __post_init__(self):
        if not self.lr >= 0 or self.epochs < 0 or self.batch_size < 1:
            raise InvalidConfig("need lr >= 0, epochs >= 0, batch_size >= 1")

    from_dict = classmethod(_from_dict)


@dataclass
class AnomalyModelSpec:
    vgg: Vgg19Spec = field(default_factory=Vgg19Spec)
    wdrb: WdrbSpec = field(default_factory=WdrbSpec)
    lstm: LstmSpec = field(default_factory=LstmSpec)
    share_streams: bool = False

    @classmethod
    def tiny(cls, share_streams: bool = False, hidden: int = 16) -> "AnomalyModelSpec":
        return cls(Vgg19Spec((4, 4, 8, 8, 8)), WdrbSpec(2, 2), LstmSpec(hidden, 0.2), share_streams)

    def to_dict(self) -> dict:
        return asdict(self)


class VggTrunk(nn.Module):
    """Blocks 1-4 end in 2x2 max pooling; block 5 stops after its conv4."""

    def __init__(self, spec: Vgg19Spec):
        super().__init__()
        c = spec.in_channels
        for b, (w, n) in enumerate(zip(spec.widths, spec.convs), start=1):
            block = nn.Module()
            for l in range(1, n + 1):
                block.add_module(f"conv{l}", nn.Conv2d(c, w, 3, padding=1))
                c = w
            self.add_module(f"block{b}", block)
        self.out_channels = c

    def forward(self, x):
        blocks = list(self.children())
        for i, block in enumerate(blocks):
            for conv in block.children():
                x = F.relu(conv(x))
            if i < len(blocks) - 1:
                x = F.max_pool2d(x, 2)
        return x


class WDRB(nn.Module):
    """Densely connected conv-BN-ReLU layers plus a 1x1 projected skip,
    globally average-pooled to a vector."""

    def __init__(self, in_channels: int, spec: WdrbSpec):
        super().__init__()
        width = spec.widen_factor * in_channels
        c = in_channels
        for l in range(1, spec.layers + 1):
            layer = nn.Module()
            layer.conv = nn.Conv2d(c, width, 3, padding=1)
            layer.bn = nn.BatchNorm2d(width)
            self.add_module(f"layer{l}", layer)
            c += width
        self.proj = nn.Conv2d(in_channels, width, 1)
        self.out_features = width

    def forward(self, x):
        feats = [x]
        out = x
        for name, layer in self.named_children():
            if name.startswith("layer"):
                out = F.relu(layer.bn(layer.conv(torch.cat(feats, dim=1))))
                feats.append(out)
        return (out + self.proj(x)).mean(dim=(2, 3))


class MaskedLSTM(nn.Module):
    """Single-layer LSTM whose state is frozen on masked-out steps."""

    def __init__(self, in_features: int, spec: LstmSpec):
        super().__init__()
        self.hidden = spec.hidden
        self.dropout = spec.dropout
        self.x2h = nn.Linear(in_features, 4 * spec.hidden)
        self.h2h = nn.Linear(spec.hidden, 4 * spec.hidden, bias=False)

    def cell(self, x, h, c):
        z = self.x2h(x) + self.h2h(h)
        zi, zf, zg, zo = z.chunk(4, dim=-1)
        i, f, o = torch.sigmoid(zi), torch.sigmoid(zf), torch.sigmoid(zo)
        c_new = f * c + i * torch.tanh(zg)
        h_new = o * torch.tanh(c_new)
        return h_new, c_new, (i, f, o)

    def forward(self, seq, mask, return_trace: bool = False, gate_hook=None):
        """``seq`` is B x S x F, ``mask`` B x S; returns the last valid h."""
        b, s, _ = seq.shape
        h = seq.new_zeros(b, self.hidden)
        c = seq.new_zeros(b, self.hidden)
        trace = []
        if self.training and self.dropout > 0:
            seq = F.dropout(seq, self.dropout, training=True)
        for t in range(s):
            h_new, c_new, gates = self.cell(seq[:, t], h, c)
            if gate_hook is not None:
                gate_hook(gates)
            m = mask[:, t].to(seq.dtype)[:, None]
            h = m * h_new + (1 - m) * h
            c = m * c_new + (1 - m) * c
            trace.append(h)
        if return_trace:
            return h, torch.stack(trace, dim=1) if trace else seq.new_zeros(b, 0, self.hidden)
        return h


class AnomalyNet(nn.Module):
    def __init__(self, spec: AnomalyModelSpec):
        super().__init__()
        self.spec = spec
        self.vgg = VggTrunk(spec.vgg)
        self.wdrb = WDRB(self.vgg.out_channels, spec.wdrb)
        if not spec.share_streams:
            self.vgg_prev = VggTrunk(spec.vgg)
            self.wdrb_prev = WDRB(self.vgg.out_channels, spec.wdrb)
        self.lstm = MaskedLSTM(2 * self.wdrb.out_features, spec.lstm)
        self.classifier = nn.Linear(spec.lstm.hidden, 2)
        self.frozen_backbone = False

    @property
    def streams(self):
        if self.spec.share_streams:
            return (self.vgg, self.wdrb), (self.vgg, self.wdrb)
        return (self.vgg, self.wdrb), (self.vgg_prev, self.wdrb_prev)

    def freeze_backbone(self) -> None:
        self.frozen_backbone = True
        for vgg, _ in self.streams:
            vgg.requires_grad_(False)

    def stream_features(self, stream, frames, chunk: int = 64):
        vgg, wdrb = stream
        parts = []
        for i in range(0, frames.shape[0], chunk):
            if self.frozen_backbone:
                with torch.no_grad():
                    parts.append(vgg(frames[i:i + chunk]))
            else:
                parts.append(vgg(frames[i:i + chunk]))
        return wdrb(torch.cat(parts, dim=0))

    def pair_features(self, frames_t, frames_tm1):
        """N x 3 x H x W pairs -> N x 2W concatenated stream vectors."""
        stream_t, stream_tm1 = self.streams
        return torch.cat(
            [self.stream_features(stream_t, frames_t), self.stream_features(stream_tm1, frames_tm1)], dim=1
        )

    def forward(self, frames, valid, return_trace: bool = False):
        """``frames`` B x T x H x W x 3 (channels last), ``valid`` B x T."""
        frames = torch.as_tensor(frames)
        valid = torch.as_tensor(valid, dtype=torch.bool)
        if frames.ndim != 5:
            raise ShapeError(f"expected B x T x H x W x C clips, got {tuple(frames.shape)}")
        if (valid.sum(dim=1) < 2).any():
            raise TooFewFrames("every clip needs at least 2 valid frames")
        frames = frames.to(self.classifier.weight.dtype)
        b, t = valid.shape
        pair_mask = valid[:, 1:] & valid[:, :-1]
        bi, ti = torch.nonzero(pair_mask, as_tuple=True)
        cur = frames[bi, ti + 1].permute(0, 3, 1, 2)
        prev = frames[bi, ti].permute(0, 3, 1, 2)
        feats = self.pair_features(cur, prev)
        seq = feats.new_zeros(b, t - 1, feats.shape[1])
        seq = seq.index_put((bi, ti), feats)
        out = self.lstm(seq, pair_mask, return_trace=return_trace)
        if return_trace:
            h, trace = out
            return self.classifier(h), self.classifier(trace)
        return self.classifier(out)


def build_anomaly_model(spec: AnomalyModelSpec | None = None, seed: int = 0,
                        pretrained: CheckpointArchive | None = None) -> AnomalyNet:
    spec = spec or AnomalyModelSpec()
    model = AnomalyNet(spec)
    g = seeded_generator(seed)
    he_uniform_(model, g)
    bound = 1.0 / math.sqrt(spec.lstm.hidden)
    for lin in (model.lstm.x2h, model.lstm.h2h):
        nn.init.uniform_(lin.weight, -bound, bound, generator=g)
    nn.init.zeros_(model.lstm.x2h.bias)
    nn.init.xavier_uniform_(model.classifier.weight, generator=g)
    nn.init.zeros_(model.classifier.bias)
    if pretrained is not None:
        for vgg, _ in model.streams:
            load_module_tensors(vgg, pretrained, "vgg")
        model.freeze_backbone()
    return model


def vgg_archive(spec: Vgg19Spec, seed: int = 0) -> CheckpointArchive:
    """A stand-in backbone file in the pretrained-weights layout."""
    trunk = VggTrunk(spec)
    he_uniform_(trunk, seeded_generator(seed))
    return CheckpointArchive.from_items(module_tensors(trunk, "vgg"), {"stage": "vgg"})


def spatial_forward(model: AnomalyNet, frame_t, frame_tm1) -> torch.Tensor:
    """One H x W x 3 frame pair -> concatenated stream vector."""
    ft = torch.as_tensor(np.asarray(frame_t) if not isinstance(frame_t, torch.Tensor) else frame_t)
    fp = torch.as_tensor(np.asarray(frame_tm1) if not isinstance(frame_tm1, torch.Tensor) else frame_tm1)
    if ft.shape != fp.shape or ft.ndim != 3:
        raise ShapeError(f"frame shapes {tuple(ft.shape)} and {tuple(fp.shape)} must match as H x W x C")
    dtype = model.classifier.weight.dtype
    ft = ft.to(dtype).permute(2, 0, 1)[None]
    fp = fp.to(dtype).permute(2, 0, 1)[None]
    return model.pair_features(ft, fp)[0]


def temporal_forward(model: AnomalyNet, pair_feats, mask) -> torch.Tensor:
    """Pair features S x F (or B x S x F) with a contiguous-prefix mask."""
    seq = torch.as_tensor(pair_feats)
    m = torch.as_tensor(mask, dtype=torch.bool)
    squeeze = seq.ndim == 2
    if squeeze:
        seq, m = seq[None], m[None]
    if m.sum(dim=1).min() < 1:
        raise TooFewFrames("need at least one valid frame pair")
    h = model.lstm(seq.to(model.classifier.weight.dtype), m)
    return h[0] if squeeze else h


def classify(model: AnomalyNet, hidden) -> torch.Tensor:
    logits = model.classifier(torch.as_tensor(hidden).to(model.classifier.weight.dtype))
    return torch.softmax(logits, dim=-1)


def anomaly_archive(model: AnomalyNet, metadata: dict) -> CheckpointArchive:
    return CheckpointArchive.from_items(module_tensors(model, ""), {k: str(v) for k, v in metadata.items()})


def load_anomaly_model(archive: CheckpointArchive, spec: AnomalyModelSpec) -> AnomalyNet:
    model = AnomalyNet(spec)
    load_module_tensors(model, archive, "")
    return model


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def train_anomaly(dataset, config: AnomalyTrainConfig | None = None, spec: AnomalyModelSpec | None = None,
                  seed: int = 0, pretrained: CheckpointArchive | None = None, model: AnomalyNet | None = None):
    """Adam on clip-level cross-entropy; returns ``(archive, log, model)``.

    The log has one row per epoch: mean training loss and accuracy.
    """
    config = config or AnomalyTrainConfig()
    spec = spec or AnomalyModelSpec(share_streams=config.share_streams)
    init_seed, data_seed, drop_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(3))
    if model is None:
        model = build_anomaly_model(spec, init_seed, pretrained)
    if (np.asarray(dataset.mask).sum(axis=1) < 2).any():
        raise TooFewFrames("every clip needs at least 2 valid frames")
    rng = np.random.default_rng(data_seed)
    torch.manual_seed(drop_seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    trace = TrainLog(("epoch", "loss", "acc"))
    for epoch in range(1, config.epochs + 1):
        model.train()
        if model.frozen_backbone:
            for vgg, _ in model.streams:
                vgg.eval()
        total_loss, correct = 0.0, 0
        for idx in _batches(len(dataset.Y), config.batch_size, rng):
            logits = model(torch.from_numpy(dataset.X[idx]), torch.from_numpy(dataset.mask[idx]))
            labels = torch.from_numpy(np.asarray(dataset.Y[idx], dtype=np.int64))
            loss = cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"anomaly loss became {loss.item()} in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += float(loss.item()) * len(idx)
            correct += int((logits.argmax(1) == labels).sum())
        n = len(dataset.Y)
        trace.append(epoch, total_loss / n, correct / n)
        log.info("anomaly epoch %d loss %.4f acc %.3f", epoch, total_loss / n, correct / n)
    archive = anomaly_archive(model, {"seed": seed, "stage": "anomaly", "epochs": config.epochs})
    return archive, trace, model


@dataclass
class AnomalyEval:
    confusion: ConfusionMatrix
    scores: PRF
    probabilities: np.ndarray

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.as_rows(),
            "precision": self.scores.precision,
            "recall": self.scores.recall,
            "f1": self.scores.f1,
            "degenerate": list(self.scores.degenerate),
        }


@torch.no_grad()
def predict_violence(model: AnomalyNet, dataset, batch_size: int = 8) -> np.ndarray:
    model.eval()
    probs = []
    for i in range(0, len(dataset.Y), batch_size):
        logits = model(torch.from_numpy(dataset.X[i:i + batch_size]), torch.from_numpy(dataset.mask[i:i + batch_size]))
        probs.append(torch.softmax(logits.double(), dim=1)[:, 1].numpy())
    return np.concatenate(probs) if probs else np.zeros(0)


def evaluate_predictions(prob_violent, labels, threshold: float = 0.5) -> AnomalyEval:
    prob_violent = np.asarray(prob_violent, dtype=np.float64)
    cm = ConfusionMatrix.from_labels((prob_violent >= threshold).astype(int), labels)
    return AnomalyEval(cm, precision_recall_f1(cm), prob_violent)


def evaluate_anomaly(model: AnomalyNet, dataset, threshold: float = 0.5) -> AnomalyEval:
    return evaluate_predictions(predict_violence(model, dataset), dataset.Y, threshold)


@torch.no_grad()
def frame_scores(model: AnomalyNet, frames, valid) -> np.ndarray:
    """Per-step violent probability from each step's hidden state."""
    model.eval()
    _, step_logits = model(frames, valid, return_trace=True)
    return torch.softmax(step_logits.double(), dim=-1)[..., 1].numpy()
