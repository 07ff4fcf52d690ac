"""Model zoo: the dense-conv/LSTM/highway classifier and the four benchmark
architectures it is compared against.

All models consume normalized log-spectrogram segments shaped
(batch, 1, n_bins, n_frames) and produce class posteriors.  ``forward``
returns softmax outputs; ``logits`` exposes the pre-softmax scores the
training loss and the adversarial attacks need.

Dense connectivity: layer l inside a block sees the concatenation of the
block input and every preceding layer's output, so a block entered with C_in
channels and L layers of growth G leaves with C_in + L * G channels.  Each
in-block composite is BN -> ReLU -> 3x3 conv (same padding).  Transitions
between blocks are BN -> 1x1 conv (compression 0.5) -> 2x2 average pool.

Highway layers gate their own transform against an identity path:

    y = H(x) * T(x) + x * C(x)

with T and C logistic-sigmoid gates (independent by default, C = 1 - T in
coupled mode), H a ReLU-activated affine map, and the transform-gate bias
initialized to -1 so fresh layers start carry-dominant.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import (BadConfig, NonFiniteActivation, NonFiniteLoss,
                     ShapeMismatch)

ARCHITECTURES = ("proposed", "cnn", "cnn_lstm", "densenet", "densenet_lstm")

# Eval-mode batch norm uses running statistics accumulated as
# 0.99 * old + 0.01 * batch (torch expresses this as momentum=0.01).
BN_MOMENTUM = 0.01


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "proposed"
    n_classes: int = 4
    in_bins: int = 128
    in_frames: int = 256
    init_channels: int = 24
    blocks: tuple[tuple[int, int], ...] = ((6, 24), (6, 24))
    compression: float = 0.5
    lstm_units: int = 128
    highway_layers: int = 3
    highway_dim: int = 128
    coupled_gates: bool = False
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise BadConfig(f"unknown architecture {self.arch!r}, "
                            f"expected one of {ARCHITECTURES}")
        if self.n_classes < 2:
            raise BadConfig(f"n_classes must be >= 2, got {self.n_classes}")
        if self.in_bins < 8 or self.in_frames < 8:
            raise BadConfig(f"input plane too small: "
                            f"{self.in_bins}x{self.in_frames}")
        if not self.blocks or any(n < 1 or g < 1 for n, g in self.blocks):
            raise BadConfig(f"blocks must be non-empty (n_layers, growth) "
                            f"pairs with positive entries, got {self.blocks}")
        if not 0.0 < self.compression <= 1.0:
            raise BadConfig(f"compression must be in (0, 1], "
                            f"got {self.compression}")
        if not 0.0 <= self.dropout < 1.0:
            raise BadConfig(f"dropout must be in [0, 1), got {self.dropout}")
        if self.lstm_units < 1 or self.init_channels < 1:
            raise BadConfig("lstm_units and init_channels must be positive")
        if self.highway_layers < 0 or self.highway_dim < 1:
            raise BadConfig("bad highway head configuration")

    @classmethod
    def for_arch(cls, arch: str, **overrides) -> "ModelConfig":
        """Canonical configuration per architecture.

        The dense benchmarks use three blocks of six layers at growth 16;
        the proposed model uses two blocks of six layers at growth 24.
        """
        defaults: dict = {}
        if arch in ("densenet", "densenet_lstm"):
            defaults["blocks"] = ((6, 16), (6, 16), (6, 16))
        defaults.update(overrides)
        return cls(arch=arch, **defaults)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "n_classes": self.n_classes,
            "in_bins": self.in_bins,
            "in_frames": self.in_frames,
            "init_channels": self.init_channels,
            "blocks": [list(b) for b in self.blocks],
            "compression": self.compression,
            "lstm_units": self.lstm_units,
            "highway_layers": self.highway_layers,
            "highway_dim": self.highway_dim,
            "coupled_gates": self.coupled_gates,
            "dropout": self.dropout,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["blocks"] = tuple(tuple(b) for b in d["blocks"])
        return cls(**d)


def dense_block_out_channels(in_channels: int, n_layers: int, growth: int) -> int:
    """Channel count leaving a dense block."""
    return in_channels + n_layers * growth


def reshape_to_sequence(x: torch.Tensor) -> torch.Tensor:
    """(N, C, F, T) feature maps -> (N, T, F*C) sequence.

    The time axis becomes the sequence axis; each step is the flattened
    frequency-by-channel slice at that time.  Bijective: no values are
    created or lost.
    """
    if x.dim() != 4:
        raise ShapeMismatch(f"expected a 4-d (N, C, F, T) tensor, "
                            f"got {tuple(x.shape)}")
    n, c, f, t = x.shape
    return x.permute(0, 3, 2, 1).reshape(n, t, f * c)


def sequence_to_maps(seq: torch.Tensor, n_freq: int) -> torch.Tensor:
    """Inverse of reshape_to_sequence given the frequency height."""
    n, t, d = seq.shape
    return seq.reshape(n, t, n_freq, d // n_freq).permute(0, 3, 2, 1)


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -sum_c target_c * log softmax(logits)_c.

    With one-hot targets this is the standard cross-entropy; mixup's soft
    labels plug in unchanged.
    """
    return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def loss_and_grads(model, x: torch.Tensor, soft_labels: torch.Tensor):
    """Cross-entropy loss and per-parameter gradients for one batch.

    Returns (loss: float, grads: {parameter name: tensor}).  Raises
    NonFiniteLoss when the loss is NaN or infinite.
    """
    loss = soft_cross_entropy(model.logits(x), soft_labels)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()}")
    names, params = zip(*[(n, p) for n, p in model.named_parameters()
                          if p.requires_grad])
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    zero = {n: (g if g is not None else torch.zeros_like(p))
            for n, p, g in zip(names, params, grads)}
    return float(loss.detach()), zero


class _DenseLayer(nn.Module):
    """Composite function: BN -> ReLU -> 3x3 same-padded conv."""

    def __init__(self, in_channels: int, growth: int):
        super().__init__()
        self.norm = nn.BatchNorm2d(in_channels, momentum=BN_MOMENTUM)
        self.conv = nn.Conv2d(in_channels, growth, kernel_size=3, padding=1)

    def forward(self, x):
        return self.conv(torch.relu(self.norm(x)))


class DenseBlock(nn.Module):
    def __init__(self, in_channels: int, n_layers: int, growth: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = dense_block_out_channels(in_channels, n_layers, growth)
        self.layers = nn.ModuleList(
            _DenseLayer(in_channels + i * growth, growth)
            for i in range(n_layers))

    def forward(self, x):
        features = [x]
        for layer in self.layers:
            features.append(layer(torch.cat(features, dim=1)))
        return torch.cat(features, dim=1)


class Transition(nn.Module):
    """BN -> 1x1 conv (floor(compression * C) channels) -> 2x2 avg pool."""

    def __init__(self, in_channels: int, compression: float):
        super().__init__()
        self.out_channels = max(1, int(in_channels * compression))
        self.norm = nn.BatchNorm2d(in_channels, momentum=BN_MOMENTUM)
        self.conv = nn.Conv2d(in_channels, self.out_channels, kernel_size=1)
        self.pool = nn.AvgPool2d(kernel_size=2, stride=2)

    def forward(self, x):
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ShapeMismatch(f"transition needs spatial dims >= 2, "
                                f"got {x.shape[2]}x{x.shape[3]}")
        return self.pool(self.conv(self.norm(x)))


class HighwayLayer(nn.Module):
    def __init__(self, dim: int, coupled: bool = False):
        super().__init__()
        self.coupled = coupled
        self.content = nn.Linear(dim, dim)
        self.transform_gate = nn.Linear(dim, dim)
        self.carry_gate = None if coupled else nn.Linear(dim, dim)

    def forward(self, x):
        if x.shape[-1] != self.content.in_features:
            raise ShapeMismatch(f"highway layer expects dim "
                                f"{self.content.in_features}, got {x.shape[-1]}")
        h = torch.relu(self.content(x))
        t = torch.sigmoid(self.transform_gate(x))
        c = 1.0 - t if self.coupled else torch.sigmoid(self.carry_gate(x))
        return h * t + x * c


class _DenseTrunk(nn.Module):
    """Strided-conv stem, dense blocks joined by transitions.

    The stem is a 3x3 stride-2 convolution followed by a 2x2 max pool.  The
    extra pool is a throughput concession: without it, training the default
    model on the acceptance fixture takes roughly four times the stated
    budget on a single CPU core.  Channel counts are unaffected.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.conv0 = nn.Conv2d(1, config.init_channels, kernel_size=3,
                               stride=2, padding=1)
        self.pool0 = nn.MaxPool2d(kernel_size=2, stride=2)
        height = (config.in_bins + 1) // 2 // 2
        width = (config.in_frames + 1) // 2 // 2
        channels = config.init_channels
        stages = []
        self.block_channels = []
        for i, (n_layers, growth) in enumerate(config.blocks):
            block = DenseBlock(channels, n_layers, growth)
            stages.append(block)
            channels = block.out_channels
            self.block_channels.append(channels)
            if i < len(config.blocks) - 1:
                trans = Transition(channels, config.compression)
                stages.append(trans)
                channels = trans.out_channels
                height //= 2
                width //= 2
        self.stages = nn.ModuleList(stages)
        self.out_channels = channels
        self.out_height = height
        self.out_width = width

    def forward(self, x):
        x = self.pool0(self.conv0(x))
        block_outputs = []
        for stage in self.stages:
            x = stage(x)
            if isinstance(stage, DenseBlock):
                block_outputs.append(x)
        return x, block_outputs


class _BaseClassifier(nn.Module):
    """Shared input validation and the logits/posterior split."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.normalizer = None

    def _check_input(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeMismatch(f"expected (N, 1, {self.config.in_bins}, "
                                f"{self.config.in_frames}), got {tuple(x.shape)}")
        if x.shape[2] != self.config.in_bins or x.shape[3] != self.config.in_frames:
            raise ShapeMismatch(f"expected {self.config.in_bins}x"
                                f"{self.config.in_frames} input plane, got "
                                f"{x.shape[2]}x{x.shape[3]}")
        return x

    def logits(self, x):
        x = self._check_input(x)
        out = self._score(x)
        if not torch.isfinite(out).all():
            raise NonFiniteActivation(
                f"{self.config.arch}: non-finite values in class scores")
        return out

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


class ProposedNet(_BaseClassifier):
    """Dense-conv trunk -> sequence LSTM summary (dropout 0.5) concatenated
    with pooled-and-projected skip features from each block -> affine to the
    highway width -> highway stack -> softmax."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.trunk = _DenseTrunk(config)
        seq_feat = self.trunk.out_channels * self.trunk.out_height
        self.lstm = nn.LSTM(seq_feat, config.lstm_units, batch_first=True)
        self.drop = nn.Dropout(config.dropout)
        self.skip_proj = nn.ModuleList(
            nn.Linear(c, config.lstm_units) for c in self.trunk.block_channels)
        self.fuse = nn.Linear(2 * config.lstm_units, config.highway_dim)
        self.highway = nn.ModuleList(
            HighwayLayer(config.highway_dim, config.coupled_gates)
            for _ in range(config.highway_layers))
        self.classifier = nn.Linear(config.highway_dim, config.n_classes)

    def skip_aggregate(self, block_outputs) -> torch.Tensor:
        """Pool each block output over (freq, time), project to the LSTM
        width, and sum elementwise."""
        return sum(proj(out.mean(dim=(2, 3)))
                   for proj, out in zip(self.skip_proj, block_outputs))

    def _score(self, x):
        feat, block_outputs = self.trunk(x)
        lstm_out, _ = self.lstm(reshape_to_sequence(feat))
        summary = self.drop(lstm_out[:, -1, :])
        skip = self.skip_aggregate(block_outputs)
        fused = torch.relu(self.fuse(torch.cat([summary, skip], dim=1)))
        for layer in self.highway:
            fused = layer(fused)
        return self.classifier(fused)


class DenseNetClassifier(_BaseClassifier):
    """Dense-conv trunk, global average pooling, 1000-unit affine head."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.trunk = _DenseTrunk(config)
        self.fc = nn.Linear(self.trunk.out_channels, 1000)
        self.drop = nn.Dropout(config.dropout)
        self.classifier = nn.Linear(1000, config.n_classes)

    def _score(self, x):
        feat, _ = self.trunk(x)
        pooled = feat.mean(dim=(2, 3))
        return self.classifier(self.drop(torch.relu(self.fc(pooled))))


class DenseNetLSTMClassifier(_BaseClassifier):
    """Dense-conv trunk with the pooled readout swapped for an LSTM over
    time; keeps the 1000-unit affine head."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.trunk = _DenseTrunk(config)
        seq_feat = self.trunk.out_channels * self.trunk.out_height
        self.lstm = nn.LSTM(seq_feat, config.lstm_units, batch_first=True)
        self.fc = nn.Linear(config.lstm_units, 1000)
        self.drop = nn.Dropout(config.dropout)
        self.classifier = nn.Linear(1000, config.n_classes)

    def _score(self, x):
        feat, _ = self.trunk(x)
        lstm_out, _ = self.lstm(reshape_to_sequence(feat))
        summary = self.drop(lstm_out[:, -1, :])
        return self.classifier(self.drop(torch.relu(self.fc(summary))))


class _PlainConvTrunk(nn.Module):
    """Three strided conv/BN/ReLU stages: 16, 32, 64 channels, /8 spatial."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, 16, kernel_size=5, stride=2, padding=2),
            nn.BatchNorm2d(16, momentum=BN_MOMENTUM), nn.ReLU(),
            nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1),
            nn.BatchNorm2d(32, momentum=BN_MOMENTUM), nn.ReLU(),
            nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1),
            nn.BatchNorm2d(64, momentum=BN_MOMENTUM), nn.ReLU(),
        )
        self.out_channels = 64

    def forward(self, x):
        return self.net(x)


class CNNClassifier(_BaseClassifier):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.trunk = _PlainConvTrunk()
        height = -(-config.in_bins // 8)
        width = -(-config.in_frames // 8)
        self.drop = nn.Dropout(config.dropout)
        self.fc = nn.Linear(64 * height * width, 128)
        self.classifier = nn.Linear(128, config.n_classes)

    def _score(self, x):
        feat = self.trunk(x).flatten(1)
        return self.classifier(self.drop(torch.relu(self.fc(feat))))


class CNNLSTMClassifier(_BaseClassifier):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.trunk = _PlainConvTrunk()
        height = -(-config.in_bins // 8)
        self.lstm = nn.LSTM(64 * height, config.lstm_units, batch_first=True)
        self.drop = nn.Dropout(config.dropout)
        self.classifier = nn.Linear(config.lstm_units, config.n_classes)

    def _score(self, x):
        feat = self.trunk(x)
        lstm_out, _ = self.lstm(reshape_to_sequence(feat))
        return self.classifier(self.drop(lstm_out[:, -1, :]))


_ARCH_CLASSES = {
    "proposed": ProposedNet,
    "cnn": CNNClassifier,
    "cnn_lstm": CNNLSTMClassifier,
    "densenet": DenseNetClassifier,
    "densenet_lstm": DenseNetLSTMClassifier,
}


def _init_weights(module):
    if isinstance(module, (nn.Conv2d, nn.Linear)):
        nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LSTM):
        for name, param in module.named_parameters():
            if name.startswith("weight_hh"):
                nn.init.orthogonal_(param)
            elif name.startswith("weight_ih"):
                nn.init.kaiming_normal_(param, nonlinearity="relu")
            else:
                nn.init.zeros_(param)
    elif isinstance(module, HighwayLayer):
        nn.init.constant_(module.transform_gate.bias, -1.0)
        if module.carry_gate is not None:
            nn.init.zeros_(module.carry_gate.bias)


def build_model(config: ModelConfig) -> _BaseClassifier:
    """Construct and initialize a model without disturbing the global RNG.

    Initialization: He-normal conv/affine weights, orthogonal LSTM
    recurrence matrices, zero biases except highway transform gates (-1).
    """
    with torch.random.fork_rng(devices=()):
        torch.manual_seed(config.seed)
        model = _ARCH_CLASSES[config.arch](config)
        model.apply(_init_weights)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


@contextlib.contextmanager
def evaluation_mode(model: nn.Module):
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield model
    finally:
        model.train(was_training)
