"""Four-part 2D U-Net: encoder, decoder, classifier head and adversary head.

Block layout (``depth`` resolution levels, ``b = base_width``)::

    encoder.0   conv(in->b), conv(b->b)                 H x W
    encoder.i   maxpool, conv, conv                     H/2^i      (i = 1..depth-1)
    decoder.j   upconv, concat skip, conv, conv         (j = 0..depth-3)
    decoder.d   upconv to H x W, concat skip            (d = depth-2, no convs)
    classifier  conv(2b->b), conv(b->b), conv1x1(b->K)  H x W
    adversary   same architecture as classifier

The encoder/decoder trunk (psi) maps an image batch to features of shape
``(B, 2b, H, W)``; both heads consume these features.
"""
from __future__ import annotations

import copy
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

PARTS = ("encoder", "decoder", "classifier", "adversary")


class InvalidConfigError(ValueError):
    pass


class UnknownBlockError(KeyError):
    pass


class ShapeMismatchError(ValueError):
    pass


class IncompatibleCheckpointError(ValueError):
    pass


@dataclass
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 3
    base_width: int = 64
    depth: int = 5
    input_size: tuple[int, int] = (256, 256)
    instance_norm: bool = False

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)

    def validate(self):
        if self.num_classes < 2:
            raise InvalidConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_width < 1:
            raise InvalidConfigError(f"base_width must be >= 1, got {self.base_width}")
        if self.depth < 2:
            raise InvalidConfigError(f"depth must be >= 2, got {self.depth}")
        if self.in_channels < 1:
            raise InvalidConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        step = 2 ** (self.depth - 1)
        for s in self.input_size:
            if s % step:
                raise InvalidConfigError(
                    f"input size {self.input_size} not divisible by 2^(depth-1) = {step}")

    @classmethod
    def desk(cls, **overrides):
        kw = dict(base_width=16, depth=4, input_size=(64, 64))
        kw.update(overrides)
        return cls(**kw)

    @property
    def feature_channels(self):
        return 2 * self.base_width


@dataclass(frozen=True, order=True)
class BlockId:
    part: str
    index: int

    def __str__(self):
        return f"{self.part}.{self.index}"

    @classmethod
    def parse(cls, text):
        part, _, idx = str(text).partition(".")
        if part not in PARTS or not idx.isdigit():
            raise UnknownBlockError(f"cannot parse block id {text!r}")
        return cls(part, int(idx))


def _conv(cin, cout, norm):
    layers = [nn.Conv2d(cin, cout, 3, padding=1)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class Block(nn.Module):
    """An ordered list of layers sharing one feature-map size.

    Layers are stored in a ModuleList so parameter names follow
    ``<part>.<block>.<layer>.{weight,bias}``.
    """

    def __init__(self, layers):
        super().__init__()
        self.layers = nn.ModuleList(layers)


class Head(nn.Module):
    """Top expanding-path block plus the 1x1 segmentation layer."""

    def __init__(self, in_ch, width, num_classes, norm=False):
        super().__init__()
        self.block = Block([_conv(in_ch, width, norm), _conv(width, width, norm),
                            nn.Conv2d(width, num_classes, 1)])

    def forward(self, feats):
        x = feats
        for layer in self.block.layers:
            x = layer(x)
        return x


class ModelSplit(nn.Module):
    """U-Net split into ``encoder``, ``decoder``, ``classifier`` and ``adversary``."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        b, d, norm = config.base_width, config.depth, config.instance_norm
        widths = [b * 2 ** i for i in range(d)]

        enc = [Block([_conv(config.in_channels, b, norm), _conv(b, b, norm)])]
        for i in range(1, d):
            enc.append(Block([nn.MaxPool2d(2), _conv(widths[i - 1], widths[i], norm),
                              _conv(widths[i], widths[i], norm)]))
        self.encoder = nn.ModuleList(enc)

        dec = []
        for j in range(d - 2):
            lvl = d - 2 - j
            dec.append(Block([
                nn.ConvTranspose2d(widths[lvl + 1], widths[lvl], 2, stride=2),
                _conv(2 * widths[lvl], widths[lvl], norm),
                _conv(widths[lvl], widths[lvl], norm),
            ]))
        dec.append(Block([nn.ConvTranspose2d(widths[1], widths[0], 2, stride=2)]))
        self.decoder = nn.ModuleList(dec)

        self.classifier = Head(2 * b, b, config.num_classes, norm)
        self.adversary = Head(2 * b, b, config.num_classes, norm)
        self.freeze_state: dict[BlockId, bool] = {blk: False for blk in self.blocks()}

    # -- structure -----------------------------------------------------
    def blocks(self):
        ids = [BlockId("encoder", i) for i in range(len(self.encoder))]
        ids += [BlockId("decoder", j) for j in range(len(self.decoder))]
        ids += [BlockId("classifier", 0), BlockId("adversary", 0)]
        return ids

    def block(self, blk: BlockId) -> nn.Module:
        if blk.part in ("encoder", "decoder"):
            seq = getattr(self, blk.part)
            if not 0 <= blk.index < len(seq):
                raise UnknownBlockError(f"no block {blk} (part has {len(seq)} blocks)")
            return seq[blk.index]
        if blk.part in ("classifier", "adversary") and blk.index == 0:
            return getattr(self, blk.part).block
        raise UnknownBlockError(f"no block {blk}")

    def part(self, name) -> nn.Module:
        if name not in PARTS:
            raise KeyError(name)
        return getattr(self, name)

    # -- forward -------------------------------------------------------
    def features(self, x):
        skips = []
        for blk in self.encoder:
            for layer in blk.layers:
                x = layer(x)
            skips.append(x)
        x = skips.pop()
        for blk in self.decoder:
            x = blk.layers[0](x)
            x = torch.cat([x, skips.pop()], dim=1)
            for layer in blk.layers[1:]:
                x = layer(x)
        return x

    def forward(self, x):
        return self.classifier(self.features(x))


def build_model(config: UNetConfig, seed: int = 0) -> ModelSplit:
    """Build a ModelSplit with deterministic Kaiming fan-in init and zero biases."""
    config.validate()
    model = ModelSplit(config)
    gen = torch.Generator().manual_seed(int(seed))
    for mod in model.modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(mod.weight, mode="fan_in", nonlinearity="relu",
                                    generator=gen)
            nn.init.zeros_(mod.bias)
    return model


def _check_images(model, x):
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeMismatchError(
            f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
    step = 2 ** (cfg.depth - 1)
    if x.shape[2] % step or x.shape[3] % step:
        raise ShapeMismatchError(f"spatial size {tuple(x.shape[2:])} not divisible by {step}")
    if not torch.isfinite(x).all():
        raise ShapeMismatchError("input contains non-finite values")


def forward_features(model: ModelSplit, x: torch.Tensor) -> torch.Tensor:
    """psi(x): encoder then decoder, returning ``(B, 2*base_width, H, W)`` features."""
    _check_images(model, x)
    return model.features(x)


def forward_head(head: Head, feats: torch.Tensor) -> torch.Tensor:
    expected = head.block.layers[0][0].in_channels
    if feats.ndim != 4 or feats.shape[1] != expected:
        raise ShapeMismatchError(
            f"expected (B, {expected}, H, W) features, got {tuple(feats.shape)}")
    return head(feats)


def predict(scores: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Per-pixel argmax over classes; ties go to the lowest class index."""
    # torch.argmax does not document its tie rule; compare against the max
    # and take the first hit instead.
    best = scores.max(dim=dim, keepdim=True).values
    hit = scores == best
    k = scores.shape[dim]
    shape = [1] * scores.ndim
    shape[dim] = k
    idx = torch.arange(k, device=scores.device).view(shape)
    return torch.where(hit, idx, k).min(dim=dim).values


def copy_head(model: ModelSplit) -> ModelSplit:
    """Value-copy classifier weights into the adversary (in place)."""
    model.adversary.load_state_dict(copy.deepcopy(model.classifier.state_dict()))
    return model


def set_frozen(model: ModelSplit, blocks) -> ModelSplit:
    """Freeze exactly ``blocks``; every other parameter becomes trainable."""
    blocks = [b if isinstance(b, BlockId) else BlockId.parse(b) for b in blocks]
    for blk in blocks:
        model.block(blk)
    wanted = set(blocks)
    for blk in model.blocks():
        frozen = blk in wanted
        model.freeze_state[blk] = frozen
        for p in model.block(blk).parameters():
            p.requires_grad_(not frozen)
    return model


def frozen_blocks(model: ModelSplit) -> list[BlockId]:
    return [b for b, f in model.freeze_state.items() if f]


def parameter_groups(model: ModelSplit) -> list[tuple[str, list[nn.Parameter]]]:
    """Four disjoint groups of trainable parameters, one per part."""
    return [(name, [p for p in model.part(name).parameters() if p.requires_grad])
            for name in PARTS]


# -- checkpoints ---------------------------------------------------------

def checkpoint_names(model: ModelSplit) -> dict[str, torch.Tensor]:
    """Map ``<part>.<block>.<layer>.{weight|bias}`` to tensors (params and buffers)."""
    out = {}
    for blk in model.blocks():
        for li, layer in enumerate(model.block(blk).layers):
            for mod in layer.modules():
                if isinstance(mod, nn.InstanceNorm2d):
                    prefix = "norm."
                elif isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
                    prefix = ""
                else:
                    continue
                for pname, t in mod.named_parameters(recurse=False):
                    out[f"{blk.part}.{blk.index}.{li}.{prefix}{pname}"] = t
    return out


def _entry(name):
    # fixed timestamp so identical weights give identical archive bytes
    return zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))


def save_checkpoint(model: ModelSplit, path, *, phase: str, seed: int, extra=None):
    if phase not in ("pretrained", "adapted"):
        raise ValueError(f"unknown phase tag {phase!r}")
    cfg = asdict(model.config)
    cfg["input_size"] = list(cfg["input_size"])
    params = checkpoint_names(model)
    header = {
        "format": "mddlab-checkpoint",
        "version": 1,
        "config": cfg,
        "freeze_state": [str(b) for b in frozen_blocks(model)],
        "seed": int(seed),
        "phase": phase,
        "params": {name: list(t.shape) for name, t in params.items()},
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_entry("header.json"), json.dumps(header, indent=2, sort_keys=True))
        for name, t in params.items():
            arr = t.detach().cpu().numpy().astype("<f4", copy=False)
            zf.writestr(_entry(f"params/{name}"), arr.tobytes(order="C"))
    tmp.replace(path)
    return path


def read_checkpoint_header(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("header.json"))


def load_checkpoint(path, expect_config: UNetConfig | None = None):
    """Return ``(model, header)``; raises IncompatibleCheckpointError on config mismatch."""
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise IncompatibleCheckpointError(f"{path}: not a checkpoint archive") from exc
    with zf:
        header = json.loads(zf.read("header.json"))
        try:
            cfg = UNetConfig(**header["config"])
        except TypeError as exc:
            raise IncompatibleCheckpointError(f"{path}: unreadable config ({exc})") from exc
        if expect_config is not None and asdict(expect_config) != asdict(cfg):
            raise IncompatibleCheckpointError(
                f"checkpoint config {asdict(cfg)} does not match {asdict(expect_config)}")
        model = ModelSplit(cfg)
        params = checkpoint_names(model)
        if set(params) != set(header["params"]):
            raise IncompatibleCheckpointError("parameter names do not match architecture")
        with torch.no_grad():
            for name, t in params.items():
                shape = tuple(header["params"][name])
                raw = np.frombuffer(zf.read(f"params/{name}"), dtype="<f4")
                if shape != tuple(t.shape) or raw.size != t.numel():
                    raise IncompatibleCheckpointError(f"bad shape for {name}")
                t.copy_(torch.from_numpy(raw.reshape(shape).copy()))
    set_frozen(model, [BlockId.parse(b) for b in header["freeze_state"]])
    return model, header
