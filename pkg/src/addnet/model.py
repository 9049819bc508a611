"""ADD block and the ADDNet-2D / ADDNet-3D detectors.

The ADD block is an Xception-style stack of (optionally depthwise-separable)
convolution stages. At each injection stage, the stage output is multiplied
channel-wise by the attention mask average-pooled to that stage's resolution.
The 2D detector follows the block with a small convolutional trunk and a
1x1-convolution head pooled to two logits. The 3D detector runs one shared
ADD block per frame, stacks the frame features along time and classifies
them with a 3D convolutional trunk and head.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import BadClipLength, IncompatibleResolution, ShapeMismatch
from .maskgen import MaskPyramid

NUM_CLASSES = 2


@dataclass
class StageSpec:
    channels: int
    stride: int = 2
    separable: bool = True
    residual: bool = False


@dataclass
class ModelSpec:
    """Declarative network description.

    ``input_size`` is ``(W, H, C)``. ``injection_points`` lists stage indices
    whose outputs are attention-adjusted; ``None`` means every downsampling
    stage. ``inject`` picks whether the mask multiplies the stage output
    after ("post") or before ("pre") its activation.
    """

    input_size: tuple = (64, 64, 3)
    stages: list = field(default_factory=list)
    injection_points: list | None = None
    trunk2d: list = field(default_factory=list)
    trunk3d: list = field(default_factory=lambda: [32, 32])
    head_pool: str = "avg"
    mode: str = "image"
    sequence_length: int = 1
    bias: bool = True
    inject: str = "post"
    attention: bool = True

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]
        if not self.stages:
            raise ValueError("model needs at least one stage")
        if self.injection_points is None:
            self.injection_points = [i for i, s in enumerate(self.stages) if s.stride > 1]
        self.injection_points = sorted(int(i) for i in self.injection_points)
        if self.mode not in ("image", "sequence"):
            raise ValueError(f"mode must be 'image' or 'sequence', got {self.mode!r}")
        if self.mode == "sequence" and self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")
        if self.inject not in ("pre", "post"):
            raise ValueError(f"inject must be 'pre' or 'post', got {self.inject!r}")
        if self.head_pool != "avg":
            raise ValueError("only global average pooling is supported for the head")
        w, h, _ = self.input_size
        for i in self.injection_points:
            if not 0 <= i < len(self.stages):
                raise ValueError(f"injection point {i} out of range")
        for i, (sw, sh) in enumerate(self.stage_resolutions()):
            if i in self.injection_points and (w % sw or h % sh):
                raise IncompatibleResolution(f"stage {i} resolution {sw}x{sh} does not divide {w}x{h}")

    def stage_resolutions(self) -> list[tuple[int, int]]:
        w, h, _ = self.input_size
        out = []
        for s in self.stages:
            if w % s.stride or h % s.stride:
                raise IncompatibleResolution(f"stride {s.stride} does not divide resolution {w}x{h}")
            w, h = w // s.stride, h // s.stride
            out.append((w, h))
        return out

    def injection_resolutions(self) -> list[tuple[int, int]]:
        res = self.stage_resolutions()
        return [res[i] for i in self.injection_points]

    @property
    def feature_channels(self) -> int:
        return self.stages[-1].channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["stages"] = [StageSpec(**s) if isinstance(s, dict) else s for s in d.get("stages", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def desk_spec(input_size=(64, 64, 3), mode="image", sequence_length=1) -> ModelSpec:
    """Reduced-width four-stage stack that trains on a CPU in minutes."""
    return ModelSpec(
        input_size=input_size,
        stages=[StageSpec(16, 2, separable=False), StageSpec(32, 2), StageSpec(64, 2), StageSpec(64, 2)],
        trunk2d=[64],
        trunk3d=[32, 32],
        mode=mode,
        sequence_length=sequence_length,
    )


def full_spec(input_size=(224, 224, 3), mode="image", sequence_length=1) -> ModelSpec:
    """Xception-width stack for scale runs."""
    return ModelSpec(
        input_size=input_size,
        stages=[StageSpec(64, 2, separable=False), StageSpec(128, 2, residual=True),
                StageSpec(256, 2, residual=True), StageSpec(728, 2, residual=True)],
        trunk2d=[728, 1024],
        trunk3d=[256, 256],
        mode=mode,
        sequence_length=sequence_length,
    )


def mini_spec(input_size=(8, 8, 3), mode="image", sequence_length=1) -> ModelSpec:
    """Two-stage network small enough for exhaustive gradient checks."""
    return ModelSpec(
        input_size=input_size,
        stages=[StageSpec(4, 2, separable=False), StageSpec(6, 2, separable=True)],
        trunk2d=[],
        trunk3d=[4],
        mode=mode,
        sequence_length=sequence_length,
    )


PRESETS = {"desk": desk_spec, "full": full_spec, "mini": mini_spec}


def preset(name: str, **kwargs) -> ModelSpec:
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


class Stage(nn.Module):
    def __init__(self, in_ch: int, spec: StageSpec, bias: bool):
        super().__init__()
        self.spec = spec
        if spec.separable:
            self.depthwise = nn.Conv2d(in_ch, in_ch, 3, spec.stride, 1, groups=in_ch, bias=False)
            self.pointwise = nn.Conv2d(in_ch, spec.channels, 1, bias=bias)
        else:
            self.conv = nn.Conv2d(in_ch, spec.channels, 3, spec.stride, 1, bias=bias)
        if spec.residual:
            self.shortcut = nn.Conv2d(in_ch, spec.channels, 1, spec.stride, bias=False)

    def preactivation(self, x):
        z = self.pointwise(self.depthwise(x)) if self.spec.separable else self.conv(x)
        if self.spec.residual:
            z = z + self.shortcut(x)
        return z


def _pool_to(mask: torch.Tensor, size) -> torch.Tensor:
    w, h = size
    mh, mw = mask.shape[-2:]
    if (mh, mw) == (h, w):
        return mask
    if mh % h or mw % w:
        raise ShapeMismatch(f"mask {mw}x{mh} cannot be pooled to {w}x{h}")
    return F.avg_pool2d(mask, kernel_size=(mh // h, mw // w))


def pyramid_tensors(pyramids, dtype=torch.float32) -> dict:
    """Stack per-sample ``MaskPyramid`` objects into ``{(w, h): (N, 1, h, w) tensor}``."""
    if isinstance(pyramids, MaskPyramid):
        pyramids = [pyramids]
    out = {}
    for res in pyramids[0].resolutions():
        out[res] = torch.as_tensor(np.stack([p.level_for(res).values for p in pyramids])[:, None], dtype=dtype)
    return out


class ADDBlock(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        in_ch = spec.input_size[2]
        stages = []
        for s in spec.stages:
            stages.append(Stage(in_ch, s, spec.bias))
            in_ch = s.channels
        self.stages = nn.ModuleList(stages)
        self.inject_at = set(spec.injection_points)

    def _mask_level(self, masks, size):
        if isinstance(masks, dict):
            try:
                return masks[tuple(size)]
            except KeyError:
                raise ShapeMismatch(f"mask pyramid has no level at {size}") from None
        return _pool_to(masks, size)

    def forward(self, x, masks=None, taps: dict | None = None):
        """``masks``: base mask ``(N, 1, H, W)``, or a resolution-keyed pyramid dict, or None."""
        use_attention = masks is not None and self.spec.attention
        if use_attention and not isinstance(masks, dict):
            if masks.dim() == 3:
                masks = masks[:, None]
            if masks.shape[0] != x.shape[0] or masks.shape[-2:] != x.shape[-2:]:
                raise ShapeMismatch(f"mask {tuple(masks.shape)} does not match input {tuple(x.shape)}")
        for i, stage in enumerate(self.stages):
            z = stage.preactivation(x)
            level = None
            if use_attention and i in self.inject_at:
                level = self._mask_level(masks, (z.shape[-1], z.shape[-2]))
                if level.shape[-2:] != z.shape[-2:]:
                    raise ShapeMismatch(f"mask level {tuple(level.shape)} vs features {tuple(z.shape)}")
            if taps is not None:
                taps[f"stage{i}.pre"] = z
            if level is not None and self.spec.inject == "pre":
                z = z * level
            x = F.relu(z)
            if level is not None and self.spec.inject == "post":
                x = x * level
            if taps is not None:
                taps[f"stage{i}.out"] = x
        return x


class ADDNet2D(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.add = ADDBlock(spec)
        layers, ch = [], spec.feature_channels
        for c in spec.trunk2d:
            layers += [nn.Conv2d(ch, c, 3, 1, 1, bias=spec.bias), nn.ReLU()]
            ch = c
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Conv2d(ch, NUM_CLASSES, 1, bias=True)

    def forward(self, images, masks=None, taps=None):
        if images.shape[1:] != (self.spec.input_size[2], self.spec.input_size[1], self.spec.input_size[0]):
            raise ShapeMismatch(f"expected (N, C, H, W) input matching {self.spec.input_size}, "
                                f"got {tuple(images.shape)}")
        feats = self.trunk(self.add(images, masks, taps))
        return self.head(feats).mean(dim=(2, 3))


class ADDNet3D(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.add = ADDBlock(spec)
        layers, ch = [], spec.feature_channels
        for c in spec.trunk3d:
            layers += [nn.Conv3d(ch, c, 3, stride=(2, 1, 1), padding=1, bias=spec.bias), nn.ReLU()]
            ch = c
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Conv3d(ch, NUM_CLASSES, 1, bias=True)

    def frame_features(self, clips, masks=None, taps=None):
        """Shared ADD block over every frame; returns (N, L, C', h, w)."""
        n, length = clips.shape[:2]
        flat = clips.reshape(n * length, *clips.shape[2:])
        flat_masks = None
        if masks is not None:
            flat_masks = masks.reshape(n * length, 1, *masks.shape[-2:])
        feats = self.add(flat, flat_masks, taps)
        return feats.reshape(n, length, *feats.shape[1:])

    def forward(self, clips, masks=None, taps=None):
        """``clips``: (N, L, C, H, W); ``masks``: (N, L, H, W) or (N, L, 1, H, W)."""
        if clips.dim() != 5 or clips.shape[1] != self.spec.sequence_length:
            raise BadClipLength(f"expected clips of length {self.spec.sequence_length}, got {tuple(clips.shape)}")
        feats = self.frame_features(clips, masks, taps)
        vol = feats.permute(0, 2, 1, 3, 4)  # (N, C', L, h, w)
        return self.head(self.trunk(vol)).mean(dim=(2, 3, 4))


def build_detector(spec: ModelSpec, seed: int = 0, dtype=torch.float32) -> nn.Module:
    """Instantiate the network for ``spec`` with parameters drawn from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ADDNet2D(spec) if spec.mode == "image" else ADDNet3D(spec)
    return net.to(dtype)


def backbone_spec(spec: ModelSpec) -> ModelSpec:
    """Same network with attention injection switched off."""
    return replace(spec, attention=False, stages=list(spec.stages), injection_points=list(spec.injection_points))


def param_count(spec: ModelSpec) -> int:
    """Scalar parameters of the network, computed from the ModelSpec alone."""
    b = 1 if spec.bias else 0
    total = 0
    cin = spec.input_size[2]
    for s in spec.stages:
        if s.separable:
            total += cin * 9 + cin * s.channels + b * s.channels
        else:
            total += cin * s.channels * 9 + b * s.channels
        if s.residual:
            total += cin * s.channels
        cin = s.channels
    if spec.mode == "image":
        for c in spec.trunk2d:
            total += cin * c * 9 + b * c
            cin = c
    else:
        for c in spec.trunk3d:
            total += cin * c * 27 + b * c
            cin = c
    return total + NUM_CLASSES * cin + NUM_CLASSES


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def save_checkpoint(path, net: nn.Module, step: int = 0, extra: dict | None = None) -> None:
    """Single ``.npz`` archive: spec JSON, parameters by layer name, step counter."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    arrays["meta/spec"] = np.array(net.spec.to_json())
    arrays["meta/step"] = np.array(int(step))
    arrays["meta/dtype"] = np.array(str(next(net.parameters()).dtype).replace("torch.", ""))
    if extra:
        arrays["meta/extra"] = np.array(json.dumps(extra, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(net, step, extra)``."""
    with np.load(path, allow_pickle=False) as z:
        spec = ModelSpec.from_dict(json.loads(str(z["meta/spec"])))
        step = int(z["meta/step"])
        dtype = getattr(torch, str(z["meta/dtype"])) if "meta/dtype" in z else torch.float32
        extra = json.loads(str(z["meta/extra"])) if "meta/extra" in z else {}
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
    net = build_detector(spec, dtype=dtype)
    net.load_state_dict(state)
    return net, step, extra


def to_tensors(batch, dtype=torch.float32):
    """Channels-last numpy batch to ``(images, masks, labels)`` tensors for the network."""
    images = torch.as_tensor(np.asarray(batch.images), dtype=dtype)
    if images.dim() == 4:
        images = images.permute(0, 3, 1, 2)
    else:
        images = images.permute(0, 1, 4, 2, 3)
    masks = torch.as_tensor(np.asarray(batch.masks), dtype=dtype).unsqueeze(-3)
    labels = torch.as_tensor(np.asarray(batch.labels), dtype=torch.int64)
    return images.contiguous(), masks.contiguous(), labels


def add_block_forward(net: nn.Module, image, pyramid=None, taps=None):
    """Run only the ADD block of ``net`` on channels-last numpy input(s)."""
    x = torch.as_tensor(np.asarray(image), dtype=next(net.parameters()).dtype)
    single = x.dim() == 3
    if single:
        x = x[None]
    x = x.permute(0, 3, 1, 2)
    masks = None
    if pyramid is not None:
        masks = pyramid_tensors(pyramid, x.dtype)
    with torch.no_grad():
        out = net.add(x, masks, taps)
    return out[0] if single else out
