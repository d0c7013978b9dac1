"""Split conv backbone, growable linear head, and per-class feature generators.

The backbone is a stack of stride-2 conv stages split at a plug point: the
lower half produces the mid-level feature map that generators operate on, the
upper half plus global pooling produces the classification feature vector.
Generators live between the halves, one per class: they fuse a content map
(from an exemplar) with a statistics map (from an unlabeled image) into a new
map of the same shape.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Parameter, Tensor, he_uniform


class ConvLayer:
    """3x3 convolution with bias and fan-in-scaled uniform init."""

    def __init__(self, name, in_ch, out_ch, stride, dtype, rng, kernel_size=3):
        k = kernel_size
        self.stride = stride
        self.padding = (k - 1) // 2
        self.weight = Parameter(f"{name}/weight",
                                Tensor(he_uniform((out_ch, in_ch, k, k), in_ch * k * k, rng, dtype)))
        self.bias = Parameter(f"{name}/bias", Tensor(np.zeros(out_ch, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.weight.tensor, stride=self.stride, padding=self.padding)
        return out + T.reshape(self.bias.tensor, (1, -1, 1, 1))

    def parameters(self):
        return [self.weight, self.bias]


class SplitBackbone:
    """Feature extractor split into a lower part (through the plug point) and
    an upper part (remaining stages + global average pooling)."""

    def __init__(self, in_channels=1, stage_widths=(16, 32, 64), plug_index=2,
                 image_size=16, dtype=np.float32, rng=None):
        if not 1 <= plug_index < len(stage_widths):
            raise ValueError(f"plug_index must be in [1, {len(stage_widths) - 1}]")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.stage_widths = tuple(stage_widths)
        self.plug_index = plug_index
        self.image_size = image_size
        self.dtype = np.dtype(dtype)
        self.stages = []
        prev = in_channels
        for i, width in enumerate(stage_widths):
            self.stages.append(ConvLayer(f"backbone/stage{i}", prev, width, 2, self.dtype, rng))
            prev = width

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    def mid_shape(self) -> tuple[int, int, int]:
        """(C, H, W) of the lower-half output; generators depend on it."""
        size = self.image_size
        for _ in range(self.plug_index):
            size = (size - 1) // 2 + 1
        return (self.stage_widths[self.plug_index - 1], size, size)

    def forward_lower(self, x: Tensor) -> Tensor:
        """Images (N, C, S, S) -> mid-level feature maps."""
        if x.data.ndim != 4 or x.data.shape[1] != self.in_channels \
                or x.data.shape[2] != self.image_size or x.data.shape[3] != self.image_size:
            raise ShapeError(
                f"expected (N, {self.in_channels}, {self.image_size}, {self.image_size}), "
                f"got {x.data.shape}"
            )
        h = x
        for stage in self.stages[:self.plug_index]:
            h = T.relu(stage(h))
        return h

    def forward_upper(self, h: Tensor) -> Tensor:
        """Mid-level maps -> pooled feature vectors (N, F)."""
        if h.data.ndim != 4 or h.data.shape[1:] != self.mid_shape():
            raise ShapeError(f"expected maps of shape {self.mid_shape()}, got {h.data.shape}")
        for stage in self.stages[self.plug_index:]:
            h = T.relu(stage(h))
        return T.global_avg_pool(h)

    def features(self, x: Tensor) -> Tensor:
        return self.forward_upper(self.forward_lower(x))

    def features_unsplit(self, x: Tensor) -> Tensor:
        """Same computation without routing through the split; the split is
        purely structural, so this must agree with ``features`` exactly."""
        h = x
        for stage in self.stages:
            h = T.relu(stage(h))
        return T.global_avg_pool(h)

    def parameters(self) -> list[Parameter]:
        return [p for stage in self.stages for p in stage.parameters()]

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.tensor.requires_grad = flag

    def clone(self) -> "SplitBackbone":
        """Frozen deep copy (used for the previous-task snapshot)."""
        other = SplitBackbone(self.in_channels, self.stage_widths, self.plug_index,
                              self.image_size, self.dtype, np.random.default_rng(0))
        for mine, theirs in zip(self.parameters(), other.parameters()):
            theirs.tensor.data = mine.tensor.data.copy()
        other.set_trainable(False)
        return other


class GrowableClassifier:
    """Bias-free linear head whose weight rows are grouped by task.

    Growing appends a freshly initialized block; existing blocks are never
    touched, so old-class logits are preserved bitwise at the growth instant.
    """

    def __init__(self, feature_dim: int, dtype=np.float32):
        self.feature_dim = feature_dim
        self.dtype = np.dtype(dtype)
        self.blocks: list[Parameter] = []

    @property
    def num_classes(self) -> int:
        return sum(int(b.tensor.data.shape[0]) for b in self.blocks)

    def grow(self, new_classes: int, rng: np.random.Generator):
        if new_classes < 1:
            raise ValueError("grow needs at least one new class")
        w = he_uniform((new_classes, self.feature_dim), self.feature_dim, rng, self.dtype)
        self.blocks.append(Parameter(f"head/block{len(self.blocks)}/weight", Tensor(w)))

    def __call__(self, feats: Tensor) -> Tensor:
        if not self.blocks:
            raise ContractError("classifier has no classes yet; call grow first")
        logits = [T.linear(feats, b.tensor) for b in self.blocks]
        return logits[0] if len(logits) == 1 else T.concat(logits, axis=1)

    def parameters(self) -> list[Parameter]:
        return list(self.blocks)

    def set_trainable(self, flag: bool):
        for p in self.blocks:
            p.tensor.requires_grad = flag


class FeatureGenerator:
    """Per-class two-input feature mixer.

    The content map and statistics map are channel-concatenated (content
    first), passed through ``depth`` residual blocks at 2C channels, then
    fused back to C channels by a 1x1 convolution.
    """

    def __init__(self, class_id: int, channels: int, depth: int, dtype, rng):
        self.class_id = class_id
        self.channels = channels
        self.depth = depth
        wide = 2 * channels
        prefix = f"gen/c{class_id}"
        self.blocks = []
        for b in range(depth):
            conv1 = ConvLayer(f"{prefix}/block{b}/conv1", wide, wide, 1, dtype, rng)
            conv2 = ConvLayer(f"{prefix}/block{b}/conv2", wide, wide, 1, dtype, rng)
            self.blocks.append((conv1, conv2))
        self.fusion = ConvLayer(f"{prefix}/fusion", wide, channels, 1, dtype, rng, kernel_size=1)

    def __call__(self, h_content: Tensor, h_style: Tensor) -> Tensor:
        if h_content.data.shape != h_style.data.shape:
            raise ShapeError(
                f"generator inputs must match: {h_content.data.shape} vs {h_style.data.shape}"
            )
        if h_content.data.shape[1] != self.channels:
            raise ShapeError(
                f"generator expects {self.channels} channels, got {h_content.data.shape[1]}"
            )
        z = T.concat([h_content, h_style], axis=1)
        for conv1, conv2 in self.blocks:
            y = conv2(T.relu(conv1(z)))
            z = T.relu(z + y)
        return self.fusion(z)

    def parameters(self) -> list[Parameter]:
        params = []
        for conv1, conv2 in self.blocks:
            params.extend(conv1.parameters())
            params.extend(conv2.parameters())
        params.extend(self.fusion.parameters())
        return params

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.tensor.requires_grad = flag


class GeneratorBank:
    """Map class id -> generator, with creation timestamped by task index."""

    def __init__(self, channels: int, depth: int = 2, dtype=np.float32):
        self.channels = channels
        self.depth = depth
        self.dtype = np.dtype(dtype)
        self.generators: dict[int, FeatureGenerator] = {}
        self.created_at: dict[int, int] = {}

    def __len__(self):
        return len(self.generators)

    def __contains__(self, class_id: int):
        return class_id in self.generators

    def create(self, classes, task_index: int, rng: np.random.Generator):
        """One seeded generator per class, built in sorted class order."""
        for c in sorted(classes):
            if c in self.generators:
                raise ContractError(f"generator for class {c} already exists")
            self.generators[c] = FeatureGenerator(c, self.channels, self.depth, self.dtype, rng)
            self.created_at[c] = task_index

    def get(self, class_id: int) -> FeatureGenerator:
        if class_id not in self.generators:
            raise KeyError(f"no generator for class {class_id}")
        return self.generators[class_id]

    def generate(self, class_id: int, h_content: Tensor, h_style: Tensor) -> Tensor:
        return self.get(class_id)(h_content, h_style)

    def parameters(self) -> list[Parameter]:
        return [p for c in sorted(self.generators) for p in self.generators[c].parameters()]

    def set_trainable(self, flag: bool):
        for gen in self.generators.values():
            gen.set_trainable(flag)


def check_unique_names(params: list[Parameter]):
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ContractError(f"duplicate parameter names: {dupes}")
