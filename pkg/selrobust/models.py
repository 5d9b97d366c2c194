"""Compact conv/dense classifiers with an activation tap after every ReLU.

A tap's unit value is the spatial mean of a channel's post-ReLU map (conv
layers) or the post-ReLU scalar (dense layers). The logit layer is never
tapped.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import yaml

from selrobust.errors import DegenerateInputError, ShapeError, StnsFormatError
from selrobust.tensor import ops
from selrobust.tensor.rng import Rng
from selrobust.tensor.stns import read_stns, write_stns
from selrobust.tensor.tensor import Tensor, as_tensor, no_grad

logger = logging.getLogger(__name__)

POOL_KINDS = ("avg", "max", "none")
CHECKPOINT_FORMAT = 1
MANIFEST_NAME = "manifest.yaml"


@dataclass(frozen=True)
class ConvBlockSpec:
    width: int
    kernel: int = 3
    stride: int = 1
    padding: Optional[int] = None
    batchnorm: bool = True
    pool: str = "avg"
    pool_size: int = 2

    def __post_init__(self) -> None:
        if self.width < 1 or self.kernel < 1 or self.stride < 1 or self.pool_size < 1:
            raise ShapeError(f"invalid conv block {self}")
        if self.pool not in POOL_KINDS:
            raise ShapeError(f"pool must be one of {POOL_KINDS}, got {self.pool!r}")
        if self.padding is not None and self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")

    @property
    def effective_padding(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: Tuple[int, int, int] = (1, 16, 16)
    blocks: Tuple[ConvBlockSpec, ...] = ()
    hidden: Tuple[int, ...] = ()
    n_classes: int = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if self.n_classes < 2:
            raise ShapeError(f"n_classes must be >= 2, got {self.n_classes}")
        if any(h < 1 for h in self.hidden):
            raise ShapeError(f"hidden widths must be positive, got {self.hidden}")
        self.feature_shapes()

    @property
    def tap_names(self) -> List[str]:
        convs = [f"conv{i + 1}" for i in range(len(self.blocks))]
        dense = [f"fc{i + 1}" for i in range(len(self.hidden))]
        return convs + dense

    def feature_shapes(self) -> List[Tuple[int, int, int]]:
        """(channels, height, width) after each conv block; raises on spatial collapse."""
        c, h, w = self.input_shape
        shapes = []
        for i, block in enumerate(self.blocks):
            pad = block.effective_padding
            h = (h + 2 * pad - block.kernel) // block.stride + 1
            w = (w + 2 * pad - block.kernel) // block.stride + 1
            if h < 1 or w < 1:
                raise ShapeError(f"conv{i + 1}: spatial extent collapses to {h}x{w}")
            if block.pool != "none":
                h, w = h // block.pool_size, w // block.pool_size
                if h < 1 or w < 1:
                    raise ShapeError(f"conv{i + 1}: pooling collapses spatial extent to {h}x{w}")
            c = block.width
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_features(self) -> int:
        c, h, w = self.feature_shapes()[-1] if self.blocks else self.input_shape
        return c * h * w

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "blocks": [asdict(b) for b in self.blocks],
            "hidden": list(self.hidden),
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkSpec":
        return cls(
            input_shape=tuple(data["input_shape"]),
            blocks=tuple(ConvBlockSpec(**b) for b in data.get("blocks", [])),
            hidden=tuple(data.get("hidden", [])),
            n_classes=int(data["n_classes"]),
        )


def micronet_spec(
    input_shape: Tuple[int, int, int] = (1, 16, 16),
    n_classes: int = 8,
    widths: Tuple[int, ...] = (16, 32, 64),
    hidden: Tuple[int, ...] = (64,),
    kernel: int = 3,
    batchnorm: bool = True,
    pool: str = "avg",
) -> NetworkSpec:
    """The desk-scale default: 3x3 conv blocks with batchnorm and 2x2 pooling, one hidden layer."""
    blocks = tuple(ConvBlockSpec(width=w, kernel=kernel, batchnorm=batchnorm, pool=pool) for w in widths)
    return NetworkSpec(input_shape=input_shape, blocks=blocks, hidden=hidden, n_classes=n_classes)


@dataclass
class UnitActivations:
    """Per-tap ``[n_samples, n_units]`` matrices, ordered by depth."""

    layers: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        counts = {m.shape[0] for m in self.layers.values()}
        if len(counts) > 1:
            raise ShapeError(f"tap matrices disagree on sample count: {sorted(counts)}")
        for name, matrix in self.layers.items():
            if matrix.ndim != 2:
                raise ShapeError(f"tap {name} must be [samples, units], got {matrix.shape}")

    @property
    def tap_names(self) -> List[str]:
        return list(self.layers)

    @property
    def n_samples(self) -> int:
        return next(iter(self.layers.values())).shape[0] if self.layers else 0

    def __getitem__(self, tap: str) -> np.ndarray:
        return self.layers[tap]

    def __iter__(self) -> Iterator[str]:
        return iter(self.layers)

    def items(self):
        return self.layers.items()

    @classmethod
    def from_taps(cls, taps: Dict[str, Tensor]) -> "UnitActivations":
        return cls({name: t.data.copy() for name, t in taps.items()})

    @classmethod
    def concatenate(cls, parts: List["UnitActivations"]) -> "UnitActivations":
        if not parts:
            return cls()
        names = parts[0].tap_names
        return cls({n: np.concatenate([p.layers[n] for p in parts], axis=0) for n in names})


class Network:
    """Parameters, batchnorm buffers and the forward pass for a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray]) -> None:
        self.spec = spec
        self.params = params
        self.buffers = buffers
        self.training = True

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    @contextlib.contextmanager
    def evaluating(self) -> Iterator["Network"]:
        """Evaluation mode for the duration of the block, then restore."""
        previous = self.training
        self.training = False
        try:
            yield self
        finally:
            self.training = previous

    @contextlib.contextmanager
    def frozen(self) -> Iterator["Network"]:
        """Stop parameters from receiving gradients (attacks, input-gradient analyses)."""
        flags = {name: p.requires_grad for name, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for name, p in self.params.items():
                p.requires_grad = flags[name]

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state(self) -> Dict[str, np.ndarray]:
        """Deep copy of parameters and buffers."""
        snapshot = {name: p.data.copy() for name, p in self.params.items()}
        snapshot.update({name: b.copy() for name, b in self.buffers.items()})
        return snapshot

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: state shape {state[name].shape} != {p.shape}")
            p.data = state[name].copy()
            p.grad = None
        for name in self.buffers:
            self.buffers[name] = state[name].copy()

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(
                f"expected input [N, {', '.join(map(str, self.spec.input_shape))}], got {list(x.shape)}"
            )

    def forward_with_taps(self, batch: Union[Tensor, np.ndarray]) -> Tuple[Tensor, Dict[str, Tensor]]:
        x = as_tensor(batch)
        self._check_input(x)
        taps: Dict[str, Tensor] = {}
        h = x
        for i, block in enumerate(self.spec.blocks):
            name = f"conv{i + 1}"
            p = self.params
            z = ops.conv2d(
                h, p[f"{name}.weight"], bias=p.get(f"{name}.bias"),
                stride=block.stride, padding=block.effective_padding,
            )
            if block.batchnorm:
                z = ops.batchnorm(
                    z, p[f"{name}.gamma"], p[f"{name}.beta"],
                    running_mean=self.buffers[f"{name}.running_mean"],
                    running_var=self.buffers[f"{name}.running_var"],
                    training=self.training,
                )
            a = ops.relu(z)
            taps[name] = ops.spatial_mean(a)
            if block.pool == "avg":
                h = ops.avgpool2d(a, block.pool_size)
            elif block.pool == "max":
                h = ops.maxpool2d(a, block.pool_size)
            else:
                h = a
        h = ops.reshape(h, (x.shape[0], self.spec.flat_features))
        for i in range(len(self.spec.hidden)):
            name = f"fc{i + 1}"
            h = ops.relu(ops.linear(h, self.params[f"{name}.weight"], self.params[f"{name}.bias"]))
            taps[name] = h
        logits = ops.linear(h, self.params["logits.weight"], self.params["logits.bias"])
        return logits, taps

    def __call__(self, batch: Union[Tensor, np.ndarray]) -> Tensor:
        return self.forward_with_taps(batch)[0]


def _he_normal(rng: Rng, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build_network(spec: NetworkSpec, rng: Rng) -> Network:
    """He fan-in initialization; biases and betas 0, gammas 1."""
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}
    channels = spec.input_shape[0]
    for i, block in enumerate(spec.blocks):
        name = f"conv{i + 1}"
        fan_in = channels * block.kernel * block.kernel
        shape = (block.width, channels, block.kernel, block.kernel)
        params[f"{name}.weight"] = Tensor(_he_normal(rng, shape, fan_in), requires_grad=True)
        if block.batchnorm:
            params[f"{name}.gamma"] = Tensor(np.ones(block.width), requires_grad=True)
            params[f"{name}.beta"] = Tensor(np.zeros(block.width), requires_grad=True)
            buffers[f"{name}.running_mean"] = np.zeros(block.width)
            buffers[f"{name}.running_var"] = np.ones(block.width)
        else:
            params[f"{name}.bias"] = Tensor(np.zeros(block.width), requires_grad=True)
        channels = block.width
    width = spec.flat_features
    for i, units in enumerate(spec.hidden):
        name = f"fc{i + 1}"
        params[f"{name}.weight"] = Tensor(_he_normal(rng, (width, units), width), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(units), requires_grad=True)
        width = units
    params["logits.weight"] = Tensor(_he_normal(rng, (width, spec.n_classes), width), requires_grad=True)
    params["logits.bias"] = Tensor(np.zeros(spec.n_classes), requires_grad=True)
    net = Network(spec, params, buffers)
    logger.debug("Built network with %d parameters, taps %s", net.num_parameters(), spec.tap_names)
    return net


def forward_with_taps(net: Network, batch: Union[Tensor, np.ndarray]) -> Tuple[Tensor, Dict[str, Tensor]]:
    return net.forward_with_taps(batch)


def collect_activations(
    net: Network, images: np.ndarray, batch_size: int = 256,
) -> Tuple[np.ndarray, UnitActivations]:
    """Logits and tap activations for ``images`` in evaluation mode, without recording a graph."""
    if len(images) == 0:
        raise DegenerateInputError("cannot collect activations for an empty dataset")
    logits_parts, act_parts = [], []
    with net.evaluating(), no_grad():
        for start in range(0, len(images), batch_size):
            logits, taps = net.forward_with_taps(images[start:start + batch_size])
            logits_parts.append(logits.data)
            act_parts.append(UnitActivations.from_taps(taps))
    return np.concatenate(logits_parts, axis=0), UnitActivations.concatenate(act_parts)


def predict(net: Network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    logits, _ = collect_activations(net, images, batch_size)
    return logits.argmax(axis=1)


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    if len(images) == 0:
        raise DegenerateInputError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(net, images, batch_size) == np.asarray(labels)))


@dataclass
class DeadUnitReport:
    counts: Dict[str, int]
    proportions: Dict[str, float]
    masks: Dict[str, np.ndarray]
    threshold: float

    @property
    def overall_proportion(self) -> float:
        total = sum(m.size for m in self.masks.values())
        return float(sum(self.counts.values()) / total) if total else 0.0


def dead_units(acts: UnitActivations, threshold: float = 0.0) -> DeadUnitReport:
    """A unit is dead iff its maximum activation over all samples is <= ``threshold``."""
    if not acts.layers or acts.n_samples == 0:
        raise DegenerateInputError("dead_units needs a non-empty activation matrix")
    counts, proportions, masks = {}, {}, {}
    for name, matrix in acts.items():
        if matrix.shape[1] == 0:
            raise DegenerateInputError(f"tap {name} has no units")
        mask = matrix.max(axis=0) <= threshold
        masks[name] = mask
        counts[name] = int(mask.sum())
        proportions[name] = float(mask.mean())
    return DeadUnitReport(counts=counts, proportions=proportions, masks=masks, threshold=threshold)


def save_checkpoint(net: Network, directory: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write ``manifest.yaml`` plus one STNS file per parameter and buffer."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, Any] = {
        "format": CHECKPOINT_FORMAT,
        "spec": net.spec.to_dict(),
        "taps": net.spec.tap_names,
        "parameters": {},
        "buffers": {},
    }
    for name, p in net.params.items():
        manifest["parameters"][name] = write_stns(root / f"{name}.stns", p.data).name
    for name, b in net.buffers.items():
        manifest["buffers"][name] = write_stns(root / f"{name}.stns", b).name
    if extra:
        manifest["extra"] = extra
    (root / MANIFEST_NAME).write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")
    logger.debug("Saved checkpoint to %s", root)
    return root


def load_checkpoint(directory: Union[str, Path]) -> Network:
    root = Path(directory)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise StnsFormatError(
            f"no {MANIFEST_NAME} in {root}",
            hint="Point --checkpoint at a directory written by 'selrobust train'.",
        )
    manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise StnsFormatError(f"unsupported checkpoint format {manifest.get('format')!r}")
    spec = NetworkSpec.from_dict(manifest["spec"])
    params = {
        name: Tensor(read_stns(root / fname), requires_grad=True)
        for name, fname in manifest["parameters"].items()
    }
    buffers = {name: read_stns(root / fname) for name, fname in manifest.get("buffers", {}).items()}
    logger.debug("Loaded checkpoint %s (%d tensors)", root, len(params) + len(buffers))
    return Network(spec, params, buffers).eval()
