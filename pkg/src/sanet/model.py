"""Three-branch embedding network and its checkpoint format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    batch_norm,
    channel_affine,
    concat,
    conv2d,
    conv_output_size,
    default_dtype,
    global_avg_pool,
    linear,
    relu,
    split_spatial,
)
from .stn import init_localisation, stn_forward

CHECKPOINT_FORMAT = "sanet-checkpoint-v1"

# fixed input standardization applied at the start of the trunk
PIXEL_MEAN = 0.45
PIXEL_STD = 0.25


@dataclass
class SANetConfig:
    input_size: int = 64
    trunk_channels: tuple[int, ...] = (16, 32, 64, 64)
    branch_channels: int = 128
    embed_dim_global: int = 64
    embed_dim_part: int = 64
    parts_per_branch: int = 2
    num_classes: int = 64
    stn_enabled: bool = True
    batch_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        self.trunk_channels = tuple(int(c) for c in self.trunk_channels)
        if self.parts_per_branch < 2 or self.parts_per_branch % 2:
            raise ValueError(f"parts_per_branch must be a positive even int, got {self.parts_per_branch}")
        if self.num_classes < 1 or self.embed_dim_global < 1 or self.embed_dim_part < 1:
            raise ValueError("num_classes and embedding widths must be positive")
        if len(self.trunk_channels) < 1:
            raise ValueError("trunk needs at least one stage")
        fs = self.feature_size
        if fs % self.parts_per_branch:
            raise ValueError(
                f"trunk feature extent {fs} is not divisible into {self.parts_per_branch} strips"
            )
        if fs < 2:
            raise ValueError(f"trunk feature extent {fs} too small")

    @property
    def feature_size(self) -> int:
        s = self.input_size
        for _ in self.trunk_channels[1:]:
            s = conv_output_size(s, 3, 2, 1)
        return s

    @property
    def embedding_dim(self) -> int:
        return self.embed_dim_global + 2 * self.parts_per_branch * self.embed_dim_part

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_channels"] = list(self.trunk_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SANetConfig":
        return cls(**d)


@dataclass
class BranchOutputs:
    """Per-branch features and classifier logits for one batch."""

    f_g: Tensor
    parts_td: list[Tensor]
    parts_lr: list[Tensor]
    theta: Tensor | None
    logits_g: Tensor
    logits_td: Tensor
    logits_lr: Tensor

    @property
    def f_t(self):
        return self.parts_td[0]

    @property
    def f_d(self):
        return self.parts_td[-1]

    @property
    def f_l(self):
        return self.parts_lr[0]

    @property
    def f_r(self):
        return self.parts_lr[-1]

    def segments(self) -> list[Tensor]:
        return [self.f_g, *self.parts_td, *self.parts_lr]


def assemble_embedding(b: BranchOutputs) -> Tensor:
    """Concatenate (f_g, top..down, left..right) into the retrieval vector."""
    return concat(b.segments(), axis=-1)


BN_EPS = 1e-5


def _he(rng, shape, fan_in):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


class SANet:
    """Shared trunk, global branch and two part branches over an affine aligner.

    Parameters live in ``self.params`` (an insertion-ordered dict keyed by
    dotted name); batch-norm running statistics live in ``self.buffers``.
    ``stn_enabled=False`` builds the baseline: same trunk and branches, no
    alignment parameters.  ``training`` selects batch statistics (True) or
    running statistics (False) in the normalization layers.
    """

    momentum = 0.1

    def __init__(self, config: SANetConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = False
        rng = np.random.default_rng([config.seed, 0])

        def add(name, value, group):
            self.params[name] = Parameter(name, value, group)

        def conv(prefix, cin, cout):
            add(f"{prefix}.weight", _he(rng, (cout, cin, 3, 3), cin * 9), "trunk")
            add(f"{prefix}.bias", Tensor(np.zeros(cout)), "trunk")
            if config.batch_norm:
                add(f"{prefix}.bn.gamma", Tensor(np.ones(cout)), "trunk")
                add(f"{prefix}.bn.beta", Tensor(np.zeros(cout)), "trunk")
                self.buffers[f"{prefix}.bn.running_mean"] = np.zeros(cout, dtype=default_dtype())
                self.buffers[f"{prefix}.bn.running_var"] = np.ones(cout, dtype=default_dtype())

        chans = (3, *config.trunk_channels)
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            conv(f"trunk.conv{i}", cin, cout)

        c4, bc = config.trunk_channels[-1], config.branch_channels
        m = config.parts_per_branch
        for br in ("global", "td", "lr"):
            conv(f"{br}.conv", c4, bc)
        add("global.reduce.weight", _he(rng, (config.embed_dim_global, bc), bc), "head")
        add("global.reduce.bias", Tensor(np.zeros(config.embed_dim_global)), "head")
        for br in ("td", "lr"):
            for k in range(m):
                add(f"{br}.reduce{k}.weight", _he(rng, (config.embed_dim_part, bc), bc), "head")
                add(f"{br}.reduce{k}.bias", Tensor(np.zeros(config.embed_dim_part)), "head")
        heads = {"global": config.embed_dim_global, "td": m * config.embed_dim_part,
                 "lr": m * config.embed_dim_part}
        for br, width in heads.items():
            add(f"{br}.classifier.weight",
                Tensor(rng.normal(0.0, 1.0 / np.sqrt(width), size=(config.num_classes, width))), "head")
            add(f"{br}.classifier.bias", Tensor(np.zeros(config.num_classes)), "head")

        if config.stn_enabled:
            for p in init_localisation(c4, np.random.default_rng([config.seed, 1])):
                self.params[p.name] = p

    # ------------------------------------------------------------ forward

    def _w(self, name) -> Tensor:
        return self.params[name].value

    def train(self, mode: bool = True) -> "SANet":
        self.training = mode
        return self

    def eval(self) -> "SANet":
        return self.train(False)

    def _conv_block(self, x: Tensor, prefix: str, stride: int) -> Tensor:
        x = conv2d(x, self._w(f"{prefix}.weight"), self._w(f"{prefix}.bias"), stride=stride, pad=1)
        if self.config.batch_norm:
            gamma, beta = self._w(f"{prefix}.bn.gamma"), self._w(f"{prefix}.bn.beta")
            rm, rv = f"{prefix}.bn.running_mean", f"{prefix}.bn.running_var"
            if self.training:
                x, mu, var = batch_norm(x, gamma, beta, BN_EPS)
                n = x.data.size // x.shape[1]
                mom = self.momentum
                self.buffers[rm] = ((1 - mom) * self.buffers[rm] + mom * mu).astype(mu.dtype)
                self.buffers[rv] = ((1 - mom) * self.buffers[rv] + mom * var * n / max(n - 1, 1)).astype(mu.dtype)
            else:
                # running statistics folded into a per-channel affine map
                inv = 1.0 / np.sqrt(self.buffers[rv] + BN_EPS)
                scale = Tensor(gamma.data * inv)
                shift = Tensor(beta.data - self.buffers[rm] * gamma.data * inv)
                x = channel_affine(x, scale, shift)
        return relu(x)

    def trunk_forward(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected [N,3,S,S] images, got {images.shape}")
        if images.shape[2] != self.config.input_size or images.shape[3] != self.config.input_size:
            raise ValueError(f"expected {self.config.input_size}px images, got {images.shape[2:]}")
        x = (images - PIXEL_MEAN) * (1.0 / PIXEL_STD)
        for i in range(len(self.config.trunk_channels)):
            x = self._conv_block(x, f"trunk.conv{i}", 1 if i == 0 else 2)
        return x

    def global_branch(self, feats: Tensor) -> Tensor:
        x = self._conv_block(feats, "global.conv", 2)
        return linear(global_avg_pool(x), self._w("global.reduce.weight"), self._w("global.reduce.bias"))

    def align(self, feats: Tensor) -> tuple[Tensor, Tensor | None]:
        if not self.config.stn_enabled:
            return feats, None
        return stn_forward(feats, self.params)

    def spatial_branch(self, aligned: Tensor, axis: str) -> list[Tensor]:
        """Part features of already-aligned maps, strips ordered top->down or left->right."""
        br = "td" if axis == "height" else "lr"
        x = self._conv_block(aligned, f"{br}.conv", 1)
        strips = split_spatial(x, axis, self.config.parts_per_branch)
        return [
            linear(global_avg_pool(s), self._w(f"{br}.reduce{k}.weight"), self._w(f"{br}.reduce{k}.bias"))
            for k, s in enumerate(strips)
        ]

    def forward(self, images: Tensor) -> BranchOutputs:
        feats = self.trunk_forward(images)
        f_g = self.global_branch(feats)
        aligned, theta = self.align(feats)
        parts_td = self.spatial_branch(aligned, "height")
        parts_lr = self.spatial_branch(aligned, "width")
        return BranchOutputs(
            f_g=f_g,
            parts_td=parts_td,
            parts_lr=parts_lr,
            theta=theta,
            logits_g=self._classify("global", f_g),
            logits_td=self._classify("td", concat(parts_td)),
            logits_lr=self._classify("lr", concat(parts_lr)),
        )

    __call__ = forward

    def _classify(self, br, feats):
        return linear(feats, self._w(f"{br}.classifier.weight"), self._w(f"{br}.classifier.bias"))

    def embed(self, images: Tensor) -> Tensor:
        return assemble_embedding(self.forward(images))

    # --------------------------------------------------------- checkpoint

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.data for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        names = set(state)
        expected = set(self.params)
        if names != expected:
            raise ValueError(
                f"checkpoint parameters disagree: missing {sorted(expected - names)}, "
                f"unexpected {sorted(names - expected)}"
            )
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: checkpoint {arr.shape}, model {p.shape}")
            p.value.data = arr.astype(default_dtype(), copy=True)


def blob_path(manifest_path: str | Path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def save_checkpoint(model: SANet, path: str | Path, extra: dict | None = None) -> Path:
    """Write ``path`` (JSON manifest) and its sibling ``.bin`` blob of little-endian float32.

    Parameters come first in the blob, then normalization running statistics.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = []
    offset = 0

    def entry(name, arr, **tags):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        chunks.append(raw)
        e = {"name": name, "shape": list(arr.shape), **tags, "offset": offset, "nbytes": len(raw)}
        offset += len(raw)
        return e

    params = [entry(p.name, p.value.data, group=p.group) for p in model.parameters()]
    buffers = [entry(k, v) for k, v in model.buffers.items()]
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "blob": blob_path(path).name,
        "params": params,
        "buffers": buffers,
        "extra": extra or {},
    }
    blob_path(path).write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Manifest, parameter arrays and buffer arrays of a checkpoint."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} manifest")
    blob = (path.parent / manifest["blob"]).read_bytes()

    def arrays(entries):
        out = {}
        for e in entries:
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            if e["nbytes"] != 4 * count or e["offset"] + e["nbytes"] > len(blob):
                raise ValueError(f"corrupt entry for {e['name']} in {path}")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
            out[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
        return out

    return manifest, arrays(manifest["params"]), arrays(manifest.get("buffers", []))


def load_checkpoint(path: str | Path, config: SANetConfig | None = None) -> SANet:
    """Rebuild a model (in eval mode) from a manifest.

    ``config``, if given, must agree with the stored one on embedding size.
    """
    manifest, state, buffers = read_checkpoint(path)
    stored = SANetConfig.from_dict(manifest["config"])
    if config is not None and config.embedding_dim != stored.embedding_dim:
        raise ValueError(
            f"embedding dim mismatch: config gives {config.embedding_dim}, "
            f"checkpoint {stored.embedding_dim}"
        )
    model = SANet(config or stored)
    groups = {e["name"]: e["group"] for e in manifest["params"]}
    for name, p in model.params.items():
        if name in groups and groups[name] != p.group:
            raise ValueError(f"group tag mismatch for {name}: {groups[name]} vs {p.group}")
    model.load_state(state)
    if set(buffers) != set(model.buffers):
        raise ValueError("checkpoint normalization statistics do not match the model")
    for k, v in buffers.items():
        if v.shape != model.buffers[k].shape:
            raise ValueError(f"shape mismatch for buffer {k}")
        model.buffers[k] = v.astype(default_dtype())
    return model.eval()
