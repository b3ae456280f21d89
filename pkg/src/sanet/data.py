"""Procedural top-down "vehicle" images with known orientation.

Each identity is an elongated body in one of a few shared colours, a light
marker at its front end, and two or three coloured patches locked to
identity-specific slots in the body frame.  Identities sharing a body colour
differ only in where their patches sit, so telling them apart needs the
patches' positions relative to the front.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TWO_PI = 2 * math.pi

BODY_COLORS = np.array([
    [0.86, 0.86, 0.82],
    [0.14, 0.14, 0.18],
    [0.70, 0.16, 0.14],
    [0.18, 0.30, 0.68],
])
PATCH_COLORS = np.array([
    [0.95, 0.85, 0.10],
    [0.10, 0.75, 0.25],
    [0.95, 0.45, 0.05],
    [0.10, 0.80, 0.85],
    [0.80, 0.15, 0.75],
])
FRONT_COLOR = np.array([0.55, 0.85, 1.00])

BODY_LENGTH = 0.62  # fraction of the image side
BODY_WIDTH = 0.30
FRONT_DEPTH = 0.16  # fraction of the body length
# patch centres in body units: u along the body (+ = front), v across it
PATCH_SLOTS = [(u, v) for u in (-0.34, -0.08, 0.16) for v in (-0.22, 0.22)]
PATCH_SIZE = (0.20, 0.36)  # (along, across) fraction of body length / width


@dataclass
class SyntheticSpec:
    num_train_identities: int = 64
    num_test_identities: int = 32
    images_per_identity: int = 20
    image_size: int = 64
    rotation_range: tuple[float, float] = (0.0, TWO_PI)
    translation_jitter: float = 0.06
    scale_jitter: tuple[float, float] = (0.9, 1.1)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.rotation_range = tuple(float(x) for x in self.rotation_range)
        self.scale_jitter = tuple(float(x) for x in self.scale_jitter)
        lo, hi = self.rotation_range
        if not (0.0 <= lo < hi <= TWO_PI):
            raise ValueError(f"rotation_range must satisfy 0 <= lo < hi <= 2pi, got {self.rotation_range}")
        if not (0 < self.scale_jitter[0] <= self.scale_jitter[1]):
            raise ValueError(f"bad scale_jitter {self.scale_jitter}")
        if self.translation_jitter < 0 or self.noise_sigma < 0:
            raise ValueError("translation_jitter and noise_sigma must be non-negative")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")

    @property
    def num_identities(self) -> int:
        return self.num_train_identities + self.num_test_identities

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rotation_range"] = list(self.rotation_range)
        d["scale_jitter"] = list(self.scale_jitter)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


@dataclass
class Appearance:
    body_color: np.ndarray
    patches: list[tuple[float, float, np.ndarray]]


@dataclass
class Jitter:
    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0
    background: float = 0.45
    noise_seed: int | None = None


@dataclass
class LabeledImage:
    pixels: np.ndarray  # [3, S, S] float32 in [0, 1]
    identity: int
    orientation: float
    name: str = ""


def identity_appearance(identity_seed) -> Appearance:
    rng = np.random.default_rng(identity_seed)
    body = BODY_COLORS[rng.integers(len(BODY_COLORS))]
    count = int(rng.integers(2, 4))
    slots = rng.choice(len(PATCH_SLOTS), size=count, replace=False)
    colors = rng.choice(len(PATCH_COLORS), size=count, replace=True)
    patches = [(*PATCH_SLOTS[s], PATCH_COLORS[c]) for s, c in zip(slots, colors)]
    return Appearance(body_color=body, patches=patches)


def draw_jitter(rng: np.random.Generator, spec: SyntheticSpec) -> Jitter:
    t = spec.translation_jitter
    return Jitter(
        dx=float(rng.uniform(-t, t)),
        dy=float(rng.uniform(-t, t)),
        scale=float(rng.uniform(*spec.scale_jitter)),
        background=float(rng.uniform(0.38, 0.52)),
        noise_seed=int(rng.integers(2**31)),
    )


def render_identity(identity_seed, orientation: float, jitter: Jitter, spec: SyntheticSpec,
                    identity: int = -1) -> LabeledImage:
    """Render one image; the front of the body points along ``orientation``.

    Orientation is measured in image coordinates (x right, y down), so it
    increases clockwise on screen.  Rendering is supersampled 2x and box
    filtered.
    """
    if not 0.0 <= orientation < TWO_PI:
        raise ValueError(f"orientation must lie in [0, 2pi), got {orientation}")
    app = identity_appearance(identity_seed)
    s = spec.image_size
    ss = 2 * s
    # pixel centres of the supersampled grid in units of the image side, origin at the centre
    coords = (np.arange(ss) + 0.5) / ss - 0.5
    x = coords[None, :] - jitter.dx
    y = coords[:, None] - jitter.dy
    c, sn = math.cos(orientation), math.sin(orientation)
    # body frame: u toward the front, v to the body's right
    u = (c * x + sn * y) / jitter.scale
    v = (-sn * x + c * y) / jitter.scale
    half_len, half_wid = BODY_LENGTH / 2, BODY_WIDTH / 2
    un = u / half_len  # [-1, 1] along the body
    vn = v / half_wid

    img = np.empty((3, ss, ss))
    img[:] = jitter.background
    body = (np.abs(un) <= 1) & (np.abs(vn) <= 1)
    for ch in range(3):
        img[ch][body] = app.body_color[ch]
    front = body & (un >= 1 - 2 * FRONT_DEPTH)
    for ch in range(3):
        img[ch][front] = FRONT_COLOR[ch]
    pa, pc = PATCH_SIZE
    for pu, pv, color in app.patches:
        m = (np.abs(un - 2 * pu) <= pa) & (np.abs(vn - 2 * pv) <= pc)
        for ch in range(3):
            img[ch][m] = color[ch]

    img = img.reshape(3, s, 2, s, 2).mean(axis=(2, 4))
    if spec.noise_sigma > 0 and jitter.noise_seed is not None:
        img = img + np.random.default_rng(jitter.noise_seed).normal(0.0, spec.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return LabeledImage(pixels=img, identity=identity, orientation=float(orientation))


def _image_rng(spec: SyntheticSpec, identity: int, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, identity, index, 1])


def _identity_seed(spec: SyntheticSpec, identity: int):
    return [spec.seed, identity, 0]


def render_indexed(spec: SyntheticSpec, identity: int, index: int, split: str) -> LabeledImage:
    rng = _image_rng(spec, identity, index)
    lo, hi = spec.rotation_range
    orientation = float(rng.uniform(lo, hi)) % TWO_PI
    img = render_identity(_identity_seed(spec, identity), orientation, draw_jitter(rng, spec), spec,
                          identity=identity)
    img.name = f"{split}_{identity:04d}_{index:03d}"
    return img


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)


@dataclass
class Split:
    name: str
    images: np.ndarray  # [N, 3, S, S] float32
    identities: np.ndarray
    orientations: np.ndarray
    names: list[str]

    def __len__(self):
        return len(self.names)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.name, self.images[idx], self.identities[idx], self.orientations[idx],
                     [self.names[i] for i in idx])


@dataclass
class Dataset:
    spec: SyntheticSpec
    train: Split
    query: Split
    gallery: Split
    splits: dict = field(init=False)

    def __post_init__(self):
        self.splits = {"train": self.train, "query": self.query, "gallery": self.gallery}


def _stack(name, items: list[LabeledImage]) -> Split:
    return Split(
        name=name,
        # PPM is the storage format; keep in-memory data identical to what disk holds
        images=np.stack([quantize(i.pixels) for i in items]).astype(np.float32) / 255.0,
        identities=np.array([i.identity for i in items], dtype=np.int64),
        orientations=np.array([i.orientation for i in items], dtype=np.float64),
        names=[i.name for i in items],
    )


def generate_dataset(spec: SyntheticSpec) -> Dataset:
    """Train identities first, then test identities with one query and one gallery image each."""
    if spec.images_per_identity < 3:
        raise ValueError("images_per_identity must be at least 3")
    if spec.num_train_identities < 2 or spec.num_test_identities < 2:
        raise ValueError(
            f"need >= 2 train and >= 2 test identities, got {spec.num_train_identities} "
            f"and {spec.num_test_identities}"
        )
    train = [render_indexed(spec, i, k, "train")
             for i in range(spec.num_train_identities) for k in range(spec.images_per_identity)]
    test_ids = range(spec.num_train_identities, spec.num_identities)
    query = [render_indexed(spec, i, 0, "query") for i in test_ids]
    gallery = [render_indexed(spec, i, 1, "gallery") for i in test_ids]
    return Dataset(spec, _stack("train", train), _stack("query", query), _stack("gallery", gallery))


# ------------------------------------------------------------------ disk I/O

def write_ppm(path: Path, pixels: np.ndarray) -> None:
    """Binary P6, maxval 255; ``pixels`` is [3, H, W] in [0, 1]."""
    arr = quantize(pixels).transpose(1, 2, 0)
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P6" or tokens[3] != "255":
        raise ValueError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    meta = {"spec": ds.spec.to_dict(), "splits": {}}
    rows = []
    for split in ds.splits.values():
        entries = []
        for k in range(len(split)):
            name = split.names[k]
            write_ppm(out / "images" / f"{name}.ppm", split.images[k])
            entries.append({"image": f"images/{name}.ppm", "identity": int(split.identities[k]),
                            "orientation": float(split.orientations[k])})
            rows.append([f"images/{name}.ppm", int(split.identities[k]),
                         repr(float(split.orientations[k])), split.name])
        meta["splits"][split.name] = entries
    (out / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "identity", "orientation_radians", "split"])
        writer.writerows(rows)
    return out


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    meta = json.loads((root / "meta.json").read_text())
    spec = SyntheticSpec.from_dict(meta["spec"])
    splits = {}
    for name in ("train", "query", "gallery"):
        entries = meta["splits"][name]
        splits[name] = Split(
            name=name,
            images=np.stack([read_ppm(root / e["image"]) for e in entries]),
            identities=np.array([e["identity"] for e in entries], dtype=np.int64),
            orientations=np.array([e["orientation"] for e in entries], dtype=np.float64),
            names=[Path(e["image"]).stem for e in entries],
        )
    return Dataset(spec, splits["train"], splits["query"], splits["gallery"])


def dataset_hash(data_dir) -> str:
    """SHA-256 over meta.json, labels.csv and every image, in sorted path order."""
    root = Path(data_dir)
    h = hashlib.sha256()
    files = [root / "meta.json", root / "labels.csv", *sorted((root / "images").glob("*.ppm"))]
    for f in files:
        h.update(f.relative_to(root).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()


# ------------------------------------------------------------ augmentation

@dataclass
class AugmentConfig:
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    gain: tuple[float, float] = (0.8, 1.2)
    offset: tuple[float, float] = (-0.1, 0.1)


def augment(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random erasing (filled with the per-channel image mean) then colour jitter."""
    out = np.array(img, dtype=np.float32, copy=True)
    _, h, w = out.shape
    if rng.random() < cfg.erase_prob:
        fill = out.mean(axis=(1, 2))
        for _ in range(10):
            area = rng.uniform(*cfg.erase_area) * h * w
            log_lo, log_hi = np.log(cfg.erase_aspect)
            aspect = math.exp(rng.uniform(log_lo, log_hi))
            eh = int(round(math.sqrt(area * aspect)))
            ew = int(round(math.sqrt(area / aspect)))
            if 0 < eh < h and 0 < ew < w:
                y0 = int(rng.integers(0, h - eh + 1))
                x0 = int(rng.integers(0, w - ew + 1))
                out[:, y0:y0 + eh, x0:x0 + ew] = fill[:, None, None]
                break
    gain = rng.uniform(*cfg.gain, size=3).astype(np.float32)
    offset = rng.uniform(*cfg.offset, size=3).astype(np.float32)
    if not (np.all(gain == 1) and np.all(offset == 0)):
        out = out * gain[:, None, None] + offset[:, None, None]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- sampling

def pk_sample(split: Split, P: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of P distinct identities with K images each, in shuffled order."""
    ids, counts = np.unique(split.identities, return_counts=True)
    eligible = ids[counts >= K]
    if len(eligible) < P:
        raise ValueError(f"need {P} identities with >= {K} images, found {len(eligible)}")
    chosen = rng.choice(eligible, size=P, replace=False)
    picks = []
    for ident in chosen:
        pool = np.flatnonzero(split.identities == ident)
        picks.append(rng.choice(pool, size=K, replace=False))
    batch = np.concatenate(picks)
    rng.shuffle(batch)
    return batch
