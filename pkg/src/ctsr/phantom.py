"""Synthetic abdomen phantoms, HU windowing, dataset building and raw-slice ingestion."""

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io
from .errors import ConfigError, FormatError, PreconditionError, StateError

HU_LO = -135.0
HU_HI = 215.0
AIR_HU = -1000.0
FAT_HU = -100.0
SOFT_TISSUE_HU = 40.0
TEXTURE_HU = 15.0

# canonical vocabulary order; captions list organs in this order
ORGANS = ("liver", "spleen", "kidney", "aorta", "vertebra", "bowel")
ORGAN_HU = {
    "liver": 60.0,
    "spleen": 50.0,
    "kidney": 120.0,
    "aorta": 180.0,
    "vertebra": 400.0,
    "bowel": -60.0,
}
# semi-axis ranges as fractions of the image side: (a_lo, a_hi, b_lo, b_hi)
_ORGAN_AXES = {
    "liver": (0.12, 0.18, 0.09, 0.14),
    "spleen": (0.05, 0.08, 0.04, 0.06),
    "kidney": (0.035, 0.05, 0.05, 0.07),
    "aorta": (0.025, 0.035, 0.025, 0.035),
    "vertebra": (0.05, 0.07, 0.045, 0.06),
    "bowel": (0.04, 0.08, 0.03, 0.06),
}
VALID_SIZES = (64, 128, 256)


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float = 0.0

    def mask(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
        dx, dy = xx - self.cx, yy - self.cy
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = (dx * c + dy * s) / self.a
        v = (-dx * s + dy * c) / self.b
        return u * u + v * v <= 1.0

    def boundary(self, n: int = 64) -> np.ndarray:
        theta = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        c, s = np.cos(self.angle), np.sin(self.angle)
        px, py = self.a * np.cos(theta), self.b * np.sin(theta)
        return np.stack([self.cx + px * c - py * s, self.cy + px * s + py * c], axis=1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        dx, dy = points[:, 0] - self.cx, points[:, 1] - self.cy
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = (dx * c + dy * s) / self.a
        v = (-dx * s + dy * c) / self.b
        return u * u + v * v <= 1.0


@dataclass(frozen=True)
class Organ:
    name: str
    region: Ellipse
    mean_hu: float


@dataclass(frozen=True)
class AnatomyMeta:
    organs: tuple = ()
    body: Ellipse | None = None

    def organ_names(self) -> list[str]:
        """Distinct organ names in canonical vocabulary order."""
        present = {o.name for o in self.organs}
        return [name for name in ORGANS if name in present]

    def to_dict(self) -> dict:
        return {
            "organs": [
                {"name": o.name, "region": asdict(o.region), "mean_hu": o.mean_hu} for o in self.organs
            ],
            "body": asdict(self.body) if self.body is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AnatomyMeta":
        organs = tuple(
            Organ(o["name"], Ellipse(**o["region"]), float(o["mean_hu"])) for o in data.get("organs", [])
        )
        body = Ellipse(**data["body"]) if data.get("body") else None
        return cls(organs=organs, body=body)


@dataclass
class SliceImage:
    pixels: np.ndarray  # H x W, Hounsfield units
    meta: AnatomyMeta | None = field(default=None)


def _value_noise(rng: np.random.Generator, size: int, grid: int = 9) -> np.ndarray:
    coarse = rng.standard_normal((grid, grid))
    fine = ndimage.zoom(coarse, size / grid, order=3, mode="reflect", grid_mode=True)[:size, :size]
    fine = fine - fine.mean()
    return fine / (fine.std() + 1e-12)


def _place_organ(rng, name: str, size: int, inner: Ellipse) -> Ellipse:
    a_lo, a_hi, b_lo, b_hi = _ORGAN_AXES[name]
    for _ in range(200):
        a = rng.uniform(a_lo, a_hi) * size
        b = rng.uniform(b_lo, b_hi) * size
        angle = rng.uniform(-np.pi / 6, np.pi / 6)
        cx = rng.uniform(inner.cx - inner.a, inner.cx + inner.a)
        cy = rng.uniform(inner.cy - inner.b, inner.cy + inner.b)
        candidate = Ellipse(cx, cy, a, b, angle)
        if inner.contains(candidate.boundary()).all():
            return candidate
    # fallback: centred and small enough to always fit
    return Ellipse(inner.cx, inner.cy, min(a_lo * size, 0.5 * inner.b), min(b_lo * size, 0.5 * inner.b), 0.0)


def generate_phantom(seed: int, size: int = 128) -> SliceImage:
    """Draw one abdomen-like phantom in HU from ``seed``.

    The body is a fat-rimmed soft-tissue ellipse on an air background with
    2 to 6 distinct organ ellipses inside and a smooth value-noise texture
    (about 15 HU) over all tissue.
    """
    if size not in VALID_SIZES:
        raise ConfigError(f"phantom size must be one of {VALID_SIZES}, got {size}")
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    rng = np.random.default_rng(seed)
    c = size / 2.0
    body = Ellipse(
        c + rng.uniform(-0.02, 0.02) * size,
        c + rng.uniform(-0.02, 0.02) * size,
        rng.uniform(0.40, 0.46) * size,
        rng.uniform(0.30, 0.37) * size,
    )
    rim = rng.uniform(0.03, 0.05) * size
    inner = Ellipse(body.cx, body.cy, body.a - rim, body.b - rim)

    hu = np.full((size, size), AIR_HU)
    body_mask = body.mask(size)
    hu[body_mask] = FAT_HU
    hu[inner.mask(size)] = SOFT_TISSUE_HU

    count = int(rng.integers(2, 7))
    names = [ORGANS[i] for i in sorted(rng.choice(len(ORGANS), size=count, replace=False))]
    organs = []
    for name in names:
        region = _place_organ(rng, name, size, inner)
        mean_hu = ORGAN_HU[name] + rng.uniform(-5.0, 5.0)
        organs.append(Organ(name, region, float(mean_hu)))
    # large organs first so small ones stay visible
    for organ in sorted(organs, key=lambda o: -o.region.a * o.region.b):
        hu[organ.region.mask(size)] = organ.mean_hu

    texture = TEXTURE_HU * _value_noise(rng, size)
    hu[body_mask] += texture[body_mask]
    return SliceImage(hu.astype(np.float32), AnatomyMeta(tuple(organs), body))


def clip_hu(img: SliceImage, hu_lo: float = HU_LO, hu_hi: float = HU_HI) -> SliceImage:
    if not hu_lo < hu_hi:
        raise ConfigError(f"need hu_lo < hu_hi, got {hu_lo}, {hu_hi}")
    return SliceImage(np.clip(img.pixels, hu_lo, hu_hi).astype(np.float32), img.meta)


def normalize(img: SliceImage, hu_lo: float = HU_LO, hu_hi: float = HU_HI) -> np.ndarray:
    """Linear map of a clipped slice from [hu_lo, hu_hi] onto [0, 1]."""
    px = np.asarray(img.pixels, dtype=np.float64)
    if px.min() < hu_lo or px.max() > hu_hi:
        raise PreconditionError("normalize expects a slice already clipped to the window")
    return ((px - hu_lo) / (hu_hi - hu_lo)).astype(np.float32)


def window(img: SliceImage, hu_lo: float = HU_LO, hu_hi: float = HU_HI) -> np.ndarray:
    return normalize(clip_hu(img, hu_lo, hu_hi), hu_lo, hu_hi)


def load_slice_raw(path, width: int, height: int, slope: float = 1.0, intercept: float = -1024.0) -> SliceImage:
    data = Path(path).read_bytes()
    if len(data) != 2 * width * height:
        raise FormatError(f"{path}: expected {2 * width * height} bytes for {width}x{height} u16, got {len(data)}")
    raw = np.frombuffer(data, dtype="<u2").reshape(height, width)
    return SliceImage((raw.astype(np.float64) * slope + intercept).astype(np.float32), None)


def write_slice_raw(path, raw) -> None:
    raw = np.asarray(raw)
    if raw.min() < 0 or raw.max() > 65535:
        raise FormatError("raw values must fit in u16")
    io.atomic_write_bytes(path, raw.astype("<u2").tobytes())


# ---------------------------------------------------------------- datasets

def split_seeds(seed: int, train_count: int, test_count: int) -> tuple[list[int], list[int]]:
    """Contiguous, disjoint item-seed ranges for the two splits."""
    base = int(seed) * 1_000_000
    train = [base + i for i in range(train_count)]
    test = [base + train_count + j for j in range(test_count)]
    return train, test


def render_item(item_seed: int, size: int, hu_lo: float, hu_hi: float) -> tuple[np.ndarray, AnatomyMeta]:
    sl = generate_phantom(item_seed, size)
    return window(sl, hu_lo, hu_hi), sl.meta


def build_dataset(out_dir, cfg: dict) -> dict:
    """Generate, window and persist train/test phantoms.

    ``cfg`` is the ``data`` config section (train_count, test_count, size,
    seed, hu_lo, hu_hi). Returns ``{"train": manifest, "test": manifest}``;
    both manifests and an index (``dataset.json``) are written under
    ``out_dir``.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    size, seed = int(cfg["size"]), int(cfg["seed"])
    hu_lo, hu_hi = float(cfg["hu_lo"]), float(cfg["hu_hi"])
    config_hash = io.hash_json(cfg)
    seeds = dict(zip(("train", "test"), split_seeds(seed, int(cfg["train_count"]), int(cfg["test_count"]))))
    manifests = {}
    for split, split_seed_list in seeds.items():
        items = []
        for k, item_seed in enumerate(split_seed_list):
            image, meta = render_item(item_seed, size, hu_lo, hu_hi)
            rel_img = f"{split}/{k:05d}.ssrb"
            rel_meta = f"{split}/{k:05d}.json"
            io.write_image(out_dir / rel_img, image)
            io.write_json(out_dir / rel_meta, meta.to_dict())
            items.append({"image": rel_img, "meta": rel_meta, "seed": item_seed})
        manifest = {
            "split": split,
            "size": size,
            "items": items,
            "window": [hu_lo, hu_hi],
            "created_with": {"config_hash": config_hash, "seed": seed},
        }
        io.write_json(out_dir / f"{split}.json", manifest)
        manifests[split] = manifest
    io.write_json(
        out_dir / "dataset.json",
        {
            "config": cfg,
            "config_hash": config_hash,
            "manifest_hashes": {s: io.hash_json(m) for s, m in manifests.items()},
        },
    )
    return manifests


class Dataset:
    """Read-only view over a built dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        index = self.root / "dataset.json"
        if not index.exists():
            raise StateError(f"no dataset index at {index}; run synth-data first")
        self.index = io.read_json(index)
        self.manifests = {s: io.read_json(self.root / f"{s}.json") for s in ("train", "test")}
        self.size = int(self.manifests["train"]["size"])

    def items(self, split: str) -> list[dict]:
        return self.manifests[split]["items"]

    def images(self, split: str) -> np.ndarray:
        return np.stack([io.read_image(self.root / it["image"]) for it in self.items(split)])

    def metas(self, split: str) -> list[AnatomyMeta]:
        return [AnatomyMeta.from_dict(io.read_json(self.root / it["meta"])) for it in self.items(split)]

    def manifest_hash(self, split: str) -> str:
        return io.hash_json(self.manifests[split])
