"""Procedural street-scene generator with paired label maps.

Every place gets a fixed layout of the six clustered classes (sky, ground,
buildings, vegetation, poles/signs, vehicles) drawn on a canvas slightly
larger than the image. A view is a crop of that canvas at a small random
offset (the declared geometric jitter), so the label maps of two views of
a place agree up to a translation.

RGB is rendered from the layout: each class carries its own texture
pattern, each object instance a place-specific random colour. Views get
mild photometric nuisance and occluders; queries flagged as corrupted get a
severe photometric corruption (channel permutation, inversion, strong
colour cast, gamma, noise). Label maps are never corrupted.
"""

from __future__ import annotations

import json
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigError
from ..slme import BUILDING, DYNAMIC, GROUND, OTHER, SKY, VEGETATION
from .images import write_labelmap
from .records import PlaceRecord, Pose, load_manifest, save_manifest

META_FILE = "synth_meta.json"


@dataclass
class SynthConfig:
    n_places: int = 200
    views_per_place: int = 3
    image_size: tuple[int, int] = (64, 64)
    corrupt_fraction: float = 0.5
    color_jitter: float = 0.15
    illumination: float = 0.1
    occluder_density: float = 0.03
    noise: float = 0.02
    geometric_jitter: int = 3
    # fraction of places per subset; each subset gets its own manifest
    subsets: dict[str, float] = field(default_factory=lambda: {"train": 0.6, "val": 0.1, "test": 0.3})
    place_spacing_m: float = 100.0
    pose_jitter_m: float = 4.0
    heading_jitter_deg: float = 8.0
    seed: int = 0
    # subsets whose queries may be corrupted; None means every subset
    corrupt_subsets: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.corrupt_subsets is not None:
            self.corrupt_subsets = tuple(str(s) for s in self.corrupt_subsets)
            unknown = set(self.corrupt_subsets) - set(self.subsets)
            if unknown:
                raise ConfigError(f"corrupt_subsets names unknown subset(s) {sorted(unknown)}")
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if self.n_places < 2:
            raise ConfigError("n_places must be >= 2")
        if self.views_per_place < 2:
            raise ConfigError("views_per_place must be >= 2")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise ConfigError("corrupt_fraction must be in [0, 1]")
        if min(self.image_size) < 16:
            raise ConfigError("image_size must be at least 16 x 16")
        if self.geometric_jitter < 0:
            raise ConfigError("geometric_jitter must be >= 0")
        if not self.subsets or any(v < 0 for v in self.subsets.values()):
            raise ConfigError("subsets must map names to nonnegative fractions")
        # same-place views must stay FOV-positive under the default tolerances
        worst = 2 * self.pose_jitter_m / 25.0 + 2 * self.heading_jitter_deg / 40.0
        if worst >= 1.0 or 2 * self.pose_jitter_m > 25.0:
            raise ConfigError("pose/heading jitter too large for same-place views to overlap")
        if self.place_spacing_m <= 25.0 + 2 * self.pose_jitter_m:
            raise ConfigError("place_spacing_m too small: distinct places would be ground-truth matches")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown synth config field(s): {sorted(unknown)}")
        return cls(**doc)

    def subset_counts(self) -> dict[str, int]:
        names = list(self.subsets)
        total = sum(self.subsets.values())
        counts = {n: int(round(self.n_places * self.subsets[n] / total)) for n in names[:-1]}
        counts[names[-1]] = self.n_places - sum(counts.values())
        if any(c < 0 for c in counts.values()):
            raise ConfigError(f"subset fractions give negative counts: {counts}")
        return counts


@dataclass
class SynthOutput:
    root: Path
    manifests: dict[str, Path]
    meta: dict


# Layout ---------------------------------------------------------------------


def _ellipse(ch: int, cw: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:ch, 0:cw]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def make_layout(rng: np.random.Generator, ch: int, cw: int) -> tuple[np.ndarray, np.ndarray]:
    """Class-index canvas and an instance-index canvas of the same shape."""
    labels = np.full((ch, cw), SKY, dtype=np.uint8)
    inst = np.zeros((ch, cw), dtype=np.int32)
    horizon = int(rng.uniform(0.4, 0.65) * ch)
    labels[horizon:] = GROUND
    inst[horizon:] = 1
    n_inst = 2

    def put(mask, cls):
        nonlocal n_inst
        labels[mask] = cls
        inst[mask] = n_inst
        n_inst += 1

    for _ in range(rng.integers(2, 6)):
        w = int(rng.integers(cw // 8, cw // 3))
        x0 = int(rng.integers(-w // 2, cw - w // 2))
        top = int(rng.integers(int(0.05 * ch), max(int(0.05 * ch) + 1, horizon - 4)))
        bottom = horizon + int(rng.integers(0, ch // 10 + 1))
        mask = np.zeros_like(labels, dtype=bool)
        mask[top:bottom, max(0, x0) : max(0, x0 + w)] = True
        put(mask, BUILDING)
    for _ in range(rng.integers(1, 4)):
        cy = rng.uniform(0.25 * ch, horizon)
        cx = rng.uniform(0, cw)
        put(_ellipse(ch, cw, cy, cx, rng.uniform(ch / 14, ch / 6), rng.uniform(cw / 14, cw / 6)), VEGETATION)
    for _ in range(rng.integers(1, 4)):
        x0 = int(rng.integers(0, cw - 3))
        w = int(rng.integers(1, 4))
        top = int(rng.integers(int(0.1 * ch), horizon))
        bottom = min(ch, horizon + int(rng.integers(2, ch // 6 + 3)))
        mask = np.zeros_like(labels, dtype=bool)
        mask[top:bottom, x0 : x0 + w] = True
        put(mask, OTHER)
    for _ in range(rng.integers(0, 3)):
        w = int(rng.integers(cw // 10, cw // 5 + 1))
        h = int(rng.integers(max(2, ch // 14), ch // 8 + 1))
        y0 = min(ch - h, horizon + int(rng.integers(0, ch // 6 + 1)))
        x0 = int(rng.integers(0, cw - w))
        mask = np.zeros_like(labels, dtype=bool)
        mask[y0 : y0 + h, x0 : x0 + w] = True
        put(mask, DYNAMIC)
    return labels, inst


def _class_textures(rng: np.random.Generator, ch: int, cw: int) -> np.ndarray:
    """Per-class texture in [0, 1] on the canvas, shape ``(6, ch, cw)``.

    Textures differ in orientation and period, which survive the channel
    permutations, inversions and gamma changes applied by :func:`corrupt`.
    """
    yy, xx = np.mgrid[0:ch, 0:cw]
    tex = np.empty((6, ch, cw), dtype=np.float64)
    tex[SKY] = 1.0 - 0.3 * yy / ch
    tex[GROUND] = (yy // 2) % 2
    tex[BUILDING] = (xx // 2) % 2
    tex[VEGETATION] = ((yy + xx) // 2) % 2
    tex[DYNAMIC] = ((yy - xx) // 2) % 2
    tex[OTHER] = ((yy // 2 + xx // 2) % 2)
    return tex


def render_canvas(rng: np.random.Generator, labels: np.ndarray, inst: np.ndarray) -> np.ndarray:
    """Clean RGB canvas in [0, 1], shape ``(ch, cw, 3)``."""
    ch, cw = labels.shape
    tex = _class_textures(rng, ch, cw)
    colors = rng.uniform(0.15, 0.95, size=(int(inst.max()) + 1, 3))
    texture = np.take_along_axis(tex, labels[None].astype(np.int64), axis=0)[0]
    return colors[inst] * (0.3 + 0.7 * texture[..., None])


# Per-view photometrics ------------------------------------------------------


def _nuisance(rng: np.random.Generator, img: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    h, w, _ = img.shape
    img = img * rng.uniform(1 - cfg.color_jitter, 1 + cfg.color_jitter, size=3)
    img = img + rng.uniform(-cfg.illumination, cfg.illumination)
    n_occ = rng.poisson(cfg.occluder_density * h * w / 30.0)
    for _ in range(n_occ):
        oh, ow = rng.integers(3, 8, size=2)
        y0, x0 = rng.integers(0, h - oh), rng.integers(0, w - ow)
        img[y0 : y0 + oh, x0 : x0 + ow] = rng.uniform(0, 1, size=3)
    return img + rng.normal(0, cfg.noise, size=img.shape)


def corrupt(rng: np.random.Generator, img: np.ndarray) -> np.ndarray:
    """Severe appearance change that leaves scene geometry intact."""
    perm = rng.permutation(3)
    while np.array_equal(perm, np.arange(3)):
        perm = rng.permutation(3)
    img = np.clip(img[..., perm], 0, 1)
    if rng.random() < 0.5:
        img = 1.0 - img
    img = img ** rng.uniform(0.5, 2.0)
    img = img * rng.uniform(0.4, 1.3, size=3) + rng.uniform(-0.15, 0.15, size=3)
    return img + rng.normal(0, 0.06, size=img.shape)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


# Generation -----------------------------------------------------------------


def synth_generate(cfg: SynthConfig, out_dir: str | Path, overwrite: bool = False) -> SynthOutput:
    """Write images, label maps, one manifest per subset and a metadata file.

    Output is assembled in a temporary sibling directory and moved into
    place at the end; on failure nothing is left behind.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not overwrite:
            raise ConfigError(f"output directory {out_dir} is not empty")
        shutil.rmtree(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".synth-", dir=out_dir.parent))
    try:
        meta = _generate_into(cfg, tmp)
        if out_dir.exists():
            out_dir.rmdir()
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    manifests = {name: out_dir / f"{name}.csv" for name in meta["subsets"]}
    return SynthOutput(out_dir, manifests, meta)


def _generate_into(cfg: SynthConfig, root: Path) -> dict:
    (root / "images").mkdir()
    (root / "labels").mkdir()
    h, w = cfg.image_size
    jit = cfg.geometric_jitter
    ch, cw = h + 2 * jit, w + 2 * jit
    seeds = np.random.SeedSequence(cfg.seed)
    place_seeds = seeds.spawn(cfg.n_places)
    split_rng = np.random.default_rng(seeds.spawn(1)[0])

    counts = cfg.subset_counts()
    grid = int(np.ceil(np.sqrt(cfg.n_places)))
    meta = {"config": asdict(cfg), "subsets": {}, "records": {}}
    place = 0
    for subset, n in counts.items():
        records: list[PlaceRecord] = []
        query_ids: list[str] = []
        for _ in range(n):
            rng = np.random.default_rng(place_seeds[place])
            labels, inst = make_layout(rng, ch, cw)
            canvas = render_canvas(rng, labels, inst)
            base = np.array([(place % grid) * cfg.place_spacing_m, (place // grid) * cfg.place_spacing_m])
            heading = rng.uniform(0, 360)
            for view in range(cfg.views_per_place):
                rid = f"{subset}_p{place:04d}_v{view}"
                dy, dx = (int(v) for v in rng.integers(-jit, jit + 1, size=2))
                sl = (slice(jit + dy, jit + dy + h), slice(jit + dx, jit + dx + w))
                img = _nuisance(rng, canvas[sl].copy(), cfg)
                Image.fromarray(_to_uint8(img)).save(root / "images" / f"{rid}.png", format="PNG")
                write_labelmap(labels[sl], root / "labels" / f"{rid}.png")
                r = rng.uniform(0, cfg.pose_jitter_m)
                a = rng.uniform(0, 2 * np.pi)
                pose = Pose(
                    float(base[0] + r * np.cos(a)),
                    float(base[1] + r * np.sin(a)),
                    float(heading + rng.uniform(-cfg.heading_jitter_deg, cfg.heading_jitter_deg)),
                )
                split = "database" if view == 0 else "query"
                records.append(
                    PlaceRecord(rid, f"images/{rid}.png", f"labels/{rid}.png", pose, split)
                )
                if split == "query":
                    query_ids.append(rid)
                meta["records"][rid] = {
                    "subset": subset,
                    "place": place,
                    "view": view,
                    "offset": [dy, dx],
                    "corrupted": False,
                }
            place += 1
        eligible = cfg.corrupt_subsets is None or subset in cfg.corrupt_subsets
        n_corrupt = int(round(cfg.corrupt_fraction * len(query_ids))) if eligible else 0
        picked = sorted(split_rng.choice(len(query_ids), size=n_corrupt, replace=False).tolist())
        for i in picked:
            rid = query_ids[i]
            path = root / "images" / f"{rid}.png"
            clean = np.asarray(Image.open(path), dtype=np.float64) / 255.0
            Image.fromarray(_to_uint8(corrupt(split_rng, clean))).save(path, format="PNG")
            meta["records"][rid]["corrupted"] = True
        # relative paths: save_manifest keeps them relative to the manifest dir
        records = [
            PlaceRecord(r.id, str(root / r.rgb_path), str(root / r.seg_path), r.pose, r.split)
            for r in records
        ]
        save_manifest(records, root / f"{subset}.csv")
        meta["subsets"][subset] = {"places": n, "records": len(records), "corrupted": n_corrupt}
    (root / META_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return meta


def load_meta(root: str | Path) -> dict:
    return json.loads((Path(root) / META_FILE).read_text(encoding="utf-8"))


def load_synth(root: str | Path) -> tuple[dict[str, list[PlaceRecord]], dict]:
    """Reload the manifests and metadata written by :func:`synth_generate`."""
    meta = load_meta(root)
    return {name: load_manifest(Path(root) / f"{name}.csv") for name in meta["subsets"]}, meta
