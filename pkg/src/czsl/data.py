"""Label space, manifest I/O, synthetic shape/fill dataset generation, embeddings.

A dataset lives in a directory with a ``manifest.tsv`` (UTF-8, header
``split\tattribute\tobject\timage``, image paths relative to the manifest) and
the image files it references. The seen composition set is defined as the set
of (attribute, object) pairs occurring in the train split.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigurationError, DataValidationError

SPLITS = ("train", "val", "test")

_COLORS = {
    "red": (220, 45, 45),
    "green": (50, 190, 70),
    "blue": (50, 95, 230),
    "yellow": (235, 220, 60),
    "magenta": (210, 60, 205),
    "cyan": (60, 205, 215),
    "orange": (240, 150, 40),
    "purple": (140, 70, 205),
}

# Alternating solid/striped fills so any prefix of the vocabulary mixes colour
# and texture cues (texture is what makes low-level features worth keeping).
ATTRIBUTE_VOCAB = (
    "red", "striped-blue", "green", "striped-yellow",
    "blue", "striped-red", "yellow", "striped-green",
    "magenta", "striped-cyan", "cyan", "striped-magenta",
    "orange", "striped-purple", "purple", "striped-orange",
)

OBJECT_VOCAB = (
    "circle", "square", "triangle", "cross", "star", "ring",
    "diamond", "hexagon", "pentagon", "arrow", "crescent", "bar",
)


@dataclass(frozen=True)
class LabelSpace:
    """Attributes, objects, the closed-world composition set, and the seen mask.

    Compositions are (attribute_index, object_index) pairs; ``seen_mask[k]`` is
    True when composition k occurs in the train split.
    """

    attributes: tuple
    objects: tuple
    compositions: tuple
    seen_mask: tuple

    def __post_init__(self):
        n_a, n_o = len(self.attributes), len(self.objects)
        if len(set(self.compositions)) != len(self.compositions):
            raise DataValidationError("duplicate composition pairs")
        if len(self.seen_mask) != len(self.compositions):
            raise DataValidationError("seen_mask length != composition count")
        for a, o in self.compositions:
            if not (0 <= a < n_a and 0 <= o < n_o):
                raise DataValidationError(f"composition index ({a},{o}) out of range")
        seen_attrs = {a for (a, o), s in zip(self.compositions, self.seen_mask) if s}
        seen_objs = {o for (a, o), s in zip(self.compositions, self.seen_mask) if s}
        for i, name in enumerate(self.attributes):
            if i not in seen_attrs:
                raise DataValidationError(
                    f"attribute '{name}' never occurs in a seen composition"
                )
        for j, name in enumerate(self.objects):
            if j not in seen_objs:
                raise DataValidationError(
                    f"object '{name}' never occurs in a seen composition"
                )

    @property
    def n_attrs(self):
        return len(self.attributes)

    @property
    def n_objs(self):
        return len(self.objects)

    @property
    def n_comps(self):
        return len(self.compositions)

    @property
    def comp_attr(self):
        """Attribute index of each composition, int64 array."""
        return np.array([a for a, _ in self.compositions], dtype=np.int64)

    @property
    def comp_obj(self):
        return np.array([o for _, o in self.compositions], dtype=np.int64)

    @property
    def seen(self):
        return np.array(self.seen_mask, dtype=bool)

    def comp_index(self, attr_name, obj_name):
        a = self.attributes.index(attr_name)
        o = self.objects.index(obj_name)
        return self.compositions.index((a, o))

    def require_unseen(self):
        if not any(not s for s in self.seen_mask):
            raise DataValidationError("label space has no unseen compositions")


@dataclass(frozen=True)
class ManifestRecord:
    split: str
    attribute: str
    object: str
    image: str  # path relative to the manifest directory


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    records: tuple

    def split_records(self, split):
        return [r for r in self.records if r.split == split]


def save_manifest(manifest: DatasetManifest, path=None) -> Path:
    """Write the TSV manifest; returns the path written."""
    path = Path(path) if path is not None else Path(manifest.root) / "manifest.tsv"
    lines = ["split\tattribute\tobject\timage"]
    for r in manifest.records:
        lines.append(f"{r.split}\t{r.attribute}\t{r.object}\t{r.image}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> tuple:
    """Parse a manifest and derive its label space.

    Attribute and object lists are sorted lexicographically; compositions are
    every pair occurring in any split, sorted by index pair; a pair is seen iff
    it occurs in train. Raises DataValidationError for malformed lines, unknown
    splits, missing image files, or primitives that occur only in unseen pairs.
    """
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"manifest not found: {path}")
    root = path.parent
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0].split("\t") != ["split", "attribute", "object", "image"]:
        raise DataValidationError(f"bad manifest header in {path}")
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataValidationError(f"{path}:{ln}: expected 4 tab-separated fields")
        split, attr, obj, img = parts
        if split not in SPLITS:
            raise DataValidationError(f"{path}:{ln}: unknown split '{split}'")
        if not (root / img).is_file():
            raise DataValidationError(f"{path}:{ln}: missing image file '{img}'")
        records.append(ManifestRecord(split, attr, obj, img))
    if not records:
        raise DataValidationError(f"manifest {path} has no records")

    attrs = tuple(sorted({r.attribute for r in records}))
    objs = tuple(sorted({r.object for r in records}))
    a_idx = {n: i for i, n in enumerate(attrs)}
    o_idx = {n: i for i, n in enumerate(objs)}
    pairs = sorted({(a_idx[r.attribute], o_idx[r.object]) for r in records})
    train_pairs = {
        (a_idx[r.attribute], o_idx[r.object]) for r in records if r.split == "train"
    }
    seen = tuple(p in train_pairs for p in pairs)
    space = LabelSpace(attrs, objs, tuple(pairs), seen)
    return space, DatasetManifest(root=root, records=tuple(records))


@dataclass(frozen=True)
class SplitArrays:
    """One split loaded into memory: images (N,3,H,W) float32 in [0,1] + labels."""

    images: np.ndarray
    attr_idx: np.ndarray
    obj_idx: np.ndarray
    comp_idx: np.ndarray

    def __len__(self):
        return self.images.shape[0]


def load_image(path) -> np.ndarray:
    """Decode one image to float32 (3,H,W) in [0,1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise DataValidationError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_split(manifest: DatasetManifest, space: LabelSpace, split) -> SplitArrays:
    recs = manifest.split_records(split)
    comp_lookup = {p: k for k, p in enumerate(space.compositions)}
    images, attr_i, obj_i, comp_i = [], [], [], []
    for r in recs:
        a = space.attributes.index(r.attribute)
        o = space.objects.index(r.object)
        images.append(load_image(Path(manifest.root) / r.image))
        attr_i.append(a)
        obj_i.append(o)
        comp_i.append(comp_lookup[(a, o)])
    if images:
        stack = np.stack(images)
    else:
        stack = np.zeros((0, 3, 0, 0), dtype=np.float32)
    return SplitArrays(
        images=stack,
        attr_idx=np.array(attr_i, dtype=np.int64),
        obj_idx=np.array(obj_i, dtype=np.int64),
        comp_idx=np.array(comp_i, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# synthetic generation


def _shape_mask(draw, name, cx, cy, r):
    def poly(n, phase, radius=r):
        return [
            (cx + radius * math.cos(phase + 2 * math.pi * k / n),
             cy - radius * math.sin(phase + 2 * math.pi * k / n))
            for k in range(n)
        ]

    if name == "circle":
        draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=255)
    elif name == "ring":
        draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=255)
        ri = 0.55 * r
        draw.ellipse((cx - ri, cy - ri, cx + ri, cy + ri), fill=0)
    elif name == "square":
        s = r / math.sqrt(2.0)
        draw.rectangle((cx - s, cy - s, cx + s, cy + s), fill=255)
    elif name == "diamond":
        draw.polygon(poly(4, 0.0), fill=255)
    elif name == "triangle":
        draw.polygon(poly(3, math.pi / 2), fill=255)
    elif name == "pentagon":
        draw.polygon(poly(5, math.pi / 2), fill=255)
    elif name == "hexagon":
        draw.polygon(poly(6, 0.0), fill=255)
    elif name == "star":
        pts = []
        for k in range(10):
            rad = r if k % 2 == 0 else 0.45 * r
            ang = math.pi / 2 + k * math.pi / 5
            pts.append((cx + rad * math.cos(ang), cy - rad * math.sin(ang)))
        draw.polygon(pts, fill=255)
    elif name == "cross":
        w = 0.32 * r
        draw.rectangle((cx - w, cy - r, cx + w, cy + r), fill=255)
        draw.rectangle((cx - r, cy - w, cx + r, cy + w), fill=255)
    elif name == "arrow":
        draw.polygon([(cx, cy - r), (cx + 0.7 * r, cy), (cx - 0.7 * r, cy)], fill=255)
        w = 0.25 * r
        draw.rectangle((cx - w, cy, cx + w, cy + r), fill=255)
    elif name == "crescent":
        draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=255)
        off = 0.45 * r
        draw.ellipse((cx - r + off, cy - r, cx + r + off, cy + r), fill=0)
    elif name == "bar":
        draw.rectangle((cx - r, cy - 0.35 * r, cx + r, cy + 0.35 * r), fill=255)
    else:
        raise ConfigurationError(f"unknown object shape '{name}'")


def render_composition(attr_name, obj_name, size, rng) -> np.ndarray:
    """Render one image of an (attribute, object) pair; uint8 (H,W,3).

    The object is a shape with jittered position and scale; the attribute is a
    solid or diagonally striped fill; Gaussian pixel noise is added at the end.
    """
    ss = 4  # supersampling factor for the shape mask
    cx = (0.5 + rng.uniform(-0.10, 0.10)) * size
    cy = (0.5 + rng.uniform(-0.10, 0.10)) * size
    r = rng.uniform(0.27, 0.40) * size
    bg = rng.uniform(0.08, 0.16)

    mask_im = Image.new("L", (size * ss, size * ss), 0)
    _shape_mask(ImageDraw.Draw(mask_im), obj_name, cx * ss, cy * ss, r * ss)
    mask = np.asarray(mask_im.resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0

    striped = attr_name.startswith("striped-")
    color_name = attr_name.removeprefix("striped-")
    if color_name not in _COLORS:
        raise ConfigurationError(f"unknown attribute fill '{attr_name}'")
    color = np.array(_COLORS[color_name], dtype=np.float32) / 255.0

    fill = np.broadcast_to(color, (size, size, 3)).copy()
    if striped:
        period = max(2, size // 16)
        yy, xx = np.mgrid[0:size, 0:size]
        bands = ((xx + yy) // period) % 2 == 1
        fill[bands] = 0.06

    img = np.full((size, size, 3), bg, dtype=np.float32)
    img = img + mask[..., None] * (fill - img)
    img = img + rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def _pick_seen_pairs(n_attrs, n_objs, n_seen, rng):
    pairs = [(a, o) for a in range(n_attrs) for o in range(n_objs)]
    for _ in range(1000):
        idx = rng.choice(len(pairs), size=n_seen, replace=False)
        chosen = [pairs[i] for i in sorted(idx)]
        if {a for a, _ in chosen} == set(range(n_attrs)) and {
            o for _, o in chosen
        } == set(range(n_objs)):
            return chosen
    raise ConfigurationError(
        "could not sample a seen set covering every attribute and object in "
        "1000 attempts; raise seen_fraction or shrink the primitive sets"
    )


def generate_synthetic(
    out_dir,
    n_attrs,
    n_objs,
    seen_fraction,
    images_per_pair,
    image_size=64,
    seed=0,
) -> DatasetManifest:
    """Render a synthetic compositional dataset under ``out_dir``.

    Train holds ``images_per_pair`` images for each seen pair. Val holds
    ceil(images_per_pair/4) images per pair (seen and unseen); test holds
    ceil(images_per_pair/4) per seen pair and ceil(images_per_pair/2) per
    unseen pair. Identical arguments produce byte-identical outputs.
    """
    if n_attrs < 2 or n_objs < 2:
        raise ConfigurationError("need at least 2 attributes and 2 objects")
    if image_size < 32:
        raise ConfigurationError("image_size must be >= 32")
    if images_per_pair < 1:
        raise ConfigurationError("images_per_pair must be >= 1")
    if not 0.0 < seen_fraction <= 1.0:
        raise ConfigurationError("seen_fraction must lie in (0, 1]")
    if n_attrs > len(ATTRIBUTE_VOCAB) or n_objs > len(OBJECT_VOCAB):
        raise ConfigurationError(
            f"vocabulary supports up to {len(ATTRIBUTE_VOCAB)} attributes and "
            f"{len(OBJECT_VOCAB)} objects"
        )

    n_pairs = n_attrs * n_objs
    n_seen = int(round(seen_fraction * n_pairs))
    if n_pairs - n_seen < 1:
        raise ConfigurationError(
            f"seen_fraction={seen_fraction} leaves no unseen pair ({n_seen}/{n_pairs} seen)"
        )
    if n_seen < max(n_attrs, n_objs):
        raise ConfigurationError(
            f"{n_seen} seen pairs cannot cover {n_attrs} attributes and {n_objs} objects"
        )

    # Sort by name so indices match the lexicographic order load_manifest uses.
    attrs = sorted(ATTRIBUTE_VOCAB[:n_attrs])
    objs = sorted(OBJECT_VOCAB[:n_objs])
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0FE)))
    seen_pairs = set(_pick_seen_pairs(n_attrs, n_objs, n_seen, rng))

    quarter = math.ceil(images_per_pair / 4)
    half = math.ceil(images_per_pair / 2)
    out_dir = Path(out_dir)
    records = []
    for split_id, split in enumerate(SPLITS):
        for pair_id in range(n_pairs):
            a, o = divmod(pair_id, n_objs)
            is_seen = (a, o) in seen_pairs
            if split == "train":
                count = images_per_pair if is_seen else 0
            elif split == "val":
                count = quarter
            else:
                count = quarter if is_seen else half
            for i in range(count):
                rel = Path("images") / f"{attrs[a]}__{objs[o]}" / f"{split}_{i:04d}.png"
                img_rng = np.random.default_rng(
                    np.random.SeedSequence((seed, pair_id, split_id, i))
                )
                pixels = render_composition(attrs[a], objs[o], image_size, img_rng)
                dest = out_dir / rel
                dest.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(pixels).save(dest, format="PNG")
                records.append(ManifestRecord(split, attrs[a], objs[o], rel.as_posix()))

    manifest = DatasetManifest(root=out_dir, records=tuple(records))
    save_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# semantic embeddings


@dataclass(frozen=True)
class EmbeddingTable:
    """One row per attribute and per object, aligned with LabelSpace order."""

    attributes: np.ndarray
    objects: np.ndarray

    @property
    def dim(self):
        return self.attributes.shape[1]


def _seeded_unit_vector(name, dim, seed):
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    rng = np.random.default_rng(
        np.random.SeedSequence(int.from_bytes(digest[:16], "little"))
    )
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _read_embedding_file(path, dim):
    table = {}
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != dim + 1:
            raise DataValidationError(
                f"{path}:{ln}: expected name + {dim} values, got {len(tokens)} tokens"
            )
        table[tokens[0]] = np.array([float(t) for t in tokens[1:]], dtype=np.float64)
    return table


def init_semantic_embeddings(
    space: LabelSpace, dim, source="seeded", seed=0, path=None
) -> EmbeddingTable:
    """Build primitive embeddings, either seeded pseudo-random or from a file.

    Seeded vectors are unit-norm and depend only on (primitive name, seed).
    File format: one ``name v1 .. v_dim`` line per primitive; every attribute
    and object name must be present.
    """
    if dim < 2:
        raise ConfigurationError("embedding dim must be >= 2")
    names = list(space.attributes) + list(space.objects)
    if source == "seeded":
        vecs = {n: _seeded_unit_vector(n, dim, seed) for n in names}
    elif source == "file":
        if path is None:
            raise ConfigurationError("file embedding source requires a path")
        table = _read_embedding_file(path, dim)
        missing = [n for n in names if n not in table]
        if missing:
            raise DataValidationError(
                "embedding file is missing primitives: " + ", ".join(missing)
            )
        vecs = {n: table[n] for n in names}
    else:
        raise ConfigurationError(f"unknown embedding source '{source}'")
    return EmbeddingTable(
        attributes=np.stack([vecs[n] for n in space.attributes]),
        objects=np.stack([vecs[n] for n in space.objects]),
    )
