"""Synthetic multi-scale phantom scenes with relation-consistent masks.

A scene is a textured RGB image plus one binary mask per class. The layout
declares, per class, a shape family, an optional nesting parent, and
exclusion groups; from those the ground-truth relation between any two
classes is derived. Generation is rejection-based: a scene is only
returned once every derived relation is confirmed pixelwise, so declared
and observed relations agree by construction.

Shape families: `ellipse` (regions/units), `band_h`/`band_v` (structures
crossing region borders), `dots` (cell clusters), `crescent` (lesions).
Geometry is specified in canvas fractions so one layout scales from 16 to
512 pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyMaskError, LayoutError, ShapeError, UnknownClassError
from .relations import ClassInfo, RelationKind, RelationMatrix, build_matrix

MAX_PLACEMENT_ATTEMPTS = 25

# Distinct base colors per class index; painted darkest-last so nested
# structures stay visible on top of their parents.
_PALETTE = np.array(
    [
        (0.85, 0.55, 0.55),
        (0.55, 0.62, 0.88),
        (0.93, 0.80, 0.45),
        (0.48, 0.82, 0.72),
        (0.35, 0.25, 0.60),
        (0.80, 0.42, 0.75),
        (0.95, 0.62, 0.30),
        (0.25, 0.45, 0.30),
        (0.70, 0.20, 0.25),
        (0.20, 0.65, 0.90),
        (0.55, 0.40, 0.18),
        (0.40, 0.40, 0.42),
        (0.90, 0.90, 0.60),
        (0.30, 0.75, 0.45),
        (0.75, 0.75, 0.95),
        (0.60, 0.15, 0.55),
    ],
    dtype=np.float32,
)


@dataclass(frozen=True)
class LayoutEntry:
    """Placement recipe for one class.

    geometry keys (canvas fractions unless noted):
      ellipse:  cy, cx, ry, rx
      band_h:   r0, r1 (row span, full width)
      band_v:   c0, c1 (column span, full height)
      dots:     count (int), radius (px at 64-canvas, rescaled), region
      crescent: radius, region
    `region` splits the parent vertically: "upper" / "lower" keeps children
    of one parent disjoint without rejection churn.
    """

    cls: ClassInfo
    shape: str
    geometry: dict
    parent: Optional[int] = None
    exclusion_groups: frozenset = field(default_factory=frozenset)


@dataclass(frozen=True)
class PhantomSpec:
    """Full phantom layout plus generation parameters."""

    canvas_size: int
    class_layout: Tuple[LayoutEntry, ...]
    texture_seed: int
    samples_per_class: int = 1

    def __post_init__(self):
        if self.canvas_size < 16:
            raise ValueError("canvas_size must be >= 16")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        ids = [e.cls.id for e in self.class_layout]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate class ids in layout")
        self._validate_forest()
        self._validate_exclusions()

    def _validate_forest(self):
        by_id = {e.cls.id: e for e in self.class_layout}
        for entry in self.class_layout:
            seen = set()
            node = entry
            while node.parent is not None:
                if node.parent not in by_id:
                    raise ValueError(f"parent {node.parent} of class {entry.cls.id} unknown")
                if node.parent in seen or node.parent == entry.cls.id:
                    raise ValueError(f"nesting cycle through class {entry.cls.id}")
                seen.add(node.parent)
                node = by_id[node.parent]

    def _validate_exclusions(self):
        for a in self.class_layout:
            for b in self.class_layout:
                if a.cls.id == b.cls.id:
                    continue
                if a.exclusion_groups & b.exclusion_groups:
                    chain_a = ancestor_ids(self, a.cls.id)
                    chain_b = ancestor_ids(self, b.cls.id)
                    if a.cls.id in chain_b or b.cls.id in chain_a:
                        raise ValueError(
                            f"classes {a.cls.id} and {b.cls.id} share an exclusion "
                            "group but lie on one nesting path"
                        )

    def entry(self, class_id: int) -> LayoutEntry:
        for e in self.class_layout:
            if e.cls.id == class_id:
                return e
        raise UnknownClassError(f"class {class_id} not in layout")

    def class_infos(self) -> List[ClassInfo]:
        return [e.cls for e in self.class_layout]


@dataclass
class PhantomScene:
    """Rendered image plus per-class ground-truth masks."""

    image: np.ndarray                 # float32, 3 x H x W, values in [0, 1]
    masks: Dict[int, np.ndarray]      # class id -> uint8 H x W
    scene_seed: int


@dataclass
class LabeledSample:
    """Partial-label unit: one image, one class's binary mask."""

    image: np.ndarray                 # float32, 3 x H x W
    label: np.ndarray                 # uint8, H x W
    class_id: int
    scale_id: int
    scene_seed: int


# -- relation derivation -----------------------------------------------------

def ancestor_ids(spec: PhantomSpec, class_id: int) -> List[int]:
    """Nesting ancestors of class_id, nearest first (excludes self)."""
    chain = []
    node = spec.entry(class_id)
    while node.parent is not None:
        chain.append(node.parent)
        node = spec.entry(node.parent)
    return chain


def derive_relation(spec: PhantomSpec, old_id: int, new_id: int) -> RelationKind:
    """Ground-truth relation of new class new_id to old class old_id.

    Containment follows the nesting forest; exclusion holds when any two
    distinct (self-or-ancestor) nodes share an exclusion group; everything
    else is a designed partial overlap and reported UNRELATED.
    """
    anc_old = [old_id] + ancestor_ids(spec, old_id)
    anc_new = [new_id] + ancestor_ids(spec, new_id)
    if old_id in anc_new[1:]:
        return RelationKind.NEW_SUBSET_OF_OLD
    if new_id in anc_old[1:]:
        return RelationKind.NEW_SUPERSET_OF_OLD
    for a in anc_old:
        for b in anc_new:
            if a == b:
                continue
            if spec.entry(a).exclusion_groups & spec.entry(b).exclusion_groups:
                return RelationKind.MUTUALLY_EXCLUSIVE
    return RelationKind.UNRELATED


def matrix_for_step(
    spec: PhantomSpec,
    old_ids: Sequence[int],
    new_ids: Sequence[int],
    step: int,
    previous: Optional[RelationMatrix] = None,
) -> RelationMatrix:
    """Build the step-t relation matrix implied by the layout."""
    assignments = {
        (i, j): derive_relation(spec, i, j) for i in old_ids for j in new_ids
    }
    old = [spec.entry(i).cls for i in old_ids]
    new = [spec.entry(j).cls for j in new_ids]
    built = build_matrix(old, new, assignments, step=step)
    if previous is not None:
        built = RelationMatrix(
            built.old_classes, built.new_classes, built.entries,
            step=built.step, previous=previous,
        )
    return built


# -- mask observation ---------------------------------------------------------

def observe_relation(mask_old: np.ndarray, mask_new: np.ndarray) -> RelationKind:
    """Classify the pixelwise relation of mask_new to mask_old.

    Equality counts as NEW_SUBSET_OF_OLD; SUPERSET requires strict
    containment of the old mask.
    """
    if mask_old.shape != mask_new.shape:
        raise ShapeError(f"mask shapes differ: {mask_old.shape} vs {mask_new.shape}")
    a = mask_old.astype(bool)
    b = mask_new.astype(bool)
    if not a.any() or not b.any():
        raise EmptyMaskError("observe_relation requires non-empty masks")
    inter = int(np.count_nonzero(a & b))
    if inter == 0:
        return RelationKind.MUTUALLY_EXCLUSIVE
    n_a = int(np.count_nonzero(a))
    n_b = int(np.count_nonzero(b))
    if inter == n_b:                       # b subset of a (or equal)
        return RelationKind.NEW_SUBSET_OF_OLD
    if inter == n_a:                       # a strict subset of b
        return RelationKind.NEW_SUPERSET_OF_OLD
    return RelationKind.UNRELATED


# -- shape rasterization -------------------------------------------------------

def _ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return ((((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0).astype(np.uint8)


def _disc_mask(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    return _ellipse_mask(size, cy, cx, r, r)


def _region_band(size: int, parent_mask: np.ndarray, which: str) -> np.ndarray:
    """Upper or lower half of the parent's bounding rows, one row of margin."""
    rows = np.nonzero(parent_mask.any(axis=1))[0]
    mid = (rows[0] + rows[-1]) / 2.0
    yy = np.arange(size)[:, None]
    if which == "upper":
        band = (yy <= mid - 1).astype(np.uint8)
    elif which == "lower":
        band = (yy >= mid + 1).astype(np.uint8)
    else:
        raise ValueError(f"unknown region {which!r}")
    return band * parent_mask


def _place_entry(
    entry: LayoutEntry,
    size: int,
    placed: Dict[int, np.ndarray],
    rng: np.random.Generator,
) -> Optional[np.ndarray]:
    """Rasterize one entry; None signals a constraint violation (caller retries)."""
    geom = entry.geometry
    parent = placed.get(entry.parent) if entry.parent is not None else None
    jitter = lambda lo, hi: float(rng.uniform(lo, hi))

    if entry.shape == "ellipse":
        cy = geom["cy"] * size + jitter(-1.0, 1.0)
        cx = geom["cx"] * size + jitter(-1.0, 1.0)
        ry = max(2.0, geom["ry"] * size + jitter(-0.5, 0.5))
        rx = max(2.0, geom["rx"] * size + jitter(-0.5, 0.5))
        mask = _ellipse_mask(size, cy, cx, ry, rx)
    elif entry.shape == "band_h":
        r0 = int(round(geom["r0"] * size)) + int(rng.integers(-1, 2))
        r1 = int(round(geom["r1"] * size)) + int(rng.integers(-1, 2))
        mask = np.zeros((size, size), np.uint8)
        mask[max(r0, 0):max(r1, 0), :] = 1
    elif entry.shape == "band_v":
        c0 = int(round(geom["c0"] * size))
        c1 = int(round(geom["c1"] * size)) + int(rng.integers(-1, 2))
        mask = np.zeros((size, size), np.uint8)
        mask[:, max(c0, 0):max(c1, 0)] = 1
    elif entry.shape == "dots":
        if parent is None:
            return None
        radius = max(1.0, geom["radius"] * size / 64.0)
        allowed = parent.copy()
        if "region" in geom:
            allowed = _region_band(size, parent, geom["region"])
        allowed = _erode(allowed, int(np.ceil(radius)) + 1)
        coords = np.argwhere(allowed)
        if len(coords) == 0:
            return None
        count = int(geom.get("count", 4))
        picks = coords[rng.choice(len(coords), size=min(count, len(coords)), replace=False)]
        mask = np.zeros((size, size), np.uint8)
        for cy, cx in picks:
            mask |= _disc_mask(size, float(cy), float(cx), radius)
        mask &= parent
    elif entry.shape == "crescent":
        if parent is None:
            return None
        radius = max(2.0, geom["radius"] * size / 64.0)
        allowed = parent.copy()
        if "region" in geom:
            allowed = _region_band(size, parent, geom["region"])
        # Clip the crescent to the band instead of requiring the full disc
        # inside it; margin 2 keeps the clipped blob non-degenerate.
        centers = _erode(allowed, 2)
        coords = np.argwhere(centers)
        if len(coords) == 0:
            return None
        cy, cx = coords[rng.integers(len(coords))]
        outer = _disc_mask(size, float(cy), float(cx), radius)
        bite = _disc_mask(size, float(cy) - radius * 0.5, float(cx) + radius * 0.35, radius * 0.9)
        mask = (outer & ~bite.astype(bool)).astype(np.uint8)
        mask &= allowed
    else:
        raise ValueError(f"unknown shape family {entry.shape!r}")

    if mask.sum() == 0:
        return None
    if parent is not None:
        if np.any(mask & ~parent.astype(bool)):
            return None
        if mask.sum() >= parent.sum():      # keep containment strict
            return None
    return mask


def _erode(mask: np.ndarray, margin: int) -> np.ndarray:
    """Binary erosion by a square margin (scipy-free, small margins only)."""
    out = mask.astype(bool)
    for _ in range(margin):
        shifted = out.copy()
        shifted[1:, :] &= out[:-1, :]
        shifted[:-1, :] &= out[1:, :]
        shifted[:, 1:] &= out[:, :-1]
        shifted[:, :-1] &= out[:, 1:]
        out = shifted
    return out.astype(np.uint8)


def _paint_order(spec: PhantomSpec) -> List[LayoutEntry]:
    """Parents before children so nested paint overwrites correctly."""
    def depth(entry: LayoutEntry) -> int:
        return len(ancestor_ids(spec, entry.cls.id))

    return sorted(spec.class_layout, key=lambda e: (depth(e), e.cls.id))


def generate_scene(spec: PhantomSpec, scene_seed: int) -> PhantomScene:
    """Render one deterministic scene; retries placement until every derived
    relation is confirmed by observe_relation, else raises LayoutError."""
    order = _paint_order(spec)
    for attempt in range(MAX_PLACEMENT_ATTEMPTS):
        rng = np.random.default_rng([spec.texture_seed, scene_seed, attempt])
        placed: Dict[int, np.ndarray] = {}
        ok = True
        for entry in order:
            mask = _place_entry(entry, spec.canvas_size, placed, rng)
            if mask is None:
                ok = False
                break
            placed[entry.cls.id] = mask
        if not ok:
            continue
        if not _relations_hold(spec, placed):
            continue
        image = _render(spec, placed, rng, order)
        return PhantomScene(image=image, masks=placed, scene_seed=scene_seed)
    raise LayoutError(
        f"could not realize layout for seed {scene_seed} in "
        f"{MAX_PLACEMENT_ATTEMPTS} attempts"
    )


def _relations_hold(spec: PhantomSpec, masks: Dict[int, np.ndarray]) -> bool:
    ids = [e.cls.id for e in spec.class_layout]
    for i in ids:
        if masks[i].sum() == 0:
            return False
    for i in ids:
        for j in ids:
            if i == j:
                continue
            if observe_relation(masks[i], masks[j]) != derive_relation(spec, i, j):
                return False
    return True


def _render(
    spec: PhantomSpec,
    masks: Dict[int, np.ndarray],
    rng: np.random.Generator,
    order: List[LayoutEntry],
) -> np.ndarray:
    size = spec.canvas_size
    image = np.full((3, size, size), 0.92, dtype=np.float32)
    for idx, entry in enumerate(order):
        color = _PALETTE[entry.cls.id % len(_PALETTE)]
        shade = color * (1.0 + rng.uniform(-0.03, 0.03))
        sel = masks[entry.cls.id].astype(bool)
        for ch in range(3):
            image[ch][sel] = shade[ch]
    image += rng.normal(0.0, 0.025, size=image.shape).astype(np.float32)
    return np.clip(image, 0.0, 1.0)


# -- default benchmark layout --------------------------------------------------
#
# Twelve classes over a two-region canvas. Exclusion groups:
#   0: the two top-level regions
#   1: units + the horizontal vessel band (pairwise disjoint)
#   2: children sharing the capsule
#   3: the left border band vs the right region
#   4: the left border band vs the left-region units
#   5: children sharing the duct
# Groups never pair an ancestor with its descendant; descendants inherit
# exclusivity through their ancestors. The vessel band crosses both regions
# (partial overlap -> UNRELATED) and the border band crosses the left region
# and the vessel band only.

def _ci(id_, name, group, scale, step):
    return ClassInfo(id=id_, name=name, group=group, scale=scale, step_introduced=step)


def default_class_layout() -> Tuple[LayoutEntry, ...]:
    g = frozenset
    return (
        LayoutEntry(_ci(0, "cortex", "region", "5x", 1), "ellipse",
                    dict(cy=0.50, cx=0.29, ry=0.42, rx=0.235),
                    exclusion_groups=g({0})),
        LayoutEntry(_ci(1, "medulla", "region", "5x", 1), "ellipse",
                    dict(cy=0.50, cx=0.77, ry=0.42, rx=0.185),
                    exclusion_groups=g({0, 3})),
        LayoutEntry(_ci(2, "tubule", "unit", "10x", 1), "ellipse",
                    dict(cy=0.72, cx=0.29, ry=0.115, rx=0.115),
                    parent=0, exclusion_groups=g({1, 4})),
        LayoutEntry(_ci(3, "duct", "unit", "10x", 1), "ellipse",
                    dict(cy=0.72, cx=0.77, ry=0.115, rx=0.10),
                    parent=1, exclusion_groups=g({1})),
        LayoutEntry(_ci(4, "podocyte", "cell", "20x", 1), "dots",
                    dict(count=4, radius=2.0, region="upper"),
                    parent=6, exclusion_groups=g({2})),
        LayoutEntry(_ci(5, "vessel", "unit", "10x", 1), "band_h",
                    dict(r0=0.45, r1=0.55),
                    exclusion_groups=g({1})),
        LayoutEntry(_ci(6, "capsule", "unit", "5x", 2), "ellipse",
                    dict(cy=0.26, cx=0.29, ry=0.135, rx=0.135),
                    parent=0, exclusion_groups=g({1, 4})),
        LayoutEntry(_ci(7, "mesangial", "cell", "20x", 2), "dots",
                    dict(count=4, radius=2.0),
                    parent=2),
        LayoutEntry(_ci(8, "epithelial", "cell", "40x", 2), "dots",
                    dict(count=4, radius=1.8, region="upper"),
                    parent=3, exclusion_groups=g({5})),
        LayoutEntry(_ci(9, "lesion", "lesion", "20x", 2), "crescent",
                    dict(radius=3.6, region="lower"),
                    parent=6, exclusion_groups=g({2})),
        LayoutEntry(_ci(10, "droplet", "lesion", "40x", 2), "crescent",
                    dict(radius=3.4, region="lower"),
                    parent=3, exclusion_groups=g({5})),
        LayoutEntry(_ci(11, "infiltrate", "lesion", "20x", 2), "band_v",
                    dict(c0=0.0, c1=0.09),
                    exclusion_groups=g({3, 4})),
    )


def default_spec(canvas_size: int = 64, texture_seed: int = 7, samples_per_class: int = 1) -> PhantomSpec:
    return PhantomSpec(
        canvas_size=canvas_size,
        class_layout=default_class_layout(),
        texture_seed=texture_seed,
        samples_per_class=samples_per_class,
    )


# -- dataset emission ----------------------------------------------------------

def emit_step_dataset(
    scenes: Sequence[PhantomScene],
    classes_this_step: Sequence[int],
    samples_per_class: int,
    *,
    spec: PhantomSpec,
    step_id: int,
    matrix_path: str = "",
    shuffle_seed: int = 0,
) -> Tuple[List[LabeledSample], dict]:
    """Draw partially labeled samples (one class per sample) from scenes.

    Returns the sample list plus a manifest describing the draw; ordering is
    deterministic in shuffle_seed.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    for cid in classes_this_step:
        for scene in scenes:
            if cid not in scene.masks:
                raise UnknownClassError(f"scene {scene.scene_seed} lacks class {cid}")
    samples: List[LabeledSample] = []
    for cid in classes_this_step:
        info = spec.entry(cid).cls
        for k in range(samples_per_class):
            scene = scenes[k % len(scenes)]
            samples.append(
                LabeledSample(
                    image=scene.image,
                    label=scene.masks[cid].astype(np.uint8),
                    class_id=cid,
                    scale_id=info.scale_index,
                    scene_seed=scene.scene_seed,
                )
            )
    rng = np.random.default_rng(shuffle_seed)
    perm = rng.permutation(len(samples))
    samples = [samples[i] for i in perm]
    manifest = {
        "step": step_id,
        "class_ids": list(classes_this_step),
        "classes": [spec.entry(c).cls.to_dict() for c in classes_this_step],
        "samples_per_class": samples_per_class,
        "count": len(samples),
        "scene_seeds": [s.scene_seed for s in scenes],
        "shuffle_seed": shuffle_seed,
        "texture_seed": spec.texture_seed,
        "canvas_size": spec.canvas_size,
        "matrix_path": matrix_path,
        "sample_index": [
            {"class_id": s.class_id, "scale_id": s.scale_id, "scene_seed": s.scene_seed}
            for s in samples
        ],
    }
    return samples, manifest
