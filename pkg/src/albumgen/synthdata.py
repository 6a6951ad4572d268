"""Procedural sprite scenes with exact ground truth.

A scene is a colored 8x8 sprite (pattern + 3-color palette chosen by an
identity seed) placed on a muted low-frequency background at one of 4x4
grid cells, at one of three sizes, one of four orientations, optionally
mirrored. Rendering is a pure function of the spec, the edit grammar is
exactly invertible, and instruction compliance of any image is checkable
by pixel analysis. This gives the dataset pipeline and the evaluation
harness a closed world where every judgement has a programmatic answer.
"""

from __future__ import annotations

import colorsys
import itertools
import json
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .rng import make_rng
from .tensor import Tensor

GRID = 4
SCALES = ("small", "medium", "large")
ROTS = (0, 90, 180, 270)
PATTERN = 8  # sprite patterns are 8x8

_SPRITE_STREAM = 0x5117
_BG_STREAM = 0xB6
_CORPUS_STREAM = 0xC0


class InstructionParseError(ValueError):
    """Text outside the closed modification grammar."""


@dataclass(frozen=True)
class SceneSpec:
    identity_id: int
    pos: tuple[int, int]          # (x, y) grid cell, x = column, y = row
    scale: str
    rot: int
    flip: bool
    bg_id: int

    def __post_init__(self):
        object.__setattr__(self, "pos", tuple(self.pos))
        if self.scale not in SCALES:
            raise ValueError(f"scale {self.scale!r} not in {SCALES}")
        if self.rot not in ROTS:
            raise ValueError(f"rot {self.rot!r} not in {ROTS}")
        if not (0 <= self.pos[0] < GRID and 0 <= self.pos[1] < GRID):
            raise ValueError(f"pos {self.pos} outside {GRID}x{GRID} grid")

    def to_dict(self) -> dict:
        return {"identity_id": self.identity_id, "pos": list(self.pos),
                "scale": self.scale, "rot": self.rot, "flip": self.flip,
                "bg_id": self.bg_id}

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        return SceneSpec(identity_id=d["identity_id"], pos=tuple(d["pos"]),
                         scale=d["scale"], rot=d["rot"], flip=d["flip"],
                         bg_id=d["bg_id"])


@dataclass(frozen=True)
class Collection:
    collection_id: int
    identity_id: int
    specs: tuple[SceneSpec, ...]

    @property
    def bg_id(self) -> int:
        return self.specs[0].bg_id


# -- sprites ------------------------------------------------------------------

def _dihedral(pattern: np.ndarray, rot: int, flip: bool) -> np.ndarray:
    """Rotate then (optionally) mirror horizontally; flip-last keeps the
    'flip toggles a horizontal mirror of the final appearance' property."""
    out = np.rot90(pattern, k=rot // 90)
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def _resample_indices(target: int) -> np.ndarray:
    """Nearest-sample indices into the 8x8 pattern, symmetric under
    reversal so sampling commutes with every dihedral transform (exact
    only for even targets; 32px scenes use sides 4, 6, 8)."""
    idx = np.empty(target, dtype=int)
    for i in range(target // 2):
        idx[i] = min(int((i + 0.5) * PATTERN / target), PATTERN - 1)
        idx[target - 1 - i] = PATTERN - 1 - idx[i]
    if target % 2:
        idx[target // 2] = PATTERN // 2
    return idx


def _sprite_candidate(identity_id: int, salt: int):
    rng = make_rng(identity_id, _SPRITE_STREAM, salt)
    mask = rng.random((PATTERN, PATTERN)) < 0.45
    colors = rng.integers(0, 3, size=(PATTERN, PATTERN))
    hues = []
    while len(hues) < 3:
        h = float(rng.random())
        if all(min(abs(h - o), 1 - abs(h - o)) > 0.13 for o in hues):
            hues.append(h)
    palette = np.array([colorsys.hsv_to_rgb(h, 1.0, 1.0) for h in hues],
                       dtype=np.float32)
    return mask, colors, palette


def _sprite_ok(mask: np.ndarray, colors: np.ndarray) -> bool:
    """Detectable and orientation-resolvable at every render size used by
    32px scenes: enough on-pixels, all palette colors present, and all 8
    dihedral variants distinct after nearest resampling."""
    for side in (4, 6, 8):
        idx = _resample_indices(side)
        variants = []
        for rot, flip in itertools.product(ROTS, (False, True)):
            m = _dihedral(mask, rot, flip)[np.ix_(idx, idx)]
            c = _dihedral(colors, rot, flip)[np.ix_(idx, idx)]
            if m.sum() < max(4, side):
                return False
            if len(np.unique(c[m])) < 3:
                return False
            variants.append((m.tobytes(), np.where(m, c, -1).tobytes()))
        if len(set(variants)) < 8:
            return False
    return True


@lru_cache(maxsize=4096)
def sprite(identity_id: int):
    """(mask 8x8 bool, color indices 8x8 int, palette (3,3) float32) for an
    identity. Retries salted draws until the sprite is verifiable."""
    salt = 0
    while True:
        mask, colors, palette = _sprite_candidate(identity_id, salt)
        if _sprite_ok(mask, colors):
            return mask, colors, palette
        salt += 1


def identity_palette(identity_id: int) -> np.ndarray:
    return sprite(identity_id)[2]


# -- rendering ----------------------------------------------------------------

def scale_pixels(scale: str, cell: int) -> int:
    return {"small": cell // 2, "medium": (3 * cell) // 4, "large": cell}[scale]


def _background(bg_id: int, h: int, w: int) -> np.ndarray:
    rng = make_rng(bg_id, _BG_STREAM)
    coarse = rng.uniform(0.35, 0.65, size=(3, GRID, GRID)).astype(np.float32)
    reps_h, reps_w = -(-h // GRID), -(-w // GRID)
    return coarse.repeat(reps_h, axis=1).repeat(reps_w, axis=2)[:, :h, :w]


def _sprite_patch(spec: SceneSpec, cell: int) -> tuple[np.ndarray, np.ndarray]:
    """(on-mask, rgb values) of the sprite resampled to its rendered size."""
    mask, colors, palette = sprite(spec.identity_id)
    m = _dihedral(mask, spec.rot, spec.flip)
    c = _dihedral(colors, spec.rot, spec.flip)
    side = scale_pixels(spec.scale, cell)
    idx = _resample_indices(side)
    m = m[np.ix_(idx, idx)]
    c = c[np.ix_(idx, idx)]
    rgb = palette[c].transpose(2, 0, 1)  # (3, side, side)
    return m, rgb


def render(spec: SceneSpec, size: tuple[int, int] = (32, 32)) -> Tensor:
    """Deterministic raster of a scene, values in [0, 1], shape (3, H, W)."""
    h, w = size
    if h < 16 or w < 16:
        raise ValueError("render size must be at least 16x16")
    img = _background(spec.bg_id, h, w)
    cell_h, cell_w = h // GRID, w // GRID
    m, rgb = _sprite_patch(spec, min(cell_h, cell_w))
    side = m.shape[0]
    x0 = spec.pos[0] * cell_w + (cell_w - side) // 2
    y0 = spec.pos[1] * cell_h + (cell_h - side) // 2
    region = img[:, y0:y0 + side, x0:x0 + side]
    img[:, y0:y0 + side, x0:x0 + side] = np.where(m[None], rgb, region)
    return Tensor(img)


def export_png(image, path) -> None:
    from PIL import Image
    arr = image.numpy() if isinstance(image, Tensor) else np.asarray(image)
    arr = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


# -- modification grammar -------------------------------------------------------

@dataclass(frozen=True)
class InstructionDelta:
    """Parsed form of a modification string; identity delta by default."""
    scale_to: str | None = None
    rot_by: int = 0
    move_to: tuple[int, int] | None = None
    mirror: bool = False

    def apply(self, spec: SceneSpec) -> SceneSpec:
        return replace(
            spec,
            scale=self.scale_to if self.scale_to is not None else spec.scale,
            rot=(spec.rot + self.rot_by) % 360,
            pos=self.move_to if self.move_to is not None else spec.pos,
            flip=spec.flip ^ self.mirror,
        )

    def requested_axes(self) -> tuple[str, ...]:
        axes = []
        if self.scale_to is not None:
            axes.append("scale")
        if self.rot_by:
            axes.append("rot")
        if self.move_to is not None:
            axes.append("pos")
        if self.mirror:
            axes.append("flip")
        return tuple(axes)


def describe_delta(src: SceneSpec, dst: SceneSpec) -> str:
    """Deterministic phrase per changed axis, canonical axis order
    (scale, rotation, position, mirror); identical specs give ''."""
    if src.identity_id != dst.identity_id:
        raise ValueError("cannot describe a delta across identities")
    clauses = []
    if src.scale != dst.scale:
        word = "in" if SCALES.index(dst.scale) > SCALES.index(src.scale) else "out"
        clauses.append(f"zoom {word} to {dst.scale}")
    if src.rot != dst.rot:
        clauses.append(f"rotate subject {(dst.rot - src.rot) % 360}")
    if src.pos != dst.pos:
        clauses.append(f"move subject to cell {dst.pos[0]} {dst.pos[1]}")
    if src.flip != dst.flip:
        clauses.append("mirror subject")
    return " , ".join(clauses)


def parse_instruction(text: str) -> InstructionDelta:
    """Inverse of describe_delta on grammar output; raises
    InstructionParseError on anything outside the grammar."""
    text = text.strip()
    if not text:
        return InstructionDelta()
    scale_to, rot_by, move_to, mirror = None, 0, None, False
    for clause in text.split(" , "):
        words = clause.split()
        if (len(words) == 4 and words[0] == "zoom" and words[1] in ("in", "out")
                and words[2] == "to" and words[3] in SCALES):
            scale_to = words[3]
        elif (len(words) == 3 and words[:2] == ["rotate", "subject"]
                and words[2] in ("90", "180", "270")):
            rot_by = int(words[2])
        elif (len(words) == 6 and words[:4] == ["move", "subject", "to", "cell"]
                and words[4].isdigit() and words[5].isdigit()
                and 0 <= int(words[4]) < GRID and 0 <= int(words[5]) < GRID):
            move_to = (int(words[4]), int(words[5]))
        elif words == ["mirror", "subject"]:
            mirror = True
        else:
            raise InstructionParseError(f"unparseable clause: {clause!r}")
    return InstructionDelta(scale_to=scale_to, rot_by=rot_by,
                            move_to=move_to, mirror=mirror)


def instruction_words() -> list[str]:
    """All grammar terminals, for vocabulary construction."""
    words = ["zoom", "in", "out", "to", "rotate", "subject", "move", "cell",
             "mirror", ","]
    words += list(SCALES)
    words += [str(r) for r in ROTS[1:]]
    words += [str(i) for i in range(GRID)]
    return words


def scene_caption(spec: SceneSpec) -> str:
    """Full-state caption of a scene (the inversion oracle's output form)."""
    mirrored = "mirrored" if spec.flip else "unmirrored"
    return (f"cell {spec.pos[0]} {spec.pos[1]} , size {spec.scale} , "
            f"facing {spec.rot} , {mirrored}")


def parse_scene_caption(text: str) -> dict:
    """Recover the four pose axes from a scene caption."""
    parts = text.split(" , ")
    if len(parts) != 4:
        raise InstructionParseError(f"bad scene caption: {text!r}")
    cell_w = parts[0].split()
    if len(cell_w) != 3 or cell_w[0] != "cell":
        raise InstructionParseError(f"bad cell clause: {parts[0]!r}")
    size_w = parts[1].split()
    if len(size_w) != 2 or size_w[0] != "size" or size_w[1] not in SCALES:
        raise InstructionParseError(f"bad size clause: {parts[1]!r}")
    face_w = parts[2].split()
    if len(face_w) != 2 or face_w[0] != "facing" or int(face_w[1]) not in ROTS:
        raise InstructionParseError(f"bad facing clause: {parts[2]!r}")
    if parts[3] not in ("mirrored", "unmirrored"):
        raise InstructionParseError(f"bad mirror clause: {parts[3]!r}")
    return {"pos": (int(cell_w[1]), int(cell_w[2])), "scale": size_w[1],
            "rot": int(face_w[1]), "flip": parts[3] == "mirrored"}


# -- verification ----------------------------------------------------------------

PALETTE_TOL = 0.25  # max RGB distance for a pixel to count as a palette hit


@dataclass(frozen=True)
class VerifyReport:
    detected: bool
    pos_ok: bool = False
    scale_ok: bool = False
    rot_ok: bool = False
    flip_ok: bool = False
    detected_pos: tuple[int, int] | None = None
    detected_scale: str | None = None
    detected_rot: int | None = None
    detected_flip: bool | None = None

    def axis_ok(self, axis: str) -> bool:
        return {"pos": self.pos_ok, "scale": self.scale_ok,
                "rot": self.rot_ok, "flip": self.flip_ok}[axis]

    @property
    def all_ok(self) -> bool:
        return (self.detected and self.pos_ok and self.scale_ok
                and self.rot_ok and self.flip_ok)


@dataclass(frozen=True)
class DetectedPose:
    centroid: tuple[float, float]     # (cx, cy) in pixels
    pos: tuple[int, int]
    scale: str
    rot: int
    flip: bool
    palette_pixels: int


def detect_pose(image, identity_id: int) -> DetectedPose | None:
    """Locate the identity's sprite by palette matching and read off its
    pose: centroid cell, nearest size class, and the best-matching
    dihedral variant (anchored by bounding boxes, small shift search to
    absorb noise in generated images). None when the sprite is absent."""
    arr = image.numpy() if isinstance(image, Tensor) else np.asarray(image)
    _, h, w = arr.shape
    cell = min(h // GRID, w // GRID)
    palette = identity_palette(identity_id)

    diff = arr[None] - palette[:, :, None, None]          # (3 colors, 3, H, W)
    dist = np.sqrt((diff * diff).sum(axis=1))             # (3, H, W)
    mask = dist.min(axis=0) < PALETTE_TOL
    n_hit = int(mask.sum())
    if n_hit < 4:
        return None

    ys, xs = np.nonzero(mask)
    cy, cx = float(ys.mean()), float(xs.mean())
    pos = (min(int(cx // cell), GRID - 1), min(int(cy // cell), GRID - 1))

    size = max(xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)
    scale = min(SCALES, key=lambda s: abs(scale_pixels(s, cell) - size))

    best, best_key = None, None
    for rot, flip in itertools.product(ROTS, (False, True)):
        cand = SceneSpec(identity_id=identity_id, pos=pos, scale=scale,
                         rot=rot, flip=flip, bg_id=0)
        m, rgb = _sprite_patch(cand, cell)
        side = m.shape[0]
        rows, cols = np.nonzero(m)
        oy = int(ys.min()) - int(rows.min())
        ox = int(xs.min()) - int(cols.min())
        score = None
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                y0 = min(max(oy + dy, 0), h - side)
                x0 = min(max(ox + dx, 0), w - side)
                patch = arr[:, y0:y0 + side, x0:x0 + side]
                d = ((patch - rgb) ** 2).sum(axis=0)
                s = float(d[m].mean())
                score = s if score is None else min(score, s)
        if best is None or score < best:
            best, best_key = score, (rot, flip)

    return DetectedPose(centroid=(cx, cy), pos=pos, scale=scale,
                        rot=best_key[0], flip=best_key[1], palette_pixels=n_hit)


def verify_following(image, expected: SceneSpec, tol: int = 1) -> tuple[bool, VerifyReport]:
    """Check each pose axis of an image against an expected scene.

    tol widens the acceptable centroid region by that many pixels on each
    side of the expected grid cell. Returns (all axes ok, per-axis report).
    """
    det = detect_pose(image, expected.identity_id)
    if det is None:
        return False, VerifyReport(detected=False)
    arr_h = (image.numpy() if isinstance(image, Tensor) else np.asarray(image)).shape[1]
    arr_w = (image.numpy() if isinstance(image, Tensor) else np.asarray(image)).shape[2]
    cell = min(arr_h // GRID, arr_w // GRID)
    cx, cy = det.centroid
    ex, ey = expected.pos
    pos_ok = (ex * cell - tol <= cx < (ex + 1) * cell + tol
              and ey * cell - tol <= cy < (ey + 1) * cell + tol)
    report = VerifyReport(detected=True, pos_ok=pos_ok,
                          scale_ok=det.scale == expected.scale,
                          rot_ok=det.rot == expected.rot,
                          flip_ok=det.flip == expected.flip,
                          detected_pos=det.pos, detected_scale=det.scale,
                          detected_rot=det.rot, detected_flip=det.flip)
    return report.all_ok, report


# -- corpus -----------------------------------------------------------------------

def build_synthetic_corpus(n_collections: int, images_per_collection: int = 4,
                           seed: int = 0) -> list[Collection]:
    """Deterministic corpus; each collection has a unique identity and a
    shared background across its members."""
    if n_collections < 1 or images_per_collection < 1:
        raise ValueError("need at least one collection and one image each")
    rng = make_rng(seed, _CORPUS_STREAM)
    identity_ids: list[int] = []
    seen: set[int] = set()
    while len(identity_ids) < n_collections:
        cand = int(rng.integers(0, 2**31 - 1))
        if cand not in seen:
            seen.add(cand)
            identity_ids.append(cand)
    collections = []
    for k in range(n_collections):
        bg_id = int(rng.integers(0, 2**31 - 1))
        specs = []
        for _ in range(images_per_collection):
            specs.append(SceneSpec(
                identity_id=identity_ids[k],
                pos=(int(rng.integers(0, GRID)), int(rng.integers(0, GRID))),
                scale=SCALES[int(rng.integers(0, len(SCALES)))],
                rot=ROTS[int(rng.integers(0, len(ROTS)))],
                flip=bool(rng.integers(0, 2)),
                bg_id=bg_id,
            ))
        collections.append(Collection(collection_id=k,
                                      identity_id=identity_ids[k],
                                      specs=tuple(specs)))
    return collections


def save_corpus(collections: list[Collection], path) -> None:
    """JSONL, one SceneSpec record per line with its collection/image ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for col in collections:
            for i, spec in enumerate(col.specs):
                row = {"collection_id": col.collection_id, "image_index": i}
                row.update(spec.to_dict())
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_corpus(path) -> list[Collection]:
    groups: dict[int, list[tuple[int, SceneSpec]]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: bad JSON: {exc}") from exc
        groups.setdefault(row["collection_id"], []).append(
            (row["image_index"], SceneSpec.from_dict(row)))
    collections = []
    for cid in sorted(groups):
        entries = sorted(groups[cid])
        specs = tuple(spec for _, spec in entries)
        collections.append(Collection(collection_id=cid,
                                      identity_id=specs[0].identity_id,
                                      specs=specs))
    return collections
