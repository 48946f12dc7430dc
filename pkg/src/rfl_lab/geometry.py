"""Scene tiling and box-level test-time-augmentation transforms.

Tiling covers a continuous scene rectangle with fixed-size square crops
laid out on a stride of (tile - overlap); the final crop on each axis is
anchored to the far edge instead of padded, so every scene point is
covered and consecutive crops overlap by at least the requested amount.

TTA transforms operate on axis-aligned boxes only.  The supported
primitives are horizontal flip, the three 90-degree rotations
(clockwise), and uniform scaling; arbitrary-angle rotation is excluded
because it does not map axis-aligned boxes to axis-aligned boxes
invertibly.  Point maps, with (W, H) the current frame size:

    fliph : (x, y) -> (W - x, y)        frame (W, H)
    rot90 : (x, y) -> (H - y, x)        frame (H, W)
    rot180: (x, y) -> (W - x, H - y)    frame (W, H)
    rot270: (x, y) -> (y, W - x)        frame (H, W)
    scale s: (x, y) -> (s x, s y)       frame (sW, sH)

Transforms compose left to right, and every composition has an exact
inverse built from reversed inverse primitives; round trips through the
90-degree family are exact whenever the coordinates and frame sizes are
exactly representable (e.g. pixel-grid values), and scale round trips
stay within a few ulp.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

from .metrics import Box, Detection


@dataclass(frozen=True)
class SceneDims:
    width: float
    height: float

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"scene dims must be positive, got {self}")


@dataclass(frozen=True)
class TileSpec:
    origin_x: float
    origin_y: float
    tile_w: float
    tile_h: float


class TtaKind(enum.Enum):
    IDENTITY = "identity"
    FLIP_H = "fliph"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    SCALE = "scale"


@dataclass(frozen=True)
class TtaOp:
    kind: TtaKind
    factor: float = 1.0

    def __post_init__(self) -> None:
        if self.kind is TtaKind.SCALE and self.factor <= 0:
            raise ValueError(f"scale factor must be positive, got {self.factor}")


_INVERSE = {
    TtaKind.IDENTITY: TtaKind.IDENTITY,
    TtaKind.FLIP_H: TtaKind.FLIP_H,
    TtaKind.ROT90: TtaKind.ROT270,
    TtaKind.ROT180: TtaKind.ROT180,
    TtaKind.ROT270: TtaKind.ROT90,
}


@dataclass(frozen=True)
class TtaTransform:
    """Ordered composition of TTA primitives, applied left to right."""

    ops: tuple[TtaOp, ...] = ()

    @classmethod
    def identity(cls) -> "TtaTransform":
        return cls(())

    @classmethod
    def fliph(cls) -> "TtaTransform":
        return cls((TtaOp(TtaKind.FLIP_H),))

    @classmethod
    def rot90(cls) -> "TtaTransform":
        return cls((TtaOp(TtaKind.ROT90),))

    @classmethod
    def rot180(cls) -> "TtaTransform":
        return cls((TtaOp(TtaKind.ROT180),))

    @classmethod
    def rot270(cls) -> "TtaTransform":
        return cls((TtaOp(TtaKind.ROT270),))

    @classmethod
    def scale(cls, factor: float) -> "TtaTransform":
        return cls((TtaOp(TtaKind.SCALE, factor),))

    def then(self, other: "TtaTransform") -> "TtaTransform":
        return TtaTransform(self.ops + other.ops)

    def inverse(self) -> "TtaTransform":
        inv = []
        for op in reversed(self.ops):
            if op.kind is TtaKind.SCALE:
                inv.append(TtaOp(TtaKind.SCALE, 1.0 / op.factor))
            else:
                inv.append(TtaOp(_INVERSE[op.kind]))
        return TtaTransform(tuple(inv))

    @classmethod
    def parse(cls, spec: str) -> "TtaTransform":
        """Parse e.g. 'rot90', 'scale:0.8', or 'rot90+scale:1.2'."""
        ops = []
        for part in spec.split("+"):
            part = part.strip().lower()
            if not part:
                raise ValueError(f"empty step in transform spec {spec!r}")
            if part.startswith("scale:"):
                ops.append(TtaOp(TtaKind.SCALE, float(part.split(":", 1)[1])))
            else:
                try:
                    kind = TtaKind(part)
                except ValueError:
                    raise ValueError(f"unknown transform step {part!r}") from None
                if kind is TtaKind.SCALE:
                    raise ValueError("scale needs a factor, e.g. scale:0.8")
                if kind is not TtaKind.IDENTITY:
                    ops.append(TtaOp(kind))
        return cls(tuple(ops))

    def __str__(self) -> str:
        if not self.ops:
            return "identity"
        return "+".join(
            f"scale:{op.factor:g}" if op.kind is TtaKind.SCALE else op.kind.value
            for op in self.ops
        )


def _apply_op_point(x: float, y: float, op: TtaOp, dims: SceneDims) -> tuple[float, float]:
    if op.kind is TtaKind.IDENTITY:
        return x, y
    if op.kind is TtaKind.FLIP_H:
        return dims.width - x, y
    if op.kind is TtaKind.ROT90:
        return dims.height - y, x
    if op.kind is TtaKind.ROT180:
        return dims.width - x, dims.height - y
    if op.kind is TtaKind.ROT270:
        return y, dims.width - x
    return op.factor * x, op.factor * y


def _op_dims(op: TtaOp, dims: SceneDims) -> SceneDims:
    if op.kind in (TtaKind.ROT90, TtaKind.ROT270):
        return SceneDims(dims.height, dims.width)
    if op.kind is TtaKind.SCALE:
        return SceneDims(op.factor * dims.width, op.factor * dims.height)
    return dims


def transformed_dims(scene: SceneDims, t: TtaTransform) -> SceneDims:
    """Frame size after applying ``t`` to a scene of the given size."""
    dims = scene
    for op in t.ops:
        dims = _op_dims(op, dims)
    return dims


def _apply_op_box(box: Box, op: TtaOp, dims: SceneDims) -> Box:
    ax, ay = _apply_op_point(box.x1, box.y1, op, dims)
    bx, by = _apply_op_point(box.x2, box.y2, op, dims)
    return Box(min(ax, bx), min(ay, by), max(ax, bx), max(ay, by))


def apply_tta(
    boxes: Sequence[Detection], scene: SceneDims, t: TtaTransform
) -> list[Detection]:
    """Map detections into the transformed frame (corner hull of the map)."""
    dims = scene
    out = list(boxes)
    for op in t.ops:
        out = [
            Detection(_apply_op_box(d.box, op, dims), d.class_id, d.score,
                      d.source, d.image_id)
            for d in out
        ]
        dims = _op_dims(op, dims)
    return out


def invert_tta(
    boxes: Sequence[Detection], scene: SceneDims, t: TtaTransform
) -> list[Detection]:
    """Map detections from the transformed frame back to the original.

    ``scene`` is the original (untransformed) scene size; the transformed
    frame is derived from it.  Exact inverse of :func:`apply_tta` for the
    90-degree family; scale round trips are within floating-point error.
    """
    return apply_tta(boxes, transformed_dims(scene, t), t.inverse())


def tile_grid(scene: SceneDims, tile: float, overlap: float) -> list[TileSpec]:
    """Cover the scene with tile x tile crops overlapping by >= ``overlap``.

    Positions along each axis run 0, stride, 2*stride, ... with
    stride = tile - overlap; the last position is clamped to dim - tile
    (deduplicated), and an axis shorter than the tile yields a single
    position 0 with the crop size clamped to the axis length.  Tiles are
    returned row-major (x fastest).
    """
    if tile <= 0:
        raise ValueError(f"tile size must be positive, got {tile}")
    if overlap < 0:
        raise ValueError(f"overlap must be nonnegative, got {overlap}")
    if overlap >= tile:
        raise ValueError(f"overlap {overlap} must be smaller than tile {tile}")

    xs, tw = _axis_positions(scene.width, tile, overlap)
    ys, th = _axis_positions(scene.height, tile, overlap)
    return [TileSpec(x, y, tw, th) for y in ys for x in xs]


def _axis_positions(dim: float, tile: float, overlap: float) -> tuple[list[float], float]:
    if dim <= tile:
        return [0.0], min(tile, dim)
    stride = tile - overlap
    positions = [0.0]
    k = 1
    while k * stride + tile < dim:
        positions.append(k * stride)
        k += 1
    last = dim - tile
    if last != positions[-1]:
        positions.append(last)
    return positions, tile


def tile_axis_counts(scene: SceneDims, tile: float, overlap: float) -> tuple[int, int]:
    """(columns, rows) of the grid produced by :func:`tile_grid`."""
    xs, _ = _axis_positions(scene.width, tile, overlap)
    ys, _ = _axis_positions(scene.height, tile, overlap)
    return len(xs), len(ys)


def clip_boxes_to_tile(
    boxes: Sequence[Detection], tile: TileSpec, min_visibility: float = 1e-9
) -> list[Detection]:
    """Intersect boxes with the tile and translate to tile-local coordinates.

    Boxes keeping less than ``min_visibility`` of their original area
    (zero-area boxes keep nothing) are dropped.
    """
    if not (0.0 < min_visibility <= 1.0):
        raise ValueError(f"min_visibility must be in (0, 1], got {min_visibility}")
    out = []
    for d in boxes:
        x1 = max(d.box.x1, tile.origin_x)
        y1 = max(d.box.y1, tile.origin_y)
        x2 = min(d.box.x2, tile.origin_x + tile.tile_w)
        y2 = min(d.box.y2, tile.origin_y + tile.tile_h)
        if x2 <= x1 or y2 <= y1:
            continue
        original = d.box.area
        if original <= 0.0:
            continue
        if (x2 - x1) * (y2 - y1) / original < min_visibility:
            continue
        clipped = Box(
            x1 - tile.origin_x, y1 - tile.origin_y,
            x2 - tile.origin_x, y2 - tile.origin_y,
        )
        out.append(Detection(clipped, d.class_id, d.score, d.source, d.image_id))
    return out


def tile_to_scene(dets: Sequence[Detection], tile: TileSpec) -> list[Detection]:
    """Translate tile-local detections back into scene coordinates."""
    return [
        Detection(
            Box(d.box.x1 + tile.origin_x, d.box.y1 + tile.origin_y,
                d.box.x2 + tile.origin_x, d.box.y2 + tile.origin_y),
            d.class_id, d.score, d.source, d.image_id,
        )
        for d in dets
    ]
