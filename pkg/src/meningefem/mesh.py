"""Hexahedral sample meshes with an embedded zero-thickness cohesive layer.

Hex connectivity uses the trilinear ordering: nodes 0-3 form the bottom face
counter-clockwise about +z, nodes 4-7 sit directly above them. Cohesive
elements use the same layout with 0-3 on the lower face and 4-7 on the upper
face.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Layer",
    "Mesh",
    "MeshError",
    "DimensionMismatchError",
    "DegenerateElementError",
    "MeshFormatError",
    "generate_sample_mesh",
    "load_mesh",
    "save_mesh",
    "mesh_to_document",
    "mesh_from_document",
    "scaled_jacobian",
    "element_scaled_jacobians",
    "mesh_quality_report",
    "deformable_height",
    "MEAN_SJ_WARN",
    "MIN_SJ_WARN",
]

MEAN_SJ_WARN = 0.95
MIN_SJ_WARN = 0.28
COMMENSURATE_TOL = 1e-9
CONGRUENCE_TOL = 1e-9
RIGID_NAMES = ("skull",)

# For each corner: the corner itself and its three neighbours, ordered so that
# the edge triad is right-handed for a positively oriented element.
_CORNERS = np.array([
    [0, 1, 3, 4],
    [1, 2, 0, 5],
    [2, 3, 1, 6],
    [3, 0, 2, 7],
    [4, 7, 5, 0],
    [5, 4, 6, 1],
    [6, 5, 7, 2],
    [7, 6, 4, 3],
])
_EDGES = np.array([[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6],
                   [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]])


class MeshError(ValueError):
    """A mesh violates one of its structural invariants."""


class DimensionMismatchError(MeshError):
    pass


class DegenerateElementError(MeshError):
    pass


class MeshFormatError(MeshError):
    """Parse failure in a mesh document; carries the offending location."""

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


@dataclass(frozen=True)
class Layer:
    material: str
    thickness: float
    rigid: bool | None = None

    @property
    def is_rigid(self) -> bool:
        if self.rigid is None:
            return self.material in RIGID_NAMES
        return self.rigid


@dataclass(frozen=True, eq=False)
class Mesh:
    nodes: np.ndarray
    hexes: np.ndarray
    hex_materials: tuple[str, ...]
    cohesives: np.ndarray = field(default_factory=lambda: np.zeros((0, 8), dtype=np.int64))
    cohesive_laws: tuple[str, ...] = ()
    node_sets: Mapping[str, np.ndarray] = field(default_factory=dict)
    materials: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float).reshape(-1, 3)
        hexes = np.array(self.hexes, dtype=np.int64).reshape(-1, 8)
        coh = np.array(self.cohesives, dtype=np.int64).reshape(-1, 8)
        sets = {k: np.array(sorted(set(int(i) for i in v)), dtype=np.int64)
                for k, v in self.node_sets.items()}
        for arr in (nodes, hexes, coh, *sets.values()):
            arr.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "hexes", hexes)
        object.__setattr__(self, "cohesives", coh)
        object.__setattr__(self, "node_sets", sets)
        object.__setattr__(self, "hex_materials", tuple(self.hex_materials))
        object.__setattr__(self, "cohesive_laws", tuple(self.cohesive_laws))
        object.__setattr__(self, "materials", {k: dict(v) for k, v in self.materials.items()})
        self.validate()

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def rigid_mask(self) -> np.ndarray:
        """Per-hex flag for elements whose material record is tagged rigid."""
        rigid = {name for name, rec in self.materials.items() if rec.get("model") == "rigid"}
        return np.array([m in rigid for m in self.hex_materials], dtype=bool)

    def validate(self) -> None:
        n = len(self.nodes)
        if len(self.hex_materials) != len(self.hexes):
            raise MeshError("hex material list length does not match hex count")
        if len(self.cohesive_laws) != len(self.cohesives):
            raise MeshError("cohesive law list length does not match cohesive count")
        for kind, conn in (("hex", self.hexes), ("cohesive", self.cohesives)):
            bad = np.argwhere((conn < 0) | (conn >= n))
            if len(bad):
                e, k = bad[0]
                raise MeshError(f"{kind} {e} references node {conn[e, k]} but mesh has {n} nodes")
            srt = np.sort(conn, axis=1)
            dup = np.flatnonzero(np.any(srt[:, 1:] == srt[:, :-1], axis=1))
            if len(dup):
                raise MeshError(f"{kind} {dup[0]} has repeated node ids {conn[dup[0]].tolist()}")
        for name, ids in self.node_sets.items():
            if len(ids) and (ids.min() < 0 or ids.max() >= n):
                bad_id = ids[(ids < 0) | (ids >= n)][0]
                raise MeshError(f"node set {name!r} references node {bad_id} but mesh has {n} nodes")
        if len(np.unique(np.sort(self.hexes, axis=1), axis=0)) != len(self.hexes):
            raise MeshError("two hex elements share all 8 nodes")
        if len(self.hexes):
            sj = element_scaled_jacobians(self.nodes, self.hexes)
            bad = np.flatnonzero(~(sj > 0.0))
            if len(bad):
                raise MeshError(f"hex {bad[0]} is inverted (scaled Jacobian {sj[bad[0]]:.3g})")
        for e, conn in enumerate(self.cohesives):
            _check_congruent(self.nodes[conn], e)

    def equals(self, other: "Mesh") -> bool:
        return (
            np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.hexes, other.hexes)
            and self.hex_materials == other.hex_materials
            and np.array_equal(self.cohesives, other.cohesives)
            and self.cohesive_laws == other.cohesive_laws
            and self.node_sets.keys() == other.node_sets.keys()
            and all(np.array_equal(v, other.node_sets[k]) for k, v in self.node_sets.items())
            and dict(self.materials) == dict(other.materials)
        )


def _check_congruent(xc: np.ndarray, e: int) -> None:
    bottom, top = xc[:4], xc[4:]
    mid = 0.5 * (bottom + top)
    n = np.cross(mid[2] - mid[0], mid[3] - mid[1])
    nn = np.linalg.norm(n)
    if nn == 0.0:
        raise DegenerateElementError(f"cohesive {e} has a zero-area midplane")
    n /= nn
    # Congruence: after removing the offset along the normal, the faces coincide.
    d = top - bottom
    d_normal = d @ n
    lateral = d - np.outer(d_normal, n)
    if np.max(np.abs(lateral)) > CONGRUENCE_TOL or np.ptp(d_normal) > CONGRUENCE_TOL:
        raise MeshError(f"cohesive {e} faces are not congruent")


def _divisions(length: float, size: float, what: str) -> int:
    k = round(length / size)
    if k < 1 or abs(k * size - length) > COMMENSURATE_TOL:
        raise DimensionMismatchError(
            f"{what} = {length:g} m is not an integer multiple of element size {size:g} m")
    return int(k)


def generate_sample_mesh(
    dimensions: Sequence[float],
    element_size: float,
    layers: Iterable[Layer | tuple] | None = None,
    cohesive_plane: float | None = None,
    cohesive_law: str = "interface",
) -> Mesh:
    """Structured cuboid mesh with material layers stacked along z.

    When ``cohesive_plane`` is given, the nodes on that plane are duplicated
    and the two sides are joined by zero-thickness cohesive elements.
    """
    if not element_size > 0.0:
        raise MeshError(f"element size must be positive, got {element_size}")
    lx, ly, lz = (float(d) for d in dimensions)
    nx = _divisions(lx, element_size, "dimension x")
    ny = _divisions(ly, element_size, "dimension y")
    nz = _divisions(lz, element_size, "dimension z")
    if layers is None:
        layers = [Layer("brain", lz)]
    layers = [l if isinstance(l, Layer) else Layer(*l) for l in layers]
    layer_k = [_divisions(l.thickness, element_size, f"layer {l.material!r} thickness") for l in layers]
    if sum(layer_k) != nz:
        raise DimensionMismatchError(
            f"layer thicknesses sum to {sum(l.thickness for l in layers):g} m, dimension z is {lz:g} m")
    boundaries = np.cumsum([0] + layer_k)
    k_coh = None
    if cohesive_plane is not None:
        k_coh = round(cohesive_plane / element_size)
        if abs(k_coh * element_size - cohesive_plane) > COMMENSURATE_TOL or k_coh not in boundaries[1:-1]:
            raise MeshError(f"cohesive plane z = {cohesive_plane:g} m is not an interior layer boundary")

    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    zs = np.linspace(0.0, lz, nz + 1)
    # Node grid; the cohesive plane is stored twice (lower copy, upper copy).
    z_levels = list(range(nz + 1))
    if k_coh is not None:
        z_levels.insert(k_coh + 1, k_coh)
    level_index = {}
    nodes = []
    for li, k in enumerate(z_levels):
        for j in range(ny + 1):
            for i in range(nx + 1):
                nodes.append((xs[i], ys[j], zs[k]))
    per_level = (nx + 1) * (ny + 1)

    def nid(i, j, level):
        return level * per_level + j * (nx + 1) + i

    def level_of(k, upper_side):
        # Grid level k maps to the stored level; above the cohesive plane shift by one.
        if k_coh is None or k < k_coh or (k == k_coh and not upper_side):
            return k
        return k + 1

    hexes, mats = [], []
    for li, layer in enumerate(layers):
        for k in range(boundaries[li], boundaries[li + 1]):
            lo, hi = level_of(k, True), level_of(k + 1, False)
            for j in range(ny):
                for i in range(nx):
                    hexes.append([nid(i, j, lo), nid(i + 1, j, lo), nid(i + 1, j + 1, lo), nid(i, j + 1, lo),
                                  nid(i, j, hi), nid(i + 1, j, hi), nid(i + 1, j + 1, hi), nid(i, j + 1, hi)])
                    mats.append(layer.material)
    cohesives = []
    if k_coh is not None:
        lo, hi = k_coh, k_coh + 1
        for j in range(ny):
            for i in range(nx):
                cohesives.append([nid(i, j, lo), nid(i + 1, j, lo), nid(i + 1, j + 1, lo), nid(i, j + 1, lo),
                                  nid(i, j, hi), nid(i + 1, j, hi), nid(i + 1, j + 1, hi), nid(i, j + 1, hi)])

    n_levels = len(z_levels)
    node_sets = {
        "bottom": np.arange(0, per_level),
        "top": np.arange((n_levels - 1) * per_level, n_levels * per_level),
    }
    materials = {}
    rigid_nodes = set()
    hexes_arr = np.array(hexes, dtype=np.int64).reshape(-1, 8)
    for layer in layers:
        materials.setdefault(layer.material, {"model": "rigid" if layer.is_rigid else "ogden2"})
    for e, m in enumerate(mats):
        if materials[m]["model"] == "rigid":
            rigid_nodes.update(hexes_arr[e].tolist())
    node_sets["skull"] = np.array(sorted(rigid_nodes), dtype=np.int64)
    return Mesh(
        nodes=np.array(nodes),
        hexes=hexes_arr,
        hex_materials=tuple(mats),
        cohesives=np.array(cohesives, dtype=np.int64).reshape(-1, 8),
        cohesive_laws=(cohesive_law,) * len(cohesives),
        node_sets=node_sets,
        materials=materials,
    )


def deformable_height(mesh: Mesh) -> float:
    """Total z-extent of the non-rigid layers; the denominator for reported shear strain."""
    mask = ~mesh.rigid_mask()
    if not mask.any():
        raise MeshError("mesh has no deformable elements")
    z = mesh.nodes[mesh.hexes[mask]][..., 2]
    return float(z.max() - z.min())


# --------------------------------------------------------------------------- quality


def element_scaled_jacobians(nodes: np.ndarray, hexes: np.ndarray) -> np.ndarray:
    """Scaled Jacobian (min over the 8 corners) for every hex; vectorised."""
    x = np.asarray(nodes, dtype=float)[np.asarray(hexes)]
    c = x[:, _CORNERS]  # (E, 8, 4, 3)
    e1 = c[:, :, 1] - c[:, :, 0]
    e2 = c[:, :, 2] - c[:, :, 0]
    e3 = c[:, :, 3] - c[:, :, 0]
    det = np.einsum("eci,eci->ec", np.cross(e1, e2), e3)
    lengths = np.linalg.norm(e1, axis=-1) * np.linalg.norm(e2, axis=-1) * np.linalg.norm(e3, axis=-1)
    if np.any(lengths == 0.0):
        bad = np.flatnonzero(np.any(lengths == 0.0, axis=1))[0]
        raise DegenerateElementError(f"hex {bad} has coincident corner nodes")
    return np.min(det / lengths, axis=1)


def scaled_jacobian(coords: np.ndarray) -> float:
    """Scaled Jacobian of a single hex from its 8 corner coordinates (shape (8, 3))."""
    coords = np.asarray(coords, dtype=float).reshape(8, 3)
    return float(element_scaled_jacobians(coords, np.arange(8)[None, :])[0])


def mesh_quality_report(mesh: Mesh, bins: int = 10, mean_warn: float = MEAN_SJ_WARN,
                        min_warn: float = MIN_SJ_WARN) -> dict:
    mask = ~mesh.rigid_mask()
    if not mask.any():
        raise MeshError("mesh has no deformable hex elements to assess")
    ids = np.flatnonzero(mask)
    sj = element_scaled_jacobians(mesh.nodes, mesh.hexes[ids])
    counts, edges = np.histogram(sj, bins=bins, range=(-1.0, 1.0))
    mean = float(np.mean(sj))
    low = ids[sj < min_warn]
    return {
        "count": int(len(sj)),
        "min": float(np.min(sj)),
        "mean": mean,
        "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
        "below_min_threshold": low.tolist(),
        "mean_ok": mean > mean_warn,
        "min_ok": len(low) == 0,
        "thresholds": {"mean": mean_warn, "min": min_warn},
    }


# ------------------------------------------------------------------------------ I/O


def mesh_to_document(mesh: Mesh) -> dict:
    return {
        "units": "m",
        "nodes": [[float(v) for v in p] for p in mesh.nodes],
        "hexes": [{"conn": c.tolist(), "material": m} for c, m in zip(mesh.hexes, mesh.hex_materials)],
        "cohesives": [{"conn": c.tolist(), "law": l} for c, l in zip(mesh.cohesives, mesh.cohesive_laws)],
        "node_sets": {k: v.tolist() for k, v in mesh.node_sets.items()},
        "materials": {k: dict(v) for k, v in mesh.materials.items()},
    }


def save_mesh(mesh: Mesh, path: str | Path | None = None) -> str:
    """Serialise to the JSON mesh format; floats are written with full repr precision."""
    text = json.dumps(mesh_to_document(mesh), indent=1)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def _require(doc: Mapping, key: str, kind: type, where: str):
    if key not in doc:
        raise MeshFormatError(f"missing required key {key!r}", where)
    value = doc[key]
    if not isinstance(value, kind):
        raise MeshFormatError(f"key {key!r} must be a {kind.__name__}", where)
    return value


def mesh_from_document(doc: Mapping) -> Mesh:
    if not isinstance(doc, Mapping):
        raise MeshFormatError("top level must be an object")
    units = doc.get("units", "m")
    if units != "m":
        raise MeshFormatError(f"unsupported units {units!r}; expected 'm'", "units")
    raw_nodes = _require(doc, "nodes", list, "<root>")
    nodes = []
    for i, p in enumerate(raw_nodes):
        if not (isinstance(p, list) and len(p) == 3 and all(isinstance(v, (int, float)) for v in p)):
            raise MeshFormatError("node must be [x, y, z] numbers", f"nodes[{i}]")
        nodes.append([float(v) for v in p])
    n = len(nodes)

    def elements(key, tag):
        conns, tags = [], []
        for i, rec in enumerate(doc.get(key, [])):
            where = f"{key}[{i}]"
            if not isinstance(rec, Mapping):
                raise MeshFormatError("element must be an object", where)
            conn = _require(rec, "conn", list, where)
            if len(conn) != 8 or not all(isinstance(v, int) and not isinstance(v, bool) for v in conn):
                raise MeshFormatError("conn must list 8 integer node ids", where)
            for v in conn:
                if not 0 <= v < n:
                    raise MeshFormatError(f"references node {v} but file defines {n} nodes", where)
            tag_value = _require(rec, tag, str, where)
            conns.append(conn)
            tags.append(tag_value)
        return np.array(conns, dtype=np.int64).reshape(-1, 8), tuple(tags)

    hexes, mats = elements("hexes", "material")
    coh, laws = elements("cohesives", "law")
    sets = {}
    for name, ids in doc.get("node_sets", {}).items():
        where = f"node_sets.{name}"
        if not isinstance(ids, list) or not all(isinstance(v, int) for v in ids):
            raise MeshFormatError("node set must be a list of integer ids", where)
        for v in ids:
            if not 0 <= v < n:
                raise MeshFormatError(f"references node {v} but file defines {n} nodes", where)
        sets[name] = ids
    materials = doc.get("materials", {})
    if not isinstance(materials, Mapping):
        raise MeshFormatError("materials must be an object", "materials")
    return Mesh(np.array(nodes).reshape(-1, 3), hexes, mats, coh, laws, sets, materials)


def load_mesh(source: str | Path | Mapping) -> Mesh:
    """Load a mesh from a path, a JSON string, or an already-parsed document."""
    if isinstance(source, Mapping):
        return mesh_from_document(source)
    text = str(source)
    if isinstance(source, Path) or not text.lstrip().startswith("{"):
        text = Path(source).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MeshFormatError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return mesh_from_document(doc)
