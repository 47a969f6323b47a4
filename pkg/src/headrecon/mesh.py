"""Isosurface extraction, point/mesh distance evaluation, and mesh I/O.

Marching cubes uses the classic 256-case tables with linear edge interpolation
and welds vertices on shared grid edges. Chamfer evaluation is the mean
distance from ground-truth points to the predicted surface, accelerated by an
AABB tree over triangles with a vertex KD-tree providing upper bounds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataIOError, SceneFormatError, ValidationError
from .mc_tables import CORNER_OFFSETS, CORNER_PAIRS, MC_TRIANGLES

# lower-corner offset and axis of each cube edge, derived from the corner pairs
_EDGE_LO = np.minimum(CORNER_OFFSETS[CORNER_PAIRS[:, 0]], CORNER_OFFSETS[CORNER_PAIRS[:, 1]])
_EDGE_AXIS = np.argmax(
    CORNER_OFFSETS[CORNER_PAIRS[:, 0]] != CORNER_OFFSETS[CORNER_PAIRS[:, 1]], axis=1
)


@dataclass
class TriMesh:
    vertices: np.ndarray  # (n,3)
    triangles: np.ndarray  # (m,3) int
    normals: np.ndarray | None = None  # per-vertex, optional

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValidationError("triangle indices out of range")

    @property
    def empty(self):
        return self.triangles.shape[0] == 0


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("point cloud must be finite")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)


def face_normals(mesh: TriMesh, normalize=True):
    v = mesh.vertices
    t = mesh.triangles
    n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    if normalize:
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-30)
    return n


def mesh_area(mesh: TriMesh):
    return float(0.5 * np.linalg.norm(face_normals(mesh, normalize=False), axis=1).sum())


# ---------------------------------------------------------------------------
# marching cubes


def marching_cubes(field, lo, hi, resolution, chunk=200_000) -> TriMesh:
    """Extract the zero level set of ``field`` over the box [lo, hi].

    ``resolution`` counts cells per axis (so the grid has resolution+1 sample
    planes). Triangles are oriented with normals toward positive field values.
    An empty level set yields an empty mesh.
    """
    if resolution < 2:
        raise ValidationError("resolution must be at least 2 cells per axis")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValidationError("marching cubes needs a box with hi > lo on every axis")
    g = resolution + 1
    axes = [np.linspace(lo[a], hi[a], g) for a in range(3)]
    xx, yy, zz = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
    F = np.empty(g**3)
    for s in range(0, len(pts), chunk):
        F[s : s + chunk] = np.ravel(field(pts[s : s + chunk]))
    F = F.reshape(g, g, g)

    inside = F < 0.0
    cases = np.zeros((resolution,) * 3, dtype=np.uint16)
    for bit, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        blk = inside[ox : ox + resolution, oy : oy + resolution, oz : oz + resolution]
        cases |= blk.astype(np.uint16) << bit
    active = (cases != 0) & (cases != 255)
    if not active.any():
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    ci, cj, ck = np.nonzero(active)
    acase = cases[ci, cj, ck]

    tri_edges = MC_TRIANGLES[acase][:, :15].reshape(-1, 5, 3)  # cube-edge ids per tri slot
    keep = tri_edges[:, :, 0] >= 0
    cell_of_tri = np.repeat(np.arange(len(ci)), 5)[keep.ravel()]
    tri_e = tri_edges[keep]  # (T,3)

    # global grid-edge key for every triangle corner
    cell_xyz = np.stack([ci, cj, ck], axis=1)[cell_of_tri]  # (T,3)
    corner = cell_xyz[:, None, :] + _EDGE_LO[tri_e]  # (T,3,3)
    axis = _EDGE_AXIS[tri_e]  # (T,3)
    key = ((corner[..., 0] * g + corner[..., 1]) * g + corner[..., 2]) * 3 + axis
    uniq, inv = np.unique(key.ravel(), return_inverse=True)
    tris = inv.reshape(-1, 3)

    # interpolate one vertex per unique crossed grid edge
    ug = np.empty((len(uniq), 4), dtype=np.int64)
    ug[:, 3] = uniq % 3
    rem = uniq // 3
    ug[:, 2] = rem % g
    rem //= g
    ug[:, 1] = rem % g
    ug[:, 0] = rem // g
    pa = ug[:, :3]
    pb = pa.copy()
    pb[np.arange(len(uniq)), ug[:, 3]] += 1
    fa = F[pa[:, 0], pa[:, 1], pa[:, 2]]
    fb = F[pb[:, 0], pb[:, 1], pb[:, 2]]
    denom = fa - fb
    t = np.where(np.abs(denom) > 1e-300, fa / np.where(denom == 0.0, 1.0, denom), 0.5)
    t = np.clip(t, 0.0, 1.0)
    step = (hi - lo) / resolution
    va = lo + pa * step
    vb = lo + pb * step
    verts = va + t[:, None] * (vb - va)

    mesh = TriMesh(verts, tris)
    # orient: face normals should point toward positive field (outside)
    fn = face_normals(mesh, normalize=False)
    centroids = verts[tris].mean(axis=1)
    areas2 = np.linalg.norm(fn, axis=1)
    ok = areas2 > 1e-14
    probe = np.flatnonzero(ok)[: min(64, ok.sum())] if ok.any() else np.array([], dtype=int)
    if len(probe):
        h = 0.25 * float(np.min(step))
        up = np.ravel(field(centroids[probe] + h * fn[probe] / areas2[probe, None]))
        dn = np.ravel(field(centroids[probe] - h * fn[probe] / areas2[probe, None]))
        if np.median(up - dn) < 0.0:
            tris = tris[:, ::-1]
    mesh = TriMesh(verts, tris[ok] if not ok.all() else tris)
    return mesh


def connected_component_count(mesh: TriMesh) -> int:
    """Number of triangle-connected components over referenced vertices."""
    if mesh.empty:
        return 0
    parent = np.arange(len(mesh.vertices))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for tri in mesh.triangles:
        ra, rb, rc = find(tri[0]), find(tri[1]), find(tri[2])
        parent[rb] = ra
        parent[rc] = ra
    used = np.unique(mesh.triangles)
    return len({find(u) for u in used})


# ---------------------------------------------------------------------------
# surface sampling


def sample_surface(mesh: TriMesh, n, seed=None) -> PointCloud:
    """Area-weighted uniform surface samples with face normals."""
    if mesh.empty:
        raise ValidationError("cannot sample an empty mesh")
    if n == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fn = face_normals(mesh, normalize=False)
    areas = 0.5 * np.linalg.norm(fn, axis=1)
    p = areas / areas.sum()
    faces = rng.choice(len(areas), size=n, p=p)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.triangles[faces, k]] for k in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    nrm = fn[faces] / np.maximum(np.linalg.norm(fn[faces], axis=1, keepdims=True), 1e-30)
    return PointCloud(pts, nrm)


# ---------------------------------------------------------------------------
# point-to-mesh distance


def point_triangle_distances(p, tri):
    """Exact distances from one point (3,) to triangles (m,3,3)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.sum(ab * ap, axis=1)
    d2 = np.sum(ac * ap, axis=1)
    bp = p - b
    d3 = np.sum(ab * bp, axis=1)
    d4 = np.sum(ac * bp, axis=1)
    cp = p - c
    d5 = np.sum(ab * cp, axis=1)
    d6 = np.sum(ac * cp, axis=1)

    nearest = np.empty_like(a)
    # vertex regions
    m_a = (d1 <= 0) & (d2 <= 0)
    m_b = (d3 >= 0) & (d4 <= d3)
    m_c = (d6 >= 0) & (d5 <= d6)
    # edge AB
    vc = d1 * d4 - d3 * d2
    m_ab = (~m_a) & (~m_b) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    # edge AC
    vb = d5 * d2 - d1 * d6
    m_ac = (~m_a) & (~m_c) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    # edge BC
    va = d3 * d6 - d5 * d4
    m_bc = (~m_b) & (~m_c) & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    done = m_a | m_b | m_c | m_ab | m_ac | m_bc
    nearest[m_a] = a[m_a]
    nearest[m_b] = b[m_b]
    nearest[m_c] = c[m_c]
    if m_ab.any():
        t = d1[m_ab] / (d1[m_ab] - d3[m_ab])
        nearest[m_ab] = a[m_ab] + t[:, None] * ab[m_ab]
    if m_ac.any():
        t = d2[m_ac] / (d2[m_ac] - d6[m_ac])
        nearest[m_ac] = a[m_ac] + t[:, None] * ac[m_ac]
    if m_bc.any():
        t = (d4[m_bc] - d3[m_bc]) / ((d4[m_bc] - d3[m_bc]) + (d5[m_bc] - d6[m_bc]))
        nearest[m_bc] = b[m_bc] + t[:, None] * (c[m_bc] - b[m_bc])
    if (~done).any():
        f = ~done
        denom = va[f] + vb[f] + vc[f]
        denom = np.where(np.abs(denom) < 1e-300, 1.0, denom)
        v = vb[f] / denom
        w = vc[f] / denom
        nearest[f] = a[f] + v[:, None] * ab[f] + w[:, None] * ac[f]
    return np.linalg.norm(nearest - p, axis=1)


class _AabbTree:
    """Median-split AABB tree over triangles, arrays-of-nodes layout."""

    LEAF_SIZE = 8

    def __init__(self, mesh: TriMesh):
        tri = mesh.vertices[mesh.triangles]  # (m,3,3)
        self.tri = tri
        m = len(tri)
        self.lo_b = []
        self.hi_b = []
        self.left = []
        self.right = []
        self.items = []  # triangle index arrays for leaves, None for inner
        order = np.arange(m)
        cent = tri.mean(axis=1)
        self._build(order, tri, cent)
        self.lo_b = np.array(self.lo_b)
        self.hi_b = np.array(self.hi_b)

    def _build(self, idx, tri, cent):
        node = len(self.lo_b)
        t = tri[idx]
        self.lo_b.append(t.reshape(-1, 3).min(axis=0) if len(idx) else np.zeros(3))
        self.hi_b.append(t.reshape(-1, 3).max(axis=0) if len(idx) else np.zeros(3))
        self.left.append(-1)
        self.right.append(-1)
        self.items.append(None)
        if len(idx) <= self.LEAF_SIZE:
            self.items[node] = idx
            return node
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        half = len(idx) // 2
        part = np.argpartition(c[:, axis], half)
        self.left[node] = self._build(idx[part[:half]], tri, cent)
        self.right[node] = self._build(idx[part[half:]], tri, cent)
        return node

    def _box_dist(self, node, p):
        d = np.maximum(np.maximum(self.lo_b[node] - p, 0.0), p - self.hi_b[node])
        return np.linalg.norm(d)

    def query(self, p, upper):
        best = upper
        stack = [0]
        while stack:
            node = stack.pop()
            if self._box_dist(node, p) >= best:
                continue
            items = self.items[node]
            if items is not None:
                if len(items):
                    d = point_triangle_distances(p, self.tri[items]).min()
                    best = min(best, d)
                continue
            stack.append(self.left[node])
            stack.append(self.right[node])
        return best


def chamfer_unidirectional(gt, pred) -> float:
    """Mean distance from ground-truth points to the predicted surface.

    ``gt`` is a PointCloud or (n,3) array; ``pred`` is a TriMesh (point-to-
    triangle distances) or a point cloud (nearest-point distances).
    """
    gp = gt.points if isinstance(gt, PointCloud) else np.asarray(gt, dtype=np.float64)
    if gp.size == 0:
        raise ValidationError("ground-truth cloud is empty")
    if isinstance(pred, TriMesh):
        if pred.empty:
            raise ValidationError("predicted mesh is empty")
        tree = _AabbTree(pred)
        vk = cKDTree(pred.vertices)
        ub, _ = vk.query(gp)
        out = np.empty(len(gp))
        for i, p in enumerate(gp):
            out[i] = tree.query(p, ub[i] + 1e-12)
        return float(out.mean())
    pp = pred.points if isinstance(pred, PointCloud) else np.asarray(pred, dtype=np.float64)
    if pp.size == 0:
        raise ValidationError("predicted cloud is empty")
    d, _ = cKDTree(pp).query(gp)
    return float(np.mean(d))


# ---------------------------------------------------------------------------
# mesh / point-cloud files


def save_obj(mesh: TriMesh, path):
    try:
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for t in mesh.triangles:
                fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    except OSError as e:
        raise DataIOError(f"cannot write OBJ {path}: {e}") from e


def load_obj(path) -> TriMesh:
    """Read the vertex/face subset of OBJ written by save_obj."""
    verts, faces = [], []
    try:
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(c) for c in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(tok.split("/")[0]) for tok in parts[1:4]]
                    if any(i < 1 for i in idx):
                        raise SceneFormatError(f"{path}: unsupported OBJ face indexing")
                    faces.append([i - 1 for i in idx])
    except OSError as e:
        raise DataIOError(f"cannot read OBJ {path}: {e}") from e
    if not verts:
        raise SceneFormatError(f"{path}: no vertices found")
    return TriMesh(np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def save_ply_mesh(mesh: TriMesh, path):
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
            for t in mesh.triangles:
                fh.write(struct.pack("<Biii", 3, int(t[0]), int(t[1]), int(t[2])))
    except OSError as e:
        raise DataIOError(f"cannot write PLY {path}: {e}") from e


def save_ply_points(pc: PointCloud, path):
    props = "property double x\nproperty double y\nproperty double z\n"
    cols = [pc.points]
    if pc.normals is not None:
        props += "property double nx\nproperty double ny\nproperty double nz\n"
        cols.append(pc.normals)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pc.points)}\n{props}end_header\n"
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(np.ascontiguousarray(np.hstack(cols), dtype="<f8").tobytes())
    except OSError as e:
        raise DataIOError(f"cannot write PLY {path}: {e}") from e


_PLY_TYPES = {"float": ("<f4", 4), "float32": ("<f4", 4), "double": ("<f8", 8), "float64": ("<f8", 8)}


def load_ply_points(path) -> PointCloud:
    """Read a binary little-endian PLY vertex cloud (x y z [nx ny nz] ...)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataIOError(f"cannot read PLY {path}: {e}") from e
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise SceneFormatError(f"{path} is not a PLY file")
    header = blob[:end].decode("ascii", "replace").splitlines()
    count = None
    props = []
    fmt_ok = False
    element = None
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                count = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            if parts[1] == "list":
                raise SceneFormatError(f"{path}: list properties unsupported in vertex element")
            if parts[1] not in _PLY_TYPES:
                raise SceneFormatError(f"{path}: unsupported property type {parts[1]}")
            props.append((parts[2], _PLY_TYPES[parts[1]][0]))
    if not fmt_ok or count is None:
        raise SceneFormatError(f"{path}: need binary_little_endian PLY with a vertex element")
    dtype = np.dtype([(n, t) for n, t in props])
    body = blob[end + len(b"end_header\n") :]
    rec = np.frombuffer(body, dtype=dtype, count=count)
    names = [n for n, _ in props]
    if not all(c in names for c in "xyz"):
        raise SceneFormatError(f"{path}: vertex element lacks x/y/z")
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    normals = None
    if all(c in names for c in ("nx", "ny", "nz")):
        normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64)
    return PointCloud(pts, normals)
