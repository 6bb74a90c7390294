"""Point-cloud data model, file I/O, synthetic articulated bodies and perturbations.

Clouds are plain coordinate matrices with optional per-point features, part
labels (0 = background, 1..15 = body parts) and integer correspondence ids
shared across the shapes of one dataset.  The synthetic generator produces a
capsule-sampled articulated figure at human scale (height ~1.7 units) so that
absolute kernel widths carry over to real scan data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC_CLOUD = b"MKPC"

BODY_PART_NAMES = (
    "head", "thorax", "abdomen",
    "left hand", "left lower arm", "left upper arm",
    "left foot", "left lower leg", "left upper leg",
    "right hand", "right lower arm", "right upper arm",
    "right foot", "right lower leg", "right upper leg",
)
N_BODY_PARTS = len(BODY_PART_NAMES)


class CloudParseError(ValueError):
    """Malformed cloud file; carries the offending line or byte offset."""


@dataclass
class PointCloud:
    coords: np.ndarray                      # (n, 3) float64
    features: np.ndarray | None = None      # (n, f) float64
    labels: np.ndarray | None = None        # (n,) int64, 0 = background
    corr: np.ndarray | None = None          # (n,) int64, -1 = no correspondent

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (n, 3), got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise ValueError("empty cloud")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords contain non-finite values")
        n = self.coords.shape[0]
        if self.features is not None:
            self.features = np.ascontiguousarray(self.features, dtype=np.float64)
            if self.features.shape[0] != n:
                raise ValueError("features row count mismatch")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError("labels shape mismatch")
            if self.labels.min() < 0:
                raise ValueError("negative label")
        if self.corr is not None:
            self.corr = np.ascontiguousarray(self.corr, dtype=np.int64)
            if self.corr.shape != (n,):
                raise ValueError("corr shape mismatch")
            real = self.corr[self.corr >= 0]
            if real.size != np.unique(real).size:
                raise ValueError("corr indices not unique within shape")

    @property
    def n(self) -> int:
        return self.coords.shape[0]


# ---------------------------------------------------------------------------
# file I/O
#
# xyz-ascii : one "x y z" triple per line, whitespace separated
# ply-ascii : ASCII PLY, reads the x/y/z properties of "element vertex"
# bin-f32   : 4-byte magic MKPC, u32 LE point count, n*3 LE float32 payload
# side-cars : <stem>.labels / <stem>.corr, one base-10 integer per line
# ---------------------------------------------------------------------------

FORMATS = ("xyz-ascii", "ply-ascii", "bin-f32")


def _read_sidecar(path: Path) -> np.ndarray | None:
    if not path.exists():
        return None
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            try:
                out.append(int(s))
            except ValueError:
                raise CloudParseError(f"{path}: line {ln}: not an integer: {s!r}")
    return np.asarray(out, dtype=np.int64)


def _parse_xyz_ascii(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) != 3:
                raise CloudParseError(f"{path}: line {ln}: expected 3 values, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise CloudParseError(f"{path}: line {ln}: bad number in {s!r}")
    if not rows:
        raise CloudParseError(f"{path}: empty cloud")
    return np.asarray(rows, dtype=np.float64)


def _parse_ply_ascii(path: Path) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudParseError(f"{path}: line 1: missing 'ply' magic")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body_start = None
    for ln, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = ln
            break
    if n_vertex is None or body_start is None:
        raise CloudParseError(f"{path}: header lacks 'element vertex' or 'end_header'")
    if n_vertex < 1:
        raise CloudParseError(f"{path}: empty cloud")
    try:
        cols = [props.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise CloudParseError(f"{path}: vertex element lacks x/y/z properties")
    coords = np.empty((n_vertex, 3), dtype=np.float64)
    for i in range(n_vertex):
        ln = body_start + 1 + i
        if ln > len(lines):
            raise CloudParseError(f"{path}: line {ln}: truncated vertex list")
        tok = lines[ln - 1].split()
        if len(tok) < len(props):
            raise CloudParseError(f"{path}: line {ln}: expected {len(props)} values")
        try:
            coords[i] = [float(tok[c]) for c in cols]
        except ValueError:
            raise CloudParseError(f"{path}: line {ln}: bad number")
    return coords


def _parse_bin_f32(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise CloudParseError(f"{path}: byte 0: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC_CLOUD:
        raise CloudParseError(f"{path}: byte 0: bad magic {raw[:4]!r}")
    (n,) = struct.unpack("<I", raw[4:8])
    if n < 1:
        raise CloudParseError(f"{path}: empty cloud")
    need = 8 + 12 * n
    if len(raw) != need:
        raise CloudParseError(f"{path}: byte {len(raw)}: expected {need} bytes for {n} points")
    pay = np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, 3)
    return pay.astype(np.float64)


def load_cloud(path, format: str) -> PointCloud:
    """Load a cloud; label/corr side-cars are picked up when present."""
    path = Path(path)
    if format == "xyz-ascii":
        coords = _parse_xyz_ascii(path)
    elif format == "ply-ascii":
        coords = _parse_ply_ascii(path)
    elif format == "bin-f32":
        coords = _parse_bin_f32(path)
    else:
        raise ValueError(f"unknown format {format!r}, expected one of {FORMATS}")
    labels = _read_sidecar(path.parent / (path.stem + ".labels"))
    corr = _read_sidecar(path.parent / (path.stem + ".corr"))
    for name, arr in (("labels", labels), ("corr", corr)):
        if arr is not None and arr.shape[0] != coords.shape[0]:
            raise CloudParseError(f"{path}: {name} side-car has {arr.shape[0]} rows, cloud has {coords.shape[0]}")
    return PointCloud(coords, labels=labels, corr=corr)


def save_cloud(cloud: PointCloud, path, format: str) -> None:
    """Write a cloud plus label/corr side-cars when those fields are set."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "xyz-ascii":
        with open(path, "w") as fh:
            for x, y, z in cloud.coords:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
    elif format == "ply-ascii":
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {cloud.n}\n")
            fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
            for x, y, z in cloud.coords:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
    elif format == "bin-f32":
        with open(path, "wb") as fh:
            fh.write(MAGIC_CLOUD)
            fh.write(struct.pack("<I", cloud.n))
            fh.write(np.ascontiguousarray(cloud.coords, dtype="<f4").tobytes())
    else:
        raise ValueError(f"unknown format {format!r}, expected one of {FORMATS}")
    for name, arr in (("labels", cloud.labels), ("corr", cloud.corr)):
        if arr is not None:
            with open(path.parent / (path.stem + "." + name), "w") as fh:
                fh.write("\n".join(str(int(v)) for v in arr) + "\n")


# ---------------------------------------------------------------------------
# synthetic articulated body
# ---------------------------------------------------------------------------

#: proportional multipliers describing one synthetic subject; 1.0 = canonical
PROPORTION_KEYS = ("height", "leg", "arm", "torso", "girth", "shoulder_w", "head")

#: joint-angle order for the 10-dof pose vector (radians)
JOINT_NAMES = ("neck", "spine", "l_shoulder", "r_shoulder", "l_elbow",
               "r_elbow", "l_hip", "r_hip", "l_knee", "r_knee")

#: five asymmetric base poses reused across subjects (FAUST-style shared poses)
POSE_TEMPLATES = np.array([
    [0.06, 0.03, -0.35, 0.30, -0.15, 0.25, 0.10, -0.12, -0.12, -0.04],
    [-0.10, 0.08, -2.20, 0.35, -0.30, 0.45, 0.45, -0.35, -0.25, -0.70],
    [0.12, -0.06, -1.50, 1.60, 0.25, -0.30, -0.50, 0.55, -0.90, -0.10],
    [0.05, 0.35, -0.70, 0.50, -0.80, 0.70, 0.90, 0.80, -1.10, -1.00],
    [-0.15, 0.12, -0.90, 2.30, -0.50, 0.20, 0.70, -0.60, -0.35, -1.15],
])


def _rot(axis: str, theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _skeleton(prop: dict):
    """Rest-pose capsule segments and joint pivots for one subject.

    Returns (segments, joints): segments maps label -> (a, b, radius, chain),
    capsule endpoints a, b in rest coordinates; joints maps joint name ->
    (pivot, axis, pose index).  The figure is built bottom-up so the ten
    labelled limb segments articulate about their anatomical pivots.  A fixed
    left/right asymmetry (arm girth, leg girth, hand/foot size) is baked in so
    that bilateral symmetry is resolvable from intrinsic geometry alone.
    """
    g = prop["height"]
    leg = 1.0 * g * prop["leg"]
    arm = 1.0 * g * prop["arm"]
    torso = 1.0 * g * prop["torso"]
    girth = prop["girth"]
    shw = prop["shoulder_w"] * g
    head = prop["head"] * g

    ankle_z = 0.05 * leg
    knee_z = ankle_z + 0.40 * leg
    hip_z = knee_z + 0.42 * leg
    hip_x = 0.10 * shw
    abd_top = hip_z + 0.22 * torso
    tho_top = abd_top + 0.30 * torso
    sho_z = tho_top - 0.02 * torso
    sho_x = 0.19 * shw
    head_base = tho_top + 0.035 * torso

    up_arm, lo_arm, hand_l = 0.28 * arm, 0.25 * arm, 0.15 * arm
    # systematic bilateral asymmetry: left arm and right leg are beefier
    asym_arm = {"l": 1.18, "r": 1.0}
    asym_leg = {"l": 1.0, "r": 1.12}
    asym_hand = {"l": 1.12, "r": 1.0}
    asym_foot = {"l": 1.0, "r": 1.18}

    segments = {}
    joints = {}
    # torso stack and head
    segments["abdomen"] = (np.array([0, 0, hip_z]), np.array([0, 0, abd_top]),
                           0.115 * girth, ())
    segments["thorax"] = (np.array([0, 0, abd_top]), np.array([0, 0, tho_top]),
                          0.130 * girth, ("spine",))
    segments["head"] = (np.array([0, 0, head_base]),
                        np.array([0, 0, head_base + 0.16 * head]),
                        0.085 * head, ("spine", "neck"))
    joints["spine"] = (np.array([0, 0, abd_top]), "x", 1)
    joints["neck"] = (np.array([0, 0, tho_top]), "x", 0)

    for side, sx, jix in (("left", 1.0, 0), ("right", -1.0, 1)):
        s = side[0]
        sho = np.array([sx * sho_x, 0, sho_z])
        elb = sho + np.array([0, 0, -up_arm])
        wri = elb + np.array([0, 0, -lo_arm])
        ra = asym_arm[s]
        segments[f"{side} upper arm"] = (sho, elb, 0.042 * girth * ra,
                                         ("spine", f"{s}_shoulder"))
        segments[f"{side} lower arm"] = (elb, wri, 0.034 * girth * ra,
                                         ("spine", f"{s}_shoulder", f"{s}_elbow"))
        segments[f"{side} hand"] = (wri, wri + np.array([0, 0, -hand_l * asym_hand[s]]),
                                    0.030 * girth * asym_hand[s],
                                    ("spine", f"{s}_shoulder", f"{s}_elbow"))
        joints[f"{s}_shoulder"] = (sho, "y", 2 + jix)
        joints[f"{s}_elbow"] = (elb, "y", 4 + jix)

        hip = np.array([sx * hip_x, 0, hip_z])
        kne = np.array([sx * hip_x, 0, knee_z])
        ank = np.array([sx * hip_x, 0, ankle_z])
        rl = asym_leg[s]
        segments[f"{side} upper leg"] = (hip, kne, 0.065 * girth * rl, (f"{s}_hip",))
        segments[f"{side} lower leg"] = (kne, ank, 0.048 * girth * rl,
                                         (f"{s}_hip", f"{s}_knee"))
        segments[f"{side} foot"] = (ank, ank + np.array([0, 0.16 * leg * asym_foot[s], 0]),
                                    0.034 * girth, (f"{s}_hip", f"{s}_knee"))
        joints[f"{s}_hip"] = (hip, "x", 6 + jix)
        joints[f"{s}_knee"] = (kne, "x", 8 + jix)
    return segments, joints


_GOLDEN = np.pi * (3.0 - np.sqrt(5.0))      # golden-angle increment


def _canonical_pattern(seed: int, n_points: int):
    """Seed-determined surface-sampling pattern, shared by all poses/subjects.

    Points are placed quasi-uniformly (golden-angle lattices with a small
    seeded jitter) on each capsule, mirroring the near-regular vertex spacing
    of registered scan data; i.i.d. sampling would make local density a
    dominant, non-geometric feature channel.  Each point gets a part, a
    placement slot (lateral or one of the caps), lattice coordinates and a
    radial jitter.  Realisation on a morphed skeleton reuses the same
    pattern, which is what makes equal sample index mean "same anatomical
    spot" across the dataset.
    """
    rng = np.random.default_rng(seed)
    base_prop = {k: 1.0 for k in PROPORTION_KEYS}
    segments, _ = _skeleton(base_prop)
    names = [BODY_PART_NAMES[i] for i in range(N_BODY_PARTS)]
    areas, lat_fracs = [], []
    for name in names:
        a, b, r, _ = segments[name]
        length = np.linalg.norm(b - a)
        areas.append(2 * np.pi * r * length + 4 * np.pi * r * r)
        lat_fracs.append(length / (length + 2 * r))
    areas = np.asarray(areas)
    quota = areas / areas.sum() * n_points
    counts = np.floor(quota).astype(int)
    counts = np.maximum(counts, 1)
    while counts.sum() > n_points:
        counts[np.argmax(counts)] -= 1
    frac = quota - np.floor(quota)
    for i in np.argsort(-frac):
        if counts.sum() >= n_points:
            break
        counts[i] += 1
    while counts.sum() < n_points:
        counts[np.argmin(counts / quota)] += 1

    part = np.repeat(np.arange(1, N_BODY_PARTS + 1), counts)
    slot = np.empty(n_points, dtype=np.int64)     # 0 lateral, 1 cap@a, 2 cap@b
    u = np.zeros(n_points)                        # axial fraction (lateral)
    phi = np.zeros(n_points)                      # angle (lateral)
    cap_dir = np.zeros((n_points, 3))             # local frame (e1, e2, axis)
    start = 0
    for pi, c in enumerate(counts):
        sl = slice(start, start + c)
        start += c
        n_lat = int(round(c * lat_fracs[pi]))
        n_cap = c - n_lat
        n_a = n_cap // 2
        s = np.zeros(c, dtype=np.int64)
        s[n_lat:n_lat + n_a] = 1
        s[n_lat + n_a:] = 2
        slot[sl] = s
        if n_lat:
            i = np.arange(n_lat)
            uu = (i + 0.5) / n_lat + rng.normal(0, 0.15 / max(n_lat, 1), n_lat)
            ph = (_GOLDEN * i + rng.uniform(0, 2 * np.pi)
                  + rng.normal(0, 0.15, n_lat)) % (2 * np.pi)
            u[sl.start:sl.start + n_lat] = np.clip(uu, 0.0, 1.0)
            phi[sl.start:sl.start + n_lat] = ph
        for cap_slot, n_c in ((1, n_a), (2, n_cap - n_a)):
            if not n_c:
                continue
            j = np.arange(n_c)
            dz = np.clip((j + 0.5) / n_c + rng.normal(0, 0.1 / max(n_c, 1), n_c),
                         1e-3, 1.0)
            rr = np.sqrt(np.maximum(0.0, 1.0 - dz * dz))
            ang = _GOLDEN * j + rng.uniform(0, 2 * np.pi) + rng.normal(0, 0.15, n_c)
            block = np.c_[rr * np.cos(ang), rr * np.sin(ang), dz]
            lo = sl.start + n_lat + (0 if cap_slot == 1 else n_a)
            cap_dir[lo:lo + n_c] = block
    jitter = np.clip(rng.normal(0.0, 0.003, n_points), -0.008, 0.008)
    return {"part": part, "slot": slot, "u": u, "phi": phi, "cap_dir": cap_dir,
            "jitter": jitter, "counts": counts}


def generate_synthetic_body(seed: int, n_points: int, pose,
                            proportions: dict | None = None) -> PointCloud:
    """Sample an articulated 15-part stick figure with known correspondences.

    ``pose`` is a 10-vector of joint angles (see JOINT_NAMES); ``proportions``
    optionally rescales the subject (see PROPORTION_KEYS).  Points keep their
    sample index as correspondence id, so clouds generated with the same seed
    and point count are index-aligned regardless of pose and proportions.
    """
    if n_points < 100:
        raise ValueError("n_points must be >= 100")
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (10,):
        raise ValueError("pose must have 10 joint angles")
    prop = {k: 1.0 for k in PROPORTION_KEYS}
    if proportions:
        unknown = set(proportions) - set(PROPORTION_KEYS)
        if unknown:
            raise ValueError(f"unknown proportion keys {sorted(unknown)}")
        prop.update(proportions)

    pat = _canonical_pattern(seed, n_points)
    segments, joints = _skeleton(prop)

    # forward kinematics: affine map per joint chain, root to leaf
    chain_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {(): (np.eye(3), np.zeros(3))}

    def chain_transform(chain: tuple) -> tuple[np.ndarray, np.ndarray]:
        if chain in chain_cache:
            return chain_cache[chain]
        R_par, t_par = chain_transform(chain[:-1])
        pivot, axis, idx = joints[chain[-1]]
        R_j = _rot(axis, pose[idx])
        # rotate about the rest-pose pivot, then apply the parent transform
        R = R_par @ R_j
        t = R_par @ (pivot - R_j @ pivot) + t_par
        chain_cache[chain] = (R, t)
        return R, t

    coords = np.empty((n_points, 3))
    start = 0
    for li, count in enumerate(pat["counts"], start=1):
        name = BODY_PART_NAMES[li - 1]
        a, b, r, chain = segments[name]
        sl = slice(start, start + count)
        start += count
        axis = b - a
        length = np.linalg.norm(axis)
        ez = axis / length
        helper = np.array([1.0, 0, 0]) if abs(ez[0]) < 0.9 else np.array([0, 1.0, 0])
        e1 = np.cross(ez, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(ez, e1)

        rr = r + pat["jitter"][sl]
        slot = pat["slot"][sl]
        local = np.empty((count, 3))
        lat = slot == 0
        if lat.any():
            uu = pat["u"][sl][lat]
            ph = pat["phi"][sl][lat]
            ring = np.outer(np.cos(ph), e1) + np.outer(np.sin(ph), e2)
            local[lat] = a + np.outer(uu, axis) + ring * rr[lat, None]
        for cap_slot, center, sign in ((1, a, -1.0), (2, b, 1.0)):
            m = slot == cap_slot
            if not m.any():
                continue
            d = pat["cap_dir"][sl][m]
            dirs = (np.outer(d[:, 0], e1) + np.outer(d[:, 1], e2)
                    + np.outer(sign * d[:, 2], ez))
            local[m] = center + dirs * rr[m, None]
        R, t = chain_transform(chain)
        coords[sl] = local @ R.T + t

    return PointCloud(coords, labels=pat["part"].copy(),
                      corr=np.arange(n_points, dtype=np.int64))


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------

def add_gaussian_noise(cloud: PointCloud, std: float, seed: int) -> PointCloud:
    """I.i.d. per-coordinate Gaussian noise; labels and corr pass through."""
    if std < 0:
        raise ValueError("std must be >= 0")
    if std == 0:
        return replace(cloud, coords=cloud.coords.copy())
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, std, cloud.coords.shape)
    return replace(cloud, coords=cloud.coords + eps)


def remove_points(cloud: PointCloud, ratio: float, seed: int) -> PointCloud:
    """Keep a uniform subset of round(n*(1-ratio)) points (original order)."""
    if not 0 <= ratio < 1:
        raise ValueError("ratio must be in [0, 1)")
    keep = int(np.rint(cloud.n * (1.0 - ratio)))
    if keep < 1:
        raise ValueError("removal would leave an empty cloud")
    if keep == cloud.n:
        return replace(cloud, coords=cloud.coords.copy())
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(cloud.n, size=keep, replace=False))
    return PointCloud(
        cloud.coords[idx],
        features=None if cloud.features is None else cloud.features[idx],
        labels=None if cloud.labels is None else cloud.labels[idx],
        corr=None if cloud.corr is None else cloud.corr[idx],
    )


def add_outliers(cloud: PointCloud, ratio: float, seed: int) -> PointCloud:
    """Append round(n*ratio) bounding-box points labelled background (corr -1)."""
    if ratio < 0:
        raise ValueError("ratio must be >= 0")
    extra = int(np.rint(cloud.n * ratio))
    if extra == 0:
        return replace(cloud, coords=cloud.coords.copy())
    rng = np.random.default_rng(seed)
    lo = cloud.coords.min(axis=0)
    hi = cloud.coords.max(axis=0)
    pts = lo + rng.random((extra, 3)) * (hi - lo)
    labels = None
    if cloud.labels is not None:
        labels = np.concatenate([cloud.labels, np.zeros(extra, dtype=np.int64)])
    corr = None
    if cloud.corr is not None:
        corr = np.concatenate([cloud.corr, np.full(extra, -1, dtype=np.int64)])
    feats = None
    if cloud.features is not None:
        feats = np.vstack([cloud.features, np.zeros((extra, cloud.features.shape[1]))])
    return PointCloud(np.vstack([cloud.coords, pts]), features=feats,
                      labels=labels, corr=corr)


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class ShapeEntry:
    cloud_path: str
    label_path: str | None
    subject: int
    pose: int


@dataclass
class DatasetManifest:
    shapes: list[ShapeEntry]
    split: list[str]                 # per-shape: "train" | "val" | "test"
    n_classes: int
    units_scale: float = 1.0
    root: str = "."

    def __post_init__(self):
        if len(self.split) != len(self.shapes):
            raise ValueError("split length mismatch")
        bad = set(self.split) - {"train", "val", "test"}
        if bad:
            raise ValueError(f"bad split values {sorted(bad)}")

    def indices(self, part: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == part]

    def load_shape(self, i: int) -> PointCloud:
        path = Path(self.root) / self.shapes[i].cloud_path
        fmt = {"xyz": "xyz-ascii", "ply": "ply-ascii", "mkpc": "bin-f32"}[path.suffix.lstrip(".")]
        return load_cloud(path, fmt)


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "n_classes": manifest.n_classes,
        "units_scale": manifest.units_scale,
        "shapes": [
            {"cloud": e.cloud_path, "labels": e.label_path,
             "subject": e.subject, "pose": e.pose, "split": s}
            for e, s in zip(manifest.shapes, manifest.split)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    shapes = [ShapeEntry(d["cloud"], d.get("labels"), d["subject"], d["pose"])
              for d in doc["shapes"]]
    split = [d["split"] for d in doc["shapes"]]
    return DatasetManifest(shapes, split, doc["n_classes"],
                           doc.get("units_scale", 1.0), root=str(path.parent))


def synthesize_dataset(out_dir, n_shapes: int, n_points: int, seed: int,
                       poses_per_subject: int = 5,
                       outlier_ratio: float = 0.0) -> DatasetManifest:
    """Write a synthetic multi-subject dataset plus manifest.json.

    Subjects get seeded proportions; the pose templates are shared across
    subjects (with small per-shape angle jitter) and the sampling pattern is
    shared by every shape, so correspondence ids align dataset-wide.  Splits
    are assigned per subject at a 70/10/20 ratio.  ``outlier_ratio`` > 0 adds
    background-labelled box outliers to every shape (for 16-class training).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_subjects = int(np.ceil(n_shapes / poses_per_subject))
    n_train = max(1, int(np.rint(0.7 * n_subjects)))
    n_val = max(1, int(np.rint(0.1 * n_subjects)))
    if n_train + n_val >= n_subjects:
        n_train = max(1, n_subjects - n_val - 1)
    rng = np.random.default_rng([seed, 0xD5])
    entries, split = [], []
    shape_id = 0
    for subj in range(n_subjects):
        srng = np.random.default_rng([seed, 1, subj])
        prop = {
            "height": srng.uniform(0.93, 1.07),
            "leg": srng.uniform(0.95, 1.05),
            "arm": srng.uniform(0.95, 1.05),
            "torso": srng.uniform(0.95, 1.05),
            "girth": srng.uniform(0.92, 1.08),
            "shoulder_w": srng.uniform(0.93, 1.07),
            "head": srng.uniform(0.93, 1.07),
        }
        part = "train" if subj < n_train else ("val" if subj < n_train + n_val else "test")
        for pose_id in range(poses_per_subject):
            if shape_id >= n_shapes:
                break
            jrng = np.random.default_rng([seed, 2, subj, pose_id])
            angles = POSE_TEMPLATES[pose_id % len(POSE_TEMPLATES)] + jrng.normal(0, 0.06, 10)
            cloud = generate_synthetic_body(seed, n_points, angles, prop)
            if outlier_ratio > 0:
                cloud = add_outliers(cloud, outlier_ratio,
                                     int(rng.integers(0, 2**31)))
            name = f"subj{subj:02d}_pose{pose_id:02d}.mkpc"
            save_cloud(cloud, out_dir / name, "bin-f32")
            entries.append(ShapeEntry(name, name.replace(".mkpc", ".labels"),
                                      subj, pose_id))
            split.append(part)
            shape_id += 1
    n_classes = 16 if outlier_ratio > 0 else 15
    manifest = DatasetManifest(entries, split, n_classes, root=str(out_dir))
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
