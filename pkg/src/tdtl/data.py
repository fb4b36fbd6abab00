"""Sample manifests, feature/landmark/PGM files and the synthetic benchmark.

Every CSV may start with ``#`` comment lines. The first comment carries the
class table, ``# classes=4 names=NE|DI|SM|SU``, so an empty file still knows
its class count. Unknown labels are written as ``-1``.
"""
import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .nn import make_rng

DOMAINS = ("source", "target")
MANIFEST_HEADER = ["id", "path", "label", "domain", "view"]
FEATURE_HEADER = ["id", "label", "domain", "view"]
LANDMARK_HEADER = ["image_id", "idx", "x", "y"]
N_LANDMARKS = 68


class DataFormatError(ValueError):
    """A data file is malformed; the message carries the line number."""


@dataclass
class SampleRecord:
    id: str
    label: int = -1
    domain: str = "source"
    view: int = 0
    path: str = ""


@dataclass
class Manifest:
    records: List[SampleRecord]
    n_classes: int
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = [f"class{k}" for k in range(self.n_classes)]
        if len(self.class_names) != self.n_classes:
            raise DataFormatError("class name count does not match class count")
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DataFormatError(f"duplicate sample id {r.id!r}")
            seen.add(r.id)
            if not -1 <= r.label < self.n_classes:
                raise DataFormatError(f"sample {r.id!r}: label {r.label} outside [-1, {self.n_classes})")
            if r.domain not in DOMAINS:
                raise DataFormatError(f"sample {r.id!r}: unknown domain {r.domain!r}")
            if r.domain == "source" and r.label < 0:
                raise DataFormatError(f"source sample {r.id!r} has no label")

    def __len__(self):
        return len(self.records)

    @property
    def ids(self):
        return [r.id for r in self.records]

    @property
    def labels(self):
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def views(self):
        return np.array([r.view for r in self.records], dtype=np.int64)

    @property
    def has_labels(self):
        return bool(self.records) and all(r.label >= 0 for r in self.records)


# ---------------------------------------------------------------------------
# CSV plumbing


def _class_comment(n_classes, names):
    return f"# classes={n_classes} names={'|'.join(names)}\n"


def _read_table(path, header):
    """Return (n_classes, class_names, rows as (line_no, list)) of a commented CSV."""
    text = Path(path).read_text(encoding="utf-8")
    n_classes, names = None, []
    lines = text.splitlines(keepends=True)
    start = 0
    while start < len(lines) and lines[start].startswith("#"):
        meta = dict(tok.split("=", 1) for tok in lines[start][1:].split() if "=" in tok)
        if "classes" in meta:
            try:
                n_classes = int(meta["classes"])
            except ValueError:
                raise DataFormatError(f"{path}:{start + 1}: bad class count") from None
            names = meta["names"].split("|") if meta.get("names") else []
        start += 1
    reader = csv.reader(io.StringIO("".join(lines[start:])))
    rows = []
    got_header = None
    for offset, row in enumerate(reader):
        line_no = start + offset + 1
        if got_header is None:
            got_header = row
            if row[:len(header)] != header:
                raise DataFormatError(f"{path}:{line_no}: expected header starting {','.join(header)}")
            continue
        if not row:
            continue
        rows.append((line_no, row))
    if got_header is None:
        raise DataFormatError(f"{path}: missing header")
    if n_classes is None:
        raise DataFormatError(f"{path}: missing '# classes=' comment")
    return n_classes, names, got_header, rows


def _int(value, path, line_no, what):
    try:
        return int(value)
    except ValueError:
        raise DataFormatError(f"{path}:{line_no}: {what} {value!r} is not an integer") from None


def save_manifest(path, manifest):
    buf = io.StringIO()
    buf.write(_class_comment(manifest.n_classes, manifest.class_names))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in manifest.records:
        w.writerow([r.id, r.path, r.label, r.domain, r.view])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_manifest(path):
    n_classes, names, _, rows = _read_table(path, MANIFEST_HEADER)
    records = []
    for line_no, row in rows:
        if len(row) != len(MANIFEST_HEADER):
            raise DataFormatError(f"{path}:{line_no}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        records.append(SampleRecord(id=row[0], path=row[1],
                                    label=_int(row[2], path, line_no, "label"),
                                    domain=row[3], view=_int(row[4], path, line_no, "view")))
    try:
        return Manifest(records, n_classes, names)
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def save_feature_csv(path, x, manifest):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != len(manifest):
        raise DataFormatError("feature rows and manifest records differ in number")
    buf = io.StringIO()
    buf.write(_class_comment(manifest.n_classes, manifest.class_names))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FEATURE_HEADER + [f"f{j}" for j in range(x.shape[1] if x.ndim == 2 else 0)])
    for r, row in zip(manifest.records, x):
        w.writerow([r.id, r.label, r.domain, r.view] + [repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_feature_csv(path):
    n_classes, names, header, rows = _read_table(path, FEATURE_HEADER)
    dim = len(header) - len(FEATURE_HEADER)
    records, values = [], []
    for line_no, row in rows:
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
        records.append(SampleRecord(id=row[0], label=_int(row[1], path, line_no, "label"),
                                    domain=row[2], view=_int(row[3], path, line_no, "view")))
        try:
            values.append([float(v) for v in row[4:]])
        except ValueError:
            raise DataFormatError(f"{path}:{line_no}: non-numeric feature value") from None
    x = np.array(values, dtype=np.float64).reshape(len(values), dim)
    if not np.all(np.isfinite(x)):
        raise DataFormatError(f"{path}: non-finite feature value")
    try:
        return x, Manifest(records, n_classes, names)
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def save_landmarks(path, landmarks):
    """``landmarks`` maps image id -> (68, 2) array of (x, y)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LANDMARK_HEADER)
    for image_id, pts in landmarks.items():
        for idx, (x, y) in enumerate(np.asarray(pts, dtype=np.float64)):
            w.writerow([image_id, idx, repr(float(x)), repr(float(y))])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_landmarks(path):
    reader = csv.reader(io.StringIO(Path(path).read_text(encoding="utf-8")))
    header = next(reader, None)
    if header != LANDMARK_HEADER:
        raise DataFormatError(f"{path}:1: expected header {','.join(LANDMARK_HEADER)}")
    points = {}
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise DataFormatError(f"{path}:{line_no}: expected 4 fields, got {len(row)}")
        idx = _int(row[1], path, line_no, "idx")
        try:
            xy = (float(row[2]), float(row[3]))
        except ValueError:
            raise DataFormatError(f"{path}:{line_no}: bad coordinate") from None
        if not 0 <= idx < N_LANDMARKS:
            raise DataFormatError(f"{path}:{line_no}: landmark index {idx} outside 0..67")
        points.setdefault(row[0], {})[idx] = xy
    out = {}
    for image_id, pts in points.items():
        if len(pts) != N_LANDMARKS:
            raise DataFormatError(f"{path}: image {image_id!r} has {len(pts)} landmarks, expected 68")
        out[image_id] = np.array([pts[i] for i in range(N_LANDMARKS)], dtype=np.float64)
    return out


# ---------------------------------------------------------------------------
# PGM (binary P5, 8-bit)


def write_pgm(path, img):
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("PGM images must be 2-D uint8 arrays")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path):
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise DataFormatError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataFormatError(f"{path}: only 8-bit PGM supported")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# synthetic multi-view, two-domain data


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic benchmark.

    Class means sit on a circle in a random 2-plane of ``dim`` dimensions.
    Source views are ``0..views_per_domain-1``, target views continue the
    numbering, and view ``v`` rotates the circle by ``v * rotation_step``
    degrees. The target additionally moves by ``shift`` along a fixed in-plane
    direction (``shift_angle`` degrees) and its noise is scaled by
    ``target_noise_scale``. ``class_weights`` scales per-class counts relative
    to ``samples_per_cell`` (largest weight -> full count).
    """
    n_classes: int = 4
    views_per_domain: int = 2
    samples_per_cell: int = 25
    mode: str = "feature"
    dim: int = 16
    radius: float = 4.0
    shift: float = 4.0
    shift_angle: float = 45.0
    rotation_step: float = 20.0
    noise_std: float = 0.3
    target_noise_scale: float = 1.0
    class_weights: Optional[Tuple[float, ...]] = None
    image_size: int = 32
    brightness_offset: float = 40.0
    shear_step: float = 0.15
    seed: int = 42

    def __post_init__(self):
        if min(self.n_classes, self.views_per_domain, self.samples_per_cell, self.dim) < 1:
            raise ValueError("synthetic counts must be >= 1")
        if self.noise_std < 0 or self.target_noise_scale < 0:
            raise ValueError("noise must be non-negative")
        if self.mode not in ("feature", "image"):
            raise ValueError(f"unknown synthetic mode {self.mode!r}")
        if self.mode == "feature" and self.dim < 2:
            raise ValueError("feature mode needs dim >= 2")
        if self.class_weights is not None and len(self.class_weights) != self.n_classes:
            raise ValueError("one class weight per class")

    def counts(self):
        if self.class_weights is None:
            return [self.samples_per_cell] * self.n_classes
        top = max(self.class_weights)
        return [max(1, int(round(self.samples_per_cell * w / top))) for w in self.class_weights]


@dataclass
class Dataset:
    manifest: Manifest
    x: np.ndarray  # (N, D) features or (N, H, W) uint8 images

    @property
    def labels(self):
        return self.manifest.labels


EXPRESSION_NAMES = ("NE", "DI", "SM", "SU")


def _class_names(c):
    return list(EXPRESSION_NAMES) if c == len(EXPRESSION_NAMES) else [f"class{k}" for k in range(c)]


def _plane(cfg, rng):
    q, _ = np.linalg.qr(rng.normal(size=(cfg.dim, 2)))
    return q[:, 0], q[:, 1]


def _feature_domain(cfg, domain, rng, axes):
    u1, u2 = axes
    first_view = 0 if domain == "source" else cfg.views_per_domain
    noise = cfg.noise_std * (1.0 if domain == "source" else cfg.target_noise_scale)
    shift = np.zeros(cfg.dim)
    if domain == "target":
        phi = math.radians(cfg.shift_angle)
        shift = cfg.shift * (math.cos(phi) * u1 + math.sin(phi) * u2)
    rows, labels, views = [], [], []
    for v in range(first_view, first_view + cfg.views_per_domain):
        rot = math.radians(v * cfg.rotation_step)
        for k, n in enumerate(cfg.counts()):
            ang = 2.0 * math.pi * k / cfg.n_classes + rot
            mean = cfg.radius * (math.cos(ang) * u1 + math.sin(ang) * u2) + shift
            rows.append(mean + noise * rng.normal(size=(n, cfg.dim)))
            labels += [k] * n
            views += [v] * n
    return np.vstack(rows), labels, views


def _bar_image(cfg, k, view, domain, rng):
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cx = cy = (s - 1) / 2.0
    x = xx - cx
    y = yy - cy
    x = x + cfg.shear_step * view * y
    theta = math.pi * k / cfg.n_classes
    # distance to the line through the centre at angle theta
    dist = np.abs(-math.sin(theta) * x + math.cos(theta) * y)
    bar = np.exp(-0.5 * (dist / 1.5) ** 2)
    base = 60.0 + (cfg.brightness_offset if domain == "target" else 0.0)
    noise = cfg.noise_std * (1.0 if domain == "source" else cfg.target_noise_scale)
    img = base + 120.0 * bar + 10.0 * noise * rng.normal(size=(s, s))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _image_domain(cfg, domain, rng):
    first_view = 0 if domain == "source" else cfg.views_per_domain
    imgs, labels, views = [], [], []
    for v in range(first_view, first_view + cfg.views_per_domain):
        for k, n in enumerate(cfg.counts()):
            for _ in range(n):
                imgs.append(_bar_image(cfg, k, v, domain, rng))
                labels.append(k)
                views.append(v)
    return np.stack(imgs), labels, views


def generate_synthetic(cfg):
    """Return ``(source, target)`` :class:`Dataset` objects, deterministic in ``cfg.seed``."""
    rng = make_rng(cfg.seed)
    names = _class_names(cfg.n_classes)
    axes = _plane(cfg, rng) if cfg.mode == "feature" else None
    out = []
    for domain in DOMAINS:
        if cfg.mode == "feature":
            x, labels, views = _feature_domain(cfg, domain, rng, axes)
        else:
            x, labels, views = _image_domain(cfg, domain, rng)
        prefix = domain[0]
        records = [SampleRecord(id=f"{prefix}{i:05d}", label=lab, domain=domain, view=v)
                   for i, (lab, v) in enumerate(zip(labels, views))]
        out.append(Dataset(Manifest(records, cfg.n_classes, names), x))
    return out[0], out[1]


def synthetic_landmarks(size, n=N_LANDMARKS):
    """Fixed 68-point layout for synthetic images: two rings plus a centre column."""
    c = (size - 1) / 2.0
    pts = []
    for i in range(40):
        a = 2.0 * math.pi * i / 40
        pts.append((c + 0.42 * size * math.cos(a), c + 0.42 * size * math.sin(a)))
    for i in range(20):
        a = 2.0 * math.pi * i / 20
        pts.append((c + 0.22 * size * math.cos(a), c + 0.22 * size * math.sin(a)))
    for i in range(n - len(pts)):
        pts.append((c, c + (i - 3.5) * size / 12.0))
    return np.array(pts[:n], dtype=np.float64)


def with_labels_hidden(manifest):
    """Copy of a manifest with every label set to unknown (for target-side files)."""
    return Manifest([replace(r, label=-1) for r in manifest.records],
                    manifest.n_classes, list(manifest.class_names))
