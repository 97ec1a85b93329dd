"""File formats, dataset manifests, synthetic images and scribble synthesis.

Formats:
  .f32r image:  ASCII line "F32R <w> <h>\\n" + w*h little-endian float32, row-major.
  label map:    binary PGM (P5, maxval 255); 255 is reserved for UNKNOWN.
  manifest:     CSV lines "id,split,image_path,mask_path,scribble_path,L".
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataError
from .util import UNKNOWN, derive_rng

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- formats

def save_image(path, image):
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise DataError(f"image must be 2-d, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"F32R {w} {h}\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def load_image(path):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: no header line (missing newline in first {len(raw)} bytes)")
    parts = raw[:nl].split()
    if len(parts) != 3 or parts[0] != b"F32R":
        raise DataError(f"{path}: bad magic/header at byte 0: {raw[:nl]!r}")
    try:
        w, h = int(parts[1]), int(parts[2])
    except ValueError:
        raise DataError(f"{path}: non-integer dimensions in header") from None
    expected = nl + 1 + 4 * w * h
    if len(raw) != expected:
        raise DataError(f"{path}: size {len(raw)} bytes, expected {expected} (truncated at byte {len(raw)})")
    img = np.frombuffer(raw, dtype="<f4", offset=nl + 1).reshape(h, w).copy()
    if not np.isfinite(img).all():
        raise DataError(f"{path}: non-finite intensities")
    lo, hi = float(img.min()), float(img.max())
    if lo < 0.0 or hi > 1.0:
        # load-time normalization to the canonical [0, 1] range
        img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return img


def peek_image_dims(path):
    with open(path, "rb") as f:
        header = f.readline(64)
    parts = header.split()
    if len(parts) != 3 or parts[0] != b"F32R":
        raise DataError(f"{path}: bad image header")
    return int(parts[2]), int(parts[1])


def save_labelmap(path, labels):
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise DataError(f"label map must be 2-d, got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def _pgm_tokens(raw, count):
    """First `count` whitespace-separated header tokens (PGM comments skipped);
    returns (tokens, offset of the byte following the final token's delimiter)."""
    tokens, pos, n = [], 0, len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"truncated PGM header at byte {pos}")
        tokens.append(raw[start:pos])
        pos += 1  # single whitespace delimiter after the token
    return tokens, pos


def load_labelmap(path):
    raw = Path(path).read_bytes()
    try:
        (magic, ws, hs, maxval), offset = _pgm_tokens(raw, 4)
    except DataError as e:
        raise DataError(f"{path}: {e}") from None
    if magic != b"P5":
        raise DataError(f"{path}: bad PGM magic at byte 0: {magic!r}")
    try:
        w, h, mv = int(ws), int(hs), int(maxval)
    except ValueError:
        raise DataError(f"{path}: non-integer PGM header fields") from None
    if mv != 255:
        raise DataError(f"{path}: PGM maxval must be 255, got {mv}")
    if len(raw) - offset != w * h:
        raise DataError(f"{path}: {len(raw) - offset} label bytes, expected {w * h} (offset {offset})")
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(h, w).copy()


def peek_labelmap_dims(path):
    with open(path, "rb") as f:
        raw = f.read(256)
    (magic, ws, hs, _), _ = _pgm_tokens(raw, 4)
    if magic != b"P5":
        raise DataError(f"{path}: bad PGM magic")
    return int(hs), int(ws)


# ---------------------------------------------------------------- dataset

@dataclass
class Record:
    id: str
    split: str
    image_path: str
    mask_path: str | None
    scribble_path: str | None


@dataclass
class Dataset:
    root: Path
    num_labels: int
    records: list

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def _check_labels(self, arr, path):
        bad = (arr != UNKNOWN) & (arr >= self.num_labels)
        if bad.any():
            raise DataError(f"{path}: label {int(arr[bad][0])} out of range for L={self.num_labels}")
        return arr

    def image(self, rec):
        return load_image(self.root / rec.image_path)

    def mask(self, rec):
        if rec.mask_path is None:
            raise DataError(f"record {rec.id} has no mask")
        return self._check_labels(load_labelmap(self.root / rec.mask_path), rec.mask_path)

    def scribbles(self, rec):
        if rec.scribble_path is None:
            raise DataError(f"record {rec.id} has no scribbles")
        return self._check_labels(load_labelmap(self.root / rec.scribble_path), rec.scribble_path)


def save_manifest(path, dataset):
    lines = []
    for r in dataset.records:
        lines.append(",".join([
            r.id, r.split, r.image_path, r.mask_path or "", r.scribble_path or "",
            str(dataset.num_labels),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(manifest_path, validate=True):
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records, ids, num_labels = [], set(), None
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise DataError(f"{manifest_path}:{lineno}: expected 6 fields, got {len(parts)}")
        rid, split, image_path, mask_path, scribble_path, lstr = [p.strip() for p in parts]
        if rid in ids:
            raise DataError(f"{manifest_path}:{lineno}: duplicate id {rid!r}")
        ids.add(rid)
        if split not in ("train", "val", "test"):
            raise DataError(f"{manifest_path}:{lineno}: unknown split {split!r}")
        try:
            l_val = int(lstr)
        except ValueError:
            raise DataError(f"{manifest_path}:{lineno}: bad label count {lstr!r}") from None
        if num_labels is None:
            num_labels = l_val
        elif num_labels != l_val:
            raise DataError(f"{manifest_path}:{lineno}: inconsistent label count {l_val} vs {num_labels}")
        records.append(Record(rid, split, image_path, mask_path or None, scribble_path or None))
    if not records:
        raise DataError(f"{manifest_path}: empty manifest")
    ds = Dataset(root=root, num_labels=num_labels, records=records)
    if validate:
        validate_dataset(ds)
    return ds


def validate_dataset(ds):
    """Cross-check every referenced file's dimensions and split requirements."""
    for r in ds.records:
        if r.split == "train" and r.scribble_path is None:
            raise DataError(f"record {r.id}: train records require scribbles")
        if r.split in ("val", "test") and r.mask_path is None:
            raise DataError(f"record {r.id}: {r.split} records require a full mask")
        dims = peek_image_dims(ds.root / r.image_path)
        for path in (r.mask_path, r.scribble_path):
            if path is None:
                continue
            ldims = peek_labelmap_dims(ds.root / path)
            if ldims != dims:
                raise DataError(f"record {r.id}: {path} dims {ldims} do not match image dims {dims}")


# ------------------------------------------------------- synthetic images

def _ellipse_mask(size, cy, cx, ry, rx, phi):
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = -dx * np.sin(phi) + dy * np.cos(phi)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def synth_sample(size, rng, noise_sigma):
    """One ring/disk image: label 2 disk nested in a label 1 ring on background."""
    cy = size * rng.uniform(0.40, 0.60)
    cx = size * rng.uniform(0.40, 0.60)
    ry = size * rng.uniform(0.20, 0.30)
    rx = size * rng.uniform(0.20, 0.30)
    phi = rng.uniform(0.0, np.pi)
    inner = rng.uniform(0.45, 0.60)
    outer_m = _ellipse_mask(size, cy, cx, ry, rx, phi)
    inner_m = _ellipse_mask(size, cy, cx, ry * inner, rx * inner, phi)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[outer_m] = 1
    mask[inner_m] = 2

    means = np.array([0.25, 0.55, 0.85]) + rng.uniform(-0.04, 0.04, size=3)
    img = means[mask]
    # smooth per-image intensity gradient
    gdir = rng.uniform(0.0, 2 * np.pi)
    amp = rng.uniform(0.05, 0.12)
    yy, xx = np.mgrid[0:size, 0:size]
    ramp = (np.cos(gdir) * xx + np.sin(gdir) * yy) / size
    img = img + amp * (ramp - ramp.mean())
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return mask, np.clip(img, 0.0, 1.0).astype(np.float32)


def _bfs_farthest(inside, start):
    """(farthest pixel, predecessor map) by 4-connected BFS within `inside`."""
    h, w = inside.shape
    prev = {start: None}
    q = deque([start])
    last = start
    while q:
        y, x = q.popleft()
        last = (y, x)
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and inside[ny, nx] and (ny, nx) not in prev:
                prev[(ny, nx)] = (y, x)
                q.append((ny, nx))
    return last, prev


def synth_scribbles(mask, stroke_width=1, min_len=6, seed=0):
    """Noise-free scribbles: one connected stroke per label, traced inside the
    radius-2 erosion of the label's region (single-pixel fallback for thin
    regions). Returns a label map that is UNKNOWN off-stroke."""
    mask = np.asarray(mask, dtype=np.uint8)
    out = np.full(mask.shape, UNKNOWN, dtype=np.uint8)
    rng = derive_rng(seed, "scribbles")
    disk2 = ndimage.generate_binary_structure(2, 1)
    for label in np.unique(mask):
        region = mask == label
        eroded = ndimage.binary_erosion(region, disk2, iterations=2)
        if not eroded.any():
            eroded = ndimage.binary_erosion(region, disk2)
        if not eroded.any():
            ys, xs = np.nonzero(region)
            pick = rng.integers(len(ys))
            out[ys[pick], xs[pick]] = label
            log.warning("label %d region too thin to erode; single-pixel scribble", label)
            continue
        ys, xs = np.nonzero(eroded)
        pick = rng.integers(len(ys))
        # double BFS: the path between the two farthest pixels of the component
        u, _ = _bfs_farthest(eroded, (int(ys[pick]), int(xs[pick])))
        v, prev = _bfs_farthest(eroded, u)
        path = []
        node = v
        while node is not None:
            path.append(node)
            node = prev[node]
        target = min(len(path), max(min_len, len(path) // 3))
        start = int(rng.integers(0, len(path) - target + 1))
        stroke = np.zeros(mask.shape, dtype=bool)
        for y, x in path[start : start + target]:
            stroke[y, x] = True
        if stroke_width > 1:
            stroke = ndimage.binary_dilation(stroke, disk2, iterations=stroke_width - 1)
            stroke &= eroded
        out[stroke] = label
    return out


def synth_dataset(out_dir, n_train, n_val, n_test, size=64, num_labels=3,
                  noise_sigma=0.08, seed=0):
    """Generate a nested ring/disk dataset on disk and return its Dataset.

    Full ground-truth masks and scribbles are written for every split;
    deterministic for a fixed seed.
    """
    if num_labels != 3:
        raise ConfigurationError("synthetic generator produces exactly 3 labels")
    if size % 8 != 0 or size < 8:
        raise ConfigurationError("size must be a positive multiple of 8")
    out_dir = Path(out_dir)
    for sub in ("images", "masks", "scribbles"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        for i in range(count):
            rid = f"{split}{i:04d}"
            rng = derive_rng(seed, "synth", split, i)
            mask, img = synth_sample(size, rng, noise_sigma)
            scribbles = synth_scribbles(mask, seed=derive_rng(seed, "scrib-seed", split, i).integers(2**63))
            save_image(out_dir / "images" / f"{rid}.f32r", img)
            save_labelmap(out_dir / "masks" / f"{rid}.pgm", mask)
            save_labelmap(out_dir / "scribbles" / f"{rid}.pgm", scribbles)
            records.append(Record(rid, split, f"images/{rid}.f32r",
                                  f"masks/{rid}.pgm", f"scribbles/{rid}.pgm"))
    ds = Dataset(root=out_dir, num_labels=num_labels, records=records)
    save_manifest(out_dir / "manifest.csv", ds)
    return ds
