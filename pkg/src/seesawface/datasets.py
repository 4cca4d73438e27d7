"""Image manifests, pair manifests and the synthetic identity dataset.

Identity manifest: one ``relative/path.png,label`` per line.
Pair manifest: one ``path_a,path_b,same`` per line with ``same`` in {0, 1}.
Paths are relative to the manifest's directory.  Blank lines and ``#``
comments are ignored; whitespace may replace the commas.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit HxWx3 image (PNG/JPEG via Pillow, or a ``.npy`` array)."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    if arr.dtype != np.uint8:
        raise ValueError(f"{path}: expected 8-bit pixels, got {arr.dtype}")
    return arr


def write_image(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path)


def _fields(line: str) -> list[str]:
    line = line.split("#", 1)[0].strip()
    if not line:
        return []
    return [f.strip() for f in (line.split(",") if "," in line else line.split())]


def read_identity_manifest(path: str | Path) -> tuple[list[Path], np.ndarray]:
    path = Path(path)
    files, labels = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        f = _fields(line)
        if not f:
            continue
        if len(f) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'path,label', got {line!r}")
        files.append(path.parent / f[0])
        labels.append(int(f[1]))
    return files, np.asarray(labels, dtype=np.int64)


def read_pair_manifest(path: str | Path) -> list[tuple[Path, Path, bool]]:
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        f = _fields(line)
        if not f:
            continue
        if len(f) != 3 or f[2] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected 'path_a,path_b,0|1', got {line!r}")
        pairs.append((path.parent / f[0], path.parent / f[1], f[2] == "1"))
    return pairs


def synthetic_identities(num_identities: int = 20, per_identity: int = 10, size: int = 28,
                         noise: float = 25.0, grid: int = 4, seed: int = 0):
    """Each identity is a fixed blocky colour pattern; samples add Gaussian pixel noise.

    Returns ``(images uint8 (N, size, size, 3), labels (N,))``.
    """
    if size % grid:
        raise ValueError(f"size {size} must be a multiple of grid {grid}")
    rng = np.random.default_rng(seed)
    cell = size // grid
    patterns = rng.uniform(0, 255, (num_identities, grid, grid, 3))
    base = np.kron(patterns, np.ones((1, cell, cell, 1)))
    images, labels = [], []
    for k in range(num_identities):
        for _ in range(per_identity):
            img = base[k] + rng.normal(0, noise, (size, size, 3))
            images.append(np.clip(np.round(img), 0, 255).astype(np.uint8))
            labels.append(k)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def write_identity_dataset(root: str | Path, images: np.ndarray, labels: np.ndarray) -> Path:
    """Save images as PNGs under ``root`` with a ``manifest.txt``; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        rel = f"images/{int(lab):03d}_{i:05d}.png"
        write_image(root / rel, img)
        lines.append(f"{rel},{int(lab)}")
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def make_pairs(labels: np.ndarray, num_pairs: int, seed: int = 0) -> list[tuple[int, int, bool]]:
    """Balanced same/different index pairs drawn from ``labels``."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    by_id = {k: np.flatnonzero(labels == k) for k in np.unique(labels)}
    ids = [k for k, v in by_id.items() if len(v) >= 2]
    if not ids or len(by_id) < 2:
        raise ValueError("need at least two identities, one with two or more images")
    pairs = []
    for i in range(num_pairs):
        if i % 2 == 0:
            k = ids[rng.integers(len(ids))]
            a, b = rng.choice(by_id[k], 2, replace=False)
            pairs.append((int(a), int(b), True))
        else:
            k1, k2 = rng.choice(list(by_id), 2, replace=False)
            pairs.append((int(rng.choice(by_id[k1])), int(rng.choice(by_id[k2])), False))
    return pairs


def write_pair_manifest(path: str | Path, files: list[Path], pairs) -> Path:
    path = Path(path)
    base = path.parent.resolve()
    lines = [
        f"{Path(files[a]).resolve().relative_to(base)},{Path(files[b]).resolve().relative_to(base)},{int(s)}"
        for a, b, s in pairs
    ]
    path.write_text("\n".join(lines) + "\n")
    return path
