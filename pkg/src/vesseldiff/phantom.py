"""Procedural two-modality vascular phantoms.

Domain A mimics a bright-background modality with dark vessels and smooth
illumination falloff; domain B a dark-background modality with bright
vessels, speckle, and horizontal banding. Both render the same vessel
geometry, so masks are identical across domains.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

__all__ = [
    "VesselTree",
    "PhantomSample",
    "DatasetManifest",
    "generate_tree",
    "render",
    "build_dataset",
    "write_pgm",
    "read_pgm",
]

# appearance constants; chosen so a source-only segmenter fails on B
A_BACKGROUND = 0.8
A_VESSEL = 0.25
A_NOISE_SIGMA = 0.03
B_BACKGROUND = 0.12
B_VESSEL = 0.85
B_SPECKLE_LO, B_SPECKLE_HI = 0.7, 1.3
B_BAND_AMPLITUDE = 0.05

FOREGROUND_MIN, FOREGROUND_MAX = 0.02, 0.30
MAX_DEPTH = 4
ROOT_WIDTH, TIP_WIDTH = 3.0, 1.0
ANGLE_JITTER = math.radians(35.0)


@dataclass
class VesselTree:
    """Line segments (start, end, width) produced by branching random walks."""

    segments: List[Tuple[Tuple[float, float], Tuple[float, float], float]]
    H: int
    W: int


@dataclass
class PhantomSample:
    image: np.ndarray   # H x W in [0, 1]
    mask: np.ndarray    # H x W binary {0, 1}
    domain: str         # "A" or "B"
    seed: int


@dataclass
class DatasetManifest:
    m_source: int
    n_target: int
    size: int
    seed: int
    out_dir: str
    sample_seeds: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)


def _derive_seed(global_seed: int, domain: str, index: int) -> int:
    msg = f"{global_seed}:{domain}:{index}".encode()
    return int.from_bytes(hashlib.sha256(msg).digest()[:8], "little")


def _width_at(depth: int) -> float:
    frac = min(depth, MAX_DEPTH - 1) / (MAX_DEPTH - 1)
    return ROOT_WIDTH + (TIP_WIDTH - ROOT_WIDTH) * frac


def _grow(rng: np.random.Generator, tree: VesselTree, pos: np.ndarray,
          angle: float, depth: int) -> None:
    if depth >= MAX_DEPTH:
        return
    h, w = tree.H, tree.W
    n_steps = int(rng.integers(4, 9))
    step_len = 0.14 * min(h, w) / (1 + 0.4 * depth)
    width = _width_at(depth)
    for _ in range(n_steps):
        angle += rng.uniform(-ANGLE_JITTER, ANGLE_JITTER)
        nxt = pos + step_len * np.array([math.cos(angle), math.sin(angle)])
        nxt = np.clip(nxt, 1.0, [h - 2.0, w - 2.0])
        tree.segments.append(((pos[0], pos[1]), (nxt[0], nxt[1]), width))
        pos = nxt
        if rng.random() < 0.25:
            sign = 1.0 if rng.random() < 0.5 else -1.0
            _grow(rng, tree, pos.copy(), angle + sign * rng.uniform(0.5, 1.1),
                  depth + 1)


def generate_tree(seed: int, H: int, W: int) -> VesselTree:
    """Deterministic branching random-walk vessel tree.

    Retries with a rehashed seed until the rasterized foreground fraction
    lands inside [0.02, 0.30].
    """
    if H < 16 or W < 16:
        raise ValueError(f"image size must be at least 16, got {H}x{W}")
    attempt_seed = seed
    for _ in range(64):
        rng = np.random.default_rng(attempt_seed)
        tree = VesselTree(segments=[], H=H, W=W)
        n_roots = int(rng.integers(1, 4))
        for _ in range(n_roots):
            edge = int(rng.integers(0, 4))
            u = rng.uniform(0.2, 0.8)
            if edge == 0:
                pos, angle = np.array([1.0, u * W]), 0.0
            elif edge == 1:
                pos, angle = np.array([H - 2.0, u * W]), math.pi
            elif edge == 2:
                pos, angle = np.array([u * H, 1.0]), math.pi / 2
            else:
                pos, angle = np.array([u * H, W - 2.0]), -math.pi / 2
            _grow(rng, tree, pos, angle, 0)
        frac = rasterize(tree).mean()
        if FOREGROUND_MIN <= frac <= FOREGROUND_MAX:
            return tree
        attempt_seed = _derive_seed(attempt_seed, "retry", 0)
    raise RuntimeError(f"could not generate an in-range tree from seed {seed}")


def _coverage(tree: VesselTree) -> np.ndarray:
    """Anti-aliased stroke coverage in [0, 1] per pixel."""
    h, w = tree.H, tree.W
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cov = np.zeros((h, w))
    for (p0, p1, width) in tree.segments:
        a = np.array(p0)
        b = np.array(p1)
        ab = b - a
        denom = float(ab @ ab)
        dy = yy - a[0]
        dx = xx - a[1]
        if denom < 1e-12:
            dist = np.hypot(dy, dx)
        else:
            t = np.clip((dy * ab[0] + dx * ab[1]) / denom, 0.0, 1.0)
            dist = np.hypot(dy - t * ab[0], dx - t * ab[1])
        stroke = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)
        cov = np.maximum(cov, stroke)
    return cov


def rasterize(tree: VesselTree) -> np.ndarray:
    """Binary vessel mask: pixels with at least 50% stroke coverage."""
    return (_coverage(tree) >= 0.5).astype(np.float64)


def render(tree: VesselTree, domain: str, seed: int,
           noise: bool = True) -> PhantomSample:
    """Render a tree into one modality; the mask depends only on geometry."""
    if domain not in ("A", "B"):
        raise ValueError(f"domain must be 'A' or 'B', got {domain!r}")
    h, w = tree.H, tree.W
    cov = _coverage(tree)
    mask = (cov >= 0.5).astype(np.float64)
    rng = np.random.default_rng(seed)
    if domain == "A":
        img = A_BACKGROUND + (A_VESSEL - A_BACKGROUND) * cov
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        r2 = ((yy - h / 2) ** 2 + (xx - w / 2) ** 2) / ((h / 2) ** 2 + (w / 2) ** 2)
        img *= 1.0 - 0.25 * r2
        if noise:
            img += rng.normal(0.0, A_NOISE_SIGMA, size=(h, w))
    else:
        img = B_BACKGROUND + (B_VESSEL - B_BACKGROUND) * cov
        if noise:
            img *= rng.uniform(B_SPECKLE_LO, B_SPECKLE_HI, size=(h, w))
            rows = np.arange(h, dtype=np.float64)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            img += B_BAND_AMPLITUDE * np.sin(2.0 * math.pi * rows / 8.0 + phase)[:, None]
    img = np.clip(img, 0.0, 1.0)
    return PhantomSample(image=img, mask=mask, domain=domain, seed=seed)


# -- file formats -------------------------------------------------------------

def write_pgm(path: str, image: np.ndarray) -> None:
    """Binary P5 graymap, 8-bit, maxval 255. Values expected in [0, 1]."""
    h, w = image.shape
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode())
            fh.write(data.tobytes())
    except OSError as e:
        raise OSError(f"failed writing graymap '{path}': {e}") from e


def read_pgm(path: str) -> np.ndarray:
    """Read a binary P5 graymap back to floats in [0, 1]."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise OSError(f"failed reading graymap '{path}': {e}") from e
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError(f"'{path}' is not a binary P5 graymap")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    data = np.frombuffer(parts[3][: h * w], dtype=np.uint8)
    if data.size != h * w:
        raise ValueError(f"'{path}' truncated: expected {h * w} pixels, got {data.size}")
    return data.reshape(h, w).astype(np.float64) / maxval


def build_dataset(manifest: DatasetManifest) -> DatasetManifest:
    """Write the full two-domain dataset plus a JSON manifest.

    Layout: A/images, A/masks, B/images, and B masks under B/eval_only/masks
    (withheld from training, kept for evaluation). Returns the manifest with
    per-sample seeds and relative paths filled in.
    """
    out = manifest.out_dir
    dirs = ["A/images", "A/masks", "B/images", "B/eval_only/masks"]
    for d in dirs:
        os.makedirs(os.path.join(out, d), exist_ok=True)

    manifest.sample_seeds = {"A": [], "B": []}
    manifest.paths = {"A_images": [], "A_masks": [], "B_images": [],
                      "B_eval_masks": []}
    for domain, count in (("A", manifest.m_source), ("B", manifest.n_target)):
        for i in range(count):
            s = _derive_seed(manifest.seed, domain, i)
            manifest.sample_seeds[domain].append(s)
            tree = generate_tree(s, manifest.size, manifest.size)
            sample = render(tree, domain, s)
            name = f"{domain.lower()}_{i:04d}.pgm"
            img_rel = f"{domain}/images/{name}"
            write_pgm(os.path.join(out, img_rel), sample.image)
            if domain == "A":
                mask_rel = f"A/masks/{name}"
                manifest.paths["A_images"].append(img_rel)
                manifest.paths["A_masks"].append(mask_rel)
            else:
                mask_rel = f"B/eval_only/masks/{name}"
                manifest.paths["B_images"].append(img_rel)
                manifest.paths["B_eval_masks"].append(mask_rel)
            write_pgm(os.path.join(out, mask_rel), sample.mask)

    doc = {
        "m_source": manifest.m_source,
        "n_target": manifest.n_target,
        "size": manifest.size,
        "seed": manifest.seed,
        "sample_seeds": manifest.sample_seeds,
        "paths": manifest.paths,
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(out_dir: str) -> dict:
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        return json.load(fh)
