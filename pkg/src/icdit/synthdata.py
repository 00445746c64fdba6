"""Procedural pathology-like dataset: paired images, masks, captions, labels.

Each sample is a 32x32 RGB image of dark circular blobs on a smooth textured
background. The binary layout mask rasterizes the blobs exactly; the caption
and visual statistics carry no positional information by design, so the mask
is the only conditioning channel that knows where the blobs are.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .numcore import Rng

IMAGE_SIZE = 32
N_CLASSES = 3
DENSITY_WORDS = ("sparse", "medium", "dense")
TEXTURE_WORDS = ("fine", "coarse")

BLOB_DEPTH = 0.4  # intensity offset subtracted inside each blob
PIXEL_NOISE = 0.02

#: fixed 64-word caption vocabulary (shared with the text surrogate encoder)
VOCAB = (
    "a", "an", "the", "of", "on", "with", "and", "in",
    "sparse", "medium", "dense", "fine", "coarse",
    "field", "cluster", "clusters", "nuclei", "stroma", "tissue", "texture",
    "background", "cells", "region", "regions", "pattern", "patterns",
    "scattered", "packed", "grouped", "arrangement", "zero", "one", "two",
    "three", "four", "five", "six", "seven", "eight", "nine",
    "dark", "light", "round", "small", "large", "smooth", "granular",
    "uniform", "irregular", "visible", "faint", "distinct", "diffuse",
    "compact", "isolated", "adjacent", "central", "peripheral", "mixed",
    "plain", "mottled", "spotted", "clear", "shaded",
)
assert len(VOCAB) == 64
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


@dataclass
class SynthSample:
    image: np.ndarray  # 3 x 32 x 32, values in [0, 1]
    mask: np.ndarray  # 1 x 32 x 32, binary
    caption_ids: list
    caption: str
    label: int
    blobs: list  # (cx, cy, r) in pixels
    seed: int


def density_class(blob_count):
    """3-way density label: sparse <= 3, medium 4-6, dense >= 7."""
    if blob_count <= 3:
        return 0
    if blob_count <= 6:
        return 1
    return 2


def caption_for(label, texture):
    """Deterministic caption template from (density class, texture class)."""
    words = ["a", DENSITY_WORDS[label], "field", "of", "nuclei",
             "on", TEXTURE_WORDS[texture], "stroma"]
    return " ".join(words)


def tokenize(caption):
    return [_WORD_TO_ID[w] for w in caption.split()]


def _background(rng, texture):
    """Seeded low-frequency field; coarse textures vary more slowly."""
    cells = 4 if texture == 1 else 8
    grid = rng.uniform(-1.0, 1.0, (cells, cells))
    zoom = IMAGE_SIZE / cells
    field = ndimage.zoom(grid, zoom, order=1, mode="nearest",
                         grid_mode=True)
    return 0.55 + 0.08 * field


_BLOB_RADII = (3.75, 4.0)
_BLOB_GAP = 2.0  # minimum free space between disk boundaries

#: candidate centers sit on the 4 px lattice so blobs survive the 4x spatial
#: pooling of the latent pathway (a disk on a pooling-cell corner covers its
#: four neighboring cells almost fully)
_CORNERS = [(4.0 * i, 4.0 * j) for i in range(1, 8) for j in range(1, 8)]

#: widely spaced fallback grid that always fits nine separated disks
_DENSE_GRID = [(x, y) for x in (4.0, 16.0, 28.0) for y in (4.0, 16.0, 28.0)]


def _place_blobs(rng, k):
    """k non-overlapping disks with centers on the 4 px lattice."""
    def greedy(candidates):
        blobs = []
        for cx, cy in candidates:
            r = _BLOB_RADII[rng.integers(0, len(_BLOB_RADII))]
            if all((cx - bx) ** 2 + (cy - by) ** 2
                   >= (r + br + _BLOB_GAP) ** 2 for bx, by, br in blobs):
                blobs.append((cx, cy, r))
                if len(blobs) == k:
                    return blobs
        return None

    for attempt in range(200):
        order = rng.split("order", attempt)._gen.permutation(len(_CORNERS))
        blobs = greedy([_CORNERS[i] for i in order])
        if blobs is not None:
            return blobs
    # crowded scenes: fall back to the spacing-12 grid, which always fits
    order = rng.split("grid")._gen.permutation(len(_DENSE_GRID))
    return greedy([_DENSE_GRID[i] for i in order])


def rasterize_blobs(blobs):
    """Exact disk rasterization: mask = 1 iff the pixel center is inside."""
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    for cx, cy, r in blobs:
        mask |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
    return mask[None, :, :].astype(np.float64)


def gen_sample(seed):
    """Deterministic sample from a single integer seed."""
    seed = int(seed)
    rng = Rng(seed).split("sample")
    k = rng.integers(1, 10)
    texture = rng.integers(0, 2)
    bg = _background(rng.split("bg"), texture)
    blobs = _place_blobs(rng.split("blobs"), k)
    mask = rasterize_blobs(blobs)

    tints = np.array([0.02, 0.0, -0.02])
    image = bg[None, :, :] + tints[:, None, None]
    image = image - BLOB_DEPTH * mask
    image = image + PIXEL_NOISE * rng.split("noise").normal(image.shape)
    image = np.clip(image, 0.0, 1.0)

    label = density_class(k)
    caption = caption_for(label, texture)
    return SynthSample(image=image, mask=mask, caption_ids=tokenize(caption),
                       caption=caption, label=label, blobs=blobs, seed=seed)


def sample_seed(root_seed, index):
    """Per-sample seed split from the root; order-independent."""
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(index,))
    return int(ss.generate_state(1, np.uint64)[0])


def gen_dataset(n, seed):
    return [gen_sample(sample_seed(seed, i)) for i in range(n)]


def segment_oracle(image):
    """Median-filter + fixed-offset threshold segmentation surrogate.

    The background median is estimated by the upper quartile of the filtered
    image, which stays on the background even when blobs cover close to half
    of the pixels (dense scenes after latent-space block averaging).
    """
    image = np.asarray(image, dtype=np.float64)
    gray = image.mean(axis=0) if image.ndim == 3 else image
    filtered = ndimage.median_filter(gray, size=3)
    threshold = np.percentile(filtered, 75) - 0.2
    return (filtered < threshold)[None, :, :].astype(np.float64)


def split_patches(image, patch_h, patch_w):
    """Row-major non-overlapping patches covering the image exactly."""
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    if h % patch_h or w % patch_w:
        raise ShapeError(
            f"image {image.shape} not divisible into {patch_h}x{patch_w} "
            f"patches")
    patches = []
    for i in range(h // patch_h):
        for j in range(w // patch_w):
            patches.append(image[:, i * patch_h:(i + 1) * patch_h,
                                 j * patch_w:(j + 1) * patch_w].copy())
    return patches


def reassemble_patches(patches, grid):
    gh, gw = grid
    c, ph, pw = patches[0].shape
    out = np.zeros((c, gh * ph, gw * pw))
    for idx, patch in enumerate(patches):
        i, j = divmod(idx, gw)
        out[:, i * ph:(i + 1) * ph, j * pw:(j + 1) * pw] = patch
    return out


def count_components(mask):
    """Connected-component count of a binary mask (8-connectivity)."""
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[0]
    _, n = ndimage.label(m > 0.5, structure=np.ones((3, 3)))
    return int(n)
