"""Binary image I/O and classical raster operations.

Images are 2-d NumPy arrays: boolean for binary rasters (True =
foreground), float64 for distance maps.  File format is binary PGM
(P5, maxval 255); on load, gray values >= 128 count as foreground, on
save foreground is written as 255 and background as 0.
"""

import numpy as np

from canet import _kernels

THRESHOLD_8BIT = 128


# ---------------------------------------------------------------------------
# PGM I/O


def _read_pgm_header(data, path):
    # tokens are separated by whitespace; '#' starts a comment to end-of-line
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IOError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval, then the raster
    return tokens, pos


def load_pgm_gray(path):
    """Read a binary PGM (P5) file as a uint8 (H, W) array."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IOError(f"{path}: cannot read image ({exc})") from exc
    if len(data) < 2 or data[:2] != b"P5":
        magic = data[:2].decode("latin-1", "replace") if data else "(empty)"
        raise IOError(
            f"{path}: not a binary grayscale PGM (magic {magic!r}, expected P5)"
        )
    tokens, pos = _read_pgm_header(data, path)
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise IOError(f"{path}: malformed PGM header") from None
    if width <= 0 or height <= 0:
        raise IOError(f"{path}: non-positive extents {width}x{height}")
    if not 0 < maxval < 256:
        raise IOError(f"{path}: unsupported maxval {maxval} (need 1..255)")
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise IOError(
            f"{path}: truncated raster, expected {width * height} bytes, "
            f"got {len(raster)}"
        )
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def save_pgm_gray(path, gray):
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"expected a 2-d image, got {gray.ndim}-d")
    gray = gray.astype(np.uint8, copy=False)
    h, w = gray.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(gray).tobytes())
    except OSError as exc:
        raise IOError(f"{path}: cannot write image ({exc})") from exc


def load_image(path):
    """Load a PGM file as a boolean mask (gray >= 128 is foreground)."""
    return load_pgm_gray(path) >= THRESHOLD_8BIT


def save_image(path, mask):
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        mask = mask != 0
    save_pgm_gray(path, np.where(mask, np.uint8(255), np.uint8(0)))


# ---------------------------------------------------------------------------
# morphology and transforms


def fill_holes(mask):
    """Convert enclosed background regions to foreground.

    Background connectivity is 4-connected: any background pixel with no
    4-connected path to the image border is a hole.  Foreground pixels are
    never modified.
    """
    mask = np.asarray(mask, dtype=bool)
    bg = ~mask
    reach = np.zeros_like(bg)
    reach[0, :] = bg[0, :]
    reach[-1, :] = bg[-1, :]
    reach[:, 0] = bg[:, 0]
    reach[:, -1] = bg[:, -1]
    while True:
        grown = reach.copy()
        grown[1:, :] |= reach[:-1, :]
        grown[:-1, :] |= reach[1:, :]
        grown[:, 1:] |= reach[:, :-1]
        grown[:, :-1] |= reach[:, 1:]
        grown &= bg
        if np.array_equal(grown, reach):
            break
        reach = grown
    return ~reach


def distance_transform(mask):
    """Exact Euclidean distance from each foreground pixel to background.

    Positions outside the image count as background (a one-pixel zero rim
    is added before the transform), so the result is finite even for
    all-foreground inputs.  Background pixels map to 0.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.zeros((mask.shape[0] + 2, mask.shape[1] + 2), dtype=np.uint8)
    padded[1:-1, 1:-1] = mask
    sq = _kernels.edt_sq(padded)[1:-1, 1:-1]
    return np.sqrt(sq.astype(np.float64))


def normalize_map(dm):
    """Scale a distance map into [0, 1] by its maximum; all-zero maps pass through."""
    dm = np.asarray(dm, dtype=np.float64)
    peak = dm.max() if dm.size else 0.0
    if peak == 0.0:
        return dm.copy()
    return dm / peak


def _neighbors(padded):
    # clockwise from north: P2..P9 around each pixel of the unpadded image
    p2 = padded[:-2, 1:-1]
    p3 = padded[:-2, 2:]
    p4 = padded[1:-1, 2:]
    p5 = padded[2:, 2:]
    p6 = padded[2:, 1:-1]
    p7 = padded[2:, :-2]
    p8 = padded[1:-1, :-2]
    p9 = padded[:-2, :-2]
    return p2, p3, p4, p5, p6, p7, p8, p9


def _thinning_candidates(mask, subiteration):
    padded = np.pad(mask, 1)
    p2, p3, p4, p5, p6, p7, p8, p9 = _neighbors(padded)
    ring = (p2, p3, p4, p5, p6, p7, p8, p9)
    b = np.zeros(mask.shape, dtype=np.int32)
    for q in ring:
        b += q
    a = np.zeros(mask.shape, dtype=np.int32)
    for q, r in zip(ring, ring[1:] + ring[:1]):
        a += (~q) & r
    cond = mask & (b >= 2) & (b <= 6) & (a == 1)
    if subiteration == 0:
        cond &= ~(p2 & p4 & p6)
        cond &= ~(p4 & p6 & p8)
    else:
        cond &= ~(p2 & p4 & p8)
        cond &= ~(p2 & p6 & p8)
    return cond


def zhang_suen_thinning(mask):
    """Two-subiteration parallel thinning run to a fixed point.

    Each pass deletes boundary foreground pixels whose neighborhood meets
    the classic conditions (2..6 foreground neighbors, exactly one 0-to-1
    transition around the ring, and the per-subiteration direction tests).
    The output is a subset of the input foreground and is stable under
    re-application.
    """
    mask = np.asarray(mask, dtype=bool).copy()
    while True:
        changed = False
        for sub in (0, 1):
            cand = _thinning_candidates(mask, sub)
            if cand.any():
                mask &= ~cand
                changed = True
        if not changed:
            return mask


def downsample_mask(mask, factor):
    """Block max-pool: output pixel is set iff any pixel in its block is set."""
    mask = np.asarray(mask, dtype=bool)
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"downsample factor must be a power of two, got {factor}")
    h, w = mask.shape
    if h % factor:
        raise ValueError(f"height {h} not divisible by factor {factor}")
    if w % factor:
        raise ValueError(f"width {w} not divisible by factor {factor}")
    return mask.reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3))
