"""Dataset handling: pair discovery, deterministic splits, input
preprocessing and a synthetic shape generator with thinning pseudo-labels.
"""

import os

import numpy as np

from canet import image
from canet._kernels import edt_sq
from canet.config import INPUT_MODES


def list_pairs(shapes_dir, skeletons_dir):
    """Sorted stems of .pgm files present in both directories."""
    def stems(directory):
        try:
            names = os.listdir(directory)
        except OSError as exc:
            raise IOError(f"{directory}: cannot list directory ({exc})") from exc
        return {os.path.splitext(n)[0] for n in names if n.endswith(".pgm")}

    common = stems(shapes_dir) & stems(skeletons_dir)
    if not common:
        raise ValueError(
            f"no matching .pgm pairs between {shapes_dir} and {skeletons_dir}"
        )
    return sorted(common)


def split_dataset(ids, ratio, seed):
    """Deterministic shuffle split into (train, held_out) id lists.

    The training share is floor(len * ratio), clamped so both sides keep at
    least one id.
    """
    ids = list(ids)
    if len(ids) < 2:
        raise ValueError(f"need at least 2 ids to split, got {len(ids)}")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = min(max(int(len(ids) * ratio), 1), len(ids) - 1)
    return shuffled[:n_train], shuffled[n_train:]


def load_pair(shapes_dir, skeletons_dir, stem):
    shape = image.load_image(os.path.join(shapes_dir, stem + ".pgm"))
    skeleton = image.load_image(os.path.join(skeletons_dir, stem + ".pgm"))
    if shape.shape != skeleton.shape:
        raise ValueError(
            f"{stem}: shape image is {shape.shape} but skeleton image "
            f"is {skeleton.shape}"
        )
    return shape, skeleton


def preprocess(input_mode, mask):
    """Binary shape mask -> float32 network input in [0, 1]."""
    if input_mode == "raw_shape":
        return mask.astype(np.float32)
    if input_mode == "distance":
        filled = mask
    elif input_mode == "repaired_distance":
        filled = image.fill_holes(mask)
    else:
        raise ValueError(
            f"input_mode must be one of {INPUT_MODES}, got {input_mode!r}"
        )
    dist = image.distance_transform(filled)
    return image.normalize_map(dist).astype(np.float32)


def _paint_rectangle(canvas, rng):
    h, w = canvas.shape
    rh = int(rng.integers(h // 8, h // 2))
    rw = int(rng.integers(w // 8, w // 2))
    top = int(rng.integers(2, h - rh - 2))
    left = int(rng.integers(2, w - rw - 2))
    canvas[top:top + rh, left:left + rw] = True


def _paint_ellipse(canvas, rng, hollow):
    h, w = canvas.shape
    ry = int(rng.integers(h // 8, h // 3))
    rx = int(rng.integers(w // 8, w // 3))
    cy = int(rng.integers(ry + 2, h - ry - 2))
    cx = int(rng.integers(rx + 2, w - rx - 2))
    ys = np.arange(h)[:, None] - cy
    xs = np.arange(w)[None, :] - cx
    outer = (ys / ry) ** 2 + (xs / rx) ** 2 <= 1.0
    if hollow and min(ry, rx) >= 6:
        inner = (ys / (ry * 0.5)) ** 2 + (xs / (rx * 0.5)) ** 2 <= 1.0
        outer &= ~inner
    canvas |= outer


def _paint_polyline(canvas, rng):
    h, w = canvas.shape
    npts = int(rng.integers(2, 5))
    pts = np.stack(
        [rng.integers(4, h - 4, size=npts), rng.integers(4, w - 4, size=npts)],
        axis=1,
    ).astype(np.float64)
    line = np.zeros((h, w), dtype=bool)
    for (y0, x0), (y1, x1) in zip(pts[:-1], pts[1:]):
        steps = int(max(abs(y1 - y0), abs(x1 - x0)) * 2) + 2
        t = np.linspace(0.0, 1.0, steps)
        ys = np.clip(np.rint(y0 + (y1 - y0) * t), 0, h - 1).astype(np.intp)
        xs = np.clip(np.rint(x0 + (x1 - x0) * t), 0, w - 1).astype(np.intp)
        line[ys, xs] = True
    # thicken: keep pixels within radius r of the traced centerline
    r = int(rng.integers(2, 4))
    d2 = edt_sq((~line).astype(np.uint8))
    canvas |= d2 <= r * r


def _random_shape(size, rng):
    canvas = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(2, 5))):
        kind = int(rng.integers(0, 3))
        if kind == 0:
            _paint_rectangle(canvas, rng)
        elif kind == 1:
            _paint_ellipse(canvas, rng, hollow=bool(rng.integers(0, 2)))
        else:
            _paint_polyline(canvas, rng)
    canvas[:2, :] = canvas[-2:, :] = False
    canvas[:, :2] = canvas[:, -2:] = False
    return canvas


def generate_synthetic(count, size, seed, out_dir):
    """Write `count` shape/skeleton PGM pairs under out_dir; return stems.

    Shapes are random unions of rectangles, (optionally hollow) ellipses and
    thick polylines; the paired pseudo-label is the thinned shape.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    shapes_dir = os.path.join(out_dir, "shapes")
    skeletons_dir = os.path.join(out_dir, "skeletons")
    os.makedirs(shapes_dir, exist_ok=True)
    os.makedirs(skeletons_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    stems = []
    for index in range(count):
        for _ in range(100):
            shape = _random_shape(size, rng)
            skeleton = image.zhang_suen_thinning(shape)
            if skeleton.any():
                break
        else:
            raise RuntimeError("failed to draw a non-empty shape")
        stem = f"synth_{index:04d}"
        image.save_image(os.path.join(shapes_dir, stem + ".pgm"), shape)
        image.save_image(os.path.join(skeletons_dir, stem + ".pgm"), skeleton)
        stems.append(stem)
    return stems
