"""Hot loops: numba-compiled kernels with pure-numpy fallbacks.

The numba path is used when numba imports and ``DECOMPSEG_NUMBA`` is not set to
``0``/``false``/``off``. Both paths produce identical results; the rasterizer and
PRNG paths are bitwise identical because they avoid transcendental functions.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _env_wants_numba():
    value = os.environ.get("DECOMPSEG_NUMBA", "1").strip().lower()
    return value not in ("0", "false", "off", "no")


_USE_NUMBA = HAVE_NUMBA and _env_wants_numba()

GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
INV_2_53 = 1.0 / 9007199254740992.0

SHAPE_ELLIPSE = 0
SHAPE_RECT = 1
SHAPE_TRIANGLE = 2


def backend():
    return "numba" if _USE_NUMBA else "numpy"


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` at runtime (tests and benchmarks)."""
    global _USE_NUMBA
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not importable")
        _USE_NUMBA = True
    elif name == "numpy":
        _USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")


# ---------------------------------------------------------------- splitmix64


@njit(cache=True)
def _splitmix_fill_nb(state, count):
    out = np.empty(count, dtype=np.uint64)
    s = np.uint64(state)
    for i in range(count):
        s = s + GAMMA
        z = s
        z = (z ^ (z >> _S30)) * MIX1
        z = (z ^ (z >> _S27)) * MIX2
        out[i] = z ^ (z >> _S31)
    return out


def _splitmix_fill_np(state, count):
    steps = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(state) + steps * GAMMA
        z = (z ^ (z >> _S30)) * MIX1
        z = (z ^ (z >> _S27)) * MIX2
    return z ^ (z >> _S31)


def splitmix_fill(state, count):
    """Next ``count`` splitmix64 outputs after ``state`` (state itself is not advanced)."""
    state = np.uint64(state)
    if _USE_NUMBA:
        return _splitmix_fill_nb(state, count)
    return _splitmix_fill_np(state, count)


def u64_to_unit(values):
    """Top 53 bits to a double in [0, 1)."""
    return (values >> _S11).astype(np.float64) * INV_2_53


# ---------------------------------------------------------------- rasterizer


@njit(cache=True, inline="always")
def _tri(u):
    # triangle wave in [0, 1], period 1
    f = u - np.floor(u)
    return abs(2.0 * f - 1.0)


@njit(cache=True)
def _rasterize_nb(img, mask, owner, part_id, shape, cx, cy, rx, ry, cos_a, sin_a,
                  freq, tex_cos, tex_sin, tex_phase, hue, hue_amp, is_fg):
    c_count, h, w = img.shape
    for y in range(h):
        py = y + 0.5 - cy
        for x in range(w):
            px = x + 0.5 - cx
            u = (px * cos_a + py * sin_a) / rx
            v = (py * cos_a - px * sin_a) / ry
            if shape == 0:
                inside = u * u + v * v <= 1.0
            elif shape == 1:
                inside = abs(u) <= 1.0 and abs(v) <= 1.0
            else:
                inside = v >= -1.0 and abs(u) <= 0.5 * (1.0 - v) and v <= 1.0
            if not inside:
                continue
            t = _tri(freq * (x * tex_cos + y * tex_sin) + tex_phase)
            theta = hue + hue_amp * (t - 0.5)
            for c in range(c_count):
                img[c, y, x] = _tri(theta + c / c_count)
            mask[y, x] = is_fg
            owner[y, x] = part_id


def _tri_np(u):
    f = u - np.floor(u)
    return np.abs(2.0 * f - 1.0)


def _rasterize_np(img, mask, owner, part_id, shape, cx, cy, rx, ry, cos_a, sin_a,
                  freq, tex_cos, tex_sin, tex_phase, hue, hue_amp, is_fg):
    c_count, h, w = img.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    px = xs + 0.5 - cx
    py = ys + 0.5 - cy
    u = (px * cos_a + py * sin_a) / rx
    v = (py * cos_a - px * sin_a) / ry
    if shape == SHAPE_ELLIPSE:
        inside = u * u + v * v <= 1.0
    elif shape == SHAPE_RECT:
        inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    else:
        inside = (v >= -1.0) & (np.abs(u) <= 0.5 * (1.0 - v)) & (v <= 1.0)
    t = _tri_np(freq * (xs * tex_cos + ys * tex_sin) + tex_phase)
    theta = hue + hue_amp * (t - 0.5)
    for c in range(c_count):
        img[c][inside] = _tri_np(theta + c / c_count)[inside]
    mask[inside] = is_fg
    owner[inside] = part_id


def rasterize(img, mask, owner, part_id, shape, cx, cy, rx, ry, angle_cos, angle_sin,
              freq, tex_cos, tex_sin, tex_phase, hue, hue_amp, is_fg):
    """Paint one textured primitive into ``img`` (float64, C×H×W) in place.

    ``mask`` receives ``is_fg`` and ``owner`` receives ``part_id`` on every covered
    pixel; ``owner`` is the renderer's coverage log.
    """
    args = (img, mask, owner, np.int64(part_id), np.int64(shape), float(cx), float(cy),
            float(rx), float(ry), float(angle_cos), float(angle_sin), float(freq),
            float(tex_cos), float(tex_sin), float(tex_phase), float(hue), float(hue_amp),
            np.uint8(is_fg))
    if _USE_NUMBA:
        _rasterize_nb(*args)
    else:
        _rasterize_np(*args)


# ---------------------------------------------------------------- mask pooling


@njit(cache=True)
def _majority_downsample_nb(mask, n_rows, n_cols):
    h, w = mask.shape
    out = np.zeros((n_rows, n_cols), dtype=np.uint8)
    for i in range(n_rows):
        y0 = (i * h) // n_rows
        y1 = ((i + 1) * h) // n_rows
        for j in range(n_cols):
            x0 = (j * w) // n_cols
            x1 = ((j + 1) * w) // n_cols
            count = 0
            for y in range(y0, y1):
                for x in range(x0, x1):
                    count += mask[y, x] != 0
            area = (y1 - y0) * (x1 - x0)
            if 2 * count > area:
                out[i, j] = 1
    return out


def _majority_downsample_np(mask, n_rows, n_cols):
    h, w = mask.shape
    rows = (np.arange(n_rows) * h) // n_rows
    cols = (np.arange(n_cols) * w) // n_cols
    counts = np.add.reduceat(np.add.reduceat((mask != 0).astype(np.int64), rows, axis=0),
                             cols, axis=1)
    heights = np.diff(np.append(rows, h))
    widths = np.diff(np.append(cols, w))
    area = heights[:, None] * widths[None, :]
    return (2 * counts > area).astype(np.uint8)


def majority_downsample(mask, n_rows, n_cols=None):
    """Area-majority vote per cell; exact ties go to background."""
    n_cols = n_rows if n_cols is None else n_cols
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if _USE_NUMBA:
        return _majority_downsample_nb(mask, n_rows, n_cols)
    return _majority_downsample_np(mask, n_rows, n_cols)


# ---------------------------------------------------------------- histogram MI


@njit(cache=True)
def _binned_mi_nb(a, b, bins):
    m, d = a.shape
    out = np.zeros(d)
    joint = np.zeros((bins, bins))
    pa = np.zeros(bins)
    pb = np.zeros(bins)
    for c in range(d):
        lo_a = a[0, c]
        hi_a = a[0, c]
        lo_b = b[0, c]
        hi_b = b[0, c]
        for k in range(m):
            lo_a = min(lo_a, a[k, c])
            hi_a = max(hi_a, a[k, c])
            lo_b = min(lo_b, b[k, c])
            hi_b = max(hi_b, b[k, c])
        if hi_a <= lo_a or hi_b <= lo_b:
            continue
        joint[:, :] = 0.0
        pa[:] = 0.0
        pb[:] = 0.0
        for k in range(m):
            ia = int((a[k, c] - lo_a) / (hi_a - lo_a) * bins)
            ib = int((b[k, c] - lo_b) / (hi_b - lo_b) * bins)
            ia = min(ia, bins - 1)
            ib = min(ib, bins - 1)
            joint[ia, ib] += 1.0
            pa[ia] += 1.0
            pb[ib] += 1.0
        acc = 0.0
        for i in range(bins):
            for j in range(bins):
                if joint[i, j] > 0.0:
                    acc += joint[i, j] / m * np.log(joint[i, j] * m / (pa[i] * pb[j]))
        out[c] = acc
    return out


def _bin_index(x, bins):
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    idx = ((x - lo) / span * bins).astype(np.int64)
    return np.minimum(idx, bins - 1), hi > lo


def _binned_mi_np(a, b, bins):
    m, d = a.shape
    ia, ok_a = _bin_index(a, bins)
    ib, ok_b = _bin_index(b, bins)
    flat = (np.arange(d)[None, :] * bins * bins + ia * bins + ib).ravel()
    joint = np.bincount(flat, minlength=d * bins * bins).reshape(d, bins, bins) / m
    pa = joint.sum(axis=2, keepdims=True)
    pb = joint.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(joint > 0, joint * np.log(joint / (pa * pb)), 0.0)
    out = terms.sum(axis=(1, 2))
    out[~(ok_a & ok_b)] = 0.0
    return out


def binned_mi(a, b, bins):
    """Per-channel histogram mutual information in nats; constant channels give 0."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if _USE_NUMBA:
        return _binned_mi_nb(a, b, int(bins))
    return _binned_mi_np(a, b, int(bins))
