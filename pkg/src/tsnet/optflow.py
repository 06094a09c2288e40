"""Dense two-frame optical flow by Farneback polynomial expansion.

Each frame is modeled per pixel as a local quadratic f(x) ~ x^T A x + b^T x + c
fitted by Gaussian-weighted least squares over the basis (1, x, y, x^2, y^2, xy),
computed with separable correlations. Displacement follows from comparing the
two expansions: with A = (A1 + A2)/2 and db = -(b2 - b1)/2 (warped by the
current estimate), the per-pixel normal equations G d = h are window-averaged
and solved, coarse to fine over a Gaussian-antialiased image pyramid.

Also here: the RGB color-wheel flow encoding used by the temporal stream,
luminance conversion, and the binary flow cache format.

Coordinates: x is the column axis (u positive rightward), y is the row axis
(v positive downward). Arrays are indexed [row, col].
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "FlowField", "FlowParams", "PolyExpansion", "FlowCacheError",
    "polynomial_expansion", "estimate_flow", "encode_flow_rgb", "rgb_to_gray",
    "write_flow", "read_flow", "FLOW_MAGIC",
]

FLOW_MAGIC = b"FLOW0001"


class FlowCacheError(ValueError):
    """Raised for bad magic, truncation, or malformed flow cache files."""


@dataclass
class FlowField:
    """Per-pixel displacement in pixels/frame between two consecutive frames."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("flow components must be equal-shape 2-d arrays")

    @property
    def height(self):
        return self.u.shape[0]

    @property
    def width(self):
        return self.u.shape[1]

    def magnitude(self):
        return np.hypot(self.u, self.v)


@dataclass
class FlowParams:
    """Farneback parameters; defaults are the conventional ones."""

    pyramid_scale: float = 0.5
    levels: int = 3
    window_size: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.2

    def __post_init__(self):
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError("pyramid_scale must lie in (0,1), got %r" % (self.pyramid_scale,))
        if self.levels < 1:
            raise ValueError("levels must be >= 1, got %r" % (self.levels,))
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError("window_size must be an odd int >= 3, got %r" % (self.window_size,))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1, got %r" % (self.iterations,))
        if self.poly_n < 3 or self.poly_n % 2 == 0:
            raise ValueError("poly_n must be an odd int >= 3, got %r" % (self.poly_n,))
        if self.poly_sigma <= 0:
            raise ValueError("poly_sigma must be positive, got %r" % (self.poly_sigma,))


@dataclass
class PolyExpansion:
    """Per-pixel quadratic model coefficients f(x) ~ x^T A x + b^T x + c.

    a_xx, a_xy, a_yy are the entries of the symmetric A; b_x, b_y the linear
    terms along columns and rows; c the constant. All arrays are H x W.
    """

    a_xx: np.ndarray
    a_xy: np.ndarray
    a_yy: np.ndarray
    b_x: np.ndarray
    b_y: np.ndarray
    c: np.ndarray

    def A(self, row, col):
        return np.array([[self.a_xx[row, col], self.a_xy[row, col]],
                         [self.a_xy[row, col], self.a_yy[row, col]]])

    def b(self, row, col):
        return np.array([self.b_x[row, col], self.b_y[row, col]])


def polynomial_expansion(img, poly_n=5, poly_sigma=1.2):
    """Weighted least-squares quadratic fit at every pixel, separably.

    The applicability is a Gaussian of std poly_sigma over a window of side
    poly_n. Borders use replicate padding, so only pixels at least
    (poly_n-1)/2 from the edge fit exactly.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("polynomial_expansion expects a 2-d grayscale image")
    h, w = img.shape
    if h <= poly_n or w <= poly_n:
        raise ValueError("image %dx%d smaller than expansion window %d" % (h, w, poly_n))

    r = (poly_n - 1) // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(d * d) / (2.0 * poly_sigma * poly_sigma))

    # Separable weighted moments sum_w f * basis, basis = (1, x, y, x^2, y^2, xy).
    k0, k1, k2 = g, g * d, g * d * d
    fy0 = ndimage.correlate1d(img, k0, axis=0, mode="nearest")
    fy1 = ndimage.correlate1d(img, k1, axis=0, mode="nearest")
    fy2 = ndimage.correlate1d(img, k2, axis=0, mode="nearest")
    m = np.stack([
        ndimage.correlate1d(fy0, k0, axis=1, mode="nearest"),   # 1
        ndimage.correlate1d(fy0, k1, axis=1, mode="nearest"),   # x
        ndimage.correlate1d(fy1, k0, axis=1, mode="nearest"),   # y
        ndimage.correlate1d(fy0, k2, axis=1, mode="nearest"),   # x^2
        ndimage.correlate1d(fy2, k0, axis=1, mode="nearest"),   # y^2
        ndimage.correlate1d(fy1, k1, axis=1, mode="nearest"),   # xy
    ])

    # Constant 6x6 normal matrix G = sum_w basis basis^T over the window.
    dy, dx = np.meshgrid(d, d, indexing="ij")
    wgt = (g[:, None] * g[None, :]).ravel()
    basis = np.stack([np.ones_like(dx), dx, dy, dx * dx, dy * dy, dx * dy]) \
        .reshape(6, -1)
    gram = (basis * wgt) @ basis.T
    coef = np.einsum("ij,jhw->ihw", np.linalg.inv(gram), m)

    return PolyExpansion(a_xx=coef[3], a_xy=coef[5] / 2.0, a_yy=coef[4],
                         b_x=coef[1], b_y=coef[2], c=coef[0])


def _resize_bilinear(img, out_h, out_w):
    """Half-pixel-aligned bilinear resample with edge clamping."""
    in_h, in_w = img.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    yy, xx = np.meshgrid(np.clip(ys, 0, in_h - 1), np.clip(xs, 0, in_w - 1),
                         indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def _level_sizes(h, w, params):
    """Pyramid sizes fine-to-coarse; levels too small for the fit are dropped."""
    sizes = []
    for k in range(params.levels):
        s = params.pyramid_scale ** k
        lh, lw = int(round(h * s)), int(round(w * s))
        if min(lh, lw) <= params.poly_n + 2:
            break
        sizes.append((lh, lw, s))
    return sizes or [(h, w, 1.0)]


def estimate_flow(prev, nxt, params=None):
    """Dense flow prev -> nxt, coarse to fine.

    At each level both frames are expanded; `iterations` passes re-warp the
    second expansion by the current flow, rebuild the averaged normal-equation
    terms G (2x2) and h (2-vector), box-average them over window_size, and
    solve for the total displacement. Near-singular G (det < 1e-12) falls back
    per pixel: rank-1 G (straight-edge neighborhoods) gets the least-norm
    normal-flow solve; structureless G keeps the previous estimate.
    """
    params = params or FlowParams()
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape:
        raise ValueError("frame dimension mismatch: %s vs %s" % (prev.shape, nxt.shape))
    if prev.ndim != 2:
        raise ValueError("estimate_flow expects 2-d grayscale frames")

    h, w = prev.shape
    sizes = _level_sizes(h, w, params)
    u = v = None
    for lh, lw, s in reversed(sizes):
        # Gaussian anti-alias on the full-resolution frame, then resample.
        sigma = (1.0 / s - 1.0) * 0.5
        if sigma > 1e-3:
            p_img = ndimage.gaussian_filter(prev, sigma, mode="nearest", truncate=2.5)
            n_img = ndimage.gaussian_filter(nxt, sigma, mode="nearest", truncate=2.5)
            p_img = _resize_bilinear(p_img, lh, lw)
            n_img = _resize_bilinear(n_img, lh, lw)
        else:
            p_img, n_img = prev, nxt

        if u is None:
            u = np.zeros((lh, lw))
            v = np.zeros((lh, lw))
        else:
            scale_up = 1.0 / params.pyramid_scale
            u = _resize_bilinear(u, lh, lw) * scale_up
            v = _resize_bilinear(v, lh, lw) * scale_up

        e1 = polynomial_expansion(p_img, params.poly_n, params.poly_sigma)
        e2 = polynomial_expansion(n_img, params.poly_n, params.poly_sigma)
        yy, xx = np.meshgrid(np.arange(lh, dtype=np.float64),
                             np.arange(lw, dtype=np.float64), indexing="ij")

        for _ in range(params.iterations):
            wy = np.clip(yy + v, 0, lh - 1)
            wx = np.clip(xx + u, 0, lw - 1)
            coords = [wy, wx]
            w_axx = ndimage.map_coordinates(e2.a_xx, coords, order=1, mode="nearest")
            w_axy = ndimage.map_coordinates(e2.a_xy, coords, order=1, mode="nearest")
            w_ayy = ndimage.map_coordinates(e2.a_yy, coords, order=1, mode="nearest")
            w_bx = ndimage.map_coordinates(e2.b_x, coords, order=1, mode="nearest")
            w_by = ndimage.map_coordinates(e2.b_y, coords, order=1, mode="nearest")

            axx = 0.5 * (e1.a_xx + w_axx)
            axy = 0.5 * (e1.a_xy + w_axy)
            ayy = 0.5 * (e1.a_yy + w_ayy)
            dbx = -0.5 * (w_bx - e1.b_x) + axx * u + axy * v
            dby = -0.5 * (w_by - e1.b_y) + axy * u + ayy * v

            g11 = axx * axx + axy * axy
            g12 = axy * (axx + ayy)
            g22 = ayy * ayy + axy * axy
            h1 = axx * dbx + axy * dby
            h2 = axy * dbx + ayy * dby

            size = params.window_size
            g11 = ndimage.uniform_filter(g11, size, mode="nearest")
            g12 = ndimage.uniform_filter(g12, size, mode="nearest")
            g22 = ndimage.uniform_filter(g22, size, mode="nearest")
            h1 = ndimage.uniform_filter(h1, size, mode="nearest")
            h2 = ndimage.uniform_filter(h2, size, mode="nearest")

            det = g11 * g22 - g12 * g12
            full = det > 1e-12
            # Aperture problem: a structure like a straight edge makes G
            # rank 1 (det ~ 0 with nonzero trace). The least-norm solution
            # via the rank-1 pseudoinverse, d = G h / trace(G)^2, recovers
            # the flow component along the informative direction instead of
            # giving up. Pixels with no structure at all keep their previous
            # estimate (zero increment).
            tr = g11 + g22
            rank1 = ~full & (tr * tr > 1e-12)
            safe_det = np.where(full, det, 1.0)
            safe_tr2 = np.where(rank1, tr * tr, 1.0)
            u = np.where(full, (g22 * h1 - g12 * h2) / safe_det,
                         np.where(rank1, (g11 * h1 + g12 * h2) / safe_tr2, u))
            v = np.where(full, (g11 * h2 - g12 * h1) / safe_det,
                         np.where(rank1, (g12 * h1 + g22 * h2) / safe_tr2, v))

    return FlowField(u=u, v=v)


def rgb_to_gray(frame):
    """Luminance: 0.299 R + 0.587 G + 0.114 B.

    Computed as (299 R + 587 G + 114 B) / 1000 so equal channels map to their
    exact shared value.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError("rgb_to_gray expects an H x W x 3 image")
    return frame @ np.array([299.0, 587.0, 114.0]) / 1000.0


def encode_flow_rgb(flow, max_magnitude):
    """Map a flow field onto the RGB color wheel as an H x W x 3 uint8 image.

    Hue is the flow direction (0 rad, rightward, maps to red), saturation is
    magnitude relative to max_magnitude (clamped at 1), value is 1. Zero flow
    is therefore pure white.
    """
    if max_magnitude <= 0:
        raise ValueError("max_magnitude must be positive, got %r" % (max_magnitude,))
    sat = np.minimum(flow.magnitude() / float(max_magnitude), 1.0)
    hue = np.mod(np.arctan2(flow.v, flow.u), 2.0 * np.pi)

    h6 = hue / (np.pi / 3.0)
    sector = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = 1.0 - sat
    q = 1.0 - sat * f
    t = 1.0 - sat * (1.0 - f)
    one = np.ones_like(sat)
    r = np.choose(sector, [one, q, p, p, t, one])
    g = np.choose(sector, [t, one, one, q, p, p])
    b = np.choose(sector, [p, p, t, one, one, q])
    rgb = np.stack([r, g, b], axis=-1)
    return np.rint(255.0 * rgb).astype(np.uint8)


# ---------------------------------------------------------------------------
# flow cache format: magic, u32 LE width/height, row-major (u, v) float32 LE


def write_flow(path, flow):
    """Write one flow field; values are quantized to little-endian float32."""
    pairs = np.empty((flow.height, flow.width, 2), dtype="<f4")
    pairs[:, :, 0] = flow.u
    pairs[:, :, 1] = flow.v
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", flow.width, flow.height))
        fh.write(pairs.tobytes())


def read_flow(path):
    """Read a cached flow field, validating magic and size."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != FLOW_MAGIC:
        raise FlowCacheError("bad flow cache magic in %s" % (path,))
    width, height = struct.unpack("<II", blob[8:16])
    expected = 16 + 8 * width * height
    if len(blob) != expected:
        raise FlowCacheError("truncated flow cache %s: %d bytes, expected %d"
                             % (path, len(blob), expected))
    pairs = np.frombuffer(blob[16:], dtype="<f4").reshape(height, width, 2)
    return FlowField(u=pairs[:, :, 0], v=pairs[:, :, 1])
