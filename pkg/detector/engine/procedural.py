"""
Procedural noise, texture fields and foreground shapes
"""
import numpy as np

from .errors import GenerationError


def _fade(t):
    """Perlin fade: 6t^5 - 15t^4 + 10t^3"""
    return t * t * t * (t * (t * 6 - 15) + 10)


def value_noise_2d(height: int, width: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Smoothly interpolated lattice noise in [0, 1]; ``scale`` is the cell size in pixels"""
    scale = max(scale, 1.0)
    gh = int(np.ceil(height / scale)) + 2
    gw = int(np.ceil(width / scale)) + 2
    grid = rng.random((gh, gw))

    y = np.linspace(0, (height - 1) / scale, height)
    x = np.linspace(0, (width - 1) / scale, width)
    yi, xi = np.floor(y).astype(int), np.floor(x).astype(int)
    yf, xf = _fade(y - yi), _fade(x - xi)

    yi_m, xi_m = np.meshgrid(yi, xi, indexing="ij")
    uy, ux = np.meshgrid(yf, xf, indexing="ij")
    v00 = grid[yi_m, xi_m]
    v10 = grid[yi_m + 1, xi_m]
    v01 = grid[yi_m, xi_m + 1]
    v11 = grid[yi_m + 1, xi_m + 1]
    top = v00 + ux * (v01 - v00)
    bottom = v10 + ux * (v11 - v10)
    return top + uy * (bottom - top)


def fbm_2d(
    height: int,
    width: int,
    rng: np.random.Generator,
    octaves: int = 4,
    base_scale: float = 16.0,
    persistence: float = 0.5,
    lacunarity: float = 2.0,
) -> np.ndarray:
    result = np.zeros((height, width))
    amplitude, total, scale = 1.0, 0.0, base_scale
    for _ in range(octaves):
        result += amplitude * value_noise_2d(height, width, scale, rng)
        total += amplitude
        amplitude *= persistence
        scale /= lacunarity
    return result / total


def texture_field(family: str, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Scalar field in [0, 1] for one texture family"""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    size = float(max(height, width))
    if family == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(angle) * xs + np.sin(angle) * ys
        ramp -= ramp.min()
        return ramp / max(ramp.max(), 1e-12)
    if family == "value_noise":
        return fbm_2d(height, width, rng, octaves=3, base_scale=size / rng.uniform(2.0, 6.0))
    if family == "stripes":
        angle = rng.uniform(0, np.pi)
        period = size / rng.uniform(3.0, 9.0)
        phase = rng.uniform(0, 2 * np.pi)
        coordinate = np.cos(angle) * xs + np.sin(angle) * ys
        return 0.5 + 0.5 * np.sin(2 * np.pi * coordinate / period + phase)
    if family == "checker":
        cell = max(1, int(round(size / rng.uniform(3.0, 8.0))))
        oy, ox = rng.integers(0, cell, size=2)
        return (((ys + oy) // cell + (xs + ox) // cell) % 2).astype(np.float64)
    raise GenerationError(f"Unknown texture family '{family}'")


def random_palette(rng: np.random.Generator, contrast: float = 0.5) -> tuple:
    base = rng.uniform(0.1, 0.9, size=3)
    other = np.clip(base + rng.uniform(-contrast, contrast, size=3), 0.0, 1.0)
    return base, other


def colorize(field: np.ndarray, palette: tuple) -> np.ndarray:
    """[H×W] field -> [3×H×W] image blending the two palette colors"""
    low, high = palette
    return low[:, None, None] + field[None] * (high - low)[:, None, None]


def _blob_radius(theta: np.ndarray, harmonics: list) -> np.ndarray:
    radius = np.ones_like(theta)
    for k, amplitude, phase in harmonics:
        radius += amplitude * np.sin(k * theta + phase)
    return radius


def _polygon_radius(theta: np.ndarray, angles: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Distance to the boundary of a star-shaped polygon along direction ``theta``"""
    theta = np.mod(theta, 2 * np.pi)
    last = angles.size - 1
    index = np.searchsorted(angles, theta, side="right") - 1
    before_first = index < 0
    index = np.where(before_first, last, index)
    following = (index + 1) % angles.size
    a0 = angles[index] - np.where(before_first, 2 * np.pi, 0.0)
    a1 = angles[following] + np.where((index == last) & ~before_first, 2 * np.pi, 0.0)
    r0, r1 = radii[index], radii[following]
    return r0 * r1 * np.sin(a1 - a0) / (r0 * np.sin(theta - a0) + r1 * np.sin(a1 - theta))


def random_shape(height: int, width: int, rng: np.random.Generator) -> tuple:
    """Center and unit-scale boundary function of a smooth blob or star polygon"""
    cy = rng.uniform(0.3, 0.7) * height
    cx = rng.uniform(0.3, 0.7) * width
    if rng.random() < 0.5:
        harmonics = [(k, rng.uniform(0.0, 0.25 / k), rng.uniform(0, 2 * np.pi)) for k in range(2, 6)]
        return cy, cx, lambda theta: _blob_radius(theta, harmonics)
    vertices = int(rng.integers(5, 10))
    angles = np.sort(np.mod(np.arange(vertices) * 2 * np.pi / vertices + rng.uniform(-0.2, 0.2, vertices), 2 * np.pi))
    radii = rng.uniform(0.7, 1.2, vertices)
    return cy, cx, lambda theta: _polygon_radius(theta, angles, radii)


def rasterize_shape(height: int, width: int, cy: float, cx: float, boundary, scale: float) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    dy, dx = ys - cy, xs - cx
    return np.hypot(dy, dx) <= scale * boundary(np.arctan2(dy, dx))


def foreground_mask(height: int, width: int, coverage: tuple, rng: np.random.Generator) -> np.ndarray:
    """Rasterised random shape whose area fraction lies inside ``coverage``.

    The shape is scaled by bisection, coverage being monotone in scale.
    """
    low, high = coverage
    if not 0.0 < low < high <= 1.0:
        raise GenerationError(f"Invalid foreground coverage range {coverage}")
    cy, cx, boundary = random_shape(height, width, rng)
    target = rng.uniform(low + 0.25 * (high - low), high - 0.25 * (high - low))
    area = float(height * width)
    lo_scale, hi_scale = 0.0, 2.0 * max(height, width)
    mask = None
    for _ in range(40):
        scale = 0.5 * (lo_scale + hi_scale)
        mask = rasterize_shape(height, width, cy, cx, boundary, scale)
        fraction = mask.sum() / area
        if low <= fraction <= high and abs(fraction - target) < 0.02:
            break
        if fraction < target:
            lo_scale = scale
        else:
            hi_scale = scale
    fraction = mask.sum() / area
    if not low <= fraction <= high:
        raise GenerationError(f"Foreground coverage {fraction:.3f} outside {coverage}")
    return mask
