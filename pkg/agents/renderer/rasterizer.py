"""
Soft and hard rasterization of ego-centric birdview images.

Pixel (i, j) of an R x R image has its center at normalized device coordinates
u = -1 + (2j + 1)/R (image right = ego right) and v = 1 - (2i + 1)/R (image up =
ego forward). Coverage distances are measured in those coordinates so the blend
temperature does not depend on resolution.

Soft blend per pixel:
    D_j = sigmoid(delta_j * d_j^2 / sigma)
    w_j = D_j exp(z_j / gamma) / (sum_k D_k exp(z_k / gamma) + exp(eps_bg / gamma))
    color = sum_j w_j C_j + w_bg C_bg
with z_j = (layer_j + 1) / 4 so that the background stays the farthest surface.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from SHARED.drive_sdk import autodiff as ad
from SHARED.drive_sdk.autodiff import Tensor
from SHARED.drive_sdk.config_loader import BirdviewConfig
from SHARED.drive_sdk.models import AgentAttributes, MapData

from .primitives import PALETTE, Bounds, DrawPrimitive, scene_to_primitives

# Blur radius of the soft coverage: sigmoid(-BLUR_CUTOFF) = 1e-4.
BLUR_CUTOFF = math.log(1.0 / 1e-4 - 1.0)

BACKGROUND = np.asarray(PALETTE["background"], dtype=np.float64)

Window = Tuple[int, int, int, int]


@dataclass(frozen=True)
class Birdview:
    """3 x R x R RGB image with values in [0, 1]"""
    image: Tensor

    @property
    def pixels(self) -> np.ndarray:
        return self.image.data

    @property
    def resolution(self) -> int:
        return self.image.shape[-1]


@lru_cache(maxsize=16)
def pixel_grid(resolution_px: int, extent_m: float) -> Tuple[np.ndarray, np.ndarray]:
    """Ego-frame (x forward, y left) pixel-center coordinates in meters, each (R, R)"""
    R = resolution_px
    half = extent_m / 2.0
    centers = (2.0 * np.arange(R) + 1.0) / R
    v = 1.0 - centers
    u = -1.0 + centers
    xs = np.repeat((v * half)[:, None], R, axis=1)
    ys = np.repeat((-u * half)[None, :], R, axis=0)
    xs.setflags(write=False)
    ys.setflags(write=False)
    return xs, ys


def _window(bounds: Bounds, margin_m: float, config: BirdviewConfig) -> Optional[Window]:
    """Pixel rows/cols [i0, i1) x [j0, j1) that may be touched by a primitive"""
    R = config.resolution_px
    half = config.extent_m / 2.0
    xmin, xmax, ymin, ymax = bounds
    xmin, xmax = xmin - margin_m, xmax + margin_m
    ymin, ymax = ymin - margin_m, ymax + margin_m

    def index(coord: float) -> float:
        return ((1.0 - coord / half) * R - 1.0) / 2.0

    i0 = max(int(math.floor(index(xmax))), 0)
    i1 = min(int(math.ceil(index(xmin))) + 1, R)
    j0 = max(int(math.floor(index(ymax))), 0)
    j1 = min(int(math.ceil(index(ymin))) + 1, R)
    if i0 >= i1 or j0 >= j1:
        return None
    return i0, i1, j0, j1


def _coverage(score: Tensor, cutoff: bool) -> Tensor:
    """Sigmoid coverage, tapered to exactly 0 beyond the blur radius (C1 smoothstep)"""
    sig = ad.sigmoid(score)
    if not cutoff:
        return sig
    t = ad.clip((-score - BLUR_CUTOFF / 2.0) / (BLUR_CUTOFF / 2.0), 0.0, 1.0)
    return sig * (1.0 - t * t * (3.0 - 2.0 * t))


def layer_depth(layer: float) -> float:
    return (float(layer) + 1.0) / 4.0


def blank_birdview(config: BirdviewConfig) -> Birdview:
    """Background-only image"""
    R = config.resolution_px
    return Birdview(ad.constant(np.broadcast_to(BACKGROUND[:, None, None], (3, R, R)).copy()))


def rasterize_soft(
    primitives: Sequence[DrawPrimitive],
    config: BirdviewConfig,
    cutoff: bool = True,
) -> Birdview:
    """
    Differentiable soft rasterization.

    Args:
        primitives: Primitives in the ego frame
        config: Resolution, extent and blend temperatures
        cutoff: Force coverage to 0 beyond the blur radius (enables windowing)

    Returns:
        Birdview whose image is recorded on the primitives' tape, if any
    """
    R = config.resolution_px
    xs, ys = pixel_grid(R, config.extent_m)
    to_ndc = 2.0 / config.extent_m
    scale = to_ndc * to_ndc / config.sigma_blend
    margin_m = math.sqrt(BLUR_CUTOFF * config.sigma_blend) / to_ndc + config.pixel_m

    layers: List[Tensor] = []
    depths: List[float] = []
    colors: List[Tuple[float, float, float]] = []
    for prim in primitives:
        if cutoff:
            win = _window(prim.geometry.bounds(), margin_m, config)
            if win is None:
                continue
        else:
            win = (0, R, 0, R)
        i0, i1, j0, j1 = win
        score = prim.geometry.coverage_score(xs[i0:i1, j0:j1], ys[i0:i1, j0:j1]) * scale
        cov = _coverage(score, cutoff)
        if not np.any(cov.data > 0):
            continue
        if win != (0, R, 0, R):
            cov = ad.pad(cov, ((i0, R - i1), (j0, R - j1)))
        layers.append(cov)
        depths.append(layer_depth(prim.layer))
        colors.append(prim.color)

    if not layers:
        return blank_birdview(config)

    P = len(layers)
    cov = ad.stack(layers, axis=0)
    logits = np.asarray(depths)[:, None, None] / config.gamma_blend
    bg_logit = config.eps_bg / config.gamma_blend
    # per-pixel shift; the softmax is invariant to it so it carries no gradient
    active_logits = np.where(cov.data > 0, logits, -np.inf)
    shift = np.maximum(active_logits.max(axis=0), bg_logit)
    weight = np.exp(active_logits - shift)
    bg_weight = np.exp(bg_logit - shift)

    weighted = cov * weight
    denom = weighted.sum(axis=0) + bg_weight
    palette = ad.constant(np.asarray(colors, dtype=np.float64).T)
    mixed = ad.matmul(palette, weighted.reshape(P, R * R)).reshape(3, R, R)
    image = (mixed + BACKGROUND[:, None, None] * bg_weight) / denom
    return Birdview(image)


def rasterize_hard(primitives: Sequence[DrawPrimitive], config: BirdviewConfig) -> Birdview:
    """Reference rasterizer: each pixel takes the color of the highest layer holding its center"""
    R = config.resolution_px
    xs, ys = pixel_grid(R, config.extent_m)
    image = np.broadcast_to(BACKGROUND[:, None, None], (3, R, R)).copy()
    for prim in sorted(primitives, key=lambda p: p.layer):
        win = _window(prim.geometry.bounds(), config.pixel_m, config)
        if win is None:
            continue
        i0, i1, j0, j1 = win
        inside = prim.geometry.signed_distance(xs[i0:i1, j0:j1], ys[i0:i1, j0:j1]) < 0
        region = image[:, i0:i1, j0:j1]
        region[:, inside] = np.asarray(prim.color, dtype=np.float64)[:, None]
    return Birdview(ad.constant(image))


def render_birdview(
    states,
    attributes: Sequence[AgentAttributes],
    valid: Sequence[bool],
    map_data: MapData,
    ego_index: int,
    config: BirdviewConfig,
    soft: bool = True,
) -> Birdview:
    """Build primitives for one ego and rasterize them"""
    prims = scene_to_primitives(states, attributes, valid, map_data, ego_index)
    if soft:
        return rasterize_soft(prims, config)
    return rasterize_hard(prims, config)


def render_agents(
    states,
    attributes: Sequence[AgentAttributes],
    valid: Sequence[bool],
    map_data: MapData,
    ego_indices: Sequence[int],
    config: BirdviewConfig,
    threads: Optional[int] = None,
) -> List[Birdview]:
    """
    One soft birdview per ego.

    Unrecorded inputs are rendered on a thread pool; recorded inputs share one
    tape and are rendered in order.
    """
    states = ad.as_tensor(states)

    def one(i: int) -> Birdview:
        return render_birdview(states, attributes, valid, map_data, i, config)

    if states.recorded or threads == 1 or len(ego_indices) <= 1:
        return [one(i) for i in ego_indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, ego_indices))


def to_uint8(birdview: Birdview) -> np.ndarray:
    """(R, R, 3) RGB bytes, round(255 x)"""
    x = np.clip(birdview.pixels, 0.0, 1.0)
    return np.floor(255.0 * x + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_png(birdview: Birdview, path: Union[str, Path]) -> Path:
    """Write an 8-bit RGB PNG"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rgb = to_uint8(birdview)
    if not cv2.imwrite(str(path), np.ascontiguousarray(rgb[..., ::-1])):
        raise OSError(f"could not write PNG to {path}")
    return path
