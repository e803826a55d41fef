"""Tile-based front-to-back splatting of isotropic semantic Gaussians.

Two independent compositing streams share one depth ordering:

* optical stream (opacity, radius): color, depth and silhouette
* semantic stream (semantic opacity, semantic radius): semantic embedding
  and semantic silhouette

``render`` keeps the per-tile sorted contributor lists and per-pixel final
transmittance so ``render_backward`` can walk each pixel back to front and
recover every composite weight without storing them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba as nb
import numpy as np

from .scene import (PARAM_NAMES, CameraPose, GaussianMap, Intrinsics, SemanticGaussian,
                    rotmat_grad_to_quat_grad)

TILE = 16
NEAR = 0.01
SIGMA_EXTENT = 3.0
T_EPS = 1e-4
# exp(-40) < 2**-53: skipping such terms leaves 1 - alpha, hence T, bit-identical
EXP_CUTOFF = 40.0
_EMPTY = (1 << 30, -1, 1 << 30, -1)


class RenderContractError(RuntimeError):
    pass


@dataclass
class Projected2DGaussian:
    center: np.ndarray      # pixels
    radius: float           # pixels
    sem_radius: float       # pixels
    depth: float            # meters, camera z
    index: int


@dataclass
class _Raster:
    """What the backward pass needs from a forward render."""

    pose: CameraPose
    intr: Intrinsics
    n_gaussians: int
    vis: np.ndarray          # source indices of projected Gaussians
    cam: np.ndarray          # (V, 3) camera-frame centers
    mean2d: np.ndarray       # (V, 2)
    rad2d: np.ndarray        # (V,)
    srad2d: np.ndarray       # (V,)
    depth: np.ndarray        # (V,)
    colors: np.ndarray
    semantics: np.ndarray
    opac: np.ndarray
    sopac: np.ndarray
    radii: np.ndarray
    sradii: np.ndarray
    centers: np.ndarray
    rect: np.ndarray         # (V, 8) optical + semantic tile rects
    tile_start: np.ndarray
    tile_list: np.ndarray    # indices into the visible arrays, depth sorted per tile
    n_opt: np.ndarray        # (H, W) entries consumed by the optical stream
    n_sem: np.ndarray
    t_opt: np.ndarray        # (H, W) final transmittance
    t_sem: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    silhouette: np.ndarray
    semantic: np.ndarray
    sem_silhouette: np.ndarray
    raster: Optional[_Raster] = None

    def contributions(self, y: int, x: int, semantic: bool = False):
        """Ordered ``(gaussian_index, composite_weight, transmittance_before)`` for one pixel."""
        r = self.raster
        if r is None:
            raise RenderContractError("contribution lists were not retained")
        ty, tx = y // TILE, x // TILE
        n_tx = (r.intr.width + TILE - 1) // TILE
        tile = ty * n_tx + tx
        start = r.tile_start[tile]
        count = (r.n_sem if semantic else r.n_opt)[y, x]
        out = []
        T = 1.0
        off = 4 if semantic else 0
        for k in range(start, start + count):
            j = r.tile_list[k]
            if not (r.rect[j, off] <= tx <= r.rect[j, off + 1] and r.rect[j, off + 2] <= ty <= r.rect[j, off + 3]):
                continue
            rad = r.srad2d[j] if semantic else r.rad2d[j]
            op = r.sopac[j] if semantic else r.opac[j]
            dx = float(x) - r.mean2d[j, 0]
            dy = float(y) - r.mean2d[j, 1]
            q = dx * dx + dy * dy
            r2 = rad * rad
            if q >= 2.0 * EXP_CUTOFF * r2:
                continue
            alpha = op * np.exp(-q * (0.5 / r2))
            out.append((int(r.vis[j]), alpha * T, T))
            T *= 1.0 - alpha
        return out


@dataclass
class RenderGradients:
    """dL/d(parameter) for every Gaussian plus the camera pose."""

    colors: np.ndarray
    centers: np.ndarray
    radii: np.ndarray
    opacities: np.ndarray
    semantics: np.ndarray
    sem_radii: np.ndarray
    sem_opacities: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

def _tile_rect(u, v, rad, intr: Intrinsics):
    """Inclusive tile ranges touched by the 3-sigma box; empty when x0 > x1."""
    ext = SIGMA_EXTENT * rad
    px0 = np.maximum(np.ceil(u - ext), 0)
    px1 = np.minimum(np.floor(u + ext), intr.width - 1)
    py0 = np.maximum(np.ceil(v - ext), 0)
    py1 = np.minimum(np.floor(v + ext), intr.height - 1)
    empty = (px0 > px1) | (py0 > py1)
    rect = np.stack([px0 // TILE, px1 // TILE, py0 // TILE, py1 // TILE], axis=-1)
    rect = np.where(np.isfinite(rect), rect, -1).astype(np.int64)
    rect[empty] = _EMPTY
    return rect, ~empty


def project_all(gmap: GaussianMap, pose: CameraPose, intr: Intrinsics, semantic: bool = True):
    cam = pose.world_to_camera(gmap.centers)
    z = cam[:, 2]
    front = z > NEAR
    zs = np.where(front, z, 1.0)
    u = intr.fx * cam[:, 0] / zs + intr.cx
    v = intr.fy * cam[:, 1] / zs + intr.cy
    rad = intr.fx * gmap.radii / zs
    srad = intr.fx * gmap.sem_radii / zs
    orect, ohit = _tile_rect(u, v, rad, intr)
    srect, shit = _tile_rect(u, v, srad, intr)
    if not semantic:
        srect[:] = _EMPTY
        shit[:] = False
    keep = front & (ohit | shit)
    return cam, np.stack([u, v], axis=1), rad, srad, z, np.concatenate([orect, srect], axis=1), keep


def project_gaussian(g: SemanticGaussian, pose: CameraPose, intr: Intrinsics) -> Optional[Projected2DGaussian]:
    """Pixel-space footprint of one Gaussian, or ``None`` when culled."""
    single = GaussianMap.from_gaussians([g])
    cam, mean2d, rad, srad, z, _, keep = project_all(single, pose, intr)
    if not keep[0]:
        return None
    return Projected2DGaussian(mean2d[0], float(rad[0]), float(srad[0]), float(z[0]), 0)


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

@nb.njit(cache=True)
def _bin_tiles(rect, n_tx, n_ty):
    n = rect.shape[0]
    n_tiles = n_tx * n_ty
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for j in range(n):
        tx0 = min(rect[j, 0], rect[j, 4])
        tx1 = max(rect[j, 1], rect[j, 5])
        ty0 = min(rect[j, 2], rect[j, 6])
        ty1 = max(rect[j, 3], rect[j, 7])
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * n_tx + tx + 1] += 1
    start = np.cumsum(counts)
    fill = start[:-1].copy()
    lst = np.empty(start[-1], dtype=np.int64)
    for j in range(n):
        tx0 = min(rect[j, 0], rect[j, 4])
        tx1 = max(rect[j, 1], rect[j, 5])
        ty0 = min(rect[j, 2], rect[j, 6])
        ty1 = max(rect[j, 3], rect[j, 7])
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * n_tx + tx
                lst[fill[t]] = j
                fill[t] += 1
    return start, lst


@nb.njit(cache=True, inline="always")
def _row_span(my, qmax, y0, th, tw):
    """Tile-local pixel id range covering the rows the cutoff circle reaches."""
    reach = np.sqrt(qmax)
    ya = max(0, int(np.ceil(my - reach)) - y0)
    yb = min(th - 1, int(np.floor(my + reach)) - y0)
    if ya > yb:
        return 0, 0
    return ya * tw, (yb + 1) * tw


@nb.njit(cache=True, parallel=True)
def _forward(width, height, n_tx, n_ty, tile_start, tile_list, rect, mean2d, rad2d, srad2d,
             depth, colors, semantics, opac, sopac, t_eps):
    color = np.zeros((height, width, 3))
    dep = np.zeros((height, width))
    sil = np.zeros((height, width))
    sem = np.zeros((height, width, 3))
    ssil = np.zeros((height, width))
    n_opt = np.zeros((height, width), dtype=np.int64)
    n_sem = np.zeros((height, width), dtype=np.int64)
    t_opt = np.ones((height, width))
    t_sem = np.ones((height, width))
    for tile in nb.prange(n_tx * n_ty):
        ty = tile // n_tx
        tx = tile - ty * n_tx
        x0 = tx * TILE
        y0 = ty * TILE
        tw = min(TILE, width - x0)
        th = min(TILE, height - y0)
        npx = tw * th
        px = np.empty(npx)
        py = np.empty(npx)
        for p in range(npx):
            px[p] = x0 + p % tw
            py[p] = y0 + p // tw
        T = np.ones(npx)
        Ts = np.ones(npx)
        acc = np.zeros((npx, 4))      # color rgb, depth
        sacc = np.zeros((npx, 3))
        no = np.zeros(npx, dtype=np.int64)
        ns = np.zeros(npx, dtype=np.int64)
        live_o = npx
        live_s = npx
        s0 = tile_start[tile]
        for k in range(s0, tile_start[tile + 1]):
            j = tile_list[k]
            mx = mean2d[j, 0]
            my = mean2d[j, 1]
            if live_o > 0 and rect[j, 0] <= tx <= rect[j, 1] and rect[j, 2] <= ty <= rect[j, 3]:
                r2 = rad2d[j] * rad2d[j]
                inv = 0.5 / r2
                qmax = 2.0 * EXP_CUTOFF * r2
                op = opac[j]
                c0 = colors[j, 0]
                c1 = colors[j, 1]
                c2 = colors[j, 2]
                dj = depth[j]
                pa, pb = _row_span(my, qmax, y0, th, tw)
                for p in range(pa, pb):
                    if T[p] < t_eps:
                        continue
                    dx = px[p] - mx
                    dy = py[p] - my
                    q = dx * dx + dy * dy
                    if q >= qmax:
                        continue
                    a = op * np.exp(-q * inv)
                    w = a * T[p]
                    acc[p, 0] += w * c0
                    acc[p, 1] += w * c1
                    acc[p, 2] += w * c2
                    acc[p, 3] += w * dj
                    T[p] *= 1.0 - a
                    no[p] = k - s0 + 1
                    if T[p] < t_eps:
                        live_o -= 1
            if live_s > 0 and rect[j, 4] <= tx <= rect[j, 5] and rect[j, 6] <= ty <= rect[j, 7]:
                r2 = srad2d[j] * srad2d[j]
                inv = 0.5 / r2
                qmax = 2.0 * EXP_CUTOFF * r2
                op = sopac[j]
                e0 = semantics[j, 0]
                e1 = semantics[j, 1]
                e2 = semantics[j, 2]
                pa, pb = _row_span(my, qmax, y0, th, tw)
                for p in range(pa, pb):
                    if Ts[p] < t_eps:
                        continue
                    dx = px[p] - mx
                    dy = py[p] - my
                    q = dx * dx + dy * dy
                    if q >= qmax:
                        continue
                    a = op * np.exp(-q * inv)
                    w = a * Ts[p]
                    sacc[p, 0] += w * e0
                    sacc[p, 1] += w * e1
                    sacc[p, 2] += w * e2
                    Ts[p] *= 1.0 - a
                    ns[p] = k - s0 + 1
                    if Ts[p] < t_eps:
                        live_s -= 1
            if live_o == 0 and live_s == 0:
                break
        for p in range(npx):
            y = y0 + p // tw
            x = x0 + p % tw
            color[y, x, 0] = acc[p, 0]
            color[y, x, 1] = acc[p, 1]
            color[y, x, 2] = acc[p, 2]
            dep[y, x] = acc[p, 3]
            sil[y, x] = 1.0 - T[p]
            sem[y, x, 0] = sacc[p, 0]
            sem[y, x, 1] = sacc[p, 1]
            sem[y, x, 2] = sacc[p, 2]
            ssil[y, x] = 1.0 - Ts[p]
            n_opt[y, x] = no[p]
            n_sem[y, x] = ns[p]
            t_opt[y, x] = T[p]
            t_sem[y, x] = Ts[p]
    return color, dep, sil, sem, ssil, n_opt, n_sem, t_opt, t_sem


@nb.njit(cache=True)
def _backward(width, height, n_tx, n_ty, tile_start, tile_list, rect, mean2d, rad2d, srad2d, depth,
              colors, semantics, opac, sopac, n_opt, n_sem, t_opt, t_sem,
              g_color, g_depth, g_sil, g_sem, g_ssil):
    n = mean2d.shape[0]
    d_col = np.zeros((n, 3))
    d_sem = np.zeros((n, 3))
    d_dep = np.zeros(n)
    d_op = np.zeros(n)
    d_sop = np.zeros(n)
    d_mean = np.zeros((n, 2))
    d_rad = np.zeros(n)
    d_srad = np.zeros(n)
    for tile in range(n_tx * n_ty):
        ty = tile // n_tx
        tx = tile - ty * n_tx
        x0 = tx * TILE
        y0 = ty * TILE
        tw = min(TILE, width - x0)
        th = min(TILE, height - y0)
        npx = tw * th
        s0 = tile_start[tile]
        px = np.empty(npx)
        py = np.empty(npx)
        T = np.empty(npx)
        Ts = np.empty(npx)
        end_o = np.empty(npx, dtype=np.int64)
        end_s = np.empty(npx, dtype=np.int64)
        up = np.empty((npx, 5))        # color rgb, depth, silhouette
        sup = np.empty((npx, 4))       # semantic xyz, semantic silhouette
        acc = np.zeros(npx)
        sacc = np.zeros(npx)
        last = s0
        for p in range(npx):
            y = y0 + p // tw
            x = x0 + p % tw
            px[p] = x
            py[p] = y
            T[p] = t_opt[y, x]
            Ts[p] = t_sem[y, x]
            end_o[p] = s0 + n_opt[y, x]
            end_s[p] = s0 + n_sem[y, x]
            last = max(last, end_o[p], end_s[p])
            up[p, 0] = g_color[y, x, 0]
            up[p, 1] = g_color[y, x, 1]
            up[p, 2] = g_color[y, x, 2]
            up[p, 3] = g_depth[y, x]
            up[p, 4] = g_sil[y, x]
            sup[p, 0] = g_sem[y, x, 0]
            sup[p, 1] = g_sem[y, x, 1]
            sup[p, 2] = g_sem[y, x, 2]
            sup[p, 3] = g_ssil[y, x]
        for k in range(last - 1, s0 - 1, -1):
            j = tile_list[k]
            mx = mean2d[j, 0]
            my = mean2d[j, 1]
            if rect[j, 0] <= tx <= rect[j, 1] and rect[j, 2] <= ty <= rect[j, 3]:
                r2 = rad2d[j] * rad2d[j]
                inv = 0.5 / r2
                qmax = 2.0 * EXP_CUTOFF * r2
                op = opac[j]
                c0 = colors[j, 0]
                c1 = colors[j, 1]
                c2 = colors[j, 2]
                dj = depth[j]
                gc0 = 0.0
                gc1 = 0.0
                gc2 = 0.0
                gd = 0.0
                go = 0.0
                gmx = 0.0
                gmy = 0.0
                gr = 0.0
                pa, pb = _row_span(my, qmax, y0, th, tw)
                for p in range(pa, pb):
                    if k >= end_o[p]:
                        continue
                    dx = px[p] - mx
                    dy = py[p] - my
                    q = dx * dx + dy * dy
                    if q >= qmax:
                        continue
                    G = np.exp(-q * inv)
                    a = op * G
                    T[p] = T[p] / (1.0 - a)
                    w = a * T[p]
                    val = up[p, 0] * c0 + up[p, 1] * c1 + up[p, 2] * c2 + up[p, 3] * dj + up[p, 4]
                    gc0 += up[p, 0] * w
                    gc1 += up[p, 1] * w
                    gc2 += up[p, 2] * w
                    gd += up[p, 3] * w
                    da = T[p] * val - acc[p] / (1.0 - a)
                    acc[p] += val * w
                    go += da * G
                    k2 = da * a / r2
                    gmx += k2 * dx
                    gmy += k2 * dy
                    gr += k2 * q
                d_col[j, 0] += gc0
                d_col[j, 1] += gc1
                d_col[j, 2] += gc2
                d_dep[j] += gd
                d_op[j] += go
                d_mean[j, 0] += gmx
                d_mean[j, 1] += gmy
                d_rad[j] += gr / rad2d[j]
            if rect[j, 4] <= tx <= rect[j, 5] and rect[j, 6] <= ty <= rect[j, 7]:
                r2 = srad2d[j] * srad2d[j]
                inv = 0.5 / r2
                qmax = 2.0 * EXP_CUTOFF * r2
                op = sopac[j]
                e0 = semantics[j, 0]
                e1 = semantics[j, 1]
                e2 = semantics[j, 2]
                gs0 = 0.0
                gs1 = 0.0
                gs2 = 0.0
                go = 0.0
                gmx = 0.0
                gmy = 0.0
                gr = 0.0
                pa, pb = _row_span(my, qmax, y0, th, tw)
                for p in range(pa, pb):
                    if k >= end_s[p]:
                        continue
                    dx = px[p] - mx
                    dy = py[p] - my
                    q = dx * dx + dy * dy
                    if q >= qmax:
                        continue
                    G = np.exp(-q * inv)
                    a = op * G
                    Ts[p] = Ts[p] / (1.0 - a)
                    w = a * Ts[p]
                    val = sup[p, 0] * e0 + sup[p, 1] * e1 + sup[p, 2] * e2 + sup[p, 3]
                    gs0 += sup[p, 0] * w
                    gs1 += sup[p, 1] * w
                    gs2 += sup[p, 2] * w
                    da = Ts[p] * val - sacc[p] / (1.0 - a)
                    sacc[p] += val * w
                    go += da * G
                    k2 = da * a / r2
                    gmx += k2 * dx
                    gmy += k2 * dy
                    gr += k2 * q
                d_sem[j, 0] += gs0
                d_sem[j, 1] += gs1
                d_sem[j, 2] += gs2
                d_sop[j] += go
                d_mean[j, 0] += gmx
                d_mean[j, 1] += gmy
                d_srad[j] += gr / srad2d[j]
    return d_col, d_sem, d_dep, d_op, d_sop, d_mean, d_rad, d_srad


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------

def render(gmap: GaussianMap, pose: CameraPose, intr: Intrinsics, retain: bool = True,
           semantic: bool = True) -> RenderOutput:
    """Composite both streams; ``semantic=False`` skips the semantic stream (S = 0, F_hat = 0)."""
    H, W = intr.height, intr.width
    n_tx = (W + TILE - 1) // TILE
    n_ty = (H + TILE - 1) // TILE
    cam, mean2d, rad, srad, z, rect, keep = project_all(gmap, pose, intr, semantic)
    vis = np.nonzero(keep)[0]
    # depth order, ties by storage index
    vis = vis[np.lexsort((vis, z[vis]))]
    V = {
        "cam": cam[vis], "mean2d": mean2d[vis], "rad2d": rad[vis], "srad2d": srad[vis],
        "depth": z[vis], "rect": np.ascontiguousarray(rect[vis]),
        "colors": gmap.colors[vis], "semantics": gmap.semantics[vis],
        "opac": gmap.opacities[vis], "sopac": gmap.sem_opacities[vis],
    }
    tile_start, tile_list = _bin_tiles(V["rect"], n_tx, n_ty)
    color, dep, sil, sem, ssil, n_opt, n_sem, t_opt, t_sem = _forward(
        W, H, n_tx, n_ty, tile_start, tile_list, V["rect"], V["mean2d"], V["rad2d"], V["srad2d"],
        V["depth"], V["colors"], V["semantics"], V["opac"], V["sopac"], T_EPS)
    raster = None
    if retain:
        raster = _Raster(pose=pose.copy(), intr=intr, n_gaussians=len(gmap), vis=vis,
                         radii=gmap.radii[vis], sradii=gmap.sem_radii[vis], centers=gmap.centers[vis],
                         tile_start=tile_start, tile_list=tile_list, n_opt=n_opt, n_sem=n_sem,
                         t_opt=t_opt, t_sem=t_sem, **V)
    return RenderOutput(color, dep, sil, sem, ssil, raster)


def _zeros_like_or(arr, shape):
    return np.zeros(shape) if arr is None else np.ascontiguousarray(arr, dtype=np.float64)


def render_backward(output: RenderOutput, d_color=None, d_depth=None, d_silhouette=None,
                    d_semantic=None, d_sem_silhouette=None) -> RenderGradients:
    """Adjoint of ``render``: upstream per-pixel gradients to parameter gradients.

    Missing upstream channels are treated as zero.
    """
    r = output.raster
    if r is None:
        raise RenderContractError("render_backward needs a render made with retain=True")
    H, W = r.intr.height, r.intr.width
    n_tx = (W + TILE - 1) // TILE
    gC = _zeros_like_or(d_color, (H, W, 3))
    gD = _zeros_like_or(d_depth, (H, W))
    gF = _zeros_like_or(d_silhouette, (H, W))
    gS = _zeros_like_or(d_semantic, (H, W, 3))
    gFs = _zeros_like_or(d_sem_silhouette, (H, W))
    d_col, d_sem, d_dep, d_op, d_sop, d_mean, d_rad, d_srad = _backward(
        W, H, n_tx, (H + TILE - 1) // TILE, r.tile_start, r.tile_list, r.rect, r.mean2d, r.rad2d, r.srad2d, r.depth,
        r.colors, r.semantics, r.opac, r.sopac, r.n_opt, r.n_sem, r.t_opt, r.t_sem,
        gC, gD, gF, gS, gFs)

    fx, fy = r.intr.fx, r.intr.fy
    X, Y, Z = r.cam[:, 0], r.cam[:, 1], r.cam[:, 2]
    dX = d_mean[:, 0] * fx / Z
    dY = d_mean[:, 1] * fy / Z
    dZ = (-d_mean[:, 0] * fx * X / Z ** 2 - d_mean[:, 1] * fy * Y / Z ** 2
          - d_rad * fx * r.radii / Z ** 2 - d_srad * fx * r.sradii / Z ** 2 + d_dep)
    d_cam = np.stack([dX, dY, dZ], axis=1)
    R = r.pose.R

    n = r.n_gaussians
    grads = RenderGradients(
        colors=np.zeros((n, 3)), centers=np.zeros((n, 3)), radii=np.zeros(n), opacities=np.zeros(n),
        semantics=np.zeros((n, 3)), sem_radii=np.zeros(n), sem_opacities=np.zeros(n),
        rotation=np.zeros(4), translation=np.zeros(3))
    grads.colors[r.vis] = d_col
    grads.semantics[r.vis] = d_sem
    grads.opacities[r.vis] = d_op
    grads.sem_opacities[r.vis] = d_sop
    grads.radii[r.vis] = d_rad * fx / Z
    grads.sem_radii[r.vis] = d_srad * fx / Z
    grads.centers[r.vis] = d_cam @ R
    grads.translation = d_cam.sum(axis=0)
    grads.rotation = rotmat_grad_to_quat_grad(r.pose.rotation, d_cam.T @ r.centers)
    return grads
