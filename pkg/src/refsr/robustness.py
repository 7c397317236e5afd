"""Correspondence-robustness harness.

Rebuilds reference images under controlled scale/rotation transforms with the
exact ground-truth displacement field, then measures the average end-point
error (AEE) of predicted correspondences: either from a brute-force
nearest-patch oracle matcher (harness calibration) or from the model's
finest-stage cross-attention argmax.
"""

from __future__ import annotations

import numpy as np

from .dataset import _cubic_weight

LEVELS = ("small", "medium", "large")
SCALE_LEVELS = {"small": 0.95, "medium": 0.85, "large": 0.7}
ROTATION_LEVELS_DEG = {"small": 5.0, "medium": 15.0, "large": 30.0}


class UnsupportedModeError(ValueError):
    """Raised when a correspondence read-out needs a cross-attention branch."""


def level_magnitude(kind: str, level: str) -> float:
    if kind == "scale":
        return SCALE_LEVELS[level]
    if kind == "rotation":
        return ROTATION_LEVELS_DEG[level]
    raise ValueError(f"unknown transform kind {kind!r}")


def affine_matrix(kind: str, magnitude: float) -> np.ndarray:
    """2x2 linear part of the transform about the image center."""
    if kind == "scale":
        return np.array([[magnitude, 0.0], [0.0, magnitude]])
    if kind == "rotation":
        th = np.deg2rad(magnitude)
        return np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    if kind == "identity":
        return np.eye(2)
    raise ValueError(f"unknown transform kind {kind!r}")


def affine_flow(mat: np.ndarray, h: int, w: int) -> np.ndarray:
    """Ground-truth displacement field (H, W, 2) of p -> A(p - c) + c, as (dy, dx)."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    py, px = yy - cy, xx - cx
    ty = mat[0, 0] * py + mat[0, 1] * px
    tx = mat[1, 0] * py + mat[1, 1] * px
    return np.stack([ty - py, tx - px], axis=-1)


def affine_transform(img: np.ndarray, mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Warp ``img`` so content at p lands at A(p - c) + c; returns (warped, flow).

    Sampling is bicubic (cubic convolution, a = -0.5) with edge replication;
    the returned flow is the exact analytic displacement field.
    """
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    inv = np.linalg.inv(mat)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    py, px = yy - cy, xx - cx
    sy = inv[0, 0] * py + inv[0, 1] * px + cy
    sx = inv[1, 0] * py + inv[1, 1] * px + cx

    base_y = np.floor(sy).astype(int)
    base_x = np.floor(sx).astype(int)
    fy = sy - base_y
    fx = sx - base_x
    out = np.zeros_like(img, dtype=np.float64)
    for dy in range(-1, 3):
        wy = _cubic_weight(np.asarray(fy - dy))
        iy = np.clip(base_y + dy, 0, h - 1)
        for dx in range(-1, 3):
            wx = _cubic_weight(np.asarray(fx - dx))
            ix = np.clip(base_x + dx, 0, w - 1)
            out += (wy * wx)[..., None] * img[iy, ix]
    return np.clip(out, 0.0, 1.0), affine_flow(mat, h, w)


def affine_augment(img: np.ndarray, level: str, kind: str, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Apply a named-level scale or rotation; seed picks the rotation sign.

    Returns (transformed image, exact flow field). The identity kind returns
    the image unchanged with an all-zero field.
    """
    if kind == "identity":
        return img.copy(), np.zeros(img.shape[:2] + (2,))
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}; expected one of {LEVELS}")
    magnitude = level_magnitude(kind, level)
    if kind == "rotation":
        sign = 1.0 if np.random.default_rng(seed).integers(0, 2) == 0 else -1.0
        magnitude *= sign
    return affine_transform(img, affine_matrix(kind, magnitude))


# -- correspondence prediction --------------------------------------------------


def oracle_match(base: np.ndarray, ref: np.ndarray, patch: int = 5) -> np.ndarray:
    """Brute-force nearest-patch matcher; returns displacement field (H', W', 2).

    Every interior base patch is compared against every interior ref patch by
    SSD; ties resolve to the smallest raster index. A guarded parabolic fit of
    the SSD surface around the winner adds sub-pixel precision except for
    exact-zero matches, which stay exactly integral (identity stays at 0).
    The query grid covers positions patch//2 .. H - patch//2 - 1.
    """

    def patches(img):
        from numpy.lib.stride_tricks import sliding_window_view

        win = sliding_window_view(img, (patch, patch), axis=(0, 1))  # (H', W', C, p, p)
        hh, ww = win.shape[0], win.shape[1]
        return win.reshape(hh, ww, -1).reshape(hh * ww, -1), hh, ww

    pb, hh, ww = patches(base)
    pr, hh2, ww2 = patches(ref)
    # SSD via |a|^2 + |b|^2 - 2ab
    cross = pb @ pr.T
    na = (pb * pb).sum(axis=1)[:, None]
    nb = (pr * pr).sum(axis=1)[None, :]
    ssd = na + nb - 2.0 * cross
    np.maximum(ssd, 0.0, out=ssd)  # clamp the tiny negatives of cancellation
    best = np.argmin(ssd, axis=1)
    by, bx = np.divmod(best, ww2)
    qy, qx = np.divmod(np.arange(pb.shape[0]), ww)
    disp = np.stack([by - qy, bx - qx], axis=-1).astype(np.float64)

    def parabolic_offset(s_minus, s0, s_plus):
        denom = s_minus - 2.0 * s0 + s_plus
        if denom <= 0.0:
            return 0.0
        return float(np.clip(0.5 * (s_minus - s_plus) / denom, -0.5, 0.5))

    rows = ssd.reshape(-1, hh2, ww2)
    for q in range(disp.shape[0]):
        y, x = int(by[q]), int(bx[q])
        s0 = rows[q, y, x]
        if s0 < 1e-12:  # exact match: no refinement
            continue
        if 0 < y < hh2 - 1:
            disp[q, 0] += parabolic_offset(rows[q, y - 1, x], s0, rows[q, y + 1, x])
        if 0 < x < ww2 - 1:
            disp[q, 1] += parabolic_offset(rows[q, y, x - 1], s0, rows[q, y, x + 1])
    return disp.reshape(hh, ww, 2)


def aee(pred: np.ndarray, flow_gt: np.ndarray) -> float:
    """Mean Euclidean distance between predicted and ground-truth displacements."""
    if pred.shape != flow_gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {flow_gt.shape}")
    return float(np.mean(np.linalg.norm(pred - flow_gt, axis=-1)))


def oracle_aee(hr: np.ndarray, ref: np.ndarray, flow_gt: np.ndarray, patch: int = 5) -> float:
    """AEE of the brute-force matcher, ground truth sampled at query centers."""
    r = patch // 2
    disp = oracle_match(hr, ref, patch)
    gt = flow_gt[r : r + disp.shape[0], r : r + disp.shape[1]]
    return aee(disp, gt)


def model_correspondences(model, lr_img: np.ndarray, ref_img: np.ndarray) -> np.ndarray:
    """Displacements from finest-stage cross-attention argmax, head-averaged.

    The predicted reference position of each token is the in-window argmax of
    its cross-attention row (ties to the smallest index); positions are mapped
    back through the branch's cyclic shift, displacements wrapped to the
    symmetric range. Requires a model whose gated heads have a cross branch.
    """
    if model.cfg.ablation_mode == "self-only":
        raise UnsupportedModeError("self-only ablation has no cross-attention branch to read out")
    from .numerics import no_grad

    record: dict = {}
    with no_grad():
        model.forward(lr_img, ref_img, record=record)
    finest = f"stage{model.cfg.num_stages - 1}."
    k = model.cfg.window
    extent = model.cfg.output_size
    nw_side = extent // k
    acc = np.zeros((extent, extent, 2))
    count = 0
    for entry in record.get("attention", []):
        if entry["branch"] != "cross" or finest not in entry["tag"]:
            continue
        scores = entry["scores"]  # (nw, k^2, k^2)
        shift = entry["shift"]
        best = np.argmax(scores, axis=-1)  # (nw, k^2)
        wins = np.arange(scores.shape[0])
        wy, wx = np.divmod(wins, nw_side)
        qi = np.arange(k * k)
        qy, qx = np.divmod(qi, k)
        # shifted-frame absolute positions -> original frame (+shift mod extent)
        q_abs_y = (wy[:, None] * k + qy[None, :] + shift) % extent
        q_abs_x = (wx[:, None] * k + qx[None, :] + shift) % extent
        ky, kx = np.divmod(best, k)
        k_abs_y = (wy[:, None] * k + ky + shift) % extent
        k_abs_x = (wx[:, None] * k + kx + shift) % extent
        dy = (k_abs_y - q_abs_y + extent // 2) % extent - extent // 2
        dx = (k_abs_x - q_abs_x + extent // 2) % extent - extent // 2
        np.add.at(acc, (q_abs_y.ravel(), q_abs_x.ravel()), np.stack([dy.ravel(), dx.ravel()], axis=-1))
        count += 1
    if count == 0:
        raise UnsupportedModeError("no cross-attention scores recorded at the finest stage")
    return acc / count


def correspondence_aee(model, pair, flow_gt: np.ndarray) -> float:
    """AEE of the model's attention read-out against the exact flow field."""
    pred = model_correspondences(model, pair.lr, pair.ref)
    return aee(pred, flow_gt)
