"""PNG encoding and simple grid assembly for frames, saliency maps, diffs."""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image

from .errors import DomainError


def to_uint8_image(arr: np.ndarray) -> np.ndarray:
    """(H, W) or (3, H, W) float in [0, 1] -> HxW or HxWx3 uint8."""
    a = np.asarray(arr)
    if a.ndim == 3:
        if a.shape[0] != 3:
            raise DomainError(f"expected (3, H, W), got {a.shape}")
        a = a.transpose(1, 2, 0)
    elif a.ndim != 2:
        raise DomainError(f"expected 2- or 3-dim image, got shape {a.shape}")
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def png_bytes(arr: np.ndarray, scale: int = 1) -> bytes:
    img = to_uint8_image(arr)
    if scale > 1:
        img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return buf.getvalue()


def png_base64(arr: np.ndarray, scale: int = 1) -> str:
    return base64.b64encode(png_bytes(arr, scale)).decode("ascii")


def rescaled_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a - b| stretched so the largest change maps to 1 (zeros stay zeros)."""
    d = np.abs(np.asarray(a, dtype=np.float32) - np.asarray(b, dtype=np.float32))
    peak = d.max()
    return d / peak if peak > 0 else d


def _as_rgb(img: np.ndarray) -> np.ndarray:
    return np.stack([img] * 3, axis=-1) if img.ndim == 2 else img


def image_grid(rows: list[list[np.ndarray]], pad: int = 2,
               pad_value: int = 32, scale: int = 2) -> np.ndarray:
    """Assemble uint8 cell images (HxW or HxWx3) into one RGB grid image."""
    cells = [[np.repeat(np.repeat(_as_rgb(c), scale, 0), scale, 1) for c in row]
             for row in rows]
    cell_h = max(c.shape[0] for row in cells for c in row)
    cell_w = max(c.shape[1] for row in cells for c in row)
    n_cols = max(len(row) for row in cells)
    grid_h = len(cells) * (cell_h + pad) + pad
    grid_w = n_cols * (cell_w + pad) + pad
    grid = np.full((grid_h, grid_w, 3), pad_value, dtype=np.uint8)
    for r, row in enumerate(cells):
        for c, cell in enumerate(row):
            y = pad + r * (cell_h + pad)
            x = pad + c * (cell_w + pad)
            grid[y:y + cell.shape[0], x:x + cell.shape[1]] = cell
    return grid


def save_png(arr_uint8: np.ndarray, path) -> None:
    Image.fromarray(arr_uint8).save(path, format="PNG")
