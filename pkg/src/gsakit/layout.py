"""Token-sequence geometry: special tokens, per-frame patch grids and pooling windows.

Attention tensors throughout the package are plain numpy arrays shaped
``[heads, tokens, dim]`` in float32 or float64. Token order is fixed:
special tokens first, then frames in input order, row-major within a frame.
Windows are numbered frame-major, then window-row, then window-col, and never
cross a frame boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DivisibilityError, IndexOutOfRange, ShapeMismatch, ZeroSizeError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


@dataclass(frozen=True)
class TokenLayout:
    num_special: int
    num_frames: int
    grid_h: int
    grid_w: int
    window_s: int

    def __post_init__(self):
        if self.num_special < 0:
            raise ZeroSizeError(f"num_special must be >= 0, got {self.num_special}")
        if self.num_frames < 1:
            raise ZeroSizeError(f"num_frames must be >= 1, got {self.num_frames}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ZeroSizeError(f"empty patch grid {self.grid_h}x{self.grid_w}")
        if self.window_s < 1:
            raise ZeroSizeError(f"window_s must be >= 1, got {self.window_s}")
        if self.grid_h % self.window_s or self.grid_w % self.window_s:
            raise DivisibilityError(
                f"grid {self.grid_h}x{self.grid_w} is not divisible by window side {self.window_s}"
            )

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def image_tokens(self) -> int:
        return self.num_frames * self.tokens_per_frame

    @property
    def total_tokens(self) -> int:
        return self.num_special + self.image_tokens

    @property
    def window_area(self) -> int:
        return self.window_s * self.window_s

    @property
    def windows_per_frame(self) -> int:
        return (self.grid_h // self.window_s) * (self.grid_w // self.window_s)

    @property
    def num_windows(self) -> int:
        return self.num_frames * self.windows_per_frame

    @cached_property
    def window_token_index(self) -> np.ndarray:
        """``[num_windows, s*s]`` image-token indices of each window, members in row-major order."""
        s = self.window_s
        wh, ww = self.grid_h // s, self.grid_w // s
        f = np.arange(self.num_frames)[:, None, None, None, None]
        wr = np.arange(wh)[None, :, None, None, None]
        wc = np.arange(ww)[None, None, :, None, None]
        r = np.arange(s)[None, None, None, :, None]
        c = np.arange(s)[None, None, None, None, :]
        idx = f * self.tokens_per_frame + (wr * s + r) * self.grid_w + wc * s + c
        idx = idx.reshape(self.num_windows, s * s).astype(np.int64)
        idx.setflags(write=False)
        return idx

    @cached_property
    def token_window_index(self) -> np.ndarray:
        """``[image_tokens]`` window index of every image token."""
        out = np.empty(self.image_tokens, dtype=np.int64)
        out[self.window_token_index] = np.arange(self.num_windows)[:, None]
        out.setflags(write=False)
        return out

    def frame_windows(self, frame: int) -> np.ndarray:
        """Window indices belonging to ``frame``, ascending."""
        if not 0 <= frame < self.num_frames:
            raise IndexOutOfRange(f"frame {frame} not in [0, {self.num_frames})")
        wpf = self.windows_per_frame
        return np.arange(frame * wpf, (frame + 1) * wpf, dtype=np.int64)

    def window_frame(self, window: np.ndarray | int) -> np.ndarray | int:
        return np.asarray(window) // self.windows_per_frame


def build_token_layout(num_special: int, num_frames: int, grid_h: int, grid_w: int, window_s: int) -> TokenLayout:
    return TokenLayout(int(num_special), int(num_frames), int(grid_h), int(grid_w), int(window_s))


def window_of_token(layout: TokenLayout, image_token_index: int) -> int:
    i = int(image_token_index)
    if not 0 <= i < layout.image_tokens:
        raise IndexOutOfRange(f"image token {i} not in [0, {layout.image_tokens})")
    s = layout.window_s
    frame, local = divmod(i, layout.tokens_per_frame)
    row, col = divmod(local, layout.grid_w)
    return frame * layout.windows_per_frame + (row // s) * (layout.grid_w // s) + col // s


def tokens_of_window(layout: TokenLayout, window_index: int) -> np.ndarray:
    w = int(window_index)
    if not 0 <= w < layout.num_windows:
        raise IndexOutOfRange(f"window {w} not in [0, {layout.num_windows})")
    return layout.window_token_index[w].copy()


def check_attn(x: np.ndarray, name: str, tokens: int | None = None) -> np.ndarray:
    """Validate an ``[heads, tokens, dim]`` float tensor and return it as an ndarray."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeMismatch(f"{name} must be [heads, tokens, dim], got shape {x.shape}")
    if x.dtype not in FLOAT_DTYPES:
        raise ShapeMismatch(f"{name} must be float32 or float64, got {x.dtype}")
    if tokens is not None and x.shape[1] != tokens:
        raise ShapeMismatch(f"{name} has {x.shape[1]} tokens, expected {tokens}")
    return x


def check_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> None:
    if q.shape[0] != k.shape[0] or k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"head counts differ: {q.shape[0]}, {k.shape[0]}, {v.shape[0]}")
    if q.shape[2] != k.shape[2]:
        raise ShapeMismatch(f"query dim {q.shape[2]} != key dim {k.shape[2]}")
    if k.shape[1] != v.shape[1]:
        raise ShapeMismatch(f"{k.shape[1]} keys but {v.shape[1]} values")
    if v.shape[2] != q.shape[2]:
        raise ShapeMismatch(f"value dim {v.shape[2]} != query dim {q.shape[2]}")
    if not (q.dtype == k.dtype == v.dtype):
        raise ShapeMismatch(f"mixed precision inputs: {q.dtype}, {k.dtype}, {v.dtype}")


def partition_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray, layout: TokenLayout):
    """Split Q/K/V into ``(special triple, image triple)`` along the token axis.

    The slices are views; concatenating them in order reproduces the inputs.
    """
    for name, x in (("Q", q), ("K", k), ("V", v)):
        check_attn(x, name, layout.total_tokens)
    check_qkv(q, k, v)
    n = layout.num_special
    special = (q[:, :n], k[:, :n], v[:, :n])
    image = (q[:, n:], k[:, n:], v[:, n:])
    return special, image
