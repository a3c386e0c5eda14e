"""Deterministic synthetic workloads and selection-stage sparsity accounting.

Random numbers come from numpy's Philox4x64-10 counter-based bit generator
keyed through ``SeedSequence``; standard normals use numpy's ziggurat
transform. Tensors are always drawn in float64 in a fixed order (X, W_Q, W_K,
W_V, W_G) and cast afterwards, so f32 and f64 workloads share their values.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields

import numpy as np

from .compression import fused_compressed_attention_topk
from .errors import ConfigParseError, GsaError
from .kernels import KernelTiling
from .layer import LayerWeights
from .layout import TokenLayout
from .params import GsaParams
from .selection import build_selection_plan, forced_exclusion_mask

PRECISIONS = {"f32": np.float32, "f64": np.float64}
DISTRIBUTIONS = ("gaussian", "clustered")


@dataclass(frozen=True)
class WorkloadConfig:
    seed: int
    layout: TokenLayout
    heads: int = 2
    dim: int = 32
    model_dim: int = 64
    precision: str = "f32"
    distribution: str = "gaussian"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise GsaError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if self.distribution not in DISTRIBUTIONS:
            raise GsaError(f"distribution must be one of {DISTRIBUTIONS}, got {self.distribution!r}")
        if min(self.heads, self.dim, self.model_dim) < 1:
            raise GsaError("heads, dim and model_dim must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise GsaError(f"seed must fit in 64 bits, got {self.seed}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for ``seed``; extra integers select an independent stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def derive_seed(seed: int, size: int) -> int:
    """Per-size seed used by the benchmark sweep."""
    return int(np.random.SeedSequence([int(seed), int(size)]).generate_state(1, np.uint64)[0])


def generate_workload(config: WorkloadConfig):
    """Token features ``X [tokens, model_dim]`` and matching :class:`LayerWeights`."""
    lay = config.layout
    rng = make_rng(config.seed)
    c, h, d = config.model_dim, config.heads, config.dim
    inv = 1.0 / math.sqrt(c)
    if config.distribution == "gaussian":
        x = rng.standard_normal((lay.total_tokens, c)) * inv
    else:
        special = rng.standard_normal((lay.num_special, c))
        centroids = rng.standard_normal((lay.num_frames, c))
        noise = rng.standard_normal((lay.num_frames, lay.tokens_per_frame, c))
        frames = centroids[:, None, :] + 0.5 * noise
        x = np.concatenate([special, frames.reshape(lay.image_tokens, c)]) * inv
    w_q = rng.standard_normal((c, h * d)) * inv
    w_k = rng.standard_normal((c, h * d)) * inv
    w_v = rng.standard_normal((c, h * d)) * inv
    w_g = rng.standard_normal((h, d, d)) / math.sqrt(d)
    dt = config.dtype
    weights = LayerWeights(w_q.astype(dt), w_k.astype(dt), w_v.astype(dt), w_g.astype(dt))
    return x.astype(dt), weights


def selection_sparsity(layout: TokenLayout, params: GsaParams) -> float:
    """Fraction of image keys an image query does NOT attend in the selection branch.

    The hybrid count comes from a plan realised on a uniform-score instance, so
    overlap between forced and dynamic windows is accounted for exactly.
    """
    nw = layout.num_windows
    if params.variant == "plain":
        per_query = min(params.top_k, nw)
    else:
        zeros = np.zeros((1, nw, 1))
        exclude = forced_exclusion_mask(layout, params.ref_stride)
        _, topk = fused_compressed_attention_topk(
            zeros, zeros, zeros, params.top_k, 1.0, KernelTiling(64, 256), exclude=exclude
        )
        plan = build_selection_plan(topk, layout, "hybrid", params.ref_stride)
        per_query = int(plan.row_lengths.max())
    return 1.0 - per_query * layout.window_area / layout.image_tokens


# ---------------------------------------------------------------------------
# flat key = value config files

_LAYOUT_KEYS = ("num_special", "num_frames", "grid_h", "grid_w", "window_s")
_PARAM_KEYS = ("top_k", "variant", "ref_stride", "block_m", "block_n")


def dump_config(config: WorkloadConfig, params: GsaParams | None = None) -> str:
    """Serialise to the flat ``key = value`` text format read by :func:`load_config`."""
    lines = [f"seed = {config.seed}"]
    lines += [f"{key} = {getattr(config.layout, key)}" for key in _LAYOUT_KEYS]
    lines += [f"{f.name} = {getattr(config, f.name)}" for f in fields(config) if f.name not in ("seed", "layout")]
    if params is not None:
        lines += [
            f"top_k = {params.top_k}",
            f"variant = {params.variant}",
            f"ref_stride = {params.ref_stride}",
            f"block_m = {params.tiling.block_m}",
            f"block_n = {params.tiling.block_n}",
        ]
    return "\n".join(lines) + "\n"


def parse_config(text: str, defaults: dict | None = None):
    """Parse config text into ``(WorkloadConfig, GsaParams)``. Missing keys take ``defaults`` then built-ins."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read_string("[gsa]\n" + text)
    except configparser.Error as exc:
        raise ConfigParseError(str(exc)) from exc
    if cp.sections() != ["gsa"]:
        raise ConfigParseError("config files are flat key = value lines; section headers are not allowed")
    raw = dict(defaults or {})
    raw.update(cp["gsa"])
    known = {"seed", "heads", "dim", "model_dim", "precision", "distribution", *_LAYOUT_KEYS, *_PARAM_KEYS}
    unknown = set(raw) - known
    if unknown:
        raise ConfigParseError(f"unknown config keys: {sorted(unknown)}")

    def num(key, default):
        try:
            return int(raw.get(key, default))
        except (TypeError, ValueError) as exc:
            raise ConfigParseError(f"{key} must be an integer, got {raw.get(key)!r}") from exc

    try:
        layout = TokenLayout(
            num("num_special", 0), num("num_frames", 1), num("grid_h", 16), num("grid_w", 16), num("window_s", 4)
        )
        config = WorkloadConfig(
            seed=num("seed", 0),
            layout=layout,
            heads=num("heads", 2),
            dim=num("dim", 32),
            model_dim=num("model_dim", 64),
            precision=str(raw.get("precision", "f32")),
            distribution=str(raw.get("distribution", "gaussian")),
        )
        params = GsaParams(
            window_s=layout.window_s,
            top_k=num("top_k", 32),
            variant=str(raw.get("variant", "plain")),
            ref_stride=num("ref_stride", 100),
            tiling=KernelTiling(num("block_m", 64), num("block_n", 64)),
        )
    except ConfigParseError:
        raise
    except GsaError as exc:
        raise ConfigParseError(str(exc)) from exc
    return config, params


def load_config(path, defaults: dict | None = None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, defaults)
