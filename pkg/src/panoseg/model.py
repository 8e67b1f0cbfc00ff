"""Encoders, stacked PSC blocks, decoder and checkpoint I/O.

Frames are ``(H, W, 3)`` uint8 arrays and instance masks ``(H, W)`` uint8
label maps. Both encoders are non-overlapping patch embeddings, so a frame
rolled by a multiple of the patch size yields an exactly rolled token map;
no positional encoding is added anywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import AttentionParams, PSCConfig, dense_cross_attention, multi_head_psc
from .errors import ConfigError, DimensionError, FormatError, InputError, UsageError
from .tensor import Tensor, add, add_bias, gelu, layer_norm, matmul, reshape, transpose

CKPT_MAGIC = "PSCFORMER-CKPT v1"


@dataclass
class BlockParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    psc_attn: AttentionParams | None
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    norms: dict[str, tuple[Tensor, Tensor]]


class ModelParams:
    """Configuration plus an ordered name -> Tensor mapping of weights."""

    def __init__(self, cfg: PSCConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(cfg)
        if list(tensors) != list(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            if missing or extra:
                raise ConfigError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
            tensors = {name: tensors[name] for name in expected}
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.cfg = cfg
        self.tensors = tensors
        self._blocks = [self._make_block(i) for i in range(cfg.num_blocks)]

    def _attn(self, prefix: str) -> AttentionParams:
        t = self.tensors
        return AttentionParams(t[f"{prefix}.wq"], t[f"{prefix}.wk"], t[f"{prefix}.wv"], t[f"{prefix}.wo"])

    def _make_block(self, i: int) -> BlockParams:
        t = self.tensors
        pre = f"blocks.{i}"
        norms = {
            key: (t[f"{pre}.{key}.gain"], t[f"{pre}.{key}.bias"])
            for key in _norm_names(self.cfg)
        }
        return BlockParams(
            self_attn=self._attn(f"{pre}.self_attn"),
            cross_attn=self._attn(f"{pre}.cross_attn"),
            psc_attn=None if self.cfg.psc_mode == "none" else self._attn(f"{pre}.psc_attn"),
            ffn_w1=t[f"{pre}.ffn.w1"],
            ffn_b1=t[f"{pre}.ffn.b1"],
            ffn_w2=t[f"{pre}.ffn.w2"],
            ffn_b2=t[f"{pre}.ffn.b2"],
            norms=norms,
        )

    @property
    def blocks(self) -> list[BlockParams]:
        return self._blocks

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self


def _norm_names(cfg: PSCConfig) -> list[str]:
    names = ["norm_self", "norm_cross"]
    if cfg.psc_mode != "none":
        names.append("norm_prev")
    names.append("norm_ffn")
    return names


def param_shapes(cfg: PSCConfig) -> dict[str, tuple[int, ...]]:
    c, p, k = cfg.channels, cfg.patch, cfg.num_labels
    shapes: dict[str, tuple[int, ...]] = {
        "query_encoder.weight": (p * p * 3, c),
        "query_encoder.bias": (c,),
        "memory_encoder.weight": (p * p * (3 + k), c),
        "memory_encoder.bias": (c,),
    }
    attn = ["self_attn", "cross_attn"] + ([] if cfg.psc_mode == "none" else ["psc_attn"])
    for i in range(cfg.num_blocks):
        pre = f"blocks.{i}"
        for a in attn:
            for w in ("wq", "wk", "wv", "wo"):
                shapes[f"{pre}.{a}.{w}"] = (c, c)
        shapes[f"{pre}.ffn.w1"] = (c, 4 * c)
        shapes[f"{pre}.ffn.b1"] = (4 * c,)
        shapes[f"{pre}.ffn.w2"] = (4 * c, c)
        shapes[f"{pre}.ffn.b2"] = (c,)
        for n in _norm_names(cfg):
            shapes[f"{pre}.{n}.gain"] = (c,)
            shapes[f"{pre}.{n}.bias"] = (c,)
    shapes["decoder.weight"] = (c, k)
    shapes["decoder.bias"] = (k,)
    return shapes


def init_params(cfg: PSCConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0; norm gains 1."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------- encoders


def _check_frame(frame: np.ndarray, patch: int) -> None:
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise InputError(f"frame must be (H, W, 3), got {frame.shape}")
    h, w = frame.shape[:2]
    if h % patch or w % patch:
        raise InputError(f"frame size {h}x{w} is not divisible by the patch size {patch}")


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """``(H, W, ch)`` -> ``(H/P * W/P, P*P*ch)``, patches in row-major order."""
    h, w, ch = image.shape
    x = image.reshape(h // patch, patch, w // patch, patch, ch).transpose(0, 2, 1, 3, 4)
    return x.reshape((h // patch) * (w // patch), patch * patch * ch)


def _frame_values(frame: np.ndarray, dtype) -> np.ndarray:
    return frame.astype(dtype) / dtype(127.5) - dtype(1.0)


def _embed(pixels: np.ndarray, weight: Tensor, bias: Tensor, grid: tuple[int, int], patch: int) -> Tensor:
    tokens = Tensor(patchify(pixels, patch), dtype=weight.dtype)
    out = add_bias(matmul(tokens, weight), bias)
    return reshape(out, (grid[0], grid[1], weight.shape[1]))


def encode_query(model: ModelParams, frame: np.ndarray) -> Tensor:
    p = model.cfg.patch
    _check_frame(frame, p)
    t = model.tensors
    dtype = t["query_encoder.weight"].dtype.type
    grid = (frame.shape[0] // p, frame.shape[1] // p)
    return _embed(_frame_values(frame, dtype), t["query_encoder.weight"], t["query_encoder.bias"], grid, p)


def one_hot(mask: np.ndarray, num_labels: int, dtype=np.float32) -> np.ndarray:
    return (mask[..., None] == np.arange(num_labels)).astype(dtype)


def encode_memory(model: ModelParams, frame: np.ndarray, mask: np.ndarray) -> Tensor:
    cfg = model.cfg
    _check_frame(frame, cfg.patch)
    if mask.shape != frame.shape[:2]:
        raise InputError(f"mask {mask.shape} does not match frame {frame.shape[:2]}")
    if mask.size and int(mask.max()) > cfg.m_max:
        raise InputError(f"mask label {int(mask.max())} exceeds m_max={cfg.m_max}")
    t = model.tensors
    dtype = t["memory_encoder.weight"].dtype.type
    pixels = np.concatenate([_frame_values(frame, dtype), one_hot(mask, cfg.num_labels, dtype)], axis=2)
    grid = (frame.shape[0] // cfg.patch, frame.shape[1] // cfg.patch)
    return _embed(pixels, t["memory_encoder.weight"], t["memory_encoder.bias"], grid, cfg.patch)


# ---------------------------------------------------------------- PSC block


def _ln(x: Tensor, norm: tuple[Tensor, Tensor]) -> Tensor:
    return layer_norm(x, norm[0], norm[1])


def _prev_branch(block: BlockParams, x: Tensor, prev: Tensor, cfg: PSCConfig) -> Tensor:
    if cfg.psc_mode == "cross":
        return dense_cross_attention(block.psc_attn, x, [prev], cfg.h)
    return multi_head_psc(block.psc_attn, x, prev, cfg)


def psc_block_forward(
    block: BlockParams,
    query: Tensor,
    ref_bank: Sequence[Tensor],
    prev: Tensor | None,
    cfg: PSCConfig,
) -> Tensor:
    """Pre-norm block: self-attention, cross-attention (+ previous-frame
    branch), then a GELU feed-forward layer, each wrapped in a residual."""
    if not ref_bank:
        raise UsageError("reference bank is empty")
    for ref in list(ref_bank) + ([prev] if prev is not None else []):
        if ref.shape != query.shape:
            raise DimensionError(f"map {ref.shape} does not match query {query.shape}")
    if cfg.psc_mode != "none" and prev is None:
        raise UsageError("the previous-frame branch needs a previous memory map")

    x = query
    n = _ln(x, block.norms["norm_self"])
    x = add(x, dense_cross_attention(block.self_attn, n, [n], cfg.h))

    cross = dense_cross_attention(block.cross_attn, _ln(x, block.norms["norm_cross"]), ref_bank, cfg.h)
    if cfg.psc_mode == "none":
        x = add(x, cross)
    elif cfg.middle == "parallel":
        branch = _prev_branch(block, _ln(x, block.norms["norm_prev"]), prev, cfg)
        x = add(x, add(cross, branch))
    else:
        x = add(x, cross)
        x = add(x, _prev_branch(block, _ln(x, block.norms["norm_prev"]), prev, cfg))

    h, w, c = x.shape
    flat = reshape(_ln(x, block.norms["norm_ffn"]), (h * w, c))
    hidden = gelu(add_bias(matmul(flat, block.ffn_w1), block.ffn_b1))
    ffn = add_bias(matmul(hidden, block.ffn_w2), block.ffn_b2)
    return add(x, reshape(ffn, (h, w, c)))


def run_blocks(model: ModelParams, query: Tensor, ref_bank: Sequence[Tensor], prev: Tensor | None) -> Tensor:
    x = query
    for block in model.blocks:
        x = psc_block_forward(block, x, ref_bank, prev, model.cfg)
    return x


# ---------------------------------------------------------------- decoder


@lru_cache(maxsize=32)
def upsample_matrix(n_in: int, factor: int, wrap: bool) -> np.ndarray:
    """Linear interpolation weights ``(n_in*factor, n_in)``.

    Output pixel ``x`` samples input coordinate ``(x + 0.5) / factor - 0.5``
    (cell centres aligned). Off-grid samples wrap around when ``wrap`` is set
    and clamp to the edge otherwise.
    """
    n_out = n_in * factor
    u = (np.arange(n_out) + 0.5) / factor - 0.5
    lo = np.floor(u).astype(int)
    frac = u - lo
    hi = lo + 1
    if wrap:
        lo, hi = lo % n_in, hi % n_in
    else:
        lo, hi = np.clip(lo, 0, n_in - 1), np.clip(hi, 0, n_in - 1)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    m.setflags(write=False)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """``(H', W', K)`` -> ``(H'*f, W'*f, K)``; the width wraps (360 degrees),
    the height clamps."""
    h, w, k = x.shape
    uh = Tensor(upsample_matrix(h, factor, False), dtype=x.dtype)
    uw = Tensor(upsample_matrix(w, factor, True), dtype=x.dtype)
    t = matmul(uh, reshape(x, (h, w * k)))
    t = reshape(transpose(reshape(t, (h * factor, w, k)), (1, 0, 2)), (w, h * factor * k))
    t = matmul(uw, t)
    return transpose(reshape(t, (w * factor, h * factor, k)), (1, 0, 2))


def decode(model: ModelParams, tokens: Tensor) -> Tensor:
    """Per-pixel label logits ``(H, W, m_max + 1)``."""
    h, w, c = tokens.shape
    t = model.tensors
    logits = add_bias(matmul(reshape(tokens, (h * w, c)), t["decoder.weight"]), t["decoder.bias"])
    return upsample_bilinear(reshape(logits, (h, w, model.cfg.num_labels)), model.cfg.patch)


def predict_logits(model: ModelParams, frame: np.ndarray, ref_bank: Sequence[Tensor], prev: Tensor | None) -> Tensor:
    return decode(model, run_blocks(model, encode_query(model, frame), ref_bank, prev))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: ModelParams, path: str | Path) -> None:
    manifest = {
        "config": asdict(model.cfg),
        "params": [
            {"name": name, "dtype": "float32", "shape": list(t.shape)} for name, t in model.tensors.items()
        ],
    }
    with open(path, "wb") as fh:
        fh.write((CKPT_MAGIC + "\n").encode())
        fh.write((json.dumps(manifest, sort_keys=True) + "\n").encode())
        for t in model.tensors.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}", path) from exc
    head, sep, rest = raw.partition(b"\n")
    if not sep or head.decode(errors="replace") != CKPT_MAGIC:
        raise FormatError(f"{path}: not a {CKPT_MAGIC} checkpoint (header {head[:40]!r})", path)
    line, sep, payload = rest.partition(b"\n")
    try:
        manifest = json.loads(line)
        cfg = PSCConfig(**manifest["config"])
        entries = manifest["params"]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: malformed manifest: {exc}", path) from exc

    expected = sum(4 * int(np.prod(e["shape"])) for e in entries)
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, manifest requires {expected}", path)
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise FormatError(f"{path}: duplicated parameter names", path)

    tensors, offset = {}, 0
    for e in entries:
        if e.get("dtype") != "float32":
            raise FormatError(f"{path}: unsupported dtype {e.get('dtype')!r} for {e['name']}", path)
        n = int(np.prod(e["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(e["shape"])
        offset += 4 * n
        tensors[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
    try:
        return ModelParams(cfg, tensors)
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}", path) from exc
