"""Multi-modal adapter stacks.

Each adapted block holds five trainable matrices: modality-specific
down- and up-projections for the vision and text streams, plus one
cross-modal projection in bottleneck space that both streams share.
The shared matrix is the only part a federation server ever aggregates;
the other four stay local to their client.

Up-projections start at zero, so a freshly initialized stack contributes
exactly nothing and the model starts at the frozen zero-shot solution.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import rng, serialize
from .errors import ConfigError, ContractError, ProtocolError
from .tensorcore import Tensor, gelu, matmul, scale, transpose

# Container part codes (serialization contract).
PART_DOWN_V = 0
PART_UP_V = 1
PART_DOWN_T = 2
PART_UP_T = 3
PART_SHARED = 4

_LOCAL_PARTS = (PART_DOWN_V, PART_UP_V, PART_DOWN_T, PART_UP_T)
_META = struct.Struct("<IIIId")  # start, end, r, d, alpha


@dataclass
class MMABlock:
    """Adapter weights attached to one transformer block (1-based index)."""

    index: int
    down_v: Tensor  # (r, d)
    up_v: Tensor    # (d, r)
    down_t: Tensor  # (r, d)
    up_t: Tensor    # (d, r)
    shared: Tensor  # (r, r), used by both modalities


@dataclass
class MMAStack:
    """Adapters for the contiguous upper blocks start..end of both encoders."""

    blocks: list[MMABlock]
    alpha: float
    r: int
    d: int
    start: int
    end: int

    def visual_hooks(self) -> dict[int, Callable[[Tensor], Tensor]]:
        """Per-block callbacks computing the vision-side additive term."""
        return {
            blk.index: (lambda z, b=blk: forward_visual(b, z, self.alpha))
            for blk in self.blocks
        }

    def textual_hooks(self) -> dict[int, Callable[[Tensor], Tensor]]:
        return {
            blk.index: (lambda z, b=blk: forward_text(b, z, self.alpha))
            for blk in self.blocks
        }


def init_stack(d: int, r: int, start: int, end: int, alpha: float, seed: int) -> MMAStack:
    """Build a stack whose adapters initially contribute exactly zero.

    Down and shared projections are drawn from the documented stream with
    scale 1/sqrt(d) and 1/sqrt(r); up-projections are all zeros.
    """
    if not 1 <= start <= end:
        raise ConfigError(f"block range [{start}, {end}] is invalid")
    if not 0 < r < d:
        raise ConfigError(f"bottleneck r={r} must satisfy 0 < r < d={d}")
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    gen = rng.stream(seed, rng.ADAPTER_INIT)
    blocks = []
    for j in range(start, end + 1):
        down_scale = 1.0 / np.sqrt(d)
        shared_scale = 1.0 / np.sqrt(r)
        blocks.append(
            MMABlock(
                index=j,
                down_v=Tensor(gen.normal(0.0, down_scale, size=(r, d)), trainable=True),
                up_v=Tensor(np.zeros((d, r)), trainable=True),
                down_t=Tensor(gen.normal(0.0, down_scale, size=(r, d)), trainable=True),
                up_t=Tensor(np.zeros((d, r)), trainable=True),
                shared=Tensor(gen.normal(0.0, shared_scale, size=(r, r)), trainable=True),
            )
        )
    return MMAStack(blocks=blocks, alpha=alpha, r=r, d=d, start=start, end=end)


def _bottleneck(z: Tensor, down: Tensor, up: Tensor, shared: Tensor, alpha: float) -> Tensor:
    # alpha * (up . gelu(shared . gelu(down . z^T)))^T, written row-major:
    # (tokens, d) -> (tokens, r) -> (tokens, r) -> (tokens, d).
    if z.shape[-1] != down.shape[1]:
        raise ContractError(f"hidden width {z.shape[-1]} does not match adapter d={down.shape[1]}")
    h = gelu(matmul(z, transpose(down)))
    h = gelu(matmul(h, transpose(shared)))
    return scale(matmul(h, transpose(up)), alpha)


def forward_visual(blk: MMABlock, z: Tensor, alpha: float) -> Tensor:
    """Additive vision-stream contribution for hidden states z (..., tokens, d)."""
    return _bottleneck(z, blk.down_v, blk.up_v, blk.shared, alpha)


def forward_text(blk: MMABlock, z: Tensor, alpha: float) -> Tensor:
    """Additive text-stream contribution; reuses the block's shared matrix."""
    return _bottleneck(z, blk.down_t, blk.up_t, blk.shared, alpha)


def split_params(stack: MMAStack) -> tuple[list[Tensor], list[Tensor]]:
    """Partition parameters into (server-aggregated, client-local) lists."""
    shared = [blk.shared for blk in stack.blocks]
    local = []
    for blk in stack.blocks:
        local.extend((blk.down_v, blk.up_v, blk.down_t, blk.up_t))
    return shared, local


def parameters(stack: MMAStack) -> list[Tensor]:
    """All trainable matrices in canonical (block, part) order."""
    out = []
    for blk in stack.blocks:
        out.extend((blk.down_v, blk.up_v, blk.down_t, blk.up_t, blk.shared))
    return out


def param_count(stack: MMAStack) -> int:
    return sum(p.data.size for p in parameters(stack))


def sgd_step(params: list[Tensor], grads: Mapping[Tensor, Tensor], eta: float) -> None:
    """One plain gradient-descent update, in place; unlisted params untouched."""
    if eta <= 0:
        raise ContractError(f"learning rate must be positive, got {eta}")
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        if g.data.shape != p.data.shape:
            raise ContractError(
                f"gradient shape {g.data.shape} does not match parameter {p.data.shape}"
            )
        p.data = p.data - eta * g.data


def clone_stack(stack: MMAStack) -> MMAStack:
    """Deep copy; the per-block shared matrix stays one object per block."""
    blocks = [
        MMABlock(
            index=blk.index,
            down_v=blk.down_v.copy(),
            up_v=blk.up_v.copy(),
            down_t=blk.down_t.copy(),
            up_t=blk.up_t.copy(),
            shared=blk.shared.copy(),
        )
        for blk in stack.blocks
    ]
    return MMAStack(
        blocks=blocks, alpha=stack.alpha, r=stack.r, d=stack.d,
        start=stack.start, end=stack.end,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _meta(stack: MMAStack) -> bytes:
    return _META.pack(stack.start, stack.end, stack.r, stack.d, stack.alpha)


def shared_payload(stack: MMAStack) -> bytes:
    """Wire payload holding only the shared projections, in block order."""
    entries = [
        serialize.Entry(serialize.SECTION_ADAPTER, blk.index, PART_SHARED, blk.shared.data)
        for blk in stack.blocks
    ]
    return serialize.pack(serialize.KIND_SHARED, _meta(stack), entries)


def full_payload(stack: MMAStack) -> bytes:
    """Wire payload holding all five matrices per block."""
    entries = []
    for blk in stack.blocks:
        entries.append(serialize.Entry(serialize.SECTION_ADAPTER, blk.index, PART_DOWN_V, blk.down_v.data))
        entries.append(serialize.Entry(serialize.SECTION_ADAPTER, blk.index, PART_UP_V, blk.up_v.data))
        entries.append(serialize.Entry(serialize.SECTION_ADAPTER, blk.index, PART_DOWN_T, blk.down_t.data))
        entries.append(serialize.Entry(serialize.SECTION_ADAPTER, blk.index, PART_UP_T, blk.up_t.data))
        entries.append(serialize.Entry(serialize.SECTION_ADAPTER, blk.index, PART_SHARED, blk.shared.data))
    return serialize.pack(serialize.KIND_ADAPTER, _meta(stack), entries)


def shared_matrices_from_payload(payload: bytes) -> list[np.ndarray]:
    """Extract shared projections (ascending block order) from a wire payload."""
    kind, _, entries = serialize.unpack(payload)
    if kind not in (serialize.KIND_SHARED, serialize.KIND_ADAPTER):
        raise ProtocolError(f"payload kind {kind} carries no adapter matrices")
    shared = sorted(
        (e for e in entries if e.part == PART_SHARED and e.section == serialize.SECTION_ADAPTER),
        key=lambda e: e.block,
    )
    if not shared:
        raise ProtocolError("payload contains no shared projections")
    return [e.array for e in shared]


def matrices_from_payload(payload: bytes) -> dict[tuple[int, int], np.ndarray]:
    """All adapter matrices in a payload, keyed by (block, part)."""
    kind, _, entries = serialize.unpack(payload)
    if kind not in (serialize.KIND_SHARED, serialize.KIND_ADAPTER):
        raise ProtocolError(f"payload kind {kind} carries no adapter matrices")
    return {(e.block, e.part): e.array for e in entries}


def local_part_codes() -> tuple[int, ...]:
    return _LOCAL_PARTS


def save_stack(path, stack: MMAStack) -> str:
    """Write a stack to disk; returns the content digest (hex)."""
    blob = full_payload(stack)
    with open(path, "wb") as fh:
        fh.write(blob)
    return serialize.digest_hex(blob)


def load_stack(path) -> MMAStack:
    with open(path, "rb") as fh:
        blob = fh.read()
    kind, meta, entries = serialize.unpack(blob)
    if kind != serialize.KIND_ADAPTER:
        raise ProtocolError(f"not an adapter file (kind {kind})")
    start, end, r, d, alpha = _META.unpack(meta)
    by_key = {(e.block, e.part): e.array for e in entries}
    blocks = []
    for j in range(start, end + 1):
        try:
            blocks.append(
                MMABlock(
                    index=j,
                    down_v=Tensor(by_key[(j, PART_DOWN_V)], trainable=True),
                    up_v=Tensor(by_key[(j, PART_UP_V)], trainable=True),
                    down_t=Tensor(by_key[(j, PART_DOWN_T)], trainable=True),
                    up_t=Tensor(by_key[(j, PART_UP_T)], trainable=True),
                    shared=Tensor(by_key[(j, PART_SHARED)], trainable=True),
                )
            )
        except KeyError as exc:
            raise ProtocolError(f"adapter file missing matrix for block {j}") from exc
    return MMAStack(blocks=blocks, alpha=alpha, r=r, d=d, start=start, end=end)
