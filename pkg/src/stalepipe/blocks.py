"""Layer and block abstractions for a model split into consecutive blocks.

A model is an ordered list of layers cut at user-chosen boundaries into K
blocks. Block k owns a flat float64 parameter vector and computes the
composition of its layers; its backward pass returns the vector-Jacobian
products with respect to both its parameters and its input, which is all the
queued runtime needs. Tapes record layer *inputs* (not outputs): that is
sufficient for dense/relu/tanh and mirrors recomputation, where a fresh tape
is rebuilt from a stored input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, activation_forward, activation_vjp, check_finite, matmul


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" | "relu" | "tanh"
    in_dim: int = 0
    out_dim: int = 0
    bias: bool = True

    def __post_init__(self):
        if self.kind == "dense":
            if self.in_dim <= 0 or self.out_dim <= 0:
                raise ValueError(f"dense dims must be positive, got {self.in_dim}x{self.out_dim}")
        elif self.kind not in ("relu", "tanh"):
            raise ValueError(f"unknown layer kind: {self.kind!r}")

    @property
    def param_count(self) -> int:
        if self.kind != "dense":
            return 0
        return self.in_dim * self.out_dim + (self.out_dim if self.bias else 0)


def dense(in_dim: int, out_dim: int, bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", in_dim, out_dim, bias)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def tanh() -> LayerSpec:
    return LayerSpec("tanh")


class ForwardTape:
    """Per-layer inputs recorded during one block forward; single-use."""

    __slots__ = ("inputs", "batch_index", "consumed")

    def __init__(self, inputs: list[np.ndarray], batch_index: int = -1):
        self.inputs = inputs
        self.batch_index = batch_index
        self.consumed = False


class Block:
    """A consecutive run of layers owning one flat parameter vector."""

    def __init__(self, index: int, layers: list[LayerSpec]):
        self.index = index
        self.layers = list(layers)
        self._offsets: list[int] = []
        total = 0
        for spec in self.layers:
            self._offsets.append(total)
            total += spec.param_count
        self.params = np.zeros(total)

    @property
    def param_count(self) -> int:
        return self.params.size

    def layer_params(self, i: int) -> tuple[np.ndarray | None, np.ndarray | None]:
        """(weight matrix view, bias view) for layer i; (None, None) if non-dense."""
        spec = self.layers[i]
        if spec.kind != "dense":
            return None, None
        off = self._offsets[i]
        w = self.params[off : off + spec.in_dim * spec.out_dim].reshape(spec.in_dim, spec.out_dim)
        b = None
        if spec.bias:
            start = off + spec.in_dim * spec.out_dim
            b = self.params[start : start + spec.out_dim]
        return w, b


def block_forward(
    block: Block, h_in: np.ndarray, record: bool = False
) -> tuple[np.ndarray, ForwardTape | None]:
    """Apply the block's layers to a batch; optionally record a tape."""
    h = np.asarray(h_in, dtype=np.float64)
    inputs: list[np.ndarray] = []
    for i, spec in enumerate(block.layers):
        if record:
            inputs.append(h)
        if spec.kind == "dense":
            if h.ndim != 2 or h.shape[1] != spec.in_dim:
                raise ShapeError(
                    f"block {block.index} layer {i}: input {h.shape} "
                    f"does not match dense({spec.in_dim},{spec.out_dim})"
                )
            w, b = block.layer_params(i)
            h = matmul(h, w)
            if b is not None:
                h = h + b
        else:
            h = activation_forward(spec.kind, h)
    check_finite(h, f"block {block.index} output")
    return h, (ForwardTape(inputs) if record else None)


def block_backward(
    block: Block, tape: ForwardTape, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode products: (d out/d params)^T u and (d out/d input)^T u.

    The returned parameter gradient is flat, laid out exactly like
    ``block.params``.
    """
    if tape.consumed:
        raise RuntimeError("forward tape already consumed")
    if len(tape.inputs) != len(block.layers):
        raise ShapeError("tape does not match block layer count")
    tape.consumed = True
    u = np.asarray(upstream, dtype=np.float64)
    grad_params = np.zeros_like(block.params)
    for i in range(len(block.layers) - 1, -1, -1):
        spec = block.layers[i]
        x = tape.inputs[i]
        if spec.kind == "dense":
            if u.shape != (x.shape[0], spec.out_dim):
                raise ShapeError(
                    f"block {block.index} layer {i}: upstream {u.shape} "
                    f"does not match dense output ({x.shape[0]},{spec.out_dim})"
                )
            w, b = block.layer_params(i)
            off = block._offsets[i]
            gw = matmul(x.T, u)
            grad_params[off : off + w.size] = gw.reshape(-1)
            if b is not None:
                grad_params[off + w.size : off + w.size + spec.out_dim] = u.sum(axis=0)
            u = matmul(u, w.T)
        else:
            u = activation_vjp(spec.kind, x, u)
    return grad_params, u


class Model:
    """K consecutive blocks plus the bookkeeping to rebuild/evaluate them."""

    def __init__(self, blocks: list[Block], layers: list[LayerSpec], boundaries: list[int]):
        self.blocks = blocks
        self.layers = layers
        self.boundaries = list(boundaries)
        self.block_input_dims = _block_input_dims(layers, boundaries)

    @property
    def k(self) -> int:
        return len(self.blocks)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        for spec in reversed(self.layers):
            if spec.kind == "dense":
                return spec.out_dim
        raise ValueError("model has no dense layer")

    @property
    def param_count(self) -> int:
        return sum(b.param_count for b in self.blocks)

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        for block in self.blocks:
            h, _ = block_forward(block, h)
        return h

    def param_snapshot(self) -> list[np.ndarray]:
        return [b.params.copy() for b in self.blocks]

    def flat_params(self) -> np.ndarray:
        return np.concatenate([b.params for b in self.blocks]) if self.blocks else np.zeros(0)

    def set_flat_params(self, vec: np.ndarray) -> None:
        if vec.size != self.param_count:
            raise ShapeError(f"expected {self.param_count} params, got {vec.size}")
        off = 0
        for b in self.blocks:
            b.params[:] = vec[off : off + b.param_count]
            off += b.param_count

    def load_params(self, snapshot: list[np.ndarray]) -> None:
        for b, p in zip(self.blocks, snapshot):
            if b.params.shape != p.shape:
                raise ShapeError("snapshot does not match model")
            b.params[:] = p

    def clone(self) -> "Model":
        m = build_model(self.layers, self.boundaries)
        m.load_params(self.param_snapshot())
        return m


def _block_input_dims(layers: list[LayerSpec], boundaries: list[int]) -> list[int]:
    cuts = [0, *boundaries, len(layers)]
    width = layers[0].in_dim
    dims = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        dims.append(width)
        for spec in layers[a:b]:
            if spec.kind == "dense":
                width = spec.out_dim
    return dims


def build_model(layers: list[LayerSpec], boundaries: list[int]) -> Model:
    """Build a model from a layer list and K-1 strictly increasing split indices."""
    layers = list(layers)
    if not layers:
        raise ValueError("model needs at least one layer")
    if layers[0].kind != "dense":
        raise ValueError("first layer must be dense so the input width is known")
    boundaries = list(boundaries)
    prev = 0
    for b in boundaries:
        if b <= prev or b >= len(layers):
            raise ValueError(f"boundaries must be strictly increasing inside (0, {len(layers)}), got {boundaries}")
        prev = b
    width = layers[0].in_dim
    for i, spec in enumerate(layers):
        if spec.kind == "dense":
            if spec.in_dim != width:
                raise ShapeError(
                    f"layer {i}: dense({spec.in_dim},{spec.out_dim}) does not accept width {width}"
                )
            width = spec.out_dim
    cuts = [0, *boundaries, len(layers)]
    blocks = [Block(k, layers[a:b]) for k, (a, b) in enumerate(zip(cuts[:-1], cuts[1:]))]
    return Model(blocks, layers, boundaries)


def suggest_boundaries(layers: list[LayerSpec], k: int) -> list[int]:
    """Split indices that roughly balance per-block parameter counts.

    Advisory only; the run config's explicit boundaries are authoritative.
    """
    if k < 1 or k > len(layers):
        raise ValueError(f"cannot split {len(layers)} layers into {k} blocks")
    total = sum(spec.param_count for spec in layers)
    boundaries = []
    running = 0
    next_cut = 1
    for i, spec in enumerate(layers):
        running += spec.param_count
        if len(boundaries) < k - 1 and running >= next_cut * total / k and i + 1 < len(layers):
            boundaries.append(i + 1)
            next_cut += 1
    while len(boundaries) < k - 1:
        # degenerate fallback: cut before the trailing layers
        candidate = len(layers) - (k - 1 - len(boundaries))
        boundaries.append(max(candidate, (boundaries[-1] if boundaries else 0) + 1))
    return boundaries


def init_params(model: Model, seed: int) -> None:
    """He-uniform for dense weights feeding relu, Glorot-uniform otherwise; zero biases.

    Draws are made layer by layer over the whole model from one stream, so the
    initialization is independent of where the block boundaries fall.
    """
    from .rng import SeededRng

    rng = SeededRng(seed)
    flat_index = 0
    for block in model.blocks:
        for i, spec in enumerate(block.layers):
            if spec.kind != "dense":
                flat_index += 1
                continue
            nxt = _next_kind(model.layers, flat_index)
            if nxt == "relu":
                limit = np.sqrt(6.0 / spec.in_dim)
            else:
                limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            w, b = block.layer_params(i)
            w[:] = rng.uniform(w.size, -limit, limit).reshape(w.shape)
            if b is not None:
                b[:] = 0.0
            flat_index += 1


def _next_kind(layers: list[LayerSpec], i: int) -> str | None:
    return layers[i + 1].kind if i + 1 < len(layers) else None
