"""MLP classifiers with an explicit encoder/head boundary and per-block taps."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nd

__all__ = [
    "Network",
    "TapBundle",
    "build_mlp",
    "forward_with_taps",
    "mask_forget_logits",
    "reinit_layers",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_roundtrip",
    "CheckpointError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointDigestError",
    "CheckpointStructureError",
]

ACTIVATIONS = {"tanh": (np.tanh, nd.tanh), "relu": (lambda a: np.maximum(a, 0.0), nd.relu)}

CKPT_MAGIC = b"UNLEARNLAB-CKPT"
CKPT_VERSION = 1


def _init_layer(fan_in: int, fan_out: int, seed: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, layer])
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


class Network:
    """Affine layers ``x @ W + b``; every non-head layer is followed by the activation.

    ``layers[:-head_depth]`` form the encoder blocks whose outputs are the taps
    ``Z_0 ... Z_{L-1}``; the remaining layers form the head.
    """

    def __init__(self, input_dim: int, widths: Sequence[int], num_classes: int,
                 weights: list[np.ndarray], biases: list[np.ndarray], *,
                 head_depth: int = 1, activation: str = "tanh", init_seed: int = 0):
        self.input_dim = int(input_dim)
        self.widths = tuple(int(w) for w in widths)
        self.num_classes = int(num_classes)
        self.head_depth = int(head_depth)
        self.activation = activation
        self.init_seed = int(init_seed)
        self.weights = weights
        self.biases = biases
        dims = self.dims
        if len(weights) != len(dims) - 1 or len(biases) != len(weights):
            raise ValueError("layer count does not match widths")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} has shapes {w.shape}, {b.shape}")
        if self.num_blocks < 2:
            raise ValueError("the encoder needs at least two blocks")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.widths, self.num_classes)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_blocks(self) -> int:
        return self.num_layers - self.head_depth

    def is_activated(self, layer: int) -> bool:
        return layer < self.num_layers - 1

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Network":
        return Network(self.input_dim, self.widths, self.num_classes,
                       [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                       head_depth=self.head_depth, activation=self.activation,
                       init_seed=self.init_seed)

    def digest(self, layers: Sequence[int] | None = None) -> str:
        """SHA-256 of the selected layers' parameter bytes."""
        h = hashlib.sha256()
        for i in range(self.num_layers) if layers is None else layers:
            h.update(np.ascontiguousarray(self.weights[i]).tobytes())
            h.update(np.ascontiguousarray(self.biases[i]).tobytes())
        return h.hexdigest()

    def encoder_digest(self) -> str:
        return self.digest(range(self.num_blocks))

    def head_digest(self) -> str:
        return self.digest(range(self.num_blocks, self.num_layers))

    def apply(self, x: np.ndarray, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Plain forward pass through layers ``start .. stop-1``."""
        act = ACTIVATIONS[self.activation][0]
        stop = self.num_layers if stop is None else stop
        h = np.asarray(x, dtype=np.float64)
        for i in range(start, stop):
            h = h @ self.weights[i] + self.biases[i]
            if self.is_activated(i):
                h = act(h)
        return h

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.apply(x)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.apply(x, 0, self.num_blocks)

    def predict(self, x: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.logits(x), axis=1)

    def forward(self, x, params: Sequence[nd.Tensor], start: int = 0,
                stop: int | None = None) -> nd.Tensor:
        """Differentiable forward pass; ``params`` alternate weight, bias per layer."""
        act = ACTIVATIONS[self.activation][1]
        stop = self.num_layers if stop is None else stop
        h = nd.as_tensor(x)
        for i in range(start, stop):
            h = nd.add(nd.matmul(h, params[2 * i]), params[2 * i + 1])
            if self.is_activated(i):
                h = act(h)
        return h


@dataclass(frozen=True, eq=False)
class TapBundle:
    logits: np.ndarray
    features: list[np.ndarray]


def build_mlp(input_dim: int, widths: Sequence[int], num_classes: int, seed: int, *,
              head_depth: int = 1, activation: str = "tanh") -> Network:
    """Seeded uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    widths = list(widths)
    if not widths or any(w <= 0 for w in widths) or input_dim <= 0 or num_classes < 2:
        raise ValueError("widths must be a nonempty list of positive ints")
    dims = [input_dim, *widths, num_classes]
    ws, bs = [], []
    for i in range(len(dims) - 1):
        w, b = _init_layer(dims[i], dims[i + 1], seed, i)
        ws.append(w)
        bs.append(b)
    return Network(input_dim, widths, num_classes, ws, bs, head_depth=head_depth,
                   activation=activation, init_seed=seed)


def forward_with_taps(network: Network, batch: np.ndarray) -> TapBundle:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != network.input_dim:
        raise ValueError(f"batch of shape {x.shape} does not fit input width {network.input_dim}")
    feats = []
    h = x
    for i in range(network.num_blocks):
        h = network.apply(h, i, i + 1)
        feats.append(h)
    return TapBundle(network.apply(h, network.num_blocks), feats)


def mask_forget_logits(logits: np.ndarray, forget_classes: Sequence[int]) -> np.ndarray:
    """Set the forget-class columns to ``-inf``."""
    z = np.array(logits, dtype=np.float64, copy=True)
    cols = sorted(set(int(c) for c in forget_classes))
    if not cols:
        return z
    if any(c < 0 or c >= z.shape[1] for c in cols):
        raise ValueError("forget class outside the logit width")
    if len(cols) >= z.shape[1]:
        raise ValueError("cannot mask every class")
    z[:, cols] = -np.inf
    return z


def reinit_layers(network: Network, k_from_end: int, seed: int) -> Network:
    """Fresh seeded parameters for the last ``k_from_end`` layers (head included)."""
    if not 1 <= k_from_end <= network.num_layers:
        raise ValueError(f"k must lie in [1, {network.num_layers}]")
    out = network.copy()
    dims = network.dims
    for i in range(network.num_layers - k_from_end, network.num_layers):
        out.weights[i], out.biases[i] = _init_layer(dims[i], dims[i + 1], seed, i)
    if k_from_end == network.num_layers:
        out.init_seed = seed
    return out


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


class CheckpointStructureError(CheckpointError):
    pass


def _payload(network: Network) -> bytes:
    parts = [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in network.params()]
    return b"".join(parts)


def save_checkpoint(network: Network, path: str | Path, meta: dict | None = None) -> Path:
    """Text header line (JSON) followed by the little-endian float64 payload."""
    payload = _payload(network)
    header = {
        "version": CKPT_VERSION,
        "input_dim": network.input_dim,
        "widths": list(network.widths),
        "num_classes": network.num_classes,
        "head_depth": network.head_depth,
        "activation": network.activation,
        "init_seed": network.init_seed,
        "shapes": [list(p.shape) for p in network.params()],
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = CKPT_MAGIC + b"\n" + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def read_checkpoint_header(path: str | Path) -> dict:
    return _split(Path(path).read_bytes())[0]


def _split(blob: bytes) -> tuple[dict, bytes]:
    first = blob.find(b"\n")
    if first < 0 or blob[:first] != CKPT_MAGIC:
        raise CheckpointVersionError("not a checkpoint file (bad magic)")
    second = blob.find(b"\n", first + 1)
    if second < 0:
        raise CheckpointTruncatedError("header is incomplete")
    try:
        header = json.loads(blob[first + 1:second])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointStructureError(f"header is not valid JSON: {exc}") from exc
    if header.get("version") != CKPT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {header.get('version')!r}")
    return header, blob[second + 1:]


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    header, payload = _split(Path(path).read_bytes())
    declared = header.get("payload_bytes")
    if not isinstance(declared, int):
        raise CheckpointStructureError("header lacks payload_bytes")
    if len(payload) < declared:
        raise CheckpointTruncatedError(f"payload has {len(payload)} of {declared} bytes")
    if len(payload) > declared:
        raise CheckpointStructureError("trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointDigestError("payload digest mismatch")
    try:
        dims = [header["input_dim"], *header["widths"], header["num_classes"]]
        shapes = [tuple(s) for s in header["shapes"]]
    except (KeyError, TypeError) as exc:
        raise CheckpointStructureError(f"header field missing: {exc}") from exc
    expected = []
    for i in range(len(dims) - 1):
        expected += [(dims[i], dims[i + 1]), (dims[i + 1],)]
    if shapes != expected:
        raise CheckpointStructureError("declared widths do not match parameter shapes")
    if sum(int(np.prod(s)) for s in shapes) * 8 != declared:
        raise CheckpointStructureError("declared shapes do not match payload length")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params, offset = [], 0
    for s in shapes:
        n = int(np.prod(s))
        params.append(flat[offset:offset + n].reshape(s).copy())
        offset += n
    try:
        net = Network(header["input_dim"], header["widths"], header["num_classes"],
                      params[0::2], params[1::2], head_depth=header["head_depth"],
                      activation=header["activation"], init_seed=header["init_seed"])
    except ValueError as exc:
        raise CheckpointStructureError(str(exc)) from exc
    return net, header.get("meta", {})


def checkpoint_roundtrip(network: Network, path: str | Path) -> Network:
    save_checkpoint(network, path)
    return load_checkpoint(path)[0]

