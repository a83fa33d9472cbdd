"""Twin low-rank network, the COMET baseline MLP, and their checkpoints.

Both models map a batch of inputs ``[s, F]`` with shape ``(B, n_s + n_f)`` to
``(sdot0, c)`` with shapes ``(B, n_s)`` and ``(B, n_c)``. Weights follow the
``(out, in)`` convention, so a dense layer is ``x @ W.T + b``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, ClassVar, Union

import numpy as np

from .autodiff import Node, Tape
from .seeding import substream

FORMAT_VERSION = 1
ACTIVATIONS = ("silu", "relu")
_ACT_DERIV = {"silu": "silu_prime", "relu": "relu_indicator"}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    n_s: int
    n_c: int
    n_f: int = 0
    width: int = 250
    depth_hidden: int = 2
    rank: int = 10
    activation: str = "silu"

    def __post_init__(self):
        if self.n_s < 1:
            raise ValueError(f"n_s must be >= 1, got {self.n_s}")
        if not 0 <= self.n_c < self.n_s:
            raise ValueError(f"need 0 <= n_c < n_s, got n_c={self.n_c}, n_s={self.n_s}")
        if self.n_f < 0:
            raise ValueError(f"n_f must be >= 0, got {self.n_f}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.width < self.rank:
            raise ValueError(f"width ({self.width}) must be >= rank ({self.rank})")
        if self.depth_hidden < 0:
            raise ValueError("depth_hidden must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.n_s + self.n_f


Array = Union[np.ndarray, Node]


@dataclass
class LowRankLayerParams:
    S: Array  # (width, r)
    v: Array  # (r,)
    D: Array  # (width, r)


@dataclass
class TwinNetParams:
    """Parameters of the two-path network.

    ``hidden`` layers share ``S`` and ``D`` between both paths; only the
    sdot0 path uses the singular values ``v``.
    """

    W_h0: Array
    b_h0: Array
    W_k0: Array
    b_k0: Array
    hidden: list[LowRankLayerParams]
    W_hL1: Array
    b_hL1: Array
    W_kL1: Array
    b_kL1: Array
    frozen: frozenset = field(default_factory=frozenset)

    kind: ClassVar[str] = "meta-comet"

    def named(self) -> dict[str, Array]:
        out = {"W_h0": self.W_h0, "b_h0": self.b_h0, "W_k0": self.W_k0, "b_k0": self.b_k0}
        for i, layer in enumerate(self.hidden):
            out[f"hidden.{i}.S"] = layer.S
            out[f"hidden.{i}.v"] = layer.v
            out[f"hidden.{i}.D"] = layer.D
        out.update(W_hL1=self.W_hL1, b_hL1=self.b_hL1, W_kL1=self.W_kL1, b_kL1=self.b_kL1)
        return out

    @classmethod
    def from_named(cls, named: dict[str, Array], frozen=frozenset()) -> TwinNetParams:
        depth = sum(1 for k in named if k.endswith(".S"))
        hidden = [
            LowRankLayerParams(named[f"hidden.{i}.S"], named[f"hidden.{i}.v"], named[f"hidden.{i}.D"])
            for i in range(depth)
        ]
        return cls(
            named["W_h0"], named["b_h0"], named["W_k0"], named["b_k0"], hidden,
            named["W_hL1"], named["b_hL1"], named["W_kL1"], named["b_kL1"], frozenset(frozen),
        )

    def map(self, fn: Callable[[str, Array], Array]) -> TwinNetParams:
        return type(self).from_named({k: fn(k, v) for k, v in self.named().items()}, self.frozen)


@dataclass
class CometMlpParams:
    """Five dense layers; the last one emits ``[sdot0, c]`` stacked."""

    weights: list[Array]
    biases: list[Array]
    n_s: int
    frozen: frozenset = field(default_factory=frozenset)

    kind: ClassVar[str] = "comet"

    def named(self) -> dict[str, Array]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    @classmethod
    def from_named(cls, named: dict[str, Array], frozen=frozenset(), n_s: int | None = None):
        n = sum(1 for k in named if k.startswith("W"))
        weights = [named[f"W{i}"] for i in range(n)]
        biases = [named[f"b{i}"] for i in range(n)]
        if n_s is None:
            raise ValueError("n_s is required to split COMET outputs")
        return cls(weights, biases, n_s, frozenset(frozen))

    def map(self, fn: Callable[[str, Array], Array]) -> CometMlpParams:
        return type(self).from_named({k: fn(k, v) for k, v in self.named().items()}, self.frozen, self.n_s)


Params = Union[TwinNetParams, CometMlpParams]
MODEL_KINDS = {"meta-comet": TwinNetParams, "comet": CometMlpParams}


def bind(tape: Tape, params: Params, trainable_only: bool = False) -> tuple[Params, dict[str, Node]]:
    """Put every array of ``params`` on ``tape``.

    Frozen arrays become constants; the rest become leaves. Returns the
    node-valued parameter set and the ``name -> leaf`` map.
    """
    leaves: dict[str, Node] = {}

    def put(name, arr):
        if isinstance(arr, Node):
            return arr
        if name in params.frozen:
            return tape.constant(arr)
        leaves[name] = tape.leaf(arr, name=name)
        return leaves[name]

    return params.map(put), leaves


# --------------------------------------------------------------------------
# forward passes


def _inputs(tape: Tape, s, F, n_s: int, n_f: int) -> tuple[Node, bool]:
    s = tape.lift(s)
    single = s.value.ndim == 1
    if single:
        s = s.reshape(1, -1)
    if s.shape[-1] != n_s:
        raise ValueError(f"state has dimension {s.shape[-1]}, expected n_s={n_s}")
    n_batch = s.shape[0]
    if n_f == 0:
        if F is not None and np.size(F.value if isinstance(F, Node) else F) != 0:
            raise ValueError("model takes no force input but F was given")
        return s, single
    if F is None:
        raise ValueError(f"model expects a force input of dimension {n_f}")
    F = tape.lift(F)
    if F.value.ndim == 1:
        F = F.reshape(1, -1)
    if F.shape[-1] != n_f:
        raise ValueError(f"force has dimension {F.shape[-1]}, expected n_f={n_f}")
    if F.shape[0] != n_batch:
        F = F + tape.constant(np.zeros((n_batch, n_f)))
    return tape.apply("concat_rows", [s, F], axis=1), single


def _act(tape: Tape, z: Node, activation: str) -> Node:
    return tape.apply(activation, [z])


def _act_deriv(tape: Tape, z: Node, activation: str) -> Node:
    return tape.apply(_ACT_DERIV[activation], [z])


def _dense(x: Node, W, b) -> Node:
    return x @ W.T + b


def _lift_params(tape: Tape, params: Params) -> Params:
    return params.map(lambda _, a: tape.lift(a))


def _jacobian(lin, derivs, n_batch: int) -> Node:
    """``dc/ds`` with shape ``(B, n_c, n_s)``, multiplied from the output side.

    ``lin[i]`` lists the factors of the i-th linear map in row form
    (``x -> x @ F1 @ F2``) and ``derivs[i]`` is the activation derivative
    applied after map ``i``.
    """
    M = None
    for i in reversed(range(len(lin))):
        for factor in reversed(lin[i]):
            M = factor.T if M is None else M @ factor.T
        if i > 0:
            M = M * derivs[i - 1].reshape(n_batch, 1, -1)
    return M


def _jvp(lin, derivs, tangent: Node) -> Node:
    """``(dc/ds) u`` for a batch of tangents ``u`` of shape ``(B, n_s)``."""
    t = tangent
    for i, factors in enumerate(lin):
        for factor in factors:
            t = t @ factor
        if i < len(derivs):
            t = t * derivs[i]
    return t


def _twin_graph(tape: Tape, params: TwinNetParams, s, F, activation):
    p = _lift_params(tape, params)
    n_s = p.W_hL1.shape[0]
    n_f = p.W_h0.shape[1] - n_s
    x, _ = _inputs(tape, s, F, n_s, n_f)

    h = _act(tape, _dense(x, p.W_h0, p.b_h0), activation)
    z = _dense(x, p.W_k0, p.b_k0)
    derivs = [_act_deriv(tape, z, activation)]
    lin = [(p.W_k0[:, :n_s].T,)]
    k = _act(tape, z, activation)
    for layer in p.hidden:
        gate = tape.apply("relu", [layer.v])
        h = _act(tape, ((h @ layer.D) * gate) @ layer.S.T, activation)
        z = (k @ layer.D) @ layer.S.T
        derivs.append(_act_deriv(tape, z, activation))
        lin.append((layer.D, layer.S.T))
        k = _act(tape, z, activation)
    lin.append((p.W_kL1.T,))
    sdot0 = _dense(h, p.W_hL1, p.b_hL1)
    c = _dense(k, p.W_kL1, p.b_kL1)
    return sdot0, c, lin, derivs


def _comet_graph(tape: Tape, params: CometMlpParams, s, F, activation):
    p = _lift_params(tape, params)
    n_s = p.n_s
    n_f = p.weights[0].shape[1] - n_s
    n_out = p.weights[-1].shape[0]
    x, _ = _inputs(tape, s, F, n_s, n_f)

    derivs, lin = [], []
    h = x
    last = len(p.weights) - 1
    for i, (W, b) in enumerate(zip(p.weights, p.biases)):
        z = _dense(h, W, b)
        if i == 0:
            lin.append((W[:, :n_s].T,))
        elif i < last:
            lin.append((W.T,))
        if i < last:
            derivs.append(_act_deriv(tape, z, activation))
            h = _act(tape, z, activation)
        else:
            h = z
    lin.append((p.weights[-1][n_s:n_out].T,))
    return h[:, :n_s], h[:, n_s:n_out], lin, derivs


def _graph(tape, params, s, F, activation):
    if isinstance(params, TwinNetParams):
        return _twin_graph(tape, params, s, F, activation)
    return _comet_graph(tape, params, s, F, activation)


def model_outputs(tape: Tape, params: Params, s, F=None, *, jacobian=True, activation="silu"):
    """Batched ``(sdot0, c, J)`` with ``J = dc/ds`` of shape ``(B, n_c, n_s)``.

    ``J`` is None when ``jacobian`` is false.
    """
    sdot0, c, lin, derivs = _graph(tape, params, s, F, activation)
    J = _jacobian(lin, derivs, sdot0.shape[0]) if jacobian else None
    return sdot0, c, J


def model_jvp(tape: Tape, params: Params, s, F=None, *, activation="silu"):
    """Batched ``(sdot0, J @ sdot0)``: the constants' rates along sdot0."""
    sdot0, _, lin, derivs = _graph(tape, params, s, F, activation)
    return sdot0, _jvp(lin, derivs, sdot0)


def _squeeze(tape, node, single):
    return node.reshape(node.shape[1:]) if single else node


def twin_forward(tape: Tape, params: TwinNetParams, s, F=None, activation="silu"):
    """``(sdot0, c)`` of the twin network; a 1-D ``s`` gives 1-D outputs."""
    sdot0, c, _ = model_outputs(tape, params, s, F, jacobian=False, activation=activation)
    single = np.ndim(s.value if isinstance(s, Node) else s) == 1
    return _squeeze(tape, sdot0, single), _squeeze(tape, c, single)


def comet_forward(tape: Tape, params: CometMlpParams, s, F=None, activation="silu"):
    sdot0, c, _ = model_outputs(tape, params, s, F, jacobian=False, activation=activation)
    single = np.ndim(s.value if isinstance(s, Node) else s) == 1
    return _squeeze(tape, sdot0, single), _squeeze(tape, c, single)


def constants_input_gradient(tape: Tape, params: Params, s, F=None, activation="silu") -> Node:
    """Exact ``dc/ds`` as a tape graph, shape ``(n_c, n_s)`` or ``(B, n_c, n_s)``.

    Force inputs are excluded: only the state columns of the first layer enter.
    """
    _, _, J = model_outputs(tape, params, s, F, activation=activation)
    single = np.ndim(s.value if isinstance(s, Node) else s) == 1
    return _squeeze(tape, J, single)


# --------------------------------------------------------------------------
# sizes, init, checkpoint


def count_params(config: NetworkConfig, model_kind: str) -> int:
    w, r, L = config.width, config.rank, config.depth_hidden
    n_in, n_s, n_c = config.n_in, config.n_s, config.n_c
    if model_kind == "meta-comet":
        return 2 * (n_in * w + w) + (w * n_s + n_s) + (w * n_c + n_c) + L * (2 * w * r + r)
    if model_kind == "comet":
        n_out = n_s + n_c
        return (n_in * w + w) + 3 * (w * w + w) + (w * n_out + n_out)
    raise ValueError(f"unknown model kind {model_kind!r}; expected one of {sorted(MODEL_KINDS)}")


def n_params(params: Params) -> int:
    return int(sum(np.size(a) for a in params.named().values()))


def _dense_init(rng, n_out, n_in):
    a = 1.0 / math.sqrt(n_in)
    return rng.uniform(-a, a, size=(n_out, n_in)), np.zeros(n_out)


def _semi_orthogonal(rng, n, r):
    q, _ = np.linalg.qr(rng.standard_normal((n, r)))
    return q


def init_params(config: NetworkConfig, model_kind: str, seed: int) -> Params:
    """Fresh parameters; deterministic in ``seed``.

    Dense weights are uniform in ``(-1/sqrt(fan_in), 1/sqrt(fan_in))`` with
    zero biases. Low-rank factors start with orthonormal columns and
    ``v ~ U(0.5, 1.5)``.
    """
    rng = substream(seed, "init")
    w, n_in = config.width, config.n_in
    if model_kind == "meta-comet":
        W_h0, b_h0 = _dense_init(rng, w, n_in)
        W_k0, b_k0 = _dense_init(rng, w, n_in)
        hidden = []
        for _ in range(config.depth_hidden):
            S = _semi_orthogonal(rng, w, config.rank)
            D = _semi_orthogonal(rng, w, config.rank)
            v = rng.uniform(0.5, 1.5, size=config.rank)
            hidden.append(LowRankLayerParams(S, v, D))
        W_hL1, b_hL1 = _dense_init(rng, config.n_s, w)
        W_kL1, b_kL1 = _dense_init(rng, config.n_c, w)
        return TwinNetParams(W_h0, b_h0, W_k0, b_k0, hidden, W_hL1, b_hL1, W_kL1, b_kL1)
    if model_kind == "comet":
        sizes = [n_in, w, w, w, w, config.n_s + config.n_c]
        weights, biases = [], []
        for n_i, n_o in zip(sizes[:-1], sizes[1:]):
            W, b = _dense_init(rng, n_o, n_i)
            weights.append(W)
            biases.append(b)
        return CometMlpParams(weights, biases, config.n_s)
    raise ValueError(f"unknown model kind {model_kind!r}; expected one of {sorted(MODEL_KINDS)}")


def reinit_for_phase2(params: TwinNetParams, seed: int) -> TwinNetParams:
    """Keep ``S``/``D`` (now frozen) and redraw everything else."""
    rng = substream(seed, "reinit")
    width, n_in = params.W_h0.shape
    n_s = params.W_hL1.shape[0]
    n_c = params.W_kL1.shape[0]
    W_h0, b_h0 = _dense_init(rng, width, n_in)
    W_k0, b_k0 = _dense_init(rng, width, n_in)
    hidden = [
        LowRankLayerParams(layer.S.copy(), rng.uniform(0.5, 1.5, size=np.shape(layer.v)), layer.D.copy())
        for layer in params.hidden
    ]
    W_hL1, b_hL1 = _dense_init(rng, n_s, width)
    W_kL1, b_kL1 = _dense_init(rng, n_c, width)
    frozen = frozenset(k for k in params.named() if k.endswith(".S") or k.endswith(".D"))
    return TwinNetParams(W_h0, b_h0, W_k0, b_k0, hidden, W_hL1, b_hL1, W_kL1, b_kL1, frozen)


def expected_shapes(config: NetworkConfig, model_kind: str) -> dict[str, tuple[int, ...]]:
    params = init_params(config, model_kind, 0)
    return {k: np.shape(v) for k, v in params.named().items()}


def save_checkpoint(params: Params, config: NetworkConfig, path) -> None:
    """Write a one-line JSON header, then raw little-endian float64 arrays.

    The header lists every array with its shape and byte offset relative to
    the start of the binary section, in write order.
    """
    manifest, offset = [], 0
    named = params.named()
    for name, arr in named.items():
        nbytes = int(np.size(arr)) * 8
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "model_kind": params.kind,
        "config": asdict(config),
        "frozen": sorted(params.frozen),
        "arrays": manifest,
        "payload_bytes": offset,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in named.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Params, NetworkConfig]:
    raw = Path(path).read_bytes()
    cut = raw.find(b"\n")
    if cut < 0:
        raise CheckpointError("header: missing newline terminator")
    try:
        header = json.loads(raw[:cut])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"header: invalid JSON ({exc})") from None
    payload = raw[cut + 1:]

    def need(key):
        if key not in header:
            raise CheckpointError(f"header: missing field {key!r}")
        return header[key]

    if need("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"format_version: unsupported value {header['format_version']!r}")
    kind = need("model_kind")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"model_kind: unknown value {kind!r}")
    try:
        config = NetworkConfig(**need("config"))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"config: {exc}") from None
    if len(payload) != need("payload_bytes"):
        raise CheckpointError(
            f"payload_bytes: header declares {header['payload_bytes']} bytes, file has {len(payload)}"
        )

    shapes = expected_shapes(config, kind)
    arrays = {}
    for entry in need("arrays"):
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in shapes:
            raise CheckpointError(f"arrays.{name}: not a parameter of {kind}")
        if shapes[name] != shape:
            raise CheckpointError(f"arrays.{name}: shape {shape} does not match config (expected {shapes[name]})")
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != int(np.prod(shape, dtype=int)) * 8 or start + nbytes > len(payload):
            raise CheckpointError(f"arrays.{name}: byte range out of bounds")
        arrays[name] = np.frombuffer(payload[start:start + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
    missing = set(shapes) - set(arrays)
    if missing:
        raise CheckpointError(f"arrays: missing {sorted(missing)}")

    frozen = frozenset(header.get("frozen", []))
    if kind == "comet":
        params = CometMlpParams.from_named(arrays, frozen, n_s=config.n_s)
    else:
        params = TwinNetParams.from_named(arrays, frozen)
    return params, config


def params_equal(a: Params, b: Params) -> bool:
    na, nb = a.named(), b.named()
    return na.keys() == nb.keys() and all(
        np.array_equal(np.asarray(na[k]), np.asarray(nb[k])) for k in na
    ) and a.frozen == b.frozen


def describe(params: Params) -> dict[str, Any]:
    return {k: list(np.shape(v)) for k, v in params.named().items()}
