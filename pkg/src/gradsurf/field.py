"""Implicit field MLP with an analytic input Jacobian carried through the forward pass.

The network maps R^3 -> R. `forward` returns the value together with the exact
input gradient, built layer by layer, so every loss that consumes the gradient
stays differentiable in the parameters (torch handles the reverse pass).
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import expit
from torch import nn

from .errors import ArchitectureMismatch, ConfigInvalid, CorruptCheckpoint, TapeConsumed

EPS_GRAD = 1e-12
FALLBACK_NORMAL = (0.0, 0.0, 1.0)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class FieldConfig:
    """Architecture of the field MLP.

    `hidden_layers` hidden affine+softplus layers of `hidden_width`, followed by a
    scalar output layer. The 3-vector input is re-concatenated (scaled by 1/sqrt 2)
    in front of hidden layer `skip_at`; the layer before it narrows to width - 3 so
    widths stay constant. `skip_at = 0` disables the skip.

    Parameter count for 2 <= skip_at (W = hidden_width, L = hidden_layers):
        4W + (L - 2)(W^2 + W) + (W - 3)(W + 1) + W + 1
    which is 461,054 at the defaults.
    """

    hidden_width: int = 256
    hidden_layers: int = 8
    skip_at: int = 4
    beta: float = 100.0
    init_radius: float = 0.5
    inside_positive: bool = True
    dtype: str = "float32"

    def validate(self):
        if self.hidden_layers < 1 or self.hidden_width < 4:
            raise ConfigInvalid("need hidden_layers >= 1 and hidden_width >= 4")
        if not 0 <= self.skip_at < self.hidden_layers:
            raise ConfigInvalid(f"skip_at={self.skip_at} must lie in [0, hidden_layers)")
        if self.beta <= 0 or self.init_radius <= 0:
            raise ConfigInvalid("beta and init_radius must be positive")
        if self.dtype not in _DTYPES:
            raise ConfigInvalid(f"dtype must be one of {sorted(_DTYPES)}")

    def layer_shapes(self):
        """(in, out) for each affine map, input layer first."""
        w = self.hidden_width
        dims_in = [3] + [w] * self.hidden_layers
        dims_out = [w] * self.hidden_layers + [1]
        if self.skip_at > 0:
            dims_out[self.skip_at - 1] = w - 3
        return list(zip(dims_in, dims_out))

    def parameter_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    def header(self) -> dict:
        return {f"field.{k}": v for k, v in asdict(self).items()}


def softplus(x, beta=100.0):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, beta * x) / beta


def softplus_d1(x, beta=100.0):
    return expit(beta * np.asarray(x, dtype=np.float64))


def softplus_d2(x, beta=100.0):
    z = beta * np.asarray(x, dtype=np.float64)
    # expit(z) * expit(-z) keeps full relative precision in both tails
    return beta * expit(z) * expit(-z)


class FieldNetwork(nn.Module):
    def __init__(self, config: FieldConfig = FieldConfig()):
        super().__init__()
        config.validate()
        self.config = config
        dt = config.torch_dtype
        self.weights = nn.ParameterList(
            [nn.Parameter(torch.zeros(o, i, dtype=dt)) for i, o in config.layer_shapes()])
        self.biases = nn.ParameterList(
            [nn.Parameter(torch.zeros(o, dtype=dt)) for _, o in config.layer_shapes()])

    @property
    def dtype(self):
        return self.config.torch_dtype

    def forward(self, x: torch.Tensor):
        """Return (value (B,), input gradient (B, 3))."""
        cfg = self.config
        x = x.to(self.dtype)
        b = x.shape[0]
        eye = torch.eye(3, dtype=self.dtype).expand(b, 3, 3)
        h, jac = x, eye
        last = len(self.weights) - 1
        inv_sqrt2 = 1.0 / math.sqrt(2.0)
        for layer, (w, bias) in enumerate(zip(self.weights, self.biases)):
            if cfg.skip_at and layer == cfg.skip_at:
                h = torch.cat([h, x], 1) * inv_sqrt2
                jac = torch.cat([jac, eye], 2) * inv_sqrt2
            z = F.linear(h, w, bias)
            jz = torch.matmul(jac, w.t())
            if layer < last:
                h = F.softplus(z, beta=cfg.beta)
                jac = jz * torch.sigmoid(cfg.beta * z).unsqueeze(1)
            else:
                h, jac = z, jz
        return h[:, 0], jac[:, :, 0]

    def value(self, x: torch.Tensor) -> torch.Tensor:
        """Field value only (no Jacobian); used for dense grid evaluation."""
        cfg = self.config
        x = x.to(self.dtype)
        h = x
        last = len(self.weights) - 1
        for layer, (w, bias) in enumerate(zip(self.weights, self.biases)):
            if cfg.skip_at and layer == cfg.skip_at:
                h = torch.cat([h, x], 1) / math.sqrt(2.0)
            h = F.linear(h, w, bias)
            if layer < last:
                h = F.softplus(h, beta=cfg.beta)
        return h[:, 0]

    def flat_parameters(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach().clone()

    def set_flat_parameters(self, vec):
        vec = torch.as_tensor(vec, dtype=self.dtype)
        with torch.no_grad():
            nn.utils.vector_to_parameters(vec, self.parameters())

    def clone(self) -> "FieldNetwork":
        other = FieldNetwork(self.config)
        other.load_state_dict(self.state_dict())
        return other


def init_geometric(config: FieldConfig = FieldConfig(), sign_inside_positive: Optional[bool] = None,
                   rng_seed: int = 0, calibrate: bool = True) -> FieldNetwork:
    """Network whose untrained field approximates the signed distance to a sphere.

    Hidden layers get N(0, 2/out) weights and zero biases; the output layer weights
    are N(+-sqrt(pi / fan_in), 1e-4) with bias -+radius, sign chosen so f > 0 inside
    when `inside_positive`. With `calibrate`, the output layer is then rescaled and
    shifted so the mean radial slope on the radius-`init_radius` sphere is exactly
    -+1 and the mean value there is 0 (softplus offsets otherwise shrink the sphere).
    """
    if sign_inside_positive is not None and sign_inside_positive != config.inside_positive:
        config = FieldConfig(**{**asdict(config), "inside_positive": sign_inside_positive})
    net = FieldNetwork(config)
    gen = torch.Generator().manual_seed(int(rng_seed) & 0x7FFFFFFFFFFFFFFF)
    sign = -1.0 if config.inside_positive else 1.0
    last = len(net.weights) - 1
    with torch.no_grad():
        for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
            out_dim, in_dim = w.shape
            if layer == last:
                mean = sign * math.sqrt(math.pi) / math.sqrt(in_dim)
                w.copy_(mean + 1e-4 * torch.randn(w.shape, generator=gen, dtype=torch.float64))
                b.fill_(-sign * config.init_radius)
            else:
                w.copy_(torch.randn(w.shape, generator=gen, dtype=torch.float64) * math.sqrt(2.0 / out_dim))
                b.zero_()
    if calibrate:
        _calibrate_sphere(net)
    return net


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], 1)


def _calibrate_sphere(net: FieldNetwork, samples: int = 2048):
    """Rescale the output layer so the mean radial slope on the init sphere is -+1 and
    shift its bias so the mean field value there is 0."""
    cfg = net.config
    dirs = torch.from_numpy(fibonacci_sphere(samples)).to(net.dtype)
    w, b = net.weights[-1], net.biases[-1]
    with torch.no_grad():
        b.zero_()
        v, g = net(dirs * cfg.init_radius)
        slope = float((g * dirs).sum(1).mean())
        target = -1.0 if cfg.inside_positive else 1.0
        scale = abs(target / slope) if slope != 0 else 1.0
        w.mul_(scale)
        b.fill_(-scale * float(v.mean()))


def unit_normals(grad: torch.Tensor, eps: float = EPS_GRAD):
    """Normalize gradients; rows with norm <= eps fall back to +z. Returns (normals, degenerate mask)."""
    norm = grad.norm(dim=-1, keepdim=True)
    degenerate = norm[..., 0] <= eps
    safe = torch.where(degenerate.unsqueeze(-1), torch.ones_like(norm), norm)
    n = grad / safe
    if bool(degenerate.any()):
        fb = torch.tensor(FALLBACK_NORMAL, dtype=grad.dtype).expand_as(n)
        n = torch.where(degenerate.unsqueeze(-1), fb, n)
    return n, degenerate


@dataclass
class FieldEval:
    value: float
    grad: np.ndarray
    unit_normal: np.ndarray
    degenerate: bool = False


def evaluate(net, x) -> FieldEval:
    """Value, gradient and unit normal at a single point."""
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64).reshape(1, 3))
    with torch.no_grad():
        v, g = net(xt)
        n, deg = unit_normals(g)
    return FieldEval(float(v[0]), g[0].double().numpy(), n[0].double().numpy(), bool(deg[0]))


def evaluate_batch(net, x, chunk: int = 65536):
    """Vectorized evaluation: (values, grads, unit normals, degenerate count) as float64 arrays."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    vals, grads, normals = [], [], []
    deg = 0
    with torch.no_grad():
        for s in range(0, len(x), chunk):
            v, g = net(torch.from_numpy(x[s:s + chunk]))
            n, d = unit_normals(g)
            vals.append(v.double().numpy())
            grads.append(g.double().numpy())
            normals.append(n.double().numpy())
            deg += int(d.sum())
    if not vals:
        return np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)), 0
    return np.concatenate(vals), np.concatenate(grads), np.concatenate(normals), deg


class Tape:
    """One scalar loss evaluation together with the graph that produced it."""

    def __init__(self, loss: torch.Tensor, params, allow_reuse: bool = True):
        self.loss = loss
        self.params = list(params)
        self.allow_reuse = allow_reuse
        self._used = False

    def backward(self) -> torch.Tensor:
        if self._used and not self.allow_reuse:
            raise TapeConsumed("tape was already backpropagated")
        self._used = True
        if not (torch.is_tensor(self.loss) and self.loss.requires_grad):
            return torch.zeros(sum(p.numel() for p in self.params), dtype=self.params[0].dtype)
        grads = torch.autograd.grad(self.loss, self.params, retain_graph=self.allow_reuse,
                                    allow_unused=True)
        return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1)
                          for p, g in zip(self.params, grads)])


def backward(tape: Tape) -> torch.Tensor:
    return tape.backward()


_MAGIC = b"GSFIELD\x00"
_VERSION = 1
_NP_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def save_checkpoint(path, net: FieldNetwork, step: int = 0, header: Optional[dict] = None,
                    extra_arrays: Optional[dict] = None):
    """Write magic, version, key=value header text, then little-endian parameter arrays.

    `extra_arrays` (e.g. optimizer moments) follow the parameters in header order.
    """
    np_dt = _NP_DTYPES[net.config.dtype]
    arrays = {"params": net.flat_parameters().numpy()}
    for k, v in (extra_arrays or {}).items():
        arrays[k] = np.asarray(v)
    payload = b"".join(np.ascontiguousarray(a, dtype=np_dt).tobytes() for a in arrays.values())
    meta = dict(net.config.header())
    meta["step"] = int(step)
    meta.update(header or {})
    meta["sections"] = ",".join(f"{k}:{np.asarray(a).size}" for k, a in arrays.items())
    meta["payload_bytes"] = len(payload)
    meta["payload_crc32"] = zlib.crc32(payload)
    text = "".join(f"{k}={_format_value(v)}\n" for k, v in meta.items()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(text)))
        fh.write(text)
        fh.write(payload)


def _parse_scalar(text: str):
    if text in ("true", "false"):
        return text == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


@dataclass
class Checkpoint:
    config: FieldConfig
    step: int
    header: dict
    arrays: dict

    def network(self) -> FieldNetwork:
        net = FieldNetwork(self.config)
        net.set_flat_parameters(torch.from_numpy(self.arrays["params"].copy()))
        return net


def load_checkpoint(path, expect: Optional[FieldConfig] = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"{path}: cannot read ({exc.strerror or exc})") from exc
    if len(data) < 16 or data[:8] != _MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic bytes")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != _VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported checkpoint version {version}")
    if 16 + hlen > len(data):
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        text = data[16:16 + hlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptCheckpoint(f"{path}: header is not utf-8") from exc
    header = {}
    for line in text.splitlines():
        if "=" not in line:
            raise CorruptCheckpoint(f"{path}: malformed header line {line!r}")
        k, v = line.split("=", 1)
        header[k] = _parse_scalar(v)
    payload = data[16 + hlen:]
    if header.get("payload_bytes") != len(payload) or header.get("payload_crc32") != zlib.crc32(payload):
        raise CorruptCheckpoint(f"{path}: payload length or checksum mismatch")
    names = {f.name for f in fields(FieldConfig)}
    try:
        cfg = FieldConfig(**{k[6:]: v for k, v in header.items() if k.startswith("field.") and k[6:] in names})
        cfg = FieldConfig(**{**asdict(cfg), "beta": float(cfg.beta), "init_radius": float(cfg.init_radius)})
        cfg.validate()
    except (TypeError, ConfigInvalid) as exc:
        raise CorruptCheckpoint(f"{path}: invalid architecture header ({exc})") from exc
    if expect is not None:
        ours, theirs = asdict(expect), asdict(cfg)
        diff = {k: (theirs[k], ours[k]) for k in ours if ours[k] != theirs[k] and k != "init_radius"}
        if diff:
            raise ArchitectureMismatch(
                "checkpoint/config architecture differ: "
                + ", ".join(f"{k}: {a} != {b}" for k, (a, b) in diff.items()))
    np_dt = np.dtype(_NP_DTYPES[cfg.dtype])
    arrays, offset = {}, 0
    for part in str(header["sections"]).split(","):
        name, size = part.split(":")
        size = int(size)
        arrays[name] = np.frombuffer(payload, dtype=np_dt, count=size, offset=offset)
        offset += size * np_dt.itemsize
    if offset != len(payload) or arrays["params"].size != cfg.parameter_count():
        raise CorruptCheckpoint(f"{path}: parameter array length does not match architecture")
    return Checkpoint(cfg, int(header.get("step", 0)), header, arrays)
