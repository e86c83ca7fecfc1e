"""Network building blocks and head builders.

Two head families:

* ``mlp``    — Linear / ReLU stacks with `depth` hidden layers.
* ``modern`` — an input linear lifting to `width`, then pre-norm residual
  feedforward blocks computing ``x + down(relu(up(norm(x))))``, then an
  output linear. The in/out linear pair counts as one unit of depth, so a
  depth-d modern head carries d-1 residual blocks.

Spectral normalization placement ``intermediate`` never touches the first
or last linear layer of a head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat
from .errors import ConfigError, ShapeError
from .specnorm import SpectralState

LAYERNORM_EPS = 1e-5
CHECKPOINT_VERSION = 1


def orthogonal_init(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


class LinearLayer:
    """y = x W^T + b, optionally with the weight divided by its estimated
    top singular value (spectral normalization)."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray,
                 sn: SpectralState | None = None):
        out_dim, in_dim = weight.shape
        if bias.shape != (out_dim,):
            raise ShapeError(f"bias shape {bias.shape} vs weight {weight.shape}")
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)
        self.sn = sn

    @classmethod
    def create(cls, rng: np.random.Generator, in_dim: int, out_dim: int,
               gain: float = np.sqrt(2.0), small_output: bool = False,
               sn_rng: np.random.Generator | None = None) -> "LinearLayer":
        if small_output:
            w = rng.uniform(-1e-3, 1e-3, size=(out_dim, in_dim))
            b = rng.uniform(-1e-3, 1e-3, size=out_dim)
        else:
            w = orthogonal_init(rng, out_dim, in_dim, gain)
            b = np.zeros(out_dim)
        sn = None
        if sn_rng is not None:
            sn = SpectralState.create(sn_rng, out_dim, in_dim)
            sn.update(w)
        return cls(w, b, sn)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def power_step(self) -> None:
        if self.sn is not None:
            self.sn.update(self.weight.data)

    def effective_weight(self) -> np.ndarray:
        """Weight actually applied in the forward pass (numpy copy)."""
        if self.sn is None:
            return self.weight.data.copy()
        # same sigma = u^T W v the forward pass divides by, so the folded
        # matrix reproduces the layer's current function exactly
        sigma = float(self.sn.u @ self.weight.data @ self.sn.v)
        if abs(sigma) < SpectralState.SIGMA_FLOOR:
            return self.weight.data / SpectralState.SIGMA_FLOOR
        return self.weight.data / sigma

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"input width {x.shape[1]} != layer in_dim {self.in_dim}")
        w = self.weight
        if self.sn is not None:
            # sigma = u^T W v with u, v held constant; gradient flows through
            # W in both the numerator and the denominator.
            u = Tensor(self.sn.u.reshape(1, -1))
            v = Tensor(self.sn.v.reshape(-1, 1))
            sigma = u.matmul(w).matmul(v)  # (1, 1)
            if abs(float(sigma.data[0, 0])) < SpectralState.SIGMA_FLOOR:
                w = w * (1.0 / SpectralState.SIGMA_FLOOR)
            else:
                w = w / sigma
        return x.matmul(w.T) + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class LayerNorm:
    """Per-row normalization followed by a trainable affine map."""

    def __init__(self, dim: int, eps: float = LAYERNORM_EPS):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    @property
    def dim(self) -> int:
        return self.gain.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=1, keepdims=True)
        centered = x - mu
        var = centered.square().mean(axis=1, keepdims=True)
        normed = centered / (var + self.eps).sqrt()
        return normed * self.gain + self.shift

    def parameters(self):
        return [self.gain, self.shift]


class ModernBlock:
    """Pre-norm residual feedforward unit: x + down(relu(up(norm(x))))."""

    def __init__(self, norm: LayerNorm, up: LinearLayer, down: LinearLayer):
        if up.in_dim != down.out_dim or up.out_dim != down.in_dim:
            raise ShapeError("block up/down widths are inconsistent")
        self.norm = norm
        self.up = up
        self.down = down

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.up.in_dim:
            raise ShapeError(f"input width {x.shape[1]} != block width {self.up.in_dim}")
        return x + self.down.forward(self.up.forward(self.norm.forward(x)).relu())

    def parameters(self):
        return self.norm.parameters() + self.up.parameters() + self.down.parameters()


@dataclass
class NetworkSpec:
    kind: str = "modern"          # "mlp" | "modern"
    depth: int = 2
    width: int = 256
    ffn_width: int = 512          # modern only
    sn_policy: str = "none"       # "none" | "intermediate"

    def validate(self) -> None:
        if self.kind not in ("mlp", "modern"):
            raise ConfigError(f"unknown network kind {self.kind!r}")
        if self.sn_policy not in ("none", "intermediate"):
            raise ConfigError(f"unknown sn_policy {self.sn_policy!r}")
        if self.depth < 1 or self.width < 1 or self.ffn_width < 1:
            raise ConfigError("depth and widths must be >= 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "depth": self.depth, "width": self.width,
                "ffn_width": self.ffn_width, "sn_policy": self.sn_policy}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        spec = cls(**d)
        spec.validate()
        return spec


class Head:
    """A built network: an ordered list of LinearLayer / ModernBlock / "relu"
    stages, with named parameters."""

    def __init__(self, spec: NetworkSpec, in_dim: int, out_dim: int, stages: list):
        self.spec = spec
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.stages = stages

    def forward(self, x: Tensor) -> Tensor:
        for stage in self.stages:
            x = x.relu() if stage == "relu" else stage.forward(x)
        return x

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def linear_layers(self) -> list[LinearLayer]:
        out = []
        for stage in self.stages:
            if isinstance(stage, LinearLayer):
                out.append(stage)
            elif isinstance(stage, ModernBlock):
                out.extend([stage.up, stage.down])
        return out

    def power_step(self) -> None:
        for layer in self.linear_layers():
            layer.power_step()

    def parameters(self) -> list[Tensor]:
        out = []
        for stage in self.stages:
            if stage != "relu":
                out.extend(stage.parameters())
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, stage in enumerate(self.stages):
            if stage == "relu":
                continue
            if isinstance(stage, LinearLayer):
                out.append((f"stage{i}.weight", stage.weight))
                out.append((f"stage{i}.bias", stage.bias))
            elif isinstance(stage, LayerNorm):
                out.append((f"stage{i}.gain", stage.gain))
                out.append((f"stage{i}.shift", stage.shift))
            else:
                out.append((f"stage{i}.norm.gain", stage.norm.gain))
                out.append((f"stage{i}.norm.shift", stage.norm.shift))
                out.append((f"stage{i}.up.weight", stage.up.weight))
                out.append((f"stage{i}.up.bias", stage.up.bias))
                out.append((f"stage{i}.down.weight", stage.down.weight))
                out.append((f"stage{i}.down.bias", stage.down.bias))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Full head state: parameters plus power-iteration vectors."""
        arrays = {name: t.data.copy() for name, t in self.named_parameters()}
        for j, layer in enumerate(self.linear_layers()):
            if layer.sn is not None:
                for k, v in layer.sn.state_arrays().items():
                    arrays[f"sn{j}.{k}"] = v
        return arrays

    def load_state_arrays(self, arrays: dict) -> None:
        for name, t in self.named_parameters():
            t.data = np.asarray(arrays[name], dtype=np.float64).reshape(t.data.shape)
        for j, layer in enumerate(self.linear_layers()):
            if layer.sn is not None:
                layer.sn.load_state_arrays({k: arrays[f"sn{j}.{k}"]
                                            for k in ("u", "v", "sigma_hat")})

    def snapshot_effective(self) -> "EffectiveHead":
        """Read-only numpy copy with SN already folded into the weights."""
        prog = []
        for stage in self.stages:
            if stage == "relu":
                prog.append(("relu",))
            elif isinstance(stage, LinearLayer):
                prog.append(("linear", stage.effective_weight(), stage.bias.data.copy()))
            elif isinstance(stage, LayerNorm):
                prog.append(("norm", stage.gain.data.copy(), stage.shift.data.copy(), stage.eps))
            else:
                prog.append(("block",
                             stage.norm.gain.data.copy(), stage.norm.shift.data.copy(),
                             stage.norm.eps,
                             stage.up.effective_weight(), stage.up.bias.data.copy(),
                             stage.down.effective_weight(), stage.down.bias.data.copy()))
        return EffectiveHead(prog)


class EffectiveHead:
    """Pure-numpy forward pass over effective (SN-folded) weights.

    Used for target networks: EMA averaging acts on the arrays in-place.
    """

    def __init__(self, prog: list[tuple]):
        self.prog = prog

    def arrays(self) -> list[np.ndarray]:
        return [part for step in self.prog for part in step
                if isinstance(part, np.ndarray)]

    def ema_update(self, online: "EffectiveHead", tau: float) -> None:
        mine, theirs = self.arrays(), online.arrays()
        if len(mine) != len(theirs):
            raise ShapeError("target/online structure mismatch")
        for t, o in zip(mine, theirs):
            t *= (1.0 - tau)
            t += tau * o

    def forward(self, x: np.ndarray) -> np.ndarray:
        for step in self.prog:
            tag = step[0]
            if tag == "relu":
                x = np.maximum(x, 0.0)
            elif tag == "linear":
                _, w, b = step
                x = x @ w.T + b
            elif tag == "norm":
                _, gain, shift, eps = step
                x = _norm_np(x, gain, shift, eps)
            else:
                _, gain, shift, eps, wu, bu, wd, bd = step
                h = _norm_np(x, gain, shift, eps)
                h = np.maximum(h @ wu.T + bu, 0.0)
                x = x + h @ wd.T + bd
        return x

    __call__ = forward


def _norm_np(x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + shift


def _build_head(spec: NetworkSpec, in_dim: int, out_dim: int,
                rng: np.random.Generator) -> Head:
    spec.validate()
    if in_dim < 1 or out_dim < 1:
        raise ConfigError("in_dim and out_dim must be >= 1")
    sn_rng = rng if spec.sn_policy == "intermediate" else None

    stages: list = []
    if spec.kind == "mlp":
        # depth hidden layers -> depth+1 linears; SN on the interior ones.
        dims = [in_dim] + [spec.width] * spec.depth + [out_dim]
        n_lin = len(dims) - 1
        for i in range(n_lin):
            interior = 0 < i < n_lin - 1
            stages.append(LinearLayer.create(
                rng, dims[i], dims[i + 1],
                small_output=(i == n_lin - 1),
                sn_rng=sn_rng if interior else None))
            if i < n_lin - 1:
                stages.append("relu")
    else:
        stages.append(LinearLayer.create(rng, in_dim, spec.width))
        for _ in range(spec.depth - 1):
            stages.append(ModernBlock(
                LayerNorm(spec.width),
                LinearLayer.create(rng, spec.width, spec.ffn_width, sn_rng=sn_rng),
                LinearLayer.create(rng, spec.ffn_width, spec.width, sn_rng=sn_rng)))
        stages.append(LinearLayer.create(rng, spec.width, out_dim, small_output=True))
    return Head(spec, in_dim, out_dim, stages)


def build_actor_head(spec: NetworkSpec, feature_dim: int, action_dim: int,
                     rng: np.random.Generator) -> Head:
    """Head mapping features to (mu, log_sigma): output width 2 * action_dim."""
    return _build_head(spec, feature_dim, 2 * action_dim, rng)


def build_critic_head(spec: NetworkSpec, feature_dim: int, action_dim: int,
                      rng: np.random.Generator) -> Head:
    """Head mapping concat(feature, action) to a scalar Q-value."""
    return _build_head(spec, feature_dim + action_dim, 1, rng)


def critic_input(feature: Tensor, action: Tensor) -> Tensor:
    return concat(feature, action, axis=1)


# -- checkpoint container ----------------------------------------------------
#
# A checkpoint is a single .npz file. Named float64 arrays live under their
# own keys; structured metadata (format version plus a caller-supplied JSON
# dict) is stored under "__meta__" as a uint8-encoded JSON blob.

def save_arrays(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    blob = json.dumps({"checkpoint_version": CHECKPOINT_VERSION, "meta": meta},
                      sort_keys=True).encode()
    payload = {"__meta__": np.frombuffer(blob, dtype=np.uint8)}
    for k, v in arrays.items():
        if k == "__meta__":
            raise ConfigError("array key '__meta__' is reserved")
        payload[k] = np.asarray(v, dtype=np.float64)
    np.savez(path, **payload)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path) as z:
        blob = json.loads(z["__meta__"].tobytes().decode())
        if blob["checkpoint_version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {blob['checkpoint_version']}")
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return blob["meta"], arrays


def save_head(path, head: Head) -> None:
    meta = {"kind": "head", "spec": head.spec.to_dict(),
            "in_dim": head.in_dim, "out_dim": head.out_dim}
    save_arrays(path, meta, head.state_arrays())


def load_head(path) -> Head:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "head":
        raise ConfigError("checkpoint does not contain a head")
    spec = NetworkSpec.from_dict(meta["spec"])
    rng = np.random.default_rng(0)
    head = _build_head(spec, meta["in_dim"], meta["out_dim"], rng)
    head.load_state_arrays(arrays)
    return head
