"""Spectral normalization machinery: power-iteration state, an exact
singular-value oracle, and operator-norm bounds for whole heads."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class SpectralState:
    """Power-iteration vectors and the current top-singular-value estimate
    for one weight matrix W (shape out x in).

    sigma_hat = u^T W v with unit u, v, so it never exceeds the true top
    singular value. The update itself is never differentiated through.
    """

    SIGMA_FLOOR = 1e-12

    def __init__(self, u: np.ndarray, v: np.ndarray, sigma_hat: float,
                 iters_per_step: int = 1):
        self.u = u
        self.v = v
        self.sigma_hat = float(sigma_hat)
        self.iters_per_step = int(iters_per_step)

    @classmethod
    def create(cls, rng: np.random.Generator, out_dim: int, in_dim: int,
               iters_per_step: int = 1) -> "SpectralState":
        u = rng.standard_normal(out_dim)
        v = rng.standard_normal(in_dim)
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        return cls(u, v, cls.SIGMA_FLOOR, iters_per_step)

    def update(self, weight: np.ndarray, iters: int | None = None) -> "SpectralState":
        """Run power-iteration steps against `weight`, in place."""
        n = self.iters_per_step if iters is None else iters
        for _ in range(n):
            power_iteration_step(weight, self)
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"u": self.u.copy(), "v": self.v.copy(),
                "sigma_hat": np.asarray(self.sigma_hat)}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.u = np.asarray(arrays["u"], dtype=np.float64)
        self.v = np.asarray(arrays["v"], dtype=np.float64)
        self.sigma_hat = float(arrays["sigma_hat"])


def power_iteration_step(weight: np.ndarray, state: SpectralState) -> SpectralState:
    """One coupled power-method step: v <- W^T u / ||.||, u <- W v / ||.||,
    then sigma_hat = u^T W v. Degenerate (zero) matrices leave the vectors
    unchanged and floor sigma_hat."""
    wu = weight.T @ state.u
    norm = np.linalg.norm(wu)
    if norm > 0.0:
        state.v = wu / norm
    wv = weight @ state.v
    norm = np.linalg.norm(wv)
    if norm > 0.0:
        state.u = wv / norm
    state.sigma_hat = max(float(state.u @ weight @ state.v), SpectralState.SIGMA_FLOOR)
    return state


def exact_sigma_max(weight: np.ndarray) -> float:
    """Largest singular value via full SVD (test/diagnostic oracle)."""
    w = np.asarray(weight, dtype=np.float64)
    if w.size == 0:
        return 0.0
    return float(np.linalg.svd(w, compute_uv=False)[0])


def _layernorm_gain_bound(gain: np.ndarray, eps: float) -> float:
    # Conservative: the row map x -> (x - mean)/sqrt(var + eps) * gain has
    # operator norm at most ||gain||_inf / sqrt(eps) over a bounded step.
    return float(np.max(np.abs(gain)) / np.sqrt(eps))


def lipschitz_bound(head, layer_norm_mode: str = "ignore") -> float:
    """Upper bound on the head's Lipschitz constant: the product of per-stage
    operator norms (ReLU contributes 1).

    Linear stages contribute the exact top singular value of their effective
    weight. Residual blocks contribute 1 + ||down|| * ||up|| * L_norm. The
    normalization factor L_norm is 1 when `layer_norm_mode` is "ignore"
    (the plain product model) and ||gain||_inf / sqrt(eps) when
    "conservative".
    """
    # local import keeps the layer <-> specnorm dependency one-directional at import time
    from .layers import LayerNorm, LinearLayer, ModernBlock

    if layer_norm_mode not in ("ignore", "conservative"):
        raise ContractError(f"unknown layer_norm_mode {layer_norm_mode!r}")
    bound = 1.0
    for stage in head.stages:
        if stage == "relu":
            continue
        if isinstance(stage, LinearLayer):
            bound *= exact_sigma_max(stage.effective_weight())
        elif isinstance(stage, ModernBlock):
            l_norm = 1.0 if layer_norm_mode == "ignore" else \
                _layernorm_gain_bound(stage.norm.gain.data, stage.norm.eps)
            branch = (exact_sigma_max(stage.down.effective_weight())
                      * exact_sigma_max(stage.up.effective_weight()) * l_norm)
            bound *= 1.0 + branch
        elif isinstance(stage, LayerNorm):
            if layer_norm_mode == "conservative":
                bound *= _layernorm_gain_bound(stage.gain.data, stage.eps)
        else:
            raise ContractError(f"unsupported stage type {type(stage)!r}")
    return bound


def singular_value_report(head) -> list[dict]:
    """One row per linear layer: raw and effective exact top singular values
    plus the power-iteration estimate where SN is active."""
    rows = []
    for i, layer in enumerate(head.linear_layers()):
        rows.append({
            "layer": i,
            "sigma_exact_raw": exact_sigma_max(layer.weight.data),
            "sigma_exact_effective": exact_sigma_max(layer.effective_weight()),
            "sigma_hat": layer.sn.sigma_hat if layer.sn is not None else float("nan"),
            "sn_active": layer.sn is not None,
        })
    return rows


def write_singular_value_csv(path, rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write("layer,sn_active,sigma_hat,sigma_exact_raw,sigma_exact_effective\n")
        for r in rows:
            f.write(f"{r['layer']},{int(r['sn_active'])},{r['sigma_hat']!r},"
                    f"{r['sigma_exact_raw']!r},{r['sigma_exact_effective']!r}\n")
