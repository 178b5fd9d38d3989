"""Joint implicit network: shared trunk, scattering-residual and
incident-light heads, with hand-written reverse-mode gradients and Adam.

Architecture is fixed: 40 input features -> trunk [64, 32, 32] with
Leaky-ReLU -> (a) incident head, one more 32-wide Leaky-ReLU layer and a
3-channel ReLU output, (b) residual head, a 3-channel sigmoid output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import Aabb, sigmoid

IN_FEATURES = 40  # 16 direct features + 24 encoded position
TRUNK_WIDTHS = (64, 32, 32)
INCIDENT_HIDDEN = 32
OUT_CHANNELS = 3
LEAKY_SLOPE = 0.01
FOURIER_BANDS = 4  # 3 axes * 2 (sin, cos) * 4 bands = 24 features

# (name, in_dim, out_dim) in parameter order; weights are (in, out).
LAYER_SPECS = (
    ("trunk0", IN_FEATURES, TRUNK_WIDTHS[0]),
    ("trunk1", TRUNK_WIDTHS[0], TRUNK_WIDTHS[1]),
    ("trunk2", TRUNK_WIDTHS[1], TRUNK_WIDTHS[2]),
    ("incident0", TRUNK_WIDTHS[2], INCIDENT_HIDDEN),
    ("incident1", INCIDENT_HIDDEN, OUT_CHANNELS),
    ("residual0", TRUNK_WIDTHS[2], OUT_CHANNELS),
)


_BAND_FREQS = (2.0 ** np.arange(FOURIER_BANDS)) * np.pi


def encode_position(mu, bounds: Aabb):
    """Fourier-encode positions normalized to [-1, 1]^3 by the scene bounds.

    Layout per axis: [sin(2^k pi x), cos(2^k pi x)] for k = 0..3 -> 24 values.
    """
    mu = np.asarray(mu, dtype=np.float64)
    p = (mu - bounds.center) / bounds.half_extent
    args = p[..., :, None] * _BAND_FREQS  # (..., 3, 4)
    out = np.empty(p.shape[:-1] + (3, FOURIER_BANDS, 2))
    np.sin(args, out=out[..., 0])
    np.cos(args, out=out[..., 1])
    return out.reshape(p.shape[:-1] + (3 * FOURIER_BANDS * 2,))


def encode_position_backward(mu, bounds: Aabb, d_enc):
    """d encode / d mu, contracted with the output cotangent."""
    mu = np.asarray(mu, dtype=np.float64)
    p = (mu - bounds.center) / bounds.half_extent
    d_mu = np.zeros_like(mu)
    col = 0
    for axis in range(3):
        for k in range(FOURIER_BANDS):
            f = (2.0**k) * np.pi
            arg = f * p[..., axis]
            scale = f / bounds.half_extent[axis]
            d_mu[..., axis] += d_enc[..., col] * np.cos(arg) * scale
            d_mu[..., axis] += d_enc[..., col + 1] * (-np.sin(arg)) * scale
            col += 2
    return d_mu


@dataclass
class MlpParams:
    """Named dense weight/bias tensors in the fixed architecture order."""

    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        for name, nin, nout in LAYER_SPECS:
            w = self.tensors[f"{name}.w"]
            b = self.tensors[f"{name}.b"]
            if w.shape != (nin, nout) or b.shape != (nout,):
                raise ValueError(
                    f"{name}: expected ({nin},{nout})/({nout},), "
                    f"got {w.shape}/{b.shape}")

    @classmethod
    def init(cls, seed: int = 0) -> "MlpParams":
        """Kaiming-style uniform fan-in init, zero biases."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, nin, nout in LAYER_SPECS:
            bound = np.sqrt(6.0 / nin)
            tensors[f"{name}.w"] = rng.uniform(-bound, bound, (nin, nout))
            tensors[f"{name}.b"] = np.zeros(nout)
        return cls(tensors)

    @classmethod
    def zeros(cls) -> "MlpParams":
        return cls({f"{n}.{p}": np.zeros((i, o) if p == "w" else o)
                    for n, i, o in LAYER_SPECS for p in ("w", "b")})

    def copy(self) -> "MlpParams":
        return MlpParams({k: v.copy() for k, v in self.tensors.items()})

    def check_finite(self):
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite MLP parameter: {k}")

    def forward(self, x):
        return forward(self, x)

    def forward_fast(self, x):
        """Cache-free single-precision evaluation for interactive rendering.

        Matches ``forward`` to float32 accuracy (~1e-6); training and
        gradient checks always use the float64 path.
        """
        t = {k: v.astype(np.float32) for k, v in self.tensors.items()}
        h = np.asarray(x, dtype=np.float32)
        for name in ("trunk0", "trunk1", "trunk2"):
            h = h @ t[f"{name}.w"]
            h += t[f"{name}.b"]
            np.maximum(h, np.float32(LEAKY_SLOPE) * h, out=h)
        z = h @ t["incident0.w"]
        z += t["incident0.b"]
        np.maximum(z, np.float32(LEAKY_SLOPE) * z, out=z)
        incident = z @ t["incident1.w"]
        incident += t["incident1.b"]
        np.maximum(incident, np.float32(0.0), out=incident)
        residual = sigmoid(h @ t["residual0.w"] + t["residual0.b"])
        return residual.astype(np.float64), incident.astype(np.float64)

    def backward(self, cache, d_residual, d_incident):
        return backward(self, cache, d_residual, d_incident)


def _leaky(x):
    return np.maximum(x, LEAKY_SLOPE * x)


def _leaky_grad(x):
    return np.where(x > 0, 1.0, LEAKY_SLOPE)


def forward(params: MlpParams, x):
    """Evaluate the network on a batch (B, 40).

    Returns (residual (B, 3) in (0,1), incident (B, 3) >= 0, cache).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != IN_FEATURES:
        raise ValueError(f"expected {IN_FEATURES} input features, got {x.shape[1]}")
    t = params.tensors
    cache = {"x": x, "pre": {}, "act": {}}
    h = x
    for name in ("trunk0", "trunk1", "trunk2", "incident0"):
        z = h @ t[f"{name}.w"] + t[f"{name}.b"]
        cache["pre"][name] = z
        if name == "incident0":
            inc_h = _leaky(z)
            cache["act"][name] = inc_h
        else:
            h = _leaky(z)
            cache["act"][name] = h
            if name == "trunk2":
                trunk_out = h
    z_inc = cache["act"]["incident0"] @ t["incident1.w"] + t["incident1.b"]
    z_res = trunk_out @ t["residual0.w"] + t["residual0.b"]
    cache["pre"]["incident1"] = z_inc
    cache["pre"]["residual0"] = z_res
    incident = np.maximum(z_inc, 0.0)
    residual = sigmoid(z_res)
    cache["residual"] = residual
    return residual, incident, cache


def backward(params: MlpParams, cache, d_residual, d_incident):
    """Exact reverse-mode gradients.

    Returns (grads: dict matching the parameter tensors, d_x (B, 40)).
    """
    t = params.tensors
    pre, act = cache["pre"], cache["act"]
    grads = {}

    res = cache["residual"]
    dz_res = np.asarray(d_residual, dtype=np.float64) * res * (1.0 - res)
    dz_inc = np.asarray(d_incident, dtype=np.float64) * (pre["incident1"] > 0)

    trunk_out = act["trunk2"]
    grads["residual0.w"] = trunk_out.T @ dz_res
    grads["residual0.b"] = dz_res.sum(axis=0)
    d_trunk = dz_res @ t["residual0.w"].T

    grads["incident1.w"] = act["incident0"].T @ dz_inc
    grads["incident1.b"] = dz_inc.sum(axis=0)
    d_inc_h = dz_inc @ t["incident1.w"].T
    dz = d_inc_h * _leaky_grad(pre["incident0"])
    grads["incident0.w"] = trunk_out.T @ dz
    grads["incident0.b"] = dz.sum(axis=0)
    d_trunk = d_trunk + dz @ t["incident0.w"].T

    d_h = d_trunk
    for name, below in (("trunk2", "trunk1"), ("trunk1", "trunk0")):
        dz = d_h * _leaky_grad(pre[name])
        grads[f"{name}.w"] = act[below].T @ dz
        grads[f"{name}.b"] = dz.sum(axis=0)
        d_h = dz @ t[f"{name}.w"].T
    dz = d_h * _leaky_grad(pre["trunk0"])
    grads["trunk0.w"] = cache["x"].T @ dz
    grads["trunk0.b"] = dz.sum(axis=0)
    d_x = dz @ t["trunk0.w"].T
    return grads, d_x


@dataclass
class SplitMlpParams:
    """Two independent networks, one per head (the non-joint ablation).

    ``residual_net`` contributes only its residual head, ``incident_net``
    only its incident head; the shared-trunk coupling disappears.
    """

    residual_net: MlpParams
    incident_net: MlpParams

    @classmethod
    def init(cls, seed: int = 0) -> "SplitMlpParams":
        return cls(MlpParams.init(seed), MlpParams.init(seed + 1))

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "SplitMlpParams":
        res = {k[len("res."):]: v for k, v in tensors.items() if k.startswith("res.")}
        inc = {k[len("inc."):]: v for k, v in tensors.items() if k.startswith("inc.")}
        return cls(MlpParams(res), MlpParams(inc))

    @property
    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"res.{k}": v for k, v in self.residual_net.tensors.items()}
        out.update({f"inc.{k}": v for k, v in self.incident_net.tensors.items()})
        return out

    def copy(self) -> "SplitMlpParams":
        return SplitMlpParams(self.residual_net.copy(), self.incident_net.copy())

    def check_finite(self):
        self.residual_net.check_finite()
        self.incident_net.check_finite()

    def forward(self, x):
        residual, _, cache_r = forward(self.residual_net, x)
        _, incident, cache_i = forward(self.incident_net, x)
        return residual, incident, (cache_r, cache_i)

    def forward_fast(self, x):
        residual, _ = self.residual_net.forward_fast(x)
        _, incident = self.incident_net.forward_fast(x)
        return residual, incident

    def backward(self, cache, d_residual, d_incident):
        cache_r, cache_i = cache
        zero3 = np.zeros_like(d_residual)
        g_r, dx_r = backward(self.residual_net, cache_r, d_residual, zero3)
        g_i, dx_i = backward(self.incident_net, cache_i, np.zeros_like(d_incident),
                             d_incident)
        grads = {f"res.{k}": v for k, v in g_r.items()}
        grads.update({f"inc.{k}": v for k, v in g_i.items()})
        return grads, dx_r + dx_i


@dataclass
class AdamState:
    """Moment buffers for a named-tensor parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, tensors: dict[str, np.ndarray], lr: float = 1e-3) -> "AdamState":
        return cls(lr=lr,
                   m={k: np.zeros_like(p) for k, p in tensors.items()},
                   v={k: np.zeros_like(p) for k, p in tensors.items()})


def adam_step(state: AdamState, tensors: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], lr_scale=None):
    """Standard bias-corrected Adam update, applied in place.

    ``lr_scale`` optionally maps a tensor name to a multiplier on the
    shared learning rate (0 freezes a tensor outright).
    """
    state.step_count += 1
    b1t = 1.0 - state.beta1**state.step_count
    b2t = 1.0 - state.beta2**state.step_count
    for k, p in tensors.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != param {p.shape}")
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        scale = 1.0 if lr_scale is None else lr_scale.get(k, 1.0)
        if scale == 0.0:
            continue
        step = state.lr * scale * (m / b1t) / (np.sqrt(v / b2t) + state.eps)
        p -= step
    return tensors
