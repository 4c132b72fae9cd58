"""Real NVP density model built from alternating-mask affine coupling layers."""
import base64
import json
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

import diffcore as dc
from diffcore import DenseArray, Dense, ParamNode
from errors import DataError, DimensionError, NumericError

CHECKPOINT_VERSION = 1
LOG_2PI = float(np.log(2.0 * np.pi))


def alternating_masks(input_dim: int, n_layers: int) -> List[np.ndarray]:
    """Even coordinates are kept fixed by layer 0, odd ones by layer 1, and so on."""
    parity = np.arange(input_dim) % 2
    return [(parity == (layer % 2)).astype(np.float64) for layer in range(n_layers)]


def _as_batch(x) -> Tuple[DenseArray, bool]:
    x = dc.as_array(x)
    if x.values.ndim == 1:
        return dc.reshape(x, (1, x.shape[0])), True
    if x.values.ndim != 2:
        raise DimensionError(f"expected a vector or a (batch, d) array, got shape {x.shape}")
    return x, False


def _check_finite(x: DenseArray, where: str):
    if not np.all(np.isfinite(x.values)):
        raise NumericError(f"{where}: input contains non-finite values")


class CouplingLayer:
    """Affine coupling: y = x * exp(s(x_masked)) + t(x_masked) on unmasked coords."""

    def __init__(self, mask, hidden: int = 32, rng: Optional[np.random.Generator] = None,
                 name: str = "coupling"):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim != 1 or not np.all((mask == 0) | (mask == 1)):
            raise DimensionError(f"{name}: mask must be a 0/1 vector")
        if mask.min() == mask.max():
            raise DimensionError(f"{name}: mask must contain both 0 and 1")
        self.mask = mask
        self.name = name
        self.input_dim = d = mask.shape[0]
        self.hidden = hidden
        # final layers start at zero so the layer is the identity
        self.s_net = [Dense(d, hidden, f"{name}.s0", rng), Dense(hidden, hidden, f"{name}.s1", rng),
                      Dense(hidden, d, f"{name}.s2", zero=True)]
        self.t_net = [Dense(d, hidden, f"{name}.t0", rng), Dense(hidden, hidden, f"{name}.t1", rng),
                      Dense(hidden, d, f"{name}.t2", zero=True)]

    def parameters(self) -> List[ParamNode]:
        return [p for layer in self.s_net + self.t_net for p in layer.parameters()]

    def _constant(self, vector: np.ndarray, batch: int) -> DenseArray:
        return DenseArray(np.broadcast_to(vector, (batch, self.input_dim)))

    def _scale_shift(self, fixed: DenseArray) -> Tuple[DenseArray, DenseArray]:
        free = self._constant(1.0 - self.mask, fixed.shape[0])
        h = dc.tanh(self.s_net[0](fixed))
        h = dc.tanh(self.s_net[1](h))
        s = dc.tanh(self.s_net[2](h)) * free
        h = dc.tanh(self.t_net[0](fixed))
        h = dc.tanh(self.t_net[1](h))
        t = self.t_net[2](h) * free
        return s, t

    def forward(self, x: DenseArray) -> Tuple[DenseArray, DenseArray]:
        _check_finite(x, f"{self.name}.forward")
        if x.shape[1] != self.input_dim:
            raise DimensionError(f"{self.name}: expected width {self.input_dim}, got {x.shape}")
        fixed = x * self._constant(self.mask, x.shape[0])
        s, t = self._scale_shift(fixed)
        y = x * dc.exp(s) + t
        return y, dc.sum(s, axis=1)

    def inverse(self, y: DenseArray) -> DenseArray:
        _check_finite(y, f"{self.name}.inverse")
        if y.shape[1] != self.input_dim:
            raise DimensionError(f"{self.name}: expected width {self.input_dim}, got {y.shape}")
        fixed = y * self._constant(self.mask, y.shape[0])
        s, t = self._scale_shift(fixed)
        return (y - t) * dc.exp(-s)


def coupling_forward(layer: CouplingLayer, x) -> Tuple[DenseArray, DenseArray]:
    """Apply one coupling layer; a vector input yields a vector and a scalar log-det."""
    batch, single = _as_batch(x)
    y, log_det = layer.forward(batch)
    if single:
        return dc.reshape(y, (layer.input_dim,)), dc.reshape(log_det, ())
    return y, log_det


def coupling_inverse(layer: CouplingLayer, y) -> DenseArray:
    batch, single = _as_batch(y)
    x = layer.inverse(batch)
    return dc.reshape(x, (layer.input_dim,)) if single else x


class FlowModel:
    """Stack of coupling layers over a standard-normal base distribution."""

    def __init__(self, input_dim: int, n_layers: int = 4, hidden: int = 32,
                 rng: Optional[np.random.Generator] = None, masks: Optional[List[np.ndarray]] = None):
        if input_dim < 2:
            raise DimensionError(f"flow input dimension must be at least 2, got {input_dim}")
        masks = alternating_masks(input_dim, n_layers) if masks is None else masks
        for previous, current in zip(masks, masks[1:]):
            if np.array_equal(previous, current):
                raise DimensionError("consecutive coupling masks must differ")
        self.input_dim = input_dim
        self.hidden = hidden
        self.layers = [CouplingLayer(mask, hidden, rng, name=f"coupling{i}") for i, mask in enumerate(masks)]

    def parameters(self) -> List[ParamNode]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x) -> Tuple[DenseArray, DenseArray]:
        """Map data to latent space; returns (z, log_det) per row."""
        z, _ = _as_batch(x)
        total = None
        for layer in self.layers:
            z, log_det = layer.forward(z)
            total = log_det if total is None else total + log_det
        return z, total

    def inverse(self, z) -> DenseArray:
        x, _ = _as_batch(z)
        for layer in reversed(self.layers):
            x = layer.inverse(x)
        return x

    def log_prob(self, x) -> DenseArray:
        """Exact log-density of each row."""
        z, log_det = self.forward(x)
        base = dc.sum(dc.square(z), axis=1) * -0.5 + (-0.5 * self.input_dim * LOG_2PI)
        return base + log_det

    def sample(self, count: int, seed: int = 0) -> np.ndarray:
        if count < 1:
            raise DimensionError(f"sample count must be positive, got {count}")
        draws = np.random.default_rng(seed).standard_normal((count, self.input_dim))
        with dc.no_grad():
            return self.inverse(draws).values


def log_prob(model: FlowModel, x) -> DenseArray:
    """log N(z; 0, I) + sum of layer log-dets; scalar for a vector input."""
    batch, single = _as_batch(x)
    out = model.log_prob(batch)
    return dc.reshape(out, ()) if single else out


def sample(model: FlowModel, count: int, seed: int = 0) -> np.ndarray:
    return model.sample(count, seed)


# ===== Checkpoints =====

def _encode(values: np.ndarray) -> dict:
    return {
        "shape": list(values.shape),
        "data": base64.b64encode(np.ascontiguousarray(values, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])


def params_to_dict(params: List[ParamNode]) -> dict:
    return {p.name: _encode(p.values) for p in params}


def load_params(params: List[ParamNode], stored: dict, where: str):
    for param in params:
        if param.name not in stored:
            raise DataError(f"{where}: missing parameter {param.name}")
        values = _decode(stored[param.name])
        if values.shape != param.shape:
            raise DataError(f"{where}: {param.name} has shape {values.shape}, expected {param.shape}")
        param.values[...] = values


def save_checkpoint(path, model: FlowModel, head=None, extra: Optional[dict] = None):
    """Write the flow (and optional self-supervision head) as a versioned JSON file."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "byte_order": "little",
        "dtype": "float64",
        "input_dim": model.input_dim,
        "hidden": model.hidden,
        "layers": [
            {"name": layer.name, "mask": layer.mask.astype(int).tolist(),
             "params": params_to_dict(layer.parameters())}
            for layer in model.layers
        ],
        "head": None if head is None else {"n_classes": head.n_classes,
                                           "params": params_to_dict(head.parameters())},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f)


def load_checkpoint(path) -> Tuple[FlowModel, Optional[dict], dict]:
    """Read a checkpoint; returns (model, head payload or None, extra metadata)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: checkpoint not found")
    try:
        with open(path, "r") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: line {e.lineno}: {e.msg}") from e
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {payload.get('format_version')!r}")
    if payload.get("byte_order") != "little" or payload.get("dtype") != "float64":
        raise DataError(f"{path}: checkpoint must hold little-endian float64 weights")
    masks = [np.asarray(layer["mask"], dtype=np.float64) for layer in payload["layers"]]
    model = FlowModel(payload["input_dim"], len(masks), payload["hidden"], masks=masks)
    for layer, stored in zip(model.layers, payload["layers"]):
        load_params(layer.parameters(), stored["params"], str(path))
    return model, payload.get("head"), payload.get("extra", {})
