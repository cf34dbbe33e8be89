"""Model zoo: MLP energy nets (optional bottlenecks), JEM heads, radial
flows, and classifiers with embedding extraction.

Forward passes build autodiff graphs; pass plain arrays where only the
value is needed and read ``.value`` off the result.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .rng import stream

CHECKPOINT_SCHEMA_VERSION = 1

# softplus(x) = 1 at this x; radial layers start as the identity map
_SOFTPLUS_INV_1 = math.log(math.e - 1.0)


class ModelError(Exception):
    pass


@dataclass
class ModelSpec:
    input_dim: int
    hidden: list[int] = field(default_factory=lambda: [100] * 5)
    activation: str = "relu"
    leaky_slope: float = 0.2
    head: str = "energy"  # energy | logits | flow | vector
    n_classes: int | None = None
    n_outputs: int | None = None  # vector head only
    n_flow_layers: int = 20
    bottleneck_factor: float | None = None

    def __post_init__(self):
        if self.input_dim < 1:
            raise ModelError("input_dim must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ModelError("hidden widths must be >= 1")
        if self.head not in ("energy", "logits", "flow", "vector"):
            raise ModelError(f"unknown head {self.head!r}")
        if self.head == "logits" and (self.n_classes is None or self.n_classes < 2):
            raise ModelError("logits head requires n_classes >= 2")
        if self.head == "vector" and (self.n_outputs is None or self.n_outputs < 1):
            raise ModelError("vector head requires n_outputs >= 1")
        if self.head == "flow" and self.n_flow_layers < 1:
            raise ModelError("flow needs at least one layer")
        if self.activation not in ("relu", "leaky_relu", "softplus"):
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.bottleneck_factor is not None and not (0.0 < self.bottleneck_factor <= 1.0):
            raise ModelError("bottleneck_factor must be in (0, 1]")

    @property
    def has_bottleneck(self) -> bool:
        # factor 1 is defined as a no-op so it matches the plain net exactly
        return self.bottleneck_factor is not None and self.bottleneck_factor < 1.0

    def layer_plan(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) pairs of every parameter block."""
        plan: list[tuple[str, tuple[int, ...]]] = []
        if self.head == "flow":
            for k in range(self.n_flow_layers):
                plan.append((f"flow{k}.z0", (self.input_dim,)))
                plan.append((f"flow{k}.alpha_hat", ()))
                plan.append((f"flow{k}.beta_hat", ()))
            return plan
        prev = self.input_dim
        for i, h in enumerate(self.hidden):
            plan.append((f"layer{i}.W", (prev, h)))
            plan.append((f"layer{i}.b", (h,)))
            if self.has_bottleneck:
                m = math.ceil(self.bottleneck_factor * h)
                plan.append((f"layer{i}.bn_down.W", (h, m)))
                plan.append((f"layer{i}.bn_down.b", (m,)))
                plan.append((f"layer{i}.bn_up.W", (m, h)))
                plan.append((f"layer{i}.bn_up.b", (h,)))
            prev = h
        if self.head == "energy":
            out = 1
        elif self.head == "logits":
            out = self.n_classes
        else:
            out = self.n_outputs
        plan.append(("head.W", (prev, out)))
        plan.append(("head.b", (out,)))
        return plan

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass
class ParameterSet:
    """Flat float64 storage with named per-layer offsets."""

    values: np.ndarray
    offsets: list[tuple[str, int, tuple[int, ...]]]
    seed: int | None = None

    def get(self, name: str) -> np.ndarray:
        for n, start, shape in self.offsets:
            if n == name:
                size = int(np.prod(shape)) if shape else 1
                return self.values[start:start + size].reshape(shape)
        raise KeyError(name)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n, start, shape in self.offsets:
            size = int(np.prod(shape)) if shape else 1
            out[n] = self.values[start:start + size].reshape(shape)
        return out

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.values.copy(), list(self.offsets), self.seed)

    @property
    def size(self) -> int:
        return self.values.size


def init_params(spec: ModelSpec, seed: int) -> ParameterSet:
    """Weights uniform in +-sqrt(6/(fan_in+fan_out)); biases zero.

    Flow layers start at the identity transform with normally
    distributed centers.
    """
    rng = stream(seed, "init")
    plan = spec.layer_plan()
    offsets = []
    chunks = []
    pos = 0
    for name, shape in plan:
        size = int(np.prod(shape)) if shape else 1
        if name.endswith(".W"):
            fan_in, fan_out = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            vals = rng.uniform(-bound, bound, size=size)
        elif name.endswith(".z0"):
            vals = rng.normal(size=size)
        elif name.endswith(".alpha_hat") or name.endswith(".beta_hat"):
            vals = np.full(size, _SOFTPLUS_INV_1)
        else:  # biases
            vals = np.zeros(size)
        offsets.append((name, pos, shape))
        chunks.append(vals)
        pos += size
    return ParameterSet(np.concatenate(chunks), offsets, seed)


def param_nodes(pset: ParameterSet) -> dict[str, ad.Node]:
    """Fresh leaf nodes over the current parameter values."""
    return {name: ad.leaf(arr.copy()) for name, arr in pset.arrays().items()}


def _activation(spec: ModelSpec, h: ad.Node) -> ad.Node:
    if spec.activation == "relu":
        return ad.relu(h)
    if spec.activation == "softplus":
        return ad.softplus(h)
    return ad.leaky_relu(h, spec.leaky_slope)


def _as_batch(x) -> tuple[ad.Node, bool]:
    x = ad.as_node(x)
    if x.value.ndim == 1:
        return ad.reshape(x, (1, x.value.shape[0])), True
    if x.value.ndim != 2:
        raise ModelError(f"expected vector or batch input, got ndim={x.value.ndim}")
    return x, False


def mlp_forward(spec: ModelSpec, params, x) -> tuple[ad.Node, ad.Node]:
    """Returns (head output (N, out), penultimate activations (N, H))."""
    if spec.head == "flow":
        raise ModelError("mlp_forward does not apply to flow heads")
    pn = params if isinstance(params, dict) else param_nodes(params)
    h, single = _as_batch(x)
    if h.value.shape[1] != spec.input_dim:
        raise ModelError(
            f"input dim {h.value.shape[1]} does not match spec input_dim {spec.input_dim}"
        )
    for i in range(len(spec.hidden)):
        h = _activation(spec, ad.add(ad.matmul(h, pn[f"layer{i}.W"]), pn[f"layer{i}.b"]))
        if spec.has_bottleneck:
            d = _activation(
                spec, ad.add(ad.matmul(h, pn[f"layer{i}.bn_down.W"]), pn[f"layer{i}.bn_down.b"])
            )
            h = ad.add(ad.matmul(d, pn[f"layer{i}.bn_up.W"]), pn[f"layer{i}.bn_up.b"])
    out = ad.add(ad.matmul(h, pn["head.W"]), pn["head.b"])
    if single:
        out = ad.reshape(out, (out.value.shape[1],))
        h = ad.reshape(h, (h.value.shape[1],))
    return out, h


def mlp_energy(spec: ModelSpec, params, x) -> ad.Node:
    """Scalar energy per row; single input gives a 0-d node."""
    if spec.head != "energy":
        raise ModelError("mlp_energy requires a scalar-energy head")
    out, _ = mlp_forward(spec, params, x)
    if out.value.ndim == 1:  # single input, shape (1,)
        return ad.reshape(out, ())
    return ad.reshape(out, (out.value.shape[0],))


def mlp_logits(spec: ModelSpec, params, x) -> ad.Node:
    if spec.head != "logits":
        raise ModelError("mlp_logits requires a logits head")
    out, _ = mlp_forward(spec, params, x)
    return out


def classifier_embed(spec: ModelSpec, params, x) -> np.ndarray:
    """Penultimate activations of a classifier, as plain arrays."""
    if spec.head != "logits":
        raise ModelError("classifier_embed requires a logits head")
    _, h = mlp_forward(spec, params, x)
    return h.value


def jem_logdensity(logits):
    """log p~(x) = logsumexp of the logits (also the energy score)."""
    if isinstance(logits, ad.Node):
        if logits.value.shape[-1] < 1:
            raise ModelError("empty logit vector")
        return ad.logsumexp(logits, axis=-1)
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 1:
        raise ModelError("empty logit vector")
    m = np.max(logits, axis=-1, keepdims=True)
    return np.squeeze(np.log(np.sum(np.exp(logits - m), axis=-1, keepdims=True)) + m, -1)


def jem_class_probs(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = np.max(logits, axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def radial_constrained(alpha_hat, beta_hat):
    """Map unconstrained layer parameters to (alpha > 0, beta >= -alpha)."""
    alpha = ad.softplus(ad.as_node(alpha_hat))
    beta = ad.add(ad.neg(alpha), ad.softplus(ad.as_node(beta_hat)))
    return alpha, beta


def radial_forward(z0, alpha_hat, beta_hat, x) -> tuple[ad.Node, ad.Node]:
    """One radial transform on a batch: y = x + beta*h*(x - z0).

    h = 1/(alpha + r), r = |x - z0|; log|det J| has the closed form
    (D-1)*log(1 + beta*h) + log(1 + beta*h + beta*h'*r), h' = -h^2.
    """
    x, single = _as_batch(x)
    d = x.value.shape[1]
    alpha, beta = radial_constrained(alpha_hat, beta_hat)
    diff = ad.add(x, ad.neg(ad.as_node(z0)))
    r = ad.sqrt(ad.add(ad.reduce_sum(ad.square(diff), axis=1, keepdims=True), 1e-24))
    h = 1.0 / ad.add(alpha, r)
    bh = ad.mul(beta, h)
    y = ad.add(x, ad.mul(bh, diff))
    # beta*h'*r with h' = -h^2
    bhr = ad.neg(ad.mul(beta, ad.mul(ad.square(h), r)))
    logdet = ad.add(
        ad.mul(float(d - 1), ad.log(ad.add(1.0, bh))),
        ad.log(ad.add(ad.add(1.0, bh), bhr)),
    )
    logdet = ad.reshape(logdet, (x.value.shape[0],))
    if single:
        y = ad.reshape(y, (d,))
        logdet = ad.reshape(logdet, ())
    return y, logdet


def flow_logdensity(spec: ModelSpec, params, x) -> ad.Node:
    """Stacked radial transforms, data -> standard-normal base."""
    if spec.head != "flow":
        raise ModelError("flow_logdensity requires a flow head")
    pn = params if isinstance(params, dict) else param_nodes(params)
    z, single = _as_batch(x)
    d = spec.input_dim
    total = ad.constant(np.zeros(z.value.shape[0]))
    for k in range(spec.n_flow_layers):
        z, logdet = radial_forward(
            pn[f"flow{k}.z0"], pn[f"flow{k}.alpha_hat"], pn[f"flow{k}.beta_hat"], z
        )
        total = ad.add(total, logdet)
    base = ad.add(
        ad.mul(-0.5, ad.reduce_sum(ad.square(z), axis=1)),
        -0.5 * d * math.log(2.0 * math.pi),
    )
    out = ad.add(base, total)
    if single:
        out = ad.reshape(out, ())
    return out


def score_logdensity(spec: ModelSpec, params, x) -> np.ndarray:
    """Unnormalized log-density used for OOD scoring: -E or logsumexp."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if spec.head == "energy":
        return -mlp_energy(spec, params, x).value
    if spec.head == "logits":
        return jem_logdensity(mlp_logits(spec, params, x).value)
    return flow_logdensity(spec, params, x).value


def save_checkpoint(path: str, spec: ModelSpec, pset: ParameterSet, metadata: dict | None = None):
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "spec": spec.to_dict(),
        "seed": pset.seed,
        "parameters": pset.values.tolist(),
        "metadata": metadata or {},
    }
    _atomic_write_json(path, doc)


def load_checkpoint(path: str) -> tuple[ModelSpec, ParameterSet, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ModelError(
            f"checkpoint schema version {doc.get('schema_version')} "
            f"!= supported {CHECKPOINT_SCHEMA_VERSION}"
        )
    spec = ModelSpec.from_dict(doc["spec"])
    values = np.asarray(doc["parameters"], dtype=np.float64)
    offsets = []
    pos = 0
    for name, shape in spec.layer_plan():
        size = int(np.prod(shape)) if shape else 1
        offsets.append((name, pos, tuple(shape)))
        pos += size
    if pos != values.size:
        raise ModelError(f"parameter count {values.size} does not match spec ({pos})")
    return spec, ParameterSet(values, offsets, doc.get("seed")), doc.get("metadata", {})


def _atomic_write_json(path: str, doc: dict):
    """Write-then-rename so aborted runs never leave partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
