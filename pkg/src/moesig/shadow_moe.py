"""Toy trainable sparse-MoE proxy with top-k routing and analytic gradients.

The proxy mimics a black-box input-to-output oracle by minimizing mean
squared error plus a load-balancing penalty that pulls mean gate usage
toward uniform, preventing expert collapse. Routing uses softmax gates with
hard top-k selection; within a training step the selected index set is
treated as constant and gradients flow through the renormalized gate
weights of the selected experts (standard sparse-MoE practice, and what
makes finite-difference gradient checks well defined away from selection
boundaries).

Scale notes: experts are two-layer tanh maps and the default hidden width
is small, so training runs in seconds on a CPU. The default learning rate
of 1e-3 is a toy-scale choice; LLM-scale distillation recipes use values
around 5e-6, which do not transfer to tiny freshly initialized networks.
Optimization is plain mini-batch gradient descent with optional momentum.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from moesig._meta import config_digest
from moesig._rng import substream
from moesig.errors import ShadowMoeError
from moesig.routing_trace import RoutingTraceSet, build_trace_set

Oracle = Callable[[np.ndarray], np.ndarray]

GATE_SUM_TOL = 1e-9

MODEL_MAGIC = b"MOESIG-SHADOW-V1\n"


def _as_per_layer(value, num_layers: int, name: str) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * num_layers
    out = tuple(int(v) for v in value)
    if len(out) != num_layers:
        raise ShadowMoeError(f"{name} has {len(out)} entries for {num_layers} layers")
    return out


@dataclass(frozen=True)
class ShadowMoeConfig:
    """Shape, regularization, and optimization settings for a proxy."""

    num_layers: int
    experts_per_layer: tuple[int, ...] | int
    top_k: tuple[int, ...] | int
    input_dim: int
    output_dim: int
    hidden_dim: int = 16
    load_balance_weight: float = 0.001
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ShadowMoeError(f"num_layers must be >= 1, got {self.num_layers}")
        experts = _as_per_layer(self.experts_per_layer, self.num_layers, "experts_per_layer")
        top_k = _as_per_layer(self.top_k, self.num_layers, "top_k")
        object.__setattr__(self, "experts_per_layer", experts)
        object.__setattr__(self, "top_k", top_k)
        for e, k in zip(experts, top_k):
            if e < 1 or k < 1 or k > e:
                raise ShadowMoeError(f"need 1 <= top_k <= experts per layer, got k={k}, E={e}")
        for name in ("input_dim", "output_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ShadowMoeError(f"{name} must be >= 1")
        if self.load_balance_weight < 0:
            raise ShadowMoeError("load_balance_weight must be >= 0")
        if self.learning_rate <= 0:
            raise ShadowMoeError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ShadowMoeError("epochs and batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ShadowMoeError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "experts_per_layer": list(self.experts_per_layer),
            "top_k": list(self.top_k),
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_dim": self.hidden_dim,
            "load_balance_weight": self.load_balance_weight,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "momentum": self.momentum,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ShadowMoeConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ShadowMoeError(f"unknown config field(s): {sorted(unknown)}")
        doc = dict(doc)
        for key in ("experts_per_layer", "top_k"):
            if key in doc and isinstance(doc[key], list):
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def digest(self) -> str:
        return config_digest(self.to_dict())


@dataclass(frozen=True)
class TrainingBatchStats:
    """Per-batch routing statistics: mean softmax gate usage per layer."""

    mean_gate_usage: tuple[np.ndarray, ...]
    distill_loss: float | None = None
    omega: float | None = None

    def __post_init__(self) -> None:
        usage = tuple(np.asarray(u, dtype=np.float64) for u in self.mean_gate_usage)
        object.__setattr__(self, "mean_gate_usage", usage)
        for layer, u in enumerate(usage):
            if abs(float(u.sum()) - 1.0) > GATE_SUM_TOL:
                raise ShadowMoeError(
                    f"layer {layer}: mean gate usage sums to {float(u.sum())!r}, not 1"
                )


def load_balance_loss(stats: TrainingBatchStats) -> float:
    """Squared deviation of mean gate usage from uniform, summed over layers.

    Each layer contributes E * sum_i (mean_usage_i - 1/E)^2; zero exactly
    when usage is uniform in every layer.
    """
    total = 0.0
    for usage in stats.mean_gate_usage:
        e = usage.shape[0]
        total += float(e * np.sum((usage - 1.0 / e) ** 2))
    return total


@dataclass
class _LayerCache:
    h_in: np.ndarray
    gates: np.ndarray  # (B, E) softmax
    topk: np.ndarray  # (B, k) selected indices, descending gate order
    sel_weights: np.ndarray  # (B, k) renormalized
    sel_sum: np.ndarray  # (B,)
    w_full: np.ndarray  # (B, E) renormalized weights scattered, 0 elsewhere
    mid: np.ndarray  # (B, E, H) expert hidden activations
    expert_out: np.ndarray  # (B, E, H)


@dataclass
class ShadowMoeModel:
    """Parameter container plus forward/training machinery."""

    config: ShadowMoeConfig
    w_in: np.ndarray
    b_in: np.ndarray
    routers: list[np.ndarray]
    expert_u: list[np.ndarray]
    expert_c: list[np.ndarray]
    expert_v: list[np.ndarray]
    expert_d: list[np.ndarray]
    w_out: np.ndarray
    b_out: np.ndarray

    @classmethod
    def initialize(cls, config: ShadowMoeConfig) -> "ShadowMoeModel":
        rng = substream(config.seed, "shadow-init")
        h, i, o = config.hidden_dim, config.input_dim, config.output_dim
        routers, e_u, e_c, e_v, e_d = [], [], [], [], []
        for e in config.experts_per_layer:
            routers.append(rng.normal(0.0, 1.0 / np.sqrt(h), size=(e, h)))
            e_u.append(rng.normal(0.0, 1.0 / np.sqrt(h), size=(e, h, h)))
            e_c.append(np.zeros((e, h)))
            e_v.append(rng.normal(0.0, 1.0 / np.sqrt(h), size=(e, h, h)))
            e_d.append(np.zeros((e, h)))
        return cls(
            config=config,
            w_in=rng.normal(0.0, 1.0 / np.sqrt(i), size=(h, i)),
            b_in=np.zeros(h),
            routers=routers,
            expert_u=e_u,
            expert_c=e_c,
            expert_v=e_v,
            expert_d=e_d,
            w_out=rng.normal(0.0, 1.0 / np.sqrt(h), size=(o, h)),
            b_out=np.zeros(o),
        )

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        items = [("w_in", self.w_in), ("b_in", self.b_in)]
        for layer in range(self.config.num_layers):
            items.extend(
                [
                    (f"router.{layer}", self.routers[layer]),
                    (f"expert_u.{layer}", self.expert_u[layer]),
                    (f"expert_c.{layer}", self.expert_c[layer]),
                    (f"expert_v.{layer}", self.expert_v[layer]),
                    (f"expert_d.{layer}", self.expert_d[layer]),
                ]
            )
        items.extend([("w_out", self.w_out), ("b_out", self.b_out)])
        return items

    def _forward_batch(self, x: np.ndarray) -> tuple[np.ndarray, list[_LayerCache]]:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ShadowMoeError(f"expected inputs of shape (n, {cfg.input_dim}), got {x.shape}")
        h = np.tanh(x @ self.w_in.T + self.b_in)
        caches: list[_LayerCache] = []
        for layer in range(cfg.num_layers):
            k = cfg.top_k[layer]
            logits = h @ self.routers[layer].T
            shifted = logits - logits.max(axis=1, keepdims=True)
            exp = np.exp(shifted)
            gates = exp / exp.sum(axis=1, keepdims=True)
            # stable argsort on logits: equal scores resolve to the lower index
            topk = np.argsort(-logits, axis=1, kind="stable")[:, :k]
            sel = np.take_along_axis(gates, topk, axis=1)
            sel_sum = sel.sum(axis=1)
            weights = sel / sel_sum[:, None]
            w_full = np.zeros_like(gates)
            np.put_along_axis(w_full, topk, weights, axis=1)
            mid = np.tanh(
                np.einsum("eij,bj->bei", self.expert_u[layer], h) + self.expert_c[layer][None]
            )
            expert_out = (
                np.einsum("eij,bej->bei", self.expert_v[layer], mid) + self.expert_d[layer][None]
            )
            out = np.einsum("be,beh->bh", w_full, expert_out)
            caches.append(
                _LayerCache(
                    h_in=h,
                    gates=gates,
                    topk=topk,
                    sel_weights=weights,
                    sel_sum=sel_sum,
                    w_full=w_full,
                    mid=mid,
                    expert_out=expert_out,
                )
            )
            h = out
        y = h @ self.w_out.T + self.b_out
        if not np.all(np.isfinite(y)):
            raise ShadowMoeError("non-finite activations in forward pass")
        return y, caches

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Batch forward without routing records; usable as a training oracle."""
        y, _ = self._forward_batch(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return y

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[tuple[np.ndarray, tuple[int, ...]]]]:
        """Single-input forward pass.

        Returns the output vector and, per layer, the full softmax gate
        vector together with the selected top-k expert set (ascending
        indices; score ties resolve to the lower index).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ShadowMoeError(f"forward expects a single input vector, got shape {x.shape}")
        y, caches = self._forward_batch(x[None, :])
        routing = [
            (cache.gates[0].copy(), tuple(sorted(int(i) for i in cache.topk[0])))
            for cache in caches
        ]
        return y[0], routing

    def batch_stats(self, x: np.ndarray, targets: np.ndarray | None = None) -> TrainingBatchStats:
        """Routing statistics (and losses, when targets are given) for a batch."""
        y, caches = self._forward_batch(x)
        usage = tuple(cache.gates.mean(axis=0) for cache in caches)
        distill = None
        if targets is not None:
            distill = float(np.mean((y - np.asarray(targets, dtype=np.float64)) ** 2))
        stats = TrainingBatchStats(mean_gate_usage=usage, distill_loss=distill)
        return TrainingBatchStats(
            mean_gate_usage=usage, distill_loss=distill, omega=load_balance_loss(stats)
        )

    def loss_and_grads(
        self, x: np.ndarray, targets: np.ndarray, lam: float | None = None
    ) -> tuple[float, float, float, dict[str, np.ndarray]]:
        """Total loss (MSE + lam * balance penalty) and analytic gradients.

        The top-k index sets are held fixed; gradients reach the routers
        through the renormalized weights of the selected gates and through
        the dense balance penalty on all gates.
        """
        cfg = self.config
        if lam is None:
            lam = cfg.load_balance_weight
        t = np.asarray(targets, dtype=np.float64)
        y, caches = self._forward_batch(x)
        if t.shape != y.shape:
            raise ShadowMoeError(f"target shape {t.shape} does not match output {y.shape}")
        n = x.shape[0]
        with np.errstate(over="ignore", invalid="ignore"):
            distill = float(np.mean((y - t) ** 2))
        omega = 0.0
        for cache in caches:
            e = cache.gates.shape[1]
            p_bar = cache.gates.mean(axis=0)
            omega += float(e * np.sum((p_bar - 1.0 / e) ** 2))
        total = distill + lam * omega

        grads: dict[str, np.ndarray] = {}
        dy = 2.0 * (y - t) / y.size
        h_last = np.einsum("be,beh->bh", caches[-1].w_full, caches[-1].expert_out)
        grads["w_out"] = dy.T @ h_last
        grads["b_out"] = dy.sum(axis=0)
        dh = dy @ self.w_out

        for layer in reversed(range(cfg.num_layers)):
            cache = caches[layer]
            e = cache.gates.shape[1]
            de_out = cache.w_full[:, :, None] * dh[:, None, :]
            dw_full = np.einsum("beh,bh->be", cache.expert_out, dh)

            grads[f"expert_v.{layer}"] = np.einsum("bei,bej->eij", de_out, cache.mid)
            grads[f"expert_d.{layer}"] = de_out.sum(axis=0)
            dmid = np.einsum("eij,bei->bej", self.expert_v[layer], de_out)
            da = dmid * (1.0 - cache.mid**2)
            grads[f"expert_u.{layer}"] = np.einsum("bei,bj->eij", da, cache.h_in)
            grads[f"expert_c.{layer}"] = da.sum(axis=0)
            dh_experts = np.einsum("eij,bei->bj", self.expert_u[layer], da)

            dw_sel = np.take_along_axis(dw_full, cache.topk, axis=1)
            inner = (dw_sel * cache.sel_weights).sum(axis=1, keepdims=True)
            dp_sel = (dw_sel - inner) / cache.sel_sum[:, None]
            dgates = np.zeros_like(cache.gates)
            np.put_along_axis(dgates, cache.topk, dp_sel, axis=1)
            if lam > 0:
                p_bar = cache.gates.mean(axis=0)
                dgates = dgates + lam * 2.0 * e * (p_bar - 1.0 / e)[None, :] / n
            dot = (dgates * cache.gates).sum(axis=1, keepdims=True)
            dlogits = cache.gates * (dgates - dot)
            grads[f"router.{layer}"] = dlogits.T @ cache.h_in
            dh = dh_experts + dlogits @ self.routers[layer]

        h0 = caches[0].h_in
        da0 = dh * (1.0 - h0**2)
        grads["w_in"] = da0.T @ np.asarray(x, dtype=np.float64)
        grads["b_in"] = da0.sum(axis=0)
        return total, distill, omega, grads

    def selection_margin(self, x: np.ndarray) -> float:
        """Smallest gap between the k-th and (k+1)-th gate over all layers and inputs.

        Infinite when k equals the expert count everywhere (no selection
        boundary exists). Gradient checks are only meaningful when this
        margin is comfortably positive.
        """
        _, caches = self._forward_batch(np.atleast_2d(x))
        margin = np.inf
        for layer, cache in enumerate(caches):
            k = self.config.top_k[layer]
            e = cache.gates.shape[1]
            if k == e:
                continue
            ordered = -np.sort(-cache.gates, axis=1)
            margin = min(margin, float((ordered[:, k - 1] - ordered[:, k]).min()))
        return margin

    def save(self, path: str | Path) -> None:
        """Versioned binary: magic, JSON manifest line, raw float64 tensors."""
        items = self.param_items()
        manifest = {
            "format": "shadow-moe-model",
            "version": 1,
            "config": self.config.to_dict(),
            "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in items],
        }
        with Path(path).open("wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8"))
            fh.write(b"\n")
            for _, arr in items:
                buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
                fh.write(struct.pack("<Q", len(buf)))
                fh.write(buf)

    @classmethod
    def load(cls, path: str | Path) -> "ShadowMoeModel":
        with Path(path).open("rb") as fh:
            magic = fh.read(len(MODEL_MAGIC))
            if magic != MODEL_MAGIC:
                raise ShadowMoeError(f"{path}: not a shadow-moe model file")
            manifest = json.loads(fh.readline().decode("utf-8"))
            if manifest.get("version") != 1:
                raise ShadowMoeError(f"{path}: unsupported model version")
            config = ShadowMoeConfig.from_dict(manifest["config"])
            model = cls.initialize(config)
            named = dict(model.param_items())
            for entry in manifest["tensors"]:
                (size,) = struct.unpack("<Q", fh.read(8))
                buf = fh.read(size)
                arr = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).copy()
                target = named[entry["name"]]
                if target.shape != arr.shape:
                    raise ShadowMoeError(f"{path}: tensor {entry['name']} shape mismatch")
                target[...] = arr
        return model

    @property
    def model_id(self) -> str:
        return f"shadow-moe-{self.config.digest()}"


@dataclass(frozen=True)
class QuerySet:
    """Labeled inputs shared by proxy training and trace export."""

    query_ids: tuple[str, ...]
    inputs: np.ndarray  # (n, input_dim)
    domains: tuple[str, ...]

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float64)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "query_ids", tuple(self.query_ids))
        object.__setattr__(self, "domains", tuple(self.domains))
        n = inputs.shape[0]
        if len(self.query_ids) != n or len(self.domains) != n:
            raise ShadowMoeError("query_ids, inputs, and domains must have equal length")
        if any(not d for d in self.domains):
            raise ShadowMoeError("every query needs a domain label")
        if len(set(self.query_ids)) != n:
            raise ShadowMoeError("query ids must be unique")

    def __len__(self) -> int:
        return len(self.query_ids)

    def domain_labels(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for d in self.domains:
            seen.setdefault(d, None)
        return tuple(seen)


def gaussian_domain_queries(
    seed: int,
    num_domains: int,
    n_per_domain: int,
    input_dim: int,
    separation: float = 2.0,
    spread: float = 0.5,
    label_prefix: str = "d",
) -> QuerySet:
    """Domain-clustered Gaussian inputs: one well-separated center per domain."""
    rng = substream(seed, "queries")
    centers = rng.normal(0.0, 1.0, size=(num_domains, input_dim)) * separation
    ids, xs, labels = [], [], []
    idx = 0
    for d in range(num_domains):
        pts = centers[d] + rng.normal(0.0, 1.0, size=(n_per_domain, input_dim)) * spread
        for row in pts:
            ids.append(f"q{idx:06d}")
            xs.append(row)
            labels.append(f"{label_prefix}{d + 1}")
            idx += 1
    return QuerySet(query_ids=tuple(ids), inputs=np.array(xs), domains=tuple(labels))


def write_queries(queries: QuerySet, path: str | Path, meta: dict | None = None) -> None:
    header = {
        "schema_version": 1,
        "kind": "query-set",
        "input_dim": int(queries.inputs.shape[1]),
    }
    if meta:
        header["meta"] = meta
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for qid, x, dom in zip(queries.query_ids, queries.inputs, queries.domains):
            rec = {"query_id": qid, "domain": dom, "x": [float(v) for v in x]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_queries(path: str | Path) -> QuerySet:
    path = Path(path)
    ids, xs, labels = [], [], []
    header = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            doc = json.loads(line)
            if header is None:
                if doc.get("kind") != "query-set":
                    raise ShadowMoeError(f"{path}: line {lineno}: expected a query-set header")
                header = doc
                continue
            ids.append(doc["query_id"])
            xs.append(doc["x"])
            labels.append(doc["domain"])
    if header is None or not ids:
        raise ShadowMoeError(f"{path}: empty query file")
    inputs = np.asarray(xs, dtype=np.float64)
    if inputs.shape[1] != int(header["input_dim"]):
        raise ShadowMoeError(f"{path}: input_dim mismatch with header")
    return QuerySet(query_ids=tuple(ids), inputs=inputs, domains=tuple(labels))


def mlp_oracle(
    seed: int, input_dim: int, output_dim: int, hidden_dim: int = 16, scale: float = 1.0
) -> Oracle:
    """Fixed random two-layer tanh network; a generic nonlinear black box."""
    rng = substream(seed, "oracle-mlp")
    w1 = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(hidden_dim, input_dim))
    b1 = rng.normal(0.0, 0.3, size=hidden_dim)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=(output_dim, hidden_dim))

    def oracle(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return scale * (np.tanh(x @ w1.T + b1) @ w2.T)

    return oracle


def linear_oracle(seed: int, input_dim: int, output_dim: int, scale: float = 1.0) -> Oracle:
    """Fixed random affine map."""
    rng = substream(seed, "oracle-linear")
    w = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(output_dim, input_dim))
    b = rng.normal(0.0, 0.1, size=output_dim)

    def oracle(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return scale * (x @ w.T + b)

    return oracle


def model_oracle(model: ShadowMoeModel) -> Oracle:
    """Treat a trained proxy as a black-box oracle (its input-output map only)."""
    return model.predict


def train_proxy(
    oracle: Oracle,
    queries: QuerySet | np.ndarray,
    config: ShadowMoeConfig,
) -> tuple[ShadowMoeModel, list[float]]:
    """Fit a proxy to an oracle by mini-batch gradient descent.

    Returns the trained model and the distillation-loss curve; entry 0 is
    the loss before any update, entry e the full-dataset loss after epoch e.
    Training is seed-deterministic: identical config and data give bitwise
    identical parameters.
    """
    x = queries.inputs if isinstance(queries, QuerySet) else np.asarray(queries, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShadowMoeError(f"queries must be a nonempty (n, input_dim) array, got {x.shape}")
    targets = np.asarray(oracle(x), dtype=np.float64)
    if targets.shape != (x.shape[0], config.output_dim):
        raise ShadowMoeError(
            f"oracle returned shape {targets.shape}, expected ({x.shape[0]}, {config.output_dim})"
        )
    if not np.all(np.isfinite(targets)):
        raise ShadowMoeError("oracle returned non-finite targets")

    model = ShadowMoeModel.initialize(config)
    rng = substream(config.seed, "shadow-train")
    n = x.shape[0]
    lam = config.load_balance_weight
    velocity: dict[str, np.ndarray] = {}

    def full_distill_loss() -> float:
        # divergence shows up as inf/nan here and is reported, not warned about
        with np.errstate(over="ignore", invalid="ignore"):
            return float(np.mean((model.predict(x) - targets) ** 2))

    losses = [full_distill_loss()]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            total, _, _, grads = model.loss_and_grads(x[batch], targets[batch], lam=lam)
            if not np.isfinite(total):
                raise ShadowMoeError(
                    f"training diverged at epoch {epoch}: batch loss {total!r} "
                    f"(lr={config.learning_rate}, lambda={lam})"
                )
            for name, param in model.param_items():
                g = grads[name]
                if config.momentum > 0:
                    v = velocity.get(name)
                    if v is None:
                        v = np.zeros_like(param)
                        velocity[name] = v
                    v *= config.momentum
                    v += g
                    g = v
                param -= config.learning_rate * g
        loss = full_distill_loss()
        if not np.isfinite(loss):
            raise ShadowMoeError(f"training diverged at epoch {epoch}: loss {loss!r}")
        losses.append(loss)
    return model, losses


def export_traces(
    model: ShadowMoeModel,
    queries: QuerySet,
    model_id: str | None = None,
) -> RoutingTraceSet:
    """Run the proxy over labeled queries and record per-layer top-k sets."""
    cfg = model.config
    _, caches = model._forward_batch(queries.inputs)
    labels = queries.domain_labels()
    label_index = {lab: i + 1 for i, lab in enumerate(labels)}
    records = []
    for q, qid in enumerate(queries.query_ids):
        dom = label_index[queries.domains[q]]
        for layer, cache in enumerate(caches):
            selected = tuple(sorted(int(i) for i in cache.topk[q]))
            records.append((qid, dom, layer, selected))
    return build_trace_set(
        model_id=model_id if model_id is not None else model.model_id,
        num_layers=cfg.num_layers,
        experts_per_layer=cfg.experts_per_layer,
        domains=labels,
        records=records,
        meta={"seed": cfg.seed, "config_digest": cfg.digest()},
    )
