"""Per-shape multi-stage fitting of the quadric CSG model.

Stage 0 trains with the soft union/difference and the squared-error loss
while the union weights ramp up from 1e-5.  Stage 1 switches to the hard
(min/max) indicators and the weighted L1-style loss.  Stage 2 quantises the
selection matrix in the forward pass and keeps training the continuous
matrix through a straight-through gradient.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import csg, losses
from .autodiff import Graph, grad_norm
from .primitives import DECODER_PARAMS, Decoder, feature_map, primitive_expr
from .sampling import QuerySet, make_rng

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"QCKP"
CHECKPOINT_FORMAT = "quadcsg-checkpoint-v1"

LOSS_KIND = {0: "stage0_soft_l2", 1: "stage12_weighted_l1", 2: "stage12_weighted_l1_hardT"}


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass
class FitConfig:
    p: int = 1024
    c: int = 64
    latent_size: int = 256
    hidden: int = 512
    iterations: int = 12000
    batch_size: int = 4096
    learning_rate: float = 1e-4
    eta: float = 0.01
    w_left: float = 10.0
    w_right: float = 2.5
    margin: float = 0.2
    seed: int = 0
    precision: str = "float64"
    ramp_start: float = 1e-5
    ramp_fraction: float = 0.25
    grad_clip: float = 10.0
    straight_through: bool = True
    init_t_max: float = 0.1

    def validate(self) -> "FitConfig":
        problems = []
        if not self.p >= self.c >= 2:
            problems.append(f"need p >= c >= 2 (p={self.p}, c={self.c})")
        if self.c % 2:
            problems.append(f"c must be even (c={self.c})")
        if self.iterations < 1:
            problems.append("iterations must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 0.0 < self.eta < 1.0:
            problems.append(f"eta must lie in (0, 1) (eta={self.eta})")
        if self.precision not in ("float32", "float64"):
            problems.append(f"precision must be float32 or float64 ({self.precision!r})")
        if not 0.0 < self.ramp_start <= 1.0:
            problems.append("ramp_start must lie in (0, 1]")
        if self.learning_rate <= 0 or self.w_left <= 0 or self.w_right <= 0:
            problems.append("learning_rate, w_left and w_right must be positive")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.reset()

    def reset(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            denom = np.sqrt(v)
            denom *= 1.0 / math.sqrt(bc2)
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= self.lr / bc1
            params[name] -= denom


@dataclass
class ModelState:
    config: FitConfig
    params: dict[str, np.ndarray]
    stage: int = 0
    iteration: int = 0
    optimizer: Adam | None = None
    trace: list = field(default_factory=list)  # (stage, iteration, loss kind, value)
    _graphs: dict = field(default_factory=dict, repr=False)

    @property
    def dtype(self):
        return np.dtype(self.config.precision)

    def decoder(self) -> Decoder:
        return Decoder(**{k: self.params[k] for k in DECODER_PARAMS})

    def primitives(self) -> np.ndarray:
        from .primitives import decode_primitives
        return decode_primitives(Decoder(**{k: np.asarray(self.params[k], np.float64)
                                            for k in DECODER_PARAMS}))

    def selection(self) -> np.ndarray:
        """The selection matrix used by the forward pass of the current stage."""
        T = np.asarray(self.params["T"], dtype=np.float64)
        return csg.quantize_selection(T, self.config.eta) if self.stage == 2 else T

    def advance_stage(self) -> None:
        if self.stage >= 2:
            raise RuntimeError("already in the final stage")
        self.stage += 1
        self.iteration = 0
        self.optimizer.reset()

    def ramp_scale(self) -> float:
        """Union weight multiplier: log-linear from ``ramp_start`` to 1 over the ramp window."""
        cfg = self.config
        window = cfg.ramp_fraction * cfg.iterations
        u = 1.0 if window <= 0 else min(1.0, self.iteration / window)
        return float(cfg.ramp_start ** (1.0 - u))


def init_model(config: FitConfig, rng=None) -> ModelState:
    config.validate()
    rng = make_rng(config.seed, "model") if rng is None else rng
    dtype = np.dtype(config.precision)
    dec = Decoder.init(config.p, rng, config.latent_size, config.hidden)
    params = {k: v.astype(dtype) for k, v in dec.params().items()}
    params["T"] = rng.uniform(0.0, config.init_t_max, (config.p, config.c)).astype(dtype)
    params["W"] = np.ones((config.c, 1), dtype=dtype)
    return ModelState(config, params, optimizer=Adam(config.learning_rate))


@dataclass
class StageGraph:
    graph: Graph
    loss: losses.LossBreakdown
    a_left: object
    a_right: object


def build_stage_graph(config: FitConfig, stage: int, n: int,
                      straight_through: bool | None = None) -> StageGraph:
    """Loss graph for one stage over a batch of ``n`` points.

    Leaves: decoder params, ``T`` (and ``W`` in stage 0); inputs ``features``
    (n x 7, the transposed feature map), ``gt`` (n x 1) and, in stage 0,
    ``ramp`` (c x 1).
    """
    st = config.straight_through if straight_through is None else straight_through
    g = Graph(config.precision)
    P = primitive_expr(g, config.p, config.latent_size, config.hidden)
    feats = g.input("features", (n, 7))
    gt = g.input("gt", (n, 1))
    T = g.param("T", (config.p, config.c))
    D = feats @ P.T
    half = config.c // 2
    if stage == 0:
        C = csg.intersect(D, T)
        W = g.param("W", (config.c, 1))
        ramp = g.input("ramp", (config.c, 1))
        C_l, C_r = csg.split_halves(C)
        a_l = csg.soft_union(C_l, W.rows(0, half), ramp.rows(0, half))
        a_r = csg.soft_union(C_r, W.rows(half, config.c), ramp.rows(half, config.c))
        loss = losses.stage0_loss(a_l, a_r, gt, T, W)
    else:
        if stage == 2:
            T_fwd = g.quantize(T, config.eta, straight_through=st)
            T_reg = g.quantize(T, config.eta, straight_through=False)
        else:
            T_fwd = T_reg = T
        C = csg.intersect(D, T_fwd)
        C_l, C_r = csg.split_halves(C)
        a_l, a_r = csg.hard_union(C_l), csg.hard_union(C_r)
        loss = losses.stage12_loss(a_l, a_r, gt, T_reg, config.w_left, config.w_right)
    return StageGraph(g, loss, a_l, a_r)


def _stage_graph(state: ModelState, n: int) -> StageGraph:
    key = (state.stage, n)
    if key not in state._graphs:
        state._graphs = {key: build_stage_graph(state.config, state.stage, n)}
    return state._graphs[key]


def _param_norms(params):
    return {k: float(np.linalg.norm(v)) for k, v in params.items()}


def _diverged(state, what):
    raise DivergenceError(
        f"non-finite {what} at stage {state.stage} iteration {state.iteration}; "
        f"parameter norms {_param_norms(state.params)}"
    )


def train_step(state: ModelState, features: np.ndarray, gt: np.ndarray) -> float:
    """One Adam step on a minibatch.  ``features`` is n x 7, ``gt`` holds 0/1 labels.

    Updates ``state`` in place and returns the total loss before the step.
    """
    cfg = state.config
    sg = _stage_graph(state, len(features))
    bindings = {name: state.params[name] for name in sg.graph.param_names}
    bindings["features"] = features
    bindings["gt"] = np.asarray(gt, dtype=state.dtype).reshape(-1, 1)
    if state.stage == 0:
        bindings["ramp"] = np.full((cfg.c, 1), state.ramp_scale(), dtype=state.dtype)
    (total,) = sg.graph.evaluate(bindings, [sg.loss.total])
    value = float(total[0, 0])
    if not math.isfinite(value):
        _diverged(state, "loss")
    grads = sg.graph.backward(sg.loss.total)
    with np.errstate(over="ignore", invalid="ignore"):
        norm = grad_norm(grads)
    if not math.isfinite(norm):
        _diverged(state, "gradient")
    if norm > cfg.grad_clip:
        grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    state.optimizer.step(state.params, grads)
    state.trace.append((state.stage, state.iteration, LOSS_KIND[state.stage], value))
    state.iteration += 1
    return value


def minibatches(n: int, batch_size: int, rng):
    """Endless stream of index batches; reshuffles every epoch, never a short batch."""
    batch_size = min(batch_size, n)
    order = rng.permutation(n)
    pos = 0
    while True:
        if pos + batch_size > n:
            order = np.concatenate([order[pos:], rng.permutation(n)])
            pos = 0
        yield order[pos:pos + batch_size]
        pos += batch_size


@dataclass
class FittedModel:
    primitives: np.ndarray  # p x 7, constrained
    selection: np.ndarray  # p x c, binary
    n_left: int
    margin: float
    config: FitConfig
    trace: list = field(default_factory=list)
    state: ModelState | None = field(default=None, repr=False)

    @property
    def hard(self) -> csg.HardModel:
        return csg.HardModel(self.primitives, self.selection, self.n_left, self.margin)

    def field(self, points) -> np.ndarray:
        return csg.hard_field(self.primitives, self.selection, points, self.n_left, self.margin)

    def occupancy(self, points) -> np.ndarray:
        return self.field(points) <= 0.0

    def soft_occupancy(self, points, threshold: float = 0.01) -> np.ndarray:
        """Occupancy from the un-quantised selection (clamped to [0, 1])."""
        T = np.clip(np.asarray(self.state.params["T"], np.float64), 0.0, 1.0)
        return csg.hard_field(self.primitives, T, points, self.n_left, self.margin) < threshold


def fitted_from_state(state: ModelState) -> FittedModel:
    cfg = state.config
    T_hard = csg.quantize_selection(np.asarray(state.params["T"], np.float64), cfg.eta)
    return FittedModel(state.primitives(), T_hard, cfg.c // 2, cfg.margin, cfg,
                       list(state.trace), state)


def reconstruct(queries: QuerySet, config: FitConfig, progress=None,
                stage_times: dict | None = None) -> FittedModel:
    """Run stages 0, 1 and 2 on ``queries`` and return the quantised model."""
    import time

    config.validate()
    labels = np.asarray(queries.occupancy, dtype=bool)
    if labels.all() or not labels.any():
        raise DegenerateInputError("all query labels are equal; nothing to reconstruct")
    state = init_model(config)
    rng = make_rng(config.seed, "batches")
    feats = feature_map(queries.points).T.astype(state.dtype)
    gt = labels.astype(state.dtype)
    batches = minibatches(len(feats), config.batch_size, rng)
    for stage in range(3):
        if stage:
            state.advance_stage()
        start = time.perf_counter()
        for _ in range(config.iterations):
            idx = next(batches)
            loss = train_step(state, feats[idx], gt[idx])
            if progress is not None:
                progress(state, loss)
        if stage_times is not None:
            stage_times[stage] = time.perf_counter() - start
        log.info("stage %d done, last loss %.6f", stage, loss)
    return fitted_from_state(state)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, state: ModelState, queries: QuerySet | None = None) -> None:
    """Write config, stage and all parameter matrices (plus the training queries).

    Layout: magic, uint32 header length, JSON header, then raw little-endian
    array bytes in header order.  Output is byte-for-byte deterministic.
    """
    arrays = dict(sorted(state.params.items()))
    if queries is not None:
        arrays["queries.points"] = queries.points
        arrays["queries.occupancy"] = queries.occupancy.astype(np.uint8)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="),
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(state.config),
        "stage": state.stage,
        "iteration": state.iteration,
        "query_source": None if queries is None else queries.source,
        "arrays": entries,
    }
    head = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs))
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Return ``(state, queries_or_None)`` from :func:`save_checkpoint` output."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC or len(data) < 8:
        raise CheckpointError(f"{path}: not a checkpoint (expected format {CHECKPOINT_FORMAT})")
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8:8 + hlen])
    except ValueError:
        raise CheckpointError(f"{path}: corrupt header") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path}: format {header.get('format')!r}, expected {CHECKPOINT_FORMAT!r}"
        )
    try:
        state, queries = _decode_checkpoint(header, data[8 + hlen:], path)
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return state, queries


def _decode_checkpoint(header, body, path):
    arrays = {}
    for e in header["arrays"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"]).newbyteorder("<")) \
            .astype(e["dtype"]).reshape(e["shape"])
    config = FitConfig.from_dict(header["config"]).validate()
    params = {k: v for k, v in arrays.items() if not k.startswith("queries.")}
    missing = {"T", "W", *DECODER_PARAMS} - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing arrays {sorted(missing)}")
    state = ModelState(config, params, stage=header["stage"], iteration=header["iteration"],
                       optimizer=Adam(config.learning_rate))
    queries = None
    if "queries.points" in arrays:
        queries = QuerySet(arrays["queries.points"], arrays["queries.occupancy"].astype(bool),
                           header["query_source"])
    return state, queries


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
