"""Trainable estimation heads over precomputed per-object features.

Three independent two-layer branches map a feature vector to dimension
deviations (3), bin scores (n) and bin residuals (2n).  Each branch is
fc -> relu -> fc with no output activation.  Everything here is plain
numpy: forward caches activations, backward consumes the flat loss
gradient from losses.total_loss, and the optimizer is AdamW with
decoupled weight decay plus a reduce-on-plateau schedule.

Weights persist in a small binary container: the magic bytes MLW1, a
length-prefixed JSON metadata block, then the float32 little-endian
tensors of the three branches in order (dims, scores, residuals), each
as w1 row-major, b1, w2, b2.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .fileutil import atomic_write_bytes
from .multibin import BinLayout, BinPrediction, decode, make_layout

WEIGHTS_MAGIC = b"MLW1"
REQUIRED_META_KEYS = ("feature_dim", "hidden_dim", "n_bins",
                      "overlap_fraction", "dims_mean", "seed")


@dataclass(frozen=True)
class HeadConfig:
    feature_dim: int = 1280
    hidden_dim: int = 256
    n_bins: int = 2
    overlap_fraction: float = 0.1

    def __post_init__(self):
        if self.feature_dim < 1 or self.hidden_dim < 1:
            raise ValueError(f"feature_dim and hidden_dim must be >= 1, "
                             f"got {self.feature_dim} and {self.hidden_dim}")
        if self.n_bins < 1:
            raise ValueError(f"n_bins must be >= 1, got {self.n_bins}")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError(f"overlap_fraction must be in [0, 1), got {self.overlap_fraction}")

    def layout(self) -> BinLayout:
        return make_layout(self.n_bins, self.overlap_fraction)


@dataclass(frozen=True)
class BranchParams:
    w1: np.ndarray  # (hidden, in)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (out, hidden)
    b2: np.ndarray  # (out,)


@dataclass(frozen=True)
class HeadParams:
    dims: BranchParams
    scores: BranchParams
    residuals: BranchParams


BRANCH_NAMES = ("dims", "scores", "residuals")
LEAF_NAMES = ("w1", "b1", "w2", "b2")


def branch_output_sizes(n_bins: int) -> dict:
    return {"dims": 3, "scores": n_bins, "residuals": 2 * n_bins}


def leaf_arrays(params: HeadParams):
    """Yield (name, array) for every tensor, in the fixed storage order."""
    for branch in BRANCH_NAMES:
        bp = getattr(params, branch)
        for leaf in LEAF_NAMES:
            yield f"{branch}.{leaf}", getattr(bp, leaf)


def init_params(config: HeadConfig, seed) -> HeadParams:
    """Draw uniform(+-sqrt(6/fan_in)) weights and zero biases, seeded.

    seed may be an int, a SeedSequence or a Generator.
    """
    rng = np.random.default_rng(seed)
    sizes = branch_output_sizes(config.n_bins)

    def branch(out_dim):
        def layer(fan_in, fan_out):
            bound = np.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, size=(fan_out, fan_in))

        return BranchParams(
            w1=layer(config.feature_dim, config.hidden_dim),
            b1=np.zeros(config.hidden_dim),
            w2=layer(config.hidden_dim, out_dim),
            b2=np.zeros(out_dim),
        )

    return HeadParams(dims=branch(sizes["dims"]),
                      scores=branch(sizes["scores"]),
                      residuals=branch(sizes["residuals"]))


def zeros_like_params(params: HeadParams) -> HeadParams:
    def zb(bp):
        return BranchParams(w1=np.zeros_like(bp.w1), b1=np.zeros_like(bp.b1),
                            w2=np.zeros_like(bp.w2), b2=np.zeros_like(bp.b2))

    return HeadParams(dims=zb(params.dims), scores=zb(params.scores),
                      residuals=zb(params.residuals))


def params_astype(params: HeadParams, dtype) -> HeadParams:
    def cast(bp):
        return BranchParams(w1=bp.w1.astype(dtype), b1=bp.b1.astype(dtype),
                            w2=bp.w2.astype(dtype), b2=bp.b2.astype(dtype))

    return HeadParams(dims=cast(params.dims), scores=cast(params.scores),
                      residuals=cast(params.residuals))


def params_to_vector(params: HeadParams) -> np.ndarray:
    return np.concatenate([a.reshape(-1) for _, a in leaf_arrays(params)])


def vector_to_params(vec, config: HeadConfig) -> HeadParams:
    vec = np.asarray(vec, dtype=float)
    sizes = branch_output_sizes(config.n_bins)
    pos = 0
    branches = {}
    for branch in BRANCH_NAMES:
        out_dim = sizes[branch]
        shapes = [(config.hidden_dim, config.feature_dim), (config.hidden_dim,),
                  (out_dim, config.hidden_dim), (out_dim,)]
        leaves = []
        for shape in shapes:
            n = int(np.prod(shape))
            leaves.append(vec[pos:pos + n].reshape(shape).copy())
            pos += n
        branches[branch] = BranchParams(*leaves)
    if pos != vec.shape[0]:
        raise ValueError(f"vector has {vec.shape[0]} entries, expected {pos}")
    return HeadParams(dims=branches["dims"], scores=branches["scores"],
                      residuals=branches["residuals"])


@dataclass(frozen=True)
class ForwardCache:
    x: np.ndarray
    relu_mask: dict  # branch name -> (B, hidden) bool
    hidden: dict  # branch name -> (B, hidden) post-relu


def forward(params: HeadParams, features) -> tuple:
    """Run all branches on a (B, feature_dim) batch.

    Returns (BatchPredictions, ForwardCache).  Computation stays in the
    dtype of the inputs, so float32 params and features give a float32
    pass.
    """
    x = np.ascontiguousarray(features)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-d, got shape {x.shape}")
    outs, masks, hiddens = {}, {}, {}
    for branch in BRANCH_NAMES:
        bp = getattr(params, branch)
        pre = x @ bp.w1.T + bp.b1
        mask = pre > 0
        a = pre * mask
        outs[branch] = a @ bp.w2.T + bp.b2
        masks[branch] = mask
        hiddens[branch] = a
    n_bins = params.scores.b2.shape[0]
    pred = losses.BatchPredictions(
        delta_dims=outs["dims"],
        scores=outs["scores"],
        residual_sc=outs["residuals"].reshape(x.shape[0], n_bins, 2),
    )
    return pred, ForwardCache(x=x, relu_mask=masks, hidden=hiddens)


def backward(params: HeadParams, cache: ForwardCache, flat_grad) -> HeadParams:
    """Backpropagate a flat total_loss gradient into parameter gradients."""
    batch = cache.x.shape[0]
    n_bins = params.scores.b2.shape[0]
    parts = losses.unflatten_batch(flat_grad, batch, n_bins)
    g_out = {
        "dims": parts.delta_dims,
        "scores": parts.scores,
        "residuals": parts.residual_sc.reshape(batch, 2 * n_bins),
    }
    grads = {}
    for branch in BRANCH_NAMES:
        bp = getattr(params, branch)
        g = g_out[branch]
        a = cache.hidden[branch]
        g_hidden = (g @ bp.w2) * cache.relu_mask[branch]
        grads[branch] = BranchParams(
            w1=g_hidden.T @ cache.x,
            b1=g_hidden.sum(axis=0),
            w2=g.T @ a,
            b2=g.sum(axis=0),
        )
    return HeadParams(dims=grads["dims"], scores=grads["scores"],
                      residuals=grads["residuals"])


def loss_forward_backward(params: HeadParams, features, targets: losses.BatchTargets,
                          loss_cfg: losses.LossConfig, layout: BinLayout) -> tuple:
    """Convenience pass: forward, total_loss, backward.  Returns (value, grads)."""
    pred, cache = forward(params, features)
    lv = losses.total_loss(pred, targets, loss_cfg, layout)
    return lv.value, backward(params, cache, lv.gradient)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    lr: float
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optimizer(params: HeadParams, cfg: OptimizerConfig) -> OptimizerState:
    state = OptimizerState(lr=cfg.lr)
    for name, arr in leaf_arrays(params):
        state.m[name] = np.zeros_like(arr)
        state.v[name] = np.zeros_like(arr)
    return state


def adamw_step(params: HeadParams, grads: HeadParams,
               state: OptimizerState, cfg: OptimizerConfig):
    """One AdamW update, in place.

    Weight decay is decoupled: it scales the parameter directly and never
    enters the moment estimates, so a parameter with zero gradient decays
    by exactly (1 - lr * wd) per step.
    """
    state.step += 1
    bias1 = 1.0 - cfg.beta1 ** state.step
    bias2 = 1.0 - cfg.beta2 ** state.step
    grad_map = dict(leaf_arrays(grads))
    for name, p in leaf_arrays(params):
        g = grad_map[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
        p -= state.lr * update + (state.lr * cfg.weight_decay) * p


@dataclass(frozen=True)
class SchedulerConfig:
    factor: float = 0.1
    patience: int = 10
    threshold: float = 1e-4


@dataclass
class SchedulerState:
    best: float = np.inf
    bad_epochs: int = 0


def scheduler_step(state: SchedulerState, lr: float, metric: float,
                   cfg: SchedulerConfig) -> float:
    """Reduce-on-plateau in relative mode; returns the lr to use next.

    metric improves when it drops below best * (1 - threshold).  Every
    non-improving epoch bumps a counter; once it reaches patience the lr
    is multiplied by factor and the counter resets.
    """
    if metric < state.best * (1.0 - cfg.threshold):
        state.best = metric
        state.bad_epochs = 0
        return lr
    state.bad_epochs += 1
    if state.bad_epochs >= cfg.patience:
        state.bad_epochs = 0
        return lr * cfg.factor
    return lr


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    batch_size: int = 200
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class TrainResult:
    params: HeadParams
    epoch_losses: list
    lr_history: list  # lr in effect during each epoch
    reduction_epochs: list  # 1-indexed epochs after which the lr dropped


def train(features, targets: losses.BatchTargets, head_cfg: HeadConfig,
          train_cfg: TrainConfig) -> TrainResult:
    """Fit the heads on (features, targets) and return the trajectory.

    Deterministic for a fixed seed: one stream initializes the weights,
    a second drives the per-epoch shuffles.  A non-finite epoch loss
    aborts immediately rather than continuing from poisoned state.
    """
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    if n == 0:
        raise ValueError("no training examples")
    if features.ndim != 2 or features.shape[1] != head_cfg.feature_dim:
        raise ValueError(f"features shape {features.shape} does not match "
                         f"feature_dim {head_cfg.feature_dim}")
    if len(targets) != n:
        raise ValueError(f"{n} feature rows but {len(targets)} targets")

    init_seed, shuffle_seed = np.random.SeedSequence(train_cfg.seed).spawn(2)
    params = init_params(head_cfg, init_seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    layout = head_cfg.layout()
    opt_state = init_optimizer(params, train_cfg.optimizer)
    sched_state = SchedulerState()

    epoch_losses = []
    lr_history = []
    reduction_epochs = []
    for epoch in range(1, train_cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        lr_history.append(opt_state.lr)
        loss_sum = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = perm[start:start + train_cfg.batch_size]
            value, grads = loss_forward_backward(
                params, features[idx], targets.take(idx), train_cfg.loss, layout)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, "
                    f"batch starting at {start}, lr {opt_state.lr}")
            adamw_step(params, grads, opt_state, train_cfg.optimizer)
            loss_sum += value * idx.shape[0]
        epoch_loss = loss_sum / n
        epoch_losses.append(epoch_loss)
        new_lr = scheduler_step(sched_state, opt_state.lr, epoch_loss,
                                train_cfg.scheduler)
        if new_lr != opt_state.lr:
            reduction_epochs.append(epoch)
            opt_state.lr = new_lr
    return TrainResult(params=params, epoch_losses=epoch_losses,
                       lr_history=lr_history, reduction_epochs=reduction_epochs)


def predict(params: HeadParams, features, layout: BinLayout, dims_mean) -> tuple:
    """Estimate dimensions and local orientation for each feature row.

    Returns (dims (N, 3), theta_local (N,)).  dims_mean is the (3,) class
    mean added back onto the predicted deviations.
    """
    pred, _ = forward(params, np.asarray(features))
    dims = np.asarray(dims_mean, dtype=float)[None, :] + pred.delta_dims
    theta = np.empty(pred.scores.shape[0])
    for i in range(theta.shape[0]):
        theta[i] = decode(BinPrediction(scores=pred.scores[i],
                                        residual_sc=pred.residual_sc[i]), layout)
    return dims, theta


def _canonical_meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_weights(path, params: HeadParams, meta: dict):
    """Write params and metadata to the MLW1 container, atomically."""
    missing = [k for k in REQUIRED_META_KEYS if k not in meta]
    if missing:
        raise ValueError(f"weights metadata missing keys: {missing}")
    cfg = head_config_from_meta(meta)
    expected = {name: arr.shape for name, arr in leaf_arrays(init_shapes(cfg))}
    for name, arr in leaf_arrays(params):
        if arr.shape != expected[name]:
            raise ValueError(f"tensor {name} has shape {arr.shape}, "
                             f"expected {expected[name]}")
    blob = _canonical_meta_bytes(meta)
    chunks = [WEIGHTS_MAGIC, np.uint32(len(blob)).tobytes(), blob]
    for _, arr in leaf_arrays(params):
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_weights(path) -> tuple:
    """Read an MLW1 container; returns (HeadParams as float64, metadata dict)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    if len(data) < 8:
        raise ValueError(f"{path}: truncated header")
    meta_len = int(np.frombuffer(data[4:8], dtype="<u4")[0])
    if 8 + meta_len > len(data):
        raise ValueError(f"{path}: metadata length {meta_len} overruns file")
    try:
        meta = json.loads(data[8:8 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: bad metadata block: {e}") from e
    missing = [k for k in REQUIRED_META_KEYS if k not in meta]
    if missing:
        raise ValueError(f"{path}: metadata missing keys: {missing}")
    cfg = head_config_from_meta(meta)
    pos = 8 + meta_len
    branches = {}
    for branch, shapes in _branch_shapes(cfg).items():
        leaves = []
        for shape in shapes:
            count = int(np.prod(shape))
            end = pos + 4 * count
            if end > len(data):
                raise ValueError(f"{path}: tensor data truncated in branch {branch}")
            leaves.append(np.frombuffer(data[pos:end], dtype="<f4")
                          .astype(float).reshape(shape))
            pos = end
        branches[branch] = BranchParams(*leaves)
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes after tensors")
    params = HeadParams(dims=branches["dims"], scores=branches["scores"],
                        residuals=branches["residuals"])
    return params, meta


def _branch_shapes(cfg: HeadConfig) -> dict:
    sizes = branch_output_sizes(cfg.n_bins)
    return {
        branch: [(cfg.hidden_dim, cfg.feature_dim), (cfg.hidden_dim,),
                 (sizes[branch], cfg.hidden_dim), (sizes[branch],)]
        for branch in BRANCH_NAMES
    }


def init_shapes(cfg: HeadConfig) -> HeadParams:
    """Zero-filled params with the shapes implied by cfg (for validation)."""
    branches = {
        branch: BranchParams(*[np.zeros(s) for s in shapes])
        for branch, shapes in _branch_shapes(cfg).items()
    }
    return HeadParams(dims=branches["dims"], scores=branches["scores"],
                      residuals=branches["residuals"])


def head_config_from_meta(meta: dict) -> HeadConfig:
    try:
        return HeadConfig(feature_dim=int(meta["feature_dim"]),
                          hidden_dim=int(meta["hidden_dim"]),
                          n_bins=int(meta["n_bins"]),
                          overlap_fraction=float(meta["overlap_fraction"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"bad weights metadata: {e}") from e
