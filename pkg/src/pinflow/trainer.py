"""Training loop: fixed-grid flow integration with per-step residual losses.

One epoch = one sampled batch of tasks.  Particles are drawn from each
task's prior, pushed from lambda 0 to 1 in L = 1/delta_lambda Euler steps,
and every step contributes the mean squared residual to the epoch loss.
States are detached between steps by construction (the per-step gradients
are computed and accumulated immediately), so exactly one Adam update is
applied per batch on the accumulated gradient.

The heavy passes run in float32 working copies by default; master weights,
the optimizer and checkpoints stay float64.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import homotopy, metrics, neuralflow, taskgen, transporter
from ._rng import derive_rng
from .densities import SENSOR_EXCLUSION_RADIUS, TdoaLikelihood
from .homotopy import TaskStack, batched_step_loss_and_grads, feature_width, stacked_step_parts
from .neuralflow import FlowNetwork

__all__ = [
    "TrainConfig",
    "TrainLog",
    "TrainingError",
    "train",
    "ablate_features",
    "load_train_config",
    "config_hash",
]

HIDDEN_LAYERS = 6
HIDDEN_WIDTH = 64


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_particles: int = 500
    delta_lambda: float = 0.01
    epochs: int = 6000
    batch_tasks: int = 64
    lr: float = 0.004
    lr_decay: float = 0.8
    lr_decay_every: int = 300
    clip: float = 1.0
    seed: int = 0
    scale_preset: str = "paper"
    feature_mode: str = "full"
    compute_dtype: str = "float32"
    update_per_step: bool = False
    checkpoint_every: int = 100
    val_tasks: int = 16
    val_particles: int = 512

    def __post_init__(self):
        steps = round(1.0 / self.delta_lambda)
        if steps < 1 or abs(steps * self.delta_lambda - 1.0) > 1e-9:
            raise ValueError("1/delta_lambda must be an integer")
        if self.scale_preset not in ("paper", "desk"):
            raise ValueError("scale_preset must be 'paper' or 'desk'")

    @property
    def n_steps(self) -> int:
        return round(1.0 / self.delta_lambda)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        """Named presets: paper (Table-scale) and desk (same math, smaller budget)."""
        if name == "paper":
            base = {}
        elif name == "desk":
            base = {"epochs": 1000, "n_particles": 200}
        else:
            raise ValueError(f"unknown preset {name!r}")
        base["scale_preset"] = name
        base.update(overrides)
        return cls(**base)


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class TrainLogRecord:
    epoch: int
    loss: float
    lr: float
    wall_ms: float
    checkpoint: str = None


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_checkpoint: str = None
    best_val_ed: float = None

    def append(self, record: TrainLogRecord, stream=None):
        self.records.append(record)
        if stream is not None:
            obj = {"epoch": record.epoch, "loss": record.loss, "lr": record.lr,
                   "wall_ms": record.wall_ms}
            if record.checkpoint:
                obj["checkpoint"] = record.checkpoint
            stream.write(json.dumps(obj) + "\n")
            stream.flush()


def _network_widths(d: int, n_z: int, mode: str) -> tuple:
    return (feature_width(d, n_z, mode),) + (HIDDEN_WIDTH,) * HIDDEN_LAYERS + (d,)


def _check_homogeneous(tasks):
    dims = {t.dim for t in tasks}
    zs = {t.n_z for t in tasks}
    if len(dims) != 1 or len(zs) != 1:
        raise ValueError("all tasks in a dataset must share state and measurement dimensions")
    return dims.pop(), zs.pop()


def _sensor_guard(x, stack):
    """Keep training particles outside the sensor exclusion radius (TDOA only)."""
    if stack.kind != "tdoa":
        return x
    for sensor in (stack.sensor_a, stack.sensor_b):
        delta = x - sensor
        dist = np.linalg.norm(delta, axis=-1)
        close = dist < SENSOR_EXCLUSION_RADIUS
        if np.any(close):
            x = x.copy()
            x[close] = sensor + np.array([SENSOR_EXCLUSION_RADIUS, 0.0], dtype=x.dtype)
    return x


def _zero_grads_like(net):
    return [(np.zeros_like(w, dtype=np.float64), np.zeros_like(b, dtype=np.float64))
            for w, b in zip(net.weights, net.biases)]


def _epoch_pass(net, stack, batch_idx, config, epoch, collect_gradients=True):
    """Integrate one task batch over the lambda grid.

    Returns (total loss, gradient list or None).  Gradients are accumulated
    per step, which matches backpropagating the summed loss because states
    are detached at every step boundary.
    """
    c_dtype = np.dtype(config.compute_dtype)
    sub = stack.select(batch_idx)
    B = len(batch_idx)
    N = config.n_particles
    d = stack.dim
    rng = derive_rng(config.seed, "particles", epoch)
    noise = rng.standard_normal((B, N, d)).astype(c_dtype)
    x = sub.prior_mean.astype(c_dtype) + np.sqrt(sub.prior_var).astype(c_dtype) * noise

    Ws = [w.astype(c_dtype) for w in net.weights]
    bs = [b.astype(c_dtype) for b in net.biases]
    acc = _zero_grads_like(net) if collect_gradients else None
    total = 0.0
    for k in range(config.n_steps):
        lam = k * config.delta_lambda
        parts = stacked_step_parts(sub, x, lam, need_hess=(config.feature_mode == "full"))
        try:
            if collect_gradients:
                loss_k, grads_k, f = batched_step_loss_and_grads(
                    net, parts, config.feature_mode, weights=Ws, biases=bs
                )
                for (aW, ab), (gW, gb) in zip(acc, grads_k):
                    aW += gW
                    ab += gb
            else:
                f, div = homotopy._net_flow_terms(net, parts, config.feature_mode,
                                                  weights=Ws, biases=bs)
                R = homotopy._driving_term(parts.logh) + div + np.sum(f * parts.s_p, axis=-1)
                loss_k = float(np.mean(R.astype(np.float64) ** 2))
        except FloatingPointError as exc:
            raise TrainingError(f"epoch {epoch}, step {k}: {exc}") from exc
        total += loss_k
        x = x + f * config.delta_lambda
        x = _sensor_guard(x, sub)
    return total, acc


def _validation_ed(net, val_tasks, family, config, seed):
    preset = taskgen.inference_preset(family)
    cfg = transporter.TransportConfig(
        delta_L=preset.delta_L,
        n_particles=min(config.val_particles, preset.n_particles),
        max_nfe=2000,
    )
    eds = []
    for task in val_tasks:
        try:
            result = transporter.transport(task, net, cfg, derive_rng_seed(seed, task.id))
            gt = taskgen.sample_ground_truth(task, 2000, derive_rng_seed(seed, task.id, 1))
            eds.append(metrics.energy_distance(result.ensemble, gt))
        except (RuntimeError, FloatingPointError):
            eds.append(np.inf)
    return float(np.median(eds)) if eds else np.inf


def derive_rng_seed(seed, *path) -> int:
    """Collapse a derived stream into a plain integer seed."""
    return int(derive_rng(seed, *path).integers(0, 2**63 - 1))


def train(dataset, config: TrainConfig, val_dataset=None, log_path=None,
          checkpoint_path=None, resume_from=None):
    """Run Algorithm-1-style training; returns (network, TrainLog).

    dataset/val_dataset are task lists.  When checkpoint_path is given,
    periodic and final checkpoints are written there (suffix .e{epoch});
    the best-by-validation-ED checkpoint is retained and returned when a
    validation set is available.
    """
    tasks = list(dataset)
    if not tasks:
        raise ValueError("training dataset is empty")
    d, n_z = _check_homogeneous(tasks)
    family = tasks[0].family

    if resume_from is not None:
        net = neuralflow.load_checkpoint(resume_from)
        start_epoch = net.trained_epochs
        if net.feature_mode != config.feature_mode:
            raise ValueError("checkpoint feature mode does not match config")
    else:
        net = neuralflow.init(_network_widths(d, n_z, config.feature_mode), config.seed)
        net.feature_mode = config.feature_mode
        start_epoch = 0

    opt = neuralflow.init_optimizer(
        net, lr=config.lr, decay=config.lr_decay,
        decay_every=config.lr_decay_every, clip=config.clip,
    )
    stack = TaskStack.from_tasks(tasks, dtype=np.float64)
    log = TrainLog()
    stream = open(log_path, "w", encoding="utf-8", newline="\n") if log_path else None
    best_net = net
    best_ed = np.inf
    try:
        for epoch in range(start_epoch, start_epoch + config.epochs):
            t0 = time.perf_counter()
            rng = derive_rng(config.seed, "batch", epoch)
            replace_draw = len(tasks) < config.batch_tasks
            idx = rng.choice(len(tasks), size=config.batch_tasks, replace=replace_draw)
            idx = np.sort(idx)
            if config.update_per_step:
                total = 0.0
                c = config
                for k in range(c.n_steps):
                    loss_k, grads = _epoch_single_step(net, stack, idx, c, epoch, k)
                    net, opt = neuralflow.adam_step(net, grads, opt, epoch=epoch - start_epoch)
                    total += loss_k
            else:
                try:
                    total, grads = _epoch_pass(net, stack, idx, config, epoch)
                except TrainingError as exc:
                    offenders = [stack.task_ids[i] for i in idx]
                    raise TrainingError(f"{exc} (batch tasks {offenders[:4]}...)") from exc
                net, opt = neuralflow.adam_step(net, grads, opt, epoch=epoch - start_epoch)
            net.trained_epochs = epoch + 1

            record = TrainLogRecord(
                epoch=epoch, loss=total,
                lr=opt.effective_lr(epoch - start_epoch),
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
            is_last = epoch == start_epoch + config.epochs - 1
            if checkpoint_path and (is_last or (epoch + 1) % config.checkpoint_every == 0):
                path = str(checkpoint_path) if is_last else f"{checkpoint_path}.e{epoch + 1:06d}"
                neuralflow.save_checkpoint(net, path)
                record.checkpoint = path
            if val_dataset and (is_last or (epoch + 1) % config.checkpoint_every == 0):
                ed = _validation_ed(net, list(val_dataset)[: config.val_tasks],
                                    family, config, config.seed)
                if ed <= best_ed:
                    best_ed = ed
                    best_net = net
                    log.best_checkpoint = record.checkpoint
                    log.best_val_ed = ed
            log.append(record, stream)
    finally:
        if stream is not None:
            stream.close()
    if val_dataset and np.isfinite(best_ed):
        return best_net, log
    return net, log


def _epoch_single_step(net, stack, idx, config, epoch, k):
    """Per-step update mode: integrate up to step k fresh and return its gradient."""
    cfg_one = replace(config, update_per_step=False)
    c_dtype = np.dtype(cfg_one.compute_dtype)
    sub = stack.select(idx)
    rng = derive_rng(config.seed, "particles", epoch)
    noise = rng.standard_normal((len(idx), config.n_particles, stack.dim)).astype(c_dtype)
    x = sub.prior_mean.astype(c_dtype) + np.sqrt(sub.prior_var).astype(c_dtype) * noise
    Ws = [w.astype(c_dtype) for w in net.weights]
    bs = [b.astype(c_dtype) for b in net.biases]
    for step in range(k):
        parts = stacked_step_parts(sub, x, step * config.delta_lambda,
                                   need_hess=(config.feature_mode == "full"))
        f, _ = homotopy._net_flow_terms(net, parts, config.feature_mode, weights=Ws, biases=bs)
        x = x + f * config.delta_lambda
        x = _sensor_guard(x, sub)
    parts = stacked_step_parts(sub, x, k * config.delta_lambda,
                               need_hess=(config.feature_mode == "full"))
    loss_k, grads, _ = batched_step_loss_and_grads(net, parts, config.feature_mode,
                                                   weights=Ws, biases=bs)
    return loss_k, grads


def ablate_features(dataset, config: TrainConfig, drop_gradients=True,
                    heldout=None, eval_seed=0):
    """Train matched full-feature and reduced-feature networks.

    Both runs share seeds and task batches; the ablated network omits the
    score features (input width shrinks by 2d).  When a held-out task list
    is given, per-task EDs for both networks are returned as well.
    """
    full_cfg = replace(config, feature_mode="full")
    ablated_mode = "no_gradients" if drop_gradients else "full"
    abl_cfg = replace(config, feature_mode=ablated_mode)
    net_full, log_full = train(dataset, full_cfg)
    net_abl, log_abl = train(dataset, abl_cfg)
    result = {
        "full": (net_full, log_full),
        "ablated": (net_abl, log_abl),
    }
    if heldout:
        family = list(heldout)[0].family
        preset = taskgen.inference_preset(family)
        eds = {"full": [], "ablated": []}
        for task in heldout:
            gt = taskgen.sample_ground_truth(task, 4000, derive_rng_seed(eval_seed, "gt", task.id))
            for label, net in (("full", net_full), ("ablated", net_abl)):
                r = transporter.transport(task, net, preset, derive_rng_seed(eval_seed, label, task.id))
                eds[label].append(metrics.energy_distance(r.ensemble, gt))
        result["heldout_ed"] = {k: np.asarray(v) for k, v in eds.items()}
    return result


# ---------------------------------------------------------------------------
# config files: flat "key = value" text
# ---------------------------------------------------------------------------


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def load_train_config(path, **overrides) -> TrainConfig:
    """Read a flat key = value config file mirroring TrainConfig fields."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            values[key.strip()] = _parse_value(raw)
    known = TrainConfig.__dataclass_fields__
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ValueError(f"{path}: unknown config keys {unknown}")
    values.update(overrides)
    return TrainConfig(**values)
