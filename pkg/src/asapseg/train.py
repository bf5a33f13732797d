"""SGD training loop, checkpointing and evaluation."""

import json
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, backward, fresh_tape, no_grad
from .data import AugmentConfig, SegDataset, augment
from .errors import ContractError, DegenerateBatchError, FormatError, NumericError
from .losses import ConfusionMatrix, LossWeights, miou, total_loss

CKPT_MAGIC = b"ASAP"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    base_lr: float = 0.01
    lr_power: float = 0.9
    max_steps: int = 2000
    eval_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.base_lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ContractError("rates must be positive")

    def lr_at(self, step):
        frac = min(step, self.max_steps) / max(1, self.max_steps)
        return self.base_lr * (1.0 - frac) ** self.lr_power


def _decayed(name, tensor):
    # weight decay on conv weights only, not norm affines or biases
    return name.endswith(".weight") and tensor.ndim == 4


def sgd_step(named_params, velocities, cfg, lr):
    """v <- m*v + (g + wd*p); p <- p - lr*v. Momentum buffers start at zero."""
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
        if _decayed(name, p) and cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = cfg.momentum * v + g
        velocities[name] = v
        p.data = p.data - lr * v


@dataclass
class TrainState:
    model: object
    velocities: dict = field(default_factory=dict)
    rng: np.random.Generator = None
    step: int = 0

    @classmethod
    def fresh(cls, model, seed):
        return cls(model=model, rng=np.random.default_rng(seed))


# ------------------------------------------------------------- checkpointing

def _pack_array(f, name, arr):
    arr = np.asarray(arr)
    code = {np.dtype(np.float64): 0, np.dtype(np.float32): 1,
            np.dtype(np.int64): 2}[arr.dtype]
    nm = name.encode()
    f.write(struct.pack("<H", len(nm)))
    f.write(nm)
    f.write(struct.pack("<BB", code, arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _unpack_array(f):
    (nlen,) = struct.unpack("<H", f.read(2))
    name = f.read(nlen).decode()
    code, ndim = struct.unpack("<BB", f.read(2))
    dtype = {0: "<f8", 1: "<f4", 2: "<i8"}[code]
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
    n = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(f.read(n * np.dtype(dtype).itemsize), dtype=dtype)
    return name, arr.reshape(shape).astype(np.dtype(dtype).newbyteorder("=")).copy()


def _norm_buffers(model):
    for path, norm in model.named_norms():
        if norm.running_mean is not None:
            yield f"{path}.running_mean", norm.running_mean
            yield f"{path}.running_var", norm.running_var


def save_checkpoint(path, state):
    """Binary checkpoint: params, norm running stats, momentum, step, rng."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, state.step))
        rng_blob = json.dumps(state.rng.bit_generator.state).encode()
        f.write(struct.pack("<I", len(rng_blob)))
        f.write(rng_blob)
        for section in (list(state.model.named_parameters()),
                        list(_norm_buffers(state.model)),
                        sorted(state.velocities.items())):
            f.write(struct.pack("<I", len(section)))
            for name, value in section:
                _pack_array(f, name, value.data if isinstance(value, Tensor) else value)


def load_checkpoint(path, model):
    """Restore params/buffers/momentum into model; returns a TrainState."""
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise FormatError("bad checkpoint magic")
        version, step = struct.unpack("<IQ", f.read(12))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (rlen,) = struct.unpack("<I", f.read(4))
        rng_state = json.loads(f.read(rlen).decode())
        sections = []
        for _ in range(3):
            (count,) = struct.unpack("<I", f.read(4))
            sections.append(dict(_unpack_array(f) for _ in range(count)))
    params, buffers, velocities = sections

    named = dict(model.named_parameters())
    if set(named) != set(params):
        raise FormatError("checkpoint parameter table does not match model")
    for name, tensor in named.items():
        if tensor.data.shape != params[name].shape:
            raise FormatError(f"shape mismatch for {name}")
        tensor.data = params[name]
        tensor.grad = None
    for path, norm in model.named_norms():
        key = f"{path}.running_mean"
        if key in buffers:
            norm.running_mean = buffers[key]
            norm.running_var = buffers[f"{path}.running_var"]

    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    return TrainState(model=model, velocities=velocities, rng=rng, step=step)


# ------------------------------------------------------------------ training

def sample_batch(dataset, batch_size, rng, aug: AugmentConfig):
    idx = rng.integers(len(dataset), size=batch_size)
    images, labels = [], []
    for i in idx:
        img, lab = dataset.load(int(i))
        if aug is not None:
            img, lab = augment(img, lab, aug, rng)
        images.append(img)
        labels.append(lab)
    return np.stack(images), np.stack(labels)


def evaluate(model, dataset, batch_size=4):
    """Validation mIoU from merged confusion matrices."""
    cm = ConfusionMatrix(dataset.n_classes)
    with no_grad(), fresh_tape():
        for start in range(0, len(dataset), batch_size):
            chunk = [dataset.load(i)
                     for i in range(start, min(start + batch_size, len(dataset)))]
            images = np.stack([c[0] for c in chunk])
            labels = np.stack([c[1] for c in chunk])
            logits = model(Tensor(images), training=False)
            pred = np.argmax(logits.data, axis=1)
            cm.update(pred, labels)
    return miou(cm)


def train_loop(state, data_root, cfg, loss_weights=None, aug=None,
               trace_path=None, log=None, until_step=None):
    """Run SGD steps from state.step up to until_step (default cfg.max_steps).

    Returns the metrics trace: one (step, lr, loss, miou-or-nan) row per step.
    Deterministic given the state's rng; validation runs every eval_every
    steps on a parameter snapshot (eval mode).
    """
    lw = loss_weights or LossWeights()
    aug = aug if aug is not None else AugmentConfig()
    train_ds = SegDataset(data_root, "train")
    val_ds = SegDataset(data_root, "val")
    stop = cfg.max_steps if until_step is None else until_step
    trace = []
    tracef = open(trace_path, "a") if trace_path else None
    try:
        while state.step < stop:
            images, labels = sample_batch(train_ds, cfg.batch_size,
                                          state.rng, aug)
            lr = cfg.lr_at(state.step)
            try:
                with fresh_tape():
                    pred, aux1, aux2 = state.model(Tensor(images), training=True)
                    loss = total_loss(pred, aux1, aux2, labels, lw)
                    for _, p in state.model.named_parameters():
                        p.grad = None
                    backward(loss)
                    sgd_step(state.model.named_parameters(),
                             state.velocities, cfg, lr)
                loss_val = loss.item()
            except (DegenerateBatchError, NumericError) as e:
                warnings.warn(f"step {state.step} skipped: {e}")
                loss_val = float("nan")
            state.step += 1
            score = float("nan")
            if cfg.eval_every and state.step % cfg.eval_every == 0:
                _, score = evaluate(state.model, val_ds)
                if log:
                    log(f"step {state.step} lr {lr:.5f} "
                        f"loss {loss_val:.4f} miou {score:.4f}")
            row = (state.step, lr, loss_val, score)
            trace.append(row)
            if tracef:
                tracef.write(f"{row[0]}\t{row[1]:.8f}\t{row[2]:.8f}\t{row[3]:.6f}\n")
    finally:
        if tracef:
            tracef.close()
    return trace


def fit(model, data_root, cfg, out_dir=None, loss_weights=None, log=None):
    """Fresh training run; writes trace and final checkpoint when out_dir given."""
    state = TrainState.fresh(model, cfg.seed)
    trace_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        trace_path = os.path.join(out_dir, "trace.tsv")
        open(trace_path, "w").close()
    trace = train_loop(state, data_root, cfg, loss_weights=loss_weights,
                       trace_path=trace_path, log=log)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), state)
    return state, trace
