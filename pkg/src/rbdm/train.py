"""Optimisation: Adam, single training steps, the epoch loop and checkpoints.

Checkpoint layout (little-endian)::

    b"RBCK" | u32 version | u32 header_len | UTF-8 JSON header | MPT1 records...

The JSON header echoes the config and holds the step counters, the training
RNG state and the ordered list of tensor names that follow.
"""
import csv
import json
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from rbdm.config import TrainConfig
from rbdm.data import decode_tensor, encode_tensor
from rbdm.errors import ConfigError, FormatError, NumericsError
from rbdm.losses import total_loss
from rbdm.model import RBDM

log = logging.getLogger(__name__)

CKPT_MAGIC = b"RBCK"
CKPT_VERSION = 1
LOG_FIELDS = ("step", "l1", "l2", "l3", "total")


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def model_from_config(cfg, dtype=np.float32):
    return RBDM(cfg.T, channels=cfg.channels, encoder_hidden=cfg.encoder_hidden,
                seed=cfg.seed, dtype=dtype)


def train_step(model, optimizer, x0, y0, cfg, rng, step=None):
    """One Adam update on a batch; t is drawn uniformly from {1..T} per sample.

    Raises NumericsError (naming the parameter) on a non-finite gradient,
    before any parameter is touched.
    """
    t = rng.integers(1, model.T + 1, size=len(x0))
    params = model.params
    for p in params.values():
        p.grad = None
    try:
        breakdown = total_loss(model, x0, y0, t, rng, ssr=cfg.ssr, rr=cfg.rr, w2=cfg.w2, w3=cfg.w3)
    except NumericsError as exc:
        raise NumericsError(f"step {step}: {exc}") from None
    breakdown.graph.backward()
    breakdown.graph = None
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericsError(f"step {step}: non-finite gradient in {name}")
    optimizer.step(params)
    return breakdown


# ---------------------------------------------------------------- checkpoints
def save_checkpoint(path, model, optimizer, cfg, step, rng):
    names, blobs = [], []
    for name, p in model.params.items():
        names.append(f"param/{name}")
        blobs.append(encode_tensor(p.data))
    for name in model.params:
        names.append(f"adam_m/{name}")
        blobs.append(encode_tensor(optimizer.m[name]))
        names.append(f"adam_v/{name}")
        blobs.append(encode_tensor(optimizer.v[name]))
    header = {
        "config": cfg.to_dict(),
        "step": int(step),
        "adam_step": int(optimizer.step_count),
        "rng_state": rng.bit_generator.state,
        "tensors": names,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(raw)) + raw)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    adam_step: int
    rng_state: dict
    tensors: dict

    def build_model(self):
        model = model_from_config(self.config)
        model.load_state({k[len("param/"):]: v for k, v in self.tensors.items()
                          if k.startswith("param/")})
        return model

    def build_optimizer(self, model):
        opt = Adam(model.params, lr=self.config.lr)
        opt.step_count = self.adam_step
        for name in model.params:
            opt.m[name] = self.tensors[f"adam_m/{name}"].copy()
            opt.v[name] = self.tensors[f"adam_v/{name}"].copy()
        return opt

    def build_rng(self):
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:4]!r} at byte offset 0")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated checkpoint header at byte offset 4")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(buf) < 12 + hlen:
        raise FormatError(f"{path}: truncated JSON header at byte offset 12")
    header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    tensors = {}
    for name in header["tensors"]:
        tensors[name], pos = decode_tensor(buf, pos)
    return Checkpoint(config=TrainConfig.from_dict(header["config"]), step=header["step"],
                      adam_step=header["adam_step"], rng_state=header["rng_state"],
                      tensors=tensors)


# ---------------------------------------------------------------- main loop
def epoch_order(seed, epoch, n):
    return np.random.default_rng([int(seed), 7, int(epoch)]).permutation(n)


def _batch(dataset, idx):
    pairs = [dataset[int(i)] for i in idx]
    y0 = np.stack([p[0] for p in pairs]).astype(np.float32)
    x0 = np.stack([p[1] for p in pairs]).astype(np.float32)
    return x0, y0


def train(cfg, dataset, out_dir=None, resume=None, callback=None):
    """Run the epoch loop over ``dataset`` (indexable (mueller, stain) pairs).

    Writes ``loss_log.csv`` plus ``epoch_XXX.rbck`` / ``last.rbck`` /
    ``final.rbck`` into ``out_dir`` when given. Returns (model, history),
    history being a list of (step, l1, l2, l3, total) tuples for the steps
    run in this call.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigError("training dataset is empty")
    steps_per_epoch = max(1, -(-n // cfg.batch))
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config.T != cfg.T:
            raise ConfigError(f"checkpoint T={ckpt.config.T} does not match config T={cfg.T}")
        model = ckpt.build_model()
        opt = ckpt.build_optimizer(model)
        opt.lr = cfg.lr
        rng = ckpt.build_rng()
        step = ckpt.step
    else:
        model = model_from_config(cfg)
        opt = Adam(model.params, lr=cfg.lr)
        rng = np.random.default_rng([int(cfg.seed), 11])
        step = 0

    log_fh = writer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "loss_log.csv")
        fresh = resume is None or not os.path.exists(log_path)
        log_fh = open(log_path, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(log_fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_FIELDS)

    history = []
    try:
        while step < total_steps:
            epoch, pos = divmod(step, steps_per_epoch)
            order = epoch_order(cfg.seed, epoch, n)
            idx = order[pos * cfg.batch:(pos + 1) * cfg.batch]
            x0, y0 = _batch(dataset, idx)
            lb = train_step(model, opt, x0, y0, cfg, rng, step=step)
            step += 1
            row = (step, lb.l1, lb.l2, lb.l3, lb.total)
            history.append(row)
            if writer:
                writer.writerow([row[0]] + [repr(v) for v in row[1:]])
            if callback:
                callback(step, lb)
            if out_dir:
                end_of_epoch = step % steps_per_epoch == 0
                periodic = cfg.checkpoint_every and step % cfg.checkpoint_every == 0
                if end_of_epoch:
                    save_checkpoint(os.path.join(out_dir, f"epoch_{step // steps_per_epoch:03d}.rbck"),
                                    model, opt, cfg, step, rng)
                if end_of_epoch or periodic:
                    save_checkpoint(os.path.join(out_dir, "last.rbck"), model, opt, cfg, step, rng)
            if step % 100 == 0:
                log.info("step %d/%d l1=%.4f l2=%.4f l3=%.4f", step, total_steps, lb.l1, lb.l2, lb.l3)
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "final.rbck"), model, opt, cfg, step, rng)
    return model, history
