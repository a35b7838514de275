"""Mini-batch training loop."""
import logging
import time
from dataclasses import dataclass

import numpy as np

from ..errors import EmptySplit, InvalidConfig, NonFiniteLoss
from .model import Model, ModelSpec
from .optim import AdamState, adam_step, mse_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    epochs: int = 400
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    label_scale: float = 1000.0  # nm
    hidden: int = 128
    bn_momentum: float = 0.9
    dropout: float = 0.5
    # keep the weights of the epoch with the lowest eval-mode MSE on a fixed
    # subset of training samples (the test split is never consulted)
    select_best: bool = True
    monitor_samples: int = 1024

    def validate(self):
        if not (self.learning_rate > 0 and self.batch_size > 0 and self.epochs >= 0
                and self.adam_eps > 0 and self.label_scale > 0 and self.hidden > 0):
            raise InvalidConfig("training hyperparameters must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise InvalidConfig("Adam betas must lie in (0, 1)")
        if not 0 <= self.dropout < 1:
            raise InvalidConfig("dropout must lie in [0, 1)")
        return self


@dataclass
class EpochLog:
    epoch: int
    train_mse: float  # nm^2, mean train-mode batch loss (epoch 0: first batch, before any update)
    test_mse: float  # nm^2, eval mode on the whole test split
    wall_seconds: float
    monitor_mse: float = float("nan")  # nm^2, eval mode on the monitored training subset


def _eval_mse(model, x, y, batch_size=64):
    if len(x) == 0:
        return float("nan")
    pred = np.concatenate([model.forward(x[i:i + batch_size], train=False)[:, 0]
                           for i in range(0, len(x), batch_size)])
    return float(np.mean((pred.astype(np.float64) - y) ** 2)) * model.label_scale ** 2


def train_arrays(x_raw, y_nm, cfg: TrainConfig, x_test_raw=None, y_test_nm=None, callback=None):
    """Train on raw inputs (n, H, W, 2) with labels in nm.

    Returns ``(model, logs)``; ``logs[0]`` describes the untrained model.
    With ``select_best`` the returned model carries the weights of the epoch
    with the lowest monitored training MSE (``model.selected_epoch``).
    """
    cfg.validate()
    if len(x_raw) == 0:
        raise EmptySplit("no training samples")
    spec = ModelSpec(crop_px=x_raw.shape[1], in_channels=x_raw.shape[-1], hidden=cfg.hidden,
                     dropout=cfg.dropout, bn_momentum=cfg.bn_momentum)
    ss = np.random.SeedSequence(cfg.seed)
    model_ss, shuffle_ss, monitor_ss = ss.spawn(3)
    model = Model(spec, seed=int(model_ss.generate_state(1)[0]))

    # rounded to f32 so a reloaded checkpoint predicts bit-identically
    model.input_mean = float(np.float32(np.mean(x_raw, dtype=np.float64)))
    model.input_std = float(np.float32(np.std(x_raw, dtype=np.float64))) or 1.0
    model.label_scale = float(np.float32(cfg.label_scale))

    x = model.normalize(x_raw)
    y = (np.asarray(y_nm, np.float64) / cfg.label_scale).astype(np.float32)[:, None]
    if x_test_raw is not None and len(x_test_raw):
        xt = model.normalize(x_test_raw)
        yt = np.asarray(y_test_nm, np.float64) / cfg.label_scale
    else:
        xt, yt = x[:0], np.zeros(0)

    mon = np.sort(np.random.default_rng(monitor_ss).permutation(len(x))[: cfg.monitor_samples])
    xm, ym = x[mon], y[mon, 0].astype(np.float64)

    params = model.params()
    state = AdamState.zeros_like([p.value for p in params])
    shuffle = np.random.default_rng(shuffle_ss)
    t0 = time.perf_counter()
    scale2 = model.label_scale ** 2
    initial_test = _eval_mse(model, xt, yt)
    initial_monitor = _eval_mse(model, xm, ym)
    best, best_mse = None, np.inf
    logs = []
    step = 0
    n, bs = len(x), cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(n)
        losses = []
        for i in range(0, n, bs):
            idx = np.sort(order[i:i + bs])
            xb, yb = x[idx], y[idx]
            model.zero_grad()
            pred = model.forward(xb, train=True)
            loss, grad = mse_loss(pred, yb)
            step += 1
            if not np.isfinite(loss):
                raise NonFiniteLoss(step, model.first_nonfinite_layer(xb), loss)
            if step == 1:
                logs.append(EpochLog(0, loss * scale2, initial_test, 0.0, initial_monitor))
            losses.append(loss)
            model.backward(grad)
            adam_step([p.value for p in params], [p.grad for p in params], state,
                      cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        monitor = _eval_mse(model, xm, ym) if cfg.select_best else float("nan")
        row = EpochLog(epoch, float(np.mean(losses)) * scale2, _eval_mse(model, xt, yt),
                       time.perf_counter() - t0, monitor)
        logs.append(row)
        if cfg.select_best and monitor < best_mse:
            best, best_mse = (epoch, model.snapshot()), monitor
        log.debug("epoch %d train %.1f test %.1f (%.0fs)", epoch, row.train_mse, row.test_mse, row.wall_seconds)
        if callback is not None:
            callback(row)
    if not logs:
        logs.append(EpochLog(0, float("nan"), initial_test, 0.0, initial_monitor))
    model.selected_epoch = cfg.epochs
    if best is not None:
        model.restore(best[1])
        model.selected_epoch = best[0]
    return model, logs


def train(ds, cfg: TrainConfig, callback=None):
    """Train on the dataset's train split, monitoring its test split."""
    tr, te = ds.indices("train"), ds.indices("test")
    return train_arrays(ds.inputs(tr), ds.labels(tr), cfg, ds.inputs(te), ds.labels(te), callback)


def write_training_log(path, logs):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse", "test_mse", "wall_seconds", "monitor_mse"])
        for r in logs:
            w.writerow([r.epoch, repr(r.train_mse), repr(r.test_mse), f"{r.wall_seconds:.3f}", repr(r.monitor_mse)])
