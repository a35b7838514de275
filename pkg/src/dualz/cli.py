"""Command-line entry point: ``python -m dualz <command>``.

Configuration is a flat JSON object (see ``RunConfig``); values from
``--config`` are overridden by ``--set key=value`` and the dedicated flags,
and the resolved result is written as ``config.json`` into every output
directory.  Per-stage seeds are derived from the master seed and a CRC32 of
the stage name (see ``stage_seed``).
"""
import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import evaluate, imaging, pairs, refz
from .cnn import checkpoint, gradcheck
from .cnn.train import TrainConfig, train, write_training_log
from .errors import (DeltaNotOnGrid, DualZError, EmptySplit, FitDiverged, InvalidConfig, NonFiniteLoss,
                     RangeTooSmall, TooFewParticles, TooFewSamples)

log = logging.getLogger("dualz")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class RunConfig:
    # optics (OpticalConfig)
    axial_sigma: float = 260.0
    asymmetry: float = 0.2
    lateral_sigma0: float = 80.0
    lateral_growth: float = 0.5
    peak_brightness: float = 8000.0
    sensor_noise_rms: float = 0.73
    encoder_sigma: float = 35.0
    pixel_size: float = 33.6
    crop_px: int = 64
    z_step: float = 250.0
    background: float = 20.0
    # simulation
    n_particles: int = 1000
    z_min: float = 0.0
    z_max: float = 1750.0
    particle_z_lo: float = 500.0
    particle_z_hi: float = 1250.0
    lateral_jitter_px: float = 1.0
    detection_threshold: float = None  # None: 3 x border-ring std per frame
    # pairing
    delta: float = 500.0
    deltas: list = field(default_factory=lambda: [250.0, 500.0, 750.0])
    train_fraction: float = 0.8
    # training (TrainConfig)
    learning_rate: float = 0.001
    batch_size: int = 16
    epochs: int = 60
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    label_scale: float = 1000.0
    hidden: int = 128
    bn_momentum: float = 0.9
    dropout: float = 0.5
    select_best: bool = True
    monitor_samples: int = 1024
    # sweep
    sweep_seeds: int = 1
    # run
    master_seed: int = 0
    output_dir: str = "runs"
    jobs: int = 1

    def optical(self):
        names = {f.name for f in fields(imaging.OpticalConfig)}
        return imaging.OpticalConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def training(self, seed):
        names = {f.name for f in fields(TrainConfig)} - {"seed"}
        return TrainConfig(seed=seed, **{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def validate(self):
        self.optical().validate()
        self.training(0).validate()
        if self.n_particles <= 0:
            raise InvalidConfig("n_particles must be > 0")
        if not self.z_min < self.z_max:
            raise InvalidConfig("z_min must be below z_max")
        if not self.particle_z_lo <= self.particle_z_hi:
            raise InvalidConfig("particle_z_lo must not exceed particle_z_hi")
        if not 0 < self.train_fraction < 1:
            raise InvalidConfig("train_fraction must lie in (0, 1)")
        if self.sweep_seeds < 1 or self.jobs < 1:
            raise InvalidConfig("sweep_seeds and jobs must be >= 1")
        if not self.deltas:
            raise InvalidConfig("deltas must not be empty")
        for d in [self.delta, *self.deltas]:
            pairs.grid_steps(d, self.z_step)
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        for f in fields(cls):
            if f.name in d:
                setattr(cfg, f.name, _coerce(f, d[f.name]))
        return cfg

    def to_dict(self):
        return dataclasses.asdict(self)


def _coerce(f, value):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    try:
        if value is None or default is None:
            return value if value is None else float(value)
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int):
            if float(value) != int(value):
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            return [float(v) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise InvalidConfig(f"bad value for {f.name}: {value!r}") from None


def stage_seed(master_seed, stage):
    """32-bit seed for ``stage``: SeedSequence([master, crc32(stage)])."""
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def echo_config(out_dir, cfg: RunConfig, **extra):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump({**cfg.to_dict(), **extra}, fh, indent=1, sort_keys=True)


# stages ---------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out_dir):
    """Simulate ``n_particles`` z-stacks and the single-plane baseline into ``out_dir``."""
    cfg.validate()
    opt = cfg.optical()
    p_seed = stage_seed(cfg.master_seed, "particles")
    s_seed = stage_seed(cfg.master_seed, "stacks")
    parts = imaging.random_particles(cfg.n_particles, opt, cfg.particle_z_lo, cfg.particle_z_hi, p_seed,
                                     cfg.lateral_jitter_px)
    seeds = {"particles": p_seed, "stacks": s_seed}
    stacks = [imaging.simulate_stack(p, cfg.z_min, cfg.z_max, opt, imaging.frame_seed(s_seed, p.id))
              for p in parts]
    imaging.save_stacks(out_dir, stacks, opt, seeds)
    echo_config(out_dir, cfg)
    try:
        fit = refz.fit_profile_baseline(stacks, cfg.detection_threshold)
    except (TooFewParticles, FitDiverged) as exc:
        log.warning("single-plane baseline not fitted: %s", exc)
    else:
        refz.write_profile(os.path.join(out_dir, "profile.csv"), os.path.join(out_dir, "profile.json"), fit)
    log.info("simulated %d stacks into %s", len(stacks), out_dir)
    return stacks


def _load_stacks_checked(stack_dir):
    if not os.path.isdir(stack_dir):
        raise FileNotFoundError(f"stack directory not found: {stack_dir}")
    return imaging.load_stacks(stack_dir)


def cmd_build(cfg: RunConfig, stack_dir, out_dir, delta=None):
    """Reference table, pairs and split for one offset; writes ``dataset.nlt``."""
    cfg.validate()
    delta = cfg.delta if delta is None else delta
    stacks, opt, _ = _load_stacks_checked(stack_dir)
    pairs.grid_steps(delta, opt.z_step)
    refs, _ = refz.reference_table(stacks, detection_threshold=cfg.detection_threshold)
    ds, rows = pairs.build_dataset(stacks, refs, delta, cfg.train_fraction,
                                   stage_seed(cfg.master_seed, "split"), opt.pixel_size)
    os.makedirs(out_dir, exist_ok=True)
    pairs.save_dataset(ds, os.path.join(out_dir, "dataset.nlt"))
    refz.write_reference_csv(os.path.join(out_dir, "references.csv"), refs)
    with open(os.path.join(out_dir, "build_log.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle_id", "candidates", "kept", "rejected"])
        w.writerows(rows)
    baseline = os.path.join(stack_dir, "profile.json")
    if os.path.isfile(baseline):
        with open(baseline) as fh:
            params = json.load(fh)
        with open(os.path.join(out_dir, "profile.json"), "w") as fh:
            json.dump(params, fh, indent=1, sort_keys=True)
    echo_config(out_dir, cfg, stack_dir=os.path.abspath(stack_dir), resolved_delta=float(delta))
    log.info("%d pairs (%d train / %d test) -> %s", len(ds), ds.n_train, ds.n_test, out_dir)
    return ds


def _load_dataset_checked(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    return pairs.load_dataset(path)


def cmd_train(cfg: RunConfig, dataset_path, out_dir, seed_stage="train"):
    cfg.validate()
    ds = _load_dataset_checked(dataset_path)
    tcfg = cfg.training(stage_seed(cfg.master_seed, seed_stage))
    model, logs = train(ds, tcfg, callback=lambda r: log.info(
        "epoch %d  train rmse %.1f nm  monitor rmse %.1f nm  test rmse %.1f nm  (%.0f s)",
        r.epoch, np.sqrt(r.train_mse), np.sqrt(r.monitor_mse), np.sqrt(r.test_mse), r.wall_seconds))
    os.makedirs(out_dir, exist_ok=True)
    checkpoint.save_model(model, os.path.join(out_dir, "model.nlm"))
    write_training_log(os.path.join(out_dir, "training_log.csv"), logs)
    echo_config(out_dir, cfg, dataset=os.path.abspath(dataset_path), train_seed=tcfg.seed,
                selected_epoch=model.selected_epoch)
    log.info("kept weights from epoch %d", model.selected_epoch)
    return model, logs


def _baseline_sigma(dataset_path):
    path = os.path.join(os.path.dirname(os.path.abspath(dataset_path)), "profile.json")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"single-plane baseline not found: {path}")
    with open(path) as fh:
        return float(json.load(fh)["sigma"])


def cmd_eval(cfg: RunConfig, dataset_path, checkpoint_path, out_dir):
    ds = _load_dataset_checked(dataset_path)
    if not os.path.isfile(checkpoint_path):
        raise FileNotFoundError(f"checkpoint not found: {checkpoint_path}")
    model = checkpoint.load_model(checkpoint_path)
    rep, res, prop = evaluate.make_report(model, ds, _baseline_sigma(dataset_path), cfg.to_dict())
    write_eval_outputs(out_dir, rep, res, prop)
    echo_config(out_dir, cfg, dataset=os.path.abspath(dataset_path), checkpoint=os.path.abspath(checkpoint_path))
    log.info("delta %g: sigma %.2f +- %.2f nm, bias %.2f nm, improvement x%.2f",
             rep.delta, rep.sigma_loc, rep.stderr, rep.bias, rep.improvement_factor)
    return rep


def write_eval_outputs(out_dir, rep, res, prop):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(rep.to_json())
    evaluate.write_residuals(os.path.join(out_dir, "residuals.csv"), res)
    if prop is not None:
        evaluate.write_proportionality(os.path.join(out_dir, "proportionality.csv"), prop)


def _sweep_cell(args):
    cfg, rep_dir, stack_dir, delta, replicate = args
    ds_dir = os.path.join(rep_dir, f"delta_{delta:g}")
    c = RunConfig.from_dict({**cfg.to_dict(), "master_seed": stage_seed(cfg.master_seed, f"replicate/{replicate}")})
    ds = cmd_build(c, stack_dir, ds_dir, delta)
    if not os.path.isfile(os.path.join(ds_dir, "profile.json")):
        raise FileNotFoundError(f"single-plane baseline not found in {stack_dir}")
    path = os.path.join(ds_dir, "dataset.nlt")
    cmd_train(c, path, ds_dir)
    rep = cmd_eval(c, path, os.path.join(ds_dir, "model.nlm"), ds_dir)
    del ds
    return rep


def cmd_sweep(cfg: RunConfig, out_dir):
    """simulate once, then build -> train -> eval for every (replicate, delta).

    Replicates share the simulated stacks; within a replicate every delta
    uses the same split and training seeds (paired comparison).
    """
    cfg.validate()
    stack_dir = os.path.join(out_dir, "stacks")
    cmd_simulate(cfg, stack_dir)
    cells = [(cfg, os.path.join(out_dir, f"seed_{r}"), stack_dir, float(d), r)
             for r in range(cfg.sweep_seeds) for d in sorted(cfg.deltas)]
    if cfg.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            reports = list(ex.map(_sweep_cell, cells))
    else:
        reports = [_sweep_cell(c) for c in cells]
    per_seed = [reports[r * len(cfg.deltas):(r + 1) * len(cfg.deltas)] for r in range(cfg.sweep_seeds)]
    for r, reps in enumerate(per_seed):
        evaluate.write_sweep_summary(os.path.join(out_dir, f"seed_{r}", "sweep_summary.csv"), reps)
    summaries = evaluate.combine_replicates(per_seed)
    write_combined_summary(os.path.join(out_dir, "sweep_summary.csv"), summaries, per_seed)
    status = evaluate.optimum_status(summaries) if 500.0 in {s.delta for s in summaries} else "not applicable"
    with open(os.path.join(out_dir, "sweep_status.json"), "w") as fh:
        json.dump({"status": status, "summaries": [dataclasses.asdict(s) for s in summaries]},
                  fh, indent=1, sort_keys=True)
    echo_config(out_dir, cfg)
    log.info("sweep: %s", status)
    return summaries, status, per_seed


def write_combined_summary(path, summaries, per_seed):
    """sweep_summary.csv over replicates: mean sigma, combined stderr, mean bias."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(evaluate.SWEEP_COLUMNS)
        for s in summaries:
            reps = [r for reps in per_seed for r in reps if r.delta == s.delta]
            n_pairs = reps[0].n_pairs
            bias = float(np.mean([r.bias for r in reps]))
            w.writerow([f"{s.delta:g}", n_pairs, f"{s.sigma:.6f}", f"{s.stderr:.6f}", f"{bias:.6f}"])


def cmd_gradcheck(seed=0):
    ok, res = gradcheck.run_all(seed)
    for name, err in res.items():
        print(f"{'ok  ' if err < gradcheck.TOLERANCE else 'FAIL'} {name:24s} {err:.2e}")
    return ok


# argument handling ------------------------------------------------------------

def _parse_set(items):
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise InvalidConfig(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def resolve_config(args):
    base = {}
    if args.config:
        if not os.path.isfile(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            try:
                base = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidConfig(f"{args.config}: {exc}") from None
        if not isinstance(base, dict):
            raise InvalidConfig("config file must hold a flat JSON object")
    base.update(_parse_set(args.set))
    for key, attr in (("master_seed", "seed"), ("output_dir", "out"), ("jobs", "jobs"),
                      ("epochs", "epochs"), ("n_particles", "n_particles")):
        v = getattr(args, attr, None)
        if v is not None:
            base[key] = v
    return RunConfig.from_dict(base)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat JSON config file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--jobs", type=int, help="parallel sweep cells")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--epochs", type=int)
    common.add_argument("--n-particles", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dualz", description="Dual-plane axial localization pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate z-stacks")
    b = sub.add_parser("build-dataset", parents=[common], help="build the image-pair dataset")
    b.add_argument("stack_dir")
    b.add_argument("--delta", type=float)
    t = sub.add_parser("train", parents=[common], help="train the regression network")
    t.add_argument("dataset")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("dataset")
    e.add_argument("checkpoint")
    sub.add_parser("sweep", parents=[common], help="full pipeline over the offset list")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    cfg = resolve_config(args)
    out = cfg.output_dir
    if args.command == "simulate":
        cmd_simulate(cfg, out)
    elif args.command == "build-dataset":
        cmd_build(cfg, args.stack_dir, out, args.delta)
    elif args.command == "train":
        cmd_train(cfg, args.dataset, out)
    elif args.command == "eval":
        cmd_eval(cfg, args.dataset, args.checkpoint, out)
    elif args.command == "sweep":
        cmd_sweep(cfg, out)
    elif args.command == "gradcheck":
        if not cmd_gradcheck(cfg.master_seed):
            return EXIT_NUMERIC
    return EXIT_OK


CONFIG_ERRORS = (InvalidConfig, DeltaNotOnGrid, RangeTooSmall, EmptySplit, TooFewParticles, TooFewSamples)
NUMERIC_ERRORS = (NonFiniteLoss, FitDiverged, FloatingPointError)


def main(argv=None):
    try:
        return run(argv)
    except CONFIG_ERRORS as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:  # includes FileNotFoundError and the binary FormatError family
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DualZError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
