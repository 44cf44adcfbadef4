"""Command line: ``stochvp {gen,train,rollout,eval,verify}``.

Every command reads an optional JSON config; explicit flags and
``--set key=value`` override its fields. Exit codes: 0 ok, 2 config error,
3 numeric failure, 4 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffcore as dc
from .model import ModelConfig, Trainer, build_id, build_model, load_model
from .synthdata import (GenerationError, SceneSpec, SequenceBatch, generate, read_dataset, sample_scene_spec,
                        stack_frames, write_dataset, write_sequence)

log = logging.getLogger("stochvp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = ""
    data: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    seed: int = 0
    threads: int = 1
    steps: int = 500
    ckpt_every: int = 100
    log_every: int = 10
    n_samples: int = 5
    horizon: int | None = None
    protocols: list[str] = field(default_factory=lambda: ["frames", "fgbg", "depth", "diversity"])
    model: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig.from_dict({"seed": self.seed, **self.model})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model config: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config fields {sorted(unknown)}")
    cfg = RunConfig(**raw)
    cfg.command = args.command
    for name in ("data", "out", "checkpoint", "seed", "threads", "steps", "ckpt_every", "n_samples", "horizon"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if getattr(args, "variant", None):
        cfg.model["variant"] = args.variant
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        if key.startswith("model."):
            cfg.model[key[6:]] = _parse_value(val)
        elif key in known:
            setattr(cfg, key, _parse_value(val))
        else:
            raise ConfigError(f"--set: unknown field {key!r}")
    return cfg


def _stamp(cfg: RunConfig, extra: dict | None = None) -> dict:
    # where outputs land is not part of the experiment
    hashed = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    d = {"config_hash": dc.config_hash(hashed), "build": build_id(), "seed": cfg.seed}
    d.update(extra or {})
    return d


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _set_threads(n: int) -> None:
    torch.set_num_threads(max(1, int(n)))


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def _line_of(text: str, needle: str) -> int | None:
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def parse_gen_spec(path: Path) -> list[SceneSpec]:
    """Scene list from JSON: ``{"sequences": [...]}`` and/or ``{"random": {...}}``."""
    if not path.exists():
        raise ConfigError(f"spec file {path} not found")
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or not ({"sequences", "random"} & set(doc)):
        raise ConfigError(f"{path}: expected an object with 'sequences' and/or 'random'")
    specs = []
    for i, d in enumerate(doc.get("sequences", [])):
        try:
            spec = SceneSpec.from_dict(d)
            spec.validate()
        except (GenerationError, TypeError, ValueError) as exc:
            bad = d.get("trajectory") if isinstance(d, dict) else None
            line = _line_of(text, f'"{bad}"') if bad else None
            where = f"{path}:{line}" if line else str(path)
            raise ConfigError(f"{where}: sequences[{i}]: {exc}") from exc
        specs.append(spec)
    if "random" in doc:
        r = dict(doc["random"])
        n, base = int(r.pop("n", 8)), int(r.pop("seed", 0))
        try:
            specs += [sample_scene_spec(base + k, **r) for k in range(n)]
        except (GenerationError, TypeError) as exc:
            raise ConfigError(f"{path}:{_line_of(text, 'random')}: random: {exc}") from exc
    return specs


def cmd_gen(args) -> int:
    cfg = load_run_config(args)
    if not args.spec or not cfg.out:
        raise ConfigError("gen needs --spec and --out")
    specs = parse_gen_spec(Path(args.spec))
    seeds = [s.seed for s in specs]
    dups = sorted({s for s in seeds if seeds.count(s) > 1})
    if dups:
        log.warning("duplicate scene seeds %s; generating anyway", dups)
    with ThreadPoolExecutor(max(1, cfg.threads)) as pool:
        batches = list(pool.map(generate, specs))
    write_dataset(batches, cfg.out, meta=_stamp(cfg, {"spec_file_hash": dc.config_hash(
        {"specs": [s.to_dict() for s in specs]})}))
    print(f"wrote {len(batches)} sequences to {cfg.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_data(cfg: RunConfig) -> list[SequenceBatch]:
    if not cfg.data or not Path(cfg.data).exists():
        raise ConfigError(f"dataset {cfg.data!r} not found")
    return read_dataset(cfg.data)


LOSS_COLUMNS = ("total", "recon_final", "recon_static", "recon_dynamic", "kl_static", "kl_dynamic", "sigma")


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    if not cfg.out:
        raise ConfigError("train needs --out")
    _set_threads(cfg.threads)
    mcfg = cfg.model_config()
    batches = _load_data(cfg)
    frames = stack_frames(batches)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        model, header = load_model(args.resume, expect_variant=mcfg.variant)
        if header["config_hash"] != mcfg.hash():
            raise ConfigError("resume checkpoint was trained with a different model config")
        trainer = Trainer(model, frames, batches[0].intrinsics, seed=cfg.seed)
        trainer.load(args.resume)
    else:
        trainer = Trainer(build_model(mcfg), frames, batches[0].intrinsics, seed=cfg.seed)
    cols = [c for c in LOSS_COLUMNS if mcfg.dynamic or c != "kl_dynamic"]
    log_path = out / "loss.csv"
    mode = "a" if args.resume and log_path.exists() else "w"
    stamp = _stamp(cfg, {"model_config_hash": mcfg.hash()})
    _write_json(out / "run.json", {**stamp, "config": cfg.to_dict()})
    with open(log_path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            w.writerow(["step"] + cols)
        while trainer.step < cfg.steps:
            try:
                r = trainer.train_step()
            except dc.NumericError as exc:
                print(f"numeric failure at step {trainer.step + 1}: {exc}", file=sys.stderr)
                return EXIT_NUMERIC
            w.writerow([trainer.step] + [repr(r[c]) for c in cols])
            if trainer.step % cfg.log_every == 0:
                fh.flush()
                log.info("step %d total %.2f", trainer.step, r["total"])
            if trainer.step % cfg.ckpt_every == 0 or trainer.step == cfg.steps:
                trainer.save(out / "last.ckpt", extra={"run": stamp})
                trainer.save(out / f"ckpt_{trainer.step:06d}.ckpt", extra={"run": stamp})
    print(f"trained to step {trainer.step}; checkpoint {out / 'last.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# rollout / eval
# ---------------------------------------------------------------------------

def _load_ckpt(cfg: RunConfig):
    if not cfg.checkpoint or not Path(cfg.checkpoint).exists():
        raise ConfigError(f"checkpoint {cfg.checkpoint!r} not found")
    variant = cfg.model.get("variant")
    try:
        return load_model(cfg.checkpoint, expect_variant=variant)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_rollout(args) -> int:
    from .metrics import psnr
    from .protocol import sample_futures
    from .viz import montage, write_ppm

    cfg = load_run_config(args)
    if not cfg.out:
        raise ConfigError("rollout needs --out")
    _set_threads(cfg.threads)
    model, header = _load_ckpt(cfg)
    batches = _load_data(cfg)
    n_cond = model.config.n_cond
    horizon = cfg.horizon or model.config.n_pred_eval
    if min(b.n_frames for b in batches) < n_cond:
        raise ConfigError(f"sequences shorter than n_cond={n_cond}")
    samples = sample_futures(model, batches, n_cond, horizon, cfg.n_samples, cfg.seed)
    out = Path(cfg.out)
    have_gt = min(b.n_frames for b in batches) - n_cond >= horizon
    if not have_gt:
        log.warning("horizon %d exceeds available ground truth; metrics skipped", horizon)
    summary = []
    for i, b in enumerate(batches):
        for k, s in enumerate(samples):
            d = out / f"seq_{i:04d}" / f"sample_{k:02d}"
            pred = SequenceBatch(
                frames=s.frames[i].numpy(), intrinsics=b.intrinsics, depths=s.depths[i].numpy(),
                poses=s.poses[i].numpy(),
                residual_flows=None if s.flows is None else s.flows[i].numpy(),
                fg_masks=None, spec={"source_sequence": i, "sample": k, **_stamp(cfg)},
                extras={name: getattr(s, name)[i].numpy() for name in ("static", "dynamic", "masks", "ego_flows")
                        if getattr(s, name) is not None})
            write_sequence(pred, d)
            rows = {"final": s.frames[i].numpy(), "static": s.static[i].numpy(),
                    "dynamic": None if s.dynamic is None else s.dynamic[i].numpy(),
                    "depth": s.depths[i].numpy(), "residual_flow": None if s.flows is None else s.flows[i].numpy(),
                    "ego_flow": s.ego_flows[i].numpy()}
            write_ppm(d / "strip.ppm", montage(rows))
            if have_gt:
                gt = b.frames[n_cond:n_cond + horizon]
                summary.append({"sequence": i, "sample": k,
                                "psnr": [psnr(p, g) for p, g in zip(s.frames[i], gt)]})
    _write_json(out / "rollout.json", {**_stamp(cfg, {"checkpoint_config_hash": header["config_hash"]}),
                                       "horizon": horizon, "n_samples": cfg.n_samples, "metrics": summary})
    print(f"wrote {len(batches) * cfg.n_samples} sample dumps to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .protocol import diversity_ratio, evaluate

    cfg = load_run_config(args)
    if not cfg.out:
        raise ConfigError("eval needs --out")
    _set_threads(cfg.threads)
    model, header = _load_ckpt(cfg)
    batches = _load_data(cfg)
    horizon = cfg.horizon or model.config.n_pred_eval
    protocols = list(cfg.protocols)
    if "diversity" in protocols and cfg.n_samples < 2:
        raise ConfigError("diversity report requires n_samples >= 2")
    report, _ = evaluate(model, batches, model.config.n_cond, horizon, cfg.n_samples, cfg.seed, protocols)
    report.meta.update(_stamp(cfg, {"checkpoint_config_hash": header["config_hash"]}))
    if "diversity" in protocols:
        report.meta["diversity_fg_bg_ratio"] = diversity_ratio(report)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "curves.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_table())
    for n in report.notices:
        print(f"notice: {n}", file=sys.stderr)
    print(report.to_table(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    from .geometry import corrupted_sampler_gradient
    from .verify import GROUPS, run_suite

    _set_threads(args.threads or 1)
    groups = args.groups.split(",") if args.groups else list(GROUPS)
    try:
        if args.corrupt_sampler:
            with corrupted_sampler_gradient():
                results = run_suite(args.seeds, groups, log=print)
        else:
            results = run_suite(args.seeds, groups, log=print)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    failed = [r for r in results if not r.passed]
    if args.out:
        _write_json(Path(args.out), {"build": build_id(), "results": [asdict(r) for r in results]})
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochvp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, ckpt=False):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="worker/intra-op thread bound")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field; model fields as model.<name>")
        if data:
            sp.add_argument("--data")
        if ckpt:
            sp.add_argument("--checkpoint")
        return sp

    g = common(sub.add_parser("gen", help="generate a synthetic dataset"), data=False)
    g.add_argument("--spec", required=True, help="JSON scene list")
    t = common(sub.add_parser("train", help="train a model"))
    t.add_argument("--variant", choices=["depth_only", "combined", "conditional"])
    t.add_argument("--steps", type=int)
    t.add_argument("--ckpt-every", dest="ckpt_every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    for name, h in (("rollout", "sample futures and dump strips"), ("eval", "evaluate a checkpoint")):
        sp = common(sub.add_parser(name, help=h), ckpt=True)
        sp.add_argument("--variant", choices=["depth_only", "combined", "conditional"])
        sp.add_argument("--n-samples", dest="n_samples", type=int)
        sp.add_argument("--horizon", type=int)
    v = sub.add_parser("verify", help="run the invariant suite")
    v.add_argument("--seeds", type=int, default=20)
    v.add_argument("--groups", help="comma-separated subset of check groups")
    v.add_argument("--threads", type=int)
    v.add_argument("--out", help="write JSON results here")
    v.add_argument("--corrupt-sampler", action="store_true", help="negative control: corrupt the sampler gradient")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "rollout": cmd_rollout, "eval": cmd_eval, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, GenerationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
