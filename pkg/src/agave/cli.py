"""Command-line entry point.

Usage::

    agave train --config run.cfg --joint-steps 2000
    agave eval --out-dir runs --eval-k 25
    agave sweep-lambda --height 16 --width 16

Every ``RunConfig`` field is available as ``--field-name``; a ``--config``
file of ``key=value`` lines supplies values first. Exit status is 0 on
success, 2 for configuration errors and 3 for runtime failures.
"""
import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .checkpoint import decode_checkpoint, encode_checkpoint, read_checkpoint
from .config import COMMANDS, RunConfig, build_config, field_types, format_config, parse_config_text, parse_value
from .data import load_cifar10_file, tile, toy_sprites, upscale, write_ppm
from .errors import AgaveError, ConfigError, ShapeMismatch
from .model import AgaveModel
from .objectives import EvalReport, evaluate, posterior_kl
from .training import Schedule, Trainer, format_record, held_out_terms

logger = logging.getLogger("agave")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
HELD_OUT_SEED_OFFSET = 1_000_003


def run_name(cfg: RunConfig, command: Optional[str] = None) -> str:
    return f"{command or cfg.command}-s{cfg.seed}-lam{cfg.lam:g}"


def artifact(cfg: RunConfig, suffix: str, command: Optional[str] = None) -> Path:
    return Path(cfg.out_dir) / f"{run_name(cfg, command)}{suffix}"


def default_checkpoint(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else artifact(cfg, ".ckpt", "train")


def load_dataset(cfg: RunConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Training and held-out images for the configured source."""
    if cfg.cifar10 is not None:
        images = load_cifar10_file(cfg.cifar10).images
        if (cfg.height, cfg.width) != images.shape[2:]:
            raise ConfigError(f"CIFAR-10 images are {images.shape[2]}x{images.shape[3]}; set height and width to match")
        if len(images) <= cfg.held_out_count:
            raise ConfigError("held_out_count leaves no training images")
        return images[:-cfg.held_out_count][:cfg.train_count], images[-cfg.held_out_count:]
    if (cfg.height, cfg.width) not in ((8, 8), (16, 16)):
        raise ConfigError("sprites come in 8x8 or 16x16 only")
    extents = (cfg.height, cfg.width)
    train = toy_sprites(cfg.sprites_seed, cfg.train_count, extents).images
    held_out = toy_sprites(cfg.sprites_seed + HELD_OUT_SEED_OFFSET, cfg.held_out_count, extents).images
    return train, held_out


def _load_model(cfg: RunConfig, path: Optional[Path] = None) -> AgaveModel:
    return read_checkpoint(path or default_checkpoint(cfg), expected=cfg.model_config()).model


# -- operations ------------------------------------------------------------------

@dataclasses.dataclass
class TrainResult:
    model: AgaveModel
    checkpoint: Path
    log: Path
    records: List[Dict]


def run_train(cfg: RunConfig, train_images: Optional[np.ndarray] = None) -> TrainResult:
    """Pretrain the factored and autoregressive decoders, then train jointly.

    A run with ``resume`` set continues from its own checkpoint. Zero steps
    in every phase just writes the initial checkpoint.
    """
    if train_images is None:
        train_images = load_dataset(cfg)[0]
    ckpt = artifact(cfg, ".ckpt", "train")
    log = artifact(cfg, ".log", "train")
    train_state = rng_state = None
    if cfg.resume and ckpt.exists():
        state = read_checkpoint(ckpt, expected=cfg.model_config())
        model, train_state, rng_state = state.model, state.train_state, state.rng_state
    else:
        model = AgaveModel(cfg.model_config())
        if log.exists():
            log.unlink()
    trainer = Trainer(model, train_images, seed=cfg.seed, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                      eps=cfg.eps, log_path=log, checkpoint_path=ckpt, train_state=train_state,
                      rng_state=rng_state)
    records = trainer.run(Schedule(cfg.vae_steps, cfg.ar_steps, cfg.joint_steps, cfg.batch_size,
                                   cfg.log_every, cfg.checkpoint_every))
    return TrainResult(model, ckpt, log, records)


def run_eval(cfg: RunConfig, model: Optional[AgaveModel] = None,
             held_out: Optional[np.ndarray] = None) -> List[EvalReport]:
    """ELBO and importance-weighted bits per dimension on the held-out images."""
    model = model or _load_model(cfg)
    held_out = load_dataset(cfg)[1] if held_out is None else held_out
    reports = [evaluate(model, held_out, np.random.default_rng(cfg.seed), K=1, batch_size=cfg.eval_batch)]
    if cfg.eval_k > 1:
        reports.append(evaluate(model, held_out, np.random.default_rng(cfg.seed), K=cfg.eval_k,
                                batch_size=cfg.eval_batch))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifact(cfg, ".eval.txt").write_text("".join(r.to_line() + "\n" for r in reports))
    artifact(cfg, ".eval.json").write_text(json.dumps([json.loads(r.to_json()) for r in reports], indent=1) + "\n")
    return reports


def _as_rgb(images: np.ndarray, height: int, width: int) -> np.ndarray:
    images = upscale(images, height, width)
    return np.repeat(images, 3, axis=1) if images.shape[1] == 1 else images


def run_sample(cfg: RunConfig, model: Optional[AgaveModel] = None) -> np.ndarray:
    """Grid with one row per prior draw: the f(z) render, then ``per_latent`` samples."""
    model = model or _load_model(cfg)
    rng = np.random.default_rng(cfg.seed)
    z = model.latent_noise(rng, cfg.samples)
    aux, images = model.sample(np.repeat(z, cfg.per_latent, axis=0), cfg.temperature, rng)
    renders = _as_rgb(aux[::cfg.per_latent], cfg.height, cfg.width)
    tiles = []
    for i in range(cfg.samples):
        tiles.append(renders[i:i + 1])
        tiles.append(images[i * cfg.per_latent:(i + 1) * cfg.per_latent])
    grid = tile(np.concatenate(tiles), cfg.samples, cfg.per_latent + 1)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    artifact(cfg, ".ppm").write_bytes(write_ppm(grid))
    return grid


def run_interpolate(cfg: RunConfig, model: Optional[AgaveModel] = None,
                    held_out: Optional[np.ndarray] = None) -> np.ndarray:
    """Two-row strip between the first two held-out images: f(z) renders above,
    conditional samples below, the end-point images in the outer columns."""
    model = model or _load_model(cfg)
    held_out = load_dataset(cfg)[1] if held_out is None else held_out
    if len(held_out) < 2:
        raise ShapeMismatch("interpolation needs two held-out images")
    x_a, x_b = held_out[0], held_out[1]
    aux, images = model.interpolate(x_a, x_b, cfg.interp_steps, np.random.default_rng(cfg.seed), cfg.temperature)
    renders = _as_rgb(aux, cfg.height, cfg.width)
    rows = [np.concatenate([x_a[None], row, x_b[None]]) for row in (renders, images)]
    strip = tile(np.concatenate(rows), 2, cfg.interp_steps + 2)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    artifact(cfg, ".ppm").write_bytes(write_ppm(strip))
    return strip


def run_sweep_lambda(cfg: RunConfig) -> Dict:
    """Train one model per (lambda, seed) and record held-out KL and reconstruction terms."""
    train, held_out = load_dataset(cfg)
    rows = []
    for lam in cfg.lambdas:
        for seed in cfg.seeds:
            run = dataclasses.replace(cfg, command="train", lam=float(lam), seed=int(seed))
            result = run_train(run, train)
            terms = held_out_terms(result.model, held_out, seed=cfg.seed)
            rows.append({"lambda": float(lam), "seed": int(seed), **terms})
            logger.info(format_record(rows[-1]))
    means = []
    for lam in cfg.lambdas:
        chosen = [r for r in rows if r["lambda"] == float(lam)]
        means.append({"lambda": float(lam), **{k: float(np.mean([r[k] for r in chosen]))
                                               for k in ("kl", "aux_nll", "primary_nll")}})
    order = np.argsort([m["lambda"] for m in means])
    kl = [means[i]["kl"] for i in order]
    aux = [means[i]["aux_nll"] for i in order]
    summary = {
        "runs": rows,
        "means": means,
        "kl_decreasing": bool(all(a > b for a, b in zip(kl, kl[1:]))),
        "aux_nll_increasing": bool(all(a < b for a, b in zip(aux, aux[1:]))),
    }
    name = f"sweep-lambda-s{cfg.seed}"
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.txt").write_text("".join(format_record(r) + "\n" for r in rows))
    (out / f"{name}.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def _fine_tune(model: AgaveModel, phase: str, train: np.ndarray, held_out: np.ndarray, cfg: RunConfig,
               lam: float, steps: int, log: Path, kl_before: float, stop_fraction: float = 0.0) -> List[Dict]:
    trainer = Trainer(model, train, seed=cfg.seed, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    interval = cfg.ablate_log_every or steps
    records = []
    if log.exists():
        log.unlink()
    done = 0
    while done < steps:
        chunk = min(interval, steps - done)
        stats = trainer.run_phase(phase, chunk, cfg.batch_size, log_every=0, lam=lam)[-1]
        done += chunk
        kl_term = float(np.mean(posterior_kl(model, held_out)))
        record = {"step": done, "phase": phase, "kl_term": kl_term, "kl_ratio": kl_term / kl_before,
                  **{k: v for k, v in stats.items() if k not in ("step", "phase")}}
        records.append(record)
        with log.open("a") as fh:
            fh.write(format_record(record) + "\n")
        if stop_fraction and kl_term < stop_fraction * kl_before:
            break
    return records


def run_ablate_aux(cfg: RunConfig, model: Optional[AgaveModel] = None,
                   data: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Dict:
    """Fine-tune a trained model without the auxiliary term and, as a paired
    control, with it, over the same number of steps."""
    train, held_out = data if data is not None else load_dataset(cfg)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    ckpt_bytes = None
    if model is None:
        path = default_checkpoint(cfg)
        ckpt_bytes = path.read_bytes()
        model = _load_model(cfg, path)
    ckpt_bytes = ckpt_bytes or encode_checkpoint(model)
    lam = model.config.lam if cfg.ablate_lam is None else cfg.ablate_lam
    kl_before = float(np.mean(posterior_kl(model, held_out)))
    ablated = decode_checkpoint(ckpt_bytes).model
    records = _fine_tune(ablated, "ablate", train, held_out, cfg, lam, cfg.ablate_steps,
                         artifact(cfg, ".log"), kl_before, cfg.stop_fraction)
    horizon = records[-1]["step"] if records else 0
    summary = {"kl_before": kl_before, "lambda": lam, "horizon": horizon, "ablation": records}
    if cfg.control:
        control = decode_checkpoint(ckpt_bytes).model
        summary["control"] = _fine_tune(control, "joint", train, held_out, cfg, lam, horizon,
                                        artifact(cfg, "-control.log"), kl_before)
    artifact(cfg, ".json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


# -- argument handling --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agave", description="Train and evaluate hybrid VAE / autoregressive image models.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="file of key=value settings, applied before command-line flags")
    parser.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    for name, tp in field_types().items():
        if name == "command":
            continue
        parser.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS,
                            metavar=name.upper(), help=f"({getattr(tp, '__name__', str(tp).replace('typing.', ''))})")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    types = field_types()
    overrides = {k: parse_value(k, v, types[k]) for k, v in vars(args).items() if k in types and k != "command"}
    overrides["command"] = args.command
    file_values = {}
    if args.config:
        try:
            file_values = parse_config_text(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
    return build_config(file_values, overrides)


def dispatch(cfg: RunConfig) -> str:
    """Run the configured command and return a short report."""
    if cfg.command == "train":
        result = run_train(cfg)
        return f"checkpoint {result.checkpoint}\nlog {result.log}"
    if cfg.command == "eval":
        return "\n".join(r.to_line() for r in run_eval(cfg))
    if cfg.command == "sample":
        run_sample(cfg)
        return f"samples {artifact(cfg, '.ppm')}"
    if cfg.command == "interpolate":
        run_interpolate(cfg)
        return f"interpolation {artifact(cfg, '.ppm')}"
    if cfg.command == "sweep-lambda":
        summary = run_sweep_lambda(cfg)
        return "\n".join(format_record(m) for m in summary["means"])
    summary = run_ablate_aux(cfg)
    last = summary["ablation"][-1] if summary["ablation"] else {"kl_ratio": 1.0}
    return f"kl_before={summary['kl_before']:.4f} kl_ratio_after={last['kl_ratio']:.4f}"


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(format_config(cfg))
            return EXIT_OK
        print(dispatch(cfg))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AgaveError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
