"""Command line entry point.

    hybridiff [--config FILE] [--seed N] [--threads N] [--out-dir DIR] COMMAND ...

Commands: datagen, train, sample, bench, eval, stats. The config file holds
``key = value`` lines (``#`` starts a comment) whose keys are the long option
names of the chosen command, with dashes or underscores. Command line flags
override file values. Every run writes ``resolved_config.txt`` to its output
directory, which defaults to ``$HYBRIDIFF_OUT`` or ``./runs``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import bench, datagen, evalsuite, trainer
from .backbone import ConfigError, ModelConfig, build_model
from .checkpoint import CheckpointError, load_checkpoint
from .conditioning import build_text_encoder
from .diffusion import DEFAULT_GUIDANCE, DEFAULT_STEPS, make_schedule
from .imageio import write_ppm, write_png, write_sidecar

log = logging.getLogger("hybridiff")

OUT_ENV = "HYBRIDIFF_OUT"


class UsageError(Exception):
    """Bad flags, config file problems or missing inputs (exit code 2)."""


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {text!r}")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# (flag, type, default, help); the default None means "not set"
MODEL_OPTS = [
    ("--n-blocks", int, 2, "number of hybrid blocks"),
    ("--hidden", int, 64, "model width"),
    ("--ratio-k", int, 1, "Mamba sublayers per attention sublayer"),
    ("--ssm-state", int, 16, "SSM state size N"),
    ("--d-text", int, 32, "text feature width"),
    ("--head-dim", int, 16, "attention head width"),
    ("--mixer", str, "hybrid", "hybrid, or attention for the pure-attention control"),
    ("--pe", str, "sincos", "positional embedding: sincos or learned"),
]

COMMANDS = {
    "datagen": [
        ("--n", int, 512, "number of scenes"),
        ("--mix", float, 0.9, "fraction of long captions"),
        ("--side", int, 16, "image side in pixels"),
        ("--quality-threshold", float, None, "aesthetic score cut for the quality subset"),
    ],
    "train": [
        ("--stage", str, "pretrain", "pretrain, quality or resadapt"),
        ("--manifest", str, None, "corpus manifest (jsonl) from datagen"),
        ("--ckpt", str, None, "starting checkpoint (resume for pretrain; required otherwise)"),
        ("--steps", int, 1000, "total optimisation steps for the stage"),
        ("--batch-size", int, None, "batch size (pretrain 32, quality 8)"),
        ("--lr", float, 1e-3, "constant learning rate"),
        ("--weight-decay", float, 0.0, "decoupled weight decay"),
        ("--ckpt-interval", int, 0, "checkpoint every N steps (0: final only)"),
        ("--eval-interval", int, 100, "quality stage: evaluate every N steps"),
        ("--patience", int, 2, "quality stage: evaluations without improvement before stopping"),
        ("--eval-prompts", int, 20, "quality stage: prompts per category for the evaluator"),
        ("--new-resolution", int, 0, "resadapt stage: target image side"),
        ("--pe-interp", _bool, True, "resadapt stage: interpolate (true) or re-initialise (false) the PE"),
        ("--compile-scan", _bool, False, "compile the SSM scan (faster long runs, slow first step)"),
        *MODEL_OPTS,
    ],
    "sample": [
        ("--ckpt", str, None, "checkpoint to sample from"),
        ("--prompt", str, None, "caption to render (repeatable via --n)"),
        ("--n", int, 1, "number of samples"),
        ("--steps", int, DEFAULT_STEPS, "solver steps"),
        ("--guidance", float, DEFAULT_GUIDANCE, "classifier-free guidance scale"),
    ],
    "bench": [
        ("--grid", _int_list, [64, 256, 1024], "token counts L (perfect squares)"),
        ("--ratios", _int_list, [1, 2, 3, 5], "K values"),
        ("--depth", int, 12, "sequence-mixing sublayers per model"),
        ("--reps", int, 5, "timed repetitions per point"),
        ("--mode", str, "forward", "forward or train_step"),
        ("--measure", _bool, True, "time the models (false: modeled columns only)"),
        ("--hidden", int, 64, "model width"),
    ],
    "eval": [
        ("--suite", str, "compbench", "compbench or frechet"),
        ("--ckpt", str, None, "checkpoint to evaluate"),
        ("--n-prompts", int, 50, "prompts per category (compbench) or images (frechet)"),
        ("--steps", int, DEFAULT_STEPS, "solver steps"),
        ("--guidance", float, DEFAULT_GUIDANCE, "classifier-free guidance scale"),
        ("--shrinkage", float, None, "diagonal covariance shrinkage for small sets"),
    ],
    "stats": [
        ("--manifest", str, None, "corpus manifest (jsonl)"),
        ("--valid-threshold", int, 10, "a noun is valid above this many occurrences"),
    ],
}


SUMMARIES = {
    "datagen": "render a synthetic scene corpus and its manifest",
    "train": "pretrain, quality-tune or resolution-adapt a model",
    "sample": "generate images for a caption from a checkpoint",
    "bench": "FLOP, state-memory and throughput comparison across ratios",
    "eval": "compositional benchmark or Frechet statistics for a checkpoint",
    "stats": "caption and noun statistics of a corpus",
}


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridiff", description=__doc__.split("\n\n")[0],
                                     argument_default=argparse.SUPPRESS)
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="random seed (default 0)")
    parser.add_argument("--threads", type=int, help="torch intra-op threads")
    parser.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or ./runs/<command>)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=SUMMARIES[name], argument_default=argparse.SUPPRESS)
        for flag, typ, default, text in opts:
            shown = "" if default is None else f" (default {default})"
            p.add_argument(flag, type=typ, help=text + shown)
    return parser


def read_config_file(path) -> dict[str, tuple[str, int]]:
    """``key -> (raw value, line number)``; a key given twice with different
    values is an error naming both lines."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    out: dict[str, tuple[str, int]] = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = key.strip().replace("-", "_"), value.strip()
        if key in out and out[key][0] != value:
            raise UsageError(f"{path}: '{key}' is set to {out[key][0]!r} on line {out[key][1]} "
                             f"and to {value!r} on line {n}")
        out.setdefault(key, (value, n))
    return out


def resolve(argv) -> dict:
    """Defaults, then config file, then command line flags."""
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    cmd = args.pop("command")
    types = {_dest(f): t for f, t, _, _ in COMMANDS[cmd]}
    types.update(seed=int, threads=int, out_dir=str)
    cfg = {_dest(f): d for f, _, d, _ in COMMANDS[cmd]}
    cfg.update(seed=0, threads=None, out_dir=None)
    config_path = args.pop("config", None)
    if config_path:
        for key, (raw, line) in read_config_file(config_path).items():
            if key not in types:
                raise UsageError(f"{config_path}:{line}: unknown key '{key}' for command '{cmd}'")
            try:
                cfg[key] = types[key](raw)
            except (ValueError, argparse.ArgumentTypeError) as err:
                raise UsageError(f"{config_path}:{line}: bad value for '{key}': {err}")
    cfg.update(args)
    cfg["command"] = cmd
    cfg["config"] = config_path
    if cfg["out_dir"] is None:
        root = os.environ.get(OUT_ENV)
        cfg["out_dir"] = str(Path(root) / cmd) if root else str(Path("runs") / cmd)
    return cfg


def write_resolved(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.txt", "w") as f:
        for k in sorted(cfg):
            v = cfg[k]
            if isinstance(v, list):
                v = ",".join(map(str, v))
            f.write(f"{k} = {'' if v is None else v}\n")
    return out


def _require(cfg, key, what):
    if not cfg.get(key):
        raise UsageError(f"'{cfg['command']}' needs --{key.replace('_', '-')} ({what})")


def _checkpoint(path):
    if not path or not Path(path).is_file():
        raise UsageError(f"checkpoint {path!r} not found; train one with 'hybridiff train' "
                         f"or pass --ckpt <path to .ckpt>")
    try:
        return load_checkpoint(path)
    except CheckpointError as err:
        raise UsageError(str(err))


def _manifest(path):
    if not path or not Path(path).is_file():
        raise UsageError(f"manifest {path!r} not found; create one with 'hybridiff datagen'")
    return datagen.Manifest.load(path)


# -- commands ----------------------------------------------------------------

def cmd_datagen(cfg, out: Path) -> None:
    m = datagen.build_corpus(cfg["n"], cfg["mix"], cfg["quality_threshold"], seed=cfg["seed"],
                             side=cfg["side"], out_dir=out)
    print(f"wrote {len(m.records)} records ({len(m.quality)} quality) to {out / 'manifest.jsonl'}")


def _model_config(cfg, side: int) -> ModelConfig:
    try:
        return ModelConfig(n_blocks=cfg["n_blocks"], hidden=cfg["hidden"], ratio_k=cfg["ratio_k"],
                           ssm_state=cfg["ssm_state"], d_text=cfg["d_text"], head_dim=cfg["head_dim"],
                           mixer=cfg["mixer"], pe=cfg["pe"], resolution=side)
    except ConfigError as err:
        raise UsageError(str(err))


def make_evaluator(encoder, n_per_category: int, seed: int, steps: int = 10, guidance: float = DEFAULT_GUIDANCE):
    prompts = evalsuite.make_prompt_set(n_per_category, seed=seed + 1)
    sampler = evalsuite.SamplerConfig(steps=steps, guidance=guidance, seed=seed)

    def evaluate(model) -> float:
        return evalsuite.compbench_report(model, prompts, sampler, encoder=encoder)["composite"]

    return evaluate


def cmd_train(cfg, out: Path) -> None:
    stage = {"pretrain": "pretrain", "quality": "quality_tune", "resadapt": "res_adapt"}.get(cfg["stage"])
    if stage is None:
        raise UsageError(f"--stage must be pretrain, quality or resadapt, got {cfg['stage']!r}")
    manifest = _manifest(cfg["manifest"])
    batch = cfg["batch_size"] or (8 if stage == "quality_tune" else 32)
    try:
        tc = trainer.TrainConfig(stage=stage, lr=cfg["lr"], weight_decay=cfg["weight_decay"], batch_size=batch,
                                 max_steps=cfg["steps"], ckpt_interval=cfg["ckpt_interval"],
                                 eval_interval=cfg["eval_interval"], patience=cfg["patience"],
                                 new_resolution=cfg["new_resolution"], seed=cfg["seed"],
                                 compile_scan=cfg["compile_scan"])
    except ValueError as err:
        raise UsageError(str(err))

    if stage == "pretrain":
        resume = _checkpoint(cfg["ckpt"]) if cfg["ckpt"] else None
        mcfg = resume.config if resume else _model_config(cfg, manifest.side)
        encoder = (trainer.load_encoder(resume, cfg["seed"]) if resume else
                   build_text_encoder(mcfg.d_text, seed=cfg["seed"], max_tokens=mcfg.max_text_tokens))
        data = trainer.dataset_from_manifest(manifest, encoder)
        model = build_model(mcfg, seed=cfg["seed"])
        result = trainer.pretrain(model, data, tc, run_dir=out, resume=resume, encoder=encoder)
        print(f"pretrain: {len(result.losses)} steps, last loss {result.losses[-1] if result.losses else float('nan'):.4f}, "
              f"checkpoint {out / 'checkpoints' / 'last.ckpt'}")
        return

    _require(cfg, "ckpt", "a pretrained checkpoint")
    ckpt = _checkpoint(cfg["ckpt"])
    encoder = trainer.load_encoder(ckpt, cfg["seed"])
    if stage == "quality_tune":
        subset = manifest.records
        if manifest.quality:
            subset = manifest.quality
        data = trainer.prepare_dataset([datagen.SceneSpec.from_dict(r["scene"]) for r in subset],
                                       [r["caption"] for r in subset], encoder, ckpt.config.resolution)
        evaluate = make_evaluator(encoder, cfg["eval_prompts"], cfg["seed"])
        result = trainer.quality_tune(ckpt, data, tc, evaluate, run_dir=out)
        for h in result.history:
            print(f"step {h['step']:>6}  score {h['score']:.4f}  loss {h['loss']:.4f}")
        print(f"best checkpoint: step {result.checkpoint.meta['step']} -> {out / 'checkpoints' / 'quality_best.ckpt'}")
    else:
        _require(cfg, "new_resolution", "the target image side")
        data = trainer.dataset_from_manifest(manifest, encoder, side=cfg["new_resolution"])
        try:
            result = trainer.adapt_resolution(ckpt, cfg["new_resolution"], tc, data, cfg["pe_interp"], run_dir=out)
        except ValueError as err:
            raise UsageError(str(err))
        print(f"resadapt: {len(result.losses)} steps at {cfg['new_resolution']}px -> "
              f"{out / 'checkpoints' / 'resadapt_last.ckpt'}")


def cmd_sample(cfg, out: Path) -> None:
    ckpt = _checkpoint(cfg["ckpt"])
    _require(cfg, "prompt", "the caption to render")
    model, _ = trainer.restore(ckpt)
    encoder = trainer.load_encoder(ckpt, cfg["seed"])
    sampler = evalsuite.SamplerConfig(steps=cfg["steps"], guidance=cfg["guidance"], seed=cfg["seed"])
    images = evalsuite.generate_images(model, encoder, [cfg["prompt"]] * cfg["n"], sampler,
                                       make_schedule(model.config.num_timesteps))
    for i, img in enumerate(images):
        stem = out / f"sample_{i:03d}"
        write_ppm(stem.with_suffix(".ppm"), img)
        try:
            write_png(stem.with_suffix(".png"), img)
        except ImportError:
            pass
        write_sidecar(stem.with_suffix(".txt"), {"prompt": cfg["prompt"], "seed": cfg["seed"], "index": i,
                                                 "steps": cfg["steps"], "guidance": cfg["guidance"],
                                                 "checkpoint": cfg["ckpt"]})
    print(f"wrote {len(images)} sample(s) to {out}")


def cmd_bench(cfg, out: Path) -> None:
    if cfg["mode"] not in ("forward", "train_step"):
        raise UsageError(f"--mode must be forward or train_step, got {cfg['mode']!r}")
    for L in cfg["grid"]:
        try:
            bench.config_for_length(ModelConfig(), L)
        except ValueError as err:
            raise UsageError(str(err))
    try:
        report = bench.compare_ratios(cfg["ratios"], cfg["grid"], depth=cfg["depth"],
                                      base=ModelConfig(hidden=cfg["hidden"]), reps=cfg["reps"],
                                      measure=cfg["measure"], mode=cfg["mode"], out_dir=out)
    except (ValueError, ConfigError) as err:
        raise UsageError(str(err))
    print(report["summary"], end="")
    print(f"c_scan = {report['c_scan']:.4f}; tables in {out}")


def cmd_eval(cfg, out: Path) -> None:
    ckpt = _checkpoint(cfg["ckpt"])
    model, _ = trainer.restore(ckpt)
    encoder = trainer.load_encoder(ckpt, cfg["seed"])
    sampler = evalsuite.SamplerConfig(steps=cfg["steps"], guidance=cfg["guidance"], seed=cfg["seed"])
    if cfg["suite"] == "compbench":
        prompts = evalsuite.make_prompt_set(cfg["n_prompts"], seed=cfg["seed"] + 1234)
        evalsuite.save_prompts(out / "prompts.jsonl", prompts)
        report = evalsuite.compbench_report(model, prompts, sampler, encoder=encoder)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        print(evalsuite.write_report(report, out / "report.csv", out / "report.txt"), end="")
    elif cfg["suite"] == "frechet":
        manifest = datagen.build_corpus(cfg["n_prompts"], seed=cfg["seed"] + 4321, side=ckpt.config.resolution)
        reference = [datagen.render(s, ckpt.config.resolution) for s in manifest.scenes()]
        generated = evalsuite.generate_images(model, encoder, manifest.captions(), sampler)
        try:
            d = evalsuite.frechet_stats_distance(generated, reference, cfg["shrinkage"])
        except ValueError as err:
            raise UsageError(str(err))
        (out / "frechet.txt").write_text(f"frechet_stats_distance = {d:.6g}\nn = {cfg['n_prompts']}\n")
        print(f"frechet_stats_distance = {d:.6g} over {cfg['n_prompts']} images")
    else:
        raise UsageError(f"--suite must be compbench or frechet, got {cfg['suite']!r}")


def cmd_stats(cfg, out: Path) -> None:
    manifest = _manifest(cfg["manifest"])
    stats = datagen.corpus_stats(manifest, cfg["valid_threshold"])
    long_frac = sum(r.get("style") == "long" for r in manifest.records) / len(manifest.records)
    stats["long_caption_fraction"] = long_frac
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    for k, v in stats.items():
        if k != "valid_noun_list":
            print(f"{k:<24}{v:.4f}" if isinstance(v, float) else f"{k:<24}{v}")
    print(f"{'valid nouns':<24}{' '.join(stats['valid_noun_list'])}")


HANDLERS = {"datagen": cmd_datagen, "train": cmd_train, "sample": cmd_sample, "bench": cmd_bench,
            "eval": cmd_eval, "stats": cmd_stats}


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = resolve(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as err:
        print(f"hybridiff: error: {err}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if cfg["threads"]:
        torch.set_num_threads(cfg["threads"])
    try:
        out = write_resolved(cfg)
        HANDLERS[cfg["command"]](cfg, out)
    except UsageError as err:
        print(f"hybridiff: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"hybridiff: {cfg['command']} failed: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
