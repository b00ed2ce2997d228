"""Command-line entry point: one subcommand per pipeline phase, each leaving a run manifest.

Exit codes: 0 success, 1 user error (bad flags, config, inputs or missing
state), 2 internal error.
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, io
from .config import load_config
from .errors import CtsrError
from .seeding import derive_seed

log = logging.getLogger("ctsr")

SUBCOMMANDS = ("synth-data", "degrade", "train-vae", "pretrain-base", "train-control", "sample", "eval", "ablate")
MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def out_root() -> Path:
    return Path(os.environ.get("SSRB_OUT", "runs"))


# flag dest -> dotted config key; "{phase}" is filled per subcommand
FLAG_KEYS = {
    "seed": "seed",
    "size": "data.size",
    "scale": "degrade.scale",
    "instruction": "text.instruction",
    "visual_encoder": "finetune.visual_encoder",
    "cond_init": "finetune.cond_init",
    "fusion": "finetune.fusion",
    "steps": "diffusion.sample_steps",
    "eval_seed": "eval.seed",
    "iterations": "{phase}.iterations",
    "batch_size": "{phase}.batch_size",
    "lr": "{phase}.lr",
}
PHASE = {"train-vae": "vae", "pretrain-base": "pretrain", "train-control": "finetune", "ablate": "ablation"}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, value parsed as JSON when possible")
    p.add_argument("--out", help="output directory (default: $SSRB_OUT/<subcommand>)")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1, help="torch intra-op threads")
    p.add_argument("--log-level", default="INFO")


def _inputs(p, *names) -> None:
    helps = {
        "data": "dataset directory (default: $SSRB_OUT/synth-data)",
        "vae": "VAE directory (default: $SSRB_OUT/train-vae)",
        "base": "base checkpoint directory (default: $SSRB_OUT/pretrain-base)",
        "ckpt": "control checkpoint directory (default: $SSRB_OUT/train-control)",
    }
    for n in names:
        p.add_argument(f"--{n}", help=helps[n])


def _flags(p) -> None:
    p.add_argument("--instruction", choices=("none", "describe", "list"))
    p.add_argument("--visual-encoder", dest="visual_encoder", choices=("frozen", "learnable"))
    p.add_argument("--cond-init", dest="cond_init", choices=("pretrained", "random"))
    p.add_argument("--fusion", choices=("zero-init", "bare"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctsr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ctsr {__version__}")
    parser.add_argument("--replay", metavar="MANIFEST", help="re-execute a run from its run_manifest.json")
    parser.add_argument("--out", dest="replay_out", help="with --replay: write outputs here instead")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate phantom train/test datasets")
    _common(p)
    p.add_argument("--count", type=int, help="total number of images (split 8:1 train:test)")
    p.add_argument("--test-count", type=int)
    p.add_argument("--size", type=int)

    p = sub.add_parser("degrade", help="write frozen degraded LR inputs for a dataset split")
    _common(p)
    _inputs(p, "data")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--scale", type=int)

    p = sub.add_parser("train-vae", help="train the latent autoencoder")
    _common(p)
    _inputs(p, "data")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("pretrain-base", help="pretrain the text-conditioned base denoiser")
    _common(p)
    _inputs(p, "data", "vae")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("train-control", help="freeze the base and fine-tune the condition network")
    _common(p)
    _inputs(p, "data", "vae", "base")
    _flags(p)
    p.add_argument("--scale", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("sample", help="super-resolve LR images")
    _common(p)
    _inputs(p, "vae", "ckpt")
    p.add_argument("--input", nargs="+", required=True, help="LR images (.ssrb) or directories of them")
    p.add_argument("--meta", nargs="*", help="anatomy JSON per input, for captions")
    p.add_argument("--instruction", choices=("none", "describe", "list"))
    p.add_argument("--scale", type=int)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("eval", help="score a checkpoint on the frozen test set")
    _common(p)
    _inputs(p, "data", "vae", "ckpt")
    p.add_argument("--scale", type=int)
    p.add_argument("--instruction", choices=("none", "describe", "list"))
    p.add_argument("--eval-seed", dest="eval_seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr-dir", help="pre-degraded LR inputs from the degrade subcommand")

    p = sub.add_parser("ablate", help="run the ablation grid")
    _common(p)
    _inputs(p, "data", "vae", "base")
    p.add_argument("--arms", nargs="+", help="subset of arms (default: all)")
    p.add_argument("--scales", nargs="+", type=int)
    p.add_argument("--iterations", type=int, help="fine-tune iterations per arm")
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def overrides_from(args) -> dict:
    out = {}
    phase = PHASE.get(args.command)
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if "{phase}" in key:
            if phase is None:
                continue
            key = key.format(phase=phase)
        out[key] = value
    if args.command == "synth-data":
        out["data.seed"] = args.seed if args.seed is not None else None
        if args.count is not None:
            test = args.test_count if args.test_count is not None else max(1, args.count // 9)
            if not 0 < test < args.count:
                raise UsageError("--count must exceed --test-count, and both must be positive")
            out["data.train_count"] = args.count - test
            out["data.test_count"] = test
        elif args.test_count is not None:
            out["data.test_count"] = args.test_count
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def resolve_paths(args) -> dict:
    root = out_root()
    paths = {"out": str(Path(args.out) if args.out else root / args.command)}
    defaults = {"data": "synth-data", "vae": "train-vae", "base": "pretrain-base", "ckpt": "train-control"}
    for name, sub in defaults.items():
        if hasattr(args, name):
            value = getattr(args, name)
            paths[name] = str(Path(value) if value else root / sub)
    for name in ("input", "meta", "lr_dir", "split", "arms", "scales", "resume"):
        if getattr(args, name, None) is not None:
            paths[name] = getattr(args, name)
    return paths


# ---------------------------------------------------------------- commands

def cmd_synth_data(cfg, paths) -> dict:
    from .phantom import build_dataset

    manifests = build_dataset(paths["out"], cfg["data"])
    return {"counts": {s: len(m["items"]) for s, m in manifests.items()},
            "manifest_hashes": {s: io.hash_json(m) for s, m in manifests.items()}}


def cmd_degrade(cfg, paths) -> dict:
    from .harness import make_test_inputs
    from .phantom import Dataset

    ds = Dataset(paths["data"])
    split = paths.get("split", "test")
    scale = int(cfg["degrade"]["scale"])
    lr, recipes = make_test_inputs(ds.images(split), ds.items(split), cfg, scale)
    out = Path(paths["out"])
    for k, img in enumerate(lr):
        io.write_image(out / f"{k:05d}.ssrb", img)
    io.write_json(out / "recipes.json", recipes)
    return {"count": len(lr), "scale": scale, "lr_hash": io.hash_arrays({"lr": lr})}


def cmd_train_vae(cfg, paths) -> dict:
    from .harness import run_train_vae

    vae, summary = run_train_vae(paths["data"], cfg, paths["out"])
    return {"summary": summary}


def cmd_pretrain_base(cfg, paths) -> dict:
    from .harness import pretrain_base, smoothed

    pretrain_base(paths["data"], paths["vae"], cfg, paths["out"], resume=bool(paths.get("resume")))
    start, end = smoothed(io.read_json(Path(paths["out"]) / "pretrain_loss.json"))
    return {"loss_start": start, "loss_end": end}


def cmd_train_control(cfg, paths) -> dict:
    from .harness import finetune_control, smoothed

    finetune_control(paths["data"], paths["vae"], paths["base"], cfg, paths["out"])
    start, end = smoothed(io.read_json(Path(paths["out"]) / "finetune_loss.json"))
    return {"loss_start": start, "loss_end": end}


def _collect_inputs(entries) -> list[Path]:
    files = []
    for e in entries:
        p = Path(e)
        files.extend(sorted(p.glob("*.ssrb")) if p.is_dir() else [p])
    return files


def cmd_sample(cfg, paths) -> dict:
    from .autoencoder import load_vae
    from .harness import load_control, super_resolve
    from .phantom import AnatomyMeta

    vae = load_vae(paths["vae"])
    bundle = load_control(paths["ckpt"], vae)
    files = _collect_inputs(paths["input"])
    lr = [io.read_image(f) for f in files]
    metas = None
    if paths.get("meta"):
        if len(paths["meta"]) != len(files):
            raise UsageError("--meta needs one file per input image")
        metas = [AnatomyMeta.from_dict(io.read_json(m)) for m in paths["meta"]]
    seeds = [derive_seed(int(cfg["seed"]), "sample", k) for k in range(len(files))]
    sr = super_resolve(np.stack(lr), int(cfg["degrade"]["scale"]), bundle, vae, cfg, seeds,
                       metas=metas, instruction=cfg["text"]["instruction"])
    out = Path(paths["out"])
    written = []
    for f, img in zip(files, sr):
        io.write_image(out / f"{f.stem}_sr.ssrb", img)
        io.write_pgm(out / f"{f.stem}_sr.pgm", img)
        written.append(str(out / f"{f.stem}_sr.ssrb"))
    return {"outputs": written, "sr_hash": io.hash_arrays({"sr": sr})}


def cmd_eval(cfg, paths) -> dict:
    from .harness import evaluate

    rep = evaluate(paths["data"], paths["vae"], paths["ckpt"], cfg, paths["out"], lr_dir=paths.get("lr_dir"))
    print(Path(paths["out"], "report.txt").read_text(encoding="utf-8"), end="")
    return {"report_hash": rep["report_hash"], "mean": rep["mean"], "baseline": rep["baseline"]}


def cmd_ablate(cfg, paths) -> dict:
    from .harness import run_ablation

    table = run_ablation(paths["data"], paths["vae"], paths["base"], cfg, paths["out"],
                         arms=paths.get("arms"), scales=paths.get("scales"))
    print(Path(paths["out"], "ablation.txt").read_text(encoding="utf-8"), end="")
    failed = [f"{r['arm']} x{r['scale']}" for r in table["rows"] if "error" in r]
    return {"failed_arms": failed, "text_delta": table["text_delta"]}


COMMANDS = {
    "synth-data": cmd_synth_data,
    "degrade": cmd_degrade,
    "train-vae": cmd_train_vae,
    "pretrain-base": cmd_pretrain_base,
    "train-control": cmd_train_control,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _checkpoint_hashes(out: Path) -> dict:
    hashes = {}
    for f in sorted(out.glob("**/*.json")):
        try:
            data = io.read_json(f)
        except (ValueError, OSError):
            continue
        if isinstance(data, dict) and data.get("format") == "ssrb-ckpt":
            hashes[str(f.relative_to(out).with_suffix(""))] = data["group_hashes"]
    return hashes


def execute(command: str, cfg: dict, paths: dict, argv=None) -> dict:
    """Run one subcommand and write its manifest under ``paths['out']``."""
    out = Path(paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": command,
        "argv": list(argv) if argv is not None else None,
        "config": cfg,
        "config_hash": io.hash_json(cfg),
        "seeds": {"run": cfg["seed"], "data": cfg["data"]["seed"], "eval": cfg["eval"]["seed"]},
        "paths": paths,
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    try:
        result = COMMANDS[command](cfg, paths)
        manifest["status"] = "ok"
        manifest["result"] = result
        return manifest
    except BaseException as exc:
        manifest["status"] = "error"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest["hashes"] = _checkpoint_hashes(out)
        manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        io.write_json(out / MANIFEST, manifest)


def replay(manifest_path, out=None) -> dict:
    manifest = io.read_json(manifest_path)
    cfg, paths = manifest["config"], dict(manifest["paths"])
    if io.hash_json(cfg) != manifest["config_hash"]:
        raise CtsrError(f"{manifest_path}: stored config does not match its hash")
    if out is not None:
        paths["out"] = str(out)
    return execute(manifest["subcommand"], cfg, paths, argv=["--replay", str(manifest_path)])


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        level = getattr(args, "log_level", "INFO")
        logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.replay:
            manifest = replay(args.replay, args.replay_out)
        elif args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        else:
            torch.set_num_threads(max(1, args.jobs))
            cfg = load_config(args.config, overrides_from(args))
            paths = resolve_paths(args)
            manifest = execute(args.command, cfg, paths, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (CtsrError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    out = Path(manifest["paths"]["out"])
    print(f"{manifest['subcommand']}: ok")
    print(f"  out:      {out}")
    print(f"  manifest: {out / MANIFEST}")
    for key in ("data", "vae", "base", "ckpt", "lr_dir"):
        if key in manifest["paths"]:
            print(f"  {key + ':':<9} {manifest['paths'][key]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
