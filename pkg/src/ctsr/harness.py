"""Two-phase protocol (pretrain prior -> freeze -> fine-tune control), evaluation and ablations.

Directory conventions (all written by the functions here):

- VAE dir:       ``vae.{bin,json}``, ``vae_loss.json``
- base dir:      ``base.{bin,json}``, ``base_optim.{bin,json}``, ``pretrain_loss.json``
- control dir:   ``control.{bin,json}``, ``control_optim.{bin,json}``, ``finetune_loss.json``
- eval dir:      ``report.json``, ``report.txt``, ``captions.json``, ``images/``
"""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import io
from .autoencoder import encode_all, load_vae, train_vae, trainable_encoder_copy
from .control import BaseUNet, ControlledModel, DenoiserConfig, build_base_unet, build_controlled, load_state
from .degrade import DoseParams, degrade_item, resize
from .diffusion import ddpm_sample, make_schedule, sample_timestep, spaced_subsequence, training_loss
from .errors import NumericError, PreconditionError, StateError
from .metrics import psnr, ssim
from .phantom import Dataset
from .seeding import derive_seed, numpy_rng, torch_generator
from .text import Instruction, default_encoder, get_prompt

log = logging.getLogger(__name__)

LOSS_SMOOTH = 200


# ----------------------------------------------------------------- helpers

def schedule_from(cfg: dict):
    d = cfg["diffusion"]
    return make_schedule(int(d["timesteps"]), float(d["beta_1"]), float(d["beta_T"]))


def _schedule_of(meta: dict):
    d = meta["schedule"]
    return make_schedule(int(d["T"]), float(d["beta_1"]), float(d["beta_T"]), d.get("kind", "linear"))


def dose_from(cfg: dict) -> DoseParams:
    return DoseParams(float(cfg["dose"]["blank_flux"]), float(cfg["dose"]["mu_scale"]))


def prompts_for(metas, variant: str) -> list[str]:
    instr = Instruction.from_variant(variant)
    return [get_prompt(m, instr).text for m in metas]


def embed_prompts(prompts) -> torch.Tensor:
    enc = default_encoder()
    return torch.from_numpy(np.stack([enc.encode(p).tokens for p in prompts]))


def smoothed(values, window: int = LOSS_SMOOTH) -> tuple[float, float]:
    """Mean of the first and last ``window`` entries of a loss curve."""
    w = max(1, min(window, len(values) // 2))
    return float(np.mean(values[:w])), float(np.mean(values[-w:]))


def eval_degrade_seed(item_seed: int, scale: int) -> int:
    """Frozen per-item degradation seed for test inputs."""
    return derive_seed(item_seed, "eval-degrade", scale)


def make_test_inputs(hr: np.ndarray, items: list[dict], cfg: dict, scale: int):
    dose = dose_from(cfg)
    ranges = cfg["degrade"]["ranges"]
    lrs, recipes = [], []
    for img, it in zip(hr, items):
        lr, recipe = degrade_item(img, dose, eval_degrade_seed(it["seed"], scale), scale, ranges)
        lrs.append(lr)
        recipes.append(recipe.to_dict())
    return np.stack(lrs), recipes


def _lr_at(k: int, total: int, base_lr: float, warmup: int = 100) -> float:
    warm = min(1.0, (k + 1) / warmup)
    return base_lr * warm * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * k / total)))


def _save_optim(stem, opt: torch.optim.Optimizer, iteration: int, curve: list) -> None:
    arrays = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, value in state.items():
            arrays[f"{idx}.{key}"] = torch.as_tensor(value, dtype=torch.float32).reshape(-1) if key == "step" else value
    io.save_checkpoint(stem, {"optim": arrays}, {"iteration": iteration, "curve": curve})


def _load_optim(stem, opt: torch.optim.Optimizer) -> tuple[int, list]:
    groups, meta = io.load_checkpoint(stem)
    state: dict = {}
    for name, arr in groups.get("optim", {}).items():
        idx, key = name.split(".", 1)
        value = torch.from_numpy(arr.copy())
        state.setdefault(int(idx), {})[key] = value.reshape(()) if key == "step" else value
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)
    return int(meta["iteration"]), list(meta["curve"])


# ---------------------------------------------------------------- VAE phase

def run_train_vae(data_dir, cfg: dict, out_dir):
    ds = Dataset(data_dir)
    vae = train_vae(ds.images("train"), cfg["vae"], out_dir, seed=derive_seed(cfg["seed"], "vae"))
    with torch.no_grad():
        test = torch.from_numpy(ds.images("test"))
        rec = vae.decode(encode_all(vae, test))[:, 0]
        mse = float(torch.mean((rec - test) ** 2))
    curve = io.read_json(Path(out_dir) / "vae_loss.json")
    start, end = smoothed([c["loss"] for c in curve])
    summary = {"heldout_mse": mse, "latent_scale": float(vae.latent_scale), "loss_start": start, "loss_end": end}
    io.write_json(Path(out_dir) / "vae_summary.json", summary)
    return vae, summary


# ------------------------------------------------------------ pretrain phase

def load_base(base_dir) -> tuple[BaseUNet, dict]:
    stem = Path(base_dir) / "base"
    try:
        groups, meta = io.load_checkpoint(stem)
    except FileNotFoundError as exc:
        raise StateError(f"no base checkpoint at {stem}; run pretrain-base first") from exc
    base = BaseUNet(DenoiserConfig.from_dict(meta["model"]))
    load_state(base, groups["base"])
    base.attach_schedule(_schedule_of(meta).alpha_bar)
    return base, meta


def _train_embeddings(metas) -> dict[str, torch.Tensor]:
    return {v: embed_prompts(prompts_for(metas, v)) for v in ("none", "describe", "list")}


def pretrain_base(data_dir, vae_dir, cfg: dict, out_dir, resume: bool = False, stop_at: int | None = None) -> Path:
    """Train the text-conditioned prior on clean HR latents (no LR condition).

    Each item's caption variant is drawn per step (describe/list, or the empty
    prompt with probability ``text_dropout``) so the prior serves every
    ablation arm. ``stop_at`` ends the run early after a checkpoint, as an
    interruption would; ``resume`` continues from the last checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pcfg = cfg["pretrain"]
    seed = int(cfg["seed"])
    ds = Dataset(data_dir)
    vae = load_vae(vae_dir)
    z0_all = encode_all(vae, torch.from_numpy(ds.images("train")))
    emb = _train_embeddings(ds.metas("train"))
    sched = schedule_from(cfg)
    model_cfg = DenoiserConfig.from_dict(cfg["model"])
    base = build_base_unet(model_cfg, derive_seed(seed, "base-init")).attach_schedule(sched.alpha_bar)
    opt = torch.optim.Adam(base.parameters(), lr=float(pcfg["lr"]))
    iterations, batch = int(pcfg["iterations"]), int(pcfg["batch_size"])
    start, curve = 0, []
    if resume and (out_dir / "base_optim.json").exists():
        groups, _ = io.load_checkpoint(out_dir / "base")
        load_state(base, groups["base"])
        start, curve = _load_optim(out_dir / "base_optim", opt)
    n = len(z0_all)
    variants = ("describe", "list")
    base.train()
    t0 = time.time()
    for k in range(start, iterations):
        rng = numpy_rng(seed, "pretrain", k)
        idx = rng.integers(0, n, batch)
        drop = rng.random(batch) < float(pcfg["text_dropout"])
        pick = rng.integers(0, 2, batch)
        f_p = torch.stack([emb["none" if drop[j] else variants[pick[j]]][idx[j]] for j in range(batch)])
        gen = torch_generator(seed, "pretrain-noise", k)
        t = sample_timestep(gen, sched, batch)
        z0 = z0_all[idx]
        eps = torch.randn(z0.shape, generator=gen)
        for g in opt.param_groups:
            g["lr"] = _lr_at(k, iterations, float(pcfg["lr"]))
        loss = training_loss(base, z0, None, f_p, t, eps, sched)
        if not torch.isfinite(loss):
            raise NumericError(f"pretrain loss non-finite at iteration {k}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        curve.append(loss.item())
        done = k + 1
        if done % int(pcfg["checkpoint_every"]) == 0 or done == iterations:
            _save_base(out_dir, base, cfg, done)
            _save_optim(out_dir / "base_optim", opt, done, curve)
            io.write_json(out_dir / "pretrain_loss.json", curve)
            log.info("pretrain %d/%d loss %.4f (%.0fs)", done, iterations, float(np.mean(curve[-100:])), time.time() - t0)
            if stop_at is not None and done >= stop_at:
                break
    return out_dir / "base"


def _save_base(out_dir, base: BaseUNet, cfg: dict, iteration: int) -> None:
    meta = {
        "kind": "base",
        "model": base.cfg.to_dict(),
        "schedule": schedule_from(cfg).to_dict(),
        "iteration": iteration,
        "base_hash": io.hash_arrays(base.state_dict()),
        "hr_size": int(cfg["data"]["size"]),
    }
    io.save_checkpoint(Path(out_dir) / "base", {"base": base.state_dict()}, meta)


# ------------------------------------------------------------ finetune phase

@dataclass
class ControlBundle:
    model: ControlledModel
    visual_encoder: torch.nn.Module | None
    meta: dict


def finetune_control(data_dir, vae_dir, base_dir, cfg: dict, out_dir) -> Path:
    """Fine-tune the condition network (and optionally a visual-encoder copy) on degraded inputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fcfg = cfg["finetune"]
    seed = int(cfg["seed"])
    scale = int(cfg["degrade"]["scale"])
    base, base_meta = load_base(base_dir)
    ds = Dataset(data_dir)
    vae = load_vae(vae_dir)
    hr = ds.images("train")
    z0_all = encode_all(vae, torch.from_numpy(hr))
    variant = cfg["text"]["instruction"]
    f_p_all = embed_prompts(prompts_for(ds.metas("train"), variant))
    sched = schedule_from(cfg)

    model = build_controlled(base, fcfg["fusion"], fcfg["cond_init"], derive_seed(seed, "cond-init"))
    base_hash = model.base_hash()
    text_hash = default_encoder().param_hash()
    cond_init_hash = io.hash_arrays(model.cond.state_dict())
    learnable = fcfg["visual_encoder"] == "learnable"
    enc = trainable_encoder_copy(vae) if learnable else None
    params = model.trainable_parameters() + (list(enc.parameters()) if enc is not None else [])
    opt = torch.optim.Adam(params, lr=float(fcfg["lr"]))
    frozen_ids = {id(p) for p in model.base.parameters()} | {id(p) for p in vae.parameters()}
    assert not any(id(p) in frozen_ids for g in opt.param_groups for p in g["params"])

    dose = dose_from(cfg)
    ranges = cfg["degrade"]["ranges"]
    iterations, batch = int(fcfg["iterations"]), int(fcfg["batch_size"])
    n, size = len(hr), hr.shape[-1]
    curve: list[float] = []
    perms: dict[int, np.ndarray] = {}
    model.cond.train()
    t0 = time.time()
    for k in range(iterations):
        idx, lrs = [], []
        for j in range(batch):
            pos = k * batch + j
            epoch = pos // n
            if epoch not in perms:
                perms = {epoch: numpy_rng(seed, "finetune-perm", epoch).permutation(n)}
            item = int(perms[epoch][pos % n])
            lr_img, _ = degrade_item(hr[item], dose, derive_seed(seed, "train-degrade", epoch, item), scale, ranges)
            lrs.append(resize(lr_img, size=size, kernel="bicubic"))
            idx.append(item)
        up = torch.from_numpy(np.stack(lrs))
        if learnable:
            f_lr = vae.encode(up, encoder=enc)
        else:
            with torch.no_grad():
                f_lr = vae.encode(up)
        gen = torch_generator(seed, "finetune-noise", k)
        t = sample_timestep(gen, sched, batch)
        z0 = z0_all[idx]
        eps = torch.randn(z0.shape, generator=gen)
        loss = training_loss(model, z0, f_lr, f_p_all[idx], t, eps, sched)
        if not torch.isfinite(loss):
            raise NumericError(f"finetune loss non-finite at iteration {k}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        curve.append(loss.item())
        done = k + 1
        if done % int(fcfg["checkpoint_every"]) == 0 or done == iterations:
            log.info("finetune %d/%d loss %.4f (%.0fs)", done, iterations, float(np.mean(curve[-100:])), time.time() - t0)
    if model.base_hash() != base_hash:
        raise StateError("base parameters changed during fine-tuning")
    meta = {
        "kind": "control",
        "model": base.cfg.to_dict(),
        "schedule": sched.to_dict(),
        "options": {k: fcfg[k] for k in ("fusion", "cond_init", "visual_encoder")},
        "instruction": variant,
        "scale": scale,
        "iterations": iterations,
        "hr_size": size,
        "base_hash": base_hash,
        "base_source_hash": base_meta["base_hash"],
        "text_encoder_hash": text_hash,
        "cond_init_hash": cond_init_hash,
        "freeze": {"base": "frozen", "cond": "trainable", "fusion": "trainable",
                   "visual_encoder": "trainable" if learnable else "absent"},
    }
    groups = model.groups()
    if enc is not None:
        groups["visual_encoder"] = enc.state_dict()
    io.save_checkpoint(out_dir / "control", groups, meta)
    _save_optim(out_dir / "control_optim", opt, iterations, [])
    io.write_json(out_dir / "finetune_loss.json", curve)
    return out_dir / "control"


def load_control(ckpt_dir, vae=None) -> ControlBundle:
    stem = Path(ckpt_dir) / "control"
    try:
        groups, meta = io.load_checkpoint(stem)
    except FileNotFoundError as exc:
        raise StateError(f"no control checkpoint at {stem}; run train-control first") from exc
    base = BaseUNet(DenoiserConfig.from_dict(meta["model"]))
    load_state(base, groups["base"])
    base.attach_schedule(_schedule_of(meta).alpha_bar)
    opts = meta["options"]
    model = build_controlled(base, opts["fusion"], "random" if opts["cond_init"] == "random" else "pretrained")
    load_state(model.cond, groups["cond"])
    load_state(model.fusion, groups["fusion"])
    enc = None
    if "visual_encoder" in groups:
        if vae is None:
            raise StateError("a VAE is needed to host the learnable visual encoder")
        enc = trainable_encoder_copy(vae)
        load_state(enc, groups["visual_encoder"])
        for p in enc.parameters():
            p.requires_grad_(False)
    model.eval()
    return ControlBundle(model, enc, meta)


# ---------------------------------------------------------- inference + eval

@torch.no_grad()
def super_resolve(lr_images, scale: int, bundle: ControlBundle, vae, cfg: dict, seeds,
                  metas=None, instruction: str | None = None, prompts=None, batch_size: int = 16) -> np.ndarray:
    """Upsample -> encode f_lr -> caption -> embed -> spaced DDPM -> decode.

    ``lr_images`` is N x h x w in [0, 1]; ``seeds`` gives one sampler seed per
    image. Prompts come from ``prompts`` if given, else from ``metas`` via the
    template provider with ``instruction`` (default: the checkpoint's).
    """
    lr_images = np.asarray(lr_images, dtype=np.float32)
    if lr_images.ndim == 2:
        lr_images = lr_images[None]
    hr_size = int(bundle.meta["hr_size"])
    side = lr_images.shape[-1] * scale
    if side != hr_size or lr_images.shape[-2] * scale != hr_size:
        raise PreconditionError(f"LR {lr_images.shape[-2:]} x{scale} does not match model HR side {hr_size}")
    if prompts is None:
        variant = instruction or bundle.meta.get("instruction", "list")
        prompts = prompts_for(metas if metas is not None else [None] * len(lr_images), variant)
    sched = schedule_from(cfg)
    steps = spaced_subsequence(sched, int(cfg["diffusion"]["sample_steps"]))
    out = []
    for s in range(0, len(lr_images), batch_size):
        chunk = lr_images[s : s + batch_size]
        up = np.stack([resize(x, size=hr_size, kernel="bicubic") for x in chunk])
        f_lr = vae.encode(torch.from_numpy(up), encoder=bundle.visual_encoder)
        f_p = embed_prompts(prompts[s : s + batch_size])
        z = ddpm_sample(bundle.model, sched, steps, f_lr, f_p, list(seeds[s : s + batch_size]),
                        variance=cfg["diffusion"]["variance"])
        out.append(vae.decode(z)[:, 0].clamp(0.0, 1.0).numpy())
    return np.concatenate(out)


def evaluate(data_dir, vae_dir, ckpt_dir, cfg: dict, out_dir, lr_dir=None, dump_images: bool = True) -> dict:
    """Score the checkpoint on the frozen test set against a bicubic baseline."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scale = int(cfg["degrade"]["scale"])
    ds = Dataset(data_dir)
    vae = load_vae(vae_dir)
    bundle = load_control(ckpt_dir, vae)
    if int(bundle.meta["scale"]) != scale:
        log.warning("checkpoint trained at x%s, evaluating at x%s", bundle.meta["scale"], scale)
    items = ds.items("test")
    hr = ds.images("test")
    if lr_dir is not None:
        lr = np.stack([io.read_image(Path(lr_dir) / f"{k:05d}.ssrb") for k in range(len(items))])
    else:
        lr, _ = make_test_inputs(hr, items, cfg, scale)
    variant = cfg["text"]["instruction"]
    prompts = prompts_for(ds.metas("test"), variant)
    eval_seed = int(cfg["eval"]["seed"])
    seeds = [derive_seed(eval_seed, "sample", k) for k in range(len(items))]
    sr = super_resolve(lr, scale, bundle, vae, cfg, seeds, prompts=prompts, batch_size=int(cfg["eval"]["batch_size"]))
    rows = []
    for k, it in enumerate(items):
        bic = resize(lr[k], size=hr.shape[-1], kernel="bicubic")
        rows.append({
            "index": k,
            "seed": it["seed"],
            "psnr": psnr(sr[k], hr[k]),
            "ssim": ssim(sr[k], hr[k]),
            "bicubic_psnr": psnr(bic, hr[k]),
            "bicubic_ssim": ssim(bic, hr[k]),
        })
        if dump_images:
            io.write_image(out_dir / "images" / f"{k:05d}_sr.ssrb", sr[k])
            io.write_pgm(out_dir / "images" / f"{k:05d}_sr.pgm", sr[k])
    enc = default_encoder()
    io.write_json(out_dir / "captions.json", [
        {"index": k, "prompt": p, "pad_only": bool(enc.encode(p).pad_mask.all())} for k, p in enumerate(prompts)
    ])
    mean = lambda key: float(np.mean([r[key] for r in rows]))  # noqa: E731
    report = {
        "scale": scale,
        "count": len(rows),
        "items": rows,
        "mean": {"psnr": mean("psnr"), "ssim": mean("ssim")},
        "baseline": {"bicubic": {"psnr": mean("bicubic_psnr"), "ssim": mean("bicubic_ssim")}},
        "instruction": variant,
        "seed": eval_seed,
        "config_hash": io.hash_json(cfg),
        "dataset_hash": ds.manifest_hash("test"),
        "base_hash": bundle.model.base_hash(),
        "cond_init_hash": bundle.meta["cond_init_hash"],
        "text_encoder_hash": enc.param_hash(),
        "checkpoint": {k: bundle.meta[k] for k in ("options", "instruction", "scale", "iterations")},
    }
    report_hash = io.hash_json(report)
    io.write_json(out_dir / "report.json", {**report, "report_hash": report_hash})
    (out_dir / "report.txt").write_text(format_report(report, report_hash), encoding="utf-8")
    report["report_hash"] = report_hash
    return report


def format_report(report: dict, report_hash: str) -> str:
    s = report["scale"]
    lines = [
        f"{'method':<12} | {'x' + str(s) + ' PSNR':>10} {'SSIM':>8}",
        "-" * 34,
        f"{'bicubic':<12} | {report['baseline']['bicubic']['psnr']:>10.4f} {report['baseline']['bicubic']['ssim']:>8.4f}",
        f"{'ours':<12} | {report['mean']['psnr']:>10.4f} {report['mean']['ssim']:>8.4f}",
        "",
        f"items={report['count']} seed={report['seed']} report_hash={report_hash[:16]}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- ablations

ARMS = {
    "full": {},
    "text-none": {"text.instruction": "none"},
    "text-describe": {"text.instruction": "describe"},
    "visual-frozen": {"finetune.visual_encoder": "frozen"},
    "cond-random": {"finetune.cond_init": "random"},
}
FLAGGED = ("text.instruction", "finetune.visual_encoder", "finetune.cond_init", "finetune.fusion", "degrade.scale")


def _get(cfg: dict, dotted: str):
    node = cfg
    for key in dotted.split("."):
        node = node[key]
    return node


def arm_config(cfg: dict, arm: str, scale: int) -> dict:
    import copy

    from .config import set_dotted

    out = copy.deepcopy(cfg)
    out["finetune"]["iterations"] = int(cfg["ablation"]["iterations"])
    out["degrade"]["scale"] = int(scale)
    for key, value in ARMS[arm].items():
        set_dotted(out, key, value)
    return out


def run_ablation(data_dir, vae_dir, base_dir, cfg: dict, out_dir, arms=None, scales=None) -> dict:
    """Fine-tune and evaluate every requested arm at every scale; failures are recorded, not raised."""
    out_dir = Path(out_dir)
    arms = list(arms or ARMS)
    scales = [int(s) for s in (scales or cfg["ablation"]["scales"])]
    rows = []
    for arm in arms:
        for scale in scales:
            acfg = arm_config(cfg, arm, scale)
            arm_dir = out_dir / "arms" / f"{arm}_x{scale}"
            row = {"arm": arm, "scale": scale, "flags": {k: _get(acfg, k) for k in FLAGGED},
                   "config_hash": io.hash_json(acfg)}
            try:
                finetune_control(data_dir, vae_dir, base_dir, acfg, arm_dir / "ckpt")
                rep = evaluate(data_dir, vae_dir, arm_dir / "ckpt", acfg, arm_dir / "eval", dump_images=False)
                row.update({
                    "psnr": rep["mean"]["psnr"],
                    "ssim": rep["mean"]["ssim"],
                    "bicubic_psnr": rep["baseline"]["bicubic"]["psnr"],
                    "bicubic_ssim": rep["baseline"]["bicubic"]["ssim"],
                    "base_hash": rep["base_hash"],
                    "cond_init_hash": rep["cond_init_hash"],
                    "report_hash": rep["report_hash"],
                })
            except Exception as exc:  # an arm failure must not stop the grid
                log.exception("ablation arm %s x%d failed", arm, scale)
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    table = {"rows": rows, "arms": arms, "scales": scales, "text_delta": _text_delta(rows)}
    io.write_json(out_dir / "ablation.json", table)
    (out_dir / "ablation.txt").write_text(format_ablation(table), encoding="utf-8")
    return table


def _text_delta(rows) -> dict:
    """PSNR of the full (list-prompt) arm minus the no-text arm, per scale; reported, not gated."""
    out = {}
    by = {(r["arm"], r["scale"]): r for r in rows if "psnr" in r}
    for (arm, scale), r in by.items():
        if arm == "full" and ("text-none", scale) in by:
            delta = r["psnr"] - by[("text-none", scale)]["psnr"]
            out[f"x{scale}"] = {"psnr_delta_db": delta, "direction": "text helps" if delta > 0 else "text does not help"}
    return out


def format_ablation(table: dict) -> str:
    scales = table["scales"]
    by = {(r["arm"], r["scale"]): r for r in table["rows"]}

    def cell(arm, s):
        r = by.get((arm, s))
        if r is None:
            return f"{'-':>9} {'-':>7}"
        if "error" in r:
            return f"{'FAILED':>9} {'':>7}"
        return f"{r['psnr']:>9.4f} {r['ssim']:>7.4f}"

    head = "".join(f" | x{s} PSNR     SSIM" for s in scales)
    out = ["Text prompts (instruction)", f"{'arm':<22}{head}", "-" * (22 + 20 * len(scales))]
    for label, arm in (("none", "text-none"), ("describe", "text-describe"), ("list", "full")):
        out.append(f"{label:<22}" + "".join(f" | {cell(arm, s)}" for s in scales))
    out += ["", "Condition network / visual encoder", f"{'arm':<22}{head}", "-" * (22 + 20 * len(scales))]
    for label, arm in (("cond random init", "cond-random"), ("cond pretrained init", "full"),
                       ("visual enc frozen", "visual-frozen"), ("visual enc learnable", "full")):
        out.append(f"{label:<22}" + "".join(f" | {cell(arm, s)}" for s in scales))
    bic = []
    for s in scales:
        r = next((r for r in table["rows"] if r["scale"] == s and "bicubic_psnr" in r), None)
        bic.append(f"{r['bicubic_psnr']:>9.4f} {r['bicubic_ssim']:>7.4f}" if r else f"{'-':>9} {'-':>7}")
    out += ["", f"{'bicubic baseline':<22}" + "".join(f" | {b}" for b in bic)]
    for key, d in table["text_delta"].items():
        out.append(f"text vs no-text {key}: {d['psnr_delta_db']:+.4f} dB ({d['direction']})")
    return "\n".join(out) + "\n"
