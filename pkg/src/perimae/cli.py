"""Command-line driver binding data synthesis, pretraining, fine-tuning,
evaluation, self-similarity inspection, and the ablation sweep into
reproducible runs.

Every subcommand takes a JSON run configuration (see config.py and the
annotated example shipped with the repository); all randomness derives from
configured seeds, so re-running a command on identical inputs reproduces its
artifacts. No subcommand mutates its inputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .adapt import evaluate_task, finetune, similarity_for_clip
from .config import ConfigError, RunConfig, load_run_config
from .objective import SimilarityMatrix
from .pretrain import load_checkpoint, run_pretraining
from .tokenizer import PatchConfig
from .videodata import generate_dataset, load_clip


def write_similarity_csv(sim: SimilarityMatrix, path: str | Path) -> None:
    """Plain comma-separated numeric grid with a header naming the group count."""
    lines = [f"# n_t={sim.n_t}"]
    for row in sim.S:
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_similarity_csv(path: str | Path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        rows.append([float(v) for v in line.split(",")])
    return np.array(rows, dtype=np.float64)


def _manifest_path(cfg: RunConfig, override: str | None) -> Path:
    if override:
        return Path(override)
    return Path(cfg.data.out_dir) / "manifest.json"


def _cmd_gen_data(cfg: RunConfig, args: argparse.Namespace) -> int:
    data = cfg.data
    seed = data.seed if args.seed is None else args.seed
    manifest = generate_dataset(
        data.out_dir,
        {"train": data.n_train, "val": data.n_val, "test": data.n_test},
        frames=data.frames,
        height=data.height,
        width=data.width,
        periods=data.periods,
        amplitude=data.amplitude,
        noise_level=data.noise_level,
        seed=seed,
        write_masks=data.write_masks,
    )
    print(f"wrote manifest: {manifest}")
    return 0


def _cmd_pretrain(cfg: RunConfig, args: argparse.Namespace) -> int:
    train_cfg = cfg.pretrain
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    ckpt, log = run_pretraining(
        train_cfg,
        _manifest_path(cfg, args.manifest),
        cfg.model,
        Path(cfg.run_dir) / "pretrain",
        resume_from=args.resume,
    )
    print(f"final checkpoint: {ckpt}")
    print(f"training log: {log}")
    return 0


def _cmd_finetune(cfg: RunConfig, args: argparse.Namespace) -> int:
    ft_cfg = cfg.finetune
    if args.seed is not None:
        ft_cfg = dataclasses.replace(ft_cfg, seed=args.seed)
    checkpoint = args.checkpoint or str(Path(cfg.run_dir) / "pretrain" / "checkpoint_final.pt")
    out_dir = Path(cfg.run_dir) / "finetune"
    _, _, report = finetune(
        cfg.finetune_task,
        checkpoint,
        _manifest_path(cfg, args.manifest),
        ft_cfg,
        out_dir=out_dir,
    )
    print(json.dumps(report, indent=1))
    print(f"task checkpoint: {out_dir / 'task_checkpoint.pt'}")
    return 0


def _cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    task_ckpt = args.task_checkpoint or str(
        Path(cfg.run_dir) / "finetune" / "task_checkpoint.pt"
    )
    report = evaluate_task(task_ckpt, _manifest_path(cfg, args.manifest))
    print(json.dumps(report, indent=1))
    return 0


def _cmd_inspect_sim(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    clip = load_clip(Path(args.clip).with_suffix(""))
    frames = torch.from_numpy(np.ascontiguousarray(clip.frames, dtype=np.float32))
    sim = similarity_for_clip(
        model, frames, mask_ratio=args.mask_ratio, seed=args.mask_seed
    )
    write_similarity_csv(sim, args.out)
    print(f"wrote similarity matrix ({sim.n_t} groups): {args.out}")
    return 0


ABLATION_RATIOS = (0.25, 0.5, 0.75, 0.9)
ABLATION_PATCHES = ((8, 8, 2), (8, 8, 4), (16, 16, 2), (16, 16, 4))
ABLATION_BASE_PATCH = (16, 16, 4)
ABLATION_BASE_RATIO = 0.75


def run_ablation(cfg: RunConfig, out_dir: str | Path) -> dict:
    """Sweep mask ratios and patch sizes, fine-tuning a segmentation head per
    cell, and emit the 8-cell result table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = cfg.data
    manifest = generate_dataset(
        out / "data",
        {"train": data.n_train, "val": data.n_val, "test": data.n_test},
        frames=data.frames,
        height=data.height,
        width=data.width,
        periods=data.periods,
        amplitude=data.amplitude,
        noise_level=data.noise_level,
        seed=data.seed,
        write_masks=True,
    )

    def run_cell(name: str, patch_hw_t: tuple[int, int, int], ratio: float) -> float:
        h, w, t = patch_hw_t
        model_cfg = dataclasses.replace(
            cfg.model,
            patch=PatchConfig(h=h, w=w, t=t, D=cfg.model.embed_dim),
        )
        train_cfg = dataclasses.replace(cfg.pretrain, mask_ratio=ratio)
        cell_dir = out / name
        ckpt, _ = run_pretraining(train_cfg, manifest, model_cfg, cell_dir / "pretrain")
        ft_cfg = dataclasses.replace(cfg.finetune, n_classes=1)
        _, _, report = finetune("segmentation", ckpt, manifest, ft_cfg)
        return float(report["mean_dice"])

    ratio_cells = {}
    for ratio in ABLATION_RATIOS:
        name = f"ratio_{int(round(ratio * 100)):02d}"
        ratio_cells[f"{ratio:.2f}"] = run_cell(name, ABLATION_BASE_PATCH, ratio)
    patch_cells = {}
    for patch in ABLATION_PATCHES:
        tag = "x".join(str(v) for v in patch)
        patch_cells[tag] = run_cell(f"patch_{tag}", patch, ABLATION_BASE_RATIO)

    results = {
        "patch_size": patch_cells,
        "mask_ratio": ratio_cells,
        "base_patch": "x".join(str(v) for v in ABLATION_BASE_PATCH),
        "base_ratio": ABLATION_BASE_RATIO,
    }
    (out / "ablation.json").write_text(json.dumps(results, indent=1) + "\n")
    table = format_ablation_table(results)
    (out / "ablation.txt").write_text(table)
    return results


def format_ablation_table(results: dict) -> str:
    lines = [f"== patch size (mask ratio {results['base_ratio']:.2f}) =="]
    lines.append(f"{'patch_size':<12}{'mdice':>8}")
    for tag, val in results["patch_size"].items():
        lines.append(f"{tag:<12}{val:>8.4f}")
    lines.append("")
    lines.append(f"== masking ratio (patch {results['base_patch']}) ==")
    lines.append(f"{'ratio':<12}{'mdice':>8}")
    for tag, val in results["mask_ratio"].items():
        lines.append(f"{tag:<12}{val:>8.4f}")
    return "\n".join(lines) + "\n"


def _cmd_ablate(cfg: RunConfig, args: argparse.Namespace) -> int:
    results = run_ablation(cfg, Path(cfg.run_dir) / "ablation")
    print(format_ablation_table(results))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="perimae",
        description="Periodic-video self-supervised pretraining toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the section seed")

    p = sub.add_parser("gen-data", help="synthesize clips and write a manifest")
    add_common(p)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    add_common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("finetune", help="train a downstream task head")
    add_common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--checkpoint", default=None, help="pretraining checkpoint")

    p = sub.add_parser("evaluate", help="recompute metrics from a task checkpoint")
    add_common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--task-checkpoint", default=None)

    p = sub.add_parser("inspect-sim", help="export a temporal self-similarity matrix")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="path to a stored clip (.npy)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--mask-ratio", type=float, default=0.0)
    p.add_argument("--mask-seed", type=int, default=0)

    p = sub.add_parser("ablate", help="sweep mask ratios and patch sizes")
    add_common(p)
    return parser


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "inspect-sim": _cmd_inspect_sim,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        return _COMMANDS[args.command](cfg, args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
