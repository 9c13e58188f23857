"""Experiment orchestration: dataset build, training, incremental sessions,
diagnostics, and the run-directory layout

    runs/<run_id>/{config.json, checkpoints/, reports/session_<t>.json,
                   masks/, metrics.csv}
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .analysis import (
    class_distance_cdfs,
    export_mask_overlay,
    patch_similarity_stats,
    planted_redundancy_alignment,
    write_analysis_json,
    write_cdf_csv,
)
from .config import ConfigError, ExperimentConfig, derive_seed, echo_config
from .core import MaskKind, PatchMask, ScheduleError, SessionSchedule, validate_schedule
from .data import (
    DatasetAdapter,
    ManifestAdapter,
    build_schedule,
    generate_synthetic,
    load_dataset,
)
from .model import build_backbone, save_checkpoint
from .protocol import IncrementalResult, _stack_split, run_incremental, train_base
from .rdi import compute_batch_masks

METRICS_COLUMNS = ["session", "top1", "ba", "na", "aa", "nn", "gap"]


@dataclass
class RunResult:
    run_dir: Path
    schedule: SessionSchedule
    reports: list
    incremental: Optional[IncrementalResult] = None
    analysis: Optional[dict] = None


def build_adapter(cfg: ExperimentConfig) -> DatasetAdapter:
    d = cfg.data
    if d.source == "synthetic":
        return generate_synthetic(d.synthetic_spec(seed=derive_seed(cfg.seed, "data")))
    if d.source == "directory":
        return load_dataset(Path(d.root))
    return ManifestAdapter("manifest", d.class_count, d.train_per_class, d.test_per_class)


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_metrics_csv(path: Path, reports: list) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for r in reports:
            writer.writerow([
                r.session, _fmt(r.session_top1), _fmt(r.ba_acc), _fmt(r.na_acc),
                _fmt(r.aa_acc), _fmt(r.nn_acc), _fmt(r.confusion_gap),
            ])


def write_schedule_csv(path: Path, schedule: SessionSchedule) -> list[dict]:
    rows = []
    for t in range(schedule.num_sessions):
        rows.append({
            "session": t,
            "cumulative_classes": len(schedule.classes_through(t)),
            "test_samples": sum(len(v) for v in schedule.test_manifests[t].values()),
        })
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["session", "cumulative_classes", "test_samples"])
        writer.writeheader()
        writer.writerows(rows)
    return rows


def _run_analysis(run_dir: Path, cfg: ExperimentConfig, adapter: DatasetAdapter,
                  schedule: SessionSchedule, trained, class_to_column: dict) -> dict:
    """Diagnostics on the final model over the base-class test set."""
    backbone, classifier = trained.backbone, trained.classifier
    reports_dir = run_dir / "reports"
    masks_dir = run_dir / "masks"
    masks_dir.mkdir(exist_ok=True)

    base_manifest = schedule.test_manifests[0]
    images, labels, ids = _stack_split(adapter, base_manifest)

    with torch.no_grad():
        fmaps = backbone(images)
        feats = fmaps.mean(dim=(1, 2)).numpy()
    by_class: dict[int, list] = {}
    for f, c in zip(feats, labels.numpy()):
        by_class.setdefault(int(c), []).append(f)
    cdfs = class_distance_cdfs(by_class)
    write_cdf_csv(reports_dir / "intra_class_cdf.csv", cdfs, "intra")
    write_cdf_csv(reports_dir / "inter_class_cdf.csv", cdfs, "inter")

    stats = patch_similarity_stats(backbone, classifier, images, labels,
                                   threshold=cfg.rdi.threshold, columns=class_to_column)

    payload = {
        "intra_class_distance_mean": cdfs.intra_mean,
        "inter_class_distance_mean": cdfs.inter_mean,
        "patch_similarity": stats.to_json_dict(),
    }

    if adapter.regions_of(ids[0]) is not None:
        h = fmaps.shape[1]
        stride = cfg.data.image_size // h
        col_labels = torch.tensor([class_to_column[int(c)] for c in labels])
        # Frozen-mask runs must be scored with the same snapshot that
        # produced their training masks, not the final weights.
        mask_bb = trained.mask_backbone if trained.mask_backbone is not None else backbone
        mask_clf = trained.mask_classifier if trained.mask_classifier is not None else classifier
        with torch.no_grad():
            mask_fmaps = mask_bb(images) if mask_bb is not backbone else fmaps
            bits, _ = compute_batch_masks(mask_fmaps, mask_clf, cfg.rdi.threshold)
        masks = [PatchMask(bits=b, kind=MaskKind.ALR) for b in bits]
        alignment = planted_redundancy_alignment(masks, ids, adapter, stride,
                                                 cfg.data.image_size)
        payload["alignment"] = {
            "ali_in_nuisance": alignment.ali_in_nuisance,
            "alr_in_signal": alignment.alr_in_signal,
            "nuisance_base_rate": alignment.nuisance_base_rate,
            "signal_base_rate": alignment.signal_base_rate,
            "samples": alignment.samples,
        }
        del col_labels
        for i in range(min(cfg.analysis.mask_export_samples, len(ids))):
            export_mask_overlay(masks_dir / f"{ids[i]}_alr.png",
                                adapter.load_image(ids[i]), masks[i], stride)

    write_analysis_json(reports_dir / "analysis.json", payload)
    return payload


def run_experiment(cfg: ExperimentConfig, schedule_only: bool = False,
                   run_root: Optional[Path] = None) -> RunResult:
    """Execute dataset build -> base training -> incremental sessions ->
    diagnostics; returns the run directory and per-session reports."""
    root = Path(run_root) if run_root is not None else Path(cfg.run_root)
    run_dir = root / cfg.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    (run_dir / "reports").mkdir(exist_ok=True)
    echo_config(cfg, run_dir / "config.json")

    adapter = build_adapter(cfg)
    schedule = build_schedule(adapter, cfg.data.base_count, cfg.data.sessions,
                              cfg.data.way, cfg.data.shot,
                              seed=derive_seed(cfg.seed, "schedule"))
    violations = validate_schedule(schedule)
    if violations:
        raise ScheduleError("; ".join(violations))
    schedule.save(run_dir / "schedule.json")
    write_schedule_csv(run_dir / "reports" / "schedule.csv", schedule)

    if schedule_only:
        return RunResult(run_dir=run_dir, schedule=schedule, reports=[])

    torch.manual_seed(derive_seed(cfg.seed, "torch"))
    backbone = build_backbone(cfg.model.arch, cfg.model.in_channels)
    trained = train_base(adapter, schedule, backbone, cfg.rdi.rdi_config(),
                         cfg.protocol.optimizer_config(), tau=cfg.model.temperature,
                         seed=derive_seed(cfg.seed, "train") % (2 ** 31))
    save_checkpoint(run_dir / "checkpoints" / "base_final.pt",
                    trained.backbone, trained.classifier)

    inc = run_incremental(trained.backbone, trained.classifier, adapter, schedule,
                          prototype_pooling=cfg.protocol.prototype_pooling,
                          rdi_cfg=cfg.rdi.rdi_config())
    for r in inc.reports:
        with open(run_dir / "reports" / f"session_{r.session}.json", "w") as f:
            import json

            json.dump(r.to_json_dict(), f, indent=2, sort_keys=True)
    write_metrics_csv(run_dir / "metrics.csv", inc.reports)

    analysis_payload = None
    if cfg.analysis.enabled:
        class_to_column = {c: i for i, c in enumerate(schedule.base_classes)}
        analysis_payload = _run_analysis(run_dir, cfg, adapter, schedule, trained,
                                         class_to_column)

    return RunResult(run_dir=run_dir, schedule=schedule, reports=inc.reports,
                     incremental=inc, analysis=analysis_payload)


ABLATION_VARIANTS = ("base", "alr", "ali", "full")


def variant_overrides(variant: str, rdi_section) -> dict:
    """Loss-term toggles: lam/beta zeroed per variant, 'on' values from config."""
    if variant == "base":
        return {"lam": 0.0, "beta": 0.0}
    if variant == "alr":
        return {"lam": rdi_section.lam, "beta": 0.0}
    if variant == "ali":
        return {"lam": 0.0, "beta": rdi_section.beta}
    if variant == "full":
        return {"lam": rdi_section.lam, "beta": rdi_section.beta}
    raise ConfigError(f"unknown ablation variant {variant!r}")


def run_ablation(cfg: ExperimentConfig, variants: list[str], seeds: list[int],
                 run_root: Optional[Path] = None) -> list[dict]:
    """One run per (variant, seed) cell; returns and writes a comparison table
    with final-session novel-class and all-class accuracy per cell."""
    root = Path(run_root) if run_root is not None else Path(cfg.run_root)
    grid_dir = root / cfg.run_id
    grid_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for variant in variants:
        overrides = variant_overrides(variant, cfg.rdi)
        for seed in seeds:
            rdi_dict = {**cfg.to_json_dict()["rdi"], **overrides}
            cell_cfg = cfg.with_overrides(
                seed=seed, run_id=f"{variant}_s{seed}", rdi=rdi_dict,
                run_root=str(grid_dir),
            )
            result = run_experiment(cell_cfg)
            final = result.reports[-1]
            rows.append({
                "variant": variant,
                "seed": seed,
                "novel": final.na_acc if final.na_acc is not None else "",
                "average": final.aa_acc,
            })

    with open(grid_dir / "ablation.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["variant", "seed", "novel", "average"])
        writer.writeheader()
        writer.writerows(rows)

    summary = []
    for variant in variants:
        cells = [r for r in rows if r["variant"] == variant]
        novel = [r["novel"] for r in cells if r["novel"] != ""]
        summary.append({
            "variant": variant,
            "novel": float(np.mean(novel)) if novel else "",
            "average": float(np.mean([r["average"] for r in cells])),
        })
    with open(grid_dir / "ablation_summary.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["variant", "novel", "average"])
        writer.writeheader()
        writer.writerows(summary)
    return rows


def render_report(run_dir: Path) -> Path:
    """Markdown summary (per-session accuracy row plus diagnostics) and plot
    files; partial runs produce a report with explicit gaps."""
    import json

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    lines = [f"# Run report: {run_dir.name}", ""]

    metrics_path = run_dir / "metrics.csv"
    sessions = []
    if metrics_path.exists():
        with open(metrics_path) as f:
            sessions = list(csv.DictReader(f))
        header = " | ".join(["Session"] + [r["session"] for r in sessions] + ["Average Acc."])
        top1 = [float(r["top1"]) for r in sessions]
        values = " | ".join(["Top-1"] + [f"{v:.4f}" for v in top1]
                            + [f"{float(np.mean(top1)):.4f}"])
        lines += ["## Session accuracy", "", header,
                  " | ".join(["---"] * (len(sessions) + 2)), values, ""]

        gaps = [(r["session"], r["gap"]) for r in sessions if r["gap"]]
        if gaps:
            lines += ["## Confusion gap (NN - NA) per session", ""]
            lines += [f"- session {s}: {float(g):.4f}" for s, g in gaps] + [""]
            fig, ax = plt.subplots(figsize=(6, 3))
            xs = [s for s, _ in gaps]
            ax.bar(xs, [float(g) for _, g in gaps])
            ax.set_xlabel("session")
            ax.set_ylabel("NN - NA")
            fig.tight_layout()
            fig.savefig(run_dir / "reports" / "confusion_gap.png", dpi=120)
            plt.close(fig)
    else:
        lines += ["## Session accuracy", "", "_missing: metrics.csv not found_", ""]

    analysis_path = run_dir / "reports" / "analysis.json"
    if analysis_path.exists():
        with open(analysis_path) as f:
            payload = json.load(f)
        lines += ["## Diagnostics", "",
                  f"- intra-class cosine distance mean: {payload['intra_class_distance_mean']:.4f}",
                  f"- inter-class cosine distance mean: {payload['inter_class_distance_mean']:.4f}"]
        if "alignment" in payload:
            al = payload["alignment"]
            lines += [f"- ALI mass in nuisance boxes: {al['ali_in_nuisance']:.4f} "
                      f"(base rate {al['nuisance_base_rate']:.4f})",
                      f"- ALR mass in signal boxes: {al['alr_in_signal']:.4f} "
                      f"(base rate {al['signal_base_rate']:.4f})"]
        ps = payload["patch_similarity"]
        lines += [f"- patch similarity (threshold {ps['threshold']}): "
                  f"central-to-own {ps['central_to_own']}, redundant-to-own {ps['redundant_to_own']}, "
                  f"central-to-other {ps['central_to_other']}, redundant-to-other {ps['redundant_to_other']}",
                  ""]

        for which in ("intra", "inter"):
            cdf_path = run_dir / "reports" / f"{which}_class_cdf.csv"
            if cdf_path.exists():
                with open(cdf_path) as f:
                    rows = list(csv.DictReader(f))
                if rows:
                    fig, ax = plt.subplots(figsize=(5, 3))
                    ax.plot([float(r["distance"]) for r in rows],
                            [float(r["cumulative_frequency"]) for r in rows])
                    ax.set_xlabel("cosine distance")
                    ax.set_ylabel("cumulative frequency")
                    ax.set_title(f"{which}-class distances")
                    fig.tight_layout()
                    fig.savefig(run_dir / "reports" / f"{which}_class_cdf.png", dpi=120)
                    plt.close(fig)
    else:
        lines += ["## Diagnostics", "", "_missing: analysis.json not found_", ""]

    out = run_dir / "summary.md"
    out.write_text("\n".join(lines))
    return out
