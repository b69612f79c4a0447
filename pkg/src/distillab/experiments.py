"""Experiment driver: manifest ingestion, run orchestration, artifact
persistence, and report generation.

A manifest is a JSON file describing one experiment kind over a seed
list. ``run`` executes every seed sequentially and persists, per seed
and round: the checkpoint, a metrics CSV (epoch, split, accuracy,
loss), a curvature report, and optional loss-slice data, plus a
run-level manifest copy and summary table. ``report`` recomputes the
summary from the persisted per-seed records and emits figure data:
the accuracy table with up/down markers against the teacher column,
trace and top-eigenvalue bars per checkpoint, spectrum densities, and
contour plots of loss slices.

Everything is deterministic: re-running the same manifest reproduces
artifacts bit for bit, and report is idempotent.
"""

from __future__ import annotations

import csv
import json
import os
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .curvature import CurvatureContext, CurvatureReport, loss_slice_2d, measure_checkpoint
from .data import LabeledDataset, load_csv, load_idx, multiview_generate, MultiViewSpec
from .distill import (
    DistillConfig,
    Ensemble,
    RoundRecord,
    ban_predict,
    distill_from_ensemble,
    ensemble_logits,
    self_distill,
    train_round,
    train_scratch_members,
)
from .errors import ContractError, ManifestError
from .models import Model, ModelSpec, load_checkpoint, save_checkpoint
from .objectives import KDWeights
from .optim import OptimConfig

__all__ = [
    "ExperimentManifest",
    "CurvatureSettings",
    "load_manifest",
    "run",
    "report",
    "summarize",
    "OUTPUT_ROOT_ENV",
]

KINDS = ("scratch", "self-distill", "ensemble-teacher", "ban", "sam", "curvature-sweep")
OUTPUT_ROOT_ENV = "DISTILLAB_OUTPUT_ROOT"

UP, DOWN, FLAT = "↑", "↓", "-"


@dataclass(frozen=True)
class CurvatureSettings:
    enabled: bool = True
    subsample: int = 512
    trace_probes: int = 100
    lanczos_steps: int = 64
    slq_probes: int = 10
    power_iters: int = 100
    power_tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.subsample < 1 or self.trace_probes < 1 or self.slq_probes < 1:
            raise ContractError("curvature settings must be positive")
        if self.lanczos_steps < 2 or self.power_iters < 1 or not self.power_tol > 0:
            raise ContractError("curvature settings must be positive")


@dataclass(frozen=True)
class ExperimentManifest:
    kind: str
    seeds: tuple[int, ...]
    model: ModelSpec
    data: dict
    distill: DistillConfig
    curvature: CurvatureSettings = field(default_factory=CurvatureSettings)
    slice_grid: dict | None = None
    ensemble_sizes: tuple[int, ...] = ()
    source_run: str | None = None
    output_dir: str | None = None

    def to_json(self) -> dict:
        out = {
            "kind": self.kind,
            "seeds": list(self.seeds),
            "model": self.model.to_json(),
            "data": self.data,
            "distill": {
                "alpha": self.distill.weights.alpha,
                "tau": self.distill.weights.tau,
                "rounds": self.distill.rounds,
                "epochs": self.distill.epochs,
                "batch_size": self.distill.batch_size,
                "augment": self.distill.augment,
                "checkpoint": self.distill.checkpoint,
                "heldout_fraction": self.distill.heldout_fraction,
            },
            "optim": {
                "lr0": self.distill.optim.lr0,
                "momentum": self.distill.optim.momentum,
                "weight_decay": self.distill.optim.weight_decay,
                "clip_norm": self.distill.optim.clip_norm,
                "schedule": self.distill.optim.schedule,
                "lr_min": self.distill.optim.lr_min,
                "sam_rho": self.distill.optim.sam_rho,
            },
            "curvature": vars(self.curvature).copy(),
            "code_version": __version__,
        }
        if self.slice_grid is not None:
            out["slice"] = self.slice_grid
        if self.ensemble_sizes:
            out["ensemble_sizes"] = list(self.ensemble_sizes)
        if self.source_run is not None:
            out["source_run"] = self.source_run
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        return out


def _build_manifest(obj: dict) -> ExperimentManifest:
    problems = []

    kind = obj.get("kind")
    if kind not in KINDS:
        problems.append(f"kind must be one of {KINDS}, got {kind!r}")

    seeds = obj.get("seeds", [])
    if not isinstance(seeds, list) or not seeds:
        problems.append("seeds must be a nonempty list of integers")
    elif not all(isinstance(s, int) for s in seeds):
        problems.append("seeds must all be integers")
    elif len(set(seeds)) != len(seeds):
        problems.append("seeds must be distinct")

    model = None
    try:
        model = ModelSpec.from_json(obj.get("model", {}))
    except (ContractError, TypeError, KeyError) as exc:
        problems.append(f"model: {exc}")

    data = obj.get("data")
    if not isinstance(data, dict) or data.get("source") not in ("multiview", "csv", "idx"):
        problems.append("data.source must be one of multiview, csv, idx")
    else:
        try:
            _validate_data_section(data)
        except (ContractError, TypeError) as exc:
            problems.append(f"data: {exc}")

    optim_cfg = None
    try:
        optim_cfg = OptimConfig(**obj.get("optim", {}))
    except (ContractError, TypeError) as exc:
        problems.append(f"optim: {exc}")

    distill_cfg = None
    if optim_cfg is not None:
        d = dict(obj.get("distill", {}))
        try:
            weights = KDWeights(alpha=d.pop("alpha", 0.5), tau=d.pop("tau", 4.0))
            distill_cfg = DistillConfig(weights=weights, optim=optim_cfg, **d)
        except (ContractError, TypeError) as exc:
            problems.append(f"distill: {exc}")

    curvature = None
    try:
        curvature = CurvatureSettings(**obj.get("curvature", {}))
    except (ContractError, TypeError) as exc:
        problems.append(f"curvature: {exc}")

    slice_grid = obj.get("slice")
    if slice_grid is not None:
        res = slice_grid.get("resolution", 0)
        if res < 3 or res % 2 == 0 or not slice_grid.get("extent", 1.0) > 0:
            problems.append("slice.resolution must be odd and >= 3, slice.extent positive")

    sizes = tuple(obj.get("ensemble_sizes", ()))
    if kind == "ensemble-teacher":
        if not sizes or any((not isinstance(m, int)) or m < 1 for m in sizes):
            problems.append("ensemble-teacher requires positive ensemble_sizes")
    if kind == "sam" and optim_cfg is not None and optim_cfg.sam_rho is None:
        problems.append("sam runs require optim.sam_rho")
    if kind == "curvature-sweep" and not obj.get("source_run"):
        problems.append("curvature-sweep requires source_run")
    if model is not None and isinstance(data, dict) and "source" in data:
        try:
            _check_model_data_fit(model, data)
        except ContractError as exc:
            problems.append(str(exc))
    if distill_cfg is not None and distill_cfg.augment and model is not None \
            and model.kind == "mlp":
        problems.append("augmentation needs image-shaped data, not an mlp on flat features")

    if problems:
        raise ManifestError(problems)
    return ExperimentManifest(
        kind=kind,
        seeds=tuple(seeds),
        model=model,
        data=data,
        distill=distill_cfg,
        curvature=curvature,
        slice_grid=slice_grid,
        ensemble_sizes=sizes,
        source_run=obj.get("source_run"),
        output_dir=obj.get("output_dir"),
    )


def _validate_data_section(data: dict) -> None:
    source = data["source"]
    if source == "multiview":
        fields = {k: v for k, v in data.items() if k != "source"}
        MultiViewSpec(**fields)
    elif source == "csv":
        if "path" not in data:
            raise ContractError("csv data needs a path")
    else:
        if "images" not in data or "labels" not in data:
            raise ContractError("idx data needs images and labels paths")


def _check_model_data_fit(model: ModelSpec, data: dict) -> None:
    if data["source"] == "multiview":
        spec = MultiViewSpec(**{k: v for k, v in data.items() if k != "source"})
        if model.kind != "mlp":
            raise ContractError("multiview data is flat; use an mlp model")
        if model.input_dim != spec.input_dim:
            raise ContractError(
                f"model input_dim {model.input_dim} != multiview input dim {spec.input_dim}"
            )
        if model.k != spec.k:
            raise ContractError(f"model k {model.k} != multiview k {spec.k}")


def load_manifest(path) -> ExperimentManifest:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ManifestError([f"manifest file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ManifestError([f"manifest is not valid JSON: {exc}"]) from None
    if not isinstance(obj, dict):
        raise ManifestError(["manifest must be a JSON object"])
    return _build_manifest(obj)


def load_dataset(manifest: ExperimentManifest):
    """(train, test-or-None) for the manifest's data section."""
    data = manifest.data
    if data["source"] == "multiview":
        spec = MultiViewSpec(**{k: v for k, v in data.items() if k != "source"})
        return multiview_generate(spec)
    if data["source"] == "csv":
        return load_csv(data["path"]), None
    return load_idx(data["images"], data["labels"]), None


# --------------------------------------------------------------------------
# artifact layout helpers

def _round_label(index: int) -> str:
    return "T" if index == 0 else f"S{index}"


def _column_name(index: int) -> str:
    return "Teacher" if index == 0 else f"Round {index}"


def _seed_dir(out: Path, seed: int) -> Path:
    return out / "seeds" / f"seed_{seed}"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _persist_record(
    rdir: Path,
    record: RoundRecord,
    ctx: CurvatureContext | None,
    manifest: ExperimentManifest,
) -> dict:
    rdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(record.model, rdir / "checkpoint.ckpt")
    record.write_metrics_csv(rdir / "metrics.csv")
    entry = {
        "round": record.round_index,
        "best_epoch": record.best_epoch,
        "heldout_accuracy": record.heldout_accuracy,
        "discrepancy": record.discrepancy,
    }
    if ctx is not None:
        cset = manifest.curvature
        creport = measure_checkpoint(
            ctx,
            record.model,
            trace_probes=cset.trace_probes,
            lanczos_steps=cset.lanczos_steps,
            slq_probes=cset.slq_probes,
            power_iters=cset.power_iters,
            power_tol=cset.power_tol,
            seed=cset.seed,
        )
        (rdir / "curvature.json").write_text(creport.to_json() + "\n")
        creport.write_spectrum_csv(rdir / "spectrum.csv")
        entry["trace"] = creport.trace_estimate
        entry["lambda_max"] = creport.lambda_max
        if manifest.slice_grid is not None:
            grid = loss_slice_2d(
                ctx,
                record.model.params,
                resolution=manifest.slice_grid["resolution"],
                extent=manifest.slice_grid.get("extent", 1.0),
                seed=manifest.curvature.seed,
            )
            grid.write_csv(rdir / "slice.csv")
    return entry


def _curvature_context(manifest: ExperimentManifest, train: LabeledDataset):
    if not manifest.curvature.enabled:
        return None
    return CurvatureContext.from_dataset(
        manifest.model, train, n=manifest.curvature.subsample, seed=manifest.curvature.seed
    )


def _test_accuracy(model: Model, test: LabeledDataset | None) -> float | None:
    if test is None:
        return None
    logits = model.forward(test.inputs)
    return float(np.mean(np.argmax(logits, axis=1) == test.class_indices))


def _run_training_kind(manifest: ExperimentManifest, out: Path) -> None:
    train, test = load_dataset(manifest)
    ctx = _curvature_context(manifest, train)
    for seed in manifest.seeds:
        cfg = replace(manifest.distill, seed=seed)
        sdir = _seed_dir(out, seed)
        rounds_meta = []
        if manifest.kind in ("scratch", "sam"):
            record = train_round(None, replace(cfg, rounds=1), train, spec=manifest.model)
            entry = _persist_record(sdir / "round_0", record, ctx, manifest)
            entry["test_accuracy"] = _test_accuracy(record.model, test)
            rounds_meta.append(entry)
            extras = {}
        elif manifest.kind in ("self-distill", "ban"):
            records = self_distill(cfg, train, manifest.model)
            for record in records:
                entry = _persist_record(sdir / f"round_{record.round_index}", record, ctx, manifest)
                entry["test_accuracy"] = _test_accuracy(record.model, test)
                rounds_meta.append(entry)
            extras = {}
            if manifest.kind == "ban":
                from .data import split_heldout

                _, heldout = split_heldout(train, cfg.heldout_fraction, cfg.seed)
                logits = ban_predict(records, heldout.inputs)
                extras["ban_heldout_accuracy"] = float(
                    np.mean(np.argmax(logits, axis=1) == heldout.class_indices)
                )
                if test is not None:
                    logits = ban_predict(records, test.inputs)
                    extras["ban_test_accuracy"] = float(
                        np.mean(np.argmax(logits, axis=1) == test.class_indices)
                    )
        else:  # ensemble-teacher
            from .data import split_heldout

            _, heldout = split_heldout(train, cfg.heldout_fraction, cfg.seed)
            extras = {"sweep": []}
            for size in manifest.ensemble_sizes:
                ens = train_scratch_members(manifest.model, replace(cfg, rounds=1), train, size)
                student = distill_from_ensemble(ens, cfg, train)
                entry = _persist_record(
                    sdir / f"ensemble_{size}" / "student", student, ctx, manifest
                )
                ens_logits = ensemble_logits(ens, heldout.inputs)
                ens_acc = float(
                    np.mean(np.argmax(ens_logits, axis=1) == heldout.class_indices)
                )
                extras["sweep"].append(
                    {
                        "size": size,
                        "ensemble_heldout_accuracy": ens_acc,
                        "student_heldout_accuracy": student.heldout_accuracy,
                        "student_test_accuracy": _test_accuracy(student.model, test),
                    }
                )
        _write_json(sdir / "seed_summary.json", {"seed": seed, "rounds": rounds_meta, **extras})


def _run_curvature_sweep(manifest: ExperimentManifest, out: Path) -> None:
    source = Path(manifest.source_run)
    checkpoints = sorted(source.glob("seeds/*/round_*/checkpoint.ckpt"))
    if not checkpoints:
        raise ContractError(f"no checkpoints under {source}")
    train, _ = load_dataset(manifest)
    ctx = CurvatureContext.from_dataset(
        manifest.model, train, n=manifest.curvature.subsample, seed=manifest.curvature.seed
    )
    cset = manifest.curvature
    for ckpt_path in checkpoints:
        model = load_checkpoint(ckpt_path)
        rel = ckpt_path.relative_to(source).parent
        rdir = out / rel
        rdir.mkdir(parents=True, exist_ok=True)
        creport = measure_checkpoint(
            ctx,
            model,
            trace_probes=cset.trace_probes,
            lanczos_steps=cset.lanczos_steps,
            slq_probes=cset.slq_probes,
            power_iters=cset.power_iters,
            power_tol=cset.power_tol,
            seed=cset.seed,
        )
        (rdir / "curvature.json").write_text(creport.to_json() + "\n")
        creport.write_spectrum_csv(rdir / "spectrum.csv")
        if manifest.slice_grid is not None:
            grid = loss_slice_2d(
                ctx,
                model.params,
                resolution=manifest.slice_grid["resolution"],
                extent=manifest.slice_grid.get("extent", 1.0),
                seed=cset.seed,
            )
            grid.write_csv(rdir / "slice.csv")


def run(manifest: ExperimentManifest, out_dir, force: bool = False) -> Path:
    """Execute the experiment; artifacts land under ``out_dir``.

    Fails fast if the directory already holds a run, unless forced.
    On mid-run failure a marker is written and the exception propagates
    with partial artifacts left in place.
    """
    out = Path(out_dir)
    if (out / "manifest.json").exists():
        if not force:
            raise ContractError(f"{out} already holds a run; use force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "manifest.json", manifest.to_json())
    try:
        if manifest.kind == "curvature-sweep":
            _run_curvature_sweep(manifest, out)
        else:
            _run_training_kind(manifest, out)
        summary = summarize(out)
        _write_summary_csv(out / "summary.csv", summary)
        if manifest.kind != "curvature-sweep":
            _write_per_seed_csv(out / "per_seed.csv", out, json.loads((out / "manifest.json").read_text()))
        _write_json(out / "status.json", {"ok": True})
    except Exception as exc:
        _write_json(out / "status.json", {"ok": False, "error": f"{type(exc).__name__}: {exc}"})
        raise
    return out


# --------------------------------------------------------------------------
# summary and report

def _accuracy_from_metrics_csv(path: Path, policy: str) -> float:
    """Recompute the checkpoint accuracy from the persisted history."""
    heldout_rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] == "heldout":
                heldout_rows.append((int(row["epoch"]), float(row["accuracy"])))
    heldout_rows.sort()
    accs = [acc for _, acc in heldout_rows]
    return max(accs) if policy == "best-heldout" else accs[-1]


def _load_run(run_dir: Path):
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing artifacts: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    seeds = manifest["seeds"]
    missing = []
    per_seed = {}
    for seed in seeds:
        sdir = run_dir / "seeds" / f"seed_{seed}"
        summary_path = sdir / "seed_summary.json"
        if not summary_path.exists():
            missing.append(str(summary_path))
            continue
        per_seed[seed] = json.loads(summary_path.read_text())
    if missing:
        raise FileNotFoundError("missing artifacts: " + ", ".join(missing))
    return manifest, per_seed


def summarize(run_dir) -> dict:
    """Aggregate per-seed records into the run summary structure.

    Accuracies are recomputed from the persisted metrics CSVs, not from
    cached values, so the summary cross-checks the raw records.
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing artifacts: {manifest_path}")
    if json.loads(manifest_path.read_text())["kind"] == "curvature-sweep":
        manifest = json.loads(manifest_path.read_text())
        return {"kind": "curvature-sweep", "columns": [], "cells": {},
                "curvature": _collect_curvature(run_dir, manifest)}
    manifest, per_seed = _load_run(run_dir)
    kind = manifest["kind"]
    policy = manifest["distill"]["checkpoint"]
    if kind == "ensemble-teacher":
        rows = {}
        for seed, summary in per_seed.items():
            for item in summary["sweep"]:
                rows.setdefault(item["size"], {"ensemble": [], "student": []})
                rows[item["size"]]["ensemble"].append(item["ensemble_heldout_accuracy"])
                rows[item["size"]]["student"].append(item["student_heldout_accuracy"])
        sweep = [
            {
                "size": size,
                "ensemble_mean": float(np.mean(vals["ensemble"])),
                "ensemble_std": float(np.std(vals["ensemble"])),
                "student_mean": float(np.mean(vals["student"])),
                "student_std": float(np.std(vals["student"])),
            }
            for size, vals in sorted(rows.items())
        ]
        return {"kind": kind, "columns": [], "cells": {}, "sweep": sweep,
                "curvature": _collect_curvature(run_dir, manifest)}

    n_rounds = 1 if kind in ("scratch", "sam") else manifest["distill"]["rounds"]
    columns, cells = [], {}
    per_round_acc = {}
    for index in range(n_rounds):
        accs = []
        for seed in manifest["seeds"]:
            metrics = run_dir / "seeds" / f"seed_{seed}" / f"round_{index}" / "metrics.csv"
            if not metrics.exists():
                raise FileNotFoundError(f"missing artifacts: {metrics}")
            accs.append(_accuracy_from_metrics_csv(metrics, policy))
        per_round_acc[index] = accs
    teacher_mean = float(np.mean(per_round_acc[0]))
    for index in range(n_rounds):
        name = "SAM" if kind == "sam" else _column_name(index)
        mean = float(np.mean(per_round_acc[index]))
        std = float(np.std(per_round_acc[index]))
        cell = {"mean": mean, "std": std}
        if kind in ("self-distill", "ban") and index > 0:
            cell["marker"] = UP if mean > teacher_mean else DOWN if mean < teacher_mean else FLAT
        columns.append(name)
        cells[name] = cell
    out = {"kind": kind, "columns": columns, "cells": cells,
           "curvature": _collect_curvature(run_dir, manifest)}
    if kind == "ban":
        ban_accs = [per_seed[s]["ban_heldout_accuracy"] for s in manifest["seeds"]]
        out["columns"].append("BAN")
        out["cells"]["BAN"] = {"mean": float(np.mean(ban_accs)), "std": float(np.std(ban_accs))}
    return out


def _collect_curvature(run_dir: Path, manifest: dict) -> list[dict]:
    """Per-round mean trace and lambda_max over seeds, if reports exist."""
    rows = {}
    for path in sorted(run_dir.glob("seeds/*/round_*/curvature.json")):
        index = int(path.parent.name.split("_")[1])
        creport = CurvatureReport.from_json(path.read_text())
        rows.setdefault(index, {"trace": [], "stderr": [], "lambda_max": []})
        rows[index]["trace"].append(creport.trace_estimate)
        rows[index]["stderr"].append(creport.trace_stderr)
        rows[index]["lambda_max"].append(creport.lambda_max)
    label = {"sam": "SAM"}.get(manifest["kind"])
    return [
        {
            "label": label or _round_label(index),
            "trace_mean": float(np.mean(vals["trace"])),
            "trace_std": float(np.std(vals["trace"])),
            "lambda_max_mean": float(np.mean(vals["lambda_max"])),
            "lambda_max_std": float(np.std(vals["lambda_max"])),
        }
        for index, vals in sorted(rows.items())
    ]


def _format_cell(cell: dict) -> str:
    text = f"{cell['mean']:.4f}±{cell['std']:.4f}"
    if "marker" in cell:
        text += f" ({cell['marker']})"
    return text


def _write_per_seed_csv(path: Path, run_dir: Path, manifest: dict) -> None:
    """One row per persisted model: seed, round label, checkpoint accuracy."""
    policy = manifest["distill"]["checkpoint"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "label", "heldout_accuracy"])
        for seed in manifest["seeds"]:
            sdir = run_dir / "seeds" / f"seed_{seed}"
            for metrics in sorted(sdir.glob("round_*/metrics.csv")):
                index = int(metrics.parent.name.split("_")[1])
                acc = _accuracy_from_metrics_csv(metrics, policy)
                writer.writerow([seed, _round_label(index), repr(acc)])


def _write_summary_csv(path: Path, summary: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if summary.get("sweep"):
            writer.writerow(["size", "ensemble", "student"])
            for row in summary["sweep"]:
                writer.writerow(
                    [
                        row["size"],
                        f"{row['ensemble_mean']:.4f}±{row['ensemble_std']:.4f}",
                        f"{row['student_mean']:.4f}±{row['student_std']:.4f}",
                    ]
                )
        elif summary["columns"]:
            writer.writerow(summary["columns"])
            writer.writerow([_format_cell(summary["cells"][c]) for c in summary["columns"]])


def _write_curvature_bars_csv(path: Path, curvature: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["label", "trace_mean", "trace_std", "lambda_max_mean", "lambda_max_std"]
        )
        for row in curvature:
            writer.writerow(
                [
                    row["label"],
                    repr(row["trace_mean"]),
                    repr(row["trace_std"]),
                    repr(row["lambda_max_mean"]),
                    repr(row["lambda_max_std"]),
                ]
            )


def _setup_deterministic_matplotlib():
    import matplotlib

    matplotlib.use("Agg", force=True)
    matplotlib.rcParams["svg.hashsalt"] = "distillab"
    import matplotlib.pyplot as plt

    return plt


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def _plot_bars(plt, curvature: list[dict], path: Path) -> None:
    labels = [row["label"] for row in curvature]
    x = np.arange(len(labels))
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.bar(x - 0.18, [r["trace_mean"] for r in curvature], width=0.32, color="tab:red",
            label="trace")
    ax1.set_ylabel("trace")
    ax2 = ax1.twinx()
    ax2.bar(x + 0.18, [r["lambda_max_mean"] for r in curvature], width=0.32, color="tab:blue",
            label="top eigenvalue")
    ax2.set_ylabel("top eigenvalue")
    ax1.set_xticks(x)
    ax1.set_xticklabels(labels)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def _plot_spectra(plt, run_dir: Path, manifest: dict, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    seed = manifest["seeds"][0]
    sdir = run_dir / "seeds" / f"seed_{seed}"
    plotted = False
    for spectrum_csv in sorted(sdir.glob("round_*/spectrum.csv")):
        index = int(spectrum_csv.parent.name.split("_")[1])
        nodes, weights = [], []
        with open(spectrum_csv, newline="") as fh:
            for row in csv.DictReader(fh):
                nodes.append(float(row["node"]))
                weights.append(float(row["weight"]))
        if not nodes:
            continue
        nodes, weights = np.array(nodes), np.array(weights)
        span = max(nodes.max() - nodes.min(), 1e-6)
        grid = np.linspace(nodes.min() - 0.05 * span, nodes.max() + 0.05 * span, 400)
        sigma = max(span / 100.0, 1e-8)
        density = (weights[None, :] * np.exp(
            -0.5 * ((grid[:, None] - nodes[None, :]) / sigma) ** 2
        )).sum(axis=1) / (sigma * np.sqrt(2 * np.pi))
        ax.semilogy(grid, density + 1e-12, label=_round_label(index))
        plotted = True
    if plotted:
        ax.set_xlabel("eigenvalue")
        ax.set_ylabel("density")
        ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def _plot_contours(plt, run_dir: Path, manifest: dict, report_dir: Path) -> list[Path]:
    written = []
    seed = manifest["seeds"][0]
    sdir = run_dir / "seeds" / f"seed_{seed}"
    for slice_csv in sorted(sdir.glob("round_*/slice.csv")):
        index = int(slice_csv.parent.name.split("_")[1])
        coords, losses = _read_slice_csv(slice_csv)
        fig, ax = plt.subplots(figsize=(5, 4))
        cs = ax.contour(coords, coords, losses.T, levels=12)
        ax.clabel(cs, inline=True, fontsize=6)
        ax.set_title(_round_label(index))
        fig.tight_layout()
        out = report_dir / f"contour_{_round_label(index)}.svg"
        _save_svg(fig, out)
        plt.close(fig)
        written.append(out)
    return written


def _read_slice_csv(path: Path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((float(row["a"]), float(row["b"]), float(row["loss"])))
    coords = sorted({a for a, _, _ in rows})
    n = len(coords)
    index = {a: i for i, a in enumerate(coords)}
    losses = np.zeros((n, n))
    for a, b, value in rows:
        losses[index[a], index[b]] = value
    return np.array(coords), losses


def report(run_dir) -> Path:
    """Summary table plus figure data; idempotent over a finished run."""
    run_dir = Path(run_dir)
    summary = summarize(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    report_dir = run_dir / "report"
    report_dir.mkdir(exist_ok=True)
    _write_summary_csv(run_dir / "summary.csv", summary)
    _write_summary_csv(report_dir / "summary.csv", summary)
    if manifest["kind"] != "curvature-sweep":
        _write_per_seed_csv(run_dir / "per_seed.csv", run_dir, manifest)
    plt = _setup_deterministic_matplotlib()
    if summary["curvature"]:
        _write_curvature_bars_csv(report_dir / "curvature_bars.csv", summary["curvature"])
        _plot_bars(plt, summary["curvature"], report_dir / "curvature_bars.svg")
        _plot_spectra(plt, run_dir, manifest, report_dir / "spectrum_density.svg")
    _plot_contours(plt, run_dir, manifest, report_dir)
    return report_dir
