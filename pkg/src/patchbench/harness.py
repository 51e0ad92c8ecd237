"""Experiment runner and metrics engine.

Builds paired benign/adversarial evaluation sets, sweeps the (patch, p, k)
grid through the full pipeline, and reports every rate together with the raw
counts that define it. Detection outcomes are reused across the p sweep and
sliced across the k sweep (both are exact, not approximations, because the
per-image streams are keyed independently of p and k).
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__ as PACKAGE_VERSION
from .detector import load_holdout, restrict_outcome
from .harness_config import ExperimentConfig  # re-export convenience
from .mitigator import InpaintBackend, MaskSpec
from .model_zoo import load_checkpoint, load_dataset
from .patch_forge import (apply_patch_batch, load_patch, sample_placement,
                          _train_hash)
from .pipeline import Verdict, detect_stage, mitigate_stage, verdict_to_dict
from .seeding import derive_rng


@dataclass
class MetricsReport:
    """Rates plus the raw counts that define them (counts are authoritative)."""

    n_adv: int
    n_benign: int
    det_flagged_adv: int
    det_flagged_benign: int
    final_flagged_adv: int
    final_flagged_benign: int
    adv_final_correct: int
    benign_raw_correct: int
    attack_eligible: int
    attack_success: int
    det_flagged_adv_successful: int
    adv_final_target: int

    @staticmethod
    def _ratio(num: int, den: int) -> float:
        return num / den if den else 0.0

    @property
    def clean_accuracy(self) -> float:
        return self._ratio(self.benign_raw_correct, self.n_benign)

    @property
    def attack_success_rate(self) -> float:
        return self._ratio(self.attack_success, self.attack_eligible)

    @property
    def detection_success_recall(self) -> float:
        return self._ratio(self.det_flagged_adv, self.n_adv)

    @property
    def detection_recall_successful_only(self) -> float:
        return self._ratio(self.det_flagged_adv_successful, self.attack_success)

    @property
    def detection_fpr(self) -> float:
        return self._ratio(self.det_flagged_benign, self.n_benign)

    @property
    def robust_accuracy(self) -> float:
        return self._ratio(self.adv_final_correct, self.n_adv)

    @property
    def mitigation_fpr(self) -> float:
        return self._ratio(self.final_flagged_benign, self.n_benign)

    @property
    def mitigation_success_recall(self) -> float:
        return self._ratio(self.final_flagged_adv, self.n_adv)

    @property
    def defended_asr(self) -> float:
        """Fraction of adversarial inputs whose final pipeline label is the target."""
        return self._ratio(self.adv_final_target, self.n_adv)

    RATE_NAMES = ("clean_accuracy", "attack_success_rate",
                  "detection_success_recall", "detection_fpr",
                  "robust_accuracy", "mitigation_fpr",
                  "mitigation_success_recall", "defended_asr",
                  "detection_recall_successful_only")
    COUNT_NAMES = ("n_adv", "n_benign", "det_flagged_adv", "det_flagged_benign",
                   "final_flagged_adv", "final_flagged_benign",
                   "adv_final_correct", "benign_raw_correct", "attack_eligible",
                   "attack_success", "det_flagged_adv_successful",
                   "adv_final_target")

    def to_dict(self) -> dict:
        out = {name: int(getattr(self, name)) for name in self.COUNT_NAMES}
        out.update({name: float(getattr(self, name)) for name in self.RATE_NAMES})
        return out


def compute_metrics(verdicts_adv: list[Verdict], gt_adv, target_class: int,
                    verdicts_benign: list[Verdict], gt_benign) -> MetricsReport:
    """Aggregate paired adversarial/benign verdicts into a MetricsReport.

    Benign inputs must be the patch-free pairing of the adversarial inputs
    (same order); attack success is counted only where the clean prediction is
    not already the target class.
    """
    gt_adv = np.asarray(gt_adv)
    gt_benign = np.asarray(gt_benign)
    if len(verdicts_adv) == 0 or len(verdicts_benign) == 0:
        raise ValueError("verdict lists must be nonempty")
    if len(verdicts_adv) != len(gt_adv) or len(verdicts_benign) != len(gt_benign):
        raise ValueError("one ground truth per verdict required")
    if len(verdicts_adv) != len(verdicts_benign):
        raise ValueError("adversarial and benign sets must be paired")
    if any(v is None for v in verdicts_adv + verdicts_benign):
        raise ValueError("verdict lists contain failed entries")

    adv_raw = np.array([v.detection.original_label for v in verdicts_adv])
    ben_raw = np.array([v.detection.original_label for v in verdicts_benign])
    adv_flag = np.array([v.detection.flagged for v in verdicts_adv])
    eligible = ben_raw != target_class
    success = eligible & (adv_raw == target_class)

    return MetricsReport(
        n_adv=len(verdicts_adv),
        n_benign=len(verdicts_benign),
        det_flagged_adv=int(adv_flag.sum()),
        det_flagged_benign=int(sum(v.detection.flagged for v in verdicts_benign)),
        final_flagged_adv=int(sum(v.is_adversarial for v in verdicts_adv)),
        final_flagged_benign=int(sum(v.is_adversarial for v in verdicts_benign)),
        adv_final_correct=int(sum(v.final_label == g
                                  for v, g in zip(verdicts_adv, gt_adv))),
        benign_raw_correct=int(np.sum(ben_raw == gt_benign)),
        attack_eligible=int(eligible.sum()),
        attack_success=int(success.sum()),
        det_flagged_adv_successful=int(np.sum(adv_flag & success)),
        adv_final_target=int(sum(v.final_label == target_class
                                 for v in verdicts_adv)),
    )


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------

@dataclass
class GridCell:
    patch_name: str
    patch_mode: str
    target_class: int
    p: float
    k: int
    report: MetricsReport


def _file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _assemble_verdict(outcome_k, mitigation, iid_hex: str) -> Verdict:
    if not outcome_k.flagged:
        return Verdict(outcome_k.original_label, False, "benign-by-detection",
                       outcome_k, None, iid_hex)
    stage = "mitigated" if mitigation.is_adversarial else "rectified"
    return Verdict(mitigation.final_label, mitigation.is_adversarial, stage,
                   outcome_k, mitigation, iid_hex)


def run_experiment(config: ExperimentConfig, out_dir: str) -> dict:
    """Sweep the (patch, p, k) grid and write metrics.csv, verdicts.jsonl,
    manifest.json and plots into out_dir. Deterministic byte-for-byte given
    fixed seeds."""
    missing = [p for p in ([config.model_path, config.data_path,
                            config.holdout_path] + list(config.patch_paths))
               if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(
            "missing artifacts (manifest diff): " + ", ".join(sorted(missing)))
    os.makedirs(out_dir, exist_ok=True)

    classifier = load_checkpoint(config.model_path)
    holdout = load_holdout(config.holdout_path)
    data = load_dataset(config.data_path)
    if len(data) < config.adv_set_size:
        raise ValueError(f"data has {len(data)} images, need {config.adv_set_size}")
    benign_images = data.images[: config.adv_set_size]
    ground_truth = data.labels[: config.adv_set_size]
    data_hash = _train_hash(benign_images)

    backend = InpaintBackend(config.backend_id)
    k_max = max(config.grid_k)
    det_config = replace(holdout.config, k=k_max)

    cells: list[GridCell] = []
    verdict_rows: list[dict] = []
    benign_outcomes = None
    benign_mitigations: dict = {}

    for patch_idx, patch_path in enumerate(config.patch_paths):
        patch = load_patch(patch_path)
        patch_name = os.path.basename(patch_path)
        mode = patch.metadata.get("mode", "standard")
        target = patch.spec.target_class
        if patch.metadata.get("train_set_hash") == data_hash:
            raise ValueError(
                f"evaluation images are the patch training set for {patch_name}")

        rng = derive_rng(config.placement_seed, patch_idx)
        side = classifier.input_side
        ph, pw = patch.dims
        placements = [sample_placement(rng, patch.eot_config(), side, ph, pw)
                      for _ in range(config.adv_set_size)]
        adv_images = apply_patch_batch(benign_images, patch, placements)

        adv_outcomes = [detect_stage(classifier, adv_images[i], holdout,
                                     det_config, config.master_seed)
                        for i in range(config.adv_set_size)]
        if benign_outcomes is None:
            benign_outcomes = [detect_stage(classifier, benign_images[i], holdout,
                                            det_config, config.master_seed)
                               for i in range(config.adv_set_size)]

        adv_mitigations: dict = {}
        for p in config.grid_p:
            for i, outcome in enumerate(adv_outcomes):
                if (i, p) not in adv_mitigations:
                    adv_mitigations[(i, p)] = mitigate_stage(
                        classifier, adv_images[i], outcome.suspicious_box,
                        MaskSpec(p), backend, config.master_seed)
            for i, outcome in enumerate(benign_outcomes):
                if (i, p) not in benign_mitigations:
                    benign_mitigations[(i, p)] = mitigate_stage(
                        classifier, benign_images[i], outcome.suspicious_box,
                        MaskSpec(p), backend, config.master_seed)
            for k in config.grid_k:
                verdicts_adv, verdicts_ben = [], []
                for i in range(config.adv_set_size):
                    out_k = restrict_outcome(adv_outcomes[i], k)
                    verdicts_adv.append(_assemble_verdict(
                        out_k, adv_mitigations[(i, p)], f"adv-{patch_idx}-{i}"))
                    out_k = restrict_outcome(benign_outcomes[i], k)
                    verdicts_ben.append(_assemble_verdict(
                        out_k, benign_mitigations[(i, p)], f"benign-{i}"))
                report = compute_metrics(verdicts_adv, ground_truth, target,
                                         verdicts_ben, ground_truth)
                cells.append(GridCell(patch_name, mode, target, p, k, report))
                for i, v in enumerate(verdicts_adv):
                    row = {"patch": patch_name, "p": p, "k": k, "set": "adv",
                           "index": i, "ground_truth": int(ground_truth[i])}
                    row.update(verdict_to_dict(v))
                    verdict_rows.append(row)
                for i, v in enumerate(verdicts_ben):
                    row = {"patch": patch_name, "p": p, "k": k, "set": "benign",
                           "index": i, "ground_truth": int(ground_truth[i])}
                    row.update(verdict_to_dict(v))
                    verdict_rows.append(row)

    artifacts = _write_outputs(config, out_dir, cells, verdict_rows)
    return {"reports": cells, "artifacts": artifacts}


def _write_outputs(config: ExperimentConfig, out_dir: str,
                   cells: list[GridCell], verdict_rows: list[dict]) -> dict:
    metrics_path = os.path.join(out_dir, "metrics.csv")
    fieldnames = (["patch", "mode", "target_class", "p", "k"]
                  + list(MetricsReport.COUNT_NAMES)
                  + list(MetricsReport.RATE_NAMES))
    with open(metrics_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for cell in cells:
            row = {"patch": cell.patch_name, "mode": cell.patch_mode,
                   "target_class": cell.target_class,
                   "p": f"{cell.p:g}", "k": cell.k}
            d = cell.report.to_dict()
            for name in MetricsReport.COUNT_NAMES:
                row[name] = d[name]
            for name in MetricsReport.RATE_NAMES:
                row[name] = f"{d[name]:.6f}"
            writer.writerow(row)

    verdicts_path = os.path.join(out_dir, "verdicts.jsonl")
    with open(verdicts_path, "w", encoding="utf-8") as f:
        for row in verdict_rows:
            f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")

    plot_paths, plot_notes = emit_plots(cells, out_dir)

    manifest_path = os.path.join(out_dir, "manifest.json")
    manifest = {
        "package_version": PACKAGE_VERSION,
        "config": config.to_dict(),
        "artifact_hashes": {os.path.basename(p): _file_sha256(p)
                            for p in ([config.model_path, config.data_path,
                                       config.holdout_path]
                                      + list(config.patch_paths))},
        "outputs": {"metrics": os.path.basename(metrics_path),
                    "verdicts": os.path.basename(verdicts_path),
                    "plots": [os.path.basename(p) for p in plot_paths]},
        "plot_notes": plot_notes,
    }
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)

    return {"metrics_csv": metrics_path, "verdicts_jsonl": verdicts_path,
            "manifest": manifest_path, "plots": plot_paths}


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def emit_plots(cells: list[GridCell], out_dir: str) -> tuple[list[str], list[str]]:
    """Line charts of each metric family vs p and vs k, plus defended-vs-raw
    attack-rate bars per patch mode. Empty families are omitted with a note."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not cells:
        raise ValueError("no reports to plot")
    os.makedirs(out_dir, exist_ok=True)
    paths: list[str] = []
    notes: list[str] = []
    patches = sorted({c.patch_name for c in cells})

    def save(fig, name):
        path = os.path.join(out_dir, name)
        fig.savefig(path, dpi=110, metadata={"Software": "patchbench"})
        plt.close(fig)
        paths.append(path)

    for metric in ("robust_accuracy", "mitigation_fpr", "mitigation_success_recall"):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        plotted = False
        for patch_name in patches:
            ks = sorted({c.k for c in cells if c.patch_name == patch_name})
            for k in ks:
                pts = sorted((c.p, getattr(c.report, metric)) for c in cells
                             if c.patch_name == patch_name and c.k == k)
                if len(pts) >= 1:
                    ax.plot(*zip(*pts), marker="o",
                            label=f"{patch_name} k={k}")
                    plotted = True
        if not plotted:
            notes.append(f"{metric}-vs-p omitted: no cells")
            plt.close(fig)
            continue
        ax.set_xlabel("masking percentage p")
        ax.set_ylabel(metric.replace("_", " "))
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=6)
        fig.tight_layout()
        save(fig, f"{metric}_vs_p.png")

    for metric in ("detection_success_recall", "detection_fpr"):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        plotted = False
        for patch_name in patches:
            ps = sorted({c.p for c in cells if c.patch_name == patch_name})
            if not ps:
                continue
            p_ref = ps[-1]
            pts = sorted((c.k, getattr(c.report, metric)) for c in cells
                         if c.patch_name == patch_name and c.p == p_ref)
            if pts:
                ax.plot(*zip(*pts), marker="s", label=patch_name)
                plotted = True
        if not plotted:
            notes.append(f"{metric}-vs-k omitted: no cells")
            plt.close(fig)
            continue
        ax.set_xlabel("hold-out images per input (k)")
        ax.set_ylabel(metric.replace("_", " "))
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=6)
        fig.tight_layout()
        save(fig, f"{metric}_vs_k.png")

    # undefended vs defended attack rate per patch, at the strongest cell
    fig, ax = plt.subplots(figsize=(5, 3.4))
    labels, raw_vals, def_vals = [], [], []
    for patch_name in patches:
        sub = [c for c in cells if c.patch_name == patch_name]
        p_ref = max(c.p for c in sub)
        ks = sorted(c.k for c in sub if c.p == p_ref)
        k_ref = 2 if 2 in ks else ks[0]
        cell = next(c for c in sub if c.p == p_ref and c.k == k_ref)
        labels.append(f"{cell.patch_mode}\n{patch_name}")
        raw_vals.append(cell.report.attack_success_rate)
        def_vals.append(cell.report.defended_asr)
    if labels:
        xs = np.arange(len(labels))
        ax.bar(xs - 0.18, raw_vals, width=0.36, label="undefended")
        ax.bar(xs + 0.18, def_vals, width=0.36, label="defended")
        ax.set_xticks(xs, labels, fontsize=6)
        ax.set_ylabel("attack success rate")
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
        fig.tight_layout()
        save(fig, "asr_defended_vs_undefended.png")
    else:
        notes.append("asr bar chart omitted: no cells")
        plt.close(fig)

    return paths, notes
