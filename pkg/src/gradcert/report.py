"""Tidy CSV outputs, experiment bundles, and rendered report figures.

Every subcommand records an ExperimentBundle (config snapshot, content hashes
of inputs, output paths, seed and wall-clock metadata) next to its outputs;
re-running a bundle with identical inputs reproduces identical CSVs up to the
timing fields.  The report path aggregates sweep and training CSVs into a
margin-curve table plus a text summary, and renders matplotlib figures to
files alongside the delimited output.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

_CSV_COMMENT = "#"


def canonical_hash(payload) -> str:
    """Stable content hash of a JSON-serializable config snapshot."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


@dataclass
class ExperimentBundle:
    """Reproducibility record written beside each subcommand's outputs."""

    command: str
    config: dict
    input_hashes: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    seed: int | None = None
    started_at: float = field(default_factory=time.time)
    wall_clock_s: float = 0.0

    @property
    def config_hash(self) -> str:
        return canonical_hash({"command": self.command, "config": self.config,
                               "inputs": self.input_hashes})

    def add_input(self, path) -> None:
        self.input_hashes[str(path)] = file_hash(path)

    def finish(self, workdir) -> Path:
        self.wall_clock_s = time.time() - self.started_at
        path = Path(workdir) / f"bundle_{self.command}.json"
        payload = {
            "command": self.command,
            "config": self.config,
            "config_hash": self.config_hash,
            "input_hashes": self.input_hashes,
            "outputs": [str(p) for p in self.outputs],
            "seed": self.seed,
            "wall_clock_s": self.wall_clock_s,
        }
        path.write_text(json.dumps(payload, indent=1, default=str))
        return path


def load_bundle(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, header, rows, config_hash: str | None = None) -> None:
    """Plain CSV with an optional leading config-hash comment line."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"{_CSV_COMMENT} config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path):
    """(header, rows-as-strings), skipping comment lines."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith(_CSV_COMMENT)]
    rows = list(csv.reader(lines))
    if not rows:
        raise ValidationError(f"empty csv {path}")
    return rows[0], rows[1:]


def write_margin_csv(path, curve, config_hash=None) -> None:
    rows = [(curve.constraint_mode, f"{r['l']:.6g}", int(r["feasible"]),
             "" if r["gamma"] is None else f"{r['gamma']:.6g}", f"{r['solve_ms']:.1f}")
            for r in curve.rows()]
    write_csv(path, ["mode", "l", "feasible", "gamma", "solve_ms"], rows, config_hash)


def write_trajectory_csv(path, traj, config_hash=None) -> None:
    n_s = traj.x.shape[1]
    n_a = traj.u.shape[1]
    header = (["t"] + [f"x{i}" for i in range(n_s)] + [f"u{i}" for i in range(n_a)]
              + [f"e{i}" for i in range(n_a)] + (["r"] if traj.r is not None else []))
    rows = []
    for k in range(len(traj)):
        row = [f"{traj.times[k]:.6g}"]
        row += [f"{v:.8g}" for v in traj.x[k]]
        row += [f"{v:.8g}" for v in traj.u[k]]
        row += [f"{v:.8g}" for v in traj.e[k]]
        if traj.r is not None:
            row.append(f"{traj.r[k]:.8g}")
        rows.append(row)
    write_csv(path, header, rows, config_hash)


def write_history_csv(path, history, config_hash=None) -> None:
    header = ["iter", "mean_reward", "lipschitz", "kl", "w2", "surrogate",
              "l_explore", "l_smooth", "std", "diverged", "accepted"]
    rows = [[row["iter"], f"{row['mean_reward']:.8g}", f"{row['lipschitz']:.8g}",
             f"{row['kl']:.3e}", f"{row['w2']:.3e}", f"{row['surrogate']:.6g}",
             f"{row['l_explore']:.6g}", f"{row['l_smooth']:.6g}",
             f"{row['std']:.4g}", int(row["diverged"]), int(row["accepted"])]
            for row in history]
    write_csv(path, header, rows, config_hash)


# ---------------------------------------------------------------------------
# report aggregation + figures
# ---------------------------------------------------------------------------

def _mpl():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def collect_margin_rows(paths) -> list[dict]:
    rows = []
    for path in paths:
        header, data = read_csv(path)
        if header[:4] != ["mode", "l", "feasible", "gamma"]:
            raise ValidationError(f"{path} is not a sweep csv")
        for rec in data:
            rows.append({"mode": rec[0], "l": float(rec[1]),
                         "feasible": bool(int(rec[2])),
                         "gamma": float(rec[3]) if rec[3] else None})
    if not rows:
        raise ValidationError("no sweep rows found")
    return rows


def margin_summary(rows) -> dict:
    """Max certified level per mode plus the cross-mode ordering."""
    per_mode: dict[str, float] = {}
    for row in rows:
        if row["feasible"]:
            per_mode[row["mode"]] = max(per_mode.get(row["mode"], 0.0), row["l"])
        else:
            per_mode.setdefault(row["mode"], 0.0)
    order = ["l2_only", "sparsity", "nonhomogeneous"]
    present = [m for m in order if m in per_mode]
    strictly_increasing = all(per_mode[a] < per_mode[b]
                              for a, b in zip(present, present[1:]))
    return {"max_certified": per_mode, "mode_order": present,
            "strictly_increasing": strictly_increasing}


def render_margin_figure(rows, path) -> None:
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    styles = {"l2_only": "o-", "sparsity": "s-", "nonhomogeneous": "^-"}
    for mode in sorted({r["mode"] for r in rows}):
        pts = sorted((r["l"], r["feasible"]) for r in rows if r["mode"] == mode)
        ls = [p[0] for p in pts]
        ok = [1 if p[1] else 0 for p in pts]
        ax.step(ls, ok, styles.get(mode, "-"), where="post", label=mode, alpha=0.8)
    ax.set_xlabel("gradient-bound level l")
    ax.set_ylabel("certified (1) / not (0)")
    ax.set_yticks([0, 1])
    ax.legend(frameon=False, fontsize=8)
    ax.set_title("stability-certified levels by constraint mode")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_training_figure(history_rows, path) -> None:
    plt = _mpl()
    its = [int(r[0]) for r in history_rows]
    reward = [float(r[1]) for r in history_rows]
    lip = [float(r[2]) for r in history_rows]
    fig, axes = plt.subplots(1, 2, figsize=(8.4, 3.2))
    axes[0].plot(its, reward, lw=1.0)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("mean episode reward")
    axes[1].plot(its, lip, lw=1.0, color="tab:red")
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("Lipschitz upper bound")
    axes[1].set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def build_report(workdir, figures: bool = True) -> dict:
    """Aggregate sweeps (and training runs) in a workdir into the report set.

    Writes margin_curves.csv, summary.json, summary.txt and, when figures is
    set, margin_curves.png plus one learning_curve_*.png per training CSV.
    Raises ValidationError when the workdir holds no completed sweeps.
    """
    workdir = Path(workdir)
    sweep_paths = sorted(workdir.glob("sweep_*.csv"))
    if not sweep_paths:
        raise ValidationError(f"no sweep outputs under {workdir}")
    rows = collect_margin_rows(sweep_paths)
    summary = margin_summary(rows)
    out_csv = workdir / "margin_curves.csv"
    write_csv(out_csv, ["mode", "l", "feasible", "gamma"],
              [(r["mode"], f"{r['l']:.6g}", int(r["feasible"]),
                "" if r["gamma"] is None else f"{r['gamma']:.6g}") for r in rows],
              config_hash=canonical_hash([str(p) for p in sweep_paths]))
    (workdir / "summary.json").write_text(json.dumps(summary, indent=1))
    lines = ["max certified level per mode:"]
    for mode, val in sorted(summary["max_certified"].items()):
        lines.append(f"  {mode:16s} {val:.3f}")
    lines.append(f"strict ordering across modes: {summary['strictly_increasing']}")
    (workdir / "summary.txt").write_text("\n".join(lines) + "\n")
    outputs = [out_csv, workdir / "summary.json", workdir / "summary.txt"]
    if figures:
        fig_path = workdir / "margin_curves.png"
        render_margin_figure(rows, fig_path)
        outputs.append(fig_path)
        for train_csv in sorted(workdir.glob("train_*.csv")):
            _, data = read_csv(train_csv)
            fig_path = workdir / f"learning_curve_{train_csv.stem[6:]}.png"
            render_training_figure(data, fig_path)
            outputs.append(fig_path)
    summary["outputs"] = [str(p) for p in outputs]
    return summary
