"""Render the benchmark CSV artifacts into the four figure styles.

Figures 1 to 3 show one episode's state estimation in the phase plane (true
trajectory, estimate trajectory, terminal uncertainty set); figure 4 shows
the closed-loop regulation envelopes across runs. Inputs are the trajectory,
summary, and terminal-set CSV files written by the benchmark CLI; rendering
never modifies them. Output is SVG with fixed style settings and a pinned
hash salt, so identical inputs produce identical bytes.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from scipy.stats import chi2

TRAJECTORY_COLUMNS = [
    "step", "x1", "x2", "z", "xhat1", "xhat2",
    "trace_P", "trace_M", "volume", "u", "cost",
]
SETS_COLUMNS = ["method", "episode", "kind", "center1", "center2", "s11", "s12", "s22"]

FIGURES = ("fig1_kf", "fig2_esm", "fig3_mix", "fig4_control")
FIGURE_METHODS = {
    "fig1_kf": ["kf"],
    "fig2_esm": ["esm"],
    "fig3_mix": ["mix"],
    "fig4_control": ["rckf", "rcesm", "rcmix"],
}

METHOD_COLORS = {
    "kf": "tab:green",
    "esm": "tab:blue",
    "mix": "tab:pink",
    "rckf": "tab:blue",
    "rcesm": "tab:green",
    "rcmix": "tab:red",
}


class FigureDataError(ValueError):
    """Input CSV problem; the message names the file and the missing piece."""


@dataclass
class FigureSpec:
    """One figure rendering request."""

    figure: str
    trajectories: Dict[str, List[str]]
    output: str
    sets_path: Optional[str] = None
    confidence: float = 0.95

    def __post_init__(self):
        if self.figure not in FIGURES:
            raise FigureDataError(f"unknown figure id {self.figure!r}")


def spec_for(figure: str, indir: str, output: str, confidence: float = 0.95) -> FigureSpec:
    """Discover the input files for a figure in a benchmark output directory."""
    if figure not in FIGURES:
        raise FigureDataError(f"unknown figure id {figure!r}")
    trajectories: Dict[str, List[str]] = {}
    for method in FIGURE_METHODS[figure]:
        prefix = f"traj_{method}_ep"
        paths = sorted(
            os.path.join(indir, name)
            for name in os.listdir(indir)
            if name.startswith(prefix) and name.endswith(".csv")
        )
        if not paths:
            raise FigureDataError(f"no trajectory files for method {method!r} in {indir}")
        trajectories[method] = paths
    sets_path = os.path.join(indir, "sets.csv")
    if not os.path.exists(sets_path):
        sets_path = None
    return FigureSpec(
        figure=figure,
        trajectories=trajectories,
        output=output,
        sets_path=sets_path,
        confidence=confidence,
    )


def read_csv_columns(path: str, required) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for column in required:
            if column not in header:
                raise FigureDataError(f"{path}: missing column {column!r}")
        rows = list(reader)
    if not rows:
        raise FigureDataError(f"{path}: no data rows")
    out = {}
    for column in required:
        try:
            out[column] = np.array([float(row[column]) for row in rows])
        except (TypeError, ValueError):
            out[column] = np.array([row[column] for row in rows])
    return out


def read_terminal_sets(path: str, method: str, episode: int):
    data = read_csv_columns(path, SETS_COLUMNS)
    sets = {}
    for i in range(len(data["method"])):
        if data["method"][i] == method and int(float(data["episode"][i])) == episode:
            mat = np.array(
                [
                    [data["s11"][i], data["s12"][i]],
                    [data["s12"][i], data["s22"][i]],
                ]
            )
            center = np.array([data["center1"][i], data["center2"][i]])
            sets[data["kind"][i]] = (center, mat)
    return sets


def ellipse_points(center, shape, num: int = 200) -> np.ndarray:
    """Boundary points of {x : (x - c)' shape^{-1} (x - c) = 1}.

    Built from the eigendecomposition, with axes equal to the square roots of
    the eigenvalues; used both for drawing and for verifying drawn ellipses.
    """
    center = np.asarray(center, dtype=float)
    shape = np.asarray(shape, dtype=float)
    evals, vecs = np.linalg.eigh(0.5 * (shape + shape.T))
    root = (vecs * np.sqrt(np.clip(evals, 0.0, None))) @ vecs.T
    angles = np.linspace(0.0, 2.0 * np.pi, num, endpoint=False)
    circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return center + circle @ root


def _style():
    plt.rcParams.update(
        {
            "svg.hashsalt": "lqcfigs",
            "figure.figsize": (6.0, 4.5),
            "figure.dpi": 100,
            "font.size": 9,
        }
    )


def _save(fig, output):
    fig.savefig(output, format="svg", metadata={"Date": None})
    plt.close(fig)


def _render_estimation(spec: FigureSpec) -> str:
    method = FIGURE_METHODS[spec.figure][0]
    path = spec.trajectories[method][0]
    data = read_csv_columns(path, TRAJECTORY_COLUMNS)
    episode = 0
    color = METHOD_COLORS[method]
    _style()
    fig, ax = plt.subplots()
    ax.plot(data["x1"], data["x2"], color="black", lw=1.0, label="true state")
    ax.plot(
        data["xhat1"], data["xhat2"], color=color, lw=1.0, ls="--",
        marker="^", markersize=2.5, markevery=10, label=f"{method} estimate",
    )
    if spec.sets_path is not None:
        sets = read_terminal_sets(spec.sets_path, method, episode)
        if "covariance" in sets:
            center, cov = sets["covariance"]
            scaled = chi2.ppf(spec.confidence, 2) * cov
            pts = ellipse_points(center, scaled)
            closed = np.vstack([pts, pts[:1]])
            line, = ax.plot(closed[:, 0], closed[:, 1], color="tab:green", lw=1.2)
            line.set_gid("covariance-ellipse")
            ax.fill(closed[:, 0], closed[:, 1], color="tab:green", alpha=0.2)
            line.set_label(f"{int(spec.confidence * 100)}% covariance set")
        if "shape" in sets:
            center, shape = sets["shape"]
            pts = ellipse_points(center, shape)
            closed = np.vstack([pts, pts[:1]])
            line, = ax.plot(closed[:, 0], closed[:, 1], color="tab:blue", lw=1.4)
            line.set_gid("shape-ellipse")
            line.set_label("bounded-error set")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.set_title(f"State estimation ({method})")
    ax.legend(loc="best")
    _save(fig, spec.output)
    return spec.output


def _render_control(spec: FigureSpec) -> str:
    _style()
    fig, axes = plt.subplots(2, 1, sharex=True, figsize=(6.0, 5.5))
    for method in FIGURE_METHODS[spec.figure]:
        stacks = []
        for path in spec.trajectories[method]:
            data = read_csv_columns(path, TRAJECTORY_COLUMNS)
            stacks.append(np.stack([data["x1"], data["x2"]], axis=1))
        lengths = {s.shape[0] for s in stacks}
        if len(lengths) != 1:
            raise FigureDataError(f"trajectory lengths differ for method {method!r}")
        stack = np.stack(stacks)
        steps = np.arange(stack.shape[1])
        color = METHOD_COLORS[method]
        for coord, ax in enumerate(axes):
            band = ax.fill_between(
                steps, stack[:, :, coord].min(axis=0), stack[:, :, coord].max(axis=0),
                color=color, alpha=0.25, linewidth=0.0,
            )
            band.set_gid(f"envelope-{method}-x{coord + 1}")
            ax.plot(steps, stack[:, :, coord].mean(axis=0), color=color, lw=1.0, label=method)
    axes[0].set_ylabel("x1")
    axes[1].set_ylabel("x2")
    axes[1].set_xlabel("step")
    axes[0].set_title("Closed-loop state regulation envelopes")
    axes[0].legend(loc="best")
    _save(fig, spec.output)
    return spec.output


def render(spec: FigureSpec) -> str:
    """Render one figure; returns the output path. Inputs are read only."""
    if spec.figure == "fig4_control":
        return _render_control(spec)
    return _render_estimation(spec)
