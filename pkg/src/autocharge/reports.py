"""Delimited report writers and the figures rendered alongside them.

CSV output follows RFC 4180 (CRLF rows, quoting where needed); JSON is
written with sorted keys so reruns are byte-identical.  Figures are
auxiliary artifacts saved next to the delimited outputs; they are not
part of the determinism contract.
"""
from __future__ import annotations

import csv
import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402


def write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fieldnames})


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating, np.integer)):
        return repr(value.item())
    return value


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _save(fig, path):
    fig.savefig(path, dpi=110)
    plt.close(fig)


def reward_curve_figure(steps, moving_avg, path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(steps, moving_avg, lw=1.2)
    ax.set_xlabel("environment interactions")
    ax.set_ylabel("moving-average reward")
    ax.set_title("Insertion training reward")
    ax.grid(alpha=0.3)
    _save(fig, path)


def pixel_error_figure(times, errors, threshold, path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(times, errors, lw=1.2)
    ax.axhline(threshold, color="tab:red", ls="--", lw=0.8, label="threshold")
    ax.set_xlabel("simulated time [s]")
    ax.set_ylabel("mean pixel error [px]")
    ax.set_yscale("log")
    ax.set_title("Visual servo convergence")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def bench_figure(rows, path) -> None:
    methods = [r["method"] for r in rows]
    rates = [r["success_rate"] for r in rows]
    steps = [r["mean_steps"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.6))
    ax1.bar(methods, rates, color="tab:blue")
    ax1.set_ylabel("success rate")
    ax1.set_ylim(0, 1.05)
    ax2.bar(methods, steps, color="tab:orange")
    ax2.set_ylabel("mean steps")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3, axis="y")
    fig.suptitle("Peg-in-hole benchmark")
    fig.tight_layout()
    _save(fig, path)


def cover_experiment_figure(rows, path) -> None:
    angles = [r["angle_deg"] for r in rows]
    xe_mm = [1000.0 * r["xe_m"] if r.get("xe_m") is not None else 0.0 for r in rows]
    colors = ["tab:green" if r["outcome"] == "ok" else "tab:red" for r in rows]
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.bar([str(a) for a in angles], xe_mm, color=colors)
    ax.set_xlabel("cover angle [deg]")
    ax.set_ylabel("recovered x_e [mm]")
    ax.set_title("Cover-angle experiment (red = perception failed)")
    ax.grid(alpha=0.3, axis="y")
    _save(fig, path)


def perceive_figure(artifacts, estimate, path) -> None:
    """Top-down scatter of the segmentation with the estimated centre."""
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 4.0))
    cropped = artifacts.get("cloud_cropped")
    if cropped is not None:
        axes[0].scatter(cropped.points[:, 0], cropped.points[:, 1], s=1,
                        c=cropped.points[:, 2], cmap="viridis")
        axes[0].set_title("cropped cloud (camera frame)")
    for key, color in (("cluster_0", "tab:green"), ("cluster_1", "tab:red")):
        cl = artifacts.get(key)
        if cl is not None and len(cl):
            axes[1].scatter(cl.points[:, 0], cl.points[:, 1], s=1, c=color,
                            label=key)
    if estimate is not None:
        c = estimate.center
        n = estimate.normal
        axes[1].plot([c[0]], [c[1]], marker="x", ms=10, c="k")
        axes[1].arrow(c[0], c[1], 0.03 * n[0], 0.03 * n[1], width=0.0005, color="k")
    axes[1].set_title("normal clusters + cover estimate")
    if axes[1].get_legend_handles_labels()[0]:
        axes[1].legend(loc="upper right", fontsize=7)
    for ax in axes:
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
    fig.tight_layout()
    _save(fig, path)
