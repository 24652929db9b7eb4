"""Round metrics: CSV persistence, EMA smoothing, summaries, and rendered figures."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CSV_COLUMNS = (
    "round", "train_loss", "acc_raw", "acc_ema",
    "uplink_bytes", "bits_1", "bits_2", "bits_4", "wallclock_ms",
)


@dataclass
class RoundReport:
    round: int
    train_loss: float
    test_acc_raw: float
    test_acc_ema: float
    uplink_bytes: int
    bits_hist: dict[int, int]
    wallclock_ms: int = 0


def ema_update(prev: float | None, raw: float, smoothing: float) -> float:
    """EMA recurrence with ema(0) = raw(0)."""
    if prev is None:
        return raw
    return smoothing * prev + (1.0 - smoothing) * raw


def csv_header() -> str:
    return ",".join(CSV_COLUMNS) + "\n"


def csv_row(r: RoundReport) -> str:
    vals = (
        str(r.round),
        repr(r.train_loss),
        repr(r.test_acc_raw),
        repr(r.test_acc_ema),
        str(r.uplink_bytes),
        str(r.bits_hist.get(1, 0)),
        str(r.bits_hist.get(2, 0)),
        str(r.bits_hist.get(4, 0)),
        str(r.wallclock_ms),
    )
    return ",".join(vals) + "\n"


def partition_hash(shards: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for s in shards:
        h.update(np.asarray(s, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


def write_summary(path: str, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def render_metrics_figure(reports: list[RoundReport], path: str) -> None:
    """Loss / accuracy curves and cumulative uplink, rendered next to the CSV."""
    if not reports:
        return
    rounds = [r.round for r in reports]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    axes[0].plot(rounds, [r.train_loss for r in reports], color="tab:red")
    axes[0].set_xlabel("round")
    axes[0].set_ylabel("train loss")
    axes[1].plot(rounds, [r.test_acc_raw for r in reports], alpha=0.35, label="raw")
    axes[1].plot(rounds, [r.test_acc_ema for r in reports], label="EMA")
    axes[1].set_xlabel("round")
    axes[1].set_ylabel("test accuracy")
    axes[1].legend()
    axes[2].plot(rounds, np.cumsum([r.uplink_bytes for r in reports]) / 1024.0)
    axes[2].set_xlabel("round")
    axes[2].set_ylabel("cumulative uplink (KiB)")
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_levels_figure(levels, reference, path: str) -> None:
    """Level placement over the standard-normal density, optimized vs reference."""
    xs = np.linspace(-3.5, 3.5, 400)
    pdf = np.exp(-xs**2 / 2) / np.sqrt(2 * np.pi)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(xs, pdf, color="black", lw=1)
    for q in levels:
        ax.axvline(q, color="tab:blue", ls="--", lw=0.9)
    if reference is not None:
        for q in reference:
            ax.axvline(q, color="tab:orange", ls=":", lw=0.9)
        ax.plot([], [], color="tab:orange", ls=":", label="reference")
    ax.plot([], [], color="tab:blue", ls="--", label="optimized")
    ax.set_xlabel("normalized update value")
    ax.set_ylabel("N(0,1) density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_compare_figure(arms: dict[str, list[RoundReport]], path: str) -> None:
    """EMA accuracy per arm of the comparison grid."""
    fig, ax = plt.subplots(figsize=(7, 3.6))
    for name, reports in arms.items():
        ax.plot([r.round for r in reports], [r.test_acc_ema for r in reports], label=name)
    ax.set_xlabel("round")
    ax.set_ylabel("EMA test accuracy")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
