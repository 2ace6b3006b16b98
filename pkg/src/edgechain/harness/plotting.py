"""Static PNG plots for benchmark reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import AUTH_STAGES, CHANNEL_MODES, BenchReport  # noqa: E402


def _human(nbytes: int) -> str:
    for unit, scale in (("MiB", 1 << 20), ("KiB", 1 << 10)):
        if nbytes >= scale and nbytes % scale == 0:
            return f"{nbytes // scale} {unit}"
    return f"{nbytes} B"


def plot_auth(report: BenchReport, path: Path) -> Path | None:
    """Mean time per authentication stage, with p95 whiskers, one bar group per link."""
    rows = [s for s in report.summaries() if s.family == "auth"]
    if not rows:
        return None
    links = sorted({s.link for s in rows})
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(links)
    for i, link in enumerate(links):
        by_stage = {s.label: s for s in rows if s.link == link}
        stages = [st for st in AUTH_STAGES if st in by_stage]
        means = [by_stage[st].mean_s * 1e3 for st in stages]
        err = [(by_stage[st].p95_s - by_stage[st].mean_s) * 1e3 for st in stages]
        xs = [j + i * width for j in range(len(stages))]
        bars = ax.bar(xs, means, width, yerr=[[0] * len(err), err], capsize=3,
                      label=f"{link} (n={min(by_stage[st].runs for st in stages)})")
        ax.bar_label(bars, fmt="%.3f", fontsize=7)
    ax.set_xticks([j + width * (len(links) - 1) / 2 for j in range(len(AUTH_STAGES))],
                  AUTH_STAGES)
    ax.set_ylabel("mean time (ms), whisker = p95")
    ax.set_title("Index authentication stages")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_channel(report: BenchReport, path: Path) -> Path | None:
    """Per-run transfer time for each mode and payload size, plus mean throughput."""
    samples = [s for s in report.samples if s.family == "channel"]
    if not samples:
        return None
    sizes = sorted({s.payload_bytes for s in samples})
    modes = [m for m in CHANNEL_MODES if any(s.label == m for s in samples)]
    fig, axes = plt.subplots(2, len(sizes), figsize=(4.5 * len(sizes), 7), squeeze=False)
    for col, size in enumerate(sizes):
        ax = axes[0][col]
        for i, mode in enumerate(modes):
            runs = sorted((s.run, s.seconds * 1e3) for s in samples
                          if s.label == mode and s.payload_bytes == size)
            if runs:
                ax.plot([r for r, _ in runs], [t for _, t in runs], marker=".", lw=1, label=mode,
                        color=f"C{i}")
        ax.set_title(f"payload {_human(size)}")
        ax.set_xlabel("run")
        ax.set_ylabel("transfer time (ms)")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        tput = axes[1][col]
        summ = {s.label: s for s in report.summaries()
                if s.family == "channel" and s.payload_bytes == size}
        vals = [summ[m].throughput_Bps / 1e6 if m in summ else 0.0 for m in modes]
        bars = tput.bar(modes, vals, color=[f"C{i}" for i in range(len(modes))])
        tput.bar_label(bars, fmt="%.2f", fontsize=7)
        tput.set_ylabel("mean throughput (MB/s)")
        tput.tick_params(axis="x", labelrotation=20, labelsize=7)
    fig.suptitle("Channel transfer by encryption mode")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_report(csv_path: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render every family present in a sample CSV; returns the PNG paths written."""
    csv_path = Path(csv_path)
    out = Path(out_dir) if out_dir else csv_path.parent
    out.mkdir(parents=True, exist_ok=True)
    report = BenchReport.read_csv(csv_path)
    written = [plot_auth(report, out / f"{csv_path.stem}_auth.png"),
               plot_channel(report, out / f"{csv_path.stem}_channel.png")]
    return [p for p in written if p is not None]
