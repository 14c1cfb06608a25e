"""Report emission: overlap/solo-interval histograms for generated evaluation
sets and attention-weight strips for individual mixtures.

The CSV files are the authoritative artifacts; the SVG figures are rendered
from the CSV contents only. SVGs are written without timestamps and with a
fixed hash salt so repeated runs are byte-identical.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "gse"

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .audio import load_wav, logmel, read_activity  # noqa: E402
from .errors import DataError  # noqa: E402
from .mixture import read_manifest, overlap_ratio, single_speaker_duration  # noqa: E402
from .model import ModelParams, attention_profile, mode_for  # noqa: E402

SVG_META = {"Date": None}


def histogram(values, lo: float, hi: float, n_bins: int):
    """Fixed-range histogram; the final bin is closed so hi lands inside."""
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64),
                                 bins=n_bins, range=(lo, hi))
    return edges, counts


def write_hist_csv(path, edges, counts, value_name: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            writer.writerow([f"{lo:.4f}", f"{hi:.4f}", int(c)])


def read_hist_csv(path):
    path = Path(path)
    rows = list(csv.reader(path.open()))
    if not rows or rows[0] != ["bin_low", "bin_high", "count"]:
        raise DataError(f"{path}: not a histogram CSV")
    lows = [float(r[0]) for r in rows[1:]]
    highs = [float(r[1]) for r in rows[1:]]
    counts = [int(r[2]) for r in rows[1:]]
    return np.asarray(lows + [highs[-1]]), np.asarray(counts)


def plot_hist_svg(csv_path, svg_path, xlabel: str, title: str) -> None:
    edges, counts = read_hist_csv(csv_path)
    fig, ax = plt.subplots(figsize=(4.2, 2.8))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge",
           color="#37ABC6", edgecolor="white", linewidth=0.4)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("mixtures")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(svg_path, metadata=SVG_META)
    plt.close(fig)


def mixture_statistics(manifest_path, root=None) -> list:
    """(mixture_id, overlap_ratio_pct, solo_duration_s) per manifest entry."""
    manifest_path = Path(manifest_path)
    root = Path(root) if root else manifest_path.parent
    rows = []
    for entry in read_manifest(manifest_path):
        acts = read_activity(root / entry.activity_path)
        idx = acts.index_of(entry.target_speaker)
        rows.append((entry.mixture_id, overlap_ratio(acts, idx),
                     single_speaker_duration(acts, idx)))
    if not rows:
        raise DataError(f"{manifest_path}: empty manifest")
    return rows


def overlap_report(manifest_path, out_dir, root=None) -> dict:
    """Overlap-ratio and solo-duration histograms (CSV + SVG)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = mixture_statistics(manifest_path, root)
    ratios = [r for _, r, _ in stats]
    solos = [s for _, _, s in stats]
    edges_r, counts_r = histogram(ratios, 0.0, 100.0, 20)
    write_hist_csv(out_dir / "overlap_ratio_hist.csv", edges_r, counts_r, "overlap")
    plot_hist_svg(out_dir / "overlap_ratio_hist.csv",
                  out_dir / "overlap_ratio_hist.svg",
                  "target overlap ratio (%)", "Overlap ratio of the target speaker")
    hi = max(10.0, float(np.ceil(max(solos))))
    edges_s, counts_s = histogram(solos, 0.0, hi, 20)
    write_hist_csv(out_dir / "solo_duration_hist.csv", edges_s, counts_s, "solo_s")
    plot_hist_svg(out_dir / "solo_duration_hist.csv",
                  out_dir / "solo_duration_hist.svg",
                  "single-speaker duration (s)", "Target single-speaker intervals")
    return {
        "mixtures": len(stats),
        "mean_overlap": float(np.mean(ratios)),
        "full_overlap": int(sum(1 for r in ratios if r == 100.0)),
        "mean_solo_s": float(np.mean(solos)),
    }


def write_attention_csv(path, profile: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "time_s", "attention", "target_active",
                         "nontarget_active"])
        for f, (a, zt, znt) in enumerate(zip(profile["attention"],
                                             profile["target"],
                                             profile["nontarget"])):
            writer.writerow([f, f"{f * 0.010:.2f}", f"{a:.8f}", int(zt), int(znt)])


def plot_attention_svg(csv_path, svg_path, title: str) -> None:
    rows = list(csv.reader(Path(csv_path).open()))[1:]
    t = np.asarray([float(r[1]) for r in rows])
    att = np.asarray([float(r[2]) for r in rows])
    zt = np.asarray([int(r[3]) for r in rows])
    znt = np.asarray([int(r[4]) for r in rows])
    fig, (ax0, ax1) = plt.subplots(
        2, 1, figsize=(5.4, 2.6), sharex=True,
        gridspec_kw={"height_ratios": [3, 1]})
    ax0.imshow(att[None, :], aspect="auto", cmap="viridis",
               extent=(t[0], t[-1] if t.size > 1 else t[0] + 0.01, 0, 1))
    ax0.set_yticks([])
    ax0.set_title(title, fontsize=10)
    ax1.fill_between(t, 0, zt, step="post", color="#E4002B", alpha=0.85,
                     label="target")
    ax1.fill_between(t, 0, -znt.astype(float), step="post", color="#888888",
                     alpha=0.85, label="non-target")
    ax1.set_ylim(-1.2, 1.2)
    ax1.set_yticks([])
    ax1.set_xlabel("time (s)")
    ax1.legend(loc="upper right", fontsize=6, ncol=2, frameon=False)
    fig.tight_layout()
    fig.savefig(svg_path, metadata=SVG_META)
    plt.close(fig)


def attention_report(params: ModelParams, wav_path, act_path, target_speaker,
                     out_dir, stem: str, policy: str = "P1") -> dict:
    """Attention strip (CSV + SVG) for one mixture and target."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clip = load_wav(wav_path)
    acts = read_activity(act_path)
    idx = acts.index_of(target_speaker)
    profile = attention_profile(params, logmel(clip), acts, idx, mode_for(policy))
    csv_path = out_dir / f"{stem}_attention.csv"
    write_attention_csv(csv_path, profile)
    plot_attention_svg(csv_path, out_dir / f"{stem}_attention.svg",
                       f"attention weights ({stem})")
    return {"frames": int(profile["attention"].size), "csv": str(csv_path)}
