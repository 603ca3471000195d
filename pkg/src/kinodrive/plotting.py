"""Training-curve figures: a dependency-free SVG writer and a matplotlib PNG renderer."""

import math
import os
import warnings

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 70, "right": 170, "top": 20, "bottom": 50}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def read_log(path):
    """Parse a training CSV (``#`` lines are metadata) into ``{column: array}``."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        return {}
    cols = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:]]
    if not rows:
        return {}
    data = np.array(rows, dtype=float)
    return {c: data[:, i] for i, c in enumerate(cols)}


def y_column(log):
    for c in ("mean_cost", "mean_return"):
        if c in log:
            return c
    raise ValueError("log has neither mean_cost nor mean_return")


def nice_ticks(lo, hi, n=5):
    """Round-number ticks covering [lo, hi]."""
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.floor(lo / step) * step
    last = math.ceil(hi / step) * step
    count = int(round((last - first) / step))
    return [first + i * step for i in range(count + 1)]


def decade_ticks(lo, hi):
    """Powers of ten spanning [lo, hi] (both > 0)."""
    a, b = math.floor(math.log10(lo) + 1e-12), math.ceil(math.log10(hi) - 1e-12)
    if b <= a:
        b = a + 1
    return [10.0 ** k for k in range(a, b + 1)]


def _fmt_tick(v, log_x=False):
    if log_x:
        return f"1e{int(round(math.log10(v)))}"
    if v == int(v) and abs(v) < 1e6:
        return str(int(v))
    return f"{v:.3g}"


def _load_series(csv_paths, log_x):
    series = []
    for path in csv_paths:
        log = read_log(path)
        if not log or "env_steps" not in log:
            warnings.warn(f"skipping empty log {path}")
            continue
        x, y = log["env_steps"], log[y_column(log)]
        keep = np.isfinite(x) & np.isfinite(y)
        if log_x:
            keep &= x > 0
        if not keep.any():
            warnings.warn(f"skipping log without plottable points {path}")
            continue
        label = os.path.splitext(os.path.basename(path))[0]
        series.append((label, x[keep], y[keep], y_column(log)))
    return series


def plot_compare(csv_paths, out_svg, log_x=False):
    """One polyline per training log; x is env_steps, y the cost or return column."""
    if not csv_paths:
        raise ValueError("need at least one CSV")
    series = _load_series(csv_paths, log_x)
    if not series:
        raise ValueError("no plottable data in any CSV")
    xs = np.concatenate([s[1] for s in series])
    ys = np.concatenate([s[2] for s in series])
    if log_x:
        xticks = decade_ticks(xs.min(), xs.max())
        tx = [math.log10(v) for v in xticks]
        fx = np.log10
    else:
        xticks = nice_ticks(xs.min(), xs.max())
        tx = xticks
        fx = np.asarray
    yticks = nice_ticks(ys.min(), ys.max())
    x0, x1 = tx[0], tx[-1]
    y0, y1 = yticks[0], yticks[-1]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(v):
        return MARGIN["left"] + (v - x0) / (x1 - x0) * pw

    def py(v):
        return MARGIN["top"] + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
           f'fill="none" stroke="black"/>']
    for v, t in zip(xticks, tx):
        X = px(t)
        out.append(f'<line x1="{X:.2f}" y1="{MARGIN["top"] + ph}" x2="{X:.2f}" y2="{MARGIN["top"] + ph + 5}" '
                   f'stroke="black"/>')
        out.append(f'<text class="xtick" x="{X:.2f}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle">'
                   f'{_fmt_tick(v, log_x)}</text>')
    for v in yticks:
        Y = py(v)
        out.append(f'<line x1="{MARGIN["left"] - 5}" y1="{Y:.2f}" x2="{MARGIN["left"]}" y2="{Y:.2f}" '
                   f'stroke="black"/>')
        out.append(f'<text class="ytick" x="{MARGIN["left"] - 8}" y="{Y + 4:.2f}" text-anchor="end">'
                   f'{_fmt_tick(v)}</text>')
    xlabel = "env steps (log)" if log_x else "env steps"
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle">{xlabel}</text>')
    ylabel = series[0][3].replace("_", " ")
    out.append(f'<text x="15" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {MARGIN["top"] + ph / 2:.1f})">{ylabel}</text>')
    for i, (label, x, y, _) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(fx(x), y))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = MARGIN["top"] + 14 + 16 * i
        lx = WIDTH - MARGIN["right"] + 10
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}">{_escape(label)}</text>')
    out.append("</svg>")
    with open(out_svg, "w") as fh:
        fh.write("\n".join(out) + "\n")
    return out_svg


def _escape(s):
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def plot_png(csv_paths, out_png, log_x=False, title=None):
    """Same comparison rendered with matplotlib."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = _load_series(csv_paths, log_x)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, x, y, _ in series:
        ax.plot(x, y, marker=".", label=label)
    if log_x:
        ax.set_xscale("log")
    ax.set_xlabel("env steps")
    if series:
        ax.set_ylabel(series[0][3].replace("_", " "))
        ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return out_png
