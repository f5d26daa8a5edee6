"""Render result tables to standalone SVG with matplotlib.

Output is deterministic: the SVG hash salt is fixed and the date stamp is
dropped, so identical tables give identical files.  Each drawn series sits in
an SVG group whose id is ``series-<n>``; the star marker is ``star``.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import read_csv  # noqa: E402

COLORMAP = "viridis"

_RC = {
    "svg.hashsalt": "pplxlab",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.figsize": (5.0, 3.4),
}


class SchemaError(ValueError):
    pass


def _column(rows, name: str) -> np.ndarray:
    vals = []
    for r in rows:
        v = r[name]
        vals.append(1.0 if v == "true" else 0.0 if v == "false" else float(v))
    return np.asarray(vals)


def emit_plot(table, out, kind: str = "line", x: str | None = None, y: Sequence[str] | str | None = None,
              color: str | None = None, group: str | None = None, star: int | str | None = None,
              title: str | None = None, logx: bool = False, logy: bool = False) -> Path:
    """Plot columns of a CSV table into an SVG file.

    ``x`` defaults to the first column and ``y`` to every other column.
    ``color`` colours scatter points by a column (viridis).  ``group`` splits
    rows into one series per distinct value.  ``star`` marks one row: an
    index, or ``"max:<col>"`` / ``"min:<col>"`` for the row extremising a column.
    """
    if kind not in ("line", "scatter"):
        raise ValueError(f"unknown plot kind {kind!r}")
    header, rows = read_csv(table)
    if not rows:
        raise SchemaError(f"{table}: table has no rows")
    x = x or header[0]
    ys = [y] if isinstance(y, str) else list(y) if y else [c for c in header if c not in (x, color, group)]
    needed = [x, *ys] + [c for c in (color, group) if c]
    if isinstance(star, str):
        needed.append(star.split(":", 1)[1])
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"{table}: missing column(s) {', '.join(missing)}")
    if not ys:
        raise SchemaError(f"{table}: nothing to plot against {x}")

    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        groups = [(None, rows)]
        if group:
            keys = list(dict.fromkeys(r[group] for r in rows))
            groups = [(k, [r for r in rows if r[group] == k]) for k in keys]
        xs_all = _column(rows, x)
        cvals = _column(rows, color) if color else None
        norm = plt.Normalize(cvals.min(), cvals.max()) if cvals is not None else None
        n = 0
        for key, sub in groups:
            xs = _column(sub, x)
            for col in ys:
                label = col if key is None else f"{col} ({group}={key})"
                if kind == "line":
                    order = np.argsort(xs, kind="stable")
                    (art,) = ax.plot(xs[order], _column(sub, col)[order], marker="o", ms=2.5, lw=1.2, label=label)
                else:
                    kw = {"c": _column(sub, color), "cmap": COLORMAP, "norm": norm} if color else {}
                    art = ax.scatter(xs, _column(sub, col), s=18, label=label, edgecolors="none", **kw)
                art.set_gid(f"series-{n}")
                n += 1
        if star is not None:
            idx = star if isinstance(star, int) else _pick(rows, star)
            sy = _column(rows, ys[0])[idx]
            kw = {"c": [cvals[idx]], "cmap": COLORMAP, "norm": norm} if color else {"c": "crimson"}
            art = ax.scatter([xs_all[idx]], [sy], marker="*", s=220, edgecolors="black",
                             linewidths=0.6, zorder=5, label="best", **kw)
            art.set_gid("star")
        if color:
            fig.colorbar(plt.cm.ScalarMappable(norm=norm, cmap=COLORMAP), ax=ax, label=color)
        if logx:
            ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(x)
        ax.set_ylabel(ys[0] if len(ys) == 1 else "value")
        if title:
            ax.set_title(title)
        ax.legend(fontsize=7, loc="best")
        fig.tight_layout()
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out


def _pick(rows, spec: str) -> int:
    how, col = spec.split(":", 1)
    vals = _column(rows, col)
    if how == "max":
        return int(np.argmax(vals))
    if how == "min":
        return int(np.argmin(vals))
    raise ValueError(f"bad star spec {spec!r}")
