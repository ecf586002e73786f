"""Dependency-free SVG line charts for training curves."""

from __future__ import annotations

from html import escape
from typing import Sequence

COLORS = {"train_acc": "#1f77b4", "val_acc": "#ff7f0e", "train_loss": "#2ca02c",
          "val_loss": "#d62728"}


def _panel(x0: float, title: str, series: dict[str, Sequence[float]], width: float = 360,
           height: float = 240, pad: float = 40) -> list[str]:
    values = [v for ys in series.values() for v in ys]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    n = max((len(ys) for ys in series.values()), default=1)

    def px(i: int) -> float:
        return x0 + pad + (width - 2 * pad) * (i / (n - 1) if n > 1 else 0.5)

    def py(v: float) -> float:
        return pad + (height - 2 * pad) * (1 - (v - lo) / (hi - lo))

    out = [f'<g class="panel"><text x="{x0 + width / 2:.1f}" y="20" text-anchor="middle">'
           f"{escape(title)}</text>",
           f'<rect x="{x0 + pad:.1f}" y="{pad:.1f}" width="{width - 2 * pad:.1f}" '
           f'height="{height - 2 * pad:.1f}" fill="none" stroke="#999"/>',
           f'<text x="{x0 + 4:.1f}" y="{pad + 4:.1f}" font-size="10">{hi:.3g}</text>',
           f'<text x="{x0 + 4:.1f}" y="{height - pad:.1f}" font-size="10">{lo:.3g}</text>']
    for k, (name, ys) in enumerate(series.items()):
        pts = " ".join(f"{px(i):.2f},{py(v):.2f}" for i, v in enumerate(ys))
        color = COLORS.get(name, "#000")
        out.append(f'<polyline data-series="{name}" fill="none" stroke="{color}" '
                   f'stroke-width="2" points="{pts}"><title>{name}</title></polyline>')
        out.append(f'<text x="{x0 + pad + 8:.1f}" y="{height - 8 - 14 * k:.1f}" font-size="11" '
                   f'fill="{color}">{name}</text>')
    out.append("</g>")
    return out


def curves_svg(history, title: str = "") -> str:
    """Accuracy and loss per epoch as a two-panel SVG document."""
    acc = {"train_acc": history.column("train_acc"), "val_acc": history.column("val_acc")}
    loss = {"train_loss": history.column("train_loss"), "val_loss": history.column("val_loss")}
    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="760" height="260" '
             'font-family="sans-serif">']
    if title:
        parts.append(f"<title>{escape(title)}</title>")
    parts += _panel(0, "accuracy", acc)
    parts += _panel(380, "loss", loss)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
