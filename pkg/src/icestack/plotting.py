"""Per-record depth-profile figure: ground-truth layer boundaries against predicted ones."""

from __future__ import annotations

import csv
import io
from xml.sax.saxutils import escape

import numpy as np

PLOT_SCHEMA = "icestack-plot/v1"
TRUTH_COLOR = "#2ca02c"
PRED_COLOR = "#d62728"


def layer_boundaries(thickness: np.ndarray) -> np.ndarray:
    """Depth of each layer's lower boundary below the surface: running sum over layers.

    thickness: (n_layers, n_nodes) -> (n_layers, n_nodes)
    """
    return np.cumsum(thickness, axis=0)


def predicted_boundaries(inputs: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """Boundaries for the predicted layers, stacked under the (known) input layers.

    inputs: (n_in, N) thickness, predicted: (N, n_out) -> (n_out, N)
    """
    top = inputs.sum(axis=0)
    return top[None, :] + np.cumsum(np.clip(predicted.T, 0.0, None), axis=0)


def profile_csv(truth: np.ndarray, pred: np.ndarray, n_in: int) -> str:
    buf = io.StringIO()
    buf.write(f"# schema={PLOT_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["node", "layer", "truth_depth", "pred_depth"])
    n_layers, n = truth.shape
    for layer in range(n_layers):
        for i in range(n):
            p = "" if layer < n_in else repr(float(pred[layer - n_in, i]))
            w.writerow([i, layer, repr(float(truth[layer, i])), p])
    return buf.getvalue()


def _polyline(xs, ys, color, width=1.2, dash=None) -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{extra} points="{pts}"/>'


def profile_svg(truth: np.ndarray, pred: np.ndarray, n_in: int, title: str = "",
                width: int = 900, height: int = 520) -> str:
    """Green ground-truth boundaries for every layer, red predictions for the deep ones.

    Depth grows downward; x is the node (pixel column) index.
    """
    left, right, top, bottom = 60, 20, 40, 50
    n_layers, n = truth.shape
    ymax = float(max(truth.max(), pred.max() if pred.size else 0.0)) or 1.0
    pw, ph = width - left - right, height - top - bottom

    def sx(i):
        return left + pw * i / max(n - 1, 1)

    def sy(d):
        return top + ph * d / ymax

    xs = [sx(i) for i in range(n)]
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f"<metadata>{PLOT_SCHEMA}</metadata>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f"<title>{escape(title)}</title>",
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for frac in np.linspace(0.0, 1.0, 6):
        d = ymax * frac
        y = sy(d)
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="#444"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{d:.0f}</text>')
    for i in range(0, n, max(n // 8, 1)):
        x = sx(i)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{x:.2f}" y="{top + ph + 16}" text-anchor="middle">{i}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">node index</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">depth (px)</text>')
    out.append('<g id="truth">')
    for layer in range(n_layers):
        out.append(_polyline(xs, [sy(v) for v in truth[layer]], TRUTH_COLOR))
    out.append("</g>")
    out.append('<g id="prediction">')
    for k in range(pred.shape[0]):
        out.append(_polyline(xs, [sy(v) for v in pred[k]], PRED_COLOR, dash="4 2"))
    out.append("</g>")
    lx, ly = left + pw - 150, top + 14
    out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 24}" y2="{ly}" stroke="{TRUTH_COLOR}" stroke-width="2"/>')
    out.append(f'<text x="{lx + 30}" y="{ly + 4}">ground truth</text>')
    out.append(f'<line x1="{lx}" y1="{ly + 16}" x2="{lx + 24}" y2="{ly + 16}" stroke="{PRED_COLOR}" '
               f'stroke-width="2" stroke-dasharray="4 2"/>')
    out.append(f'<text x="{lx + 30}" y="{ly + 20}">prediction (layers {n_in}-{n_layers - 1})</text>')
    out.append(f'<desc>{escape(f"{n_layers} layers, {n} nodes, first {n_in} layers are model inputs")}</desc>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

