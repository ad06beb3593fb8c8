"""Minimal SVG 1.1 scatter plot of per-neuron MI against activation frequency."""
from xml.sax.saxutils import escape

from .checkpoint import atomic_write_bytes
from .layers import ConfigError

WIDTH, HEIGHT = 480, 360
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 30, 50


def smi_scatter_svg(frequency, mi, title="SMI vs activation frequency"):
    if len(frequency) != len(mi):
        raise ConfigError(f"{len(frequency)} frequencies but {len(mi)} MI values")
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    ymax = max([float(v) for v in mi] + [0.0]) * 1.05 or 1.0

    def sx(v):
        return LEFT + min(max(float(v), 0.0), 1.0) * pw

    def sy(v):
        return TOP + ph - min(max(float(v) / ymax, 0.0), 1.0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line class="axis" x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line class="axis" x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    for i in range(6):
        fx = i / 5
        out.append(f'<text x="{sx(fx):.1f}" y="{TOP + ph + 16}" text-anchor="middle" font-size="10">{fx:.1f}</text>')
        fy = ymax * i / 5
        out.append(f'<text x="{LEFT - 6}" y="{sy(fy) + 3:.1f}" text-anchor="end" font-size="10">{fy:.3g}</text>')
    out.append(
        f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12">'
        "activation frequency</text>"
    )
    out.append(
        f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">per-neuron MI (nats)</text>'
    )
    for f, m in zip(frequency, mi):
        out.append(f'<circle class="point" cx="{sx(f):.2f}" cy="{sy(m):.2f}" r="2.5" fill="steelblue" fill-opacity="0.7"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_smi_scatter(results, path=None, title="SMI vs activation frequency"):
    """Scatter every neuron of every run's first gated layer; optionally write to ``path``."""
    freq, mi = [], []
    for r in results:
        stats = r.get("neuron_stats") if isinstance(r, dict) else r.neuron_stats
        if stats is None:
            raise ConfigError("run has no SMI data; enable smi in the config")
        freq.extend(stats["frequency"])
        mi.extend(stats["mi"])
    svg = smi_scatter_svg(freq, mi, title)
    if path is not None:
        atomic_write_bytes(path, svg.encode())
    return svg
