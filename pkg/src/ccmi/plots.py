"""Minimal deterministic SVG emitters for dot plots and forest plots."""
import math
from xml.sax.saxutils import escape

MEASURES = {
    "rel_bias": ("rel_bias_pct", "rel_bias_mcse", "Relative bias (%)", 0.0),
    "coverage": ("coverage_pct", "coverage_mcse", "Coverage of 95% CI (%)", 95.0),
    "emp_se": ("emp_se", "emp_se_mcse", "Empirical SE", None),
    "mod_se": ("mod_se", None, "Model-based SE", None),
    "rel_se_error": ("rel_se_error_pct", None, "Relative error in model SE (%)", 0.0),
    "convergence": ("convergence_rate_pct", None, "Convergence (%)", 100.0),
}

PANEL_W, PANEL_H = 420, 300
MARGIN_L, MARGIN_T, MARGIN_B = 120, 40, 30


def _num(x):
    return f"{x:.2f}"


def _range(values, ref):
    vals = [v for v in values if math.isfinite(v)]
    if ref is not None:
        vals.append(ref)
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.08 * (hi - lo)
    return lo - pad, hi + pad


def dot_plot(rows, measure):
    """One panel per scenario; a dot per method with +-1.96 MCSE bars.

    ``rows`` are dicts as returned by ``harness.read_summary``.
    """
    col, mcse_col, label, ref = MEASURES[measure]
    scenarios = []
    for r in rows:
        if r["scenario"] not in scenarios:
            scenarios.append(r["scenario"])
    width = MARGIN_L + PANEL_W + 20
    height = len(scenarios) * (PANEL_H + MARGIN_T + MARGIN_B) + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    for k, label_s in enumerate(scenarios):
        sub = [r for r in rows if r["scenario"] == label_s]
        top = 10 + k * (PANEL_H + MARGIN_T + MARGIN_B) + MARGIN_T
        vals = [r[col] for r in sub]
        errs = [1.96 * r[mcse_col] if mcse_col and math.isfinite(r[mcse_col]) else 0.0 for r in sub]
        lo, hi = _range([v - e for v, e in zip(vals, errs)] + [v + e for v, e in zip(vals, errs)], ref)

        def xpos(v):
            return MARGIN_L + (v - lo) / (hi - lo) * PANEL_W

        out.append(f'<text x="{MARGIN_L}" y="{top - 22}" font-weight="bold">'
                   f'{escape(label_s)}: {escape(label)}</text>')
        out.append(f'<rect x="{MARGIN_L}" y="{top}" width="{PANEL_W}" height="{PANEL_H}" '
                   f'fill="none" stroke="black"/>')
        if ref is not None:
            x = _num(xpos(ref))
            out.append(f'<line x1="{x}" y1="{top}" x2="{x}" y2="{top + PANEL_H}" '
                       f'stroke="grey" stroke-dasharray="4,3"/>')
        for t in range(5):
            v = lo + (hi - lo) * (t + 0.5) / 5
            x = _num(xpos(v))
            out.append(f'<text x="{x}" y="{top + PANEL_H + 14}" text-anchor="middle">{v:.3g}</text>')
        step = PANEL_H / (len(sub) + 1)
        for i, (r, v, e) in enumerate(zip(sub, vals, errs)):
            y = _num(top + step * (i + 1))
            out.append(f'<text x="{MARGIN_L - 6}" y="{y}" text-anchor="end" '
                       f'dominant-baseline="middle">{escape(r["method"])}</text>')
            if not math.isfinite(v):
                continue
            if e > 0:
                out.append(f'<line x1="{_num(xpos(v - e))}" y1="{y}" x2="{_num(xpos(v + e))}" '
                           f'y2="{y}" stroke="black"/>')
            out.append(f'<circle cx="{_num(xpos(v))}" cy="{y}" r="3.5" fill="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def forest_plot(table, title="Risk ratio (95% CI)"):
    """Forest plot on the log axis from (method, rr, ci_low, ci_high, converged) rows."""
    ok = [t for t in table if t[4] and all(math.isfinite(v) and v > 0 for v in t[1:4])]
    logs = [math.log(v) for t in ok for v in t[2:4]] + [0.0]
    lo, hi = _range(logs, 0.0)
    height = MARGIN_T + 22 * (len(table) + 1) + MARGIN_B
    width = MARGIN_L + PANEL_W + 150

    def xpos(v):
        return MARGIN_L + (math.log(v) - lo) / (hi - lo) * PANEL_W

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{MARGIN_L}" y="20" font-weight="bold">{escape(title)}</text>']
    x1 = _num(xpos(1.0))
    bottom = MARGIN_T + 22 * len(table)
    out.append(f'<line x1="{x1}" y1="{MARGIN_T}" x2="{x1}" y2="{bottom}" stroke="grey" '
               f'stroke-dasharray="4,3"/>')
    for i, (name, rr, lo_ci, hi_ci, conv) in enumerate(table):
        y = _num(MARGIN_T + 22 * i + 11)
        out.append(f'<text x="{MARGIN_L - 6}" y="{y}" text-anchor="end" '
                   f'dominant-baseline="middle">{escape(name)}</text>')
        if (name, rr, lo_ci, hi_ci, conv) not in ok:
            out.append(f'<text x="{MARGIN_L + 4}" y="{y}" dominant-baseline="middle">failed</text>')
            continue
        out.append(f'<line x1="{_num(xpos(lo_ci))}" y1="{y}" x2="{_num(xpos(hi_ci))}" y2="{y}" '
                   f'stroke="black"/>')
        out.append(f'<rect x="{_num(xpos(rr) - 3.5)}" y="{_num(float(y) - 3.5)}" width="7" '
                   f'height="7" fill="black"/>')
        out.append(f'<text x="{MARGIN_L + PANEL_W + 10}" y="{y}" dominant-baseline="middle">'
                   f'{rr:.2f} ({lo_ci:.2f}, {hi_ci:.2f})</text>')
    for t in range(5):
        v = math.exp(lo + (hi - lo) * (t + 0.5) / 5)
        out.append(f'<text x="{_num(xpos(v))}" y="{bottom + 16}" text-anchor="middle">{v:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
