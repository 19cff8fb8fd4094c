"""Waterfall rendering of Shapley reports as SVG documents."""
from collections import namedtuple
import io
import logging

import matplotlib
from matplotlib.figure import Figure

from fairshap import __version__

log = logging.getLogger("fairshap.render")

WaterfallBar = namedtuple("WaterfallBar", ['label', 'start', 'end', 'value'])
WaterfallOptions = namedtuple("WaterfallOptions", ['title', 'max_players', 'width', 'row_height'],
                              defaults=[None, None, 7.0, 0.4])

INCREASE_COLOR = "#c0392b"
DECREASE_COLOR = "#2471a3"
KIND_LABELS = {
    'accuracy': "expected accuracy",
    'dp': "demographic parity difference",
    'eo': "equalised odds difference",
    'cdp': "conditional demographic parity difference",
}


def waterfall_layout(report, max_players=None):
    """Bars ordered by descending |phi|, stacked from the offset; players past
    max_players are folded into one remainder bar"""
    order = sorted(range(len(report.phi)), key=lambda i: (-abs(report.phi[i]), i))
    shown, folded = order, []
    if max_players is not None and len(order) > max_players:
        shown, folded = order[:max_players], order[max_players:]
    bars = []
    level = report.offset
    for index in shown:
        bars.append(WaterfallBar(report.players[index], level, level + report.phi[index], report.phi[index]))
        level += report.phi[index]
    if folded:
        rest = sum(report.phi[i] for i in folded)
        bars.append(WaterfallBar("%s other players" % len(folded), level, level + rest, rest))
    return bars


def _title(report, options):
    if options.title:
        return options.title
    label = KIND_LABELS.get(report.kind, report.kind)
    if report.cell is not None:
        label = "%s, cell %s" % (label, ", ".join(str(v) for v in report.cell))
    if report.kind == 'accuracy':
        return "%s: %.4f (offset %.4f)" % (label, report.offset + report.total, report.offset)
    return "%s: %+.4f (|%.4f|)" % (label, report.total, abs(report.total))


def render_waterfall(report, options=WaterfallOptions()):
    """SVG waterfall of a report; identical reports render to identical bytes"""
    bars = waterfall_layout(report, options.max_players)
    height = max(2.5, 1.2 + options.row_height * (len(bars) + 1))
    with matplotlib.rc_context({'svg.hashsalt': 'fairshap', 'svg.fonttype': 'none', 'font.size': 9}):
        figure = Figure(figsize=(options.width, height))
        axes = figure.add_subplot(1, 1, 1)
        positions = list(range(len(bars), 0, -1))
        for position, bar in zip(positions, bars):
            color = INCREASE_COLOR if bar.value >= 0 else DECREASE_COLOR
            axes.barh(position, bar.end - bar.start, left=bar.start, color=color, height=0.6)
            axes.text(max(bar.start, bar.end), position, " %+.4f" % bar.value, va='center', ha='left')
        final = report.offset + report.total
        axes.axvline(report.offset, color="#7f7f7f", linewidth=0.8, linestyle=":")
        axes.axvline(final, color="#000000", linewidth=0.8)
        axes.set_yticks(positions)
        axes.set_yticklabels([bar.label for bar in bars])
        axes.set_ylim(0.3, len(bars) + 0.7)
        axes.set_title(_title(report, options))
        axes.set_xlabel("cumulative value (start %.4f, end %.4f)" % (report.offset, final))
        figure.tight_layout()
        buffer = io.BytesIO()
        figure.savefig(buffer, format='svg', metadata={'Date': None, 'Creator': "fairshap %s" % __version__})
    return buffer.getvalue().decode("utf-8")


def write_waterfall(report, path, options=WaterfallOptions()):
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(render_waterfall(report, options))
    log.info("Wrote waterfall of %s to %s" % (report.kind, path))
