#!/usr/bin/env python3

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
from typing import Dict, List, Optional, Tuple


SVG_HASH_SALT = 'stratamatch'
YELLOW_ZONE_COLOUR = '#f5e663'
RED_ZONE_COLOUR = '#e8837c'


def new_figure(size: Tuple[float, float] = (7.0, 5.0)) -> Tuple[plt.Figure, plt.Axes]:
    # svg ids are random unless salted
    plt.rcParams['svg.hashsalt'] = SVG_HASH_SALT
    fig, ax = plt.subplots(figsize=size)
    return fig, ax


def save_svg(fig: plt.Figure, filename: str):
    try:
        fig.savefig(filename, format='svg', metadata={'Date': None})
    finally:
        plt.close(fig)


def add_stacked_histogram_data_to_axis(ax: plt.Axes, bin_edges: np.ndarray, stacked_data_labels: List[str],
                                       counts_by_label: Dict[str, np.ndarray]):
    widths = np.diff(bin_edges)
    bottom = np.zeros(len(widths))
    for label in stacked_data_labels:
        counts = np.asarray(counts_by_label[label], dtype=float)
        ax.bar(bin_edges[:-1], counts, width=widths, bottom=bottom, align='edge', label=label,
               edgecolor='black', linewidth=0.3)
        bottom = bottom + counts


def add_zone_shading(ax: plt.Axes, x_max: float, too_few: float, too_many: float, ratio: float):
    """
    Shade the size ratio plane: red where a stratum has too few or too many
    rows, yellow where the control proportion is ratio:1 or more unbalanced.
    """
    low = 1.0 / (1.0 + ratio)
    high = ratio / (1.0 + ratio)
    ax.axhspan(0.0, low, color=YELLOW_ZONE_COLOUR, alpha=0.5, linewidth=0)
    ax.axhspan(high, 1.0, color=YELLOW_ZONE_COLOUR, alpha=0.5, linewidth=0)
    ax.axvspan(0.0, min(too_few, x_max), color=RED_ZONE_COLOUR, alpha=0.6, linewidth=0)
    if too_many < x_max:
        ax.axvspan(too_many, x_max, color=RED_ZONE_COLOUR, alpha=0.6, linewidth=0)
    ax.set_xlim(0.0, x_max)
    ax.set_ylim(0.0, 1.0)


def add_titles_to_axis(ax: plt.Axes, title: str, y_label: str, x_label: Optional[str] = None, legend: bool = True):
    ax.set_title(title)
    ax.set_ylabel(y_label)
    if x_label is not None:
        ax.set_xlabel(x_label)
    if legend:
        ax.legend(bbox_to_anchor=(1.0, 1.0), loc='upper left')
        plt.subplots_adjust(right=0.8)
    ax.grid(axis='y', linestyle='--')
