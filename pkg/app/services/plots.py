"""Error-curve figures, drawn from curves.csv alone."""

import logging
from pathlib import Path
from typing import List, Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from app.services.experiments import ErrorCurves

logger = logging.getLogger(__name__)

# text stays text, element ids and metadata carry no run-dependent values
_SVG_RC = {"svg.fonttype": "none", "svg.hashsalt": "rb-greedy"}


def emit_plots(
    curves: Union[ErrorCurves, str, Path],
    path: Union[str, Path],
    title: Optional[str] = None,
) -> List[Path]:
    """
    Mean validation error against n on a log axis, one line per beta with a min/max band.
    `path` is a directory (writes error_curves.svg into it) or an .svg file name.
    Returns the files written; an empty beta list writes nothing.
    """
    if not isinstance(curves, ErrorCurves):
        curves = ErrorCurves.from_csv(curves)
    betas = curves.betas
    if not betas:
        logger.warning("no beta values in the curves, no plot written")
        return []

    path = Path(path)
    target = path if path.suffix == ".svg" else path / "error_curves.svg"
    target.parent.mkdir(parents=True, exist_ok=True)

    summary = curves.summary
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    try:
        for beta in betas:
            rows = summary[summary["beta"] == beta]
            line, = ax.semilogy(rows["n"], rows["mean"], marker="o", markersize=3, label=f"β = {beta:g}")
            ax.fill_between(rows["n"], rows["min"], rows["max"], color=line.get_color(), alpha=0.15, linewidth=0)
        ax.set_xlabel("n")
        ax.set_ylabel("validation error")
        if title:
            ax.set_title(title)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
        with plt.rc_context(_SVG_RC):
            fig.savefig(target, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    logger.info("wrote %s", target)
    return [target]
