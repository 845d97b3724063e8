import re

import numpy as np
import pandas as pd

from app.core.seeding import StreamRole, make_rng
from app.services.experiments import CURVE_COLUMNS, ErrorCurves
from app.services.plots import emit_plots


def make_curves(betas, n_max=4, realizations=2):
    rng = make_rng(0, StreamRole.VALIDATION, "plots")
    rows = [
        (beta, r, n, int(n ** beta), 1.0, float(rng.uniform(0.5, 1.5)) * n ** -beta)
        for beta in betas for r in range(realizations) for n in range(1, n_max + 1)
    ]
    return ErrorCurves(pd.DataFrame(rows, columns=CURVE_COLUMNS))


def test_empty_curves_write_nothing(tmp_path):
    csv = tmp_path / "curves.csv"
    csv.write_text(",".join(CURVE_COLUMNS) + "\n")
    assert emit_plots(csv, tmp_path / "plots") == []
    assert not (tmp_path / "plots").exists()


def test_one_legend_entry_per_beta(tmp_path):
    csv = make_curves([1.0, 1.25, 1.5, 1.75, 2.0]).to_csv(tmp_path / "curves.csv")
    written = emit_plots(csv, tmp_path / "plots", title="k=2")
    assert written == [tmp_path / "plots" / "error_curves.svg"]
    svg = written[0].read_text(encoding="utf-8")
    assert set(re.findall(r"β = ([0-9.]+)<", svg)) == {"1", "1.25", "1.5", "1.75", "2"}


def test_csv_reload_reproduces_in_memory_curves(tmp_path):
    curves = make_curves([1.0, 1.5, 2.0], n_max=20, realizations=5)
    reloaded = ErrorCurves.from_csv(curves.to_csv(tmp_path / "curves.csv"))
    np.testing.assert_array_equal(reloaded.raw["sigma_val"].to_numpy(), curves.raw["sigma_val"].to_numpy())
    pd.testing.assert_frame_equal(reloaded.summary, curves.summary, check_exact=True)


def test_plot_from_csv_matches_plot_from_memory(tmp_path):
    curves = make_curves([1.0, 2.0])
    csv = curves.to_csv(tmp_path / "curves.csv")
    from_memory = emit_plots(curves, tmp_path / "memory.svg")
    from_csv = emit_plots(csv, tmp_path / "csv.svg")
    assert from_memory == [tmp_path / "memory.svg"]
    assert from_memory[0].read_bytes() == from_csv[0].read_bytes()
