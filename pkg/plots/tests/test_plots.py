import json
import subprocess
import sys

import numpy as np
import pytest

from recplots import figures


def write_sweep_csv(path, sizes, losses):
    with open(path, "w") as f:
        f.write("layers,params,metric_a,metric_b,loss\n")
        for i, (n, l) in enumerate(zip(sizes, losses), start=1):
            f.write(f"{i},{n},0.5,0.3,{l}\n")


def write_metrics_csv(path, steps, gini_by_layer=None, losses=None):
    layers = sorted(gini_by_layer) if gini_by_layer else []
    header = ["step", "epoch", "L_con", "L_c1", "L_c2", "L_total", "hitrate", "ndcg", "lr"]
    header += [f"gini_layer_{i}" for i in layers]
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for t in steps:
            loss = losses[t] if losses else 1.0 / (1 + t)
            row = [t, 0, loss, loss, loss, 3 * loss, 0.5, 0.3, 0.001]
            row += [gini_by_layer[i][t] for i in layers]
            f.write(",".join(str(v) for v in row) + "\n")


class TestScalingLaw:
    def test_planted_exponent_recovered(self, tmp_path):
        sizes = np.array([1e4, 1e5, 1e6, 1e7])
        csv = tmp_path / "sweep.csv"
        write_sweep_csv(csv, sizes, 2.0 * sizes ** (-0.5))
        out = tmp_path / "fig.png"
        a, b, r2 = figures.plot_scaling_law(str(csv), str(out))
        assert a == pytest.approx(2.0, abs=1e-9)
        assert b == pytest.approx(0.5, abs=1e-12)
        assert r2 == pytest.approx(1.0, abs=1e-12)
        assert out.stat().st_size > 0

    def test_two_rows_rejected(self, tmp_path):
        csv = tmp_path / "short.csv"
        write_sweep_csv(csv, [10, 100], [1.0, 0.5])
        with pytest.raises(ValueError):
            figures.plot_scaling_law(str(csv), str(tmp_path / "x.png"))

    def test_missing_columns_rejected(self, tmp_path):
        csv = tmp_path / "bad.csv"
        csv.write_text("foo,bar\n1,2\n3,4\n5,6\n")
        with pytest.raises(ValueError, match="missing required columns"):
            figures.plot_scaling_law(str(csv), str(tmp_path / "x.png"))


class TestGiniCurves:
    def test_flat_zero_series_renders(self, tmp_path):
        csv = tmp_path / "m.csv"
        write_metrics_csv(csv, range(20), gini_by_layer={0: [0.0] * 20})
        out = tmp_path / "g.png"
        layers = figures.plot_gini(str(csv), str(out))
        assert layers == ["gini_layer_0"]
        assert out.stat().st_size > 0

    def test_layer_count_matches_legend(self, tmp_path):
        csv = tmp_path / "m.csv"
        gini = {i: list(np.linspace(0.8, 0.1, 15)) for i in range(3)}
        write_metrics_csv(csv, range(15), gini_by_layer=gini)
        layers = figures.plot_gini(str(csv), str(tmp_path / "g.png"))
        assert len(layers) == 3

    def test_out_of_range_values_rejected(self, tmp_path):
        csv = tmp_path / "m.csv"
        write_metrics_csv(csv, range(5), gini_by_layer={0: [0.2, 0.3, 1.4, 0.1, 0.0]})
        with pytest.raises(ValueError, match="outside"):
            figures.plot_gini(str(csv), str(tmp_path / "g.png"))

    def test_no_gini_columns_rejected(self, tmp_path):
        csv = tmp_path / "m.csv"
        write_metrics_csv(csv, range(5))
        with pytest.raises(ValueError, match="gini_layer"):
            figures.plot_gini(str(csv), str(tmp_path / "g.png"))


class TestMetricCurves:
    def test_renders_nonempty(self, tmp_path):
        csv = tmp_path / "m.csv"
        write_metrics_csv(csv, range(30))
        out = tmp_path / "mc.png"
        cols = figures.plot_metrics(str(csv), str(out))
        assert "L_total" in cols and "hitrate" in cols
        assert out.stat().st_size > 0


class TestCli:
    def run(self, *args):
        return subprocess.run(
            [sys.executable, "-m", "recplots.cli", *map(str, args)],
            capture_output=True, text=True,
        )

    def test_scaling_law_annotation_stdout(self, tmp_path):
        sizes = np.array([1e3, 1e4, 1e5])
        csv = tmp_path / "sweep.csv"
        write_sweep_csv(csv, sizes, 5.0 * sizes ** (-0.25))
        out = tmp_path / "f.png"
        proc = self.run("scaling_law", "--in", csv, "--out", out)
        assert proc.returncode == 0
        assert "b=0.250000" in proc.stdout
        assert out.stat().st_size > 0

    def test_malformed_input_nonzero_exit(self, tmp_path):
        csv = tmp_path / "bad.csv"
        csv.write_text("a,b\n1,2\n")
        proc = self.run("scaling_law", "--in", csv, "--out", tmp_path / "x.png")
        assert proc.returncode == 1
        assert "error" in json.loads(proc.stderr.strip().splitlines()[-1])


@pytest.mark.skipif(
    __import__("importlib.util", fromlist=["util"]).find_spec("cascaderec") is None,
    reason="primary package unavailable",
)
class TestCrossComponentConsistency:
    def test_fit_matches_primary_recorded_values(self, tmp_path):
        """The annotated fit must equal the pipeline's sweep_fit.csv to 6 dp."""
        d = str(tmp_path / "w")
        cli = [sys.executable, "-m", "cascaderec.cli"]
        common = ["--seed", "21", "--threads", "1", "--out-dir", d]
        subprocess.run(cli + ["gen-data", *common, "--n-items", "200", "--n-users", "80"],
                       check=True, capture_output=True)
        subprocess.run(cli + ["tokenize", *common, "--catalog", f"{d}/items.jsonl",
                              "--codebook-size", "8", "--kmeans-iters", "4"],
                       check=True, capture_output=True)
        subprocess.run(cli + ["sweep", *common, "--catalog", f"{d}/items.jsonl",
                              "--sequences", f"{d}/sequences.jsonl",
                              "--assignments", f"{d}/assignments.csv",
                              "--layers", "1,2,3", "--max-steps", "4",
                              "--codebook-size", "8", "--hidden-dim", "16",
                              "--n-heads", "2", "--l-max", "8", "--batch-size", "16"],
                       check=True, capture_output=True)
        a, b, r2 = figures.plot_scaling_law(f"{d}/sweep.csv", str(tmp_path / "f.png"))
        with open(f"{d}/sweep_fit.csv") as f:
            header, row = f.read().splitlines()
        ra, rb, rr2 = (float(x) for x in row.split(","))
        assert f"{a:.6f}" == f"{ra:.6f}"
        assert f"{b:.6f}" == f"{rb:.6f}"
        assert f"{r2:.6f}" == f"{rr2:.6f}"
