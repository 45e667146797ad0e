"""Delimited-file ingestion, report writers and scenario configuration."""

import csv
import json

import numpy as np
import pytest

from meanaic.criterion import select
from meanaic.exceptions import ConfigError, InvalidResponse, MissingColumn, ParseError
from meanaic.glm import Family
from meanaic.io import (
    DatasetSchema,
    cluster_row_counts,
    format_ranking,
    load_clusters,
    load_scenario_config,
    write_clusters,
    write_selection_report,
    write_sim_reports,
)
from meanaic.simulation import Scenario, generate_dataset, lattice, run_scenario

SCHEMA = DatasetSchema("school", "y", ("x1", "x2"))


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


SIX_ROWS = "school,y,x1,x2\na,1,0,0.5\na,0,1,0.25\nb,3,1,0.1\na,2,0,0.75\nb,1,0,0.9\nb,4,1,0.3\n"


# --------------------------------------------------------------------- #
# loading
# --------------------------------------------------------------------- #


class TestLoad:
    def test_six_rows_two_clusters(self, tmp_path):
        data = load_clusters(_write(tmp_path, SIX_ROWS), SCHEMA)
        assert [c.cluster_id for c in data] == ["a", "b"]
        assert [c.n for c in data] == [3, 3]
        assert cluster_row_counts(data) == {"a": 3, "b": 3}
        # rows keep file order within a cluster
        np.testing.assert_array_equal(data[0].y, [1, 0, 2])
        np.testing.assert_array_equal(data[1].X[:, 2], [0.1, 0.9, 0.3])
        assert np.all(data[0].X[:, 0] == 1)

    def test_tab_delimited(self, tmp_path):
        data = load_clusters(_write(tmp_path, SIX_ROWS.replace(",", "\t")), SCHEMA)
        assert [c.n for c in data] == [3, 3]

    def test_column_order_and_extra_columns(self, tmp_path):
        text = "note,x2,y,school,x1\nq,0.5,1,a,0\nr,0.25,0,a,1\n"
        (c,) = load_clusters(_write(tmp_path, text), SCHEMA)
        np.testing.assert_array_equal(c.X, [[1, 0, 0.5], [1, 1, 0.25]])

    def test_non_integer_count_cites_line(self, tmp_path):
        text = "school,y,x1,x2\na,1,0,0.5\na,0,1,0.25\nb,2.5,1,0.1\n"
        with pytest.raises(InvalidResponse) as info:
            load_clusters(_write(tmp_path, text), SCHEMA)
        assert info.value.line == 4
        assert "line 4" in str(info.value)

    def test_negative_count(self, tmp_path):
        with pytest.raises(InvalidResponse):
            load_clusters(_write(tmp_path, "school,y,x1,x2\na,-1,0,0\n"), SCHEMA)

    def test_bernoulli_response(self, tmp_path):
        schema = DatasetSchema("school", "y", ("x1", "x2"), Family.BERNOULLI)
        with pytest.raises(InvalidResponse) as info:
            load_clusters(_write(tmp_path, "school,y,x1,x2\na,1,0,0\na,2,0,0\n"), schema)
        assert info.value.line == 3

    def test_missing_column(self, tmp_path):
        with pytest.raises(MissingColumn):
            load_clusters(_write(tmp_path, "school,y,x1\na,1,0\n"), SCHEMA)

    def test_bad_covariate(self, tmp_path):
        with pytest.raises(ParseError) as info:
            load_clusters(_write(tmp_path, "school,y,x1,x2\na,1,0,0\na,1,yes,0\n"), SCHEMA)
        assert info.value.line == 3

    def test_ragged_row(self, tmp_path):
        with pytest.raises(ParseError):
            load_clusters(_write(tmp_path, "school,y,x1,x2\na,1,0\n"), SCHEMA)

    def test_empty_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_clusters(_write(tmp_path, ""), SCHEMA)

    def test_duplicate_schema_columns(self):
        with pytest.raises(ValueError):
            DatasetSchema("g", "y", ("x", "y"))

    def test_round_trip_is_exact(self, tmp_path):
        data = generate_dataset(Scenario(K=5, cluster_sizes=(30,), sigma1_sq=0.3, base_seed=3), 2)
        path = tmp_path / "rt.csv"
        write_clusters(path, data, ["x1", "x2"], cluster_column="school")
        back = load_clusters(path, SCHEMA)
        assert [c.cluster_id for c in back] == [str(c.cluster_id) for c in data]
        for a, b in zip(data, back):
            assert a.y.tobytes() == b.y.tobytes()
            assert a.X.tobytes() == b.X.tobytes()
        assert "." not in path.read_text().splitlines()[1].split(",")[1]


# --------------------------------------------------------------------- #
# selection reports
# --------------------------------------------------------------------- #


class TestSelectionReport:
    def test_files_and_hand_average(self, tmp_path):
        data = generate_dataset(Scenario(K=6, cluster_sizes=(40,), base_seed=4), 0)
        report = select(data, lattice())
        paths = write_selection_report(report, tmp_path)
        with paths["ranking_csv"].open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4 and rows[0]["best"] == "1" and float(rows[0]["delta"]) == 0.0
        with paths["cluster_aic"].open() as fh:
            matrix = list(csv.DictReader(fh))
        assert len(matrix) == 6
        best = rows[0]["model"]
        by_hand = sum(float(r[best]) for r in matrix) / len(matrix)
        assert by_hand == pytest.approx(float(rows[0]["value"]), rel=1e-14)

    def test_text_table_two_decimals(self):
        data = generate_dataset(Scenario(K=4, cluster_sizes=(40,), base_seed=5), 0)
        text = format_ranking(select(data, lattice()))
        lines = text.splitlines()
        assert len(lines) == 5 and lines[1].rstrip().endswith("*")
        value = lines[1].split()[-3]
        assert len(value.split(".")[1]) == 2


# --------------------------------------------------------------------- #
# scenario configuration and simulation reports
# --------------------------------------------------------------------- #


class TestScenarioConfig:
    def test_defaults_and_lists(self, tmp_path):
        p = _write(tmp_path, "sigma1_sq: [0.005, 0.15]\ncluster_sizes: [40, 80, 160]\n", "s.yaml")
        cfg = load_scenario_config(p)
        assert cfg["sigma1_sq"] == [0.005, 0.15]
        assert cfg["sigma0_sq"] == [0.005]
        assert cfg["cluster_sizes"] == (40, 80, 160)
        assert cfg["criteria"] == ["meanAIC", "mAIC-RI"]

    @pytest.mark.parametrize(
        "text, key",
        [
            ("K: ten\n", "K"),
            ("sigma1_sq: [0.1, bad]\n", "sigma1_sq[1]"),
            ("replicates: 0\n", "replicates"),
            ("re_law: cauchy\n", "re_law"),
            ("colour: red\n", "colour"),
            ("criteria: [meanAIC, BIC]\n", "criteria[1]"),
            ("criteria: [GIC]\n", "gic_lambda"),
        ],
    )
    def test_errors_name_the_key(self, tmp_path, text, key):
        with pytest.raises(ConfigError) as info:
            load_scenario_config(_write(tmp_path, text, "s.yaml"))
        assert info.value.key == key
        assert str(info.value).startswith(key)

    def test_invalid_yaml(self, tmp_path):
        with pytest.raises(ConfigError):
            load_scenario_config(_write(tmp_path, "K: [1, 2\n", "s.yaml"))


class TestSimReports:
    def test_files(self, tmp_path):
        reports = [run_scenario(Scenario(replicates=3, sigma1_sq=v, base_seed=1), ["meanAIC"]) for v in (0.005, 0.15)]
        paths = write_sim_reports(reports, tmp_path, {"note": "x"})
        with paths["table_csv"].open() as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["sigma1_sq"]) for r in rows] == [0.005, 0.15]
        with paths["histogram_csv"].open() as fh:
            hist = list(csv.DictReader(fh))
        assert sum(int(r["count"]) for r in hist) == 6
        meta = json.loads(paths["metadata"].read_text())
        assert len(meta["wall_time_seconds"]) == 2
        assert "wall" not in paths["table_csv"].read_text()
