import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cu_eval import simulation as sim
from cu_eval.data import (CellIndex, ColumnSpec, Dataset, IngestionError, Schema, SchemaError,
                          ingest_csv, write_csv)

HEADER = "y,t,z1,z2\n"


def write(tmp_path, body, name="d.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body, encoding="utf-8")
    return p


def test_three_row_file(tmp_path):
    ds = ingest_csv(write(tmp_path, "0,1,0.0,0\n1,3,0.2,1\n0,2,1.0,1\n"), sim.SIM_SCHEMA)
    assert ds.n == 3
    assert ds.treatment_labels() == [1, 3, 2]
    assert ds.labels("z1") == [0.0, 0.2, 1.0]
    np.testing.assert_array_equal(ds.y, [0, 1, 0])


def test_undeclared_level_names_row_and_column(tmp_path):
    with pytest.raises(IngestionError, match="row 2, column t: undeclared level"):
        ingest_csv(write(tmp_path, "0,1,0.0,0\n1,4,0.2,1\n"), sim.SIM_SCHEMA)


def test_empty_data_section(tmp_path):
    with pytest.raises(IngestionError, match="dataset has 0 rows"):
        ingest_csv(write(tmp_path, ""), sim.SIM_SCHEMA)


@pytest.mark.parametrize("body,msg", [
    ("0,1,,0\n", "row 1, column z1: missing value"),
    ("0,1,0.0,0\n0,1,abc,1\n", "row 2, column z1: unparseable value"),
    ("0,1,0.3,0\n", "row 1, column z1: undeclared level"),
    ("2,1,0.0,0\n", "row 1, column y: binary value"),
])
def test_bad_cells(tmp_path, body, msg):
    with pytest.raises(IngestionError, match=msg):
        ingest_csv(write(tmp_path, body), sim.SIM_SCHEMA)


def test_missing_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("y,t,z1\n0,1,0.0\n")
    with pytest.raises(IngestionError, match="missing column.*z2"):
        ingest_csv(p, sim.SIM_SCHEMA)


def test_roundtrip(tmp_path):
    ds = sim.sample_population("S3", 300, 5)
    write_csv(ds, tmp_path / "a.csv")
    back = ingest_csv(tmp_path / "a.csv", ds.schema)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.t, ds.t)
    for k in ds.z:
        np.testing.assert_array_equal(back.z[k], ds.z[k])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6, allow_nan=False), st.sampled_from(["a", "b"]),
                          st.floats(-1e9, 1e9, allow_nan=False)), min_size=1, max_size=20))
def test_roundtrip_real_columns(tmp_path_factory, rows):
    schema = Schema((ColumnSpec("y", "numeric"), ColumnSpec("t", "categorical", ("a", "b")),
                     ColumnSpec("x", "real")), outcome="y", treatment="t")
    ds = Dataset.from_labels(schema, [r[0] for r in rows], [r[1] for r in rows],
                             {"x": [r[2] for r in rows]})
    p = tmp_path_factory.mktemp("rt") / "x.csv"
    write_csv(ds, p)
    back = ingest_csv(p, schema)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.z["x"], ds.z["x"])
    assert back.treatment_labels() == ds.treatment_labels()


def test_schema_json(tmp_path):
    d = sim.SIM_SCHEMA.to_dict()
    again = Schema.from_dict(d)
    assert again == sim.SIM_SCHEMA
    with pytest.raises(SchemaError):
        Schema.from_dict({"outcome": "y", "treatment": "t",
                          "columns": {"y": {"type": "binary"},
                                      "t": {"type": "categorical", "levels": [1]}}})


def test_arrays_are_read_only():
    ds = sim.sample_population("S1", 10, 0)
    with pytest.raises(ValueError):
        ds.y[0] = 5


def test_numeric_view_of_categorical():
    ds = sim.sample_population("S1", 50, 1)
    np.testing.assert_allclose(ds.numeric("z1"), np.asarray(sim.Z1_LEVELS)[ds.codes("z1")])


def test_cell_index_bijection():
    idx = CellIndex.for_schema(sim.SIM_SCHEMA, ("z1", "z2"))
    assert idx.n_cells == 12
    ids = [idx.cell_of_codes(idx.codes_of(c)) for c in range(12)]
    assert ids == list(range(12))
    ds = sim.sample_population("S1", 500, 2)
    cells = idx.cell_ids(ds)
    assert cells.min() >= 0 and cells.max() < 12
    np.testing.assert_array_equal(cells, ds.codes("z1") * 2 + ds.codes("z2"))
