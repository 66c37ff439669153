import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pstrat.dataset import DataError, Schema, build, load_csv, summarize, write_csv


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_four_row_csv_populates_every_cell(tmp_path):
    p = _write(tmp_path / "d.csv", "z,s,y,age\n1,1,2.0,30\n1,0,1.5,40\n0,1,0.5,35\n0,0,1.0,50\n")
    d = load_csv(p)
    assert d.n == 4
    assert d.covariate_names == ("age",)
    np.testing.assert_array_equal(d.x[:, 0], 1.0)
    c = summarize(d)
    assert c.n_zs == {(1, 1): 1, (1, 0): 1, (0, 1): 1, (0, 0): 1}
    assert c.p1_hat == 0.5 and c.p0_hat == 0.5


def test_non_binary_token_names_row_and_column(tmp_path):
    rows = ["z,s,y,a"] + [f"{i % 2},{i % 2},1.0,{i}" for i in range(6)] + ["2,0,1.0,7"]
    p = _write(tmp_path / "d.csv", "\n".join(rows) + "\n")
    with pytest.raises(DataError, match=r"column z.*row 7"):
        load_csv(p)


def test_duplicate_covariates_rejected_with_names(tmp_path):
    rows = ["z,s,y,a,b"] + [f"{i % 2},{(i // 2) % 2},0,{i * 0.3},{i * 0.3}" for i in range(8)]
    p = _write(tmp_path / "d.csv", "\n".join(rows) + "\n")
    with pytest.raises(DataError, match="b") as exc:
        load_csv(p)
    assert "a" in str(exc.value)


def test_rank_deficiency_found_by_elimination():
    rng = np.random.default_rng(0)
    a = rng.normal(size=10)
    b = rng.normal(size=10)
    cov = np.column_stack([a, b, 2 * a - b])
    with pytest.raises(DataError, match="c3"):
        build(np.arange(10) % 2, np.zeros(10), None, cov, ["c1", "c2", "c3"])


@pytest.mark.parametrize("text, needle", [
    ("z,y,a\n1,0,1\n0,0,2\n", "missing column 's'"),
    ("z,s,y,a\n1,1,x,1\n0,0,1,2\n", "non-numeric"),
    ("z,s,y,a\n1,1,1,1\n1,0,1,2\n", "arm"),
])
def test_load_errors(tmp_path, text, needle):
    with pytest.raises(DataError, match=needle):
        load_csv(_write(tmp_path / "d.csv", text))


def test_outcome_optional(tmp_path):
    p = _write(tmp_path / "d.csv", "z,s,a\n1,1,1\n1,0,2\n0,1,3\n0,0,5\n")
    d = load_csv(p)
    assert not d.has_outcome
    with pytest.raises(DataError, match="outcome column required"):
        d.require_outcome()


def test_read_outcome_false_skips_y_but_not_as_covariate(tmp_path):
    p = _write(tmp_path / "d.csv", "z,s,y,a\n1,1,9,1\n1,0,8,2\n0,1,7,3\n0,0,6,5\n")
    d = load_csv(p, read_outcome=False)
    assert d.y is None
    assert d.covariate_names == ("a",)


def test_schema_file_maps_columns(tmp_path):
    _write(tmp_path / "schema.txt", "# roles\nz = arm\ns = took\ny = out\ncovariates = w\n")
    p = _write(tmp_path / "d.csv", "arm,took,out,w,junk\n1,1,1,1,0\n1,0,1,2,0\n0,1,2,3,0\n0,0,2,5,1\n")
    d = load_csv(p, Schema.from_file(tmp_path / "schema.txt"))
    assert d.covariate_names == ("w",)
    np.testing.assert_array_equal(d.y, [1, 1, 2, 2])


def test_declared_intercept_not_duplicated(tmp_path):
    p = _write(tmp_path / "d.csv", "z,s,one,a\n1,1,1,1\n1,0,1,2\n0,1,1,3\n0,0,1,5\n")
    d = load_csv(p, Schema(y=None, covariates=["one", "a"], has_intercept=True))
    assert d.x.shape == (4, 2)


def test_summary_counts():
    z = [1] * 50 + [0] * 50
    s = [1] * 30 + [0] * 20 + [1] * 10 + [0] * 40
    c = summarize(build(z, s, None, np.empty((100, 0))))
    assert (c.p1_hat, c.p0_hat) == (0.6, 0.2)
    assert c.n_treated == 50 and c.n_control == 50


def test_all_treated_take_up_gives_p1_one():
    c = summarize(build([1, 1, 0, 0], [1, 1, 0, 1], None, np.empty((4, 0))))
    assert c.p1_hat == 1.0


def test_data_is_immutable(mono_data):
    with pytest.raises(ValueError):
        mono_data.x[0, 0] = 3.0


def test_round_trip_is_exact(tmp_path, mono_data):
    write_csv(mono_data, tmp_path / "r.csv")
    assert load_csv(tmp_path / "r.csv") == mono_data


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_summary_ignores_row_order(seed):
    rng = np.random.default_rng(seed)
    n = 40
    z = np.r_[1, 0, rng.integers(0, 2, n - 2)]
    s = rng.integers(0, 2, n)
    d = build(z, s, rng.normal(size=n), rng.normal(size=(n, 2)))
    perm = rng.permutation(n)
    assert summarize(d) == summarize(d.take(perm))
