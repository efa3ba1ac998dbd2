import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from isomix.data import (
    ConcentrationTable, ConsumerDataset, DataError, DegenerateCovarianceWarning, SourceSamples,
    SourceSummary, TefSamples, TefSummary, empirical_bayes_summarize, isospace_check, load_concentrations,
    load_consumers, load_source_summary, load_sources, load_tefs, write_consumers, write_samples,
    write_summary,
)
from isomix.simulate import geese_summaries, simulate_source_samples


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.mark.filterwarnings("ignore::isomix.data.DegenerateCovarianceWarning")
def test_summarize_two_points():
    s = SourceSamples(("a", "b"), ("d13C", "d15N"),
                      {"a": np.array([[0.0, 0.0], [2.0, 2.0]]), "b": np.array([[1.0, 0.0], [0.0, 1.0]])})
    out = empirical_bayes_summarize(s)
    np.testing.assert_allclose(out.mean[0], [1, 1])
    np.testing.assert_allclose(out.cov[0], [[2, 2], [2, 2]])


def test_summarize_constant_warns():
    s = SourceSamples(("a", "b"), ("x1", "x2"), {"a": np.full((3, 2), 5.0), "b": np.eye(2)})
    with pytest.warns(DegenerateCovarianceWarning):
        out = empirical_bayes_summarize(s)
    np.testing.assert_array_equal(out.mean[0], [5, 5])
    np.testing.assert_array_equal(out.cov[0], np.zeros((2, 2)))


@pytest.mark.parametrize("rows, msg", [(np.empty((0, 2)), "missing source"),
                                       (np.ones((1, 2)), "insufficient samples")])
def test_summarize_errors(rows, msg):
    s = SourceSamples(("a", "b"), ("x1", "x2"), {"a": rows, "b": np.eye(2)})
    with pytest.raises(DataError, match=msg):
        empirical_bayes_summarize(s)


def test_direct_tef_passthrough():
    t = TefSamples(("a", "b"), ("x",), {}, {"a": (np.array([1.0]), np.array([[2.0]])),
                                          "b": (np.array([0.0]), np.array([[1.0]]))})
    out = empirical_bayes_summarize(t)
    assert isinstance(out, TefSummary)
    assert out.cov[0, 0, 0] == 2.0


@pytest.mark.filterwarnings("ignore::isomix.data.DegenerateCovarianceWarning")
@settings(max_examples=30)
@given(arrays(float, (6, 2), elements=st.floats(-50, 50)), st.randoms())
def test_summary_order_invariant(x, rnd):
    idx = list(range(6))
    rnd.shuffle(idx)
    a = empirical_bayes_summarize(SourceSamples(("a", "b"), ("x1", "x2"), {"a": x, "b": x[::-1]}))
    b = empirical_bayes_summarize(SourceSamples(("a", "b"), ("x1", "x2"), {"a": x[idx], "b": x}))
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-9)


def test_geese_sample_table_shape(tmp_path):
    src, _ = geese_summaries()
    samples = simulate_source_samples(src, 400, np.random.default_rng(0))
    write_samples(tmp_path / "s.csv", samples)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = empirical_bayes_summarize(load_sources(tmp_path / "s.csv"))
    assert out.names == ("Enteromorpha", "Grass", "Ulva", "Zostera")
    assert out.mean.shape == (4, 2) and out.cov.shape == (4, 2, 2)
    np.testing.assert_allclose(out.mean[3], [-11.17, 6.45], atol=0.25)
    np.testing.assert_allclose(out.cov[3], [[1.48, -0.56], [-0.56, 2.16]], atol=0.4)


def test_geese_summary_file(tmp_path):
    src, _ = geese_summaries()
    write_summary(tmp_path / "sum.csv", src)
    back = load_source_summary(tmp_path / "sum.csv")
    np.testing.assert_array_equal(back.mean[3], [-11.17, 6.45])
    np.testing.assert_allclose(back.cov[3], [[1.48, -0.56], [-0.56, 2.16]], rtol=1e-15)


def test_load_geese_consumers(tmp_path):
    rows = "\n".join(f"{-12 - i / 10},{8 + i / 7}" for i in range(9))
    data = load_consumers(write(tmp_path / "c.csv", "d13C,d15N\n" + rows + "\n"))
    assert (data.n, data.J) == (9, 2)
    assert data.isotopes == ("d13C", "d15N")


def test_empty_file_is_error(tmp_path):
    with pytest.raises(DataError, match="empty"):
        load_consumers(write(tmp_path / "c.csv", ""))
    with pytest.raises(DataError):
        load_consumers(write(tmp_path / "h.csv", "d13C,d15N\n"))


def test_extra_column_becomes_covariate(tmp_path, caplog):
    path = write(tmp_path / "c.csv", "d13C,d15N,age,site\n-12,8,1,north\n-13,9,2,south\n")
    with caplog.at_level("INFO"):
        data = load_consumers(path)
    assert data.J == 2
    np.testing.assert_array_equal(data.covariates["age"], [1.0, 2.0])
    assert list(data.covariates["site"]) == ["north", "south"]
    assert "age" in caplog.text and "site" in caplog.text


def test_malformed_row_reports_line(tmp_path):
    with pytest.raises(DataError, match=r"c\.csv:3"):
        load_consumers(write(tmp_path / "c.csv", "d13C,d15N\n-12,8\n-12,oops\n"))
    with pytest.raises(DataError, match=r":3: expected 2 fields"):
        load_consumers(write(tmp_path / "d.csv", "d13C,d15N\n-12,8\n-12\n"))


def test_unknown_source_and_isotope_mismatch(tmp_path):
    path = write(tmp_path / "t.csv", "source,mean_d13C,sd_d13C,mean_d15N,sd_d15N\nA,1,1,2,1\nZ,1,1,2,1\n")
    with pytest.raises(DataError, match=r":3: unknown source label 'Z'"):
        load_tefs(path, sources=("A", "B"))
    with pytest.raises(DataError, match="isotope columns"):
        load_tefs(path, isotopes=("d13C", "d34S"))


def test_tef_direct_format(tmp_path):
    path = write(tmp_path / "t.csv", "source,mean_d13C,sd_d13C,mean_d15N,sd_d15N\nA,1.63,1,3.54,1\nB,1.63,2,3.54,1\n")
    t = load_tefs(path)
    out = empirical_bayes_summarize(t)
    np.testing.assert_allclose(out.cov[1], np.diag([4.0, 1.0]))
    np.testing.assert_allclose(out.mean[0], [1.63, 3.54])


def test_concentrations(tmp_path):
    q = load_concentrations(write(tmp_path / "q.csv", "source,d13C,d15N\nA,0.4,0.1\nB,1,0.2\n"))
    np.testing.assert_array_equal(q.q, [[0.4, 0.1], [1, 0.2]])
    with pytest.raises(DataError):
        load_concentrations(write(tmp_path / "bad.csv", "source,d13C\nA,1.5\nB,1\n"))
    np.testing.assert_array_equal(ConcentrationTable.ones(("a", "b"), ("x",)).q, [[1.0], [1.0]])


def test_round_trip_is_lossless(tmp_path):
    rng = np.random.default_rng(3)
    Y = rng.normal(size=(7, 2)) * 1e3 + 1e-7
    data = ConsumerDataset(Y, ("d13C", "d15N"), {"time": rng.uniform(0, 365, 7), "sex": np.array(list("mfmfmff"),
                                                                                                 dtype=object)})
    write_consumers(tmp_path / "c.csv", data)
    back = load_consumers(tmp_path / "c.csv")
    np.testing.assert_array_equal(back.Y, Y)
    np.testing.assert_array_equal(back.covariates["time"], data.covariates["time"])
    assert list(back.covariates["sex"]) == list(data.covariates["sex"])

    samples = SourceSamples(("a", "b"), ("d13C", "d15N"), {"a": rng.normal(size=(4, 2)) / 3,
                                                           "b": rng.normal(size=(3, 2)) * 7})
    write_samples(tmp_path / "s.csv", samples)
    sb = load_sources(tmp_path / "s.csv")
    for name in ("a", "b"):
        np.testing.assert_array_equal(sb.samples[name], samples.samples[name])


def _report(points):
    src, tef = geese_summaries()
    return isospace_check(ConsumerDataset(np.array(points, dtype=float), src.isotopes), src, tef)


def test_hull_geese_corrected_means():
    rep = _report([[-12.43, 13.36]])
    np.testing.assert_allclose(rep.corrected_means[0], [-12.43, 13.36], atol=1e-12)
    assert rep.inside[0] and rep.distance[0] == 0


def test_hull_inside_and_outside():
    rep = _report([[1000.0, 1000.0], [-14.0, 10.0]])
    assert not rep.inside[0] and rep.distance[0] > 0
    assert rep.inside[1]


@settings(max_examples=30)
@given(st.floats(-100, 100), st.floats(-100, 100))
def test_hull_shift_invariance(dx, dy):
    src, tef = geese_summaries()
    pts = np.array([[-14.0, 10.0], [-40.0, 0.0], [-10.5, 10.0], [-25.0, 12.0]])
    base = isospace_check(ConsumerDataset(pts, src.isotopes), src, tef)
    shift = np.array([dx, dy])
    moved = SourceSummary(src.names, src.isotopes, src.mean + shift, src.cov)
    rep = isospace_check(ConsumerDataset(pts + shift, src.isotopes), moved, tef)
    np.testing.assert_array_equal(rep.inside, base.inside)
    np.testing.assert_allclose(rep.distance, base.distance, atol=1e-9)


def test_hull_not_computed_for_three_isotopes():
    names = ("a", "b", "c")
    iso = ("d13C", "d15N", "d34S")
    src = SourceSummary(names, iso, np.eye(3), np.tile(np.eye(3), (3, 1, 1)))
    tef = TefSummary(names, iso, np.zeros((3, 3)), np.tile(np.eye(3), (3, 1, 1)))
    rep = isospace_check(ConsumerDataset(np.zeros((2, 3)), iso), src, tef)
    assert not rep.computed and "not computed" in rep.message


def test_time_indexed_summary_interpolates():
    names, iso = ("a", "b"), ("x1", "x2")
    times = np.array([0.0, 10.0])
    mean = np.array([[[0.0, 0.0], [1.0, 1.0]], [[10.0, 20.0], [1.0, 1.0]]])
    cov = np.array([[np.eye(2), np.eye(2)], [np.eye(2) * np.e ** 2, np.eye(2)]])
    s = SourceSummary(names, iso, mean, cov, times=times)
    mu, cv = s.at([5.0])
    np.testing.assert_allclose(mu[0, 0], [5.0, 10.0])
    np.testing.assert_allclose(cv[0, 0], np.eye(2) * np.e, rtol=1e-12)
    with pytest.raises(DataError):
        s.at([11.0])
