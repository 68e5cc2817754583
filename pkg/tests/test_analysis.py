import math
import warnings

import numpy as np
import pytest

from msfemlab.analysis import (
    CSV_COLUMNS,
    compare_configuration,
    coarse_component,
    energy_ratio,
    fit_slope,
    gap_sweep,
    homogenization_check,
    identity_failures,
    identity_report,
    row_dict,
)
from msfemlab.errors import InvalidArgumentError
from msfemlab.fem import CoefficientField, FeFunction, SourceField
from msfemlab.mesh import build_structured_coarse
from msfemlab.offline import run_offline
from msfemlab.solvers import reconstruct


@pytest.fixture(scope="module")
def offline_layered():
    return run_offline(build_structured_coarse(4), CoefficientField.layered(1 / 16, 1.0, 7.0), 4)


def random_coarse(mesh, rng):
    v = np.zeros(mesh.n_vertices)
    v[mesh.interior_vertex_ids] = rng.standard_normal(len(mesh.interior_vertex_ids))
    return FeFunction(mesh, v)


def test_round_trip(periodic, rng):
    mesh = build_structured_coarse(4)
    off = run_offline(mesh, periodic, 4)
    for _ in range(20):
        v = random_coarse(mesh, rng)
        back = coarse_component(reconstruct(v, off.correctors, mesh, off.global_fine), off)
        assert np.abs(back.values - v.values).max() <= 1e-10


def test_round_trip_layered(offline_layered, rng):
    mesh = offline_layered.mesh
    v = random_coarse(mesh, rng)
    back = coarse_component(reconstruct(v, offline_layered.correctors, mesh, offline_layered.global_fine), offline_layered)
    assert np.abs(back.values - v.values).max() <= 1e-10


def test_coarse_component_energy_bound(offline_layered, rng):
    gf = offline_layered.global_fine
    m, M = offline_layered.coeff.bounds
    for _ in range(5):
        v = np.zeros(gf.n_vertices)
        v[gf.interior_vertex_ids] = rng.standard_normal(len(gf.interior_vertex_ids))
        vf = FeFunction(gf, v)
        assert energy_ratio(vf, coarse_component(vf, offline_layered)) <= M / m


def test_coarse_component_of_zero(offline_layered):
    z = coarse_component(FeFunction.zeros(offline_layered.global_fine), offline_layered)
    assert np.all(z.values == 0.0)


def test_coarse_component_rejects_foreign_field(offline_layered):
    with pytest.raises(InvalidArgumentError):
        coarse_component(FeFunction.zeros(build_structured_coarse(4)), offline_layered)


def test_identity_report_constant():
    rep = identity_report(build_structured_coarse(4), CoefficientField.constant_scalar(3.0), 2)
    for key in ("stiffness_galerkin_vs_effective_rel_dev", "stiffness_pg_vs_galerkin_rel_dev", "solution_pg_vs_nonintrusive_max_dev", "expansion_max_dev"):
        assert rep[key] <= 1e-12
    assert identity_failures(rep) == []


@pytest.mark.parametrize(
    "coeff",
    [CoefficientField.paper_periodic(math.pi / 50, 100.0), CoefficientField.layered(1 / 16, 1.0, 4.0)],
    ids=["periodic", "layered"],
)
def test_identity_report_oscillatory(coeff):
    rep = identity_report(build_structured_coarse(4), coeff, 4)
    assert identity_failures(rep) == []
    assert rep["tensor_lower_margin"] >= -1e-8
    assert rep["tensor_upper_margin"] >= -1e-6


def test_identity_failures_detects_violation():
    rep = identity_report(build_structured_coarse(2), CoefficientField.constant_scalar(), 1)
    rep["expansion_max_dev"] = 1.0
    rep["tensor_lower_margin"] = -1.0
    assert set(identity_failures(rep)) == {"expansion_max_dev", "tensor_lower_margin"}


def test_fit_slope():
    H = np.array([0.5, 0.25, 0.125])
    assert fit_slope(H, 3 * H**2) == pytest.approx(2.0, abs=1e-12)
    assert math.isnan(fit_slope(H, [1.0, 0.0, 1.0]))
    assert math.isnan(fit_slope([0.5], [1.0]))


def test_gap_sweep_zero_source():
    coeff = CoefficientField.paper_periodic(1 / 8, 10.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        rep = gap_sweep(coeff, SourceField.constant(0.0), [1 / 4, 1 / 8], 32)
    for row in rep.rows:
        assert row.err_G_vs_ref == row.err_G_vs_PG == row.err_PG_vs_ref == row.err_P1_vs_ref == 0.0
    assert all(math.isnan(s) for s in rep.fitted_slopes.values())


def test_gap_sweep_orders_rows_by_decreasing_H():
    coeff = CoefficientField.paper_periodic(1 / 8, 10.0)
    rep = gap_sweep(coeff, SourceField.paper_source(), [1 / 8, 1 / 4], 32)
    assert rep.H == [0.25, 0.125]
    np.testing.assert_allclose(rep.column("H_over_eps"), [2.0, 1.0])
    assert set(rep.fitted_slopes) == {"err_G_vs_ref", "err_G_vs_PG", "err_PG_vs_ref", "err_P1_vs_ref"}


def test_non_nested_reference_rejected():
    coeff = CoefficientField.paper_periodic(1 / 8, 10.0)
    with pytest.raises(InvalidArgumentError):
        compare_configuration(coeff, SourceField.paper_source(), 4, 2, 48)
    with pytest.raises(InvalidArgumentError):
        gap_sweep(coeff, SourceField.paper_source(), [1 / 3], 32)
    with pytest.raises(InvalidArgumentError):
        gap_sweep(coeff, SourceField.paper_source(), [0.3], 32)


def test_compare_configuration_row():
    coeff = CoefficientField.paper_periodic(1 / 8, 10.0)
    row, sols = compare_configuration(coeff, SourceField.paper_source(), 4, 3, 32)
    d = row_dict(row)
    assert tuple(d) == CSV_COLUMNS
    assert d["H_over_eps"] == pytest.approx(2.0)
    assert all(v >= 0 for v in d.values())
    assert set(sols) >= {"galerkin", "petrov-galerkin", "p1", "reference"}


def test_homogenization_constant_layers():
    rows = homogenization_check(2.0, 2.0, [1 / 16, 1 / 32], n=4)
    for row in rows:
        assert row["max_deviation"] <= 1e-12
        assert row["target_a11"] == row["target_a22"] == 2.0


def test_homogenization_refinement_rule():
    rows = homogenization_check(1.0, 4.0, [1 / 16], n=4)
    assert rows[0]["r"] == 4
    assert (0.25 / 2 ** rows[0]["r"]) <= rows[0]["epsilon"] / 4
