import numpy as np
import pytest

from twindrop.errors import DataError
from twindrop.evalmetrics import spearman
from twindrop.nn_core import RngStream
from twindrop.twins_ingest import (
    MANIFEST_COLUMNS,
    STANDIN_SCHEMA,
    BiasConfig,
    CohortSchema,
    induce_bias,
    keep_probability,
    load_cohort,
    pc1,
    principal_component,
    standardize,
    write_bias_manifest,
    write_standin_cohort,
)


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


SCHEMA = CohortSchema(treatment="t", outcome="y", covariates=["a", "b"])


def test_load_cohort_drops_incomplete_rows(tmp_path):
    path = tmp_path / "c.csv"
    write_csv(path, ["t", "y", "a", "b"],
              [[0, 1.0, 1.0, 2.0], [1, 2.0, "", 3.0], [1, 0.5, 3.0, 4.0]])
    table = load_cohort(path, SCHEMA)
    assert table.n == 2
    assert table.n_dropped_rows == 1


def test_load_cohort_standardizes_population_sd(tmp_path):
    path = tmp_path / "c.csv"
    write_csv(path, ["t", "y", "a", "b"],
              [[0, 0.0, 1.0, 5.0], [1, 1.0, 2.0, 6.0], [0, 2.0, 3.0, 7.0]])
    table = load_cohort(path, SCHEMA)
    expected = np.array([-1.2247448713915889, 0.0, 1.2247448713915889])
    assert np.allclose(table.covariates[:, 0], expected, atol=1e-12)
    assert np.allclose(table.covariates[:, 1], expected, atol=1e-12)


def test_load_cohort_drops_constant_columns(tmp_path):
    path = tmp_path / "c.csv"
    write_csv(path, ["t", "y", "a", "b"],
              [[0, 0.0, 1.0, 7.0], [1, 1.0, 2.0, 7.0], [0, 2.0, 3.0, 7.0]])
    with pytest.warns(UserWarning, match="constant"):
        table = load_cohort(path, SCHEMA)
    assert table.column_names == ["a"]
    assert table.dropped_columns == ["b"]
    assert table.covariates.shape == (3, 1)


def test_load_cohort_schema_errors(tmp_path):
    path = tmp_path / "c.csv"
    write_csv(path, ["t", "y", "a"], [[0, 1.0, 2.0]])
    with pytest.raises(DataError, match=r"\bb\b"):
        load_cohort(path, SCHEMA)
    with pytest.raises(DataError):
        load_cohort(tmp_path / "missing.csv", SCHEMA)


def test_standardize_is_idempotent():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.5, (200, 4))
    z, _, _ = standardize(x)
    z2, _, _ = standardize(z)
    assert np.abs(z2 - z).max() < 1e-12


def test_pc1_one_dimensional():
    col = np.array([[-1.5], [0.0], [1.5]])
    direction, scores = pc1(col)
    assert np.allclose(direction, [1.0])
    assert np.allclose(scores, col[:, 0])


def test_pc1_points_on_a_line():
    rng = np.random.default_rng(1)
    x1 = rng.normal(size=500)
    x = np.column_stack([x1, 2.0 * x1])
    direction, scores = pc1(x)
    expected = np.array([1.0, 2.0]) / np.sqrt(5.0)
    assert np.allclose(direction, expected, atol=1e-8)
    assert np.allclose(scores, (x - x.mean(axis=0)) @ expected, atol=1e-8)


def test_pc1_isotropic_cloud_hits_top_eigenvalue():
    rng = np.random.default_rng(2)
    x = rng.normal(0.0, 1.0, (4000, 2))
    direction, _ = pc1(x)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    top = np.linalg.eigvalsh(cov)[-1]
    rayleigh = float(direction @ cov @ direction)
    assert rayleigh >= 0.98 * top


def test_pc1_sign_convention():
    rng = np.random.default_rng(3)
    x1 = rng.normal(size=300)
    x = np.column_stack([-3.0 * x1, x1])
    direction, _ = pc1(x)
    assert direction[np.argmax(np.abs(direction))] > 0


def test_pc1_matches_numpy_eigh_on_random_data():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(500, 6)) @ rng.normal(size=(6, 6))
    direction, scores = pc1(x)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    w, v = np.linalg.eigh(cov)
    lead = v[:, -1]
    if lead[np.argmax(np.abs(lead))] < 0:
        lead = -lead
    assert np.allclose(direction, lead, atol=1e-8)


def test_second_component_is_orthogonal():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(800, 4)) * np.array([3.0, 2.0, 1.0, 0.5])
    d1, _ = principal_component(x, 1)
    d2, _ = principal_component(x, 2)
    assert abs(d1 @ d2) < 1e-6


def test_pc1_variance_dominates_random_directions():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(600, 5)) @ rng.normal(size=(5, 5))
    _, scores = pc1(x)
    centered = x - x.mean(axis=0)
    best = scores.var()
    draws = np.random.default_rng(7).normal(size=(100, 5))
    for d in draws:
        d = d / np.linalg.norm(d)
        assert best >= (centered @ d).var() - 1e-10


def test_keep_probability_limits():
    cfg0 = BiasConfig(bias_strength=0.0, keep_prob_floor=0.02)
    assert np.allclose(keep_probability(np.array([-3.0, 0.0, 3.0]), cfg0), 0.5)
    cfg_floor = BiasConfig(bias_strength=50.0, keep_prob_floor=0.01)
    probs = keep_probability(np.array([5.0, 10.0]), cfg_floor)
    assert np.allclose(probs, 0.01)
    cfg_all = BiasConfig(bias_strength=50.0, keep_prob_floor=1.0)
    assert np.allclose(keep_probability(np.array([-5.0, 5.0]), cfg_all), 1.0)


def standin_table(tmp_path, n=1200, seed=7):
    path = tmp_path / "standin.csv"
    write_standin_cohort(path, n=n, seed=seed)
    return load_cohort(path, STANDIN_SCHEMA)


def test_induce_bias_floor_one_keeps_everything(tmp_path):
    table = standin_table(tmp_path, n=400)
    cfg = BiasConfig(bias_strength=9.0, keep_prob_floor=1.0, seed=1)
    split = induce_bias(table, cfg)
    assert split.train_idx.shape[0] == table.n - split.test_idx.shape[0]
    assert split.test_idx.shape[0] == round(0.2 * table.n)
    assert np.intersect1d(split.train_idx, split.test_idx).size == 0


def test_induce_bias_shifts_kept_scores_down(tmp_path):
    table = standin_table(tmp_path, n=2000)
    cfg = BiasConfig(bias_strength=8.0, keep_prob_floor=0.01, seed=2)
    split = induce_bias(table, cfg)
    assert split.scores[split.train_idx].mean() < split.scores.mean() - 0.3


def test_induce_bias_monotone_keep_rule(tmp_path):
    table = standin_table(tmp_path, n=10_000 // 2)  # pool of ~4000 rows
    cfg = BiasConfig(bias_strength=2.0, keep_prob_floor=0.01, seed=3)
    split = induce_bias(table, cfg)
    pool = np.setdiff1d(np.arange(table.n), split.test_idx)
    rho = spearman(split.scores[pool], split.kept[pool].astype(float))
    assert rho < 0


def test_induce_bias_minimum_rows(tmp_path):
    table = standin_table(tmp_path, n=300)
    cfg = BiasConfig(bias_strength=80.0, keep_prob_floor=0.001, seed=4,
                     min_train_rows=2000)
    with pytest.raises(DataError, match="minimum"):
        induce_bias(table, cfg)


def test_bias_manifest_schema(tmp_path):
    table = standin_table(tmp_path, n=500)
    split = induce_bias(table, BiasConfig(seed=5))
    path = tmp_path / "manifest.csv"
    write_bias_manifest(split, path)
    lines = path.read_text().splitlines()
    assert tuple(lines[0].split(",")) == MANIFEST_COLUMNS
    assert len(lines) == table.n + 1
    kept_col = [int(l.split(",")[1]) for l in lines[1:]]
    assert sum(kept_col) == split.train_idx.shape[0]


def test_standin_cohort_is_deterministic(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    write_standin_cohort(a, n=300, seed=11)
    write_standin_cohort(b, n=300, seed=11)
    assert a.read_bytes() == b.read_bytes()
