from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclet.data import DatasetManifest, ManifestEntry, load_manifest
from cyclet.errors import ConfigError, DataError
from cyclet.models import ModelConfig, build_student
from cyclet.ssda import confidence, curate, curate_predictions, merge, pseudo_label, select
from oracles import pseudo_label_oracle, simplex_grid


def test_confidence_examples():
    assert confidence([0.85, 0.10, 0.05]) == 0.85
    assert abs(confidence([1 / 3] * 3) - 1 / 3) < 1e-15
    assert confidence([0, 1, 0]) == 1.0


@pytest.mark.parametrize("bad", [[0.5, 0.6], [-0.1, 1.1], [], [[0.5, 0.5]]])
def test_confidence_rejects_non_simplex(bad):
    with pytest.raises(ValueError):
        confidence(bad)


def test_pseudo_label_examples():
    assert pseudo_label([0.85, 0.10, 0.05], 0.8) == (0, 0.85)
    assert pseudo_label([0.5, 0.3, 0.2], 0.8) is None
    assert pseudo_label([0.85, 0.10, 0.05], 0.85) == (0, 0.85)


def test_pseudo_label_ties_break_low():
    assert pseudo_label([0.4, 0.4, 0.2], 0.0) == (0, 0.4)
    assert pseudo_label([0.2, 0.4, 0.4], 0.0) == (1, 0.4)


@pytest.mark.parametrize("tau", [-0.01, 1.0 + 1e-9, 2.0])
def test_invalid_tau(tau):
    with pytest.raises(ConfigError):
        pseudo_label([1.0, 0.0], tau)


def test_tau_one_accepts_only_one_hots():
    assert pseudo_label([0.0, 1.0, 0.0], 1.0) == (1, 1.0)
    assert pseudo_label([0.05, 0.95, 0.0], 1.0) is None


def test_grid_oracle_equivalence():
    grid = simplex_grid()
    assert len(grid) == 231
    for tau in (0.0, 0.5, 0.8, 0.85, 0.9, 1.0):
        for vec in grid:
            probs = [float(v) for v in vec]
            want = pseudo_label_oracle(probs, tau)
            got = pseudo_label(probs, tau)
            assert got == want, (vec, tau)


def test_grid_vectorised_select_matches_scalar():
    probs = np.array([[float(v) for v in vec] for vec in simplex_grid()])
    for tau in (0.0, 0.5, 0.85, 1.0):
        mask, labels, conf = select(probs, tau)
        for i, row in enumerate(probs):
            r = pseudo_label(row, tau)
            assert bool(mask[i]) == (r is not None)
            if r is not None:
                assert (labels[i], conf[i]) == r


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=6), st.permutations(range(6)))
def test_permutation_covariance(raw, perm):
    p = np.array(raw) / np.sum(raw)
    perm = [i for i in perm if i < len(p)]
    q = p[perm]
    assert confidence(p) == confidence(q)
    lp, lq = pseudo_label(p, 0.0), pseudo_label(q, 0.0)
    if np.sum(p == p.max()) == 1:
        assert perm[lq[0]] == lp[0]


def _manifest(n, root=Path(".")):
    return DatasetManifest(root, [ManifestEntry(f"u/{i}.ppm", None) for i in range(n)], "val", 3)


def test_monotone_acceptance(rng):
    probs = rng.dirichlet([0.5, 0.5, 0.5], size=300)
    taus = sorted(rng.uniform(0, 1, size=12))
    sets = [set(np.flatnonzero(select(probs, t)[0])) for t in taus]
    for a, b in zip(sets, sets[1:]):
        assert b <= a


def test_curate_predictions_report_and_oracle(rng):
    probs = rng.dirichlet([1, 1, 1], size=100)
    man, rep = curate_predictions(_manifest(100), probs, 0.6, 3)
    want = [i for i, row in enumerate(probs) if pseudo_label_oracle(list(row), 0.6) is not None]
    assert [int(e.path[2:-4]) for e in man.entries] == want
    assert rep.total == 100 and rep.accepted == len(want) == sum(rep.per_class)
    assert all(e.provenance == "pseudo" and e.confidence >= 0.6 for e in man.entries)
    _, rep0 = curate_predictions(_manifest(100), probs, 0.0, 3)
    assert rep0.accepted == 100 and rep0.acceptance_rate == 1.0


def test_curate_empty():
    man, rep = curate_predictions(_manifest(0), np.zeros((0, 3)), 0.8, 3)
    assert len(man) == 0 and rep.total == 0 and rep.accepted == 0


def test_curate_model_idempotent(tiny_dataset_root):
    model = build_student(ModelConfig(num_classes=3, input_side=8, width_multiplier=0.25, hidden_units=8), 0)
    unl = load_manifest(tiny_dataset_root / "val.csv", 3)
    a, ra = curate(model, unl, 0.0, 10)
    b, rb = curate(model, unl, 0.0, 10)
    assert a.entries == b.entries and ra == rb and ra.accepted == len(unl)


def _labeled(n, root=Path(".")):
    return DatasetManifest(root, [ManifestEntry(f"l/{i}.ppm", i % 3) for i in range(n)], "train", 3)


def test_merge_identity_and_count():
    lab = _labeled(4)
    m = merge(lab, _manifest(0))
    assert [(e.path, e.label, e.provenance) for e in m.entries] == [(e.path, e.label, "original") for e in lab.entries]
    pseudo = DatasetManifest(Path("."), [ManifestEntry("u/0.ppm", 2, 0.9, "pseudo")], "pseudo", 3)
    m = merge(lab, pseudo)
    assert len(m) == 5 and m.entries[-1].provenance == "pseudo" and m.entries[-1].path == "u/0.ppm"


def test_merge_errors():
    dup = DatasetManifest(Path("."), [ManifestEntry("l/0.ppm", 1, 0.9, "pseudo")], "pseudo", 3)
    with pytest.raises(DataError):
        merge(_labeled(2), dup)
    other = DatasetManifest(Path("."), [], "pseudo", 5)
    with pytest.raises(DataError):
        merge(_labeled(2), other)
