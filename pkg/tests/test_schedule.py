import numpy as np
import pytest

from scdmd_lab.schedule import (
    ShortcutTriple,
    TimestepGrid,
    make_grid,
    sample_step_count,
    sample_triple,
    triple_law,
)


def test_shift_one_is_uniform():
    assert make_grid(4, shift=1.0).points == (1.0, 0.75, 0.5, 0.25)


def test_shift_twelve_four_points():
    g = make_grid(4, shift=12.0)
    expect = [12 * u / (1 + 11 * u) for u in (1.0, 0.75, 0.5, 0.25)]
    np.testing.assert_allclose(g.points, expect, rtol=0, atol=1e-15)
    assert g.points[1] == pytest.approx(0.97297, abs=1e-5)
    assert g.points[3] == pytest.approx(0.8, abs=1e-12)
    assert g.K == 4


@pytest.mark.parametrize("n", [1, 2, 3, 8, 17, 64])
@pytest.mark.parametrize("shift", [0.3, 1.0, 3.0, 12.0, 100.0])
def test_grid_monotone_and_pinned(n, shift):
    pts = make_grid(n, shift).as_array()
    assert pts[0] == 1.0
    assert (pts > 0).all() and (np.diff(pts) < 0).all()


def test_grid_domain_errors():
    with pytest.raises(ValueError):
        make_grid(0)
    with pytest.raises(ValueError):
        make_grid(4, shift=0.0)
    with pytest.raises(ValueError):
        TimestepGrid((0.9, 0.5))
    with pytest.raises(ValueError):
        TimestepGrid((1.0, 0.5, 0.5))
    with pytest.raises(ValueError):
        TimestepGrid((1.0, 0.0))


def test_shift_twelve_grids_nest():
    # a convenient coincidence of the defaults, not something the sampler relies on
    assert set(make_grid(4).points) <= set(make_grid(8, kind="training").points)


def test_triple_empty_at_smallest_training_point():
    train, infer = make_grid(8, 1.0, "training"), make_grid(4, 1.0)
    rng = np.random.default_rng(0)
    assert sample_triple(rng, train.points[-1], train, infer) is None


def test_triple_rejects_foreign_start():
    train, infer = make_grid(8, 1.0, "training"), make_grid(4, 1.0)
    with pytest.raises(ValueError):
        sample_triple(np.random.default_rng(0), 0.3, train, infer)


def test_triple_law_matches_enumeration():
    train, infer = make_grid(8, 1.0, "training"), make_grid(4, 1.0)
    law, p_empty = triple_law(1.0, train, infer)
    assert p_empty == 0.0
    expect = {}
    for t_e in (0.75, 0.5, 0.25):
        mids = [t for t in train.points if t_e < t < 1.0]
        for t_m in mids:
            expect[(t_e, t_m)] = (1 / 3) / len(mids)
    assert law.keys() == expect.keys()
    for k in law:
        assert law[k] == pytest.approx(expect[k], abs=1e-15)

    n = 100_000
    rng = np.random.default_rng(1)
    counts = dict.fromkeys(law, 0)
    for _ in range(n):
        tr = sample_triple(rng, 1.0, train, infer)
        counts[(tr.t_e, tr.t_m)] += 1
    for k, p in law.items():
        sd = np.sqrt(n * p * (1 - p))
        assert abs(counts[k] - n * p) <= 3 * sd, (k, counts[k], n * p)


def test_million_triples_are_valid():
    train, infer = make_grid(8, kind="training"), make_grid(4)
    rng = np.random.default_rng(2)
    starts = rng.integers(train.K, size=1_000_000)
    terminal = rng.integers(2, size=1_000_000).astype(bool)
    valid = 0
    for i, term in zip(starts, terminal):
        tr = sample_triple(rng, train.points[i], train, infer, include_terminal=term)
        if tr is None:
            continue
        valid += 1
        assert tr.t_s > tr.t_m > tr.t_e
        assert tr.t_m in train.points
        assert tr.t_e in infer.points or (term and tr.t_e == 0.0)
    assert valid > 500_000


def test_non_nested_grids():
    # uniform-4 inference points are not all on a shifted training grid
    train, infer = make_grid(8, 3.0, "training"), make_grid(4, 1.0)
    assert not set(infer.points) <= set(train.points)
    rng = np.random.default_rng(3)
    for t_s in train.points:
        for _ in range(200):
            tr = sample_triple(rng, t_s, train, infer)
            if tr is not None:
                assert tr.t_s > tr.t_m > tr.t_e and tr.t_e in infer.points


def test_terminal_candidate():
    train, infer = make_grid(8, kind="training"), make_grid(4)
    # only t_e = 0 lies below the last training point, and nothing sits in between
    law, p_empty = triple_law(train.points[-1], train, infer, include_terminal=True)
    assert p_empty == 1.0 and not law
    law, _ = triple_law(train.points[-2], train, infer, include_terminal=True)
    assert (0.0, train.points[-1]) in law


def test_triple_ordering_enforced():
    with pytest.raises(ValueError):
        ShortcutTriple(0.5, 0.6, 0.1)


def test_step_count_sampler():
    rng = np.random.default_rng(4)
    draws = [sample_step_count(rng, (2, 4, 8), (0.2, 0.4, 0.4)) for _ in range(5000)]
    freq = np.mean(np.array(draws) == 2)
    assert abs(freq - 0.2) < 0.03
