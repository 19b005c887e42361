import hashlib
import math
import os

import numpy as np
import pytest

from conftest import random_model
from feddd.metrics import (
    CSV_COLUMNS,
    BoundParams,
    RoundRecord,
    bound_terms,
    convergence_bound,
    estimate_sigma,
    estimate_smoothness,
    full_gradient,
    evaluate,
    export,
    measure_epsilon,
    read_rounds_csv,
    t2a,
    time_to_accuracy,
)
from feddd.model import LayeredModel


def _const_model(C, d, cls):
    w = np.zeros((C, d))
    b = np.zeros(C)
    b[cls] = 1.0
    return LayeredModel([w], [b])


def test_evaluate_constant_predictor():
    x = np.zeros((100, 3))
    y = np.repeat(np.arange(10), 10)
    acc, per = evaluate(_const_model(10, 3, 0), x, y, 10)
    assert acc == pytest.approx(0.1)
    assert per == [1.0] + [0.0] * 9


def test_evaluate_perfect_and_absent_class():
    x = np.eye(3)
    y = np.arange(3)
    acc, per = evaluate(LayeredModel([np.eye(4, 3)], [np.zeros(4)]), x, y, 4)
    assert acc == 1.0
    assert per[:3] == [1.0, 1.0, 1.0] and per[3] is None


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(_const_model(2, 1, 0), np.zeros((0, 1)), np.zeros(0, int), 2)


def _records(times, accs):
    cum = np.cumsum(times)
    return [RoundRecord(i + 1, t, c, a, 0.0, 0.0, 0.0, 0.0) for i, (t, c, a) in enumerate(zip(times, cum, accs))]


def test_t2a_examples():
    base = _records([1, 1, 1, 1], [0.2, 0.5, 0.7, 0.9])
    fast = _records([0.5, 0.5, 0.5, 0.5], [0.2, 0.5, 0.7, 0.9])
    never = _records([1, 1], [0.1, 0.2])
    assert t2a(base, base, 0.7) == 1.0
    assert t2a(fast, base, 0.7) == 0.5
    assert t2a(never, base, 0.7) is None
    assert time_to_accuracy(base, 0.95) is None
    with pytest.raises(ValueError):
        t2a(base, never, 0.7)


def test_epsilon_zero_with_full_masks(rng):
    vals = [rng.standard_normal(10) for _ in range(4)]
    assert measure_epsilon(vals, [np.ones(10)] * 4) == 0.0


def test_epsilon_single_client_energy_split():
    w = np.array([3.0, -1.0, 2.0, 0.5])
    m = np.array([1.0, 0.0, 1.0, 0.0])
    e_out, e_total = 1.0 + 0.25, 9.0 + 1.0 + 4.0 + 0.25
    assert abs(measure_epsilon([w], [m]) - e_out / e_total) < 1e-12


def test_epsilon_degenerate():
    assert math.isnan(measure_epsilon([np.ones(3)], [np.zeros(3)]))
    assert math.isnan(measure_epsilon([np.zeros(3)], [np.ones(3)]))
    with pytest.raises(ValueError):
        measure_epsilon([], [])


def test_epsilon_nonnegative(rng):
    for _ in range(50):
        vals = [rng.standard_normal(6) for _ in range(3)]
        masks = [(rng.random(6) < 0.6).astype(float) for _ in range(3)]
        eps = measure_epsilon(vals, masks)
        assert math.isnan(eps) or eps >= 0.0


def _draw_params(rng, eps=None, h=1, T=60):
    L = rng.uniform(0.5, 20)
    e = rng.uniform(0.01, 1) if eps is None else eps
    p = BoundParams(L, e, 1.0, h, T // h, rng.uniform(0.1, 2, 5), rng.uniform(0.1, 5))
    p.lr = rng.uniform(0.05, 0.95) * p.max_lr
    return p


def test_bound_eps_zero_first_term_only(rng):
    p = _draw_params(rng, eps=0.0)
    first, second, third = bound_terms(p)
    assert second == 0.0 and third == 0.0
    expected = 2 * p.init_gap / (p.n_periods * p.period * (2 * p.lr - p.smoothness * p.lr**2))
    assert convergence_bound(p) == pytest.approx(expected, rel=1e-14)


def test_bound_vanishes_with_k(rng):
    p = _draw_params(rng, eps=0.0)
    values = []
    for K in (1, 10, 100, 1000, 10000):
        p.n_periods = K
        values.append(convergence_bound(p))
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-3 * values[0]


def test_bound_increasing_in_h_at_fixed_horizon(rng):
    for _ in range(50):
        p = _draw_params(rng, h=1)
        values = []
        for h in (1, 2, 3, 4, 5, 6):
            p.period, p.n_periods = h, 60 // h
            values.append(convergence_bound(p))
        assert all(a < b for a, b in zip(values, values[1:]))


def test_bound_increasing_in_sigma(rng):
    p = _draw_params(rng)
    before = convergence_bound(p)
    p.sigma = p.sigma.copy()
    p.sigma[2] *= 1.5
    assert convergence_bound(p) > before


def test_bound_step_size_domain():
    p = BoundParams(10.0, 0.5, 1.0, 5, 10, np.ones(3), 1.0)
    with pytest.raises(ValueError):
        convergence_bound(p)
    with pytest.raises(ValueError):
        BoundParams(1.0, 1.5, 0.1, 1, 1, np.ones(1), 1.0)


def _client(seed, cls, n=8, d=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)), np.full(n, cls)


def test_sigma_identical_clients():
    x, y = _client(0, 1)
    y = np.arange(8) % 3
    m = random_model((3, 4, 3), 0)
    assert np.allclose(estimate_sigma(m, [(x, y)] * 3), 0.0, atol=1e-15)


def test_sigma_disjoint_clients():
    m = random_model((3, 4, 3), 0)
    assert np.all(estimate_sigma(m, [_client(0, 0), _client(1, 2)]) > 0)


def test_sigma_duplication_invariant():
    m = random_model((3, 4, 3), 0)
    a, b = _client(0, 0), _client(1, 2)

    def dup(c):
        return np.vstack([c[0], c[0]]), np.concatenate([c[1], c[1]])

    # the client's own full-batch gradient does not see the duplication
    assert np.allclose(full_gradient(m, *dup(a)), full_gradient(m, *a), rtol=1e-12, atol=1e-15)
    # with every client duplicated the weighted mean is unchanged too
    assert estimate_sigma(m, [dup(a), dup(b)]) == pytest.approx(estimate_sigma(m, [a, b]), rel=1e-12)


def test_smoothness_positive():
    data = [_client(0, 0), _client(1, 1)]
    models = [random_model((3, 4, 3), s, 0.5) for s in range(3)]
    assert estimate_smoothness(models, data) > 0


def _sample_records(n=3):
    rs = []
    for t in range(1, n + 1):
        rs.append(RoundRecord(t, 0.1 * t, 0.1 * t * (t + 1) / 2, 0.5 + 0.01 * t, 1 / 3, float("nan") if t == 1 else 1e-17,
                              12345.0, 0.4, per_class_acc=[0.5, None], dropout=[0.4, 0.4]))
    return rs


def test_export_round_trip(tmp_path):
    recs = _sample_records()
    csv_path, json_path = export(recs, tmp_path / "out", {"seed": 1})
    lines = csv_path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) == "round,t_server_s,cum_time_s,test_acc,mean_loss,eps_t,uploaded_bits,mean_D"
    assert len(lines) == 4
    back = read_rounds_csv(csv_path)
    for r, row in zip(recs, back):
        for col in CSV_COLUMNS:
            a, b = getattr(r, col), row[col]
            assert (math.isnan(a) and math.isnan(b)) or a == b
    assert '"seed": 1' in json_path.read_text()


def test_export_identical_hash(tmp_path):
    a, _ = export(_sample_records(), tmp_path / "a")
    b, _ = export(_sample_records(), tmp_path / "b")
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()


def test_export_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match=str(blocker)):
        export(_sample_records(), blocker / "sub")
