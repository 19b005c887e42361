import numpy as np
import pytest

from feddd.allocation import AllocInstance, ClientProfile, build_instance, regularizer, vertex_oracle
from feddd.model import SubModelSpec
from feddd.orchestrator import (
    ExperimentConfig,
    RoundError,
    Simulation,
    _int_seed,
    _TRAIN,
    oort_utility,
    run,
    scheme_fedcs,
    scheme_feddd,
    scheme_oort,
)
from feddd.trainer import TrainConfig, local_train


def profile(t_cmp=0.1, bits=100.0, n_samples=10, up=100.0, down=400.0, dis=None):
    dis = np.full(10, 0.1) if dis is None else dis
    return ClientProfile(cpu_hz=1.0, cycles_per_sample=t_cmp, samples_per_round=1.0, model_bits=bits,
                         n_samples=n_samples, dis=dis, uplink_rate=up, downlink_rate=down)


def small(**kw) -> ExperimentConfig:
    base = dict(n_clients=5, rounds=6, hidden=(8, 6), dataset={"per_class": 40, "test_per_class": 20, "dim": 6})
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def test_table_v_defaults():
    cfg = ExperimentConfig()
    assert (cfg.d_max, cfg.a_server, cfg.period) == (0.8, 0.6, 5)
    assert cfg.timing.uplink_rate == (1e4, 5e4) and cfg.timing.downlink_rate == (4e4, 20e4)
    assert cfg.timing.cpu_hz == (1e9, 10e9) and cfg.timing.cycles_per_sample == (1e6, 10e6)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"roundz": 3})
    with pytest.raises(ValueError):
        ExperimentConfig(scheme="fedprox")


def test_fedcs_examples():
    ps = [profile(t_cmp=t) for t in (0.4, 0.1, 0.3, 0.2)]
    assert scheme_fedcs(ps, 1.0).participate.all()
    assert scheme_fedcs(ps[:2], 0.5).participate.tolist() == [False, True]
    assert scheme_fedcs(ps, 0.6).participate.tolist() == [False, True, False, True]


def test_fedcs_empty_round():
    with pytest.raises(ValueError):
        scheme_fedcs([profile(bits=100.0), profile(bits=100.0)], 0.3)


def test_oort_identical_clients():
    ps = [profile() for _ in range(4)]
    dec = scheme_oort(ps, np.ones(4), 0.6)
    assert dec.participate.tolist() == [True, True, False, False]


def test_oort_alpha_zero_is_statistical():
    ps = [profile(t_cmp=t, n_samples=m) for t, m in ((5.0, 10), (0.1, 10), (0.1, 30), (9.0, 20))]
    losses = np.array([1.0, 0.5, 0.2, 0.4])
    util = oort_utility(ps, losses, alpha=0.0)
    assert util.tolist() == pytest.approx([10.0, 5.0, 6.0, 8.0])
    dec = scheme_oort(ps, losses, 0.5, alpha=0.0)
    assert dec.participate.tolist() == [True, False, False, True]


def test_oort_loss_monotone():
    ps = [profile(t_cmp=t) for t in (0.1, 0.2, 3.0, 0.4)]
    losses = np.array([0.3, 0.6, 0.5, 0.2])
    base = oort_utility(ps, losses, alpha=0.0)
    bumped = losses.copy()
    bumped[2] *= 2
    after = oort_utility(ps, bumped, alpha=0.0)
    assert after[2] == pytest.approx(2 * base[2])
    assert np.argsort(-after).tolist().index(2) <= np.argsort(-base).tolist().index(2)


def test_oort_straggler_penalty():
    ps = [profile(t_cmp=t) for t in (1.0, 1.0, 1.0, 10.0)]
    util = oort_utility(ps, np.ones(4), alpha=2.0)
    slow = ps[3].round_time(0.0)
    pref = ps[0].round_time(0.0)
    assert util[3] == pytest.approx(10 * (pref / slow) ** 2)
    assert util[:3].tolist() == [10.0] * 3


def _feddd(ps, losses, t, delta, a=0.6):
    return scheme_feddd(ps, losses, t, num_classes=10, global_bits=100.0, a_server=a, d_max=0.8, delta=delta)


def test_feddd_round_one_zero():
    dec, plan = _feddd([profile(), profile()], np.ones(2), 1, 1.0)
    assert plan is None and dec.dropout.tolist() == [0.0, 0.0] and dec.participate.all()


def test_feddd_homogeneous_uniform():
    dec, _ = _feddd([profile() for _ in range(4)], np.ones(4), 2, 0.0)
    assert np.allclose(dec.dropout, 0.4, atol=1e-9)


def test_feddd_zero_loss_client_dropped_most():
    ps = [profile(t_cmp=0.5, up=200), profile(t_cmp=0.2, up=100), profile(t_cmp=0.3, up=150)]
    losses = np.array([1.0, 0.0, 1.2])
    dec, plan = _feddd(ps, losses, 3, delta=50.0)
    weights = [regularizer(p, l, 10, 30, 100.0) for p, l in zip(ps, losses)]
    ref = vertex_oracle(build_instance(ps, weights, 50.0, 0.6, 0.8))
    assert plan.objective == pytest.approx(ref.objective, rel=1e-9)
    assert dec.dropout[1] == pytest.approx(0.8)
    assert dec.participate.all()


def test_run_deterministic():
    a, b = run(small()), run(small())
    assert [r.row() for r in a.records] == [r.row() for r in b.records]
    assert a.model.array_equal(b.model)


def test_fedavg_single_client_is_centralised_sgd():
    cfg = small(scheme="fedavg", n_clients=1, partition="iid", rounds=4)
    sim = Simulation(cfg)
    x, y = sim.client_data[0]
    ref = sim.model.copy()
    for t in range(1, 5):
        ref = local_train(ref, x, y, TrainConfig(cfg.lr, cfg.epochs, cfg.batch_size, _int_seed(cfg.seed, _TRAIN, 0, t))).model
        sim.step(t)
        assert sim.model.array_equal(ref)


def test_feddd_full_budget_matches_fedavg():
    a = run(small(scheme="feddd", a_server=1.0, rounds=8))
    b = run(small(scheme="fedavg", a_server=1.0, rounds=8))
    assert all(r.mean_D == 0.0 or r.mean_D < 1e-12 for r in a.records)
    assert a.model.array_equal(b.model)
    assert [r.test_acc for r in a.records] == [r.test_acc for r in b.records]


@pytest.mark.parametrize("scheme", ["feddd", "fedavg", "fedcs", "oort"])
def test_budget_parity_and_round_time(scheme):
    cfg = small(scheme=scheme, rounds=7)
    sim = Simulation(cfg)
    total = sum(p.n_params for p in sim.profiles)
    slack = cfg.n_clients * sum(s.group_size for s in sim.model.shapes[:-1])
    for t in range(1, cfg.rounds + 1):
        rec = sim.step(t)
        uploaded = rec.uploaded_bits / cfg.bits_per_param
        if scheme != "fedavg" and t > 1:
            assert uploaded <= cfg.a_server * total + slack
        times = [sim.profiles[n].round_time(rec.dropout[n]) for n in rec.participants]
        assert rec.t_server_s == max(times)
        if scheme == "feddd":
            assert rec.participants == list(range(cfg.n_clients))


def test_feddd_first_round_full_then_sparse():
    res = run(small(rounds=3))
    assert res.records[0].mean_D == 0.0
    assert res.records[1].mean_D == pytest.approx(0.4)
    assert all(np.isfinite(r.eps_t) for r in res.records[1:])
    assert res.records[0].eps_t == 0.0


def test_heterogeneous_submodels():
    res = run(small(submodels=[[8, 6], [4, 3], [2, 2]], rounds=4))
    assert len(res.records) == 4 and 0 <= res.records[-1].test_acc <= 1


@pytest.mark.parametrize("strategy", ["random", "max", "delta", "ordered"])
def test_selection_variants_run(strategy):
    res = run(small(selection=strategy, rounds=3))
    assert res.records[-1].mean_D > 0


def test_shannon_timing_mode():
    res = run(small(timing={"mode": "shannon"}, rounds=2))
    assert res.records[-1].t_server_s > 0


def test_cumulative_time_nondecreasing():
    res = run(small(scheme="oort", rounds=5))
    cum = [r.cum_time_s for r in res.records]
    assert all(a <= b for a, b in zip(cum, cum[1:]))


def test_round_error_carries_context():
    with pytest.raises(RoundError) as err:
        run(small(lr=1e200, rounds=2, dataset={"per_class": 40, "test_per_class": 20, "dim": 6, "noise": 1e150}))
    assert err.value.round_idx == 1 and err.value.client is not None
