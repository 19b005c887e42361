"""Round loop for FedDD and the FedAvg / FedCS / Oort baselines."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import aggregation, allocation, selection
from .data import LabeledDataset, distribution_score, gen_synthetic, load_idx, partition
from .metrics import RoundRecord, evaluate, export, measure_epsilon, estimate_sigma
from .model import (
    LayeredModel,
    SubModelSpec,
    UnitMask,
    embed,
    extract,
    param_count,
    unit_mask_to_param_mask,
)
from .trainer import TrainConfig, forward, init_model, local_train

log = logging.getLogger(__name__)

SCHEMES = ("feddd", "fedavg", "fedcs", "oort")

# Stream tags for derived RNG seeds.
_DATA, _TEST, _PART, _PROFILE, _INIT, _TRAIN, _SELECT = range(7)


class RoundError(RuntimeError):
    def __init__(self, round_idx: int, client: int | None, cause: Exception):
        where = f"round {round_idx}" + ("" if client is None else f", client {client}")
        super().__init__(f"{where}: {cause}")
        self.round_idx = round_idx
        self.client = client
        self.cause = cause


def _seed(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) for p in parts])


def _int_seed(*parts: int) -> int:
    return int(_seed(*parts).generate_state(1)[0])


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 10
    dim: int = 20
    per_class: int = 300
    test_per_class: int = 200
    noise: float = 0.3
    center_seed: int = 0
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class TimingConfig:
    """Ranges for per-client system parameters (uniform draws)."""

    mode: str = "direct"  # "direct" rates or "shannon" channel model
    uplink_rate: tuple[float, float] = (1e4, 5e4)
    downlink_rate: tuple[float, float] = (4e4, 20e4)
    cpu_hz: tuple[float, float] = (1e9, 10e9)
    cycles_per_sample: tuple[float, float] = (1e6, 10e6)
    uplink_bw: tuple[float, float] = (1e4, 2e4)
    downlink_bw: tuple[float, float] = (2e4, 5e4)
    uplink_power: float = 0.2
    server_power: float = 1.0
    channel_gain: tuple[float, float] = (1e-8, 1e-6)
    noise: float = 1e-9


@dataclass
class ExperimentConfig:
    scheme: str = "feddd"
    selection: str = "feddd"
    n_clients: int = 20
    rounds: int = 100
    period: int = 5
    a_server: float = 0.6
    d_max: float = 0.8
    delta: float = 1.0
    lr: float = 0.3
    epochs: int = 1
    batch_size: int = 32
    partition: str = "noniid_b"
    n_common: int | None = None
    hidden: tuple[int, ...] = (32, 16)
    submodels: list[tuple[int, ...]] | None = None
    bits_per_param: int = 32
    oort_alpha: float = 2.0
    equal_weights: bool = False
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    timing: TimingConfig = field(default_factory=TimingConfig)

    def __post_init__(self) -> None:
        if isinstance(self.dataset, dict):
            self.dataset = DatasetConfig(**self.dataset)
        if isinstance(self.timing, dict):
            raw = {k: tuple(v) if isinstance(v, list) else v for k, v in self.timing.items()}
            self.timing = TimingConfig(**raw)
        self.hidden = tuple(self.hidden)
        if self.submodels is not None:
            self.submodels = [tuple(s) for s in self.submodels]
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.selection not in selection.STRATEGIES:
            raise ValueError(f"unknown selection strategy {self.selection!r}")
        if self.n_clients < 1 or self.rounds < 1 or self.period < 1:
            raise ValueError("n_clients, rounds and period must be >= 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.dataset.dim, *self.hidden, self.dataset.num_classes)


@dataclass
class SchemeDecision:
    participate: np.ndarray  # bool per client
    dropout: np.ndarray  # continuous D per client
    strategy: str = "feddd"


def scheme_fedavg(profiles: Sequence[allocation.ClientProfile]) -> SchemeDecision:
    n = len(profiles)
    return SchemeDecision(np.ones(n, dtype=bool), np.zeros(n), "ordered")


def _admit_within_budget(order: Sequence[int], sizes: np.ndarray, a_server: float) -> np.ndarray:
    budget = a_server * sizes.sum()
    admitted = np.zeros(sizes.size, dtype=bool)
    used = 0.0
    for n in order:
        if used + sizes[n] > budget * (1 + 1e-12):
            break
        admitted[n] = True
        used += sizes[n]
    if not admitted.any():
        raise ValueError(f"budget A_server={a_server} admits no client")
    return admitted


def scheme_fedcs(profiles: Sequence[allocation.ClientProfile], a_server: float) -> SchemeDecision:
    """Admit the fastest clients (full-model round time) until the upload budget is spent."""
    times = np.array([p.round_time(0.0) for p in profiles])
    sizes = np.array([p.model_bits for p in profiles])
    order = np.argsort(times, kind="stable")
    admitted = _admit_within_budget(order, sizes, a_server)
    return SchemeDecision(admitted, np.zeros(len(profiles)), "ordered")


def oort_utility(
    profiles: Sequence[allocation.ClientProfile],
    losses: np.ndarray,
    alpha: float,
    preferred_time: float | None = None,
) -> np.ndarray:
    """Statistical utility ``m_n * loss_n`` with a multiplicative straggler penalty."""
    if alpha < 0:
        raise ValueError("straggler penalty must be non-negative")
    times = np.array([p.round_time(0.0) for p in profiles])
    if preferred_time is None:
        preferred_time = float(np.median(times))
    stat = np.array([p.n_samples for p in profiles]) * np.asarray(losses, dtype=np.float64)
    penalty = np.where(times > preferred_time, (preferred_time / times) ** alpha, 1.0)
    return stat * penalty


def scheme_oort(
    profiles: Sequence[allocation.ClientProfile],
    losses: np.ndarray,
    a_server: float,
    alpha: float = 2.0,
    preferred_time: float | None = None,
) -> SchemeDecision:
    util = oort_utility(profiles, losses, alpha, preferred_time)
    order = np.lexsort((np.arange(util.size), -util))
    sizes = np.array([p.model_bits for p in profiles])
    admitted = _admit_within_budget(order, sizes, a_server)
    return SchemeDecision(admitted, np.zeros(len(profiles)), "ordered")


def scheme_feddd(
    profiles: Sequence[allocation.ClientProfile],
    losses: np.ndarray | None,
    round_idx: int,
    *,
    num_classes: int,
    global_bits: float,
    a_server: float,
    d_max: float,
    delta: float,
    strategy: str = "feddd",
) -> tuple[SchemeDecision, allocation.DropoutPlan | None]:
    """Every client participates; round 1 uses zero dropout, later rounds solve the allocation LP."""
    n = len(profiles)
    if round_idx <= 1 or losses is None:
        return SchemeDecision(np.ones(n, dtype=bool), np.zeros(n), strategy), None
    total = sum(p.n_samples for p in profiles)
    weights = [
        allocation.regularizer(p, float(l), num_classes, total, global_bits)
        for p, l in zip(profiles, losses)
    ]
    inst = allocation.build_instance(profiles, weights, delta, a_server, d_max)
    plan = allocation.solve_allocation(inst)
    return SchemeDecision(np.ones(n, dtype=bool), plan.dropout, strategy), plan


def make_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.dataset
    if d.kind == "synthetic":
        train = gen_synthetic(d.num_classes, d.dim, d.per_class, _int_seed(cfg.seed, _DATA), d.noise, d.center_seed)
        test = gen_synthetic(d.num_classes, d.dim, d.test_per_class, _int_seed(cfg.seed, _TEST), d.noise, d.center_seed)
        return train, test
    if d.kind == "idx":
        train = load_idx(d.train_images, d.train_labels, d.num_classes)
        test = load_idx(d.test_images, d.test_labels, d.num_classes)
        return train, test
    raise ValueError(f"unknown dataset kind {d.kind!r}")


def make_profiles(
    cfg: ExperimentConfig,
    sizes: Sequence[int],
    dis: np.ndarray,
    specs: Sequence[SubModelSpec],
) -> list[allocation.ClientProfile]:
    rng = np.random.default_rng(_seed(cfg.seed, _PROFILE))
    t = cfg.timing
    profiles = []
    for n, (m, spec) in enumerate(zip(sizes, specs)):
        n_params = param_count(spec, cfg.dims)
        common = dict(
            cpu_hz=rng.uniform(*t.cpu_hz),
            cycles_per_sample=rng.uniform(*t.cycles_per_sample),
            samples_per_round=float(m * cfg.epochs),
            model_bits=float(n_params * cfg.bits_per_param),
            n_samples=int(m),
            dis=dis[n],
            spec=spec,
            n_params=n_params,
        )
        if t.mode == "direct":
            p = allocation.ClientProfile(
                **common, uplink_rate=rng.uniform(*t.uplink_rate), downlink_rate=rng.uniform(*t.downlink_rate)
            )
        elif t.mode == "shannon":
            p = allocation.ClientProfile(
                **common,
                uplink_bw=rng.uniform(*t.uplink_bw),
                downlink_bw=rng.uniform(*t.downlink_bw),
                uplink_power=t.uplink_power,
                server_power=t.server_power,
                channel_gain=rng.uniform(*t.channel_gain),
                noise=t.noise,
            )
        else:
            raise ValueError(f"unknown timing mode {t.mode!r}")
        profiles.append(p)
    return profiles


@dataclass
class RunResult:
    records: list[RoundRecord]
    model: LayeredModel
    summary: dict


class Simulation:
    """One experiment; not re-entrant."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.train, self.test = make_datasets(cfg)
        if self.train.dim != cfg.dataset.dim:
            raise ValueError(f"dataset has dim {self.train.dim}, config says {cfg.dataset.dim}")
        self.part = partition(
            self.train, cfg.n_clients, cfg.partition, _int_seed(cfg.seed, _PART), n_common=cfg.n_common
        )
        self.client_data = [(self.train.x[ix], self.train.y[ix]) for ix in self.part.indices]
        if cfg.submodels:
            families = [SubModelSpec(tuple(s)) for s in cfg.submodels]
            self.specs = [families[n % len(families)] for n in range(cfg.n_clients)]
        else:
            self.specs = [SubModelSpec.full(cfg.dims)] * cfg.n_clients
        self.profiles = make_profiles(cfg, self.part.sizes, self.part.proportions, self.specs)
        self.coverage = selection.coverage_table(self.specs, cfg.dims)
        self.heterogeneous = any(s != SubModelSpec.full(cfg.dims) for s in self.specs)
        self.global_bits = float(param_count(SubModelSpec.full(cfg.dims), cfg.dims) * cfg.bits_per_param)
        self.policy = aggregation.BroadcastPolicy(cfg.period)
        self.model = init_model(cfg.dims, _int_seed(cfg.seed, _INIT))
        self.local = [extract(self.model, s, cfg.dims) for s in self.specs]
        # Last reported loss per client; before any report, the initial model's loss.
        self.losses = np.array([forward(w, x, y)[1] for w, (x, y) in zip(self.local, self.client_data)])
        self.next_dropout: np.ndarray | None = None
        self.preferred_time = float(np.median([p.round_time(0.0) for p in self.profiles]))
        self.records: list[RoundRecord] = []
        self.cum_time = 0.0

    def decide(self, t: int) -> SchemeDecision:
        cfg = self.cfg
        if cfg.scheme == "fedavg":
            return scheme_fedavg(self.profiles)
        if cfg.scheme == "fedcs":
            return scheme_fedcs(self.profiles, cfg.a_server)
        if cfg.scheme == "oort":
            return scheme_oort(self.profiles, self.losses, cfg.a_server, cfg.oort_alpha, self.preferred_time)
        dropout = np.zeros(cfg.n_clients) if self.next_dropout is None else self.next_dropout
        return SchemeDecision(np.ones(cfg.n_clients, dtype=bool), dropout, cfg.selection)

    def _client_mask(self, n: int, before: LayeredModel, after: LayeredModel, dropout: float, t: int) -> LayeredModel:
        shapes = after.shapes
        if dropout <= 0.0:
            return unit_mask_to_param_mask(UnitMask([None] * len(shapes)), shapes)
        scores = selection.strategy_scores(
            self.cfg.selection,
            before,
            after,
            self.coverage if self.heterogeneous else None,
            seed=_int_seed(self.cfg.seed, _SELECT, n, t),
        )
        rate = selection.hidden_dropout(dropout, after.n_params, shapes[-1].n_params)
        return unit_mask_to_param_mask(selection.select_mask(scores, rate), shapes)

    def step(self, t: int) -> RoundRecord:
        cfg = self.cfg
        decision = self.decide(t)
        participants = [n for n in range(cfg.n_clients) if decision.participate[n]]
        uploads: list[aggregation.Upload] = []
        trained: dict[int, LayeredModel] = {}
        masks: dict[int, LayeredModel] = {}
        round_losses = []
        uploaded_params = 0
        realized = np.zeros(cfg.n_clients)
        # Clients left out by FedCS/Oort would train and discard the result; it
        # changes nothing downstream, so their training is skipped.
        for n in participants:
            x, y = self.client_data[n]
            try:
                res = local_train(
                    self.local[n], x, y,
                    TrainConfig(cfg.lr, cfg.epochs, cfg.batch_size, _int_seed(cfg.seed, _TRAIN, n, t)),
                )
                mask = self._client_mask(n, self.local[n], res.model, float(decision.dropout[n]), t)
            except Exception as exc:  # attach round/client context
                raise RoundError(t, n, exc) from exc
            trained[n], masks[n] = res.model, mask
            self.losses[n] = res.loss
            round_losses.append(res.loss)
            nnz = int(np.count_nonzero(mask.flatten()))
            uploaded_params += nnz
            realized[n] = 1.0 - nnz / self.profiles[n].n_params
            values, occupied = embed(res.model * mask, self.specs[n], cfg.dims)
            gmask, _ = embed(mask, self.specs[n], cfg.dims)
            uploads.append(aggregation.Upload(values, gmask * occupied, self.profiles[n].n_samples))

        previous = self.model
        self.model = aggregation.aggregate(uploads, previous, cfg.equal_weights)

        full_values = [embed(trained[n], self.specs[n], cfg.dims)[0].flatten() for n in participants]
        flat_masks = [u.mask.flatten() for u in uploads]
        eps = measure_epsilon(full_values, flat_masks)
        eps_w = measure_epsilon(full_values, flat_masks, [u.n_samples for u in uploads])

        t_server = max(self.profiles[n].round_time(float(decision.dropout[n])) for n in participants)
        self.cum_time += t_server

        plan = None
        if cfg.scheme == "feddd":
            try:
                _, plan = scheme_feddd(
                    self.profiles, self.losses, t + 1,
                    num_classes=self.train.num_classes, global_bits=self.global_bits,
                    a_server=cfg.a_server, d_max=cfg.d_max, delta=cfg.delta, strategy=cfg.selection,
                )
            except Exception as exc:
                raise RoundError(t, None, exc) from exc
            self.next_dropout = plan.dropout

        download_params = 0
        for n in range(cfg.n_clients):
            sub_global = extract(self.model, self.specs[n], cfg.dims)
            if cfg.scheme == "feddd":
                payload = aggregation.broadcast(sub_global, masks[n], t, self.policy)
                self.local[n] = aggregation.local_update(trained[n], payload, masks[n])
                download_params += payload.n_params
            else:
                self.local[n] = sub_global
                download_params += sub_global.n_params if decision.participate[n] else 0

        acc, per_class = evaluate(self.model, self.test.x, self.test.y, self.test.num_classes)
        record = RoundRecord(
            round=t,
            t_server_s=t_server,
            cum_time_s=self.cum_time,
            test_acc=acc,
            mean_loss=float(np.mean(round_losses)),
            eps_t=eps,
            uploaded_bits=float(uploaded_params * cfg.bits_per_param),
            mean_D=float(np.mean(decision.dropout)),
            per_class_acc=per_class,
            dropout=[float(d) for d in decision.dropout],
            realized_dropout=[float(realized[n]) if decision.participate[n] else 1.0 for n in range(cfg.n_clients)],
            participants=participants,
            eps_weighted=eps_w,
            download_bits=float(download_params * cfg.bits_per_param),
        )
        self.records.append(record)
        log.debug("round %d acc=%.4f t=%.3fs", t, acc, t_server)
        return record

    def run(self) -> RunResult:
        for t in range(1, self.cfg.rounds + 1):
            self.step(t)
        return RunResult(self.records, self.model, self.summary())

    def summary(self) -> dict:
        eps = [r.eps_t for r in self.records if np.isfinite(r.eps_t)]
        sigma = estimate_sigma(self.model, self.client_data)
        return {
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "final_accuracy": self.records[-1].test_acc if self.records else None,
            "cum_time_s": self.cum_time,
            "eps_max": max(eps) if eps else None,
            "sigma_final": sigma.tolist(),
            "client_sizes": self.part.sizes.tolist(),
            "distribution_scores": [
                distribution_score(d, self.train.num_classes) for d in self.part.proportions
            ],
        }


def run(cfg: ExperimentConfig) -> RunResult:
    return Simulation(cfg).run()


def run_and_export(cfg: ExperimentConfig, out_dir: str | Path, targets: Sequence[float] = ()) -> RunResult:
    result = run(cfg)
    summary = dict(result.summary)
    summary["time_to_accuracy"] = {
        str(a): next((r.cum_time_s for r in result.records if r.test_acc >= a), None) for a in targets
    }
    export(result.records, out_dir, summary)
    return result
