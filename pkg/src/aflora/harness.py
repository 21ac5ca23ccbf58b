"""Federated round loop, client-cost accounting and CSV / JSON reporting.

Config files are JSON objects whose keys mirror :class:`ExperimentConfig`;
``task`` and ``hyper`` are nested objects and ``partition`` is either a
string (``"iid"``, ``"noniid"``, ``"label_skew_2"``) or an object
``{"type": ..., "epsilon": ...}``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import baselines
from .adapter import LoraHyper
from .baselines import HomAdapterUpdate, interference_gap
from .client import ClientState, local_train_full, run_client
from .data import (
    PartitionedDataset, SyntheticTask, generate, partition_iid, partition_label_skew_two,
    partition_noniid,
)
from .linalg import NumericalError, frobenius_norm, random_rows, rng_for
from .model import ToyModel, predict_accuracy
from .server import GlobalState, server_round

METHODS = ("aflora", "classic", "flora", "flexlora", "hetlora")
PARTITIONS = ("iid", "noniid", "label_skew_2")
CSV_HEADER = ["round", "method", "accuracy", "trained_ratio", "comm_ratio", "interference", "mean_r_eff"]
DEFAULT_RANK_CAPS = [64, 32, 16, 16, 8, 8, 4, 4, 4, 4]

# stream tags for rng_for(seed, tag, ...)
_S_BACKBONE, _S_INIT_A, _S_PARTICIPANTS, _S_CLIENT, _S_SERVER = 100, 101, 102, 103, 104


class ConfigError(ValueError):
    pass


@dataclass
class HyperConfig:
    C: float = 1.0
    beta: float = 0.5
    gamma: float = 0.01
    alpha: float = 0.5
    lambda_init: float = 1.0


@dataclass
class ExperimentConfig:
    method: str = "aflora"
    K: int = 10
    rank_caps: list = field(default_factory=lambda: list(DEFAULT_RANK_CAPS))
    rounds: int = 20
    participation: float = 1.0
    partition: str = "iid"
    epsilon: float = 0.5
    task: SyntheticTask = field(default_factory=lambda: SyntheticTask(n=64, num_classes=64, samples_per_class=60))
    hyper: HyperConfig = field(default_factory=HyperConfig)
    local_epochs: int = 1
    lr: float = 0.1
    batch_size: int = 32
    server_lr: float = 0.1
    server_epochs: int = 1
    backbone_scale: float = 1.0
    ddr: bool = True
    keep_one: bool = True
    seed: int = 0
    threads: int = 1
    out: Optional[str] = None
    dump_rounds: Optional[str] = None

    @property
    def m(self) -> int:
        return self.task.num_classes

    @property
    def n(self) -> int:
        return self.task.n

    @property
    def n_participants(self) -> int:
        return max(1, int(round(self.participation * self.K)))

    def lora_hyper(self) -> LoraHyper:
        return LoraHyper(m=self.m, n=self.n, r_max=max(self.rank_caps), **asdict(self.hyper))

    def validate(self) -> "ExperimentConfig":
        def bad(msg):
            raise ConfigError(msg)

        if self.method not in METHODS:
            bad(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.partition not in PARTITIONS:
            bad(f"unknown partition {self.partition!r}; expected one of {', '.join(PARTITIONS)}")
        if self.K < 1:
            bad("K must be at least 1")
        if len(self.rank_caps) != self.K:
            bad(f"rank_caps has {len(self.rank_caps)} entries for K={self.K} clients")
        if any(int(r) != r or r < 1 for r in self.rank_caps):
            bad("rank caps must be positive integers")
        if max(self.rank_caps) > min(self.m, self.n):
            bad(f"largest rank cap {max(self.rank_caps)} exceeds min(m, n) = {min(self.m, self.n)}")
        if not 0.0 < self.participation <= 1.0 or self.participation * self.K < 1 - 1e-12:
            bad(f"participation {self.participation} must be in (0, 1] with participation * K >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            bad("epsilon must lie in [0, 1]")
        for name in ("rounds", "local_epochs", "server_epochs", "seed"):
            if getattr(self, name) < 0:
                bad(f"{name} must be non-negative")
        if self.batch_size < 1 or self.threads < 1:
            bad("batch_size and threads must be positive")
        if self.lr <= 0 or self.server_lr <= 0:
            bad("learning rates must be positive")
        try:
            self.lora_hyper()
        except ValueError as exc:
            bad(f"invalid hyperparameters: {exc}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            if "task" in d:
                d["task"] = SyntheticTask(**d["task"])
            if "hyper" in d:
                d["hyper"] = HyperConfig(**d["hyper"])
            if isinstance(d.get("partition"), dict):
                p = dict(d["partition"])
                d["partition"] = p.pop("type")
                if "epsilon" in p:
                    d["epsilon"] = p.pop("epsilon")
                if p:
                    raise ConfigError(f"unknown partition keys: {', '.join(sorted(p))}")
            if "rank_caps" in d:
                d["rank_caps"] = [int(r) for r in d["rank_caps"]]
            cfg = cls(**d)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cfg.validate()

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"].pop("class_means", None)
        return d


@dataclass
class RoundMetrics:
    round: int
    method: str
    test_accuracy: float
    per_client_r_eff: list
    trained_param_ratio: float
    communicated_param_ratio: float
    interference_fnorm: float = float("nan")
    wall_time: float = 0.0
    participants: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    uploaded_r_eff: list = field(default_factory=list)
    delta_fnorm: float = 0.0

    @property
    def mean_r_eff(self) -> float:
        return float(np.mean(self.uploaded_r_eff)) if self.uploaded_r_eff else 0.0

    def csv_row(self) -> list[str]:
        vals = [self.test_accuracy, self.trained_param_ratio, self.communicated_param_ratio,
                self.interference_fnorm, self.mean_r_eff]
        return [str(self.round), self.method] + [f"{v:.10g}" for v in vals]

    def dump(self) -> dict:
        return {
            "round": self.round,
            "clients": list(self.participants),
            "weights": [float(w) for w in self.weights],
            "r_eff": list(self.uploaded_r_eff),
            "delta_fnorm": self.delta_fnorm,
            "accuracy": self.test_accuracy,
        }


def round_cost(method: str, ranks: Sequence[int], m: int, n: int) -> tuple[float, float]:
    """(trained, communicated) parameters over backbone size, averaged over clients.

    AFLoRA trains B and the gate (m*r + r) and uploads B' (m*r); the baselines
    train and upload both factors ((m + n) * r).
    """
    if len(ranks) == 0:
        return 0.0, 0.0
    r = np.asarray(ranks, dtype=np.float64)
    total = m * n
    if method == "aflora":
        trained = (m * r + r) / total
        comm = m * r / total
    else:
        trained = comm = (m + n) * r / total
    return float(trained.mean()), float(comm.mean())


def cost_ratios(method: str, ranks_per_round: Sequence[Sequence[int]], m: int, n: int) -> tuple[float, float]:
    """Round-averaged (trained, communicated) cost ratios."""
    if len(ranks_per_round) == 0:
        return 0.0, 0.0
    pairs = np.array([round_cost(method, rs, m, n) for rs in ranks_per_round])
    return float(pairs[:, 0].mean()), float(pairs[:, 1].mean())


def make_partition(cfg: ExperimentConfig) -> PartitionedDataset:
    data = generate(cfg.task)
    if cfg.partition == "iid":
        return partition_iid(data, cfg.K, cfg.seed)
    if cfg.partition == "noniid":
        return partition_noniid(data, cfg.K, cfg.epsilon, cfg.seed)
    return partition_label_skew_two(data, cfg.K, cfg.seed)


def make_backbone(cfg: ExperimentConfig) -> np.ndarray:
    rng = rng_for(cfg.seed, _S_BACKBONE)
    return cfg.backbone_scale / math.sqrt(cfg.n) * rng.standard_normal((cfg.m, cfg.n))


def sample_participants(cfg: ExperimentConfig, t: int) -> list[int]:
    rng = rng_for(cfg.seed, _S_PARTICIPANTS, t)
    return sorted(int(k) for k in rng.choice(cfg.K, size=cfg.n_participants, replace=False))


class _Runner:
    """Mutable per-run state shared by the method-specific round functions."""

    def __init__(self, cfg: ExperimentConfig, trace: Optional[Callable[[dict], None]]):
        self.cfg = cfg
        self.trace = trace
        self.parts = make_partition(cfg)
        self.w_base = make_backbone(cfg)
        self.w = self.w_base.copy()          # backbone with every folded update
        self.global_delta = np.zeros_like(self.w_base)  # persistent adapter product (baselines)
        self.hyper = cfg.lora_hyper()
        self.pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
        init_rng = rng_for(cfg.seed, _S_INIT_A)
        if cfg.method == "aflora":
            self.clients = [
                ClientState(id=k, shard=self.parts.shards[k], r_initial=cfg.rank_caps[k], hyper=self.hyper,
                            local_epochs=cfg.local_epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                            keep_one=cfg.keep_one, prune=cfg.ddr)
                for k in range(cfg.K)
            ]
            self.state = GlobalState.initial(self.hyper, init_rng, server_lr=cfg.server_lr,
                                             server_epochs=cfg.server_epochs, batch_size=cfg.batch_size)
        elif cfg.method in ("classic", "hetlora"):
            r = min(cfg.rank_caps) if cfg.method == "classic" else max(cfg.rank_caps)
            self.a_g = random_rows(init_rng, r, cfg.n, self.hyper.C)
            self.b_g = np.zeros((cfg.m, r))

    def ranks(self) -> list[int]:
        if self.cfg.method == "classic":
            return [min(self.cfg.rank_caps)] * self.cfg.K
        if self.cfg.method == "aflora":
            return [c.r_eff for c in self.clients]
        return list(self.cfg.rank_caps)

    def map(self, fn, items):
        if self.pool is None:
            return [fn(x) for x in items]
        return list(self.pool.map(fn, items))

    def accuracy(self) -> float:
        return predict_accuracy(ToyModel(self.w), self.global_delta, self.parts.test_split.batch)

    # each round function returns (uploaded ranks, weights, delta fnorm, interference)

    def round_aflora(self, t: int, who: list[int]):
        model = ToyModel(self.w)
        a_before = self.state.a_global.copy()

        def work(k):
            return run_client(self.clients[k], self.state.a_global, model, rng_for(self.cfg.seed, _S_CLIENT, t, k))

        results = [(k, u, ad) for k, (u, ad) in zip(who, self.map(work, who)) if u is not None]
        updates = [u for _, u, _ in results]
        delta, weights = server_round(self.state, updates, self.parts.public_split, model,
                                      rng_for(self.cfg.seed, _S_SERVER, t))
        self.w = self.w + delta
        if self.trace:
            self.trace({"round": t, "participants": [k for k, _, _ in results], "updates": updates,
                        "adapters": [ad for _, _, ad in results], "weights": weights, "delta": delta,
                        "a_global_before": a_before, "a_global_after": self.state.a_global.copy(),
                        "b_global": self.state.b_global.copy(), "w": self.w.copy()})
        return [u.r_eff for u in updates], weights, frobenius_norm(delta), float("nan")

    def _train_all(self, t, who, starts):
        model = ToyModel(self.w)
        cfg = self.cfg

        def work(item):
            k, (a0, b0) = item
            a, b = local_train_full(a0, b0, self.parts.shards[k], model, cfg.local_epochs, cfg.lr,
                                    cfg.batch_size, rng_for(cfg.seed, _S_CLIENT, t, k))
            return HomAdapterUpdate(a=a, b=b, data_count=len(self.parts.shards[k]))

        return self.map(work, list(zip(who, starts)))

    def round_flora(self, t: int, who: list[int]):
        starts = []
        for k in who:
            rng = rng_for(self.cfg.seed, _S_INIT_A, t, k)
            r = self.cfg.rank_caps[k]
            starts.append((random_rows(rng, r, self.cfg.n, self.hyper.C), np.zeros((self.cfg.m, r))))
        updates = self._train_all(t, who, starts)
        delta = baselines.flora_aggregate(updates)
        self.w = self.w + delta
        if self.trace:
            self.trace({"round": t, "participants": who, "updates": updates, "delta": delta})
        weights = baselines.data_weights([u.data_count for u in updates])
        return [u.rank for u in updates], weights, frobenius_norm(delta), float("nan")

    def round_persistent(self, t: int, who: list[int]):
        """classic and hetlora: clients start from the (truncated) global pair."""
        starts = [(self.a_g[:self.rank_of(k)].copy(), self.b_g[:, :self.rank_of(k)].copy()) for k in who]
        updates = self._train_all(t, who, starts)
        gap = interference_gap(updates)
        if self.cfg.method == "classic":
            self.a_g, self.b_g = baselines.classic_aggregate(updates)
        else:
            self.a_g, self.b_g = baselines.hetlora_aggregate(updates)
        new = self.b_g @ self.a_g
        dnorm = frobenius_norm(new - self.global_delta)
        self.global_delta = new
        if self.trace:
            self.trace({"round": t, "participants": who, "updates": updates, "delta": new})
        weights = baselines.data_weights([u.data_count for u in updates])
        return [u.rank for u in updates], weights, dnorm, gap

    def round_flexlora(self, t: int, who: list[int]):
        starts = []
        for k in who:
            r = self.cfg.rank_caps[k]
            if np.any(self.global_delta):
                starts.append(baselines.truncated_factors(self.global_delta, r))
            else:
                rng = rng_for(self.cfg.seed, _S_INIT_A, t, k)
                starts.append((random_rows(rng, r, self.cfg.n, self.hyper.C), np.zeros((self.cfg.m, r))))
        updates = self._train_all(t, who, starts)
        new = baselines.ideal_aggregate([(u.product(), u.data_count) for u in updates])
        dnorm = frobenius_norm(new - self.global_delta)
        self.global_delta = new
        if self.trace:
            self.trace({"round": t, "participants": who, "updates": updates, "delta": new})
        weights = baselines.data_weights([u.data_count for u in updates])
        return [u.rank for u in updates], weights, dnorm, float("nan")

    def rank_of(self, k: int) -> int:
        return self.a_g.shape[0] if self.cfg.method == "classic" else self.cfg.rank_caps[k]

    def step(self, t: int) -> RoundMetrics:
        start = time.perf_counter()
        who = sample_participants(self.cfg, t)
        ranks_before = self.ranks()
        fn = {
            "aflora": self.round_aflora, "flora": self.round_flora, "classic": self.round_persistent,
            "hetlora": self.round_persistent, "flexlora": self.round_flexlora,
        }[self.cfg.method]
        uploaded, weights, dnorm, gap = fn(t, who)
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.global_delta))):
            raise NumericalError(f"non-finite model weights after round {t}")
        trained, comm = round_cost(self.cfg.method, uploaded, self.cfg.m, self.cfg.n)
        return RoundMetrics(
            round=t, method=self.cfg.method, test_accuracy=self.accuracy(),
            per_client_r_eff=ranks_before, trained_param_ratio=trained, communicated_param_ratio=comm,
            interference_fnorm=gap, wall_time=time.perf_counter() - start, participants=who,
            weights=list(np.asarray(weights, dtype=float)), uploaded_r_eff=list(uploaded), delta_fnorm=dnorm,
        )


def run_experiment(cfg: ExperimentConfig, trace: Optional[Callable[[dict], None]] = None) -> list[RoundMetrics]:
    """Run ``cfg.rounds`` federated rounds.

    The first entry (round 0) scores the untouched backbone. ``trace``, if
    given, receives a dict of per-round internals (updates, adapters, deltas).
    """
    cfg.validate()
    runner = _Runner(cfg, trace)
    try:
        metrics = [RoundMetrics(round=0, method=cfg.method, test_accuracy=runner.accuracy(),
                                per_client_r_eff=runner.ranks(), trained_param_ratio=0.0,
                                communicated_param_ratio=0.0)]
        with np.errstate(over="raise", invalid="raise"):
            for t in range(1, cfg.rounds + 1):
                metrics.append(runner.step(t))
    except FloatingPointError as exc:
        raise NumericalError(str(exc)) from exc
    finally:
        if runner.pool is not None:
            runner.pool.shutdown()
    if cfg.dump_rounds:
        write_round_dumps(metrics, cfg.dump_rounds)
    return metrics


def metrics_csv(metrics: Sequence[RoundMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for m in metrics:
        w.writerow(m.csv_row())
    return buf.getvalue()


def write_csv(metrics: Sequence[RoundMetrics], path) -> None:
    Path(path).write_text(metrics_csv(metrics))


def write_round_dumps(metrics: Sequence[RoundMetrics], directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for m in metrics:
        if m.round == 0:
            continue
        (out / f"round_{m.round:04d}.json").write_text(json.dumps(m.dump(), indent=2) + "\n")


def compare(cfg: ExperimentConfig, methods: Sequence[str]) -> list[RoundMetrics]:
    """Run several methods on the same data, backbone and seed; concatenated metrics."""
    out = []
    for method in methods:
        out.extend(run_experiment(replace(cfg, method=method, dump_rounds=None)))
    return out
