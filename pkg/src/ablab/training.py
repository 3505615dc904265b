"""AB training orchestration over simulated data-parallel workers.

A run is laid out as a :class:`PhaseSchedule`: full-rank warm-up, then cycles
of decompose -> independent group training -> global sync -> full-rank
rebound. The ``TradDDP`` baseline is the same machinery with a schedule made
of a single full-rank phase.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import dist, nn, optim
from .config import AbHyperparams, RunConfig, RunMode
from .errors import ConfigError, InvariantViolation, ProtocolError

WARMUP = "warmup"
DECOMPOSE = "decompose"
GROUP_TRAIN = "group_train"
SYNC = "sync"
FULL_RANK_REBOUND = "full_rank_rebound"

STEP_PHASES = (WARMUP, GROUP_TRAIN, FULL_RANK_REBOUND)


@dataclass(frozen=True)
class Phase:
    kind: str
    steps: int = 0


@dataclass(frozen=True)
class PhaseSchedule:
    phases: tuple[Phase, ...]
    warmup_steps: int
    num_ab_steps: int
    full_rank_rebound_steps: int
    lr_rebound_steps: int

    @property
    def total_steps(self) -> int:
        return sum(p.steps for p in self.phases)

    def steps_in(self, kind: str) -> int:
        return sum(p.steps for p in self.phases if p.kind == kind)

    @property
    def num_cycles(self) -> int:
        return sum(1 for p in self.phases if p.kind == DECOMPOSE)


def resolve_schedule(hp: AbHyperparams) -> PhaseSchedule:
    """Lay out warm-up and AB cycles so step counts sum to the total exactly.

    A remainder too short for one group step plus a full rebound is added to
    the last rebound, so the run always ends at full rank.
    """
    total = hp.total_training_steps
    warm, ab, frr = hp.warmup_steps, hp.num_ab_steps, hp.full_rank_rebound_steps
    if warm + ab + frr > total:
        raise ConfigError(
            f"warm-up ({warm}) plus one AB cycle ({ab} + {frr}) exceeds {total} training steps"
        )
    phases = [Phase(WARMUP, warm)] if warm else []
    remaining = total - warm
    while remaining >= ab + frr:
        phases += [Phase(DECOMPOSE), Phase(GROUP_TRAIN, ab), Phase(SYNC), Phase(FULL_RANK_REBOUND, frr)]
        remaining -= ab + frr
    if remaining > frr:
        phases += [Phase(DECOMPOSE), Phase(GROUP_TRAIN, remaining - frr), Phase(SYNC), Phase(FULL_RANK_REBOUND, frr)]
    elif remaining:
        phases[-1] = Phase(FULL_RANK_REBOUND, phases[-1].steps + remaining)
    return PhaseSchedule(tuple(phases), warm, ab, frr, hp.lr_rebound_steps)


def ddp_schedule(total_steps: int) -> PhaseSchedule:
    return PhaseSchedule((Phase(WARMUP, total_steps),), total_steps, 0, 0, 0)


@dataclass
class Worker:
    rank: int
    role: str
    model: nn.Model
    optimizer: object

    def reset_optimizer(self) -> None:
        optim.reset_states_for_shape_change(self.optimizer, self.model.pieces())


@dataclass
class Decomposition:
    step: int
    ranks: dict[str, int]
    retained_elements: int
    full_elements: int

    @property
    def compression_ratio(self) -> float:
        return self.full_elements / self.retained_elements


@dataclass
class RunReport:
    config: RunConfig
    schedule: PhaseSchedule
    final_params: dict[str, np.ndarray]
    model: nn.Model
    accuracy_curve: list[tuple[int, float]]
    ledger: dist.TrafficLedger
    decompositions: list[Decomposition]
    warnings: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def compression_series(self) -> list[tuple[int, float]]:
        return [(d.step, d.compression_ratio) for d in self.decompositions]

    @property
    def compression_ratio(self) -> float:
        """Ratio at the last decomposition; 1.0 for runs that never factor."""
        if not self.decompositions:
            return 1.0
        return self.decompositions[-1].compression_ratio

    @property
    def final_top1(self) -> float:
        return self.accuracy_curve[-1][1] if self.accuracy_curve else float("nan")

    @property
    def best_top1(self) -> float:
        return max(a for _, a in self.accuracy_curve) if self.accuracy_curve else float("nan")


def build_layers(items: list[dict]) -> list:
    layers = []
    for item in items:
        kind = item.get("type")
        if kind == "linear":
            layers.append(nn.Linear(item["in"], item["out"], item.get("bias", True)))
        elif kind == "conv2d":
            layers.append(nn.Conv2d(item["in"], item["out"], item.get("kh", 3), item.get("kw", 3), item.get("bias", True)))
        elif kind == "relu":
            layers.append(nn.ReLU())
        elif kind == "flatten":
            layers.append(nn.Flatten())
        else:
            raise ConfigError(f"unknown layer type {kind!r}")
    return layers


def load_datasets(cfg: dict) -> tuple[data_mod.Dataset, data_mod.Dataset]:
    kind = cfg.get("kind")
    if kind == "teacher_student":
        ds = data_mod.make_teacher_student(
            cfg.get("seed", 0), cfg["n_samples"], cfg["in_dim"], cfg["classes"], cfg.get("hidden", 64)
        )
        return data_mod.train_test_split(ds, cfg.get("test_fraction", 0.2), cfg.get("seed", 0))
    if kind == "idx":
        train = data_mod.load_idx_dataset(cfg["train_images"], cfg["train_labels"], cfg.get("classes"))
        test = data_mod.load_idx_dataset(cfg["test_images"], cfg["test_labels"], train.num_classes)
        return train, test
    raise ConfigError(f"unknown dataset kind {kind!r}")


class Trainer:
    """Drives all simulated ranks through a schedule, in rank order.

    With ``parallel=True`` the per-rank forward/backward passes run on a
    thread pool; every collective is still a barrier and results do not
    depend on the execution mode.
    """

    def __init__(self, config: RunConfig, train: data_mod.Dataset, test: data_mod.Dataset):
        self.config = config
        self.train = train
        self.test = test
        mode = config.mode
        groups = config.num_groups if mode is RunMode.AB_GROUPS else 1
        if mode is RunMode.AB_GROUPS and groups < 2:
            raise ConfigError("AbGroups needs at least two groups")
        self.topology = dist.make_topology(config.world_size, groups)
        self.ledger = dist.TrafficLedger(bytes_per_element=config.bpe)
        self.comm = dist.Collectives(self.topology, self.ledger)
        self.plan = data_mod.ShardPlan(len(train), config.world_size, config.local_batch, seed=config.seed)
        if mode is RunMode.TRAD_DDP:
            self.schedule = ddp_schedule(config.ab.total_training_steps)
        else:
            self.schedule = resolve_schedule(config.ab)

        dtype = np.float32 if config.precision == "float32" else np.float64
        base = nn.build_model(build_layers(config.model), seed=config.seed, dtype=dtype)
        self.workers = [
            Worker(r, self.topology.role_of_rank(r), base.copy(), self._make_optimizer())
            for r in range(config.world_size)
        ]
        for w in self.workers:
            w.reset_optimizer()
        oc = config.optimizer
        self.lr = optim.LrSchedule(
            base_lr=oc.lr, total_steps=config.ab.total_training_steps,
            warmup_steps=oc.lr_warmup_steps, min_lr=oc.min_lr, kind=oc.schedule,
        )
        self.step = 0
        self.in_sync = True
        self.accuracy_curve: list[tuple[int, float]] = []
        self.decompositions: list[Decomposition] = []
        self.warnings: list[str] = []
        self._frozen: dict[int, dict[str, bytes]] = {}
        self._pool = ThreadPoolExecutor(max_workers=config.world_size) if config.parallel else None

    def _make_optimizer(self):
        oc = self.config.optimizer
        if oc.name == "sgd":
            return optim.SGD()
        return optim.AdamW(betas=(oc.beta1, oc.beta2), eps=oc.eps, weight_decay=oc.weight_decay)

    # -- per-step building blocks --------------------------------------------

    def _local_grads(self) -> list[dict[str, np.ndarray]]:
        def work(w: Worker):
            x, y = data_mod.next_local_batch(self.train, self.plan, w.rank, self.step)
            return nn.loss_and_grads(w.model, x, y)[1]

        if self._pool is not None:
            return list(self._pool.map(work, self.workers))
        return [work(w) for w in self.workers]

    def _scopes(self, phase: str) -> list[str]:
        if phase == GROUP_TRAIN and self.config.mode is RunMode.AB_GROUPS:
            return [dist.group_scope(g) for g in range(self.topology.num_groups)]
        return [dist.GLOBAL]

    def _train_step(self, phase: str) -> None:
        grads = self._local_grads()
        lr = self.lr(self.step)
        for scope in self._scopes(phase):
            ranks = self.topology.participants(scope)
            keys = list(self.workers[ranks[0]].model.trainable_pieces())
            for r in ranks[1:]:
                if list(self.workers[r].model.trainable_pieces()) != keys:
                    raise ProtocolError(f"{scope}: rank {r} trains different pieces than rank {ranks[0]}")
            fused = [dist.pack([grads[r][k] for k in keys]) for r in ranks]
            mean = self.comm.all_reduce_average(fused, scope, step=self.step, phase=phase)
            like = [grads[ranks[0]][k] for k in keys]
            avg = dict(zip(keys, dist.unpack(mean, like)))
            for r in ranks:
                model = self.workers[r].model
                current = {k: model.pieces()[k] for k in keys}
                for k, v in self.workers[r].optimizer.step(current, avg, lr).items():
                    model.set_piece(k, v)
        self.step += 1

    def _assert_ranks_identical(self, where: str) -> None:
        ref = self.workers[0].model.state_bytes()
        for w in self.workers[1:]:
            if w.model.state_bytes() != ref:
                raise InvariantViolation(f"rank {w.rank} diverged from rank 0 at step {self.step} ({where})")

    def _assert_frozen_intact(self) -> None:
        for w in self.workers:
            pieces = w.model.pieces()
            for key, snap in self._frozen[w.rank].items():
                if pieces[key].tobytes() != snap:
                    raise InvariantViolation(f"rank {w.rank}: frozen factor {key} changed during group training")

    def _maybe_eval(self) -> None:
        if self.in_sync and self.step % self.config.eval_interval == 0:
            self._evaluate()

    def _evaluate(self) -> None:
        if self.accuracy_curve and self.accuracy_curve[-1][0] == self.step:
            return
        acc = nn.accuracy(self.workers[0].model, self.test.inputs, self.test.labels)
        self.accuracy_curve.append((self.step, acc))

    def _check_due(self) -> bool:
        k = self.config.check_interval
        return k > 0 and self.step % k == 0

    # -- phases --------------------------------------------------------------

    def warmup_phase(self, steps: int, phase: str = WARMUP) -> None:
        for _ in range(steps):
            self._train_step(phase)
            if self._check_due():
                self._assert_ranks_identical(phase)
            self._maybe_eval()

    def full_rank_rebound_phase(self, steps: int) -> None:
        self.warmup_phase(steps, FULL_RANK_REBOUND)

    def decompose_phase(self) -> None:
        cutoff = self.config.ab.sigma_cutoff
        # name -> (weight bytes, factored result) of the first rank to decompose it
        done: dict[str, tuple[bytes, nn.Parameter]] = {}
        for w in self.workers:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                for name, p in list(w.model.params.items()):
                    if not p.decomposable or p.factored:
                        continue
                    raw = p.w.tobytes()
                    if name in done and done[name][0] == raw:
                        # Same input bits give the same SVD; reuse instead of recomputing.
                        q = done[name][1]
                        q = replace(q, a=q.a.copy(), b=q.b.copy(), train_target=w.role) if q.factored else p
                    else:
                        q = nn.ab_decompose(p, cutoff, w.role)
                        done[name] = (raw, q)
                    w.model.params[name] = q
            if w.rank == 0:
                self.warnings += [str(c.message) for c in caught]
            w.reset_optimizer()
            frozen = {}
            for p in w.model.params.values():
                if p.factored:
                    key = f"{p.name}.{'B' if p.train_target == 'A' else 'A'}"
                    frozen[key] = p.pieces()[key].tobytes()
            self._frozen[w.rank] = frozen
        m0 = self.workers[0].model
        self.decompositions.append(Decomposition(
            step=self.step,
            ranks={n: p.rank for n, p in m0.params.items() if p.factored},
            retained_elements=m0.num_elements(),
            full_elements=m0.full_num_elements(),
        ))
        self.lr = self.lr.start_rebound(self.step, self.schedule.lr_rebound_steps)
        self.in_sync = False

    def group_train_phase(self, steps: int) -> None:
        for _ in range(steps):
            self._train_step(GROUP_TRAIN)
            if self._check_due():
                self._assert_frozen_intact()
        self._assert_frozen_intact()

    def sync_and_reconstruct(self) -> None:
        """Average every piece (trained and frozen) globally, then rebuild ``W``."""
        per_rank = [w.model.pieces() for w in self.workers]
        keys = list(per_rank[0])
        for r, pieces in enumerate(per_rank[1:], start=1):
            if list(pieces) != keys:
                raise ProtocolError(f"rank {r} holds different pieces than rank 0 at sync")
        fused = [dist.pack([pieces[k] for k in keys]) for pieces in per_rank]
        mean = self.comm.all_reduce_average(fused, dist.GLOBAL, step=self.step, phase=SYNC)
        like = [per_rank[0][k] for k in keys]
        averaged = dict(zip(keys, dist.unpack(mean, like)))
        for w in self.workers:
            for k, v in averaged.items():
                w.model.set_piece(k, v.copy())
            for name, p in list(w.model.params.items()):
                if p.factored:
                    w.model.params[name] = nn.reconstruct(p)
            w.reset_optimizer()
        self.lr = self.lr.start_rebound(self.step, self.schedule.lr_rebound_steps)
        self._frozen = {}
        self.in_sync = True
        self._assert_ranks_identical(SYNC)
        self._maybe_eval()

    def run(self) -> RunReport:
        t0 = time.perf_counter()
        self._evaluate()
        try:
            for phase in self.schedule.phases:
                if phase.kind == WARMUP:
                    self.warmup_phase(phase.steps)
                elif phase.kind == DECOMPOSE:
                    self.decompose_phase()
                elif phase.kind == GROUP_TRAIN:
                    self.group_train_phase(phase.steps)
                elif phase.kind == SYNC:
                    self.sync_and_reconstruct()
                elif phase.kind == FULL_RANK_REBOUND:
                    self.full_rank_rebound_phase(phase.steps)
        finally:
            if self._pool is not None:
                self._pool.shutdown()
        self._assert_ranks_identical("end of run")
        self._evaluate()
        model = self.workers[0].model
        return RunReport(
            config=self.config,
            schedule=self.schedule,
            final_params={k: v.copy() for k, v in model.pieces().items()},
            model=model,
            accuracy_curve=self.accuracy_curve,
            ledger=self.ledger,
            decompositions=self.decompositions,
            warnings=self.warnings,
            wall_time=time.perf_counter() - t0,
        )


def run_training(config: RunConfig, datasets: tuple[data_mod.Dataset, data_mod.Dataset] | None = None) -> RunReport:
    train, test = datasets if datasets is not None else load_datasets(config.dataset)
    return Trainer(config, train, test).run()
