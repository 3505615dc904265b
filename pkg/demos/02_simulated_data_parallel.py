"""
A simulated data-parallel world
===============================

Four ranks, two groups, one traffic ledger. Collectives are computed
directly and the ledger records what a ring all-reduce would send.
"""

import numpy as np

from ablab import dist, training
from ablab.config import AbHyperparams, OptimizerConfig, RunConfig, RunMode

topo = dist.make_topology(8, 2)
for g in range(topo.num_groups):
    print(f"group{g}: ranks {topo.group_ranks(g)} train {topo.role_of(g)}")

ledger = dist.TrafficLedger(bytes_per_element=4)
comm = dist.Collectives(topo, ledger)

rng = np.random.default_rng(0)
grads = [rng.standard_normal(1000) for _ in range(8)]
mean = comm.all_reduce_average(grads, dist.GLOBAL, step=0, phase="demo")
print("global mean matches numpy:", np.allclose(mean, np.mean(grads, axis=0)))

comm.all_reduce_average(grads[:4], "group0", step=1, phase="demo")
print(ledger.to_csv(), end="")
print("per-rank bytes:", ledger.totals().total_bytes, " job-wide:", ledger.totals().job_bytes)

# Four workers with local batch 8 follow the same trajectory as one worker
# with batch 32: the global batch is the same set of samples either way.
dataset = {"kind": "teacher_student", "n_samples": 2000, "in_dim": 16, "classes": 4, "hidden": 32,
           "test_fraction": 0.2, "seed": 0}
model = [{"type": "linear", "in": 16, "out": 32}, {"type": "relu"}, {"type": "linear", "in": 32, "out": 4}]
sets = training.load_datasets(dataset)
finals = []
for p, local in [(4, 8), (1, 32)]:
    cfg = RunConfig(mode=RunMode.TRAD_DDP, model=model, dataset=dataset, world_size=p, num_groups=1,
                    local_batch_size=local, optimizer=OptimizerConfig(name="sgd", lr=0.05, schedule="constant"),
                    ab=AbHyperparams(total_training_steps=10))
    t = training.Trainer(cfg, *sets)
    t.warmup_phase(10)
    finals.append(dist.pack(list(t.workers[0].model.pieces().values())))
print("4 x 8 vs 1 x 32 relative distance:", np.linalg.norm(finals[0] - finals[1]) / np.linalg.norm(finals[1]))
