"""
AB training against plain data parallelism
==========================================

Train the same MLP twice on a teacher-student task, once with ordinary
data-parallel SGD and once with independent A/B subgroup phases, then
compare accuracy, model size and traffic.

Strong decoupled weight decay matters here: it lets the spectrum of each
weight decay during training, so the cutoff actually removes ranks.
"""

from ablab import report, training
from ablab.config import AbHyperparams, OptimizerConfig, RunConfig, RunMode

cfg = RunConfig(
    world_size=4,
    num_groups=2,
    local_batch_size=32,
    optimizer=OptimizerConfig(lr=3e-3, weight_decay=0.5),
    ab=AbHyperparams(total_training_steps=2000, sigma_cutoff=0.1),
)
sets = training.load_datasets(cfg.dataset)

sched = training.resolve_schedule(cfg.ab)
print("schedule:", ", ".join(f"{p.kind}({p.steps})" if p.steps else p.kind for p in sched.phases[:6]), "...")

runs = {}
for mode, groups in [(RunMode.TRAD_DDP, 1), (RunMode.AB_GROUPS, 2), (RunMode.AB_NO_GROUPS, 1)]:
    rep = training.run_training(cfg.override(mode=mode, num_groups=groups), sets)
    runs[mode.value] = report.metrics_from_run(rep)
    print(f"{mode.value:11s} top-1 {100 * rep.final_top1:5.2f}%  compression {rep.compression_ratio:5.2f}:1  "
          f"wall {rep.wall_time:4.1f}s")

base = runs["TradDDP"]
for name, m in runs.items():
    saved = 100 * float(1 - m.job_bytes / base.job_bytes)
    print(f"{name:11s} job traffic {float(m.job_bytes) / 1e6:8.2f} MB  ({saved:5.1f}% less than DDP)  "
          f"ECR {m.ecr:5.2f}%")
