"""
Where the bytes go
==================

Break a short AB run's traffic down by phase and compare the ledger with
the closed-form count, then evaluate the estimated communication reduction.
"""

from fractions import Fraction

from ablab import dist, report, training
from ablab.config import AbHyperparams, OptimizerConfig, RunConfig

cfg = RunConfig(optimizer=OptimizerConfig(lr=3e-3, weight_decay=0.5),
                ab=AbHyperparams(total_training_steps=1000, sigma_cutoff=0.1))
rep = training.run_training(cfg)
totals = rep.ledger.totals()

for phase, nbytes in totals.per_phase.items():
    print(f"{phase:18s} {float(nbytes) / 1e6:9.3f} MB")
print("scaled traffic (backward share 53.84%):", round(totals.scaled_traffic / 1e6, 3), "MB")

# Warm-up traffic in closed form: steps * payload * bytes * 2(p-1)/p
payload = rep.model.full_num_elements()
expected = Fraction(rep.schedule.steps_in(training.WARMUP) * payload * cfg.bpe) * dist.ring_factor(4)
print("warm-up ledger equals closed form:", totals.per_phase[training.WARMUP] == expected)

# ECR for a model kept at 25% full rank then 75% compressed
for c in (100, 50, 2.266):
    print(f"c = {c:6.3f}%  ECR = {report.ecr(25, 75, c):6.2f}%")
gfrac = 100 * rep.schedule.steps_in(training.GROUP_TRAIN) / rep.schedule.total_steps
# a factored model larger than the original counts as no saving (c = 100)
c = min(100.0, 100 / rep.compression_ratio)
print(f"AB run at {rep.compression_ratio:.2f}:1, {gfrac:.1f}% of steps in group training: "
      f"ECR = {report.ecr(25, 75, c, min(gfrac, 75), True):.2f}%")
