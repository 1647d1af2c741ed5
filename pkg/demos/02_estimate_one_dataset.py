"""Estimate transported stochastic direct and indirect effects from one sample.

Draws N=5000 participants, writes them to CSV, reads them back and runs the
five estimators with correctly specified nuisance models.

    python demos/02_estimate_one_dataset.py
"""

import tempfile
from pathlib import Path

from transmed.data import load_csv, write_csv
from transmed.dgp import correct_terms, get_dgm, sample
from transmed.estimators import estimate_effects
from transmed.truth import truth_report

dgm = get_dgm(1, "main")
path = Path(tempfile.mkdtemp()) / "trial.csv"
write_csv(sample(dgm, 5000, seed=11), path)
data = load_csv(path).collapse()
print(f"{data.n} distinct rows after collapsing duplicates into frequency weights")

truth = truth_report(dgm)
print(f"true SDE {truth.sde_true:+.4f}, true SIE {truth.sie_true:+.4f}\n")
results = estimate_effects(data, correct_terms(dgm))
for name, res in results.items():
    lo, hi = res.SDE.ci_ic
    print(f"{name:9s} SDE {res.SDE.estimate:+.4f} [{lo:+.4f}, {hi:+.4f}]   "
          f"SIE {res.SIE.estimate:+.4f} (se {res.SIE.se_ic:.4f})")
