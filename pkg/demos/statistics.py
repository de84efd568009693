"""
Evaluation statistics: pass@k, percent change and the signed-rank test
=====================================================================
"""
import numpy as np

from llmhotfix.evaluate import format_change, pass_at_k, percent_change, wilcoxon_signed_rank

# pass@k from n samples with c correct; it rises with k and saturates at 1
for c in (0, 1, 3, 10):
    print(f"c={c:>2}", " ".join(f"pass@{k}={pass_at_k(10, c, k):.3f}" for k in (1, 5, 10)))

# Bug and fix counts before/after a hotfix
print("bugs ", format_change(percent_change(2943, 1639)))
print("fixes", format_change(percent_change(1829, 3811)))

# Paired per-task pass rates: a small shift is rarely significant
rng = np.random.default_rng(0)
before = rng.integers(0, 11, size=40) / 10
after = np.clip(before + rng.choice([-0.1, 0.0, 0.1], size=40), 0, 1)
w, p, n = wilcoxon_signed_rank(before, after)
print(f"W={w:.1f}  p={p:.3f}  over {n} tasks that changed")
