"""
A hotfix end to end at the reference defaults (about seven minutes on one core)
===============================================================================

1. Generate a synthetic corpus of buggy/fixed code pairs plus bug-free text.
2. Train a base model that has seen only the buggy versions.
3. Train a LoRA hotfix with the Dual+KL objective; the base stays frozen.
4. Count buggy and fixed completions before and after.
"""
import tempfile
from pathlib import Path

from llmhotfix.cli import RunConfig, eval_inputs, gen_corpus, load_corpus, measure, report_from, run_hotfix, train_base_model

work = Path(tempfile.mkdtemp())
gen_corpus(work, seed=0, n_pairs=280, n_neutral=500)
corpus = load_corpus(work)

cfg = RunConfig()  # reference model, 15 base epochs, 10 hotfix epochs, Dual+KL on LoRA
base, tok, trace = train_base_model(cfg, corpus)
print("base training loss by epoch:", " ".join(f"{v:.3f}" for v in trace))

inp = eval_inputs(cfg, tok, corpus)
before = measure(base, None, inp)

res = run_hotfix(cfg, base, tok, corpus)
print(f"adapter: {res.adapter.num_parameters()} trainable parameters vs {base.num_parameters()} in the base")
after = measure(res.base, res.adapter, inp)

print(report_from(before, after, inp, cfg.evaluation.ks).table("Dual+KL"))
