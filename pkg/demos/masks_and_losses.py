"""
Token masks and the hotfix losses on one bug/fix pair
=====================================================

A buggy and a fixed statement share their context. Aligning the two token
streams marks what to forget (w_minus) and what to learn (w_plus); the losses
then weight per-token likelihood by those masks.
"""
from llmhotfix.data import CodePair, Tokenizer, build_example
from llmhotfix.loss import combine, dual_loss, guided_loss, unlearn_loss, vanilla_loss
from llmhotfix.model import ModelConfig, TransformerLM

pair = CodePair(
    context="String firstLine = stacktrace.trim();",
    buggy_stmt="int pos = stacktrace.indexOf(':');",
    fixed_stmt="int pos = firstLine.indexOf(':');",
    suffix="return pos;",
    pair_id="demo",
)
tok = Tokenizer.from_texts([pair.buggy_text, pair.fixed_text])
ex = build_example(pair, tok)

# Which tokens carry weight? Only the edited identifier on each side.
print("forget:", [tok.vocab[t] for t, w in zip(ex.buggy_tokens, ex.w_minus) if w])
print("learn: ", [tok.vocab[t] for t, w in zip(ex.fixed_tokens, ex.w_plus) if w])

# An untrained model: every loss sits near ln |V|.
model = TransformerLM(ModelConfig(vocab_size=len(tok), embed_dim=16, n_layers=1, n_heads=2, context_len=64))
print("vanilla %.4f  guided %.4f  unlearn %.4f" % (
    vanilla_loss(model, ex).item(), guided_loss(model, ex).item(), unlearn_loss(model, ex).item()))
total, parts = dual_loss(model, ex)
print("dual    %.4f  (ratio term %.4f)" % (total.item(), parts.l_ratio))

# The combination rules on plain numbers
for name, comps in [("Dual", {"guided": 1.0, "unlearn": 1.0}),
                    ("Guided+KL", {"guided": 0.4, "kl": 0.2}),
                    ("Dual+KL", {"guided": 1.0, "unlearn": 1.0, "kl": 0.0})]:
    print(f"{name:<10} {comps} -> {combine(name, comps)[0].item():.4f}")
