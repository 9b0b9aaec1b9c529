"""A miniature run of the whole method through the library API.

Generates a small corpus, pretrains a tiny backbone for one epoch, clusters the
training slots into two groups, trains one prefix expert per group and scores
a training domain next to the unseen flight domain. Takes well under a minute; numbers are far below
the shipped configuration because everything here is shrunk.
"""
from mope.backbone import BackboneConfig
from mope.corpus import build_vocab, corpus_texts, generate_lm_dialogues, generate_synthetic
from mope.pipeline import run_mope
from mope.train import ExpertTrainConfig, PretrainConfig, pretrain_backbone

SEED = 1

schema, train, test = generate_synthetic(SEED, 150, n_test=30)
lm = generate_lm_dialogues(SEED, 1000)
vocab = build_vocab(corpus_texts(schema, lm))
print(f"{len(train)} train / {len(test)} test dialogues, vocabulary of {len(vocab)} words")

config = BackboneConfig(vocab_size=len(vocab), d_model=32, n_layers=2, n_heads=2, d_ff=64)
backbone, losses = pretrain_backbone(lm, vocab, config, SEED, PretrainConfig(epochs=8, lr=3e-3))
backbone = backbone.freeze()
print(f"pretraining loss {losses[0]:.2f} -> {losses[-1]:.2f}")

# a training domain that also appears among the test dialogues, for contrast
seen = next(d for dlg in test for d in dlg.domains if d not in schema.held_out)

for k in (1, 2):
    run = run_mope(backbone, vocab, schema, train, test, [seen, "flight"], k, "hidden",
                   SEED, ExpertTrainConfig(epochs=3))
    for domain, rep in run.reports.items():
        o = rep.overall
        print(f"K={k} {domain:10s} JGA {o.jga:.3f}  SA {o.sa_with_none:.3f}  "
              f"SA w/o none {o.sa_without_none:.3f}")
    print(f"    flight routes {run.reports['flight'].meta['routes']}")
