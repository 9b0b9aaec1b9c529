"""How unseen slots find an expert.

Features every slot of a randomly initialised toy backbone, clusters the
training slots with k-means, then routes each held-out flight slot to its
nearest centroid. With a pretrained backbone (see the README) the groups
follow shared slot families such as area or day.
"""
from mope.backbone import BackboneConfig, init_backbone
from mope.corpus import build_vocab, corpus_texts, generate_synthetic, slot_text
from mope.evaluate import average_cosine_similarity
from mope.routing import assign_nearest, cluster_slots, featurize

schema, train, test = generate_synthetic(1, 30)
vocab = build_vocab(corpus_texts(schema, train + test))
backbone = init_backbone(BackboneConfig(vocab_size=len(vocab)), 0).freeze()

for mode in ("embedding", "hidden"):
    model = cluster_slots(backbone, vocab, schema, mode, 3, 1)
    feats = {f.slot: f for f in featurize(backbone, vocab, schema.slots(), mode)}
    print(f"\n{mode} features")
    for c in range(model.k):
        members = sorted(slot_text(s) for s, k in model.assignments.items() if k == c)
        print(f"  cluster {c}: {', '.join(members)}")
    for slot in schema.slots(["flight"]):
        print(f"  {slot_text(slot)} -> expert {assign_nearest(model, feats[slot])}")
    tr, te = average_cosine_similarity({s: f.vector for s, f in feats.items()}, model,
                                       schema.slots(["flight"]))
    print(f"  train ACS {tr:.3f}  test ACS {te:.3f}")
