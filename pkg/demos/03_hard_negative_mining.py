"""
Modality-aware hard negatives
=============================

For a query that asks for an image, a caption about the same scene is a
tempting wrong answer. Mining keeps two kinds of negatives from the top-50:
wrong-modality candidates ranked above the positive (C1) and right-modality
candidates ranked below position 45 (C2).
"""
import numpy as np

from unimr import MinedNegatives, MinerConfig, Modality, mine, remine_continual, sample_negative
from unimr.core import EmbeddingRecord
from unimr.index import build

rng = np.random.default_rng(1)
d = 16
query = rng.standard_normal(d)
query /= np.linalg.norm(query)


def near(v, noise):
    x = v + noise * rng.standard_normal(d)
    return x / np.linalg.norm(x)


records = [
    EmbeddingRecord("caption-twin", Modality.TEXT, near(query, 0.05)),         # same scene, wrong modality
    EmbeddingRecord("photo+caption", Modality.IMAGE_TEXT, near(query, 0.08)),  # also the wrong modality
    EmbeddingRecord("the-photo", Modality.IMAGE, near(query, 0.2)),            # labeled positive
]
records += [EmbeddingRecord(f"img{k:02d}", Modality.IMAGE, near(query, 1.0 + k / 20)) for k in range(60)]
index = build(records)

hits = index.search(query, 8)
for h in hits:
    print(f"{h.rank:2d}  {h.doc_id:14s} {h.modality.tag:10s} {h.score:+.3f}")

mined = mine(query, Modality.IMAGE, "the-photo", index, MinerConfig(top_n=50, k_prime=45), qid="q1")
print("positive rank:", mined.positive_rank)
print("C1:", mined.C1)
print("C2:", mined.C2)

# One negative per epoch: class first (1/2 each), then uniform within the class.
draws = [sample_negative(mined, rng)[1].value for _ in range(10_000)]
print("C1 share over 10k draws: %.3f" % (draws.count("C1") / len(draws)))

# After training with these negatives, C2 is mined again with the new model
# while C1 from the first model is kept as is.
better = build([EmbeddingRecord(r.id, r.modality, r.vector) for r in records])
print(remine_continual(mined, query, Modality.IMAGE, "the-photo", better))
