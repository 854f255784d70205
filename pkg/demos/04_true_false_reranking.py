"""
True/False reranking
====================

A multimodal language model is asked whether each retrieved candidate fits
the query; the softmax probability of "True" becomes the new score. Here a
stand-in scorer plays the model so the mechanics can be seen end to end.
"""
import numpy as np

from unimr import Item, Modality, Qrels, RerankConfig, rerank
from unimr.index import SearchHit
from unimr.reranker import (
    CAPTION_TEMPLATE,
    VQA_TEMPLATE,
    MockScorer,
    ScorerResponse,
    render_prompt,
    true_prob,
)

img = np.ones(8) / np.sqrt(8)
photo = Item("q-photo", Modality.IMAGE, None, img)
print(render_prompt(CAPTION_TEMPLATE, photo, Item("c7", Modality.TEXT, "two dogs on a beach")))
print()
vq = Item("q-vqa", Modality.IMAGE_TEXT, "what is the dog holding?", img)
print(render_prompt(VQA_TEMPLATE, vq, Item("a3", Modality.TEXT, "a frisbee")))
print()

print("P(True) for logits (2, 0): %.7f" % true_prob(ScorerResponse(2.0, 0.0)))
print("P(True) for logits (7, 5): %.7f" % true_prob(ScorerResponse(7.0, 5.0)))

captions = {f"c{k}": Item(f"c{k}", Modality.TEXT, f"caption number {k}") for k in range(15)}
hits = [SearchHit(f"c{k}", 0.9 - k / 50, k + 1, Modality.TEXT) for k in range(15)]
scorer = MockScorer(Qrels({"q-photo": {"c6": 1}}))  # c6 is the right caption
out = rerank(photo, hits, captions, scorer, RerankConfig(depth=10))
for before, after in zip(hits, out):
    print(f"rank {after.rank:2d}: {before.doc_id:4s} -> {after.doc_id:4s}  score {after.score:.4f}")
