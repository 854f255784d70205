"""
Hashing features and the score-fusion encoder
=============================================

Text and image bytes are turned into signed hashed feature vectors, then a
pair of linear projections maps them into one shared embedding space.
"""
import numpy as np

from unimr import FeaturizerConfig, Item, Modality, encode_candidate, encode_query, init_params
from unimr.featurizer import featurize_image_bytes, featurize_text, tokenize

fcfg = FeaturizerConfig(F_t=256, F_i=64)

# Tokens are split on ASCII punctuation and lowercased (ASCII letters only).
print(tokenize("A red Bus, parked near the CAFÉ."))

# Every feature vector has unit length; repeated tokens pile into one bucket.
v = featurize_text("bus bus bus", fcfg)
print("nonzero buckets:", np.count_nonzero(v), " norm:", np.linalg.norm(v))

# Image bytes are hashed in overlapping 8-byte windows (stride 4).
rng = np.random.default_rng(0)
photo = rng.integers(0, 256, size=256, dtype=np.uint8).tobytes()
noisy = bytearray(photo)
noisy[40:48] = bytes(8)
f1, f2 = featurize_image_bytes(photo, fcfg), featurize_image_bytes(bytes(noisy), fcfg)
print("cosine(photo, edited photo) = %.3f" % (f1 @ f2))

# The encoder sums the projected text and image parts, then normalizes.
params = init_params(d=32, fcfg=fcfg, seed=0)
caption = Item("c1", Modality.TEXT, "a red bus parked near a cafe")
picture = Item("c2", Modality.IMAGE, None, f1)
both = Item("c3", Modality.IMAGE_TEXT, "a red bus", f1)
for c in (caption, picture, both):
    e = encode_candidate(c, params, fcfg)
    print(f"{c.id} ({c.modality.tag:10s}) norm={np.linalg.norm(e):.12f}")

# Queries are prefixed with the task instruction before hashing.
q = Item("q1", Modality.TEXT, "red bus")
with_inst = encode_query("Retrieve an image that matches the given caption.", q, params, fcfg=fcfg)
print("query . image candidate = %.3f" % (with_inst @ encode_candidate(picture, params, fcfg)))
