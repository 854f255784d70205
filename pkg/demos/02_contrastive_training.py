"""
InfoNCE training and a gradient check
=====================================

The loss is the mean negative log-softmax of each query's positive over the
batch pool. Its gradient is written out by hand, so we first compare it with
central finite differences, then train a tiny model and watch the loss fall.
"""
import math

import numpy as np

from unimr import Item, Modality, Stage, TrainConfig, infonce_loss, init_params, train
from unimr.featurizer import FeaturizerConfig
from unimr.trainer import TrainExample, grad_check, random_gradcheck_case

# Three values worth knowing by heart.
print("single candidate:", infonce_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), [0], 0.05))
print("4 equal scores:  ", infonce_loss(np.array([[1.0, 0.0]]), np.tile([0.0, 1.0], (4, 1)), [0], 0.05),
      "vs ln 4 =", math.log(4))
print("2-d example:     ", infonce_loss(np.array([[1.0, 0.0]]), np.eye(2), [0], 1.0),
      "vs ln(1+1/e) =", math.log(1 + math.exp(-1)))

rng = np.random.default_rng(0)
errs = [grad_check(*random_gradcheck_case(rng), tau=0.05, rng=rng).max_rel_error for _ in range(5)]
print("finite-difference check, max relative error per instance:", ["%.1e" % e for e in errs])

# A toy task: queries mention two of three topic words; each topic has one passage.
topics = {"fruit": "apple banana cherry", "metal": "iron copper zinc", "sky": "cloud rain storm"}
docs = {t: Item(t, Modality.TEXT, words + " and more") for t, words in topics.items()}
examples = []
for k in range(90):
    t = list(topics)[k % 3]
    words = rng.choice(topics[t].split(), size=2, replace=False)
    examples.append(TrainExample("2", "Retrieve a passage.", Item(f"q{k}", Modality.TEXT, " ".join(words)), docs[t]))

fcfg = FeaturizerConfig(F_t=128, F_i=16)
res = train(examples, init_params(16, fcfg, seed=0), TrainConfig(batch_size=3, lr=1e-2, epochs=5), Stage.RAND, fcfg)
losses = [r.loss for r in res.trace]
for start in range(0, len(losses), 30):
    chunk = losses[start:start + 30]
    print(f"steps {start:3d}-{start + len(chunk) - 1:3d}: mean loss {np.mean(chunk):.3f}")
