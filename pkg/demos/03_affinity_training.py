# coding: utf-8

# # Training the target-affinity head
#
# A text query is turned into a vector q in object-embedding space. Training
# pushes q toward the objects the query is about and away from the rest of the
# scene. Here the queries are "where is the <category>" over synthetic scenes
# whose categories share feature prototypes.

# %%

import time

from cvp import affinity, relevance
from cvp.synthetic import make_retrieval_suite

suite = make_retrieval_suite(num_train=20, num_test=10, seed=1)
scenes = suite.scenes


def triples(samples):
    return [(relevance.tokenize(s.question), scenes[s.scene_id], relevance.build_target_set(s, scenes[s.scene_id]))
            for s in samples]


train, test = triples(suite.train_samples), triples(suite.test_samples)
print(f"{len(train)} training queries, {len(test)} held-out queries")

# %% [markdown]
# Same data, two objectives: the contrastive loss and a plain regression of q
# onto the mean positive embedding.

# %%

cache = affinity.EmbeddingCache()
heads = {}
for kind in ("infonce", "mse"):
    start = time.perf_counter()
    heads[kind] = affinity.train_affinity(train, affinity.TrainConfig(steps=1000, loss_kind=kind), cache=cache)
    acc = affinity.retrieval_accuracy(heads[kind], test, cache=cache)
    print(f"{kind:>7}: held-out top-1 {acc:.3f} ({time.perf_counter() - start:.1f}s)")

# %% [markdown]
# Ranking one held-out scene.

# %%

scene = suite.test_scenes[0]
query = f"where is the {scene.objects[0].category}"
embs = [e for e in cache(scene) if not e.is_empty]
q = affinity.query_vector(heads["infonce"], query)
print(query)
for obj_id, sim in affinity.retrieve_topk(q, embs, 5):
    print(f"  {obj_id:3d}  {scene.object_by_id(obj_id).category:<12} {sim:+.4f}")
