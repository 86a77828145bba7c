# coding: utf-8

# # Which objects count as positives?
#
# Each dataset kind has its own rule for turning a sample's referenced objects
# into a positive set. The second variant also adds every object whose category
# is named in the question or answer.

# %%

import numpy as np

from cvp.relevance import TrainingSample, build_target_set
from cvp.scene import SceneBundle, SceneObject

names = ["chair", "chair", "table", "sofa", "chair"]
scene = SceneBundle("room", (), [SceneObject(i, n, np.zeros(3), np.ones(3)) for i, n in enumerate(names)])

samples = [
    TrainingSample("scanrefer", "the chair next to the table", None, [0], ["chair"]),
    TrainingSample("multi3drefer", "all chairs facing the sofa", None, [0, 1, 4], ["chair"] * 3),
    TrainingSample("multi3drefer", "the piano", None, [], []),
    TrainingSample("scan2cap", "describe this object", None, [3], ["sofa"]),
    TrainingSample("scanqa", "what is in front of the sofa", "table", [2], ["table"]),
    TrainingSample("scanqa", "what is around the table", "chair", [0, 1], ["chair", "chair"]),
    TrainingSample("scanqa", "what is around the table", "furniture", [0, 2], ["chair", "table"]),
    TrainingSample("sqa3d", "can I sit down", "yes", [], []),
]

# %%

print(f"{'kind':<13} {'question':<30} {'gt_boxes':<16} all_related_boxes")
for s in samples:
    gt = build_target_set(s, scene, "gt_boxes")
    rel = build_target_set(s, scene, "all_related_boxes")
    show = lambda t: "skip" if t.mode == "skip" else str(list(t.ids))
    print(f"{s.dataset_kind:<13} {s.question:<30} {show(gt):<16} {show(rel)}")

# %% [markdown]
# An empty positive set (the piano) is kept as a target but is not trainable;
# the loss skips it just like the skipped samples.
