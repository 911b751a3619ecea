"""Class-incremental learning on a synthetic token stream.

The stream is a sequence of tasks with disjoint classes. A small transformer is
pre-trained and then frozen. Only the prompt experts and the classifier head
learn across tasks. After each task the model is evaluated on every task seen
so far, without knowing which task an input came from. This fills a
lower-triangular accuracy matrix. FAA is the mean of its last row; CAA
averages the row means.

Two variants are compared: a single dense prompt, and the full method. The
full method adds sparse routing, adaptive noise, dense warm-up, the router
and prototype losses, and task-adaptive head refinement. Takes about three
minutes.

    python demos/03_continual_stream.py
"""

import numpy as np

from smope.continual import (StreamSpec, ablation_stage, faa_caa, full_method, generate_task_stream,
                             run_stream)
from smope.model import ModelConfig

seed = 0
stream = generate_task_stream(StreamSpec(), seed)
print(f"{len(stream.tasks)} tasks, classes per task:", [list(t.classes) for t in stream.tasks])

for row in ("One Prompt", "+ Prototype Loss"):
    cfg, hyper = ablation_stage(row, ModelConfig(), full_method())
    _, acc, _ = run_stream(cfg, stream, hyper, seed,
                           on_task=lambda st, task, r, log: print(f"  after task {task.index}: A_t={np.mean(r):.3f}"))
    faa, caa = faa_caa(acc)
    print(f"{row}: FAA={faa:.3f} CAA={caa:.3f}")
    for r in acc:
        print("   ", " ".join(f"{v:.2f}" for v in r))
