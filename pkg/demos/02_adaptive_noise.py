"""Adaptive noise spreads routing over more prompt experts.

During training, each head tracks how often each expert was selected. Experts
used at least as often as the head's average are penalised by epsilon times the
spread of the current scores. Less-used experts then get a chance to win. The
penalty scales with the scores, so the selection does not depend on their
units.

Usage is counted after each task without noise, so the noise only matters
through what the keys learn. The router loss keeps the scores of the experts
that training selected high. Without it, cross-entropy tends to push those
scores back down, and routing drifts back to the busy experts.

This script trains the full method at epsilon 0 and 1 on a small stream and
compares usage entropy, the mean over heads of the entropy of normalised
selection frequencies (log N_p means perfectly uniform). It takes about
ten seconds.

    python demos/02_adaptive_noise.py
"""

import numpy as np

from smope.continual import StreamSpec, full_method, generate_task_stream, mean_usage_entropy, run_stream
from smope.model import ModelConfig
from smope.routing import NoiseConfig, adaptive_noise, select_experts

# the penalty on a single head
scores = np.array([2.0, 1.5, 0.2, -0.3])
freq = np.array([0.6, 0.3, 0.05, 0.05])          # expert 0 and 1 are busy
for eps in (0.0, 0.5, 1.0):
    noise = adaptive_noise(scores, freq, NoiseConfig(eps))
    print(f"eps={eps:.1f} noise={noise} top-2={select_experts(scores, noise, 2)}")

spec = StreamSpec(n_tasks=3, train_per_class=80, test_per_class=40)
cfg = ModelConfig(depth=2, heads=2, embed_dim=32, tokens=spec.tokens + 1, raw_dim=spec.raw_dim)
stream = generate_task_stream(spec, seed=0)
print(f"\nuniform routing would give entropy {np.log(cfg.prompt_length):.3f}")
for eps in (0.0, 1.0):
    state, rows, _ = run_stream(cfg, stream, full_method(epochs=3, epsilon=eps, pretrain_steps=150), seed=0)
    print(f"eps={eps:.1f}: usage entropy {mean_usage_entropy(state):.3f}")
    for layer, blk in enumerate(state.prompts):
        print(f"  layer {layer} selection frequency per head:\n{np.round(blk.frequency, 2)}")
