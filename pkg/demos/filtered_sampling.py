"""How top-k and top-p reshape a next-token distribution.

    python demos/filtered_sampling.py
"""
import numpy as np
import torch

from nerfvq.diffcore import make_generator
from nerfvq.stage2 import SamplerConfig, filter_probs, filtered_sample

p = torch.tensor([0.40, 0.25, 0.15, 0.10, 0.06, 0.04])
print("original      ", np.round(p.numpy(), 3))
for k, top_p in [(6, 1.0), (3, 1.0), (6, 0.8), (3, 0.5), (1, 1.0)]:
    kept = filter_probs(p, k, top_p)
    print(f"top_k={k} top_p={top_p:<3}", np.round(kept.numpy(), 3))

# the kept mass is the smallest prefix reaching top_p; draws follow the renormalised survivors
draws = filtered_sample(torch.tensor([0.5, 0.3, 0.2]), SamplerConfig(3, 0.8), make_generator(0), 100_000)
freq = np.bincount(draws.numpy(), minlength=3) / len(draws)
print("empirical frequencies for (0.5, 0.3, 0.2), top_p=0.8:", np.round(freq, 4), "expected (0.625, 0.375, 0)")
