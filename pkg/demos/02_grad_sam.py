"""Grad-SAM: which parts of a feature map drive the similarity score.

The similarity of two feature maps is the mean channel cosine.  Its gradient
with respect to the first map, summed over space, gives one weight per
channel; the ReLU of the weighted channel sum is the activation map.  Here we
check the closed-form gradient against finite differences, then show that a
query map shares activation with a reference only where their content agrees.

    python demos/02_grad_sam.py
"""

import numpy as np

from disam import samcore
from disam.gradcheck import check_similarity_gradient

result = check_similarity_gradient(n_pairs=50, shape=(8, 5, 5), seed=0)
print(f"closed-form vs central differences: max relative error {result.max_rel_error:.2e} "
      f"over {result.n_pairs} pairs -> {'ok' if result.passed else 'FAILED'}")

rng = np.random.default_rng(0)
reference = rng.normal(size=(8, 6, 6))
query = rng.normal(size=(8, 6, 6))
# copy the reference into the left half: that region should light up
query[:, :, :3] = reference[:, :, :3]

print(f"\nsimilarity(query, reference) = {samcore.mean_channel_cosine(query, reference):+.3f}")
print(f"similarity(reference, reference) = {samcore.mean_channel_cosine(reference, reference):+.3f}")
weights = samcore.sam_weights(query, reference)
print("channel weights:", np.array2string(weights, precision=3))

L = samcore.activation_map(query, reference)
left, right = L[:, :3].mean(), L[:, 3:].mean()
print(f"\nactivation map (rows of the 6x6 grid):")
for row in L:
    print("  " + " ".join(f"{v:5.3f}" for v in row))
print(f"mean activation: shared half {left:.3f}, unrelated half {right:.3f}")

# the weights vanish when both maps are the same: nothing to move
print(f"\nmax |weight| for identical maps: {np.abs(samcore.sam_weights(reference, reference)).max():.1e}")
