"""Watch the consensus memory and the group triplet loss on toy vectors.

Two classes live in a 4-d space. Each step delivers a noisy (A, B) consensus
pair per class; the memory smooths them with momentum beta, and the triplet
loss compares each class's live pair against the other class's memory.
"""

import numpy as np

from mccl.mcm import ConsensusMemory, mcm_loss
from mccl.tensor import Tensor

rng = np.random.default_rng(0)
centres = {"cat": np.array([1.0, 0.0, 0.0, 0.0]), "dog": np.array([0.0, 1.0, 0.0, 0.0])}
memory = ConsensusMemory(beta=0.1, alpha=0.1)

print("step  |mem(cat).A - centre|  loss")
for step in range(1, 11):
    live = {}
    for name, c in centres.items():
        a = c + 0.3 * rng.normal(size=4)
        b = c + 0.3 * rng.normal(size=4)
        memory.update(name, a, b)
        live[name] = (Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
    loss = mcm_loss(list(centres), memory, live).item()
    drift = np.linalg.norm(memory.get("cat")[0] - centres["cat"])
    print(f"{step:4d}  {drift:20.3f}  {loss:6.3f}")

# Negative loss means a class's two halves sit closer to each other than to the
# other class's memory, by more than the margin. The loss has no floor at zero
# unless clamp=True is passed.
hinged = ConsensusMemory(beta=0.1, alpha=0.1, clamp=True)
hinged.load_state(memory.state())
print("\nlast step without hinge:", round(mcm_loss(list(centres), memory, live).item(), 3))
print("last step with hinge:   ", round(mcm_loss(list(centres), hinged, live).item(), 3))
