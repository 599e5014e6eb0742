"""The transducer loss against brute force, then Viterbi durations from a lattice."""
import itertools

import numpy as np
import torch

from virtuoso.losses import forced_align, rnnt_loss, viterbi

rng = np.random.default_rng(0)
T, U, V = 4, 2, 4
lattice = torch.as_tensor(rng.normal(size=(T, U + 1, V)))
ids = [1, 2]
blank = V - 1
logp = lattice.log_softmax(-1).numpy()

# enumerate every monotone path: T-1 blanks and U emissions in any order, then a final blank
paths = []
for slots in itertools.combinations(range(T - 1 + U), U):
    moves = ["e" if i in slots else "b" for i in range(T - 1 + U)] + ["b"]
    t = u = 0
    score = 0.0
    for m in moves:
        if m == "b":
            score += logp[t, u, blank]
            t += 1
        else:
            score += logp[t, u, ids[u]]
            u += 1
    paths.append(("".join(moves), score))

brute = -np.logaddexp.reduce([s for _, s in paths])
print(f"{len(paths)} paths, brute-force NLL {brute:.6f}, forward-backward {rnnt_loss(lattice, ids).item():.6f}")

best = max(paths, key=lambda p: p[1])
score, moves = viterbi(lattice, ids)
print("best enumerated path", best[0], round(best[1], 6))
print("viterbi path        ", "".join(moves), round(score, 6))

# durations at mel rate: each encoder frame covers 2 mel frames
a = forced_align(lattice, ids, num_frames=2 * T - 1)
print("encoder durations", a.encoder_durations, "mel durations", a.durations, "sum", a.durations.sum())
print("end-emission convention", forced_align(lattice, ids, 2 * T - 1, emission="end").durations)
