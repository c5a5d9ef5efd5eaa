"""Pure numpy implementations of the hot kernels.

Reference semantics for the compiled backend: ``_speedups`` must match these
functions (exactly for integer/boolean outputs, to float tolerance where
transcendentals are involved).
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def gae_scan(rewards, values, dones, gamma, lam):
    """Reverse-scan advantages: A_t = delta_t + gamma*lam*(1-done_t)*A_{t+1}.

    delta_t = r_t + gamma*V_{t+1}*(1-done_t) - V_t, with V beyond the buffer
    taken as 0 (the buffer holds whole episodes, so the last step is terminal).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    n = rewards.shape[0]
    adv = np.empty(n, dtype=np.float64)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        next_value = values[t + 1] if t + 1 < n else 0.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv


def masked_softmax_1d(logits, mask):
    """Softmax over the unmasked entries; masked entries get exactly 0."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("masked_softmax: mask has no set bits")
    out = np.zeros(logits.shape[0], dtype=np.float64)
    sel = logits[mask]
    sel = np.exp(sel - sel.max())
    out[mask] = sel / sel.sum()
    return out


def categorical_sample(probs, u):
    """Index of the first position whose cumulative probability exceeds u.

    u is a uniform draw in [0, 1); passing it in keeps sampling independent
    of the backend's RNG plumbing. Falls back to the last nonzero entry when
    rounding pushes u past the total mass.
    """
    probs = np.asarray(probs, dtype=np.float64)
    cum = np.cumsum(probs)
    idx = int(np.searchsorted(cum, u * cum[-1], side="right"))
    if idx >= probs.shape[0]:
        idx = int(np.flatnonzero(probs > 0.0)[-1])
    return idx


def action_mask(asked, triplets, parent_index):
    """mask[j] = not asked[j] and (j is first-layer or parent(j) confirmed).

    parent_index holds -1 for first-layer symptoms and the parent id for
    second-layer ones; confirmation is read from the [denied, confirmed,
    unknown] triplet block.
    """
    asked = np.asarray(asked, dtype=bool)
    triplets = np.asarray(triplets, dtype=np.float64)
    parent_index = np.asarray(parent_index, dtype=np.int64)
    confirmed = triplets[1::3] == 1.0
    parent_ok = np.where(parent_index >= 0, confirmed[np.maximum(parent_index, 0)], True)
    return (~asked) & parent_ok
