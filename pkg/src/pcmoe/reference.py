"""Single-process oracle: the collaborative training loop with direct function calls.

No actors, no frames, no carrier. Experts are called directly on their
owner's parameters; the owner-side SGD still happens right after the expert's
backward pass, as in the distributed protocol.
"""

from __future__ import annotations

import numpy as np

from .data import BatchStream, Dataset
from .model import ExpertHost, backward_local, batch_loss, local_forward, sgd_step, shard_experts
from .numerics import Prng, derive_seed
from .protocol import _TAG_SCHEDULE, TrainConfig


def reference_training(cfg: TrainConfig, datasets: list[Dataset]) -> list[dict[str, np.ndarray]]:
    """Final per-party parameters (same naming as :meth:`PartyModel.named_params`)."""
    _, models = shard_experts(cfg.model, cfg.n, cfg.seed)
    hosts = [ExpertHost(m.experts, cfg.lr_experts) for m in models]

    def services(owner: int) -> ExpertHost:
        return hosts[owner]

    streams = [BatchStream(d, cfg.batch_size, cfg.seed, i) for i, d in enumerate(datasets)]
    rng = Prng(derive_seed(cfg.seed, _TAG_SCHEDULE))
    session = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(cfg.n)
        for i in order:
            for _ in range(cfg.batches_per_turn):
                tokens, labels = streams[i].next_batch()
                logits, cache = local_forward(models[i], tokens, services, session)
                _, grad = batch_loss(logits, labels)
                backward_local(models[i], cache, grad, services)
                sgd_step(models[i], cfg.lr)
                session += 1
    return [m.named_params() for m in models]
