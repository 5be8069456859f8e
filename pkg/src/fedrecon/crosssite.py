"""Cross-site latent alignment layered on top of federated training.

Each source site gets a private domain identifier that learns to tell
its latents from the target site's; the encoders then train to confuse
it. The target never shares images: it answers LatentRequest messages
with detached latent features computed on its own inputs, and applies
encoder updates from the latent gradient shipped back to it, so its
backward pass stays local. The target holds the encoder part of the
shared model: each round it adopts the freshly aggregated encoder, and
the shipped gradients adapt that copy within the round. The per-round
refresh keeps the target encoder anchored to features that actually
reconstruct; an unanchored persistent copy has no data term of its own
and drifts without bound.

Per source mini-batch, three alternating sub-steps run in order:

1. reconstruction: full-model Adam step on the batch-mean L1 loss
   (identical, op for op, to the plain federated update);
2. identifier: Adam step on its discrimination loss with both encoders
   frozen (latents are detached constants);
3. encoders: Adam step of the source encoder and, via the shipped latent
   gradient, the target encoder, on the adversarial confusion loss with
   the identifier frozen.

With lambda_adv == 0 the whole machinery is skipped and the run reduces
exactly, bit for bit, to plain federated training.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import fl
from .autodiff import AdamState, ParamSet, Tensor, adam_step, backward, backward_from
from .model import (
    DomainIdentifierConfig,
    LatentBatch,
    encoder_forward,
    identifier_forward,
    identifier_init,
    is_encoder_param,
    is_identifier_param,
)
from .ops import bce_terms
from .sites import SiteDataset

__all__ = [
    "AlignmentPair",
    "TargetEncoderHandle",
    "identifier_loss",
    "encoder_adv_loss",
    "run_flmrcm",
    "latent_mean_distance",
    "site_latent_means",
]

# rng stream tags (first element after the global seed)
_TAG_IDENTIFIER = 101
_TAG_TARGET_BATCH = 102


@dataclass
class AlignmentPair:
    """One source site's private identifier and its optimizer state."""

    source_site: str
    target_site: str
    identifier_params: ParamSet
    identifier_adam: AdamState


@dataclass
class TargetEncoderHandle:
    """The target-side encoder parameters; version counts every update."""

    encoder_params: ParamSet
    version: int = 0


def _detached_latent(z: LatentBatch) -> LatentBatch:
    return LatentBatch(z.features.detach(), z.origin_site)


def identifier_loss(cparams: ParamSet, z_s: LatentBatch, z_t: LatentBatch):
    """Discrimination loss: push source latents to 1, target latents to 0.

    Latents are treated as constants; only the identifier receives
    gradients.
    """
    if z_s.features.data.shape[0] != z_t.features.data.shape[0]:
        raise ValueError("source and target latent batches must be the same size")
    p_s = identifier_forward(cparams, _detached_latent(z_s))
    p_t = identifier_forward(cparams, _detached_latent(z_t))
    return bce_terms(p_s)[0] + bce_terms(p_t)[1]


def encoder_adv_loss(cparams: ParamSet, z_s: LatentBatch, z_t: LatentBatch,
                     inverted_source_term: bool = False):
    """Confusion loss for the encoders; the identifier is frozen.

    The default form penalizes -log C(z) on both latent batches, exactly
    as the training objective is stated; ``inverted_source_term``
    switches the source term to -log(1 - C(z_s)), the conventional
    two-sided adversarial variant, for comparison runs.
    """
    if z_s.features.data.shape[0] != z_t.features.data.shape[0]:
        raise ValueError("source and target latent batches must be the same size")
    frozen = cparams.detached()
    p_s = identifier_forward(frozen, z_s)
    p_t = identifier_forward(frozen, z_t)
    source_term = bce_terms(p_s)[1] if inverted_source_term else bce_terms(p_s)[0]
    return source_term + bce_terms(p_t)[0]


class _TargetSite:
    """Target-side endpoint: serves latents, applies shipped gradients."""

    def __init__(self, site: SiteDataset, cfg: fl.FLConfig, channel: fl.Channel):
        if not site.train:
            raise ValueError("target site has no inputs for alignment")
        self.site = site
        self.site_id = site.profile.site_id
        self.cfg = cfg
        self.channel = channel
        self.handle: Optional[TargetEncoderHandle] = None
        self.adam: Optional[AdamState] = None
        self._live_latents: Dict[str, Tensor] = {}

    def sync_encoder(self, global_params: ParamSet, round_index: int) -> None:
        """Adopt the freshly aggregated global encoder for this round."""
        enc = global_params.subset(is_encoder_param).clone(requires_grad=True)
        self.channel.send(
            fl.Message("Deploy", round_index, "server", self.site_id, enc)
        )
        version = self.handle.version + 1 if self.handle else 1
        self.handle = TargetEncoderHandle(enc, version)
        self.adam = AdamState.for_params(enc)
        self._live_latents.clear()

    def _sample_inputs(self, source_index: int, round_index: int, epoch: int,
                       step: int, batch_size: int) -> Tensor:
        samples = self.site.train
        rng = np.random.default_rng(
            np.random.SeedSequence(
                (self.cfg.seed, _TAG_TARGET_BATCH, source_index, round_index, epoch, step)
            )
        )
        n = len(samples)
        idx = rng.choice(n, size=batch_size, replace=n < batch_size)
        x = np.stack([samples[i].input.data for i in idx])[:, None, :, :]
        return Tensor(x)

    def serve_latent(self, source_id: str, source_index: int, round_index: int,
                     epoch: int, step: int, batch_size: int) -> LatentBatch:
        """Answer one LatentRequest: fresh target latents, tape kept here."""
        self.channel.send(
            fl.Message("LatentRequest", round_index, source_id, self.site_id)
        )
        x_t = self._sample_inputs(source_index, round_index, epoch, step, batch_size)
        z_t, _ = encoder_forward(self.handle.encoder_params, x_t, self.site_id)
        self._live_latents[source_id] = z_t.features
        reply = _detached_latent(z_t)
        self.channel.send(
            fl.Message("LatentReply", round_index, self.site_id, source_id, reply)
        )
        return reply

    def apply_encoder_update(self, source_id: str, round_index: int,
                             latent_grad: LatentBatch, lr: float) -> None:
        """Backprop a shipped latent gradient into the local encoder."""
        self.channel.send(
            fl.Message("EncoderUpdate", round_index, source_id, self.site_id, latent_grad)
        )
        root = self._live_latents.pop(source_id)
        backward_from(root, latent_grad.features.data)
        adam_step(self.handle.encoder_params, self.adam, lr)
        self.handle.version += 1


def _make_pairs(cfg: fl.FLConfig, source_ids: List[str], target_id: str) -> Dict[str, AlignmentPair]:
    icfg = DomainIdentifierConfig(cfg.model_config().latent_channels)
    pairs = {}
    for i, sid in enumerate(source_ids):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _TAG_IDENTIFIER, i)))
        params = identifier_init(icfg, rng)
        pairs[sid] = AlignmentPair(sid, target_id, params, AdamState.for_params(params))
    return pairs


@dataclass
class _SourceRuntime:
    client: fl.ClientState
    pair: AlignmentPair
    params: ParamSet
    encoder_adam: AdamState = None
    steps: object = None


def source_site_step(runtime: _SourceRuntime, target: _TargetSite, cfg: fl.FLConfig,
                     lr: float, round_index: int, params: ParamSet, x_s: Tensor,
                     epoch: int, step: int) -> None:
    """Sub-steps 2 and 3 for one batch (sub-step 1 already ran).

    The target's references are never touched: only detached target
    latents arrive, and only the latent gradient leaves.

    Each sub-step owns an Adam state, and Adam normalizes the loss scale
    away, so lambda_adv also scales the encoder sub-step's learning rate;
    that is the only way the weight can keep its documented role of
    controlling the adversarial contribution relative to reconstruction.
    """
    z_t = target.serve_latent(
        runtime.client.site_id, runtime.client.client_index, round_index,
        epoch, step, x_s.data.shape[0],
    )
    # sub-step 2: identifier learns to discriminate; encoders frozen
    pair = runtime.pair
    z_s_live, _ = encoder_forward(params, x_s, runtime.client.site_id)
    backward(identifier_loss(pair.identifier_params, z_s_live, z_t))
    adam_step(pair.identifier_params, pair.identifier_adam, lr)
    # sub-step 3: encoders learn to confuse; identifier frozen
    z_t_leaf = LatentBatch(Tensor(z_t.features.data.copy(), requires_grad=True),
                           z_t.origin_site)
    loss = encoder_adv_loss(pair.identifier_params, z_s_live, z_t_leaf,
                            cfg.inverted_source_term) * cfg.lambda_adv
    backward(loss)
    adv_lr = lr * cfg.lambda_adv
    target.apply_encoder_update(
        runtime.client.site_id, round_index,
        LatentBatch(Tensor(z_t_leaf.features.grad.copy()), runtime.client.site_id),
        adv_lr,
    )
    enc_subset = params.subset(is_encoder_param)
    adam_step(enc_subset, runtime.encoder_adam, adv_lr)


def run_flmrcm(cfg: fl.FLConfig, source_sites: List[SiteDataset], target_site: SiteDataset):
    """Federated rounds with per-source adversarial alignment to the target.

    Sources advance in round-robin order one batch at a time, so the
    target serves latent requests in a fixed deterministic interleaving.
    The server aggregates only reconstruction parameters; identifiers
    stay at their sites.
    """
    if not source_sites:
        raise ValueError("run_flmrcm needs at least one source site")
    if cfg.lambda_adv == 0.0:
        return fl.run_flmr(cfg, source_sites)
    fl._check_sites(cfg, source_sites)
    for s in target_site.train[:1]:
        if s.reference.data.shape != (cfg.image_size, cfg.image_size):
            raise ValueError("target site images do not match config image_size")
    channel = fl.Channel(cfg.image_size)
    clients = fl.make_clients(cfg, source_sites)
    target = _TargetSite(target_site, cfg, channel)
    pairs = _make_pairs(cfg, [c.site_id for c in clients], target.site_id)
    global_params = fl.init_global_params(cfg)
    rounds = []
    for q in range(cfg.global_epochs):
        lr = fl.lr_for_round(cfg, q)
        target.sync_encoder(global_params, q)
        runtimes = []
        for client in clients:
            channel.send(fl.Message("Deploy", q, "server", client.site_id, global_params))
            params = global_params.clone(requires_grad=True)
            runtime = _SourceRuntime(client, pairs[client.site_id], params)
            runtime.encoder_adam = AdamState.for_params(params.subset(is_encoder_param))

            def hook(p, x, epoch, step, _runtime=runtime):
                source_site_step(_runtime, target, cfg, lr, q, p, x, epoch, step)

            runtime.steps = fl.local_step_generator(
                client, params, cfg.local_epochs, lr, round_index=q,
                persist_adam=cfg.persist_adam, batch_hook=hook,
            )
            runtimes.append(runtime)
        active = list(runtimes)
        while active:
            still = []
            for runtime in active:
                try:
                    next(runtime.steps)
                    still.append(runtime)
                except StopIteration:
                    pass
            active = still
        uploads = []
        for runtime in runtimes:
            channel.send(
                fl.Message("Upload", q, runtime.client.site_id, "server", runtime.params)
            )
            uploads.append(runtime.params)
        weights = [len(s.train) for s in source_sites] if cfg.weighted_aggregate else None
        global_params = fl.aggregate(uploads, weights)
        leaked = [n for n in global_params.names() if is_identifier_param(n)]
        assert not leaked, f"identifier parameters reached the server: {leaked}"
        rounds.append(
            {
                "round": q,
                "lr": lr,
                "client_loss": {c.site_id: c.last_loss for c in clients},
                "target_encoder_version": target.handle.version,
                "global_digest": hashlib.sha256(global_params.to_bytes()).hexdigest(),
            }
        )
    return global_params, {"rounds": rounds, "channel": channel}


# -- measurement helpers ------------------------------------------------------


def site_latent_means(params: ParamSet, samples) -> np.ndarray:
    """Mean flattened latent over a set of samples (the mean embedding)."""
    frozen = params.detached()
    acc = None
    for s in samples:
        x = Tensor(s.input.data[None, None, :, :])
        z, _ = encoder_forward(frozen, x)
        flat = z.features.data.reshape(-1)
        acc = flat.copy() if acc is None else acc + flat
    return acc / len(samples)


def latent_mean_distance(params: ParamSet, samples_a, samples_b) -> float:
    """L2 distance between two sites' mean latent embeddings."""
    return float(
        np.linalg.norm(site_latent_means(params, samples_a) - site_latent_means(params, samples_b))
    )
