"""Federated training: local updates, audited parameter exchange, averaging.

One global round is: the server Deploys the global parameters to every
client, each client runs P local epochs of mini-batch Adam on its own
data, Uploads the result, and the server replaces the global parameters
with the elementwise mean of the uploads. Every message crosses an
audited in-process channel that rejects image-shaped payloads, so the
privacy boundary is enforced mechanically rather than by convention.

All randomness is keyed: client k's shuffle stream for epoch p of round
q depends only on (seed, k, q, p), so results are independent of client
scheduling order.
"""

import hashlib
import struct
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .autodiff import AdamState, ParamSet, Tensor, adam_step, backward
from .model import LatentBatch, UNetConfig, reconstruct, unet_init
from .ops import l1_loss
from .sites import SiteDataset, SiteProfile

__all__ = [
    "FLConfig",
    "Message",
    "MESSAGE_KINDS",
    "Channel",
    "PrivacyViolation",
    "ClientState",
    "encode_message",
    "decode_message",
    "lr_for_round",
    "local_train",
    "local_step_generator",
    "aggregate",
    "run_flmr",
    "run_scenario",
    "STRATEGIES",
]

STRATEGIES = ("Single", "Cross", "Fused", "Mix", "FLMR", "FLMRCM")


@dataclass(frozen=True)
class FLConfig:
    image_size: int = 64
    local_epochs: int = 2
    global_epochs: int = 20
    lr1: float = 1e-4
    lr2: float = 1e-5
    batch_size: int = 8
    lambda_adv: float = 1.0
    acceleration: float = 4.0
    center_fraction: float = 0.08
    base_channels: int = 8
    depth: int = 3
    seed: int = 0
    weighted_aggregate: bool = False
    persist_adam: bool = False
    inverted_source_term: bool = False

    def __post_init__(self):
        if self.local_epochs < 1 or self.global_epochs < 1:
            raise ValueError("local_epochs and global_epochs must be >= 1")
        if not self.lr1 > self.lr2 > 0:
            raise ValueError("learning rates must satisfy lr1 > lr2 > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.image_size < 2 or (self.image_size & (self.image_size - 1)) != 0:
            raise ValueError("image_size must be a power of two")
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")

    def model_config(self) -> UNetConfig:
        return UNetConfig(1, self.base_channels, self.depth)


def lr_for_round(cfg: FLConfig, round_index: int) -> float:
    """lr1 for the first 80% of rounds (integer arithmetic), lr2 after."""
    return cfg.lr1 if round_index < (4 * cfg.global_epochs) // 5 else cfg.lr2


# -- messages and the audited channel -----------------------------------------

MESSAGE_KINDS = ("Deploy", "Upload", "LatentRequest", "LatentReply", "EncoderUpdate")
_PAYLOAD_NONE, _PAYLOAD_PARAMS, _PAYLOAD_LATENT = 0, 1, 2


class PrivacyViolation(RuntimeError):
    """A message tried to carry image-shaped data or raw samples."""


@dataclass
class Message:
    kind: str
    round: int
    sender: str
    receiver: str
    payload: object = None

    def __post_init__(self):
        if self.kind not in MESSAGE_KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")


def encode_message(msg: Message) -> bytes:
    if msg.payload is None:
        tag, body = _PAYLOAD_NONE, b""
    elif isinstance(msg.payload, ParamSet):
        tag, body = _PAYLOAD_PARAMS, msg.payload.to_bytes()
    elif isinstance(msg.payload, LatentBatch):
        tag, body = _PAYLOAD_LATENT, msg.payload.to_bytes()
    else:
        raise TypeError(f"unsupported payload type {type(msg.payload).__name__}")
    sender = msg.sender.encode("utf-8")
    receiver = msg.receiver.encode("utf-8")
    return b"".join(
        [
            struct.pack("<BI", MESSAGE_KINDS.index(msg.kind), msg.round),
            struct.pack("<H", len(sender)), sender,
            struct.pack("<H", len(receiver)), receiver,
            struct.pack("<B", tag), body,
        ]
    )


def decode_message(raw: bytes) -> Message:
    kind_idx, round_index = struct.unpack_from("<BI", raw, 0)
    pos = 5
    (ns,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    sender = raw[pos:pos + ns].decode("utf-8")
    pos += ns
    (nr,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    receiver = raw[pos:pos + nr].decode("utf-8")
    pos += nr
    tag = raw[pos]
    body = raw[pos + 1:]
    if tag == _PAYLOAD_NONE:
        payload = None
    elif tag == _PAYLOAD_PARAMS:
        payload = ParamSet.from_bytes(body)
    elif tag == _PAYLOAD_LATENT:
        payload = LatentBatch.from_bytes(body)
    else:
        raise ValueError(f"unknown payload tag {tag}")
    return Message(MESSAGE_KINDS[kind_idx], round_index, sender, receiver, payload)


def _audit_arrays(payload, image_size: int):
    if payload is None:
        return
    if isinstance(payload, ParamSet):
        arrays = [t.data for _, t in payload]
    elif isinstance(payload, LatentBatch):
        arrays = [payload.features.data]
    elif isinstance(payload, Tensor):
        arrays = [payload.data]
    else:
        raise PrivacyViolation(
            f"payload type {type(payload).__name__} is not allowed on the channel"
        )
    for arr in arrays:
        if arr.ndim >= 2 and arr.shape[-1] == image_size and arr.shape[-2] == image_size:
            raise PrivacyViolation(
                f"payload contains an image-shaped array {arr.shape}"
            )


@dataclass
class ChannelRecord:
    kind: str
    round: int
    sender: str
    receiver: str
    nbytes: int
    digest: str


class Channel:
    """In-process transport; audits and logs every message it carries."""

    def __init__(self, image_size: int):
        self.image_size = image_size
        self.records: List[ChannelRecord] = []

    def send(self, msg: Message) -> Message:
        _audit_arrays(msg.payload, self.image_size)
        raw = encode_message(msg)
        self.records.append(
            ChannelRecord(
                msg.kind, msg.round, msg.sender, msg.receiver,
                len(raw), hashlib.sha256(raw).hexdigest(),
            )
        )
        return msg

    def count(self, kind: str) -> int:
        return sum(1 for r in self.records if r.kind == kind)


# -- local training -------------------------------------------------------------


@dataclass
class ClientState:
    site: SiteDataset
    client_index: int
    base_seed: int
    batch_size: int
    adam: Optional[AdamState] = None
    last_loss: float = float("nan")

    @property
    def site_id(self) -> str:
        return self.site.profile.site_id


def make_batches(n: int, batch_size: int, rng) -> List[np.ndarray]:
    """Shuffled batch index lists; incomplete trailing batches are dropped."""
    eff = min(batch_size, n)
    order = rng.permutation(n)
    return [order[i * eff:(i + 1) * eff] for i in range(n // eff)]


def _batch_tensors(samples, idx) -> tuple:
    x = np.stack([samples[i].input.data for i in idx])[:, None, :, :]
    y = np.stack([samples[i].reference.data for i in idx])[:, None, :, :]
    return Tensor(x), Tensor(y)


def recon_loss(params: ParamSet, x: Tensor, y: Tensor):
    """Mean over the batch of per-image L1 reconstruction error."""
    return l1_loss(reconstruct(params, x), y) * (1.0 / x.data.shape[0])


def local_step_generator(client: ClientState, params: ParamSet, P: int, lr: float,
                         round_index: int = 0, persist_adam: bool = False,
                         batch_hook=None):
    """Drive P local epochs one mini-batch at a time (yields after each).

    ``params`` is updated in place with Adam on the batch-mean L1 loss.
    Shuffling is keyed on (base_seed, client_index, round_index, epoch),
    so the trajectory is a pure function of the arguments regardless of
    how generators from different clients are interleaved. When
    ``batch_hook`` is set it runs after each reconstruction update with
    (params, x, epoch, step); when it is None this code path performs
    exactly the plain federated local update, consuming no extra random
    draws.
    """
    samples = client.site.train
    if not samples:
        raise ValueError(f"client {client.site_id!r} has no training data")
    adam = None
    if persist_adam and client.adam is not None:
        adam = client.adam
    if adam is None:
        adam = AdamState.for_params(params)
    if persist_adam:
        client.adam = adam
    epoch_loss = float("nan")
    for p in range(P):
        rng = np.random.default_rng(
            np.random.SeedSequence((client.base_seed, client.client_index, round_index, p))
        )
        losses = []
        for step, idx in enumerate(make_batches(len(samples), client.batch_size, rng)):
            x, y = _batch_tensors(samples, idx)
            loss = recon_loss(params, x, y)
            if lr != 0.0:
                backward(loss)
                adam_step(params, adam, lr)
            losses.append(loss.item())
            if batch_hook is not None:
                batch_hook(params, x, p, step)
            yield
        epoch_loss = float(np.mean(losses))
    client.last_loss = epoch_loss


def local_train(client: ClientState, params_in: ParamSet, P: int, lr: float,
                round_index: int = 0, persist_adam: bool = False) -> ParamSet:
    """P epochs of mini-batch Adam on the client's data; returns new params."""
    params = params_in.clone(requires_grad=True)
    for _ in local_step_generator(client, params, P, lr, round_index, persist_adam):
        pass
    return params


def aggregate(uploads: List[ParamSet], weights=None) -> ParamSet:
    """Elementwise average with a fixed, order-independent summation order.

    Per entry, the K arrays are summed in byte-lexicographic order, so
    permuting ``uploads`` cannot change the result. When every upload is
    bit-identical the first is cloned outright, which keeps
    aggregate([p, ..., p]) == p exact (a naive sum-then-divide would not
    be, e.g. (3 * 0.1) / 3 != 0.1 in binary floating point).
    """
    if not uploads:
        raise ValueError("aggregate needs at least one upload")
    first = uploads[0]
    for u in uploads[1:]:
        if not first.shape_compatible(u):
            a, b = set(first.names()), set(u.names())
            diff = sorted(a.symmetric_difference(b))
            label = diff[0] if diff else next(
                n for n, t in first
                if u.get(n).data.shape != t.data.shape
            )
            raise ValueError(f"uploads are not shape-compatible at entry {label!r}")
    if weights is not None and len(weights) != len(uploads):
        raise ValueError("one weight per upload required")
    if len(uploads) == 1:
        return first.clone(requires_grad=False)
    out = []
    k = len(uploads)
    for name in first.names():
        arrays = [u.get(name).data for u in uploads]
        if weights is None:
            if all(a.tobytes() == arrays[0].tobytes() for a in arrays[1:]):
                out.append((name, Tensor(arrays[0].copy())))
                continue
            acc = None
            for a in sorted(arrays, key=lambda a: a.tobytes()):
                acc = a.copy() if acc is None else acc + a
            out.append((name, Tensor(acc / k)))
        else:
            total = float(sum(weights))
            pairs = sorted(zip(arrays, weights), key=lambda p: p[0].tobytes())
            acc = None
            for a, w in pairs:
                term = a * (w / total)
                acc = term if acc is None else acc + term
            out.append((name, Tensor(acc)))
    return ParamSet(out)


# -- the global round loop --------------------------------------------------------


def init_global_params(cfg: FLConfig) -> ParamSet:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
    return unet_init(cfg.model_config(), rng)


def make_clients(cfg: FLConfig, sites: List[SiteDataset]) -> List[ClientState]:
    return [
        ClientState(site, i, cfg.seed, cfg.batch_size) for i, site in enumerate(sites)
    ]


def run_flmr(cfg: FLConfig, sites: List[SiteDataset]):
    """Federated averaging over ``sites``; returns (global params, log).

    The log has one entry per round: learning rate, per-client training
    loss, and a digest of the aggregated parameters (used to check that
    the next round's Deploy carries exactly the aggregate).
    """
    if not sites:
        raise ValueError("run_flmr needs at least one site")
    _check_sites(cfg, sites)
    channel = Channel(cfg.image_size)
    clients = make_clients(cfg, sites)
    global_params = init_global_params(cfg)
    rounds = []
    for q in range(cfg.global_epochs):
        lr = lr_for_round(cfg, q)
        uploads = []
        for client in clients:
            channel.send(Message("Deploy", q, "server", client.site_id, global_params))
            new_params = local_train(
                client, global_params, cfg.local_epochs, lr,
                round_index=q, persist_adam=cfg.persist_adam,
            )
            channel.send(Message("Upload", q, client.site_id, "server", new_params))
            uploads.append(new_params)
        weights = [len(s.train) for s in sites] if cfg.weighted_aggregate else None
        global_params = aggregate(uploads, weights)
        rounds.append(
            {
                "round": q,
                "lr": lr,
                "client_loss": {c.site_id: c.last_loss for c in clients},
                "global_digest": hashlib.sha256(global_params.to_bytes()).hexdigest(),
            }
        )
    return global_params, {"rounds": rounds, "channel": channel}


def _check_sites(cfg: FLConfig, sites: List[SiteDataset]):
    seen = set()
    for site in sites:
        sid = site.profile.site_id
        if sid in seen:
            raise ValueError(f"duplicate site id {sid!r}")
        seen.add(sid)
        for s in site.train[:1] + site.test[:1]:
            h, w = s.reference.data.shape
            if h != cfg.image_size or w != cfg.image_size:
                raise ValueError(
                    f"site {sid!r} images are {h}x{w}, config says {cfg.image_size}"
                )


def _pooled_site(sites: List[SiteDataset]) -> SiteDataset:
    train = [s for site in sites for s in site.train]
    test = [s for site in sites for s in site.test]
    profile = SiteProfile("+".join(site.profile.site_id for site in sites))
    return SiteDataset(profile, train, test)


def run_scenario(strategy: str, cfg: FLConfig, train_sites: List[SiteDataset],
                 test_site: SiteDataset):
    """Train per ``strategy`` and score on the held-out site's test split.

    Returns (MetricsReport, artifacts) where artifacts carries the final
    parameters ("params": ParamSet, or a list for Fused) and the round
    log ("log").
    """
    from . import crosssite
    from .metrics import evaluate, psnr, ssim, MetricsReport, data_range_of, predict

    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if not train_sites:
        raise ValueError("at least one training site required")
    meta = {
        "strategy": strategy,
        "train_sites": [s.profile.site_id for s in train_sites],
        "test_site": test_site.profile.site_id,
        "seed": cfg.seed,
    }
    if strategy in ("Single", "Cross"):
        if len(train_sites) != 1:
            raise ValueError(f"{strategy} trains on exactly one site")
        params, log = run_flmr(cfg, train_sites)
    elif strategy == "Mix":
        params, log = run_flmr(cfg, [_pooled_site(train_sites)])
    elif strategy == "FLMR":
        params, log = run_flmr(cfg, train_sites)
    elif strategy == "FLMRCM":
        params, log = crosssite.run_flmrcm(cfg, train_sites, test_site)
    else:
        # Fused: average the reconstructions of independently trained models
        models = []
        logs = []
        for site in train_sites:
            p, site_log = run_flmr(cfg, [site])
            models.append(p.detached())
            logs.append(site_log)
        report = MetricsReport(**meta)
        for i, sample in enumerate(test_site.test):
            preds = [predict(m, sample) for m in models]
            fused = np.mean(preds, axis=0)
            ref = sample.reference.data
            dr = data_range_of(ref)
            report.per_sample.append((i, ssim(fused, ref, dr), psnr(fused, ref, dr)))
        return report, {"params": models, "log": {"runs": logs}}
    return evaluate(params, test_site.test, **meta), {"params": params, "log": log}
