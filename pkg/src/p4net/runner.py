"""Experiment orchestration: data preparation, the two-phase protocol,
baselines and ablations, FedAvg, and metrics output."""
from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import ExperimentConfig
from .features import fit_normalizer, normalize, scatter_batch
from .grouping import (CollaborationGraph, SimilarityCache, form_pairs, grouping_objective,
                       merge_until, model_dissimilarity, random_groups, sample_peers)
from .models import (DistillPair, LinearClassifier, batch_grad, distill_terms, evaluate, forward,
                     per_example_grads, sample_minibatch)
from .network import Bus, Message, MessageKind, aggregate_proxy, run_round
from .numerics import RandomSource, sgd_step
from .privacy import PrivacyLedger, clip_rows, privatize

log = logging.getLogger(__name__)

METRICS_HEADER = ("round", "client_id", "group_id", "test_acc", "proxy_loss", "private_loss", "ledger_used")


@dataclass(frozen=True)
class MetricsRow:
    round: int
    client_id: int
    group_id: int
    test_acc: float
    proxy_loss: float | None
    private_loss: float | None
    ledger_used: int

    def cells(self) -> list[str]:
        def fmt(v):
            return "" if v is None else f"{v:.10g}"
        return [str(self.round), str(self.client_id), str(self.group_id), fmt(self.test_acc),
                fmt(self.proxy_loss), fmt(self.private_loss), str(self.ledger_used)]


def emit_metrics(rows, path, append: bool = False) -> Path:
    """Write metrics rows as CSV, adding the header when the file starts empty."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not append or not path.exists() or path.stat().st_size == 0
        with path.open("w" if not append else "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if fresh:
                w.writerow(METRICS_HEADER)
            w.writerows(r.cells() for r in rows)
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return path


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# --- data preparation ----------------------------------------------------

@dataclass
class ClientData:
    cid: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    cluster: int = 0

    @property
    def feature_dim(self) -> int:
        return self.x_train.shape[1]


def build_shards(cfg: ExperimentConfig) -> list[data_mod.ClientShard]:
    """All ``cfg.clients`` shards, with cluster ``i mod clusters`` label shifts applied."""
    if cfg.dataset == "synthetic":
        L, M, R = cfg.num_classes, cfg.clients, cfg.samples_per_client
        per_class = math.ceil(M / L) * R + math.ceil(M * R / L)
        ds = data_mod.generate_synthetic(L, per_class, cfg.image_size, cfg.separation, cfg.seed)
    else:
        ds = data_mod.load_dataset(cfg.dataset, cfg.dataset_format, cfg.labels_path)
    if cfg.partition == "shard":
        shards = data_mod.partition_shard_based(ds, cfg.shards_per_class, cfg.classes_per_client, cfg.seed)
    else:
        shards = data_mod.partition_alpha_based(ds, cfg.iid_fraction, cfg.clients, cfg.samples_per_client, cfg.seed)
    L = ds.num_classes
    for sh in shards:
        k = sh.client_id % cfg.clusters
        sh.meta["cluster"] = k
        if k:
            perm = (np.arange(L) + k * max(1, L // cfg.clusters)) % L
            sh.train = data_mod.permute_labels(sh.train, perm)
            sh.test = data_mod.permute_labels(sh.test, perm)
    return shards


def shard_inputs(shard: data_mod.ClientShard, use_features: bool) -> ClientData:
    """Flattened model inputs for one client, normalized with its own statistics."""
    if use_features:
        f_train = scatter_batch(shard.train.images)
        f_test = scatter_batch(shard.test.images)
        stats = fit_normalizer(f_train)
        x_train = normalize(f_train, stats).reshape(len(f_train), -1)
        x_test = normalize(f_test, stats).reshape(len(f_test), -1)
    else:
        x_train = shard.train.images.reshape(len(shard.train), -1)
        x_test = shard.test.images.reshape(len(shard.test), -1)
    return ClientData(shard.client_id, x_train, shard.train.labels, x_test, shard.test.labels,
                      shard.meta.get("cluster", 0))


_DATA_FIELDS = ("dataset", "dataset_format", "labels_path", "num_classes", "image_size", "separation",
                "clusters", "partition", "clients", "samples_per_client", "iid_fraction",
                "classes_per_client", "shards_per_class", "eval_fraction", "seed")
_CACHE: OrderedDict = OrderedDict()
_CACHE_SIZE = 8


def prepare_clients(cfg: ExperimentConfig, pool: str = "train") -> list[ClientData]:
    """Inputs for the training clients (``pool="train"``) or the reserved evaluation clients.

    The last ``eval_fraction`` of client ids is held out for hyperparameter
    search. Features are computed once per data configuration and cached.
    """
    key = tuple(getattr(cfg, f) for f in _DATA_FIELDS) + (cfg.uses_features,)
    if key not in _CACHE:
        shards = build_shards(cfg)
        _CACHE[key] = [shard_inputs(s, cfg.uses_features) for s in shards]
        if len(_CACHE) > _CACHE_SIZE:
            _CACHE.popitem(last=False)
    _CACHE.move_to_end(key)
    everyone = _CACHE[key]
    n_train = cfg.train_clients
    chosen = everyone[:n_train] if pool == "train" else everyone[n_train:]
    # renumber so client ids are 0..n-1 within the pool
    return [ClientData(i, c.x_train, c.y_train, c.x_test, c.y_test, c.cluster) for i, c in enumerate(chosen)]


# --- client-side training ------------------------------------------------

@dataclass
class ClientState:
    data: ClientData
    pair: DistillPair
    ledger: PrivacyLedger | None
    batch_rng: RandomSource
    noise_rng: RandomSource
    proxy_loss: float | None = None
    private_loss: float | None = None

    def share(self) -> np.ndarray:
        """The only parameters a client ever hands to the transport."""
        return self.pair.proxy.flat()


def _new_state(cd: ClientData, cfg: ExperimentConfig, num_classes: int, budget: int | None) -> ClientState:
    zero = LinearClassifier.zeros(num_classes, cd.feature_dim)
    return ClientState(
        cd,
        DistillPair(zero.copy(), zero.copy(), cfg.alpha, cfg.beta),
        PrivacyLedger(budget) if budget is not None else None,
        RandomSource.for_client(cfg.seed, cd.cid, "batch"),
        RandomSource.for_client(cfg.seed, cd.cid, "noise"),
    )


def _dp_update(model: LinearClassifier, batch, cfg: ExperimentConfig, sigma: float, n_train: int,
               rng: RandomSource, kl_weight: float = 0.0, target=None):
    """Mean loss and the clipped, noised update direction for ``model`` on ``batch``."""
    loss, _ = distill_terms(model, batch.features, batch.labels, kl_weight, target)
    grads = per_example_grads(model, batch.features, batch.labels, kl_weight, target)
    update = privatize(clip_rows(grads, cfg.clip), cfg.clip, sigma, cfg.sample_ratio, n_train, rng)
    return float(loss.mean()), update


def p4_local_round(st: ClientState, cfg: ExperimentConfig, sigma: float, with_private: bool = True) -> None:
    """K local steps: noise-free private update and DP proxy update on a shared minibatch.

    Each model distills toward the other's pre-step predictions.
    """
    d, pair, lr = st.data, st.pair, cfg.lr_local
    proxy_losses, private_losses = [], []
    for _ in range(cfg.local_steps):
        batch = sample_minibatch(d.x_train, d.y_train, cfg.sample_ratio, st.batch_rng)
        alpha = pair.alpha if with_private else 0.0
        target = forward(pair.private, batch.features) if alpha > 0 else None
        loss_w, upd_w = _dp_update(pair.proxy, batch, cfg, sigma, len(d.y_train), st.noise_rng, alpha, target)
        if with_private:
            teacher = forward(pair.proxy, batch.features) if pair.beta > 0 else None
            loss_t, g_t = batch_grad(pair.private, batch.features, batch.labels, pair.beta, teacher)
            pair.private = pair.private.with_flat(sgd_step(pair.private.flat(), g_t, lr))
            private_losses.append(loss_t)
        pair.proxy = pair.proxy.with_flat(sgd_step(pair.proxy.flat(), upd_w, lr))
        proxy_losses.append(loss_w)
    st.proxy_loss = float(np.mean(proxy_losses))
    st.private_loss = float(np.mean(private_losses)) if private_losses else None


def private_only_round(st: ClientState, cfg: ExperimentConfig) -> None:
    """Non-private local SGD on the private model (cross-entropy only)."""
    d, lr = st.data, cfg.lr_local
    losses = []
    for _ in range(cfg.local_steps):
        batch = sample_minibatch(d.x_train, d.y_train, cfg.sample_ratio, st.batch_rng)
        loss, g = batch_grad(st.pair.private, batch.features, batch.labels)
        st.pair.private = st.pair.private.with_flat(sgd_step(st.pair.private.flat(), g, lr))
        losses.append(loss)
    st.private_loss = float(np.mean(losses))
    st.proxy_loss = None


# --- results -------------------------------------------------------------

@dataclass
class RunResult:
    method: str
    seed: int
    rows: list = field(default_factory=list)
    messages: int = 0
    bytes_sent: int = 0
    graph: CollaborationGraph | None = None
    grouping_objective: float | None = None
    messages_after_exhaustion: int = 0
    path: Path | None = None

    def accuracy_by_round(self) -> dict:
        out: dict = {}
        for r in self.rows:
            out.setdefault(r.round, []).append(r.test_acc)
        return {k: float(np.mean(v)) for k, v in sorted(out.items())}

    @property
    def final_accuracy(self) -> float:
        curve = self.accuracy_by_round()
        return curve[max(curve)]


class _Recorder:
    """Collects rows and flushes them to disk at every evaluation point."""

    def __init__(self, result: RunResult, path):
        self.result = result
        self.path = Path(path) if path else None
        if self.path is not None:
            emit_metrics([], self.path)
            result.path = self.path

    def add(self, rows):
        self.result.rows.extend(rows)
        if self.path is not None:
            emit_metrics(rows, self.path, append=True)


def _is_eval_round(r: int, cfg: ExperimentConfig) -> bool:
    return r % cfg.eval_interval == 0 or r == cfg.rounds


# --- phase 1 over the bus ------------------------------------------------

def probe_over_bus(flats, probes: int, seed: int, bus: Bus, round_: int) -> SimilarityCache:
    """Each client asks ``probes`` random peers for their proxy weights and caches distances."""
    m = len(flats)
    cache = SimilarityCache()
    for i in range(m):
        for j in sample_peers(i, m, probes, RandomSource.for_client(seed, i, "probe")):
            bus.send(Message(MessageKind.PROBE_REQUEST, i, j, round_))
    for j in range(m):
        for req in bus.receive(j):
            bus.send(Message(MessageKind.PROBE_WEIGHTS, j, req.sender, round_, (flats[j],)))
    for i in range(m):
        for msg in bus.receive(i):
            cache.put(i, msg.sender, model_dissimilarity(flats[i], msg.payload[0].ravel()))
    return cache


def _share_similarities(groups, cache: SimilarityCache, bus: Bus, round_: int) -> None:
    for members in groups:
        for i in members:
            row = cache.known(i)
            if not row:
                continue
            ids = sorted(row)
            payload = (np.array([ids, [row[k] for k in ids]], dtype=np.float64),)
            for j in members:
                if j != i:
                    bus.send(Message(MessageKind.GROUP_UPDATE, i, j, round_, payload))
        for j in members:
            bus.receive(j)


def group_clients(flats, cfg: ExperimentConfig, bus: Bus, round_: int) -> CollaborationGraph:
    m = len(flats)
    if m == 1:
        return CollaborationGraph.from_groups(1, [(0,)])
    if cfg.method == "p4_random_groups":
        return random_groups(m, cfg.group_size_max, RandomSource.for_client(cfg.seed, m, "random_groups"))
    rng = RandomSource.for_client(cfg.seed, m, "grouping")
    cache = probe_over_bus(flats, cfg.probe_peers, cfg.seed, bus, round_)
    if cfg.group_size_max == 1:
        return CollaborationGraph.from_groups(m, [(c,) for c in range(m)])
    pairs = form_pairs(cache, range(m), rng)
    _share_similarities(pairs, cache, bus, round_)
    return merge_until(pairs, cache, cfg.group_size_max, rng, m,
                       on_merge=lambda gs: _share_similarities(gs, cache, bus, round_))


# --- methods -------------------------------------------------------------

def _num_classes(cfg: ExperimentConfig, clients) -> int:
    if cfg.dataset == "synthetic":
        return cfg.num_classes
    return int(max(max(c.y_train.max(), c.y_test.max()) for c in clients)) + 1


def _run_grouped(cfg, clients, result, rec, budget) -> None:
    sigma = cfg.sigma
    no_proxy = cfg.method == "p4_no_proxy"
    L = _num_classes(cfg, clients)
    states = [_new_state(c, cfg, L, budget) for c in clients]
    bus = Bus(cfg.drop_probability, RandomSource.for_client(cfg.seed, len(clients), "bus"))
    ledgers = {st.data.cid: st.ledger for st in states}

    def eval_model(st):
        return st.pair.proxy if no_proxy else st.pair.private

    def emit(r, graph):
        rec.add([MetricsRow(r, st.data.cid, int(graph.labels[st.data.cid]),
                            evaluate(eval_model(st), st.data.x_test, st.data.y_test),
                            st.proxy_loss, st.private_loss, st.ledger.rounds_used) for st in states])

    # round 1: one DP local round, released once for group formation
    for st in states:
        p4_local_round(st, cfg, sigma, with_private=not no_proxy)
        st.ledger.charge()
    graph = group_clients([st.share() for st in states], cfg, bus, 1)
    result.graph = graph
    result.grouping_objective = grouping_objective(graph, [st.share() for st in states])
    if _is_eval_round(1, cfg):
        emit(1, graph)

    for r in range(2, cfg.rounds + 1):
        exhausted_before = all(st.ledger.exhausted for st in states)
        sent_before = bus.sent
        for st in states:
            if st.ledger.exhausted:
                if not no_proxy:
                    private_only_round(st, cfg)
                continue
            p4_local_round(st, cfg, sigma, with_private=not no_proxy)
        for members in graph.groups:
            updates = {c: states[c].share() for c in members if not states[c].ledger.exhausted}
            for c, flat in run_round(updates, bus, r, cfg.rotation_period, ledgers).items():
                states[c].pair.proxy = states[c].pair.proxy.with_flat(flat)
        if exhausted_before:
            result.messages_after_exhaustion += bus.sent - sent_before
        if _is_eval_round(r, cfg):
            emit(r, graph)
    result.messages = bus.sent
    result.bytes_sent = bus.bytes_sent


def _run_local(cfg, clients, result, rec) -> None:
    L = _num_classes(cfg, clients)
    states = [_new_state(c, cfg, L, None) for c in clients]
    for r in range(1, cfg.rounds + 1):
        for st in states:
            private_only_round(st, cfg)
        if _is_eval_round(r, cfg):
            rec.add([MetricsRow(r, st.data.cid, -1,
                                evaluate(st.pair.private, st.data.x_test, st.data.y_test),
                                None, st.private_loss, 0) for st in states])


def run_fedavg(cfg: ExperimentConfig, clients=None, ledger_budget: int | None = None,
               trajectory: list | None = None) -> RunResult:
    """Server-based FedAvg with the same per-example clipping and noise as the proxies.

    Each round ``ceil(u * live)`` clients start from the global model, run K
    DP local steps, and the server replaces the global model with the mean.

    Args:
        trajectory: if given, receives the flattened global model after every round.
    """
    clients = prepare_clients(cfg) if clients is None else clients
    result = RunResult(cfg.method, cfg.seed)
    rec = _Recorder(result, cfg.output)
    sigma = cfg.sigma
    L = _num_classes(cfg, clients)
    budget = cfg.rounds if ledger_budget is None else ledger_budget
    states = [_new_state(c, cfg, L, budget) for c in clients]
    server = len(clients)
    server_rng = RandomSource.for_client(cfg.seed, server, "sampling")
    bus = Bus(cfg.drop_probability, RandomSource.for_client(cfg.seed, server, "bus"))
    model = LinearClassifier.zeros(L, clients[0].feature_dim)
    for r in range(1, cfg.rounds + 1):
        live = [st for st in states if not st.ledger.exhausted]
        if live:
            k = math.ceil(cfg.user_ratio * len(live) - 1e-9)
            picks = [live[i] for i in sorted(server_rng.choice(len(live), k))]
        else:
            picks = []
        for st in states:
            st.proxy_loss = None
        received = []
        for st in picks:
            bus.send(Message(MessageKind.MODEL_BROADCAST, server, st.data.cid, r, (model.flat(),)))
            local = model.with_flat(bus.receive(st.data.cid)[-1].payload[0].ravel())
            losses = []
            for _ in range(cfg.local_steps):
                batch = sample_minibatch(st.data.x_train, st.data.y_train, cfg.sample_ratio, st.batch_rng)
                loss, upd = _dp_update(local, batch, cfg, sigma, len(st.data.y_train), st.noise_rng)
                local = local.with_flat(sgd_step(local.flat(), upd, cfg.lr_local))
                losses.append(loss)
            st.proxy_loss = float(np.mean(losses))
            st.ledger.charge()
            bus.send(Message(MessageKind.GRADIENT_SHARE, st.data.cid, server, r, (local.flat(),)))
        received = [m.payload[0].ravel() for m in bus.receive(server)]
        if received:
            model = model.with_flat(aggregate_proxy(received))
        if trajectory is not None:
            trajectory.append(model.flat())
        if _is_eval_round(r, cfg):
            rec.add([MetricsRow(r, st.data.cid, 0, evaluate(model, st.data.x_test, st.data.y_test),
                                st.proxy_loss, None, st.ledger.rounds_used) for st in states])
    result.messages = bus.sent
    result.bytes_sent = bus.bytes_sent
    return result


def run_experiment(cfg: ExperimentConfig, clients=None, ledger_budget: int | None = None) -> RunResult:
    """Run one method end to end and return its metrics.

    Args:
        cfg: validated configuration; ``cfg.output`` (a CSV path) receives rows
            as they are produced.
        clients: prepared client inputs; defaults to the training pool of ``cfg``.
        ledger_budget: rounds each client may release; defaults to ``cfg.rounds``.
    """
    if cfg.method == "fedavg":
        return run_fedavg(cfg, clients, ledger_budget)
    clients = prepare_clients(cfg) if clients is None else clients
    result = RunResult(cfg.method, cfg.seed)
    rec = _Recorder(result, cfg.output)
    if cfg.method in ("local", "local_hc"):
        _run_local(cfg, clients, result, rec)
    else:
        budget = cfg.rounds if ledger_budget is None else ledger_budget
        _run_grouped(cfg, clients, result, rec, budget)
    log.info("%s seed=%d final accuracy %.4f", cfg.method, cfg.seed, result.final_accuracy)
    return result


def run_repeats(cfg: ExperimentConfig, out_dir=None) -> list[RunResult]:
    """``cfg.repeats`` runs with seeds ``seed, seed + 1, ...``."""
    results = []
    for k in range(cfg.repeats):
        seed = cfg.seed + k
        output = str(Path(out_dir) / f"{cfg.method}_seed{seed}.csv") if out_dir else cfg.output
        results.append(run_experiment(cfg.replace(seed=seed, output=output)))
    return results


def grid_search(cfg: ExperimentConfig) -> list[dict]:
    """Evaluate every ``(lr0, clip)`` cell on the reserved evaluation clients.

    Returns one record per cell, best final accuracy first.
    """
    clients = prepare_clients(cfg, pool="eval")
    if not clients:
        raise ValueError("no evaluation clients reserved (eval_fraction is 0)")
    probes = min(cfg.probe_peers, max(1, len(clients) - 1))
    out = []
    for lr0 in cfg.grid_lr0:
        for clip in cfg.grid_clip:
            cell = cfg.replace(lr0=lr0, clip=clip, output=None)
            cell.probe_peers = probes
            res = run_experiment(cell, clients)
            out.append({"lr0": lr0, "clip": clip, "lr_local": cell.lr_local, "final_acc": res.final_accuracy})
    out.sort(key=lambda d: (-d["final_acc"], d["lr0"], d["clip"]))
    return out
