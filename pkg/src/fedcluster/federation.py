"""Client/server protocol: local center computation, global aggregation,
round orchestration, and final model averaging.

The default runtime simulates every client in one process. Client work is
independent and seeded from (seed, client_id, round), so running clients on
a thread pool yields bit-identical results to a sequential loop. The records
exchanged each round (centers up, global centers down, final parameters up)
have documented binary encodings so a networked transport could be swapped
in without touching the logic here.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import gum
from .datasets import EmbeddingDataset, batches
from .evaluation import accuracy, nmi
from .exceptions import FederatedRunError, InvalidInputError
from .model import (
    ModelParams,
    OptimizerState,
    backward_and_step,
    forward,
    init_model_params,
)
from .numerics import Rng, as_matrix, kmeans
from .sinkhorn import TransportConfig, generate_pseudo_labels


@dataclass
class GlobalCenters:
    c: np.ndarray  # (K, D)
    round: int = 0


@dataclass
class ClientState:
    id: int
    shard: EmbeddingDataset
    model: ModelParams
    opt: OptimizerState
    q_shard: np.ndarray   # (n, K) current pseudo-labels
    r_shard: np.ndarray   # (n,) reliability carried across iterations
    c_local: np.ndarray   # (K, D)
    counts: np.ndarray    # (K,)
    rng: Rng


@dataclass
class RoundReport:
    round: int
    l_c: list              # per-client mean clustering loss over the round
    l_a: list              # per-client mean alignment loss
    kept_fraction: list    # per-client mean fraction of samples with w > 0
    skipped_batches: list  # per-client count of all-discarded batches
    acc: float | None = None
    nmi: float | None = None

    def to_json(self) -> str:
        def clean(value):
            if isinstance(value, list):
                return [clean(v) for v in value]
            if isinstance(value, float) and value != value:
                return None  # a client that skipped every batch has no mean loss
            return value

        payload = {
            "round": self.round,
            "l_c": clean(self.l_c),
            "l_a": clean(self.l_a),
            "kept_fraction": self.kept_fraction,
            "skipped_batches": self.skipped_batches,
            "acc": self.acc,
            "nmi": self.nmi,
        }
        return json.dumps(payload, sort_keys=True)


@dataclass
class ClientRoundResult:
    client_id: int
    c_local: np.ndarray
    counts: np.ndarray
    mean_l_c: float
    mean_l_a: float
    kept_fraction: float
    skipped_batches: int


@dataclass
class RunSettings:
    """Training knobs for a federated run (paths and partitioning live in the CLI)."""

    k: int
    rounds: int = 40
    local_iters: int = 100
    batch_size: int = 200
    epsilon: float = 0.1
    lam: float = 1.0
    tau: int = 3
    adapter_lr: float = 5e-6
    head_lr: float = 5e-4
    adapter_enabled: bool = True
    hidden: int | None = None
    schedule_updates: int = 0  # 0 = one refresh per local epoch equivalent
    seed: int = 0
    workers: int = 1
    sinkhorn_max_iters: int = 200
    sinkhorn_tol: float = 1e-6


@dataclass
class RunOutcome:
    global_model: ModelParams
    reports: list
    predictions: np.ndarray
    acc: float | None
    nmi: float | None


def compute_local_centers(e, q, fallback=None):
    """Mean representation per argmax-q cluster (ties to the lowest index).

    Rows for empty clusters take the caller-supplied fallback centers (or
    zeros) and report a count of 0.
    """
    e = as_matrix(e, "e")
    q = as_matrix(q, "q")
    if e.shape[0] != q.shape[0]:
        raise InvalidInputError(f"e has {e.shape[0]} rows, q has {q.shape[0]}")
    k = q.shape[1]
    assign = np.argmax(q, axis=1)
    counts = np.bincount(assign, minlength=k)
    centers = np.zeros((k, e.shape[1]))
    np.add.at(centers, assign, e)
    occupied = counts > 0
    centers[occupied] /= counts[occupied, None]
    if fallback is not None:
        fallback = as_matrix(fallback, "fallback")
        centers[~occupied] = fallback[~occupied]
    return centers, counts


def aggregate_global_centers(locals_, previous=None, round_index: int = 0) -> GlobalCenters:
    """Count-weighted mean of local centers, per cluster.

    A cluster empty on every client keeps its previous-round global center
    (zeros if there is no previous round).
    """
    if not locals_:
        raise InvalidInputError("need at least one client")
    k, d = as_matrix(locals_[0][0], "centers").shape
    all_counts = []
    all_centers = []
    total = np.zeros(k)
    for c, counts in locals_:
        c = as_matrix(c, "centers")
        counts = np.asarray(counts, dtype=np.float64).reshape(-1)
        if c.shape != (k, d) or counts.shape[0] != k:
            raise InvalidInputError("inconsistent center shapes across clients")
        all_centers.append(c)
        all_counts.append(counts)
        total += counts
    # weights applied as exact ratios: a lone contributor gets weight 1.0 and
    # its centers pass through bitwise
    safe_total = np.where(total > 0, total, 1.0)
    out = np.zeros((k, d))
    for c, counts in zip(all_centers, all_counts):
        out += (counts / safe_total)[:, None] * c
    occupied = total > 0
    if previous is not None:
        out[~occupied] = previous.c[~occupied]
    else:
        out[~occupied] = 0.0
    return GlobalCenters(c=out, round=round_index)


def average_models(models, alphas) -> ModelParams:
    """Parameter-wise convex combination of client models."""
    if not models:
        raise InvalidInputError("need at least one model")
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    if alphas.shape[0] != len(models):
        raise InvalidInputError("one alpha per model required")
    if np.any(alphas < 0.0) or abs(float(alphas.sum()) - 1.0) > 1e-12:
        raise InvalidInputError("alphas must be nonnegative and sum to 1")
    names = [name for name, _ in models[0].named_params()]
    for m in models[1:]:
        if [name for name, _ in m.named_params()] != names:
            raise InvalidInputError("models have different parameter sets")
    out = models[0].copy()
    tensors = dict(out.named_params())
    for name in names:
        acc = np.zeros_like(tensors[name])
        for alpha, m in zip(alphas, models):
            other = dict(m.named_params())[name]
            if other.shape != acc.shape:
                raise InvalidInputError(f"shape mismatch for {name}")
            acc += alpha * other
        tensors[name][...] = acc
    return out


def pseudo_label_schedule(total_iters: int, updates: int) -> list[int]:
    """Geometrically spaced refresh iterations round(total_iters^(j/updates))."""
    if total_iters < 1 or updates < 1:
        raise InvalidInputError("total_iters and updates must be >= 1")
    points = {
        max(1, round(total_iters ** (j / updates))) for j in range(1, updates + 1)
    }
    return sorted(points)


def client_update(
    client: ClientState,
    global_c: GlobalCenters,
    schedule,
    local_iters: int,
    tau: int,
    lam: float,
    batch_size: int = 200,
    transport: TransportConfig | None = None,
    round_index: int = 0,
) -> ClientRoundResult:
    """One round of local training; returns the refreshed centers and stats.

    Per local iteration: refresh the batch's pseudo-labels at scheduled
    iterations, refit the reliability mixture (tau inner steps), take one
    optimizer step on the robust loss, then recompute shard-level centers.
    """
    if local_iters < 1:
        raise InvalidInputError("local_iters must be >= 1")
    transport = transport or TransportConfig()
    schedule = set(schedule)
    x = client.shard.x
    n = x.shape[0]
    batch_rng = client.rng.child("batches", round_index)
    batch_stream: list[np.ndarray] = []

    l_c_sum = 0.0
    l_a_sum = 0.0
    stepped = 0
    kept_sum = 0.0
    skipped = 0
    for it in range(1, local_iters + 1):
        if not batch_stream:
            batch_stream = batches(n, batch_size, batch_rng)
        idx = batch_stream.pop(0)
        x_b = x[idx]
        _, o_b = forward(client.model, x_b)
        if it in schedule:
            client.q_shard[idx] = generate_pseudo_labels(o_b, transport).q
        q_b = client.q_shard[idx]
        weights, _ = gum.fit(q_b, o_b, client.r_shard[idx], tau=tau)
        client.r_shard[idx] = weights.r
        kept_sum += float(np.mean(weights.w > 0.0))
        breakdown = backward_and_step(
            client.model, client.opt, x_b, q_b, weights.w, global_c.c, lam
        )
        if breakdown.skipped:
            skipped += 1
        else:
            l_c_sum += breakdown.l_c
            l_a_sum += breakdown.l_a
            stepped += 1
        e_shard, _ = forward(client.model, x)
        client.c_local, client.counts = compute_local_centers(
            e_shard, client.q_shard, fallback=client.c_local
        )
    return ClientRoundResult(
        client_id=client.id,
        c_local=client.c_local.copy(),
        counts=client.counts.copy(),
        mean_l_c=l_c_sum / stepped if stepped else float("nan"),
        mean_l_a=l_a_sum / stepped if stepped else float("nan"),
        kept_fraction=kept_sum / local_iters,
        skipped_batches=skipped,
    )


def _auto_updates(settings: RunSettings, n: int) -> int:
    """One refresh per local epoch equivalent, capped so the first refresh
    never lands on iteration 1: a refresh of a freshly initialized model
    (identically zero scores) replaces the k-means pseudo-labels with exactly
    uniform rows and erases the initialization."""
    per_epoch = settings.local_iters * settings.batch_size / max(n, 1)
    cap = max(1, int(np.log(max(settings.local_iters, 2)) / np.log(1.5)))
    return max(1, min(settings.local_iters, cap, round(per_epoch)))


def init_clients(shards, settings: RunSettings) -> tuple[list[ClientState], GlobalCenters]:
    """Identical model init, pooled k-means pseudo-label init, unit reliability.

    Pooling raw representations for the initialization k-means is part of the
    protocol being reproduced; see the README privacy note.
    """
    if not shards:
        raise InvalidInputError("need at least one client shard")
    base = Rng(settings.seed)
    d = shards[0].d
    params0 = init_model_params(
        d,
        settings.k,
        base.child("model-init"),
        hidden=settings.hidden,
        adapter=settings.adapter_enabled,
    )
    reps = []
    for shard in shards:
        e, _ = forward(params0, shard.x)
        reps.append(e)
    pooled = np.concatenate(reps, axis=0)
    km = kmeans(pooled, settings.k, base.child("init-kmeans"))
    clients = []
    offset = 0
    for cid, shard in enumerate(shards):
        assign = km.assignments[offset:offset + shard.n]
        offset += shard.n
        q = np.zeros((shard.n, settings.k))
        q[np.arange(shard.n), assign] = 1.0
        c_local, counts = compute_local_centers(reps[cid], q)
        clients.append(
            ClientState(
                id=cid,
                shard=shard,
                model=params0.copy(),
                opt=OptimizerState(
                    adapter_lr=settings.adapter_lr, head_lr=settings.head_lr
                ),
                q_shard=q,
                r_shard=np.ones(shard.n),
                c_local=c_local,
                counts=counts,
                rng=base.child("client", cid),
            )
        )
    global_c = aggregate_global_centers(
        [(c.c_local, c.counts) for c in clients], round_index=0
    )
    return clients, global_c


def _evaluate_global(clients, settings: RunSettings):
    """Averaged model's argmax predictions and metrics on the pooled data."""
    alphas = np.array([c.shard.n for c in clients], dtype=np.float64)
    alphas /= alphas.sum()
    global_model = average_models([c.model for c in clients], alphas)
    pooled_x = np.concatenate([c.shard.x for c in clients], axis=0)
    _, scores = forward(global_model, pooled_x)
    predictions = np.argmax(scores, axis=1)
    labels = [c.shard.labels for c in clients]
    acc_val = nmi_val = None
    if all(lab is not None for lab in labels):
        truth = np.concatenate(labels)
        acc_val = accuracy(truth, predictions, max(settings.k, int(truth.max()) + 1))
        nmi_val = nmi(truth, predictions)
    return global_model, predictions, acc_val, nmi_val


def server_run(shards, settings: RunSettings) -> RunOutcome:
    """Full protocol: init, per-round client updates plus center aggregation,
    final sample-weighted model averaging, metrics on pooled data."""
    if settings.rounds < 1:
        raise InvalidInputError("rounds must be >= 1")
    clients, global_c = init_clients(shards, settings)
    transport = TransportConfig(
        epsilon=settings.epsilon,
        max_iters=settings.sinkhorn_max_iters,
        marginal_tol=settings.sinkhorn_tol,
    )
    schedules = {}
    for c in clients:
        updates = settings.schedule_updates or _auto_updates(settings, c.shard.n)
        schedules[c.id] = pseudo_label_schedule(settings.local_iters, updates)

    reports: list[RoundReport] = []
    for round_index in range(1, settings.rounds + 1):
        def run_one(client: ClientState) -> ClientRoundResult:
            return client_update(
                client,
                global_c,
                schedules[client.id],
                settings.local_iters,
                settings.tau,
                settings.lam,
                batch_size=settings.batch_size,
                transport=transport,
                round_index=round_index,
            )

        try:
            if settings.workers > 1:
                with ThreadPoolExecutor(max_workers=settings.workers) as pool:
                    results = list(pool.map(run_one, clients))
            else:
                results = [run_one(c) for c in clients]
        except Exception as exc:
            raise FederatedRunError(
                f"client update failed in round {round_index}: {exc}", reports
            ) from exc
        results.sort(key=lambda r: r.client_id)
        global_c = aggregate_global_centers(
            [(r.c_local, r.counts) for r in results],
            previous=global_c,
            round_index=round_index,
        )
        _, _, acc_val, nmi_val = _evaluate_global(clients, settings)
        reports.append(
            RoundReport(
                round=round_index,
                l_c=[r.mean_l_c for r in results],
                l_a=[r.mean_l_a for r in results],
                kept_fraction=[r.kept_fraction for r in results],
                skipped_batches=[r.skipped_batches for r in results],
                acc=acc_val,
                nmi=nmi_val,
            )
        )
    global_model, predictions, acc_val, nmi_val = _evaluate_global(clients, settings)
    return RunOutcome(
        global_model=global_model,
        reports=reports,
        predictions=predictions,
        acc=acc_val,
        nmi=nmi_val,
    )


_MSG_HEADER = struct.Struct("<II")


def encode_center_message(client_id: int, round_index: int, centers, counts) -> bytes:
    """Wire record: client id u32, round u32, K x D f64 centers, K u64 counts."""
    c = np.ascontiguousarray(as_matrix(centers, "centers"), dtype="<f8")
    counts = np.ascontiguousarray(np.asarray(counts, dtype="<u8"))
    return _MSG_HEADER.pack(client_id, round_index) + c.tobytes() + counts.tobytes()


def decode_center_message(payload: bytes, k: int, d: int):
    expected = _MSG_HEADER.size + k * d * 8 + k * 8
    if len(payload) != expected:
        raise InvalidInputError(
            f"center message has {len(payload)} bytes, expected {expected}"
        )
    client_id, round_index = _MSG_HEADER.unpack_from(payload, 0)
    offset = _MSG_HEADER.size
    centers = np.frombuffer(payload, dtype="<f8", count=k * d, offset=offset)
    offset += k * d * 8
    counts = np.frombuffer(payload, dtype="<u8", count=k, offset=offset)
    return client_id, round_index, centers.reshape(k, d).copy(), counts.astype(np.int64)
