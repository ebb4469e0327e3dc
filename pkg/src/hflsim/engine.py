"""Staged execution of hierarchical federated training.

One global round runs :meth:`Simulation.run_node_round` on the root. Every
server repeats ``rounds_before_sync`` internal rounds: push its current model
to a sample of its children, collect their updates (users train locally,
servers recurse with their own schedule), optionally mask, verify and screen
them, aggregate, and advance its model. What travels upward is always the
weighted delta against the model the node started from.

All combination points consume children in ascending id order and every
random draw comes from a stream keyed by (master seed, node, round, purpose,
invocation), so the run is a pure function of its configuration.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from hflsim import aggregation as agg
from hflsim.adversary import (
    MaliciousServer,
    MaliciousUser,
    PassiveObserver,
    ServerMode,
    draw_perturbation,
    is_active,
    malicious_scale,
    observe,
    poison_broadcast,
    reconstruct_from_gradient,
    reconstruction_error,
)
from hflsim.config import ScenarioConfig
from hflsim.costs import CostModel, RoundCost, account_costs
from hflsim.data import Dataset, gen_blobs, partition_iid, partition_label_skew, train_test_split
from hflsim.defense import (
    LinkabilityReport,
    Notification,
    Response,
    audit_linkability,
    detect_anomalies,
    norm_zscores,
    respond,
)
from hflsim.errors import CannotRemoveRoot, NotReconstructible
from hflsim.model import Hyperparams, ModelParams, evaluate, init_params, local_train
from hflsim.privacy import apply_pipeline, privacy_accounting
from hflsim.seeding import derive_seed, stream
from hflsim.topology import Hierarchy, remove_subtree
from hflsim.trace import AGGREGATE, DOWN, INDIVIDUAL, MODEL, UP, Exposure, Trace

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "node", "test_accuracy", "test_loss", "comm_up_bytes", "comm_down_bytes",
               "verify_units", "detections", "exclusions", "recon_err")


def sample_children(children: Sequence[int], fraction: float, rng: np.random.Generator) -> list[int]:
    """k = max(1, round-half-up(fraction * n)) children without replacement, sorted by id."""
    children = sorted(children)
    if not children:
        return []
    k = int((Decimal(str(fraction)) * len(children)).to_integral_value(rounding=ROUND_HALF_UP))
    k = min(len(children), max(1, k))
    if k == len(children):
        return children
    picked = rng.choice(len(children), size=k, replace=False)
    return sorted(children[i] for i in picked)


def broadcast_down(h: Hierarchy, model: ModelParams, withheld: set[int],
                   previous: Mapping[int, ModelParams],
                   poison: Mapping[int, Callable[[ModelParams], ModelParams]] | None = None,
                   ) -> dict[int, ModelParams]:
    """Model version held by every node after the downward push.

    A withheld node and its whole subtree keep their ``previous`` version.
    A server in ``poison`` forwards ``poison[server](model)`` to its children.
    """
    poison = poison or {}
    out: dict[int, ModelParams] = {}
    stack: list[tuple[int, ModelParams | None]] = [(h.root, model)]
    while stack:
        nid, pushed = stack.pop()
        if pushed is None or nid in withheld:
            out[nid] = previous.get(nid, model)
            forward = None
        else:
            out[nid] = pushed
            forward = poison[nid](pushed) if nid in poison else pushed
        stack.extend((c, forward) for c in reversed(h.children(nid)))
    return out


@dataclass
class MetricsRecord:
    round: int
    node: int
    test_accuracy: float
    test_loss: float
    comm_up_bytes: int = 0
    comm_down_bytes: int = 0
    verify_units: float = 0.0
    detections: int = 0
    exclusions: int = 0
    recon_err: float | None = None
    participants: int = 0
    exposures: int = 0

    def csv_row(self) -> list[str]:
        return [str(self.round), str(self.node), repr(self.test_accuracy), repr(self.test_loss),
                str(self.comm_up_bytes), str(self.comm_down_bytes), format_units(self.verify_units),
                str(self.detections), str(self.exclusions),
                "" if self.recon_err is None else repr(self.recon_err)]

    def to_record(self) -> dict:
        return {
            "round": self.round, "node": self.node, "test_accuracy": self.test_accuracy,
            "test_loss": self.test_loss, "comm_up_bytes": self.comm_up_bytes,
            "comm_down_bytes": self.comm_down_bytes, "verify_units": self.verify_units,
            "detections": self.detections, "exclusions": self.exclusions,
            "recon_err": self.recon_err, "participants": self.participants,
            "exposures": self.exposures,
        }


def format_units(v: float) -> str:
    return str(int(v)) if float(v).is_integer() and abs(v) < 2**63 else repr(float(v))


@dataclass
class ProbeOutcome:
    round: int
    target: int
    observer: int
    status: str
    error: float | None = None
    true_label: int | None = None
    predicted_label: int | None = None
    features: list[float] | None = None
    reconstructed: list[float] | None = None

    def to_record(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SimulationResult:
    final_model: ModelParams
    metrics: list[MetricsRecord]
    adversary_log: list[dict]
    linkability: LinkabilityReport
    trace: Trace
    notifications: list[Notification] = field(default_factory=list)
    probes: list[ProbeOutcome] = field(default_factory=list)
    costs: list[RoundCost] = field(default_factory=list)
    hierarchy: Hierarchy | None = None
    privacy: dict[int, tuple[float, int]] = field(default_factory=dict)
    versions: dict[int, int] = field(default_factory=dict)
    events: list[dict] = field(default_factory=list)

    def root_metrics(self) -> list[MetricsRecord]:
        root = self.hierarchy.root if self.hierarchy is not None else None
        return [m for m in self.metrics if m.node == root]

    def to_document(self, cfg: ScenarioConfig) -> dict:
        return {
            "scenario": cfg.summary(),
            "final_model": [float(v) for v in self.final_model.values],
            "metrics": [m.to_record() for m in self.metrics],
            "costs": [c.__dict__ for c in self.costs],
            "notifications": [{"detector": n.detector, "flagged": n.flagged, "round": n.round,
                               "z": n.z, "action": n.action.value} for n in self.notifications],
            "probes": [p.to_record() for p in self.probes],
            "linkability": self.linkability.to_record(),
            "privacy_accounting": {str(u): {"noise_multiplier": z, "participation": c}
                                   for u, (z, c) in sorted(self.privacy.items())},
            "final_hierarchy": [{"id": n.id, "kind": n.kind.value, "parent": n.parent}
                                for n in self.hierarchy.to_spec().nodes] if self.hierarchy else [],
            "model_versions": {str(k): v for k, v in sorted(self.versions.items())},
            "events": self.events,
        }


class Simulation:
    """Mutable state of one run. Use :func:`run_simulation` unless stepping manually."""

    def __init__(self, cfg: ScenarioConfig) -> None:
        self.cfg = cfg
        self.master = cfg.seed
        ds = gen_blobs(cfg.data.classes, cfg.data.dim, cfg.data.n_per_class, cfg.data.spread,
                       derive_seed(self.master, "data"))
        self.train, self.test = train_test_split(ds, cfg.data.test_fraction, derive_seed(self.master, "split"))
        users = cfg.hierarchy.users()
        if cfg.data.partition == "label_skew":
            part = partition_label_skew(self.train, users, cfg.data.alpha, derive_seed(self.master, "partition"))
        else:
            part = partition_iid(self.train, users, derive_seed(self.master, "partition"))
        self.shards: dict[int, Dataset | None] = {
            u: self.train.subset(rows) if rows else None for u, rows in part.items()
        }
        self.h = cfg.hierarchy
        self.model = init_params(cfg.arch, derive_seed(self.master, "init"))
        self.cost = CostModel(cfg.arch.size, cfg.verification)
        self.trace = Trace()
        self.aggregators = dict(cfg.aggregators)
        self.notifications: list[Notification] = []
        self.adversary_log: list[dict] = []
        self.probe_outcomes: list[ProbeOutcome] = []
        self.events: list[dict] = []
        self.metrics: list[MetricsRecord] = []
        self.participation: dict[int, int] = defaultdict(int)
        self.versions = {n: self.model for n in self.h.nodes}
        self.version_round = {n: 0 for n in self.h.nodes}

        self.malicious_users = {a.id: a for a in cfg.adversaries if isinstance(a, MaliciousUser)}
        self.malicious_servers = {a.id: a for a in cfg.adversaries if isinstance(a, MaliciousServer)}
        self.observers = [a for a in cfg.adversaries if isinstance(a, PassiveObserver)]
        self.perturbations = {
            s: draw_perturbation(stream(self.master, s, "adversary"), cfg.arch.size, a.perturbation_scale)
            for s, a in self.malicious_servers.items()
        }

        self.round = 0
        self._skip: set[int] = set()       # withheld this round
        self._withhold_next: set[int] = set()
        self._calls: dict[tuple[int, str], int] = defaultdict(int)
        self._probe_base: dict[int, tuple[ModelParams, Hyperparams, np.ndarray, int]] = {}
        self._node_models: dict[int, ModelParams] = {}
        self._round_detections: dict[int, int] = defaultdict(int)
        self._round_exclusions: dict[int, int] = defaultdict(int)

    # -- helpers --------------------------------------------------------------------------

    def _next(self, node: int, purpose: str) -> int:
        key = (node, purpose)
        k = self._calls[key]
        self._calls[key] = k + 1
        return k

    def _probe_for(self, user: int):
        return next((p for p in self.cfg.probes if p.target == user and p.round == self.round), None)

    def _deliver(self, direction: str, sender: int, receiver: int, kind: str, origin: int,
                 masked: bool, weight: float | None, payload: np.ndarray) -> None:
        self.trace.deliver(self.round, direction, sender, receiver, self.h.layer(receiver)
                           if receiver in self.h else -1, kind, origin, masked, weight, payload)

    # -- users -----------------------------------------------------------------------------

    def _user_update(self, user: int, model: ModelParams) -> agg.Update | None:
        k = self._next(user, "train")
        shard = self.shards.get(user)
        if shard is None:
            return None
        hp = self.cfg.user_hyperparams.get(user, self.cfg.hyperparams)
        probe = self._probe_for(user) if k == 0 else None
        if probe is not None:
            # one SGD step on exactly one sample
            x, y = shard.features[:1], shard.labels[:1]
            hp = hp.overridden(local_epochs=1, batch_size=1)
            self._probe_base[user] = (model, hp, x[0].copy(), int(y[0]))
        else:
            x, y = shard.features, shard.labels
        trained, n = local_train(model, x, y, hp, derive_seed(self.master, user, self.round, "train", k))
        u = agg.Update(trained.values - model.values, float(n), user, self.round)
        pipeline = self.cfg.user_pipelines.get(user)
        if pipeline:
            u = apply_pipeline(u, pipeline, stream(self.master, user, self.round, "privacy", k))
        attacker = self.malicious_users.get(user)
        if attacker is not None and is_active(attacker, self.round):
            u = malicious_scale(u, attacker.gamma)
        self.participation[user] += 1
        return u

    # -- servers -----------------------------------------------------------------------------

    def run_node_round(self, node_id: int, incoming: ModelParams) -> agg.Update | None:
        """Run ``node_id``'s full local schedule starting from ``incoming``.

        Returns the delta of its final model against ``incoming`` weighted by
        the mean aggregate weight of its internal rounds, or None when no
        child contributed anything.
        """
        node = self.h.node(node_id)
        attacker = self.malicious_servers.get(node_id)
        active = attacker is not None and is_active(attacker, self.round)
        model = incoming
        if active and attacker.mode is ServerMode.SCALE_DOWN_BROADCAST:
            model = poison_broadcast(incoming, attacker.gamma, self.perturbations[node_id])
        weights = []
        for _ in range(node.rounds_before_sync):
            if node_id not in self.h:  # pruned when its own detection excluded every child
                break
            step = self._internal_round(node_id, model)
            if step is not None:
                model = model.with_values(model.values + step.delta)
                weights.append(step.weight)
        self._node_models[node_id] = model
        if not weights:
            return None
        out = agg.Update(model.values - incoming.values, float(np.mean(weights)), node_id, self.round)
        if active and attacker.mode is ServerMode.SCALE_UP:
            out = malicious_scale(out, attacker.gamma)
        return out

    def _internal_round(self, node_id: int, model: ModelParams) -> agg.Update | None:
        k = self._next(node_id, "internal")
        node = self.h.node(node_id)
        eligible = [c for c in node.children if c not in self._skip]
        sampled = sample_children(eligible, node.sampling_fraction,
                                  stream(self.master, node_id, self.round, "sample", k))
        dropped_now = {u for r, u in self.cfg.dropouts if r == self.round}

        results: dict[int, agg.Update | None] = {}
        dropped: list[int] = []
        for c in sampled:
            self._deliver(DOWN, node_id, c, MODEL, node_id, False, None, model.values)
            if self.h.node(c).is_user:
                if c in dropped_now:
                    if self.shards.get(c) is not None:
                        dropped.append(c)
                    continue
                results[c] = self._user_update(c, model)
            else:
                results[c] = self.run_node_round(c, model)
        results = {c: u for c, u in results.items() if u is not None}

        correction = None
        user_ids = [c for c in sorted(results) if self.h.node(c).is_user]
        members = sorted(user_ids + dropped)
        masked = node_id in self.cfg.masked_nodes and len(members) >= 2
        if masked and user_ids:
            group = agg.MaskGroup(members, derive_seed(self.master, node_id, self.round, "mask", k))
            size = self.cfg.arch.size
            placeholders = [results[m] if m in results else agg.Update(np.zeros(size), 1.0, m, self.round)
                            for m in members]
            for mu in agg.mask_updates(placeholders, group):
                if mu.origin in results:
                    results[mu.origin] = mu
            if dropped:
                correction = agg.unmask_on_dropout(group, user_ids, size)
                if len(user_ids) == 1:
                    self.trace.exposures.append(
                        Exposure(self.round, node_id, self.h.layer(node_id), user_ids[0]))
                    self.events.append({"round": self.round, "event": "single_survivor_exposed",
                                        "node": node_id, "user": user_ids[0]})

        for c in sorted(results):
            u = results[c]
            kind = INDIVIDUAL if self.h.node(c).is_user else AGGREGATE
            self._deliver(UP, c, node_id, kind, c, u.masked, u.weight, u.delta)

        updates = [results[c] for c in sorted(results)]
        if not updates:
            return None

        if self.cfg.verify_at is None or node_id in self.cfg.verify_at:
            self.trace.verifications.append((self.round, node_id, len(updates)))

        policy = self.cfg.detection.get(node_id)
        if policy is not None and not any(u.masked for u in updates):
            flagged = detect_anomalies(updates, policy)
            if flagged:
                scores = norm_zscores(updates)
                self._round_detections[node_id] += len(flagged)
                before = len(self.h)
                try:
                    self.h, notes, withheld = respond(self.h, flagged, policy, node_id, self.round, scores)
                except CannotRemoveRoot:
                    # excluding every flagged child would empty the tree; keep them this round
                    self.events.append({"round": self.round, "event": "exclusion_refused",
                                        "node": node_id, "children": sorted(flagged)})
                    self.h, notes, withheld = respond(self.h, flagged, replace(policy, response=Response.FLAG_ONLY),
                                                      node_id, self.round, scores)
                self.notifications.extend(notes)
                self._withhold_next |= withheld
                if notes and notes[0].action is Response.EXCLUDE:
                    self._round_exclusions[node_id] += len(flagged)
                    updates = [u for u in updates if u.origin not in flagged]
                    self.events.append({"round": self.round, "event": "excluded", "node": node_id,
                                        "children": sorted(flagged), "nodes_removed": before - len(self.h)})
                if policy.switch_to_median_on_notify:
                    for f in sorted(flagged):
                        if f in self.h and not self.h.node(f).is_user and f not in self.cfg.masked_nodes:
                            self.aggregators[f] = "median"
            if not updates or node_id not in self.h:
                return None

        result = agg.aggregate(self.aggregators.get(node_id, "fedavg"), updates, origin=node_id,
                               round=self.round, beta=self.cfg.trim_beta, correction=correction)
        pipeline = self.cfg.server_pipelines.get(node_id)
        if pipeline:
            result = apply_pipeline(result, pipeline, stream(self.master, node_id, self.round, "privacy", k))
        return result

    # -- rounds ------------------------------------------------------------------------------

    def _apply_churn(self) -> None:
        for r, nid in self.cfg.churn:
            if r != self.round:
                continue
            if nid not in self.h:
                self.events.append({"round": r, "event": "churn_skipped", "node": nid, "reason": "absent"})
                continue
            try:
                before = len(self.h)
                self.h = remove_subtree(self.h, nid)
                self.events.append({"round": r, "event": "churn", "node": nid,
                                    "nodes_removed": before - len(self.h)})
            except CannotRemoveRoot:
                self.events.append({"round": r, "event": "churn_skipped", "node": nid,
                                    "reason": "would empty the root"})

    def _run_probes(self) -> list[float]:
        errors = []
        for p in self.cfg.probes:
            if p.round != self.round:
                continue
            observer = p.observer
            if observer is None:
                observer = self.cfg.hierarchy.parent[p.target]
            outcome = ProbeOutcome(self.round, p.target, observer, "not_sampled")
            base = self._probe_base.get(p.target)
            if self.shards.get(p.target) is None:
                outcome.status = "empty_shard"
            elif base is not None:
                model, hp, x, y = base
                outcome.true_label, outcome.features = y, [float(v) for v in x]
                seen = next((m for m in self.trace.in_round(self.round)
                             if m.direction == UP and m.receiver == observer and m.kind == INDIVIDUAL
                             and m.origin == p.target), None)
                if seen is None:
                    outcome.status = "not_visible"
                else:
                    try:
                        upd = agg.Update(seen.payload, seen.weight, seen.origin, seen.round, seen.masked)
                        rec = reconstruct_from_gradient(upd, model, hp.learning_rate)
                    except NotReconstructible as exc:
                        outcome.status = f"not_reconstructible: {exc}"
                    else:
                        outcome.status = "ok"
                        outcome.error = reconstruction_error(rec, x)
                        outcome.predicted_label = rec.label
                        outcome.reconstructed = [float(v) for v in rec.features]
                        errors.append(outcome.error)
            self.probe_outcomes.append(outcome)
        return errors

    def _log_observers(self) -> None:
        msgs = self.trace.in_round(self.round)
        for obs in self.observers:
            if is_active(obs, self.round):
                for m in observe(msgs, obs.at, self.round):
                    self.adversary_log.append({"observer": obs.at, **m.to_record()})

    def step(self) -> MetricsRecord:
        """Execute one global round and return the root's metrics record."""
        self.round += 1
        self._calls.clear()
        self._probe_base.clear()
        self._node_models.clear()
        self._round_detections.clear()
        self._round_exclusions.clear()
        self._skip, self._withhold_next = self._withhold_next, set()
        self._apply_churn()

        start = self.model
        update = self.run_node_round(self.h.root, start)
        if update is not None:
            self.model = self._node_models[self.h.root]

        poison = {s: (lambda m, a=a: poison_broadcast(m, a.gamma, self.perturbations[a.id]))
                  for s, a in self.malicious_servers.items() if is_active(a, self.round) and s in self.h}
        stale = self._skip | self._withhold_next
        self.versions = broadcast_down(self.h, self.model, stale, self.versions, poison)
        for n in self.h.nodes:
            if n not in stale and not any(a in stale for a in self.h.ancestors(n)):
                self.version_round[n] = self.round
        for gone in set(self.version_round) - set(self.h.nodes):
            del self.version_round[gone]

        recon = self._run_probes()
        self._log_observers()

        msgs = self.trace.in_round(self.round)
        size = self.cost.message_bytes
        acc, loss = evaluate(self.model, self.test.features, self.test.labels)
        record = MetricsRecord(
            round=self.round, node=self.h.root, test_accuracy=acc, test_loss=loss,
            comm_up_bytes=sum(m.direction == UP for m in msgs) * size,
            comm_down_bytes=sum(m.direction == DOWN for m in msgs) * size,
            verify_units=sum(self.cost.verification(n) for r, _, n in self.trace.verifications if r == self.round),
            detections=sum(self._round_detections.values()),
            exclusions=sum(self._round_exclusions.values()),
            recon_err=max(recon) if recon else None,
            participants=len({m.origin for m in msgs if m.direction == UP and m.kind == INDIVIDUAL}),
            exposures=sum(1 for m in msgs if m.direction == UP and m.kind == INDIVIDUAL and not m.masked)
            + sum(1 for e in self.trace.exposures if e.round == self.round),
        )
        self.metrics.append(record)
        if self.cfg.evaluate_branches:
            self._branch_metrics(msgs, size)
        return record

    def _branch_metrics(self, msgs, size: int) -> None:
        for s in self.h.servers():
            if s == self.h.root or s not in self._node_models:
                continue
            acc, loss = evaluate(self._node_models[s], self.test.features, self.test.labels)
            self.metrics.append(MetricsRecord(
                round=self.round, node=s, test_accuracy=acc, test_loss=loss,
                comm_up_bytes=sum(m.direction == UP and m.receiver == s for m in msgs) * size,
                comm_down_bytes=sum(m.direction == DOWN and m.sender == s for m in msgs) * size,
                verify_units=sum(self.cost.verification(n) for r, v, n in self.trace.verifications
                                 if r == self.round and v == s),
                detections=self._round_detections.get(s, 0),
                exclusions=self._round_exclusions.get(s, 0),
                participants=len({m.origin for m in msgs if m.direction == UP and m.receiver == s}),
            ))

    def finish(self) -> SimulationResult:
        self.trace.rounds = self.round
        self.trace.complete = True
        privacy = {}
        for u, pipe in sorted(self.cfg.user_pipelines.items()):
            sigma, clip = pipe.noise_and_clip()
            if sigma and clip:
                privacy[u] = privacy_accounting(sigma, clip, self.participation.get(u, 0))
        return SimulationResult(
            final_model=self.model,
            metrics=self.metrics,
            adversary_log=self.adversary_log,
            linkability=audit_linkability(self.trace),
            trace=self.trace,
            notifications=self.notifications,
            probes=self.probe_outcomes,
            costs=account_costs(self.trace, self.cost),
            hierarchy=self.h,
            privacy=privacy,
            versions=dict(self.version_round),
            events=self.events,
        )


def run_simulation(cfg: ScenarioConfig) -> SimulationResult:
    sim = Simulation(cfg)
    for _ in range(cfg.global_rounds):
        sim.step()
    return sim.finish()
