"""Scenario documents: parsing, cross-validation and placement resolution.

A scenario is one JSON document. Parsing collects every problem it finds and
raises them together in a :class:`ConfigValidationError`. Placement rules
(aggregator, pipelines, masking, detection, hyperparameters) are resolved to
per-node tables here, so the engine never consults layer defaults.
"""

from __future__ import annotations

import json
import math
import os
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from hflsim.adversary import MaliciousServer, MaliciousUser, PassiveObserver, ServerMode
from hflsim.aggregation import AGGREGATORS, ROBUST_AGGREGATORS
from hflsim.costs import VerificationCost, VerificationKind
from hflsim.defense import DetectionPolicy, Response
from hflsim.errors import ConfigValidationError, HFLError, ParseError
from hflsim.model import Arch, ArchKind, Hyperparams
from hflsim.privacy import DefensePipeline
from hflsim.topology import (
    Hierarchy,
    HierarchySpec,
    NodeKind,
    NodeSpec,
    TrustGraph,
    attach_groups,
    build_hierarchy,
    cluster_by_trust,
)

TOP_LEVEL_KEYS = {
    "seed", "hierarchy", "data", "model", "privacy", "aggregation", "secure_aggregation",
    "detection", "adversaries", "probes", "schedule", "cost", "evaluate_branches",
    "dump_trace", "output_dir", "name",
}


@dataclass(frozen=True)
class DataSpec:
    classes: int = 2
    dim: int = 2
    n_per_class: int = 100
    spread: float = 0.5
    test_fraction: float = 0.2
    partition: str = "iid"
    alpha: float = 1.0


@dataclass(frozen=True)
class Probe:
    target: int
    round: int
    observer: int | None = None  # None: the target's parent


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    hierarchy: Hierarchy
    data: DataSpec
    arch: Arch
    hyperparams: Hyperparams
    global_rounds: int
    user_hyperparams: Mapping[int, Hyperparams] = field(default_factory=dict)
    user_pipelines: Mapping[int, DefensePipeline] = field(default_factory=dict)
    server_pipelines: Mapping[int, DefensePipeline] = field(default_factory=dict)
    aggregators: Mapping[int, str] = field(default_factory=dict)
    trim_beta: float = 0.1
    masked_nodes: frozenset[int] = frozenset()
    detection: Mapping[int, DetectionPolicy] = field(default_factory=dict)
    adversaries: tuple = ()
    probes: tuple[Probe, ...] = ()
    churn: tuple[tuple[int, int], ...] = ()
    dropouts: tuple[tuple[int, int], ...] = ()
    verification: VerificationCost = VerificationCost()
    verify_at: frozenset[int] | None = None  # None: every aggregating node
    evaluate_branches: bool = False
    dump_trace: bool = False
    output_dir: str | None = None
    name: str = "scenario"

    def with_overrides(self, seed: int | None = None, rounds: int | None = None,
                       output_dir: str | None = None) -> ScenarioConfig:
        kw: dict[str, Any] = {}
        if seed is not None:
            if seed < 0:
                raise ConfigValidationError([f"seed must be non-negative, got {seed}"])
            kw["seed"] = seed
        if rounds is not None:
            if rounds < 0:
                raise ConfigValidationError([f"rounds must be non-negative, got {rounds}"])
            kw["global_rounds"] = rounds
            kw["churn"] = tuple(e for e in self.churn if e[0] <= rounds)
            kw["dropouts"] = tuple(e for e in self.dropouts if e[0] <= rounds)
            kw["probes"] = tuple(p for p in self.probes if p.round <= rounds)
        if output_dir is not None:
            kw["output_dir"] = output_dir
        return replace(self, **kw)

    def aggregator_for(self, node: int) -> str:
        return self.aggregators.get(node, "fedavg")

    def summary(self) -> dict:
        """Enough of the resolved configuration to identify a run in its output."""
        return {
            "name": self.name,
            "seed": self.seed,
            "global_rounds": self.global_rounds,
            "arch": {"kind": self.arch.kind.value, "d": self.arch.d, "C": self.arch.C, "h": self.arch.h},
            "nodes": len(self.hierarchy),
            "users": len(self.hierarchy.users()),
            "depth": self.hierarchy.depth(),
            "masked_nodes": sorted(self.masked_nodes),
            "aggregators": {str(k): v for k, v in sorted(self.aggregators.items())},
            "verification": {"kind": self.verification.kind.value, "base": self.verification.base,
                             "k": self.verification.k},
        }


class _Errors:
    def __init__(self) -> None:
        self.items: list[str] = []

    def add(self, msg: str) -> None:
        self.items.append(msg)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _section(doc: Mapping, key: str, errs: _Errors) -> Mapping:
    val = doc.get(key, {})
    if val is None:
        return {}
    if not isinstance(val, Mapping):
        errs.add(f"{key}: expected a mapping")
        return {}
    return val


def _id_keys(table: Any, where: str, errs: _Errors) -> dict[int, Any]:
    """Mapping with stringified integer keys (JSON objects) -> int-keyed dict."""
    if table is None:
        return {}
    if not isinstance(table, Mapping):
        errs.add(f"{where}: expected a mapping keyed by id")
        return {}
    out = {}
    for k, v in table.items():
        try:
            out[int(k)] = v
        except (TypeError, ValueError):
            errs.add(f"{where}: key {k!r} is not an integer id")
    return out


def _parse_nodes(raw: Any, errs: _Errors) -> list[NodeSpec]:
    if not isinstance(raw, list) or not raw:
        errs.add("hierarchy.nodes: expected a non-empty list")
        return []
    out = []
    for i, rec in enumerate(raw):
        where = f"hierarchy.nodes[{i}]"
        if not isinstance(rec, Mapping):
            errs.add(f"{where}: expected a mapping")
            continue
        try:
            kind = NodeKind.parse(rec.get("kind", ""))
        except ValueError as exc:
            errs.add(f"{where}: {exc}")
            continue
        if "id_range" in rec:
            rng = rec["id_range"]
            if not (isinstance(rng, list) and len(rng) == 2 and all(_is_int(x) for x in rng) and rng[0] <= rng[1]):
                errs.add(f"{where}: id_range must be [first, last]")
                continue
            ids = list(range(rng[0], rng[1] + 1))
        else:
            ids = [rec.get("id")]
        parent = rec.get("parent")
        rbs = rec.get("rounds_before_sync", 1)
        frac = rec.get("sampling_fraction", 1.0)
        ok = True
        if parent is not None and not _is_int(parent):
            errs.add(f"{where}: parent must be an integer id or null")
            ok = False
        if not _is_int(rbs) or rbs < 1:
            errs.add(f"{where}: rounds_before_sync must be a positive integer")
            ok = False
        if not _is_num(frac) or not 0 < frac <= 1:
            errs.add(f"{where}: sampling_fraction must lie in (0, 1]")
            ok = False
        for nid in ids:
            if not _is_int(nid) or nid < 0:
                errs.add(f"{where}: id must be a non-negative integer")
                ok = False
        unknown = set(rec) - {"id", "id_range", "kind", "parent", "rounds_before_sync", "sampling_fraction"}
        if unknown:
            errs.add(f"{where}: unknown keys {sorted(unknown)}")
        if ok:
            out.extend(NodeSpec(nid, kind, parent, rbs, float(frac)) for nid in ids)
    return out


def _parse_hierarchy(doc: Mapping, errs: _Errors) -> Hierarchy | None:
    sec = _section(doc, "hierarchy", errs)
    if "hierarchy" not in doc:
        errs.add("hierarchy: missing")
        return None
    specs = _parse_nodes(sec.get("nodes"), errs)
    if not specs:
        return None
    h_spec = HierarchySpec(specs)
    trust = sec.get("trust_graph")
    if trust is not None:
        try:
            users = trust.get("users") or [n.id for n in specs if n.kind is NodeKind.USER]
            g = TrustGraph(users, [tuple(e) for e in trust.get("edges", [])])
            groups = cluster_by_trust(g, float(trust.get("threshold", 0.5)))
            h_spec = attach_groups(h_spec, groups)
        except (HFLError, ValueError, TypeError, AttributeError) as exc:
            errs.add(f"hierarchy.trust_graph: {exc}")
            return None
    try:
        return build_hierarchy(h_spec)
    except HFLError as exc:
        errs.add(f"hierarchy: {exc}")
        return None


def _parse_data(doc: Mapping, errs: _Errors) -> DataSpec:
    sec = _section(doc, "data", errs)
    base = DataSpec()
    vals = {f: sec.get(f, getattr(base, f)) for f in DataSpec.__dataclass_fields__}
    unknown = set(sec) - set(vals)
    if unknown:
        errs.add(f"data: unknown keys {sorted(unknown)}")
    for key in ("classes", "dim", "n_per_class"):
        if not _is_int(vals[key]) or vals[key] < 1:
            errs.add(f"data.{key}: expected a positive integer")
    if _is_int(vals["classes"]) and vals["classes"] < 2:
        errs.add("data.classes: need at least two classes")
    if not _is_num(vals["spread"]) or vals["spread"] < 0:
        errs.add("data.spread: expected a non-negative number")
    if not _is_num(vals["test_fraction"]) or not 0 < vals["test_fraction"] < 1:
        errs.add("data.test_fraction: must lie in (0, 1)")
    if vals["partition"] not in ("iid", "label_skew"):
        errs.add("data.partition: expected 'iid' or 'label_skew'")
    if not _is_num(vals["alpha"]) or vals["alpha"] <= 0:
        errs.add("data.alpha: expected a positive number")
    try:
        return DataSpec(**vals)
    except TypeError:
        return base


def _hp_from(raw: Mapping, base: Hyperparams, where: str, errs: _Errors) -> Hyperparams:
    kw = {}
    for key in ("learning_rate", "local_epochs", "batch_size"):
        if key in raw:
            kw[key] = raw[key]
    unknown = set(raw) - {"learning_rate", "local_epochs", "batch_size"}
    if unknown:
        errs.add(f"{where}: unknown keys {sorted(unknown)}")
    if "learning_rate" in kw and (not _is_num(kw["learning_rate"]) or kw["learning_rate"] < 0):
        errs.add(f"{where}.learning_rate: expected a non-negative number")
        kw.pop("learning_rate")
    for key in ("local_epochs", "batch_size"):
        if key in kw and (not _is_int(kw[key]) or kw[key] < 1):
            errs.add(f"{where}.{key}: expected a positive integer")
            kw.pop(key)
    return base.overridden(**kw)


def _parse_model(doc: Mapping, data: DataSpec, h: Hierarchy | None, errs: _Errors):
    sec = _section(doc, "model", errs)
    kind = sec.get("arch", "logreg")
    arch = None
    try:
        arch = Arch(ArchKind(kind), data.dim, data.classes, int(sec.get("hidden", 8)) if kind == "mlp1" else 0)
    except (ValueError, TypeError) as exc:
        errs.add(f"model.arch: {exc}")
    base = _hp_from({k: v for k, v in sec.items() if k in ("learning_rate", "local_epochs", "batch_size")},
                    Hyperparams(), "model", errs)
    unknown = set(sec) - {"arch", "hidden", "learning_rate", "local_epochs", "batch_size", "overrides"}
    if unknown:
        errs.add(f"model: unknown keys {sorted(unknown)}")
    overrides = _id_keys(sec.get("overrides"), "model.overrides", errs)
    per_user: dict[int, Hyperparams] = {}
    if h is not None:
        for nid in overrides:
            if nid not in h:
                errs.add(f"model.overrides: node {nid} does not exist")
        for u in h.users():
            hp = base
            # nearest ancestor-or-self override wins
            for nid in [u, *h.ancestors(u)]:
                if nid in overrides and isinstance(overrides[nid], Mapping):
                    hp = _hp_from(overrides[nid], base, f"model.overrides.{nid}", errs)
                    break
            per_user[u] = hp
    return arch, base, per_user


def _pipeline(raw: Any, where: str, errs: _Errors) -> DefensePipeline:
    if not isinstance(raw, list):
        errs.add(f"{where}: expected a list of steps")
        return DefensePipeline()
    try:
        return DefensePipeline.from_config(raw)
    except HFLError as exc:
        errs.add(f"{where}: {exc}")
        return DefensePipeline()


def _check_ids(ids, h: Hierarchy, where: str, errs: _Errors, want: str | None = None) -> None:
    for nid in ids:
        if nid not in h:
            errs.add(f"{where}: node {nid} does not exist")
        elif want == "user" and not h.node(nid).is_user:
            errs.add(f"{where}: node {nid} is not a user")
        elif want == "server" and h.node(nid).is_user:
            errs.add(f"{where}: node {nid} is not a server")


def _parse_privacy(doc: Mapping, h: Hierarchy, errs: _Errors):
    sec = _section(doc, "privacy", errs)
    unknown = set(sec) - {"default", "layers", "user_groups", "users", "servers"}
    if unknown:
        errs.add(f"privacy: unknown keys {sorted(unknown)}")
    default = _pipeline(sec.get("default", []), "privacy.default", errs)
    layers = {k: _pipeline(v, f"privacy.layers.{k}", errs)
              for k, v in _id_keys(sec.get("layers"), "privacy.layers", errs).items()}
    groups = {k: _pipeline(v, f"privacy.user_groups.{k}", errs)
              for k, v in _id_keys(sec.get("user_groups"), "privacy.user_groups", errs).items()}
    users = {k: _pipeline(v, f"privacy.users.{k}", errs)
             for k, v in _id_keys(sec.get("users"), "privacy.users", errs).items()}
    servers = {k: _pipeline(v, f"privacy.servers.{k}", errs)
               for k, v in _id_keys(sec.get("servers"), "privacy.servers", errs).items()}
    _check_ids(groups, h, "privacy.user_groups", errs, "server")
    _check_ids(users, h, "privacy.users", errs, "user")
    _check_ids(servers, h, "privacy.servers", errs, "server")

    user_p = {}
    for u in h.users():
        user_p[u] = users.get(u) or groups.get(h.parent[u]) or layers.get(h.layer(u)) or default
    server_p = {}
    for s in h.servers():
        server_p[s] = servers.get(s) or layers.get(h.layer(s)) or DefensePipeline()
    return user_p, server_p


def _parse_aggregation(doc: Mapping, h: Hierarchy, errs: _Errors):
    sec = _section(doc, "aggregation", errs)
    unknown = set(sec) - {"default", "layers", "nodes", "trim_beta"}
    if unknown:
        errs.add(f"aggregation: unknown keys {sorted(unknown)}")
    default = sec.get("default", "fedavg")
    layers = _id_keys(sec.get("layers"), "aggregation.layers", errs)
    nodes = _id_keys(sec.get("nodes"), "aggregation.nodes", errs)
    for where, name in [("default", default), *((f"layers.{k}", v) for k, v in layers.items()),
                        *((f"nodes.{k}", v) for k, v in nodes.items())]:
        if name not in AGGREGATORS:
            errs.add(f"aggregation.{where}: unknown aggregator {name!r}")
    _check_ids(nodes, h, "aggregation.nodes", errs, "server")
    beta = sec.get("trim_beta", 0.1)
    if not _is_num(beta) or not 0 <= beta < 0.5:
        errs.add("aggregation.trim_beta: must lie in [0, 0.5)")
        beta = 0.1
    table = {s: nodes.get(s, layers.get(h.layer(s), default)) for s in h.servers()}
    return table, float(beta)


def _parse_masking(doc: Mapping, h: Hierarchy, errs: _Errors) -> frozenset[int]:
    sec = _section(doc, "secure_aggregation", errs)
    unknown = set(sec) - {"leaf_servers", "nodes", "layers"}
    if unknown:
        errs.add(f"secure_aggregation: unknown keys {sorted(unknown)}")
    chosen: set[int] = set()
    if sec.get("leaf_servers", False):
        chosen.update(h.leaf_servers())
    nodes = sec.get("nodes", [])
    if not isinstance(nodes, list) or not all(_is_int(n) for n in nodes):
        errs.add("secure_aggregation.nodes: expected a list of ids")
        nodes = []
    _check_ids(nodes, h, "secure_aggregation.nodes", errs, "server")
    chosen.update(n for n in nodes if n in h)
    layers = sec.get("layers", [])
    if not isinstance(layers, list) or not all(_is_int(n) for n in layers):
        errs.add("secure_aggregation.layers: expected a list of layer numbers")
        layers = []
    chosen.update(s for s in h.leaf_servers() if h.layer(s) in layers)
    leaf = set(h.leaf_servers())
    for n in sorted(chosen):
        if n in h and n not in leaf:
            errs.add(f"secure_aggregation: node {n} has no user children to mask")
    return frozenset(chosen & leaf)


def _policy(raw: Any, where: str, errs: _Errors) -> DetectionPolicy | None:
    if raw is None:
        return None
    if not isinstance(raw, Mapping):
        errs.add(f"{where}: expected a mapping")
        return None
    unknown = set(raw) - {"threshold", "response", "switch_to_median_on_notify"}
    if unknown:
        errs.add(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return DetectionPolicy(float(raw.get("threshold", 3.0)), Response(raw.get("response", "flag_only")),
                               bool(raw.get("switch_to_median_on_notify", False)))
    except (ValueError, TypeError) as exc:
        errs.add(f"{where}: {exc}")
        return None


def _parse_detection(doc: Mapping, h: Hierarchy, errs: _Errors) -> dict[int, DetectionPolicy]:
    sec = _section(doc, "detection", errs)
    unknown = set(sec) - {"default", "layers", "nodes"}
    if unknown:
        errs.add(f"detection: unknown keys {sorted(unknown)}")
    default = _policy(sec.get("default"), "detection.default", errs)
    layers = {k: _policy(v, f"detection.layers.{k}", errs)
              for k, v in _id_keys(sec.get("layers"), "detection.layers", errs).items()}
    nodes = {k: _policy(v, f"detection.nodes.{k}", errs)
             for k, v in _id_keys(sec.get("nodes"), "detection.nodes", errs).items()}
    _check_ids(nodes, h, "detection.nodes", errs, "server")
    out = {}
    for s in h.servers():
        pol = nodes[s] if s in nodes else layers.get(h.layer(s), default)
        if pol is not None:
            out[s] = pol
    return out


def _round_window(rec: Mapping, where: str, rounds: int, errs: _Errors) -> tuple[int, int | None]:
    lo = rec.get("active_from_round", 1)
    hi = rec.get("active_to_round")
    if not _is_int(lo) or lo < 1:
        errs.add(f"{where}.active_from_round: expected a positive integer")
        lo = 1
    if hi is not None and (not _is_int(hi) or hi < lo):
        errs.add(f"{where}.active_to_round: expected an integer >= active_from_round")
        hi = None
    return lo, hi


def _parse_adversaries(doc: Mapping, h: Hierarchy, rounds: int, errs: _Errors) -> tuple:
    raw = doc.get("adversaries", [])
    if not isinstance(raw, list):
        errs.add("adversaries: expected a list")
        return ()
    out = []
    for i, rec in enumerate(raw):
        where = f"adversaries[{i}]"
        if not isinstance(rec, Mapping):
            errs.add(f"{where}: expected a mapping")
            continue
        kind = rec.get("kind")
        lo, hi = _round_window(rec, where, rounds, errs)
        if kind == "passive_observer":
            at = rec.get("at")
            if not _is_int(at) or at not in h:
                errs.add(f"{where}.at: node {at!r} does not exist")
                continue
            out.append(PassiveObserver(at, lo, hi))
            continue
        gamma = rec.get("gamma", 1.0)
        if not _is_num(gamma):
            errs.add(f"{where}.gamma: expected a finite number")
            continue
        nid = rec.get("id")
        if kind == "malicious_user":
            if not _is_int(nid) or nid not in h or not h.node(nid).is_user:
                errs.add(f"{where}.id: {nid!r} is not a user")
                continue
            out.append(MaliciousUser(nid, float(gamma), lo, hi))
        elif kind == "malicious_server":
            if not _is_int(nid) or nid not in h or h.node(nid).kind is not NodeKind.GROUP_SERVER:
                errs.add(f"{where}.id: {nid!r} is not a group server")
                continue
            try:
                mode = ServerMode(rec.get("mode", "scale_up"))
            except ValueError:
                errs.add(f"{where}.mode: expected 'scale_up' or 'scale_down_broadcast'")
                continue
            scale = rec.get("perturbation_scale", 1.0)
            if not _is_num(scale) or scale < 0:
                errs.add(f"{where}.perturbation_scale: expected a non-negative number")
                continue
            out.append(MaliciousServer(nid, float(gamma), mode, float(scale), lo, hi))
        else:
            errs.add(f"{where}.kind: unknown adversary kind {kind!r}")
    return tuple(out)


def _pairs(raw: Any, keys: tuple[str, str], where: str, errs: _Errors) -> list[tuple[int, int]]:
    if raw is None:
        return []
    if not isinstance(raw, list):
        errs.add(f"{where}: expected a list")
        return []
    out = []
    for i, rec in enumerate(raw):
        if isinstance(rec, Mapping):
            a, b = rec.get(keys[0]), rec.get(keys[1])
        elif isinstance(rec, list) and len(rec) == 2:
            a, b = rec
        else:
            a = b = None
        if not (_is_int(a) and _is_int(b)):
            errs.add(f"{where}[{i}]: expected {{{keys[0]}: int, {keys[1]}: int}}")
            continue
        out.append((a, b))
    return out


def parse_config(doc: Mapping) -> ScenarioConfig:
    """Validate a decoded scenario document. Raises ConfigValidationError listing every problem."""
    errs = _Errors()
    if not isinstance(doc, Mapping):
        raise ConfigValidationError(["top level: expected a mapping"])
    unknown = set(doc) - TOP_LEVEL_KEYS
    if unknown:
        errs.add(f"top level: unknown keys {sorted(unknown)}")

    seed = doc.get("seed")
    if seed is None:
        errs.add("seed: missing (a master seed is mandatory)")
    elif not _is_int(seed) or seed < 0:
        errs.add("seed: expected a non-negative integer")

    h = _parse_hierarchy(doc, errs)
    data = _parse_data(doc, errs)
    arch, hp, user_hp = _parse_model(doc, data, h, errs)

    sched = _section(doc, "schedule", errs)
    rounds = sched.get("global_rounds", 1)
    if not _is_int(rounds) or rounds < 0:
        errs.add("schedule.global_rounds: expected a non-negative integer")
        rounds = 0
    unknown = set(sched) - {"global_rounds", "churn", "dropouts"}
    if unknown:
        errs.add(f"schedule: unknown keys {sorted(unknown)}")

    cost_sec = _section(doc, "cost", errs)
    verification = VerificationCost()
    vraw = cost_sec.get("verification", {"kind": "linear"})
    try:
        verification = VerificationCost(VerificationKind(vraw.get("kind", "linear")),
                                        float(vraw.get("base", 2.0)), float(vraw.get("k", 2.0)))
    except (ValueError, TypeError, AttributeError) as exc:
        errs.add(f"cost.verification: {exc}")

    for flag in ("evaluate_branches", "dump_trace"):
        if not isinstance(doc.get(flag, False), bool):
            errs.add(f"{flag}: expected true or false")
    out_dir = doc.get("output_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        errs.add("output_dir: expected a string")

    if h is None:
        raise ConfigValidationError(errs.items)

    user_p, server_p = _parse_privacy(doc, h, errs)
    aggregators, beta = _parse_aggregation(doc, h, errs)
    masked = _parse_masking(doc, h, errs)
    detection = _parse_detection(doc, h, errs)
    for n in sorted(masked):
        if aggregators.get(n) in ROBUST_AGGREGATORS:
            errs.add(f"node {n}: robust aggregator {aggregators[n]!r} conflicts with secure aggregation "
                     "(robust rules need unmasked inputs)")
        if n in detection:
            errs.add(f"node {n}: anomaly detection conflicts with secure aggregation "
                     "(detection needs unmasked inputs)")
    adversaries = _parse_adversaries(doc, h, rounds, errs)

    churn = _pairs(sched.get("churn"), ("round", "remove"), "schedule.churn", errs)
    for r, nid in churn:
        if not 1 <= r <= rounds:
            errs.add(f"schedule.churn: round {r} outside [1, {rounds}]")
        if nid not in h:
            errs.add(f"schedule.churn: node {nid} does not exist")
        elif nid == h.root:
            errs.add("schedule.churn: the root cannot churn out")
    dropouts = _pairs(sched.get("dropouts"), ("round", "user"), "schedule.dropouts", errs)
    for r, nid in dropouts:
        if not 1 <= r <= rounds:
            errs.add(f"schedule.dropouts: round {r} outside [1, {rounds}]")
        if nid not in h or not h.node(nid).is_user:
            errs.add(f"schedule.dropouts: {nid} is not a user")

    probes = []
    raw_probes = doc.get("probes", [])
    if not isinstance(raw_probes, list):
        errs.add("probes: expected a list")
        raw_probes = []
    for i, rec in enumerate(raw_probes):
        where = f"probes[{i}]"
        if not isinstance(rec, Mapping):
            errs.add(f"{where}: expected a mapping")
            continue
        t, r, obs = rec.get("target"), rec.get("round"), rec.get("observer")
        if not _is_int(t) or t not in h or not h.node(t).is_user:
            errs.add(f"{where}.target: {t!r} is not a user")
            continue
        if not _is_int(r) or not 1 <= r <= rounds:
            errs.add(f"{where}.round: must lie in [1, {rounds}]")
            continue
        if obs is not None and (not _is_int(obs) or obs not in h):
            errs.add(f"{where}.observer: node {obs!r} does not exist")
            continue
        if arch is not None and arch.kind is not ArchKind.LOGREG:
            errs.add(f"{where}: reconstruction probes need the logreg architecture")
        probes.append(Probe(t, r, obs))

    verify_at = cost_sec.get("verify_at", "all")
    if verify_at == "all":
        verify_set = None
    elif verify_at == "detecting":
        verify_set = frozenset(detection)
    elif isinstance(verify_at, list) and all(_is_int(v) for v in verify_at):
        _check_ids(verify_at, h, "cost.verify_at", errs, "server")
        verify_set = frozenset(verify_at)
    else:
        errs.add("cost.verify_at: expected 'all', 'detecting' or a list of server ids")
        verify_set = None
    unknown = set(cost_sec) - {"verification", "verify_at"}
    if unknown:
        errs.add(f"cost: unknown keys {sorted(unknown)}")

    if errs.items or arch is None:
        raise ConfigValidationError(errs.items or ["model: invalid architecture"])
    return ScenarioConfig(
        seed=seed,
        hierarchy=h,
        data=data,
        arch=arch,
        hyperparams=hp,
        global_rounds=rounds,
        user_hyperparams=user_hp,
        user_pipelines=user_p,
        server_pipelines=server_p,
        aggregators=aggregators,
        trim_beta=beta,
        masked_nodes=masked,
        detection=detection,
        adversaries=adversaries,
        probes=tuple(probes),
        churn=tuple(sorted(churn)),
        dropouts=tuple(sorted(dropouts)),
        verification=verification,
        verify_at=verify_set,
        evaluate_branches=bool(doc.get("evaluate_branches", False)),
        dump_trace=bool(doc.get("dump_trace", False)),
        output_dir=out_dir,
        name=str(doc.get("name", "scenario")),
    )


def read_document(path: str | os.PathLike) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigValidationError([f"cannot read {path}: {exc.strerror or exc}"]) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from None


def load_and_validate(path: str | os.PathLike) -> ScenarioConfig:
    return parse_config(read_document(path))


def flatten(cfg: ScenarioConfig) -> ScenarioConfig:
    """Same users, same seeds, all hanging directly off the root.

    Per-user settings survive. Settings of removed servers are dropped, and
    churn of a removed server becomes churn of each of its users.
    """
    h = cfg.hierarchy
    root = h.node(h.root)
    specs = [NodeSpec(h.root, NodeKind.ROOT, None, root.rounds_before_sync, root.sampling_fraction)]
    specs += [NodeSpec(u, NodeKind.USER, h.root) for u in h.users()]
    flat = build_hierarchy(specs)

    keep = {h.root}
    churn = []
    for r, nid in cfg.churn:
        if h.node(nid).is_user:
            churn.append((r, nid))
        else:
            churn.extend((r, u) for u in h.subtree_users(nid))
    adversaries = tuple(a for a in cfg.adversaries
                        if isinstance(a, MaliciousUser)
                        or (isinstance(a, PassiveObserver) and a.at in keep))
    probes = tuple(p if p.observer is None or p.observer in flat else replace(p, observer=h.root)
                   for p in cfg.probes)
    aggregator = cfg.aggregators.get(h.root, "fedavg")
    return replace(
        cfg,
        hierarchy=flat,
        server_pipelines={h.root: cfg.server_pipelines.get(h.root, DefensePipeline())},
        aggregators={h.root: aggregator},
        masked_nodes=frozenset(cfg.masked_nodes & keep),
        detection={k: v for k, v in cfg.detection.items() if k in keep},
        adversaries=adversaries,
        probes=probes,
        churn=tuple(sorted(set(churn))),
        verify_at=None if cfg.verify_at is None else frozenset({h.root} if cfg.verify_at else ()),
        name=f"{cfg.name}-flat",
    )
