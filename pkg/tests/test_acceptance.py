"""End-to-end acceptance criteria, one test each.

Every test records a PASS/FAIL line that is printed in the terminal summary.
"""

from __future__ import annotations

import json
import time

import numpy as np
from conftest import cfg_from, criterion, scenario_doc, two_level_doc
from oracles import central_difference, flat_fedavg_reference

from hflsim import scenarios
from hflsim.aggregation import MaskGroup, Update, fedavg, mask_updates, median_aggregate, unmask_on_dropout
from hflsim.cli import main
from hflsim.config import flatten, load_and_validate
from hflsim.engine import run_simulation
from hflsim.model import Arch, ArchKind, ModelParams, loss_and_grad
from hflsim.trace import INDIVIDUAL, UP


def depth3_doc(seed: int) -> dict:
    doc = two_level_doc(seed=seed, rounds=3)
    doc["hierarchy"]["nodes"] = [
        {"id": 0, "kind": "root"},
        {"id": 1, "kind": "group_server", "parent": 0},
        {"id": 2, "kind": "group_server", "parent": 0},
        {"id": 3, "kind": "group_server", "parent": 1},
        {"id": 4, "kind": "group_server", "parent": 1},
        {"id_range": [10, 12], "kind": "user", "parent": 3},
        {"id_range": [13, 14], "kind": "user", "parent": 4},
        {"id_range": [15, 18], "kind": "user", "parent": 2},
    ]
    return doc


def test_flat_equivalence():
    with criterion(1, "flat equivalence, depth 2 and 3, 10 seeds, <= 1e-12, < 10 s"):
        start = time.perf_counter()
        worst = 0.0
        for seed in range(10):
            for doc in (two_level_doc(seed=seed, groups=((10, 11, 12), (13, 14), (15, 16, 17, 18)), rounds=3),
                        depth3_doc(seed)):
                cfg = cfg_from(doc)
                assert cfg.hierarchy.depth() in (2, 3)
                got = run_simulation(cfg).final_model.values
                ref = flat_fedavg_reference(cfg).values
                worst = max(worst, float(np.max(np.abs(got - ref))))
        assert worst <= 1e-12, worst
        assert time.perf_counter() - start < 10


def test_gradient_check():
    with criterion(2, "analytic vs central-difference gradients, rel err < 1e-5, 20+ per arch"):
        rng = np.random.default_rng(2024)
        for arch in (Arch(ArchKind.LOGREG, 4, 3), Arch(ArchKind.MLP1, 3, 4, 6)):
            for _ in range(20):
                p = ModelParams(rng.normal(0, 0.8, arch.size), arch)
                n = int(rng.integers(1, 10))
                x, y = rng.normal(size=(n, arch.d)), rng.integers(0, arch.C, n)
                g = loss_and_grad(p, x, y)[1]
                fd = central_difference(p, x, y)
                rel = np.linalg.norm(g - fd) / max(np.linalg.norm(g) + np.linalg.norm(fd), 1e-12)
                assert rel < 1e-5, (arch.kind, rel)


def test_mask_cancellation():
    with criterion(3, "mask cancellation sizes 2-8 x 20 seeds, with dropouts, < 1e-9"):
        rng = np.random.default_rng(3)
        for size in range(2, 9):
            for seed in range(20):
                ups = [Update(rng.normal(size=6), float(rng.integers(1, 30)), o) for o in range(size)]
                group = MaskGroup(range(size), seed)
                masked = mask_updates(ups, group)
                assert np.max(np.abs(fedavg(masked).delta - fedavg(ups).delta)) < 1e-9
                alive = sorted(rng.choice(size, int(rng.integers(1, size + 1)), replace=False).tolist())
                corr = unmask_on_dropout(group, alive, 6)
                got = fedavg([masked[i] for i in alive], correction=corr).delta
                assert np.max(np.abs(got - fedavg([ups[i] for i in alive]).delta)) < 1e-9


def _probe_doc(defended: bool) -> dict:
    users = list(range(100, 200))
    doc = two_level_doc(seed=404, groups=(tuple(users[:50]), tuple(users[50:])), rounds=1)
    doc["data"]["n_per_class"] = 100
    doc["probes"] = [{"target": u, "round": 1} for u in users]
    if defended:
        doc["privacy"] = {"default": [{"clip": 1.0}, {"gauss": 0.1}]}
    return doc


def test_reconstruction_demonstration():
    with criterion(4, "probe recon error < 1e-6 undefended; >= 10x with Clip(1)+Gauss(0.1)"):
        plain = {p.target: p for p in run_simulation(cfg_from(_probe_doc(False))).probes}
        noisy = {p.target: p for p in run_simulation(cfg_from(_probe_doc(True))).probes}
        assert len(plain) == 100 and all(p.status == "ok" for p in plain.values())
        assert max(p.error for p in plain.values()) < 1e-6
        for u, p in plain.items():
            assert noisy[u].features == p.features  # same sample on both branches
            assert noisy[u].error >= 10 * p.error
        assert min(p.error for p in noisy.values()) > 1e-3


def test_robust_aggregation():
    with criterion(5, "median within benign range; fedavg deviation >= 10x median's"):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            base = rng.normal(size=8)
            benign = [Update(base + 0.1 * rng.normal(size=8), 1.0, i) for i in range(7)]
            bad = [benign[i].with_delta(100.0 * benign[i].delta) for i in range(3)]
            bad = [Update(b.delta, 1.0, 7 + i) for i, b in enumerate(bad)]
            stack = np.vstack([u.delta for u in benign])
            med = median_aggregate(benign + bad).delta
            assert np.all(med >= stack.min(axis=0)) and np.all(med <= stack.max(axis=0))
            mean = stack.mean(axis=0)
            dev_fedavg = np.max(np.abs(fedavg(benign + bad).delta - mean))
            dev_median = np.max(np.abs(med - mean))
            assert dev_fedavg >= 10 * dev_median


def test_detection_and_exclusion():
    with criterion(6, "poisoned_server: attacker flagged in first active round, acc@30 >= 0.95, < 60 s"):
        start = time.perf_counter()
        cfg = load_and_validate(scenarios.path("poisoned_server.cfg"))
        attacker = cfg.adversaries[0]
        res = run_simulation(cfg)
        first = [n for n in res.notifications if n.flagged == attacker.id]
        assert first and first[0].round == attacker.active_from_round
        assert attacker.id not in res.hierarchy
        assert res.root_metrics()[29].round == 30
        assert res.root_metrics()[29].test_accuracy >= 0.95
        assert time.perf_counter() - start < 60


def test_verification_cost_claim(tmp_path, capsys):
    with criterion(7, "Exp(2): flat 1048576 vs hierarchical 112 units/round in compare-flat"):
        assert main(["compare-flat", str(scenarios.path("cost_exp.cfg")), "--out", str(tmp_path)]) == 0
        table = capsys.readouterr().out
        report = json.loads((tmp_path / "compare.json").read_text())
        assert report["hierarchical"]["verify_units_per_round"] == 112
        assert report["flat"]["verify_units_per_round"] == 1048576
        row = next(line for line in table.splitlines() if line.startswith("verify units/round"))
        assert row.split()[-2:] == ["112", "1048576"]


def _masked_topologies():
    yield load_and_validate(scenarios.path("secure_leaves.cfg"))
    yield cfg_from(two_level_doc(seed=8, groups=((10, 11), (12, 13, 14)), rounds=3,
                                 secure_aggregation={"leaf_servers": True}))
    d3 = depth3_doc(5)
    d3["secure_aggregation"] = {"leaf_servers": True}
    yield cfg_from(d3)


def test_linkability_audit():
    with criterion(8, "leaf masking: zero upper-node links; flattened run links every sampled user"):
        for cfg in _masked_topologies():
            h = cfg.hierarchy
            assert h.depth() >= 2
            res = run_simulation(cfg)
            upper = set(h.servers()) - set(h.leaf_servers())
            assert not any(o in upper for o, _ in res.linkability.links)
            assert res.linkability.users_linked_to(h.root) == set()
            flat = run_simulation(flatten(cfg))
            sampled = {m.origin for m in flat.trace.messages if m.direction == UP and m.kind == INDIVIDUAL}
            assert sampled and flat.linkability.users_linked_to(h.root) == sampled


def test_determinism(tmp_path):
    with criterion(9, "two runs of every bundled scenario are byte-identical"):
        for name in scenarios.names():
            outs = []
            for k in range(2):
                out = tmp_path / f"{name}-{k}"
                assert main(["run", str(scenarios.path(name)), "--out", str(out)]) == 0
                assert main(["compare-flat", str(scenarios.path(name)), "--out", str(out)]) == 0
                outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
            assert outs[0] == outs[1], name
            assert "metrics.csv" in outs[0] and "compare.json" in outs[0]


def test_churn_safety():
    with criterion(10, "default scenario minus one leaf server at round 10 completes, acc >= 0.90"):
        doc = scenario_doc("fig1.cfg")
        doc["schedule"]["churn"] = [{"round": 10, "remove": 4}]
        res = run_simulation(cfg_from(doc))
        assert 4 not in res.hierarchy
        assert res.events[0]["event"] == "churn" and res.events[0]["round"] == 10
        assert len(res.root_metrics()) == 30
        assert res.root_metrics()[-1].test_accuracy >= 0.90
